#pragma once

// Property suites: finite-difference gradient checks, brute-force loss
// oracles, and the collapse / diversity probes on the recovery model.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "temsr/trainer.hpp"

namespace temsr {

struct PropertyReport {
  std::string name;
  bool passed = false;
  nlohmann::json stats = nlohmann::json::object();
  std::vector<std::uint64_t> seeds;

  nlohmann::json to_json() const;
};

void write_reports(std::ostream& os, const std::vector<PropertyReport>& reports);

// ---------------------------------------------------------------------------
// Gradient checks and oracles

inline const std::vector<std::string> kGradientChecks = {
    "entropy",      "coral",          "ardm_features",  "ardm",
    "seg_loss",     "sample_entropy", "trg_ent",        "encoder_params",
    "classifier",   "recovery",       "bn_train_input"};

inline const std::vector<std::string> kOracleChecks = {"entropy", "seg_sim", "coral", "ardm"};

/// Central differences (step h) against the analytic gradient on a tiny
/// float64 instance.  Reports the worst relative error
/// |a - n| / max(|a|, |n|, floor).
PropertyReport gradient_check(const std::string& name, double tolerance = 1e-4,
                              std::uint64_t seed = 7);

/// Compares a loss with a from-the-formula evaluation over `trials` random
/// instances and reports the largest absolute discrepancy.
PropertyReport oracle_check(const std::string& name, int trials = 100, double tolerance = 1e-7,
                            std::uint64_t seed = 11);

// ---------------------------------------------------------------------------
// Probes

/// Everything a probe needs to build its own source model and target data.
struct ProbeSetup {
  SyntheticSpec data;
  EncoderSpec encoder;
  PretrainConfig pretrain;
  AdaptConfig adapt;
  int epochs = 4;  // source-like epochs K
};

struct CollapseStats {
  double mean_entropy = 0.0;  // nats, G(F_S(X_Sl)) on held-out target
  double relative_std = 0.0;  // across-batch std in masked regions / data std
};

/// Statistics of a trained recovery model over `x` with the given masks.
CollapseStats collapse_stats(const RecoveryModel& recovery, Encoder& fs, Classifier& g,
                             const Batch& x, std::span<const MaskSpec> masks);

struct DiversityStats {
  double pairwise = 0.0;     // mean distance between recovered features
  double to_original = 0.0;  // mean recovered-to-original feature distance
};

DiversityStats diversity_stats(const RecoveryModel& recovery, Encoder& fs, const Batch& x,
                               std::span<const MaskSpec> masks);

struct CollapseThresholds {
  double max_std = 0.10;            // collapse side
  double max_entropy_frac = 0.05;   // of ln C
  double min_std = 0.50;            // healthy side
};

/// Trains only the recovery model (source-like branch, no alignment) for
/// `setup.epochs` epochs per seed.  With `expect_collapse` the report passes
/// when every seed collapses; otherwise when every seed stays above min_std.
PropertyReport collapse_probe(double p_m, bool ardm_enabled, bool expect_collapse,
                              const ProbeSetup& setup, const std::vector<std::uint64_t>& seeds,
                              const CollapseThresholds& thresholds = {});

/// ARDM on versus off with otherwise identical runs.  Passes when the
/// pairwise recovered-feature distance is strictly larger with ARDM in every
/// seed; the recovered-to-original distance is reported alongside.
PropertyReport diversity_probe(const ProbeSetup& setup, const std::vector<std::uint64_t>& seeds);

}  // namespace temsr
