#pragma once

// Source pretraining and the two-phase source-free adaptation loop.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "temsr/anchor_bank.hpp"
#include "temsr/datagen.hpp"
#include "temsr/losses.hpp"
#include "temsr/metrics.hpp"
#include "temsr/nets.hpp"

namespace temsr {

struct PretrainConfig {
  int epochs = 15;
  int batch_size = 32;
  OptimizerConfig optimizer{OptimizerConfig::Kind::adam, 1e-3};

  nlohmann::json to_json() const;
  static PretrainConfig from_json(const nlohmann::json& j);
};

enum class Variant { full, src_like_only, no_seg, no_ardm, no_bank };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

enum class DiscrepancyLayer { logits, features };

struct AdaptConfig {
  double lambda_seg = 1.0;
  double lambda_ardm = 1.0;
  double p_m = 1.0 / 8.0;
  double p_s = 6.0 / 8.0;
  double anchor_ratio = 0.3;
  double temperature = 0.05;
  bool normalize_features = true;
  SimPenalty sim_penalty = SimPenalty::absolute;
  int mask_blocks = 1;
  int epochs_total = 12;
  /// Negative selects the default ceil(epochs_total / 4).
  int epochs_srclike = -1;
  bool cycle = false;
  /// Also step F_T on L_TrgEnt during source-like epochs.
  bool trg_ent_in_srclike = false;
  int batch_size = 32;
  int recovery_hidden = 64;
  bool full_regeneration = false;
  OptimizerConfig recovery_optimizer{OptimizerConfig::Kind::adam, 1e-2};
  OptimizerConfig target_optimizer{OptimizerConfig::Kind::adam, 1e-4};
  Variant variant = Variant::full;
  KlEstimator kl_estimator = KlEstimator::gaussian;
  /// Representation compared by the discrepancy curves.
  DiscrepancyLayer discrepancy_layer = DiscrepancyLayer::features;
  /// Samples used for per-epoch discrepancy and MF1 snapshots (0 = all).
  int snapshot_samples = 256;
  std::uint64_t seed = 0;

  int resolved_srclike_epochs() const;
  Phase phase_of_epoch(int epoch) const;  // 0-based training epoch
  void validate() const;

  nlohmann::json to_json() const;
  static AdaptConfig from_json(const nlohmann::json& j);
};

struct SourceModel {
  Encoder encoder;
  Classifier classifier;
  double train_mf1 = 0.0;
  double heldout_mf1 = 0.0;
};

/// Cross-entropy training of encoder + classifier on a labeled source split.
SourceModel pretrain_source(const Dataset& train, const Dataset* heldout, const EncoderSpec& spec,
                            const PretrainConfig& config, std::uint64_t seed);

/// Predicted labels of G(F(x)) with F in eval mode, in batches.
std::vector<int> predict(Encoder& encoder, Classifier& classifier, const Batch& x);
double evaluate_mf1(Encoder& encoder, Classifier& classifier, const Dataset& labeled);

/// Which loss term delivered gradient into which module, per epoch.
struct GradientRouting {
  struct Key {
    int epoch;
    std::string phase;
    std::string term;
    std::string module;
    auto operator<=>(const Key&) const = default;
  };
  std::map<Key, double> norm;  // accumulated Frobenius norms of upstream gradients

  void record(int epoch, Phase phase, const std::string& term, const std::string& module,
              double value);
  /// True if `term` ever delivered nonzero gradient into `module` (optionally
  /// restricted to one phase).
  bool reached(const std::string& term, const std::string& module,
               std::optional<Phase> phase = std::nullopt) const;
};

/// Optional evaluation data for adapt().  None of it influences gradients.
struct AdaptEval {
  const Dataset* target_labeled = nullptr;  // MF1 logging
  const Dataset* source_heldout = nullptr;  // discrepancy snapshot only
};

struct RunArtifacts {
  std::vector<MetricsRow> metrics;  // row 0 = before adaptation
  DiscrepancyCurve discrepancy;
  double src_only_mf1 = 0.0;
  double final_mf1 = 0.0;
  std::vector<std::uint64_t> source_encoder_hashes;  // start + after every epoch
  std::vector<std::uint64_t> classifier_hashes;
  GradientRouting routing;
  std::optional<Encoder> target_encoder;
  std::optional<RecoveryModel> recovery;
  std::optional<AnchorBank> bank;
};

/// Source-free adaptation.  `source_encoder` and `classifier` must be frozen;
/// the target encoder is initialised as a copy of the source encoder.
RunArtifacts adapt(const Dataset& target, Encoder& source_encoder, Classifier& classifier,
                   const AdaptConfig& config, const AdaptEval& eval = {});

/// adapt() with `config.variant` overridden.
RunArtifacts run_ablation(Variant variant, const Dataset& target, Encoder& source_encoder,
                          Classifier& classifier, AdaptConfig config, const AdaptEval& eval = {});

/// Deterministic per-sample masks for evaluation passes.
std::vector<MaskSpec> eval_masks(int count, int length, const AdaptConfig& config,
                                 std::uint64_t stream);

}  // namespace temsr
