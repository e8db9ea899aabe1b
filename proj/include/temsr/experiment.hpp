#pragma once

// Run-directory level commands shared by the CLI and the Python module.
//
// Every command writes `config.json` (the resolved configuration) and
// `manifest.json` (command, arguments, seeds, run id) into its output
// directory, so `rerun` can replay it.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "temsr/config.hpp"

namespace temsr {

namespace fs = std::filesystem;

struct Manifest {
  std::string command;
  nlohmann::json args = nlohmann::json::object();
  std::vector<std::uint64_t> seeds;
  std::string run_id;

  nlohmann::json to_json() const;
  static Manifest from_json(const nlohmann::json& j);
};

/// Hex digest of the command, its arguments and the resolved config.
std::string make_run_id(const std::string& command, const nlohmann::json& args,
                        const ExperimentConfig& config);

Manifest read_manifest(const fs::path& run_dir);

struct PretrainSummary {
  double train_mf1 = 0.0;
  double heldout_mf1 = 0.0;
  double target_mf1 = 0.0;  // SRC-only on held-out target
};

PretrainSummary cmd_pretrain(const ExperimentConfig& config, const fs::path& out);

struct AdaptSummary {
  double src_only_mf1 = 0.0;
  double final_mf1 = 0.0;
  bool source_frozen = false;  // F_S and G hashes constant through the run
};

/// Pretrains inline (and saves source.ckpt) when `source_ckpt` is empty.
AdaptSummary cmd_adapt(const ExperimentConfig& config, const std::optional<fs::path>& source_ckpt,
                       const fs::path& out);

struct AblationRow {
  std::string variant;
  std::uint64_t seed = 0;
  double src_only_mf1 = 0.0;
  double mf1 = 0.0;
};

std::vector<AblationRow> cmd_ablate(const ExperimentConfig& config,
                                    const std::vector<Variant>& variants,
                                    const std::vector<std::uint64_t>& seeds, const fs::path& out);

inline const std::vector<std::string> kSweepParams = {"lambda_seg", "lambda_ardm", "p_s", "p_m",
                                                      "anchor_ratio"};
/// Published grid for each sweepable parameter.
std::vector<double> default_sweep_values(const std::string& param);

struct SweepRow {
  std::string param;
  double value = 0.0;
  std::uint64_t seed = 0;
  double src_only_mf1 = 0.0;
  double mf1 = 0.0;
};

std::vector<SweepRow> cmd_sweep(const ExperimentConfig& config, const std::string& param,
                                const std::vector<double>& values,
                                const std::vector<std::uint64_t>& seeds, const fs::path& out);

inline const std::vector<std::string> kVerifySuites = {"gradients", "oracles", "collapse",
                                                       "diversity"};

/// Runs the suites and writes verify.jsonl.  True when every property passed.
bool cmd_verify(const ExperimentConfig& config, const std::vector<std::string>& suites,
                const std::vector<std::uint64_t>& seeds, const fs::path& out,
                std::vector<PropertyReport>* reports = nullptr);

/// Reads metrics.csv (and summary.json when present) from `run_dir` and
/// writes report.md, losses.svg and discrepancy.svg next to them.
void cmd_report(const fs::path& run_dir);

/// Replays the command recorded in `run_dir` into `out`.
void cmd_rerun(const fs::path& run_dir, const fs::path& out);

}  // namespace temsr
