#pragma once

// One JSON document describing a whole experiment: data, networks,
// pretraining, adaptation and the seed.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "temsr/datagen.hpp"
#include "temsr/nets.hpp"
#include "temsr/trainer.hpp"
#include "temsr/verify.hpp"

namespace temsr {

nlohmann::json synthetic_to_json(const SyntheticSpec& s);
SyntheticSpec synthetic_from_json(const nlohmann::json& j);

/// Dataset files that replace the synthetic generator when present.
struct DataFiles {
  std::filesystem::path source_train;
  std::filesystem::path source_test;
  std::filesystem::path target_train;
  std::filesystem::path target_test;
  bool normalize = true;  // min-max with statistics of each train split
};

struct ExperimentConfig {
  SyntheticSpec data;
  std::optional<DataFiles> files;
  EncoderSpec encoder;
  PretrainConfig pretrain;
  AdaptConfig adapt;
  int probe_epochs = 6;
  std::uint64_t seed = 0;

  /// Copy with `seed` pushed into the adaptation config.
  ExperimentConfig with_seed(std::uint64_t s) const;
  ProbeSetup probe_setup() const;

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
};

/// Reads a config file; TEMSR_SEED, when set, overrides the seed.
ExperimentConfig load_experiment(const std::filesystem::path& path);
void save_experiment(const ExperimentConfig& c, const std::filesystem::path& path);
/// Applies the TEMSR_SEED override, if any.
ExperimentConfig apply_env_overrides(ExperimentConfig c);

struct ExperimentData {
  DomainPair train;
  DomainPair test;
};

/// Synthetic pair for `seed`, or the configured files.
ExperimentData load_experiment_data(const ExperimentConfig& c, std::uint64_t seed);

}  // namespace temsr
