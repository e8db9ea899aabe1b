#include "temsr/config.hpp"

#include <cstdlib>
#include <fstream>

namespace temsr {

nlohmann::json synthetic_to_json(const SyntheticSpec& s) {
  return {{"classes", s.classes},
          {"channels", s.channels},
          {"length", s.length},
          {"train_per_class", s.train_per_class},
          {"test_per_class", s.test_per_class},
          {"base_frequency", s.base_frequency},
          {"frequency_step", s.frequency_step},
          {"noise_std", s.noise_std},
          {"ar_coefficient", s.ar_coefficient},
          {"shift",
           {{"amplitude_scale", s.shift.amplitude_scale},
            {"time_warp", s.shift.time_warp},
            {"channel_offset", s.shift.channel_offset},
            {"noise_scale", s.shift.noise_scale}}}};
}

SyntheticSpec synthetic_from_json(const nlohmann::json& j) {
  SyntheticSpec s;
  s.classes = j.value("classes", s.classes);
  s.channels = j.value("channels", s.channels);
  s.length = j.value("length", s.length);
  s.train_per_class = j.value("train_per_class", s.train_per_class);
  s.test_per_class = j.value("test_per_class", s.test_per_class);
  s.base_frequency = j.value("base_frequency", s.base_frequency);
  s.frequency_step = j.value("frequency_step", s.frequency_step);
  s.noise_std = j.value("noise_std", s.noise_std);
  s.ar_coefficient = j.value("ar_coefficient", s.ar_coefficient);
  if (j.contains("shift")) {
    const auto& sh = j.at("shift");
    if (sh.is_string()) {
      if (sh.get<std::string>() != "identity") throw ConfigError("shift must be an object or \"identity\"");
      s.shift = DomainShift::identity();
    } else {
      s.shift.amplitude_scale = sh.value("amplitude_scale", s.shift.amplitude_scale);
      s.shift.time_warp = sh.value("time_warp", s.shift.time_warp);
      s.shift.channel_offset = sh.value("channel_offset", s.shift.channel_offset);
      s.shift.noise_scale = sh.value("noise_scale", s.shift.noise_scale);
    }
  }
  s.validate();
  return s;
}

ExperimentConfig ExperimentConfig::with_seed(std::uint64_t s) const {
  ExperimentConfig c = *this;
  c.seed = s;
  c.adapt.seed = s;
  return c;
}

ProbeSetup ExperimentConfig::probe_setup() const {
  ProbeSetup p;
  p.data = data;
  p.encoder = encoder;
  p.pretrain = pretrain;
  p.adapt = adapt;
  p.epochs = probe_epochs;
  return p;
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j = {{"seed", seed},
                      {"data", synthetic_to_json(data)},
                      {"encoder", encoder.to_json()},
                      {"pretrain", pretrain.to_json()},
                      {"adapt", adapt.to_json()},
                      {"probe_epochs", probe_epochs}};
  if (files)
    j["files"] = {{"source_train", files->source_train.string()},
                  {"source_test", files->source_test.string()},
                  {"target_train", files->target_train.string()},
                  {"target_test", files->target_test.string()},
                  {"normalize", files->normalize}};
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  ExperimentConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    if (j.contains("data")) c.data = synthetic_from_json(j.at("data"));
    if (j.contains("files")) {
      const auto& f = j.at("files");
      DataFiles d;
      d.source_train = f.at("source_train").get<std::string>();
      d.source_test = f.at("source_test").get<std::string>();
      d.target_train = f.at("target_train").get<std::string>();
      d.target_test = f.at("target_test").get<std::string>();
      d.normalize = f.value("normalize", d.normalize);
      c.files = d;
    }
    if (j.contains("encoder")) c.encoder = EncoderSpec::from_json(j.at("encoder"));
    if (j.contains("pretrain")) c.pretrain = PretrainConfig::from_json(j.at("pretrain"));
    if (j.contains("adapt")) c.adapt = AdaptConfig::from_json(j.at("adapt"));
    c.probe_epochs = j.value("probe_epochs", c.probe_epochs);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  if (!c.files) c.encoder.in_channels = c.data.channels;
  if (!j.contains("adapt") || !j.at("adapt").contains("seed")) c.adapt.seed = c.seed;
  return c;
}

ExperimentConfig apply_env_overrides(ExperimentConfig c) {
  if (const char* s = std::getenv("TEMSR_SEED"); s && *s) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(s, &end, 10);
    if (*end != '\0') throw ConfigError("TEMSR_SEED must be an unsigned integer");
    c = c.with_seed(v);
  }
  return c;
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot read config '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return apply_env_overrides(ExperimentConfig::from_json(j));
}

void save_experiment(const ExperimentConfig& c, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write '" + path.string() + "'");
  os << c.to_json().dump(2) << '\n';
}

ExperimentData load_experiment_data(const ExperimentConfig& c, std::uint64_t seed) {
  if (!c.files)
    return {generate_domain_pair(c.data, seed, Split::train),
            generate_domain_pair(c.data, seed, Split::test)};
  const DataFiles& f = *c.files;
  Dataset st = load_dataset(f.source_train, Split::train);
  Dataset ss = load_dataset(f.source_test, Split::test);
  Dataset tt = load_dataset(f.target_train, Split::train);
  Dataset ts = load_dataset(f.target_test, Split::test);
  if (f.normalize) {
    const MinMaxStats src = fit_min_max(st);
    const MinMaxStats trg = fit_min_max(tt);
    st = apply_min_max(st, src);
    ss = apply_min_max(ss, src);
    tt = apply_min_max(tt, trg);
    ts = apply_min_max(ts, trg);
  }
  return {{std::move(st), std::move(tt)}, {std::move(ss), std::move(ts)}};
}

}  // namespace temsr
