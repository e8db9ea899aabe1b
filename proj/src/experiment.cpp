#include "temsr/experiment.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include <fmt/format.h>

#include "temsr/plot.hpp"

namespace temsr {

nlohmann::json Manifest::to_json() const {
  return {{"command", command}, {"args", args}, {"seeds", seeds}, {"run_id", run_id},
          {"config", "config.json"}};
}

Manifest Manifest::from_json(const nlohmann::json& j) {
  Manifest m;
  m.command = j.at("command").get<std::string>();
  m.args = j.value("args", nlohmann::json::object());
  m.seeds = j.value("seeds", std::vector<std::uint64_t>{});
  m.run_id = j.value("run_id", std::string());
  return m;
}

std::string make_run_id(const std::string& command, const nlohmann::json& args,
                        const ExperimentConfig& config) {
  const std::string text = command + '\n' + args.dump() + '\n' + config.to_json().dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return fmt::format("{:016x}", h).substr(0, 12);
}

namespace {

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write '" + path.string() + "'");
  os << j.dump(2) << '\n';
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot read '" + path.string() + "'");
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

void begin_run(const fs::path& out, const std::string& command, const nlohmann::json& args,
               const ExperimentConfig& config, std::vector<std::uint64_t> seeds) {
  fs::create_directories(out);
  save_experiment(config, out / "config.json");
  Manifest m{command, args, std::move(seeds), make_run_id(command, args, config)};
  write_json(out / "manifest.json", m.to_json());
}

SourceModel load_source(const fs::path& path) {
  if (!fs::exists(path)) throw UsageError("source checkpoint '" + path.string() + "' not found");
  LoadedCheckpoint ck = load_checkpoint(path);
  if (ck.networks.size() != 2) throw FormatError("source checkpoint must hold encoder and classifier");
  SourceModel m{ck.get<Encoder>(0), ck.get<Classifier>(1)};
  m.encoder.set_frozen(true);
  m.classifier.set_frozen(true);
  return m;
}

void save_source(SourceModel& m, const fs::path& path) {
  Network* nets[] = {&m.encoder, &m.classifier};
  save_checkpoint(path, nets);
}

SourceModel pretrain_for(const ExperimentConfig& c, const ExperimentData& d, std::uint64_t seed) {
  EncoderSpec spec = c.encoder;
  spec.in_channels = d.train.source.channels();
  return pretrain_source(d.train.source, &d.test.source, spec, c.pretrain, seed);
}

void write_discrepancy_csv(const fs::path& path, const DiscrepancyCurve& curve) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write '" + path.string() + "'");
  os << "epoch,KL_src_srclike,KL_srclike_trg,KL_src_trg\n";
  for (const auto& r : curve.rows)
    os << fmt::format("{},{:.17g},{:.17g},{:.17g}\n", r.epoch, r.src_srclike, r.srclike_trg,
                      r.src_trg);
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0};
}

void set_param(AdaptConfig& a, const std::string& name, double v) {
  if (name == "lambda_seg") a.lambda_seg = v;
  else if (name == "lambda_ardm") a.lambda_ardm = v;
  else if (name == "p_s") a.p_s = v;
  else if (name == "p_m") a.p_m = v;
  else if (name == "anchor_ratio") a.anchor_ratio = v;
  else throw UsageError("unknown sweep parameter '" + name + "'");
}

}  // namespace

Manifest read_manifest(const fs::path& run_dir) {
  return Manifest::from_json(read_json(run_dir / "manifest.json"));
}

PretrainSummary cmd_pretrain(const ExperimentConfig& config, const fs::path& out) {
  begin_run(out, "pretrain", nlohmann::json::object(), config, {config.seed});
  const ExperimentData d = load_experiment_data(config, config.seed);
  SourceModel m = pretrain_for(config, d, config.seed);
  save_source(m, out / "source.ckpt");
  PretrainSummary s{m.train_mf1, m.heldout_mf1, 0.0};
  if (d.test.target.has_labels()) s.target_mf1 = evaluate_mf1(m.encoder, m.classifier, d.test.target);
  write_json(out / "pretrain.json", {{"train_mf1", s.train_mf1},
                                     {"source_heldout_mf1", s.heldout_mf1},
                                     {"target_src_only_mf1", s.target_mf1}});
  return s;
}

AdaptSummary cmd_adapt(const ExperimentConfig& config, const std::optional<fs::path>& source_ckpt,
                       const fs::path& out) {
  nlohmann::json args = nlohmann::json::object();
  if (source_ckpt) args["source_model"] = fs::absolute(*source_ckpt).string();
  begin_run(out, "adapt", args, config, {config.seed});

  const ExperimentData d = load_experiment_data(config, config.seed);
  SourceModel m = source_ckpt ? load_source(*source_ckpt) : pretrain_for(config, d, config.seed);
  if (!source_ckpt) save_source(m, out / "source.ckpt");

  AdaptConfig ac = config.adapt;
  RunArtifacts art = adapt(d.train.target, m.encoder, m.classifier, ac,
                           {d.test.target.has_labels() ? &d.test.target : nullptr,
                            d.test.source.size() >= 2 ? &d.test.source : nullptr});

  Network* trg[] = {&*art.target_encoder};
  save_checkpoint(out / "target.ckpt", trg);
  Network* rec[] = {&*art.recovery};
  save_checkpoint(out / "recovery.ckpt", rec);
  art.bank->save_snapshot(out / "bank.snapshot");
  write_metrics_csv(out / "metrics.csv", art.metrics);
  write_discrepancy_csv(out / "discrepancy.csv", art.discrepancy);

  auto constant = [](const std::vector<std::uint64_t>& h) {
    return std::all_of(h.begin(), h.end(), [&](std::uint64_t v) { return v == h.front(); });
  };
  AdaptSummary s{art.src_only_mf1, art.final_mf1,
                 constant(art.source_encoder_hashes) && constant(art.classifier_hashes)};
  nlohmann::json routing = nlohmann::json::array();
  for (const auto& [k, v] : art.routing.norm)
    routing.push_back({{"epoch", k.epoch}, {"phase", k.phase}, {"term", k.term},
                       {"module", k.module}, {"grad_norm", v}});
  write_json(out / "summary.json", {{"src_only_mf1", s.src_only_mf1},
                                    {"final_mf1", s.final_mf1},
                                    {"source_frozen", s.source_frozen},
                                    {"variant", to_string(ac.variant)},
                                    {"routing", routing}});
  return s;
}

std::vector<AblationRow> cmd_ablate(const ExperimentConfig& config,
                                    const std::vector<Variant>& variants,
                                    const std::vector<std::uint64_t>& seeds, const fs::path& out) {
  nlohmann::json names = nlohmann::json::array();
  for (Variant v : variants) names.push_back(to_string(v));
  begin_run(out, "ablate", {{"variants", names}}, config, seeds);

  std::vector<AblationRow> rows;
  for (std::uint64_t seed : seeds) {
    const ExperimentConfig c = config.with_seed(seed);
    const ExperimentData d = load_experiment_data(c, seed);
    SourceModel m = pretrain_for(c, d, seed);
    for (Variant v : variants) {
      const RunArtifacts art = run_ablation(v, d.train.target, m.encoder, m.classifier, c.adapt,
                                            {&d.test.target, nullptr});
      rows.push_back({to_string(v), seed, art.src_only_mf1, art.final_mf1});
    }
  }

  std::ofstream runs(out / "ablation_runs.csv");
  runs << "variant,seed,src_only_mf1,mf1\n";
  for (const auto& r : rows)
    runs << fmt::format("{},{},{:.17g},{:.17g}\n", r.variant, r.seed, r.src_only_mf1, r.mf1);
  std::ofstream table(out / "ablation.csv");
  table << "variant,mf1_mean,mf1_std,runs,mf1\n";
  for (Variant v : variants) {
    std::vector<double> vals;
    for (const auto& r : rows)
      if (r.variant == to_string(v)) vals.push_back(100.0 * r.mf1);
    const auto [m, s] = mean_std(vals);
    table << fmt::format("{},{:.4f},{:.4f},{},{:.2f} ± {:.2f}\n", to_string(v), m, s, vals.size(), m, s);
  }
  return rows;
}

std::vector<double> default_sweep_values(const std::string& param) {
  if (param == "lambda_seg" || param == "lambda_ardm") return {1e-3, 1e-2, 1e-1, 1, 10, 50, 100};
  if (param == "p_s" || param == "p_m") return {7.0 / 8, 6.0 / 8, 5.0 / 8, 4.0 / 8, 3.0 / 8, 2.0 / 8};
  if (param == "anchor_ratio") return {0.1, 0.3, 0.5, 0.7, 0.9};
  throw UsageError("unknown sweep parameter '" + param + "'");
}

std::vector<SweepRow> cmd_sweep(const ExperimentConfig& config, const std::string& param,
                                const std::vector<double>& values,
                                const std::vector<std::uint64_t>& seeds, const fs::path& out) {
  {
    AdaptConfig probe = config.adapt;
    for (double v : values) set_param(probe, param, v);
  }
  begin_run(out, "sweep", {{"param", param}, {"values", values}}, config, seeds);
  std::vector<SweepRow> rows;
  for (std::uint64_t seed : seeds) {
    const ExperimentConfig c = config.with_seed(seed);
    const ExperimentData d = load_experiment_data(c, seed);
    SourceModel m = pretrain_for(c, d, seed);
    for (double v : values) {
      AdaptConfig ac = c.adapt;
      set_param(ac, param, v);
      const RunArtifacts art = adapt(d.train.target, m.encoder, m.classifier, ac, {&d.test.target, nullptr});
      rows.push_back({param, v, seed, art.src_only_mf1, art.final_mf1});
    }
  }

  std::ofstream runs(out / "sweep_runs.csv");
  runs << "param,value,seed,src_only_mf1,mf1\n";
  for (const auto& r : rows)
    runs << fmt::format("{},{:.17g},{},{:.17g},{:.17g}\n", r.param, r.value, r.seed, r.src_only_mf1, r.mf1);
  std::ofstream curve(out / "sweep_curve.csv");
  curve << "param,value,mf1_mean,mf1_std,runs\n";
  Series s{"MF1 (mean over seeds)", {}, {}};
  for (double v : values) {
    std::vector<double> vals;
    for (const auto& r : rows)
      if (r.value == v) vals.push_back(r.mf1);
    const auto [m, sd] = mean_std(vals);
    curve << fmt::format("{},{:.17g},{:.17g},{:.17g},{}\n", param, v, m, sd, vals.size());
    s.x.push_back(v);
    s.y.push_back(m);
  }
  std::vector<std::size_t> order(s.x.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return s.x[a] < s.x[b]; });
  Series sorted{s.name, {}, {}};
  for (auto i : order) {
    sorted.x.push_back(s.x[i]);
    sorted.y.push_back(s.y[i]);
  }
  const bool log_x = param == "lambda_seg" || param == "lambda_ardm";
  write_line_chart(out / "sweep.svg", {"Sensitivity of target MF1 to " + param, param, "MF1", log_x},
                   {sorted});
  return rows;
}

bool cmd_verify(const ExperimentConfig& config, const std::vector<std::string>& suites,
                const std::vector<std::uint64_t>& seeds, const fs::path& out,
                std::vector<PropertyReport>* reports_out) {
  begin_run(out, "verify", {{"suites", suites}}, config, seeds);
  std::vector<PropertyReport> reports;
  const ProbeSetup setup = config.probe_setup();
  for (const auto& suite : suites) {
    if (suite == "gradients") {
      for (const auto& n : kGradientChecks) reports.push_back(gradient_check(n));
    } else if (suite == "oracles") {
      for (const auto& n : kOracleChecks) reports.push_back(oracle_check(n));
    } else if (suite == "collapse") {
      reports.push_back(collapse_probe(6.0 / 8.0, false, true, setup, seeds));
      reports.push_back(collapse_probe(1.0 / 8.0, true, false, setup, seeds));
    } else if (suite == "diversity") {
      reports.push_back(diversity_probe(setup, seeds));
    } else {
      throw UsageError("unknown verify suite '" + suite + "'");
    }
  }
  std::ofstream os(out / "verify.jsonl");
  if (!os) throw FormatError("cannot write verify.jsonl");
  write_reports(os, reports);
  const bool ok = std::all_of(reports.begin(), reports.end(), [](const auto& r) { return r.passed; });
  if (reports_out) *reports_out = std::move(reports);
  return ok;
}

void cmd_report(const fs::path& run_dir) {
  const fs::path metrics_path = run_dir / "metrics.csv";
  if (!fs::exists(metrics_path)) throw UsageError("no metrics.csv in '" + run_dir.string() + "'");
  const auto rows = read_metrics_csv(metrics_path);
  if (rows.empty()) throw FormatError("metrics.csv has no rows");

  std::ofstream md(run_dir / "report.md");
  if (!md) throw FormatError("cannot write report.md");
  md << "# Run report\n\n";
  if (fs::exists(run_dir / "summary.json")) {
    const auto s = read_json(run_dir / "summary.json");
    md << "| | MF1 |\n|---|---|\n";
    md << fmt::format("| SRC-only | {:.2f} |\n", 100.0 * s.value("src_only_mf1", 0.0));
    md << fmt::format("| adapted ({}) | {:.2f} |\n\n", s.value("variant", std::string("full")),
                      100.0 * s.value("final_mf1", 0.0));
  }
  md << "| epoch | phase | L_Seg | L_ARDM | L_Align | L_TrgEnt | MF1 | KL(src,src-like) | "
        "KL(src-like,trg) | KL(src,trg) |\n";
  md << "|---|---|---|---|---|---|---|---|---|---|\n";
  for (const auto& r : rows)
    md << fmt::format("| {} | {} | {:.4g} | {:.4g} | {:.4g} | {:.4g} | {:.2f} | {:.4g} | {:.4g} | {:.4g} |\n",
                      r.epoch, r.phase, r.l_seg, r.l_ardm, r.l_align, r.l_trg_ent,
                      100.0 * r.mf1_target, r.kl_src_srclike, r.kl_srclike_trg, r.kl_src_trg);

  Series seg{"L_Seg", {}, {}}, ardm{"L_ARDM", {}, {}}, align{"L_Align", {}, {}},
      ent{"L_TrgEnt", {}, {}}, mf1{"MF1 x 100", {}, {}};
  Series k1{"KL(src||src-like)", {}, {}}, k2{"KL(src-like||trg)", {}, {}},
      k3{"KL(src||trg)", {}, {}};
  for (const auto& r : rows) {
    const double e = r.epoch;
    if (r.epoch > 0) {
      for (auto [s, v] : {std::pair{&seg, r.l_seg}, {&ardm, r.l_ardm}, {&align, r.l_align}, {&ent, r.l_trg_ent}}) {
        s->x.push_back(e);
        s->y.push_back(v);
      }
    }
    mf1.x.push_back(e);
    mf1.y.push_back(100.0 * r.mf1_target);
    for (auto [s, v] : {std::pair{&k1, r.kl_src_srclike}, {&k2, r.kl_srclike_trg}, {&k3, r.kl_src_trg}}) {
      s->x.push_back(e);
      s->y.push_back(v);
    }
  }
  write_line_chart(run_dir / "losses.svg", {"Per-epoch losses", "epoch", "loss"},
                   {seg, ardm, align, ent});
  write_line_chart(run_dir / "mf1.svg", {"Target MF1", "epoch", "MF1"}, {mf1});
  write_line_chart(run_dir / "discrepancy.svg", {"Distribution discrepancy", "epoch", "KL (nats)"},
                   {k1, k2, k3});
}

void cmd_rerun(const fs::path& run_dir, const fs::path& out) {
  const Manifest m = read_manifest(run_dir);
  const ExperimentConfig c = ExperimentConfig::from_json(read_json(run_dir / "config.json"));
  if (m.command == "pretrain") {
    cmd_pretrain(c, out);
  } else if (m.command == "adapt") {
    std::optional<fs::path> src;
    if (m.args.contains("source_model")) src = m.args.at("source_model").get<std::string>();
    cmd_adapt(c, src, out);
  } else if (m.command == "ablate") {
    std::vector<Variant> vs;
    for (const auto& v : m.args.at("variants")) vs.push_back(variant_from_string(v.get<std::string>()));
    cmd_ablate(c, vs, m.seeds, out);
  } else if (m.command == "sweep") {
    cmd_sweep(c, m.args.at("param").get<std::string>(),
              m.args.at("values").get<std::vector<double>>(), m.seeds, out);
  } else if (m.command == "verify") {
    cmd_verify(c, m.args.at("suites").get<std::vector<std::string>>(), m.seeds, out);
  } else {
    throw UsageError("manifest names unknown command '" + m.command + "'");
  }
}

}  // namespace temsr
