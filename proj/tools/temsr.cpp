// Command-line front end: pretrain, adapt, ablate, sweep, verify, report, rerun.

#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "temsr/experiment.hpp"

using namespace temsr;

namespace {

ExperimentConfig config_or_default(const std::string& path) {
  if (path.empty()) return apply_env_overrides(ExperimentConfig{});
  return load_experiment(path);
}

std::vector<std::uint64_t> seeds_or(const std::vector<std::uint64_t>& given,
                                    const ExperimentConfig& c) {
  return given.empty() ? std::vector<std::uint64_t>{c.seed} : given;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Source-free time-series domain adaptation with temporal recovery"};
  app.require_subcommand(1);

  std::string config_path, out, source_model, run_dir, param, suite_arg = "all";
  std::vector<std::string> variants, suites;
  std::vector<std::uint64_t> seeds;
  std::vector<double> values;

  auto* pre = app.add_subcommand("pretrain", "Train the source encoder and classifier");
  pre->add_option("--config", config_path, "Experiment config (JSON)");
  pre->add_option("--out", out, "Output directory")->required();

  auto* ad = app.add_subcommand("adapt", "Adapt a source model to the target domain");
  ad->add_option("--config", config_path, "Experiment config (JSON)");
  ad->add_option("--source-model", source_model, "source.ckpt from `pretrain`");
  ad->add_option("--out", out, "Output directory")->required();

  auto* ab = app.add_subcommand("ablate", "Run ablation variants over several seeds");
  ab->add_option("--config", config_path, "Experiment config (JSON)");
  ab->add_option("--variants", variants, "full, src_like_only, no_seg, no_ardm, no_bank")
      ->delimiter(',');
  ab->add_option("--seeds", seeds, "Seeds")->delimiter(',');
  ab->add_option("--out", out, "Output directory")->required();

  auto* sw = app.add_subcommand("sweep", "Sensitivity sweep over one hyperparameter");
  sw->add_option("--config", config_path, "Experiment config (JSON)");
  sw->add_option("--param", param, "lambda_seg, lambda_ardm, p_s, p_m or anchor_ratio")->required();
  sw->add_option("--values", values, "Grid (defaults to the published grid)")->delimiter(',');
  sw->add_option("--seeds", seeds, "Seeds")->delimiter(',');
  sw->add_option("--out", out, "Output directory")->required();

  auto* ve = app.add_subcommand("verify", "Property suites; exit code 1 on any failure");
  ve->add_option("--config", config_path, "Experiment config (JSON)");
  ve->add_option("--suite", suites, "gradients, oracles, collapse, diversity or all")
      ->delimiter(',');
  ve->add_option("--seeds", seeds, "Seeds for the probes")->delimiter(',');
  ve->add_option("--out", out, "Output directory")->required();

  auto* re = app.add_subcommand("report", "Render tables and plots from a run directory");
  re->add_option("--run-dir", run_dir, "Directory holding metrics.csv")->required();

  auto* rr = app.add_subcommand("rerun", "Replay a run from its manifest");
  rr->add_option("--run-dir", run_dir, "Directory holding manifest.json")->required();
  rr->add_option("--out", out, "Output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (pre->parsed()) {
      const auto s = cmd_pretrain(config_or_default(config_path), out);
      fmt::print("source train MF1 {:.4f}  held-out {:.4f}  target (SRC-only) {:.4f}\n",
                 s.train_mf1, s.heldout_mf1, s.target_mf1);
    } else if (ad->parsed()) {
      std::optional<fs::path> src;
      if (!source_model.empty()) src = source_model;
      const auto s = cmd_adapt(config_or_default(config_path), src, out);
      fmt::print("SRC-only MF1 {:.4f}  adapted MF1 {:.4f}\n", s.src_only_mf1, s.final_mf1);
    } else if (ab->parsed()) {
      const auto c = config_or_default(config_path);
      std::vector<Variant> vs;
      if (variants.empty()) variants = {"full", "src_like_only", "no_seg", "no_ardm", "no_bank"};
      for (const auto& v : variants) vs.push_back(variant_from_string(v));
      cmd_ablate(c, vs, seeds_or(seeds, c), out);
      std::ifstream table(fs::path(out) / "ablation.csv");
      std::cout << table.rdbuf();
    } else if (sw->parsed()) {
      const auto c = config_or_default(config_path);
      if (values.empty()) values = default_sweep_values(param);
      const auto rows = cmd_sweep(c, param, values, seeds_or(seeds, c), out);
      fmt::print("{} runs written to {}\n", rows.size(), out);
    } else if (ve->parsed()) {
      const auto c = config_or_default(config_path);
      if (suites.empty() || (suites.size() == 1 && suites[0] == "all")) suites = kVerifySuites;
      std::vector<PropertyReport> reports;
      const bool ok = cmd_verify(c, suites, seeds.empty() ? std::vector<std::uint64_t>{1, 2, 3} : seeds,
                                 out, &reports);
      for (const auto& r : reports) fmt::print("{} {}\n", r.passed ? "PASS" : "FAIL", r.name);
      return ok ? 0 : 1;
    } else if (re->parsed()) {
      cmd_report(run_dir);
      fmt::print("wrote report.md, losses.svg, mf1.svg, discrepancy.svg in {}\n", run_dir);
    } else if (rr->parsed()) {
      cmd_rerun(run_dir, out);
      fmt::print("replayed {} into {}\n", read_manifest(run_dir).command, out);
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
