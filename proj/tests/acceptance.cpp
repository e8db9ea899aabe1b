// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails.  `acceptance 3 7` runs a subset.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

#include <fmt/format.h>

#include "temsr/experiment.hpp"
#include "temsr/segments.hpp"
#include "temsr/trainer.hpp"
#include "temsr/verify.hpp"

using namespace temsr;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool passed = false;
  std::string detail;
};

// Default experiment, as shipped.
const ExperimentConfig kDefault{};

struct AdaptRun {
  double src_only = 0.0;
  double adapted = 0.0;
  RunArtifacts art;
};

// Pretrain + adapt on the default synthetic pair (or its identity-shift
// twin) for one seed.  Cached: several criteria read the same runs.
const AdaptRun& default_run(std::uint64_t seed, bool identity = false,
                            Variant variant = Variant::full) {
  static std::map<std::tuple<std::uint64_t, bool, int>, AdaptRun> cache;
  static std::map<std::pair<std::uint64_t, bool>, SourceModel> sources;
  const auto key = std::make_tuple(seed, identity, static_cast<int>(variant));
  if (auto it = cache.find(key); it != cache.end()) return it->second;

  ExperimentConfig c = kDefault.with_seed(seed);
  if (identity) c.data.shift = DomainShift::identity();
  const ExperimentData d = load_experiment_data(c, seed);
  auto src = sources.find({seed, identity});
  if (src == sources.end()) {
    EncoderSpec spec = c.encoder;
    spec.in_channels = c.data.channels;
    src = sources
              .emplace(std::make_pair(seed, identity),
                       pretrain_source(d.train.source, &d.test.source, spec, c.pretrain, seed))
              .first;
  }
  AdaptRun r;
  r.art = run_ablation(variant, d.train.target, src->second.encoder, src->second.classifier,
                       c.adapt, {&d.test.target, &d.test.source});
  r.src_only = r.art.src_only_mf1;
  r.adapted = r.art.final_mf1;
  return cache.emplace(key, std::move(r)).first->second;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------

Outcome loss_oracles() {
  double worst = 0.0;
  bool ok = true;
  std::vector<std::string> names;
  for (const auto& name : kOracleChecks) {
    const auto r = oracle_check(name, 100, 1e-7);
    ok = ok && r.passed;
    worst = std::max(worst, r.stats.at("max_abs_discrepancy").get<double>());
    names.push_back(name);
  }
  return {ok, fmt::format("{} oracles x 100 instances, max |discrepancy| {:.2e} (limit 1e-7)",
                          names.size(), worst)};
}

Outcome gradient_suite() {
  double worst = 0.0;
  bool ok = true;
  for (const auto& name : kGradientChecks) {
    const auto r = gradient_check(name, 1e-4);
    ok = ok && r.passed;
    worst = std::max(worst, r.stats.at("max_rel_error").get<double>());
  }
  return {ok, fmt::format("{} checks, max relative error {:.2e} (limit 1e-4)",
                          kGradientChecks.size(), worst)};
}

Outcome freeze_and_phase() {
  // Its own run, so the time budget covers pretraining and a full adapt().
  ExperimentConfig c = kDefault.with_seed(0);
  const ExperimentData d = load_experiment_data(c, 0);
  EncoderSpec spec = c.encoder;
  spec.in_channels = c.data.channels;
  SourceModel src = pretrain_source(d.train.source, nullptr, spec, c.pretrain, 0);
  const auto he = src.encoder.state_hash();
  const auto hg = src.classifier.state_hash();
  const RunArtifacts art = adapt(d.train.target, src.encoder, src.classifier, c.adapt);

  bool hashes = src.encoder.state_hash() == he && src.classifier.state_hash() == hg;
  for (auto h : art.source_encoder_hashes) hashes = hashes && h == he;
  for (auto h : art.classifier_hashes) hashes = hashes && h == hg;
  const std::size_t snapshots = art.source_encoder_hashes.size();

  const auto& r = art.routing;
  const bool no_align_early = !r.reached("L_Align", "target_encoder", Phase::source_like) &&
                              !r.reached("L_Align", "recovery");
  const bool no_recovery_terms_in_target =
      !r.reached("L_Seg", "target_encoder") && !r.reached("L_ARDM", "target_encoder");
  bool no_crossing = true;  // recovery only in source-like epochs, F_T only in transfer
  for (const auto& [k, v] : r.norm) {
    if (v == 0.0) continue;
    if (k.module == "recovery" && k.phase != "source_like") no_crossing = false;
    if (k.module == "target_encoder" && k.phase != "transfer") no_crossing = false;
    if (k.module != "recovery" && k.module != "target_encoder") no_crossing = false;
  }
  const bool both_phases_active = r.reached("L_Seg", "recovery", Phase::source_like) &&
                                  r.reached("L_Align", "target_encoder", Phase::transfer);
  const bool ok = hashes && no_align_early && no_recovery_terms_in_target && no_crossing &&
                  both_phases_active;
  return {ok, fmt::format("F_S/G hashes constant over {} snapshots: {}; phase routing clean: {}",
                          snapshots, hashes ? "yes" : "no",
                          no_align_early && no_recovery_terms_in_target && no_crossing &&
                                  both_phases_active
                              ? "yes"
                              : "no")};
}

Outcome segment_example() {
  // Six portions A..F of width w; B..E masked; p_s = 4/6.
  bool ok = true;
  for (int w : {1, 16}) {
    const int l = 6 * w;
    Matrix x(2, l);
    for (int t = 0; t < l; ++t) x.col(t).setConstant(t);
    const auto s = extract_segments(x, MaskSpec::from_range(l, w, 5 * w), 4.0 / 6.0);
    auto is_cols = [&](const Matrix& seg, int begin, int end) {
      if (seg.cols() != end - begin) return false;
      for (int j = 0; j < seg.cols(); ++j)
        if (seg(0, j) != begin + j || seg(1, j) != begin + j) return false;
      return true;
    };
    ok = ok && is_cols(s.complete, 0, 6 * w) && is_cols(s.early, 0, 4 * w) &&
         is_cols(s.late, 2 * w, 6 * w) && s.recovered.size() == 1 &&
         is_cols(s.recovered[0], w, 5 * w);
  }
  return {ok, "E = A..D, L = C..F, R = B..E, C = A..F, column for column"};
}

std::string collapse_detail(const PropertyReport& r) {
  std::string out;
  for (const auto& run : r.stats.at("runs"))
    out += fmt::format(" s{}:std={:.3f},H={:.4f}", run.at("seed").get<std::uint64_t>(),
                       run.at("relative_std").get<double>(), run.at("mean_entropy").get<double>());
  return out;
}

const std::vector<std::uint64_t> kProbeSeeds{1, 2, 3};

Outcome collapse_theorem() {
  const ProbeSetup setup = kDefault.probe_setup();
  const auto hi = collapse_probe(6.0 / 8.0, false, true, setup, kProbeSeeds);
  const auto lo = collapse_probe(1.0 / 8.0, true, false, setup, kProbeSeeds);
  const CollapseThresholds th;
  return {hi.passed && lo.passed,
          fmt::format("p_m=6/8 no ARDM (std<{}, H<{}lnC): {} [{} ]; p_m=1/8 ARDM (std>{}): {} [{} ]",
                      th.max_std, th.max_entropy_frac, hi.passed ? "ok" : "fail",
                      collapse_detail(hi), th.min_std, lo.passed ? "ok" : "fail",
                      collapse_detail(lo))};
}

Outcome diversity_theorem() {
  const auto r = diversity_probe(kDefault.probe_setup(), kProbeSeeds);
  std::string runs;
  int wins = 0;
  for (const auto& run : r.stats.at("runs")) {
    const double on = run.at("pairwise_on").get<double>();
    const double off = run.at("pairwise_off").get<double>();
    wins += on > off;
    runs += fmt::format(" s{}:{:.4f}vs{:.4f}", run.at("seed").get<std::uint64_t>(), on, off);
  }
  return {r.passed, fmt::format("pairwise distance larger with ARDM in {}/3 seeds (on vs off:{})",
                                wins, runs)};
}

Outcome adaptation_gain() {
  double src = 0.0, adapted = 0.0, id_src = 0.0, id_adapted = 0.0;
  for (std::uint64_t seed : {0, 1, 2}) {
    const auto& r = default_run(seed);
    src += r.src_only / 3.0;
    adapted += r.adapted / 3.0;
    const auto& i = default_run(seed, true);
    id_src += i.src_only / 3.0;
    id_adapted += i.adapted / 3.0;
  }
  const bool gain = adapted >= src + 0.10;
  const bool control = std::abs(id_adapted - id_src) <= 0.02;
  return {gain && control,
          fmt::format("shifted: SRC-only {:.2f} -> adapted {:.2f} MF1 points; identity: {:.2f} -> {:.2f}",
                      100 * src, 100 * adapted, 100 * id_src, 100 * id_adapted)};
}

Outcome discrepancy_trend() {
  const auto& r = default_run(kDefault.seed);
  const auto& m = r.art.metrics;
  const int switch_row = kDefault.adapt.resolved_srclike_epochs();  // row 0 is "initial"
  const double kl1_init = m.front().kl_src_srclike;
  const double kl1_final = m.back().kl_src_srclike;
  const double kl2_start = m[static_cast<std::size_t>(switch_row)].kl_srclike_trg;
  const double kl2_final = m.back().kl_srclike_trg;
  const bool first = kl1_final <= 0.7 * kl1_init;
  const bool second = kl2_final < kl2_start;
  return {first && second,
          fmt::format("KL(src||src-like) {:.4g} -> {:.4g} (ratio {:.3f}, need <= 0.7): {}; "
                      "KL(src-like||trg) {:.4g} at transfer start -> {:.4g}: {}",
                      kl1_init, kl1_final, kl1_final / kl1_init, first ? "ok" : "fail", kl2_start,
                      kl2_final, second ? "ok" : "fail")};
}

Outcome ablation_direction() {
  double full = 0.0, like = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    full += default_run(seed).adapted / 5.0;
    like += default_run(seed, false, Variant::src_like_only).adapted / 5.0;
  }
  return {like <= full - 0.30,
          fmt::format("5 seeds: full {:.2f}, src_like_only {:.2f} MF1 points (gap {:.2f}, need >= 30)",
                      100 * full, 100 * like, 100 * (full - like))};
}

int run_cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + std::string(TEMSR_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / fmt::format("temsr_acceptance_{}", ::getpid());
  fs::remove_all(root);
  fs::create_directories(root);
  // The seed comes from the environment; the rerun must recover it from the manifest.
  const int a = run_cli(fmt::format("adapt --out {}", (root / "run").string()), "TEMSR_SEED=5");
  const int b = run_cli(fmt::format("rerun --run-dir {} --out {}", (root / "run").string(),
                                    (root / "again").string()));
  const int s1 = run_cli(fmt::format("sweep --param p_s --values 0.75,0.5 --seeds 1 --out {}",
                                     (root / "sweep").string()));
  const int s2 = run_cli(fmt::format("rerun --run-dir {} --out {}", (root / "sweep").string(),
                                     (root / "sweep2").string()));
  const std::string m1 = slurp(root / "run" / "metrics.csv");
  const std::string m2 = slurp(root / "again" / "metrics.csv");
  const bool adapt_same = a == 0 && b == 0 && !m1.empty() && m1 == m2;
  const bool sweep_same = s1 == 0 && s2 == 0 &&
                          slurp(root / "sweep" / "sweep_runs.csv") ==
                              slurp(root / "sweep2" / "sweep_runs.csv") &&
                          !slurp(root / "sweep" / "sweep_runs.csv").empty();
  fs::remove_all(root);
  return {adapt_same && sweep_same,
          fmt::format("adapt rerun metrics.csv identical: {}; sweep rerun identical: {}",
                      adapt_same ? "yes" : "no", sweep_same ? "yes" : "no")};
}

struct Criterion {
  int id;
  std::string name;
  double budget_s;  // 0 = no runtime limit
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria{
      {1, "loss oracles", 60, loss_oracles},
      {2, "gradient checks", 120, gradient_suite},
      {3, "freeze and phase invariants", 180, freeze_and_phase},
      {4, "segment exactness", 0, segment_example},
      {5, "collapse probe", 300, collapse_theorem},
      {6, "diversity probe", 300, diversity_theorem},
      {7, "end-to-end adaptation gain", 600, adaptation_gain},
      {8, "discrepancy trend", 0, discrepancy_trend},
      {9, "ablation direction", 0, ablation_direction},
      {10, "determinism", 0, determinism},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double took = seconds_since(t0);
    const bool in_time = c.budget_s <= 0 || took < c.budget_s;
    const bool ok = o.passed && in_time;
    failures += !ok;
    const std::string timing =
        c.budget_s > 0 ? fmt::format("{:.1f}s of {:.0f}s", took, c.budget_s) : fmt::format("{:.1f}s", took);
    fmt::print("[{}] AC{} {}: {} ({}{})\n", ok ? "PASS" : "FAIL", c.id, c.name, o.detail, timing,
               in_time ? "" : ", over budget");
    std::fflush(stdout);
  }
  fmt::print("{} criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
