#include "temsr/verify.hpp"

#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <ostream>
#include <random>

namespace temsr {

nlohmann::json PropertyReport::to_json() const {
  return {{"property", name}, {"passed", passed}, {"stats", stats}, {"seeds", seeds}};
}

void write_reports(std::ostream& os, const std::vector<PropertyReport>& reports) {
  for (const auto& r : reports) os << r.to_json().dump() << '\n';
}

namespace {

Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

struct FdResult {
  double max_rel = 0.0;
  double max_abs = 0.0;
  int checked = 0;
};

constexpr double kStep = 1e-5;
constexpr double kFloor = 1e-7;

// Central differences of f over (a subset of) the entries of x.
void fd_compare(const std::function<double()>& f, Matrix& x, const Matrix& analytic, Rng& rng,
                FdResult& acc, int max_entries = 48) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(x.size()));
  for (Eigen::Index i = 0; i < x.size(); ++i) idx[static_cast<std::size_t>(i)] = i;
  std::shuffle(idx.begin(), idx.end(), rng);
  if (static_cast<int>(idx.size()) > max_entries) idx.resize(static_cast<std::size_t>(max_entries));
  for (Eigen::Index i : idx) {
    const double orig = x.data()[i];
    x.data()[i] = orig + kStep;
    const double up = f();
    x.data()[i] = orig - kStep;
    const double down = f();
    x.data()[i] = orig;
    const double num = (up - down) / (2.0 * kStep);
    const double ana = analytic.data()[i];
    const double err = std::abs(num - ana);
    acc.max_abs = std::max(acc.max_abs, err);
    acc.max_rel = std::max(acc.max_rel, err / std::max({std::abs(num), std::abs(ana), kFloor}));
    ++acc.checked;
  }
}

EncoderSpec tiny_encoder(int channels) {
  EncoderSpec s;
  s.in_channels = channels;
  s.filters = {3, 4, 4};
  s.kernels = {3, 3, 3};
  return s;
}

// Weighted sum makes every output coordinate matter.
double weighted(const Matrix& out, const Matrix& w) { return (out.array() * w.array()).sum(); }

// Train once so BN running statistics are non-trivial.
Encoder tiny_trained_encoder(int channels, Rng& rng) {
  Encoder enc(tiny_encoder(channels), rng);
  for (int i = 0; i < 3; ++i) {
    Batch warm(6, channels, 16, random_matrix(channels, 6 * 16, rng, 1.5));
    enc.forward(warm, Mode::train);
  }
  return enc;
}

FdResult check_entropy(Rng& rng) {
  FdResult acc;
  Matrix logits = random_matrix(4, 5, rng, 2.0);
  const Matrix g = entropy_logit_grad(entropy_of_logits(logits), Vector::Ones(5));
  fd_compare([&] { return entropy_of_logits(logits).entropy.sum(); }, logits, g, rng, acc);
  return acc;
}

FdResult check_coral(Rng& rng) {
  FdResult acc;
  Matrix a = random_matrix(3, 4, rng);
  Matrix b = random_matrix(3, 4, rng, 2.0);
  const CoralResult r = coral_loss(a, b);
  fd_compare([&] { return coral_loss(a, b).value; }, a, r.grad_a, rng, acc);
  fd_compare([&] { return coral_loss(a, b).value; }, b, r.grad_b, rng, acc);
  return acc;
}

FdResult check_ardm_features(Rng& rng) {
  FdResult acc;
  for (bool normalize : {true, false}) {
    const SimilarityParams p{normalize ? 0.5 : 2.0, normalize};
    Matrix z = random_matrix(4, 2, rng);
    const Matrix zt = random_matrix(4, 2, rng);
    const Vector za = random_matrix(4, 1, rng).col(0);
    const Matrix g = ardm_from_features(z, zt, za, p).grad;
    fd_compare([&] { return ardm_from_features(z, zt, za, p).value; }, z, g, rng, acc);
  }
  return acc;
}

FdResult check_ardm(Rng& rng) {
  FdResult acc;
  Encoder enc = tiny_trained_encoder(2, rng);
  const SimilarityParams p{0.5, true};
  Batch x(3, 2, 16, random_matrix(2, 48, rng));
  const Batch xt(3, 2, 16, random_matrix(2, 48, rng));
  const Matrix anchor = random_matrix(2, 16, rng);
  const Matrix g = ardm_loss(x, xt, anchor, enc, p, true).grad;
  fd_compare([&] { return ardm_loss(x, xt, anchor, enc, p, false).value; }, x.data(), g, rng, acc);
  return acc;
}

FdResult check_seg_loss(Rng& rng) {
  FdResult acc;
  Encoder enc = tiny_trained_encoder(2, rng);
  Classifier cls({4, 3}, rng);
  Batch x(2, 2, 16, random_matrix(2, 32, rng));
  std::vector<MaskSpec> masks;
  for (int i = 0; i < 2; ++i) masks.push_back(make_mask(16, 0.25, 1, rng));
  for (SimPenalty pen : {SimPenalty::absolute, SimPenalty::squared}) {
    SegLossOptions o;
    o.p_s = 0.75;
    o.penalty = pen;
    const Matrix g = seg_loss(x, masks, enc, cls, o).grad;
    o.want_grad = false;
    fd_compare([&] { return seg_loss(x, masks, enc, cls, o).total(); }, x.data(), g, rng, acc);
  }
  return acc;
}

FdResult check_sample_entropy(Rng& rng) {
  FdResult acc;
  Encoder enc = tiny_trained_encoder(2, rng);
  Classifier cls({4, 3}, rng);
  Batch x(3, 2, 12, random_matrix(2, 36, rng));
  const Matrix g = sample_entropy_loss(x, enc, cls, true).grad;
  fd_compare([&] { return sample_entropy_loss(x, enc, cls, false).value; }, x.data(), g, rng, acc);
  return acc;
}

FdResult check_trg_ent(Rng& rng) {
  FdResult acc;
  Encoder enc(tiny_encoder(2), rng);
  Classifier cls({4, 3}, rng);
  const Batch x(4, 2, 16, random_matrix(2, 64, rng));
  enc.zero_grad();
  trg_ent_loss(x, enc, cls);
  auto f = [&] {
    return trg_ent_from_features(enc.forward(x, Mode::train), cls).value;
  };
  for (auto& p : enc.parameters()) fd_compare(f, *p.value, *p.grad, rng, acc, 12);
  return acc;
}

FdResult check_encoder(Rng& rng, Mode mode) {
  FdResult acc;
  Encoder enc = tiny_trained_encoder(2, rng);
  Batch x(3, 2, 16, random_matrix(2, 48, rng));
  const Matrix w = random_matrix(4, 3, rng);
  auto f = [&] { return weighted(enc.forward(x, mode), w); };
  enc.zero_grad();
  Encoder::Tape tape;
  enc.forward(x, mode, &tape);
  const Matrix dx = enc.backward(tape, w, Backprop::both);
  fd_compare(f, x.data(), dx, rng, acc);
  for (auto& p : enc.parameters()) fd_compare(f, *p.value, *p.grad, rng, acc, 12);
  return acc;
}

FdResult check_classifier(Rng& rng) {
  FdResult acc;
  Classifier cls({5, 3}, rng);
  Matrix z = random_matrix(5, 4, rng);
  const Matrix w = random_matrix(3, 4, rng);
  cls.zero_grad();
  const Matrix dz = cls.backward(z, w, Backprop::both);
  auto f = [&] { return weighted(cls.logits(z), w); };
  fd_compare(f, z, dz, rng, acc);
  for (auto& p : cls.parameters()) fd_compare(f, *p.value, *p.grad, rng, acc);
  return acc;
}

FdResult check_recovery(Rng& rng) {
  FdResult acc;
  for (bool full : {false, true}) {
    RecoveryModel rec({2, 3, 2, full}, rng);
    const Batch x(2, 2, 10, random_matrix(2, 20, rng));
    std::vector<MaskSpec> masks;
    for (int i = 0; i < 2; ++i) masks.push_back(make_mask(10, 0.3, 1, rng));
    const Batch xm = apply_masks(x, masks);
    const Matrix w = random_matrix(2, 20, rng);
    rec.zero_grad();
    RecoveryModel::Tape tape;
    rec.forward(xm, masks, &tape);
    rec.backward(tape, w);
    auto f = [&] { return weighted(rec.forward(xm, masks).data(), w); };
    for (auto& p : rec.parameters()) fd_compare(f, *p.value, *p.grad, rng, acc, 16);
  }
  return acc;
}

}  // namespace

PropertyReport gradient_check(const std::string& name, double tolerance, std::uint64_t seed) {
  Rng rng = make_rng(seed, {0x9c4eULL});
  FdResult r;
  if (name == "entropy") r = check_entropy(rng);
  else if (name == "coral") r = check_coral(rng);
  else if (name == "ardm_features") r = check_ardm_features(rng);
  else if (name == "ardm") r = check_ardm(rng);
  else if (name == "seg_loss") r = check_seg_loss(rng);
  else if (name == "sample_entropy") r = check_sample_entropy(rng);
  else if (name == "trg_ent") r = check_trg_ent(rng);
  else if (name == "encoder_params") r = check_encoder(rng, Mode::eval);
  else if (name == "bn_train_input") r = check_encoder(rng, Mode::train);
  else if (name == "classifier") r = check_classifier(rng);
  else if (name == "recovery") r = check_recovery(rng);
  else throw ConfigError("gradient_check: unknown check '" + name + "'");
  PropertyReport rep;
  rep.name = "gradient/" + name;
  rep.passed = r.checked > 0 && r.max_rel < tolerance;
  rep.stats = {{"max_rel_error", r.max_rel}, {"max_abs_error", r.max_abs},
               {"entries", r.checked}, {"tolerance", tolerance}, {"step", kStep}};
  rep.seeds = {seed};
  return rep;
}

// ---------------------------------------------------------------------------
// Oracles.  Each reference below is written from the formula with plain
// loops and does not call into the library's loss code.

namespace {

double ref_entropy(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0) h += -v * std::log(v);
  return h;
}

double ref_softmax_entropy(const std::vector<double>& z) {
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  double s = 0.0;
  for (double v : z) s += std::exp(v - mx);
  std::vector<double> p;
  for (double v : z) p.push_back(std::exp(v - mx) / s);
  return ref_entropy(p);
}

double ref_seg_sim(const double e[4]) {
  const int pairs[6][2] = {{0, 1}, {0, 2}, {0, 3}, {1, 2}, {1, 3}, {2, 3}};
  double s = 0.0;
  for (const auto& pr : pairs) s += std::fabs(e[pr[0]] - e[pr[1]]);
  return s;
}

double ref_coral(const Matrix& a, const Matrix& b) {
  const int d = static_cast<int>(a.rows());
  auto cov = [d](const Matrix& x) {
    const int n = static_cast<int>(x.cols());
    std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
    for (int i = 0; i < d; ++i) {
      for (int j = 0; j < n; ++j) mean[static_cast<std::size_t>(i)] += x(i, j);
      mean[static_cast<std::size_t>(i)] /= n;
    }
    std::vector<double> c(static_cast<std::size_t>(d * d), 0.0);
    for (int i = 0; i < d; ++i)
      for (int k = 0; k < d; ++k) {
        double s = 0.0;
        for (int j = 0; j < n; ++j)
          s += (x(i, j) - mean[static_cast<std::size_t>(i)]) * (x(k, j) - mean[static_cast<std::size_t>(k)]);
        c[static_cast<std::size_t>(i * d + k)] = s / (n - 1);
      }
    return c;
  };
  const auto ca = cov(a);
  const auto cb = cov(b);
  double f = 0.0;
  for (std::size_t i = 0; i < ca.size(); ++i) f += (ca[i] - cb[i]) * (ca[i] - cb[i]);
  return f / (4.0 * d * d);
}

// -1/B sum_i log( s(sl_i, a) / (s(sl_i, a) + s(sl_i, t_i) + sum_{k != i} s(sl_i, sl_k)) )
double ref_ardm(const Matrix& sl, const Matrix& t, const Matrix& a, double tau) {
  const int d = static_cast<int>(sl.rows());
  const int b = static_cast<int>(sl.cols());
  auto sim = [&](const Matrix& x, int i, const Matrix& y, int j) {
    double dot = 0.0, nx = 0.0, ny = 0.0;
    for (int r = 0; r < d; ++r) {
      dot += x(r, i) * y(r, j);
      nx += x(r, i) * x(r, i);
      ny += y(r, j) * y(r, j);
    }
    return std::exp(dot / (std::sqrt(nx) * std::sqrt(ny)) / tau);
  };
  double loss = 0.0;
  for (int i = 0; i < b; ++i) {
    const double num = sim(sl, i, a, 0);
    double den = num + sim(sl, i, t, i);
    for (int k = 0; k < b; ++k)
      if (k != i) den += sim(sl, i, sl, k);
    loss += -std::log(num / den);
  }
  return loss / b;
}

}  // namespace

PropertyReport oracle_check(const std::string& name, int trials, double tolerance,
                            std::uint64_t seed) {
  Rng rng = make_rng(seed, {0x07acULL});
  std::uniform_int_distribution<int> small(2, 6);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < trials; ++trial) {
    double diff = 0.0;
    if (name == "entropy") {
      const int c = small(rng);
      std::vector<double> p(static_cast<std::size_t>(c));
      double s = 0.0;
      for (double& v : p) s += (v = -std::log(unit(rng) + 1e-12));
      for (double& v : p) v /= s;
      if (trial % 10 == 0) {
        p[1] += p[0];
        p[0] = 0.0;
      }
      diff = std::abs(entropy(p) - ref_entropy(p));
      const Matrix z = random_matrix(c, 1, rng, 3.0);
      std::vector<double> zv(z.data(), z.data() + z.size());
      diff = std::max(diff, std::abs(entropy_of_logits(z).entropy(0) - ref_softmax_entropy(zv)));
    } else if (name == "seg_sim") {
      std::array<double, 4> e{};
      double raw[4];
      for (int k = 0; k < 4; ++k) raw[k] = e[static_cast<std::size_t>(k)] = 10.0 * unit(rng);
      diff = std::abs(seg_sim_from_aggregates(e, SimPenalty::absolute).value - ref_seg_sim(raw));
    } else if (name == "coral") {
      const int d = small(rng);
      const Matrix a = random_matrix(d, small(rng) + 1, rng);
      const Matrix b = random_matrix(d, small(rng) + 1, rng, 2.0);
      diff = std::abs(coral_loss(a, b).value - ref_coral(a, b));
    } else if (name == "ardm") {
      const int d = small(rng);
      const int b = small(rng);
      const double tau = 0.05 + unit(rng);
      const Matrix sl = random_matrix(d, b, rng);
      const Matrix t = random_matrix(d, b, rng);
      const Matrix a = random_matrix(d, 1, rng);
      const double ref = ref_ardm(sl, t, a, tau);
      diff = std::abs(ardm_from_features(sl, t, a.col(0), {tau, true}).value - ref);
      // The similarity-level form must agree as well.
      Vector sa(b), st(b);
      Matrix sp(b, b);
      for (int i = 0; i < b; ++i) {
        sa(i) = similarity(sl.col(i), a.col(0), {tau, true});
        st(i) = similarity(sl.col(i), t.col(i), {tau, true});
        for (int k = 0; k < b; ++k) sp(i, k) = similarity(sl.col(i), sl.col(k), {tau, true});
      }
      diff = std::max(diff, std::abs(ardm_from_similarities(sa, st, sp) - ref));
    } else {
      throw ConfigError("oracle_check: unknown oracle '" + name + "'");
    }
    worst = std::max(worst, diff);
  }
  PropertyReport rep;
  rep.name = "oracle/" + name;
  rep.passed = worst < tolerance;
  rep.stats = {{"max_abs_discrepancy", worst}, {"trials", trials}, {"tolerance", tolerance}};
  rep.seeds = {seed};
  return rep;
}

// ---------------------------------------------------------------------------
// Probes

CollapseStats collapse_stats(const RecoveryModel& recovery, Encoder& fs, Classifier& g,
                             const Batch& x, std::span<const MaskSpec> masks) {
  const Batch x_sl = recovery.forward(apply_masks(x, masks), masks);
  CollapseStats s;
  s.mean_entropy = entropy_of_logits(g.logits(fs.forward(x_sl, Mode::eval))).entropy.mean();

  // Masked points of every sample, in time order.
  const int m = masks.front().count();
  for (const auto& mk : masks)
    if (mk.count() != m) throw ShapeError("collapse_stats: masks must have equal masked counts");
  if (m == 0) throw ConfigError("collapse_stats: masks are empty");
  const int n = x.count();
  Matrix vals(static_cast<Eigen::Index>(x.channels()) * m, n);
  for (int b = 0; b < n; ++b) {
    int j = 0;
    for (int t = 0; t < x.length(); ++t) {
      if (!masks[static_cast<std::size_t>(b)].is_masked(t)) continue;
      vals.block(static_cast<Eigen::Index>(j) * x.channels(), b, x.channels(), 1) =
          x_sl.sample(b).col(t);
      ++j;
    }
  }
  const Vector mean = vals.rowwise().mean();
  const Vector sd =
      ((vals.colwise() - mean).array().square().rowwise().sum() / std::max(1, n - 1)).sqrt();
  const double data_mean = x.data().mean();
  const double data_sd = std::sqrt((x.data().array() - data_mean).square().sum() /
                                   std::max<Eigen::Index>(1, x.data().size() - 1));
  s.relative_std = sd.mean() / std::max(data_sd, 1e-12);
  return s;
}

DiversityStats diversity_stats(const RecoveryModel& recovery, Encoder& fs, const Batch& x,
                               std::span<const MaskSpec> masks) {
  const Batch x_sl = recovery.forward(apply_masks(x, masks), masks);
  auto unit = [](Matrix z) {
    z.array().rowwise() /= z.colwise().norm().array().max(1e-12);
    return z;
  };
  const Matrix z_sl = unit(fs.forward(x_sl, Mode::eval));
  const Matrix z_t = unit(fs.forward(x, Mode::eval));
  DiversityStats s;
  const Eigen::Index n = z_sl.cols();
  long pairs = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index k = i + 1; k < n; ++k, ++pairs) s.pairwise += (z_sl.col(i) - z_sl.col(k)).norm();
  s.pairwise /= std::max(1L, pairs);
  s.to_original = (z_sl - z_t).colwise().norm().mean();
  return s;
}

namespace {

struct ProbeWorld {
  DomainPair train;
  DomainPair test;
  SourceModel source;
};

// Pretraining is the expensive part; probes on the same setup and seed reuse
// a private copy of the same source model.
const ProbeWorld& probe_world(const ProbeSetup& setup, std::uint64_t seed) {
  static std::map<std::string, ProbeWorld> cache;
  nlohmann::json key = {{"encoder", setup.encoder.to_json()},
                        {"pretrain", setup.pretrain.to_json()},
                        {"seed", seed},
                        {"classes", setup.data.classes},
                        {"channels", setup.data.channels},
                        {"length", setup.data.length},
                        {"train", setup.data.train_per_class},
                        {"test", setup.data.test_per_class},
                        {"shift", {setup.data.shift.amplitude_scale, setup.data.shift.time_warp,
                                   setup.data.shift.channel_offset, setup.data.shift.noise_scale}}};
  const std::string k = key.dump();
  auto it = cache.find(k);
  if (it != cache.end()) return it->second;
  auto train = generate_domain_pair(setup.data, seed, Split::train);
  auto test = generate_domain_pair(setup.data, seed, Split::test);
  EncoderSpec spec = setup.encoder;
  spec.in_channels = setup.data.channels;
  SourceModel src = pretrain_source(train.source, &test.source, spec, setup.pretrain, seed);
  return cache.emplace(k, ProbeWorld{std::move(train), std::move(test), std::move(src)}).first->second;
}

struct ProbeRun {
  RecoveryModel recovery;
  Encoder fs;
  Classifier g;
  Batch x;
  std::vector<MaskSpec> masks;
};

ProbeRun run_source_like(const ProbeSetup& setup, std::uint64_t seed, double p_m, double lambda_ardm,
                         int epochs) {
  const ProbeWorld& w = probe_world(setup, seed);
  ProbeRun r{RecoveryModel{}, w.source.encoder, w.source.classifier, w.test.target.to_batch(), {}};
  AdaptConfig cfg = setup.adapt;
  cfg.variant = Variant::src_like_only;
  cfg.epochs_total = epochs;
  cfg.p_m = p_m;
  cfg.lambda_ardm = lambda_ardm;
  cfg.seed = seed;
  RunArtifacts art = adapt(w.train.target, r.fs, r.g, cfg);
  r.recovery = std::move(*art.recovery);
  r.masks = eval_masks(r.x.count(), r.x.length(), cfg, 0x9b0eULL);
  return r;
}

}  // namespace

PropertyReport collapse_probe(double p_m, bool ardm_enabled, bool expect_collapse,
                              const ProbeSetup& setup, const std::vector<std::uint64_t>& seeds,
                              const CollapseThresholds& th) {
  PropertyReport rep;
  rep.name = std::string("collapse/") + (expect_collapse ? "collapses" : "stays_diverse");
  rep.seeds = seeds;
  const double ln_c = std::log(static_cast<double>(setup.data.classes));
  bool ok = !seeds.empty();
  nlohmann::json per_seed = nlohmann::json::array();
  for (std::uint64_t seed : seeds) {
    ProbeRun r = run_source_like(setup, seed, p_m, ardm_enabled ? setup.adapt.lambda_ardm : 0.0,
                                 setup.epochs);
    const CollapseStats s = collapse_stats(r.recovery, r.fs, r.g, r.x, r.masks);
    const bool seed_ok = expect_collapse
                             ? s.relative_std < th.max_std && s.mean_entropy < th.max_entropy_frac * ln_c
                             : s.relative_std > th.min_std;
    ok = ok && seed_ok;
    per_seed.push_back({{"seed", seed},
                        {"relative_std", s.relative_std},
                        {"mean_entropy", s.mean_entropy},
                        {"passed", seed_ok}});
  }
  rep.passed = ok;
  rep.stats = {{"p_m", p_m},
               {"ardm", ardm_enabled},
               {"epochs", setup.epochs},
               {"ln_C", ln_c},
               {"thresholds",
                {{"max_std", th.max_std}, {"max_entropy_frac", th.max_entropy_frac}, {"min_std", th.min_std}}},
               {"runs", per_seed}};
  return rep;
}

PropertyReport diversity_probe(const ProbeSetup& setup, const std::vector<std::uint64_t>& seeds) {
  PropertyReport rep;
  rep.name = "diversity/ardm_increases_pairwise_distance";
  rep.seeds = seeds;
  bool ok = !seeds.empty();
  int to_original_wins = 0;
  nlohmann::json per_seed = nlohmann::json::array();
  for (std::uint64_t seed : seeds) {
    const double p_m = setup.adapt.p_m;
    ProbeRun on = run_source_like(setup, seed, p_m, setup.adapt.lambda_ardm, setup.epochs);
    ProbeRun off = run_source_like(setup, seed, p_m, 0.0, setup.epochs);
    const DiversityStats a = diversity_stats(on.recovery, on.fs, on.x, on.masks);
    const DiversityStats b = diversity_stats(off.recovery, off.fs, off.x, off.masks);
    const bool seed_ok = a.pairwise > b.pairwise;
    ok = ok && seed_ok;
    if (a.to_original > b.to_original) ++to_original_wins;
    per_seed.push_back({{"seed", seed},
                        {"pairwise_on", a.pairwise},
                        {"pairwise_off", b.pairwise},
                        {"to_original_on", a.to_original},
                        {"to_original_off", b.to_original},
                        {"passed", seed_ok}});
  }
  rep.passed = ok;
  rep.stats = {{"epochs", setup.epochs},
               {"lambda_ardm", setup.adapt.lambda_ardm},
               {"to_original_larger_with_ardm", to_original_wins},
               {"runs", per_seed}};
  return rep;
}

}  // namespace temsr
