#include "temsr/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace temsr {

// ---------------------------------------------------------------------------
// Config plumbing

namespace {

nlohmann::json optimizer_to_json(const OptimizerConfig& o) {
  return {{"kind", o.kind == OptimizerConfig::Kind::adam ? "adam" : "sgd"},
          {"learning_rate", o.learning_rate},
          {"beta1", o.beta1},
          {"beta2", o.beta2},
          {"eps", o.eps},
          {"weight_decay", o.weight_decay},
          {"decay_every", o.decay_every},
          {"decay_gamma", o.decay_gamma}};
}

OptimizerConfig optimizer_from_json(const nlohmann::json& j, OptimizerConfig o) {
  if (j.contains("kind")) {
    const auto k = j.at("kind").get<std::string>();
    if (k == "adam")
      o.kind = OptimizerConfig::Kind::adam;
    else if (k == "sgd")
      o.kind = OptimizerConfig::Kind::sgd;
    else
      throw ConfigError("optimizer kind must be 'adam' or 'sgd'");
  }
  o.learning_rate = j.value("learning_rate", o.learning_rate);
  o.beta1 = j.value("beta1", o.beta1);
  o.beta2 = j.value("beta2", o.beta2);
  o.eps = j.value("eps", o.eps);
  o.weight_decay = j.value("weight_decay", o.weight_decay);
  o.decay_every = j.value("decay_every", o.decay_every);
  o.decay_gamma = j.value("decay_gamma", o.decay_gamma);
  return o;
}

Matrix cross_entropy_logit_grad(const Matrix& logits, std::span<const int> labels, double* loss) {
  const LogitEntropy e = entropy_of_logits(logits);
  Matrix g = e.probs;
  double total = 0.0;
  for (Eigen::Index b = 0; b < g.cols(); ++b) {
    const int y = labels[static_cast<std::size_t>(b)];
    total -= std::log(std::max(e.probs(y, b), 1e-300));
    g(y, b) -= 1.0;
  }
  const double n = static_cast<double>(g.cols());
  if (loss) *loss = total / n;
  return g / n;
}

std::vector<std::vector<int>> make_batches(int n, int batch_size, Rng& rng, int min_size) {
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<int>> out;
  for (int i = 0; i < n; i += batch_size) {
    std::vector<int> b(order.begin() + i, order.begin() + std::min(n, i + batch_size));
    if (static_cast<int>(b.size()) >= min_size) out.push_back(std::move(b));
  }
  return out;
}

std::vector<int> first_indices(int n, int limit) {
  std::vector<int> idx(static_cast<std::size_t>(limit > 0 ? std::min(n, limit) : n));
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

}  // namespace

nlohmann::json PretrainConfig::to_json() const {
  return {{"epochs", epochs}, {"batch_size", batch_size}, {"optimizer", optimizer_to_json(optimizer)}};
}

PretrainConfig PretrainConfig::from_json(const nlohmann::json& j) {
  PretrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  if (j.contains("optimizer")) c.optimizer = optimizer_from_json(j.at("optimizer"), c.optimizer);
  return c;
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::src_like_only: return "src_like_only";
    case Variant::no_seg: return "no_seg";
    case Variant::no_ardm: return "no_ardm";
    case Variant::no_bank: return "no_bank";
  }
  return "full";
}

Variant variant_from_string(const std::string& s) {
  for (Variant v : {Variant::full, Variant::src_like_only, Variant::no_seg, Variant::no_ardm,
                    Variant::no_bank})
    if (to_string(v) == s) return v;
  throw ConfigError("unknown ablation variant '" + s + "'");
}

int AdaptConfig::resolved_srclike_epochs() const {
  if (variant == Variant::src_like_only) return epochs_total;
  return epochs_srclike >= 0 ? epochs_srclike : (epochs_total + 3) / 4;
}

Phase AdaptConfig::phase_of_epoch(int epoch) const {
  const int s = resolved_srclike_epochs();
  if (s <= 0) return Phase::transfer;
  if (s >= epochs_total) return Phase::source_like;
  if (cycle) return (epoch / s) % 2 == 0 ? Phase::source_like : Phase::transfer;
  return epoch < s ? Phase::source_like : Phase::transfer;
}

void AdaptConfig::validate() const {
  if (lambda_seg < 0 || lambda_ardm < 0) throw ConfigError("AdaptConfig: weights must be >= 0");
  if (!(p_m > 0 && p_m < 1)) throw ConfigError("AdaptConfig: p_m must lie in (0, 1)");
  if (!(p_s > 0 && p_s <= 1)) throw ConfigError("AdaptConfig: p_s must lie in (0, 1]");
  if (!(anchor_ratio > 0 && anchor_ratio <= 1))
    throw ConfigError("AdaptConfig: anchor_ratio must lie in (0, 1]");
  if (!(temperature > 0)) throw ConfigError("AdaptConfig: temperature must be positive");
  if (epochs_total < 0) throw ConfigError("AdaptConfig: epochs_total must be >= 0");
  if (epochs_srclike > epochs_total)
    throw ConfigError("AdaptConfig: epochs_srclike exceeds epochs_total");
  if (batch_size < 2) throw ConfigError("AdaptConfig: batch_size must be >= 2");
  if (mask_blocks < 1) throw ConfigError("AdaptConfig: mask_blocks must be >= 1");
}

nlohmann::json AdaptConfig::to_json() const {
  return {{"lambda_seg", lambda_seg},
          {"lambda_ardm", lambda_ardm},
          {"p_m", p_m},
          {"p_s", p_s},
          {"anchor_ratio", anchor_ratio},
          {"temperature", temperature},
          {"normalize_features", normalize_features},
          {"sim_penalty", sim_penalty == SimPenalty::absolute ? "absolute" : "squared"},
          {"mask_blocks", mask_blocks},
          {"epochs_total", epochs_total},
          {"epochs_srclike", epochs_srclike},
          {"cycle", cycle},
          {"trg_ent_in_srclike", trg_ent_in_srclike},
          {"batch_size", batch_size},
          {"recovery_hidden", recovery_hidden},
          {"full_regeneration", full_regeneration},
          {"recovery_optimizer", optimizer_to_json(recovery_optimizer)},
          {"target_optimizer", optimizer_to_json(target_optimizer)},
          {"variant", to_string(variant)},
          {"kl_estimator", kl_estimator == KlEstimator::gaussian ? "gaussian" : "histogram"},
          {"discrepancy_layer", discrepancy_layer == DiscrepancyLayer::logits ? "logits" : "features"},
          {"snapshot_samples", snapshot_samples},
          {"seed", seed}};
}

AdaptConfig AdaptConfig::from_json(const nlohmann::json& j) {
  AdaptConfig c;
  c.lambda_seg = j.value("lambda_seg", c.lambda_seg);
  c.lambda_ardm = j.value("lambda_ardm", c.lambda_ardm);
  c.p_m = j.value("p_m", c.p_m);
  c.p_s = j.value("p_s", c.p_s);
  c.anchor_ratio = j.value("anchor_ratio", c.anchor_ratio);
  c.temperature = j.value("temperature", c.temperature);
  c.normalize_features = j.value("normalize_features", c.normalize_features);
  const std::string pen = j.value("sim_penalty", std::string("absolute"));
  if (pen != "absolute" && pen != "squared")
    throw ConfigError("sim_penalty must be 'absolute' or 'squared'");
  c.sim_penalty = pen == "absolute" ? SimPenalty::absolute : SimPenalty::squared;
  c.mask_blocks = j.value("mask_blocks", c.mask_blocks);
  c.epochs_total = j.value("epochs_total", c.epochs_total);
  c.epochs_srclike = j.value("epochs_srclike", c.epochs_srclike);
  c.cycle = j.value("cycle", c.cycle);
  c.trg_ent_in_srclike = j.value("trg_ent_in_srclike", c.trg_ent_in_srclike);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.recovery_hidden = j.value("recovery_hidden", c.recovery_hidden);
  c.full_regeneration = j.value("full_regeneration", c.full_regeneration);
  if (j.contains("recovery_optimizer"))
    c.recovery_optimizer = optimizer_from_json(j.at("recovery_optimizer"), c.recovery_optimizer);
  if (j.contains("target_optimizer"))
    c.target_optimizer = optimizer_from_json(j.at("target_optimizer"), c.target_optimizer);
  c.variant = variant_from_string(j.value("variant", std::string("full")));
  const std::string kl = j.value("kl_estimator", std::string("gaussian"));
  if (kl != "gaussian" && kl != "histogram")
    throw ConfigError("kl_estimator must be 'gaussian' or 'histogram'");
  c.kl_estimator = kl == "gaussian" ? KlEstimator::gaussian : KlEstimator::histogram;
  const std::string layer = j.value("discrepancy_layer", std::string("features"));
  if (layer != "logits" && layer != "features")
    throw ConfigError("discrepancy_layer must be 'logits' or 'features'");
  c.discrepancy_layer = layer == "logits" ? DiscrepancyLayer::logits : DiscrepancyLayer::features;
  c.snapshot_samples = j.value("snapshot_samples", c.snapshot_samples);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Pretraining

std::vector<int> predict(Encoder& encoder, Classifier& classifier, const Batch& x) {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(x.count()));
  constexpr int kChunk = 256;
  for (int start = 0; start < x.count(); start += kChunk) {
    const int n = std::min(kChunk, x.count() - start);
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), start);
    const Matrix logits = classifier.logits(encoder.forward(gather(x, idx), Mode::eval));
    for (Eigen::Index b = 0; b < logits.cols(); ++b) {
      Eigen::Index arg;
      logits.col(b).maxCoeff(&arg);
      out.push_back(static_cast<int>(arg));
    }
  }
  return out;
}

double evaluate_mf1(Encoder& encoder, Classifier& classifier, const Dataset& labeled) {
  const auto y = labeled.labels();
  const auto p = predict(encoder, classifier, labeled.to_batch());
  return macro_f1(y, p, labeled.class_count());
}

SourceModel pretrain_source(const Dataset& train, const Dataset* heldout, const EncoderSpec& spec,
                            const PretrainConfig& config, std::uint64_t seed) {
  if (!train.has_labels()) throw ConfigError("pretrain_source: source split must be labeled");
  if (spec.in_channels != train.channels())
    throw ConfigError("pretrain_source: encoder channels differ from the data");
  Rng init_rng = make_rng(seed, {0x9e7a1ULL});
  SourceModel m{Encoder(spec, init_rng),
                Classifier({spec.feature_dim(), train.class_count()}, init_rng)};
  std::vector<ParamRef> params = m.encoder.parameters();
  for (auto& p : m.classifier.parameters()) params.push_back(p);
  Optimizer opt(params, config.optimizer);
  const auto labels = train.labels();
  const Batch all = train.to_batch();

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    Rng shuffle = make_rng(seed, {0x9e7a2ULL, static_cast<std::uint64_t>(epoch)});
    for (const auto& idx : make_batches(train.size(), config.batch_size, shuffle, 2)) {
      const Batch x = gather(all, idx);
      std::vector<int> y;
      for (int i : idx) y.push_back(labels[static_cast<std::size_t>(i)]);
      opt.zero_grad();
      Encoder::Tape tape;
      const Matrix z = m.encoder.forward(x, Mode::train, &tape);
      double loss = 0.0;
      const Matrix dlogits = cross_entropy_logit_grad(m.classifier.logits(z), y, &loss);
      if (!std::isfinite(loss)) throw TrainingError("source pretraining diverged (cross-entropy)");
      const Matrix dz = m.classifier.backward(z, dlogits, Backprop::both);
      m.encoder.backward(tape, dz, Backprop::params_only);
      opt.step("cross-entropy");
    }
  }
  m.train_mf1 = evaluate_mf1(m.encoder, m.classifier, train);
  if (heldout && heldout->has_labels()) m.heldout_mf1 = evaluate_mf1(m.encoder, m.classifier, *heldout);
  m.encoder.set_frozen(true);
  m.classifier.set_frozen(true);
  m.encoder.zero_grad();
  m.classifier.zero_grad();
  return m;
}

// ---------------------------------------------------------------------------
// Routing instrumentation

void GradientRouting::record(int epoch, Phase phase, const std::string& term,
                             const std::string& module, double value) {
  if (value == 0.0) return;
  norm[{epoch, to_string(phase), term, module}] += value;
}

bool GradientRouting::reached(const std::string& term, const std::string& module,
                              std::optional<Phase> phase) const {
  for (const auto& [k, v] : norm)
    if (k.term == term && k.module == module && v > 0.0 && (!phase || k.phase == to_string(*phase)))
      return true;
  return false;
}

// ---------------------------------------------------------------------------
// Adaptation

std::vector<MaskSpec> eval_masks(int count, int length, const AdaptConfig& config,
                                 std::uint64_t stream) {
  Rng rng = make_rng(config.seed, {0xe7a1ULL, stream});
  std::vector<MaskSpec> masks;
  masks.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i)
    masks.push_back(make_mask(length, config.p_m, config.mask_blocks, rng));
  return masks;
}

namespace {

Batch recover_in_chunks(const RecoveryModel& recovery, const Batch& x,
                        std::span<const MaskSpec> masks) {
  Batch out(x.count(), x.channels(), x.length());
  constexpr int kChunk = 128;
  for (int start = 0; start < x.count(); start += kChunk) {
    const int n = std::min(kChunk, x.count() - start);
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), start);
    const Batch part = recovery.forward(apply_masks(gather(x, idx), masks.subspan(start, n)),
                                        masks.subspan(start, n));
    out.data().middleCols(static_cast<Eigen::Index>(start) * x.length(),
                          static_cast<Eigen::Index>(n) * x.length()) = part.data();
  }
  return out;
}

Matrix features_in_chunks(Encoder& encoder, const Batch& x) {
  Matrix z(encoder.spec().feature_dim(), x.count());
  constexpr int kChunk = 256;
  for (int start = 0; start < x.count(); start += kChunk) {
    const int n = std::min(kChunk, x.count() - start);
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), start);
    z.middleCols(start, n) = encoder.forward(gather(x, idx), Mode::eval);
  }
  return z;
}

struct Snapshot {
  double mf1 = 0.0;
  double kl_src_srclike = 0.0;
  double kl_srclike_trg = 0.0;
  double kl_src_trg = 0.0;
};

class AdaptationRun {
 public:
  AdaptationRun(const Dataset& target, Encoder& fs, Classifier& g, const AdaptConfig& cfg,
                const AdaptEval& eval)
      : target_(target), fs_(fs), g_(g), cfg_(cfg), eval_(eval), x_t_(target.to_batch()) {}

  RunArtifacts run();

 private:
  void init_models();
  void init_bank();
  Snapshot snapshot(int epoch);
  Matrix represent(Encoder& encoder, const Batch& x) {
    const Matrix z = features_in_chunks(encoder, x);
    return cfg_.discrepancy_layer == DiscrepancyLayer::logits ? g_.logits(z) : z;
  }
  MetricsRow train_epoch(int epoch);
  void record_hashes();

  const Dataset& target_;
  Encoder& fs_;
  Classifier& g_;
  const AdaptConfig& cfg_;
  AdaptEval eval_;
  Batch x_t_;

  RunArtifacts art_;
  Encoder ft_;
  RecoveryModel rec_;
  std::unique_ptr<AnchorBank> bank_;
  std::unique_ptr<Optimizer> rec_opt_;
  std::unique_ptr<Optimizer> trg_opt_;

  // Cached discrepancy inputs.
  Matrix src_features_;
  Batch snap_x_;
  std::vector<MaskSpec> snap_masks_;
};

void AdaptationRun::init_models() {
  ft_ = fs_;
  ft_.set_frozen(false);
  ft_.zero_grad();
  Rng rng = make_rng(cfg_.seed, {0x4ec0ULL});
  rec_ = RecoveryModel({target_.channels(), cfg_.recovery_hidden, 2, cfg_.full_regeneration}, rng);
  rec_opt_ = std::make_unique<Optimizer>(rec_.parameters(), cfg_.recovery_optimizer);
  trg_opt_ = std::make_unique<Optimizer>(ft_.parameters(), cfg_.target_optimizer);
}

void AdaptationRun::init_bank() {
  bank_ = std::make_unique<AnchorBank>(target_.size());
  const auto masks = eval_masks(target_.size(), target_.length(), cfg_, 0xba4cULL);
  const Batch x_sl = recover_in_chunks(rec_, x_t_, masks);
  const Matrix z = features_in_chunks(fs_, x_sl);
  const Vector h = entropy_of_logits(g_.logits(z)).entropy;
  for (int i = 0; i < target_.size(); ++i) bank_->update(i, x_sl.sample(i), h(i));
}

Snapshot AdaptationRun::snapshot(int epoch) {
  Snapshot s;
  if (eval_.target_labeled) {
    const Dataset& ev = *eval_.target_labeled;
    if (cfg_.variant == Variant::src_like_only) {
      const auto masks = eval_masks(ev.size(), ev.length(), cfg_, 0x5e1fULL);
      const Batch x_sl = recover_in_chunks(rec_, ev.to_batch(), masks);
      s.mf1 = macro_f1(ev.labels(), predict(fs_, g_, x_sl), ev.class_count());
    } else {
      s.mf1 = evaluate_mf1(ft_, g_, ev);
    }
  }
  if (eval_.source_heldout) {
    const Matrix z_like = represent(fs_, recover_in_chunks(rec_, snap_x_, snap_masks_));
    const Matrix z_trg = represent(ft_, snap_x_);
    const auto row = track_discrepancy(art_.discrepancy, epoch, src_features_, z_like, z_trg,
                                       cfg_.kl_estimator);
    s.kl_src_srclike = row.src_srclike;
    s.kl_srclike_trg = row.srclike_trg;
    s.kl_src_trg = row.src_trg;
  }
  return s;
}

void AdaptationRun::record_hashes() {
  art_.source_encoder_hashes.push_back(fs_.state_hash());
  art_.classifier_hashes.push_back(g_.state_hash());
}

MetricsRow AdaptationRun::train_epoch(int epoch) {
  const Phase phase = cfg_.phase_of_epoch(epoch);
  const bool src_like = phase == Phase::source_like;
  const bool use_ardm = cfg_.variant != Variant::no_ardm;
  const bool train_target = cfg_.variant != Variant::src_like_only;
  const SimilarityParams sim{cfg_.temperature, cfg_.normalize_features};

  Rng shuffle = make_rng(cfg_.seed, {0xada9ULL, static_cast<std::uint64_t>(epoch)});
  const auto batches = make_batches(target_.size(), cfg_.batch_size, shuffle, 2);

  MetricsRow row;
  row.epoch = epoch + 1;
  row.phase = to_string(phase);
  int step = 0;
  for (const auto& idx : batches) {
    Rng mask_rng = make_rng(cfg_.seed, {0x3a5cULL, static_cast<std::uint64_t>(epoch),
                                        static_cast<std::uint64_t>(step++)});
    const Batch x_t = gather(x_t_, idx);
    std::vector<MaskSpec> masks;
    for (std::size_t i = 0; i < idx.size(); ++i)
      masks.push_back(make_mask(x_t.length(), cfg_.p_m, cfg_.mask_blocks, mask_rng));

    // (1) mask and recover
    RecoveryModel::Tape rec_tape;
    const Batch x_sl = rec_.forward(apply_masks(x_t, masks), masks, src_like ? &rec_tape : nullptr);
    const bool grad_rec = src_like;

    // (3, computed first) entropies of the fresh recoveries
    const BatchEntropyResult h_sl = sample_entropy_loss(
        x_sl, fs_, g_, grad_rec && cfg_.variant == Variant::no_seg);

    // (2) anchor from the bank before this batch's update
    ArdmLossResult ardm{};
    if (use_ardm) {
      Matrix anchor;
      if (cfg_.variant == Variant::no_bank) {
        AnchorBank local(x_sl.count());
        for (int i = 0; i < x_sl.count(); ++i) local.update(i, x_sl.sample(i), h_sl.per_sample(i));
        anchor = local.representative_anchor(cfg_.anchor_ratio);
      } else {
        anchor = bank_->representative_anchor(cfg_.anchor_ratio);
      }
      ardm = ardm_loss(x_sl, x_t, anchor, fs_, sim, grad_rec);
    }
    // (3) bank update
    for (std::size_t i = 0; i < idx.size(); ++i)
      bank_->update(idx[i], x_sl.sample(static_cast<int>(i)), h_sl.per_sample(static_cast<Eigen::Index>(i)));

    // (4) segment loss (sample-level entropy in the no_seg ablation)
    double l_seg = 0.0;
    Matrix d_seg;
    if (cfg_.variant == Variant::no_seg) {
      l_seg = h_sl.value;
      d_seg = h_sl.grad;
    } else {
      const SegLossResult seg =
          seg_loss(x_sl, masks, fs_, g_, {cfg_.p_s, cfg_.sim_penalty, 1.0, 1.0, grad_rec});
      l_seg = seg.total();
      d_seg = seg.grad;
    }

    // (5, 6) alignment and target entropy on target-encoder features
    Encoder::Tape ft_tape;
    const Matrix z_sl = fs_.forward(x_sl, Mode::eval);
    Matrix z_t;
    double l_align = 0.0;
    double l_trg = 0.0;
    Matrix d_zt_align, d_zt_ent;
    if (train_target) {
      // F_T only moves (parameters or BN statistics) when it is stepped.
      const bool step_target = !src_like || cfg_.trg_ent_in_srclike;
      z_t = step_target ? ft_.forward(x_t, Mode::train, &ft_tape) : ft_.forward(x_t, Mode::eval);
      const CoralResult coral = coral_loss(z_sl, z_t);
      const TrgEntResult trg = trg_ent_from_features(z_t, g_);
      l_align = coral.value;
      l_trg = trg.value;
      d_zt_align = coral.grad_b;
      d_zt_ent = trg.grad_features;
    }

    // (7) per-phase composition
    const double lambda_ardm = use_ardm ? cfg_.lambda_ardm : 0.0;
    const LossParts parts{l_seg, ardm.value, l_align, l_trg};
    const double total = total_loss(parts, cfg_.lambda_seg, lambda_ardm, phase);
    if (!std::isfinite(l_seg)) throw TrainingError("L_Seg is not finite");
    if (!std::isfinite(ardm.value)) throw TrainingError("L_ARDM is not finite");
    if (!std::isfinite(l_align)) throw TrainingError("L_Align is not finite");
    if (!std::isfinite(l_trg)) throw TrainingError("L_TrgEnt is not finite");

    // (8) route gradients per phase
    if (src_like) {
      Matrix d_xsl = cfg_.lambda_seg * d_seg;
      art_.routing.record(epoch, phase, "L_Seg", "recovery", (cfg_.lambda_seg * d_seg).norm());
      if (use_ardm && lambda_ardm != 0.0) {
        d_xsl += lambda_ardm * ardm.grad;
        art_.routing.record(epoch, phase, "L_ARDM", "recovery", (lambda_ardm * ardm.grad).norm());
      }
      rec_opt_->zero_grad();
      rec_.backward(rec_tape, d_xsl);
      rec_opt_->step("L_Seg + L_ARDM");
      if (train_target && cfg_.trg_ent_in_srclike) {
        trg_opt_->zero_grad();
        art_.routing.record(epoch, phase, "L_TrgEnt", "target_encoder", d_zt_ent.norm());
        ft_.backward(ft_tape, d_zt_ent, Backprop::params_only);
        trg_opt_->step("L_TrgEnt");
      }
    } else if (train_target) {
      trg_opt_->zero_grad();
      art_.routing.record(epoch, phase, "L_Align", "target_encoder", d_zt_align.norm());
      art_.routing.record(epoch, phase, "L_TrgEnt", "target_encoder", d_zt_ent.norm());
      ft_.backward(ft_tape, d_zt_align + d_zt_ent, Backprop::params_only);
      trg_opt_->step("L_Align + L_TrgEnt");
    }

    row.l_seg += l_seg;
    row.l_ardm += ardm.value;
    row.l_align += l_align;
    row.l_trg_ent += l_trg;
    row.total += total;
  }
  const double n = batches.empty() ? 1.0 : static_cast<double>(batches.size());
  row.l_seg /= n;
  row.l_ardm /= n;
  row.l_align /= n;
  row.l_trg_ent /= n;
  row.total /= n;
  return row;
}

RunArtifacts AdaptationRun::run() {
  cfg_.validate();
  if (!fs_.frozen() || !g_.frozen())
    throw StateError("adapt: source encoder and classifier must be frozen");
  if (target_.size() < 2) throw ConfigError("adapt: target set needs at least two samples");
  if (fs_.spec().in_channels != target_.channels())
    throw ShapeError("adapt: encoder channels differ from the target data");

  init_models();
  init_bank();
  record_hashes();

  if (eval_.target_labeled) art_.src_only_mf1 = evaluate_mf1(fs_, g_, *eval_.target_labeled);
  if (eval_.source_heldout) {
    src_features_ = represent(
        fs_, eval_.source_heldout->to_batch(first_indices(eval_.source_heldout->size(), cfg_.snapshot_samples)));
    snap_x_ = target_.to_batch(first_indices(target_.size(), cfg_.snapshot_samples));
    snap_masks_ = eval_masks(snap_x_.count(), snap_x_.length(), cfg_, 0x5a4fULL);
  }

  {
    const Snapshot s = snapshot(0);
    MetricsRow r;
    r.epoch = 0;
    r.phase = "initial";
    r.mf1_target = s.mf1;
    r.kl_src_srclike = s.kl_src_srclike;
    r.kl_srclike_trg = s.kl_srclike_trg;
    r.kl_src_trg = s.kl_src_trg;
    art_.metrics.push_back(r);
  }
  for (int epoch = 0; epoch < cfg_.epochs_total; ++epoch) {
    MetricsRow r = train_epoch(epoch);
    const Snapshot s = snapshot(epoch + 1);
    r.mf1_target = s.mf1;
    r.kl_src_srclike = s.kl_src_srclike;
    r.kl_srclike_trg = s.kl_srclike_trg;
    r.kl_src_trg = s.kl_src_trg;
    art_.metrics.push_back(r);
    record_hashes();
  }
  art_.final_mf1 = art_.metrics.back().mf1_target;
  art_.target_encoder = std::move(ft_);
  art_.recovery = std::move(rec_);
  art_.bank = std::move(*bank_);
  return std::move(art_);
}

}  // namespace

RunArtifacts adapt(const Dataset& target, Encoder& source_encoder, Classifier& classifier,
                   const AdaptConfig& config, const AdaptEval& eval) {
  AdaptationRun run(target, source_encoder, classifier, config, eval);
  return run.run();
}

RunArtifacts run_ablation(Variant variant, const Dataset& target, Encoder& source_encoder,
                          Classifier& classifier, AdaptConfig config, const AdaptEval& eval) {
  config.variant = variant;
  return adapt(target, source_encoder, classifier, config, eval);
}

}  // namespace temsr
