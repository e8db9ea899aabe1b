#include "temsr/losses.hpp"

#include <cmath>
#include <map>

namespace temsr {

double entropy(std::span<const double> p) {
  double sum = 0.0;
  double h = 0.0;
  for (double v : p) {
    if (!(v >= 0.0)) throw DomainError("entropy: negative or non-finite probability");
    sum += v;
    if (v > 0.0) h -= v * std::log(v);
  }
  if (std::abs(sum - 1.0) > 1e-6) throw DomainError("entropy: probabilities do not sum to one");
  return h;
}

LogitEntropy entropy_of_logits(const Matrix& logits) {
  LogitEntropy e;
  e.probs = softmax_columns(logits);
  // log p from the shifted logits keeps saturated columns finite.
  const Matrix shifted = logits.rowwise() - logits.colwise().maxCoeff();
  const RowVector lse = shifted.array().exp().colwise().sum().log();
  const Matrix logp = shifted.rowwise() - lse;
  e.entropy = -(e.probs.array() * logp.array()).colwise().sum().transpose();
  return e;
}

Matrix entropy_logit_grad(const LogitEntropy& e, const Vector& weights) {
  // dH/dz_j = -p_j (log p_j + H)
  const Matrix logp = e.probs.array().max(1e-300).log();
  Matrix g = -(e.probs.array() * (logp.rowwise() + e.entropy.transpose()).array());
  g.array().rowwise() *= weights.transpose().array();
  return g;
}

// ---------------------------------------------------------------------------

SegSimValue seg_sim_from_aggregates(const std::array<double, 4>& e, SimPenalty penalty) {
  SegSimValue out;
  for (int k = 0; k < 4; ++k)
    for (int s = k + 1; s < 4; ++s) {
      const double d = e[k] - e[s];
      if (penalty == SimPenalty::absolute) {
        out.value += std::abs(d);
        const double sg = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
        out.grad[k] += sg;
        out.grad[s] -= sg;
      } else {
        out.value += d * d;
        out.grad[k] += 2.0 * d;
        out.grad[s] -= 2.0 * d;
      }
    }
  return out;
}

namespace {

struct Piece {
  int sample;
  SegmentRange range;
};

struct PieceGroup {
  std::vector<Piece> pieces;
  Encoder::Tape tape;
  Matrix features;
  LogitEntropy ent;
};

// Evaluate every segment instance through the frozen nets, batching pieces
// of equal length together.  Eval-mode encoders make the grouping invisible.
std::vector<PieceGroup> evaluate_pieces(const Batch& x, const std::vector<Piece>& pieces,
                                        Encoder& encoder, Classifier& classifier, bool want_tape) {
  std::map<int, std::vector<Piece>> by_length;
  for (const auto& p : pieces) by_length[p.range.length()].push_back(p);
  std::vector<PieceGroup> groups;
  for (auto& [len, list] : by_length) {
    PieceGroup g;
    g.pieces = std::move(list);
    Batch seg(static_cast<int>(g.pieces.size()), x.channels(), len);
    for (std::size_t j = 0; j < g.pieces.size(); ++j)
      seg.sample(static_cast<int>(j)) =
          x.sample(g.pieces[j].sample).middleCols(g.pieces[j].range.begin, len);
    g.features = encoder.forward(seg, Mode::eval, want_tape ? &g.tape : nullptr);
    g.ent = entropy_of_logits(classifier.logits(g.features));
    groups.push_back(std::move(g));
  }
  return groups;
}

// Back-propagate per-piece entropy weights to the source batch.
void scatter_piece_grads(std::vector<PieceGroup>& groups, const std::vector<Vector>& weights,
                         Encoder& encoder, Classifier& classifier, Matrix& grad, int length) {
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    auto& g = groups[gi];
    const Matrix dlogits = entropy_logit_grad(g.ent, weights[gi]);
    const Matrix dz = classifier.backward(g.features, dlogits, Backprop::input_only);
    const Matrix dx = encoder.backward(g.tape, dz, Backprop::input_only);
    const int len = g.pieces.empty() ? 0 : g.pieces.front().range.length();
    for (std::size_t j = 0; j < g.pieces.size(); ++j) {
      const Piece& p = g.pieces[j];
      grad.middleCols(static_cast<Eigen::Index>(p.sample) * length + p.range.begin, len) +=
          dx.middleCols(static_cast<Eigen::Index>(j) * len, len);
    }
  }
}

}  // namespace

SegLossResult seg_loss(const Batch& x_sl, std::span<const MaskSpec> masks, Encoder& encoder,
                       Classifier& classifier, const SegLossOptions& options) {
  if (static_cast<int>(masks.size()) != x_sl.count())
    throw ShapeError("seg_loss: one mask per recovered sample required");
  std::vector<Piece> pieces;
  for (int b = 0; b < x_sl.count(); ++b) {
    const auto ranges = segment_ranges(x_sl.length(), masks[static_cast<std::size_t>(b)], options.p_s);
    std::array<bool, 4> seen{};
    for (const auto& r : ranges) {
      pieces.push_back({b, r});
      seen[static_cast<std::size_t>(r.kind)] = true;
    }
    for (bool s : seen)
      if (!s) throw ConfigError("seg_loss: a segment kind is missing");
  }

  auto groups = evaluate_pieces(x_sl, pieces, encoder, classifier, options.want_grad);
  SegLossResult out;
  for (const auto& g : groups)
    for (std::size_t j = 0; j < g.pieces.size(); ++j)
      out.aggregates[static_cast<std::size_t>(g.pieces[j].range.kind)] += g.ent.entropy(static_cast<Eigen::Index>(j));
  for (double a : out.aggregates) out.seg_ent += a;
  const SegSimValue sim = seg_sim_from_aggregates(out.aggregates, options.penalty);
  out.seg_sim = sim.value;
  if (!options.want_grad) return out;

  std::vector<Vector> weights;
  for (const auto& g : groups) {
    Vector w(static_cast<Eigen::Index>(g.pieces.size()));
    for (std::size_t j = 0; j < g.pieces.size(); ++j)
      w(static_cast<Eigen::Index>(j)) =
          options.ent_weight +
          options.sim_weight * sim.grad[static_cast<std::size_t>(g.pieces[j].range.kind)];
    weights.push_back(std::move(w));
  }
  out.grad = Matrix::Zero(x_sl.channels(), x_sl.data().cols());
  scatter_piece_grads(groups, weights, encoder, classifier, out.grad, x_sl.length());
  return out;
}

BatchEntropyResult sample_entropy_loss(const Batch& x, Encoder& encoder, Classifier& classifier,
                                       bool want_grad) {
  BatchEntropyResult out;
  Encoder::Tape tape;
  const Matrix z = encoder.forward(x, Mode::eval, want_grad ? &tape : nullptr);
  const LogitEntropy e = entropy_of_logits(classifier.logits(z));
  out.per_sample = e.entropy;
  out.value = e.entropy.sum();
  if (want_grad) {
    const Matrix dz = classifier.backward(
        z, entropy_logit_grad(e, Vector::Ones(x.count())), Backprop::input_only);
    out.grad = encoder.backward(tape, dz, Backprop::input_only);
  }
  return out;
}

// ---------------------------------------------------------------------------

void SimilarityParams::validate() const {
  if (!(temperature > 0.0)) throw ConfigError("similarity: temperature must be positive");
}

double similarity(const Vector& a, const Vector& b, const SimilarityParams& params) {
  params.validate();
  if (a.size() != b.size()) throw ShapeError("similarity: dimension mismatch");
  double dot = a.dot(b);
  if (params.normalize) dot /= std::max(a.norm(), 1e-12) * std::max(b.norm(), 1e-12);
  return std::exp(dot / params.temperature);
}

double ardm_from_similarities(const Vector& s_anchor, const Vector& s_target, const Matrix& s_pairs) {
  const Eigen::Index b = s_anchor.size();
  if (s_target.size() != b || s_pairs.rows() != b || s_pairs.cols() != b)
    throw ShapeError("ardm: similarity shapes disagree");
  if (b < 1) throw ShapeError("ardm: empty batch");
  double loss = 0.0;
  for (Eigen::Index i = 0; i < b; ++i) {
    double denom = s_anchor(i) + s_target(i);
    for (Eigen::Index k = 0; k < b; ++k)
      if (k != i) denom += s_pairs(i, k);
    loss -= std::log(s_anchor(i) / denom);
  }
  return loss / static_cast<double>(b);
}

namespace {

Matrix unit_columns(const Matrix& z, Vector* norms) {
  Vector n = z.colwise().norm().transpose().cwiseMax(1e-12);
  if (norms) *norms = n;
  return z.array().rowwise() / n.transpose().array();
}

// Gradient through column normalisation: (g - u (u . g)) / |z|.
Matrix unit_columns_backward(const Matrix& u, const Vector& norms, const Matrix& du) {
  const RowVector proj = (u.array() * du.array()).colwise().sum();
  Matrix dz = du - (u.array().rowwise() * proj.array()).matrix();
  return dz.array().rowwise() / norms.transpose().array();
}

}  // namespace

ArdmFeatureResult ardm_from_features(const Matrix& z_sl, const Matrix& z_t, const Vector& z_anchor,
                                     const SimilarityParams& params) {
  params.validate();
  const Eigen::Index b = z_sl.cols();
  if (b < 1) throw ShapeError("ardm: empty batch");
  if (z_t.cols() != b || z_t.rows() != z_sl.rows() || z_anchor.size() != z_sl.rows())
    throw ShapeError("ardm: feature shapes disagree");

  Vector n_sl, n_t, n_a;
  const Matrix u_sl = params.normalize ? unit_columns(z_sl, &n_sl) : z_sl;
  const Matrix u_t = params.normalize ? unit_columns(z_t, &n_t) : z_t;
  Matrix a_mat = z_anchor;
  const Vector u_a = params.normalize ? Vector(unit_columns(a_mat, &n_a).col(0)) : z_anchor;

  const double inv_tau = 1.0 / params.temperature;
  // Logit rows: column 0 anchor, column 1 own target, columns 2.. other recovered.
  const Vector l_a = (u_sl.transpose() * u_a) * inv_tau;
  const Vector l_t = (u_sl.array() * u_t.array()).colwise().sum().transpose() * inv_tau;
  const Matrix l_p = (u_sl.transpose() * u_sl) * inv_tau;

  ArdmFeatureResult out;
  Matrix d_lp = Matrix::Zero(b, b);
  Vector d_la(b), d_lt(b);
  for (Eigen::Index i = 0; i < b; ++i) {
    double mx = std::max(l_a(i), l_t(i));
    for (Eigen::Index k = 0; k < b; ++k)
      if (k != i) mx = std::max(mx, l_p(i, k));
    const double e_a = std::exp(l_a(i) - mx);
    const double e_t = std::exp(l_t(i) - mx);
    double denom = e_a + e_t;
    for (Eigen::Index k = 0; k < b; ++k)
      if (k != i) denom += std::exp(l_p(i, k) - mx);
    if (!std::isfinite(std::exp(l_a(i))) || !std::isfinite(std::exp(l_t(i))) ||
        !std::isfinite(std::exp(mx)))
      throw TrainingError("L_ARDM: non-finite similarity (raise temperature or enable normalization)");
    out.value += std::log(denom) - (l_a(i) - mx);
    d_la(i) = e_a / denom - 1.0;
    d_lt(i) = e_t / denom;
    for (Eigen::Index k = 0; k < b; ++k)
      if (k != i) d_lp(i, k) = std::exp(l_p(i, k) - mx) / denom;
  }
  const double scale = inv_tau / static_cast<double>(b);
  out.value /= static_cast<double>(b);

  // l_p(i, k) = u_i . u_k: gradient reaches both columns.
  Matrix du = u_a * d_la.transpose() + u_t * d_lt.asDiagonal() + u_sl * (d_lp + d_lp.transpose());
  du *= scale;
  out.grad = params.normalize ? unit_columns_backward(u_sl, n_sl, du) : du;
  return out;
}

ArdmLossResult ardm_loss(const Batch& x_sl, const Batch& x_t, const Matrix& anchor,
                         Encoder& encoder, const SimilarityParams& params, bool want_grad) {
  if (x_sl.count() != x_t.count()) throw ShapeError("ardm_loss: batch sizes differ");
  if (anchor.rows() != x_sl.channels() || anchor.cols() != x_sl.length())
    throw ShapeError("ardm_loss: anchor shape differs from samples");
  Encoder::Tape tape;
  const Matrix z_sl = encoder.forward(x_sl, Mode::eval, want_grad ? &tape : nullptr);
  const Matrix z_t = encoder.forward(x_t, Mode::eval);
  const Matrix z_a = encoder.forward(Batch(1, anchor.rows(), static_cast<int>(anchor.cols()), anchor), Mode::eval);
  const ArdmFeatureResult f = ardm_from_features(z_sl, z_t, z_a.col(0), params);
  ArdmLossResult out{f.value, {}};
  if (want_grad) out.grad = encoder.backward(tape, f.grad, Backprop::input_only);
  return out;
}

// ---------------------------------------------------------------------------

Matrix feature_covariance(const Matrix& feat) {
  if (feat.cols() < 2) throw ConfigError("covariance: need at least two samples");
  const Matrix c = feat.colwise() - feat.rowwise().mean();
  return (c * c.transpose()) / static_cast<double>(feat.cols() - 1);
}

CoralResult coral_loss(const Matrix& feat_a, const Matrix& feat_b) {
  if (feat_a.cols() < 2 || feat_b.cols() < 2)
    throw ConfigError("coral_loss: each batch needs at least two samples");
  if (feat_a.rows() != feat_b.rows()) throw ShapeError("coral_loss: feature dimensions differ");
  const double d = static_cast<double>(feat_a.rows());
  const Matrix ca = feat_a.colwise() - feat_a.rowwise().mean();
  const Matrix cb = feat_b.colwise() - feat_b.rowwise().mean();
  const Matrix diff = (ca * ca.transpose()) / static_cast<double>(feat_a.cols() - 1) -
                      (cb * cb.transpose()) / static_cast<double>(feat_b.cols() - 1);
  CoralResult out;
  out.value = diff.squaredNorm() / (4.0 * d * d);
  const Matrix g = diff / (2.0 * d * d);
  out.grad_a = (2.0 / static_cast<double>(feat_a.cols() - 1)) * g * ca;
  out.grad_b = (-2.0 / static_cast<double>(feat_b.cols() - 1)) * g * cb;
  return out;
}

TrgEntResult trg_ent_from_features(const Matrix& z_t, Classifier& classifier) {
  const LogitEntropy e = entropy_of_logits(classifier.logits(z_t));
  TrgEntResult out;
  out.value = e.entropy.sum();
  out.grad_features = classifier.backward(
      z_t, entropy_logit_grad(e, Vector::Ones(z_t.cols())), Backprop::input_only);
  return out;
}

double trg_ent_loss(const Batch& x_t, Encoder& target_encoder, Classifier& classifier) {
  Encoder::Tape tape;
  const Matrix z = target_encoder.forward(x_t, Mode::train, &tape);
  const TrgEntResult r = trg_ent_from_features(z, classifier);
  target_encoder.backward(tape, r.grad_features, Backprop::params_only);
  return r.value;
}

// ---------------------------------------------------------------------------

std::string to_string(Phase p) { return p == Phase::source_like ? "source_like" : "transfer"; }

double total_loss(const LossParts& parts, double lambda_seg, double lambda_ardm, Phase phase) {
  if (phase == Phase::source_like)
    return lambda_seg * parts.seg + lambda_ardm * parts.ardm + parts.trg_ent;
  return parts.align + parts.trg_ent;
}

}  // namespace temsr
