#include "temsr/nets.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace temsr {

namespace {

void fill_uniform(Matrix& m, double bound, Rng& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = u(rng);
}

Matrix sigmoid(const Matrix& x) { return (1.0 + (-x.array()).exp()).inverse().matrix(); }

// Sample-major (b * L + t) <-> time-major (t * B + b) column permutations.
Matrix to_time_major(const Matrix& x, int count, int length) {
  Matrix out(x.rows(), x.cols());
  for (int b = 0; b < count; ++b)
    for (int t = 0; t < length; ++t) out.col(t * count + b) = x.col(b * length + t);
  return out;
}

Matrix to_sample_major(const Matrix& x, int count, int length) {
  Matrix out(x.rows(), x.cols());
  for (int b = 0; b < count; ++b)
    for (int t = 0; t < length; ++t) out.col(b * length + t) = x.col(t * count + b);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Network base

void Network::zero_grad() {
  for (auto& p : parameters()) p.grad->setZero();
}

std::uint64_t Network::state_hash() {
  std::vector<const Matrix*> mats;
  for (auto& t : state()) mats.push_back(t.value);
  return hash_matrices(mats);
}

std::size_t Network::parameter_count() {
  std::size_t n = 0;
  for (auto& p : parameters()) n += static_cast<std::size_t>(p.value->size());
  return n;
}

void Network::require_trainable(Backprop mode) const {
  if (frozen_ && mode != Backprop::input_only)
    throw StateError(kind() + " is frozen; parameter gradients are not available");
}

// ---------------------------------------------------------------------------
// Conv1d

Conv1d::Conv1d(int in_channels, int out_channels, int kernel, int stride, int padding)
    : weight(Matrix::Zero(out_channels, kernel * in_channels)),
      weight_grad(Matrix::Zero(out_channels, kernel * in_channels)), in_(in_channels),
      out_(out_channels), kernel_(kernel), stride_(stride), padding_(padding) {}

int Conv1d::output_length(int in_length) const {
  const int span = in_length + 2 * padding_ - kernel_;
  return span < 0 ? 0 : span / stride_ + 1;
}

void Conv1d::init(Rng& rng) { fill_uniform(weight, 1.0 / std::sqrt(in_ * kernel_), rng); }

Matrix Conv1d::forward(const Matrix& x, int count, int len, Tape* tape) const {
  if (x.rows() != in_ || x.cols() != static_cast<Eigen::Index>(count) * len)
    throw ShapeError("Conv1d: input shape mismatch");
  const int out_len = output_length(len);
  if (out_len < 1) throw ShapeError("Conv1d: input shorter than the kernel span");
  Matrix cols = Matrix::Zero(static_cast<Eigen::Index>(kernel_) * in_,
                             static_cast<Eigen::Index>(count) * out_len);
  for (int b = 0; b < count; ++b)
    for (int t = 0; t < out_len; ++t) {
      const Eigen::Index col = static_cast<Eigen::Index>(b) * out_len + t;
      for (int k = 0; k < kernel_; ++k) {
        const int src = t * stride_ + k - padding_;
        if (src >= 0 && src < len)
          cols.block(static_cast<Eigen::Index>(k) * in_, col, in_, 1) =
              x.col(static_cast<Eigen::Index>(b) * len + src);
      }
    }
  Matrix y = weight * cols;
  if (tape) *tape = {std::move(cols), count, len, out_len};
  return y;
}

Matrix Conv1d::backward(const Tape& tape, const Matrix& dy, Backprop mode) {
  if (mode != Backprop::input_only) weight_grad.noalias() += dy * tape.cols.transpose();
  if (mode == Backprop::params_only) return {};
  const Matrix dcols = weight.transpose() * dy;
  Matrix dx = Matrix::Zero(in_, static_cast<Eigen::Index>(tape.count) * tape.in_length);
  for (int b = 0; b < tape.count; ++b)
    for (int t = 0; t < tape.out_length; ++t) {
      const Eigen::Index col = static_cast<Eigen::Index>(b) * tape.out_length + t;
      for (int k = 0; k < kernel_; ++k) {
        const int src = t * stride_ + k - padding_;
        if (src >= 0 && src < tape.in_length)
          dx.col(static_cast<Eigen::Index>(b) * tape.in_length + src) +=
              dcols.block(static_cast<Eigen::Index>(k) * in_, col, in_, 1);
      }
    }
  return dx;
}

// ---------------------------------------------------------------------------
// BatchNorm1d

BatchNorm1d::BatchNorm1d(int channels, double momentum, double eps)
    : gamma(Matrix::Ones(channels, 1)), beta(Matrix::Zero(channels, 1)),
      gamma_grad(Matrix::Zero(channels, 1)), beta_grad(Matrix::Zero(channels, 1)),
      running_mean(Matrix::Zero(channels, 1)), running_var(Matrix::Ones(channels, 1)),
      momentum_(momentum), eps_(eps) {}

Matrix BatchNorm1d::forward(const Matrix& x, Mode mode, Tape* tape) {
  Vector mean, var;
  if (mode == Mode::train) {
    const double n = static_cast<double>(x.cols());
    if (x.cols() < 2) throw ShapeError("BatchNorm1d: train mode needs more than one value");
    mean = x.rowwise().mean();
    var = (x.colwise() - mean).array().square().rowwise().mean();
    running_mean = (1.0 - momentum_) * running_mean + momentum_ * mean;
    running_var = (1.0 - momentum_) * running_var + momentum_ * var * (n / (n - 1.0));
  } else {
    mean = running_mean.col(0);
    var = running_var.col(0);
  }
  const Vector inv_std = (var.array() + eps_).rsqrt();
  Matrix xhat = (x.colwise() - mean).array().colwise() * inv_std.array();
  Matrix y = (xhat.array().colwise() * gamma.col(0).array()).colwise() + beta.col(0).array();
  if (tape) *tape = {std::move(xhat), inv_std, mode};
  return y;
}

Matrix BatchNorm1d::backward(const Tape& tape, const Matrix& dy, Backprop mode) {
  if (mode != Backprop::input_only) {
    gamma_grad.col(0) += (dy.array() * tape.xhat.array()).rowwise().sum().matrix();
    beta_grad.col(0) += dy.rowwise().sum();
  }
  if (mode == Backprop::params_only) return {};
  const Matrix dxhat = dy.array().colwise() * gamma.col(0).array();
  if (tape.mode == Mode::eval) return dxhat.array().colwise() * tape.inv_std.array();
  const double n = static_cast<double>(dy.cols());
  const Vector sum_d = dxhat.rowwise().sum();
  const Vector sum_dx = (dxhat.array() * tape.xhat.array()).rowwise().sum();
  Matrix dx = (n * dxhat.array()).colwise() - sum_d.array();
  dx.array() -= tape.xhat.array().colwise() * sum_dx.array();
  dx.array().colwise() *= tape.inv_std.array() / n;
  return dx;
}

// ---------------------------------------------------------------------------
// Linear

Linear::Linear(int in, int out)
    : weight(Matrix::Zero(out, in)), weight_grad(Matrix::Zero(out, in)),
      bias(Matrix::Zero(out, 1)), bias_grad(Matrix::Zero(out, 1)) {}

void Linear::init(Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(weight.cols()));
  fill_uniform(weight, bound, rng);
  fill_uniform(bias, bound, rng);
}

Matrix Linear::forward(const Matrix& x) const {
  if (x.rows() != weight.cols()) throw ShapeError("Linear: input dimension mismatch");
  return (weight * x).colwise() + bias.col(0);
}

Matrix Linear::backward(const Matrix& x, const Matrix& dy, Backprop mode) {
  if (mode != Backprop::input_only) {
    weight_grad.noalias() += dy * x.transpose();
    bias_grad.col(0) += dy.rowwise().sum();
  }
  if (mode == Backprop::params_only) return {};
  return weight.transpose() * dy;
}

// ---------------------------------------------------------------------------
// LSTM

Lstm::Lstm(int in, int hidden)
    : w_ih(Matrix::Zero(4 * hidden, in)), w_hh(Matrix::Zero(4 * hidden, hidden)),
      bias(Matrix::Zero(4 * hidden, 1)), w_ih_grad(Matrix::Zero(4 * hidden, in)),
      w_hh_grad(Matrix::Zero(4 * hidden, hidden)), bias_grad(Matrix::Zero(4 * hidden, 1)),
      in_(in), hidden_(hidden) {}

void Lstm::init(Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden_));
  fill_uniform(w_ih, bound, rng);
  fill_uniform(w_hh, bound, rng);
  fill_uniform(bias, bound, rng);
}

Matrix Lstm::forward(const Matrix& x, int steps, int batch, Tape* tape) const {
  if (x.rows() != in_ || x.cols() != static_cast<Eigen::Index>(steps) * batch)
    throw ShapeError("Lstm: input shape mismatch");
  const int h = hidden_;
  Matrix gates = (w_ih * x).colwise() + bias.col(0);
  Matrix cell(h, x.cols());
  Matrix hidden(h, x.cols());
  Matrix h_prev = Matrix::Zero(h, batch);
  Matrix c_prev = Matrix::Zero(h, batch);
  for (int t = 0; t < steps; ++t) {
    auto g = gates.middleCols(static_cast<Eigen::Index>(t) * batch, batch);
    g.noalias() += w_hh * h_prev;
    g.topRows(2 * h) = sigmoid(g.topRows(2 * h));
    g.middleRows(2 * h, h) = g.middleRows(2 * h, h).array().tanh().matrix();
    g.bottomRows(h) = sigmoid(g.bottomRows(h));
    c_prev = (g.middleRows(h, h).array() * c_prev.array() +
              g.topRows(h).array() * g.middleRows(2 * h, h).array())
                 .matrix();
    h_prev = (g.bottomRows(h).array() * c_prev.array().tanh()).matrix();
    cell.middleCols(static_cast<Eigen::Index>(t) * batch, batch) = c_prev;
    hidden.middleCols(static_cast<Eigen::Index>(t) * batch, batch) = h_prev;
  }
  if (tape) *tape = {x, std::move(gates), std::move(cell), hidden, steps, batch};
  return hidden;
}

Matrix Lstm::backward(const Tape& tape, const Matrix& dh_out, Backprop mode) {
  const int h = hidden_;
  const int batch = tape.batch;
  Matrix d_pre(4 * h, tape.gates.cols());
  Matrix dh_next = Matrix::Zero(h, batch);
  Matrix dc_next = Matrix::Zero(h, batch);
  for (int t = tape.steps - 1; t >= 0; --t) {
    const Eigen::Index c0 = static_cast<Eigen::Index>(t) * batch;
    const auto g = tape.gates.middleCols(c0, batch);
    const auto gi = g.topRows(h).array();
    const auto gf = g.middleRows(h, h).array();
    const auto gg = g.middleRows(2 * h, h).array();
    const auto go = g.bottomRows(h).array();
    const Eigen::ArrayXXd tc = tape.cell.middleCols(c0, batch).array().tanh();
    const Eigen::ArrayXXd dh = (dh_out.middleCols(c0, batch) + dh_next).array();
    const Eigen::ArrayXXd dc = dc_next.array() + dh * go * (1.0 - tc.square());
    const Eigen::ArrayXXd c_prev = t > 0 ? Eigen::ArrayXXd(tape.cell.middleCols(c0 - batch, batch))
                                         : Eigen::ArrayXXd::Zero(h, batch);
    auto dp = d_pre.middleCols(c0, batch);
    dp.topRows(h) = (dc * gg * gi * (1.0 - gi)).matrix();
    dp.middleRows(h, h) = (dc * c_prev * gf * (1.0 - gf)).matrix();
    dp.middleRows(2 * h, h) = (dc * gi * (1.0 - gg.square())).matrix();
    dp.bottomRows(h) = (dh * tc * go * (1.0 - go)).matrix();
    dc_next = (dc * gf).matrix();
    dh_next.noalias() = w_hh.transpose() * dp;
  }
  if (mode != Backprop::input_only) {
    w_ih_grad.noalias() += d_pre * tape.input.transpose();
    bias_grad.col(0) += d_pre.rowwise().sum();
    if (tape.steps > 1) {
      const Eigen::Index n = static_cast<Eigen::Index>(tape.steps - 1) * batch;
      w_hh_grad.noalias() += d_pre.rightCols(n) * tape.hidden.leftCols(n).transpose();
    }
  }
  if (mode == Backprop::params_only) return {};
  return w_ih.transpose() * d_pre;
}

Matrix softmax_columns(const Matrix& logits) {
  Matrix p = logits.rowwise() - logits.colwise().maxCoeff();
  p = p.array().exp().matrix();
  return p.array().rowwise() / p.colwise().sum().array();
}

// ---------------------------------------------------------------------------
// Encoder

std::array<int, 4> EncoderSpec::shape_trace(int length) const {
  std::array<int, 4> out{std::max(length, min_length), 0, 0, 0};
  int len = out[0];
  for (int s = 0; s < 3; ++s) {
    const int padding = kernels[s] / 2;
    const int conv_len = (len + 2 * padding - kernels[s]) / strides[s] + 1;
    len = conv_len / pool;
    out[s + 1] = len;
  }
  return out;
}

nlohmann::json EncoderSpec::to_json() const {
  return {{"in_channels", in_channels}, {"filters", filters},         {"kernels", kernels},
          {"strides", strides},         {"pool", pool},               {"bn_momentum", bn_momentum},
          {"bn_eps", bn_eps},           {"min_length", min_length}};
}

EncoderSpec EncoderSpec::from_json(const nlohmann::json& j) {
  EncoderSpec s;
  s.in_channels = j.value("in_channels", s.in_channels);
  s.filters = j.value("filters", s.filters);
  s.kernels = j.value("kernels", s.kernels);
  s.strides = j.value("strides", s.strides);
  s.pool = j.value("pool", s.pool);
  s.bn_momentum = j.value("bn_momentum", s.bn_momentum);
  s.bn_eps = j.value("bn_eps", s.bn_eps);
  s.min_length = j.value("min_length", s.min_length);
  return s;
}

Encoder::Encoder(const EncoderSpec& spec, Rng& rng) : spec_(spec) {
  if (spec.in_channels < 1 || spec.pool < 1) throw ConfigError("EncoderSpec: invalid shape");
  int in = spec.in_channels;
  for (int s = 0; s < 3; ++s) {
    if (spec.filters[s] < 1 || spec.kernels[s] < 1 || spec.strides[s] < 1)
      throw ConfigError("EncoderSpec: filters, kernels and strides must be positive");
    conv_[s] = Conv1d(in, spec.filters[s], spec.kernels[s], spec.strides[s], spec.kernels[s] / 2);
    conv_[s].init(rng);
    bn_[s] = BatchNorm1d(spec.filters[s], spec.bn_momentum, spec.bn_eps);
    in = spec.filters[s];
  }
}

Matrix Encoder::forward(const Batch& x, Mode mode, Tape* tape) {
  if (x.channels() != spec_.in_channels) throw ShapeError("Encoder: channel count mismatch");
  if (x.count() < 1) throw ShapeError("Encoder: empty batch");
  const int count = x.count();
  int len = x.length();
  Matrix h;
  if (len < spec_.min_length) {
    // Right-pad with the edge value so short segments stay admissible.
    h.resize(x.channels(), static_cast<Eigen::Index>(count) * spec_.min_length);
    for (int b = 0; b < count; ++b) {
      auto dst = h.middleCols(static_cast<Eigen::Index>(b) * spec_.min_length, spec_.min_length);
      dst.leftCols(len) = x.sample(b);
      for (int t = len; t < spec_.min_length; ++t) dst.col(t) = x.sample(b).col(len - 1);
    }
    len = spec_.min_length;
  } else {
    h = x.data();
  }
  if (tape) {
    tape->count = count;
    tape->input_length = x.length();
  }
  for (int s = 0; s < 3; ++s) {
    StageTape* st = tape ? &tape->stages[s] : nullptr;
    Matrix y = conv_[s].forward(h, count, len, st ? &st->conv : nullptr);
    const int conv_len = conv_[s].output_length(len);
    y = bn_[s].forward(y, mode, st ? &st->bn : nullptr);
    if (st) st->relu_mask = (y.array() > 0.0).cast<double>().matrix();
    y = y.cwiseMax(0.0);
    const int pool = spec_.pool;
    const int out_len = conv_len / pool;
    if (out_len < 1) throw ShapeError("Encoder: sequence vanishes after pooling");
    Matrix pooled(y.rows(), static_cast<Eigen::Index>(count) * out_len);
    if (st) {
      st->pool_argmax.resize(static_cast<std::size_t>(pooled.size()));
      st->pre_pool_length = conv_len;
      st->post_pool_length = out_len;
    }
    for (int b = 0; b < count; ++b)
      for (int t = 0; t < out_len; ++t) {
        const Eigen::Index oc = static_cast<Eigen::Index>(b) * out_len + t;
        const Eigen::Index base = static_cast<Eigen::Index>(b) * conv_len + t * pool;
        for (Eigen::Index c = 0; c < y.rows(); ++c) {
          Eigen::Index best = base;
          for (int k = 1; k < pool; ++k)
            if (y(c, base + k) > y(c, best)) best = base + k;
          pooled(c, oc) = y(c, best);
          if (st) st->pool_argmax[static_cast<std::size_t>(oc * y.rows() + c)] = static_cast<int>(best);
        }
      }
    h = std::move(pooled);
    len = out_len;
  }
  if (tape) tape->final_length = len;
  Matrix z(h.rows(), count);
  for (int b = 0; b < count; ++b)
    z.col(b) = h.middleCols(static_cast<Eigen::Index>(b) * len, len).rowwise().mean();
  return z;
}

Matrix Encoder::backward(const Tape& tape, const Matrix& d_features, Backprop mode) {
  require_trainable(mode);
  const int count = tape.count;
  int len = tape.final_length;
  Matrix dh(d_features.rows(), static_cast<Eigen::Index>(count) * len);
  for (int b = 0; b < count; ++b)
    dh.middleCols(static_cast<Eigen::Index>(b) * len, len) =
        (d_features.col(b) / static_cast<double>(len)).replicate(1, len);
  for (int s = 2; s >= 0; --s) {
    const StageTape& st = tape.stages[s];
    Matrix dy = Matrix::Zero(dh.rows(), static_cast<Eigen::Index>(count) * st.pre_pool_length);
    for (Eigen::Index oc = 0; oc < dh.cols(); ++oc)
      for (Eigen::Index c = 0; c < dh.rows(); ++c)
        dy(c, st.pool_argmax[static_cast<std::size_t>(oc * dh.rows() + c)]) += dh(c, oc);
    dy.array() *= st.relu_mask.array();
    const bool need_input = s > 0 || mode != Backprop::params_only;
    const Backprop layer_mode = mode == Backprop::input_only ? Backprop::input_only
                                : need_input                 ? Backprop::both
                                                             : Backprop::params_only;
    dy = bn_[s].backward(st.bn, dy, layer_mode == Backprop::params_only ? Backprop::both : layer_mode);
    dh = conv_[s].backward(st.conv, dy, layer_mode);
  }
  if (mode == Backprop::params_only) return {};
  if (tape.input_length < spec_.min_length) {
    const int in_len = tape.input_length;
    const int padded = spec_.min_length;
    Matrix dx(dh.rows(), static_cast<Eigen::Index>(count) * in_len);
    for (int b = 0; b < count; ++b) {
      auto src = dh.middleCols(static_cast<Eigen::Index>(b) * padded, padded);
      auto dst = dx.middleCols(static_cast<Eigen::Index>(b) * in_len, in_len);
      dst = src.leftCols(in_len);
      dst.col(in_len - 1) += src.rightCols(padded - in_len).rowwise().sum();
    }
    return dx;
  }
  return dh;
}

std::vector<ParamRef> Encoder::parameters() {
  std::vector<ParamRef> out;
  for (int s = 0; s < 3; ++s) {
    const std::string p = "stage" + std::to_string(s + 1) + ".";
    out.push_back({p + "conv.weight", &conv_[s].weight, &conv_[s].weight_grad, &frozen_});
    out.push_back({p + "bn.gamma", &bn_[s].gamma, &bn_[s].gamma_grad, &frozen_});
    out.push_back({p + "bn.beta", &bn_[s].beta, &bn_[s].beta_grad, &frozen_});
  }
  return out;
}

std::vector<NamedTensor> Encoder::state() {
  std::vector<NamedTensor> out;
  for (auto& p : parameters()) out.push_back({p.name, p.value});
  for (int s = 0; s < 3; ++s) {
    const std::string p = "stage" + std::to_string(s + 1) + ".";
    out.push_back({p + "bn.running_mean", &bn_[s].running_mean});
    out.push_back({p + "bn.running_var", &bn_[s].running_var});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Classifier

nlohmann::json ClassifierSpec::to_json() const {
  return {{"input_dim", input_dim}, {"classes", classes}};
}

ClassifierSpec ClassifierSpec::from_json(const nlohmann::json& j) {
  ClassifierSpec s;
  s.input_dim = j.value("input_dim", s.input_dim);
  s.classes = j.value("classes", s.classes);
  return s;
}

Classifier::Classifier(const ClassifierSpec& spec, Rng& rng)
    : spec_(spec), linear_(spec.input_dim, spec.classes) {
  if (spec.input_dim < 1 || spec.classes < 2) throw ConfigError("ClassifierSpec: invalid shape");
  linear_.init(rng);
}

Matrix Classifier::logits(const Matrix& z) const {
  if (!z.allFinite()) throw DomainError("Classifier: non-finite features");
  return linear_.forward(z);
}

Matrix Classifier::backward(const Matrix& z, const Matrix& d_logits, Backprop mode) {
  require_trainable(mode);
  return linear_.backward(z, d_logits, mode);
}

std::vector<ParamRef> Classifier::parameters() {
  return {{"linear.weight", &linear_.weight, &linear_.weight_grad, &frozen_},
          {"linear.bias", &linear_.bias, &linear_.bias_grad, &frozen_}};
}

std::vector<NamedTensor> Classifier::state() {
  return {{"linear.weight", &linear_.weight}, {"linear.bias", &linear_.bias}};
}

// ---------------------------------------------------------------------------
// Recovery

nlohmann::json RecoverySpec::to_json() const {
  return {{"channels", channels},
          {"hidden", hidden},
          {"layers", layers},
          {"full_regeneration", full_regeneration}};
}

RecoverySpec RecoverySpec::from_json(const nlohmann::json& j) {
  RecoverySpec s;
  s.channels = j.value("channels", s.channels);
  s.hidden = j.value("hidden", s.hidden);
  s.layers = j.value("layers", s.layers);
  s.full_regeneration = j.value("full_regeneration", s.full_regeneration);
  return s;
}

RecoveryModel::RecoveryModel(const RecoverySpec& spec, Rng& rng)
    : spec_(spec), readout_(spec.hidden, spec.channels) {
  if (spec.channels < 1 || spec.hidden < 1 || spec.layers < 1)
    throw ConfigError("RecoverySpec: invalid shape");
  int in = spec.channels;
  for (int l = 0; l < spec.layers; ++l) {
    lstm_.emplace_back(in, spec.hidden);
    lstm_.back().init(rng);
    in = spec.hidden;
  }
  readout_.init(rng);
}

Batch RecoveryModel::forward(const Batch& x_masked, std::span<const MaskSpec> masks,
                             Tape* tape) const {
  const int count = x_masked.count();
  const int len = x_masked.length();
  if (x_masked.channels() != spec_.channels) throw ShapeError("recover: channel count mismatch");
  if (static_cast<int>(masks.size()) != count) throw ShapeError("recover: one mask per sample");
  for (const auto& m : masks)
    if (m.length() != len) throw ShapeError("recover: mask length differs from sample length");

  Matrix h = to_time_major(x_masked.data(), count, len);
  if (tape) tape->layers.resize(lstm_.size());
  for (std::size_t l = 0; l < lstm_.size(); ++l)
    h = lstm_[l].forward(h, len, count, tape ? &tape->layers[l] : nullptr);
  const Matrix y = to_sample_major(readout_.forward(h), count, len);

  Batch out(count, x_masked.channels(), len, y);
  if (!spec_.full_regeneration)
    for (int b = 0; b < count; ++b) {
      auto dst = out.sample(b);
      const auto src = x_masked.sample(b);
      const MaskSpec& m = masks[static_cast<std::size_t>(b)];
      for (int t = 0; t < len; ++t)
        if (!m.is_masked(t)) dst.col(t) = src.col(t);
    }
  if (tape) {
    tape->last_hidden = std::move(h);
    tape->masks.assign(masks.begin(), masks.end());
    tape->count = count;
    tape->length = len;
  }
  return out;
}

void RecoveryModel::backward(const Tape& tape, const Matrix& d_out) {
  require_trainable(Backprop::params_only);
  Matrix dy = d_out;
  if (!spec_.full_regeneration)
    for (int b = 0; b < tape.count; ++b) {
      const MaskSpec& m = tape.masks[static_cast<std::size_t>(b)];
      for (int t = 0; t < tape.length; ++t)
        if (!m.is_masked(t)) dy.col(static_cast<Eigen::Index>(b) * tape.length + t).setZero();
    }
  dy = to_time_major(dy, tape.count, tape.length);
  Matrix dh = readout_.backward(tape.last_hidden, dy, Backprop::both);
  for (std::size_t l = lstm_.size(); l-- > 0;)
    dh = lstm_[l].backward(tape.layers[l], dh, l == 0 ? Backprop::params_only : Backprop::both);
}

std::vector<ParamRef> RecoveryModel::parameters() {
  std::vector<ParamRef> out;
  for (std::size_t l = 0; l < lstm_.size(); ++l) {
    const std::string p = "lstm" + std::to_string(l + 1) + ".";
    out.push_back({p + "w_ih", &lstm_[l].w_ih, &lstm_[l].w_ih_grad, &frozen_});
    out.push_back({p + "w_hh", &lstm_[l].w_hh, &lstm_[l].w_hh_grad, &frozen_});
    out.push_back({p + "bias", &lstm_[l].bias, &lstm_[l].bias_grad, &frozen_});
  }
  out.push_back({"readout.weight", &readout_.weight, &readout_.weight_grad, &frozen_});
  out.push_back({"readout.bias", &readout_.bias, &readout_.bias_grad, &frozen_});
  return out;
}

std::vector<NamedTensor> RecoveryModel::state() {
  std::vector<NamedTensor> out;
  for (auto& p : parameters()) out.push_back({p.name, p.value});
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer

Optimizer::Optimizer(std::vector<ParamRef> params, OptimizerConfig config)
    : params_(std::move(params)), config_(config) {
  if (config_.learning_rate <= 0) throw ConfigError("Optimizer: learning rate must be positive");
  for (const auto& p : params_) {
    m_.push_back(Matrix::Zero(p.value->rows(), p.value->cols()));
    v_.push_back(Matrix::Zero(p.value->rows(), p.value->cols()));
  }
}

double Optimizer::current_learning_rate() const {
  double lr = config_.learning_rate;
  if (config_.decay_every > 0)
    lr *= std::pow(config_.decay_gamma, static_cast<double>(steps_ / config_.decay_every));
  return lr;
}

void Optimizer::step(const std::string& loss_term) {
  for (const auto& p : params_)
    if (!p.grad->allFinite())
      throw TrainingError("non-finite gradient in '" + p.name + "' from loss term " + loss_term);
  const double lr = current_learning_rate();
  ++steps_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const ParamRef& p = params_[i];
    if (p.frozen && *p.frozen) continue;
    Matrix g = *p.grad;
    if (config_.weight_decay != 0) g += config_.weight_decay * *p.value;
    if (config_.kind == OptimizerConfig::Kind::sgd) {
      *p.value -= lr * g;
      continue;
    }
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g.cwiseProduct(g);
    p.value->array() -=
        lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + config_.eps);
  }
}

void Optimizer::zero_grad() {
  for (auto& p : params_) p.grad->setZero();
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCkptMagic[6] = {'T', 'S', 'C', 'K', '1', '\n'};

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw FormatError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

std::unique_ptr<Network> make_network(const std::string& kind, const nlohmann::json& spec) {
  Rng rng(0);
  if (kind == "encoder") return std::make_unique<Encoder>(EncoderSpec::from_json(spec), rng);
  if (kind == "classifier")
    return std::make_unique<Classifier>(ClassifierSpec::from_json(spec), rng);
  if (kind == "recovery")
    return std::make_unique<RecoveryModel>(RecoverySpec::from_json(spec), rng);
  throw FormatError("checkpoint: unknown network kind '" + kind + "'");
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, std::span<Network* const> nets) {
  nlohmann::json header = {{"format", "temsr-checkpoint"}, {"version", 1}};
  header["networks"] = nlohmann::json::array();
  for (Network* net : nets) {
    nlohmann::json entry = {{"kind", net->kind()}, {"spec", net->spec_json()},
                            {"frozen", net->frozen()}};
    entry["tensors"] = nlohmann::json::array();
    for (auto& t : net->state())
      entry["tensors"].push_back({{"name", t.name}, {"rows", t.value->rows()}, {"cols", t.value->cols()}});
    header["networks"].push_back(entry);
  }
  const std::string text = header.dump(2);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + path.string() + "' for writing");
  os.write(kCkptMagic, 6);
  put_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (Network* net : nets)
    for (auto& t : net->state())
      for (Eigen::Index j = 0; j < t.value->cols(); ++j)
        for (Eigen::Index i = 0; i < t.value->rows(); ++i)
          put_u64(os, std::bit_cast<std::uint64_t>((*t.value)(i, j)));
  if (!os) throw FormatError("write failed for '" + path.string() + "'");
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint '" + path.string() + "'");
  char magic[6];
  if (!is.read(magic, 6) || std::memcmp(magic, kCkptMagic, 6) != 0)
    throw FormatError("bad checkpoint magic in '" + path.string() + "'");
  const std::uint64_t n = get_u64(is);
  if (n > (1ULL << 26)) throw FormatError("checkpoint header too large");
  std::string text(n, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(n))) throw FormatError("checkpoint truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  if (header.value("format", "") != "temsr-checkpoint")
    throw FormatError("not a temsr checkpoint");

  LoadedCheckpoint out;
  for (const auto& entry : header.at("networks")) {
    auto net = make_network(entry.at("kind").get<std::string>(), entry.at("spec"));
    auto st = net->state();
    const auto& tensors = entry.at("tensors");
    if (tensors.size() != st.size()) throw FormatError("checkpoint tensor table mismatch");
    for (std::size_t k = 0; k < st.size(); ++k) {
      const auto& meta = tensors[k];
      if (meta.at("name").get<std::string>() != st[k].name ||
          meta.at("rows").get<Eigen::Index>() != st[k].value->rows() ||
          meta.at("cols").get<Eigen::Index>() != st[k].value->cols())
        throw FormatError("checkpoint tensor '" + st[k].name + "' does not match its spec");
      for (Eigen::Index j = 0; j < st[k].value->cols(); ++j)
        for (Eigen::Index i = 0; i < st[k].value->rows(); ++i)
          (*st[k].value)(i, j) = std::bit_cast<double>(get_u64(is));
    }
    net->set_frozen(entry.value("frozen", false));
    out.networks.push_back(std::move(net));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing checkpoint bytes");
  return out;
}

}  // namespace temsr
