#pragma once

// Trainable networks with explicit forward/backward passes.
//
// Every forward call returns a tape holding the activations its backward
// needs, so one network can be evaluated on several inputs (segments,
// anchors, targets) and each evaluation back-propagated independently.

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "temsr/core.hpp"
#include "temsr/datagen.hpp"
#include "temsr/rng.hpp"

namespace temsr {

enum class Mode { train, eval };

/// Parameter view handed to optimizers.  `frozen` points at the owning
/// network's flag so freezing after optimizer construction still applies.
struct ParamRef {
  std::string name;
  Matrix* value = nullptr;
  Matrix* grad = nullptr;
  const bool* frozen = nullptr;
};

/// Tensor view for checkpointing (parameters and running statistics).
struct NamedTensor {
  std::string name;
  Matrix* value = nullptr;
};

/// Which gradients a backward pass produces.
enum class Backprop { input_only, params_only, both };

class Network {
 public:
  virtual ~Network() = default;

  virtual std::string kind() const = 0;
  virtual nlohmann::json spec_json() const = 0;
  virtual std::vector<ParamRef> parameters() = 0;
  virtual std::vector<NamedTensor> state() = 0;

  bool frozen() const { return frozen_; }
  void set_frozen(bool f) { frozen_ = f; }

  void zero_grad();
  /// Hash of all parameters and running statistics.
  std::uint64_t state_hash();
  std::size_t parameter_count();

 protected:
  void require_trainable(Backprop mode) const;
  bool frozen_ = false;
};

// ---------------------------------------------------------------------------
// Building blocks

class Conv1d {
 public:
  struct Tape {
    Matrix cols;
    int count = 0;
    int in_length = 0;
    int out_length = 0;
  };

  Conv1d() = default;
  Conv1d(int in_channels, int out_channels, int kernel, int stride, int padding);

  int output_length(int in_length) const;
  void init(Rng& rng);
  /// x: in_channels x (count * len).
  Matrix forward(const Matrix& x, int count, int len, Tape* tape) const;
  Matrix backward(const Tape& tape, const Matrix& dy, Backprop mode);

  Matrix weight, weight_grad;  // out x (kernel * in), column index k * in + ci

 private:
  int in_ = 0, out_ = 0, kernel_ = 1, stride_ = 1, padding_ = 0;
};

class BatchNorm1d {
 public:
  struct Tape {
    Matrix xhat;
    Vector inv_std;
    Mode mode = Mode::eval;
  };

  BatchNorm1d() = default;
  BatchNorm1d(int channels, double momentum, double eps);

  Matrix forward(const Matrix& x, Mode mode, Tape* tape);
  Matrix backward(const Tape& tape, const Matrix& dy, Backprop mode);

  Matrix gamma, beta, gamma_grad, beta_grad;  // channels x 1
  Matrix running_mean, running_var;           // channels x 1

 private:
  double momentum_ = 0.1;
  double eps_ = 1e-5;
};

class Linear {
 public:
  Linear() = default;
  Linear(int in, int out);

  void init(Rng& rng);
  /// x: in x B -> out x B.
  Matrix forward(const Matrix& x) const;
  Matrix backward(const Matrix& x, const Matrix& dy, Backprop mode);

  Matrix weight, weight_grad;  // out x in
  Matrix bias, bias_grad;      // out x 1
};

class Lstm {
 public:
  struct Tape {
    Matrix input;  // in x (T * B), time-major
    Matrix gates;  // 4H x (T * B): i, f, g, o after activation
    Matrix cell;   // H x (T * B)
    Matrix hidden; // H x (T * B)
    int steps = 0;
    int batch = 0;
  };

  Lstm() = default;
  Lstm(int in, int hidden);

  void init(Rng& rng);
  /// x: in x (T * B) in time-major order (column t * B + b).
  Matrix forward(const Matrix& x, int steps, int batch, Tape* tape) const;
  Matrix backward(const Tape& tape, const Matrix& dh, Backprop mode);

  int hidden() const { return hidden_; }

  Matrix w_ih, w_hh, bias;
  Matrix w_ih_grad, w_hh_grad, bias_grad;

 private:
  int in_ = 0, hidden_ = 0;
};

/// Column-wise softmax of a C x B logit matrix.
Matrix softmax_columns(const Matrix& logits);

// ---------------------------------------------------------------------------
// Encoder

struct EncoderSpec {
  int in_channels = 1;
  std::array<int, 3> filters{64, 128, 128};
  std::array<int, 3> kernels{8, 8, 8};
  std::array<int, 3> strides{1, 1, 1};
  int pool = 2;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;
  /// Inputs shorter than this are right-padded with their last value.
  int min_length = 8;

  int feature_dim() const { return filters[2]; }
  /// Sequence length after each stage: [input, stage1, stage2, stage3].
  std::array<int, 4> shape_trace(int length) const;

  nlohmann::json to_json() const;
  static EncoderSpec from_json(const nlohmann::json& j);
};

class Encoder : public Network {
 public:
  struct StageTape {
    Conv1d::Tape conv;
    BatchNorm1d::Tape bn;
    Matrix relu_mask;
    std::vector<int> pool_argmax;
    int pre_pool_length = 0;
    int post_pool_length = 0;
  };
  struct Tape {
    std::array<StageTape, 3> stages;
    int count = 0;
    int input_length = 0;
    int final_length = 0;
  };

  Encoder() = default;
  Encoder(const EncoderSpec& spec, Rng& rng);

  const EncoderSpec& spec() const { return spec_; }

  /// Features D x B.  Train mode uses batch statistics and updates running
  /// statistics; eval mode is a pure function of parameters and input.
  Matrix forward(const Batch& x, Mode mode, Tape* tape = nullptr);
  /// Returns dL/dx (channels x count*len) when the mode asks for it.
  Matrix backward(const Tape& tape, const Matrix& d_features, Backprop mode);

  std::string kind() const override { return "encoder"; }
  nlohmann::json spec_json() const override { return spec_.to_json(); }
  std::vector<ParamRef> parameters() override;
  std::vector<NamedTensor> state() override;

 private:
  EncoderSpec spec_;
  std::array<Conv1d, 3> conv_;
  std::array<BatchNorm1d, 3> bn_;
};

// ---------------------------------------------------------------------------
// Classifier

struct ClassifierSpec {
  int input_dim = 128;
  int classes = 2;

  nlohmann::json to_json() const;
  static ClassifierSpec from_json(const nlohmann::json& j);
};

class Classifier : public Network {
 public:
  Classifier() = default;
  Classifier(const ClassifierSpec& spec, Rng& rng);

  const ClassifierSpec& spec() const { return spec_; }

  Matrix logits(const Matrix& z) const;
  /// Probabilities C x B; every column sums to one.
  Matrix forward(const Matrix& z) const { return softmax_columns(logits(z)); }
  /// Gradient w.r.t. the logits in, gradient w.r.t. z out.
  Matrix backward(const Matrix& z, const Matrix& d_logits, Backprop mode);

  std::string kind() const override { return "classifier"; }
  nlohmann::json spec_json() const override { return spec_.to_json(); }
  std::vector<ParamRef> parameters() override;
  std::vector<NamedTensor> state() override;

  Linear& linear() { return linear_; }

 private:
  ClassifierSpec spec_;
  Linear linear_;
};

// ---------------------------------------------------------------------------
// Recovery model

struct RecoverySpec {
  int channels = 1;
  int hidden = 64;
  int layers = 2;
  /// When false (default) only masked points are model-generated and the
  /// observed values pass through everywhere else.
  bool full_regeneration = false;

  nlohmann::json to_json() const;
  static RecoverySpec from_json(const nlohmann::json& j);
};

class RecoveryModel : public Network {
 public:
  struct Tape {
    std::vector<Lstm::Tape> layers;
    Matrix last_hidden;  // H x (T * B), time-major
    std::vector<MaskSpec> masks;
    int count = 0;
    int length = 0;
  };

  RecoveryModel() = default;
  RecoveryModel(const RecoverySpec& spec, Rng& rng);

  const RecoverySpec& spec() const { return spec_; }

  Batch forward(const Batch& x_masked, std::span<const MaskSpec> masks, Tape* tape = nullptr) const;
  /// d_out is dL/d(recovered batch); only parameter gradients are produced.
  void backward(const Tape& tape, const Matrix& d_out);

  std::string kind() const override { return "recovery"; }
  nlohmann::json spec_json() const override { return spec_.to_json(); }
  std::vector<ParamRef> parameters() override;
  std::vector<NamedTensor> state() override;

 private:
  RecoverySpec spec_;
  std::vector<Lstm> lstm_;
  Linear readout_;
};

// ---------------------------------------------------------------------------
// Optimizers

struct OptimizerConfig {
  enum class Kind { sgd, adam };
  Kind kind = Kind::adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  /// Step decay: lr *= decay_gamma every decay_every steps (0 disables).
  int decay_every = 0;
  double decay_gamma = 1.0;
};

class Optimizer {
 public:
  Optimizer(std::vector<ParamRef> params, OptimizerConfig config);

  /// Applies one update from the accumulated gradients.  `loss_term` names
  /// the objective whose gradients are being applied, for diagnostics.
  void step(const std::string& loss_term);
  void zero_grad();
  double current_learning_rate() const;
  long steps() const { return steps_; }

 private:
  std::vector<ParamRef> params_;
  OptimizerConfig config_;
  std::vector<Matrix> m_, v_;
  long steps_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoints: "TSCK1\n", u64 header size, JSON header with network kinds,
// specs and tensor shapes, then float64 little-endian tensor payload.

void save_checkpoint(const std::filesystem::path& path, std::span<Network* const> nets);

struct LoadedCheckpoint {
  std::vector<std::unique_ptr<Network>> networks;

  template <class T>
  T& get(std::size_t i) {
    auto* p = dynamic_cast<T*>(networks.at(i).get());
    if (!p) throw FormatError("checkpoint entry has unexpected kind");
    return *p;
  }
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace temsr
