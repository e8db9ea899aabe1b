#pragma once

// Shared numeric types, error hierarchy and the batch layout used by every
// module.  All computation is double precision so that the same code path
// serves training and finite-difference gradient checks.

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace temsr {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using IndexVector = std::vector<int>;

// Error kinds.  Each maps onto one failure class named by the module
// contracts so callers can branch on the type instead of parsing messages.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct FormatError : Error {
  using Error::Error;
};
struct DataError : Error {
  using Error::Error;
};
struct DomainError : Error {
  using Error::Error;
};
struct StateError : Error {
  using Error::Error;
};
struct TrainingError : Error {
  using Error::Error;
};
struct UsageError : Error {
  using Error::Error;
};

/// A batch of equal-shape multichannel sequences.
///
/// Storage is channels x (count * length), sample-major along columns:
/// sample b occupies columns [b * length, (b + 1) * length).  A single
/// sample is a batch of count 1, so `values()` of a TimeSeriesSample and a
/// one-element batch coincide.
class Batch {
 public:
  Batch() = default;
  Batch(int count, int channels, int length)
      : count_(count), channels_(channels), length_(length),
        data_(Matrix::Zero(channels, static_cast<Eigen::Index>(count) * length)) {}
  Batch(int count, int channels, int length, Matrix data)
      : count_(count), channels_(channels), length_(length), data_(std::move(data)) {
    if (data_.rows() != channels || data_.cols() != static_cast<Eigen::Index>(count) * length)
      throw ShapeError("Batch: data matrix does not match (count, channels, length)");
  }

  int count() const { return count_; }
  int channels() const { return channels_; }
  int length() const { return length_; }
  bool empty() const { return count_ == 0; }

  const Matrix& data() const { return data_; }
  Matrix& data() { return data_; }

  auto sample(int b) { return data_.middleCols(static_cast<Eigen::Index>(b) * length_, length_); }
  auto sample(int b) const {
    return data_.middleCols(static_cast<Eigen::Index>(b) * length_, length_);
  }

  bool operator==(const Batch& o) const {
    return count_ == o.count_ && channels_ == o.channels_ && length_ == o.length_ &&
           data_ == o.data_;
  }

 private:
  int count_ = 0;
  int channels_ = 0;
  int length_ = 0;
  Matrix data_;
};

/// Stack single N x L samples into a batch.
Batch stack(std::span<const Matrix> samples);

/// Gather selected samples of a batch.
Batch gather(const Batch& batch, std::span<const int> indices);

/// True when every entry is finite.
inline bool all_finite(const Matrix& m) { return m.allFinite(); }

/// FNV-1a over the raw bytes of a sequence of matrices.  Used to prove that
/// frozen parameters are untouched.
std::uint64_t hash_matrices(std::span<const Matrix* const> mats);

}  // namespace temsr
