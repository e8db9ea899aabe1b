#pragma once

// Datasets, synthetic domain pairs, on-disk ingestion, min-max scaling and
// time-point masking.

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "temsr/core.hpp"
#include "temsr/rng.hpp"

namespace temsr {

enum class Split { train, test };

std::string to_string(Split s);

struct TimeSeriesSample {
  Matrix values;  // N channels x L time points
  std::optional<int> label;
};

/// Immutable collection of equal-shape samples from one domain.
class Dataset {
 public:
  Dataset() = default;
  Dataset(std::vector<TimeSeriesSample> samples, std::string domain_id, int class_count,
          Split split = Split::train);

  int size() const { return static_cast<int>(samples_.size()); }
  int channels() const { return channels_; }
  int length() const { return length_; }
  int class_count() const { return class_count_; }
  bool has_labels() const { return has_labels_; }
  const std::string& domain_id() const { return domain_id_; }
  Split split() const { return split_; }

  const std::vector<TimeSeriesSample>& samples() const { return samples_; }
  const TimeSeriesSample& operator[](int i) const { return samples_.at(static_cast<std::size_t>(i)); }

  Batch to_batch() const;
  Batch to_batch(std::span<const int> indices) const;
  /// Labels in sample order; throws StateError when the split is unlabeled.
  std::vector<int> labels() const;

  bool operator==(const Dataset& o) const;

 private:
  std::vector<TimeSeriesSample> samples_;
  std::string domain_id_;
  int class_count_ = 0;
  Split split_ = Split::train;
  int channels_ = 0;
  int length_ = 0;
  bool has_labels_ = false;
};

// ---------------------------------------------------------------------------
// Synthetic domain pairs

/// Target-only distortion.  Identity: scale 1, warp 1, offset 0, noise 1.
struct DomainShift {
  double amplitude_scale = 1.0;
  double time_warp = 1.0;       // multiplies every motif frequency
  double channel_offset = 0.0;  // added to channel c as offset * (c + 1) / N
  double noise_scale = 1.0;     // multiplies the noise standard deviation

  static DomainShift identity() { return {}; }
  bool is_identity() const {
    return amplitude_scale == 1.0 && time_warp == 1.0 && channel_offset == 0.0 &&
           noise_scale == 1.0;
  }
};

/// Class-conditional sinusoid-plus-AR(1) family.  Class k oscillates at
/// base_frequency + k * frequency_step cycles per window, with a second
/// harmonic whose weight and channel phase pattern also depend on k.
struct SyntheticSpec {
  int classes = 4;
  int channels = 3;
  int length = 128;
  int train_per_class = 64;
  int test_per_class = 32;
  double base_frequency = 2.0;
  double frequency_step = 1.5;
  double noise_std = 0.3;
  double ar_coefficient = 0.5;
  DomainShift shift{0.6, 1.3, 1.0, 1.0};

  void validate() const;
};

struct DomainPair {
  Dataset source;
  Dataset target;
};

/// Deterministic in (spec, seed, split).  Source and target are independent
/// draws; only the target passes through `spec.shift`.
DomainPair generate_domain_pair(const SyntheticSpec& spec, std::uint64_t seed,
                                Split split = Split::train);

// ---------------------------------------------------------------------------
// Binary dataset files: "TSDS1", u32 count, N, L, C, u8 has_labels,
// float32 payload (sample, channel, time), optional int32 labels.

void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path, Split split = Split::train);

// ---------------------------------------------------------------------------
// Min-max scaling

struct MinMaxStats {
  Vector min;  // per channel
  Vector max;
};

MinMaxStats fit_min_max(const Dataset& train);
Dataset apply_min_max(const Dataset& ds, const MinMaxStats& stats);
/// Scales with statistics of `ds` itself; constant channels map to 0.
Dataset min_max_normalize(const Dataset& ds);

// ---------------------------------------------------------------------------
// Masking

/// Per-time-point mask shared by every channel.
struct MaskSpec {
  std::vector<unsigned char> masked;
  double ratio = 0.0;

  int length() const { return static_cast<int>(masked.size()); }
  int count() const;
  bool any() const { return count() > 0; }
  bool is_masked(int t) const { return masked[static_cast<std::size_t>(t)] != 0; }
  /// Maximal contiguous runs of masked points as [begin, end) pairs.
  std::vector<std::pair<int, int>> blocks() const;

  static MaskSpec none(int length) { return {std::vector<unsigned char>(length, 0), 0.0}; }
  static MaskSpec from_range(int length, int begin, int end);
};

/// round(p * L) with ties rounded up.
int masked_point_count(int length, double ratio);

MaskSpec make_mask(int length, double ratio, int n_blocks, Rng& rng);

/// Zero the masked time points on every channel.
Matrix apply_mask(const Matrix& sample, const MaskSpec& mask);
Batch apply_masks(const Batch& batch, std::span<const MaskSpec> masks);

}  // namespace temsr
