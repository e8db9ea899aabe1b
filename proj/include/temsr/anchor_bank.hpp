#pragma once

#include <filesystem>
#include <map>
#include <vector>

#include "temsr/core.hpp"

namespace temsr {

/// Store of the latest recovery of every target sample with its entropy
/// under the frozen source model.  The lowest-entropy fraction is averaged
/// into the representative anchor.
class AnchorBank {
 public:
  struct Entry {
    Matrix sample;
    double entropy = 0.0;
  };

  explicit AnchorBank(int capacity) : capacity_(capacity) {}

  int capacity() const { return capacity_; }
  int size() const { return static_cast<int>(entries_.size()); }
  bool empty() const { return entries_.empty(); }
  const std::map<int, Entry>& entries() const { return entries_; }

  /// Latest recovery wins.  Rejects non-finite or negative entropy without
  /// modifying the bank.
  void update(int sample_id, const Matrix& x_sl, double entropy);

  /// max(1, floor(ratio * size)).
  int topk_count(double anchor_ratio) const;
  /// Ids of the k lowest-entropy entries; ties go to the smaller id.
  std::vector<int> select_topk(double anchor_ratio) const;
  /// Element-wise mean of the selected samples.
  Matrix representative_anchor(double anchor_ratio) const;

  /// Writes `<path>` (dataset format, unlabeled) and `<path>.entropy`
  /// (u32 id, f32 entropy records).
  void save_snapshot(const std::filesystem::path& path) const;
  static AnchorBank load_snapshot(const std::filesystem::path& path, int capacity);

 private:
  int capacity_;
  std::map<int, Entry> entries_;
};

}  // namespace temsr
