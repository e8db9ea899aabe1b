#include "temsr/anchor_bank.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>

#include "temsr/datagen.hpp"

namespace temsr {

void AnchorBank::update(int sample_id, const Matrix& x_sl, double entropy) {
  if (!std::isfinite(entropy) || entropy < 0.0)
    throw TrainingError("anchor bank: entropy for sample " + std::to_string(sample_id) +
                        " is not a finite nonnegative value");
  if (sample_id < 0 || sample_id >= capacity_)
    throw StateError("anchor bank: sample id outside [0, capacity)");
  if (!entries_.empty()) {
    const Matrix& ref = entries_.begin()->second.sample;
    if (ref.rows() != x_sl.rows() || ref.cols() != x_sl.cols())
      throw ShapeError("anchor bank: sample shape differs from stored entries");
  }
  entries_[sample_id] = Entry{x_sl, entropy};
}

int AnchorBank::topk_count(double anchor_ratio) const {
  if (!(anchor_ratio > 0.0 && anchor_ratio <= 1.0))
    throw ConfigError("anchor bank: ratio must lie in (0, 1]");
  return std::max(1, static_cast<int>(std::floor(anchor_ratio * size() + 1e-9)));
}

std::vector<int> AnchorBank::select_topk(double anchor_ratio) const {
  if (entries_.empty()) throw StateError("anchor bank is empty");
  const int k = topk_count(anchor_ratio);
  std::vector<std::pair<double, int>> order;
  order.reserve(entries_.size());
  for (const auto& [id, e] : entries_) order.emplace_back(e.entropy, id);
  std::partial_sort(order.begin(), order.begin() + k, order.end());
  std::vector<int> ids;
  for (int i = 0; i < k; ++i) ids.push_back(order[static_cast<std::size_t>(i)].second);
  return ids;
}

Matrix AnchorBank::representative_anchor(double anchor_ratio) const {
  const auto ids = select_topk(anchor_ratio);
  Matrix sum = Matrix::Zero(entries_.at(ids.front()).sample.rows(),
                            entries_.at(ids.front()).sample.cols());
  for (int id : ids) sum += entries_.at(id).sample;
  return sum / static_cast<double>(ids.size());
}

void AnchorBank::save_snapshot(const std::filesystem::path& path) const {
  std::vector<TimeSeriesSample> samples;
  for (const auto& [id, e] : entries_) samples.push_back({e.sample, std::nullopt});
  save_dataset(Dataset(std::move(samples), "anchor-bank", 1), path);

  std::ofstream os(path.string() + ".entropy", std::ios::binary);
  if (!os) throw FormatError("cannot write anchor-bank entropy table");
  auto put = [&os](std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
  };
  for (const auto& [id, e] : entries_) {
    put(static_cast<std::uint32_t>(id));
    put(std::bit_cast<std::uint32_t>(static_cast<float>(e.entropy)));
  }
}

AnchorBank AnchorBank::load_snapshot(const std::filesystem::path& path, int capacity) {
  AnchorBank bank(capacity);
  if (std::filesystem::file_size(path.string() + ".entropy") == 0) return bank;
  const Dataset ds = load_dataset(path);
  std::ifstream is(path.string() + ".entropy", std::ios::binary);
  auto get = [&is]() {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("entropy table truncated");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  };
  for (int i = 0; i < ds.size(); ++i) {
    const int id = static_cast<int>(get());
    const double h = std::bit_cast<float>(get());
    bank.update(id, ds[i].values, h);
  }
  return bank;
}

}  // namespace temsr
