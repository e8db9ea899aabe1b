#include "temsr/datagen.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

namespace temsr {

std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

Dataset::Dataset(std::vector<TimeSeriesSample> samples, std::string domain_id, int class_count,
                 Split split)
    : samples_(std::move(samples)), domain_id_(std::move(domain_id)), class_count_(class_count),
      split_(split) {
  if (class_count_ < 1) throw ConfigError("Dataset: class_count must be >= 1");
  if (samples_.empty()) return;
  channels_ = static_cast<int>(samples_.front().values.rows());
  length_ = static_cast<int>(samples_.front().values.cols());
  if (channels_ < 1 || length_ < 8) throw ShapeError("Dataset: requires N >= 1 and L >= 8");
  has_labels_ = samples_.front().label.has_value();
  for (const auto& s : samples_) {
    if (s.values.rows() != channels_ || s.values.cols() != length_)
      throw ShapeError("Dataset: samples differ in shape");
    if (!s.values.allFinite()) throw DataError("Dataset: non-finite value");
    if (s.label.has_value() != has_labels_)
      throw DataError("Dataset: labels must be present on all samples or none");
    if (s.label && (*s.label < 0 || *s.label >= class_count_))
      throw DataError("Dataset: label outside [0, C)");
  }
}

Batch Dataset::to_batch() const {
  Batch out(size(), channels_, length_);
  for (int i = 0; i < size(); ++i) out.sample(i) = samples_[static_cast<std::size_t>(i)].values;
  return out;
}

Batch Dataset::to_batch(std::span<const int> indices) const {
  Batch out(static_cast<int>(indices.size()), channels_, length_);
  for (std::size_t j = 0; j < indices.size(); ++j)
    out.sample(static_cast<int>(j)) = (*this)[indices[j]].values;
  return out;
}

std::vector<int> Dataset::labels() const {
  if (!has_labels_) throw StateError("Dataset '" + domain_id_ + "' has no labels");
  std::vector<int> y;
  y.reserve(samples_.size());
  for (const auto& s : samples_) y.push_back(*s.label);
  return y;
}

bool Dataset::operator==(const Dataset& o) const {
  if (size() != o.size() || class_count_ != o.class_count_ || has_labels_ != o.has_labels_)
    return false;
  for (int i = 0; i < size(); ++i) {
    const auto& a = samples_[static_cast<std::size_t>(i)];
    const auto& b = o.samples_[static_cast<std::size_t>(i)];
    if (a.label != b.label || a.values.rows() != b.values.rows() ||
        a.values.cols() != b.values.cols() || a.values != b.values)
      return false;
  }
  return true;
}

// ---------------------------------------------------------------------------

void SyntheticSpec::validate() const {
  if (classes < 2) throw ConfigError("SyntheticSpec: need at least 2 classes");
  if (length < 8) throw ConfigError("SyntheticSpec: length must be >= 8");
  if (channels < 1) throw ConfigError("SyntheticSpec: channels must be >= 1");
  if (train_per_class < 1 || test_per_class < 1)
    throw ConfigError("SyntheticSpec: per-class counts must be >= 1");
  if (noise_std < 0 || std::abs(ar_coefficient) >= 1.0)
    throw ConfigError("SyntheticSpec: noise_std >= 0 and |ar_coefficient| < 1 required");
  if (shift.amplitude_scale <= 0 || shift.time_warp <= 0 || shift.noise_scale < 0)
    throw ConfigError("SyntheticSpec: invalid shift descriptor");
}

namespace {

Matrix draw_sample(const SyntheticSpec& spec, int k, const DomainShift& shift, Rng& rng) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  std::uniform_real_distribution<double> phase_dist(0.0, two_pi);
  std::uniform_real_distribution<double> amp_dist(0.8, 1.2);
  std::normal_distribution<double> noise(0.0, 1.0);

  const int n = spec.channels;
  const int l = spec.length;
  const double freq = (spec.base_frequency + k * spec.frequency_step) * shift.time_warp;
  const double harmonic = 0.25 + 0.5 * k / static_cast<double>(spec.classes - 1);
  const double phase = phase_dist(rng);
  const double amp = amp_dist(rng);
  const double innov = std::sqrt(1.0 - spec.ar_coefficient * spec.ar_coefficient) *
                       spec.noise_std * shift.noise_scale;

  Matrix x(n, l);
  for (int c = 0; c < n; ++c) {
    const double channel_phase = c * std::numbers::pi * (k + 1) / (spec.classes + 1.0);
    const double offset = shift.channel_offset * (c + 1) / static_cast<double>(n);
    double e = 0.0;
    for (int t = 0; t < l; ++t) {
      const double u = two_pi * freq * t / l;
      const double clean = std::sin(u + phase + channel_phase) +
                           harmonic * std::sin(2.0 * u + 2.0 * phase + c);
      e = spec.ar_coefficient * e + innov * noise(rng);
      x(c, t) = shift.amplitude_scale * amp * clean + e + offset;
    }
  }
  return x;
}

Dataset draw_domain(const SyntheticSpec& spec, const DomainShift& shift, Rng& rng,
                    const std::string& id, Split split) {
  const int per_class = split == Split::train ? spec.train_per_class : spec.test_per_class;
  std::vector<TimeSeriesSample> samples;
  samples.reserve(static_cast<std::size_t>(per_class * spec.classes));
  // Interleave classes so any prefix of the dataset is roughly balanced.
  for (int i = 0; i < per_class; ++i)
    for (int k = 0; k < spec.classes; ++k)
      samples.push_back({draw_sample(spec, k, shift, rng), k});
  return Dataset(std::move(samples), id, spec.classes, split);
}

}  // namespace

DomainPair generate_domain_pair(const SyntheticSpec& spec, std::uint64_t seed, Split split) {
  spec.validate();
  const std::uint64_t split_id = split == Split::train ? 0 : 1;
  Rng src_rng = make_rng(seed, {0x5eed0001ULL, split_id});
  Rng trg_rng = make_rng(seed, {0x5eed0002ULL, split_id});
  return {draw_domain(spec, DomainShift::identity(), src_rng, "synthetic-source", split),
          draw_domain(spec, spec.shift, trg_rng, "synthetic-target", split)};
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[5] = {'T', 'S', 'D', 'S', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("dataset file truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + path.string() + "' for writing");
  os.write(kMagic, 5);
  put_u32(os, static_cast<std::uint32_t>(ds.size()));
  put_u32(os, static_cast<std::uint32_t>(ds.channels()));
  put_u32(os, static_cast<std::uint32_t>(ds.length()));
  put_u32(os, static_cast<std::uint32_t>(ds.class_count()));
  const char has_labels = ds.has_labels() ? 1 : 0;
  os.write(&has_labels, 1);
  for (const auto& s : ds.samples())
    for (int c = 0; c < ds.channels(); ++c)
      for (int t = 0; t < ds.length(); ++t)
        put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(s.values(c, t))));
  if (ds.has_labels())
    for (const auto& s : ds.samples())
      put_u32(os, static_cast<std::uint32_t>(static_cast<std::int32_t>(*s.label)));
  if (!os) throw FormatError("write failed for '" + path.string() + "'");
}

Dataset load_dataset(const std::filesystem::path& path, Split split) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open '" + path.string() + "'");
  char magic[5];
  if (!is.read(magic, 5) || std::memcmp(magic, kMagic, 5) != 0)
    throw FormatError("bad magic in '" + path.string() + "'");
  const std::uint32_t count = get_u32(is);
  const std::uint32_t n = get_u32(is);
  const std::uint32_t l = get_u32(is);
  const std::uint32_t c = get_u32(is);
  char has_labels = 0;
  if (!is.read(&has_labels, 1)) throw FormatError("dataset header truncated");
  if (has_labels != 0 && has_labels != 1) throw FormatError("has_labels flag must be 0 or 1");
  if (n < 1 || l < 8 || c < 1) throw FormatError("dataset header declares invalid shape");

  std::vector<TimeSeriesSample> samples(count);
  for (auto& s : samples) {
    s.values.resize(n, l);
    for (std::uint32_t ch = 0; ch < n; ++ch)
      for (std::uint32_t t = 0; t < l; ++t) {
        const float v = std::bit_cast<float>(get_u32(is));
        if (!std::isfinite(v)) throw DataError("non-finite value in '" + path.string() + "'");
        s.values(ch, t) = v;
      }
  }
  if (has_labels)
    for (auto& s : samples) {
      const auto y = static_cast<std::int32_t>(get_u32(is));
      if (y < 0 || static_cast<std::uint32_t>(y) >= c) throw FormatError("label outside [0, C)");
      s.label = y;
    }
  if (is.peek() != std::char_traits<char>::eof())
    throw FormatError("trailing bytes after payload in '" + path.string() + "'");
  return Dataset(std::move(samples), path.stem().string(), static_cast<int>(c), split);
}

// ---------------------------------------------------------------------------

MinMaxStats fit_min_max(const Dataset& train) {
  if (train.size() == 0) throw DataError("fit_min_max: empty dataset");
  MinMaxStats st{Vector::Constant(train.channels(), std::numeric_limits<double>::infinity()),
                 Vector::Constant(train.channels(), -std::numeric_limits<double>::infinity())};
  for (const auto& s : train.samples()) {
    st.min = st.min.cwiseMin(s.values.rowwise().minCoeff());
    st.max = st.max.cwiseMax(s.values.rowwise().maxCoeff());
  }
  return st;
}

Dataset apply_min_max(const Dataset& ds, const MinMaxStats& stats) {
  if (stats.min.size() != ds.channels()) throw ShapeError("apply_min_max: channel mismatch");
  std::vector<TimeSeriesSample> out = ds.samples();
  for (auto& s : out)
    for (int c = 0; c < ds.channels(); ++c) {
      const double range = stats.max(c) - stats.min(c);
      if (range > 0)
        s.values.row(c) = (s.values.row(c).array() - stats.min(c)) / range;
      else
        s.values.row(c).setZero();
    }
  return Dataset(std::move(out), ds.domain_id(), ds.class_count(), ds.split());
}

Dataset min_max_normalize(const Dataset& ds) { return apply_min_max(ds, fit_min_max(ds)); }

// ---------------------------------------------------------------------------

int MaskSpec::count() const {
  return static_cast<int>(std::count(masked.begin(), masked.end(), 1));
}

std::vector<std::pair<int, int>> MaskSpec::blocks() const {
  std::vector<std::pair<int, int>> out;
  const int l = length();
  for (int t = 0; t < l;) {
    if (!is_masked(t)) {
      ++t;
      continue;
    }
    int e = t;
    while (e < l && is_masked(e)) ++e;
    out.emplace_back(t, e);
    t = e;
  }
  return out;
}

MaskSpec MaskSpec::from_range(int length, int begin, int end) {
  if (begin < 0 || end > length || begin > end) throw ConfigError("MaskSpec: invalid range");
  MaskSpec m = none(length);
  for (int t = begin; t < end; ++t) m.masked[static_cast<std::size_t>(t)] = 1;
  m.ratio = static_cast<double>(end - begin) / length;
  return m;
}

int masked_point_count(int length, double ratio) {
  return static_cast<int>(std::floor(ratio * length + 0.5));
}

namespace {

// Uniformly random composition of `total` into `parts` nonnegative integers.
std::vector<int> random_composition(int total, int parts, Rng& rng) {
  // Stars and bars: choose parts-1 bar positions among total+parts-1 slots.
  std::vector<int> slots(static_cast<std::size_t>(total + parts - 1));
  for (std::size_t i = 0; i < slots.size(); ++i) slots[i] = static_cast<int>(i);
  std::vector<int> bars;
  std::sample(slots.begin(), slots.end(), std::back_inserter(bars), parts - 1, rng);
  std::vector<int> out;
  int prev = -1;
  for (int b : bars) {
    out.push_back(b - prev - 1);
    prev = b;
  }
  out.push_back(static_cast<int>(slots.size()) - prev - 1);
  return out;
}

}  // namespace

MaskSpec make_mask(int length, double ratio, int n_blocks, Rng& rng) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("make_mask: ratio must lie in (0, 1)");
  const int m = masked_point_count(length, ratio);
  if (m >= length) throw ConfigError("make_mask: masking ratio leaves no unmasked context");
  if (n_blocks < 1 || n_blocks > m)
    throw ConfigError("make_mask: n_blocks must lie in [1, round(ratio * L)]");
  const int free_points = length - m - (n_blocks - 1);
  if (free_points < 0) throw ConfigError("make_mask: too many blocks for the unmasked budget");

  // Block sizes: composition of m into n_blocks positive parts.
  std::vector<int> sizes = random_composition(m - n_blocks, n_blocks, rng);
  for (int& s : sizes) s += 1;
  // Gaps: n_blocks + 1 gaps, interior ones at least 1 so blocks stay disjoint.
  std::vector<int> gaps = random_composition(free_points, n_blocks + 1, rng);
  for (int i = 1; i < n_blocks; ++i) gaps[static_cast<std::size_t>(i)] += 1;

  MaskSpec mask = MaskSpec::none(length);
  mask.ratio = ratio;
  int t = 0;
  for (int b = 0; b < n_blocks; ++b) {
    t += gaps[static_cast<std::size_t>(b)];
    for (int j = 0; j < sizes[static_cast<std::size_t>(b)]; ++j)
      mask.masked[static_cast<std::size_t>(t++)] = 1;
  }
  return mask;
}

Matrix apply_mask(const Matrix& sample, const MaskSpec& mask) {
  if (mask.length() != sample.cols())
    throw ShapeError("apply_mask: mask length differs from sample length");
  Matrix out = sample;
  for (int t = 0; t < mask.length(); ++t)
    if (mask.is_masked(t)) out.col(t).setZero();
  return out;
}

Batch apply_masks(const Batch& batch, std::span<const MaskSpec> masks) {
  if (static_cast<int>(masks.size()) != batch.count())
    throw ShapeError("apply_masks: one mask per sample required");
  Batch out = batch;
  for (int b = 0; b < batch.count(); ++b) {
    const MaskSpec& m = masks[static_cast<std::size_t>(b)];
    if (m.length() != batch.length())
      throw ShapeError("apply_masks: mask length differs from sample length");
    auto s = out.sample(b);
    for (int t = 0; t < m.length(); ++t)
      if (m.is_masked(t)) s.col(t).setZero();
  }
  return out;
}

}  // namespace temsr
