#pragma once

// Complete / early / late / recovered-parts views of a recovered sample.

#include <array>
#include <string_view>
#include <vector>

#include "temsr/core.hpp"
#include "temsr/datagen.hpp"

namespace temsr {

enum class SegmentKind { complete = 0, early = 1, late = 2, recovered = 3 };

inline constexpr std::array<SegmentKind, 4> kSegmentKinds{
    SegmentKind::complete, SegmentKind::early, SegmentKind::late, SegmentKind::recovered};

std::string_view to_string(SegmentKind k);

/// Half-open column range [begin, end) of one segment instance.
struct SegmentRange {
  SegmentKind kind;
  int begin;
  int end;
  int length() const { return end - begin; }
};

struct SegmentSet {
  Matrix complete;
  Matrix early;
  Matrix late;
  /// One entry per masked block; a single-block mask yields one entry.
  std::vector<Matrix> recovered;
  std::vector<SegmentRange> ranges;
};

/// floor(p_s * L), guarded against representation error (4/6 * 6 == 4).
int segment_length(int length, double p_s);

/// Column ranges of every segment instance, in kind order C, E, L, R...
std::vector<SegmentRange> segment_ranges(int length, const MaskSpec& mask, double p_s);

SegmentSet extract_segments(const Matrix& x_sl, const MaskSpec& mask, double p_s);

}  // namespace temsr
