#include "temsr/segments.hpp"

#include <cmath>

namespace temsr {

std::string_view to_string(SegmentKind k) {
  switch (k) {
    case SegmentKind::complete: return "C";
    case SegmentKind::early: return "E";
    case SegmentKind::late: return "L";
    case SegmentKind::recovered: return "R";
  }
  return "?";
}

int segment_length(int length, double p_s) {
  return static_cast<int>(std::floor(p_s * length + 1e-9));
}

std::vector<SegmentRange> segment_ranges(int length, const MaskSpec& mask, double p_s) {
  if (!(p_s > 0.0 && p_s <= 1.0)) throw ConfigError("extract_segments: p_s must lie in (0, 1]");
  if (mask.length() != length) throw ShapeError("extract_segments: mask length mismatch");
  const auto blocks = mask.blocks();
  if (blocks.empty()) throw ConfigError("extract_segments: segment R requires a nonempty mask");
  const int n = segment_length(length, p_s);
  if (n < 1) throw ConfigError("extract_segments: p_s * L rounds down to zero columns");

  std::vector<SegmentRange> out{{SegmentKind::complete, 0, length},
                                {SegmentKind::early, 0, n},
                                {SegmentKind::late, length - n, length}};
  for (const auto& [b, e] : blocks) out.push_back({SegmentKind::recovered, b, e});
  return out;
}

SegmentSet extract_segments(const Matrix& x_sl, const MaskSpec& mask, double p_s) {
  SegmentSet s;
  s.ranges = segment_ranges(static_cast<int>(x_sl.cols()), mask, p_s);
  for (const auto& r : s.ranges) {
    Matrix view = x_sl.middleCols(r.begin, r.length());
    switch (r.kind) {
      case SegmentKind::complete: s.complete = std::move(view); break;
      case SegmentKind::early: s.early = std::move(view); break;
      case SegmentKind::late: s.late = std::move(view); break;
      case SegmentKind::recovered: s.recovered.push_back(std::move(view)); break;
    }
  }
  return s;
}

}  // namespace temsr
