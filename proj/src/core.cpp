#include "temsr/core.hpp"

#include <cstring>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace temsr {

namespace {

// Training allocates and frees many multi-megabyte temporaries per step.
// Keeping them on the heap instead of fresh mmap()s avoids page-fault churn.
[[maybe_unused]] const bool kAllocatorTuned = [] {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
  return true;
}();

}  // namespace

Batch stack(std::span<const Matrix> samples) {
  if (samples.empty()) return Batch();
  const int n = static_cast<int>(samples.front().rows());
  const int l = static_cast<int>(samples.front().cols());
  Batch out(static_cast<int>(samples.size()), n, l);
  for (std::size_t b = 0; b < samples.size(); ++b) {
    if (samples[b].rows() != n || samples[b].cols() != l)
      throw ShapeError("stack: samples differ in shape");
    out.sample(static_cast<int>(b)) = samples[b];
  }
  return out;
}

Batch gather(const Batch& batch, std::span<const int> indices) {
  Batch out(static_cast<int>(indices.size()), batch.channels(), batch.length());
  for (std::size_t j = 0; j < indices.size(); ++j) {
    const int i = indices[j];
    if (i < 0 || i >= batch.count()) throw ShapeError("gather: index out of range");
    out.sample(static_cast<int>(j)) = batch.sample(i);
  }
  return out;
}

std::uint64_t hash_matrices(std::span<const Matrix* const> mats) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  for (const Matrix* m : mats) {
    const std::int64_t shape[2] = {m->rows(), m->cols()};
    mix(shape, sizeof(shape));
    mix(m->data(), static_cast<std::size_t>(m->size()) * sizeof(double));
  }
  return h;
}

}  // namespace temsr
