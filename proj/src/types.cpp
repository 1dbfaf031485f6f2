#include "filo/types.hpp"

#include "filo/error.hpp"

#include <cstring>

namespace filo {

const char* error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInput: return "input";
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kFormat: return "format";
    case ErrorKind::kMetric: return "metric";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kTraining: return "training";
  }
  return "unknown";
}

size_t GroundTruthMask::positives() const {
  size_t n = 0;
  for (auto b : bits) n += b != 0;
  return n;
}

AnomalyMap GroundTruthMask::as_map() const {
  AnomalyMap m(height, width);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) m(y, x) = at(y, x) ? 1.0 : 0.0;
  }
  return m;
}

std::uint64_t hash_image(const Image& image) {
  // FNV-1a over dimensions and raw float bits.
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* data, size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  };
  mix(&image.height, sizeof(image.height));
  mix(&image.width, sizeof(image.width));
  mix(image.pixels.data(), image.pixels.size() * sizeof(float));
  return h;
}

}  // namespace filo
