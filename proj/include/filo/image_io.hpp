#pragma once

// Binary PPM (P6) / PGM (P5) reading and writing, 8-bit only.

#include "filo/types.hpp"

#include <filesystem>

namespace filo {

Image read_ppm(const std::filesystem::path& path);
void write_ppm(const Image& image, const std::filesystem::path& path);

GroundTruthMask read_pgm_mask(const std::filesystem::path& path);  // nonzero -> positive
void write_pgm_mask(const GroundTruthMask& mask, const std::filesystem::path& path);

// Map values clamped to [0,1] and rendered through a fixed blue-to-red colormap.
Image colorize(const AnomalyMap& map);
void write_heatmap(const AnomalyMap& map, const std::filesystem::path& path);

}  // namespace filo
