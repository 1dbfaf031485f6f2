#pragma once

// Memory-bank patch matching for the few-shot branch and final map fusion.

#include "filo/encoders.hpp"
#include "filo/grounding.hpp"
#include "filo/tensor_io.hpp"
#include "filo/types.hpp"

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace filo {

enum class FeaturePath { kVv, kQkv };
FeaturePath feature_path_from_string(const std::string& s);

struct MemoryBank {
  std::string class_name;
  int shot_count = 0;
  std::vector<Mat> stages;  // N_i x C, unit rows; shot-major then row-major spatial
};

MemoryBank build_memory(std::span<const FeaturePyramid> references, const std::string& class_name,
                        FeaturePath path = FeaturePath::kVv);

// min over bank rows of (1 - cos), clamped to [0, 2].
AnomalyMap match_stage(const PatchGrid& grid, const Mat& bank_stage);

// Per-stage score grids at image resolution.
std::vector<AnomalyMap> stage_scores(const FeaturePyramid& pyramid, const MemoryBank& bank,
                                     FeaturePath path = FeaturePath::kVv);

// Norm(sum of stages), then suppression outside the boxes.
AnomalyMap fewshot_map(std::span<const AnomalyMap> upsampled_scores, const BoundingBoxSet& boxes,
                       double lambda);

// Truncated at ceil(3 sigma), renormalized to unit sum.
std::vector<double> gaussian_kernel(double sigma);
// Separable smoothing with half-sample reflection at the borders; sigma < 0.01 is a no-op.
AnomalyMap gaussian_smooth(const AnomalyMap& map, double sigma);

AnomalyMap fuse_final(const AnomalyMap& m_vl, const std::optional<AnomalyMap>& m_few, double sigma);

void add_memory_bank(TensorContainer& container, const MemoryBank& bank);
MemoryBank get_memory_bank(const TensorContainer& container, const std::string& class_name, int shots);
void save_memory_bank(const MemoryBank& bank, const std::filesystem::path& path);
MemoryBank load_memory_bank(const std::filesystem::path& path, const std::string& class_name, int shots);

}  // namespace filo
