#pragma once

// Multi-scale deformable cross-modal interaction.
//
// Maps inside the differentiable path are flattened (H*W) x 1 columns in
// row-major spatial order; to_map/from_map convert at the boundary.

#include "filo/autodiff.hpp"
#include "filo/config.hpp"
#include "filo/encoders.hpp"
#include "filo/types.hpp"

#include <string>
#include <utility>
#include <vector>

namespace filo {

struct KernelShape {
  int height = 1;
  int width = 1;
};

KernelShape parse_kernel_shape(const std::string& text);  // "5x1" -> 5 rows, 1 column
std::vector<ad::Tap> base_offsets(KernelShape shape);      // row-major, centered

struct DeformableKernelSpec {
  std::string kernel_id;
  std::vector<ad::Tap> taps;
  ad::Var proj;         // C x C, identity at init
  ad::Var tap_weights;  // 1 x K, 1/K at init
  ad::Var offset_w;     // 9C x 2K over the 3x3 neighborhood, zero at init
  ad::Var offset_b;     // 1 x 2K, zero at init

  static DeformableKernelSpec create(const std::string& shape, int channels);
  int tap_count() const { return static_cast<int>(taps.size()); }
  std::vector<ad::Var*> parameters() { return {&proj, &tap_weights, &offset_w, &offset_b}; }
};

ad::Var predict_offsets(const ad::Var& grid, const DeformableKernelSpec& spec, int height, int width);
ad::Var deformable_aggregate(const ad::Var& grid, const DeformableKernelSpec& spec, int height,
                             int width);

// Dense bilinear resampling operator (out_h*out_w) x (in_h*in_w), half-pixel centers.
Mat upsample_matrix(int in_h, int in_w, int out_h, int out_w);

struct StageMaps {
  ad::Var normal;   // (H*W) x 1, target resolution
  ad::Var anomaly;
};

StageMaps stage_interaction(const ad::Var& grid, int height, int width, const ad::Var& t_normal,
                            const ad::Var& t_abnormal, std::span<const DeformableKernelSpec> kernels,
                            int target_h, int target_w, double logit_scale = 1.0);

// Rigid 1x1 interaction on already aligned features (no projection).
StageMaps pointwise_interaction(const ad::Var& features, int height, int width,
                                const ad::Var& t_normal, const ad::Var& t_abnormal, int target_h,
                                int target_w, double logit_scale = 1.0);

std::pair<ad::Var, ad::Var> aggregate_stages(std::span<const StageMaps> stages);

AnomalyMap normalize_map(const AnomalyMap& map);  // min-max, constant -> zeros
AnomalyMap vl_map(const AnomalyMap& m_normal, const AnomalyMap& m_anomaly);
AnomalyMap to_map(const Mat& column, int height, int width);
Mat from_map(const AnomalyMap& map);
AnomalyMap upsample(const AnomalyMap& map, int out_h, int out_w);

// Per-stage linear layer mapping qkv-path features into the joint space.
struct StageAligner {
  ad::Var weight;  // C x C, identity at init
  ad::Var bias;    // 1 x C
};

class MdciModule {
 public:
  MdciModule(const MdciConfig& config, int channels, int stage_count);

  // Aggregated (M_n, M_a) at the image resolution of the pyramid.
  std::pair<ad::Var, ad::Var> forward(const FeaturePyramid& pyramid, const ad::Var& t_normal,
                                      const ad::Var& t_abnormal) const;
  std::pair<ad::Var, ad::Var> forward(const FeaturePyramid& pyramid, const Vec& t_normal,
                                      const Vec& t_abnormal) const;

  std::vector<ad::Var*> parameters();
  std::vector<std::pair<std::string, ad::Var*>> named_parameters();

  // Copy restricted to the listed kernel ids; ids without trained weights start rigid.
  MdciModule with_kernels(const std::vector<std::string>& ids) const;

  std::vector<DeformableKernelSpec>& kernels() { return kernels_; }
  const std::vector<DeformableKernelSpec>& kernels() const { return kernels_; }
  std::vector<StageAligner>& aligners() { return aligners_; }
  const MdciConfig& config() const { return config_; }

 private:
  MdciConfig config_;
  std::vector<DeformableKernelSpec> kernels_;
  std::vector<StageAligner> aligners_;
};

}  // namespace filo
