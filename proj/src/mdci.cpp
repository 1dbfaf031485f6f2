#include "filo/mdci.hpp"

#include "filo/error.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>

namespace filo {

KernelShape parse_kernel_shape(const std::string& text) {
  const auto x = text.find('x');
  if (x == std::string::npos) throw ConfigError("kernel shape '" + text + "' is not of the form AxB");
  KernelShape s;
  const char* b = text.data();
  auto r1 = std::from_chars(b, b + x, s.height);
  auto r2 = std::from_chars(b + x + 1, b + text.size(), s.width);
  if (r1.ec != std::errc() || r1.ptr != b + x || r2.ec != std::errc() || r2.ptr != b + text.size() ||
      s.height < 1 || s.width < 1) {
    throw ConfigError("kernel shape '" + text + "' is not of the form AxB");
  }
  return s;
}

std::vector<ad::Tap> base_offsets(KernelShape shape) {
  std::vector<ad::Tap> taps;
  const int oy = (shape.height - 1) / 2;
  const int ox = (shape.width - 1) / 2;
  for (int dy = 0; dy < shape.height; ++dy) {
    for (int dx = 0; dx < shape.width; ++dx) taps.push_back({dy - oy, dx - ox});
  }
  return taps;
}

DeformableKernelSpec DeformableKernelSpec::create(const std::string& shape, int channels) {
  DeformableKernelSpec k;
  k.kernel_id = shape;
  k.taps = base_offsets(parse_kernel_shape(shape));
  const int n = k.tap_count();
  k.proj = ad::leaf(Mat::Identity(channels, channels));
  k.tap_weights = ad::leaf(Mat::Constant(1, n, 1.0 / n));
  k.offset_w = ad::leaf(Mat::Zero(9 * channels, 2 * n));
  k.offset_b = ad::leaf(Mat::Zero(1, 2 * n));
  return k;
}

namespace {

const std::vector<ad::Tap>& neighborhood3x3() {
  static const std::vector<ad::Tap> taps = base_offsets({3, 3});
  return taps;
}

Mat resample_1d(int in, int out) {
  Mat m = Mat::Zero(out, in);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    const int i0 = std::min(static_cast<int>(std::floor(src)), in - 1);
    const int i1 = std::min(i0 + 1, in - 1);
    const double f = src - i0;
    m(o, i0) += 1.0 - f;
    m(o, i1) += f;
  }
  return m;
}

std::shared_ptr<const Mat> cached_upsample(int in_h, int in_w, int out_h, int out_w) {
  static std::mutex mu;
  static std::map<std::array<int, 4>, std::shared_ptr<const Mat>> cache;
  std::lock_guard lock(mu);
  auto& slot = cache[{in_h, in_w, out_h, out_w}];
  if (!slot) slot = std::make_shared<const Mat>(upsample_matrix(in_h, in_w, out_h, out_w));
  return slot;
}

ad::Var resize(const ad::Var& column, int h, int w, int target_h, int target_w) {
  if (h == target_h && w == target_w) return column;
  return ad::left_multiply(cached_upsample(h, w, target_h, target_w), column);
}

StageMaps finish(const ad::Var& probs, int h, int w, int target_h, int target_w) {
  StageMaps m;
  m.normal = resize(ad::minmax_normalize(ad::slice_cols(probs, 0, 1)), h, w, target_h, target_w);
  m.anomaly = resize(ad::minmax_normalize(ad::slice_cols(probs, 1, 1)), h, w, target_h, target_w);
  return m;
}

ad::Var text_matrix(const ad::Var& t_normal, const ad::Var& t_abnormal) {
  const ad::Var rows[] = {t_normal, t_abnormal};
  return ad::transpose(ad::concat_rows(rows));  // C x 2
}

}  // namespace

ad::Var predict_offsets(const ad::Var& grid, const DeformableKernelSpec& spec, int height, int width) {
  const auto& nb = neighborhood3x3();
  return ad::add_row(ad::matmul(ad::im2col(grid, height, width, nb), spec.offset_w), spec.offset_b);
}

ad::Var deformable_aggregate(const ad::Var& grid, const DeformableKernelSpec& spec, int height,
                             int width) {
  if (height < 1 || width < 1) throw InputError("degenerate patch grid");
  const ad::Var offsets = predict_offsets(grid, spec, height, width);
  const ad::Var sampled = ad::deform_sum(grid, offsets, spec.tap_weights, height, width, spec.taps);
  return ad::matmul(sampled, spec.proj);
}

Mat upsample_matrix(int in_h, int in_w, int out_h, int out_w) {
  const Mat uy = resample_1d(in_h, out_h);
  const Mat ux = resample_1d(in_w, out_w);
  Mat u = Mat::Zero(static_cast<Eigen::Index>(out_h) * out_w, static_cast<Eigen::Index>(in_h) * in_w);
  for (int oy = 0; oy < out_h; ++oy) {
    for (int iy = 0; iy < in_h; ++iy) {
      if (uy(oy, iy) == 0.0) continue;
      for (int ox = 0; ox < out_w; ++ox) {
        for (int ix = 0; ix < in_w; ++ix) {
          if (ux(ox, ix) != 0.0) u(oy * out_w + ox, iy * in_w + ix) = uy(oy, iy) * ux(ox, ix);
        }
      }
    }
  }
  return u;
}

StageMaps stage_interaction(const ad::Var& grid, int height, int width, const ad::Var& t_normal,
                            const ad::Var& t_abnormal, std::span<const DeformableKernelSpec> kernels,
                            int target_h, int target_w, double logit_scale) {
  if (kernels.empty()) throw ConfigError("stage interaction needs at least one kernel");
  const ad::Var t = text_matrix(t_normal, t_abnormal);
  ad::Var total;
  for (const auto& k : kernels) {
    const ad::Var agg = deformable_aggregate(grid, k, height, width);
    const ad::Var p = ad::softmax_rows(ad::scale(ad::matmul(agg, t), logit_scale));
    total = total.valid() ? ad::add(total, p) : p;
  }
  return finish(total, height, width, target_h, target_w);
}

StageMaps pointwise_interaction(const ad::Var& features, int height, int width,
                                const ad::Var& t_normal, const ad::Var& t_abnormal, int target_h,
                                int target_w, double logit_scale) {
  const ad::Var t = text_matrix(t_normal, t_abnormal);
  const ad::Var p = ad::softmax_rows(ad::scale(ad::matmul(features, t), logit_scale));
  return finish(p, height, width, target_h, target_w);
}

std::pair<ad::Var, ad::Var> aggregate_stages(std::span<const StageMaps> stages) {
  if (stages.empty()) throw ConfigError("no stage maps to aggregate");
  ad::Var n = stages[0].normal;
  ad::Var a = stages[0].anomaly;
  for (size_t i = 1; i < stages.size(); ++i) {
    if (stages[i].normal.rows() != n.rows() || stages[i].anomaly.rows() != a.rows()) {
      throw ConfigError("stage maps differ in resolution");
    }
    n = ad::add(n, stages[i].normal);
    a = ad::add(a, stages[i].anomaly);
  }
  return {ad::minmax_normalize(n), ad::minmax_normalize(a)};
}

AnomalyMap normalize_map(const AnomalyMap& map) {
  const double lo = map.minCoeff();
  const double hi = map.maxCoeff();
  if (hi - lo <= 1e-12) return AnomalyMap::Zero(map.rows(), map.cols());
  return ((map.array() - lo) / (hi - lo)).matrix();
}

AnomalyMap vl_map(const AnomalyMap& m_normal, const AnomalyMap& m_anomaly) {
  if (m_normal.rows() != m_anomaly.rows() || m_normal.cols() != m_anomaly.cols()) {
    throw ConfigError("normal and anomaly maps differ in resolution");
  }
  return ((m_anomaly.array() + (1.0 - m_normal.array())) / 2.0).matrix();
}

AnomalyMap to_map(const Mat& column, int height, int width) {
  if (column.size() != static_cast<Eigen::Index>(height) * width) {
    throw ConfigError("map size does not match resolution");
  }
  AnomalyMap m(height, width);
  std::copy(column.data(), column.data() + column.size(), m.data());
  return m;
}

Mat from_map(const AnomalyMap& map) {
  Mat c(map.size(), 1);
  std::copy(map.data(), map.data() + map.size(), c.data());
  return c;
}

AnomalyMap upsample(const AnomalyMap& map, int out_h, int out_w) {
  if (map.rows() == out_h && map.cols() == out_w) return map;
  const auto u = cached_upsample(static_cast<int>(map.rows()), static_cast<int>(map.cols()), out_h, out_w);
  return to_map((*u) * from_map(map), out_h, out_w);
}

MdciModule::MdciModule(const MdciConfig& config, int channels, int stage_count) : config_(config) {
  if (config.kernels.empty()) throw ConfigError("mdci.kernels must not be empty");
  for (const auto& k : config.kernels) kernels_.push_back(DeformableKernelSpec::create(k, channels));
  if (config.aligner_stages) {
    for (int i = 0; i < stage_count; ++i) {
      aligners_.push_back({ad::leaf(Mat::Identity(channels, channels)), ad::leaf(Mat::Zero(1, channels))});
    }
  }
}

std::pair<ad::Var, ad::Var> MdciModule::forward(const FeaturePyramid& pyramid, const Vec& t_normal,
                                                const Vec& t_abnormal) const {
  return forward(pyramid, ad::constant(t_normal.transpose()), ad::constant(t_abnormal.transpose()));
}

std::pair<ad::Var, ad::Var> MdciModule::forward(const FeaturePyramid& pyramid, const ad::Var& tn,
                                                const ad::Var& ta) const {
  const int th = pyramid.image_height;
  const int tw = pyramid.image_width;
  std::vector<StageMaps> maps;
  for (const auto& stage : pyramid.stages) {
    maps.push_back(stage_interaction(ad::constant(stage.vv.features), stage.vv.height, stage.vv.width,
                                     tn, ta, kernels_, th, tw, config_.logit_scale));
  }
  if (config_.aligner_stages) {
    if (aligners_.size() != pyramid.stages.size()) {
      throw ConfigError("pyramid stage count does not match the trained aligners");
    }
    for (size_t i = 0; i < pyramid.stages.size(); ++i) {
      const auto& g = pyramid.stages[i].qkv;
      const ad::Var aligned =
          ad::add_row(ad::matmul(ad::constant(g.features), aligners_[i].weight), aligners_[i].bias);
      maps.push_back(pointwise_interaction(aligned, g.height, g.width, tn, ta, th, tw, config_.logit_scale));
    }
  }
  return aggregate_stages(maps);
}

MdciModule MdciModule::with_kernels(const std::vector<std::string>& ids) const {
  if (ids.empty()) throw ConfigError("kernel selection must not be empty");
  MdciModule out = *this;
  out.config_.kernels = ids;
  out.kernels_.clear();
  const int channels = static_cast<int>(kernels_.front().proj.rows());
  for (const auto& id : ids) {
    auto it = std::find_if(kernels_.begin(), kernels_.end(),
                           [&](const DeformableKernelSpec& k) { return k.kernel_id == id; });
    out.kernels_.push_back(it != kernels_.end() ? *it : DeformableKernelSpec::create(id, channels));
  }
  return out;
}

std::vector<ad::Var*> MdciModule::parameters() {
  std::vector<ad::Var*> out;
  for (auto& [name, p] : named_parameters()) out.push_back(p);
  return out;
}

std::vector<std::pair<std::string, ad::Var*>> MdciModule::named_parameters() {
  std::vector<std::pair<std::string, ad::Var*>> out;
  for (size_t j = 0; j < kernels_.size(); ++j) {
    const std::string base = "mdci.kernel" + std::to_string(j) + ".";
    auto& k = kernels_[j];
    out.emplace_back(base + "proj", &k.proj);
    out.emplace_back(base + "tap_weights", &k.tap_weights);
    out.emplace_back(base + "offset_w", &k.offset_w);
    out.emplace_back(base + "offset_b", &k.offset_b);
  }
  for (size_t i = 0; i < aligners_.size(); ++i) {
    const std::string base = "mdci.aligner" + std::to_string(i) + ".";
    out.emplace_back(base + "weight", &aligners_[i].weight);
    out.emplace_back(base + "bias", &aligners_[i].bias);
  }
  return out;
}

}  // namespace filo
