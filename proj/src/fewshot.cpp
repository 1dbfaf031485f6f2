#include "filo/fewshot.hpp"

#include "filo/error.hpp"
#include "filo/mdci.hpp"

#include <cmath>

namespace filo {

FeaturePath feature_path_from_string(const std::string& s) {
  if (s == "vv") return FeaturePath::kVv;
  if (s == "qkv") return FeaturePath::kQkv;
  throw ConfigError("unknown feature path '" + s + "' (expected vv|qkv)");
}

namespace {

const PatchGrid& pick(const FeatureStage& s, FeaturePath path) {
  return path == FeaturePath::kVv ? s.vv : s.qkv;
}

Mat unit_rows(const Mat& m) {
  Mat out = m;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double n = out.row(r).norm();
    if (n > 1e-12) out.row(r) /= n;
  }
  return out;
}

std::string bank_key(const std::string& class_name, int shots, size_t stage) {
  return "memory/" + class_name + "/k" + std::to_string(shots) + "/stage" + std::to_string(stage);
}

}  // namespace

MemoryBank build_memory(std::span<const FeaturePyramid> references, const std::string& class_name,
                        FeaturePath path) {
  if (references.empty()) throw ConfigError("memory bank needs at least one reference");
  const auto& first = references.front();
  for (const auto& r : references) {
    if (r.stages.size() != first.stages.size()) throw ConfigError("references differ in stage count");
    for (size_t i = 0; i < r.stages.size(); ++i) {
      const auto& a = pick(r.stages[i], path);
      const auto& b = pick(first.stages[i], path);
      if (a.height != b.height || a.width != b.width || a.channels() != b.channels()) {
        throw ConfigError("references differ in stage " + std::to_string(i) + " shape");
      }
    }
  }
  MemoryBank bank;
  bank.class_name = class_name;
  bank.shot_count = static_cast<int>(references.size());
  for (size_t i = 0; i < first.stages.size(); ++i) {
    const auto& g0 = pick(first.stages[i], path);
    Mat rows(g0.features.rows() * static_cast<Eigen::Index>(references.size()), g0.channels());
    for (size_t k = 0; k < references.size(); ++k) {
      rows.middleRows(static_cast<Eigen::Index>(k) * g0.features.rows(), g0.features.rows()) =
          unit_rows(pick(references[k].stages[i], path).features);
    }
    bank.stages.push_back(rows.cast<float>().cast<double>());
  }
  return bank;
}

AnomalyMap match_stage(const PatchGrid& grid, const Mat& bank_stage) {
  if (grid.channels() != bank_stage.cols()) throw ConfigError("bank channel count mismatch");
  if (bank_stage.rows() == 0) throw ConfigError("empty memory bank stage");
  const Mat sims = unit_rows(grid.features) * bank_stage.transpose();
  AnomalyMap out(grid.height, grid.width);
  for (Eigen::Index p = 0; p < sims.rows(); ++p) {
    out.data()[p] = std::clamp(1.0 - sims.row(p).maxCoeff(), 0.0, 2.0);
  }
  return out;
}

std::vector<AnomalyMap> stage_scores(const FeaturePyramid& pyramid, const MemoryBank& bank,
                                     FeaturePath path) {
  if (pyramid.stages.size() != bank.stages.size()) {
    throw ConfigError("memory bank stage count does not match the pyramid");
  }
  std::vector<AnomalyMap> out;
  for (size_t i = 0; i < pyramid.stages.size(); ++i) {
    out.push_back(upsample(match_stage(pick(pyramid.stages[i], path), bank.stages[i]),
                           pyramid.image_height, pyramid.image_width));
  }
  return out;
}

AnomalyMap fewshot_map(std::span<const AnomalyMap> upsampled_scores, const BoundingBoxSet& boxes,
                       double lambda) {
  if (upsampled_scores.empty()) throw ConfigError("no stage scores");
  AnomalyMap sum = upsampled_scores[0];
  for (size_t i = 1; i < upsampled_scores.size(); ++i) {
    if (upsampled_scores[i].rows() != sum.rows() || upsampled_scores[i].cols() != sum.cols()) {
      throw ConfigError("stage scores differ in resolution");
    }
    sum += upsampled_scores[i];
  }
  return suppress(normalize_map(sum), boxes, lambda);
}

std::vector<double> gaussian_kernel(double sigma) {
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * r + 1);
  double total = 0;
  for (int i = -r; i <= r; ++i) {
    k[i + r] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    total += k[i + r];
  }
  for (double& v : k) v /= total;
  return k;
}

namespace {

// Half-sample symmetric: ... b a | a b c ... c | c b ...
int reflect(int i, int n) {
  const int period = 2 * n;
  int m = i % period;
  if (m < 0) m += period;
  return m < n ? m : period - 1 - m;
}

}  // namespace

AnomalyMap gaussian_smooth(const AnomalyMap& map, double sigma) {
  if (sigma < 0.01) return map;
  const auto k = gaussian_kernel(sigma);
  const int r = static_cast<int>(k.size() / 2);
  const int h = static_cast<int>(map.rows());
  const int w = static_cast<int>(map.cols());
  AnomalyMap tmp(h, w), out(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double s = 0;
      for (int d = -r; d <= r; ++d) s += k[d + r] * map(y, reflect(x + d, w));
      tmp(y, x) = s;
    }
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double s = 0;
      for (int d = -r; d <= r; ++d) s += k[d + r] * tmp(reflect(y + d, h), x);
      out(y, x) = s;
    }
  }
  return out;
}

AnomalyMap fuse_final(const AnomalyMap& m_vl, const std::optional<AnomalyMap>& m_few, double sigma) {
  if (!m_few) return gaussian_smooth(m_vl, sigma);
  if (m_few->rows() != m_vl.rows() || m_few->cols() != m_vl.cols()) {
    throw ConfigError("few-shot and vision-language maps differ in resolution");
  }
  return gaussian_smooth(((m_vl + *m_few) / 2.0).eval(), sigma);
}

void add_memory_bank(TensorContainer& container, const MemoryBank& bank) {
  for (size_t i = 0; i < bank.stages.size(); ++i) {
    container.add_matrix(bank_key(bank.class_name, bank.shot_count, i), bank.stages[i]);
  }
}

MemoryBank get_memory_bank(const TensorContainer& container, const std::string& class_name, int shots) {
  MemoryBank bank;
  bank.class_name = class_name;
  bank.shot_count = shots;
  for (size_t i = 0; container.contains(bank_key(class_name, shots, i)); ++i) {
    bank.stages.push_back(container.matrix(bank_key(class_name, shots, i)));
  }
  if (bank.stages.empty()) {
    throw FormatError("no memory bank for class '" + class_name + "' with " + std::to_string(shots) +
                      " shots");
  }
  return bank;
}

void save_memory_bank(const MemoryBank& bank, const std::filesystem::path& path) {
  TensorContainer c;
  if (std::filesystem::exists(path)) c = TensorContainer::load(path);
  TensorContainer merged;
  const std::string prefix = "memory/" + bank.class_name + "/k" + std::to_string(bank.shot_count) + "/";
  for (const auto& t : c.tensors()) {
    if (t.name.rfind(prefix, 0) != 0) merged.add(t);
  }
  add_memory_bank(merged, bank);
  merged.save(path);
}

MemoryBank load_memory_bank(const std::filesystem::path& path, const std::string& class_name, int shots) {
  return get_memory_bank(TensorContainer::load(path), class_name, shots);
}

}  // namespace filo
