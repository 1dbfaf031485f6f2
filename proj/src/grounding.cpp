#include "filo/grounding.hpp"

#include "filo/error.hpp"
#include "filo/fusdes.hpp"

#include <json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>

namespace filo {

double iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const double iy = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

void BoundingBoxSet::validate() const {
  if (boxes.size() != confidences.size()) throw InputError("one confidence per box required");
  for (const auto& b : boxes) {
    if (!(b.x0 < b.x1 && b.y0 < b.y1)) throw InputError("degenerate bounding box");
  }
}

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

std::vector<Detection> HeuristicStubProvider::detect(const Image& image,
                                                     std::span<const std::string> /*queries*/) {
  const int p = patch_size_;
  const int gh = image.height / p;
  const int gw = image.width / p;
  if (gh == 0 || gw == 0) return {};
  const int n = gh * gw;

  // Per-patch statistics: mean of each channel and luminance standard deviation.
  std::vector<std::array<double, 4>> stats(n);
  for (int gy = 0; gy < gh; ++gy) {
    for (int gx = 0; gx < gw; ++gx) {
      std::array<double, 3> sum{};
      double lum = 0, lum2 = 0;
      for (int y = gy * p; y < (gy + 1) * p; ++y) {
        for (int x = gx * p; x < (gx + 1) * p; ++x) {
          double l = 0;
          for (int c = 0; c < 3; ++c) {
            sum[c] += image.at(y, x, c);
            l += image.at(y, x, c) / 3.0;
          }
          lum += l;
          lum2 += l * l;
        }
      }
      const double cnt = static_cast<double>(p * p);
      const double mu = lum / cnt;
      stats[gy * gw + gx] = {sum[0] / cnt, sum[1] / cnt, sum[2] / cnt,
                             std::sqrt(std::max(0.0, lum2 / cnt - mu * mu))};
    }
  }
  std::array<double, 4> med{}, scale{};
  for (int k = 0; k < 4; ++k) {
    std::vector<double> col(n);
    for (int i = 0; i < n; ++i) col[i] = stats[i][k];
    med[k] = median(col);
    for (int i = 0; i < n; ++i) col[i] = std::abs(col[i] - med[k]);
    scale[k] = std::max(1.4826 * median(col), 0.02);
  }
  std::vector<double> z(n, 0.0);
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < 4; ++k) z[i] = std::max(z[i], std::abs(stats[i][k] - med[k]) / scale[k]);
  }

  std::vector<int> label(n, -1);
  std::vector<Detection> out;
  for (int start = 0; start < n; ++start) {
    if (z[start] <= deviation_ || label[start] >= 0) continue;
    const int id = static_cast<int>(out.size());
    std::vector<int> stack{start};
    label[start] = id;
    std::vector<int> members;
    double zmax = 0;
    while (!stack.empty()) {
      const int cur = stack.back();
      stack.pop_back();
      members.push_back(cur);
      zmax = std::max(zmax, z[cur]);
      const int cy = cur / gw, cx = cur % gw;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int ny = cy + dy, nx = cx + dx;
          if (ny < 0 || ny >= gh || nx < 0 || nx >= gw) continue;
          const int ni = ny * gw + nx;
          if (label[ni] < 0 && z[ni] > deviation_) {
            label[ni] = id;
            stack.push_back(ni);
          }
        }
      }
    }
    // Pixel-tight extent of deviating pixels inside the component's patches.
    int px0 = image.width, py0 = image.height, px1 = -1, py1 = -1;
    for (int m : members) {
      const int gy = m / gw, gx = m % gw;
      for (int y = gy * p; y < (gy + 1) * p; ++y) {
        for (int x = gx * p; x < (gx + 1) * p; ++x) {
          double dev = 0;
          for (int c = 0; c < 3; ++c) dev = std::max(dev, std::abs(image.at(y, x, c) - med[c]) / scale[c]);
          if (dev > deviation_) {
            px0 = std::min(px0, x);
            py0 = std::min(py0, y);
            px1 = std::max(px1, x);
            py1 = std::max(py1, y);
          }
        }
      }
    }
    Detection d;
    if (px1 < 0) {  // contrast-only component: use the patch extent
      for (int m : members) {
        const int gy = m / gw, gx = m % gw;
        px0 = std::min(px0, gx * p);
        py0 = std::min(py0, gy * p);
        px1 = std::max(px1, (gx + 1) * p - 1);
        py1 = std::max(py1, (gy + 1) * p - 1);
      }
    }
    d.box = {static_cast<double>(px0) / image.width, static_cast<double>(py0) / image.height,
             static_cast<double>(px1 + 1) / image.width, static_cast<double>(py1 + 1) / image.height};
    d.confidence = std::min(1.0, zmax / (2.0 * deviation_));
    out.push_back(d);
  }
  return out;
}

std::filesystem::path FileProvider::sidecar_path(const std::filesystem::path& dir, const Image& image) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << hash_image(image);
  return dir / (os.str() + ".boxes.json");
}

void FileProvider::write_sidecar(const std::filesystem::path& path,
                                 std::span<const Detection> detections) {
  nlohmann::json j;
  j["boxes"] = nlohmann::json::array();
  j["confidences"] = nlohmann::json::array();
  for (const auto& d : detections) {
    j["boxes"].push_back({d.box.x0, d.box.y0, d.box.x1, d.box.y1});
    j["confidences"].push_back(d.confidence);
  }
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write box sidecar '" + path.string() + "'");
  f << j.dump(2) << "\n";
}

std::vector<Detection> FileProvider::detect(const Image& image, std::span<const std::string>) {
  const auto path = sidecar_path(dir_, image);
  std::ifstream f(path);
  if (!f) return {};
  nlohmann::json j;
  try {
    f >> j;
    const auto& boxes = j.at("boxes");
    const auto& conf = j.at("confidences");
    if (boxes.size() != conf.size()) throw FormatError("box/confidence count mismatch in " + path.string());
    std::vector<Detection> out;
    for (size_t i = 0; i < boxes.size(); ++i) {
      const auto& b = boxes[i];
      out.push_back({{b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                      b.at(3).get<double>()},
                     conf[i].get<double>()});
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed box sidecar '" + path.string() + "': " + e.what());
  }
}

GroundingDetector::GroundingDetector(std::shared_ptr<GroundingProvider> provider,
                                     double confidence_threshold)
    : provider_(std::move(provider)), threshold_(confidence_threshold) {}

BoundingBoxSet GroundingDetector::detect(const Image& image, std::span<const std::string> queries) {
  if (queries.empty()) throw InputError("grounding needs at least one query");
  std::string key = std::to_string(hash_image(image));
  for (const auto& q : queries) key += '\x1f' + q;
  {
    std::shared_lock lock(mu_);
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
  }
  BoundingBoxSet set;
  set.source = provider_ ? provider_->source() : BoxSource::kHeuristicStub;
  if (provider_) {
    try {
      std::vector<Detection> raw;
      {
        std::unique_lock lock(mu_);
        ++provider_calls_;
      }
      raw = provider_->detect(image, queries);
      for (const auto& d : raw) {
        const Box b{std::clamp(d.box.x0, 0.0, 1.0), std::clamp(d.box.y0, 0.0, 1.0),
                    std::clamp(d.box.x1, 0.0, 1.0), std::clamp(d.box.y1, 0.0, 1.0)};
        if (d.confidence < threshold_ || !(b.x0 < b.x1 && b.y0 < b.y1)) continue;
        set.boxes.push_back(b);
        set.confidences.push_back(std::clamp(d.confidence, 0.0, 1.0));
      }
    } catch (const std::exception& e) {
      spdlog::warn("grounding provider failed ({}); continuing without boxes", e.what());
      set.boxes.clear();
      set.confidences.clear();
    }
  }
  std::unique_lock lock(mu_);
  cache_.emplace(key, set);
  return set;
}

std::vector<std::string> positions_from_boxes(const BoundingBoxSet& boxes) {
  std::array<bool, 9> hit{};
  for (const auto& b : boxes.boxes) {
    const double cx = 0.5 * (b.x0 + b.x1);
    const double cy = 0.5 * (b.y0 + b.y1);
    const int col = std::clamp(static_cast<int>(std::floor(cx * 3.0)), 0, 2);
    const int row = std::clamp(static_cast<int>(std::floor(cy * 3.0)), 0, 2);
    hit[row * 3 + col] = true;
  }
  std::vector<std::string> out;
  for (size_t i = 0; i < hit.size(); ++i) {
    if (hit[i]) out.emplace_back(kRegionNames[i]);
  }
  return out;
}

AnomalyMap suppress(const AnomalyMap& map, const BoundingBoxSet& boxes, double lambda) {
  if (boxes.empty()) return map;
  AnomalyMap out = map;
  const auto h = static_cast<double>(map.rows());
  const auto w = static_cast<double>(map.cols());
  for (Eigen::Index y = 0; y < map.rows(); ++y) {
    const double cy = (static_cast<double>(y) + 0.5) / h;
    for (Eigen::Index x = 0; x < map.cols(); ++x) {
      const double cx = (static_cast<double>(x) + 0.5) / w;
      bool inside = false;
      for (const auto& b : boxes.boxes) {
        if (cx >= b.x0 && cx <= b.x1 && cy >= b.y0 && cy <= b.y1) {
          inside = true;
          break;
        }
      }
      if (!inside) out(y, x) *= lambda;
    }
  }
  return out;
}

}  // namespace filo
