#include "filo/dataset.hpp"

#include "filo/error.hpp"
#include "filo/image_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <functional>
#include <random>

namespace filo {

const char* to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kTest: return "test";
    case Split::kReference: return "reference";
  }
  return "train";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "test") return Split::kTest;
  if (s == "reference") return Split::kReference;
  throw FormatError("unknown split '" + s + "'");
}

void SampleRecord::validate() const {
  const bool has_pos = mask.positives() > 0;
  if ((label == 1) != has_pos) throw InputError("sample '" + id + "': label disagrees with mask");
  if ((label == 1) != !defect_types.empty()) {
    throw InputError("sample '" + id + "': label disagrees with defect list");
  }
  if (mask.height != image.height || mask.width != image.width) {
    throw InputError("sample '" + id + "': mask resolution differs from image");
  }
}

const std::vector<std::string>& supported_defects() {
  static const std::vector<std::string> d = {"scratch", "blob", "hole", "stain"};
  return d;
}

namespace {

using Rgb = std::array<double, 3>;

enum class Shape { kCircle, kSquare, kCapsule, kEllipse, kDiamond, kHexagon };
enum class Texture { kRings, kChecker, kTwoTone, kStreaks, kWeave, kBrushed };

struct Style {
  Rgb background;
  Rgb object;
  Shape shape;
  Texture texture;
  double size;  // characteristic half-extent in pixels at 64 px
};

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Style style_for(const std::string& cls) {
  if (cls == "bottle") return {{0.15, 0.15, 0.18}, {0.35, 0.55, 0.30}, Shape::kCircle, Texture::kRings, 15};
  if (cls == "tile") return {{0.80, 0.80, 0.75}, {0.55, 0.45, 0.40}, Shape::kSquare, Texture::kChecker, 14};
  if (cls == "capsule") return {{0.10, 0.20, 0.35}, {0.85, 0.80, 0.30}, Shape::kCapsule, Texture::kTwoTone, 20};
  if (cls == "hazelnut") return {{0.05, 0.05, 0.05}, {0.60, 0.40, 0.20}, Shape::kEllipse, Texture::kStreaks, 16};
  if (cls == "carpet") return {{0.75, 0.70, 0.60}, {0.50, 0.20, 0.25}, Shape::kDiamond, Texture::kWeave, 20};
  if (cls == "metal_nut") return {{0.20, 0.25, 0.20}, {0.70, 0.72, 0.75}, Shape::kHexagon, Texture::kBrushed, 16};
  // Unknown classes get a style derived from the name.
  std::mt19937_64 rng(mix(fnv1a(cls)));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Style s;
  const double bg = u(rng) < 0.5 ? 0.12 : 0.78;
  s.background = {bg + 0.05 * u(rng), bg + 0.05 * u(rng), bg + 0.05 * u(rng)};
  const double ob = bg < 0.5 ? 0.6 : 0.35;
  s.object = {ob + 0.3 * u(rng) - 0.15, ob + 0.3 * u(rng) - 0.15, ob + 0.3 * u(rng) - 0.15};
  s.shape = static_cast<Shape>(rng() % 6);
  s.texture = static_cast<Texture>(rng() % 6);
  s.size = 14 + 4 * u(rng);
  return s;
}

bool inside_shape(Shape shape, double size, double dy, double dx) {
  const double r = size;
  switch (shape) {
    case Shape::kCircle: return dx * dx + dy * dy <= r * r;
    case Shape::kSquare: return std::abs(dx) <= r && std::abs(dy) <= r;
    case Shape::kCapsule: {
      const double half_h = r * 0.45;
      const double cx = std::clamp(dx, -(r - half_h), r - half_h);
      return (dx - cx) * (dx - cx) + dy * dy <= half_h * half_h;
    }
    case Shape::kEllipse: return (dx * dx) / (r * r) + (dy * dy) / (0.8 * r * 0.8 * r) <= 1.0;
    case Shape::kDiamond: return std::abs(dx) + std::abs(dy) <= r;
    case Shape::kHexagon: {
      const double ax = std::abs(dx), ay = std::abs(dy);
      const bool hex = ay <= r * 0.866 && 0.866 * ax + 0.5 * ay <= r * 0.866;
      return hex && dx * dx + dy * dy > (0.3 * r) * (0.3 * r);
    }
  }
  return false;
}

double texture_value(Texture t, double dy, double dx, double phase) {
  switch (t) {
    case Texture::kRings: return std::sin(std::sqrt(dx * dx + dy * dy) * 1.2 + phase);
    case Texture::kChecker:
      return ((static_cast<int>(std::floor((dx + 64) / 4)) + static_cast<int>(std::floor((dy + 64) / 4))) % 2)
                 ? 1.0
                 : -1.0;
    case Texture::kTwoTone: return dx < 0 ? 1.0 : -1.0;
    case Texture::kStreaks: return std::sin(dx * 0.9 + std::sin(dy * 0.5 + phase) * 2.0);
    case Texture::kWeave: return std::sin(dx * 1.6) * std::sin(dy * 1.6 + phase);
    case Texture::kBrushed: return std::sin((dx + dy) * 2.2 + phase);
  }
  return 0.0;
}

double seg_distance(double py, double px, double ay, double ax, double by, double bx) {
  const double vy = by - ay, vx = bx - ax;
  const double len2 = vy * vy + vx * vx;
  double t = len2 > 0 ? ((py - ay) * vy + (px - ax) * vx) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double qy = ay + t * vy - py, qx = ax + t * vx - px;
  return std::sqrt(qy * qy + qx * qx);
}

Rgb contrast_color(const Rgb& base, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double lum = (base[0] + base[1] + base[2]) / 3.0;
  const double v = lum > 0.45 ? 0.05 + 0.1 * u(rng) : 0.85 + 0.1 * u(rng);
  return {v, v * (0.9 + 0.1 * u(rng)), v * (0.85 + 0.15 * u(rng))};
}

}  // namespace

SampleRecord render_sample(const std::string& class_name, const std::string& defect, int image_size,
                           std::uint64_t seed) {
  if (!defect.empty() &&
      std::find(supported_defects().begin(), supported_defects().end(), defect) == supported_defects().end()) {
    throw ConfigError("unknown defect type '" + defect + "'");
  }
  std::mt19937_64 rng(mix(seed));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.015);

  const Style st = style_for(class_name);
  const int n = image_size;
  const double scale = n / 64.0;
  const double cy = n / 2.0 - 0.5 + (u(rng) * 6 - 3) * scale;
  const double cx = n / 2.0 - 0.5 + (u(rng) * 6 - 3) * scale;
  const double phase = u(rng) * 6.283;
  Rgb obj = st.object;
  for (double& c : obj) c = std::clamp(c + (u(rng) - 0.5) * 0.06, 0.0, 1.0);

  SampleRecord r;
  r.class_name = class_name;
  r.image = Image(n, n);
  r.mask = GroundTruthMask(n, n);
  std::vector<std::uint8_t> on_object(static_cast<size_t>(n) * n, 0);
  std::vector<Rgb> px(static_cast<size_t>(n) * n);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const double dy = (y - cy) / scale, dx = (x - cx) / scale;
      Rgb c = st.background;
      if (inside_shape(st.shape, st.size, dy, dx)) {
        on_object[static_cast<size_t>(y) * n + x] = 1;
        const double t = 0.06 * texture_value(st.texture, dy, dx, phase);
        for (int k = 0; k < 3; ++k) c[k] = obj[k] + t;
      }
      px[static_cast<size_t>(y) * n + x] = c;
    }
  }

  if (!defect.empty()) {
    r.label = 1;
    r.defect_types = {defect};
    std::vector<int> candidates;
    for (int i = 0; i < n * n; ++i) {
      const int y = i / n, x = i % n;
      const int margin = static_cast<int>(4 * scale);
      if (on_object[i] && y >= margin && y < n - margin && x >= margin && x < n - margin) candidates.push_back(i);
    }
    if (candidates.empty()) throw ConfigError("object too small for defect placement");
    const int c0 = candidates[static_cast<size_t>(rng() % candidates.size())];
    const double py = c0 / n, pxx = c0 % n;

    std::function<bool(int, int)> support;
    Rgb color{};
    double alpha = 1.0;
    if (defect == "scratch") {
      const int segs = 2 + static_cast<int>(rng() % 2);
      const double thickness = 1 + static_cast<double>(rng() % 3);
      std::vector<std::array<double, 2>> pts{{py, pxx}};
      double angle = u(rng) * 6.283;
      for (int s = 0; s < segs; ++s) {
        const double len = (6 + u(rng) * 6) * scale;
        angle += (u(rng) - 0.5) * 1.2;
        pts.push_back({pts.back()[0] + len * std::sin(angle), pts.back()[1] + len * std::cos(angle)});
      }
      support = [pts, thickness](int y, int x) {
        for (size_t s = 0; s + 1 < pts.size(); ++s) {
          if (seg_distance(y, x, pts[s][0], pts[s][1], pts[s + 1][0], pts[s + 1][1]) <= thickness / 2.0) {
            return true;
          }
        }
        return false;
      };
      color = contrast_color(obj, rng);
    } else if (defect == "blob") {
      const double ry = (3 + u(rng) * 3) * scale, rx = (3 + u(rng) * 3) * scale;
      support = [=](int y, int x) {
        return ((y - py) * (y - py)) / (ry * ry) + ((x - pxx) * (x - pxx)) / (rx * rx) <= 1.0;
      };
      const Rgb cc = contrast_color(obj, rng);
      color = {cc[0] * 0.6 + 0.4 * u(rng), cc[1] * 0.5, cc[2] * 0.4 + 0.3 * u(rng)};
    } else if (defect == "hole") {
      const double rad = (3 + u(rng) * 2) * scale;
      support = [=](int y, int x) { return (y - py) * (y - py) + (x - pxx) * (x - pxx) <= rad * rad; };
      color = st.background;
    } else {  // stain
      const double ry = (4 + u(rng) * 3) * scale, rx = (4 + u(rng) * 3) * scale;
      support = [=](int y, int x) {
        return ((y - py) * (y - py)) / (ry * ry) + ((x - pxx) * (x - pxx)) / (rx * rx) <= 1.0;
      };
      const double lum = (obj[0] + obj[1] + obj[2]) / 3.0;
      color = lum > 0.45 ? Rgb{0.35, 0.15, 0.05} : Rgb{0.95, 0.85, 0.4};
      alpha = 0.45;
    }
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        if (!support(y, x)) continue;
        r.mask.at(y, x) = 1;
        auto& c = px[static_cast<size_t>(y) * n + x];
        for (int k = 0; k < 3; ++k) c[k] = alpha * color[k] + (1 - alpha) * c[k];
      }
    }
  }

  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const auto& c = px[static_cast<size_t>(y) * n + x];
      for (int k = 0; k < 3; ++k) {
        const double v = std::clamp(c[k] + noise(rng), 0.0, 1.0);
        r.image.at(y, x, k) = static_cast<float>(std::lround(v * 255.0) / 255.0);
      }
    }
  }
  return r;
}

std::vector<SampleRecord> generate_dataset(const DatasetConfig& spec, int image_size) {
  if (spec.train_normal < 1 || spec.train_anomalous < 1 || spec.test_normal < 1 || spec.test_anomalous < 1) {
    throw ConfigError("dataset counts must be >= 1 per category");
  }
  if (spec.defects.empty()) throw ConfigError("dataset.defects must not be empty");
  for (const auto& d : spec.defects) {
    if (std::find(supported_defects().begin(), supported_defects().end(), d) == supported_defects().end()) {
      throw ConfigError("unknown defect type '" + d + "'");
    }
  }
  std::vector<SampleRecord> out;
  auto emit = [&](const std::string& cls, Split split, bool anomalous, int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%03d", index);
    const std::string id = cls + "_" + to_string(split) + "_" + (anomalous ? "a" : "n") + buf;
    const std::uint64_t s = mix(spec.seed ^ mix(fnv1a(id)));
    std::string defect;
    if (anomalous) defect = spec.defects[static_cast<size_t>(mix(s + 1) % spec.defects.size())];
    SampleRecord r = render_sample(cls, defect, image_size, s);
    r.id = id;
    r.split = split;
    out.push_back(std::move(r));
  };
  for (const auto& cls : spec.train_categories) {
    for (int i = 0; i < spec.train_normal; ++i) emit(cls, Split::kTrain, false, i);
    for (int i = 0; i < spec.train_anomalous; ++i) emit(cls, Split::kTrain, true, i);
  }
  for (const auto& cls : spec.test_categories) {
    for (int i = 0; i < spec.test_normal; ++i) emit(cls, Split::kTest, false, i);
    for (int i = 0; i < spec.test_anomalous; ++i) emit(cls, Split::kTest, true, i);
    for (int i = 0; i < spec.references; ++i) emit(cls, Split::kReference, false, i);
  }
  return out;
}

std::vector<SampleRecord> filter_split(const std::vector<SampleRecord>& records, Split split) {
  std::vector<SampleRecord> out;
  for (const auto& r : records) {
    if (r.split == split) out.push_back(r);
  }
  return out;
}

void save_dataset(const std::vector<SampleRecord>& records, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "masks");
  std::ofstream index(dir / "index.jsonl", std::ios::trunc);
  if (!index) throw IoError("cannot write '" + (dir / "index.jsonl").string() + "'");
  for (const auto& r : records) {
    const std::string img = "images/" + r.id + ".ppm";
    const std::string mask = "masks/" + r.id + ".pgm";
    write_ppm(r.image, dir / img);
    write_pgm_mask(r.mask, dir / mask);
    nlohmann::json j = {{"id", r.id},        {"class", r.class_name}, {"split", to_string(r.split)},
                        {"label", r.label},  {"defects", r.defect_types}, {"image", img},
                        {"mask", mask}};
    index << j.dump() << "\n";
  }
}

std::vector<SampleRecord> load_dataset(const std::filesystem::path& dir) {
  const auto index_path = dir / "index.jsonl";
  if (!std::filesystem::exists(index_path)) {
    throw IoError("dataset index '" + index_path.string() + "' not found");
  }
  std::ifstream in(index_path);
  std::vector<SampleRecord> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      SampleRecord r;
      r.id = j.at("id").get<std::string>();
      r.class_name = j.at("class").get<std::string>();
      r.split = split_from_string(j.at("split").get<std::string>());
      r.label = j.at("label").get<int>();
      r.defect_types = j.at("defects").get<std::vector<std::string>>();
      r.image = read_ppm(dir / j.at("image").get<std::string>());
      r.mask = read_pgm_mask(dir / j.at("mask").get<std::string>());
      r.validate();
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(index_path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace filo
