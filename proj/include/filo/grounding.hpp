#pragma once

// Initial localization from a text-grounded detector: box providers, nine-region
// position names, and suppression of anomaly scores outside the boxes.

#include "filo/types.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <shared_mutex>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace filo {

struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // normalized [0,1] image coordinates
  double area() const { return (x1 - x0) * (y1 - y0); }
};

double iou(const Box& a, const Box& b);

enum class BoxSource { kExternalDetector, kHeuristicStub, kFile };

struct BoundingBoxSet {
  std::vector<Box> boxes;
  std::vector<double> confidences;
  BoxSource source = BoxSource::kHeuristicStub;

  bool empty() const { return boxes.empty(); }
  void validate() const;
};

struct Detection {
  Box box;
  double confidence = 0.0;
};

// Plug-in contract: (image, query strings) -> scored boxes. May throw.
class GroundingProvider {
 public:
  virtual ~GroundingProvider() = default;
  virtual std::vector<Detection> detect(const Image& image, std::span<const std::string> queries) = 0;
  virtual BoxSource source() const = 0;
};

// Flags patches whose color or contrast deviates from the image's median patch
// statistics by more than `deviation` robust z-units, merges flagged patches
// into 8-connected components and returns one pixel-tight box per component.
class HeuristicStubProvider : public GroundingProvider {
 public:
  explicit HeuristicStubProvider(int patch_size = 8, double deviation = 3.0)
      : patch_size_(patch_size), deviation_(deviation) {}
  std::vector<Detection> detect(const Image& image, std::span<const std::string> queries) override;
  BoxSource source() const override { return BoxSource::kHeuristicStub; }

 private:
  int patch_size_;
  double deviation_;
};

// Reads boxes from sidecar JSON files: <dir>/<image hash>.boxes.json holding
// {"boxes": [[x0,y0,x1,y1], ...], "confidences": [...]}. A missing sidecar
// means no detections.
class FileProvider : public GroundingProvider {
 public:
  explicit FileProvider(std::filesystem::path dir) : dir_(std::move(dir)) {}
  std::vector<Detection> detect(const Image& image, std::span<const std::string> queries) override;
  BoxSource source() const override { return BoxSource::kFile; }

  static std::filesystem::path sidecar_path(const std::filesystem::path& dir, const Image& image);
  static void write_sidecar(const std::filesystem::path& path, std::span<const Detection> detections);

 private:
  std::filesystem::path dir_;
};

// Thresholds provider output and caches results per (image hash, query set).
// Provider failures degrade to an empty set with a logged warning.
class GroundingDetector {
 public:
  GroundingDetector(std::shared_ptr<GroundingProvider> provider, double confidence_threshold = 0.25);

  BoundingBoxSet detect(const Image& image, std::span<const std::string> queries);
  size_t provider_calls() const { return provider_calls_; }

 private:
  std::shared_ptr<GroundingProvider> provider_;
  double threshold_;
  std::shared_mutex mu_;
  std::unordered_map<std::string, BoundingBoxSet> cache_;
  size_t provider_calls_ = 0;
};

// Canonical region order, deduplicated; independent of box order.
std::vector<std::string> positions_from_boxes(const BoundingBoxSet& boxes);

// Pixels whose centers fall outside every box are multiplied by lambda. An
// empty box set leaves the map unchanged.
AnomalyMap suppress(const AnomalyMap& map, const BoundingBoxSet& boxes, double lambda);

}  // namespace filo
