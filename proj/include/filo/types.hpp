#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

namespace filo {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;

// Row-major so that data() matches the (y * width + x) flattening used by patch grids.
using AnomalyMap = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// H x W x 3 image with channels interleaved, values in [0,1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w) : height(h), width(w), pixels(static_cast<size_t>(h) * w * 3, 0.0f) {}

  float& at(int y, int x, int c) { return pixels[(static_cast<size_t>(y) * width + x) * 3 + c]; }
  float at(int y, int x, int c) const {
    return pixels[(static_cast<size_t>(y) * width + x) * 3 + c];
  }
  bool empty() const { return pixels.empty(); }
};

// Binary H x W ground-truth mask; 1 marks an anomalous pixel.
struct GroundTruthMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> bits;

  GroundTruthMask() = default;
  GroundTruthMask(int h, int w) : height(h), width(w), bits(static_cast<size_t>(h) * w, 0) {}

  std::uint8_t& at(int y, int x) { return bits[static_cast<size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return bits[static_cast<size_t>(y) * width + x]; }
  size_t positives() const;
  AnomalyMap as_map() const;
};

// Patch features of one encoder stage: (height*width) x C, row index y*width + x.
struct PatchGrid {
  int height = 0;
  int width = 0;
  Mat features;

  int channels() const { return static_cast<int>(features.cols()); }
};

std::uint64_t hash_image(const Image& image);

}  // namespace filo
