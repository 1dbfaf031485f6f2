#include "filo/image_io.hpp"

#include "filo/error.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <string>

namespace filo {

namespace {

// Reads "P?" header fields, skipping whitespace and comments.
int read_header_int(std::istream& in, const std::filesystem::path& path, const char* field) {
  int c = in.peek();
  while (c != EOF && (std::isspace(c) || c == '#')) {
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else {
      in.get();
    }
    c = in.peek();
  }
  int v = 0;
  if (!(in >> v) || v <= 0) {
    throw FormatError("'" + path.string() + "': bad or missing header field '" + field + "'");
  }
  return v;
}

std::vector<unsigned char> read_netpbm(const std::filesystem::path& path, const char* magic, int channels,
                                       int& height, int& width) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::string m(2, '\0');
  in.read(m.data(), 2);
  if (m != magic) throw FormatError("'" + path.string() + "': expected " + magic + " header");
  width = read_header_int(in, path, "width");
  height = read_header_int(in, path, "height");
  const int maxval = read_header_int(in, path, "maxval");
  if (maxval != 255) throw FormatError("'" + path.string() + "': only 8-bit images are supported");
  in.get();  // single whitespace before the raster
  std::vector<unsigned char> data(static_cast<size_t>(width) * height * channels);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (in.gcount() != static_cast<std::streamsize>(data.size())) {
    throw FormatError("'" + path.string() + "': truncated raster");
  }
  return data;
}

void write_netpbm(const std::filesystem::path& path, const char* magic, int height, int width,
                  const std::vector<unsigned char>& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << magic << "\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
}

unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

Image read_ppm(const std::filesystem::path& path) {
  int h = 0, w = 0;
  const auto data = read_netpbm(path, "P6", 3, h, w);
  Image img(h, w);
  for (size_t i = 0; i < data.size(); ++i) img.pixels[i] = static_cast<float>(data[i] / 255.0);
  return img;
}

void write_ppm(const Image& image, const std::filesystem::path& path) {
  std::vector<unsigned char> data(image.pixels.size());
  for (size_t i = 0; i < data.size(); ++i) data[i] = to_byte(image.pixels[i]);
  write_netpbm(path, "P6", image.height, image.width, data);
}

GroundTruthMask read_pgm_mask(const std::filesystem::path& path) {
  int h = 0, w = 0;
  const auto data = read_netpbm(path, "P5", 1, h, w);
  GroundTruthMask m(h, w);
  for (size_t i = 0; i < data.size(); ++i) m.bits[i] = data[i] ? 1 : 0;
  return m;
}

void write_pgm_mask(const GroundTruthMask& mask, const std::filesystem::path& path) {
  std::vector<unsigned char> data(mask.bits.size());
  for (size_t i = 0; i < data.size(); ++i) data[i] = mask.bits[i] ? 255 : 0;
  write_netpbm(path, "P5", mask.height, mask.width, data);
}

Image colorize(const AnomalyMap& map) {
  // Piecewise-linear blue -> cyan -> yellow -> red.
  static constexpr std::array<std::array<double, 3>, 4> stops = {
      {{0.0, 0.0, 0.6}, {0.0, 0.8, 1.0}, {1.0, 0.9, 0.0}, {0.8, 0.0, 0.0}}};
  Image img(static_cast<int>(map.rows()), static_cast<int>(map.cols()));
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const double v = std::clamp(map(y, x), 0.0, 1.0) * 3.0;
      const int i = std::min(static_cast<int>(v), 2);
      const double f = v - i;
      for (int c = 0; c < 3; ++c) {
        img.at(y, x, c) = static_cast<float>(stops[i][c] * (1 - f) + stops[i + 1][c] * f);
      }
    }
  }
  return img;
}

void write_heatmap(const AnomalyMap& map, const std::filesystem::path& path) {
  write_ppm(colorize(map), path);
}

}  // namespace filo
