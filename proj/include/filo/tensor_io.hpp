#pragma once

// FPK1 tensor container.
//
//   magic        4 bytes  "FPK1"
//   version      u16 LE   (kContainerVersion)
//   count        u16 LE
//   count x {
//     name_len   u16 LE, name bytes (UTF-8, unique within the container)
//     rank       u8
//     dims       rank x u32 LE
//     payload    prod(dims) x f32 LE, row-major
//   }

#include "filo/types.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace filo {

inline constexpr std::uint16_t kContainerVersion = 1;

struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> data;

  size_t element_count() const;
};

class TensorContainer {
 public:
  void add(NamedTensor tensor);
  void add_matrix(const std::string& name, const Mat& m);
  void add_vector(const std::string& name, std::span<const double> values);

  bool contains(const std::string& name) const;
  const NamedTensor& get(const std::string& name) const;
  Mat matrix(const std::string& name) const;
  std::vector<double> vector(const std::string& name) const;
  const std::vector<NamedTensor>& tensors() const { return tensors_; }
  size_t size() const { return tensors_.size(); }

  std::vector<std::uint8_t> serialize() const;
  static TensorContainer parse(std::span<const std::uint8_t> bytes);

  void save(const std::filesystem::path& path) const;
  static TensorContainer load(const std::filesystem::path& path);

 private:
  std::vector<NamedTensor> tensors_;
};

}  // namespace filo
