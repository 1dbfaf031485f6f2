#include "filo/tensor_io.hpp"

#include "filo/error.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

namespace filo {

namespace {

constexpr char kMagic[4] = {'F', 'P', 'K', '1'};

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  void need(size_t n, const std::string& field) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError("tensor container truncated while reading '" + field + "' at byte " +
                        std::to_string(pos_));
    }
  }
  std::uint8_t u8(const std::string& field) {
    need(1, field);
    return bytes_[pos_++];
  }
  std::uint16_t u16(const std::string& field) {
    need(2, field);
    std::uint16_t v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32(const std::string& field) {
    need(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::span<const std::uint8_t> take(size_t n, const std::string& field) {
    need(n, field);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }
  size_t pos() const { return pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  size_t pos_ = 0;
};

}  // namespace

size_t NamedTensor::element_count() const {
  size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

void TensorContainer::add(NamedTensor tensor) {
  if (tensor.name.empty() || tensor.name.size() > std::numeric_limits<std::uint16_t>::max()) {
    throw FormatError("tensor name length out of range");
  }
  if (contains(tensor.name)) throw FormatError("duplicate tensor name '" + tensor.name + "'");
  if (tensor.dims.size() > std::numeric_limits<std::uint8_t>::max()) {
    throw FormatError("tensor '" + tensor.name + "' rank exceeds 255");
  }
  if (tensor.element_count() != tensor.data.size()) {
    throw FormatError("tensor '" + tensor.name + "' payload does not match dims");
  }
  if (tensors_.size() == std::numeric_limits<std::uint16_t>::max()) {
    throw FormatError("tensor container holds at most 65535 tensors");
  }
  tensors_.push_back(std::move(tensor));
}

void TensorContainer::add_matrix(const std::string& name, const Mat& m) {
  NamedTensor t;
  t.name = name;
  t.dims = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
  t.data.reserve(static_cast<size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) t.data.push_back(static_cast<float>(m(r, c)));
  }
  add(std::move(t));
}

void TensorContainer::add_vector(const std::string& name, std::span<const double> values) {
  NamedTensor t;
  t.name = name;
  t.dims = {static_cast<std::uint32_t>(values.size())};
  for (double v : values) t.data.push_back(static_cast<float>(v));
  add(std::move(t));
}

bool TensorContainer::contains(const std::string& name) const {
  for (const auto& t : tensors_) {
    if (t.name == name) return true;
  }
  return false;
}

const NamedTensor& TensorContainer::get(const std::string& name) const {
  for (const auto& t : tensors_) {
    if (t.name == name) return t;
  }
  throw FormatError("tensor container has no tensor '" + name + "'");
}

Mat TensorContainer::matrix(const std::string& name) const {
  const auto& t = get(name);
  if (t.dims.size() != 2) throw FormatError("tensor '" + name + "' is not rank 2");
  Mat m(t.dims[0], t.dims[1]);
  size_t i = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = t.data[i++];
  }
  return m;
}

std::vector<double> TensorContainer::vector(const std::string& name) const {
  const auto& t = get(name);
  return {t.data.begin(), t.data.end()};
}

std::vector<std::uint8_t> TensorContainer::serialize() const {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_u16(out, kContainerVersion);
  put_u16(out, static_cast<std::uint16_t>(tensors_.size()));
  for (const auto& t : tensors_) {
    put_u16(out, static_cast<std::uint16_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    out.push_back(static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) put_u32(out, d);
    for (float f : t.data) put_u32(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

TensorContainer TensorContainer::parse(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  auto magic = r.take(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0) {
    throw FormatError("bad magic: expected 'FPK1'");
  }
  const std::uint16_t version = r.u16("version");
  if (version != kContainerVersion) {
    throw FormatError("unsupported version " + std::to_string(version));
  }
  const std::uint16_t count = r.u16("tensor count");
  TensorContainer c;
  for (std::uint16_t i = 0; i < count; ++i) {
    const std::string idx = "tensor[" + std::to_string(i) + "]";
    const std::uint16_t len = r.u16(idx + ".name_length");
    auto name_bytes = r.take(len, idx + ".name");
    NamedTensor t;
    t.name.assign(name_bytes.begin(), name_bytes.end());
    const std::uint8_t rank = r.u8(idx + ".rank");
    std::uint64_t elements = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      const std::uint32_t dim = r.u32(idx + ".dims");
      t.dims.push_back(dim);
      elements *= dim;
    }
    if (elements > (bytes.size() - r.pos()) / 4) {
      throw FormatError("tensor container truncated while reading '" + idx + ".payload' (" +
                        t.name + ")");
    }
    t.data.resize(static_cast<size_t>(elements));
    for (auto& f : t.data) f = std::bit_cast<float>(r.u32(idx + ".payload"));
    if (c.contains(t.name)) throw FormatError("duplicate tensor name '" + t.name + "'");
    c.tensors_.push_back(std::move(t));
  }
  if (!r.done()) throw FormatError("trailing bytes after last tensor");
  return c;
}

void TensorContainer::save(const std::filesystem::path& path) const {
  auto bytes = serialize();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing '" + path.string() + "'");
}

TensorContainer TensorContainer::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse(bytes);
}

}  // namespace filo
