#include "lamformer/tensor_io.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace lam {

namespace {

constexpr char kMagic[4] = {'L', 'T', 'F', '1'};

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IoError("LTF1: truncated header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_ltf(std::ostream& os, const Tensor& t) {
  static_assert(std::numeric_limits<float>::is_iec559, "float32 IEEE-754 required");
  os.write(kMagic, 4);
  const auto rank = static_cast<unsigned char>(t.rank());
  os.write(reinterpret_cast<const char*>(&rank), 1);
  for (int i = 0; i < t.rank(); ++i) write_u32(os, static_cast<std::uint32_t>(t.dim(i)));
  // little-endian host assumed; payload is raw float32
  os.write(reinterpret_cast<const char*>(t.data().data()),
           static_cast<std::streamsize>(t.numel() * sizeof(float)));
  if (!os) throw IoError("LTF1: write failed");
}

Tensor read_ltf(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) throw IoError("LTF1: bad magic");
  unsigned char rank = 0;
  is.read(reinterpret_cast<char*>(&rank), 1);
  if (!is) throw IoError("LTF1: truncated header");
  Shape shape(rank);
  for (int i = 0; i < rank; ++i) shape[static_cast<std::size_t>(i)] = read_u32(is);
  const auto n = shape_numel(shape);
  std::vector<float> values(static_cast<std::size_t>(n));
  is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(n * sizeof(float)));
  if (!is) throw IoError("LTF1: truncated payload, expected " + std::to_string(n) + " floats");
  return Tensor(std::move(shape), std::move(values));
}

void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  write_ltf(os, t);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  return read_ltf(is);
}

void save_mask(const std::string& path, const IntTensor& m) {
  std::vector<float> values(m.data.size());
  for (std::size_t i = 0; i < m.data.size(); ++i) values[i] = static_cast<float>(m.data[i]);
  save_tensor(path, Tensor(m.shape, std::move(values)));
}

IntTensor load_mask(const std::string& path) {
  Tensor t = load_tensor(path);
  std::vector<std::int32_t> values(static_cast<std::size_t>(t.numel()));
  for (std::size_t i = 0; i < values.size(); ++i)
    values[i] = static_cast<std::int32_t>(std::lround(t.data()[i]));
  return IntTensor(t.shape(), std::move(values));
}

}  // namespace lam
