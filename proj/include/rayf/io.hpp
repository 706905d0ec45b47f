#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "rayf/common.hpp"
#include "rayf/tensor.hpp"

namespace rayf {

// "RAYF" binary container, little-endian:
//   magic "RAYF" | u32 version=1 | u32 rank | u64 dims[rank] | payload
// Tensor files carry an f32 payload in row-major order. Pose files reuse the
// same header but carry f64 payloads (12 values per pose: row-major rotation,
// then translation); which reader applies is fixed by file role, documented
// in the README.
//
// Checkpoints are a sequence of named tensor records:
//   magic "RAYF" | u32 version=1 | u32 n_records |
//   per record: u32 name_len | name bytes | u32 rank | u64 dims[rank] | f32[]

namespace detail {

inline void write_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), std::streamsize(n));
}

inline void read_bytes(std::istream& is, void* p, std::size_t n,
                       const std::string& what) {
  is.read(static_cast<char*>(p), std::streamsize(n));
  if (!is) throw error("truncated RAYF stream while reading " + what);
}

template <typename T>
void write_pod(std::ostream& os, T v) {
  write_bytes(os, &v, sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::string& what) {
  T v;
  read_bytes(is, &v, sizeof(T), what);
  return v;
}

inline void write_header(std::ostream& os,
                         const std::vector<std::size_t>& dims) {
  write_bytes(os, "RAYF", 4);
  write_pod<std::uint32_t>(os, 1u);
  write_pod<std::uint32_t>(os, std::uint32_t(dims.size()));
  for (std::size_t d : dims) write_pod<std::uint64_t>(os, std::uint64_t(d));
}

inline std::vector<std::size_t> read_header(std::istream& is) {
  char magic[4];
  read_bytes(is, magic, 4, "magic");
  if (std::memcmp(magic, "RAYF", 4) != 0) throw error("bad RAYF magic");
  const auto version = read_pod<std::uint32_t>(is, "version");
  if (version != 1) throw error("unsupported RAYF version");
  const auto rank = read_pod<std::uint32_t>(is, "rank");
  std::vector<std::size_t> dims(rank);
  for (auto& d : dims)
    d = std::size_t(read_pod<std::uint64_t>(is, "dims"));
  return dims;
}

}  // namespace detail

template <typename T>
void write_rayf_tensor(std::ostream& os, const NdArray<T>& a) {
  detail::write_header(os, a.dims());
  for (std::size_t i = 0; i < a.numel(); ++i)
    detail::write_pod<float>(os, float(a[i]));
}

template <typename T>
void write_rayf_tensor(const std::string& path, const NdArray<T>& a) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw error("cannot open for writing: " + path);
  write_rayf_tensor(os, a);
}

inline Array read_rayf_tensor(std::istream& is) {
  Array a(detail::read_header(is));
  for (std::size_t i = 0; i < a.numel(); ++i)
    a[i] = double(detail::read_pod<float>(is, "payload"));
  return a;
}

inline Array read_rayf_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw error("cannot open for reading: " + path);
  return read_rayf_tensor(is);
}

// Pose records: rank-2 (n_poses, 12), f64 payload.
inline void write_rayf_poses(const std::string& path,
                             const std::vector<std::array<double, 12>>& poses) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw error("cannot open for writing: " + path);
  detail::write_header(os, {poses.size(), 12});
  for (const auto& p : poses)
    for (double v : p) detail::write_pod<double>(os, v);
}

inline std::vector<std::array<double, 12>> read_rayf_poses(
    const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw error("cannot open for reading: " + path);
  const auto dims = detail::read_header(is);
  if (dims.size() != 2 || dims[1] != 12) throw error("bad pose record shape");
  std::vector<std::array<double, 12>> poses(dims[0]);
  for (auto& p : poses)
    for (double& v : p) v = detail::read_pod<double>(is, "pose payload");
  return poses;
}

struct NamedTensor {
  std::string name;
  NdArray<float> values;
};

inline void write_rayf_checkpoint(const std::string& path,
                                  const std::vector<NamedTensor>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw error("cannot open for writing: " + path);
  detail::write_bytes(os, "RAYF", 4);
  detail::write_pod<std::uint32_t>(os, 1u);
  detail::write_pod<std::uint32_t>(os, std::uint32_t(tensors.size()));
  for (const auto& t : tensors) {
    detail::write_pod<std::uint32_t>(os, std::uint32_t(t.name.size()));
    detail::write_bytes(os, t.name.data(), t.name.size());
    detail::write_pod<std::uint32_t>(os, std::uint32_t(t.values.rank()));
    for (std::size_t d : t.values.dims())
      detail::write_pod<std::uint64_t>(os, std::uint64_t(d));
    for (std::size_t i = 0; i < t.values.numel(); ++i)
      detail::write_pod<float>(os, t.values[i]);
  }
}

inline std::vector<NamedTensor> read_rayf_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw error("cannot open for reading: " + path);
  char magic[4];
  detail::read_bytes(is, magic, 4, "magic");
  if (std::memcmp(magic, "RAYF", 4) != 0) throw error("bad RAYF magic");
  if (detail::read_pod<std::uint32_t>(is, "version") != 1)
    throw error("unsupported RAYF version");
  const auto n = detail::read_pod<std::uint32_t>(is, "record count");
  std::vector<NamedTensor> tensors(n);
  for (auto& t : tensors) {
    const auto name_len = detail::read_pod<std::uint32_t>(is, "name length");
    t.name.resize(name_len);
    detail::read_bytes(is, t.name.data(), name_len, "name");
    const auto rank = detail::read_pod<std::uint32_t>(is, "rank");
    std::vector<std::size_t> dims(rank);
    for (auto& d : dims)
      d = std::size_t(detail::read_pod<std::uint64_t>(is, "dims"));
    t.values = NdArray<float>(dims);
    for (std::size_t i = 0; i < t.values.numel(); ++i)
      t.values[i] = detail::read_pod<float>(is, "payload");
  }
  return tensors;
}

// PPM (P6, maxval 255) export with gamma-naive [0,1] -> [0,255] scaling.
inline void write_ppm(const std::string& path, const Array& image) {
  require_shape(image.rank() == 3 && image.dim(2) == 3,
                "write_ppm expects an (H, W, 3) image");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw error("cannot open for writing: " + path);
  os << "P6\n" << image.dim(1) << " " << image.dim(0) << "\n255\n";
  for (std::size_t i = 0; i < image.numel(); ++i) {
    const double v = std::clamp(image[i], 0.0, 1.0);
    const auto byte = static_cast<unsigned char>(std::lround(v * 255.0));
    os.put(char(byte));
  }
}

inline Array read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw error("cannot open for reading: " + path);
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255) throw error("unsupported PPM: " + path);
  is.get();  // single whitespace after header
  Array image({h, w, 3});
  for (std::size_t i = 0; i < image.numel(); ++i) {
    int c = is.get();
    if (c == EOF) throw error("truncated PPM: " + path);
    image[i] = double(c) / 255.0;
  }
  return image;
}

}  // namespace rayf
