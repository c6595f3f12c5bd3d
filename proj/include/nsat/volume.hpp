#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "nsat/errors.hpp"

namespace nsat {

// 3D voxel grid with physical spacing. Values are Hounsfield units before
// normalization, dimensionless in [-1,1] after. Storage is x-fastest.
struct Volume {
  std::array<std::size_t, 3> dims{0, 0, 0};    // nx, ny, nz
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm per voxel
  std::vector<double> voxels;

  Volume() = default;
  Volume(std::size_t nx, std::size_t ny, std::size_t nz,
         std::array<double, 3> sp = {1.0, 1.0, 1.0}, double fill = 0.0)
      : dims{nx, ny, nz}, spacing(sp), voxels(nx * ny * nz, fill) {
    check();
  }

  std::size_t count() const { return dims[0] * dims[1] * dims[2]; }
  bool cubic() const { return dims[0] == dims[1] && dims[1] == dims[2]; }

  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
    return (z * dims[1] + y) * dims[0] + x;
  }
  double& at(std::size_t x, std::size_t y, std::size_t z) {
    return voxels[index(x, y, z)];
  }
  double at(std::size_t x, std::size_t y, std::size_t z) const {
    return voxels[index(x, y, z)];
  }

  void check() const {
    for (double s : spacing)
      if (!(s > 0.0)) throw ConfigError("volume: spacing must be positive");
    if (voxels.size() != count())
      throw DimensionError("volume: voxel count does not match dims");
  }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

inline void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

// Cursor over a byte buffer that reports the offset of any defect.
struct ByteReader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) const {
    if (pos + n > buf.size())
      throw ParseError(std::string("truncated while reading ") + what, pos);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(buf[pos++]);
  }
  float f32(const char* what) {
    std::uint32_t bits = u32(what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  double f64(const char* what) {
    need(8, what);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i)
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 8;
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());
  return buf;
}

inline void write_file_bytes(const std::string& path, const std::string& buf) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace detail

// Volume file: magic "VOX3", u32 version=1, u32 nx,ny,nz, f32 sx,sy,sz,
// then nx*ny*nz little-endian f32 voxels, x-fastest.
inline void write_volume(const std::string& path, const Volume& v) {
  v.check();
  std::string buf;
  buf.reserve(28 + 4 * v.count());
  buf += "VOX3";
  detail::put_u32(buf, 1);
  for (std::size_t d : v.dims) detail::put_u32(buf, static_cast<std::uint32_t>(d));
  for (double s : v.spacing) detail::put_f32(buf, static_cast<float>(s));
  for (double x : v.voxels) detail::put_f32(buf, static_cast<float>(x));
  detail::write_file_bytes(path, buf);
}

inline Volume read_volume(const std::string& path) {
  const std::string buf = detail::read_file_bytes(path);
  detail::ByteReader r{buf};
  if (r.bytes(4, "magic") != "VOX3") throw ParseError("bad magic, expected VOX3", 0);
  std::uint32_t version = r.u32("version");
  if (version != 1)
    throw ParseError("unsupported volume version " + std::to_string(version), 4);
  Volume v;
  for (int i = 0; i < 3; ++i) v.dims[i] = r.u32("dims");
  for (int i = 0; i < 3; ++i) v.spacing[i] = r.f32("spacing");
  v.voxels.resize(v.count());
  for (std::size_t i = 0; i < v.voxels.size(); ++i) v.voxels[i] = r.f32("voxels");
  if (r.pos != buf.size())
    throw ParseError("trailing bytes after voxel data", r.pos);
  v.check();
  return v;
}

}  // namespace nsat
