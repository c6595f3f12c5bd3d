#pragma once

#include <array>
#include <cmath>
#include <cstdint>

#include "nsat/errors.hpp"
#include "nsat/rng.hpp"
#include "nsat/volume.hpp"

namespace nsat {

// Clip Hounsfield units to [-1024, 400], then map linearly onto [-1, 1].
inline Volume hu_normalize(const Volume& v) {
  Volume out = v;
  for (double& x : out.voxels) {
    double c = std::min(std::max(x, -1024.0), 400.0);
    x = (c + 1024.0) / 712.0 - 1.0;
  }
  return out;
}

namespace detail {

// Voxel i holds the value at physical position (i + 0.5) * spacing.
// Trilinear sample at a physical point, clamped to the grid.
inline double sample_trilinear(const Volume& v, double px, double py, double pz) {
  const auto grid = [&](double p, double sp, std::size_t n, std::size_t& i0,
                        std::size_t& i1, double& f) {
    double u = p / sp - 0.5;
    double fl = std::floor(u);
    f = u - fl;
    if (fl < 0.0) {
      i0 = 0;
      i1 = 0;
      f = 0.0;
    } else if (fl >= static_cast<double>(n - 1)) {
      i0 = n - 1;
      i1 = n - 1;
      f = 0.0;
    } else {
      i0 = static_cast<std::size_t>(fl);
      i1 = i0 + 1;
    }
  };
  std::size_t x0, x1, y0, y1, z0, z1;
  double fx, fy, fz;
  grid(px, v.spacing[0], v.dims[0], x0, x1, fx);
  grid(py, v.spacing[1], v.dims[1], y0, y1, fy);
  grid(pz, v.spacing[2], v.dims[2], z0, z1, fz);

  const double c000 = v.at(x0, y0, z0), c100 = v.at(x1, y0, z0);
  const double c010 = v.at(x0, y1, z0), c110 = v.at(x1, y1, z0);
  const double c001 = v.at(x0, y0, z1), c101 = v.at(x1, y0, z1);
  const double c011 = v.at(x0, y1, z1), c111 = v.at(x1, y1, z1);

  const double c00 = c000 * (1.0 - fx) + c100 * fx;
  const double c10 = c010 * (1.0 - fx) + c110 * fx;
  const double c01 = c001 * (1.0 - fx) + c101 * fx;
  const double c11 = c011 * (1.0 - fx) + c111 * fx;
  const double c0 = c00 * (1.0 - fy) + c10 * fy;
  const double c1 = c01 * (1.0 - fy) + c11 * fy;
  return c0 * (1.0 - fz) + c1 * fz;
}

inline std::size_t round_dim(double x) {
  // round half away from zero, minimum 1
  double r = std::floor(x + 0.5);
  return r < 1.0 ? 1 : static_cast<std::size_t>(r);
}

}  // namespace detail

// Resample onto an isotropic grid (default 1mm). Output voxel j samples the
// source at physical position (j + 0.5) * target, with edge clamping.
inline Volume resample_trilinear(const Volume& v,
                                 std::array<double, 3> target = {1.0, 1.0, 1.0}) {
  v.check();
  for (double t : target)
    if (!(t > 0.0)) throw ConfigError("resample: target spacing must be positive");
  Volume out;
  for (int i = 0; i < 3; ++i) {
    out.dims[i] = detail::round_dim(static_cast<double>(v.dims[i]) *
                                    v.spacing[i] / target[i]);
    out.spacing[i] = target[i];
  }
  out.voxels.resize(out.count());
  for (std::size_t z = 0; z < out.dims[2]; ++z)
    for (std::size_t y = 0; y < out.dims[1]; ++y)
      for (std::size_t x = 0; x < out.dims[0]; ++x)
        out.at(x, y, z) = detail::sample_trilinear(
            v, (static_cast<double>(x) + 0.5) * target[0],
            (static_cast<double>(y) + 0.5) * target[1],
            (static_cast<double>(z) + 0.5) * target[2]);
  return out;
}

// Cube of edge^3 voxels centered on the voxel nearest to the given physical
// point; out-of-volume regions are filled with -1 (normalized air).
inline Volume crop_patch(const Volume& v, std::array<double, 3> center_mm,
                         std::size_t edge) {
  if (edge == 0) throw ConfigError("crop_patch: edge must be positive");
  v.check();
  // voxel centers sit at (i + 0.5) * spacing, so the nearest voxel to a
  // physical point is simply floor(p / spacing)
  std::array<long long, 3> c{};
  for (int i = 0; i < 3; ++i)
    c[i] = static_cast<long long>(std::floor(center_mm[i] / v.spacing[i]));
  Volume out(edge, edge, edge, {v.spacing[0], v.spacing[1], v.spacing[2]}, -1.0);
  const long long half = static_cast<long long>(edge) / 2;
  for (std::size_t z = 0; z < edge; ++z)
    for (std::size_t y = 0; y < edge; ++y)
      for (std::size_t x = 0; x < edge; ++x) {
        const long long sx = c[0] - half + static_cast<long long>(x);
        const long long sy = c[1] - half + static_cast<long long>(y);
        const long long sz = c[2] - half + static_cast<long long>(z);
        if (sx < 0 || sy < 0 || sz < 0 ||
            sx >= static_cast<long long>(v.dims[0]) ||
            sy >= static_cast<long long>(v.dims[1]) ||
            sz >= static_cast<long long>(v.dims[2]))
          continue;
        out.at(x, y, z) = v.at(static_cast<std::size_t>(sx),
                               static_cast<std::size_t>(sy),
                               static_cast<std::size_t>(sz));
      }
  return out;
}

// Stochastic augmentation parameters: right-angle rotation about one axis,
// optional left-right flip, sub-voxel center shift in [-1,1].
struct AugmentSpec {
  std::size_t axis = 0;         // 0=x, 1=y, 2=z
  unsigned quarter_turns = 0;   // 0..3 (0/90/180/270 degrees)
  bool flip_lr = false;
  std::array<double, 3> shift{0.0, 0.0, 0.0};
  std::uint64_t seed = 0;

  void validate() const {
    if (axis > 2) throw ConfigError("augment: axis must be 0, 1 or 2");
    if (quarter_turns > 3) throw ConfigError("augment: rotation must be 0..3 quarter turns");
    for (double s : shift)
      if (!(s >= -1.0 && s <= 1.0))
        throw ConfigError("augment: shift must lie in [-1,1] voxels");
  }

  static AugmentSpec random_draw(std::mt19937_64& rng) {
    AugmentSpec a;
    a.axis = static_cast<std::size_t>(uniform_index(rng, 3));
    a.quarter_turns = static_cast<unsigned>(uniform_index(rng, 4));
    a.flip_lr = uniform_index(rng, 2) == 1;
    for (int i = 0; i < 3; ++i) a.shift[i] = uniform_in(rng, -1.0, 1.0);
    return a;
  }
};

namespace detail {

inline Volume rot90_once(const Volume& v, std::size_t axis) {
  const std::size_t n = v.dims[0];
  Volume out(n, n, n, v.spacing);
  for (std::size_t z = 0; z < n; ++z)
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        double val;
        switch (axis) {
          case 0: val = v.at(x, z, n - 1 - y); break;
          case 1: val = v.at(n - 1 - z, y, x); break;
          default: val = v.at(y, n - 1 - x, z); break;
        }
        out.at(x, y, z) = val;
      }
  return out;
}

}  // namespace detail

// Deterministic given the spec: rotation, then flip, then sub-voxel shift via
// trilinear resampling with edge clamping.
inline Volume augment(const Volume& patch, const AugmentSpec& spec) {
  spec.validate();
  if (!patch.cubic())
    throw ContractError("augment: cubic patch required, dims differ");
  Volume out = patch;
  for (unsigned i = 0; i < spec.quarter_turns; ++i)
    out = detail::rot90_once(out, spec.axis);
  if (spec.flip_lr) {
    Volume f = out;
    const std::size_t n = out.dims[0];
    for (std::size_t z = 0; z < n; ++z)
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x)
          f.at(x, y, z) = out.at(n - 1 - x, y, z);
    out = f;
  }
  if (spec.shift[0] != 0.0 || spec.shift[1] != 0.0 || spec.shift[2] != 0.0) {
    Volume s = out;
    const std::size_t n = out.dims[0];
    for (std::size_t z = 0; z < n; ++z)
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x)
          s.at(x, y, z) = detail::sample_trilinear(
              out,
              (static_cast<double>(x) + 0.5 - spec.shift[0]) * out.spacing[0],
              (static_cast<double>(y) + 0.5 - spec.shift[1]) * out.spacing[1],
              (static_cast<double>(z) + 0.5 - spec.shift[2]) * out.spacing[2]);
    out = s;
  }
  return out;
}

}  // namespace nsat
