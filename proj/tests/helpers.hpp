#pragma once

#include <cmath>
#include <algorithm>
#include <random>

#include "qsm/volume.hpp"

namespace qsm::test {

inline VoxelGrid cube(std::size_t n, double spacing = 1.0) { return VoxelGrid({n, n, n}, {spacing, spacing, spacing}); }

/// Voxels whose centre lies within `radius` voxels of `c` (index units).
inline MaskVolume ball(const VoxelGrid& g, Vec3 c, double radius) {
  MaskVolume m(g);
  for (std::size_t n = 0; n < g.size(); ++n) {
    const auto q = g.coords(n);
    const double dx = double(q[0]) - c[0], dy = double(q[1]) - c[1], dz = double(q[2]) - c[2];
    m.set(n, dx * dx + dy * dy + dz * dz <= radius * radius);
  }
  return m;
}

inline ScalarVolume random_volume(const VoxelGrid& g, unsigned seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  ScalarVolume v(g);
  for (std::size_t n = 0; n < v.size(); ++n) v[n] = u(rng);
  return v;
}

inline double max_abs_diff(const ScalarVolume& a, const ScalarVolume& b, const MaskVolume* m = nullptr) {
  double e = 0.0;
  for (std::size_t n = 0; n < a.size(); ++n)
    if (!m || (*m)[n]) e = std::max(e, std::abs(a[n] - b[n]));
  return e;
}

inline double pearson(const ScalarVolume& a, const ScalarVolume& b, const MaskVolume& m) {
  double ma = 0, mb = 0, c = 0;
  for (std::size_t n = 0; n < a.size(); ++n)
    if (m[n]) {
      ma += a[n];
      mb += b[n];
      ++c;
    }
  ma /= c;
  mb /= c;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t n = 0; n < a.size(); ++n)
    if (m[n]) {
      sab += (a[n] - ma) * (b[n] - mb);
      saa += (a[n] - ma) * (a[n] - ma);
      sbb += (b[n] - mb) * (b[n] - mb);
    }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace qsm::test
