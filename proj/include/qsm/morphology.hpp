#pragma once

// Exact Euclidean distance transform (physical mm) and the mask boundary
// layer / erosion built on top of it.

#include <limits>
#include <vector>

#include "qsm/volume.hpp"

namespace qsm {

namespace detail {

// Squared distance transform of one line, sampled with stride, using the
// lower envelope of parabolas (Felzenszwalb & Huttenlocher). `w2` is the
// squared sample spacing.
inline void edt_1d(double* f, std::size_t n, std::size_t stride, double w2,
                   std::vector<double>& buf, std::vector<double>& z, std::vector<std::size_t>& v) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  buf.resize(n);
  z.resize(n + 1);
  v.resize(n);
  for (std::size_t q = 0; q < n; ++q) buf[q] = f[q * stride];

  std::size_t k = 0;
  std::size_t first = n;
  for (std::size_t q = 0; q < n; ++q)
    if (buf[q] < inf) {
      first = q;
      break;
    }
  if (first == n) return;  // no finite samples on this line

  v[0] = first;
  z[0] = -inf;
  z[1] = inf;
  for (std::size_t q = first + 1; q < n; ++q) {
    if (buf[q] == inf) continue;
    const double fq = buf[q] + w2 * static_cast<double>(q) * static_cast<double>(q);
    auto intersect = [&](std::size_t p) {
      const auto vp = static_cast<double>(p);
      return (fq - (buf[p] + w2 * vp * vp)) / (2.0 * w2 * (static_cast<double>(q) - vp));
    };
    double s = intersect(v[k]);
    while (s <= z[k]) s = intersect(v[--k]);  // z[0] = -inf stops the walk
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }

  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < static_cast<double>(q)) ++k;
    const double d = static_cast<double>(q) - static_cast<double>(v[k]);
    f[q * stride] = w2 * d * d + buf[v[k]];
  }
}


// Squared distance transform in place over a box of dims d (x fastest).
inline void edt_squared(std::vector<double>& f, const Index3& d, const Vec3& sp) {
  std::vector<double> buf, z;
  std::vector<std::size_t> v;
  const std::size_t sy = d[0], sz = d[0] * d[1];
  for (std::size_t k = 0; k < d[2]; ++k)
    for (std::size_t j = 0; j < d[1]; ++j) edt_1d(&f[sy * j + sz * k], d[0], 1, sp[0] * sp[0], buf, z, v);
  for (std::size_t k = 0; k < d[2]; ++k)
    for (std::size_t i = 0; i < d[0]; ++i) edt_1d(&f[i + sz * k], d[1], sy, sp[1] * sp[1], buf, z, v);
  for (std::size_t j = 0; j < d[1]; ++j)
    for (std::size_t i = 0; i < d[0]; ++i) edt_1d(&f[i + sy * j], d[2], sz, sp[2] * sp[2], buf, z, v);
}

}  // namespace detail

/// Distance (mm) from each voxel of `m` to the center of the nearest voxel
/// not in `m`. Voxels beyond the grid count as outside. Voxels outside `m`
/// get 0.
inline ScalarVolume distance_to_outside(const MaskVolume& m) {
  const auto& g = m.grid();
  const Index3 pd{g.dims[0] + 2, g.dims[1] + 2, g.dims[2] + 2};
  auto padded = [&](std::size_t i, std::size_t j, std::size_t k) {
    return (i + 1) + pd[0] * ((j + 1) + pd[1] * (k + 1));
  };
  std::vector<double> f(pd[0] * pd[1] * pd[2], 0.0);
  for (std::size_t k = 0; k < g.dims[2]; ++k)
    for (std::size_t j = 0; j < g.dims[1]; ++j)
      for (std::size_t i = 0; i < g.dims[0]; ++i)
        if (m.at(i, j, k)) f[padded(i, j, k)] = std::numeric_limits<double>::infinity();
  detail::edt_squared(f, pd, g.spacing);
  ScalarVolume out(g, Unit::Dimensionless);
  for (std::size_t k = 0; k < g.dims[2]; ++k)
    for (std::size_t j = 0; j < g.dims[1]; ++j)
      for (std::size_t i = 0; i < g.dims[0]; ++i) out.at(i, j, k) = std::sqrt(f[padded(i, j, k)]);
  return out;
}

/// Distance in mm from each voxel to the nearest voxel of m (zero on m).
inline ScalarVolume distance_to_mask(const MaskVolume& m) {
  if (m.empty()) throw InvalidArgument("distance_to_mask: empty mask");
  const auto& g = m.grid();
  std::vector<double> f(g.size());
  for (std::size_t n = 0; n < g.size(); ++n)
    f[n] = m[n] ? 0.0 : std::numeric_limits<double>::infinity();
  detail::edt_squared(f, g.dims, g.spacing);
  for (auto& x : f) x = std::sqrt(x);
  return {g, std::move(f), Unit::Dimensionless};
}

/// Voxels of `m` with at least one face neighbour outside `m` (grid border
/// counts as outside).
inline MaskVolume face_shell(const MaskVolume& m) {
  const auto& g = m.grid();
  MaskVolume out(g);
  const auto& d = g.dims;
  for (std::size_t k = 0; k < d[2]; ++k)
    for (std::size_t j = 0; j < d[1]; ++j)
      for (std::size_t i = 0; i < d[0]; ++i) {
        if (!m.at(i, j, k)) continue;
        const bool edge = i == 0 || j == 0 || k == 0 || i + 1 == d[0] || j + 1 == d[1] ||
                          k + 1 == d[2] || !m.at(i - 1, j, k) || !m.at(i + 1, j, k) ||
                          !m.at(i, j - 1, k) || !m.at(i, j + 1, k) || !m.at(i, j, k - 1) ||
                          !m.at(i, j, k + 1);
        if (edge) out.set(g.index(i, j, k), true);
      }
  return out;
}

/// Boundary layer of thickness r (mm): the face shell plus every voxel of `m`
/// whose Euclidean distance to the nearest outside voxel is at most r.
inline MaskVolume boundary_layer(const MaskVolume& m, double r) {
  if (!(r >= 0.0)) throw InvalidArgument("boundary_layer: r must be >= 0");
  MaskVolume out = face_shell(m);
  if (r == 0.0) return out;
  const auto dist = distance_to_outside(m);
  for (std::size_t n = 0; n < m.size(); ++n)
    if (m[n] && dist[n] <= r) out.set(n, true);
  return out;
}

/// M minus its boundary layer of thickness r.
inline MaskVolume erode_mask(const MaskVolume& m, double r) {
  return mask_minus(m, boundary_layer(m, r));
}

}  // namespace qsm
