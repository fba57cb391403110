#pragma once

// Multiscale Hessian (Frangi) vesselness for bright tubular structures.

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "qsm/volume.hpp"

namespace qsm {

struct FrangiParams {
  std::vector<double> scales_mm{0.5, 1.0, 1.5, 2.0};
  double alpha = 0.5;
  double beta = 0.5;
  double c_fraction = 0.5;  // c = c_fraction * max Hessian norm per scale
  // Fraction of the max vesselness over the mask. Blob cores reach about
  // exp(-2) of the tube response at beta = 0.5, so the cut sits above that.
  double threshold = 0.2;
};

namespace detail {

inline std::vector<double> gaussian_taps(double sigma_vox) {
  const int half = std::max(1, static_cast<int>(std::ceil(3.0 * sigma_vox)));
  std::vector<double> t(2 * half + 1);
  double s = 0.0;
  for (int i = -half; i <= half; ++i) s += t[i + half] = std::exp(-0.5 * i * i / (sigma_vox * sigma_vox));
  for (auto& v : t) v /= s;
  return t;
}

// Separable convolution along one axis with edge replication.
inline void convolve_axis(std::vector<double>& f, const Index3& d, int axis, const std::vector<double>& taps) {
  const long half = static_cast<long>(taps.size() / 2);
  const std::size_t stride = axis == 0 ? 1 : axis == 1 ? d[0] : d[0] * d[1];
  const std::size_t len = d[axis];
  const std::size_t lines = f.size() / len;
  std::vector<double> line(len);
  for (std::size_t l = 0; l < lines; ++l) {
    // base index of line l, enumerating the two other axes
    std::size_t base;
    if (axis == 0) {
      base = l * d[0];
    } else if (axis == 1) {
      base = (l % d[0]) + (l / d[0]) * d[0] * d[1];
    } else {
      base = l;
    }
    for (std::size_t i = 0; i < len; ++i) line[i] = f[base + i * stride];
    for (std::size_t i = 0; i < len; ++i) {
      double acc = 0.0;
      for (long k = -half; k <= half; ++k) {
        const long j = std::clamp(static_cast<long>(i) + k, 0L, static_cast<long>(len) - 1);
        acc += taps[static_cast<std::size_t>(k + half)] * line[static_cast<std::size_t>(j)];
      }
      f[base + i * stride] = acc;
    }
  }
}

}  // namespace detail

/// Frangi vesselness, maximized over scales. Bright tubes score high; blobs,
/// plates and dark tubes score near zero.
inline ScalarVolume frangi_vesselness(const ScalarVolume& img, const FrangiParams& p = {}) {
  const auto& g = img.grid();
  const auto& d = g.dims;
  const std::size_t nvox = g.size();
  ScalarVolume out(g);
  for (double sigma : p.scales_mm) {
    if (!(sigma > 0.0)) throw InvalidArgument("frangi: scales must be > 0");
    std::vector<double> f = img.values();
    for (int a = 0; a < 3; ++a) detail::convolve_axis(f, d, a, detail::gaussian_taps(sigma / g.spacing[a]));

    auto at = [&](long i, long j, long k) {
      i = std::clamp(i, 0L, static_cast<long>(d[0]) - 1);
      j = std::clamp(j, 0L, static_cast<long>(d[1]) - 1);
      k = std::clamp(k, 0L, static_cast<long>(d[2]) - 1);
      return f[static_cast<std::size_t>(i) + d[0] * (static_cast<std::size_t>(j) + d[1] * static_cast<std::size_t>(k))];
    };
    std::vector<Eigen::Vector3d> eig(nvox);
    double max_norm = 0.0;
    const double s2 = sigma * sigma;  // scale normalization
    for (std::size_t n = 0; n < nvox; ++n) {
      const auto c = g.coords(n);
      const long i = static_cast<long>(c[0]), j = static_cast<long>(c[1]), k = static_cast<long>(c[2]);
      const double h = at(i, j, k);
      const auto& sp = g.spacing;
      Eigen::Matrix3d hm;
      hm(0, 0) = (at(i + 1, j, k) - 2 * h + at(i - 1, j, k)) / (sp[0] * sp[0]);
      hm(1, 1) = (at(i, j + 1, k) - 2 * h + at(i, j - 1, k)) / (sp[1] * sp[1]);
      hm(2, 2) = (at(i, j, k + 1) - 2 * h + at(i, j, k - 1)) / (sp[2] * sp[2]);
      hm(0, 1) = hm(1, 0) = (at(i + 1, j + 1, k) - at(i + 1, j - 1, k) - at(i - 1, j + 1, k) +
                             at(i - 1, j - 1, k)) / (4 * sp[0] * sp[1]);
      hm(0, 2) = hm(2, 0) = (at(i + 1, j, k + 1) - at(i + 1, j, k - 1) - at(i - 1, j, k + 1) +
                             at(i - 1, j, k - 1)) / (4 * sp[0] * sp[2]);
      hm(1, 2) = hm(2, 1) = (at(i, j + 1, k + 1) - at(i, j + 1, k - 1) - at(i, j - 1, k + 1) +
                             at(i, j - 1, k - 1)) / (4 * sp[1] * sp[2]);
      hm *= s2;
      Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es;
      es.computeDirect(hm, Eigen::EigenvaluesOnly);
      Eigen::Vector3d l = es.eigenvalues();
      std::sort(l.data(), l.data() + 3, [](double a, double b) { return std::abs(a) < std::abs(b); });
      eig[n] = l;
      max_norm = std::max(max_norm, l.norm());
    }
    if (max_norm == 0.0) continue;
    const double cc = p.c_fraction * max_norm;
    for (std::size_t n = 0; n < nvox; ++n) {
      const auto& l = eig[n];
      if (l[1] >= 0.0 || l[2] >= 0.0) continue;  // bright tubes need two strongly negative curvatures
      const double ra = std::abs(l[1]) / std::abs(l[2]);
      const double rb = std::abs(l[0]) / std::sqrt(std::abs(l[1] * l[2]));
      const double s = l.norm();
      const double v = (1.0 - std::exp(-ra * ra / (2 * p.alpha * p.alpha))) *
                       std::exp(-rb * rb / (2 * p.beta * p.beta)) *
                       (1.0 - std::exp(-s * s / (2 * cc * cc)));
      out[n] = std::max(out[n], v);
    }
  }
  return out;
}

/// Vessel mask from an R2* map: vesselness above threshold * max over M.
/// Outside M the map is replaced by its mean over M so the mask edge does not
/// register as structure.
inline MaskVolume vessel_mask(const ScalarVolume& r2star, const MaskVolume& m, const FrangiParams& p = {}) {
  require_same_grid(r2star.grid(), m.grid(), "vessel_mask");
  MaskVolume out(m.grid());
  if (m.empty()) return out;
  const double fill = masked_mean(r2star, m);
  ScalarVolume img(r2star.grid(), Unit::PerSecond);
  for (std::size_t n = 0; n < img.size(); ++n) img[n] = m[n] ? r2star[n] : fill;
  const auto v = frangi_vesselness(img, p);
  double vmax = 0.0;
  for (std::size_t n = 0; n < v.size(); ++n)
    if (m[n]) vmax = std::max(vmax, v[n]);
  if (vmax == 0.0) return out;
  for (std::size_t n = 0; n < v.size(); ++n) out.set(n, m[n] && v[n] > p.threshold * vmax);
  return out;
}

}  // namespace qsm
