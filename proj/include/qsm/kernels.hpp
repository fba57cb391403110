#pragma once

// Spherical mean value (SMV) and dipole operators.

#include <cmath>
#include <vector>

#include "qsm/fft.hpp"
#include "qsm/volume.hpp"

namespace qsm {

/// Gyromagnetic ratio of 1H, Hz/T.
inline constexpr double kGamma = 42.5775e6;

/// Default padding added to the half voxel when sizing the smallest SMV sphere.
inline constexpr double kMinimalRadiusEps = 0.05;

/// Smallest SMV radius that is not a discrete delta: half the finest voxel
/// dimension plus eps.
inline double minimal_radius(const VoxelGrid& grid, double eps = kMinimalRadiusEps) {
  if (!(eps > 0.0)) throw InvalidArgument("minimal_radius: eps must be > 0");
  return 0.5 * grid.min_spacing() + eps;
}

/// Normalized spherical averaging kernel of radius R (mm).
///
/// Voxels are weighted by the fraction of their volume inside the sphere:
/// fully inside voxels get 1, fully outside 0, and straddling voxels are
/// supersampled on a 20^3 sub-grid. Weights are then normalized to sum to 1.
class SphericalKernel {
 public:
  struct Tap {
    long di, dj, dk;
    double weight;
  };

  SphericalKernel() = default;

  SphericalKernel(FourierDomain domain, double radius) : domain_(std::move(domain)), radius_(radius) {
    if (!(radius > 0.0)) throw InvalidArgument("SMV radius must be > 0");
    build_taps();
    build_spectrum();
  }

  /// Kernel on a domain padded enough to avoid circular wrap.
  static SphericalKernel for_grid(const VoxelGrid& grid, double radius) {
    Index3 margin{};
    for (int a = 0; a < 3; ++a)
      margin[a] = static_cast<std::size_t>(std::ceil(radius / grid.spacing[a])) + 1;
    return {FourierDomain::with_margin(grid, margin), radius};
  }

  [[nodiscard]] double radius() const { return radius_; }
  [[nodiscard]] const FourierDomain& domain() const { return domain_; }
  [[nodiscard]] const VoxelGrid& grid() const { return domain_.grid(); }
  [[nodiscard]] const std::vector<Tap>& taps() const { return taps_; }
  /// Real transfer function kappa over the half spectrum.
  [[nodiscard]] const std::vector<double>& spectrum() const { return spectrum_; }

 private:
  void build_taps() {
    const auto& sp = domain_.grid().spacing;
    long ext[3];
    for (int a = 0; a < 3; ++a) ext[a] = static_cast<long>(std::ceil(radius_ / sp[a] + 0.5));
    constexpr int split = 20;
    const double r2 = radius_ * radius_;
    double total = 0.0;
    for (long dk = -ext[2]; dk <= ext[2]; ++dk)
      for (long dj = -ext[1]; dj <= ext[1]; ++dj)
        for (long di = -ext[0]; di <= ext[0]; ++di) {
          const double c[3] = {std::abs(static_cast<double>(di)) * sp[0],
                               std::abs(static_cast<double>(dj)) * sp[1],
                               std::abs(static_cast<double>(dk)) * sp[2]};
          double near2 = 0.0, far2 = 0.0;
          for (int a = 0; a < 3; ++a) {
            const double lo = std::max(c[a] - 0.5 * sp[a], 0.0);
            const double hi = c[a] + 0.5 * sp[a];
            near2 += lo * lo;
            far2 += hi * hi;
          }
          double w = 0.0;
          if (far2 <= r2) {
            w = 1.0;
          } else if (near2 <= r2) {
            int inside = 0;
            for (int sk = 0; sk < split; ++sk) {
              const double z = c[2] + sp[2] * ((sk + 0.5) / split - 0.5);
              for (int sj = 0; sj < split; ++sj) {
                const double y = c[1] + sp[1] * ((sj + 0.5) / split - 0.5);
                for (int si = 0; si < split; ++si) {
                  const double x = c[0] + sp[0] * ((si + 0.5) / split - 0.5);
                  if (x * x + y * y + z * z <= r2) ++inside;
                }
              }
            }
            w = static_cast<double>(inside) / (split * split * split);
          }
          if (w > 0.0) {
            taps_.push_back({di, dj, dk, w});
            total += w;
          }
        }
    for (auto& t : taps_) t.weight /= total;
  }

  void build_spectrum() {
    const auto& p = domain_.padded();
    std::vector<double> box(domain_.padded_size(), 0.0);
    auto wrap = [](long d, std::size_t n) {
      const auto nn = static_cast<long>(n);
      return static_cast<std::size_t>(((d % nn) + nn) % nn);
    };
    for (const auto& t : taps_)
      box[wrap(t.di, p[0]) + p[0] * (wrap(t.dj, p[1]) + p[1] * wrap(t.dk, p[2]))] += t.weight;
    const auto s = domain_.forward_padded(box);
    spectrum_.resize(s.size());
    for (std::size_t n = 0; n < s.size(); ++n) spectrum_[n] = s[n].real();
  }

  FourierDomain domain_;
  double radius_ = 0.0;
  std::vector<Tap> taps_;
  std::vector<double> spectrum_;
};

/// S_R b = F^-1{ F{b} kappa_R }.
inline ScalarVolume smv_apply(const ScalarVolume& b, const SphericalKernel& k) {
  require_same_grid(b.grid(), k.grid(), "smv_apply");
  return {b.grid(), k.domain().filter(b.data(), k.spectrum()), b.unit()};
}

/// Same operator evaluated by direct spatial summation with zero extension
/// outside the grid. Only voxels within the kernel footprint of a nonzero
/// input voxel are written, so untouched voxels stay exactly zero. Intended
/// for small radii.
inline ScalarVolume smv_apply_direct(const ScalarVolume& b, const SphericalKernel& k) {
  require_same_grid(b.grid(), k.grid(), "smv_apply_direct");
  const auto& g = b.grid();
  const auto& d = g.dims;
  ScalarVolume out(g, b.unit());
  for (std::size_t n = 0; n < b.size(); ++n) {
    const double v = b[n];
    if (v == 0.0) continue;
    const auto c = g.coords(n);
    for (const auto& t : k.taps()) {
      // the kernel is symmetric, so scattering equals gathering
      const long i = static_cast<long>(c[0]) + t.di;
      const long j = static_cast<long>(c[1]) + t.dj;
      const long kk = static_cast<long>(c[2]) + t.dk;
      if (i < 0 || j < 0 || kk < 0 || i >= static_cast<long>(d[0]) ||
          j >= static_cast<long>(d[1]) || kk >= static_cast<long>(d[2]))
        continue;
      out[g.index(static_cast<std::size_t>(i), static_cast<std::size_t>(j),
                  static_cast<std::size_t>(kk))] += t.weight * v;
    }
  }
  return out;
}

/// Unit-dipole field response in k-space: D(k) = 1/3 - (k.b0)^2/|k|^2, D(0) = 0.
class DipoleKernel {
 public:
  DipoleKernel() = default;
  explicit DipoleKernel(FourierDomain domain, Vec3 b0_dir = {0.0, 0.0, 1.0})
      : domain_(std::move(domain)), b0_dir_(b0_dir) {
    const double norm =
        std::sqrt(b0_dir_[0] * b0_dir_[0] + b0_dir_[1] * b0_dir_[1] + b0_dir_[2] * b0_dir_[2]);
    if (!(norm > 0.0)) throw InvalidArgument("B0 direction must be nonzero");
    for (auto& c : b0_dir_) c /= norm;
    spectrum_.resize(domain_.spectrum_size());
    domain_.for_each_frequency([&](std::size_t n, double kx, double ky, double kz) {
      const double k2 = kx * kx + ky * ky + kz * kz;
      if (k2 == 0.0) {
        spectrum_[n] = 0.0;
        return;
      }
      const double kb = kx * b0_dir_[0] + ky * b0_dir_[1] + kz * b0_dir_[2];
      spectrum_[n] = 1.0 / 3.0 - kb * kb / k2;
    });
  }

  /// Kernel on a box padded to twice the grid, the default for forward simulation.
  static DipoleKernel padded_for(const VoxelGrid& grid, Vec3 b0_dir = {0.0, 0.0, 1.0}) {
    return DipoleKernel(FourierDomain::scaled(grid, 2), b0_dir);
  }

  [[nodiscard]] const FourierDomain& domain() const { return domain_; }
  [[nodiscard]] const VoxelGrid& grid() const { return domain_.grid(); }
  [[nodiscard]] const Vec3& b0_direction() const { return b0_dir_; }
  [[nodiscard]] const std::vector<double>& spectrum() const { return spectrum_; }

 private:
  FourierDomain domain_;
  Vec3 b0_dir_{0.0, 0.0, 1.0};
  std::vector<double> spectrum_;
};

enum class FieldUnit { Relative, Hz };

/// Field induced by susceptibility chi (ppm). Relative output is in ppm of B0;
/// Hz output is scaled by gamma * B0.
inline ScalarVolume dipole_convolve(const ScalarVolume& chi, const DipoleKernel& d, double b0_tesla,
                                    FieldUnit unit = FieldUnit::Hz) {
  require_same_grid(chi.grid(), d.grid(), "dipole_convolve");
  auto field = d.domain().filter(chi.data(), d.spectrum());
  if (unit == FieldUnit::Relative) return {chi.grid(), std::move(field), Unit::Ppm};
  const double scale = kGamma * b0_tesla * 1e-6;
  for (auto& v : field) v *= scale;
  return {chi.grid(), std::move(field), Unit::Hz};
}

}  // namespace qsm
