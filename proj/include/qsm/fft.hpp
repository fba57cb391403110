#pragma once

// Thin RAII layer over FFTW's real-to-complex 3D transforms with optional
// zero padding. Volumes are x-fastest; FFTW sees them as (z, y, x) row-major.

#include <fftw3.h>

#include <complex>
#include <cstring>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <vector>

#include "qsm/volume.hpp"

namespace qsm {

/// Smallest n' >= n whose prime factors are all <= 7.
inline std::size_t next_fast_size(std::size_t n) {
  if (n <= 1) return 1;
  for (std::size_t m = n;; ++m) {
    std::size_t r = m;
    for (std::size_t p : {2u, 3u, 5u, 7u})
      while (r % p == 0) r /= p;
    if (r == 1) return m;
  }
}

namespace detail {

template <typename T>
struct FftwFree {
  void operator()(T* p) const { fftw_free(p); }
};
using RealBuffer = std::unique_ptr<double, FftwFree<double>>;
using ComplexBuffer = std::unique_ptr<fftw_complex, FftwFree<fftw_complex>>;

struct PlanPair {
  fftw_plan forward = nullptr;
  fftw_plan inverse = nullptr;
};

// Plans are created once per size and never destroyed; FFTW planning is not
// thread-safe, execution with the new-array interface is.
inline PlanPair plans_for(const Index3& n) {
  static std::mutex mutex;
  static std::map<Index3, PlanPair> cache;
  std::lock_guard lock(mutex);
  if (auto it = cache.find(n); it != cache.end()) return it->second;
  const std::size_t real_size = n[0] * n[1] * n[2];
  const std::size_t cplx_size = (n[0] / 2 + 1) * n[1] * n[2];
  RealBuffer r(fftw_alloc_real(real_size));
  ComplexBuffer c(fftw_alloc_complex(cplx_size));
  const int dims[3] = {static_cast<int>(n[2]), static_cast<int>(n[1]), static_cast<int>(n[0])};
  PlanPair p;
  p.forward = fftw_plan_dft_r2c(3, dims, r.get(), c.get(), FFTW_ESTIMATE);
  p.inverse = fftw_plan_dft_c2r(3, dims, c.get(), r.get(), FFTW_ESTIMATE);
  if (!p.forward || !p.inverse) throw Error("FFTW planning failed");
  cache.emplace(n, p);
  return p;
}

}  // namespace detail

using Spectrum = std::vector<std::complex<double>>;

/// A volume grid embedded (top-left aligned) in a zero-padded FFT box.
class FourierDomain {
 public:
  FourierDomain() = default;
  FourierDomain(VoxelGrid grid, Index3 padded) : grid_(std::move(grid)), padded_(padded) {
    for (int a = 0; a < 3; ++a)
      if (padded_[a] < grid_.dims[a]) throw InvalidArgument("padded size smaller than grid");
  }

  /// Pads each axis to at least dims + 2*margin[a], rounded up to a fast size.
  static FourierDomain with_margin(const VoxelGrid& grid, const Index3& margin) {
    Index3 p{};
    for (int a = 0; a < 3; ++a) p[a] = next_fast_size(grid.dims[a] + 2 * margin[a]);
    return {grid, p};
  }

  /// Pads each axis to a fast size of at least factor * dims.
  static FourierDomain scaled(const VoxelGrid& grid, std::size_t factor) {
    Index3 p{};
    for (int a = 0; a < 3; ++a) p[a] = next_fast_size(grid.dims[a] * factor);
    return {grid, p};
  }

  [[nodiscard]] const VoxelGrid& grid() const { return grid_; }
  [[nodiscard]] const Index3& padded() const { return padded_; }
  [[nodiscard]] std::size_t padded_size() const { return padded_[0] * padded_[1] * padded_[2]; }
  [[nodiscard]] std::size_t half_x() const { return padded_[0] / 2 + 1; }
  [[nodiscard]] std::size_t spectrum_size() const { return half_x() * padded_[1] * padded_[2]; }

  friend bool operator==(const FourierDomain&, const FourierDomain&) = default;

  /// Transform a padded-box real array (padded_size values).
  [[nodiscard]] Spectrum forward_padded(std::span<const double> box) const {
    const auto plans = detail::plans_for(padded_);
    detail::RealBuffer in(fftw_alloc_real(padded_size()));
    detail::ComplexBuffer out(fftw_alloc_complex(spectrum_size()));
    std::memcpy(in.get(), box.data(), sizeof(double) * padded_size());
    fftw_execute_dft_r2c(plans.forward, in.get(), out.get());
    Spectrum s(spectrum_size());
    std::memcpy(reinterpret_cast<void*>(s.data()), out.get(), sizeof(fftw_complex) * s.size());
    return s;
  }

  /// Zero-pad a grid volume and transform it.
  [[nodiscard]] Spectrum forward(std::span<const double> vol) const {
    if (vol.size() != grid_.size()) throw GridMismatch("forward FFT: volume size mismatch");
    std::vector<double> box(padded_size(), 0.0);
    const auto& d = grid_.dims;
    for (std::size_t k = 0; k < d[2]; ++k)
      for (std::size_t j = 0; j < d[1]; ++j)
        std::memcpy(&box[padded_[0] * (j + padded_[1] * k)], &vol[d[0] * (j + d[1] * k)],
                    sizeof(double) * d[0]);
    return forward_padded(box);
  }

  /// Inverse transform into the full padded box, normalized.
  [[nodiscard]] std::vector<double> inverse_padded(const Spectrum& s) const {
    const auto plans = detail::plans_for(padded_);
    detail::ComplexBuffer in(fftw_alloc_complex(spectrum_size()));
    detail::RealBuffer out(fftw_alloc_real(padded_size()));
    std::memcpy(in.get(), reinterpret_cast<const void*>(s.data()),
                sizeof(fftw_complex) * s.size());
    fftw_execute_dft_c2r(plans.inverse, in.get(), out.get());
    std::vector<double> box(padded_size());
    const double scale = 1.0 / static_cast<double>(padded_size());
    for (std::size_t n = 0; n < box.size(); ++n) box[n] = out.get()[n] * scale;
    return box;
  }

  /// Inverse transform cropped back to the grid.
  [[nodiscard]] std::vector<double> inverse(const Spectrum& s) const {
    const auto box = inverse_padded(s);
    const auto& d = grid_.dims;
    std::vector<double> vol(grid_.size());
    for (std::size_t k = 0; k < d[2]; ++k)
      for (std::size_t j = 0; j < d[1]; ++j)
        std::memcpy(&vol[d[0] * (j + d[1] * k)], &box[padded_[0] * (j + padded_[1] * k)],
                    sizeof(double) * d[0]);
    return vol;
  }

  /// Multiply by a real transfer function (spectrum_size entries) in k-space.
  [[nodiscard]] std::vector<double> filter(std::span<const double> vol,
                                           std::span<const double> transfer) const {
    auto s = forward(vol);
    for (std::size_t n = 0; n < s.size(); ++n) s[n] *= transfer[n];
    return inverse(s);
  }

  /// Signed integer frequency index along axis a for position q of the padded box.
  [[nodiscard]] long signed_freq(int a, std::size_t q) const {
    const auto n = static_cast<long>(padded_[a]);
    const auto qq = static_cast<long>(q);
    return qq <= n / 2 ? qq : qq - n;
  }

  /// Calls fn(spectrum_index, kx, ky, kz) with spatial frequencies in cycles/mm.
  template <typename Fn>
  void for_each_frequency(Fn&& fn) const {
    const std::size_t hx = half_x();
    std::size_t n = 0;
    for (std::size_t k = 0; k < padded_[2]; ++k) {
      const double kz = static_cast<double>(signed_freq(2, k)) /
                        (static_cast<double>(padded_[2]) * grid_.spacing[2]);
      for (std::size_t j = 0; j < padded_[1]; ++j) {
        const double ky = static_cast<double>(signed_freq(1, j)) /
                          (static_cast<double>(padded_[1]) * grid_.spacing[1]);
        for (std::size_t i = 0; i < hx; ++i, ++n) {
          const double kx = static_cast<double>(i) /
                            (static_cast<double>(padded_[0]) * grid_.spacing[0]);
          fn(n, kx, ky, kz);
        }
      }
    }
  }

 private:
  VoxelGrid grid_;
  Index3 padded_{1, 1, 1};
};

}  // namespace qsm
