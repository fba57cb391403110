#pragma once

// Total field, fidelity weight and R2* from multi-echo complex data.

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "qsm/fft.hpp"
#include "qsm/volume.hpp"

namespace qsm {

inline double wrap_to_pi(double x) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  x = std::fmod(x + std::numbers::pi, two_pi);
  if (x < 0) x += two_pi;
  return x - std::numbers::pi;
}

namespace detail {

// Face-neighbour graph Laplacian restricted to the mask (Neumann at the
// mask boundary): (L psi)_v = sum over in-mask neighbours u of psi_v - psi_u.
inline void masked_laplacian(const VoxelGrid& g, const MaskVolume& m, const std::vector<double>& x,
                             std::vector<double>& y) {
  const auto& d = g.dims;
  const std::size_t stride[3] = {1, d[0], d[0] * d[1]};
  y.assign(x.size(), 0.0);
  for (std::size_t n = 0; n < x.size(); ++n) {
    if (!m[n]) continue;
    const auto c = g.coords(n);
    double acc = 0.0;
    for (int a = 0; a < 3; ++a) {
      if (c[a] > 0 && m[n - stride[a]]) acc += x[n] - x[n - stride[a]];
      if (c[a] + 1 < d[a] && m[n + stride[a]]) acc += x[n] - x[n + stride[a]];
    }
    y[n] = acc;
  }
}

}  // namespace detail

/// Residual 2*pi jumps between face neighbours inside the mask (|diff| > pi).
inline std::size_t count_phase_jumps(const ScalarVolume& phase, const MaskVolume& m) {
  const auto& g = phase.grid();
  const auto& d = g.dims;
  const std::size_t stride[3] = {1, d[0], d[0] * d[1]};
  std::size_t jumps = 0;
  for (std::size_t n = 0; n < phase.size(); ++n) {
    if (!m[n]) continue;
    const auto c = g.coords(n);
    for (int a = 0; a < 3; ++a)
      if (c[a] + 1 < d[a] && m[n + stride[a]] &&
          std::abs(phase[n + stride[a]] - phase[n]) > std::numbers::pi)
        ++jumps;
  }
  return jumps;
}

/// Laplacian (least-squares) spatial phase unwrapping inside a mask.
///
/// Solves the discrete Poisson equation whose right-hand side is the
/// divergence of the wrapped phase gradient: an FFT Poisson solve gives the
/// starting point, conjugate gradients on the masked (Neumann) Laplacian
/// refine it, and the result is snapped to the input's 2*pi congruence class.
/// Voxels outside the mask are returned unchanged.
inline ScalarVolume unwrap_phase(const ScalarVolume& phase, const MaskVolume& m) {
  require_same_grid(phase.grid(), m.grid(), "unwrap_phase");
  if (m.empty()) throw InvalidArgument("unwrap_phase: empty mask");
  const auto& g = phase.grid();
  const auto& d = g.dims;
  const std::size_t stride[3] = {1, d[0], d[0] * d[1]};
  const std::size_t nvox = g.size();

  // rhs = -sum_u wrap(phi_u - phi_v) over in-mask neighbours u
  std::vector<double> rhs(nvox, 0.0);
  for (std::size_t n = 0; n < nvox; ++n) {
    if (!m[n]) continue;
    const auto c = g.coords(n);
    for (int a = 0; a < 3; ++a) {
      if (c[a] > 0 && m[n - stride[a]]) rhs[n] -= wrap_to_pi(phase[n - stride[a]] - phase[n]);
      if (c[a] + 1 < d[a] && m[n + stride[a]]) rhs[n] -= wrap_to_pi(phase[n + stride[a]] - phase[n]);
    }
  }

  // FFT Poisson solve on the padded periodic box: -lap psi = rhs.
  const auto domain = FourierDomain::scaled(g, 2);
  auto spec = domain.forward(rhs);
  const auto& p = domain.padded();
  {
    std::size_t n = 0;
    for (std::size_t k = 0; k < p[2]; ++k)
      for (std::size_t j = 0; j < p[1]; ++j)
        for (std::size_t i = 0; i < domain.half_x(); ++i, ++n) {
          const double ev = 6.0 - 2.0 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(p[0])) -
                            2.0 * std::cos(2.0 * std::numbers::pi * static_cast<double>(j) / static_cast<double>(p[1])) -
                            2.0 * std::cos(2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(p[2]));
          spec[n] = ev > 1e-12 ? spec[n] / ev : 0.0;
        }
  }
  std::vector<double> x = domain.inverse(spec);
  for (std::size_t n = 0; n < nvox; ++n)
    if (!m[n]) x[n] = 0.0;

  // CG refinement on the masked Laplacian (consistent, positive semidefinite).
  std::vector<double> r(nvox), q, dir;
  detail::masked_laplacian(g, m, x, q);
  double rr = 0.0, bb = 0.0;
  for (std::size_t n = 0; n < nvox; ++n) {
    r[n] = m[n] ? rhs[n] - q[n] : 0.0;
    rr += r[n] * r[n];
    bb += rhs[n] * rhs[n];
  }
  dir = r;
  const double tol2 = 1e-24 * std::max(bb, 1e-300);
  for (int it = 0; it < 2000 && rr > tol2; ++it) {
    detail::masked_laplacian(g, m, dir, q);
    double pq = 0.0;
    for (std::size_t n = 0; n < nvox; ++n) pq += dir[n] * q[n];
    if (pq <= 0.0) break;
    const double alpha = rr / pq;
    double rr_new = 0.0;
    for (std::size_t n = 0; n < nvox; ++n) {
      x[n] += alpha * dir[n];
      r[n] -= alpha * q[n];
      rr_new += r[n] * r[n];
    }
    const double beta = rr_new / rr;
    rr = rr_new;
    for (std::size_t n = 0; n < nvox; ++n) dir[n] = r[n] + beta * dir[n];
  }

  // Remove the free constant so an already-unwrapped input maps to itself,
  // then snap to the input's congruence class.
  double shift = 0.0;
  std::size_t cnt = 0;
  for (std::size_t n = 0; n < nvox; ++n)
    if (m[n]) {
      shift += x[n] - phase[n];
      ++cnt;
    }
  shift /= static_cast<double>(cnt);
  constexpr double two_pi = 2.0 * std::numbers::pi;
  ScalarVolume out = phase;
  out.set_unit(Unit::Radian);
  for (std::size_t n = 0; n < nvox; ++n)
    if (m[n]) out[n] = phase[n] + two_pi * std::round((x[n] - shift - phase[n]) / two_pi);
  return out;
}

struct FieldFitResult {
  ScalarVolume field;     // Hz
  ScalarVolume weight;    // W, unit mean over the mask
  ScalarVolume residual;  // Hz-equivalent RMS fit error
  ScalarVolume phase0;    // rad, receive phase offset
  std::string estimator = "wls-linear-phase";
};

/// Magnitude-weighted least-squares fit of phi_j = phi0 - 2 pi b TE_j per voxel.
///
/// The echo-to-echo phase difference is spatially unwrapped to predict each
/// echo's phase, which fixes the temporal 2*pi ambiguity before the fit. The
/// remaining global ambiguity of 1/dTE Hz is resolved by centering the mean
/// difference phase over the mask in (-pi, pi].
inline FieldFitResult fit_field(const MultiEchoVolume& s, const MaskVolume& m) {
  require_same_grid(s.grid(), m.grid(), "fit_field");
  const std::size_t ne = s.echoes();
  if (ne < 2) throw InvalidArgument("fit_field: at least two echoes required");
  const auto& g = s.grid();
  const auto& te = s.echo_times();
  const std::size_t nvox = g.size();
  constexpr double pi = std::numbers::pi;

  bool uniform = true;
  const double dte = te[1] - te[0];
  for (std::size_t j = 2; j < ne; ++j)
    if (std::abs((te[j] - te[j - 1]) - dte) > 1e-9 * dte) uniform = false;

  // Echo-difference phase (wrapped), combined over all consecutive pairs when
  // spacing is uniform.
  ScalarVolume dphi(g, Unit::Radian);
  for (std::size_t n = 0; n < nvox; ++n) {
    std::complex<double> acc{0.0, 0.0};
    const std::size_t pairs = uniform ? ne - 1 : 1;
    for (std::size_t j = 0; j < pairs; ++j) acc += s.echo(j + 1)[n] * std::conj(s.echo(j)[n]);
    dphi[n] = std::arg(acc);
  }
  MaskVolume valid(g);
  for (std::size_t n = 0; n < nvox; ++n) {
    double e = 0.0;
    for (std::size_t j = 0; j < ne; ++j) e += std::norm(s.echo(j)[n]);
    valid.set(n, m[n] && e > 0.0);
  }

  FieldFitResult out{ScalarVolume(g, Unit::Hz), ScalarVolume(g), ScalarVolume(g, Unit::Hz),
                     ScalarVolume(g, Unit::Radian)};
  if (valid.empty()) return out;

  auto dphi_u = unwrap_phase(dphi, valid);
  double mean = 0.0;
  std::size_t cnt = 0;
  for (std::size_t n = 0; n < nvox; ++n)
    if (valid[n]) {
      mean += dphi_u[n];
      ++cnt;
    }
  mean /= static_cast<double>(cnt);
  const double k = std::round(mean / (2.0 * pi));
  for (std::size_t n = 0; n < nvox; ++n)
    if (valid[n]) dphi_u[n] -= 2.0 * pi * k;

  std::vector<double> raw_w(nvox, 0.0);
  double wsum = 0.0;
  std::size_t mcount = 0;
  std::vector<double> phi(ne), w(ne);
  for (std::size_t n = 0; n < nvox; ++n) {
    if (m[n]) ++mcount;
    if (!valid[n]) continue;
    const double phi1 = std::arg(s.echo(0)[n]);
    double sw = 0.0, st = 0.0, sp = 0.0;
    for (std::size_t j = 0; j < ne; ++j) {
      const auto v = s.echo(j)[n];
      const double pred = phi1 + dphi_u[n] * (te[j] - te[0]) / dte;
      const double raw = std::arg(v);
      phi[j] = raw + 2.0 * pi * std::round((pred - raw) / (2.0 * pi));
      w[j] = std::norm(v);
      sw += w[j];
      st += w[j] * te[j];
      sp += w[j] * phi[j];
    }
    const double tbar = st / sw, pbar = sp / sw;
    double stt = 0.0, stp = 0.0;
    for (std::size_t j = 0; j < ne; ++j) {
      stt += w[j] * (te[j] - tbar) * (te[j] - tbar);
      stp += w[j] * (te[j] - tbar) * (phi[j] - pbar);
    }
    if (stt <= 0.0) continue;
    const double slope = stp / stt;
    const double phi0 = pbar - slope * tbar;
    double rss = 0.0;
    for (std::size_t j = 0; j < ne; ++j) rss += w[j] * std::pow(phi[j] - (phi0 + slope * te[j]), 2);
    out.field[n] = -slope / (2.0 * pi);
    out.phase0[n] = wrap_to_pi(phi0);
    out.residual[n] = std::sqrt(rss / stt) / (2.0 * pi);
    raw_w[n] = std::sqrt(stt);
    wsum += raw_w[n];
  }
  const double norm = wsum > 0.0 ? static_cast<double>(mcount) / wsum : 0.0;
  for (std::size_t n = 0; n < nvox; ++n) out.weight[n] = raw_w[n] * norm;
  return out;
}

struct R2StarResult {
  ScalarVolume r2star;  // 1/s
  MaskVolume valid;
  std::string estimator;
};

/// Log-linear least-squares fit of ln|S| against TE for one voxel.
inline double r2star_loglinear(std::span<const double> te, std::span<const double> mag) {
  double st = 0, sl = 0, stt = 0, stl = 0;
  const auto n = static_cast<double>(te.size());
  for (std::size_t j = 0; j < te.size(); ++j) {
    const double l = std::log(mag[j]);
    st += te[j];
    sl += l;
    stt += te[j] * te[j];
    stl += te[j] * l;
  }
  return -(n * stl - st * sl) / (n * stt - st * st);
}

/// Auto-regression on linear operations: with Simpson integrals
/// a_i = dTE/3 (s_i + 4 s_{i+1} + s_{i+2}) and differences d_i = s_i - s_{i+2},
/// T2* = (sum a^2 + dTE/3 sum a d) / (dTE/3 sum d^2 + sum a d).
inline double r2star_arlo(double dte, std::span<const double> mag) {
  double aa = 0, ad = 0, dd = 0;
  for (std::size_t i = 0; i + 2 < mag.size(); ++i) {
    const double a = dte / 3.0 * (mag[i] + 4.0 * mag[i + 1] + mag[i + 2]);
    const double d = mag[i] - mag[i + 2];
    aa += a * a;
    ad += a * d;
    dd += d * d;
  }
  const double num = dte / 3.0 * dd + ad;
  const double den = aa + dte / 3.0 * ad;
  return den > 0.0 ? num / den : 0.0;
}

/// Monoexponential decay rate of |S| per voxel inside the mask. ARLO needs
/// at least three equally spaced echoes; otherwise a log-linear fit is used.
inline R2StarResult fit_r2star(const MultiEchoVolume& s, const MaskVolume& m) {
  require_same_grid(s.grid(), m.grid(), "fit_r2star");
  const auto& te = s.echo_times();
  const std::size_t ne = s.echoes();
  if (ne < 2) throw InvalidArgument("fit_r2star: at least two echoes required");
  bool uniform = ne >= 3;
  const double dte = te[1] - te[0];
  for (std::size_t j = 2; j < ne && uniform; ++j)
    if (std::abs((te[j] - te[j - 1]) - dte) > 1e-9 * dte) uniform = false;

  R2StarResult out{ScalarVolume(s.grid(), Unit::PerSecond), MaskVolume(s.grid()),
                   uniform ? "arlo" : "log-linear"};
  std::vector<double> mag(ne);
  for (std::size_t n = 0; n < s.grid().size(); ++n) {
    if (!m[n]) continue;
    bool ok = true;
    for (std::size_t j = 0; j < ne; ++j) {
      mag[j] = std::abs(s.echo(j)[n]);
      if (!(mag[j] > 0.0)) ok = false;
    }
    if (!ok) continue;
    const double r = uniform ? r2star_arlo(dte, mag) : r2star_loglinear(te, mag);
    out.r2star[n] = std::isfinite(r) ? std::max(r, 0.0) : 0.0;
    out.valid.set(n, true);
  }
  return out;
}

}  // namespace qsm
