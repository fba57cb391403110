#pragma once

// Background field removal: projection onto dipole fields (PDF) and
// variable-radius SMV filtering with deconvolution (VSHARP).

#include <cmath>
#include <string>
#include <vector>

#include "json.hpp"
#include "qsm/kernels.hpp"
#include "qsm/morphology.hpp"
#include "qsm/volume.hpp"

namespace qsm {

/// Local field estimate plus the mask it is valid on.
struct BfrResult {
  ScalarVolume local;  // Hz, zero outside mask
  MaskVolume mask;
  std::string method;
  nlohmann::json parameters = nlohmann::json::object();
};

class SolverDivergence : public Error {
 public:
  SolverDivergence(const std::string& what, std::vector<double> trace)
      : Error(what), trace_(std::move(trace)) {}
  [[nodiscard]] const std::vector<double>& trace() const { return trace_; }

 private:
  std::vector<double> trace_;
};

struct PdfParams {
  int max_iterations = 100;
  double tolerance = 1e-6;  // relative normal-equation residual
  Vec3 b0_dir{0.0, 0.0, 1.0};
};

/// Projection onto dipole fields.
///
/// Fits the field inside M with dipole sources confined to the complement of
/// M by CG on the normal equations of min ||W M (b - d * chi_out)||, and
/// returns what is left inside M.
inline BfrResult pdf(const ScalarVolume& total, const MaskVolume& m, const ScalarVolume& weight,
                     const PdfParams& p = {}) {
  require_same_grid(total.grid(), m.grid(), "pdf");
  require_same_grid(total.grid(), weight.grid(), "pdf");
  if (p.max_iterations < 1) throw InvalidArgument("pdf: iterations must be >= 1");
  const auto& g = total.grid();
  const std::size_t nvox = g.size();
  const auto kernel = DipoleKernel::padded_for(g, p.b0_dir);
  const auto& dom = kernel.domain();
  const auto& dk = kernel.spectrum();

  std::vector<double> w2(nvox);
  for (std::size_t n = 0; n < nvox; ++n) w2[n] = m[n] ? weight[n] * weight[n] : 0.0;
  auto restrict_out = [&](std::vector<double>& v) {
    for (std::size_t n = 0; n < nvox; ++n)
      if (m[n]) v[n] = 0.0;
  };
  auto data_residual = [&](const std::vector<double>& fit) {
    double s = 0.0;
    for (std::size_t n = 0; n < nvox; ++n) s += w2[n] * (total[n] - fit[n]) * (total[n] - fit[n]);
    return std::sqrt(s);
  };

  std::vector<double> wb(nvox);
  for (std::size_t n = 0; n < nvox; ++n) wb[n] = w2[n] * total[n];
  std::vector<double> rhs = dom.filter(wb, dk);
  restrict_out(rhs);

  // CG on D^T W^2 D x = D^T W^2 b. The normal residual drives the stop test;
  // the weighted data residual, which CGNR never increases in exact
  // arithmetic, is the divergence monitor.
  std::vector<double> x(nvox, 0.0), fit(nvox, 0.0), r = rhs, d = rhs;
  double rr = 0.0;
  for (double v : r) rr += v * v;
  const double rr0 = rr;
  const double data0 = data_residual(fit);
  std::vector<double> trace;
  int rising = 0;
  int iterations = 0;
  for (int it = 0; it < p.max_iterations && rr > 0.0; ++it) {
    const auto dd = dom.filter(d, dk);
    std::vector<double> q(nvox);
    for (std::size_t n = 0; n < nvox; ++n) q[n] = w2[n] * dd[n];
    q = dom.filter(q, dk);
    restrict_out(q);
    double dq = 0.0;
    for (std::size_t n = 0; n < nvox; ++n) dq += d[n] * q[n];
    if (!(dq > 0.0)) break;
    const double alpha = rr / dq;
    double rr_new = 0.0;
    for (std::size_t n = 0; n < nvox; ++n) {
      x[n] += alpha * d[n];
      fit[n] += alpha * dd[n];
      r[n] -= alpha * q[n];
      rr_new += r[n] * r[n];
    }
    ++iterations;
    const double rel = data0 > 0.0 ? data_residual(fit) / data0 : 0.0;
    if (!trace.empty() && rel > trace.back()) {
      if (++rising >= 5)
        throw SolverDivergence("pdf: residual increased for 5 consecutive iterations", trace);
    } else {
      rising = 0;
    }
    trace.push_back(rel);
    if (std::sqrt(rr_new / rr0) < p.tolerance) break;
    const double beta = rr_new / rr;
    rr = rr_new;
    for (std::size_t n = 0; n < nvox; ++n) d[n] = r[n] + beta * d[n];
  }

  BfrResult out{ScalarVolume(g, Unit::Hz), m, "pdf",
                {{"iterations", iterations}, {"max_iterations", p.max_iterations},
                 {"tolerance", p.tolerance}}};
  for (std::size_t n = 0; n < nvox; ++n) out.local[n] = m[n] ? total[n] - fit[n] : 0.0;
  return out;
}

struct VsharpParams {
  double r_max = 5.0;  // mm
  double r_min = 1.0;  // mm
  int n_radii = 5;
  double tsvd_threshold = 0.05;
};

/// Variable-radius SHARP: each voxel takes (delta - S_r) b with the largest
/// radius whose sphere still fits inside M, then the result is deconvolved
/// with the largest kernel by truncated k-space division.
inline BfrResult vsharp(const ScalarVolume& total, const MaskVolume& m, const VsharpParams& p = {}) {
  require_same_grid(total.grid(), m.grid(), "vsharp");
  if (!(p.r_min > 0.0) || !(p.r_max > p.r_min))
    throw InvalidArgument("vsharp: require r_max > r_min > 0");
  if (p.n_radii < 2) throw InvalidArgument("vsharp: n_radii must be >= 2");
  const auto& g = total.grid();
  const std::size_t nvox = g.size();
  const auto masked = apply_mask(total, m);

  const auto out_mask = erode_mask(m, p.r_min);
  ScalarVolume m_float(g);
  for (std::size_t n = 0; n < nvox; ++n) m_float[n] = m[n] ? 1.0 : 0.0;

  // A voxel takes the largest radius whose whole kernel footprint, including
  // partial-volume taps, lies inside M. Voxels of the output mask that no
  // sphere fits fall back to the smallest radius.
  std::vector<double> filtered(nvox, 0.0);
  MaskVolume assigned(g);
  for (int level = 0; level < p.n_radii; ++level) {
    const double r = p.r_max - (p.r_max - p.r_min) * level / (p.n_radii - 1);
    const auto kernel = SphericalKernel::for_grid(g, r);
    const auto sm = smv_apply(masked, kernel);
    const auto cover = smv_apply(m_float, kernel);
    const bool last = level == p.n_radii - 1;
    for (std::size_t n = 0; n < nvox; ++n)
      if (m[n] && !assigned[n] && (cover[n] > 1.0 - 1e-9 || (last && out_mask[n]))) {
        filtered[n] = masked[n] - sm[n];
        assigned.set(n, true);
      }
  }

  const auto big = SphericalKernel::for_grid(g, p.r_max);
  const auto& dom = big.domain();
  auto spec = dom.forward(filtered);
  const auto& kappa = big.spectrum();
  for (std::size_t n = 0; n < spec.size(); ++n) {
    const double h = 1.0 - kappa[n];
    spec[n] = std::abs(h) < p.tsvd_threshold ? 0.0 : spec[n] / h;
  }
  const auto deconv = dom.inverse(spec);
  BfrResult out{ScalarVolume(g, Unit::Hz), out_mask, "vsharp",
                {{"r_max_mm", p.r_max}, {"r_min_mm", p.r_min}, {"n_radii", p.n_radii},
                 {"tsvd_threshold", p.tsvd_threshold}}};
  for (std::size_t n = 0; n < nvox; ++n) out.local[n] = out_mask[n] ? deconv[n] : 0.0;
  return out;
}

}  // namespace qsm
