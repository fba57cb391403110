#pragma once

// Nonlinear morphology-enabled dipole inversion (MEDI) in three variants:
// plain dipole forward model, and SMV-filtered forward model on either the
// eroded mask or the full mask.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "qsm/kernels.hpp"
#include "qsm/morphology.hpp"
#include "qsm/volume.hpp"

namespace qsm {

enum class MediVariant { Medi, MediSmv, MediMsmv };

inline std::string_view to_string(MediVariant v) {
  switch (v) {
    case MediVariant::Medi: return "medi";
    case MediVariant::MediSmv: return "medi-smv";
    case MediVariant::MediMsmv: return "medi-msmv";
  }
  return "medi";
}

inline MediVariant variant_from_string(std::string_view s) {
  if (s == "medi") return MediVariant::Medi;
  if (s == "medi-smv") return MediVariant::MediSmv;
  if (s == "medi-msmv") return MediVariant::MediMsmv;
  throw InvalidArgument("unknown MEDI variant '" + std::string(s) + "'");
}

struct MediParams {
  MediVariant variant = MediVariant::Medi;
  double lambda1 = 100.0;  // TV weight, per mask voxel
  double lambda2 = 100.0;  // CSF uniformity weight, per mask voxel
  double r1 = 5.0;         // mm, SMV radius of the filtered forward model
  int outer_iterations = 10;
  int cg_iterations = 100;
  double cg_tolerance = 1e-2;
  double tolerance = 1e-2;  // relative update stop
  double edge_fraction = 0.3;
  double mu = 1e-6;         // L1 smoothing
  Vec3 b0_dir{0.0, 0.0, 1.0};

  [[nodiscard]] std::vector<std::string> violations() const {
    std::vector<std::string> v;
    if (!(lambda1 > 0.0)) v.emplace_back("lambda1 must be > 0");
    if (!(lambda2 >= 0.0)) v.emplace_back("lambda2 must be >= 0");
    if (!(r1 > 0.0)) v.emplace_back("r1 must be > 0");
    if (outer_iterations < 1 || cg_iterations < 1) v.emplace_back("iteration counts must be >= 1");
    if (!(cg_tolerance > 0.0) || !(tolerance > 0.0)) v.emplace_back("tolerances must be > 0");
    if (!(edge_fraction > 0.0 && edge_fraction < 1.0)) v.emplace_back("edge fraction must be in (0,1)");
    if (!(mu > 0.0)) v.emplace_back("mu must be > 0");
    return v;
  }
  void validate() const {
    if (auto v = violations(); !v.empty()) throw InvalidArgument(v.front());
  }
};

struct InversionInputs {
  ScalarVolume field;   // Hz, prepared for the variant
  ScalarVolume weight;  // W
  MaskVolume mask;      // full mask M (the SMV forward model references it)
  MaskVolume edges;     // M_G: 1 where TV applies
  MaskVolume csf;
  double b0 = 3.0;         // T
  double delta_te = 2.6e-3;  // s, Hz -> rad scale of the exponential data term
};

/// Edge mask: 1 on M except for the ceil(fraction * |M|) voxels with the
/// strongest magnitude gradient (only voxels with a nonzero gradient qualify).
inline MaskVolume build_gradient_mask(const ScalarVolume& magnitude, const MaskVolume& m, double edge_fraction) {
  require_same_grid(magnitude.grid(), m.grid(), "build_gradient_mask");
  if (!(edge_fraction > 0.0 && edge_fraction < 1.0))
    throw InvalidArgument("edge fraction must be in (0,1)");
  const auto& g = m.grid();
  const auto& d = g.dims;
  std::vector<std::pair<double, std::size_t>> grad;
  for (std::size_t n = 0; n < g.size(); ++n) {
    if (!m[n]) continue;
    const auto c = g.coords(n);
    const double here = magnitude[n];
    double s = 0.0;
    for (int a = 0; a < 3; ++a) {
      Index3 q = c;
      if (q[a] + 1 < d[a]) ++q[a];
      const std::size_t nn = g.index(q[0], q[1], q[2]);
      const double next = m[nn] ? magnitude[nn] : 0.0;
      const double diff = (next - here) / g.spacing[a];
      s += diff * diff;
    }
    if (s > 0.0) grad.emplace_back(std::sqrt(s), n);
  }
  MaskVolume out = m;
  const auto quota = static_cast<std::size_t>(std::ceil(edge_fraction * static_cast<double>(m.count())));
  const std::size_t k = std::min(quota, grad.size());
  std::partial_sort(grad.begin(), grad.begin() + static_cast<long>(k), grad.end(),
                    [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
  for (std::size_t i = 0; i < k; ++i) out.set(grad[i].second, false);
  return out;
}

inline double csf_stats(const ScalarVolume& chi, const MaskVolume& csf) {
  require_same_grid(chi.grid(), csf.grid(), "csf_stats");
  if (csf.empty()) throw InvalidArgument("empty CSF mask; set lambda2 = 0 to disable the CSF term");
  return masked_mean(chi, csf);
}

struct MediIteration {
  int iteration = 0;
  double data_cost = 0.0, tv_cost = 0.0, csf_cost = 0.0, total = 0.0;
  double step_norm = 0.0;
  double step_length = 0.0;
  int cg_iterations = 0;
};

inline void to_json(nlohmann::json& j, const MediIteration& it) {
  j = {{"iteration", it.iteration}, {"data_cost", it.data_cost}, {"tv_cost", it.tv_cost},
       {"csf_cost", it.csf_cost},   {"total", it.total},         {"step_norm", it.step_norm},
       {"step_length", it.step_length}, {"cg_iterations", it.cg_iterations}};
}

class InversionDiverged : public Error {
 public:
  InversionDiverged(const std::string& what, std::vector<MediIteration> d)
      : Error(what), diagnostics_(std::move(d)) {}
  [[nodiscard]] const std::vector<MediIteration>& diagnostics() const { return diagnostics_; }

 private:
  std::vector<MediIteration> diagnostics_;
};

/// The variant's objective and its derivatives, on a fixed grid.
class MediProblem {
 public:
  MediProblem(InversionInputs in, const MediParams& p) : in_(std::move(in)), p_(p) {
    p_.validate();
    const auto& g = in_.field.grid();
    require_same_grid(g, in_.weight.grid(), "medi");
    require_same_grid(g, in_.mask.grid(), "medi");
    require_same_grid(g, in_.edges.grid(), "medi");
    require_same_grid(g, in_.csf.grid(), "medi");
    if (in_.mask.empty()) throw InvalidArgument("medi: empty mask");
    if (!(in_.b0 > 0.0) || !(in_.delta_te > 0.0)) throw InvalidArgument("medi: B0 and dTE must be > 0");
    solve_mask_ = p_.variant == MediVariant::MediSmv ? erode_mask(in_.mask, p_.r1) : in_.mask;
    if (solve_mask_.empty()) throw InvalidArgument("medi: mask vanishes after erosion");
    in_.csf = mask_and(in_.csf, solve_mask_);
    if (p_.lambda2 > 0.0 && in_.csf.empty())
      throw InvalidArgument("empty CSF mask; set lambda2 = 0 to disable the CSF term");
    Index3 margin{};
    for (int a = 0; a < 3; ++a) margin[a] = g.dims[a] / 4;
    dipole_ = DipoleKernel(FourierDomain::with_margin(g, margin), p_.b0_dir);
    if (p_.variant != MediVariant::Medi) smv_ = SphericalKernel::for_grid(g, p_.r1);
    phase_scale_ = 2.0 * std::numbers::pi * in_.delta_te * kGamma * in_.b0 * 1e-6;  // rad per ppm
    const double nm = static_cast<double>(in_.mask.count());
    tv_weight_ = p_.lambda1 / nm;
    csf_weight_ = p_.lambda2 / nm;
    target_.resize(g.size());
    w2_.resize(g.size());
    for (std::size_t n = 0; n < g.size(); ++n) {
      target_[n] = 2.0 * std::numbers::pi * in_.delta_te * in_.field[n];
      w2_[n] = solve_mask_[n] ? in_.weight[n] * in_.weight[n] : 0.0;
    }
  }

  [[nodiscard]] const MaskVolume& solve_mask() const { return solve_mask_; }
  [[nodiscard]] const VoxelGrid& grid() const { return in_.field.grid(); }
  [[nodiscard]] const MediParams& params() const { return p_; }
  [[nodiscard]] const InversionInputs& inputs() const { return in_; }

  /// Forward model in radians: phase_scale * F chi, unmasked.
  [[nodiscard]] std::vector<double> forward(const std::vector<double>& chi) const {
    auto f = dipole_.domain().filter(chi, dipole_.spectrum());
    if (smv_) {
      std::vector<double> masked(f.size());
      for (std::size_t n = 0; n < f.size(); ++n) masked[n] = in_.mask[n] ? f[n] : 0.0;
      const auto s = smv_->domain().filter(masked, smv_->spectrum());
      for (std::size_t n = 0; n < f.size(); ++n) f[n] -= s[n];
    }
    for (auto& v : f) v *= phase_scale_;
    return f;
  }

  /// Adjoint of forward().
  [[nodiscard]] std::vector<double> adjoint(const std::vector<double>& y) const {
    std::vector<double> u = y;
    if (smv_) {
      const auto s = smv_->domain().filter(y, smv_->spectrum());
      for (std::size_t n = 0; n < u.size(); ++n) u[n] -= in_.mask[n] ? s[n] : 0.0;
    }
    auto f = dipole_.domain().filter(u, dipole_.spectrum());
    for (auto& v : f) v *= phase_scale_;
    return f;
  }

  /// ||W (e^{i target} - e^{i A chi})||^2 over the solve mask.
  [[nodiscard]] double data_cost(const std::vector<double>& chi) const {
    const auto a = forward(chi);
    double s = 0.0;
    for (std::size_t n = 0; n < a.size(); ++n)
      if (w2_[n] > 0.0) s += 2.0 * w2_[n] * (1.0 - std::cos(a[n] - target_[n]));
    return s;
  }

  [[nodiscard]] std::vector<double> data_gradient(const std::vector<double>& chi) const {
    const auto a = forward(chi);
    std::vector<double> r(a.size(), 0.0);
    for (std::size_t n = 0; n < a.size(); ++n)
      if (w2_[n] > 0.0) r[n] = 2.0 * w2_[n] * std::sin(a[n] - target_[n]);
    auto g = adjoint(r);
    restrict(g);
    return g;
  }

  /// Smoothed anisotropic TV over edge-masked forward differences, unweighted.
  [[nodiscard]] double tv_cost(const std::vector<double>& chi) const {
    double s = 0.0;
    for_each_difference(chi, [&](std::size_t n, int a, double diff) {
      if (tv_active(n, a)) s += std::sqrt(diff * diff + p_.mu);
    });
    return s;
  }

  [[nodiscard]] double csf_cost(const std::vector<double>& chi) const {
    if (in_.csf.empty()) return 0.0;
    const double mean = csf_mean(chi);
    double s = 0.0;
    for (std::size_t n = 0; n < chi.size(); ++n)
      if (in_.csf[n]) s += (chi[n] - mean) * (chi[n] - mean);
    return s;
  }

  [[nodiscard]] double total_cost(const std::vector<double>& chi) const {
    return data_cost(chi) + tv_weight_ * tv_cost(chi) + csf_weight_ * csf_cost(chi);
  }

  [[nodiscard]] double csf_mean(const std::vector<double>& chi) const {
    double s = 0.0;
    std::size_t c = 0;
    for (std::size_t n = 0; n < chi.size(); ++n)
      if (in_.csf[n]) {
        s += chi[n];
        ++c;
      }
    return c ? s / static_cast<double>(c) : 0.0;
  }

  [[nodiscard]] double tv_weight() const { return tv_weight_; }
  [[nodiscard]] double csf_weight() const { return csf_weight_; }

  /// Gradient of total_cost, restricted to the solve mask.
  [[nodiscard]] std::vector<double> gradient(const std::vector<double>& chi) const {
    const auto& g = grid();
    auto grad = data_gradient(chi);
    const double mean = csf_mean(chi);
    for_each_difference(chi, [&](std::size_t n, int a, double dv) {
      if (!tv_active(n, a)) return;
      const double flux = tv_weight_ * dv / std::sqrt(dv * dv + p_.mu) / g.spacing[a];
      grad[n] -= flux;
      grad[neighbor(n, a)] += flux;
    });
    for (std::size_t n = 0; n < chi.size(); ++n)
      if (in_.csf[n]) grad[n] += 2.0 * csf_weight_ * (chi[n] - mean);
    restrict(grad);
    return grad;
  }

  /// One Gauss-Newton system: H dx = -grad with lagged TV diffusivity.
  /// Returns the step and the number of CG iterations used.
  std::pair<std::vector<double>, int> newton_step(const std::vector<double>& chi) const {
    const auto& g = grid();
    const std::size_t nvox = g.size();
    // lagged diffusivity per axis, zero where TV is off
    std::vector<std::array<double, 3>> diff(nvox, {0.0, 0.0, 0.0});
    for_each_difference(chi, [&](std::size_t n, int a, double dv) {
      if (tv_active(n, a)) diff[n][a] = 1.0 / std::sqrt(dv * dv + p_.mu);
    });

    auto tv_operator = [&](const std::vector<double>& x, std::vector<double>& out) {
      // out += grad^T (P grad x)
      for_each_difference(x, [&](std::size_t n, int a, double dv) {
        const double flux = diff[n][a] * dv / g.spacing[a];
        if (flux == 0.0) return;
        out[n] -= flux;
        out[neighbor(n, a)] += flux;
      });
    };
    const auto grad = gradient(chi);

    auto hessian = [&](const std::vector<double>& x) {
      auto a = forward(x);
      for (std::size_t n = 0; n < nvox; ++n) a[n] *= 2.0 * w2_[n];
      auto h = adjoint(a);
      std::vector<double> tv(nvox, 0.0);
      tv_operator(x, tv);
      for (std::size_t n = 0; n < nvox; ++n) {
        h[n] += tv_weight_ * tv[n];
        if (in_.csf[n]) h[n] += 2.0 * csf_weight_ * x[n];
      }
      restrict(h);
      return h;
    };

    std::vector<double> x(nvox, 0.0), r(nvox), d(nvox);
    for (std::size_t n = 0; n < nvox; ++n) r[n] = -grad[n];
    d = r;
    double rr = std::inner_product(r.begin(), r.end(), r.begin(), 0.0);
    const double rr0 = rr;
    int it = 0;
    for (; it < p_.cg_iterations && rr > 0.0; ++it) {
      if (std::sqrt(rr / rr0) < p_.cg_tolerance) break;
      const auto q = hessian(d);
      const double dq = std::inner_product(d.begin(), d.end(), q.begin(), 0.0);
      if (!(dq > 0.0)) throw InversionDiverged("medi: CG breakdown (non-positive curvature)", {});
      const double alpha = rr / dq;
      double rr_new = 0.0;
      for (std::size_t n = 0; n < nvox; ++n) {
        x[n] += alpha * d[n];
        r[n] -= alpha * q[n];
        rr_new += r[n] * r[n];
      }
      const double beta = rr_new / rr;
      rr = rr_new;
      for (std::size_t n = 0; n < nvox; ++n) d[n] = r[n] + beta * d[n];
    }
    return {std::move(x), it};
  }

  void restrict(std::vector<double>& v) const {
    for (std::size_t n = 0; n < v.size(); ++n)
      if (!solve_mask_[n]) v[n] = 0.0;
  }

 private:
  [[nodiscard]] std::size_t neighbor(std::size_t n, int a) const {
    const auto& d = grid().dims;
    return n + (a == 0 ? 1 : a == 1 ? d[0] : d[0] * d[1]);
  }

  // TV applies to a forward pair only inside the solve mask and off edges.
  [[nodiscard]] bool tv_active(std::size_t n, int a) const {
    return in_.edges[n] && solve_mask_[n] && solve_mask_[neighbor(n, a)];
  }

  // Calls fn(n, axis, (x[n+e_a] - x[n]) / h_a) for every in-grid forward pair.
  template <typename Fn>
  void for_each_difference(const std::vector<double>& x, Fn&& fn) const {
    const auto& g = grid();
    const auto& d = g.dims;
    for (std::size_t k = 0; k < d[2]; ++k)
      for (std::size_t j = 0; j < d[1]; ++j)
        for (std::size_t i = 0; i < d[0]; ++i) {
          const std::size_t n = g.index(i, j, k);
          if (i + 1 < d[0]) fn(n, 0, (x[n + 1] - x[n]) / g.spacing[0]);
          if (j + 1 < d[1]) fn(n, 1, (x[n + d[0]] - x[n]) / g.spacing[1]);
          if (k + 1 < d[2]) fn(n, 2, (x[n + d[0] * d[1]] - x[n]) / g.spacing[2]);
        }
  }

  InversionInputs in_;
  MediParams p_;
  MaskVolume solve_mask_;
  DipoleKernel dipole_;
  std::optional<SphericalKernel> smv_;
  double phase_scale_ = 0.0;
  double tv_weight_ = 0.0;
  double csf_weight_ = 0.0;
  std::vector<double> target_, w2_;
};

struct MediResult {
  ScalarVolume chi;  // ppm, zero outside the variant's mask
  MaskVolume mask;
  std::vector<MediIteration> diagnostics;
  double csf_offset = 0.0;  // CSF mean removed from the solution
  bool converged = false;
};

/// Gauss-Newton with backtracking on the total cost. chi starts at 0; the
/// result is referenced to the CSF mean when a CSF mask is present.
inline MediResult medi_invert(const InversionInputs& inputs, const MediParams& p) {
  const MediProblem prob(inputs, p);
  const auto& g = prob.grid();
  const std::size_t nvox = g.size();
  std::vector<double> chi(nvox, 0.0);
  MediResult res;
  double cost = prob.total_cost(chi);
  int stalled = 0;
  for (int it = 1; it <= p.outer_iterations; ++it) {
    auto [dx, cg_used] = prob.newton_step(chi);
    double step_sq = 0.0, chi_sq = 0.0;
    for (std::size_t n = 0; n < nvox; ++n) {
      step_sq += dx[n] * dx[n];
      chi_sq += chi[n] * chi[n];
    }
    const double rel_update = chi_sq > 0.0 ? std::sqrt(step_sq / chi_sq) : (step_sq > 0.0 ? 1.0 : 0.0);

    double s = 1.0, trial_cost = cost;
    std::vector<double> trial(nvox);
    bool accepted = false;
    for (int ls = 0; ls < 12; ++ls, s *= 0.5) {
      for (std::size_t n = 0; n < nvox; ++n) trial[n] = chi[n] + s * dx[n];
      trial_cost = prob.total_cost(trial);
      if (trial_cost <= cost) {
        accepted = true;
        break;
      }
    }
    MediIteration rec;
    rec.iteration = it;
    rec.cg_iterations = cg_used;
    if (accepted) {
      chi.swap(trial);
      rec.step_length = s;
      rec.step_norm = s * std::sqrt(step_sq);
      stalled = trial_cost < cost ? 0 : stalled + 1;
      cost = trial_cost;
    } else {
      ++stalled;
    }
    rec.data_cost = prob.data_cost(chi);
    rec.tv_cost = prob.tv_cost(chi);
    rec.csf_cost = prob.csf_cost(chi);
    rec.total = cost;
    res.diagnostics.push_back(rec);
    if (rel_update < p.tolerance) {
      res.converged = true;
      break;
    }
    if (stalled >= 3)
      throw InversionDiverged("medi: cost did not decrease for 3 consecutive iterations", res.diagnostics);
  }

  res.mask = prob.solve_mask();
  if (!prob.inputs().csf.empty()) res.csf_offset = prob.csf_mean(chi);
  res.chi = ScalarVolume(g, Unit::Ppm);
  for (std::size_t n = 0; n < nvox; ++n) res.chi[n] = res.mask[n] ? chi[n] - res.csf_offset : 0.0;
  return res;
}

}  // namespace qsm
