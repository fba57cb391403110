#pragma once

// Multiple spherical mean value (mSMV) filtering of residual background
// field near the mask boundary, without eroding the mask.

#include <cmath>
#include <string>
#include <vector>

#include "json.hpp"
#include "qsm/kernels.hpp"
#include "qsm/morphology.hpp"
#include "qsm/vesselness.hpp"
#include "qsm/volume.hpp"

namespace qsm {

struct MsmvParams {
  double r1 = 5.0;       // mm
  double t_min = 0.3;    // Hz at 3 T, scaled linearly with B0
  int i_max = 5;
  double alpha = 1e-6;   // stop when the filtered set shrinks below alpha * |M|
  double eps = kMinimalRadiusEps;
  FrangiParams vessel;

  [[nodiscard]] std::vector<std::string> violations(const VoxelGrid& g) const {
    std::vector<std::string> v;
    if (!(eps > 0.0)) v.emplace_back("eps must be > 0");
    else if (!(r1 > minimal_radius(g, eps))) v.emplace_back("r1 must exceed the minimal SMV radius");
    if (!(alpha > 0.0 && alpha < 1.0)) v.emplace_back("alpha must be in (0,1)");
    if (i_max < 1) v.emplace_back("i_max must be >= 1");
    if (!(t_min > 0.0)) v.emplace_back("t_min must be > 0");
    if (vessel.scales_mm.empty()) v.emplace_back("vessel scales must be non-empty");
    if (!(vessel.threshold > 0.0 && vessel.threshold < 1.0)) v.emplace_back("vessel threshold must be in (0,1)");
    return v;
  }
  void validate(const VoxelGrid& g) const {
    if (auto v = violations(g); !v.empty()) throw InvalidArgument(v.front());
  }
};

struct MsmvTrace {
  std::vector<std::size_t> mask_sizes;  // |M_bv^i| per computed iteration
  double threshold = 0.0;                // Hz
  int iterations = 0;                    // filtering steps actually applied
  std::size_t vessel_mask_size = 0;
};

inline void to_json(nlohmann::json& j, const MsmvTrace& t) {
  j = {{"mask_sizes", t.mask_sizes},
       {"threshold_hz", t.threshold},
       {"iterations", t.iterations},
       {"vessel_mask_size", t.vessel_mask_size}};
}

/// b_L0 = b - S_r1(M b), on the whole grid.
inline ScalarVolume initial_filter(const ScalarVolume& b_hat, const MaskVolume& m, const MsmvParams& p) {
  require_same_grid(b_hat.grid(), m.grid(), "initial_filter");
  const auto k = SphericalKernel::for_grid(b_hat.grid(), p.r1);
  const auto s = smv_apply(apply_mask(b_hat, m), k);
  ScalarVolume out(b_hat.grid(), Unit::Hz);
  for (std::size_t n = 0; n < out.size(); ++n) out[n] = b_hat[n] - s[n];
  return out;
}

/// t = max(t_min * B0 / 3T, max over M of |b0 - S_r2 b0|) with r2 the minimal radius.
inline double compute_threshold(const ScalarVolume& b0, const MaskVolume& m, const MsmvParams& p, double b0_tesla) {
  require_same_grid(b0.grid(), m.grid(), "compute_threshold");
  if (m.empty()) throw InvalidArgument("compute_threshold: empty mask");
  if (!(b0_tesla > 0.0)) throw InvalidArgument("compute_threshold: B0 must be > 0");
  const auto k = SphericalKernel::for_grid(b0.grid(), minimal_radius(b0.grid(), p.eps));
  const auto s = smv_apply_direct(b0, k);
  double peak = 0.0;
  for (std::size_t n = 0; n < b0.size(); ++n)
    if (m[n]) peak = std::max(peak, std::abs(b0[n] - s[n]));
  return std::max(p.t_min * b0_tesla / 3.0, peak);
}

struct MsmvResult {
  ScalarVolume field;  // Hz, supported on M
  MsmvTrace trace;
};

/// The iterative part alone: repeatedly removes the small-kernel mean of the
/// super-threshold boundary voxels of b (already high-pass filtered) using
/// threshold t. The update is computed by direct summation so voxels out of
/// reach stay bit-identical. Returns M * b_L^{i*}.
inline MsmvResult msmv_iterate(ScalarVolume b, const MaskVolume& m, const MaskVolume& vessels, double t,
                               const MsmvParams& p) {
  require_same_grid(b.grid(), m.grid(), "msmv_iterate");
  require_same_grid(vessels.grid(), m.grid(), "msmv_iterate");
  const auto& g = b.grid();
  p.validate(g);
  if (m.empty()) throw InvalidArgument("msmv: empty mask");

  MsmvResult res;
  res.trace.threshold = t;
  res.trace.vessel_mask_size = mask_and(vessels, m).count();
  const auto layer = boundary_layer(m, p.r1);
  const auto small = SphericalKernel::for_grid(g, minimal_radius(g, p.eps));
  const double total = static_cast<double>(m.count());

  for (int i = 1; i <= p.i_max; ++i) {
    ScalarVolume target(g, Unit::Hz);
    std::size_t size = 0;
    for (std::size_t n = 0; n < b.size(); ++n)
      if (layer[n] && !vessels[n] && std::abs(b[n]) > t) {
        target[n] = b[n];
        ++size;
      }
    res.trace.mask_sizes.push_back(size);
    if (size == 0) break;
    const auto s = smv_apply_direct(target, small);
    for (std::size_t n = 0; n < b.size(); ++n) b[n] -= s[n];
    res.trace.iterations = i;
    if (static_cast<double>(size) / total < p.alpha) break;
  }
  res.field = apply_mask(b, m);
  res.field.set_unit(Unit::Hz);
  return res;
}

/// mSMV with a given vessel mask: initial r1 filter, threshold, then the loop.
inline MsmvResult msmv_filter(const ScalarVolume& b_hat, const MaskVolume& m, const MaskVolume& vessels,
                              const MsmvParams& p, double b0_tesla) {
  require_same_grid(b_hat.grid(), m.grid(), "msmv_filter");
  p.validate(b_hat.grid());
  auto b = initial_filter(b_hat, m, p);
  const double t = compute_threshold(b, m, p, b0_tesla);
  return msmv_iterate(std::move(b), m, vessels, t, p);
}

/// Full mSMV: vessel mask from the R2* map, then the filtering loop.
inline MsmvResult msmv_filter(const ScalarVolume& b_hat, const MaskVolume& m, const ScalarVolume& r2star,
                              const MsmvParams& p, double b0_tesla) {
  require_same_grid(r2star.grid(), m.grid(), "msmv_filter");
  return msmv_filter(b_hat, m, vessel_mask(r2star, m, p.vessel), p, b0_tesla);
}

}  // namespace qsm
