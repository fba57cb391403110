#include <gtest/gtest.h>

#include "helpers.hpp"
#include "qsm/background_removal.hpp"
#include "qsm/phantom.hpp"

using namespace qsm;

namespace {

double rms(const ScalarVolume& v, const MaskVolume& m) {
  double s = 0, c = 0;
  for (std::size_t n = 0; n < v.size(); ++n)
    if (m[n]) s += v[n] * v[n], ++c;
  return std::sqrt(s / c);
}

struct AirOnly {
  Phantom p;
  FieldSplit f;
};

const AirOnly& air_only() {
  static const AirOnly a = [] {
    auto spec = PhantomSpec::desk();
    spec.regions.resize(1);
    AirOnly out{build_phantom(spec), {}};
    out.f = forward_field(out.p.chi, out.p.brain, AcquisitionParams{});
    return out;
  }();
  return a;
}

}  // namespace

TEST(Pdf, ZeroFieldGivesZeroLocalField) {
  const auto g = test::cube(16);
  const auto m = test::ball(g, {8, 8, 8}, 6);
  const auto r = pdf(ScalarVolume(g, Unit::Hz), m, ScalarVolume(g, Unit::Dimensionless, 1.0));
  for (double v : r.local.values()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(r.mask, m);
}

TEST(Vsharp, ZeroFieldGivesZeroLocalField) {
  const auto g = test::cube(20);
  const auto m = test::ball(g, {10, 10, 10}, 8);
  const auto r = vsharp(ScalarVolume(g, Unit::Hz), m);
  for (double v : r.local.values()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(r.mask, erode_mask(m, 1.0));
}

TEST(Pdf, RemovesExteriorSources) {
  const auto& a = air_only();
  const ScalarVolume w(a.p.chi.grid(), Unit::Dimensionless, 1.0);
  const auto r = pdf(a.f.total, a.p.brain, w);
  EXPECT_EQ(r.mask, a.p.brain);
  EXPECT_LT(rms(r.local, erode_mask(a.p.brain, 3.0)) / rms(a.f.total, a.p.brain), 0.05);
}

TEST(Vsharp, RemovesExteriorSources) {
  const auto& a = air_only();
  const auto r = vsharp(a.f.total, a.p.brain);
  EXPECT_LT(rms(r.local, r.mask) / rms(a.f.total, a.p.brain), 0.05);
}

TEST(Pdf, KeepsAnInteriorSource) {
  auto spec = PhantomSpec::desk();
  spec.regions.resize(1);
  Region s;
  s.name = "sphere";
  s.shape = RegionShape::Sphere;
  s.label = TissueLabel::DeepGray;
  s.center = spec.regions[0].center;
  s.radius = 4.0;
  s.chi = 1.0;
  spec.regions.push_back(s);
  const auto p = build_phantom(spec);
  const auto f = forward_field(p.chi, p.brain, AcquisitionParams{});
  const auto r = pdf(f.total, p.brain, ScalarVolume(p.chi.grid(), Unit::Dimensionless, 1.0));
  EXPECT_GT(test::pearson(r.local, f.tissue, erode_mask(p.brain, 3.0)), 0.99);
}

TEST(BackgroundRemoval, Superposition) {
  const auto g = test::cube(24);
  const auto m = test::ball(g, {12, 12, 12}, 9);
  auto source = [&](unsigned seed) {
    auto chi = test::random_volume(g, seed);
    for (std::size_t n = 0; n < g.size(); ++n)
      if (m[n]) chi[n] *= 0.05;
    return dipole_convolve(chi, DipoleKernel::padded_for(g), 3.0);
  };
  const auto a = source(1), b = source(2);
  ScalarVolume ab(g, Unit::Hz);
  for (std::size_t n = 0; n < g.size(); ++n) ab[n] = a[n] + b[n];

  const auto va = vsharp(a, m), vb = vsharp(b, m), vab = vsharp(ab, m);
  for (std::size_t n = 0; n < g.size(); ++n) EXPECT_NEAR(vab.local[n], va.local[n] + vb.local[n], 1e-9);

  const ScalarVolume w(g, Unit::Dimensionless, 1.0);
  PdfParams p;
  p.tolerance = 1e-10;
  p.max_iterations = 500;
  const auto pa = pdf(a, m, w, p), pb = pdf(b, m, w, p), pab = pdf(ab, m, w, p);
  // CG stops short of the ill-conditioned directions, so the defect is
  // bounded by the solver residual, measured against the input field.
  double defect = 0.0;
  for (std::size_t n = 0; n < g.size(); ++n)
    if (m[n]) defect += std::pow(pab.local[n] - pa.local[n] - pb.local[n], 2);
  EXPECT_LT(std::sqrt(defect / m.count()), 1e-2 * rms(ab, m));
}

TEST(BackgroundRemoval, ResidualConcentratesNearTheBoundary) {
  const auto p = build_phantom(PhantomSpec::desk());
  const auto f = forward_field(p.chi, p.brain, AcquisitionParams{});
  const auto r = pdf(f.total, p.brain, ScalarVolume(p.chi.grid(), Unit::Dimensionless, 1.0));
  const auto layer = boundary_layer(p.brain, 5.0), inner = erode_mask(p.brain, 5.0);
  ScalarVolume err(p.chi.grid());
  for (std::size_t n = 0; n < err.size(); ++n) err[n] = std::abs(r.local[n] - f.tissue[n]);
  EXPECT_GE(masked_mean(err, layer), 2.0 * masked_mean(err, inner));
}

TEST(BackgroundRemoval, InvalidParameters) {
  const auto g = test::cube(8);
  const MaskVolume m(g, true);
  const ScalarVolume b(g, Unit::Hz);
  VsharpParams v;
  v.r_min = 3.0;
  v.r_max = 2.0;
  EXPECT_THROW(vsharp(b, m, v), InvalidArgument);
  PdfParams p;
  p.max_iterations = 0;
  EXPECT_THROW(pdf(b, m, ScalarVolume(g, Unit::Dimensionless, 1.0), p), InvalidArgument);
  EXPECT_THROW(pdf(b, MaskVolume(test::cube(9)), b), GridMismatch);
}
