#include <gtest/gtest.h>

#include "helpers.hpp"
#include "qsm/kernels.hpp"

using namespace qsm;
using qsm::test::ball;
using qsm::test::cube;

TEST(MinimalRadius, Oracles) {
  EXPECT_NEAR(minimal_radius(VoxelGrid({8, 8, 8}, {1.0, 1.0, 1.0}), 0.05), 0.55, 1e-12);
  EXPECT_NEAR(minimal_radius(VoxelGrid({8, 8, 8}, {0.9375, 0.9375, 1.5}), 0.05), 0.51875, 1e-12);
  EXPECT_THROW(minimal_radius(cube(8), 0.0), InvalidArgument);
}

TEST(SphericalKernel, TapsAreANormalizedNonNegativeAverage) {
  for (double r : {1.0, 2.5, 5.0}) {
    const auto k = SphericalKernel::for_grid(cube(24), r);
    double sum = 0.0;
    for (const auto& t : k.taps()) {
      EXPECT_GE(t.weight, 0.0);
      sum += t.weight;
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
    EXPECT_NEAR(k.spectrum()[0], 1.0, 1e-12);
  }
  EXPECT_THROW(SphericalKernel::for_grid(cube(8), 0.0), InvalidArgument);
}

TEST(SphericalKernel, PreservesConstantsOnAPeriodicDomain) {
  const auto g = cube(16);
  const SphericalKernel k(FourierDomain(g, g.dims), 3.0);
  const ScalarVolume c(g, Unit::Hz, 2.5);
  const auto out = smv_apply(c, k);
  EXPECT_LT(test::max_abs_diff(out, c), 1e-12);
}

TEST(SphericalKernel, PreservesLinearFieldsAwayFromTheBorder) {
  const auto g = cube(32);
  ScalarVolume b(g, Unit::Hz);
  for (std::size_t n = 0; n < g.size(); ++n) {
    const auto c = g.coords(n);
    b[n] = 0.3 * double(c[0]) - 0.7 * double(c[1]) + 1.1 * double(c[2]);
  }
  const double r = 4.0;
  const auto out = smv_apply(b, SphericalKernel::for_grid(g, r));
  MaskVolume interior(g);
  for (std::size_t n = 0; n < g.size(); ++n) {
    const auto c = g.coords(n);
    bool in = true;
    for (int a = 0; a < 3; ++a) in = in && c[a] >= 5 && c[a] + 5 < 32;
    interior.set(n, in);
  }
  EXPECT_LT(test::max_abs_diff(out, b, &interior), 1e-9);
}

TEST(SphericalKernel, DirectAndFourierPathsAgree) {
  const auto g = VoxelGrid({14, 15, 16}, {1.0, 1.0, 1.5});
  const auto b = test::random_volume(g, 11);
  const auto k = SphericalKernel::for_grid(g, 2.7);
  EXPECT_LT(test::max_abs_diff(smv_apply(b, k), smv_apply_direct(b, k)), 1e-12);
}

TEST(SphericalKernel, IsLinear) {
  const auto g = cube(12);
  const auto a = test::random_volume(g, 1), b = test::random_volume(g, 2);
  ScalarVolume ab(g);
  for (std::size_t n = 0; n < g.size(); ++n) ab[n] = 2.0 * a[n] - 3.0 * b[n];
  const auto k = SphericalKernel::for_grid(g, 2.0);
  const auto sa = smv_apply(a, k), sb = smv_apply(b, k), sab = smv_apply(ab, k);
  for (std::size_t n = 0; n < g.size(); ++n) EXPECT_NEAR(sab[n], 2.0 * sa[n] - 3.0 * sb[n], 1e-12);
}

TEST(DipoleKernel, SpectrumRange) {
  const auto d = DipoleKernel::padded_for(cube(10));
  EXPECT_EQ(d.spectrum()[0], 0.0);
  for (double v : d.spectrum()) {
    EXPECT_GE(v, -2.0 / 3.0 - 1e-15);
    EXPECT_LE(v, 1.0 / 3.0 + 1e-15);
  }
  EXPECT_THROW(DipoleKernel(FourierDomain(cube(4), {4, 4, 4}), {0, 0, 0}), InvalidArgument);
}

TEST(DipoleKernel, ZeroAndUniformSusceptibilityGiveNoField) {
  const auto g = cube(12);
  const auto zero = dipole_convolve(ScalarVolume(g), DipoleKernel::padded_for(g), 3.0);
  for (double v : zero.values()) EXPECT_EQ(v, 0.0);
  const auto uniform =
      dipole_convolve(ScalarVolume(g, Unit::Ppm, 0.4), DipoleKernel(FourierDomain(g, g.dims)), 3.0);
  for (double v : uniform.values()) EXPECT_NEAR(v, 0.0, 1e-10);
}

TEST(DipoleKernel, SphereFieldMatchesTheAnalyticDipole) {
  const auto g = cube(96);
  const double radius = 8.0, c = 48.0;
  const auto chi_mask = ball(g, {c, c, c}, radius);
  ScalarVolume chi(g, Unit::Ppm);
  for (std::size_t n = 0; n < g.size(); ++n) chi[n] = chi_mask[n] ? 1.0 : 0.0;
  const auto b = dipole_convolve(chi, DipoleKernel::padded_for(g), 3.0, FieldUnit::Relative);
  // effective radius of the voxelized sphere
  const double r_eff = std::cbrt(3.0 * double(chi_mask.count()) / (4.0 * std::numbers::pi));
  for (double dist : {16.0, 24.0}) {
    const double expected = 2.0 / 3.0 * std::pow(r_eff / dist, 3.0);  // on the B0 axis
    EXPECT_NEAR(b.at(48, 48, 48 + std::size_t(dist)), expected, 0.03 * expected) << dist;
    EXPECT_NEAR(b.at(48 + std::size_t(dist), 48, 48), -0.5 * expected, 0.03 * expected) << dist;
  }
  EXPECT_NEAR(b.at(48, 48, 48), 0.0, 0.01);
}

TEST(DipoleKernel, CommutesWithPeriodicShifts) {
  const auto g = cube(12);
  const DipoleKernel d(FourierDomain(g, g.dims));
  const auto chi = test::random_volume(g, 5);
  ScalarVolume shifted(g);
  for (std::size_t n = 0; n < g.size(); ++n) {
    const auto q = g.coords(n);
    shifted[g.index((q[0] + 3) % 12, (q[1] + 5) % 12, (q[2] + 7) % 12)] = chi[n];
  }
  const auto a = dipole_convolve(chi, d, 3.0), b = dipole_convolve(shifted, d, 3.0);
  for (std::size_t n = 0; n < g.size(); ++n) {
    const auto q = g.coords(n);
    EXPECT_NEAR(b[g.index((q[0] + 3) % 12, (q[1] + 5) % 12, (q[2] + 7) % 12)], a[n], 1e-9);
  }
}

TEST(DipoleKernel, HzScalingUsesTheGyromagneticRatio) {
  const auto g = cube(8);
  auto chi = test::random_volume(g, 9);
  const auto d = DipoleKernel::padded_for(g);
  const auto rel = dipole_convolve(chi, d, 3.0, FieldUnit::Relative);
  const auto hz = dipole_convolve(chi, d, 3.0, FieldUnit::Hz);
  for (std::size_t n = 0; n < g.size(); ++n) EXPECT_NEAR(hz[n], rel[n] * kGamma * 3.0 * 1e-6, 1e-9);
}
