#include <gtest/gtest.h>

#include "helpers.hpp"
#include "qsm/phantom.hpp"

using namespace qsm;

namespace {

PhantomSpec single_ellipsoid() {
  PhantomSpec s;
  s.grid = test::cube(24);
  Region r;
  r.name = "brain";
  r.center = {11.5, 11.5, 11.5};
  r.semi_axes = {8, 9, 7};
  r.chi = 0.02;
  s.regions.push_back(r);
  return s;
}

const Phantom& desk() {
  static const Phantom p = build_phantom(PhantomSpec::desk());
  return p;
}

double harmonic_error(const ScalarVolume& b, const MaskVolume& m, double radius) {
  const auto s = smv_apply(b, SphericalKernel::for_grid(b.grid(), radius));
  const auto inner = erode_mask(m, radius);
  double peak = 0.0;
  for (std::size_t n = 0; n < b.size(); ++n)
    if (m[n]) peak = std::max(peak, std::abs(b[n]));
  return test::max_abs_diff(s, b, &inner) / peak;
}

}  // namespace

TEST(Phantom, SingleRegionIsTwoValued) {
  const auto p = build_phantom(single_ellipsoid());
  for (std::size_t n = 0; n < p.chi.size(); ++n) EXPECT_EQ(p.chi[n], p.brain[n] ? 0.02 : 9.4);
  EXPECT_GT(p.brain.count(), 0u);
}

TEST(Phantom, RegionOutsideTheGridIsRejected) {
  auto s = single_ellipsoid();
  s.regions[0].semi_axes = {20, 9, 7};
  EXPECT_THROW(build_phantom(s), InvalidArgument);
  s = single_ellipsoid();
  s.head_margin = 6.0;
  EXPECT_THROW(build_phantom(s), InvalidArgument);
}

TEST(Phantom, DeskLayout) {
  const auto& p = desk();
  EXPECT_EQ(PhantomSpec::desk().chi_background, 9.4);
  const std::vector<const MaskVolume*> parts{&p.gray, &p.csf, &p.vein, &p.hemorrhage};
  for (std::size_t a = 0; a < parts.size(); ++a) {
    EXPECT_FALSE(parts[a]->empty()) << a;
    EXPECT_TRUE(is_subset(*parts[a], p.brain)) << a;
    for (std::size_t b = a + 1; b < parts.size(); ++b) EXPECT_TRUE(mask_and(*parts[a], *parts[b]).empty());
  }
  EXPECT_FALSE(mask_and(p.vein, face_shell(p.brain)).empty());
  EXPECT_TRUE(mask_and(p.head, p.brain).empty());
  EXPECT_EQ(deep_gray_regions(PhantomSpec::desk()).size(), 5u);
  for (auto r : deep_gray_regions(PhantomSpec::desk())) EXPECT_FALSE(p.region_mask(r).empty());
}

TEST(Phantom, SpecJsonRoundTrip) {
  const auto s = PhantomSpec::desk(32);
  const nlohmann::json j = s;
  const auto back = j.get<PhantomSpec>();
  EXPECT_EQ(nlohmann::json(back), j);
  const auto preset = nlohmann::json{{"preset", "desk"}, {"size", 32}}.get<PhantomSpec>();
  EXPECT_EQ(nlohmann::json(preset), j);
}

TEST(ForwardField, ZeroSusceptibilityGivesZeroFields) {
  const auto g = test::cube(16);
  const auto f = forward_field(ScalarVolume(g, Unit::Ppm), MaskVolume(g, true), AcquisitionParams{});
  for (std::size_t n = 0; n < g.size(); ++n) {
    EXPECT_EQ(f.total[n], 0.0);
    EXPECT_EQ(f.tissue[n], 0.0);
    EXPECT_EQ(f.background[n], 0.0);
  }
}

TEST(ForwardField, SplitIsExactlyAdditive) {
  const auto& p = desk();
  const auto f = forward_field(p.chi, p.brain, AcquisitionParams{});
  for (std::size_t n = 0; n < p.chi.size(); ++n) EXPECT_EQ(f.total[n], f.tissue[n] + f.background[n]);
  EXPECT_EQ(f.total.unit(), Unit::Hz);
}

TEST(ForwardField, BackgroundFieldIsHarmonicInsideTheBrain) {
  const auto& p = desk();
  const auto f = forward_field(p.chi, p.brain, AcquisitionParams{});
  EXPECT_LT(harmonic_error(f.background, p.brain, 5.0), 1e-2);
}

TEST(ForwardField, AirOnlyPhantomHasNoTissueField) {
  auto spec = PhantomSpec::desk();
  spec.regions.resize(1);
  const auto p = build_phantom(spec);
  const auto f = forward_field(p.chi, p.brain, AcquisitionParams{});
  for (std::size_t n = 0; n < p.chi.size(); ++n) EXPECT_EQ(f.tissue[n], 0.0);
  EXPECT_LT(harmonic_error(f.total, p.brain, 5.0), 1e-2);
}

TEST(Synthesis, NoiselessUnitSignal) {
  const auto g = test::cube(4);
  AcquisitionParams acq;
  acq.snr = std::numeric_limits<double>::infinity();
  const auto s = synthesize_mgre(ScalarVolume(g, Unit::Dimensionless, 1.0), ScalarVolume(g, Unit::Hz),
                                 ScalarVolume(g, Unit::PerSecond), acq, 1);
  for (std::size_t j = 0; j < s.echoes(); ++j)
    for (auto v : s.echo(j)) EXPECT_EQ(v, std::complex<double>(1.0, 0.0));
}

TEST(Synthesis, PhaseFollowsTheSignalModel) {
  const auto g = test::cube(2);
  AcquisitionParams acq;
  acq.snr = std::numeric_limits<double>::infinity();
  acq.te1 = 5e-3;
  acq.delta_te = 5e-3;
  acq.n_echoes = 2;
  const auto s = synthesize_mgre(ScalarVolume(g, Unit::Dimensionless, 1.0), ScalarVolume(g, Unit::Hz, 100.0),
                                 ScalarVolume(g, Unit::PerSecond), acq, 1);
  EXPECT_NEAR(std::abs(std::arg(s.echo(0)[0])), std::numbers::pi, 1e-9);
  EXPECT_NEAR(s.echo(0)[0].real(), -1.0, 1e-12);
}

TEST(Synthesis, NoiseStandardDeviationMatchesSnr) {
  const auto g = test::cube(48);
  AcquisitionParams acq;  // SNR 50, 11 echoes, 2.6 ms spacing, 3 T
  const ScalarVolume a(g, Unit::Dimensionless, 1.0), b(g, Unit::Hz, 12.0), r(g, Unit::PerSecond, 20.0);
  const auto noisy = synthesize_mgre(a, b, r, acq, 3);
  auto clean_acq = acq;
  clean_acq.snr = std::numeric_limits<double>::infinity();
  const auto clean = synthesize_mgre(a, b, r, clean_acq, 3);
  double ss = 0.0;
  std::size_t count = 0;
  for (std::size_t j = 0; j < noisy.echoes(); ++j)
    for (std::size_t n = 0; n < g.size(); ++n) {
      const auto d = noisy.echo(j)[n] - clean.echo(j)[n];
      ss += d.real() * d.real() + d.imag() * d.imag();
      count += 2;
    }
  EXPECT_GE(count, 100000u);
  EXPECT_NEAR(std::sqrt(ss / double(count)), 0.02, 0.02 * 0.05);
}

TEST(Synthesis, SeedDeterminesNoise) {
  const auto g = test::cube(8);
  const ScalarVolume a(g, Unit::Dimensionless, 1.0), b(g, Unit::Hz), r(g, Unit::PerSecond);
  const AcquisitionParams acq;
  const auto s1 = synthesize_mgre(a, b, r, acq, 7), s2 = synthesize_mgre(a, b, r, acq, 7),
             s3 = synthesize_mgre(a, b, r, acq, 8);
  EXPECT_TRUE(std::equal(s1.data().begin(), s1.data().end(), s2.data().begin()));
  EXPECT_FALSE(std::equal(s1.data().begin(), s1.data().end(), s3.data().begin()));
}

TEST(Acquisition, ValidationAndJson) {
  AcquisitionParams acq;
  EXPECT_TRUE(acq.violations().empty());
  EXPECT_EQ(acq.echo_times().size(), 11u);
  EXPECT_NEAR(acq.echo_times().back(), 28.6e-3, 1e-12);
  acq.n_echoes = 1;
  acq.b0 = 0;
  EXPECT_EQ(acq.violations().size(), 2u);
  EXPECT_THROW(acq.validate(), InvalidArgument);
  const AcquisitionParams d;
  const nlohmann::json j = d;
  EXPECT_EQ(nlohmann::json(j.get<AcquisitionParams>()), j);
}
