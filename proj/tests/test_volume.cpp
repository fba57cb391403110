#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "helpers.hpp"
#include "qsm/io.hpp"
#include "qsm/morphology.hpp"

using namespace qsm;
using qsm::test::ball;
using qsm::test::cube;

namespace {

fs::path temp_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("qsm_test_volume_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST(Grid, RejectsDegenerateGeometry) {
  EXPECT_THROW(VoxelGrid({0, 4, 4}, {1, 1, 1}), InvalidArgument);
  EXPECT_THROW(VoxelGrid({4, 4, 4}, {1, -1, 1}), InvalidArgument);
  EXPECT_THROW(VoxelGrid({4, 4, 4}, {1, 1, 0}), InvalidArgument);
}

TEST(Grid, IndexIsXFastest) {
  const VoxelGrid g({3, 4, 5}, {1, 1, 1});
  EXPECT_EQ(g.index(1, 0, 0), 1u);
  EXPECT_EQ(g.index(0, 1, 0), 3u);
  EXPECT_EQ(g.index(0, 0, 1), 12u);
  EXPECT_EQ(g.coords(g.index(2, 3, 4)), (Index3{2, 3, 4}));
}

TEST(Volumes, ConstructionChecksSizes) {
  const auto g = cube(4);
  EXPECT_THROW(ScalarVolume(g, std::vector<double>(63)), InvalidArgument);
  EXPECT_THROW(MaskVolume(g, std::vector<std::uint8_t>(65)), InvalidArgument);
  EXPECT_THROW(MultiEchoVolume(g, {0.005, 0.005}), InvalidArgument);
  EXPECT_THROW(MultiEchoVolume(g, {}), InvalidArgument);
}

TEST(Volumes, MaskAlgebraRequiresSameGrid) {
  MaskVolume a(cube(4)), b(cube(5));
  EXPECT_THROW(mask_and(a, b), GridMismatch);
  EXPECT_THROW(apply_mask(ScalarVolume(cube(4)), b), GridMismatch);
}

TEST(Io, NiftiRoundTripIsBitExactForFloat32Values) {
  const auto dir = temp_dir("nifti");
  ScalarVolume v(cube(8), Unit::Ppm, 1.0);
  save_volume(v, dir / "ones.nii");
  const auto back = load_scalar(dir / "ones.nii");
  EXPECT_EQ(back.grid(), v.grid());
  EXPECT_EQ(back.unit(), Unit::Ppm);
  EXPECT_EQ(std::memcmp(back.values().data(), v.values().data(), v.size() * sizeof(double)), 0);
}

TEST(Io, RawRoundTripStoresFloat32) {
  const auto dir = temp_dir("raw");
  const VoxelGrid g({5, 6, 7}, {0.5, 1.0, 2.0}, {1.0, -2.0, 3.0});
  auto v = test::random_volume(g, 3);
  v.set_unit(Unit::Ppm);
  save_volume(v, dir / "v.raw");
  const auto back = load_scalar(dir / "v.raw");
  EXPECT_EQ(back.grid(), g);
  for (std::size_t n = 0; n < v.size(); ++n) EXPECT_EQ(back[n], static_cast<double>(static_cast<float>(v[n])));

  std::ifstream side(sidecar_path(dir / "v.raw"));
  const auto j = nlohmann::json::parse(side);
  EXPECT_EQ(j.at("unit"), "ppm");
}

TEST(Io, MaskRoundTripInBothFormats) {
  const auto dir = temp_dir("mask");
  const auto m = ball(cube(12), {6, 6, 6}, 4);
  for (const char* name : {"m.nii", "m.raw"}) {
    save_volume(m, dir / name);
    EXPECT_EQ(load_mask(dir / name), m) << name;
  }
}

TEST(Io, MultiEchoRoundTrip) {
  const auto dir = temp_dir("mgre");
  MultiEchoVolume e(cube(4), {0.002, 0.004, 0.006});
  for (std::size_t j = 0; j < 3; ++j)
    for (std::size_t n = 0; n < 64; ++n) e.echo(j)[n] = {0.25 * double(n), -0.5 * double(j)};
  for (const char* name : {"e.nii", "e.raw"}) {
    save_volume(e, dir / name);
    const auto back = load_multi_echo(dir / name);
    EXPECT_EQ(back.echo_times(), e.echo_times());
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t n = 0; n < 64; ++n) EXPECT_EQ(back.echo(j)[n], e.echo(j)[n]);
  }
}

TEST(Io, RawSampleCountMismatchIsRejected) {
  const auto dir = temp_dir("mismatch");
  save_volume(ScalarVolume(cube(8)), dir / "v.raw");
  fs::resize_file(dir / "v.raw", 500 * 4);
  EXPECT_THROW(load_volume(dir / "v.raw"), ConsistencyError);
}

TEST(Io, UnwritablePathRaisesIoError) {
  EXPECT_THROW(save_volume(ScalarVolume(cube(4)), "/proc/qsm-no-such-dir/v.nii"), IoError);
  EXPECT_THROW(load_volume("/nonexistent/v.nii"), IoError);
}

TEST(Io, UnknownExtensionIsAFormatError) { EXPECT_THROW(format_for_path("v.txt"), FormatError); }

TEST(Morphology, FaceShellOfFullGridIsTheBorder) {
  const MaskVolume full(cube(16), true);
  EXPECT_EQ(face_shell(full).count(), 16u * 16 * 16 - 14u * 14 * 14);
}

TEST(Morphology, BoundaryLayerMatchesBruteForceDistance) {
  const auto g = cube(26);
  const auto m = ball(g, {12.5, 12.5, 12.5}, 10);
  const auto layer = boundary_layer(m, 3.0);
  std::vector<Index3> outside;
  for (std::size_t n = 0; n < g.size(); ++n)
    if (!m[n]) outside.push_back(g.coords(n));
  for (std::size_t n = 0; n < g.size(); ++n) {
    if (!m[n]) {
      EXPECT_FALSE(layer[n]);
      continue;
    }
    const auto c = g.coords(n);
    double best = 1e30;
    for (const auto& o : outside) {
      const double dx = double(c[0]) - double(o[0]), dy = double(c[1]) - double(o[1]),
                   dz = double(c[2]) - double(o[2]);
      best = std::min(best, dx * dx + dy * dy + dz * dz);
    }
    EXPECT_EQ(layer[n], std::sqrt(best) <= 3.0) << n;
  }
}

TEST(Morphology, ErosionPartitionsTheMask) {
  for (unsigned seed = 0; seed < 4; ++seed) {
    const auto g = cube(20);
    const auto v = test::random_volume(g, seed);
    MaskVolume m(g);
    for (std::size_t n = 0; n < g.size(); ++n) m.set(n, v[n] > -0.6);
    for (double r : {1.0, 2.5, 4.0}) {
      const auto layer = boundary_layer(m, r);
      const auto inner = erode_mask(m, r);
      EXPECT_TRUE(mask_and(layer, inner).empty());
      EXPECT_EQ(mask_or(layer, inner), m);
      EXPECT_TRUE(is_subset(erode_mask(m, r + 1.0), inner));
    }
  }
}

TEST(Morphology, ErodedBallHasTheExpectedRadius) {
  const auto g = cube(32);
  const auto m = ball(g, {16, 16, 16}, 10);
  const auto e = erode_mask(m, 3.0);
  for (std::size_t n = 0; n < g.size(); ++n) {
    const auto c = g.coords(n);
    const double r = std::hypot(double(c[0]) - 16, double(c[1]) - 16, double(c[2]) - 16);
    if (r <= 6.0) EXPECT_TRUE(e[n]);
    if (r > 7.5) EXPECT_FALSE(e[n]);
  }
}

TEST(Morphology, ErosionUsesPhysicalSpacing) {
  const VoxelGrid g({20, 20, 20}, {1.0, 1.0, 2.0});
  MaskVolume m(g);
  for (std::size_t i = 5; i < 15; ++i)
    for (std::size_t j = 5; j < 15; ++j)
      for (std::size_t k = 5; k < 15; ++k) m.set(g.index(i, j, k), true);
  const auto e = erode_mask(m, 3.0);
  // 3 voxels removed along x (1 mm), 1 voxel along z (2 mm)
  EXPECT_FALSE(e.at(7, 10, 10));
  EXPECT_TRUE(e.at(8, 10, 10));
  EXPECT_FALSE(e.at(10, 10, 5));
  EXPECT_TRUE(e.at(10, 10, 6));
}

TEST(Morphology, DistanceToOutsideIsPositiveInsideOnly) {
  const auto m = ball(cube(16), {8, 8, 8}, 5);
  const auto d = distance_to_outside(m);
  for (std::size_t n = 0; n < m.size(); ++n) {
    if (m[n]) EXPECT_GE(d[n], 1.0);
    else EXPECT_EQ(d[n], 0.0);
  }
}
