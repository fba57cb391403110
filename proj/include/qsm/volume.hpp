#pragma once

// Voxel-grid data model shared by every stage of the reconstruction.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace qsm {

/// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Two volumes (or a volume and a kernel) live on different grids.
class GridMismatch : public Error {
 public:
  using Error::Error;
};

/// A precondition on parameters or inputs is violated.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

using Index3 = std::array<std::size_t, 3>;
using Vec3 = std::array<double, 3>;

/// Regular 3D sampling lattice with physical spacing in mm.
struct VoxelGrid {
  Index3 dims{1, 1, 1};
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};

  VoxelGrid() = default;
  VoxelGrid(Index3 d, Vec3 s, Vec3 o = {0.0, 0.0, 0.0}) : dims(d), spacing(s), origin(o) {
    validate();
  }

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (dims[a] < 1) throw InvalidArgument("grid dims must be >= 1");
      if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a]))
        throw InvalidArgument("grid spacing must be > 0");
      if (!std::isfinite(origin[a])) throw InvalidArgument("grid origin must be finite");
    }
  }

  [[nodiscard]] std::size_t size() const { return dims[0] * dims[1] * dims[2]; }

  /// Linear index with x fastest.
  [[nodiscard]] std::size_t index(std::size_t i, std::size_t j, std::size_t k) const {
    return i + dims[0] * (j + dims[1] * k);
  }

  [[nodiscard]] Index3 coords(std::size_t n) const {
    return {n % dims[0], (n / dims[0]) % dims[1], n / (dims[0] * dims[1])};
  }

  [[nodiscard]] double min_spacing() const {
    return std::min({spacing[0], spacing[1], spacing[2]});
  }

  /// Physical position (mm) of a voxel center.
  [[nodiscard]] Vec3 position(std::size_t i, std::size_t j, std::size_t k) const {
    return {origin[0] + spacing[0] * static_cast<double>(i),
            origin[1] + spacing[1] * static_cast<double>(j),
            origin[2] + spacing[2] * static_cast<double>(k)};
  }

  friend bool operator==(const VoxelGrid&, const VoxelGrid&) = default;
};

inline void require_same_grid(const VoxelGrid& a, const VoxelGrid& b, std::string_view what) {
  if (!(a == b)) throw GridMismatch(std::string(what) + ": volumes are on different grids");
}

enum class Unit { Dimensionless, Hz, Ppm, PerSecond, Radian };

inline std::string_view to_string(Unit u) {
  switch (u) {
    case Unit::Hz: return "Hz";
    case Unit::Ppm: return "ppm";
    case Unit::PerSecond: return "s^-1";
    case Unit::Radian: return "rad";
    case Unit::Dimensionless: break;
  }
  return "dimensionless";
}

inline Unit unit_from_string(std::string_view s) {
  if (s == "Hz") return Unit::Hz;
  if (s == "ppm") return Unit::Ppm;
  if (s == "s^-1" || s == "1/s") return Unit::PerSecond;
  if (s == "rad") return Unit::Radian;
  if (s == "dimensionless" || s.empty()) return Unit::Dimensionless;
  throw InvalidArgument("unknown unit tag '" + std::string(s) + "'");
}

/// Real-valued volume. Values must be finite.
class ScalarVolume {
 public:
  ScalarVolume() = default;
  explicit ScalarVolume(VoxelGrid grid, Unit unit = Unit::Dimensionless, double fill = 0.0)
      : grid_(std::move(grid)), unit_(unit), data_(grid_.size(), fill) {}
  ScalarVolume(VoxelGrid grid, std::vector<double> data, Unit unit = Unit::Dimensionless)
      : grid_(std::move(grid)), unit_(unit), data_(std::move(data)) {
    if (data_.size() != grid_.size())
      throw InvalidArgument("volume data length does not match grid size");
  }

  [[nodiscard]] const VoxelGrid& grid() const { return grid_; }
  [[nodiscard]] Unit unit() const { return unit_; }
  void set_unit(Unit u) { unit_ = u; }
  [[nodiscard]] std::size_t size() const { return data_.size(); }

  [[nodiscard]] std::span<const double> data() const { return data_; }
  [[nodiscard]] std::span<double> data() { return data_; }
  [[nodiscard]] std::vector<double>& values() { return data_; }
  [[nodiscard]] const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t n) { return data_[n]; }
  double operator[](std::size_t n) const { return data_[n]; }
  double& at(std::size_t i, std::size_t j, std::size_t k) { return data_[grid_.index(i, j, k)]; }
  [[nodiscard]] double at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[grid_.index(i, j, k)];
  }

  [[nodiscard]] bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

 private:
  VoxelGrid grid_;
  Unit unit_ = Unit::Dimensionless;
  std::vector<double> data_;
};

/// Binary volume. Stored one byte per voxel for cheap random access.
class MaskVolume {
 public:
  MaskVolume() = default;
  explicit MaskVolume(VoxelGrid grid, bool fill = false)
      : grid_(std::move(grid)), data_(grid_.size(), fill ? 1 : 0) {}
  MaskVolume(VoxelGrid grid, std::vector<std::uint8_t> data)
      : grid_(std::move(grid)), data_(std::move(data)) {
    if (data_.size() != grid_.size())
      throw InvalidArgument("mask data length does not match grid size");
    for (auto& v : data_) v = v ? 1 : 0;
  }

  [[nodiscard]] const VoxelGrid& grid() const { return grid_; }
  [[nodiscard]] std::size_t size() const { return data_.size(); }
  [[nodiscard]] std::span<const std::uint8_t> data() const { return data_; }

  [[nodiscard]] bool operator[](std::size_t n) const { return data_[n] != 0; }
  void set(std::size_t n, bool v) { data_[n] = v ? 1 : 0; }
  [[nodiscard]] bool at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[grid_.index(i, j, k)] != 0;
  }

  [[nodiscard]] std::size_t count() const {
    return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), std::uint8_t{1}));
  }
  [[nodiscard]] bool empty() const { return count() == 0; }

  friend bool operator==(const MaskVolume&, const MaskVolume&) = default;

 private:
  VoxelGrid grid_;
  std::vector<std::uint8_t> data_;
};

/// Complex multi-echo gradient-echo data; echo-major storage.
class MultiEchoVolume {
 public:
  MultiEchoVolume() = default;
  MultiEchoVolume(VoxelGrid grid, std::vector<double> echo_times)
      : grid_(std::move(grid)), echo_times_(std::move(echo_times)) {
    if (echo_times_.empty()) throw InvalidArgument("at least one echo time required");
    for (std::size_t j = 1; j < echo_times_.size(); ++j)
      if (!(echo_times_[j] > echo_times_[j - 1]))
        throw InvalidArgument("echo times must be strictly increasing");
    data_.assign(grid_.size() * echo_times_.size(), {0.0, 0.0});
  }

  [[nodiscard]] const VoxelGrid& grid() const { return grid_; }
  [[nodiscard]] std::size_t echoes() const { return echo_times_.size(); }
  [[nodiscard]] const std::vector<double>& echo_times() const { return echo_times_; }

  [[nodiscard]] std::span<std::complex<double>> echo(std::size_t j) {
    return {data_.data() + j * grid_.size(), grid_.size()};
  }
  [[nodiscard]] std::span<const std::complex<double>> echo(std::size_t j) const {
    return {data_.data() + j * grid_.size(), grid_.size()};
  }
  [[nodiscard]] std::span<const std::complex<double>> data() const { return data_; }

  /// Magnitude of one echo as a ScalarVolume.
  [[nodiscard]] ScalarVolume magnitude(std::size_t j) const {
    ScalarVolume out(grid_);
    auto e = echo(j);
    for (std::size_t n = 0; n < e.size(); ++n) out[n] = std::abs(e[n]);
    return out;
  }

 private:
  VoxelGrid grid_;
  std::vector<double> echo_times_;
  std::vector<std::complex<double>> data_;
};

// Mask algebra -------------------------------------------------------------

inline MaskVolume mask_and(const MaskVolume& a, const MaskVolume& b) {
  require_same_grid(a.grid(), b.grid(), "mask_and");
  MaskVolume out(a.grid());
  for (std::size_t n = 0; n < a.size(); ++n) out.set(n, a[n] && b[n]);
  return out;
}

inline MaskVolume mask_or(const MaskVolume& a, const MaskVolume& b) {
  require_same_grid(a.grid(), b.grid(), "mask_or");
  MaskVolume out(a.grid());
  for (std::size_t n = 0; n < a.size(); ++n) out.set(n, a[n] || b[n]);
  return out;
}

/// a \ b
inline MaskVolume mask_minus(const MaskVolume& a, const MaskVolume& b) {
  require_same_grid(a.grid(), b.grid(), "mask_minus");
  MaskVolume out(a.grid());
  for (std::size_t n = 0; n < a.size(); ++n) out.set(n, a[n] && !b[n]);
  return out;
}

inline bool is_subset(const MaskVolume& a, const MaskVolume& b) {
  require_same_grid(a.grid(), b.grid(), "is_subset");
  for (std::size_t n = 0; n < a.size(); ++n)
    if (a[n] && !b[n]) return false;
  return true;
}

/// v · M
inline ScalarVolume apply_mask(const ScalarVolume& v, const MaskVolume& m) {
  require_same_grid(v.grid(), m.grid(), "apply_mask");
  ScalarVolume out(v.grid(), v.unit());
  for (std::size_t n = 0; n < v.size(); ++n) out[n] = m[n] ? v[n] : 0.0;
  return out;
}

/// Voxels where |v| is nonzero.
inline MaskVolume support(const ScalarVolume& v) {
  MaskVolume out(v.grid());
  for (std::size_t n = 0; n < v.size(); ++n) out.set(n, v[n] != 0.0);
  return out;
}

inline double masked_mean(const ScalarVolume& v, const MaskVolume& m) {
  require_same_grid(v.grid(), m.grid(), "masked_mean");
  double s = 0.0;
  std::size_t c = 0;
  for (std::size_t n = 0; n < v.size(); ++n)
    if (m[n]) {
      s += v[n];
      ++c;
    }
  if (c == 0) throw InvalidArgument("masked_mean: empty mask");
  return s / static_cast<double>(c);
}

}  // namespace qsm
