#pragma once

// Procedural numerical brain: piecewise-constant susceptibility, the
// tissue/background field split, and multi-echo GRE signal synthesis.

#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "qsm/kernels.hpp"
#include "qsm/morphology.hpp"
#include "qsm/volume.hpp"

namespace qsm {

enum class TissueLabel { Air, BrainTissue, GrayMatter, DeepGray, Csf, Vein, Hemorrhage };

inline std::string_view to_string(TissueLabel l) {
  switch (l) {
    case TissueLabel::Air: return "air-background";
    case TissueLabel::BrainTissue: return "brain-tissue";
    case TissueLabel::GrayMatter: return "gray-matter";
    case TissueLabel::DeepGray: return "deep-gray";
    case TissueLabel::Csf: return "CSF";
    case TissueLabel::Vein: return "vein";
    case TissueLabel::Hemorrhage: return "hemorrhage";
  }
  return "?";
}

inline TissueLabel label_from_string(std::string_view s) {
  for (auto l : {TissueLabel::Air, TissueLabel::BrainTissue, TissueLabel::GrayMatter,
                 TissueLabel::DeepGray, TissueLabel::Csf, TissueLabel::Vein, TissueLabel::Hemorrhage})
    if (to_string(l) == s) return l;
  throw InvalidArgument("unknown tissue label '" + std::string(s) + "'");
}

enum class RegionShape { Ellipsoid, Shell, Sphere, Tube };

/// One painted region. Ellipsoids and shells use `semi_axes`; a shell keeps
/// the voxels within `thickness` of its outer surface (inner semi-axes are
/// outer minus thickness). Spheres use `radius`. Tubes are capsule-free
/// cylinders from `center` to `end` with `radius`.
struct Region {
  std::string name;
  RegionShape shape = RegionShape::Ellipsoid;
  TissueLabel label = TissueLabel::BrainTissue;
  Vec3 center{0, 0, 0};
  Vec3 semi_axes{1, 1, 1};
  Vec3 end{0, 0, 0};
  double radius = 1.0;
  double thickness = 1.0;
  double chi = 0.0;  // ppm

  [[nodiscard]] bool contains(const Vec3& p) const {
    switch (shape) {
      case RegionShape::Sphere: {
        double r2 = 0;
        for (int a = 0; a < 3; ++a) r2 += (p[a] - center[a]) * (p[a] - center[a]);
        return r2 <= radius * radius;
      }
      case RegionShape::Ellipsoid:
      case RegionShape::Shell: {
        double q = 0;
        for (int a = 0; a < 3; ++a) q += std::pow((p[a] - center[a]) / semi_axes[a], 2);
        if (q > 1.0) return false;
        if (shape == RegionShape::Ellipsoid) return true;
        double qi = 0;
        for (int a = 0; a < 3; ++a) {
          const double inner = semi_axes[a] - thickness;
          if (inner <= 0) return true;
          qi += std::pow((p[a] - center[a]) / inner, 2);
        }
        return qi > 1.0;
      }
      case RegionShape::Tube: {
        Vec3 ax{end[0] - center[0], end[1] - center[1], end[2] - center[2]};
        const double len2 = ax[0] * ax[0] + ax[1] * ax[1] + ax[2] * ax[2];
        Vec3 d{p[0] - center[0], p[1] - center[1], p[2] - center[2]};
        const double t = len2 > 0 ? (d[0] * ax[0] + d[1] * ax[1] + d[2] * ax[2]) / len2 : 0.0;
        if (t < 0.0 || t > 1.0) return false;
        double r2 = 0;
        for (int a = 0; a < 3; ++a) r2 += std::pow(d[a] - t * ax[a], 2);
        return r2 <= radius * radius;
      }
    }
    return false;
  }

  /// Axis-aligned bounding box (mm) as {lo, hi}.
  [[nodiscard]] std::pair<Vec3, Vec3> bounds() const {
    Vec3 lo{}, hi{};
    for (int a = 0; a < 3; ++a) {
      switch (shape) {
        case RegionShape::Sphere:
          lo[a] = center[a] - radius;
          hi[a] = center[a] + radius;
          break;
        case RegionShape::Ellipsoid:
        case RegionShape::Shell:
          lo[a] = center[a] - semi_axes[a];
          hi[a] = center[a] + semi_axes[a];
          break;
        case RegionShape::Tube:
          lo[a] = std::min(center[a], end[a]) - radius;
          hi[a] = std::max(center[a], end[a]) + radius;
          break;
      }
    }
    return {lo, hi};
  }
};

/// Per-label magnitude (0..1) and R2* (1/s).
struct TissueProperties {
  double magnitude = 1.0;
  double r2star = 20.0;
};

struct PhantomSpec {
  VoxelGrid grid;
  /// Painter's order. The first region is the brain envelope; later regions
  /// are clipped to it.
  std::vector<Region> regions;
  double chi_background = 9.4;  // ppm, exterior air
  /// Non-brain tissue (scalp, skull) kept between the brain envelope and air,
  /// with the envelope's susceptibility. Zero puts air directly on the brain.
  double head_margin = 0.0;  // mm
  std::map<TissueLabel, TissueProperties> properties = default_properties();

  static std::map<TissueLabel, TissueProperties> default_properties() {
    return {{TissueLabel::Air, {0.0, 0.0}},        {TissueLabel::BrainTissue, {1.0, 20.0}},
            {TissueLabel::GrayMatter, {0.9, 25.0}}, {TissueLabel::DeepGray, {0.85, 35.0}},
            {TissueLabel::Csf, {1.0, 4.0}},         {TissueLabel::Vein, {0.7, 80.0}},
            {TissueLabel::Hemorrhage, {0.5, 100.0}}};
  }

  /// 64^3, 1 mm isotropic desk phantom with cortex, a deep gray shell, five
  /// subcortical nuclei, a ventricle, a cortical vein and a peripheral bleed.
  static PhantomSpec desk(std::size_t n = 64, double spacing = 1.0) {
    PhantomSpec s;
    s.grid = VoxelGrid({n, n, n}, {spacing, spacing, spacing});
    const double c = 0.5 * static_cast<double>(n - 1) * spacing;
    const double f = static_cast<double>(n) * spacing / 64.0;  // geometry scales with FOV
    auto at = [&](double x, double y, double z) { return Vec3{c + x * f, c + y * f, c + z * f}; };
    auto ell = [&](std::string name, TissueLabel l, Vec3 ctr, Vec3 ax, double chi) {
      Region r;
      r.name = std::move(name);
      r.shape = RegionShape::Ellipsoid;
      r.label = l;
      r.center = ctr;
      r.semi_axes = {ax[0] * f, ax[1] * f, ax[2] * f};
      r.chi = chi;
      return r;
    };
    s.regions.push_back(ell("brain", TissueLabel::BrainTissue, at(0, 0, 0), {24, 26, 22}, 0.0));
    Region cortex = ell("cortex", TissueLabel::GrayMatter, at(0, 0, 0), {23, 25, 21}, 0.05);
    cortex.shape = RegionShape::Shell;
    cortex.thickness = 3.0 * f;
    s.regions.push_back(cortex);
    Region deep = ell("deep-gray-shell", TissueLabel::GrayMatter, at(0, 0, 0), {16, 18, 14}, 0.05);
    deep.shape = RegionShape::Shell;
    deep.thickness = 2.0 * f;
    s.regions.push_back(deep);
    s.regions.push_back(ell("ventricle", TissueLabel::Csf, at(0, -4, 3), {3, 7, 4}, 0.0));
    s.regions.push_back(ell("caudate", TissueLabel::DeepGray, at(-7, -6, 4), {3, 5, 4}, 0.06));
    s.regions.push_back(ell("putamen", TissueLabel::DeepGray, at(8, -3, 0), {3, 6, 5}, 0.09));
    s.regions.push_back(ell("pallidus", TissueLabel::DeepGray, at(-8, 3, -3), {3, 4, 4}, 0.18));
    s.regions.push_back(ell("thalamus", TissueLabel::DeepGray, at(0, 6, 2), {5, 4, 4}, 0.04));
    s.regions.push_back(ell("nigra", TissueLabel::DeepGray, at(3, 7, -8), {3, 3, 3}, 0.14));

    Region vein;
    vein.name = "cortical-vein";
    vein.shape = RegionShape::Tube;
    vein.label = TissueLabel::Vein;
    vein.center = at(-4, -12, 20.5);
    vein.end = at(-4, 12, 20.5);
    vein.radius = 1.5 * f;
    vein.chi = 0.3;
    s.regions.push_back(vein);

    Region bleed;
    bleed.name = "hemorrhage";
    bleed.shape = RegionShape::Sphere;
    bleed.label = TissueLabel::Hemorrhage;
    bleed.center = at(17, 4, -2);
    bleed.radius = 3.0 * f;
    bleed.chi = 1.0;
    s.regions.push_back(bleed);
    s.head_margin = 3.0 * f;
    return s;
  }
};

struct Phantom {
  ScalarVolume chi;  // ppm, chi_background outside the brain
  MaskVolume brain, gray, csf, vein, hemorrhage;
  MaskVolume head;  // non-brain tissue around the brain
  ScalarVolume magnitude;
  ScalarVolume r2star;
  std::vector<std::int32_t> labels;  // region index per voxel, -1 outside
  std::vector<std::string> region_names;

  /// Mask of one painted region (by index into the spec's region list).
  [[nodiscard]] MaskVolume region_mask(std::size_t region) const {
    MaskVolume m(chi.grid());
    for (std::size_t n = 0; n < labels.size(); ++n)
      m.set(n, labels[n] == static_cast<std::int32_t>(region));
    return m;
  }
};

inline Phantom build_phantom(const PhantomSpec& spec) {
  const auto& g = spec.grid;
  g.validate();
  if (spec.regions.empty()) throw InvalidArgument("phantom spec has no regions");
  const Vec3 lo{g.origin[0], g.origin[1], g.origin[2]};
  const Vec3 hi{g.origin[0] + g.spacing[0] * static_cast<double>(g.dims[0] - 1),
                g.origin[1] + g.spacing[1] * static_cast<double>(g.dims[1] - 1),
                g.origin[2] + g.spacing[2] * static_cast<double>(g.dims[2] - 1)};
  for (const auto& r : spec.regions) {
    const auto [blo, bhi] = r.bounds();
    for (int a = 0; a < 3; ++a)
      if (blo[a] < lo[a] || bhi[a] > hi[a])
        throw InvalidArgument("region '" + r.name + "' extends outside the grid");
  }

  Phantom p;
  p.labels.assign(g.size(), -1);
  for (const auto& r : spec.regions) p.region_names.push_back(r.name);
  for (std::size_t k = 0; k < g.dims[2]; ++k)
    for (std::size_t j = 0; j < g.dims[1]; ++j)
      for (std::size_t i = 0; i < g.dims[0]; ++i) {
        const auto pos = g.position(i, j, k);
        const auto n = g.index(i, j, k);
        for (std::size_t r = 0; r < spec.regions.size(); ++r) {
          if (r > 0 && p.labels[n] < 0) break;  // clipped to the brain envelope
          if (spec.regions[r].contains(pos)) p.labels[n] = static_cast<std::int32_t>(r);
        }
      }

  p.chi = ScalarVolume(g, Unit::Ppm);
  p.magnitude = ScalarVolume(g);
  p.r2star = ScalarVolume(g, Unit::PerSecond);
  p.brain = MaskVolume(g);
  p.gray = MaskVolume(g);
  p.csf = MaskVolume(g);
  p.vein = MaskVolume(g);
  p.hemorrhage = MaskVolume(g);
  auto props = [&](TissueLabel l) {
    auto it = spec.properties.find(l);
    return it != spec.properties.end() ? it->second : TissueProperties{};
  };
  for (std::size_t n = 0; n < g.size(); ++n) {
    const auto idx = p.labels[n];
    const TissueLabel l = idx < 0 ? TissueLabel::Air : spec.regions[static_cast<std::size_t>(idx)].label;
    p.chi[n] = idx < 0 ? spec.chi_background : spec.regions[static_cast<std::size_t>(idx)].chi;
    p.magnitude[n] = props(l).magnitude;
    p.r2star[n] = props(l).r2star;
    p.brain.set(n, idx >= 0);
    p.gray.set(n, l == TissueLabel::GrayMatter);
    p.csf.set(n, l == TissueLabel::Csf);
    p.vein.set(n, l == TissueLabel::Vein);
    p.hemorrhage.set(n, l == TissueLabel::Hemorrhage);
  }

  p.head = MaskVolume(g);
  if (spec.head_margin < 0.0) throw InvalidArgument("head margin must be >= 0");
  if (spec.head_margin > 0.0) {
    const auto dist = distance_to_mask(p.brain);
    const auto& envelope = spec.regions.front();
    const auto tp = props(envelope.label);
    for (std::size_t n = 0; n < g.size(); ++n)
      if (!p.brain[n] && dist[n] <= spec.head_margin) {
        const auto c = g.coords(n);
        for (int a = 0; a < 3; ++a)
          if (c[a] == 0 || c[a] + 1 == g.dims[a])
            throw InvalidArgument("head margin extends outside the grid");
        p.head.set(n, true);
        p.chi[n] = envelope.chi;
        p.magnitude[n] = tp.magnitude;
        p.r2star[n] = tp.r2star;
      }
  }
  return p;
}

/// Indices of regions with the deep-gray label, used as ROIs.
inline std::vector<std::size_t> deep_gray_regions(const PhantomSpec& spec) {
  std::vector<std::size_t> out;
  for (std::size_t r = 0; r < spec.regions.size(); ++r)
    if (spec.regions[r].label == TissueLabel::DeepGray) out.push_back(r);
  return out;
}

struct AcquisitionParams {
  double b0 = 3.0;              // T
  double te1 = 2.6e-3;          // s
  double delta_te = 2.6e-3;     // s
  std::size_t n_echoes = 11;
  double snr = 50.0;
  Vec3 b0_dir{0.0, 0.0, 1.0};

  [[nodiscard]] double central_frequency() const { return kGamma * b0; }
  [[nodiscard]] std::vector<double> echo_times() const {
    std::vector<double> te(n_echoes);
    for (std::size_t j = 0; j < n_echoes; ++j) te[j] = te1 + static_cast<double>(j) * delta_te;
    return te;
  }
  [[nodiscard]] std::vector<std::string> violations() const {
    std::vector<std::string> v;
    if (!(b0 > 0)) v.emplace_back("B0 must be > 0");
    if (n_echoes < 2) v.emplace_back("n_echoes must be >= 2");
    if (!(snr > 0)) v.emplace_back("SNR must be > 0");
    if (!(te1 >= 0) || !(delta_te > 0)) v.emplace_back("echo timing must be positive");
    return v;
  }
  void validate() const {
    if (auto v = violations(); !v.empty()) throw InvalidArgument(v.front());
  }
};

struct FieldSplit {
  ScalarVolume total, tissue, background;  // Hz
};

/// Split the susceptibility by the brain mask and convolve each part with
/// the dipole kernel. total = tissue + background by construction.
inline FieldSplit forward_field(const ScalarVolume& chi, const MaskVolume& brain,
                                const AcquisitionParams& acq) {
  require_same_grid(chi.grid(), brain.grid(), "forward_field");
  const auto kernel = DipoleKernel::padded_for(chi.grid(), acq.b0_dir);
  ScalarVolume inside(chi.grid(), Unit::Ppm), outside(chi.grid(), Unit::Ppm);
  for (std::size_t n = 0; n < chi.size(); ++n) (brain[n] ? inside : outside)[n] = chi[n];
  FieldSplit f;
  f.tissue = dipole_convolve(inside, kernel, acq.b0);
  f.background = dipole_convolve(outside, kernel, acq.b0);
  f.total = ScalarVolume(chi.grid(), Unit::Hz);
  for (std::size_t n = 0; n < chi.size(); ++n) f.total[n] = f.tissue[n] + f.background[n];
  return f;
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Counter-based standard normal pair for (seed, stream, index).
inline std::pair<double, double> gaussian_pair(std::uint64_t seed, std::uint64_t stream,
                                               std::uint64_t index) {
  const std::uint64_t key = splitmix64(seed ^ splitmix64(stream * 0x632be59bd9b4e019ULL + index));
  const std::uint64_t a = splitmix64(key);
  const std::uint64_t b = splitmix64(key ^ 0xd1b54a32d192ed03ULL);
  const double u1 = (static_cast<double>(a >> 11) + 0.5) * 0x1.0p-53;
  const double u2 = static_cast<double>(b >> 11) * 0x1.0p-53;
  const double rad = std::sqrt(-2.0 * std::log(u1));
  return {rad * std::cos(2.0 * std::numbers::pi * u2), rad * std::sin(2.0 * std::numbers::pi * u2)};
}

}  // namespace detail

/// S(TE_j) = A exp(-R2* TE_j) exp(-2 pi i b TE_j) + n_j, with n_j complex
/// Gaussian of per-component standard deviation 1/SNR. `field` is in Hz
/// (or ppm, converted with the central frequency). Noise is drawn from a
/// counter-based generator, so the result depends only on the inputs and seed.
inline MultiEchoVolume synthesize_mgre(const ScalarVolume& magnitude, const ScalarVolume& field,
                                       const ScalarVolume& r2star, const AcquisitionParams& acq,
                                       std::uint64_t seed) {
  require_same_grid(magnitude.grid(), field.grid(), "synthesize_mgre");
  require_same_grid(magnitude.grid(), r2star.grid(), "synthesize_mgre");
  MultiEchoVolume out(magnitude.grid(), acq.echo_times());
  const double to_hz = field.unit() == Unit::Ppm ? acq.central_frequency() * 1e-6 : 1.0;
  const double sigma = std::isinf(acq.snr) ? 0.0 : 1.0 / acq.snr;
  const auto& te = out.echo_times();
  for (std::size_t j = 0; j < te.size(); ++j) {
    auto s = out.echo(j);
    for (std::size_t n = 0; n < s.size(); ++n) {
      const double amp = magnitude[n] * std::exp(-r2star[n] * te[j]);
      const double phase = -2.0 * std::numbers::pi * field[n] * to_hz * te[j];
      s[n] = std::polar(amp, phase);
      if (sigma > 0.0) {
        const auto [nr, ni] = detail::gaussian_pair(seed, j, n);
        s[n] += std::complex<double>(sigma * nr, sigma * ni);
      }
    }
  }
  return out;
}

// JSON ----------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const Region& r) {
  static const char* shapes[] = {"ellipsoid", "shell", "sphere", "tube"};
  j = {{"name", r.name},
       {"shape", shapes[static_cast<int>(r.shape)]},
       {"label", std::string(to_string(r.label))},
       {"center_mm", r.center},
       {"chi_ppm", r.chi}};
  switch (r.shape) {
    case RegionShape::Shell: j["thickness_mm"] = r.thickness; [[fallthrough]];
    case RegionShape::Ellipsoid: j["semi_axes_mm"] = r.semi_axes; break;
    case RegionShape::Sphere: j["radius_mm"] = r.radius; break;
    case RegionShape::Tube:
      j["end_mm"] = r.end;
      j["radius_mm"] = r.radius;
      break;
  }
}

inline void from_json(const nlohmann::json& j, Region& r) {
  r.name = j.value("name", "");
  const auto shape = j.at("shape").get<std::string>();
  if (shape == "ellipsoid") r.shape = RegionShape::Ellipsoid;
  else if (shape == "shell") r.shape = RegionShape::Shell;
  else if (shape == "sphere") r.shape = RegionShape::Sphere;
  else if (shape == "tube") r.shape = RegionShape::Tube;
  else throw InvalidArgument("unknown region shape '" + shape + "'");
  r.label = label_from_string(j.at("label").get<std::string>());
  r.center = j.at("center_mm").get<Vec3>();
  r.chi = j.at("chi_ppm").get<double>();
  if (j.contains("semi_axes_mm")) r.semi_axes = j.at("semi_axes_mm").get<Vec3>();
  if (j.contains("radius_mm")) r.radius = j.at("radius_mm").get<double>();
  if (j.contains("thickness_mm")) r.thickness = j.at("thickness_mm").get<double>();
  if (j.contains("end_mm")) r.end = j.at("end_mm").get<Vec3>();
}

inline void to_json(nlohmann::json& j, const PhantomSpec& s) {
  j = {{"dims", s.grid.dims},
       {"spacing_mm", s.grid.spacing},
       {"origin_mm", s.grid.origin},
       {"chi_background_ppm", s.chi_background},
       {"head_margin_mm", s.head_margin},
       {"regions", s.regions}};
  nlohmann::json props = nlohmann::json::object();
  for (const auto& [l, p] : s.properties)
    props[std::string(to_string(l))] = {{"magnitude", p.magnitude}, {"r2star", p.r2star}};
  j["tissue_properties"] = props;
}

inline void from_json(const nlohmann::json& j, PhantomSpec& s) {
  if (j.value("preset", "") == "desk") {
    s = PhantomSpec::desk(j.value("size", std::size_t{64}), j.value("spacing", 1.0));
  } else {
    s.grid = VoxelGrid(j.at("dims").get<Index3>(), j.at("spacing_mm").get<Vec3>(),
                       j.value("origin_mm", Vec3{0, 0, 0}));
    s.regions = j.at("regions").get<std::vector<Region>>();
  }
  s.chi_background = j.value("chi_background_ppm", s.chi_background);
  s.head_margin = j.value("head_margin_mm", s.head_margin);
  if (j.contains("tissue_properties"))
    for (const auto& [k, v] : j.at("tissue_properties").items())
      s.properties[label_from_string(k)] = {v.value("magnitude", 1.0), v.value("r2star", 0.0)};
}

inline void to_json(nlohmann::json& j, const AcquisitionParams& a) {
  j = {{"b0_tesla", a.b0},       {"te1_s", a.te1},          {"delta_te_s", a.delta_te},
       {"n_echoes", a.n_echoes}, {"snr", a.snr},            {"b0_direction", a.b0_dir}};
}

inline void from_json(const nlohmann::json& j, AcquisitionParams& a) {
  a.b0 = j.value("b0_tesla", a.b0);
  a.te1 = j.value("te1_s", a.te1);
  a.delta_te = j.value("delta_te_s", a.delta_te);
  a.n_echoes = j.value("n_echoes", a.n_echoes);
  a.snr = j.value("snr", a.snr);
  a.b0_dir = j.value("b0_direction", a.b0_dir);
}

}  // namespace qsm
