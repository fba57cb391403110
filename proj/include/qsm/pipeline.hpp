#pragma once

// Experiment orchestration: config schema and validation, stage execution
// over (background removal x inversion variant) branches, the metrics
// report and a content-hashed run manifest.

#include <atomic>
#include <chrono>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "qsm/background_removal.hpp"
#include "qsm/dipole_inversion.hpp"
#include "qsm/field_estimation.hpp"
#include "qsm/io.hpp"
#include "qsm/metrics.hpp"
#include "qsm/msmv.hpp"
#include "qsm/phantom.hpp"
#include "qsm/vesselness.hpp"

namespace qsm {

inline constexpr const char* kVersion = "0.1.0";

// Hashing ---------------------------------------------------------------------

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string file_hash(const fs::path& p) {
  const auto b = detail::read_file(p);
  return hex64(fnv1a64({b.data(), b.size()}));
}

/// Hash of a JSON value in canonical form (nlohmann sorts object keys).
inline std::string json_hash(const nlohmann::json& j) { return hex64(fnv1a64(j.dump())); }

// Config ----------------------------------------------------------------------

enum class BfrMethod { Pdf, Vsharp, External };

inline std::string_view to_string(BfrMethod m) {
  switch (m) {
    case BfrMethod::Pdf: return "pdf";
    case BfrMethod::Vsharp: return "vsharp";
    case BfrMethod::External: return "external";
  }
  return "pdf";
}

inline BfrMethod bfr_from_string(std::string_view s) {
  if (s == "pdf") return BfrMethod::Pdf;
  if (s == "vsharp") return BfrMethod::Vsharp;
  if (s == "external") return BfrMethod::External;
  throw InvalidArgument("unknown background removal method '" + std::string(s) + "'");
}

struct BfrConfig {
  std::vector<BfrMethod> methods{BfrMethod::Pdf};
  PdfParams pdf;
  VsharpParams vsharp;
  fs::path external_path;  // local field volume (Hz) on the brain mask
};

struct PipelineConfig {
  PhantomSpec phantom = PhantomSpec::desk();
  AcquisitionParams acquisition;
  BfrConfig bfr;
  bool msmv_enabled = true;
  MsmvParams msmv;
  std::vector<MediParams> inversions;  // one entry per variant, in run order
  std::vector<std::string> rois;       // region names; empty selects the deep-gray regions
  std::string metrics_csv = "metrics.csv";
  std::string summary = "summary.txt";
  std::uint64_t seed = 7;
};

inline nlohmann::json to_json_value(const FrangiParams& p) {
  return {{"scales_mm", p.scales_mm}, {"alpha", p.alpha}, {"beta", p.beta},
          {"c_fraction", p.c_fraction}, {"threshold", p.threshold}};
}

inline nlohmann::json to_json_value(const MsmvParams& p) {
  return {{"r1_mm", p.r1}, {"t_min_hz", p.t_min}, {"i_max", p.i_max}, {"alpha", p.alpha},
          {"eps", p.eps}, {"vessel", to_json_value(p.vessel)}};
}

inline nlohmann::json to_json_value(const MediParams& p) {
  return {{"variant", std::string(to_string(p.variant))},
          {"lambda1", p.lambda1},
          {"lambda2", p.lambda2},
          {"r1_mm", p.r1},
          {"outer_iterations", p.outer_iterations},
          {"cg_iterations", p.cg_iterations},
          {"cg_tolerance", p.cg_tolerance},
          {"tolerance", p.tolerance},
          {"edge_fraction", p.edge_fraction},
          {"mu", p.mu}};
}

inline nlohmann::json to_json_value(const PdfParams& p) {
  return {{"max_iterations", p.max_iterations}, {"tolerance", p.tolerance}};
}

inline nlohmann::json to_json_value(const VsharpParams& p) {
  return {{"r_max_mm", p.r_max}, {"r_min_mm", p.r_min}, {"n_radii", p.n_radii},
          {"tsvd_threshold", p.tsvd_threshold}};
}

/// The effective config, fully expanded. Its hash identifies a run.
inline nlohmann::json config_to_json(const PipelineConfig& c) {
  nlohmann::json methods = nlohmann::json::array();
  for (auto m : c.bfr.methods) methods.push_back(std::string(to_string(m)));
  nlohmann::json variants = nlohmann::json::array();
  for (const auto& v : c.inversions) variants.push_back(to_json_value(v));
  nlohmann::json bfr = {{"methods", methods},
                        {"pdf", to_json_value(c.bfr.pdf)},
                        {"vsharp", to_json_value(c.bfr.vsharp)}};
  if (!c.bfr.external_path.empty()) bfr["external"] = {{"path", c.bfr.external_path.string()}};
  auto msmv = to_json_value(c.msmv);
  msmv["enabled"] = c.msmv_enabled;
  return {{"phantom", c.phantom},
          {"acquisition", c.acquisition},
          {"bfr", bfr},
          {"msmv", msmv},
          {"inversion", {{"variants", variants}}},
          {"metrics", {{"rois", c.rois}, {"csv", c.metrics_csv}, {"summary", c.summary}}},
          {"seed", c.seed}};
}

namespace detail {

// Collects violations instead of stopping at the first one.
class ConfigReader {
 public:
  std::vector<std::string> violations;

  void add(const std::string& field, const std::string& msg) { violations.push_back(field + ": " + msg); }

  template <class T>
  void read(const nlohmann::json& j, const char* key, T& out, const std::string& path) {
    if (!j.contains(key)) return;
    try {
      out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      add(path + "." + key, "has the wrong type (" + std::string(j.at(key).type_name()) + ")");
    }
  }

  bool object(const nlohmann::json& j, const std::string& path) {
    if (j.is_object()) return true;
    add(path, "must be an object");
    return false;
  }

  void known_keys(const nlohmann::json& j, std::initializer_list<const char*> keys, const std::string& path) {
    for (const auto& [k, v] : j.items()) {
      bool ok = false;
      for (const char* key : keys) ok = ok || k == key;
      if (!ok) add(path.empty() ? k : path + "." + k, "unknown key");
    }
  }

  void prefixed(const std::string& path, const std::vector<std::string>& msgs) {
    for (const auto& m : msgs) add(path, m);
  }
};

inline void read_medi(ConfigReader& r, const nlohmann::json& j, MediParams& p, const std::string& path) {
  r.known_keys(j, {"variant", "lambda1", "lambda2", "r1_mm", "outer_iterations", "cg_iterations",
                   "cg_tolerance", "tolerance", "edge_fraction", "mu"}, path);
  r.read(j, "lambda1", p.lambda1, path);
  r.read(j, "lambda2", p.lambda2, path);
  r.read(j, "r1_mm", p.r1, path);
  r.read(j, "outer_iterations", p.outer_iterations, path);
  r.read(j, "cg_iterations", p.cg_iterations, path);
  r.read(j, "cg_tolerance", p.cg_tolerance, path);
  r.read(j, "tolerance", p.tolerance, path);
  r.read(j, "edge_fraction", p.edge_fraction, path);
  r.read(j, "mu", p.mu, path);
}

}  // namespace detail

struct ConfigCheck {
  std::optional<PipelineConfig> config;
  std::vector<std::string> violations;
  [[nodiscard]] bool ok() const { return config.has_value(); }
};

/// Parses and checks a config. Relative paths resolve against base_dir.
/// Every violation is reported; nothing is thrown.
inline ConfigCheck validate_config(const nlohmann::json& j, const fs::path& base_dir = ".") {
  detail::ConfigReader r;
  PipelineConfig c;
  if (!r.object(j, "config")) return {std::nullopt, r.violations};
  r.known_keys(j, {"phantom", "acquisition", "bfr", "msmv", "inversion", "metrics", "seed"}, "");

  bool grid_ok = false;
  if (j.contains("phantom") && r.object(j["phantom"], "phantom")) {
    try {
      c.phantom = j["phantom"].get<PhantomSpec>();
      c.phantom.grid.validate();
      grid_ok = true;
      if (c.phantom.regions.empty()) r.add("phantom.regions", "at least the brain envelope region is required");
      if (!(c.phantom.head_margin >= 0.0)) r.add("phantom.head_margin_mm", "must be >= 0");
    } catch (const std::exception& e) {
      r.add("phantom", e.what());
    }
  } else if (!j.contains("phantom")) {
    grid_ok = true;
  }

  if (j.contains("acquisition") && r.object(j["acquisition"], "acquisition")) {
    const auto& a = j["acquisition"];
    r.known_keys(a, {"b0_tesla", "te1_s", "delta_te_s", "n_echoes", "snr", "b0_direction"}, "acquisition");
    r.read(a, "b0_tesla", c.acquisition.b0, "acquisition");
    r.read(a, "te1_s", c.acquisition.te1, "acquisition");
    r.read(a, "delta_te_s", c.acquisition.delta_te, "acquisition");
    r.read(a, "n_echoes", c.acquisition.n_echoes, "acquisition");
    r.read(a, "snr", c.acquisition.snr, "acquisition");
    r.read(a, "b0_direction", c.acquisition.b0_dir, "acquisition");
  }
  r.prefixed("acquisition", c.acquisition.violations());

  if (j.contains("bfr") && r.object(j["bfr"], "bfr")) {
    const auto& b = j["bfr"];
    r.known_keys(b, {"methods", "pdf", "vsharp", "external"}, "bfr");
    if (b.contains("methods")) {
      c.bfr.methods.clear();
      if (!b["methods"].is_array()) {
        r.add("bfr.methods", "must be a list");
      } else {
        for (const auto& m : b["methods"]) {
          try {
            c.bfr.methods.push_back(bfr_from_string(m.get<std::string>()));
          } catch (const std::exception&) {
            r.add("bfr.methods", "unknown method " + m.dump() + " (expected pdf, vsharp or external)");
          }
        }
      }
      if (c.bfr.methods.empty()) r.add("bfr.methods", "must list at least one method");
    }
    if (b.contains("pdf") && r.object(b["pdf"], "bfr.pdf")) {
      r.known_keys(b["pdf"], {"max_iterations", "tolerance"}, "bfr.pdf");
      r.read(b["pdf"], "max_iterations", c.bfr.pdf.max_iterations, "bfr.pdf");
      r.read(b["pdf"], "tolerance", c.bfr.pdf.tolerance, "bfr.pdf");
    }
    if (b.contains("vsharp") && r.object(b["vsharp"], "bfr.vsharp")) {
      r.known_keys(b["vsharp"], {"r_max_mm", "r_min_mm", "n_radii", "tsvd_threshold"}, "bfr.vsharp");
      r.read(b["vsharp"], "r_max_mm", c.bfr.vsharp.r_max, "bfr.vsharp");
      r.read(b["vsharp"], "r_min_mm", c.bfr.vsharp.r_min, "bfr.vsharp");
      r.read(b["vsharp"], "n_radii", c.bfr.vsharp.n_radii, "bfr.vsharp");
      r.read(b["vsharp"], "tsvd_threshold", c.bfr.vsharp.tsvd_threshold, "bfr.vsharp");
    }
    if (b.contains("external") && r.object(b["external"], "bfr.external")) {
      r.known_keys(b["external"], {"path"}, "bfr.external");
      std::string path;
      r.read(b["external"], "path", path, "bfr.external");
      if (!path.empty()) c.bfr.external_path = fs::path(path).is_absolute() ? fs::path(path) : base_dir / path;
    }
  }
  if (c.bfr.pdf.max_iterations < 1) r.add("bfr.pdf.max_iterations", "must be >= 1");
  if (!(c.bfr.pdf.tolerance > 0.0)) r.add("bfr.pdf.tolerance", "must be > 0");
  if (!(c.bfr.vsharp.r_min > 0.0) || !(c.bfr.vsharp.r_max > c.bfr.vsharp.r_min))
    r.add("bfr.vsharp", "require r_max_mm > r_min_mm > 0");
  if (c.bfr.vsharp.n_radii < 2) r.add("bfr.vsharp.n_radii", "must be >= 2");
  if (!(c.bfr.vsharp.tsvd_threshold > 0.0 && c.bfr.vsharp.tsvd_threshold < 1.0))
    r.add("bfr.vsharp.tsvd_threshold", "must be in (0,1)");
  if (std::find(c.bfr.methods.begin(), c.bfr.methods.end(), BfrMethod::External) != c.bfr.methods.end()) {
    if (c.bfr.external_path.empty())
      r.add("bfr.external.path", "required when the external method is listed");
    else if (!fs::exists(c.bfr.external_path))
      r.add("bfr.external.path", "file not found: " + c.bfr.external_path.string());
  }

  if (j.contains("msmv") && r.object(j["msmv"], "msmv")) {
    const auto& m = j["msmv"];
    r.known_keys(m, {"enabled", "r1_mm", "t_min_hz", "i_max", "alpha", "eps", "vessel"}, "msmv");
    r.read(m, "enabled", c.msmv_enabled, "msmv");
    r.read(m, "r1_mm", c.msmv.r1, "msmv");
    r.read(m, "t_min_hz", c.msmv.t_min, "msmv");
    r.read(m, "i_max", c.msmv.i_max, "msmv");
    r.read(m, "alpha", c.msmv.alpha, "msmv");
    r.read(m, "eps", c.msmv.eps, "msmv");
    if (m.contains("vessel") && r.object(m["vessel"], "msmv.vessel")) {
      const auto& v = m["vessel"];
      r.known_keys(v, {"scales_mm", "alpha", "beta", "c_fraction", "threshold"}, "msmv.vessel");
      r.read(v, "scales_mm", c.msmv.vessel.scales_mm, "msmv.vessel");
      r.read(v, "alpha", c.msmv.vessel.alpha, "msmv.vessel");
      r.read(v, "beta", c.msmv.vessel.beta, "msmv.vessel");
      r.read(v, "c_fraction", c.msmv.vessel.c_fraction, "msmv.vessel");
      r.read(v, "threshold", c.msmv.vessel.threshold, "msmv.vessel");
    }
  }
  if (grid_ok) r.prefixed("msmv", c.msmv.violations(c.phantom.grid));

  MediParams shared;
  shared.b0_dir = c.acquisition.b0_dir;
  std::vector<nlohmann::json> variant_entries;
  if (j.contains("inversion") && r.object(j["inversion"], "inversion")) {
    auto inv = j["inversion"];
    if (inv.contains("variants")) {
      if (inv["variants"].is_array()) {
        for (const auto& v : inv["variants"]) variant_entries.push_back(v);
      } else {
        r.add("inversion.variants", "must be a list");
      }
      inv.erase("variants");
    }
    detail::read_medi(r, inv, shared, "inversion");
  }
  if (variant_entries.empty()) r.add("inversion.variants", "must list at least one variant");
  for (std::size_t i = 0; i < variant_entries.size(); ++i) {
    const auto& v = variant_entries[i];
    const std::string path = "inversion.variants[" + std::to_string(i) + "]";
    MediParams p = shared;
    try {
      if (v.is_string()) {
        p.variant = variant_from_string(v.get<std::string>());
      } else if (v.is_object() && v.contains("variant") && v["variant"].is_string()) {
        p.variant = variant_from_string(v["variant"].get<std::string>());
        detail::read_medi(r, v, p, path);
      } else {
        r.add(path, "must be a variant name or an object with a \"variant\" field");
        continue;
      }
    } catch (const std::exception& e) {
      r.add(path, e.what());
      continue;
    }
    // The filtered forward model has to match the radius the field was filtered with.
    const bool overrides_r1 = v.is_object() && v.contains("r1_mm");
    const bool shared_r1 = j.contains("inversion") && j["inversion"].is_object() && j["inversion"].contains("r1_mm");
    if (p.variant == MediVariant::MediMsmv) {
      if (!c.msmv_enabled) r.add(path, "medi-msmv requires msmv.enabled");
      if (!overrides_r1 && !shared_r1) p.r1 = c.msmv.r1;
      if (p.r1 != c.msmv.r1) r.add(path + ".r1_mm", "must equal msmv.r1_mm for medi-msmv");
    }
    for (const auto& q : c.inversions)
      if (q.variant == p.variant) r.add(path, "variant '" + std::string(to_string(p.variant)) + "' listed twice");
    r.prefixed(path, p.violations());
    c.inversions.push_back(p);
  }

  if (j.contains("metrics") && r.object(j["metrics"], "metrics")) {
    const auto& m = j["metrics"];
    r.known_keys(m, {"rois", "csv", "summary"}, "metrics");
    r.read(m, "rois", c.rois, "metrics");
    r.read(m, "csv", c.metrics_csv, "metrics");
    r.read(m, "summary", c.summary, "metrics");
  }
  for (const auto* name : {&c.metrics_csv, &c.summary})
    if (name->empty() || fs::path(*name).has_parent_path())
      r.add("metrics", "output names must be plain file names, got '" + *name + "'");
  {
    std::size_t n_rois = 0;
    if (c.rois.empty()) {
      n_rois = deep_gray_regions(c.phantom).size();
    } else {
      for (const auto& name : c.rois) {
        bool found = false;
        for (const auto& reg : c.phantom.regions) found = found || reg.name == name;
        if (!found) r.add("metrics.rois", "unknown region '" + name + "'");
      }
      n_rois = c.rois.size();
    }
    if (n_rois < 3) r.add("metrics.rois", "ROI regression needs at least 3 regions");
  }

  if (j.contains("seed")) {
    const auto& s = j["seed"];
    if (s.is_number_unsigned() || (s.is_number_integer() && s.get<std::int64_t>() >= 0))
      c.seed = s.get<std::uint64_t>();
    else r.add("seed", "must be a non-negative integer");
  }

  if (!r.violations.empty()) return {std::nullopt, r.violations};
  return {c, {}};
}

inline ConfigCheck validate_config(const fs::path& path) {
  if (!fs::exists(path)) return {std::nullopt, {"config: file not found: " + path.string()}};
  nlohmann::json j;
  try {
    const auto bytes = detail::read_file(path);
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const std::exception& e) {
    return {std::nullopt, {std::string("config: parse error: ") + e.what()}};
  }
  return validate_config(j, path.parent_path());
}

// Metrics report ----------------------------------------------------------------

struct MethodChi {
  std::string name;
  ScalarVolume chi;
  MaskVolume mask;
};

struct NamedMask {
  std::string name;
  MaskVolume mask;
};

struct MetricsReport {
  std::string csv;
  std::string summary;
};

/// "pdf+medi-msmv" -> "PDF+MEDI-mSMV"; other names pass through.
inline std::string display_name(const std::string& method) {
  static const std::map<std::string, std::string> parts{
      {"pdf", "PDF"}, {"vsharp", "VSHARP"}, {"external", "External"},
      {"medi", "MEDI"}, {"medi-smv", "MEDI-SMV"}, {"medi-msmv", "MEDI-mSMV"}};
  const auto plus = method.find('+');
  if (plus == std::string::npos) return method;
  const auto a = parts.find(method.substr(0, plus));
  const auto b = parts.find(method.substr(plus + 1));
  if (a == parts.end() || b == parts.end()) return method;
  return a->second + "+" + b->second;
}

namespace detail {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

inline std::string fix(double v, int digits) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace detail

/// Scores each method: gray-matter shadow score, and ROI-mean regression,
/// Bland-Altman and Wilcoxon against the reference (the ground truth when
/// given, else the first method).
inline MetricsReport evaluate_methods(const std::vector<MethodChi>& methods, const ScalarVolume* truth,
                                      const MaskVolume& gray, const std::vector<NamedMask>& rois) {
  using detail::num;
  if (methods.empty()) throw InvalidArgument("metrics: no methods to score");
  const ScalarVolume& ref = truth ? *truth : methods.front().chi;
  const std::string ref_name = truth ? "truth" : methods.front().name;
  std::vector<double> ref_means;
  for (const auto& roi : rois) ref_means.push_back(masked_mean(ref, roi.mask));

  std::string csv =
      "method,reference,support_voxels,shadow_score_ppm2,roi_n,roi_slope,roi_intercept,roi_r,"
      "ba_bias_ppm,ba_loa_low_ppm,ba_loa_high_ppm,wilcoxon_statistic,wilcoxon_p,wilcoxon_n\n";
  std::string summary;
  std::vector<std::optional<double>> shadows;
  std::vector<std::vector<double>> means(methods.size());

  for (std::size_t i = 0; i < methods.size(); ++i) {
    const auto& m = methods[i];
    std::string row = m.name + "," + ref_name + "," + std::to_string(m.mask.count()) + ",";
    const auto g = mask_and(gray, m.mask);
    if (g.empty()) {
      shadows.emplace_back();
      row += "NA,";
    } else {
      shadows.emplace_back(shadow_score(m.chi, g));
      row += num(*shadows.back()) + ",";
    }
    for (const auto& roi : rois) means[i].push_back(masked_mean(m.chi, roi.mask));
    row += std::to_string(rois.size()) + ",";
    try {
      const auto reg = linear_regression(ref_means, means[i]);
      row += num(reg.slope) + "," + num(reg.intercept) + "," + num(reg.r) + ",";
    } catch (const InvalidArgument&) {
      row += "NA,NA,NA,";
    }
    try {
      const auto ba = bland_altman(means[i], ref_means);
      row += num(ba.bias) + "," + num(ba.loa_low) + "," + num(ba.loa_high) + ",";
    } catch (const InvalidArgument&) {
      row += "NA,NA,NA,";
    }
    try {
      const auto w = wilcoxon_signed_rank(means[i], ref_means);
      row += num(w.statistic) + "," + num(w.p) + "," + std::to_string(w.n);
    } catch (const InvalidArgument&) {
      row += "NA,NA,NA";
    }
    csv += row + "\n";
  }

  // Plain-text summary.
  summary += "Shadow score (susceptibility variance within the gray matter mask):\n";
  for (std::size_t i = 0; i < methods.size(); ++i)
    summary += "  " + display_name(methods[i].name) + ": " +
               (shadows[i] ? detail::sci(*shadows[i]) + " ppm^2" : std::string("not available")) + "\n";
  for (std::size_t i = 0; i < methods.size(); ++i) {
    const auto& name = methods[i].name;
    const auto plus = name.find('+');
    if (plus == std::string::npos || name.substr(plus + 1) != "medi-msmv") continue;
    for (std::size_t k = 0; k < methods.size(); ++k) {
      if (methods[k].name != name.substr(0, plus) + "+medi" || !shadows[i] || !shadows[k] || *shadows[k] == 0.0)
        continue;
      const double change = 100.0 * (1.0 - *shadows[i] / *shadows[k]);
      summary += "  " + display_name(name) + " " + (change >= 0 ? "reduced" : "increased") +
                 " the shadow score by " + detail::fix(std::abs(change), 1) + "% relative to " +
                 display_name(methods[k].name) + ".\n";
      try {
        const auto ba = bland_altman(means[i], means[k]);
        summary += "  Bland-Altman " + display_name(name) + " vs " + display_name(methods[k].name) +
                   " over ROI means: bias " + detail::fix(ba.bias, 3) + " ppm, limits of agreement [" +
                   detail::fix(ba.loa_low, 3) + " ppm, " + detail::fix(ba.loa_high, 3) + " ppm].\n";
      } catch (const InvalidArgument&) {
      }
    }
  }
  summary += "ROI-mean agreement with " + (truth ? std::string("the ground truth") : display_name(ref_name)) +
             " across " + std::to_string(rois.size()) + " ROIs:\n";
  for (std::size_t i = 0; i < methods.size(); ++i) {
    summary += "  " + display_name(methods[i].name) + ": ";
    try {
      const auto reg = linear_regression(ref_means, means[i]);
      summary += "r = " + detail::fix(reg.r, 3) + ", slope = " + detail::fix(reg.slope, 2) +
                 ", intercept = " + detail::fix(reg.intercept, 3) + " ppm";
    } catch (const InvalidArgument& e) {
      summary += std::string("regression not available (") + e.what() + ")";
    }
    try {
      const auto w = wilcoxon_signed_rank(means[i], ref_means);
      summary += ", Wilcoxon signed-rank p = " + detail::fix(w.p, 4) +
                 (w.p < 0.01 ? " (significant at p < 0.01)" : " (not significant at p < 0.01)");
    } catch (const InvalidArgument&) {
    }
    summary += ".\n";
  }
  return {csv, summary};
}

/// Loads a metrics listing (as written by run_pipeline) and scores it.
inline MetricsReport evaluate_listing(const fs::path& listing_path) {
  const auto bytes = detail::read_file(listing_path);
  const auto j = nlohmann::json::parse(bytes.begin(), bytes.end());
  const auto dir = listing_path.parent_path();
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : dir / p; };
  std::optional<ScalarVolume> truth;
  if (j.contains("reference")) truth = load_scalar(resolve(j.at("reference").get<std::string>()));
  const auto gray = load_mask(resolve(j.at("gray_mask").get<std::string>()));
  std::vector<NamedMask> rois;
  for (const auto& r : j.at("rois")) rois.push_back({r.at("name"), load_mask(resolve(r.at("mask")))});
  std::vector<MethodChi> methods;
  for (const auto& m : j.at("methods")) {
    auto chi = load_scalar(resolve(m.at("chi")));
    auto mask = m.contains("mask") ? load_mask(resolve(m.at("mask"))) : support(chi);
    methods.push_back({m.at("name"), std::move(chi), std::move(mask)});
  }
  return evaluate_methods(methods, truth ? &*truth : nullptr, gray, rois);
}


// Run -------------------------------------------------------------------------

struct FileEntry {
  std::string path;  // relative to the run directory
  std::string hash;  // FNV-1a 64 of the file bytes
};

struct StageRecord {
  std::string name;
  std::string status = "ok";  // ok | failed | skipped
  nlohmann::json parameters = nlohmann::json::object();
  std::string parameter_hash;
  std::vector<std::string> inputs;
  std::vector<FileEntry> outputs;
  double wall_time_s = 0.0;
  std::string error;
  nlohmann::json details = nlohmann::json::object();
};

struct RunManifest {
  std::string version = kVersion;
  std::uint64_t seed = 0;
  std::string config_hash;
  nlohmann::json config;
  std::vector<StageRecord> stages;

  [[nodiscard]] bool ok() const {
    return std::all_of(stages.begin(), stages.end(), [](const StageRecord& s) { return s.status == "ok"; });
  }
  [[nodiscard]] std::vector<FileEntry> files() const {
    std::vector<FileEntry> out;
    for (const auto& s : stages) out.insert(out.end(), s.outputs.begin(), s.outputs.end());
    return out;
  }
};

inline nlohmann::json to_json_value(const RunManifest& m) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : m.stages) {
    nlohmann::json outs = nlohmann::json::array();
    for (const auto& f : s.outputs) outs.push_back({{"path", f.path}, {"fnv1a64", f.hash}});
    nlohmann::json st = {{"name", s.name},           {"status", s.status},
                         {"parameters", s.parameters}, {"parameter_hash", s.parameter_hash},
                         {"inputs", s.inputs},       {"outputs", outs},
                         {"wall_time_s", s.wall_time_s}, {"details", s.details}};
    if (!s.error.empty()) st["error"] = s.error;
    stages.push_back(st);
  }
  nlohmann::json files = nlohmann::json::array();
  for (const auto& f : m.files()) files.push_back({{"path", f.path}, {"fnv1a64", f.hash}});
  return {{"software", {{"name", "qsm"}, {"version", m.version}}},
          {"status", m.ok() ? "ok" : "failed"},
          {"seed", m.seed},
          {"config_hash", m.config_hash},
          {"config", m.config},
          {"stages", stages},
          {"files", files}};
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers. fn must not throw.
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) fn(i);
    });
  for (auto& t : pool) t.join();
}

namespace detail {

// Executes one stage body, timing it and turning exceptions into a failure record.
class StageRunner {
 public:
  explicit StageRunner(fs::path root) : root_(std::move(root)) {}

  StageRecord run(const std::string& name, nlohmann::json params, std::vector<std::string> inputs,
                  const std::function<void(StageRecord&)>& body) const {
    StageRecord rec;
    rec.name = name;
    rec.parameter_hash = json_hash(params);
    rec.parameters = std::move(params);
    rec.inputs = std::move(inputs);
    const auto t0 = std::chrono::steady_clock::now();
    try {
      body(rec);
    } catch (const std::exception& e) {
      rec.status = "failed";
      rec.error = e.what();
      if (const auto* d = dynamic_cast<const InversionDiverged*>(&e)) {
        nlohmann::json trace = nlohmann::json::array();
        for (const auto& it : d->diagnostics()) trace.push_back(it);
        rec.details["trace"] = trace;
      } else if (const auto* s = dynamic_cast<const SolverDivergence*>(&e)) {
        rec.details["trace"] = s->trace();
      }
    }
    rec.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rec;
  }

  static StageRecord skipped(const std::string& name, const std::string& reason) {
    StageRecord rec;
    rec.name = name;
    rec.status = "skipped";
    rec.error = reason;
    return rec;
  }

  /// Saves a volume and records it (plus any sidecar) as a stage output.
  std::string save(StageRecord& rec, const Volume& v, const std::string& file) const {
    const auto path = root_ / file;
    fs::remove(sidecar_path(path));
    save_volume(v, path);
    rec.outputs.push_back({file, file_hash(path)});
    if (fs::exists(sidecar_path(path)))
      rec.outputs.push_back({sidecar_path(fs::path(file)).string(), file_hash(sidecar_path(path))});
    return file;
  }

  std::string save_text(StageRecord& rec, const std::string& text, const std::string& file) const {
    write_text(root_ / file, text);
    rec.outputs.push_back({file, file_hash(root_ / file)});
    return file;
  }

 private:
  fs::path root_;
};

inline std::string slug(const std::string& s) {
  std::string out = s;
  for (auto& c : out)
    if (c == '+' || c == '-') c = '_';
  return out;
}

}  // namespace detail

/// Writes the manifest next to the run outputs.
inline void write_manifest(const RunManifest& m, const fs::path& out_dir) {
  detail::write_text(out_dir / "manifest.json", to_json_value(m).dump(2) + "\n");
}

/// Runs the full experiment into out_dir: simulate, fit, background removal,
/// mSMV, each inversion variant, metrics. Independent branches use up to
/// `threads` workers; results do not depend on the thread count. A failed
/// stage skips its dependents and is recorded; the manifest is always written.
inline RunManifest run_pipeline(const PipelineConfig& cfg, const fs::path& out_dir, int threads = 1) {
  fs::create_directories(out_dir);
  const detail::StageRunner runner(out_dir);
  RunManifest manifest;
  manifest.seed = cfg.seed;
  manifest.config = config_to_json(cfg);
  manifest.config_hash = json_hash(manifest.config);
  const auto& acq = cfg.acquisition;

  // simulate ---------------------------------------------------------------
  Phantom ph;
  MultiEchoVolume mgre;
  std::vector<NamedMask> rois;
  auto sim = runner.run(
      "simulate",
      {{"phantom", cfg.phantom}, {"acquisition", acq}, {"seed", cfg.seed}}, {},
      [&](StageRecord& rec) {
        ph = build_phantom(cfg.phantom);
        const auto field = forward_field(ph.chi, ph.brain, acq);
        mgre = synthesize_mgre(ph.magnitude, field.total, ph.r2star, acq, cfg.seed);
        round_to_storage(mgre);
        runner.save(rec, ph.chi, "chi_true.nii");
        runner.save(rec, ph.brain, "mask_brain.nii");
        runner.save(rec, ph.gray, "mask_gray.nii");
        runner.save(rec, ph.csf, "mask_csf.nii");
        runner.save(rec, field.tissue, "field_tissue_true.nii");
        runner.save(rec, field.background, "field_background_true.nii");
        runner.save(rec, mgre, "mgre.nii");
        std::vector<std::size_t> idx;
        if (cfg.rois.empty()) {
          idx = deep_gray_regions(cfg.phantom);
        } else {
          for (const auto& name : cfg.rois)
            for (std::size_t r = 0; r < cfg.phantom.regions.size(); ++r)
              if (cfg.phantom.regions[r].name == name) idx.push_back(r);
        }
        for (auto r : idx) {
          auto m = ph.region_mask(r);
          if (m.empty()) throw InvalidArgument("ROI '" + cfg.phantom.regions[r].name + "' is empty on the grid");
          runner.save(rec, m, "roi_" + detail::slug(cfg.phantom.regions[r].name) + ".nii");
          rois.push_back({cfg.phantom.regions[r].name, std::move(m)});
        }
      });
  manifest.stages.push_back(sim);
  if (sim.status != "ok") {
    write_manifest(manifest, out_dir);
    return manifest;
  }

  // fit ---------------------------------------------------------------------
  FieldFitResult fit;
  R2StarResult r2;
  MaskVolume vessels;
  ScalarVolume magnitude;
  auto fit_rec = runner.run(
      "fit", {{"vessel", to_json_value(cfg.msmv.vessel)}, {"msmv_enabled", cfg.msmv_enabled}},
      {"mgre.nii", "mask_brain.nii"}, [&](StageRecord& rec) {
        fit = fit_field(mgre, ph.brain);
        r2 = fit_r2star(mgre, ph.brain);
        magnitude = mgre.magnitude(0);
        round_to_storage(fit.field);
        round_to_storage(fit.weight);
        round_to_storage(r2.r2star);
        round_to_storage(magnitude);
        runner.save(rec, fit.field, "field_total.nii");
        runner.save(rec, fit.weight, "weight.nii");
        runner.save(rec, r2.r2star, "r2star.nii");
        rec.details["estimator"] = fit.estimator;
        if (cfg.msmv_enabled) {
          vessels = vessel_mask(r2.r2star, ph.brain, cfg.msmv.vessel);
          runner.save(rec, vessels, "mask_vessel.nii");
          rec.details["vessel_voxels"] = vessels.count();
        }
      });
  manifest.stages.push_back(fit_rec);
  if (fit_rec.status != "ok") {
    write_manifest(manifest, out_dir);
    return manifest;
  }

  // background removal and field preparation, one branch per method ----------
  const auto has_variant = [&](MediVariant v) {
    return std::any_of(cfg.inversions.begin(), cfg.inversions.end(),
                       [&](const MediParams& p) { return p.variant == v; });
  };
  const std::size_t nb = cfg.bfr.methods.size();
  struct Prepared {
    bool ok = false;
    BfrResult bfr;
    std::optional<ScalarVolume> msmv_field, smv_field;
    std::vector<StageRecord> records;
  };
  std::vector<Prepared> prep(nb);
  parallel_for(nb, threads, [&](std::size_t b) {
    const auto method = cfg.bfr.methods[b];
    const std::string mname(to_string(method));
    auto& out = prep[b];
    nlohmann::json params;
    switch (method) {
      case BfrMethod::Pdf: params = to_json_value(cfg.bfr.pdf); break;
      case BfrMethod::Vsharp: params = to_json_value(cfg.bfr.vsharp); break;
      case BfrMethod::External: params = {{"path", cfg.bfr.external_path.string()}}; break;
    }
    params["method"] = mname;
    auto rec = runner.run("bfr:" + mname, params, {"field_total.nii", "weight.nii", "mask_brain.nii"},
                          [&](StageRecord& r) {
                            if (method == BfrMethod::Pdf) {
                              auto p = cfg.bfr.pdf;
                              p.b0_dir = acq.b0_dir;
                              out.bfr = pdf(fit.field, ph.brain, fit.weight, p);
                            } else if (method == BfrMethod::Vsharp) {
                              out.bfr = vsharp(fit.field, ph.brain, cfg.bfr.vsharp);
                            } else {
                              auto local = load_scalar(cfg.bfr.external_path);
                              require_same_grid(local.grid(), ph.brain.grid(), "external local field");
                              out.bfr = {apply_mask(local, ph.brain), ph.brain, "external", params};
                              out.bfr.local.set_unit(Unit::Hz);
                            }
                            round_to_storage(out.bfr.local);
                            r.details = out.bfr.parameters;
                            runner.save(r, out.bfr.local, "bfr_" + mname + "_local.nii");
                            runner.save(r, out.bfr.mask, "bfr_" + mname + "_mask.nii");
                          });
    const bool bfr_ok = rec.status == "ok";
    out.records.push_back(std::move(rec));
    if (!bfr_ok) {
      if (cfg.msmv_enabled) out.records.push_back(runner.skipped("msmv:" + mname, "bfr:" + mname + " failed"));
      return;
    }
    out.ok = true;
    if (cfg.msmv_enabled) {
      auto mparams = to_json_value(cfg.msmv);
      mparams["b0_tesla"] = acq.b0;
      auto mrec = runner.run(
          "msmv:" + mname, mparams,
          {"bfr_" + mname + "_local.nii", "bfr_" + mname + "_mask.nii", "mask_vessel.nii"},
          [&](StageRecord& r) {
            const auto& m = out.bfr.mask;
            cfg.msmv.validate(m.grid());
            auto b0 = initial_filter(out.bfr.local, m, cfg.msmv);
            runner.save(r, apply_mask(b0, m), "msmv_" + mname + "_initial.nii");
            const double t = compute_threshold(b0, m, cfg.msmv, acq.b0);
            auto res = msmv_iterate(std::move(b0), m, vessels, t, cfg.msmv);
            round_to_storage(res.field);
            runner.save(r, res.field, "msmv_" + mname + "_field.nii");
            nlohmann::json trace = res.trace;
            r.details = trace;
            out.msmv_field = std::move(res.field);
          });
      out.records.push_back(std::move(mrec));
    }
    if (has_variant(MediVariant::MediSmv)) {
      const auto it = std::find_if(cfg.inversions.begin(), cfg.inversions.end(),
                                   [](const MediParams& p) { return p.variant == MediVariant::MediSmv; });
      MsmvParams sp = cfg.msmv;
      sp.r1 = it->r1;
      auto srec = runner.run("smv:" + mname, {{"r1_mm", sp.r1}},
                             {"bfr_" + mname + "_local.nii", "bfr_" + mname + "_mask.nii"}, [&](StageRecord& r) {
                               const auto eroded = erode_mask(out.bfr.mask, sp.r1);
                               if (eroded.empty()) throw InvalidArgument("mask vanishes after SMV erosion");
                               out.smv_field = apply_mask(initial_filter(out.bfr.local, out.bfr.mask, sp), eroded);
                               round_to_storage(*out.smv_field);
                               runner.save(r, *out.smv_field, "smv_" + mname + "_field.nii");
                               runner.save(r, eroded, "smv_" + mname + "_mask.nii");
                             });
      out.records.push_back(std::move(srec));
    }
  });
  for (auto& p : prep)
    for (auto& r : p.records) manifest.stages.push_back(std::move(r));

  // inversion, one branch per (method, variant) ----------------------------------
  const std::size_t nv = cfg.inversions.size();
  std::vector<StageRecord> inv_records(nb * nv);
  std::vector<std::optional<std::string>> chis(nb * nv);
  parallel_for(nb * nv, threads, [&](std::size_t task) {
    const std::size_t b = task / nv, v = task % nv;
    const auto& p = cfg.inversions[v];
    const std::string mname(to_string(cfg.bfr.methods[b]));
    const std::string combo = mname + "+" + std::string(to_string(p.variant));
    const std::string stage = "invert:" + combo;
    const auto& pr = prep[b];
    const std::optional<ScalarVolume>* field = nullptr;
    std::string field_file = "bfr_" + mname + "_local.nii";
    std::optional<ScalarVolume> plain;
    if (pr.ok) plain = pr.bfr.local;
    switch (p.variant) {
      case MediVariant::Medi: field = &plain; break;
      case MediVariant::MediSmv:
        field = &pr.smv_field;
        field_file = "smv_" + mname + "_field.nii";
        break;
      case MediVariant::MediMsmv:
        field = &pr.msmv_field;
        field_file = "msmv_" + mname + "_field.nii";
        break;
    }
    if (!field->has_value()) {
      inv_records[task] = detail::StageRunner::skipped(stage, "input field for " + combo + " unavailable");
      return;
    }
    auto params = to_json_value(p);
    params["b0_tesla"] = acq.b0;
    params["delta_te_s"] = acq.delta_te;
    inv_records[task] = runner.run(
        stage, params, {field_file, "weight.nii", "bfr_" + mname + "_mask.nii", "mgre.nii", "mask_csf.nii"},
        [&](StageRecord& r) {
          auto mp = p;
          mp.b0_dir = acq.b0_dir;
          const auto& m = pr.bfr.mask;
          const std::string base = "chi_" + detail::slug(combo);
          InversionInputs in{**field, fit.weight, m, build_gradient_mask(apply_mask(magnitude, m), m, mp.edge_fraction),
                             mask_and(ph.csf, m), acq.b0, acq.delta_te};
          if (mp.lambda2 == 0.0) in.csf = MaskVolume(m.grid());
          runner.save(r, in.edges, base + "_edges.nii");
          auto res = medi_invert(in, mp);
          runner.save(r, res.chi, base + ".nii");
          runner.save(r, res.mask, base + "_mask.nii");
          nlohmann::json diag = nlohmann::json::array();
          for (const auto& it : res.diagnostics) diag.push_back(it);
          r.details = {{"iterations", diag}, {"converged", res.converged}, {"csf_offset_ppm", res.csf_offset}};
          chis[task] = combo;
        });
  });
  for (auto& r : inv_records) manifest.stages.push_back(std::move(r));

  // metrics --------------------------------------------------------------------
  std::vector<std::string> scored;
  for (const auto& c : chis)
    if (c) scored.push_back(*c);
  if (scored.empty()) {
    manifest.stages.push_back(detail::StageRunner::skipped("metrics", "no inversion succeeded"));
  } else {
    std::vector<std::string> inputs{"chi_true.nii", "mask_gray.nii"};
    nlohmann::json listing = {{"reference", "chi_true.nii"}, {"gray_mask", "mask_gray.nii"}};
    listing["rois"] = nlohmann::json::array();
    for (const auto& roi : rois) {
      const auto file = "roi_" + detail::slug(roi.name) + ".nii";
      listing["rois"].push_back({{"name", roi.name}, {"mask", file}});
      inputs.push_back(file);
    }
    listing["methods"] = nlohmann::json::array();
    for (const auto& name : scored) {
      const auto base = "chi_" + detail::slug(name);
      listing["methods"].push_back({{"name", name}, {"chi", base + ".nii"}, {"mask", base + "_mask.nii"}});
      inputs.push_back(base + ".nii");
    }
    manifest.stages.push_back(runner.run(
        "metrics", {{"csv", cfg.metrics_csv}, {"summary", cfg.summary}, {"rois", listing["rois"]}}, inputs,
        [&](StageRecord& r) {
          // Scored from the persisted volumes so the metrics subcommand reproduces it.
          runner.save_text(r, listing.dump(2) + "\n", "metrics_inputs.json");
          const auto report = evaluate_listing(out_dir / "metrics_inputs.json");
          runner.save_text(r, report.csv, cfg.metrics_csv);
          runner.save_text(r, report.summary, cfg.summary);
        }));
  }
  write_manifest(manifest, out_dir);
  return manifest;
}

}  // namespace qsm
