// Command-line front end. Exit codes: 0 success, 1 stage failure, 2 config error.

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "qsm/pipeline.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kStageFailure = 1;
constexpr int kConfigError = 2;

// Raised for bad arguments or config; mapped to exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Shared {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  int threads = 1;
};

void add_shared(CLI::App* cmd, Shared& s) {
  cmd->add_option("--config", s.config, "Config file (JSON)");
  cmd->add_option("--seed", s.seed, "Noise seed, overrides the config");
  cmd->add_option("--out", s.out, "Output directory")->capture_default_str();
  cmd->add_option("--threads", s.threads, "Worker threads for independent branches")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
}

qsm::PipelineConfig load_config(const Shared& s) {
  qsm::PipelineConfig cfg;
  if (!s.config.empty()) {
    auto check = qsm::validate_config(qsm::fs::path(s.config));
    if (!check.ok()) {
      std::string msg = "invalid config " + s.config + ":";
      for (const auto& v : check.violations) msg += "\n  " + v;
      throw ConfigError(msg);
    }
    cfg = *check.config;
  }
  if (s.seed) cfg.seed = *s.seed;
  return cfg;
}

const qsm::MediParams& params_for(const qsm::PipelineConfig& cfg, qsm::MediVariant v, qsm::MediParams& fallback) {
  for (const auto& p : cfg.inversions)
    if (p.variant == v) return p;
  fallback.variant = v;
  fallback.b0_dir = cfg.acquisition.b0_dir;
  if (v == qsm::MediVariant::MediMsmv) fallback.r1 = cfg.msmv.r1;
  return fallback;
}

qsm::fs::path out_dir(const Shared& s) {
  qsm::fs::create_directories(s.out);
  return s.out;
}

void save(const qsm::Volume& v, const qsm::fs::path& p) {
  qsm::save_volume(v, p);
  std::cout << "wrote " << p.string() << "\n";
}

void save_text(const std::string& text, const qsm::fs::path& p) {
  qsm::detail::write_text(p, text);
  std::cout << "wrote " << p.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quantitative susceptibility mapping with mSMV background residual filtering"};
  app.require_subcommand(1);
  Shared s;

  auto* simulate = app.add_subcommand("simulate", "Build the phantom and synthesize multi-echo data");
  add_shared(simulate, s);

  std::string mgre_path, mask_path, field_path, weight_path, r2star_path, vessel_path, magnitude_path, csf_path;
  auto* fit = app.add_subcommand("fit", "Estimate total field, noise weight and R2* from multi-echo data");
  add_shared(fit, s);
  fit->add_option("--mgre", mgre_path, "Multi-echo complex volume")->required();
  fit->add_option("--mask", mask_path, "Brain mask")->required();

  std::string method = "pdf", bfr_input;
  auto* bfr = app.add_subcommand("bfr", "Background field removal");
  add_shared(bfr, s);
  bfr->add_option("--bfr,--method", method, "pdf, vsharp or external")
      ->check(CLI::IsMember({"pdf", "vsharp", "external"}));
  bfr->add_option("--bfr-input", bfr_input, "Externally computed local field (external method)");
  bfr->add_option("--field", field_path, "Total field (Hz)");
  bfr->add_option("--mask", mask_path, "Brain mask")->required();
  bfr->add_option("--weight", weight_path, "Noise weight (pdf only)");

  std::optional<double> r1, t_min, alpha, lambda1, lambda2;
  std::optional<int> i_max;

  auto* msmv = app.add_subcommand("msmv", "Filter residual background field near the mask boundary");
  add_shared(msmv, s);
  msmv->add_option("--field", field_path, "Local field from background removal (Hz)")->required();
  msmv->add_option("--mask", mask_path, "Mask the local field is valid on")->required();
  auto* r2_opt = msmv->add_option("--r2star", r2star_path, "R2* map for the vessel mask");
  msmv->add_option("--vessel-mask", vessel_path, "Precomputed vessel mask")->excludes(r2_opt);
  msmv->add_option("--r1", r1, "Initial SMV radius (mm)");
  msmv->add_option("--tmin", t_min, "Threshold floor at 3 T (Hz)");
  msmv->add_option("--imax", i_max, "Maximum filtering iterations");
  msmv->add_option("--alpha", alpha, "Stop when the filtered set falls below alpha * |M|");

  std::string variant = "medi";
  bool prefiltered = false;
  auto* invert = app.add_subcommand("invert", "Dipole inversion (MEDI variants)");
  add_shared(invert, s);
  invert->add_option("--variant", variant, "medi, medi-smv or medi-msmv")
      ->check(CLI::IsMember({"medi", "medi-smv", "medi-msmv"}));
  invert->add_option("--field", field_path,
                     "Local field (Hz); for medi-msmv pass the msmv output")->required();
  invert->add_option("--mask", mask_path, "Mask of the background removal output")->required();
  invert->add_option("--weight", weight_path, "Noise weight")->required();
  invert->add_option("--magnitude", magnitude_path, "Magnitude image for the edge mask")->required();
  invert->add_option("--csf", csf_path, "CSF mask for the zero reference");
  invert->add_flag("--prefiltered", prefiltered, "medi-smv: the field is already SMV filtered and eroded");
  invert->add_option("--lambda1", lambda1, "TV weight");
  invert->add_option("--lambda2", lambda2, "CSF uniformity weight");
  invert->add_option("--r1", r1, "SMV radius of the filtered forward model (mm)");

  std::string listing;
  auto* metrics = app.add_subcommand("metrics", "Score reconstructions listed in a metrics manifest");
  add_shared(metrics, s);
  metrics->add_option("--listing", listing, "Metrics listing (JSON); defaults to --config");

  auto* pipeline = app.add_subcommand("pipeline", "Run the full experiment from one config");
  add_shared(pipeline, s);

  auto* validate = app.add_subcommand("validate", "Check a config and list every violation");
  add_shared(validate, s);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  try {
    using namespace qsm;
    if (*validate) {
      if (s.config.empty()) throw ConfigError("validate: --config is required");
      const auto check = validate_config(fs::path(s.config));
      if (check.ok()) {
        std::cout << "valid: " << s.config << "\n";
        return kOk;
      }
      for (const auto& v : check.violations) std::cout << v << "\n";
      return kConfigError;
    }

    if (*pipeline) {
      if (s.config.empty()) throw ConfigError("pipeline: --config is required");
      const auto cfg = load_config(s);
      const auto manifest = run_pipeline(cfg, out_dir(s), s.threads);
      for (const auto& st : manifest.stages) {
        std::cout << st.status << "\t" << st.name << "\t" << st.wall_time_s << " s";
        if (!st.error.empty()) std::cout << "\t" << st.error;
        std::cout << "\n";
      }
      std::cout << "manifest: " << (fs::path(s.out) / "manifest.json").string() << "\n";
      return manifest.ok() ? kOk : kStageFailure;
    }

    if (*metrics) {
      const std::string path = listing.empty() ? s.config : listing;
      if (path.empty()) throw ConfigError("metrics: --listing (or --config) is required");
      const auto report = evaluate_listing(path);
      const auto dir = out_dir(s);
      save_text(report.csv, dir / "metrics.csv");
      save_text(report.summary, dir / "summary.txt");
      std::cout << report.summary;
      return kOk;
    }

    auto cfg = load_config(s);
    const auto dir = out_dir(s);

    if (*simulate) {
      const auto ph = build_phantom(cfg.phantom);
      const auto field = forward_field(ph.chi, ph.brain, cfg.acquisition);
      save(ph.chi, dir / "chi_true.nii");
      save(ph.brain, dir / "mask_brain.nii");
      save(ph.gray, dir / "mask_gray.nii");
      save(ph.csf, dir / "mask_csf.nii");
      save(field.tissue, dir / "field_tissue_true.nii");
      save(field.background, dir / "field_background_true.nii");
      save(synthesize_mgre(ph.magnitude, field.total, ph.r2star, cfg.acquisition, cfg.seed), dir / "mgre.nii");
      return kOk;
    }

    if (*fit) {
      const auto mgre = load_multi_echo(mgre_path);
      const auto m = load_mask(mask_path);
      const auto f = fit_field(mgre, m);
      save(f.field, dir / "field_total.nii");
      save(f.weight, dir / "weight.nii");
      save(fit_r2star(mgre, m).r2star, dir / "r2star.nii");
      save(mgre.magnitude(0), dir / "magnitude.nii");
      return kOk;
    }

    if (*bfr) {
      const auto m = load_mask(mask_path);
      if (method != "external" && field_path.empty()) throw ConfigError("bfr: --field is required");
      BfrResult r;
      if (method == "external") {
        if (bfr_input.empty()) throw ConfigError("bfr: --bfr-input is required for the external method");
        auto local = apply_mask(load_scalar(bfr_input), m);
        local.set_unit(Unit::Hz);
        r = {local, m, "external", {{"path", bfr_input}}};
      } else if (method == "pdf") {
        const auto field = load_scalar(field_path);
        if (weight_path.empty()) throw ConfigError("bfr: --weight is required for pdf");
        auto p = cfg.bfr.pdf;
        p.b0_dir = cfg.acquisition.b0_dir;
        r = pdf(field, m, load_scalar(weight_path), p);
      } else {
        r = vsharp(load_scalar(field_path), m, cfg.bfr.vsharp);
      }
      save(r.local, dir / ("bfr_" + method + "_local.nii"));
      save(r.mask, dir / ("bfr_" + method + "_mask.nii"));
      std::cout << r.parameters.dump() << "\n";
      return kOk;
    }

    if (*msmv) {
      if (r1) cfg.msmv.r1 = *r1;
      if (t_min) cfg.msmv.t_min = *t_min;
      if (i_max) cfg.msmv.i_max = *i_max;
      if (alpha) cfg.msmv.alpha = *alpha;
      const auto field = load_scalar(field_path);
      const auto m = load_mask(mask_path);
      MaskVolume vessels(m.grid());
      if (!vessel_path.empty()) vessels = load_mask(vessel_path);
      else if (!r2star_path.empty()) vessels = vessel_mask(load_scalar(r2star_path), m, cfg.msmv.vessel);
      cfg.msmv.validate(m.grid());
      auto b0 = initial_filter(field, m, cfg.msmv);
      save(apply_mask(b0, m), dir / "msmv_initial.nii");
      const double t = compute_threshold(b0, m, cfg.msmv, cfg.acquisition.b0);
      const auto res = msmv_iterate(std::move(b0), m, vessels, t, cfg.msmv);
      save(res.field, dir / "msmv_field.nii");
      save(vessels, dir / "mask_vessel.nii");
      nlohmann::json trace = res.trace;
      save_text(trace.dump(2) + "\n", dir / "msmv_trace.json");
      return kOk;
    }

    if (*invert) {
      MediParams fallback;
      auto p = params_for(cfg, variant_from_string(variant), fallback);
      p.b0_dir = cfg.acquisition.b0_dir;
      if (lambda1) p.lambda1 = *lambda1;
      if (lambda2) p.lambda2 = *lambda2;
      if (r1) p.r1 = *r1;
      p.validate();
      const auto m = load_mask(mask_path);
      auto field = load_scalar(field_path);
      if (p.variant == MediVariant::MediSmv && !prefiltered) {
        MsmvParams sp = cfg.msmv;
        sp.r1 = p.r1;
        field = apply_mask(initial_filter(field, m, sp), erode_mask(m, p.r1));
      }
      InversionInputs in{field, load_scalar(weight_path), m,
                         build_gradient_mask(apply_mask(load_scalar(magnitude_path), m), m, p.edge_fraction),
                         MaskVolume(m.grid()), cfg.acquisition.b0, cfg.acquisition.delta_te};
      if (!csf_path.empty() && p.lambda2 > 0.0) in.csf = mask_and(load_mask(csf_path), m);
      const auto res = medi_invert(in, p);
      const std::string base = "chi_" + detail::slug(variant);
      save(res.chi, dir / (base + ".nii"));
      save(res.mask, dir / (base + "_mask.nii"));
      std::string csv = "iteration,data_cost,tv_cost,csf_cost,total_cost,step_norm,step_length,cg_iterations\n";
      for (const auto& it : res.diagnostics)
        csv += std::to_string(it.iteration) + "," + detail::num(it.data_cost) + "," + detail::num(it.tv_cost) + "," +
               detail::num(it.csf_cost) + "," + detail::num(it.total) + "," + detail::num(it.step_norm) + "," +
               detail::num(it.step_length) + "," + std::to_string(it.cg_iterations) + "\n";
      save_text(csv, dir / (base + "_diagnostics.csv"));
      return kOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << e.what() << "\n";
    return kConfigError;
  } catch (const qsm::InvalidArgument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "stage failed: " << e.what() << "\n";
    return kStageFailure;
  }
  return kOk;
}
