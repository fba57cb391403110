#include <gtest/gtest.h>

#include <fstream>

#include "helpers.hpp"
#include "qsm/pipeline.hpp"

using namespace qsm;

namespace {

const fs::path kSource = QSM_SOURCE_DIR;

nlohmann::json desk_json() {
  std::ifstream in(kSource / "configs" / "desk.json");
  return nlohmann::json::parse(in);
}

nlohmann::json small_config() {
  auto j = desk_json();
  j["phantom"] = {{"preset", "desk"}, {"size", 32}, {"spacing", 2.0}};
  j["bfr"]["methods"] = {"pdf"};
  j["inversion"]["variants"] = {"medi", "medi-msmv"};
  j["inversion"]["outer_iterations"] = 3;
  return j;
}

fs::path fresh_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("qsm_test_pipeline_" + name);
  fs::remove_all(d);
  return d;
}

bool has(const std::vector<std::string>& v, const std::string& needle) {
  return std::any_of(v.begin(), v.end(), [&](const auto& s) { return s.find(needle) != std::string::npos; });
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(Hashing, Fnv1aReferenceVectors) {
  EXPECT_EQ(hex64(fnv1a64("")), "cbf29ce484222325");
  EXPECT_EQ(hex64(fnv1a64("a")), "af63dc4c8601ec8c");
  EXPECT_EQ(json_hash({{"b", 1}, {"a", 2}}), json_hash({{"a", 2}, {"b", 1}}));
}

TEST(Config, ShippedConfigIsValid) {
  const auto check = validate_config(kSource / "configs" / "desk.json");
  EXPECT_TRUE(check.ok()) << (check.violations.empty() ? "" : check.violations.front());
  ASSERT_TRUE(check.config);
  EXPECT_EQ(check.config->inversions.size(), 3u);
  EXPECT_EQ(check.config->bfr.methods.size(), 2u);
  EXPECT_EQ(check.config->seed, 7u);
}

TEST(Config, FullComparisonSetFitsInOneConfig) {
  auto j = desk_json();
  j["bfr"]["methods"] = {"pdf", "vsharp"};
  j["inversion"]["variants"] = {"medi", "medi-smv", "medi-msmv"};
  EXPECT_TRUE(validate_config(j).ok());
}

TEST(Config, AlphaOutOfRange) {
  auto j = desk_json();
  j["msmv"]["alpha"] = 2;
  const auto check = validate_config(j);
  EXPECT_FALSE(check.ok());
  EXPECT_TRUE(has(check.violations, "alpha must be in (0,1)"));
}

TEST(Config, MissingExternalPathNamesTheField) {
  auto j = desk_json();
  j["bfr"]["methods"] = {"external"};
  j["bfr"]["external"] = {{"path", "/nonexistent/local.nii"}};
  const auto check = validate_config(j);
  EXPECT_TRUE(has(check.violations, "bfr.external.path"));
  j["bfr"].erase("external");
  EXPECT_TRUE(has(validate_config(j).violations, "bfr.external.path"));
}

TEST(Config, ReportsEveryViolation) {
  auto j = desk_json();
  j["msmv"]["alpha"] = 2;
  j["msmv"]["i_max"] = 0;
  j["inversion"]["lambda1"] = -1;
  j["metrics"]["rois"] = {"caudate", "nowhere"};
  j["bogus"] = true;
  j["seed"] = "seven";
  const auto v = validate_config(j).violations;
  for (const char* needle : {"alpha", "i_max", "lambda1", "nowhere", "bogus", "seed"}) EXPECT_TRUE(has(v, needle)) << needle;
}

TEST(Config, VariantConsistency) {
  auto j = desk_json();
  j["msmv"]["enabled"] = false;
  EXPECT_TRUE(has(validate_config(j).violations, "medi-msmv"));
  j = desk_json();
  j["inversion"]["variants"] = {"medi", "medi"};
  EXPECT_FALSE(validate_config(j).ok());
  j = desk_json();
  j["inversion"]["variants"] = {"tkd"};
  EXPECT_FALSE(validate_config(j).ok());
}

TEST(Config, RoundTripsThroughJson) {
  const auto c = validate_config(desk_json()).config;
  ASSERT_TRUE(c);
  const auto again = validate_config(config_to_json(*c)).config;
  ASSERT_TRUE(again);
  EXPECT_EQ(config_to_json(*again), config_to_json(*c));
}

TEST(Pipeline, RunsAndIsDeterministic) {
  const auto cfg = validate_config(small_config()).config;
  ASSERT_TRUE(cfg);
  const auto a = fresh_dir("a"), b = fresh_dir("b");
  const auto ma = run_pipeline(*cfg, a, 1);
  const auto mb = run_pipeline(*cfg, b, 2);
  ASSERT_TRUE(ma.ok());
  ASSERT_TRUE(mb.ok());

  for (const char* f : {"chi_pdf_medi.nii", "chi_pdf_medi_msmv.nii", "metrics.csv", "summary.txt", "manifest.json"})
    EXPECT_TRUE(fs::exists(a / f)) << f;
  std::size_t chi_volumes = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    const auto name = e.path().filename().string();
    if (name.starts_with("chi_") && name != "chi_true.nii" && name.find("_mask") == std::string::npos &&
        name.find("_edges") == std::string::npos)
      ++chi_volumes;
  }
  EXPECT_EQ(chi_volumes, 2u);

  ASSERT_EQ(ma.stages.size(), mb.stages.size());
  for (std::size_t i = 0; i < ma.stages.size(); ++i) {
    EXPECT_EQ(ma.stages[i].parameter_hash, mb.stages[i].parameter_hash);
    ASSERT_EQ(ma.stages[i].outputs.size(), mb.stages[i].outputs.size());
    for (std::size_t k = 0; k < ma.stages[i].outputs.size(); ++k) {
      const auto& out = ma.stages[i].outputs[k];
      EXPECT_EQ(out.hash, mb.stages[i].outputs[k].hash) << out.path;
      EXPECT_EQ(out.hash, file_hash(a / out.path)) << out.path;
    }
  }
  EXPECT_EQ(slurp(a / "chi_pdf_medi_msmv.nii"), slurp(b / "chi_pdf_medi_msmv.nii"));
  EXPECT_EQ(slurp(a / "metrics.csv"), slurp(b / "metrics.csv"));

  // metrics recomputed from the saved listing match the pipeline's report
  const auto report = evaluate_listing(a / "metrics_inputs.json");
  EXPECT_EQ(report.csv, slurp(a / "metrics.csv"));
  EXPECT_NE(report.summary.find("PDF+MEDI-mSMV"), std::string::npos);

  const auto manifest = nlohmann::json::parse(slurp(a / "manifest.json"));
  EXPECT_EQ(manifest.at("seed"), 7);
  EXPECT_EQ(manifest.at("software").at("version"), kVersion);
}

TEST(Pipeline, StageFailureWritesAPartialManifest) {
  const auto dir = fresh_dir("fail");
  fs::create_directories(dir);
  // a local field on the wrong grid makes the external stage fail
  save_volume(ScalarVolume(test::cube(8), Unit::Hz), dir / "wrong.nii");
  auto j = small_config();
  j["bfr"]["methods"] = {"external"};
  j["bfr"]["external"] = {{"path", (dir / "wrong.nii").string()}};
  const auto cfg = validate_config(j).config;
  ASSERT_TRUE(cfg);
  const auto out = dir / "run";
  const auto m = run_pipeline(*cfg, out, 1);
  EXPECT_FALSE(m.ok());
  ASSERT_TRUE(fs::exists(out / "manifest.json"));
  std::size_t failed = 0, skipped = 0;
  for (const auto& s : m.stages) {
    failed += s.status == "failed";
    skipped += s.status == "skipped";
    if (s.status == "failed") EXPECT_FALSE(s.error.empty());
  }
  EXPECT_EQ(failed, 1u);
  EXPECT_GE(skipped, 2u);
}

TEST(Metrics, DisplayNames) {
  EXPECT_EQ(display_name("pdf+medi-msmv"), "PDF+MEDI-mSMV");
  EXPECT_EQ(display_name("vsharp+medi"), "VSHARP+MEDI");
  EXPECT_EQ(display_name("custom"), "custom");
}

TEST(ParallelFor, VisitsEveryIndexOnce) {
  std::vector<int> hits(37, 0);
  parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i]++; });
  for (int h : hits) EXPECT_EQ(h, 1);
}
