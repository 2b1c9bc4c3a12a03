#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "json.hpp"
#include "pscm/pscm.hpp"
#include "pscm/plot.hpp"
#include "test_util.hpp"

using namespace pscm;
namespace fs = std::filesystem;

namespace {

FactorModelSpec noiseless_spec(double delta) {
  FactorModelSpec spec;
  spec.seed = 11;
  spec.noise_sd = 0.0;
  spec.treated_loading_min = 0.2;
  spec.treated_loading_max = 0.8;
  spec.effect.delta = delta;
  return spec;
}

// Writes a simulated bundle and returns a run configuration for it.
RunConfig bundle_config(const std::string& name, const FactorModelSpec& spec,
                        const std::map<std::string, std::string>& extra = {}) {
  const auto dir = fixtures::scratch_dir(name);
  write_bundle(generate(spec), spec, dir);
  auto cfg = KeyValueConfig::load(dir / "run.cfg");
  cfg.set("replicates", "200");
  cfg.set("gmm_restarts", "2");
  cfg.set("k_max", "3");
  for (const auto& [k, v] : extra) cfg.set(k, v);
  return RunConfig::from(cfg);
}

std::vector<std::string> header_of(const fs::path& p) {
  return csv::read(p).header;
}

std::map<std::string, std::string> files_in(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) out[e.path().filename().string()] = fixtures::read_text(e.path());
  return out;
}

}  // namespace

TEST(Pipeline, NoiselessConstantEffectIsRecovered) {
  const auto res = run_pipeline(bundle_config("exact", noiseless_spec(2.0)));
  ASSERT_EQ(res.treated.size(), 40u);
  ASSERT_FALSE(res.selectors.empty());
  for (const auto& s : res.selectors) {
    EXPECT_NEAR(s.pooled.psi_treatment, 2.0, 1e-4) << s.selector.name;
    // The last cohort's lottery runs to the final week, leaving no post window
    // for it or for the event-time stratum that includes it.
    const bool has_post = s.selector.name != "S04" && s.selector.name != "all";
    EXPECT_EQ(s.pooled.psi_post.has_value(), has_post) << s.selector.name;
    if (s.pooled.psi_post) EXPECT_NEAR(*s.pooled.psi_post, 2.0, 1e-4) << s.selector.name;
    EXPECT_LT(s.rmspe_pre, 1e-6);
  }
}

TEST(Pipeline, NoiselessNullGivesZeroEffect) {
  const auto res = run_pipeline(bundle_config("null", noiseless_spec(0.0)));
  for (const auto& e : res.effects) {
    EXPECT_LT(e.tau.cwiseAbs().maxCoeff(), 1e-5);
  }
  for (const auto& s : res.selectors) EXPECT_NEAR(s.pooled.psi_treatment, 0.0, 1e-5);
}

TEST(Pipeline, DefaultSelectorsAreCohortsPlusAllStratum) {
  const auto res = run_pipeline(bundle_config("selectors", noiseless_spec(1.0)));
  std::vector<std::string> names;
  for (const auto& s : res.selectors) names.push_back(s.selector.name);
  EXPECT_EQ(names, (std::vector<std::string>{"S01", "S02", "S03", "S04", "all"}));
  EXPECT_EQ(res.selectors.back().selector.mode, Pooling::event_time);
  EXPECT_EQ(res.selectors[0].adoption_week, 18);
  EXPECT_EQ(res.selectors[0].lottery_end_week, 26);
  EXPECT_EQ(res.lambda.size(), 4u);
}

TEST(Pipeline, ConfiguredSelectorsAndStrata) {
  const auto rc = bundle_config("custom", noiseless_spec(1.0),
                                {{"selector.early", "groups:S01"},
                                 {"stratum.late", "adoption:2021-06-03..2021-07-01"},
                                 {"lambda_mode", "global"}});
  ASSERT_EQ(rc.selectors.size(), 1u);
  ASSERT_EQ(rc.strata.size(), 1u);
  const auto res = run_pipeline(rc);
  ASSERT_EQ(res.selectors.size(), 2u);
  EXPECT_EQ(res.selectors[0].selector.name, "early");
  EXPECT_EQ(res.selectors[0].pooled.units.size(), 10u);
  EXPECT_EQ(res.selectors[1].selector.name, "late");
  // Adoption weeks 20 (2021-05-27) is outside, 22 and 25 are inside.
  EXPECT_EQ(res.selectors[1].pooled.units.size(), 20u);
  EXPECT_EQ(res.lambda.size(), 1u);
  EXPECT_TRUE(res.lambda.count("*"));
}

TEST(Pipeline, SelectorAndGridParsing) {
  EXPECT_TRUE(parse_selector("x", "all", Pooling::calendar).all);
  EXPECT_EQ(parse_selector("x", "groups:A, B", Pooling::calendar).groups, (std::set<std::string>{"A", "B"}));
  EXPECT_THROW(parse_selector("x", "groups:", Pooling::calendar), ConfigurationError);
  EXPECT_THROW(parse_selector("x", "adoption:2021-02-01", Pooling::calendar), ConfigurationError);
  EXPECT_THROW(parse_selector("x", "adoption:2021-02-01..2021-01-01", Pooling::calendar), ConfigurationError);
  EXPECT_THROW(parse_selector("x", "cohort:3", Pooling::calendar), ConfigurationError);
  EXPECT_EQ(parse_lambda_grid("0:1:0.25"), (std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0}));
  EXPECT_EQ(parse_lambda_grid("0, 0.5,2"), (std::vector<double>{0.0, 0.5, 2.0}));
  EXPECT_EQ(parse_lambda_grid("0:1:0.01").size(), 101u);
  EXPECT_THROW(parse_lambda_grid("0:1"), ConfigurationError);
  EXPECT_THROW(parse_lambda_grid("1:0:0.1"), ConfigurationError);
  EXPECT_THROW(parse_lambda_grid("a,b"), ConfigurationError);
  EXPECT_THROW(RunConfig::from(KeyValueConfig::parse("lambda_mode = per_unit\n")), ConfigurationError);
  EXPECT_THROW(RunConfig::from(KeyValueConfig::parse("replicates = 0\n")), ConfigurationError);
  EXPECT_THROW(RunConfig::from(KeyValueConfig::parse("placebo_weights = flat\n")), ConfigurationError);
  EXPECT_FALSE(RunConfig::from(KeyValueConfig::parse("placebo_weights = uniform\n")).likelihood_weights);
}

TEST(Pipeline, WelchTestMatchesReference) {
  // Reference values from an independent statistics package.
  const auto w = welch_t_test({1, 2, 3, 4}, {2, 4, 6, 8, 10});
  ASSERT_TRUE(w.defined);
  EXPECT_NEAR(w.t, -2.2514363231593695, 1e-12);
  EXPECT_NEAR(w.df, 5.520787746170677, 1e-12);
  EXPECT_NEAR(w.p, 0.06913359319239236, 1e-9);
  EXPECT_FALSE(welch_t_test({1}, {2, 3}).defined);
  EXPECT_FALSE(welch_t_test({1, 1}, {2, 2}).defined);
}

TEST(Pipeline, ArtifactsAreByteIdenticalAcrossRunsAndJobs) {
  auto rc = bundle_config("determinism", [] {
    auto s = noiseless_spec(1.0);
    s.noise_sd = 0.3;
    return s;
  }());
  const auto base = fixtures::scratch_dir("determinism_out");
  run_to_directory(rc, base / "a");
  run_to_directory(rc, base / "b");
  rc.jobs = 3;
  run_to_directory(rc, base / "c");
  const auto a = files_in(base / "a");
  EXPECT_EQ(a, files_in(base / "b"));
  EXPECT_EQ(a, files_in(base / "c"));
  EXPECT_FALSE(fs::exists(base / "a.partial"));
}

TEST(Pipeline, ArtifactSchemaAndManifestReconcile) {
  auto rc = bundle_config("schema", noiseless_spec(1.0), {{"placebo_dump", "true"}});
  const auto out = fixtures::scratch_dir("schema_out") / "run";
  const auto res = run_to_directory(rc, out);

  EXPECT_EQ(header_of(out / "summary.csv"),
            (std::vector<std::string>{"selector", "n_units", "rmspe_pre", "psi_treatment", "psi_post",
                                      "theta_treatment", "rho_treatment", "p_tail_treatment", "theta_post",
                                      "rho_post", "p_tail_post", "significant_treatment", "significant_post"}));
  EXPECT_EQ(header_of(out / "strata.csv"),
            (std::vector<std::string>{"stratum", "n_units", "rmspe_pre", "ate", "theta", "rho", "p_tail",
                                      "significant"}));
  EXPECT_EQ(header_of(out / "bands.csv"), (std::vector<std::string>{"selector", "week", "q05", "q95", "psi"}));
  EXPECT_EQ(header_of(out / "cluster_ate.csv"),
            (std::vector<std::string>{"cluster", "treatment", "post_treatment", "sd_treatment",
                                      "sd_post_treatment", "share"}));

  const auto summary = csv::read(out / "summary.csv");
  EXPECT_EQ(summary.rows.size(), 4u);
  for (const auto& r : summary.rows) {
    const double rho = std::stod(r.fields[6]);
    const double p = std::stod(r.fields[7]);
    EXPECT_NEAR(rho + p, 1.0, 1e-12);
  }
  EXPECT_EQ(csv::read(out / "strata.csv").rows.size(), 1u);

  std::ifstream in(out / "manifest.json");
  const auto m = nlohmann::json::parse(in);
  for (const auto& [name, n] : m["artifacts"].items()) {
    EXPECT_EQ(csv::read(out / name).rows.size(), n.get<std::size_t>()) << name;
  }
  for (const char* f : {"propensity.csv", "lambda.csv", "cv_phi.csv", "weights.csv", "effects.csv",
                        "unit_summary.csv", "pooled.csv", "bands.csv", "summary.csv", "strata.csv",
                        "clusters.csv", "cluster_ate.csv", "balance.csv", "placebo_S01.csv"}) {
    EXPECT_TRUE(m["artifacts"].contains(f)) << f;
  }
  EXPECT_EQ(m["units"]["treated"].get<std::size_t>(), 40u);
  EXPECT_EQ(m["units"]["retained"].get<std::size_t>(), 200u);
  EXPECT_EQ(m["units"]["treated"].get<std::size_t>() + m["units"]["controls"].get<std::size_t>(),
            m["units"]["retained"].get<std::size_t>());
  EXPECT_EQ(m["units"]["donor_pool"].get<std::size_t>(), res.pool.members.size());
  EXPECT_EQ(csv::read(out / "placebo_S01.csv").rows.size(), 200u);
  EXPECT_EQ(csv::read(out / "unit_summary.csv").rows.size(), 40u);
  EXPECT_EQ(csv::read(out / "propensity.csv").rows.size(), 200u);
}

TEST(Pipeline, EmptyScheduleFailsAtPropensityAndLeavesNoPartial) {
  auto spec = noiseless_spec(1.0);
  const auto dir = fixtures::scratch_dir("empty_schedule");
  write_bundle(generate(spec), spec, dir);
  fixtures::write_text(dir / "schedule.csv", "group,adoption_date,end_date\n");
  const auto rc = RunConfig::from(KeyValueConfig::load(dir / "run.cfg"));
  const auto out = dir / "out";
  try {
    run_to_directory(rc, out);
    FAIL() << "expected StageError";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "propensity");
    EXPECT_EQ(e.kind(), "selection");
  }
  EXPECT_FALSE(fs::exists(out));
  EXPECT_FALSE(fs::exists(dir / "out.partial"));
}

TEST(Pipeline, MissingInputFailsAtIngest) {
  auto spec = noiseless_spec(1.0);
  const auto dir = fixtures::scratch_dir("missing_input");
  write_bundle(generate(spec), spec, dir);
  fs::remove(dir / "outcomes.csv");
  const auto rc = RunConfig::from(KeyValueConfig::load(dir / "run.cfg"));
  try {
    run_pipeline(rc);
    FAIL() << "expected StageError";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "ingest");
  }
}

TEST(Plot, WritesSvgAndCsvPerSelector) {
  const auto rc = bundle_config("plot", noiseless_spec(1.0));
  const auto out = fixtures::scratch_dir("plot_out") / "run";
  run_to_directory(rc, out);
  const auto figs = out / "figs";
  const auto written = write_plots(out, "all", figs);
  EXPECT_EQ(written.size(), 10u);
  const auto svg = fixtures::read_text(figs / "plot_S01.svg");
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
  EXPECT_EQ(header_of(figs / "plot_S01.csv"), (std::vector<std::string>{"week", "q05", "q95", "psi"}));
  EXPECT_EQ(csv::read(figs / "plot_S01.csv").rows.size(), 34u);
  EXPECT_EQ(write_plots(out, "S02", fixtures::scratch_dir("plot_one")).size(), 2u);
  EXPECT_THROW(write_plots(out, "nope", figs), SelectionError);
  EXPECT_THROW(read_bands(fixtures::scratch_dir("plot_empty")), ArtifactError);
}
