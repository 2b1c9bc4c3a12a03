// pscm command-line front end: simulate, ingest, run, plot.
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "pscm/pscm.hpp"
#include "pscm/plot.hpp"

namespace fs = std::filesystem;

namespace {

pscm::KeyValueConfig load_config(const std::string& path) {
  if (path.empty()) return {};
  return pscm::KeyValueConfig::load(path);
}

int simulate(const std::string& config, std::optional<std::uint64_t> seed, const std::string& out,
             const std::vector<std::string>& sets) {
  auto cfg = load_config(config);
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw pscm::ConfigurationError("--set expects key=value, got " + kv);
    cfg.set(pscm::trim(kv.substr(0, eq)), pscm::trim(kv.substr(eq + 1)));
  }
  if (seed) cfg.set("seed", std::to_string(*seed));
  const auto spec = pscm::FactorModelSpec::from_config(cfg);
  const auto data = pscm::generate(spec);
  pscm::write_bundle(data, spec, out);
  std::cout << "wrote " << data.panel.n_units() << " units x " << data.panel.n_weeks() << " weeks to "
            << out << " (" << data.schedule.size() << " treated, " << data.truth.clip_count
            << " clipped values)\n";
  return 0;
}

int ingest(const std::string& config, const std::string& out) {
  const auto cfg = load_config(config);
  const auto in = pscm::load_inputs(cfg);
  fs::create_directories(out);
  std::vector<std::string> header{"unit_id", "group", "population"};
  for (const auto& d : in.panel.calendar()) header.push_back(pscm::format_date(d));
  pscm::csv::Writer w(header);
  for (std::size_t i = 0; i < in.panel.n_units(); ++i) {
    w.cell(in.panel.units()[i]).cell(in.panel.group()[i]).cell(in.panel.population()[i]);
    for (int t = 0; t < in.panel.n_weeks(); ++t) w.cell(in.panel.outcomes()(static_cast<Eigen::Index>(i), t));
    w.end();
  }
  w.save(fs::path(out) / "panel.csv");
  pscm::write_exclusions(in.report.exclusions, fs::path(out) / "exclusions.csv");
  const auto report = pscm::format_report(in);
  std::ofstream(fs::path(out) / "ingestion_report.txt", std::ios::binary) << report;
  std::cout << report;
  return 0;
}

int run(const std::string& config, std::optional<std::uint64_t> seed, std::optional<int> jobs,
        const std::string& out) {
  auto cfg = load_config(config);
  if (seed) cfg.set("seed", std::to_string(*seed));
  auto rc = pscm::RunConfig::from(cfg);
  if (jobs) rc.jobs = *jobs;
  const auto res = pscm::run_to_directory(rc, out);
  std::cout << "run complete: " << res.treated.size() << " treated units, " << res.pool.members.size()
            << " donors, " << res.selectors.size() << " selectors -> " << out << "\n";
  for (const auto& w : res.warnings) std::cerr << "warning: " << w << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Penalized synthetic control with staggered adoption"};
  app.require_subcommand(1);

  std::string config, out;
  std::uint64_t seed = 0;
  int jobs = 1;
  std::vector<std::string> sets;
  std::string target = "all";

  auto* sim = app.add_subcommand("simulate", "Generate a synthetic CSV bundle from a factor model spec");
  sim->add_option("--config", config, "Spec file (key = value)");
  auto* sim_seed = sim->add_option("--seed", seed, "Override the spec seed");
  sim->add_option("--set", sets, "Override a spec key (key=value), repeatable");
  sim->add_option("--out", out, "Output directory")->required();

  auto* ing = app.add_subcommand("ingest", "Validate inputs and write the weekly panel");
  ing->add_option("--config", config, "Run config")->required();
  ing->add_option("--out", out, "Output directory")->required();

  auto* rn = app.add_subcommand("run", "Run the full estimation pipeline");
  rn->add_option("--config", config, "Run config")->required();
  auto* run_seed = rn->add_option("--seed", seed, "Override the config seed");
  auto* run_jobs = rn->add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);
  rn->add_option("--out", out, "Artifact directory")->required();

  auto* pl = app.add_subcommand("plot", "Render effect series with placebo bands");
  std::string artifacts;
  pl->add_option("artifacts", artifacts, "Artifact directory from `run`")->required();
  pl->add_option("--target", target, "Selector name or all");
  pl->add_option("--out", out, "Output directory (default: the artifact directory)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (sim->parsed()) {
      return simulate(config, *sim_seed ? std::optional(seed) : std::nullopt, out, sets);
    }
    if (ing->parsed()) return ingest(config, out);
    if (rn->parsed()) {
      return run(config, *run_seed ? std::optional(seed) : std::nullopt,
                 *run_jobs ? std::optional(jobs) : std::nullopt, out);
    }
    if (pl->parsed()) {
      for (const auto& p : pscm::write_plots(artifacts, target, out.empty() ? artifacts : out)) {
        std::cout << "wrote " << p.string() << "\n";
      }
      return 0;
    }
  } catch (const pscm::Error& e) {
    std::cerr << "error (" << e.kind() << "): " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
