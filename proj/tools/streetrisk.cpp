// Batch driver: extract, prep, train, explain, causal, matrix, simulate, all.
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "streetrisk/pipeline.hpp"
#include "streetrisk/synth.hpp"

namespace sr = streetrisk;

namespace {

nlohmann::json describe(const CLI::App& app) {
  nlohmann::json j;
  j["name"] = app.get_name();
  j["description"] = app.get_description();
  j["options"] = nlohmann::json::array();
  for (const auto* opt : app.get_options()) {
    nlohmann::json o;
    o["names"] = opt->get_name(false, true);
    o["description"] = opt->get_description();
    o["takes_value"] = opt->get_type_size() != 0;
    o["required"] = opt->get_required();
    if (!opt->get_default_str().empty()) o["default"] = opt->get_default_str();
    j["options"].push_back(o);
  }
  for (const auto* sub : app.get_subcommands({})) j["subcommands"].push_back(describe(*sub));
  return j;
}

struct RunArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string stages = "indicators,prep,train,explain,causal,matrix";
};

void add_run_options(CLI::App* cmd, RunArgs& a, bool with_stages) {
  cmd->add_option("--config", a.config, "Run configuration JSON")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", a.seed, "Override the configured seed");
  cmd->add_option("--out", a.out, "Override the output directory");
  if (with_stages) cmd->add_option("--stages", a.stages, "Comma-separated stages to run")->capture_default_str();
}

int run(const RunArgs& a, const std::vector<sr::Stage>& stages) {
  auto cfg = sr::load_config(a.config);
  if (a.seed) cfg.seed = *a.seed;
  if (!a.out.empty()) cfg.paths.output_dir = a.out;
  const auto res = sr::run_pipeline(cfg, stages);
  return res.exit_status;
}

struct SimArgs {
  std::string out;
  std::uint64_t seed = 7;
  std::size_t points = 500;
  std::size_t views = 4;
  std::size_t mask_size = 96;
  double missing = 0.01;
  std::size_t bootstrap = 200;
};

int simulate(const SimArgs& a) {
  namespace fs = std::filesystem;
  const fs::path root(a.out);
  const auto schema = sr::CategorySchema::street19();
  sr::synth::CitySpec spec;
  spec.seed = a.seed;
  spec.points = a.points;
  spec.views = a.views;
  spec.mask_size = a.mask_size;
  spec.missing_fraction = a.missing;
  const auto city = sr::synth::gen_city(spec, schema);
  sr::synth::write_city(city, schema, root / "data");

  sr::RunConfig cfg;
  cfg.seed = a.seed;
  cfg.paths = {"data/masks", "data/schema.json", "data/accidents.csv", "data/roads.csv", "data/mapping.json", "run"};
  cfg.causal.bootstrap = a.bootstrap;
  auto j = sr::config_to_json(cfg);
  j["simulation"] = {{"seed", a.seed},         {"points", a.points},   {"views", a.views},
                     {"mask_size", a.mask_size}, {"missing_fraction", a.missing}, {"rng", sr::Rng::kAlgorithm}};
  sr::csv::write_atomic(root / "config.json", j.dump(2) + "\n");
  fmt::print(stderr, "synthetic city: {} points, {} masks -> {}\n", city.accidents.size(), city.scenes.size(),
             root.string());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Street-view indicators, accident-type classification and causal effect estimation"};
  app.require_subcommand(0, 1);
  app.set_version_flag("--version", std::string("streetrisk ") + sr::kVersion);
  bool help_json = false;
  app.add_flag("--help-json", help_json, "Print the command-line interface as JSON and exit");

  RunArgs ra;
  struct Single {
    const char* name;
    const char* help;
    sr::Stage stage;
  };
  const Single singles[] = {
      {"extract", "Compute indicators from label masks", sr::Stage::Indicators},
      {"prep", "Join, impute, split, balance and aggregate to the fishnet grid", sr::Stage::Prep},
      {"train", "Fit the boosted-tree accident-type classifier", sr::Stage::Train},
      {"explain", "TreeSHAP attributions, importances and dependence data", sr::Stage::Explain},
      {"causal", "GPS fits and covariate balance diagnostics", sr::Stage::Causal},
      {"matrix", "Bootstrap odds-ratio matrix for every treatment and accident type", sr::Stage::Matrix},
  };
  std::vector<std::pair<CLI::App*, sr::Stage>> stage_cmds;
  for (const auto& s : singles) {
    auto* cmd = app.add_subcommand(s.name, s.help);
    add_run_options(cmd, ra, false);
    stage_cmds.push_back({cmd, s.stage});
  }
  auto* all = app.add_subcommand("all", "Run the selected stages in order");
  add_run_options(all, ra, true);

  SimArgs sa;
  auto* sim = app.add_subcommand("simulate", "Write a synthetic city data set and a matching run config");
  sim->add_option("--out", sa.out, "Destination directory")->required();
  sim->add_option("--seed", sa.seed, "Generator seed")->capture_default_str();
  sim->add_option("--points", sa.points, "Number of street points")->capture_default_str();
  sim->add_option("--views", sa.views, "Views per point (1-4)")->capture_default_str();
  sim->add_option("--mask-size", sa.mask_size, "Mask width and height in pixels")->capture_default_str();
  sim->add_option("--missing", sa.missing, "Fraction of points without imagery")->capture_default_str();
  sim->add_option("--bootstrap", sa.bootstrap, "Bootstrap replicates in the written config")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  if (help_json) {
    std::cout << describe(app).dump(2) << '\n';
    return 0;
  }
  try {
    for (const auto& [cmd, stage] : stage_cmds)
      if (cmd->parsed()) return run(ra, {stage});
    if (all->parsed()) return run(ra, sr::parse_stages(ra.stages));
    if (sim->parsed()) return simulate(sa);
    std::cout << app.help();
    return 64;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
