#include <gtest/gtest.h>

#include <sstream>

#include "helpers.hpp"
#include "streetrisk/pipeline.hpp"
#include "streetrisk/synth.hpp"

using namespace streetrisk;
namespace fs = std::filesystem;

namespace {

// A small synthetic city shared by the tests in this file.
class SmallCity : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new testing_util::TempDir();
    synth::CitySpec spec;
    spec.points = 150;
    spec.mask_size = 48;
    spec.seed = 3;
    synth::write_city(synth::gen_city(spec, CategorySchema::street19()), CategorySchema::street19(),
                      dir_->path() / "data");
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }

  static RunConfig config(const std::string& out) {
    RunConfig c;
    c.seed = 11;
    const auto d = dir_->path() / "data";
    c.paths = {d / "masks", d / "schema.json", d / "accidents.csv", d / "roads.csv", d / "mapping.json",
               dir_->path() / out};
    c.train.rounds = 20;
    c.train.max_depth = 3;
    c.causal.bootstrap = 6;
    c.causal.gps.model.rounds = 10;
    return c;
  }

  static inline testing_util::TempDir* dir_ = nullptr;
};

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(testing_util::slurp(p)); }

}  // namespace

TEST_F(SmallCity, FullRunWritesArtifactsAndManifest) {
  std::ostringstream log;
  const auto cfg = config("run_a");
  const auto res = run_pipeline(cfg, {kAllStages.begin(), kAllStages.end()}, &log);
  ASSERT_EQ(res.exit_status, 0) << log.str();
  const auto out = cfg.paths.output_dir;
  for (auto f : {"indicators.csv", "indicator_views.csv", "features.csv", "features_imputed.csv", "train.csv",
                 "test.csv", "smote_log.csv", "prep.json", "fishnet.csv", "model.json", "train_loss.csv",
                 "metrics.json", "test_predictions.csv", "shap_global.csv", "shap_global.svg", "shap_class.csv",
                 "shap_summary.json", "balance_report.json", "balance.csv", "effect_matrix.csv", "effect_matrix.json",
                 "effect_matrix.svg", "manifest.json"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  const auto m = read_json(out / "manifest.json");
  EXPECT_EQ(m["config_hash"], config_hash(cfg));
  EXPECT_EQ(m["exit_status"], 0);
  EXPECT_EQ(m["seed"], 11);
  for (auto st : kAllStages) {
    const auto& s = m["stages"][std::string(stage_name(st))];
    EXPECT_EQ(s["status"], "ok") << stage_name(st);
    EXPECT_FALSE(s["artifacts"].empty());
    EXPECT_GE(s["wall_seconds"].get<double>(), 0.0);
  }
  EXPECT_TRUE(m["versions"].contains("eigen"));
  const auto effects = read_json(out / "effect_matrix.json");
  EXPECT_EQ(effects["cells"].size() + effects["failures"].size(), 60u);

  // Rerun into a second directory: every CSV matches byte for byte.
  const auto cfg_b = config("run_b");
  ASSERT_EQ(run_pipeline(cfg_b, {kAllStages.begin(), kAllStages.end()}, &log).exit_status, 0);
  std::size_t compared = 0;
  for (const auto& e : fs::recursive_directory_iterator(out)) {
    if (e.path().extension() != ".csv") continue;
    const auto rel = fs::relative(e.path(), out);
    EXPECT_EQ(testing_util::slurp(e.path()), testing_util::slurp(cfg_b.paths.output_dir / rel)) << rel;
    ++compared;
  }
  EXPECT_GT(compared, 10u);
}

TEST_F(SmallCity, MatrixWithoutIndicatorsIsADependencyError) {
  std::ostringstream log;
  const auto cfg = config("run_dep");
  const auto res = run_pipeline(cfg, {Stage::Matrix}, &log);
  EXPECT_EQ(res.exit_status, 1);
  ASSERT_EQ(res.stages.size(), 1u);
  EXPECT_EQ(res.stages[0].status, "failed");
  EXPECT_NE(res.stages[0].error.find("'indicators'"), std::string::npos) << res.stages[0].error;
  EXPECT_FALSE(fs::exists(cfg.paths.output_dir / "effect_matrix.csv"));
}

TEST_F(SmallCity, StagesRunIndividuallyInOrder) {
  std::ostringstream log;
  const auto cfg = config("run_steps");
  EXPECT_EQ(run_pipeline(cfg, {Stage::Indicators}, &log).exit_status, 0);
  EXPECT_EQ(run_pipeline(cfg, {Stage::Prep}, &log).exit_status, 0);
  EXPECT_EQ(run_pipeline(cfg, {Stage::Explain}, &log).exit_status, 1);  // no model yet
  EXPECT_EQ(run_pipeline(cfg, {Stage::Train}, &log).exit_status, 0);
  const auto m = read_json(cfg.paths.output_dir / "manifest.json");
  EXPECT_EQ(m["stages"]["indicators"]["status"], "ok");
  EXPECT_EQ(m["stages"]["train"]["status"], "ok");
}

TEST_F(SmallCity, ConfigHashTracksEveryField) {
  const auto base = config("h");
  const auto h = config_hash(base);
  EXPECT_EQ(config_hash(config("h")), h);
  auto c = base;
  c.seed = 12;
  EXPECT_NE(config_hash(c), h);
  c = base;
  c.train.learning_rate = 0.2;
  EXPECT_NE(config_hash(c), h);
  c = base;
  c.causal.gps.truncation_percentile = 95.0;
  EXPECT_NE(config_hash(c), h);
  c = base;
  c.fishnet_cell = 0.02;
  EXPECT_NE(config_hash(c), h);
}

TEST_F(SmallCity, ConfigJsonRoundTrip) {
  const auto c = config("rt");
  const auto back = config_from_json(config_to_json(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
  auto j = config_to_json(c);
  j.erase("seed");
  EXPECT_THROW(config_from_json(j), Error);
  auto bad = c;
  bad.paths.masks_dir = dir_->path() / "nope";
  EXPECT_THROW(Pipeline(bad, nullptr), Error);
}

TEST(Stages, Parse) {
  EXPECT_EQ(parse_stage("extract"), Stage::Indicators);
  EXPECT_EQ(parse_stages("matrix, train,indicators"),
            (std::vector<Stage>{Stage::Indicators, Stage::Train, Stage::Matrix}));
  EXPECT_THROW(parse_stage("bake"), Error);
  EXPECT_THROW(parse_stages(" , "), Error);
}
