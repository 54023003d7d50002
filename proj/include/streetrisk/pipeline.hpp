#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <png.h>

#include "streetrisk/causal.hpp"
#include "streetrisk/csv.hpp"
#include "streetrisk/dataset.hpp"
#include "streetrisk/gbt.hpp"
#include "streetrisk/indicators.hpp"
#include "streetrisk/mask_io.hpp"
#include "streetrisk/shap.hpp"
#include "streetrisk/svg.hpp"

namespace streetrisk {

inline constexpr const char* kVersion = "0.1.0";

namespace fs = std::filesystem;

struct RunPaths {
  fs::path masks_dir;
  fs::path schema;  // empty: the built-in 19-class schema
  fs::path accidents_csv;
  fs::path road_csv;
  fs::path mapping_json;
  fs::path output_dir;
};

struct RunConfig {
  std::uint64_t seed = 0;
  RunPaths paths;
  IndicatorConfig indicator;
  TrainConfig train;
  EffectConfig causal;
  double test_fraction = 0.2;
  std::size_t smote_k = 5;
  double fishnet_cell = 0.01;

  // Input files must exist; the output directory is created on demand.
  void validate() const {
    indicator.validate();
    train.validate();
    causal.gps.validate();
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) fail("split.test_fraction must lie in (0, 1)");
    if (!(fishnet_cell > 0.0)) fail("fishnet.cell_size must be positive");
    if (smote_k < 1) fail("balance.k_neighbors must be >= 1");
    if (paths.output_dir.empty()) fail("paths.output_dir is required");
    auto need = [](const fs::path& p, const char* key, bool dir) {
      if (p.empty()) fail("paths.{} is required", key);
      if (dir ? !fs::is_directory(p) : !fs::is_regular_file(p))
        fail("paths.{}: '{}' does not exist", key, p.string());
    };
    need(paths.masks_dir, "masks_dir", true);
    need(paths.accidents_csv, "accidents_csv", false);
    need(paths.road_csv, "road_csv", false);
    need(paths.mapping_json, "mapping_json", false);
    if (!paths.schema.empty()) need(paths.schema, "schema", false);
  }
};

inline nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json causal = c.causal;
  causal.erase("seed");
  return {{"seed", c.seed},
          {"paths",
           {{"masks_dir", c.paths.masks_dir.string()},
            {"schema", c.paths.schema.string()},
            {"accidents_csv", c.paths.accidents_csv.string()},
            {"road_csv", c.paths.road_csv.string()},
            {"mapping_json", c.paths.mapping_json.string()},
            {"output_dir", c.paths.output_dir.string()}}},
          {"indicator", c.indicator},
          {"train", c.train},
          {"causal", causal},
          {"split", {{"test_fraction", c.test_fraction}}},
          {"balance", {{"k_neighbors", c.smote_k}}},
          {"fishnet", {{"cell_size", c.fishnet_cell}}}};
}

// Relative paths resolve against `base` (the config file's directory).
inline RunConfig config_from_json(const nlohmann::json& j, const fs::path& base = {}) {
  if (!j.contains("seed")) fail("config: 'seed' is required");
  RunConfig c;
  c.seed = j.at("seed").get<std::uint64_t>();
  const auto& p = j.at("paths");
  auto path = [&](const char* key) -> fs::path {
    const auto s = p.value(key, std::string());
    if (s.empty()) return {};
    fs::path v(s);
    return v.is_absolute() || base.empty() ? v : base / v;
  };
  c.paths = {path("masks_dir"), path("schema"), path("accidents_csv"), path("road_csv"), path("mapping_json"),
             path("output_dir")};
  if (j.contains("indicator")) c.indicator = j.at("indicator").get<IndicatorConfig>();
  if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
  if (j.contains("causal")) c.causal = j.at("causal").get<EffectConfig>();
  if (j.contains("split")) c.test_fraction = j.at("split").value("test_fraction", c.test_fraction);
  if (j.contains("balance")) c.smote_k = j.at("balance").value("k_neighbors", c.smote_k);
  if (j.contains("fishnet")) c.fishnet_cell = j.at("fishnet").value("cell_size", c.fishnet_cell);
  return c;
}

inline RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open config '{}'", path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail("config '{}': {}", path.string(), e.what());
  }
  try {
    return config_from_json(j, path.parent_path());
  } catch (const nlohmann::json::exception& e) {
    fail("config '{}': {}", path.string(), e.what());
  }
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string config_hash(const RunConfig& c) { return fmt::format("{:016x}", fnv1a64(config_to_json(c).dump())); }

// ---------------------------------------------------------------------------
// Stages

enum class Stage { Indicators, Prep, Train, Explain, Causal, Matrix };

inline constexpr std::array<Stage, 6> kAllStages = {Stage::Indicators, Stage::Prep,   Stage::Train,
                                                    Stage::Explain,    Stage::Causal, Stage::Matrix};

inline std::string_view stage_name(Stage s) {
  static constexpr std::array<std::string_view, 6> names = {"indicators", "prep",   "train",
                                                            "explain",    "causal", "matrix"};
  return names[static_cast<std::size_t>(s)];
}

inline Stage parse_stage(std::string_view s) {
  if (s == "extract") return Stage::Indicators;
  for (auto st : kAllStages)
    if (stage_name(st) == s) return st;
  fail("unknown stage '{}'", s);
}

// Comma-separated list, returned in pipeline order.
inline std::vector<Stage> parse_stages(std::string_view list) {
  std::vector<bool> on(kAllStages.size(), false);
  std::size_t start = 0;
  while (start <= list.size()) {
    const auto end = std::min(list.find(',', start), list.size());
    const auto item = csv::trim(list.substr(start, end - start));
    if (!item.empty()) on[static_cast<std::size_t>(parse_stage(item))] = true;
    start = end + 1;
  }
  std::vector<Stage> out;
  for (auto s : kAllStages)
    if (on[static_cast<std::size_t>(s)]) out.push_back(s);
  if (out.empty()) fail("no stages selected");
  return out;
}

// The artifacts each stage reads, grouped by the stage that writes them.
inline std::vector<std::pair<Stage, std::vector<std::string>>> stage_inputs(Stage s) {
  switch (s) {
    case Stage::Indicators: return {};
    case Stage::Prep: return {{Stage::Indicators, {"indicators.csv"}}};
    case Stage::Train: return {{Stage::Prep, {"train.csv", "test.csv"}}};
    case Stage::Explain: return {{Stage::Train, {"model.json"}}, {Stage::Prep, {"test.csv"}}};
    case Stage::Causal:
    case Stage::Matrix: return {{Stage::Prep, {"features_imputed.csv"}}};
  }
  return {};
}

struct StageRecord {
  std::string name;
  std::string status;  // ok | partial | failed
  double seconds = 0.0;
  std::vector<std::string> artifacts;
  std::string error;
};

struct RunResult {
  int exit_status = 0;
  std::vector<StageRecord> stages;
};

class Pipeline {
 public:
  explicit Pipeline(RunConfig cfg, std::ostream* log = &std::cerr) : cfg_(std::move(cfg)), log_(log) {
    cfg_.validate();
    out_ = cfg_.paths.output_dir;
    schema_ = cfg_.paths.schema.empty() ? CategorySchema::street19() : load_schema(cfg_.paths.schema);
  }

  const RunConfig& config() const { return cfg_; }
  const fs::path& output_dir() const { return out_; }

  // The earliest stage whose outputs are missing among `s`'s upstream chain.
  std::optional<Stage> missing_upstream(Stage s) const {
    for (const auto& [producer, files] : stage_inputs(s))
      for (const auto& f : files)
        if (!fs::exists(out_ / f)) return missing_upstream(producer).value_or(producer);
    return std::nullopt;
  }

  RunResult run(const std::vector<Stage>& stages) {
    RunResult res;
    for (auto s : stages) {
      StageRecord rec;
      rec.name = std::string(stage_name(s));
      const auto t0 = std::chrono::steady_clock::now();
      try {
        if (auto m = missing_upstream(s))
          fail("stage '{}' needs outputs of stage '{}'; run '{}' first", stage_name(s), stage_name(*m), stage_name(*m));
        say("[{}] running", rec.name);
        artifacts_.clear();
        partial_.clear();
        run_stage(s);
        rec.artifacts = artifacts_;
        rec.status = partial_.empty() ? "ok" : "partial";
        rec.error = partial_;
      } catch (const std::exception& e) {
        rec.status = "failed";
        rec.error = e.what();
        rec.artifacts = artifacts_;
      }
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      say("[{}] {} in {:.2f} s{}", rec.name, rec.status, rec.seconds, rec.error.empty() ? "" : ": " + rec.error);
      res.stages.push_back(rec);
      if (rec.status == "failed") {
        res.exit_status = 1;
        break;
      }
      if (rec.status == "partial") res.exit_status = 2;
    }
    write_manifest(res);
    return res;
  }

 private:
  template <typename... Args>
  void say(fmt::format_string<Args...> f, Args&&... args) {
    if (log_) *log_ << fmt::format(f, std::forward<Args>(args)...) << '\n';
  }

  static CategorySchema load_schema(const fs::path& p) {
    std::ifstream in(p);
    if (!in) fail("cannot open schema '{}'", p.string());
    try {
      return CategorySchema::from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
      fail("schema '{}': {}", p.string(), e.what());
    }
  }

  std::uint64_t stage_seed(std::uint64_t index) const { return Rng::derive(cfg_.seed, index).next(); }

  void emit(const std::string& name, std::string_view content) {
    csv::write_atomic(out_ / name, content);
    artifacts_.push_back(name);
  }

  void run_stage(Stage s) {
    switch (s) {
      case Stage::Indicators: return stage_indicators();
      case Stage::Prep: return stage_prep();
      case Stage::Train: return stage_train();
      case Stage::Explain: return stage_explain();
      case Stage::Causal: return stage_causal();
      case Stage::Matrix: return stage_matrix();
    }
  }

  void stage_indicators() {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(cfg_.paths.masks_dir)) {
      const auto ext = e.path().extension().string();
      if (e.is_regular_file() && (ext == ".png" || ext == ".PNG" || ext == ".txt")) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) fail("no masks (*.png, *.txt) in '{}'", cfg_.paths.masks_dir.string());

    std::map<std::string, std::vector<IndicatorVector>> by_point;
    std::vector<std::vector<std::string>> view_rows;
    for (const auto& f : files) {
      const auto name = parse_mask_name(f);
      if (!name) fail("'{}': mask names must look like <point_id>_<heading>", f.filename().string());
      const auto mask = load_mask(f, schema_);
      const auto iv = compute_indicators(mask, schema_, cfg_.indicator);
      std::vector<std::string> r{name->point_id, std::to_string(name->heading)};
      for (double v : iv.values()) r.push_back(num(v));
      view_rows.push_back(std::move(r));
      by_point[name->point_id].push_back(iv);
    }
    std::map<std::string, PointIndicators> points;
    for (const auto& [pid, views] : by_point) points[pid] = {aggregate_views(views), views.size()};

    std::vector<std::string> header{"point_id", "heading"};
    for (auto n : IndicatorVector::kNames) header.emplace_back(n);
    emit("indicator_views.csv", csv::render(header, view_rows));
    emit("indicators.csv", render_indicator_csv(points));
    say("[indicators] {} masks, {} points", files.size(), points.size());
  }

  void stage_prep() {
    const auto points = read_indicator_csv(out_ / "indicators.csv");
    const auto mapping = AccidentMapping::load(cfg_.paths.mapping_json);
    const auto records = read_accidents_csv(cfg_.paths.accidents_csv, mapping);
    const auto roads = read_road_csv(cfg_.paths.road_csv);
    const auto joined = join_features(records, points, roads);
    emit("features.csv", render_feature_csv(joined));

    // Full-data imputation feeds the causal stages; the classifier path
    // imputes with training means only.
    const auto [full, full_imp] = impute_column_means(joined);
    emit("features_imputed.csv", render_feature_csv(full));

    const auto split = stratified_split(joined, cfg_.test_fraction, stage_seed(1));
    const auto imputer = Imputer::fit(split.train);
    const auto train = imputer.apply(split.train);
    const auto test = imputer.apply(split.test);
    BalanceOptions bo;
    bo.k_neighbors = cfg_.smote_k;
    const auto balanced = balance_classes(train, stage_seed(2), bo);
    emit("train.csv", render_feature_csv(balanced.table));
    emit("test.csv", render_feature_csv(test));

    std::vector<std::vector<std::string>> smote;
    for (const auto& o : balanced.synthetic)
      smote.push_back({std::to_string(o.row), split.train.point_ids[o.parent_a], split.train.point_ids[o.parent_b],
                       num(o.lambda)});
    emit("smote_log.csv", csv::render({"row", "parent_a", "parent_b", "lambda"}, smote));

    nlohmann::json prep;
    for (std::size_t c = 0; c < kFeatureCount; ++c) {
      prep["imputation"]["train"][std::string(kFeatureNames[c])] = imputer.fill[c];
      prep["imputation"]["full"][std::string(kFeatureNames[c])] = full_imp.fill[c];
    }
    auto counts = [](const FeatureTable& t) {
      nlohmann::json j;
      const auto c = t.class_counts();
      for (std::size_t k = 0; k < c.size(); ++k) j[std::string(kAccidentClassNames[k])] = c[k];
      return j;
    };
    prep["rows"] = {{"joined", joined.size()}, {"train", split.train.size()}, {"test", split.test.size()},
                    {"balanced", balanced.table.size()}};
    prep["class_counts"] = {{"joined", counts(joined)}, {"train", counts(split.train)},
                            {"balanced", counts(balanced.table)}, {"test", counts(test)}};
    prep["balance_target"] = balanced.target;
    emit("prep.json", prep.dump(2) + "\n");

    emit("fishnet.csv", render_fishnet_csv(fishnet_aggregate(records, points, cfg_.fishnet_cell)));
    say("[prep] {} records, train {} -> {} balanced, test {}", joined.size(), split.train.size(),
        balanced.table.size(), test.size());
  }

  void stage_train() {
    const auto train = read_feature_csv(out_ / "train.csv");
    const auto test = read_feature_csv(out_ / "test.csv");
    std::vector<double> loss;
    const auto model = fit_multiclass(train.features, train.labels, kAccidentClassCount, cfg_.train, &loss);
    save_model(out_ / "model.json", model);
    artifacts_.push_back("model.json");

    std::vector<std::vector<std::string>> rows;
    for (std::size_t r = 0; r < loss.size(); ++r) rows.push_back({std::to_string(r), num(loss[r])});
    emit("train_loss.csv", csv::render({"round", "cross_entropy"}, rows));

    const auto m = evaluate_classifier(model, test.features, test.labels);
    nlohmann::json j;
    j["accuracy"] = m.accuracy;
    j["macro_f1"] = m.macro_f1;
    j["confusion"] = m.confusion;
    j["classes"] = kAccidentClassNames;
    for (std::size_t k = 0; k < m.f1.size(); ++k)
      j["f1"][std::string(kAccidentClassNames[k])] = is_missing(m.f1[k]) ? nlohmann::json() : nlohmann::json(m.f1[k]);
    j["train_rows"] = train.size();
    j["test_rows"] = test.size();
    j["final_train_cross_entropy"] = loss.back();
    emit("metrics.json", j.dump(2) + "\n");

    std::vector<std::vector<std::string>> pred;
    for (std::size_t i = 0; i < test.size(); ++i) {
      const auto p = predict_proba(model, test.features.row(i));
      std::vector<std::string> r{test.point_ids[i], std::string(kAccidentClassNames[static_cast<std::size_t>(test.labels[i])]),
                                 std::string(kAccidentClassNames[argmax(p)])};
      for (double v : p) r.push_back(num(v));
      pred.push_back(std::move(r));
    }
    std::vector<std::string> header{"point_id", "true", "predicted"};
    for (auto n : kAccidentClassNames) header.push_back("p_" + std::string(n));
    emit("test_predictions.csv", csv::render(header, pred));
    say("[train] accuracy {:.3f}, macro-F1 {:.3f}", m.accuracy, m.macro_f1);
  }

  void stage_explain() {
    const auto model = load_model(out_ / "model.json");
    const auto test = read_feature_csv(out_ / "test.csv");
    const auto attrs = tree_shap_all(model, test.features);

    double max_err = 0.0;
    for (const auto& a : attrs) {
      const auto logits = predict_logits(model, a.x);
      for (std::size_t k = 0; k < logits.size(); ++k) {
        double s = a.phi0[k];
        for (std::size_t j = 0; j < a.phi.cols(); ++j) s += a.phi(k, j);
        max_err = std::max(max_err, std::abs(s - logits[k]));
      }
    }

    const auto g = global_importance(attrs);
    std::vector<std::string> names;
    for (auto n : kFeatureNames) names.emplace_back(n);
    std::vector<std::vector<std::string>> rows;
    for (std::size_t j = 0; j < names.size(); ++j) rows.push_back({names[j], num(g.mean_abs[j]), num(g.shares[j])});
    emit("shap_global.csv", csv::render({"feature", "mean_abs_shap", "share"}, rows));
    emit("shap_global.svg", svg::bar_chart(names, g.shares, "Share of mean |SHAP| (all classes)"));

    rows.clear();
    nlohmann::json summary;
    for (std::size_t k = 0; k < model.num_class; ++k) {
      const std::string cls(kAccidentClassNames[k]);
      std::vector<double> shares;
      try {
        shares = class_importance(attrs, k);
      } catch (const Error&) {
        shares.assign(names.size(), kMissing);
      }
      for (std::size_t j = 0; j < names.size(); ++j)
        rows.push_back({cls, names[j], num(g.class_mean_abs(k, j)), num(shares[j])});
      std::size_t top = 0;
      for (std::size_t j = 1; j < names.size(); ++j)
        if (g.class_mean_abs(k, j) > g.class_mean_abs(k, top)) top = j;
      summary["top_feature"][cls] = names[top];
      for (std::size_t j = 0; j < names.size(); ++j) {
        const auto pts = dependence_table(attrs, j, k);
        emit(fmt::format("dependence/{}__{}.csv", names[j], cls), render_dependence_csv(pts));
        if (j == top)
          emit(fmt::format("dependence/{}__{}.svg", names[j], cls),
               svg::scatter(pts, fmt::format("SHAP dependence: {} on {}", names[j], cls), names[j]));
      }
    }
    emit("shap_class.csv", csv::render({"class", "feature", "mean_abs_shap", "share"}, rows));

    summary["samples"] = attrs.size();
    summary["max_additivity_error"] = max_err;
    for (std::size_t j = 0; j < names.size(); ++j) summary["global_share"][names[j]] = g.shares[j];
    emit("shap_summary.json", summary.dump(2) + "\n");
    if (max_err > 1e-6) fail("SHAP additivity violated: max error {}", max_err);
    say("[explain] {} samples, additivity error {:.2e}", attrs.size(), max_err);
  }

  CausalData causal_data() const {
    const auto t = read_feature_csv(out_ / "features_imputed.csv");
    return causal_data_from(t);
  }

  EffectConfig effect_config() const {
    auto c = cfg_.causal;
    c.seed = stage_seed(3);
    return c;
  }

  void stage_causal() {
    const auto data = causal_data();
    const auto ec = effect_config();
    nlohmann::json j = nlohmann::json::array();
    std::vector<std::vector<std::string>> rows;
    for (std::size_t t = 0; t < data.names.size(); ++t) {
      const auto gps = fit_gps(data, t, ec.gps);
      const auto d = gps_diagnostics(data, gps.model, ec.gps);
      j.push_back(diagnostics_to_json(d));
      if (d.balance)
        for (const auto& c : d.balance->covariates) rows.push_back({d.treatment, c.name, num(c.before), num(c.after)});
    }
    emit("balance_report.json", j.dump(2) + "\n");
    emit("balance.csv", csv::render({"treatment", "covariate", "smd_before", "smd_after"}, rows));
  }

  void stage_matrix() {
    const auto data = causal_data();
    const auto m = build_effect_matrix(data, effect_config());
    emit("effect_matrix.csv", render_effect_csv(m));
    emit("effect_matrix.json", matrix_to_json(m).dump(2) + "\n");
    emit("effect_matrix.svg", svg::effect_grid(m));
    if (const auto f = m.failures())
      partial_ = fmt::format("{} of {} effect cells failed; see effect_matrix.json", f, m.cells.size());
  }

  void write_manifest(const RunResult& res) {
    const auto path = out_ / "manifest.json";
    const auto hash = config_hash(cfg_);
    nlohmann::json stages = nlohmann::json::object();
    if (fs::exists(path)) {
      try {
        std::ifstream in(path);
        const auto old = nlohmann::json::parse(in);
        if (old.value("config_hash", "") == hash && old.contains("stages")) stages = old.at("stages");
      } catch (const nlohmann::json::exception&) {
      }
    }
    for (const auto& s : res.stages) {
      nlohmann::json r = {{"status", s.status}, {"wall_seconds", s.seconds}, {"artifacts", s.artifacts}};
      if (!s.error.empty()) r["error"] = s.error;
      stages[s.name] = r;
    }
    nlohmann::json m;
    m["tool"] = "streetrisk";
    m["config_hash"] = hash;
    m["seed"] = cfg_.seed;
    m["rng"] = Rng::kAlgorithm;
    m["versions"] = {{"streetrisk", kVersion},
                     {"eigen", fmt::format("{}.{}.{}", EIGEN_WORLD_VERSION, EIGEN_MAJOR_VERSION, EIGEN_MINOR_VERSION)},
                     {"libpng", PNG_LIBPNG_VER_STRING},
                     {"fmt", FMT_VERSION},
                     {"nlohmann_json", fmt::format("{}.{}.{}", NLOHMANN_JSON_VERSION_MAJOR, NLOHMANN_JSON_VERSION_MINOR,
                                                   NLOHMANN_JSON_VERSION_PATCH)}};
    m["config"] = config_to_json(cfg_);
    m["stages"] = stages;
    m["exit_status"] = res.exit_status;
    fs::create_directories(out_);
    csv::write_atomic(path, m.dump(2) + "\n");
  }

  RunConfig cfg_;
  std::ostream* log_;
  fs::path out_;
  CategorySchema schema_;
  std::vector<std::string> artifacts_;
  std::string partial_;
};

inline RunResult run_pipeline(const RunConfig& cfg, const std::vector<Stage>& stages, std::ostream* log = &std::cerr) {
  return Pipeline(cfg, log).run(stages);
}

}  // namespace streetrisk
