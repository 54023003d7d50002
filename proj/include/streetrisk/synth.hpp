#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "streetrisk/causal.hpp"
#include "streetrisk/common.hpp"
#include "streetrisk/dataset.hpp"
#include "streetrisk/indicators.hpp"
#include "streetrisk/mask_io.hpp"

namespace streetrisk::synth {

// ---------------------------------------------------------------------------
// Block scenes with closed-form indicator values

struct Band {
  int class_id;
  double proportion;
};

struct Rect {
  std::size_t w, h;
};

struct SceneRecipe {
  std::size_t width = 100;
  std::size_t height = 100;
  std::vector<Band> bands;  // filled row-major from the top, in order
  int filler_class = 11;    // fills whatever the bands leave uncovered
  std::size_t obstacles = 0;
  Rect obstacle_size{3, 6};
  int obstacle_class = 5;
  std::vector<Rect> signs;
  int sign_class = 7;
  int heading = 0;
  std::string point_id;
};

struct Scene {
  LabelMask mask;
  IndicatorVector expected;
  std::vector<std::size_t> pixel_counts;  // bookkeeping per class id
};

namespace detail {

inline double entropy_ratio(const std::vector<std::size_t>& counts, std::size_t total) {
  double h = 0.0;
  std::size_t present = 0;
  for (auto c : counts) {
    if (c == 0) continue;
    ++present;
    const double p = static_cast<double>(c) / static_cast<double>(total);
    h += p * std::log(p);
  }
  return present < 2 ? 0.0 : -h / std::log(static_cast<double>(present));
}

}  // namespace detail

// Builds the mask and derives every indicator from the construction itself:
// ratios from pixel bookkeeping, VOD from the planted object count, TSI from
// the planted rectangle sizes, SOR from a direct scan of the sight window.
inline Scene gen_scene(const SceneRecipe& r, const CategorySchema& schema,
                       const IndicatorConfig& cfg = IndicatorConfig{}) {
  const std::size_t total = r.width * r.height;
  if (total == 0) fail("scene has zero area");
  double psum = 0.0;
  for (const auto& b : r.bands) {
    if (b.proportion < 0.0) fail("negative band proportion");
    psum += b.proportion;
  }
  if (psum > 1.0 + 1e-12) fail("infeasible scene recipe: band proportions sum to {} > 1", psum);

  const auto& obstacle_role = cfg.role(schema, "obstacle");
  const auto& sign_role = cfg.role(schema, "traffic_sign");
  for (const auto& b : r.bands)
    if (obstacle_role.count(b.class_id) || sign_role.count(b.class_id))
      fail("band class {} belongs to an object role; plant objects instead", b.class_id);
  if (obstacle_role.count(r.filler_class) || sign_role.count(r.filler_class))
    fail("filler class {} belongs to an object role", r.filler_class);
  if (!obstacle_role.count(r.obstacle_class) || sign_role.count(r.obstacle_class))
    fail("obstacle class {} must be an obstacle but not a sign", r.obstacle_class);
  if (!sign_role.count(r.sign_class)) fail("sign class {} is not in the traffic_sign role", r.sign_class);

  std::vector<std::uint8_t> px(total, static_cast<std::uint8_t>(r.filler_class));
  std::vector<std::size_t> counts(256, 0);
  counts[static_cast<std::size_t>(r.filler_class)] = total;
  std::size_t cursor = 0;
  for (const auto& b : r.bands) {
    const auto n = static_cast<std::size_t>(std::llround(b.proportion * static_cast<double>(total)));
    if (cursor + n > total) fail("infeasible scene recipe: bands overflow the image");
    for (std::size_t i = cursor; i < cursor + n; ++i) px[i] = static_cast<std::uint8_t>(b.class_id);
    counts[static_cast<std::size_t>(b.class_id)] += n;
    counts[static_cast<std::size_t>(r.filler_class)] -= n;
    cursor += n;
  }

  // Objects sit in a slot grid with one background pixel between slots.
  std::vector<std::pair<Rect, int>> objects;
  for (std::size_t i = 0; i < r.obstacles; ++i) objects.push_back({r.obstacle_size, r.obstacle_class});
  for (const auto& s : r.signs) objects.push_back({s, r.sign_class});
  std::size_t slot_w = 1, slot_h = 1;
  for (const auto& [rect, cls] : objects) {
    if (rect.w * rect.h < cfg.min_component_px) fail("planted object {}x{} is below min_component_px", rect.w, rect.h);
    slot_w = std::max(slot_w, rect.w + 1);
    slot_h = std::max(slot_h, rect.h + 1);
  }
  const std::size_t per_row = r.width / slot_w;
  if (!objects.empty() && (per_row == 0 || ((objects.size() + per_row - 1) / per_row) * slot_h > r.height))
    fail("infeasible scene recipe: {} objects do not fit in {}x{}", objects.size(), r.width, r.height);
  for (std::size_t i = 0; i < objects.size(); ++i) {
    const auto [rect, cls] = objects[i];
    const std::size_t x0 = (i % per_row) * slot_w, y0 = (i / per_row) * slot_h;
    for (std::size_t y = y0; y < y0 + rect.h; ++y)
      for (std::size_t x = x0; x < x0 + rect.w; ++x) {
        auto& p = px[y * r.width + x];
        --counts[p];
        ++counts[static_cast<std::size_t>(cls)];
        p = static_cast<std::uint8_t>(cls);
      }
  }

  Scene s{LabelMask(r.width, r.height, px, schema, r.heading, r.point_id), {}, counts};
  auto ratio = [&](const ClassSet& set) {
    std::size_t hit = 0;
    for (int c : set) hit += counts[static_cast<std::size_t>(c)];
    return static_cast<double>(hit) / static_cast<double>(total);
  };
  auto& e = s.expected;
  e.bc = detail::entropy_ratio(counts, total);
  {
    const auto c0 = static_cast<std::size_t>(std::lround(cfg.center.x0 * static_cast<double>(r.width)));
    const auto c1 = static_cast<std::size_t>(std::lround(cfg.center.x1 * static_cast<double>(r.width)));
    const auto r0 = static_cast<std::size_t>(std::lround(cfg.center.y0 * static_cast<double>(r.height)));
    const auto r1 = static_cast<std::size_t>(std::lround(cfg.center.y1 * static_cast<double>(r.height)));
    const auto& obstruction = cfg.role(schema, "obstruction");
    std::size_t hit = 0;
    for (std::size_t y = r0; y < r1; ++y)
      for (std::size_t x = c0; x < c1; ++x) hit += obstruction.count(px[y * r.width + x]);
    e.sor = static_cast<double>(hit) / static_cast<double>((c1 - c0) * (r1 - r0));
  }
  e.bor = ratio(cfg.role(schema, "building"));
  e.vod = static_cast<double>(objects.size()) / (static_cast<double>(total) / 10000.0);
  e.vo = ratio(set_union(cfg.role(schema, "sky"), cfg.role(schema, "terrain")));
  e.dar = ratio(cfg.role(schema, "road"));
  e.es = ratio(cfg.role(schema, "escape"));
  e.sr = ratio(cfg.role(schema, "sidewalk"));
  e.vc = ratio(cfg.role(schema, "vegetation"));
  e.vd = ratio(cfg.role(schema, "vehicle"));
  if (!r.signs.empty()) {
    constexpr double pi = 3.14159265358979323846;
    double acc = 0.0;
    for (const auto& sg : r.signs) {
      const double area = static_cast<double>(sg.w * sg.h), perim = 2.0 * static_cast<double>(sg.w + sg.h);
      acc += std::min(1.0, 4.0 * pi * area / (perim * perim));
    }
    e.tsi = acc / static_cast<double>(r.signs.size());
  }
  return s;
}

struct SynthSpec {
  std::uint64_t seed = 0;
  std::size_t scenes = 50;
  std::size_t width = 100;
  std::size_t height = 100;
  std::size_t max_obstacles = 8;
  std::size_t max_signs = 3;
  bool square_signs = false;  // squares only (TSI = pi/4 exactly)
};

// Random street-like recipe: sky on top, buildings and vegetation, then the
// ground classes, with planted poles and signs in the upper rows.
inline SceneRecipe random_recipe(Rng& rng, std::size_t width, std::size_t height, std::size_t max_obstacles,
                                 std::size_t max_signs, bool square_signs) {
  SceneRecipe r;
  r.width = width;
  r.height = height;
  // sky, building, vegetation, terrain, car, sidewalk, road
  const int classes[] = {10, 2, 8, 9, 13, 1, 0};
  double raw[7];
  double s = 0.0;
  for (auto& v : raw) s += (v = 0.05 + rng.uniform());
  const double cover = rng.uniform(0.7, 1.0);
  for (std::size_t i = 0; i < 7; ++i) r.bands.push_back({classes[i], raw[i] / s * cover});
  r.obstacles = rng.below(max_obstacles + 1);
  const auto n_signs = rng.below(max_signs + 1);
  for (std::size_t i = 0; i < n_signs; ++i) {
    const auto a = 3 + rng.below(6);
    r.signs.push_back(square_signs ? Rect{a, a} : Rect{a, 3 + rng.below(6)});
  }
  return r;
}

inline std::vector<Scene> gen_scene_masks(const SynthSpec& spec, const CategorySchema& schema,
                                          const IndicatorConfig& cfg = IndicatorConfig{}) {
  Rng rng(spec.seed);
  std::vector<Scene> out;
  for (std::size_t i = 0; i < spec.scenes; ++i) {
    auto r = random_recipe(rng, spec.width, spec.height, spec.max_obstacles, spec.max_signs, spec.square_signs);
    r.point_id = fmt::format("scene{:04}", i);
    out.push_back(gen_scene(r, schema, cfg));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tabular samples with known causal structure

struct ConfoundedSpec {
  std::uint64_t seed = 0;
  std::size_t n = 5000;
  TreatmentKind kind = TreatmentKind::Continuous;
  double confounding = 1.0;  // a: Z = a U + e (continuous) or logit P(Z = 1) = a U (categorical)
  double gamma = 1.0;        // effect of U on the outcome logit
  double beta0 = -1.0;
  double beta1 = 0.0;        // conditional log odds ratio per treatment SD (or for level 1)
  std::size_t noise_covariates = 2;
};

struct ConfoundedSample {
  CausalData data;  // columns: z, u, x1..xk ; outcome 1 = event
  double true_odds_ratio = 1.0;
};

inline ConfoundedSample gen_confounded_sample(const ConfoundedSpec& spec) {
  if (spec.n < 100) fail("confounded sample needs n >= 100, got {}", spec.n);
  Rng rng(spec.seed);
  ConfoundedSample s;
  auto& d = s.data;
  const std::size_t cols = 2 + spec.noise_covariates;
  d.features = Matrix(spec.n, cols);
  d.names = {"z", "u"};
  for (std::size_t j = 0; j < spec.noise_covariates; ++j) d.names.push_back(fmt::format("x{}", j + 1));
  d.kinds.assign(cols, TreatmentKind::Continuous);
  d.kinds[0] = spec.kind;
  d.level_names.assign(cols, {});
  d.outcome_names = {"no_event", "event"};
  const double z_sd = std::sqrt(spec.confounding * spec.confounding + 1.0);
  std::size_t events = 0;
  for (std::size_t i = 0; i < spec.n; ++i) {
    const double u = rng.normal();
    double z = 0.0, z_term = 0.0;
    if (spec.kind == TreatmentKind::Continuous) {
      z = spec.confounding * u + rng.normal();
      z_term = z / z_sd;
    } else {
      z = rng.bernoulli(sigmoid(spec.confounding * u)) ? 1.0 : 0.0;
      z_term = z;
    }
    d.features(i, 0) = z;
    d.features(i, 1) = u;
    for (std::size_t j = 0; j < spec.noise_covariates; ++j) d.features(i, 2 + j) = rng.normal();
    const int y = rng.bernoulli(sigmoid(spec.beta0 + spec.beta1 * z_term + spec.gamma * u)) ? 1 : 0;
    events += static_cast<std::size_t>(y);
    d.outcome.push_back(y);
  }
  if (events < 5 || spec.n - events < 5)
    fail("degenerate synthetic outcome: {} events in {} rows", events, spec.n);
  s.true_odds_ratio = std::exp(spec.beta1);
  return s;
}

struct LogisticSample {
  std::vector<int> y;
  std::vector<double> z;
};

inline LogisticSample gen_logistic_sample(double beta0, double beta1, std::size_t n, std::uint64_t seed) {
  if (n < 10) fail("logistic sample needs n >= 10");
  Rng rng(seed);
  LogisticSample s;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = rng.normal();
    s.z.push_back(z);
    s.y.push_back(rng.bernoulli(sigmoid(beta0 + beta1 * z)) ? 1 : 0);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Synthetic city: a drop-in data set for the full pipeline.

struct CitySpec {
  std::uint64_t seed = 7;
  std::size_t points = 500;
  std::size_t views = 4;
  std::size_t mask_size = 96;
  double missing_fraction = 0.01;  // points without imagery
};

struct City {
  std::vector<Scene> scenes;
  std::vector<AccidentRecord> accidents;
  std::map<std::string, RoadCategory> roads;
};

inline City gen_city(const CitySpec& spec, const CategorySchema& schema) {
  if (spec.views < 1 || spec.views > 4) fail("views must be 1..4");
  Rng rng(spec.seed);
  City city;
  const auto mapping = AccidentMapping::default_mapping().to_json();
  std::array<std::vector<std::string>, kAccidentClassCount> raw_by_class;
  for (const auto& [raw, cls] : mapping.items())
    raw_by_class[static_cast<std::size_t>(parse_accident_class(cls.get<std::string>()))].push_back(raw);

  for (std::size_t p = 0; p < spec.points; ++p) {
    const auto pid = fmt::format("P{:05}", p);
    const double urban = rng.normal(), open = rng.normal();
    // Road hierarchy follows urbanity.
    const double road_u = urban + 0.8 * rng.normal();
    const RoadCategory road = road_u < -0.9   ? RoadCategory::Path
                              : road_u < -0.2 ? RoadCategory::Linkroad
                              : road_u < 0.6  ? RoadCategory::Specialroad
                                              : RoadCategory::PrincipalTag;
    city.roads[pid] = road;

    const bool has_images = rng.uniform() >= spec.missing_fraction;
    std::array<double, IndicatorVector::kSize> acc{};
    std::size_t views = 0;
    for (std::size_t v = 0; has_images && v < spec.views; ++v) {
      SceneRecipe r;
      r.width = r.height = spec.mask_size;
      auto jitter = [&](double base) { return std::max(0.01, base * std::exp(0.25 * rng.normal())); };
      const double sky = jitter(0.22 + 0.06 * open - 0.05 * urban);
      const double building = jitter(0.14 + 0.07 * urban);
      const double veg = jitter(0.12 - 0.04 * urban + 0.03 * open);
      const double terrain = jitter(0.05 + 0.02 * open);
      const double car = jitter(0.04 + 0.02 * urban);
      const double sidewalk = jitter(0.07 + 0.02 * urban);
      const double road_px = jitter(0.30 + 0.04 * (static_cast<double>(road_code(road)) - 1.5));
      const double sum = sky + building + veg + terrain + car + sidewalk + road_px;
      const double cover = 0.93 + 0.06 * rng.uniform();
      for (auto [cls, val] : {std::pair{10, sky}, {2, building}, {8, veg}, {9, terrain}, {13, car}, {1, sidewalk},
                              {0, road_px}})
        r.bands.push_back({cls, val / sum * cover});
      r.obstacles = std::min<std::size_t>(12, static_cast<std::size_t>(std::max(0.0, 3.0 + 1.5 * urban + rng.normal())));
      const auto n_signs = rng.below(4);
      for (std::size_t s = 0; s < n_signs; ++s) r.signs.push_back({3 + rng.below(5), 3 + rng.below(5)});
      r.heading = static_cast<int>(v) * 90;
      r.point_id = pid;
      city.scenes.push_back(gen_scene(r, schema));
      const auto e = city.scenes.back().expected.values();
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += e[i];
      ++views;
    }

    // Accident type: multinomial logit in the scene and the road category.
    std::array<double, kAccidentClassCount> logit{};
    if (views) {
      for (auto& a : acc) a /= static_cast<double>(views);
      const auto iv = IndicatorVector::from_values(acc);
      // Effects per standard deviation of each indicator across the city.
      auto z = [](double v, double mu, double sd) { return (v - mu) / sd; };
      logit[0] = 0.8 * z(iv.bc, 0.79, 0.038) + 0.6 * z(iv.vd, 0.040, 0.019);
      logit[1] = -0.8 * z(iv.dar, 0.31, 0.057) + 0.5 * (road == RoadCategory::PrincipalTag);
      logit[2] = 0.7 * z(iv.vod, 4.3, 1.7) - 0.6 * z(iv.es, 0.12, 0.019);
      logit[3] = 0.9 * z(iv.vo, 0.27, 0.09) + 0.4 * (road == RoadCategory::Linkroad);
      logit[4] = 0.7 * z(iv.sor, 0.23, 0.089) + 0.5 * z(iv.tsi, 0.57, 0.16);
    }
    for (auto& l : logit) l += 0.3 * rng.normal();
    const auto prob = softmax_probabilities(std::span<const double>(logit.data(), logit.size()));
    double u = rng.uniform(), c = 0.0;
    std::size_t cls = 0;
    for (; cls + 1 < prob.size(); ++cls) {
      c += prob[cls];
      if (u < c) break;
    }
    const auto& raws = raw_by_class[cls];
    AccidentRecord rec;
    rec.point_id = pid;
    rec.raw_type = raws[rng.below(raws.size())];
    rec.accident_class = static_cast<AccidentClass>(cls);
    const auto minutes = rng.below(366 * 24 * 60);
    rec.timestamp = fmt::format("2024-{:02}-{:02}T{:02}:{:02}:00", 2 + (minutes / (28 * 24 * 60)) % 11,
                                1 + (minutes / (24 * 60)) % 28, (minutes / 60) % 24, minutes % 60);
    rec.lon = -97.80 + 0.2 * rng.uniform() + 0.01 * urban;
    rec.lat = 30.20 + 0.2 * rng.uniform();
    city.accidents.push_back(std::move(rec));
  }
  return city;
}

// Writes masks/<point>_<heading>.png, accidents.csv, roads.csv, mapping.json and schema.json.
inline void write_city(const City& city, const CategorySchema& schema, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "masks");
  for (const auto& s : city.scenes)
    save_mask_png(dir / "masks" / fmt::format("{}_{}.png", s.mask.point_id(), s.mask.heading()), s.mask);
  csv::write_atomic(dir / "accidents.csv", render_accidents_csv(city.accidents));
  std::vector<std::vector<std::string>> rows;
  for (const auto& [pid, road] : city.roads)
    rows.push_back({pid, std::string(kRoadCategoryNames[static_cast<std::size_t>(road)])});
  csv::write_atomic(dir / "roads.csv", csv::render({"point_id", "road_category"}, rows));
  csv::write_atomic(dir / "mapping.json", AccidentMapping::default_mapping().to_json().dump(2) + "\n");
  csv::write_atomic(dir / "schema.json", schema.to_json().dump(2) + "\n");
}

}  // namespace streetrisk::synth
