#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "streetrisk/common.hpp"
#include "streetrisk/csv.hpp"
#include "streetrisk/indicators.hpp"

namespace streetrisk {

// ---------------------------------------------------------------------------
// Accident and road categories

enum class AccidentClass { Collision = 0, Crash = 1, VehicleBreakdown = 2, TrafficHazard = 3, Debris = 4 };

inline constexpr std::size_t kAccidentClassCount = 5;
inline constexpr std::array<std::string_view, kAccidentClassCount> kAccidentClassNames = {
    "Collision", "Crash", "VehicleBreakdown", "TrafficHazard", "Debris"};

// Number of raw incident categories published by the source feed.
inline constexpr std::size_t kRawAccidentCategories = 18;

namespace detail {
inline std::string fold(std::string_view s) {
  std::string out;
  for (char c : s)
    if (std::isalnum(static_cast<unsigned char>(c))) out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}
}  // namespace detail

inline AccidentClass parse_accident_class(std::string_view name) {
  const auto key = detail::fold(name);
  for (std::size_t i = 0; i < kAccidentClassNames.size(); ++i)
    if (detail::fold(kAccidentClassNames[i]) == key) return static_cast<AccidentClass>(i);
  if (key == "debrisaccident" || key == "debrisaccidents") return AccidentClass::Debris;
  fail("unknown accident class '{}'", name);
}

inline std::string_view name_of(AccidentClass c) { return kAccidentClassNames[static_cast<std::size_t>(c)]; }

// Raw incident type -> one of the five accident classes. Keys are matched
// case-insensitively after trimming.
class AccidentMapping {
 public:
  AccidentMapping() = default;

  explicit AccidentMapping(std::map<std::string, AccidentClass> table, std::size_t required = kRawAccidentCategories)
      : table_(std::move(table)) {
    if (table_.size() < required)
      fail("accident mapping covers {} raw categories, expected {}", table_.size(), required);
  }

  static AccidentMapping from_json(const nlohmann::json& j, std::size_t required = kRawAccidentCategories) {
    std::map<std::string, AccidentClass> table;
    for (const auto& [raw, cls] : j.items()) table[normalise(raw)] = parse_accident_class(cls.get<std::string>());
    return AccidentMapping(std::move(table), required);
  }

  static AccidentMapping load(const std::filesystem::path& path, std::size_t required = kRawAccidentCategories) {
    std::ifstream in(path);
    if (!in) fail("cannot open '{}'", path.string());
    try {
      return from_json(nlohmann::json::parse(in), required);
    } catch (const nlohmann::json::exception& e) {
      fail("'{}': {}", path.string(), e.what());
    } catch (const Error& e) {
      fail("'{}': {}", path.string(), e.what());
    }
  }

  AccidentClass classify(std::string_view raw) const {
    auto it = table_.find(normalise(raw));
    if (it == table_.end()) fail("raw accident type '{}' is not in the mapping", raw);
    return it->second;
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [raw, cls] : table_) j[raw] = std::string(name_of(cls));
    return j;
  }

  std::size_t size() const { return table_.size(); }

  // Default guess at the expert table; ship it as an editable JSON file.
  static AccidentMapping default_mapping() {
    using A = AccidentClass;
    return AccidentMapping({
        {"COLLISION", A::Collision},
        {"COLLISION WITH INJURY", A::Collision},
        {"COLLISION/PRIVATE PROPERTY", A::Collision},
        {"COLLISN/ LVNG SCN", A::Collision},
        {"AUTO/ PED", A::Collision},
        {"CRASH URGENT", A::Crash},
        {"CRASH SERVICE", A::Crash},
        {"TRAFFIC FATALITY", A::Crash},
        {"FLEET ACC/ INJURY", A::Crash},
        {"STALLED VEHICLE", A::VehicleBreakdown},
        {"ZSTALLED VEHICLE", A::VehicleBreakdown},
        {"VEHICLE FIRE", A::VehicleBreakdown},
        {"TRAFFIC HAZARD", A::TrafficHazard},
        {"BLOCKED DRIV/ HWY", A::TrafficHazard},
        {"ICY ROADWAY", A::TrafficHazard},
        {"HIGH WATER", A::TrafficHazard},
        {"TRFC HAZD/ DEBRIS", A::Debris},
        {"LOOSE LIVESTOCK", A::Debris},
    });
  }

 private:
  static std::string normalise(std::string_view raw) {
    std::string s = csv::trim(raw);
    for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return s;
  }

  std::map<std::string, AccidentClass> table_;
};

inline AccidentClass reclassify_accident(std::string_view raw_type, const AccidentMapping& mapping) {
  return mapping.classify(raw_type);
}

enum class RoadCategory { Path = 0, Linkroad = 1, Specialroad = 2, PrincipalTag = 3 };

inline constexpr std::array<std::string_view, 4> kRoadCategoryNames = {"Path", "Linkroad", "Specialroad",
                                                                       "PrincipalTag"};

inline int road_code(RoadCategory c) { return static_cast<int>(c); }

inline RoadCategory road_from_code(int code) {
  if (code < 0 || code > 3) fail("road code {} outside 0..3", code);
  return static_cast<RoadCategory>(code);
}

// Accepts a category name ("Path", "Principal tag", ...) or an OSM highway
// type ("motorway_link", "residential", ...).
inline RoadCategory parse_road_category(std::string_view s) {
  const auto key = detail::fold(s);
  for (std::size_t i = 0; i < kRoadCategoryNames.size(); ++i)
    if (detail::fold(kRoadCategoryNames[i]) == key) return static_cast<RoadCategory>(i);
  static const std::map<std::string, RoadCategory> osm = {
      {"footway", RoadCategory::Path},         {"path", RoadCategory::Path},
      {"cycleway", RoadCategory::Path},        {"pedestrian", RoadCategory::Path},
      {"motorwaylink", RoadCategory::Linkroad}, {"trunklink", RoadCategory::Linkroad},
      {"primarylink", RoadCategory::Linkroad}, {"service", RoadCategory::Specialroad},
      {"track", RoadCategory::Specialroad},    {"unclassified", RoadCategory::Specialroad},
      {"residential", RoadCategory::Specialroad}, {"motorway", RoadCategory::PrincipalTag},
      {"trunk", RoadCategory::PrincipalTag},   {"primary", RoadCategory::PrincipalTag},
      {"secondary", RoadCategory::PrincipalTag}, {"tertiary", RoadCategory::PrincipalTag},
  };
  if (auto it = osm.find(key); it != osm.end()) return it->second;
  fail("unknown road type '{}'", s);
}

// ---------------------------------------------------------------------------
// Records

struct AccidentRecord {
  std::string point_id;
  std::string timestamp;
  std::string raw_type;
  AccidentClass accident_class = AccidentClass::Collision;
  double lon = 0.0;
  double lat = 0.0;
};

// Columns: point_id, timestamp, raw_type, lon, lat.
inline std::vector<AccidentRecord> read_accidents_csv(const std::filesystem::path& path,
                                                      const AccidentMapping& mapping) {
  const auto t = csv::read(path);
  const auto c_id = t.column("point_id"), c_ts = t.column("timestamp"), c_raw = t.column("raw_type"),
             c_lon = t.column("lon"), c_lat = t.column("lat");
  std::vector<AccidentRecord> out;
  out.reserve(t.rows.size());
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& r = t.rows[i];
    AccidentRecord rec{r[c_id], r[c_ts], r[c_raw], AccidentClass::Collision, csv::to_double(r[c_lon]),
                       csv::to_double(r[c_lat])};
    if (!std::isfinite(rec.lon) || !std::isfinite(rec.lat))
      fail("'{}' row {}: non-finite coordinates", path.string(), i + 1);
    try {
      rec.accident_class = mapping.classify(rec.raw_type);
    } catch (const Error& e) {
      fail("'{}' row {}: {}", path.string(), i + 1, e.what());
    }
    out.push_back(std::move(rec));
  }
  return out;
}

inline std::string render_accidents_csv(const std::vector<AccidentRecord>& records) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& r : records) rows.push_back({r.point_id, r.timestamp, r.raw_type, num(r.lon), num(r.lat)});
  return csv::render({"point_id", "timestamp", "raw_type", "lon", "lat"}, rows);
}

// Columns: point_id, road_category.
inline std::map<std::string, RoadCategory> read_road_csv(const std::filesystem::path& path) {
  const auto t = csv::read(path);
  const auto c_id = t.column("point_id"), c_cat = t.column("road_category");
  std::map<std::string, RoadCategory> out;
  for (const auto& r : t.rows) out[r[c_id]] = parse_road_category(r[c_cat]);
  return out;
}

struct PointIndicators {
  IndicatorVector values;
  std::size_t n_views = 0;
};

inline const std::vector<std::string>& indicator_csv_header() {
  static const std::vector<std::string> h = [] {
    std::vector<std::string> v{"point_id"};
    for (auto n : IndicatorVector::kNames) v.emplace_back(n);
    v.emplace_back("n_views");
    return v;
  }();
  return h;
}

inline std::string render_indicator_csv(const std::map<std::string, PointIndicators>& points) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& [id, p] : points) {
    std::vector<std::string> r{id};
    for (double v : p.values.values()) r.push_back(num(v));
    r.push_back(std::to_string(p.n_views));
    rows.push_back(std::move(r));
  }
  return csv::render(indicator_csv_header(), rows);
}

inline std::map<std::string, PointIndicators> read_indicator_csv(const std::filesystem::path& path) {
  const auto t = csv::read(path);
  std::map<std::string, PointIndicators> out;
  std::array<std::size_t, IndicatorVector::kSize> cols{};
  for (std::size_t i = 0; i < cols.size(); ++i) cols[i] = t.column(IndicatorVector::kNames[i]);
  const auto c_id = t.column("point_id"), c_n = t.column("n_views");
  for (const auto& r : t.rows) {
    std::array<double, IndicatorVector::kSize> v{};
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = csv::to_double(r[cols[i]]);
    out[r[c_id]] = {IndicatorVector::from_values(v), static_cast<std::size_t>(std::stoul(r[c_n]))};
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature table: 11 indicators + road code, one row per accident record.

inline constexpr std::size_t kFeatureCount = 12;
inline constexpr std::size_t kRoadColumn = 11;
inline constexpr std::array<std::string_view, kFeatureCount> kFeatureNames = {
    "bc", "sor", "bor", "vod", "vo", "dar", "es", "sr", "vc", "tsi", "vd", "road_code"};

inline std::size_t feature_index(std::string_view name) {
  for (std::size_t i = 0; i < kFeatureNames.size(); ++i)
    if (kFeatureNames[i] == name) return i;
  fail("unknown feature '{}'", name);
}

struct FeatureTable {
  std::vector<std::string> point_ids;
  Matrix features;          // NaN marks a missing cell
  std::vector<int> labels;  // AccidentClass codes
  std::vector<std::size_t> n_views;

  std::size_t size() const { return labels.size(); }

  FeatureTable select(std::span<const std::size_t> idx) const {
    FeatureTable out;
    out.features = features.select_rows(idx);
    if (out.features.cols() == 0) out.features = Matrix(idx.size(), features.cols());
    for (auto i : idx) {
      out.point_ids.push_back(point_ids[i]);
      out.labels.push_back(labels[i]);
      out.n_views.push_back(n_views.empty() ? 0 : n_views[i]);
    }
    return out;
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> c(kAccidentClassCount, 0);
    for (int l : labels) ++c.at(static_cast<std::size_t>(l));
    return c;
  }

  bool has_missing() const {
    return std::any_of(features.data().begin(), features.data().end(), [](double v) { return is_missing(v); });
  }
};

// Left join of accident records with point indicators and road categories.
inline FeatureTable join_features(const std::vector<AccidentRecord>& records,
                                  const std::map<std::string, PointIndicators>& indicators,
                                  const std::map<std::string, RoadCategory>& roads) {
  FeatureTable t;
  t.features = Matrix(0, kFeatureCount);
  std::array<double, kFeatureCount> row{};
  for (const auto& r : records) {
    row.fill(kMissing);
    std::size_t views = 0;
    if (auto it = indicators.find(r.point_id); it != indicators.end()) {
      const auto v = it->second.values.values();
      std::copy(v.begin(), v.end(), row.begin());
      views = it->second.n_views;
    }
    if (auto it = roads.find(r.point_id); it != roads.end()) row[kRoadColumn] = road_code(it->second);
    t.point_ids.push_back(r.point_id);
    t.features.push_row(row);
    t.labels.push_back(static_cast<int>(r.accident_class));
    t.n_views.push_back(views);
  }
  return t;
}

inline std::string render_feature_csv(const FeatureTable& t) {
  std::vector<std::string> header{"point_id"};
  for (std::size_t i = 0; i < kRoadColumn; ++i) header.emplace_back(kFeatureNames[i]);
  header.insert(header.end(), {"n_views", "road_code", "accident_class"});
  std::vector<std::vector<std::string>> rows;
  for (std::size_t r = 0; r < t.size(); ++r) {
    std::vector<std::string> row{t.point_ids[r]};
    for (std::size_t c = 0; c < kRoadColumn; ++c) row.push_back(num(t.features(r, c)));
    row.push_back(std::to_string(t.n_views.empty() ? 0 : t.n_views[r]));
    row.push_back(num(t.features(r, kRoadColumn)));
    row.emplace_back(kAccidentClassNames.at(static_cast<std::size_t>(t.labels[r])));
    rows.push_back(std::move(row));
  }
  return csv::render(header, rows);
}

inline FeatureTable read_feature_csv(const std::filesystem::path& path) {
  const auto t = csv::read(path);
  FeatureTable out;
  out.features = Matrix(0, kFeatureCount);
  std::array<std::size_t, kFeatureCount> cols{};
  for (std::size_t i = 0; i < kFeatureCount; ++i) cols[i] = t.column(kFeatureNames[i]);
  const auto c_id = t.column("point_id"), c_cls = t.column("accident_class");
  const auto c_views = std::find(t.header.begin(), t.header.end(), "n_views");
  std::array<double, kFeatureCount> row{};
  for (const auto& r : t.rows) {
    for (std::size_t i = 0; i < kFeatureCount; ++i) row[i] = csv::to_double(r[cols[i]]);
    out.features.push_row(row);
    out.point_ids.push_back(r[c_id]);
    out.labels.push_back(static_cast<int>(parse_accident_class(r[c_cls])));
    out.n_views.push_back(c_views == t.header.end()
                              ? 0
                              : static_cast<std::size_t>(std::stoul(r[static_cast<std::size_t>(c_views - t.header.begin())])));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Imputation

// Fill values learned on training data: column means for the indicators and
// the most frequent code for the categorical road column.
struct Imputer {
  std::vector<double> fill;

  static Imputer fit(const FeatureTable& t) {
    Imputer imp;
    const auto& m = t.features;
    imp.fill.assign(m.cols(), 0.0);
    for (std::size_t c = 0; c < m.cols(); ++c) {
      double s = 0.0;
      std::size_t n = 0;
      std::map<double, std::size_t> freq;
      for (std::size_t r = 0; r < m.rows(); ++r) {
        const double v = m(r, c);
        if (is_missing(v)) continue;
        s += v;
        ++n;
        ++freq[v];
      }
      if (n == 0) fail("column '{}' has no observed values to impute from", c < kFeatureNames.size() ? kFeatureNames[c] : "?");
      if (c == kRoadColumn) {
        imp.fill[c] = std::max_element(freq.begin(), freq.end(), [](auto& a, auto& b) { return a.second < b.second; })->first;
      } else {
        imp.fill[c] = s / static_cast<double>(n);
      }
    }
    return imp;
  }

  FeatureTable apply(FeatureTable t) const {
    if (t.features.cols() != fill.size()) fail("imputer has {} columns, table has {}", fill.size(), t.features.cols());
    for (std::size_t r = 0; r < t.features.rows(); ++r)
      for (std::size_t c = 0; c < fill.size(); ++c)
        if (is_missing(t.features(r, c))) t.features(r, c) = fill[c];
    return t;
  }
};

inline std::pair<FeatureTable, Imputer> impute_column_means(const FeatureTable& t) {
  auto imp = Imputer::fit(t);
  return {imp.apply(t), imp};
}

// ---------------------------------------------------------------------------
// Stratified split

struct Split {
  FeatureTable train;
  FeatureTable test;
  std::vector<std::size_t> train_index;
  std::vector<std::size_t> test_index;
};

inline Split stratified_split(const FeatureTable& t, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) fail("test_fraction must lie in (0, 1), got {}", test_fraction);
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < t.size(); ++i) by_class[t.labels[i]].push_back(i);
  Rng rng(seed);
  std::vector<bool> in_test(t.size(), false);
  for (auto& [cls, rows] : by_class) {
    if (rows.size() < 2)
      fail("class {} has {} row(s); stratified split needs at least 2", kAccidentClassNames.at(static_cast<std::size_t>(cls)),
           rows.size());
    auto n_test = static_cast<std::size_t>(std::llround(static_cast<double>(rows.size()) * test_fraction));
    n_test = std::min(n_test, rows.size() - 1);
    rng.shuffle(rows);
    for (std::size_t i = 0; i < n_test; ++i) in_test[rows[i]] = true;
  }
  Split s;
  for (std::size_t i = 0; i < t.size(); ++i) (in_test[i] ? s.test_index : s.train_index).push_back(i);
  s.train = t.select(s.train_index);
  s.test = t.select(s.test_index);
  return s;
}

// ---------------------------------------------------------------------------
// Standardisation

struct Standardizer {
  std::vector<double> mean;
  std::vector<double> scale;  // 1 for excluded columns
  std::vector<bool> applied;

  double transform(std::size_t col, double v) const { return applied[col] ? (v - mean[col]) / scale[col] : v; }

  Matrix apply(Matrix m) const {
    for (std::size_t r = 0; r < m.rows(); ++r)
      for (std::size_t c = 0; c < m.cols(); ++c) m(r, c) = transform(c, m(r, c));
    return m;
  }
};

// Zero mean, unit (population) variance per column, skipping `excluded`.
inline Standardizer fit_standardizer(const Matrix& m, std::span<const std::size_t> excluded,
                                     std::span<const std::string_view> names = {}) {
  Standardizer s;
  s.mean.assign(m.cols(), 0.0);
  s.scale.assign(m.cols(), 1.0);
  s.applied.assign(m.cols(), true);
  for (auto c : excluded) s.applied.at(c) = false;
  for (std::size_t c = 0; c < m.cols(); ++c) {
    if (!s.applied[c]) continue;
    const auto col = m.column(c);
    s.mean[c] = mean(col);
    s.scale[c] = stddev(col);
    if (!(s.scale[c] > 0.0))
      fail("column '{}' has zero variance and cannot be standardised",
           c < names.size() ? std::string(names[c]) : std::to_string(c));
  }
  return s;
}

inline std::pair<FeatureTable, Standardizer> standardize_features(FeatureTable t) {
  if (t.has_missing()) fail("standardize_features needs a complete table; impute first");
  const std::array<std::size_t, 1> excluded{kRoadColumn};
  auto s = fit_standardizer(t.features, excluded, kFeatureNames);
  t.features = s.apply(std::move(t.features));
  return {std::move(t), s};
}

// ---------------------------------------------------------------------------
// Class balancing: SMOTE for minority classes, random undersampling for the rest.

struct SyntheticOrigin {
  std::size_t row;       // index in the balanced output
  std::size_t parent_a;  // indices into the input table
  std::size_t parent_b;
  double lambda;         // row = a + lambda * (b - a)
};

struct BalanceResult {
  FeatureTable table;
  std::vector<SyntheticOrigin> synthetic;
  std::size_t target = 0;
};

struct BalanceOptions {
  std::size_t k_neighbors = 5;
  std::optional<std::size_t> target;  // default: median of present class sizes
};

inline BalanceResult balance_classes(const FeatureTable& train, std::uint64_t seed, const BalanceOptions& opt = {}) {
  if (train.has_missing()) fail("balance_classes needs a complete table; impute first");
  if (opt.k_neighbors < 1) fail("k_neighbors must be >= 1");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < train.size(); ++i) by_class[train.labels[i]].push_back(i);
  if (by_class.empty()) fail("balance_classes on an empty table");
  for (const auto& [cls, rows] : by_class)
    if (rows.size() < 2)
      fail("class {} has a single row; SMOTE needs at least 2", kAccidentClassNames.at(static_cast<std::size_t>(cls)));

  std::size_t target = 0;
  if (opt.target) {
    target = *opt.target;
  } else {
    std::vector<std::size_t> sizes;
    for (const auto& [cls, rows] : by_class) sizes.push_back(rows.size());
    std::sort(sizes.begin(), sizes.end());
    const auto n = sizes.size();
    target = n % 2 ? sizes[n / 2] : (sizes[n / 2 - 1] + sizes[n / 2]) / 2;
  }
  if (target < 1) fail("balance target must be >= 1");

  // Neighbour search runs on standardised indicator columns; the road code is categorical.
  const std::size_t n_cont = std::min(train.features.cols(), kRoadColumn);
  std::vector<std::size_t> cont(n_cont);
  std::iota(cont.begin(), cont.end(), 0);
  std::vector<double> mu(n_cont), sd(n_cont);
  for (std::size_t c = 0; c < n_cont; ++c) {
    const auto col = train.features.column(c);
    mu[c] = mean(col);
    sd[c] = stddev(col);
    if (!(sd[c] > 0)) sd[c] = 1.0;
  }
  auto dist2 = [&](std::size_t a, std::size_t b) {
    double d = 0.0;
    for (std::size_t c = 0; c < n_cont; ++c) {
      const double diff = (train.features(a, c) - train.features(b, c)) / sd[c];
      d += diff * diff;
    }
    return d;
  };

  Rng rng(seed);
  BalanceResult res;
  res.target = target;
  res.table.features = Matrix(0, train.features.cols());
  auto emit = [&](std::size_t src) {
    res.table.features.push_row(train.features.row(src));
    res.table.point_ids.push_back(train.point_ids[src]);
    res.table.labels.push_back(train.labels[src]);
    res.table.n_views.push_back(train.n_views.empty() ? 0 : train.n_views[src]);
  };

  for (auto& [cls, rows] : by_class) {
    if (rows.size() >= target) {
      auto pick = rows;
      rng.shuffle(pick);
      pick.resize(target);
      std::sort(pick.begin(), pick.end());
      for (auto i : pick) emit(i);
      continue;
    }
    for (auto i : rows) emit(i);
    const std::size_t k = std::min(opt.k_neighbors, rows.size() - 1);
    std::vector<std::vector<std::size_t>> knn(rows.size());
    for (std::size_t a = 0; a < rows.size(); ++a) {
      std::vector<std::pair<double, std::size_t>> cand;
      for (std::size_t b = 0; b < rows.size(); ++b)
        if (a != b) cand.push_back({dist2(rows[a], rows[b]), b});
      std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end());
      for (std::size_t j = 0; j < k; ++j) knn[a].push_back(cand[j].second);
    }
    std::vector<double> synth(train.features.cols());
    for (std::size_t s = 0; s < target - rows.size(); ++s) {
      const std::size_t a = rng.below(rows.size());
      const std::size_t b = knn[a][rng.below(k)];
      const double lambda = rng.uniform();
      const auto pa = train.features.row(rows[a]);
      const auto pb = train.features.row(rows[b]);
      for (std::size_t c = 0; c < synth.size(); ++c) synth[c] = pa[c] + lambda * (pb[c] - pa[c]);
      if (kRoadColumn < synth.size()) synth[kRoadColumn] = lambda < 0.5 ? pa[kRoadColumn] : pb[kRoadColumn];
      res.synthetic.push_back({res.table.size(), rows[a], rows[b], lambda});
      res.table.features.push_row(synth);
      res.table.point_ids.push_back(fmt::format("{}~smote{}", train.point_ids[rows[a]], s));
      res.table.labels.push_back(cls);
      res.table.n_views.push_back(0);
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Fishnet aggregation

struct FishnetCell {
  std::array<std::size_t, kAccidentClassCount> counts{};
  std::size_t total = 0;
  std::size_t with_indicators = 0;
  std::array<double, IndicatorVector::kSize> indicator_mean{};
};

struct FishnetGrid {
  double origin_lon = 0.0;
  double origin_lat = 0.0;
  double cell_size = 0.0;
  std::map<std::pair<long long, long long>, FishnetCell> cells;  // (row = lat index, col = lon index)

  std::pair<long long, long long> cell_of(double lon, double lat) const {
    return {static_cast<long long>(std::floor((lat - origin_lat) / cell_size)),
            static_cast<long long>(std::floor((lon - origin_lon) / cell_size))};
  }
};

// Half-open equal-angle cells [origin + i*size, origin + (i+1)*size). The
// origin defaults to the minimum record coordinates.
inline FishnetGrid fishnet_aggregate(const std::vector<AccidentRecord>& records,
                                     const std::map<std::string, PointIndicators>& indicators, double cell_size,
                                     std::optional<std::pair<double, double>> origin = std::nullopt) {
  if (!(cell_size > 0.0)) fail("fishnet cell size must be positive, got {}", cell_size);
  FishnetGrid g;
  g.cell_size = cell_size;
  if (origin) {
    g.origin_lon = origin->first;
    g.origin_lat = origin->second;
  } else if (!records.empty()) {
    g.origin_lon = records.front().lon;
    g.origin_lat = records.front().lat;
    for (const auto& r : records) {
      g.origin_lon = std::min(g.origin_lon, r.lon);
      g.origin_lat = std::min(g.origin_lat, r.lat);
    }
  }
  for (const auto& r : records) {
    auto& cell = g.cells[g.cell_of(r.lon, r.lat)];
    ++cell.counts[static_cast<std::size_t>(r.accident_class)];
    ++cell.total;
    if (auto it = indicators.find(r.point_id); it != indicators.end()) {
      const auto v = it->second.values.values();
      ++cell.with_indicators;
      for (std::size_t i = 0; i < v.size(); ++i) cell.indicator_mean[i] += v[i];
    }
  }
  for (auto& [key, cell] : g.cells)
    if (cell.with_indicators)
      for (auto& m : cell.indicator_mean) m /= static_cast<double>(cell.with_indicators);
  return g;
}

inline std::string render_fishnet_csv(const FishnetGrid& g) {
  std::vector<std::string> header{"row", "col", "lon_min", "lat_min", "total"};
  for (auto n : kAccidentClassNames) header.emplace_back(n);
  for (auto n : IndicatorVector::kNames) header.push_back(std::string("mean_") + std::string(n));
  std::vector<std::vector<std::string>> rows;
  for (const auto& [key, cell] : g.cells) {
    std::vector<std::string> r{std::to_string(key.first), std::to_string(key.second),
                               num(g.origin_lon + static_cast<double>(key.second) * g.cell_size),
                               num(g.origin_lat + static_cast<double>(key.first) * g.cell_size),
                               std::to_string(cell.total)};
    for (auto c : cell.counts) r.push_back(std::to_string(c));
    for (auto m : cell.indicator_mean) r.push_back(cell.with_indicators ? num(m) : std::string());
    rows.push_back(std::move(r));
  }
  return csv::render(header, rows);
}

}  // namespace streetrisk
