#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "helpers.hpp"
#include "streetrisk/dataset.hpp"

using namespace streetrisk;

namespace {

// 12-column table; `fill` goes everywhere except column c which takes `col`.
FeatureTable table_with_column(std::size_t c, const std::vector<double>& col, std::vector<int> labels = {}) {
  FeatureTable t;
  t.features = Matrix(col.size(), kFeatureCount, 0.5);
  for (std::size_t r = 0; r < col.size(); ++r) {
    t.features(r, kRoadColumn) = 1.0;
    t.features(r, c) = col[r];
    t.point_ids.push_back(fmt::format("p{}", r));
  }
  t.labels = labels.empty() ? std::vector<int>(col.size(), 0) : std::move(labels);
  t.n_views.assign(col.size(), 4);
  return t;
}

FeatureTable random_table(const std::vector<std::size_t>& per_class, std::uint64_t seed) {
  Rng rng(seed);
  FeatureTable t;
  t.features = Matrix(0, kFeatureCount);
  std::vector<double> row(kFeatureCount);
  for (std::size_t k = 0; k < per_class.size(); ++k)
    for (std::size_t i = 0; i < per_class[k]; ++i) {
      for (std::size_t c = 0; c < kRoadColumn; ++c) row[c] = rng.normal() + static_cast<double>(k);
      row[kRoadColumn] = static_cast<double>(rng.below(4));
      t.features.push_row(row);
      t.labels.push_back(static_cast<int>(k));
      t.point_ids.push_back(fmt::format("k{}_{}", k, i));
      t.n_views.push_back(4);
    }
  return t;
}

std::vector<std::size_t> tally(const std::vector<int>& labels, std::size_t k) {
  std::vector<std::size_t> c(k, 0);
  for (int l : labels) ++c[static_cast<std::size_t>(l)];
  return c;
}

}  // namespace

TEST(AccidentMapping, DefaultCoversAllRawTypes) {
  const auto m = AccidentMapping::default_mapping();
  EXPECT_EQ(m.size(), kRawAccidentCategories);
  EXPECT_EQ(reclassify_accident("COLLISION", m), AccidentClass::Collision);
  EXPECT_EQ(reclassify_accident("  collision ", m), AccidentClass::Collision);
  EXPECT_EQ(reclassify_accident("TRFC HAZD/ DEBRIS", m), AccidentClass::Debris);
}

TEST(AccidentMapping, UnmappedTypeIsAnError) {
  const auto m = AccidentMapping::default_mapping();
  try {
    reclassify_accident("ALIEN LANDING", m);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("ALIEN LANDING"), std::string::npos);
  }
}

TEST(AccidentMapping, IncompleteFileRejectedAtLoad) {
  testing_util::TempDir dir;
  auto j = AccidentMapping::default_mapping().to_json();
  j.erase("COLLISION");
  testing_util::spit(dir / "m.json", j.dump());
  EXPECT_EQ(j.size(), 17u);
  EXPECT_THROW(AccidentMapping::load(dir / "m.json"), Error);
  j["COLLISION"] = "collision";
  testing_util::spit(dir / "m.json", j.dump());
  EXPECT_EQ(AccidentMapping::load(dir / "m.json").size(), 18u);
  j["COLLISION"] = "Meteor";
  testing_util::spit(dir / "m.json", j.dump());
  EXPECT_THROW(AccidentMapping::load(dir / "m.json"), Error);
}

TEST(RoadCategory, Parsing) {
  EXPECT_EQ(parse_road_category("Linkroad"), RoadCategory::Linkroad);
  EXPECT_EQ(parse_road_category("principaltag"), RoadCategory::PrincipalTag);
  EXPECT_THROW(parse_road_category("runway"), Error);
}

TEST(AccidentCsv, RoundTripAndRowErrors) {
  testing_util::TempDir dir;
  std::vector<AccidentRecord> recs = {{"P1", "2020-01-01 10:00", "COLLISION", AccidentClass::Collision, -97.7, 30.2},
                                      {"P2", "2020-01-02 11:30", "STALLED VEHICLE", AccidentClass::VehicleBreakdown,
                                       -97.8, 30.3}};
  testing_util::spit(dir / "a.csv", render_accidents_csv(recs));
  const auto back = read_accidents_csv(dir / "a.csv", AccidentMapping::default_mapping());
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].accident_class, AccidentClass::VehicleBreakdown);
  EXPECT_EQ(back[1].timestamp, "2020-01-02 11:30");
  EXPECT_EQ(back[0].lon, -97.7);
  testing_util::spit(dir / "b.csv", "point_id,timestamp,raw_type,lon,lat\nP1,t,WHAT,1,2\n");
  EXPECT_THROW(read_accidents_csv(dir / "b.csv", AccidentMapping::default_mapping()), Error);
}

TEST(JoinFeatures, MissingIndicatorsStayMissing) {
  std::vector<AccidentRecord> recs = {{"A", "", "COLLISION", AccidentClass::Crash, 0, 0},
                                      {"B", "", "COLLISION", AccidentClass::Debris, 0, 0}};
  std::map<std::string, PointIndicators> pts;
  pts["A"].values.bc = 0.4;
  pts["A"].n_views = 4;
  std::map<std::string, RoadCategory> roads = {{"B", RoadCategory::Path}};
  const auto t = join_features(recs, pts, roads);
  ASSERT_EQ(t.size(), 2u);
  EXPECT_EQ(t.features(0, 0), 0.4);
  EXPECT_TRUE(is_missing(t.features(0, kRoadColumn)));
  EXPECT_TRUE(is_missing(t.features(1, 0)));
  EXPECT_EQ(t.features(1, kRoadColumn), 0.0);
  EXPECT_EQ(t.labels[1], static_cast<int>(AccidentClass::Debris));
}

TEST(FeatureCsv, RoundTripIsExact) {
  testing_util::TempDir dir;
  auto t = random_table({3, 4}, 2);
  t.features(1, 2) = kMissing;
  testing_util::spit(dir / "f.csv", render_feature_csv(t));
  const auto back = read_feature_csv(dir / "f.csv");
  ASSERT_EQ(back.size(), t.size());
  for (std::size_t i = 0; i < t.features.data().size(); ++i) {
    const double a = t.features.data()[i], b = back.features.data()[i];
    if (is_missing(a))
      EXPECT_TRUE(is_missing(b));
    else
      EXPECT_EQ(a, b);
  }
  EXPECT_EQ(back.labels, t.labels);
  EXPECT_EQ(back.point_ids, t.point_ids);
}

TEST(IndicatorCsv, RoundTrip) {
  testing_util::TempDir dir;
  std::map<std::string, PointIndicators> pts;
  pts["X"] = {IndicatorVector{0.1, 0.2, 0.3, 4.5, 0.25, 0.33, 0.07, 0.05, 0.11, 0.6, 0.03}, 4};
  testing_util::spit(dir / "i.csv", render_indicator_csv(pts));
  const auto back = read_indicator_csv(dir / "i.csv");
  EXPECT_EQ(back.at("X").values, pts["X"].values);
  EXPECT_EQ(back.at("X").n_views, 4u);
}

TEST(Impute, ColumnMean) {
  auto [t, imp] = impute_column_means(table_with_column(0, {1, kMissing, 3}));
  EXPECT_EQ(t.features(1, 0), 2.0);
  EXPECT_EQ(imp.fill[0], 2.0);
}

TEST(Impute, NoMissingIsIdentity) {
  const auto t = random_table({5, 5}, 4);
  EXPECT_EQ(impute_column_means(t).first.features, t.features);
}

TEST(Impute, TestRowsUseTrainingMean) {
  const auto train = table_with_column(3, {1, 2, 3});
  const auto test = table_with_column(3, {kMissing, 100});
  const auto filled = Imputer::fit(train).apply(test);
  EXPECT_EQ(filled.features(0, 3), 2.0);
}

TEST(Impute, RoadColumnTakesMostFrequentCode) {
  auto t = table_with_column(kRoadColumn, {2, 2, 0, kMissing});
  EXPECT_EQ(impute_column_means(t).first.features(3, kRoadColumn), 2.0);
}

TEST(Impute, FullyMissingColumnFails) {
  EXPECT_THROW(impute_column_means(table_with_column(4, {kMissing, kMissing})), Error);
}

TEST(StratifiedSplit, PerClassCounts) {
  const auto t = random_table({20, 20, 20, 20, 20}, 1);
  const auto s = stratified_split(t, 0.2, 99);
  EXPECT_EQ(tally(s.test.labels, 5), (std::vector<std::size_t>(5, 4)));
  EXPECT_EQ(tally(s.train.labels, 5), (std::vector<std::size_t>(5, 16)));
  const auto ten = random_table({10, 10, 10}, 1);
  const auto h = stratified_split(ten, 0.5, 3);
  EXPECT_EQ(tally(h.test.labels, 3), (std::vector<std::size_t>(3, 5)));
  EXPECT_EQ(tally(h.train.labels, 3), (std::vector<std::size_t>(3, 5)));
}

TEST(StratifiedSplit, DeterministicAndDisjoint) {
  const auto t = random_table({30, 12, 7}, 8);
  const auto a = stratified_split(t, 0.25, 5), b = stratified_split(t, 0.25, 5);
  EXPECT_EQ(a.test_index, b.test_index);
  std::vector<std::size_t> all = a.train_index;
  all.insert(all.end(), a.test_index.begin(), a.test_index.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < all.size(); ++i) ASSERT_EQ(all[i], i);
  EXPECT_NE(stratified_split(t, 0.25, 6).test_index, a.test_index);
}

TEST(StratifiedSplit, SingletonClassFails) {
  EXPECT_THROW(stratified_split(random_table({10, 1}, 1), 0.2, 1), Error);
  EXPECT_THROW(stratified_split(random_table({10, 10}, 1), 1.0, 1), Error);
}

TEST(BalanceClasses, TwoPointClassInterpolates) {
  FeatureTable t;
  t.features = Matrix(0, 2);
  const double a[] = {0, 0}, b[] = {1, 1};
  t.features.push_row(a);
  t.features.push_row(b);
  t.labels = {0, 0};
  t.point_ids = {"a", "b"};
  BalanceOptions opt;
  opt.k_neighbors = 1;
  opt.target = 12;
  const auto r = balance_classes(t, 3, opt);
  ASSERT_EQ(r.table.size(), 12u);
  ASSERT_EQ(r.synthetic.size(), 10u);
  for (const auto& s : r.synthetic) {
    const double x = r.table.features(s.row, 0), y = r.table.features(s.row, 1);
    EXPECT_EQ(x, y);
    EXPECT_GE(x, 0.0);
    EXPECT_LE(x, 1.0);
  }
}

TEST(BalanceClasses, AlreadyBalancedIsUnchanged) {
  const auto t = random_table({6, 6}, 2);
  BalanceOptions opt;
  opt.target = 6;
  const auto r = balance_classes(t, 1, opt);
  EXPECT_TRUE(r.synthetic.empty());
  auto rows = [](const FeatureTable& x) {
    std::vector<std::vector<double>> v;
    for (std::size_t i = 0; i < x.size(); ++i) v.emplace_back(x.features.row(i).begin(), x.features.row(i).end());
    std::sort(v.begin(), v.end());
    return v;
  };
  EXPECT_EQ(rows(r.table), rows(t));
}

TEST(BalanceClasses, OverAndUnderSampleToTarget) {
  const auto t = random_table({100, 10}, 6);
  BalanceOptions opt;
  opt.target = 50;
  const auto r = balance_classes(t, 7, opt);
  std::size_t c0 = 0, c1 = 0;
  for (int l : r.table.labels) (l == 0 ? c0 : c1) += 1;
  EXPECT_EQ(c0, 50u);
  EXPECT_EQ(c1, 50u);
  EXPECT_EQ(r.synthetic.size(), 40u);
}

TEST(BalanceClasses, SyntheticRowsAreConvexCombinations) {
  const auto t = random_table({40, 8, 5}, 9);
  const auto r = balance_classes(t, 4);
  EXPECT_EQ(r.target, 8u);
  for (const auto& s : r.synthetic) {
    ASSERT_EQ(t.labels[s.parent_a], t.labels[s.parent_b]);
    ASSERT_EQ(r.table.labels[s.row], t.labels[s.parent_a]);
    ASSERT_GE(s.lambda, 0.0);
    ASSERT_LE(s.lambda, 1.0);
    for (std::size_t c = 0; c < kRoadColumn; ++c) {
      const double pa = t.features(s.parent_a, c), pb = t.features(s.parent_b, c);
      EXPECT_NEAR(r.table.features(s.row, c), pa + s.lambda * (pb - pa), 1e-12);
    }
    const double road = r.table.features(s.row, kRoadColumn);
    EXPECT_TRUE(road == t.features(s.parent_a, kRoadColumn) || road == t.features(s.parent_b, kRoadColumn));
  }
}

TEST(BalanceClasses, DeterministicAndRejectsSingletons) {
  const auto t = random_table({20, 6}, 3);
  EXPECT_EQ(balance_classes(t, 5).table.features, balance_classes(t, 5).table.features);
  EXPECT_THROW(balance_classes(random_table({20, 1}, 3), 5), Error);
}

TEST(Fishnet, QuadrantsAndBoundary) {
  std::vector<AccidentRecord> recs;
  auto add = [&](double lon, double lat, AccidentClass c) { recs.push_back({"p", "", "", c, lon, lat}); };
  add(0.25, 0.25, AccidentClass::Collision);
  add(0.75, 0.25, AccidentClass::Crash);
  add(0.25, 0.75, AccidentClass::Debris);
  add(0.75, 0.75, AccidentClass::Crash);
  auto g = fishnet_aggregate(recs, {}, 0.5, std::pair{0.0, 0.0});
  ASSERT_EQ(g.cells.size(), 4u);
  for (const auto& [key, cell] : g.cells) EXPECT_EQ(cell.total, 1u);
  EXPECT_EQ(g.cells.at({0, 1}).counts[1], 1u);

  recs.clear();
  add(0.5, 0.25, AccidentClass::Collision);
  g = fishnet_aggregate(recs, {}, 0.5, std::pair{0.0, 0.0});
  ASSERT_EQ(g.cells.size(), 1u);
  EXPECT_EQ(g.cells.begin()->first, (std::pair<long long, long long>{0, 1}));
}

TEST(Fishnet, SingleCellAveragesIndicators) {
  std::map<std::string, PointIndicators> pts;
  pts["a"].values.bc = 0.2;
  pts["b"].values.bc = 0.6;
  std::vector<AccidentRecord> recs = {{"a", "", "", AccidentClass::Crash, 1.01, 2.01},
                                      {"b", "", "", AccidentClass::Crash, 1.02, 2.02},
                                      {"c", "", "", AccidentClass::Debris, 1.03, 2.03}};
  const auto g = fishnet_aggregate(recs, pts, 1.0);
  ASSERT_EQ(g.cells.size(), 1u);
  const auto& cell = g.cells.begin()->second;
  EXPECT_EQ(cell.total, 3u);
  EXPECT_EQ(cell.with_indicators, 2u);
  EXPECT_NEAR(cell.indicator_mean[0], 0.4, 1e-15);
  EXPECT_THROW(fishnet_aggregate(recs, pts, 0.0), Error);
}

TEST(Standardize, Examples) {
  Matrix m(2, 1);
  m(0, 0) = 0;
  m(1, 0) = 2;
  const auto s = fit_standardizer(m, {});
  const auto z = s.apply(m);
  EXPECT_EQ(z(0, 0), -1.0);
  EXPECT_EQ(z(1, 0), 1.0);
  const auto again = fit_standardizer(z, {}).apply(z);
  EXPECT_NEAR(again(0, 0), -1.0, 1e-12);
  EXPECT_NEAR(again(1, 0), 1.0, 1e-12);
}

TEST(Standardize, ConstantColumnNamed) {
  auto t = random_table({5, 5}, 1);
  for (std::size_t r = 0; r < t.size(); ++r) t.features(r, feature_index("vod")) = 3.0;
  try {
    standardize_features(t);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("vod"), std::string::npos);
  }
}

TEST(Standardize, RoadColumnLeftAlone) {
  const auto t = random_table({8, 8}, 2);
  const auto [z, s] = standardize_features(t);
  EXPECT_EQ(z.features.column(kRoadColumn), t.features.column(kRoadColumn));
  EXPECT_NEAR(mean(z.features.column(0)), 0.0, 1e-12);
  EXPECT_NEAR(stddev(z.features.column(0)), 1.0, 1e-12);
}
