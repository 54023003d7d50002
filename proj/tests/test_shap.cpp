#include <gtest/gtest.h>

#include <cmath>

#include "streetrisk/gbt.hpp"
#include "streetrisk/shap.hpp"

using namespace streetrisk;

namespace {

// Conditional expectation of a tree given the features in `known` (bitmask).
double cond_value(const DecisionTree& t, std::span<const double> x, unsigned known, std::size_t node = 0) {
  const auto& n = t.node(node);
  if (n.is_leaf()) return n.value;
  const auto l = static_cast<std::size_t>(n.left), r = static_cast<std::size_t>(n.right);
  if (known & (1u << n.feature)) return cond_value(t, x, known, x[n.feature] < n.threshold ? l : r);
  return (t.node(l).cover * cond_value(t, x, known, l) + t.node(r).cover * cond_value(t, x, known, r)) / n.cover;
}

std::vector<double> brute_shapley(const DecisionTree& t, std::span<const double> x, std::size_t m) {
  std::vector<double> fact(m + 1, 1.0);
  for (std::size_t i = 1; i <= m; ++i) fact[i] = fact[i - 1] * double(i);
  std::vector<double> phi(m, 0.0);
  for (std::size_t j = 0; j < m; ++j)
    for (unsigned s = 0; s < (1u << m); ++s) {
      if (s & (1u << j)) continue;
      const auto size = static_cast<std::size_t>(__builtin_popcount(s));
      const double w = fact[size] * fact[m - size - 1] / fact[m];
      phi[j] += w * (cond_value(t, x, s | (1u << j)) - cond_value(t, x, s));
    }
  return phi;
}

// Random tree whose internal covers are the sums of random leaf covers.
DecisionTree random_tree(Rng& r, std::size_t m, int max_depth) {
  std::vector<TreeNode> nodes;
  auto grow = [&](auto& self, int depth) -> int {
    const int id = static_cast<int>(nodes.size());
    nodes.push_back({});
    if (depth >= max_depth || (depth > 0 && r.uniform() < 0.3)) {
      nodes[id] = {-1, 0.0, -1, -1, r.normal(), 0.5 + r.uniform() * 5.0};
      return id;
    }
    const int f = static_cast<int>(r.below(m));
    const double thr = r.uniform();
    const int l = self(self, depth + 1);
    const int rr = self(self, depth + 1);
    nodes[id] = {f, thr, l, rr, 0.0, nodes[l].cover + nodes[rr].cover};
    return id;
  };
  grow(grow, 0);
  return DecisionTree(std::move(nodes));
}

DecisionTree stump(int feature, double thr, double lo, double hi, double cl = 1.0, double ch = 1.0) {
  return DecisionTree({{feature, thr, 1, 2, 0.0, cl + ch}, {-1, 0, -1, -1, lo, cl}, {-1, 0, -1, -1, hi, ch}});
}

TreeEnsemble shell(std::size_t k, std::size_t m) {
  TreeEnsemble e;
  e.objective = k > 1 ? Objective::MulticlassSoftprob : Objective::SquaredError;
  e.num_class = k;
  e.num_features = m;
  e.base_score.assign(k, 0.0);
  return e;
}

Attribution attr(std::size_t ref, std::vector<double> x, std::vector<std::vector<double>> phi) {
  Attribution a;
  a.sample_ref = ref;
  a.x = std::move(x);
  a.phi = Matrix(phi.size(), phi.front().size());
  for (std::size_t k = 0; k < phi.size(); ++k)
    for (std::size_t j = 0; j < phi[k].size(); ++j) a.phi(k, j) = phi[k][j];
  a.phi0.assign(phi.size(), 0.0);
  return a;
}

}  // namespace

TEST(TreeShap, StumpSplitsDifferenceInHalf) {
  auto m = shell(1, 2);
  m.add_tree(stump(0, 0.5, 1.0, 5.0), 0);
  const double x[] = {0.9, 0.0};
  const auto a = tree_shap(m, x);
  EXPECT_NEAR(a.phi(0, 0), (5.0 - 1.0) / 2.0, 1e-15);
  EXPECT_EQ(a.phi(0, 1), 0.0);
  EXPECT_NEAR(a.phi0[0], 3.0, 1e-15);
}

TEST(TreeShap, ConstantTreeHasZeroAttribution) {
  auto m = shell(1, 3);
  m.add_tree(DecisionTree::leaf(2.5), 0);
  const double x[] = {1, 2, 3};
  const auto a = tree_shap(m, x);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(a.phi(0, j), 0.0);
  EXPECT_EQ(a.phi0[0], 2.5);
}

TEST(TreeShap, DuplicatedTreeDoublesAttribution) {
  Rng r(4);
  const auto t = random_tree(r, 4, 3);
  auto one = shell(1, 4), two = shell(1, 4);
  one.add_tree(t, 0);
  two.add_tree(t, 0);
  two.add_tree(t, 0);
  const double x[] = {0.1, 0.7, 0.4, 0.9};
  const auto a = tree_shap(one, x), b = tree_shap(two, x);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(b.phi(0, j), 2.0 * a.phi(0, j), 1e-12);
}

TEST(TreeShap, MatchesBruteForceShapley) {
  Rng r(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t m = 1 + r.below(5);
    const std::size_t trees = 1 + r.below(3);
    auto e = shell(1, m);
    for (std::size_t t = 0; t < trees; ++t) e.add_tree(random_tree(r, m, 1 + static_cast<int>(r.below(3))), 0);
    std::vector<double> x(m);
    for (auto& v : x) v = r.uniform();
    std::vector<double> expect(m, 0.0);
    for (const auto& t : e.trees) {
      const auto p = brute_shapley(t, x, m);
      for (std::size_t j = 0; j < m; ++j) expect[j] += p[j];
    }
    const auto a = tree_shap(e, x);
    for (std::size_t j = 0; j < m; ++j) ASSERT_NEAR(a.phi(0, j), expect[j], 1e-9) << "trial " << trial;
  }
}

TEST(TreeShap, AdditivityAndDummyOnTrainedModel) {
  Rng r(5);
  Matrix x;
  std::vector<int> y;
  for (int i = 0; i < 120; ++i) {
    const double row[] = {r.uniform(), r.uniform(), 0.25};
    x.push_row(row);
    y.push_back(row[0] + 0.5 * row[1] > 0.8 ? 2 : (row[0] > 0.3 ? 1 : 0));
  }
  TrainConfig cfg;
  cfg.rounds = 20;
  cfg.max_depth = 3;
  const auto model = fit_multiclass(x, y, 3, cfg);
  for (const auto& a : tree_shap_all(model, x)) {
    const auto logits = predict_logits(model, a.x);
    for (std::size_t k = 0; k < 3; ++k) {
      double s = a.phi0[k];
      for (std::size_t j = 0; j < 3; ++j) s += a.phi(k, j);
      ASSERT_NEAR(s, logits[k], 1e-9);
      ASSERT_EQ(a.phi(k, 2), 0.0);
    }
  }
}

TEST(TreeShap, SymmetricFeaturesShareCredit) {
  // f(x0, x1) = 1 only when both exceed 0.5, with symmetric covers.
  DecisionTree t({{0, 0.5, 1, 2, 0.0, 4.0},
                  {-1, 0, -1, -1, 0.0, 2.0},
                  {1, 0.5, 3, 4, 0.0, 2.0},
                  {-1, 0, -1, -1, 0.0, 1.0},
                  {-1, 0, -1, -1, 1.0, 1.0}});
  auto m = shell(1, 2);
  m.add_tree(t, 0);
  const double x[] = {0.9, 0.9};
  const auto a = tree_shap(m, x);
  EXPECT_NEAR(a.phi(0, 0), a.phi(0, 1), 1e-15);
  EXPECT_NEAR(a.phi(0, 0) + a.phi(0, 1) + a.phi0[0], 1.0, 1e-15);
}

TEST(Importance, SingleInformativeFeatureTakesAllShare) {
  std::vector<Attribution> as = {attr(0, {1, 2}, {{0.5, 0.0}}), attr(1, {3, 4}, {{-1.5, 0.0}})};
  const auto s = global_importance(as);
  EXPECT_EQ(s.shares, (std::vector<double>{1.0, 0.0}));
  EXPECT_DOUBLE_EQ(s.mean_abs[0], 1.0);
}

TEST(Importance, EqualMagnitudesGiveEqualShares) {
  std::vector<Attribution> as = {attr(0, {0, 0, 0}, {{1, -1, 1}}), attr(1, {0, 0, 0}, {{-2, 2, 2}})};
  for (double v : global_importance(as).shares) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Importance, AllZeroIsNoSignal) {
  std::vector<Attribution> as = {attr(0, {0, 0}, {{0, 0}, {0, 0}})};
  try {
    global_importance(as);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("no signal"), std::string::npos);
  }
  EXPECT_THROW(global_importance(std::vector<Attribution>{}), Error);
}

TEST(Importance, PerClassShares) {
  std::vector<Attribution> as = {attr(0, {0, 0}, {{1, 0}, {0, 0}}), attr(1, {0, 0}, {{1, 0}, {0, 0}})};
  EXPECT_EQ(class_importance(as, 0), (std::vector<double>{1.0, 0.0}));
  EXPECT_THROW(class_importance(as, 1), Error);
  EXPECT_THROW(class_importance(as, 2), Error);
}

TEST(Importance, SingleOutputClassSharesEqualGlobal) {
  std::vector<Attribution> as = {attr(0, {0, 0, 0}, {{0.3, -0.2, 0.1}}), attr(1, {0, 0, 0}, {{0.0, 0.4, -0.6}})};
  const auto g = global_importance(as).shares, c = class_importance(as, 0);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(c[j], g[j], 1e-15);
}

TEST(Importance, SampleOrderDoesNotMatter) {
  std::vector<Attribution> as = {attr(0, {0, 0}, {{0.25, -0.5}}), attr(1, {0, 0}, {{0.125, 0.5}}),
                                 attr(2, {0, 0}, {{-1.0, 0.0625}})};
  std::vector<Attribution> rev(as.rbegin(), as.rend());
  EXPECT_EQ(global_importance(as).shares, global_importance(rev).shares);
  EXPECT_EQ(class_importance(as, 0), class_importance(rev, 0));
}

TEST(Dependence, RowsInValueOrder) {
  std::vector<Attribution> as = {attr(7, {0.9, 0}, {{0.4, 0}}), attr(3, {0.1, 0}, {{-0.2, 0}})};
  const auto d = dependence_table(as, 0, 0);
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d[0].sample_ref, 3u);
  EXPECT_EQ(d[0].value, 0.1);
  EXPECT_EQ(d[0].phi, -0.2);
  EXPECT_EQ(d[1].sample_ref, 7u);
}

TEST(Dependence, TiesKeepSampleOrderAndEmptyIsEmpty) {
  std::vector<Attribution> as = {attr(5, {1.0}, {{0.1}}), attr(2, {1.0}, {{0.2}}), attr(9, {0.0}, {{0.3}})};
  const auto d = dependence_table(as, 0, 0);
  EXPECT_EQ(d[0].sample_ref, 9u);
  EXPECT_EQ(d[1].sample_ref, 2u);
  EXPECT_EQ(d[2].sample_ref, 5u);
  EXPECT_TRUE(dependence_table(std::vector<Attribution>{}, 0, 0).empty());
  EXPECT_THROW(dependence_table(as, 1, 0), Error);
  EXPECT_NE(render_dependence_csv(d).find("sample"), std::string::npos);
}
