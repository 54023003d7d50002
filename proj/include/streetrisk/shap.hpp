#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "streetrisk/common.hpp"
#include "streetrisk/csv.hpp"
#include "streetrisk/gbt.hpp"

namespace streetrisk {

// Per-sample Shapley decomposition of every model output:
// phi0[k] + sum_j phi(k, j) equals the raw score of output k.
struct Attribution {
  Matrix phi;               // outputs x features
  std::vector<double> phi0; // baseline per output
  std::vector<double> x;    // the explained feature row
  std::size_t sample_ref = 0;
};

namespace detail {

struct PathElement {
  int feature = -1;
  double zero_fraction = 0.0;
  double one_fraction = 0.0;
  double pweight = 0.0;
};

// Path-dependent TreeSHAP (polynomial-time exact Shapley values under the
// cover-weighted conditional expectation).
class TreeShapWalker {
 public:
  TreeShapWalker(const DecisionTree& tree, std::span<const double> x, std::span<double> phi)
      : tree_(tree), x_(x), phi_(phi) {}

  void run() { recurse(0, {}, 0, 1.0, 1.0, -1); }

 private:
  static void extend(std::vector<PathElement>& path, std::size_t depth, double zero, double one, int feature) {
    path[depth] = {feature, zero, one, depth == 0 ? 1.0 : 0.0};
    const double d1 = static_cast<double>(depth + 1);
    for (std::size_t i = depth; i-- > 0;) {
      path[i + 1].pweight += one * path[i].pweight * static_cast<double>(i + 1) / d1;
      path[i].pweight = zero * path[i].pweight * static_cast<double>(depth - i) / d1;
    }
  }

  static void unwind(std::vector<PathElement>& path, std::size_t depth, std::size_t index) {
    const double one = path[index].one_fraction, zero = path[index].zero_fraction;
    const double d1 = static_cast<double>(depth + 1);
    double next = path[depth].pweight;
    for (std::size_t i = depth; i-- > 0;) {
      if (one != 0.0) {
        const double tmp = path[i].pweight;
        path[i].pweight = next * d1 / (static_cast<double>(i + 1) * one);
        next = tmp - path[i].pweight * zero * static_cast<double>(depth - i) / d1;
      } else {
        path[i].pweight = path[i].pweight * d1 / (zero * static_cast<double>(depth - i));
      }
    }
    for (std::size_t i = index; i < depth; ++i) {
      path[i].feature = path[i + 1].feature;
      path[i].zero_fraction = path[i + 1].zero_fraction;
      path[i].one_fraction = path[i + 1].one_fraction;
    }
  }

  static double unwound_sum(const std::vector<PathElement>& path, std::size_t depth, std::size_t index) {
    const double one = path[index].one_fraction, zero = path[index].zero_fraction;
    const double d1 = static_cast<double>(depth + 1);
    double next = path[depth].pweight, total = 0.0;
    for (std::size_t i = depth; i-- > 0;) {
      if (one != 0.0) {
        const double tmp = next * d1 / (static_cast<double>(i + 1) * one);
        total += tmp;
        next = path[i].pweight - tmp * zero * static_cast<double>(depth - i) / d1;
      } else if (zero != 0.0) {
        total += path[i].pweight / zero / (static_cast<double>(depth - i) / d1);
      }
    }
    return total;
  }

  void recurse(std::size_t node, std::vector<PathElement> path, std::size_t depth, double zero, double one,
               int feature) {
    path.resize(depth + 1);
    extend(path, depth, zero, one, feature);
    const auto& n = tree_.node(node);
    if (n.is_leaf()) {
      for (std::size_t i = 1; i <= depth; ++i) {
        const double w = unwound_sum(path, depth, i);
        const auto& e = path[i];
        phi_[static_cast<std::size_t>(e.feature)] += w * (e.one_fraction - e.zero_fraction) * n.value;
      }
      return;
    }
    const auto f = static_cast<std::size_t>(n.feature);
    const bool left_hot = x_[f] < n.threshold;
    const auto hot = static_cast<std::size_t>(left_hot ? n.left : n.right);
    const auto cold = static_cast<std::size_t>(left_hot ? n.right : n.left);

    double incoming_zero = 1.0, incoming_one = 1.0;
    std::size_t k = 1;
    for (; k <= depth; ++k)
      if (path[k].feature == n.feature) break;
    if (k <= depth) {
      incoming_zero = path[k].zero_fraction;
      incoming_one = path[k].one_fraction;
      unwind(path, depth, k);
      --depth;
    }
    recurse(hot, path, depth + 1, incoming_zero * tree_.node(hot).cover / n.cover, incoming_one, n.feature);
    recurse(cold, path, depth + 1, incoming_zero * tree_.node(cold).cover / n.cover, 0.0, n.feature);
  }

  const DecisionTree& tree_;
  std::span<const double> x_;
  std::span<double> phi_;
};

}  // namespace detail

// Cover-weighted mean output of a tree: its prediction when no feature is known.
inline double tree_expected_value(const DecisionTree& tree, std::size_t node = 0) {
  const auto& n = tree.node(node);
  if (n.is_leaf()) return n.value;
  const auto& l = tree.node(static_cast<std::size_t>(n.left));
  const auto& r = tree.node(static_cast<std::size_t>(n.right));
  return (l.cover * tree_expected_value(tree, static_cast<std::size_t>(n.left)) +
          r.cover * tree_expected_value(tree, static_cast<std::size_t>(n.right))) /
         n.cover;
}

// Adds one tree's Shapley values for `x` into `phi`.
inline void tree_shap_single(const DecisionTree& tree, std::span<const double> x, std::span<double> phi) {
  detail::TreeShapWalker(tree, x, phi).run();
}

// Exact attributions in raw-score (logit) space, summed over all trees of each output.
inline Attribution tree_shap(const TreeEnsemble& model, std::span<const double> x, std::size_t sample_ref = 0) {
  check_width(model, x);
  Attribution a;
  a.phi = Matrix(model.num_class, model.num_features);
  a.phi0 = model.base_score;
  a.x.assign(x.begin(), x.end());
  a.sample_ref = sample_ref;
  for (std::size_t t = 0; t < model.trees.size(); ++t) {
    const auto k = model.tree_output[t];
    a.phi0[k] += tree_expected_value(model.trees[t]);
    tree_shap_single(model.trees[t], x, a.phi.row(k));
  }
  return a;
}

inline std::vector<Attribution> tree_shap_all(const TreeEnsemble& model, const Matrix& x) {
  std::vector<Attribution> out;
  out.reserve(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) out.push_back(tree_shap(model, x.row(i), i));
  return out;
}

struct ImportanceSummary {
  std::vector<double> mean_abs;  // per feature, over samples and outputs
  std::vector<double> shares;    // mean_abs normalised to sum 1
  Matrix class_mean_abs;         // outputs x features
};

namespace detail {
inline std::vector<double> normalise_shares(const std::vector<double>& mean_abs, std::string_view what) {
  double total = 0.0;
  for (double v : mean_abs) total += v;
  if (!(total > 0.0)) fail("no signal: all attributions are zero for {}", what);
  std::vector<double> s(mean_abs.size());
  for (std::size_t j = 0; j < s.size(); ++j) s[j] = mean_abs[j] / total;
  return s;
}

inline void check_attributions(std::span<const Attribution> attrs) {
  if (attrs.empty()) fail("importance needs at least one attribution");
  for (const auto& a : attrs)
    if (a.phi.rows() != attrs.front().phi.rows() || a.phi.cols() != attrs.front().phi.cols())
      fail("attributions have inconsistent shapes");
}
}  // namespace detail

inline ImportanceSummary global_importance(std::span<const Attribution> attrs) {
  detail::check_attributions(attrs);
  const auto K = attrs.front().phi.rows(), M = attrs.front().phi.cols();
  ImportanceSummary s;
  s.mean_abs.assign(M, 0.0);
  s.class_mean_abs = Matrix(K, M);
  for (const auto& a : attrs)
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t j = 0; j < M; ++j) s.class_mean_abs(k, j) += std::abs(a.phi(k, j));
  const double n = static_cast<double>(attrs.size());
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t j = 0; j < M; ++j) {
      s.mean_abs[j] += s.class_mean_abs(k, j) / (n * static_cast<double>(K));
      s.class_mean_abs(k, j) /= n;
    }
  s.shares = detail::normalise_shares(s.mean_abs, "the model");
  return s;
}

// Shares of mean |phi| restricted to output `k`.
inline std::vector<double> class_importance(std::span<const Attribution> attrs, std::size_t k) {
  detail::check_attributions(attrs);
  const auto K = attrs.front().phi.rows(), M = attrs.front().phi.cols();
  if (k >= K) fail("class {} out of range for {} outputs", k, K);
  std::vector<double> mean_abs(M, 0.0);
  for (const auto& a : attrs)
    for (std::size_t j = 0; j < M; ++j) mean_abs[j] += std::abs(a.phi(k, j));
  for (auto& v : mean_abs) v /= static_cast<double>(attrs.size());
  return detail::normalise_shares(mean_abs, fmt::format("class {}", k));
}

struct DependencePoint {
  std::size_t sample_ref;
  double value;
  double phi;
};

// One point per sample, ascending feature value; ties keep sample order.
inline std::vector<DependencePoint> dependence_table(std::span<const Attribution> attrs, std::size_t feature,
                                                     std::size_t k) {
  std::vector<DependencePoint> out;
  for (const auto& a : attrs) {
    if (feature >= a.phi.cols() || feature >= a.x.size()) fail("feature {} out of range", feature);
    if (k >= a.phi.rows()) fail("class {} out of range", k);
    out.push_back({a.sample_ref, a.x[feature], a.phi(k, feature)});
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& p, const auto& q) {
    return p.value < q.value || (p.value == q.value && p.sample_ref < q.sample_ref);
  });
  return out;
}

inline std::string render_dependence_csv(const std::vector<DependencePoint>& pts) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& p : pts) rows.push_back({std::to_string(p.sample_ref), num(p.value), num(p.phi)});
  return csv::render({"sample", "value", "phi"}, rows);
}

}  // namespace streetrisk
