#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "streetrisk/common.hpp"
#include "streetrisk/csv.hpp"

namespace streetrisk {

struct TreeNode {
  int feature = -1;
  double threshold = 0.0;  // x[feature] < threshold goes left
  int left = -1;
  int right = -1;
  double value = 0.0;  // leaf output (already scaled by the learning rate)
  double cover = 0.0;  // summed hessian of the training rows reaching the node

  bool is_leaf() const { return left < 0; }
  friend bool operator==(const TreeNode&, const TreeNode&) = default;
};

class DecisionTree {
 public:
  DecisionTree() = default;
  explicit DecisionTree(std::vector<TreeNode> nodes) : nodes_(std::move(nodes)) { validate(); }

  static DecisionTree leaf(double value, double cover = 1.0) { return DecisionTree({TreeNode{-1, 0, -1, -1, value, cover}}); }

  const std::vector<TreeNode>& nodes() const { return nodes_; }
  const TreeNode& node(std::size_t i) const { return nodes_[i]; }
  std::size_t size() const { return nodes_.size(); }

  std::size_t leaf_index(std::span<const double> x) const {
    std::size_t i = 0;
    while (!nodes_[i].is_leaf()) {
      const auto& n = nodes_[i];
      i = static_cast<std::size_t>(x[static_cast<std::size_t>(n.feature)] < n.threshold ? n.left : n.right);
    }
    return i;
  }

  double predict(std::span<const double> x) const { return nodes_[leaf_index(x)].value; }

  int max_feature() const {
    int m = -1;
    for (const auto& n : nodes_) m = std::max(m, n.feature);
    return m;
  }

  // Root at 0, every internal node has two in-range children, each node is
  // reached exactly once, values are finite and covers positive.
  void validate() const {
    if (nodes_.empty()) fail("tree has no nodes");
    std::vector<int> parents(nodes_.size(), 0);
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const auto& n = nodes_[i];
      if (!(n.cover > 0.0) || !std::isfinite(n.cover)) fail("tree node {} has non-positive cover {}", i, n.cover);
      if (n.is_leaf()) {
        if (n.right >= 0) fail("tree node {} has a right child but no left child", i);
        if (!std::isfinite(n.value)) fail("tree leaf {} has non-finite value", i);
        continue;
      }
      if (n.feature < 0) fail("internal tree node {} has no split feature", i);
      for (int c : {n.left, n.right}) {
        if (c <= static_cast<int>(i) || c >= static_cast<int>(nodes_.size()))
          fail("tree node {} has out-of-order child {}", i, c);
        ++parents[static_cast<std::size_t>(c)];
      }
    }
    for (std::size_t i = 1; i < nodes_.size(); ++i)
      if (parents[i] != 1) fail("tree node {} has {} parents", i, parents[i]);
  }

  friend bool operator==(const DecisionTree&, const DecisionTree&) = default;

 private:
  std::vector<TreeNode> nodes_;
};

struct TrainConfig {
  int rounds = 200;
  int max_depth = 6;
  double learning_rate = 0.1;
  double l2_lambda = 1.0;
  double min_child_weight = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (rounds < 1) fail("rounds must be >= 1, got {}", rounds);
    if (max_depth < 0) fail("max_depth must be >= 0, got {}", max_depth);
    if (!(learning_rate > 0.0 && learning_rate <= 1.0)) fail("learning_rate must lie in (0, 1], got {}", learning_rate);
    if (!(l2_lambda >= 0.0)) fail("l2_lambda must be >= 0, got {}", l2_lambda);
    if (!(min_child_weight >= 0.0)) fail("min_child_weight must be >= 0, got {}", min_child_weight);
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"rounds", c.rounds},         {"max_depth", c.max_depth},
       {"learning_rate", c.learning_rate}, {"l2_lambda", c.l2_lambda},
       {"min_child_weight", c.min_child_weight}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.rounds = j.value("rounds", c.rounds);
  c.max_depth = j.value("max_depth", c.max_depth);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.l2_lambda = j.value("l2_lambda", c.l2_lambda);
  c.min_child_weight = j.value("min_child_weight", c.min_child_weight);
  c.seed = j.value("seed", c.seed);
  c.validate();
}

enum class Objective { MulticlassSoftprob, SquaredError };

struct TreeEnsemble {
  Objective objective = Objective::SquaredError;
  std::size_t num_class = 1;  // outputs per sample; 1 for regression
  std::size_t num_features = 0;
  std::vector<double> base_score;  // one per output
  std::vector<DecisionTree> trees;
  std::vector<std::size_t> tree_output;  // output index each tree adds to
  TrainConfig config;

  void add_tree(DecisionTree t, std::size_t output) {
    if (output >= num_class) fail("tree output {} out of range for {} outputs", output, num_class);
    trees.push_back(std::move(t));
    tree_output.push_back(output);
  }

  friend bool operator==(const TreeEnsemble&, const TreeEnsemble&) = default;
};

inline void check_width(const TreeEnsemble& m, std::span<const double> x) {
  if (x.size() != m.num_features) fail("feature row has {} columns, model expects {}", x.size(), m.num_features);
}

// Raw additive scores, one per output (logits for the multiclass objective).
inline std::vector<double> predict_logits(const TreeEnsemble& m, std::span<const double> x) {
  check_width(m, x);
  std::vector<double> z = m.base_score;
  for (std::size_t t = 0; t < m.trees.size(); ++t) z[m.tree_output[t]] += m.trees[t].predict(x);
  return z;
}

inline double predict_value(const TreeEnsemble& m, std::span<const double> x) { return predict_logits(m, x).at(0); }

inline std::vector<double> softmax_probabilities(std::span<const double> z) {
  if (z.empty()) return {};
  const double zmax = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double s = 0.0;
  for (std::size_t k = 0; k < z.size(); ++k) s += (p[k] = std::exp(z[k] - zmax));
  for (auto& v : p) v /= s;
  return p;
}

inline std::vector<double> predict_proba(const TreeEnsemble& m, std::span<const double> x) {
  return softmax_probabilities(predict_logits(m, x));
}

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline std::size_t predict_class(const TreeEnsemble& m, std::span<const double> x) { return argmax(predict_logits(m, x)); }

namespace detail {

using SortedIndex = std::vector<std::vector<std::uint32_t>>;

// Exact greedy second-order tree growth. Every node owns the same range
// [begin, end) of each per-feature index array, holding its rows in ascending
// feature order; splitting stably partitions that range in place.
class TreeBuilder {
 public:
  TreeBuilder(const Matrix& x, const TrainConfig& cfg)
      : x_(x), cfg_(cfg), gh_(x.rows()), go_left_(x.rows(), 0), scratch_(x.rows()), scratch_v_(x.rows()),
        gl_(x.rows()), hl_(x.rows()), gain_(x.rows()), sorted_(presort(x)), sorted_values_(x.cols()) {
    for (std::size_t f = 0; f < x.cols(); ++f) {
      sorted_values_[f].resize(x.rows());
      for (std::size_t i = 0; i < x.rows(); ++i) sorted_values_[f][i] = x(sorted_[f][i], f);
    }
  }

  DecisionTree build(std::span<const double> grad, std::span<const double> hess) {
    for (std::size_t i = 0; i < gh_.size(); ++i) gh_[i] = {grad[i], hess[i]};
    nodes_.clear();
    order_ = sorted_;
    values_ = sorted_values_;
    grow(0, x_.rows(), 0);
    return DecisionTree(std::move(nodes_));
  }

  static SortedIndex presort(const Matrix& x) {
    if (x.rows() > std::numeric_limits<std::uint32_t>::max()) fail("too many rows for the tree builder");
    SortedIndex out(x.cols());
    for (std::size_t f = 0; f < x.cols(); ++f) {
      auto& idx = out[f];
      idx.resize(x.rows());
      std::iota(idx.begin(), idx.end(), 0u);
      std::stable_sort(idx.begin(), idx.end(), [&](std::uint32_t a, std::uint32_t b) { return x(a, f) < x(b, f); });
    }
    return out;
  }

 private:
  struct GradPair {
    double g = 0.0;
    double h = 0.0;
  };

  struct Candidate {
    double gain = 0.0;
    int feature = -1;
    double threshold = 0.0;
  };

  int grow(std::size_t begin, std::size_t end, int depth) {
    const auto& rows = order_.front();
    double G = 0.0, H = 0.0;
    for (std::size_t i = begin; i < end; ++i) {
      G += gh_[rows[i]].g;
      H += gh_[rows[i]].h;
    }
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(TreeNode{-1, 0.0, -1, -1, -G / (H + cfg_.l2_lambda) * cfg_.learning_rate, H});

    if (depth >= cfg_.max_depth) return id;
    const auto best = find_split(begin, end, G, H);
    if (best.feature < 0) return id;

    const auto f = static_cast<std::size_t>(best.feature);
    std::size_t n_left = 0;
    for (std::size_t i = begin; i < end; ++i) n_left += (go_left_[order_[f][i]] = values_[f][i] < best.threshold);
    // children at max depth are leaves: only the row list is needed
    const std::size_t n_arrays = depth + 1 >= cfg_.max_depth ? 1 : order_.size();
    for (std::size_t j = 0; j < n_arrays; ++j) {
      auto& idx = order_[j];
      auto& val = values_[j];
      std::size_t l = begin, r = 0;
      for (std::size_t i = begin; i < end; ++i) {
        const auto row = idx[i];
        if (go_left_[row]) {
          idx[l] = row;
          val[l++] = val[i];
        } else {
          scratch_[r] = row;
          scratch_v_[r++] = val[i];
        }
      }
      std::copy(scratch_.begin(), scratch_.begin() + static_cast<std::ptrdiff_t>(r),
                idx.begin() + static_cast<std::ptrdiff_t>(l));
      std::copy(scratch_v_.begin(), scratch_v_.begin() + static_cast<std::ptrdiff_t>(r),
                val.begin() + static_cast<std::ptrdiff_t>(l));
    }
    const int l = grow(begin, begin + n_left, depth + 1);
    const int r = grow(begin + n_left, end, depth + 1);
    auto& node = nodes_[static_cast<std::size_t>(id)];
    node.feature = best.feature;
    node.threshold = best.threshold;
    node.left = l;
    node.right = r;
    node.value = 0.0;
    node.cover = nodes_[static_cast<std::size_t>(l)].cover + nodes_[static_cast<std::size_t>(r)].cover;
    return id;
  }

  // Three passes per feature: prefix sums, a branch-free gain pass the
  // compiler can vectorize, then selection of the first strict maximum.
  Candidate find_split(std::size_t begin, std::size_t end, double G, double H) {
    const double lambda = cfg_.l2_lambda;
    const double parent = G * G / (H + lambda);
    Candidate best;
    if (end - begin < 2) return best;
    const std::size_t m = end - begin - 1;
    for (std::size_t f = 0; f < order_.size(); ++f) {
      const auto* rows = order_[f].data() + begin;
      const auto* vals = values_[f].data() + begin;
      double GL = 0.0, HL = 0.0;
      for (std::size_t k = 0; k < m; ++k) {
        GL += gh_[rows[k]].g;
        HL += gh_[rows[k]].h;
        gl_[k] = GL;
        hl_[k] = HL;
      }
      for (std::size_t k = 0; k < m; ++k) {
        const double gl = gl_[k], hl = hl_[k], gr = G - gl, hr = H - hl;
        gain_[k] = 0.5 * (gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - parent);
      }
      for (std::size_t k = 0; k < m; ++k) {
        if (!(gain_[k] > best.gain)) continue;
        const double v = vals[k], next = vals[k + 1];
        if (!(v < next)) continue;
        if (hl_[k] < cfg_.min_child_weight || H - hl_[k] < cfg_.min_child_weight) continue;
        double thr = v + (next - v) / 2.0;
        if (!(thr > v)) thr = next;
        best = {gain_[k], static_cast<int>(f), thr};
      }
    }
    return best;
  }

  const Matrix& x_;
  const TrainConfig& cfg_;
  std::vector<GradPair> gh_;
  std::vector<TreeNode> nodes_;
  std::vector<char> go_left_;
  std::vector<std::uint32_t> scratch_;
  std::vector<double> scratch_v_;
  std::vector<double> gl_, hl_, gain_;
  SortedIndex sorted_, order_;
  std::vector<std::vector<double>> sorted_values_, values_;
};

inline void check_features(const Matrix& x) {
  for (double v : x.data())
    if (!std::isfinite(v)) fail("training features contain missing or non-finite values; impute upstream");
}

}  // namespace detail

inline constexpr double kMinHessian = 1e-16;
inline constexpr double kMinPrior = 1e-6;

// Mean softmax cross-entropy of `logits` (n x K) against integer labels.
inline double softmax_cross_entropy(const Matrix& logits, std::span<const int> y) {
  double s = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto z = logits.row(i);
    const double zmax = *std::max_element(z.begin(), z.end());
    double lse = 0.0;
    for (double v : z) lse += std::exp(v - zmax);
    s += zmax + std::log(lse) - z[static_cast<std::size_t>(y[i])];
  }
  return s / static_cast<double>(logits.rows());
}

// Softmax boosting. `loss_trace`, when given, receives the training
// cross-entropy before the first round and after every round.
inline TreeEnsemble fit_multiclass(const Matrix& x, std::span<const int> y, std::size_t num_class,
                                   const TrainConfig& cfg, std::vector<double>* loss_trace = nullptr) {
  cfg.validate();
  if (x.rows() == 0) fail("fit_multiclass on an empty table");
  if (y.size() != x.rows()) fail("{} labels for {} rows", y.size(), x.rows());
  if (num_class < 2) fail("multiclass model needs at least 2 classes");
  detail::check_features(x);
  std::vector<std::size_t> counts(num_class, 0);
  for (int l : y) {
    if (l < 0 || static_cast<std::size_t>(l) >= num_class) fail("label {} outside 0..{}", l, num_class - 1);
    ++counts[static_cast<std::size_t>(l)];
  }
  if (std::count_if(counts.begin(), counts.end(), [](auto c) { return c > 0; }) < 2)
    fail("training labels contain a single class; nothing to discriminate");

  const std::size_t n = x.rows();
  TreeEnsemble m;
  m.objective = Objective::MulticlassSoftprob;
  m.num_class = num_class;
  m.num_features = x.cols();
  m.config = cfg;
  for (auto c : counts)
    m.base_score.push_back(std::log(std::max(static_cast<double>(c) / static_cast<double>(n), kMinPrior)));

  Matrix logits(n, num_class);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < num_class; ++k) logits(i, k) = m.base_score[k];
  if (loss_trace) loss_trace->push_back(softmax_cross_entropy(logits, y));

  detail::TreeBuilder builder(x, cfg);
  std::vector<double> g(n), h(n);
  Matrix prob(n, num_class);
  for (int round = 0; round < cfg.rounds; ++round) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto p = softmax_probabilities(logits.row(i));
      std::copy(p.begin(), p.end(), prob.row(i).begin());
    }
    std::vector<DecisionTree> round_trees;
    for (std::size_t k = 0; k < num_class; ++k) {
      for (std::size_t i = 0; i < n; ++i) {
        const double p = prob(i, k);
        g[i] = p - (static_cast<std::size_t>(y[i]) == k ? 1.0 : 0.0);
        h[i] = std::max(p * (1.0 - p), kMinHessian);
      }
      round_trees.push_back(builder.build(g, h));
    }
    for (std::size_t k = 0; k < num_class; ++k) {
      for (std::size_t i = 0; i < n; ++i) logits(i, k) += round_trees[k].predict(x.row(i));
      m.add_tree(std::move(round_trees[k]), k);
    }
    if (loss_trace) loss_trace->push_back(softmax_cross_entropy(logits, y));
  }
  return m;
}

// Squared-error boosting from the target mean.
// `fitted`, when given, receives the in-sample predictions.
inline TreeEnsemble fit_regressor(const Matrix& x, std::span<const double> y, const TrainConfig& cfg,
                                  std::vector<double>* fitted = nullptr) {
  cfg.validate();
  if (x.rows() == 0) fail("fit_regressor on an empty table");
  if (y.size() != x.rows()) fail("{} targets for {} rows", y.size(), x.rows());
  if (x.rows() < 2) fail("fit_regressor needs at least 2 rows");
  detail::check_features(x);
  for (double v : y)
    if (!std::isfinite(v)) fail("regression target contains non-finite values");

  const std::size_t n = x.rows();
  TreeEnsemble m;
  m.objective = Objective::SquaredError;
  m.num_class = 1;
  m.num_features = x.cols();
  m.config = cfg;
  m.base_score = {mean(y)};

  std::vector<double> pred(n, m.base_score[0]);
  std::vector<double> g(n), h(n, 1.0);
  detail::TreeBuilder builder(x, cfg);
  for (int round = 0; round < cfg.rounds; ++round) {
    for (std::size_t i = 0; i < n; ++i) g[i] = pred[i] - y[i];
    auto tree = builder.build(g, h);
    for (std::size_t i = 0; i < n; ++i) pred[i] += tree.predict(x.row(i));
    m.add_tree(std::move(tree), 0);
  }
  if (fitted) *fitted = std::move(pred);
  return m;
}

struct ClassifierMetrics {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::vector<double> f1;                          // per class; NaN when the class is absent from truth and predictions
};

inline ClassifierMetrics evaluate_predictions(std::span<const int> truth, std::span<const std::size_t> predicted,
                                              std::size_t num_class) {
  if (truth.empty()) fail("cannot evaluate on an empty test set");
  ClassifierMetrics m;
  m.confusion.assign(num_class, std::vector<std::size_t>(num_class, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto t = static_cast<std::size_t>(truth[i]);
    ++m.confusion.at(t).at(predicted[i]);
    correct += t == predicted[i];
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(truth.size());
  double f1_sum = 0.0;
  std::size_t used = 0;
  m.f1.assign(num_class, kMissing);
  for (std::size_t k = 0; k < num_class; ++k) {
    std::size_t tp = m.confusion[k][k], support = 0, predicted_k = 0;
    for (std::size_t j = 0; j < num_class; ++j) {
      support += m.confusion[k][j];
      predicted_k += m.confusion[j][k];
    }
    if (support == 0 && predicted_k == 0) continue;
    const double f1 = tp == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(support + predicted_k);
    m.f1[k] = f1;
    f1_sum += f1;
    ++used;
  }
  m.macro_f1 = used ? f1_sum / static_cast<double>(used) : 0.0;
  return m;
}

inline ClassifierMetrics evaluate_classifier(const TreeEnsemble& model, const Matrix& x, std::span<const int> y) {
  std::vector<std::size_t> pred(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) pred[i] = predict_class(model, x.row(i));
  return evaluate_predictions(y, pred, model.num_class);
}

// ---------------------------------------------------------------------------
// Serialization

inline constexpr int kModelSchemaVersion = 1;

inline nlohmann::json model_to_json(const TreeEnsemble& m) {
  nlohmann::json j;
  j["format"] = "streetrisk.tree_ensemble";
  j["schema_version"] = kModelSchemaVersion;
  j["objective"] = m.objective == Objective::MulticlassSoftprob ? "multiclass_softprob" : "squared_error";
  j["num_class"] = m.num_class;
  j["num_features"] = m.num_features;
  j["base_score"] = m.base_score;
  j["config"] = m.config;
  j["trees"] = nlohmann::json::array();
  for (std::size_t t = 0; t < m.trees.size(); ++t) {
    nlohmann::json jt;
    jt["output"] = m.tree_output[t];
    std::vector<int> feature, left, right;
    std::vector<double> threshold, value, cover;
    for (const auto& n : m.trees[t].nodes()) {
      feature.push_back(n.feature);
      threshold.push_back(n.threshold);
      left.push_back(n.left);
      right.push_back(n.right);
      value.push_back(n.value);
      cover.push_back(n.cover);
    }
    jt["feature"] = feature;
    jt["threshold"] = threshold;
    jt["left"] = left;
    jt["right"] = right;
    jt["value"] = value;
    jt["cover"] = cover;
    j["trees"].push_back(std::move(jt));
  }
  return j;
}

inline TreeEnsemble model_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "streetrisk.tree_ensemble") fail("not a tree ensemble document");
    if (j.at("schema_version").get<int>() != kModelSchemaVersion)
      fail("unsupported model schema version {}", j.at("schema_version").get<int>());
    TreeEnsemble m;
    const auto obj = j.at("objective").get<std::string>();
    if (obj == "multiclass_softprob")
      m.objective = Objective::MulticlassSoftprob;
    else if (obj == "squared_error")
      m.objective = Objective::SquaredError;
    else
      fail("unknown objective '{}'", obj);
    m.num_class = j.at("num_class").get<std::size_t>();
    m.num_features = j.at("num_features").get<std::size_t>();
    m.base_score = j.at("base_score").get<std::vector<double>>();
    if (m.base_score.size() != m.num_class) fail("base_score has {} entries for {} outputs", m.base_score.size(), m.num_class);
    m.config = j.at("config").get<TrainConfig>();
    for (const auto& jt : j.at("trees")) {
      const auto feature = jt.at("feature").get<std::vector<int>>();
      const auto threshold = jt.at("threshold").get<std::vector<double>>();
      const auto left = jt.at("left").get<std::vector<int>>();
      const auto right = jt.at("right").get<std::vector<int>>();
      const auto value = jt.at("value").get<std::vector<double>>();
      const auto cover = jt.at("cover").get<std::vector<double>>();
      const auto n = feature.size();
      if (threshold.size() != n || left.size() != n || right.size() != n || value.size() != n || cover.size() != n)
        fail("tree arrays have inconsistent lengths");
      std::vector<TreeNode> nodes(n);
      for (std::size_t i = 0; i < n; ++i) nodes[i] = {feature[i], threshold[i], left[i], right[i], value[i], cover[i]};
      DecisionTree tree(std::move(nodes));
      if (tree.max_feature() >= static_cast<int>(m.num_features)) fail("tree splits on a feature beyond num_features");
      m.add_tree(std::move(tree), jt.at("output").get<std::size_t>());
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    fail("malformed model document: {}", e.what());
  }
}

inline void save_model(const std::filesystem::path& path, const TreeEnsemble& m) {
  csv::write_atomic(path, model_to_json(m).dump(1) + "\n");
}

inline TreeEnsemble load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open '{}'", path.string());
  return model_from_json(nlohmann::json::parse(in));
}

}  // namespace streetrisk
