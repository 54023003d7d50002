#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "streetrisk/common.hpp"
#include "streetrisk/csv.hpp"
#include "streetrisk/dataset.hpp"
#include "streetrisk/gbt.hpp"

namespace streetrisk {

enum class TreatmentKind { Categorical, Continuous };

// Columns that may each serve as treatment, with the rest as covariates,
// plus a multiclass outcome analysed one-vs-rest.
struct CausalData {
  Matrix features;
  std::vector<std::string> names;
  std::vector<TreatmentKind> kinds;
  std::vector<std::map<int, std::string>> level_names;  // categorical columns only
  std::vector<int> outcome;
  std::vector<std::string> outcome_names;

  std::size_t size() const { return outcome.size(); }
  std::size_t num_outcomes() const { return outcome_names.size(); }

  std::size_t column(std::string_view name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return i;
    fail("unknown treatment column '{}'", name);
  }

  std::string level_name(std::size_t col, int level) const {
    if (col < level_names.size())
      if (auto it = level_names[col].find(level); it != level_names[col].end()) return it->second;
    return std::to_string(level);
  }

  void validate() const {
    if (features.cols() != names.size() || names.size() != kinds.size())
      fail("causal data: {} columns, {} names, {} kinds", features.cols(), names.size(), kinds.size());
    if (features.rows() != outcome.size()) fail("causal data: {} rows, {} outcomes", features.rows(), outcome.size());
    for (double v : features.data())
      if (!std::isfinite(v)) fail("causal data contains missing or non-finite values; impute first");
    for (int o : outcome)
      if (o < 0 || static_cast<std::size_t>(o) >= num_outcomes()) fail("outcome {} outside 0..{}", o, num_outcomes() - 1);
  }

  CausalData select(std::span<const std::size_t> idx) const {
    CausalData out{features.select_rows(idx), names, kinds, level_names, {}, outcome_names};
    out.outcome.reserve(idx.size());
    for (auto i : idx) out.outcome.push_back(outcome[i]);
    return out;
  }
};

inline CausalData causal_data_from(const FeatureTable& t) {
  CausalData d;
  d.features = t.features;
  for (auto n : kFeatureNames) d.names.emplace_back(n);
  d.kinds.assign(kFeatureCount, TreatmentKind::Continuous);
  d.kinds[kRoadColumn] = TreatmentKind::Categorical;
  d.level_names.assign(kFeatureCount, {});
  for (int c = 0; c < 4; ++c) d.level_names[kRoadColumn][c] = std::string(kRoadCategoryNames[static_cast<std::size_t>(c)]);
  d.outcome = t.labels;
  for (auto n : kAccidentClassNames) d.outcome_names.emplace_back(n);
  d.validate();
  return d;
}

// ---------------------------------------------------------------------------
// Generalised propensity score

struct GpsConfig {
  TrainConfig model{100, 3, 0.1, 1.0, 1.0, 0};
  double truncation_percentile = 99.0;
  bool stabilized = false;
  double probability_floor = 1e-6;

  void validate() const {
    model.validate();
    if (!(truncation_percentile > 50.0 && truncation_percentile <= 100.0))
      fail("truncation percentile must lie in (50, 100], got {}", truncation_percentile);
    if (!(probability_floor > 0.0 && probability_floor < 1.0)) fail("probability floor must lie in (0, 1)");
  }
};

inline void to_json(nlohmann::json& j, const GpsConfig& c) {
  j = {{"model", c.model},
       {"truncation_percentile", c.truncation_percentile},
       {"stabilized", c.stabilized},
       {"probability_floor", c.probability_floor}};
}

inline void from_json(const nlohmann::json& j, GpsConfig& c) {
  if (j.contains("model")) c.model = j.at("model").get<TrainConfig>();
  c.truncation_percentile = j.value("truncation_percentile", c.truncation_percentile);
  c.stabilized = j.value("stabilized", c.stabilized);
  c.probability_floor = j.value("probability_floor", c.probability_floor);
  c.validate();
}

struct WeightVector {
  std::vector<double> w;
  std::vector<bool> truncated;
  double clamp_value = 0.0;  // the percentile value used for truncation

  std::size_t size() const { return w.size(); }
};

struct GpsModel {
  std::size_t treatment = 0;
  TreatmentKind kind = TreatmentKind::Continuous;
  TreeEnsemble model;
  double residual_sigma = 0.0;    // continuous only
  std::vector<int> levels;        // categorical: model class index -> level value
  double truncation_percentile = 99.0;
  std::vector<double> fitted;     // in-sample Z-hat (continuous) or pi-hat of the observed level (categorical)
  std::vector<std::size_t> predicted_level;  // categorical: argmax level index per row
};

struct GpsFit {
  GpsModel model;
  WeightVector weights;  // after truncation
  std::vector<double> raw_weights;
};

inline double categorical_weight(double probability, double floor = 1e-6) {
  return 1.0 / std::max(probability, floor);
}

inline double normal_pdf(double x, double mu, double sigma) {
  constexpr double inv_sqrt_2pi = 0.39894228040143267793994605993438;
  const double t = (x - mu) / sigma;
  return inv_sqrt_2pi / sigma * std::exp(-0.5 * t * t);
}

// 1 / N(residual; 0, sigma^2), evaluated in log space and capped so the
// result stays finite; truncation clamps the tail afterwards.
inline double continuous_weight(double residual, double sigma) {
  constexpr double log_sqrt_2pi = 0.91893853320467274178032973640562;
  const double t = residual / sigma;
  const double log_w = std::min(std::log(sigma) + log_sqrt_2pi + 0.5 * t * t, 700.0);
  return std::exp(log_w);
}

inline WeightVector truncate_weights(std::span<const double> raw, double percentile) {
  if (!(percentile > 50.0 && percentile <= 100.0)) fail("truncation percentile must lie in (50, 100], got {}", percentile);
  WeightVector out;
  out.clamp_value = nearest_rank(std::vector<double>(raw.begin(), raw.end()), percentile);
  for (double v : raw) {
    const bool clip = v > out.clamp_value;
    out.w.push_back(clip ? out.clamp_value : v);
    out.truncated.push_back(clip);
  }
  return out;
}

inline WeightVector truncate_weights(const WeightVector& w, double percentile) { return truncate_weights(w.w, percentile); }

namespace detail {

inline std::vector<int> level_codes(std::span<const double> z) {
  std::vector<int> out;
  out.reserve(z.size());
  for (double v : z) {
    const double r = std::round(v);
    if (r != v) fail("categorical treatment value {} is not an integer code", v);
    out.push_back(static_cast<int>(r));
  }
  return out;
}

}  // namespace detail

inline GpsFit fit_gps_categorical(const CausalData& data, std::size_t treatment, const GpsConfig& cfg) {
  cfg.validate();
  const auto z = detail::level_codes(data.features.column(treatment));
  std::map<int, std::size_t> counts;
  for (int v : z) ++counts[v];
  if (counts.size() < 2) fail("treatment '{}' has a single level", data.names[treatment]);
  for (const auto& [lvl, c] : counts)
    if (c < 2) fail("treatment '{}' level {} has {} sample(s); need at least 2", data.names[treatment], data.level_name(treatment, lvl), c);

  GpsFit fit;
  auto& gm = fit.model;
  gm.treatment = treatment;
  gm.kind = TreatmentKind::Categorical;
  gm.truncation_percentile = cfg.truncation_percentile;
  std::map<int, int> index_of;
  for (const auto& [lvl, c] : counts) {
    index_of[lvl] = static_cast<int>(gm.levels.size());
    gm.levels.push_back(lvl);
  }
  std::vector<int> y;
  for (int v : z) y.push_back(index_of[v]);
  const auto x = data.features.drop_column(treatment);
  gm.model = fit_multiclass(x, y, gm.levels.size(), cfg.model);

  const double n = static_cast<double>(z.size());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto p = predict_proba(gm.model, x.row(i));
    const double pi = p[static_cast<std::size_t>(y[i])];
    gm.fitted.push_back(pi);
    gm.predicted_level.push_back(argmax(p));
    double w = categorical_weight(pi, cfg.probability_floor);
    if (cfg.stabilized) w *= static_cast<double>(counts[z[i]]) / n;
    fit.raw_weights.push_back(w);
  }
  fit.weights = truncate_weights(fit.raw_weights, cfg.truncation_percentile);
  return fit;
}

inline GpsModel fit_treatment_regressor(const CausalData& data, std::size_t treatment, const GpsConfig& cfg) {
  cfg.validate();
  const auto z = data.features.column(treatment);
  if (std::all_of(z.begin(), z.end(), [&](double v) { return v == z.front(); }))
    fail("treatment '{}' is constant", data.names[treatment]);
  GpsModel gm;
  gm.treatment = treatment;
  gm.kind = TreatmentKind::Continuous;
  gm.truncation_percentile = cfg.truncation_percentile;
  const auto x = data.features.drop_column(treatment);
  gm.model = fit_regressor(x, z, cfg.model, &gm.fitted);
  std::vector<double> resid(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) resid[i] = z[i] - gm.fitted[i];
  gm.residual_sigma = stddev(resid);
  return gm;
}

inline bool sigma_degenerate(double sigma, std::span<const double> z) {
  return !(sigma > 1e-12 * std::max(1.0, stddev(z)));
}

// Weights from a fitted treatment regressor; throws when the residual spread is zero.
inline GpsFit continuous_weights(const CausalData& data, GpsModel gm, const GpsConfig& cfg) {
  const auto z = data.features.column(gm.treatment);
  if (sigma_degenerate(gm.residual_sigma, z))
    fail("treatment '{}' is predicted exactly from the covariates (residual sigma = 0); no overlap",
         data.names[gm.treatment]);
  GpsFit fit;
  const double mz = mean(z), sz = stddev(z);
  for (std::size_t i = 0; i < z.size(); ++i) {
    double w = continuous_weight(z[i] - gm.fitted[i], gm.residual_sigma);
    if (cfg.stabilized) w *= normal_pdf(z[i], mz, sz);
    fit.raw_weights.push_back(w);
  }
  fit.weights = truncate_weights(fit.raw_weights, cfg.truncation_percentile);
  fit.model = std::move(gm);
  return fit;
}

inline GpsFit fit_gps_continuous(const CausalData& data, std::size_t treatment, const GpsConfig& cfg) {
  return continuous_weights(data, fit_treatment_regressor(data, treatment, cfg), cfg);
}

inline GpsFit fit_gps(const CausalData& data, std::size_t treatment, const GpsConfig& cfg) {
  return data.kinds.at(treatment) == TreatmentKind::Categorical ? fit_gps_categorical(data, treatment, cfg)
                                                                : fit_gps_continuous(data, treatment, cfg);
}

// ---------------------------------------------------------------------------
// Covariate balance

struct CovariateBalance {
  std::string name;
  double before = 0.0;
  double after = 0.0;
};

struct BalanceReport {
  std::vector<CovariateBalance> covariates;
  double mean_before = 0.0;
  double mean_after = 0.0;
  double improvement = 0.0;  // mean_before - mean_after
};

struct GroupMoments {
  double mean = 0.0;
  double var = 0.0;
};

inline GroupMoments weighted_moments(std::span<const double> x, std::span<const double> w) {
  double sw = 0.0, sx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sw += w[i];
    sx += w[i] * x[i];
  }
  GroupMoments m;
  m.mean = sx / sw;
  double sv = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) sv += w[i] * (x[i] - m.mean) * (x[i] - m.mean);
  m.var = sv / sw;
  return m;
}

// |m1 - m2| / sqrt((v1 + v2) / 2); nullopt when both groups are constant.
inline std::optional<double> standardized_mean_difference(GroupMoments a, GroupMoments b) {
  const double pooled = (a.var + b.var) / 2.0;
  const double diff = std::abs(a.mean - b.mean);
  if (!(pooled > 0.0)) {
    if (diff == 0.0) return 0.0;
    return std::nullopt;
  }
  return diff / std::sqrt(pooled);
}

// Row groups used for balance checks. Continuous treatments split at the
// median (values above it form the upper group); categorical treatments give
// one group per level.
inline std::vector<std::vector<std::size_t>> treatment_groups(const CausalData& data, std::size_t treatment) {
  const auto z = data.features.column(treatment);
  std::vector<std::vector<std::size_t>> groups;
  if (data.kinds.at(treatment) == TreatmentKind::Categorical) {
    std::map<double, std::vector<std::size_t>> by;
    for (std::size_t i = 0; i < z.size(); ++i) by[z[i]].push_back(i);
    for (auto& [lvl, rows] : by) groups.push_back(std::move(rows));
    // most frequent level first: it is the reference group
    std::stable_sort(groups.begin(), groups.end(), [](const auto& a, const auto& b) { return a.size() > b.size(); });
  } else {
    auto sorted = z;
    std::sort(sorted.begin(), sorted.end());
    const auto n = sorted.size();
    if (n == 0) fail("balance check on an empty sample");
    const double median = n % 2 ? sorted[n / 2] : (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0;
    std::vector<std::size_t> low, high;
    for (std::size_t i = 0; i < n; ++i) (z[i] > median ? high : low).push_back(i);
    if (high.size() < 2) {
      low.clear();
      high.clear();
      for (std::size_t i = 0; i < n; ++i) (z[i] >= median ? high : low).push_back(i);
    }
    groups = {std::move(low), std::move(high)};
  }
  for (const auto& g : groups)
    if (g.size() < 2) fail("treatment '{}' yields a pseudo-group with {} sample(s)", data.names[treatment], g.size());
  return groups;
}

inline BalanceReport smd_balance(const CausalData& data, std::size_t treatment, std::span<const double> weights) {
  if (weights.size() != data.size()) fail("{} weights for {} rows", weights.size(), data.size());
  const auto groups = treatment_groups(data, treatment);
  BalanceReport rep;
  std::size_t used = 0;
  for (std::size_t c = 0; c < data.features.cols(); ++c) {
    if (c == treatment) continue;
    double before = 0.0, after = 0.0;
    bool ok = true;
    auto moments = [&](const std::vector<std::size_t>& g, bool weighted) {
      std::vector<double> x, w;
      for (auto i : g) {
        x.push_back(data.features(i, c));
        w.push_back(weighted ? weights[i] : 1.0);
      }
      return weighted_moments(x, w);
    };
    // Reference group 0 against each other group, averaged.
    for (std::size_t g = 1; g < groups.size(); ++g) {
      const auto b = standardized_mean_difference(moments(groups[0], false), moments(groups[g], false));
      const auto a = standardized_mean_difference(moments(groups[0], true), moments(groups[g], true));
      if (!a || !b) {
        ok = false;
        break;
      }
      before += *b;
      after += *a;
    }
    if (!ok) continue;
    const double pairs = static_cast<double>(groups.size() - 1);
    rep.covariates.push_back({data.names[c], before / pairs, after / pairs});
    rep.mean_before += before / pairs;
    rep.mean_after += after / pairs;
    ++used;
  }
  if (used) {
    rep.mean_before /= static_cast<double>(used);
    rep.mean_after /= static_cast<double>(used);
  }
  rep.improvement = rep.mean_before - rep.mean_after;
  return rep;
}

struct GpsDiagnostics {
  std::string treatment;
  TreatmentKind kind = TreatmentKind::Continuous;
  double r2 = kMissing;        // continuous
  double rmse = kMissing;      // continuous
  double accuracy = kMissing;  // categorical
  bool overlap_ok = true;      // false when the treatment is predicted exactly
  std::optional<BalanceReport> balance;
};

inline GpsDiagnostics gps_diagnostics(const CausalData& data, const GpsModel& model, const GpsConfig& cfg) {
  GpsDiagnostics d;
  d.treatment = data.names[model.treatment];
  d.kind = model.kind;
  const auto z = data.features.column(model.treatment);
  if (model.kind == TreatmentKind::Continuous) {
    const double mz = mean(z);
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
      ss_res += (z[i] - model.fitted[i]) * (z[i] - model.fitted[i]);
      ss_tot += (z[i] - mz) * (z[i] - mz);
    }
    d.r2 = ss_tot > 0 ? 1.0 - ss_res / ss_tot : kMissing;
    d.rmse = std::sqrt(ss_res / static_cast<double>(z.size()));
    d.overlap_ok = !sigma_degenerate(model.residual_sigma, z);
    if (d.overlap_ok) {
      const auto fit = continuous_weights(data, model, cfg);
      d.balance = smd_balance(data, model.treatment, fit.weights.w);
    }
  } else {
    const auto codes = detail::level_codes(z);
    std::size_t correct = 0;
    std::vector<double> raw;
    for (std::size_t i = 0; i < codes.size(); ++i) {
      correct += model.levels[model.predicted_level[i]] == codes[i];
      raw.push_back(categorical_weight(model.fitted[i], cfg.probability_floor));
    }
    d.accuracy = static_cast<double>(correct) / static_cast<double>(codes.size());
    d.balance = smd_balance(data, model.treatment, truncate_weights(raw, cfg.truncation_percentile).w);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Weighted logistic regression

struct LogisticFit {
  std::vector<double> coef;        // intercept first
  std::vector<double> std_errors;  // model-based, from the weighted information matrix
  int iterations = 0;
};

inline constexpr int kIrlsMaxIterations = 100;
inline constexpr double kIrlsTolerance = 1e-8;
inline constexpr double kSeparationBound = 30.0;

// Newton / IRLS maximisation of the w-weighted Bernoulli log-likelihood.
// `design` must include the intercept column.
inline LogisticFit weighted_logistic_design(const Matrix& design, std::span<const int> y, std::span<const double> w) {
  const auto n = design.rows(), p = design.cols();
  if (y.size() != n || w.size() != n) fail("logistic: {} rows, {} outcomes, {} weights", n, y.size(), w.size());
  double w_pos = 0.0, w_neg = 0.0, w_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(w[i] > 0.0) || !std::isfinite(w[i])) fail("logistic weights must be positive and finite");
    (y[i] ? w_pos : w_neg) += w[i];
    w_sum += w[i];
  }
  if (!(w_pos > 0.0) || !(w_neg > 0.0)) fail("logistic outcome needs both events and non-events");
  const double ridge = 1e-8 * w_sum / static_cast<double>(n);

  Eigen::MatrixXd X(n, p);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < p; ++j) X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = design(i, j);
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p));
  Eigen::MatrixXd info(p, p);
  auto loglik = [&](const Eigen::VectorXd& b) {
    const Eigen::VectorXd eta = X * b;
    double ll = 0.0;
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
      // log sigmoid(+-eta) without overflow
      const double t = y[static_cast<std::size_t>(i)] ? eta(i) : -eta(i);
      ll -= w[static_cast<std::size_t>(i)] * (t > 0 ? std::log1p(std::exp(-t)) : -t + std::log1p(std::exp(t)));
    }
    return ll - 0.5 * ridge * b.squaredNorm();
  };
  double ll = loglik(beta);
  LogisticFit fit;
  bool converged = false;
  for (int it = 1; it <= kIrlsMaxIterations; ++it) {
    const Eigen::VectorXd eta = X * beta;
    Eigen::VectorXd resid(static_cast<Eigen::Index>(n)), curv(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i) {
      const double mu = sigmoid(eta(i));
      const double wi = w[static_cast<std::size_t>(i)];
      resid(i) = wi * (y[static_cast<std::size_t>(i)] - mu);
      curv(i) = wi * mu * (1.0 - mu);
    }
    const Eigen::VectorXd score = X.transpose() * resid;
    info.noalias() = X.transpose() * curv.asDiagonal() * X;
    info.diagonal().array() += ridge;
    const Eigen::VectorXd score_r = score - ridge * beta;
    Eigen::VectorXd step = info.ldlt().solve(score_r);
    if (!step.allFinite()) fail("logistic regression diverged (singular information matrix)");
    // Convergence is judged on the full Newton step, before any damping.
    const bool small = step.cwiseAbs().maxCoeff() < kIrlsTolerance;
    // Halve overshooting steps. Drops within rounding noise of ll don't count.
    const double slack = 1e-12 * (1.0 + std::abs(ll));
    double next = loglik(beta + step);
    for (int h = 0; h < 30 && !small && !(next >= ll - slack); ++h) {
      step *= 0.5;
      next = loglik(beta + step);
    }
    beta += step;
    // Near-separated levels leave a flat likelihood where the step jitters on
    // rounding noise; a stalled likelihood with a small step is a converged fit.
    const bool stalled = std::abs(next - ll) <= 1e-14 * (1.0 + std::abs(ll)) && step.cwiseAbs().maxCoeff() < 1e-6;
    ll = next;
    fit.iterations = it;
    if (beta.cwiseAbs().maxCoeff() > kSeparationBound)
      fail("logistic regression diverged: |coefficient| exceeded {} (complete or quasi-complete separation)",
           kSeparationBound);
    if (small || stalled) {
      converged = true;
      break;
    }
  }
  if (!converged) fail("logistic regression did not converge in {} iterations", kIrlsMaxIterations);
  const Eigen::MatrixXd cov = info.ldlt().solve(Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(p)));
  for (std::size_t j = 0; j < p; ++j) {
    fit.coef.push_back(beta(static_cast<Eigen::Index>(j)));
    fit.std_errors.push_back(std::sqrt(cov(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(j))));
  }
  return fit;
}

// Pr(Y = 1 | z) = logistic(beta0 + beta1 z).
inline LogisticFit weighted_logistic(std::span<const int> y, std::span<const double> z, std::span<const double> w) {
  Matrix design(z.size(), 2);
  for (std::size_t i = 0; i < z.size(); ++i) {
    design(i, 0) = 1.0;
    design(i, 1) = z[i];
  }
  return weighted_logistic_design(design, y, w);
}

struct CategoricalLogisticFit {
  int baseline = 0;
  std::vector<int> levels;  // non-baseline levels, ascending; coef[i + 1] belongs to levels[i]
  LogisticFit fit;
};

// Most frequent level; ties go to the smallest code.
inline int most_frequent_level(std::span<const int> z) {
  std::map<int, std::size_t> counts;
  for (int v : z) ++counts[v];
  return std::max_element(counts.begin(), counts.end(), [](auto& a, auto& b) { return a.second < b.second; })->first;
}

// Indicator columns for every level except the baseline.
inline CategoricalLogisticFit weighted_logistic_categorical(std::span<const int> y, std::span<const int> z,
                                                            std::span<const double> w,
                                                            std::optional<int> baseline = std::nullopt,
                                                            std::optional<std::vector<int>> levels = std::nullopt) {
  CategoricalLogisticFit out;
  out.baseline = baseline.value_or(most_frequent_level(z));
  if (levels) {
    out.levels = *levels;
  } else {
    std::map<int, int> seen;
    for (int v : z) seen[v] = 1;
    for (const auto& [lvl, _] : seen)
      if (lvl != out.baseline) out.levels.push_back(lvl);
  }
  Matrix design(z.size(), out.levels.size() + 1);
  std::vector<std::size_t> present(out.levels.size(), 0);
  for (std::size_t i = 0; i < z.size(); ++i) {
    design(i, 0) = 1.0;
    for (std::size_t l = 0; l < out.levels.size(); ++l)
      if (z[i] == out.levels[l]) {
        design(i, l + 1) = 1.0;
        ++present[l];
      }
  }
  for (std::size_t l = 0; l < present.size(); ++l)
    if (!present[l]) fail("treatment level {} absent from the sample", out.levels[l]);
  out.fit = weighted_logistic_design(design, y, w);
  return out;
}

// ---------------------------------------------------------------------------
// Effect estimation with bootstrap inference

struct EffectConfig {
  std::size_t bootstrap = 500;
  std::uint64_t seed = 0;
  GpsConfig gps;
  double max_failure_rate = 0.2;
};

inline void to_json(nlohmann::json& j, const EffectConfig& c) {
  j = {{"bootstrap", c.bootstrap}, {"seed", c.seed}, {"gps", c.gps}, {"max_failure_rate", c.max_failure_rate}};
}

inline void from_json(const nlohmann::json& j, EffectConfig& c) {
  c.bootstrap = j.value("bootstrap", c.bootstrap);
  c.seed = j.value("seed", c.seed);
  if (j.contains("gps")) c.gps = j.at("gps").get<GpsConfig>();
  c.max_failure_rate = j.value("max_failure_rate", c.max_failure_rate);
}

struct LevelEffect {
  std::string label;  // "per_sd" for continuous treatments, the level name otherwise
  double beta0 = 0.0;
  double coef = 0.0;  // beta1 or alpha_c
  double odds_ratio = 1.0;
  double unweighted_odds_ratio = kMissing;
  std::optional<double> ci_low, ci_high, p_value, se_log_or;
};

struct EffectEstimate {
  std::string treatment;
  std::string outcome;
  TreatmentKind kind = TreatmentKind::Continuous;
  std::string baseline;  // categorical only
  std::vector<LevelEffect> effects;
  std::size_t n = 0;
  std::size_t bootstrap = 0;
  std::size_t failed_replicates = 0;
};

inline std::string significance_stars(double p) {
  if (p < 0.001) return "***";
  if (p < 0.01) return "**";
  if (p < 0.05) return "*";
  return "";
}

namespace detail {

// Per-outcome log odds ratios (one per level effect) for a single data set,
// given fixed weights. Throws on any failed fit.
struct TreatmentDesign {
  bool categorical = false;
  std::vector<double> z_std;  // continuous
  std::vector<int> codes;     // categorical
  int baseline = 0;
  std::vector<int> levels;
};

inline TreatmentDesign make_design(const CausalData& data, std::size_t t, double z_mean, double z_sd, int baseline,
                                   const std::vector<int>& levels) {
  TreatmentDesign d;
  const auto z = data.features.column(t);
  if (data.kinds[t] == TreatmentKind::Categorical) {
    d.categorical = true;
    d.codes = level_codes(z);
    d.baseline = baseline;
    d.levels = levels;
  } else {
    for (double v : z) d.z_std.push_back((v - z_mean) / z_sd);
  }
  return d;
}

inline std::vector<int> one_vs_rest(const CausalData& data, std::size_t k) {
  std::vector<int> y;
  for (int o : data.outcome) y.push_back(o == static_cast<int>(k) ? 1 : 0);
  return y;
}

inline LogisticFit fit_outcome(const TreatmentDesign& d, std::span<const int> y, std::span<const double> w) {
  if (d.categorical) return weighted_logistic_categorical(y, d.codes, w, d.baseline, d.levels).fit;
  return weighted_logistic(y, d.z_std, w);
}

}  // namespace detail

// All one-vs-rest effects of one treatment. The GPS model is fitted once per
// (replicate, treatment) and shared by every outcome; replicate b resamples
// rows with Rng::derive(seed, b), so results do not depend on which outcomes
// are requested together.
inline std::vector<EffectEstimate> estimate_effects(const CausalData& data, std::size_t treatment,
                                                    std::span<const std::size_t> outcomes, const EffectConfig& cfg) {
  data.validate();
  cfg.gps.validate();
  if (treatment >= data.features.cols()) fail("treatment column {} out of range", treatment);
  for (auto k : outcomes) {
    if (k >= data.num_outcomes()) fail("outcome {} out of range", k);
    if (std::find(data.outcome.begin(), data.outcome.end(), static_cast<int>(k)) == data.outcome.end())
      fail("outcome class '{}' is absent from the data", data.outcome_names[k]);
  }
  const bool categorical = data.kinds[treatment] == TreatmentKind::Categorical;
  const auto z = data.features.column(treatment);
  const double z_mean = mean(z), z_sd = stddev(z);
  int baseline = 0;
  std::vector<int> levels;
  if (categorical) {
    const auto codes = detail::level_codes(z);
    baseline = most_frequent_level(codes);
    std::map<int, int> seen;
    for (int v : codes) seen[v] = 1;
    for (const auto& [lvl, _] : seen)
      if (lvl != baseline) levels.push_back(lvl);
  } else if (!(z_sd > 0.0)) {
    fail("treatment '{}' is constant", data.names[treatment]);
  }

  // Point estimates.
  const auto gps = fit_gps(data, treatment, cfg.gps);
  const auto design = detail::make_design(data, treatment, z_mean, z_sd, baseline, levels);
  const std::vector<double> unit(data.size(), 1.0);
  std::vector<EffectEstimate> out;
  for (auto k : outcomes) {
    const auto y = detail::one_vs_rest(data, k);
    const auto fit = detail::fit_outcome(design, y, gps.weights.w);
    const auto naive = detail::fit_outcome(design, y, unit);
    EffectEstimate e;
    e.treatment = data.names[treatment];
    e.outcome = data.outcome_names[k];
    e.kind = data.kinds[treatment];
    e.n = data.size();
    e.bootstrap = cfg.bootstrap;
    if (categorical) e.baseline = data.level_name(treatment, baseline);
    const std::size_t n_eff = fit.coef.size() - 1;
    for (std::size_t l = 0; l < n_eff; ++l) {
      LevelEffect le;
      le.label = categorical ? data.level_name(treatment, levels[l]) : "per_sd";
      le.beta0 = fit.coef[0];
      le.coef = fit.coef[l + 1];
      le.odds_ratio = std::exp(le.coef);
      le.unweighted_odds_ratio = std::exp(naive.coef[l + 1]);
      e.effects.push_back(le);
    }
    out.push_back(std::move(e));
  }
  if (cfg.bootstrap == 0) return out;

  // Bootstrap: resample rows, refit GPS and outcome models.
  const std::size_t n = data.size();
  std::vector<std::vector<std::vector<double>>> reps(outcomes.size());  // [outcome][level] -> log OR
  for (std::size_t o = 0; o < outcomes.size(); ++o) reps[o].assign(out[o].effects.size(), {});
  std::vector<std::size_t> failed(outcomes.size(), 0);
  std::vector<std::size_t> idx(n);
  for (std::size_t b = 0; b < cfg.bootstrap; ++b) {
    auto rng = Rng::derive(cfg.seed, b);
    for (auto& i : idx) i = rng.below(n);
    const auto sample = data.select(idx);
    std::optional<GpsFit> rep_gps;
    try {
      rep_gps = fit_gps(sample, treatment, cfg.gps);
    } catch (const Error&) {
    }
    for (std::size_t o = 0; o < outcomes.size(); ++o) {
      if (!rep_gps) {
        ++failed[o];
        continue;
      }
      try {
        const auto d = detail::make_design(sample, treatment, z_mean, z_sd, baseline, levels);
        const auto fit = detail::fit_outcome(d, detail::one_vs_rest(sample, outcomes[o]), rep_gps->weights.w);
        for (std::size_t l = 0; l < reps[o].size(); ++l) reps[o][l].push_back(fit.coef[l + 1]);
      } catch (const Error&) {
        ++failed[o];
      }
    }
  }
  for (std::size_t o = 0; o < outcomes.size(); ++o) {
    auto& e = out[o];
    e.failed_replicates = failed[o];
    if (static_cast<double>(failed[o]) > cfg.max_failure_rate * static_cast<double>(cfg.bootstrap))
      fail("{} of {} bootstrap refits failed for treatment '{}' / outcome '{}'", failed[o], cfg.bootstrap, e.treatment,
           e.outcome);
    for (std::size_t l = 0; l < e.effects.size(); ++l) {
      const auto& r = reps[o][l];
      if (r.size() < 2) fail("too few successful bootstrap replicates for '{}' / '{}'", e.treatment, e.outcome);
      auto& le = e.effects[l];
      const double m = mean(r);
      double ss = 0.0;
      for (double v : r) ss += (v - m) * (v - m);
      const double se = std::sqrt(ss / static_cast<double>(r.size() - 1));
      le.se_log_or = se;
      le.ci_low = std::exp(nearest_rank(r, 2.5));
      le.ci_high = std::exp(nearest_rank(r, 97.5));
      le.p_value = se > 0.0 ? std::erfc(std::abs(le.coef / se) / std::sqrt(2.0)) : (le.coef == 0.0 ? 1.0 : 0.0);
    }
  }
  return out;
}

inline EffectEstimate estimate_effect(const CausalData& data, std::size_t treatment, std::size_t outcome,
                                      const EffectConfig& cfg) {
  const std::size_t k[] = {outcome};
  return estimate_effects(data, treatment, k, cfg).front();
}

struct EffectCell {
  std::string treatment;
  std::string outcome;
  std::optional<EffectEstimate> estimate;
  std::string error;
};

struct EffectMatrix {
  std::vector<std::string> treatments;
  std::vector<std::string> outcomes;
  std::vector<EffectCell> cells;  // treatment-major

  std::size_t failures() const {
    return static_cast<std::size_t>(std::count_if(cells.begin(), cells.end(), [](const auto& c) { return !c.estimate; }));
  }
  const EffectCell& at(std::size_t t, std::size_t o) const { return cells.at(t * outcomes.size() + o); }
};

// Every requested (treatment, outcome) cell; failures are recorded per cell.
inline EffectMatrix build_effect_matrix(const CausalData& data, const EffectConfig& cfg,
                                        std::vector<std::size_t> treatments = {},
                                        std::vector<std::size_t> outcomes = {}) {
  if (treatments.empty())
    for (std::size_t t = 0; t < data.features.cols(); ++t) treatments.push_back(t);
  if (outcomes.empty())
    for (std::size_t k = 0; k < data.num_outcomes(); ++k) outcomes.push_back(k);
  EffectMatrix m;
  for (auto t : treatments) m.treatments.push_back(data.names.at(t));
  for (auto k : outcomes) m.outcomes.push_back(data.outcome_names.at(k));
  for (auto t : treatments) {
    std::vector<EffectCell> row;
    for (auto k : outcomes) row.push_back({data.names[t], data.outcome_names[k], std::nullopt, {}});
    // Cells share GPS fits; fall back to per-cell runs to localise a failure.
    try {
      auto est = estimate_effects(data, t, outcomes, cfg);
      for (std::size_t o = 0; o < outcomes.size(); ++o) row[o].estimate = std::move(est[o]);
    } catch (const Error&) {
      for (std::size_t o = 0; o < outcomes.size(); ++o) {
        try {
          row[o].estimate = estimate_effect(data, t, outcomes[o], cfg);
        } catch (const Error& e) {
          row[o].error = e.what();
        }
      }
    }
    for (auto& c : row) m.cells.push_back(std::move(c));
  }
  return m;
}

inline std::string render_effect_csv(const EffectMatrix& m) {
  std::vector<std::vector<std::string>> rows;
  auto opt = [](const std::optional<double>& v) { return v ? num(*v) : std::string(); };
  for (const auto& c : m.cells) {
    if (!c.estimate) continue;
    const auto& e = *c.estimate;
    for (const auto& le : e.effects) {
      const auto name = e.kind == TreatmentKind::Categorical ? e.treatment + ":" + le.label : e.treatment;
      rows.push_back({name, e.outcome, num(le.odds_ratio), opt(le.ci_low), opt(le.ci_high), opt(le.p_value),
                      le.p_value ? significance_stars(*le.p_value) : std::string(), std::to_string(e.n),
                      std::to_string(e.bootstrap)});
    }
  }
  return csv::render({"treatment", "outcome", "or", "ci_low", "ci_high", "p", "stars", "n", "b"}, rows);
}

inline nlohmann::json effect_to_json(const EffectEstimate& e) {
  nlohmann::json j;
  j["treatment"] = e.treatment;
  j["outcome"] = e.outcome;
  j["kind"] = e.kind == TreatmentKind::Categorical ? "categorical" : "continuous";
  if (e.kind == TreatmentKind::Categorical) j["baseline"] = e.baseline;
  j["n"] = e.n;
  j["bootstrap"] = e.bootstrap;
  j["failed_replicates"] = e.failed_replicates;
  j["effects"] = nlohmann::json::array();
  for (const auto& le : e.effects) {
    nlohmann::json x = {{"label", le.label},       {"beta0", le.beta0},
                        {"coef", le.coef},         {"odds_ratio", le.odds_ratio},
                        {"unweighted_odds_ratio", le.unweighted_odds_ratio}};
    if (le.ci_low) {
      x["ci_low"] = *le.ci_low;
      x["ci_high"] = *le.ci_high;
      x["p_value"] = *le.p_value;
      x["se_log_or"] = *le.se_log_or;
      x["stars"] = significance_stars(*le.p_value);
    }
    j["effects"].push_back(std::move(x));
  }
  return j;
}

inline nlohmann::json matrix_to_json(const EffectMatrix& m) {
  nlohmann::json j;
  j["treatments"] = m.treatments;
  j["outcomes"] = m.outcomes;
  j["cells"] = nlohmann::json::array();
  j["failures"] = nlohmann::json::array();
  for (const auto& c : m.cells) {
    if (c.estimate)
      j["cells"].push_back(effect_to_json(*c.estimate));
    else
      j["failures"].push_back({{"treatment", c.treatment}, {"outcome", c.outcome}, {"error", c.error}});
  }
  return j;
}

inline nlohmann::json diagnostics_to_json(const GpsDiagnostics& d) {
  nlohmann::json j;
  j["treatment"] = d.treatment;
  j["kind"] = d.kind == TreatmentKind::Categorical ? "categorical" : "continuous";
  auto put = [&](const char* key, double v) { j[key] = is_missing(v) ? nlohmann::json() : nlohmann::json(v); };
  put("r2", d.r2);
  put("rmse", d.rmse);
  put("accuracy", d.accuracy);
  j["overlap_ok"] = d.overlap_ok;
  if (d.balance) {
    j["smd_before"] = d.balance->mean_before;
    j["smd_after"] = d.balance->mean_after;
    j["smd_improvement"] = d.balance->improvement;
    for (const auto& c : d.balance->covariates)
      j["covariates"].push_back({{"name", c.name}, {"smd_before", c.before}, {"smd_after", c.after}});
  }
  return j;
}

}  // namespace streetrisk
