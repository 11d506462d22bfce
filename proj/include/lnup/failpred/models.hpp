#pragma once

// Base learners for the failure ensemble: L2 logistic regression, CART
// forests (bootstrap random forest and extremely randomized trees), gradient
// boosting with Newton leaf steps, and second-order regularized boosting.
// Every learner honours per-class sample weights and is deterministic given
// its seed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lnup/core.hpp"
#include "lnup/failpred/dataset.hpp"

namespace lnup::failpred {

enum class Family { Logistic, GradientBoosting, ExtraTrees, RandomForest, XgbBoosting };

inline const char* to_string(Family f) {
  switch (f) {
    case Family::Logistic: return "logistic";
    case Family::GradientBoosting: return "gradient_boosting";
    case Family::ExtraTrees: return "extra_trees";
    case Family::RandomForest: return "random_forest";
    case Family::XgbBoosting: return "xgb_style_boosting";
  }
  return "unknown";
}

inline Family family_from_string(const std::string& s) {
  for (Family f : {Family::Logistic, Family::GradientBoosting, Family::ExtraTrees, Family::RandomForest,
                   Family::XgbBoosting})
    if (s == to_string(f)) return f;
  throw data_error("unknown classifier family " + s);
}

struct BaseClassifierConfig {
  Family family = Family::Logistic;
  double C = 1.0;                   // logistic inverse regularization
  int max_iterations = 2000;        // logistic
  double tolerance = 1e-6;          // logistic gradient-norm stop
  int max_depth = 6;
  int min_samples_split = 2;
  int min_samples_leaf = 1;
  double failure_weight = 1.0;      // class weight of label 1; label 0 weighs 1
  double learning_rate = 0.1;       // boosting
  int n_estimators = 100;           // trees
  double l2_leaf = 1.0;             // xgb-style leaf penalty
  std::uint64_t seed = 0;
};

inline nlohmann::json to_json(const BaseClassifierConfig& c) {
  return {{"family", to_string(c.family)}, {"C", c.C}, {"max_iterations", c.max_iterations},
          {"tolerance", c.tolerance}, {"max_depth", c.max_depth}, {"min_samples_split", c.min_samples_split},
          {"min_samples_leaf", c.min_samples_leaf}, {"failure_weight", c.failure_weight},
          {"learning_rate", c.learning_rate}, {"n_estimators", c.n_estimators}, {"l2_leaf", c.l2_leaf},
          {"seed", c.seed}};
}

inline BaseClassifierConfig config_from_json(const nlohmann::json& j) {
  BaseClassifierConfig c;
  c.family = family_from_string(j.at("family").get<std::string>());
  c.C = j.at("C").get<double>();
  c.max_iterations = j.at("max_iterations").get<int>();
  c.tolerance = j.at("tolerance").get<double>();
  c.max_depth = j.at("max_depth").get<int>();
  c.min_samples_split = j.at("min_samples_split").get<int>();
  c.min_samples_leaf = j.at("min_samples_leaf").get<int>();
  c.failure_weight = j.at("failure_weight").get<double>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.n_estimators = j.at("n_estimators").get<int>();
  c.l2_leaf = j.at("l2_leaf").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual double predict_proba(std::span<const double> x) const = 0;
  virtual Family family() const = 0;
  virtual std::size_t dim() const = 0;
  virtual nlohmann::json to_json() const = 0;
};

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline std::vector<double> class_weights(const Dataset& d, double failure_weight) {
  std::vector<double> w(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) w[i] = d.y[i] == 1 ? failure_weight : 1.0;
  return w;
}

inline void check_trainable(const Dataset& d) {
  d.validate();
  if (d.size() == 0) throw data_error("cannot train on an empty dataset");
  const auto pos = d.positives();
  if (pos == 0 || pos == d.size()) throw data_error("training data contains a single class");
}

// ---------------------------------------------------------------------------
// Logistic regression

class LogisticModel final : public Classifier {
 public:
  LogisticModel(std::vector<double> coef, double intercept, int iterations)
      : coef_(std::move(coef)), intercept_(intercept), iterations_(iterations) {}

  double predict_proba(std::span<const double> x) const override {
    double z = intercept_;
    for (std::size_t i = 0; i < coef_.size(); ++i) z += coef_[i] * x[i];
    return sigmoid(z);
  }
  Family family() const override { return Family::Logistic; }
  std::size_t dim() const override { return coef_.size(); }
  int iterations() const { return iterations_; }
  const std::vector<double>& coefficients() const { return coef_; }
  double intercept() const { return intercept_; }

  nlohmann::json to_json() const override {
    return {{"family", to_string(Family::Logistic)}, {"coef", coef_}, {"intercept", intercept_},
            {"iterations", iterations_}};
  }

 private:
  std::vector<double> coef_;
  double intercept_;
  int iterations_;
};

// Minimizes  sum_i w_i * logloss_i / sum_i w_i + ||beta||^2 / (2 C n)
// by batch gradient descent with step 1/L, L an upper bound on the
// gradient's Lipschitz constant from power iteration. Stops when the
// gradient norm drops below the tolerance or after max_iterations.
inline std::unique_ptr<LogisticModel> train_logistic(const BaseClassifierConfig& cfg, const Dataset& data) {
  const std::size_t n = data.size(), d = data.dim();
  const auto w = class_weights(data, cfg.failure_weight);
  const double wsum = std::accumulate(w.begin(), w.end(), 0.0);
  const double lambda = 1.0 / (cfg.C * static_cast<double>(n));

  // Power iteration for the top eigenvalue of [X 1]^T W [X 1] / wsum.
  std::vector<double> v(d + 1, 1.0 / std::sqrt(static_cast<double>(d + 1))), mv(d + 1);
  double eig = 1.0;
  for (int it = 0; it < 50; ++it) {
    std::fill(mv.begin(), mv.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double t = v[d];
      for (std::size_t j = 0; j < d; ++j) t += data.x[i][j] * v[j];
      t *= w[i] / wsum;
      for (std::size_t j = 0; j < d; ++j) mv[j] += t * data.x[i][j];
      mv[d] += t;
    }
    double norm = 0.0;
    for (double m : mv) norm += m * m;
    norm = std::sqrt(norm);
    if (norm == 0.0) break;
    eig = norm;
    for (std::size_t j = 0; j <= d; ++j) v[j] = mv[j] / norm;
  }
  // Power iteration approaches the top eigenvalue from below; pad it.
  const double lipschitz = 0.25 * eig * 1.05 + lambda;
  const double step = 1.0 / lipschitz;

  std::vector<double> beta(d, 0.0), grad(d + 1);
  double b0 = 0.0;
  int it = 0;
  for (; it < cfg.max_iterations; ++it) {
    std::fill(grad.begin(), grad.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double z = b0;
      for (std::size_t j = 0; j < d; ++j) z += beta[j] * data.x[i][j];
      const double r = w[i] * (sigmoid(z) - data.y[i]) / wsum;
      for (std::size_t j = 0; j < d; ++j) grad[j] += r * data.x[i][j];
      grad[d] += r;
    }
    double gnorm = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      grad[j] += lambda * beta[j];
      gnorm += grad[j] * grad[j];
    }
    gnorm = std::sqrt(gnorm + grad[d] * grad[d]);
    if (gnorm < cfg.tolerance) break;
    for (std::size_t j = 0; j < d; ++j) beta[j] -= step * grad[j];
    b0 -= step * grad[d];
  }
  return std::make_unique<LogisticModel>(std::move(beta), b0, it);
}

// ---------------------------------------------------------------------------
// Trees

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double value = 0.0;  // leaf output
};

struct Tree {
  std::vector<TreeNode> nodes;

  double predict(std::span<const double> x) const {
    int i = 0;
    while (nodes[i].feature >= 0) i = x[nodes[i].feature] <= nodes[i].threshold ? nodes[i].left : nodes[i].right;
    return nodes[i].value;
  }

  nlohmann::json to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& n : nodes) arr.push_back({n.feature, n.threshold, n.left, n.right, n.value});
    return arr;
  }
  static Tree from_json(const nlohmann::json& j) {
    Tree t;
    for (const auto& n : j)
      t.nodes.push_back({n.at(0).get<int>(), n.at(1).get<double>(), n.at(2).get<int>(), n.at(3).get<int>(),
                         n.at(4).get<double>()});
    return t;
  }
};

struct TreeParams {
  int max_depth = 6;
  int min_samples_split = 2;
  int min_samples_leaf = 1;
  std::size_t max_features = 0;  // 0 = all features
  bool random_thresholds = false;
};

namespace detail {

// Per-sample statistics the split criterion maximizes over:
// gain = GL^2/(HL+l) + GR^2/(HR+l) - G^2/(H+l).
// Classification trees use g = w*y, h = w (weighted Gini in disguise), and
// regression trees for boosting pass gradient/hessian sums.
struct SplitStats {
  std::span<const double> g;
  std::span<const double> h;
  double lambda = 0.0;
};

struct SplitChoice {
  int feature = -1;
  double threshold = 0.0;
  double gain = 0.0;
};

class TreeBuilder {
 public:
  TreeBuilder(const std::vector<std::vector<double>>& x, SplitStats stats, const TreeParams& params,
              CounterRng* rng, std::function<double(std::span<const std::size_t>)> leaf_value)
      : x_(x), s_(stats), p_(params), rng_(rng), leaf_value_(std::move(leaf_value)) {}

  Tree build(std::vector<std::size_t> rows) {
    Tree t;
    grow(t, rows, 0);
    return t;
  }

 private:
  double score(double g, double h) const { return h + s_.lambda > 0 ? g * g / (h + s_.lambda) : 0.0; }

  int grow(Tree& t, std::vector<std::size_t>& rows, int depth) {
    const int id = static_cast<int>(t.nodes.size());
    t.nodes.push_back({});
    SplitChoice best;
    if (depth < p_.max_depth && rows.size() >= static_cast<std::size_t>(p_.min_samples_split) &&
        rows.size() >= 2 * static_cast<std::size_t>(p_.min_samples_leaf))
      best = find_split(rows);
    if (best.feature < 0) {
      t.nodes[id].value = leaf_value_(rows);
      return id;
    }
    std::vector<std::size_t> left, right;
    for (auto r : rows) (x_[r][best.feature] <= best.threshold ? left : right).push_back(r);
    rows.clear();
    rows.shrink_to_fit();
    t.nodes[id].feature = best.feature;
    t.nodes[id].threshold = best.threshold;
    const int l = grow(t, left, depth + 1);
    const int r = grow(t, right, depth + 1);
    t.nodes[id].left = l;
    t.nodes[id].right = r;
    return id;
  }

  std::vector<int> candidate_features() {
    const int d = static_cast<int>(x_.front().size());
    std::vector<int> feats(d);
    std::iota(feats.begin(), feats.end(), 0);
    if (p_.max_features == 0 || p_.max_features >= static_cast<std::size_t>(d) || !rng_) return feats;
    for (std::size_t i = 0; i < p_.max_features; ++i)
      std::swap(feats[i], feats[i + rng_->uniform(static_cast<std::uint64_t>(d) - i)]);
    feats.resize(p_.max_features);
    return feats;
  }

  SplitChoice find_split(const std::vector<std::size_t>& rows) {
    double G = 0, H = 0;
    for (auto r : rows) {
      G += s_.g[r];
      H += s_.h[r];
    }
    const double parent = score(G, H);
    const std::size_t min_leaf = static_cast<std::size_t>(std::max(1, p_.min_samples_leaf));
    SplitChoice best;
    constexpr double kMinGain = 1e-12;

    std::vector<std::pair<double, std::size_t>> vals(rows.size());
    for (int f : candidate_features()) {
      if (p_.random_thresholds) {
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (auto r : rows) {
          lo = std::min(lo, x_[r][f]);
          hi = std::max(hi, x_[r][f]);
        }
        if (!(hi > lo)) continue;
        double thr = lo + (hi - lo) * rng_->unit();
        if (thr >= hi) thr = lo;
        double GL = 0, HL = 0;
        std::size_t nl = 0;
        for (auto r : rows)
          if (x_[r][f] <= thr) {
            GL += s_.g[r];
            HL += s_.h[r];
            ++nl;
          }
        if (nl < min_leaf || rows.size() - nl < min_leaf) continue;
        const double gain = score(GL, HL) + score(G - GL, H - HL) - parent;
        if (gain > best.gain + kMinGain) best = {f, thr, gain};
        continue;
      }
      for (std::size_t i = 0; i < rows.size(); ++i) vals[i] = {x_[rows[i]][f], rows[i]};
      std::sort(vals.begin(), vals.end());
      if (!(vals.back().first > vals.front().first)) continue;
      double GL = 0, HL = 0;
      for (std::size_t i = 0; i + 1 < vals.size(); ++i) {
        GL += s_.g[vals[i].second];
        HL += s_.h[vals[i].second];
        const std::size_t nl = i + 1;
        if (vals[i].first == vals[i + 1].first) continue;
        if (nl < min_leaf || vals.size() - nl < min_leaf) continue;
        const double gain = score(GL, HL) + score(G - GL, H - HL) - parent;
        if (gain > best.gain + kMinGain) {
          double thr = vals[i].first + (vals[i + 1].first - vals[i].first) / 2;
          if (!(thr < vals[i + 1].first)) thr = vals[i].first;
          best = {f, thr, gain};
        }
      }
    }
    return best;
  }

  const std::vector<std::vector<double>>& x_;
  SplitStats s_;
  TreeParams p_;
  CounterRng* rng_;
  std::function<double(std::span<const std::size_t>)> leaf_value_;
};

}  // namespace detail

// Averages per-tree leaf probabilities.
class ForestModel final : public Classifier {
 public:
  ForestModel(Family family, std::size_t dim, std::vector<Tree> trees)
      : family_(family), dim_(dim), trees_(std::move(trees)) {}

  double predict_proba(std::span<const double> x) const override {
    double s = 0;
    for (const auto& t : trees_) s += t.predict(x);
    return s / static_cast<double>(trees_.size());
  }
  Family family() const override { return family_; }
  std::size_t dim() const override { return dim_; }
  std::size_t tree_count() const { return trees_.size(); }

  nlohmann::json to_json() const override {
    nlohmann::json trees = nlohmann::json::array();
    for (const auto& t : trees_) trees.push_back(t.to_json());
    return {{"family", to_string(family_)}, {"dim", dim_}, {"trees", trees}};
  }

 private:
  Family family_;
  std::size_t dim_;
  std::vector<Tree> trees_;
};

// Random forest: each tree sees a bootstrap sample drawn with probability
// proportional to class weight, sqrt(d) features per split.
// Extra trees: full sample, weighted impurity, random thresholds.
inline std::unique_ptr<ForestModel> train_forest(const BaseClassifierConfig& cfg, const Dataset& data) {
  const std::size_t n = data.size(), d = data.dim();
  const auto w = class_weights(data, cfg.failure_weight);
  const bool extra = cfg.family == Family::ExtraTrees;
  TreeParams params{cfg.max_depth, cfg.min_samples_split, cfg.min_samples_leaf,
                    std::max<std::size_t>(1, static_cast<std::size_t>(std::sqrt(static_cast<double>(d)))), extra};

  // Cumulative weights for the weighted bootstrap.
  std::vector<double> cum(n);
  std::partial_sum(w.begin(), w.end(), cum.begin());

  std::vector<Tree> trees;
  trees.reserve(cfg.n_estimators);
  for (int t = 0; t < cfg.n_estimators; ++t) {
    CounterRng rng(cfg.seed, "tree/" + std::to_string(t));
    std::vector<double> g(n, 0.0), h(n, 0.0);
    std::vector<std::size_t> rows;
    if (extra) {
      rows.resize(n);
      std::iota(rows.begin(), rows.end(), 0);
      for (std::size_t i = 0; i < n; ++i) {
        h[i] = w[i];
        g[i] = w[i] * data.y[i];
      }
    } else {
      rows.reserve(n);
      std::vector<double> mult(n, 0.0);
      for (std::size_t k = 0; k < n; ++k) {
        const double u = rng.unit() * cum.back();
        const std::size_t r = static_cast<std::size_t>(std::upper_bound(cum.begin(), cum.end(), u) - cum.begin());
        const std::size_t row = std::min(r, n - 1);
        if (mult[row] == 0.0) rows.push_back(row);
        mult[row] += 1.0;
      }
      std::sort(rows.begin(), rows.end());
      for (std::size_t i = 0; i < n; ++i) {
        h[i] = mult[i];
        g[i] = mult[i] * data.y[i];
      }
    }
    // Gini gain equals the G^2/H criterion with g = weight * label, h = weight.
    detail::SplitStats stats{g, h, 0.0};
    auto leaf = [&](std::span<const std::size_t> rs) {
      double gs = 0, hs = 0;
      for (auto r : rs) {
        gs += g[r];
        hs += h[r];
      }
      return hs > 0 ? gs / hs : 0.0;
    };
    detail::TreeBuilder builder(data.x, stats, params, &rng, leaf);
    trees.push_back(builder.build(rows));
  }
  return std::make_unique<ForestModel>(cfg.family, d, std::move(trees));
}

// ---------------------------------------------------------------------------
// Boosting

class BoostedModel final : public Classifier {
 public:
  BoostedModel(Family family, std::size_t dim, double base, double learning_rate, std::vector<Tree> trees)
      : family_(family), dim_(dim), base_(base), lr_(learning_rate), trees_(std::move(trees)) {}

  double margin(std::span<const double> x) const {
    double f = base_;
    for (const auto& t : trees_) f += lr_ * t.predict(x);
    return f;
  }
  double predict_proba(std::span<const double> x) const override { return sigmoid(margin(x)); }
  Family family() const override { return family_; }
  std::size_t dim() const override { return dim_; }

  nlohmann::json to_json() const override {
    nlohmann::json trees = nlohmann::json::array();
    for (const auto& t : trees_) trees.push_back(t.to_json());
    return {{"family", to_string(family_)}, {"dim", dim_}, {"base", base_}, {"learning_rate", lr_}, {"trees", trees}};
  }

 private:
  Family family_;
  std::size_t dim_;
  double base_;
  double lr_;
  std::vector<Tree> trees_;
};

// Binary log-loss boosting from the weighted log-odds prior.
//   gradient_boosting:   trees split on weighted residual variance; leaves
//                        take the Newton step sum(w r) / sum(w p (1-p)).
//   xgb_style_boosting:  splits and leaves both use second-order statistics
//                        with an L2 leaf penalty: leaf = -G / (H + lambda).
inline std::unique_ptr<BoostedModel> train_boosting(const BaseClassifierConfig& cfg, const Dataset& data) {
  const std::size_t n = data.size(), d = data.dim();
  const auto w = class_weights(data, cfg.failure_weight);
  double wpos = 0, wsum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    wsum += w[i];
    wpos += w[i] * data.y[i];
  }
  const double prior = std::clamp(wpos / wsum, 1e-12, 1 - 1e-12);
  const double base = std::log(prior / (1 - prior));
  const bool second_order = cfg.family == Family::XgbBoosting;
  TreeParams params{cfg.max_depth, cfg.min_samples_split, cfg.min_samples_leaf, 0, false};

  std::vector<double> f(n, base), sg(n), sh(n), lg(n), lh(n);
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  std::vector<Tree> trees;
  trees.reserve(cfg.n_estimators);
  for (int t = 0; t < cfg.n_estimators; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      const double p = sigmoid(f[i]);
      const double resid = data.y[i] - p;          // negative gradient
      lg[i] = w[i] * resid;
      lh[i] = w[i] * p * (1 - p);
      if (second_order) {
        sg[i] = lg[i];
        sh[i] = lh[i];
      } else {
        sg[i] = w[i] * resid;
        sh[i] = w[i];
      }
    }
    const double lambda = second_order ? cfg.l2_leaf : 0.0;
    detail::SplitStats stats{sg, sh, lambda};
    auto leaf = [&](std::span<const std::size_t> rs) {
      double gs = 0, hs = 0;
      for (auto r : rs) {
        gs += lg[r];
        hs += lh[r];
      }
      const double denom = hs + lambda;
      return denom > 1e-150 ? gs / denom : 0.0;
    };
    detail::TreeBuilder builder(data.x, stats, params, nullptr, leaf);
    Tree tree = builder.build(all);
    for (std::size_t i = 0; i < n; ++i) f[i] += cfg.learning_rate * tree.predict(data.x[i]);
    trees.push_back(std::move(tree));
  }
  return std::make_unique<BoostedModel>(cfg.family, d, base, cfg.learning_rate, std::move(trees));
}

// ---------------------------------------------------------------------------

inline std::unique_ptr<Classifier> train_base(const BaseClassifierConfig& cfg, const Dataset& data) {
  check_trainable(data);
  switch (cfg.family) {
    case Family::Logistic: return train_logistic(cfg, data);
    case Family::RandomForest:
    case Family::ExtraTrees: return train_forest(cfg, data);
    case Family::GradientBoosting:
    case Family::XgbBoosting: return train_boosting(cfg, data);
  }
  throw usage_error("unknown classifier family");
}

inline std::unique_ptr<Classifier> classifier_from_json(const nlohmann::json& j) {
  const Family fam = family_from_string(j.at("family").get<std::string>());
  auto trees_of = [&] {
    std::vector<Tree> trees;
    for (const auto& t : j.at("trees")) trees.push_back(Tree::from_json(t));
    return trees;
  };
  switch (fam) {
    case Family::Logistic:
      return std::make_unique<LogisticModel>(j.at("coef").get<std::vector<double>>(), j.at("intercept").get<double>(),
                                             j.at("iterations").get<int>());
    case Family::RandomForest:
    case Family::ExtraTrees: return std::make_unique<ForestModel>(fam, j.at("dim").get<std::size_t>(), trees_of());
    case Family::GradientBoosting:
    case Family::XgbBoosting:
      return std::make_unique<BoostedModel>(fam, j.at("dim").get<std::size_t>(), j.at("base").get<double>(),
                                            j.at("learning_rate").get<double>(), trees_of());
  }
  throw data_error("unknown classifier family");
}

}  // namespace lnup::failpred
