#pragma once

// Dual-cohort failure ensemble. Ten precision-oriented and ten
// recall-oriented base classifiers are each fit on their own undersampled
// copy of the training split; the ensemble probability is the geometric mean
// of the two cohort means, and a decision threshold is picked on the
// validation split.

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lnup/core.hpp"
#include "lnup/features.hpp"
#include "lnup/failpred/dataset.hpp"
#include "lnup/failpred/metrics.hpp"
#include "lnup/failpred/models.hpp"

namespace lnup::failpred {

inline constexpr std::size_t kCohortSize = 10;
inline constexpr std::size_t kThresholdGridSize = 50;
inline constexpr double kThresholdLow = 0.25;
inline constexpr double kThresholdHigh = 0.75;
inline constexpr double kMinPrecisionRecall = 0.5;
inline constexpr int kEnsembleFormatVersion = 1;

struct EnsembleConfig {
  std::vector<double> precision_ratios = linspace(1.2, 2.0, kCohortSize);
  std::vector<double> recall_ratios = linspace(0.7, 1.1, kCohortSize);
  std::uint64_t seed = 0;
  int n_estimators = 100;
  int max_iterations = 2000;
  unsigned threads = 1;
  std::optional<double> threshold_override;
};

struct CohortSlot {
  RebalanceSpec spec;
  BaseClassifierConfig config;
};

// The four family slots of a cohort, assigned round-robin from a seeded
// offset. The second slot is gradient boosting in the precision cohort and
// extra trees in the recall cohort.
inline std::array<Family, 4> cohort_families(Objective objective) {
  return {Family::Logistic, objective == Objective::Precision ? Family::GradientBoosting : Family::ExtraTrees,
          Family::RandomForest, Family::XgbBoosting};
}

inline std::vector<CohortSlot> cohort_slots(const EnsembleConfig& cfg, Objective objective) {
  const auto& ratios = objective == Objective::Precision ? cfg.precision_ratios : cfg.recall_ratios;
  if (ratios.size() != kCohortSize) throw usage_error("each cohort needs exactly 10 rebalance ratios");
  const auto families = cohort_families(objective);
  const std::string tag = to_string(objective);
  CounterRng offset_rng(cfg.seed, "families/" + tag);
  const auto offset = offset_rng.uniform(families.size());

  std::vector<CohortSlot> slots;
  for (std::size_t i = 0; i < kCohortSize; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(kCohortSize - 1);
    CohortSlot s;
    s.spec = {ratios[i], splitmix64(cfg.seed ^ fnv1a64(tag + "/data/" + std::to_string(i))), objective};
    auto& c = s.config;
    c.family = families[(offset + i) % families.size()];
    c.seed = splitmix64(cfg.seed ^ fnv1a64(tag + "/model/" + std::to_string(i)));
    c.n_estimators = cfg.n_estimators;
    c.max_iterations = cfg.max_iterations;
    if (objective == Objective::Precision) {
      c.C = 1.0;
      c.min_samples_split = 20;
      c.min_samples_leaf = 10;
      c.failure_weight = 1.2;
      c.max_depth = 3 + static_cast<int>(std::lround(5 * t));  // 3..8
      c.learning_rate = 0.1;
    } else {
      c.C = 0.1;
      c.min_samples_split = 10;
      c.min_samples_leaf = 5;
      c.failure_weight = 1.5 + t;  // 1.5..2.5
      c.max_depth = 8 + static_cast<int>(std::lround(2 * t));  // 8..10
      c.learning_rate = 0.05;
    }
    slots.push_back(s);
  }
  return slots;
}

struct Member {
  CohortSlot slot;
  std::shared_ptr<const Classifier> model;
};

class EnsembleModel {
 public:
  EnsembleModel() = default;
  EnsembleModel(std::vector<Member> precision, std::vector<Member> recall, Standardizer standardizer,
                double threshold, nlohmann::json config_echo = {})
      : precision_(std::move(precision)),
        recall_(std::move(recall)),
        standardizer_(std::move(standardizer)),
        threshold_(threshold),
        config_echo_(std::move(config_echo)) {
    if (precision_.empty() || recall_.empty()) throw usage_error("both cohorts need at least one model");
  }

  const std::vector<Member>& precision_models() const noexcept { return precision_; }
  const std::vector<Member>& recall_models() const noexcept { return recall_; }
  const Standardizer& standardizer() const noexcept { return standardizer_; }
  const nlohmann::json& config_echo() const noexcept { return config_echo_; }
  double threshold() const noexcept { return threshold_; }
  void set_threshold(double t) { threshold_ = t; }

  // Cohort mean probabilities for a standardized vector.
  std::pair<double, double> cohort_means(std::span<const double> z) const {
    check_dim(z.size());
    auto mean = [&](const std::vector<Member>& cohort) {
      double s = 0;
      for (const auto& m : cohort) s += m.model->predict_proba(z);
      return s / static_cast<double>(cohort.size());
    };
    return {mean(precision_), mean(recall_)};
  }

  // sqrt(mean precision-cohort probability * mean recall-cohort probability)
  double predict_proba(std::span<const double> z) const {
    const auto [p, r] = cohort_means(z);
    return std::sqrt(p * r);
  }

  double predict_proba_raw(std::span<const double> raw) const {
    const auto z = standardizer_.apply(raw);
    return predict_proba(z);
  }

  bool classify(std::span<const double> z) const { return predict_proba(z) >= threshold_; }
  bool classify_raw(std::span<const double> raw) const { return predict_proba_raw(raw) >= threshold_; }

  std::vector<double> predict_all_raw(const Dataset& raw, unsigned threads = 1) const {
    std::vector<double> out(raw.size());
    parallel_for(raw.size(), threads, [&](std::size_t i) { out[i] = predict_proba_raw(raw.x[i]); });
    return out;
  }

 private:
  void check_dim(std::size_t n) const {
    const std::size_t want = precision_.front().model->dim();
    if (n != want)
      throw data_error("feature vector has " + std::to_string(n) + " values, model expects " + std::to_string(want));
  }

  std::vector<Member> precision_;
  std::vector<Member> recall_;
  Standardizer standardizer_;
  double threshold_ = 0.5;
  nlohmann::json config_echo_;
};

inline double geometric_mean_probability(double precision_mean, double recall_mean) {
  return std::sqrt(precision_mean * recall_mean);
}

// ---------------------------------------------------------------------------
// Threshold search

inline std::vector<double> threshold_grid() { return linspace(kThresholdLow, kThresholdHigh, kThresholdGridSize); }

// F1 when precision and recall both reach 0.5, F1 - 1 otherwise.
inline double threshold_score(const Metrics& m) {
  return m.precision >= kMinPrecisionRecall && m.recall >= kMinPrecisionRecall ? m.f1 : m.f1 - 1.0;
}

struct ThresholdSearch {
  std::vector<double> grid;
  std::vector<double> scores;
  std::vector<Metrics> metrics;
  double best = kThresholdLow;
  bool recall_non_increasing = true;
};

// Exhaustive search over the grid; ties go to the lowest threshold. Scores
// within kScoreTieTolerance count as ties, since equal F1 values reached from
// different counts can differ in the last bit.
inline constexpr double kScoreTieTolerance = 1e-12;

inline ThresholdSearch search_threshold(std::span<const double> proba, std::span<const int> labels) {
  if (proba.empty()) throw data_error("threshold search needs a non-empty validation set");
  ThresholdSearch s;
  s.grid = threshold_grid();
  double best_score = -INFINITY;
  for (std::size_t i = 0; i < s.grid.size(); ++i) {
    const auto m = metrics_from(confusion_at(proba, labels, s.grid[i]));
    s.metrics.push_back(m);
    s.scores.push_back(threshold_score(m));
    if (s.scores.back() > best_score + kScoreTieTolerance) {
      best_score = s.scores.back();
      s.best = s.grid[i];
    }
    if (i > 0 && m.recall > s.metrics[i - 1].recall) s.recall_non_increasing = false;
  }
  return s;
}

// `val` holds raw (unstandardized) features.
inline ThresholdSearch optimize_threshold(const EnsembleModel& model, const Dataset& val, unsigned threads = 1) {
  if (val.size() == 0) throw data_error("threshold search needs a non-empty validation set");
  const auto proba = model.predict_all_raw(val, threads);
  return search_threshold(proba, val.y);
}

inline Metrics evaluate_classifier(const EnsembleModel& model, const Dataset& test, unsigned threads = 1) {
  if (test.size() == 0) throw data_error("cannot evaluate on an empty test set");
  const auto proba = model.predict_all_raw(test, threads);
  return metrics_from(confusion_at(proba, test.y, model.threshold()));
}

// ---------------------------------------------------------------------------
// Training

struct MemberReport {
  Objective objective;
  std::size_t slot;
  Family family;
  double ratio;
  double failure_rate;  // of the rebalanced training set
  Metrics val;          // at threshold 0.5
};

struct TrainingReport {
  std::vector<MemberReport> members;
  ThresholdSearch search;
  double threshold = 0.5;
};

struct TrainedEnsemble {
  EnsembleModel model;
  TrainingReport report;
};

inline nlohmann::json to_json(const EnsembleConfig& c) {
  nlohmann::json j{{"precision_ratios", c.precision_ratios}, {"recall_ratios", c.recall_ratios}, {"seed", c.seed},
                   {"n_estimators", c.n_estimators}, {"max_iterations", c.max_iterations}};
  if (c.threshold_override) j["threshold_override"] = *c.threshold_override;
  return j;
}

// `train` and `val` hold raw features; the standardizer is fit on `train`.
inline TrainedEnsemble train_ensemble(const Dataset& train, const Dataset& val, const EnsembleConfig& cfg) {
  check_trainable(train);
  if (cfg.threshold_override && (*cfg.threshold_override < kThresholdLow || *cfg.threshold_override > kThresholdHigh))
    throw usage_error("threshold override must lie in [0.25, 0.75]");
  std::vector<FeatureVector> rows;
  rows.reserve(train.size());
  for (const auto& x : train.x) rows.push_back({ImageId{}, x});
  Standardizer scaler = fit_standardizer(rows);

  Dataset z = train;
  for (auto& x : z.x) x = scaler.apply(x);
  Dataset zval = val;
  for (auto& x : zval.x) x = scaler.apply(x);

  std::vector<CohortSlot> slots = cohort_slots(cfg, Objective::Precision);
  const auto recall_slots = cohort_slots(cfg, Objective::Recall);
  slots.insert(slots.end(), recall_slots.begin(), recall_slots.end());

  std::vector<std::shared_ptr<const Classifier>> models(slots.size());
  std::vector<double> failure_rates(slots.size());
  parallel_for(slots.size(), cfg.threads, [&](std::size_t i) {
    const Dataset part = rebalance(z, slots[i].spec);
    failure_rates[i] = static_cast<double>(part.positives()) / static_cast<double>(part.size());
    models[i] = train_base(slots[i].config, part);
  });

  std::vector<Member> prec, rec;
  TrainingReport report;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    (i < kCohortSize ? prec : rec).push_back({slots[i], models[i]});
    MemberReport mr{slots[i].spec.objective, i % kCohortSize, slots[i].config.family, slots[i].spec.ratio,
                    failure_rates[i], {}};
    if (zval.size()) {
      std::vector<double> p(zval.size());
      for (std::size_t k = 0; k < zval.size(); ++k) p[k] = models[i]->predict_proba(zval.x[k]);
      mr.val = metrics_from(confusion_at(p, zval.y, 0.5));
    }
    report.members.push_back(mr);
  }

  EnsembleModel model(std::move(prec), std::move(rec), std::move(scaler), 0.5, to_json(cfg));
  if (val.size()) {
    report.search = optimize_threshold(model, val, cfg.threads);
    model.set_threshold(report.search.best);
  }
  if (cfg.threshold_override) model.set_threshold(*cfg.threshold_override);
  report.threshold = model.threshold();
  return {std::move(model), std::move(report)};
}

// ---------------------------------------------------------------------------
// Cross-validation

struct StabilityReport {
  std::vector<double> precision;
  std::vector<double> recall;
  double precision_cov = 0;
  double recall_cov = 0;
  std::vector<ThresholdSearch> searches;  // per fold, on its validation slice
};

// Stratified k-fold: each held-out fold is scored by an ensemble trained on
// the remaining folds, whose threshold comes from a stratified 10% slice of
// those folds.
inline StabilityReport cross_validate(const EnsembleConfig& cfg, const Dataset& data, int folds = 5) {
  const auto fold = stratified_folds(data, folds, cfg.seed);
  StabilityReport out;
  for (int f = 0; f < folds; ++f) {
    std::vector<std::size_t> tr, te;
    for (std::size_t i = 0; i < data.size(); ++i) (fold[i] == f ? te : tr).push_back(i);
    const Dataset held = data.subset(te);
    const auto inner = stratified_split(data.subset(tr), {0.9, 0.1, 0.0}, splitmix64(cfg.seed + f));
    EnsembleConfig fc = cfg;
    fc.seed = splitmix64(cfg.seed ^ (0x5eedULL + static_cast<std::uint64_t>(f)));
    const auto trained = train_ensemble(inner.train, inner.val, fc);
    const auto m = evaluate_classifier(trained.model, held, cfg.threads);
    out.precision.push_back(m.precision);
    out.recall.push_back(m.recall);
    out.searches.push_back(trained.report.search);
  }
  out.precision_cov = coefficient_of_variation(out.precision);
  out.recall_cov = coefficient_of_variation(out.recall);
  return out;
}

// ---------------------------------------------------------------------------
// Model artifact (JSON):
//   {"format": "lnup.ensemble", "version": 1, "threshold": t,
//    "config": {...}, "standardizer": {"mean": [...], "std": [...]},
//    "precision": [member...], "recall": [member...]}
//   member = {"spec": {"ratio", "seed", "objective"}, "config": {...}, "model": {...}}

inline nlohmann::json member_to_json(const Member& m) {
  return {{"spec", {{"ratio", m.slot.spec.ratio}, {"seed", m.slot.spec.seed}, {"objective", to_string(m.slot.spec.objective)}}},
          {"config", to_json(m.slot.config)},
          {"model", m.model->to_json()}};
}

inline Member member_from_json(const nlohmann::json& j) {
  Member m;
  const auto& s = j.at("spec");
  m.slot.spec.ratio = s.at("ratio").get<double>();
  m.slot.spec.seed = s.at("seed").get<std::uint64_t>();
  m.slot.spec.objective = s.at("objective").get<std::string>() == "recall" ? Objective::Recall : Objective::Precision;
  m.slot.config = config_from_json(j.at("config"));
  m.model = classifier_from_json(j.at("model"));
  return m;
}

inline nlohmann::json to_json(const EnsembleModel& model) {
  nlohmann::json prec = nlohmann::json::array(), rec = nlohmann::json::array();
  for (const auto& m : model.precision_models()) prec.push_back(member_to_json(m));
  for (const auto& m : model.recall_models()) rec.push_back(member_to_json(m));
  return {{"format", "lnup.ensemble"},
          {"version", kEnsembleFormatVersion},
          {"threshold", model.threshold()},
          {"config", model.config_echo()},
          {"standardizer", {{"mean", model.standardizer().mean}, {"std", model.standardizer().stddev}}},
          {"precision", prec},
          {"recall", rec}};
}

inline EnsembleModel ensemble_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "lnup.ensemble") throw data_error("not an ensemble model artifact");
  if (j.at("version").get<int>() != kEnsembleFormatVersion)
    throw data_error("unsupported model artifact version " + std::to_string(j.at("version").get<int>()));
  std::vector<Member> prec, rec;
  for (const auto& m : j.at("precision")) prec.push_back(member_from_json(m));
  for (const auto& m : j.at("recall")) rec.push_back(member_from_json(m));
  Standardizer s{j.at("standardizer").at("mean").get<std::vector<double>>(),
                 j.at("standardizer").at("std").get<std::vector<double>>()};
  return EnsembleModel(std::move(prec), std::move(rec), std::move(s), j.at("threshold").get<double>(), j.at("config"));
}

inline void save_model(const std::filesystem::path& path, const EnsembleModel& model) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw data_error("cannot write " + path.string());
  out << to_json(model).dump() << '\n';
}

inline EnsembleModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open " + path.string());
  try {
    return ensemble_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw data_error(path.string() + ": malformed model artifact (" + e.what() + ")");
  }
}

inline nlohmann::json to_json(const Metrics& m) {
  return {{"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1},
          {"tp", m.confusion.tp}, {"fp", m.confusion.fp}, {"tn", m.confusion.tn}, {"fn", m.confusion.fn}};
}

inline nlohmann::json to_json(const TrainingReport& r) {
  nlohmann::json members = nlohmann::json::array();
  for (const auto& m : r.members)
    members.push_back({{"cohort", to_string(m.objective)}, {"slot", m.slot}, {"family", to_string(m.family)},
                       {"ratio", m.ratio}, {"failure_rate", m.failure_rate}, {"val", to_json(m.val)}});
  nlohmann::json grid = nlohmann::json::array();
  for (std::size_t i = 0; i < r.search.grid.size(); ++i)
    grid.push_back({{"threshold", r.search.grid[i]}, {"score", r.search.scores[i]},
                    {"precision", r.search.metrics[i].precision}, {"recall", r.search.metrics[i].recall},
                    {"f1", r.search.metrics[i].f1}});
  return {{"threshold", r.threshold}, {"recall_non_increasing", r.search.recall_non_increasing},
          {"grid", grid}, {"models", members}};
}

}  // namespace lnup::failpred
