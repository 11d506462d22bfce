#include <gtest/gtest.h>

#include <random>
#include <set>

#include "lnup/failpred.hpp"
#include "lnup/lineup.hpp"
#include "support.hpp"
#include "synthetic.hpp"

using namespace lnup;
using namespace lnup::failpred;

namespace {

Dataset labeled(std::size_t pos, std::size_t neg) {
  Dataset d;
  for (std::size_t i = 0; i < pos + neg; ++i) {
    d.x.push_back({static_cast<double>(i)});
    d.y.push_back(i < pos ? 1 : 0);
  }
  return d;
}

class Stub final : public Classifier {
 public:
  Stub(double p, std::size_t d) : p_(p), d_(d) {}
  double predict_proba(std::span<const double>) const override { return p_; }
  Family family() const override { return Family::Logistic; }
  std::size_t dim() const override { return d_; }
  nlohmann::json to_json() const override { return {}; }

 private:
  double p_;
  std::size_t d_;
};

EnsembleModel stub_ensemble(const std::vector<double>& prec, const std::vector<double>& rec, std::size_t dim = 2) {
  std::vector<Member> p, r;
  for (double v : prec) p.push_back({{}, std::make_shared<Stub>(v, dim)});
  for (double v : rec) r.push_back({{}, std::make_shared<Stub>(v, dim)});
  return EnsembleModel(p, r, Standardizer{std::vector<double>(dim, 0.0), std::vector<double>(dim, 1.0)}, 0.5);
}

EnsembleConfig small_config(std::uint64_t seed) {
  EnsembleConfig cfg;
  cfg.seed = seed;
  cfg.n_estimators = 20;
  return cfg;
}

double accuracy(const Classifier& m, const Dataset& d) {
  std::size_t ok = 0;
  for (std::size_t i = 0; i < d.size(); ++i) ok += (m.predict_proba(d.x[i]) >= 0.5) == (d.y[i] == 1);
  return double(ok) / double(d.size());
}

constexpr Family kFamilies[] = {Family::Logistic, Family::GradientBoosting, Family::ExtraTrees, Family::RandomForest,
                                Family::XgbBoosting};

}  // namespace

// ---------------------------------------------------------------------------
// Splitting and rebalancing

TEST(Split, BalancedHundred) {
  const auto s = stratified_split(labeled(50, 50), {}, 1);
  EXPECT_EQ(s.train.size(), 72u);
  EXPECT_EQ(s.val.size(), 8u);
  EXPECT_EQ(s.test.size(), 20u);
  EXPECT_EQ(s.train.positives(), 36u);
  EXPECT_EQ(s.val.positives(), 4u);
  EXPECT_EQ(s.test.positives(), 10u);
}

TEST(Split, PaperScaleSizes) {
  const auto sizes = split_sizes(244825);
  EXPECT_EQ(sizes[0], 176274u);
  EXPECT_EQ(sizes[1], 19586u);
  EXPECT_EQ(sizes[2], 48965u);
}

TEST(Split, StratificationWithinOneSample) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t pos = 20 + rng() % 400;
    const auto d = labeled(pos, 1000 - pos);
    const auto s = stratified_split(d, {}, rng());
    const double fr[3] = {0.72, 0.08, 0.20};
    const Dataset* parts[3] = {&s.train, &s.val, &s.test};
    std::size_t total = 0;
    std::set<double> seen;
    for (int k = 0; k < 3; ++k) {
      EXPECT_LE(std::abs(double(parts[k]->positives()) - fr[k] * double(pos)), 1.0);
      EXPECT_LE(std::abs(double(parts[k]->negatives()) - fr[k] * double(1000 - pos)), 1.0);
      total += parts[k]->size();
      for (const auto& x : parts[k]->x) EXPECT_TRUE(seen.insert(x[0]).second);
    }
    EXPECT_EQ(total, 1000u);
  }
}

TEST(Split, DeterministicAndErrors) {
  const auto d = labeled(30, 70);
  EXPECT_EQ(stratified_split(d, {}, 5).test.x, stratified_split(d, {}, 5).test.x);
  EXPECT_THROW(stratified_split(labeled(2, 50), {}, 1), Error);
  EXPECT_THROW(stratified_split(labeled(10, 10), {0.5, 0.5, 0.5}, 1), Error);
  EXPECT_THROW(stratified_folds(labeled(4, 50), 5, 1), Error);
}

TEST(Rebalance, PaperRatios) {
  const auto d = labeled(100, 500);
  const auto two = rebalance(d, {2.0, 7});
  EXPECT_EQ(two.positives(), 100u);
  EXPECT_EQ(two.negatives(), 200u);
  EXPECT_EQ(format_percent(100.0 * double(two.positives()) / double(two.size())), "33.3");
  const auto low = rebalance(d, {0.7, 7});
  EXPECT_EQ(low.negatives(), 70u);
  EXPECT_EQ(format_percent(100.0 * double(low.positives()) / double(low.size())), "58.8");
  EXPECT_EQ(rebalance(d, {1.5, 9}).x, rebalance(d, {1.5, 9}).x);
  EXPECT_NE(rebalance(d, {1.5, 9}).x, rebalance(d, {1.5, 10}).x);
  EXPECT_THROW(rebalance(d, {6.0, 1}), Error);
  EXPECT_THROW(rebalance(d, {0.0, 1}), Error);
}

TEST(Rebalance, CohortFailureRatesSpanPaperBands) {
  const EnsembleConfig cfg;
  const auto d = labeled(1000, 3000);
  double lo = 1, hi = 0;
  for (double r : cfg.precision_ratios) {
    const auto b = rebalance(d, {r, 1});
    const double rate = double(b.positives()) / double(b.size());
    lo = std::min(lo, rate);
    hi = std::max(hi, rate);
  }
  EXPECT_NEAR(lo, 1.0 / 3.0, 1e-3);
  EXPECT_NEAR(hi, 1.0 / 2.2, 1e-3);
  EXPECT_GE(lo, 0.33);
  EXPECT_LE(hi, 0.46);
  for (double r : cfg.recall_ratios) {
    const auto b = rebalance(d, {r, 1});
    const double rate = double(b.positives()) / double(b.size());
    EXPECT_GE(rate, 0.47);
    EXPECT_LE(rate, 0.59);
  }
}

TEST(Linspace, CohortRatiosAndGrid) {
  const EnsembleConfig cfg;
  ASSERT_EQ(cfg.precision_ratios.size(), 10u);
  EXPECT_EQ(cfg.precision_ratios.front(), 1.2);
  EXPECT_EQ(cfg.precision_ratios.back(), 2.0);
  EXPECT_NEAR(cfg.precision_ratios[1], 1.2 + 0.8 / 9, 1e-12);
  EXPECT_EQ(cfg.recall_ratios.front(), 0.7);
  EXPECT_EQ(cfg.recall_ratios.back(), 1.1);
  const auto g = threshold_grid();
  ASSERT_EQ(g.size(), 50u);
  EXPECT_EQ(g.front(), 0.25);
  EXPECT_EQ(g.back(), 0.75);
  for (std::size_t i = 1; i < g.size(); ++i) EXPECT_NEAR(g[i] - g[i - 1], 0.5 / 49, 1e-12);
}

TEST(CohortSlots, Hyperparameters) {
  const auto cfg = small_config(3);
  const auto p = cohort_slots(cfg, Objective::Precision);
  const auto r = cohort_slots(cfg, Objective::Recall);
  ASSERT_EQ(p.size(), 10u);
  std::set<Family> fams;
  for (const auto& s : p) {
    EXPECT_EQ(s.config.C, 1.0);
    EXPECT_EQ(s.config.min_samples_split, 20);
    EXPECT_EQ(s.config.min_samples_leaf, 10);
    EXPECT_EQ(s.config.failure_weight, 1.2);
    EXPECT_GE(s.config.max_depth, 3);
    EXPECT_LE(s.config.max_depth, 8);
    EXPECT_NE(s.config.family, Family::ExtraTrees);
    fams.insert(s.config.family);
  }
  EXPECT_EQ(fams.size(), 4u);
  for (const auto& s : r) {
    EXPECT_EQ(s.config.C, 0.1);
    EXPECT_EQ(s.config.min_samples_leaf, 5);
    EXPECT_EQ(s.config.learning_rate, 0.05);
    EXPECT_LE(s.config.failure_weight, 2.5);
    EXPECT_GE(s.config.max_depth, 8);
    EXPECT_LE(s.config.max_depth, 10);
    EXPECT_NE(s.config.family, Family::GradientBoosting);
  }
  EXPECT_EQ(p.front().spec.ratio, 1.2);
  EXPECT_EQ(r.back().spec.ratio, 1.1);
}

// ---------------------------------------------------------------------------
// Base classifiers

TEST(BaseClassifier, SeparableToyLogistic) {
  Dataset d;
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int i = 0; i < 200; ++i) {
    const double a = u(rng), b = u(rng);
    if (std::abs(a + b) < 0.1) continue;
    d.x.push_back({a, b});
    d.y.push_back(a + b > 0 ? 1 : 0);
  }
  BaseClassifierConfig cfg;
  cfg.C = 1e4;
  const auto m = train_base(cfg, d);
  EXPECT_EQ(accuracy(*m, d), 1.0);
}

TEST(BaseClassifier, ConstantFeaturesPredictWeightedPrior) {
  Dataset d;
  for (int i = 0; i < 400; ++i) {
    d.x.push_back({0.0, 0.0});
    d.y.push_back(i < 100 ? 1 : 0);
  }
  for (Family f : kFamilies) {
    BaseClassifierConfig cfg;
    cfg.family = f;
    cfg.failure_weight = 1.5;
    cfg.n_estimators = 30;
    cfg.seed = 2;
    const double prior = 1.5 * 100 / (1.5 * 100 + 300);
    const auto m = train_base(cfg, d);
    const double tol = f == Family::RandomForest ? 0.03 : (f == Family::Logistic ? 1e-4 : 1e-9);
    EXPECT_NEAR(m->predict_proba(std::vector<double>{0.0, 0.0}), prior, tol) << to_string(f);
  }
}

TEST(BaseClassifier, GaussianBlobsHeldOut) {
  // Means two sigma apart on each of two axes.
  testing_support::GaussianSpec spec;
  spec.n = 1500;
  const auto train = testing_support::gaussian_dataset(5, spec);
  const auto test = testing_support::gaussian_dataset(6, spec);
  for (Family f : kFamilies) {
    BaseClassifierConfig cfg;
    cfg.family = f;
    cfg.n_estimators = 50;
    cfg.max_depth = 4;
    cfg.min_samples_leaf = 10;
    cfg.seed = 8;
    const auto m = train_base(cfg, train);
    EXPECT_GE(accuracy(*m, test), 0.9) << to_string(f);
  }
}

TEST(BaseClassifier, SingleClassRejected) {
  Dataset d;
  d.x = {{1.0}, {2.0}};
  d.y = {0, 0};
  EXPECT_THROW(train_base({}, d), Error);
  d.y = {0, 2};
  EXPECT_THROW(train_base({}, d), Error);
}

TEST(BaseClassifier, JsonRoundTripPreservesPredictions) {
  testing_support::GaussianSpec spec;
  spec.n = 300;
  spec.noise = 2;
  const auto d = testing_support::gaussian_dataset(9, spec);
  for (Family f : kFamilies) {
    BaseClassifierConfig cfg;
    cfg.family = f;
    cfg.n_estimators = 10;
    const auto m = train_base(cfg, d);
    const auto back = classifier_from_json(nlohmann::json::parse(m->to_json().dump()));
    for (const auto& x : d.x) ASSERT_EQ(m->predict_proba(x), back->predict_proba(x)) << to_string(f);
  }
}

// ---------------------------------------------------------------------------
// Ensemble aggregation and thresholds

TEST(Ensemble, GeometricMeanExamples) {
  EXPECT_NEAR(geometric_mean_probability(0.64, 0.25), 0.4, 1e-15);
  for (double p : {0.0, 0.1, 0.5, 0.93, 1.0}) EXPECT_NEAR(geometric_mean_probability(p, p), p, 1e-15);
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> u(0, 1);
  for (int i = 0; i < 10000; ++i) {
    const double a = u(rng), b = u(rng);
    const double g = geometric_mean_probability(a, b);
    ASSERT_GE(g, std::min(a, b) - 1e-15);
    ASSERT_LE(g, std::max(a, b) + 1e-15);
  }
}

TEST(Ensemble, StubHarness) {
  std::vector<double> prec, rec;
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0, 1);
  for (int i = 0; i < 10; ++i) {
    prec.push_back(u(rng));
    rec.push_back(u(rng));
  }
  const auto model = stub_ensemble(prec, rec);
  double mp = 0, mr = 0;
  for (int i = 0; i < 10; ++i) {
    mp += prec[i] / 10;
    mr += rec[i] / 10;
  }
  EXPECT_NEAR(model.predict_proba_raw(std::vector<double>{3, 4}), std::sqrt(mp * mr), 1e-15);
  EXPECT_THROW(model.predict_proba_raw(std::vector<double>{1, 2, 3}), Error);
}

TEST(Ensemble, InclusiveBoundary) {
  auto model = stub_ensemble({0.42}, {0.42});
  model.set_threshold(0.42);
  EXPECT_TRUE(model.classify_raw(std::vector<double>{0, 0}));
  auto below = stub_ensemble({0.41}, {0.41});
  below.set_threshold(0.42);
  EXPECT_FALSE(below.classify_raw(std::vector<double>{0, 0}));
  const std::vector<double> p{0.42, 0.41};
  const std::vector<int> y{1, 1};
  const auto c = confusion_at(p, y, 0.42);
  EXPECT_EQ(c.tp, 1u);
  EXPECT_EQ(c.fn, 1u);
}

TEST(Threshold, SeparatedPicksLowestGridValue) {
  std::vector<double> p;
  std::vector<int> y;
  for (int i = 0; i < 20; ++i) {
    p.push_back(i < 5 ? 0.9 : 0.1);
    y.push_back(i < 5 ? 1 : 0);
  }
  const auto s = search_threshold(p, y);
  EXPECT_EQ(s.best, 0.25);
  for (const auto& m : s.metrics) EXPECT_EQ(m.f1, 1.0);
  EXPECT_TRUE(s.recall_non_increasing);
}

TEST(Threshold, MatchesExhaustiveOracle) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> p;
    std::vector<int> y;
    for (int i = 0; i < 60; ++i) {
      const int lab = u(rng) < 0.3;
      y.push_back(lab);
      p.push_back(std::clamp(0.5 + (lab ? 0.15 : -0.15) + 0.25 * (u(rng) - 0.5) * 2, 0.0, 1.0));
    }
    // Oracle: direct counting at each of the 50 grid points.
    double best_t = 0, best_s = -1e300;
    double prev_recall = 2;
    for (int k = 0; k < 50; ++k) {
      const double t = 0.25 + 0.5 * k / 49.0;
      int tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const bool pred = p[i] >= t;
        tp += pred && y[i];
        fp += pred && !y[i];
        fn += !pred && y[i];
      }
      const double prec = tp + fp ? double(tp) / (tp + fp) : 0, rec = tp + fn ? double(tp) / (tp + fn) : 0;
      const double f1 = prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0;
      const double score = prec >= 0.5 && rec >= 0.5 ? f1 : f1 - 1;
      if (score > best_s + 1e-12) {
        best_s = score;
        best_t = t;
      }
      ASSERT_LE(rec, prev_recall);
      prev_recall = rec;
    }
    const auto s = search_threshold(p, y);
    ASSERT_NEAR(s.best, best_t, 1e-12);
    ASSERT_TRUE(s.recall_non_increasing);
  }
}

TEST(Metrics, Examples) {
  EXPECT_NEAR(harmonic_f1(0.916, 0.518), 0.662, 0.0005);
  const auto perfect = metrics_from({5, 0, 5, 0});
  EXPECT_EQ(perfect.precision, 1.0);
  EXPECT_EQ(perfect.recall, 1.0);
  EXPECT_EQ(perfect.f1, 1.0);
  const auto m = metrics_from({2, 1, 0, 2});
  EXPECT_DOUBLE_EQ(m.precision, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(m.recall, 0.5);
  EXPECT_NEAR(m.f1, 4.0 / 7.0, 1e-12);
  // F1 from counts: 2TP / (2TP + FP + FN).
  std::mt19937_64 rng(13);
  for (int i = 0; i < 1000; ++i) {
    const Confusion c{rng() % 50 + 1, rng() % 50, rng() % 50, rng() % 50};
    const auto mm = metrics_from(c);
    ASSERT_NEAR(mm.f1, 2.0 * c.tp / (2.0 * c.tp + c.fp + c.fn), 1e-12);
  }
}

TEST(Metrics, CoefficientOfVariation) {
  const std::vector<double> same(5, 0.7);
  EXPECT_EQ(coefficient_of_variation(same), 0.0);
  const std::vector<double> v{0.8, 0.8, 0.8, 0.8, 1.0};
  EXPECT_NEAR(coefficient_of_variation(v), 0.08 / 0.84, 1e-12);
}

// ---------------------------------------------------------------------------
// Training end to end

TEST(TrainEnsemble, DeterministicAndSerializable) {
  testing_support::GaussianSpec spec;
  spec.n = 800;
  spec.positive_rate = 0.25;
  spec.informative = 3;
  spec.noise = 2;
  const auto data = testing_support::gaussian_dataset(14, spec);
  const auto split = stratified_split(data, {}, 1);
  const auto a = train_ensemble(split.train, split.val, small_config(21));
  auto cfg = small_config(21);
  cfg.threads = 3;
  const auto b = train_ensemble(split.train, split.val, cfg);
  const auto probe = testing_support::gaussian_dataset(15, spec);
  EXPECT_EQ(a.model.predict_all_raw(probe), b.model.predict_all_raw(probe, 2));
  EXPECT_EQ(a.model.threshold(), b.model.threshold());
  EXPECT_EQ(to_json(a.report).dump(), to_json(b.report).dump());

  const auto back = ensemble_from_json(nlohmann::json::parse(to_json(a.model).dump()));
  EXPECT_EQ(back.predict_all_raw(probe), a.model.predict_all_raw(probe));
  EXPECT_EQ(back.threshold(), a.model.threshold());
  EXPECT_EQ(a.report.members.size(), 20u);
  EXPECT_TRUE(a.report.search.recall_non_increasing);
  EXPECT_GE(a.model.threshold(), 0.25);
  EXPECT_LE(a.model.threshold(), 0.75);

  testing_support::ScratchDir dir("model");
  save_model(dir / "m.json", a.model);
  EXPECT_EQ(load_model(dir / "m.json").predict_all_raw(probe), a.model.predict_all_raw(probe));
  testing_support::spit(dir / "bad.json", "{\"format\": \"other\"}");
  EXPECT_THROW(load_model(dir / "bad.json"), Error);
}

TEST(TrainEnsemble, ThresholdOverrideEchoed) {
  testing_support::GaussianSpec spec;
  spec.n = 400;
  spec.positive_rate = 0.3;
  const auto d = testing_support::gaussian_dataset(16, spec);
  const auto s = stratified_split(d, {}, 2);
  auto cfg = small_config(1);
  cfg.threshold_override = 0.42;
  const auto t = train_ensemble(s.train, s.val, cfg);
  EXPECT_EQ(t.model.threshold(), 0.42);
  const auto j = to_json(t.model);
  EXPECT_EQ(j["threshold"].get<double>(), 0.42);
  EXPECT_EQ(j["config"]["threshold_override"].get<double>(), 0.42);
  cfg.threshold_override = 0.8;
  EXPECT_THROW(train_ensemble(s.train, s.val, cfg), Error);
}

TEST(TrainEnsemble, SeparableDataHighValidationScores) {
  testing_support::GaussianSpec spec;
  spec.n = 1500;
  spec.positive_rate = 0.3;
  spec.informative = 4;
  spec.shift = 4.0;
  const auto d = testing_support::gaussian_dataset(17, spec);
  const auto s = stratified_split(d, {}, 3);
  const auto t = train_ensemble(s.train, s.val, small_config(5));
  const auto vm = evaluate_classifier(t.model, s.val);
  EXPECT_GE(vm.precision, 0.9);
  EXPECT_GE(vm.recall, 0.9);
  const auto stab = cross_validate(small_config(5), d, 5);
  EXPECT_EQ(stab.precision.size(), 5u);
  EXPECT_LT(stab.precision_cov, 0.05);
  EXPECT_LT(stab.recall_cov, 0.05);
}
