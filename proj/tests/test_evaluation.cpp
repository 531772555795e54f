#include <cmath>
#include <fstream>
#include <random>

#include "doctest.h"
#include "neuroens/evaluation.hpp"
#include "test_util.hpp"

using namespace neuroens;

namespace {

double pair_count_auc(const std::vector<double>& s, const std::vector<int>& y, int pos) {
  double wins = 0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != pos) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] == pos) continue;
      ++pairs;
      if (s[i] > s[j]) wins += 1;
      else if (s[i] == s[j]) wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

struct Instance {
  std::vector<double> scores;
  std::vector<int> labels;
};

Instance random_instance(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> len(2, 200);
  std::bernoulli_distribution coarse(0.5);
  Instance in;
  const int n = len(rng);
  const bool tied = coarse(rng);
  std::uniform_real_distribution<double> u(0, 1);
  std::uniform_int_distribution<int> level(0, 7);
  for (int i = 0; i < n; ++i) {
    in.scores.push_back(tied ? level(rng) / 8.0 : u(rng));
    in.labels.push_back(u(rng) < 0.5 ? 1 : 0);
  }
  in.labels[0] = 1;
  in.labels[1] = 0;
  return in;
}

}  // namespace

TEST_CASE("confusion counts") {
  std::vector<int> actual{1, 1, 1, 0, 0};
  CHECK(confusion(actual, actual, 1) == ConfusionCounts{3, 2, 0, 0});
  std::vector<int> all_pos(5, 1);
  CHECK(confusion(all_pos, actual, 1) == ConfusionCounts{3, 0, 2, 0});
  std::vector<int> inverted{0, 0, 0, 1, 1};
  CHECK(confusion(inverted, actual, 1) == ConfusionCounts{0, 0, 2, 3});
  std::vector<int> shorter{1};
  CHECK(error_code_of([&] { confusion(shorter, actual, 1); }) == ErrorCode::LengthMismatch);
  CHECK(error_code_of([] { confusion({}, {}, 1); }) == ErrorCode::Empty);
}

TEST_CASE("metric formulas on hand values") {
  ConfusionCounts c{5, 3, 1, 1};
  CHECK(*accuracy(c) == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(*precision(ConfusionCounts{9, 0, 1, 0}) == doctest::Approx(0.9).epsilon(1e-15));
  CHECK_FALSE(recall(ConfusionCounts{0, 4, 2, 0}).has_value());
  CHECK_FALSE(precision(ConfusionCounts{0, 4, 0, 2}).has_value());
  CHECK_FALSE(accuracy(ConfusionCounts{}).has_value());
  CHECK(*accuracy(ConfusionCounts{4, 3, 0, 0}) == 1.0);
}

TEST_CASE("metric formulas over every small confusion matrix") {
  for (std::size_t tp = 0; tp <= 6; ++tp)
    for (std::size_t tn = 0; tn <= 6; ++tn)
      for (std::size_t fp = 0; fp <= 6; ++fp)
        for (std::size_t fn = 0; fn <= 6; ++fn) {
          ConfusionCounts c{tp, tn, fp, fn};
          const double n = double(tp + tn + fp + fn);
          auto a = accuracy(c), p = precision(c), r = recall(c);
          CHECK(a.has_value() == (n > 0));
          CHECK(p.has_value() == (tp + fp > 0));
          CHECK(r.has_value() == (tp + fn > 0));
          if (a) CHECK(std::abs(*a - double(tp + tn) / n) <= 1e-12);
          if (p) CHECK(std::abs(*p * double(tp + fp) - double(tp)) <= 1e-12);
          if (r) CHECK(std::abs(*r * double(tp + fn) - double(tp)) <= 1e-12);
          for (auto v : {a, p, r})
            if (v) CHECK((*v >= 0.0 && *v <= 1.0));
        }
}

TEST_CASE("ROC curve shape") {
  std::vector<double> s{0.1, 0.4, 0.35, 0.8};
  std::vector<int> y{0, 0, 1, 1};
  auto curve = roc_curve(s, y, 1);
  REQUIRE(curve.points.size() == 5);
  CHECK(curve.points.front() == RocPoint{0, 0});
  CHECK(curve.points.back() == RocPoint{1, 1});
  CHECK(curve.points[1] == RocPoint{0, 0.5});
  CHECK(curve.points[2] == RocPoint{0.5, 0.5});
  CHECK(curve.points[3] == RocPoint{0.5, 1});
  CHECK(auc(curve) == 0.75);
  CHECK(curve.thresholds == std::vector<double>{0.8, 0.4, 0.35, 0.1});

  std::vector<double> constant(6, 0.3);
  std::vector<int> mixed{1, 0, 1, 0, 0, 1};
  auto flat = roc_curve(constant, mixed, 1);
  CHECK(flat.points == std::vector<RocPoint>{{0, 0}, {1, 1}});
  CHECK(auc(flat) == 0.5);

  std::vector<double> sep{0.9, 0.1, 0.8, 0.2, 0.3, 0.7};
  auto perfect = roc_curve(sep, mixed, 1);
  bool corner = false;
  for (auto p : perfect.points) corner |= p == RocPoint{0, 1};
  CHECK(corner);
  CHECK(auc(perfect) == 1.0);
  for (auto& v : sep) v = -v;
  CHECK(auc(roc_curve(sep, mixed, 1)) == 0.0);

  std::vector<int> one_class(6, 1);
  CHECK(error_code_of([&] { roc_curve(constant, one_class, 1); }) == ErrorCode::OneClassOnly);
}

TEST_CASE("AUC agrees with pair counting, monotone transforms and label inversion") {
  std::mt19937_64 rng(2024);
  double worst = 0;
  for (int trial = 0; trial < 500; ++trial) {
    auto in = random_instance(rng);
    auto curve = roc_curve(in.scores, in.labels, 1);
    for (std::size_t i = 1; i < curve.points.size(); ++i) {
      CHECK(curve.points[i].fpr >= curve.points[i - 1].fpr);
      CHECK(curve.points[i].tpr >= curve.points[i - 1].tpr);
    }
    const double a = auc(curve);
    worst = std::max(worst, std::abs(a - pair_count_auc(in.scores, in.labels, 1)));

    auto affine = in.scores, cubed = in.scores;
    for (auto& v : affine) v = 2 * v + 1;
    for (auto& v : cubed) v = v * v * v;
    CHECK(std::abs(auc(roc_curve(affine, in.labels, 1)) - a) <= 1e-12);
    CHECK(std::abs(auc(roc_curve(cubed, in.labels, 1)) - a) <= 1e-12);
    CHECK(std::abs(auc(roc_curve(in.scores, in.labels, 0)) - (1 - a)) <= 1e-12);
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("ROC emission") {
  TempDir dir;
  std::vector<double> s(4, 0.5);
  std::vector<int> y{0, 1, 0, 1};
  auto diag = roc_curve(s, y, 1);
  emit_roc(diag, dir / "d.csv", RocFormat::csv);
  std::ifstream in(dir / "d.csv");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(text == "fpr,tpr\n0,0\n1,1\n");

  std::mt19937_64 rng(5);
  auto inst = random_instance(rng);
  auto curve = roc_curve(inst.scores, inst.labels, 1);
  emit_roc(curve, dir / "r.csv", RocFormat::csv);
  CHECK(read_roc_csv(dir / "r.csv").points == curve.points);

  emit_roc(curve, dir / "r.svg", RocFormat::svg);
  std::ifstream svg_in(dir / "r.svg");
  std::string svg((std::istreambuf_iterator<char>(svg_in)), std::istreambuf_iterator<char>());
  // every opened element is closed in order
  std::vector<std::string> stack;
  for (std::size_t i = svg.find('<'); i != std::string::npos; i = svg.find('<', i + 1)) {
    auto close = svg.find('>', i);
    REQUIRE(close != std::string::npos);
    std::string tag = svg.substr(i + 1, close - i - 1);
    if (tag.starts_with("?")) continue;
    if (tag.ends_with("/")) continue;
    std::string name = tag.substr(tag.starts_with("/") ? 1 : 0);
    name = name.substr(0, name.find(' '));
    if (tag.starts_with("/")) {
      REQUIRE_FALSE(stack.empty());
      CHECK(stack.back() == name);
      stack.pop_back();
    } else {
      stack.push_back(name);
    }
  }
  CHECK(stack.empty());
  CHECK(svg.find("<polyline") != std::string::npos);
  CHECK(svg.find("<line") != std::string::npos);

  CHECK(error_code_of([&] { emit_roc(curve, dir / "no" / "x.csv", RocFormat::csv); }) == ErrorCode::IoFailure);
}

TEST_CASE("prediction labels and binary evaluation") {
  Prediction p{"m", 2, {0.2, 0.8, 0.6, 0.4, 0.5, 0.5, 0.1, 0.9}};
  CHECK(p.size() == 4);
  CHECK(p.labels() == std::vector<int>{1, 0, 0, 1});
  std::vector<int> actual{1, 0, 1, 1};
  auto labels = p.labels();
  auto m = evaluate_binary(p, labels, actual, 1);
  CHECK(m.counts == ConfusionCounts{2, 1, 0, 1});
  CHECK(*m.accuracy == 0.75);
  CHECK(*m.precision == 1.0);
  CHECK(*m.auc == pair_count_auc({0.8, 0.4, 0.5, 0.9}, actual, 1));
  CHECK(m.n == 4);

  std::vector<int> all_pos(4, 1);
  CHECK_FALSE(evaluate_binary(p, labels, all_pos, 1).auc.has_value());

  auto j = metrics_json("m", "AD_vs_CN", evaluate_binary(p, labels, all_pos, 1), 7);
  CHECK(j == R"({"model":"m","task":"AD_vs_CN","accuracy":0.5,"precision":1.0,"recall":0.5,"auc":null,"n":4,"seed":7})");
}

TEST_CASE("multiclass one-vs-rest with macro averages") {
  Prediction p{"m", 3, {0.7, 0.2, 0.1, 0.1, 0.8, 0.1, 0.2, 0.2, 0.6, 0.5, 0.4, 0.1}};
  std::vector<int> actual{0, 1, 2, 1};
  auto labels = p.labels();
  CHECK(labels == std::vector<int>{0, 1, 2, 0});
  auto m = evaluate_multiclass(p, labels, actual);
  REQUIRE(m.per_class.size() == 3);
  CHECK(*m.accuracy == 0.75);
  // precision: class0 1/2, class1 1/1, class2 1/1
  CHECK(*m.macro_precision == doctest::Approx((0.5 + 1 + 1) / 3).epsilon(1e-15));
  // recall: class0 1/1, class1 1/2, class2 1/1
  CHECK(*m.macro_recall == doctest::Approx((1 + 0.5 + 1) / 3).epsilon(1e-15));
  CHECK(m.macro_auc.has_value());
}
