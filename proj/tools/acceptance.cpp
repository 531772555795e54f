#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include <unistd.h>

#include "CLI11.hpp"
#include "neuroens/augment.hpp"
#include "neuroens/error.hpp"
#include "neuroens/evaluation.hpp"
#include "neuroens/models.hpp"
#include "neuroens/nn.hpp"
#include "neuroens/phantom.hpp"
#include "neuroens/pipeline.hpp"
#include "neuroens/preprocess.hpp"
#include "neuroens/random.hpp"
#include "neuroens/volume.hpp"

using namespace neuroens;
namespace fs = std::filesystem;
using TensorD = Tensor<double>;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Context {
  fs::path scratch;
  bool verbose = false;
};

std::string fmt(double v, int precision = 3) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

// ---- 1 ------------------------------------------------------------------------------------

Outcome shape_golden(const Context&) {
  struct Row {
    const char* name;
    std::vector<std::size_t> in, out;
  };
  const std::vector<Row> table{
      {"Input Layer", {176, 208, 3}, {176, 208, 3}},
      {"Conv Layer", {176, 208, 3}, {176, 208, 16}},
      {"Conv Layer", {176, 208, 16}, {176, 208, 16}},
      {"Max pooling Layer", {176, 208, 16}, {88, 104, 16}},
      {"Sequential Layer", {88, 104, 16}, {44, 52, 32}},
      {"Sequential Layer", {44, 52, 32}, {22, 26, 64}},
      {"Sequential Layer", {22, 26, 64}, {11, 13, 128}},
      {"Dropout Layer", {11, 13, 128}, {11, 13, 128}},
      {"Conv Layer", {11, 13, 128}, {11, 13, 256}},
      {"Conv Layer", {11, 13, 256}, {11, 13, 256}},
      {"Max pooling Layer", {11, 13, 256}, {5, 6, 256}},
      {"Dropout Layer", {5, 6, 256}, {5, 6, 256}},
      {"Flatten Layer", {5, 6, 256}, {7680}},
      {"Sequential Layer", {7680}, {512}},
      {"Sequential Layer", {512}, {128}},
      {"Sequential Layer", {128}, {64}},
      {"Sequential Layer", {64}, {32}},
      {"Dense Layer", {32}, {4}},
  };
  auto rows = row_trace(build_custom_cnn());
  if (rows.size() != table.size())
    return {false, std::to_string(rows.size()) + " rows, expected " + std::to_string(table.size())};
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto& r = rows[i];
    const Shape in(table[i].in.begin(), table[i].in.end()), out(table[i].out.begin(), table[i].out.end());
    if (r.name != table[i].name || r.in != in || r.out != out)
      return {false, "row " + std::to_string(i + 1) + " (" + r.name + ") differs"};
  }
  return {true, "18 rows match"};
}

// ---- 2 ------------------------------------------------------------------------------------

TensorD random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  TensorD t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

double dot(const TensorD& a, const TensorD& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Max relative error of `analytic` against central differences of f over every element of t.
double fd_error(TensorD& t, const TensorD& analytic, const std::function<double()>& f) {
  double worst = 0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double orig = t[i], h = 1e-5 * std::max(1.0, std::abs(orig));
    t[i] = orig + h;
    const double fp = f();
    t[i] = orig - h;
    const double fm = f();
    t[i] = orig;
    const double num = (fp - fm) / (2 * h), a = analytic[i];
    worst = std::max(worst, std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-6}));
  }
  return worst;
}

Outcome gradient_suite(const Context& ctx) {
  std::mt19937_64 rng(2024);
  std::map<std::string, double> err;

  for (auto [stride, padding, k] : {std::tuple{std::size_t(1), Padding::same, std::size_t(3)},
                                    std::tuple{std::size_t(2), Padding::valid, std::size_t(3)},
                                    std::tuple{std::size_t(1), Padding::same, std::size_t(1)}}) {
    auto x = random_tensor({2, 5, 4, 3}, rng), w = random_tensor({k, k, 3, 4}, rng), b = random_tensor({4}, rng);
    auto y = conv2d_forward(x, w, b, stride, padding);
    auto r = random_tensor(y.shape(), rng);
    auto g = conv2d_backward(x, w, r, stride, padding);
    auto f = [&] { return dot(conv2d_forward(x, w, b, stride, padding), r); };
    double e = std::max({fd_error(x, g.x, f), fd_error(w, g.w, f), fd_error(b, g.b, f)});
    err["conv2d"] = std::max(err["conv2d"], e);
  }
  {
    // well-separated values so no window has a near tie
    TensorD x({2, 6, 5, 3});
    std::vector<double> vals(x.size());
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = 0.01 * static_cast<double>(i);
    std::shuffle(vals.begin(), vals.end(), rng);
    std::copy(vals.begin(), vals.end(), x.data().begin());
    auto p = maxpool2d_forward(x, 2, 2);
    auto r = random_tensor(p.out.shape(), rng);
    auto gx = maxpool2d_backward(x.shape(), p.argmax, r);
    err["maxpool2d"] = fd_error(x, gx, [&] { return dot(maxpool2d_forward(x, 2, 2).out, r); });
  }
  {
    auto x = random_tensor({3, 6}, rng), w = random_tensor({6, 4}, rng), b = random_tensor({4}, rng);
    auto r = random_tensor({3, 4}, rng);
    auto g = dense_backward(x, w, r);
    auto f = [&] { return dot(dense_forward(x, w, b), r); };
    err["dense"] = std::max({fd_error(x, g.x, f), fd_error(w, g.w, f), fd_error(b, g.b, f)});
  }
  {
    auto x = random_tensor({4, 7}, rng);
    for (auto& v : x.data()) v = v < 0 ? v - 0.1 : v + 0.1;
    auto r = random_tensor(x.shape(), rng);
    err["relu"] = fd_error(x, relu_backward(x, r), [&] { return dot(relu_forward(x), r); });
  }
  {
    auto x = random_tensor({4, 5}, rng, -3, 3), r = random_tensor({4, 5}, rng);
    err["sigmoid"] = fd_error(x, sigmoid_backward(sigmoid_forward(x), r), [&] { return dot(sigmoid_forward(x), r); });
    err["softmax"] = fd_error(x, softmax_backward(softmax_forward(x), r), [&] { return dot(softmax_forward(x), r); });
  }
  {
    auto x = random_tensor({3, 8}, rng), r = random_tensor({3, 8}, rng);
    std::vector<double> mask;
    dropout_forward(x, 0.4, Mode::train, 17, &mask);
    TensorD g(x.shape());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = mask[i] * r[i];
    err["dropout"] = fd_error(x, g, [&] { return dot(dropout_forward(x, 0.4, Mode::train, 17), r); });
    if (!(dropout_forward(x, 0.4, Mode::eval, 17).data()[0] == x[0])) err["dropout"] = 1;
  }
  {
    auto p = random_tensor({5, 3}, rng, 0.05, 0.95);
    const std::vector<int> labels{0, 2, 1, 1, 0};
    err["cross_entropy"] = fd_error(p, cross_entropy(p, labels).grad, [&] { return cross_entropy(p, labels).loss; });
    err["binary_cross_entropy"] =
        fd_error(p, binary_cross_entropy(p, labels).grad, [&] { return binary_cross_entropy(p, labels).loss; });
  }

  struct Arch {
    const char* name;
    std::size_t h, w, classes;
  };
  for (auto a : {Arch{"custom_cnn", 176, 208, 4}, Arch{"vgg16", 44, 52, 2}, Arch{"alexnet", 176, 208, 2}}) {
    Network<double> net(build_model(a.name, {a.h, a.w, 3}, a.classes, 0.125), 7);
    auto x = random_tensor({2, a.h, a.w, 3}, rng);
    GradCheckOptions o;
    o.per_tensor = 8;
    o.seed = 3;
    err[a.name] = grad_check(net, x, {0, 1}, o);
  }

  double worst = 0;
  std::string worst_name, all;
  for (const auto& [name, e] : err) {
    if (ctx.verbose) std::cerr << "  " << name << " " << e << "\n";
    if (e >= worst) {
      worst = e;
      worst_name = name;
    }
  }
  return {worst < 1e-4, std::to_string(err.size()) + " checks, max relative error " + fmt(worst) + " (" + worst_name +
                            ")"};
}

// ---- 3 ------------------------------------------------------------------------------------

double pair_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double good = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        pairs += 1;
        good += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      }
  return good / pairs;
}

Outcome auc_oracle(const Context&) {
  std::mt19937_64 rng(31);
  double worst = 0;
  std::size_t tied = 0;
  for (int t = 0; t < 500; ++t) {
    const std::size_t n = 2 + rng() % 199;
    std::vector<double> s(n);
    std::vector<int> y(n);
    const bool ties = t % 2 == 0;
    std::uniform_real_distribution<double> u(0, 1);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = ties ? static_cast<double>(rng() % 7) / 6.0 : u(rng);
      y[i] = static_cast<int>(rng() & 1);
    }
    y[0] = 1;
    y[1] = 0;
    tied += ties;
    worst = std::max(worst, std::abs(auc(roc_curve(s, y, 1)) - pair_auc(s, y)));
  }
  const std::vector<double> constant(10, 0.3), sep{0.1, 0.2, 0.3, 0.7, 0.8};
  const std::vector<int> lab{0, 1, 0, 1, 1, 0, 1, 0, 0, 1}, sep_lab{0, 0, 0, 1, 1};
  const double c = auc(roc_curve(constant, lab, 1)), p = auc(roc_curve(sep, sep_lab, 1));
  return {worst <= 1e-12 && c == 0.5 && p == 1.0, "500 instances (" + std::to_string(tied) +
                                                       " tied), max deviation " + fmt(worst) + "; constant " +
                                                       fmt(c) + ", separated " + fmt(p)};
}

// ---- 4 ------------------------------------------------------------------------------------

Outcome metric_formulas(const Context&) {
  std::size_t cases = 0, undefined = 0, bad = 0;
  for (std::size_t tp = 0; tp <= 6; ++tp)
    for (std::size_t tn = 0; tn <= 6; ++tn)
      for (std::size_t fp = 0; fp <= 6; ++fp)
        for (std::size_t fn = 0; fn <= 6; ++fn) {
          ++cases;
          // labels that realize the counts, positive class 1
          std::vector<int> pred, act;
          auto push = [&](std::size_t n, int p, int a) {
            for (std::size_t i = 0; i < n; ++i) {
              pred.push_back(p);
              act.push_back(a);
            }
          };
          push(tp, 1, 1);
          push(tn, 0, 0);
          push(fp, 1, 0);
          push(fn, 0, 1);
          ConfusionCounts c{tp, tn, fp, fn};
          if (!pred.empty() && !(confusion(pred, act, 1) == c)) ++bad;
          auto expect = [&](std::optional<double> got, std::size_t num, std::size_t den) {
            if (den == 0) {
              undefined += !got.has_value();
              if (got) ++bad;
            } else if (!got || std::abs(*got - static_cast<double>(num) / static_cast<double>(den)) > 1e-12) {
              ++bad;
            }
          };
          expect(accuracy(c), tp + tn, tp + tn + fp + fn);
          expect(precision(c), tp, tp + fp);
          expect(recall(c), tp, tp + fn);
        }
  return {bad == 0, std::to_string(cases) + " matrices, " + std::to_string(undefined) +
                        " zero-denominator values undefined, " + std::to_string(bad) + " mismatches"};
}

// ---- 5 ------------------------------------------------------------------------------------

Prediction random_prediction(std::size_t n, std::size_t k, std::mt19937_64& rng, const std::vector<int>* force) {
  Prediction p{"m", k, std::vector<double>(n * k), {}};
  std::uniform_real_distribution<double> u(0.01, 1);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t c = 0; c < k; ++c) s += p.probs[i * k + c] = u(rng);
    if (force && (*force)[i] >= 0) {
      p.probs[i * k + (*force)[i]] = s;
      s += s;
    }
    for (std::size_t c = 0; c < k; ++c) p.probs[i * k + c] /= s;
  }
  return p;
}

Outcome voting(const Context&) {
  std::mt19937_64 rng(77);
  std::size_t median_bad = 0, samples = 0;
  for (int t = 0; t < 10000; ++t) {
    const std::size_t n = 1 + rng() % 8;
    std::vector<Prediction> ps;
    for (int m = 0; m < 3; ++m) ps.push_back(random_prediction(n, 2, rng, nullptr));
    auto vote = majority_vote(ps);
    for (std::size_t i = 0; i < n; ++i) {
      // the median of three binary votes
      std::vector<int> v;
      for (const auto& p : ps) v.push_back(p.row(i)[1] > p.row(i)[0] ? 1 : 0);
      std::sort(v.begin(), v.end());
      median_bad += vote[i] != v[1];
      ++samples;
    }
  }
  std::size_t unanimous = 0, unanimity_bad = 0;
  for (int t = 0; t < 10000; ++t) {
    const std::size_t n = 1 + rng() % 8, k = 2 + rng() % 3, m = std::array<std::size_t, 3>{1, 3, 5}[rng() % 3];
    std::vector<int> force(n, -1);
    for (auto& f : force)
      if (rng() % 2) f = static_cast<int>(rng() % k);
    std::vector<Prediction> ps;
    for (std::size_t j = 0; j < m; ++j) ps.push_back(random_prediction(n, k, rng, &force));
    auto vote = majority_vote(ps);
    for (std::size_t i = 0; i < n; ++i) {
      std::set<int> labels;
      for (const auto& p : ps) labels.insert(p.labels()[i]);
      if (labels.size() == 1) {
        ++unanimous;
        unanimity_bad += vote[i] != *labels.begin();
      }
    }
  }
  // tie-break: two voters split, then equal mean probability falls to the lowest index
  Prediction a{"a", 3, {0.2, 0.1, 0.7}, {}}, b{"b", 3, {0.6, 0.3, 0.1}, {}};
  Prediction c{"c", 2, {0.7, 0.3}, {}}, d{"d", 2, {0.3, 0.7}, {}};
  bool ties = true;
  for (int rep = 0; rep < 100; ++rep) {
    ties &= majority_vote({a, b}) == std::vector<int>{0};  // means 0.4, 0.2, 0.4 -> lowest of 0 and 2
    ties &= majority_vote({b, a}) == std::vector<int>{0};
    ties &= majority_vote({c, d}) == std::vector<int>{0};
  }
  Prediction e{"e", 3, {0.1, 0.1, 0.8}, {}};
  ties &= majority_vote({a, b, e}) == std::vector<int>{2};
  Prediction f{"f", 3, {0.15, 0.05, 0.8}, {}}, g{"g", 3, {0.5, 0.45, 0.05}, {}};
  ties &= majority_vote({f, g}) == std::vector<int>{2};  // means 0.325, 0.25, 0.425

  return {median_bad == 0 && unanimity_bad == 0 && ties,
          std::to_string(samples) + " median-voter samples, " + std::to_string(unanimous) +
              " unanimous samples, tie-break " + (ties ? "deterministic" : "WRONG")};
}

// ---- 6 ------------------------------------------------------------------------------------

Outcome registration_recovery(const Context& ctx) {
  double worst_t = 0, worst_r = 0;
  int failed = 0;
  for (int trial = 0; trial < 20; ++trial) {
    PhantomSpec spec;
    spec.seed = 1000 + trial;
    spec.jitter = false;
    spec.label = kAllClasses[trial % 4];
    auto p = generate_phantom(spec);
    const auto& fixed = p.volume;
    const auto& d = fixed.dims();
    const auto c = fixed.position((d[0] - 1) / 2.0, (d[1] - 1) / 2.0, (d[2] - 1) / 2.0);
    auto truth = compose(AffineTransform::translation_by({3.0, -1.5, 1.5}),
                         AffineTransform::rigid({0, 0, 5 * M_PI / 180}, {0, 0, 0}, c));
    auto moving = apply_transform(fixed, truth, fixed);
    auto r = register_volumes(moving, fixed, RegistrationMode::rigid);
    auto residual = compose(truth, r.transform);
    auto at = residual.apply(c);
    double t = 0;
    for (int a = 0; a < 3; ++a) t = std::max(t, std::abs(at[a] - c[a]) / spec.spacing);
    const double rot = rotation_angle_degrees(residual);
    worst_t = std::max(worst_t, t);
    worst_r = std::max(worst_r, rot);
    failed += !(t < 0.5 && rot < 1.0);
    if (ctx.verbose) std::cerr << "  trial " << trial << ": " << t << " voxel, " << rot << " deg\n";
  }
  return {failed == 0, "20 trials, worst " + fmt(worst_t) + " voxel and " + fmt(worst_r) + " deg"};
}

// ---- 7 ------------------------------------------------------------------------------------

Outcome segmentation(const Context&) {
  double worst = 1;
  std::size_t steps = 0, decreases = 0;
  for (int trial = 0; trial < 8; ++trial) {
    Volume3D v({48, 48, 24}, {1, 1, 1});
    std::mt19937_64 rng(500 + trial);
    std::normal_distribution<double> lo(30, 5), hi(200, 5);
    std::uniform_real_distribution<double> u(0, 1);
    const double prior = 0.3 + 0.05 * trial;
    for (auto& x : v.data()) x = static_cast<float>(u(rng) < prior ? hi(rng) : lo(rng));
    // equal variances: the Bayes boundary sits where prior-weighted densities meet
    const double thr = 115.0 + 25.0 / 170.0 * std::log((1 - prior) / prior);
    auto res = segment_tissues(v, 2, 900 + trial);
    std::size_t agree = 0;
    for (std::size_t i = 0; i < v.size(); ++i) agree += res.map.label(i) == (v.data()[i] > thr ? 1 : 0);
    worst = std::min(worst, static_cast<double>(agree) / static_cast<double>(v.size()));
    for (std::size_t s = 1; s < res.log_likelihood.size(); ++s, ++steps)
      decreases += res.log_likelihood[s] < res.log_likelihood[s - 1];
  }
  // overlapping components take many EM steps, which the monotonicity check needs
  for (int trial = 0; trial < 4; ++trial) {
    Volume3D v({32, 32, 16}, {1, 1, 1});
    std::mt19937_64 rng(700 + trial);
    std::normal_distribution<double> lo(30, 10), hi(55, 12);
    for (auto& x : v.data()) x = static_cast<float>(rng() % 3 ? lo(rng) : hi(rng));
    auto res = segment_tissues(v, 2, 950 + trial);
    for (std::size_t s = 1; s < res.log_likelihood.size(); ++s, ++steps)
      decreases += res.log_likelihood[s] < res.log_likelihood[s - 1];
  }
  return {worst >= 0.99 && decreases == 0, "8 threshold trials, worst agreement " + fmt(worst * 100, 5) + "%, " +
                                               std::to_string(steps) + " EM steps over 12 trials, " + std::to_string(decreases) +
                                               " decreases"};
}

// ---- 8 ------------------------------------------------------------------------------------

Outcome bias_correction(const Context&) {
  PhantomSpec spec;
  spec.seed = 88;
  spec.jitter = false;
  spec.noise_sigma = 0.0;
  auto p = generate_phantom(spec);
  const Volume3D& clean = p.volume;
  Volume3D ramped = clean;
  const auto& d = ramped.dims();
  for (std::size_t k = 0; k < d[2]; ++k)
    for (std::size_t j = 0; j < d[1]; ++j)
      for (std::size_t i = 0; i < d[0]; ++i)
        ramped.at(i, j, k) *= static_cast<float>(0.8 + 0.4 * static_cast<double>(i) / static_cast<double>(d[0] - 1));
  auto corrected = correct_bias(ramped, estimate_bias(ramped, &p.truth, 1));
  double num = 0, den = 0, before = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    if (p.truth.tissue(i) == TissueClass::background) continue;
    num += std::pow(static_cast<double>(corrected.data()[i]) - clean.data()[i], 2);
    before += std::pow(static_cast<double>(ramped.data()[i]) - clean.data()[i], 2);
    den += std::pow(static_cast<double>(clean.data()[i]), 2);
  }
  const double rel = std::sqrt(num / den), rel_before = std::sqrt(before / den);
  return {rel < 0.02, "relative RMS " + fmt(rel * 100) + "% (corrupted " + fmt(rel_before * 100) + "%)"};
}

// ---- 9 ------------------------------------------------------------------------------------

Outcome end_to_end(const Context& ctx) {
  ExperimentConfig cfg;
  PhantomDataConfig ph;
  ph.per_class = 40;
  cfg.phantom = ph;
  cfg.threads = std::max(1u, std::thread::hardware_concurrency());
  RunOptions opt;
  opt.overwrite = true;
  const auto t0 = std::chrono::steady_clock::now();
  if (ctx.verbose)
    opt.log = [t0](const std::string& line) {
      const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::cerr << "  [" << fmt(s, 4) << " s] " << line << std::endl;
    };

  std::vector<std::string> reports;
  ExperimentReport first;
  for (const char* dir : {"run_a", "run_b"}) {
    cfg.run_dir = (ctx.scratch / dir).string();
    auto rep = run_experiment(cfg, opt);
    if (reports.empty()) first = rep;
    std::ifstream in(fs::path(cfg.run_dir) / "report.json", std::ios::binary);
    reports.emplace_back(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  bool ok = first.unanimity_violations == 0 && first.error_majority_violations == 0;
  std::string acc;
  for (const auto& m : cfg.models) {
    const auto& a = first.metrics.at(m).accuracy;
    ok &= a && *a >= 0.9;
    acc += m + " " + (a ? fmt(*a) : "undefined") + ", ";
  }
  const bool same = !reports[0].empty() && reports[0] == reports[1];
  ok &= same;
  return {ok, acc + "ensemble " + fmt(first.metrics.at("ensemble").accuracy.value_or(-1)) + "; violations " +
                  std::to_string(first.unanimity_violations) + "/" +
                  std::to_string(first.error_majority_violations) + "; rerun " +
                  (same ? "byte-identical" : "DIFFERS")};
}

// ---- 10 -----------------------------------------------------------------------------------

SliceStack random_stack(std::size_t h, std::size_t w, std::mt19937_64& rng) {
  SliceStack s(h, w);
  std::uniform_real_distribution<float> u(0, 1);
  for (auto& v : s.data()) v = u(rng);
  return s;
}

Outcome augmentation_balance(const Context&) {
  std::mt19937_64 rng(10);
  const std::array<std::size_t, 4> originals{96, 89, 87, 91};
  bool ok = true;
  std::string counts;
  for (std::size_t c = 0; c < 4; ++c) {
    std::vector<SliceStack> imgs;
    for (std::size_t i = 0; i < originals[c]; ++i) imgs.push_back(random_stack(8, 8, rng));
    auto out = augment_to_target(imgs, 8352, derive_seed(10, c));
    std::vector<std::size_t> per(originals[c], 0);
    for (std::size_t i = 0; i < out.size(); ++i) {
      ++per[out[i].source];
      if (i < imgs.size()) ok &= out[i].source == i && out[i].ops.empty() && out[i].image == imgs[i];
      else ok &= !out[i].ops.empty();
    }
    const auto [lo, hi] = std::minmax_element(per.begin(), per.end());
    ok &= out.size() == 8352 && *hi - *lo <= 1;
    counts += std::to_string(out.size()) + (c < 3 ? "/" : "");
  }
  bool ident = true;
  for (int t = 0; t < 50; ++t) {
    auto s = random_stack(1 + rng() % 20, 1 + rng() % 20, rng);
    ident &= mirror(mirror(s, 'h'), 'h') == s && mirror(mirror(s, 'v'), 'v') == s;
    ident &= rotate(s, 0.0) == s && pad(s, {0, 0, 0, 0}, 0.5f) == s;
  }
  return {ok && ident, "outputs per class " + counts + ", per-original spread <= 1 " + (ok ? "yes" : "NO") +
                           ", identities " + (ident ? "bit-exact" : "BROKEN")};
}

// ---- 11 -----------------------------------------------------------------------------------

Outcome persistence(const Context& ctx) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<float> sp(0.5f, 3.0f), org(-100, 100);
  std::size_t nifti_bad = 0, ckpt_bad = 0;
  const fs::path vol_path = ctx.scratch / "trial.nii", ck_path = ctx.scratch / "trial.ckpt";
  for (int t = 0; t < 200; ++t) {
    Dims3 d{1 + rng() % 12, 1 + rng() % 12, 1 + rng() % 12};
    std::vector<float> data(d[0] * d[1] * d[2]);
    for (auto& v : data) {
      // arbitrary finite bit patterns
      std::uint32_t bits;
      float f;
      do {
        bits = static_cast<std::uint32_t>(rng());
        std::memcpy(&f, &bits, 4);
      } while (!std::isfinite(f));
      v = f;
    }
    Volume3D v(d, {sp(rng), sp(rng), sp(rng)}, {org(rng), org(rng), org(rng)}, data);
    write_nifti(v, vol_path);
    auto back = read_nifti(vol_path);
    nifti_bad += !(back.dims() == v.dims() && back.spacing() == v.spacing() && back.size() == v.size() &&
                   std::memcmp(back.data().data(), v.data().data(), v.size() * sizeof(float)) == 0);

    NetworkSpec spec;
    spec.name = "trial";
    spec.input = {4 + rng() % 8, 4 + rng() % 8, 1 + rng() % 3};
    spec.num_classes = 2 + rng() % 3;
    spec.layers = {LayerSpec::conv(1 + rng() % 6, 3), LayerSpec::activation(LayerKind::relu), LayerSpec::maxpool(),
                   LayerSpec::flatten(), LayerSpec::dense(spec.num_classes),
                   LayerSpec::activation(LayerKind::softmax)};
    Network<float> net(spec, rng());
    TrainingMetadata meta{rng(), rng() % 100, static_cast<int>(rng() % 50), {{"val_accuracy", org(rng)}}};
    save_checkpoint(net, meta, ck_path);
    auto ck = load_checkpoint(ck_path);
    const auto a = net.flat_parameters(), b = ck.network.flat_parameters();
    ckpt_bad += !(ck.network.spec() == spec && ck.metadata == meta && a.size() == b.size() &&
                  std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
  }

  std::size_t split_bad = 0;
  for (int t = 0; t < 1000; ++t) {
    DatasetManifest m;
    const std::size_t subjects = 8 + rng() % 60;
    for (std::size_t s = 0; s < subjects; ++s) {
      const std::string id = "s" + std::to_string(s);
      const auto label = kAllClasses[rng() % 4];
      m.add({id + ".nii", label, id, Provenance::original, ""});
      for (std::size_t k = rng() % 4; k > 0; --k)
        m.add({id + "_" + std::to_string(k) + ".nii", label, id, Provenance::augmented, "mirror:h"});
    }
    auto atomic = [&](const std::vector<std::vector<std::size_t>>& groups) {
      std::map<std::string, std::size_t> owner;
      std::vector<int> seen(m.size(), 0);
      for (std::size_t g = 0; g < groups.size(); ++g)
        for (auto i : groups[g]) {
          ++seen[i];
          if (owner.emplace(m[i].subject_id, g).first->second != g) return false;
        }
      return std::all_of(seen.begin(), seen.end(), [](int c) { return c == 1; });
    };
    auto plan = split_dataset(m, {0.6, 0.2, 0.2}, rng());
    auto folds = kfold(m, 8, rng());
    auto fs = fold_split(m, folds, rng() % 8);
    split_bad += !atomic({plan.train, plan.val, plan.test}) + !atomic(folds.folds) + !atomic({fs.train, fs.val, fs.test});
  }
  return {nifti_bad + ckpt_bad + split_bad == 0,
          "200 NIfTI (" + std::to_string(nifti_bad) + " bad), 200 checkpoints (" + std::to_string(ckpt_bad) +
              " bad), 1000 manifests x 3 plans (" + std::to_string(split_bad) + " bad)"};
}

struct Criterion {
  int id;
  const char* name;
  double budget_s;
  Outcome (*run)(const Context&);
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks; prints one PASS/FAIL line per criterion."};
  std::vector<int> only, skip;
  Context ctx;
  bool keep = false;
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  app.add_option("--skip", skip, "Skip these criteria")->delimiter(',');
  app.add_flag("--verbose,-v", ctx.verbose, "Progress detail on stderr");
  app.add_flag("--keep", keep, "Keep the scratch directory");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria{
      {1, "shape golden test", 1, shape_golden},
      {2, "gradient suite", 60, gradient_suite},
      {3, "AUC oracle", 10, auc_oracle},
      {4, "metric formulas", 5, metric_formulas},
      {5, "voting properties", 5, voting},
      {6, "registration recovery", 120, registration_recovery},
      {7, "segmentation", 60, segmentation},
      {8, "bias correction", 30, bias_correction},
      {9, "end-to-end synthetic experiment", 1800, end_to_end},
      {10, "augmentation balancing", 60, augmentation_balance},
      {11, "persistence", 30, persistence},
  };

  ctx.scratch = fs::temp_directory_path() / ("neuroens_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(ctx.scratch);
  int failed = 0, ran = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    if (std::find(skip.begin(), skip.end(), c.id) != skip.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run(ctx);
    } catch (const Error& e) {
      o = {false, error_json(e)};
    } catch (const std::exception& e) {
      o = {false, e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs <= c.budget_s;
    const bool pass = o.pass && in_time;
    ++ran;
    failed += !pass;
    char head[96];
    std::snprintf(head, sizeof head, "%s %2d  %-32s %8.2f s / %g s", pass ? "PASS" : "FAIL", c.id, c.name, secs,
                  c.budget_s);
    std::cout << head << "  " << o.detail << (in_time ? "" : "  [over time budget]") << std::endl;
  }
  std::cout << ran - failed << "/" << ran << " criteria passed" << std::endl;
  if (!keep) {
    std::error_code ec;
    fs::remove_all(ctx.scratch, ec);
  }
  return failed ? 1 : 0;
}
