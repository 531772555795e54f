#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include "doctest.h"
#include "neuroens/pipeline.hpp"
#include "test_util.hpp"

using namespace neuroens;

namespace {

DatasetManifest make_manifest(std::size_t subjects, std::mt19937_64* rng = nullptr, std::size_t max_twins = 0) {
  DatasetManifest m;
  for (std::size_t s = 0; s < subjects; ++s) {
    const std::string id = "S" + std::to_string(s);
    const auto label = kAllClasses[s % 4];
    m.add({id + ".nii", label, id, Provenance::original, ""});
    const std::size_t twins = rng ? (*rng)() % (max_twins + 1) : 0;
    for (std::size_t t = 0; t < twins; ++t)
      m.add({id + "_aug" + std::to_string(t) + ".nii", label, id, Provenance::augmented, "mirror:h"});
  }
  return m;
}

std::size_t subject_count(const DatasetManifest& m, const std::vector<std::size_t>& idx) {
  std::set<std::string> s;
  for (auto i : idx) s.insert(m[i].subject_id);
  return s.size();
}

// Every subject's entries land in exactly one group, and the groups cover the manifest.
void check_atomic(const DatasetManifest& m, const std::vector<std::vector<std::size_t>>& groups) {
  std::map<std::string, std::size_t> owner;
  std::vector<int> seen(m.size(), 0);
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (auto i : groups[g]) {
      ++seen[i];
      auto [it, fresh] = owner.emplace(m[i].subject_id, g);
      CHECK(it->second == g);
    }
  for (int c : seen) CHECK(c == 1);
}

Prediction binary_pred(const std::string& name, const std::vector<double>& p1) {
  Prediction p{name, 2, {}, {}};
  for (double v : p1) {
    p.probs.push_back(1 - v);
    p.probs.push_back(v);
  }
  return p;
}

// Left-half blob for class 0, right-half blob for class 1, with noise.
std::vector<Sample> blob_set(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> noise(0.0f, 0.05f);
  std::uniform_int_distribution<int> jitter(-3, 3);
  std::vector<Sample> out;
  for (std::size_t i = 0; i < n; ++i) {
    const int cls = static_cast<int>(i % 2);
    SliceStack img(44, 52);
    const int cy = 22 + jitter(rng), cx = (cls ? 38 : 14) + jitter(rng);
    for (std::size_t y = 0; y < 44; ++y)
      for (std::size_t x = 0; x < 52; ++x) {
        const double d2 = std::pow(double(y) - cy, 2) + std::pow(double(x) - cx, 2);
        for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<float>(std::exp(-d2 / 40.0)) + noise(rng);
      }
    out.push_back({std::move(img), cls, "b" + std::to_string(i)});
  }
  return out;
}

ExperimentConfig tiny_config(const std::filesystem::path& run) {
  ExperimentConfig c;
  c.models = {"custom_cnn"};
  c.input_size["custom_cnn"] = {44, 52};
  c.training.epochs = 2;
  c.training.batch_size = 4;
  PhantomDataConfig p;
  p.per_class = 5;
  p.dims = {32, 32, 32};
  p.spacing = 3.0f;
  c.phantom = p;
  c.preprocess.registration_levels = 2;
  c.preprocess.smoothing_fwhm_mm = 4.0;
  c.run_dir = run.string();
  return c;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("holdout split sizes follow the floor rule") {
  auto m = make_manifest(363);
  auto plan = split_dataset(m, {0.6, 0.2, 0.2}, 9);
  CHECK(plan.train.size() == 219);
  CHECK(plan.val.size() == 72);
  CHECK(plan.test.size() == 72);
  check_atomic(m, {plan.train, plan.val, plan.test});

  auto ten = make_manifest(10);
  auto p10 = split_dataset(ten, {0.6, 0.2, 0.2}, 1);
  CHECK(std::array{p10.train.size(), p10.val.size(), p10.test.size()} == std::array<std::size_t, 3>{6, 2, 2});

  auto again = split_dataset(m, {0.6, 0.2, 0.2}, 9);
  CHECK(again.train == plan.train);
  CHECK(again.test == plan.test);
  CHECK(split_dataset(m, {0.6, 0.2, 0.2}, 10).test != plan.test);

  CHECK(error_code_of([] { split_dataset(DatasetManifest{}); }) == ErrorCode::EmptyManifest);
  CHECK(error_code_of([&] { split_dataset(m, {0.5, 0.2, 0.2}); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("k-fold sizes and errors") {
  auto m = make_manifest(363);
  auto plan = kfold(m, 8, 4);
  REQUIRE(plan.folds.size() == 8);
  std::map<std::size_t, int> sizes;
  for (const auto& f : plan.folds) ++sizes[f.size()];
  CHECK(sizes == std::map<std::size_t, int>{{45, 5}, {46, 3}});
  check_atomic(m, plan.folds);

  auto sixteen = kfold(make_manifest(16), 8, 0);
  for (const auto& f : sixteen.folds) CHECK(f.size() == 2);
  CHECK(error_code_of([] { kfold(make_manifest(7), 8, 0); }) == ErrorCode::TooFewSubjects);

  auto fs = fold_split(m, plan, 3);
  check_atomic(m, {fs.train, fs.val, fs.test});
  CHECK(fs.test == plan.folds[3]);
  CHECK(subject_count(m, fs.val) == std::size_t(std::floor(0.2 * (363 - 45))));
}

TEST_CASE("splits keep augmented twins with their subject") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 200; ++trial) {
    auto m = make_manifest(8 + rng() % 40, &rng, 3);
    auto plan = split_dataset(m, {0.6, 0.2, 0.2}, rng());
    check_atomic(m, {plan.train, plan.val, plan.test});
    const std::size_t s = m.subjects().size();
    CHECK(subject_count(m, plan.test) == std::size_t(std::floor(0.2 * s + 1e-9)));
    auto folds = kfold(m, 8, rng());
    check_atomic(m, folds.folds);
    for (const auto& f : folds.folds) {
      const auto n = subject_count(m, f);
      CHECK((n == s / 8 || n == (s + 7) / 8));
    }
  }
}

TEST_CASE("majority vote examples") {
  // labels 0 = CN, 1 = AD
  auto a = binary_pred("a", {0.9}), b = binary_pred("b", {0.8}), c = binary_pred("c", {0.1});
  CHECK(majority_vote({a, b, c}) == std::vector<int>{1});
  auto n1 = binary_pred("x", {0.1}), n2 = binary_pred("y", {0.2}), n3 = binary_pred("z", {0.3});
  CHECK(majority_vote({n1, n2, n3}) == std::vector<int>{0});

  // four classes (CN, pMCI, sMCI, AD)
  Prediction hand1{"h1", 4, {0.40, 0.00, 0.15, 0.45}, {}};
  Prediction hand2{"h2", 4, {0.55, 0.00, 0.00, 0.45}, {}};
  Prediction hand3{"h3", 4, {0.25, 0.38, 0.00, 0.37}, {}};
  // votes AD, CN, pMCI; means CN 0.40, pMCI 0.1267, AD 0.4233 -> AD
  CHECK(majority_vote({hand1, hand2, hand3}) == std::vector<int>{3});
}

TEST_CASE("majority vote tie falls back to the lowest index") {
  Prediction a{"a", 2, {0.7, 0.3}, {}}, b{"b", 2, {0.3, 0.7}, {}};
  CHECK(majority_vote({a, b}) == std::vector<int>{0});
  Prediction c{"c", 3, {0.2, 0.2, 0.6}, {}}, d{"d", 3, {0.5, 0.1, 0.4}, {}};
  // votes 2, 0 tie; means 0.35, 0.15, 0.5 -> 2
  CHECK(majority_vote({c, d}) == std::vector<int>{2});
}

TEST_CASE("majority vote equals the median voter for three binary models") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 50;
    std::vector<Prediction> preds;
    for (int m = 0; m < 3; ++m) {
      std::vector<double> p(n);
      for (auto& v : p) v = u(rng);
      preds.push_back(binary_pred("m" + std::to_string(m), p));
    }
    auto vote = majority_vote(preds);
    for (std::size_t i = 0; i < n; ++i) {
      int ones = 0;
      for (const auto& p : preds) ones += p.labels()[i];
      CHECK(vote[i] == (ones >= 2 ? 1 : 0));
    }
  }
}

TEST_CASE("majority vote errors") {
  CHECK(error_code_of([] { majority_vote({}); }) == ErrorCode::InvalidArgument);
  auto a = binary_pred("a", {0.1, 0.2}), b = binary_pred("b", {0.3});
  CHECK(error_code_of([&] { majority_vote({a, b}); }) == ErrorCode::SampleMismatch);
  auto c = binary_pred("c", {0.1, 0.2}), d = binary_pred("d", {0.1, 0.2});
  c.ids = {"s1", "s2"};
  d.ids = {"s2", "s1"};
  CHECK(error_code_of([&] { majority_vote({c, d}); }) == ErrorCode::SampleMismatch);
}

TEST_CASE("prediction table round trip") {
  TempDir dir;
  PredictionTable t;
  t.prediction = binary_pred("m", {0.125, 0.9, 1.0 / 3.0});
  t.prediction.ids = {"CN_000", "AD_001", "AD_002"};
  t.classes = {ClassLabel::CN, ClassLabel::AD};
  t.actual = {0, 1, 1};
  t.predicted = t.prediction.labels();
  save_predictions(t, dir / "m.csv");
  CHECK(slurp(dir / "m.csv").starts_with("sample,actual,predicted,prob_CN,prob_AD\nCN_000,CN,CN,0.875,0.125\n"));
  auto back = load_predictions(dir / "m.csv");
  CHECK(back.prediction.probs == t.prediction.probs);
  CHECK(back.prediction.ids == t.prediction.ids);
  CHECK(back.classes == t.classes);
  CHECK(back.actual == t.actual);
  CHECK(back.predicted == t.predicted);
  CHECK(error_code_of([&] { load_predictions(dir / "none.csv"); }) == ErrorCode::FileNotFound);
  std::ofstream(dir / "bad.csv") << "sample,actual,predicted,prob_CN\nx,CN,CN,abc\n";
  CHECK(error_code_of([&] { load_predictions(dir / "bad.csv"); }) == ErrorCode::MalformedRow);
}

TEST_CASE("task metrics select the positive class") {
  auto p = binary_pred("m", {0.9, 0.2, 0.7, 0.4});
  std::vector<int> actual{1, 0, 0, 1};
  auto labels = p.labels();
  auto ad = task_metrics(Task::AD_vs_CN, p, labels, actual);
  CHECK(ad.counts == ConfusionCounts{1, 1, 1, 1});
  CHECK(*ad.auc == 0.75);
  auto mci = task_metrics(Task::pMCI_vs_sMCI, p, labels, actual);
  // positive is head 0
  CHECK(mci.counts == ConfusionCounts{1, 1, 1, 1});
  CHECK(*mci.auc == 0.75);
  CHECK(task_classes(Task::pMCI_vs_sMCI)[positive_head(Task::pMCI_vs_sMCI)] == ClassLabel::pMCI);
  CHECK(task_classes(Task::AD_vs_CN)[positive_head(Task::AD_vs_CN)] == ClassLabel::AD);
}

TEST_CASE("training with zero epochs returns the initial weights") {
  auto spec = build_custom_cnn({44, 52, 3}, 2, 0.125);
  auto data = blob_set(4, 1);
  auto a = train(spec, data, data, {0, 4, {}}, 5);
  auto b = train(spec, data, data, {0, 4, {}}, 5);
  CHECK(a.history.empty());
  CHECK(a.best_epoch == -1);
  CHECK(a.network.flat_parameters() == b.network.flat_parameters());
  auto c = train(spec, data, data, {0, 4, {}}, 6);
  CHECK(a.network.flat_parameters() != c.network.flat_parameters());

  auto wrong = build_custom_cnn({88, 104, 3}, 2, 0.125);
  CHECK(error_code_of([&] { train(wrong, data, data, {1, 4, {}}, 5); }) == ErrorCode::ShapeMismatch);
}

TEST_CASE("custom CNN learns a separable toy set deterministically") {
  auto spec = build_custom_cnn({44, 52, 3}, 2, 0.125);
  auto tr = blob_set(32, 11), va = blob_set(12, 12);
  TrainingConfig cfg{30, 8, {}};
  auto r = train(spec, tr, va, cfg, 21);
  REQUIRE(r.history.size() == 30);
  double best_train = 0;
  for (const auto& e : r.history) best_train = std::max(best_train, e.train_accuracy);
  CHECK(best_train >= 0.95);
  CHECK(r.history[r.best_epoch].val_accuracy >= 0.9);
  for (std::size_t e = 0; e < r.history.size(); ++e)
    if (static_cast<int>(e) < r.best_epoch) CHECK(r.history[e].val_accuracy < r.history[r.best_epoch].val_accuracy);

  auto again = train(spec, tr, va, cfg, 21);
  CHECK(again.history == r.history);
  CHECK(again.network.flat_parameters() == r.network.flat_parameters());

  auto p = predict(r.network, va, "custom_cnn");
  REQUIRE(p.size() == va.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    double s = 0;
    for (double v : p.row(i)) s += v;
    CHECK(std::abs(s - 1.0) <= 1e-6);
  }
  CHECK(predict(r.network, va, "custom_cnn").probs == p.probs);
  CHECK(p.ids.front() == va.front().id);
}

TEST_CASE("config parsing") {
  auto c = parse_config(R"({"data": {"phantom": {"per_class": 3}}})");
  CHECK(c.task == Task::AD_vs_CN);
  CHECK(c.models.size() == 3);
  CHECK(c.phantom->per_class == 3);
  CHECK(c.input_size.at("alexnet") == std::array<std::size_t, 2>{176, 208});

  auto round = parse_config(config_to_json(c));
  CHECK(config_hash(round) == config_hash(c));
  CHECK(config_to_json(round) == config_to_json(c));

  auto moved = c;
  moved.run_dir = "elsewhere";
  moved.threads = 4;
  CHECK(config_hash(moved) == config_hash(c));
  moved.seed = 43;
  CHECK(config_hash(moved) != config_hash(c));
  CHECK(config_hash(c).size() == 16);

  auto bad = [](const char* text) { return error_code_of([&] { parse_config(text); }); };
  CHECK(bad(R"({"data": {"phantom": {}}, "colour": 1})") == ErrorCode::InvalidConfig);
  CHECK(bad(R"({"data": {"phantom": {}}, "models": ["vgg16", "alexnet"]})") == ErrorCode::InvalidConfig);
  CHECK(bad(R"({"data": {"phantom": {}}, "models": ["resnet"]})") == ErrorCode::InvalidConfig);
  CHECK(bad(R"({"data": {"phantom": {}}, "task": "AD_vs_MCI"})") == ErrorCode::InvalidConfig);
  CHECK(bad(R"({"data": {"phantom": {}}, "training": {"epochs": "ten"}})") == ErrorCode::InvalidConfig);
  CHECK(bad(R"({"models": ["vgg16"]})") == ErrorCode::InvalidConfig);
  CHECK(bad(R"({"data": {"phantom": {}, "manifest": "m.csv"}})") == ErrorCode::InvalidConfig);
  CHECK(bad("[1, 2") == ErrorCode::InvalidConfig);
  CHECK(!bad(R"({"data": {"phantom": {}}, "task": "four_class", "models": ["vgg16", "alexnet"]})"));
  CHECK(error_code_of([] { load_config("/nonexistent/config.json"); }) == ErrorCode::FileNotFound);
}

TEST_CASE("experiment run directory lifecycle") {
  TempDir dir;
  auto run = dir / "run";
  auto cfg = tiny_config(run);
  auto rep = run_experiment(cfg);
  for (const char* f : {"config.json", "provenance.json", "report.json", "checkpoints/custom_cnn.ckpt",
                        "checkpoints/custom_cnn.history.json", "predictions/custom_cnn.csv",
                        "predictions/ensemble.csv", "data/manifest.csv"})
    CHECK_MESSAGE(std::filesystem::exists(run / f), std::string(f));
  CHECK(rep.rows == std::vector<std::string>{"custom_cnn", "ensemble"});
  const auto& m = rep.metrics.at("custom_cnn");
  const auto& e = rep.metrics.at("ensemble");
  CHECK(m.n == 2);
  CHECK(m.accuracy == e.accuracy);
  CHECK(m.precision == e.precision);
  CHECK(m.recall == e.recall);
  CHECK(m.auc == e.auc);
  // a one-class test set has no ROC curve
  CHECK(std::filesystem::exists(run / "roc" / "custom_cnn.csv") == m.auc.has_value());
  CHECK(std::filesystem::exists(run / "roc" / "custom_cnn.svg") == m.auc.has_value());
  CHECK(rep.unanimity_violations == 0);
  CHECK(rep.error_majority_violations == 0);
  CHECK(slurp(run / "report.json") == rep.json);

  CHECK(error_code_of([&] { run_experiment(cfg); }) == ErrorCode::AlreadyExists);
  auto other = cfg;
  other.seed = 1;
  CHECK(error_code_of([&] { run_experiment(other); }) == ErrorCode::AlreadyExists);

  // resume from checkpoints after losing the report
  std::filesystem::remove(run / "report.json");
  auto resumed = run_experiment(cfg);
  CHECK(resumed.json == rep.json);

  RunOptions overwrite;
  overwrite.overwrite = true;
  CHECK(run_experiment(cfg, overwrite).json == rep.json);

  auto prov = read_provenance(run);
  CHECK(prov.matches());
  CHECK(prov.recorded_hash == config_hash(cfg));
  CHECK(prov.model_seeds.at("custom_cnn") == model_seed(cfg.seed, "custom_cnn"));
  CHECK(format_provenance(prov).find("(match)") != std::string::npos);
  {
    auto text = slurp(run / "config.json");
    auto pos = text.find("\"seed\": 42");
    REQUIRE(pos != std::string::npos);
    text.replace(pos, 10, "\"seed\": 41");
    std::ofstream(run / "config.json", std::ios::trunc) << text;
  }
  CHECK_FALSE(read_provenance(run).matches());
  CHECK(error_code_of([&] { read_provenance(dir.path()); }) == ErrorCode::NotARunDirectory);

  std::filesystem::create_directories(dir / "busy");
  std::ofstream(dir / "busy" / "x.txt") << "x";
  auto busy = cfg;
  busy.run_dir = (dir / "busy").string();
  CHECK(error_code_of([&] { run_experiment(busy); }) == ErrorCode::AlreadyExists);
}

TEST_CASE("experiment errors carry their stage") {
  TempDir dir;
  ExperimentConfig cfg;
  cfg.manifest = (dir / "missing.csv").string();
  cfg.run_dir = (dir / "run").string();
  try {
    run_experiment(cfg);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::FileNotFound);
    CHECK(e.stage() == "data");
  }
}
