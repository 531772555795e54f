#include "neuroens/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "neuroens/error.hpp"
#include "neuroens/random.hpp"

namespace neuroens {

namespace {

// Fisher-Yates over mt19937_64 raw output, identical on every standard library.
template <typename V>
void seeded_shuffle(V& v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = v.size(); i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

// Entry indices grouped per subject, subjects in first-appearance order.
std::vector<std::vector<std::size_t>> subject_groups(const DatasetManifest& manifest) {
  std::map<std::string, std::size_t> slot;
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    auto [it, fresh] = slot.try_emplace(manifest[i].subject_id, groups.size());
    if (fresh) groups.emplace_back();
    groups[it->second].push_back(i);
  }
  return groups;
}

std::vector<std::size_t> flatten_groups(const std::vector<std::vector<std::size_t>>& groups,
                                        std::span<const std::size_t> order, std::size_t begin, std::size_t end) {
  std::vector<std::size_t> out;
  for (std::size_t i = begin; i < end; ++i) out.insert(out.end(), groups[order[i]].begin(), groups[order[i]].end());
  std::sort(out.begin(), out.end());
  return out;
}

std::size_t floor_count(double ratio, std::size_t n) {
  return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 1e-9));
}

std::string fmt_double(double v) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

int argmax(std::span<const float> row) {
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

struct EvalPass {
  double loss = 0;
  std::size_t correct = 0;
};

EvalPass evaluate_set(Network<float>& net, const std::vector<Sample>& set, std::size_t batch_size) {
  EvalPass r;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < set.size(); start += batch_size) {
    const std::size_t end = std::min(set.size(), start + batch_size);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    auto x = batch_tensor(set, idx);
    std::vector<int> labels;
    for (auto i : idx) labels.push_back(set[i].target);
    r.loss += net.loss(x, labels, Mode::eval) * static_cast<double>(idx.size());
    const auto& out = net.output();
    const std::size_t c = out.dim(1);
    for (std::size_t n = 0; n < idx.size(); ++n)
      r.correct += argmax(out.data().subspan(n * c, c)) == labels[n];
  }
  return r;
}

}  // namespace

// ---- tasks ---------------------------------------------------------------------------------

const char* task_name(Task t) noexcept {
  switch (t) {
    case Task::AD_vs_CN: return "AD_vs_CN";
    case Task::pMCI_vs_sMCI: return "pMCI_vs_sMCI";
    case Task::four_class: return "four_class";
  }
  return "?";
}

Task parse_task(std::string_view text) {
  for (auto t : {Task::AD_vs_CN, Task::pMCI_vs_sMCI, Task::four_class})
    if (text == task_name(t)) return t;
  fail(ErrorCode::InvalidConfig, "unknown task '" + std::string(text) + "' (AD_vs_CN, pMCI_vs_sMCI, four_class)");
}

std::vector<ClassLabel> task_classes(Task t) {
  switch (t) {
    case Task::AD_vs_CN: return {ClassLabel::CN, ClassLabel::AD};
    case Task::pMCI_vs_sMCI: return {ClassLabel::pMCI, ClassLabel::sMCI};
    case Task::four_class: return {kAllClasses.begin(), kAllClasses.end()};
  }
  return {};
}

int positive_head(Task t) {
  switch (t) {
    case Task::AD_vs_CN: return 1;
    case Task::pMCI_vs_sMCI: return 0;
    case Task::four_class: return -1;
  }
  return -1;
}

// ---- splitting -----------------------------------------------------------------------------

SplitPlan split_dataset(const DatasetManifest& manifest, std::array<double, 3> ratios, std::uint64_t seed) {
  if (manifest.empty()) fail(ErrorCode::EmptyManifest, "cannot split an empty manifest");
  for (double r : ratios)
    if (!(r >= 0.0 && r <= 1.0)) fail(ErrorCode::InvalidArgument, "split ratios must lie in [0, 1]");
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9)
    fail(ErrorCode::InvalidArgument, "split ratios must sum to 1");
  auto groups = subject_groups(manifest);
  std::vector<std::size_t> order(groups.size());
  std::iota(order.begin(), order.end(), 0);
  seeded_shuffle(order, seed);
  const std::size_t s = groups.size(), n_test = floor_count(ratios[2], s), n_val = floor_count(ratios[1], s);
  SplitPlan plan;
  plan.ratios = ratios;
  plan.seed = seed;
  plan.test = flatten_groups(groups, order, 0, n_test);
  plan.val = flatten_groups(groups, order, n_test, n_test + n_val);
  plan.train = flatten_groups(groups, order, n_test + n_val, s);
  return plan;
}

FoldPlan kfold(const DatasetManifest& manifest, std::size_t k, std::uint64_t seed) {
  if (manifest.empty()) fail(ErrorCode::EmptyManifest, "cannot fold an empty manifest");
  if (k == 0) fail(ErrorCode::InvalidArgument, "k must be positive");
  auto groups = subject_groups(manifest);
  if (groups.size() < k)
    fail(ErrorCode::TooFewSubjects, std::to_string(groups.size()) + " subjects cannot fill " + std::to_string(k) + " folds");
  std::vector<std::size_t> order(groups.size());
  std::iota(order.begin(), order.end(), 0);
  seeded_shuffle(order, seed);
  FoldPlan plan;
  plan.seed = seed;
  const std::size_t base = groups.size() / k, extra = groups.size() % k;
  std::size_t at = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t len = base + (f < extra ? 1 : 0);
    plan.folds.push_back(flatten_groups(groups, order, at, at + len));
    at += len;
  }
  return plan;
}

SplitPlan fold_split(const DatasetManifest& manifest, const FoldPlan& plan, std::size_t fold, double val_ratio) {
  if (fold >= plan.folds.size()) fail(ErrorCode::InvalidArgument, "fold index out of range");
  SplitPlan split;
  split.seed = derive_seed(plan.seed, fold);
  split.test = plan.folds[fold];
  std::vector<bool> in_test(manifest.size(), false);
  for (auto i : split.test) in_test[i] = true;
  DatasetManifest rest;
  std::vector<std::size_t> back;
  for (std::size_t i = 0; i < manifest.size(); ++i)
    if (!in_test[i]) {
      rest.add(manifest[i]);
      back.push_back(i);
    }
  auto inner = split_dataset(rest, {1.0 - val_ratio, val_ratio, 0.0}, split.seed);
  for (auto i : inner.train) split.train.push_back(back[i]);
  for (auto i : inner.val) split.val.push_back(back[i]);
  split.ratios = {1.0 - val_ratio, val_ratio, 0.0};
  return split;
}

// ---- training ------------------------------------------------------------------------------

Tensor<float> batch_tensor(const std::vector<Sample>& samples, std::span<const std::size_t> indices) {
  if (indices.empty()) fail(ErrorCode::InvalidArgument, "empty batch");
  const auto& first = samples[indices[0]].image;
  const std::size_t h = first.height(), w = first.width(), per = h * w * SliceStack::kChannels;
  Tensor<float> x({indices.size(), h, w, SliceStack::kChannels});
  for (std::size_t n = 0; n < indices.size(); ++n) {
    const auto& img = samples[indices[n]].image;
    if (img.height() != h || img.width() != w)
      fail(ErrorCode::ShapeMismatch, "sample " + samples[indices[n]].id + " is " + std::to_string(img.height()) + "x" +
                                         std::to_string(img.width()) + ", batch is " + std::to_string(h) + "x" +
                                         std::to_string(w));
    std::copy(img.data().begin(), img.data().end(), x.ptr() + n * per);
  }
  return x;
}

TrainResult train(const NetworkSpec& spec, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                  const TrainingConfig& config, std::uint64_t seed) {
  if (config.batch_size == 0) fail(ErrorCode::InvalidArgument, "batch size must be positive");
  TrainResult result;
  result.network = Network<float>(spec, derive_seed(seed, 0x1217));
  const Shape want{spec.input[0], spec.input[1], spec.input[2]};
  for (const auto* set : {&train_set, &val_set})
    for (const auto& s : *set)
      if (Shape{s.image.height(), s.image.width(), SliceStack::kChannels} != want)
        fail(ErrorCode::ShapeMismatch, "sample " + s.id + " does not match network input " + shape_string(want));
  if (config.epochs == 0) return result;
  if (train_set.empty()) fail(ErrorCode::InvalidArgument, "empty training set");

  Network<float> net = result.network;
  double best = -1.0;
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    seeded_shuffle(order, derive_seed(seed, 0xE90C, epoch));
    EpochStats stats;
    std::size_t correct = 0;
    for (std::size_t start = 0, b = 0; start < order.size(); start += config.batch_size, ++b) {
      std::span<const std::size_t> idx(order.data() + start, std::min(config.batch_size, order.size() - start));
      auto x = batch_tensor(train_set, idx);
      std::vector<int> labels;
      for (auto i : idx) labels.push_back(train_set[i].target);
      double loss;
      try {
        loss = net.train_step(x, labels, config.optimizer, derive_seed(seed, epoch + 1, b + 1));
      } catch (Error& e) {
        if (e.code() == ErrorCode::NonFiniteLoss)
          throw Error(ErrorCode::NonFiniteLoss, std::string(e.what()) + " (epoch " + std::to_string(epoch) +
                                                     ", batch " + std::to_string(b) + ")");
        throw;
      }
      stats.train_loss += loss * static_cast<double>(idx.size());
      const auto& out = net.output();
      const std::size_t c = out.dim(1);
      for (std::size_t n = 0; n < idx.size(); ++n) correct += argmax(out.data().subspan(n * c, c)) == labels[n];
    }
    stats.train_loss /= static_cast<double>(order.size());
    stats.train_accuracy = static_cast<double>(correct) / static_cast<double>(order.size());
    if (!val_set.empty()) {
      auto v = evaluate_set(net, val_set, std::max<std::size_t>(config.batch_size, 16));
      stats.val_loss = v.loss / static_cast<double>(val_set.size());
      stats.val_accuracy = static_cast<double>(v.correct) / static_cast<double>(val_set.size());
    } else {
      stats.val_accuracy = stats.train_accuracy;
      stats.val_loss = stats.train_loss;
    }
    result.history.push_back(stats);
    if (stats.val_accuracy > best) {
      best = stats.val_accuracy;
      result.best_epoch = static_cast<int>(epoch);
      result.network = net;
    }
  }
  return result;
}

Prediction predict(Network<float>& network, const std::vector<Sample>& samples, const std::string& model_name,
                   std::size_t batch_size) {
  Prediction p;
  p.model = model_name;
  p.classes = network.spec().num_classes;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const std::size_t end = std::min(samples.size(), start + batch_size);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    auto out = network.forward(batch_tensor(samples, idx), Mode::eval);
    for (float v : out.data()) p.probs.push_back(v);
  }
  for (const auto& s : samples) p.ids.push_back(s.id);
  return p;
}

// ---- ensemble ------------------------------------------------------------------------------

namespace {

void check_aligned(const std::vector<Prediction>& preds) {
  if (preds.empty()) fail(ErrorCode::InvalidArgument, "majority vote needs at least one prediction");
  const auto& ref = preds.front();
  for (const auto& p : preds) {
    if (p.classes != ref.classes || p.size() != ref.size() || p.classes == 0)
      fail(ErrorCode::SampleMismatch, "prediction '" + p.model + "' covers " + std::to_string(p.size()) + "x" +
                                          std::to_string(p.classes) + ", expected " + std::to_string(ref.size()) +
                                          "x" + std::to_string(ref.classes));
    if (!p.ids.empty() && !ref.ids.empty() && p.ids != ref.ids)
      fail(ErrorCode::SampleMismatch, "prediction '" + p.model + "' lists different samples or order");
  }
}

}  // namespace

std::vector<int> majority_vote(const std::vector<Prediction>& preds) {
  check_aligned(preds);
  const std::size_t n = preds[0].size(), c = preds[0].classes;
  std::vector<std::vector<int>> labels;
  for (const auto& p : preds) labels.push_back(p.labels());
  std::vector<int> out(n);
  std::vector<std::size_t> votes(c);
  std::vector<double> mass(c);
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(votes.begin(), votes.end(), 0);
    std::fill(mass.begin(), mass.end(), 0.0);
    for (std::size_t m = 0; m < preds.size(); ++m) {
      ++votes[labels[m][i]];
      auto row = preds[m].row(i);
      for (std::size_t k = 0; k < c; ++k) mass[k] += row[k];
    }
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k)
      if (votes[k] > votes[best] || (votes[k] == votes[best] && mass[k] > mass[best])) best = k;
    out[i] = static_cast<int>(best);
  }
  return out;
}

Prediction mean_prediction(const std::vector<Prediction>& preds, const std::string& name) {
  check_aligned(preds);
  Prediction out;
  out.model = name;
  out.classes = preds[0].classes;
  out.ids = preds[0].ids;
  out.probs.assign(preds[0].probs.size(), 0.0);
  for (const auto& p : preds)
    for (std::size_t i = 0; i < p.probs.size(); ++i) out.probs[i] += p.probs[i];
  for (auto& v : out.probs) v /= static_cast<double>(preds.size());
  return out;
}

std::string format_predictions(const PredictionTable& t) {
  const auto& p = t.prediction;
  if (t.classes.size() != p.classes || t.actual.size() != p.size() || t.predicted.size() != p.size())
    fail(ErrorCode::LengthMismatch, "prediction table columns disagree");
  std::string out = "sample,actual,predicted";
  for (auto c : t.classes) out += ",prob_" + std::string(label_name(c));
  out += "\n";
  for (std::size_t i = 0; i < p.size(); ++i) {
    out += (p.ids.empty() ? std::to_string(i) : p.ids[i]) + "," + std::string(label_name(t.classes[t.actual[i]])) +
           "," + std::string(label_name(t.classes[t.predicted[i]]));
    for (double v : p.row(i)) out += "," + fmt_double(v);
    out += "\n";
  }
  return out;
}

void save_predictions(const PredictionTable& table, const std::filesystem::path& path) {
  auto text = format_predictions(table);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoFailure, "cannot open " + path.string() + " for writing");
  out << text;
  if (!out) fail(ErrorCode::IoFailure, "write failed for " + path.string());
}

PredictionTable load_predictions(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) fail(ErrorCode::FileNotFound, "no predictions at " + path.string());
  std::ifstream in(path);
  std::string line;
  if (!std::getline(in, line)) fail(ErrorCode::MalformedRow, path.string() + " is empty");
  auto header = split_csv(line);
  if (header.size() < 4 || header[0] != "sample" || header[1] != "actual" || header[2] != "predicted")
    fail(ErrorCode::MalformedRow, "predictions header must be sample,actual,predicted,prob_<class>...");
  PredictionTable t;
  std::string model = path.stem().string();
  t.prediction.model = model;
  for (std::size_t i = 3; i < header.size(); ++i) {
    if (!header[i].starts_with("prob_")) fail(ErrorCode::MalformedRow, "bad column '" + header[i] + "'");
    t.classes.push_back(parse_label(std::string_view(header[i]).substr(5)));
  }
  t.prediction.classes = t.classes.size();
  auto head_of = [&](const std::string& name, std::size_t lineno) {
    auto label = parse_label(name);
    for (std::size_t k = 0; k < t.classes.size(); ++k)
      if (t.classes[k] == label) return static_cast<int>(k);
    fail(ErrorCode::MalformedRow, "line " + std::to_string(lineno) + ": label " + name + " has no probability column");
  };
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto cells = split_csv(line);
    if (cells.size() != header.size())
      fail(ErrorCode::MalformedRow, "line " + std::to_string(lineno) + " has " + std::to_string(cells.size()) +
                                        " cells, expected " + std::to_string(header.size()));
    t.prediction.ids.push_back(cells[0]);
    t.actual.push_back(head_of(cells[1], lineno));
    t.predicted.push_back(head_of(cells[2], lineno));
    for (std::size_t k = 3; k < cells.size(); ++k) {
      double v = 0;
      auto r = std::from_chars(cells[k].data(), cells[k].data() + cells[k].size(), v);
      if (r.ec != std::errc{} || r.ptr != cells[k].data() + cells[k].size() || !std::isfinite(v) || v < 0)
        fail(ErrorCode::MalformedRow, "line " + std::to_string(lineno) + ": bad probability '" + cells[k] + "'");
      t.prediction.probs.push_back(v);
    }
  }
  return t;
}

BinaryMetrics task_metrics(Task task, const Prediction& prediction, std::span<const int> predicted,
                           std::span<const int> actual) {
  if (task != Task::four_class) return evaluate_binary(prediction, predicted, actual, positive_head(task));
  auto mc = evaluate_multiclass(prediction, predicted, actual);
  BinaryMetrics m;
  m.accuracy = mc.accuracy;
  m.precision = mc.macro_precision;
  m.recall = mc.macro_recall;
  m.auc = mc.macro_auc;
  m.n = actual.size();
  return m;
}

// ---- preprocessing chain -------------------------------------------------------------------

std::size_t axial_centroid(const Volume3D& vol) {
  const auto& d = vol.dims();
  if (d[2] < 3) fail(ErrorCode::InvalidVolume, "volume needs at least 3 axial slices");
  double mass = 0, moment = 0;
  for (std::size_t k = 0; k < d[2]; ++k)
    for (std::size_t j = 0; j < d[1]; ++j)
      for (std::size_t i = 0; i < d[0]; ++i) {
        const double v = std::max(0.0f, vol.at(i, j, k));
        mass += v;
        moment += v * static_cast<double>(k);
      }
  if (mass <= 0) return d[2] / 2;
  auto c = static_cast<std::size_t>(std::llround(moment / mass));
  return std::clamp<std::size_t>(c, 1, d[2] - 2);
}

PreprocessResult preprocess_volume(const Volume3D& vol, const Volume3D& template_vol, const PreprocessConfig& config,
                                   std::uint64_t seed) {
  Volume3D base = vol;
  if (config.normalize) {
    NormalizationConfig nc;
    nc.bias_order = config.bias_order;
    nc.bias_segmentation_k = config.segmentation_k;
    nc.seed = seed;
    nc.registration.levels = config.registration_levels;
    base = normalize_to_template(vol, template_vol, nc).normalized;
  }
  SegmentationConfig sc;
  sc.restarts = config.segmentation_restarts;
  auto seg = segment_tissues(base, config.segmentation_k, derive_seed(seed, 0x5E6), sc);
  auto mask = gray_matter_mask(seg.map, config.gm_threshold);
  auto gm = apply_mask(base, mask);
  if (config.smoothing_fwhm_mm > 0) gm = smooth_gaussian(gm, config.smoothing_fwhm_mm);
  PreprocessResult r;
  r.center_slice = axial_centroid(gm);
  r.gray_matter = std::move(gm);
  return r;
}

SliceStack model_input(const Volume3D& gray_matter, std::size_t center, std::size_t h, std::size_t w) {
  auto s = extract_slices(gray_matter, Axis::z, center, h, w);
  for (auto& v : s.data()) v = static_cast<float>(v / kInputScale);
  return s;
}

std::uint64_t model_seed(std::uint64_t seed, const std::string& model) { return derive_seed(seed, fnv1a(model)); }

}  // namespace neuroens
