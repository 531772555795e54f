#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "neuroens/augment.hpp"
#include "neuroens/error.hpp"
#include "neuroens/phantom.hpp"
#include "neuroens/pipeline.hpp"
#include "neuroens/random.hpp"

namespace neuroens {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// ---- config parsing -------------------------------------------------------------------------

[[noreturn]] void bad_config(const std::string& what) { fail(ErrorCode::InvalidConfig, what); }

void allow_keys(const json& obj, const std::string& where, std::initializer_list<const char*> keys) {
  if (!obj.is_object()) bad_config(where + " must be an object");
  for (const auto& [k, v] : obj.items()) {
    bool known = false;
    for (const char* allowed : keys) known |= k == allowed;
    if (!known) bad_config("unknown key '" + k + "' in " + where);
  }
}

template <typename T>
void read(const json& obj, const char* key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    bad_config(where + "." + key + " has the wrong type");
  }
}

const std::set<std::string> kModelNames{"custom_cnn", "vgg16", "alexnet"};

void validate(const ExperimentConfig& c) {
  if (c.models.empty()) bad_config("at least one model is required");
  std::set<std::string> seen;
  for (const auto& m : c.models) {
    if (!kModelNames.count(m)) bad_config("unknown model '" + m + "' (custom_cnn, vgg16, alexnet)");
    if (!seen.insert(m).second) bad_config("model '" + m + "' listed twice");
    auto it = c.input_size.find(m);
    if (it == c.input_size.end() || it->second[0] < 3 || it->second[1] < 3)
      bad_config("model '" + m + "' needs an input size of at least 3x3");
  }
  if (c.task != Task::four_class && c.models.size() % 2 == 0)
    bad_config("binary majority voting needs an odd number of models");
  if (!(c.width_multiplier > 0 && c.width_multiplier <= 1)) bad_config("width_multiplier must lie in (0, 1]");
  if (!(c.dropout >= 0 && c.dropout < 1)) bad_config("dropout must lie in [0, 1)");
  if (c.training.batch_size == 0) bad_config("batch_size must be positive");
  if (!(c.training.optimizer.lr > 0)) bad_config("lr must be positive");
  if (c.split_mode != "holdout" && c.split_mode != "kfold") bad_config("split.mode must be holdout or kfold");
  if (std::abs(c.ratios[0] + c.ratios[1] + c.ratios[2] - 1.0) > 1e-9) bad_config("split.ratios must sum to 1");
  for (double r : c.ratios)
    if (!(r >= 0 && r <= 1)) bad_config("split.ratios must lie in [0, 1]");
  if (c.folds < 2) bad_config("split.folds must be at least 2");
  if (!(c.augment_factor >= 1.0)) bad_config("augmentation.factor must be at least 1");
  if (c.preprocess.segmentation_k < 3 || c.preprocess.segmentation_k > 5)
    bad_config("preprocess.segmentation_k must lie in [3, 5]");
  if (c.preprocess.segmentation_restarts < 1) bad_config("preprocess.segmentation_restarts must be at least 1");
  if (!(c.preprocess.gm_threshold >= 0 && c.preprocess.gm_threshold <= 1))
    bad_config("preprocess.gm_threshold must lie in [0, 1]");
  if (c.preprocess.smoothing_fwhm_mm < 0) bad_config("preprocess.smoothing_fwhm_mm must be nonnegative");
  if (c.manifest.empty() == !c.phantom.has_value()) bad_config("data needs exactly one of manifest or phantom");
  if (c.phantom && c.phantom->per_class == 0) bad_config("data.phantom.per_class must be positive");
  if (c.threads == 0) bad_config("threads must be positive");
  if (c.run_dir.empty()) bad_config("run_dir must not be empty");
}

ordered_json config_json(const ExperimentConfig& c, bool with_execution) {
  ordered_json inputs = ordered_json::object();
  for (const auto& [m, hw] : c.input_size) inputs[m] = {hw[0], hw[1]};
  const auto& o = c.training.optimizer;
  ordered_json data = ordered_json::object();
  data["manifest"] = c.manifest;
  data["template"] = c.template_path;
  if (c.phantom)
    data["phantom"] = {{"per_class", c.phantom->per_class},
                       {"seed", c.phantom->seed},
                       {"dims", c.phantom->dims},
                       {"spacing", c.phantom->spacing},
                       {"noise_sigma", c.phantom->noise_sigma}};
  else
    data["phantom"] = nullptr;
  ordered_json j;
  j["task"] = task_name(c.task);
  j["models"] = c.models;
  j["input_size"] = inputs;
  j["width_multiplier"] = c.width_multiplier;
  j["dropout"] = c.dropout;
  j["training"] = {{"epochs", c.training.epochs},
                   {"batch_size", c.training.batch_size},
                   {"optimizer", o.kind == OptimizerKind::adam ? "adam" : "sgd"},
                   {"lr", o.lr},
                   {"momentum", o.momentum},
                   {"beta1", o.beta1},
                   {"beta2", o.beta2},
                   {"epsilon", o.epsilon}};
  j["split"] = {{"mode", c.split_mode}, {"ratios", c.ratios}, {"folds", c.folds}};
  j["augmentation"] = {{"enabled", c.augment}, {"factor", c.augment_factor}};
  const auto& p = c.preprocess;
  j["preprocess"] = {{"normalize", p.normalize},
                     {"bias_order", p.bias_order},
                     {"registration_levels", p.registration_levels},
                     {"segmentation_k", p.segmentation_k},
                     {"segmentation_restarts", p.segmentation_restarts},
                     {"gm_threshold", p.gm_threshold},
                     {"smoothing_fwhm_mm", p.smoothing_fwhm_mm}};
  j["seed"] = c.seed;
  j["data"] = data;
  if (with_execution) {
    j["run_dir"] = c.run_dir;
    j["threads"] = c.threads;
  }
  return j;
}

// ---- run directory ----------------------------------------------------------------------------

void write_text(const fs::path& path, const std::string& text) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::IoFailure, "cannot open " + tmp.string() + " for writing");
    out << text;
    if (!out) fail(ErrorCode::IoFailure, "write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) fail(ErrorCode::IoFailure, "cannot move " + tmp.string() + " into place: " + ec.message());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::FileNotFound, "cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void make_dirs(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) fail(ErrorCode::IoFailure, "cannot create " + p.string() + ": " + ec.message());
}

std::string recorded_hash(const fs::path& run) {
  try {
    return json::parse(read_text(run / "provenance.json")).at("config_hash").get<std::string>();
  } catch (const std::exception&) {
    return {};
  }
}

void prepare_run_dir(const ExperimentConfig& c, const fs::path& run, bool overwrite, const std::string& hash) {
  std::error_code ec;
  if (fs::exists(run) && !fs::is_empty(run, ec)) {
    if (overwrite) {
      for (const auto& e : fs::directory_iterator(run)) fs::remove_all(e.path(), ec);
      if (ec) fail(ErrorCode::IoFailure, "cannot clear " + run.string() + ": " + ec.message());
    } else if (!fs::exists(run / "provenance.json")) {
      fail(ErrorCode::AlreadyExists, run.string() + " is not empty and is not a run directory; pass --overwrite");
    } else if (recorded_hash(run) != hash) {
      fail(ErrorCode::AlreadyExists, run.string() + " holds a run with a different configuration; pass --overwrite");
    } else if (fs::exists(run / "report.json")) {
      fail(ErrorCode::AlreadyExists, run.string() + " already holds a finished report; pass --overwrite");
    }
  }
  make_dirs(run);
  write_text(run / "config.json", config_json(c, true).dump(2) + "\n");
  ordered_json prov{{"version", kVersion}, {"config_hash", hash}, {"seed", c.seed}};
  ordered_json seeds = ordered_json::object();
  for (const auto& m : c.models) seeds[m] = model_seed(c.seed, m);
  prov["model_seeds"] = seeds;
  write_text(run / "provenance.json", prov.dump(2) + "\n");
}

// ---- workers --------------------------------------------------------------------------------

std::size_t worker_count(std::size_t configured) {
  std::size_t n = configured;
  if (const char* env = std::getenv("NEUROENS_THREADS")) {
    char* end = nullptr;
    unsigned long cap = std::strtoul(env, &end, 10);
    if (end != env && cap > 0) n = std::min<std::size_t>(n, cap);
  }
  return std::max<std::size_t>(n, 1);
}

// Runs job(i) for i in [0, n) on up to `threads` workers; rethrows the lowest-index failure.
template <typename F>
void parallel_for(std::size_t n, std::size_t threads, F&& job) {
  std::vector<std::exception_ptr> errors(n);
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next++) < n;) {
      try {
        job(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(threads, n); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

template <typename F>
auto staged(const char* stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (Error& e) {
    if (e.stage().empty()) e.with_stage(stage);
    throw;
  }
}

// ---- data -----------------------------------------------------------------------------------

struct Subject {
  std::string id;
  std::string path;  // resolved volume path
  ClassLabel label;
  int target;
  std::size_t manifest_index;
};

std::string cache_key(const std::string& path) {
  std::string key = fs::path(path).replace_extension().string();
  for (auto& ch : key)
    if (ch == '/' || ch == '\\' || ch == ':' || ch == '.') ch = '_';
  return key;
}

Volume3D read_cached(const fs::path& p) { return read_nifti(p); }

ordered_json metric_row(const std::string& model, Task task, const BinaryMetrics& m, std::uint64_t seed) {
  return ordered_json::parse(metrics_json(model, task_name(task), m, seed));
}

ordered_json history_json(const TrainResult& r) {
  ordered_json h = ordered_json::array();
  for (const auto& e : r.history)
    h.push_back({{"train_loss", e.train_loss},
                 {"train_accuracy", e.train_accuracy},
                 {"val_loss", e.val_loss},
                 {"val_accuracy", e.val_accuracy}});
  return {{"best_epoch", r.best_epoch}, {"history", h}};
}

std::vector<EpochStats> history_from(const json& j) {
  std::vector<EpochStats> out;
  for (const auto& e : j.at("history"))
    out.push_back({e.at("train_loss").get<double>(), e.at("train_accuracy").get<double>(),
                   e.at("val_loss").get<double>(), e.at("val_accuracy").get<double>()});
  return out;
}

struct ModelOutcome {
  TrainResult trained;
  Prediction prediction;
  std::vector<int> predicted;
  BinaryMetrics metrics;
  std::size_t train_samples = 0;
  std::uint64_t seed = 0;
};

struct FoldOutcome {
  std::vector<ModelOutcome> models;
  Prediction ensemble_scores;
  std::vector<int> ensemble_labels;
  BinaryMetrics ensemble;
  std::vector<int> actual;
  std::vector<std::string> ids;
  std::size_t unanimity_violations = 0, error_majority_violations = 0;
  std::size_t n_train = 0, n_val = 0, n_test = 0;
};

void emit_rocs(Task task, const std::vector<ClassLabel>& classes, const Prediction& p, std::span<const int> actual,
               const fs::path& dir, const std::string& name) {
  auto emit = [&](int head, const std::string& stem) {
    std::vector<double> scores(p.size());
    for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = p.row(i)[head];
    bool pos = false, neg = false;
    for (int a : actual) (a == head ? pos : neg) = true;
    if (!pos || !neg) return;
    auto curve = roc_curve(scores, actual, head);
    emit_roc(curve, dir / (stem + ".csv"), RocFormat::csv);
    emit_roc(curve, dir / (stem + ".svg"), RocFormat::svg);
  };
  if (task != Task::four_class) {
    emit(positive_head(task), name);
  } else {
    for (std::size_t k = 0; k < classes.size(); ++k)
      emit(static_cast<int>(k), name + "_" + std::string(label_name(classes[k])));
  }
}

}  // namespace

// ---- config API -----------------------------------------------------------------------------

ExperimentConfig parse_config(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    bad_config(std::string("config is not valid JSON: ") + e.what());
  }
  allow_keys(j, "config", {"task", "models", "input_size", "width_multiplier", "dropout", "training", "split",
                           "augmentation", "preprocess", "seed", "data", "run_dir", "threads"});
  ExperimentConfig c;
  if (j.contains("task")) {
    if (!j["task"].is_string()) bad_config("config.task must be a string");
    c.task = parse_task(j["task"].get<std::string>());
  }
  read(j, "models", c.models, "config");
  if (j.contains("input_size")) {
    allow_keys(j["input_size"], "input_size", {"custom_cnn", "vgg16", "alexnet"});
    for (const auto& [m, v] : j["input_size"].items()) {
      std::vector<std::size_t> hw;
      try {
        hw = v.get<std::vector<std::size_t>>();
      } catch (const json::exception&) {
        bad_config("input_size." + m + " must be [height, width]");
      }
      if (hw.size() != 2) bad_config("input_size." + m + " must be [height, width]");
      c.input_size[m] = {hw[0], hw[1]};
    }
  }
  read(j, "width_multiplier", c.width_multiplier, "config");
  read(j, "dropout", c.dropout, "config");
  if (j.contains("training")) {
    const auto& t = j["training"];
    allow_keys(t, "training", {"epochs", "batch_size", "optimizer", "lr", "momentum", "beta1", "beta2", "epsilon"});
    read(t, "epochs", c.training.epochs, "training");
    read(t, "batch_size", c.training.batch_size, "training");
    std::string opt = "adam";
    read(t, "optimizer", opt, "training");
    if (opt != "adam" && opt != "sgd") bad_config("training.optimizer must be adam or sgd");
    c.training.optimizer.kind = opt == "adam" ? OptimizerKind::adam : OptimizerKind::sgd;
    read(t, "lr", c.training.optimizer.lr, "training");
    read(t, "momentum", c.training.optimizer.momentum, "training");
    read(t, "beta1", c.training.optimizer.beta1, "training");
    read(t, "beta2", c.training.optimizer.beta2, "training");
    read(t, "epsilon", c.training.optimizer.epsilon, "training");
  }
  if (j.contains("split")) {
    const auto& s = j["split"];
    allow_keys(s, "split", {"mode", "ratios", "folds"});
    read(s, "mode", c.split_mode, "split");
    read(s, "ratios", c.ratios, "split");
    read(s, "folds", c.folds, "split");
  }
  if (j.contains("augmentation")) {
    const auto& a = j["augmentation"];
    allow_keys(a, "augmentation", {"enabled", "factor"});
    read(a, "enabled", c.augment, "augmentation");
    read(a, "factor", c.augment_factor, "augmentation");
  }
  if (j.contains("preprocess")) {
    const auto& p = j["preprocess"];
    allow_keys(p, "preprocess", {"normalize", "bias_order", "registration_levels", "segmentation_k",
                                 "segmentation_restarts", "gm_threshold", "smoothing_fwhm_mm"});
    read(p, "normalize", c.preprocess.normalize, "preprocess");
    read(p, "bias_order", c.preprocess.bias_order, "preprocess");
    read(p, "registration_levels", c.preprocess.registration_levels, "preprocess");
    read(p, "segmentation_k", c.preprocess.segmentation_k, "preprocess");
    read(p, "segmentation_restarts", c.preprocess.segmentation_restarts, "preprocess");
    read(p, "gm_threshold", c.preprocess.gm_threshold, "preprocess");
    read(p, "smoothing_fwhm_mm", c.preprocess.smoothing_fwhm_mm, "preprocess");
  }
  read(j, "seed", c.seed, "config");
  if (j.contains("data")) {
    const auto& d = j["data"];
    allow_keys(d, "data", {"manifest", "template", "phantom"});
    read(d, "manifest", c.manifest, "data");
    read(d, "template", c.template_path, "data");
    if (d.contains("phantom") && !d["phantom"].is_null()) {
      const auto& p = d["phantom"];
      allow_keys(p, "data.phantom", {"per_class", "seed", "dims", "spacing", "noise_sigma"});
      PhantomDataConfig pc;
      read(p, "per_class", pc.per_class, "data.phantom");
      read(p, "seed", pc.seed, "data.phantom");
      read(p, "dims", pc.dims, "data.phantom");
      read(p, "spacing", pc.spacing, "data.phantom");
      read(p, "noise_sigma", pc.noise_sigma, "data.phantom");
      c.phantom = pc;
    }
  }
  read(j, "run_dir", c.run_dir, "config");
  read(j, "threads", c.threads, "config");
  validate(c);
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) fail(ErrorCode::FileNotFound, "no config at " + path.string());
  auto c = parse_config(read_text(path));
  if (!c.manifest.empty() && fs::path(c.manifest).is_relative())
    c.manifest = (path.parent_path() / c.manifest).lexically_normal().string();
  if (!c.template_path.empty() && fs::path(c.template_path).is_relative())
    c.template_path = (path.parent_path() / c.template_path).lexically_normal().string();
  return c;
}

std::string config_to_json(const ExperimentConfig& config) { return config_json(config, true).dump(2); }

std::string config_hash(const ExperimentConfig& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a(config_json(config, false).dump())));
  return buf;
}

// ---- experiment -----------------------------------------------------------------------------

ExperimentReport run_experiment(const ExperimentConfig& cfg, const RunOptions& options) {
  validate(cfg);
  std::mutex log_mutex;
  auto log = [&](const std::string& msg) {
    if (!options.log) return;
    std::lock_guard lock(log_mutex);
    options.log(msg);
  };
  const fs::path run = cfg.run_dir;
  const std::string hash = config_hash(cfg);
  const std::size_t threads = worker_count(cfg.threads);
  staged("setup", [&] { prepare_run_dir(cfg, run, options.overwrite, hash); });

  // data
  fs::path base;
  DatasetManifest manifest = staged("data", [&] {
    if (cfg.phantom) {
      base = run / "data";
      if (fs::exists(base / "manifest.csv")) return load_manifest(base / "manifest.csv");
      std::array<std::size_t, kNumClasses> counts{};
      for (auto l : task_classes(cfg.task)) counts[static_cast<int>(l)] = cfg.phantom->per_class;
      log("generating phantom dataset");
      PhantomDatasetOptions po;
      po.dims = cfg.phantom->dims;
      po.spacing = cfg.phantom->spacing;
      po.noise_sigma = cfg.phantom->noise_sigma;
      po.write_truth = false;
      return generate_dataset(counts, cfg.phantom->seed, base, po);
    }
    base = fs::path(cfg.manifest).parent_path();
    return load_manifest(cfg.manifest);
  });

  const auto classes = task_classes(cfg.task);
  std::vector<Subject> subjects;
  DatasetManifest task_manifest;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    const auto& e = manifest[i];
    if (e.provenance != Provenance::original) continue;
    auto it = std::find(classes.begin(), classes.end(), e.label);
    if (it == classes.end()) continue;
    fs::path p = fs::path(e.path).is_absolute() ? fs::path(e.path) : base / e.path;
    subjects.push_back({e.subject_id, p.string(), e.label, static_cast<int>(it - classes.begin()), i});
    task_manifest.add(e);
  }
  if (subjects.empty()) fail(ErrorCode::EmptyManifest, "no original volumes of the task's classes in the manifest");

  // preprocess
  make_dirs(run / "preprocessed");
  std::vector<std::string> cache(subjects.size());
  staged("preprocess", [&] {
    Volume3D tmpl;
    auto template_for = [&]() -> const Volume3D& {
      if (tmpl.size() == 0) {
        if (!cfg.template_path.empty()) {
          tmpl = read_nifti(cfg.template_path);
        } else {
          auto first = read_nifti(subjects.front().path);
          tmpl = generate_template(first.dims(), first.spacing()[0]);
        }
      }
      return tmpl;
    };
    std::vector<std::size_t> todo;
    for (std::size_t i = 0; i < subjects.size(); ++i) {
      cache[i] = (run / "preprocessed" / (cache_key(task_manifest[i].path) + ".nii")).string();
      if (!fs::exists(cache[i])) todo.push_back(i);
    }
    if (todo.empty()) return;
    if (cfg.preprocess.normalize) template_for();
    log("preprocessing " + std::to_string(todo.size()) + " volumes");
    std::atomic<std::size_t> done{0};
    parallel_for(todo.size(), threads, [&](std::size_t t) {
      const auto& s = subjects[todo[t]];
      auto vol = read_nifti(s.path);
      auto r = preprocess_volume(vol, tmpl, cfg.preprocess, derive_seed(cfg.seed, fnv1a(task_manifest[todo[t]].path)));
      fs::path out = cache[todo[t]];
      fs::path tmp = out;
      tmp.replace_extension(".tmp.nii");
      write_nifti(r.gray_matter, tmp);
      std::error_code ec;
      fs::rename(tmp, out, ec);
      if (ec) fail(ErrorCode::IoFailure, "cannot move " + tmp.string() + " into place: " + ec.message());
      const std::size_t k = ++done;
      if (k % 10 == 0 || k == todo.size()) log("  preprocessed " + std::to_string(k) + "/" + std::to_string(todo.size()));
    });
  });

  // model inputs per distinct size
  std::map<std::array<std::size_t, 2>, std::vector<Sample>> inputs;
  staged("preprocess", [&] {
    std::vector<Volume3D> gm(subjects.size());
    for (std::size_t i = 0; i < subjects.size(); ++i) gm[i] = read_cached(cache[i]);
    for (const auto& m : cfg.models) {
      auto hw = cfg.input_size.at(m);
      if (inputs.count(hw)) continue;
      auto& v = inputs[hw];
      for (std::size_t i = 0; i < subjects.size(); ++i)
        v.push_back({model_input(gm[i], axial_centroid(gm[i]), hw[0], hw[1]), subjects[i].target,
                     cache_key(task_manifest[i].path)});
    }
  });

  // partitions
  std::vector<SplitPlan> plans = staged("split", [&] {
    std::vector<SplitPlan> out;
    const std::uint64_t split_seed = derive_seed(cfg.seed, 0x5911);
    if (cfg.split_mode == "holdout") {
      out.push_back(split_dataset(task_manifest, cfg.ratios, split_seed));
    } else {
      auto folds = kfold(task_manifest, cfg.folds, split_seed);
      for (std::size_t f = 0; f < folds.folds.size(); ++f)
        out.push_back(fold_split(task_manifest, folds, f, cfg.ratios[1]));
    }
    return out;
  });
  const bool cv = cfg.split_mode == "kfold";

  std::vector<FoldOutcome> outcomes;
  for (std::size_t f = 0; f < plans.size(); ++f) {
    const auto& plan = plans[f];
    const std::string sub = cv ? "fold_" + std::to_string(f) : "";
    const fs::path ckpt_dir = run / "checkpoints" / sub, pred_dir = run / "predictions" / sub,
                   roc_dir = run / "roc" / sub;
    make_dirs(ckpt_dir);
    make_dirs(pred_dir);
    make_dirs(roc_dir);
    if (cv) log("fold " + std::to_string(f + 1) + "/" + std::to_string(plans.size()));

    FoldOutcome fo;
    auto subjects_in = [&](const std::vector<std::size_t>& idx) {
      std::set<std::string> s;
      for (auto i : idx) s.insert(task_manifest[i].subject_id);
      return s.size();
    };
    fo.n_train = subjects_in(plan.train);
    fo.n_val = subjects_in(plan.val);
    fo.n_test = subjects_in(plan.test);

    // training sets per input size, augmented within the training partition only
    std::map<std::array<std::size_t, 2>, std::array<std::vector<Sample>, 3>> sets;
    staged("augment", [&] {
      for (auto& [hw, all] : inputs) {
        auto& [tr, va, te] = sets[hw];
        for (auto i : plan.val) va.push_back(all[i]);
        for (auto i : plan.test) te.push_back(all[i]);
        std::vector<std::vector<std::size_t>> by_class(classes.size());
        for (auto i : plan.train) by_class[all[i].target].push_back(i);
        std::size_t largest = 0;
        for (const auto& v : by_class) largest = std::max(largest, v.size());
        const auto target = static_cast<std::size_t>(std::ceil(static_cast<double>(largest) * cfg.augment_factor - 1e-9));
        for (std::size_t k = 0; k < classes.size(); ++k) {
          const auto& members = by_class[k];
          if (members.empty()) continue;
          if (!cfg.augment || members.size() >= target) {
            for (auto i : members) tr.push_back(all[i]);
            continue;
          }
          std::vector<SliceStack> imgs;
          for (auto i : members) imgs.push_back(all[i].image);
          auto aug = augment_to_target(imgs, target,
                                       derive_seed(derive_seed(cfg.seed, 0xA06, f), static_cast<int>(classes[k])));
          for (std::size_t a = 0; a < aug.size(); ++a) {
            const auto& src = all[members[aug[a].source]];
            std::string id = a < members.size() ? src.id : src.id + "+" + format_chain(aug[a].ops);
            tr.push_back({std::move(aug[a].image), src.target, std::move(id)});
          }
        }
      }
    });

    fo.models.resize(cfg.models.size());
    staged("train", [&] {
      parallel_for(cfg.models.size(), std::min(threads, cfg.models.size()), [&](std::size_t mi) {
        const auto& name = cfg.models[mi];
        const auto hw = cfg.input_size.at(name);
        const auto& [tr, va, te] = sets.at(hw);
        auto& out = fo.models[mi];
        out.seed = cv ? derive_seed(model_seed(cfg.seed, name), f + 1) : model_seed(cfg.seed, name);
        out.train_samples = tr.size();
        auto spec = build_model(name, {hw[0], hw[1], 3}, classes.size(), cfg.width_multiplier, cfg.dropout);
        const fs::path ckpt = ckpt_dir / (name + ".ckpt"), hist = ckpt_dir / (name + ".history.json");
        if (fs::exists(ckpt) && fs::exists(hist)) {
          auto loaded = load_checkpoint(ckpt);
          if (!(loaded.network.spec() == spec))
            fail(ErrorCode::VersionMismatch, ckpt.string() + " was trained for a different architecture");
          auto hj = json::parse(read_text(hist));
          out.trained.network = std::move(loaded.network);
          out.trained.best_epoch = hj.at("best_epoch").get<int>();
          out.trained.history = history_from(hj);
          log(name + ": reusing checkpoint");
        } else {
          log(name + ": training on " + std::to_string(tr.size()) + " samples");
          out.trained = train(spec, tr, va, cfg.training, out.seed);
          TrainingMetadata meta;
          meta.seed = out.seed;
          meta.epochs = out.trained.history.size();
          meta.best_epoch = out.trained.best_epoch;
          if (out.trained.best_epoch >= 0) {
            const auto& best = out.trained.history[out.trained.best_epoch];
            meta.metrics = {{"val_accuracy", best.val_accuracy}, {"val_loss", best.val_loss},
                            {"train_accuracy", best.train_accuracy}, {"train_loss", best.train_loss}};
          }
          write_text(hist, history_json(out.trained).dump(2) + "\n");
          save_checkpoint(out.trained.network, meta, ckpt);
          if (out.trained.best_epoch >= 0)
            log(name + ": best epoch " + std::to_string(out.trained.best_epoch) + ", val accuracy " +
                std::to_string(out.trained.history[out.trained.best_epoch].val_accuracy));
        }
      });
    });

    staged("evaluate", [&] {
      for (std::size_t mi = 0; mi < cfg.models.size(); ++mi) {
        const auto& name = cfg.models[mi];
        const auto& te = std::get<2>(sets.at(cfg.input_size.at(name)));
        auto& out = fo.models[mi];
        if (fo.actual.empty())
          for (const auto& s : te) {
            fo.actual.push_back(s.target);
            fo.ids.push_back(s.id);
          }
        if (te.empty()) fail(ErrorCode::Empty, "the test partition is empty");
        out.prediction = predict(out.trained.network, te, name);
        out.predicted = out.prediction.labels();
        out.metrics = task_metrics(cfg.task, out.prediction, out.predicted, fo.actual);
        save_predictions({out.prediction, classes, fo.actual, out.predicted}, pred_dir / (name + ".csv"));
        emit_rocs(cfg.task, classes, out.prediction, fo.actual, roc_dir, name);
      }
    });

    staged("ensemble", [&] {
      std::vector<Prediction> preds;
      for (const auto& m : fo.models) preds.push_back(m.prediction);
      fo.ensemble_labels = majority_vote(preds);
      fo.ensemble_scores = mean_prediction(preds);
      fo.ensemble = task_metrics(cfg.task, fo.ensemble_scores, fo.ensemble_labels, fo.actual);
      const std::size_t m = fo.models.size(), need = (m + 1) / 2;
      for (std::size_t i = 0; i < fo.actual.size(); ++i) {
        bool unanimous = true;
        std::size_t wrong = 0;
        for (const auto& mo : fo.models) {
          unanimous &= mo.predicted[i] == fo.models[0].predicted[i];
          wrong += mo.predicted[i] != fo.actual[i];
        }
        if (unanimous && fo.ensemble_labels[i] != fo.models[0].predicted[i]) ++fo.unanimity_violations;
        if (fo.ensemble_labels[i] != fo.actual[i] && wrong < need) ++fo.error_majority_violations;
      }
      save_predictions({fo.ensemble_scores, classes, fo.actual, fo.ensemble_labels}, pred_dir / "ensemble.csv");
      emit_rocs(cfg.task, classes, fo.ensemble_scores, fo.actual, roc_dir, "ensemble");
    });
    outcomes.push_back(std::move(fo));
  }

  // report
  return staged("report", [&] {
    ExperimentReport rep;
    for (const auto& m : cfg.models) rep.rows.push_back(m);
    rep.rows.push_back("ensemble");
    auto fold_json = [&](const FoldOutcome& fo) {
      ordered_json j;
      j["subjects"] = {{"train", fo.n_train}, {"val", fo.n_val}, {"test", fo.n_test}};
      ordered_json rows = ordered_json::array();
      for (std::size_t mi = 0; mi < cfg.models.size(); ++mi)
        rows.push_back(metric_row(cfg.models[mi], cfg.task, fo.models[mi].metrics, fo.models[mi].seed));
      rows.push_back(metric_row("ensemble", cfg.task, fo.ensemble, cfg.seed));
      j["metrics"] = rows;
      ordered_json training = ordered_json::array();
      for (std::size_t mi = 0; mi < cfg.models.size(); ++mi) {
        const auto& t = fo.models[mi].trained;
        ordered_json row{{"model", cfg.models[mi]},
                         {"train_samples", fo.models[mi].train_samples},
                         {"epochs", t.history.size()},
                         {"best_epoch", t.best_epoch}};
        row["best_val_accuracy"] = t.best_epoch >= 0 ? json(t.history[t.best_epoch].val_accuracy) : json(nullptr);
        training.push_back(row);
      }
      j["training"] = training;
      j["invariants"] = {{"unanimity_violations", fo.unanimity_violations},
                         {"error_majority_violations", fo.error_majority_violations}};
      ordered_json samples = ordered_json::array();
      for (std::size_t i = 0; i < fo.actual.size(); ++i) {
        ordered_json votes = ordered_json::object();
        for (std::size_t mi = 0; mi < cfg.models.size(); ++mi)
          votes[cfg.models[mi]] = std::string(label_name(classes[fo.models[mi].predicted[i]]));
        samples.push_back({{"id", fo.ids[i]},
                           {"actual", std::string(label_name(classes[fo.actual[i]]))},
                           {"votes", votes},
                           {"ensemble", std::string(label_name(classes[fo.ensemble_labels[i]]))}});
      }
      j["test_samples"] = samples;
      return j;
    };

    ordered_json report;
    report["version"] = kVersion;
    report["task"] = task_name(cfg.task);
    report["config_hash"] = hash;
    report["split_mode"] = cfg.split_mode;
    report["subjects"] = subjects.size();
    for (const auto& fo : outcomes) {
      rep.unanimity_violations += fo.unanimity_violations;
      rep.error_majority_violations += fo.error_majority_violations;
    }
    if (!cv) {
      const auto& fo = outcomes.front();
      for (std::size_t mi = 0; mi < cfg.models.size(); ++mi) rep.metrics[cfg.models[mi]] = fo.models[mi].metrics;
      rep.metrics["ensemble"] = fo.ensemble;
      auto j = fold_json(fo);
      for (auto& [k, v] : j.items()) report[k] = v;
    } else {
      auto mean_of = [&](auto get) {
        BinaryMetrics out;
        auto avg = [&](std::optional<double> BinaryMetrics::*field) -> std::optional<double> {
          double sum = 0;
          std::size_t n = 0;
          for (const auto& fo : outcomes)
            if (auto v = get(fo).*field) {
              sum += *v;
              ++n;
            }
          if (!n) return std::nullopt;
          return sum / static_cast<double>(n);
        };
        out.accuracy = avg(&BinaryMetrics::accuracy);
        out.precision = avg(&BinaryMetrics::precision);
        out.recall = avg(&BinaryMetrics::recall);
        out.auc = avg(&BinaryMetrics::auc);
        for (const auto& fo : outcomes) out.n += get(fo).n;
        return out;
      };
      ordered_json rows = ordered_json::array();
      for (std::size_t mi = 0; mi < cfg.models.size(); ++mi) {
        rep.metrics[cfg.models[mi]] = mean_of([&](const FoldOutcome& fo) -> const BinaryMetrics& {
          return fo.models[mi].metrics;
        });
        rows.push_back(metric_row(cfg.models[mi], cfg.task, rep.metrics[cfg.models[mi]], model_seed(cfg.seed, cfg.models[mi])));
      }
      rep.metrics["ensemble"] = mean_of([](const FoldOutcome& fo) -> const BinaryMetrics& { return fo.ensemble; });
      rows.push_back(metric_row("ensemble", cfg.task, rep.metrics["ensemble"], cfg.seed));
      report["metrics"] = rows;
      report["invariants"] = {{"unanimity_violations", rep.unanimity_violations},
                              {"error_majority_violations", rep.error_majority_violations}};
      ordered_json folds = ordered_json::array();
      for (std::size_t f = 0; f < outcomes.size(); ++f) {
        auto j = fold_json(outcomes[f]);
        j["fold"] = f;
        folds.push_back(j);
      }
      report["folds"] = folds;
    }
    rep.json = report.dump(2) + "\n";
    write_text(run / "report.json", rep.json);
    log("report written to " + (run / "report.json").string());
    return rep;
  });
}

// ---- provenance -----------------------------------------------------------------------------

ProvenanceInfo read_provenance(const fs::path& run_dir) {
  if (!fs::exists(run_dir / "provenance.json") || !fs::exists(run_dir / "config.json"))
    fail(ErrorCode::NotARunDirectory, run_dir.string() + " has no provenance.json and config.json");
  ProvenanceInfo info;
  try {
    auto p = json::parse(read_text(run_dir / "provenance.json"));
    info.version = p.at("version").get<std::string>();
    info.recorded_hash = p.at("config_hash").get<std::string>();
    info.seed = p.at("seed").get<std::uint64_t>();
    for (const auto& [k, v] : p.at("model_seeds").items()) info.model_seeds[k] = v.get<std::uint64_t>();
  } catch (const json::exception& e) {
    fail(ErrorCode::NotARunDirectory, std::string("unreadable provenance.json: ") + e.what());
  }
  try {
    info.current_hash = config_hash(parse_config(read_text(run_dir / "config.json")));
  } catch (const Error&) {
    info.current_hash = "invalid-config";
  }
  return info;
}

std::string format_provenance(const ProvenanceInfo& info) {
  std::ostringstream out;
  std::size_t w = 12;
  for (const auto& [m, s] : info.model_seeds) w = std::max(w, m.size() + 6);
  auto row = [&](const std::string& key) -> std::ostream& { return out << key << std::string(w + 2 - key.size(), ' '); };
  row("version") << info.version << "\n";
  row("config hash") << info.recorded_hash << "\n";
  row("current hash") << info.current_hash << (info.matches() ? " (match)" : " (MISMATCH)") << "\n";
  row("seed") << info.seed << "\n";
  for (const auto& [m, s] : info.model_seeds) row("seed[" + m + "]") << s << "\n";
  return out.str();
}

}  // namespace neuroens
