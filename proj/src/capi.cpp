#include "neuroens/neuroens.h"

#include <cstring>
#include <exception>
#include <new>
#include <string>

#include "json.hpp"
#include "neuroens/augment.hpp"
#include "neuroens/error.hpp"
#include "neuroens/phantom.hpp"
#include "neuroens/pipeline.hpp"

using namespace neuroens;
namespace fs = std::filesystem;

struct ne_volume {
  Volume3D vol;
};

struct ne_manifest {
  DatasetManifest manifest;
};

struct ne_model {
  Network<float> network;
  TrainingMetadata metadata;
};

struct ne_predictions {
  PredictionTable table;
};

static_assert(static_cast<int>(ErrorCode::InvalidArgument) == NE_INVALID_ARGUMENT);
static_assert(static_cast<int>(ErrorCode::NonFiniteLoss) == NE_NON_FINITE_LOSS);
static_assert(static_cast<int>(ErrorCode::Internal) == NE_INTERNAL);

namespace {

thread_local std::string last_error;

template <typename F>
ne_status guard(F&& f) noexcept {
  try {
    f();
    last_error.clear();
    return NE_OK;
  } catch (const Error& e) {
    last_error = error_json(e);
    return static_cast<ne_status>(e.code());
  } catch (const std::bad_alloc&) {
    last_error = error_json(Error(ErrorCode::Internal, "out of memory"));
  } catch (const std::exception& e) {
    last_error = error_json(Error(ErrorCode::Internal, e.what()));
  } catch (...) {
    last_error = error_json(Error(ErrorCode::Internal, "unknown failure"));
  }
  return NE_INTERNAL;
}

void require(bool ok, const char* what) {
  if (!ok) fail(ErrorCode::InvalidArgument, what);
}

char* dup(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

Task task_or(const char* task, const std::vector<ClassLabel>& classes) {
  if (task) return parse_task(task);
  for (Task t : {Task::AD_vs_CN, Task::pMCI_vs_sMCI, Task::four_class})
    if (task_classes(t) == classes) return t;
  fail(ErrorCode::InvalidArgument, "the predictions' classes match no task");
}

std::vector<Sample> samples_of(const ne_volume* const* stacks, const int* targets, std::size_t n) {
  require(n == 0 || stacks, "stacks is NULL");
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    require(stacks[i] != nullptr, "stack handle is NULL");
    out.push_back({volume_to_stack(stacks[i]->vol), targets ? targets[i] : 0, std::to_string(i)});
  }
  return out;
}

}  // namespace

extern "C" {

const char* ne_version(void) { return kVersion; }

const char* ne_status_name(ne_status status) {
  if (status == NE_OK) return "Ok";
  if (status < NE_INVALID_ARGUMENT || status > NE_INTERNAL) return "Unknown";
  return error_name(static_cast<ErrorCode>(status)).data();
}

const char* ne_last_error(void) { return last_error.c_str(); }

void ne_string_free(char* text) { std::free(text); }

// ---- volumes --------------------------------------------------------------------------------

ne_status ne_volume_create(const size_t dims[3], const float spacing[3], const float* data, ne_volume** out) {
  return guard([&] {
    require(dims && spacing && out, "NULL argument");
    Dims3 d{dims[0], dims[1], dims[2]};
    require(d[0] && d[1] && d[2], "dims must be positive");
    std::vector<float> v(d[0] * d[1] * d[2], 0.0f);
    if (data) std::copy(data, data + v.size(), v.begin());
    Volume3D vol(d, {spacing[0], spacing[1], spacing[2]}, {0, 0, 0}, std::move(v));
    vol.check_finite();
    *out = new ne_volume{std::move(vol)};
  });
}

ne_status ne_volume_read(const char* path, ne_volume** out) {
  return guard([&] {
    require(path && out, "NULL argument");
    *out = new ne_volume{read_nifti(path)};
  });
}

ne_status ne_volume_write(const ne_volume* vol, const char* path) {
  return guard([&] {
    require(vol && path, "NULL argument");
    write_nifti(vol->vol, path);
  });
}

void ne_volume_dims(const ne_volume* vol, size_t dims[3]) {
  for (int a = 0; a < 3; ++a) dims[a] = vol->vol.dims()[a];
}

void ne_volume_spacing(const ne_volume* vol, float spacing[3]) {
  for (int a = 0; a < 3; ++a) spacing[a] = vol->vol.spacing()[a];
}

const float* ne_volume_data(const ne_volume* vol) { return vol->vol.data().data(); }

void ne_volume_free(ne_volume* vol) { delete vol; }

// ---- manifests ------------------------------------------------------------------------------

ne_status ne_manifest_create(ne_manifest** out) {
  return guard([&] {
    require(out, "NULL argument");
    *out = new ne_manifest{};
  });
}

ne_status ne_manifest_load(const char* path, ne_manifest** out) {
  return guard([&] {
    require(path && out, "NULL argument");
    *out = new ne_manifest{load_manifest(path)};
  });
}

ne_status ne_manifest_save(const ne_manifest* manifest, const char* path) {
  return guard([&] {
    require(manifest && path, "NULL argument");
    save_manifest(manifest->manifest, path);
  });
}

ne_status ne_manifest_add(ne_manifest* manifest, const char* path, const char* label, const char* subject_id,
                          int augmented, const char* ops) {
  return guard([&] {
    require(manifest && path && label && subject_id, "NULL argument");
    manifest->manifest.add({path, parse_label(label), subject_id,
                            augmented ? Provenance::augmented : Provenance::original, ops ? ops : ""});
  });
}

size_t ne_manifest_size(const ne_manifest* manifest) { return manifest->manifest.size(); }

ne_status ne_manifest_entry(const ne_manifest* manifest, size_t index, const char** path, const char** label,
                            const char** subject_id, int* augmented, const char** ops) {
  return guard([&] {
    require(manifest != nullptr, "NULL argument");
    if (index >= manifest->manifest.size())
      fail(ErrorCode::IndexOutOfRange, "manifest index " + std::to_string(index) + " out of range");
    const auto& e = manifest->manifest[index];
    if (path) *path = e.path.c_str();
    if (label) *label = label_name(e.label).data();
    if (subject_id) *subject_id = e.subject_id.c_str();
    if (augmented) *augmented = e.provenance == Provenance::augmented;
    if (ops) *ops = e.ops.c_str();
  });
}

void ne_manifest_free(ne_manifest* manifest) { delete manifest; }

// ---- phantoms and preprocessing -------------------------------------------------------------

ne_status ne_phantom_dataset(const char* out_dir, size_t per_class, uint64_t seed, size_t dim, float spacing,
                             double noise_sigma, ne_manifest** out) {
  return guard([&] {
    require(out_dir != nullptr, "NULL argument");
    require(per_class > 0 && dim >= 8 && spacing > 0 && noise_sigma >= 0, "invalid phantom options");
    PhantomDatasetOptions opt;
    opt.dims = {dim, dim, dim};
    opt.spacing = spacing;
    opt.noise_sigma = noise_sigma;
    std::array<std::size_t, kNumClasses> counts;
    counts.fill(per_class);
    auto m = generate_dataset(counts, seed, out_dir, opt);
    if (out) *out = new ne_manifest{std::move(m)};
  });
}

ne_status ne_template_create(size_t dim, float spacing, ne_volume** out) {
  return guard([&] {
    require(out && dim >= 8 && spacing > 0, "invalid template options");
    *out = new ne_volume{generate_template({dim, dim, dim}, spacing)};
  });
}

ne_status ne_preprocess(const ne_volume* vol, const ne_volume* template_vol, const char* config_json, uint64_t seed,
                        ne_volume** gray_matter, size_t* center_slice) {
  return guard([&] {
    require(vol && template_vol && gray_matter, "NULL argument");
    PreprocessConfig pc;
    if (config_json) {
      nlohmann::json j;
      j["data"]["phantom"] = nlohmann::json::object();
      try {
        j["preprocess"] = nlohmann::json::parse(config_json);
      } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::InvalidConfig, std::string("preprocess config: ") + e.what());
      }
      pc = parse_config(j.dump()).preprocess;
    }
    auto r = preprocess_volume(vol->vol, template_vol->vol, pc, seed);
    if (center_slice) *center_slice = r.center_slice;
    *gray_matter = new ne_volume{std::move(r.gray_matter)};
  });
}

ne_status ne_axial_centroid(const ne_volume* vol, size_t* center_slice) {
  return guard([&] {
    require(vol && center_slice, "NULL argument");
    *center_slice = axial_centroid(vol->vol);
  });
}

ne_status ne_model_input(const ne_volume* gray_matter, size_t center_slice, size_t h, size_t w, ne_volume** stack) {
  return guard([&] {
    require(gray_matter && stack, "NULL argument");
    require(h > 0 && w > 0, "input size must be positive");
    *stack = new ne_volume{stack_to_volume(model_input(gray_matter->vol, center_slice, h, w))};
  });
}

ne_status ne_augment_to_target(const ne_volume* const* stacks, size_t count, size_t target, uint64_t seed,
                               ne_volume** stacks_out, char** chains_out) {
  return guard([&] {
    require(stacks_out && chains_out, "NULL argument");
    auto samples = samples_of(stacks, nullptr, count);
    std::vector<SliceStack> imgs;
    for (auto& s : samples) imgs.push_back(std::move(s.image));
    auto aug = augment_to_target(imgs, target, seed);
    std::size_t done = 0;
    try {
      for (; done < aug.size(); ++done) {
        chains_out[done] = dup(format_chain(aug[done].ops));
        stacks_out[done] = nullptr;
        stacks_out[done] = new ne_volume{stack_to_volume(aug[done].image)};
      }
    } catch (...) {
      for (std::size_t i = 0; i <= done && i < aug.size(); ++i) {
        if (i < done || stacks_out[i]) delete stacks_out[i];
        if (i < done) std::free(chains_out[i]);
      }
      throw;
    }
  });
}

// ---- models ---------------------------------------------------------------------------------

ne_status ne_model_create(const char* name, size_t h, size_t w, size_t classes, double width_multiplier,
                          double dropout, uint64_t seed, ne_model** out) {
  return guard([&] {
    require(name && out, "NULL argument");
    auto spec = build_model(name, {h, w, 3}, classes, width_multiplier, dropout);
    *out = new ne_model{Network<float>(std::move(spec), seed), {seed, 0, -1, {}}};
  });
}

ne_status ne_model_load(const char* path, ne_model** out) {
  return guard([&] {
    require(path && out, "NULL argument");
    auto ck = load_checkpoint(path);
    *out = new ne_model{std::move(ck.network), std::move(ck.metadata)};
  });
}

ne_status ne_model_save(const ne_model* model, const char* path) {
  return guard([&] {
    require(model && path, "NULL argument");
    save_checkpoint(model->network, model->metadata, path);
  });
}

void ne_model_input_shape(const ne_model* model, size_t shape[3]) {
  const auto& in = model->network.spec().input;
  for (int a = 0; a < 3; ++a) shape[a] = in[a];
}

size_t ne_model_classes(const ne_model* model) {
  auto trace = infer_shapes(model->network.spec());
  return trace.empty() ? 0 : trace.back().out.back();
}

ne_status ne_model_trace(const ne_model* model, int csv, char** text) {
  return guard([&] {
    require(model && text, "NULL argument");
    auto rows = row_trace(model->network.spec());
    *text = dup(csv ? format_trace_csv(rows) : format_trace_table(rows));
  });
}

ne_status ne_model_metadata(const ne_model* model, char** json) {
  return guard([&] {
    require(model && json, "NULL argument");
    nlohmann::ordered_json j;
    j["seed"] = model->metadata.seed;
    j["epochs"] = model->metadata.epochs;
    j["best_epoch"] = model->metadata.best_epoch;
    j["metrics"] = model->metadata.metrics;
    j["parameter_count"] = model->network.parameter_count();
    *json = dup(j.dump(2));
  });
}

void ne_train_options_default(ne_train_options* options) {
  TrainingConfig d;
  *options = {d.epochs,        d.batch_size,         0, d.optimizer.lr, d.optimizer.momentum, d.optimizer.beta1,
              d.optimizer.beta2, d.optimizer.epsilon};
}

ne_status ne_model_train(ne_model* model, const ne_volume* const* train_stacks, const int* train_targets,
                         size_t train_count, const ne_volume* const* val, const int* val_targets, size_t val_count,
                         const ne_train_options* options, uint64_t seed, char** history_json) {
  return guard([&] {
    require(model && options, "NULL argument");
    require(train_count == 0 || train_targets, "train targets are NULL");
    require(val_count == 0 || val_targets, "validation targets are NULL");
    auto tr = samples_of(train_stacks, train_targets, train_count);
    auto va = samples_of(val, val_targets, val_count);
    TrainingConfig cfg;
    cfg.epochs = options->epochs;
    cfg.batch_size = options->batch_size;
    cfg.optimizer.kind = options->use_sgd ? OptimizerKind::sgd : OptimizerKind::adam;
    cfg.optimizer.lr = options->lr;
    cfg.optimizer.momentum = options->momentum;
    cfg.optimizer.beta1 = options->beta1;
    cfg.optimizer.beta2 = options->beta2;
    cfg.optimizer.epsilon = options->epsilon;
    require(cfg.batch_size > 0 && cfg.optimizer.lr > 0, "batch size and learning rate must be positive");
    auto r = train(model->network.spec(), tr, va, cfg, seed);
    TrainingMetadata meta{seed, r.history.size(), r.best_epoch, {}};
    nlohmann::ordered_json hist = nlohmann::ordered_json::array();
    for (const auto& e : r.history)
      hist.push_back({{"train_loss", e.train_loss},
                      {"train_accuracy", e.train_accuracy},
                      {"val_loss", e.val_loss},
                      {"val_accuracy", e.val_accuracy}});
    if (r.best_epoch >= 0) {
      const auto& b = r.history[r.best_epoch];
      meta.metrics = {{"train_accuracy", b.train_accuracy}, {"train_loss", b.train_loss},
                      {"val_accuracy", b.val_accuracy}, {"val_loss", b.val_loss}};
    }
    if (history_json) {
      nlohmann::ordered_json j{{"best_epoch", r.best_epoch}, {"history", hist}};
      *history_json = dup(j.dump(2));
    }
    model->network = std::move(r.network);
    model->metadata = std::move(meta);
  });
}

ne_status ne_model_predict(ne_model* model, const ne_volume* const* stacks, size_t count, double* probs) {
  return guard([&] {
    require(model && (count == 0 || probs), "NULL argument");
    auto s = samples_of(stacks, nullptr, count);
    auto p = predict(model->network, s);
    std::copy(p.probs.begin(), p.probs.end(), probs);
  });
}

void ne_model_free(ne_model* model) { delete model; }

// ---- tasks and predictions ------------------------------------------------------------------

ne_status ne_task_classes(const char* task, const char** labels, size_t* count) {
  return guard([&] {
    require(task && count, "NULL argument");
    auto classes = task_classes(parse_task(task));
    if (labels)
      for (std::size_t i = 0; i < classes.size(); ++i) labels[i] = label_name(classes[i]).data();
    *count = classes.size();
  });
}

ne_status ne_task_head(const char* task, const char* label, int* head) {
  return guard([&] {
    require(task && label && head, "NULL argument");
    auto classes = task_classes(parse_task(task));
    const auto l = parse_label(label);
    *head = -1;
    for (std::size_t i = 0; i < classes.size(); ++i)
      if (classes[i] == l) *head = static_cast<int>(i);
  });
}

ne_status ne_predictions_create(const char* model, const char* task, const double* probs, const int* actual,
                                const char* const* ids, size_t count, ne_predictions** out) {
  return guard([&] {
    require(model && task && out && (count == 0 || (probs && actual)), "NULL argument");
    PredictionTable t;
    t.classes = task_classes(parse_task(task));
    const std::size_t k = t.classes.size();
    t.prediction = {model, k, std::vector<double>(probs, probs + count * k), {}};
    for (std::size_t i = 0; i < count; ++i) {
      if (actual[i] < 0 || static_cast<std::size_t>(actual[i]) >= k)
        fail(ErrorCode::InvalidArgument, "actual label " + std::to_string(actual[i]) + " is not a head index");
      t.actual.push_back(actual[i]);
      t.prediction.ids.push_back(ids ? ids[i] : std::to_string(i));
    }
    t.predicted = t.prediction.labels();
    *out = new ne_predictions{std::move(t)};
  });
}

ne_status ne_predictions_load(const char* path, ne_predictions** out) {
  return guard([&] {
    require(path && out, "NULL argument");
    *out = new ne_predictions{load_predictions(path)};
  });
}

ne_status ne_predictions_save(const ne_predictions* preds, const char* path) {
  return guard([&] {
    require(preds && path, "NULL argument");
    save_predictions(preds->table, path);
  });
}

size_t ne_predictions_size(const ne_predictions* preds) { return preds->table.actual.size(); }

void ne_predictions_free(ne_predictions* preds) { delete preds; }

ne_status ne_ensemble(const ne_predictions* const* preds, size_t count, ne_predictions** out) {
  return guard([&] {
    require(preds && out, "NULL argument");
    require(count > 0, "no predictions to combine");
    std::vector<Prediction> ps;
    for (std::size_t i = 0; i < count; ++i) {
      require(preds[i] != nullptr, "prediction handle is NULL");
      if (preds[i]->table.classes != preds[0]->table.classes)
        fail(ErrorCode::SampleMismatch, "predictions were made for different tasks");
      if (preds[i]->table.actual != preds[0]->table.actual)
        fail(ErrorCode::SampleMismatch, "predictions disagree on the actual labels");
      ps.push_back(preds[i]->table.prediction);
    }
    PredictionTable t;
    t.classes = preds[0]->table.classes;
    t.actual = preds[0]->table.actual;
    t.predicted = majority_vote(ps);
    t.prediction = mean_prediction(ps);
    *out = new ne_predictions{std::move(t)};
  });
}

ne_status ne_predictions_metrics(const ne_predictions* preds, const char* task, uint64_t seed, char** json) {
  return guard([&] {
    require(preds && json, "NULL argument");
    const auto& t = preds->table;
    const Task tk = task_or(task, t.classes);
    if (task_classes(tk) != t.classes) fail(ErrorCode::InvalidArgument, "predictions do not match the task");
    auto m = task_metrics(tk, t.prediction, t.predicted, t.actual);
    *json = dup(metrics_json(t.prediction.model, task_name(tk), m, seed));
  });
}

ne_status ne_predictions_roc(const ne_predictions* preds, const char* task, int head, const char* path, int svg,
                             double* auc_out) {
  return guard([&] {
    require(preds && path, "NULL argument");
    const auto& t = preds->table;
    const Task tk = task_or(task, t.classes);
    if (head < 0) head = positive_head(tk);
    if (head < 0 || static_cast<std::size_t>(head) >= t.classes.size())
      fail(ErrorCode::InvalidArgument, "no head " + std::to_string(head) + " for this task");
    std::vector<double> scores(t.prediction.size());
    for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = t.prediction.row(i)[head];
    auto curve = roc_curve(scores, t.actual, head);
    emit_roc(curve, path, svg ? RocFormat::svg : RocFormat::csv);
    if (auc_out) *auc_out = auc(curve);
  });
}

ne_status ne_auc(const double* scores, const int* actual, size_t count, int positive_class, double* out) {
  return guard([&] {
    require(out && (count == 0 || (scores && actual)), "NULL argument");
    *out = auc(roc_curve({scores, count}, {actual, count}, positive_class));
  });
}

ne_status ne_majority_vote(const double* probs, size_t models, size_t count, size_t classes, int* labels) {
  return guard([&] {
    require(classes > 0 && (count == 0 || (probs && labels)), "NULL argument");
    std::vector<Prediction> ps;
    for (std::size_t m = 0; m < models; ++m)
      ps.push_back({"m" + std::to_string(m), classes,
                    std::vector<double>(probs + m * count * classes, probs + (m + 1) * count * classes), {}});
    auto v = majority_vote(ps);
    std::copy(v.begin(), v.end(), labels);
  });
}

// ---- experiments ----------------------------------------------------------------------------

namespace {

ExperimentConfig config_from(const char* config_json, const char* base_dir) {
  require(config_json != nullptr, "NULL argument");
  auto c = parse_config(config_json);
  if (base_dir) {
    const fs::path base(base_dir);
    if (!c.manifest.empty() && fs::path(c.manifest).is_relative())
      c.manifest = (base / c.manifest).lexically_normal().string();
    if (!c.template_path.empty() && fs::path(c.template_path).is_relative())
      c.template_path = (base / c.template_path).lexically_normal().string();
  }
  return c;
}

}  // namespace

ne_status ne_config_hash(const char* config_json, char** hash) {
  return guard([&] {
    require(hash != nullptr, "NULL argument");
    *hash = dup(config_hash(config_from(config_json, nullptr)));
  });
}

ne_status ne_run_experiment(const char* config_json, const char* base_dir, int overwrite, ne_log_fn log, void* user,
                            char** report_json) {
  return guard([&] {
    auto c = config_from(config_json, base_dir);
    RunOptions opt;
    opt.overwrite = overwrite != 0;
    if (log) opt.log = [log, user](const std::string& line) { log(line.c_str(), user); };
    auto rep = run_experiment(c, opt);
    if (report_json) *report_json = dup(rep.json);
  });
}

ne_status ne_provenance(const char* run_dir, char** text, int* matches) {
  return guard([&] {
    require(run_dir != nullptr, "NULL argument");
    auto info = read_provenance(run_dir);
    if (matches) *matches = info.matches();
    if (text) *text = dup(format_provenance(info));
  });
}

}  // extern "C"
