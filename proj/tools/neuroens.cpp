#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "neuroens/neuroens.h"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct Failure {
  std::string record;
};

[[noreturn]] void raise(const std::string& name, const std::string& message) {
  throw Failure{json{{"error", name}, {"message", message}}.dump()};
}

void check(ne_status s) {
  if (s != NE_OK) throw Failure{ne_last_error()};
}

struct VolumeFree {
  void operator()(ne_volume* v) const { ne_volume_free(v); }
};
struct ManifestFree {
  void operator()(ne_manifest* m) const { ne_manifest_free(m); }
};
struct ModelFree {
  void operator()(ne_model* m) const { ne_model_free(m); }
};
struct PredictionsFree {
  void operator()(ne_predictions* p) const { ne_predictions_free(p); }
};
using Volume = std::unique_ptr<ne_volume, VolumeFree>;
using Manifest = std::unique_ptr<ne_manifest, ManifestFree>;
using Model = std::unique_ptr<ne_model, ModelFree>;
using Predictions = std::unique_ptr<ne_predictions, PredictionsFree>;

std::string take(char* s) {
  std::string out = s ? s : "";
  ne_string_free(s);
  return out;
}

Volume read_volume(const fs::path& p) {
  ne_volume* v = nullptr;
  check(ne_volume_read(p.string().c_str(), &v));
  return Volume(v);
}

Manifest read_manifest(const fs::path& p) {
  ne_manifest* m = nullptr;
  check(ne_manifest_load(p.string().c_str(), &m));
  return Manifest(m);
}

struct Entry {
  fs::path path;  // resolved
  std::string stored, label, subject, ops;
  bool augmented = false;
};

std::vector<Entry> entries(const ne_manifest* m, const fs::path& manifest_path) {
  std::vector<Entry> out;
  const fs::path base = manifest_path.parent_path();
  for (std::size_t i = 0; i < ne_manifest_size(m); ++i) {
    const char *path, *label, *subject, *ops;
    int aug = 0;
    check(ne_manifest_entry(m, i, &path, &label, &subject, &aug, &ops));
    fs::path p(path);
    out.push_back({p.is_relative() ? base / p : p, path, label, subject, ops, aug != 0});
  }
  return out;
}

void refuse_existing(const fs::path& p, bool overwrite) {
  if (fs::exists(p) && !overwrite) raise("AlreadyExists", p.string() + " exists; pass --overwrite to replace it");
}

std::vector<std::string> task_labels(const std::string& task) {
  const char* labels[4];
  std::size_t n = 0;
  check(ne_task_classes(task.c_str(), labels, &n));
  return {labels, labels + n};
}

int head_of(const std::string& task, const std::string& label) {
  int head = -1;
  check(ne_task_head(task.c_str(), label.c_str(), &head));
  return head;
}

std::array<std::size_t, 2> parse_size(const std::string& text) {
  std::size_t h = 0, w = 0;
  char x = 0;
  std::istringstream in(text);
  if (!(in >> h >> x >> w) || (x != 'x' && x != 'X') || !in.eof() || h == 0 || w == 0)
    throw CLI::ValidationError("--input", "expected HxW, got " + text);
  return {h, w};
}

// Stacks and head indices for the manifest entries that belong to the task.
struct StackSet {
  std::vector<Volume> stacks;
  std::vector<int> targets;
  std::vector<std::string> ids;

  std::vector<const ne_volume*> handles() const {
    std::vector<const ne_volume*> h;
    for (const auto& s : stacks) h.push_back(s.get());
    return h;
  }
};

StackSet load_stacks(const fs::path& manifest_path, const std::string& task) {
  auto m = read_manifest(manifest_path);
  StackSet set;
  for (const auto& e : entries(m.get(), manifest_path)) {
    const int head = head_of(task, e.label);
    if (head < 0) continue;
    set.stacks.push_back(read_volume(e.path));
    set.targets.push_back(head);
    set.ids.push_back(e.path.stem().string());
  }
  if (set.stacks.empty()) raise("EmptyManifest", manifest_path.string() + " has no samples for task " + task);
  return set;
}

void make_parent(const fs::path& p) {
  std::error_code ec;
  if (auto parent = p.parent_path(); !parent.empty()) fs::create_directories(parent, ec);
  if (ec) raise("IoFailure", "cannot create " + p.parent_path().string() + ": " + ec.message());
}

void write_file(const fs::path& p, const std::string& text) {
  make_parent(p);
  std::ofstream out(p, std::ios::binary);
  out << text;
  if (!out) raise("IoFailure", "cannot write " + p.string());
}

// ---- subcommands ----------------------------------------------------------------------------

struct PhantomArgs {
  std::string out;
  std::size_t per_class = 40, dim = 64;
  std::uint64_t seed = 1;
  float spacing = 1.5f;
  double noise = 0.02;
  bool with_template = false, overwrite = false;
};

int cmd_phantom(const PhantomArgs& a) {
  refuse_existing(fs::path(a.out) / "manifest.csv", a.overwrite);
  ne_manifest* m = nullptr;
  check(ne_phantom_dataset(a.out.c_str(), a.per_class, a.seed, a.dim, a.spacing, a.noise, &m));
  Manifest owned(m);
  if (a.with_template) {
    ne_volume* t = nullptr;
    check(ne_template_create(a.dim, a.spacing, &t));
    Volume tv(t);
    check(ne_volume_write(tv.get(), (fs::path(a.out) / "template.nii").string().c_str()));
  }
  std::cout << "wrote " << ne_manifest_size(m) << " volumes and " << (fs::path(a.out) / "manifest.csv").string()
            << "\n";
  return 0;
}

struct PreprocessArgs {
  std::string manifest, out, template_path, config;
  std::uint64_t seed = 42;
  bool overwrite = false;
};

int cmd_preprocess(const PreprocessArgs& a) {
  const fs::path out(a.out), out_manifest = out / "manifest.csv";
  refuse_existing(out_manifest, a.overwrite);
  std::string pre;
  if (!a.config.empty()) {
    std::ifstream in(a.config);
    if (!in) raise("FileNotFound", "no config at " + a.config);
    json cfg;
    try {
      cfg = json::parse(in);
    } catch (const json::exception& e) {
      raise("InvalidConfig", e.what());
    }
    if (cfg.contains("preprocess")) pre = cfg["preprocess"].dump();
  }
  auto m = read_manifest(a.manifest);
  auto list = entries(m.get(), a.manifest);
  if (list.empty()) raise("EmptyManifest", a.manifest + " has no entries");
  fs::create_directories(out);

  Volume tmpl;
  if (!a.template_path.empty()) {
    tmpl = read_volume(a.template_path);
  } else {
    auto first = read_volume(list.front().path);
    std::size_t dims[3];
    float spacing[3];
    ne_volume_dims(first.get(), dims);
    ne_volume_spacing(first.get(), spacing);
    ne_volume* t = nullptr;
    check(ne_template_create(dims[0], spacing[0], &t));
    tmpl.reset(t);
  }

  ne_manifest* om = nullptr;
  check(ne_manifest_create(&om));
  Manifest out_m(om);
  std::size_t i = 0;
  for (const auto& e : list) {
    ++i;
    if (e.augmented) continue;
    auto vol = read_volume(e.path);
    ne_volume* gm = nullptr;
    std::size_t center = 0;
    check(ne_preprocess(vol.get(), tmpl.get(), pre.empty() ? nullptr : pre.c_str(), a.seed + i, &gm, &center));
    Volume gmv(gm);
    const std::string name = e.path.stem().string() + "_gm.nii";
    check(ne_volume_write(gmv.get(), (out / name).string().c_str()));
    check(ne_manifest_add(om, name.c_str(), e.label.c_str(), e.subject.c_str(), 0, ""));
    std::cerr << "[" << i << "/" << list.size() << "] " << e.stored << " -> " << name << " (center slice " << center
              << ")\n";
  }
  check(ne_manifest_save(om, out_manifest.string().c_str()));
  std::cout << "wrote " << ne_manifest_size(om) << " gray-matter volumes and " << out_manifest.string() << "\n";
  return 0;
}

struct AugmentArgs {
  std::string manifest, out, input = "44x52";
  double factor = 1.0;
  std::uint64_t seed = 42;
  bool overwrite = false;
};

int cmd_augment(const AugmentArgs& a) {
  const auto [h, w] = parse_size(a.input);
  if (!(a.factor >= 1.0)) throw CLI::ValidationError("--factor", "must be at least 1");
  const fs::path out(a.out), out_manifest = out / "manifest.csv";
  refuse_existing(out_manifest, a.overwrite);
  auto m = read_manifest(a.manifest);
  fs::create_directories(out);

  std::map<std::string, std::vector<std::pair<Entry, Volume>>> by_label;
  for (auto& e : entries(m.get(), a.manifest)) {
    if (e.augmented) continue;
    auto vol = read_volume(e.path);
    std::size_t center = 0;
    check(ne_axial_centroid(vol.get(), &center));
    ne_volume* s = nullptr;
    check(ne_model_input(vol.get(), center, h, w, &s));
    by_label[e.label].emplace_back(std::move(e), Volume(s));
  }
  if (by_label.empty()) raise("EmptyManifest", a.manifest + " has no original entries");
  std::size_t largest = 0;
  for (const auto& [label, items] : by_label) largest = std::max(largest, items.size());
  const auto target = static_cast<std::size_t>(std::ceil(double(largest) * a.factor - 1e-9));

  ne_manifest* om = nullptr;
  check(ne_manifest_create(&om));
  Manifest out_m(om);
  for (const auto& [label, items] : by_label) {
    std::vector<const ne_volume*> in;
    for (const auto& it : items) in.push_back(it.second.get());
    std::vector<ne_volume*> stacks(target, nullptr);
    std::vector<char*> chains(target, nullptr);
    check(ne_augment_to_target(in.data(), in.size(), target, a.seed + head_of("four_class", label), stacks.data(),
                               chains.data()));
    std::vector<Volume> owned;
    std::vector<std::string> chain_text;
    for (std::size_t i = 0; i < target; ++i) {
      owned.emplace_back(stacks[i]);
      chain_text.push_back(take(chains[i]));
    }
    std::map<std::string, int> replica;
    for (std::size_t i = 0; i < target; ++i) {
      const auto& src = items[i < items.size() ? i : i % items.size()].first;
      const std::string stem = src.path.stem().string();
      const bool aug = i >= items.size();
      const std::string name = aug ? stem + "_aug" + std::to_string(replica[stem]++) + ".nii" : stem + ".nii";
      check(ne_volume_write(owned[i].get(), (out / name).string().c_str()));
      check(ne_manifest_add(om, name.c_str(), label.c_str(), src.subject.c_str(), aug, chain_text[i].c_str()));
    }
  }
  check(ne_manifest_save(om, out_manifest.string().c_str()));
  std::cout << "wrote " << ne_manifest_size(om) << " slice stacks (" << target << " per class) and "
            << out_manifest.string() << "\n";
  return 0;
}

struct ShapeArgs {
  std::string model, input = "176x208";
  int classes = -1;
  double width = 1.0;
  bool csv = false;
};

int cmd_infer_shapes(const ShapeArgs& a) {
  const auto [h, w] = parse_size(a.input);
  const std::size_t k = a.classes > 0 ? std::size_t(a.classes) : (a.model == "custom_cnn" ? 4 : 2);
  ne_model* m = nullptr;
  check(ne_model_create(a.model.c_str(), h, w, k, a.width, 0.5, 0, &m));
  Model owned(m);
  char* text = nullptr;
  check(ne_model_trace(m, a.csv, &text));
  std::cout << take(text);
  return 0;
}

struct TrainArgs {
  std::string manifest, val, task = "AD_vs_CN", model, out, history, optimizer = "adam";
  std::size_t epochs = 30, batch = 8;
  double lr = 1e-3, momentum = 0.9, width = 0.125, dropout = 0.5;
  std::uint64_t seed = 42;
  bool overwrite = false;
};

int cmd_train(const TrainArgs& a) {
  refuse_existing(a.out, a.overwrite);
  auto tr = load_stacks(a.manifest, a.task);
  StackSet va;
  if (!a.val.empty()) va = load_stacks(a.val, a.task);
  std::size_t dims[3];
  ne_volume_dims(tr.stacks.front().get(), dims);
  ne_model* m = nullptr;
  check(ne_model_create(a.model.c_str(), dims[1], dims[0], task_labels(a.task).size(), a.width, a.dropout, a.seed,
                        &m));
  Model owned(m);
  ne_train_options opt;
  ne_train_options_default(&opt);
  opt.epochs = a.epochs;
  opt.batch_size = a.batch;
  opt.use_sgd = a.optimizer == "sgd";
  opt.lr = a.lr;
  opt.momentum = a.momentum;
  auto th = tr.handles(), vh = va.handles();
  char* history = nullptr;
  check(ne_model_train(m, th.data(), tr.targets.data(), th.size(), vh.data(), va.targets.data(), vh.size(), &opt,
                       a.seed, &history));
  const std::string hist = take(history);
  make_parent(a.out);
  check(ne_model_save(m, a.out.c_str()));
  if (!a.history.empty()) write_file(a.history, hist + "\n");
  char* meta = nullptr;
  check(ne_model_metadata(m, &meta));
  std::cout << take(meta) << "\n";
  return 0;
}

struct EvaluateArgs {
  std::string checkpoint, manifest, task = "AD_vs_CN", out, name;
  bool overwrite = false;
};

int cmd_evaluate(const EvaluateArgs& a) {
  if (!a.out.empty()) refuse_existing(a.out, a.overwrite);
  ne_model* m = nullptr;
  check(ne_model_load(a.checkpoint.c_str(), &m));
  Model owned(m);
  const std::size_t k = ne_model_classes(m);
  if (k != task_labels(a.task).size())
    raise("IncompatibleInput", a.checkpoint + " has " + std::to_string(k) + " outputs, task " + a.task + " needs " +
                                   std::to_string(task_labels(a.task).size()));
  auto set = load_stacks(a.manifest, a.task);
  auto h = set.handles();
  std::vector<double> probs(h.size() * k);
  check(ne_model_predict(m, h.data(), h.size(), probs.data()));
  std::vector<const char*> ids;
  for (const auto& id : set.ids) ids.push_back(id.c_str());
  const std::string name = a.name.empty() ? fs::path(a.checkpoint).stem().string() : a.name;
  ne_predictions* p = nullptr;
  check(ne_predictions_create(name.c_str(), a.task.c_str(), probs.data(), set.targets.data(), ids.data(), h.size(),
                              &p));
  Predictions pp(p);
  if (!a.out.empty()) {
    make_parent(a.out);
    check(ne_predictions_save(p, a.out.c_str()));
  }
  char* meta = nullptr;
  check(ne_model_metadata(m, &meta));
  const auto seed = json::parse(take(meta))["seed"].get<std::uint64_t>();
  char* metrics = nullptr;
  check(ne_predictions_metrics(p, a.task.c_str(), seed, &metrics));
  std::cout << take(metrics) << "\n";
  return 0;
}

struct EnsembleArgs {
  std::vector<std::string> predictions;
  std::string out;
  std::uint64_t seed = 42;
  bool overwrite = false;
};

int cmd_ensemble(const EnsembleArgs& a) {
  if (!a.out.empty()) refuse_existing(a.out, a.overwrite);
  std::vector<Predictions> owned;
  std::vector<const ne_predictions*> handles;
  for (const auto& path : a.predictions) {
    ne_predictions* p = nullptr;
    check(ne_predictions_load(path.c_str(), &p));
    owned.emplace_back(p);
    handles.push_back(p);
  }
  ne_predictions* e = nullptr;
  check(ne_ensemble(handles.data(), handles.size(), &e));
  Predictions ep(e);
  if (!a.out.empty()) {
    make_parent(a.out);
    check(ne_predictions_save(e, a.out.c_str()));
  }
  char* metrics = nullptr;
  check(ne_predictions_metrics(e, nullptr, a.seed, &metrics));
  std::cout << take(metrics) << "\n";
  return 0;
}

struct RocArgs {
  std::string predictions, out, format, label;
  bool overwrite = false;
};

int cmd_roc(const RocArgs& a) {
  refuse_existing(a.out, a.overwrite);
  std::string fmt = a.format;
  if (fmt.empty()) fmt = fs::path(a.out).extension() == ".svg" ? "svg" : "csv";
  ne_predictions* p = nullptr;
  check(ne_predictions_load(a.predictions.c_str(), &p));
  Predictions pp(p);
  int head = -1;
  if (!a.label.empty()) {
    // the predictions file names its classes; find the label's column
    std::ifstream in(a.predictions);
    std::string header;
    std::getline(in, header);
    const auto pos = header.find("prob_");
    std::istringstream cols(pos == std::string::npos ? "" : header.substr(pos));
    std::string col;
    for (int i = 0; std::getline(cols, col, ','); ++i)
      if (col == "prob_" + a.label) head = i;
    if (head < 0) raise("UnknownLabel", "no class " + a.label + " in " + a.predictions);
  }
  double area = 0;
  make_parent(a.out);
  check(ne_predictions_roc(p, nullptr, head, a.out.c_str(), fmt == "svg", &area));
  std::printf("auc %.6f\n", area);
  return 0;
}

struct RunArgs {
  std::string config, run_dir;
  std::int64_t seed = -1, epochs = -1, threads = -1;
  bool overwrite = false, quiet = false;
};

int cmd_run(const RunArgs& a) {
  std::ifstream in(a.config);
  if (!in) raise("FileNotFound", "no config at " + a.config);
  json cfg;
  try {
    cfg = json::parse(in);
  } catch (const json::exception& e) {
    raise("InvalidConfig", e.what());
  }
  if (!cfg.is_object()) raise("InvalidConfig", "the config must be a JSON object");
  if (!a.run_dir.empty()) cfg["run_dir"] = a.run_dir;
  if (a.seed >= 0) cfg["seed"] = a.seed;
  if (a.epochs >= 0) cfg["training"]["epochs"] = a.epochs;
  if (a.threads >= 0) cfg["threads"] = a.threads;
  const std::string base = fs::absolute(a.config).parent_path().string();
  ne_log_fn log = nullptr;
  if (!a.quiet) log = [](const char* line, void*) { std::cerr << line << "\n"; };
  char* report = nullptr;
  check(ne_run_experiment(cfg.dump().c_str(), base.c_str(), a.overwrite, log, nullptr, &report));
  auto rep = json::parse(take(report));
  auto print_rows = [](const json& rows) {
    std::printf("%-12s %9s %9s %9s %9s\n", "model", "accuracy", "precision", "recall", "auc");
    for (const auto& r : rows) {
      auto cell = [&](const char* k) {
        char buf[32] = "-";
        if (!r[k].is_null()) std::snprintf(buf, sizeof buf, "%.4f", r[k].get<double>());
        return std::string(buf);
      };
      std::printf("%-12s %9s %9s %9s %9s\n", r["model"].get<std::string>().c_str(), cell("accuracy").c_str(),
                  cell("precision").c_str(), cell("recall").c_str(), cell("auc").c_str());
    }
  };
  print_rows(rep.contains("metrics") ? rep["metrics"] : rep["mean_metrics"]);
  const auto& inv = rep["invariants"];
  std::printf("unanimity violations %llu, error-majority violations %llu\n",
              static_cast<unsigned long long>(inv["unanimity_violations"].get<std::uint64_t>()),
              static_cast<unsigned long long>(inv["error_majority_violations"].get<std::uint64_t>()));
  return 0;
}

int cmd_provenance(const std::string& run_dir) {
  char* text = nullptr;
  int matches = 0;
  check(ne_provenance(run_dir.c_str(), &text, &matches));
  std::cout << take(text);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Brain-volume preprocessing, CNN training and majority-vote ensembles on synthetic phantoms.\n\n"
               "Exit codes: 0 success, 1 domain error (JSON record on stderr), 2 usage error."};
  app.require_subcommand(0, 1);
  bool show_version = false;
  app.add_flag("--version", show_version, "Print the version");

  PhantomArgs ph;
  auto* phantom = app.add_subcommand("phantom", "Generate a synthetic phantom dataset with a manifest");
  phantom->add_option("--out", ph.out, "Output directory")->required();
  phantom->add_option("--per-class", ph.per_class, "Subjects per class")->capture_default_str();
  phantom->add_option("--seed", ph.seed, "Master seed")->capture_default_str();
  phantom->add_option("--dim", ph.dim, "Grid size per axis")->capture_default_str();
  phantom->add_option("--spacing", ph.spacing, "Voxel spacing in mm")->capture_default_str();
  phantom->add_option("--noise", ph.noise, "Noise standard deviation")->capture_default_str();
  phantom->add_flag("--template", ph.with_template, "Also write template.nii");
  phantom->add_flag("--overwrite", ph.overwrite, "Replace an existing dataset");

  PreprocessArgs pre;
  auto* preprocess = app.add_subcommand("preprocess", "Normalize, segment, mask and smooth every volume");
  preprocess->add_option("--manifest", pre.manifest, "Input manifest")->required()->check(CLI::ExistingFile);
  preprocess->add_option("--out", pre.out, "Output directory")->required();
  preprocess->add_option("--template", pre.template_path, "Template volume (default: synthetic)");
  preprocess->add_option("--config", pre.config, "Experiment config whose preprocess section applies");
  preprocess->add_option("--seed", pre.seed, "Seed")->capture_default_str();
  preprocess->add_flag("--overwrite", pre.overwrite, "Replace existing outputs");

  AugmentArgs au;
  auto* augment = app.add_subcommand("augment", "Extract slice stacks and balance classes by augmentation");
  augment->add_option("--manifest", au.manifest, "Manifest of preprocessed volumes")->required()->check(
      CLI::ExistingFile);
  augment->add_option("--out", au.out, "Output directory")->required();
  augment->add_option("--input", au.input, "Stack size HxW")->capture_default_str();
  augment->add_option("--factor", au.factor, "Per-class target as a multiple of the largest class")
      ->capture_default_str();
  augment->add_option("--seed", au.seed, "Seed")->capture_default_str();
  augment->add_flag("--overwrite", au.overwrite, "Replace existing outputs");

  ShapeArgs sh;
  auto* shapes = app.add_subcommand("infer-shapes", "Print a model's layer-by-layer output shapes");
  shapes->add_option("--model", sh.model, "custom_cnn, vgg16 or alexnet")->required();
  shapes->add_option("--input", sh.input, "Input size HxW")->capture_default_str();
  shapes->add_option("--classes", sh.classes, "Head width (default 4 for custom_cnn, else 2)");
  shapes->add_option("--width", sh.width, "Width multiplier")->capture_default_str();
  shapes->add_flag("--csv", sh.csv, "CSV output");

  TrainArgs tr;
  auto* trainc = app.add_subcommand("train", "Train one model on a manifest of slice stacks");
  trainc->add_option("--manifest", tr.manifest, "Training stacks")->required()->check(CLI::ExistingFile);
  trainc->add_option("--val", tr.val, "Validation stacks")->check(CLI::ExistingFile);
  trainc->add_option("--task", tr.task, "AD_vs_CN, pMCI_vs_sMCI or four_class")->capture_default_str();
  trainc->add_option("--model", tr.model, "custom_cnn, vgg16 or alexnet")->required();
  trainc->add_option("--out", tr.out, "Checkpoint path")->required();
  trainc->add_option("--history", tr.history, "Write per-epoch history JSON here");
  trainc->add_option("--epochs", tr.epochs)->capture_default_str();
  trainc->add_option("--batch-size", tr.batch)->capture_default_str();
  trainc->add_option("--optimizer", tr.optimizer)->check(CLI::IsMember({"adam", "sgd"}))->capture_default_str();
  trainc->add_option("--lr", tr.lr)->capture_default_str();
  trainc->add_option("--momentum", tr.momentum)->capture_default_str();
  trainc->add_option("--width", tr.width, "Width multiplier")->capture_default_str();
  trainc->add_option("--dropout", tr.dropout)->capture_default_str();
  trainc->add_option("--seed", tr.seed)->capture_default_str();
  trainc->add_flag("--overwrite", tr.overwrite, "Replace an existing checkpoint");

  EvaluateArgs ev;
  auto* evaluate = app.add_subcommand("evaluate", "Predict a manifest with a checkpoint and print metrics JSON");
  evaluate->add_option("--checkpoint", ev.checkpoint)->required()->check(CLI::ExistingFile);
  evaluate->add_option("--manifest", ev.manifest, "Test stacks")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--task", ev.task)->capture_default_str();
  evaluate->add_option("--out", ev.out, "Predictions CSV");
  evaluate->add_option("--name", ev.name, "Model name (default: checkpoint file stem)");
  evaluate->add_flag("--overwrite", ev.overwrite, "Replace an existing predictions file");

  EnsembleArgs en;
  auto* ensemble = app.add_subcommand("ensemble", "Majority-vote prediction files and print metrics JSON");
  ensemble->add_option("--predictions", en.predictions, "Prediction CSVs")->required()->check(CLI::ExistingFile);
  ensemble->add_option("--out", en.out, "Ensemble predictions CSV");
  ensemble->add_option("--seed", en.seed, "Seed recorded in the metrics")->capture_default_str();
  ensemble->add_flag("--overwrite", en.overwrite, "Replace an existing output");

  RocArgs ro;
  auto* roc = app.add_subcommand("roc", "Write a ROC curve from a predictions file and print its AUC");
  roc->add_option("--predictions", ro.predictions)->required()->check(CLI::ExistingFile);
  roc->add_option("--out", ro.out, "Output path")->required();
  roc->add_option("--format", ro.format, "csv or svg (default: from the extension)")
      ->check(CLI::IsMember({"csv", "svg"}));
  roc->add_option("--class", ro.label, "Positive class (default: the task's)");
  roc->add_flag("--overwrite", ro.overwrite, "Replace an existing output");

  RunArgs ru;
  auto* run = app.add_subcommand("run", "Run a full experiment from a config file");
  run->add_option("--config", ru.config, "Experiment config JSON")->required();
  run->add_option("--run-dir", ru.run_dir, "Override run_dir");
  run->add_option("--seed", ru.seed, "Override seed")->check(CLI::NonNegativeNumber);
  run->add_option("--epochs", ru.epochs, "Override training.epochs")->check(CLI::NonNegativeNumber);
  run->add_option("--threads", ru.threads, "Override threads")->check(CLI::PositiveNumber);
  run->add_flag("--overwrite", ru.overwrite, "Clear a finished or foreign run directory first");
  run->add_flag("--quiet", ru.quiet, "No progress log");

  std::string prov_dir;
  auto* provenance = app.add_subcommand("provenance", "Print version, config hash and seeds of a run directory");
  provenance->add_option("--run-dir", prov_dir)->required();

  if (argc < 2) {
    std::cerr << app.help();
    return 2;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  if (show_version) {
    std::cout << "neuroens " << ne_version() << "\n";
    return 0;
  }

  try {
    if (*phantom) return cmd_phantom(ph);
    if (*preprocess) return cmd_preprocess(pre);
    if (*augment) return cmd_augment(au);
    if (*shapes) return cmd_infer_shapes(sh);
    if (*trainc) return cmd_train(tr);
    if (*evaluate) return cmd_evaluate(ev);
    if (*ensemble) return cmd_ensemble(en);
    if (*roc) return cmd_roc(ro);
    if (*run) return cmd_run(ru);
    if (*provenance) return cmd_provenance(prov_dir);
    std::cerr << app.help();
    return 2;
  } catch (const Failure& f) {
    std::cerr << f.record << "\n";
    return 1;
  } catch (const CLI::ValidationError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", "Internal"}, {"message", e.what()}}.dump() << "\n";
    return 1;
  }
}
