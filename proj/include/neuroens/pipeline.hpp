#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "neuroens/evaluation.hpp"
#include "neuroens/manifest.hpp"
#include "neuroens/models.hpp"
#include "neuroens/nn.hpp"
#include "neuroens/preprocess.hpp"
#include "neuroens/volume.hpp"

namespace neuroens {

inline constexpr const char* kVersion = "0.1.0";

// ---- tasks ---------------------------------------------------------------------------------

enum class Task { AD_vs_CN, pMCI_vs_sMCI, four_class };

const char* task_name(Task t) noexcept;
Task parse_task(std::string_view text);  // throws InvalidConfig

// Classes the task's head predicts, in global label order; head index i means classes[i].
std::vector<ClassLabel> task_classes(Task t);
// Head index of the positive class: AD for AD_vs_CN, pMCI for pMCI_vs_sMCI, -1 for four_class.
int positive_head(Task t);

// ---- splitting -----------------------------------------------------------------------------

struct SplitPlan {
  std::vector<std::size_t> train, val, test;  // manifest entry indices
  std::array<double, 3> ratios{0.6, 0.2, 0.2};
  std::uint64_t seed = 0;
};

// Subject-level seeded shuffle; floor(r_val * S) validation and floor(r_test * S) test subjects,
// the rest train. Throws EmptyManifest, InvalidArgument.
SplitPlan split_dataset(const DatasetManifest& manifest, std::array<double, 3> ratios = {0.6, 0.2, 0.2},
                        std::uint64_t seed = 0);

struct FoldPlan {
  std::vector<std::vector<std::size_t>> folds;  // manifest entry indices
  std::uint64_t seed = 0;
};

// Subject-level seeded shuffle into k folds of ceil(S/k) or floor(S/k) subjects.
// Throws EmptyManifest, TooFewSubjects.
FoldPlan kfold(const DatasetManifest& manifest, std::size_t k = 8, std::uint64_t seed = 0);

// Fold `fold` is the test set; floor(val_ratio * S') of the remaining S' subjects are validation.
SplitPlan fold_split(const DatasetManifest& manifest, const FoldPlan& plan, std::size_t fold,
                     double val_ratio = 0.2);

// ---- training ------------------------------------------------------------------------------

struct Sample {
  SliceStack image;
  int target = 0;  // head index
  std::string id;
};

// NHWC batch of the given samples.
Tensor<float> batch_tensor(const std::vector<Sample>& samples, std::span<const std::size_t> indices);

struct TrainingConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  OptimizerConfig optimizer{};
};

struct EpochStats {
  double train_loss = 0, train_accuracy = 0, val_loss = 0, val_accuracy = 0;
  friend bool operator==(const EpochStats&, const EpochStats&) = default;
};

struct TrainResult {
  Network<float> network;  // parameters of the best epoch
  std::vector<EpochStats> history;
  int best_epoch = -1;  // -1: no epochs ran, the initial weights are returned
};

// Shuffled mini-batches per epoch; keeps the epoch with the highest validation accuracy
// (earliest on ties). Throws ShapeMismatch, NonFiniteLoss.
TrainResult train(const NetworkSpec& spec, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                  const TrainingConfig& config, std::uint64_t seed);

// Eval-mode forward pass in batches.
Prediction predict(Network<float>& network, const std::vector<Sample>& samples, const std::string& model_name = "",
                   std::size_t batch_size = 16);

// ---- ensemble ------------------------------------------------------------------------------

// Per sample: most votes; ties go to the highest mean probability, then the lowest index.
// Throws InvalidArgument for no predictions, SampleMismatch when predictions disagree on samples.
std::vector<int> majority_vote(const std::vector<Prediction>& preds);

// Mean of the per-model probability rows.
Prediction mean_prediction(const std::vector<Prediction>& preds, const std::string& name = "ensemble");

/// A prediction with the truth labels and class names it was produced for.
struct PredictionTable {
  Prediction prediction;
  std::vector<ClassLabel> classes;
  std::vector<int> actual;     // head indices
  std::vector<int> predicted;  // head indices
};

// CSV: sample,actual,predicted,prob_<class>...
std::string format_predictions(const PredictionTable& table);
void save_predictions(const PredictionTable& table, const std::filesystem::path& path);
PredictionTable load_predictions(const std::filesystem::path& path);  // throws MalformedRow, FileNotFound

// Binary tasks use the positive class; four-class tasks report macro averages.
BinaryMetrics task_metrics(Task task, const Prediction& prediction, std::span<const int> predicted,
                           std::span<const int> actual);

// ---- preprocessing chain -------------------------------------------------------------------

struct PreprocessConfig {
  bool normalize = true;
  int bias_order = 2;
  int registration_levels = 3;
  int segmentation_k = 4;
  int segmentation_restarts = 4;
  double gm_threshold = 0.5;
  double smoothing_fwhm_mm = 3.0;
};

struct PreprocessResult {
  Volume3D gray_matter;  // masked, smoothed, on the template grid
  std::size_t center_slice = 0;  // axial gray-matter centroid
};

// normalize -> segment -> gray-matter mask -> smooth.
PreprocessResult preprocess_volume(const Volume3D& vol, const Volume3D& template_vol, const PreprocessConfig& config,
                                   std::uint64_t seed);

inline constexpr double kInputScale = 200.0;

// Axial slices around `center`, resized to h x w and divided by kInputScale.
SliceStack model_input(const Volume3D& gray_matter, std::size_t center, std::size_t h, std::size_t w);

// Axial index of the intensity-weighted centroid, kept one slice away from the borders.
std::size_t axial_centroid(const Volume3D& vol);

// ---- experiments ---------------------------------------------------------------------------

struct PhantomDataConfig {
  std::size_t per_class = 40;
  std::uint64_t seed = 1;
  Dims3 dims{64, 64, 64};
  float spacing = 1.5f;
  double noise_sigma = 0.02;
};

struct ExperimentConfig {
  Task task = Task::AD_vs_CN;
  std::vector<std::string> models{"custom_cnn", "vgg16", "alexnet"};
  std::map<std::string, std::array<std::size_t, 2>> input_size{
      {"custom_cnn", {44, 52}}, {"vgg16", {44, 52}}, {"alexnet", {176, 208}}};
  double width_multiplier = 0.125;
  double dropout = kDefaultDropout;
  TrainingConfig training{};
  std::string split_mode = "holdout";  // holdout | kfold
  std::array<double, 3> ratios{0.6, 0.2, 0.2};
  std::size_t folds = 8;
  bool augment = true;
  double augment_factor = 1.0;  // per-class target = max train class count * factor
  PreprocessConfig preprocess{};
  std::uint64_t seed = 42;
  std::string manifest;                    // relative paths resolve against the manifest's directory
  std::string template_path;               // empty: synthetic template on the first volume's grid
  std::optional<PhantomDataConfig> phantom;  // generate data into <run_dir>/data when set
  std::string run_dir = "run";
  std::size_t threads = 1;
};

// Strict: unknown keys and bad values throw InvalidConfig.
ExperimentConfig parse_config(std::string_view json_text);
ExperimentConfig load_config(const std::filesystem::path& path);  // FileNotFound, InvalidConfig
// Every field, defaults included, in a fixed key order.
std::string config_to_json(const ExperimentConfig& config);
// FNV-1a of config_to_json, as 16 hex digits.
std::string config_hash(const ExperimentConfig& config);

struct RunOptions {
  bool overwrite = false;
  std::function<void(const std::string&)> log;
};

struct ExperimentReport {
  std::string json;  // contents of report.json
  std::vector<std::string> rows;  // model names in report order, ensemble last
  std::map<std::string, BinaryMetrics> metrics;
  std::size_t unanimity_violations = 0;
  std::size_t error_majority_violations = 0;
};

// Artifacts under run_dir: data/ (phantom mode), preprocessed/, checkpoints/, predictions/, roc/,
// config.json, provenance.json, report.json. Completed stages found on disk are reused when the
// stored config hash matches; a finished or foreign run directory needs overwrite.
ExperimentReport run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

struct ProvenanceInfo {
  std::string version;
  std::string recorded_hash;
  std::string current_hash;  // hash of config.json as it is now
  std::uint64_t seed = 0;
  std::map<std::string, std::uint64_t> model_seeds;
  bool matches() const noexcept { return recorded_hash == current_hash; }
};

// Throws NotARunDirectory.
ProvenanceInfo read_provenance(const std::filesystem::path& run_dir);
std::string format_provenance(const ProvenanceInfo& info);

std::uint64_t model_seed(std::uint64_t seed, const std::string& model);

}  // namespace neuroens
