#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace neuroens {

struct ConfusionCounts {
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;

  std::size_t total() const noexcept { return tp + tn + fp + fn; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

// Throws LengthMismatch, Empty.
ConfusionCounts confusion(std::span<const int> predicted, std::span<const int> actual, int positive_class);

// std::nullopt when the denominator is zero.
std::optional<double> accuracy(const ConfusionCounts& c);
std::optional<double> precision(const ConfusionCounts& c);
std::optional<double> recall(const ConfusionCounts& c);

struct RocPoint {
  double fpr = 0, tpr = 0;
  friend bool operator==(const RocPoint&, const RocPoint&) = default;
};

struct RocCurve {
  std::vector<RocPoint> points;    // (0,0) first, (1,1) last
  std::vector<double> thresholds;  // score cut for points[1..]; predicted positive when score >= cut
};

// One point per distinct score; tied samples move together. Throws LengthMismatch, Empty, OneClassOnly.
RocCurve roc_curve(std::span<const double> scores, std::span<const int> actual, int positive_class);

// Trapezoidal area under the curve.
double auc(const RocCurve& curve);

enum class RocFormat { csv, svg };

void emit_roc(const RocCurve& curve, const std::filesystem::path& path, RocFormat format);
std::string roc_csv(const RocCurve& curve);
std::string roc_svg(const RocCurve& curve, const std::string& title = "");
// Throws MalformedRow, FileNotFound.
RocCurve read_roc_csv(const std::filesystem::path& path);

/// Per-sample class probabilities from one model, row-major [n, classes].
struct Prediction {
  std::string model;
  std::size_t classes = 0;
  std::vector<double> probs;
  std::vector<std::string> ids;  // sample identifiers; may be empty

  std::size_t size() const noexcept { return classes ? probs.size() / classes : 0; }
  std::span<const double> row(std::size_t i) const { return {probs.data() + i * classes, classes}; }
  // argmax per row, lowest index on ties
  std::vector<int> labels() const;
};

struct BinaryMetrics {
  ConfusionCounts counts;
  std::optional<double> accuracy, precision, recall, auc;
  std::size_t n = 0;
};

// Hard labels from `predicted`, ROC scores from the positive-class probability. AUC is left
// undefined when the actual labels hold one class only.
BinaryMetrics evaluate_binary(const Prediction& prediction, std::span<const int> predicted,
                              std::span<const int> actual, int positive_class);

struct MulticlassMetrics {
  std::vector<BinaryMetrics> per_class;  // one-vs-rest
  std::optional<double> accuracy;        // fraction of exact label matches
  std::optional<double> macro_precision, macro_recall, macro_auc;  // over the defined per-class values
};

MulticlassMetrics evaluate_multiclass(const Prediction& prediction, std::span<const int> predicted,
                                      std::span<const int> actual);

// {"model", "task", "accuracy", "precision", "recall", "auc", "n", "seed"}; undefined values are null.
std::string metrics_json(const std::string& model, const std::string& task, const BinaryMetrics& m,
                         std::uint64_t seed);

}  // namespace neuroens
