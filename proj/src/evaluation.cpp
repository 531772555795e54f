#include "neuroens/evaluation.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "neuroens/error.hpp"

namespace neuroens {

namespace {

void check_lengths(std::size_t a, std::size_t b) {
  if (a != b) fail(ErrorCode::LengthMismatch, "length mismatch: " + std::to_string(a) + " vs " + std::to_string(b));
  if (a == 0) fail(ErrorCode::Empty, "no samples to evaluate");
}

std::optional<double> ratio(std::size_t num, std::size_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

std::string fmt_double(double v) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::optional<double> mean_defined(const std::vector<BinaryMetrics>& per, std::optional<double> BinaryMetrics::*field) {
  double sum = 0;
  std::size_t n = 0;
  for (const auto& m : per)
    if (m.*field) {
      sum += *(m.*field);
      ++n;
    }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

}  // namespace

ConfusionCounts confusion(std::span<const int> predicted, std::span<const int> actual, int positive_class) {
  check_lengths(predicted.size(), actual.size());
  ConfusionCounts c;
  for (std::size_t i = 0; i < actual.size(); ++i) {
    const bool p = predicted[i] == positive_class, a = actual[i] == positive_class;
    if (p && a) ++c.tp;
    else if (p) ++c.fp;
    else if (a) ++c.fn;
    else ++c.tn;
  }
  return c;
}

std::optional<double> accuracy(const ConfusionCounts& c) { return ratio(c.tp + c.tn, c.total()); }
std::optional<double> precision(const ConfusionCounts& c) { return ratio(c.tp, c.tp + c.fp); }
std::optional<double> recall(const ConfusionCounts& c) { return ratio(c.tp, c.tp + c.fn); }

RocCurve roc_curve(std::span<const double> scores, std::span<const int> actual, int positive_class) {
  check_lengths(scores.size(), actual.size());
  std::size_t pos = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i])) fail(ErrorCode::InvalidArgument, "non-finite score at index " + std::to_string(i));
    pos += actual[i] == positive_class;
  }
  const std::size_t neg = actual.size() - pos;
  if (pos == 0 || neg == 0) fail(ErrorCode::OneClassOnly, "ROC needs both positive and negative samples");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });

  RocCurve curve;
  curve.points.push_back({0.0, 0.0});
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double cut = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == cut; ++i) (actual[order[i]] == positive_class ? tp : fp)++;
    curve.points.push_back({static_cast<double>(fp) / static_cast<double>(neg),
                            static_cast<double>(tp) / static_cast<double>(pos)});
    curve.thresholds.push_back(cut);
  }
  return curve;
}

double auc(const RocCurve& curve) {
  double area = 0;
  for (std::size_t i = 1; i < curve.points.size(); ++i) {
    const auto& a = curve.points[i - 1];
    const auto& b = curve.points[i];
    area += (b.fpr - a.fpr) * (a.tpr + b.tpr) * 0.5;
  }
  return std::clamp(area, 0.0, 1.0);
}

std::string roc_csv(const RocCurve& curve) {
  std::string out = "fpr,tpr\n";
  for (const auto& p : curve.points) out += fmt_double(p.fpr) + "," + fmt_double(p.tpr) + "\n";
  return out;
}

std::string roc_svg(const RocCurve& curve, const std::string& title) {
  constexpr double size = 400, margin = 50;
  auto x = [&](double f) { return margin + f * size; };
  auto y = [&](double t) { return margin + (1.0 - t) * size; };
  std::ostringstream s;
  s.precision(6);
  s << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
    << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size + 2 * margin << "\" height=\""
    << size + 2 * margin << "\" viewBox=\"0 0 " << size + 2 * margin << " " << size + 2 * margin << "\">\n"
    << "  <rect x=\"" << margin << "\" y=\"" << margin << "\" width=\"" << size << "\" height=\"" << size
    << "\" fill=\"white\" stroke=\"black\"/>\n"
    << "  <line x1=\"" << x(0) << "\" y1=\"" << y(0) << "\" x2=\"" << x(1) << "\" y2=\"" << y(1)
    << "\" stroke=\"gray\" stroke-dasharray=\"4 4\"/>\n"
    << "  <polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"";
  for (std::size_t i = 0; i < curve.points.size(); ++i)
    s << (i ? " " : "") << x(curve.points[i].fpr) << "," << y(curve.points[i].tpr);
  s << "\"/>\n"
    << "  <text x=\"" << margin + size / 2 << "\" y=\"" << size + 1.7 * margin
    << "\" text-anchor=\"middle\" font-size=\"14\">False positive rate</text>\n"
    << "  <text x=\"" << margin * 0.4 << "\" y=\"" << margin + size / 2 << "\" text-anchor=\"middle\" font-size=\"14\""
    << " transform=\"rotate(-90 " << margin * 0.4 << " " << margin + size / 2 << ")\">True positive rate</text>\n";
  std::string t = title.empty() ? "ROC" : title;
  std::string escaped;
  for (char c : t) {
    switch (c) {
      case '<': escaped += "&lt;"; break;
      case '>': escaped += "&gt;"; break;
      case '&': escaped += "&amp;"; break;
      case '"': escaped += "&quot;"; break;
      default: escaped += c;
    }
  }
  s << "  <text x=\"" << margin + size / 2 << "\" y=\"" << margin * 0.6
    << "\" text-anchor=\"middle\" font-size=\"16\">" << escaped << " (AUC " << auc(curve) << ")</text>\n"
    << "</svg>\n";
  return s.str();
}

void emit_roc(const RocCurve& curve, const std::filesystem::path& path, RocFormat format) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoFailure, "cannot open " + path.string() + " for writing");
  out << (format == RocFormat::csv ? roc_csv(curve) : roc_svg(curve, path.stem().string()));
  if (!out) fail(ErrorCode::IoFailure, "write failed for " + path.string());
}

RocCurve read_roc_csv(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) fail(ErrorCode::FileNotFound, "no ROC file at " + path.string());
  std::ifstream in(path);
  std::string line;
  if (!std::getline(in, line) || line != "fpr,tpr") fail(ErrorCode::MalformedRow, "ROC CSV must start with fpr,tpr");
  RocCurve curve;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto comma = line.find(',');
    RocPoint p;
    const char* end = line.data() + line.size();
    bool ok = comma != std::string::npos;
    if (ok) {
      auto a = std::from_chars(line.data(), line.data() + comma, p.fpr);
      auto b = std::from_chars(line.data() + comma + 1, end, p.tpr);
      ok = a.ec == std::errc{} && a.ptr == line.data() + comma && b.ec == std::errc{} && b.ptr == end;
    }
    if (!ok) fail(ErrorCode::MalformedRow, "bad ROC row " + std::to_string(lineno) + ": " + line);
    curve.points.push_back(p);
  }
  return curve;
}

std::vector<int> Prediction::labels() const {
  std::vector<int> out(size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto r = row(i);
    out[i] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

BinaryMetrics evaluate_binary(const Prediction& prediction, std::span<const int> predicted,
                              std::span<const int> actual, int positive_class) {
  check_lengths(predicted.size(), actual.size());
  if (prediction.size() != actual.size())
    fail(ErrorCode::LengthMismatch, "prediction covers " + std::to_string(prediction.size()) + " samples, expected " +
                                        std::to_string(actual.size()));
  if (positive_class < 0 || static_cast<std::size_t>(positive_class) >= prediction.classes)
    fail(ErrorCode::InvalidArgument, "positive class " + std::to_string(positive_class) + " outside the head");
  BinaryMetrics m;
  m.counts = confusion(predicted, actual, positive_class);
  m.accuracy = accuracy(m.counts);
  m.precision = precision(m.counts);
  m.recall = recall(m.counts);
  m.n = actual.size();
  if (m.counts.tp + m.counts.fn > 0 && m.counts.tn + m.counts.fp > 0) {
    std::vector<double> scores(actual.size());
    for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = prediction.row(i)[positive_class];
    m.auc = auc(roc_curve(scores, actual, positive_class));
  }
  return m;
}

MulticlassMetrics evaluate_multiclass(const Prediction& prediction, std::span<const int> predicted,
                                      std::span<const int> actual) {
  check_lengths(predicted.size(), actual.size());
  MulticlassMetrics m;
  for (std::size_t c = 0; c < prediction.classes; ++c)
    m.per_class.push_back(evaluate_binary(prediction, predicted, actual, static_cast<int>(c)));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < actual.size(); ++i) hits += predicted[i] == actual[i];
  m.accuracy = ratio(hits, actual.size());
  m.macro_precision = mean_defined(m.per_class, &BinaryMetrics::precision);
  m.macro_recall = mean_defined(m.per_class, &BinaryMetrics::recall);
  m.macro_auc = mean_defined(m.per_class, &BinaryMetrics::auc);
  return m;
}

std::string metrics_json(const std::string& model, const std::string& task, const BinaryMetrics& m,
                         std::uint64_t seed) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::ordered_json j{{"model", model},           {"task", task},
                           {"accuracy", opt(m.accuracy)}, {"precision", opt(m.precision)},
                           {"recall", opt(m.recall)},     {"auc", opt(m.auc)},
                           {"n", m.n},                    {"seed", seed}};
  return j.dump();
}

}  // namespace neuroens
