#include "neuroens/manifest.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <unordered_set>

#include "neuroens/error.hpp"

namespace neuroens {

namespace {

std::vector<std::string> split_row(std::string_view line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    auto comma = line.find(',', start);
    fields.emplace_back(line.substr(start, comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return fields;
}

Provenance parse_provenance(std::string_view text, std::size_t line_no) {
  if (text == "original") return Provenance::original;
  if (text == "augmented") return Provenance::augmented;
  fail(ErrorCode::MalformedRow,
       "line " + std::to_string(line_no) + ": provenance must be original|augmented");
}

void check_field(const std::string& field) {
  if (field.find_first_of(",\r\n") != std::string::npos)
    fail(ErrorCode::MalformedRow, "manifest field contains a comma or newline: " + field);
}

}  // namespace

std::string_view label_name(ClassLabel label) noexcept {
  switch (label) {
    case ClassLabel::CN: return "CN";
    case ClassLabel::pMCI: return "pMCI";
    case ClassLabel::sMCI: return "sMCI";
    case ClassLabel::AD: return "AD";
  }
  return "?";
}

ClassLabel parse_label(std::string_view text) {
  for (auto c : kAllClasses)
    if (label_name(c) == text) return c;
  fail(ErrorCode::UnknownLabel, "unknown class label '" + std::string(text) +
                                    "' (expected CN, pMCI, sMCI or AD)");
}

DatasetManifest::DatasetManifest(std::vector<ManifestEntry> entries) {
  entries_.reserve(entries.size());
  for (auto& e : entries) add(std::move(e));
}

void DatasetManifest::add(ManifestEntry entry) {
  if (!paths_.insert(entry.path).second)
    fail(ErrorCode::DuplicatePath, "duplicate manifest path: " + entry.path);
  entries_.push_back(std::move(entry));
}

std::array<std::size_t, kNumClasses> DatasetManifest::class_counts() const {
  std::array<std::size_t, kNumClasses> counts{};
  for (const auto& e : entries_) ++counts[static_cast<std::size_t>(e.label)];
  return counts;
}

std::vector<std::string> DatasetManifest::subjects() const {
  std::vector<std::string> out;
  std::unordered_set<std::string> seen;
  for (const auto& e : entries_)
    if (seen.insert(e.subject_id).second) out.push_back(e.subject_id);
  return out;
}

void DatasetManifest::validate() const {
  std::set<std::string> originals;
  for (const auto& e : entries_)
    if (e.provenance == Provenance::original) originals.insert(e.subject_id);
  for (const auto& e : entries_)
    if (e.provenance == Provenance::augmented && !originals.count(e.subject_id))
      fail(ErrorCode::MalformedRow, "augmented entry " + e.path +
                                        " references subject without an original: " + e.subject_id);
}

DatasetManifest parse_manifest(std::string_view csv) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start < csv.size()) {
    auto nl = csv.find('\n', start);
    auto line = csv.substr(start, nl == std::string_view::npos ? std::string_view::npos : nl - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.push_back(line);
    if (nl == std::string_view::npos) break;
    start = nl + 1;
  }
  if (lines.empty() || (lines[0] != "path,label,subject_id,provenance" &&
                        lines[0] != "path,label,subject_id,provenance,ops"))
    fail(ErrorCode::MalformedRow, "manifest header must be path,label,subject_id,provenance[,ops]");
  std::size_t ncols = lines[0].ends_with(",ops") ? 5 : 4;

  DatasetManifest m;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    auto f = split_row(lines[i]);
    if (f.size() != ncols || f[0].empty() || f[2].empty())
      fail(ErrorCode::MalformedRow, "line " + std::to_string(i + 1) + ": expected " +
                                        std::to_string(ncols) + " non-empty fields");
    ManifestEntry e;
    e.path = f[0];
    e.label = parse_label(f[1]);
    e.subject_id = f[2];
    e.provenance = parse_provenance(f[3], i + 1);
    if (ncols == 5) e.ops = f[4];
    m.add(std::move(e));
  }
  m.validate();
  return m;
}

std::string format_manifest(const DatasetManifest& manifest) {
  bool with_ops = false;
  for (const auto& e : manifest.entries()) with_ops |= !e.ops.empty();
  std::ostringstream os;
  os << "path,label,subject_id,provenance" << (with_ops ? ",ops" : "") << '\n';
  for (const auto& e : manifest.entries()) {
    check_field(e.path);
    check_field(e.subject_id);
    check_field(e.ops);
    os << e.path << ',' << label_name(e.label) << ',' << e.subject_id << ','
       << (e.provenance == Provenance::original ? "original" : "augmented");
    if (with_ops) os << ',' << e.ops;
    os << '\n';
  }
  return os.str();
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    if (!std::filesystem::exists(path)) fail(ErrorCode::FileNotFound, "no such file: " + path.string());
    fail(ErrorCode::IoFailure, "cannot open " + path.string());
  }
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_manifest(ss.str());
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  auto text = format_manifest(manifest);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoFailure, "cannot open " + path.string() + " for writing");
  out << text;
  if (!out) fail(ErrorCode::IoFailure, "write failed: " + path.string());
}

}  // namespace neuroens
