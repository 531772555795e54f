#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

namespace neuroens {

// Global class order; indices are used for all tie-breaking.
enum class ClassLabel : int { CN = 0, pMCI = 1, sMCI = 2, AD = 3 };
inline constexpr std::size_t kNumClasses = 4;
inline constexpr std::array<ClassLabel, kNumClasses> kAllClasses{ClassLabel::CN, ClassLabel::pMCI,
                                                                  ClassLabel::sMCI, ClassLabel::AD};

std::string_view label_name(ClassLabel label) noexcept;
// Throws UnknownLabel.
ClassLabel parse_label(std::string_view text);

enum class Provenance { original, augmented };

struct ManifestEntry {
  std::string path;
  ClassLabel label = ClassLabel::CN;
  std::string subject_id;
  Provenance provenance = Provenance::original;
  std::string ops;  // augmentation op chain, e.g. "mirror:h|rotate:7.5"; empty for originals

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

class DatasetManifest {
 public:
  DatasetManifest() = default;
  explicit DatasetManifest(std::vector<ManifestEntry> entries);

  // Throws DuplicatePath.
  void add(ManifestEntry entry);

  const std::vector<ManifestEntry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  const ManifestEntry& operator[](std::size_t i) const { return entries_[i]; }

  std::array<std::size_t, kNumClasses> class_counts() const;

  // Distinct subject ids in first-appearance order.
  std::vector<std::string> subjects() const;

  // Checks that every augmented entry names a subject that also has an original entry.
  void validate() const;

  friend bool operator==(const DatasetManifest& a, const DatasetManifest& b) {
    return a.entries_ == b.entries_;
  }

 private:
  std::vector<ManifestEntry> entries_;
  std::unordered_set<std::string> paths_;
};

// CSV with header path,label,subject_id,provenance[,ops].
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

DatasetManifest parse_manifest(std::string_view csv);
std::string format_manifest(const DatasetManifest& manifest);

}  // namespace neuroens
