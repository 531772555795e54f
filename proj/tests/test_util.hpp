#pragma once

#include <atomic>
#include <filesystem>
#include <optional>
#include <random>
#include <string>

#include "neuroens/error.hpp"

// Scratch directory removed on scope exit.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("neuroens_test_" + std::to_string(rd()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

template <typename F>
std::optional<neuroens::ErrorCode> error_code_of(F&& f) {
  try {
    f();
  } catch (const neuroens::Error& e) {
    return e.code();
  }
  return std::nullopt;
}
