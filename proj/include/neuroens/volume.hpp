#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

namespace neuroens {

using Dims3 = std::array<std::size_t, 3>;
using Vec3f = std::array<float, 3>;

/// Axis-aligned 3D scalar grid. Voxel (i, j, k) sits at origin + (i*sx, j*sy, k*sz) mm,
/// and data is stored x-fastest.
class Volume3D {
 public:
  Volume3D() = default;
  Volume3D(Dims3 dims, Vec3f spacing, Vec3f origin = {0, 0, 0});
  Volume3D(Dims3 dims, Vec3f spacing, Vec3f origin, std::vector<float> data);

  const Dims3& dims() const noexcept { return dims_; }
  const Vec3f& spacing() const noexcept { return spacing_; }
  const Vec3f& origin() const noexcept { return origin_; }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }

  std::size_t index(std::size_t i, std::size_t j, std::size_t k) const noexcept {
    return i + dims_[0] * (j + dims_[1] * k);
  }
  float& at(std::size_t i, std::size_t j, std::size_t k) noexcept { return data_[index(i, j, k)]; }
  float at(std::size_t i, std::size_t j, std::size_t k) const noexcept {
    return data_[index(i, j, k)];
  }

  // Physical position of a (possibly fractional) voxel index.
  std::array<double, 3> position(double i, double j, double k) const noexcept;

  bool same_grid(const Volume3D& other) const noexcept;

  // Throws InvalidVolume when a scalar is NaN/Inf.
  void check_finite() const;

  friend bool operator==(const Volume3D& a, const Volume3D& b) = default;

 private:
  Dims3 dims_{0, 0, 0};
  Vec3f spacing_{1, 1, 1};
  Vec3f origin_{0, 0, 0};
  std::vector<float> data_;
};

/// h x w image with three channels, stored row-major with channels fastest (HWC).
class SliceStack {
 public:
  static constexpr std::size_t kChannels = 3;

  SliceStack() = default;
  SliceStack(std::size_t height, std::size_t width, float fill = 0.0f);
  SliceStack(std::size_t height, std::size_t width, std::vector<float> data);

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t channels() const noexcept { return kChannels; }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }

  float& at(std::size_t y, std::size_t x, std::size_t c) noexcept {
    return data_[(y * width_ + x) * kChannels + c];
  }
  float at(std::size_t y, std::size_t x, std::size_t c) const noexcept {
    return data_[(y * width_ + x) * kChannels + c];
  }

  friend bool operator==(const SliceStack& a, const SliceStack& b) = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<float> data_;
};

enum class Interpolation { nearest, trilinear };
enum class Axis { x, y, z };

// NIfTI-1 single file (.nii), little-endian. Reads int16 and float32, always writes float32.
Volume3D read_nifti(const std::filesystem::path& path);
void write_nifti(const Volume3D& vol, const std::filesystem::path& path);

// Corner voxel centers map onto corner voxel centers. The physical extent dims*spacing is kept,
// so spacing scales by old/new dims.
Volume3D resample(const Volume3D& vol, Dims3 new_dims, Interpolation interpolation);

// Slices center-1, center, center+1 along `axis` become the three channels, each resized
// bilinearly to out_h x out_w. Rows run along the second remaining axis, columns along the first.
SliceStack extract_slices(const Volume3D& vol, Axis axis, std::size_t center_index,
                          std::size_t out_h, std::size_t out_w);

// Bilinear resize of one h x w plane (row-major), corner-aligned.
std::vector<float> resize_bilinear(std::span<const float> plane, std::size_t h, std::size_t w,
                                   std::size_t out_h, std::size_t out_w);

// A SliceStack stored as a volume of dims (w, h, 3), unit spacing.
Volume3D stack_to_volume(const SliceStack& stack);
SliceStack volume_to_stack(const Volume3D& vol);

}  // namespace neuroens
