#pragma once

#include <array>
#include <cstdint>
#include <filesystem>

#include "neuroens/manifest.hpp"
#include "neuroens/preprocess.hpp"
#include "neuroens/random.hpp"
#include "neuroens/volume.hpp"

namespace neuroens {

// Synthetic intensities; they carry no clinical meaning.
inline constexpr float kBackgroundIntensity = 0.0f;
inline constexpr float kCsfIntensity = 30.0f;
inline constexpr float kGrayIntensity = 120.0f;
inline constexpr float kWhiteIntensity = 200.0f;
inline constexpr double kIntensityRange = 200.0;

/// Concentric ellipsoids in normalized radius r (r = 1 on the outer CSF boundary):
/// white matter r <= wm_radius, gray shell up to wm_radius + gm_span * thickness, CSF up to 1.
struct PhantomGeometry {
  std::array<double, 3> semi_axes{0.80, 0.90, 0.75};  // fraction of each half-extent
  double wm_radius = 0.55;
  double gm_span = 0.30;
};

// CN 1.0, sMCI 0.85, pMCI 0.7, AD 0.55
double thickness_factor(ClassLabel label) noexcept;

struct PhantomSpec {
  ClassLabel label = ClassLabel::CN;
  Dims3 dims{64, 64, 64};
  float spacing = 1.5f;
  double thickness = -1.0;     // < 0: thickness_factor(label)
  double noise_sigma = 0.02;   // fraction of the intensity range
  bool jitter = true;          // seeded rigid pose, <= 2 mm and <= 3 degrees
  std::uint64_t seed = 0;
  PhantomGeometry geometry{};
};

struct Phantom {
  Volume3D volume;
  TissueMap truth;  // one-hot, components (background, csf, gray, white)
  AffineTransform pose;  // maps canonical phantom coordinates to the jittered ones
};

Phantom generate_phantom(const PhantomSpec& spec);

// Voxelwise mean of the four noiseless, unjittered class phantoms.
Volume3D generate_template(Dims3 dims = {64, 64, 64}, float spacing = 1.5f);

// Hard-label volume (TissueClass codes) for persisting ground truth.
Volume3D label_volume(const TissueMap& truth);

struct PhantomDatasetOptions {
  Dims3 dims{64, 64, 64};
  float spacing = 1.5f;
  double noise_sigma = 0.02;
  bool jitter = true;
  bool write_truth = true;
};

// Writes <label>_<nnn>.nii (+ _truth.nii) and manifest.csv into out_dir; manifest paths are
// relative to out_dir. Per-sample seeds derive from the master seed.
DatasetManifest generate_dataset(const std::array<std::size_t, kNumClasses>& counts, std::uint64_t seed,
                                 const std::filesystem::path& out_dir,
                                 const PhantomDatasetOptions& options = {});

}  // namespace neuroens
