#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "neuroens/volume.hpp"

namespace neuroens {

using Vec3d = std::array<double, 3>;
using Mat3d = std::array<std::array<double, 3>, 3>;

/// x -> matrix * x + translation, in millimeters. Registration results map points of the fixed
/// (reference) grid to points of the moving volume, i.e. they pull the moving volume back.
struct AffineTransform {
  Mat3d matrix{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  Vec3d translation{0, 0, 0};

  static AffineTransform identity() { return {}; }
  static AffineTransform translation_by(Vec3d t);
  // Rotation R = Rz * Ry * Rx (radians) about `center`, followed by a shift `t`.
  static AffineTransform rigid(Vec3d angles, Vec3d t, Vec3d center);

  Vec3d apply(const Vec3d& p) const noexcept;
  double determinant() const noexcept;
  // Throws SingularTransform when |det| <= 1e-9.
  AffineTransform inverse() const;
};

// (a ∘ b)(x) = a(b(x))
AffineTransform compose(const AffineTransform& a, const AffineTransform& b);

// Max |entry| difference from the identity over matrix and translation.
double distance_from_identity(const AffineTransform& t) noexcept;

// Rotation angle (degrees) of the closest rotation to the transform's matrix.
double rotation_angle_degrees(const AffineTransform& t);

enum class RegistrationMode { rigid, affine };

struct RegistrationConfig {
  int levels = 3;
  int max_iterations = 200;    // per level
  double tolerance = 1e-6;     // relative cost decrease that counts as converged
  double initial_step_mm = 0;  // 0: one voxel of the current level
  double min_step_mm = 1e-3;
};

struct RegistrationResult {
  AffineTransform transform;
  // rigid: tx ty tz rx ry rz; affine: tx ty tz a00 .. a22. Rotations about the fixed grid center.
  std::vector<double> parameters;
  // Full-resolution cost before level 0 and after every level; nonincreasing.
  std::vector<double> level_costs;
  // Per-level optimizer traces (at that level's resolution).
  std::vector<std::vector<double>> cost_history;
  double initial_cost = 0;
  double final_cost = 0;
  // Iteration cap hit while the cost was still dropping by more than the tolerance.
  bool no_convergence = false;
};

// Mean squared intensity difference between `moving` pulled through `t` and `fixed`.
double registration_cost(const Volume3D& moving, const Volume3D& fixed, const AffineTransform& t);

// Multi-resolution gradient descent with backtracking. Throws DegenerateInput for constant inputs.
RegistrationResult register_volumes(const Volume3D& moving, const Volume3D& fixed,
                                    RegistrationMode mode, const RegistrationConfig& config = {});

// Output on reference's grid; trilinear; samples outside `vol` are 0.
Volume3D apply_transform(const Volume3D& vol, const AffineTransform& t, const Volume3D& reference);

/// Per-voxel displacement (mm) on a reference grid, one volume per axis.
struct DeformationField {
  Volume3D dx, dy, dz;

  Dims3 dims() const noexcept { return dx.dims(); }
  double max_magnitude() const;
};

// displacement(v) = t(v) - v for every voxel position v of `reference`.
DeformationField materialize(const AffineTransform& t, const Volume3D& reference);

enum class TissueClass : int { gray_matter = 0, white_matter, csf, skull, soft_tissue, background };

const char* tissue_name(TissueClass c) noexcept;

// Identities given to k components sorted by ascending mean intensity.
std::vector<TissueClass> tissue_order(int k);

/// Per-voxel posteriors over K components, voxel-major.
class TissueMap {
 public:
  TissueMap() = default;
  TissueMap(const Volume3D& grid, std::vector<TissueClass> classes);

  const Dims3& dims() const noexcept { return dims_; }
  const Vec3f& spacing() const noexcept { return spacing_; }
  const Vec3f& origin() const noexcept { return origin_; }
  std::size_t voxels() const noexcept { return dims_[0] * dims_[1] * dims_[2]; }
  int k() const noexcept { return static_cast<int>(classes_.size()); }
  const std::vector<TissueClass>& classes() const noexcept { return classes_; }

  double posterior(std::size_t voxel, int component) const noexcept {
    return posteriors_[voxel * classes_.size() + static_cast<std::size_t>(component)];
  }
  double& posterior(std::size_t voxel, int component) noexcept {
    return posteriors_[voxel * classes_.size() + static_cast<std::size_t>(component)];
  }
  // Posterior of a tissue identity; 0 when no component carries it.
  double posterior(std::size_t voxel, TissueClass c) const noexcept;

  // Argmax component; the lowest index wins exact ties.
  int label(std::size_t voxel) const noexcept;
  TissueClass tissue(std::size_t voxel) const noexcept { return classes_[label(voxel)]; }

  // Max deviation of per-voxel posterior sums from 1.
  double max_normalization_error() const noexcept;

 private:
  Dims3 dims_{0, 0, 0};
  Vec3f spacing_{1, 1, 1};
  Vec3f origin_{0, 0, 0};
  std::vector<TissueClass> classes_;
  std::vector<double> posteriors_;
};

/// exp(polynomial) over coordinates scaled to [-1, 1] on the grid it was fitted on.
struct BiasField {
  int order = 0;
  Dims3 dims{0, 0, 0};
  std::vector<double> coefficients;  // monomials x^a y^b z^c, a+b+c <= order, in basis order

  double log_value(std::size_t i, std::size_t j, std::size_t k) const noexcept;
  Volume3D evaluate(const Volume3D& grid) const;
};

// Least-squares fit of a degree-`order` polynomial to log intensity. With a tissue map the fit
// runs over gray/white/CSF voxels after removing each tissue's mean log intensity; without one it
// runs over all positive voxels. The field is scaled to unit mean over the fitted voxels.
// Throws NonPositiveIntensities.
BiasField estimate_bias(const Volume3D& vol, const TissueMap* mask, int order);
Volume3D correct_bias(const Volume3D& vol, const BiasField& field);

struct SegmentationConfig {
  int max_iterations = 200;
  double tolerance = 1e-6;  // change in mean per-voxel log-likelihood
  int kmeans_iterations = 20;
  int restarts = 1;  // extra runs seed from derive_seed(seed, r); the highest final likelihood wins
};

struct SegmentationResult {
  TissueMap map;
  std::vector<double> means;
  std::vector<double> variances;
  std::vector<double> weights;
  // Mean per-voxel log-likelihood after each EM iteration.
  std::vector<double> log_likelihood;
  bool collapsed_component = false;  // a variance hit the floor
};

// Intensity-only Gaussian mixture, k-means++ seeded. Throws DegenerateInput for constant volumes.
SegmentationResult segment_tissues(const Volume3D& vol, int k, std::uint64_t seed,
                                   const SegmentationConfig& config = {});

Volume3D gray_matter_mask(const TissueMap& tm, double threshold);
Volume3D apply_mask(const Volume3D& vol, const Volume3D& mask);
Volume3D smooth_gaussian(const Volume3D& vol, double fwhm_mm);

struct NormalizationConfig {
  int bias_order = 2;
  int bias_segmentation_k = 4;
  std::uint64_t seed = 0;
  RegistrationConfig registration;
};

struct NormalizationResult {
  Volume3D normalized;
  DeformationField field;
  AffineTransform transform;
  BiasField bias;
  RegistrationResult registration;
};

// Bias correction (order 2, masked by a preliminary segmentation), then affine registration to
// the template; the result lives on the template grid.
NormalizationResult normalize_to_template(const Volume3D& vol, const Volume3D& template_vol,
                                          const NormalizationConfig& config = {});

}  // namespace neuroens
