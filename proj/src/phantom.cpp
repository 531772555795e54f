#include "neuroens/phantom.hpp"

#include <cmath>
#include <cstdio>
#include <random>

#include "neuroens/error.hpp"

namespace neuroens {

double thickness_factor(ClassLabel label) noexcept {
  switch (label) {
    case ClassLabel::CN: return 1.0;
    case ClassLabel::sMCI: return 0.85;
    case ClassLabel::pMCI: return 0.7;
    case ClassLabel::AD: return 0.55;
  }
  return 1.0;
}

Phantom generate_phantom(const PhantomSpec& spec) {
  double thickness = spec.thickness < 0.0 ? thickness_factor(spec.label) : spec.thickness;
  if (spec.noise_sigma < 0.0) fail(ErrorCode::InvalidArgument, "noise sigma must be >= 0");
  const auto& d = spec.dims;
  Vec3f sp{spec.spacing, spec.spacing, spec.spacing};
  Volume3D vol(d, sp);

  Vec3d center;
  Vec3d semi;
  for (int a = 0; a < 3; ++a) {
    double half = 0.5 * static_cast<double>(d[a] - 1) * spec.spacing;
    center[a] = half;
    semi[a] = spec.geometry.semi_axes[a] * half;
  }

  std::mt19937_64 rng(spec.seed);
  Phantom out;
  if (spec.jitter) {
    std::uniform_real_distribution<double> shift(-1.15, 1.15);
    std::uniform_real_distribution<double> angle(-1.7, 1.7);
    Vec3d t{shift(rng), shift(rng), shift(rng)};
    Vec3d r{angle(rng) * M_PI / 180.0, angle(rng) * M_PI / 180.0, angle(rng) * M_PI / 180.0};
    out.pose = AffineTransform::rigid(r, t, center);
  }
  AffineTransform inv = out.pose.inverse();

  const double wm = spec.geometry.wm_radius;
  const double gm = wm + spec.geometry.gm_span * thickness;
  static const std::vector<TissueClass> kClasses{TissueClass::background, TissueClass::csf,
                                                 TissueClass::gray_matter, TissueClass::white_matter};
  constexpr float kLevels[4] = {kBackgroundIntensity, kCsfIntensity, kGrayIntensity, kWhiteIntensity};
  out.truth = TissueMap(vol, kClasses);

  for (std::size_t k = 0; k < d[2]; ++k)
    for (std::size_t j = 0; j < d[1]; ++j)
      for (std::size_t i = 0; i < d[0]; ++i) {
        auto p = inv.apply(vol.position(static_cast<double>(i), static_cast<double>(j), static_cast<double>(k)));
        double r2 = 0;
        for (int a = 0; a < 3; ++a) r2 += ((p[a] - center[a]) / semi[a]) * ((p[a] - center[a]) / semi[a]);
        double r = std::sqrt(r2);
        int cls = r <= wm ? 3 : r <= gm ? 2 : r <= 1.0 ? 1 : 0;
        vol.at(i, j, k) = kLevels[cls];
        out.truth.posterior(vol.index(i, j, k), cls) = 1.0;
      }

  if (spec.noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, spec.noise_sigma * kIntensityRange);
    for (auto& v : vol.data()) v = static_cast<float>(v + noise(rng));
  }
  out.volume = std::move(vol);
  return out;
}

Volume3D generate_template(Dims3 dims, float spacing) {
  Volume3D acc(dims, {spacing, spacing, spacing});
  std::vector<double> sum(acc.size(), 0.0);
  for (auto label : kAllClasses) {
    PhantomSpec spec;
    spec.label = label;
    spec.dims = dims;
    spec.spacing = spacing;
    spec.noise_sigma = 0.0;
    spec.jitter = false;
    auto p = generate_phantom(spec);
    for (std::size_t v = 0; v < sum.size(); ++v) sum[v] += p.volume.data()[v];
  }
  for (std::size_t v = 0; v < sum.size(); ++v)
    acc.data()[v] = static_cast<float>(sum[v] / static_cast<double>(kNumClasses));
  return acc;
}

Volume3D label_volume(const TissueMap& truth) {
  Volume3D out(truth.dims(), truth.spacing(), truth.origin());
  for (std::size_t v = 0; v < truth.voxels(); ++v)
    out.data()[v] = static_cast<float>(static_cast<int>(truth.tissue(v)));
  return out;
}

DatasetManifest generate_dataset(const std::array<std::size_t, kNumClasses>& counts, std::uint64_t seed,
                                 const std::filesystem::path& out_dir,
                                 const PhantomDatasetOptions& options) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) fail(ErrorCode::IoFailure, "cannot create " + out_dir.string() + ": " + ec.message());

  DatasetManifest manifest;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    ClassLabel label = kAllClasses[c];
    for (std::size_t i = 0; i < counts[c]; ++i) {
      PhantomSpec spec;
      spec.label = label;
      spec.dims = options.dims;
      spec.spacing = options.spacing;
      spec.noise_sigma = options.noise_sigma;
      spec.jitter = options.jitter;
      spec.seed = derive_seed(seed, c, i);
      auto p = generate_phantom(spec);

      char stem[64];
      std::snprintf(stem, sizeof stem, "%s_%03zu", std::string(label_name(label)).c_str(), i);
      std::string file = std::string(stem) + ".nii";
      write_nifti(p.volume, out_dir / file);
      if (options.write_truth) write_nifti(label_volume(p.truth), out_dir / (std::string(stem) + "_truth.nii"));

      char subject[64];
      std::snprintf(subject, sizeof subject, "%s-%03zu", std::string(label_name(label)).c_str(), i);
      manifest.add({file, label, subject, Provenance::original, {}});
    }
  }
  save_manifest(manifest, out_dir / "manifest.csv");
  return manifest;
}

}  // namespace neuroens
