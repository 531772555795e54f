#include <cmath>

#include "neuroens/error.hpp"
#include "neuroens/preprocess.hpp"

namespace neuroens {

namespace {

constexpr double kFwhmToSigma = 2.3548;

std::vector<double> gaussian_kernel(double sigma_vox) {
  auto radius = static_cast<std::size_t>(std::ceil(4.0 * sigma_vox));
  std::vector<double> k(2 * radius + 1);
  double sum = 0;
  for (std::size_t i = 0; i < k.size(); ++i) {
    double x = static_cast<double>(i) - static_cast<double>(radius);
    k[i] = std::exp(-0.5 * x * x / (sigma_vox * sigma_vox));
    sum += k[i];
  }
  for (auto& v : k) v /= sum;
  return k;
}

// Convolves along one axis. Taps falling off the grid are dropped and the remaining weights
// renormalized, so constants are preserved up to the border.
void convolve_axis(std::vector<double>& data, const Dims3& d, int axis, const std::vector<double>& kernel) {
  const auto r = static_cast<std::ptrdiff_t>(kernel.size() / 2);
  const std::size_t stride = axis == 0 ? 1 : axis == 1 ? d[0] : d[0] * d[1];
  const auto n = static_cast<std::ptrdiff_t>(d[axis]);
  std::vector<double> line(static_cast<std::size_t>(n));
  std::vector<double> out(static_cast<std::size_t>(n));
  for (std::size_t k = 0; k < d[2]; ++k)
    for (std::size_t j = 0; j < d[1]; ++j)
      for (std::size_t i = 0; i < d[0]; ++i) {
        std::size_t pos[3] = {i, j, k};
        if (pos[axis] != 0) continue;
        std::size_t base = i + d[0] * (j + d[1] * k);
        for (std::ptrdiff_t t = 0; t < n; ++t) line[t] = data[base + static_cast<std::size_t>(t) * stride];
        for (std::ptrdiff_t t = 0; t < n; ++t) {
          double acc = 0, wsum = 0;
          for (std::ptrdiff_t q = -r; q <= r; ++q) {
            std::ptrdiff_t s = t + q;
            if (s < 0 || s >= n) continue;
            double w = kernel[static_cast<std::size_t>(q + r)];
            acc += w * line[s];
            wsum += w;
          }
          out[t] = t - r >= 0 && t + r < n ? acc : acc / wsum;
        }
        for (std::ptrdiff_t t = 0; t < n; ++t) data[base + static_cast<std::size_t>(t) * stride] = out[t];
      }
}

}  // namespace

Volume3D gray_matter_mask(const TissueMap& tm, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0))
    fail(ErrorCode::InvalidArgument, "mask threshold must lie in (0, 1)");
  Volume3D mask(tm.dims(), tm.spacing(), tm.origin());
  for (std::size_t v = 0; v < tm.voxels(); ++v)
    mask.data()[v] = tm.posterior(v, TissueClass::gray_matter) >= threshold ? 1.0f : 0.0f;
  return mask;
}

Volume3D apply_mask(const Volume3D& vol, const Volume3D& mask) {
  if (vol.dims() != mask.dims()) fail(ErrorCode::DimMismatch, "mask dims differ from volume dims");
  Volume3D out = vol;
  for (std::size_t v = 0; v < out.size(); ++v) out.data()[v] *= mask.data()[v];
  return out;
}

Volume3D smooth_gaussian(const Volume3D& vol, double fwhm_mm) {
  if (!(fwhm_mm >= 0.0)) fail(ErrorCode::InvalidArgument, "fwhm must be non-negative");
  if (fwhm_mm == 0.0) return vol;
  std::vector<double> data(vol.data().begin(), vol.data().end());
  double sigma_mm = fwhm_mm / kFwhmToSigma;
  for (int a = 0; a < 3; ++a) {
    if (vol.dims()[a] < 2) continue;
    convolve_axis(data, vol.dims(), a, gaussian_kernel(sigma_mm / vol.spacing()[a]));
  }
  Volume3D out(vol.dims(), vol.spacing(), vol.origin());
  for (std::size_t v = 0; v < out.size(); ++v) out.data()[v] = static_cast<float>(data[v]);
  return out;
}

}  // namespace neuroens
