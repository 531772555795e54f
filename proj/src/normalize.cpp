#include <algorithm>

#include "neuroens/error.hpp"
#include "neuroens/preprocess.hpp"

namespace neuroens {

namespace {

// Prelim map with non-positive voxels moved to background, so the bias fit sees positive intensities only.
TissueMap positive_support(const TissueMap& map, const Volume3D& vol) {
  auto classes = map.classes();
  auto bg_it = std::find(classes.begin(), classes.end(), TissueClass::background);
  const int bg = static_cast<int>(bg_it - classes.begin());
  if (bg_it == classes.end()) classes.push_back(TissueClass::background);
  TissueMap out(vol, classes);
  for (std::size_t v = 0; v < vol.size(); ++v) {
    if (vol.data()[v] > 0.0f) {
      for (int c = 0; c < map.k(); ++c) out.posterior(v, c) = map.posterior(v, c);
    } else {
      out.posterior(v, bg) = 1.0;
    }
  }
  return out;
}

}  // namespace

NormalizationResult normalize_to_template(const Volume3D& vol, const Volume3D& template_vol,
                                          const NormalizationConfig& config) {
  if (template_vol.size() == 0) fail(ErrorCode::InvalidVolume, "empty template");
  template_vol.check_finite();

  NormalizationResult out;
  auto prelim = segment_tissues(vol, config.bias_segmentation_k, config.seed);
  const TissueMap support = positive_support(prelim.map, vol);
  out.bias = estimate_bias(vol, &support, config.bias_order);
  Volume3D corrected = correct_bias(vol, out.bias);

  out.registration = register_volumes(corrected, template_vol, RegistrationMode::affine, config.registration);
  out.transform = out.registration.transform;
  out.normalized = apply_transform(corrected, out.transform, template_vol);
  out.field = materialize(out.transform, template_vol);
  return out;
}

}  // namespace neuroens
