#include <cmath>
#include <cstring>
#include <set>

#include "doctest.h"
#include "neuroens/phantom.hpp"
#include "test_util.hpp"

using namespace neuroens;

namespace {

std::size_t count_tissue(const Phantom& p, TissueClass c) {
  std::size_t n = 0;
  for (std::size_t v = 0; v < p.truth.voxels(); ++v) n += p.truth.tissue(v) == c;
  return n;
}

Phantom clean(ClassLabel label, Dims3 dims = {48, 48, 48}) {
  PhantomSpec spec;
  spec.label = label;
  spec.dims = dims;
  spec.noise_sigma = 0.0;
  spec.jitter = false;
  return generate_phantom(spec);
}

}  // namespace

TEST_CASE("noiseless unjittered phantom has exactly the four tissue levels") {
  auto p = clean(ClassLabel::CN, {20, 24, 18});
  std::set<float> values(p.volume.data().begin(), p.volume.data().end());
  CHECK(values == std::set<float>{kBackgroundIntensity, kCsfIntensity, kGrayIntensity, kWhiteIntensity});
  CHECK(p.truth.max_normalization_error() == 0.0);
  CHECK(p.volume.spacing() == Vec3f{1.5f, 1.5f, 1.5f});
}

TEST_CASE("same seed gives identical phantoms, different seeds differ") {
  PhantomSpec spec;
  spec.dims = {16, 16, 16};
  spec.seed = 77;
  auto a = generate_phantom(spec);
  auto b = generate_phantom(spec);
  CHECK(std::memcmp(a.volume.data().data(), b.volume.data().data(), a.volume.size() * 4) == 0);
  spec.seed = 78;
  CHECK_FALSE(generate_phantom(spec).volume == a.volume);
}

TEST_CASE("gray shell volume follows the thickness factor") {
  // oracle: gray shell of an ellipsoid scales as (r_gm^3 - r_wm^3)
  auto shell = [](double f) { return std::pow(0.55 + 0.30 * f, 3) - std::pow(0.55, 3); };
  double expected = shell(0.55) / shell(1.0);
  CHECK(expected == doctest::Approx(0.445).epsilon(0.01));
  double ratio = static_cast<double>(count_tissue(clean(ClassLabel::AD), TissueClass::gray_matter)) /
                 static_cast<double>(count_tissue(clean(ClassLabel::CN), TissueClass::gray_matter));
  CHECK(std::abs(ratio - expected) <= 0.1 * expected);
}

TEST_CASE("gray matter volume orders the classes") {
  std::size_t prev = 0;
  for (auto label : {ClassLabel::AD, ClassLabel::pMCI, ClassLabel::sMCI, ClassLabel::CN}) {
    auto n = count_tissue(clean(label, {32, 32, 32}), TissueClass::gray_matter);
    CHECK(n > prev);
    prev = n;
  }
}

TEST_CASE("jitter stays within two millimeters and three degrees") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    PhantomSpec spec;
    spec.dims = {8, 8, 8};
    spec.seed = seed;
    auto p = generate_phantom(spec);
    Vec3d c{5.25, 5.25, 5.25};
    auto moved = p.pose.apply(c);
    double shift = std::hypot(moved[0] - c[0], moved[1] - c[1], moved[2] - c[2]);
    CHECK(shift <= 2.0);
    CHECK(rotation_angle_degrees(p.pose) <= 3.0);
  }
}

TEST_CASE("template is the voxelwise class mean") {
  Dims3 d{12, 12, 12};
  auto tmpl = generate_template(d);
  for (std::size_t v = 0; v < tmpl.size(); v += 37) {
    double s = 0;
    for (auto label : kAllClasses) s += clean(label, d).volume.data()[v];
    CHECK(tmpl.data()[v] == doctest::Approx(s / 4.0));
  }
}

TEST_CASE("dataset generation writes volumes, truth and a manifest") {
  TempDir dir;
  PhantomDatasetOptions opts;
  opts.dims = {10, 10, 10};
  auto m = generate_dataset({3, 2, 1, 2}, 5, dir.path(), opts);
  CHECK(m.size() == 8);
  CHECK(m.class_counts() == std::array<std::size_t, 4>{3, 2, 1, 2});
  CHECK(load_manifest(dir / "manifest.csv") == m);
  CHECK(m[0].path == "CN_000.nii");
  CHECK(m[0].subject_id == "CN-000");
  for (const auto& e : m.entries()) {
    CHECK(std::filesystem::exists(dir.path() / e.path));
    auto stem = e.path.substr(0, e.path.size() - 4);
    CHECK(std::filesystem::exists(dir.path() / (stem + "_truth.nii")));
  }
  auto again = generate_dataset({3, 2, 1, 2}, 5, dir / "again", opts);
  CHECK(read_nifti(dir.path() / "AD_001.nii") == read_nifti(dir / "again" / "AD_001.nii"));
}

TEST_CASE("ground-truth gray matter volume separates CN from AD") {
  std::vector<double> cn, ad;
  for (std::uint64_t s = 0; s < 5; ++s) {
    for (auto label : {ClassLabel::CN, ClassLabel::AD}) {
      PhantomSpec spec;
      spec.label = label;
      spec.dims = {24, 24, 24};
      spec.seed = s;
      auto p = generate_phantom(spec);
      std::size_t n = 0;
      for (float x : p.volume.data()) n += std::abs(x - kGrayIntensity) < 25.0f;
      (label == ClassLabel::CN ? cn : ad).push_back(static_cast<double>(n));
    }
  }
  CHECK(*std::min_element(cn.begin(), cn.end()) > *std::max_element(ad.begin(), ad.end()));
}
