#include <cmath>
#include <cstring>
#include <random>

#include "doctest.h"
#include "neuroens/phantom.hpp"
#include "neuroens/preprocess.hpp"
#include "test_util.hpp"

using namespace neuroens;

namespace {

constexpr double kDeg = M_PI / 180.0;

Phantom small_phantom(std::uint64_t seed = 1, double noise = 0.02, Dims3 dims = {40, 40, 40}) {
  PhantomSpec spec;
  spec.dims = dims;
  spec.noise_sigma = noise;
  spec.jitter = false;
  spec.seed = seed;
  return generate_phantom(spec);
}

Vec3d center_of(const Volume3D& v) {
  const auto& d = v.dims();
  return v.position((d[0] - 1) / 2.0, (d[1] - 1) / 2.0, (d[2] - 1) / 2.0);
}

double rms_diff(const Volume3D& a, const Volume3D& b, const Volume3D* support = nullptr) {
  double s = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (support && support->data()[i] <= 0.0f) continue;
    double d = static_cast<double>(a.data()[i]) - b.data()[i];
    s += d * d;
    ++n;
  }
  return std::sqrt(s / static_cast<double>(n));
}

double rms(const Volume3D& a, const Volume3D* support = nullptr) {
  Volume3D zero(a.dims(), a.spacing(), a.origin());
  return rms_diff(a, zero, support);
}

}  // namespace

TEST_CASE("affine transform algebra") {
  auto t = AffineTransform::rigid({0.1, -0.2, 0.3}, {3, -1.5, 1.5}, {10, 20, 30});
  auto id = compose(t, t.inverse());
  CHECK(distance_from_identity(id) < 1e-9);
  CHECK(rotation_angle_degrees(AffineTransform::rigid({0, 0, 5 * kDeg}, {0, 0, 0}, {1, 2, 3})) ==
        doctest::Approx(5.0));
  AffineTransform singular;
  singular.matrix[2] = {0, 0, 0};
  CHECK(error_code_of([&] { singular.inverse(); }) == ErrorCode::SingularTransform);
}

TEST_CASE("apply_transform") {
  auto p = small_phantom(2, 0.02, {16, 12, 10});
  SUBCASE("identity on the same grid is bitwise") {
    auto out = apply_transform(p.volume, AffineTransform::identity(), p.volume);
    CHECK(std::memcmp(out.data().data(), p.volume.data().data(), out.size() * 4) == 0);
  }
  SUBCASE("one-voxel translation shifts indices and zero-fills the border") {
    auto out = apply_transform(p.volume, AffineTransform::translation_by({1.5, 0, 0}), p.volume);
    const auto& d = p.volume.dims();
    for (std::size_t k = 0; k < d[2]; ++k)
      for (std::size_t j = 0; j < d[1]; ++j) {
        for (std::size_t i = 0; i + 1 < d[0]; ++i) REQUIRE(out.at(i, j, k) == p.volume.at(i + 1, j, k));
        REQUIRE(out.at(d[0] - 1, j, k) == 0.0f);
      }
  }
  SUBCASE("singular transform") {
    AffineTransform s;
    s.matrix[0] = {0, 0, 0};
    CHECK(error_code_of([&] { apply_transform(p.volume, s, p.volume); }) == ErrorCode::SingularTransform);
  }
}

TEST_CASE("transform then inverse stays within 1% of the intensity range on a smooth phantom") {
  auto p = small_phantom(3, 0.0);
  auto smooth = smooth_gaussian(p.volume, 6.0);
  auto t = AffineTransform::rigid({2 * kDeg, -3 * kDeg, 5 * kDeg}, {3.0, -1.5, 1.5}, center_of(smooth));
  auto there = apply_transform(smooth, t, smooth);
  auto back = apply_transform(there, t.inverse(), smooth);
  // compare where the round trip stayed inside the field of view
  Volume3D support = apply_transform(Volume3D(smooth.dims(), smooth.spacing(), smooth.origin(),
                                              std::vector<float>(smooth.size(), 1.0f)),
                                     t.inverse(), smooth);
  for (auto& s : support.data()) s = s > 0.999f ? 1.0f : 0.0f;
  auto [lo, hi] = std::minmax_element(smooth.data().begin(), smooth.data().end());
  CHECK(rms_diff(back, smooth, &support) < 0.01 * (*hi - *lo));
}

TEST_CASE("registration") {
  auto p = small_phantom(4);
  const auto& fixed = p.volume;
  auto c = center_of(fixed);

  SUBCASE("self registration stays at identity") {
    auto r = register_volumes(fixed, fixed, RegistrationMode::affine);
    CHECK(distance_from_identity(r.transform) < 1e-3);
    CHECK(r.final_cost <= r.initial_cost);
  }
  SUBCASE("translation is recovered") {
    auto truth = AffineTransform::translation_by({3.0, -1.5, 1.5});
    auto moving = apply_transform(fixed, truth, fixed);
    auto r = register_volumes(moving, fixed, RegistrationMode::rigid);
    auto residual = compose(truth, r.transform);
    auto drift = residual.apply(c);
    for (int a = 0; a < 3; ++a) CHECK(std::abs(drift[a] - c[a]) < 0.75);
    CHECK(rotation_angle_degrees(residual) < 1.0);
    for (std::size_t l = 1; l < r.level_costs.size(); ++l) CHECK(r.level_costs[l] <= r.level_costs[l - 1]);
  }
  SUBCASE("rotation about z is recovered") {
    auto truth = AffineTransform::rigid({0, 0, 5 * kDeg}, {0, 0, 0}, c);
    auto moving = apply_transform(fixed, truth, fixed);
    auto r = register_volumes(moving, fixed, RegistrationMode::rigid);
    CHECK(rotation_angle_degrees(compose(truth, r.transform)) < 1.0);
    CHECK(r.parameters[5] == doctest::Approx(-5 * kDeg).epsilon(0.2));
  }
  SUBCASE("constant volumes are degenerate") {
    Volume3D flat(fixed.dims(), fixed.spacing());
    CHECK(error_code_of([&] { register_volumes(flat, fixed, RegistrationMode::rigid); }) ==
          ErrorCode::DegenerateInput);
  }
}

TEST_CASE("bias estimation") {
  SUBCASE("uniform volume gives a unit field at any order") {
    Volume3D v({10, 9, 8}, {1.5f, 1.5f, 1.5f});
    for (auto& x : v.data()) x = 42.0f;
    for (int order = 0; order <= 3; ++order) {
      auto f = estimate_bias(v, nullptr, order).evaluate(v);
      for (float x : f.data()) REQUIRE(x == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
  SUBCASE("order 0 always gives exactly 1") {
    auto p = small_phantom(5);
    auto f = estimate_bias(p.volume, &p.truth, 0).evaluate(p.volume);
    for (float x : f.data()) REQUIRE(x == 1.0f);
  }
  SUBCASE("constant field c scales by 1/c") {
    auto p = small_phantom(6, 0.0, {8, 8, 8});
    BiasField f;
    f.order = 0;
    f.dims = p.volume.dims();
    f.coefficients = {std::log(2.0)};
    auto out = correct_bias(p.volume, f);
    for (std::size_t i = 0; i < out.size(); ++i)
      REQUIRE(out.data()[i] == doctest::Approx(p.volume.data()[i] / 2.0));
    f.coefficients = {0.0};
    CHECK(correct_bias(p.volume, f) == p.volume);
  }
  SUBCASE("linear ramp 0.8 -> 1.2 is removed within 2% RMS") {
    auto p = small_phantom(7, 0.02);
    Volume3D ramped = p.volume;
    const auto& d = ramped.dims();
    for (std::size_t k = 0; k < d[2]; ++k)
      for (std::size_t j = 0; j < d[1]; ++j)
        for (std::size_t i = 0; i < d[0]; ++i)
          ramped.at(i, j, k) *= static_cast<float>(0.8 + 0.4 * static_cast<double>(i) / (d[0] - 1));
    Volume3D brain = label_volume(p.truth);
    for (auto& x : brain.data()) x = x == static_cast<float>(TissueClass::background) ? 0.0f : 1.0f;

    auto field = estimate_bias(ramped, &p.truth, 1);
    auto corrected = correct_bias(ramped, field);
    CHECK(rms_diff(corrected, p.volume, &brain) / rms(p.volume, &brain) < 0.02);

    // re-estimating on the corrected volume finds nothing left to fix
    auto again = estimate_bias(corrected, &p.truth, 1).evaluate(corrected);
    for (std::size_t i = 0; i < again.size(); ++i)
      if (brain.data()[i] > 0) REQUIRE(std::abs(again.data()[i] - 1.0) < 0.01);
  }
  SUBCASE("non-positive tissue intensity") {
    auto p = small_phantom(8, 0.0, {8, 8, 8});
    Volume3D v = p.volume;
    for (std::size_t i = 0; i < v.size(); ++i)
      if (p.truth.tissue(i) == TissueClass::white_matter) v.data()[i] = -1.0f;
    CHECK(error_code_of([&] { estimate_bias(v, &p.truth, 1); }) == ErrorCode::NonPositiveIntensities);
  }
}

TEST_CASE("normalize_to_template") {
  auto tmpl = generate_template({32, 32, 32});
  SUBCASE("template onto itself barely moves") {
    auto r = normalize_to_template(tmpl, tmpl);
    CHECK(r.field.max_magnitude() < 0.75);
    CHECK(r.normalized.same_grid(tmpl));
  }
  SUBCASE("3 mm shift along x is recovered as a uniform field") {
    auto shifted = apply_transform(tmpl, AffineTransform::translation_by({3.0, 0, 0}), tmpl);
    auto r = normalize_to_template(shifted, tmpl);
    for (std::size_t i = 0; i < r.field.dx.size(); ++i) {
      REQUIRE(std::abs(r.field.dx.data()[i] + 3.0) < 0.75);
      REQUIRE(std::abs(r.field.dy.data()[i]) < 0.75);
      REQUIRE(std::abs(r.field.dz.data()[i]) < 0.75);
    }
  }
  SUBCASE("noisy background below zero does not reach the bias fit") {
    PhantomSpec spec;
    spec.dims = {32, 32, 32};
    spec.spacing = 1.5f;
    spec.noise_sigma = 0.05;
    spec.seed = 4;
    auto p = generate_phantom(spec);
    std::size_t negative = 0;
    for (float x : p.volume.data()) negative += x <= 0.0f;
    REQUIRE(negative > 0);
    for (int k : {3, 4}) {
      NormalizationConfig nc;
      nc.bias_segmentation_k = k;
      nc.registration.levels = 2;
      CHECK_NOTHROW(normalize_to_template(p.volume, tmpl, nc));
    }
  }
  SUBCASE("identity materializes to zero displacement") {
    auto f = materialize(AffineTransform::identity(), tmpl);
    CHECK(f.max_magnitude() == 0.0);
  }
}

TEST_CASE("segmentation") {
  SUBCASE("two Gaussians match the Bayes threshold") {
    Volume3D v({40, 40, 20}, {1, 1, 1});
    std::mt19937_64 rng(12);
    std::normal_distribution<double> lo(30, 5), hi(200, 5);
    std::vector<int> truth(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      truth[i] = static_cast<int>(rng() & 1);
      v.data()[i] = static_cast<float>(truth[i] ? hi(rng) : lo(rng));
    }
    auto res = segment_tissues(v, 2, 99);
    std::size_t agree = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      int bayes = v.data()[i] > 115.0f ? 1 : 0;  // equal priors and variances
      agree += res.map.label(i) == bayes;
    }
    CHECK(static_cast<double>(agree) / v.size() >= 0.99);
    for (std::size_t s = 1; s < res.log_likelihood.size(); ++s)
      CHECK(res.log_likelihood[s] >= res.log_likelihood[s - 1]);
    CHECK(res.map.max_normalization_error() < 1e-6);
  }
  SUBCASE("separated two-value volume gives one-hot posteriors") {
    Volume3D v({10, 10, 10}, {1, 1, 1});
    for (std::size_t i = 0; i < v.size(); ++i) v.data()[i] = (i % 3 == 0) ? 100.0f : 0.0f;
    auto res = segment_tissues(v, 2, 1);
    CHECK(std::abs(res.means[0]) < 1e-3);
    CHECK(std::abs(res.means[1] - 100.0) < 1e-3);
    for (std::size_t i = 0; i < v.size(); ++i) {
      int want = v.data()[i] > 50.0f ? 1 : 0;
      REQUIRE(res.map.posterior(i, want) > 1.0 - 1e-9);
    }
  }
  SUBCASE("constant volume") {
    Volume3D v({4, 4, 4}, {1, 1, 1});
    CHECK(error_code_of([&] { segment_tissues(v, 3, 0); }) == ErrorCode::DegenerateInput);
  }
  SUBCASE("phantom gray matter mask matches the generator shell") {
    auto p = small_phantom(13, 0.02);
    auto res = segment_tissues(p.volume, 4, 7);
    for (std::size_t s = 1; s < res.log_likelihood.size(); ++s)
      REQUIRE(res.log_likelihood[s] >= res.log_likelihood[s - 1]);
    auto mask = gray_matter_mask(res.map, 0.5);
    std::size_t inter = 0, a = 0, b = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
      bool m = mask.data()[i] > 0.5f;
      bool t = p.truth.tissue(i) == TissueClass::gray_matter;
      inter += m && t;
      a += m;
      b += t;
    }
    CHECK(2.0 * inter / static_cast<double>(a + b) >= 0.95);
  }
}

TEST_CASE("masks") {
  Volume3D grid({4, 3, 2}, {1, 1, 1});
  TissueMap tm(grid, tissue_order(3));
  for (std::size_t i = 0; i < tm.voxels(); ++i) tm.posterior(i, 1) = 1.0;
  auto all = gray_matter_mask(tm, 0.5);
  for (float x : all.data()) CHECK(x == 1.0f);

  tm.posterior(0, 1) = 0.49;
  tm.posterior(0, 0) = 0.51;
  CHECK(gray_matter_mask(tm, 0.5).data()[0] == 0.0f);
  CHECK(error_code_of([&] { gray_matter_mask(tm, 1.0); }) == ErrorCode::InvalidArgument);

  Volume3D v = grid;
  for (std::size_t i = 0; i < v.size(); ++i) v.data()[i] = static_cast<float>(i) + 0.5f;
  Volume3D ones = grid, zeros = grid, half = grid;
  for (auto& x : ones.data()) x = 1.0f;
  for (std::size_t i = 0; i < half.size(); ++i) half.data()[i] = i < half.size() / 2 ? 1.0f : 0.0f;
  CHECK(apply_mask(v, ones) == v);
  auto z = apply_mask(v, zeros);
  for (float x : z.data()) CHECK(x == 0.0f);
  auto h = apply_mask(v, half);
  for (std::size_t i = 0; i < h.size(); ++i) CHECK(h.data()[i] == (i < h.size() / 2 ? v.data()[i] : 0.0f));
  CHECK(apply_mask(h, half) == h);
  CHECK(error_code_of([&] { apply_mask(v, Volume3D({2, 2, 2}, {1, 1, 1})); }) == ErrorCode::DimMismatch);
}

TEST_CASE("gaussian smoothing") {
  SUBCASE("fwhm 0 is identity and constants are unchanged") {
    auto p = small_phantom(14, 0.05, {10, 10, 10});
    CHECK(smooth_gaussian(p.volume, 0.0) == p.volume);
    Volume3D c({9, 8, 7}, {1.5f, 1.5f, 1.5f});
    for (auto& x : c.data()) x = 3.5f;
    auto sc = smooth_gaussian(c, 8.0);
    for (float x : sc.data()) REQUIRE(x == doctest::Approx(3.5).epsilon(1e-6));
  }
  SUBCASE("impulse response equals the separable kernel") {
    Volume3D v({41, 41, 41}, {1.5f, 1.5f, 1.5f});
    v.at(20, 20, 20) = 1.0f;
    auto out = smooth_gaussian(v, 8.0);
    // oracle: 1D Gaussian sampled at voxel offsets, truncated at 4 sigma, normalized
    double sigma = 8.0 / 2.3548 / 1.5;
    int r = static_cast<int>(std::ceil(4 * sigma));
    double norm = 0;
    for (int x = -r; x <= r; ++x) norm += std::exp(-0.5 * x * x / (sigma * sigma));
    double center = std::pow(1.0 / norm, 3);
    CHECK(out.at(20, 20, 20) == doctest::Approx(center).epsilon(1e-6));
    double total = 0;
    for (float x : out.data()) total += x;
    CHECK(std::abs(total - 1.0) < 1e-4);
  }
  SUBCASE("commutes with scaling") {
    auto p = small_phantom(15, 0.05, {12, 12, 12});
    Volume3D scaled = p.volume;
    for (auto& x : scaled.data()) x *= 3.0f;
    auto a = smooth_gaussian(scaled, 5.0);
    auto b = smooth_gaussian(p.volume, 5.0);
    for (std::size_t i = 0; i < a.size(); ++i)
      REQUIRE(std::abs(a.data()[i] - 3.0 * b.data()[i]) <= 1e-6 * std::max(1.0, std::abs(3.0 * b.data()[i])));
  }
}
