#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "neuroens/error.hpp"
#include "neuroens/preprocess.hpp"
#include "neuroens/random.hpp"

namespace neuroens {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

// k-means++ seeding followed by a few Lloyd iterations on the raw intensities.
std::vector<double> kmeans_centers(std::span<const float> x, int k, std::uint64_t seed, int iterations) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, x.size() - 1);
  std::vector<double> centers{static_cast<double>(x[pick(rng)])};
  std::vector<double> d2(x.size());
  while (static_cast<int>(centers.size()) < k) {
    double total = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      double best = std::numeric_limits<double>::max();
      for (double c : centers) best = std::min(best, (x[i] - c) * (x[i] - c));
      d2[i] = best;
      total += best;
    }
    if (!(total > 0.0)) {
      centers.push_back(centers.back());
      continue;
    }
    std::uniform_real_distribution<double> u(0.0, total);
    double r = u(rng), acc = 0;
    std::size_t chosen = x.size() - 1;
    for (std::size_t i = 0; i < x.size(); ++i) {
      acc += d2[i];
      if (acc >= r && d2[i] > 0.0) {
        chosen = i;
        break;
      }
    }
    centers.push_back(x[chosen]);
  }
  std::sort(centers.begin(), centers.end());

  std::vector<double> sum(static_cast<std::size_t>(k));
  std::vector<std::size_t> count(static_cast<std::size_t>(k));
  for (int it = 0; it < iterations; ++it) {
    std::fill(sum.begin(), sum.end(), 0.0);
    std::fill(count.begin(), count.end(), 0);
    for (float v : x) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < centers.size(); ++c)
        if (std::abs(v - centers[c]) < std::abs(v - centers[best])) best = c;
      sum[best] += v;
      ++count[best];
    }
    bool moved = false;
    for (std::size_t c = 0; c < centers.size(); ++c) {
      if (count[c] == 0) continue;
      double m = sum[c] / static_cast<double>(count[c]);
      moved |= m != centers[c];
      centers[c] = m;
    }
    if (!moved) break;
  }
  return centers;
}

}  // namespace

const char* tissue_name(TissueClass c) noexcept {
  switch (c) {
    case TissueClass::gray_matter: return "gray_matter";
    case TissueClass::white_matter: return "white_matter";
    case TissueClass::csf: return "csf";
    case TissueClass::skull: return "skull";
    case TissueClass::soft_tissue: return "soft_tissue";
    case TissueClass::background: return "background";
  }
  return "?";
}

std::vector<TissueClass> tissue_order(int k) {
  using T = TissueClass;
  switch (k) {
    case 2: return {T::csf, T::gray_matter};
    case 3: return {T::csf, T::gray_matter, T::white_matter};
    case 4: return {T::background, T::csf, T::gray_matter, T::white_matter};
    case 5: return {T::background, T::csf, T::skull, T::gray_matter, T::white_matter};
    default: fail(ErrorCode::InvalidArgument, "tissue class count must be in [2, 5]");
  }
}

TissueMap::TissueMap(const Volume3D& grid, std::vector<TissueClass> classes)
    : dims_(grid.dims()),
      spacing_(grid.spacing()),
      origin_(grid.origin()),
      classes_(std::move(classes)),
      posteriors_(grid.size() * classes_.size(), 0.0) {}

double TissueMap::posterior(std::size_t voxel, TissueClass c) const noexcept {
  for (std::size_t j = 0; j < classes_.size(); ++j)
    if (classes_[j] == c) return posteriors_[voxel * classes_.size() + j];
  return 0.0;
}

int TissueMap::label(std::size_t voxel) const noexcept {
  const double* p = posteriors_.data() + voxel * classes_.size();
  int best = 0;
  for (int j = 1; j < static_cast<int>(classes_.size()); ++j)
    if (p[j] > p[best]) best = j;
  return best;
}

double TissueMap::max_normalization_error() const noexcept {
  double worst = 0;
  std::size_t k = classes_.size();
  for (std::size_t v = 0; v < voxels(); ++v) {
    double s = 0;
    for (std::size_t j = 0; j < k; ++j) s += posteriors_[v * k + j];
    worst = std::max(worst, std::abs(s - 1.0));
  }
  return worst;
}

namespace {

SegmentationResult segment_once(const Volume3D& vol, int k, std::uint64_t seed, const SegmentationConfig& config) {
  if (k < 2 || k > 5) fail(ErrorCode::InvalidArgument, "k must be in [2, 5]");
  auto x = vol.data();
  if (x.empty()) fail(ErrorCode::DegenerateInput, "empty volume");
  auto [lo_it, hi_it] = std::minmax_element(x.begin(), x.end());
  double range = static_cast<double>(*hi_it) - static_cast<double>(*lo_it);
  if (!(range > 0.0)) fail(ErrorCode::DegenerateInput, "segmentation needs a non-constant volume");

  const std::size_t n = x.size();
  const auto K = static_cast<std::size_t>(k);
  const double var_floor = (1e-6 * range) * (1e-6 * range);

  SegmentationResult res;
  res.means = kmeans_centers(x, k, seed, config.kmeans_iterations);
  res.variances.assign(K, 0.0);
  res.weights.assign(K, 0.0);
  {
    std::vector<std::size_t> count(K, 0);
    for (float v : x) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < K; ++c)
        if (std::abs(v - res.means[c]) < std::abs(v - res.means[best])) best = c;
      res.variances[best] += (v - res.means[best]) * (v - res.means[best]);
      ++count[best];
    }
    for (std::size_t c = 0; c < K; ++c) {
      res.weights[c] = std::max<double>(static_cast<double>(count[c]), 1.0) / static_cast<double>(n);
      double v = count[c] ? res.variances[c] / static_cast<double>(count[c]) : 0.0;
      if (v < var_floor) v = std::max(var_floor, range * range / (16.0 * K * K));
      res.variances[c] = v;
    }
    double ws = std::accumulate(res.weights.begin(), res.weights.end(), 0.0);
    for (auto& w : res.weights) w /= ws;
  }

  std::vector<double> post(n * K);
  std::vector<double> logp(K);
  // E-step with the current parameters; returns mean per-voxel log-likelihood.
  auto e_step = [&]() {
    std::vector<double> log_norm(K);
    for (std::size_t c = 0; c < K; ++c)
      log_norm[c] = std::log(res.weights[c]) - 0.5 * (kLog2Pi + std::log(res.variances[c]));
    double ll = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double v = x[i];
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < K; ++c) {
        double dv = v - res.means[c];
        logp[c] = log_norm[c] - 0.5 * dv * dv / res.variances[c];
        mx = std::max(mx, logp[c]);
      }
      double s = 0;
      for (std::size_t c = 0; c < K; ++c) {
        logp[c] = std::exp(logp[c] - mx);
        s += logp[c];
      }
      ll += mx + std::log(s);
      double* p = post.data() + i * K;
      for (std::size_t c = 0; c < K; ++c) p[c] = logp[c] / s;
    }
    return ll / static_cast<double>(n);
  };

  double ll = e_step();
  res.log_likelihood.push_back(ll);
  for (int it = 0; it < config.max_iterations; ++it) {
    // M-step
    std::vector<double> nk(K, 0.0), sx(K, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double* p = post.data() + i * K;
      for (std::size_t c = 0; c < K; ++c) {
        nk[c] += p[c];
        sx[c] += p[c] * x[i];
      }
    }
    for (std::size_t c = 0; c < K; ++c) {
      if (nk[c] > 0.0) res.means[c] = sx[c] / nk[c];
    }
    std::vector<double> sv(K, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double* p = post.data() + i * K;
      for (std::size_t c = 0; c < K; ++c) {
        double dv = x[i] - res.means[c];
        sv[c] += p[c] * dv * dv;
      }
    }
    for (std::size_t c = 0; c < K; ++c) {
      double v = nk[c] > 0.0 ? sv[c] / nk[c] : var_floor;
      if (v < var_floor) {
        v = var_floor;
        res.collapsed_component = true;
      }
      res.variances[c] = v;
      res.weights[c] = std::max(nk[c], 1e-300) / static_cast<double>(n);
    }
    double next = e_step();
    res.log_likelihood.push_back(next);
    bool done = std::abs(next - ll) < config.tolerance;
    ll = next;
    if (done) break;
  }

  // Relabel components by ascending mean.
  std::vector<std::size_t> order(K);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return res.means[a] < res.means[b]; });
  TissueMap map(vol, tissue_order(k));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < K; ++c) map.posterior(i, static_cast<int>(c)) = post[i * K + order[c]];
  auto permute = [&](std::vector<double>& v) {
    std::vector<double> out(K);
    for (std::size_t c = 0; c < K; ++c) out[c] = v[order[c]];
    v = std::move(out);
  };
  permute(res.means);
  permute(res.variances);
  permute(res.weights);
  res.map = std::move(map);
  return res;
}

}  // namespace

SegmentationResult segment_tissues(const Volume3D& vol, int k, std::uint64_t seed,
                                   const SegmentationConfig& config) {
  if (config.restarts < 1) fail(ErrorCode::InvalidArgument, "restarts must be at least 1");
  auto best = segment_once(vol, k, seed, config);
  for (int r = 1; r < config.restarts; ++r) {
    auto next = segment_once(vol, k, derive_seed(seed, static_cast<std::uint64_t>(r)), config);
    if (next.log_likelihood.back() > best.log_likelihood.back()) best = std::move(next);
  }
  return best;
}

}  // namespace neuroens
