#include <Eigen/Dense>
#include <array>
#include <cmath>

#include "neuroens/error.hpp"
#include "neuroens/preprocess.hpp"

namespace neuroens {

namespace {

std::vector<std::array<int, 3>> monomials(int order) {
  std::vector<std::array<int, 3>> out;
  for (int total = 0; total <= order; ++total)
    for (int a = total; a >= 0; --a)
      for (int b = total - a; b >= 0; --b) out.push_back({a, b, total - a - b});
  return out;
}

double scaled(std::size_t i, std::size_t n) {
  return n > 1 ? 2.0 * static_cast<double>(i) / static_cast<double>(n - 1) - 1.0 : 0.0;
}

void basis(const std::vector<std::array<int, 3>>& terms, double x, double y, double z,
           std::vector<double>& out) {
  std::array<std::array<double, 4>, 3> pw;
  double c[3] = {x, y, z};
  for (int a = 0; a < 3; ++a) {
    pw[a][0] = 1.0;
    for (int p = 1; p < 4; ++p) pw[a][p] = pw[a][p - 1] * c[a];
  }
  out.resize(terms.size());
  for (std::size_t t = 0; t < terms.size(); ++t)
    out[t] = pw[0][terms[t][0]] * pw[1][terms[t][1]] * pw[2][terms[t][2]];
}

bool is_tissue(TissueClass c) {
  return c == TissueClass::gray_matter || c == TissueClass::white_matter || c == TissueClass::csf;
}

}  // namespace

double BiasField::log_value(std::size_t i, std::size_t j, std::size_t k) const noexcept {
  auto terms = monomials(order);
  std::vector<double> phi;
  basis(terms, scaled(i, dims[0]), scaled(j, dims[1]), scaled(k, dims[2]), phi);
  double s = 0;
  for (std::size_t t = 0; t < terms.size(); ++t) s += coefficients[t] * phi[t];
  return s;
}

Volume3D BiasField::evaluate(const Volume3D& grid) const {
  if (grid.dims() != dims) fail(ErrorCode::DimMismatch, "bias field was fitted on a different grid");
  auto terms = monomials(order);
  Volume3D out(grid.dims(), grid.spacing(), grid.origin());
  std::vector<double> phi;
  for (std::size_t k = 0; k < dims[2]; ++k)
    for (std::size_t j = 0; j < dims[1]; ++j)
      for (std::size_t i = 0; i < dims[0]; ++i) {
        basis(terms, scaled(i, dims[0]), scaled(j, dims[1]), scaled(k, dims[2]), phi);
        double s = 0;
        for (std::size_t t = 0; t < terms.size(); ++t) s += coefficients[t] * phi[t];
        out.at(i, j, k) = static_cast<float>(std::exp(s));
      }
  return out;
}

BiasField estimate_bias(const Volume3D& vol, const TissueMap* mask, int order) {
  if (order < 0 || order > 3) fail(ErrorCode::InvalidArgument, "bias order must be in [0, 3]");
  if (mask && mask->dims() != vol.dims())
    fail(ErrorCode::DimMismatch, "tissue map does not match the volume grid");
  const auto& d = vol.dims();
  auto terms = monomials(order);
  std::size_t nb = terms.size();

  // Voxels in the fit and the log-intensity offset removed from each.
  std::vector<std::size_t> support;
  std::vector<double> target;
  support.reserve(vol.size());
  if (mask) {
    std::vector<double> class_sum(static_cast<std::size_t>(mask->k()), 0.0);
    std::vector<std::size_t> class_n(static_cast<std::size_t>(mask->k()), 0);
    for (std::size_t v = 0; v < vol.size(); ++v) {
      int l = mask->label(v);
      if (!is_tissue(mask->classes()[l])) continue;
      float x = vol.data()[v];
      if (!(x > 0.0f))
        fail(ErrorCode::NonPositiveIntensities, "non-positive intensity inside the tissue mask");
      support.push_back(v);
      target.push_back(std::log(static_cast<double>(x)));
      class_sum[l] += target.back();
      ++class_n[l];
    }
    for (std::size_t s = 0; s < support.size(); ++s) {
      auto l = static_cast<std::size_t>(mask->label(support[s]));
      target[s] -= class_sum[l] / static_cast<double>(class_n[l]);
    }
  } else {
    for (std::size_t v = 0; v < vol.size(); ++v) {
      float x = vol.data()[v];
      if (x > 0.0f) {
        support.push_back(v);
        target.push_back(std::log(static_cast<double>(x)));
      }
    }
  }
  if (support.size() < nb)
    fail(ErrorCode::NonPositiveIntensities, "too few positive voxels to fit the bias field");

  Eigen::MatrixXd ata = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(nb), static_cast<Eigen::Index>(nb));
  Eigen::VectorXd atb = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(nb));
  std::vector<double> phi;
  auto coords = [&](std::size_t v) {
    std::size_t i = v % d[0], j = (v / d[0]) % d[1], k = v / (d[0] * d[1]);
    return std::array<double, 3>{scaled(i, d[0]), scaled(j, d[1]), scaled(k, d[2])};
  };
  for (std::size_t s = 0; s < support.size(); ++s) {
    auto c = coords(support[s]);
    basis(terms, c[0], c[1], c[2], phi);
    for (std::size_t a = 0; a < nb; ++a) {
      atb(static_cast<Eigen::Index>(a)) += phi[a] * target[s];
      for (std::size_t b = 0; b < nb; ++b)
        ata(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) += phi[a] * phi[b];
    }
  }
  Eigen::VectorXd coef = ata.ldlt().solve(atb);

  BiasField field;
  field.order = order;
  field.dims = d;
  field.coefficients.assign(coef.data(), coef.data() + coef.size());

  // Unit mean over the fitted voxels.
  double mean = 0;
  for (std::size_t s = 0; s < support.size(); ++s) {
    auto c = coords(support[s]);
    basis(terms, c[0], c[1], c[2], phi);
    double l = 0;
    for (std::size_t t = 0; t < nb; ++t) l += field.coefficients[t] * phi[t];
    mean += std::exp(l);
  }
  mean /= static_cast<double>(support.size());
  field.coefficients[0] -= std::log(mean);
  if (order == 0) field.coefficients[0] = 0.0;
  return field;
}

Volume3D correct_bias(const Volume3D& vol, const BiasField& field) {
  Volume3D f = field.evaluate(vol);
  Volume3D out(vol.dims(), vol.spacing(), vol.origin());
  for (std::size_t v = 0; v < vol.size(); ++v)
    out.data()[v] = static_cast<float>(static_cast<double>(vol.data()[v]) / f.data()[v]);
  return out;
}

}  // namespace neuroens
