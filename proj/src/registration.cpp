#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "neuroens/error.hpp"
#include "neuroens/preprocess.hpp"

namespace neuroens {

namespace {

Mat3d matmul(const Mat3d& a, const Mat3d& b) {
  Mat3d c{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) c[i][j] += a[i][k] * b[k][j];
  return c;
}

Mat3d rot_x(double a) { return {{{1, 0, 0}, {0, std::cos(a), -std::sin(a)}, {0, std::sin(a), std::cos(a)}}}; }
Mat3d rot_y(double a) { return {{{std::cos(a), 0, std::sin(a)}, {0, 1, 0}, {-std::sin(a), 0, std::cos(a)}}}; }
Mat3d rot_z(double a) { return {{{std::cos(a), -std::sin(a), 0}, {std::sin(a), std::cos(a), 0}, {0, 0, 1}}}; }
Mat3d drot_x(double a) { return {{{0, 0, 0}, {0, -std::sin(a), -std::cos(a)}, {0, std::cos(a), -std::sin(a)}}}; }
Mat3d drot_y(double a) { return {{{-std::sin(a), 0, std::cos(a)}, {0, 0, 0}, {-std::cos(a), 0, -std::sin(a)}}}; }
Mat3d drot_z(double a) { return {{{-std::sin(a), -std::cos(a), 0}, {std::cos(a), -std::sin(a), 0}, {0, 0, 0}}}; }

Vec3d grid_center(const Volume3D& v) {
  const auto& d = v.dims();
  return v.position(0.5 * static_cast<double>(d[0] - 1), 0.5 * static_cast<double>(d[1] - 1),
                    0.5 * static_cast<double>(d[2] - 1));
}

// Value and index-space gradient of trilinear interpolation; zero outside [0, n-1]^3.
struct Sample {
  double value = 0, gu = 0, gv = 0, gw = 0;
  bool inside = false;
};

struct Corner {
  std::size_t lo, hi;
  double t;
};

inline bool corner(double u, std::size_t n, Corner& c) {
  if (!(u >= 0.0) || u > static_cast<double>(n - 1)) return false;
  if (n == 1) {
    c = {0, 0, 0.0};
    return true;
  }
  auto lo = std::min(static_cast<std::size_t>(u), n - 2);
  c = {lo, lo + 1, u - static_cast<double>(lo)};
  return true;
}

inline Sample sample_gradient(const Volume3D& vol, double u, double v, double w) {
  const auto& d = vol.dims();
  Corner cx, cy, cz;
  if (!corner(u, d[0], cx) || !corner(v, d[1], cy) || !corner(w, d[2], cz)) return {};
  const float* p = vol.data().data();
  auto at = [&](std::size_t i, std::size_t j, std::size_t k) {
    return static_cast<double>(p[i + d[0] * (j + d[1] * k)]);
  };
  double c000 = at(cx.lo, cy.lo, cz.lo), c100 = at(cx.hi, cy.lo, cz.lo);
  double c010 = at(cx.lo, cy.hi, cz.lo), c110 = at(cx.hi, cy.hi, cz.lo);
  double c001 = at(cx.lo, cy.lo, cz.hi), c101 = at(cx.hi, cy.lo, cz.hi);
  double c011 = at(cx.lo, cy.hi, cz.hi), c111 = at(cx.hi, cy.hi, cz.hi);
  double fx = cx.t, fy = cy.t, fz = cz.t;
  double gx = 1 - fx, gy = 1 - fy, gz = 1 - fz;

  Sample s;
  s.inside = true;
  double c00 = gx * c000 + fx * c100, c10 = gx * c010 + fx * c110;
  double c01 = gx * c001 + fx * c101, c11 = gx * c011 + fx * c111;
  double c0 = gy * c00 + fy * c10, c1 = gy * c01 + fy * c11;
  s.value = gz * c0 + fz * c1;
  s.gu = gy * gz * (c100 - c000) + fy * gz * (c110 - c010) + gy * fz * (c101 - c001) +
         fy * fz * (c111 - c011);
  s.gv = gz * (c10 - c00) + fz * (c11 - c01);
  s.gw = c1 - c0;
  return s;
}

// Interpolated value only, via std::lerp so constants and grid points are reproduced exactly.
inline bool sample_value(const Volume3D& vol, double u, double v, double w, double& out) {
  const auto& d = vol.dims();
  Corner c[3];
  double coords[3] = {u, v, w};
  for (int a = 0; a < 3; ++a) {
    if (!(coords[a] >= 0.0) || coords[a] > static_cast<double>(d[a] - 1)) return false;
    auto lo = static_cast<std::size_t>(coords[a]);
    std::size_t hi = std::min(lo + 1, d[a] - 1);
    c[a] = {lo, hi, coords[a] - static_cast<double>(lo)};
  }
  auto at = [&](std::size_t i, std::size_t j, std::size_t k) {
    return static_cast<double>(vol.at(i, j, k));
  };
  auto line = [&](std::size_t j, std::size_t k) {
    return c[0].t == 0.0 ? at(c[0].lo, j, k) : std::lerp(at(c[0].lo, j, k), at(c[0].hi, j, k), c[0].t);
  };
  auto plane = [&](std::size_t k) {
    return c[1].t == 0.0 ? line(c[1].lo, k) : std::lerp(line(c[1].lo, k), line(c[1].hi, k), c[1].t);
  };
  out = c[2].t == 0.0 ? plane(c[2].lo) : std::lerp(plane(c[2].lo), plane(c[2].hi), c[2].t);
  return true;
}

double variance(const Volume3D& v) {
  double mean = 0;
  for (float x : v.data()) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0;
  for (float x : v.data()) var += (x - mean) * (x - mean);
  return var / static_cast<double>(v.size());
}

// One resolution level of the pyramid: smoothed, decimated, corner voxel centers kept in place.
Volume3D pyramid_level(const Volume3D& vol, int factor) {
  if (factor == 1) return vol;
  double min_spacing = *std::min_element(vol.spacing().begin(), vol.spacing().end());
  Volume3D smoothed = smooth_gaussian(vol, factor * min_spacing);
  Dims3 nd;
  Vec3f sp;
  for (int a = 0; a < 3; ++a) {
    nd[a] = std::max<std::size_t>(2, (vol.dims()[a] + factor - 1) / factor);
    sp[a] = static_cast<float>(static_cast<double>(vol.spacing()[a]) * (vol.dims()[a] - 1) /
                               static_cast<double>(nd[a] - 1));
  }
  Volume3D r = resample(smoothed, nd, Interpolation::trilinear);
  return Volume3D(nd, sp, vol.origin(), std::vector<float>(r.data().begin(), r.data().end()));
}

class RegistrationProblem {
 public:
  RegistrationProblem(RegistrationMode mode, Vec3d center, double radius)
      : mode_(mode), center_(center), radius_(radius) {}

  std::size_t dof() const { return mode_ == RegistrationMode::rigid ? 6 : 12; }

  std::vector<double> identity_params() const { return std::vector<double>(dof(), 0.0); }

  Mat3d linear_part(const std::vector<double>& q) const {
    if (mode_ == RegistrationMode::rigid)
      return matmul(rot_z(q[5] / radius_), matmul(rot_y(q[4] / radius_), rot_x(q[3] / radius_)));
    Mat3d a{};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) a[i][j] = (i == j ? 1.0 : 0.0) + q[3 + 3 * i + j] / radius_;
    return a;
  }

  AffineTransform transform(const std::vector<double>& q) const {
    AffineTransform t;
    t.matrix = linear_part(q);
    for (int i = 0; i < 3; ++i) {
      double ac = 0;
      for (int j = 0; j < 3; ++j) ac += t.matrix[i][j] * center_[j];
      t.translation[i] = q[i] + center_[i] - ac;
    }
    return t;
  }

  // Physical parameters: translations in mm, rotations in radians / raw matrix entries.
  std::vector<double> physical(const std::vector<double>& q) const {
    std::vector<double> p = q;
    if (mode_ == RegistrationMode::rigid) {
      for (int a = 3; a < 6; ++a) p[a] = q[a] / radius_;
    } else {
      auto m = linear_part(q);
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) p[3 + 3 * i + j] = m[i][j];
    }
    return p;
  }

  double evaluate(const Volume3D& moving, const Volume3D& fixed, const std::vector<double>& q,
                  std::vector<double>* grad) const {
    auto t = transform(q);
    const auto& A = t.matrix;
    const auto& fd = fixed.dims();
    const auto& ms = moving.spacing();
    const auto& mo = moving.origin();
    const float* fdata = fixed.data().data();

    double sum = 0;
    double gt[3] = {0, 0, 0};
    double gA[3][3] = {{0, 0, 0}, {0, 0, 0}, {0, 0, 0}};
    std::size_t idx = 0;
    for (std::size_t k = 0; k < fd[2]; ++k) {
      for (std::size_t j = 0; j < fd[1]; ++j) {
        for (std::size_t i = 0; i < fd[0]; ++i, ++idx) {
          auto x = fixed.position(static_cast<double>(i), static_cast<double>(j), static_cast<double>(k));
          double rel[3] = {x[0] - center_[0], x[1] - center_[1], x[2] - center_[2]};
          double u[3];
          for (int a = 0; a < 3; ++a) {
            double p = A[a][0] * x[0] + A[a][1] * x[1] + A[a][2] * x[2] + t.translation[a];
            u[a] = (p - mo[a]) / ms[a];
          }
          Sample s = sample_gradient(moving, u[0], u[1], u[2]);
          double r = s.value - fdata[idx];
          sum += r * r;
          if (!grad || !s.inside || r == 0.0) continue;
          double g[3] = {r * s.gu / ms[0], r * s.gv / ms[1], r * s.gw / ms[2]};
          for (int a = 0; a < 3; ++a) {
            gt[a] += g[a];
            for (int b = 0; b < 3; ++b) gA[a][b] += g[a] * rel[b];
          }
        }
      }
    }
    double n = static_cast<double>(fixed.size());
    if (grad) {
      grad->assign(dof(), 0.0);
      for (int a = 0; a < 3; ++a) (*grad)[a] = 2.0 * gt[a] / n;
      if (mode_ == RegistrationMode::affine) {
        for (int a = 0; a < 3; ++a)
          for (int b = 0; b < 3; ++b) (*grad)[3 + 3 * a + b] = 2.0 * gA[a][b] / n / radius_;
      } else {
        double ax = q[3] / radius_, ay = q[4] / radius_, az = q[5] / radius_;
        std::array<Mat3d, 3> dR = {
            matmul(rot_z(az), matmul(rot_y(ay), drot_x(ax))),
            matmul(rot_z(az), matmul(drot_y(ay), rot_x(ax))),
            matmul(drot_z(az), matmul(rot_y(ay), rot_x(ax))),
        };
        for (int p = 0; p < 3; ++p) {
          double acc = 0;
          for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) acc += gA[a][b] * dR[p][a][b];
          (*grad)[3 + p] = 2.0 * acc / n / radius_;
        }
      }
    }
    return sum / n;
  }

 private:
  RegistrationMode mode_;
  Vec3d center_;
  double radius_;
};

}  // namespace

AffineTransform AffineTransform::translation_by(Vec3d t) {
  AffineTransform a;
  a.translation = t;
  return a;
}

AffineTransform AffineTransform::rigid(Vec3d angles, Vec3d t, Vec3d center) {
  AffineTransform a;
  a.matrix = matmul(rot_z(angles[2]), matmul(rot_y(angles[1]), rot_x(angles[0])));
  for (int i = 0; i < 3; ++i) {
    double ac = 0;
    for (int j = 0; j < 3; ++j) ac += a.matrix[i][j] * center[j];
    a.translation[i] = t[i] + center[i] - ac;
  }
  return a;
}

Vec3d AffineTransform::apply(const Vec3d& p) const noexcept {
  Vec3d out;
  for (int i = 0; i < 3; ++i)
    out[i] = matrix[i][0] * p[0] + matrix[i][1] * p[1] + matrix[i][2] * p[2] + translation[i];
  return out;
}

double AffineTransform::determinant() const noexcept {
  const auto& m = matrix;
  return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
         m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
         m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

AffineTransform AffineTransform::inverse() const {
  if (!(std::abs(determinant()) > 1e-9)) fail(ErrorCode::SingularTransform, "transform is not invertible");
  Eigen::Matrix3d m;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) m(i, j) = matrix[i][j];
  Eigen::Matrix3d inv = m.inverse();
  Eigen::Vector3d t(translation[0], translation[1], translation[2]);
  Eigen::Vector3d it = -inv * t;
  AffineTransform out;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) out.matrix[i][j] = inv(i, j);
    out.translation[i] = it(i);
  }
  return out;
}

AffineTransform compose(const AffineTransform& a, const AffineTransform& b) {
  AffineTransform c;
  c.matrix = matmul(a.matrix, b.matrix);
  c.translation = a.apply(b.translation);
  return c;
}

double distance_from_identity(const AffineTransform& t) noexcept {
  double d = 0;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) d = std::max(d, std::abs(t.matrix[i][j] - (i == j ? 1.0 : 0.0)));
    d = std::max(d, std::abs(t.translation[i]));
  }
  return d;
}

double rotation_angle_degrees(const AffineTransform& t) {
  Eigen::Matrix3d m;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) m(i, j) = t.matrix[i][j];
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d r = svd.matrixU() * svd.matrixV().transpose();
  double c = std::clamp((r.trace() - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c) * 180.0 / M_PI;
}

double registration_cost(const Volume3D& moving, const Volume3D& fixed, const AffineTransform& t) {
  Volume3D warped = apply_transform(moving, t, fixed);
  double sum = 0;
  for (std::size_t i = 0; i < warped.size(); ++i) {
    double r = static_cast<double>(warped.data()[i]) - fixed.data()[i];
    sum += r * r;
  }
  return sum / static_cast<double>(fixed.size());
}

RegistrationResult register_volumes(const Volume3D& moving, const Volume3D& fixed,
                                    RegistrationMode mode, const RegistrationConfig& config) {
  if (moving.size() == 0 || fixed.size() == 0) fail(ErrorCode::DegenerateInput, "empty volume");
  if (!(variance(moving) > 0.0) || !(variance(fixed) > 0.0))
    fail(ErrorCode::DegenerateInput, "registration needs non-constant volumes");
  for (auto d : fixed.dims())
    if (d < 2) fail(ErrorCode::DegenerateInput, "registration needs at least 2 voxels per axis");
  if (config.levels < 1 || config.max_iterations < 0)
    fail(ErrorCode::InvalidArgument, "registration levels must be >= 1");

  Vec3d center = grid_center(fixed);
  double radius = 0;
  for (int a = 0; a < 3; ++a) {
    double n = static_cast<double>(fixed.dims()[a]);
    double s = fixed.spacing()[a];
    radius += (n * n - 1.0) / 12.0 * s * s;
  }
  radius = std::sqrt(radius);
  RegistrationProblem problem(mode, center, radius);

  // Drop levels that would shrink the fixed grid below 8 voxels on an axis.
  int levels = config.levels;
  auto min_dim = *std::min_element(fixed.dims().begin(), fixed.dims().end());
  while (levels > 1 && (min_dim >> (levels - 1)) < 8) --levels;

  RegistrationResult result;
  std::vector<double> q = problem.identity_params();
  double full_cost = problem.evaluate(moving, fixed, q, nullptr);
  result.initial_cost = full_cost;
  result.level_costs.push_back(full_cost);

  for (int level = levels - 1; level >= 0; --level) {
    int factor = 1 << level;
    Volume3D fl = pyramid_level(fixed, factor);
    Volume3D ml = pyramid_level(moving, factor);
    double voxel = (fl.spacing()[0] + fl.spacing()[1] + fl.spacing()[2]) / 3.0;
    double step = config.initial_step_mm > 0 ? config.initial_step_mm * factor : voxel;
    double max_step = 4.0 * step;
    double min_step = config.min_step_mm;

    std::vector<double> qlevel = q;
    std::vector<double> grad;
    double cost = problem.evaluate(ml, fl, qlevel, &grad);
    std::vector<double> history{cost};
    bool converged = false;
    double last_rel = 0;
    for (int iter = 0; iter < config.max_iterations; ++iter) {
      double gnorm = std::sqrt(std::inner_product(grad.begin(), grad.end(), grad.begin(), 0.0));
      if (!(gnorm > 0.0)) {
        converged = true;
        break;
      }
      std::vector<double> trial(qlevel.size());
      double trial_cost = cost;
      bool accepted = false;
      while (step >= min_step) {
        for (std::size_t p = 0; p < qlevel.size(); ++p) trial[p] = qlevel[p] - step * grad[p] / gnorm;
        trial_cost = problem.evaluate(ml, fl, trial, nullptr);
        if (trial_cost <= cost - 1e-4 * step * gnorm) {
          accepted = true;
          break;
        }
        step *= 0.5;
      }
      if (!accepted) {
        converged = true;
        break;
      }
      last_rel = (cost - trial_cost) / std::max(cost, 1e-300);
      qlevel = trial;
      cost = problem.evaluate(ml, fl, qlevel, &grad);
      history.push_back(cost);
      step = std::min(step * 2.0, max_step);
      if (last_rel < config.tolerance) {
        converged = true;
        break;
      }
    }
    if (!converged && config.max_iterations > 0 && last_rel >= config.tolerance)
      result.no_convergence = true;
    result.cost_history.push_back(std::move(history));

    double level_cost = problem.evaluate(moving, fixed, qlevel, nullptr);
    if (level_cost <= full_cost) {
      q = qlevel;
      full_cost = level_cost;
    }
    result.level_costs.push_back(full_cost);
  }

  result.transform = problem.transform(q);
  result.parameters = problem.physical(q);
  result.final_cost = full_cost;
  return result;
}

Volume3D apply_transform(const Volume3D& vol, const AffineTransform& t, const Volume3D& reference) {
  if (!(std::abs(t.determinant()) > 1e-9))
    fail(ErrorCode::SingularTransform, "transform is not invertible");
  const auto& rs = reference.spacing();
  const auto& ro = reference.origin();
  const auto& vs = vol.spacing();
  const auto& vo = vol.origin();

  // Index-space map u = M idx + b, so identity on a shared grid gives exact integer indices.
  double M[3][3], b[3];
  for (int i = 0; i < 3; ++i) {
    double ao = 0;
    for (int j = 0; j < 3; ++j) {
      M[i][j] = t.matrix[i][j] * rs[j] / vs[i];
      ao += t.matrix[i][j] * ro[j];
    }
    b[i] = (ao + t.translation[i] - vo[i]) / vs[i];
  }

  Volume3D out(reference.dims(), reference.spacing(), reference.origin());
  const auto& d = reference.dims();
  float* o = out.data().data();
  for (std::size_t k = 0; k < d[2]; ++k)
    for (std::size_t j = 0; j < d[1]; ++j)
      for (std::size_t i = 0; i < d[0]; ++i) {
        double u[3];
        for (int a = 0; a < 3; ++a)
          u[a] = M[a][0] * static_cast<double>(i) + M[a][1] * static_cast<double>(j) +
                 M[a][2] * static_cast<double>(k) + b[a];
        double v = 0;
        sample_value(vol, u[0], u[1], u[2], v);
        *o++ = static_cast<float>(v);
      }
  return out;
}

double DeformationField::max_magnitude() const {
  double m = 0;
  for (std::size_t i = 0; i < dx.size(); ++i) {
    double x = dx.data()[i], y = dy.data()[i], z = dz.data()[i];
    m = std::max(m, std::sqrt(x * x + y * y + z * z));
  }
  return m;
}

DeformationField materialize(const AffineTransform& t, const Volume3D& reference) {
  DeformationField f{Volume3D(reference.dims(), reference.spacing(), reference.origin()),
                     Volume3D(reference.dims(), reference.spacing(), reference.origin()),
                     Volume3D(reference.dims(), reference.spacing(), reference.origin())};
  const auto& d = reference.dims();
  for (std::size_t k = 0; k < d[2]; ++k)
    for (std::size_t j = 0; j < d[1]; ++j)
      for (std::size_t i = 0; i < d[0]; ++i) {
        auto p = reference.position(static_cast<double>(i), static_cast<double>(j), static_cast<double>(k));
        auto q = t.apply(p);
        f.dx.at(i, j, k) = static_cast<float>(q[0] - p[0]);
        f.dy.at(i, j, k) = static_cast<float>(q[1] - p[1]);
        f.dz.at(i, j, k) = static_cast<float>(q[2] - p[2]);
      }
  return f;
}

}  // namespace neuroens
