#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

#include "negctrl/common.hpp"

namespace negctrl {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// Moore-Penrose pseudoinverse via SVD. Singular values below
/// rel_tol * sigma_max are treated as zero.
inline Matrix pseudo_inverse(const Matrix& m, double rel_tol = 1e-12) {
  Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  if (sv.size() == 0) return Matrix::Zero(m.cols(), m.rows());
  const double cut = rel_tol * sv(0);
  Vector inv_sv(sv.size());
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    inv_sv(i) = sv(i) > cut ? 1.0 / sv(i) : 0.0;
  return svd.matrixV() * inv_sv.asDiagonal() * svd.matrixU().transpose();
}

/// Count of singular values above rel_tol * sigma_max.
inline int numerical_rank(const Matrix& m, double rel_tol = 1e-8) {
  Eigen::JacobiSVD<Matrix> svd(m);
  const auto& sv = svd.singularValues();
  if (sv.size() == 0 || sv(0) == 0.0) return 0;
  const double cut = rel_tol * sv(0);
  int r = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (sv(i) > cut) ++r;
  return r;
}

inline double smallest_singular_value(const Matrix& m) {
  Eigen::JacobiSVD<Matrix> svd(m);
  const auto& sv = svd.singularValues();
  return sv.size() ? sv(sv.size() - 1) : 0.0;
}

/// 2-norm condition number.
inline double condition_number(const Matrix& m) {
  Eigen::JacobiSVD<Matrix> svd(m);
  const auto& sv = svd.singularValues();
  if (sv.size() == 0) return std::numeric_limits<double>::infinity();
  const double smin = sv(sv.size() - 1);
  if (smin <= 0.0) return std::numeric_limits<double>::infinity();
  return sv(0) / smin;
}

/// Solve a square linear system, refusing silently near-singular matrices.
inline Vector solve_checked(const Matrix& a, const Vector& b,
                            const std::string& what,
                            double max_cond = 1e12) {
  const double cond = condition_number(a);
  require_numeric(std::isfinite(cond) && cond <= max_cond,
                  "singular linear system in " + what +
                      " (condition number " + std::to_string(cond) + ")");
  return a.partialPivLu().solve(b);
}

inline Matrix solve_checked(const Matrix& a, const Matrix& b,
                            const std::string& what,
                            double max_cond = 1e12) {
  const double cond = condition_number(a);
  require_numeric(std::isfinite(cond) && cond <= max_cond,
                  "singular linear system in " + what +
                      " (condition number " + std::to_string(cond) + ")");
  return a.partialPivLu().solve(b);
}

/// Kahan-compensated mean; deterministic for a fixed element order.
inline double compensated_mean(const Vector& v) {
  double sum = 0.0, c = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const double t = v(i) - c;
    const double s = sum + t;
    c = (s - sum) - t;
    sum = s;
  }
  return v.size() ? sum / static_cast<double>(v.size()) : 0.0;
}

inline double expit(double eta) {
  if (eta >= 0.0) {
    const double e = std::exp(-eta);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(eta);
  return e / (1.0 + e);
}

inline double log1pexp(double eta) {
  if (eta > 33.0) return eta;
  if (eta < -33.0) return std::exp(eta);
  return std::log1p(std::exp(eta));
}

}  // namespace negctrl
