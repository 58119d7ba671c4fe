#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "negctrl/common.hpp"
#include "negctrl/data.hpp"
#include "negctrl/estimators.hpp"
#include "negctrl/linalg.hpp"
#include "negctrl/rng.hpp"

namespace negctrl {

// ---------------------------------------------------------------------------
// Normal distribution helpers
// ---------------------------------------------------------------------------

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x * M_SQRT1_2); }

/// Standard normal quantile: Acklam's rational approximation refined with
/// two Newton steps against erfc, accurate to full double precision.
inline double normal_quantile(double p) {
  require(p > 0.0 && p < 1.0, "quantile probability must be in (0,1)");
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425;
  double x;
  if (p < plow) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - plow) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) *
        q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q +
          c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  for (int it = 0; it < 2; ++it) {
    const double err = normal_cdf(x) - p;
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    if (pdf > 0.0) x -= err / pdf;
  }
  return x;
}

struct WaldInterval {
  double lo = 0.0;
  double hi = 0.0;
};

inline WaldInterval wald_interval(double delta_hat, double se, double level) {
  require(se > 0.0, "standard error must be positive");
  require(level > 0.0 && level < 1.0, "confidence level must be in (0,1)");
  const double z = normal_quantile(0.5 * (1.0 + level));
  return WaldInterval{delta_hat - z * se, delta_hat + z * se};
}

/// Two-sided normal p-value of H0: Delta = 0.
inline double wald_test(double delta_hat, double se) {
  require(se > 0.0, "standard error must be positive");
  return std::erfc(std::abs(delta_hat / se) * M_SQRT1_2);
}

// ---------------------------------------------------------------------------
// Stacked estimating-function evaluator
// ---------------------------------------------------------------------------

/// One block of the stacked M-estimation system psi = (U_theta', psi_Delta)'.
enum class BlockKind {
  exposure_a,      // factorized logit P(A=1|X)
  exposure_z,      // factorized multinomial Z | A,X
  exposure_joint,  // joint multinomial over (a,z) cells
  y_baseline,      // restricted MLE score of E[Y|Z=z0,A,X]
  w0_baseline,     // restricted MLE score of E[W|A=0,Z=z0,X]
  w_contrasts,     // g-estimation score of (beta_WA, beta_WZ)
  r_contrast,      // g-estimation score of beta_R
  w_joint_mle,     // score of the joint additive E[W|A,Z,X] MLE
  delta            // the Delta estimating function (always last, dim 1)
};

/// Vectorized evaluator of the per-observation estimating functions of one
/// estimator, with block-wise parameter perturbation for finite-difference
/// Jacobians. Owns copies of the fitted models; the pipeline is untouched.
class EstimatorStack {
public:
  EstimatorStack(const Dataset& data, const FittedPipeline& fp,
                 EstimatorKind kind, const EstimateOptions& opts)
      : data_(&data), kind_(kind), opts_(opts) {
    k_ = data.w_coding.k();
    nz_ = data.z_coding.size();
    switch (kind) {
      case EstimatorKind::mr:
        exposure_ = fp.exposure;
        outcome_ = fp.outcome;
        nco_ = fp.nco;
        contrasts_ = fp.dr;
        use_exposure_ = use_outcome_ = use_nco_ = true;
        w_variant_ = WVariant::dr;
        r_variant_ = RVariant::dr;
        break;
      case EstimatorKind::delta1:
        exposure_ = fp.exposure;
        contrasts_ = fp.r_m1;
        use_exposure_ = true;
        r_variant_ = RVariant::m1;
        break;
      case EstimatorKind::delta2:
        exposure_ = fp.exposure;
        contrasts_ = fp.ipw;
        use_exposure_ = true;
        w_variant_ = WVariant::m2;
        break;
      case EstimatorKind::delta3:
        outcome_ = fp.outcome;
        wmle_baseline_ = fp.w_mle.baseline;
        contrasts_ = fp.r_or;
        use_outcome_ = use_wmle_ = true;
        r_variant_ = RVariant::m3;
        break;
      case EstimatorKind::mle:
        exposure_ = fp.exposure;
        outcome_ = fp.outcome;
        wmle_baseline_ = fp.w_mle.baseline;
        contrasts_ = fp.r_or;
        use_exposure_ = use_outcome_ = use_wmle_ = true;
        r_variant_ = RVariant::m3;
        break;
      default:
        throw validation_error("no stacked system for this estimator");
    }
    build_layout();
    build_fixed_caches();
    init_wmle_grad_cache();
    refresh_all();
    if (opts.truncate_weights_quantile < 1.0 && use_exposure_) {
      NuisanceTheta theta;
      theta.exposure = &exposure_;
      caps_ = compute_weight_caps(theta, data,
                                  opts.truncate_weights_quantile);
    }
    delta_ = plug_in_delta();
  }

  int n() const { return data_->n(); }
  int dim() const { return total_dim_; }
  int num_blocks() const { return static_cast<int>(blocks_.size()); }
  int block_dim(int b) const { return block_dims_[b]; }
  BlockKind block_kind(int b) const { return blocks_[b]; }
  double delta_hat() const { return delta_; }

  Vector get_block(int b) const {
    switch (blocks_[b]) {
      case BlockKind::exposure_a: return exposure_.a_coefs;
      case BlockKind::exposure_z: return flatten(exposure_.z_coefs);
      case BlockKind::exposure_joint: return flatten(exposure_.joint_coefs);
      case BlockKind::y_baseline: return outcome_.coefs;
      case BlockKind::w0_baseline: return flatten(nco_.coefs);
      case BlockKind::w_contrasts: {
        Vector v(k_ * contrasts_.w_params_per_level());
        for (int i = 0; i < k_; ++i)
          v.segment(i * contrasts_.w_params_per_level(),
                    contrasts_.w_params_per_level()) =
              contrasts_.pack_w_level(i);
        return v;
      }
      case BlockKind::r_contrast: return contrasts_.pack_r();
      case BlockKind::w_joint_mle: {
        const int d0 = wmle_baseline_.design.cols();
        Vector v(k_ * d0 + k_ * contrasts_.w_params_per_level());
        for (int c = 0; c < k_; ++c)
          v.segment(c * d0, d0) = wmle_baseline_.coefs.row(c);
        for (int i = 0; i < k_; ++i)
          v.segment(k_ * d0 + i * contrasts_.w_params_per_level(),
                    contrasts_.w_params_per_level()) =
              contrasts_.pack_w_level(i);
        return v;
      }
      case BlockKind::delta: return Vector::Constant(1, delta_);
    }
    return Vector();
  }

  void set_block(int b, const Vector& v) {
    switch (blocks_[b]) {
      case BlockKind::exposure_a:
        exposure_.a_coefs = v;
        refresh_exposure();
        break;
      case BlockKind::exposure_z:
        unflatten(v, exposure_.z_coefs);
        refresh_exposure();
        break;
      case BlockKind::exposure_joint:
        unflatten(v, exposure_.joint_coefs);
        refresh_exposure();
        break;
      case BlockKind::y_baseline:
        outcome_.coefs = v;
        refresh_outcome();
        break;
      case BlockKind::w0_baseline:
        unflatten(v, nco_.coefs);
        refresh_nco();
        break;
      case BlockKind::w_contrasts: {
        const int q = contrasts_.w_params_per_level();
        for (int i = 0; i < k_; ++i)
          contrasts_.unpack_w_level(i, v.segment(i * q, q));
        refresh_contrasts();
        break;
      }
      case BlockKind::r_contrast:
        contrasts_.unpack_r(v);
        refresh_r();
        break;
      case BlockKind::w_joint_mle: {
        const int d0 = wmle_baseline_.design.cols();
        const int q = contrasts_.w_params_per_level();
        for (int c = 0; c < k_; ++c)
          wmle_baseline_.coefs.row(c) = v.segment(c * d0, d0);
        for (int i = 0; i < k_; ++i)
          contrasts_.unpack_w_level(i, v.segment(k_ * d0 + i * q, q));
        refresh_wmle();
        refresh_contrasts();
        break;
      }
      case BlockKind::delta:
        delta_ = v(0);
        break;
    }
  }

  /// Mean over observations of the stacked psi at the current parameters.
  Vector mean_psi() {
    return mean_psi_masked(std::vector<char>(blocks_.size(), 1));
  }

  /// Mean psi restricted to the rows of active blocks (inactive rows are
  /// left at zero). Used by the finite-difference Jacobian, which only
  /// needs the rows that can depend on the perturbed block.
  Vector mean_psi_masked(const std::vector<char>& active) {
    Vector acc = Vector::Zero(total_dim_);
    Vector row(total_dim_);
    ObsPrimitives p;
    for (int i = 0; i < n(); ++i) {
      emit_row(i, row, p, active);
      acc += row;
    }
    return acc / n();
  }

  /// Blocks whose psi rows change when block b's parameters move. The
  /// pipeline's dependence is lower triangular: MLE scores depend only on
  /// their own parameters, the g-estimation scores on the blocks they plug
  /// in, and the Delta row on everything.
  std::vector<char> dependents_of(int b) const {
    std::vector<char> active(blocks_.size(), 0);
    const BlockKind src = blocks_[b];
    for (size_t r = 0; r < blocks_.size(); ++r) {
      const BlockKind row = blocks_[r];
      bool dep = row == src || row == BlockKind::delta;
      if (row == BlockKind::w_contrasts)
        dep = dep || src == BlockKind::exposure_a ||
              src == BlockKind::exposure_z ||
              src == BlockKind::exposure_joint ||
              (w_variant_ == WVariant::dr && src == BlockKind::w0_baseline);
      if (row == BlockKind::r_contrast) {
        if (r_variant_ == RVariant::dr)
          dep = dep || src == BlockKind::exposure_a ||
                src == BlockKind::exposure_z ||
                src == BlockKind::exposure_joint ||
                src == BlockKind::y_baseline ||
                src == BlockKind::w0_baseline ||
                src == BlockKind::w_contrasts;
        if (r_variant_ == RVariant::m1)
          dep = dep || src == BlockKind::exposure_a ||
                src == BlockKind::exposure_z ||
                src == BlockKind::exposure_joint;
        if (r_variant_ == RVariant::m3)
          dep = dep || src == BlockKind::y_baseline ||
                src == BlockKind::w_joint_mle;
      }
      if (dep) active[r] = 1;
    }
    return active;
  }

  /// n x K matrix of per-observation psi values.
  Matrix psi_matrix() {
    Matrix out(n(), total_dim_);
    Vector row(total_dim_);
    ObsPrimitives p;
    const std::vector<char> all(blocks_.size(), 1);
    for (int i = 0; i < n(); ++i) {
      emit_row(i, row, p, all);
      out.row(i) = row;
    }
    return out;
  }

  /// The estimator's plug-in value at the current nuisance parameters.
  double plug_in_delta() {
    Vector v(n());
    ObsPrimitives p;
    for (int i = 0; i < n(); ++i) {
      if (k_ == 1) {
        v(i) = delta_contribution_k1(i);
      } else {
        fill_primitives(i, p);
        v(i) = delta_contribution(p);
      }
    }
    return compensated_mean(v);
  }

private:
  enum class WVariant { none, dr, m2 };
  enum class RVariant { none, dr, m1, m3 };

  static Vector flatten(const Matrix& m) {
    Vector v(m.size());
    int at = 0;
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) v(at++) = m(r, c);
    return v;
  }
  static void unflatten(const Vector& v, Matrix& m) {
    int at = 0;
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = v(at++);
  }

  void build_layout() {
    blocks_.clear();
    if (use_exposure_) {
      if (exposure_.form == ExposureForm::joint) {
        blocks_.push_back(BlockKind::exposure_joint);
      } else {
        blocks_.push_back(BlockKind::exposure_a);
        blocks_.push_back(BlockKind::exposure_z);
      }
    }
    if (use_wmle_) blocks_.push_back(BlockKind::w_joint_mle);
    if (use_outcome_) blocks_.push_back(BlockKind::y_baseline);
    if (use_nco_) blocks_.push_back(BlockKind::w0_baseline);
    if (w_variant_ != WVariant::none) blocks_.push_back(BlockKind::w_contrasts);
    if (r_variant_ != RVariant::none) blocks_.push_back(BlockKind::r_contrast);
    blocks_.push_back(BlockKind::delta);

    block_dims_.clear();
    total_dim_ = 0;
    for (const auto kind : blocks_) {
      int d = 0;
      switch (kind) {
        case BlockKind::exposure_a: d = static_cast<int>(exposure_.a_coefs.size()); break;
        case BlockKind::exposure_z: d = static_cast<int>(exposure_.z_coefs.size()); break;
        case BlockKind::exposure_joint: d = static_cast<int>(exposure_.joint_coefs.size()); break;
        case BlockKind::y_baseline: d = static_cast<int>(outcome_.coefs.size()); break;
        case BlockKind::w0_baseline: d = static_cast<int>(nco_.coefs.size()); break;
        case BlockKind::w_contrasts: d = k_ * contrasts_.w_params_per_level(); break;
        case BlockKind::r_contrast: d = contrasts_.r_params(); break;
        case BlockKind::w_joint_mle:
          d = k_ * wmle_baseline_.design.cols() +
              k_ * contrasts_.w_params_per_level();
          break;
        case BlockKind::delta: d = 1; break;
      }
      block_dims_.push_back(d);
      total_dim_ += d;
    }
  }

  void build_fixed_caches() {
    const Dataset& d = *data_;
    const int n = d.n();
    gamma_w_.resize(n, k_);
    zc_.resize(n);
    for (int i = 0; i < n; ++i) {
      gamma_w_.row(i).setZero();
      const int wc = d.w_coding.contrast_index(d.w[i]);
      if (wc >= 0) gamma_w_(i, wc) = 1.0;
      zc_[i] = d.z_coding.contrast_index(d.z[i]);
    }
    if (use_exposure_) {
      if (exposure_.form == ExposureForm::joint) {
        joint_rows_ = exposure_.joint_design.matrix(d);
      } else {
        a_rows_ = exposure_.a_design.matrix(d);
        const int dz = exposure_.z_design.cols();
        z_rows_[0].resize(n, dz + 1);
        z_rows_[1].resize(n, dz + 1);
        for (int a = 0; a < 2; ++a) {
          const Matrix base = exposure_.z_design.matrix_at(d, a);
          for (int i = 0; i < n; ++i) {
            z_rows_[a](i, 0) = 1.0;
            z_rows_[a](i, 1) = a;
            for (int j = 1; j < dz; ++j) z_rows_[a](i, 1 + j) = base(i, j);
          }
        }
      }
    }
    if (use_outcome_) {
      y_rows_[0] = outcome_.design.matrix_at(d, 0);
      y_rows_[1] = outcome_.design.matrix_at(d, 1);
    }
    if (use_nco_) w0_rows_ = nco_.design.matrix(d);
    if (use_wmle_) wmle_rows_ = wmle_baseline_.design.matrix(d);
    dd_ = contrasts_.delta_design.matrix(d);
    dx_ = contrasts_.xi_design.matrix(d);
    de_ = contrasts_.eta_design.matrix(d);
    dr0_ = contrasts_.r0_design.matrix(d);
    dr1_ = contrasts_.r1_design.matrix(d);

    const IndexFunctions idx{&contrasts_};
    if (w_variant_ != WVariant::none) {
      const int q = idx.g0_dim();
      g0_cells_.resize(n, 2 * nz_ * q);
      for (int i = 0; i < n; ++i)
        for (int a = 0; a < 2; ++a)
          for (int z = 0; z < nz_; ++z)
            g0_cells_.block(i, (a * nz_ + z) * q, 1, q) =
                idx.w_gradient(d, i, a, d.z_coding.contrast_index(z))
                    .transpose();
    }
    if (r_variant_ != RVariant::none) {
      const int q = idx.g1_dim();
      g1_cells_.resize(n, nz_ * q);
      for (int i = 0; i < n; ++i)
        for (int z = 0; z < nz_; ++z)
          g1_cells_.block(i, z * q, 1, q) =
              idx.r_index(d, i, d.a[i], d.z_coding.contrast_index(z))
                  .transpose();
    }
  }

  void refresh_all() {
    refresh_exposure();
    refresh_outcome();
    refresh_nco();
    refresh_wmle();
    refresh_contrasts();
    refresh_r();
  }

  void refresh_exposure() {
    if (!use_exposure_) {
      cells_ = Matrix::Constant(data_->n(), 2 * nz_, 1.0 / (2.0 * nz_));
      return;
    }
    const Dataset& d = *data_;
    const int n = d.n();
    cells_.resize(n, 2 * nz_);
    if (exposure_.form == ExposureForm::joint) {
      for (int i = 0; i < n; ++i) {
        Vector eta = Vector::Zero(2 * nz_);
        int idx = 0;
        for (int a = 0; a < 2; ++a)
          for (int z = 0; z < nz_; ++z) {
            if (a == 0 && z == exposure_.z_reference) continue;
            ++idx;
            eta(idx) = exposure_.joint_coefs.row(idx - 1)
                           .dot(joint_rows_.row(i));
          }
        const double shift = eta.maxCoeff();
        double denom = 0.0;
        for (int c = 0; c < 2 * nz_; ++c) denom += std::exp(eta(c) - shift);
        for (int a = 0; a < 2; ++a)
          for (int z = 0; z < nz_; ++z)
            cells_(i, a * nz_ + z) =
                std::exp(eta(exposure_.cell_category(a, z)) - shift) / denom;
      }
    } else {
      for (int i = 0; i < n; ++i) {
        const double pa1 = expit(exposure_.a_coefs.dot(a_rows_.row(i)));
        for (int a = 0; a < 2; ++a) {
          Vector eta = Vector::Zero(nz_);
          int idx = 0;
          for (int z = 0; z < nz_; ++z) {
            if (z == exposure_.z_reference) continue;
            eta(z) = exposure_.z_coefs.row(idx++).dot(z_rows_[a].row(i));
          }
          const double shift = eta.maxCoeff();
          double denom = 0.0;
          for (int z = 0; z < nz_; ++z) denom += std::exp(eta(z) - shift);
          const double pa = a ? pa1 : 1.0 - pa1;
          for (int z = 0; z < nz_; ++z)
            cells_(i, a * nz_ + z) = pa * std::exp(eta(z) - shift) / denom;
        }
      }
    }
    refresh_centerings();
  }

  void refresh_centerings() {
    const int n = data_->n();
    if (w_variant_ != WVariant::none) {
      const int q = k_ > 0 ? static_cast<int>(g0_cells_.cols()) / (2 * nz_) : 0;
      eg0_.resize(n, q);
      for (int i = 0; i < n; ++i) {
        RowVector acc = RowVector::Zero(q);
        for (int a = 0; a < 2; ++a)
          for (int z = 0; z < nz_; ++z)
            acc += cells_(i, a * nz_ + z) *
                   g0_cells_.block(i, (a * nz_ + z) * q, 1, q);
        eg0_.row(i) = acc;
      }
    }
    if (r_variant_ == RVariant::dr || r_variant_ == RVariant::m1) {
      const int q = static_cast<int>(g1_cells_.cols()) / nz_;
      eg1_.resize(n, q);
      for (int i = 0; i < n; ++i) {
        const int a = data_->a[i];
        double fa = 0.0;
        for (int z = 0; z < nz_; ++z) fa += cells_(i, a * nz_ + z);
        RowVector acc = RowVector::Zero(q);
        for (int z = 0; z < nz_; ++z)
          acc += cells_(i, a * nz_ + z) / fa * g1_cells_.block(i, z * q, 1, q);
        eg1_.row(i) = acc;
      }
    }
  }

  void refresh_outcome() {
    if (!use_outcome_) {
      ey0_ = Matrix::Zero(data_->n(), 2);
      return;
    }
    const int n = data_->n();
    ey0_.resize(n, 2);
    for (int a = 0; a < 2; ++a) {
      Vector eta = y_rows_[a] * outcome_.coefs;
      for (int i = 0; i < n; ++i)
        ey0_(i, a) =
            outcome_.link == OutcomeLink::logistic ? expit(eta(i)) : eta(i);
    }
  }

  void refresh_nco() {
    const int n = data_->n();
    if (!use_nco_) {
      if (!use_wmle_) ew00_ = Matrix::Zero(n, k_);
      return;
    }
    ew00_.resize(n, k_);
    for (int i = 0; i < n; ++i)
      ew00_.row(i) = softmax_contrasts(nco_, w0_rows_.row(i)).transpose();
  }

  void refresh_wmle() {
    if (!use_wmle_) return;
    const int n = data_->n();
    ew00_.resize(n, k_);
    for (int i = 0; i < n; ++i)
      ew00_.row(i) =
          softmax_contrasts(wmle_baseline_, wmle_rows_.row(i)).transpose();
  }

  static Vector softmax_contrasts(const BaselineNcoModel& m,
                                  const RowVector& x) {
    Vector eta = Vector::Zero(m.num_w);
    int idx = 0;
    for (int w = 0; w < m.num_w; ++w) {
      if (w == m.w_reference) continue;
      eta(w) = m.coefs.row(idx++).dot(x);
    }
    const double shift = eta.maxCoeff();
    double denom = 0.0;
    for (int w = 0; w < m.num_w; ++w) denom += std::exp(eta(w) - shift);
    Vector out(m.num_w - 1);
    idx = 0;
    for (int w = 0; w < m.num_w; ++w) {
      if (w == m.w_reference) continue;
      out(idx++) = std::exp(eta(w) - shift) / denom;
    }
    return out;
  }

  void refresh_contrasts() {
    const int n = data_->n();
    delta0_ = dd_ * contrasts_.delta0_coef.transpose();  // n x k
    xi0_.resize(n, k_ * k_);
    eta_.resize(n, k_ * k_);
    for (int r = 0; r < k_; ++r)
      for (int c = 0; c < k_; ++c) {
        xi0_.col(r * k_ + c) = dx_ * contrasts_.xi0_coef.row(r * k_ + c).transpose();
        if (contrasts_.has_eta)
          eta_.col(r * k_ + c) =
              de_ * contrasts_.eta_coef.row(r * k_ + c).transpose();
        else
          eta_.col(r * k_ + c).setZero();
      }
  }

  void refresh_r() {
    r0_ = dr0_ * contrasts_.r0_coef.transpose();  // n x k
    if (contrasts_.has_r1)
      r1_ = dr1_ * contrasts_.r1_coef.transpose();
    else
      r1_ = Matrix::Zero(data_->n(), k_);
  }

  void fill_primitives(int i, ObsPrimitives& p) const {
    const Dataset& d = *data_;
    p.y = d.y(i);
    p.a = d.a[i];
    p.zc = zc_[i];
    p.ref_z_ = d.z_coding.reference;
    p.gamma_w = gamma_w_.row(i).transpose();
    p.cells.resize(2, nz_);
    for (int a = 0; a < 2; ++a)
      for (int z = 0; z < nz_; ++z) p.cells(a, z) = cells_(i, a * nz_ + z);
    p.ey0[0] = ey0_(i, 0);
    p.ey0[1] = ey0_(i, 1);
    p.ew00 = ew00_.row(i).transpose();
    p.delta0 = delta0_.row(i).transpose();
    p.xi0.resize(k_, k_);
    p.eta.resize(k_, k_);
    for (int r = 0; r < k_; ++r)
      for (int c = 0; c < k_; ++c) {
        p.xi0(r, c) = xi0_(i, r * k_ + c);
        p.eta(r, c) = eta_(i, r * k_ + c);
      }
    p.r[0] = r0_.row(i);
    p.r[1] = r0_.row(i) + r1_.row(i);
    p.cap_inv_azx = caps_.inv_azx;
    p.cap_inv_zax = caps_.inv_zax;
  }

  double delta_contribution(const ObsPrimitives& p) const {
    switch (kind_) {
      case EstimatorKind::delta1: return delta1_contribution(p);
      case EstimatorKind::delta2: return delta2_contribution(p, opts_.xi_floor);
      case EstimatorKind::delta3: return delta3_contribution(p);
      case EstimatorKind::mle: return mle_bridge_contribution(p);
      case EstimatorKind::mr:
        return eif_confounded(p) - eif_bias(p, ZeroMask{}, false,
                                            opts_.xi_floor);
      default: return 0.0;
    }
  }

  /// Scalar path for binary Z and W, reading the primitive arrays directly.
  double delta_contribution_k1(int i) const {
    const Dataset& d = *data_;
    const int a = d.a[i];
    const int z_obs = d.z[i];
    const int zc = zc_[i];
    const double y = d.y(i);
    const double gw = gamma_w_(i, 0);
    const double f00 = cells_(i, 0), f01 = cells_(i, 1);
    const double f10 = cells_(i, 2), f11 = cells_(i, 3);
    const double fa0 = f00 + f01, fa1 = f10 + f11;
    const double fz = (a ? f10 + f11 : f00 + f01);
    const double f_obs = cells_(i, a * 2 + z_obs);
    const double fa_z = f_obs / (cells_(i, z_obs) + cells_(i, 2 + z_obs));
    const double fz_a = f_obs / fz;
    const double inv_fa = std::min(1.0 / fa_z, caps_.inv_azx);
    const double inv_fz = std::min(1.0 / fz_a, caps_.inv_zax);
    const double d0 = delta0_(i, 0), et = eta_(i, 0), x0 = xi0_(i, 0);
    const double xi_a = x0 + a * et;
    const double r_arm[2] = {r0_(i, 0), r0_(i, 0) + r1_(i, 0)};
    const double ew00v = ew00_(i, 0);
    const double in_z = zc >= 0 ? 1.0 : 0.0;
    const double ew_a = ew00v + a * d0 + in_z * xi_a;
    const double ey_arm[2] = {ey0_(i, 0) + in_z * r_arm[0] * x0,
                              ey0_(i, 1) + in_z * r_arm[1] * (x0 + et)};
    const double sign = 2.0 * a - 1.0;
    const double dyz = ey_arm[1] - ey_arm[0];
    const double delta_z = d0 + in_z * et;

    switch (kind_) {
      case EstimatorKind::delta1: {
        const double er_flip =
            r_arm[1] * (cells_(i, z_obs) /
                        (cells_(i, z_obs) + cells_(i, 2 + z_obs))) +
            r_arm[0] * (cells_(i, 2 + z_obs) /
                        (cells_(i, z_obs) + cells_(i, 2 + z_obs)));
        return sign * inv_fa * y - er_flip * gw * sign * inv_fa;
      }
      case EstimatorKind::delta2: {
        const int znr = exposure_.z_reference == 0 ? 1 : 0;
        const double fznr_flip =
            (a ? cells_(i, znr) / fa0 : cells_(i, 2 + znr) / fa1);
        const double e_delta = d0 + et * fznr_flip;
        const double odds = (a ? fa0 / fa1 : fa1 / fa0);
        require_numeric(std::abs(xi_a) > opts_.xi_floor,
                        "xi^W_Z(a,x) below the invertibility floor");
        const double pi = (zc >= 0 ? 1.0 : -1.0) * inv_fz;
        return sign * inv_fa * y - y * pi / xi_a * e_delta * odds;
      }
      case EstimatorKind::delta3:
        return dyz - r_arm[1 - a] * delta_z;
      case EstimatorKind::mle: {
        // 2x2 bridge solve per arm by determinant
        double pw_x0 = 0.0, pw_x1 = 0.0, h_dot[2];
        double ew_az[2][2], ey_az[2][2];
        for (int aa = 0; aa < 2; ++aa) {
          const double xi_aa = x0 + aa * et;
          const double ew0_aa = ew00v + aa * d0;
          for (int z = 0; z < 2; ++z) {
            const bool nonref = z != exposure_.z_reference;
            ew_az[aa][z] = ew0_aa + (nonref ? xi_aa : 0.0);
            ey_az[aa][z] =
                ey0_(i, aa) + (nonref ? r_arm[aa] * xi_aa : 0.0);
          }
          for (int z = 0; z < 2; ++z) {
            pw_x0 += cells_(i, aa * 2 + z) * (1.0 - ew_az[aa][z]);
            pw_x1 += cells_(i, aa * 2 + z) * ew_az[aa][z];
          }
        }
        for (int aa = 0; aa < 2; ++aa) {
          const double p00 = 1.0 - ew_az[aa][0], p01 = 1.0 - ew_az[aa][1];
          const double p10 = ew_az[aa][0], p11 = ew_az[aa][1];
          const double det = p00 * p11 - p01 * p10;
          // h solves [ey0, ey1] = h [p00 p01; p10 p11]
          const double h0 = (ey_az[aa][0] * p11 - ey_az[aa][1] * p10) / det;
          const double h1 = (ey_az[aa][1] * p00 - ey_az[aa][0] * p01) / det;
          h_dot[aa] = h0 * pw_x0 + h1 * pw_x1;
        }
        return h_dot[1] - h_dot[0];
      }
      case EstimatorKind::mr: {
        const double conf = sign * inv_fa * (y - ey_arm[a]) + dyz;
        const double pa0_z = cells_(i, z_obs) /
                             (cells_(i, z_obs) + cells_(i, 2 + z_obs));
        const double er_flip = r_arm[1] * pa0_z + r_arm[0] * (1.0 - pa0_z);
        const double t1 = er_flip * sign * inv_fa * (gw - ew_a);
        const int znr = exposure_.z_reference == 0 ? 1 : 0;
        const double fznr_flip =
            (a ? cells_(i, znr) / fa0 : cells_(i, 2 + znr) / fa1);
        const double e_delta = d0 + et * fznr_flip;
        double t2 = 0.0;
        if (e_delta != 0.0) {
          require_numeric(std::abs(xi_a) > opts_.xi_floor,
                          "xi^W_Z(a,x) below the invertibility floor");
          const double resid = y - ey_arm[a] - r_arm[a] * (gw - ew_a);
          const double pi = (zc >= 0 ? 1.0 : -1.0) * inv_fz;
          const double odds = (a ? fa0 / fa1 : fa1 / fa0);
          t2 = pi * resid / xi_a * e_delta * odds;
        }
        const double t3 = r_arm[1 - a] * delta_z;
        return conf - (t1 + t2 + t3);
      }
      default:
        return 0.0;
    }
  }

  void emit_row(int i, Vector& row, ObsPrimitives& p,
                const std::vector<char>& active) {
    row.setZero();
    bool filled = false;
    int at = 0;
    for (size_t b = 0; b < blocks_.size(); ++b) {
      const int dim = block_dims_[b];
      if (!active[b]) {
        at += dim;
        continue;
      }
      if (blocks_[b] == BlockKind::delta) {
        if (k_ == 1) {
          row(at) = delta_contribution_k1(i) - delta_;
        } else {
          if (!filled) {
            fill_primitives(i, p);
            filled = true;
          }
          row(at) = delta_contribution(p) - delta_;
        }
      } else {
        if (!filled) {
          fill_primitives(i, p);
          filled = true;
        }
        emit_score(i, b, row, p, at);
      }
      at += dim;
    }
  }

  void emit_score(int i, size_t b, Vector& row, const ObsPrimitives& p,
                  int at) {
    const Dataset& d = *data_;
    const int dim = block_dims_[b];
    {
      switch (blocks_[b]) {
        case BlockKind::exposure_a: {
          const double pa1 = p.f_a(1);
          row.segment(at, dim) = (d.a[i] - pa1) * a_rows_.row(i).transpose();
          break;
        }
        case BlockKind::exposure_z: {
          const int dzf = static_cast<int>(z_rows_[0].cols());
          int idx = 0;
          for (int z = 0; z < nz_; ++z) {
            if (z == exposure_.z_reference) continue;
            const double resid =
                (d.z[i] == z ? 1.0 : 0.0) - p.f_z_given_a(z, d.a[i]);
            row.segment(at + idx * dzf, dzf) =
                resid * z_rows_[d.a[i]].row(i).transpose();
            ++idx;
          }
          break;
        }
        case BlockKind::exposure_joint: {
          const int dj = static_cast<int>(joint_rows_.cols());
          const int cat = exposure_.cell_category(d.a[i], d.z[i]);
          int idx = 0;
          for (int a = 0; a < 2; ++a)
            for (int z = 0; z < nz_; ++z) {
              if (a == 0 && z == exposure_.z_reference) continue;
              ++idx;
              const double resid = (cat == idx ? 1.0 : 0.0) - p.f_az(a, z);
              row.segment(at + (idx - 1) * dj, dj) =
                  resid * joint_rows_.row(i).transpose();
            }
          break;
        }
        case BlockKind::y_baseline: {
          if (d.z[i] == d.z_coding.reference) {
            const double resid = d.y(i) - p.ey0[d.a[i]];
            row.segment(at, dim) =
                resid * y_rows_[d.a[i]].row(i).transpose();
          }
          break;
        }
        case BlockKind::w0_baseline: {
          if (d.a[i] == 0 && d.z[i] == d.z_coding.reference) {
            const Vector resid =
                p.gamma_w - ew00_.row(i).transpose();
            const int d0 = static_cast<int>(w0_rows_.cols());
            for (int c = 0; c < k_; ++c)
              row.segment(at + c * d0, d0) =
                  resid(c) * w0_rows_.row(i).transpose();
          }
          break;
        }
        case BlockKind::w_contrasts: {
          const int q = contrasts_.w_params_per_level();
          const int cell = d.a[i] * nz_ + d.z[i];
          const RowVector cg =
              g0_cells_.block(i, cell * q, 1, q) - eg0_.row(i);
          for (int lev = 0; lev < k_; ++lev) {
            double fitted = p.delta0(lev) * d.a[i];
            if (p.zc >= 0) fitted += p.xi(d.a[i])(lev, p.zc);
            if (w_variant_ == WVariant::dr) fitted += p.ew00(lev);
            const double resid = p.gamma_w(lev) - fitted;
            row.segment(at + lev * q, q) = resid * cg.transpose();
          }
          break;
        }
        case BlockKind::r_contrast: {
          const int q = contrasts_.r_params();
          RowVector index(q);
          if (r_variant_ == RVariant::m3)
            index = g1_cells_.block(i, d.z[i] * q, 1, q);
          else
            index = g1_cells_.block(i, d.z[i] * q, 1, q) - eg1_.row(i);
          double resid = d.y(i);
          if (r_variant_ != RVariant::m1) {
            const Vector ew0 = p.ew0(d.a[i]);
            resid -= p.ey0[d.a[i]];
            resid -= (p.r[d.a[i]] * (p.gamma_w - ew0)).value();
          } else {
            resid -= (p.r[d.a[i]] * p.gamma_w).value();
          }
          row.segment(at, dim) = resid * index.transpose();
          break;
        }
        case BlockKind::w_joint_mle: {
          emit_wmle_score(i, p, row, at);
          break;
        }
        case BlockKind::delta:
          break;  // handled by emit_row
      }
    }
  }

  void emit_wmle_score(int i, const ObsPrimitives& p, Vector& row, int at) {
    const Dataset& d = *data_;
    const int d0 = wmle_baseline_.design.cols();
    const int q = contrasts_.w_params_per_level();
    const int a = d.a[i];
    const Vector mu = p.ew(a, p.zc);
    const double mu0 = 1.0 - mu.sum();
    const Vector p0 = ew00_.row(i).transpose();  // baseline softmax probs
    // V^{-1} residual
    Matrix vinv = Matrix::Constant(k_, k_, 1.0 / mu0);
    for (int c = 0; c < k_; ++c) vinv(c, c) += 1.0 / mu(c);
    const Vector resid = p.gamma_w - mu;
    const Vector vr = vinv * resid;
    // baseline part: d mu_c / d eta_m = p0_c (1{c=m} - p0_m)
    for (int m = 0; m < k_; ++m) {
      double coef = 0.0;
      for (int c = 0; c < k_; ++c)
        coef += p0(c) * ((c == m ? 1.0 : 0.0) - p0(m)) * vr(c);
      row.segment(at + m * d0, d0) =
          coef * wmle_rows_.row(i).transpose();
    }
    // contrast part: d mu_c / d (level-c params) = w_gradient
    const int cell = a * nz_ + d.z[i];
    const int qg = w_grad_dim_;
    for (int c = 0; c < k_; ++c)
      row.segment(at + k_ * d0 + c * q, q) =
          vr(c) * g0_wmle_cells_.block(i, cell * qg, 1, qg).transpose();
  }

  const Dataset* data_;
  EstimatorKind kind_;
  EstimateOptions opts_;
  int k_ = 1, nz_ = 2;

  JointExposureModel exposure_;
  BaselineOutcomeModel outcome_;
  BaselineNcoModel nco_;
  BaselineNcoModel wmle_baseline_;
  ContrastSet contrasts_;
  double delta_ = 0.0;

  bool use_exposure_ = false, use_outcome_ = false, use_nco_ = false,
       use_wmle_ = false;
  WVariant w_variant_ = WVariant::none;
  RVariant r_variant_ = RVariant::none;

  std::vector<BlockKind> blocks_;
  std::vector<int> block_dims_;
  int total_dim_ = 0;

  // fixed caches
  Matrix gamma_w_;
  std::vector<int> zc_;
  Matrix joint_rows_, a_rows_, z_rows_[2], y_rows_[2], w0_rows_, wmle_rows_;
  Matrix dd_, dx_, de_, dr0_, dr1_;
  Matrix g0_cells_, g1_cells_, g0_wmle_cells_;
  int w_grad_dim_ = 0;

  WeightCaps caps_;

  // parameter-dependent caches
  Matrix cells_, ey0_, ew00_, delta0_, xi0_, eta_, r0_, r1_, eg0_, eg1_;

  void init_wmle_grad_cache() {
    if (!use_wmle_) return;
    const Dataset& d = *data_;
    const IndexFunctions idx{&contrasts_};
    w_grad_dim_ = idx.g0_dim();
    g0_wmle_cells_.resize(d.n(), 2 * nz_ * w_grad_dim_);
    for (int i = 0; i < d.n(); ++i)
      for (int a = 0; a < 2; ++a)
        for (int z = 0; z < nz_; ++z)
          g0_wmle_cells_.block(i, (a * nz_ + z) * w_grad_dim_, 1, w_grad_dim_) =
              idx.w_gradient(d, i, a, d.z_coding.contrast_index(z))
                  .transpose();
  }
};

// ---------------------------------------------------------------------------
// Sandwich variance
// ---------------------------------------------------------------------------

struct SandwichOptions {
  double fd_step = 1e-6;
  double max_condition = 1e12;
};

struct SandwichResult {
  Matrix covariance;  // K x K, Var(gamma_hat)
  double se_delta = 0.0;
  double condition = 0.0;
};

namespace detail {

/// A_n = -P_n[d psi / d gamma'] by central finite differences. Rows of
/// blocks that cannot depend on the perturbed block are exactly zero and
/// are skipped via the stack's dependency masks.
template <class Stack>
Matrix bread_matrix(Stack& stack, double fd_step) {
  const int kdim = stack.dim();
  Matrix a_n = Matrix::Zero(kdim, kdim);
  int col = 0;
  for (int b = 0; b < stack.num_blocks(); ++b) {
    const std::vector<char> active = stack.dependents_of(b);
    Vector params = stack.get_block(b);
    for (int j = 0; j < stack.block_dim(b); ++j, ++col) {
      const double h = fd_step * (1.0 + std::abs(params(j)));
      const double orig = params(j);
      params(j) = orig + h;
      stack.set_block(b, params);
      const Vector up = stack.mean_psi_masked(active);
      params(j) = orig - h;
      stack.set_block(b, params);
      const Vector dn = stack.mean_psi_masked(active);
      params(j) = orig;
      stack.set_block(b, params);
      a_n.col(col) = -(up - dn) / (2.0 * h);
    }
  }
  return a_n;
}

}  // namespace detail

/// Empirical sandwich A_n^{-1} B_n A_n^{-T} / n with A_n from central finite
/// differences of the stacked estimating functions, block by block.
template <class Stack>
SandwichResult sandwich_variance(Stack& stack,
                                 const SandwichOptions& opts =
                                     SandwichOptions{}) {
  const int kdim = stack.dim();
  const int n = stack.n();
  const Matrix psi = stack.psi_matrix();
  for (int j = 0; j < kdim; ++j)
    require_numeric(std::isfinite(psi.col(j).sum()),
                    "NaN in the stacked estimating functions");
  const Matrix b_n = psi.transpose() * psi / n;
  const Matrix a_n = detail::bread_matrix(stack, opts.fd_step);

  SandwichResult out;
  out.condition = condition_number(a_n);
  require_numeric(std::isfinite(out.condition) &&
                      out.condition <= opts.max_condition,
                  "sandwich bread matrix nearly singular (condition number " +
                      std::to_string(out.condition) + ")");
  const Matrix a_inv = a_n.partialPivLu().solve(Matrix::Identity(kdim, kdim));
  out.covariance = a_inv * b_n * a_inv.transpose() / n;
  const double var_delta = out.covariance(kdim - 1, kdim - 1);
  require_numeric(var_delta >= 0.0, "negative variance estimate for delta");
  out.se_delta = std::sqrt(var_delta);
  return out;
}

// ---------------------------------------------------------------------------
// Bootstrap
// ---------------------------------------------------------------------------

struct BootstrapResult {
  double se = 0.0;
  int failures = 0;
  std::vector<std::string> failure_log;
};

/// Nonparametric bootstrap standard error: with-replacement row resampling,
/// deterministic given the seed.
inline BootstrapResult bootstrap_se(
    const Dataset& data, const std::function<double(const Dataset&)>& estimator,
    int resamples, uint64_t seed) {
  require(resamples >= 50, "bootstrap needs at least 50 resamples");
  const int n = data.n();
  std::vector<double> deltas;
  BootstrapResult out;
  for (int b = 0; b < resamples; ++b) {
    RngStream rng(seed, static_cast<uint64_t>(b) + 1);
    Dataset res = data;
    for (int i = 0; i < n; ++i) {
      const int j = static_cast<int>(rng.uniform_index(n));
      res.y(i) = data.y(j);
      res.a[i] = data.a[j];
      res.z[i] = data.z[j];
      res.w[i] = data.w[j];
      res.x.row(i) = data.x.row(j);
    }
    try {
      deltas.push_back(estimator(res));
    } catch (const std::exception& e) {
      ++out.failures;
      if (out.failure_log.size() < 20)
        out.failure_log.push_back("resample " + std::to_string(b) + ": " +
                                  e.what());
    }
  }
  require_numeric(out.failures <= resamples / 20,
                  "bootstrap failure rate above 5% (" +
                      std::to_string(out.failures) + " of " +
                      std::to_string(resamples) + ")");
  const int m = static_cast<int>(deltas.size());
  double mean = 0.0;
  for (double v : deltas) mean += v;
  mean /= m;
  double ss = 0.0;
  for (double v : deltas) ss += (v - mean) * (v - mean);
  out.se = std::sqrt(ss / (m - 1));
  return out;
}

// ---------------------------------------------------------------------------
// Report assembly
// ---------------------------------------------------------------------------

/// Attach a sandwich CI and Wald p-value to a point estimate. When
/// `covariance_out` is given, the full Var(gamma_hat) matrix is copied out
/// for diagnostics.
inline void attach_inference(EstimateReport& rep, const Dataset& data,
                             const FittedPipeline& fp, EstimatorKind kind,
                             const EstimateOptions& opts,
                             Matrix* covariance_out = nullptr) {
  EstimatorStack stack(data, fp, kind, opts);
  const auto sw = sandwich_variance(stack);
  if (covariance_out) *covariance_out = sw.covariance;
  rep.se = sw.se_delta;
  const auto ci = wald_interval(rep.delta, rep.se, opts.confidence_level);
  rep.ci_lo = ci.lo;
  rep.ci_hi = ci.hi;
  rep.p_value = wald_test(rep.delta, rep.se);
}

}  // namespace negctrl
