#pragma once

#include <string>
#include <vector>

#include "negctrl/common.hpp"
#include "negctrl/data.hpp"
#include "negctrl/gestimation.hpp"
#include "negctrl/identify.hpp"
#include "negctrl/linalg.hpp"
#include "negctrl/nuisance.hpp"

namespace negctrl {

enum class EstimatorKind { delta1, delta2, delta3, mle, mr, gmm };

inline std::string to_string(EstimatorKind kind) {
  switch (kind) {
    case EstimatorKind::delta1: return "delta1";
    case EstimatorKind::delta2: return "delta2";
    case EstimatorKind::delta3: return "delta3";
    case EstimatorKind::mle: return "mle";
    case EstimatorKind::mr: return "mr";
    case EstimatorKind::gmm: return "gmm";
  }
  return "?";
}

inline EstimatorKind estimator_from_string(const std::string& s) {
  if (s == "delta1") return EstimatorKind::delta1;
  if (s == "delta2") return EstimatorKind::delta2;
  if (s == "delta3") return EstimatorKind::delta3;
  if (s == "mle") return EstimatorKind::mle;
  if (s == "mr") return EstimatorKind::mr;
  if (s == "gmm") return EstimatorKind::gmm;
  throw validation_error("unknown estimator '" + s + "'");
}

// ---------------------------------------------------------------------------
// Per-observation primitives
// ---------------------------------------------------------------------------

/// Everything the influence-function and estimator formulas need at one
/// observation, with all working models already evaluated.
struct ObsPrimitives {
  // data
  double y = 0.0;
  int a = 0;
  int zc = -1;          // Z contrast index, -1 for the reference level
  Vector gamma_w;       // k indicator vector of non-reference W levels
  // exposure table f(a,z|x), 2 x |Z|
  Matrix cells;
  // optional winsorization caps on the inverse conditional weights
  double cap_inv_azx = std::numeric_limits<double>::infinity();
  double cap_inv_zax = std::numeric_limits<double>::infinity();
  // working models at this x
  double ey0[2] = {0.0, 0.0};  // E[Y|Z=z0, A=a, X]
  Vector ew00;                 // E[Gamma_W | A=0, Z=z0, X]
  Vector delta0;               // delta^W_A(z0, x)
  Matrix xi0;                  // xi^W_Z(0, x)
  Matrix eta;                  // interaction block (zero when absent)
  RowVector r[2];              // R(a, x)

  int num_z() const { return static_cast<int>(cells.cols()); }
  int k() const { return static_cast<int>(gamma_w.size()); }

  double f_az(int aa, int z) const { return cells(aa, z); }
  double f_a(int aa) const { return cells.row(aa).sum(); }
  double f_z(int z) const { return cells.col(z).sum(); }
  double f_a_given_z(int aa, int z) const { return cells(aa, z) / f_z(z); }
  double f_z_given_a(int z, int aa) const { return cells(aa, z) / f_a(aa); }

  /// Inverse conditional weights, winsorized when caps are set.
  double inv_f_a_given_z(int aa, int z) const {
    return std::min(1.0 / f_a_given_z(aa, z), cap_inv_azx);
  }
  double inv_f_z_given_a(int z, int aa) const {
    return std::min(1.0 / f_z_given_a(z, aa), cap_inv_zax);
  }

  Matrix xi(int aa) const { return aa ? Matrix(xi0 + eta) : xi0; }

  /// delta^W_A(z, x) for a contrast index (-1 = reference level z0).
  Vector delta(int z_contrast) const {
    if (z_contrast < 0) return delta0;
    return delta0 + eta.col(z_contrast);
  }

  /// E[Gamma_W | Z=z0, A=a, X].
  Vector ew0(int aa) const { return ew00 + static_cast<double>(aa) * delta0; }

  /// E[Gamma_W | A=a, Z, X] at contrast index z_contrast.
  Vector ew(int aa, int z_contrast) const {
    Vector out = ew0(aa);
    if (z_contrast >= 0) out += xi(aa).col(z_contrast);
    return out;
  }

  /// E[Y | Z, A=a, X] at contrast index z_contrast.
  double ey(int aa, int z_contrast) const {
    if (z_contrast < 0) return ey0[aa];
    return ey0[aa] + (r[aa] * xi(aa).col(z_contrast)).value();
  }

  /// E[R(1-A,X) | Z, X] using f(a|z,x).
  RowVector e_r_flip(int z) const {
    return r[1] * f_a_given_z(0, z) + r[0] * f_a_given_z(1, z);
  }

  /// E[delta^W_A(Z,X) | A=aa, X] = delta0 + eta * f(z_j | aa, x).
  Vector e_delta_given_a(int aa) const {
    Vector out = delta0;
    const int nz = num_z();
    int j = 0;
    for (int z = 0; z < nz; ++z) {
      // contrast order: non-reference levels in level order
      if (z == ref_z_) continue;
      out += eta.col(j) * f_z_given_a(z, aa);
      ++j;
    }
    return out;
  }

  int ref_z_ = 0;  // reference Z level index
};

/// Observed Z level index recovered from the contrast index.
inline int obs_z_index(const ObsPrimitives& p) {
  if (p.zc < 0) return p.ref_z_;
  return p.zc < p.ref_z_ ? p.zc : p.zc + 1;
}

/// Structural zeroing used by the reduction identities: each flag removes a
/// working-model component from the multiply robust formula exactly as the
/// single-model estimators arise from it.
struct ZeroMask {
  bool y_baseline = false;   // E[Y|Z=z0,A,X] := 0
  bool w_model = false;      // E[W|A,Z,X] and all its contrast blocks := 0
  bool w_baseline00 = false; // E[W|A=0,Z=z0,X] := 0
  bool r = false;            // R(A,X) := 0
  bool inv_f_azx = false;    // 1/f(A|Z,X) := 0
  bool inv_f_zax = false;    // 1/f(Z|A,X) := 0 (and the f(1-A|X)/f(A|X) term)
};

namespace detail {

inline ObsPrimitives masked(const ObsPrimitives& p, const ZeroMask& m) {
  ObsPrimitives q = p;
  if (m.y_baseline) q.ey0[0] = q.ey0[1] = 0.0;
  if (m.w_baseline00 || m.w_model) q.ew00.setZero();
  if (m.w_model) {
    q.delta0.setZero();
    q.xi0.setZero();
    q.eta.setZero();
  }
  if (m.r) {
    q.r[0].setZero();
    q.r[1].setZero();
  }
  return q;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Influence-function evaluators
// ---------------------------------------------------------------------------

/// Uncentered EIF of Delta_confounded: the -Delta_confounded term is
/// restored by estimate_mr.
inline double eif_confounded(const ObsPrimitives& p,
                             const ZeroMask& mask = ZeroMask{}) {
  const ObsPrimitives q = detail::masked(p, mask);
  const double inv_fa =
      mask.inv_f_azx ? 0.0 : q.inv_f_a_given_z(q.a, obs_z_index(q));
  const double resid = q.y - q.ey(q.a, q.zc);
  return (2.0 * q.a - 1.0) * inv_fa * resid + (q.ey(1, q.zc) - q.ey(0, q.zc));
}

/// Uncentered EIF of Delta_bias (the -Delta_bias term restored by
/// estimate_mr). The general path follows the polytomous form with the
/// z0-baseline residual; the scalar path (k = 1) writes the same algebra
/// with the residual against the assembled E[Y|Z,A,X] and E[W|A,Z,X],
/// which coincides with the baseline form under the assembled models.
inline double eif_bias(const ObsPrimitives& p, const ZeroMask& mask = ZeroMask{},
                       bool force_general_path = false,
                       double xi_floor = 1e-6) {
  const ObsPrimitives q = detail::masked(p, mask);
  const int z_obs = obs_z_index(q);
  const double inv_fa =
      mask.inv_f_azx ? 0.0 : q.inv_f_a_given_z(q.a, z_obs);

  // term 1: E[R(1-A,X)|Z,X] (2A-1)/f(A|Z,X) (Gamma_W - E[Gamma_W|A,Z,X])
  const Vector resid_w = q.gamma_w - q.ew(q.a, q.zc);
  const double t1 =
      (q.e_r_flip(z_obs) * resid_w).value() * (2.0 * q.a - 1.0) * inv_fa;

  // term 3: R(1-A,X) delta^W_A(Z,X)
  const double t3 = (q.r[1 - q.a] * q.delta(q.zc)).value();

  // term 2 vanishes identically when the W model is structurally zeroed
  // (E[delta|1-A,X] = 0), so no xi inverse is formed in that case.
  double t2 = 0.0;
  const Vector e_delta = q.e_delta_given_a(1 - q.a);
  if (!mask.w_model && !mask.inv_f_zax &&
      e_delta.cwiseAbs().maxCoeff() > 0.0) {
    const double odds = q.f_a(1 - q.a) / q.f_a(q.a);
    if (q.k() == 1 && !force_general_path) {
      const double xi = q.xi(q.a)(0, 0);
      require_numeric(std::abs(xi) > xi_floor,
                      "xi^W_Z(a,x) below the invertibility floor");
      const double resid =
          q.y - q.ey(q.a, q.zc) -
          q.r[q.a](0) * (q.gamma_w(0) - q.ew(q.a, q.zc)(0));
      const double pi = (q.zc >= 0 ? 1.0 : -1.0) *
                        q.inv_f_z_given_a(z_obs, q.a);
      t2 = pi * resid / xi * e_delta(0) * odds;
    } else {
      const Matrix xi_a = q.xi(q.a);
      require_numeric(smallest_singular_value(xi_a) > xi_floor,
                      "xi^W_Z(a,x) below the invertibility floor");
      const double resid =
          q.y - q.ey0[q.a] - (q.r[q.a] * (q.gamma_w - q.ew0(q.a))).value();
      Vector pi = Vector::Zero(q.k());
      const double ref_term =
          -((q.zc < 0) ? q.inv_f_z_given_a(z_obs, q.a) : 0.0);
      for (int j = 0; j < q.k(); ++j) {
        pi(j) = ref_term;
        if (q.zc == j) pi(j) += q.inv_f_z_given_a(z_obs, q.a);
      }
      const Vector solved = xi_a.partialPivLu().solve(e_delta);
      t2 = resid * (pi.dot(solved)) * odds;
    }
  }
  return t1 + t2 + t3;
}

// ---------------------------------------------------------------------------
// Nuisance bundle and primitive construction
// ---------------------------------------------------------------------------

/// One estimator route's working models. Pointers reference fits owned by
/// the pipeline; any of them may be unused by a given formula.
struct NuisanceTheta {
  const JointExposureModel* exposure = nullptr;
  const BaselineOutcomeModel* outcome = nullptr;
  const BaselineNcoModel* nco = nullptr;
  const ContrastSet* contrasts = nullptr;
};

inline ObsPrimitives make_primitives(const NuisanceTheta& theta,
                                     const Dataset& data, int i) {
  const int k = data.w_coding.k();
  ObsPrimitives p;
  p.y = data.y(i);
  p.a = data.a[i];
  p.zc = data.z_coding.contrast_index(data.z[i]);
  p.ref_z_ = data.z_coding.reference;
  p.gamma_w = Vector::Zero(k);
  const int wc = data.w_coding.contrast_index(data.w[i]);
  if (wc >= 0) p.gamma_w(wc) = 1.0;
  if (theta.exposure) {
    p.cells = theta.exposure->cells_at(data, i).cells;
  } else {
    p.cells = Matrix::Constant(2, data.z_coding.size(),
                               1.0 / (2.0 * data.z_coding.size()));
  }
  if (theta.outcome) {
    p.ey0[0] = theta.outcome->predict(data, i, 0);
    p.ey0[1] = theta.outcome->predict(data, i, 1);
  }
  p.ew00 = theta.nco ? theta.nco->predict_contrasts(data, i)
                     : Vector(Vector::Zero(k));
  if (theta.contrasts) {
    p.delta0 = theta.contrasts->delta0_at(data, i);
    p.xi0 = theta.contrasts->xi0_at(data, i);
    p.eta = theta.contrasts->eta_at(data, i);
    p.r[0] = theta.contrasts->r_at(data, i, 0);
    p.r[1] = theta.contrasts->r_at(data, i, 1);
  } else {
    p.delta0 = Vector::Zero(k);
    p.xi0 = Matrix::Zero(k, k);
    p.eta = Matrix::Zero(k, k);
    p.r[0] = RowVector::Zero(k);
    p.r[1] = RowVector::Zero(k);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Point estimators
// ---------------------------------------------------------------------------

struct EstimateOptions {
  NewtonOptions newton;
  double density_floor = 1e-6;
  double xi_floor = 1e-6;
  double confidence_level = 0.95;
  bool with_sandwich = true;
  int bootstrap_resamples = 0;  // 0 = use the sandwich
  /// Winsorize inverse-probability weights at this sample quantile;
  /// 1.0 disables truncation (the default: hard floor errors instead).
  double truncate_weights_quantile = 1.0;
};

/// Sample-quantile caps for the two inverse conditional weights.
struct WeightCaps {
  double inv_azx = std::numeric_limits<double>::infinity();
  double inv_zax = std::numeric_limits<double>::infinity();
};

inline void apply_weight_caps(ObsPrimitives& p, const WeightCaps& caps) {
  p.cap_inv_azx = caps.inv_azx;
  p.cap_inv_zax = caps.inv_zax;
}

struct EstimateReport {
  std::string estimator;
  double delta = 0.0;
  double confounded = 0.0;
  double bias = 0.0;
  bool has_decomposition = true;
  double se = 0.0;
  double ci_lo = 0.0, ci_hi = 0.0;
  double confidence_level = 0.95;
  double p_value = 1.0;
  int n = 0;
  std::string provenance;
};

namespace detail {

inline void check_density_floor(const std::vector<double>& weights,
                                double floor_val, const std::string& what) {
  std::string rows;
  int bad = 0;
  for (size_t i = 0; i < weights.size(); ++i)
    if (weights[i] < floor_val) {
      ++bad;
      if (bad <= 5) rows += (rows.empty() ? "" : ", ") + std::to_string(i + 1);
    }
  if (bad)
    throw numeric_error(what + ": " + std::to_string(bad) +
                        " rows below the density floor " +
                        std::to_string(floor_val) + " (rows " + rows +
                        (bad > 5 ? ", ..." : "") + ")");
}

}  // namespace detail

/// Per-observation contribution of each estimator's Delta functional
/// (before subtracting Delta). These are exactly the zeroed reductions of
/// the multiply robust formula.
inline double delta1_contribution(const ObsPrimitives& p) {
  const int z_obs = obs_z_index(p);
  const double inv_fa = p.inv_f_a_given_z(p.a, z_obs);
  const double sign = 2.0 * p.a - 1.0;
  return sign * inv_fa * p.y -
         (p.e_r_flip(z_obs) * p.gamma_w).value() * sign * inv_fa;
}

inline double delta2_contribution(const ObsPrimitives& p, double xi_floor) {
  const int z_obs = obs_z_index(p);
  const double inv_fa = p.inv_f_a_given_z(p.a, z_obs);
  const double sign = 2.0 * p.a - 1.0;
  const double odds = p.f_a(1 - p.a) / p.f_a(p.a);
  const Vector e_delta = p.e_delta_given_a(1 - p.a);
  Vector pi = Vector::Zero(p.k());
  const double inv_fz = p.inv_f_z_given_a(z_obs, p.a);
  for (int j = 0; j < p.k(); ++j) {
    pi(j) = (p.zc < 0) ? -inv_fz : 0.0;
    if (p.zc == j) pi(j) += inv_fz;
  }
  const Matrix xi_a = p.xi(p.a);
  require_numeric(smallest_singular_value(xi_a) > xi_floor,
                  "xi^W_Z(a,x) below the invertibility floor");
  const Vector solved = xi_a.partialPivLu().solve(e_delta);
  return sign * inv_fa * p.y - p.y * pi.dot(solved) * odds;
}

inline double delta3_contribution(const ObsPrimitives& p) {
  return (p.ey(1, p.zc) - p.ey(0, p.zc)) -
         (p.r[1 - p.a] * p.delta(p.zc)).value();
}

/// Model-implied bridge functional at one observation's covariates:
/// [h(1,x) - h(0,x)] P(W|x;theta) with P(W|Z,a,x;theta) assembled from the
/// working models and f(a,z|x;alpha).
inline double mle_bridge_contribution(const ObsPrimitives& p) {
  const int nz = p.num_z();
  const int nw = p.k() + 1;
  Vector pw_x = Vector::Zero(nw);
  Matrix pw_z[2];
  RowVector ey_z[2];
  for (int a = 0; a < 2; ++a) {
    pw_z[a].resize(nw, nz);
    ey_z[a].resize(nz);
    for (int z = 0; z < nz; ++z) {
      const int zc = (z == p.ref_z_) ? -1 : (z < p.ref_z_ ? z : z - 1);
      const Vector ew = p.ew(a, zc);
      pw_z[a](0, z) = 1.0 - ew.sum();  // reference W level first
      pw_z[a].block(1, z, nw - 1, 1) = ew;
      ey_z[a](z) = p.ey(a, zc);
      pw_x += p.f_az(a, z) * pw_z[a].col(z);
    }
  }
  double h_dot[2];
  for (int a = 0; a < 2; ++a) {
    const Vector h = pw_z[a].transpose().partialPivLu().solve(
        ey_z[a].transpose());
    h_dot[a] = h.dot(pw_x);
  }
  return h_dot[1] - h_dot[0];
}

/// The model-implied reparameterized decomposition at one observation's x:
/// conf = sum_z f(z|x) delta^Y(z), bias = sum_{a,z} f(a,z|x) R(1-a) delta(z).
inline void mle_decomposition_contribution(const ObsPrimitives& p,
                                           double& conf, double& bias) {
  const int nz = p.num_z();
  for (int z = 0; z < nz; ++z) {
    const int zc = (z == p.ref_z_) ? -1 : (z < p.ref_z_ ? z : z - 1);
    conf += p.f_z(z) * (p.ey(1, zc) - p.ey(0, zc));
    for (int a = 0; a < 2; ++a)
      bias += p.f_az(a, z) * (p.r[1 - a] * p.delta(zc)).value();
  }
}

// ---------------------------------------------------------------------------
// Fitted pipeline
// ---------------------------------------------------------------------------

/// Which estimator routes to fit.
struct PipelineParts {
  bool mr = true;
  bool delta1 = true;
  bool delta2 = true;
  bool delta3 = true;  // also required by the MLE plug-in
};

/// All nuisance fits for one dataset and model specification, in the stacked
/// score order: MLE blocks first, then the g-estimation blocks.
struct FittedPipeline {
  ModelSpec spec;
  JointExposureModel exposure;
  BaselineOutcomeModel outcome;  // restricted MLE on Z=z0
  BaselineNcoModel nco;          // restricted MLE on (A=0, Z=z0)
  ContrastSet dr;                // (beta_WA, beta_WZ)_dr and beta_R_dr
  ContrastSet ipw;               // (beta_WA, beta_WZ) via the M2 route
  ContrastSet r_m1;              // beta_R via the M1 route
  WModelMle w_mle;               // joint MLE of E[W|A,Z,X] (M3 route)
  ContrastSet r_or;              // w_mle contrasts plus beta_R via M3
  PipelineParts parts;

  NuisanceTheta theta_mr() const {
    return NuisanceTheta{&exposure, &outcome, &nco, &dr};
  }
  NuisanceTheta theta_delta1() const {
    return NuisanceTheta{&exposure, nullptr, nullptr, &r_m1};
  }
  NuisanceTheta theta_delta2() const {
    return NuisanceTheta{&exposure, nullptr, nullptr, &ipw};
  }
  NuisanceTheta theta_delta3() const {
    return NuisanceTheta{nullptr, &outcome, &w_mle.baseline, &r_or};
  }
  NuisanceTheta theta_mle() const {
    return NuisanceTheta{&exposure, &outcome, &w_mle.baseline, &r_or};
  }
};

inline FittedPipeline fit_pipeline(const Dataset& data, const ModelSpec& spec,
                                   const EstimateOptions& opts =
                                       EstimateOptions{},
                                   const PipelineParts& parts =
                                       PipelineParts{}) {
  data.validate();
  spec.validate(data);
  FittedPipeline fp;
  fp.spec = spec;
  fp.parts = parts;
  fp.exposure = fit_joint_exposure(data, spec, opts.newton);
  fp.outcome = fit_baseline_outcome(data, spec, opts.newton);
  if (parts.mr || parts.delta3) {
    fp.nco = fit_baseline_nco(data, spec, opts.newton);
  }
  if (parts.mr) {
    fp.dr = ContrastSet::make(data, spec);
    const IndexFunctions idx = default_index_functions(fp.dr);
    solve_w_contrasts(data, fp.exposure, fp.nco, fp.dr, idx);
    solve_r_contrast(data, fp.exposure, fp.outcome, fp.nco, fp.dr, idx);
  }
  if (parts.delta2) {
    fp.ipw = ContrastSet::make(data, spec);
    const IndexFunctions idx = default_index_functions(fp.ipw);
    gest_w_m2(data, fp.exposure, fp.ipw, idx);
  }
  if (parts.delta1) {
    fp.r_m1 = ContrastSet::make(data, spec);
    const IndexFunctions idx = default_index_functions(fp.r_m1);
    gest_r_m1(data, fp.exposure, fp.r_m1, idx);
  }
  if (parts.delta3) {
    fp.w_mle = fit_w_model_mle(data, spec, opts.newton);
    fp.r_or = fp.w_mle.contrasts;
    const IndexFunctions idx = default_index_functions(fp.r_or);
    gest_r_m3(data, fp.outcome, fp.w_mle.baseline, fp.w_mle.contrasts,
              fp.r_or, idx);
  }
  return fp;
}

// ---------------------------------------------------------------------------
// Point estimates
// ---------------------------------------------------------------------------

namespace detail {

inline void weights_for_floor(const NuisanceTheta& theta, const Dataset& data,
                              std::vector<double>& f_azx,
                              std::vector<double>& f_zax) {
  f_azx.resize(data.n());
  f_zax.resize(data.n());
  for (int i = 0; i < data.n(); ++i) {
    const ExposureCells c = theta.exposure->cells_at(data, i);
    f_azx[i] = c.f_a_given_z(data.a[i], data.z[i]);
    f_zax[i] = c.f_z_given_a(data.z[i], data.a[i]);
  }
}

inline double upper_quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const size_t idx = std::min(
      v.size() - 1, static_cast<size_t>(q * (v.size() - 1) + 0.5));
  return v[idx];
}

}  // namespace detail

/// Caps for weight winsorization: the q-quantile of the realized inverse
/// conditional weights under the fitted exposure model.
inline WeightCaps compute_weight_caps(const NuisanceTheta& theta,
                                      const Dataset& data, double quantile) {
  WeightCaps caps;
  if (quantile >= 1.0 || !theta.exposure) return caps;
  require(quantile > 0.0, "weight truncation quantile must be in (0,1]");
  std::vector<double> f_azx, f_zax;
  detail::weights_for_floor(theta, data, f_azx, f_zax);
  std::vector<double> inv_a(data.n()), inv_z(data.n());
  for (int i = 0; i < data.n(); ++i) {
    inv_a[i] = 1.0 / f_azx[i];
    inv_z[i] = 1.0 / f_zax[i];
  }
  caps.inv_azx = detail::upper_quantile(inv_a, quantile);
  caps.inv_zax = detail::upper_quantile(inv_z, quantile);
  return caps;
}

/// Point estimate of one estimator from the fitted pipeline. Inference is
/// attached separately (see inference.hpp / analysis.hpp).
inline EstimateReport point_estimate(const Dataset& data,
                                     const FittedPipeline& fp,
                                     EstimatorKind kind,
                                     const EstimateOptions& opts =
                                         EstimateOptions{}) {
  const int n = data.n();
  EstimateReport rep;
  rep.estimator = to_string(kind);
  rep.n = n;
  rep.confidence_level = opts.confidence_level;

  NuisanceTheta theta;
  switch (kind) {
    case EstimatorKind::delta1: theta = fp.theta_delta1(); break;
    case EstimatorKind::delta2: theta = fp.theta_delta2(); break;
    case EstimatorKind::delta3: theta = fp.theta_delta3(); break;
    case EstimatorKind::mle: theta = fp.theta_mle(); break;
    case EstimatorKind::mr: theta = fp.theta_mr(); break;
    case EstimatorKind::gmm:
      throw validation_error("gmm estimates go through gmm_combine");
  }

  const bool truncating = opts.truncate_weights_quantile < 1.0;
  if (theta.exposure && !truncating) {
    std::vector<double> f_azx, f_zax;
    detail::weights_for_floor(theta, data, f_azx, f_zax);
    if (kind != EstimatorKind::delta3)
      detail::check_density_floor(f_azx, opts.density_floor,
                                  to_string(kind) + " f(A|Z,X)");
    if (kind == EstimatorKind::delta2 || kind == EstimatorKind::mr)
      detail::check_density_floor(f_zax, opts.density_floor,
                                  to_string(kind) + " f(Z|A,X)");
  }
  const WeightCaps caps =
      compute_weight_caps(theta, data, opts.truncate_weights_quantile);

  Vector conf(n), bias(n);
  switch (kind) {
    case EstimatorKind::delta1: {
      rep.provenance = "alpha: joint exposure MLE; R: M1 g-estimation";
      for (int i = 0; i < n; ++i) {
        ObsPrimitives p = make_primitives(theta, data, i);
        apply_weight_caps(p, caps);
        const int z_obs = obs_z_index(p);
        const double sign = 2.0 * p.a - 1.0;
        const double inv_fa = p.inv_f_a_given_z(p.a, z_obs);
        conf(i) = sign * inv_fa * p.y;
        bias(i) = (p.e_r_flip(z_obs) * p.gamma_w).value() * sign * inv_fa;
      }
      break;
    }
    case EstimatorKind::delta2: {
      rep.provenance =
          "alpha: joint exposure MLE; (beta_WA, beta_WZ): M2 g-estimation";
      for (int i = 0; i < n; ++i) {
        ObsPrimitives p = make_primitives(theta, data, i);
        apply_weight_caps(p, caps);
        const int z_obs = obs_z_index(p);
        const double sign = 2.0 * p.a - 1.0;
        conf(i) = sign * p.inv_f_a_given_z(p.a, z_obs) * p.y;
        bias(i) = conf(i) - delta2_contribution(p, opts.xi_floor);
      }
      break;
    }
    case EstimatorKind::delta3: {
      rep.provenance =
          "beta_W: joint MLE; beta_Y: restricted MLE; R: M3 estimation";
      for (int i = 0; i < n; ++i) {
        const ObsPrimitives p = make_primitives(theta, data, i);
        conf(i) = p.ey(1, p.zc) - p.ey(0, p.zc);
        bias(i) = (p.r[1 - p.a] * p.delta(p.zc)).value();
      }
      break;
    }
    case EstimatorKind::mle: {
      rep.provenance =
          "plug-in: alpha, beta_W, beta_Y by MLE; R: M3 estimation";
      double conf_acc = 0.0, bias_acc = 0.0;
      Vector g(n);
      for (int i = 0; i < n; ++i) {
        const ObsPrimitives p = make_primitives(theta, data, i);
        g(i) = mle_bridge_contribution(p);
        double c = 0.0, b = 0.0;
        mle_decomposition_contribution(p, c, b);
        conf(i) = c;
        bias(i) = b;
        conf_acc += c;
        bias_acc += b;
      }
      rep.delta = compensated_mean(g);
      rep.confounded = conf_acc / n;
      rep.bias = bias_acc / n;
      rep.has_decomposition = true;
      return rep;
    }
    case EstimatorKind::mr: {
      rep.provenance =
          "alpha, beta_Y, beta_W0: MLE; (beta_WA, beta_WZ), R: doubly robust "
          "g-estimation";
      for (int i = 0; i < n; ++i) {
        ObsPrimitives p = make_primitives(theta, data, i);
        apply_weight_caps(p, caps);
        conf(i) = eif_confounded(p);
        bias(i) = eif_bias(p, ZeroMask{}, false, opts.xi_floor);
      }
      break;
    }
    default:
      break;
  }
  rep.confounded = compensated_mean(conf);
  rep.bias = compensated_mean(bias);
  rep.delta = rep.confounded - rep.bias;
  return rep;
}

// ---------------------------------------------------------------------------
// Multiply robust estimate and reduction identities
// ---------------------------------------------------------------------------

/// Delta_mr solves P_n{EIF_Delta(O; Delta, theta)} = 0; the EIF is affine in
/// Delta with slope -1 so the solution is the sample mean of the uncentered
/// terms.
inline EstimateReport estimate_mr(const Dataset& data,
                                  const FittedPipeline& fp,
                                  const EstimateOptions& opts =
                                      EstimateOptions{}) {
  return point_estimate(data, fp, EstimatorKind::mr, opts);
}

inline EstimateReport estimate_delta1(const Dataset& data,
                                      const FittedPipeline& fp,
                                      const EstimateOptions& opts =
                                          EstimateOptions{}) {
  return point_estimate(data, fp, EstimatorKind::delta1, opts);
}

inline EstimateReport estimate_delta2(const Dataset& data,
                                      const FittedPipeline& fp,
                                      const EstimateOptions& opts =
                                          EstimateOptions{}) {
  return point_estimate(data, fp, EstimatorKind::delta2, opts);
}

inline EstimateReport estimate_delta3(const Dataset& data,
                                      const FittedPipeline& fp,
                                      const EstimateOptions& opts =
                                          EstimateOptions{}) {
  return point_estimate(data, fp, EstimatorKind::delta3, opts);
}

inline EstimateReport estimate_plugin_mle(const Dataset& data,
                                          const FittedPipeline& fp,
                                          const EstimateOptions& opts =
                                              EstimateOptions{}) {
  return point_estimate(data, fp, EstimatorKind::mle, opts);
}

/// Evaluates the masked multiply robust formula at the given route's fits
/// and checks it reproduces the matching single-model estimator.
struct ReductionReport {
  double mr = 0.0;
  double reduced_delta1 = 0.0, delta1 = 0.0;
  double reduced_delta2 = 0.0, delta2 = 0.0;
  double reduced_delta3 = 0.0, delta3 = 0.0;
  double max_gap = 0.0;
};

inline ReductionReport reduction_check(const Dataset& data,
                                       const FittedPipeline& fp,
                                       const EstimateOptions& opts =
                                           EstimateOptions{},
                                       double tol = 1e-10) {
  const int n = data.n();
  ReductionReport out;
  out.mr = point_estimate(data, fp, EstimatorKind::mr, opts).delta;
  out.delta1 = point_estimate(data, fp, EstimatorKind::delta1, opts).delta;
  out.delta2 = point_estimate(data, fp, EstimatorKind::delta2, opts).delta;
  out.delta3 = point_estimate(data, fp, EstimatorKind::delta3, opts).delta;

  auto masked_mr = [&](const NuisanceTheta& theta, const ZeroMask& mask) {
    Vector v(n);
    for (int i = 0; i < n; ++i) {
      const ObsPrimitives p = make_primitives(theta, data, i);
      v(i) = eif_confounded(p, mask) - eif_bias(p, mask, false, opts.xi_floor);
    }
    return compensated_mean(v);
  };

  ZeroMask m1;
  m1.y_baseline = true;
  m1.w_model = true;
  out.reduced_delta1 = masked_mr(fp.theta_delta1(), m1);

  ZeroMask m2;
  m2.y_baseline = true;
  m2.w_baseline00 = true;
  m2.r = true;
  out.reduced_delta2 = masked_mr(fp.theta_delta2(), m2);

  ZeroMask m3;
  m3.inv_f_azx = true;
  m3.inv_f_zax = true;
  // the delta3 route has no exposure model; reuse the fitted one so masked
  // factors are well defined (they multiply to zero anyway)
  NuisanceTheta theta3 = fp.theta_delta3();
  theta3.exposure = &fp.exposure;
  out.reduced_delta3 = masked_mr(theta3, m3);

  out.max_gap = std::max({std::abs(out.reduced_delta1 - out.delta1),
                          std::abs(out.reduced_delta2 - out.delta2),
                          std::abs(out.reduced_delta3 - out.delta3)});
  require_numeric(out.max_gap < tol,
                  "reduction identity violated (max gap " +
                      std::to_string(out.max_gap) + ")");
  return out;
}

}  // namespace negctrl
