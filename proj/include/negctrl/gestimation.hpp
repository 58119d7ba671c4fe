#pragma once

#include <string>
#include <vector>

#include "negctrl/common.hpp"
#include "negctrl/data.hpp"
#include "negctrl/linalg.hpp"
#include "negctrl/nuisance.hpp"

namespace negctrl {

// ---------------------------------------------------------------------------
// Contrast working models
// ---------------------------------------------------------------------------

/// The non-likelihood working models, parameterized structurally so the
/// interaction restriction holds identically:
///   xi^W_Z(a,x)    = xi0(x) + eta(x) a          (k x k)
///   delta^W_A(z,x) = delta0(x) + eta(x) Gamma_Z  (k)
///   R(a,x)         = r0(x) + a r1(x)             (1 x k)
/// The eta block is the shared sub-vector of the xi- and delta-side
/// parameters; dropping it (has_eta = false) forces constant contrasts.
struct ContrastSet {
  int k = 1;
  bool has_eta = true;
  bool has_r1 = true;

  CompiledDesign xi_design, delta_design, eta_design, r0_design, r1_design;

  Matrix delta0_coef;  // k x d_delta
  Matrix xi0_coef;     // (k*k) x d_xi, row i*k+j for entry (i,j)
  Matrix eta_coef;     // (k*k) x d_eta
  Matrix r0_coef;      // k x d_r0
  Matrix r1_coef;      // k x d_r1

  static ContrastSet make(const Dataset& data, const ModelSpec& spec) {
    ContrastSet c;
    c.k = data.w_coding.k();
    require(data.z_coding.k() == c.k,
            "contrast models need |Z| == |W|; coarsen levels first");
    c.has_eta = spec.has_eta;
    c.has_r1 = spec.has_r1;
    c.xi_design = CompiledDesign(data, spec.xi_terms, false);
    c.delta_design = CompiledDesign(data, spec.delta_terms, false);
    c.eta_design = CompiledDesign(data, spec.eta_terms, false);
    c.r0_design = CompiledDesign(data, spec.r0_terms, false);
    c.r1_design = CompiledDesign(data, spec.r1_terms, false);
    c.delta0_coef = Matrix::Zero(c.k, c.delta_design.cols());
    c.xi0_coef = Matrix::Zero(c.k * c.k, c.xi_design.cols());
    c.eta_coef = Matrix::Zero(c.k * c.k, c.eta_design.cols());
    c.r0_coef = Matrix::Zero(c.k, c.r0_design.cols());
    c.r1_coef = Matrix::Zero(c.k, c.r1_design.cols());
    return c;
  }

  // --- W-side parameter packing (per W level: delta row, xi rows, eta rows)
  int w_params_per_level() const {
    return delta_design.cols() + k * xi_design.cols() +
           (has_eta ? k * eta_design.cols() : 0);
  }

  Vector pack_w_level(int i) const {
    Vector v(w_params_per_level());
    int at = 0;
    v.segment(at, delta_design.cols()) = delta0_coef.row(i);
    at += delta_design.cols();
    for (int j = 0; j < k; ++j) {
      v.segment(at, xi_design.cols()) = xi0_coef.row(i * k + j);
      at += xi_design.cols();
    }
    if (has_eta)
      for (int j = 0; j < k; ++j) {
        v.segment(at, eta_design.cols()) = eta_coef.row(i * k + j);
        at += eta_design.cols();
      }
    return v;
  }

  void unpack_w_level(int i, const Vector& v) {
    int at = 0;
    delta0_coef.row(i) = v.segment(at, delta_design.cols());
    at += delta_design.cols();
    for (int j = 0; j < k; ++j) {
      xi0_coef.row(i * k + j) = v.segment(at, xi_design.cols());
      at += xi_design.cols();
    }
    if (has_eta)
      for (int j = 0; j < k; ++j) {
        eta_coef.row(i * k + j) = v.segment(at, eta_design.cols());
        at += eta_design.cols();
      }
  }

  // --- R-side packing (per level: r0 row, then r1 row when present)
  int r_params() const {
    return k * (r0_design.cols() + (has_r1 ? r1_design.cols() : 0));
  }

  Vector pack_r() const {
    Vector v(r_params());
    int at = 0;
    for (int i = 0; i < k; ++i) {
      v.segment(at, r0_design.cols()) = r0_coef.row(i);
      at += r0_design.cols();
      if (has_r1) {
        v.segment(at, r1_design.cols()) = r1_coef.row(i);
        at += r1_design.cols();
      }
    }
    return v;
  }

  void unpack_r(const Vector& v) {
    int at = 0;
    for (int i = 0; i < k; ++i) {
      r0_coef.row(i) = v.segment(at, r0_design.cols());
      at += r0_design.cols();
      if (has_r1) {
        r1_coef.row(i) = v.segment(at, r1_design.cols());
        at += r1_design.cols();
      }
    }
  }

  // --- evaluators -----------------------------------------------------------

  Vector delta0_at(const Dataset& data, int i) const {
    return delta0_coef * delta_design.row(data, i);
  }

  Matrix xi0_at(const Dataset& data, int i) const {
    const Vector d = xi_design.row(data, i);
    Matrix out(k, k);
    for (int r = 0; r < k; ++r)
      for (int c = 0; c < k; ++c) out(r, c) = xi0_coef.row(r * k + c).dot(d);
    return out;
  }

  Matrix eta_at(const Dataset& data, int i) const {
    if (!has_eta) return Matrix::Zero(k, k);
    const Vector d = eta_design.row(data, i);
    Matrix out(k, k);
    for (int r = 0; r < k; ++r)
      for (int c = 0; c < k; ++c) out(r, c) = eta_coef.row(r * k + c).dot(d);
    return out;
  }

  /// xi^W_Z(a, x), k x k.
  Matrix xi_at(const Dataset& data, int i, int a) const {
    Matrix out = xi0_at(data, i);
    if (a && has_eta) out += eta_at(data, i);
    return out;
  }

  /// delta^W_A(z, x) for a Z level given by its contrast index (-1 = ref).
  Vector delta_at(const Dataset& data, int i, int z_contrast) const {
    Vector out = delta0_at(data, i);
    if (z_contrast >= 0 && has_eta) out += eta_at(data, i).col(z_contrast);
    return out;
  }

  /// R(a, x) as a 1 x k row.
  RowVector r_at(const Dataset& data, int i, int a) const {
    RowVector out = (r0_coef * r0_design.row(data, i)).transpose();
    if (a && has_r1) out += (r1_coef * r1_design.row(data, i)).transpose();
    return out;
  }
};

// ---------------------------------------------------------------------------
// Index functions
// ---------------------------------------------------------------------------

/// Model-gradient index functions. g0/h2 follow the gradient of
/// E[W|A,Z,X; .] in the contrast parameters; g1/h1/h3 pair each R block
/// with the matching Z-level indicator. Dimensions then automatically
/// satisfy the adequacy requirements.
struct IndexFunctions {
  const ContrastSet* contrasts = nullptr;

  int g0_dim() const { return contrasts->w_params_per_level(); }
  int g1_dim() const { return contrasts->r_params(); }

  /// Gradient of E[Gamma_Wi | a,z,x] in one level's packed parameters
  /// (identical across levels). Also the default g0 and h2.
  Vector w_gradient(const Dataset& data, int i, int a, int z_contrast) const {
    const auto& c = *contrasts;
    Vector v = Vector::Zero(g0_dim());
    int at = 0;
    v.segment(at, c.delta_design.cols()) =
        static_cast<double>(a) * c.delta_design.row(data, i);
    at += c.delta_design.cols();
    const Vector dx = c.xi_design.row(data, i);
    for (int j = 0; j < c.k; ++j) {
      if (z_contrast == j) v.segment(at, dx.size()) = dx;
      at += static_cast<int>(dx.size());
    }
    if (c.has_eta) {
      const Vector de = c.eta_design.row(data, i);
      for (int j = 0; j < c.k; ++j) {
        if (a == 1 && z_contrast == j) v.segment(at, de.size()) = de;
        at += static_cast<int>(de.size());
      }
    }
    return v;
  }

  /// Default g1, h1, h3: Z-level indicators times the R design blocks.
  Vector r_index(const Dataset& data, int i, int a, int z_contrast) const {
    const auto& c = *contrasts;
    Vector v = Vector::Zero(g1_dim());
    const Vector d0 = c.r0_design.row(data, i);
    const Vector d1 = c.r1_design.row(data, i);
    int at = 0;
    for (int lev = 0; lev < c.k; ++lev) {
      if (z_contrast == lev) v.segment(at, d0.size()) = d0;
      at += static_cast<int>(d0.size());
      if (c.has_r1) {
        if (z_contrast == lev && a == 1) v.segment(at, d1.size()) = d1;
        at += static_cast<int>(d1.size());
      }
    }
    return v;
  }
};

inline IndexFunctions default_index_functions(const ContrastSet& contrasts) {
  return IndexFunctions{&contrasts};
}

// ---------------------------------------------------------------------------
// Shared per-dataset evaluation tables
// ---------------------------------------------------------------------------

namespace detail {

/// Per-observation exposure cell tables.
inline std::vector<ExposureCells> all_cells(const JointExposureModel& model,
                                            const Dataset& data) {
  std::vector<ExposureCells> out(data.n());
  for (int i = 0; i < data.n(); ++i) out[i] = exposure_densities(model, data, i);
  return out;
}

/// Indicator vector Gamma_W (non-reference W levels) for one observation.
inline Vector gamma_w(const Dataset& data, int i) {
  Vector g = Vector::Zero(data.w_coding.k());
  const int c = data.w_coding.contrast_index(data.w[i]);
  if (c >= 0) g(c) = 1.0;
  return g;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Doubly robust g-estimation of (beta_WA, beta_WZ)
// ---------------------------------------------------------------------------

/// Solves, per W level i,
///   P_n{ (g0 - E[g0|X;alpha]) (Gamma_Wi - E[Gamma_Wi|A,Z,X]) } = 0
/// with E[Gamma_Wi|A,Z,X] assembled from the restricted baseline and the
/// linear contrast blocks. Linear in the parameters, solved exactly.
inline void solve_w_contrasts(const Dataset& data,
                              const JointExposureModel& exposure,
                              const BaselineNcoModel& baseline_w,
                              ContrastSet& contrasts,
                              const IndexFunctions& index_fns,
                              double moment_tol = 1e-8) {
  const int n = data.n();
  const int k = contrasts.k;
  const int q = contrasts.w_params_per_level();
  const auto cells = detail::all_cells(exposure, data);

  Matrix m = Matrix::Zero(q, q);
  Matrix rhs = Matrix::Zero(q, k);
  Matrix centered(n, q);
  for (int i = 0; i < n; ++i) {
    Vector eg = Vector::Zero(q);
    for (int a = 0; a < 2; ++a)
      for (int z = 0; z < exposure.num_z; ++z)
        eg += cells[i].f_az(a, z) *
              index_fns.w_gradient(data, i, a,
                                   data.z_coding.contrast_index(z));
    const int zc = data.z_coding.contrast_index(data.z[i]);
    // the default index function is also the model gradient at the
    // observed (a,z)
    const Vector g0 = index_fns.w_gradient(data, i, data.a[i], zc);
    const Vector cg = g0 - eg;
    centered.row(i) = cg;
    m += cg * g0.transpose();
    const Vector base = baseline_w.predict_contrasts(data, i);
    const Vector resid0 = detail::gamma_w(data, i) - base;
    rhs += cg * resid0.transpose();
  }
  m /= n;
  rhs /= n;
  const Matrix sol =
      solve_checked(m, rhs, "W-contrast g-estimation (collinear index "
                            "functions)");
  for (int i = 0; i < k; ++i) contrasts.unpack_w_level(i, sol.col(i));

  // exact-moment postcondition
  Matrix moment = Matrix::Zero(q, k);
  for (int i = 0; i < n; ++i) {
    const Vector base = baseline_w.predict_contrasts(data, i);
    const int zc = data.z_coding.contrast_index(data.z[i]);
    const Vector mean_w = base +
                          contrasts.delta0_at(data, i) * data.a[i] +
                          ((zc >= 0) ? Vector(contrasts.xi_at(data, i, data.a[i]).col(zc))
                                     : Vector(Vector::Zero(k)));
    const Vector resid = detail::gamma_w(data, i) - mean_w;
    moment += centered.row(i).transpose() * resid.transpose();
  }
  require_numeric(moment.cwiseAbs().maxCoeff() / n < moment_tol,
                  "W-contrast estimating equations not solved to tolerance");
}

/// Single-model variant: centering at E[.|X] and no baseline in the
/// residual, so only the exposure model and the contrasts are involved.
inline void gest_w_m2(const Dataset& data, const JointExposureModel& exposure,
                      ContrastSet& contrasts, const IndexFunctions& index_fns,
                      double moment_tol = 1e-8) {
  const int n = data.n();
  const int k = contrasts.k;
  const int q = contrasts.w_params_per_level();
  const auto cells = detail::all_cells(exposure, data);

  Matrix m = Matrix::Zero(q, q);
  Matrix rhs = Matrix::Zero(q, k);
  for (int i = 0; i < n; ++i) {
    Vector eg = Vector::Zero(q);
    for (int a = 0; a < 2; ++a)
      for (int z = 0; z < exposure.num_z; ++z)
        eg += cells[i].f_az(a, z) *
              index_fns.w_gradient(data, i, a,
                                   data.z_coding.contrast_index(z));
    const int zc = data.z_coding.contrast_index(data.z[i]);
    const Vector g0 = index_fns.w_gradient(data, i, data.a[i], zc);
    const Vector cg = g0 - eg;
    m += cg * g0.transpose();
    rhs += cg * detail::gamma_w(data, i).transpose();
  }
  m /= n;
  rhs /= n;
  const Matrix sol = solve_checked(
      m, rhs, "M2 W-contrast g-estimation (collinear index functions)");
  for (int i = 0; i < k; ++i) contrasts.unpack_w_level(i, sol.col(i));

  Matrix moment = Matrix::Zero(q, k);
  for (int i = 0; i < n; ++i) {
    Vector eg = Vector::Zero(q);
    for (int a = 0; a < 2; ++a)
      for (int z = 0; z < exposure.num_z; ++z)
        eg += cells[i].f_az(a, z) *
              index_fns.w_gradient(data, i, a,
                                   data.z_coding.contrast_index(z));
    const int zc = data.z_coding.contrast_index(data.z[i]);
    const Vector cg = index_fns.w_gradient(data, i, data.a[i], zc) - eg;
    Vector fitted = contrasts.delta0_at(data, i) * data.a[i];
    if (zc >= 0) fitted += contrasts.xi_at(data, i, data.a[i]).col(zc);
    const Vector resid = detail::gamma_w(data, i) - fitted;
    moment += cg * resid.transpose();
  }
  require_numeric(moment.cwiseAbs().maxCoeff() / n < moment_tol,
                  "M2 W-contrast estimating equations not solved to "
                  "tolerance");
}

// ---------------------------------------------------------------------------
// R-contrast estimation (three routes)
// ---------------------------------------------------------------------------

namespace detail {

/// Shared linear solver for the R moment equations
///   P_n{ c(O) (Y - offset(O) - R(A,X;beta) res(O)) } = 0,
/// where c is the (possibly centered) index function and res the k-vector
/// the R row multiplies.
struct RMomentParts {
  Vector index;   // centered or raw index function value
  double offset;  // subtracted from y before the R term
  Vector resid;   // multiplies R(a,x)
};

template <typename PartsFn>
inline void solve_r_linear(const Dataset& data, ContrastSet& contrasts,
                           PartsFn&& parts, const std::string& what,
                           double moment_tol) {
  const int n = data.n();
  const int dim = contrasts.r_params();
  Matrix m = Matrix::Zero(dim, dim);
  Vector rhs = Vector::Zero(dim);
  for (int i = 0; i < n; ++i) {
    const RMomentParts p = parts(i);
    // gradient of R(a,x) res in the packed R parameters
    Vector grad = Vector::Zero(dim);
    const Vector d0 = contrasts.r0_design.row(data, i);
    const Vector d1 = contrasts.r1_design.row(data, i);
    int at = 0;
    for (int lev = 0; lev < contrasts.k; ++lev) {
      grad.segment(at, d0.size()) = p.resid(lev) * d0;
      at += static_cast<int>(d0.size());
      if (contrasts.has_r1) {
        if (data.a[i] == 1) grad.segment(at, d1.size()) = p.resid(lev) * d1;
        at += static_cast<int>(d1.size());
      }
    }
    m += p.index * grad.transpose();
    rhs += p.index * (data.y(i) - p.offset);
  }
  m /= n;
  rhs /= n;
  contrasts.unpack_r(solve_checked(m, rhs, what));

  Vector moment = Vector::Zero(dim);
  for (int i = 0; i < n; ++i) {
    const RMomentParts p = parts(i);
    const double rterm =
        (contrasts.r_at(data, i, data.a[i]) * p.resid).value();
    moment += p.index * (data.y(i) - p.offset - rterm);
  }
  require_numeric(moment.cwiseAbs().maxCoeff() / n < moment_tol,
                  what + ": estimating equations not solved to tolerance");
}

}  // namespace detail

/// Minimum singular value of xi^W_Z(a,x) across the sample; used as the
/// Assumption-4' diagnostic before anything divides by xi.
inline double xi_invertibility_margin(const ContrastSet& contrasts,
                                      const Dataset& data) {
  double margin = std::numeric_limits<double>::infinity();
  for (int i = 0; i < data.n(); ++i)
    for (int a = 0; a < 2; ++a)
      margin = std::min(margin,
                        smallest_singular_value(contrasts.xi_at(data, i, a)));
  return margin;
}

inline void check_xi_margin(const ContrastSet& contrasts, const Dataset& data,
                            double floor_val = 1e-6) {
  const double margin = xi_invertibility_margin(contrasts, data);
  require_numeric(margin > floor_val,
                  "xi^W_Z(a,x) nearly singular (min singular value " +
                      std::to_string(margin) +
                      "): invertibility assumption violated");
}

/// Doubly robust route: centered index, residual against the assembled
/// baseline-outcome and baseline-NCO models.
inline void solve_r_contrast(const Dataset& data,
                             const JointExposureModel& exposure,
                             const BaselineOutcomeModel& baseline_y,
                             const BaselineNcoModel& baseline_w,
                             ContrastSet& contrasts,
                             const IndexFunctions& index_fns,
                             double moment_tol = 1e-8) {
  const auto cells = detail::all_cells(exposure, data);
  detail::solve_r_linear(
      data, contrasts,
      [&](int i) {
        detail::RMomentParts p;
        const int a = data.a[i];
        const int zc = data.z_coding.contrast_index(data.z[i]);
        Vector eg = Vector::Zero(contrasts.r_params());
        for (int z = 0; z < exposure.num_z; ++z)
          eg += cells[i].f_z_given_a(z, a) *
                index_fns.r_index(data, i, a,
                                  data.z_coding.contrast_index(z));
        p.index = index_fns.r_index(data, i, a, zc) - eg;
        p.offset = baseline_y.predict(data, i, a);
        p.resid = detail::gamma_w(data, i) -
                  (baseline_w.predict_contrasts(data, i) +
                   contrasts.delta0_at(data, i) * a);
        return p;
      },
      "R-contrast g-estimation (singular system)", moment_tol);
  check_xi_margin(contrasts, data);
}

/// M1 route: residual Y - R(A,X) Gamma_W with centering E[.|A,X].
inline void gest_r_m1(const Dataset& data, const JointExposureModel& exposure,
                      ContrastSet& contrasts, const IndexFunctions& index_fns,
                      double moment_tol = 1e-8) {
  const auto cells = detail::all_cells(exposure, data);
  detail::solve_r_linear(
      data, contrasts,
      [&](int i) {
        detail::RMomentParts p;
        const int a = data.a[i];
        const int zc = data.z_coding.contrast_index(data.z[i]);
        Vector eg = Vector::Zero(contrasts.r_params());
        for (int z = 0; z < exposure.num_z; ++z)
          eg += cells[i].f_z_given_a(z, a) *
                index_fns.r_index(data, i, a,
                                  data.z_coding.contrast_index(z));
        p.index = index_fns.r_index(data, i, a, zc) - eg;
        p.offset = 0.0;
        p.resid = detail::gamma_w(data, i);
        return p;
      },
      "M1 R g-estimation (singular system)", moment_tol);
}

/// M3 route: uncentered index, residuals against the jointly fitted
/// E[Y|Z=z0,A,X] and E[W|Z=z0,A,X] models.
inline void gest_r_m3(const Dataset& data,
                      const BaselineOutcomeModel& baseline_y,
                      const BaselineNcoModel& baseline_w_mle,
                      const ContrastSet& w_contrasts_mle,
                      ContrastSet& contrasts,
                      const IndexFunctions& index_fns,
                      double moment_tol = 1e-8) {
  detail::solve_r_linear(
      data, contrasts,
      [&](int i) {
        detail::RMomentParts p;
        const int a = data.a[i];
        const int zc = data.z_coding.contrast_index(data.z[i]);
        p.index = index_fns.r_index(data, i, a, zc);
        p.offset = baseline_y.predict(data, i, a);
        p.resid = detail::gamma_w(data, i) -
                  (baseline_w_mle.predict_contrasts(data, i) +
                   w_contrasts_mle.delta0_at(data, i) * a);
        return p;
      },
      "M3 R estimation (singular system)", moment_tol);
}

// ---------------------------------------------------------------------------
// Joint MLE of the additive E[W|A,Z,X] parameterization (M3 route)
// ---------------------------------------------------------------------------

struct WModelMle {
  BaselineNcoModel baseline;  // multinomial-logit baseline at (A=0, Z=z0)
  ContrastSet contrasts;      // additive contrast blocks (R side unused)
};

namespace detail {

inline Vector w_mle_mean(const WModelMle& m, const Dataset& data, int i,
                         int a, int zc) {
  Vector mu = m.baseline.predict_contrasts(data, i) +
              m.contrasts.delta0_at(data, i) * a;
  if (zc >= 0) mu += m.contrasts.xi_at(data, i, a).col(zc);
  return mu;
}

}  // namespace detail

/// Fisher-scoring MLE of the multinomial likelihood whose category means are
/// the additive parameterization (logit-linear baseline plus linear contrast
/// blocks). Steps that push any category mean outside (0,1) are halved.
inline WModelMle fit_w_model_mle(const Dataset& data, const ModelSpec& spec,
                                 const NewtonOptions& opts = NewtonOptions{}) {
  WModelMle m;
  m.baseline = fit_baseline_nco(data, spec, opts);  // starting values
  m.contrasts = ContrastSet::make(data, spec);

  const int n = data.n();
  const int k = m.contrasts.k;
  const int d0 = m.baseline.design.cols();
  const int q = m.contrasts.w_params_per_level();
  const int dim = k * d0 + k * q;
  const IndexFunctions idx{&m.contrasts};

  auto get_params = [&]() {
    Vector th(dim);
    for (int c = 0; c < k; ++c)
      th.segment(c * d0, d0) = m.baseline.coefs.row(c);
    for (int i = 0; i < k; ++i)
      th.segment(k * d0 + i * q, q) = m.contrasts.pack_w_level(i);
    return th;
  };
  auto set_params = [&](const Vector& th) {
    for (int c = 0; c < k; ++c)
      m.baseline.coefs.row(c) = th.segment(c * d0, d0);
    for (int i = 0; i < k; ++i)
      m.contrasts.unpack_w_level(i, th.segment(k * d0 + i * q, q));
  };

  const double mu_floor = 1e-10;
  auto loglik = [&]() {
    double ll = 0.0;
    for (int i = 0; i < n; ++i) {
      const int zc = data.z_coding.contrast_index(data.z[i]);
      const Vector mu = detail::w_mle_mean(m, data, i, data.a[i], zc);
      const double mu0 = 1.0 - mu.sum();
      if (mu.minCoeff() < mu_floor || mu0 < mu_floor)
        return -std::numeric_limits<double>::infinity();
      const int wc = data.w_coding.contrast_index(data.w[i]);
      ll += std::log(wc >= 0 ? mu(wc) : mu0);
    }
    return ll;
  };

  double ll = loglik();
  require_numeric(std::isfinite(ll),
                  "W model MLE: starting values give invalid means");
  for (int iter = 0; iter < opts.max_iter; ++iter) {
    Vector grad = Vector::Zero(dim);
    Matrix info = Matrix::Zero(dim, dim);
    for (int i = 0; i < n; ++i) {
      const int a = data.a[i];
      const int zc = data.z_coding.contrast_index(data.z[i]);
      const Vector mu = detail::w_mle_mean(m, data, i, a, zc);
      const double mu0 = 1.0 - mu.sum();
      const Vector p0 = m.baseline.predict_contrasts(data, i);
      const Vector x0 = m.baseline.design.row(data, i);
      // jacobian J: dim x k, column c = d mu_c / d theta
      Matrix jac = Matrix::Zero(dim, k);
      for (int c = 0; c < k; ++c) {
        for (int c2 = 0; c2 < k; ++c2) {
          const double dsoft = p0(c) * ((c == c2 ? 1.0 : 0.0) - p0(c2));
          jac.block(c2 * d0, c, d0, 1) += dsoft * x0;
        }
        jac.block(k * d0 + c * q, c, q, 1) = idx.w_gradient(data, i, a, zc);
      }
      // V^{-1} for the multinomial residual covariance
      Matrix vinv = Matrix::Constant(k, k, 1.0 / mu0);
      for (int c = 0; c < k; ++c) vinv(c, c) += 1.0 / mu(c);
      const Vector resid = detail::gamma_w(data, i) - mu;
      grad += jac * (vinv * resid);
      info += jac * vinv * jac.transpose();
    }
    if (grad.cwiseAbs().maxCoeff() / n < opts.tol) return m;
    const Vector step = solve_checked(info, grad, "W model MLE step");
    const Vector base = get_params();
    double scale = 1.0;
    bool moved = false;
    for (int h = 0; h < 40; ++h) {
      set_params(base + scale * step);
      const double cand = loglik();
      if (cand >= ll - 1e-12 * std::abs(ll) && std::isfinite(cand)) {
        ll = cand;
        moved = true;
        break;
      }
      scale *= 0.5;
    }
    if (!moved) {
      set_params(base);
      // gradient already below a loose tolerance counts as converged
      require_numeric(grad.cwiseAbs().maxCoeff() / n < 1e-5,
                      "W model MLE: step halving failed");
      return m;
    }
  }
  throw numeric_error("W model MLE did not converge");
}

}  // namespace negctrl
