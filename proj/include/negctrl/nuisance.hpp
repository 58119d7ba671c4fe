#pragma once

#include <string>
#include <vector>

#include "negctrl/common.hpp"
#include "negctrl/data.hpp"
#include "negctrl/linalg.hpp"

namespace negctrl {

struct NewtonOptions {
  double tol = 1e-8;       // convergence on the max-abs mean score
  int max_iter = 100;
  double coef_cap = 30.0;  // separation guard on the logit scale
};

namespace detail {

inline void check_full_rank(const Matrix& design, const std::string& label) {
  Eigen::ColPivHouseholderQR<Matrix> qr(design);
  require_numeric(qr.rank() == design.cols(),
                  "rank-deficient design in " + label + " (rank " +
                      std::to_string(qr.rank()) + " of " +
                      std::to_string(design.cols()) + " columns)");
}

inline void check_separation(const Matrix& coefs, double cap,
                             const std::vector<std::string>& labels,
                             const std::string& what) {
  for (Eigen::Index r = 0; r < coefs.rows(); ++r)
    for (Eigen::Index c = 0; c < coefs.cols(); ++c)
      if (std::abs(coefs(r, c)) > cap)
        throw numeric_error("separation detected in " + what +
                            ": coefficient of '" +
                            labels[static_cast<size_t>(c)] +
                            "' exceeds " + std::to_string(cap) +
                            " on the logit scale");
}

/// Multinomial logit MLE with shared design. Categories are 0..C-1 with 0
/// the reference; returns the (C-1) x d coefficient matrix. Newton-Raphson
/// with step halving on the log-likelihood.
inline Matrix fit_multinomial_logit(const Matrix& design,
                                    const std::vector<int>& category, int C,
                                    const NewtonOptions& opts,
                                    const std::vector<std::string>& labels,
                                    const std::string& what) {
  const int n = static_cast<int>(design.rows());
  const int d = static_cast<int>(design.cols());
  const int m = C - 1;
  check_full_rank(design, what);

  Matrix beta = Matrix::Zero(m, d);
  auto probs = [&](const Matrix& b, int i) {
    Vector eta = b * design.row(i).transpose();
    const double cap = eta.size() ? eta.maxCoeff() : 0.0;
    const double shift = std::max(cap, 0.0);
    double denom = std::exp(-shift);
    Vector e(m);
    for (int c = 0; c < m; ++c) {
      e(c) = std::exp(eta(c) - shift);
      denom += e(c);
    }
    Vector p(m + 1);
    p(0) = std::exp(-shift) / denom;
    for (int c = 0; c < m; ++c) p(c + 1) = e(c) / denom;
    return p;
  };
  auto loglik = [&](const Matrix& b) {
    double ll = 0.0;
    for (int i = 0; i < n; ++i) ll += std::log(probs(b, i)(category[i]));
    return ll;
  };

  double ll = loglik(beta);
  for (int iter = 0; iter < opts.max_iter; ++iter) {
    Vector grad = Vector::Zero(m * d);
    Matrix hess = Matrix::Zero(m * d, m * d);
    for (int i = 0; i < n; ++i) {
      const Vector p = probs(beta, i);
      const auto xi = design.row(i);
      for (int c = 0; c < m; ++c) {
        const double resid = (category[i] == c + 1 ? 1.0 : 0.0) - p(c + 1);
        grad.segment(c * d, d) += resid * xi.transpose();
        for (int c2 = 0; c2 < m; ++c2) {
          const double wcc = p(c + 1) * ((c == c2 ? 1.0 : 0.0) - p(c2 + 1));
          hess.block(c * d, c2 * d, d, d) -= wcc * xi.transpose() * xi;
        }
      }
    }
    if (grad.cwiseAbs().maxCoeff() / n < opts.tol) {
      check_separation(beta, opts.coef_cap, labels, what);
      return beta;
    }
    Vector step = solve_checked(-hess, grad, what + " Newton step");
    double scale = 1.0;
    for (int h = 0; h < 40; ++h) {
      Matrix cand = beta;
      for (int c = 0; c < m; ++c)
        cand.row(c) += scale * step.segment(c * d, d).transpose();
      const double cand_ll = loglik(cand);
      if (cand_ll >= ll - 1e-12 * std::abs(ll)) {
        beta = cand;
        ll = cand_ll;
        break;
      }
      scale *= 0.5;
      require_numeric(h < 39, what + ": step halving failed");
    }
  }
  // final convergence check after max_iter
  Vector grad = Vector::Zero(m * d);
  for (int i = 0; i < n; ++i) {
    const Vector p = probs(beta, i);
    for (int c = 0; c < m; ++c)
      grad.segment(c * d, d) +=
          ((category[i] == c + 1 ? 1.0 : 0.0) - p(c + 1)) *
          design.row(i).transpose();
  }
  if (grad.cwiseAbs().maxCoeff() / n < opts.tol) {
    check_separation(beta, opts.coef_cap, labels, what);
    return beta;
  }
  throw numeric_error(what + ": Newton-Raphson did not converge after " +
                      std::to_string(opts.max_iter) + " iterations");
}

inline Vector fit_logistic(const Matrix& design, const Vector& y01,
                           const NewtonOptions& opts,
                           const std::vector<std::string>& labels,
                           const std::string& what) {
  std::vector<int> cat(design.rows());
  for (Eigen::Index i = 0; i < design.rows(); ++i)
    cat[i] = y01(i) != 0.0 ? 1 : 0;
  return fit_multinomial_logit(design, cat, 2, opts, labels, what)
      .row(0)
      .transpose();
}

inline Vector fit_ols(const Matrix& design, const Vector& y,
                      const std::string& what) {
  check_full_rank(design, what);
  return design.colPivHouseholderQr().solve(y);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Joint exposure model f(A,Z|X)
// ---------------------------------------------------------------------------

/// Per-observation exposure cell table with the derived conditionals of the
/// plug-in identities. All conditionals are internally coherent because they
/// come from one joint table.
struct ExposureCells {
  Matrix cells;  // 2 x |Z|, f(a,z|x)

  double f_az(int a, int z) const { return cells(a, z); }
  double f_a(int a) const { return cells.row(a).sum(); }
  double f_z(int z) const { return cells.col(z).sum(); }
  double f_a_given_z(int a, int z) const { return cells(a, z) / f_z(z); }
  double f_z_given_a(int z, int a) const { return cells(a, z) / f_a(a); }

  /// Floor guard: joint models keep probabilities interior by construction,
  /// so anything this small signals a degenerate fit.
  void check_floor(double floor_val = 1e-12) const {
    require_numeric(cells.minCoeff() > floor_val,
                    "exposure cell probability below " +
                        std::to_string(floor_val));
  }
};

/// f(A,Z|X), either one multinomial logit over the 2|Z| joint cells
/// (reference cell (0,z0)) or the factorized form f(A|X) f(Z|A,X).
struct JointExposureModel {
  ExposureForm form = ExposureForm::factorized;
  int num_z = 2;
  int z_reference = 0;

  // joint form
  CompiledDesign joint_design;
  Matrix joint_coefs;  // (2|Z|-1) x d

  // factorized form
  CompiledDesign a_design;
  Vector a_coefs;
  CompiledDesign z_design;  // columns [1, A, terms...]
  Matrix z_coefs;           // (|Z|-1) x (d_z + 1)

  /// Joint-cell category index with the reference cell (a=0, z=z0) first.
  int cell_category(int a, int z) const {
    int idx = 0;
    for (int aa = 0; aa < 2; ++aa)
      for (int zz = 0; zz < num_z; ++zz) {
        if (aa == 0 && zz == z_reference) continue;
        ++idx;
        if (aa == a && zz == z) return idx;
      }
    return 0;  // reference cell
  }

  ExposureCells cells_at(const Dataset& data, int i) const {
    ExposureCells out;
    out.cells.resize(2, num_z);
    if (form == ExposureForm::joint) {
      const Vector x = joint_design.row(data, i);
      Vector eta(2 * num_z);  // by category index
      eta(0) = 0.0;
      int idx = 0;
      for (int a = 0; a < 2; ++a)
        for (int z = 0; z < num_z; ++z) {
          if (a == 0 && z == z_reference) continue;
          ++idx;
          eta(idx) = joint_coefs.row(idx - 1).dot(x);
        }
      const double shift = eta.maxCoeff();
      double denom = 0.0;
      for (int c = 0; c < 2 * num_z; ++c) denom += std::exp(eta(c) - shift);
      for (int a = 0; a < 2; ++a)
        for (int z = 0; z < num_z; ++z)
          out.cells(a, z) =
              std::exp(eta(cell_category(a, z)) - shift) / denom;
    } else {
      const double pa1 = expit(a_coefs.dot(a_design.row(data, i)));
      for (int a = 0; a < 2; ++a) {
        // the fitted Z design is [1, a, terms(a)]
        Vector full(z_design.cols() + 1);
        const Vector zrow = z_design.row_at(data, i, a);
        full(0) = 1.0;
        full(1) = static_cast<double>(a);
        for (int j = 1; j < z_design.cols(); ++j) full(1 + j) = zrow(j);
        Vector eta(num_z);
        eta.setZero();
        int idx = 0;
        for (int z = 0; z < num_z; ++z) {
          if (z == z_reference) continue;
          eta(z) = z_coefs.row(idx++).dot(full);
        }
        const double shift = eta.maxCoeff();
        double denom = 0.0;
        for (int z = 0; z < num_z; ++z) denom += std::exp(eta(z) - shift);
        const double pa = (a == 1) ? pa1 : 1.0 - pa1;
        for (int z = 0; z < num_z; ++z)
          out.cells(a, z) = pa * std::exp(eta(z) - shift) / denom;
      }
    }
    return out;
  }
};

/// Maximum likelihood fit of f(A,Z|X). Requires every (a,z) cell observed.
inline JointExposureModel fit_joint_exposure(
    const Dataset& data, const ModelSpec& spec,
    const NewtonOptions& opts = NewtonOptions{}) {
  const int nz = data.z_coding.size();
  Matrix counts = Matrix::Zero(2, nz);
  for (int i = 0; i < data.n(); ++i) counts(data.a[i], data.z[i]) += 1.0;
  for (int a = 0; a < 2; ++a)
    for (int z = 0; z < nz; ++z)
      require_numeric(counts(a, z) > 0.0, "empty cell (" + std::to_string(a) +
                                              "," + std::to_string(z) + ")");

  JointExposureModel model;
  model.form = spec.exposure_form;
  model.num_z = nz;
  model.z_reference = data.z_coding.reference;
  if (spec.exposure_form == ExposureForm::joint) {
    model.joint_design = CompiledDesign(data, spec.exposure_terms, false);
    const Matrix design = model.joint_design.matrix(data);
    std::vector<int> cat(data.n());
    for (int i = 0; i < data.n(); ++i)
      cat[i] = model.cell_category(data.a[i], data.z[i]);
    model.joint_coefs = detail::fit_multinomial_logit(
        design, cat, 2 * nz, opts, model.joint_design.labels(),
        "joint exposure model");
  } else {
    model.a_design = CompiledDesign(data, spec.exposure_a_terms, false);
    Vector abin(data.n());
    for (int i = 0; i < data.n(); ++i) abin(i) = data.a[i];
    model.a_coefs =
        detail::fit_logistic(model.a_design.matrix(data), abin, opts,
                             model.a_design.labels(), "treatment model");

    model.z_design = CompiledDesign(data, spec.exposure_z_terms, true);
    Matrix zdm(data.n(), model.z_design.cols() + 1);
    for (int i = 0; i < data.n(); ++i) {
      const Vector row = model.z_design.row(data, i);
      zdm(i, 0) = 1.0;
      zdm(i, 1) = data.a[i];
      for (int j = 1; j < model.z_design.cols(); ++j) zdm(i, 1 + j) = row(j);
    }
    std::vector<int> cat(data.n());
    for (int i = 0; i < data.n(); ++i) {
      const int c = data.z_coding.contrast_index(data.z[i]);
      cat[i] = c + 1;  // 0 = reference
    }
    std::vector<std::string> labels = {"(intercept)", data.treatment_name};
    for (size_t j = 1; j < model.z_design.labels().size(); ++j)
      labels.push_back(model.z_design.labels()[j]);
    model.z_coefs = detail::fit_multinomial_logit(
        zdm, cat, nz, opts, labels, "NCE model");
  }
  return model;
}

/// Table {f(a,z|x), f(a|z,x), f(z|a,x), f(a|x)} for all (a,z) at one x.
inline ExposureCells exposure_densities(const JointExposureModel& model,
                                        const Dataset& data, int i) {
  ExposureCells c = model.cells_at(data, i);
  c.check_floor();
  return c;
}

// ---------------------------------------------------------------------------
// Baseline outcome model E[Y | Z=z0, A, X]
// ---------------------------------------------------------------------------

struct BaselineOutcomeModel {
  OutcomeLink link = OutcomeLink::logistic;
  CompiledDesign design;  // terms over covariates and the treatment
  Vector coefs;

  double predict(const Dataset& data, int i, int a) const {
    const double eta = coefs.dot(design.row_at(data, i, a));
    return link == OutcomeLink::logistic ? expit(eta) : eta;
  }
};

/// Restricted MLE on the Z=z0 subsample.
inline BaselineOutcomeModel fit_baseline_outcome(
    const Dataset& data, const ModelSpec& spec,
    const NewtonOptions& opts = NewtonOptions{}) {
  std::vector<int> rows;
  bool arm0 = false, arm1 = false;
  for (int i = 0; i < data.n(); ++i)
    if (data.z[i] == data.z_coding.reference) {
      rows.push_back(i);
      (data.a[i] ? arm1 : arm0) = true;
    }
  require_numeric(!rows.empty(), "empty Z=z0 subsample");
  require_numeric(arm0 && arm1,
                  "Z=z0 subsample lacks one treatment arm");

  BaselineOutcomeModel model;
  model.link = spec.y_link;
  if (model.link == OutcomeLink::automatic)
    model.link =
        data.y_is_binary() ? OutcomeLink::logistic : OutcomeLink::identity;
  model.design = CompiledDesign(data, spec.y_terms, true);

  Matrix design(rows.size(), model.design.cols());
  Vector y(rows.size());
  for (size_t r = 0; r < rows.size(); ++r) {
    design.row(r) = model.design.row(data, rows[r]).transpose();
    y(r) = data.y(rows[r]);
  }
  if (model.link == OutcomeLink::logistic)
    model.coefs = detail::fit_logistic(design, y, opts,
                                       model.design.labels(),
                                       "baseline outcome model");
  else
    model.coefs = detail::fit_ols(design, y, "baseline outcome model");
  return model;
}

// ---------------------------------------------------------------------------
// Baseline NCO model E[W | A=0, Z=z0, X]
// ---------------------------------------------------------------------------

struct BaselineNcoModel {
  int num_w = 2;
  int w_reference = 0;
  CompiledDesign design;
  Matrix coefs;  // (|W|-1) x d, multinomial logit (logistic when |W|=2)

  /// Category probabilities in level order.
  Vector predict(const Dataset& data, int i) const {
    const Vector x = design.row(data, i);
    Vector eta = Vector::Zero(num_w);
    int idx = 0;
    for (int w = 0; w < num_w; ++w) {
      if (w == w_reference) continue;
      eta(w) = coefs.row(idx++).dot(x);
    }
    const double shift = eta.maxCoeff();
    double denom = 0.0;
    for (int w = 0; w < num_w; ++w) denom += std::exp(eta(w) - shift);
    Vector p(num_w);
    for (int w = 0; w < num_w; ++w)
      p(w) = std::exp(eta(w) - shift) / denom;
    return p;
  }

  /// Non-reference level probabilities in contrast order (the Gamma_W mean).
  Vector predict_contrasts(const Dataset& data, int i) const {
    const Vector p = predict(data, i);
    Vector out(num_w - 1);
    int idx = 0;
    for (int w = 0; w < num_w; ++w)
      if (w != w_reference) out(idx++) = p(w);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Stacked likelihood scores
// ---------------------------------------------------------------------------

/// Per-observation stacked score of the three likelihood blocks
/// (U_alpha, U_betaY, U_betaW0). The g-estimation blocks are supplied by
/// their own estimating functions.
inline Vector score_contributions(const JointExposureModel& exposure,
                                  const BaselineOutcomeModel& outcome,
                                  const BaselineNcoModel& nco,
                                  const Dataset& data, int i) {
  std::vector<double> out;
  const ExposureCells cells = exposure.cells_at(data, i);
  if (exposure.form == ExposureForm::joint) {
    const Vector x = exposure.joint_design.row(data, i);
    const int cat = exposure.cell_category(data.a[i], data.z[i]);
    int idx = 0;
    for (int a = 0; a < 2; ++a)
      for (int z = 0; z < exposure.num_z; ++z) {
        if (a == 0 && z == exposure.z_reference) continue;
        ++idx;
        const double resid = (cat == idx ? 1.0 : 0.0) - cells.f_az(a, z);
        for (int j = 0; j < x.size(); ++j) out.push_back(resid * x(j));
      }
  } else {
    const Vector xa = exposure.a_design.row(data, i);
    const double resid_a = data.a[i] - cells.f_a(1);
    for (int j = 0; j < xa.size(); ++j) out.push_back(resid_a * xa(j));
    const Vector zrow = exposure.z_design.row_at(data, i, data.a[i]);
    Vector full(zrow.size() + 1);
    full(0) = 1.0;
    full(1) = data.a[i];
    for (int j = 1; j < zrow.size(); ++j) full(1 + j) = zrow(j);
    for (int z = 0; z < exposure.num_z; ++z) {
      if (z == exposure.z_reference) continue;
      const double resid =
          (data.z[i] == z ? 1.0 : 0.0) - cells.f_z_given_a(z, data.a[i]);
      for (int j = 0; j < full.size(); ++j) out.push_back(resid * full(j));
    }
  }
  {
    const double indicator =
        data.z[i] == data.z_coding.reference ? 1.0 : 0.0;
    const Vector xy = outcome.design.row(data, i);
    const double resid =
        indicator * (data.y(i) - outcome.predict(data, i, data.a[i]));
    for (int j = 0; j < xy.size(); ++j) out.push_back(resid * xy(j));
  }
  {
    const double indicator =
        (data.a[i] == 0 && data.z[i] == data.z_coding.reference) ? 1.0 : 0.0;
    const Vector xw = nco.design.row(data, i);
    const Vector p = nco.predict_contrasts(data, i);
    int idx = 0;
    for (int w = 0; w < nco.num_w; ++w) {
      if (w == nco.w_reference) continue;
      const double gamma =
          data.w_coding.contrast_index(data.w[i]) == idx ? 1.0 : 0.0;
      const double resid = indicator * (gamma - p(idx));
      for (int j = 0; j < xw.size(); ++j) out.push_back(resid * xw(j));
      ++idx;
    }
  }
  return Eigen::Map<Vector>(out.data(), out.size());
}

/// Restricted MLE on the (A=0, Z=z0) subsample.
inline BaselineNcoModel fit_baseline_nco(
    const Dataset& data, const ModelSpec& spec,
    const NewtonOptions& opts = NewtonOptions{}) {
  std::vector<int> rows;
  for (int i = 0; i < data.n(); ++i)
    if (data.a[i] == 0 && data.z[i] == data.z_coding.reference)
      rows.push_back(i);
  require_numeric(!rows.empty(), "empty (A=0, Z=z0) subsample");

  BaselineNcoModel model;
  model.num_w = data.w_coding.size();
  model.w_reference = data.w_coding.reference;
  model.design = CompiledDesign(data, spec.w0_terms, false);

  Matrix design(rows.size(), model.design.cols());
  std::vector<int> cat(rows.size());
  for (size_t r = 0; r < rows.size(); ++r) {
    design.row(r) = model.design.row(data, rows[r]).transpose();
    cat[r] = data.w_coding.contrast_index(data.w[rows[r]]) + 1;
  }
  model.coefs = detail::fit_multinomial_logit(design, cat, model.num_w, opts,
                                              model.design.labels(),
                                              "baseline NCO model");
  return model;
}

}  // namespace negctrl
