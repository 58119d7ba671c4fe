#pragma once

#include <string>
#include <vector>

#include "negctrl/estimators.hpp"
#include "negctrl/identify.hpp"
#include "negctrl/inference.hpp"

namespace negctrl {

// ---------------------------------------------------------------------------
// Corrected influence values
// ---------------------------------------------------------------------------

/// Per-observation influence function of the Delta estimate with the
/// nuisance-estimation correction applied: psi_Delta - c' U_theta where
/// c solves the bread system. The sample variance of these values over n
/// equals the sandwich variance of Delta.
inline Vector corrected_influence(EstimatorStack& stack,
                                  const SandwichOptions& opts =
                                      SandwichOptions{}) {
  const int kdim = stack.dim();
  const int n = stack.n();
  const Matrix psi = stack.psi_matrix();
  const Matrix a_n = detail::bread_matrix(stack, opts.fd_step);
  const int kt = kdim - 1;  // theta dimension
  if (kt == 0) return psi.col(kdim - 1);
  const Matrix a_tt = a_n.topLeftCorner(kt, kt);
  const Vector a_dt = a_n.row(kdim - 1).head(kt);
  const Vector c = a_tt.transpose().partialPivLu().solve(a_dt);
  Vector out(n);
  for (int i = 0; i < n; ++i)
    out(i) = psi(i, kdim - 1) - c.dot(psi.row(i).head(kt));
  return out;
}

// ---------------------------------------------------------------------------
// Full analysis of one dataset
// ---------------------------------------------------------------------------

inline EstimateReport run_single(const Dataset& data, const FittedPipeline& fp,
                                 EstimatorKind kind,
                                 const EstimateOptions& opts) {
  EstimateReport rep = point_estimate(data, fp, kind, opts);
  if (opts.with_sandwich) attach_inference(rep, data, fp, kind, opts);
  return rep;
}

/// Fit the pipeline once and evaluate the requested estimators against it.
inline std::vector<EstimateReport> run_estimators(
    const Dataset& data, const ModelSpec& spec,
    const std::vector<EstimatorKind>& kinds,
    const EstimateOptions& opts = EstimateOptions{}) {
  PipelineParts parts;
  parts.mr = parts.delta1 = parts.delta2 = parts.delta3 = false;
  for (const auto kind : kinds) {
    switch (kind) {
      case EstimatorKind::mr:
      case EstimatorKind::gmm: parts.mr = true; break;
      case EstimatorKind::delta1: parts.delta1 = true; break;
      case EstimatorKind::delta2: parts.delta2 = true; break;
      case EstimatorKind::delta3:
      case EstimatorKind::mle: parts.delta3 = true; break;
    }
  }
  const FittedPipeline fp = fit_pipeline(data, spec, opts, parts);
  std::vector<EstimateReport> out;
  for (const auto kind : kinds) {
    if (kind == EstimatorKind::gmm) continue;  // handled by gmm_combine
    out.push_back(run_single(data, fp, kind, opts));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Coarsening + GMM combination
// ---------------------------------------------------------------------------

struct GmmOptions {
  EstimatorKind kind = EstimatorKind::mr;
  double ridge = 1e-10;
  EstimateOptions estimate;
};

struct GmmReport {
  EstimateReport report;
  int num_coarsenings = 0;
  bool weight_ridged = false;
  std::vector<double> per_coarsening_delta;
};

/// Two-step GMM across coarsened analyses: first-step equal weights, weight
/// matrix from the first-step residual outer products (inverted, ridged if
/// singular), then the weighted recombination. Standard errors combine the
/// per-coarsening corrected influence values with the final weights.
inline GmmReport gmm_combine(const Dataset& data, const ModelSpec& spec,
                             const std::vector<CoarseningPair>& coarsenings,
                             const GmmOptions& options = GmmOptions{}) {
  require(!coarsenings.empty(), "gmm_combine needs at least one coarsening");
  const int m = static_cast<int>(coarsenings.size());
  const int n = data.n();

  PipelineParts parts;
  parts.mr = options.kind == EstimatorKind::mr;
  parts.delta1 = options.kind == EstimatorKind::delta1;
  parts.delta2 = options.kind == EstimatorKind::delta2;
  parts.delta3 = options.kind == EstimatorKind::delta3 ||
                 options.kind == EstimatorKind::mle;

  Vector deltas(m);
  Matrix contribs(n, m);  // per-observation plug-in contributions
  Matrix influence(n, m); // corrected influence values
  for (int j = 0; j < m; ++j) {
    const Dataset cd = apply_coarsening(data, coarsenings[j]);
    const FittedPipeline fp =
        fit_pipeline(cd, spec, options.estimate, parts);
    EstimatorStack stack(cd, fp, options.kind, options.estimate);
    deltas(j) = stack.delta_hat();
    const Matrix psi = stack.psi_matrix();
    contribs.col(j) = psi.col(stack.dim() - 1).array() + deltas(j);
    influence.col(j) = corrected_influence(stack);
  }

  GmmReport out;
  out.num_coarsenings = m;
  for (int j = 0; j < m; ++j) out.per_coarsening_delta.push_back(deltas(j));

  // first step: equal weights
  const double delta1 = deltas.mean();
  // weight matrix from first-step residuals
  Matrix s = Matrix::Zero(m, m);
  for (int i = 0; i < n; ++i) {
    const Vector g = contribs.row(i).transpose().array() - delta1;
    s += g * g.transpose();
  }
  s /= n;
  if (condition_number(s) > 1e12) {
    s += options.ridge * Matrix::Identity(m, m);
    out.weight_ridged = true;
  }
  const Matrix w = s.partialPivLu().solve(Matrix::Identity(m, m));
  const Vector ones = Vector::Ones(m);
  const double denom = ones.dot(w * ones);
  require_numeric(std::abs(denom) > 0.0, "degenerate GMM weight matrix");
  const double delta2 = ones.dot(w * deltas) / denom;

  // final weights lambda = W 1 / (1' W 1); variance from corrected IFs
  const Vector lambda = (w * ones) / denom;
  Matrix b_corr = Matrix::Zero(m, m);
  for (int i = 0; i < n; ++i) {
    const Vector v = influence.row(i).transpose();
    b_corr += v * v.transpose();
  }
  b_corr /= n;
  const double var = lambda.dot(b_corr * lambda) / n;

  EstimateReport& rep = out.report;
  rep.estimator = "gmm";
  rep.n = n;
  rep.delta = delta2;
  rep.has_decomposition = false;
  rep.confidence_level = options.estimate.confidence_level;
  rep.se = std::sqrt(std::max(var, 0.0));
  if (rep.se > 0.0) {
    const auto ci = wald_interval(rep.delta, rep.se,
                                  options.estimate.confidence_level);
    rep.ci_lo = ci.lo;
    rep.ci_hi = ci.hi;
    rep.p_value = wald_test(rep.delta, rep.se);
  }
  rep.provenance = "two-step GMM over " + std::to_string(m) +
                   " coarsenings of the " + to_string(options.kind) +
                   " estimating equation";
  return out;
}

}  // namespace negctrl
