#pragma once

#include <algorithm>
#include <atomic>
#include <string>
#include <thread>
#include <vector>

#include "negctrl/common.hpp"
#include "negctrl/data.hpp"
#include "negctrl/estimators.hpp"
#include "negctrl/inference.hpp"
#include "negctrl/rng.hpp"

namespace negctrl {

// ---------------------------------------------------------------------------
// Data-generating process
// ---------------------------------------------------------------------------

/// Binary-everything generating process over X1..X8 ~ U[0,1] with the
/// X7*X8 interaction entering every linear predictor. The latent U drives
/// both W and Y, so the A-W association identifies the confounding bias.
struct DgpSpec {
  int n = 2000;
  uint64_t seed = 1;
  // slopes over (X1..X8, X7*X8)
  Vector exposure_slopes = default_exposure_slopes();
  Vector baseline_slopes = default_baseline_slopes();
  double a_intercept = -0.01;
  double z_intercept = -0.01;
  double z_a_coef = -0.2;
  double u_z = 0.4;    // E[U|Z,A,X] = u_z Z + u_az A Z
  double u_az = 0.4;
  double w_shift = 0.5;        // E[W|U=1,X] - E[W|U=0,X]
  double y_interaction = 0.25; // E[Y|A,U,X] = baseline + y_interaction A U
  double baseline_intercept = -1.0;

  static Vector default_exposure_slopes() {
    Vector v = Vector::Constant(9, -0.01);
    v(8) = 0.20;
    return v;
  }
  static Vector default_baseline_slopes() {
    return Vector::Constant(9, -0.1);
  }
};

struct GeneratedData {
  Dataset data;
  std::vector<int> latent_u;  // oracle use only, never an estimator input
};

namespace detail {

inline double dgp_linpred(const Vector& slopes, const double* x) {
  double acc = 0.0;
  for (int j = 0; j < 8; ++j) acc += slopes(j) * x[j];
  acc += slopes(8) * x[6] * x[7];
  return acc;
}

}  // namespace detail

/// Sequential draws X -> A -> Z -> U -> W -> Y. Deterministic given
/// (spec.seed, stream); the latent U column is returned separately.
inline GeneratedData generate_dataset(const DgpSpec& spec,
                                      uint64_t stream = 0) {
  RngStream rng(spec.seed, stream);
  GeneratedData out;
  Dataset& d = out.data;
  const int n = spec.n;
  d.y.resize(n);
  d.a.resize(n);
  d.z.resize(n);
  d.w.resize(n);
  d.x.resize(n, 8);
  d.covariate_names = {"X1", "X2", "X3", "X4", "X5", "X6", "X7", "X8"};
  d.z_coding = CategoricalCoding{{"0", "1"}, 0};
  d.w_coding = CategoricalCoding{{"0", "1"}, 0};
  out.latent_u.resize(n);
  double x[8];
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < 8; ++j) x[j] = rng.uniform();
    const double lin_e = detail::dgp_linpred(spec.exposure_slopes, x);
    const double lin_b = detail::dgp_linpred(spec.baseline_slopes, x);
    const int a = rng.bernoulli(expit(spec.a_intercept + lin_e)) ? 1 : 0;
    const int z =
        rng.bernoulli(expit(spec.z_intercept + spec.z_a_coef * a + lin_e))
            ? 1
            : 0;
    const double pu = spec.u_z * z + spec.u_az * a * z;
    const int u = rng.bernoulli(pu) ? 1 : 0;
    const double pw = expit(spec.baseline_intercept + lin_b) +
                      spec.w_shift * u;
    const double py = expit(spec.baseline_intercept + lin_b) +
                      spec.y_interaction * a * u;
    require_numeric(pw > 0.0 && pw < 1.0 && py > 0.0 && py < 1.0 &&
                        pu >= 0.0 && pu <= 1.0,
                    "generated probability outside (0,1)");
    const int w = rng.bernoulli(pw) ? 1 : 0;
    d.a[i] = a;
    d.z[i] = z;
    d.w[i] = w;
    d.y(i) = rng.bernoulli(py) ? 1.0 : 0.0;
    for (int j = 0; j < 8; ++j) d.x(i, j) = x[j];
    out.latent_u[i] = u;
  }
  return out;
}

struct AteOracle {
  double delta = 0.0;
  double mc_se = 0.0;
};

/// Monte Carlo value of E[Y(1) - Y(0)] = y_interaction * E[U], integrating
/// (A, Z, U) out analytically so only X is simulated.
inline AteOracle true_ate_oracle(const DgpSpec& spec, long precision_n,
                                 uint64_t seed_stream = 999) {
  require(precision_n >= 1000000, "oracle precision_n must be at least 1e6");
  RngStream rng(spec.seed, seed_stream);
  double sum = 0.0, sum2 = 0.0;
  double x[8];
  for (long i = 0; i < precision_n; ++i) {
    for (int j = 0; j < 8; ++j) x[j] = rng.uniform();
    const double lin_e = detail::dgp_linpred(spec.exposure_slopes, x);
    const double pa1 = expit(spec.a_intercept + lin_e);
    double eu = 0.0;
    for (int a = 0; a < 2; ++a) {
      const double pz1 =
          expit(spec.z_intercept + spec.z_a_coef * a + lin_e);
      eu += (a ? pa1 : 1.0 - pa1) * (spec.u_z + spec.u_az * a) * pz1;
    }
    const double v = spec.y_interaction * eu;
    sum += v;
    sum2 += v * v;
  }
  AteOracle out;
  out.delta = sum / precision_n;
  const double var = sum2 / precision_n - out.delta * out.delta;
  out.mc_se = std::sqrt(std::max(var, 0.0) / precision_n);
  return out;
}

// ---------------------------------------------------------------------------
// Misspecification scenarios
// ---------------------------------------------------------------------------

enum class Scenario { all_correct, m1_only, m2_only, m3_only, all_wrong };

inline std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::all_correct: return "all_correct";
    case Scenario::m1_only: return "m1_only";
    case Scenario::m2_only: return "m2_only";
    case Scenario::m3_only: return "m3_only";
    case Scenario::all_wrong: return "all_wrong";
  }
  return "?";
}

inline Scenario scenario_from_string(const std::string& s) {
  if (s == "all_correct") return Scenario::all_correct;
  if (s == "m1_only") return Scenario::m1_only;
  if (s == "m2_only") return Scenario::m2_only;
  if (s == "m3_only") return Scenario::m3_only;
  if (s == "all_wrong") return Scenario::all_wrong;
  throw validation_error("unknown scenario '" + s + "'");
}

/// Working-model term lists per scenario. The faithful specification uses
/// the factorized exposure form matching the generating process; the edits
/// are: constant W contrasts (drop eta), constant R (drop the A slope of R),
/// and dropping X7*X8 from the Z model and, in the last scenario, from the
/// baseline outcome model as well.
inline ModelSpec scenario_model_specs(Scenario s) {
  const std::string full = "X1,X2,X3,X4,X5,X6,X7,X8,X7*X8";
  const std::string no_interaction = "X1,X2,X3,X4,X5,X6,X7,X8";
  ModelSpec spec;
  spec.exposure_form = ExposureForm::factorized;
  spec.exposure_a_terms = parse_term_list(full);
  spec.exposure_z_terms = parse_term_list(full);
  spec.y_terms = parse_term_list("A," + full);
  spec.y_link = OutcomeLink::logistic;
  spec.w0_terms = parse_term_list(full);
  // contrast blocks are intercept-only in the generating process
  spec.xi_terms = {};
  spec.delta_terms = {};
  spec.eta_terms = {};
  spec.has_eta = true;
  spec.r0_terms = {};
  spec.r1_terms = {};
  spec.has_r1 = true;
  switch (s) {
    case Scenario::all_correct:
      break;
    case Scenario::m1_only:  // E[W|A,Z,X] wrong: constant xi and delta
      spec.has_eta = false;
      break;
    case Scenario::m2_only:  // R wrong: constant R
      spec.has_r1 = false;
      break;
    case Scenario::m3_only:  // f(Z|A,X) wrong: drop X7*X8
      spec.exposure_z_terms = parse_term_list(no_interaction);
      break;
    case Scenario::all_wrong:  // f(Z|A,X) and E[Y|A,Z,X] wrong
      spec.exposure_z_terms = parse_term_list(no_interaction);
      spec.y_terms = parse_term_list("A," + no_interaction);
      break;
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Replication study
// ---------------------------------------------------------------------------

struct StudyOptions {
  Scenario scenario = Scenario::all_correct;
  int reps = 1000;
  int n = 2000;
  uint64_t base_seed = 1;
  std::vector<EstimatorKind> estimators = {
      EstimatorKind::delta1, EstimatorKind::delta2, EstimatorKind::delta3,
      EstimatorKind::mle, EstimatorKind::mr};
  int threads = 0;             // 0 = hardware concurrency
  double trim_total = 0.01;    // symmetric: trim_total/2 in each tail
  double max_failure_rate = 0.02;
  long oracle_precision = 2000000;
  EstimateOptions estimate;
};

struct ReplicationRecord {
  int replication = 0;
  std::string estimator;
  double delta = 0.0;
  double se = 0.0;
  bool covered = false;
  bool failed = false;
  std::string error;
};

struct EstimatorSummary {
  std::string estimator;
  int replications = 0;      // successful, before trimming
  int used = 0;              // after trimming
  double bias = 0.0;
  double variance = 0.0;
  double proportion_bias = 0.0;  // percent of the true ATE
  double mse = 0.0;
  double coverage = 0.0;     // untrimmed
  int failures = 0;
};

struct OperatingCharacteristics {
  Scenario scenario = Scenario::all_correct;
  int reps = 0;
  int n = 0;
  uint64_t base_seed = 0;
  double true_ate = 0.0;
  double true_ate_mc_se = 0.0;
  std::string rng_version;
  std::string trim_rule;
  std::vector<EstimatorSummary> summaries;
  std::vector<ReplicationRecord> raw;
};

/// Run one scenario: per replication, generate data with an independent
/// stream, fit the scenario's working models, evaluate each estimator with
/// its sandwich CI. Aggregation trims the estimate tails symmetrically for
/// bias/variance/MSE; coverage uses every successful replication.
inline OperatingCharacteristics run_study(const StudyOptions& options) {
  require(options.reps >= 1, "reps must be positive");
  OperatingCharacteristics oc;
  oc.scenario = options.scenario;
  oc.reps = options.reps;
  oc.n = options.n;
  oc.base_seed = options.base_seed;
  oc.rng_version = philox::version();
  oc.trim_rule = "symmetric " + std::to_string(options.trim_total / 2) +
                 " per tail on the estimate distribution";

  DgpSpec dgp;
  dgp.n = options.n;
  dgp.seed = options.base_seed;
  const AteOracle oracle = true_ate_oracle(dgp, options.oracle_precision);
  oc.true_ate = oracle.delta;
  oc.true_ate_mc_se = oracle.mc_se;

  const ModelSpec spec = scenario_model_specs(options.scenario);
  const int n_est = static_cast<int>(options.estimators.size());
  oc.raw.resize(static_cast<size_t>(options.reps) * n_est);

  PipelineParts parts;
  parts.mr = parts.delta1 = parts.delta2 = parts.delta3 = false;
  for (const auto kind : options.estimators) {
    if (kind == EstimatorKind::mr) parts.mr = true;
    if (kind == EstimatorKind::delta1) parts.delta1 = true;
    if (kind == EstimatorKind::delta2) parts.delta2 = true;
    if (kind == EstimatorKind::delta3 || kind == EstimatorKind::mle)
      parts.delta3 = true;
  }

  std::atomic<int> next(0);
  auto worker = [&]() {
    for (;;) {
      const int rep = next.fetch_add(1);
      if (rep >= options.reps) return;
      GeneratedData gen = generate_dataset(dgp, static_cast<uint64_t>(rep));
      bool pipeline_ok = true;
      FittedPipeline fp;
      std::string pipeline_error;
      try {
        fp = fit_pipeline(gen.data, spec, options.estimate, parts);
      } catch (const std::exception& e) {
        pipeline_ok = false;
        pipeline_error = e.what();
      }
      for (int e = 0; e < n_est; ++e) {
        ReplicationRecord& rec = oc.raw[static_cast<size_t>(rep) * n_est + e];
        rec.replication = rep;
        rec.estimator = to_string(options.estimators[e]);
        if (!pipeline_ok) {
          rec.failed = true;
          rec.error = pipeline_error;
          continue;
        }
        try {
          EstimateReport r = point_estimate(gen.data, fp,
                                            options.estimators[e],
                                            options.estimate);
          if (options.estimate.with_sandwich) {
            attach_inference(r, gen.data, fp, options.estimators[e],
                             options.estimate);
            rec.covered = r.ci_lo <= oc.true_ate && oc.true_ate <= r.ci_hi;
          }
          rec.delta = r.delta;
          rec.se = r.se;
        } catch (const std::exception& ex) {
          rec.failed = true;
          rec.error = ex.what();
        }
      }
    }
  };

  int threads = options.threads > 0
                    ? options.threads
                    : static_cast<int>(std::thread::hardware_concurrency());
  threads = std::max(1, std::min(threads, options.reps));
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  // aggregate in replication order (deterministic regardless of scheduling)
  for (int e = 0; e < n_est; ++e) {
    EstimatorSummary s;
    s.estimator = to_string(options.estimators[e]);
    std::vector<double> deltas;
    int covered = 0;
    for (int rep = 0; rep < options.reps; ++rep) {
      const auto& rec = oc.raw[static_cast<size_t>(rep) * n_est + e];
      if (rec.failed) {
        ++s.failures;
        continue;
      }
      deltas.push_back(rec.delta);
      if (rec.covered) ++covered;
    }
    s.replications = static_cast<int>(deltas.size());
    require_numeric(
        s.failures <= options.max_failure_rate * options.reps,
        "estimator " + s.estimator + " failed in " +
            std::to_string(s.failures) + " of " +
            std::to_string(options.reps) + " replications");
    s.coverage = s.replications ? static_cast<double>(covered) / s.replications
                                : 0.0;
    std::sort(deltas.begin(), deltas.end());
    const int trim =
        static_cast<int>(deltas.size() * options.trim_total / 2.0);
    std::vector<double> kept(deltas.begin() + trim, deltas.end() - trim);
    s.used = static_cast<int>(kept.size());
    double mean = 0.0;
    for (double v : kept) mean += v;
    mean /= s.used;
    double var = 0.0, mse = 0.0;
    for (double v : kept) {
      var += (v - mean) * (v - mean);
      mse += (v - oc.true_ate) * (v - oc.true_ate);
    }
    s.bias = mean - oc.true_ate;
    s.variance = var / s.used;
    s.mse = mse / s.used;
    s.proportion_bias = 100.0 * s.bias / oc.true_ate;
    oc.summaries.push_back(s);
  }
  return oc;
}

}  // namespace negctrl
