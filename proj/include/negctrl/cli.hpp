#pragma once

#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "negctrl/analysis.hpp"
#include "negctrl/report.hpp"
#include "negctrl/simulate.hpp"

namespace negctrl {

// exit codes: 0 success, 2 validation error, 3 numerical failure
inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitNumeric = 3;

// ---------------------------------------------------------------------------
// estimate
// ---------------------------------------------------------------------------

struct EstimateCommand {
  std::string data_path;
  CsvSchema schema;
  ModelSpec spec;
  std::vector<EstimatorKind> estimators = {
      EstimatorKind::delta1, EstimatorKind::delta2, EstimatorKind::delta3,
      EstimatorKind::mle, EstimatorKind::mr};
  std::string out_path;       // empty: stdout
  std::string format = "tsv"; // tsv | json
  EstimateOptions opts;
  int bootstrap = 0;          // >0: bootstrap SE with this many resamples
  uint64_t seed = 1;
  int gmm_levels = 0;         // >0: add a GMM row over coarsenings
  double rank_tol = 1e-8;
  std::string covariance_out; // optional Var(gamma_hat) JSON dump
};

inline nlohmann::json estimate_metadata(const EstimateCommand& cmd) {
  nlohmann::json meta;
  meta["version"] = kToolVersion;
  meta["data"] = cmd.data_path;
  meta["outcome"] = cmd.schema.outcome;
  meta["treatment"] = cmd.schema.treatment;
  meta["nce"] = cmd.schema.nce;
  meta["nco"] = cmd.schema.nco;
  nlohmann::json cov = nlohmann::json::array();
  for (const auto& c : cmd.schema.covariates) cov.push_back(c);
  meta["covariates"] = cov;
  if (cmd.schema.z_reference) meta["z_reference"] = *cmd.schema.z_reference;
  if (cmd.schema.w_reference) meta["w_reference"] = *cmd.schema.w_reference;
  meta["formulas"] = spec_to_json(cmd.spec);
  meta["density_floor"] = cmd.opts.density_floor;
  meta["xi_floor"] = cmd.opts.xi_floor;
  meta["rank_tol"] = cmd.rank_tol;
  meta["confidence_level"] = cmd.opts.confidence_level;
  meta["seed"] = cmd.seed;
  meta["bootstrap_resamples"] = cmd.bootstrap;
  return meta;
}

inline int cmd_estimate(const EstimateCommand& cmd, std::ostream& out,
                        std::ostream& err) {
  const Dataset data = load_dataset(cmd.data_path, cmd.schema);
  data.validate();
  cmd.spec.validate(data);

  PipelineParts parts;
  parts.mr = parts.delta1 = parts.delta2 = parts.delta3 = false;
  bool want_gmm = false;
  for (const auto kind : cmd.estimators) {
    switch (kind) {
      case EstimatorKind::mr: parts.mr = true; break;
      case EstimatorKind::gmm: want_gmm = true; parts.mr = true; break;
      case EstimatorKind::delta1: parts.delta1 = true; break;
      case EstimatorKind::delta2: parts.delta2 = true; break;
      case EstimatorKind::delta3:
      case EstimatorKind::mle: parts.delta3 = true; break;
    }
  }
  const FittedPipeline fp = fit_pipeline(data, cmd.spec, cmd.opts, parts);

  std::vector<EstimateReport> reports;
  for (const auto kind : cmd.estimators) {
    if (kind == EstimatorKind::gmm) continue;
    EstimateReport rep = point_estimate(data, fp, kind, cmd.opts);
    if (cmd.bootstrap > 0) {
      PipelineParts one;
      one.mr = one.delta1 = one.delta2 = one.delta3 = false;
      switch (kind) {
        case EstimatorKind::mr: one.mr = true; break;
        case EstimatorKind::delta1: one.delta1 = true; break;
        case EstimatorKind::delta2: one.delta2 = true; break;
        default: one.delta3 = true; break;
      }
      auto fit_delta = [&](const Dataset& d) {
        const FittedPipeline bfp = fit_pipeline(d, cmd.spec, cmd.opts, one);
        return point_estimate(d, bfp, kind, cmd.opts).delta;
      };
      const auto boot = bootstrap_se(data, fit_delta, cmd.bootstrap, cmd.seed);
      rep.se = boot.se;
      const auto ci = wald_interval(rep.delta, rep.se,
                                    cmd.opts.confidence_level);
      rep.ci_lo = ci.lo;
      rep.ci_hi = ci.hi;
      rep.p_value = wald_test(rep.delta, rep.se);
    } else if (cmd.opts.with_sandwich) {
      attach_inference(rep, data, fp, kind, cmd.opts);
    }
    reports.push_back(rep);
  }
  if (want_gmm) {
    const int target = cmd.gmm_levels > 0
                           ? cmd.gmm_levels
                           : std::min(data.z_coding.size(),
                                      data.w_coding.size());
    const auto pairs =
        enumerate_coarsenings(data.z_coding, data.w_coding, target);
    GmmOptions gopts;
    gopts.estimate = cmd.opts;
    const auto gmm = gmm_combine(data, cmd.spec, pairs, gopts);
    reports.push_back(gmm.report);
    if (gmm.weight_ridged)
      err << "warning: GMM weight matrix was ridge-regularized\n";
  }

  std::string payload;
  if (cmd.format == "json") {
    nlohmann::json j;
    j["schema"] = kReportSchema;
    j["metadata"] = estimate_metadata(cmd);
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : reports) rows.push_back(report_to_json(r));
    j["estimates"] = rows;
    j["theta"] = theta_to_json(fp);
    payload = j.dump(2) + "\n";
  } else if (cmd.format == "tsv") {
    std::ostringstream os;
    os << reports_tsv_header() << "\n";
    for (const auto& r : reports) os << report_tsv_row(r) << "\n";
    payload = os.str();
  } else {
    throw validation_error("unknown format '" + cmd.format + "'");
  }
  if (cmd.out_path.empty())
    out << payload;
  else
    write_text_file(cmd.out_path, payload);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

struct SimulateCommand {
  StudyOptions study;
  std::string out_prefix;     // empty: summary to stdout
  std::string format = "tsv"; // tsv | json
};

inline int cmd_simulate(const SimulateCommand& cmd, std::ostream& out,
                        std::ostream&) {
  require(cmd.study.reps >= 1, "reps must be at least 1");
  const OperatingCharacteristics oc = run_study(cmd.study);
  nlohmann::json meta;
  meta["version"] = kToolVersion;
  meta["scenario"] = to_string(oc.scenario);
  meta["reps"] = oc.reps;
  meta["n"] = oc.n;
  meta["seed"] = oc.base_seed;
  meta["rng"] = oc.rng_version;
  meta["trim_rule"] = oc.trim_rule;
  meta["true_ate"] = oc.true_ate;
  meta["true_ate_mc_se"] = oc.true_ate_mc_se;

  if (cmd.out_prefix.empty()) {
    out << study_summary_tsv(oc);
    return kExitOk;
  }
  if (cmd.format == "json") {
    nlohmann::json j = study_to_json(oc);
    j["metadata"] = meta;
    write_text_file(cmd.out_prefix + ".json", j.dump(2) + "\n");
  } else {
    write_text_file(cmd.out_prefix + ".summary.tsv", study_summary_tsv(oc));
    write_text_file(cmd.out_prefix + ".meta.json", meta.dump(2) + "\n");
  }
  write_text_file(cmd.out_prefix + ".raw.tsv", study_raw_tsv(oc));
  return kExitOk;
}

// ---------------------------------------------------------------------------
// identify
// ---------------------------------------------------------------------------

struct IdentifyCommand {
  std::string law_path;   // JSON fixture, or
  std::string data_path;  // dataset with discrete covariates
  CsvSchema schema;
  double rank_tol = 1e-8;
  std::string out_path;
};

inline int cmd_identify(const IdentifyCommand& cmd, std::ostream& out,
                        std::ostream&) {
  require(!cmd.law_path.empty() || !cmd.data_path.empty(),
          "identify needs --law or --data");
  nlohmann::json j;
  j["schema"] = kReportSchema;
  j["version"] = kToolVersion;
  j["rank_tol"] = cmd.rank_tol;

  ObservedLawMatrices m;
  if (!cmd.law_path.empty()) {
    const DiscreteLaw law = load_law(cmd.law_path);
    m = observed_matrices(law);
    j["source"] = cmd.law_path;
    j["latent_ate"] = law.latent_ate();
  } else {
    const Dataset data = load_dataset(cmd.data_path, cmd.schema);
    m = empirical_observed_matrices(data);
    j["source"] = cmd.data_path;
  }

  nlohmann::json strata = nlohmann::json::array();
  for (int x = 0; x < m.num_x; ++x)
    for (int a = 0; a < 2; ++a) {
      nlohmann::json s;
      s["x"] = x;
      s["a"] = a;
      s["rank"] = numerical_rank(m.w_given_z(a, x), cmd.rank_tol);
      const auto bridge = solve_bridge(m, a, x, cmd.rank_tol);
      s["bridge_solver"] = bridge.solver == BridgeSolver::exact_inverse
                               ? "exact_inverse"
                               : "pseudoinverse";
      s["bridge_residual"] = bridge.residual;
      strata.push_back(s);
    }
  j["strata"] = strata;
  const int inferred = infer_latent_cardinality(m, cmd.rank_tol);
  j["inferred_latent_levels"] = inferred;
  if (inferred <= 1)
    j["warning"] =
        "rank 1: the negative controls carry no confounder information";

  const auto ate = ate_by_identification(m, cmd.rank_tol);
  j["ate_identified"] = ate.delta;
  j["ey1"] = ate.ey1;
  j["ey0"] = ate.ey0;
  if (m.num_z == m.num_w && inferred == m.num_z) {
    // the reparameterized functional needs invertible xi^W_Z, which holds
    // only when the latent cardinality matches the level count
    const auto rep = ate_by_reparameterization(m);
    j["ate_reparameterized"] = rep.delta;
    j["delta_confounded"] = rep.confounded;
    j["delta_bias"] = rep.bias;
  } else if (m.num_z == m.num_w) {
    j["ate_reparameterized"] =
        "not applicable: xi^W_Z singular at rank " + std::to_string(inferred) +
        " < " + std::to_string(m.num_z) + " levels; coarsen to " +
        std::to_string(inferred) + " levels";
  }
  if (j.contains("latent_ate"))
    j["oracle_gap"] = ate.delta - j["latent_ate"].get<double>();

  const std::string payload = j.dump(2) + "\n";
  if (cmd.out_path.empty())
    out << payload;
  else
    write_text_file(cmd.out_path, payload);
  return kExitOk;
}

}  // namespace negctrl
