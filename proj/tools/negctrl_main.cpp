// Command-line front end: estimate (dataset analysis), simulate (operating
// characteristics study), identify (discrete-law diagnostics).

#include <CLI11.hpp>
#include <iostream>
#include <string>
#include <vector>

#include "negctrl/cli.hpp"

namespace {

std::vector<negctrl::EstimatorKind> parse_estimators(const std::string& s) {
  std::vector<negctrl::EstimatorKind> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(negctrl::estimator_from_string(item));
  negctrl::require(!out.empty(), "empty estimator list");
  return out;
}

/// "none" disables a block; "" is intercept-only.
void set_block_terms(const std::string& text, std::vector<negctrl::Term>& terms,
                     bool& flag) {
  if (text == "none") {
    flag = false;
    terms.clear();
  } else {
    flag = true;
    terms = negctrl::parse_term_list(text);
  }
}

}  // namespace

int main(int argc, char** argv) {
  using namespace negctrl;
  CLI::App app{"Double negative control adjustment for categorical "
               "unmeasured confounding"};
  app.require_subcommand(1);

  // ---- estimate -----------------------------------------------------------
  auto* est = app.add_subcommand(
      "estimate", "ATE estimation on a CSV dataset with negative controls");
  EstimateCommand ecmd;
  std::string covariates, estimators = "delta1,delta2,delta3,mle,mr";
  std::string z_ref, w_ref;
  std::string f_exposure, f_exposure_a, f_exposure_z, f_y, f_w0;
  std::string f_xi, f_delta, f_eta = "", f_r0, f_r1 = "";
  std::string exposure_form = "joint";
  est->add_option("--data", ecmd.data_path, "CSV file")->required();
  est->add_option("--outcome", ecmd.schema.outcome, "outcome column")
      ->required();
  est->add_option("--treatment", ecmd.schema.treatment, "treatment column")
      ->required();
  est->add_option("--nce", ecmd.schema.nce,
                  "negative control exposure column")
      ->required();
  est->add_option("--nco", ecmd.schema.nco, "negative control outcome column")
      ->required();
  est->add_option("--covariates", covariates,
                  "comma-separated covariate columns");
  est->add_option("--z-ref", z_ref, "reference level for the NCE");
  est->add_option("--w-ref", w_ref, "reference level for the NCO");
  est->add_option("--exposure-form", exposure_form,
                  "joint | factorized exposure model");
  est->add_option("--formula-exposure", f_exposure,
                  "terms for the joint f(A,Z|X) model");
  est->add_option("--formula-exposure-a", f_exposure_a,
                  "terms for f(A|X) (factorized form)");
  est->add_option("--formula-exposure-z", f_exposure_z,
                  "terms for f(Z|A,X) (factorized form; A main effect "
                  "automatic)");
  est->add_option("--formula-y", f_y,
                  "terms for E[Y|Z=z0,A,X]; must include the treatment");
  est->add_option("--formula-w0", f_w0, "terms for E[W|A=0,Z=z0,X]");
  est->add_option("--formula-xi", f_xi, "terms for xi^W_Z(A=0,X)");
  est->add_option("--formula-delta", f_delta, "terms for delta^W_A(z0,X)");
  est->add_option("--formula-eta", f_eta,
                  "terms for the A*Z interaction block, or 'none'");
  est->add_option("--formula-r0", f_r0, "terms for the A=0 part of R(A,X)");
  est->add_option("--formula-r1", f_r1,
                  "terms for the treatment slope of R, or 'none'");
  est->add_option("--estimators", estimators,
                  "comma list from delta1,delta2,delta3,mle,mr,gmm");
  est->add_option("--out", ecmd.out_path, "output file (default stdout)");
  est->add_option("--format", ecmd.format, "tsv | json");
  est->add_option("--level", ecmd.opts.confidence_level, "confidence level");
  est->add_option("--density-floor", ecmd.opts.density_floor,
                  "hard floor on inverse-probability weights");
  est->add_option("--truncate-weights", ecmd.opts.truncate_weights_quantile,
                  "winsorize inverse weights at this sample quantile "
                  "(1 = off, the default)");
  est->add_option("--xi-floor", ecmd.opts.xi_floor,
                  "invertibility floor for xi^W_Z");
  est->add_option("--rank-tol", ecmd.rank_tol, "rank tolerance");
  est->add_option("--bootstrap", ecmd.bootstrap,
                  "bootstrap resamples for the SE (0 = sandwich)");
  est->add_option("--gmm-levels", ecmd.gmm_levels,
                  "coarsening target level count for the gmm estimator");
  est->add_option("--seed", ecmd.seed, "seed for the bootstrap");

  // ---- simulate -----------------------------------------------------------
  auto* sim = app.add_subcommand(
      "simulate", "replication study of estimator operating characteristics");
  SimulateCommand scmd;
  std::string scenario = "all_correct", sim_estimators =
      "delta1,delta2,delta3,mle,mr";
  sim->add_option("--scenario", scenario,
                  "all_correct | m1_only | m2_only | m3_only | all_wrong");
  sim->add_option("--reps", scmd.study.reps, "number of replications")
      ->check(CLI::PositiveNumber);
  sim->add_option("--n", scmd.study.n, "sample size per replication");
  sim->add_option("--seed", scmd.study.base_seed, "base seed");
  sim->add_option("--estimators", sim_estimators, "estimator list");
  sim->add_option("--threads", scmd.study.threads, "worker threads");
  sim->add_option("--trim", scmd.study.trim_total,
                  "total trimming share for the aggregation");
  sim->add_option("--out", scmd.out_prefix,
                  "output path prefix (default: summary to stdout)");
  sim->add_option("--format", scmd.format, "tsv | json");

  // ---- identify -----------------------------------------------------------
  auto* ident = app.add_subcommand(
      "identify", "rank diagnostics and identification oracles");
  IdentifyCommand icmd;
  std::string id_covariates;
  ident->add_option("--law", icmd.law_path, "discrete-law JSON fixture");
  ident->add_option("--data", icmd.data_path, "dataset CSV (discrete X)");
  ident->add_option("--outcome", icmd.schema.outcome, "outcome column");
  ident->add_option("--treatment", icmd.schema.treatment, "treatment column");
  ident->add_option("--nce", icmd.schema.nce, "NCE column");
  ident->add_option("--nco", icmd.schema.nco, "NCO column");
  ident->add_option("--covariates", id_covariates, "covariate columns");
  ident->add_option("--rank-tol", icmd.rank_tol, "rank tolerance");
  ident->add_option("--out", icmd.out_path, "output file (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << e.what() << "\n";
    return negctrl::kExitValidation;
  }

  try {
    if (est->parsed()) {
      if (!covariates.empty()) {
        std::stringstream ss(covariates);
        std::string c;
        while (std::getline(ss, c, ','))
          if (!c.empty()) ecmd.schema.covariates.push_back(c);
      }
      if (!z_ref.empty()) ecmd.schema.z_reference = z_ref;
      if (!w_ref.empty()) ecmd.schema.w_reference = w_ref;
      require(exposure_form == "joint" || exposure_form == "factorized",
              "--exposure-form must be joint or factorized");
      ecmd.spec.exposure_form = exposure_form == "joint"
                                    ? ExposureForm::joint
                                    : ExposureForm::factorized;
      ecmd.spec.exposure_terms = parse_term_list(f_exposure);
      ecmd.spec.exposure_a_terms = parse_term_list(f_exposure_a);
      ecmd.spec.exposure_z_terms = parse_term_list(f_exposure_z);
      ecmd.spec.y_terms = parse_term_list(f_y);
      ecmd.spec.w0_terms = parse_term_list(f_w0);
      ecmd.spec.xi_terms = parse_term_list(f_xi);
      ecmd.spec.delta_terms = parse_term_list(f_delta);
      set_block_terms(f_eta, ecmd.spec.eta_terms, ecmd.spec.has_eta);
      ecmd.spec.r0_terms = parse_term_list(f_r0);
      set_block_terms(f_r1, ecmd.spec.r1_terms, ecmd.spec.has_r1);
      ecmd.estimators = parse_estimators(estimators);
      return cmd_estimate(ecmd, std::cout, std::cerr);
    }
    if (sim->parsed()) {
      scmd.study.scenario = scenario_from_string(scenario);
      scmd.study.estimators = parse_estimators(sim_estimators);
      return cmd_simulate(scmd, std::cout, std::cerr);
    }
    if (ident->parsed()) {
      if (!id_covariates.empty()) {
        std::stringstream ss(id_covariates);
        std::string c;
        while (std::getline(ss, c, ','))
          if (!c.empty()) icmd.schema.covariates.push_back(c);
      }
      return cmd_identify(icmd, std::cout, std::cerr);
    }
  } catch (const negctrl::validation_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return negctrl::kExitValidation;
  } catch (const negctrl::numeric_error& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return negctrl::kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return negctrl::kExitNumeric;
  }
  return negctrl::kExitValidation;
}
