#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "negctrl/common.hpp"
#include "negctrl/estimators.hpp"
#include "negctrl/identify.hpp"
#include "negctrl/simulate.hpp"

namespace negctrl {

inline constexpr const char* kReportSchema = "negctrl-report/1";
inline constexpr const char* kToolVersion = "negctrl 1.0.0";

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline nlohmann::json to_json(const Vector& v) {
  nlohmann::json out = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

inline nlohmann::json to_json(const Matrix& m) {
  nlohmann::json out = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    out.push_back(row);
  }
  return out;
}

inline Vector vector_from_json(const nlohmann::json& j) {
  Vector v(j.size());
  for (size_t i = 0; i < j.size(); ++i) v(i) = j[i].get<double>();
  return v;
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
  const size_t rows = j.size();
  const size_t cols = rows ? j[0].size() : 0;
  Matrix m(rows, cols);
  for (size_t r = 0; r < rows; ++r)
    for (size_t c = 0; c < cols; ++c) m(r, c) = j[r][c].get<double>();
  return m;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Estimate reports
// ---------------------------------------------------------------------------

inline nlohmann::json report_to_json(const EstimateReport& rep) {
  nlohmann::json j;
  j["estimator"] = rep.estimator;
  j["delta"] = rep.delta;
  if (rep.has_decomposition) {
    j["delta_confounded"] = rep.confounded;
    j["delta_bias"] = rep.bias;
  }
  j["se"] = rep.se;
  j["ci_lo"] = rep.ci_lo;
  j["ci_hi"] = rep.ci_hi;
  j["confidence_level"] = rep.confidence_level;
  j["p_value"] = rep.p_value;
  j["n"] = rep.n;
  j["provenance"] = rep.provenance;
  return j;
}

inline std::string reports_tsv_header() {
  return "estimator\tdelta\tdelta_confounded\tdelta_bias\tse\tci_lo\tci_hi\t"
         "confidence_level\tp_value\tn";
}

inline std::string report_tsv_row(const EstimateReport& rep) {
  std::ostringstream os;
  os << rep.estimator << '\t' << detail::fmt_double(rep.delta) << '\t';
  if (rep.has_decomposition)
    os << detail::fmt_double(rep.confounded) << '\t'
       << detail::fmt_double(rep.bias) << '\t';
  else
    os << "NA\tNA\t";
  os << detail::fmt_double(rep.se) << '\t' << detail::fmt_double(rep.ci_lo)
     << '\t' << detail::fmt_double(rep.ci_hi) << '\t'
     << detail::fmt_double(rep.confidence_level) << '\t'
     << detail::fmt_double(rep.p_value) << '\t' << rep.n;
  return os.str();
}

// ---------------------------------------------------------------------------
// Fitted model snapshot
// ---------------------------------------------------------------------------

inline nlohmann::json spec_to_json(const ModelSpec& spec) {
  nlohmann::json j;
  j["exposure_form"] =
      spec.exposure_form == ExposureForm::joint ? "joint" : "factorized";
  j["exposure_terms"] = format_term_list(spec.exposure_terms);
  j["exposure_a_terms"] = format_term_list(spec.exposure_a_terms);
  j["exposure_z_terms"] = format_term_list(spec.exposure_z_terms);
  j["y_terms"] = format_term_list(spec.y_terms);
  j["w0_terms"] = format_term_list(spec.w0_terms);
  j["xi_terms"] = format_term_list(spec.xi_terms);
  j["delta_terms"] = format_term_list(spec.delta_terms);
  j["eta_terms"] = spec.has_eta ? format_term_list(spec.eta_terms) : "none";
  j["r0_terms"] = format_term_list(spec.r0_terms);
  j["r1_terms"] = spec.has_r1 ? format_term_list(spec.r1_terms) : "none";
  return j;
}

inline nlohmann::json contrasts_to_json(const ContrastSet& c) {
  nlohmann::json j;
  j["k"] = c.k;
  j["delta0_coefs"] = detail::to_json(c.delta0_coef);
  j["xi0_coefs"] = detail::to_json(c.xi0_coef);
  if (c.has_eta) j["eta_coefs"] = detail::to_json(c.eta_coef);
  j["r0_coefs"] = detail::to_json(c.r0_coef);
  if (c.has_r1) j["r1_coefs"] = detail::to_json(c.r1_coef);
  return j;
}

/// Serializes every fitted block of the pipeline: term names plus
/// coefficients, enough to reproduce all reported estimates.
inline nlohmann::json theta_to_json(const FittedPipeline& fp) {
  nlohmann::json j;
  j["spec"] = spec_to_json(fp.spec);
  nlohmann::json e;
  if (fp.exposure.form == ExposureForm::joint) {
    e["form"] = "joint";
    e["coefs"] = detail::to_json(fp.exposure.joint_coefs);
  } else {
    e["form"] = "factorized";
    e["a_coefs"] = detail::to_json(fp.exposure.a_coefs);
    e["z_coefs"] = detail::to_json(fp.exposure.z_coefs);
  }
  j["exposure"] = e;
  j["outcome_baseline"] = {
      {"link",
       fp.outcome.link == OutcomeLink::logistic ? "logistic" : "identity"},
      {"coefs", detail::to_json(fp.outcome.coefs)}};
  if (fp.parts.mr)
    j["nco_baseline"] = {{"coefs", detail::to_json(fp.nco.coefs)}};
  if (fp.parts.mr) j["contrasts_dr"] = contrasts_to_json(fp.dr);
  if (fp.parts.delta2) j["contrasts_ipw"] = contrasts_to_json(fp.ipw);
  if (fp.parts.delta1) j["contrasts_r_m1"] = contrasts_to_json(fp.r_m1);
  if (fp.parts.delta3) {
    j["w_mle_baseline"] = {{"coefs", detail::to_json(fp.w_mle.baseline.coefs)}};
    j["contrasts_or"] = contrasts_to_json(fp.r_or);
  }
  return j;
}

// ---------------------------------------------------------------------------
// Discrete law fixtures
// ---------------------------------------------------------------------------

inline nlohmann::json law_to_json(const DiscreteLaw& law) {
  nlohmann::json j;
  j["num_u"] = law.num_u;
  j["num_x"] = law.num_x;
  j["num_z"] = law.num_z;
  j["num_w"] = law.num_w;
  j["p_x"] = detail::to_json(law.p_x);
  j["p_u_given_x"] = detail::to_json(law.p_u_given_x);
  nlohmann::json paz = nlohmann::json::array();
  for (const auto& m : law.p_az_given_ux) paz.push_back(detail::to_json(m));
  j["p_az_given_ux"] = paz;  // indexed [x * num_u + u], each 2 x num_z
  nlohmann::json pw = nlohmann::json::array();
  for (const auto& m : law.p_w_given_ux) pw.push_back(detail::to_json(m));
  j["p_w_given_ux"] = pw;  // indexed [x], each num_w x num_u
  nlohmann::json ey = nlohmann::json::array();
  for (const auto& m : law.e_y_given_aux) ey.push_back(detail::to_json(m));
  j["e_y_given_aux"] = ey;  // indexed [x], each 2 x num_u
  return j;
}

inline DiscreteLaw law_from_json(const nlohmann::json& j) {
  DiscreteLaw law;
  law.num_u = j.at("num_u").get<int>();
  law.num_x = j.at("num_x").get<int>();
  law.num_z = j.at("num_z").get<int>();
  law.num_w = j.at("num_w").get<int>();
  law.p_x = detail::vector_from_json(j.at("p_x"));
  law.p_u_given_x = detail::matrix_from_json(j.at("p_u_given_x"));
  for (const auto& m : j.at("p_az_given_ux"))
    law.p_az_given_ux.push_back(detail::matrix_from_json(m));
  for (const auto& m : j.at("p_w_given_ux"))
    law.p_w_given_ux.push_back(detail::matrix_from_json(m));
  for (const auto& m : j.at("e_y_given_aux"))
    law.e_y_given_aux.push_back(detail::matrix_from_json(m));
  law.validate();
  return law;
}

inline DiscreteLaw load_law(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open law fixture '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw validation_error("malformed JSON in '" + path + "': " + e.what());
  }
  try {
    return law_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw validation_error("invalid law fixture '" + path + "': " + e.what());
  }
}

inline void save_law(const DiscreteLaw& law, const std::string& path) {
  std::ofstream out(path);
  require(out.good(), "cannot write '" + path + "'");
  out << law_to_json(law).dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Simulation outputs
// ---------------------------------------------------------------------------

inline std::string study_raw_tsv(const OperatingCharacteristics& oc) {
  std::ostringstream os;
  os << "replication\testimator\tdelta\tse\tcovered\tfailed\terror\n";
  for (const auto& r : oc.raw) {
    os << r.replication << '\t' << r.estimator << '\t'
       << detail::fmt_double(r.delta) << '\t' << detail::fmt_double(r.se)
       << '\t' << (r.covered ? 1 : 0) << '\t' << (r.failed ? 1 : 0) << '\t'
       << r.error << '\n';
  }
  return os.str();
}

inline std::string study_summary_tsv(const OperatingCharacteristics& oc) {
  std::ostringstream os;
  os << "scenario\testimator\tbias_x1000\tvar_x1000\tproportion_bias_pct\t"
        "mse_x1000\tci_coverage\treplications\tused_after_trim\tfailures\n";
  for (const auto& s : oc.summaries) {
    os << to_string(oc.scenario) << '\t' << s.estimator << '\t'
       << detail::fmt_double(s.bias * 1e3) << '\t'
       << detail::fmt_double(s.variance * 1e3) << '\t'
       << detail::fmt_double(s.proportion_bias) << '\t'
       << detail::fmt_double(s.mse * 1e3) << '\t'
       << detail::fmt_double(s.coverage) << '\t' << s.replications << '\t'
       << s.used << '\t' << s.failures << '\n';
  }
  return os.str();
}

inline nlohmann::json study_to_json(const OperatingCharacteristics& oc) {
  nlohmann::json j;
  j["schema"] = kReportSchema;
  j["scenario"] = to_string(oc.scenario);
  j["reps"] = oc.reps;
  j["n"] = oc.n;
  j["seed"] = oc.base_seed;
  j["true_ate"] = oc.true_ate;
  j["true_ate_mc_se"] = oc.true_ate_mc_se;
  j["rng"] = oc.rng_version;
  j["trim_rule"] = oc.trim_rule;
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& s : oc.summaries) {
    nlohmann::json r;
    r["estimator"] = s.estimator;
    r["bias_x1000"] = s.bias * 1e3;
    r["var_x1000"] = s.variance * 1e3;
    r["proportion_bias_pct"] = s.proportion_bias;
    r["mse_x1000"] = s.mse * 1e3;
    r["ci_coverage"] = s.coverage;
    r["replications"] = s.replications;
    r["used_after_trim"] = s.used;
    r["failures"] = s.failures;
    rows.push_back(r);
  }
  j["summaries"] = rows;
  return j;
}

inline void write_text_file(const std::string& path,
                            const std::string& content) {
  std::ofstream out(path);
  require(out.good(), "cannot write '" + path + "'");
  out << content;
  require(out.good(), "write failed for '" + path + "'");
}

}  // namespace negctrl
