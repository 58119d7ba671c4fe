#include <catch2/catch.hpp>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "negctrl/cli.hpp"

using namespace negctrl;

namespace {

std::string data_dir() {
  const char* env = std::getenv("NEGCTRL_TEST_DATA");
  return env ? env : "data";
}

EstimateCommand demo_command() {
  EstimateCommand cmd;
  cmd.data_path = data_dir() + "/vaccine_synth.csv";
  cmd.schema.outcome = "fever";
  cmd.schema.treatment = "combo_vax";
  cmd.schema.nce = "ringworm";
  cmd.schema.nco = "injury";
  cmd.schema.covariates = {"age_older", "male"};
  cmd.spec.exposure_form = ExposureForm::joint;
  cmd.spec.exposure_terms = parse_term_list("age_older,male,age_older*male");
  cmd.spec.y_terms = parse_term_list(
      "combo_vax,age_older,male,combo_vax*age_older,combo_vax*male,"
      "age_older*male,combo_vax*age_older*male");
  cmd.spec.w0_terms = parse_term_list("age_older,male,age_older*male");
  cmd.spec.xi_terms = parse_term_list("age_older,male,age_older*male");
  cmd.spec.delta_terms = parse_term_list("age_older,male,age_older*male");
  cmd.spec.eta_terms = parse_term_list("age_older,male,age_older*male");
  cmd.spec.r0_terms = parse_term_list("age_older,male,age_older*male");
  cmd.spec.r1_terms = parse_term_list("age_older,male,age_older*male");
  return cmd;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("cmd_estimate produces a schema-complete JSON report") {
  EstimateCommand cmd = demo_command();
  cmd.format = "json";
  cmd.out_path = "/tmp/negctrl_cli_report.json";
  std::ostringstream out, err;
  REQUIRE(cmd_estimate(cmd, out, err) == kExitOk);

  const auto j = nlohmann::json::parse(slurp(cmd.out_path));
  CHECK(j.at("schema") == "negctrl-report/1");
  REQUIRE(j.contains("metadata"));
  CHECK(j["metadata"].contains("seed"));
  CHECK(j["metadata"].contains("formulas"));
  CHECK(j["metadata"].contains("density_floor"));
  REQUIRE(j.contains("theta"));  // snapshot reproducing the run
  CHECK(j["theta"].contains("exposure"));
  CHECK(j["theta"].contains("contrasts_dr"));

  REQUIRE(j.at("estimates").size() == 5);
  // saturated equivalence end to end, and the CI arithmetic against
  // wald_interval
  const double z = normal_quantile(0.975);
  double first = 0.0;
  for (size_t i = 0; i < j["estimates"].size(); ++i) {
    const auto& e = j["estimates"][i];
    const double delta = e.at("delta").get<double>();
    if (i == 0)
      first = delta;
    else
      CHECK(delta == Approx(first).margin(1e-9));
    const double se = e.at("se").get<double>();
    const double lo = e.at("ci_lo").get<double>();
    const double hi = e.at("ci_hi").get<double>();
    CHECK((hi - lo) / 2.0 == Approx(z * se).margin(1e-12));
    const auto ci = wald_interval(delta, se, 0.95);
    CHECK(lo == Approx(ci.lo).margin(1e-14));
    CHECK(hi == Approx(ci.hi).margin(1e-14));
    CHECK(e.at("delta_confounded").get<double>() -
              e.at("delta_bias").get<double>() ==
          Approx(delta).margin(1e-9));
  }
}

TEST_CASE("cmd_estimate tsv output and gmm row") {
  EstimateCommand cmd = demo_command();
  cmd.estimators = {EstimatorKind::mr, EstimatorKind::gmm};
  cmd.format = "tsv";
  std::ostringstream out, err;
  REQUIRE(cmd_estimate(cmd, out, err) == kExitOk);
  const std::string text = out.str();
  CHECK(text.find("estimator\tdelta") == 0);
  CHECK(text.find("\nmr\t") != std::string::npos);
  CHECK(text.find("\ngmm\t") != std::string::npos);

  // with binary Z and W the only coarsening is the identity: gmm == mr
  std::istringstream is(text);
  std::string line;
  double mr_delta = 0, gmm_delta = 0, mr_se = 0, gmm_se = 0;
  std::getline(is, line);
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string name, delta, conf, bias, se;
    std::getline(ls, name, '\t');
    std::getline(ls, delta, '\t');
    std::getline(ls, conf, '\t');
    std::getline(ls, bias, '\t');
    std::getline(ls, se, '\t');
    if (name == "mr") {
      mr_delta = std::stod(delta);
      mr_se = std::stod(se);
    } else if (name == "gmm") {
      gmm_delta = std::stod(delta);
      gmm_se = std::stod(se);
    }
  }
  CHECK(gmm_delta == Approx(mr_delta).margin(1e-10));
  CHECK(gmm_se == Approx(mr_se).epsilon(1e-6));
}

TEST_CASE("cmd_simulate writes byte-identical outputs for identical flags") {
  SimulateCommand cmd;
  cmd.study.scenario = Scenario::all_correct;
  cmd.study.reps = 4;
  cmd.study.n = 500;
  cmd.study.base_seed = 5;
  cmd.study.threads = 2;
  cmd.study.oracle_precision = 1000000;
  cmd.study.estimators = {EstimatorKind::delta1, EstimatorKind::mr};
  cmd.out_prefix = "/tmp/negctrl_sim_a";
  std::ostringstream out, err;
  REQUIRE(cmd_simulate(cmd, out, err) == kExitOk);
  cmd.out_prefix = "/tmp/negctrl_sim_b";
  REQUIRE(cmd_simulate(cmd, out, err) == kExitOk);
  CHECK(slurp("/tmp/negctrl_sim_a.summary.tsv") ==
        slurp("/tmp/negctrl_sim_b.summary.tsv"));
  CHECK(slurp("/tmp/negctrl_sim_a.raw.tsv") ==
        slurp("/tmp/negctrl_sim_b.raw.tsv"));
  CHECK(slurp("/tmp/negctrl_sim_a.meta.json") ==
        slurp("/tmp/negctrl_sim_b.meta.json"));
  // metadata records the reproducibility inputs
  const auto meta =
      nlohmann::json::parse(slurp("/tmp/negctrl_sim_a.meta.json"));
  CHECK(meta.at("rng") == std::string(philox::version()));
  CHECK(meta.contains("trim_rule"));
  CHECK(meta.at("seed") == 5);

  SimulateCommand bad = cmd;
  bad.study.reps = 0;
  REQUIRE_THROWS_AS(cmd_simulate(bad, out, err), validation_error);
}

TEST_CASE("cmd_identify diagnoses the bundled law fixture") {
  IdentifyCommand cmd;
  cmd.law_path = data_dir() + "/law_u2_z3_w3.json";
  std::ostringstream out, err;
  REQUIRE(cmd_identify(cmd, out, err) == kExitOk);
  const auto j = nlohmann::json::parse(out.str());
  CHECK(j.at("inferred_latent_levels") == 2);
  CHECK(std::abs(j.at("oracle_gap").get<double>()) < 1e-9);
  for (const auto& s : j.at("strata")) {
    CHECK(s.at("rank") == 2);
    CHECK(s.at("bridge_residual").get<double>() < 1e-9);
    CHECK(s.at("bridge_solver") == "pseudoinverse");
  }
}

TEST_CASE("cmd_identify works on a dataset with discrete covariates") {
  IdentifyCommand cmd;
  cmd.data_path = data_dir() + "/vaccine_synth.csv";
  cmd.schema.outcome = "fever";
  cmd.schema.treatment = "combo_vax";
  cmd.schema.nce = "ringworm";
  cmd.schema.nco = "injury";
  cmd.schema.covariates = {"age_older", "male"};
  std::ostringstream out, err;
  REQUIRE(cmd_identify(cmd, out, err) == kExitOk);
  const auto j = nlohmann::json::parse(out.str());
  CHECK(j.at("inferred_latent_levels") == 2);
  CHECK(j.contains("ate_identified"));
  CHECK(j.contains("ate_reparameterized"));
  // confounded data: the bias term is visibly nonzero
  CHECK(std::abs(j.at("delta_bias").get<double>()) > 0.005);
}

TEST_CASE("cmd_identify rejects malformed JSON with a location") {
  const std::string path = "/tmp/negctrl_bad_law.json";
  std::ofstream(path) << "{ not json";
  IdentifyCommand cmd;
  cmd.law_path = path;
  std::ostringstream out, err;
  REQUIRE_THROWS_WITH(cmd_identify(cmd, out, err),
                      Catch::Contains("malformed JSON"));
}

TEST_CASE("binary exit codes for flag errors") {
  const char* bin = std::getenv("NEGCTRL_BIN");
  if (!bin) return;  // only run when ctest provides the binary path

  const std::string base(bin);
  auto run = [](const std::string& cmd) {
    const int status =
        std::system((cmd + " >/tmp/negctrl_cli_out.txt 2>&1").c_str());
    return WEXITSTATUS(status);
  };

  // missing required --nco
  const int code = run(base +
                       " estimate --data /tmp/nope.csv --outcome y "
                       "--treatment a --nce z");
  CHECK(code == 2);
  const std::string msg = slurp("/tmp/negctrl_cli_out.txt");
  CHECK(msg.find("--nco") != std::string::npos);

  // validation error from a missing file
  const int code2 = run(base +
                        " estimate --data /tmp/definitely_missing.csv "
                        "--outcome y --treatment a --nce z --nco w "
                        "--formula-y a");
  CHECK(code2 == 2);

  // reps = 0 rejected
  const int code3 = run(base + " simulate --reps 0");
  CHECK(code3 == 2);
}
