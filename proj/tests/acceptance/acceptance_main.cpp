// Acceptance suite: one pass/fail line per criterion, nonzero exit if any
// criterion fails. Heavy sections can be filtered with --criterion N and
// scaled with --reps for quick runs; the defaults are the deliverable gates.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <set>
#include <string>
#include <vector>

#include "negctrl/analysis.hpp"
#include "negctrl/cli.hpp"
#include "negctrl/identify.hpp"
#include "negctrl/report.hpp"
#include "negctrl/simulate.hpp"

using namespace negctrl;

namespace {

int g_reps = 1000;
int g_threads = 0;
std::string g_data_dir = "data";
int g_failures = 0;

struct Timer {
  std::chrono::steady_clock::time_point start =
      std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                         start)
        .count();
  }
};

void report(int criterion, bool pass, const std::string& what,
            const Timer& timer) {
  std::printf("[%s] criterion %d: %s (%.1f s)\n", pass ? "PASS" : "FAIL",
              criterion, what.c_str(), timer.seconds());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

ModelSpec saturated_two_covariate_spec(const Dataset& d) {
  const std::string x1 = d.covariate_names[0];
  const std::string x2 = d.covariate_names[1];
  const std::string sat = x1 + "," + x2 + "," + x1 + "*" + x2;
  const std::string a = d.treatment_name;
  ModelSpec spec;
  spec.exposure_form = ExposureForm::joint;
  spec.exposure_terms = parse_term_list(sat);
  spec.y_terms = parse_term_list(a + "," + sat + "," + a + "*" + x1 + "," +
                                 a + "*" + x2 + "," + a + "*" + x1 + "*" + x2);
  spec.w0_terms = parse_term_list(sat);
  spec.xi_terms = parse_term_list(sat);
  spec.delta_terms = parse_term_list(sat);
  spec.eta_terms = parse_term_list(sat);
  spec.r0_terms = parse_term_list(sat);
  spec.r1_terms = parse_term_list(sat);
  return spec;
}

// --------------------------------------------------------------------------
// 1. identification oracle on random laws
// --------------------------------------------------------------------------
void criterion1() {
  Timer timer;
  RngStream rng(101, 0);
  double worst_id = 0.0, worst_rep = 0.0;
  bool pass = true;
  for (int rep = 0; rep < 50; ++rep) {
    const int k = 2 + rep % 3;  // |U| = |Z| = |W| in {2,3,4}
    const auto law = random_discrete_law(rng, k, k, k, 2, 0.05);
    const auto m = observed_matrices(law);
    const double truth = law.latent_ate();
    const double id_gap = std::abs(ate_by_identification(m).delta - truth);
    const double rep_gap =
        std::abs(ate_by_reparameterization(m).delta - truth);
    worst_id = std::max(worst_id, id_gap);
    worst_rep = std::max(worst_rep, rep_gap);
    if (id_gap > 1e-9 || rep_gap > 1e-9) pass = false;
  }
  pass = pass && timer.seconds() < 10.0;
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "identification oracle, 50 random laws: max gap %.2e "
                "(bridge), %.2e (reparameterized), tolerance 1e-9",
                worst_id, worst_rep);
  report(1, pass, buf, timer);
}

// --------------------------------------------------------------------------
// 2. rank diagnosis of the latent cardinality
// --------------------------------------------------------------------------
void criterion2() {
  Timer timer;
  RngStream rng(202, 0);
  int correct = 0;
  const int shapes[4][3] = {{2, 3, 3}, {2, 4, 4}, {3, 4, 4}, {2, 3, 4}};
  for (int rep = 0; rep < 50; ++rep) {
    const auto& s = shapes[rep % 4];
    const auto law = random_discrete_law(rng, s[0], s[1], s[2], 1, 0.05);
    const auto m = observed_matrices(law);
    if (infer_latent_cardinality(m) == s[0]) ++correct;
  }
  const bool pass = correct == 50 && timer.seconds() < 5.0;
  char buf[120];
  std::snprintf(buf, sizeof(buf),
                "latent cardinality recovered in %d/50 constructions with "
                "|U| < min(|Z|,|W|)",
                correct);
  report(2, pass, buf, timer);
}

// --------------------------------------------------------------------------
// 3. saturated equivalence of the five estimators
// --------------------------------------------------------------------------
void criterion3() {
  Timer timer;
  CsvSchema schema;
  schema.outcome = "fever";
  schema.treatment = "combo_vax";
  schema.nce = "ringworm";
  schema.nco = "injury";
  schema.covariates = {"age_older", "male"};
  const Dataset d = load_dataset(g_data_dir + "/vaccine_synth.csv", schema);
  const ModelSpec spec = saturated_two_covariate_spec(d);
  const auto fp = fit_pipeline(d, spec);

  std::vector<EstimateReport> reps;
  for (const auto kind :
       {EstimatorKind::delta1, EstimatorKind::delta2, EstimatorKind::delta3,
        EstimatorKind::mle, EstimatorKind::mr}) {
    EstimateReport r = point_estimate(d, fp, kind);
    attach_inference(r, d, fp, kind, EstimateOptions{});
    reps.push_back(r);
  }
  double max_delta_gap = 0.0, max_ci_gap = 0.0;
  for (size_t i = 0; i < reps.size(); ++i)
    for (size_t j = i + 1; j < reps.size(); ++j) {
      max_delta_gap =
          std::max(max_delta_gap, std::abs(reps[i].delta - reps[j].delta));
      max_ci_gap =
          std::max({max_ci_gap, std::abs(reps[i].ci_lo - reps[j].ci_lo),
                    std::abs(reps[i].ci_hi - reps[j].ci_hi)});
    }
  const bool pass =
      max_delta_gap < 1e-9 && max_ci_gap < 1e-6 && timer.seconds() < 5.0;
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "saturated equivalence: max estimate gap %.2e (tol 1e-9), "
                "max CI gap %.2e (tol 1e-6)",
                max_delta_gap, max_ci_gap);
  report(3, pass, buf, timer);
}

// --------------------------------------------------------------------------
// 4. EIF correctness: exact zero mean and path agreement
// --------------------------------------------------------------------------
ObsPrimitives primitives_from_law(const DiscreteLaw& law,
                                  const ObservedLawMatrices& m, int x, int a,
                                  int z, int w) {
  ObsPrimitives p;
  p.a = a;
  p.zc = z == 0 ? -1 : z - 1;
  p.ref_z_ = 0;
  const int k = law.num_w - 1;
  p.gamma_w = Vector::Zero(k);
  if (w > 0) p.gamma_w(w - 1) = 1.0;
  p.y = law.e_y_given_azwx(a, z, w, x);
  p.cells = m.p_az[x];
  p.ey0[0] = m.y_given_z(0, x)(0);
  p.ey0[1] = m.y_given_z(1, x)(0);
  p.ew00.resize(k);
  for (int i = 0; i < k; ++i) p.ew00(i) = m.w_given_z(0, x)(i + 1, 0);
  p.delta0.resize(k);
  for (int i = 0; i < k; ++i)
    p.delta0(i) = m.w_given_z(1, x)(i + 1, 0) - m.w_given_z(0, x)(i + 1, 0);
  p.xi0.resize(k, k);
  Matrix xi1(k, k);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) {
      p.xi0(i, j) =
          m.w_given_z(0, x)(i + 1, j + 1) - m.w_given_z(0, x)(i + 1, 0);
      xi1(i, j) =
          m.w_given_z(1, x)(i + 1, j + 1) - m.w_given_z(1, x)(i + 1, 0);
    }
  p.eta = xi1 - p.xi0;
  for (int aa = 0; aa < 2; ++aa) {
    RowVector xi_y(k);
    for (int j = 0; j < k; ++j)
      xi_y(j) = m.y_given_z(aa, x)(j + 1) - m.y_given_z(aa, x)(0);
    const Matrix xi_w = aa ? xi1 : p.xi0;
    p.r[aa] =
        xi_w.transpose().partialPivLu().solve(xi_y.transpose()).transpose();
  }
  return p;
}

void criterion4() {
  Timer timer;
  RngStream rng(404, 1);
  double worst_mean = 0.0, worst_path = 0.0;
  for (int rep = 0; rep < 10; ++rep) {
    const auto law = random_discrete_law(rng, 2, 2, 2, 2, 0.05);
    const auto m = observed_matrices(law);
    const auto truth = ate_by_reparameterization(m);
    double mean_eif = 0.0;
    for (int x = 0; x < law.num_x; ++x)
      for (int a = 0; a < 2; ++a)
        for (int z = 0; z < law.num_z; ++z)
          for (int w = 0; w < law.num_w; ++w) {
            ObsPrimitives p = primitives_from_law(law, m, x, a, z, w);
            double mass = law.p_x(x) * m.p_az[x](a, z);
            Vector pu = law.p_u_given_zax(z, a, x);
            double pw = 0.0;
            for (int u = 0; u < law.num_u; ++u)
              pw += pu(u) * law.p_w_given_ux[x](w, u);
            mass *= pw;
            mean_eif += mass * ((eif_confounded(p) - truth.confounded) -
                                (eif_bias(p) - truth.bias));
            // per-observation binary vs polytomous path agreement
            ObsPrimitives q = p;
            q.y = 0.43;  // arbitrary point off the conditional mean
            worst_path = std::max(
                worst_path, std::abs(eif_bias(q, ZeroMask{}, false) -
                                     eif_bias(q, ZeroMask{}, true)));
          }
    worst_mean = std::max(worst_mean, std::abs(mean_eif));
  }
  const bool pass =
      worst_mean < 1e-12 && worst_path < 1e-12 && timer.seconds() < 5.0;
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "EIF: exact mean |%.2e| (tol 1e-12), binary-vs-polytomous "
                "path gap %.2e (tol 1e-12)",
                worst_mean, worst_path);
  report(4, pass, buf, timer);
}

// --------------------------------------------------------------------------
// 5. desk-scale operating characteristics study
// --------------------------------------------------------------------------
struct Row {
  double prop = 0.0, bias = 0.0, coverage = 0.0;
};

Row find_row(const OperatingCharacteristics& oc, const char* name) {
  for (const auto& s : oc.summaries)
    if (s.estimator == name) return {s.proportion_bias, s.bias, s.coverage};
  throw std::runtime_error("missing estimator row");
}

void criterion5() {
  Timer timer;
  DgpSpec dgp;
  dgp.n = 2000;
  dgp.seed = 1;
  const auto oracle = true_ate_oracle(dgp, 4000000);
  bool pass = std::abs(oracle.delta - 0.07) < 0.002;
  std::printf("  oracle: true ATE %.5f (target 0.07 +/- 0.002) %s\n",
              oracle.delta, pass ? "ok" : "VIOLATED");

  auto run = [&](Scenario sc) {
    StudyOptions opt;
    opt.scenario = sc;
    opt.reps = g_reps;
    opt.n = 2000;
    opt.base_seed = 1;
    opt.threads = g_threads;
    const auto oc = run_study(opt);
    for (const auto& s : oc.summaries)
      std::printf("  %-11s %-7s bias=%+6.2fe-3 (mc se %.2fe-3) "
                  "prop=%+7.2f%% cov=%.3f\n",
                  to_string(sc).c_str(), s.estimator.c_str(), s.bias * 1e3,
                  std::sqrt(s.variance / s.used) * 1e3, s.proportion_bias,
                  s.coverage);
    std::fflush(stdout);
    return oc;
  };

  {
    const auto oc = run(Scenario::all_correct);
    for (const auto& s : oc.summaries)
      if (std::abs(s.bias) >= 1.5e-3) {
        pass = false;
        std::printf("  VIOLATED: all_correct %s |bias| %.2fe-3 >= 1.5e-3\n",
                    s.estimator.c_str(), std::abs(s.bias) * 1e3);
      }
    const Row mr = find_row(oc, "mr");
    if (mr.coverage < 0.93 || mr.coverage > 0.97) {
      pass = false;
      std::printf("  VIOLATED: all_correct MR coverage %.3f outside "
                  "[0.93, 0.97]\n",
                  mr.coverage);
    }
  }
  {
    const auto oc = run(Scenario::m1_only);
    const Row mle = find_row(oc, "mle");
    const Row d3 = find_row(oc, "delta3");
    const Row mr = find_row(oc, "mr");
    if (!(mle.prop < -15.0)) {
      pass = false;
      std::printf("  VIOLATED: m1_only MLE prop bias %.2f%% not < -15%%\n",
                  mle.prop);
    }
    if (!(d3.prop < -5.0)) {
      pass = false;
      std::printf("  VIOLATED: m1_only delta3 prop bias %.2f%% not < -5%%\n",
                  d3.prop);
    }
    if (!(std::abs(mr.prop) < 3.0)) {
      pass = false;
      std::printf("  VIOLATED: m1_only MR |prop bias| %.2f%% not < 3%%\n",
                  std::abs(mr.prop));
    }
  }
  {
    const auto oc = run(Scenario::m2_only);
    const Row d3 = find_row(oc, "delta3");
    const Row mr = find_row(oc, "mr");
    if (!(d3.prop < -5.0)) {
      pass = false;
      std::printf("  VIOLATED: m2_only delta3 prop bias %.2f%% not < -5%%\n",
                  d3.prop);
    }
    if (!(std::abs(mr.prop) < 3.0)) {
      pass = false;
      std::printf("  VIOLATED: m2_only MR |prop bias| %.2f%% not < 3%%\n",
                  std::abs(mr.prop));
    }
  }
  {
    const auto oc = run(Scenario::m3_only);
    for (const char* name : {"delta1", "delta2", "mr"}) {
      const Row r = find_row(oc, name);
      if (!(std::abs(r.prop) < 3.0)) {
        pass = false;
        std::printf("  VIOLATED: m3_only %s |prop bias| %.2f%% not < 3%%\n",
                    name, std::abs(r.prop));
      }
    }
  }
  {
    const auto oc = run(Scenario::all_wrong);
    const Row d3 = find_row(oc, "delta3");
    const Row mr = find_row(oc, "mr");
    if (!(d3.prop >= -6.0 && d3.prop <= -1.5)) {
      pass = false;
      std::printf("  VIOLATED: all_wrong delta3 prop bias %.2f%% outside "
                  "[-6%%, -1.5%%]\n",
                  d3.prop);
    }
    if (!(std::abs(mr.prop) < 3.0)) {
      pass = false;
      std::printf("  VIOLATED: all_wrong MR |prop bias| %.2f%% not < 3%%\n",
                  std::abs(mr.prop));
    }
  }
  char buf[120];
  std::snprintf(buf, sizeof(buf),
                "operating characteristics, %d reps x 5 scenarios at n=2000",
                g_reps);
  report(5, pass, buf, timer);
}

// --------------------------------------------------------------------------
// 6. sandwich vs bootstrap
// --------------------------------------------------------------------------
void criterion6() {
  Timer timer;
  DgpSpec dgp;
  dgp.n = 2000;
  dgp.seed = 606;
  const auto gen = generate_dataset(dgp, 0);
  const ModelSpec spec = scenario_model_specs(Scenario::all_correct);
  const auto fp = fit_pipeline(gen.data, spec);
  EstimateReport rep = point_estimate(gen.data, fp, EstimatorKind::mr);
  attach_inference(rep, gen.data, fp, EstimatorKind::mr, EstimateOptions{});

  auto mr_delta = [&](const Dataset& d) {
    PipelineParts parts;
    parts.delta1 = parts.delta2 = parts.delta3 = false;
    parts.mr = true;
    const auto bfp = fit_pipeline(d, spec, EstimateOptions{}, parts);
    return point_estimate(d, bfp, EstimatorKind::mr).delta;
  };
  const auto boot = bootstrap_se(gen.data, mr_delta, 500, 4242);
  const double ratio = rep.se / boot.se;
  const bool pass =
      ratio > 0.9 && ratio < 1.1 && timer.seconds() < 300.0;
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "sandwich SE %.5f vs bootstrap SE %.5f (500 resamples, "
                "ratio %.3f, required within 10%%)",
                rep.se, boot.se, ratio);
  report(6, pass, buf, timer);
}

// --------------------------------------------------------------------------
// 7. reduction identities
// --------------------------------------------------------------------------
void criterion7() {
  Timer timer;
  DgpSpec dgp;
  dgp.n = 2000;
  dgp.seed = 707;
  const auto gen = generate_dataset(dgp, 0);
  const ModelSpec spec = scenario_model_specs(Scenario::all_correct);
  const auto fp = fit_pipeline(gen.data, spec);
  bool pass = true;
  double gap = 0.0;
  try {
    const auto red = reduction_check(gen.data, fp, EstimateOptions{}, 1e-10);
    gap = red.max_gap;
  } catch (const std::exception&) {
    pass = false;
  }
  pass = pass && gap < 1e-10;
  char buf[120];
  std::snprintf(buf, sizeof(buf),
                "reduction identities: max gap %.2e (tol 1e-10)", gap);
  report(7, pass, buf, timer);
}

// --------------------------------------------------------------------------
// 8. end-to-end CLI analysis of the bundled dataset
// --------------------------------------------------------------------------
void criterion8() {
  Timer timer;
  EstimateCommand cmd;
  cmd.data_path = g_data_dir + "/vaccine_synth.csv";
  cmd.schema.outcome = "fever";
  cmd.schema.treatment = "combo_vax";
  cmd.schema.nce = "ringworm";
  cmd.schema.nco = "injury";
  cmd.schema.covariates = {"age_older", "male"};
  {
    CsvSchema probe = cmd.schema;
    const Dataset d = load_dataset(cmd.data_path, probe);
    cmd.spec = saturated_two_covariate_spec(d);
  }
  cmd.format = "json";
  cmd.out_path = "/tmp/negctrl_acceptance_report.json";
  std::ostringstream out, err;
  bool pass = cmd_estimate(cmd, out, err) == 0;

  std::ifstream in(cmd.out_path);
  nlohmann::json j;
  in >> j;
  pass = pass && j.at("schema") == kReportSchema && j.contains("metadata") &&
         j.contains("theta") && j.at("estimates").size() == 5;
  const double z = normal_quantile(0.975);
  double max_gap = 0.0, max_ci_arith = 0.0, first = 0.0;
  for (size_t i = 0; i < j["estimates"].size(); ++i) {
    const auto& e = j["estimates"][i];
    const double delta = e.at("delta").get<double>();
    if (i == 0)
      first = delta;
    else
      max_gap = std::max(max_gap, std::abs(delta - first));
    const double half =
        (e.at("ci_hi").get<double>() - e.at("ci_lo").get<double>()) / 2.0;
    max_ci_arith =
        std::max(max_ci_arith, std::abs(half - z * e.at("se").get<double>()));
  }
  pass = pass && max_gap < 1e-9 && max_ci_arith < 1e-12;
  char buf[180];
  std::snprintf(buf, sizeof(buf),
                "bundled-dataset report: schema complete, estimator gap "
                "%.2e (tol 1e-9), CI half-width vs z*SE gap %.2e (tol 1e-12)",
                max_gap, max_ci_arith);
  report(8, pass, buf, timer);
}

// --------------------------------------------------------------------------
// 9. g-estimation probability limits at large n
// --------------------------------------------------------------------------
void criterion9() {
  Timer timer;
  bool pass = true;

  // M2-correct data at n = 100000: W contrasts near the implied truth
  {
    DgpSpec dgp;
    dgp.n = 100000;
    dgp.seed = 909;
    const auto gen = generate_dataset(dgp, 0);
    const ModelSpec spec = scenario_model_specs(Scenario::all_correct);
    const auto exposure = fit_joint_exposure(gen.data, spec);
    const auto baseline_w = fit_baseline_nco(gen.data, spec);
    ContrastSet c = ContrastSet::make(gen.data, spec);
    const IndexFunctions idx = default_index_functions(c);
    solve_w_contrasts(gen.data, exposure, baseline_w, c, idx);
    const double xi0 = c.xi0_coef(0, 0);
    const double eta = c.eta_coef(0, 0);
    const double delta0 = c.delta0_coef(0, 0);
    std::printf("  W contrasts at n=1e5: xi0=%.4f (0.2), eta=%.4f (0.2), "
                "delta0=%.4f (0.0)\n",
                xi0, eta, delta0);
    if (std::abs(xi0 - 0.2) > 0.01 || std::abs(eta - 0.2) > 0.01 ||
        std::abs(delta0) > 0.01) {
      pass = false;
      std::printf("  VIOLATED: W contrasts outside +/-0.01\n");
    }
  }

  // M1-correct data: R recovered within +/-0.02 of the 0.5A truth
  {
    DgpSpec dgp;
    dgp.n = 400000;
    dgp.seed = 910;
    const auto gen = generate_dataset(dgp, 0);
    const ModelSpec spec = scenario_model_specs(Scenario::all_correct);
    const auto exposure = fit_joint_exposure(gen.data, spec);
    ContrastSet c = ContrastSet::make(gen.data, spec);
    const IndexFunctions idx = default_index_functions(c);
    gest_r_m1(gen.data, exposure, c, idx);
    const double r0 = c.r0_coef(0, 0);
    const double r1 = c.r1_coef(0, 0);
    std::printf("  R (M1 route) at n=4e5: r0=%.4f (0.0), r1=%.4f (0.5)\n", r0,
                r1);
    if (std::abs(r0) > 0.02 || std::abs(r1 - 0.5) > 0.02) {
      pass = false;
      std::printf("  VIOLATED: R coefficients outside +/-0.02\n");
    }
  }

  // exposure-model coefficient recovery at n = 200000
  {
    DgpSpec dgp;
    dgp.n = 200000;
    dgp.seed = 911;
    const auto gen = generate_dataset(dgp, 0);
    const ModelSpec spec = scenario_model_specs(Scenario::all_correct);
    const auto exposure = fit_joint_exposure(gen.data, spec);
    const double a_coef = exposure.z_coefs(0, 1);  // A slope in the Z model
    std::printf("  Z-model treatment coefficient at n=2e5: %.4f (-0.2)\n",
                a_coef);
    if (std::abs(a_coef + 0.2) > 0.02) {
      pass = false;
      std::printf("  VIOLATED: treatment coefficient outside +/-0.02\n");
    }
    const auto outcome = fit_baseline_outcome(gen.data, spec);
    // intercept -1 and slopes -0.1 of the baseline outcome model
    double worst = std::abs(outcome.coefs(0) + 1.0);
    for (int j = 0; j < 8; ++j)
      worst = std::max(worst, std::abs(outcome.coefs(2 + j) + 0.1));
    std::printf("  baseline outcome coefficients: worst abs error %.4f\n",
                worst);
    if (worst > 0.05) {
      pass = false;
      std::printf("  VIOLATED: outcome coefficients outside +/-0.05\n");
    }
  }
  report(9, pass, "g-estimation and nuisance limits at large n", timer);
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) {
    if (!std::strcmp(argv[i], "--criterion") && i + 1 < argc)
      selected.insert(std::atoi(argv[++i]));
    else if (!std::strcmp(argv[i], "--reps") && i + 1 < argc)
      g_reps = std::atoi(argv[++i]);
    else if (!std::strcmp(argv[i], "--threads") && i + 1 < argc)
      g_threads = std::atoi(argv[++i]);
  }
  if (const char* env = std::getenv("NEGCTRL_TEST_DATA")) g_data_dir = env;
  auto want = [&](int c) { return selected.empty() || selected.count(c); };

  Timer total;
  try {
    if (want(1)) criterion1();
    if (want(2)) criterion2();
    if (want(3)) criterion3();
    if (want(4)) criterion4();
    if (want(5)) criterion5();
    if (want(6)) criterion6();
    if (want(7)) criterion7();
    if (want(8)) criterion8();
    if (want(9)) criterion9();
  } catch (const std::exception& e) {
    std::printf("[FAIL] acceptance aborted: %s\n", e.what());
    return 1;
  }
  std::printf("%s: %d failure(s), total %.1f s\n",
              g_failures ? "ACCEPTANCE FAILED" : "ACCEPTANCE PASSED",
              g_failures, total.seconds());
  return g_failures ? 1 : 0;
}
