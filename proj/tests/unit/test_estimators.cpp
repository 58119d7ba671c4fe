#include <catch2/catch.hpp>

#include "negctrl/analysis.hpp"
#include "negctrl/estimators.hpp"
#include "negctrl/identify.hpp"
#include "negctrl/simulate.hpp"

using namespace negctrl;

namespace {

ModelSpec saturated_spec() {
  ModelSpec spec;
  spec.exposure_form = ExposureForm::joint;
  spec.exposure_terms = parse_term_list("X1");
  spec.y_terms = parse_term_list("A,X1,A*X1");
  spec.w0_terms = parse_term_list("X1");
  spec.xi_terms = parse_term_list("X1");
  spec.delta_terms = parse_term_list("X1");
  spec.eta_terms = parse_term_list("X1");
  spec.r0_terms = parse_term_list("X1");
  spec.r1_terms = parse_term_list("X1");
  return spec;
}

Dataset law_sample(int n, uint64_t seed, DiscreteLaw* law_out = nullptr) {
  RngStream rng(seed, 0);
  const DiscreteLaw law = random_discrete_law(rng, 2, 2, 2, 2);
  if (law_out) *law_out = law;
  RngStream srng(seed, 1);
  return sample_from_law(law, n, srng);
}

/// True-theta primitives at one (x, a, z, w) cell of an exact law, with the
/// outcome filled with its conditional mean (the EIF is linear in y).
ObsPrimitives primitives_from_law(const DiscreteLaw& law,
                                  const ObservedLawMatrices& m, int x, int a,
                                  int z, int w) {
  ObsPrimitives p;
  p.a = a;
  p.zc = z == 0 ? -1 : z - 1;
  p.ref_z_ = 0;
  p.gamma_w = Vector::Zero(law.num_w - 1);
  if (w > 0) p.gamma_w(w - 1) = 1.0;
  p.y = law.e_y_given_azwx(a, z, w, x);
  p.cells = m.p_az[x];
  const int k = law.num_w - 1;
  p.ey0[0] = m.y_given_z(0, x)(0);
  p.ey0[1] = m.y_given_z(1, x)(0);
  p.ew00.resize(k);
  for (int i = 0; i < k; ++i) p.ew00(i) = m.w_given_z(0, x)(i + 1, 0);
  p.delta0.resize(k);
  for (int i = 0; i < k; ++i)
    p.delta0(i) = m.w_given_z(1, x)(i + 1, 0) - m.w_given_z(0, x)(i + 1, 0);
  p.xi0.resize(k, k);
  p.eta.resize(k, k);
  Matrix xi1(k, k);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) {
      p.xi0(i, j) = m.w_given_z(0, x)(i + 1, j + 1) - m.w_given_z(0, x)(i + 1, 0);
      xi1(i, j) = m.w_given_z(1, x)(i + 1, j + 1) - m.w_given_z(1, x)(i + 1, 0);
    }
  p.eta = xi1 - p.xi0;
  for (int aa = 0; aa < 2; ++aa) {
    RowVector xi_y(k);
    for (int j = 0; j < k; ++j)
      xi_y(j) = m.y_given_z(aa, x)(j + 1) - m.y_given_z(aa, x)(0);
    const Matrix xi_w = aa ? xi1 : p.xi0;
    p.r[aa] = xi_w.transpose()
                  .partialPivLu()
                  .solve(xi_y.transpose())
                  .transpose();
  }
  return p;
}

}  // namespace

TEST_CASE("EIF has exact mean zero at the true theta of a three-level law") {
  RngStream rng(909, 0);
  for (int rep = 0; rep < 3; ++rep) {
    const auto law = random_discrete_law(rng, 3, 3, 3, 2);
    const auto m = observed_matrices(law);
    const auto truth = ate_by_reparameterization(m);
    double e_conf = 0.0, e_bias = 0.0;
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
            e_conf += mass * eif_confounded(p);
            e_bias += mass * eif_bias(p);
          }
    CHECK(e_conf - truth.confounded == Approx(0.0).margin(1e-12));
    CHECK(e_bias - truth.bias == Approx(0.0).margin(1e-12));
  }
}

TEST_CASE("three-level saturated pipeline: estimators match the empirical "
          "functional") {
  RngStream rng(910, 0);
  const auto law = random_discrete_law(rng, 3, 3, 3, 1, 0.06, 5e-2);
  RngStream srng(910, 1);
  Dataset d = sample_from_law(law, 20000, srng);

  ModelSpec spec;  // single x stratum: intercept-only blocks saturate
  spec.exposure_form = ExposureForm::joint;
  spec.y_terms = parse_term_list("A");
  const auto fp = fit_pipeline(d, spec);

  const auto m = empirical_observed_matrices(d);
  const auto emp = ate_by_reparameterization(m);
  for (const auto kind :
       {EstimatorKind::delta1, EstimatorKind::delta2, EstimatorKind::delta3,
        EstimatorKind::mle, EstimatorKind::mr}) {
    const auto rep = point_estimate(d, fp, kind);
    CHECK(rep.delta == Approx(emp.delta).margin(1e-8));
  }
  const auto red = reduction_check(d, fp, EstimateOptions{}, 1e-9);
  CHECK(red.max_gap < 1e-9);
}

TEST_CASE("EIF has exact mean zero at the true theta of a discrete law") {
  RngStream rng(404, 0);
  for (int rep = 0; rep < 5; ++rep) {
    const auto law = random_discrete_law(rng, 2, 2, 2, 2);
    const auto m = observed_matrices(law);
    const auto truth = ate_by_reparameterization(m);

    double e_conf = 0.0, e_bias = 0.0;
    for (int x = 0; x < law.num_x; ++x)
      for (int a = 0; a < 2; ++a)
        for (int z = 0; z < law.num_z; ++z)
          for (int w = 0; w < law.num_w; ++w) {
            ObsPrimitives p = primitives_from_law(law, m, x, a, z, w);
            double mass = law.p_x(x) * m.p_az[x](a, z);
            double pw = 0.0;  // P(w | a, z, x)
            Vector pu = law.p_u_given_zax(z, a, x);
            for (int u = 0; u < law.num_u; ++u)
              pw += pu(u) * law.p_w_given_ux[x](w, u);
            mass *= pw;
            e_conf += mass * eif_confounded(p);
            e_bias += mass * eif_bias(p);
          }
    CHECK(e_conf - truth.confounded == Approx(0.0).margin(1e-12));
    CHECK(e_bias - truth.bias == Approx(0.0).margin(1e-12));
    // centered EIF of Delta integrates to zero exactly
    CHECK((e_conf - truth.confounded) - (e_bias - truth.bias) ==
          Approx(0.0).margin(1e-12));
  }
}

TEST_CASE("binary and general EIF paths agree per observation at k=1") {
  RngStream rng(405, 0);
  const auto law = random_discrete_law(rng, 2, 2, 2, 2);
  const auto m = observed_matrices(law);
  for (int x = 0; x < law.num_x; ++x)
    for (int a = 0; a < 2; ++a)
      for (int z = 0; z < 2; ++z)
        for (int w = 0; w < 2; ++w) {
          ObsPrimitives p = primitives_from_law(law, m, x, a, z, w);
          // perturb y so the residuals are non-degenerate
          p.y = 0.37;
          const double scalar = eif_bias(p, ZeroMask{}, false);
          const double general = eif_bias(p, ZeroMask{}, true);
          CHECK(scalar == Approx(general).margin(1e-12));
        }
}

TEST_CASE("the two residual forms of the bias EIF term coincide under "
          "assembled models") {
  // y - E[Y|Z,A,X] - R(A,X)(w - E[W|A,Z,X]) equals the z0-baseline residual
  RngStream rng(406, 0);
  const auto law = random_discrete_law(rng, 2, 2, 2, 1);
  const auto m = observed_matrices(law);
  for (int a = 0; a < 2; ++a)
    for (int z = 0; z < 2; ++z)
      for (int w = 0; w < 2; ++w) {
        ObsPrimitives p = primitives_from_law(law, m, 0, a, z, w);
        p.y = 0.81;
        const double full = (p.y - p.ey(a, p.zc)) -
                            (p.r[a] * (p.gamma_w - p.ew(a, p.zc))).value();
        const double base = (p.y - p.ey0[a]) -
                            (p.r[a] * (p.gamma_w - p.ew0(a))).value();
        CHECK(full == Approx(base).margin(1e-12));
      }
}

TEST_CASE("saturated working models make all five estimators coincide") {
  DiscreteLaw law;
  Dataset d = law_sample(4000, 50, &law);
  const ModelSpec spec = saturated_spec();
  const auto fp = fit_pipeline(d, spec);

  const double d1 = point_estimate(d, fp, EstimatorKind::delta1).delta;
  const double d2 = point_estimate(d, fp, EstimatorKind::delta2).delta;
  const double d3 = point_estimate(d, fp, EstimatorKind::delta3).delta;
  const double dm = point_estimate(d, fp, EstimatorKind::mle).delta;
  const double dr = point_estimate(d, fp, EstimatorKind::mr).delta;
  CHECK(d1 == Approx(d2).margin(1e-9));
  CHECK(d1 == Approx(d3).margin(1e-9));
  CHECK(d1 == Approx(dm).margin(1e-9));
  CHECK(d1 == Approx(dr).margin(1e-9));

  // and they all equal the reparameterized functional of the empirical law
  const auto m = empirical_observed_matrices(d);
  const auto emp = ate_by_reparameterization(m);
  CHECK(d1 == Approx(emp.delta).margin(1e-9));
  const auto emp2 = ate_by_identification(m);
  CHECK(dm == Approx(emp2.delta).margin(1e-9));
}

TEST_CASE("report decomposition identity") {
  Dataset d = law_sample(2000, 51);
  const auto fp = fit_pipeline(d, saturated_spec());
  for (const auto kind :
       {EstimatorKind::delta1, EstimatorKind::delta2, EstimatorKind::delta3,
        EstimatorKind::mr}) {
    const auto rep = point_estimate(d, fp, kind);
    CHECK(rep.delta ==
          Approx(rep.confounded - rep.bias).margin(1e-12));
  }
}

TEST_CASE("bridge and reparameterized plug-in agree on assembled models") {
  // the Lemma-2 algebra is exact for any coherent model-implied tables
  Dataset d = law_sample(1500, 52);
  const auto fp = fit_pipeline(d, saturated_spec());
  const auto rep = point_estimate(d, fp, EstimatorKind::mle);
  CHECK(rep.delta == Approx(rep.confounded - rep.bias).margin(1e-12));
}

TEST_CASE("degenerate W zeroes the bias term of delta1") {
  Dataset d = law_sample(400, 53);
  const auto fp = fit_pipeline(d, saturated_spec());
  const NuisanceTheta theta = fp.theta_delta1();
  for (int i = 0; i < 50; ++i) {
    ObsPrimitives p = make_primitives(theta, d, i);
    p.gamma_w.setZero();  // as if W were identically its reference level
    const int z_obs = obs_z_index(p);
    const double ipw =
        (2.0 * p.a - 1.0) / p.f_a_given_z(p.a, z_obs) * p.y;
    CHECK(delta1_contribution(p) == Approx(ipw).margin(1e-14));
  }
}

TEST_CASE("reduction identities recover the single-model estimators") {
  Dataset d = law_sample(2500, 54);
  const auto fp = fit_pipeline(d, saturated_spec());
  const auto red = reduction_check(d, fp);
  CHECK(red.max_gap < 1e-10);
  CHECK(red.reduced_delta1 == Approx(red.delta1).margin(1e-10));
  CHECK(red.reduced_delta2 == Approx(red.delta2).margin(1e-10));
  CHECK(red.reduced_delta3 == Approx(red.delta3).margin(1e-10));

  // nothing zeroed gives the multiply robust estimate itself
  const int n = d.n();
  Vector v(n);
  const NuisanceTheta theta = fp.theta_mr();
  for (int i = 0; i < n; ++i) {
    const ObsPrimitives p = make_primitives(theta, d, i);
    v(i) = eif_confounded(p) - eif_bias(p);
  }
  CHECK(compensated_mean(v) == Approx(red.mr).margin(1e-12));
}

TEST_CASE("reduction identities also hold on non-saturated fits") {
  DgpSpec dgp;
  dgp.n = 3000;
  dgp.seed = 7;
  const auto gen = generate_dataset(dgp);
  const ModelSpec spec = scenario_model_specs(Scenario::all_correct);
  const auto fp = fit_pipeline(gen.data, spec);
  const auto red = reduction_check(gen.data, fp);
  CHECK(red.max_gap < 1e-10);
}

TEST_CASE("reference-level change leaves saturated estimates invariant") {
  DiscreteLaw law;
  Dataset d = law_sample(2500, 56, &law);
  const ModelSpec spec = saturated_spec();
  const auto fp = fit_pipeline(d, spec);
  const double base = point_estimate(d, fp, EstimatorKind::mr).delta;

  // flip both reference levels; only the coding indices change
  Dataset flipped = d;
  flipped.z_coding.reference = 1;
  flipped.w_coding.reference = 1;
  const auto fp2 = fit_pipeline(flipped, spec);
  for (const auto kind :
       {EstimatorKind::delta1, EstimatorKind::delta2, EstimatorKind::delta3,
        EstimatorKind::mle, EstimatorKind::mr}) {
    const double v = point_estimate(flipped, fp2, kind).delta;
    CHECK(v == Approx(base).margin(1e-9));
  }
}

TEST_CASE("weight truncation winsorizes the inverse weights") {
  DgpSpec dgp;
  dgp.n = 2000;
  dgp.seed = 58;
  const auto gen = generate_dataset(dgp);
  const Dataset& d = gen.data;
  const ModelSpec spec = scenario_model_specs(Scenario::all_correct);
  PipelineParts parts;
  parts.mr = parts.delta2 = parts.delta3 = false;
  parts.delta1 = true;
  const auto fp = fit_pipeline(d, spec, EstimateOptions{}, parts);

  EstimateOptions plain;
  EstimateOptions trunc;
  trunc.truncate_weights_quantile = 0.8;
  const auto rep_plain = point_estimate(d, fp, EstimatorKind::delta1, plain);
  const auto rep_trunc = point_estimate(d, fp, EstimatorKind::delta1, trunc);
  CHECK(rep_plain.delta != rep_trunc.delta);

  // hand-computed winsorized IPW-Y term
  std::vector<double> inv(d.n());
  const NuisanceTheta theta = fp.theta_delta1();
  for (int i = 0; i < d.n(); ++i) {
    const auto cells = theta.exposure->cells_at(d, i);
    inv[i] = 1.0 / cells.f_a_given_z(d.a[i], d.z[i]);
  }
  std::vector<double> sorted = inv;
  std::sort(sorted.begin(), sorted.end());
  const double cap =
      sorted[static_cast<size_t>(0.8 * (sorted.size() - 1) + 0.5)];
  double conf = 0.0;
  for (int i = 0; i < d.n(); ++i)
    conf += (2.0 * d.a[i] - 1.0) * std::min(inv[i], cap) * d.y(i);
  conf /= d.n();
  CHECK(rep_trunc.confounded == Approx(conf).margin(1e-12));

  // the stack uses the same truncation
  EstimatorStack stack(d, fp, EstimatorKind::delta1, trunc);
  CHECK(stack.delta_hat() == Approx(rep_trunc.delta).margin(1e-12));

  // quantile 1 disables truncation
  EstimateOptions off;
  off.truncate_weights_quantile = 1.0;
  CHECK(point_estimate(d, fp, EstimatorKind::delta1, off).delta ==
        rep_plain.delta);
}

TEST_CASE("density floor breach is reported with rows") {
  Dataset d = law_sample(800, 55);
  auto fp = fit_pipeline(d, saturated_spec());
  EstimateOptions opts;
  opts.density_floor = 0.9;  // absurd floor to force the error
  REQUIRE_THROWS_WITH(point_estimate(d, fp, EstimatorKind::delta1, opts),
                      Catch::Contains("density floor"));
}

TEST_CASE("no-confounding theta zeroes the bias EIF on average") {
  // degenerate U: no confounding at all; delta-contrast models set to zero,
  // R and xi arbitrary. The bias EIF terms must average to about zero.
  DgpSpec dgp;
  dgp.n = 20000;
  dgp.seed = 77;
  dgp.u_z = 0.0;
  dgp.u_az = 0.0;
  const auto gen = generate_dataset(dgp);
  const Dataset& d = gen.data;
  const ModelSpec spec = scenario_model_specs(Scenario::all_correct);
  const auto exposure = fit_joint_exposure(d, spec);
  const auto outcome = fit_baseline_outcome(d, spec);
  const auto nco = fit_baseline_nco(d, spec);
  ContrastSet c = ContrastSet::make(d, spec);
  c.xi0_coef(0, 0) = 0.3;   // arbitrary nonzero xi
  c.r0_coef(0, 0) = 0.1;    // arbitrary R
  c.r1_coef(0, 0) = 0.2;
  // delta0 and eta stay zero
  const NuisanceTheta theta{&exposure, &outcome, &nco, &c};
  Vector bias(d.n());
  for (int i = 0; i < d.n(); ++i) {
    const ObsPrimitives p = make_primitives(theta, d, i);
    // third displayed term is exactly zero pointwise
    CHECK((p.r[1 - p.a] * p.delta(p.zc)).value() == 0.0);
    bias(i) = eif_bias(p);
  }
  CHECK(std::abs(compensated_mean(bias)) < 0.02);
}
