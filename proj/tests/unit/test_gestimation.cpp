#include <catch2/catch.hpp>

#include "negctrl/gestimation.hpp"
#include "negctrl/identify.hpp"
#include "negctrl/simulate.hpp"

using namespace negctrl;

namespace {

/// Saturated spec for a single binary covariate.
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

Dataset law_sample(int n, uint64_t seed) {
  RngStream rng(seed, 0);
  const DiscreteLaw law = random_discrete_law(rng, 2, 2, 2, 2);
  RngStream srng(seed, 1);
  return sample_from_law(law, n, srng);
}

/// Frequency contrasts of the empirical law at stratum x in {0,1}.
struct FreqContrasts {
  double xi[2];     // xi^W_Z(a, x)
  double delta[2];  // delta^W_A(z, x)
  double xi_y[2];
  double r[2];
};

FreqContrasts freq_contrasts(const ObservedLawMatrices& m, int x) {
  FreqContrasts f{};
  for (int a = 0; a < 2; ++a) {
    f.xi[a] = m.w_given_z(a, x)(1, 1) - m.w_given_z(a, x)(1, 0);
    f.xi_y[a] = m.y_given_z(a, x)(1) - m.y_given_z(a, x)(0);
    f.r[a] = f.xi_y[a] / f.xi[a];
  }
  for (int z = 0; z < 2; ++z)
    f.delta[z] = m.w_given_z(1, x)(1, z) - m.w_given_z(0, x)(1, z);
  return f;
}

int first_row_at(const Dataset& d, double x) {
  for (int i = 0; i < d.n(); ++i)
    if (d.x(i, 0) == x) return i;
  return 0;
}

}  // namespace

TEST_CASE("default index function dimensions") {
  Dataset d = law_sample(200, 31);
  ModelSpec spec = saturated_spec();

  ContrastSet c = ContrastSet::make(d, spec);
  IndexFunctions idx = default_index_functions(c);
  // per level: delta(2) + xi(2) + eta(2) on [1, X1]
  CHECK(idx.g0_dim() == 6);
  CHECK(idx.g1_dim() == 4);  // r0(2) + r1(2)

  // intercept-only contrasts, eta absent: g0 = (a, z)
  ModelSpec small = spec;
  small.xi_terms = {};
  small.delta_terms = {};
  small.has_eta = false;
  small.r0_terms = {};
  small.has_r1 = true;
  small.r1_terms = {};
  ContrastSet c2 = ContrastSet::make(d, small);
  IndexFunctions idx2 = default_index_functions(c2);
  CHECK(idx2.g0_dim() == 2);
  const Vector g = idx2.w_gradient(d, 0, 1, 0);
  CHECK(g(0) == 1.0);  // a block
  CHECK(g(1) == 1.0);  // z block
  CHECK(idx2.g1_dim() == 2);  // R = b0 + b1 A
}

TEST_CASE("doubly robust W contrasts equal saturated frequency contrasts") {
  Dataset d = law_sample(4000, 32);
  const ModelSpec spec = saturated_spec();
  const auto exposure = fit_joint_exposure(d, spec);
  const auto baseline_w = fit_baseline_nco(d, spec);
  ContrastSet c = ContrastSet::make(d, spec);
  const IndexFunctions idx = default_index_functions(c);
  solve_w_contrasts(d, exposure, baseline_w, c, idx);

  const auto m = empirical_observed_matrices(d);
  for (int x = 0; x < 2; ++x) {
    const auto f = freq_contrasts(m, x);
    const int i = first_row_at(d, x);
    for (int a = 0; a < 2; ++a)
      CHECK(c.xi_at(d, i, a)(0, 0) == Approx(f.xi[a]).margin(1e-10));
    CHECK(c.delta_at(d, i, -1)(0) == Approx(f.delta[0]).margin(1e-10));
    CHECK(c.delta_at(d, i, 0)(0) == Approx(f.delta[1]).margin(1e-10));
  }
}

TEST_CASE("M2-route W contrasts agree on the saturated law") {
  Dataset d = law_sample(3000, 33);
  const ModelSpec spec = saturated_spec();
  const auto exposure = fit_joint_exposure(d, spec);
  ContrastSet c = ContrastSet::make(d, spec);
  const IndexFunctions idx = default_index_functions(c);
  gest_w_m2(d, exposure, c, idx);

  const auto m = empirical_observed_matrices(d);
  for (int x = 0; x < 2; ++x) {
    const auto f = freq_contrasts(m, x);
    const int i = first_row_at(d, x);
    for (int a = 0; a < 2; ++a)
      CHECK(c.xi_at(d, i, a)(0, 0) == Approx(f.xi[a]).margin(1e-10));
  }
}

TEST_CASE("all three R routes return the frequency ratio on a saturated law") {
  Dataset d = law_sample(4000, 34);
  const ModelSpec spec = saturated_spec();
  const auto exposure = fit_joint_exposure(d, spec);
  const auto baseline_y = fit_baseline_outcome(d, spec);
  const auto baseline_w = fit_baseline_nco(d, spec);

  ContrastSet dr = ContrastSet::make(d, spec);
  {
    const IndexFunctions idx = default_index_functions(dr);
    solve_w_contrasts(d, exposure, baseline_w, dr, idx);
    solve_r_contrast(d, exposure, baseline_y, baseline_w, dr, idx);
  }
  ContrastSet m1 = ContrastSet::make(d, spec);
  {
    const IndexFunctions idx = default_index_functions(m1);
    gest_r_m1(d, exposure, m1, idx);
  }
  const auto wmle = fit_w_model_mle(d, spec);
  ContrastSet m3 = wmle.contrasts;
  {
    const IndexFunctions idx = default_index_functions(m3);
    gest_r_m3(d, baseline_y, wmle.baseline, wmle.contrasts, m3, idx);
  }

  const auto m = empirical_observed_matrices(d);
  for (int x = 0; x < 2; ++x) {
    const auto f = freq_contrasts(m, x);
    const int i = first_row_at(d, x);
    for (int a = 0; a < 2; ++a) {
      CHECK(dr.r_at(d, i, a)(0) == Approx(f.r[a]).margin(1e-6));
      CHECK(m1.r_at(d, i, a)(0) == Approx(f.r[a]).margin(1e-6));
      CHECK(m3.r_at(d, i, a)(0) == Approx(f.r[a]).margin(1e-6));
    }
  }
}

TEST_CASE("joint additive W MLE reproduces saturated cell means") {
  Dataset d = law_sample(3000, 35);
  const ModelSpec spec = saturated_spec();
  const auto wmle = fit_w_model_mle(d, spec);
  const auto m = empirical_observed_matrices(d);
  for (int x = 0; x < 2; ++x) {
    const int i = first_row_at(d, x);
    for (int a = 0; a < 2; ++a)
      for (int z = 0; z < 2; ++z) {
        const int zc = z == 0 ? -1 : 0;
        const double fitted =
            wmle.baseline.predict_contrasts(d, i)(0) +
            wmle.contrasts.delta0_at(d, i)(0) * a +
            (zc >= 0 ? wmle.contrasts.xi_at(d, i, a)(0, 0) : 0.0);
        CHECK(fitted == Approx(m.w_given_z(a, x)(1, z)).margin(1e-7));
      }
  }
}

TEST_CASE("no unmeasured confounding drives the A-W contrast to zero") {
  DgpSpec dgp;
  dgp.n = 60000;
  dgp.seed = 99;
  dgp.w_shift = 0.0;  // W no longer responds to U: W indep A | (Z,X)
  const auto gen = generate_dataset(dgp);
  const ModelSpec spec = scenario_model_specs(Scenario::all_correct);
  const auto exposure = fit_joint_exposure(gen.data, spec);
  const auto baseline_w = fit_baseline_nco(gen.data, spec);
  ContrastSet c = ContrastSet::make(gen.data, spec);
  const IndexFunctions idx = default_index_functions(c);
  solve_w_contrasts(gen.data, exposure, baseline_w, c, idx);
  CHECK(std::abs(c.delta_at(gen.data, 0, -1)(0)) < 0.02);
  CHECK(std::abs(c.delta_at(gen.data, 0, 0)(0)) < 0.03);
}

TEST_CASE("Y independent of Z forces R to zero") {
  DgpSpec dgp;
  dgp.n = 60000;
  dgp.seed = 123;
  dgp.y_interaction = 0.0;  // xi_Y = 0 while W keeps its U link
  const auto gen = generate_dataset(dgp);
  const ModelSpec spec = scenario_model_specs(Scenario::all_correct);
  const auto exposure = fit_joint_exposure(gen.data, spec);
  ContrastSet c = ContrastSet::make(gen.data, spec);
  const IndexFunctions idx = default_index_functions(c);
  gest_r_m1(gen.data, exposure, c, idx);
  CHECK(std::abs(c.r_at(gen.data, 0, 0)(0)) < 0.03);
  CHECK(std::abs(c.r_at(gen.data, 0, 1)(0)) < 0.03);
}

TEST_CASE("constant W yields a singular system") {
  Dataset d = law_sample(500, 36);
  for (int i = 0; i < d.n(); ++i) d.w[i] = 0;
  const ModelSpec spec = saturated_spec();
  const auto exposure = fit_joint_exposure(d, spec);
  ContrastSet c = ContrastSet::make(d, spec);
  const IndexFunctions idx = default_index_functions(c);
  REQUIRE_THROWS_AS(gest_r_m1(d, exposure, c, idx), numeric_error);
}

TEST_CASE("centering orthogonality against arbitrary X functions") {
  Dataset d = law_sample(2500, 37);
  const ModelSpec spec = saturated_spec();
  const auto exposure = fit_joint_exposure(d, spec);
  ContrastSet c = ContrastSet::make(d, spec);
  const IndexFunctions idx = default_index_functions(c);

  auto m_of_x = [](double x) { return 0.7 - 1.3 * x + 0.4 * x * x; };
  const int q = idx.g0_dim();
  Vector acc = Vector::Zero(q);
  for (int i = 0; i < d.n(); ++i) {
    const auto cells = exposure_densities(exposure, d, i);
    Vector eg = Vector::Zero(q);
    for (int a = 0; a < 2; ++a)
      for (int z = 0; z < 2; ++z)
        eg += cells.f_az(a, z) *
              idx.w_gradient(d, i, a, d.z_coding.contrast_index(z));
    const Vector g0 =
        idx.w_gradient(d, i, d.a[i], d.z_coding.contrast_index(d.z[i]));
    acc += (g0 - eg) * m_of_x(d.x(i, 0));
  }
  acc /= d.n();
  CHECK(acc.cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("interaction restriction holds identically on a grid") {
  Dataset d = law_sample(2000, 38);
  const ModelSpec spec = saturated_spec();
  const auto exposure = fit_joint_exposure(d, spec);
  const auto baseline_w = fit_baseline_nco(d, spec);
  ContrastSet c = ContrastSet::make(d, spec);
  const IndexFunctions idx = default_index_functions(c);
  solve_w_contrasts(d, exposure, baseline_w, c, idx);

  for (int i = 0; i < 50; ++i)
    for (int a = 0; a < 2; ++a) {
      // eta(x) a z == [xi(a,x)-xi(0,x)] z == [delta(z,x)-delta(z0,x)] a
      const double eta = c.eta_at(d, i)(0, 0);
      const double lhs1 = c.xi_at(d, i, a)(0, 0) - c.xi_at(d, i, 0)(0, 0);
      const double lhs2 = c.delta_at(d, i, 0)(0) - c.delta_at(d, i, -1)(0);
      CHECK(lhs1 == Approx(eta * a).margin(1e-12));
      CHECK(lhs2 == Approx(eta).margin(1e-12));
    }
}

TEST_CASE("xi margin guard reports near-singular contrasts") {
  Dataset d = law_sample(800, 39);
  const ModelSpec spec = saturated_spec();
  ContrastSet c = ContrastSet::make(d, spec);  // xi identically zero
  REQUIRE_THROWS_WITH(check_xi_margin(c, d),
                      Catch::Contains("invertibility"));
}
