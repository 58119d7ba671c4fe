#pragma once

#include <functional>
#include <string>
#include <vector>

#include "negctrl/common.hpp"
#include "negctrl/data.hpp"
#include "negctrl/linalg.hpp"
#include "negctrl/rng.hpp"

namespace negctrl {

// ---------------------------------------------------------------------------
// Exact finite laws
// ---------------------------------------------------------------------------

/// Exact joint distribution over (U, X, A, Z, W, Y-means) used by the
/// identification oracles. The latent-ignorability structure is built in:
/// P(w|u,x) does not depend on (a,z) and E[Y|a,u,x] does not depend on z.
struct DiscreteLaw {
  int num_u = 0, num_x = 0, num_z = 0, num_w = 0;
  Vector p_x;                    // num_x
  Matrix p_u_given_x;            // num_x rows, num_u cols
  std::vector<Matrix> p_az_given_ux;  // [x*num_u + u] -> 2 x num_z
  std::vector<Matrix> p_w_given_ux;   // [x] -> num_w x num_u
  std::vector<Matrix> e_y_given_aux;  // [x] -> 2 x num_u

  const Matrix& p_az_ux(int x, int u) const {
    return p_az_given_ux[static_cast<size_t>(x) * num_u + u];
  }

  void validate(double tol = 1e-9) const {
    require(num_u >= 1 && num_x >= 1 && num_z >= 2 && num_w >= 2,
            "law support sizes invalid");
    require(p_x.size() == num_x && std::abs(p_x.sum() - 1.0) < tol,
            "P(x) not normalized");
    require(p_u_given_x.rows() == num_x && p_u_given_x.cols() == num_u,
            "P(u|x) has wrong shape");
    for (int x = 0; x < num_x; ++x) {
      require(std::abs(p_u_given_x.row(x).sum() - 1.0) < tol,
              "P(u|x) not normalized");
      for (int u = 0; u < num_u; ++u)
        require(std::abs(p_az_ux(x, u).sum() - 1.0) < tol,
                "P(a,z|u,x) not normalized");
      for (int u = 0; u < num_u; ++u)
        require(std::abs(p_w_given_ux[x].col(u).sum() - 1.0) < tol,
                "P(w|u,x) not normalized");
    }
  }

  /// P(a,z | x), marginalizing over u.
  Matrix p_az_given_x(int x) const {
    Matrix out = Matrix::Zero(2, num_z);
    for (int u = 0; u < num_u; ++u)
      out += p_u_given_x(x, u) * p_az_ux(x, u);
    return out;
  }

  /// P(u | z, a, x) as a num_u vector.
  Vector p_u_given_zax(int z, int a, int x) const {
    Vector out(num_u);
    for (int u = 0; u < num_u; ++u)
      out(u) = p_u_given_x(x, u) * p_az_ux(x, u)(a, z);
    const double mass = out.sum();
    require_numeric(mass > 0.0, "zero-probability (a,z,x) cell in law");
    return out / mass;
  }

  /// E[Y | a, z, w, x], conditioning on all observables.
  double e_y_given_azwx(int a, int z, int w, int x) const {
    Vector pu = p_u_given_zax(z, a, x);
    double mass = 0.0, acc = 0.0;
    for (int u = 0; u < num_u; ++u) {
      const double q = pu(u) * p_w_given_ux[x](w, u);
      mass += q;
      acc += q * e_y_given_aux[x](a, u);
    }
    require_numeric(mass > 0.0, "zero-probability (a,z,w,x) cell in law");
    return acc / mass;
  }

  /// The latent-law ATE sum_{x,u} (E[Y|1,u,x]-E[Y|0,u,x]) P(u|x) P(x).
  double latent_ate() const {
    double acc = 0.0;
    for (int x = 0; x < num_x; ++x)
      for (int u = 0; u < num_u; ++u)
        acc += p_x(x) * p_u_given_x(x, u) *
               (e_y_given_aux[x](1, u) - e_y_given_aux[x](0, u));
    return acc;
  }
};

// ---------------------------------------------------------------------------
// Observed-law matrices
// ---------------------------------------------------------------------------

/// The observable ingredients of the identification functional, one stratum
/// per (a, x): P(W|Z,a,x), E[Y|Z,a,x], P(W|x), and the (a,z|x) cell masses.
struct ObservedLawMatrices {
  int num_x = 0, num_z = 0, num_w = 0;
  Vector p_x;
  std::vector<Matrix> p_w_given_z;   // [x*2 + a] -> num_w x num_z
  std::vector<RowVector> e_y_given_z;  // [x*2 + a] -> 1 x num_z
  std::vector<Vector> p_w_given_x;   // [x] -> num_w
  std::vector<Matrix> p_az;          // [x] -> 2 x num_z

  const Matrix& w_given_z(int a, int x) const {
    return p_w_given_z[static_cast<size_t>(x) * 2 + a];
  }
  const RowVector& y_given_z(int a, int x) const {
    return e_y_given_z[static_cast<size_t>(x) * 2 + a];
  }

  void validate(double tol = 1e-9) const {
    for (int x = 0; x < num_x; ++x) {
      for (int a = 0; a < 2; ++a)
        for (int z = 0; z < num_z; ++z)
          require(std::abs(w_given_z(a, x).col(z).sum() - 1.0) < tol,
                  "columns of P(W|Z,a,x) must sum to 1");
      require(std::abs(p_az[x].sum() - 1.0) < tol,
              "P(a,z|x) not normalized");
    }
  }
};

/// Exact marginalization of a latent law into its observed matrices,
/// P(W|Z,a,x) = P(W|U,x) P(U|Z,a,x).
inline ObservedLawMatrices observed_matrices(const DiscreteLaw& law) {
  law.validate();
  ObservedLawMatrices m;
  m.num_x = law.num_x;
  m.num_z = law.num_z;
  m.num_w = law.num_w;
  m.p_x = law.p_x;
  m.p_w_given_z.resize(static_cast<size_t>(law.num_x) * 2);
  m.e_y_given_z.resize(static_cast<size_t>(law.num_x) * 2);
  m.p_w_given_x.resize(law.num_x);
  m.p_az.resize(law.num_x);
  for (int x = 0; x < law.num_x; ++x) {
    m.p_az[x] = law.p_az_given_x(x);
    m.p_w_given_x[x] = law.p_w_given_ux[x] *
                       law.p_u_given_x.row(x).transpose();
    for (int a = 0; a < 2; ++a) {
      Matrix u_given_z(law.num_u, law.num_z);  // P(U|Z,a,x)
      RowVector y_given_u = law.e_y_given_aux[x].row(a);
      for (int z = 0; z < law.num_z; ++z)
        u_given_z.col(z) = law.p_u_given_zax(z, a, x);
      m.p_w_given_z[static_cast<size_t>(x) * 2 + a] =
          law.p_w_given_ux[x] * u_given_z;
      m.e_y_given_z[static_cast<size_t>(x) * 2 + a] = y_given_u * u_given_z;
    }
  }
  m.validate();
  return m;
}

// ---------------------------------------------------------------------------
// Rank diagnosis and bridge solving
// ---------------------------------------------------------------------------

/// rank(P(W|Z,a,x)) equals |U| under the full-rank factor condition, so the
/// maximal numerical rank across (a,x) strata estimates the latent
/// cardinality.
inline int infer_latent_cardinality(const ObservedLawMatrices& m,
                                    double tol = 1e-8) {
  int best = 0;
  bool any_nonzero = false;
  for (int x = 0; x < m.num_x; ++x)
    for (int a = 0; a < 2; ++a) {
      const Matrix& p = m.w_given_z(a, x);
      if (p.cwiseAbs().maxCoeff() > 0.0) any_nonzero = true;
      best = std::max(best, numerical_rank(p, tol));
    }
  require_numeric(any_nonzero, "all-zero P(W|Z,a,x) matrices");
  return best;
}

enum class BridgeSolver { exact_inverse, pseudoinverse };

/// 1 x |W| row h(a,x) with E[Y|Z,a,x] = h(a,x) P(W|Z,a,x).
struct BridgeVector {
  RowVector h;
  BridgeSolver solver = BridgeSolver::exact_inverse;
  double residual = 0.0;  // max-abs residual of the linear system
};

/// Solve the bridge system for one (a,x) stratum. Square full-rank systems
/// use an exact solve; rectangular or rank-deficient systems fall back to
/// the minimum-norm pseudoinverse solution. An inconsistent system (residual
/// above tolerance) signals a violation of the identification conditions in
/// the inputs.
inline BridgeVector solve_bridge(const ObservedLawMatrices& m, int a, int x,
                                 double rank_tol = 1e-8,
                                 double residual_tol = 1e-8) {
  const Matrix& p = m.w_given_z(a, x);
  const RowVector& ey = m.y_given_z(a, x);
  BridgeVector out;
  const bool square = p.rows() == p.cols();
  const int rank = numerical_rank(p, rank_tol);
  if (square && rank == p.rows()) {
    out.solver = BridgeSolver::exact_inverse;
    out.h = p.transpose().partialPivLu().solve(ey.transpose()).transpose();
  } else {
    out.solver = BridgeSolver::pseudoinverse;
    out.h = ey * pseudo_inverse(p, rank_tol);
  }
  out.residual = (ey - out.h * p).cwiseAbs().maxCoeff();
  require_numeric(out.residual < residual_tol,
                  "inconsistent bridge system at (a=" + std::to_string(a) +
                      ", x=" + std::to_string(x) + "), residual " +
                      std::to_string(out.residual) +
                      "; identification conditions violated");
  return out;
}

// ---------------------------------------------------------------------------
// The two ATE functionals
// ---------------------------------------------------------------------------

struct IdentifiedAte {
  double delta = 0.0;
  double ey1 = 0.0;
  double ey0 = 0.0;
};

/// E[Y(a)] = sum_x h(a,x) P(W|x) P(x); Delta = E[Y(1)] - E[Y(0)].
inline IdentifiedAte ate_by_identification(const ObservedLawMatrices& m,
                                           double rank_tol = 1e-8) {
  IdentifiedAte out;
  for (int x = 0; x < m.num_x; ++x) {
    const double ey1 =
        (solve_bridge(m, 1, x, rank_tol).h * m.p_w_given_x[x]).value();
    const double ey0 =
        (solve_bridge(m, 0, x, rank_tol).h * m.p_w_given_x[x]).value();
    out.ey1 += m.p_x(x) * ey1;
    out.ey0 += m.p_x(x) * ey0;
  }
  out.delta = out.ey1 - out.ey0;
  return out;
}

struct ReparameterizedAte {
  double delta = 0.0;
  double confounded = 0.0;
  double bias = 0.0;
};

namespace detail {

/// Contrast pieces of one (a,x) stratum relative to the reference levels
/// z0 = 0, w0 = 0 of the matrices' own ordering.
struct StratumContrasts {
  Matrix xi_w;     // k x k, xi^{w_i}_{z_j}(a,x)
  RowVector xi_y;  // 1 x k
  Vector delta_w_by_z(const Matrix& w1, const Matrix& w0, int z) {
    return w1.col(z) - w0.col(z);
  }
};

inline StratumContrasts stratum_contrasts(const ObservedLawMatrices& m, int a,
                                          int x) {
  const int k = m.num_z - 1;
  const Matrix& pw = m.w_given_z(a, x);
  const RowVector& ey = m.y_given_z(a, x);
  StratumContrasts c;
  c.xi_w.resize(k, k);
  c.xi_y.resize(k);
  for (int j = 0; j < k; ++j) {
    c.xi_y(j) = ey(j + 1) - ey(0);
    for (int i = 0; i < k; ++i)
      c.xi_w(i, j) = pw(i + 1, j + 1) - pw(i + 1, 0);
  }
  return c;
}

}  // namespace detail

/// Delta = Delta_confounded - Delta_bias with
/// Delta_confounded = E[delta^Y_A(Z,X)] and
/// Delta_bias = E[R(1-A,X) delta^W_A(Z,X)], R = xi_Y' xi_W^{-1}.
/// Requires square matrices (|Z| = |W|) and invertible xi_W(a,x).
inline ReparameterizedAte ate_by_reparameterization(
    const ObservedLawMatrices& m, double xi_floor = 1e-10) {
  require(m.num_z == m.num_w,
          "reparameterized functional needs |Z| == |W| (coarsen first)");
  const int k = m.num_z - 1;
  ReparameterizedAte out;
  for (int x = 0; x < m.num_x; ++x) {
    auto c1 = detail::stratum_contrasts(m, 1, x);
    auto c0 = detail::stratum_contrasts(m, 0, x);
    // delta^W contrasts per z; a stratum with no A-W association
    // contributes zero bias without needing an invertible xi (the
    // no-unmeasured-confounding limit)
    Matrix dw(k, m.num_z);
    double dw_mass = 0.0;
    for (int z = 0; z < m.num_z; ++z)
      for (int i = 0; i < k; ++i) {
        dw(i, z) = m.w_given_z(1, x)(i + 1, z) - m.w_given_z(0, x)(i + 1, z);
        dw_mass = std::max(dw_mass, std::abs(dw(i, z)));
      }
    for (int a = 0; a < 2; ++a) {
      const auto& c_other = (a == 1) ? c0 : c1;  // contrasts at 1-a
      RowVector r_other = RowVector::Zero(k);
      if (dw_mass > 1e-12) {
        const double sv = smallest_singular_value(c_other.xi_w);
        require_numeric(sv > xi_floor,
                        "xi^W_Z(a,x) is numerically singular (min singular "
                        "value " + std::to_string(sv) +
                            "); invertibility assumption violated");
        r_other = c_other.xi_w.transpose()
                      .partialPivLu()
                      .solve(c_other.xi_y.transpose())
                      .transpose();  // R(1-a, x)
      }
      for (int z = 0; z < m.num_z; ++z) {
        const double mass = m.p_az[x](a, z) * m.p_x(x);
        if (mass == 0.0) continue;
        const double dy = m.y_given_z(1, x)(z) - m.y_given_z(0, x)(z);
        out.confounded += mass * dy;
        out.bias += mass * (r_other * dw.col(z)).value();
      }
    }
  }
  out.delta = out.confounded - out.bias;
  return out;
}

// ---------------------------------------------------------------------------
// Coarsening enumeration
// ---------------------------------------------------------------------------

/// Maps from original level index to coarsened block index, for Z and W.
struct CoarseningPair {
  std::vector<int> z_map;
  std::vector<int> w_map;
  int blocks = 0;
};

namespace detail {

/// All set partitions of {0..n-1} into exactly `blocks` blocks, as
/// restricted-growth strings in deterministic order.
inline std::vector<std::vector<int>> partitions_into(int n, int blocks) {
  std::vector<std::vector<int>> out;
  std::vector<int> assign(n, 0);
  std::function<void(int, int)> rec = [&](int i, int used) {
    if (n - i < blocks - used) return;  // cannot reach the block count
    if (i == n) {
      if (used == blocks) out.push_back(assign);
      return;
    }
    for (int b = 0; b < std::min(used + 1, blocks); ++b) {
      assign[i] = b;
      rec(i + 1, std::max(used, b + 1));
    }
  };
  rec(0, 0);
  return out;
}

}  // namespace detail

/// All paired coarsenings of the Z and W level sets into exactly
/// target_k_plus_1 blocks (Cartesian product of the two partition lists).
inline std::vector<CoarseningPair> enumerate_coarsenings(
    const CategoricalCoding& z_coding, const CategoricalCoding& w_coding,
    int target_k_plus_1) {
  require(target_k_plus_1 >= 2, "coarsening target must be at least 2");
  require(target_k_plus_1 <= std::min(z_coding.size(), w_coding.size()),
          "coarsening target exceeds available levels");
  const auto zparts = detail::partitions_into(z_coding.size(), target_k_plus_1);
  const auto wparts = detail::partitions_into(w_coding.size(), target_k_plus_1);
  std::vector<CoarseningPair> out;
  out.reserve(zparts.size() * wparts.size());
  for (const auto& zp : zparts)
    for (const auto& wp : wparts)
      out.push_back(CoarseningPair{zp, wp, target_k_plus_1});
  return out;
}

/// Coarsened copy of an exact law: Z cells and W rows are summed within
/// blocks; the latent structure is untouched.
inline DiscreteLaw apply_coarsening(const DiscreteLaw& law,
                                    const CoarseningPair& pair) {
  require(static_cast<int>(pair.z_map.size()) == law.num_z &&
              static_cast<int>(pair.w_map.size()) == law.num_w,
          "coarsening maps do not match the law supports");
  DiscreteLaw out = law;
  out.num_z = pair.blocks;
  out.num_w = pair.blocks;
  for (int x = 0; x < law.num_x; ++x) {
    for (int u = 0; u < law.num_u; ++u) {
      Matrix paz = Matrix::Zero(2, pair.blocks);
      const Matrix& src = law.p_az_ux(x, u);
      for (int a = 0; a < 2; ++a)
        for (int z = 0; z < law.num_z; ++z)
          paz(a, pair.z_map[z]) += src(a, z);
      out.p_az_given_ux[static_cast<size_t>(x) * law.num_u + u] = paz;
    }
    Matrix pw = Matrix::Zero(pair.blocks, law.num_u);
    for (int w = 0; w < law.num_w; ++w)
      pw.row(pair.w_map[w]) += law.p_w_given_ux[x].row(w);
    out.p_w_given_ux[x] = pw;
  }
  out.validate();
  return out;
}

/// Coarsened copy of a dataset. Block labels join the member level labels;
/// the new reference is the block containing the old reference level.
inline Dataset apply_coarsening(const Dataset& data,
                                const CoarseningPair& pair) {
  require(static_cast<int>(pair.z_map.size()) == data.z_coding.size() &&
              static_cast<int>(pair.w_map.size()) == data.w_coding.size(),
          "coarsening maps do not match the dataset codings");
  auto coarsen = [&](const CategoricalCoding& coding,
                     const std::vector<int>& map) {
    CategoricalCoding out;
    out.levels.resize(pair.blocks);
    for (int l = 0; l < coding.size(); ++l) {
      auto& label = out.levels[map[l]];
      if (!label.empty()) label += "+";
      label += coding.levels[l];
    }
    out.reference = map[coding.reference];
    return out;
  };
  Dataset out = data;
  out.z_coding = coarsen(data.z_coding, pair.z_map);
  out.w_coding = coarsen(data.w_coding, pair.w_map);
  for (int i = 0; i < data.n(); ++i) {
    out.z[i] = pair.z_map[data.z[i]];
    out.w[i] = pair.w_map[data.w[i]];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Random laws and sampling (oracle fixtures)
// ---------------------------------------------------------------------------

/// Random law with full-rank factors and a positivity floor, for the
/// identification oracle tests. Rejection-samples until the observed
/// xi^W_Z contrast matrices are comfortably invertible.
inline DiscreteLaw random_discrete_law(RngStream& rng, int num_u, int num_z,
                                       int num_w, int num_x,
                                       double prob_floor = 0.05,
                                       double xi_min_sv = 5e-3) {
  auto simplex = [&](int dim) {
    Vector v(dim);
    double s = 0.0;
    for (int i = 0; i < dim; ++i) {
      v(i) = prob_floor + rng.uniform();
      s += v(i);
    }
    return Vector(v / s);
  };
  for (int attempt = 0; attempt < 1000; ++attempt) {
    DiscreteLaw law;
    law.num_u = num_u;
    law.num_x = num_x;
    law.num_z = num_z;
    law.num_w = num_w;
    law.p_x = simplex(num_x);
    law.p_u_given_x.resize(num_x, num_u);
    law.p_az_given_ux.resize(static_cast<size_t>(num_x) * num_u);
    law.p_w_given_ux.resize(num_x);
    law.e_y_given_aux.resize(num_x);
    for (int x = 0; x < num_x; ++x) {
      law.p_u_given_x.row(x) = simplex(num_u).transpose();
      law.p_w_given_ux[x].resize(num_w, num_u);
      for (int u = 0; u < num_u; ++u)
        law.p_w_given_ux[x].col(u) = simplex(num_w);
      law.e_y_given_aux[x].resize(2, num_u);
      for (int a = 0; a < 2; ++a)
        for (int u = 0; u < num_u; ++u)
          law.e_y_given_aux[x](a, u) = rng.uniform();
      for (int u = 0; u < num_u; ++u) {
        Vector cells = simplex(2 * num_z);
        Matrix pz(2, num_z);
        for (int a = 0; a < 2; ++a)
          for (int z = 0; z < num_z; ++z) pz(a, z) = cells(a * num_z + z);
        law.p_az_given_ux[static_cast<size_t>(x) * num_u + u] = pz;
      }
    }
    // accept only laws whose factors are solidly full rank and, when the
    // matrices are square, whose xi^W_Z contrasts are invertible
    bool ok = true;
    auto m = observed_matrices(law);
    for (int x = 0; x < num_x && ok; ++x) {
      if (numerical_rank(law.p_w_given_ux[x], 1e-6) < num_u) ok = false;
      for (int a = 0; a < 2 && ok; ++a) {
        Matrix u_given_z(num_u, num_z);
        for (int z = 0; z < num_z; ++z)
          u_given_z.col(z) = law.p_u_given_zax(z, a, x);
        if (numerical_rank(u_given_z, 1e-6) < num_u) ok = false;
        // xi^W_Z can only be invertible when |U| matches the contrast size
        if (num_z == num_w && num_u == num_z) {
          auto c = detail::stratum_contrasts(m, a, x);
          if (smallest_singular_value(c.xi_w) < xi_min_sv) ok = false;
        }
      }
    }
    if (ok) return law;
  }
  throw numeric_error("failed to generate a valid random law");
}

/// Draw n observations from a law. X support points are mapped to covariate
/// vectors via `x_value`, default the level index as a single covariate.
inline Dataset sample_from_law(
    const DiscreteLaw& law, int n, RngStream& rng,
    const std::function<Vector(int)>& x_value = nullptr) {
  auto xval = x_value ? x_value : [](int x) {
    Vector v(1);
    v(0) = static_cast<double>(x);
    return v;
  };
  const int p = static_cast<int>(xval(0).size());
  Dataset d;
  d.y.resize(n);
  d.a.resize(n);
  d.z.resize(n);
  d.w.resize(n);
  d.x.resize(n, p);
  for (int lev = 0; lev < law.num_z; ++lev)
    d.z_coding.levels.push_back("z" + std::to_string(lev));
  for (int lev = 0; lev < law.num_w; ++lev)
    d.w_coding.levels.push_back("w" + std::to_string(lev));
  d.covariate_names.resize(p);
  for (int j = 0; j < p; ++j) d.covariate_names[j] = "X" + std::to_string(j + 1);
  for (int i = 0; i < n; ++i) {
    auto draw = [&](const Vector& probs) {
      double u = rng.uniform(), acc = 0.0;
      for (int c = 0; c < probs.size(); ++c) {
        acc += probs(c);
        if (u < acc) return c;
      }
      return static_cast<int>(probs.size()) - 1;
    };
    const int x = draw(law.p_x);
    const int u = draw(law.p_u_given_x.row(x).transpose());
    const Matrix& paz = law.p_az_ux(x, u);
    Vector cells(2 * law.num_z);
    for (int a = 0; a < 2; ++a)
      for (int z = 0; z < law.num_z; ++z) cells(a * law.num_z + z) = paz(a, z);
    const int cell = draw(cells);
    const int a = cell / law.num_z;
    const int z = cell % law.num_z;
    const int w = draw(law.p_w_given_ux[x].col(u));
    d.a[i] = a;
    d.z[i] = z;
    d.w[i] = w;
    d.y(i) = rng.bernoulli(law.e_y_given_aux[x](a, u)) ? 1.0 : 0.0;
    d.x.row(i) = xval(x).transpose();
  }
  d.validate();
  return d;
}

/// Empirical observed matrices from a dataset with discrete covariates:
/// strata are the distinct covariate rows, cell means are frequencies.
inline ObservedLawMatrices empirical_observed_matrices(const Dataset& data) {
  // strata ordered by sorted covariate value, not first appearance
  std::map<std::vector<double>, int> strata;
  for (int i = 0; i < data.n(); ++i) {
    std::vector<double> key(data.p());
    for (int j = 0; j < data.p(); ++j) key[j] = data.x(i, j);
    strata.emplace(key, 0);
  }
  int next_id = 0;
  for (auto& [key, id] : strata) id = next_id++;
  std::vector<int> stratum_of(data.n());
  for (int i = 0; i < data.n(); ++i) {
    std::vector<double> key(data.p());
    for (int j = 0; j < data.p(); ++j) key[j] = data.x(i, j);
    stratum_of[i] = strata.at(key);
  }
  const int nx = static_cast<int>(strata.size());
  const int nz = data.z_coding.size();
  const int nw = data.w_coding.size();

  ObservedLawMatrices m;
  m.num_x = nx;
  m.num_z = nz;
  m.num_w = nw;
  m.p_x = Vector::Zero(nx);
  m.p_az.assign(nx, Matrix::Zero(2, nz));
  m.p_w_given_x.assign(nx, Vector::Zero(nw));
  m.p_w_given_z.assign(static_cast<size_t>(nx) * 2, Matrix::Zero(nw, nz));
  m.e_y_given_z.assign(static_cast<size_t>(nx) * 2, RowVector::Zero(nz));

  std::vector<Matrix> counts(static_cast<size_t>(nx) * 2, Matrix::Zero(nw, nz));
  std::vector<Matrix> ysum(static_cast<size_t>(nx) * 2, Matrix::Zero(1, nz));
  for (int i = 0; i < data.n(); ++i) {
    const int s = stratum_of[i];
    const size_t sa = static_cast<size_t>(s) * 2 + data.a[i];
    m.p_x(s) += 1.0;
    m.p_az[s](data.a[i], data.z[i]) += 1.0;
    m.p_w_given_x[s](data.w[i]) += 1.0;
    counts[sa](data.w[i], data.z[i]) += 1.0;
    ysum[sa](0, data.z[i]) += data.y(i);
  }
  for (int s = 0; s < nx; ++s) {
    const double nstr = m.p_x(s);
    m.p_w_given_x[s] /= nstr;
    m.p_az[s] /= nstr;
    for (int a = 0; a < 2; ++a) {
      const size_t sa = static_cast<size_t>(s) * 2 + a;
      for (int z = 0; z < nz; ++z) {
        const double cell_n = counts[sa].col(z).sum();
        require_numeric(cell_n > 0.0,
                        "empty (a,z) cell in stratum " + std::to_string(s));
        m.p_w_given_z[sa].col(z) = counts[sa].col(z) / cell_n;
        m.e_y_given_z[sa](z) = ysum[sa](0, z) / cell_n;
      }
    }
  }
  m.p_x /= static_cast<double>(data.n());
  return m;
}

}  // namespace negctrl
