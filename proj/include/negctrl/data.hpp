#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "negctrl/common.hpp"
#include "negctrl/linalg.hpp"

namespace negctrl {

// ---------------------------------------------------------------------------
// Categorical codings
// ---------------------------------------------------------------------------

/// Ordered level set for a categorical variable plus the index of the
/// user-chosen reference level.
struct CategoricalCoding {
  std::vector<std::string> levels;
  int reference = 0;

  int size() const { return static_cast<int>(levels.size()); }

  /// Number of non-reference levels (the contrast dimension k).
  int k() const { return size() - 1; }

  void validate() const {
    require(!levels.empty(), "categorical coding has no levels");
    require(reference >= 0 && reference < size(),
            "reference index out of range");
    std::set<std::string> seen(levels.begin(), levels.end());
    require(static_cast<int>(seen.size()) == size(),
            "categorical levels are not distinct");
  }

  int index_of(const std::string& label) const {
    for (int i = 0; i < size(); ++i)
      if (levels[i] == label) return i;
    throw validation_error("unknown categorical level '" + label + "'");
  }

  /// Maps a level index to its contrast position 0..k-1, or -1 for the
  /// reference level. Non-reference levels keep their relative order.
  int contrast_index(int level) const {
    if (level == reference) return -1;
    return level < reference ? level : level - 1;
  }

  /// Inverse of contrast_index for non-reference positions.
  int level_of_contrast(int j) const {
    return j < reference ? j : j + 1;
  }
};

// ---------------------------------------------------------------------------
// Formula terms
// ---------------------------------------------------------------------------

/// A product term over covariate names, e.g. {"X7","X8"} for X7*X8.
/// The treatment column name is allowed as a factor where a model is a
/// function of both A and X (the baseline outcome model and, if wanted,
/// the factorized Z|A,X model).
struct Term {
  std::vector<std::string> factors;

  std::string label() const {
    std::string out;
    for (size_t i = 0; i < factors.size(); ++i) {
      if (i) out += "*";
      out += factors[i];
    }
    return out;
  }
};

inline std::vector<Term> parse_term_list(const std::string& text) {
  std::vector<Term> terms;
  std::string item;
  std::stringstream ss(text);
  while (std::getline(ss, item, ',')) {
    // trim whitespace
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b == std::string::npos) continue;
    item = item.substr(b, e - b + 1);
    Term t;
    std::string factor;
    std::stringstream fs(item);
    while (std::getline(fs, factor, '*')) {
      const auto fb = factor.find_first_not_of(" \t");
      const auto fe = factor.find_last_not_of(" \t");
      require(fb != std::string::npos, "empty factor in term '" + item + "'");
      t.factors.push_back(factor.substr(fb, fe - fb + 1));
    }
    terms.push_back(std::move(t));
  }
  return terms;
}

inline std::string format_term_list(const std::vector<Term>& terms) {
  std::string out;
  for (size_t i = 0; i < terms.size(); ++i) {
    if (i) out += ",";
    out += terms[i].label();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// One observed record (y, a, z, w, x). z and w are level indices into the
/// dataset codings.
struct ObservedSample {
  double y = 0.0;
  int a = 0;
  int z = 0;
  int w = 0;
  Vector x;
};

/// Immutable after construction; column storage for the covariates.
struct Dataset {
  Vector y;
  std::vector<int> a;
  std::vector<int> z;
  std::vector<int> w;
  Matrix x;  // n rows, p columns
  std::vector<std::string> covariate_names;
  CategoricalCoding z_coding;
  CategoricalCoding w_coding;

  // column names from the source schema, used in reports and formulas
  std::string outcome_name = "Y";
  std::string treatment_name = "A";
  std::string nce_name = "Z";
  std::string nco_name = "W";

  int n() const { return static_cast<int>(y.size()); }
  int p() const { return static_cast<int>(x.cols()); }

  ObservedSample sample(int i) const {
    return ObservedSample{y(i), a[i], z[i], w[i], x.row(i).transpose()};
  }

  int covariate_index(const std::string& name) const {
    for (size_t j = 0; j < covariate_names.size(); ++j)
      if (covariate_names[j] == name) return static_cast<int>(j);
    return -1;
  }

  void validate() const {
    require(n() >= 1, "dataset is empty");
    require(static_cast<int>(a.size()) == n() &&
                static_cast<int>(z.size()) == n() &&
                static_cast<int>(w.size()) == n() && x.rows() == n(),
            "dataset columns have inconsistent lengths");
    z_coding.validate();
    w_coding.validate();
    for (int i = 0; i < n(); ++i) {
      require(a[i] == 0 || a[i] == 1, "treatment not in {0,1} at row " +
                                          std::to_string(i + 1));
      require(z[i] >= 0 && z[i] < z_coding.size(),
              "NCE level out of range at row " + std::to_string(i + 1));
      require(w[i] >= 0 && w[i] < w_coding.size(),
              "NCO level out of range at row " + std::to_string(i + 1));
    }
  }

  bool y_is_binary() const {
    for (int i = 0; i < n(); ++i)
      if (y(i) != 0.0 && y(i) != 1.0) return false;
    return true;
  }
};

// ---------------------------------------------------------------------------
// Design construction
// ---------------------------------------------------------------------------

/// Resolved term: covariate column indices, with -1 standing for the
/// treatment indicator.
struct ResolvedTerm {
  std::vector<int> columns;
  bool uses_treatment = false;
};

inline ResolvedTerm resolve_term(const Term& term, const Dataset& data,
                                 bool allow_treatment) {
  ResolvedTerm rt;
  for (const auto& f : term.factors) {
    if (f == data.treatment_name || f == "A") {
      require(allow_treatment,
              "treatment factor '" + f + "' not allowed in this formula");
      rt.columns.push_back(-1);
      rt.uses_treatment = true;
      continue;
    }
    const int j = data.covariate_index(f);
    require(j >= 0, "unknown covariate name '" + f + "'");
    rt.columns.push_back(j);
  }
  return rt;
}

/// Design over covariates only: [1, term values...]. Pure function of
/// (x, terms); product terms are elementwise products.
inline Vector build_design(const Vector& x,
                           const std::vector<std::string>& names,
                           const std::vector<Term>& terms) {
  Vector d(1 + terms.size());
  d(0) = 1.0;
  for (size_t t = 0; t < terms.size(); ++t) {
    double v = 1.0;
    for (const auto& f : terms[t].factors) {
      int j = -1;
      for (size_t c = 0; c < names.size(); ++c)
        if (names[c] == f) { j = static_cast<int>(c); break; }
      require(j >= 0, "unknown covariate name '" + f + "'");
      v *= x(j);
    }
    d(1 + t) = v;
  }
  return d;
}

inline Vector build_design(const ObservedSample& s,
                           const std::vector<std::string>& names,
                           const std::vector<Term>& terms) {
  return build_design(s.x, names, terms);
}

/// Precompiled design over a dataset. When a term references the treatment,
/// rows can be evaluated at a forced treatment arm (needed for counterfactual
/// arms of the outcome model).
class CompiledDesign {
public:
  CompiledDesign() = default;

  CompiledDesign(const Dataset& data, const std::vector<Term>& terms,
                 bool allow_treatment) {
    labels_.push_back("(intercept)");
    for (const auto& t : terms) {
      resolved_.push_back(resolve_term(t, data, allow_treatment));
      labels_.push_back(t.label());
      uses_treatment_ |= resolved_.back().uses_treatment;
    }
    cols_ = 1 + static_cast<int>(resolved_.size());
  }

  int cols() const { return cols_; }
  bool uses_treatment() const { return uses_treatment_; }
  const std::vector<std::string>& labels() const { return labels_; }

  /// Row for observation i of `data` at its observed treatment value.
  Vector row(const Dataset& data, int i) const {
    return row_at(data, i, data.a[i]);
  }

  /// Row for observation i with the treatment factor forced to `a`.
  Vector row_at(const Dataset& data, int i, int a) const {
    Vector d(cols_);
    d(0) = 1.0;
    for (size_t t = 0; t < resolved_.size(); ++t) {
      double v = 1.0;
      for (int c : resolved_[t].columns)
        v *= (c < 0) ? static_cast<double>(a) : data.x(i, c);
      d(1 + t) = v;
    }
    return d;
  }

  /// Full design matrix at observed treatment values.
  Matrix matrix(const Dataset& data) const {
    Matrix m(data.n(), cols_);
    for (int i = 0; i < data.n(); ++i) m.row(i) = row(data, i).transpose();
    return m;
  }

  /// Full design matrix with the treatment factor forced to `a` everywhere.
  Matrix matrix_at(const Dataset& data, int a) const {
    Matrix m(data.n(), cols_);
    for (int i = 0; i < data.n(); ++i)
      m.row(i) = row_at(data, i, a).transpose();
    return m;
  }

private:
  std::vector<ResolvedTerm> resolved_;
  std::vector<std::string> labels_;
  int cols_ = 1;
  bool uses_treatment_ = false;
};

// ---------------------------------------------------------------------------
// Model specification
// ---------------------------------------------------------------------------

enum class ExposureForm {
  /// One multinomial logit over the 2|Z| joint (a,z) cells, reference (0,z0).
  joint,
  /// f(A|X) logistic times f(Z|A,X) multinomial with an A main effect.
  factorized
};

enum class OutcomeLink { automatic, logistic, identity };

/// Working-model index structure: one covariate term list per nuisance block.
/// The interaction block eta and the treatment slope of R can be dropped
/// entirely (that is how the misspecification scenarios restrict them).
struct ModelSpec {
  ExposureForm exposure_form = ExposureForm::factorized;
  std::vector<Term> exposure_terms;    // joint form, shared across cells
  std::vector<Term> exposure_a_terms;  // factorized: logit P(A=1|X)
  std::vector<Term> exposure_z_terms;  // factorized: Z|A,X (A main effect auto)

  std::vector<Term> y_terms;   // E[Y|Z=z0,A,X]; must include the A main effect
  OutcomeLink y_link = OutcomeLink::automatic;
  std::vector<Term> w0_terms;  // E[W|A=0,Z=z0,X]

  std::vector<Term> xi_terms;     // xi0(x)   = xi^W_Z(A=0, x) entries
  std::vector<Term> delta_terms;  // delta0(x) = delta^W_A(z0, x) entries
  std::vector<Term> eta_terms;    // eta(x) interaction entries
  bool has_eta = true;            // false => eta == 0 (constant contrasts)

  std::vector<Term> r0_terms;  // R(a,x) = r0(x) + a * r1(x)
  std::vector<Term> r1_terms;
  bool has_r1 = true;  // false => R free of A (constant-R misspecification)

  void validate(const Dataset& data) const {
    auto check = [&](const std::vector<Term>& terms, bool allow_a,
                     const char* which) {
      for (const auto& t : terms) {
        try {
          resolve_term(t, data, allow_a);
        } catch (const validation_error& e) {
          throw validation_error(std::string(e.what()) + " in " + which +
                                 " formula");
        }
      }
    };
    if (exposure_form == ExposureForm::joint) {
      check(exposure_terms, false, "exposure");
    } else {
      check(exposure_a_terms, false, "exposure-a");
      check(exposure_z_terms, true, "exposure-z");
    }
    check(y_terms, true, "y");
    bool has_a_main = false;
    for (const auto& t : y_terms)
      if (t.factors.size() == 1 &&
          (t.factors[0] == data.treatment_name || t.factors[0] == "A"))
        has_a_main = true;
    require(has_a_main,
            "the baseline outcome formula must include the treatment main "
            "effect");
    check(w0_terms, false, "w0");
    check(xi_terms, false, "xi");
    check(delta_terms, false, "delta");
    if (has_eta) check(eta_terms, false, "eta");
    check(r0_terms, false, "r0");
    if (has_r1) check(r1_terms, false, "r1");
  }
};

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

/// Column-role mapping for load_dataset.
struct CsvSchema {
  std::string outcome;
  std::string treatment;
  std::string nce;
  std::string nco;
  std::vector<std::string> covariates;
  std::optional<std::string> z_reference;  // level label; default first
  std::optional<std::string> w_reference;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    if (!cell.empty() && cell.back() == '\r') cell.pop_back();
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

inline double parse_double(const std::string& cell, int row,
                           const std::string& col) {
  require(!cell.empty(), "missing value at row " + std::to_string(row) +
                             ", column '" + col + "'");
  try {
    size_t used = 0;
    const double v = std::stod(cell, &used);
    require(used == cell.size() && std::isfinite(v),
            "unparseable cell '" + cell + "' at row " + std::to_string(row) +
                ", column '" + col + "'");
    return v;
  } catch (const validation_error&) {
    throw;
  } catch (...) {
    throw validation_error("unparseable cell '" + cell + "' at row " +
                           std::to_string(row) + ", column '" + col + "'");
  }
}

}  // namespace detail

/// Load a CSV file (header required, comma separated, '.' decimal point).
/// Z/W codings are inferred from the distinct values in lexicographic order;
/// the reference level is the first unless overridden in the schema.
inline Dataset load_dataset(const std::string& path, const CsvSchema& schema) {
  std::ifstream in(path);
  require(in.good(), "cannot open file '" + path + "'");

  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "empty file '" + path + "'");
  const auto header = detail::split_csv_line(line);

  auto col_of = [&](const std::string& name) {
    for (size_t j = 0; j < header.size(); ++j)
      if (header[j] == name) return static_cast<int>(j);
    throw validation_error("missing column '" + name + "' in '" + path + "'");
  };

  const int cy = col_of(schema.outcome);
  const int ca = col_of(schema.treatment);
  const int cz = col_of(schema.nce);
  const int cw = col_of(schema.nco);
  std::vector<int> cx;
  for (const auto& name : schema.covariates) cx.push_back(col_of(name));

  std::vector<double> ys;
  std::vector<int> as;
  std::vector<std::string> zs, ws;
  std::vector<double> xs;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    require(cells.size() >= header.size(),
            "row " + std::to_string(row) + " has " +
                std::to_string(cells.size()) + " cells, expected " +
                std::to_string(header.size()));
    ys.push_back(detail::parse_double(cells[cy], row, schema.outcome));
    const double av = detail::parse_double(cells[ca], row, schema.treatment);
    require(av == 0.0 || av == 1.0,
            "non-binary treatment '" + cells[ca] + "' at row " +
                std::to_string(row));
    as.push_back(static_cast<int>(av));
    require(!cells[cz].empty(), "missing value at row " + std::to_string(row) +
                                    ", column '" + schema.nce + "'");
    require(!cells[cw].empty(), "missing value at row " + std::to_string(row) +
                                    ", column '" + schema.nco + "'");
    zs.push_back(cells[cz]);
    ws.push_back(cells[cw]);
    for (size_t j = 0; j < cx.size(); ++j)
      xs.push_back(
          detail::parse_double(cells[cx[j]], row, schema.covariates[j]));
  }
  require(!ys.empty(), "no data rows in '" + path + "'");

  auto make_coding = [](const std::vector<std::string>& raw,
                        const std::optional<std::string>& ref) {
    std::set<std::string> uniq(raw.begin(), raw.end());
    CategoricalCoding coding;
    coding.levels.assign(uniq.begin(), uniq.end());  // lexicographic
    coding.reference = ref ? coding.index_of(*ref) : 0;
    return coding;
  };

  Dataset d;
  d.z_coding = make_coding(zs, schema.z_reference);
  d.w_coding = make_coding(ws, schema.w_reference);
  const int n = static_cast<int>(ys.size());
  const int p = static_cast<int>(schema.covariates.size());
  d.y = Eigen::Map<Vector>(ys.data(), n);
  d.a = std::move(as);
  d.z.resize(n);
  d.w.resize(n);
  for (int i = 0; i < n; ++i) {
    d.z[i] = d.z_coding.index_of(zs[i]);
    d.w[i] = d.w_coding.index_of(ws[i]);
  }
  d.x.resize(n, p);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < p; ++j) d.x(i, j) = xs[i * p + j];
  d.covariate_names = schema.covariates;
  d.outcome_name = schema.outcome;
  d.treatment_name = schema.treatment;
  d.nce_name = schema.nce;
  d.nco_name = schema.nco;
  d.validate();
  return d;
}

inline void save_dataset(const Dataset& data, const std::string& path) {
  std::ofstream out(path);
  require(out.good(), "cannot write file '" + path + "'");
  out << data.outcome_name << "," << data.treatment_name << ","
      << data.nce_name << "," << data.nco_name;
  for (const auto& c : data.covariate_names) out << "," << c;
  out << "\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  for (int i = 0; i < data.n(); ++i) {
    out << num(data.y(i)) << "," << data.a[i] << ","
        << data.z_coding.levels[data.z[i]] << ","
        << data.w_coding.levels[data.w[i]];
    for (int j = 0; j < data.p(); ++j) out << "," << num(data.x(i, j));
    out << "\n";
  }
  require(out.good(), "write failed for '" + path + "'");
}

}  // namespace negctrl
