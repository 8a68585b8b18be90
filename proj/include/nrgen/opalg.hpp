#pragma once

#include "nrgen/rng.hpp"
#include "nrgen/statespace.hpp"

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include <algorithm>
#include <istream>
#include <string>
#include <vector>

namespace nrgen {

using SpMat = Eigen::SparseMatrix<double, Eigen::RowMajor>;
using Triplet = Eigen::Triplet<double>;
using json = nlohmann::json;

class NonErgodicError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InfeasibleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LinOp {
  SpacePtr space;
  SpMat matrix;
  std::string label;

  LinOp() = default;
  LinOp(SpacePtr s, SpMat m, std::string lbl = "")
      : space(std::move(s)), matrix(std::move(m)), label(std::move(lbl)) {
    if (!space) throw std::invalid_argument("LinOp: missing space");
    if (matrix.rows() != space->size() || matrix.cols() != space->size())
      throw std::invalid_argument("LinOp: matrix shape does not match space");
    matrix.makeCompressed();
    for (Eigen::Index k = 0; k < matrix.nonZeros(); ++k)
      if (!std::isfinite(matrix.valuePtr()[k]))
        throw std::invalid_argument("LinOp: non-finite entry");
  }

  static LinOp from_dense(SpacePtr s, const Eigen::MatrixXd& m, std::string lbl = "") {
    return LinOp(std::move(s), m.sparseView(0.0, 0.0), std::move(lbl));
  }

  static LinOp zero(SpacePtr s, std::string lbl = "0") {
    SpMat m(s->size(), s->size());
    return LinOp(std::move(s), m, std::move(lbl));
  }

  int size() const { return static_cast<int>(matrix.rows()); }
  Vec apply(const Vec& f) const { return matrix * f; }
  ScalarField apply(const ScalarField& f) const {
    require_same_space(space, f.space, "LinOp::apply");
    return ScalarField(space, matrix * f.values);
  }

  // Max absolute row sum.
  double norm_inf() const {
    double best = 0.0;
    for (int i = 0; i < matrix.outerSize(); ++i) {
      double r = 0.0;
      for (SpMat::InnerIterator it(matrix, i); it; ++it) r += std::abs(it.value());
      best = std::max(best, r);
    }
    return best;
  }

  double max_abs_entry() const {
    double best = 0.0;
    for (Eigen::Index k = 0; k < matrix.nonZeros(); ++k)
      best = std::max(best, std::abs(matrix.valuePtr()[k]));
    return best;
  }

  Eigen::MatrixXd dense() const { return Eigen::MatrixXd(matrix); }

  LinOp operator+(const LinOp& o) const {
    require_same_space(space, o.space, "LinOp::+");
    return LinOp(space, SpMat(matrix + o.matrix), label + "+" + o.label);
  }
  LinOp operator-(const LinOp& o) const {
    require_same_space(space, o.space, "LinOp::-");
    return LinOp(space, SpMat(matrix - o.matrix), label + "-" + o.label);
  }
  LinOp operator*(const LinOp& o) const {
    require_same_space(space, o.space, "LinOp::*");
    return LinOp(space, SpMat(matrix * o.matrix), label + "*" + o.label);
  }
  LinOp scaled(double c) const { return LinOp(space, SpMat(c * matrix), label); }
};

inline SpMat diagonal_matrix(const Vec& d) {
  SpMat m(d.size(), d.size());
  m.reserve(Eigen::VectorXi::Constant(d.size(), 1));
  for (Eigen::Index i = 0; i < d.size(); ++i) m.insert(i, i) = d[i];
  m.makeCompressed();
  return m;
}

inline LinOp multiplication_op(const SpacePtr& s, const Vec& d, std::string lbl = "diag") {
  return LinOp(s, diagonal_matrix(d), std::move(lbl));
}

// Max |(L 1)_i|, the constant-annihilation defect of a generator.
inline double constant_defect(const LinOp& L) {
  return (L.matrix * Vec::Ones(L.size())).cwiseAbs().maxCoeff();
}

inline bool is_generator(const LinOp& L, double rel_tol = 1e-12) {
  return constant_defect(L) <= rel_tol * std::max(1.0, L.norm_inf());
}

// L' = D_w^{-1} L^T D_w.
inline LinOp adjoint_l2(const LinOp& L) {
  const Vec& w = L.space->weights();
  SpMat t = SpMat(L.matrix.transpose());
  for (int i = 0; i < t.outerSize(); ++i)
    for (SpMat::InnerIterator it(t, i); it; ++it) it.valueRef() *= w[it.col()] / w[i];
  return LinOp(L.space, t, L.label + "'");
}

// L* = D_mu^{-1} D_w^{-1} L^T D_w D_mu.
inline LinOp adjoint_l2mu(const LinOp& L, const Density& mu) {
  require_same_space(L.space, mu.space, "adjoint_l2mu");
  require_positive(mu, "adjoint_l2mu");
  const Vec& w = L.space->weights();
  SpMat t = SpMat(L.matrix.transpose());
  for (int i = 0; i < t.outerSize(); ++i)
    for (SpMat::InnerIterator it(t, i); it; ++it) {
      const int j = static_cast<int>(it.col());
      it.valueRef() *= (w[j] * mu.values[j]) / (w[i] * mu.values[i]);
    }
  return LinOp(L.space, t, L.label + "*");
}

struct SymAntisym {
  LinOp sym;
  LinOp antisym;
};

inline SymAntisym split_sym_antisym(const LinOp& L, const Density& mu) {
  const LinOp Ls = adjoint_l2mu(L, mu);
  SymAntisym out{LinOp(L.space, SpMat(0.5 * (L.matrix + Ls.matrix)), L.label + "_s"),
                 LinOp(L.space, SpMat(0.5 * (L.matrix - Ls.matrix)), L.label + "_a")};
  return out;
}

// Index map with sigma(sigma(i)) = i and equal weights at paired indices.
struct Involution {
  SpacePtr space;
  std::vector<int> perm;

  Involution() = default;
  Involution(SpacePtr s, std::vector<int> p) : space(std::move(s)), perm(std::move(p)) {
    if (!space || static_cast<int>(perm.size()) != space->size())
      throw std::invalid_argument("Involution: size does not match space");
    const Vec& w = space->weights();
    for (int i = 0; i < space->size(); ++i) {
      const int j = perm[i];
      if (j < 0 || j >= space->size() || perm[j] != i)
        throw std::invalid_argument("Involution: map is not an involution");
      if (std::abs(w[j] - w[i]) > 1e-14 * w[i])
        throw std::invalid_argument("Involution: map is not volume preserving");
    }
  }

  static Involution identity(const SpacePtr& s) {
    std::vector<int> p(s->size());
    for (int i = 0; i < s->size(); ++i) p[i] = i;
    return Involution(s, p);
  }

  // (F_# f)(i) = f(sigma(i)); volume preservation makes this the pushforward
  // for densities too.
  Vec apply(const Vec& f) const {
    Vec out(f.size());
    for (Eigen::Index i = 0; i < f.size(); ++i) out[i] = f[perm[i]];
    return out;
  }

  SpMat matrix() const {
    std::vector<Triplet> t;
    t.reserve(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) t.emplace_back(static_cast<int>(i), perm[i], 1.0);
    SpMat m(space->size(), space->size());
    m.setFromTriplets(t.begin(), t.end());
    return m;
  }
};

struct CheckReport {
  std::string check;
  bool pass = false;
  double defect = 0.0;
  double tol = 0.0;
  json details = json::object();
};

inline json to_json(const CheckReport& r) {
  return {{"check", r.check}, {"pass", r.pass}, {"defect", r.defect}, {"tol", r.tol},
          {"details", r.details}};
}

struct StationaryOptions {
  int dense_limit = 512;
  int dense_fallback_limit = 2000;
  int max_iterations = 60;
  double residual_tol = 1e-10;
};

namespace detail {

inline Density finish_stationary(const SpacePtr& s, Vec x, const char* how) {
  if (x.sum() < 0) x = -x;
  const double scale = x.cwiseAbs().maxCoeff();
  if (!(scale > 0)) throw InfeasibleError("stationary_density: zero kernel vector");
  if (x.minCoeff() < -1e-9 * scale)
    throw InfeasibleError(std::string("stationary_density: kernel vector changes sign (") + how +
                          ")");
  x = x.cwiseMax(0.0);
  return normalize(Density(s, x));
}

inline Vec dense_kernel(const LinOp& Ld, int& dim) {
  Eigen::MatrixXd M = Ld.dense();
  Eigen::FullPivLU<Eigen::MatrixXd> lu(M);
  lu.setThreshold(1e-10);
  dim = static_cast<int>(lu.dimensionOfKernel());
  if (dim != 1) return Vec();
  Vec x = lu.kernel().col(0);
  // One refinement pass through a bordered system with the mass constraint.
  const int n = Ld.size();
  Eigen::MatrixXd Bd(n + 1, n);
  Bd.topRows(n) = M;
  Bd.row(n) = Ld.space->weights().transpose();
  Vec rhs = Vec::Zero(n + 1);
  rhs[n] = Ld.space->weights().dot(x);
  Vec y = Bd.colPivHouseholderQr().solve(rhs);
  return y;
}

}  // namespace detail

// Solves L' mu = 0 on the simplex.
inline Density stationary_density(const LinOp& L, const StationaryOptions& opt = {}) {
  const int n = L.size();
  const LinOp Ld = adjoint_l2(L);
  const double scale = std::max(L.norm_inf(), 1e-300);
  auto residual = [&](const Vec& x) {
    return (Ld.matrix * x).cwiseAbs().maxCoeff() / (scale * x.cwiseAbs().maxCoeff());
  };
  if (n <= opt.dense_limit) {
    int dim = 0;
    Vec x = detail::dense_kernel(Ld, dim);
    if (dim > 1)
      throw NonErgodicError("stationary_density: kernel of L' has dimension " +
                            std::to_string(dim));
    if (dim == 0) throw InfeasibleError("stationary_density: L' has trivial kernel");
    return detail::finish_stationary(L.space, x, "dense");
  }
  // Shifted inverse iteration from two starts; disagreement signals a
  // kernel of dimension above one.
  SpMat A = Ld.matrix;
  const double shift = 1e-9 * scale;
  SpMat I = diagonal_matrix(Vec::Constant(n, shift));
  SpMat S = SpMat(A - I);
  Eigen::SparseMatrix<double> Sc(S);
  Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
  lu.analyzePattern(Sc);
  lu.factorize(Sc);
  bool ok = lu.info() == Eigen::Success;
  std::vector<Vec> found;
  if (ok) {
    auto rng = make_stream(kDefaultSeed, 0x57a7);
    for (int start = 0; start < 2 && ok; ++start) {
      Vec x = start == 0 ? Vec::Ones(n) : normal_vector(rng, n).cwiseAbs().eval();
      for (int it = 0; it < opt.max_iterations; ++it) {
        x = lu.solve(x);
        if (!x.allFinite()) {
          ok = false;
          break;
        }
        x /= x.cwiseAbs().maxCoeff();
        if (residual(x) <= opt.residual_tol) break;
      }
      if (residual(x) > opt.residual_tol) ok = false;
      if (x.sum() < 0) x = -x;
      found.push_back(x / Ld.space->weights().dot(x));
    }
  }
  if (ok) {
    const Vec& a = found[0];
    const Vec& b = found[1];
    if ((a - b).cwiseAbs().maxCoeff() > 1e-6 * a.cwiseAbs().maxCoeff())
      throw NonErgodicError("stationary_density: inverse iteration found two kernel directions");
    return detail::finish_stationary(L.space, a, "inverse iteration");
  }
  if (n <= opt.dense_fallback_limit) {
    int dim = 0;
    Vec x = detail::dense_kernel(Ld, dim);
    if (dim > 1)
      throw NonErgodicError("stationary_density: kernel of L' has dimension " +
                            std::to_string(dim));
    if (dim == 0) throw InfeasibleError("stationary_density: L' has trivial kernel");
    return detail::finish_stationary(L.space, x, "dense fallback");
  }
  throw InfeasibleError("stationary_density: inverse iteration did not converge");
}

// Max entry of |L* - L| relative to the largest entry of L.
inline CheckReport check_detailed_balance(const LinOp& L, const Density& mu, double tol = 1e-10) {
  const LinOp Ls = adjoint_l2mu(L, mu);
  const SpMat diff = Ls.matrix - L.matrix;
  double d = 0.0;
  for (Eigen::Index k = 0; k < diff.nonZeros(); ++k) d = std::max(d, std::abs(diff.valuePtr()[k]));
  CheckReport r;
  r.check = "detailed-balance";
  r.defect = d / std::max(L.max_abs_entry(), 1e-300);
  r.tol = tol;
  r.pass = r.defect <= tol;
  return r;
}

// Compares L* f with F_#[L (F_# f)] over the standard basis (small n) or
// over random fields.
inline CheckReport check_generalized_reversibility(const LinOp& L, const Density& mu,
                                                   const Involution& F, double tol = 1e-10,
                                                   std::uint64_t seed = kDefaultSeed,
                                                   int basis_limit = 512, int random_fields = 64) {
  require_same_space(L.space, F.space, "check_generalized_reversibility");
  const int n = L.size();
  CheckReport r;
  r.check = "generalized-reversibility";
  r.tol = tol;
  double inv = 0.0;
  const double mumax = mu.values.cwiseAbs().maxCoeff();
  for (int i = 0; i < n; ++i) inv = std::max(inv, std::abs(mu.values[F.perm[i]] - mu.values[i]));
  inv /= mumax;
  r.details["mu_invariance_defect"] = inv;
  r.details["mu_invariant"] = inv <= tol;
  const LinOp Ls = adjoint_l2mu(L, mu);
  const SpMat P = F.matrix();
  const SpMat PLP = SpMat(P * L.matrix * P);
  if (n <= basis_limit) {
    const SpMat diff = Ls.matrix - PLP;
    double d = 0.0;
    for (Eigen::Index k = 0; k < diff.nonZeros(); ++k)
      d = std::max(d, std::abs(diff.valuePtr()[k]));
    r.defect = d / std::max(L.max_abs_entry(), 1e-300);
    r.details["mode"] = "basis";
  } else {
    auto rng = make_stream(seed, 0x6e7);
    const double nrm = std::max(L.norm_inf(), 1e-300);
    double d = 0.0;
    for (int s = 0; s < random_fields; ++s) {
      Vec f = normal_vector(rng, n);
      const Vec diff = Ls.matrix * f - PLP * f;
      d = std::max(d, diff.cwiseAbs().maxCoeff() / (nrm * f.cwiseAbs().maxCoeff()));
    }
    r.defect = d;
    r.details["mode"] = "random";
    r.details["fields"] = random_fields;
    r.details["seed"] = seed;
  }
  r.pass = r.defect <= tol;
  return r;
}

// Coordinate-list text: one JSON header line, then "row col value" lines.
inline void write_coo(std::ostream& os, const LinOp& L) {
  json h = {{"format", "coo"},
            {"rows", L.size()},
            {"cols", L.size()},
            {"nnz", L.matrix.nonZeros()},
            {"label", L.label},
            {"space", to_json(*L.space)}};
  os << h.dump() << '\n' << std::setprecision(17);
  for (int i = 0; i < L.matrix.outerSize(); ++i)
    for (SpMat::InnerIterator it(L.matrix, i); it; ++it)
      os << it.row() << ' ' << it.col() << ' ' << it.value() << '\n';
}

inline LinOp read_coo(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("read_coo: missing header");
  const json h = json::parse(line);
  auto s = space_from_json(h.at("space"));
  const long nnz = h.at("nnz").get<long>();
  std::vector<Triplet> t;
  t.reserve(nnz);
  for (long k = 0; k < nnz; ++k) {
    long r, c;
    double v;
    if (!(is >> r >> c >> v)) throw std::runtime_error("read_coo: truncated body");
    t.emplace_back(static_cast<int>(r), static_cast<int>(c), v);
  }
  SpMat m(s->size(), s->size());
  m.setFromTriplets(t.begin(), t.end());
  return LinOp(s, m, h.value("label", std::string()));
}

}  // namespace nrgen
