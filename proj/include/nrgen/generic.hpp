#pragma once

#include "nrgen/dissipation.hpp"
#include "nrgen/opalg.hpp"

#include <functional>
#include <optional>

namespace nrgen {

class StructuralError : public std::runtime_error {
 public:
  StructuralError(const std::string& invariant, double defect, const std::string& msg)
      : std::runtime_error(msg + " [" + invariant + ", defect " + std::to_string(defect) + "]"),
        invariant_(invariant),
        defect_(defect) {}
  const std::string& invariant() const { return invariant_; }
  double defect() const { return defect_; }

 private:
  std::string invariant_;
  double defect_;
};

// S_mu(rho) = sum rho log(rho/mu) w, with 0 log 0 = 0. No validation.
inline double relative_entropy_raw(const Vec& rho, const Vec& mu, const Vec& w) {
  Vec t(rho.size());
  for (Eigen::Index i = 0; i < rho.size(); ++i)
    t[i] = rho[i] > 0.0 ? (rho[i] * std::log(rho[i] / mu[i])) * w[i] : 0.0;
  return compensated_sum(t);
}

inline double relative_entropy(const Density& rho, const Density& mu) {
  require_same_space(rho.space, mu.space, "relative_entropy");
  require_positive(rho, "relative_entropy");
  require_positive(mu, "relative_entropy");
  for (const Density* d : {&rho, &mu}) {
    const double m = d->mass();
    if (std::abs(m - 1.0) > 1e-8)
      throw std::invalid_argument("relative_entropy: density not normalized (mass " +
                                  std::to_string(m) + ")");
  }
  return relative_entropy_raw(rho.values, mu.values, rho.space->weights());
}

// dS_mu(rho) = log(rho/mu) + 1.
inline ScalarField entropy_gradient(const Density& rho, const Density& mu) {
  require_same_space(rho.space, mu.space, "entropy_gradient");
  require_positive(rho, "entropy_gradient");
  require_positive(mu, "entropy_gradient");
  Vec g(rho.values.size());
  for (Eigen::Index i = 0; i < g.size(); ++i) g[i] = std::log(rho.values[i] / mu.values[i]) + 1.0;
  return ScalarField(rho.space, g);
}

struct EntropyFunctional {
  Density mu;
  double value(const Density& rho) const { return relative_entropy(rho, mu); }
  ScalarField gradient(const Density& rho) const { return entropy_gradient(rho, mu); }
};

// L = B - sum_k A_k^* A_k.
struct HypocoerciveForm {
  std::vector<LinOp> A;
  LinOp B;
  Density mu;

  LinOp AstarA() const {
    SpMat s(B.size(), B.size());
    for (const auto& a : A) s += SpMat(adjoint_l2mu(a, mu).matrix * a.matrix);
    return LinOp(B.space, s, "A*A");
  }

  LinOp generator() const { return LinOp(B.space, SpMat(B.matrix - AstarA().matrix), "L"); }

  struct Defects {
    double b_antisymmetry = 0.0;
    double b_constants = 0.0;
    double a_constants = 0.0;
  };

  Defects defects() const {
    Defects d;
    const double bscale = std::max(B.max_abs_entry(), 1e-300);
    const SpMat s = adjoint_l2mu(B, mu).matrix + B.matrix;
    for (Eigen::Index k = 0; k < s.nonZeros(); ++k)
      d.b_antisymmetry = std::max(d.b_antisymmetry, std::abs(s.valuePtr()[k]) / bscale);
    d.b_constants = constant_defect(B) / std::max(B.norm_inf(), 1e-300);
    for (const auto& a : A)
      d.a_constants = std::max(d.a_constants, constant_defect(a) / std::max(a.norm_inf(), 1e-300));
    return d;
  }

  void validate(double tol = 1e-12) const {
    for (const auto& a : A) require_same_space(a.space, B.space, "HypocoerciveForm");
    require_same_space(mu.space, B.space, "HypocoerciveForm");
    const Defects d = defects();
    if (d.b_antisymmetry > tol)
      throw StructuralError("B*=-B", d.b_antisymmetry, "HypocoerciveForm: B not antisymmetric");
    if (d.b_constants > tol)
      throw StructuralError("B1=0", d.b_constants, "HypocoerciveForm: B does not kill constants");
    if (d.a_constants > tol)
      throw StructuralError("A1=0", d.a_constants, "HypocoerciveForm: A does not kill constants");
  }
};

// M_rho = 2 sum_k A_k' diag(rho) A_k.
inline LinOp wasserstein_operator(const std::vector<LinOp>& A, const Density& rho) {
  require_positive(rho, "wasserstein_operator");
  const int n = rho.space->size();
  SpMat m(n, n);
  const SpMat D = diagonal_matrix(2.0 * rho.values);
  for (const auto& a : A) {
    require_same_space(a.space, rho.space, "wasserstein_operator");
    m += SpMat(adjoint_l2(a).matrix * D * a.matrix);
  }
  return LinOp(rho.space, m, "M_rho");
}

inline LinOp wasserstein_operator(const LinOp& A, const Density& rho) {
  return wasserstein_operator(std::vector<LinOp>{A}, rho);
}

using MBuilder = std::function<LinOp(const Density&)>;
using MSqrtBuilder = std::function<std::vector<LinOp>(const Density&)>;

struct GenericStructure {
  LinOp W;
  MBuilder M;
  EntropyFunctional S;

  // rho_dot = W rho - M_rho(dS/2).
  Vec flow(const Density& rho) const {
    const Vec half = 0.5 * S.gradient(rho).values;
    return W.apply(rho.values) - M(rho).apply(half);
  }
};

inline GenericStructure hypocoercive_to_pregeneric(const HypocoerciveForm& H,
                                                   double tol = 1e-12) {
  H.validate(tol);
  GenericStructure G;
  G.W = adjoint_l2(H.B);
  G.W.label = "W";
  auto A = H.A;
  G.M = [A](const Density& rho) { return wasserstein_operator(A, rho); };
  G.S = EntropyFunctional{H.mu};
  return G;
}

// max |L' rho - (W rho - M_rho(dS/2))|.
inline double reconstruction_defect(const LinOp& L, const GenericStructure& G, const Density& rho) {
  const Vec lhs = adjoint_l2(L).apply(rho.values);
  return (lhs - G.flow(rho)).cwiseAbs().maxCoeff();
}

// <W rho, dS(rho)>; sign matters (<= 0 is dissipative).
inline double orthogonality_defect(const LinOp& W, const Density& rho, const EntropyFunctional& S) {
  require_same_space(W.space, rho.space, "orthogonality_defect");
  const ScalarField Wr(W.space, W.apply(rho.values));
  return inner_product(Wr, S.gradient(rho));
}

struct ConversionOptions {
  double factor_tol = 1e-10;
  double orth_tol = 1e-10;
  double structure_tol = 1e-10;
};

// M_sqrt(rho) = sqrt(2 rho) A, supplied per component; recovers A and sets B = W'.
inline HypocoerciveForm pregeneric_to_hypocoercive(const GenericStructure& G,
                                                   const MSqrtBuilder& M_sqrt,
                                                   const std::vector<Density>& samples,
                                                   const ConversionOptions& opt = {}) {
  if (samples.empty()) throw std::invalid_argument("pregeneric_to_hypocoercive: no samples");
  for (const auto& rho : samples) {
    const auto comps = M_sqrt(rho);
    const LinOp M = G.M(rho);
    SpMat prod(M.size(), M.size());
    for (const auto& c : comps) prod += SpMat(adjoint_l2(c).matrix * c.matrix);
    const SpMat diff = prod - M.matrix;
    double d = 0.0;
    for (Eigen::Index k = 0; k < diff.nonZeros(); ++k)
      d = std::max(d, std::abs(diff.valuePtr()[k]));
    d /= std::max(M.max_abs_entry(), 1e-300);
    if (d > opt.factor_tol)
      throw StructuralError("M_sqrt'M_sqrt=M", d, "pregeneric_to_hypocoercive: factorization mismatch");
    const double o = orthogonality_defect(G.W, rho, G.S);
    if (std::abs(o) > opt.orth_tol)
      throw StructuralError("<W rho,dS>=0", std::abs(o),
                            "pregeneric_to_hypocoercive: orthogonality fails, refusing");
  }
  const Density& rho0 = samples.front();
  const Vec inv = (2.0 * rho0.values).cwiseSqrt().cwiseInverse();
  HypocoerciveForm H;
  for (const auto& c : M_sqrt(rho0)) {
    SpMat a = diagonal_matrix(inv) * c.matrix;
    H.A.push_back(LinOp(rho0.space, a, "A"));
  }
  H.B = adjoint_l2(G.W);
  H.B.label = "B";
  H.mu = G.S.mu;
  const auto d = H.defects();
  if (d.b_antisymmetry > opt.structure_tol)
    throw StructuralError("B*=-B", d.b_antisymmetry, "pregeneric_to_hypocoercive: recovered B");
  if (d.a_constants > opt.structure_tol)
    throw StructuralError("A1=0", d.a_constants, "pregeneric_to_hypocoercive: recovered A");
  return H;
}

// psi*(rho; xi) = 1/2 <xi, M_rho xi>.
inline DissipationPotential quadratic_dissipation(const MBuilder& M) {
  DissipationPotential p;
  p.psi_star = [M](const Density& rho, const Vec& xi) {
    const Vec mx = M(rho).apply(xi);
    return 0.5 * compensated_sum(xi.cwiseProduct(mx).cwiseProduct(rho.space->weights()));
  };
  p.grad_psi_star = [M](const Density& rho, const Vec& xi) { return M(rho).apply(xi); };
  p.symmetric = true;
  p.shift_invariant = true;
  return p;
}

// psi(rho; G - W) + psi*(rho; -dS/2) + 1/2 <G - W, dS> (or <G, dS> when
// orthogonal_form is set).
inline double pregeneric_residual(const Vec& flow, const LinOp& W, const DissipationPotential& pot,
                                  const EntropyFunctional& S, const Density& rho,
                                  bool orthogonal_form = false) {
  if (!pot.psi) throw std::invalid_argument("pregeneric_residual: potential has no psi");
  const Vec ds = S.gradient(rho).values;
  const Vec v = flow - W.apply(rho.values);
  const Vec& w = rho.space->weights();
  const Vec pair = orthogonal_form ? flow : v;
  return pot.psi(rho, v) + pot.psi_star(rho, -0.5 * ds) +
         0.5 * compensated_sum(pair.cwiseProduct(ds).cwiseProduct(w));
}

}  // namespace nrgen
