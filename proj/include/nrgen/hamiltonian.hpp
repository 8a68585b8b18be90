#pragma once

#include "nrgen/generic.hpp"
#include "nrgen/legendre.hpp"

namespace nrgen {

namespace detail {

inline void guard_xi(const Vec& xi) {
  if (!xi.allFinite() || xi.cwiseAbs().maxCoeff() > 700.0)
    throw std::overflow_error("hamiltonian: |xi| exceeds 700");
}

inline double two_sinh_sq_half(double d) {
  const double s = std::sinh(0.5 * d);
  return 2.0 * s * s;  // cosh(d) - 1
}

// e^d - 1 - d without cancellation for small d.
inline double expm1_minus_linear(double d) {
  if (std::abs(d) < 1e-2) {
    double term = 0.5 * d * d, sum = term;
    for (int k = 3; k < 12; ++k) {
      term *= d / k;
      sum += term;
    }
    return sum;
  }
  return std::expm1(d) - d;
}

}  // namespace detail

struct HamiltonianResult {
  double value = 0.0;
  // Set when L does not annihilate constants; value is still the exact
  // e^{-xi} L e^{xi} pairing.
  bool generator_warning = false;
};

// sum_i rho_i w_i [sum_{j != i} L_ij expm1(xi_j - xi_i) + (L1)_i].
inline HamiltonianResult hamiltonian_eval_full(const LinOp& L, const Density& rho, const Vec& xi) {
  require_same_space(L.space, rho.space, "hamiltonian_eval");
  detail::guard_xi(xi);
  const Vec& w = L.space->weights();
  const int n = L.size();
  Vec t(n);
  double rowmax = 0.0;
  HamiltonianResult r;
  for (int i = 0; i < n; ++i) {
    double inner = 0.0, rowsum = 0.0;
    for (SpMat::InnerIterator it(L.matrix, i); it; ++it) {
      rowsum += it.value();
      const int j = static_cast<int>(it.col());
      if (j != i) inner += it.value() * std::expm1(xi[j] - xi[i]);
    }
    rowmax = std::max(rowmax, std::abs(rowsum));
    t[i] = rho.values[i] * w[i] * (inner + rowsum);
  }
  r.generator_warning = rowmax > 1e-12 * std::max(1.0, L.norm_inf());
  r.value = compensated_sum(t);
  return r;
}

inline double hamiltonian_eval(const LinOp& L, const Density& rho, const Vec& xi) {
  return hamiltonian_eval_full(L, rho, xi).value;
}

// d_xi H as a field for the flat pairing.
inline Vec hamiltonian_gradient_xi(const LinOp& L, const Density& rho, const Vec& xi) {
  detail::guard_xi(xi);
  const Vec& w = L.space->weights();
  const int n = L.size();
  Vec raw = Vec::Zero(n);
  for (int i = 0; i < n; ++i) {
    const double a = rho.values[i] * w[i];
    for (SpMat::InnerIterator it(L.matrix, i); it; ++it) {
      const int j = static_cast<int>(it.col());
      if (j == i) continue;
      const double t = a * it.value() * std::exp(xi[j] - xi[i]);
      raw[j] += t;
      raw[i] -= t;
    }
  }
  return raw.cwiseQuotient(w);
}

struct Hamiltonian {
  LinOp L;
  double eval(const Density& rho, const Vec& xi) const { return hamiltonian_eval(L, rho, xi); }
  Vec gradient(const Density& rho, const Vec& xi) const {
    return hamiltonian_gradient_xi(L, rho, xi);
  }
};

struct HamiltonianSplit {
  Hamiltonian sym;
  Hamiltonian antisym;
};

inline HamiltonianSplit hamiltonian_split(const LinOp& L, const Density& mu) {
  auto parts = split_sym_antisym(L, mu);
  return {Hamiltonian{parts.sym}, Hamiltonian{parts.antisym}};
}

// Upper-triangle coefficients C_ij = sym(w_i Ls_ij sqrt(mu_i/mu_j)).
struct PsiStarKernel {
  std::vector<int> row, col;
  std::vector<double> c;
};

inline PsiStarKernel psi_star_kernel(const LinOp& Ls, const Density& mu) {
  const Vec& w = Ls.space->weights();
  SpMat K = Ls.matrix;
  for (int i = 0; i < K.outerSize(); ++i)
    for (SpMat::InnerIterator it(K, i); it; ++it) {
      const int j = static_cast<int>(it.col());
      it.valueRef() *= w[i] * std::sqrt(mu.values[i] / mu.values[j]);
    }
  const SpMat C = 0.5 * (K + SpMat(K.transpose()));
  PsiStarKernel k;
  for (int i = 0; i < C.outerSize(); ++i)
    for (SpMat::InnerIterator it(C, i); it; ++it) {
      const int j = static_cast<int>(it.col());
      if (j <= i || it.value() == 0.0) continue;
      k.row.push_back(i);
      k.col.push_back(j);
      k.c.push_back(it.value());
    }
  return k;
}

inline double psi_star_from_kernel(const PsiStarKernel& k, const Density& rho, const Vec& xi) {
  Vec t(k.c.size());
  for (size_t e = 0; e < k.c.size(); ++e) {
    const int i = k.row[e], j = k.col[e];
    t[e] = 2.0 * k.c[e] * std::sqrt(rho.values[i] * rho.values[j]) *
           detail::two_sinh_sq_half(xi[j] - xi[i]);
  }
  return compensated_sum(t);
}

inline Vec psi_star_grad_from_kernel(const PsiStarKernel& k, const Density& rho, const Vec& xi) {
  const Vec& w = rho.space->weights();
  Vec raw = Vec::Zero(w.size());
  for (size_t e = 0; e < k.c.size(); ++e) {
    const int i = k.row[e], j = k.col[e];
    const double t = 2.0 * k.c[e] * std::sqrt(rho.values[i] * rho.values[j]) * std::sinh(xi[i] - xi[j]);
    raw[i] += t;
    raw[j] -= t;
  }
  return raw.cwiseQuotient(w);
}

// Literal H_s(rho; dS/2 + xi) - H_s(rho; dS/2), used as a cross-check.
inline double psi_star_literal(const LinOp& Ls, const Density& mu, const Density& rho, const Vec& xi) {
  const Vec half = 0.5 * entropy_gradient(rho, mu).values;
  return hamiltonian_eval(Ls, rho, half + xi) - hamiltonian_eval(Ls, rho, half);
}

inline double symmetry_defect(const LinOp& L, const Density& mu) {
  const SpMat d = adjoint_l2mu(L, mu).matrix - L.matrix;
  double m = 0.0;
  for (Eigen::Index k = 0; k < d.nonZeros(); ++k) m = std::max(m, std::abs(d.valuePtr()[k]));
  return m / std::max(L.max_abs_entry(), 1e-300);
}

// psi(rho; v) by numerical Legendre transform of psi_star over mean-zero xi;
// +inf off the mean-zero subspace when psi_star is shift invariant.
inline void attach_legendre_psi(DissipationPotential& p, const LegendreConfig& base = {}) {
  auto ps = p.psi_star;
  auto gs = p.grad_psi_star;
  const bool shift = p.shift_invariant;
  p.psi = [ps, gs, shift, base](const Density& rho, const Vec& v) {
    const Vec& w = rho.space->weights();
    LegendreConfig cfg = base;
    cfg.project_mean_zero = shift;
    if (shift) {
      const double m = compensated_sum(v.cwiseProduct(w));
      if (std::abs(m) > 1e-10 * std::max(1.0, v.cwiseAbs().maxCoeff() * w.sum()))
        return std::numeric_limits<double>::infinity();
    }
    ScalarFn phi = [&](const Vec& xi) { return ps(rho, xi); };
    FieldFn grad = [&](const Vec& xi) { return gs(rho, xi); };
    return legendre_transform(phi, grad, w, v, cfg).value_or_throw();
  };
}

// Psi*(rho; xi) = H_s(rho; dS/2 + xi) - H_s(rho; dS/2) in closed pairwise form.
inline DissipationPotential dissipation_from_Hs(const LinOp& Ls, const Density& mu,
                                                double tol = 1e-10,
                                                const LegendreConfig& cfg = {}) {
  require_positive(mu, "dissipation_from_Hs");
  const double sd = symmetry_defect(Ls, mu);
  if (sd > tol) throw StructuralError("Ls*=Ls", sd, "dissipation_from_Hs: L_s not symmetric");
  const double cd = constant_defect(Ls) / std::max(Ls.norm_inf(), 1e-300);
  if (cd > tol) throw StructuralError("Ls1=0", cd, "dissipation_from_Hs: L_s does not kill constants");
  auto k = std::make_shared<PsiStarKernel>(psi_star_kernel(Ls, mu));
  DissipationPotential p;
  p.psi_star = [k](const Density& rho, const Vec& xi) { return psi_star_from_kernel(*k, rho, xi); };
  p.grad_psi_star = [k](const Density& rho, const Vec& xi) {
    return psi_star_grad_from_kernel(*k, rho, xi);
  };
  p.symmetric = true;
  p.shift_invariant = true;
  attach_legendre_psi(p, cfg);
  return p;
}

// sup_xi <xi, g> - H(rho; xi).
inline LegendreResult lagrangian(const LinOp& L, const Density& rho, const Vec& g,
                                 LegendreConfig cfg = {}) {
  cfg.project_mean_zero = true;
  ScalarFn phi = [&](const Vec& xi) { return hamiltonian_eval(L, rho, xi); };
  FieldFn grad = [&](const Vec& xi) { return hamiltonian_gradient_xi(L, rho, xi); };
  return legendre_transform(phi, grad, L.space->weights(), g, cfg);
}

inline CheckReport lagrangian_zero_check(const LinOp& L, const Density& mu, const Density& rho,
                                         double tol = 1e-7, const LegendreConfig& cfg = {}) {
  require_same_space(L.space, mu.space, "lagrangian_zero_check");
  const Vec g = adjoint_l2(L).apply(rho.values);
  const auto res = lagrangian(L, rho, g, cfg);
  CheckReport r;
  r.check = "lagrangian-zero";
  r.tol = tol;
  r.defect = std::abs(res.value);
  r.pass = res.ok() && r.defect <= tol;
  r.details = {{"value", res.value},
               {"status", to_string(res.status)},
               {"iterations", res.iterations},
               {"grad_norm", res.grad_norm}};
  return r;
}

// H(rho; dS(rho) + xi) against H(F#rho; -xi o F) at seeded samples.
inline CheckReport check_reversibility_relation(const LinOp& L, const Density& mu,
                                                const Involution& F, int samples = 50,
                                                double tol = 1e-12,
                                                std::uint64_t seed = kDefaultSeed,
                                                double xi_scale = 0.5, double rho_spread = 0.5) {
  require_same_space(L.space, mu.space, "check_reversibility_relation");
  auto rng = make_stream(seed, 0x4e1);
  double maxd = 0.0, mind = std::numeric_limits<double>::infinity();
  for (int s = 0; s < samples; ++s) {
    const Density rho = random_density(rng, mu, rho_spread);
    const Vec xi = normal_vector(rng, L.size(), xi_scale);
    const Vec ds = entropy_gradient(rho, mu).values;
    const double lhs = hamiltonian_eval(L, rho, ds + xi);
    const Density frho(rho.space, F.apply(rho.values));
    const double rhs = hamiltonian_eval(L, frho, -F.apply(xi));
    const double scale = std::max({std::abs(lhs), std::abs(rhs), 1e-300});
    const double d = std::abs(lhs - rhs) / scale;
    maxd = std::max(maxd, d);
    mind = std::min(mind, d);
  }
  CheckReport r;
  r.check = "reversibility-relation";
  r.tol = tol;
  r.defect = maxd;
  r.pass = maxd <= tol;
  r.details = {{"samples", samples}, {"seed", seed}, {"max_defect", maxd}, {"min_defect", mind}};
  return r;
}

// Gamma(xi, eta) = 1/2 (L(xi eta) - xi L eta - eta L xi), in difference form.
inline ScalarField carre_du_champ(const LinOp& Ls, const ScalarField& xi, const ScalarField& eta) {
  require_same_space(Ls.space, xi.space, "carre_du_champ");
  require_same_space(Ls.space, eta.space, "carre_du_champ");
  const int n = Ls.size();
  Vec g(n);
  for (int i = 0; i < n; ++i) {
    double s = 0.0, rowsum = 0.0;
    for (SpMat::InnerIterator it(Ls.matrix, i); it; ++it) {
      const int j = static_cast<int>(it.col());
      rowsum += it.value();
      if (j != i) s += it.value() * (xi.values[j] - xi.values[i]) * (eta.values[j] - eta.values[i]);
    }
    g[i] = 0.5 * s - 0.5 * xi.values[i] * eta.values[i] * rowsum;
  }
  return ScalarField(Ls.space, g);
}

// H(xi + xb) - H(xi) - <dH(xi), xb>, summed edge by edge.
inline double convexity_gap(const LinOp& L, const Density& rho, const Vec& xi, const Vec& xb) {
  detail::guard_xi(xi);
  detail::guard_xi(xi + xb);
  const Vec& w = L.space->weights();
  const int n = L.size();
  Vec t(n);
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (SpMat::InnerIterator it(L.matrix, i); it; ++it) {
      const int j = static_cast<int>(it.col());
      if (j == i) continue;
      s += it.value() * std::exp(xi[j] - xi[i]) * detail::expm1_minus_linear(xb[j] - xb[i]);
    }
    t[i] = rho.values[i] * w[i] * s;
  }
  return compensated_sum(t);
}

inline CheckReport convexity_check(const Hamiltonian& H, const Density& mu, int samples = 200,
                                   double tol = 1e-12, std::uint64_t seed = kDefaultSeed,
                                   double xi_scale = 0.5) {
  auto rng = make_stream(seed, 0xc0e);
  double ming = std::numeric_limits<double>::infinity();
  for (int s = 0; s < samples; ++s) {
    const Density rho = random_density(rng, mu, 0.5);
    const Vec xi = normal_vector(rng, H.L.size(), xi_scale);
    const Vec xb = normal_vector(rng, H.L.size(), xi_scale);
    ming = std::min(ming, convexity_gap(H.L, rho, xi, xb));
  }
  CheckReport r;
  r.check = "convexity";
  r.tol = tol;
  r.defect = ming;
  r.pass = ming >= -tol;
  r.details = {{"samples", samples}, {"seed", seed}, {"min_gap", ming}};
  return r;
}

}  // namespace nrgen
