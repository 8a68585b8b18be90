#pragma once

#include "nrgen/expr.hpp"
#include "nrgen/hamiltonian.hpp"

#include <optional>

namespace nrgen {

// V(x) with analytic gradient. x has `dim` coordinates.
struct Potential {
  std::string kind = "quadratic";
  int dim = 1;
  nlohmann::json params = nlohmann::json::object();
  std::function<double(const double*)> V;
  std::function<void(const double*, double*)> grad;

  double operator()(const double* x) const { return V(x); }
};

// V = k/2 |x - c|^2.
inline Potential quadratic_potential(int dim, double k = 1.0, double center = 0.0) {
  Potential p;
  p.kind = "quadratic";
  p.dim = dim;
  p.params = {{"k", k}, {"center", center}};
  p.V = [dim, k, center](const double* x) {
    double s = 0.0;
    for (int i = 0; i < dim; ++i) s += (x[i] - center) * (x[i] - center);
    return 0.5 * k * s;
  };
  p.grad = [dim, k, center](const double* x, double* g) {
    for (int i = 0; i < dim; ++i) g[i] = k * (x[i] - center);
  };
  return p;
}

// V = a/4 sum x^4 + b/2 sum x^2.
inline Potential quartic_potential(int dim, double a = 1.0, double b = 0.0) {
  Potential p;
  p.kind = "quartic";
  p.dim = dim;
  p.params = {{"a", a}, {"b", b}};
  p.V = [dim, a, b](const double* x) {
    double s = 0.0;
    for (int i = 0; i < dim; ++i) s += 0.25 * a * std::pow(x[i], 4) + 0.5 * b * x[i] * x[i];
    return s;
  };
  p.grad = [dim, a, b](const double* x, double* g) {
    for (int i = 0; i < dim; ++i) g[i] = a * x[i] * x[i] * x[i] + b * x[i];
  };
  return p;
}

inline Potential expr_potential(int dim, const std::string& text) {
  auto e = std::make_shared<Expr>(text, dim);
  Potential p;
  p.kind = "expr";
  p.dim = dim;
  p.params = {{"expr", text}};
  p.V = [e](const double* x) { return e->value(x); };
  p.grad = [e](const double* x, double* g) { e->value_grad(x, g); };
  return p;
}

// Ham-PD-MCMC reflection and rates; a = v . grad U~.
struct JumpStructure {
  ScalarField lambda_tilde;
  ScalarField lambda_r;
  Involution reflection;
  Density refresh_weights;
  ScalarField a_field;
  double snap_error = 0.0;
};

// Phase-space grid [x_1..x_d, v_1..v_d]; with v axes last, index = ix * nv + iv.
struct PhaseLayout {
  int d = 0;
  int nx = 0;
  int nv = 0;
  SpacePtr velocity_space;
  Vec pi0;  // refresh density on the velocity grid, mass 1 against its weights
};

struct ModelBundle {
  std::string name;
  nlohmann::json params = nlohmann::json::object();
  std::vector<std::string> warnings;
  LinOp L;
  LinOp L_dual;
  Density mu;
  // L = B - sum A_k^* A_k when hypocoercive is set; B alone is kept for the
  // jump models as the Liouville part.
  std::optional<LinOp> B;
  std::vector<LinOp> A;
  bool hypocoercive = false;
  std::optional<Involution> flip;
  std::optional<JumpStructure> jump;
  std::optional<PhaseLayout> phase;
  std::optional<LinOp> L_Q;
  std::optional<LinOp> L_S;
  std::optional<LinOp> L_A;

  SpacePtr space() const { return L.space; }

  HypocoerciveForm hypo() const {
    if (!hypocoercive || !B) throw std::logic_error("ModelBundle: no hypocoercive form");
    return HypocoerciveForm{A, *B, mu};
  }

  double stationarity_residual() const {
    return L_dual.apply(mu.values).cwiseAbs().maxCoeff() / std::max(L.norm_inf(), 1e-300);
  }
};

namespace detail {

inline PhaseLayout phase_layout(const SpacePtr& s) {
  if (s->kind() != StateSpace::Kind::grid || s->dim() % 2 != 0 || s->dim() == 0)
    throw std::invalid_argument("phase-space model needs a grid with axes x_1..x_d, v_1..v_d");
  PhaseLayout p;
  p.d = s->dim() / 2;
  p.nx = 1;
  p.nv = 1;
  std::vector<Axis> vaxes;
  for (int k = 0; k < p.d; ++k) p.nx *= s->axis(k).n;
  for (int k = p.d; k < 2 * p.d; ++k) {
    const Axis& a = s->axis(k);
    if (!a.symmetric_about_zero())
      throw std::invalid_argument("velocity axis must be truncated and symmetric about 0");
    p.nv *= a.n;
    vaxes.push_back(a);
  }
  p.velocity_space = StateSpace::grid(vaxes);
  Vec pi(p.nv);
  for (int j = 0; j < p.nv; ++j) {
    double v2 = 0.0;
    for (int k = 0; k < p.d; ++k) {
      const double v = p.velocity_space->coord(j, k);
      v2 += v * v;
    }
    pi[j] = std::exp(-0.5 * v2);
  }
  pi /= compensated_sum(pi.cwiseProduct(p.velocity_space->weights()));
  p.pi0 = pi;
  return p;
}

inline std::vector<double> point(const SpacePtr& s, int i) {
  std::vector<double> z(s->dim());
  for (int k = 0; k < s->dim(); ++k) z[k] = s->coord(i, k);
  return z;
}

// Unnormalized e^{-V(x) - |v|^2/2} at an arbitrary phase point.
inline double gibbs(const Potential& V, const double* z, int d) {
  double v2 = 0.0;
  for (int k = 0; k < d; ++k) v2 += z[d + k] * z[d + k];
  return std::exp(-V(z) - 0.5 * v2);
}

inline Density gibbs_density(const Potential& V, const SpacePtr& s, int d) {
  Vec m(s->size());
  for (int i = 0; i < s->size(); ++i) {
    auto z = point(s, i);
    m[i] = gibbs(V, z.data(), d);
  }
  return normalize(Density(s, m));
}

// Product of the weights of all axes except a and b at node i.
inline double other_weight(const SpacePtr& s, int i, int a, int b) {
  double w = 1.0;
  for (int k = 0; k < s->dim(); ++k)
    if (k != a && k != b) w *= s->axis(k).weight(s->index_along(i, k));
  return w;
}

// Neighbour along axis k, or -1 past a truncated end.
inline int neighbour(const SpacePtr& s, int i, int k, int step) {
  const Axis& a = s->axis(k);
  int m = s->index_along(i, k) + step;
  if (a.boundary == Boundary::periodic) m = (m % a.n + a.n) % a.n;
  else if (m < 0 || m >= a.n) return -1;
  return i + (m - s->index_along(i, k)) * s->stride(k);
}

}  // namespace detail

// Centered difference along axis k, one-sided at truncated ends.
inline LinOp derivative_op(const SpacePtr& s, int k) {
  const Axis& a = s->axis(k);
  const double h = a.spacing();
  std::vector<Triplet> t;
  t.reserve(2 * s->size());
  for (int i = 0; i < s->size(); ++i) {
    const int ip = detail::neighbour(s, i, k, +1);
    const int im = detail::neighbour(s, i, k, -1);
    if (ip >= 0 && im >= 0) {
      t.emplace_back(i, ip, 0.5 / h);
      t.emplace_back(i, im, -0.5 / h);
    } else if (ip >= 0) {
      t.emplace_back(i, ip, 1.0 / h);
      t.emplace_back(i, i, -1.0 / h);
    } else {
      t.emplace_back(i, i, 1.0 / h);
      t.emplace_back(i, im, -1.0 / h);
    }
  }
  SpMat m(s->size(), s->size());
  m.setFromTriplets(t.begin(), t.end());
  return LinOp(s, m, "d" + std::to_string(k));
}

// Flux-form transport: K antisymmetric with zero row sums, built from a
// stream function psi on the cell corners of each (x_k, v_k) plane. Outer
// corners carry psi = 0 (no flux through the boundary). Then
// D_mu^{-1} D_w^{-1} K discretizes v.grad_x - grad V.grad_v when psi = -mu.
inline SpMat stream_transport(const SpacePtr& s, int d,
                              const std::function<double(const double*)>& psi) {
  std::vector<Triplet> t;
  t.reserve(4 * d * s->size());
  std::vector<double> z(s->dim());
  for (int k = 0; k < d; ++k) {
    const int ax = k, av = d + k;
    const Axis& X = s->axis(ax);
    const Axis& Vv = s->axis(av);
    const double hx = X.spacing(), hv = Vv.spacing();
    // psi at corner (node index offsets +-1/2 in x and v); 0 outside.
    auto corner = [&](int i, int sx, int sv) -> double {
      const int ix = s->index_along(i, ax), iv = s->index_along(i, av);
      const bool xin = X.boundary == Boundary::periodic || (sx > 0 ? ix + 1 < X.n : ix > 0);
      const bool vin = sv > 0 ? iv + 1 < Vv.n : iv > 0;
      if (!xin || !vin) return 0.0;
      for (int q = 0; q < s->dim(); ++q) z[q] = s->coord(i, q);
      z[ax] += 0.5 * sx * hx;
      z[av] += 0.5 * sv * hv;
      return psi(z.data());
    };
    for (int i = 0; i < s->size(); ++i) {
      const double wo = detail::other_weight(s, i, ax, av);
      const int qx = detail::neighbour(s, i, ax, +1);
      if (qx >= 0) {
        const double c = wo * (corner(i, +1, +1) - corner(i, +1, -1)) / 2.0;
        t.emplace_back(i, qx, c);
        t.emplace_back(qx, i, -c);
      }
      const int qv = detail::neighbour(s, i, av, +1);
      if (qv >= 0) {
        const double c = -wo * (corner(i, +1, +1) - corner(i, -1, +1)) / 2.0;
        t.emplace_back(i, qv, c);
        t.emplace_back(qv, i, -c);
      }
    }
  }
  SpMat m(s->size(), s->size());
  m.setFromTriplets(t.begin(), t.end());
  m.prune(0.0);
  return m;
}

// D_mu^{-1} D_w^{-1} K for an unnormalized nodal mu.
inline SpMat scale_by_mass(const SpacePtr& s, const SpMat& K, const Vec& mu_nodes) {
  const Vec d = s->weights().cwiseProduct(mu_nodes).cwiseInverse();
  return SpMat(diagonal_matrix(d) * K);
}

inline LinOp liouville_operator(const Potential& V, const SpacePtr& s) {
  const auto layout = detail::phase_layout(s);
  const int d = layout.d;
  SpMat K = stream_transport(s, d, [&](const double* z) { return -detail::gibbs(V, z, d); });
  Vec mu(s->size());
  for (int i = 0; i < s->size(); ++i) {
    auto z = detail::point(s, i);
    mu[i] = detail::gibbs(V, z.data(), d);
  }
  return LinOp(s, scale_by_mass(s, K, mu), "B");
}

inline Involution velocity_flip(const SpacePtr& s) {
  const auto layout = detail::phase_layout(s);
  std::vector<int> p(s->size());
  for (int i = 0; i < s->size(); ++i) {
    auto m = s->multi_index(i);
    for (int k = layout.d; k < 2 * layout.d; ++k) m[k] = s->axis(k).mirror(m[k]);
    p[i] = s->linear_index(m);
  }
  return Involution(s, p);
}

namespace detail {

inline void check_confining(const Potential& V, const SpacePtr& s, int d,
                            std::vector<std::string>& warnings) {
  double vmin = std::numeric_limits<double>::infinity();
  double vbnd = std::numeric_limits<double>::infinity();
  for (int i = 0; i < s->size(); ++i) {
    auto z = point(s, i);
    const double v = V(z.data());
    vmin = std::min(vmin, v);
    bool on_edge = false;
    for (int k = 0; k < d; ++k) {
      const Axis& a = s->axis(k);
      const int m = s->index_along(i, k);
      if (a.boundary == Boundary::truncated && (m == 0 || m == a.n - 1)) on_edge = true;
    }
    if (on_edge) vbnd = std::min(vbnd, v);
  }
  if (std::isfinite(vbnd) && vbnd < vmin + 2.0)
    warnings.push_back("potential is not confining on the truncated domain (boundary V - min V = " +
                       std::to_string(vbnd - vmin) + " < 2)");
}

inline void finish_bundle(ModelBundle& b) {
  b.L_dual = adjoint_l2(b.L);
  b.L_dual.label = "L'";
}

}  // namespace detail

inline ModelBundle kinetic_fokker_planck(const Potential& V, const SpacePtr& s) {
  const auto layout = detail::phase_layout(s);
  if (V.dim != layout.d) throw std::invalid_argument("kinetic_fokker_planck: potential dimension");
  ModelBundle b;
  b.name = "kinetic";
  b.params = {{"potential", V.kind}, {"potential_params", V.params}};
  detail::check_confining(V, s, layout.d, b.warnings);
  b.mu = detail::gibbs_density(V, s, layout.d);
  b.B = liouville_operator(V, s);
  for (int k = 0; k < layout.d; ++k) b.A.push_back(derivative_op(s, layout.d + k));
  b.hypocoercive = true;
  b.L = b.hypo().generator();
  b.L.label = "L_kfp";
  b.flip = velocity_flip(s);
  b.phase = layout;
  detail::finish_bundle(b);
  return b;
}

// lambda_r (Q~ - I) with Q~ f(x,v) = sum_v' f(x,v') pi0(v') w(v').
inline LinOp refresh_operator(const SpacePtr& s, double lambda_r) {
  const auto layout = detail::phase_layout(s);
  const Vec& wv = layout.velocity_space->weights();
  std::vector<Triplet> t;
  t.reserve(static_cast<size_t>(layout.nx) * layout.nv * layout.nv);
  for (int ix = 0; ix < layout.nx; ++ix)
    for (int iv = 0; iv < layout.nv; ++iv) {
      const int i = ix * layout.nv + iv;
      for (int jv = 0; jv < layout.nv; ++jv) {
        double c = lambda_r * layout.pi0[jv] * wv[jv];
        if (jv == iv) c -= lambda_r;
        t.emplace_back(i, ix * layout.nv + jv, c);
      }
    }
  SpMat m(s->size(), s->size());
  m.setFromTriplets(t.begin(), t.end());
  return LinOp(s, m, "L_Q");
}

inline ModelBundle andersen_thermostat(const Potential& V, double lambda_r, const SpacePtr& s) {
  if (!(lambda_r > 0.0)) throw std::invalid_argument("andersen_thermostat: lambda_r must be > 0");
  const auto layout = detail::phase_layout(s);
  if (V.dim != layout.d) throw std::invalid_argument("andersen_thermostat: potential dimension");
  ModelBundle b;
  b.name = "andersen";
  b.params = {{"potential", V.kind}, {"potential_params", V.params}, {"lambda_r", lambda_r}};
  detail::check_confining(V, s, layout.d, b.warnings);
  b.mu = detail::gibbs_density(V, s, layout.d);
  b.B = liouville_operator(V, s);
  b.L_Q = refresh_operator(s, lambda_r);
  b.L = LinOp(s, SpMat(b.B->matrix + b.L_Q->matrix), "L_at");
  b.L_S = b.L_Q;
  b.L_A = b.B;
  b.flip = velocity_flip(s);
  b.phase = layout;
  detail::finish_bundle(b);
  return b;
}

class SnapError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Discrete R_x v = v - 2 (v.n) n, n = grad U~ / |grad U~|. d = 1 uses the
// exact index mirror; d >= 2 snaps to the nearest velocity node.
inline Involution reflection_map(const SpacePtr& s, const std::function<void(const double*, double*)>& gradU,
                                 double snap_tol, double* snap_error) {
  const auto layout = detail::phase_layout(s);
  const int d = layout.d;
  std::vector<int> p(s->size());
  double worst = 0.0;
  std::vector<double> g(d), x(d);
  for (int i = 0; i < s->size(); ++i) {
    auto m = s->multi_index(i);
    for (int k = 0; k < d; ++k) x[k] = s->coord(i, k);
    gradU(x.data(), g.data());
    double gn = 0.0;
    for (int k = 0; k < d; ++k) gn += g[k] * g[k];
    if (gn == 0.0) {
      p[i] = i;
      continue;
    }
    if (d == 1) {
      m[1] = s->axis(1).mirror(m[1]);
      p[i] = s->linear_index(m);
      continue;
    }
    double vn = 0.0;
    for (int k = 0; k < d; ++k) vn += s->coord(i, d + k) * g[k];
    for (int k = 0; k < d; ++k) {
      const Axis& a = s->axis(d + k);
      const double rv = s->coord(i, d + k) - 2.0 * vn * g[k] / gn;
      int idx = static_cast<int>(std::lround((rv - a.coord(0)) / a.spacing()));
      idx = std::clamp(idx, 0, a.n - 1);
      const double err = std::abs(a.coord(idx) - rv);
      worst = std::max(worst, err / a.spacing());
      m[d + k] = idx;
    }
    p[i] = s->linear_index(m);
  }
  if (snap_error) *snap_error = worst;
  if (worst > snap_tol)
    throw SnapError("reflection snapping error " + std::to_string(worst) +
                    " grid spacings exceeds threshold " + std::to_string(snap_tol));
  for (int i = 0; i < s->size(); ++i)
    if (p[p[i]] != i) throw SnapError("snapped reflection is not an involution");
  return Involution(s, p);
}

// Hamiltonian PD-MCMC: flow with V~, bounce at rate (v.grad U~)_+,
// refresh at rate lambda_r, U~ = V - V~.
//   L = D^{-1}(K + K_G) + a/2 + L_Q + L_R,
// where K carries the mu-preserving Liouville flow and K_G (antisymmetric,
// along velocity lines) with a/2 discretizes grad U~ . grad_v.
inline ModelBundle ham_pdmcmc(const Potential& V, const Potential& Vt, double lambda_r,
                              const SpacePtr& s, double snap_tol = 0.1) {
  if (!(lambda_r >= 0.0)) throw std::invalid_argument("ham_pdmcmc: lambda_r must be >= 0");
  const auto layout = detail::phase_layout(s);
  const int d = layout.d;
  if (V.dim != d || Vt.dim != d) throw std::invalid_argument("ham_pdmcmc: potential dimension");
  ModelBundle b;
  b.name = "hampdmcmc";
  b.params = {{"potential", V.kind},
              {"potential_params", V.params},
              {"v_tilde", Vt.kind},
              {"v_tilde_params", Vt.params},
              {"lambda_r", lambda_r}};
  detail::check_confining(V, s, d, b.warnings);
  b.warnings.push_back(
      "growth condition |grad V~| <= b(1 + |grad V|) is assumed, not checked");
  const int n = s->size();
  auto gradU = [&](const double* x, double* g) {
    std::vector<double> g1(d), g2(d);
    V.grad(x, g1.data());
    Vt.grad(x, g2.data());
    for (int k = 0; k < d; ++k) g[k] = g1[k] - g2[k];
  };
  double snap = 0.0;
  Involution R = reflection_map(s, gradU, snap_tol, &snap);
  Vec mu_nodes(n);
  Vec a(n);
  std::vector<double> g(d);
  for (int i = 0; i < n; ++i) {
    auto z = detail::point(s, i);
    mu_nodes[i] = detail::gibbs(V, z.data(), d);
    gradU(z.data(), g.data());
    double ai = 0.0;
    for (int k = 0; k < d; ++k) ai += z[d + k] * g[k];
    a[i] = ai;
  }
  const Vec a_raw = a;
  // Jump channel uses a made exactly antisymmetric under R.
  for (int i = 0; i < n; ++i) a[i] = 0.5 * (a_raw[i] - a_raw[R.perm[i]]);
  const Vec& w = s->weights();
  SpMat K = stream_transport(s, d, [&](const double* z) { return -detail::gibbs(V, z, d); });
  // K_G along each v_k line: row sums -mu w a_k / 2 with a_k = v_k dU~/dx_k,
  // edge coefficient = running sum. Lines close because v_k is symmetric.
  std::vector<Triplet> tg;
  {
    std::vector<double> x(d);
    for (int k = 0; k < d; ++k) {
      const int av = d + k;
      const Axis& Vv = s->axis(av);
      for (int i = 0; i < n; ++i) {
        if (s->index_along(i, av) != 0) continue;
        for (int q = 0; q < d; ++q) x[q] = s->coord(i, q);
        gradU(x.data(), g.data());
        // Prefix sums on the lower half, suffix sums on the upper half, so
        // the tail coefficients do not come from cancellation.
        std::vector<int> nodes(Vv.n);
        std::vector<double> r(Vv.n);
        for (int m = 0; m < Vv.n; ++m) {
          nodes[m] = i + m * s->stride(av);
          r[m] = -0.5 * mu_nodes[nodes[m]] * w[nodes[m]] * (s->coord(nodes[m], av) * g[k]);
        }
        std::vector<double> pre(Vv.n), suf(Vv.n + 1, 0.0);
        double acc = 0.0;
        for (int m = 0; m < Vv.n; ++m) pre[m] = (acc += r[m]);
        for (int m = Vv.n - 1; m >= 0; --m) suf[m] = suf[m + 1] + r[m];
        for (int m = 0; m + 1 < Vv.n; ++m) {
          const double phi = 2 * m + 2 <= Vv.n ? pre[m] : -suf[m + 1];
          if (phi != 0.0) {
            tg.emplace_back(nodes[m], nodes[m + 1], phi);
            tg.emplace_back(nodes[m + 1], nodes[m], -phi);
          }
        }
      }
    }
  }
  SpMat KG(n, n);
  KG.setFromTriplets(tg.begin(), tg.end());
  const SpMat T = scale_by_mass(s, SpMat(K + KG), mu_nodes);
  // The diagonal a/2 pairs with K_G so that L1 = 0.
  const SpMat half_a = diagonal_matrix(0.5 * a_raw);
  std::vector<Triplet> tr;
  for (int i = 0; i < n; ++i) {
    const double ap = std::max(a[i], 0.0);
    if (ap > 0.0 && R.perm[i] != i) {
      tr.emplace_back(i, R.perm[i], ap);
      tr.emplace_back(i, i, -ap);
    }
  }
  SpMat LR(n, n);
  LR.setFromTriplets(tr.begin(), tr.end());
  std::vector<Triplet> ts;
  std::vector<Triplet> ta;
  for (int i = 0; i < n; ++i) {
    const double h = 0.5 * std::abs(a[i]);
    if (h > 0.0 && R.perm[i] != i) {
      ts.emplace_back(i, R.perm[i], h);
      ts.emplace_back(i, i, -h);
      ta.emplace_back(i, R.perm[i], 0.5 * a[i]);
    }
  }
  SpMat LJS(n, n), LJA(n, n);
  LJS.setFromTriplets(ts.begin(), ts.end());
  LJA.setFromTriplets(ta.begin(), ta.end());
  b.B = liouville_operator(V, s);
  b.mu = detail::gibbs_density(V, s, d);
  SpMat LQ(n, n);
  if (lambda_r > 0.0) LQ = refresh_operator(s, lambda_r).matrix;
  b.L_Q = LinOp(s, LQ, "L_Q");
  b.L = LinOp(s, SpMat(T + half_a + LQ + LR), "L_hpd");
  b.L_S = LinOp(s, SpMat(LQ + LJS), "L_S");
  b.L_A = LinOp(s, SpMat(T + LJA), "L_A");
  JumpStructure j;
  j.a_field = ScalarField(s, a);
  j.lambda_tilde = ScalarField(s, a.cwiseMax(0.0));
  j.lambda_r = ScalarField::constant(s, lambda_r);
  j.reflection = R;
  j.refresh_weights = Density(layout.velocity_space, layout.pi0);
  j.snap_error = snap;
  b.jump = j;
  b.flip = velocity_flip(s);
  b.phase = layout;
  detail::finish_bundle(b);
  return b;
}

using DriftFn = std::function<void(const double*, double*)>;
using SigmaFn = std::function<Eigen::MatrixXd(const double*)>;

// Generator b.grad + D:grad^2 (D = sigma sigma^T) with centered stencils and
// reflecting ends; only used to locate mu and the antisymmetric part.
inline LinOp diffusion_reference_operator(const DriftFn& b, const SigmaFn& sigma, const SpacePtr& s) {
  const int d = s->dim();
  std::vector<Triplet> t;
  std::vector<double> x(d), bv(d);
  for (int i = 0; i < s->size(); ++i) {
    for (int k = 0; k < d; ++k) x[k] = s->coord(i, k);
    b(x.data(), bv.data());
    const Eigen::MatrixXd sg = sigma(x.data());
    const Eigen::MatrixXd D = sg * sg.transpose();
    for (int k = 0; k < d; ++k) {
      const double h = s->axis(k).spacing();
      const int ip = detail::neighbour(s, i, k, +1);
      const int im = detail::neighbour(s, i, k, -1);
      // Mirror ghost node at truncated ends.
      const int jp = ip >= 0 ? ip : im;
      const int jm = im >= 0 ? im : ip;
      t.emplace_back(i, jp, bv[k] / (2 * h) + D(k, k) / (h * h));
      t.emplace_back(i, jm, -bv[k] / (2 * h) + D(k, k) / (h * h));
      t.emplace_back(i, i, -2.0 * D(k, k) / (h * h));
      for (int l = k + 1; l < d; ++l) {
        if (D(k, l) == 0.0) continue;
        const double hl = s->axis(l).spacing();
        const double c = 2.0 * D(k, l) / (4 * h * hl);
        for (int sk : {-1, 1})
          for (int sl : {-1, 1}) {
            int a = detail::neighbour(s, i, k, sk);
            if (a < 0) a = detail::neighbour(s, i, k, -sk);
            int q = detail::neighbour(s, a, l, sl);
            if (q < 0) q = detail::neighbour(s, a, l, -sl);
            t.emplace_back(i, q, sk * sl * c);
          }
      }
    }
  }
  SpMat m(s->size(), s->size());
  m.setFromTriplets(t.begin(), t.end());
  return LinOp(s, m, "L0");
}

// Elliptic diffusion: mu from the reference generator, B its antisymmetric
// part in L^2_mu, A_m = sum_k sigma_km d_k, L = B - sum A_m^* A_m.
inline ModelBundle ito_diffusion(const DriftFn& b, const SigmaFn& sigma, const SpacePtr& s,
                                 const StationaryOptions& sopt = {}) {
  if (s->kind() != StateSpace::Kind::grid) throw std::invalid_argument("ito_diffusion: grid required");
  const int d = s->dim();
  double min_eig = std::numeric_limits<double>::infinity();
  int m_cols = -1;
  std::vector<double> x(d);
  for (int i = 0; i < s->size(); ++i) {
    for (int k = 0; k < d; ++k) x[k] = s->coord(i, k);
    const Eigen::MatrixXd sg = sigma(x.data());
    if (sg.rows() != d) throw std::invalid_argument("ito_diffusion: sigma must have d rows");
    if (m_cols < 0) m_cols = static_cast<int>(sg.cols());
    if (sg.cols() != m_cols) throw std::invalid_argument("ito_diffusion: sigma shape varies");
    const Eigen::MatrixXd D = sg * sg.transpose();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(D);
    min_eig = std::min(min_eig, es.eigenvalues().minCoeff());
  }
  if (!(min_eig > 1e-12))
    throw std::invalid_argument("ito_diffusion: sigma sigma^T is degenerate (min eigenvalue " +
                                std::to_string(min_eig) + ")");
  ModelBundle bd;
  bd.name = "diffusion";
  bd.params = {{"min_eigenvalue_D", min_eig}};
  const LinOp L0 = diffusion_reference_operator(b, sigma, s);
  // Centered drift stencils keep L0 a generator only while |b_k| h_k < 2 D_kk.
  double peclet = 0.0;
  {
    std::vector<double> bv(d);
    for (int i = 0; i < s->size(); ++i) {
      for (int k = 0; k < d; ++k) x[k] = s->coord(i, k);
      b(x.data(), bv.data());
      const Eigen::MatrixXd sg = sigma(x.data());
      const Eigen::MatrixXd D = sg * sg.transpose();
      for (int k = 0; k < d; ++k)
        peclet = std::max(peclet, std::abs(bv[k]) * s->axis(k).spacing() / (2.0 * D(k, k)));
    }
  }
  bd.params["cell_peclet"] = peclet;
  try {
    bd.mu = stationary_density(L0, sopt);
  } catch (const std::exception& e) {
    if (peclet < 1.0) throw;
    throw std::invalid_argument("ito_diffusion: stationary solve failed (" + std::string(e.what()) +
                                "); cell Peclet number " + std::to_string(peclet) +
                                " >= 1, refine the grid");
  }
  require_positive(bd.mu, "ito_diffusion");
  bd.B = split_sym_antisym(L0, bd.mu).antisym;
  bd.B->label = "B";
  std::vector<LinOp> dk;
  for (int k = 0; k < d; ++k) dk.push_back(derivative_op(s, k));
  for (int mcol = 0; mcol < m_cols; ++mcol) {
    Vec coef(s->size());
    SpMat am(s->size(), s->size());
    for (int k = 0; k < d; ++k) {
      for (int i = 0; i < s->size(); ++i) {
        for (int q = 0; q < d; ++q) x[q] = s->coord(i, q);
        coef[i] = sigma(x.data())(k, mcol);
      }
      am += SpMat(diagonal_matrix(coef) * dk[k].matrix);
    }
    am.prune(0.0);
    bd.A.push_back(LinOp(s, am, "A" + std::to_string(mcol)));
  }
  bd.hypocoercive = true;
  bd.L = bd.hypo().generator();
  bd.L.label = "L_diff";
  detail::finish_bundle(bd);
  return bd;
}

// Finite-state chain from a rate matrix; mu from the stationary solve.
inline ModelBundle finite_chain(const Eigen::MatrixXd& Q, const Vec* weights = nullptr) {
  auto s = weights ? StateSpace::finite(*weights) : StateSpace::finite(static_cast<int>(Q.rows()));
  ModelBundle b;
  b.name = "chain";
  b.L = LinOp::from_dense(s, Q, "Q");
  b.mu = stationary_density(b.L);
  detail::finish_bundle(b);
  return b;
}

// psi~* = BGK part + reflection part, as pairwise quadrature sums:
//   lambda_r sum_x w_x sum_{v,v'} w_v w_v' sqrt(pi0 pi0' rho rho') (cosh(xi'-xi) - 1)
//   + 1/2 sum_i w_i |a_i| sqrt(rho_i rho_Ri) (cosh(xi_Ri - xi_i) - 1).
inline DissipationPotential pdmp_dissipation_potential(const ModelBundle& b,
                                                       const LegendreConfig& cfg = {}) {
  if (!b.jump || !b.phase) throw std::invalid_argument("pdmp_dissipation_potential: no jump structure");
  const auto layout = *b.phase;
  const JumpStructure j = *b.jump;
  const SpacePtr s = b.space();
  const double lam = j.lambda_r.values.size() ? j.lambda_r.values[0] : 0.0;
  Vec wx(layout.nx);
  for (int ix = 0; ix < layout.nx; ++ix)
    wx[ix] = s->weight(ix * layout.nv) / layout.velocity_space->weight(0);
  const Vec wv = layout.velocity_space->weights();
  const Vec sp = layout.pi0.cwiseSqrt();
  DissipationPotential p;
  p.psi_star = [=](const Density& rho, const Vec& xi) {
    Vec terms(layout.nx + 1);
    for (int ix = 0; ix < layout.nx; ++ix) {
      double acc = 0.0;
      const int base = ix * layout.nv;
      for (int v = 0; v < layout.nv; ++v)
        for (int u = 0; u < layout.nv; ++u) {
          if (u == v) continue;
          acc += wv[v] * wv[u] * sp[v] * sp[u] *
                 std::sqrt(rho.values[base + v] * rho.values[base + u]) *
                 detail::two_sinh_sq_half(xi[base + u] - xi[base + v]);
        }
      terms[ix] = lam * wx[ix] * acc;
    }
    Vec refl(s->size());
    const Vec& w = s->weights();
    for (int i = 0; i < s->size(); ++i) {
      const int r = j.reflection.perm[i];
      refl[i] = 0.5 * w[i] * std::abs(j.a_field.values[i]) * std::sqrt(rho.values[i] * rho.values[r]) *
                detail::two_sinh_sq_half(xi[r] - xi[i]);
    }
    terms[layout.nx] = compensated_sum(refl);
    return compensated_sum(terms);
  };
  p.grad_psi_star = [=](const Density& rho, const Vec& xi) {
    Vec g = Vec::Zero(s->size());
    for (int ix = 0; ix < layout.nx; ++ix) {
      const int base = ix * layout.nv;
      for (int v = 0; v < layout.nv; ++v) {
        double acc = 0.0;
        for (int u = 0; u < layout.nv; ++u) {
          if (u == v) continue;
          acc += wv[u] * sp[v] * sp[u] * std::sqrt(rho.values[base + v] * rho.values[base + u]) *
                 std::sinh(xi[base + v] - xi[base + u]);
        }
        g[base + v] = 2.0 * lam * acc;
      }
    }
    for (int i = 0; i < s->size(); ++i) {
      const int r = j.reflection.perm[i];
      g[i] += std::abs(j.a_field.values[i]) * std::sqrt(rho.values[i] * rho.values[r]) *
              std::sinh(xi[i] - xi[r]);
    }
    return g;
  };
  p.symmetric = true;
  p.shift_invariant = true;
  attach_legendre_psi(p, cfg);
  return p;
}

// Bundle cache: <dir>/L.coo, mu.json, meta.json.
inline void save_bundle(const ModelBundle& b, const std::string& dir) {
  std::ofstream lf(dir + "/L.coo");
  write_coo(lf, b.L);
  std::ofstream mf(dir + "/mu.json");
  mf << to_json(b.mu).dump() << '\n';
  std::ofstream jf(dir + "/meta.json");
  jf << nlohmann::json{{"name", b.name}, {"params", b.params}, {"warnings", b.warnings}}.dump(2)
     << '\n';
}

}  // namespace nrgen
