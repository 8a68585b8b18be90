#pragma once

#include "nrgen/models.hpp"
#include "nrgen/rng.hpp"

#include <boost/math/distributions/chi_squared.hpp>

#include <cstdint>
#include <functional>
#include <limits>
#include <ostream>
#include <random>

namespace nrgen {

using GradFn = std::function<void(const double*, double*)>;

// Phase-space process z = (x, v) in R^d x R^d with flow x' = v, v' = -grad(drift),
// velocity refresh from N(0, I) at rate refresh_rate and bounces
// v -> R_x v at rate (v . grad U~)_+ when grad_U_tilde is set.
struct PdmpSpec {
  int dim = 1;
  Potential drift;
  double refresh_rate = 1.0;
  GradFn grad_U_tilde;
  std::uint64_t rng_seed = kDefaultSeed;
  std::uint64_t stream = 0;
  double h_flow = 0.01;
  double skeleton_dt = 0.1;
  // Flow horizon over which one thinning bound is used.
  double segment_length = 1.0;
  double bound_inflation = 1.5;
  double bound_floor = 1e-3;

  bool has_bounce() const { return static_cast<bool>(grad_U_tilde); }

  void validate() const {
    if (dim < 1) throw std::invalid_argument("PdmpSpec: dim must be >= 1");
    if (!drift.grad) throw std::invalid_argument("PdmpSpec: drift potential has no gradient");
    if (!(refresh_rate >= 0.0) || !std::isfinite(refresh_rate))
      throw std::invalid_argument("PdmpSpec: refresh_rate must be finite and >= 0");
    if (!(h_flow > 0.0) || !(skeleton_dt > 0.0) || !(segment_length > 0.0))
      throw std::invalid_argument("PdmpSpec: h_flow, skeleton_dt and segment_length must be > 0");
    if (!(bound_inflation >= 1.0) || !(bound_floor > 0.0))
      throw std::invalid_argument("PdmpSpec: bound_inflation >= 1 and bound_floor > 0 required");
  }
};

enum class EventKind { refresh, bounce };

inline std::string to_string(EventKind k) { return k == EventKind::refresh ? "refresh" : "bounce"; }

struct PdmpEvent {
  double t = 0.0;
  EventKind kind = EventKind::refresh;
  Vec before, after;
};

struct Trajectory {
  int dim = 1;
  std::vector<PdmpEvent> events;
  // Skeleton states at t = k * skeleton_dt, stored row-major with 2*dim entries per row.
  std::vector<double> skeleton_t;
  std::vector<double> skeleton;
  double skeleton_dt = 0.1;
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
  double total_time = 0.0;
  long proposals = 0;
  long bound_violations = 0;
  Vec final_state;

  int width() const { return 2 * dim; }
  size_t size() const { return skeleton_t.size(); }
  Eigen::Map<const Vec> state(size_t i) const {
    return Eigen::Map<const Vec>(skeleton.data() + i * width(), width());
  }

  long count(EventKind k) const {
    long c = 0;
    for (const auto& e : events) c += e.kind == k;
    return c;
  }

  // Skeleton rows, then event rows (state after the jump), merged in time order.
  void write_csv(std::ostream& os) const {
    os << "t";
    for (int k = 0; k < dim; ++k) os << ",x" << k + 1;
    for (int k = 0; k < dim; ++k) os << ",v" << k + 1;
    os << ",event_kind\n";
    os.precision(17);
    auto row = [&](double t, const double* z, const char* kind) {
      os << t;
      for (int k = 0; k < width(); ++k) os << ',' << z[k];
      os << ',' << kind << '\n';
    };
    size_t e = 0;
    for (size_t i = 0; i < size(); ++i) {
      while (e < events.size() && events[e].t < skeleton_t[i]) {
        row(events[e].t, events[e].after.data(), to_string(events[e].kind).c_str());
        ++e;
      }
      row(skeleton_t[i], skeleton.data() + i * width(), "skeleton");
    }
    for (; e < events.size(); ++e)
      row(events[e].t, events[e].after.data(), to_string(events[e].kind).c_str());
  }
};

namespace detail {

inline void leapfrog(const Potential& V, int d, double* z, double dt, double* g) {
  double* x = z;
  double* v = z + d;
  V.grad(x, g);
  for (int k = 0; k < d; ++k) v[k] -= 0.5 * dt * g[k];
  for (int k = 0; k < d; ++k) x[k] += dt * v[k];
  V.grad(x, g);
  for (int k = 0; k < d; ++k) v[k] -= 0.5 * dt * g[k];
}

inline double hamiltonian_energy(const Potential& V, int d, const double* z) {
  double e = V(z);
  for (int k = 0; k < d; ++k) e += 0.5 * z[d + k] * z[d + k];
  return e;
}

}  // namespace detail

inline double bounce_rate(const PdmpSpec& spec, const Vec& z) {
  if (!spec.has_bounce()) return 0.0;
  const int d = spec.dim;
  std::vector<double> g(d);
  spec.grad_U_tilde(z.data(), g.data());
  double s = 0.0;
  for (int k = 0; k < d; ++k) s += z[d + k] * g[k];
  return s > 0.0 ? s : 0.0;
}

// R_x v = v - 2 (v.g)/|g|^2 g with g = grad U~(x).
inline Vec apply_bounce(const PdmpSpec& spec, const Vec& z) {
  const int d = spec.dim;
  std::vector<double> g(d);
  spec.grad_U_tilde(z.data(), g.data());
  double vg = 0.0, gg = 0.0;
  for (int k = 0; k < d; ++k) {
    vg += z[d + k] * g[k];
    gg += g[k] * g[k];
  }
  Vec out = z;
  if (gg == 0.0) return out;
  if (d == 1) {
    out[1] = -z[1];
    return out;
  }
  for (int k = 0; k < d; ++k) out[d + k] = z[d + k] - 2.0 * vg / gg * g[k];
  return out;
}

inline Trajectory simulate(const PdmpSpec& spec, const Vec& z0, double T) {
  spec.validate();
  const int d = spec.dim;
  const int w = 2 * d;
  if (z0.size() != w) throw std::invalid_argument("simulate: initial state must have size 2*dim");
  if (!z0.allFinite()) throw std::invalid_argument("simulate: non-finite initial state");
  if (!(T > 0.0) || !std::isfinite(T)) throw std::invalid_argument("simulate: T must be positive");

  Trajectory tr;
  tr.dim = d;
  tr.skeleton_dt = spec.skeleton_dt;
  tr.seed = spec.rng_seed;
  tr.stream = spec.stream;
  tr.total_time = T;

  std::mt19937_64 rng_refresh = make_stream(spec.rng_seed, 1, spec.stream);
  std::mt19937_64 rng_thin = make_stream(spec.rng_seed, 2, spec.stream);
  std::exponential_distribution<double> expo(1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  const double inf = std::numeric_limits<double>::infinity();
  auto draw_refresh_gap = [&]() {
    return spec.refresh_rate > 0.0 ? expo(rng_refresh) / spec.refresh_rate : inf;
  };

  const long n_skel = static_cast<long>(std::floor(T / spec.skeleton_dt + 1e-9)) + 1;
  tr.skeleton_t.reserve(n_skel);
  tr.skeleton.reserve(n_skel * w);

  Vec z = z0;
  double t = 0.0;
  double next_refresh = draw_refresh_gap();
  long next_skel = 0;
  std::vector<double> nodes;
  std::vector<double> node_t;
  std::vector<double> g(d);
  Vec tmp(w);

  // State at time s inside the current segment: partial leapfrog step from the preceding node.
  auto state_at = [&](double s, Vec& out) {
    const int m = static_cast<int>(node_t.size()) - 1;
    int k = static_cast<int>((s - node_t[0]) / spec.h_flow);
    k = std::clamp(k, 0, std::max(m - 1, 0));
    while (k > 0 && node_t[k] > s) --k;
    while (k < m && node_t[k + 1] <= s) ++k;
    out = Eigen::Map<const Vec>(nodes.data() + k * w, w);
    const double dt = s - node_t[k];
    if (dt > 0.0) detail::leapfrog(spec.drift, d, out.data(), dt, g.data());
  };

  while (t < T) {
    const double seg_end = std::min({t + spec.segment_length, T, next_refresh});
    // Deterministic flow over [t, seg_end].
    nodes.assign(z.data(), z.data() + w);
    node_t.assign(1, t);
    {
      Vec cur = z;
      double s = t;
      while (s < seg_end) {
        const double dt = std::min(spec.h_flow, seg_end - s);
        detail::leapfrog(spec.drift, d, cur.data(), dt, g.data());
        s = (seg_end - s <= spec.h_flow) ? seg_end : s + dt;
        if (!cur.allFinite()) throw std::runtime_error("simulate: non-finite state at t=" + std::to_string(s));
        nodes.insert(nodes.end(), cur.data(), cur.data() + w);
        node_t.push_back(s);
      }
    }

    double event_t = seg_end;
    bool bounced = false;
    Vec zev;
    if (spec.has_bounce()) {
      double mx = 0.0;
      for (size_t k = 0; k < node_t.size(); ++k) {
        const Vec zk = Eigen::Map<const Vec>(nodes.data() + k * w, w);
        mx = std::max(mx, bounce_rate(spec, zk));
      }
      double bound = std::max(spec.bound_inflation * mx, spec.bound_floor);
      for (;;) {
        double tau = t;
        bool violated = false;
        bool found = false;
        for (;;) {
          tau += expo(rng_thin) / bound;
          if (tau >= seg_end) break;
          state_at(tau, tmp);
          const double r = bounce_rate(spec, tmp);
          ++tr.proposals;
          if (r > bound) {
            violated = true;
            break;
          }
          if (unif(rng_thin) * bound < r) {
            found = true;
            break;
          }
        }
        if (violated) {
          bound *= 2.0;
          ++tr.bound_violations;
          continue;
        }
        if (found) {
          bounced = true;
          event_t = tau;
          zev = tmp;
        }
        break;
      }
    }

    // Skeleton points inside [t, event_t), plus T itself at the end of the run.
    const bool last = !bounced && event_t >= T;
    while (next_skel < n_skel) {
      const double s = next_skel * spec.skeleton_dt;
      if (!(s < event_t || (last && s <= T))) break;
      state_at(std::min(s, seg_end), tmp);
      tr.skeleton_t.push_back(s);
      tr.skeleton.insert(tr.skeleton.end(), tmp.data(), tmp.data() + w);
      ++next_skel;
    }

    if (bounced) {
      PdmpEvent e;
      e.t = event_t;
      e.kind = EventKind::bounce;
      e.before = zev;
      e.after = apply_bounce(spec, zev);
      z = e.after;
      tr.events.push_back(std::move(e));
    } else {
      z = Eigen::Map<const Vec>(nodes.data() + (node_t.size() - 1) * w, w);
      if (seg_end == next_refresh && next_refresh < T) {
        PdmpEvent e;
        e.t = event_t;
        e.kind = EventKind::refresh;
        e.before = z;
        for (int k = 0; k < d; ++k) z[d + k] = normal(rng_refresh);
        e.after = z;
        tr.events.push_back(std::move(e));
        next_refresh += draw_refresh_gap();
      }
    }
    t = event_t;
  }
  tr.final_state = z;
  return tr;
}

// Occupation histogram of the skeleton by nearest grid node; samples outside the
// grid box are dropped.
inline Density empirical_density(const Trajectory& tr, const SpacePtr& grid) {
  if (tr.size() == 0) throw std::invalid_argument("empirical_density: empty skeleton");
  if (grid->kind() != StateSpace::Kind::grid || grid->dim() != tr.width())
    throw std::invalid_argument("empirical_density: grid dimension must be 2*dim");
  const int w = tr.width();
  Vec counts = Vec::Zero(grid->size());
  std::vector<int> m(w);
  long inside = 0;
  for (size_t i = 0; i < tr.size(); ++i) {
    const double* z = tr.skeleton.data() + i * w;
    bool ok = true;
    for (int k = 0; k < w && ok; ++k) {
      const Axis& a = grid->axis(k);
      const double h = a.spacing();
      if (a.boundary == Boundary::periodic) {
        const double span = a.max - a.min;
        double u = std::fmod(z[k] - a.min, span);
        if (u < 0) u += span;
        m[k] = static_cast<int>(std::lround(u / h)) % a.n;
      } else {
        if (z[k] < a.min || z[k] > a.max) {
          ok = false;
          break;
        }
        m[k] = std::clamp(static_cast<int>(std::lround((z[k] - a.coord(0)) / h)), 0, a.n - 1);
      }
    }
    if (!ok) continue;
    counts[grid->linear_index(m)] += 1.0;
    ++inside;
  }
  if (inside == 0) throw std::invalid_argument("empirical_density: all samples lie outside the grid");
  return Density::from_masses(grid, counts / static_cast<double>(inside));
}

// Exact N(0, I) masses of the nearest-node cells of a truncated grid, normalized
// over the grid box.
inline Density gaussian_cell_masses(const SpacePtr& grid) {
  const int D = grid->dim();
  std::vector<std::vector<double>> per_axis(D);
  auto Phi = [](double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); };
  for (int k = 0; k < D; ++k) {
    const Axis& a = grid->axis(k);
    if (a.boundary != Boundary::truncated)
      throw std::invalid_argument("gaussian_cell_masses: truncated axes only");
    const double h = a.spacing();
    for (int j = 0; j < a.n; ++j) {
      const double lo = j == 0 ? a.min : a.coord(j) - 0.5 * h;
      const double hi = j == a.n - 1 ? a.max : a.coord(j) + 0.5 * h;
      per_axis[k].push_back(Phi(hi) - Phi(lo));
    }
  }
  Vec masses(grid->size());
  for (int i = 0; i < grid->size(); ++i) {
    double p = 1.0;
    for (int k = 0; k < D; ++k) p *= per_axis[k][grid->index_along(i, k)];
    masses[i] = p;
  }
  masses /= compensated_sum(masses);
  return Density::from_masses(grid, masses);
}

inline double total_variation(const Density& a, const Density& b) {
  require_same_space(a.space, b.space, "total_variation");
  return 0.5 * weighted_sum(a.space, (a.values - b.values).cwiseAbs());
}

struct ReversalOptions {
  double burn_in = 0.1;
  int max_pairs = 1000;
  int min_pairs = 1000;
  int permutations = 199;
  double level = 0.01;
  std::uint64_t seed = kDefaultSeed;
};

struct ReversalReport {
  double distance = 0.0;
  double threshold = 0.0;
  double p_value = 1.0;
  int pairs = 0;
  bool pass = false;

  nlohmann::json to_json() const {
    return {{"distance", distance}, {"threshold", threshold}, {"p_value", p_value},
            {"pairs", pairs}, {"pass", pass}};
  }
};

using StateMap = std::function<Vec(const Vec&)>;

inline StateMap phase_velocity_flip(int d) {
  return [d](const Vec& z) {
    Vec out = z;
    out.tail(d) = -out.tail(d);
    return out;
  };
}

// Energy distance between the laws of (z_t, z_{t+lag}) and (F z_{t+lag}, F z_t),
// with a permutation test that swaps the two members of each pair. Under
// generalized reversibility that swap leaves the joint law unchanged.
inline ReversalReport reversal_statistic(const Trajectory& tr, const StateMap& flip, double lag,
                                         const ReversalOptions& opt = {}) {
  if (lag < 0.0) throw std::invalid_argument("reversal_statistic: lag must be >= 0");
  const long n = static_cast<long>(tr.size());
  const long L = std::lround(lag / tr.skeleton_dt);
  const long start = static_cast<long>(std::ceil(opt.burn_in * n));
  const long avail = n - L - start;
  if (avail < opt.min_pairs)
    throw std::invalid_argument("reversal_statistic: insufficient samples (" + std::to_string(std::max(avail, 0L)) +
                                " pairs)");
  const int N = static_cast<int>(std::min<long>(opt.max_pairs, avail));
  const int w = tr.width();
  Eigen::MatrixXd pts(2 * N, 2 * w);
  for (int i = 0; i < N; ++i) {
    const long a = start + static_cast<long>((static_cast<double>(i) * avail) / N);
    const Vec za = tr.state(a);
    const Vec zb = tr.state(a + L);
    pts.row(i) << za.transpose(), zb.transpose();
    pts.row(N + i) << flip(zb).transpose(), flip(za).transpose();
  }
  Eigen::MatrixXd D(2 * N, 2 * N);
  for (int i = 0; i < 2 * N; ++i) {
    D(i, i) = 0.0;
    for (int j = i + 1; j < 2 * N; ++j) D(i, j) = D(j, i) = (pts.row(i) - pts.row(j)).norm();
  }
  // With labels sigma = +1 / -1 the energy distance is -sigma' D sigma / N^2.
  auto stat = [&](const Vec& sigma) { return -sigma.dot(D * sigma) / (static_cast<double>(N) * N); };
  Vec sigma(2 * N);
  sigma.head(N).setOnes();
  sigma.tail(N).setConstant(-1.0);
  ReversalReport rep;
  rep.pairs = N;
  rep.distance = stat(sigma);
  std::mt19937_64 rng = make_stream(opt.seed, 7, 0);
  std::bernoulli_distribution coin(0.5);
  std::vector<double> perm;
  int exceed = 0;
  for (int p = 0; p < opt.permutations; ++p) {
    Vec s(2 * N);
    for (int i = 0; i < N; ++i) {
      const double c = coin(rng) ? -1.0 : 1.0;
      s[i] = c;
      s[N + i] = -c;
    }
    const double v = stat(s);
    perm.push_back(v);
    if (v >= rep.distance) ++exceed;
  }
  std::sort(perm.begin(), perm.end());
  const size_t q = std::min(perm.size() - 1, static_cast<size_t>(std::ceil((1.0 - opt.level) * perm.size())) - 1);
  rep.threshold = perm.empty() ? 0.0 : perm[q];
  rep.p_value = (1.0 + exceed) / (1.0 + opt.permutations);
  rep.pass = rep.p_value > opt.level;
  return rep;
}

struct ErgodicAverage {
  double mean = 0.0;
  double batch_means_se = 0.0;
  int batches = 0;
};

inline ErgodicAverage ergodic_average(const Trajectory& tr, const StateMap& f, int batches = 100) {
  const size_t n = tr.size();
  if (batches < 2 || n < static_cast<size_t>(batches))
    throw std::invalid_argument("ergodic_average: skeleton shorter than the batch count");
  Vec vals(n);
  for (size_t i = 0; i < n; ++i) {
    const Vec z = tr.state(i);
    vals[i] = f(z)[0];
  }
  const size_t per = n / batches;
  const size_t skip = n - per * batches;
  Vec means(batches);
  for (int b = 0; b < batches; ++b) means[b] = compensated_sum(vals.segment(skip + b * per, per)) / per;
  ErgodicAverage out;
  out.batches = batches;
  out.mean = compensated_sum(vals) / static_cast<double>(n);
  const double bm = means.mean();
  const double var = (means.array() - bm).square().sum() / (batches - 1);
  out.batch_means_se = std::sqrt(var / batches);
  return out;
}

inline StateMap scalar_map(std::function<double(const Vec&)> f) {
  return [f](const Vec& z) { return Vec::Constant(1, f(z)); };
}

// Kinetic Langevin reference: BAOAB splitting with friction gamma, unit temperature.
inline Trajectory langevin_baoab(const Potential& V, int d, double gamma, double dt, double T,
                                 std::uint64_t seed, double skeleton_dt, const Vec& z0) {
  if (!(dt > 0.0) || !(gamma >= 0.0) || !(T > 0.0))
    throw std::invalid_argument("langevin_baoab: dt, T > 0 and gamma >= 0 required");
  const long every = std::max(1L, std::lround(skeleton_dt / dt));
  Trajectory tr;
  tr.dim = d;
  tr.skeleton_dt = every * dt;
  tr.seed = seed;
  tr.total_time = T;
  std::mt19937_64 rng = make_stream(seed, 3, 0);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double c1 = std::exp(-gamma * dt);
  const double c2 = std::sqrt(1.0 - c1 * c1);
  Vec z = z0;
  std::vector<double> g(d);
  double* x = z.data();
  double* v = z.data() + d;
  const long steps = std::lround(T / dt);
  V.grad(x, g.data());
  for (long s = 0; s <= steps; ++s) {
    if (s % every == 0) {
      tr.skeleton_t.push_back(s * dt);
      tr.skeleton.insert(tr.skeleton.end(), z.data(), z.data() + 2 * d);
    }
    if (s == steps) break;
    for (int k = 0; k < d; ++k) v[k] -= 0.5 * dt * g[k];
    for (int k = 0; k < d; ++k) x[k] += 0.5 * dt * v[k];
    for (int k = 0; k < d; ++k) v[k] = c1 * v[k] + c2 * normal(rng);
    for (int k = 0; k < d; ++k) x[k] += 0.5 * dt * v[k];
    V.grad(x, g.data());
    for (int k = 0; k < d; ++k) v[k] -= 0.5 * dt * g[k];
    if (!z.allFinite()) throw std::runtime_error("langevin_baoab: non-finite state");
  }
  tr.final_state = z;
  return tr;
}

// Max |H(z_t) - H(z_0)| along the pure leapfrog flow over [0, T].
inline double flow_energy_error(const Potential& V, int d, const Vec& z0, double h, double T) {
  Vec z = z0;
  std::vector<double> g(d);
  const double e0 = detail::hamiltonian_energy(V, d, z.data());
  double err = 0.0;
  const long steps = std::lround(T / h);
  for (long s = 0; s < steps; ++s) {
    detail::leapfrog(V, d, z.data(), h, g.data());
    err = std::max(err, std::abs(detail::hamiltonian_energy(V, d, z.data()) - e0));
  }
  return err;
}

struct ThinningTest {
  double chi2 = 0.0;
  int dof = 0;
  double p_value = 0.0;
  bool pass = false;
  int trials = 0;
  long violations = 0;
};

// First-bounce times from z0 over `trials` independent streams, compared with the
// time-inhomogeneous exponential law P(tau > t) = exp(-int_0^t rate(z_s) ds)
// along the pure flow. Bins whose expected count is below 5 are merged.
inline ThinningTest thinning_chi2(PdmpSpec spec, const Vec& z0, double horizon, int trials,
                                  int bins = 20, double level = 0.01) {
  if (!spec.has_bounce()) throw std::invalid_argument("thinning_chi2: spec has no bounce channel");
  spec.refresh_rate = 0.0;
  const int d = spec.dim;
  // Cumulative rate on a fine flow grid (trapezoid).
  const int fine = 20000;
  const double hf = horizon / fine;
  std::vector<double> Lam(fine + 1, 0.0);
  {
    Vec z = z0;
    std::vector<double> g(d);
    double prev = bounce_rate(spec, z);
    for (int k = 1; k <= fine; ++k) {
      detail::leapfrog(spec.drift, d, z.data(), hf, g.data());
      const double r = bounce_rate(spec, z);
      Lam[k] = Lam[k - 1] + 0.5 * hf * (prev + r);
      prev = r;
    }
  }
  auto survival = [&](double t) {
    const double u = std::clamp(t / hf, 0.0, static_cast<double>(fine));
    const int k = std::min(static_cast<int>(u), fine - 1);
    return std::exp(-(Lam[k] + (u - k) * (Lam[k + 1] - Lam[k])));
  };
  std::vector<double> expected(bins + 1), observed(bins + 1, 0.0);
  for (int b = 0; b < bins; ++b)
    expected[b] = trials * (survival(b * horizon / bins) - survival((b + 1) * horizon / bins));
  expected[bins] = trials * survival(horizon);

  ThinningTest out;
  out.trials = trials;
  for (int i = 0; i < trials; ++i) {
    spec.stream = static_cast<std::uint64_t>(i);
    const Trajectory tr = simulate(spec, z0, horizon);
    out.violations += tr.bound_violations;
    int b = bins;
    for (const auto& e : tr.events)
      if (e.kind == EventKind::bounce) {
        b = std::min(bins - 1, static_cast<int>(e.t / horizon * bins));
        break;
      }
    observed[b] += 1.0;
  }
  // Merge low-expectation bins forward, then any remainder backward.
  std::vector<double> E, O;
  double ae = 0.0, ao = 0.0;
  for (int b = 0; b <= bins; ++b) {
    ae += expected[b];
    ao += observed[b];
    if (ae >= 5.0) {
      E.push_back(ae);
      O.push_back(ao);
      ae = ao = 0.0;
    }
  }
  if ((ae > 0.0 || ao > 0.0) && !E.empty()) {
    E.back() += ae;
    O.back() += ao;
  }
  for (size_t k = 0; k < E.size(); ++k) out.chi2 += (O[k] - E[k]) * (O[k] - E[k]) / E[k];
  out.dof = static_cast<int>(E.size()) - 1;
  if (out.dof < 1) {
    out.p_value = 1.0;
  } else {
    boost::math::chi_squared dist(out.dof);
    out.p_value = boost::math::cdf(boost::math::complement(dist, out.chi2));
  }
  out.pass = out.p_value >= level;
  return out;
}

}  // namespace nrgen
