#pragma once

#include "nrgen/models.hpp"

#include <map>
#include <set>

namespace nrgen {

enum class Scheme { explicit_rk4, implicit_euler };

inline std::string to_string(Scheme s) {
  return s == Scheme::implicit_euler ? "implicit-euler" : "explicit-rk4";
}

inline Scheme scheme_from_string(const std::string& s) {
  if (s == "explicit-rk4" || s == "rk4") return Scheme::explicit_rk4;
  if (s == "implicit-euler") return Scheme::implicit_euler;
  throw std::invalid_argument("unknown scheme '" + s + "'");
}

class StabilityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// 0.9 * 2 / ||L'||_inf.
inline double explicit_stability_bound(const LinOp& L_dual) {
  return 0.9 * 2.0 / std::max(L_dual.norm_inf(), 1e-300);
}

// Holds the factorization for implicit Euler so repeated steps reuse it.
class FpStepper {
 public:
  FpStepper(const LinOp& L_dual, double dt, Scheme scheme) : Ld_(L_dual), dt_(dt), scheme_(scheme) {
    if (!(dt > 0.0)) throw std::invalid_argument("step_fp: dt must be > 0");
    bound_ = explicit_stability_bound(L_dual);
    if (scheme == Scheme::explicit_rk4 && dt > bound_)
      throw StabilityError("step_fp: dt " + std::to_string(dt) + " above explicit bound " +
                           std::to_string(bound_));
    if (scheme == Scheme::implicit_euler) {
      const int n = Ld_.size();
      Eigen::SparseMatrix<double> I(n, n);
      I.setIdentity();
      Eigen::SparseMatrix<double> M = I - dt * Eigen::SparseMatrix<double>(Ld_.matrix);
      lu_ = std::make_shared<Eigen::SparseLU<Eigen::SparseMatrix<double>>>();
      lu_->analyzePattern(M);
      lu_->factorize(M);
      if (lu_->info() != Eigen::Success)
        throw std::runtime_error("step_fp: implicit Euler factorization failed");
    }
  }

  double stability_bound() const { return bound_; }

  // Advances rho in place; returns the clipped (negative) mass.
  double step(Vec& rho) const {
    if (scheme_ == Scheme::explicit_rk4) {
      const Vec k1 = Ld_.matrix * rho;
      const Vec k2 = Ld_.matrix * (rho + 0.5 * dt_ * k1);
      const Vec k3 = Ld_.matrix * (rho + 0.5 * dt_ * k2);
      const Vec k4 = Ld_.matrix * (rho + dt_ * k3);
      rho += (dt_ / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    } else {
      Vec next = lu_->solve(rho);
      if (lu_->info() != Eigen::Success || !next.allFinite())
        throw std::runtime_error("step_fp: implicit solve failed");
      rho = next;
    }
    const Vec& w = Ld_.space->weights();
    double clipped = 0.0;
    for (Eigen::Index i = 0; i < rho.size(); ++i)
      if (rho[i] < 0.0) {
        clipped += -rho[i] * w[i];
        rho[i] = 0.0;
      }
    if (clipped > 0.0) rho /= compensated_sum(rho.cwiseProduct(w));
    return clipped;
  }

 private:
  LinOp Ld_;
  double dt_;
  Scheme scheme_;
  double bound_ = 0.0;
  std::shared_ptr<Eigen::SparseLU<Eigen::SparseMatrix<double>>> lu_;
};

inline Density step_fp(const LinOp& L_dual, const Density& rho, double dt,
                       Scheme scheme = Scheme::explicit_rk4, double* clipped = nullptr) {
  FpStepper st(L_dual, dt, scheme);
  Vec v = rho.values;
  const double c = st.step(v);
  if (clipped) *clipped = c;
  return Density(rho.space, v);
}

struct PdmpEntropyTerms {
  double T1 = 0.0;
  double T2 = 0.0;
  double lq_term = 0.0;
  double ljs_term = 0.0;
  // int a f + 1/2 int a f log(f o R / f)
  double antisym_pairing = 0.0;
  double total = 0.0;
  double scale = 0.0;
  bool inequality_holds = false;

  double T12() const { return T1 + T2; }
  nlohmann::json to_json() const {
    return {{"T1", T1},
            {"T2", T2},
            {"T1+T2", T12()},
            {"lq_term", lq_term},
            {"ljs_term", ljs_term},
            {"antisym_pairing", antisym_pairing},
            {"total", total},
            {"scale", scale},
            {"inequality_holds", inequality_holds}};
  }
};

inline PdmpEntropyTerms pdmp_entropy_terms(const ModelBundle& b, const Density& rho,
                                           double rel_tol = 1e-10) {
  if (!b.jump) throw std::invalid_argument("pdmp_entropy_terms: bundle has no jump structure");
  require_positive(rho, "pdmp_entropy_terms");
  const auto& j = *b.jump;
  const Vec& f = rho.values;
  const Vec& w = b.space()->weights();
  const Vec& a = j.a_field.values;
  const int n = b.space()->size();
  Vec t1(n), t2(n), ljs(n), ap(n);
  for (int i = 0; i < n; ++i) {
    const int r = j.reflection.perm[i];
    const double lr = std::log(f[r] / f[i]);
    const double apl = std::max(a[i], 0.0);
    t1[i] = w[i] * apl * (f[i] - f[r]);
    t2[i] = w[i] * apl * f[i] * lr;
    ljs[i] = 0.5 * w[i] * std::abs(a[i]) * f[i] * lr;
    ap[i] = w[i] * a[i] * f[i] * (1.0 + 0.5 * lr);
  }
  PdmpEntropyTerms out;
  out.T1 = compensated_sum(t1);
  out.T2 = compensated_sum(t2);
  out.ljs_term = compensated_sum(ljs);
  out.antisym_pairing = compensated_sum(ap);
  if (b.L_Q) {
    const Vec lq = adjoint_l2(*b.L_Q).apply(f);
    const Vec ds = entropy_gradient(rho, b.mu).values;
    out.lq_term = compensated_sum(lq.cwiseProduct(ds).cwiseProduct(w));
  }
  out.total = out.lq_term + out.ljs_term + out.antisym_pairing;
  Vec sc(n);
  for (int i = 0; i < n; ++i) sc[i] = w[i] * std::max(a[i], 0.0) * f[i];
  out.scale = compensated_sum(sc);
  out.inequality_holds = out.T12() <= rel_tol * std::max(out.scale, 1.0);
  return out;
}

struct MonitorRecord {
  double t = 0.0;
  std::map<std::string, double> values;
};

struct EvolutionTrace {
  std::vector<double> times;
  std::vector<MonitorRecord> monitors;
  std::vector<std::pair<double, Vec>> snapshots;
  SpacePtr space;
  double dt = 0.0;
  std::string scheme;
  double stability_bound = 0.0;
  double clipped_total = 0.0;
  bool aborted = false;
  std::string abort_reason;

  std::vector<double> series(const std::string& key) const {
    std::vector<double> out;
    for (const auto& m : monitors) out.push_back(m.values.at(key));
    return out;
  }

  void write_csv(std::ostream& os) const {
    std::vector<std::string> keys;
    if (!monitors.empty())
      for (const auto& kv : monitors.front().values) keys.push_back(kv.first);
    // Fixed leading columns, then the rest alphabetically.
    const std::vector<std::string> lead = {"mass", "min_value", "S_mu", "h_norm2_mu", "defect"};
    std::vector<std::string> order;
    for (const auto& k : lead)
      if (std::find(keys.begin(), keys.end(), k) != keys.end()) order.push_back(k);
    for (const auto& k : keys)
      if (std::find(lead.begin(), lead.end(), k) == lead.end()) order.push_back(k);
    os << "t";
    for (const auto& k : order) os << ',' << k;
    os << '\n' << std::setprecision(17);
    for (const auto& m : monitors) {
      os << m.t;
      for (const auto& k : order) os << ',' << m.values.at(k);
      os << '\n';
    }
  }
};

struct EvolveOptions {
  Scheme scheme = Scheme::explicit_rk4;
  std::set<std::string> monitors = {"mass", "min_value", "S_mu", "h_norm2_mu", "defect"};
  double clip_budget = 1e-6;
  int snapshot_every = 0;
};

namespace detail {

inline LinOp antisymmetric_part(const ModelBundle& b) {
  if (b.L_A) return *b.L_A;
  if (b.B) return *b.B;
  return split_sym_antisym(b.L, b.mu).antisym;
}

}  // namespace detail

// dt <= 0 picks the explicit bound (RK4) or 10x of it (implicit Euler).
inline EvolutionTrace evolve(const ModelBundle& b, const Density& rho0, double T, double dt,
                             const EvolveOptions& opt = {}) {
  require_same_space(b.space(), rho0.space, "evolve");
  require_positive(rho0, "evolve");
  if (!(T > 0.0)) throw std::invalid_argument("evolve: T must be > 0");
  EvolutionTrace tr;
  tr.space = b.space();
  tr.stability_bound = explicit_stability_bound(b.L_dual);
  if (dt <= 0.0) dt = opt.scheme == Scheme::explicit_rk4 ? tr.stability_bound : 10.0 * tr.stability_bound;
  const long steps = static_cast<long>(std::ceil(T / dt - 1e-12));
  dt = T / static_cast<double>(steps);
  tr.dt = dt;
  tr.scheme = to_string(opt.scheme);
  FpStepper st(b.L_dual, dt, opt.scheme);
  const Vec& w = b.space()->weights();
  const Vec& mu = b.mu.values;
  const bool want_defect = opt.monitors.count("defect") > 0;
  const bool want_pdmp = opt.monitors.count("pdmp") > 0 && b.jump;
  LinOp Wdual;
  if (want_defect) Wdual = adjoint_l2(detail::antisymmetric_part(b));

  auto record = [&](double t, const Vec& rho) {
    MonitorRecord m;
    m.t = t;
    if (opt.monitors.count("mass")) m.values["mass"] = compensated_sum(rho.cwiseProduct(w));
    if (opt.monitors.count("min_value")) m.values["min_value"] = rho.minCoeff();
    if (opt.monitors.count("S_mu")) m.values["S_mu"] = relative_entropy_raw(rho, mu, w);
    if (opt.monitors.count("h_norm2_mu"))
      m.values["h_norm2_mu"] = compensated_sum(rho.cwiseProduct(rho).cwiseQuotient(mu).cwiseProduct(w));
    if (want_defect) {
      const Vec wr = Wdual.apply(rho);
      Vec ds(rho.size());
      for (Eigen::Index i = 0; i < rho.size(); ++i)
        ds[i] = std::log(std::max(rho[i], kPositivityFloor) / mu[i]) + 1.0;
      m.values["defect"] = compensated_sum(wr.cwiseProduct(ds).cwiseProduct(w));
    }
    if (want_pdmp) {
      if (rho.minCoeff() >= kPositivityFloor) {
        const auto terms = pdmp_entropy_terms(b, Density(b.space(), rho));
        m.values["T1"] = terms.T1;
        m.values["T2"] = terms.T2;
        m.values["T1+T2"] = terms.T12();
        m.values["lq_term"] = terms.lq_term;
        m.values["ljs_term"] = terms.ljs_term;
        m.values["antisym_pairing"] = terms.antisym_pairing;
        m.values["total"] = terms.total;
      } else {
        for (const char* k : {"T1", "T2", "T1+T2", "lq_term", "ljs_term", "antisym_pairing", "total"})
          m.values[k] = std::numeric_limits<double>::quiet_NaN();
      }
    }
    tr.times.push_back(t);
    tr.monitors.push_back(std::move(m));
  };

  Vec rho = rho0.values;
  record(0.0, rho);
  if (opt.snapshot_every > 0) tr.snapshots.emplace_back(0.0, rho);
  for (long k = 1; k <= steps; ++k) {
    tr.clipped_total += st.step(rho);
    if (!rho.allFinite()) {
      tr.aborted = true;
      tr.abort_reason = "non-finite density";
      break;
    }
    const double t = dt * static_cast<double>(k);
    record(t, rho);
    if (opt.snapshot_every > 0 && k % opt.snapshot_every == 0) tr.snapshots.emplace_back(t, rho);
    if (tr.clipped_total > opt.clip_budget) {
      tr.aborted = true;
      tr.abort_reason = "clipped mass " + std::to_string(tr.clipped_total) + " exceeds budget";
      break;
    }
  }
  return tr;
}

struct EntropyDecayReport {
  bool monotone = true;
  double max_uptick = 0.0;
  double first_violation_t = -1.0;
  double tol = 0.0;
  nlohmann::json to_json() const {
    return {{"monotone", monotone},
            {"max_uptick", max_uptick},
            {"first_violation_t", first_violation_t},
            {"tol", tol}};
  }
};

inline EntropyDecayReport entropy_decay_report(const EvolutionTrace& tr) {
  if (tr.monitors.empty() || !tr.monitors.front().values.count("S_mu"))
    throw std::invalid_argument("entropy_decay_report: trace has no S_mu monitor");
  const auto s = tr.series("S_mu");
  EntropyDecayReport r;
  r.tol = 1e-10 * std::abs(s.front()) + 1e-12;
  for (size_t k = 1; k < s.size(); ++k) {
    const double up = s[k] - s[k - 1];
    if (up > r.max_uptick) r.max_uptick = up;
    if (up > r.tol && r.first_violation_t < 0) r.first_violation_t = tr.times[k];
  }
  r.monotone = r.max_uptick <= r.tol;
  return r;
}

}  // namespace nrgen
