#pragma once

#include "nrgen/statespace.hpp"

#include <ceres/ceres.h>

#include <functional>
#include <limits>

namespace nrgen {

class LegendreError : public std::runtime_error {
 public:
  LegendreError(const std::string& msg, double best) : std::runtime_error(msg), best_(best) {}
  double best_value() const { return best_; }

 private:
  double best_;
};

enum class LegendreStatus { converged, unbounded, nonconvex, max_iterations, failed };

inline std::string to_string(LegendreStatus s) {
  switch (s) {
    case LegendreStatus::converged: return "converged";
    case LegendreStatus::unbounded: return "unbounded";
    case LegendreStatus::nonconvex: return "nonconvex";
    case LegendreStatus::max_iterations: return "max_iterations";
    case LegendreStatus::failed: return "failed";
  }
  return "failed";
}

struct LegendreConfig {
  int max_iterations = 500;
  // Max-norm of the raw (weighted) gradient of the inner objective.
  double gradient_tol = 1e-9;
  int max_states = 4096;
  // Restrict the search to w-mean-zero fields.
  bool project_mean_zero = false;
  double divergence_threshold = 1e12;
};

struct LegendreResult {
  double value = 0.0;
  Vec maximizer;
  LegendreStatus status = LegendreStatus::failed;
  int iterations = 0;
  double grad_norm = 0.0;
  std::string message;

  bool ok() const { return status == LegendreStatus::converged; }
  double value_or_throw() const {
    if (status == LegendreStatus::unbounded) return std::numeric_limits<double>::infinity();
    if (!ok()) throw LegendreError("legendre_transform: " + to_string(status) + " " + message, value);
    return value;
  }
};

using ScalarFn = std::function<double(const Vec&)>;
using FieldFn = std::function<Vec(const Vec&)>;

namespace detail {

// f(u) = phi(Pu) - <Pu, g>_w, minimized over u.
class ConjugateObjective final : public ceres::FirstOrderFunction {
 public:
  ConjugateObjective(const ScalarFn& phi, const FieldFn& grad, const Vec& w, const Vec& g,
                     bool project)
      : phi_(phi), grad_(grad), w_(w), g_(g), project_(project), wsum_(w.sum()) {}

  int NumParameters() const override { return static_cast<int>(w_.size()); }

  Vec project(const Vec& u) const {
    if (!project_) return u;
    return (u.array() - u.dot(w_) / wsum_).matrix();
  }

  bool eval(const Vec& u, double* cost, Vec* raw) const {
    const Vec xi = project(u);
    if (xi.cwiseAbs().maxCoeff() > 700.0) return false;
    const double p = phi_(xi);
    const double c = p - compensated_sum(xi.cwiseProduct(g_).cwiseProduct(w_));
    if (!std::isfinite(c)) return false;
    *cost = c;
    if (raw) {
      const Vec field = grad_(xi);
      if (!field.allFinite()) return false;
      Vec r = w_.cwiseProduct(field - g_);
      if (project_) r = (r - w_ * (r.sum() / wsum_)).eval();
      *raw = r;
    }
    return true;
  }

  bool Evaluate(const double* parameters, double* cost, double* gradient) const override {
    Eigen::Map<const Vec> u(parameters, NumParameters());
    Vec raw;
    if (!eval(u, cost, gradient ? &raw : nullptr)) return false;
    if (gradient) Eigen::Map<Vec>(gradient, NumParameters()) = raw;
    return true;
  }

 private:
  const ScalarFn& phi_;
  const FieldFn& grad_;
  const Vec& w_;
  const Vec& g_;
  bool project_;
  double wsum_;
};

// Watches accepted iterates for runaway descent and negative curvature.
class ConjugateWatch final : public ceres::IterationCallback {
 public:
  ConjugateWatch(const ConjugateObjective& obj, const double* params, double threshold)
      : obj_(obj), params_(params), threshold_(threshold) {}

  ceres::CallbackReturnType operator()(const ceres::IterationSummary& s) override {
    const int n = obj_.NumParameters();
    Vec u = Eigen::Map<const Vec>(params_, n);
    double c = 0.0;
    Vec g;
    if (!obj_.eval(u, &c, &g)) return ceres::SOLVER_CONTINUE;
    if (first_) {
      first_ = false;
      c0_ = c;
    } else {
      if (-c > threshold_ * (1.0 + std::abs(c0_)) && s.gradient_max_norm > 0.0) {
        unbounded = true;
        return ceres::SOLVER_ABORT;
      }
      const Vec ds = u - prev_u_;
      const Vec dg = g - prev_g_;
      const double curv = ds.dot(dg);
      if (curv < -1e-10 * ds.norm() * dg.norm() && ds.norm() > 0) {
        nonconvex = true;
        return ceres::SOLVER_ABORT;
      }
    }
    prev_u_ = u;
    prev_g_ = g;
    return ceres::SOLVER_CONTINUE;
  }

  bool unbounded = false;
  bool nonconvex = false;

 private:
  const ConjugateObjective& obj_;
  const double* params_;
  double threshold_;
  bool first_ = true;
  double c0_ = 0.0;
  Vec prev_u_, prev_g_;
};

// Steepest descent with the step located by a sign change of the directional
// derivative. Near the optimum the cost changes by less than its own rounding,
// so value-based line searches stall while the gradient still resolves the
// minimizer. Returns true once the gradient max-norm reaches tol.
inline bool polish_by_gradient(const ConjugateObjective& obj, Vec& u, double tol, int max_steps) {
  double c = 0.0;
  Vec r;
  if (!obj.eval(u, &c, &r)) return false;
  for (int step = 0; step < max_steps && r.cwiseAbs().maxCoeff() > tol; ++step) {
    const Vec d = -r;
    auto slope = [&](double a, Vec* ra) {
      double ca = 0.0;
      Vec rr;
      if (!obj.eval(u + a * d, &ca, &rr)) return std::numeric_limits<double>::quiet_NaN();
      if (ra) *ra = rr;
      return d.dot(rr);
    };
    double lo = 0.0, hi = 1e-6 / std::max(d.norm(), 1e-300);
    double s_hi = slope(hi, nullptr);
    int grow = 0;
    while (std::isfinite(s_hi) && s_hi < 0.0 && grow++ < 80) {
      lo = hi;
      hi *= 2.0;
      s_hi = slope(hi, nullptr);
    }
    if (!std::isfinite(s_hi) || s_hi < 0.0) return false;
    for (int k = 0; k < 60 && hi - lo > 1e-16 * hi; ++k) {
      const double mid = 0.5 * (lo + hi);
      const double sm = slope(mid, nullptr);
      if (!std::isfinite(sm)) return false;
      (sm < 0.0 ? lo : hi) = mid;
    }
    Vec r_new;
    const double a = 0.5 * (lo + hi);
    if (!std::isfinite(slope(a, &r_new))) return false;
    if (r_new.cwiseAbs().maxCoeff() >= r.cwiseAbs().maxCoeff()) return false;
    u += a * d;
    r = r_new;
  }
  return r.cwiseAbs().maxCoeff() <= tol;
}

}  // namespace detail

// sup_xi <xi, g>_w - phi(xi) by BFGS from xi0 (default 0).
inline LegendreResult legendre_transform(const ScalarFn& phi, const FieldFn& grad, const Vec& w,
                                         const Vec& g, const LegendreConfig& cfg = {},
                                         const Vec* xi0 = nullptr) {
  const int n = static_cast<int>(w.size());
  if (n > cfg.max_states)
    throw std::invalid_argument("legendre_transform: state space larger than configured cap");
  if (g.size() != n) throw std::invalid_argument("legendre_transform: size mismatch");
  LegendreResult res;
  detail::ConjugateObjective* obj = new detail::ConjugateObjective(phi, grad, w, g, cfg.project_mean_zero);
  ceres::GradientProblem problem(obj);  // takes ownership
  Vec u = xi0 ? *xi0 : Vec::Zero(n);
  double c0 = 0.0;
  Vec r0;
  if (!obj->eval(u, &c0, &r0)) {
    res.status = LegendreStatus::failed;
    res.message = "objective not finite at start";
    res.value = -std::numeric_limits<double>::infinity();
    return res;
  }
  if (r0.cwiseAbs().maxCoeff() <= cfg.gradient_tol) {
    res.value = -c0;
    res.maximizer = obj->project(u);
    res.status = LegendreStatus::converged;
    res.grad_norm = r0.cwiseAbs().maxCoeff();
    return res;
  }
  ceres::GradientProblemSolver::Options opts;
  opts.line_search_direction_type = ceres::BFGS;
  opts.logging_type = ceres::SILENT;
  opts.max_num_iterations = cfg.max_iterations;
  opts.gradient_tolerance = cfg.gradient_tol;
  opts.function_tolerance = 1e-300;
  opts.parameter_tolerance = 1e-300;
  opts.update_state_every_iteration = true;
  // A line search can stall near the optimum with the gradient just above
  // tolerance; a fresh BFGS start from the stalled point usually finishes.
  ceres::GradientProblemSolver::Summary summary;
  bool unbounded = false, nonconvex = false;
  double c = 0.0;
  Vec r;
  bool finite = false;
  for (int attempt = 0; attempt < 3; ++attempt) {
    detail::ConjugateWatch watch(*obj, u.data(), cfg.divergence_threshold);
    opts.callbacks.assign(1, &watch);
    summary = ceres::GradientProblemSolver::Summary();
    ceres::Solve(opts, problem, u.data(), &summary);
    res.iterations += static_cast<int>(summary.iterations.size());
    unbounded = watch.unbounded;
    nonconvex = watch.nonconvex;
    finite = obj->eval(u, &c, &r);
    if (unbounded || nonconvex || !finite || summary.termination_type == ceres::NO_CONVERGENCE) break;
    if (r.cwiseAbs().maxCoeff() <= cfg.gradient_tol) break;
  }
  if (!unbounded && !nonconvex && finite && r.cwiseAbs().maxCoeff() > cfg.gradient_tol &&
      r.cwiseAbs().maxCoeff() <= 1e3 * cfg.gradient_tol) {
    if (detail::polish_by_gradient(*obj, u, cfg.gradient_tol, 200)) summary.message += " (gradient polish)";
    finite = obj->eval(u, &c, &r);
  }
  res.value = finite ? -c : -std::numeric_limits<double>::infinity();
  res.maximizer = obj->project(u);
  res.grad_norm = finite ? r.cwiseAbs().maxCoeff() : std::numeric_limits<double>::infinity();
  res.message = summary.message;
  if (unbounded) {
    res.status = LegendreStatus::unbounded;
    res.value = std::numeric_limits<double>::infinity();
  } else if (nonconvex) {
    res.status = LegendreStatus::nonconvex;
  } else if (finite && res.grad_norm <= cfg.gradient_tol) {
    res.status = LegendreStatus::converged;
  } else if (summary.termination_type == ceres::NO_CONVERGENCE) {
    res.status = LegendreStatus::max_iterations;
  } else {
    res.status = LegendreStatus::failed;
  }
  return res;
}

// Convex conjugate as a new (value, gradient) pair. The gradient is the
// maximizer, by the envelope theorem.
struct ConjugatePair {
  ScalarFn value;
  FieldFn grad;
};

inline ConjugatePair conjugate(ScalarFn phi, FieldFn grad, Vec w, LegendreConfig cfg = {}) {
  auto cache = std::make_shared<std::pair<Vec, LegendreResult>>();
  auto solve = [phi, grad, w, cfg, cache](const Vec& g) -> const LegendreResult& {
    if (cache->first.size() == g.size() && cache->first == g) return cache->second;
    LegendreResult r = legendre_transform(phi, grad, w, g, cfg,
                                          cache->second.maximizer.size() == g.size()
                                              ? &cache->second.maximizer
                                              : nullptr);
    if (!r.ok() && cache->second.maximizer.size() == g.size())
      r = legendre_transform(phi, grad, w, g, cfg);
    cache->first = g;
    cache->second = r;
    return cache->second;
  };
  ConjugatePair out;
  out.value = [solve](const Vec& g) { return solve(g).value_or_throw(); };
  out.grad = [solve](const Vec& g) {
    const auto& r = solve(g);
    r.value_or_throw();
    return r.maximizer;
  };
  return out;
}

}  // namespace nrgen
