#pragma once

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <memory>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace nrgen {

using Vec = Eigen::VectorXd;

// Densities below this are treated as zero by anything that takes a log.
inline constexpr double kPositivityFloor = 1e-300;

class PositivityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SpaceMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Boundary { truncated, periodic };

inline std::string to_string(Boundary b) {
  return b == Boundary::periodic ? "periodic" : "truncated";
}

inline Boundary boundary_from_string(const std::string& s) {
  if (s == "periodic") return Boundary::periodic;
  if (s == "truncated") return Boundary::truncated;
  throw std::invalid_argument("Axis: unknown boundary '" + s + "'");
}

struct Axis {
  double min = 0.0;
  double max = 1.0;
  int n = 2;
  Boundary boundary = Boundary::truncated;

  double spacing() const {
    return boundary == Boundary::periodic ? (max - min) / n : (max - min) / (n - 1);
  }

  // Truncated nodes are laid out around the midpoint so that a symmetric
  // axis has exactly negated coordinates at mirrored indices.
  double coord(int k) const {
    if (boundary == Boundary::periodic) return min + k * spacing();
    return 0.5 * (min + max) + (k - 0.5 * (n - 1)) * spacing();
  }

  // Trapezoid cells: end nodes of a truncated axis own half a cell.
  double weight(int k) const {
    const double h = spacing();
    if (boundary == Boundary::truncated && (k == 0 || k == n - 1)) return 0.5 * h;
    return h;
  }

  bool symmetric_about_zero() const {
    return boundary == Boundary::truncated && min == -max;
  }

  int mirror(int k) const { return n - 1 - k; }

  bool operator==(const Axis&) const = default;
};

class StateSpace;
using SpacePtr = std::shared_ptr<const StateSpace>;

class StateSpace {
 public:
  enum class Kind { finite, grid };

  static SpacePtr finite(const Vec& weights) {
    if (weights.size() < 1) throw std::invalid_argument("StateSpace: empty finite space");
    for (Eigen::Index i = 0; i < weights.size(); ++i) {
      if (!(weights[i] > 0.0) || !std::isfinite(weights[i]))
        throw std::invalid_argument("StateSpace: weights must be finite and positive");
    }
    auto s = std::shared_ptr<StateSpace>(new StateSpace());
    s->kind_ = Kind::finite;
    s->weights_ = weights;
    return s;
  }

  static SpacePtr finite(int n) { return finite(Vec::Ones(n)); }

  static SpacePtr grid(const std::vector<Axis>& axes) {
    if (axes.empty()) throw std::invalid_argument("StateSpace: grid needs at least one axis");
    auto s = std::shared_ptr<StateSpace>(new StateSpace());
    s->kind_ = Kind::grid;
    s->axes_ = axes;
    long total = 1;
    for (const auto& a : axes) {
      if (a.n < 2) throw std::invalid_argument("StateSpace: axis needs n >= 2");
      if (!std::isfinite(a.min) || !std::isfinite(a.max))
        throw std::invalid_argument("StateSpace: non-finite axis bounds");
      if (!(a.max > a.min)) throw std::invalid_argument("StateSpace: axis needs max > min");
      total *= a.n;
      if (total > (1L << 28)) throw std::invalid_argument("StateSpace: grid too large");
    }
    const int d = static_cast<int>(axes.size());
    s->strides_.assign(d, 1);
    for (int k = d - 2; k >= 0; --k) s->strides_[k] = s->strides_[k + 1] * axes[k + 1].n;
    s->weights_.resize(total);
    std::vector<int> idx(d, 0);
    for (long i = 0; i < total; ++i) {
      double w = 1.0;
      for (int k = 0; k < d; ++k) w *= axes[k].weight(idx[k]);
      s->weights_[i] = w;
      for (int k = d - 1; k >= 0; --k) {
        if (++idx[k] < axes[k].n) break;
        idx[k] = 0;
      }
    }
    return s;
  }

  Kind kind() const { return kind_; }
  int size() const { return static_cast<int>(weights_.size()); }
  int dim() const { return kind_ == Kind::grid ? static_cast<int>(axes_.size()) : 0; }
  const std::vector<Axis>& axes() const { return axes_; }
  const Axis& axis(int k) const { return axes_.at(k); }
  const Vec& weights() const { return weights_; }
  double weight(int i) const { return weights_[i]; }
  int stride(int k) const { return strides_.at(k); }

  int index_along(int i, int k) const { return (i / strides_[k]) % axes_[k].n; }

  std::vector<int> multi_index(int i) const {
    std::vector<int> m(axes_.size());
    for (size_t k = 0; k < axes_.size(); ++k) m[k] = index_along(i, static_cast<int>(k));
    return m;
  }

  int linear_index(const std::vector<int>& m) const {
    int i = 0;
    for (size_t k = 0; k < axes_.size(); ++k) i += m[k] * strides_[k];
    return i;
  }

  double coord(int i, int k) const { return axes_[k].coord(index_along(i, k)); }

  // Finite spaces use the state index as the single coordinate.
  Eigen::MatrixXd points() const {
    if (kind_ == Kind::finite) {
      Eigen::MatrixXd p(size(), 1);
      for (int i = 0; i < size(); ++i) p(i, 0) = i;
      return p;
    }
    Eigen::MatrixXd p(size(), dim());
    for (int i = 0; i < size(); ++i)
      for (int k = 0; k < dim(); ++k) p(i, k) = coord(i, k);
    return p;
  }

  double volume() const {
    if (kind_ == Kind::finite) return weights_.sum();
    double v = 1.0;
    for (const auto& a : axes_) v *= (a.max - a.min);
    return v;
  }

  bool same_as(const StateSpace& o) const {
    if (this == &o) return true;
    if (kind_ != o.kind_ || size() != o.size()) return false;
    if (kind_ == Kind::grid) return axes_ == o.axes_;
    return weights_ == o.weights_;
  }

 private:
  StateSpace() = default;
  Kind kind_ = Kind::finite;
  std::vector<Axis> axes_;
  std::vector<int> strides_;
  Vec weights_;
};

inline SpacePtr build_grid(const std::vector<Axis>& axes) { return StateSpace::grid(axes); }

inline void require_same_space(const SpacePtr& a, const SpacePtr& b, const char* who) {
  if (!a || !b) throw SpaceMismatch(std::string(who) + ": missing state space");
  if (a != b && !a->same_as(*b)) throw SpaceMismatch(std::string(who) + ": state spaces differ");
}

struct ScalarField {
  SpacePtr space;
  Vec values;

  ScalarField() = default;
  ScalarField(SpacePtr s, Vec v) : space(std::move(s)), values(std::move(v)) {
    if (!space || values.size() != space->size())
      throw std::invalid_argument("ScalarField: size does not match space");
    if (!values.allFinite()) throw std::invalid_argument("ScalarField: non-finite value");
  }

  static ScalarField constant(const SpacePtr& s, double c) {
    return ScalarField(s, Vec::Constant(s->size(), c));
  }
};

struct Density {
  SpacePtr space;
  Vec values;

  Density() = default;
  Density(SpacePtr s, Vec v) : space(std::move(s)), values(std::move(v)) {
    if (!space || values.size() != space->size())
      throw std::invalid_argument("Density: size does not match space");
    if (!values.allFinite()) throw std::invalid_argument("Density: non-finite value");
    if (values.size() > 0 && values.minCoeff() < 0.0)
      throw std::invalid_argument("Density: negative value");
  }

  // From per-state masses rather than densities.
  static Density from_masses(const SpacePtr& s, const Vec& masses) {
    return Density(s, masses.cwiseQuotient(s->weights()));
  }

  double mass() const;
  bool strictly_positive() const { return values.minCoeff() >= kPositivityFloor; }
  ScalarField as_field() const { return ScalarField(space, values); }
};

// Neumaier summation in index order, so every caller sees the same rounding.
inline double compensated_sum(const Vec& terms) {
  double s = 0.0, c = 0.0;
  for (Eigen::Index i = 0; i < terms.size(); ++i) {
    const double t = s + terms[i];
    if (std::abs(s) >= std::abs(terms[i]))
      c += (s - t) + terms[i];
    else
      c += (terms[i] - t) + s;
    s = t;
  }
  return s + c;
}

inline double weighted_sum(const SpacePtr& s, const Vec& f) {
  return compensated_sum(f.cwiseProduct(s->weights()));
}

inline double Density::mass() const { return weighted_sum(space, values); }

// Flat pairing sum_i f_i g_i w_i.
inline double inner_product(const ScalarField& f, const ScalarField& g) {
  require_same_space(f.space, g.space, "inner_product");
  const Vec& w = f.space->weights();
  Vec t(w.size());
  for (Eigen::Index i = 0; i < w.size(); ++i) t[i] = (f.values[i] * g.values[i]) * w[i];
  return compensated_sum(t);
}

// Weighted pairing sum_i f_i g_i mu_i w_i.
inline double inner_product(const ScalarField& f, const ScalarField& g, const Density& mu) {
  require_same_space(f.space, g.space, "inner_product");
  require_same_space(f.space, mu.space, "inner_product");
  const Vec& w = f.space->weights();
  Vec t(w.size());
  for (Eigen::Index i = 0; i < w.size(); ++i)
    t[i] = ((f.values[i] * g.values[i]) * mu.values[i]) * w[i];
  return compensated_sum(t);
}

inline Density normalize(const Density& rho) {
  const double m = rho.mass();
  if (!(m > 0.0) || !std::isfinite(m))
    throw std::invalid_argument("normalize: total mass must be positive");
  Density out(rho.space, rho.values / m);
  // One correction pass pulls the mass to 1 within a few ulps.
  const double m2 = out.mass();
  out.values /= m2;
  return out;
}

inline void require_positive(const Density& d, const char* who) {
  for (Eigen::Index i = 0; i < d.values.size(); ++i) {
    if (!(d.values[i] >= kPositivityFloor))
      throw PositivityError(std::string(who) + ": density not strictly positive at index " +
                            std::to_string(i));
  }
}

inline ScalarField ratio_field(const Density& rho, const Density& mu) {
  require_same_space(rho.space, mu.space, "ratio_field");
  require_positive(mu, "ratio_field");
  return ScalarField(rho.space, rho.values.cwiseQuotient(mu.values));
}

// Serialization: {kind, axes[], weights[], values[]}.

inline nlohmann::json to_json(const StateSpace& s) {
  nlohmann::json j;
  j["kind"] = s.kind() == StateSpace::Kind::grid ? "grid" : "finite";
  j["axes"] = nlohmann::json::array();
  for (const auto& a : s.axes())
    j["axes"].push_back(
        {{"min", a.min}, {"max", a.max}, {"n", a.n}, {"boundary", to_string(a.boundary)}});
  j["weights"] = std::vector<double>(s.weights().data(), s.weights().data() + s.size());
  return j;
}

inline SpacePtr space_from_json(const nlohmann::json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "grid") {
    std::vector<Axis> axes;
    for (const auto& a : j.at("axes"))
      axes.push_back({a.at("min").get<double>(), a.at("max").get<double>(), a.at("n").get<int>(),
                      boundary_from_string(a.value("boundary", std::string("truncated")))});
    return StateSpace::grid(axes);
  }
  if (kind == "finite") {
    const auto w = j.at("weights").get<std::vector<double>>();
    return StateSpace::finite(Eigen::Map<const Vec>(w.data(), static_cast<Eigen::Index>(w.size())));
  }
  throw std::invalid_argument("space_from_json: unknown kind '" + kind + "'");
}

inline nlohmann::json to_json(const Density& d) {
  nlohmann::json j = to_json(*d.space);
  j["values"] = std::vector<double>(d.values.data(), d.values.data() + d.values.size());
  return j;
}

inline Density density_from_json(const nlohmann::json& j) {
  auto s = space_from_json(j);
  const auto v = j.at("values").get<std::vector<double>>();
  if (static_cast<int>(v.size()) != s->size())
    throw std::invalid_argument("density_from_json: values length does not match space");
  return Density(s, Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size())));
}

// CSV with columns index, coord_1..coord_d, weight, value.
inline void write_csv(std::ostream& os, const SpacePtr& s, const Vec& values) {
  const auto pts = s->points();
  os << "index";
  for (Eigen::Index k = 0; k < pts.cols(); ++k) os << ",coord_" << (k + 1);
  os << ",weight,value\n";
  os << std::setprecision(17);
  for (int i = 0; i < s->size(); ++i) {
    os << i;
    for (Eigen::Index k = 0; k < pts.cols(); ++k) os << ',' << pts(i, k);
    os << ',' << s->weight(i) << ',' << values[i] << '\n';
  }
}

inline void write_csv(std::ostream& os, const Density& d) { write_csv(os, d.space, d.values); }

}  // namespace nrgen
