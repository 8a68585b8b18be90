#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace nrgen {

// Small arithmetic expression language for potentials: numbers, pi,
// variables x (alias of x1), x1..xd, + - * / ^, unary minus, and the
// functions sin cos tan exp log sqrt tanh sinh cosh abs.
// Gradients come from forward-mode dual numbers.
class Expr {
 public:
  struct Dual {
    double v = 0.0;
    std::vector<double> d;
  };

  Expr() = default;
  Expr(const std::string& text, int dim) : dim_(dim), text_(text) {
    pos_ = 0;
    root_ = parse_sum();
    skip_ws();
    if (pos_ != text_.size())
      throw std::invalid_argument("expr: unexpected '" + text_.substr(pos_) + "'");
  }

  int dim() const { return dim_; }
  const std::string& text() const { return text_; }

  double value(const double* x) const { return eval(*root_, x).v; }

  double value_grad(const double* x, double* grad) const {
    Dual r = eval(*root_, x);
    for (int k = 0; k < dim_; ++k) grad[k] = r.d.empty() ? 0.0 : r.d[k];
    return r.v;
  }

 private:
  enum class Op { num, var, add, sub, mul, div, pow, neg, fn };
  struct Node {
    Op op = Op::num;
    double num = 0.0;
    int var = 0;
    std::string fn;
    std::unique_ptr<Node> a, b;
  };
  using P = std::unique_ptr<Node>;

  int dim_ = 1;
  std::string text_;
  size_t pos_ = 0;
  std::shared_ptr<Node> root_;

  void skip_ws() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
  }
  bool eat(char c) {
    skip_ws();
    if (pos_ < text_.size() && text_[pos_] == c) {
      ++pos_;
      return true;
    }
    return false;
  }
  static P make(Op op, P a = nullptr, P b = nullptr) {
    auto n = std::make_unique<Node>();
    n->op = op;
    n->a = std::move(a);
    n->b = std::move(b);
    return n;
  }

  P parse_sum() {
    P l = parse_product();
    for (;;) {
      if (eat('+')) l = make(Op::add, std::move(l), parse_product());
      else if (eat('-')) l = make(Op::sub, std::move(l), parse_product());
      else return l;
    }
  }
  P parse_product() {
    P l = parse_unary();
    for (;;) {
      if (eat('*')) l = make(Op::mul, std::move(l), parse_unary());
      else if (eat('/')) l = make(Op::div, std::move(l), parse_unary());
      else return l;
    }
  }
  P parse_unary() {
    if (eat('-')) return make(Op::neg, parse_unary());
    if (eat('+')) return parse_unary();
    return parse_power();
  }
  P parse_power() {
    P base = parse_atom();
    if (eat('^')) return make(Op::pow, std::move(base), parse_unary());
    return base;
  }
  P parse_atom() {
    skip_ws();
    if (pos_ >= text_.size()) throw std::invalid_argument("expr: unexpected end of input");
    const char c = text_[pos_];
    if (eat('(')) {
      P e = parse_sum();
      if (!eat(')')) throw std::invalid_argument("expr: missing ')'");
      return e;
    }
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
      size_t used = 0;
      const double v = std::stod(text_.substr(pos_), &used);
      pos_ += used;
      auto n = make(Op::num);
      n->num = v;
      return n;
    }
    if (std::isalpha(static_cast<unsigned char>(c))) {
      size_t start = pos_;
      while (pos_ < text_.size() && std::isalnum(static_cast<unsigned char>(text_[pos_]))) ++pos_;
      const std::string id = text_.substr(start, pos_ - start);
      if (id == "pi") {
        auto n = make(Op::num);
        n->num = M_PI;
        return n;
      }
      if (id == "x" || (id.size() > 1 && id[0] == 'x' &&
                        id.find_first_not_of("0123456789", 1) == std::string::npos)) {
        const int k = id == "x" ? 0 : std::stoi(id.substr(1)) - 1;
        if (k < 0 || k >= dim_) throw std::invalid_argument("expr: variable out of range: " + id);
        auto n = make(Op::var);
        n->var = k;
        return n;
      }
      static const char* fns[] = {"sin", "cos", "tan", "exp", "log", "sqrt",
                                  "tanh", "sinh", "cosh", "abs"};
      for (const char* f : fns)
        if (id == f) {
          if (!eat('(')) throw std::invalid_argument("expr: expected '(' after " + id);
          auto n = make(Op::fn, parse_sum());
          if (!eat(')')) throw std::invalid_argument("expr: missing ')'");
          n->fn = id;
          return n;
        }
      throw std::invalid_argument("expr: unknown identifier '" + id + "'");
    }
    throw std::invalid_argument(std::string("expr: unexpected '") + c + "'");
  }

  Dual constant(double v) const { return Dual{v, std::vector<double>(dim_, 0.0)}; }

  Dual eval(const Node& n, const double* x) const {
    switch (n.op) {
      case Op::num: return constant(n.num);
      case Op::var: {
        Dual r = constant(x[n.var]);
        r.d[n.var] = 1.0;
        return r;
      }
      case Op::neg: {
        Dual a = eval(*n.a, x);
        a.v = -a.v;
        for (auto& g : a.d) g = -g;
        return a;
      }
      case Op::add:
      case Op::sub: {
        Dual a = eval(*n.a, x), b = eval(*n.b, x);
        const double s = n.op == Op::add ? 1.0 : -1.0;
        a.v += s * b.v;
        for (int k = 0; k < dim_; ++k) a.d[k] += s * b.d[k];
        return a;
      }
      case Op::mul: {
        Dual a = eval(*n.a, x), b = eval(*n.b, x);
        Dual r = constant(a.v * b.v);
        for (int k = 0; k < dim_; ++k) r.d[k] = a.d[k] * b.v + a.v * b.d[k];
        return r;
      }
      case Op::div: {
        Dual a = eval(*n.a, x), b = eval(*n.b, x);
        Dual r = constant(a.v / b.v);
        for (int k = 0; k < dim_; ++k) r.d[k] = (a.d[k] * b.v - a.v * b.d[k]) / (b.v * b.v);
        return r;
      }
      case Op::pow: {
        Dual a = eval(*n.a, x), b = eval(*n.b, x);
        const bool const_exp = std::all_of(b.d.begin(), b.d.end(), [](double g) { return g == 0.0; });
        Dual r = constant(std::pow(a.v, b.v));
        for (int k = 0; k < dim_; ++k) {
          double g = b.v * std::pow(a.v, b.v - 1.0) * a.d[k];
          if (!const_exp) g += r.v * std::log(a.v) * b.d[k];
          r.d[k] = g;
        }
        return r;
      }
      case Op::fn: {
        Dual a = eval(*n.a, x);
        double v = 0.0, dv = 0.0;
        const std::string& f = n.fn;
        if (f == "sin") v = std::sin(a.v), dv = std::cos(a.v);
        else if (f == "cos") v = std::cos(a.v), dv = -std::sin(a.v);
        else if (f == "tan") v = std::tan(a.v), dv = 1.0 / (std::cos(a.v) * std::cos(a.v));
        else if (f == "exp") v = std::exp(a.v), dv = v;
        else if (f == "log") v = std::log(a.v), dv = 1.0 / a.v;
        else if (f == "sqrt") v = std::sqrt(a.v), dv = 0.5 / v;
        else if (f == "tanh") v = std::tanh(a.v), dv = 1.0 - v * v;
        else if (f == "sinh") v = std::sinh(a.v), dv = std::cosh(a.v);
        else if (f == "cosh") v = std::cosh(a.v), dv = std::sinh(a.v);
        else if (f == "abs") v = std::abs(a.v), dv = a.v < 0 ? -1.0 : (a.v > 0 ? 1.0 : 0.0);
        Dual r = constant(v);
        for (int k = 0; k < dim_; ++k) r.d[k] = dv * a.d[k];
        return r;
      }
    }
    return constant(0.0);
  }
};

}  // namespace nrgen
