#pragma once

// Arithmetic expressions over x1..x3 and t, used for densities and boundary
// data in configuration files.
//
//   expr    := term (('+' | '-') term)*
//   term    := unary (('*' | '/') unary)*
//   unary   := ('+' | '-') unary | power
//   power   := primary ('^' unary)?          right associative
//   primary := number | pi | x1 | x2 | x3 | t | fn '(' expr ')' | '(' expr ')'
//   fn      := sin | cos | exp | abs

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "pampere/error.hpp"

namespace pampere {

/// Syntax and identifier errors with the byte offset into the source text.
class ParseError : public Error {
 public:
  ParseError(ErrorKind kind, const std::string& message, std::size_t offset, std::vector<std::string> expected = {})
      : Error(kind, message + " at offset " + std::to_string(offset)), offset(offset), expected(std::move(expected)) {}

  std::size_t offset;
  std::vector<std::string> expected;
};

class Expression {
 public:
  enum class Op { number, pi, var, neg, add, sub, mul, div, pow, sin, cos, exp, abs };

  /// Variable slots: 0..2 are x1..x3, 3 is t.
  static constexpr int kTime = 3;

  Op op() const { return node_->op; }
  double value() const { return node_->value; }
  int variable() const { return node_->var; }
  const std::vector<Expression>& args() const { return node_->args; }

  static Expression number(double v) { return Expression(Op::number, v, -1, {}); }
  static Expression constant_pi() { return Expression(Op::pi, 0.0, -1, {}); }
  static Expression variable(int slot) { return Expression(Op::var, 0.0, slot, {}); }
  static Expression apply(Op op, std::vector<Expression> args) { return Expression(op, 0.0, -1, std::move(args)); }

  /// x holds x1..xn (n <= 3); variables beyond n read as an error.
  double eval(const double* x, int n, double t) const {
    const Node& e = *node_;
    switch (e.op) {
      case Op::number: return e.value;
      case Op::pi: return std::numbers::pi;
      case Op::var:
        if (e.var == kTime) return t;
        if (e.var >= n) throw Error(ErrorKind::unknown_identifier, "x" + std::to_string(e.var + 1) + " is not defined here");
        return x[e.var];
      case Op::neg: return -arg(0, x, n, t);
      case Op::add: return arg(0, x, n, t) + arg(1, x, n, t);
      case Op::sub: return arg(0, x, n, t) - arg(1, x, n, t);
      case Op::mul: return arg(0, x, n, t) * arg(1, x, n, t);
      case Op::div: {
        const double num = arg(0, x, n, t);
        const double den = arg(1, x, n, t);
        if (den == 0.0) throw Error(ErrorKind::division_by_zero, "division by zero");
        return num / den;
      }
      case Op::pow: return std::pow(arg(0, x, n, t), arg(1, x, n, t));
      case Op::sin: return std::sin(arg(0, x, n, t));
      case Op::cos: return std::cos(arg(0, x, n, t));
      case Op::exp: return std::exp(arg(0, x, n, t));
      case Op::abs: return std::abs(arg(0, x, n, t));
    }
    return 0.0;
  }

  double operator()(double t) const { return eval(nullptr, 0, t); }

  /// Highest spatial variable used (0 if none) and whether t appears.
  int max_space_index() const {
    int m = node_->op == Op::var && node_->var != kTime ? node_->var + 1 : 0;
    for (const auto& a : node_->args) m = std::max(m, a.max_space_index());
    return m;
  }
  bool uses_time() const {
    if (node_->op == Op::var && node_->var == kTime) return true;
    return std::any_of(node_->args.begin(), node_->args.end(), [](const Expression& a) { return a.uses_time(); });
  }

  friend bool operator==(const Expression& a, const Expression& b) {
    if (a.op() != b.op() || a.args().size() != b.args().size()) return false;
    if (a.op() == Op::number && a.value() != b.value()) return false;
    if (a.op() == Op::var && a.variable() != b.variable()) return false;
    for (std::size_t i = 0; i < a.args().size(); ++i)
      if (!(a.args()[i] == b.args()[i])) return false;
    return true;
  }

  /// Fully parenthesized; numbers printed with 17 significant digits.
  std::string str() const {
    const Node& e = *node_;
    switch (e.op) {
      case Op::number: {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.17g", e.value);
        return buf;
      }
      case Op::pi: return "pi";
      case Op::var: return e.var == kTime ? "t" : "x" + std::to_string(e.var + 1);
      case Op::neg: return "(-" + e.args[0].str() + ")";
      case Op::add: return binary("+");
      case Op::sub: return binary("-");
      case Op::mul: return binary("*");
      case Op::div: return binary("/");
      case Op::pow: return binary("^");
      case Op::sin: return "sin(" + e.args[0].str() + ")";
      case Op::cos: return "cos(" + e.args[0].str() + ")";
      case Op::exp: return "exp(" + e.args[0].str() + ")";
      case Op::abs: return "abs(" + e.args[0].str() + ")";
    }
    return {};
  }

 private:
  struct Node {
    Op op;
    double value;
    int var;
    std::vector<Expression> args;
  };

  Expression(Op op, double value, int var, std::vector<Expression> args)
      : node_(std::make_shared<const Node>(Node{op, value, var, std::move(args)})) {}

  double arg(std::size_t i, const double* x, int n, double t) const { return node_->args[i].eval(x, n, t); }
  std::string binary(const char* sym) const {
    return "(" + node_->args[0].str() + " " + sym + " " + node_->args[1].str() + ")";
  }

  std::shared_ptr<const Node> node_;
};

namespace detail {

class ExpressionParser {
 public:
  explicit ExpressionParser(std::string_view src) : s_(src) {}

  Expression parse() {
    auto e = expr();
    skip();
    if (pos_ != s_.size()) fail({"operator", "end of input"});
    return e;
  }

 private:
  using Op = Expression::Op;

  void skip() {
    while (pos_ < s_.size() && (s_[pos_] == ' ' || s_[pos_] == '\t' || s_[pos_] == '\n' || s_[pos_] == '\r')) ++pos_;
  }
  bool accept(char c) {
    skip();
    if (pos_ < s_.size() && s_[pos_] == c) {
      ++pos_;
      return true;
    }
    return false;
  }
  [[noreturn]] void fail(std::vector<std::string> expected) const {
    std::string what = pos_ < s_.size() ? "unexpected '" + std::string(1, s_[pos_]) + "'" : "unexpected end of input";
    std::string msg = what + ", expected ";
    for (std::size_t i = 0; i < expected.size(); ++i) msg += (i ? " or " : "") + expected[i];
    throw ParseError(ErrorKind::syntax, msg, pos_, std::move(expected));
  }

  Expression expr() {
    auto lhs = term();
    for (;;) {
      if (accept('+')) lhs = Expression::apply(Op::add, {lhs, term()});
      else if (accept('-')) lhs = Expression::apply(Op::sub, {lhs, term()});
      else return lhs;
    }
  }

  Expression term() {
    auto lhs = unary();
    for (;;) {
      if (accept('*')) lhs = Expression::apply(Op::mul, {lhs, unary()});
      else if (accept('/')) lhs = Expression::apply(Op::div, {lhs, unary()});
      else return lhs;
    }
  }

  Expression unary() {
    if (accept('-')) return Expression::apply(Op::neg, {unary()});
    if (accept('+')) return unary();
    auto base = primary();
    if (accept('^')) return Expression::apply(Op::pow, {base, unary()});
    return base;
  }

  Expression primary() {
    skip();
    static const std::vector<std::string> kExpected{"number", "identifier", "'('", "'-'"};
    if (pos_ >= s_.size()) fail(kExpected);
    const char c = s_[pos_];
    if (c == '(') {
      ++pos_;
      auto e = expr();
      if (!accept(')')) fail({"')'"});
      return e;
    }
    if ((c >= '0' && c <= '9') || c == '.') return number();
    if (std::isalpha(static_cast<unsigned char>(c))) return identifier();
    fail(kExpected);
  }

  Expression number() {
    const char* first = s_.data() + pos_;
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(first, s_.data() + s_.size(), v);
    if (ec != std::errc{} || !std::isfinite(v)) fail({"finite number"});
    pos_ += static_cast<std::size_t>(ptr - first);
    return Expression::number(v);
  }

  Expression identifier() {
    const std::size_t start = pos_;
    while (pos_ < s_.size() && std::isalnum(static_cast<unsigned char>(s_[pos_]))) ++pos_;
    const std::string_view id = s_.substr(start, pos_ - start);
    if (id == "pi") return Expression::constant_pi();
    if (id == "t") return Expression::variable(Expression::kTime);
    if (id == "x1" || id == "x2" || id == "x3") return Expression::variable(id[1] - '1');
    static const std::array<std::pair<std::string_view, Op>, 4> fns{
        {{"sin", Op::sin}, {"cos", Op::cos}, {"exp", Op::exp}, {"abs", Op::abs}}};
    for (const auto& [name, op] : fns)
      if (id == name) {
        if (!accept('(')) fail({"'('"});
        auto a = expr();
        if (!accept(')')) fail({"')'"});
        return Expression::apply(op, {a});
      }
    throw ParseError(ErrorKind::unknown_identifier, "unknown identifier '" + std::string(id) + "'", start);
  }

  std::string_view s_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline Expression parse_expression(std::string_view text) { return detail::ExpressionParser(text).parse(); }

}  // namespace pampere
