#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "pampere/expression.hpp"
#include "pampere/fields.hpp"

using namespace pampere;

namespace {

double at(const std::string& src, std::vector<double> x = {}, double t = 0.0) {
  return parse_expression(src).eval(x.data(), static_cast<int>(x.size()), t);
}

ParseError parse_error(const std::string& src) {
  try {
    parse_expression(src);
  } catch (const ParseError& e) {
    return e;
  }
  ADD_FAILURE() << "no error for " << src;
  return ParseError(ErrorKind::syntax, "", 0);
}

// random well-formed source text
std::string random_source(std::mt19937_64& rng, int depth) {
  std::uniform_int_distribution<int> pick(0, depth > 0 ? 9 : 3);
  std::uniform_real_distribution<double> num(0.0, 10.0);
  switch (pick(rng)) {
    case 0: return std::to_string(num(rng));
    case 1: return "x" + std::to_string(std::uniform_int_distribution<int>(1, 3)(rng));
    case 2: return "t";
    case 3: return "pi";
    case 4: return "-" + random_source(rng, depth - 1);
    case 5: return random_source(rng, depth - 1) + " + " + random_source(rng, depth - 1);
    case 6: return random_source(rng, depth - 1) + "*" + random_source(rng, depth - 1);
    case 7: return random_source(rng, depth - 1) + "/(1 + " + random_source(rng, depth - 1) + "^2)";
    case 8: return "cos(" + random_source(rng, depth - 1) + ")-" + random_source(rng, depth - 1);
    default: return "(" + random_source(rng, depth - 1) + ")^" + random_source(rng, depth - 1);
  }
}

}  // namespace

TEST(Expression, Constants) {
  EXPECT_EQ(at("1"), 1.0);
  EXPECT_EQ(at("2.5e-1"), 0.25);
  EXPECT_EQ(at(".5"), 0.5);
  EXPECT_DOUBLE_EQ(at("pi"), std::numbers::pi);
}

TEST(Expression, CosineAtOrigin) { EXPECT_DOUBLE_EQ(at("1 + 0.5*cos(2*pi*x1)", {0.0}), 1.5); }

TEST(Expression, PrecedenceAndAssociativity) {
  EXPECT_EQ(at("1 + 2*3"), 7.0);
  EXPECT_EQ(at("(1 + 2)*3"), 9.0);
  EXPECT_EQ(at("8 - 3 - 2"), 3.0);
  EXPECT_EQ(at("8 / 4 / 2"), 1.0);
  EXPECT_EQ(at("2^3^2"), 512.0);
  EXPECT_EQ(at("-2^2"), -4.0);
  EXPECT_EQ(at("2^-1"), 0.5);
  EXPECT_EQ(at("--3"), 3.0);
  EXPECT_EQ(at("+3 * -2"), -6.0);
}

TEST(Expression, VariablesAndFunctions) {
  EXPECT_DOUBLE_EQ(at("x1*x2 + x3 - t", {2.0, 3.0, 4.0}, 5.0), 5.0);
  EXPECT_DOUBLE_EQ(at("exp(abs(x1)) + sin(pi/2)", {-1.0}), std::exp(1.0) + 1.0);
  auto e = parse_expression("1 + 0.3*sin(2*pi*t)");
  EXPECT_DOUBLE_EQ(e(0.25), 1.3);
  EXPECT_TRUE(e.uses_time());
  EXPECT_EQ(e.max_space_index(), 0);
  EXPECT_EQ(parse_expression("x1 + x3").max_space_index(), 3);
}

TEST(Expression, UnitMeanOnGrid) {
  auto e = parse_expression("1 + 0.3*cos(2*pi*x1)*cos(2*pi*x2)");
  auto f = sample_function([&](const Vector& x) { return e.eval(x.data(), 2, 0.0); }, TorusGrid::unit(2, 16));
  double mean = 0.0;
  for (double v : f.values()) mean += v;
  EXPECT_NEAR(mean / f.values().size(), 1.0, 1e-12);
}

TEST(Expression, SyntaxErrorsCarryOffsetAndExpectedSet) {
  auto e = parse_error("1 + * 2");
  EXPECT_EQ(e.kind(), ErrorKind::syntax);
  EXPECT_EQ(e.offset, 4u);
  EXPECT_NE(std::find(e.expected.begin(), e.expected.end(), "number"), e.expected.end());

  EXPECT_EQ(parse_error("(1 + 2").offset, 6u);
  EXPECT_EQ(parse_error("cos 1").offset, 4u);
  EXPECT_EQ(parse_error("1 2").offset, 2u);
  EXPECT_EQ(parse_error("").offset, 0u);
  EXPECT_EQ(parse_error("1e999").kind(), ErrorKind::syntax);
}

TEST(Expression, UnknownIdentifier) {
  auto e = parse_error("1 + tan(x1)");
  EXPECT_EQ(e.kind(), ErrorKind::unknown_identifier);
  EXPECT_EQ(e.offset, 4u);
  EXPECT_EQ(parse_error("x4").kind(), ErrorKind::unknown_identifier);
  // x2 in a one-dimensional context
  try {
    at("x2", {1.0});
    FAIL();
  } catch (const Error& err) {
    EXPECT_EQ(err.kind(), ErrorKind::unknown_identifier);
  }
}

TEST(Expression, DivisionByZero) {
  try {
    at("1/(x1 - 1)", {1.0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::division_by_zero);
  }
}

TEST(Expression, PrettyPrintRoundTrip) {
  std::mt19937_64 rng(42);
  const double x[3] = {0.3, -0.7, 1.1};
  for (int s = 0; s < 300; ++s) {
    const auto src = random_source(rng, 4);
    const auto a = parse_expression(src);
    const auto b = parse_expression(a.str());
    ASSERT_TRUE(a == b) << src << " -> " << a.str();
    EXPECT_EQ(b.str(), a.str());
    const double va = a.eval(x, 3, -0.4), vb = b.eval(x, 3, -0.4);
    if (std::isfinite(va)) EXPECT_EQ(va, vb);
  }
  EXPECT_FALSE(parse_expression("1 + x1") == parse_expression("x1 + 1"));
  EXPECT_EQ(parse_expression("0.1").str(), "0.10000000000000001");
}
