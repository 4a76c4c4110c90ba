#include <gtest/gtest.h>

#include <cmath>

#include "support/oracles.hpp"
#include "treecoder/grad_check.hpp"
#include "treecoder/selector.hpp"

namespace tc = treecoder;
using tc::Array;
using tc::testing::central_difference;
using tc::testing::random_array;

namespace {

tc::SelectorParams<double> random_selector(std::size_t d, std::size_t m, std::size_t k, std::uint64_t seed) {
  return {random_array<double>({d, m}, seed + 1), random_array<double>({d, m}, seed + 2),
          random_array<double>({m, k}, seed + 3)};
}

}  // namespace

TEST(MeanPool, AveragesRows) {
  auto x = Array<double>::from({1, 2, 2}, {1, 3, 3, 5});
  auto y = tc::mean_pool(x, std::span<const std::uint8_t>());
  EXPECT_EQ(y.shape(), (tc::Shape{1, 2}));
  EXPECT_EQ(y.at(0), 2.0);
  EXPECT_EQ(y.at(1), 4.0);
}

TEST(MeanPool, ConstantSequence) {
  auto x = Array<double>::from({1, 3, 2}, {0.5, -2, 0.5, -2, 0.5, -2});
  auto y = tc::mean_pool(x, std::span<const std::uint8_t>());
  EXPECT_DOUBLE_EQ(y.at(0), 0.5);
  EXPECT_DOUBLE_EQ(y.at(1), -2.0);
}

TEST(MeanPool, ExcludesPaddingAndSplitsGradient) {
  auto x = random_array<double>({2, 4, 3}, 1);
  std::vector<std::uint8_t> pad = {0, 0, 0, 1, 0, 1, 1, 1};
  auto y = tc::mean_pool(x, pad);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_NEAR(y.at(c), (x.at(c) + x.at(3 + c) + x.at(6 + c)) / 3.0, 1e-15);
    EXPECT_EQ(y.at(3 + c), x.at(12 + c));
  }
  // oracle: finite differences of the hand-written masked mean
  std::vector<double> flat(x.values().begin(), x.values().end());
  auto oracle = central_difference(
      [&](const std::vector<double>& v) {
        double s = 0;
        for (std::size_t b = 0; b < 2; ++b) {
          std::size_t n = 0;
          std::vector<double> acc(3, 0.0);
          for (std::size_t t = 0; t < 4; ++t)
            if (!pad[b * 4 + t]) {
              ++n;
              for (std::size_t c = 0; c < 3; ++c) acc[c] += v[(b * 4 + t) * 3 + c];
            }
          for (double a : acc) s += a / static_cast<double>(n);
        }
        return s;
      },
      flat, 1e-6);
  tc::Tape<double> tape;
  tc::Tape<double>::Scope scope(&tape);
  tape.backward(tc::sum(tc::mean_pool(x, pad)));
  for (std::size_t i = 0; i < flat.size(); ++i) EXPECT_NEAR(x.grad()[i], oracle[i], 1e-8);
  EXPECT_NEAR(x.grad()[0], 1.0 / 3.0, 1e-15);
  EXPECT_EQ(x.grad()[9], 0.0);
}

TEST(MeanPool, AllPaddingIsInputError) {
  std::vector<std::uint8_t> pad = {0, 0, 1, 1};
  EXPECT_THROW(tc::mean_pool(Array<double>::zeros({2, 2, 3}), pad), tc::InputError);
}

TEST(Select, TwoLogitsClosedForm) {
  auto s = tc::select_from_logits(Array<double>::from({1, 2}, {2, 0}));
  ASSERT_EQ(s.decisions.size(), 1u);
  EXPECT_EQ(s.decisions[0].child, 0u);
  const double p0 = 1.0 / (1.0 + std::exp(-2.0));
  EXPECT_NEAR(s.decisions[0].probabilities[0], p0, 1e-15);
  EXPECT_NEAR(s.decisions[0].probabilities[0], 0.8808, 1e-4);
  EXPECT_NEAR(s.decisions[0].probabilities[1], 0.1192, 1e-4);
  EXPECT_EQ(s.grad_trick.item(), 1.0);
}

TEST(Select, TiesGoToLowestIndex) {
  auto s = tc::select_from_logits(Array<double>::from({2, 3}, {1, 1, 1, -1, 4, 4}));
  EXPECT_EQ(s.decisions[0].child, 0u);
  EXPECT_EQ(s.decisions[1].child, 1u);
  for (double v : s.grad_trick.values()) EXPECT_EQ(v, 1.0);
}

TEST(Select, NonFiniteLogitsAreNumericErrors) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(tc::select_from_logits(Array<double>::from({1, 2}, {nan, 0})), tc::NumericError);
  EXPECT_THROW(tc::select_from_logits(Array<double>::from({1, 2}, {INFINITY, 0})), tc::NumericError);
}

TEST(Select, ShiftingLogitsChangesNothing) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto logits = random_array<double>({4, 3}, seed, false, -3, 3);
    auto a = tc::select_from_logits(logits);
    auto b = tc::select_from_logits(tc::add(logits, Array<double>::scalar(11.0)));
    for (std::size_t g = 0; g < 4; ++g) {
      EXPECT_EQ(a.decisions[g].child, b.decisions[g].child);
      EXPECT_EQ(b.grad_trick.at(g), 1.0);
      double s = 0;
      for (double p : b.decisions[g].probabilities) s += p;
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Select, GradTrickIsTransparentInForward) {
  auto pooled = random_array<double>({3, 4}, 5);
  auto sp = random_selector(4, 32, 2, 6);
  auto s = tc::select(pooled, sp);
  auto y = random_array<double>({3, 5, 4}, 7, false, -100, 100);
  auto scaled = tc::mul(y, tc::reshape(s.grad_trick, {3, 1, 1}));
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_EQ(scaled.at(i), y.at(i));
}

TEST(Select, GradTrickDerivativeIsReciprocalOfHeldProbability) {
  // d(p / c)/dp = 1/c with c held at p's value; check against a finite
  // difference on the output weights of a single-sample selector.
  auto pooled = random_array<double>({1, 4}, 8, false);
  auto sp = random_selector(4, 8, 2, 9);
  tc::Tape<double> tape;
  tc::Tape<double>::Scope scope(&tape);
  auto sel = tc::select(pooled, sp);
  const std::size_t child = sel.decisions[0].child;
  const double p_held = sel.decisions[0].probabilities[child];
  tape.backward(tc::sum(sel.grad_trick));

  // numeric derivative of p_max(W_out) divided by the held value
  const double h = 1e-6;
  auto values = sp.w_out.mutable_values();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double orig = values[i];
    tc::NoGradScope<double> ng;
    values[i] = orig + h;
    double up = tc::select(pooled, sp).probabilities.at(child);
    values[i] = orig - h;
    double down = tc::select(pooled, sp).probabilities.at(child);
    values[i] = orig;
    const double numeric = (up - down) / (2 * h) / p_held;
    EXPECT_NEAR(sp.w_out.grad()[i], numeric, 1e-7 * std::max(1.0, std::abs(numeric)));
  }
  bool any = false;
  for (double g : sp.w_out.grad()) any |= g != 0.0;
  EXPECT_TRUE(any);
}

TEST(Select, TrickGradientIsInvisibleToFiniteDifferences) {
  // The routed scalar is exactly 1 under any perturbation, so the numeric
  // derivative vanishes while the analytic one does not.
  auto pooled = random_array<double>({2, 4}, 10, false);
  auto sp = random_selector(4, 8, 3, 11);
  auto y = random_array<double>({2, 4}, 12, false);
  auto f = [&] { return tc::sum(tc::mul(y, tc::reshape(tc::select(pooled, sp).grad_trick, {2, 1}))); };
  auto r = tc::grad_check<double>(f, std::vector<Array<double>>{sp.w_gate, sp.w_up, sp.w_out}, 1e-6, 1e-5);
  EXPECT_FALSE(r.passed);
  EXPECT_EQ(r.numeric_at_worst, 0.0);
  EXPECT_NE(r.analytic_at_worst, 0.0);
}

TEST(SelectRandom, UniformOverChildren) {
  tc::Rng rng(123);
  auto s = tc::select_random<double>(2, 10000, rng);
  std::size_t ones = 0;
  for (const auto& d : s.decisions) ones += d.child;
  const double sigma = std::sqrt(0.25 / 10000.0);
  EXPECT_LT(std::abs(static_cast<double>(ones) / 10000.0 - 0.5), 3 * sigma);
  for (const auto& d : s.decisions) {
    EXPECT_EQ(d.probabilities, (std::vector<double>{0.5, 0.5}));
  }
  for (double v : s.grad_trick.values()) EXPECT_EQ(v, 1.0);
  EXPECT_FALSE(s.grad_trick.requires_grad());
}

TEST(SelectRandom, SeedDeterminesSequence) {
  tc::Rng a(9), b(9);
  auto x = tc::select_random<float>(4, 500, a);
  auto y = tc::select_random<float>(4, 500, b);
  for (std::size_t i = 0; i < 500; ++i) EXPECT_EQ(x.decisions[i].child, y.decisions[i].child);
}

TEST(SelectRandom, NeedsTwoChildren) {
  tc::Rng rng(1);
  EXPECT_THROW(tc::select_random<float>(1, 3, rng), tc::ConfigError);
}
