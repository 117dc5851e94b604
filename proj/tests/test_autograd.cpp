#include "test_util.hpp"

using namespace gaam;
using namespace gaam::testing;

namespace {

constexpr double kH = 1e-5;
constexpr double kTol = 1e-4;

double check1(const std::function<V(const V&)>& f, const A& x) { return grad_check<double>(f, V(x, true), kH); }

}  // namespace

TEST(Backward, SumGivesOnes) {
  V x = param(random_array({3, 4}, 1));
  backward(sum(x));
  EXPECT_EQ(x.grad(), A({3, 4}, 1.0));
}

TEST(Backward, SumOfSquaresGivesTwoX) {
  const A xv = random_array({5}, 2);
  V x = param(xv);
  backward(sum(x * x));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2 * xv[i]);
}

TEST(Backward, NonScalarLossRejected) {
  V x = param(A({2}, 1.0));
  EXPECT_THROW(backward(x * x), ContractError);
}

TEST(Backward, RepeatedCallsAccumulate) {
  V x = param(A::vector({1.0, 2.0}));
  backward(sum(x));
  backward(sum(x));
  EXPECT_EQ(x.grad(), A::vector({2.0, 2.0}));
  x.zero_grad();
  EXPECT_EQ(x.grad(), A::vector({0.0, 0.0}));
}

TEST(Backward, SharedSubgraphGetsBothPaths) {
  V x = param(A::vector({3.0}));
  const V y = x * x;
  backward(sum(y + y));
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Backward, ConstantsCollectNoGradient) {
  V x = param(A::vector({1.0}));
  V c(A::vector({2.0}));
  backward(sum(x * c));
  EXPECT_FALSE(c.has_grad());
  EXPECT_THROW(c.grad(), ContractError);
}

TEST(Backward, CompositeMatchesFiniteDifferences) {
  V a = param(random_array({3, 4}, 3));
  V b = param(random_array({4, 2}, 4));
  const double err = grad_check<double>([&] { return sum(exp(matmul(a, b)) * matmul(a, b)); }, {a, b}, kH);
  EXPECT_LE(err, kTol);
}

TEST(GradCheck, SumIsExact) { EXPECT_LE(check1([](const V& x) { return sum(x); }, random_array({4}, 5)), 1e-9); }

TEST(GradCheck, SumExp) {
  EXPECT_LE(check1([](const V& x) { return sum(exp(x)); }, random_array({6}, 6)), 1e-6);
}

TEST(GradCheck, RejectsNonFiniteProbe) {
  // f blows up as soon as x moves off zero.
  const auto f = [](const V& x) { return sum(log(x)); };
  EXPECT_THROW(grad_check<double>(f, V(A::vector({1e-6}), true), 1e-5), NumericError);
}

struct UnaryCase {
  const char* name;
  std::function<V(const V&)> f;
  double lo, hi;
};

class UnaryGrad : public ::testing::TestWithParam<UnaryCase> {};

TEST_P(UnaryGrad, MatchesFiniteDifferences) {
  const auto& c = GetParam();
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    EXPECT_LE(check1([&](const V& x) { return sum(c.f(x) * V(random_array({3, 4}, 100))); },
                     random_array({3, 4}, seed, c.lo, c.hi)),
              kTol);
  }
}

INSTANTIATE_TEST_SUITE_P(
    Ops, UnaryGrad,
    ::testing::Values(UnaryCase{"exp", [](const V& x) { return exp(x); }, -1, 1},
                      UnaryCase{"log", [](const V& x) { return log(x); }, 0.5, 2},
                      UnaryCase{"sqrt", [](const V& x) { return sqrt(x); }, 0.5, 2},
                      UnaryCase{"square", [](const V& x) { return square(x); }, -1, 1},
                      UnaryCase{"abs", [](const V& x) { return abs(x); }, 0.2, 1},
                      UnaryCase{"relu", [](const V& x) { return relu(x); }, 0.2, 1},
                      UnaryCase{"pow", [](const V& x) { return pow(x, 2.5); }, 0.5, 2},
                      UnaryCase{"neg", [](const V& x) { return neg(x); }, -1, 1},
                      UnaryCase{"scale", [](const V& x) { return scale(x, 3.0); }, -1, 1},
                      UnaryCase{"softmax0", [](const V& x) { return softmax(x, 0); }, -2, 2},
                      UnaryCase{"softmax1", [](const V& x) { return softmax(x, 1); }, -2, 2},
                      UnaryCase{"transpose", [](const V& x) { return transpose(transpose(x)); }, -1, 1},
                      UnaryCase{"reshape", [](const V& x) { return reshape(reshape(x, {12}), {3, 4}); }, -1, 1},
                      UnaryCase{"mean0", [](const V& x) { return add_scalar(x, 0.0) * reduce_mean(x, 0, true); }, -1, 1},
                      UnaryCase{"sum1", [](const V& x) { return x * reduce_sum(x, 1, true); }, -1, 1},
                      UnaryCase{"slice", [](const V& x) { return concat<double>({slice(x, 1, 2, 4), slice(x, 1, 0, 2)}, 1); }, -1, 1}),
    [](const auto& info) { return std::string(info.param.name); });

TEST(BinaryGrad, BroadcastArithmetic) {
  V m = param(random_array({3, 4}, 7));
  V r = param(random_array({4}, 8, 0.5, 1.5));
  V c = param(random_array({3, 1}, 9, 0.5, 1.5));
  const double err = grad_check<double>([&] { return sum((m + r) * c - m / r + r / c); }, {m, r, c}, kH);
  EXPECT_LE(err, kTol);
}

TEST(BinaryGrad, BatchedMatmul) {
  V a = param(random_array({2, 3, 4}, 10));
  V b = param(random_array({2, 4, 2}, 11));
  EXPECT_LE(grad_check<double>([&] { return sum(square(matmul(a, b))); }, {a, b}, kH), kTol);
}

// ---------------------------------------------------------------------------
// conv2d

namespace {

A conv_oracle(const A& in, const A& w, const A& b, std::size_t pad) {
  const std::size_t c = in.shape()[0], h = in.shape()[1], wd = in.shape()[2];
  const std::size_t o = w.shape()[0], k = w.shape()[2];
  const std::size_t oh = h + 2 * pad - k + 1, ow = wd + 2 * pad - k + 1;
  A out({o, oh, ow}, 0.0);
  for (std::size_t oc = 0; oc < o; ++oc)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        double s = b[oc];
        for (std::size_t ic = 0; ic < c; ++ic)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long iy = static_cast<long>(y + ky) - static_cast<long>(pad);
              const long ix = static_cast<long>(x + kx) - static_cast<long>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) continue;
              s += w[((oc * c + ic) * k + ky) * k + kx] * in[(ic * h + iy) * wd + ix];
            }
        out[(oc * oh + y) * ow + x] = s;
      }
  return out;
}

}  // namespace

TEST(Conv2d, MatchesLoopOracle) {
  for (std::size_t k : {1u, 3u, 5u}) {
    const A in = random_array({2, 5, 7}, 20 + k), w = random_array({3, 2, k, k}, 30 + k), b = random_array({3}, 40);
    const std::size_t pad = k / 2;
    EXPECT_TRUE(arrays_near(conv2d(V(in), V(w), V(b), pad).value(), conv_oracle(in, w, b, pad), 1e-10)) << "k=" << k;
  }
  // No padding shrinks the map.
  const A in = random_array({1, 6, 6}, 50), w = random_array({2, 1, 3, 3}, 51), b = random_array({2}, 52);
  EXPECT_TRUE(arrays_near(conv2d(V(in), V(w), V(b), 0).value(), conv_oracle(in, w, b, 0), 1e-10));
}

TEST(Conv2d, GradientsMatchFiniteDifferences) {
  for (std::size_t k : {3u, 2u}) {
    V in = param(random_array({2, 4, 5}, 60));
    V w = param(random_array({3, 2, k, k}, 61));
    V b = param(random_array({3}, 62));
    const A mix = random_array({3, 4 + 2 - k + 1, 5 + 2 - k + 1}, 63);
    const double err = grad_check<double>([&] { return sum(conv2d(in, w, b, 1) * V(mix)); }, {in, w, b}, kH);
    EXPECT_LE(err, kTol) << "k=" << k;
  }
}

TEST(Conv2d, ShapeErrors) {
  EXPECT_THROW(conv2d(V(A({4, 4})), V(A({1, 1, 3, 3})), V(A({1})), 1), DimensionError);
  EXPECT_THROW(conv2d(V(A({2, 4, 4})), V(A({1, 1, 3, 3})), V(A({1})), 1), DimensionError);
  EXPECT_THROW(conv2d(V(A({1, 4, 4})), V(A({1, 1, 3, 3})), V(A({2})), 1), DimensionError);
}
