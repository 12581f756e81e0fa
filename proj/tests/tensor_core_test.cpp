#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "parshare/errors.hpp"
#include "parshare/graph.hpp"

using namespace parshare;

namespace {

template <typename T = double>
Tensor<T> leaf(Shape shape, std::vector<T> values) {
  return Tensor<T>(std::move(shape), std::move(values), true);
}

Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                             bool grad = true) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor<double>(std::move(shape), std::move(v), grad);
}

// Reduces any rank-2/3 tensor to a scalar through a fixed random linear map,
// so every output coordinate carries a distinct weight.
Tensor<double> random_functional(Graph<double>& g, const Tensor<double>& y, const Tensor<double>& weights) {
  return g.sum(g.matmul(y, weights));
}

Tensor<double> functional_weights(const Tensor<double>& y, std::mt19937_64& rng) {
  if (y.rank() == 3) return random_tensor({y.shape()[0], y.shape()[2], 1}, rng, -1, 1, false);
  return random_tensor({y.cols(), 1}, rng, -1, 1, false);
}

}  // namespace

TEST(Matmul, IdentityAndHandExamples) {
  Graph<double> g;
  auto eye = Tensor<double>({2, 2}, {1, 0, 0, 1});
  auto m = Tensor<double>({2, 2}, {1, 2, 3, 4});
  auto r = g.matmul(eye, m);
  EXPECT_EQ(std::vector<double>(r.data().begin(), r.data().end()), (std::vector<double>{1, 2, 3, 4}));

  auto col = Tensor<double>({2, 1}, {5, 6});
  auto p = g.matmul(m, col);
  EXPECT_EQ(p.shape(), (Shape{2, 1}));
  EXPECT_DOUBLE_EQ(p[0], 17);
  EXPECT_DOUBLE_EQ(p[1], 39);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Graph<double> g;
  auto a = Tensor<double>::zeros({2, 3});
  auto b = Tensor<double>::zeros({4, 5});
  try {
    g.matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[4x5]"), std::string::npos);
  }
}

TEST(Matmul, TransposedAndBatchedAgreeWithPlainProduct) {
  std::mt19937_64 rng(3);
  auto a = random_tensor({3, 4}, rng, -1, 1, false);
  auto b = random_tensor({4, 5}, rng, -1, 1, false);
  std::vector<double> bt(20);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 5; ++j) bt[j * 4 + i] = b.at(i, j);
  Graph<double> g;
  auto plain = g.matmul(a, b);
  auto trans = g.matmul(a, Tensor<double>({5, 4}, bt), true);
  for (std::size_t i = 0; i < plain.size(); ++i) EXPECT_NEAR(plain[i], trans[i], 1e-14);

  std::vector<double> a2(a.data().begin(), a.data().end());
  a2.insert(a2.end(), a.data().begin(), a.data().end());
  std::vector<double> b2(b.data().begin(), b.data().end());
  b2.insert(b2.end(), b.data().begin(), b.data().end());
  auto batched = g.matmul(Tensor<double>({2, 3, 4}, a2), Tensor<double>({2, 4, 5}, b2));
  for (std::size_t i = 0; i < plain.size(); ++i) {
    EXPECT_DOUBLE_EQ(batched[i], plain[i]);
    EXPECT_DOUBLE_EQ(batched[i + plain.size()], plain[i]);
  }
}

TEST(Softmax, ClosedFormRows) {
  Graph<double> g;
  const double inf = std::numeric_limits<double>::infinity();
  auto s = g.softmax_rows(Tensor<double>({3, 3}, {1, 1, 1, 0, std::log(2.0), -inf, 0, -inf, -inf}));
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(s.at(0, c), 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(s.at(1, 0), 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(s.at(1, 1), 2.0 / 3.0, 1e-15);
  EXPECT_EQ(s.at(1, 2), 0.0);
  EXPECT_EQ(s.at(2, 0), 1.0);
  EXPECT_EQ(s.at(2, 1), 0.0);
}

TEST(Softmax, FullyMaskedRowIsDegenerate) {
  Graph<double> g;
  const double inf = std::numeric_limits<double>::infinity();
  EXPECT_THROW(g.softmax_rows(Tensor<double>({2, 2}, {0, 1, -inf, -inf})), DegenerateRowError);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor({4, 7}, rng, -20, 20, false);
    std::vector<double> shifted(x.data().begin(), x.data().end());
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < 7; ++c) shifted[r * 7 + c] += 3.5 * double(r + 1);
    Graph<double> g;
    auto a = g.softmax_rows(x);
    auto b = g.softmax_rows(Tensor<double>({4, 7}, shifted));
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0;
      for (std::size_t c = 0; c < 7; ++c) {
        total += a.at(r, c);
        EXPECT_NEAR(a.at(r, c), b.at(r, c), 1e-12);
      }
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
  }
}

TEST(LayerNorm, HandExamples) {
  Graph<double> g;
  auto ones = Tensor<double>({2}, {1, 1});
  auto zeros = Tensor<double>({2}, {0, 0});
  auto constant = g.layer_norm(Tensor<double>({1, 2}, {5, 5}), ones, zeros);
  EXPECT_NEAR(constant[0], 0.0, 1e-12);
  EXPECT_NEAR(constant[1], 0.0, 1e-12);

  auto y = g.layer_norm(Tensor<double>({1, 2}, {1, 3}), ones, zeros);
  EXPECT_NEAR(y[0], -1.0, 1e-6);
  EXPECT_NEAR(y[1], 1.0, 1e-6);

  auto z = g.layer_norm(Tensor<double>({1, 2}, {1, 3}), Tensor<double>({2}, {2, 2}),
                        Tensor<double>({2}, {1, 1}));
  EXPECT_NEAR(z[0], -1.0, 1e-5);
  EXPECT_NEAR(z[1], 3.0, 1e-5);
}

TEST(Relu, ForwardAndSubgradient) {
  Graph<double> g;
  auto y = g.relu(Tensor<double>({3}, {-1, 0, 2}));
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1], 0.0);
  EXPECT_EQ(y[2], 2.0);
  auto neg = g.relu(Tensor<double>({4}, {-1, -2, -3, -0.5}));
  for (auto v : neg.data()) EXPECT_EQ(v, 0.0);

  auto x = leaf<double>({3}, {-1, 2, 0});
  Graph<double> g2;
  g2.backward(g2.sum(g2.relu(x)));
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 1.0);
  EXPECT_EQ(x.grad()[2], 0.0);  // subgradient at exactly zero
}

TEST(Dropout, IdentityCases) {
  auto x = Tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  Graph<double> train({.training = true, .seed = 5});
  auto a = train.dropout(x, 0.0);
  Graph<double> infer({.training = false});
  auto b = infer.dropout(x, 0.1);
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_EQ(a[i], x[i]);
    EXPECT_EQ(b[i], x[i]);
  }
  EXPECT_FALSE(train.stochastic());
  train.backward(train.sum(a));
  for (auto gv : x.grad()) EXPECT_EQ(gv, 1.0);
}

TEST(Dropout, InvertedScalingMeanAndReproducibility) {
  auto ones = Tensor<float>::filled({100000}, 1.0f);
  Graph<float> g1({.training = true, .seed = 42});
  Graph<float> g2({.training = true, .seed = 42});
  auto a = g1.dropout(ones, 0.5);
  auto b = g2.dropout(ones, 0.5);
  double mean = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_EQ(a[i], b[i]);
    ASSERT_TRUE(a[i] == 0.0f || a[i] == 2.0f);
    mean += a[i];
  }
  mean /= double(a.size());
  EXPECT_NEAR(mean, 1.0, 0.01);
  EXPECT_TRUE(g1.stochastic());
}

TEST(Dropout, RejectsProbabilityOne) {
  Graph<double> g({.training = true});
  EXPECT_THROW(g.dropout(Tensor<double>::zeros({2}), 1.0), ConfigError);
}

TEST(Backward, AccumulatesAcrossCalls) {
  std::mt19937_64 rng(1);
  auto w = random_tensor({3, 4}, rng);
  auto x = random_tensor({2, 3}, rng, -1, 1, false);
  Graph<double> g;
  auto loss = g.sum(g.softmax_rows(g.matmul(x, w)));
  auto loss2 = g.sum(g.matmul(x, w));
  g.backward(loss2);
  std::vector<double> once(w.grad().begin(), w.grad().end());
  g.backward(loss2);
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_EQ(w.grad()[i], 2.0 * once[i]);
  (void)loss;
}

TEST(GradCheck, LinearLossIsExact) {
  std::mt19937_64 rng(2);
  auto w = random_tensor({4, 3}, rng);
  auto x = random_tensor({3, 1}, rng, -1, 1, false);
  double err = grad_check([&](Graph<double>& g) { return g.sum(g.matmul(w, x)); }, w);
  EXPECT_LE(err, 1e-10);
}

TEST(GradCheck, RejectsActiveDropout) {
  std::mt19937_64 rng(2);
  auto w = random_tensor({4, 3}, rng);
  EXPECT_THROW(grad_check([&](Graph<double>& g) { return g.sum(g.dropout(w, 0.1)); }, w, 1e-3,
                          {.training = true, .seed = 1}),
               ConfigError);
}

// Every differentiable op, randomized shapes up to 8 and 20 seeds.
TEST(GradCheck, EveryOpRandomized) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> dim(2, 8);
    const std::size_t m = dim(rng), k = dim(rng), n = dim(rng);

    auto a = random_tensor({m, k}, rng);
    auto b = random_tensor({k, n}, rng);
    auto bt = random_tensor({n, k}, rng);
    auto wmn = random_tensor({n, 1}, rng, -1, 1, false);
    EXPECT_LT(grad_check([&](Graph<double>& g) { return g.sum(g.matmul(g.matmul(a, b), wmn)); },
                         std::vector<Tensor<double>>{a, b})
                  .worst(),
              1e-4);
    EXPECT_LT(grad_check([&](Graph<double>& g) { return g.sum(g.matmul(g.matmul(a, bt, true), wmn)); },
                         std::vector<Tensor<double>>{a, bt})
                  .worst(),
              1e-4);

    auto a3 = random_tensor({2, m, k}, rng);
    auto b3 = random_tensor({2, n, k}, rng);
    auto w3 = random_tensor({2, n, 1}, rng, -1, 1, false);
    EXPECT_LT(grad_check([&](Graph<double>& g) { return g.sum(g.matmul(g.matmul(a3, b3, true), w3)); },
                         std::vector<Tensor<double>>{a3, b3})
                  .worst(),
              1e-4);

    auto x = random_tensor({m, n}, rng, -2, 2);
    auto y = random_tensor({m, n}, rng, -2, 2);
    auto bias = random_tensor({n}, rng);
    auto wx = functional_weights(x, rng);
    auto check = [&](auto&& build, std::vector<Tensor<double>> params) {
      EXPECT_LT(grad_check([&](Graph<double>& g) { return random_functional(g, build(g), wx); }, params).worst(),
                1e-4)
          << "seed " << seed;
    };
    check([&](Graph<double>& g) { return g.add(x, y); }, {x, y});
    check([&](Graph<double>& g) { return g.add_row(x, bias); }, {x, bias});
    check([&](Graph<double>& g) { return g.scale(x, 0.7); }, {x});
    check([&](Graph<double>& g) { return g.softmax_rows(x); }, {x});
    check([&](Graph<double>& g) { return g.dropout(x, 0.3); }, {x});

    // Keep ReLU inputs away from the kink.
    std::vector<double> rv(x.data().begin(), x.data().end());
    for (auto& v : rv) v = v >= 0 ? v + 0.1 : v - 0.1;
    auto xr = Tensor<double>({m, n}, rv, true);
    check([&](Graph<double>& g) { return g.relu(xr); }, {xr});

    // A two-feature layer norm is a near-step function of x0 - x1, where
    // central differences lose accuracy; use at least four features.
    const std::size_t d = n + 2 > 8 ? 8 : std::max<std::size_t>(n + 2, 4);
    auto xl = random_tensor({m, d}, rng, -4, 4);
    auto gain = random_tensor({d}, rng, 0.5, 1.5);
    auto beta = random_tensor({d}, rng);
    auto wl = functional_weights(xl, rng);
    EXPECT_LT(grad_check([&](Graph<double>& g) { return random_functional(g, g.layer_norm(xl, gain, beta), wl); },
                         std::vector<Tensor<double>>{xl, gain, beta})
                  .worst(),
              1e-4)
        << "seed " << seed;

    auto table = random_tensor({k, n}, rng);
    std::vector<int> ids;
    for (std::size_t i = 0; i < m; ++i) ids.push_back(int(i % k));
    check([&](Graph<double>& g) { return g.gather_rows(table, ids); }, {table});

    // Heads: batch 2, heads 2, so rows and columns must be even.
    auto xh = random_tensor({2 * m, 2 * n}, rng);
    auto wh = functional_weights(xh, rng);
    EXPECT_LT(grad_check(
                  [&](Graph<double>& g) {
                    auto split = g.split_heads(xh, 2, 2);
                    auto scores = g.scale(g.matmul(split, split, true), 1.0 / std::sqrt(double(n)));
                    const double inf = std::numeric_limits<double>::infinity();
                    std::vector<double> mask(2 * m * m, 0.0);
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = i + 1; j < m; ++j) mask[i * m + j] = -inf;
                    auto masked = g.masked_fill(scores, Tensor<double>({2, m, m}, mask), 2);
                    auto attn = g.matmul(g.softmax_rows(masked), split);
                    return random_functional(g, g.merge_heads(attn, 2, 2), wh);
                  },
                  std::vector<Tensor<double>>{xh})
                  .worst(),
              1e-4);

    auto logits = random_tensor({m, n}, rng, -3, 3);
    std::vector<int> targets;
    for (std::size_t i = 0; i < m; ++i) targets.push_back(int(i % n));
    targets[0] = 0;
    EXPECT_LT(grad_check([&](Graph<double>& g) { return g.smoothed_cross_entropy(logits, targets, 0.1, 0); },
                         logits),
              1e-4);
  }
}

TEST(Tensor, ShapeInvariants) {
  EXPECT_THROW(Tensor<float>({2, 2}, {1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor<float>({0, 2}, {}), DimensionError);
  auto t = Tensor<float>::zeros({2, 3}, true);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_FALSE(t.has_grad());
  t.mutable_grad();
  EXPECT_TRUE(t.has_grad());
  EXPECT_EQ(t.grad().size(), t.size());
}

TEST(Matmul, NonFiniteResultIsAnError) {
  Graph<float> g;
  auto big = Tensor<float>({1, 2}, {3e38f, 3e38f});
  auto ones = Tensor<float>({2, 1}, {10.f, 10.f});
  EXPECT_THROW(g.matmul(big, ones), NonFiniteError);
}
