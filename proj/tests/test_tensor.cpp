#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "maniflow/gradcheck.hpp"
#include "maniflow/tensor.hpp"

using namespace maniflow;

namespace {

Tensor rand_pm1(Shape shape, RngStream& rng, bool rg = false) {
  return Tensor::rand_uniform(std::move(shape), rng, -1.0f, 1.0f, rg);
}

// weighted scalar reduction so constant-sum outputs (softmax, layer_norm)
// still produce non-trivial gradients
Tensor weighted_sum(const Tensor& out, RngStream& rng) {
  Tensor w = rand_pm1(out.shape(), rng);
  return sum(mul(out, w));
}

void expect_grad_ok(const Tensor& loss, const std::vector<NamedLeaf>& leaves) {
  auto res = grad_check(loss, leaves, 1e-3);
  EXPECT_LT(res.max_rel_err, 1e-4) << "worst tensor: " << res.worst;
}

}  // namespace

TEST(TensorOps, MatmulIdentity) {
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor c = matmul(a, eye);
  const std::vector<float> want = {1, 2, 3, 4};
  for (int i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(c.values()[i], want[i]);
}

TEST(TensorOps, MatmulValues) {
  Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from_data({3, 2}, {7, 8, 9, 10, 11, 12});
  Tensor c = matmul(a, b);
  EXPECT_FLOAT_EQ(c.values()[0], 58);
  EXPECT_FLOAT_EQ(c.values()[1], 64);
  EXPECT_FLOAT_EQ(c.values()[2], 139);
  EXPECT_FLOAT_EQ(c.values()[3], 154);
}

TEST(TensorOps, SoftmaxSymmetry) {
  Tensor x = Tensor::from_data({2}, {0, 0});
  Tensor y = softmax_lastdim(x);
  EXPECT_FLOAT_EQ(y.values()[0], 0.5f);
  EXPECT_FLOAT_EQ(y.values()[1], 0.5f);
}

TEST(TensorOps, SoftmaxRowsSumToOne) {
  RngStream rng(21);
  Tensor x = Tensor::rand_uniform({8, 16}, rng, -5.0f, 5.0f);
  Tensor y = softmax_lastdim(x);
  for (int r = 0; r < 8; ++r) {
    double s = 0.0;
    for (int i = 0; i < 16; ++i) s += y.values()[r * 16 + i];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(TensorOps, LayerNormHandValues) {
  // row [2,4]: mean 3, variance 1
  Tensor x = Tensor::from_data({2}, {2, 4});
  Tensor y = layer_norm_lastdim(x);
  EXPECT_NEAR(y.values()[0], -1.0f, 1e-4);
  EXPECT_NEAR(y.values()[1], 1.0f, 1e-4);
}

TEST(TensorOps, LayerNormRowMeanNearZero) {
  RngStream rng(22);
  Tensor x = Tensor::rand_uniform({6, 32}, rng, -3.0f, 3.0f);
  Tensor y = layer_norm_lastdim(x);
  for (int r = 0; r < 6; ++r) {
    double s = 0.0;
    for (int i = 0; i < 32; ++i) s += y.values()[r * 32 + i];
    EXPECT_LT(std::abs(s / 32.0), 1e-5);
  }
}

TEST(TensorOps, ShapeMismatchReportsBothShapes) {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({3, 3});
  try {
    add(a, b);
    FAIL() << "expected TensorError";
  } catch (const TensorError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[3,3]"), std::string::npos) << msg;
  }
  EXPECT_THROW(matmul(a, a), TensorError);
  EXPECT_THROW(reshape(a, {4, 2}), TensorError);
  EXPECT_THROW(slice(a, 1, 2, 2), TensorError);
  EXPECT_THROW(repeat(a, 0, 3), TensorError);  // extent 2, not 1
}

TEST(TensorOps, ConcatSliceRoundTrip) {
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from_data({2, 3}, {5, 6, 7, 8, 9, 10});
  Tensor c = concat({a, b}, 1);
  ASSERT_EQ(c.shape(), (Shape{2, 5}));
  const std::vector<float> want = {1, 2, 5, 6, 7, 3, 4, 8, 9, 10};
  for (int i = 0; i < 10; ++i) EXPECT_FLOAT_EQ(c.values()[i], want[i]);
  Tensor back = slice(c, 1, 2, 3);
  for (int i = 0; i < 6; ++i) EXPECT_FLOAT_EQ(back.values()[i], b.values()[i]);
}

TEST(TensorOps, RepeatTiles) {
  Tensor a = Tensor::from_data({2, 1, 2}, {1, 2, 3, 4});
  Tensor r = repeat(a, 1, 3);
  ASSERT_EQ(r.shape(), (Shape{2, 3, 2}));
  for (int t = 0; t < 3; ++t) {
    EXPECT_FLOAT_EQ(r.values()[t * 2 + 0], 1);
    EXPECT_FLOAT_EQ(r.values()[6 + t * 2 + 1], 4);
  }
}

TEST(TensorOps, EmbeddingLookup) {
  Tensor table = Tensor::from_data({3, 2}, {1, 2, 3, 4, 5, 6});
  Tensor e = embedding_lookup(table, {2, 0, 2});
  ASSERT_EQ(e.shape(), (Shape{3, 2}));
  const std::vector<float> want = {5, 6, 1, 2, 5, 6};
  for (int i = 0; i < 6; ++i) EXPECT_FLOAT_EQ(e.values()[i], want[i]);
  EXPECT_THROW(embedding_lookup(table, {3}), TensorError);
}

TEST(TensorOps, SinusoidalFeatures) {
  Tensor f0 = sinusoidal_features(0.0f, 8);
  for (int i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(f0.values()[i], 0.0f);      // sines
  for (int i = 4; i < 8; ++i) EXPECT_FLOAT_EQ(f0.values()[i], 1.0f);      // cosines
  Tensor f1 = sinusoidal_features(0.37f, 8);
  Tensor f2 = sinusoidal_features(0.37f, 8);
  for (int i = 0; i < 8; ++i) EXPECT_FLOAT_EQ(f1.values()[i], f2.values()[i]);
}

TEST(Backward, SumOfSquares) {
  Tensor x = Tensor::from_data({3}, {1, 2, 3}, true);
  Tensor loss = sum(mul(x, x));
  backward(loss);
  ASSERT_TRUE(x.has_grad());
  EXPECT_FLOAT_EQ(x.grad()[0], 2);
  EXPECT_FLOAT_EQ(x.grad()[1], 4);
  EXPECT_FLOAT_EQ(x.grad()[2], 6);
}

TEST(Backward, AccumulatesAcrossCalls) {
  Tensor x = Tensor::from_data({2}, {1, 1}, true);
  Tensor loss = sum(mul(x, x));
  backward(loss);
  backward(loss);
  EXPECT_FLOAT_EQ(x.grad()[0], 4);  // 2 + 2
  x.zero_grad();
  backward(loss);
  EXPECT_FLOAT_EQ(x.grad()[0], 2);
}

TEST(Backward, DetachedInputGetsNoGradient) {
  Tensor x = Tensor::from_data({2}, {1, 2}, true);
  Tensor c = Tensor::from_data({2}, {3, 4});  // no grad requested
  Tensor d = x.detach();
  Tensor loss = sum(add(mul(x, c), d));
  backward(loss);
  EXPECT_TRUE(x.has_grad());
  EXPECT_FALSE(c.has_grad());
  EXPECT_FALSE(d.has_grad());
}

TEST(Backward, NonScalarLossRejected) {
  Tensor x = Tensor::from_data({2}, {1, 2}, true);
  EXPECT_THROW(backward(mul(x, x)), TensorError);
}

TEST(Backward, MseAgainstFiniteDifferences) {
  RngStream rng(31);
  Tensor w = rand_pm1({4, 3}, rng, true);
  Tensor x = rand_pm1({5, 4}, rng);
  Tensor y = rand_pm1({5, 3}, rng);
  Tensor diff = sub(matmul(x, w), y);
  Tensor loss = mean(mul(diff, diff));
  expect_grad_ok(loss, {{"w", w}});
}

TEST(Backward, EveryOpMatchesFiniteDifferences) {
  RngStream rng(77);

  {  // add, sub, mul with matching shapes and with a scalar
    Tensor a = rand_pm1({3, 4}, rng, true);
    Tensor b = rand_pm1({3, 4}, rng, true);
    Tensor s = rand_pm1({1}, rng, true);
    Tensor out = mul(sub(add(a, b), s), add(mul(a, b), s));
    expect_grad_ok(weighted_sum(out, rng), {{"a", a}, {"b", b}, {"s", s}});
  }
  {  // scalar - tensor direction
    Tensor a = rand_pm1({5}, rng, true);
    Tensor s = rand_pm1({1}, rng, true);
    expect_grad_ok(weighted_sum(sub(s, a), rng), {{"a", a}, {"s", s}});
  }
  {  // scalar_mul
    Tensor a = rand_pm1({2, 3}, rng, true);
    expect_grad_ok(weighted_sum(scalar_mul(a, 0.73f), rng), {{"a", a}});
  }
  {  // matmul 2D
    Tensor a = rand_pm1({3, 4}, rng, true);
    Tensor b = rand_pm1({4, 2}, rng, true);
    expect_grad_ok(weighted_sum(matmul(a, b), rng), {{"a", a}, {"b", b}});
  }
  {  // matmul 3D x 3D
    Tensor a = rand_pm1({2, 3, 4}, rng, true);
    Tensor b = rand_pm1({2, 4, 2}, rng, true);
    expect_grad_ok(weighted_sum(matmul(a, b), rng), {{"a", a}, {"b", b}});
  }
  {  // matmul 3D x 2D
    Tensor a = rand_pm1({2, 3, 4}, rng, true);
    Tensor b = rand_pm1({4, 2}, rng, true);
    expect_grad_ok(weighted_sum(matmul(a, b), rng), {{"a", a}, {"b", b}});
  }
  {  // transpose 2D and 3D
    Tensor a = rand_pm1({3, 4}, rng, true);
    Tensor b = rand_pm1({2, 3, 4}, rng, true);
    expect_grad_ok(weighted_sum(transpose(a), rng), {{"a", a}});
    expect_grad_ok(weighted_sum(transpose(b), rng), {{"b", b}});
  }
  {  // reshape, concat, slice, repeat
    Tensor a = rand_pm1({2, 6}, rng, true);
    Tensor b = rand_pm1({2, 3}, rng, true);
    Tensor out = concat({reshape(a, {2, 2, 3}), reshape(b, {2, 1, 3})}, 1);
    out = slice(out, 1, 1, 2);
    expect_grad_ok(weighted_sum(out, rng), {{"a", a}, {"b", b}});
    Tensor c = rand_pm1({2, 1, 3}, rng, true);
    expect_grad_ok(weighted_sum(repeat(c, 1, 4), rng), {{"c", c}});
  }
  {  // sum and mean
    Tensor a = rand_pm1({3, 3}, rng, true);
    expect_grad_ok(sum(a), {{"a", a}});
    expect_grad_ok(mean(mul(a, a)), {{"a", a}});
  }
  {  // relu: keep inputs away from the kink
    Tensor a = rand_pm1({4, 4}, rng, true);
    auto* vals = a.node()->value.data();
    for (int i = 0; i < 16; ++i)
      if (std::abs(vals[i]) < 0.05f) vals[i] = vals[i] < 0 ? -0.1f : 0.1f;
    expect_grad_ok(weighted_sum(relu(a), rng), {{"a", a}});
  }
  {  // gelu, tanh
    Tensor a = rand_pm1({4, 4}, rng, true);
    expect_grad_ok(weighted_sum(gelu(a), rng), {{"a", a}});
    expect_grad_ok(weighted_sum(tanh_act(a), rng), {{"a", a}});
  }
  {  // softmax, layer_norm
    Tensor a = rand_pm1({3, 5}, rng, true);
    expect_grad_ok(weighted_sum(softmax_lastdim(a), rng), {{"a", a}});
    expect_grad_ok(weighted_sum(layer_norm_lastdim(a), rng), {{"a", a}});
  }
  {  // embedding with a repeated row
    Tensor t = rand_pm1({4, 3}, rng, true);
    expect_grad_ok(weighted_sum(embedding_lookup(t, {0, 2, 0, 3}), rng), {{"t", t}});
  }
  {  // add_rowvec
    Tensor x = rand_pm1({2, 3, 4}, rng, true);
    Tensor v = rand_pm1({4}, rng, true);
    expect_grad_ok(weighted_sum(add_rowvec(x, v), rng), {{"x", x}, {"v", v}});
  }
}

TEST(Backward, ReplayDeterminism) {
  auto run = [](std::vector<float>* vals, std::vector<float>* grads) {
    RngStream rng(555);
    Tensor w1 = rand_pm1({6, 8}, rng, true);
    Tensor w2 = rand_pm1({8, 2}, rng, true);
    Tensor x = rand_pm1({4, 6}, rng);
    Tensor h = gelu(matmul(x, w1));
    Tensor out = softmax_lastdim(matmul(h, w2));
    Tensor loss = mean(mul(out, out));
    backward(loss);
    vals->assign(out.values().begin(), out.values().end());
    grads->assign(w1.grad().begin(), w1.grad().end());
  };
  std::vector<float> v1, g1, v2, g2;
  run(&v1, &g1);
  run(&v2, &g2);
  ASSERT_EQ(v1.size(), v2.size());
  EXPECT_EQ(0, std::memcmp(v1.data(), v2.data(), v1.size() * sizeof(float)));
  EXPECT_EQ(0, std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(float)));
}

TEST(Backward, EmaStyleForwardStaysOffTape) {
  Tensor w = Tensor::from_data({2, 2}, {1, 0, 0, 1});  // requires_grad=false
  Tensor x = Tensor::from_data({1, 2}, {1, 2});
  Tensor out = matmul(x, w);
  EXPECT_FALSE(out.requires_grad());
  EXPECT_TRUE(out.node()->parents.empty());  // value-only result
}
