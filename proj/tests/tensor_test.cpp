// Copyright 2026 The adastate Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <unordered_map>

#include "adastate/gradcheck.hpp"
#include "adastate/ops.hpp"
#include "adastate/rng.hpp"
#include "adastate/tensor_io.hpp"

namespace adastate {
namespace {

Tensor random_tensor(SeededRng& rng, Shape shape, bool requires_grad = true) {
  Tensor t = rng.normal_tensor(std::move(shape));
  t.set_requires_grad(requires_grad);
  return t;
}

// Checks d(sum(w * f(inputs)))/d(input) against central differences for
// every input, with w a fixed random projection so all output entries matter.
void expect_grad_matches(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                         std::vector<Tensor> inputs, SeededRng& rng) {
  Tensor out = f(inputs);
  Tensor proj = rng.normal_tensor(out.shape());
  backward(sum(mul(out, proj)));
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto fd = finite_diff_grad(
        [&](const Tensor& xi) {
          NoGradGuard ng;
          auto args = inputs;
          args[i] = xi;
          return sum(mul(f(args), proj)).item();
        },
        inputs[i], 1e-6);
    EXPECT_LT(max_relative_error(inputs[i].grad(), fd.data(), 1e-6), 1e-4)
        << "input " << i << " of " << out.op_name();
  }
}

TEST(Tensor, ShapeInvariantIsEnforced) {
  EXPECT_THROW(Tensor(Shape{2, 3}, std::vector<double>(5)), ShapeError);
  Tensor t(Shape{2, 3}, std::vector<double>(6, 1.0));
  EXPECT_EQ(t.numel(), 6u);
}

TEST(ForwardEval, IdentityProgram) {
  Tensor x = Tensor::vector({1.5, -2.0, 3.25});
  Tensor y = reshape(x, x.shape());
  EXPECT_EQ(y.values(), x.values());
}

TEST(ForwardEval, MatmulOfOnes) {
  Tensor a = Tensor::ones({2, 3});
  Tensor b = Tensor::ones({3, 2});
  Tensor c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 2}));
  for (double v : c.values()) EXPECT_EQ(v, 3.0);
}

TEST(ForwardEval, SoftmaxOfZerosIsUniform) {
  Tensor y = softmax(Tensor::zeros({3}));
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(ForwardEval, ShapeMismatchNamesPrimitiveAndDims) {
  try {
    matmul(Tensor::ones({2, 3}), Tensor::ones({2, 3}));
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
  }
  try {
    add(Tensor::ones({2, 3}), Tensor::ones({4}));
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("add"), std::string::npos);
  }
}

TEST(ForwardEval, BroadcastTrailingAlignment) {
  Tensor a(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::vector({10, 20, 30});
  EXPECT_EQ(add(a, b).values(), (std::vector<double>{11, 22, 33, 14, 25, 36}));
  Tensor col(Shape{2, 1}, {100, 200});
  EXPECT_EQ(add(a, col).values(), (std::vector<double>{101, 102, 103, 204, 205, 206}));
  Tensor row(Shape{1, 3}, {1, 1, 1});
  EXPECT_EQ(add(col, row).shape(), (Shape{2, 3}));
}

TEST(BackwardGrad, SquareAtThree) {
  Tensor x = Tensor::scalar(3.0, true);
  backward(mul(x, x));
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(BackwardGrad, StopGradientBlocksFlow) {
  Tensor x = Tensor::scalar(2.0, true);
  Tensor y = Tensor::scalar(5.0, true);
  backward(mul(stop_gradient(y), x));
  EXPECT_DOUBLE_EQ(y.grad()[0], 0.0);
  EXPECT_DOUBLE_EQ(x.grad()[0], 5.0);
}

TEST(BackwardGrad, NonScalarOutputIsRejected) {
  Tensor x = Tensor::ones({3});
  x.set_requires_grad(true);
  EXPECT_THROW(backward(scale(x, 2.0)), ShapeError);
}

TEST(BackwardGrad, FanOutAccumulates) {
  Tensor x = Tensor::scalar(1.5, true);
  Tensor y = add(mul(x, x), scale(x, 3.0));
  backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 2 * 1.5 + 3.0);
}

TEST(BackwardGrad, SoftmaxCrossTermMatchesFiniteDifference) {
  SeededRng rng(7);
  Tensor x = random_tensor(rng, {5});
  Tensor target = softmax(rng.normal_tensor({5}));
  auto loss = [&](const Tensor& v) { return sum(mul(target, log(softmax(v)))); };
  backward(loss(x));
  auto fd = finite_diff_grad([&](const Tensor& v) { return loss(v).item(); }, x, 1e-6);
  EXPECT_LT(max_relative_error(x.grad(), fd.data()), 1e-5);
}

TEST(Tape, VisitsEachNodeOnceInReverseTopologicalOrder) {
  Tensor x = Tensor::vector({0.3, -0.7}, true);
  Tensor a = square(x);
  Tensor b = add(a, x);
  Tensor c = mul(a, b);
  Tensor out = sum(add(c, a));
  Tape tape(out);
  std::unordered_map<const detail::Node*, int> visits;
  std::unordered_map<const detail::Node*, std::size_t> position;
  for (std::size_t i = 0; i < tape.order().size(); ++i) position[tape.order()[i]] = i;
  tape.backward([&](const detail::Node& n) { ++visits[&n]; });
  EXPECT_EQ(tape.size(), 6u);
  for (auto& [node, count] : visits) EXPECT_EQ(count, 1);
  for (const detail::Node* node : tape.order()) {
    for (const auto& p : node->parents) {
      if (p->requires_grad) EXPECT_LT(position[node], position[p.get()]);
    }
  }
}

TEST(FiniteDiff, Square) {
  auto g = finite_diff_grad([](const Tensor& x) { return x[0] * x[0]; }, Tensor::scalar(2.0), 1e-4);
  EXPECT_NEAR(g[0], 4.0, 1e-6);
}

TEST(FiniteDiff, SumOfSines) {
  auto g = finite_diff_grad(
      [](const Tensor& x) { return std::sin(x[0]) + std::sin(x[1]); },
      Tensor::vector({0.0, std::numbers::pi / 2}), 1e-5);
  EXPECT_NEAR(g[0], 1.0, 1e-8);
  EXPECT_NEAR(g[1], 0.0, 1e-8);
}

TEST(FiniteDiff, RejectsNonPositiveStep) {
  EXPECT_THROW(finite_diff_grad([](const Tensor&) { return 0.0; }, Tensor::scalar(1.0), 0.0),
               std::invalid_argument);
}

// Every primitive: autodiff vs central differences on 100 seeds, dims <= 8.
class PrimitiveGradient : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradient, MatchesFiniteDifference) {
  SeededRng rng(1000 + GetParam());
  auto dim = [&] { return static_cast<std::size_t>(1 + rng.categorical(std::vector<double>(4, 1.0))); };
  const std::size_t m = dim(), n = dim(), k = dim();

  using Args = std::vector<Tensor>;
  expect_grad_matches([](const Args& a) { return add(a[0], a[1]); },
                      {random_tensor(rng, {m, n}), random_tensor(rng, {n})}, rng);
  expect_grad_matches([](const Args& a) { return sub(a[0], a[1]); },
                      {random_tensor(rng, {m, 1}), random_tensor(rng, {1, n})}, rng);
  expect_grad_matches([](const Args& a) { return mul(a[0], a[1]); },
                      {random_tensor(rng, {m, n}), random_tensor(rng, {m, n})}, rng);
  expect_grad_matches([](const Args& a) { return scale(add_scalar(a[0], 0.5), -1.7); },
                      {random_tensor(rng, {m, n})}, rng);
  expect_grad_matches([](const Args& a) { return square(a[0]); }, {random_tensor(rng, {m})}, rng);
  expect_grad_matches([](const Args& a) { return exp(a[0]); }, {random_tensor(rng, {m})}, rng);
  expect_grad_matches([](const Args& a) { return log(add_scalar(square(a[0]), 0.5)); },
                      {random_tensor(rng, {m})}, rng);
  expect_grad_matches([](const Args& a) { return sin(a[0]); }, {random_tensor(rng, {m})}, rng);
  expect_grad_matches([](const Args& a) { return silu(a[0]); }, {random_tensor(rng, {m, n})}, rng);
  expect_grad_matches([](const Args& a) { return sum(a[0]); }, {random_tensor(rng, {m, n})}, rng);
  expect_grad_matches([](const Args& a) { return sum_last(a[0]); }, {random_tensor(rng, {m, n})}, rng);
  expect_grad_matches([](const Args& a) { return matmul(a[0], a[1]); },
                      {random_tensor(rng, {m, k}), random_tensor(rng, {k, n})}, rng);
  expect_grad_matches([](const Args& a) { return softmax(a[0]); }, {random_tensor(rng, {m, n})}, rng);
  // Width 1 normalizes to sign(x) and its input gradient is O(eps), below FD resolution.
  expect_grad_matches([](const Args& a) { return rms_norm(a[0], a[1]); },
                      {random_tensor(rng, {m, n + 1}), random_tensor(rng, {n + 1})}, rng);
  expect_grad_matches([](const Args& a) { return concat_rows({a[0], a[1]}); },
                      {random_tensor(rng, {m, n}), random_tensor(rng, {k, n})}, rng);
  expect_grad_matches([m](const Args& a) { return slice_rows(a[0], m / 2, m); },
                      {random_tensor(rng, {m, n})}, rng);
  expect_grad_matches([&](const Args& a) { return reshape(a[0], {n, m}); },
                      {random_tensor(rng, {m, n})}, rng);

  std::vector<int> pos(m);
  for (auto& p : pos) p = static_cast<int>(rng.categorical(std::vector<double>(6, 1.0)));
  expect_grad_matches([&](const Args& a) { return rope(a[0], pos, 4); },
                      {random_tensor(rng, {m, 8})}, rng);

  const std::size_t tk = m + 1;
  std::vector<std::uint8_t> mask(m * tk, 1);
  for (std::size_t r = 0; r < m; ++r) mask[r * tk + (r % tk)] = static_cast<std::uint8_t>(r % 2);
  expect_grad_matches(
      [&](const Args& a) { return attention(a[0], a[1], a[2], 2, mask); },
      {random_tensor(rng, {m, 8}), random_tensor(rng, {tk, 8}), random_tensor(rng, {tk, 8})}, rng);
}

INSTANTIATE_TEST_SUITE_P(Seeds, PrimitiveGradient, ::testing::Range(0, 100));

TEST(StopGradient, ChangesNoForwardValueAndZeroesOnlyThatPath) {
  SeededRng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor(rng, {4});
    Tensor w = random_tensor(rng, {4});
    auto program = [&](bool cut) {
      Tensor h = mul(x, w);
      Tensor h_used = cut ? stop_gradient(h) : h;
      return sum(add(square(h_used), mul(x, x)));
    };
    Tensor plain = program(false);
    Tensor cut = program(true);
    EXPECT_EQ(plain.item(), cut.item());
    backward(cut);
    // Only the direct x*x path remains.
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_DOUBLE_EQ(x.grad()[i], 2 * x[i]);
      EXPECT_EQ(w.grad()[i], 0.0);
    }
  }
}

TEST(Rng, IdenticalSeedAndStreamGiveIdenticalDraws) {
  SeededRng a(42, 7), b(42, 7), c(42, 8);
  for (int i = 0; i < 100; ++i) {
    const double x = a.normal();
    EXPECT_EQ(x, b.normal());
    EXPECT_NE(x, c.normal());
  }
}

TEST(Rng, DrawsDependOnlyOnCounter) {
  SeededRng a(9);
  auto first = a.block(5);
  SeededRng b(9);
  for (int i = 0; i < 5; ++i) b.uniform();
  EXPECT_EQ(b.counter(), 5u);
  EXPECT_EQ(first, b.block(b.counter()));
}

TEST(Rng, NormalMoments) {
  SeededRng rng(11);
  double s = 0, ss = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    s += z;
    ss += z * z;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(ss / n, 1.0, 0.01);
}

TEST(Determinism, ForwardValuesAreBitIdentical) {
  auto run = [] {
    SeededRng rng(5);
    Tensor a = rng.normal_tensor({6, 8});
    Tensor b = rng.normal_tensor({8, 8});
    return attention(rope(matmul(a, b), {0, 1, 2, 3, 4, 5}, 4), a, a, 2).values();
  };
  EXPECT_EQ(run(), run());
}

TEST(TensorDump, RoundTripsRandomShapes) {
  SeededRng rng(21);
  for (int trial = 0; trial < 25; ++trial) {
    Shape shape(rng.categorical({1, 1, 1, 1}));
    for (auto& d : shape) d = 1 + rng.categorical({1, 1, 1, 1, 1});
    Tensor t = rng.normal_tensor(shape);
    Tensor back = decode_tensor(encode_tensor(t));
    EXPECT_EQ(back.shape(), t.shape());
    EXPECT_EQ(back.values(), t.values());
  }
}

TEST(TensorDump, HeaderLayoutIsLittleEndian) {
  Tensor t(Shape{2}, {1.0, -2.0});
  auto bytes = encode_tensor(t);
  ASSERT_EQ(bytes.size(), 4u + 2 + 2 + 8 + 1 + 16);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "ADST");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 0);
  EXPECT_EQ(bytes[6], 1);  // rank
  EXPECT_EQ(bytes[8], 2);  // dims[0]
  EXPECT_EQ(bytes[16], 0);  // dtype f64
  // 1.0 = 0x3FF0000000000000
  EXPECT_EQ(bytes[17 + 6], 0xF0);
  EXPECT_EQ(bytes[17 + 7], 0x3F);
}

TEST(TensorDump, RejectsCorruptInput) {
  auto bytes = encode_tensor(Tensor::ones({3}));
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_tensor(bad), FormatError);
  bytes.pop_back();
  EXPECT_THROW(decode_tensor(bytes), FormatError);
}

TEST(TensorDump, Float32Variant) {
  Tensor t = Tensor::vector({0.5, 1.25});
  Tensor back = decode_tensor(encode_tensor(t, DumpType::kFloat32));
  EXPECT_EQ(back.values(), t.values());
}

}  // namespace
}  // namespace adastate
