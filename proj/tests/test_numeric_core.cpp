// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "nilmformer/container.hpp"
#include "nilmformer/error.hpp"
#include "nilmformer/gradcheck.hpp"
#include "nilmformer/layers.hpp"
#include "nilmformer/ops.hpp"
#include "nilmformer/optim.hpp"

namespace nilm {
namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = scale * (2.0 * uniform01(rng) - 1.0);
  return t;
}

// Independent oracle: direct-sum convolution with zero padding.
Tensor naive_conv1d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t dil) {
  const std::size_t B = x.dim(0), cin = x.dim(1), n = x.dim(2), cout = w.dim(0), k = w.dim(2);
  const long pad = static_cast<long>((k - 1) * dil / 2);
  Tensor y({B, cout, n});
  for (std::size_t bb = 0; bb < B; ++bb)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t t = 0; t < n; ++t) {
        double s = b[o];
        for (std::size_t c = 0; c < cin; ++c)
          for (std::size_t j = 0; j < k; ++j) {
            const long src = static_cast<long>(t) + static_cast<long>(j * dil) - pad;
            if (src >= 0 && src < static_cast<long>(n)) s += w.at({o, c, j}) * x.at({bb, c, std::size_t(src)});
          }
        y.at({bb, o, t}) = s;
      }
  return y;
}

// Weighted-sum readout so every output element gets a distinct gradient.
Var readout(Tape& tape, Var y, const Tensor& weights) { return ops::sum(ops::mul(y, tape.constant(weights))); }

TEST(Conv1d, IdentityKernel) {
  Tape t;
  auto y = ops::conv1d(t.constant(Tensor({1, 1, 3}, {1, 2, 3})), t.constant(Tensor({1, 1, 3}, {0, 1, 0})),
                       t.constant(Tensor({1}, 0.0)));
  EXPECT_EQ(y.shape(), (Shape{1, 1, 3}));
  EXPECT_EQ(y.value()[0], 1);
  EXPECT_EQ(y.value()[1], 2);
  EXPECT_EQ(y.value()[2], 3);
}

TEST(Conv1d, ZeroPaddedBoxFilter) {
  Tape t;
  auto y = ops::conv1d(t.constant(Tensor({1, 1, 4}, 1.0)), t.constant(Tensor({1, 1, 3}, 1.0)),
                       t.constant(Tensor({1}, 0.0)));
  const std::vector<double> expected{2, 3, 3, 2};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(y.value()[i], expected[i]);
}

TEST(Conv1d, ZeroKernelGivesBias) {
  std::mt19937_64 rng(1);
  Tape t;
  auto y = ops::conv1d(t.constant(random_tensor({2, 3, 7}, rng)), t.constant(Tensor({2, 3, 3}, 0.0)),
                       t.constant(Tensor({2}, {0.5, -1.25})), 2);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 7; ++i) {
      EXPECT_EQ(y.value().at({b, 0, i}), 0.5);
      EXPECT_EQ(y.value().at({b, 1, i}), -1.25);
    }
}

TEST(Conv1d, MatchesDirectSumAcrossDilations) {
  std::mt19937_64 rng(2);
  for (std::size_t dil : {1, 2, 3, 8}) {
    for (std::size_t k : {1, 3, 5}) {
      Tensor x = random_tensor({2, 3, 11}, rng), w = random_tensor({4, 3, k}, rng), b = random_tensor({4}, rng);
      Tape t;
      auto y = ops::conv1d(t.constant(x), t.constant(w), t.constant(b), dil);
      Tensor ref = naive_conv1d(x, w, b, dil);
      for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.value()[i], ref[i], 1e-12);
    }
  }
}

TEST(Conv1d, ChannelMismatchIsConfigError) {
  Tape t;
  EXPECT_THROW(ops::conv1d(t.constant(Tensor({1, 2, 5})), t.constant(Tensor({1, 3, 3})), t.constant(Tensor({1}))),
               ConfigError);
}

TEST(Gelu, ReferenceValues) {
  Tape t;
  auto y = ops::gelu(t.constant(Tensor({4}, {0.0, 1.0, 40.0, -40.0})));
  EXPECT_EQ(y.value()[0], 0.0);
  EXPECT_NEAR(y.value()[1], 0.841344746068542948585, 1e-15);
  EXPECT_NEAR(y.value()[2], 40.0, 1e-12);
  EXPECT_NEAR(y.value()[3], 0.0, 1e-12);
}

TEST(BatchNorm, ConstantChannelNormalizesToZero) {
  ParameterStore store;
  BatchNorm1d bn(store, "bn", 2);
  Tape t;
  auto y = bn(t, t.constant(Tensor({3, 2, 5}, 4.0)), true);
  for (double v : y.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(BatchNorm, UnitVarianceOutputInTrainMode) {
  std::mt19937_64 rng(3);
  ParameterStore store;
  BatchNorm1d bn(store, "bn", 3);
  Tensor x = random_tensor({4, 3, 50}, rng, 5.0);
  Tape t;
  auto y = bn(t, t.constant(x), true);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0, s = 0;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < 50; ++i) m += y.value().at({b, c, i});
    m /= 200;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < 50; ++i) s += std::pow(y.value().at({b, c, i}) - m, 2);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(s / 200, 1.0, 1e-3);  // epsilon guard shrinks variance slightly
  }
}

TEST(BatchNorm, EvalUsesRunningStatsAndIsDeterministic) {
  std::mt19937_64 rng(4);
  ParameterStore store;
  BatchNorm1d bn(store, "bn", 2);
  Tensor x = random_tensor({2, 2, 6}, rng);
  Tape t;
  auto y1 = bn(t, t.constant(x), false);
  auto y2 = bn(t, t.constant(x), false);
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_EQ(y1.value()[i], y2.value()[i]);
    EXPECT_NEAR(y1.value()[i], x[i] / std::sqrt(1.0 + 1e-5), 1e-15);
  }
  bn(t, t.constant(x), true);
  EXPECT_NE(bn.running_mean()[0], 0.0);
}

TEST(LayerNorm, ConstantRowsAndZeroMean) {
  std::mt19937_64 rng(5);
  ParameterStore store;
  LayerNorm ln(store, "ln", 8);
  Tape t;
  auto c = ln(t, t.constant(Tensor({2, 8}, 3.0)));
  for (double v : c.value().values()) EXPECT_EQ(v, 0.0);
  auto y = ln(t, t.constant(random_tensor({5, 8}, rng, 10.0)));
  for (std::size_t r = 0; r < 5; ++r) {
    double m = 0;
    for (std::size_t i = 0; i < 8; ++i) m += y.value()[r * 8 + i];
    EXPECT_NEAR(m / 8, 0.0, 1e-12);
  }
  auto z = ln(t, y);
  for (std::size_t i = 0; i < y.value().size(); ++i) EXPECT_NEAR(z.value()[i], y.value()[i], 1e-4);
}

TEST(Softmax, UniformMaskedAndOracle) {
  std::mt19937_64 rng(6);
  Tape t;
  auto u = ops::softmax(t.constant(Tensor({1, 4}, 2.5)));
  for (double v : u.value().values()) EXPECT_DOUBLE_EQ(v, 0.25);
  auto m = ops::softmax(t.constant(Tensor({3}, {1.0, -std::numeric_limits<double>::infinity(), 2.0})));
  EXPECT_EQ(m.value()[1], 0.0);
  Tensor x = random_tensor({6, 9}, rng, 20.0);
  auto y = ops::softmax(t.constant(x));
  for (std::size_t r = 0; r < 6; ++r) {
    double s = 0;
    for (std::size_t i = 0; i < 9; ++i) s += std::exp(x[r * 9 + i]);
    for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(y.value()[r * 9 + i], std::exp(x[r * 9 + i]) / s, 1e-12);
  }
  const double inf = std::numeric_limits<double>::infinity();
  EXPECT_THROW(ops::softmax(t.constant(Tensor({2}, {-inf, -inf}))), ContractError);
}

TEST(Backward, SumAndHalfSquare) {
  std::mt19937_64 rng(7);
  Parameter p("p", random_tensor({5}, rng));
  {
    Tape t;
    t.backward(ops::sum(t.parameter(p)));
  }
  for (double g : p.grad.values()) EXPECT_EQ(g, 1.0);
  p.zero_grad();
  {
    Tape t;
    auto v = t.parameter(p);
    t.backward(ops::scale(ops::sum(ops::mul(v, v)), 0.5));
  }
  for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(p.grad[i], p.value[i]);
}

TEST(Backward, AccumulatesUntilZeroed) {
  Parameter p("p", Tensor({3}, 1.0));
  for (int k = 0; k < 2; ++k) {
    Tape t;
    t.backward(ops::sum(t.parameter(p)));
  }
  for (double g : p.grad.values()) EXPECT_EQ(g, 2.0);
  p.zero_grad();
  for (double g : p.grad.values()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, NonScalarLossIsContractViolation) {
  Parameter p("p", Tensor({3}, 1.0));
  Tape t;
  EXPECT_THROW(t.backward(t.parameter(p)), ContractError);
}

TEST(Dropout, EvalIdentityAndUnbiasedInTrain) {
  std::mt19937_64 rng(8);
  Tape t;
  auto x = t.constant(Tensor({20000}, 1.0));
  auto e = ops::dropout(x, 0.2, false, rng);
  EXPECT_EQ(e.id(), x.id());
  auto y = ops::dropout(x, 0.2, true, rng);
  double m = 0;
  for (double v : y.value().values()) m += v;
  EXPECT_NEAR(m / 20000, 1.0, 0.02);
}

// Every primitive passes the finite-difference check at 1e-6.
class PrimitiveGrad : public ::testing::Test {
 protected:
  std::mt19937_64 rng{9};
  Parameter make(const std::string& name, Shape s, double scale = 1.0) {
    return Parameter(name, random_tensor(std::move(s), rng, scale));
  }
  void check(const LossFn& f, std::vector<Parameter*> params, double tol = 1e-6) {
    auto r = grad_check(f, params);
    EXPECT_LE(r.max_rel_error, tol) << "worst " << r.worst_parameter << "[" << r.worst_index << "]";
    EXPECT_GT(r.checked, 0u);
  }
};

TEST_F(PrimitiveGrad, Linear) {
  auto x = make("x", {3, 4, 5}), w = make("w", {6, 5}), b = make("b", {6});
  Tensor r = random_tensor({3, 4, 6}, rng);
  check([&](Tape& t) { return readout(t, ops::linear(t.parameter(x), t.parameter(w), t.parameter(b)), r); },
        {&x, &w, &b});
}

TEST_F(PrimitiveGrad, Conv1dDilated) {
  auto x = make("x", {2, 3, 9}), w = make("w", {4, 3, 3}), b = make("b", {4});
  Tensor r = random_tensor({2, 4, 9}, rng);
  for (std::size_t dil : {1, 2, 4})
    check([&](Tape& t) { return readout(t, ops::conv1d(t.parameter(x), t.parameter(w), t.parameter(b), dil), r); },
          {&x, &w, &b});
}

TEST_F(PrimitiveGrad, Gelu) {
  auto x = make("x", {40}, 3.0);
  Tensor r = random_tensor({40}, rng);
  check([&](Tape& t) { return readout(t, ops::gelu(t.parameter(x)), r); }, {&x});
}

TEST_F(PrimitiveGrad, LayerNorm) {
  auto x = make("x", {4, 7}, 2.0), g = make("g", {7}), b = make("b", {7});
  Tensor r = random_tensor({4, 7}, rng);
  check([&](Tape& t) { return readout(t, ops::layer_norm(t.parameter(x), t.parameter(g), t.parameter(b)), r); },
        {&x, &g, &b});
}

TEST_F(PrimitiveGrad, BatchNormTrainAndEval) {
  auto x = make("x", {3, 2, 5}, 2.0), g = make("g", {2}), b = make("b", {2});
  Tensor rm({2}, 0.1), rv({2}, 0.7);
  Tensor r = random_tensor({3, 2, 5}, rng);
  for (bool train : {true, false})
    check([&](Tape& t) {
      return readout(t, ops::batch_norm(t.parameter(x), t.parameter(g), t.parameter(b), {rm, rv}, train), r);
    }, {&x, &g, &b});
}

TEST_F(PrimitiveGrad, SoftmaxWithDiagonalMask) {
  auto x = make("x", {2, 4, 4}, 2.0);
  Tensor r = random_tensor({2, 4, 4}, rng);
  check([&](Tape& t) { return readout(t, ops::softmax(ops::diag_mask(t.parameter(x))), r); }, {&x});
}

TEST_F(PrimitiveGrad, BatchedMatmulAllTransposes) {
  Tensor r = random_tensor({2, 3, 4}, rng);
  for (bool ta : {false, true})
    for (bool tb : {false, true}) {
      auto a = make("a", ta ? Shape{2, 5, 3} : Shape{2, 3, 5});
      auto b = make("b", tb ? Shape{2, 4, 5} : Shape{2, 5, 4});
      check([&](Tape& t) { return readout(t, ops::bmm(t.parameter(a), t.parameter(b), ta, tb), r); }, {&a, &b});
    }
}

TEST_F(PrimitiveGrad, ShapePlumbing) {
  auto x = make("x", {2, 3, 8}), y = make("y", {2, 1, 8}), s = make("s", {2, 2});
  Tensor r1 = random_tensor({2, 8, 3}, rng), r2 = random_tensor({2, 4, 8}, rng), r3 = random_tensor({6, 3, 4}, rng);
  Tensor r4 = random_tensor({2, 3, 8}, rng), r5 = random_tensor({2, 1, 8}, rng);
  Tensor r6 = random_tensor({2, 3, 12}, rng);
  check([&](Tape& t) {
    auto xv = t.parameter(x), yv = t.parameter(y);
    std::vector<Var> parts{yv, xv};
    auto c = ops::concat(parts, 1);                                   // [2,4,8]
    auto l = readout(t, ops::slice(ops::transpose12(c), 2, 1, 3), r1);  // [2,8,3]
    l = ops::add(l, readout(t, c, r2));
    auto e = ops::expand(yv, 1, 3);
    l = ops::add(l, readout(t, ops::mul(e, xv), r4));
    l = ops::add(l, readout(t, ops::denormalize(yv, t.parameter(s)), r5));
    return l;
  }, {&x, &y, &s});
  auto q = make("q", {2, 3, 12});
  check([&](Tape& t) {
    auto h = ops::split_heads(t.parameter(q), 3);  // [6,3,4]
    return ops::add(readout(t, h, r3), readout(t, ops::merge_heads(ops::scale(h, 2.0), 3), r6));
  }, {&q});
}

TEST_F(PrimitiveGrad, MseLoss) {
  auto p = make("p", {3, 1, 6});
  Tensor y = random_tensor({3, 1, 6}, rng);
  check([&](Tape& t) { return ops::mse_loss(t.parameter(p), t.constant(y)); }, {&p});
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  Parameter p("p", Tensor({3}, {1.0, -2.0, 3.0}));
  Adam opt({.lr = 1e-2});
  std::vector<Parameter*> ps{&p};
  opt.step(ps);
  EXPECT_EQ(p.value[0], 1.0);
  EXPECT_EQ(p.value[1], -2.0);
  EXPECT_EQ(p.value[2], 3.0);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  // m_hat = g and v_hat = g^2 after one step, so the update is lr*g/(|g|+eps).
  for (double g : {0.3, -7.0}) {
    Parameter p("p", Tensor({1}, 1.0));
    p.grad[0] = g;
    Adam opt({.lr = 1e-3});
    std::vector<Parameter*> ps{&p};
    opt.step(ps);
    EXPECT_NEAR(p.value[0], 1.0 - 1e-3 * std::copysign(1.0, g), 1e-10);
  }
}

TEST(Adam, DeterministicAcrossRuns) {
  auto run = [] {
    std::mt19937_64 rng(11);
    Parameter p("p", random_tensor({16}, rng));
    Adam opt({.lr = 0.05});
    std::vector<Parameter*> ps{&p};
    for (int s = 0; s < 20; ++s) {
      p.zero_grad();
      Tape t;
      auto v = t.parameter(p);
      t.backward(ops::sum(ops::mul(v, v)));
      opt.step(ps);
    }
    return p.value;
  };
  Tensor a = run(), b = run();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Scheduler, HalvesAfterPatienceWithoutImprovement) {
  Adam opt({.lr = 1.0});
  ReduceLROnPlateau sched(2, 0.5);
  EXPECT_FALSE(sched.observe(1.0, opt));
  EXPECT_FALSE(sched.observe(1.0, opt));
  EXPECT_TRUE(sched.observe(1.5, opt));
  EXPECT_EQ(opt.lr(), 0.5);
  EXPECT_FALSE(sched.observe(0.5, opt));
  EXPECT_EQ(sched.best(), 0.5);
  EXPECT_EQ(opt.lr(), 0.5);
}

TEST(Container, RoundTripIsExactAndBytesDeterministic) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    ArrayFile f;
    f.meta = {{"trial", trial}, {"note", "x"}};
    const int arrays = 1 + static_cast<int>(rng() % 4);
    for (int a = 0; a < arrays; ++a) {
      Shape s;
      const int rank = 1 + static_cast<int>(rng() % 3);
      for (int r = 0; r < rank; ++r) s.push_back(1 + rng() % 5);
      Tensor t = random_tensor(s, rng, 1e6);
      t[0] = -0.0;
      f.arrays.emplace("arr" + std::to_string(a), t);
    }
    const std::string bytes = encode_arrays(f);
    EXPECT_EQ(bytes, encode_arrays(f));
    ArrayFile g = decode_arrays(bytes);
    EXPECT_EQ(g.meta, f.meta);
    ASSERT_EQ(g.arrays.size(), f.arrays.size());
    for (const auto& [name, t] : f.arrays) {
      const Tensor& u = g.arrays.at(name);
      ASSERT_EQ(u.shape(), t.shape());
      for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(std::bit_cast<std::uint64_t>(u[i]), std::bit_cast<std::uint64_t>(t[i]));
    }
  }
}

TEST(Container, PayloadIsLittleEndianFloat64) {
  ArrayFile f;
  f.arrays.emplace("one", Tensor({1}, 1.0));
  const std::string bytes = encode_arrays(f);
  // 1.0 = 0x3FF0000000000000, low byte first.
  const std::string tail = bytes.substr(bytes.size() - 8);
  EXPECT_EQ(static_cast<unsigned char>(tail[7]), 0x3F);
  EXPECT_EQ(static_cast<unsigned char>(tail[6]), 0xF0);
  EXPECT_EQ(bytes.substr(0, 8), "NILMARR1");
  EXPECT_THROW(decode_arrays("garbage"), ConfigError);
}

}  // namespace
}  // namespace nilm
