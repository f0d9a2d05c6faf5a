// SPDX-License-Identifier: Apache-2.0
#include "nilmformer/gradsuite.hpp"

#include <cmath>
#include <random>

#include "nilmformer/gradcheck.hpp"
#include "nilmformer/model.hpp"
#include "nilmformer/ops.hpp"
#include "nilmformer/timerpe.hpp"

namespace nilm {
namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = scale * (2.0 * uniform01(rng) - 1.0);
  return t;
}

// Weighted sum so every output element carries a distinct gradient.
Var readout(Tape& tape, Var y, const Tensor& w) { return ops::sum(ops::mul(y, tape.constant(w))); }

class Suite {
 public:
  explicit Suite(std::uint64_t seed) : rng_(seed) {}

  Parameter make(const std::string& name, Shape s, double scale = 1.0) {
    return Parameter(name, random_tensor(std::move(s), rng_, scale));
  }
  Tensor weights(Shape s) { return random_tensor(std::move(s), rng_); }

  void check(const std::string& tier, const std::string& name, double tol, const LossFn& f,
             std::vector<Parameter*> params, double floor_scale = 0.0) {
    const auto r = grad_check(f, params, 1e-5, 0, floor_scale);
    out_.push_back({tier, name, r.max_rel_error, tol, r.checked,
                    r.worst_parameter + "[" + std::to_string(r.worst_index) + "]"});
  }

  std::mt19937_64& rng() { return rng_; }
  std::vector<GradSuiteEntry> take() { return std::move(out_); }

 private:
  std::mt19937_64 rng_;
  std::vector<GradSuiteEntry> out_;
};

void primitives(Suite& s) {
  constexpr double tol = 1e-6;
  const std::string tier = "primitive";
  {
    auto a = s.make("a", {3, 4}), b = s.make("b", {3, 4});
    auto r = s.weights({3, 4});
    s.check(tier, "add/sub/mul/scale", tol, [&](Tape& t) {
      auto x = t.parameter(a), y = t.parameter(b);
      return readout(t, ops::scale(ops::add(ops::mul(x, y), ops::sub(x, y)), 1.5), r);
    }, {&a, &b});
    s.check(tier, "sum/mean", tol, [&](Tape& t) {
      auto x = t.parameter(a);
      return ops::add(ops::mean(ops::mul(x, x)), ops::scale(ops::sum(x), 0.3));
    }, {&a});
  }
  {
    auto x = s.make("x", {3, 4, 5}), w = s.make("w", {6, 5}), b = s.make("b", {6});
    auto r = s.weights({3, 4, 6});
    s.check(tier, "linear", tol, [&](Tape& t) {
      return readout(t, ops::linear(t.parameter(x), t.parameter(w), t.parameter(b)), r);
    }, {&x, &w, &b});
  }
  for (std::size_t dil : {1, 2, 4}) {
    auto x = s.make("x", {2, 3, 9}), w = s.make("w", {4, 3, 3}), b = s.make("b", {4});
    auto r = s.weights({2, 4, 9});
    s.check(tier, "conv1d dilation " + std::to_string(dil), tol, [&](Tape& t) {
      return readout(t, ops::conv1d(t.parameter(x), t.parameter(w), t.parameter(b), dil), r);
    }, {&x, &w, &b});
  }
  {
    auto x = s.make("x", {40}, 3.0);
    auto r = s.weights({40});
    s.check(tier, "gelu", tol, [&](Tape& t) { return readout(t, ops::gelu(t.parameter(x)), r); }, {&x});
  }
  {
    auto x = s.make("x", {4, 7}, 2.0), g = s.make("g", {7}), b = s.make("b", {7});
    auto r = s.weights({4, 7});
    s.check(tier, "layer_norm", tol, [&](Tape& t) {
      return readout(t, ops::layer_norm(t.parameter(x), t.parameter(g), t.parameter(b)), r);
    }, {&x, &g, &b});
  }
  for (bool train : {true, false}) {
    auto x = s.make("x", {3, 2, 5}, 2.0), g = s.make("g", {2}), b = s.make("b", {2});
    Tensor rm({2}, 0.1), rv({2}, 0.7);
    auto r = s.weights({3, 2, 5});
    s.check(tier, train ? "batch_norm train" : "batch_norm eval", tol, [&](Tape& t) {
      return readout(t, ops::batch_norm(t.parameter(x), t.parameter(g), t.parameter(b), {rm, rv}, train), r);
    }, {&x, &g, &b});
  }
  {
    auto x = s.make("x", {2, 4, 4}, 2.0);
    auto r = s.weights({2, 4, 4});
    s.check(tier, "softmax+diag_mask", tol, [&](Tape& t) {
      return readout(t, ops::softmax(ops::diag_mask(t.parameter(x))), r);
    }, {&x});
  }
  for (int mode = 0; mode < 4; ++mode) {
    const bool ta = mode & 1, tb = mode & 2;
    auto a = s.make("a", ta ? Shape{2, 5, 3} : Shape{2, 3, 5});
    auto b = s.make("b", tb ? Shape{2, 4, 5} : Shape{2, 5, 4});
    auto r = s.weights({2, 3, 4});
    s.check(tier, std::string("bmm ") + (ta ? "T" : "N") + (tb ? "T" : "N"), tol, [&](Tape& t) {
      return readout(t, ops::bmm(t.parameter(a), t.parameter(b), ta, tb), r);
    }, {&a, &b});
  }
  {
    auto q = s.make("q", {2, 5, 6}), k = s.make("k", {2, 5, 6}), v = s.make("v", {2, 5, 6});
    auto r = s.weights({2, 5, 6});
    s.check(tier, "multi_head_attention", tol, [&](Tape& t) {
      return readout(t, ops::multi_head_attention(t.parameter(q), t.parameter(k), t.parameter(v), 2, 0.7), r);
    }, {&q, &k, &v});
  }
  {
    auto x = s.make("x", {2, 3, 8}), y = s.make("y", {2, 1, 8}), st = s.make("s", {2, 2});
    auto r1 = s.weights({2, 8, 3}), r2 = s.weights({2, 4, 8}), r3 = s.weights({2, 3, 8});
    auto r4 = s.weights({2, 1, 8}), r5 = s.weights({6, 3, 4}), r6 = s.weights({2, 3, 12});
    auto q = s.make("q", {2, 3, 12});
    s.check(tier, "concat/slice/transpose/expand/reshape/denormalize", tol, [&](Tape& t) {
      auto xv = t.parameter(x), yv = t.parameter(y);
      const Var parts[] = {yv, xv};
      auto c = ops::concat(parts, 1);
      auto l = readout(t, ops::slice(ops::transpose12(c), 2, 1, 3), r1);
      l = ops::add(l, readout(t, ops::reshape(c, {2, 4, 8}), r2));
      l = ops::add(l, readout(t, ops::mul(ops::expand(yv, 1, 3), xv), r3));
      return ops::add(l, readout(t, ops::denormalize(yv, t.parameter(st)), r4));
    }, {&x, &y, &st});
    s.check(tier, "split_heads/merge_heads", tol, [&](Tape& t) {
      auto h = ops::split_heads(t.parameter(q), 3);
      return ops::add(readout(t, h, r5), readout(t, ops::merge_heads(ops::scale(h, 2.0), 3), r6));
    }, {&q});
  }
  {
    auto x = s.make("x", {50});
    auto r = s.weights({50});
    s.check(tier, "dropout (fixed mask)", tol, [&](Tape& t) {
      std::mt19937_64 mask(17);
      return readout(t, ops::dropout(t.parameter(x), 0.3, true, mask), r);
    }, {&x});
  }
  {
    auto p = s.make("p", {3, 1, 6});
    auto y = s.weights({3, 1, 6});
    s.check(tier, "mse_loss", tol, [&](Tape& t) { return ops::mse_loss(t.parameter(p), t.constant(y)); }, {&p});
  }
}

void timerpe(Suite& s) {
  ParameterStore store;
  TimeRPE pe(store, "pe", 6, s.rng());
  const std::vector<CovariateWindow> batch{
      covariates_for_grid(parse_utc("2024-01-05T03:15:00Z"), Seconds{900}, 10),
      covariates_for_grid(parse_utc("2024-07-21T22:45:00Z"), Seconds{900}, 10)};
  const Tensor basis = sinusoidal_basis(batch);
  auto r = s.weights({2, 6, 10});
  s.check("timerpe", "projection", 1e-6, [&](Tape& t) {
    Var y = pe(t, t.constant(basis));
    return readout(t, ops::mul(y, y), r);
  }, store.parameters());
}

// Relative-error floor for the composite checks, as a fraction of the largest
// gradient; see grad_check.
constexpr double kLayerFloor = 1e-6;

NILMFormerConfig small_config() {
  NILMFormerConfig c;
  c.d_model = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.dropout = 0.0;
  return c;
}

void dmsa(Suite& s) {
  NILMFormer model(small_config(), 11);
  auto x = s.make("x", {2, 9, 16});
  auto r = s.weights({2, 9, 16});
  // Only the layer's own parameters and its input.
  std::vector<Parameter*> params{&x};
  for (auto* p : model.store().parameters())
    if (p->name.rfind("layer.0.", 0) == 0) params.push_back(p);
  s.check("dmsa", "attention", 1e-4, [&](Tape& t) {
    return readout(t, model.attention(t, 0, t.parameter(x), nullptr), r);
  }, params, kLayerFloor);
  s.check("dmsa", "transformer layer", 1e-4, [&](Tape& t) {
    return readout(t, model.transformer_layer(t, 0, t.parameter(x), {}), r);
  }, params, kLayerFloor);
}

void embedding(Suite& s) {
  NILMFormer model(small_config(), 12);
  auto x = s.make("x", {2, 1, 40});
  const std::size_t F = model.config().feature_width();
  auto r = s.weights({2, F, 40});
  std::vector<Parameter*> params{&x};
  for (auto* p : model.store().parameters())
    if (p->name.rfind("embed.", 0) == 0) params.push_back(p);
  for (bool train : {true, false})
    s.check("embedding", train ? "dilated resunits train" : "dilated resunits eval", 1e-4,
            [&](Tape& t) { return readout(t, model.embed(t, t.parameter(x), train), r); }, params, kLayerFloor);
}

void full_model(Suite& s) {
  NILMFormer model(small_config(), 13);
  const std::size_t B = 3, n = 32;
  Tensor windows({B, 1, n});
  for (auto& v : windows.values()) v = uniform01(s.rng());
  std::vector<CovariateWindow> covs;
  for (std::size_t b = 0; b < B; ++b)
    covs.push_back(covariates_for_grid(parse_utc("2024-03-01T00:00:00Z") + Seconds{86400 * long(b)}, Seconds{900}, n));
  auto r = s.weights({B, 1, n});
  const auto params = model.store().parameters();
  s.check("model", "small config end to end", 1e-3, [&](Tape& t) {
    Var y = model.forward(t, windows, covs, {.train = true});
    return readout(t, y, r);
  }, params, kLayerFloor);
}

}  // namespace

std::vector<GradSuiteEntry> run_gradient_suite(std::uint64_t seed) {
  Suite s(seed);
  primitives(s);
  timerpe(s);
  dmsa(s);
  embedding(s);
  full_model(s);
  return s.take();
}

}  // namespace nilm
