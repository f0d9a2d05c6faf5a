// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <set>

#include "nilmformer/error.hpp"
#include "nilmformer/gradsuite.hpp"
#include "nilmformer/model.hpp"
#include "nilmformer/ops.hpp"

namespace nilm {
namespace {

Tensor random_windows(std::size_t B, std::size_t n, std::mt19937_64& rng) {
  Tensor t({B, 1, n});
  for (auto& v : t.values()) v = uniform01(rng);
  return t;
}

std::vector<CovariateWindow> grid_covariates(std::size_t B, std::size_t n) {
  std::vector<CovariateWindow> out;
  for (std::size_t b = 0; b < B; ++b)
    out.push_back(covariates_for_grid(parse_utc("2024-02-01T00:00:00Z") + Seconds{900 * long(b * n)}, Seconds{900}, n));
  return out;
}

std::vector<double> vals(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

NILMFormerConfig small() {
  NILMFormerConfig c;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  return c;
}

TEST(Stationarize, HandExamples) {
  auto s = stationarize(Tensor({1, 1, 3}, {5, 5, 5}), 1e-8);
  for (double v : s.normalized.values()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(s.stats[0], 5.0);
  EXPECT_EQ(s.stats[1], 0.0);

  auto t = stationarize(Tensor({1, 1, 2}, {1, 3}), 1e-8);
  EXPECT_EQ(t.normalized[0], -1.0);
  EXPECT_EQ(t.normalized[1], 1.0);
  EXPECT_EQ(t.stats[0], 2.0);
  EXPECT_EQ(t.stats[1], 1.0);
}

TEST(Stationarize, MomentsAndRoundTripOnRandomWindows) {
  std::mt19937_64 rng(3);
  const std::size_t B = 1000, n = 96;
  Tensor x({B, 1, n});
  for (std::size_t b = 0; b < B; ++b) {
    const double level = 10.0 * uniform01(rng), spread = 0.01 + 3.0 * uniform01(rng);
    for (std::size_t i = 0; i < n; ++i) x[b * n + i] = level + spread * standard_normal(rng);
  }
  auto s = stationarize(x, 1e-8);
  const Tensor back = destationarize(s.normalized, s.stats, 1e-8);
  for (std::size_t b = 0; b < B; ++b) {
    long double m = 0, v = 0;
    for (std::size_t i = 0; i < n; ++i) m += s.normalized[b * n + i];
    m /= n;
    for (std::size_t i = 0; i < n; ++i) v += (s.normalized[b * n + i] - m) * (s.normalized[b * n + i] - m);
    EXPECT_LE(std::abs(double(m)), 1e-9);
    EXPECT_NEAR(std::sqrt(double(v / n)), 1.0, 1e-9);
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(back[b * n + i], x[b * n + i], 1e-9);
  }
}

TEST(Stationarize, StatsShapeMismatchIsContractViolation) {
  EXPECT_THROW(destationarize(Tensor({2, 1, 3}), Tensor({3, 2}), 1e-8), ContractError);
}

TEST(Config, DefaultParameterCountAndWindowInvariance) {
  const NILMFormerConfig c;
  EXPECT_EQ(c.pe_width(), 24u);
  const std::size_t count = count_parameters(c);
  // Hand tally: embedding (1->72 then 3x 72->72, k=3, each with BatchNorm),
  // TimeRPE 8->24, TokenStats 2->96, 3 layers of 2 LayerNorms + q/k/v/o + PFFN,
  // head conv 96->1 k=3, ProjStats 96->2.
  const std::size_t embed = (72 * 3 + 72 + 144) + 3 * (72 * 72 * 3 + 72 + 144);
  const std::size_t layer = 2 * 192 + 4 * (96 * 96 + 96) + (96 * 384 + 384) + (384 * 96 + 96);
  EXPECT_EQ(count, embed + (8 * 24 + 24) + (2 * 96 + 96) + 3 * layer + (96 * 3 + 1) + (96 * 2 + 2));
  EXPECT_EQ(count, 384243u);
  EXPECT_LE(std::abs(double(count) - 385000.0) / 385000.0, 0.05);
  std::mt19937_64 rng(1);
  NILMFormer m(c, 0);
  for (std::size_t w : {128u, 256u, 512u}) {
    Tensor x = random_windows(1, w, rng);
    Tape t;
    EXPECT_EQ(m.forward(t, x, grid_covariates(1, w)).shape(), (Shape{1, 1, w}));
    EXPECT_EQ(m.parameter_count(), count);
  }
  NILMFormerConfig wide = c;
  wide.d_model = 256;
  EXPECT_GT(count_parameters(wide), count);
}

TEST(Config, ValidationAndVariants) {
  NILMFormerConfig c;
  c.n_heads = 7;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(apply_variant(NILMFormerConfig{}, "bogus"), ConfigError);
  for (const auto& v : variant_names()) {
    const auto cfg = apply_variant(small(), v);
    NILMFormer m(cfg, 1);
    std::mt19937_64 rng(2);
    Tape t;
    EXPECT_EQ(m.forward(t, random_windows(2, 24, rng), grid_covariates(2, 24)).shape(), (Shape{2, 1, 24})) << v;
  }
  EXPECT_EQ(apply_variant(NILMFormerConfig{}, "nope").pe, PositionalEncoding::none);
  EXPECT_EQ(apply_variant(NILMFormerConfig{}, "revin").stationarization, Stationarization::revin);
  EXPECT_EQ(apply_variant(NILMFormerConfig{}, "pe-ratio-1/2").pe_width(), 48u);
}

TEST(Config, JsonRoundTripAndUnknownKeys) {
  NILMFormerConfig c = apply_variant(small(), "pe-add+embed-linear");
  nlohmann::json j = c;
  const auto back = j.get<NILMFormerConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  EXPECT_THROW(nlohmann::json({{"d_modle", 3}}).get<NILMFormerConfig>(), ConfigError);
  EXPECT_EQ(nlohmann::json({{"n_layers", 5}}).get<NILMFormerConfig>().d_model, 96u);
}

TEST(Attention, FusedMatchesComposite) {
  std::mt19937_64 rng(5);
  const std::size_t B = 3, L = 7, H = 4, dh = 3;
  auto rnd = [&] {
    Tensor t({B, L, H * dh});
    for (auto& v : t.values()) v = standard_normal(rng);
    return t;
  };
  const Tensor q = rnd(), k = rnd(), v = rnd();
  Tape t;
  Tensor weights;
  Var fused = ops::multi_head_attention(t.constant(q), t.constant(k), t.constant(v), H, 0.4, true, &weights);
  Var qs = ops::split_heads(t.constant(q), H), ks = ops::split_heads(t.constant(k), H),
      vs = ops::split_heads(t.constant(v), H);
  Var a = ops::softmax(ops::diag_mask(ops::scale(ops::bmm(qs, ks, false, true), 0.4)));
  Var ref = ops::merge_heads(ops::bmm(a, vs), H);
  for (std::size_t i = 0; i < ref.value().size(); ++i) EXPECT_NEAR(fused.value()[i], ref.value()[i], 1e-12);
  for (std::size_t i = 0; i < weights.size(); ++i) EXPECT_NEAR(weights[i], a.value()[i], 1e-12);
}

TEST(Attention, DiagonalZeroRowsSumToOne) {
  std::mt19937_64 rng(6);
  NILMFormer m(small(), 3);
  std::vector<Tensor> sink;
  Tape t;
  m.forward(t, random_windows(4, 20, rng), grid_covariates(4, 20), {.attention = &sink});
  ASSERT_EQ(sink.size(), 2u);
  for (const auto& w : sink) {
    const std::size_t L = w.dim(1);
    EXPECT_EQ(L, 21u);
    for (std::size_t m0 = 0; m0 < w.dim(0); ++m0)
      for (std::size_t i = 0; i < L; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < L; ++j) s += w[(m0 * L + i) * L + j];
        EXPECT_EQ(w[(m0 * L + i) * L + i], 0.0);
        EXPECT_NEAR(s, 1.0, 1e-12);
      }
  }
}

TEST(Attention, LengthTwoAttendsToTheOtherPosition) {
  std::mt19937_64 rng(8);
  Tensor q({1, 2, 4}), k({1, 2, 4}), v({1, 2, 4});
  for (auto* x : {&q, &k, &v})
    for (auto& e : x->values()) e = standard_normal(rng);
  Tape t;
  Tensor w;
  Var o = ops::multi_head_attention(t.constant(q), t.constant(k), t.constant(v), 2, 0.5, true, &w);
  for (std::size_t h = 0; h < 2; ++h) {
    EXPECT_EQ(w[h * 4 + 1], 1.0);
    EXPECT_EQ(w[h * 4 + 2], 1.0);
  }
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_EQ(o.value()[c], v[4 + c]);
    EXPECT_EQ(o.value()[4 + c], v[c]);
  }
}

TEST(Model, ZeroProjStatsGivesZeroOutput) {
  std::mt19937_64 rng(9);
  NILMFormer m(small(), 4);
  for (auto* p : m.store().parameters())
    if (p->name.rfind("proj_stats", 0) == 0) p->value.fill(0.0);
  const Tensor y = m.predict(random_windows(3, 16, rng), grid_covariates(3, 16));
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(Model, EvalIsDeterministic) {
  std::mt19937_64 rng(10);
  NILMFormer a(small(), 42), b(small(), 42), c(small(), 43);
  const Tensor x = random_windows(5, 16, rng);
  const auto cov = grid_covariates(5, 16);
  const Tensor ya = a.predict(x, cov), yb = b.predict(x, cov), yc = c.predict(x, cov), yd = a.predict(x, cov, 2);
  EXPECT_EQ(vals(ya), vals(yb));
  EXPECT_NE(vals(ya), vals(yc));
  // GEMM blocking depends on the row count, so chunking is equal only to round-off.
  for (std::size_t i = 0; i < ya.size(); ++i) EXPECT_NEAR(yd[i], ya[i], 1e-12);
}

TEST(Model, TrainModeNeedsRngForDropout) {
  std::mt19937_64 rng(11);
  NILMFormer m(small(), 1);
  Tape t;
  EXPECT_THROW(m.forward(t, random_windows(2, 8, rng), grid_covariates(2, 8), {.train = true}), ContractError);
}

TEST(Model, CovariateMismatchIsContractViolation) {
  std::mt19937_64 rng(12);
  NILMFormer m(small(), 1);
  Tape t;
  EXPECT_THROW(m.forward(t, random_windows(2, 8, rng), grid_covariates(1, 8)), ContractError);
  EXPECT_THROW(m.forward(t, random_windows(1, 8, rng), grid_covariates(1, 9)), ContractError);
  EXPECT_THROW(m.forward(t, Tensor({1, 2, 8}), grid_covariates(1, 8)), ContractError);
}

TEST(Model, LearnablePeRejectsLongWindows) {
  auto cfg = apply_variant(small(), "pe-learnable");
  cfg.learnable_pe_length = 8;
  NILMFormer m(cfg, 1);
  Tape t;
  EXPECT_THROW(m.forward(t, Tensor({1, 1, 9}), grid_covariates(1, 9)), ConfigError);
}

TEST(Checkpoint, RoundTripReproducesPredictions) {
  std::mt19937_64 rng(13);
  NILMFormer m(apply_variant(small(), "pe-add"), 5);
  const auto path = std::filesystem::temp_directory_path() / "nilm_test_ckpt.nfa";
  save_checkpoint(path, m, {"water-heater", 6000.0, Seconds{900}, 16});
  const auto ck = load_checkpoint(path);
  EXPECT_EQ(ck.info.appliance, "water-heater");
  EXPECT_EQ(ck.info.tau_max, 6000.0);
  EXPECT_EQ(ck.info.delta_t, Seconds{900});
  EXPECT_EQ(ck.info.window, 16u);
  EXPECT_EQ(nlohmann::json(ck.model->config()), nlohmann::json(m.config()));
  const Tensor x = random_windows(3, 16, rng);
  const auto cov = grid_covariates(3, 16);
  EXPECT_EQ(vals(ck.model->predict(x, cov)), vals(m.predict(x, cov)));
  std::filesystem::remove(path);
}

TEST(GradientSuite, EveryTierWithinTolerance) {
  const auto entries = run_gradient_suite();
  std::set<std::string> tiers;
  for (const auto& e : entries) {
    tiers.insert(e.tier);
    EXPECT_TRUE(e.passed()) << e.tier << "/" << e.name << " err " << e.max_rel_error << " at " << e.worst;
  }
  EXPECT_EQ(tiers, (std::set<std::string>{"primitive", "timerpe", "dmsa", "embedding", "model"}));
}

}  // namespace
}  // namespace nilm
