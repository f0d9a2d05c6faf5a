// SPDX-License-Identifier: Apache-2.0
#pragma once

// The disaggregation network. Shapes below use B = batch, n = window length,
// d = model width.
//
//   x [B,1,n] -> stationarize -> (x~, stats [B,2])
//   x~ -> embedding block -> features [B, d - pe, n]
//   covariates -> positional encoding -> [B, pe, n]
//   concat on channels, transpose, prepend TokenStats(stats) -> [B, n+1, d]
//   transformer layers -> final norm
//   position 0 -> ProjStats -> output stats [B,2]
//   positions 1..n -> transpose -> head -> a~ [B,1,n]
//   a = a~ * Proj(sigma) + Proj(mu)

#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "nilmformer/layers.hpp"
#include "nilmformer/timerpe.hpp"

namespace nilm {

enum class Stationarization { none, revin, token_only, proj_only, full };
enum class PositionalEncoding { none, fixed, learnable, timerpe };
enum class PEMode { concat, add };
enum class Embedding { linear, resblock, dilated };

struct NILMFormerConfig {
  std::size_t d_model = 96;
  std::size_t n_layers = 3;
  std::size_t n_heads = 8;
  std::size_t pffn_ratio = 4;
  double dropout = 0.2;

  std::size_t n_resunits = 4;
  std::size_t kernel = 3;
  std::vector<std::size_t> dilations{2, 4, 8, 16};

  std::size_t head_kernel = 3;
  // 0: a single conv d -> 1. >0: conv d -> head_filters, GELU, pointwise conv -> 1.
  std::size_t head_filters = 0;
  bool final_norm = false;  // LayerNorm on the transformer output

  double pe_ratio = 0.25;
  double eps_norm = 1e-8;

  Stationarization stationarization = Stationarization::full;
  PositionalEncoding pe = PositionalEncoding::timerpe;
  PEMode pe_mode = PEMode::concat;
  Embedding embedding = Embedding::dilated;
  std::size_t learnable_pe_length = 512;  // longest window a learnable PE supports

  // Channels taken by the positional encoding / by the embedding block.
  std::size_t pe_width() const;
  std::size_t feature_width() const;
  bool uses_token() const;
  void validate() const;
};

// Named ablation variants applied on top of a base config: full, none, revin,
// token-only, proj-only, nope, pe-fixed, pe-learnable, pe-add, embed-linear,
// embed-resblock, pe-ratio-1/8, pe-ratio-1/4, pe-ratio-1/2.
NILMFormerConfig apply_variant(NILMFormerConfig base, const std::string& variant);
std::vector<std::string> variant_names();

void to_json(nlohmann::json& j, const NILMFormerConfig& c);
void from_json(const nlohmann::json& j, NILMFormerConfig& c);

// Per-window z-normalization. stats[b] = (mu, sigma) with the population std;
// normalized = (x - mu) / max(sigma, eps).
struct Stationarized {
  Tensor normalized;  // same shape as input
  Tensor stats;       // [B, 2]
};
Stationarized stationarize(const Tensor& windows, double eps);
Tensor destationarize(const Tensor& normalized, const Tensor& stats, double eps);

// Fixed transformer-style sinusoid over positions: [width x n].
Tensor position_sinusoid(std::size_t width, std::size_t n);

struct ForwardOptions {
  bool train = false;
  std::mt19937_64* rng = nullptr;  // required when train and dropout > 0
  std::vector<Tensor>* attention = nullptr;  // receives [B*H, L, L] per layer when set
};

class NILMFormer {
 public:
  NILMFormer(const NILMFormerConfig& config, std::uint64_t seed);
  NILMFormer(const NILMFormer&) = delete;
  NILMFormer& operator=(const NILMFormer&) = delete;

  // windows [B,1,n] in scaled units, one covariate window per row.
  Var forward(Tape& tape, const Tensor& windows, std::span<const CovariateWindow> covariates,
              const ForwardOptions& options = {}) const;

  // Eval-mode forward in chunks of `chunk` rows.
  Tensor predict(const Tensor& windows, std::span<const CovariateWindow> covariates, std::size_t chunk = 128) const;

  const NILMFormerConfig& config() const { return config_; }
  ParameterStore& store() { return *store_; }
  const ParameterStore& store() const { return *store_; }
  std::size_t parameter_count() const { return store_->parameter_count(); }

  // Sub-blocks, exposed for tests and gradient checks.
  Var embed(Tape& tape, Var x, bool train) const;
  Var encode_positions(Tape& tape, std::span<const CovariateWindow> covariates, std::size_t n) const;
  Var transformer_layer(Tape& tape, std::size_t layer, Var x, const ForwardOptions& options) const;
  Var attention(Tape& tape, std::size_t layer, Var x, std::vector<Tensor>* sink) const;

 private:
  struct ResUnit {
    Conv1d conv;
    BatchNorm1d norm;
    bool residual_broadcast = false;  // input has one channel
  };
  struct Layer {
    LayerNorm norm1, norm2;
    Linear q, k, v, o;
    Linear ff1, ff2;
  };

  NILMFormerConfig config_;
  std::unique_ptr<ParameterStore> store_;
  Conv1d linear_embed_;
  std::vector<ResUnit> resunits_;
  TimeRPE timerpe_;
  Parameter* learnable_pe_ = nullptr;
  Linear token_stats_;
  std::vector<Layer> layers_;
  LayerNorm final_norm_;
  Conv1d head1_, head2_;
  Linear proj_stats_;
};

std::size_t count_parameters(const NILMFormerConfig& config);

struct CheckpointInfo {
  std::string appliance;
  double tau_max = 1.0;
  Seconds delta_t{0};
  std::size_t window = 0;
};

struct Checkpoint {
  std::unique_ptr<NILMFormer> model;
  CheckpointInfo info;
};

void save_checkpoint(const std::filesystem::path& path, const NILMFormer& model, const CheckpointInfo& info);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace nilm
