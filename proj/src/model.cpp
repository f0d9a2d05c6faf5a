// SPDX-License-Identifier: Apache-2.0
#include "nilmformer/model.hpp"

#include <algorithm>
#include <cmath>

#include "nilmformer/container.hpp"
#include "nilmformer/error.hpp"

namespace nilm {

namespace {

template <typename E>
struct EnumName {
  E value;
  const char* name;
};

constexpr EnumName<Stationarization> kStationarization[] = {{Stationarization::none, "none"},
                                                            {Stationarization::revin, "revin"},
                                                            {Stationarization::token_only, "token-only"},
                                                            {Stationarization::proj_only, "proj-only"},
                                                            {Stationarization::full, "full"}};
constexpr EnumName<PositionalEncoding> kPositional[] = {{PositionalEncoding::none, "none"},
                                                        {PositionalEncoding::fixed, "fixed"},
                                                        {PositionalEncoding::learnable, "learnable"},
                                                        {PositionalEncoding::timerpe, "timerpe"}};
constexpr EnumName<PEMode> kPEMode[] = {{PEMode::concat, "concat"}, {PEMode::add, "add"}};
constexpr EnumName<Embedding> kEmbedding[] = {
    {Embedding::linear, "linear"}, {Embedding::resblock, "resblock"}, {Embedding::dilated, "dilated"}};

template <typename E, std::size_t N>
const char* name_of(const EnumName<E> (&table)[N], E v) {
  for (const auto& e : table)
    if (e.value == v) return e.name;
  return "?";
}

template <typename E, std::size_t N>
E parse_enum(const EnumName<E> (&table)[N], const std::string& s, const char* what) {
  for (const auto& e : table)
    if (s == e.name) return e.value;
  throw ConfigError(std::string("unknown ") + what + " '" + s + "'");
}

}  // namespace

// ---- config ---------------------------------------------------------------

std::size_t NILMFormerConfig::pe_width() const {
  if (pe == PositionalEncoding::none) return 0;
  if (pe_mode == PEMode::add) return d_model;
  return static_cast<std::size_t>(std::floor(static_cast<double>(d_model) * pe_ratio));
}

std::size_t NILMFormerConfig::feature_width() const {
  return pe_mode == PEMode::add ? d_model : d_model - pe_width();
}

bool NILMFormerConfig::uses_token() const {
  return stationarization == Stationarization::full || stationarization == Stationarization::token_only;
}

void NILMFormerConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
    throw ConfigError("d_model must be a positive multiple of n_heads");
  if (d_model % 4 != 0) throw ConfigError("d_model must be divisible by 4");
  if (pffn_ratio == 0) throw ConfigError("pffn_ratio must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (kernel % 2 == 0 || head_kernel % 2 == 0) throw ConfigError("kernel sizes must be odd");
  if (!(eps_norm > 0.0)) throw ConfigError("eps_norm must be positive");
  if (embedding != Embedding::linear) {
    if (n_resunits == 0) throw ConfigError("n_resunits must be positive");
    if (embedding == Embedding::dilated && dilations.size() != n_resunits)
      throw ConfigError("dilations must list one rate per residual unit");
    for (auto d : dilations)
      if (d == 0) throw ConfigError("dilation rates must be positive");
  }
  if (pe != PositionalEncoding::none && pe_mode == PEMode::concat) {
    if (!(pe_ratio > 0.0 && pe_ratio < 1.0)) throw ConfigError("pe_ratio must lie in (0, 1)");
    if (pe_width() == 0) throw ConfigError("pe_ratio leaves no positional-encoding channels");
  }
  if (pe == PositionalEncoding::learnable && learnable_pe_length == 0)
    throw ConfigError("learnable_pe_length must be positive");
}

NILMFormerConfig apply_variant(NILMFormerConfig c, const std::string& variant) {
  std::size_t pos = 0;
  while (pos <= variant.size()) {
    const auto next = std::min(variant.find('+', pos), variant.size());
    const std::string v = variant.substr(pos, next - pos);
    pos = next + 1;
    if (v == "full") {
    } else if (v == "none") {
      c.stationarization = Stationarization::none;
    } else if (v == "revin") {
      c.stationarization = Stationarization::revin;
    } else if (v == "token-only") {
      c.stationarization = Stationarization::token_only;
    } else if (v == "proj-only") {
      c.stationarization = Stationarization::proj_only;
    } else if (v == "nope") {
      c.pe = PositionalEncoding::none;
    } else if (v == "pe-fixed") {
      c.pe = PositionalEncoding::fixed;
    } else if (v == "pe-learnable") {
      c.pe = PositionalEncoding::learnable;
    } else if (v == "pe-add") {
      c.pe_mode = PEMode::add;
    } else if (v == "embed-linear") {
      c.embedding = Embedding::linear;
    } else if (v == "embed-resblock") {
      c.embedding = Embedding::resblock;
    } else if (v == "pe-ratio-1/8") {
      c.pe_ratio = 0.125;
    } else if (v == "pe-ratio-1/4") {
      c.pe_ratio = 0.25;
    } else if (v == "pe-ratio-1/2") {
      c.pe_ratio = 0.5;
    } else {
      throw ConfigError("unknown variant '" + v + "'");
    }
  }
  c.validate();
  return c;
}

std::vector<std::string> variant_names() {
  return {"full",   "none",     "revin",        "token-only",   "proj-only",     "nope",         "pe-fixed",
          "pe-learnable", "pe-add", "embed-linear", "embed-resblock", "pe-ratio-1/8", "pe-ratio-1/4", "pe-ratio-1/2"};
}

void to_json(nlohmann::json& j, const NILMFormerConfig& c) {
  j = {{"d_model", c.d_model},
       {"n_layers", c.n_layers},
       {"n_heads", c.n_heads},
       {"pffn_ratio", c.pffn_ratio},
       {"dropout", c.dropout},
       {"n_resunits", c.n_resunits},
       {"kernel", c.kernel},
       {"dilations", c.dilations},
       {"head_kernel", c.head_kernel},
       {"head_filters", c.head_filters},
       {"final_norm", c.final_norm},
       {"pe_ratio", c.pe_ratio},
       {"eps_norm", c.eps_norm},
       {"stationarization", name_of(kStationarization, c.stationarization)},
       {"pe", name_of(kPositional, c.pe)},
       {"pe_mode", name_of(kPEMode, c.pe_mode)},
       {"embedding", name_of(kEmbedding, c.embedding)},
       {"learnable_pe_length", c.learnable_pe_length}};
}

void from_json(const nlohmann::json& j, NILMFormerConfig& c) {
  if (!j.is_object()) throw ConfigError("model config must be an object");
  const nlohmann::json defaults = NILMFormerConfig{};
  for (const auto& [key, _] : j.items())
    if (!defaults.contains(key)) throw ConfigError("unknown model config key '" + key + "'");
  nlohmann::json merged = defaults;
  merged.update(j);
  try {
    c.d_model = merged.at("d_model").get<std::size_t>();
    c.n_layers = merged.at("n_layers").get<std::size_t>();
    c.n_heads = merged.at("n_heads").get<std::size_t>();
    c.pffn_ratio = merged.at("pffn_ratio").get<std::size_t>();
    c.dropout = merged.at("dropout").get<double>();
    c.n_resunits = merged.at("n_resunits").get<std::size_t>();
    c.kernel = merged.at("kernel").get<std::size_t>();
    c.dilations = merged.at("dilations").get<std::vector<std::size_t>>();
    c.head_kernel = merged.at("head_kernel").get<std::size_t>();
    c.head_filters = merged.at("head_filters").get<std::size_t>();
    c.final_norm = merged.at("final_norm").get<bool>();
    c.pe_ratio = merged.at("pe_ratio").get<double>();
    c.eps_norm = merged.at("eps_norm").get<double>();
    c.learnable_pe_length = merged.at("learnable_pe_length").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.stationarization = parse_enum(kStationarization, merged.at("stationarization").get<std::string>(),
                                  "stationarization");
  c.pe = parse_enum(kPositional, merged.at("pe").get<std::string>(), "positional encoding");
  c.pe_mode = parse_enum(kPEMode, merged.at("pe_mode").get<std::string>(), "pe_mode");
  c.embedding = parse_enum(kEmbedding, merged.at("embedding").get<std::string>(), "embedding");
}

// ---- stationarization -----------------------------------------------------

Stationarized stationarize(const Tensor& windows, double eps) {
  NILM_EXPECT(windows.rank() >= 2, "stationarize: expected [B, ..., n]");
  const std::size_t B = windows.dim(0);
  const std::size_t n = windows.size() / B;
  Stationarized out{Tensor(windows.shape()), Tensor({B, 2})};
  const double* x = windows.data();
  double* y = out.normalized.data();
  for (std::size_t b = 0; b < B; ++b) {
    const double* row = x + b * n;
    // Shifted accumulation: a constant window gives mu equal to its value exactly.
    const double ref = row[0];
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += row[i] - ref;
    const double mu = ref + s / static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) ss += (row[i] - mu) * (row[i] - mu);
    const double sigma = std::sqrt(ss / static_cast<double>(n));
    const double denom = std::max(sigma, eps);
    for (std::size_t i = 0; i < n; ++i) y[b * n + i] = (row[i] - mu) / denom;
    out.stats[2 * b] = mu;
    out.stats[2 * b + 1] = sigma;
  }
  return out;
}

Tensor destationarize(const Tensor& normalized, const Tensor& stats, double eps) {
  const std::size_t B = normalized.dim(0);
  NILM_EXPECT(stats.shape() == (Shape{B, 2}), "destationarize: stats must be [B, 2]");
  const std::size_t n = normalized.size() / B;
  Tensor out(normalized.shape());
  for (std::size_t b = 0; b < B; ++b) {
    const double denom = std::max(stats[2 * b + 1], eps);
    for (std::size_t i = 0; i < n; ++i) out[b * n + i] = normalized[b * n + i] * denom + stats[2 * b];
  }
  return out;
}

Tensor position_sinusoid(std::size_t width, std::size_t n) {
  Tensor pe({width, n});
  for (std::size_t r = 0; r < width; ++r) {
    const double freq = std::pow(10000.0, -static_cast<double>(r - r % 2) / static_cast<double>(width));
    for (std::size_t i = 0; i < n; ++i) {
      const double a = static_cast<double>(i) * freq;
      pe[r * n + i] = r % 2 == 0 ? std::sin(a) : std::cos(a);
    }
  }
  return pe;
}

// ---- model ----------------------------------------------------------------

NILMFormer::NILMFormer(const NILMFormerConfig& config, std::uint64_t seed)
    : config_(config), store_(std::make_unique<ParameterStore>()) {
  config_.validate();
  std::mt19937_64 rng(seed);
  auto& s = *store_;
  const std::size_t d = config_.d_model;
  const std::size_t F = config_.feature_width();
  const std::size_t P = config_.pe_width();

  if (config_.embedding == Embedding::linear) {
    linear_embed_ = Conv1d(s, "embed.linear", 1, F, 1, 1, rng);
  } else {
    for (std::size_t u = 0; u < config_.n_resunits; ++u) {
      const std::size_t dil = config_.embedding == Embedding::dilated ? config_.dilations[u] : 1;
      const std::string name = "embed." + std::to_string(u);
      ResUnit unit;
      unit.conv = Conv1d(s, name + ".conv", u == 0 ? 1 : F, F, config_.kernel, dil, rng);
      unit.norm = BatchNorm1d(s, name + ".bn", F);
      unit.residual_broadcast = u == 0;
      resunits_.push_back(unit);
    }
  }

  if (config_.pe == PositionalEncoding::timerpe) timerpe_ = TimeRPE(s, "pe.timerpe", P, rng);
  if (config_.pe == PositionalEncoding::learnable) {
    Tensor init({P, config_.learnable_pe_length});
    for (auto& v : init.values()) v = 0.02 * standard_normal(rng);
    learnable_pe_ = &s.add("pe.learnable", std::move(init));
  }

  if (config_.stationarization == Stationarization::full || config_.stationarization == Stationarization::token_only ||
      config_.stationarization == Stationarization::proj_only)
    token_stats_ = Linear(s, "token_stats", 2, d, rng);

  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string name = "layer." + std::to_string(l);
    Layer layer;
    layer.norm1 = LayerNorm(s, name + ".norm1", d);
    layer.q = Linear(s, name + ".attn.q", d, d, rng);
    layer.k = Linear(s, name + ".attn.k", d, d, rng);
    layer.v = Linear(s, name + ".attn.v", d, d, rng);
    layer.o = Linear(s, name + ".attn.o", d, d, rng);
    layer.norm2 = LayerNorm(s, name + ".norm2", d);
    layer.ff1 = Linear(s, name + ".ff1", d, config_.pffn_ratio * d, rng);
    layer.ff2 = Linear(s, name + ".ff2", config_.pffn_ratio * d, d, rng);
    layers_.push_back(layer);
  }
  if (config_.final_norm) final_norm_ = LayerNorm(s, "final_norm", d);

  if (config_.head_filters == 0) {
    head1_ = Conv1d(s, "head.conv", d, 1, config_.head_kernel, 1, rng);
  } else {
    head1_ = Conv1d(s, "head.conv1", d, config_.head_filters, config_.head_kernel, 1, rng);
    head2_ = Conv1d(s, "head.conv2", config_.head_filters, 1, 1, 1, rng);
  }

  if (config_.stationarization == Stationarization::full || config_.stationarization == Stationarization::proj_only)
    proj_stats_ = Linear(s, "proj_stats", d, 2, rng);
}

Var NILMFormer::embed(Tape& tape, Var x, bool train) const {
  if (config_.embedding == Embedding::linear) return linear_embed_(tape, x);
  Var h = x;
  for (const auto& unit : resunits_) {
    Var y = unit.norm(tape, ops::gelu(unit.conv(tape, h)), train);
    h = ops::add(y, unit.residual_broadcast ? ops::expand(h, 1, config_.feature_width()) : h);
  }
  return h;
}

Var NILMFormer::encode_positions(Tape& tape, std::span<const CovariateWindow> covariates, std::size_t n) const {
  const std::size_t B = covariates.size();
  const std::size_t P = config_.pe_width();
  switch (config_.pe) {
    case PositionalEncoding::timerpe:
      return timerpe_(tape, tape.constant(sinusoidal_basis(covariates)));
    case PositionalEncoding::fixed: {
      const Tensor one = position_sinusoid(P, n);
      Tensor all({B, P, n});
      for (std::size_t b = 0; b < B; ++b) std::copy(one.data(), one.data() + one.size(), all.data() + b * one.size());
      return tape.constant(std::move(all));
    }
    case PositionalEncoding::learnable: {
      if (n > config_.learnable_pe_length)
        throw ConfigError("window length exceeds learnable_pe_length (" + std::to_string(config_.learnable_pe_length) +
                          ")");
      Var pe = ops::slice(tape.parameter(*learnable_pe_), 1, 0, n);
      return ops::expand(ops::reshape(pe, {1, P, n}), 0, B);
    }
    case PositionalEncoding::none:
      break;
  }
  throw ContractError("encode_positions: model has no positional encoding");
}

Var NILMFormer::attention(Tape& tape, std::size_t layer, Var x, std::vector<Tensor>* sink) const {
  const auto& L = layers_.at(layer);
  NILM_EXPECT(x.shape().size() == 3 && x.shape()[1] >= 2, "attention: sequence length must be at least 2");
  const std::size_t H = config_.n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(config_.d_model / H));
  Tensor weights;
  Var out = ops::multi_head_attention(L.q(tape, x), L.k(tape, x), L.v(tape, x), H, scale, true,
                                      sink ? &weights : nullptr);
  if (sink) sink->push_back(std::move(weights));
  return L.o(tape, out);
}

Var NILMFormer::transformer_layer(Tape& tape, std::size_t layer, Var x, const ForwardOptions& options) const {
  const auto& L = layers_.at(layer);
  const double p = options.train ? config_.dropout : 0.0;
  if (p > 0.0 && options.rng == nullptr) throw ContractError("training forward with dropout needs an rng");
  auto drop = [&](Var y) { return p > 0.0 ? ops::dropout(y, p, true, *options.rng) : y; };
  Var h = ops::add(x, drop(attention(tape, layer, L.norm1(tape, x), options.attention)));
  Var f = L.ff2(tape, ops::gelu(L.ff1(tape, L.norm2(tape, h))));
  return ops::add(h, drop(f));
}

Var NILMFormer::forward(Tape& tape, const Tensor& windows, std::span<const CovariateWindow> covariates,
                        const ForwardOptions& options) const {
  NILM_EXPECT(windows.rank() == 3 && windows.dim(1) == 1, "forward: windows must be [B, 1, n]");
  const std::size_t B = windows.dim(0);
  const std::size_t n = windows.dim(2);
  const std::size_t d = config_.d_model;
  if (config_.pe == PositionalEncoding::timerpe || !covariates.empty()) {
    NILM_EXPECT(covariates.size() == B, "forward: one covariate window per input window required");
    for (const auto& c : covariates) NILM_EXPECT(c.length() == n, "forward: covariate length differs from window length");
  }
  const auto st = config_.stationarization;

  Tensor stats;
  Var x = tape.constant(windows);
  if (st != Stationarization::none) {
    auto s = stationarize(windows, config_.eps_norm);
    x = tape.constant(std::move(s.normalized));
    stats = std::move(s.stats);
  }

  Var h = embed(tape, x, options.train);
  if (config_.pe != PositionalEncoding::none) {
    Var pe = encode_positions(tape, covariates, n);
    if (config_.pe_mode == PEMode::add) {
      h = ops::add(h, pe);
    } else {
      const Var parts[] = {h, pe};
      h = ops::concat(parts, 1);
    }
  }
  h = ops::transpose12(h);  // [B, n, d]

  Var token;
  if (st == Stationarization::full || st == Stationarization::token_only || st == Stationarization::proj_only)
    token = token_stats_(tape, tape.constant(stats));  // [B, d]
  if (config_.uses_token()) {
    const Var parts[] = {ops::reshape(token, {B, 1, d}), h};
    h = ops::concat(parts, 1);
  }
  for (std::size_t l = 0; l < layers_.size(); ++l) h = transformer_layer(tape, l, h, options);
  if (config_.final_norm) h = final_norm_(tape, h);

  Var z = config_.uses_token() ? ops::slice(h, 1, 1, n) : h;
  Var a = head1_(tape, ops::transpose12(z));
  if (config_.head_filters > 0) a = head2_(tape, ops::gelu(a));

  switch (st) {
    case Stationarization::none:
      return a;
    case Stationarization::revin:
    case Stationarization::token_only:
      return ops::denormalize(a, tape.constant(std::move(stats)));
    case Stationarization::proj_only:
      return ops::denormalize(a, proj_stats_(tape, token));
    case Stationarization::full:
      return ops::denormalize(a, proj_stats_(tape, ops::reshape(ops::slice(h, 1, 0, 1), {B, d})));
  }
  return a;
}

Tensor NILMFormer::predict(const Tensor& windows, std::span<const CovariateWindow> covariates,
                           std::size_t chunk) const {
  NILM_EXPECT(windows.rank() == 3 && windows.dim(1) == 1, "predict: windows must be [B, 1, n]");
  NILM_EXPECT(chunk > 0, "predict: chunk must be positive");
  const std::size_t B = windows.dim(0);
  const std::size_t n = windows.dim(2);
  Tensor out(windows.shape());
  for (std::size_t b0 = 0; b0 < B; b0 += chunk) {
    const std::size_t nb = std::min(chunk, B - b0);
    Tensor part({nb, 1, n});
    std::copy(windows.data() + b0 * n, windows.data() + (b0 + nb) * n, part.data());
    const auto cov = covariates.empty() ? covariates : covariates.subspan(b0, nb);
    Tape tape;
    Var y = forward(tape, part, cov);
    std::copy(y.value().data(), y.value().data() + nb * n, out.data() + b0 * n);
  }
  return out;
}

std::size_t count_parameters(const NILMFormerConfig& config) { return NILMFormer(config, 0).parameter_count(); }

// ---- checkpoints ----------------------------------------------------------

void save_checkpoint(const std::filesystem::path& path, const NILMFormer& model, const CheckpointInfo& info) {
  ArrayFile file;
  file.meta = {{"format", "nilmformer-checkpoint"},
               {"config", model.config()},
               {"appliance", info.appliance},
               {"tau_max", info.tau_max},
               {"delta_t_s", info.delta_t.count()},
               {"window", info.window}};
  file.arrays = model.store().state();
  write_arrays(path, file);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const ArrayFile file = read_arrays(path);
  if (file.meta.value("format", "") != "nilmformer-checkpoint")
    throw ConfigError(path.string() + ": not a model checkpoint");
  Checkpoint ck;
  try {
    ck.info.appliance = file.meta.at("appliance").get<std::string>();
    ck.info.tau_max = file.meta.at("tau_max").get<double>();
    ck.info.delta_t = Seconds{file.meta.at("delta_t_s").get<long>()};
    ck.info.window = file.meta.at("window").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": bad checkpoint header: " + e.what());
  }
  ck.model = std::make_unique<NILMFormer>(file.meta.at("config").get<NILMFormerConfig>(), 0);
  ck.model->store().load_state(file.arrays);
  return ck;
}

}  // namespace nilm
