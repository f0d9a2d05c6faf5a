// SPDX-License-Identifier: Apache-2.0
#include "nilmformer/layers.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "nilmformer/error.hpp"

namespace nilm {

double standard_normal(std::mt19937_64& rng) {
  // Box-Muller on portable uniforms.
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

bool ParameterStore::has(const std::string& name) const {
  return std::any_of(params_.begin(), params_.end(), [&](const auto& p) { return p.name == name; }) ||
         std::any_of(buffers_.begin(), buffers_.end(), [&](const auto& b) { return b.name == name; });
}

Parameter& ParameterStore::add(std::string name, Tensor init) {
  NILM_EXPECT(!has(name), "duplicate parameter name: " + name);
  return params_.emplace_back(std::move(name), std::move(init));
}

Tensor& ParameterStore::add_buffer(std::string name, Tensor init) {
  NILM_EXPECT(!has(name), "duplicate buffer name: " + name);
  return buffers_.emplace_back(Buffer{std::move(name), std::move(init)}).value;
}

std::vector<Parameter*> ParameterStore::parameters() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(&p);
  return out;
}

std::vector<const Parameter*> ParameterStore::parameters() const {
  std::vector<const Parameter*> out;
  for (const auto& p : params_) out.push_back(&p);
  return out;
}

std::size_t ParameterStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

std::map<std::string, Tensor> ParameterStore::state() const {
  std::map<std::string, Tensor> out;
  for (const auto& p : params_) out.emplace(p.name, p.value);
  for (const auto& b : buffers_) out.emplace(b.name, b.value);
  return out;
}

void ParameterStore::load_state(const std::map<std::string, Tensor>& state) {
  auto fetch = [&](const std::string& name, Tensor& dst) {
    auto it = state.find(name);
    if (it == state.end()) throw ConfigError("state is missing array '" + name + "'");
    if (it->second.shape() != dst.shape())
      throw ConfigError("array '" + name + "' has shape " + to_string(it->second.shape()) + ", expected " +
                        to_string(dst.shape()));
    dst = it->second;
  };
  for (auto& p : params_) fetch(p.name, p.value);
  for (auto& b : buffers_) fetch(b.name, b.value);
  if (state.size() != params_.size() + buffers_.size()) throw ConfigError("state has unexpected extra arrays");
}

Tensor fan_in_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.values()) v = (2.0 * uniform01(rng) - 1.0) * bound;
  return t;
}

Linear::Linear(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out,
               std::mt19937_64& rng)
    : weight_(&store.add(name + ".weight", fan_in_uniform({out, in}, in, rng))),
      bias_(&store.add(name + ".bias", fan_in_uniform({out}, in, rng))) {}

Var Linear::operator()(Tape& tape, Var x) const {
  return ops::linear(x, tape.parameter(*weight_), tape.parameter(*bias_));
}

Conv1d::Conv1d(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out,
               std::size_t kernel, std::size_t dilation, std::mt19937_64& rng)
    : weight_(&store.add(name + ".weight", fan_in_uniform({out, in, kernel}, in * kernel, rng))),
      bias_(&store.add(name + ".bias", fan_in_uniform({out}, in * kernel, rng))),
      dilation_(dilation) {
  if (kernel % 2 == 0) throw ConfigError(name + ": kernel size must be odd");
}

Var Conv1d::operator()(Tape& tape, Var x) const {
  return ops::conv1d(x, tape.parameter(*weight_), tape.parameter(*bias_), dilation_);
}

LayerNorm::LayerNorm(ParameterStore& store, const std::string& name, std::size_t features, double eps)
    : gamma_(&store.add(name + ".weight", Tensor({features}, 1.0))),
      beta_(&store.add(name + ".bias", Tensor({features}, 0.0))),
      eps_(eps) {}

Var LayerNorm::operator()(Tape& tape, Var x) const {
  return ops::layer_norm(x, tape.parameter(*gamma_), tape.parameter(*beta_), eps_);
}

BatchNorm1d::BatchNorm1d(ParameterStore& store, const std::string& name, std::size_t channels, double momentum,
                         double eps)
    : gamma_(&store.add(name + ".weight", Tensor({channels}, 1.0))),
      beta_(&store.add(name + ".bias", Tensor({channels}, 0.0))),
      running_mean_(&store.add_buffer(name + ".running_mean", Tensor({channels}, 0.0))),
      running_var_(&store.add_buffer(name + ".running_var", Tensor({channels}, 1.0))),
      momentum_(momentum),
      eps_(eps) {}

Var BatchNorm1d::operator()(Tape& tape, Var x, bool train) const {
  return ops::batch_norm(x, tape.parameter(*gamma_), tape.parameter(*beta_),
                         {*running_mean_, *running_var_, momentum_, eps_}, train);
}

}  // namespace nilm
