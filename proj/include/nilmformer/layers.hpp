// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "nilmformer/autograd.hpp"
#include "nilmformer/ops.hpp"

namespace nilm {

// Uniform double in [0, 1) from the top 53 bits; identical on every platform,
// unlike std::uniform_real_distribution.
inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }
double standard_normal(std::mt19937_64& rng);

struct Buffer {
  std::string name;
  Tensor value;
};

// Owns the learnable parameters and non-learnable buffers of one model.
// References handed out by add()/add_buffer() stay valid for the store's
// lifetime.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;

  Parameter& add(std::string name, Tensor init);
  Tensor& add_buffer(std::string name, Tensor init);

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  const std::deque<Buffer>& buffers() const { return buffers_; }

  // Total number of learnable scalars.
  std::size_t parameter_count() const;
  void zero_grad();

  // Parameters and buffers by name.
  std::map<std::string, Tensor> state() const;
  // Names and shapes must match exactly.
  void load_state(const std::map<std::string, Tensor>& state);

 private:
  bool has(const std::string& name) const;

  std::deque<Parameter> params_;
  std::deque<Buffer> buffers_;
};

struct ForwardContext {
  bool train = false;
  std::mt19937_64* rng = nullptr;
};

// Fan-in scaled uniform init U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Tensor fan_in_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng);

class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng);
  Var operator()(Tape& tape, Var x) const;

  Parameter& weight() const { return *weight_; }
  Parameter& bias() const { return *bias_; }

 private:
  Parameter* weight_ = nullptr;
  Parameter* bias_ = nullptr;
};

class Conv1d {
 public:
  Conv1d() = default;
  Conv1d(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, std::size_t kernel,
         std::size_t dilation, std::mt19937_64& rng);
  Var operator()(Tape& tape, Var x) const;

  Parameter& weight() const { return *weight_; }
  Parameter& bias() const { return *bias_; }
  std::size_t dilation() const { return dilation_; }

 private:
  Parameter* weight_ = nullptr;
  Parameter* bias_ = nullptr;
  std::size_t dilation_ = 1;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterStore& store, const std::string& name, std::size_t features, double eps = 1e-5);
  Var operator()(Tape& tape, Var x) const;

 private:
  Parameter* gamma_ = nullptr;
  Parameter* beta_ = nullptr;
  double eps_ = 1e-5;
};

class BatchNorm1d {
 public:
  BatchNorm1d() = default;
  BatchNorm1d(ParameterStore& store, const std::string& name, std::size_t channels, double momentum = 0.1,
              double eps = 1e-5);
  Var operator()(Tape& tape, Var x, bool train) const;

  const Tensor& running_mean() const { return *running_mean_; }
  const Tensor& running_var() const { return *running_var_; }

 private:
  Parameter* gamma_ = nullptr;
  Parameter* beta_ = nullptr;
  Tensor* running_mean_ = nullptr;
  Tensor* running_var_ = nullptr;
  double momentum_ = 0.1;
  double eps_ = 1e-5;
};

}  // namespace nilm
