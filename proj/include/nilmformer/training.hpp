// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "json.hpp"
#include "nilmformer/dataio.hpp"
#include "nilmformer/model.hpp"

namespace nilm {

struct TrainConfig {
  double lr = 1e-4;
  std::size_t patience = 5;  // plateau epochs before the learning rate is cut
  double factor = 0.5;
  std::size_t batch_size = 64;
  std::size_t max_epochs = 50;
  std::size_t early_stop = 10;  // epochs without improvement before stopping
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// Independent streams for every stochastic component, all derived from one seed.
struct SeedPlan {
  std::uint64_t init;
  std::uint64_t shuffle;
  std::uint64_t dropout;
  std::uint64_t synth;
};
SeedPlan set_seed(std::uint64_t seed);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;  // learning rate used during the epoch
  double seconds = 0.0;
};

struct TrainReport {
  std::uint64_t seed = 0;
  double initial_val_loss = 0.0;
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  double final_lr = 0.0;
  bool stopped_early = false;
  double wall_seconds = 0.0;

  // Everything except the timing fields.
  bool same_outcome(const TrainReport& other) const;
};

void to_json(nlohmann::json& j, const TrainReport& r);
void from_json(const nlohmann::json& j, TrainReport& r);

// Mean squared error over every element, eval mode.
double evaluate_loss(const NILMFormer& model, const WindowBatch& batch, std::size_t chunk = 128);

using EpochCallback = std::function<void(const EpochRecord&)>;

// Trains in place and leaves the model holding its best-validation state.
// The model should have been built with set_seed(cfg.seed).init.
TrainReport train(NILMFormer& model, const WindowBatch& train_set, const WindowBatch& val_set, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

}  // namespace nilm
