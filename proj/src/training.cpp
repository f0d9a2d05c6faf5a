// SPDX-License-Identifier: Apache-2.0
#include "nilmformer/training.hpp"

#include <chrono>
#include <numeric>

#include "nilmformer/error.hpp"
#include "nilmformer/ops.hpp"
#include "nilmformer/optim.hpp"
#include "nilmformer/runtime.hpp"
#include "nilmformer/synthgen.hpp"

namespace nilm {

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(factor > 0.0 && factor < 1.0)) throw ConfigError("factor must lie in (0, 1)");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (max_epochs == 0) throw ConfigError("max_epochs must be positive");
  if (!(patience < early_stop && early_stop <= max_epochs))
    throw ConfigError("need patience < early_stop <= max_epochs");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"patience", c.patience},
       {"factor", c.factor},
       {"batch_size", c.batch_size},
       {"max_epochs", c.max_epochs},
       {"early_stop", c.early_stop},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  const nlohmann::json defaults = TrainConfig{};
  for (const auto& [key, _] : j.items())
    if (!defaults.contains(key)) throw ConfigError("unknown train config key '" + key + "'");
  nlohmann::json m = defaults;
  m.update(j);
  try {
    c.lr = m.at("lr").get<double>();
    c.patience = m.at("patience").get<std::size_t>();
    c.factor = m.at("factor").get<double>();
    c.batch_size = m.at("batch_size").get<std::size_t>();
    c.max_epochs = m.at("max_epochs").get<std::size_t>();
    c.early_stop = m.at("early_stop").get<std::size_t>();
    c.seed = m.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
}

SeedPlan set_seed(std::uint64_t seed) {
  return {mix_seed(seed, 0x1417), mix_seed(seed, 0x5F1E), mix_seed(seed, 0xD209), seed};
}

bool TrainReport::same_outcome(const TrainReport& o) const {
  if (seed != o.seed || initial_val_loss != o.initial_val_loss || best_epoch != o.best_epoch ||
      best_val_loss != o.best_val_loss || final_lr != o.final_lr || stopped_early != o.stopped_early ||
      epochs.size() != o.epochs.size())
    return false;
  for (std::size_t i = 0; i < epochs.size(); ++i) {
    const auto& a = epochs[i];
    const auto& b = o.epochs[i];
    if (a.epoch != b.epoch || a.train_loss != b.train_loss || a.val_loss != b.val_loss || a.lr != b.lr) return false;
  }
  return true;
}

void to_json(nlohmann::json& j, const TrainReport& r) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : r.epochs)
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"val_loss", e.val_loss},
                      {"lr", e.lr},
                      {"seconds", e.seconds}});
  j = {{"seed", r.seed},
       {"initial_val_loss", r.initial_val_loss},
       {"epochs", epochs},
       {"best_epoch", r.best_epoch},
       {"best_val_loss", r.best_val_loss},
       {"final_lr", r.final_lr},
       {"stopped_early", r.stopped_early},
       {"wall_seconds", r.wall_seconds}};
}

void from_json(const nlohmann::json& j, TrainReport& r) {
  r.seed = j.at("seed").get<std::uint64_t>();
  r.initial_val_loss = j.at("initial_val_loss").get<double>();
  r.best_epoch = j.at("best_epoch").get<std::size_t>();
  r.best_val_loss = j.at("best_val_loss").get<double>();
  r.final_lr = j.at("final_lr").get<double>();
  r.stopped_early = j.at("stopped_early").get<bool>();
  r.wall_seconds = j.at("wall_seconds").get<double>();
  r.epochs.clear();
  for (const auto& e : j.at("epochs"))
    r.epochs.push_back({e.at("epoch").get<std::size_t>(), e.at("train_loss").get<double>(),
                        e.at("val_loss").get<double>(), e.at("lr").get<double>(), e.at("seconds").get<double>()});
}

double evaluate_loss(const NILMFormer& model, const WindowBatch& batch, std::size_t chunk) {
  NILM_EXPECT(!batch.empty(), "evaluate_loss: empty batch");
  const Tensor pred = model.predict(batch.windows, batch.covariates, chunk);
  double s = 0.0;
  for (std::size_t k = 0; k < pred.size(); ++k) {
    const double e = pred[k] - batch.targets[k];
    s += e * e;
  }
  return s / static_cast<double>(pred.size());
}

TrainReport train(NILMFormer& model, const WindowBatch& train_set, const WindowBatch& val_set, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  configure_allocator();
  if (train_set.empty()) throw ConfigError("training set is empty");
  if (val_set.empty()) throw ConfigError("validation set is empty");
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();

  const SeedPlan seeds = set_seed(cfg.seed);
  std::mt19937_64 shuffle_rng(seeds.shuffle);
  std::mt19937_64 dropout_rng(seeds.dropout);
  OptimizerState opt{Adam(AdamConfig{.lr = cfg.lr}), ReduceLROnPlateau(cfg.patience, cfg.factor)};
  const auto params = model.store().parameters();

  TrainReport report;
  report.seed = cfg.seed;
  report.initial_val_loss = evaluate_loss(model, val_set);
  report.best_val_loss = std::numeric_limits<double>::infinity();
  auto best_state = model.store().state();

  std::vector<std::size_t> order(train_set.size());
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto e0 = clock::now();
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng() % i]);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = opt.adam.lr();
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t nb = std::min(cfg.batch_size, order.size() - start);
      const auto batch = train_set.select(std::span<const std::size_t>(order).subspan(start, nb));
      model.store().zero_grad();
      Tape tape;
      Var pred = model.forward(tape, batch.windows, batch.covariates, {.train = true, .rng = &dropout_rng});
      Var loss = ops::mse_loss(pred, tape.constant(batch.targets));
      tape.backward(loss);
      opt.adam.step(params);
      loss_sum += loss.value()[0] * static_cast<double>(nb);
    }
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.val_loss = evaluate_loss(model, val_set);
    rec.seconds = std::chrono::duration<double>(clock::now() - e0).count();
    report.epochs.push_back(rec);

    if (rec.val_loss < report.best_val_loss) {
      report.best_val_loss = rec.val_loss;
      report.best_epoch = epoch;
      best_state = model.store().state();
      since_best = 0;
    } else {
      ++since_best;
    }
    opt.scheduler.observe(rec.val_loss, opt.adam);
    if (on_epoch) on_epoch(rec);
    if (since_best >= cfg.early_stop) {
      report.stopped_early = true;
      break;
    }
  }
  model.store().load_state(best_state);
  report.final_lr = opt.adam.lr();
  report.wall_seconds = std::chrono::duration<double>(clock::now() - t0).count();
  return report;
}

}  // namespace nilm
