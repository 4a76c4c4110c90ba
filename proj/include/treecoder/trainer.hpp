#pragma once

// Optimization loop: AdamW with decoupled weight decay, linear warmup into
// cosine annealing with warm restarts, global-norm clipping, epoch-end
// validation, and checkpointing whenever validation perplexity improves.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "treecoder/autodiff.hpp"
#include "treecoder/checkpoint.hpp"
#include "treecoder/data.hpp"
#include "treecoder/tree.hpp"

namespace treecoder {

struct TrainConfig {
  double base_lr = 3e-4;
  std::size_t warmup_steps = 2000;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-5;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  std::size_t batch_size = 16;
  std::size_t epochs = 20;
  std::size_t restart_period = 0;  // steps per cosine cycle; 0 means one epoch
  double restart_mult = 1.0;
  double min_lr_fraction = 0.1;
  std::uint64_t seed = 42;
  std::size_t max_steps = 0;  // 0: no cap
  std::size_t eval_batch_size = 16;

  void validate() const {
    auto need = [](bool ok, const char* what) {
      if (!ok) throw ConfigError(what);
    };
    need(base_lr > 0, "base_lr must be positive");
    need(beta1 > 0 && beta1 < 1, "beta1 must lie in (0,1)");
    need(beta2 > 0 && beta2 < 1, "beta2 must lie in (0,1)");
    need(adam_eps > 0, "adam_eps must be positive");
    need(weight_decay >= 0, "weight_decay must be non-negative");
    need(clip_norm > 0, "clip_norm must be positive");
    need(batch_size >= 1, "batch_size must be >= 1");
    need(eval_batch_size >= 1, "eval_batch_size must be >= 1");
    need(epochs >= 1, "epochs must be >= 1");
    need(restart_mult >= 1, "restart_mult must be >= 1");
    need(min_lr_fraction >= 0 && min_lr_fraction <= 1, "min_lr_fraction must lie in [0,1]");
  }
};

// Learning rate for optimizer step `step`. Linear from 0 over the warmup, then
// cosine cycles that each start at base_lr and decay towards
// min_lr_fraction·base_lr; cycle c lasts restart_period·restart_mult^c steps.
inline double lr_at(std::size_t step, const TrainConfig& c) {
  if (step < c.warmup_steps) {
    return c.base_lr * (static_cast<double>(step) / static_cast<double>(c.warmup_steps));
  }
  if (c.restart_period == 0) throw ConfigError("lr_at: restart_period must be set after warmup");
  double pos = static_cast<double>(step - c.warmup_steps);
  double period = static_cast<double>(c.restart_period);
  while (pos >= period) {
    pos -= period;
    period *= c.restart_mult;
  }
  const double u = pos / period;
  const double min_lr = c.min_lr_fraction * c.base_lr;
  return c.base_lr - (c.base_lr - min_lr) * (1.0 - std::cos(std::numbers::pi * u)) / 2.0;
}

struct ParamState {
  std::vector<double> m, v;
  std::uint64_t steps = 0;
};

struct TrainState {
  std::vector<ParamState> moments;  // parallel to model.params
  std::uint64_t step = 0;
  double best_valid_ppl = std::numeric_limits<double>::infinity();
};

// Only parameters that received gradient in the last backward pass are
// updated (and decayed); each keeps its own bias-correction step count.
template <class T>
void adamw_step(std::span<NamedParam<T>> params, TrainState& state, double lr, const TrainConfig& c) {
  if (state.moments.size() != params.size()) state.moments.resize(params.size());
  for (const auto& p : params) {
    if (!p.array.touched()) continue;
    for (T g : p.array.grad()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw NumericError("adamw: non-finite gradient in " + p.spec.name + "; step aborted");
      }
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.array.touched()) continue;
    auto& s = state.moments[i];
    if (s.m.empty()) {
      s.m.assign(p.array.size(), 0.0);
      s.v.assign(p.array.size(), 0.0);
    }
    ++s.steps;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(s.steps));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(s.steps));
    const double decay = p.spec.decay ? 1.0 - lr * c.weight_decay : 1.0;
    auto theta = p.array.mutable_values();
    auto g = p.array.grad();
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      s.m[j] = c.beta1 * s.m[j] + (1.0 - c.beta1) * gj;
      s.v[j] = c.beta2 * s.v[j] + (1.0 - c.beta2) * gj * gj;
      const double mhat = s.m[j] / bc1;
      const double vhat = s.v[j] / bc2;
      double x = static_cast<double>(theta[j]) * decay;
      x -= lr * mhat / (std::sqrt(vhat) + c.adam_eps);
      theta[j] = static_cast<T>(x);
    }
  }
}

// Rescales all gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
template <class T>
double clip_gradients(std::span<NamedParam<T>> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (T g : p.array.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& p : params)
      for (auto& g : p.array.mutable_grad()) g = static_cast<T>(static_cast<double>(g) * f);
  }
  return norm;
}

struct NllStats {
  double sum = 0.0;
  std::size_t tokens = 0;
};

// Summed negative log-likelihood of non-ignored targets, accumulated in double.
template <class T>
NllStats nll_stats(const Array<T>& logits, std::span<const std::int32_t> targets, std::int32_t ignore_id) {
  const std::size_t V = logits.shape().back();
  const std::size_t rows = logits.size() / V;
  if (rows != targets.size()) throw DimensionError("nll_stats: target count mismatch");
  NllStats s;
  auto v = logits.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const auto t = targets[r];
    if (t == ignore_id) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= V) throw InputError("target id outside vocabulary");
    const T* row = v.data() + r * V;
    double mx = static_cast<double>(*std::max_element(row, row + V));
    double z = 0.0;
    for (std::size_t j = 0; j < V; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
    s.sum += std::log(z) + mx - static_cast<double>(row[t]);
    ++s.tokens;
  }
  return s;
}

struct EvalResult {
  double perplexity = 0.0;
  double mean_nll = 0.0;
  std::size_t tokens = 0;
  RouteStats routes;
};

// exp(total NLL / token count) over non-pad targets, in eval mode. Random
// routing draws from a generator seeded with routing_seed.
template <class T>
EvalResult evaluate(const TreeCoderModel<T>& model, const PackedDataset& ds, std::size_t batch_size = 16,
                    std::uint64_t routing_seed = 0) {
  if (ds.count == 0) throw InputError("evaluate: empty dataset");
  NoGradScope<T> no_grad;
  Rng rng(routing_seed);
  BatchPlan plan(ds, batch_size, 0, 0, false);
  NllStats total;
  std::vector<RouteRecord> routes;
  for (std::size_t i = 0; i < plan.size(); ++i) {
    auto batch = plan[i];
    ForwardOptions opt;
    opt.rng = &rng;
    auto out = forward(model, batch.inputs, opt);
    auto s = nll_stats(out.logits, std::span<const std::int32_t>(batch.targets), kPadId);
    total.sum += s.sum;
    total.tokens += s.tokens;
    routes.insert(routes.end(), out.routes.begin(), out.routes.end());
  }
  if (total.tokens == 0) throw InputError("evaluate: dataset has no target tokens");
  EvalResult r;
  r.tokens = total.tokens;
  r.mean_nll = total.sum / static_cast<double>(total.tokens);
  r.perplexity = std::exp(r.mean_nll);
  r.routes = route_stats(routes, model.config.k, model.config.h);
  return r;
}

struct LogRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::string split;
  double loss = 0.0;
  double ppl = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
  std::vector<std::uint64_t> leaf_hist;

  nlohmann::json to_json() const {
    return {{"step", step}, {"epoch", epoch},         {"split", split}, {"loss", loss},
            {"ppl", ppl},   {"lr", lr},               {"grad_norm", grad_norm},
            {"leaf_hist", leaf_hist}};
  }
};

struct TrainingDiverged : NumericError {
  TrainingDiverged(const std::string& what, std::size_t last_healthy)
      : NumericError(what), last_healthy_step(last_healthy) {}
  std::size_t last_healthy_step;
};

struct FitOptions {
  std::optional<std::filesystem::path> out_dir;  // metrics.jsonl + checkpoints/
  nlohmann::json vocab;                          // embedded in checkpoints
  std::function<void(const LogRecord&)> on_log;
};

struct FitResult {
  std::vector<LogRecord> log;
  std::vector<double> train_losses;  // one per optimizer step
  double initial_valid_ppl = 0.0;
  double best_valid_ppl = std::numeric_limits<double>::infinity();
  std::vector<std::filesystem::path> checkpoints;
  std::size_t steps = 0;
  std::size_t epochs_run = 0;
};

template <class T>
FitResult fit(TreeCoderModel<T>& model, const PackedDataset& train, const PackedDataset& valid,
              TrainConfig config, const FitOptions& options = {}) {
  config.validate();
  model.config.validate();
  if (train.count == 0 || valid.count == 0) throw InputError("fit: empty train or validation set");
  if (train.context_len > model.config.context_len) {
    throw ConfigError("dataset context length exceeds the model's");
  }
  const std::size_t steps_per_epoch = (train.count + config.batch_size - 1) / config.batch_size;
  if (config.restart_period == 0) config.restart_period = steps_per_epoch;

  std::ofstream metrics;
  if (options.out_dir) {
    std::filesystem::create_directories(*options.out_dir / "checkpoints");
    metrics.open(*options.out_dir / "metrics.jsonl", std::ios::trunc);
    if (!metrics) throw InputError("cannot write metrics.jsonl under " + options.out_dir->string());
  }
  FitResult result;
  auto emit = [&](const LogRecord& r) {
    result.log.push_back(r);
    if (metrics.is_open()) metrics << r.to_json().dump() << '\n' << std::flush;
    if (options.on_log) options.on_log(r);
  };

  result.initial_valid_ppl = evaluate(model, valid, config.eval_batch_size, config.seed).perplexity;

  TrainState state;
  Rng rng(config.seed);
  std::span<NamedParam<T>> params(model.params);
  bool done = false;
  for (std::size_t epoch = 0; epoch < config.epochs && !done; ++epoch) {
    BatchPlan plan(train, config.batch_size, config.seed, epoch);
    for (std::size_t b = 0; b < plan.size(); ++b) {
      auto batch = plan[b];
      const std::size_t step = state.step + 1;
      const double lr = lr_at(step, config);
      model.zero_grad();
      double loss_value = 0.0;
      double grad_norm = 0.0;
      RouteStats stats;
      {
        Tape<T> tape;
        typename Tape<T>::Scope scope(&tape);
        ForwardOptions opt;
        opt.train = true;
        opt.rng = &rng;
        auto out = forward(model, batch.inputs, opt);
        auto loss = cross_entropy(out.logits, std::span<const std::int32_t>(batch.targets), kPadId);
        loss_value = static_cast<double>(loss.item());
        if (!std::isfinite(loss_value)) {
          throw TrainingDiverged("training diverged at step " + std::to_string(step) +
                                     " (last healthy step " + std::to_string(state.step) + ")",
                                 state.step);
        }
        tape.backward(loss);
        stats = route_stats(out.routes, model.config.k, model.config.h);
      }
      grad_norm = clip_gradients(params, config.clip_norm);
      if (!std::isfinite(grad_norm)) {
        throw TrainingDiverged("non-finite gradient at step " + std::to_string(step) +
                                   " (last healthy step " + std::to_string(state.step) + ")",
                               state.step);
      }
      adamw_step(params, state, lr, config);
      state.step = step;
      result.train_losses.push_back(loss_value);
      emit({step, epoch, "train", loss_value, std::exp(loss_value), lr, grad_norm, stats.leaf_hist});
      if (config.max_steps && state.step >= config.max_steps) {
        done = true;
        break;
      }
    }
    auto ev = evaluate(model, valid, config.eval_batch_size, config.seed);
    emit({state.step, epoch, "valid", ev.mean_nll, ev.perplexity, lr_at(state.step, config), 0.0,
          ev.routes.leaf_hist});
    ++result.epochs_run;
    if (ev.perplexity < state.best_valid_ppl) {
      state.best_valid_ppl = ev.perplexity;
      if (options.out_dir) {
        auto path = *options.out_dir / "checkpoints" / ("epoch_" + std::to_string(epoch + 1) + ".ckpt");
        save_checkpoint(path, model, {state.step, epoch + 1, state.best_valid_ppl, options.vocab});
        result.checkpoints.push_back(path);
      }
    }
  }
  result.best_valid_ppl = state.best_valid_ppl;
  result.steps = state.step;
  return result;
}

}  // namespace treecoder
