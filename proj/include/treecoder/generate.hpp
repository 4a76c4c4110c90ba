#pragma once

// Autoregressive sampling. The full tree forward is re-run on the trailing
// context window for every emitted token.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "treecoder/tokenizer.hpp"
#include "treecoder/tree.hpp"

namespace treecoder {

struct GeneratedToken {
  std::int32_t id = 0;
  std::vector<std::size_t> route;  // nodes visited, root first
};

struct Generation {
  std::vector<std::int32_t> ids;  // prompt followed by the emitted tokens
  std::vector<GeneratedToken> steps;
  bool stopped_at_eos = false;
};

// Temperature 0 is greedy with ties to the lowest id. `rng` drives sampling
// and, in random-routing models, the routing decisions.
template <class T>
Generation generate(const TreeCoderModel<T>& model, std::vector<std::int32_t> prompt, std::size_t max_tokens,
                    double temperature, Rng& rng) {
  if (temperature < 0 || !std::isfinite(temperature)) throw ConfigError("temperature must be >= 0");
  if (prompt.empty()) prompt.push_back(kBosId);
  const std::size_t V = model.config.vocab_size, L = model.config.context_len;
  for (auto id : prompt) {
    if (id < 0 || static_cast<std::size_t>(id) >= V) throw InputError("prompt token outside the vocabulary");
  }
  NoGradScope<T> no_grad;
  Generation g;
  g.ids = std::move(prompt);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t n = 0; n < max_tokens; ++n) {
    const std::size_t start = g.ids.size() > L ? g.ids.size() - L : 0;
    TokenBatch batch;
    batch.batch = 1;
    batch.len = g.ids.size() - start;
    batch.ids.assign(g.ids.begin() + static_cast<long>(start), g.ids.end());
    ForwardOptions opt;
    opt.rng = &rng;
    auto out = forward(model, batch, opt);
    auto v = out.logits.values().subspan((batch.len - 1) * V, V);

    std::size_t pick = 0;
    if (temperature == 0.0) {
      for (std::size_t j = 1; j < V; ++j)
        if (v[j] > v[pick]) pick = j;
    } else {
      double mx = static_cast<double>(v[0]);
      for (std::size_t j = 1; j < V; ++j) mx = std::max(mx, static_cast<double>(v[j]));
      std::vector<double> w(V);
      double z = 0.0;
      for (std::size_t j = 0; j < V; ++j) z += w[j] = std::exp((static_cast<double>(v[j]) - mx) / temperature);
      double u = unit(rng) * z;
      pick = V - 1;
      for (std::size_t j = 0; j < V; ++j) {
        u -= w[j];
        if (u < 0) {
          pick = j;
          break;
        }
      }
    }
    const auto id = static_cast<std::int32_t>(pick);
    g.ids.push_back(id);
    g.steps.push_back({id, out.routes[0].nodes});
    if (id == kEosId) {
      g.stopped_at_eos = true;
      break;
    }
  }
  return g;
}

}  // namespace treecoder
