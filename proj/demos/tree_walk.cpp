// Builds a small binary TreeCoder, routes a batch through it and prints the
// path every sequence took together with the parameter accounting.

#include <cstdio>
#include <random>

#include "treecoder/treecoder.hpp"

int main() {
  using namespace treecoder;
  TreeConfig cfg;
  cfg.k = 2;
  cfg.h = 3;
  cfg.dec = 1;
  cfg.d_model = 32;
  cfg.n_heads = 4;
  cfg.context_len = 16;
  cfg.vocab_size = 64;
  cfg.dropout = 0.0;
  auto model = build<float>(cfg, 42);

  TokenBatch batch{8, 16, {}, {}};
  Rng rng(7);
  std::uniform_int_distribution<std::int32_t> tok(3, 63);
  for (std::size_t i = 0; i < batch.batch * batch.len; ++i) batch.ids.push_back(tok(rng));

  ForwardCounters counters;
  ForwardOptions opt;
  opt.counters = &counters;
  auto out = forward(model, batch, opt);
  for (std::size_t b = 0; b < out.routes.size(); ++b) {
    std::printf("sequence %zu:", b);
    for (auto n : out.routes[b].nodes) std::printf(" %zu", n);
    std::printf("\n");
  }
  auto report = param_report(model);
  std::printf("nodes=%zu selectors=%zu node evals=%zu selector evals=%zu\n", cfg.nodes(),
              cfg.selectors(), counters.node_evals, counters.selector_evals);
  std::printf("params total=%llu active=%.1f%% selectors=%.1f%%\n",
              static_cast<unsigned long long>(report.total), report.active_percent,
              report.selector_percent);
}
