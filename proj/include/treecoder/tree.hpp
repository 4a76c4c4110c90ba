#pragma once

// A complete k-ary tree of decoder nodes. Each internal node owns a selector
// that sends every sequence to exactly one child, so a forward pass runs h+1
// nodes and h selectors per sequence. Token/position embeddings and the
// output head sit outside the tree and are shared by every path.

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "treecoder/autodiff.hpp"
#include "treecoder/nn.hpp"
#include "treecoder/selector.hpp"
#include "treecoder/tree_math.hpp"

namespace treecoder {

enum class RoutingMode { learned, random };

inline const char* to_string(RoutingMode m) { return m == RoutingMode::learned ? "learned" : "random"; }

inline RoutingMode parse_routing(const std::string& s) {
  if (s == "learned") return RoutingMode::learned;
  if (s == "random") return RoutingMode::random;
  throw ConfigError("routing mode must be 'learned' or 'random', got '" + s + "'");
}

// 8/3·d rounded up to a multiple of 32.
inline std::size_t default_ffn_hidden(std::size_t d) { return (8 * d + 95) / 96 * 32; }

struct TreeConfig {
  std::size_t k = 2;
  std::size_t h = 1;
  std::size_t dec = 1;
  std::size_t d_model = 1024;
  std::size_t n_heads = 16;
  std::size_t ffn_hidden = 0;  // 0 selects default_ffn_hidden(d_model)
  std::size_t context_len = 128;
  std::size_t vocab_size = 8000;
  std::size_t selector_hidden_mult = 8;
  double dropout = 0.1;
  double rms_eps = 1e-5;
  RoutingMode routing = RoutingMode::learned;

  std::size_t ffn_width() const { return ffn_hidden ? ffn_hidden : default_ffn_hidden(d_model); }
  std::size_t selector_hidden() const { return selector_hidden_mult * d_model; }
  std::size_t nodes() const { return node_count(k, h); }
  std::size_t selectors() const { return internal_count(k, h); }
  std::size_t path_layers() const { return path_length(h, dec); }

  void validate() const {
    auto need = [](bool ok, const std::string& what) {
      if (!ok) throw ConfigError(what);
    };
    need(k >= 1, "k (branching factor) must be >= 1");
    need(dec >= 1, "dec (layers per node) must be >= 1");
    need(d_model >= 1, "d_model must be >= 1");
    need(n_heads >= 1 && d_model % n_heads == 0,
         "d_model " + std::to_string(d_model) + " must be divisible by n_heads " +
             std::to_string(n_heads));
    need(context_len >= 1, "context_len must be >= 1");
    need(vocab_size >= 1, "vocab_size must be >= 1");
    need(selector_hidden_mult >= 1, "selector_hidden_mult must be >= 1");
    need(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0, 1)");
    need(rms_eps > 0.0, "rms_eps must be positive");
    need(k == 1 || h < 64, "tree too tall");
  }
};

enum class ParamKind { token_embedding, position_embedding, node, selector, final_norm, head };
enum class ParamInit { normal, residual, ones };

struct ParamSpec {
  std::string name;
  Shape shape;
  ParamKind kind;
  std::size_t owner = 0;  // node or selector index
  ParamInit init = ParamInit::normal;
  bool decay = true;
};

inline constexpr const char* kLayerFields[] = {"wq",     "wk",   "wv",     "wo",   "w_gate",
                                               "w_up",   "w_down", "norm1", "norm2"};
inline constexpr const char* kSelectorFields[] = {"w_gate", "w_up", "w_out"};

// Every parameter in checkpoint order: token table, positional table, nodes
// (layers Wq Wk Wv Wo W_gate W_up W_down norm1 norm2), selectors
// (W_gate W_up W_out), final norm, head. Allocates nothing.
inline std::vector<ParamSpec> parameter_manifest(const TreeConfig& c) {
  c.validate();
  const std::size_t d = c.d_model, f = c.ffn_width(), m = c.selector_hidden();
  std::vector<ParamSpec> out;
  out.push_back({"tok_emb", {c.vocab_size, d}, ParamKind::token_embedding, 0, ParamInit::normal, false});
  out.push_back({"pos_emb", {c.context_len, d}, ParamKind::position_embedding, 0, ParamInit::normal, false});
  for (std::size_t n = 0; n < c.nodes(); ++n) {
    for (std::size_t l = 0; l < c.dec; ++l) {
      const std::string base = "node." + std::to_string(n) + ".layer." + std::to_string(l) + ".";
      auto add = [&](const char* field, Shape s, ParamInit init, bool decay) {
        out.push_back({base + field, std::move(s), ParamKind::node, n, init, decay});
      };
      add("wq", {d, d}, ParamInit::normal, true);
      add("wk", {d, d}, ParamInit::normal, true);
      add("wv", {d, d}, ParamInit::normal, true);
      add("wo", {d, d}, ParamInit::residual, true);
      add("w_gate", {d, f}, ParamInit::normal, true);
      add("w_up", {d, f}, ParamInit::normal, true);
      add("w_down", {f, d}, ParamInit::residual, true);
      add("norm1", {d}, ParamInit::ones, false);
      add("norm2", {d}, ParamInit::ones, false);
    }
  }
  for (std::size_t s = 0; s < c.selectors(); ++s) {
    const std::string base = "selector." + std::to_string(s) + ".";
    out.push_back({base + "w_gate", {d, m}, ParamKind::selector, s, ParamInit::normal, true});
    out.push_back({base + "w_up", {d, m}, ParamKind::selector, s, ParamInit::normal, true});
    out.push_back({base + "w_out", {m, c.k}, ParamKind::selector, s, ParamInit::normal, true});
  }
  out.push_back({"final_norm", {d}, ParamKind::final_norm, 0, ParamInit::ones, false});
  out.push_back({"head", {d, c.vocab_size}, ParamKind::head, 0, ParamInit::normal, true});
  return out;
}

template <class T>
struct NodeParams {
  std::vector<LayerParams<T>> layers;
};

template <class T>
struct NamedParam {
  ParamSpec spec;
  Array<T> array;
};

template <class T>
struct TreeCoderModel {
  TreeConfig config;
  EmbeddingParams<T> embeddings;
  std::vector<NodeParams<T>> nodes;
  std::vector<SelectorParams<T>> selectors;
  // The same arrays as above, in manifest order.
  std::vector<NamedParam<T>> params;

  std::vector<Array<T>> arrays() const {
    std::vector<Array<T>> out;
    out.reserve(params.size());
    for (const auto& p : params) out.push_back(p.array);
    return out;
  }

  void zero_grad() {
    for (auto& p : params) p.array.zero_grad();
  }

  template <class U>
  TreeCoderModel<U> cast() const;
};

// Zero-valued model with every array allocated and wired in manifest order.
template <class T>
TreeCoderModel<T> allocate(const TreeConfig& config) {
  TreeCoderModel<T> model;
  model.config = config;
  model.nodes.resize(config.nodes());
  for (auto& n : model.nodes) n.layers.resize(config.dec);
  model.selectors.resize(config.selectors());
  for (auto& spec : parameter_manifest(config)) {
    auto a = Array<T>::zeros(spec.shape, true);
    model.params.push_back({spec, a});
  }
  std::size_t i = 0;
  auto next = [&] { return model.params[i++].array; };
  model.embeddings.tokens = next();
  model.embeddings.positions = next();
  for (auto& n : model.nodes) {
    for (auto& l : n.layers) {
      l.wq = next();
      l.wk = next();
      l.wv = next();
      l.wo = next();
      l.w_gate = next();
      l.w_up = next();
      l.w_down = next();
      l.norm1 = next();
      l.norm2 = next();
    }
  }
  for (auto& s : model.selectors) {
    s.w_gate = next();
    s.w_up = next();
    s.w_out = next();
  }
  model.embeddings.final_norm = next();
  model.embeddings.head = next();
  return model;
}

template <class T>
template <class U>
TreeCoderModel<U> TreeCoderModel<T>::cast() const {
  auto out = allocate<U>(config);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto src = params[i].array.values();
    auto dst = out.params[i].array.mutable_values();
    for (std::size_t j = 0; j < src.size(); ++j) dst[j] = static_cast<U>(src[j]);
  }
  return out;
}

inline constexpr double kInitStd = 0.02;

// Normal(0, 0.02) weights, unit norm gains, and residual output projections
// (Wo, W_down) shrunk by 1/sqrt(2·path layers). Deterministic in the seed and
// independent of T: values are drawn in double and then converted.
template <class T>
TreeCoderModel<T> build(const TreeConfig& config, std::uint64_t seed) {
  auto model = allocate<T>(config);
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double residual_std = kInitStd / std::sqrt(2.0 * static_cast<double>(config.path_layers()));
  for (auto& p : model.params) {
    auto v = p.array.mutable_values();
    switch (p.spec.init) {
      case ParamInit::ones:
        std::fill(v.begin(), v.end(), T(1));
        break;
      case ParamInit::normal:
        for (auto& x : v) x = static_cast<T>(kInitStd * normal(rng));
        break;
      case ParamInit::residual:
        for (auto& x : v) x = static_cast<T>(residual_std * normal(rng));
        break;
    }
  }
  return model;
}

// ---------------------------------------------------------------------------
// Forward pass.

// Row-major [batch×len] token ids; pad is empty or marks padding with 1.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t len = 0;
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> pad;

  std::span<const std::uint8_t> pad_row(std::size_t b) const {
    if (pad.empty()) return {};
    return std::span<const std::uint8_t>(pad).subspan(b * len, len);
  }
};

struct RouteRecord {
  std::vector<std::size_t> nodes;    // h+1 entries, nodes[0] == 0
  std::vector<std::size_t> choices;  // h entries
  std::vector<std::vector<double>> probabilities;
  std::vector<double> grad_trick;    // forward values; always 1
};

struct ForwardCounters {
  std::size_t node_evals = 0;      // summed over sequences
  std::size_t selector_evals = 0;  // summed over sequences
  std::size_t layer_evals = 0;     // summed over sequences
  std::size_t decisions = 0;       // routing choices, learned or random
};

struct ForwardOptions {
  bool train = false;
  Rng* rng = nullptr;  // dropout in training, and random routing
  ForwardCounters* counters = nullptr;
  // When false the routed activations are passed on unscaled, i.e. the trick
  // scalar is replaced by a literal 1.
  bool apply_grad_trick = true;
};

template <class T>
struct ForwardOutput {
  Array<T> logits;                  // [B×L×V]
  std::vector<RouteRecord> routes;  // one per sequence
  std::vector<Array<T>> grad_tricks;  // per level-group, for inspection
};

template <class T>
Array<T> run_node(const TreeCoderModel<T>& model, std::size_t node, const Array<T>& x,
                  const BlockOptions& opt) {
  Array<T> y = x;
  for (const auto& layer : model.nodes.at(node).layers) y = decoder_layer(y, layer, opt);
  return y;
}

template <class T>
ForwardOutput<T> forward(const TreeCoderModel<T>& model, const TokenBatch& tokens,
                         const ForwardOptions& opt = {}) {
  const auto& c = model.config;
  const std::size_t B = tokens.batch, L = tokens.len;
  if (B == 0 || L == 0 || tokens.ids.size() != B * L) {
    throw InputError("token batch must be non-empty and hold batch×len ids");
  }
  if (!tokens.pad.empty() && tokens.pad.size() != B * L) {
    throw InputError("pad mask must match the token batch");
  }
  if (L > c.context_len) {
    throw InputError("sequence length " + std::to_string(L) + " exceeds context length " +
                     std::to_string(c.context_len));
  }
  const bool random_routing = c.routing == RoutingMode::random && c.selectors() > 0;
  if (random_routing && opt.rng == nullptr) {
    throw ConfigError("random routing needs a random generator");
  }
  BlockOptions block{c.n_heads, c.dropout, c.rms_eps, opt.train, opt.rng};

  ForwardOutput<T> out;
  out.routes.resize(B);
  for (auto& r : out.routes) r.nodes.push_back(0);

  struct Group {
    std::size_t node;
    std::vector<std::size_t> rows;  // batch rows routed here
    Array<T> x;
  };
  std::vector<Group> frontier;
  {
    std::vector<std::size_t> all(B);
    std::iota(all.begin(), all.end(), std::size_t{0});
    frontier.push_back({0, std::move(all), embed(std::span<const std::int32_t>(tokens.ids), B, L,
                                                 model.embeddings, block)});
  }

  for (std::size_t level = 0; level < c.h; ++level) {
    std::vector<Group> next;
    for (auto& g : frontier) {
      const std::size_t G = g.rows.size();
      auto y = run_node(model, g.node, g.x, block);
      if (opt.counters) {
        opt.counters->node_evals += G;
        opt.counters->layer_evals += G * c.dec;
      }
      if (c.k == 1) {
        next.push_back({child_of(1, g.node, 0), g.rows, y});
        for (auto r : g.rows) {
          out.routes[r].choices.push_back(0);
          out.routes[r].probabilities.push_back({1.0});
          out.routes[r].grad_trick.push_back(1.0);
          out.routes[r].nodes.push_back(child_of(1, g.node, 0));
        }
        continue;
      }
      if (opt.counters) opt.counters->decisions += G;
      Selection<T> sel;
      if (random_routing) {
        sel = select_random<T>(c.k, G, *opt.rng);
      } else {
        std::vector<std::uint8_t> pad;
        if (!tokens.pad.empty()) {
          for (auto r : g.rows) {
            auto row = tokens.pad_row(r);
            pad.insert(pad.end(), row.begin(), row.end());
          }
        }
        sel = select(mean_pool(y, std::span<const std::uint8_t>(pad)), model.selectors.at(g.node));
        if (opt.counters) opt.counters->selector_evals += G;
      }
      Array<T> routed = y;
      if (opt.apply_grad_trick) {
        routed = mul(y, reshape(sel.grad_trick, {G, 1, 1}));
        out.grad_tricks.push_back(sel.grad_trick);
      }
      std::map<std::size_t, std::vector<std::size_t>> by_child;  // child -> positions in group
      for (std::size_t i = 0; i < G; ++i) {
        const auto& d = sel.decisions[i];
        auto& route = out.routes[g.rows[i]];
        route.choices.push_back(d.child);
        route.probabilities.push_back(d.probabilities);
        route.grad_trick.push_back(static_cast<double>(sel.grad_trick.values()[i]));
        route.nodes.push_back(child_of(c.k, g.node, d.child));
        by_child[d.child].push_back(i);
      }
      for (auto& [child, positions] : by_child) {
        std::vector<std::size_t> rows;
        for (auto p : positions) rows.push_back(g.rows[p]);
        Array<T> xc = positions.size() == G
                          ? routed
                          : take_rows(routed, std::span<const std::size_t>(positions));
        next.push_back({child_of(c.k, g.node, child), std::move(rows), xc});
      }
    }
    frontier = std::move(next);
  }

  std::vector<Array<T>> leaves;
  std::vector<std::vector<std::size_t>> where;
  for (auto& g : frontier) {
    leaves.push_back(run_node(model, g.node, g.x, block));
    if (opt.counters) {
      opt.counters->node_evals += g.rows.size();
      opt.counters->layer_evals += g.rows.size() * c.dec;
    }
    where.push_back(g.rows);
  }
  Array<T> y = leaves.size() == 1 && where[0].size() == B &&
                       std::is_sorted(where[0].begin(), where[0].end())
                   ? leaves[0]
                   : scatter_rows(leaves, where, B);
  out.logits = output_head(y, model.embeddings, c.rms_eps);
  return out;
}

// ---------------------------------------------------------------------------
// Parameter accounting.

struct ParamReport {
  std::uint64_t embedding = 0;  // token + positional tables
  std::uint64_t per_node = 0;
  std::uint64_t nodes_total = 0;
  std::uint64_t per_selector = 0;
  std::uint64_t selectors_total = 0;
  std::uint64_t head = 0;  // final norm + output projection
  std::uint64_t total = 0;
  std::uint64_t active = 0;  // parameters one sequence touches, selectors included
  double selector_percent = 0.0;
  double active_percent = 0.0;
};

inline ParamReport summarize(const TreeConfig& c, std::span<const ParamSpec> specs) {
  ParamReport r;
  std::map<std::size_t, std::uint64_t> node_sizes, selector_sizes;
  for (const auto& s : specs) {
    const std::uint64_t n = numel(s.shape);
    switch (s.kind) {
      case ParamKind::token_embedding:
      case ParamKind::position_embedding:
        r.embedding += n;
        break;
      case ParamKind::node:
        r.nodes_total += n;
        node_sizes[s.owner] += n;
        break;
      case ParamKind::selector:
        r.selectors_total += n;
        selector_sizes[s.owner] += n;
        break;
      case ParamKind::final_norm:
      case ParamKind::head:
        r.head += n;
        break;
    }
    r.total += n;
  }
  r.per_node = node_sizes.empty() ? 0 : node_sizes.begin()->second;
  r.per_selector = selector_sizes.empty() ? 0 : selector_sizes.begin()->second;
  r.active = r.embedding + r.head + (c.h + 1) * r.per_node +
             (c.k == 1 ? 0 : c.h * r.per_selector);
  r.selector_percent = 100.0 * static_cast<double>(r.selectors_total) / static_cast<double>(r.total);
  r.active_percent = 100.0 * static_cast<double>(r.active) / static_cast<double>(r.total);
  return r;
}

// Counts from the configuration alone; nothing is allocated.
inline ParamReport param_report(const TreeConfig& c) {
  auto specs = parameter_manifest(c);
  return summarize(c, specs);
}

// Counts from the arrays a model actually holds.
template <class T>
ParamReport param_report(const TreeCoderModel<T>& model) {
  std::vector<ParamSpec> specs;
  for (const auto& p : model.params) {
    ParamSpec s = p.spec;
    s.shape = p.array.shape();
    specs.push_back(std::move(s));
  }
  return summarize(model.config, specs);
}

inline std::uint64_t selector_params_closed_form(const TreeConfig& c) {
  const std::uint64_t d = c.d_model, m = c.selector_hidden(), k = c.k;
  return internal_count(c.k, c.h) * (2 * d * m + m * k);
}

// ---------------------------------------------------------------------------
// Route statistics.

struct RouteStats {
  std::vector<std::uint64_t> leaf_hist;   // indexed by leaf position, k^h bins
  std::vector<double> level_entropy_bits; // entropy of the node reached at depth 1..h
  std::size_t distinct_paths = 0;
  std::uint64_t sequences = 0;
};

inline RouteStats route_stats(std::span<const RouteRecord> routes, std::size_t k, std::size_t h) {
  RouteStats s;
  s.leaf_hist.assign(leaf_count(k, h), 0);
  const std::uint64_t leaf0 = first_leaf(k, h);
  std::vector<std::map<std::size_t, std::uint64_t>> depth_counts(h);
  for (const auto& r : routes) {
    if (r.nodes.size() != h + 1) throw InputError("route record has the wrong length");
    ++s.leaf_hist.at(r.nodes.back() - leaf0);
    for (std::size_t t = 1; t <= h; ++t) ++depth_counts[t - 1][r.nodes[t]];
    ++s.sequences;
  }
  for (auto& counts : depth_counts) {
    double e = 0.0;
    for (auto& [node, n] : counts) {
      double p = static_cast<double>(n) / static_cast<double>(s.sequences);
      e -= p * std::log2(p);
    }
    s.level_entropy_bits.push_back(e == 0.0 ? 0.0 : e);
  }
  for (auto n : s.leaf_hist) s.distinct_paths += n > 0;
  return s;
}

}  // namespace treecoder
