#pragma once

// Test-only oracles. Nothing here calls the reverse-mode engine: finite
// differences run on plain doubles, and the linear reference model is built
// by copying parameters rather than by any tree code path.

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "treecoder/treecoder.hpp"

namespace treecoder::testing {

// Central differences of a scalar function of a flat double vector.
inline std::vector<double> central_difference(const std::function<double(const std::vector<double>&)>& f,
                                              std::vector<double> x, double step) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    const double up = f(x);
    x[i] = orig - step;
    const double down = f(x);
    x[i] = orig;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

inline std::vector<double> random_values(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

template <class T>
Array<T> random_array(Shape shape, std::uint64_t seed, bool requires_grad = true, double lo = -1.0,
                      double hi = 1.0) {
  auto v = random_values(numel(shape), seed, lo, hi);
  return Array<T>::from(std::move(shape), std::vector<T>(v.begin(), v.end()), requires_grad);
}

// A (k=1, h, dec) chain re-expressed as a single node of (h+1)·dec layers
// holding the very same parameter values, in path order.
template <class T>
TreeCoderModel<T> linearize(const TreeCoderModel<T>& chain) {
  if (chain.config.k != 1) throw ConfigError("linearize needs a k=1 tree");
  TreeConfig lin = chain.config;
  lin.h = 0;
  lin.dec = chain.config.path_layers();
  auto out = allocate<T>(lin);
  auto copy = [](const Array<T>& from, Array<T>& to) {
    auto src = from.values();
    auto dst = to.mutable_values();
    std::copy(src.begin(), src.end(), dst.begin());
  };
  copy(chain.embeddings.tokens, out.embeddings.tokens);
  copy(chain.embeddings.positions, out.embeddings.positions);
  copy(chain.embeddings.final_norm, out.embeddings.final_norm);
  copy(chain.embeddings.head, out.embeddings.head);
  std::size_t layer = 0;
  for (const auto& node : chain.nodes) {
    for (const auto& l : node.layers) {
      auto& dst = out.nodes[0].layers[layer++];
      copy(l.wq, dst.wq);
      copy(l.wk, dst.wk);
      copy(l.wv, dst.wv);
      copy(l.wo, dst.wo);
      copy(l.w_gate, dst.w_gate);
      copy(l.w_up, dst.w_up);
      copy(l.w_down, dst.w_down);
      copy(l.norm1, dst.norm1);
      copy(l.norm2, dst.norm2);
    }
  }
  return out;
}

// Per-sequence forward along fixed routes with every trick denominator
// frozen at a given value. At the point the routes and denominators were
// recorded its value equals the routed loss, and unlike the routed loss it is
// differentiable in the selector weights, so finite differences of it are the
// reference for the gradients the trick produces.
template <class T>
Array<T> frozen_route_loss(const TreeCoderModel<T>& model, const TokenBatch& tokens,
                           std::span<const std::int32_t> targets, std::span<const RouteRecord> routes) {
  const auto& c = model.config;
  BlockOptions block{c.n_heads, 0.0, c.rms_eps, false, nullptr};
  std::vector<Array<T>> per_seq;
  std::vector<std::vector<std::size_t>> where;
  for (std::size_t b = 0; b < tokens.batch; ++b) {
    auto ids = std::span<const std::int32_t>(tokens.ids).subspan(b * tokens.len, tokens.len);
    auto x = embed(ids, 1, tokens.len, model.embeddings, block);
    const auto& route = routes[b];
    for (std::size_t t = 0; t < c.h; ++t) {
      auto y = run_node(model, route.nodes[t], x, block);
      if (c.k == 1) {
        x = y;
        continue;
      }
      auto probs = softmax(selector_logits(mean_pool(y, tokens.pad_row(b)), model.selectors[route.nodes[t]]), -1);
      std::vector<std::size_t> pick = {route.choices[t]};
      auto p = pick_last(probs, std::span<const std::size_t>(pick));
      auto held = Array<T>::from({1}, {static_cast<T>(route.probabilities[t][route.choices[t]])});
      x = mul(y, reshape(div(p, held), {1, 1, 1}));
    }
    per_seq.push_back(run_node(model, route.nodes[c.h], x, block));
    where.push_back({b});
  }
  auto logits = output_head(scatter_rows(per_seq, where, tokens.batch), model.embeddings, c.rms_eps);
  return cross_entropy(logits, targets, kPadId);
}

// Overwrites every parameter with uniform noise of order one (gains around
// one), so that gradients sit far above finite-difference rounding.
template <class T>
void randomize(TreeCoderModel<T>& model, std::uint64_t seed, double scale = 0.5) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& p : model.params) {
    const bool gain = p.spec.init == ParamInit::ones;
    // keeps selector softmaxes away from saturation
    const double shrink = p.spec.kind == ParamKind::selector && p.spec.name.ends_with("w_out") ? 0.1 : 1.0;
    for (auto& v : p.array.mutable_values()) v = static_cast<T>(gain ? 1.0 + u(rng) : shrink * u(rng));
  }
}

struct RoutedGradCheck {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t on_path_params = 0;
  std::size_t off_path_params = 0;
  bool off_path_exactly_zero = true;
  bool tricks_exactly_one = true;
  std::string worst;
};

inline bool on_path(const ParamSpec& spec, std::span<const RouteRecord> routes, std::size_t h) {
  if (spec.kind != ParamKind::node && spec.kind != ParamKind::selector) return true;
  for (const auto& r : routes) {
    const std::size_t depth = spec.kind == ParamKind::node ? h + 1 : h;
    for (std::size_t t = 0; t < depth; ++t)
      if (r.nodes[t] == spec.owner) return true;
  }
  return false;
}

// Analytic gradients from the batched routed forward against the five-point
// central difference of frozen_route_loss, over every parameter a route
// touches. The fourth-order stencil allows a step large enough to keep
// rounding noise far below the smallest gradients.
inline RoutedGradCheck routed_grad_check(TreeCoderModel<double>& model, const TokenBatch& tokens,
                                         std::span<const std::int32_t> targets, double step) {
  RoutedGradCheck res;
  model.zero_grad();
  ForwardOutput<double> fwd;
  {
    Tape<double> tape;
    Tape<double>::Scope scope(&tape);
    fwd = forward(model, tokens);
    tape.backward(cross_entropy(fwd.logits, targets, kPadId));
  }
  for (const auto& g : fwd.grad_tricks)
    for (double v : g.values()) res.tricks_exactly_one &= v == 1.0;
  for (const auto& r : fwd.routes)
    for (double v : r.grad_trick) res.tricks_exactly_one &= v == 1.0;

  NoGradScope<double> no_grad;
  const double base = frozen_route_loss(model, tokens, targets, fwd.routes).item();
  const double routed = cross_entropy(forward(model, tokens).logits, targets, kPadId).item();
  if (std::abs(base - routed) > 1e-12 * std::max(1.0, std::abs(routed)))
    throw NumericError("frozen-route loss does not reproduce the routed loss");

  for (auto& p : model.params) {
    if (!on_path(p.spec, fwd.routes, model.config.h)) {
      ++res.off_path_params;
      for (double g : p.array.grad()) res.off_path_exactly_zero &= g == 0.0;
      continue;
    }
    ++res.on_path_params;
    auto values = p.array.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      auto at = [&](double offset) {
        values[i] = orig + offset;
        return frozen_route_loss(model, tokens, targets, fwd.routes).item();
      };
      const double near = at(step) - at(-step);
      const double far = at(2 * step) - at(-2 * step);
      values[i] = orig;
      const double numeric = (8 * near - far) / (12 * step);
      const double analytic = p.array.grad().empty() ? 0.0 : p.array.grad()[i];
      const double err = relative_error(analytic, numeric);
      ++res.coordinates;
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst = p.spec.name + "[" + std::to_string(i) + "] analytic " + std::to_string(analytic) +
                    " numeric " + std::to_string(numeric);
      }
    }
  }
  return res;
}

// Two sub-languages over disjoint alphabets with their own bigram rules:
// lowercase a..l and uppercase M..X. Each line is drawn from one language,
// each next letter is one of two successors fixed per letter.
inline std::string two_language_corpus(std::size_t lines, std::size_t line_len, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5);
  std::bernoulli_distribution favour(0.8);
  const std::string alpha[2] = {"abcdefghijkl", "MNOPQRSTUVWX"};
  std::string out;
  for (std::size_t i = 0; i < lines; ++i) {
    const int lang = coin(rng) ? 1 : 0;
    const auto& a = alpha[lang];
    std::size_t cur = std::uniform_int_distribution<std::size_t>(0, a.size() - 1)(rng);
    for (std::size_t t = 0; t < line_len; ++t) {
      out.push_back(a[cur]);
      // successor sets differ per language: +1/+5 for the first, +3/+7 for the second
      const std::size_t step = lang == 0 ? (favour(rng) ? 1 : 5) : (favour(rng) ? 3 : 7);
      cur = (cur + step) % a.size();
    }
    out.push_back('\n');
  }
  return out;
}

inline TreeConfig tiny_config(std::size_t k, std::size_t h, std::size_t dec) {
  TreeConfig c;
  c.k = k;
  c.h = h;
  c.dec = dec;
  c.d_model = 16;
  c.n_heads = 2;
  c.context_len = 8;
  c.vocab_size = 32;
  c.selector_hidden_mult = 8;
  c.dropout = 0.0;
  return c;
}

}  // namespace treecoder::testing
