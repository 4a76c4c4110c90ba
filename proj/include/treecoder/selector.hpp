#pragma once

// Branch selection: mean-pool a node's output over the sequence, score the
// children with a gated MLP, and route each sequence to its argmax child.
// The routed activations are multiplied by p_max / constant(p_max), which is
// exactly 1 in value but carries the selector's gradient.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "treecoder/autodiff.hpp"

namespace treecoder {

template <class T>
struct SelectorParams {
  Array<T> w_gate;  // d×m
  Array<T> w_up;    // d×m
  Array<T> w_out;   // m×k
};

struct SelectorDecision {
  std::size_t child = 0;
  std::vector<double> probabilities;
};

template <class T>
struct Selection {
  std::vector<SelectorDecision> decisions;  // one per sequence
  Array<T> probabilities;                   // [G×k]
  Array<T> grad_trick;                      // [G], every value exactly 1
};

// Mean over the non-pad positions of each sequence: [B×L×d] -> [B×d].
// `pad` is row-major [B×L], nonzero marks padding.
template <class T>
Array<T> mean_pool(const Array<T>& x, std::span<const std::uint8_t> pad) {
  if (x.rank() != 3) throw DimensionError("mean_pool expects [B×L×d], got " + to_string(x.shape()));
  const std::size_t B = x.dim(0), L = x.dim(1);
  std::vector<T> w(B * L, T(0));
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t live = 0;
    for (std::size_t t = 0; t < L; ++t) live += pad.empty() || !pad[b * L + t];
    if (live == 0) throw InputError("mean_pool: sequence " + std::to_string(b) + " is all padding");
    for (std::size_t t = 0; t < L; ++t)
      if (pad.empty() || !pad[b * L + t]) w[b * L + t] = T(1) / static_cast<T>(live);
  }
  auto weights = Array<T>::from({B, L, 1}, std::move(w));
  return sum_axis(mul(x, weights), 1);
}

inline std::size_t argmax_lowest(std::span<const double> p) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < p.size(); ++i)
    if (p[i] > p[best]) best = i;
  return best;
}

// Raw selector scores, (silu(x·W_gate) ⊙ (x·W_up)) · W_out: [G×d] -> [G×k].
template <class T>
Array<T> selector_logits(const Array<T>& pooled, const SelectorParams<T>& p) {
  return matmul(mul(silu(matmul(pooled, p.w_gate)), matmul(pooled, p.w_up)), p.w_out);
}

// Decision from already-computed logits; shared by select() and tests that
// drive the routing rule directly.
template <class T>
Selection<T> select_from_logits(const Array<T>& logits) {
  for (T v : logits.values()) {
    if (!std::isfinite(static_cast<double>(v))) throw NumericError("selector produced non-finite logits");
  }
  const std::size_t k = logits.shape().back();
  const std::size_t G = logits.size() / k;
  Selection<T> out;
  out.probabilities = softmax(logits, -1);
  std::vector<std::size_t> chosen(G);
  for (std::size_t g = 0; g < G; ++g) {
    SelectorDecision d;
    d.probabilities.resize(k);
    for (std::size_t j = 0; j < k; ++j)
      d.probabilities[j] = static_cast<double>(out.probabilities.values()[g * k + j]);
    d.child = argmax_lowest(d.probabilities);
    chosen[g] = d.child;
    out.decisions.push_back(std::move(d));
  }
  auto p_max = pick_last(out.probabilities, std::span<const std::size_t>(chosen));
  out.grad_trick = div(p_max, constant_view(p_max));
  return out;
}

template <class T>
Selection<T> select(const Array<T>& pooled, const SelectorParams<T>& p) {
  return select_from_logits(selector_logits(pooled, p));
}

// Uniform child per sequence; the trick scalars are plain constants.
template <class T>
Selection<T> select_random(std::size_t k, std::size_t count, Rng& rng) {
  if (k < 2) throw ConfigError("random selection needs at least two children");
  std::uniform_int_distribution<std::size_t> pick(0, k - 1);
  Selection<T> out;
  for (std::size_t g = 0; g < count; ++g) {
    SelectorDecision d;
    d.child = pick(rng);
    d.probabilities.assign(k, 1.0 / static_cast<double>(k));
    out.decisions.push_back(std::move(d));
  }
  out.probabilities = Array<T>::full({count, k}, static_cast<T>(1.0 / static_cast<double>(k)));
  out.grad_trick = Array<T>::full({count}, T(1));
  return out;
}

}  // namespace treecoder
