#pragma once

// Decoder building blocks: RMSNorm pre-normalization, SwiGLU feed-forward,
// causal multi-head attention, learned absolute positions, untied head.

#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "treecoder/autodiff.hpp"

namespace treecoder {

template <class T>
struct LayerParams {
  Array<T> wq, wk, wv, wo;        // d×d
  Array<T> w_gate, w_up;          // d×f
  Array<T> w_down;                // f×d
  Array<T> norm1, norm2;          // d
};

template <class T>
struct EmbeddingParams {
  Array<T> tokens;      // V×d
  Array<T> positions;   // L_max×d
  Array<T> final_norm;  // d
  Array<T> head;        // d×V
};

struct BlockOptions {
  std::size_t n_heads = 1;
  double dropout = 0.0;
  double rms_eps = 1e-5;
  bool train = false;
  Rng* rng = nullptr;
};

inline constexpr double kAttentionMaskValue = -1e9;

// y = x / sqrt(mean(x²) + eps) ⊙ gain over the last axis.
template <class T>
Array<T> rms_norm(const Array<T>& x, const Array<T>& gain, double eps) {
  const std::size_t d = x.shape().back();
  if (gain.size() != d) {
    throw DimensionError("rms_norm: gain " + to_string(gain.shape()) + " for input " +
                         to_string(x.shape()));
  }
  const std::size_t rows = x.size() / d;
  auto inv = std::make_shared<std::vector<T>>(rows);
  auto xv = x.values();
  auto gv = gain.values();
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    T ms = T(0);
    for (std::size_t j = 0; j < d; ++j) ms += row[j] * row[j];
    ms /= static_cast<T>(d);
    T s = T(1) / std::sqrt(ms + static_cast<T>(eps));
    (*inv)[r] = s;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = row[j] * s * gv[j];
  }
  return custom_op<T>(
      x.shape(), std::move(out), {x, gain},
      [inv, rows, d](const ArrayData<T>& o, std::span<ArrayData<T>* const> in) {
        const auto& xv = in[0]->value;
        const auto& gv = in[1]->value;
        const auto& dy = o.grad;
        if (in[0]->requires_grad) {
          auto& gx = in[0]->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r) {
            const T s = (*inv)[r];
            T dot = T(0);
            for (std::size_t j = 0; j < d; ++j) dot += gv[j] * dy[r * d + j] * xv[r * d + j];
            const T c = s * s * s * dot / static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j)
              gx[r * d + j] += s * gv[j] * dy[r * d + j] - c * xv[r * d + j];
          }
        }
        if (in[1]->requires_grad) {
          auto& gg = in[1]->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j)
              gg[j] += dy[r * d + j] * xv[r * d + j] * (*inv)[r];
        }
      });
}

// (silu(x·W_gate) ⊙ (x·W_up)) · W_down
template <class T>
Array<T> swiglu_ffn(const Array<T>& x, const Array<T>& w_gate, const Array<T>& w_up,
                    const Array<T>& w_down) {
  auto gate = silu(matmul(x, w_gate));
  auto up = matmul(x, w_up);
  return matmul(mul(gate, up), w_down);
}

template <class T>
Array<T> causal_attention(const Array<T>& x, const LayerParams<T>& p, const BlockOptions& opt) {
  if (x.rank() != 3) throw DimensionError("attention expects [B×L×d], got " + to_string(x.shape()));
  const std::size_t B = x.dim(0), L = x.dim(1), d = x.dim(2);
  const std::size_t H = opt.n_heads;
  if (H == 0 || d % H != 0) {
    throw ConfigError("embedding size " + std::to_string(d) + " not divisible by " +
                      std::to_string(H) + " heads");
  }
  const std::size_t dh = d / H;
  auto heads = [&](const Array<T>& t) { return permute(reshape(t, {B, L, H, dh}), {0, 2, 1, 3}); };
  auto q = heads(matmul(x, p.wq));
  auto k = heads(matmul(x, p.wk));
  auto v = heads(matmul(x, p.wv));
  auto scores = scale(matmul(q, transpose(k)), static_cast<T>(1.0 / std::sqrt(double(dh))));
  std::vector<std::uint8_t> future(L * L, 0);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = i + 1; j < L; ++j) future[i * L + j] = 1;
  scores = masked_fill(scores, std::span<const std::uint8_t>(future), Shape{L, L},
                       static_cast<T>(kAttentionMaskValue));
  auto weights = dropout(softmax(scores, -1), opt.dropout, opt.train, opt.rng);
  auto ctx = permute(matmul(weights, v), {0, 2, 1, 3});
  return matmul(reshape(ctx, {B, L, d}), p.wo);
}

// Pre-norm residual block:
//   h = x + dropout(attn(rms_norm(x)))
//   y = h + dropout(ffn(rms_norm(h)))
template <class T>
Array<T> decoder_layer(const Array<T>& x, const LayerParams<T>& p, const BlockOptions& opt) {
  auto a = causal_attention(rms_norm(x, p.norm1, opt.rms_eps), p, opt);
  auto h = add(x, dropout(a, opt.dropout, opt.train, opt.rng));
  auto f = swiglu_ffn(rms_norm(h, p.norm2, opt.rms_eps), p.w_gate, p.w_up, p.w_down);
  return add(h, dropout(f, opt.dropout, opt.train, opt.rng));
}

// Token rows plus positional rows, then dropout. `tokens` is row-major [B×L].
template <class T>
Array<T> embed(std::span<const std::int32_t> tokens, std::size_t batch, std::size_t len,
               const EmbeddingParams<T>& emb, const BlockOptions& opt) {
  const std::size_t V = emb.tokens.dim(0);
  const std::size_t max_len = emb.positions.dim(0);
  if (len > max_len) {
    throw InputError("sequence length " + std::to_string(len) + " exceeds context length " +
                     std::to_string(max_len));
  }
  for (auto id : tokens) {
    if (id < 0 || static_cast<std::size_t>(id) >= V) {
      throw InputError("token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(V));
    }
  }
  auto tok = gather_rows(emb.tokens, tokens, {batch, len});
  std::vector<std::int32_t> pos(len);
  for (std::size_t i = 0; i < len; ++i) pos[i] = static_cast<std::int32_t>(i);
  auto positions = gather_rows(emb.positions, std::span<const std::int32_t>(pos), {len});
  return dropout(add(tok, positions), opt.dropout, opt.train, opt.rng);
}

template <class T>
Array<T> output_head(const Array<T>& x, const EmbeddingParams<T>& emb, double rms_eps) {
  return matmul(rms_norm(x, emb.final_norm, rms_eps), emb.head);
}

}  // namespace treecoder
