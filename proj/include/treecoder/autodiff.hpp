#pragma once

// Dense n-dimensional arrays with a reverse-mode gradient tape.
//
// Arrays are reference-counted handles. Operations executed while a Tape is
// active (see Tape::Scope) are recorded when at least one input requires a
// gradient; without an active tape they compute values only. Backward walks
// the record in exact reverse order. Leaf gradients accumulate across calls
// until zero_grad(); intermediate gradients are reset at the start of every
// backward pass.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "treecoder/errors.hpp"

namespace treecoder {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <class T>
struct ArrayData {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something is accumulated into it
  bool requires_grad = false;
  bool touched = false;  // received gradient since the last zero_grad()
  std::uint64_t tape_id = 0;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    touched = true;
    return grad;
  }
};

template <class T>
class Array {
 public:
  Array() = default;
  explicit Array(std::shared_ptr<ArrayData<T>> data) : data_(std::move(data)) {}

  static Array from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (numel(shape) != values.size()) {
      throw DimensionError("shape " + to_string(shape) + " does not hold " +
                           std::to_string(values.size()) + " values");
    }
    for (auto d : shape) {
      if (d == 0) throw DimensionError("zero-sized dimension in " + to_string(shape));
    }
    auto data = std::make_shared<ArrayData<T>>();
    data->shape = std::move(shape);
    data->value = std::move(values);
    data->requires_grad = requires_grad;
    return Array(std::move(data));
  }
  static Array full(Shape shape, T v, bool requires_grad = false) {
    auto n = numel(shape);
    return from(std::move(shape), std::vector<T>(n, v), requires_grad);
  }
  static Array zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }
  static Array scalar(T v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const { return data_->shape; }
  std::size_t rank() const { return data_->shape.size(); }
  std::size_t dim(std::size_t i) const { return data_->shape.at(i); }
  std::size_t size() const { return data_->value.size(); }

  std::span<const T> values() const { return data_->value; }
  std::span<T> mutable_values() { return data_->value; }
  T item() const {
    if (size() != 1) throw DimensionError("item() on array of shape " + to_string(shape()));
    return data_->value[0];
  }
  T at(std::size_t i) const { return data_->value.at(i); }

  bool requires_grad() const { return data_->requires_grad; }
  bool has_grad() const { return !data_->grad.empty(); }
  bool touched() const { return data_->touched; }
  std::span<const T> grad() const { return data_->grad; }
  std::span<T> mutable_grad() { return data_->grad; }
  void zero_grad() {
    data_->grad.clear();
    data_->touched = false;
  }
  std::uint64_t tape_id() const { return data_->tape_id; }

  ArrayData<T>* data() const { return data_.get(); }
  const std::shared_ptr<ArrayData<T>>& shared() const { return data_; }

  // Deep copy of the values into a fresh leaf.
  Array clone(bool requires_grad) const {
    return from(shape(), data_->value, requires_grad);
  }

 private:
  std::shared_ptr<ArrayData<T>> data_;
};

template <class T>
using BackwardFn =
    std::function<void(const ArrayData<T>& out, std::span<ArrayData<T>* const> inputs)>;

namespace detail {
inline std::uint64_t next_tape_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}
}  // namespace detail

template <class T>
class Tape;

template <class T>
inline thread_local Tape<T>* active_tape = nullptr;

template <class T>
class Tape {
 public:
  Tape() : id_(detail::next_tape_id()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Makes a tape (or nullptr, for value-only evaluation) the active one for
  // the current thread until the guard goes out of scope.
  class Scope {
   public:
    explicit Scope(Tape* tape) : previous_(active_tape<T>) { active_tape<T> = tape; }
    ~Scope() { active_tape<T> = previous_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return records_.size(); }

  void record(const Array<T>& output, std::vector<Array<T>> inputs, BackwardFn<T> fn) {
    Record r;
    r.output = output.shared();
    r.inputs.reserve(inputs.size());
    r.raw.reserve(inputs.size());
    for (auto& in : inputs) {
      r.raw.push_back(in.data());
      r.inputs.push_back(in.shared());
    }
    r.backward = std::move(fn);
    output.data()->tape_id = id_;
    records_.push_back(std::move(r));
  }

  void backward(const Array<T>& loss) {
    if (!loss.defined() || loss.size() != 1) {
      throw DimensionError("backward requires a scalar loss, got " +
                           (loss.defined() ? to_string(loss.shape()) : std::string("undefined")));
    }
    if (loss.tape_id() != id_) {
      throw Error("backward: loss was not recorded on this tape");
    }
    for (auto& r : records_) {
      r.output->grad.clear();
      r.output->touched = false;
    }
    loss.data()->grad_buffer()[0] = T(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (it->output->grad.empty()) continue;
      it->backward(*it->output, it->raw);
    }
  }

 private:
  struct Record {
    std::shared_ptr<ArrayData<T>> output;
    std::vector<std::shared_ptr<ArrayData<T>>> inputs;
    std::vector<ArrayData<T>*> raw;
    BackwardFn<T> backward;
  };
  std::uint64_t id_;
  std::vector<Record> records_;
};

// Value-only evaluation regardless of any enclosing tape.
template <class T>
class NoGradScope {
 public:
  NoGradScope() : scope_(nullptr) {}

 private:
  typename Tape<T>::Scope scope_;
};

template <class T>
void backward(const Array<T>& loss) {
  if (active_tape<T> == nullptr) throw Error("backward: no active tape");
  active_tape<T>->backward(loss);
}

// Builds an output array and, when any input requires a gradient and a tape is
// active, records `fn` as its backward rule.
template <class T>
Array<T> custom_op(Shape shape, std::vector<T> values, std::vector<Array<T>> inputs,
                   BackwardFn<T> fn) {
  auto out = Array<T>::from(std::move(shape), std::move(values));
  Tape<T>* tape = active_tape<T>;
  if (tape == nullptr) return out;
  bool live = std::any_of(inputs.begin(), inputs.end(),
                          [](const Array<T>& a) { return a.requires_grad(); });
  if (!live) return out;
  out.data()->requires_grad = true;
  tape->record(out, std::move(inputs), std::move(fn));
  return out;
}

namespace detail {

inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
  std::size_t n = std::max(a.size(), b.size());
  Shape out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t da = i < n - a.size() ? 1 : a[i - (n - a.size())];
    std::size_t db = i < n - b.size() ? 1 : b[i - (n - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// For every linear index of `out`, the linear index of the broadcast input.
inline std::vector<std::size_t> broadcast_index(const Shape& out, const Shape& in) {
  std::size_t n = out.size();
  std::size_t offset = n - in.size();
  std::vector<std::size_t> in_stride(n, 0);
  std::size_t s = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    in_stride[i + offset] = in[i] == 1 ? 0 : s;
    s *= in[i];
  }
  std::size_t total = numel(out);
  std::vector<std::size_t> map(total);
  std::vector<std::size_t> counter(n, 0);
  std::size_t idx = 0;
  for (std::size_t lin = 0; lin < total; ++lin) {
    map[lin] = idx;
    for (std::size_t d = n; d-- > 0;) {
      ++counter[d];
      idx += in_stride[d];
      if (counter[d] < out[d]) break;
      idx -= in_stride[d] * counter[d];
      counter[d] = 0;
    }
  }
  return map;
}

template <class T, class F, class DA, class DB>
Array<T> binary(const Array<T>& a, const Array<T>& b, F f, DA da, DB db) {
  const bool same = a.shape() == b.shape();
  Shape shape = same ? a.shape() : broadcast_shapes(a.shape(), b.shape());
  std::size_t n = numel(shape);
  auto ia = std::make_shared<std::vector<std::size_t>>();
  auto ib = std::make_shared<std::vector<std::size_t>>();
  if (!same) {
    *ia = broadcast_index(shape, a.shape());
    *ib = broadcast_index(shape, b.shape());
  }
  auto av = a.values();
  auto bv = b.values();
  std::vector<T> out(n);
  if (same) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i], bv[i]);
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[(*ia)[i]], bv[(*ib)[i]]);
  }
  return custom_op<T>(
      std::move(shape), std::move(out), {a, b},
      [same, ia, ib, da, db](const ArrayData<T>& o, std::span<ArrayData<T>* const> in) {
        const auto& g = o.grad;
        const auto& x = in[0]->value;
        const auto& y = in[1]->value;
        auto pa = [&](std::size_t i) { return same ? i : (*ia)[i]; };
        auto pb = [&](std::size_t i) { return same ? i : (*ib)[i]; };
        if (in[0]->requires_grad) {
          auto& ga = in[0]->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i)
            ga[pa(i)] += g[i] * da(x[pa(i)], y[pb(i)], o.value[i]);
        }
        if (in[1]->requires_grad) {
          auto& gb = in[1]->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i)
            gb[pb(i)] += g[i] * db(x[pa(i)], y[pb(i)], o.value[i]);
        }
      });
}

template <class T, class F, class D>
Array<T> unary(const Array<T>& a, F f, D dfdx) {
  auto av = a.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  return custom_op<T>(a.shape(), std::move(out), {a},
                      [dfdx](const ArrayData<T>& o, std::span<ArrayData<T>* const> in) {
                        if (!in[0]->requires_grad) return;
                        auto& ga = in[0]->grad_buffer();
                        for (std::size_t i = 0; i < o.grad.size(); ++i)
                          ga[i] += o.grad[i] * dfdx(in[0]->value[i], o.value[i]);
                      });
}

// C[m×n] += A[m×k] · B[k×n], all row-major.
template <class T>
void gemm_nn(const T* A, const T* B, T* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* c = C + i * n;
    const T* a = A + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T s = a[p];
      const T* b = B + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += s * b[j];
    }
  }
}

// C[k×n] += A[m×k]ᵀ · B[m×n].
template <class T>
void gemm_tn(const T* A, const T* B, T* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* a = A + i * k;
    const T* b = B + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T s = a[p];
      T* c = C + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += s * b[j];
    }
  }
}

template <class T>
void transpose_into(const T* A, T* out, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = A[i * cols + j];
}

inline std::size_t normalize_axis(long axis, std::size_t rank) {
  long r = static_cast<long>(rank);
  if (axis < -r || axis >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
  }
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

// Splits a shape around `axis` into (outer, axis, inner) extents.
inline std::tuple<std::size_t, std::size_t, std::size_t> split_axis(const Shape& s,
                                                                    std::size_t axis) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, s[axis], inner};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (numpy-style broadcasting).

template <class T>
Array<T> add(const Array<T>& a, const Array<T>& b) {
  return detail::binary(
      a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(1); });
}

template <class T>
Array<T> sub(const Array<T>& a, const Array<T>& b) {
  return detail::binary(
      a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(-1); });
}

template <class T>
Array<T> mul(const Array<T>& a, const Array<T>& b) {
  return detail::binary(
      a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
      [](T x, T, T) { return x; });
}

template <class T>
Array<T> div(const Array<T>& a, const Array<T>& b) {
  return detail::binary(
      a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
      [](T x, T y, T) { return -x / (y * y); });
}

template <class T>
Array<T> scale(const Array<T>& a, T s) {
  return detail::unary(
      a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <class T>
Array<T> sigmoid(const Array<T>& a) {
  return detail::unary(
      a, [](T x) { return T(1) / (T(1) + std::exp(-x)); }, [](T, T y) { return y * (T(1) - y); });
}

// silu(z) = z·sigmoid(z)
template <class T>
Array<T> silu(const Array<T>& a) {
  return detail::unary(
      a, [](T x) { return x / (T(1) + std::exp(-x)); },
      [](T x, T) {
        T s = T(1) / (T(1) + std::exp(-x));
        return s * (T(1) + x * (T(1) - s));
      });
}

template <class T>
Array<T> exp(const Array<T>& a) {
  return detail::unary(
      a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Array<T> log(const Array<T>& a) {
  return detail::unary(
      a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

// Same values, no gradient path back to `a`.
template <class T>
Array<T> constant_view(const Array<T>& a) {
  return Array<T>::from(a.shape(), std::vector<T>(a.values().begin(), a.values().end()));
}

// ---------------------------------------------------------------------------
// Linear algebra.

// Batched matrix product over the last two axes; leading axes broadcast.
template <class T>
Array<T> matmul(const Array<T>& a, const Array<T>& b) {
  if (a.rank() < 2 || b.rank() < 2 || a.shape()[a.rank() - 1] != b.shape()[b.rank() - 2]) {
    throw DimensionError("matmul: incompatible shapes " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
  }
  const std::size_t m = a.shape()[a.rank() - 2];
  const std::size_t k = a.shape()[a.rank() - 1];
  const std::size_t n = b.shape()[b.rank() - 1];
  Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  Shape batch;
  try {
    batch = detail::broadcast_shapes(a_batch, b_batch);
  } catch (const DimensionError&) {
    throw DimensionError("matmul: incompatible shapes " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
  }
  std::size_t nb = numel(batch);
  auto ia = std::make_shared<std::vector<std::size_t>>(
      batch.empty() ? std::vector<std::size_t>{0} : detail::broadcast_index(batch, a_batch));
  auto ib = std::make_shared<std::vector<std::size_t>>(
      batch.empty() ? std::vector<std::size_t>{0} : detail::broadcast_index(batch, b_batch));
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<T> out(nb * m * n, T(0));
  const T* A = a.values().data();
  const T* B = b.values().data();
  for (std::size_t t = 0; t < nb; ++t) {
    detail::gemm_nn(A + (*ia)[t] * m * k, B + (*ib)[t] * k * n, out.data() + t * m * n, m, k, n);
  }
  return custom_op<T>(
      std::move(out_shape), std::move(out), {a, b},
      [ia, ib, nb, m, k, n](const ArrayData<T>& o, std::span<ArrayData<T>* const> in) {
        const T* G = o.grad.data();
        if (in[0]->requires_grad) {
          auto& ga = in[0]->grad_buffer();
          std::vector<T> bt(k * n);
          for (std::size_t t = 0; t < nb; ++t) {
            detail::transpose_into(in[1]->value.data() + (*ib)[t] * k * n, bt.data(), k, n);
            detail::gemm_nn(G + t * m * n, bt.data(), ga.data() + (*ia)[t] * m * k, m, n, k);
          }
        }
        if (in[1]->requires_grad) {
          auto& gb = in[1]->grad_buffer();
          for (std::size_t t = 0; t < nb; ++t) {
            detail::gemm_tn(in[0]->value.data() + (*ia)[t] * m * k, G + t * m * n,
                            gb.data() + (*ib)[t] * k * n, m, k, n);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions.

template <class T>
Array<T> sum(const Array<T>& a) {
  T s = T(0);
  for (T v : a.values()) s += v;
  return custom_op<T>({1}, {s}, {a},
                      [](const ArrayData<T>& o, std::span<ArrayData<T>* const> in) {
                        if (!in[0]->requires_grad) return;
                        auto& g = in[0]->grad_buffer();
                        for (auto& v : g) v += o.grad[0];
                      });
}

template <class T>
Array<T> sum_axis(const Array<T>& a, long axis, bool keepdim = false) {
  std::size_t ax = detail::normalize_axis(axis, a.rank());
  auto [outer, len, inner] = detail::split_axis(a.shape(), ax);
  Shape shape = a.shape();
  if (keepdim) {
    shape[ax] = 1;
  } else {
    shape.erase(shape.begin() + static_cast<long>(ax));
    if (shape.empty()) shape = {1};
  }
  std::vector<T> out(outer * inner, T(0));
  auto v = a.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += v[(o * len + l) * inner + i];
  return custom_op<T>(std::move(shape), std::move(out), {a},
                      [outer = outer, len = len, inner = inner](
                          const ArrayData<T>& o, std::span<ArrayData<T>* const> in) {
                        if (!in[0]->requires_grad) return;
                        auto& g = in[0]->grad_buffer();
                        for (std::size_t p = 0; p < outer; ++p)
                          for (std::size_t l = 0; l < len; ++l)
                            for (std::size_t i = 0; i < inner; ++i)
                              g[(p * len + l) * inner + i] += o.grad[p * inner + i];
                      });
}

template <class T>
Array<T> mean_axis(const Array<T>& a, long axis, bool keepdim = false) {
  std::size_t ax = detail::normalize_axis(axis, a.rank());
  return scale(sum_axis(a, axis, keepdim), T(1) / static_cast<T>(a.shape()[ax]));
}

// ---------------------------------------------------------------------------
// Normalized exponentials and losses.

template <class T>
Array<T> softmax(const Array<T>& a, long axis = -1) {
  std::size_t ax = detail::normalize_axis(axis, a.rank());
  auto [outer, len, inner] = detail::split_axis(a.shape(), ax);
  auto v = a.values();
  std::vector<T> out(v.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      auto at = [&, o, i](std::size_t l) { return (o * len + l) * inner + i; };
      T mx = v[at(0)];
      for (std::size_t l = 1; l < len; ++l) mx = std::max(mx, v[at(l)]);
      T s = T(0);
      for (std::size_t l = 0; l < len; ++l) {
        out[at(l)] = std::exp(v[at(l)] - mx);
        s += out[at(l)];
      }
      for (std::size_t l = 0; l < len; ++l) out[at(l)] /= s;
    }
  }
  return custom_op<T>(a.shape(), std::move(out), {a},
                      [outer = outer, len = len, inner = inner](
                          const ArrayData<T>& o, std::span<ArrayData<T>* const> in) {
                        if (!in[0]->requires_grad) return;
                        auto& g = in[0]->grad_buffer();
                        const auto& y = o.value;
                        const auto& dy = o.grad;
                        for (std::size_t p = 0; p < outer; ++p) {
                          for (std::size_t i = 0; i < inner; ++i) {
                            T dot = T(0);
                            for (std::size_t l = 0; l < len; ++l) {
                              std::size_t idx = (p * len + l) * inner + i;
                              dot += dy[idx] * y[idx];
                            }
                            for (std::size_t l = 0; l < len; ++l) {
                              std::size_t idx = (p * len + l) * inner + i;
                              g[idx] += y[idx] * (dy[idx] - dot);
                            }
                          }
                        }
                      });
}

// Mean negative log-likelihood of `targets` under softmax(logits) over the
// last axis. Positions whose target equals `ignore_id` are skipped entirely.
template <class T>
Array<T> cross_entropy(const Array<T>& logits, std::span<const std::int32_t> targets,
                       std::int32_t ignore_id) {
  const std::size_t V = logits.shape().back();
  const std::size_t rows = logits.size() / V;
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for logits " + to_string(logits.shape()));
  }
  auto v = logits.values();
  auto probs = std::make_shared<std::vector<T>>(v.size());
  auto tgt = std::make_shared<std::vector<std::int32_t>>(targets.begin(), targets.end());
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::int32_t t = targets[r];
    if (t == ignore_id) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= V) {
      throw InputError("cross_entropy: target id " + std::to_string(t) + " outside [0," +
                       std::to_string(V) + ")");
    }
    const T* row = v.data() + r * V;
    T mx = *std::max_element(row, row + V);
    T s = T(0);
    T* p = probs->data() + r * V;
    for (std::size_t j = 0; j < V; ++j) {
      p[j] = std::exp(row[j] - mx);
      s += p[j];
    }
    for (std::size_t j = 0; j < V; ++j) p[j] /= s;
    total += static_cast<double>(std::log(s) + mx - row[t]);
    ++count;
  }
  if (count == 0) throw InputError("cross_entropy: every position is ignored; loss is empty");
  T loss = static_cast<T>(total / static_cast<double>(count));
  return custom_op<T>({1}, {loss}, {logits},
                      [probs, tgt, rows, V, count, ignore_id](
                          const ArrayData<T>& o, std::span<ArrayData<T>* const> in) {
                        if (!in[0]->requires_grad) return;
                        auto& g = in[0]->grad_buffer();
                        const T w = o.grad[0] / static_cast<T>(count);
                        for (std::size_t r = 0; r < rows; ++r) {
                          const auto t = (*tgt)[r];
                          if (t == ignore_id) continue;
                          const T* p = probs->data() + r * V;
                          T* gr = g.data() + r * V;
                          for (std::size_t j = 0; j < V; ++j) gr[j] += w * p[j];
                          gr[t] -= w;
                        }
                      });
}

// ---------------------------------------------------------------------------
// Layout.

template <class T>
Array<T> reshape(const Array<T>& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw DimensionError("reshape: " + to_string(a.shape()) + " to " + to_string(shape));
  }
  std::vector<T> out(a.values().begin(), a.values().end());
  return custom_op<T>(std::move(shape), std::move(out), {a},
                      [](const ArrayData<T>& o, std::span<ArrayData<T>* const> in) {
                        if (!in[0]->requires_grad) return;
                        auto& g = in[0]->grad_buffer();
                        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                      });
}

// out.shape[i] = a.shape[axes[i]]
template <class T>
Array<T> permute(const Array<T>& a, const std::vector<std::size_t>& axes) {
  const std::size_t r = a.rank();
  if (axes.size() != r) throw DimensionError("permute: axis count mismatch");
  std::vector<bool> seen(r, false);
  for (auto ax : axes) {
    if (ax >= r || seen[ax]) throw DimensionError("permute: invalid axis list");
    seen[ax] = true;
  }
  Shape in_stride(r);
  std::size_t s = 1;
  for (std::size_t i = r; i-- > 0;) {
    in_stride[i] = s;
    s *= a.shape()[i];
  }
  Shape shape(r);
  Shape stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    shape[i] = a.shape()[axes[i]];
    stride[i] = in_stride[axes[i]];
  }
  auto src = std::make_shared<std::vector<std::size_t>>(a.size());
  std::vector<std::size_t> counter(r, 0);
  std::size_t idx = 0;
  for (std::size_t lin = 0; lin < a.size(); ++lin) {
    (*src)[lin] = idx;
    for (std::size_t d = r; d-- > 0;) {
      ++counter[d];
      idx += stride[d];
      if (counter[d] < shape[d]) break;
      idx -= stride[d] * counter[d];
      counter[d] = 0;
    }
  }
  auto v = a.values();
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[(*src)[i]];
  return custom_op<T>(std::move(shape), std::move(out), {a},
                      [src](const ArrayData<T>& o, std::span<ArrayData<T>* const> in) {
                        if (!in[0]->requires_grad) return;
                        auto& g = in[0]->grad_buffer();
                        for (std::size_t i = 0; i < o.grad.size(); ++i) g[(*src)[i]] += o.grad[i];
                      });
}

// Swaps the last two axes.
template <class T>
Array<T> transpose(const Array<T>& a) {
  if (a.rank() < 2) throw DimensionError("transpose needs rank >= 2");
  std::vector<std::size_t> axes(a.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[a.rank() - 1], axes[a.rank() - 2]);
  return permute(a, axes);
}

// Rows of `table` [V×d] for each id; result shape is lead ++ [d].
// Backward scatter-adds into the table, so repeated ids accumulate.
template <class T>
Array<T> gather_rows(const Array<T>& table, std::span<const std::int32_t> ids, Shape lead) {
  if (table.rank() != 2) throw DimensionError("gather_rows: table must be rank 2");
  if (numel(lead) != ids.size()) throw DimensionError("gather_rows: id count/shape mismatch");
  const std::size_t V = table.dim(0), d = table.dim(1);
  auto idx = std::make_shared<std::vector<std::int32_t>>(ids.begin(), ids.end());
  std::vector<T> out(ids.size() * d);
  auto v = table.values();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= V) {
      throw InputError("id " + std::to_string(ids[i]) + " outside table of " +
                       std::to_string(V) + " rows");
    }
    std::copy_n(v.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  lead.push_back(d);
  return custom_op<T>(std::move(lead), std::move(out), {table},
                      [idx, d](const ArrayData<T>& o, std::span<ArrayData<T>* const> in) {
                        if (!in[0]->requires_grad) return;
                        auto& g = in[0]->grad_buffer();
                        for (std::size_t i = 0; i < idx->size(); ++i) {
                          T* dst = g.data() + static_cast<std::size_t>((*idx)[i]) * d;
                          const T* src = o.grad.data() + i * d;
                          for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                        }
                      });
}

// Sub-array of the given rows along axis 0.
template <class T>
Array<T> take_rows(const Array<T>& a, std::span<const std::size_t> rows) {
  const std::size_t row = a.size() / a.dim(0);
  auto idx = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
  std::vector<T> out(rows.size() * row);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= a.dim(0)) throw DimensionError("take_rows: row index out of range");
    std::copy_n(a.values().data() + rows[i] * row, row, out.data() + i * row);
  }
  Shape shape = a.shape();
  shape[0] = rows.size();
  return custom_op<T>(std::move(shape), std::move(out), {a},
                      [idx, row](const ArrayData<T>& o, std::span<ArrayData<T>* const> in) {
                        if (!in[0]->requires_grad) return;
                        auto& g = in[0]->grad_buffer();
                        for (std::size_t i = 0; i < idx->size(); ++i)
                          for (std::size_t j = 0; j < row; ++j)
                            g[(*idx)[i] * row + j] += o.grad[i * row + j];
                      });
}

// Inverse of take_rows over a partition: row r of parts[p] lands at
// positions[p][r] of a result with `total` rows. Unfilled rows are zero.
template <class T>
Array<T> scatter_rows(const std::vector<Array<T>>& parts,
                      const std::vector<std::vector<std::size_t>>& positions, std::size_t total) {
  if (parts.empty() || parts.size() != positions.size()) {
    throw DimensionError("scatter_rows: parts/positions mismatch");
  }
  Shape shape = parts.front().shape();
  const std::size_t row = parts.front().size() / shape[0];
  shape[0] = total;
  std::vector<T> out(total * row, T(0));
  for (std::size_t p = 0; p < parts.size(); ++p) {
    if (parts[p].size() / parts[p].dim(0) != row || positions[p].size() != parts[p].dim(0)) {
      throw DimensionError("scatter_rows: inconsistent part " + to_string(parts[p].shape()));
    }
    for (std::size_t r = 0; r < positions[p].size(); ++r) {
      if (positions[p][r] >= total) throw DimensionError("scatter_rows: position out of range");
      std::copy_n(parts[p].values().data() + r * row, row, out.data() + positions[p][r] * row);
    }
  }
  auto pos = std::make_shared<std::vector<std::vector<std::size_t>>>(positions);
  return custom_op<T>(std::move(shape), std::move(out), parts,
                      [pos, row](const ArrayData<T>& o, std::span<ArrayData<T>* const> in) {
                        for (std::size_t p = 0; p < in.size(); ++p) {
                          if (!in[p]->requires_grad) continue;
                          auto& g = in[p]->grad_buffer();
                          const auto& where = (*pos)[p];
                          for (std::size_t r = 0; r < where.size(); ++r)
                            for (std::size_t j = 0; j < row; ++j)
                              g[r * row + j] += o.grad[where[r] * row + j];
                        }
                      });
}

// out[r] = a[r, index[r]] over the last axis; result drops that axis.
template <class T>
Array<T> pick_last(const Array<T>& a, std::span<const std::size_t> index) {
  const std::size_t k = a.shape().back();
  const std::size_t rows = a.size() / k;
  if (index.size() != rows) throw DimensionError("pick_last: index count mismatch");
  auto idx = std::make_shared<std::vector<std::size_t>>(index.begin(), index.end());
  std::vector<T> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (index[r] >= k) throw DimensionError("pick_last: index out of range");
    out[r] = a.values()[r * k + index[r]];
  }
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  if (shape.empty()) shape = {1};
  return custom_op<T>(std::move(shape), std::move(out), {a},
                      [idx, k](const ArrayData<T>& o, std::span<ArrayData<T>* const> in) {
                        if (!in[0]->requires_grad) return;
                        auto& g = in[0]->grad_buffer();
                        for (std::size_t r = 0; r < idx->size(); ++r) g[r * k + (*idx)[r]] += o.grad[r];
                      });
}

// Replaces entries where `mask` is set with `fill`. The mask covers the
// trailing dimensions of `a` given by mask_shape and repeats over the rest.
template <class T>
Array<T> masked_fill(const Array<T>& a, std::span<const std::uint8_t> mask, const Shape& mask_shape,
                     T fill) {
  const std::size_t m = numel(mask_shape);
  if (mask.size() != m || mask_shape.size() > a.rank() ||
      !std::equal(mask_shape.begin(), mask_shape.end(), a.shape().end() - mask_shape.size())) {
    throw DimensionError("masked_fill: mask " + to_string(mask_shape) + " does not match " +
                         to_string(a.shape()));
  }
  auto keep = std::make_shared<std::vector<std::uint8_t>>(mask.begin(), mask.end());
  std::vector<T> out(a.values().begin(), a.values().end());
  for (std::size_t i = 0; i < out.size(); ++i)
    if (mask[i % m]) out[i] = fill;
  return custom_op<T>(a.shape(), std::move(out), {a},
                      [keep, m](const ArrayData<T>& o, std::span<ArrayData<T>* const> in) {
                        if (!in[0]->requires_grad) return;
                        auto& g = in[0]->grad_buffer();
                        for (std::size_t i = 0; i < g.size(); ++i)
                          if (!(*keep)[i % m]) g[i] += o.grad[i];
                      });
}

// Inverted dropout: identity when not training, otherwise zeroes each entry
// with probability `rate` and scales survivors by 1/(1-rate).
template <class T>
Array<T> dropout(const Array<T>& a, double rate, bool train, Rng* rng) {
  if (!train || rate <= 0.0) return a;
  if (rate >= 1.0) throw ConfigError("dropout rate must be below 1");
  if (rng == nullptr) throw ConfigError("dropout in training mode needs a random generator");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  auto factor = std::make_shared<std::vector<T>>(a.size());
  std::vector<T> out(a.size());
  auto v = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*factor)[i] = u(*rng) < rate ? T(0) : keep_scale;
    out[i] = v[i] * (*factor)[i];
  }
  return custom_op<T>(a.shape(), std::move(out), {a},
                      [factor](const ArrayData<T>& o, std::span<ArrayData<T>* const> in) {
                        if (!in[0]->requires_grad) return;
                        auto& g = in[0]->grad_buffer();
                        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * (*factor)[i];
                      });
}

}  // namespace treecoder
