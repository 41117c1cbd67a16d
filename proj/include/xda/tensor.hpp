// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <utility>
#include <vector>

#include "xda/common.hpp"

namespace xda {

template <typename T>
class TapeT;

namespace detail {

// Per-parameter gradient slot, shared by every view of the parameter.
template <typename T>
struct GradCell {
  uint64_t tape_id = 0;
  int node = -1;
  std::vector<T> grad;
  bool has_grad = false;
};

// C[m,n] += A[m,k] * B[k,n].
// Every output element accumulates with an fma chain that ascends over the
// inner dimension, so the result is bit-identical to a naive dot-product
// loop while the j loop still vectorizes.
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  constexpr int kTile = 256;
  for (int p0 = 0; p0 < k; p0 += kTile) {
    const int p1 = std::min(p0 + kTile, k);
    for (int i = 0; i < m; ++i) {
      const T* arow = a + static_cast<size_t>(i) * k;
      T* crow = c + static_cast<size_t>(i) * n;
      for (int p = p0; p < p1; ++p) {
        const T ap = arow[p];
        const T* brow = b + static_cast<size_t>(p) * n;
        for (int j = 0; j < n; ++j) crow[j] = std::fma(ap, brow[j], crow[j]);
      }
    }
  }
}

template <typename T>
void gemm(const T* a, const T* b, T* c, int m, int k, int n) {
  std::memset(c, 0, sizeof(T) * static_cast<size_t>(m) * n);
  gemm_acc(a, b, c, m, k, n);
}

template <typename T>
void transpose2d(const T* src, T* dst, int rows, int cols) {
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j)
      dst[static_cast<size_t>(j) * rows + i] = src[static_cast<size_t>(i) * cols + j];
}

}  // namespace detail

// Immutable n-d array. Optionally carries a gradient cell (trainable leaf)
// and/or a node id on the currently recording tape.
template <typename T>
class TensorT {
 public:
  TensorT() = default;

  TensorT(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)),
        data_(std::make_shared<const std::vector<T>>(std::move(data))) {
    if (data_->size() != xda::numel(shape_))
      throw ShapeError("tensor data size " + std::to_string(data_->size()) +
                       " does not match shape " + shape_str(shape_));
  }

  static TensorT zeros(const Shape& s) { return TensorT(s, std::vector<T>(xda::numel(s), T(0))); }
  static TensorT full(const Shape& s, T v) { return TensorT(s, std::vector<T>(xda::numel(s), v)); }
  static TensorT scalar(T v) { return TensorT(Shape{1}, std::vector<T>{v}); }

  // Marks this tensor as a trainable parameter (fresh gradient cell).
  TensorT& requires_grad() {
    cell_ = std::make_shared<detail::GradCell<T>>();
    return *this;
  }

  bool is_param() const { return cell_ != nullptr; }

  const Shape& shape() const { return shape_; }
  int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  int rank() const { return static_cast<int>(shape_.size()); }
  size_t numel() const { return data_ ? data_->size() : 0; }

  const T* data() const { return data_->data(); }
  const std::vector<T>& values() const { return *data_; }
  std::shared_ptr<const std::vector<T>> data_ptr() const { return data_; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape_));
    return (*data_)[0];
  }

  bool has_grad() const { return cell_ && cell_->has_grad; }
  const std::vector<T>& grad() const {
    if (!has_grad()) throw ContractError("grad() before backward");
    return cell_->grad;
  }
  void clear_grad() {
    if (cell_) {
      cell_->has_grad = false;
      cell_->grad.clear();
    }
  }

  // Same cell and shape, new values. How the optimizer writes a step.
  TensorT with_data(std::vector<T> data) const {
    TensorT out(shape_, std::move(data));
    out.cell_ = cell_;
    return out;
  }

  // Deep copy with an independent gradient cell.
  TensorT clone() const {
    TensorT out(shape_, *data_);
    if (cell_) out.cell_ = std::make_shared<detail::GradCell<T>>();
    return out;
  }

  // Shares data and tape identity; only the shape differs.
  TensorT reshaped(const Shape& s) const {
    if (xda::numel(s) != numel())
      throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(s));
    TensorT out = *this;
    out.shape_ = s;
    return out;
  }

 private:
  Shape shape_;
  std::shared_ptr<const std::vector<T>> data_;
  std::shared_ptr<detail::GradCell<T>> cell_;
  uint64_t tape_id_ = 0;
  int node_ = -1;

  friend class TapeT<T>;
};

// Reverse-mode tape. One live tape per thread; one backward() per tape.
template <typename T>
class TapeT {
 public:
  using BackFn = std::function<void(TapeT&, const std::vector<T>&)>;

  TapeT() : id_(next_id()++) {
    if (current_slot() != nullptr) throw ContractError("nested tapes are not supported");
    current_slot() = this;
  }
  ~TapeT() {
    current_slot() = nullptr;
    for (auto& c : leaves_)
      if (c->tape_id == id_) c->node = -1;
  }
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  static TapeT* current() { return current_slot(); }

  // Total tapes ever constructed on this process; lets tests assert that a
  // code path performed no gradient recording.
  static uint64_t tapes_created() { return next_id().load(); }

  // Node id of t on this tape; registers parameter leaves on first use.
  // Returns -1 for plain constants.
  int node_of(const TensorT<T>& t) {
    if (t.tape_id_ == id_ && t.node_ >= 0) return t.node_;
    if (t.cell_) {
      auto& c = *t.cell_;
      if (c.tape_id == id_ && c.node >= 0) return c.node;
      c.tape_id = id_;
      c.node = add_node(t.numel(), {}, nullptr);
      leaves_.push_back(t.cell_);
      return c.node;
    }
    return -1;
  }

  void record(TensorT<T>& out, std::vector<int> inputs, BackFn fn) {
    out.node_ = add_node(out.numel(), std::move(inputs), std::move(fn));
    out.tape_id_ = id_;
  }

  // Gradient accumulator for a node, zero-initialized on first touch.
  std::vector<T>& grad_buffer(int node) {
    auto& g = grads_[static_cast<size_t>(node)];
    if (g.empty()) g.assign(nodes_[static_cast<size_t>(node)].numel, T(0));
    return g;
  }

  void backward(const TensorT<T>& loss) {
    if (used_) throw ContractError("backward() called twice on one tape");
    int root = -1;
    if (loss.tape_id_ == id_ && loss.node_ >= 0) root = loss.node_;
    else if (loss.cell_ && loss.cell_->tape_id == id_ && loss.cell_->node >= 0) root = loss.cell_->node;
    if (root < 0) throw ContractError("backward target is not on this tape");
    if (nodes_[static_cast<size_t>(root)].numel != 1)
      throw ContractError("backward target must be a scalar");
    used_ = true;

    grads_.assign(nodes_.size(), {});
    grads_[static_cast<size_t>(root)] = {T(1)};
    for (int i = root; i >= 0; --i) {
      auto& node = nodes_[static_cast<size_t>(i)];
      if (!grads_[static_cast<size_t>(i)].empty() && node.back)
        node.back(*this, grads_[static_cast<size_t>(i)]);
    }
    for (auto& c : leaves_) {
      if (c->tape_id != id_ || c->node < 0) continue;
      auto& g = grads_[static_cast<size_t>(c->node)];
      if (g.empty())
        c->grad.assign(nodes_[static_cast<size_t>(c->node)].numel, T(0));
      else
        c->grad = std::move(g);
      c->has_grad = true;
    }
    grads_.clear();
  }

  size_t num_nodes() const { return nodes_.size(); }
  const std::vector<int>& node_inputs(int i) const { return nodes_[static_cast<size_t>(i)].inputs; }

 private:
  struct Node {
    size_t numel;
    std::vector<int> inputs;
    BackFn back;
  };

  int add_node(size_t numel, std::vector<int> inputs, BackFn fn) {
    nodes_.push_back(Node{numel, std::move(inputs), std::move(fn)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  static TapeT*& current_slot() {
    thread_local TapeT* t = nullptr;
    return t;
  }
  static std::atomic<uint64_t>& next_id() {
    static std::atomic<uint64_t> id{1};
    return id;
  }

  uint64_t id_;
  bool used_ = false;
  std::vector<Node> nodes_;
  std::vector<std::vector<T>> grads_;
  std::vector<std::shared_ptr<detail::GradCell<T>>> leaves_;
};

template <typename T>
void check_finite(const TensorT<T>& t, const char* what) {
  for (size_t i = 0; i < t.numel(); ++i)
    if (!std::isfinite(t.data()[i]))
      throw NumericError(std::string(what) + ": non-finite value at index " + std::to_string(i));
}

// ---- ops ----

namespace detail {

template <typename T>
bool same_shape(const TensorT<T>& a, const TensorT<T>& b) {
  return a.shape() == b.shape();
}

}  // namespace detail

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  if (!detail::same_shape(a, b))
    throw ShapeError("add " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  TensorT<T> r(a.shape(), std::move(out));
  if (auto* tp = TapeT<T>::current()) {
    int na = tp->node_of(a), nb = tp->node_of(b);
    if (na >= 0 || nb >= 0) {
      tp->record(r, {na, nb}, [na, nb](TapeT<T>& t, const std::vector<T>& g) {
        if (na >= 0) {
          auto& da = t.grad_buffer(na);
          for (size_t i = 0; i < g.size(); ++i) da[i] += g[i];
        }
        if (nb >= 0) {
          auto& db = t.grad_buffer(nb);
          for (size_t i = 0; i < g.size(); ++i) db[i] += g[i];
        }
      });
    }
  }
  return r;
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  if (!detail::same_shape(a, b))
    throw ShapeError("sub " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  TensorT<T> r(a.shape(), std::move(out));
  if (auto* tp = TapeT<T>::current()) {
    int na = tp->node_of(a), nb = tp->node_of(b);
    if (na >= 0 || nb >= 0) {
      tp->record(r, {na, nb}, [na, nb](TapeT<T>& t, const std::vector<T>& g) {
        if (na >= 0) {
          auto& da = t.grad_buffer(na);
          for (size_t i = 0; i < g.size(); ++i) da[i] += g[i];
        }
        if (nb >= 0) {
          auto& db = t.grad_buffer(nb);
          for (size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
        }
      });
    }
  }
  return r;
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  if (!detail::same_shape(a, b))
    throw ShapeError("mul " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  TensorT<T> r(a.shape(), std::move(out));
  if (auto* tp = TapeT<T>::current()) {
    int na = tp->node_of(a), nb = tp->node_of(b);
    if (na >= 0 || nb >= 0) {
      auto pa = a.data_ptr(), pb = b.data_ptr();
      tp->record(r, {na, nb}, [na, nb, pa, pb](TapeT<T>& t, const std::vector<T>& g) {
        if (na >= 0) {
          auto& da = t.grad_buffer(na);
          for (size_t i = 0; i < g.size(); ++i) da[i] += g[i] * (*pb)[i];
        }
        if (nb >= 0) {
          auto& db = t.grad_buffer(nb);
          for (size_t i = 0; i < g.size(); ++i) db[i] += g[i] * (*pa)[i];
        }
      });
    }
  }
  return r;
}

template <typename T>
TensorT<T> scalar_mul(const TensorT<T>& a, T c) {
  std::vector<T> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
  TensorT<T> r(a.shape(), std::move(out));
  if (auto* tp = TapeT<T>::current()) {
    int na = tp->node_of(a);
    if (na >= 0) {
      tp->record(r, {na}, [na, c](TapeT<T>& t, const std::vector<T>& g) {
        auto& da = t.grad_buffer(na);
        for (size_t i = 0; i < g.size(); ++i) da[i] += g[i] * c;
      });
    }
  }
  return r;
}

template <typename T>
TensorT<T> relu(const TensorT<T>& a) {
  std::vector<T> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > T(0) ? a.data()[i] : T(0);
  TensorT<T> r(a.shape(), std::move(out));
  if (auto* tp = TapeT<T>::current()) {
    int na = tp->node_of(a);
    if (na >= 0) {
      auto pa = a.data_ptr();
      tp->record(r, {na}, [na, pa](TapeT<T>& t, const std::vector<T>& g) {
        auto& da = t.grad_buffer(na);
        for (size_t i = 0; i < g.size(); ++i)
          if ((*pa)[i] > T(0)) da[i] += g[i];
      });
    }
  }
  return r;
}

// Natural log, elementwise. Inputs must be strictly positive.
template <typename T>
TensorT<T> log(const TensorT<T>& a) {
  std::vector<T> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) {
    if (!(a.data()[i] > T(0))) throw NumericError("log of non-positive value");
    out[i] = std::log(a.data()[i]);
  }
  TensorT<T> r(a.shape(), std::move(out));
  if (auto* tp = TapeT<T>::current()) {
    int na = tp->node_of(a);
    if (na >= 0) {
      auto pa = a.data_ptr();
      tp->record(r, {na}, [na, pa](TapeT<T>& t, const std::vector<T>& g) {
        auto& da = t.grad_buffer(na);
        for (size_t i = 0; i < g.size(); ++i) da[i] += g[i] / (*pa)[i];
      });
    }
  }
  return r;
}

template <typename T>
TensorT<T> reshape(const TensorT<T>& a, const Shape& s) {
  return a.reshaped(s);
}

template <typename T>
TensorT<T> transpose(const TensorT<T>& a) {
  if (a.rank() != 2) throw ShapeError("transpose needs a 2-d tensor, got " + shape_str(a.shape()));
  const int m = a.dim(0), n = a.dim(1);
  std::vector<T> out(a.numel());
  detail::transpose2d(a.data(), out.data(), m, n);
  TensorT<T> r(Shape{n, m}, std::move(out));
  if (auto* tp = TapeT<T>::current()) {
    int na = tp->node_of(a);
    if (na >= 0) {
      tp->record(r, {na}, [na, m, n](TapeT<T>& t, const std::vector<T>& g) {
        auto& da = t.grad_buffer(na);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < m; ++j)
            da[static_cast<size_t>(j) * n + i] += g[static_cast<size_t>(i) * m + j];
      });
    }
  }
  return r;
}

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul needs 2-d tensors, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul inner dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<T> out(static_cast<size_t>(m) * n);
  detail::gemm(a.data(), b.data(), out.data(), m, k, n);
  TensorT<T> r(Shape{m, n}, std::move(out));
  if (auto* tp = TapeT<T>::current()) {
    int na = tp->node_of(a), nb = tp->node_of(b);
    if (na >= 0 || nb >= 0) {
      auto pa = a.data_ptr(), pb = b.data_ptr();
      tp->record(r, {na, nb}, [na, nb, pa, pb, m, k, n](TapeT<T>& t, const std::vector<T>& g) {
        if (na >= 0) {
          // dA += g * B^T
          std::vector<T> bt(static_cast<size_t>(k) * n);
          detail::transpose2d(pb->data(), bt.data(), k, n);
          detail::gemm_acc(g.data(), bt.data(), t.grad_buffer(na).data(), m, n, k);
        }
        if (nb >= 0) {
          // dB += A^T * g
          std::vector<T> at(static_cast<size_t>(m) * k);
          detail::transpose2d(pa->data(), at.data(), m, k);
          detail::gemm_acc(at.data(), g.data(), t.grad_buffer(nb).data(), k, m, n);
        }
      });
    }
  }
  return r;
}

// x [N,C] + b [C], broadcast over rows.
template <typename T>
TensorT<T> add_rowwise(const TensorT<T>& x, const TensorT<T>& b) {
  if (x.rank() != 2 || b.rank() != 1 || b.dim(0) != x.dim(1))
    throw ShapeError("add_rowwise " + shape_str(x.shape()) + " vs " + shape_str(b.shape()));
  const int n = x.dim(0), c = x.dim(1);
  std::vector<T> out(x.numel());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j)
      out[static_cast<size_t>(i) * c + j] = x.data()[static_cast<size_t>(i) * c + j] + b.data()[j];
  TensorT<T> r(x.shape(), std::move(out));
  if (auto* tp = TapeT<T>::current()) {
    int nx = tp->node_of(x), nb = tp->node_of(b);
    if (nx >= 0 || nb >= 0) {
      tp->record(r, {nx, nb}, [nx, nb, n, c](TapeT<T>& t, const std::vector<T>& g) {
        if (nx >= 0) {
          auto& dx = t.grad_buffer(nx);
          for (size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
        }
        if (nb >= 0) {
          auto& db = t.grad_buffer(nb);
          for (int i = 0; i < n; ++i)
            for (int j = 0; j < c; ++j) db[j] += g[static_cast<size_t>(i) * c + j];
        }
      });
    }
  }
  return r;
}

template <typename T>
TensorT<T> concat(const std::vector<TensorT<T>>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const auto& s0 = parts[0].shape();
  const int rank = parts[0].rank();
  if (axis < 0 || axis >= rank) throw ShapeError("concat axis out of range");
  int axis_total = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank) throw ShapeError("concat rank mismatch");
    for (int d = 0; d < rank; ++d)
      if (d != axis && p.dim(d) != s0[static_cast<size_t>(d)])
        throw ShapeError("concat shape mismatch " + shape_str(p.shape()));
    axis_total += p.dim(axis);
  }
  Shape out_shape = s0;
  out_shape[static_cast<size_t>(axis)] = axis_total;
  size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= static_cast<size_t>(s0[static_cast<size_t>(d)]);
  for (int d = axis + 1; d < rank; ++d) inner *= static_cast<size_t>(s0[static_cast<size_t>(d)]);

  std::vector<T> out(numel(out_shape));
  std::vector<size_t> offsets(parts.size());
  {
    size_t col = 0;
    for (size_t pi = 0; pi < parts.size(); ++pi) {
      offsets[pi] = col;
      const size_t block = static_cast<size_t>(parts[pi].dim(axis)) * inner;
      for (size_t o = 0; o < outer; ++o)
        std::memcpy(out.data() + o * static_cast<size_t>(axis_total) * inner + col,
                    parts[pi].data() + o * block, block * sizeof(T));
      col += block;
    }
  }
  TensorT<T> r(out_shape, std::move(out));
  if (auto* tp = TapeT<T>::current()) {
    std::vector<int> nodes(parts.size());
    bool any = false;
    for (size_t i = 0; i < parts.size(); ++i) {
      nodes[i] = tp->node_of(parts[i]);
      any = any || nodes[i] >= 0;
    }
    if (any) {
      std::vector<size_t> blocks(parts.size());
      for (size_t i = 0; i < parts.size(); ++i)
        blocks[i] = static_cast<size_t>(parts[i].dim(axis)) * inner;
      const size_t row = static_cast<size_t>(axis_total) * inner;
      tp->record(r, nodes, [nodes, blocks, offsets, outer, row](TapeT<T>& t, const std::vector<T>& g) {
        for (size_t pi = 0; pi < nodes.size(); ++pi) {
          if (nodes[pi] < 0) continue;
          auto& d = t.grad_buffer(nodes[pi]);
          for (size_t o = 0; o < outer; ++o) {
            const T* src = g.data() + o * row + offsets[pi];
            T* dst = d.data() + o * blocks[pi];
            for (size_t i = 0; i < blocks[pi]; ++i) dst[i] += src[i];
          }
        }
      });
    }
  }
  return r;
}

// Contiguous slice [start, start+len) along one axis.
template <typename T>
TensorT<T> narrow(const TensorT<T>& a, int axis, int start, int len) {
  if (axis < 0 || axis >= a.rank()) throw ShapeError("narrow axis out of range");
  if (start < 0 || len <= 0 || start + len > a.dim(axis))
    throw ShapeError("narrow range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") on dim " + std::to_string(a.dim(axis)));
  size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= static_cast<size_t>(a.dim(d));
  for (int d = axis + 1; d < a.rank(); ++d) inner *= static_cast<size_t>(a.dim(d));
  const size_t full = static_cast<size_t>(a.dim(axis)) * inner;
  const size_t block = static_cast<size_t>(len) * inner;
  const size_t off = static_cast<size_t>(start) * inner;

  Shape out_shape = a.shape();
  out_shape[static_cast<size_t>(axis)] = len;
  std::vector<T> out(numel(out_shape));
  for (size_t o = 0; o < outer; ++o)
    std::memcpy(out.data() + o * block, a.data() + o * full + off, block * sizeof(T));
  TensorT<T> r(out_shape, std::move(out));
  if (auto* tp = TapeT<T>::current()) {
    int na = tp->node_of(a);
    if (na >= 0) {
      tp->record(r, {na}, [na, outer, full, off, block](TapeT<T>& t, const std::vector<T>& g) {
        auto& da = t.grad_buffer(na);
        for (size_t o = 0; o < outer; ++o) {
          const T* src = g.data() + o * block;
          T* dst = da.data() + o * full + off;
          for (size_t i = 0; i < block; ++i) dst[i] += src[i];
        }
      });
    }
  }
  return r;
}

// Rows of a at the given indices (duplicates allowed).
template <typename T>
TensorT<T> gather_rows(const TensorT<T>& a, const std::vector<int>& idx) {
  if (a.rank() < 1) throw ShapeError("gather_rows on scalar");
  if (idx.empty()) throw ContractError("gather_rows with no indices");
  size_t inner = 1;
  for (int d = 1; d < a.rank(); ++d) inner *= static_cast<size_t>(a.dim(d));
  for (int i : idx)
    if (i < 0 || i >= a.dim(0)) throw ContractError("gather_rows index out of range");
  Shape out_shape = a.shape();
  out_shape[0] = static_cast<int>(idx.size());
  std::vector<T> out(numel(out_shape));
  for (size_t r = 0; r < idx.size(); ++r)
    std::memcpy(out.data() + r * inner, a.data() + static_cast<size_t>(idx[r]) * inner,
                inner * sizeof(T));
  TensorT<T> r(out_shape, std::move(out));
  if (auto* tp = TapeT<T>::current()) {
    int na = tp->node_of(a);
    if (na >= 0) {
      tp->record(r, {na}, [na, idx, inner](TapeT<T>& t, const std::vector<T>& g) {
        auto& da = t.grad_buffer(na);
        for (size_t r2 = 0; r2 < idx.size(); ++r2) {
          const T* src = g.data() + r2 * inner;
          T* dst = da.data() + static_cast<size_t>(idx[r2]) * inner;
          for (size_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
      });
    }
  }
  return r;
}

template <typename T>
TensorT<T> sum(const TensorT<T>& a) {
  T acc = T(0);
  for (size_t i = 0; i < a.numel(); ++i) acc += a.data()[i];
  TensorT<T> r = TensorT<T>::scalar(acc);
  if (auto* tp = TapeT<T>::current()) {
    int na = tp->node_of(a);
    if (na >= 0) {
      tp->record(r, {na}, [na](TapeT<T>& t, const std::vector<T>& g) {
        auto& da = t.grad_buffer(na);
        for (size_t i = 0; i < da.size(); ++i) da[i] += g[0];
      });
    }
  }
  return r;
}

template <typename T>
TensorT<T> mean(const TensorT<T>& a) {
  if (a.numel() == 0) throw ContractError("mean of empty tensor");
  return scalar_mul(sum(a), T(1) / static_cast<T>(a.numel()));
}

// [N, ...] -> [1, ...], mean over the leading axis.
template <typename T>
TensorT<T> mean_axis0(const TensorT<T>& a) {
  if (a.rank() < 1 || a.dim(0) == 0) throw ShapeError("mean_axis0 needs a nonempty leading axis");
  const int n = a.dim(0);
  const size_t inner = a.numel() / static_cast<size_t>(n);
  std::vector<T> out(inner, T(0));
  for (int i = 0; i < n; ++i)
    for (size_t j = 0; j < inner; ++j) out[j] += a.data()[static_cast<size_t>(i) * inner + j];
  const T inv = T(1) / static_cast<T>(n);
  for (size_t j = 0; j < inner; ++j) out[j] *= inv;
  Shape out_shape = a.shape();
  out_shape[0] = 1;
  TensorT<T> r(out_shape, std::move(out));
  if (auto* tp = TapeT<T>::current()) {
    int na = tp->node_of(a);
    if (na >= 0) {
      tp->record(r, {na}, [na, n, inner, inv](TapeT<T>& t, const std::vector<T>& g) {
        auto& da = t.grad_buffer(na);
        for (int i = 0; i < n; ++i)
          for (size_t j = 0; j < inner; ++j) da[static_cast<size_t>(i) * inner + j] += g[j] * inv;
      });
    }
  }
  return r;
}

// [1, ...] -> [n, ...], repeat along the leading axis.
template <typename T>
TensorT<T> repeat_axis0(const TensorT<T>& a, int n) {
  if (a.rank() < 1 || a.dim(0) != 1) throw ShapeError("repeat_axis0 needs leading dim 1");
  if (n <= 0) throw ShapeError("repeat_axis0 count must be positive");
  const size_t inner = a.numel();
  std::vector<T> out(inner * static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) std::memcpy(out.data() + static_cast<size_t>(i) * inner, a.data(), inner * sizeof(T));
  Shape out_shape = a.shape();
  out_shape[0] = n;
  TensorT<T> r(out_shape, std::move(out));
  if (auto* tp = TapeT<T>::current()) {
    int na = tp->node_of(a);
    if (na >= 0) {
      tp->record(r, {na}, [na, n, inner](TapeT<T>& t, const std::vector<T>& g) {
        auto& da = t.grad_buffer(na);
        for (int i = 0; i < n; ++i)
          for (size_t j = 0; j < inner; ++j) da[j] += g[static_cast<size_t>(i) * inner + j];
      });
    }
  }
  return r;
}

// Rowwise softmax of a [N, K] matrix, numerically stabilized.
template <typename T>
TensorT<T> softmax_rows(const TensorT<T>& a) {
  if (a.rank() != 2) throw ShapeError("softmax_rows needs a 2-d tensor");
  const int n = a.dim(0), k = a.dim(1);
  std::vector<T> out(a.numel());
  for (int i = 0; i < n; ++i) {
    const T* row = a.data() + static_cast<size_t>(i) * k;
    T* orow = out.data() + static_cast<size_t>(i) * k;
    T mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    T denom = T(0);
    for (int j = 0; j < k; ++j) {
      orow[j] = std::exp(row[j] - mx);
      denom += orow[j];
    }
    const T inv = T(1) / denom;
    for (int j = 0; j < k; ++j) orow[j] *= inv;
  }
  TensorT<T> r(a.shape(), std::move(out));
  if (auto* tp = TapeT<T>::current()) {
    int na = tp->node_of(a);
    if (na >= 0) {
      auto py = r.data_ptr();
      tp->record(r, {na}, [na, py, n, k](TapeT<T>& t, const std::vector<T>& g) {
        auto& da = t.grad_buffer(na);
        for (int i = 0; i < n; ++i) {
          const T* y = py->data() + static_cast<size_t>(i) * k;
          const T* gr = g.data() + static_cast<size_t>(i) * k;
          T dot = T(0);
          for (int j = 0; j < k; ++j) dot += gr[j] * y[j];
          T* d = da.data() + static_cast<size_t>(i) * k;
          for (int j = 0; j < k; ++j) d[j] += (gr[j] - dot) * y[j];
        }
      });
    }
  }
  return r;
}

// Mean negative log-likelihood of integer labels under softmax(logits).
template <typename T>
TensorT<T> cross_entropy(const TensorT<T>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy needs [N,K] logits");
  const int n = logits.dim(0), k = logits.dim(1);
  if (static_cast<int>(labels.size()) != n)
    throw ContractError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                        std::to_string(n) + " rows");
  for (int y : labels)
    if (y < 0 || y >= k) throw ContractError("cross_entropy: label out of range");

  std::vector<T> probs(logits.numel());
  T loss = T(0);
  for (int i = 0; i < n; ++i) {
    const T* row = logits.data() + static_cast<size_t>(i) * k;
    T* prow = probs.data() + static_cast<size_t>(i) * k;
    T mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    T denom = T(0);
    for (int j = 0; j < k; ++j) {
      prow[j] = std::exp(row[j] - mx);
      denom += prow[j];
    }
    const T inv = T(1) / denom;
    for (int j = 0; j < k; ++j) prow[j] *= inv;
    loss -= std::log(std::max(prow[labels[static_cast<size_t>(i)]], std::numeric_limits<T>::min()));
  }
  loss /= static_cast<T>(n);
  TensorT<T> r = TensorT<T>::scalar(loss);
  if (auto* tp = TapeT<T>::current()) {
    int nl = tp->node_of(logits);
    if (nl >= 0) {
      auto pp = std::make_shared<std::vector<T>>(std::move(probs));
      tp->record(r, {nl}, [nl, pp, labels, n, k](TapeT<T>& t, const std::vector<T>& g) {
        auto& dl = t.grad_buffer(nl);
        const T scale = g[0] / static_cast<T>(n);
        for (int i = 0; i < n; ++i) {
          const T* prow = pp->data() + static_cast<size_t>(i) * k;
          T* drow = dl.data() + static_cast<size_t>(i) * k;
          for (int j = 0; j < k; ++j) drow[j] += scale * prow[j];
          drow[labels[static_cast<size_t>(i)]] -= scale;
        }
      });
    }
  }
  return r;
}

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

}  // namespace xda
