// Copyright 2026 The prosodic-kws Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Reverse-mode automatic differentiation over dense row-major arrays.
//
// A Tensor is a shared handle to a Node. Operations executed while a Tape is
// active (see TapeScope) record their output node together with a backward
// rule; Tape::backward replays those rules in reverse creation order. With
// no active tape, operations build no graph and keep no references to their
// inputs, which is what evaluation code relies on for memory.

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace kws {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class RankError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // lazily allocated; empty means "no gradient yet"
  bool requires_grad = false;
  std::size_t id = kLeaf;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  static constexpr std::size_t kLeaf = std::numeric_limits<std::size_t>::max();

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<Node<T>>()) {
    node_->data.assign(kws::numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<Node<T>>()) {
    if (kws::numel(shape) != values.size()) {
      throw ShapeError("tensor " + to_string(shape) + " cannot hold " +
                       std::to_string(values.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->data = std::move(values);
  }

  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  static Tensor parameter(Shape shape, std::vector<T> values) {
    Tensor t(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  // Only meaningful for leaves (parameters, inputs); recorded results are
  // treated as immutable.
  std::span<T> mutable_data() { return node_->data; }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  bool has_grad() const { return !node_->grad.empty(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { node_->grad.clear(); }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor " + to_string(shape()));
    return node_->data[0];
  }

  T operator[](std::size_t i) const { return node_->data[i]; }

  std::size_t node_id() const { return node_->id; }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

  // Copy of the values with no gradient history.
  Tensor detach() const { return Tensor(shape(), node_->data); }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
class Tape {
 public:
  std::size_t record(const std::shared_ptr<Node<T>>& node) {
    nodes_.push_back(node);
    return nodes_.size() - 1;
  }

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and propagates. Gradients of intermediate
  // nodes are released once consumed, so repeated calls accumulate only into
  // leaves.
  void backward(const Tensor<T>& loss) {
    if (loss.rank() != 0) {
      throw RankError("backward() needs a scalar loss, got " + to_string(loss.shape()));
    }
    loss.node()->grad_buffer()[0] += T(1);
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node<T>& n = *nodes_[i];
      if (n.grad.empty()) continue;
      if (n.backward_fn) n.backward_fn(n);
      n.grad.clear();
      n.grad.shrink_to_fit();
    }
  }

 private:
  std::vector<std::shared_ptr<Node<T>>> nodes_;
};

template <typename T>
Tape<T>*& current_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}

template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(current_tape<T>()) { current_tape<T>() = &tape; }
  ~TapeScope() { current_tape<T>() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

template <typename T>
void backward(const Tensor<T>& loss) {
  Tape<T>* tape = current_tape<T>();
  if (tape == nullptr) throw std::logic_error("backward() called with no active tape");
  tape->backward(loss);
}

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;
template <typename T>
using MapM = Eigen::Map<RowMat<T>>;

// Gradient buffer of an input, or nullptr if it does not need one.
template <typename T>
T* grad_of(Node<T>& self, std::size_t i) {
  Node<T>& p = *self.parents[i];
  return p.requires_grad ? p.grad_buffer().data() : nullptr;
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(Node<T>&)> backward_fn) {
  Tensor<T> out(std::move(shape), std::move(data));
  Tape<T>* tape = current_tape<T>();
  if (tape == nullptr) return out;
  bool needs = false;
  for (const Tensor<T>* in : inputs) needs = needs || in->requires_grad();
  if (!needs) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (const Tensor<T>* in : inputs) node.parents.push_back(in->node());
  node.backward_fn = std::move(backward_fn);
  node.id = tape->record(out.node());
  return out;
}

template <typename T>
Tensor<T> make_result_n(Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& inputs,
                        std::function<void(Node<T>&)> backward_fn) {
  Tensor<T> out(std::move(shape), std::move(data));
  Tape<T>* tape = current_tape<T>();
  if (tape == nullptr) return out;
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (!needs) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (const auto& in : inputs) node.parents.push_back(in.node());
  node.backward_fn = std::move(backward_fn);
  node.id = tape->record(out.node());
  return out;
}

// Right-aligned broadcast of two shapes, each padded to rank 4.
struct Broadcast {
  Shape out;
  std::array<std::size_t, 4> extent{1, 1, 1, 1};
  std::array<std::size_t, 4> stride_a{0, 0, 0, 0};
  std::array<std::size_t, 4> stride_b{0, 0, 0, 0};
};

inline Broadcast broadcast_shapes(const Shape& a, const Shape& b) {
  if (a.size() > 4 || b.size() > 4) {
    throw ShapeError("broadcast supports rank <= 4, got " + to_string(a) + " and " + to_string(b));
  }
  const std::size_t rank = std::max(a.size(), b.size());
  Broadcast bc;
  bc.out.assign(rank, 1);
  std::array<std::size_t, 4> ea{1, 1, 1, 1}, eb{1, 1, 1, 1};
  for (std::size_t i = 0; i < a.size(); ++i) ea[4 - a.size() + i] = a[i];
  for (std::size_t i = 0; i < b.size(); ++i) eb[4 - b.size() + i] = b[i];
  std::size_t sa = 1, sb = 1;
  for (std::size_t k = 4; k-- > 0;) {
    if (ea[k] != eb[k] && ea[k] != 1 && eb[k] != 1) {
      throw ShapeError("cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
    bc.extent[k] = std::max(ea[k], eb[k]);
    bc.stride_a[k] = ea[k] == 1 ? 0 : sa;
    bc.stride_b[k] = eb[k] == 1 ? 0 : sb;
    sa *= ea[k];
    sb *= eb[k];
  }
  for (std::size_t i = 0; i < rank; ++i) bc.out[i] = bc.extent[4 - rank + i];
  return bc;
}

template <typename F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  std::size_t o = 0;
  for (std::size_t i0 = 0; i0 < bc.extent[0]; ++i0)
    for (std::size_t i1 = 0; i1 < bc.extent[1]; ++i1)
      for (std::size_t i2 = 0; i2 < bc.extent[2]; ++i2) {
        std::size_t ia = i0 * bc.stride_a[0] + i1 * bc.stride_a[1] + i2 * bc.stride_a[2];
        std::size_t ib = i0 * bc.stride_b[0] + i1 * bc.stride_b[1] + i2 * bc.stride_b[2];
        for (std::size_t i3 = 0; i3 < bc.extent[3]; ++i3, ++o) {
          f(o, ia + i3 * bc.stride_a[3], ib + i3 * bc.stride_b[3]);
        }
      }
}

enum class BinaryKind { kAdd, kSub, kMul };

template <typename T>
Tensor<T> binary(BinaryKind kind, const Tensor<T>& a, const Tensor<T>& b) {
  Broadcast bc = broadcast_shapes(a.shape(), b.shape());
  std::vector<T> out(numel(bc.out));
  auto da = a.data();
  auto db = b.data();
  switch (kind) {
    case BinaryKind::kAdd:
      for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = da[i] + db[j]; });
      break;
    case BinaryKind::kSub:
      for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = da[i] - db[j]; });
      break;
    case BinaryKind::kMul:
      for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = da[i] * db[j]; });
      break;
  }
  return make_result<T>(bc.out, std::move(out), {&a, &b}, [kind, bc](Node<T>& self) {
    const auto& g = self.grad;
    T* ga = grad_of(self, 0);
    T* gb = grad_of(self, 1);
    const auto& va = self.parents[0]->data;
    const auto& vb = self.parents[1]->data;
    for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) {
      switch (kind) {
        case BinaryKind::kAdd:
          if (ga) ga[i] += g[o];
          if (gb) gb[j] += g[o];
          break;
        case BinaryKind::kSub:
          if (ga) ga[i] += g[o];
          if (gb) gb[j] -= g[o];
          break;
        case BinaryKind::kMul:
          if (ga) ga[i] += g[o] * vb[j];
          if (gb) gb[j] += g[o] * va[i];
          break;
      }
    });
  });
}

// y = f(x) with dy/dx expressed through (x, y).
template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const Tensor<T>& x, Fwd fwd, Deriv deriv) {
  auto dx = x.data();
  std::vector<T> out(dx.size());
  for (std::size_t i = 0; i < dx.size(); ++i) out[i] = fwd(dx[i]);
  return make_result<T>(x.shape(), std::move(out), {&x}, [deriv](Node<T>& self) {
    T* gx = grad_of(self, 0);
    if (!gx) return;
    const auto& xv = self.parents[0]->data;
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += self.grad[i] * deriv(xv[i], self.data[i]);
  });
}

template <typename T>
T stable_sigmoid(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  T e = std::exp(v);
  return e / (T(1) + e);
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(detail::BinaryKind::kAdd, a, b);
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(detail::BinaryKind::kSub, a, b);
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(detail::BinaryKind::kMul, a, b);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  return detail::unary(x, [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  return detail::unary(x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return detail::stable_sigmoid(v); },
                       [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

// x * sigmoid(x)
template <typename T>
Tensor<T> swish(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v * detail::stable_sigmoid(v); },
      [](T v, T) {
        T s = detail::stable_sigmoid(v);
        return s + v * s * (T(1) - s);
      });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return v > T(0) ? v : T(0); },
                       [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

// Copy with a new shape of equal element count.
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return detail::make_result<T>(std::move(shape), std::move(out), {&x}, [](Node<T>& self) {
    if (T* gx = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> unsqueeze(const Tensor<T>& x, std::size_t axis) {
  Shape s = x.shape();
  if (axis > s.size()) throw ShapeError("unsqueeze axis out of range for " + to_string(s));
  s.insert(s.begin() + static_cast<std::ptrdiff_t>(axis), 1);
  return reshape(x, std::move(s));
}

// Batched matrix product. `b` is either rank 2 (shared across every leading
// index of `a`) or has the same leading extents as `a`.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  using namespace detail;
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul needs rank >= 2, got " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const std::size_t k = a.shape().back();
  const std::size_t m = a.shape()[a.rank() - 2];
  const std::size_t n = b.shape().back();
  if (b.shape()[b.rank() - 2] != k) {
    throw ShapeError("matmul inner extents differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  const bool shared = b.rank() == 2;
  std::size_t batch = 1;
  if (!shared) {
    if (a.rank() != b.rank() || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
      throw ShapeError("matmul batch extents differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
    }
    batch = numel(Shape(a.shape().begin(), a.shape().end() - 2));
  }
  std::vector<T> out(numel(out_shape));
  if (shared) {
    const std::size_t rows = a.numel() / k;
    MapM<T>(out.data(), rows, n).noalias() = MapC<T>(a.data().data(), rows, k) * MapC<T>(b.data().data(), k, n);
  } else {
    for (std::size_t i = 0; i < batch; ++i) {
      MapM<T>(out.data() + i * m * n, m, n).noalias() =
          MapC<T>(a.data().data() + i * m * k, m, k) * MapC<T>(b.data().data() + i * k * n, k, n);
    }
  }
  return make_result<T>(std::move(out_shape), std::move(out), {&a, &b},
                        [shared, batch, m, k, n](Node<T>& self) {
    T* ga = grad_of(self, 0);
    T* gb = grad_of(self, 1);
    const T* av = self.parents[0]->data.data();
    const T* bv = self.parents[1]->data.data();
    const T* g = self.grad.data();
    if (shared) {
      const std::size_t rows = self.parents[0]->data.size() / k;
      if (ga) MapM<T>(ga, rows, k).noalias() += MapC<T>(g, rows, n) * MapC<T>(bv, k, n).transpose();
      if (gb) MapM<T>(gb, k, n).noalias() += MapC<T>(av, rows, k).transpose() * MapC<T>(g, rows, n);
      return;
    }
    for (std::size_t i = 0; i < batch; ++i) {
      if (ga)
        MapM<T>(ga + i * m * k, m, k).noalias() +=
            MapC<T>(g + i * m * n, m, n) * MapC<T>(bv + i * k * n, k, n).transpose();
      if (gb)
        MapM<T>(gb + i * k * n, k, n).noalias() +=
            MapC<T>(av + i * m * k, m, k).transpose() * MapC<T>(g + i * m * n, m, n);
    }
  });
}

// x·W + bias over the last axis; W is [in, out], bias is [out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  return add(matmul(x, weight), bias);
}

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("transpose needs rank >= 2, got " + to_string(x.shape()));
  const std::size_t r = x.dim(x.rank() - 2), c = x.dim(x.rank() - 1);
  const std::size_t batch = x.numel() / (r * c);
  Shape s = x.shape();
  std::swap(s[s.size() - 2], s[s.size() - 1]);
  std::vector<T> out(x.numel());
  auto xv = x.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = xv[b * r * c + i * c + j];
  return detail::make_result<T>(std::move(s), std::move(out), {&x}, [batch, r, c](Node<T>& self) {
    T* gx = detail::grad_of(self, 0);
    if (!gx) return;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gx[b * r * c + i * c + j] += self.grad[b * r * c + j * r + i];
  });
}

namespace detail {
template <typename T>
void require_finite(std::span<const T> v, const char* what) {
  for (T x : v)
    if (!std::isfinite(x)) throw NumericError(std::string(what) + ": non-finite input");
}
}  // namespace detail

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  if (x.rank() == 0 || x.shape().back() == 0) throw ShapeError("softmax needs a last extent >= 1");
  detail::require_finite(x.data(), "softmax_lastdim");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  auto xv = x.data();
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * n;
    T* o = out.data() + r * n;
    T mx = *std::max_element(in, in + n);
    T sum = 0;
    for (std::size_t i = 0; i < n; ++i) sum += (o[i] = std::exp(in[i] - mx));
    for (std::size_t i = 0; i < n; ++i) o[i] /= sum;
  }
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, [rows, n](Node<T>& self) {
    T* gx = detail::grad_of(self, 0);
    if (!gx) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.data.data() + r * n;
      const T* g = self.grad.data() + r * n;
      T dot = 0;
      for (std::size_t i = 0; i < n; ++i) dot += g[i] * y[i];
      for (std::size_t i = 0; i < n; ++i) gx[r * n + i] += y[i] * (g[i] - dot);
    }
  });
}

template <typename T>
Tensor<T> log_softmax_lastdim(const Tensor<T>& x) {
  if (x.rank() == 0 || x.shape().back() == 0) throw ShapeError("log_softmax needs a last extent >= 1");
  detail::require_finite(x.data(), "log_softmax_lastdim");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  auto xv = x.data();
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * n;
    T mx = *std::max_element(in, in + n);
    T sum = 0;
    for (std::size_t i = 0; i < n; ++i) sum += std::exp(in[i] - mx);
    const T lse = mx + std::log(sum);
    for (std::size_t i = 0; i < n; ++i) out[r * n + i] = in[i] - lse;
  }
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, [rows, n](Node<T>& self) {
    T* gx = detail::grad_of(self, 0);
    if (!gx) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.data.data() + r * n;
      const T* g = self.grad.data() + r * n;
      T gsum = 0;
      for (std::size_t i = 0; i < n; ++i) gsum += g[i];
      for (std::size_t i = 0; i < n; ++i) gx[r * n + i] += g[i] - std::exp(y[i]) * gsum;
    }
  });
}

// Normalizes each last-axis slice to zero mean / unit variance, then applies
// gain and bias. A constant slice normalizes to exactly zero.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
  const std::size_t d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d) {
    throw ShapeError("layernorm parameters " + to_string(gain.shape()) + "/" + to_string(bias.shape()) +
                     " do not match feature extent of " + to_string(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  auto xv = x.data();
  auto gv = gain.data();
  auto bv = bias.data();
  std::vector<T> out(x.numel());
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * d;
    T mean = 0;
    for (std::size_t i = 0; i < d; ++i) mean += in[i];
    mean /= T(d);
    T var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (in[i] - mean) * (in[i] - mean);
    var /= T(d);
    const bool constant = std::all_of(in, in + d, [&](T v) { return v == in[0]; });
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t i = 0; i < d; ++i) {
      T h = constant ? T(0) : (in[i] - mean) * is;
      (*xhat)[r * d + i] = h;
      out[r * d + i] = h * gv[i] + bv[i];
    }
  }
  return detail::make_result<T>(x.shape(), std::move(out), {&x, &gain, &bias},
                                [rows, d, xhat, inv_std](Node<T>& self) {
    T* gx = detail::grad_of(self, 0);
    T* gg = detail::grad_of(self, 1);
    T* gb = detail::grad_of(self, 2);
    const auto& gain_v = self.parents[1]->data;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* g = self.grad.data() + r * d;
      const T* h = xhat->data() + r * d;
      T sum_dh = 0, sum_dh_h = 0;
      for (std::size_t i = 0; i < d; ++i) {
        if (gg) gg[i] += g[i] * h[i];
        if (gb) gb[i] += g[i];
        T dh = g[i] * gain_v[i];
        sum_dh += dh;
        sum_dh_h += dh * h[i];
      }
      if (!gx) continue;
      const T is = (*inv_std)[r];
      for (std::size_t i = 0; i < d; ++i) {
        T dh = g[i] * gain_v[i];
        gx[r * d + i] += is * (dh - sum_dh / T(d) - h[i] * sum_dh_h / T(d));
      }
    }
  });
}

inline std::size_t conv_output_length(std::size_t length, std::size_t kernel, std::size_t stride,
                                      std::size_t padding = 0) {
  if (length + 2 * padding < kernel) return 0;
  return (length + 2 * padding - kernel) / stride + 1;
}

// Time-major 1-D convolution. x: [B, L, Cin], kernel: [Cout, Cin, K],
// bias: [Cout] -> [B, Lout, Cout].
template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding = 0) {
  using namespace detail;
  if (x.rank() != 3 || kernel.rank() != 3) {
    throw ShapeError("conv1d expects x [B,L,C] and kernel [Cout,Cin,K], got " + to_string(x.shape()) +
                     " and " + to_string(kernel.shape()));
  }
  const std::size_t B = x.dim(0), L = x.dim(1), cin = x.dim(2);
  const std::size_t cout = kernel.dim(0), K = kernel.dim(2);
  if (kernel.dim(1) != cin || bias.numel() != cout) {
    throw ShapeError("conv1d kernel " + to_string(kernel.shape()) + " does not fit input " + to_string(x.shape()));
  }
  if (stride == 0) throw ShapeError("conv1d stride must be positive");
  const std::size_t lout = conv_output_length(L, K, stride, padding);
  if (lout == 0) throw ShapeError("conv1d input length " + std::to_string(L) + " shorter than kernel");
  const std::size_t cols_w = cin * K;
  // Column layout per output frame: index ci*K + k, matching kernel [Cout, Cin*K].
  auto cols = std::make_shared<std::vector<T>>(B * lout * cols_w, T(0));
  auto xv = x.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < lout; ++t) {
      T* row = cols->data() + (b * lout + t) * cols_w;
      for (std::size_t k = 0; k < K; ++k) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * stride + k) - static_cast<std::ptrdiff_t>(padding);
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) continue;
        const T* in = xv.data() + (b * L + static_cast<std::size_t>(src)) * cin;
        for (std::size_t c = 0; c < cin; ++c) row[c * K + k] = in[c];
      }
    }
  std::vector<T> out(B * lout * cout);
  MapM<T> om(out.data(), B * lout, cout);
  om.noalias() = MapC<T>(cols->data(), B * lout, cols_w) * MapC<T>(kernel.data().data(), cout, cols_w).transpose();
  auto bv = bias.data();
  for (std::size_t r = 0; r < B * lout; ++r)
    for (std::size_t c = 0; c < cout; ++c) out[r * cout + c] += bv[c];
  return make_result<T>(Shape{B, lout, cout}, std::move(out), {&x, &kernel, &bias},
                        [=](Node<T>& self) {
    T* gx = grad_of(self, 0);
    T* gk = grad_of(self, 1);
    T* gbias = grad_of(self, 2);
    MapC<T> g(self.grad.data(), B * lout, cout);
    if (gk) MapM<T>(gk, cout, cols_w).noalias() += g.transpose() * MapC<T>(cols->data(), B * lout, cols_w);
    if (gbias)
      for (std::size_t r = 0; r < B * lout; ++r)
        for (std::size_t c = 0; c < cout; ++c) gbias[c] += self.grad[r * cout + c];
    if (!gx) return;
    RowMat<T> dcols = g * MapC<T>(self.parents[1]->data.data(), cout, cols_w);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < lout; ++t) {
        const T* row = dcols.data() + (b * lout + t) * cols_w;
        for (std::size_t k = 0; k < K; ++k) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * stride + k) - static_cast<std::ptrdiff_t>(padding);
          if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) continue;
          T* dst = gx + (b * L + static_cast<std::size_t>(src)) * cin;
          for (std::size_t c = 0; c < cin; ++c) dst[c] += row[c * K + k];
        }
      }
  });
}

// Per-channel convolution with "same" zero padding and stride 1.
// x: [B, L, C], kernel: [C, K] with K odd, bias: [C].
template <typename T>
Tensor<T> depthwise_conv1d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias) {
  if (x.rank() != 3 || kernel.rank() != 2 || kernel.dim(0) != x.dim(2) || bias.numel() != x.dim(2)) {
    throw ShapeError("depthwise_conv1d kernel " + to_string(kernel.shape()) + " does not fit input " +
                     to_string(x.shape()));
  }
  const std::size_t B = x.dim(0), L = x.dim(1), C = x.dim(2), K = kernel.dim(1);
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(K / 2);
  auto xv = x.data();
  auto kv = kernel.data();
  auto bv = bias.data();
  std::vector<T> out(x.numel());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < L; ++t) {
      T* o = out.data() + (b * L + t) * C;
      for (std::size_t c = 0; c < C; ++c) o[c] = bv[c];
      for (std::size_t k = 0; k < K; ++k) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - pad;
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) continue;
        const T* in = xv.data() + (b * L + static_cast<std::size_t>(src)) * C;
        for (std::size_t c = 0; c < C; ++c) o[c] += kv[c * K + k] * in[c];
      }
    }
  return detail::make_result<T>(x.shape(), std::move(out), {&x, &kernel, &bias}, [=](Node<T>& self) {
    T* gx = detail::grad_of(self, 0);
    T* gk = detail::grad_of(self, 1);
    T* gb = detail::grad_of(self, 2);
    const auto& in_v = self.parents[0]->data;
    const auto& k_v = self.parents[1]->data;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < L; ++t) {
        const T* g = self.grad.data() + (b * L + t) * C;
        if (gb)
          for (std::size_t c = 0; c < C; ++c) gb[c] += g[c];
        for (std::size_t k = 0; k < K; ++k) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - pad;
          if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) continue;
          const std::size_t off = (b * L + static_cast<std::size_t>(src)) * C;
          for (std::size_t c = 0; c < C; ++c) {
            if (gk) gk[c * K + k] += g[c] * in_v[off + c];
            if (gx) gx[off + c] += g[c] * k_v[c * K + k];
          }
        }
      }
  });
}

template <typename T>
Tensor<T> concat_lastdim(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != lead.size() + 1 || !std::equal(lead.begin(), lead.end(), p.shape().begin())) {
      throw ShapeError("concat_lastdim: " + to_string(p.shape()) + " does not match leading extents " +
                       to_string(lead));
    }
    widths.push_back(p.shape().back());
    total += p.shape().back();
  }
  const std::size_t rows = numel(lead);
  std::vector<T> out(rows * total);
  std::size_t off = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    auto v = parts[i].data();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(v.data() + r * widths[i], widths[i], out.data() + r * total + off);
    off += widths[i];
  }
  Shape s = lead;
  s.push_back(total);
  return detail::make_result_n<T>(std::move(s), std::move(out), parts, [rows, total, widths](Node<T>& self) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      if (T* g = detail::grad_of(self, i))
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < widths[i]; ++j) g[r * widths[i] + j] += self.grad[r * total + off + j];
      off += widths[i];
    }
  });
}

template <typename T>
Tensor<T> slice_lastdim(const Tensor<T>& x, std::size_t start, std::size_t len) {
  const std::size_t d = x.shape().back();
  if (start + len > d || len == 0) {
    throw ShapeError("slice [" + std::to_string(start) + ", +" + std::to_string(len) + ") outside " +
                     to_string(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  Shape s = x.shape();
  s.back() = len;
  std::vector<T> out(rows * len);
  auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(xv.data() + r * d + start, len, out.data() + r * len);
  return detail::make_result<T>(std::move(s), std::move(out), {&x}, [rows, d, start, len](Node<T>& self) {
    if (T* g = detail::grad_of(self, 0))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < len; ++j) g[r * d + start + j] += self.grad[r * len + j];
  });
}

// Concatenation along axis 0.
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t rows = 0;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    if (p.rank() != tail.size() + 1 || !std::equal(tail.begin(), tail.end(), p.shape().begin() + 1)) {
      throw ShapeError("concat_rows: " + to_string(p.shape()) + " does not match trailing extents " +
                       to_string(tail));
    }
    rows += p.dim(0);
    sizes.push_back(p.numel());
  }
  std::vector<T> out;
  out.reserve(rows * numel(tail));
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  Shape s = tail;
  s.insert(s.begin(), rows);
  return detail::make_result_n<T>(std::move(s), std::move(out), parts, [sizes](Node<T>& self) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      if (T* g = detail::grad_of(self, i))
        for (std::size_t j = 0; j < sizes[i]; ++j) g[j] += self.grad[off + j];
      off += sizes[i];
    }
  });
}

// x: [B, T, D] -> [B, D] at time t.
template <typename T>
Tensor<T> select_time(const Tensor<T>& x, std::size_t t) {
  if (x.rank() != 3 || t >= x.dim(1)) {
    throw ShapeError("select_time(" + std::to_string(t) + ") on " + to_string(x.shape()));
  }
  const std::size_t B = x.dim(0), L = x.dim(1), D = x.dim(2);
  std::vector<T> out(B * D);
  auto xv = x.data();
  for (std::size_t b = 0; b < B; ++b) std::copy_n(xv.data() + (b * L + t) * D, D, out.data() + b * D);
  return detail::make_result<T>(Shape{B, D}, std::move(out), {&x}, [B, L, D, t](Node<T>& self) {
    if (T* g = detail::grad_of(self, 0))
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t j = 0; j < D; ++j) g[(b * L + t) * D + j] += self.grad[b * D + j];
  });
}

// [B, D] x T -> [B, T, D].
template <typename T>
Tensor<T> stack_time(const std::vector<Tensor<T>>& steps) {
  if (steps.empty()) throw ShapeError("stack_time of zero steps");
  const std::size_t B = steps[0].dim(0), D = steps[0].dim(1), L = steps.size();
  std::vector<T> out(B * L * D);
  for (std::size_t t = 0; t < L; ++t) {
    if (steps[t].shape() != Shape{B, D}) throw ShapeError("stack_time: mismatched step " + to_string(steps[t].shape()));
    auto v = steps[t].data();
    for (std::size_t b = 0; b < B; ++b) std::copy_n(v.data() + b * D, D, out.data() + (b * L + t) * D);
  }
  return detail::make_result_n<T>(Shape{B, L, D}, std::move(out), steps, [B, L, D](Node<T>& self) {
    for (std::size_t t = 0; t < L; ++t)
      if (T* g = detail::grad_of(self, t))
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t j = 0; j < D; ++j) g[b * D + j] += self.grad[(b * L + t) * D + j];
  });
}

template <typename T>
Tensor<T> reverse_time(const Tensor<T>& x) {
  if (x.rank() != 3) throw ShapeError("reverse_time expects [B,T,D], got " + to_string(x.shape()));
  const std::size_t B = x.dim(0), L = x.dim(1), D = x.dim(2);
  std::vector<T> out(x.numel());
  auto xv = x.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < L; ++t)
      std::copy_n(xv.data() + (b * L + t) * D, D, out.data() + (b * L + (L - 1 - t)) * D);
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, [B, L, D](Node<T>& self) {
    if (T* g = detail::grad_of(self, 0))
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < L; ++t)
          for (std::size_t j = 0; j < D; ++j) g[(b * L + t) * D + j] += self.grad[(b * L + (L - 1 - t)) * D + j];
  });
}

// Arithmetic mean along one axis; the axis is removed from the shape.
template <typename T>
Tensor<T> mean_over_axis(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("mean axis " + std::to_string(axis) + " outside " + to_string(x.shape()));
  const Shape& s = x.shape();
  const std::size_t outer = numel(Shape(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(axis)));
  const std::size_t n = s[axis];
  const std::size_t inner = numel(Shape(s.begin() + static_cast<std::ptrdiff_t>(axis) + 1, s.end()));
  Shape os = s;
  os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<T> out(outer * inner, T(0));
  auto xv = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < inner; ++j) out[o * inner + j] += xv[(o * n + i) * inner + j];
  for (T& v : out) v /= T(n);
  return detail::make_result<T>(std::move(os), std::move(out), {&x}, [outer, n, inner](Node<T>& self) {
    if (T* g = detail::grad_of(self, 0))
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < inner; ++j) g[(o * n + i) * inner + j] += self.grad[o * inner + j] / T(n);
  });
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  return detail::make_result<T>(Shape{}, std::vector<T>{s}, {&x}, [](Node<T>& self) {
    if (T* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < self.parents[0]->data.size(); ++i) g[i] += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return scale(sum_all(x), T(1) / T(x.numel()));
}

// Rows of `table` ([N, D]) selected by `ids` -> [len(ids), D].
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<std::size_t>& ids) {
  if (table.rank() != 2) throw ShapeError("gather_rows expects a [N,D] table, got " + to_string(table.shape()));
  const std::size_t N = table.dim(0), D = table.dim(1);
  std::vector<T> out(ids.size() * D);
  auto tv = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= N) {
      throw std::out_of_range("row id " + std::to_string(ids[i]) + " outside table of " + std::to_string(N) + " rows");
    }
    std::copy_n(tv.data() + ids[i] * D, D, out.data() + i * D);
  }
  return detail::make_result<T>(Shape{ids.size(), D}, std::move(out), {&table}, [ids, D](Node<T>& self) {
    if (T* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < D; ++j) g[ids[i] * D + j] += self.grad[i * D + j];
  });
}

// x: [N, M], idx: N column indices -> [N] with x[i, idx[i]].
template <typename T>
Tensor<T> pick_columns(const Tensor<T>& x, const std::vector<std::size_t>& idx) {
  if (x.rank() != 2 || idx.size() != x.dim(0)) {
    throw ShapeError("pick_columns: " + std::to_string(idx.size()) + " indices for " + to_string(x.shape()));
  }
  const std::size_t M = x.dim(1);
  std::vector<T> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= M) throw std::out_of_range("pick_columns index outside row");
    out[i] = x.data()[i * M + idx[i]];
  }
  return detail::make_result<T>(Shape{idx.size()}, std::move(out), {&x}, [idx, M](Node<T>& self) {
    if (T* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < idx.size(); ++i) g[i * M + idx[i]] += self.grad[i];
  });
}

// Scales each last-axis slice to unit L2 norm; an all-zero slice stays zero
// and passes no gradient.
template <typename T>
Tensor<T> l2_normalize_lastdim(const Tensor<T>& x) {
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  auto xv = x.data();
  std::vector<T> out(x.numel());
  auto norms = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = 0;
    for (std::size_t i = 0; i < d; ++i) ss += xv[r * d + i] * xv[r * d + i];
    T nrm = std::sqrt(ss);
    (*norms)[r] = nrm;
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] = nrm > T(0) ? xv[r * d + i] / nrm : T(0);
  }
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, [rows, d, norms](Node<T>& self) {
    T* gx = detail::grad_of(self, 0);
    if (!gx) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const T nrm = (*norms)[r];
      if (nrm == T(0)) continue;
      const T* y = self.data.data() + r * d;
      const T* g = self.grad.data() + r * d;
      T dot = 0;
      for (std::size_t i = 0; i < d; ++i) dot += g[i] * y[i];
      for (std::size_t i = 0; i < d; ++i) gx[r * d + i] += (g[i] - y[i] * dot) / nrm;
    }
  });
}

// Cosine similarity over the last axis; defined as 0 when either side is the
// zero vector.
template <typename T>
Tensor<T> cosine_lastdim(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("cosine of " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  auto prod = mul(l2_normalize_lastdim(a), l2_normalize_lastdim(b));
  const std::size_t d = a.shape().back();
  Tensor<T> ones(Shape{d, 1}, T(1));
  Shape os(a.shape().begin(), a.shape().end() - 1);
  return reshape(matmul(prod.rank() >= 2 ? prod : reshape(prod, Shape{1, d}), ones), os);
}

// Binary cross-entropy averaged over the batch; scores are clamped to
// [1e-7, 1 - 1e-7].
template <typename T>
Tensor<T> bce_mean(const Tensor<T>& scores, const std::vector<int>& labels) {
  if (scores.numel() != labels.size() || labels.empty()) {
    throw ShapeError("bce: " + std::to_string(labels.size()) + " labels for scores " + to_string(scores.shape()));
  }
  constexpr T lo = T(1e-7), hi = T(1) - T(1e-7);
  const std::size_t n = labels.size();
  T loss = 0;
  auto sv = scores.data();
  for (std::size_t i = 0; i < n; ++i) {
    const T s = std::clamp(sv[i], lo, hi);
    loss -= labels[i] ? std::log(s) : std::log(T(1) - s);
  }
  loss /= T(n);
  return detail::make_result<T>(Shape{}, std::vector<T>{loss}, {&scores}, [labels, n](Node<T>& self) {
    T* g = detail::grad_of(self, 0);
    if (!g) return;
    const auto& sv = self.parents[0]->data;
    for (std::size_t i = 0; i < n; ++i) {
      const T s = sv[i];
      if (s < lo || s > hi) continue;
      g[i] += self.grad[0] * (labels[i] ? -T(1) / s : T(1) / (T(1) - s)) / T(n);
    }
  });
}

// One GRU step on pre-projected input gates. gx: [B, 3H] holding
// x·W_ih + b_ih in (reset, update, candidate) order; h: [B, H];
// w_hh: [H, 3H]; b_hh: [3H].
//   r = σ(gx_r + gh_r), z = σ(gx_z + gh_z), n = tanh(gx_n + r ⊙ gh_n)
//   h' = (1 − z) ⊙ n + z ⊙ h
template <typename T>
Tensor<T> gru_cell_projected(const Tensor<T>& gx, const Tensor<T>& h, const Tensor<T>& w_hh,
                             const Tensor<T>& b_hh) {
  using namespace detail;
  const std::size_t B = h.dim(0), H = h.dim(1);
  if (gx.shape() != Shape{B, 3 * H} || w_hh.shape() != Shape{H, 3 * H} || b_hh.numel() != 3 * H) {
    throw ShapeError("gru_cell: gates " + to_string(gx.shape()) + ", state " + to_string(h.shape()) +
                     ", recurrent weight " + to_string(w_hh.shape()) + " are inconsistent");
  }
  auto gh = std::make_shared<RowMat<T>>(MapC<T>(h.data().data(), B, H) * MapC<T>(w_hh.data().data(), H, 3 * H));
  auto bv = b_hh.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < 3 * H; ++j) (*gh)(b, j) += bv[j];
  auto gates = std::make_shared<std::vector<T>>(B * 3 * H);  // r, z, n
  std::vector<T> out(B * H);
  auto xv = gx.data();
  auto hv = h.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < H; ++j) {
      const T* gxb = xv.data() + b * 3 * H;
      const T r = stable_sigmoid(gxb[j] + (*gh)(b, j));
      const T z = stable_sigmoid(gxb[H + j] + (*gh)(b, H + j));
      const T n = std::tanh(gxb[2 * H + j] + r * (*gh)(b, 2 * H + j));
      (*gates)[b * 3 * H + j] = r;
      (*gates)[b * 3 * H + H + j] = z;
      (*gates)[b * 3 * H + 2 * H + j] = n;
      out[b * H + j] = (T(1) - z) * n + z * hv[b * H + j];
    }
  return make_result<T>(Shape{B, H}, std::move(out), {&gx, &h, &w_hh, &b_hh}, [B, H, gh, gates](Node<T>& self) {
    T* g_gx = grad_of(self, 0);
    T* g_h = grad_of(self, 1);
    T* g_w = grad_of(self, 2);
    T* g_b = grad_of(self, 3);
    const auto& hv = self.parents[1]->data;
    RowMat<T> dgh(B, 3 * H);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t j = 0; j < H; ++j) {
        const T g = self.grad[b * H + j];
        const T r = (*gates)[b * 3 * H + j];
        const T z = (*gates)[b * 3 * H + H + j];
        const T n = (*gates)[b * 3 * H + 2 * H + j];
        const T dn_pre = g * (T(1) - z) * (T(1) - n * n);
        const T dz_pre = g * (hv[b * H + j] - n) * z * (T(1) - z);
        const T dr_pre = dn_pre * (*gh)(b, 2 * H + j) * r * (T(1) - r);
        if (g_gx) {
          g_gx[b * 3 * H + j] += dr_pre;
          g_gx[b * 3 * H + H + j] += dz_pre;
          g_gx[b * 3 * H + 2 * H + j] += dn_pre;
        }
        if (g_h) g_h[b * H + j] += g * z;
        dgh(b, j) = dr_pre;
        dgh(b, H + j) = dz_pre;
        dgh(b, 2 * H + j) = dn_pre * r;
      }
    if (g_h) MapM<T>(g_h, B, H).noalias() += dgh * MapC<T>(self.parents[2]->data.data(), H, 3 * H).transpose();
    if (g_w) MapM<T>(g_w, H, 3 * H).noalias() += MapC<T>(hv.data(), B, H).transpose() * dgh;
    if (g_b)
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t j = 0; j < 3 * H; ++j) g_b[j] += dgh(b, j);
  });
}

template <typename T>
struct GruParams {
  Tensor<T> w_ih;  // [In, 3H]
  Tensor<T> w_hh;  // [H, 3H]
  Tensor<T> b_ih;  // [3H]
  Tensor<T> b_hh;  // [3H]
};

template <typename T>
Tensor<T> gru_cell(const Tensor<T>& x, const Tensor<T>& h, const GruParams<T>& p) {
  if (x.rank() != 2 || p.w_ih.rank() != 2 || x.dim(1) != p.w_ih.dim(0)) {
    throw ShapeError("gru_cell: input " + to_string(x.shape()) + " does not fit W_ih " + to_string(p.w_ih.shape()));
  }
  return gru_cell_projected(linear(x, p.w_ih, p.b_ih), h, p.w_hh, p.b_hh);
}

}  // namespace kws
