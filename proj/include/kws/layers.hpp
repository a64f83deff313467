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

// Parameterized building blocks shared by the encoders and the fusion
// module. Each block registers its parameters under a path prefix.

#pragma once

#include "kws/params.hpp"
#include "kws/random.hpp"
#include "kws/tensor.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace kws::nn {

template <typename T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]

  Linear() = default;
  Linear(ParameterSet<T>& ps, const std::string& path, std::size_t in, std::size_t out, Rng& rng,
         T bias_init = T(0))
      : weight(ps.glorot(path + "/weight", {in, out}, in, out, rng)),
        bias(ps.constant(path + "/bias", {out}, bias_init)) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
};

template <typename T>
struct LayerNorm {
  Tensor<T> gain;
  Tensor<T> bias;

  LayerNorm() = default;
  LayerNorm(ParameterSet<T>& ps, const std::string& path, std::size_t dim)
      : gain(ps.constant(path + "/gain", {dim}, T(1))), bias(ps.zeros(path + "/bias", {dim})) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return layernorm(x, gain, bias); }
};

// Unidirectional GRU layer. Recurrent and input matrices are scaled-uniform
// in ±1/sqrt(hidden); biases start at zero.
template <typename T>
struct Gru {
  GruParams<T> p;
  std::size_t hidden = 0;

  Gru() = default;
  Gru(ParameterSet<T>& ps, const std::string& path, std::size_t in, std::size_t hidden_size, Rng& rng)
      : hidden(hidden_size) {
    const double k = 1.0 / std::sqrt(static_cast<double>(hidden_size));
    auto uniform = [&](const std::string& name, Shape shape) {
      std::vector<T> v(kws::numel(shape));
      for (T& x : v) x = static_cast<T>(rng.uniform(-k, k));
      return ps.add(path + "/" + name, std::move(shape), std::move(v));
    };
    p.w_ih = uniform("w_ih", {in, 3 * hidden_size});
    p.w_hh = uniform("w_hh", {hidden_size, 3 * hidden_size});
    p.b_ih = ps.zeros(path + "/b_ih", {3 * hidden_size});
    p.b_hh = ps.zeros(path + "/b_hh", {3 * hidden_size});
  }

  // x: [B, T, In] -> all hidden states [B, T, H]. With `reverse`, the
  // recurrence runs from the last frame to the first and outputs stay aligned
  // with their input frames.
  Tensor<T> run(const Tensor<T>& x, bool reverse = false) const {
    const std::size_t B = x.dim(0), L = x.dim(1);
    Tensor<T> gx = linear(x, p.w_ih, p.b_ih);
    Tensor<T> h(Shape{B, hidden}, T(0));
    std::vector<Tensor<T>> states(L);
    for (std::size_t step = 0; step < L; ++step) {
      const std::size_t t = reverse ? L - 1 - step : step;
      h = gru_cell_projected(select_time(gx, t), h, p.w_hh, p.b_hh);
      states[t] = h;
    }
    return stack_time(states);
  }

  // Final hidden state of a forward pass, [B, H].
  Tensor<T> last_state(const Tensor<T>& x) const {
    const std::size_t B = x.dim(0), L = x.dim(1);
    Tensor<T> gx = linear(x, p.w_ih, p.b_ih);
    Tensor<T> h(Shape{B, hidden}, T(0));
    for (std::size_t t = 0; t < L; ++t) h = gru_cell_projected(select_time(gx, t), h, p.w_hh, p.b_hh);
    return h;
  }
};

template <typename T>
struct AttentionParams {
  Linear<T> query, key, value, output;
};

template <typename T>
AttentionParams<T> make_attention(ParameterSet<T>& ps, const std::string& path, std::size_t dim, Rng& rng) {
  return {Linear<T>(ps, path + "/query", dim, dim, rng), Linear<T>(ps, path + "/key", dim, dim, rng),
          Linear<T>(ps, path + "/value", dim, dim, rng), Linear<T>(ps, path + "/output", dim, dim, rng)};
}

// Scaled dot-product multi-head attention. queries: [B, Tq, D],
// memory: [B, Tk, D] (keys and values) -> [B, Tq, D] after the output
// projection. Per-head weights [B, Tq, Tk] are appended to `weights` if given.
template <typename T>
Tensor<T> multihead_attention(const Tensor<T>& queries, const Tensor<T>& memory, const AttentionParams<T>& p,
                              std::size_t heads, std::vector<Tensor<T>>* weights = nullptr) {
  const std::size_t dim = queries.shape().back();
  if (memory.shape().back() != dim || dim % heads != 0) {
    throw ShapeError("attention widths " + to_string(queries.shape()) + " / " + to_string(memory.shape()) +
                     " incompatible with " + std::to_string(heads) + " heads");
  }
  const std::size_t dh = dim / heads;
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(dh));
  Tensor<T> q = p.query(queries), k = p.key(memory), v = p.value(memory);
  std::vector<Tensor<T>> per_head;
  per_head.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor<T> qh = slice_lastdim(q, h * dh, dh);
    Tensor<T> kh = slice_lastdim(k, h * dh, dh);
    Tensor<T> vh = slice_lastdim(v, h * dh, dh);
    Tensor<T> w = softmax_lastdim(scale(matmul(qh, transpose_last2(kh)), scale_factor));
    if (weights) weights->push_back(w);
    per_head.push_back(matmul(w, vh));
  }
  return p.output(heads == 1 ? per_head[0] : concat_lastdim(per_head));
}

}  // namespace kws::nn
