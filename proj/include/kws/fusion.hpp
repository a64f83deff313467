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

// Collaborative fusion: FiLM adaptation of query phoneme features by the
// enrollment prosody signature, cross-attention over the text embeddings,
// prosody matching, and the recurrent decision head.

#pragma once

#include "kws/layers.hpp"

#include <stdexcept>
#include <string>
#include <vector>

namespace kws::fusion {

class RangeError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

struct FusionConfig {
  std::size_t model_dim = 128;
  std::size_t prosody_dim = 64;
  std::size_t heads = 4;
  std::size_t decision_hidden = 64;
};

// gamma = Lin_g(v), beta = Lin_b(v); out[b,t,d] = gamma[b,d] * z[b,t,d] + beta[b,d].
// The gamma bias starts at 1 so a fresh module is close to the identity.
template <typename T>
struct Film {
  nn::Linear<T> gamma, beta;

  Film() = default;
  Film(ParameterSet<T>& ps, const std::string& path, const FusionConfig& cfg, Rng& rng)
      : gamma(ps, path + "/gamma", cfg.prosody_dim, cfg.model_dim, rng, T(1)),
        beta(ps, path + "/beta", cfg.prosody_dim, cfg.model_dim, rng) {}

  Tensor<T> operator()(const Tensor<T>& z, const Tensor<T>& v_pro) const {
    if (z.rank() != 3 || v_pro.rank() != 2 || z.dim(0) != v_pro.dim(0) || z.dim(2) != gamma.weight.dim(1) ||
        v_pro.dim(1) != gamma.weight.dim(0)) {
      throw ShapeError("film: features " + to_string(z.shape()) + " with signature " + to_string(v_pro.shape()));
    }
    const std::size_t B = z.dim(0), D = z.dim(2);
    Tensor<T> g = reshape(gamma(v_pro), Shape{B, 1, D});
    Tensor<T> b = reshape(beta(v_pro), Shape{B, 1, D});
    return add(mul(z, g), b);
  }
};

template <typename T>
Tensor<T> film_modulate(const Tensor<T>& z, const Tensor<T>& v_pro, const Film<T>& film) {
  return film(z, v_pro);
}

// Query features attend over text embeddings; residual from the query and a
// layernorm follow unless `residual` is false.
template <typename T>
struct CrossAttention {
  nn::AttentionParams<T> attn;
  nn::LayerNorm<T> norm;
  std::size_t heads = 4;

  CrossAttention() = default;
  CrossAttention(ParameterSet<T>& ps, const std::string& path, const FusionConfig& cfg, Rng& rng)
      : attn(nn::make_attention(ps, path, cfg.model_dim, rng)), norm(ps, path + "/norm", cfg.model_dim),
        heads(cfg.heads) {}

  Tensor<T> operator()(const Tensor<T>& query, const Tensor<T>& text, std::vector<Tensor<T>>* weights = nullptr,
                       bool residual = true) const {
    if (query.rank() != 3 || text.rank() != 3 || query.dim(0) != text.dim(0)) {
      throw ShapeError("cross attention: " + to_string(query.shape()) + " over " + to_string(text.shape()));
    }
    Tensor<T> a = nn::multihead_attention(query, text, attn, heads, weights);
    return residual ? norm(add(query, a)) : a;
  }
};

template <typename T>
Tensor<T> cross_attention(const Tensor<T>& query, const Tensor<T>& text, const CrossAttention<T>& module) {
  return module(query, text);
}

// Cosine per batch item, [B, D] x [B, D] -> [B]; zero vectors score 0.
template <typename T>
Tensor<T> prosody_match(const Tensor<T>& v_pro_q, const Tensor<T>& v_pro) {
  if (v_pro_q.rank() != 2) throw ShapeError("prosody match expects [B,D], got " + to_string(v_pro_q.shape()));
  return cosine_lastdim(v_pro_q, v_pro);
}

template <typename T>
struct DecisionOutput {
  Tensor<T> v_at;   // [B, H], final GRU state
  Tensor<T> logit;  // [B]
  Tensor<T> score;  // [B]
};

template <typename T>
struct DecisionHead {
  nn::Gru<T> gru;
  nn::Linear<T> fc;

  DecisionHead() = default;
  DecisionHead(ParameterSet<T>& ps, const std::string& path, const FusionConfig& cfg, Rng& rng)
      : gru(ps, path + "/gru", cfg.model_dim + cfg.prosody_dim + 1, cfg.decision_hidden, rng),
        fc(ps, path + "/fc", cfg.decision_hidden, 1, rng) {}

  // Each frame of z_at is concatenated with v_pro and s_pro before the GRU.
  DecisionOutput<T> operator()(const Tensor<T>& z_at, const Tensor<T>& v_pro, const Tensor<T>& s_pro) const {
    if (z_at.rank() != 3 || v_pro.rank() != 2 || v_pro.dim(0) != z_at.dim(0) || s_pro.numel() != z_at.dim(0)) {
      throw ShapeError("decision head: " + to_string(z_at.shape()) + ", " + to_string(v_pro.shape()) + ", " +
                       to_string(s_pro.shape()));
    }
    const std::size_t B = z_at.dim(0), L = z_at.dim(1), P = v_pro.dim(1);
    Tensor<T> frames(Shape{B, L, 1}, T(0));
    Tensor<T> v = add(reshape(v_pro, Shape{B, 1, P}), Tensor<T>(Shape{B, L, P}, T(0)));
    Tensor<T> s = add(reshape(s_pro, Shape{B, 1, 1}), frames);
    Tensor<T> h = gru.last_state(concat_lastdim<T>({z_at, v, s}));
    Tensor<T> logit = reshape(fc(h), Shape{B});
    return {h, logit, sigmoid(logit)};
  }
};

template <typename T>
Tensor<T> decision_head(const Tensor<T>& z_at, const Tensor<T>& v_pro, const Tensor<T>& s_pro,
                        const DecisionHead<T>& head) {
  return head(z_at, v_pro, s_pro).score;
}

template <typename T>
Tensor<T> interpolate_signature(const Tensor<T>& v_pos, const Tensor<T>& v_neg, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw RangeError("interpolation weight " + std::to_string(alpha));
  if (v_pos.shape() != v_neg.shape()) {
    throw ShapeError("interpolating " + to_string(v_pos.shape()) + " with " + to_string(v_neg.shape()));
  }
  return add(scale(v_pos, static_cast<T>(1.0 - alpha)), scale(v_neg, static_cast<T>(alpha)));
}

}  // namespace kws::fusion
