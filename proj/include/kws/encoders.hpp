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

// Dual-stream encoder: the phoneme stream (convolutional subsampling and a
// Conformer stack over log-mel frames, then segment pooling) and the prosody
// stream (two-layer bidirectional GRU over the prosody contour, then
// attention pooling into a fixed-size signature).

#pragma once

#include "kws/layers.hpp"

#include <stdexcept>
#include <string>
#include <vector>

namespace kws::encoders {

class TooShortError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class AlignmentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct PhonemeStreamConfig {
  std::size_t input_dim = 80;
  std::size_t model_dim = 128;
  std::size_t blocks = 2;
  std::size_t heads = 4;
  std::size_t conv_kernel = 15;
  std::size_t ffn_multiplier = 2;
  std::size_t max_positions = 64;
};

struct ProsodyStreamConfig {
  std::size_t input_dim = 3;
  std::size_t layers = 2;
  std::size_t hidden = 32;  // per direction
  std::size_t attention_dim = 64;

  std::size_t output_dim() const { return 2 * hidden; }
};

// Half-open [start, end) on the subsampled frame grid.
struct Segment {
  std::size_t start = 0;
  std::size_t end = 0;
};

struct Alignment {
  std::vector<Segment> segments;
};

inline void validate_alignment(const Alignment& a, std::size_t num_frames) {
  if (a.segments.empty()) throw AlignmentError("alignment has no segments");
  std::size_t prev_end = 0;
  for (std::size_t j = 0; j < a.segments.size(); ++j) {
    const auto& s = a.segments[j];
    if (s.end <= s.start) throw AlignmentError("segment " + std::to_string(j) + " is empty");
    if (s.start < prev_end) throw AlignmentError("segment " + std::to_string(j) + " overlaps its predecessor");
    prev_end = s.end;
  }
  if (prev_end > num_frames) {
    throw AlignmentError("alignment ends at " + std::to_string(prev_end) + " beyond " + std::to_string(num_frames) +
                         " frames");
  }
}

// Two stride-2 convolutions, kernel 3, padding 1.
inline std::size_t subsampled_length(std::size_t frames) {
  return conv_output_length(conv_output_length(frames, 3, 2, 1), 3, 2, 1);
}

inline constexpr std::size_t kMinEncoderFrames = 8;

template <typename T>
class ConformerBlock {
 public:
  ConformerBlock() = default;
  ConformerBlock(ParameterSet<T>& ps, const std::string& path, const PhonemeStreamConfig& cfg, Rng& rng)
      : heads_(cfg.heads) {
    const std::size_t d = cfg.model_dim, hidden = cfg.ffn_multiplier * cfg.model_dim;
    ffn1_norm_ = nn::LayerNorm<T>(ps, path + "/ffn1/norm", d);
    ffn1_in_ = nn::Linear<T>(ps, path + "/ffn1/in", d, hidden, rng);
    ffn1_out_ = nn::Linear<T>(ps, path + "/ffn1/out", hidden, d, rng);
    attn_norm_ = nn::LayerNorm<T>(ps, path + "/mhsa/norm", d);
    attn_ = nn::make_attention(ps, path + "/mhsa", d, rng);
    conv_norm_ = nn::LayerNorm<T>(ps, path + "/conv/norm", d);
    conv_pointwise_in_ = nn::Linear<T>(ps, path + "/conv/pointwise_in", d, 2 * d, rng);
    depthwise_kernel_ = ps.glorot(path + "/conv/depthwise/kernel", {d, cfg.conv_kernel}, cfg.conv_kernel,
                                  cfg.conv_kernel, rng);
    depthwise_bias_ = ps.zeros(path + "/conv/depthwise/bias", {d});
    conv_mid_norm_ = nn::LayerNorm<T>(ps, path + "/conv/mid_norm", d);
    conv_pointwise_out_ = nn::Linear<T>(ps, path + "/conv/pointwise_out", d, d, rng);
    ffn2_norm_ = nn::LayerNorm<T>(ps, path + "/ffn2/norm", d);
    ffn2_in_ = nn::Linear<T>(ps, path + "/ffn2/in", d, hidden, rng);
    ffn2_out_ = nn::Linear<T>(ps, path + "/ffn2/out", hidden, d, rng);
    final_norm_ = nn::LayerNorm<T>(ps, path + "/final_norm", d);
  }

  // half-FFN -> self-attention -> convolution module -> half-FFN -> layernorm,
  // each sub-module residual.
  Tensor<T> operator()(const Tensor<T>& x) const {
    const std::size_t d = x.shape().back();
    Tensor<T> y = add(x, scale(ffn1_out_(swish(ffn1_in_(ffn1_norm_(x)))), T(0.5)));
    Tensor<T> a = attn_norm_(y);
    y = add(y, nn::multihead_attention(a, a, attn_, heads_));
    Tensor<T> c = conv_pointwise_in_(conv_norm_(y));
    c = mul(slice_lastdim(c, 0, d), sigmoid(slice_lastdim(c, d, d)));  // GLU
    c = depthwise_conv1d(c, depthwise_kernel_, depthwise_bias_);
    c = conv_pointwise_out_(swish(conv_mid_norm_(c)));
    y = add(y, c);
    y = add(y, scale(ffn2_out_(swish(ffn2_in_(ffn2_norm_(y)))), T(0.5)));
    return final_norm_(y);
  }

 private:
  std::size_t heads_ = 4;
  nn::LayerNorm<T> ffn1_norm_, attn_norm_, conv_norm_, conv_mid_norm_, ffn2_norm_, final_norm_;
  nn::Linear<T> ffn1_in_, ffn1_out_, conv_pointwise_in_, conv_pointwise_out_, ffn2_in_, ffn2_out_;
  nn::AttentionParams<T> attn_;
  Tensor<T> depthwise_kernel_, depthwise_bias_;
};

// Log-mel frames [B, T, 80] -> acoustic representations [B, T_sub, D].
// Enrollment and query audio go through the same instance.
template <typename T>
class AudioEncoder {
 public:
  AudioEncoder() = default;
  AudioEncoder(ParameterSet<T>& ps, const std::string& path, const PhonemeStreamConfig& cfg, Rng& rng) : cfg_(cfg) {
    const std::size_t d = cfg.model_dim;
    conv1_kernel_ = ps.glorot(path + "/subsample/conv1/kernel", {d, cfg.input_dim, 3}, cfg.input_dim * 3, d * 3, rng);
    conv1_bias_ = ps.zeros(path + "/subsample/conv1/bias", {d});
    conv2_kernel_ = ps.glorot(path + "/subsample/conv2/kernel", {d, d, 3}, d * 3, d * 3, rng);
    conv2_bias_ = ps.zeros(path + "/subsample/conv2/bias", {d});
    std::vector<T> pos(cfg.max_positions * d);
    for (T& v : pos) v = static_cast<T>(rng.uniform(-0.05, 0.05));
    positions_ = ps.add(path + "/positions", {cfg.max_positions, d}, std::move(pos));
    for (std::size_t b = 0; b < cfg.blocks; ++b)
      blocks_.emplace_back(ps, path + "/conformer" + std::to_string(b), cfg, rng);
  }

  Tensor<T> operator()(const Tensor<T>& fbank) const {
    if (fbank.rank() != 3 || fbank.dim(2) != cfg_.input_dim) {
      throw ShapeError("audio encoder expects [B,T," + std::to_string(cfg_.input_dim) + "], got " +
                       to_string(fbank.shape()));
    }
    if (fbank.dim(1) < kMinEncoderFrames) {
      throw TooShortError("audio encoder needs at least " + std::to_string(kMinEncoderFrames) + " frames, got " +
                          std::to_string(fbank.dim(1)));
    }
    Tensor<T> x = relu(conv1d(fbank, conv1_kernel_, conv1_bias_, 2, 1));
    x = relu(conv1d(x, conv2_kernel_, conv2_bias_, 2, 1));
    const std::size_t t_sub = x.dim(1);
    if (t_sub > cfg_.max_positions) {
      throw ShapeError("utterance of " + std::to_string(t_sub) + " subsampled frames exceeds " +
                       std::to_string(cfg_.max_positions) + " positions");
    }
    x = add(x, reshape(slice_rows(positions_, t_sub), Shape{t_sub, cfg_.model_dim}));
    for (const auto& block : blocks_) x = block(x);
    return x;
  }

  const PhonemeStreamConfig& config() const { return cfg_; }

 private:
  static Tensor<T> slice_rows(const Tensor<T>& table, std::size_t n) {
    std::vector<std::size_t> ids(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = i;
    return gather_rows(table, ids);
  }

  PhonemeStreamConfig cfg_;
  Tensor<T> conv1_kernel_, conv1_bias_, conv2_kernel_, conv2_bias_, positions_;
  std::vector<ConformerBlock<T>> blocks_;
};

// Mean of the frames of each segment: Z [B, T_sub, D] -> [B, T', D]. The
// same alignment applies to every batch item.
template <typename T>
Tensor<T> phoneme_pooler(const Tensor<T>& z, const Alignment& align) {
  if (z.rank() != 3) throw ShapeError("phoneme pooler expects [B,T,D], got " + to_string(z.shape()));
  validate_alignment(align, z.dim(1));
  const std::size_t B = z.dim(0), L = z.dim(1), S = align.segments.size();
  std::vector<T> pool(B * S * L, T(0));
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < S; ++j) {
      const auto& seg = align.segments[j];
      const T w = T(1) / static_cast<T>(seg.end - seg.start);
      for (std::size_t t = seg.start; t < seg.end; ++t) pool[(b * S + j) * L + t] = w;
    }
  return matmul(Tensor<T>(Shape{B, S, L}, std::move(pool)), z);
}

// Two stacked bidirectional GRU layers: [B, T, 3] -> [B, T, 2H].
template <typename T>
class ProsodyEncoder {
 public:
  ProsodyEncoder() = default;
  ProsodyEncoder(ParameterSet<T>& ps, const std::string& path, const ProsodyStreamConfig& cfg, Rng& rng) {
    std::size_t in = cfg.input_dim;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const std::string p = path + "/layer" + std::to_string(l);
      forward_.emplace_back(ps, p + "/forward", in, cfg.hidden, rng);
      backward_.emplace_back(ps, p + "/backward", in, cfg.hidden, rng);
      in = cfg.output_dim();
    }
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    if (x.rank() != 3 || x.dim(1) == 0) throw ShapeError("prosody encoder expects [B,T,C], got " + to_string(x.shape()));
    Tensor<T> h = x;
    for (std::size_t l = 0; l < forward_.size(); ++l)
      h = concat_lastdim<T>({forward_[l].run(h), backward_[l].run(h, /*reverse=*/true)});
    return h;
  }

  std::vector<nn::Gru<T>>& forward_layers() { return forward_; }
  std::vector<nn::Gru<T>>& backward_layers() { return backward_; }

 private:
  std::vector<nn::Gru<T>> forward_, backward_;
};

// a_t = uᵀ tanh(W z_t + b); weights = softmax over t; v = Σ_t weight_t z_t.
template <typename T>
class ProsodyPooler {
 public:
  ProsodyPooler() = default;
  ProsodyPooler(ParameterSet<T>& ps, const std::string& path, const ProsodyStreamConfig& cfg, Rng& rng)
      : proj_(ps, path + "/proj", cfg.output_dim(), cfg.attention_dim, rng),
        score_(ps.glorot(path + "/score", {cfg.attention_dim, 1}, cfg.attention_dim, 1, rng)) {}

  // z: [B, T, D] -> [B, D]. Attention weights [B, 1, T] go to `weights`.
  Tensor<T> operator()(const Tensor<T>& z, Tensor<T>* weights = nullptr) const {
    const std::size_t B = z.dim(0), L = z.dim(1), D = z.dim(2);
    Tensor<T> scores = reshape(matmul(tanh(proj_(z)), score_), Shape{B, 1, L});
    Tensor<T> w = softmax_lastdim(scores);
    if (weights) *weights = w;
    return reshape(matmul(w, z), Shape{B, D});
  }

  nn::Linear<T>& projection() { return proj_; }
  Tensor<T>& score_vector() { return score_; }

 private:
  nn::Linear<T> proj_;
  Tensor<T> score_;
};

// Global average over time: [B, T, D] -> [B, D].
template <typename T>
Tensor<T> prosody_matcher_pool(const Tensor<T>& z) {
  if (z.rank() != 3 || z.dim(1) == 0) throw ShapeError("matcher pool expects [B,T,D], got " + to_string(z.shape()));
  return mean_over_axis(z, 1);
}

}  // namespace kws::encoders
