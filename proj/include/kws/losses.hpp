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

// Training objective: utterance-level BCE, two segment-level InfoNCE terms
// (audio/text and enrollment/query audio) and the prosody similarity term.

#pragma once

#include "kws/tensor.hpp"

#include <stdexcept>
#include <string>
#include <vector>

namespace kws::losses {

class DegenerateBatchError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct LossConfig {
  double lambda = 0.5;
  double tau = 0.07;

  void validate() const {
    if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be nonnegative");
    if (!(tau > 0.0)) throw std::invalid_argument("tau must be positive");
  }
};

struct LossCounters {
  std::size_t skipped_audio_audio = 0;
};

template <typename T>
struct LossParts {
  Tensor<T> utterance, audio_text, audio_audio, prosody;
};

template <typename T>
Tensor<T> utterance_bce(const Tensor<T>& scores, const std::vector<int>& labels) {
  return bce_mean(scores, labels);
}

// Rows of `anchors` and `candidates` correspond: candidate i is the positive
// for anchor i and every other candidate is a negative, except those sharing
// the positive's phoneme id. The result is the mean over anchors of
// -log softmax_i(cos(anchor_i, candidate_k) / tau).
template <typename T>
Tensor<T> segment_infonce(const Tensor<T>& anchors, const Tensor<T>& candidates, double tau,
                          const std::vector<int>& phoneme_ids = {}) {
  if (anchors.rank() != 2 || anchors.shape() != candidates.shape()) {
    throw ShapeError("infonce: anchors " + to_string(anchors.shape()) + ", candidates " +
                     to_string(candidates.shape()));
  }
  const std::size_t n = anchors.dim(0);
  if (n < 2) throw DegenerateBatchError("infonce needs at least two candidate segments, got " + std::to_string(n));
  if (!phoneme_ids.empty() && phoneme_ids.size() != n) throw ShapeError("infonce: phoneme id count mismatch");
  if (!(tau > 0.0)) throw std::invalid_argument("infonce temperature must be positive");

  Tensor<T> sims = matmul(l2_normalize_lastdim(anchors), transpose_last2(l2_normalize_lastdim(candidates)));
  Tensor<T> logits = scale(sims, static_cast<T>(1.0 / tau));
  if (!phoneme_ids.empty()) {
    std::vector<T> mask(n * n, T(0));
    bool any = false;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < n; ++k)
        if (k != i && phoneme_ids[k] == phoneme_ids[i]) {
          mask[i * n + k] = T(-1e9);
          any = true;
        }
    if (any) logits = add(logits, Tensor<T>(Shape{n, n}, std::move(mask)));
  }
  std::vector<std::size_t> diag(n);
  for (std::size_t i = 0; i < n; ++i) diag[i] = i;
  return scale(mean_all(pick_columns(log_softmax_lastdim(logits), diag)), T(-1));
}

// Query segments against the text embeddings of the same segments, pooled
// across all trials of a batch.
template <typename T>
Tensor<T> infonce_audio_text(const std::vector<Tensor<T>>& audio_segments,
                             const std::vector<Tensor<T>>& text_segments, double tau,
                             const std::vector<std::vector<int>>& phoneme_ids = {}) {
  if (audio_segments.size() != text_segments.size() || audio_segments.empty()) {
    throw DegenerateBatchError("infonce: no segment groups");
  }
  std::vector<int> ids;
  for (const auto& g : phoneme_ids) ids.insert(ids.end(), g.begin(), g.end());
  return segment_infonce(concat_rows(audio_segments), concat_rows(text_segments), tau, ids);
}

// Query segments against enrollment segments, positive trials only. A batch
// without positive trials contributes exactly zero.
template <typename T>
Tensor<T> infonce_audio_audio(const std::vector<Tensor<T>>& query_segments,
                              const std::vector<Tensor<T>>& enroll_segments, double tau,
                              const std::vector<std::vector<int>>& phoneme_ids = {},
                              LossCounters* counters = nullptr) {
  if (query_segments.empty()) {
    if (counters) ++counters->skipped_audio_audio;
    return Tensor<T>::scalar(T(0));
  }
  return infonce_audio_text(query_segments, enroll_segments, tau, phoneme_ids);
}

// Mean of 1 - cos over positive trials; zero without positives.
template <typename T>
Tensor<T> prosody_similarity_loss(const Tensor<T>& v_pro_q, const Tensor<T>& v_pro, const std::vector<int>& labels) {
  if (v_pro_q.rank() != 2 || v_pro_q.shape() != v_pro.shape() || labels.size() != v_pro_q.dim(0)) {
    throw ShapeError("prosody loss: " + to_string(v_pro_q.shape()) + " / " + to_string(v_pro.shape()));
  }
  std::vector<std::size_t> pos;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i]) pos.push_back(i);
  if (pos.empty()) return Tensor<T>::scalar(T(0));
  Tensor<T> cos = cosine_lastdim(gather_rows(v_pro_q, pos), gather_rows(v_pro, pos));
  return add_scalar(scale(mean_all(cos), T(-1)), T(1));
}

template <typename T>
Tensor<T> total_loss(const LossParts<T>& parts, const LossConfig& cfg) {
  cfg.validate();
  return add(add(add(parts.utterance, parts.audio_text), parts.audio_audio),
             scale(parts.prosody, static_cast<T>(cfg.lambda)));
}

}  // namespace kws::losses
