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

// The full dual-stream keyword spotter: both encoders, the fusion module and
// the feature conditioning shared by training and evaluation.

#pragma once

#include "kws/dsp.hpp"
#include "kws/encoders.hpp"
#include "kws/fusion.hpp"
#include "kws/g2p.hpp"

#include <json.hpp>

#include <stdexcept>
#include <string>
#include <vector>

namespace kws::model {

enum class Ablation { kNone, kFilm, kLpro, kProsody };

inline std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::kNone: return "none";
    case Ablation::kFilm: return "film";
    case Ablation::kLpro: return "lpro";
    case Ablation::kProsody: return "prosody";
  }
  return "none";
}

inline Ablation parse_ablation(const std::string& s) {
  for (Ablation a : {Ablation::kNone, Ablation::kFilm, Ablation::kLpro, Ablation::kProsody})
    if (to_string(a) == s) return a;
  throw std::invalid_argument("unknown ablation '" + s + "' (expected none, film, lpro or prosody)");
}

struct ModelConfig {
  encoders::PhonemeStreamConfig phoneme;
  encoders::ProsodyStreamConfig prosody;
  fusion::FusionConfig fusion;
  std::size_t num_phonemes = g2p::PhonemeInventory{}.size();

  void validate() const {
    if (phoneme.model_dim != fusion.model_dim) throw std::invalid_argument("model.phoneme.model_dim != fusion.model_dim");
    if (prosody.output_dim() != fusion.prosody_dim) {
      throw std::invalid_argument("model.prosody output width != fusion.prosody_dim");
    }
    if (phoneme.model_dim % phoneme.heads != 0) throw std::invalid_argument("model.phoneme.heads must divide model_dim");
    if (fusion.model_dim % fusion.heads != 0) throw std::invalid_argument("model.fusion.heads must divide model_dim");
  }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"phoneme",
           {{"input_dim", c.phoneme.input_dim},
            {"model_dim", c.phoneme.model_dim},
            {"blocks", c.phoneme.blocks},
            {"heads", c.phoneme.heads},
            {"conv_kernel", c.phoneme.conv_kernel},
            {"ffn_multiplier", c.phoneme.ffn_multiplier},
            {"max_positions", c.phoneme.max_positions}}},
          {"prosody",
           {{"input_dim", c.prosody.input_dim},
            {"layers", c.prosody.layers},
            {"hidden", c.prosody.hidden},
            {"attention_dim", c.prosody.attention_dim}}},
          {"fusion",
           {{"model_dim", c.fusion.model_dim},
            {"prosody_dim", c.fusion.prosody_dim},
            {"heads", c.fusion.heads},
            {"decision_hidden", c.fusion.decision_hidden}}},
          {"num_phonemes", c.num_phonemes}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  if (j.contains("phoneme")) {
    const auto& p = j.at("phoneme");
    c.phoneme.input_dim = p.value("input_dim", c.phoneme.input_dim);
    c.phoneme.model_dim = p.value("model_dim", c.phoneme.model_dim);
    c.phoneme.blocks = p.value("blocks", c.phoneme.blocks);
    c.phoneme.heads = p.value("heads", c.phoneme.heads);
    c.phoneme.conv_kernel = p.value("conv_kernel", c.phoneme.conv_kernel);
    c.phoneme.ffn_multiplier = p.value("ffn_multiplier", c.phoneme.ffn_multiplier);
    c.phoneme.max_positions = p.value("max_positions", c.phoneme.max_positions);
  }
  if (j.contains("prosody")) {
    const auto& p = j.at("prosody");
    c.prosody.input_dim = p.value("input_dim", c.prosody.input_dim);
    c.prosody.layers = p.value("layers", c.prosody.layers);
    c.prosody.hidden = p.value("hidden", c.prosody.hidden);
    c.prosody.attention_dim = p.value("attention_dim", c.prosody.attention_dim);
  }
  if (j.contains("fusion")) {
    const auto& f = j.at("fusion");
    c.fusion.model_dim = f.value("model_dim", c.fusion.model_dim);
    c.fusion.prosody_dim = f.value("prosody_dim", c.fusion.prosody_dim);
    c.fusion.heads = f.value("heads", c.fusion.heads);
    c.fusion.decision_hidden = f.value("decision_hidden", c.fusion.decision_hidden);
  }
  c.num_phonemes = j.value("num_phonemes", c.num_phonemes);
  return c;
}

// Per-bin log-mel statistics and prosody channel statistics, estimated on the
// training utterances and stored with the checkpoint.
struct FeatureNorm {
  std::vector<double> fbank_mean, fbank_std;
  dsp::ProsodyStats prosody;

  nlohmann::json to_json() const {
    return {{"fbank_mean", fbank_mean},
            {"fbank_std", fbank_std},
            {"prosody",
             {{"log_f0_mean", prosody.log_f0_mean},
              {"log_f0_std", prosody.log_f0_std},
              {"ap_mean", prosody.ap_mean},
              {"ap_std", prosody.ap_std},
              {"energy_mean", prosody.energy_mean},
              {"energy_std", prosody.energy_std}}}};
  }

  static FeatureNorm from_json(const nlohmann::json& j) {
    FeatureNorm n;
    n.fbank_mean = j.at("fbank_mean").get<std::vector<double>>();
    n.fbank_std = j.at("fbank_std").get<std::vector<double>>();
    const auto& p = j.at("prosody");
    n.prosody.log_f0_mean = p.at("log_f0_mean").get<double>();
    n.prosody.log_f0_std = p.at("log_f0_std").get<double>();
    n.prosody.ap_mean = p.at("ap_mean").get<double>();
    n.prosody.ap_std = p.at("ap_std").get<double>();
    n.prosody.energy_mean = p.at("energy_mean").get<double>();
    n.prosody.energy_std = p.at("energy_std").get<double>();
    return n;
  }
};

struct RawFeatures {
  dsp::FbankFeatures fbank;
  dsp::ProsodyTrack prosody;
};

inline RawFeatures extract_features(const dsp::Waveform& w, const dsp::FrontendConfig& cfg = {}) {
  return {dsp::compute_fbank(w, cfg), dsp::compute_prosody(w, cfg)};
}

inline FeatureNorm estimate_norm(const std::vector<const RawFeatures*>& feats) {
  if (feats.empty()) throw std::invalid_argument("feature statistics need at least one utterance");
  const std::size_t bins = feats.front()->fbank.num_bins;
  std::vector<double> s(bins, 0.0), ss(bins, 0.0);
  std::size_t n = 0;
  std::vector<dsp::ProsodyTrack> tracks;
  for (const RawFeatures* f : feats) {
    for (std::size_t t = 0; t < f->fbank.num_frames; ++t)
      for (std::size_t b = 0; b < bins; ++b) {
        const double v = f->fbank.at(t, b);
        s[b] += v;
        ss[b] += v * v;
      }
    n += f->fbank.num_frames;
    tracks.push_back(f->prosody);
  }
  FeatureNorm norm;
  for (std::size_t b = 0; b < bins; ++b) {
    const double mean = s[b] / static_cast<double>(n);
    const double sd = std::sqrt(std::max(0.0, ss[b] / static_cast<double>(n) - mean * mean));
    norm.fbank_mean.push_back(mean);
    norm.fbank_std.push_back(sd > 1e-6 ? sd : 1.0);
  }
  norm.prosody = dsp::compute_prosody_stats(tracks);
  return norm;
}

// Network-ready view of one utterance.
template <typename T>
struct UtteranceInput {
  Tensor<T> fbank;    // [1, T, 80]
  Tensor<T> prosody;  // [1, T, 3]
  encoders::Alignment alignment;
};

template <typename T>
UtteranceInput<T> prepare_input(const RawFeatures& f, const FeatureNorm& norm, encoders::Alignment alignment) {
  const std::size_t frames = f.fbank.num_frames, bins = f.fbank.num_bins;
  if (norm.fbank_mean.size() != bins) throw ShapeError("feature statistics do not match the filterbank width");
  std::vector<T> fb(frames * bins);
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t b = 0; b < bins; ++b)
      fb[t * bins + b] = static_cast<T>((f.fbank.at(t, b) - norm.fbank_mean[b]) / norm.fbank_std[b]);
  UtteranceInput<T> in;
  in.fbank = Tensor<T>(Shape{1, frames, bins}, std::move(fb));
  in.prosody = reshape(dsp::normalize_prosody<T>(f.prosody, norm.prosody), Shape{1, f.prosody.num_frames, 3});
  in.alignment = std::move(alignment);
  return in;
}

template <typename T>
struct TrialOutput {
  Tensor<T> score;            // [1]
  Tensor<T> logit;            // [1]
  Tensor<T> s_pro;            // [1]
  Tensor<T> v_pro;            // [1, 64], enrollment signature
  Tensor<T> v_pro_q;          // [1, 64], query signature
  Tensor<T> v_at;             // [1, H]
  Tensor<T> query_segments;   // [T'q, D], before modulation
  Tensor<T> text;             // [T'e, D]
  Tensor<T> enroll_segments;  // [T'e, D], only when requested
};

template <typename T>
class KeywordSpotter {
 public:
  KeywordSpotter(const ModelConfig& cfg, Ablation ablation, std::uint64_t seed) : cfg_(cfg), ablation_(ablation) {
    cfg.validate();
    Rng rng(seed);
    encoder_ = encoders::AudioEncoder<T>(params_, "phoneme_stream/encoder", cfg.phoneme, rng);
    std::vector<T> table(cfg.num_phonemes * cfg.phoneme.model_dim);
    for (T& v : table) v = static_cast<T>(rng.normal());
    text_table_ = params_.add("text/embedding", {cfg.num_phonemes, cfg.phoneme.model_dim}, std::move(table));
    prosody_encoder_ = encoders::ProsodyEncoder<T>(params_, "prosody_stream/encoder", cfg.prosody, rng);
    pooler_ = encoders::ProsodyPooler<T>(params_, "prosody_stream/pooler", cfg.prosody, rng);
    film_ = fusion::Film<T>(params_, "fusion/film", cfg.fusion, rng);
    cross_ = fusion::CrossAttention<T>(params_, "fusion/cross_attention", cfg.fusion, rng);
    head_ = fusion::DecisionHead<T>(params_, "fusion/decision", cfg.fusion, rng);
  }

  ParameterSet<T>& parameters() { return params_; }
  const ParameterSet<T>& parameters() const { return params_; }
  const ModelConfig& config() const { return cfg_; }
  Ablation ablation() const { return ablation_; }

  bool uses_prosody() const { return ablation_ != Ablation::kProsody; }

  // Pooled phoneme-segment features of one utterance, [T', D].
  Tensor<T> phoneme_segments(const UtteranceInput<T>& u) const {
    Tensor<T> z = encoders::phoneme_pooler(encoder_(u.fbank), u.alignment);
    return reshape(z, Shape{z.dim(1), z.dim(2)});
  }

  Tensor<T> text_embedding(const std::vector<g2p::PhonemeId>& ids) const {
    return g2p::embed_phonemes(g2p::PhonemeSequence{ids, ""}, text_table_);
  }

  Tensor<T> enrollment_signature(const UtteranceInput<T>& u) const {
    if (!uses_prosody()) return zero_signature();
    return pooler_(prosody_encoder_(u.prosody));
  }

  Tensor<T> query_signature(const UtteranceInput<T>& u) const {
    if (!uses_prosody()) return zero_signature();
    return encoders::prosody_matcher_pool(prosody_encoder_(u.prosody));
  }

  // Scores a query against an enrollment given precomputed pieces. This is
  // the frozen fusion module that the interpolation analysis drives.
  TrialOutput<T> fuse(const Tensor<T>& query_segments, const Tensor<T>& text, const Tensor<T>& v_pro,
                      const Tensor<T>& v_pro_q) const {
    TrialOutput<T> out;
    const std::size_t D = cfg_.fusion.model_dim;
    out.query_segments = query_segments;
    out.text = text;
    out.v_pro = v_pro;
    out.v_pro_q = v_pro_q;
    Tensor<T> zq = reshape(query_segments, Shape{1, query_segments.dim(0), D});
    Tensor<T> zt = reshape(text, Shape{1, text.dim(0), D});
    Tensor<T> modulated = ablation_ == Ablation::kFilm ? zq : film_(zq, v_pro);
    Tensor<T> z_at = cross_(modulated, zt);
    out.s_pro = uses_prosody() ? fusion::prosody_match(v_pro_q, v_pro) : Tensor<T>(Shape{1}, T(0));
    auto d = head_(z_at, v_pro, out.s_pro);
    out.v_at = d.v_at;
    out.logit = d.logit;
    out.score = d.score;
    return out;
  }

  TrialOutput<T> forward(const UtteranceInput<T>& enrollment, const std::vector<g2p::PhonemeId>& text_ids,
                         const UtteranceInput<T>& query, bool encode_enrollment_audio = false) const {
    TrialOutput<T> out =
        fuse(phoneme_segments(query), text_embedding(text_ids), enrollment_signature(enrollment), query_signature(query));
    if (encode_enrollment_audio) out.enroll_segments = phoneme_segments(enrollment);
    return out;
  }

 private:
  Tensor<T> zero_signature() const { return Tensor<T>(Shape{1, cfg_.fusion.prosody_dim}, T(0)); }

  ModelConfig cfg_;
  Ablation ablation_;
  ParameterSet<T> params_;
  encoders::AudioEncoder<T> encoder_;
  Tensor<T> text_table_;
  encoders::ProsodyEncoder<T> prosody_encoder_;
  encoders::ProsodyPooler<T> pooler_;
  fusion::Film<T> film_;
  fusion::CrossAttention<T> cross_;
  fusion::DecisionHead<T> head_;
};

}  // namespace kws::model
