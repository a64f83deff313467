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

// Parametric "speech" corpus with exact phoneme alignments and controllable
// intent and accent prosody. Every utterance draws its randomness from
// derive_seed(master_seed, utterance index), so generation order does not
// matter.

#pragma once

#include "kws/dsp.hpp"
#include "kws/encoders.hpp"
#include "kws/g2p.hpp"
#include "kws/random.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace kws::synth {

using encoders::Alignment;
using encoders::Segment;
using g2p::PhonemeClass;
using g2p::PhonemeId;

class DurationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ManifestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kSampleRate = 16000;
inline constexpr std::size_t kSamplesPerSubframe = 640;  // 4 hops of 160 samples
inline constexpr std::size_t kTailSamples = 240;         // completes the last analysis window
inline constexpr std::size_t kMaxSubframes = 50;         // 2 s
inline constexpr std::size_t kCrossfade = 80;            // 5 ms
inline constexpr double kMinF0 = 80.0, kMaxF0 = 400.0;

enum class Intent { kImperative, kInterrogative, kNeutral };
enum class NegativeKind { kNone, kEasy, kHard, kIntentMismatch, kAccentShift };

inline constexpr std::array<Intent, 3> kIntents{Intent::kImperative, Intent::kInterrogative, Intent::kNeutral};

inline std::string to_string(Intent i) {
  switch (i) {
    case Intent::kImperative: return "imperative";
    case Intent::kInterrogative: return "interrogative";
    case Intent::kNeutral: return "neutral";
  }
  return "?";
}

inline Intent parse_intent(const std::string& s) {
  for (Intent i : kIntents)
    if (to_string(i) == s) return i;
  throw ManifestError("unknown intent '" + s + "'");
}

inline std::string to_string(NegativeKind k) {
  switch (k) {
    case NegativeKind::kNone: return "none";
    case NegativeKind::kEasy: return "easy";
    case NegativeKind::kHard: return "hard";
    case NegativeKind::kIntentMismatch: return "intent_mismatch";
    case NegativeKind::kAccentShift: return "accent_shift";
  }
  return "?";
}

inline NegativeKind parse_negative_kind(const std::string& s) {
  for (NegativeKind k : {NegativeKind::kNone, NegativeKind::kEasy, NegativeKind::kHard, NegativeKind::kIntentMismatch,
                         NegativeKind::kAccentShift})
    if (to_string(k) == s) return k;
  throw ManifestError("unknown negative kind '" + s + "'");
}

// Duration scale per phoneme class (vowel, voiced consonant, unvoiced
// consonant) and a multiplier on the excursion of the F0 contour.
struct AccentProfile {
  std::string name;
  std::array<double, 3> duration_scale;
  double f0_range;
};

inline const std::array<AccentProfile, 4>& accents() {
  static const std::array<AccentProfile, 4> table{{
      {"A", {1.0, 1.0, 1.0}, 1.0},
      {"B", {1.3, 0.9, 0.9}, 1.35},
      {"C", {0.85, 1.25, 1.1}, 0.75},
      {"D", {1.15, 1.0, 1.3}, 1.2},
  }};
  return table;
}

struct ProsodyProfile {
  Intent intent = Intent::kNeutral;
  int accent = 0;
  double f0_base = 140.0;
  std::array<double, 2> jitter_phase{0.0, 0.0};
};

// Commanded F0 at normalized time u in [0, 1].
inline double commanded_f0(const ProsodyProfile& p, double u) {
  const double base = p.f0_base;
  double f = base;
  switch (p.intent) {
    case Intent::kImperative: f = base + 40.0 - 60.0 * u; break;
    case Intent::kInterrogative:
      f = u < 0.7 ? base - 10.0 * (u / 0.7) : base - 10.0 + 70.0 * ((u - 0.7) / 0.3);
      break;
    case Intent::kNeutral:
      f = base + 3.0 * std::sin(2.0 * std::numbers::pi * 1.3 * u + p.jitter_phase[0]) +
          2.0 * std::sin(2.0 * std::numbers::pi * 2.7 * u + p.jitter_phase[1]);
      break;
  }
  f = base + accents().at(static_cast<std::size_t>(p.accent)).f0_range * (f - base);
  return std::clamp(f, kMinF0, kMaxF0);
}

struct Voice {
  double formant_scale = 1.0;
};

struct PhonemeRecipe {
  double f1 = 0, f2 = 0;          // resonances of the harmonic part
  double voice_rms = 0;           // 0 for unvoiced phonemes
  double lowpass = 0;             // corner of an extra roll-off on the harmonics, 0 = none
  double noise_lo = 0, noise_hi = 0;
  double noise_rms = 0;
};

inline PhonemeRecipe recipe(const std::string& sym) {
  static const std::map<std::string, PhonemeRecipe> table{
      {"aa", {730, 1090, 0.25, 0, 0, 0, 0}},   {"ae", {660, 1720, 0.25, 0, 0, 0, 0}},
      {"eh", {530, 1840, 0.25, 0, 0, 0, 0}},   {"ih", {390, 1990, 0.25, 0, 0, 0, 0}},
      {"iy", {270, 2290, 0.25, 0, 0, 0, 0}},   {"ow", {570, 840, 0.25, 0, 0, 0, 0}},
      {"uh", {440, 1020, 0.25, 0, 0, 0, 0}},   {"uw", {300, 870, 0.25, 0, 0, 0, 0}},
      {"b", {200, 700, 0.12, 500, 0, 0, 0}},   {"d", {300, 1700, 0.10, 1500, 2500, 3500, 0.04}},
      {"g", {250, 2200, 0.10, 1500, 1500, 2500, 0.04}},
      {"m", {250, 1100, 0.14, 1500, 0, 0, 0}}, {"n", {250, 1600, 0.14, 1500, 0, 0, 0}},
      {"l", {360, 1050, 0.14, 0, 0, 0, 0}},    {"r", {480, 1400, 0.14, 0, 0, 0, 0}},
      {"v", {220, 1200, 0.08, 1000, 1200, 2200, 0.05}},
      {"z", {250, 1500, 0.08, 1000, 4500, 6500, 0.06}},
      {"p", {0, 0, 0, 0, 500, 1500, 0.06}},    {"t", {0, 0, 0, 0, 2800, 3900, 0.06}},
      {"k", {0, 0, 0, 0, 1600, 2600, 0.06}},   {"f", {0, 0, 0, 0, 6000, 7600, 0.05}},
      {"s", {0, 0, 0, 0, 4200, 5800, 0.07}},
  };
  auto it = table.find(sym);
  if (it == table.end()) throw ConfigError("no synthesis recipe for phoneme '" + sym + "'");
  return it->second;
}

// Phonemes with durations on the subsampled frame grid.
struct KeywordSpec {
  std::string name;
  std::vector<PhonemeId> phonemes;
  std::vector<std::size_t> durations;
};

struct Utterance {
  dsp::Waveform waveform;
  Alignment alignment;
};

namespace detail {

struct Biquad {
  double b0, b1, b2, a1, a2, x1 = 0, x2 = 0, y1 = 0, y2 = 0;

  static Biquad bandpass(double lo, double hi) {
    const double fc = std::sqrt(lo * hi), q = fc / (hi - lo);
    const double w = 2.0 * std::numbers::pi * fc / kSampleRate, alpha = std::sin(w) / (2.0 * q);
    const double a0 = 1.0 + alpha;
    return {alpha / a0, 0.0, -alpha / a0, -2.0 * std::cos(w) / a0, (1.0 - alpha) / a0};
  }

  double operator()(double x) {
    const double y = b0 * x + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
    x2 = x1;
    x1 = x;
    y2 = y1;
    y1 = y;
    return y;
  }
};

inline double resonance(double f, double centre, double bw) {
  const double r = (f - centre) / bw;
  return 1.0 / (1.0 + r * r);
}

inline void normalize_rms(std::vector<double>& v, double target) {
  double ss = 0;
  for (double x : v) ss += x * x;
  const double rms = std::sqrt(ss / std::max<std::size_t>(1, v.size()));
  if (rms > 0)
    for (double& x : v) x *= target / rms;
}

}  // namespace detail

inline Utterance synth_utterance(const KeywordSpec& spec, const ProsodyProfile& profile, const Voice& voice,
                                 std::uint64_t seed, const g2p::PhonemeInventory& inv = {}) {
  if (spec.phonemes.empty() || spec.phonemes.size() != spec.durations.size()) {
    throw ConfigError("keyword '" + spec.name + "' needs one duration per phoneme");
  }
  std::size_t frames = 0;
  for (std::size_t d : spec.durations) {
    if (d < 2) throw DurationError("keyword '" + spec.name + "' has a phoneme shorter than 2 frames");
    frames += d;
  }
  if (frames > kMaxSubframes) {
    throw DurationError("keyword '" + spec.name + "' lasts " + std::to_string(frames) + " frames, above the cap of " +
                        std::to_string(kMaxSubframes));
  }
  Rng rng(seed);
  const std::size_t n = kSamplesPerSubframe * frames + kTailSamples;

  // The contour is laid over the voiced stretch, from the onset of the first
  // voiced phoneme to the end of the last one.
  std::size_t voiced_begin = 0, voiced_end = n, offset = 0;
  bool seen_voiced = false;
  for (std::size_t j = 0; j < spec.phonemes.size(); ++j) {
    const std::size_t seg_end = offset + kSamplesPerSubframe * spec.durations[j];
    if (inv.phoneme_class(spec.phonemes[j]) != g2p::PhonemeClass::kUnvoicedConsonant) {
      if (!seen_voiced) voiced_begin = offset;
      voiced_end = j + 1 == spec.phonemes.size() ? n : seg_end;
      seen_voiced = true;
    }
    offset = seg_end;
  }
  const double voiced_span = static_cast<double>(std::max<std::size_t>(1, voiced_end - voiced_begin - 1));

  std::vector<double> f0(n), phase(n);
  double acc = rng.uniform(0.0, 2.0 * std::numbers::pi);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = (static_cast<double>(i) - static_cast<double>(voiced_begin)) / voiced_span;
    f0[i] = commanded_f0(profile, std::clamp(u, 0.0, 1.0));
    phase[i] = acc;
    acc += 2.0 * std::numbers::pi * f0[i] / kSampleRate;
  }

  // Fixed random phase per harmonic keeps the waveform periodic without the
  // impulse-train shape of an all-cosine stack.
  std::vector<std::complex<double>> harmonic_phase(96);
  for (auto& h : harmonic_phase) h = std::polar(1.0, rng.uniform(0.0, 2.0 * std::numbers::pi));

  Utterance out;
  std::vector<double> mix(n, 0.0);
  std::size_t start_frame = 0;
  for (std::size_t j = 0; j < spec.phonemes.size(); ++j) {
    const std::size_t end_frame = start_frame + spec.durations[j];
    out.alignment.segments.push_back({start_frame, end_frame});
    const std::size_t s0 = start_frame * kSamplesPerSubframe;
    const std::size_t s1 = j + 1 == spec.phonemes.size() ? n : end_frame * kSamplesPerSubframe;
    const std::size_t lo = j == 0 ? 0 : s0 - kCrossfade / 2;
    const std::size_t hi = j + 1 == spec.phonemes.size() ? n : s1 + kCrossfade / 2;
    start_frame = end_frame;

    const PhonemeRecipe r = recipe(inv.symbol(spec.phonemes[j]));
    std::vector<double> seg(hi - lo, 0.0);
    if (r.voice_rms > 0) {
      const double f1 = r.f1 * voice.formant_scale, f2 = r.f2 * voice.formant_scale;
      const double f3 = 2600.0 * voice.formant_scale;
      for (std::size_t i = lo; i < hi; ++i) {
        const std::size_t harmonics = std::min(harmonic_phase.size(), static_cast<std::size_t>(7000.0 / f0[i]));
        const std::complex<double> step = std::polar(1.0, phase[i]);
        std::complex<double> rot = step;
        double sum = 0.0;
        for (std::size_t k = 1; k <= harmonics; ++k, rot *= step) {
          const double f = static_cast<double>(k) * f0[i];
          double amp = 0.02 + detail::resonance(f, f1, 90.0) + 0.7 * detail::resonance(f, f2, 120.0) +
                       0.2 * detail::resonance(f, f3, 200.0);
          if (r.lowpass > 0) amp /= 1.0 + (f / r.lowpass) * (f / r.lowpass);
          sum += amp * (rot * harmonic_phase[k - 1]).real();
        }
        seg[i - lo] = sum;
      }
      detail::normalize_rms(seg, r.voice_rms);
    }
    if (r.noise_rms > 0) {
      detail::Biquad a = detail::Biquad::bandpass(r.noise_lo, r.noise_hi), b = a;
      for (int w = 0; w < 256; ++w) b(a(rng.normal()));
      std::vector<double> noise(hi - lo);
      for (double& x : noise) x = b(a(rng.normal()));
      detail::normalize_rms(noise, r.noise_rms);
      for (std::size_t i = 0; i < seg.size(); ++i) seg[i] += noise[i];
    }
    for (std::size_t i = lo; i < hi; ++i) {
      double w = 1.0;
      if (j > 0) w *= std::clamp((static_cast<double>(i) - static_cast<double>(lo) + 0.5) / kCrossfade, 0.0, 1.0);
      if (j + 1 < spec.phonemes.size())
        w *= std::clamp((static_cast<double>(hi) - static_cast<double>(i) - 0.5) / kCrossfade, 0.0, 1.0);
      mix[i] += w * seg[i - lo];
    }
  }

  double ss = 0.0, peak = 0.0;
  for (double x : mix) ss += x * x;
  const double floor_rms = 0.01 * std::sqrt(ss / static_cast<double>(n));  // -40 dB
  for (double& x : mix) {
    x += floor_rms * rng.normal();
    peak = std::max(peak, std::abs(x));
  }
  const double gain = peak > 0.95 ? 0.95 / peak : 1.0;
  out.waveform.sample_rate = kSampleRate;
  out.waveform.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double q = std::clamp(std::round(mix[i] * gain * 32767.0), -32767.0, 32767.0);
    out.waveform.samples[i] = static_cast<float>(q / 32767.0);
  }
  return out;
}

// ---------------------------------------------------------------- vocabulary

struct Word {
  std::string spelling;
  std::vector<PhonemeId> phonemes;
  std::vector<std::size_t> base_durations;
};

struct AnchorSet {
  Word anchor;
  std::vector<Word> hard, easy;
};

struct Vocabulary {
  std::vector<AnchorSet> anchors;

  g2p::Lexicon lexicon() const {
    g2p::Lexicon lex;
    for (const auto& a : anchors) {
      lex.add(a.anchor.spelling, a.anchor.phonemes);
      for (const auto& w : a.hard) lex.add(w.spelling, w.phonemes);
      for (const auto& w : a.easy) lex.add(w.spelling, w.phonemes);
    }
    return lex;
  }
};

// Letters that the letter-to-sound rules map back to each phoneme.
inline std::string spell(const std::vector<PhonemeId>& ids, const g2p::PhonemeInventory& inv) {
  static const std::map<std::string, std::string> vowels{{"aa", "a"}, {"ae", "ae"}, {"eh", "e"}, {"ih", "i"},
                                                         {"iy", "y"}, {"ow", "o"},  {"uh", "u"}, {"uw", "w"}};
  std::string s;
  for (PhonemeId id : ids) {
    auto it = vowels.find(inv.symbol(id));
    s += it != vowels.end() ? it->second : inv.symbol(id);
  }
  return s;
}

namespace detail {

inline std::size_t class_index(PhonemeClass c) {
  return c == PhonemeClass::kVowel ? 0 : c == PhonemeClass::kVoicedConsonant ? 1 : 2;
}

inline Word random_word(Rng& rng, const g2p::PhonemeInventory& inv) {
  auto vowels = inv.of_class(PhonemeClass::kVowel);
  auto consonants = inv.of_class(PhonemeClass::kVoicedConsonant);
  for (auto c : inv.of_class(PhonemeClass::kUnvoicedConsonant)) consonants.push_back(c);
  const std::size_t len = 3 + rng.index(4);
  bool vowel = rng.uniform() < 0.4;
  Word w;
  for (std::size_t i = 0; i < len; ++i, vowel = !vowel) {
    const auto& pool = vowel ? vowels : consonants;
    PhonemeId p;
    do p = pool[rng.index(pool.size())];
    while (std::find(w.phonemes.begin(), w.phonemes.end(), p) != w.phonemes.end());
    w.phonemes.push_back(p);
    w.base_durations.push_back(vowel ? 3 + rng.index(2) : 2 + (rng.uniform() < 0.3 ? 1 : 0));
  }
  w.spelling = spell(w.phonemes, inv);
  return w;
}

}  // namespace detail

// Anchors with `n_hard` single-substitution neighbours and `n_easy` words
// sharing at most one phoneme. Words are unique across the vocabulary.
inline Vocabulary build_vocabulary(std::size_t n_anchors, std::size_t n_easy, std::size_t n_hard, Rng& rng,
                                   const g2p::PhonemeInventory& inv = {}) {
  Vocabulary vocab;
  std::set<std::vector<PhonemeId>> used;
  auto claim = [&](const Word& w) { return used.insert(w.phonemes).second; };
  for (std::size_t a = 0; a < n_anchors; ++a) {
    AnchorSet set;
    do set.anchor = detail::random_word(rng, inv);
    while (!claim(set.anchor));
    const auto& anchor = set.anchor.phonemes;
    while (set.hard.size() < n_hard) {
      Word w = set.anchor;
      const std::size_t pos = rng.index(anchor.size());
      auto pool = inv.of_class(inv.phoneme_class(anchor[pos]));
      if (inv.phoneme_class(anchor[pos]) != PhonemeClass::kVowel) {
        auto other = inv.of_class(inv.phoneme_class(anchor[pos]) == PhonemeClass::kVoicedConsonant
                                      ? PhonemeClass::kUnvoicedConsonant
                                      : PhonemeClass::kVoicedConsonant);
        pool.insert(pool.end(), other.begin(), other.end());
      }
      PhonemeId p = pool[rng.index(pool.size())];
      if (std::find(anchor.begin(), anchor.end(), p) != anchor.end()) continue;
      w.phonemes[pos] = p;
      w.spelling = spell(w.phonemes, inv);
      if (claim(w)) set.hard.push_back(std::move(w));
    }
    while (set.easy.size() < n_easy) {
      Word w = detail::random_word(rng, inv);
      if (g2p::shared_phonemes(w.phonemes, anchor) > 1 || g2p::edit_distance(w.phonemes, anchor) < 3) continue;
      if (claim(w)) set.easy.push_back(std::move(w));
    }
    vocab.anchors.push_back(std::move(set));
  }
  return vocab;
}

// ---------------------------------------------------------------- corpus plan

struct Speaker {
  int id = 0;
  std::string split;
  double f0_base = 140.0;
  double formant_scale = 1.0;
  double rate = 1.0;
  int accent = 0;
};

struct CorpusConfig {
  std::uint64_t master_seed = 42;
  std::size_t keywords = 20;
  std::size_t easy_per_anchor = 3;
  std::size_t hard_per_anchor = 3;
  std::size_t speakers = 12;
  std::size_t dev_speakers = 2;
  std::size_t test_speakers = 2;
  // Share of (training speaker, anchor) pairs that contribute trials.
  std::size_t train_anchor_fraction_pct = 100;
  // Mismatched-intent negatives per (training speaker, anchor) pair, 1 to 3.
  std::size_t train_intent_negatives = 3;

  void validate() const {
    if (keywords == 0) throw ConfigError("corpus.keywords must be positive");
    if (speakers < dev_speakers + test_speakers + 1) {
      throw ConfigError("corpus.speakers leaves no training speaker after the dev and test splits");
    }
    if (easy_per_anchor == 0 || hard_per_anchor == 0) throw ConfigError("corpus needs easy and hard negatives");
    if (train_anchor_fraction_pct == 0 || train_anchor_fraction_pct > 100) {
      throw ConfigError("corpus.train_anchor_fraction_pct must be in [1, 100]");
    }
    if (train_intent_negatives < 1 || train_intent_negatives > 3) {
      throw ConfigError("corpus.train_intent_negatives must be in [1, 3]");
    }
  }
};

inline nlohmann::json to_json(const CorpusConfig& c) {
  return {{"master_seed", c.master_seed},         {"keywords", c.keywords},
          {"easy_per_anchor", c.easy_per_anchor}, {"hard_per_anchor", c.hard_per_anchor},
          {"speakers", c.speakers},               {"dev_speakers", c.dev_speakers},
          {"test_speakers", c.test_speakers},     {"train_anchor_fraction_pct", c.train_anchor_fraction_pct},
          {"train_intent_negatives", c.train_intent_negatives}};
}

struct UtteranceInfo {
  std::string id;
  std::string wav;  // relative to the corpus directory
  int speaker = 0;
  std::string word;
  std::vector<PhonemeId> phonemes;
  Intent intent = Intent::kNeutral;
  int accent = 0;
  int take = 0;
  Alignment alignment;
  // Synthesis inputs; not serialized.
  KeywordSpec spec;
  ProsodyProfile profile;
  Voice voice;
  std::uint64_t seed = 0;
};

struct TrialInfo {
  std::string id;
  std::string split;
  int label = 0;
  NegativeKind kind = NegativeKind::kNone;
  std::string keyword;
  std::string enrollment_text;
  std::size_t enrollment = 0;  // index into Manifest::utterances
  std::size_t query = 0;
};

struct Manifest {
  std::vector<UtteranceInfo> utterances;
  std::vector<TrialInfo> trials;

  std::vector<std::size_t> trials_in(const std::string& split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < trials.size(); ++i)
      if (trials[i].split == split) out.push_back(i);
    return out;
  }

  std::vector<std::string> splits() const {
    std::vector<std::string> out;
    for (const auto& t : trials)
      if (std::find(out.begin(), out.end(), t.split) == out.end()) out.push_back(t.split);
    return out;
  }
};

struct CorpusPlan {
  CorpusConfig config;
  std::vector<Speaker> speakers;
  Vocabulary vocabulary;
  Manifest manifest;
};

inline std::vector<Speaker> make_speakers(const CorpusConfig& cfg) {
  Rng rng(derive_seed(cfg.master_seed, 0x5bea6e75ULL));
  const std::size_t n = cfg.speakers;
  std::vector<Speaker> out(n);
  // Held-out speakers sit strictly inside the F0 range of the training ones.
  std::vector<std::size_t> order;
  for (std::size_t i = 1; i + 1 < n; ++i) order.push_back(i);
  rng.shuffle(order);
  std::set<std::size_t> dev(order.begin(), order.begin() + static_cast<long>(cfg.dev_speakers));
  std::set<std::size_t> test(order.begin() + static_cast<long>(cfg.dev_speakers),
                             order.begin() + static_cast<long>(cfg.dev_speakers + cfg.test_speakers));
  for (std::size_t i = 0; i < n; ++i) {
    Speaker& s = out[i];
    s.id = static_cast<int>(i);
    s.split = dev.count(i) ? "dev" : test.count(i) ? "test" : "train";
    s.f0_base = 100.0 + 100.0 * static_cast<double>(i) / static_cast<double>(std::max<std::size_t>(1, n - 1));
    s.formant_scale = rng.uniform(0.92, 1.08);
    s.rate = rng.uniform(0.9, 1.1);
    s.accent = static_cast<int>(rng.index(accents().size()));
  }
  return out;
}

inline KeywordSpec realize(const Word& w, int accent, double rate, const g2p::PhonemeInventory& inv) {
  KeywordSpec spec{w.spelling, w.phonemes, {}};
  const auto& scale = accents().at(static_cast<std::size_t>(accent)).duration_scale;
  for (std::size_t j = 0; j < w.phonemes.size(); ++j) {
    const double d = static_cast<double>(w.base_durations[j]) * scale[detail::class_index(inv.phoneme_class(w.phonemes[j]))] * rate;
    spec.durations.push_back(std::max<std::size_t>(2, static_cast<std::size_t>(std::lround(d))));
  }
  return spec;
}

inline CorpusPlan plan_corpus(const CorpusConfig& cfg, const g2p::PhonemeInventory& inv = {}) {
  cfg.validate();
  CorpusPlan plan;
  plan.config = cfg;
  plan.speakers = make_speakers(cfg);
  Rng vocab_rng(derive_seed(cfg.master_seed, 0x70cabULL));
  plan.vocabulary = build_vocabulary(cfg.keywords, cfg.easy_per_anchor, cfg.hard_per_anchor, vocab_rng, inv);
  Rng rng(derive_seed(cfg.master_seed, 0x7121a1ULL));
  Manifest& m = plan.manifest;
  std::map<std::string, std::size_t> index;

  auto utterance = [&](const Speaker& spk, const Word& w, Intent intent, int accent, int take) {
    const std::string id = "s" + std::to_string(spk.id) + "_" + w.spelling + "_" + to_string(intent).substr(0, 3) +
                           "_" + accents().at(static_cast<std::size_t>(accent)).name + "_" + std::to_string(take);
    if (auto it = index.find(id); it != index.end()) return it->second;
    UtteranceInfo u;
    u.id = id;
    u.wav = "audio/" + id + ".wav";
    u.speaker = spk.id;
    u.word = w.spelling;
    u.phonemes = w.phonemes;
    u.intent = intent;
    u.accent = accent;
    u.take = take;
    u.seed = derive_seed(cfg.master_seed, 0x100000ULL + m.utterances.size());
    Rng local(u.seed ^ 0x9e3779b9ULL);
    u.spec = realize(w, accent, spk.rate, inv);
    u.profile.intent = intent;
    u.profile.accent = accent;
    u.profile.f0_base = spk.f0_base * (1.0 + 0.03 * std::clamp(local.normal(), -2.0, 2.0));
    u.profile.jitter_phase = {local.uniform(0.0, 2.0 * std::numbers::pi), local.uniform(0.0, 2.0 * std::numbers::pi)};
    u.voice.formant_scale = spk.formant_scale;
    for (std::size_t j = 0, t = 0; j < u.spec.durations.size(); ++j) {
      u.alignment.segments.push_back({t, t + u.spec.durations[j]});
      t += u.spec.durations[j];
    }
    index[id] = m.utterances.size();
    m.utterances.push_back(std::move(u));
    return m.utterances.size() - 1;
  };
  auto trial = [&](const std::string& split, int label, NegativeKind kind, const AnchorSet& a, std::size_t enroll,
                   std::size_t query) {
    TrialInfo t;
    t.id = split + "_" + std::to_string(m.trials.size());
    t.split = split;
    t.label = label;
    t.kind = kind;
    t.keyword = a.anchor.spelling;
    t.enrollment_text = a.anchor.spelling;
    t.enrollment = enroll;
    t.query = query;
    m.trials.push_back(std::move(t));
  };

  std::uint64_t pair_id = 0;
  for (const Speaker& spk : plan.speakers) {
    const int native = spk.accent;
    for (const AnchorSet& a : plan.vocabulary.anchors) {
      ++pair_id;
      auto positives = [&](const std::string& split) {
        for (Intent i : kIntents)
          trial(split, 1, NegativeKind::kNone, a, utterance(spk, a.anchor, i, native, 0),
                utterance(spk, a.anchor, i, native, 1));
      };
      if (spk.split == "train") {
        if (derive_seed(cfg.master_seed, 0x9a125ULL + pair_id) % 100 >= cfg.train_anchor_fraction_pct) continue;
        positives("train");
        const Intent ie = kIntents[rng.index(3)], ih = kIntents[rng.index(3)];
        const std::size_t first = rng.index(3);
        // Reversed takes keep the split balanced as intent negatives are added.
        for (std::size_t k = 1; k < cfg.train_intent_negatives; ++k) {
          const Intent i = kIntents[(first + k) % 3];
          trial("train", 1, NegativeKind::kNone, a, utterance(spk, a.anchor, i, native, 1),
                utterance(spk, a.anchor, i, native, 0));
        }
        trial("train", 0, NegativeKind::kEasy, a, utterance(spk, a.anchor, ie, native, 0),
              utterance(spk, a.easy[rng.index(a.easy.size())], ie, native, 1));
        trial("train", 0, NegativeKind::kHard, a, utterance(spk, a.anchor, ih, native, 0),
              utterance(spk, a.hard[rng.index(a.hard.size())], ih, native, 1));
        for (std::size_t k = 0; k < cfg.train_intent_negatives; ++k) {
          const std::size_t im = (first + k) % 3;
          const Intent other = kIntents[(im + 1 + rng.index(2)) % 3];
          trial("train", 0, NegativeKind::kIntentMismatch, a, utterance(spk, a.anchor, kIntents[im], native, 0),
                utterance(spk, a.anchor, other, native, 1));
        }
        continue;
      }
      const std::string& s = spk.split;
      positives(s + "_easy");
      for (std::size_t k = 0; k < a.easy.size(); ++k) {
        const Intent i = kIntents[k % 3];
        trial(s + "_easy", 0, NegativeKind::kEasy, a, utterance(spk, a.anchor, i, native, 0),
              utterance(spk, a.easy[k], i, native, 1));
      }
      positives(s + "_hard");
      for (std::size_t k = 0; k < a.hard.size(); ++k) {
        const Intent i = kIntents[k % 3];
        trial(s + "_hard", 0, NegativeKind::kHard, a, utterance(spk, a.anchor, i, native, 0),
              utterance(spk, a.hard[k], i, native, 1));
      }
      positives(s + "_intent");
      for (std::size_t k = 0; k < 3; ++k) {
        const Intent other = kIntents[(k + 1 + rng.index(2)) % 3];
        trial(s + "_intent", 0, NegativeKind::kIntentMismatch, a, utterance(spk, a.anchor, kIntents[k], native, 0),
              utterance(spk, a.anchor, other, native, 1));
      }
      const int shifted = static_cast<int>((static_cast<std::size_t>(native) + 1 + rng.index(accents().size() - 1)) %
                                           accents().size());
      for (Intent i : kIntents)
        trial(s + "_accent", 1, NegativeKind::kAccentShift, a, utterance(spk, a.anchor, i, native, 0),
              utterance(spk, a.anchor, i, shifted, 1));
      for (std::size_t k = 0; k < a.hard.size(); ++k) {
        const Intent i = kIntents[k % 3];
        trial(s + "_accent", 0, NegativeKind::kHard, a, utterance(spk, a.anchor, i, native, 0),
              utterance(spk, a.hard[k], i, shifted, 1));
      }
    }
  }
  return plan;
}

inline Utterance synthesize(const UtteranceInfo& u, const g2p::PhonemeInventory& inv = {}) {
  return synth_utterance(u.spec, u.profile, u.voice, u.seed, inv);
}

// Synthesizes every planned utterance with `threads` workers. Each utterance
// owns its random stream, so the result does not depend on `threads`.
inline std::vector<dsp::Waveform> synthesize_all(const Manifest& m, std::size_t threads = 1,
                                                 const g2p::PhonemeInventory& inv = {}) {
  std::vector<dsp::Waveform> out(m.utterances.size());
  threads = std::max<std::size_t>(1, threads);
  auto work = [&](std::size_t first) {
    for (std::size_t i = first; i < out.size(); i += threads) out[i] = synthesize(m.utterances[i], inv).waveform;
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t);
    for (auto& th : pool) th.join();
  }
  return out;
}

// ---------------------------------------------------------------- file I/O

inline std::string wav_bytes(const dsp::Waveform& w) {
  auto u32 = [](std::string& s, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  auto u16 = [](std::string& s, std::uint16_t v) {
    s.push_back(static_cast<char>(v & 0xff));
    s.push_back(static_cast<char>(v >> 8));
  };
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(w.samples.size() * 2);
  std::string s = "RIFF";
  u32(s, 36 + data_bytes);
  s += "WAVEfmt ";
  u32(s, 16);
  u16(s, 1);
  u16(s, 1);
  u32(s, static_cast<std::uint32_t>(w.sample_rate));
  u32(s, static_cast<std::uint32_t>(w.sample_rate) * 2);
  u16(s, 2);
  u16(s, 16);
  s += "data";
  u32(s, data_bytes);
  for (float x : w.samples) {
    const long q = std::lround(std::clamp(static_cast<double>(x), -1.0, 1.0) * 32767.0);
    u16(s, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }
  return s;
}

inline void write_wav(const std::string& path, const dsp::Waveform& w) {
  std::ofstream os(path, std::ios::binary);
  const std::string bytes = wav_bytes(w);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("cannot write " + path);
}

// 16-bit PCM mono only.
inline dsp::Waveform parse_wav(const std::string& bytes, const std::string& name = "wav") {
  auto u32 = [&](std::size_t p) {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(bytes[p + i]);
    return v;
  };
  auto u16 = [&](std::size_t p) {
    return static_cast<std::uint16_t>(static_cast<unsigned char>(bytes[p]) |
                                      (static_cast<unsigned char>(bytes[p + 1]) << 8));
  };
  if (bytes.size() < 12 || bytes.compare(0, 4, "RIFF") != 0 || bytes.compare(8, 4, "WAVE") != 0) {
    throw std::runtime_error(name + ": not a RIFF/WAVE file");
  }
  dsp::Waveform w;
  bool have_fmt = false;
  for (std::size_t p = 12; p + 8 <= bytes.size();) {
    const std::string id = bytes.substr(p, 4);
    const std::size_t len = u32(p + 4);
    if (p + 8 + len > bytes.size()) throw std::runtime_error(name + ": truncated chunk " + id);
    if (id == "fmt ") {
      if (u16(p + 8) != 1 || u16(p + 10) != 1 || u16(p + 22) != 16) {
        throw std::runtime_error(name + ": only 16-bit mono PCM is supported");
      }
      w.sample_rate = static_cast<int>(u32(p + 12));
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw std::runtime_error(name + ": data before fmt chunk");
      w.samples.resize(len / 2);
      for (std::size_t i = 0; i < len / 2; ++i)
        w.samples[i] = static_cast<float>(static_cast<std::int16_t>(u16(p + 8 + 2 * i)) / 32767.0);
      return w;
    }
    p += 8 + len + (len & 1);
  }
  throw std::runtime_error(name + ": no data chunk");
}

inline dsp::Waveform read_wav(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return parse_wav(bytes, path);
}

inline nlohmann::json utterance_json(const UtteranceInfo& u, const g2p::PhonemeInventory& inv) {
  nlohmann::json align = nlohmann::json::array(), phones = nlohmann::json::array();
  for (const auto& s : u.alignment.segments) align.push_back({s.start, s.end});
  for (PhonemeId p : u.phonemes) phones.push_back(inv.symbol(p));
  return {{"id", u.id},
          {"wav", u.wav},
          {"speaker", u.speaker},
          {"word", u.word},
          {"phonemes", phones},
          {"intent", to_string(u.intent)},
          {"accent", accents().at(static_cast<std::size_t>(u.accent)).name},
          {"take", u.take},
          {"alignment", align}};
}

// One trial per line with both utterances embedded.
inline std::string manifest_jsonl(const Manifest& m, const g2p::PhonemeInventory& inv = {}) {
  std::ostringstream os;
  for (const auto& t : m.trials) {
    nlohmann::json j{{"id", t.id},
                     {"split", t.split},
                     {"label", t.label},
                     {"negative_kind", to_string(t.kind)},
                     {"keyword", t.keyword},
                     {"enrollment_text", t.enrollment_text},
                     {"enrollment", utterance_json(m.utterances.at(t.enrollment), inv)},
                     {"query", utterance_json(m.utterances.at(t.query), inv)}};
    os << j.dump() << '\n';
  }
  return os.str();
}

inline int parse_accent(const std::string& s) {
  for (std::size_t i = 0; i < accents().size(); ++i)
    if (accents()[i].name == s) return static_cast<int>(i);
  throw ManifestError("unknown accent '" + s + "'");
}

inline Manifest parse_manifest(std::istream& in, const g2p::PhonemeInventory& inv = {}) {
  Manifest m;
  std::map<std::string, std::size_t> index;
  auto utterance = [&](const nlohmann::json& j) {
    const std::string id = j.at("id").get<std::string>();
    if (auto it = index.find(id); it != index.end()) return it->second;
    UtteranceInfo u;
    u.id = id;
    u.wav = j.at("wav").get<std::string>();
    u.speaker = j.at("speaker").get<int>();
    u.word = j.at("word").get<std::string>();
    for (const auto& p : j.at("phonemes")) u.phonemes.push_back(inv.id(p.get<std::string>()));
    u.intent = parse_intent(j.at("intent").get<std::string>());
    u.accent = parse_accent(j.at("accent").get<std::string>());
    u.take = j.value("take", 0);
    for (const auto& s : j.at("alignment"))
      u.alignment.segments.push_back({s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>()});
    if (u.alignment.segments.size() != u.phonemes.size()) {
      throw ManifestError("utterance " + id + ": alignment and phoneme counts differ");
    }
    index[id] = m.utterances.size();
    m.utterances.push_back(std::move(u));
    return m.utterances.size() - 1;
  };
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      TrialInfo t;
      t.id = j.at("id").get<std::string>();
      t.split = j.at("split").get<std::string>();
      t.label = j.at("label").get<int>();
      t.kind = parse_negative_kind(j.value("negative_kind", std::string("none")));
      t.keyword = j.value("keyword", std::string());
      t.enrollment_text = j.at("enrollment_text").get<std::string>();
      t.enrollment = utterance(j.at("enrollment"));
      t.query = utterance(j.at("query"));
      m.trials.push_back(std::move(t));
    } catch (const nlohmann::json::exception& e) {
      throw ManifestError("manifest line " + std::to_string(lineno) + ": " + e.what());
    } catch (const g2p::InventoryError& e) {
      throw ManifestError("manifest line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return m;
}

inline Manifest read_manifest(const std::string& path, const g2p::PhonemeInventory& inv = {}) {
  std::ifstream in(path);
  if (!in) throw ManifestError("cannot open manifest " + path);
  return parse_manifest(in, inv);
}

inline nlohmann::json corpus_json(const CorpusPlan& plan, const g2p::PhonemeInventory& inv = {}) {
  nlohmann::json speakers = nlohmann::json::array(), vocab = nlohmann::json::array();
  for (const auto& s : plan.speakers)
    speakers.push_back({{"id", s.id},
                        {"split", s.split},
                        {"f0_base", s.f0_base},
                        {"formant_scale", s.formant_scale},
                        {"rate", s.rate},
                        {"accent", accents().at(static_cast<std::size_t>(s.accent)).name}});
  auto words = [&](const std::vector<Word>& ws) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& w : ws) out.push_back(w.spelling);
    return out;
  };
  for (const auto& a : plan.vocabulary.anchors)
    vocab.push_back({{"anchor", a.anchor.spelling}, {"hard", words(a.hard)}, {"easy", words(a.easy)}});
  (void)inv;
  return {{"config", to_json(plan.config)}, {"speakers", speakers}, {"vocabulary", vocab}};
}

// Writes audio/*.wav, manifest.jsonl, lexicon.txt and corpus.json under `dir`.
inline void write_corpus(const std::string& dir, const CorpusPlan& plan, std::size_t threads = 1,
                         const g2p::PhonemeInventory& inv = {}) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "audio");
  const auto waves = synthesize_all(plan.manifest, threads, inv);
  for (std::size_t i = 0; i < waves.size(); ++i)
    write_wav((fs::path(dir) / plan.manifest.utterances[i].wav).string(), waves[i]);
  std::ofstream(fs::path(dir) / "manifest.jsonl") << manifest_jsonl(plan.manifest, inv);
  std::ofstream(fs::path(dir) / "lexicon.txt") << plan.vocabulary.lexicon().serialize(inv);
  std::ofstream(fs::path(dir) / "corpus.json") << corpus_json(plan, inv).dump(2) << '\n';
}

}  // namespace kws::synth
