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

// Front-end features: 80-bin log-mel filterbank and the (F0, aperiodicity,
// RMS energy) prosody contour, both on a 25 ms / 10 ms frame grid.

#pragma once

#include "kws/params.hpp"
#include "kws/tensor.hpp"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace kws::dsp {

class DspError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TooShortError : public DspError {
 public:
  using DspError::DspError;
};

class UnsupportedRateError : public DspError {
 public:
  using DspError::DspError;
};

struct Waveform {
  std::vector<float> samples;
  int sample_rate = 16000;
};

struct FrontendConfig {
  int sample_rate = 16000;
  std::size_t frame_length = 400;  // 25 ms
  std::size_t frame_shift = 160;   // 10 ms
  std::size_t fft_size = 512;
  std::size_t num_mel_bins = 80;
  double low_hz = 20.0;
  double high_hz = 7600.0;
  double log_floor = 1e-10;
  double f0_min_hz = 60.0;
  double f0_max_hz = 500.0;
  double voicing_threshold = 0.5;
  double pitch_lowpass_hz = 1000.0;  // 0 disables the pre-filter
};

struct FbankFeatures {
  std::size_t num_frames = 0;
  std::size_t num_bins = 0;
  std::vector<float> frames;  // num_frames x num_bins, row-major
  double frame_shift_ms = 10.0;
  double frame_length_ms = 25.0;

  float at(std::size_t t, std::size_t b) const { return frames[t * num_bins + b]; }
};

// Columns: F0 in Hz (0 = unvoiced), aperiodicity in [0,1], RMS energy in [0,1].
struct ProsodyTrack {
  std::size_t num_frames = 0;
  std::vector<float> frames;  // num_frames x 3

  float f0(std::size_t t) const { return frames[t * 3]; }
  float ap(std::size_t t) const { return frames[t * 3 + 1]; }
  float energy(std::size_t t) const { return frames[t * 3 + 2]; }
};

struct PitchFrame {
  double f0_hz = 0.0;
  double periodicity = 0.0;
};

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

inline std::size_t num_frames(std::size_t num_samples, const FrontendConfig& cfg) {
  if (num_samples < cfg.frame_length) return 0;
  return 1 + (num_samples - cfg.frame_length) / cfg.frame_shift;
}

inline void check_waveform(const Waveform& w, const FrontendConfig& cfg) {
  if (w.sample_rate != cfg.sample_rate) {
    throw UnsupportedRateError("sample rate " + std::to_string(w.sample_rate) + " Hz is not supported (expected " +
                               std::to_string(cfg.sample_rate) + ")");
  }
  if (w.samples.size() < cfg.frame_length) {
    throw TooShortError("waveform of " + std::to_string(w.samples.size()) + " samples is shorter than one frame (" +
                        std::to_string(cfg.frame_length) + ")");
  }
}

inline std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n - 1));
  return w;
}

// Triangular filters with vertices equally spaced on the mel scale between
// low_hz and high_hz, evaluated at the FFT bin frequencies. Returns
// num_mel_bins x (fft_size/2 + 1) weights.
class MelBanks {
 public:
  explicit MelBanks(const FrontendConfig& cfg) : num_fft_bins_(cfg.fft_size / 2 + 1) {
    const std::size_t m = cfg.num_mel_bins;
    const double mel_lo = hz_to_mel(cfg.low_hz), mel_hi = hz_to_mel(cfg.high_hz);
    std::vector<double> edges(m + 2);
    for (std::size_t i = 0; i < m + 2; ++i)
      edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) / static_cast<double>(m + 1));
    centers_.resize(m);
    weights_.assign(m * num_fft_bins_, 0.0);
    const double bin_hz = static_cast<double>(cfg.sample_rate) / static_cast<double>(cfg.fft_size);
    for (std::size_t f = 0; f < m; ++f) {
      const double left = edges[f], center = edges[f + 1], right = edges[f + 2];
      centers_[f] = center;
      for (std::size_t k = 0; k < num_fft_bins_; ++k) {
        const double hz = static_cast<double>(k) * bin_hz;
        double w = 0.0;
        if (hz > left && hz <= center) w = (hz - left) / (center - left);
        else if (hz > center && hz < right) w = (right - hz) / (right - center);
        weights_[f * num_fft_bins_ + k] = w;
      }
    }
  }

  std::size_t num_bins() const { return centers_.size(); }
  double center_hz(std::size_t f) const { return centers_[f]; }
  double weight(std::size_t f, std::size_t k) const { return weights_[f * num_fft_bins_ + k]; }
  std::size_t num_fft_bins() const { return num_fft_bins_; }

 private:
  std::size_t num_fft_bins_;
  std::vector<double> centers_;
  std::vector<double> weights_;
};

// Hann window, power spectrum, mel filters, natural log with a floor.
inline FbankFeatures compute_fbank(const Waveform& w, const FrontendConfig& cfg = {}) {
  check_waveform(w, cfg);
  const MelBanks banks(cfg);
  const auto window = hann_window(cfg.frame_length);
  FbankFeatures out;
  out.num_frames = num_frames(w.samples.size(), cfg);
  out.num_bins = cfg.num_mel_bins;
  out.frame_shift_ms = 1000.0 * static_cast<double>(cfg.frame_shift) / cfg.sample_rate;
  out.frame_length_ms = 1000.0 * static_cast<double>(cfg.frame_length) / cfg.sample_rate;
  out.frames.resize(out.num_frames * out.num_bins);
  Eigen::FFT<double> fft;
  fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
  std::vector<double> frame_buf(cfg.fft_size);
  std::vector<std::complex<double>> spectrum;
  std::vector<double> power(banks.num_fft_bins());
  for (std::size_t t = 0; t < out.num_frames; ++t) {
    std::fill(frame_buf.begin(), frame_buf.end(), 0.0);
    const float* frame = w.samples.data() + t * cfg.frame_shift;
    for (std::size_t i = 0; i < cfg.frame_length; ++i) frame_buf[i] = frame[i] * window[i];
    fft.fwd(spectrum, frame_buf);
    for (std::size_t k = 0; k < power.size(); ++k) power[k] = std::norm(spectrum[k]);
    for (std::size_t f = 0; f < out.num_bins; ++f) {
      double e = 0.0;
      for (std::size_t k = 0; k < power.size(); ++k) e += banks.weight(f, k) * power[k];
      out.frames[t * out.num_bins + f] = static_cast<float>(std::log(std::max(e, cfg.log_floor)));
    }
  }
  return out;
}

// Normalized cross-correlation over the 25 ms frame of the low-passed signal:
//   r(l) = Σ x[n]x[n+l] / sqrt(Σ x[n]² · Σ x[n+l]²),  n = 0 .. N−l−1
// The pitch lag is the shortest local maximum within 3% of the best peak in
// the 60–500 Hz lag range, refined by parabolic interpolation.
inline std::vector<PitchFrame> estimate_f0(const Waveform& w, const FrontendConfig& cfg = {}) {
  check_waveform(w, cfg);
  const std::size_t T = num_frames(w.samples.size(), cfg);
  const std::size_t N = cfg.frame_length;
  const auto sr = static_cast<double>(cfg.sample_rate);
  const auto min_lag = static_cast<std::size_t>(std::floor(sr / cfg.f0_max_hz));
  const auto max_lag = std::min(N - 2, static_cast<std::size_t>(std::ceil(sr / cfg.f0_min_hz)));
  std::vector<PitchFrame> out(T);
  std::vector<double> filtered(w.samples.begin(), w.samples.end());
  if (cfg.pitch_lowpass_hz > 0.0) {
    // Two cascaded second-order Butterworth sections.
    const double wc = 2.0 * std::numbers::pi * cfg.pitch_lowpass_hz / sr;
    const double alpha = std::sin(wc) / std::sqrt(2.0), cw = std::cos(wc), a0 = 1.0 + alpha;
    const double b0 = (1.0 - cw) / 2.0 / a0, b1 = (1.0 - cw) / a0, a1 = -2.0 * cw / a0, a2 = (1.0 - alpha) / a0;
    for (int pass = 0; pass < 2; ++pass) {
      double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
      for (double& v : filtered) {
        const double y = b0 * v + b1 * x1 + b0 * x2 - a1 * y1 - a2 * y2;
        x2 = x1;
        x1 = v;
        y2 = y1;
        y1 = y;
        v = y;
      }
    }
  }
  std::vector<double> x(N), r(max_lag + 2, 0.0), prefix(N + 1, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    const double* frame = filtered.data() + t * cfg.frame_shift;
    double mean = 0.0;
    for (std::size_t i = 0; i < N; ++i) mean += frame[i];
    mean /= static_cast<double>(N);
    double energy = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      x[i] = frame[i] - mean;
      energy += x[i] * x[i];
    }
    if (energy <= 1e-12) continue;  // silence: f0 = 0, periodicity = 0
    for (std::size_t i = 0; i < N; ++i) prefix[i + 1] = prefix[i] + x[i] * x[i];
    std::fill(r.begin(), r.end(), 0.0);
    for (std::size_t lag = min_lag - 1; lag <= max_lag + 1 && lag < N; ++lag) {
      double num = 0.0;
      for (std::size_t n = 0; n + lag < N; ++n) num += x[n] * x[n + lag];
      const double e0 = prefix[N - lag], e1 = prefix[N] - prefix[lag];
      r[lag] = (e0 > 0.0 && e1 > 0.0) ? num / std::sqrt(e0 * e1) : 0.0;
    }
    double best = -1.0;
    for (std::size_t lag = min_lag; lag <= max_lag; ++lag) best = std::max(best, r[lag]);
    std::size_t chosen = 0;
    for (std::size_t lag = min_lag; lag <= max_lag; ++lag) {
      const bool peak = r[lag] >= r[lag - 1] && r[lag] >= r[lag + 1];
      if (peak && r[lag] >= best - 0.03) {
        chosen = lag;
        break;
      }
    }
    if (chosen == 0) continue;
    const double value = r[chosen];
    out[t].periodicity = std::clamp(value, 0.0, 1.0);
    if (value < cfg.voicing_threshold) continue;
    const double a = r[chosen - 1], b = r[chosen], c = r[chosen + 1];
    const double denom = a - 2.0 * b + c;
    double offset = denom < 0.0 ? 0.5 * (a - c) / denom : 0.0;
    offset = std::clamp(offset, -0.5, 0.5);
    out[t].f0_hz = std::clamp(sr / (static_cast<double>(chosen) + offset), cfg.f0_min_hz, cfg.f0_max_hz);
  }
  return out;
}

inline ProsodyTrack compute_prosody(const Waveform& w, const FrontendConfig& cfg = {}) {
  const auto pitch = estimate_f0(w, cfg);
  const auto window = hann_window(cfg.frame_length);
  ProsodyTrack track;
  track.num_frames = pitch.size();
  track.frames.assign(track.num_frames * 3, 0.0f);
  std::vector<double> rms(track.num_frames, 0.0);
  double peak = 0.0;
  for (std::size_t t = 0; t < track.num_frames; ++t) {
    const float* frame = w.samples.data() + t * cfg.frame_shift;
    double ss = 0.0;
    for (std::size_t i = 0; i < cfg.frame_length; ++i) {
      const double v = frame[i] * window[i];
      ss += v * v;
    }
    rms[t] = std::sqrt(ss / static_cast<double>(cfg.frame_length));
    peak = std::max(peak, rms[t]);
  }
  for (std::size_t t = 0; t < track.num_frames; ++t) {
    track.frames[t * 3] = static_cast<float>(pitch[t].f0_hz);
    track.frames[t * 3 + 1] = static_cast<float>(1.0 - pitch[t].periodicity);
    track.frames[t * 3 + 2] = peak > 0.0 ? static_cast<float>(rms[t] / peak) : 0.0f;
  }
  return track;
}

// Per-channel statistics for network input conditioning. The F0 channel is
// described in the log(f0 + 1) domain over voiced frames only.
struct ProsodyStats {
  double log_f0_mean = 0.0, log_f0_std = 1.0;
  double ap_mean = 0.0, ap_std = 1.0;
  double energy_mean = 0.0, energy_std = 1.0;
};

inline ProsodyStats compute_prosody_stats(const std::vector<ProsodyTrack>& tracks) {
  double s[3] = {0, 0, 0}, ss[3] = {0, 0, 0};
  std::size_t n_voiced = 0, n = 0;
  for (const auto& tr : tracks)
    for (std::size_t t = 0; t < tr.num_frames; ++t) {
      ++n;
      if (tr.f0(t) > 0.0f) {
        const double lf = std::log(tr.f0(t) + 1.0);
        s[0] += lf;
        ss[0] += lf * lf;
        ++n_voiced;
      }
      s[1] += tr.ap(t);
      ss[1] += static_cast<double>(tr.ap(t)) * tr.ap(t);
      s[2] += tr.energy(t);
      ss[2] += static_cast<double>(tr.energy(t)) * tr.energy(t);
    }
  ProsodyStats st;
  auto finish = [](double sum, double sq, std::size_t count, double& mean, double& sd) {
    if (count == 0) return;
    mean = sum / static_cast<double>(count);
    sd = std::sqrt(std::max(0.0, sq / static_cast<double>(count) - mean * mean));
  };
  finish(s[0], ss[0], n_voiced, st.log_f0_mean, st.log_f0_std);
  finish(s[1], ss[1], n, st.ap_mean, st.ap_std);
  finish(s[2], ss[2], n, st.energy_mean, st.energy_std);
  return st;
}

// Standardizes the track into a [T, 3] network input. Unvoiced frames carry
// exactly 0 in the F0 channel. A zero standard deviation is replaced by 1 and
// reported through `warnings`.
template <typename T>
Tensor<T> normalize_prosody(const ProsodyTrack& track, const ProsodyStats& stats,
                            std::vector<std::string>* warnings = nullptr) {
  auto safe_std = [&](double sd, const char* channel) {
    if (sd > 0.0) return sd;
    if (warnings) warnings->push_back(std::string("zero std for ") + channel + " replaced by 1");
    return 1.0;
  };
  const double f0_sd = safe_std(stats.log_f0_std, "f0");
  const double ap_sd = safe_std(stats.ap_std, "ap");
  const double en_sd = safe_std(stats.energy_std, "energy");
  std::vector<T> v(track.num_frames * 3);
  for (std::size_t t = 0; t < track.num_frames; ++t) {
    const double f0 = track.f0(t);
    v[t * 3] = f0 > 0.0 ? static_cast<T>((std::log(f0 + 1.0) - stats.log_f0_mean) / f0_sd) : T(0);
    v[t * 3 + 1] = static_cast<T>((track.ap(t) - stats.ap_mean) / ap_sd);
    v[t * 3 + 2] = static_cast<T>((track.energy(t) - stats.energy_mean) / en_sd);
  }
  return Tensor<T>(Shape{track.num_frames, 3}, std::move(v));
}

inline std::string features_csv(const std::vector<float>& frames, std::size_t width,
                                const std::vector<std::string>& header = {}) {
  std::ostringstream os;
  os.precision(9);
  for (std::size_t i = 0; i < header.size(); ++i) os << (i ? "," : "") << header[i];
  if (!header.empty()) os << '\n';
  for (std::size_t r = 0; r < frames.size() / width; ++r) {
    for (std::size_t c = 0; c < width; ++c) os << (c ? "," : "") << frames[r * width + c];
    os << '\n';
  }
  return os.str();
}

// Both streams of one waveform as checkpoint-format entries "fbank" and
// "prosody".
inline Checkpoint features_checkpoint(const FbankFeatures& fb, const ProsodyTrack& pr) {
  Checkpoint ck;
  ck.metadata["kind"] = "features";
  ck.metadata["frame_shift_ms"] = fb.frame_shift_ms;
  ck.metadata["frame_length_ms"] = fb.frame_length_ms;
  ck.entries.push_back({"fbank", {fb.num_frames, fb.num_bins}, fb.frames});
  ck.entries.push_back({"prosody", {pr.num_frames, 3}, pr.frames});
  return ck;
}

}  // namespace kws::dsp
