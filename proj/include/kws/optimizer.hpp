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

// AdamW with decoupled weight decay, a linear-warmup cosine learning-rate
// schedule and global gradient-norm clipping.

#pragma once

#include "kws/params.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace kws::optim {

struct AdamWConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-3;
};

struct ScheduleConfig {
  double warmup_epochs = 5;
  double total_epochs = 40;
  std::size_t steps_per_epoch = 1;
  double peak_lr = 3e-4;
  double floor_lr = 0.0;

  void validate() const {
    if (!(warmup_epochs >= 0 && warmup_epochs < total_epochs)) {
      throw std::invalid_argument("warmup must be shorter than the whole schedule");
    }
    if (steps_per_epoch == 0) throw std::invalid_argument("steps_per_epoch must be positive");
  }
  double warmup_steps() const { return warmup_epochs * static_cast<double>(steps_per_epoch); }
  double total_steps() const { return total_epochs * static_cast<double>(steps_per_epoch); }
};

inline double lr_at(double step, const ScheduleConfig& cfg) {
  cfg.validate();
  const double warm = cfg.warmup_steps(), total = cfg.total_steps();
  if (step <= 0) return warm > 0 ? 0.0 : cfg.peak_lr;
  if (step < warm) return cfg.peak_lr * step / warm;
  const double progress = std::min(1.0, (step - warm) / (total - warm));
  return cfg.floor_lr + 0.5 * (cfg.peak_lr - cfg.floor_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

// Scales all gradients so their joint L2 norm is at most `max_norm`.
// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(ParameterSet<T>& params, double max_norm) {
  double ss = 0.0;
  for (auto& e : params.entries())
    if (e.tensor.has_grad())
      for (T g : e.tensor.grad()) ss += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(ss);
  if (std::isfinite(norm) && norm > max_norm && max_norm > 0) {
    const T f = static_cast<T>(max_norm / norm);
    for (auto& e : params.entries())
      if (e.tensor.has_grad())
        for (T& g : e.tensor.mutable_grad()) g *= f;
  }
  return norm;
}

template <typename T>
class AdamW {
 public:
  AdamW(ParameterSet<T>& params, AdamWConfig cfg = {}) : params_(&params), cfg_(cfg) {
    for (const auto& e : params.entries()) {
      m_.emplace_back(e.tensor.numel(), T(0));
      v_.emplace_back(e.tensor.numel(), T(0));
    }
  }

  // One update at learning rate `lr`. A non-finite gradient leaves every
  // parameter and moment untouched and returns false.
  bool step(double lr) {
    auto& entries = params_->entries();
    for (const auto& e : entries)
      if (e.tensor.has_grad())
        for (T g : e.tensor.grad())
          if (!std::isfinite(static_cast<double>(g))) return false;
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const double decay = 1.0 - lr * cfg_.weight_decay;
    for (std::size_t p = 0; p < entries.size(); ++p) {
      auto theta = entries[p].tensor.mutable_data();
      const bool has = entries[p].tensor.has_grad();
      auto& m = m_[p];
      auto& v = v_[p];
      for (std::size_t i = 0; i < theta.size(); ++i) {
        const double g = has ? static_cast<double>(entries[p].tensor.grad()[i]) : 0.0;
        double th = static_cast<double>(theta[i]) * decay;
        const double mi = cfg_.beta1 * static_cast<double>(m[i]) + (1.0 - cfg_.beta1) * g;
        const double vi = cfg_.beta2 * static_cast<double>(v[i]) + (1.0 - cfg_.beta2) * g * g;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        const double m_hat = mi / bc1;
        const double v_hat = vi / bc2;
        th -= lr * m_hat / (std::sqrt(v_hat) + cfg_.eps);
        theta[i] = static_cast<T>(th);
      }
    }
    return true;
  }

  std::size_t steps() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

  void append_state(Checkpoint& ckpt) const {
    const auto& entries = params_->entries();
    for (std::size_t p = 0; p < entries.size(); ++p) {
      ckpt.entries.push_back({"optim.m/" + entries[p].path, entries[p].tensor.shape(),
                              std::vector<float>(m_[p].begin(), m_[p].end())});
      ckpt.entries.push_back({"optim.v/" + entries[p].path, entries[p].tensor.shape(),
                              std::vector<float>(v_[p].begin(), v_[p].end())});
    }
    ckpt.metadata["optim_step"] = t_;
  }

  void load_state(const Checkpoint& ckpt) {
    const auto& entries = params_->entries();
    for (std::size_t p = 0; p < entries.size(); ++p) {
      const CheckpointEntry* m = ckpt.find("optim.m/" + entries[p].path);
      const CheckpointEntry* v = ckpt.find("optim.v/" + entries[p].path);
      if (!m || !v || m->values.size() != m_[p].size() || v->values.size() != v_[p].size()) {
        throw VersioningError("checkpoint lacks optimizer state for " + entries[p].path);
      }
      m_[p].assign(m->values.begin(), m->values.end());
      v_[p].assign(v->values.begin(), v->values.end());
    }
    t_ = ckpt.metadata.value("optim_step", std::size_t{0});
  }

 private:
  ParameterSet<T>* params_;
  AdamWConfig cfg_;
  std::vector<std::vector<T>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace kws::optim
