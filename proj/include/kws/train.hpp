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

// Run configuration, feature caching and the training loop.

#pragma once

#include "kws/losses.hpp"
#include "kws/model.hpp"
#include "kws/optimizer.hpp"
#include "kws/synthdata.hpp"

#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <type_traits>
#include <vector>

namespace kws::train {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  std::uint64_t master_seed = 42;
  synth::CorpusConfig corpus;
  std::string corpus_dir;  // empty: synthesize the corpus in memory
  model::ModelConfig model;
  losses::LossConfig loss;
  optim::AdamWConfig adamw;
  double warmup_epochs = 5;
  double floor_lr = 0.0;
  double clip_norm = 5.0;
  std::size_t epochs = 40;
  std::size_t batch_size = 16;
  std::size_t max_train_trials = 0;  // 0 keeps every training trial
  std::size_t threads = 1;
  model::Ablation ablation = model::Ablation::kNone;
  std::string output_dir = "runs/default";

  void validate() const {
    try {
      corpus.validate();
      model.validate();
      loss.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (threads == 0) throw ConfigError("threads must be positive");
    if (!(warmup_epochs >= 0 && warmup_epochs < static_cast<double>(epochs))) {
      throw ConfigError("optimizer.warmup_epochs must be in [0, epochs)");
    }
    if (!(adamw.lr > 0)) throw ConfigError("optimizer.lr must be positive");
    if (!(clip_norm > 0)) throw ConfigError("optimizer.clip_norm must be positive");
  }
};

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json corpus = synth::to_json(c.corpus);
  corpus.erase("master_seed");
  return {{"master_seed", c.master_seed},
          {"corpus", corpus},
          {"corpus_dir", c.corpus_dir},
          {"model", model::to_json(c.model)},
          {"loss", {{"lambda", c.loss.lambda}, {"tau", c.loss.tau}}},
          {"optimizer",
           {{"lr", c.adamw.lr},
            {"beta1", c.adamw.beta1},
            {"beta2", c.adamw.beta2},
            {"eps", c.adamw.eps},
            {"weight_decay", c.adamw.weight_decay},
            {"warmup_epochs", c.warmup_epochs},
            {"floor_lr", c.floor_lr},
            {"clip_norm", c.clip_norm}}},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"max_train_trials", c.max_train_trials},
          {"threads", c.threads},
          {"ablation", model::to_string(c.ablation)},
          {"output_dir", c.output_dir}};
}

namespace detail {

// Walks one JSON object, checking value types and rejecting unknown keys.
// Every error names the full dotted path of the offending field.
class Reader {
 public:
  Reader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where("") + "expected an object");
  }

  template <typename U>
    requires std::is_unsigned_v<U>
  void read(const std::string& key, U& out) {
    if (const auto* v = take(key)) {
      if (!v->is_number_unsigned()) throw ConfigError(where(key) + "expected a nonnegative integer");
      out = v->get<U>();
    }
  }
  void read(const std::string& key, double& out) {
    if (const auto* v = take(key)) {
      if (!v->is_number()) throw ConfigError(where(key) + "expected a number");
      out = v->get<double>();
    }
  }
  void read(const std::string& key, std::string& out) {
    if (const auto* v = take(key)) {
      if (!v->is_string()) throw ConfigError(where(key) + "expected a string");
      out = v->get<std::string>();
    }
  }

  std::unique_ptr<Reader> child(const std::string& key) {
    const auto* v = take(key);
    return v ? std::make_unique<Reader>(*v, path_.empty() ? key : path_ + "." + key) : nullptr;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError(where(k) + "unknown field");
  }

  std::string where(const std::string& key) const {
    std::string p = path_;
    if (!key.empty()) p = p.empty() ? key : p + "." + key;
    return (p.empty() ? std::string("config") : p) + ": ";
  }

 private:
  const nlohmann::json* take(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

// Fields missing from `j` keep their current values in `base`.
inline RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {}) {
  RunConfig c = std::move(base);
  detail::Reader r(j, "");
  r.read("master_seed", c.master_seed);
  if (auto corpus = r.child("corpus")) {
    corpus->read("keywords", c.corpus.keywords);
    corpus->read("easy_per_anchor", c.corpus.easy_per_anchor);
    corpus->read("hard_per_anchor", c.corpus.hard_per_anchor);
    corpus->read("speakers", c.corpus.speakers);
    corpus->read("dev_speakers", c.corpus.dev_speakers);
    corpus->read("test_speakers", c.corpus.test_speakers);
    corpus->read("train_anchor_fraction_pct", c.corpus.train_anchor_fraction_pct);
    corpus->read("train_intent_negatives", c.corpus.train_intent_negatives);
    corpus->finish();
  }
  r.read("corpus_dir", c.corpus_dir);
  if (auto m = r.child("model")) {
    if (auto p = m->child("phoneme")) {
      p->read("input_dim", c.model.phoneme.input_dim);
      p->read("model_dim", c.model.phoneme.model_dim);
      p->read("blocks", c.model.phoneme.blocks);
      p->read("heads", c.model.phoneme.heads);
      p->read("conv_kernel", c.model.phoneme.conv_kernel);
      p->read("ffn_multiplier", c.model.phoneme.ffn_multiplier);
      p->read("max_positions", c.model.phoneme.max_positions);
      p->finish();
    }
    if (auto p = m->child("prosody")) {
      p->read("input_dim", c.model.prosody.input_dim);
      p->read("layers", c.model.prosody.layers);
      p->read("hidden", c.model.prosody.hidden);
      p->read("attention_dim", c.model.prosody.attention_dim);
      p->finish();
    }
    if (auto f = m->child("fusion")) {
      f->read("model_dim", c.model.fusion.model_dim);
      f->read("prosody_dim", c.model.fusion.prosody_dim);
      f->read("heads", c.model.fusion.heads);
      f->read("decision_hidden", c.model.fusion.decision_hidden);
      f->finish();
    }
    m->read("num_phonemes", c.model.num_phonemes);
    m->finish();
  }
  if (auto l = r.child("loss")) {
    l->read("lambda", c.loss.lambda);
    l->read("tau", c.loss.tau);
    l->finish();
  }
  if (auto o = r.child("optimizer")) {
    o->read("lr", c.adamw.lr);
    o->read("beta1", c.adamw.beta1);
    o->read("beta2", c.adamw.beta2);
    o->read("eps", c.adamw.eps);
    o->read("weight_decay", c.adamw.weight_decay);
    o->read("warmup_epochs", c.warmup_epochs);
    o->read("floor_lr", c.floor_lr);
    o->read("clip_norm", c.clip_norm);
    o->finish();
  }
  r.read("epochs", c.epochs);
  r.read("batch_size", c.batch_size);
  r.read("max_train_trials", c.max_train_trials);
  r.read("threads", c.threads);
  std::string ablation = model::to_string(c.ablation);
  r.read("ablation", ablation);
  try {
    c.ablation = model::parse_ablation(ablation);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("ablation: ") + e.what());
  }
  r.read("output_dir", c.output_dir);
  r.finish();
  c.corpus.master_seed = c.master_seed;
  c.validate();
  return c;
}

inline RunConfig read_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return run_config_from_json(j);
}

// Runs fn(i) for i in [0, n) on `threads` workers with a static split.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t w = 0; w < threads; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += threads) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// A manifest together with the lexicon of its vocabulary and the raw
// features of every utterance.
struct Dataset {
  synth::Manifest manifest;
  g2p::Lexicon lexicon;
  std::vector<model::RawFeatures> features;

  std::vector<g2p::PhonemeId> text_ids(const synth::TrialInfo& t, const g2p::PhonemeInventory& inv = {}) const {
    return g2p::text_to_phonemes(t.enrollment_text, lexicon, inv).ids;
  }
};

inline Dataset dataset_from_plan(const synth::CorpusPlan& plan, std::size_t threads = 1) {
  Dataset d;
  d.manifest = plan.manifest;
  d.lexicon = plan.vocabulary.lexicon();
  d.features.resize(d.manifest.utterances.size());
  parallel_for(d.features.size(), threads, [&](std::size_t i) {
    d.features[i] = model::extract_features(synth::synthesize(d.manifest.utterances[i]).waveform);
  });
  return d;
}

inline Dataset dataset_from_directory(const std::string& dir, std::size_t threads = 1) {
  namespace fs = std::filesystem;
  const g2p::PhonemeInventory inv;
  Dataset d;
  d.manifest = synth::read_manifest((fs::path(dir) / "manifest.jsonl").string(), inv);
  d.lexicon = g2p::Lexicon::load((fs::path(dir) / "lexicon.txt").string(), inv);
  d.features.resize(d.manifest.utterances.size());
  parallel_for(d.features.size(), threads, [&](std::size_t i) {
    d.features[i] = model::extract_features(synth::read_wav((fs::path(dir) / d.manifest.utterances[i].wav).string()));
  });
  return d;
}

inline Dataset load_dataset(const RunConfig& cfg) {
  if (!cfg.corpus_dir.empty()) return dataset_from_directory(cfg.corpus_dir, cfg.threads);
  return dataset_from_plan(synth::plan_corpus(cfg.corpus), cfg.threads);
}

// Trial indices of the training split, optionally truncated to a prefix.
inline std::vector<std::size_t> training_trials(const synth::Manifest& m, std::size_t limit = 0) {
  auto idx = m.trials_in("train");
  if (limit && idx.size() > limit) idx.resize(limit);
  return idx;
}

inline model::FeatureNorm training_norm(const Dataset& d, const std::vector<std::size_t>& trials) {
  std::set<std::size_t> utts;
  for (std::size_t t : trials) {
    utts.insert(d.manifest.trials[t].enrollment);
    utts.insert(d.manifest.trials[t].query);
  }
  std::vector<const model::RawFeatures*> feats;
  for (std::size_t u : utts) feats.push_back(&d.features[u]);
  return model::estimate_norm(feats);
}

// Network inputs for every utterance of the dataset.
template <typename T>
std::vector<model::UtteranceInput<T>> prepare_inputs(const Dataset& d, const model::FeatureNorm& norm) {
  std::vector<model::UtteranceInput<T>> out;
  out.reserve(d.features.size());
  for (std::size_t i = 0; i < d.features.size(); ++i)
    out.push_back(model::prepare_input<T>(d.features[i], norm, d.manifest.utterances[i].alignment));
  return out;
}

struct LogRow {
  std::size_t step = 0;
  double utterance = 0, audio_text = 0, audio_audio = 0, prosody = 0, total = 0, lr = 0;
};

inline std::string log_csv(const std::vector<LogRow>& rows) {
  std::ostringstream os;
  os.precision(9);
  os << "step,L_utt,L_at,L_aa,L_pro,total,lr\n";
  for (const auto& r : rows)
    os << r.step << ',' << r.utterance << ',' << r.audio_text << ',' << r.audio_audio << ',' << r.prosody << ','
       << r.total << ',' << r.lr << '\n';
  return os.str();
}

inline std::uint64_t init_seed(std::uint64_t master) { return derive_seed(master, 0xa11ce5eedULL); }
inline std::uint64_t shuffle_seed(std::uint64_t master, std::size_t epoch) {
  return derive_seed(master, 0x5eed0000ULL + epoch);
}

// Everything a trained (or freshly initialised) model needs for scoring.
struct TrainedModel {
  RunConfig config;
  std::unique_ptr<model::KeywordSpotter<float>> net;
  model::FeatureNorm norm;
  bool trained = false;
  std::size_t epochs_completed = 0;
  std::size_t steps = 0;
  std::size_t skipped_audio_audio = 0;
  std::size_t rejected_steps = 0;
  std::vector<LogRow> log;
  double seconds = 0;
  Checkpoint optimizer_state;
};

inline optim::ScheduleConfig schedule_for(const RunConfig& cfg, std::size_t train_trials) {
  optim::ScheduleConfig s;
  s.warmup_epochs = cfg.warmup_epochs;
  s.total_epochs = static_cast<double>(cfg.epochs);
  s.steps_per_epoch = std::max<std::size_t>(1, (train_trials + cfg.batch_size - 1) / cfg.batch_size);
  s.peak_lr = cfg.adamw.lr;
  s.floor_lr = cfg.floor_lr;
  return s;
}

inline double effective_lambda(const RunConfig& cfg) {
  return cfg.ablation == model::Ablation::kLpro || cfg.ablation == model::Ablation::kProsody ? 0.0 : cfg.loss.lambda;
}

struct Progress {
  std::size_t epoch = 0, epochs = 0, step = 0;
  double mean_total = 0, seconds = 0;
};

inline TrainedModel train_model(const RunConfig& cfg, const Dataset& data,
                                const std::function<void(const Progress&)>& on_epoch = {}) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  const g2p::PhonemeInventory inv;
  TrainedModel tm;
  tm.config = cfg;
  tm.net = std::make_unique<model::KeywordSpotter<float>>(cfg.model, cfg.ablation, init_seed(cfg.master_seed));
  const auto trials = training_trials(data.manifest, cfg.max_train_trials);
  if (trials.empty()) throw std::invalid_argument("corpus has no training trials");
  tm.norm = training_norm(data, trials);
  const auto inputs = prepare_inputs<float>(data, tm.norm);
  std::vector<std::vector<g2p::PhonemeId>> text(data.manifest.trials.size());
  for (std::size_t t : trials) text[t] = data.text_ids(data.manifest.trials[t], inv);

  auto& params = tm.net->parameters();
  optim::AdamW<float> opt(params, cfg.adamw);
  const auto sched = schedule_for(cfg, trials.size());
  losses::LossConfig loss_cfg = cfg.loss;
  loss_cfg.lambda = effective_lambda(cfg);
  losses::LossCounters counters;

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = trials;
    Rng rng(shuffle_seed(cfg.master_seed, epoch));
    rng.shuffle(order);
    double epoch_total = 0;
    std::size_t epoch_steps = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
      Tape<float> tape;
      TapeScope<float> scope(tape);
      std::vector<Tensor<float>> scores, v_pro, v_pro_q, q_segs, t_segs, e_segs;
      std::vector<std::vector<int>> seg_ids;
      std::vector<int> labels;
      for (std::size_t k = b0; k < b1; ++k) {
        const auto& trial = data.manifest.trials[order[k]];
        const bool positive = trial.label == 1;
        auto out = tm.net->forward(inputs[trial.enrollment], text[order[k]], inputs[trial.query], positive);
        scores.push_back(reshape(out.score, Shape{1, 1}));
        v_pro.push_back(out.v_pro);
        v_pro_q.push_back(out.v_pro_q);
        labels.push_back(trial.label);
        if (positive) {
          q_segs.push_back(out.query_segments);
          t_segs.push_back(out.text);
          e_segs.push_back(out.enroll_segments);
          seg_ids.emplace_back(text[order[k]].begin(), text[order[k]].end());
        }
      }
      const std::size_t B = labels.size();
      losses::LossParts<float> parts;
      parts.utterance = losses::utterance_bce(reshape(concat_rows(scores), Shape{B}), labels);
      parts.audio_text = q_segs.empty() ? Tensor<float>::scalar(0.0f)
                                        : losses::infonce_audio_text(q_segs, t_segs, cfg.loss.tau, seg_ids);
      parts.audio_audio = losses::infonce_audio_audio(q_segs, e_segs, cfg.loss.tau, seg_ids, &counters);
      parts.prosody = losses::prosody_similarity_loss(concat_rows(v_pro_q), concat_rows(v_pro), labels);
      Tensor<float> total = losses::total_loss(parts, loss_cfg);

      params.zero_grad();
      if (total.requires_grad()) tape.backward(total);
      optim::clip_grad_norm(params, cfg.clip_norm);
      const double lr = optim::lr_at(static_cast<double>(step), sched);
      if (!opt.step(lr)) ++tm.rejected_steps;
      tm.log.push_back({step, parts.utterance.item(), parts.audio_text.item(), parts.audio_audio.item(),
                        parts.prosody.item(), total.item(), lr});
      epoch_total += total.item();
      ++epoch_steps;
      ++step;
    }
    tm.epochs_completed = epoch + 1;
    if (on_epoch) {
      on_epoch({epoch + 1, cfg.epochs, step, epoch_total / std::max<std::size_t>(1, epoch_steps),
                std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()});
    }
  }
  tm.steps = step;
  tm.trained = true;
  tm.skipped_audio_audio = counters.skipped_audio_audio;
  tm.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  opt.append_state(tm.optimizer_state);
  return tm;
}

inline Checkpoint make_checkpoint(const TrainedModel& tm) {
  Checkpoint ck;
  append_parameters(ck, tm.net->parameters());
  for (const auto& e : tm.optimizer_state.entries) ck.entries.push_back(e);
  ck.metadata = tm.optimizer_state.metadata;
  ck.metadata["kind"] = "keyword_spotter";
  ck.metadata["trained"] = tm.trained;
  ck.metadata["ablation"] = model::to_string(tm.config.ablation);
  // The snapshot leaves out where artifacts were written so that identical
  // runs produce identical bytes.
  ck.metadata["config"] = to_json(tm.config);
  ck.metadata["config"].erase("output_dir");
  ck.metadata["norm"] = tm.norm.to_json();
  ck.metadata["epochs_completed"] = tm.epochs_completed;
  ck.metadata["steps"] = tm.steps;
  return ck;
}

inline TrainedModel model_from_checkpoint(const Checkpoint& ck) {
  if (ck.metadata.value("kind", std::string()) != "keyword_spotter") {
    throw VersioningError("checkpoint does not hold a keyword spotter");
  }
  TrainedModel tm;
  try {
    tm.config = run_config_from_json(ck.metadata.at("config"));
    tm.norm = model::FeatureNorm::from_json(ck.metadata.at("norm"));
  } catch (const nlohmann::json::exception& e) {
    throw VersioningError(std::string("checkpoint metadata: ") + e.what());
  } catch (const ConfigError& e) {
    throw VersioningError(std::string("checkpoint metadata: ") + e.what());
  }
  tm.net = std::make_unique<model::KeywordSpotter<float>>(tm.config.model, tm.config.ablation,
                                                         init_seed(tm.config.master_seed));
  load_parameters(ck, tm.net->parameters());
  tm.trained = ck.metadata.value("trained", false);
  tm.epochs_completed = ck.metadata.value("epochs_completed", std::size_t{0});
  tm.steps = ck.metadata.value("steps", std::size_t{0});
  return tm;
}

// An untrained model with the norm of the given dataset, for smoke runs and
// tests that only exercise plumbing.
inline TrainedModel untrained_model(const RunConfig& cfg, const Dataset& data) {
  TrainedModel tm;
  tm.config = cfg;
  tm.net = std::make_unique<model::KeywordSpotter<float>>(cfg.model, cfg.ablation, init_seed(cfg.master_seed));
  auto trials = training_trials(data.manifest, cfg.max_train_trials);
  if (trials.empty())
    for (std::size_t i = 0; i < data.manifest.trials.size(); ++i) trials.push_back(i);
  tm.norm = training_norm(data, trials);
  optim::AdamW<float>(tm.net->parameters(), cfg.adamw).append_state(tm.optimizer_state);
  return tm;
}

}  // namespace kws::train
