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

#include "kws/eval.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace kws;

namespace {

constexpr const char* kOutputRootEnv = "KWS_OUTPUT_ROOT";

// Outputs are staged in a sibling directory and moved into place only once
// every file has been written; a failed command leaves nothing behind.
class StagedOutput {
 public:
  explicit StagedOutput(fs::path target) : target_(std::move(target)) {
    staging_ = target_;
    staging_ += ".partial";
    fs::remove_all(staging_);
    fs::create_directories(staging_);
  }
  ~StagedOutput() {
    if (!committed_) {
      std::error_code ec;
      fs::remove_all(staging_, ec);
    }
  }

  fs::path file(const std::string& name) const { return staging_ / name; }

  void write(const std::string& name, const std::string& contents) const {
    std::ofstream os(file(name), std::ios::binary);
    os << contents;
    if (!os) throw std::runtime_error("failed writing " + (target_ / name).string());
  }

  void commit() {
    fs::remove_all(target_);
    if (target_.has_parent_path()) fs::create_directories(target_.parent_path());
    fs::rename(staging_, target_);
    committed_ = true;
  }

  const fs::path& target() const { return target_; }

 private:
  fs::path target_, staging_;
  bool committed_ = false;
};

fs::path resolve_output(const std::string& dir) {
  fs::path p(dir);
  if (p.is_relative()) {
    if (const char* root = std::getenv(kOutputRootEnv); root && *root) p = fs::path(root) / p;
  }
  return p;
}

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string ablation;
  std::string output;
  std::optional<std::size_t> threads;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> max_train_trials;
  std::string corpus;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool training) {
  cmd->add_option("--config", f.config, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--seed", f.seed, "master seed (overrides the config)");
  cmd->add_option("--output", f.output, "output directory (relative paths resolve under $KWS_OUTPUT_ROOT)");
  cmd->add_option("--threads", f.threads, "worker threads for synthesis and feature extraction");
  if (training) {
    cmd->add_option("--ablation", f.ablation, "ablation switch")->check(CLI::IsMember({"none", "film", "lpro", "prosody"}));
    cmd->add_option("--epochs", f.epochs, "training epochs (overrides the config)");
    cmd->add_option("--max-train-trials", f.max_train_trials, "use only the first N training trials");
    cmd->add_option("--corpus", f.corpus, "corpus directory written by `synth` (default: synthesize in memory)");
  }
}

train::RunConfig resolve_config(const CommonFlags& f, const std::string& default_output) {
  train::RunConfig cfg;
  cfg.output_dir = default_output;
  nlohmann::json j = nlohmann::json::object();
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw train::ConfigError(f.config + ": " + e.what());
    }
  }
  if (f.seed) j["master_seed"] = *f.seed;
  if (!f.ablation.empty()) j["ablation"] = f.ablation;
  if (!f.output.empty()) j["output_dir"] = f.output;
  if (f.threads) j["threads"] = *f.threads;
  if (f.epochs) j["epochs"] = *f.epochs;
  if (f.max_train_trials) j["max_train_trials"] = *f.max_train_trials;
  if (!f.corpus.empty()) j["corpus_dir"] = f.corpus;
  const bool warmup_given = j.contains("optimizer") && j["optimizer"].is_object() &&
                            j["optimizer"].contains("warmup_epochs");
  if (f.epochs && !warmup_given) {
    const double scaled = cfg.warmup_epochs * static_cast<double>(*f.epochs) / static_cast<double>(cfg.epochs);
    if (scaled != cfg.warmup_epochs) {
      j["optimizer"]["warmup_epochs"] = scaled;
      std::cout << "warmup scaled to " << scaled << " epochs for a " << *f.epochs << "-epoch run\n";
    }
  }
  return train::run_config_from_json(j, cfg);
}

std::string config_snapshot(const train::RunConfig& cfg) { return train::to_json(cfg).dump(2) + "\n"; }

train::Dataset dataset_for(const train::RunConfig& cfg, const std::string& corpus_dir) {
  if (!corpus_dir.empty()) return train::dataset_from_directory(corpus_dir, cfg.threads);
  return train::load_dataset(cfg);
}

int cmd_synth(const CommonFlags& f) {
  const auto cfg = resolve_config(f, "corpus");
  StagedOutput out(resolve_output(cfg.output_dir));
  const auto plan = synth::plan_corpus(cfg.corpus);
  synth::write_corpus(out.file("").string(), plan, cfg.threads);
  out.write("config.json", config_snapshot(cfg));
  out.commit();
  std::cout << "wrote " << plan.manifest.utterances.size() << " utterances and " << plan.manifest.trials.size()
            << " trials to " << out.target().string() << "\n";
  return 0;
}

int cmd_train(const CommonFlags& f) {
  const auto cfg = resolve_config(f, "runs/train");
  StagedOutput out(resolve_output(cfg.output_dir));
  const auto data = train::load_dataset(cfg);
  const auto tm = train::train_model(cfg, data, [](const train::Progress& p) {
    std::cout << "epoch " << p.epoch << "/" << p.epochs << "  step " << p.step << "  loss " << p.mean_total
              << "  elapsed " << p.seconds << " s" << std::endl;
  });
  write_checkpoint(out.file("checkpoint.kws").string(), train::make_checkpoint(tm));
  out.write("train_log.csv", train::log_csv(tm.log));
  out.write("config.json", config_snapshot(cfg));
  out.commit();
  std::cout << "checkpoint written to " << (out.target() / "checkpoint.kws").string() << "\n";
  return 0;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

struct EvalFlags {
  std::string checkpoint, corpus, manifest, splits, scorer = "model", triple, prefix = "test";
  std::size_t count = 10;
};

int cmd_eval(const CommonFlags& f, const EvalFlags& e) {
  const auto splits = split_list(e.splits);
  if (e.scorer != "model") {
    std::string manifest_path = e.manifest;
    if (manifest_path.empty() && !e.corpus.empty()) manifest_path = (fs::path(e.corpus) / "manifest.jsonl").string();
    if (manifest_path.empty()) throw std::invalid_argument("--manifest or --corpus is required with a stub scorer");
    const auto m = synth::read_manifest(manifest_path);
    auto cfg = resolve_config(f, "runs/eval");
    StagedOutput out(resolve_output(cfg.output_dir));
    auto report = eval::run_benchmark(m, e.scorer == "oracle" ? eval::oracle_scorer() : eval::constant_scorer(), splits);
    report.metadata = {{"scorer", e.scorer}, {"manifest", manifest_path}};
    out.write("report.json", eval::report_json(report).dump(2) + "\n");
    out.write("report.csv", eval::report_csv(report, m));
    out.write("config.json", config_snapshot(cfg));
    out.commit();
    for (const auto& s : report.splits) std::cout << s.split << "  AUC " << s.auc << "  EER " << s.eer << "\n";
    return 0;
  }
  if (e.checkpoint.empty()) throw std::invalid_argument("--checkpoint is required with the model scorer");
  const auto tm = train::model_from_checkpoint(read_checkpoint(e.checkpoint));
  auto cfg = tm.config;
  cfg.output_dir = f.output.empty() ? "runs/eval" : f.output;
  if (f.threads) cfg.threads = *f.threads;
  StagedOutput out(resolve_output(cfg.output_dir));
  const auto data = dataset_for(cfg, e.corpus);
  eval::ScoringCache cache(tm, data);
  auto report = eval::run_benchmark(data.manifest, eval::model_scorer(cache), splits);
  report.metadata = {{"scorer", "model"},
                     {"checkpoint", e.checkpoint},
                     {"trained", tm.trained},
                     {"ablation", model::to_string(tm.config.ablation)}};
  out.write("report.json", eval::report_json(report).dump(2) + "\n");
  out.write("report.csv", eval::report_csv(report, data.manifest));
  out.write("config.json", config_snapshot(cfg));
  out.commit();
  for (const auto& s : report.splits) std::cout << s.split << "  AUC " << s.auc << "  EER " << s.eer << "\n";
  return 0;
}

std::size_t utterance_index(const synth::Manifest& m, const std::string& id) {
  for (std::size_t i = 0; i < m.utterances.size(); ++i)
    if (m.utterances[i].id == id) return i;
  throw std::invalid_argument("no utterance '" + id + "' in the manifest");
}

int cmd_sweep(const CommonFlags& f, const EvalFlags& e) {
  if (e.checkpoint.empty()) throw std::invalid_argument("--checkpoint is required");
  const auto tm = train::model_from_checkpoint(read_checkpoint(e.checkpoint));
  if (!tm.trained) throw eval::RefusedError("refusing to sweep an untrained checkpoint");
  auto cfg = tm.config;
  cfg.output_dir = f.output.empty() ? "runs/sweep" : f.output;
  if (f.threads) cfg.threads = *f.threads;
  StagedOutput out(resolve_output(cfg.output_dir));
  const auto data = dataset_for(cfg, e.corpus);
  std::vector<eval::SweepTriple> triples;
  if (!e.triple.empty()) {
    const auto ids = split_list(e.triple);
    if (ids.size() != 3) throw std::invalid_argument("--triple takes enrollment,positive,negative utterance ids");
    const auto en = utterance_index(data.manifest, ids[0]);
    triples.push_back({en, utterance_index(data.manifest, ids[1]), utterance_index(data.manifest, ids[2]),
                       data.manifest.utterances[en].word});
  } else {
    triples = eval::sweep_triples(data.manifest, e.prefix, e.count, derive_seed(cfg.master_seed, 0x5eeeULL));
  }
  if (triples.empty()) throw std::invalid_argument("no sweep triples found");
  eval::ScoringCache cache(tm, data);
  nlohmann::json summary = nlohmann::json::array();
  for (std::size_t k = 0; k < triples.size(); ++k) {
    const auto r = eval::interpolation_sweep(cache, data, triples[k]);
    const std::string name = triples.size() == 1 ? "sweep.csv" : "sweep_" + std::to_string(k) + ".csv";
    out.write(name, eval::sweep_csv(r));
    summary.push_back({{"file", name},
                       {"keyword", r.triple.keyword},
                       {"enrollment", data.manifest.utterances[r.triple.enrollment].id},
                       {"positive", data.manifest.utterances[r.triple.positive].id},
                       {"negative", data.manifest.utterances[r.triple.negative].id},
                       {"scores", r.score},
                       {"spearman", r.rho}});
    std::cout << r.triple.keyword << "  s(0) " << r.score.front() << "  s(1) " << r.score.back() << "  rho " << r.rho
              << "\n";
  }
  if (triples.size() > 1) std::filesystem::copy_file(out.file("sweep_0.csv"), out.file("sweep.csv"));
  out.write("sweep.json", summary.dump(2) + "\n");
  out.write("config.json", config_snapshot(cfg));
  out.commit();
  return 0;
}

int cmd_embed(const CommonFlags& f, const EvalFlags& e) {
  if (e.checkpoint.empty()) throw std::invalid_argument("--checkpoint is required");
  const auto tm = train::model_from_checkpoint(read_checkpoint(e.checkpoint));
  auto cfg = tm.config;
  cfg.output_dir = f.output.empty() ? "runs/embed" : f.output;
  if (f.threads) cfg.threads = *f.threads;
  StagedOutput out(resolve_output(cfg.output_dir));
  const auto data = dataset_for(cfg, e.corpus);
  eval::ScoringCache cache(tm, data);
  const auto table = eval::export_embeddings(cache, data, eval::utterances_in(data.manifest, e.prefix));
  out.write("embeddings.csv", eval::embeddings_csv(table, data));
  out.write("config.json", config_snapshot(cfg));
  out.commit();
  std::cout << table.utterances.size() << " signatures, intent cluster contrast " << table.contrast << "\n";
  return 0;
}

int cmd_features(const CommonFlags& f, const std::string& wav) {
  auto cfg = resolve_config(f, "runs/features");
  StagedOutput out(resolve_output(cfg.output_dir));
  const auto w = synth::read_wav(wav);
  const auto fb = dsp::compute_fbank(w);
  const auto pr = dsp::compute_prosody(w);
  std::vector<std::string> header;
  for (std::size_t b = 0; b < fb.num_bins; ++b) header.push_back("mel" + std::to_string(b));
  out.write("fbank.csv", dsp::features_csv(fb.frames, fb.num_bins, header));
  out.write("prosody.csv", dsp::features_csv(pr.frames, 3, {"f0_hz", "aperiodicity", "energy"}));
  out.write("config.json", config_snapshot(cfg));
  out.commit();
  std::cout << fb.num_frames << " frames written to " << out.target().string() << "\n";
  return 0;
}

int cmd_ablate(const CommonFlags& f, const EvalFlags& e) {
  const auto cfg = resolve_config(f, "runs/ablate");
  StagedOutput out(resolve_output(cfg.output_dir));
  const auto data = train::load_dataset(cfg);
  const auto entries = eval::run_ablation(
      cfg, data, {model::Ablation::kNone, model::Ablation::kFilm, model::Ablation::kLpro, model::Ablation::kProsody},
      split_list(e.splits), [](const std::string& msg) { std::cout << msg << std::endl; });
  out.write("ablation.json", eval::ablation_json(entries).dump(2) + "\n");
  out.write("config.json", config_snapshot(cfg));
  out.commit();
  for (const auto& en : entries)
    for (const auto& s : en.report.splits)
      std::cout << model::to_string(en.ablation) << "  " << s.split << "  AUC " << s.auc << "  EER " << s.eer << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prosody-aware user-defined keyword spotting"};
  app.require_subcommand(1);
  CommonFlags common;
  EvalFlags ev;
  std::string wav;

  auto* synth_cmd = app.add_subcommand("synth", "generate the synthetic corpus");
  add_common(synth_cmd, common, false);

  auto* train_cmd = app.add_subcommand("train", "train a model and write a checkpoint");
  add_common(train_cmd, common, true);

  auto* eval_cmd = app.add_subcommand("eval", "score trials and write report.json / report.csv");
  add_common(eval_cmd, common, false);
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "checkpoint file")->check(CLI::ExistingFile);
  eval_cmd->add_option("--corpus", ev.corpus, "corpus directory (default: regenerate from the checkpoint config)");
  eval_cmd->add_option("--manifest", ev.manifest, "manifest for the stub scorers")->check(CLI::ExistingFile);
  eval_cmd->add_option("--splits", ev.splits, "comma-separated splits (default: every evaluation split)");
  eval_cmd->add_option("--scorer", ev.scorer, "model, oracle or constant")
      ->check(CLI::IsMember({"model", "oracle", "constant"}));

  auto* sweep_cmd = app.add_subcommand("sweep", "prosody interpolation sweep, writes sweep.csv");
  add_common(sweep_cmd, common, false);
  sweep_cmd->add_option("--checkpoint", ev.checkpoint, "trained checkpoint")->check(CLI::ExistingFile);
  sweep_cmd->add_option("--corpus", ev.corpus, "corpus directory");
  sweep_cmd->add_option("--triple", ev.triple, "enrollment,positive,negative utterance ids");
  sweep_cmd->add_option("--count", ev.count, "number of sampled triples when --triple is absent");
  sweep_cmd->add_option("--split-prefix", ev.prefix, "speaker split to sample triples from");

  auto* embed_cmd = app.add_subcommand("embed", "export prosodic signatures with PCA coordinates");
  add_common(embed_cmd, common, false);
  embed_cmd->add_option("--checkpoint", ev.checkpoint, "checkpoint file")->check(CLI::ExistingFile);
  embed_cmd->add_option("--corpus", ev.corpus, "corpus directory");
  embed_cmd->add_option("--split-prefix", ev.prefix, "utterances of trials whose split starts with this prefix");

  auto* feat_cmd = app.add_subcommand("features", "write fbank.csv and prosody.csv for one WAV file");
  add_common(feat_cmd, common, false);
  feat_cmd->add_option("wav", wav, "16-bit PCM WAV file")->required()->check(CLI::ExistingFile);

  auto* ablate_cmd = app.add_subcommand("ablate", "train the full model and each ablation, compare reports");
  add_common(ablate_cmd, common, true);
  ablate_cmd->add_option("--splits", ev.splits, "comma-separated splits (default: every evaluation split)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth_cmd->parsed()) return cmd_synth(common);
    if (train_cmd->parsed()) return cmd_train(common);
    if (eval_cmd->parsed()) return cmd_eval(common, ev);
    if (sweep_cmd->parsed()) return cmd_sweep(common, ev);
    if (embed_cmd->parsed()) return cmd_embed(common, ev);
    if (feat_cmd->parsed()) return cmd_features(common, wav);
    if (ablate_cmd->parsed()) return cmd_ablate(common, ev);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
