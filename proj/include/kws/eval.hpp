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

// Detection metrics, benchmark scoring, the prosody interpolation sweep,
// signature export and the ablation runner.

#pragma once

#include "kws/train.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace kws::eval {

class UndefinedMetricError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class RefusedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ScoredTrial {
  double score = 0;
  int label = 0;
};

namespace detail {

inline void split_classes(const std::vector<ScoredTrial>& set, std::vector<double>& pos, std::vector<double>& neg) {
  for (const auto& t : set) (t.label ? pos : neg).push_back(t.score);
  if (pos.empty() || neg.empty()) throw UndefinedMetricError("metric needs at least one positive and one negative");
}

}  // namespace detail

// P(score_pos > score_neg) + 0.5 P(tie), over all positive/negative pairs.
inline double compute_auc(const std::vector<ScoredTrial>& set) {
  std::vector<double> pos, neg;
  detail::split_classes(set, pos, neg);
  std::sort(neg.begin(), neg.end());
  std::uint64_t twice = 0;
  for (double p : pos) {
    const auto lo = std::lower_bound(neg.begin(), neg.end(), p);
    const auto hi = std::upper_bound(lo, neg.end(), p);
    twice += 2 * static_cast<std::uint64_t>(lo - neg.begin()) + static_cast<std::uint64_t>(hi - lo);
  }
  return static_cast<double>(twice) / (2.0 * static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

struct EerResult {
  double eer = 0;
  double threshold = 0;
};

// Thresholds run over the distinct scores in increasing order, followed by
// +inf. FAR(t) is the share of negatives scoring >= t and FRR(t) the share of
// positives scoring < t. The first threshold where FAR - FRR <= 0 closes the
// crossing; between it and its predecessor both rates are interpolated
// linearly to the point where they meet.
inline EerResult compute_eer(const std::vector<ScoredTrial>& set) {
  std::vector<double> pos, neg;
  detail::split_classes(set, pos, neg);
  std::sort(pos.begin(), pos.end());
  std::sort(neg.begin(), neg.end());
  std::vector<double> thresholds;
  for (const auto& t : set) thresholds.push_back(t.score);
  std::sort(thresholds.begin(), thresholds.end());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  thresholds.push_back(std::numeric_limits<double>::infinity());

  const double np = static_cast<double>(pos.size()), nn = static_cast<double>(neg.size());
  auto far = [&](double t) {
    return static_cast<double>(neg.end() - std::lower_bound(neg.begin(), neg.end(), t)) / nn;
  };
  auto frr = [&](double t) {
    return static_cast<double>(std::lower_bound(pos.begin(), pos.end(), t) - pos.begin()) / np;
  };
  double prev_far = far(thresholds[0]), prev_frr = frr(thresholds[0]);
  if (prev_far - prev_frr <= 0) return {prev_far, thresholds[0]};
  for (std::size_t k = 1; k < thresholds.size(); ++k) {
    const double fa = far(thresholds[k]), fr = frr(thresholds[k]);
    const double d = fa - fr;
    if (d == 0) return {fa, thresholds[k]};
    if (d < 0) {
      const double d_prev = prev_far - prev_frr;
      const double w = d_prev / (d_prev - d);
      const double eer = prev_far + w * (fa - prev_far);
      const double thr = std::isfinite(thresholds[k])
                             ? thresholds[k - 1] + w * (thresholds[k] - thresholds[k - 1])
                             : thresholds[k - 1];
      return {eer, thr};
    }
    prev_far = fa;
    prev_frr = fr;
  }
  return {prev_far, thresholds.back()};
}

// Average ranks, 1-based, ties sharing the mean of their positions.
inline std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
    i = j + 1;
  }
  return r;
}

// Pearson correlation of the ranks; 0 when either side is constant.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("spearman needs two equal-length series");
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

struct Projection {
  Eigen::MatrixXd coords;      // n x k
  Eigen::MatrixXd components;  // d x k, unit columns
  Eigen::VectorXd variances;   // k leading eigenvalues
};

// Principal components from the exact eigendecomposition of the sample
// covariance. Each component is signed so that its largest-magnitude entry
// is positive.
inline Projection pca(const Eigen::MatrixXd& x, std::size_t k = 2) {
  if (x.rows() < 3) throw RefusedError("projection needs at least 3 points, got " + std::to_string(x.rows()));
  if (static_cast<std::size_t>(x.cols()) < k) throw std::invalid_argument("more components than dimensions");
  const Eigen::RowVectorXd mean = x.colwise().mean();
  const Eigen::MatrixXd centred = x.rowwise() - mean;
  const Eigen::MatrixXd cov = centred.transpose() * centred / static_cast<double>(x.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  Projection p;
  p.components.resize(x.cols(), static_cast<Eigen::Index>(k));
  p.variances.resize(static_cast<Eigen::Index>(k));
  for (std::size_t c = 0; c < k; ++c) {
    const Eigen::Index src = x.cols() - 1 - static_cast<Eigen::Index>(c);
    Eigen::VectorXd v = solver.eigenvectors().col(src);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    p.components.col(static_cast<Eigen::Index>(c)) = v;
    p.variances(static_cast<Eigen::Index>(c)) = solver.eigenvalues()(src);
  }
  p.coords = centred * p.components;
  return p;
}

// Mean pairwise distance between group centroids over the mean distance of
// points to their own centroid.
inline double cluster_contrast(const Eigen::MatrixXd& points, const std::vector<int>& groups) {
  std::map<int, std::vector<Eigen::Index>> members;
  for (std::size_t i = 0; i < groups.size(); ++i) members[groups[i]].push_back(static_cast<Eigen::Index>(i));
  if (members.size() < 2) throw UndefinedMetricError("cluster contrast needs at least two groups");
  std::vector<Eigen::RowVectorXd> centroids;
  double intra = 0;
  for (const auto& [g, idx] : members) {
    Eigen::RowVectorXd c = Eigen::RowVectorXd::Zero(points.cols());
    for (auto i : idx) c += points.row(i);
    c /= static_cast<double>(idx.size());
    for (auto i : idx) intra += (points.row(i) - c).norm();
    centroids.push_back(c);
  }
  intra /= static_cast<double>(groups.size());
  double inter = 0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < centroids.size(); ++a)
    for (std::size_t b = a + 1; b < centroids.size(); ++b, ++pairs) inter += (centroids[a] - centroids[b]).norm();
  inter /= static_cast<double>(pairs);
  return intra > 0 ? inter / intra : std::numeric_limits<double>::infinity();
}

// Per-utterance encodings computed once and shared by every trial that
// references the utterance. Scoring never records a tape.
class ScoringCache {
 public:
  ScoringCache(const train::TrainedModel& tm, const train::Dataset& data)
      : tm_(&tm), data_(&data), inputs_(data.features.size()), segments_(data.features.size()),
        enroll_sig_(data.features.size()), query_sig_(data.features.size()) {}

  const Tensor<float>& segments(std::size_t u) {
    if (!segments_[u].defined()) segments_[u] = tm_->net->phoneme_segments(input(u));
    return segments_[u];
  }
  const Tensor<float>& enrollment_signature(std::size_t u) {
    if (!enroll_sig_[u].defined()) enroll_sig_[u] = tm_->net->enrollment_signature(input(u));
    return enroll_sig_[u];
  }
  const Tensor<float>& query_signature(std::size_t u) {
    if (!query_sig_[u].defined()) query_sig_[u] = tm_->net->query_signature(input(u));
    return query_sig_[u];
  }
  Tensor<float> text(const synth::TrialInfo& t) const { return tm_->net->text_embedding(data_->text_ids(t)); }

  double score(const synth::TrialInfo& t) {
    return tm_->net->fuse(segments(t.query), text(t), enrollment_signature(t.enrollment), query_signature(t.query))
        .score.item();
  }

  const train::TrainedModel& model() const { return *tm_; }

 private:
  const model::UtteranceInput<float>& input(std::size_t u) {
    if (!inputs_[u]) {
      inputs_[u] = model::prepare_input<float>(data_->features[u], tm_->norm, data_->manifest.utterances[u].alignment);
    }
    return *inputs_[u];
  }

  const train::TrainedModel* tm_;
  const train::Dataset* data_;
  std::vector<std::optional<model::UtteranceInput<float>>> inputs_;
  std::vector<Tensor<float>> segments_, enroll_sig_, query_sig_;
};

using Scorer = std::function<double(const synth::TrialInfo&)>;

inline Scorer oracle_scorer() {
  return [](const synth::TrialInfo& t) { return static_cast<double>(t.label); };
}
inline Scorer constant_scorer(double c = 0.5) {
  return [c](const synth::TrialInfo&) { return c; };
}

struct SplitMetrics {
  std::string split;
  std::size_t positives = 0, negatives = 0;
  double auc = 0, eer = 0, threshold = 0;
};

struct BenchmarkReport {
  std::vector<SplitMetrics> splits;
  std::vector<double> scores;  // aligned with the manifest's trials; NaN when not scored
  nlohmann::json metadata = nlohmann::json::object();

  const SplitMetrics& at(const std::string& split) const {
    for (const auto& s : splits)
      if (s.split == split) return s;
    throw std::out_of_range("no split " + split + " in report");
  }
};

inline bool is_eval_split(const std::string& s) { return s != "train"; }

// Scores every trial of the selected splits (all non-training splits when
// `splits` is empty) and summarises each split.
inline BenchmarkReport run_benchmark(const synth::Manifest& m, const Scorer& scorer,
                                     std::vector<std::string> splits = {}) {
  if (splits.empty())
    for (const auto& s : m.splits())
      if (is_eval_split(s)) splits.push_back(s);
  BenchmarkReport r;
  r.scores.assign(m.trials.size(), std::numeric_limits<double>::quiet_NaN());
  for (const auto& s : splits) {
    std::vector<ScoredTrial> set;
    for (std::size_t i : m.trials_in(s)) {
      r.scores[i] = scorer(m.trials[i]);
      set.push_back({r.scores[i], m.trials[i].label});
    }
    SplitMetrics sm;
    sm.split = s;
    for (const auto& t : set) (t.label ? sm.positives : sm.negatives) += 1;
    sm.auc = compute_auc(set);
    const auto e = compute_eer(set);
    sm.eer = e.eer;
    sm.threshold = e.threshold;
    r.splits.push_back(sm);
  }
  return r;
}

inline Scorer model_scorer(ScoringCache& cache) {
  return [&cache](const synth::TrialInfo& t) { return cache.score(t); };
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline nlohmann::json report_json(const BenchmarkReport& r) {
  nlohmann::json splits = nlohmann::json::array();
  for (const auto& s : r.splits)
    splits.push_back({{"split", s.split},
                      {"positives", s.positives},
                      {"negatives", s.negatives},
                      {"auc", s.auc},
                      {"eer", s.eer},
                      {"eer_threshold", s.threshold}});
  return {{"metadata", r.metadata}, {"splits", splits}};
}

inline std::string report_csv(const BenchmarkReport& r, const synth::Manifest& m) {
  std::ostringstream os;
  os << "trial,split,label,negative_kind,score\n";
  for (std::size_t i = 0; i < m.trials.size(); ++i) {
    if (std::isnan(r.scores[i])) continue;
    const auto& t = m.trials[i];
    os << t.id << ',' << t.split << ',' << t.label << ',' << synth::to_string(t.kind) << ','
       << format_double(r.scores[i]) << '\n';
  }
  return os.str();
}

struct SweepTriple {
  std::size_t enrollment = 0, positive = 0, negative = 0;  // utterance indices
  std::string keyword;
};

struct SweepResult {
  SweepTriple triple;
  std::vector<double> alpha, score;
  double rho = 0;
};

inline std::vector<double> alpha_grid(std::size_t points = 11) {
  std::vector<double> a(points);
  for (std::size_t i = 0; i < points; ++i) a[i] = static_cast<double>(i) / static_cast<double>(points - 1);
  return a;
}

// Same speaker and keyword: an imperative enrollment, a second imperative
// take as the positive query and an interrogative take as the mismatched one.
inline std::vector<SweepTriple> sweep_triples(const synth::Manifest& m, const std::string& speaker_split_prefix,
                                              std::size_t count, std::uint64_t seed) {
  std::map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < m.utterances.size(); ++i) by_id[m.utterances[i].id] = i;
  std::set<std::pair<int, std::string>> pairs;
  for (const auto& t : m.trials)
    if (t.split.rfind(speaker_split_prefix, 0) == 0) pairs.insert({m.utterances[t.enrollment].speaker, t.keyword});
  std::vector<SweepTriple> out;
  for (const auto& [spk, word] : pairs) {
    auto find = [&](const char* intent, int take) -> std::optional<std::size_t> {
      for (std::size_t i = 0; i < m.utterances.size(); ++i) {
        const auto& u = m.utterances[i];
        if (u.speaker == spk && u.word == word && synth::to_string(u.intent) == intent && u.take == take) return i;
      }
      return std::nullopt;
    };
    auto e = find("imperative", 0), p = find("imperative", 1), n = find("interrogative", 1);
    if (e && p && n && m.utterances[*e].accent == m.utterances[*p].accent &&
        m.utterances[*p].accent == m.utterances[*n].accent) {
      out.push_back({*e, *p, *n, word});
    }
  }
  Rng rng(seed);
  rng.shuffle(out);
  if (out.size() > count) out.resize(count);
  return out;
}

// Scores the positive query with its own signature replaced by
// (1 - a) v_pos + a v_neg, where v_pos and v_neg are the query-side
// signatures of the positive and mismatched queries. Everything else stays
// the positive trial's, so a = 0 reproduces its score exactly.
inline SweepResult interpolation_sweep(ScoringCache& cache, const train::Dataset& data, const SweepTriple& triple,
                                       const std::vector<double>& alphas = alpha_grid()) {
  if (!cache.model().trained) throw RefusedError("interpolation sweep needs a trained checkpoint");
  synth::TrialInfo t;
  t.enrollment = triple.enrollment;
  t.query = triple.positive;
  t.enrollment_text = data.manifest.utterances[triple.enrollment].word;
  const auto& net = *cache.model().net;
  const Tensor<float> segs = cache.segments(triple.positive);
  const Tensor<float> text = cache.text(t);
  const Tensor<float> v_pro = cache.enrollment_signature(triple.enrollment);
  const Tensor<float> v_pos = cache.query_signature(triple.positive);
  const Tensor<float> v_neg = cache.query_signature(triple.negative);
  SweepResult r;
  r.triple = triple;
  r.alpha = alphas;
  for (double a : alphas) {
    Tensor<float> v = a == 0.0 ? v_pos : a == 1.0 ? v_neg : fusion::interpolate_signature(v_pos, v_neg, a);
    r.score.push_back(net.fuse(segs, text, v_pro, v).score.item());
  }
  r.rho = spearman(r.alpha, r.score);
  return r;
}

inline std::string sweep_csv(const SweepResult& r) {
  std::ostringstream os;
  os << "alpha,score\n";
  for (std::size_t i = 0; i < r.alpha.size(); ++i) os << format_double(r.alpha[i]) << ',' << format_double(r.score[i]) << '\n';
  return os.str();
}

struct EmbeddingTable {
  std::vector<std::size_t> utterances;
  Eigen::MatrixXd signatures;  // n x 64
  Projection projection;
  double contrast = 0;  // intent clustering in the projected plane
};

// Enrollment-side signatures of the given utterances, projected to two
// principal components.
inline EmbeddingTable export_embeddings(ScoringCache& cache, const train::Dataset& data,
                                        const std::vector<std::size_t>& utterances) {
  if (utterances.size() < 3) throw RefusedError("embedding export needs at least 3 utterances");
  EmbeddingTable e;
  e.utterances = utterances;
  const std::size_t d = cache.model().config.model.fusion.prosody_dim;
  e.signatures.resize(static_cast<Eigen::Index>(utterances.size()), static_cast<Eigen::Index>(d));
  std::vector<int> intents;
  for (std::size_t r = 0; r < utterances.size(); ++r) {
    auto v = cache.enrollment_signature(utterances[r]).data();
    for (std::size_t c = 0; c < d; ++c) e.signatures(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = v[c];
    intents.push_back(static_cast<int>(data.manifest.utterances[utterances[r]].intent));
  }
  e.projection = pca(e.signatures, 2);
  e.contrast = cluster_contrast(e.projection.coords, intents);
  return e;
}

inline std::string embeddings_csv(const EmbeddingTable& e, const train::Dataset& data) {
  std::ostringstream os;
  os << "utterance";
  for (Eigen::Index c = 0; c < e.signatures.cols(); ++c) os << ",v" << c;
  os << ",pc1,pc2,intent,accent\n";
  for (std::size_t r = 0; r < e.utterances.size(); ++r) {
    const auto& u = data.manifest.utterances[e.utterances[r]];
    const auto row = static_cast<Eigen::Index>(r);
    os << u.id;
    for (Eigen::Index c = 0; c < e.signatures.cols(); ++c) os << ',' << format_double(e.signatures(row, c));
    os << ',' << format_double(e.projection.coords(row, 0)) << ',' << format_double(e.projection.coords(row, 1))
       << ',' << synth::to_string(u.intent) << ',' << synth::accents().at(static_cast<std::size_t>(u.accent)).name
       << '\n';
  }
  return os.str();
}

// Utterances referenced by trials whose split starts with `prefix`.
inline std::vector<std::size_t> utterances_in(const synth::Manifest& m, const std::string& prefix) {
  std::set<std::size_t> s;
  for (const auto& t : m.trials)
    if (t.split.rfind(prefix, 0) == 0) {
      s.insert(t.enrollment);
      s.insert(t.query);
    }
  return {s.begin(), s.end()};
}

struct AblationEntry {
  model::Ablation ablation = model::Ablation::kNone;
  std::size_t epochs = 0, steps = 0, train_trials = 0;
  double seconds = 0;
  BenchmarkReport report;
};

// Trains the full model and each variant with the same seed and
// configuration, then benchmarks all of them on the same splits.
inline std::vector<AblationEntry> run_ablation(const train::RunConfig& base, const train::Dataset& data,
                                               const std::vector<model::Ablation>& variants,
                                               const std::vector<std::string>& splits = {},
                                               const std::function<void(const std::string&)>& log = {}) {
  std::vector<AblationEntry> out;
  for (model::Ablation a : variants) {
    train::RunConfig cfg = base;
    cfg.ablation = a;
    if (log) log("training variant " + model::to_string(a));
    const auto tm = train::train_model(cfg, data);
    ScoringCache cache(tm, data);
    AblationEntry e;
    e.ablation = a;
    e.epochs = tm.epochs_completed;
    e.steps = tm.steps;
    e.train_trials = train::training_trials(data.manifest, cfg.max_train_trials).size();
    e.seconds = tm.seconds;
    e.report = run_benchmark(data.manifest, model_scorer(cache), splits);
    out.push_back(std::move(e));
  }
  return out;
}

inline nlohmann::json ablation_json(const std::vector<AblationEntry>& entries) {
  nlohmann::json variants = nlohmann::json::array();
  const AblationEntry* full = nullptr;
  for (const auto& e : entries)
    if (e.ablation == model::Ablation::kNone) full = &e;
  for (const auto& e : entries) {
    nlohmann::json splits = nlohmann::json::array();
    for (const auto& s : e.report.splits) {
      nlohmann::json js = {{"split", s.split}, {"auc", s.auc}, {"eer", s.eer}};
      if (full) {
        const auto& f = full->report.at(s.split);
        js["delta_auc"] = s.auc - f.auc;
        js["delta_eer"] = s.eer - f.eer;
      }
      splits.push_back(js);
    }
    variants.push_back({{"ablation", model::to_string(e.ablation)},
                        {"epochs", e.epochs},
                        {"steps", e.steps},
                        {"train_trials", e.train_trials},
                        {"seconds", e.seconds},
                        {"splits", splits}});
  }
  return {{"variants", variants}};
}

}  // namespace kws::eval
