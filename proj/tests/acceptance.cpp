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

// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// non-zero when any criterion fails.

#include "gradcheck.hpp"
#include "kws/eval.hpp"
#include "kws/fusion.hpp"
#include "kws/losses.hpp"
#include "kws/optimizer.hpp"
#include "kws/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <functional>
#include <map>
#include <set>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

namespace {

using namespace kws;
using kws::testing::max_gradient_error;
using kws::testing::probe;
using kws::testing::random_tensor;
using TD = Tensor<double>;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

int failures = 0;

void report(int id, const std::string& name, Outcome& o) {
  std::printf("%s  %2d  %s:%s\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.str().c_str());
  std::fflush(stdout);
  if (!o.pass) ++failures;
}

// 1 ---------------------------------------------------------------------

Outcome gradient_integrity() {
  Outcome o;
  const auto start = Clock::now();
  constexpr int kSeeds = 20;
  constexpr double kTolerance = 1e-4;
  std::map<std::string, double> worst;
  auto check = [&](const std::string& name, std::vector<TD> in, const std::function<TD()>& f) {
    worst[name] = std::max(worst[name], max_gradient_error(std::move(in), f));
  };
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(derive_seed(0xacce97ULL, static_cast<std::uint64_t>(seed)));
    TD a = random_tensor({2, 3, 4}, rng), b = random_tensor({2, 1, 4}, rng), c = random_tensor({4}, rng);
    check("add", {a, b}, [&] { return probe(add(a, b)); });
    check("sub", {a, c}, [&] { return probe(sub(a, c)); });
    check("mul", {a, b}, [&] { return probe(mul(a, b)); });
    check("scale", {a}, [&] { return probe(scale(a, -1.7)); });
    check("add_scalar", {a}, [&] { return probe(add_scalar(a, 0.3)); });
    check("sigmoid", {a}, [&] { return probe(sigmoid(a)); });
    check("tanh", {a}, [&] { return probe(tanh(a)); });
    check("swish", {a}, [&] { return probe(swish(a)); });
    check("relu", {a}, [&] { return probe(relu(a)); });
    check("exp", {a}, [&] { return probe(exp(a)); });
    check("square", {a}, [&] { return probe(square(a)); });
    TD pos = random_tensor({5}, rng, 0.5, 2.0);
    check("log", {pos}, [&] { return probe(log(pos)); });
    check("reshape", {a}, [&] { return probe(reshape(a, Shape{6, 4})); });
    check("unsqueeze", {a}, [&] { return probe(unsqueeze(a, 1)); });
    TD m = random_tensor({4, 5}, rng), bm = random_tensor({2, 5, 3}, rng), a5 = random_tensor({2, 3, 5}, rng);
    check("matmul", {a, m}, [&] { return probe(matmul(a, m)); });
    check("matmul_batched", {a5, bm}, [&] { return probe(matmul(a5, bm)); });
    check("transpose", {a}, [&] { return probe(transpose_last2(a)); });
    TD w = random_tensor({4, 3}, rng), wb = random_tensor({3}, rng);
    check("linear", {a, w, wb}, [&] { return probe(linear(a, w, wb)); });
    check("softmax", {a}, [&] { return probe(softmax_lastdim(a)); });
    check("log_softmax", {a}, [&] { return probe(log_softmax_lastdim(a)); });
    TD gain = random_tensor({4}, rng), bias = random_tensor({4}, rng);
    check("layernorm", {a, gain, bias}, [&] { return probe(layernorm(a, gain, bias)); });
    TD x = random_tensor({1, 9, 3}, rng), k = random_tensor({2, 3, 3}, rng), kb = random_tensor({2}, rng);
    check("conv1d", {x, k, kb}, [&] { return probe(conv1d(x, k, kb, 2, 1)); });
    TD dk = random_tensor({3, 5}, rng), db = random_tensor({3}, rng);
    check("depthwise_conv1d", {x, dk, db}, [&] { return probe(depthwise_conv1d(x, dk, db)); });
    check("concat_lastdim", {a, a5}, [&] { return probe(concat_lastdim<double>({a, a5})); });
    check("slice_lastdim", {a}, [&] { return probe(slice_lastdim(a, 1, 2)); });
    check("concat_rows", {m, a5}, [&] { return probe(concat_rows<double>({m, reshape(a5, Shape{6, 5})})); });
    check("select/stack/reverse_time", {a},
          [&] { return probe(reverse_time(stack_time<double>({select_time(a, 2), select_time(a, 0)}))); });
    check("mean_over_axis", {a}, [&] { return probe(mean_over_axis(a, 1)); });
    check("sum_all", {a}, [&] { return sum_all(square(a)); });
    check("mean_all", {a}, [&] { return mean_all(square(a)); });
    TD table = random_tensor({6, 4}, rng);
    check("gather_rows", {table}, [&] { return probe(gather_rows(table, {3, 1, 3, 5})); });
    check("pick_columns", {m}, [&] { return probe(pick_columns(m, {0, 4, 2, 2})); });
    check("l2_normalize", {a}, [&] { return probe(l2_normalize_lastdim(a)); });
    TD a2 = random_tensor({2, 3, 4}, rng);
    check("cosine", {a, a2}, [&] { return probe(cosine_lastdim(a, a2)); });
    TD gx = random_tensor({2, 6}, rng), h = random_tensor({2, 2}, rng, -0.9, 0.9);
    TD whh = random_tensor({2, 6}, rng), bhh = random_tensor({6}, rng), wih = random_tensor({3, 6}, rng),
       bih = random_tensor({6}, rng);
    check("gru_cell_projected", {gx, h, whh, bhh}, [&] { return probe(gru_cell_projected(gx, h, whh, bhh)); });
    GruParams<double> gp{wih, whh, bih, bhh};
    TD xt = random_tensor({2, 3}, rng);
    check("gru_cell", {xt, h, wih, whh, bih, bhh}, [&] { return probe(gru_cell(xt, gru_cell(xt, h, gp), gp)); });

    // Losses.
    TD s = random_tensor({4}, rng, 0.05, 0.95);
    const std::vector<int> labels{1, 0, 1, 0};
    check("L_utt", {s}, [&] { return losses::utterance_bce(s, labels); });
    TD qa = random_tensor({3, 4}, rng), qb = random_tensor({2, 4}, rng);
    TD ta = random_tensor({3, 4}, rng), tb = random_tensor({2, 4}, rng);
    const std::vector<std::vector<int>> ids{{1, 2, 3}, {1, 4}};
    check("L_at", {qa, qb, ta, tb}, [&] { return losses::infonce_audio_text<double>({qa, qb}, {ta, tb}, 0.07, ids); });
    TD ea = random_tensor({3, 4}, rng), eb = random_tensor({2, 4}, rng);
    check("L_aa", {qa, qb, ea, eb}, [&] { return losses::infonce_audio_audio<double>({qa, qb}, {ea, eb}, 0.07, ids); });
    TD vq = random_tensor({4, 6}, rng), vp = random_tensor({4, 6}, rng);
    check("L_pro", {vq, vp}, [&] { return losses::prosody_similarity_loss(vq, vp, labels); });
    check("L_total", {s, qa, qb, ta, tb, ea, eb, vq, vp}, [&] {
      losses::LossParts<double> parts{losses::utterance_bce(s, labels),
                                      losses::infonce_audio_text<double>({qa, qb}, {ta, tb}, 0.07, ids),
                                      losses::infonce_audio_audio<double>({qa, qb}, {ea, eb}, 0.07, ids),
                                      losses::prosody_similarity_loss(vq, vp, labels)};
      return losses::total_loss(parts, {0.5, 0.07});
    });
  }
  double max_err = 0;
  std::string worst_name;
  for (const auto& [name, e] : worst) {
    if (e > max_err) {
      max_err = e;
      worst_name = name;
    }
    o.require(e < kTolerance, name + " " + std::to_string(e));
  }
  const double secs = seconds_since(start);
  o.require(secs < 60.0, "runtime");
  o.detail << " " << worst.size() << " operations x " << kSeeds << " seeds, max rel err " << max_err << " ("
           << worst_name << "), " << secs << " s";
  return o;
}

// 2 ---------------------------------------------------------------------

Outcome closed_form_losses() {
  Outcome o;
  const double bce = losses::utterance_bce(TD({1}, {0.5}), {1}).item();
  o.require(std::abs(bce - std::log(2.0)) <= 1e-6, "BCE(0.5,1)");
  double worst = 0;
  for (std::size_t k : {2u, 4u, 8u}) {
    // Every anchor equally similar to every candidate.
    TD same(Shape{k, 3}, 1.0);
    const double l = losses::segment_infonce(same, same, 0.07).item();
    worst = std::max(worst, std::abs(l - std::log(static_cast<double>(k))));
  }
  o.require(worst <= 1e-6, "uniform InfoNCE");
  Rng rng(3);
  TD v = random_tensor({3, 64}, rng, -1, 1, false);
  const double pro = losses::prosody_similarity_loss(v, v, {1, 1, 1}).item();
  o.require(pro == 0.0, "identical signatures");
  losses::LossParts<double> parts{TD::scalar(1.0), TD::scalar(2.0), TD::scalar(3.0), TD::scalar(4.0)};
  const double dropped = losses::total_loss(parts, {0.0, 0.07}).item();
  const double weighted = losses::total_loss(parts, {0.5, 0.07}).item();
  o.require(dropped == 6.0 && weighted == 8.0, "total loss weighting");
  o.detail << " BCE " << bce << ", max |InfoNCE - log K| " << worst << ", L_pro(v,v) " << pro << ", total(l=0) "
           << dropped;
  return o;
}

// 3 ---------------------------------------------------------------------

Outcome film_contract() {
  Outcome o;
  Rng rng(11);
  ParameterSet<double> ps;
  fusion::Film<double> film(ps, "film", fusion::FusionConfig{}, rng);
  TD z = random_tensor({2, 5, 128}, rng, -3, 3, false), v = random_tensor({2, 64}, rng, -1, 1, false);
  auto set = [](TD& t, double x) {
    for (double& e : t.mutable_data()) e = x;
  };
  ParameterSet<double> ps2;
  fusion::Film<double> identity(ps2, "id", fusion::FusionConfig{}, rng);
  set(identity.gamma.weight, 0.0);
  set(identity.gamma.bias, 1.0);
  set(identity.beta.weight, 0.0);
  set(identity.beta.bias, 0.0);
  const TD out = fusion::film_modulate(z, v, identity);
  bool exact = true;
  for (std::size_t i = 0; i < z.numel(); ++i) exact = exact && out[i] == z[i];
  o.require(exact, "identity map");

  std::size_t mismatches = 0;
  for (int c = 0; c < 20; ++c) {
    TD zc = random_tensor({2, 3, 128}, rng, -3, 3, false), vc = random_tensor({2, 64}, rng, -1, 1, false);
    const TD y = film(zc, vc);
    const TD g = film.gamma(vc), b = film.beta(vc);
    for (std::size_t bi = 0; bi < 2; ++bi)
      for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t d = 0; d < 128; ++d) {
          const double expect = g[bi * 128 + d] * zc[(bi * 3 + t) * 128 + d] + b[bi * 128 + d];
          mismatches += y[(bi * 3 + t) * 128 + d] != expect;
        }
  }
  o.require(mismatches == 0, "per-element oracle");
  o.detail << " identity bit-exact " << (exact ? "yes" : "no") << ", oracle mismatches " << mismatches
           << " over 20 random cases";
  return o;
}

// 4 ---------------------------------------------------------------------

Outcome attention_contracts() {
  Outcome o;
  Rng rng(12);
  ParameterSet<double> ps;
  fusion::CrossAttention<double> ca(ps, "ca", fusion::FusionConfig{}, rng);
  std::vector<TD> weights;
  ca(random_tensor({2, 6, 128}, rng, -3, 3, false), random_tensor({2, 9, 128}, rng, -3, 3, false), &weights);
  double row_err = 0;
  for (const TD& w : weights)
    for (std::size_t r = 0; r < 12; ++r) {
      double s = 0;
      for (std::size_t k = 0; k < 9; ++k) s += w[r * 9 + k];
      row_err = std::max(row_err, std::abs(s - 1.0));
    }
  o.require(row_err <= 1e-6, "weight rows");

  TD q = random_tensor({1, 4, 128}, rng, -1, 1, false), one = random_tensor({1, 1, 128}, rng, -1, 1, false);
  const TD single = ca(q, one, nullptr, false);
  const TD value_row = ca.attn.output(ca.attn.value(one));
  double single_err = 0;
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t d = 0; d < 128; ++d) single_err = std::max(single_err, std::abs(single[t * 128 + d] - value_row[d]));
  o.require(single_err <= 1e-6, "single key");

  ParameterSet<double> ps2;
  fusion::FusionConfig small;
  small.model_dim = 2;
  small.heads = 1;
  fusion::CrossAttention<double> hand(ps2, "hand", small, rng);
  for (auto* lin : {&hand.attn.query, &hand.attn.key, &hand.attn.value, &hand.attn.output}) {
    auto w = lin->weight.mutable_data();
    w[0] = 1;
    w[1] = 0;
    w[2] = 0;
    w[3] = 1;
    for (double& b : lin->bias.mutable_data()) b = 0;
  }
  const TD out = hand(TD({1, 2, 2}, {1.0, 0.0, 0.5, -1.0}), TD({1, 2, 2}, {2.0, 1.0, -1.0, 3.0}), nullptr, false);
  // Scores q.k / sqrt(2): query 0 -> (2, -1)/sqrt2, query 1 -> (0, -3.5)/sqrt2.
  const double r = 1.0 / std::sqrt(2.0);
  const double w00 = 1.0 / (1.0 + std::exp(-3.0 * r)), w10 = 1.0 / (1.0 + std::exp(-3.5 * r));
  const double expect[4] = {w00 * 2.0 + (1 - w00) * -1.0, w00 * 1.0 + (1 - w00) * 3.0, w10 * 2.0 + (1 - w10) * -1.0,
                            w10 * 1.0 + (1 - w10) * 3.0};
  double hand_err = 0;
  for (int i = 0; i < 4; ++i) hand_err = std::max(hand_err, std::abs(out[i] - expect[i]));
  o.require(hand_err <= 1e-6, "2x2 case");
  o.detail << " max |row sum - 1| " << row_err << ", single-key err " << single_err << ", 2x2 err " << hand_err;
  return o;
}

// 5 ---------------------------------------------------------------------

std::vector<eval::ScoredTrial> random_set(Rng& rng) {
  const std::size_t n = 2 + rng.index(19);
  const bool discrete = rng.uniform() < 0.5;
  std::vector<eval::ScoredTrial> set(n);
  for (auto& t : set) {
    t.score = discrete ? static_cast<double>(rng.index(6)) / 5.0 : rng.uniform();
    t.label = rng.uniform() < 0.5;
  }
  set[0].label = 1;
  set[1].label = 0;
  return set;
}

Outcome metric_oracles() {
  Outcome o;
  Rng rng(0x5e75ULL);
  std::size_t auc_mismatch = 0;
  double eer_err = 0;
  for (int i = 0; i < 200; ++i) {
    const auto set = random_set(rng);
    double wins = 0, pairs = 0;
    for (const auto& p : set)
      for (const auto& n : set)
        if (p.label == 1 && n.label == 0) {
          pairs += 1;
          wins += p.score > n.score ? 1.0 : p.score == n.score ? 0.5 : 0.0;
        }
    auc_mismatch += eval::compute_auc(set) != wins / pairs;

    // Exhaustive threshold scan.
    std::vector<double> th;
    for (const auto& t : set) th.push_back(t.score);
    std::sort(th.begin(), th.end());
    th.erase(std::unique(th.begin(), th.end()), th.end());
    th.push_back(std::numeric_limits<double>::infinity());
    double prev_far = 0, prev_frr = 0, oracle = -1;
    for (std::size_t k = 0; k < th.size() && oracle < 0; ++k) {
      double fa = 0, fr = 0, np = 0, nn = 0;
      for (const auto& s : set) {
        (s.label ? np : nn) += 1;
        if (s.label && s.score < th[k]) fr += 1;
        if (!s.label && s.score >= th[k]) fa += 1;
      }
      fa /= nn;
      fr /= np;
      const double d = fa - fr;
      if (d <= 0) {
        const double dp = prev_far - prev_frr;
        oracle = k == 0 || d == 0 ? fa : prev_far + (fa - prev_far) * dp / (dp - d);
      }
      prev_far = fa;
      prev_frr = fr;
    }
    if (oracle < 0) oracle = prev_far;
    eer_err = std::max(eer_err, std::abs(eval::compute_eer(set).eer - oracle));
  }
  o.require(auc_mismatch == 0, "AUC exact");
  o.require(eer_err <= 1e-12, "EER within 1e-12");
  o.detail << " 200 sets: AUC mismatches " << auc_mismatch << ", max EER deviation " << eer_err;
  return o;
}

// 6 ---------------------------------------------------------------------

Outcome schedule_reproduction() {
  Outcome o;
  optim::ScheduleConfig s;
  s.steps_per_epoch = 60;
  const double lr0 = optim::lr_at(0, s);
  const double warm = optim::lr_at(s.warmup_steps(), s);
  const double mid = optim::lr_at(s.warmup_steps() + 0.5 * (s.total_steps() - s.warmup_steps()), s);
  o.require(lr0 == 0.0, "lr(0)");
  o.require(warm == 3e-4, "lr(end of warmup)");
  o.require(std::abs(mid - 1.5e-4) <= 1e-12, "midpoint");

  ParameterSet<double> ps;
  TD theta = ps.add("theta", {2}, {0.75, -0.4});
  optim::AdamW<double> opt(ps, {0.05, 0.9, 0.999, 1e-8, 0.01});
  const double grads[2][2] = {{0.3, -1.2}, {0.1, 0.5}};
  for (const auto& g : grads) {
    theta.mutable_grad()[0] = g[0];
    theta.mutable_grad()[1] = g[1];
    opt.step(0.05);
  }
  double trace_err = 0;
  for (int i = 0; i < 2; ++i) {
    double th = i == 0 ? 0.75 : -0.4, m = 0, v = 0;
    for (int t = 1; t <= 2; ++t) {
      const double g = grads[t - 1][i];
      th -= 0.05 * 0.01 * th;
      m = 0.9 * m + 0.1 * g;
      v = 0.999 * v + 0.001 * g * g;
      th -= 0.05 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    }
    trace_err = std::max(trace_err, std::abs(theta[i] - th));
  }
  o.require(trace_err <= 1e-12, "AdamW two-step trace");
  o.detail << " lr(0) " << lr0 << ", lr(warmup end) " << warm << ", midpoint " << mid << ", AdamW trace err "
           << trace_err;
  return o;
}

// 7-10 ------------------------------------------------------------------

struct Trained {
  train::TrainedModel tm;
  std::unique_ptr<eval::ScoringCache> cache;
  eval::BenchmarkReport report;
};

Trained train_and_score(const train::RunConfig& cfg, const train::Dataset& data) {
  Trained t;
  std::printf("       training %s model (%zu epochs)\n", model::to_string(cfg.ablation).c_str(), cfg.epochs);
  std::fflush(stdout);
  t.tm = train::train_model(cfg, data);
  t.cache = std::make_unique<eval::ScoringCache>(t.tm, data);
  t.report = eval::run_benchmark(data.manifest, eval::model_scorer(*t.cache));
  std::printf("       done in %.0f s:", t.tm.seconds);
  for (const auto& s : t.report.splits) std::printf(" %s %.3f", s.split.c_str(), s.auc);
  std::printf("\n");
  std::fflush(stdout);
  return t;
}

Outcome end_to_end(const Trained& full) {
  Outcome o;
  const auto &easy = full.report.at("test_easy"), &hard = full.report.at("test_hard");
  o.require(easy.auc >= 0.95, "easy AUC");
  o.require(hard.auc >= 0.80, "hard AUC");
  o.require(easy.eer <= 0.10, "easy EER");
  o.require(hard.eer <= 0.25, "hard EER");
  o.require(full.tm.seconds < 20 * 60, "runtime");
  o.detail << " easy AUC " << easy.auc << " EER " << easy.eer << ", hard AUC " << hard.auc << " EER " << hard.eer
           << ", " << full.tm.epochs_completed << " epochs in " << full.tm.seconds << " s on "
           << full.tm.config.threads << " thread(s)";
  return o;
}

Outcome intent_sensitivity(const Trained& full, const Trained& no_prosody, const train::Dataset& data) {
  Outcome o;
  const auto triples = eval::sweep_triples(data.manifest, "test", 10, derive_seed(42, 0x5eeeULL));
  o.require(triples.size() == 10, "10 triples");
  int ok = 0;
  double max_flat = 0;
  for (const auto& tr : triples) {
    const auto r = eval::interpolation_sweep(*full.cache, data, tr);
    ok += r.score.front() > r.score.back() && r.rho < -0.5;
    const auto flat = eval::interpolation_sweep(*no_prosody.cache, data, tr);
    max_flat = std::max(max_flat, std::abs(flat.score.front() - flat.score.back()));
  }
  o.require(ok >= 8, "s(0) > s(1) and rho < -0.5 on at least 8 triples");
  o.require(max_flat < 0.1, "no-prosody model flat");
  o.detail << " full model " << ok << "/" << triples.size() << " triples with s(0) > s(1) and rho < -0.5"
           << ", no-prosody max |s(0) - s(1)| " << max_flat;
  return o;
}

Outcome ablation_direction(const Trained& full, const Trained& no_film, const Trained& no_prosody) {
  Outcome o;
  const double a = full.report.at("test_intent").auc, b = no_film.report.at("test_intent").auc,
               c = no_prosody.report.at("test_intent").auc;
  o.require(a - b >= 0.02, "full - noFiLM >= 0.02");
  o.require(b - c >= 0.02, "noFiLM - noProsody >= 0.02");
  o.detail << " intent AUC full " << a << ", w/o FiLM " << b << ", w/o prosody " << c;
  return o;
}

Outcome prosody_clustering(const Trained& full, const train::Dataset& data) {
  Outcome o;
  const auto e = eval::export_embeddings(*full.cache, data, eval::utterances_in(data.manifest, "test"));
  o.require(e.contrast > 1.5, "contrast > 1.5");
  // Reported alongside: the same ratio within each keyword, averaged.
  std::map<std::string, std::vector<std::size_t>> by_word;
  for (std::size_t u : e.utterances) by_word[data.manifest.utterances[u].word].push_back(u);
  double within = 0;
  std::size_t words = 0;
  for (const auto& [word, us] : by_word) {
    std::set<int> intents;
    for (std::size_t u : us) intents.insert(static_cast<int>(data.manifest.utterances[u].intent));
    if (intents.size() < 3) continue;
    within += eval::export_embeddings(*full.cache, data, us).contrast;
    ++words;
  }
  o.detail << " inter/intra ratio " << e.contrast << " over " << e.utterances.size()
           << " test utterances (per-keyword mean " << within / static_cast<double>(std::max<std::size_t>(words, 1))
           << " over " << words << " keywords, informational)";
  return o;
}

// 11 --------------------------------------------------------------------

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is), {});
}

Outcome determinism(const train::RunConfig& base, const train::Dataset& data) {
  Outcome o;
  train::RunConfig cfg = base;
  cfg.epochs = 2;
  cfg.warmup_epochs = 0.25;
  cfg.max_train_trials = 96;
  cfg.threads = 1;
  const auto a = serialize_checkpoint(train::make_checkpoint(train::train_model(cfg, data)));
  const auto b = serialize_checkpoint(train::make_checkpoint(train::train_model(cfg, data)));
  o.require(a == b, "checkpoint bitwise");

  synth::CorpusConfig small;
  small.keywords = 4;
  small.speakers = 5;
  small.dev_speakers = 1;
  small.test_speakers = 1;
  const auto root = std::filesystem::temp_directory_path() / ("kws_acceptance_" + std::to_string(::getpid()));
  std::filesystem::remove_all(root);
  synth::write_corpus((root / "serial").string(), synth::plan_corpus(small), 1);
  synth::write_corpus((root / "parallel").string(), synth::plan_corpus(small), 4);
  std::size_t files = 0, differing = 0;
  bool manifests = false;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(root / "serial")) {
    if (!entry.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(entry.path(), root / "serial");
    const bool same = read_bytes(entry.path()) == read_bytes(root / "parallel" / rel);
    ++files;
    differing += !same;
    if (rel.filename() == "manifest.jsonl") manifests = same;
  }
  std::size_t parallel_files = 0;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(root / "parallel"))
    parallel_files += entry.is_regular_file();
  std::filesystem::remove_all(root);
  const bool waves = differing == 0 && files == parallel_files;
  o.require(waves, "parallel corpus files");
  o.require(manifests, "manifest");
  o.detail << " checkpoint " << a.size() << " bytes identical: " << (a == b ? "yes" : "no")
           << ", corpus files identical serial vs 4 threads: " << files - differing << "/" << files
           << ", manifest identical: " << (manifests ? "yes" : "no");
  return o;
}

train::RunConfig acceptance_config() {
  train::RunConfig cfg;
  cfg.loss.lambda = 0.0;
  return cfg;
}

}  // namespace

int main() {
  const auto start = Clock::now();
  {
    auto o = gradient_integrity();
    report(1, "gradient integrity", o);
  }
  {
    auto o = closed_form_losses();
    report(2, "closed-form losses", o);
  }
  {
    auto o = film_contract();
    report(3, "FiLM contract", o);
  }
  {
    auto o = attention_contracts();
    report(4, "attention contracts", o);
  }
  {
    auto o = metric_oracles();
    report(5, "metric oracles", o);
  }
  {
    auto o = schedule_reproduction();
    report(6, "schedule and AdamW", o);
  }

  const train::RunConfig base = acceptance_config();
  std::printf("       synthesizing default corpus (seed %llu)\n", static_cast<unsigned long long>(base.master_seed));
  std::fflush(stdout);
  const auto data = train::load_dataset(base);
  const auto full = train_and_score(base, data);
  {
    auto o = end_to_end(full);
    report(7, "end-to-end toy run", o);
  }
  train::RunConfig cfg = base;
  cfg.ablation = model::Ablation::kProsody;
  const auto no_prosody = train_and_score(cfg, data);
  {
    auto o = intent_sensitivity(full, no_prosody, data);
    report(8, "intent sensitivity", o);
  }
  cfg.ablation = model::Ablation::kFilm;
  const auto no_film = train_and_score(cfg, data);
  {
    auto o = ablation_direction(full, no_film, no_prosody);
    report(9, "ablation direction", o);
  }
  {
    auto o = prosody_clustering(full, data);
    report(10, "prosody clustering", o);
  }
  {
    auto o = determinism(base, data);
    report(11, "determinism", o);
  }
  std::printf("%d of 11 criteria failed, %.0f s total\n", failures, seconds_since(start));
  return failures == 0 ? 0 : 1;
}
