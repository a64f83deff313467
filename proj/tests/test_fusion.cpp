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

#include "gradcheck.hpp"
#include "kws/fusion.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

namespace kws::fusion {
namespace {

using testing::cell_oracle;
using testing::max_gradient_error;
using testing::probe;
using testing::random_tensor;

using TD = Tensor<double>;

FusionConfig small_config() {
  FusionConfig cfg;
  cfg.model_dim = 8;
  cfg.prosody_dim = 4;
  cfg.heads = 2;
  cfg.decision_hidden = 5;
  return cfg;
}

void fill(TD& t, double v) {
  for (double& x : t.mutable_data()) x = v;
}

TEST(Film, IdentityWhenGammaOneBetaZero) {
  Rng rng(1);
  ParameterSet<double> ps;
  Film<double> film(ps, "film", FusionConfig{}, rng);
  fill(film.gamma.weight, 0.0);
  fill(film.gamma.bias, 1.0);
  fill(film.beta.weight, 0.0);
  fill(film.beta.bias, 0.0);
  TD z = random_tensor({2, 5, 128}, rng, -3, 3, false);
  TD v = random_tensor({2, 64}, rng, -1, 1, false);
  TD out = film_modulate(z, v, film);
  for (std::size_t i = 0; i < z.numel(); ++i) ASSERT_EQ(out[i], z[i]);
}

TEST(Film, ZeroInputGivesBeta) {
  Rng rng(2);
  ParameterSet<double> ps;
  Film<double> film(ps, "film", FusionConfig{}, rng);
  TD v = random_tensor({2, 64}, rng, -1, 1, false);
  TD beta = film.beta(v);
  TD out = film(TD({2, 3, 128}), v);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t t = 0; t < 3; ++t)
      for (std::size_t d = 0; d < 128; ++d) ASSERT_EQ(out[(b * 3 + t) * 128 + d], beta[b * 128 + d]);
}

TEST(Film, ElementwiseOracle) {
  Rng rng(3);
  ParameterSet<double> ps;
  Film<double> film(ps, "film", FusionConfig{}, rng);
  TD z = random_tensor({3, 4, 128}, rng, -2, 2, false);
  TD v = random_tensor({3, 64}, rng, -1, 1, false);
  TD g = film.gamma(v), b = film.beta(v), out = film(z, v);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t d = 0; d < 128; ++d) {
        volatile double product = g[i * 128 + d] * z[(i * 4 + t) * 128 + d];  // keep the compiler from fusing
        ASSERT_EQ(out[(i * 4 + t) * 128 + d], product + b[i * 128 + d]);
      }
}

TEST(Film, OffsetRemovedOutputIsLinear) {
  Rng rng(4);
  ParameterSet<double> ps;
  Film<double> film(ps, "film", FusionConfig{}, rng);
  TD v = random_tensor({1, 64}, rng, -1, 1, false);
  TD x = random_tensor({1, 3, 128}, rng, -1, 1, false), y = random_tensor({1, 3, 128}, rng, -1, 1, false);
  const double a = 1.7, c = -0.4;
  TD base = film(TD({1, 3, 128}), v);
  TD lhs = sub(film(add(scale(x, a), scale(y, c)), v), base);
  TD fx = sub(film(x, v), base), fy = sub(film(y, v), base);
  for (std::size_t i = 0; i < lhs.numel(); ++i) EXPECT_NEAR(lhs[i], a * fx[i] + c * fy[i], 1e-12);
}

TEST(Film, RejectsWidthMismatch) {
  Rng rng(5);
  ParameterSet<double> ps;
  Film<double> film(ps, "film", FusionConfig{}, rng);
  EXPECT_THROW(film(TD({1, 3, 64}), TD({1, 64})), ShapeError);
  EXPECT_THROW(film(TD({1, 3, 128}), TD({1, 32})), ShapeError);
}

TEST(CrossAttention, SingleKeyReturnsProjectedValue) {
  Rng rng(6);
  ParameterSet<double> ps;
  CrossAttention<double> ca(ps, "ca", FusionConfig{}, rng);
  TD q = random_tensor({2, 5, 128}, rng, -1, 1, false);
  TD text = random_tensor({2, 1, 128}, rng, -1, 1, false);
  std::vector<TD> weights;
  TD out = ca(q, text, &weights, /*residual=*/false);
  TD projected = ca.attn.output(ca.attn.value(text));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t t = 0; t < 5; ++t)
      for (std::size_t d = 0; d < 128; ++d) EXPECT_NEAR(out[(b * 5 + t) * 128 + d], projected[b * 128 + d], 1e-12);
  ASSERT_EQ(weights.size(), 4u);
}

TEST(CrossAttention, WeightRowsSumToOne) {
  Rng rng(7);
  ParameterSet<double> ps;
  CrossAttention<double> ca(ps, "ca", FusionConfig{}, rng);
  std::vector<TD> weights;
  ca(random_tensor({2, 6, 128}, rng, -3, 3, false), random_tensor({2, 9, 128}, rng, -3, 3, false), &weights);
  for (const TD& w : weights) {
    ASSERT_EQ(w.shape(), (Shape{2, 6, 9}));
    for (std::size_t r = 0; r < 12; ++r) {
      double s = 0;
      for (std::size_t k = 0; k < 9; ++k) s += w[r * 9 + k];
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

void make_identity(nn::Linear<double>& lin) {
  const std::size_t n = lin.weight.dim(0);
  auto w = lin.weight.mutable_data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) w[i * n + j] = i == j ? 1.0 : 0.0;
  fill(lin.bias, 0.0);
}

TEST(CrossAttention, HandComputedTwoByTwo) {
  Rng rng(8);
  ParameterSet<double> ps;
  FusionConfig cfg;
  cfg.model_dim = 2;
  cfg.heads = 1;
  CrossAttention<double> ca(ps, "ca", cfg, rng);
  for (auto* lin : {&ca.attn.query, &ca.attn.key, &ca.attn.value, &ca.attn.output}) make_identity(*lin);
  TD q({1, 2, 2}, {1.0, 0.0, 0.5, -1.0});
  TD kv({1, 2, 2}, {2.0, 1.0, -1.0, 3.0});
  TD out = ca(q, kv, nullptr, false);

  const double s = 1.0 / std::sqrt(2.0);
  // query 0: scores 2s, -s; query 1: (1 - 1)s = 0, (-0.5 - 3)s
  const double scores[2][2] = {{2.0 * s, -1.0 * s}, {0.0, -3.5 * s}};
  const double values[2][2] = {{2.0, 1.0}, {-1.0, 3.0}};
  for (int i = 0; i < 2; ++i) {
    const double e0 = std::exp(scores[i][0]), e1 = std::exp(scores[i][1]);
    const double w0 = e0 / (e0 + e1), w1 = e1 / (e0 + e1);
    for (int d = 0; d < 2; ++d) EXPECT_NEAR(out[i * 2 + d], w0 * values[0][d] + w1 * values[1][d], 1e-14);
  }
}

TEST(CrossAttention, QueryEquivarianceAndKeyInvariance) {
  Rng rng(9);
  ParameterSet<double> ps;
  FusionConfig cfg = small_config();
  cfg.heads = 1;
  CrossAttention<double> ca(ps, "ca", cfg, rng);
  for (std::size_t n = 1; n <= 4; ++n) {
    TD q = random_tensor({1, n, 8}, rng, -1, 1, false);
    TD kv = random_tensor({1, n, 8}, rng, -1, 1, false);
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = (i + 1) % n;
    auto permute = [&](const TD& x) { return reshape(gather_rows(reshape(x, Shape{n, 8}), perm), Shape{1, n, 8}); };
    TD base = ca(q, kv, nullptr, false);
    TD moved_q = ca(permute(q), kv, nullptr, false);
    TD moved_kv = ca(q, permute(kv), nullptr, false);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t d = 0; d < 8; ++d) {
        EXPECT_NEAR(moved_q[i * 8 + d], base[perm[i] * 8 + d], 1e-13);
        EXPECT_NEAR(moved_kv[i * 8 + d], base[i * 8 + d], 1e-13);
      }
  }
}

TEST(CrossAttention, ResidualAndNormApplied) {
  Rng rng(10);
  ParameterSet<double> ps;
  CrossAttention<double> ca(ps, "ca", small_config(), rng);
  TD q = random_tensor({1, 3, 8}, rng, -1, 1, false), kv = random_tensor({1, 2, 8}, rng, -1, 1, false);
  TD expected = ca.norm(add(q, ca(q, kv, nullptr, false)));
  TD out = cross_attention(q, kv, ca);
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out[i], expected[i], 1e-14);
}

TEST(ProsodyMatch, CosineCases) {
  TD v({1, 3}, {1.0, -2.0, 0.5});
  EXPECT_NEAR(prosody_match(v, v).item(), 1.0, 1e-15);
  EXPECT_NEAR(prosody_match(TD({1, 2}, {1.0, 0.0}), TD({1, 2}, {0.0, 3.0})).item(), 0.0, 1e-15);
  EXPECT_NEAR(prosody_match(v, scale(v, -1.0)).item(), -1.0, 1e-15);
  EXPECT_EQ(prosody_match(TD({1, 3}), v).item(), 0.0);
}

TEST(DecisionHead, ScoreRangeAndDeterminism) {
  Rng rng(11);
  ParameterSet<double> ps;
  DecisionHead<double> head(ps, "head", FusionConfig{}, rng);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t L = 1 + rng.index(6);
    TD z = random_tensor({3, L, 128}, rng, -5, 5, false);
    TD v = random_tensor({3, 64}, rng, -1, 1, false);
    TD s = random_tensor({3}, rng, -1, 1, false);
    TD a = decision_head(z, v, s, head), b = decision_head(z, v, s, head);
    for (std::size_t i = 0; i < 3; ++i) {
      EXPECT_GT(a[i], 0.0);
      EXPECT_LT(a[i], 1.0);
      EXPECT_EQ(a[i], b[i]);
    }
  }
}

TEST(DecisionHead, ZeroHeadGivesHalf) {
  Rng rng(12);
  ParameterSet<double> ps;
  DecisionHead<double> head(ps, "head", FusionConfig{}, rng);
  fill(head.fc.weight, 0.0);
  fill(head.fc.bias, 0.0);
  TD s = decision_head(random_tensor({2, 4, 128}, rng), random_tensor({2, 64}, rng), random_tensor({2}, rng), head);
  EXPECT_EQ(s[0], 0.5);
  EXPECT_EQ(s[1], 0.5);
}

TEST(DecisionHead, SingleFrameMatchesUnrolledCell) {
  Rng rng(13);
  ParameterSet<double> ps;
  DecisionHead<double> head(ps, "head", FusionConfig{}, rng);
  TD z = random_tensor({1, 1, 128}, rng, -1, 1, false);
  TD v = random_tensor({1, 64}, rng, -1, 1, false);
  TD s = TD({1}, {0.37});
  std::vector<double> x(z.data().begin(), z.data().end());
  x.insert(x.end(), v.data().begin(), v.data().end());
  x.push_back(0.37);
  std::vector<double> h = cell_oracle(x, std::vector<double>(64, 0.0), head.gru.p);
  double logit = head.fc.bias[0];
  for (std::size_t j = 0; j < 64; ++j) logit += h[j] * head.fc.weight[j];
  DecisionOutput<double> out = head(z, v, s);
  for (std::size_t j = 0; j < 64; ++j) EXPECT_NEAR(out.v_at[j], h[j], 1e-13);
  EXPECT_NEAR(out.score.item(), 1.0 / (1.0 + std::exp(-logit)), 1e-13);
}

TEST(FusionGradients, FiniteDifferences) {
  Rng rng(14);
  ParameterSet<double> ps;
  FusionConfig cfg = small_config();
  Film<double> film(ps, "film", cfg, rng);
  CrossAttention<double> ca(ps, "ca", cfg, rng);
  DecisionHead<double> head(ps, "head", cfg, rng);
  TD z = random_tensor({2, 3, 8}, rng), text = random_tensor({2, 4, 8}, rng);
  TD v = random_tensor({2, 4}, rng), vq = random_tensor({2, 4}, rng);
  std::vector<TD> inputs{z, text, v, vq};
  for (auto& e : ps.entries()) inputs.push_back(e.tensor);
  auto loss = [&] {
    TD zat = ca(film(z, v), text);
    return probe(head(zat, v, prosody_match(vq, v)).score);
  };
  EXPECT_LT(max_gradient_error(inputs, loss), 1e-5);
}

TEST(Interpolate, EndpointsMidpointAndGrid) {
  Rng rng(15);
  TD a = random_tensor({1, 64}, rng, -1, 1, false), b = random_tensor({1, 64}, rng, -1, 1, false);
  TD at0 = interpolate_signature(a, b, 0.0), at1 = interpolate_signature(a, b, 1.0);
  TD mid = interpolate_signature(a, b, 0.5);
  for (std::size_t d = 0; d < 64; ++d) {
    EXPECT_EQ(at0[d], a[d]);
    EXPECT_EQ(at1[d], b[d]);
    EXPECT_NEAR(mid[d], 0.5 * (a[d] + b[d]), 1e-15);
  }
  for (int k = 0; k <= 10; ++k) {
    const double alpha = k / 10.0;
    TD v = interpolate_signature(a, b, alpha);
    for (std::size_t d = 0; d < 64; ++d) EXPECT_NEAR(v[d], a[d] + alpha * (b[d] - a[d]), 1e-15);
  }
  EXPECT_THROW(interpolate_signature(a, b, -0.01), RangeError);
  EXPECT_THROW(interpolate_signature(a, b, 1.5), RangeError);
}

}  // namespace
}  // namespace kws::fusion
