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
#include "kws/params.hpp"
#include "kws/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace kws {
namespace {

using testing::max_gradient_error;
using testing::probe;
using testing::random_tensor;

using TD = Tensor<double>;

TEST(Elementwise, SigmoidOfZeroIsHalf) {
  EXPECT_DOUBLE_EQ(sigmoid(TD::scalar(0.0)).item(), 0.5);
}

TEST(Elementwise, MulByOnesIsIdentity) {
  Rng rng(1);
  TD x = random_tensor({2, 3, 4}, rng);
  TD y = mul(x, TD({2, 3, 4}, 1.0));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Elementwise, BatchFeatureBroadcastAcrossTime) {
  TD a({1, 2, 2}, {1, 2, 3, 4});
  TD b({1, 2}, {10, 100});
  TD c = mul(a, b);
  ASSERT_EQ(c.shape(), (Shape{1, 2, 2}));
  // Brute-force per-element oracle.
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t d = 0; d < 2; ++d) EXPECT_EQ(c[t * 2 + d], a[t * 2 + d] * b[d]);
  EXPECT_EQ(c[0], 10);
  EXPECT_EQ(c[1], 200);
  EXPECT_EQ(c[2], 30);
  EXPECT_EQ(c[3], 400);
}

TEST(Elementwise, IncompatibleShapesNameBoth) {
  TD a({2, 3}, 1.0), b({4}, 1.0);
  try {
    add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[4]"), std::string::npos);
  }
}

// Explicit-expansion oracle: materialize both operands at the output shape
// and combine elementwise.
std::vector<double> expand(const TD& x, const Shape& out) {
  std::vector<double> r(numel(out));
  const std::size_t off = out.size() - x.rank();
  std::vector<std::size_t> idx(out.size(), 0);
  for (std::size_t flat = 0; flat < r.size(); ++flat) {
    std::size_t rem = flat;
    for (std::size_t k = out.size(); k-- > 0;) {
      idx[k] = rem % out[k];
      rem /= out[k];
    }
    std::size_t src = 0;
    for (std::size_t k = 0; k < x.rank(); ++k) src = src * x.dim(k) + (x.dim(k) == 1 ? 0 : idx[off + k]);
    r[flat] = x[src];
  }
  return r;
}

TEST(Elementwise, BroadcastMatchesExplicitExpansion) {
  Rng rng(11);
  int checked = 0;
  for (int trial = 0; trial < 400; ++trial) {
    const std::size_t rank_out = 1 + rng.index(3);
    Shape out(rank_out);
    for (auto& e : out) e = 1 + rng.index(4);
    auto derive = [&](void) {
      const std::size_t r = 1 + rng.index(rank_out);
      Shape s(out.end() - static_cast<std::ptrdiff_t>(r), out.end());
      for (auto& e : s)
        if (rng.uniform() < 0.3) e = 1;
      return s;
    };
    Shape sa = derive(), sb = derive();
    TD a = random_tensor(sa, rng, -2, 2, false), b = random_tensor(sb, rng, -2, 2, false);
    auto bc = detail::broadcast_shapes(sa, sb);
    auto ea = expand(a, bc.out), eb = expand(b, bc.out);
    TD s = add(a, b), m = mul(a, b);
    ASSERT_EQ(s.shape(), bc.out);
    for (std::size_t i = 0; i < ea.size(); ++i) {
      ASSERT_EQ(s[i], ea[i] + eb[i]);
      ASSERT_EQ(m[i], ea[i] * eb[i]);
    }
    ++checked;
  }
  EXPECT_EQ(checked, 400);
}

TEST(Matmul, IdentityIsExact) {
  Rng rng(2);
  TD a = random_tensor({3, 4}, rng);
  std::vector<double> eye(16, 0.0);
  for (int i = 0; i < 4; ++i) eye[i * 5] = 1.0;
  TD c = matmul(a, TD({4, 4}, eye));
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(c[i], a[i]);
}

TEST(Matmul, HandExample) {
  TD c = matmul(TD({2, 2}, {1, 2, 3, 4}), TD({2, 1}, {5, 6}));
  ASSERT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(c[0], 17);
  EXPECT_EQ(c[1], 39);
}

TEST(Matmul, InnerMismatchThrows) {
  EXPECT_THROW(matmul(TD({2, 3}, 1.0), TD({2, 3}, 1.0)), ShapeError);
}

TEST(Matmul, GradientOfSumIsOnesTimesBTransposed) {
  Rng rng(3);
  TD a = random_tensor({2, 3}, rng), b = random_tensor({3, 2}, rng);
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    tape.backward(sum_all(matmul(a, b)));
  }
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(a.grad()[i * 3 + k], b[k * 2] + b[k * 2 + 1], 1e-14);
  EXPECT_LT(max_gradient_error({a, b}, [&] { return sum_all(matmul(a, b)); }), 1e-8);
}

TEST(Softmax, UniformAndShiftInvariant) {
  TD u = softmax_lastdim(TD({3}, {0, 0, 0}));
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(u[i], 1.0 / 3.0, 1e-15);
  TD big = softmax_lastdim(TD({2}, {1000, 1000}));
  EXPECT_DOUBLE_EQ(big[0], 0.5);
  EXPECT_DOUBLE_EQ(big[1], 0.5);
}

TEST(Softmax, DirectOracle) {
  TD s = softmax_lastdim(TD({3}, {1, 2, 3}));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(s[0], std::exp(1.0) / z, 1e-12);
  EXPECT_NEAR(s[0], 0.09003, 1e-4);
  EXPECT_NEAR(s[1], 0.24473, 1e-4);
  EXPECT_NEAR(s[2], 0.66524, 1e-4);
}

TEST(Softmax, NonFiniteInputRejected) {
  EXPECT_THROW(softmax_lastdim(TD({2}, {1.0, std::nan("")})), NumericError);
}

TEST(Softmax, SlicesSumToOneAndShiftInvariantProperty) {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    TD x = random_tensor({3, 1 + rng.index(6)}, rng, -5, 5, false);
    TD s = softmax_lastdim(x);
    TD t = softmax_lastdim(add_scalar(x, rng.uniform(-10, 10)));
    const std::size_t n = x.dim(1);
    for (std::size_t r = 0; r < 3; ++r) {
      double sum = 0;
      for (std::size_t i = 0; i < n; ++i) {
        EXPECT_GE(s[r * n + i], 0.0);
        EXPECT_NEAR(s[r * n + i], t[r * n + i], 1e-6);
        sum += s[r * n + i];
      }
      EXPECT_NEAR(sum, 1.0, 1e-6);
    }
  }
}

TEST(LayerNorm, ConstantSliceMapsToZero) {
  TD y = layernorm(TD({2, 4}, 0.7), TD({4}, 1.0), TD({4}, 0.0));
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_EQ(y[i], 0.0);
}

TEST(LayerNorm, ZeroMeanUnitVariance) {
  Rng rng(5);
  TD y = layernorm(random_tensor({3, 16}, rng), TD({16}, 1.0), TD({16}, 0.0));
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < 16; ++i) m += y[r * 16 + i];
    m /= 16;
    for (std::size_t i = 0; i < 16; ++i) v += (y[r * 16 + i] - m) * (y[r * 16 + i] - m);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 16, 1.0, 1e-3);  // eps inside the root
  }
}

TEST(LayerNorm, ParameterMismatchThrows) {
  EXPECT_THROW(layernorm(TD({2, 4}, 1.0), TD({3}, 1.0), TD({4}, 0.0)), ShapeError);
}

TEST(Conv1d, OutputLengthArithmetic) {
  EXPECT_EQ(conv_output_length(10, 3, 2), 4u);
  TD y = conv1d(TD({1, 10, 2}, 1.0), TD({3, 2, 3}, 0.5), TD({3}, 0.0), 2);
  EXPECT_EQ(y.shape(), (Shape{1, 4, 3}));
  EXPECT_EQ(conv_output_length(100, 3, 2, 1), 50u);
  EXPECT_EQ(conv_output_length(50, 3, 2, 1), 25u);
}

TEST(Conv1d, MatchesDirectSum) {
  Rng rng(6);
  TD x = random_tensor({2, 7, 3}, rng), k = random_tensor({4, 3, 3}, rng), b = random_tensor({4}, rng);
  TD y = conv1d(x, k, b, 2, 1);
  ASSERT_EQ(y.shape(), (Shape{2, 4, 4}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t o = 0; o < 4; ++o) {
        double acc = b[o];
        for (std::size_t kk = 0; kk < 3; ++kk) {
          const long src = static_cast<long>(t * 2 + kk) - 1;
          if (src < 0 || src >= 7) continue;
          for (std::size_t c = 0; c < 3; ++c) acc += k[(o * 3 + c) * 3 + kk] * x[(n * 7 + src) * 3 + c];
        }
        EXPECT_NEAR(y[(n * 4 + t) * 4 + o], acc, 1e-12);
      }
}

TEST(Conv1d, KernelMismatchThrows) {
  EXPECT_THROW(conv1d(TD({1, 10, 2}, 1.0), TD({3, 5, 3}, 0.5), TD({3}, 0.0), 2), ShapeError);
}

TEST(GruCell, ZeroParametersKeepZeroState) {
  GruParams<double> p{TD({3, 6}, 0.0), TD({2, 6}, 0.0), TD({6}, 0.0), TD({6}, 0.0)};
  Rng rng(7);
  TD h = gru_cell(random_tensor({1, 3}, rng), TD({1, 2}, 0.0), p);
  EXPECT_EQ(h[0], 0.0);
  EXPECT_EQ(h[1], 0.0);
}

TEST(GruCell, StateBoundedByOne) {
  Rng rng(8);
  GruParams<double> p{random_tensor({3, 12}, rng, -3, 3), random_tensor({4, 12}, rng, -3, 3),
                      random_tensor({12}, rng), random_tensor({12}, rng)};
  TD h({1, 4}, 0.0);
  for (int t = 0; t < 20; ++t) {
    h = gru_cell(random_tensor({1, 3}, rng, -10, 10), h, p);
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_GT(h[i], -1.0);
      EXPECT_LT(h[i], 1.0);
    }
  }
}

TEST(Backward, SquareDerivative) {
  TD x = TD::scalar(3.0);
  x.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  tape.backward(mul(x, x));
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, NonScalarLossRejected) {
  TD x({2}, 1.0);
  x.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  EXPECT_THROW(tape.backward(scale(x, 2.0)), RankError);
}

TEST(Backward, RepeatedCallsAccumulate) {
  TD x = TD::scalar(2.0);
  x.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  TD loss = mul(x, scale(x, 1.5));
  tape.backward(loss);
  tape.backward(loss);
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Backward, SigmoidOfLinearMatchesFiniteDifferences) {
  Rng rng(9);
  TD w = random_tensor({4, 3}, rng), x = random_tensor({2, 4}, rng);
  EXPECT_LT(max_gradient_error({w, x}, [&] { return sum_all(sigmoid(matmul(x, w))); }), 1e-5);
}

TEST(Backward, TwoLayerChainMatchesHandJacobians) {
  // y = tanh(W2 · tanh(W1 · x)), loss = sum(y), all 2x2.
  TD w1({2, 2}, {0.5, -0.3, 0.8, 0.2}), w2({2, 2}, {-0.4, 0.9, 0.1, 0.6}), x({2, 1}, {1.0, -2.0});
  w1.set_requires_grad(true);
  w2.set_requires_grad(true);
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    tape.backward(sum_all(tanh(matmul(w2, tanh(matmul(w1, x))))));
  }
  double a1[2], h[2], a2[2], y[2];
  for (int i = 0; i < 2; ++i) a1[i] = w1[i * 2] * x[0] + w1[i * 2 + 1] * x[1];
  for (int i = 0; i < 2; ++i) h[i] = std::tanh(a1[i]);
  for (int i = 0; i < 2; ++i) a2[i] = w2[i * 2] * h[0] + w2[i * 2 + 1] * h[1];
  for (int i = 0; i < 2; ++i) y[i] = std::tanh(a2[i]);
  double d2[2], dh[2] = {0, 0}, d1[2];
  for (int i = 0; i < 2; ++i) d2[i] = 1 - y[i] * y[i];
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      EXPECT_NEAR(w2.grad()[i * 2 + j], d2[i] * h[j], 1e-14);
      dh[j] += d2[i] * w2[i * 2 + j];
    }
  for (int i = 0; i < 2; ++i) d1[i] = dh[i] * (1 - h[i] * h[i]);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) EXPECT_NEAR(w1.grad()[i * 2 + j], d1[i] * x[j], 1e-14);
}

// Every differentiable primitive against central differences on 20 seeded
// random cases with inputs in [-2, 2].
class OpGradient : public ::testing::TestWithParam<int> {};

TEST_P(OpGradient, AllPrimitivesWithinTolerance) {
  Rng rng(1000 + static_cast<std::uint64_t>(GetParam()));
  auto check = [&](const char* name, std::vector<TD> in, std::function<TD()> f) {
    const double err = max_gradient_error(in, f);
    EXPECT_LT(err, 1e-5) << name;
  };
  TD a = random_tensor({2, 3, 4}, rng), b = random_tensor({2, 1, 4}, rng), c = random_tensor({4}, rng);
  check("add", {a, b}, [&] { return probe(add(a, b)); });
  check("sub", {a, c}, [&] { return probe(sub(a, c)); });
  check("mul", {a, b}, [&] { return probe(mul(a, b)); });
  check("scale", {a}, [&] { return probe(scale(a, -1.7)); });
  check("sigmoid", {a}, [&] { return probe(sigmoid(a)); });
  check("tanh", {a}, [&] { return probe(tanh(a)); });
  check("swish", {a}, [&] { return probe(swish(a)); });
  check("exp", {a}, [&] { return probe(exp(a)); });
  check("square", {a}, [&] { return probe(square(a)); });
  TD pos = random_tensor({5}, rng, 0.5, 2.0);
  check("log", {pos}, [&] { return probe(log(pos)); });
  TD m = random_tensor({4, 5}, rng), bm = random_tensor({2, 5, 3}, rng);
  check("matmul shared", {a, m}, [&] { return probe(matmul(a, m)); });
  TD a5 = random_tensor({2, 3, 5}, rng);
  check("matmul batched", {a5, bm}, [&] { return probe(matmul(a5, bm)); });
  check("transpose", {a}, [&] { return probe(transpose_last2(a)); });
  check("softmax", {a}, [&] { return probe(softmax_lastdim(a)); });
  check("log_softmax", {a}, [&] { return probe(log_softmax_lastdim(a)); });
  TD gain = random_tensor({4}, rng), bias = random_tensor({4}, rng);
  check("layernorm", {a, gain, bias}, [&] { return probe(layernorm(a, gain, bias)); });
  TD x = random_tensor({1, 9, 3}, rng), k = random_tensor({2, 3, 3}, rng), kb = random_tensor({2}, rng);
  check("conv1d", {x, k, kb}, [&] { return probe(conv1d(x, k, kb, 2, 1)); });
  TD dk = random_tensor({3, 5}, rng), db = random_tensor({3}, rng);
  check("depthwise_conv1d", {x, dk, db}, [&] { return probe(depthwise_conv1d(x, dk, db)); });
  check("concat", {a, a5}, [&] { return probe(concat_lastdim<double>({a, a5, a})); });
  check("slice", {a}, [&] { return probe(slice_lastdim(a, 1, 2)); });
  check("concat_rows", {m, a5}, [&] { return probe(concat_rows<double>({m, reshape(a5, {6, 5})})); });
  check("select/stack/reverse", {a},
        [&] { return probe(reverse_time(stack_time<double>({select_time(a, 2), select_time(a, 0)}))); });
  check("mean_over_axis", {a}, [&] { return probe(mean_over_axis(a, 1)); });
  check("mean_all", {a}, [&] { return mean_all(square(a)); });
  TD table = random_tensor({6, 4}, rng);
  check("gather_rows", {table}, [&] { return probe(gather_rows(table, {3, 1, 3, 5})); });
  check("pick_columns", {m}, [&] { return probe(pick_columns(m, {0, 4, 2, 2})); });
  check("l2_normalize", {a}, [&] { return probe(l2_normalize_lastdim(a)); });
  TD a2 = random_tensor({2, 3, 4}, rng);
  check("cosine", {a, a2}, [&] { return probe(cosine_lastdim(a, a2)); });
  TD s = random_tensor({4}, rng, 0.05, 0.95);
  check("bce", {s}, [&] { return bce_mean(s, {1, 0, 0, 1}); });
  GruParams<double> p{random_tensor({3, 6}, rng), random_tensor({2, 6}, rng), random_tensor({6}, rng),
                      random_tensor({6}, rng)};
  TD xt = random_tensor({2, 3}, rng), h0 = random_tensor({2, 2}, rng, -0.9, 0.9);
  check("gru_cell", {xt, h0, p.w_ih, p.w_hh, p.b_ih, p.b_hh},
        [&] { return probe(gru_cell(xt, gru_cell(xt, h0, p), p)); });
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradient, ::testing::Range(0, 20));

TEST(Checkpoint, RoundTripPreservesEntriesAndMetadata) {
  ParameterSet<float> params;
  Rng rng(3);
  params.glorot("enc/w", {3, 2}, 3, 2, rng);
  params.zeros("enc/b", {2});
  Checkpoint ck;
  ck.metadata["trained"] = true;
  append_parameters(ck, params);
  Checkpoint back = deserialize_checkpoint(serialize_checkpoint(ck));
  EXPECT_EQ(back.metadata["trained"], true);
  ASSERT_EQ(back.entries.size(), 2u);
  EXPECT_EQ(back.entries[0].path, "enc/w");
  EXPECT_EQ(back.entries[0].shape, (Shape{3, 2}));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(back.entries[0].values[i], params.entries()[0].tensor[i]);
}

TEST(Checkpoint, ByteLayoutIsStable) {
  Checkpoint ck;
  ck.entries.push_back({"w", {1}, {1.0f}});
  const std::string bytes = serialize_checkpoint(ck);
  // magic(8) version(4) metalen(4) "{}"(2) count(4) pathlen(4) "w"(1) rank(4) dim(4) f32(4)
  ASSERT_EQ(bytes.size(), 39u);
  EXPECT_EQ(bytes.substr(0, 8), "KWSCKPT1");
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 1);
  EXPECT_EQ(bytes.substr(16, 2), "{}");
  // 1.0f = 0x3F800000 little-endian
  EXPECT_EQ(static_cast<unsigned char>(bytes[35]), 0x00);
  EXPECT_EQ(static_cast<unsigned char>(bytes[37]), 0x80);
  EXPECT_EQ(static_cast<unsigned char>(bytes[38]), 0x3F);
}

TEST(Checkpoint, UnknownOrMissingPathsAreVersioningErrors) {
  ParameterSet<float> params;
  params.zeros("a", {2});
  Checkpoint ck;
  ck.entries.push_back({"a", {2}, {1, 2}});
  ck.entries.push_back({"zzz", {1}, {0}});
  EXPECT_THROW(load_parameters(ck, params), VersioningError);
  Checkpoint empty;
  EXPECT_THROW(load_parameters(empty, params), VersioningError);
  EXPECT_THROW(deserialize_checkpoint("garbage"), VersioningError);
}

}  // namespace
}  // namespace kws
