// Copyright (c) 2026 The cfpformer Authors. All rights reserved.
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

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "cfp/attention/attention.hpp"
#include "cfp/attention/bench.hpp"
#include "support/axial_case.hpp"
#include "support/oracles.hpp"

namespace cfp {
namespace {

using testing::AxialCase;
using testing::axial_max_abs_error;
using testing::random_tensor;

TEST(AxialAttention, MatchesMaterializedOracleOnSmallGrids) {
  std::uint64_t seed = 0;
  for (std::size_t h = 1; h <= 4; ++h) {
    for (std::size_t w = 1; w <= 4; ++w) {
      for (std::size_t heads : {1, 2}) {
        for (auto family : {MaskFamily::gaussian, MaskFamily::exponential}) {
          for (auto base : {SoftmaxBase::two, SoftmaxBase::natural}) {
            const double err = axial_max_abs_error({h, w, heads, family, base}, ++seed);
            EXPECT_LT(err, 1e-5) << h << "x" << w << " heads " << heads << " " << to_string(family) << " "
                                 << to_string(base);
          }
        }
      }
    }
  }
}

TEST(AxialAttention, BatchEntriesAreIndependent) {
  Rng rng(3);
  auto q = random_tensor<float>({2, 3, 4, 4}, rng), k = random_tensor<float>({2, 3, 4, 4}, rng);
  auto v = random_tensor<float>({2, 3, 4, 4}, rng);
  auto m = make_decay_mask<float>(3, 4, MaskFamily::gaussian, {1.0, 2.0});
  auto both = axial_gaussian_attention(q, k, v, m.mask_h, m.mask_w, 2, SoftmaxBase::two, Lepe<float>{});
  auto slice = [](const Tensor<float>& t, std::size_t b) {
    const std::size_t n = t.numel() / 2;
    return Tensor<float>::from({1, 3, 4, 4}, std::vector<float>(t.data().begin() + b * n, t.data().begin() + (b + 1) * n));
  };
  auto second = axial_gaussian_attention(slice(q, 1), slice(k, 1), slice(v, 1), m.mask_h, m.mask_w, 2,
                                         SoftmaxBase::two, Lepe<float>{});
  for (std::size_t i = 0; i < second.numel(); ++i) EXPECT_NEAR(both.at(48 + i), second.at(i), 1e-6);
}

TEST(FullAttention, MatchesDirectSoftmaxOverAllTokens) {
  Rng rng(4);
  const std::size_t h = 3, w = 2, d = 4, heads = 2, n = h * w, dk = d / heads;
  auto q = random_tensor<double>({1, h, w, d}, rng), k = random_tensor<double>({1, h, w, d}, rng);
  auto v = random_tensor<double>({1, h, w, d}, rng);
  auto mask = make_grid_mask<double>(h, w, MaskFamily::gaussian, {1.5, 0.8});
  auto out = full_gaussian_attention(q, k, v, mask, heads, SoftmaxBase::natural, Lepe<double>{});
  const std::vector<double> qd(q.data().begin(), q.data().end()), kd(k.data().begin(), k.data().end());
  for (std::size_t hd = 0; hd < heads; ++hd) {
    for (std::size_t a = 0; a < n; ++a) {
      std::vector<double> row(n);
      for (std::size_t b = 0; b < n; ++b) {
        const double dy = double(a / w) - double(b / w), dx = double(a % w) - double(b % w);
        row[b] = testing::head_dot(qd, kd, d, hd, dk, a, b) +
                 testing::decay_entry(true, hd == 0 ? 1.5 : 0.8, std::sqrt(dy * dy + dx * dx));
      }
      testing::softmax_inplace(row, 1.0);
      for (std::size_t c = 0; c < dk; ++c) {
        double acc = 0;
        for (std::size_t b = 0; b < n; ++b) acc += row[b] * v.at(b * d + hd * dk + c);
        EXPECT_NEAR(out.at(a * d + hd * dk + c), acc, 1e-12);
      }
    }
  }
}

TEST(Mhsa, EqualsFullAttentionWithoutMaskOrPositionTerm) {
  Rng rng(5);
  auto q = random_tensor<double>({2, 2, 3, 4}, rng), k = random_tensor<double>({2, 2, 3, 4}, rng);
  auto v = random_tensor<double>({2, 2, 3, 4}, rng);
  auto zero = Tensor<double>::zeros({2, 6, 6});
  auto a = mhsa_attention(q, k, v, 2);
  auto b = full_gaussian_attention(q, k, v, zero, 2, SoftmaxBase::natural, Lepe<double>{});
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.at(i), b.at(i), 1e-13);
}

TEST(DecayMask, PropertiesHoldForAllExtentsAndSeededDraws) {
  Rng rng(2024);
  for (auto family : {MaskFamily::gaussian, MaskFamily::exponential}) {
    const bool gaussian = family == MaskFamily::gaussian;
    for (int draw = 0; draw < 50; ++draw) {
      const double p = gaussian ? rng.uniform(0.1, 40.0) : rng.uniform(0.01, 0.999);
      for (std::size_t n = 1; n <= 64; ++n) {
        auto m = build_axis_mask<float>(n, family, p);
        for (std::size_t i = 0; i < n; ++i) {
          ASSERT_EQ(m.at(i * n + i), 0.0f);
          for (std::size_t j = 0; j < n; ++j) {
            ASSERT_EQ(m.at(i * n + j), m.at(j * n + i)) << "asymmetric at " << i << "," << j;
            ASSERT_NEAR(m.at(i * n + j), testing::decay_entry(gaussian, p, std::abs(double(i) - double(j))),
                        1e-6 * (1.0 + std::abs(m.at(i * n + j))));
            if (j > i) {
              ASSERT_LT(m.at(i * n + j), m.at(i * n + j - 1)) << "not decaying right of " << i;
            }
            if (j < i) {
              ASSERT_LT(m.at(i * n + j), m.at(i * n + j + 1)) << "not decaying left of " << i;
            }
          }
        }
      }
    }
  }
}

TEST(DecayMask, InvalidParametersAreRejected) {
  EXPECT_THROW(build_axis_mask<float>(4, MaskFamily::gaussian, 0.0), ConfigError);
  EXPECT_THROW(build_axis_mask<float>(4, MaskFamily::exponential, 1.0), ConfigError);
  EXPECT_THROW(build_axis_mask<float>(4, MaskFamily::exponential, 0.0), ConfigError);
  EXPECT_THROW(parse_mask_family("cauchy"), ConfigError);
}

TEST(DecayMask, DefaultGammasFollowPowersOfTwo) {
  auto g = default_gammas(3);
  EXPECT_DOUBLE_EQ(g[0], 0.875);
  EXPECT_DOUBLE_EQ(g[1], 0.9375);
  EXPECT_DOUBLE_EQ(g[2], 0.96875);
}

TEST(DecayMask, DifferentiableGaussianMatchesBuilder) {
  auto sigma = Tensor<double>::from({2}, {1.25, 3.0});
  auto dist = std::make_shared<const std::vector<double>>([] {
    std::vector<double> d(25);
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 5; ++j) d[i * 5 + j] = double((i - j) * (i - j));
    return d;
  }());
  auto m = gaussian_log_mask(sigma, dist, {5, 5});
  auto ref = make_decay_mask<double>(5, 5, MaskFamily::gaussian, {1.25, 3.0});
  for (std::size_t i = 0; i < m.numel(); ++i) EXPECT_NEAR(m.at(i), ref.mask_h.at(i), 1e-15);
}

template <typename T>
class AttentionGrad : public ::testing::Test {};
using Scalars = ::testing::Types<float, double>;
TYPED_TEST_SUITE(AttentionGrad, Scalars);

TYPED_TEST(AttentionGrad, GaussianLogMask) {
  using T = TypeParam;
  auto dist = std::make_shared<const std::vector<T>>(std::vector<T>{0, 1, 4, 1, 0, 1, 4, 1, 0});
  auto rep = testing::grad_check<T>([&](auto& x) { return gaussian_log_mask(x[0], dist, {3, 3}); },
                                    {Tensor<T>::from({2}, {T(1.5), T(0.75)})}, 1);
  EXPECT_LT(rep.max_rel_err, testing::GradTol<T>::rel) << rep.worst;
}

TYPED_TEST(AttentionGrad, AxialFullAndMhsaOps) {
  using T = TypeParam;
  Rng rng(6);
  auto q = random_tensor<T>({1, 3, 2, 4}, rng), k = random_tensor<T>({1, 3, 2, 4}, rng);
  auto v = random_tensor<T>({1, 3, 2, 4}, rng);
  auto mh = random_tensor<T>({2, 3, 3}, rng), mw = random_tensor<T>({2, 2, 2}, rng);
  auto lk = random_tensor<T>({4, 3, 3}, rng), lb = random_tensor<T>({4}, rng);
  auto axial = testing::grad_check<T>(
      [](auto& x) {
        return axial_gaussian_attention(x[0], x[1], x[2], x[3], x[4], 2, SoftmaxBase::two, Lepe<T>{x[5], x[6]});
      },
      {q, k, v, mh, mw, lk, lb}, 2);
  EXPECT_LT(axial.max_rel_err, testing::GradTol<T>::rel) << axial.worst;
  auto m2 = random_tensor<T>({2, 6, 6}, rng);
  auto full = testing::grad_check<T>(
      [](auto& x) { return full_gaussian_attention(x[0], x[1], x[2], x[3], 2, SoftmaxBase::two, Lepe<T>{}); },
      {q, k, v, m2}, 3);
  EXPECT_LT(full.max_rel_err, testing::GradTol<T>::rel) << full.worst;
  auto mhsa = testing::grad_check<T>([](auto& x) { return mhsa_attention(x[0], x[1], x[2], 2); }, {q, k, v}, 4);
  EXPECT_LT(mhsa.max_rel_err, testing::GradTol<T>::rel) << mhsa.worst;
}

TYPED_TEST(AttentionGrad, UnitWithEncoderTokensIncludingSigma) {
  using T = TypeParam;
  for (auto variant : {AttentionVariant::axial_gaussian, AttentionVariant::full_gaussian, AttentionVariant::mhsa}) {
    AttentionConfig cfg;
    cfg.embed_dim = 4;
    cfg.num_heads = 2;
    cfg.variant = variant;
    AttentionUnit<T> unit(cfg, 3, 2, Rng(7));
    Rng rng(8);
    auto x = random_tensor<T>({1, 3, 2, 4}, rng), e = random_tensor<T>({1, 3, 2, 4}, rng);
    NamedParams<T> params;
    unit.collect(params, "a");
    std::vector<Tensor<T>> inputs{x, e};
    for (auto& [name, p] : params) inputs.push_back(p);
    auto rep = testing::grad_check<T>([&](auto& in) { return unit.forward(in[0], &in[1]); }, inputs, 9, 16);
    EXPECT_LT(rep.max_rel_err, testing::GradTol<T>::rel) << to_string(variant) << ": " << rep.worst;
  }
}

TEST(AttentionUnit, EncoderTokensEnterKeysAndValuesOnly) {
  AttentionConfig cfg;
  cfg.embed_dim = 4;
  cfg.num_heads = 2;
  AttentionUnit<double> unit(cfg, 2, 3, Rng(1));
  Rng rng(2);
  auto x = random_tensor<double>({1, 2, 3, 4}, rng), e = random_tensor<double>({1, 2, 3, 4}, rng);
  auto got = unit.forward(x, &e);
  auto masks = make_decay_mask<double>(2, 3, MaskFamily::gaussian, unit.decay_params());
  auto manual = unit.out_proj()(axial_gaussian_attention(unit.q_proj()(x), add(unit.k_proj()(x), e),
                                                         add(unit.v_proj()(x), e), masks.mask_h, masks.mask_w, 2,
                                                         SoftmaxBase::two, unit.lepe()));
  for (std::size_t i = 0; i < got.numel(); ++i) EXPECT_NEAR(got.at(i), manual.at(i), 1e-12);
}

TEST(AttentionUnit, SigmaStartsAtQuarterGridAndIsClampedAfterStep) {
  AttentionConfig cfg;
  cfg.embed_dim = 8;
  cfg.num_heads = 2;
  AttentionUnit<float> unit(cfg, 16, 8, Rng(1));
  EXPECT_FLOAT_EQ(unit.sigma().at(0), 4.0f);
  auto s = unit.sigma();
  s.mutable_data()[1] = -3.0f;
  unit.after_step();
  EXPECT_FLOAT_EQ(unit.sigma().at(1), 1e-3f);
}

TEST(AttentionUnit, NonFiniteScoresNameThePass) {
  Rng rng(1);
  auto q = random_tensor<float>({1, 2, 2, 2}, rng), k = random_tensor<float>({1, 2, 2, 2}, rng);
  q.mutable_data()[0] = std::numeric_limits<float>::infinity();
  auto m = make_decay_mask<float>(2, 2, MaskFamily::gaussian, {1.0});
  try {
    axial_gaussian_attention(q, k, k, m.mask_h, m.mask_w, 1, SoftmaxBase::two, Lepe<float>{});
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("row pass"), std::string::npos) << e.what();
  }
}

TEST(AttentionUnit, RejectsHeadsThatDoNotDivideWidth) {
  AttentionConfig cfg;
  cfg.embed_dim = 6;
  cfg.num_heads = 4;
  EXPECT_THROW(AttentionUnit<float>(cfg, 2, 2, Rng(0)), ConfigError);
}

TEST(Complexity, CountedEntriesEqualClosedForms) {
  for (auto [h, w] : std::vector<std::pair<std::size_t, std::size_t>>{{8, 8}, {8, 16}, {16, 16}, {32, 32}}) {
    auto rows = bench_attention<float>({{h, w}}, {AttentionVariant::axial_gaussian, AttentionVariant::full_gaussian}, 1,
                                       8, 1, 1);
    EXPECT_EQ(rows[0].counted, h * w * (h + w));
    EXPECT_EQ(rows[1].counted, (h * w) * (h * w));
  }
}

TEST(Complexity, EightByEightCounts) {
  auto rows = bench_attention<float>({{8, 8}}, {AttentionVariant::axial_gaussian, AttentionVariant::full_gaussian}, 1,
                                     8, 1, 1);
  EXPECT_EQ(rows[0].counted, 1024u);
  EXPECT_EQ(rows[1].counted, 4096u);
}

TEST(Complexity, DoublingWidthScalesPerClosedForm) {
  const std::uint64_t h = 8, w = 8;
  auto a = bench_attention<float>({{h, w}, {h, 2 * w}},
                                  {AttentionVariant::axial_gaussian, AttentionVariant::full_gaussian}, 1, 8, 1, 1);
  EXPECT_EQ(a[3].counted, 4 * a[1].counted);
  // (2HW*H + 4HW*W) / (HW*H + HW*W)
  EXPECT_EQ(a[2].counted * (h * w * h + h * w * w), a[0].counted * (2 * h * w * h + 4 * h * w * w));
}

}  // namespace
}  // namespace cfp
