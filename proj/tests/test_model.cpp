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

#include <cstring>

#include "cfp/model/cfpformer.hpp"
#include "support/oracles.hpp"

namespace cfp {
namespace {

using testing::random_tensor;

// Closed-form parameter count, written from the layer list rather than by
// walking the model.
std::size_t expected_params(const CfpConfig& c, const BackboneConfig& b) {
  auto conv = [](std::size_t in, std::size_t out, std::size_t k) { return in * out * k * k + out; };
  std::size_t n = conv(b.in_channels, b.stem_channels, 3);
  for (std::size_t s = 0; s < kStages; ++s) {
    if (s > 0) n += conv(b.channels[s - 1], b.channels[s], 3);
    for (std::size_t i = 0; i < b.blocks[s]; ++i) {
      n += conv(i == 0 && s == 0 ? b.stem_channels : b.channels[s], b.channels[s], 3) + 2 * b.channels[s];
    }
  }
  const std::size_t p = c.patch_size;
  n += conv(b.channels[kStages - 1], c.widths[kStages - 1], p);
  for (std::size_t s = 0; s < kStages; ++s) {
    const std::size_t d = c.widths[s], hidden = d * c.mlp_ratio;
    std::size_t block = 2 * 2 * d + 4 * (d * d + d) + (d * hidden + hidden) + (hidden * d + d);
    if (c.attention != AttentionVariant::mhsa) {
      block += d * c.lepe_kernel * c.lepe_kernel + d;
      if (c.mask_family == MaskFamily::gaussian) block += c.heads[s];
    }
    if (c.use_pyramid_connection) block += conv(b.channels[s], d, p);
    n += c.stage_blocks[s] * block;
    if (s > 0) {
      n += c.upsampling == Upsampling::bilinear ? d * c.widths[s - 1] + c.widths[s - 1]
                                                 : d * c.widths[s - 1] * 4 + c.widths[s - 1];
    }
  }
  return n + c.widths[0] * c.num_classes + c.num_classes;
}

std::size_t count(const CfpConfig& c, const BackboneConfig& b = {}) {
  return parameter_count(CfpFormer<float>(c, b, 32, 1).parameters());
}

Tensor<float> image(std::size_t batch, std::size_t size, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(batch * size * size);
  for (auto& x : v) x = static_cast<float>(rng.uniform());
  return Tensor<float>::from({batch, 1, size, size}, std::move(v));
}

TEST(ParamCount, TinyMatchesClosedFormAndFrozenValue) {
  const auto tiny = CfpConfig::tiny();
  EXPECT_EQ(count(tiny), expected_params(tiny, {}));
  EXPECT_EQ(count(tiny), 696194u);
  EXPECT_EQ(CfpFormer<float>(tiny, {}, 32, 1).parameters().size(), 164u);
  EXPECT_EQ(count(CfpConfig::small()), expected_params(CfpConfig::small(), {}));
}

TEST(ParamCount, VariantsDifferAsTheAlgebraPredicts) {
  const auto base = CfpConfig::tiny();
  auto mhsa = base;
  mhsa.attention = AttentionVariant::mhsa;
  auto nopyr = base;
  nopyr.use_pyramid_connection = false;
  auto natural = base;
  natural.softmax_base = SoftmaxBase::natural;
  auto tconv = base;
  tconv.upsampling = Upsampling::transpose_conv;
  auto expo = base;
  expo.mask_family = MaskFamily::exponential;
  auto p2 = base;
  p2.patch_size = 2;
  for (const auto& c : {mhsa, nopyr, natural, tconv, expo, p2}) EXPECT_EQ(count(c), expected_params(c, {}));
  EXPECT_LT(count(mhsa), count(base));
  EXPECT_LT(count(nopyr), count(base));
  EXPECT_EQ(count(natural), count(base));
  EXPECT_GT(count(tconv), count(base));
  EXPECT_EQ(count(base) - count(expo), 2u + 4 + 3 * 8 + 16);
}

TEST(Decoder, LogitShapesAcrossSizes) {
  for (std::size_t size : {32u, 64u, 128u}) {
    CfpFormer<float> m(CfpConfig::tiny(), {}, size, 3);
    const auto logits = m.predict(image(1, size, size));
    EXPECT_EQ(logits.shape(), (Shape{1, 4, size, size}));
  }
  auto p2 = CfpConfig::tiny();
  p2.patch_size = 2;
  CfpFormer<float> m(p2, {}, 64, 3);
  EXPECT_EQ(m.predict(image(2, 64, 4)).shape(), (Shape{2, 4, 64, 64}));
}

TEST(Decoder, FreIsRequiredForThePyramidConnection) {
  auto c = CfpConfig::tiny();
  c.use_fre = false;
  try {
    CfpFormer<float>(c, {}, 32, 1);
    FAIL() << "w/o FRE accepted";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("w/o FRE"), std::string::npos) << e.what();
  }
  c.use_pyramid_connection = false;
  CfpFormer<float> m(c, {}, 32, 1);
  for (const auto& [name, p] : m.parameters()) EXPECT_EQ(name.find(".fre."), std::string::npos) << name;
}

TEST(Decoder, PatchSizeMustDivideEveryLevel) {
  auto c = CfpConfig::tiny();
  c.patch_size = 16;
  try {
    CfpFormer<float> m(c, {}, 64, 1);
    m.predict(image(1, 64, 1));
    FAIL() << "indivisible patch accepted";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("patch size 16"), std::string::npos) << e.what();
  }
  c.patch_size = 3;
  EXPECT_NO_THROW(CfpFormer<float>(c, {}, 48, 1).predict(image(1, 48, 1)));
}

TEST(PatchEmbed, ShapesAndHandEvaluation) {
  PatchEmbed<float> pe(2, 3, 4, "level", Rng(1));
  Rng rng(2);
  EXPECT_EQ(pe(random_tensor<float>({1, 2, 8, 8}, rng)).shape(), (Shape{1, 2, 2, 3}));
  PatchEmbed<float> p1(2, 3, 1, "level", Rng(1));
  EXPECT_EQ(p1(random_tensor<float>({1, 2, 5, 7}, rng)).shape(), (Shape{1, 5, 7, 3}));

  // Constant 2x2 input, out channel o weight row all ones * (o + 1): token = 4 * c * sum over in.
  PatchEmbed<double> hand(2, 2, 2, "hand", Rng(1));
  for (std::size_t i = 0; i < hand.proj.weight.numel(); ++i) hand.proj.weight.mutable_data()[i] = (i < 8) ? 1.0 : 2.0;
  for (auto& b : hand.proj.bias.mutable_data()) b = 0.0;
  const auto tok = hand(Tensor<double>::full({1, 2, 2, 2}, 0.5));
  EXPECT_EQ(tok.shape(), (Shape{1, 1, 1, 2}));
  EXPECT_DOUBLE_EQ(tok.at(0), 8 * 0.5);
  EXPECT_DOUBLE_EQ(tok.at(1), 8 * 0.5 * 2.0);
}

TEST(Fre, AdditiveAndZeroInitIdentity) {
  Rng rng(3);
  PatchEmbed<double> pe(6, 4, 2, "level 1", Rng(4));
  const auto kv = random_tensor<double>({2, 3, 3, 4}, rng);
  const auto f = random_tensor<double>({2, 6, 6, 6}, rng);
  const auto fused = fre_fuse(kv, f, pe);
  const auto emb = pe(f);
  for (std::size_t i = 0; i < kv.numel(); ++i) EXPECT_NEAR(fused.at(i) - kv.at(i), emb.at(i), 1e-12);
  for (auto& w : pe.proj.weight.mutable_data()) w = 0;
  for (auto& b : pe.proj.bias.mutable_data()) b = 0;
  const auto same = fre_fuse(kv, f, pe);
  for (std::size_t i = 0; i < kv.numel(); ++i) EXPECT_EQ(same.at(i), kv.at(i));
  try {
    fre_fuse(kv, random_tensor<double>({2, 6, 8, 8}, rng), pe);
    FAIL() << "mismatched grid accepted";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("w/o FRE"), std::string::npos);
  }
}

TEST(Block, ZeroBranchesGiveIdentity) {
  const auto cfg = CfpConfig::tiny();
  CfpBlock<double> block(cfg, 1, 4, 4, std::size_t{32}, Rng(5));
  NamedParams<double> params;
  block.collect(params, "b");
  for (auto& [name, p] : params) {
    if (name.starts_with("b.attn.proj.") || name.starts_with("b.mlp.fc2.")) {
      for (auto& v : p.mutable_data()) v = 0.0;
    }
  }
  Rng rng(6);
  const auto x = random_tensor<double>({2, 4, 4, 32}, rng);
  const auto f = random_tensor<double>({2, 32, 4, 4}, rng);
  Rng drop(1);
  const auto y = block.forward(x, &f, BlockContext{true, &drop, nullptr});
  for (std::size_t i = 0; i < x.numel(); ++i) ASSERT_EQ(y.at(i), x.at(i));
}

TEST(Decoder, GradientReachesExactlyTheConnectedLevels) {
  Rng rng(7);
  for (bool pyramid : {true, false}) {
    auto cfg = CfpConfig::tiny();
    cfg.use_pyramid_connection = pyramid;
    cfg.drop_path_rate = 0.0;
    CfpDecoder<double> dec(cfg, {16, 32, 64, 128}, 32, Rng(8));
    FeaturePyramid<double> pyr;
    for (std::size_t l = 0; l < kStages; ++l) {
      pyr.levels.push_back(random_tensor<double>({1, 16u << l, 32u >> l, 32u >> l}, rng, 1.0, true));
    }
    auto logits = dec.forward(pyr, 32, 32, BlockContext{});
    sum(mul(logits, random_tensor<double>(logits.shape(), rng))).backward();
    for (std::size_t l = 0; l < kStages; ++l) {
      double g = 0.0;
      if (pyr.levels[l].has_grad()) {
        for (double v : pyr.levels[l].grad()) g += std::abs(v);
      }
      if (pyramid || l == kStages - 1) {
        EXPECT_GT(g, 0.0) << "level " << l;
      } else {
        EXPECT_EQ(g, 0.0) << "level " << l;
      }
    }
  }
}

TEST(Decoder, PyramidConnectionChangesOutputs) {
  auto with = CfpConfig::tiny(), without = CfpConfig::tiny();
  without.use_pyramid_connection = false;
  CfpFormer<float> a(with, {}, 32, 9), b(without, {}, 32, 9);
  const auto x = image(1, 32, 2);
  const auto la = a.predict(x), lb = b.predict(x);
  double diff = 0.0;
  for (std::size_t i = 0; i < la.numel(); ++i) diff = std::max(diff, double(std::abs(la.at(i) - lb.at(i))));
  EXPECT_GT(diff, 0.0);
}

TEST(Model, FixedSeedGivesBitIdenticalLogits) {
  CfpFormer<float> a(CfpConfig::tiny(), {}, 32, 42), b(CfpConfig::tiny(), {}, 32, 42);
  const auto x = image(2, 32, 3);
  const auto la = a.forward(x, true), lb = b.forward(x, true);
  EXPECT_EQ(std::memcmp(la.data().data(), lb.data().data(), la.data().size_bytes()), 0);
  CfpFormer<float> c(CfpConfig::tiny(), {}, 32, 43);
  const auto lc = c.predict(x);
  EXPECT_NE(std::memcmp(la.data().data(), lc.data().data(), la.data().size_bytes()), 0);
}

TEST(Backbone, LevelsAndZeroWeights) {
  Backbone<float> bb(BackboneConfig{}, Rng(1));
  const auto pyr = bb.forward(image(1, 64, 1));
  ASSERT_EQ(pyr.levels.size(), kStages);
  for (std::size_t l = 0; l < kStages; ++l) {
    EXPECT_EQ(pyr.levels[l].shape(), (Shape{1, 16u << l, 64u >> l, 64u >> l}));
  }
  NamedParams<float> params;
  bb.collect(params, "bb");
  for (auto& [name, p] : params) {
    if (!name.ends_with("norm.gain")) {
      for (auto& v : p.mutable_data()) v = 0.0f;
    }
  }
  for (const auto& level : bb.forward(Tensor<float>::full({1, 1, 32, 32}, 0.7f)).levels) {
    for (float v : level.data()) ASSERT_EQ(v, 0.0f);
  }
  EXPECT_THROW(bb.forward(image(1, 40, 1)), DimensionError);
}

template <typename T>
class ModelGrad : public ::testing::Test {};
using Scalars = ::testing::Types<float, double>;
TYPED_TEST_SUITE(ModelGrad, Scalars);

TYPED_TEST(ModelGrad, BackboneTwoStages) {
  using T = TypeParam;
  BackboneConfig cfg;
  Backbone<T> bb(cfg, Rng(2));
  Rng rng(3);
  auto x = random_tensor<T>({1, 1, 16, 16}, rng);
  NamedParams<T> params;
  bb.collect(params, "bb");
  std::vector<Tensor<T>> inputs{x};
  for (auto& [name, p] : params) {
    if (name.find("stage0") != std::string::npos || name.find("stage1") != std::string::npos ||
        name.find("stem") != std::string::npos || name.find("down1") != std::string::npos) {
      inputs.push_back(p);
    }
  }
  auto rep = testing::grad_check<T>(
      [&](auto& in) {
        auto pyr = bb.forward(in[0]);
        return pyr.levels[1];
      },
      inputs, 4, 8);
  EXPECT_LT(rep.max_rel_err, testing::GradTol<T>::rel) << rep.worst;
}

TYPED_TEST(ModelGrad, FullTinyModelEveryParameter) {
  using T = TypeParam;
  auto cfg = CfpConfig::tiny();
  cfg.drop_path_rate = 0.0;
  CfpFormer<T> m(cfg, {}, 16, 5);
  Rng rng(6);
  // Nonzero LePE kernels so that their inputs are exercised too.
  for (auto& [name, p] : m.parameters()) {
    if (name.ends_with("lepe.kernel")) {
      for (auto& v : p.mutable_data()) v = static_cast<T>(rng.uniform(-0.3, 0.3));
    }
  }
  auto x = random_tensor<T>({1, 1, 16, 16}, rng);
  std::vector<Tensor<T>> inputs{x};
  for (auto& [name, p] : m.parameters()) inputs.push_back(p);
  auto rep = testing::grad_check<T>([&](auto& in) { return m.forward(in[0]); }, inputs, 7, 3);
  EXPECT_GE(rep.checked, 3 * 164u);
  EXPECT_LT(rep.max_rel_err, testing::GradTol<T>::rel) << rep.worst;
}

}  // namespace
}  // namespace cfp
