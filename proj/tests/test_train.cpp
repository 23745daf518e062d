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
#include <fstream>
#include <limits>

#include "cfp/train/trainer.hpp"
#include "support/oracles.hpp"

namespace cfp {
namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

std::vector<std::uint8_t> random_labels(std::size_t n, std::size_t classes, Rng& rng) {
  std::vector<std::uint8_t> y(n);
  for (auto& v : y) v = static_cast<std::uint8_t>(rng.below(classes));
  return y;
}

template <typename T>
class LossGrad : public ::testing::Test {};
using Scalars = ::testing::Types<float, double>;
TYPED_TEST_SUITE(LossGrad, Scalars);

TYPED_TEST(LossGrad, CrossEntropyAndSoftDice) {
  using T = TypeParam;
  Rng rng(31);
  const auto labels = random_labels(2 * 3 * 3, 4, rng);
  auto z = testing::random_tensor<T>({2, 4, 3, 3}, rng);
  for (const auto& name : loss_names()) {
    const auto fn = make_loss<T>(name);
    auto rep = testing::grad_check<T>([&](auto& x) { return fn(x[0], labels); }, {z.detach()}, 2);
    EXPECT_LT(rep.max_rel_err, testing::GradTol<T>::rel) << name << ": " << rep.worst;
  }
}

TEST(Loss, UniformLogitsGiveLogC) {
  Rng rng(1);
  const auto labels = random_labels(2 * 5 * 5, 4, rng);
  const auto z = Tensor<double>::zeros({2, 4, 5, 5});
  EXPECT_NEAR(cross_entropy(z, labels).item(), std::log(4.0), 1e-12);
}

TEST(Loss, PerfectLogitsDriveSoftDiceToZero) {
  std::vector<std::uint8_t> labels{0, 1, 2, 3};
  std::vector<double> v(16, -40.0);
  for (std::size_t i = 0; i < 4; ++i) v[labels[i] * 4 + i] = 40.0;
  const auto z = Tensor<double>::from({1, 4, 2, 2}, v);
  EXPECT_NEAR(soft_dice_loss(z, labels).item(), 0.0, 1e-9);
  EXPECT_NEAR(cross_entropy(z, labels).item(), 0.0, 1e-9);
}

TEST(Loss, UnknownNameAndBadLabels) {
  EXPECT_THROW(make_loss<float>("focal"), ConfigError);
  const auto z = Tensor<float>::zeros({1, 2, 2, 2});
  EXPECT_ANY_THROW(cross_entropy(z, std::vector<std::uint8_t>{0, 1, 2, 0}));
  EXPECT_ANY_THROW(soft_dice_loss(z, std::vector<std::uint8_t>{0, 1}));
}

TEST(RunConfig, JsonRoundTripAndUnknownKeys) {
  RunConfig r;
  r.model.sigma_init = 1.5;
  r.model.upsampling = Upsampling::transpose_conv;
  r.epochs = 3;
  r.optimizer.lr = 3e-4;
  const auto back = run_config_from_json(to_json(r));
  EXPECT_EQ(to_json(back).dump(), to_json(r).dump());
  EXPECT_EQ(back.model.sigma_init, 1.5);
  EXPECT_EQ(back.optimizer.lr, 3e-4);

  EXPECT_THROW(run_config_from_json(json{{"epoch", 3}}), ConfigError);
  EXPECT_THROW(run_config_from_json(json{{"model", {{"sigma", 1.0}}}}), ConfigError);
  EXPECT_THROW(run_config_from_json(json{{"optimizer", {{"momentum", 0.9}}}}), ConfigError);
  EXPECT_THROW(run_config_from_json(json{{"epochs", "ten"}}), ConfigError);
  EXPECT_THROW(run_config_from_json(json{{"image_size", 40}}), ConfigError);
  EXPECT_THROW(run_config_from_json(json{{"model", {{"sigma_init", -1.0}}}}), ConfigError);
  EXPECT_THROW(run_config_from_json(json{{"model", {{"use_fre", false}}}}), ConfigError);
  EXPECT_NO_THROW(run_config_from_json(json::object()));
}

struct SmokeData {
  std::vector<data::SegSample> train, val;
};

SmokeData smoke_data() {
  data::SceneRanges r;
  r.image_size = 32;
  auto all = data::generate(r, 10, 3);
  return {{all.begin(), all.begin() + 8}, {all.begin() + 8, all.end()}};
}

RunConfig smoke_config() {
  RunConfig cfg;
  cfg.image_size = 32;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  return cfg;
}

TEST(Trainer, SmokeRunWritesArtifactsDeterministically) {
  const auto root = fs::temp_directory_path() / "cfp_train_smoke";
  fs::remove_all(root);
  const auto d = smoke_data();
  Trainer<float> a(smoke_config(), d.train, d.val), b(smoke_config(), d.train, d.val);
  const auto sa = a.run(root / "a");
  b.run(root / "b");
  ASSERT_EQ(sa.history.size(), 1u);
  EXPECT_TRUE(std::isfinite(sa.history[0].train_loss));
  EXPECT_EQ(sa.best_epoch, 1u);
  EXPECT_EQ(sa.parameter_count, 696194u);
  for (const char* f : {"config.json", "best.cfpc", "last.cfpc", "metrics.csv", "timing.csv", "curves.svg"}) {
    EXPECT_TRUE(fs::exists(root / "a" / f)) << f;
  }
  for (const char* f : {"config.json", "best.cfpc", "last.cfpc", "metrics.csv", "curves.svg"}) {
    EXPECT_EQ(slurp(root / "a" / f), slurp(root / "b" / f)) << f;
  }
  EXPECT_EQ(slurp(root / "a" / "metrics.csv").rfind("epoch,train_loss,val_dice_mean,val_hd_mean\n1,", 0), 0u);
  EXPECT_EQ(load_run_config(root / "a" / "config.json").image_size, 32u);
}

TEST(Trainer, StepLowersLossOnAFixedBatch) {
  const auto d = smoke_data();
  auto cfg = smoke_config();
  cfg.model.drop_path_rate = 0.0;
  cfg.optimizer.lr = 1e-3;
  Trainer<float> t(cfg, d.train, d.val);
  const auto batch = make_batch<float>(d.train, {0, 1});
  const double first = t.step(batch, 1, 0);
  double last = first;
  for (std::size_t s = 1; s < 15; ++s) last = t.step(batch, 1, s);
  EXPECT_LT(last, first);
}

TEST(Trainer, RejectsMismatchedSamples) {
  const auto d = smoke_data();
  auto cfg = smoke_config();
  cfg.image_size = 64;
  EXPECT_THROW(Trainer<float>(cfg, d.train, d.val), DimensionError);
  EXPECT_THROW(Trainer<float>(smoke_config(), {}, d.val), UsageError);
}

TEST(Trainer, NanParameterNamesEpochAndStep) {
  const auto d = smoke_data();
  Trainer<float> t(smoke_config(), d.train, d.val);
  auto params = t.model().parameters();
  params.front().second.mutable_data()[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    t.run(fs::temp_directory_path() / "cfp_train_nan");
    FAIL() << "NaN went unnoticed";
  } catch (const NumericError& e) {
    EXPECT_EQ(std::string(e.what()).rfind("NaN loss at epoch 1, step 0: ", 0), 0u) << e.what();
  }
}

}  // namespace
}  // namespace cfp
