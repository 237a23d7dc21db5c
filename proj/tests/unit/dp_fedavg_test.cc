// Copyright 2026 The FedMem Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "fedmem/dp_fedavg.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "test_util.hpp"

namespace fedmem {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::vector<std::vector<TokenSequence>> RandomClients(int clients, int sentences, int vocab,
                                                      std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<TokenSequence>> out(clients);
  for (auto& c : out)
    for (int i = 0; i < sentences; ++i) {
      TokenSequence s;
      const int len = 1 + static_cast<int>(rng.UniformIndex(4));
      for (int j = 0; j < len; ++j)
        s.push_back(static_cast<TokenId>(Vocabulary::kNumSpecial + rng.UniformIndex(vocab - 3)));
      c.push_back(s);
    }
  return out;
}

ModelParams ParamsFrom(const ModelShape& shape, std::initializer_list<double> head) {
  ModelParams p(shape);
  std::size_t i = 0;
  for (double x : head) p.raw()[i++] = x;
  return p;
}

TEST(DpConfigTest, SigmaForProductionSettings) {
  DpConfig cfg{4000000, 20000, 0.8, 0.8, 2000};
  // zS/(qN) in double differs from the literal 3.2e-5 by one rounding.
  EXPECT_DOUBLE_EQ(cfg.sigma(), 3.2e-5);
  EXPECT_LE(std::abs(cfg.sigma() - 3.2e-5), std::nextafter(3.2e-5, 1.0) - 3.2e-5);
}

TEST(DpConfigTest, Validation) {
  EXPECT_THROW((DpConfig{10, 11, 0.0, 1.0, 1}.Validate()), Error);
  EXPECT_THROW((DpConfig{10, 0, 0.0, 1.0, 1}.Validate()), Error);
  EXPECT_THROW((DpConfig{10, 5, -1.0, 1.0, 1}.Validate()), Error);
  EXPECT_THROW((DpConfig{10, 5, 0.0, 0.0, 1}.Validate()), Error);
  EXPECT_THROW((DpConfig{10, 5, 1.0, kInf, 1}.Validate()), Error);
  EXPECT_NO_THROW((DpConfig{10, 5, 0.0, kInf, 0}.Validate()));
}

TEST(ClipTest, ScalesDownLongVectors) {
  ModelParams v = ParamsFrom({3, 1, 1}, {1.2, 1.6});  // norm 2
  ClipToNorm(v, 0.8);
  EXPECT_NEAR(v.raw()[0], 1.2 * 0.4, 1e-15);
  EXPECT_NEAR(v.raw()[1], 1.6 * 0.4, 1e-15);
  EXPECT_NEAR(v.Norm(), 0.8, 1e-15);
}

TEST(ClipTest, HalvesNormSixteenToEight) {
  ModelParams v = ParamsFrom({3, 1, 1}, {0.96, 1.28});  // norm 1.6
  const ModelParams original = v;
  EXPECT_NEAR(ClipToNorm(v, 0.8), 1.6, 1e-15);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(v.raw()[i], 0.5 * original.raw()[i], 1e-15);
}

TEST(ClipTest, ShortVectorUnchanged) {
  ModelParams v = ParamsFrom({3, 1, 1}, {0.3, 0.4});  // norm 0.5
  const ModelParams original = v;
  ClipToNorm(v, 0.8);
  EXPECT_TRUE(v == original);
}

TEST(ClipTest, ZeroVectorAndDisabledClip) {
  ModelParams zero({4, 2, 2});
  ClipToNorm(zero, 0.8);
  EXPECT_EQ(zero.Norm(), 0.0);
  ModelParams v = testing::RandomModel({4, 2, 2}, 1, 10.0);
  const ModelParams original = v;
  ClipToNorm(v, kInf);
  EXPECT_TRUE(v == original);
}

TEST(ClipTest, OutputNormIsMinOfNormAndBound) {
  Rng rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    ModelParams v = testing::RandomModel({5, 2, 3}, 1000 + trial, rng.Uniform01() * 3);
    const double s = 0.01 + 4 * rng.Uniform01();
    const double norm = v.Norm();
    ClipToNorm(v, s);
    ASSERT_NEAR(v.Norm(), std::min(norm, s), 1e-12);
  }
}

TEST(SamplingTest, WholePoolWhenRoundCoversIt) {
  Rng rng(1);
  EXPECT_EQ(SampleRoundClients({4, 2, 9}, 3, rng), (std::vector<std::size_t>{2, 4, 9}));
  EXPECT_EQ(SampleRoundClients({7}, 1, rng), (std::vector<std::size_t>{7}));
}

TEST(SamplingTest, PoolSmallerThanRoundIsConfigError) {
  Rng rng(1);
  try {
    SampleRoundClients({1, 2}, 3, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kConfig);
  }
}

TEST(SamplingTest, InclusionFrequenciesAreUniform) {
  // Each client is included with probability m/n = 0.1. Counts over trials
  // are binomial with variance trials * p * (1 - p).
  const int pool_size = 100, m = 10, trials = 50000;
  std::vector<std::size_t> pool(pool_size);
  for (int i = 0; i < pool_size; ++i) pool[i] = i;
  std::vector<int> counts(pool_size, 0);
  Rng rng(2024);
  for (int t = 0; t < trials; ++t) {
    const auto s = SampleRoundClients(pool, m, rng);
    ASSERT_EQ(s.size(), std::size_t(m));
    for (std::size_t i = 1; i < s.size(); ++i) ASSERT_LT(s[i - 1], s[i]);
    for (auto k : s) ++counts[k];
  }
  const double p = double(m) / pool_size, expected = trials * p;
  double chi2 = 0.0;
  for (int c : counts) chi2 += (c - expected) * (c - expected) / (expected * (1 - p));
  EXPECT_LT(chi2, testing::ChiSquareQuantile99(pool_size - 1));
}

TEST(UserUpdateTest, DeltaIsClippedLocalProgress) {
  const auto clients = RandomClients(1, 12, 10, 5);
  const ModelParams global = testing::RandomModel({10, 4, 4}, 6, 0.2);
  ClientConfig cfg{2, 4, 0.5};
  Rng r1(1), r2(1);
  const auto free = UserUpdate(clients[0], global, cfg, kInf, r1);
  ASSERT_GT(free.pre_clip_norm, 0.0);
  EXPECT_FALSE(free.clipped);
  const double bound = free.pre_clip_norm / 2;
  const auto clipped = UserUpdate(clients[0], global, cfg, bound, r2);
  EXPECT_TRUE(clipped.clipped);
  EXPECT_NEAR(clipped.delta.Norm(), bound, 1e-12);
  for (std::size_t i = 0; i < free.delta.size(); ++i)
    ASSERT_NEAR(clipped.delta.raw()[i], 0.5 * free.delta.raw()[i], 1e-15);
}

TEST(UserUpdateTest, ZeroLearningRateGivesZeroDelta) {
  const auto clients = RandomClients(1, 5, 10, 5);
  const ModelParams global = testing::RandomModel({10, 4, 4}, 6);
  Rng rng(1);
  const auto r = UserUpdate(clients[0], global, ClientConfig{3, 2, 0.0}, 1.0, rng);
  EXPECT_EQ(r.delta.Norm(), 0.0);
}

TEST(UserUpdateTest, RunsExactlyEpochsTimesBatches) {
  const auto clients = RandomClients(1, 11, 10, 5);
  const ModelParams global = testing::RandomModel({10, 4, 4}, 6);
  Rng rng(1);
  const auto r = UserUpdate(clients[0], global, ClientConfig{3, 4, 0.1}, 1.0, rng);
  EXPECT_EQ(r.steps, 3 * 3);  // ceil(11 / 4) batches per epoch
}

TEST(UserUpdateTest, NormNeverExceedsClip) {
  const auto clients = RandomClients(20, 8, 12, 9);
  const ModelParams global = testing::RandomModel({12, 4, 4}, 2);
  for (std::size_t k = 0; k < clients.size(); ++k) {
    Rng rng(k);
    const auto r = UserUpdate(clients[k], global, ClientConfig{1, 3, 1.0}, 0.05, rng);
    EXPECT_LE(r.delta.Norm(), 0.05 + 1e-9);
  }
}

TEST(UserUpdateTest, EmptyClientIsInputError) {
  const ModelParams global({10, 4, 4});
  Rng rng(1);
  EXPECT_THROW(UserUpdate({}, global, ClientConfig{}, 1.0, rng), Error);
}

TEST(AggregateTest, NoiselessAverageDividesByRoundSize) {
  const ModelShape shape{3, 1, 1};
  std::vector<ModelParams> deltas{ParamsFrom(shape, {1.0, 2.0}), ParamsFrom(shape, {3.0, -2.0}),
                                  ModelParams(shape)};
  Rng rng(1);
  const ModelParams avg = AggregateAndNoise(deltas, DpConfig{10, 3, 0.0, 1.0, 1}, rng);
  EXPECT_DOUBLE_EQ(avg.raw()[0], 4.0 / 3.0);
  EXPECT_DOUBLE_EQ(avg.raw()[1], 0.0);
}

TEST(AggregateTest, WrongCountIsInvariantViolation) {
  std::vector<ModelParams> deltas(2, ModelParams({3, 1, 1}));
  Rng rng(1);
  try {
    AggregateAndNoise(deltas, DpConfig{10, 3, 0.0, 1.0, 1}, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInvariant);
  }
}

TEST(AggregateTest, NoiseStandardDeviationMatchesSigma) {
  // One coordinate per draw would need 1e5 aggregations; a model with many
  // coordinates gives the same per-coordinate sample in a few calls.
  const ModelShape shape{1000, 4, 4};  // 9084 coordinates
  const DpConfig cfg{1000, 4, 1.3, 0.5, 1};
  std::vector<ModelParams> deltas(4, ModelParams(shape));
  double sum = 0, sq = 0;
  std::int64_t n = 0;
  for (int call = 0; n < 100000; ++call) {
    Rng rng(DeriveSeed(7, "noise-test", call));
    const ModelParams out = AggregateAndNoise(deltas, cfg, rng);
    for (double x : out.raw()) {
      sum += x;
      sq += x * x;
      ++n;
    }
  }
  const double mean = sum / n;
  const double sd = std::sqrt(sq / n - mean * mean);
  EXPECT_NEAR(sd / cfg.sigma(), 1.0, 0.02);
}

TEST(ServerOptimizerTest, PlainAddsUpdate) {
  const ModelShape shape{3, 1, 1};
  ModelParams theta = ParamsFrom(shape, {1.0, 2.0});
  ServerOptimizer opt({ServerOptimizerKind::kPlain});
  opt.Step(theta, ParamsFrom(shape, {0.5, -1.0}));
  EXPECT_EQ(theta.raw()[0], 1.5);
  EXPECT_EQ(theta.raw()[1], 1.0);
}

TEST(ServerOptimizerTest, PlainStepWithResidualRecoversTargetExactly) {
  // theta + fl(l - theta) misses l by an ulp when l - theta is inexact, e.g.
  // when a coordinate changes sign; the residual restores it.
  const ModelShape shape{40, 8, 8};
  const ModelParams theta0 = testing::RandomModel(shape, 3, 1.0);
  ModelParams target = testing::RandomModel(shape, 4, 0.05);
  for (std::size_t i = 0; i < target.size(); i += 3) target.raw()[i] *= 1e-6;
  ModelParams delta = target;
  delta -= theta0;
  ModelParams residual = ModelParams::Zeros(shape);
  for (std::size_t i = 0; i < residual.size(); ++i)
    residual.raw()[i] =
        internal::TwoSumError(target.raw()[i], -theta0.raw()[i], delta.raw()[i]);

  ModelParams naive = theta0, compensated = theta0;
  ServerOptimizer a({ServerOptimizerKind::kPlain}), b({ServerOptimizerKind::kPlain});
  a.Step(naive, delta);
  b.Step(compensated, delta, &residual);
  std::size_t naive_misses = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    ASSERT_EQ(compensated.raw()[i], target.raw()[i]) << i;
    naive_misses += naive.raw()[i] != target.raw()[i];
  }
  EXPECT_GT(naive_misses, 0u);
}

TEST(ServerOptimizerTest, TwoSumErrorIsExact) {
  EXPECT_EQ(internal::TwoSumError(1.0, 0x1p-60, 1.0), 0x1p-60);
  EXPECT_EQ(internal::TwoSumError(0.5, 0.25, 0.75), 0.0);
  EXPECT_EQ(internal::TwoSumError(1e16, 1.0, 1e16 + 1.0), 1.0);
}

TEST(UserUpdateTest, ResidualIsBelowDeltaUlp) {
  const auto clients = RandomClients(1, 8, 12, 21);
  const ModelParams global = testing::RandomModel({12, 4, 4}, 22, 0.3);
  Rng r1(1, streams::kClientShuffle, 0, 0), r2(1, streams::kClientShuffle, 0, 0);
  const ClientConfig cfg{2, 3, 0.7};
  const auto u = UserUpdate(clients[0], global, cfg, kInf, r1);
  const auto v = UserUpdate(clients[0], global, cfg, kInf, r2);
  EXPECT_TRUE(u.residual == v.residual);
  for (std::size_t i = 0; i < u.delta.size(); ++i)
    ASSERT_LE(std::abs(u.residual.raw()[i]), std::abs(u.delta.raw()[i]) * 0x1p-53) << i;
}

TEST(ServerOptimizerTest, ZeroMomentumEqualsPlain) {
  const ModelParams start = testing::RandomModel({6, 2, 2}, 1);
  ModelParams a = start, b = start;
  ServerOptimizer plain({ServerOptimizerKind::kPlain});
  ServerOptimizer momentum({ServerOptimizerKind::kMomentum, 1.0, 0.0});
  for (int i = 0; i < 3; ++i) {
    const ModelParams u = testing::RandomModel({6, 2, 2}, 10 + i);
    plain.Step(a, u);
    momentum.Step(b, u);
  }
  EXPECT_TRUE(a == b);
}

TEST(ServerOptimizerTest, MomentumTwoStepsHandRecurrence) {
  const ModelShape shape{3, 1, 1};
  ModelParams theta(shape);
  ServerOptimizer opt({ServerOptimizerKind::kMomentum, 1.0, 0.99});
  opt.Step(theta, ParamsFrom(shape, {1.0}));  // v1 = 1,     theta = 1
  opt.Step(theta, ParamsFrom(shape, {2.0}));  // v2 = 2.99,  theta = 3.99
  EXPECT_DOUBLE_EQ(opt.velocity()[0], 0.99 * 1.0 + 2.0);
  EXPECT_DOUBLE_EQ(theta.raw()[0], 1.0 + 2.99);
}

TEST(ServerOptimizerTest, NesterovTwoStepsHandRecurrence) {
  const ModelShape shape{3, 1, 1};
  ModelParams theta(shape);
  ServerOptimizer opt({ServerOptimizerKind::kNesterov, 0.5, 0.9});
  opt.Step(theta, ParamsFrom(shape, {1.0}));  // v1 = 1;   step 0.5 * (0.9 + 1)
  opt.Step(theta, ParamsFrom(shape, {2.0}));  // v2 = 2.9; step 0.5 * (0.9 * 2.9 + 2)
  EXPECT_DOUBLE_EQ(theta.raw()[0], 0.5 * 1.9 + 0.5 * (0.9 * 2.9 + 2.0));
}

TEST(ServerOptimizerTest, AdamFirstStepIsNormalizedUpdate) {
  const ModelShape shape{3, 1, 1};
  ModelParams theta(shape);
  ServerOptConfig cfg{ServerOptimizerKind::kAdam, 0.01};
  ServerOptimizer opt(cfg);
  opt.Step(theta, ParamsFrom(shape, {-4.0, 0.25}));
  EXPECT_NEAR(theta.raw()[0], -0.01 * 4.0 / (4.0 + 1e-8), 1e-15);
  EXPECT_NEAR(theta.raw()[1], 0.01 * 0.25 / (0.25 + 1e-8), 1e-15);
}

TEST(ServerOptimizerTest, UnknownKindIsConfigError) {
  EXPECT_EQ(ParseServerOptimizer("nesterov"), ServerOptimizerKind::kNesterov);
  EXPECT_THROW(ParseServerOptimizer("rmsprop"), Error);
}

TrainConfig SmallConfig(std::int64_t n, std::int64_t m, std::int64_t rounds) {
  TrainConfig cfg;
  cfg.dp = DpConfig{n, m, 0.0, kInf, rounds};
  cfg.client = ClientConfig{1, 4, 0.5};
  cfg.server = ServerOptConfig{ServerOptimizerKind::kPlain};
  return cfg;
}

TEST(TrainTest, ZeroRoundsReturnsInitialParams) {
  StaticPopulation pop(RandomClients(4, 5, 10, 1));
  const ModelParams init = testing::RandomModel({10, 4, 4}, 2);
  const auto result = Train(init, pop, SmallConfig(4, 2, 0), 3);
  EXPECT_TRUE(result.params == init);
  EXPECT_TRUE(result.metrics.empty());
}

TEST(TrainTest, SameSeedSameResult) {
  TrainConfig cfg = SmallConfig(8, 3, 4);
  cfg.dp.noise_multiplier = 0.5;
  cfg.dp.clip_norm = 0.1;
  cfg.server = ServerOptConfig{};
  const ModelParams init = testing::RandomModel({10, 4, 4}, 2);
  StaticPopulation a(RandomClients(8, 5, 10, 1)), b(RandomClients(8, 5, 10, 1));
  const auto ra = Train(init, a, cfg, 99);
  TrainOptions threaded;
  threaded.num_threads = 3;
  const auto rb = Train(init, b, cfg, 99, threaded);
  EXPECT_TRUE(ra.params == rb.params);
  for (std::size_t t = 0; t < ra.metrics.size(); ++t)
    EXPECT_EQ(ra.metrics[t].sampled, rb.metrics[t].sampled);
  StaticPopulation c(RandomClients(8, 5, 10, 1));
  EXPECT_FALSE(Train(init, c, cfg, 100).params == ra.params);
}

TEST(TrainTest, DegenerateRunEqualsCentralizedSgd) {
  // One client, every round: z = 0, no clipping, m = N = 1, E = 1. The
  // federated model must equal centralized SGD after every round.
  for (std::uint64_t seed : {17u, 18u, 19u}) {
    const auto clients = RandomClients(1, 7, 10, seed);
    const ModelParams init = testing::RandomModel({10, 4, 4}, seed + 100, 0.3);
    const int rounds = 50;
    StaticPopulation pop(clients);
    std::vector<ModelParams> trajectory;
    TrainOptions options;
    options.on_round = [&](const RoundMetrics&, const ModelParams& p) { trajectory.push_back(p); };
    Train(init, pop, SmallConfig(1, 1, rounds), seed, options);
    ASSERT_EQ(trajectory.size(), static_cast<std::size_t>(rounds));

    // Centralized SGD over the same data, reshuffled each epoch from the
    // stream the federated client would use in that round.
    ModelParams theta = init;
    const auto& data = clients[0];
    for (int epoch = 0; epoch < rounds; ++epoch) {
      Rng shuffle(seed, streams::kClientShuffle, epoch, 0);
      std::vector<std::size_t> order(data.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      shuffle.Shuffle(order);
      for (std::size_t s = 0; s < order.size(); s += 4) {
        std::vector<TokenSequence> batch;
        for (std::size_t i = s; i < std::min(order.size(), s + 4); ++i)
          batch.push_back(data[order[i]]);
        const auto lg = ComputeLossAndGradient(theta, SequenceBatch::FromSentences(batch));
        for (std::size_t i = 0; i < theta.size(); ++i)
          theta.raw()[i] -= 0.5 * lg.gradient.raw()[i];
      }
      ASSERT_TRUE(theta == trajectory[epoch]) << "seed " << seed << " round " << epoch;
    }
  }
}

TEST(TrainTest, FullParticipationRoundIsFederatedAveraging) {
  const auto clients = RandomClients(5, 6, 10, 8);
  const ModelParams init = testing::RandomModel({10, 4, 4}, 9, 0.3);
  StaticPopulation pop(clients);
  const auto fed = Train(init, pop, SmallConfig(5, 5, 1), 3);
  // Direct implementation: average of (locally trained - init).
  ModelParams expected = init;
  ModelParams sum(init.shape());
  for (std::size_t k = 0; k < clients.size(); ++k) {
    Rng shuffle(3, streams::kClientShuffle, 0, k);
    ModelParams local = init;
    std::vector<std::size_t> order(clients[k].size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle.Shuffle(order);
    for (std::size_t s = 0; s < order.size(); s += 4) {
      std::vector<TokenSequence> batch;
      for (std::size_t i = s; i < std::min(order.size(), s + 4); ++i)
        batch.push_back(clients[k][order[i]]);
      auto lg = ComputeLossAndGradient(local, SequenceBatch::FromSentences(batch));
      lg.gradient *= 0.5;
      local -= lg.gradient;
    }
    sum += local - init;
  }
  for (std::size_t i = 0; i < sum.size(); ++i) expected.raw()[i] += sum.raw()[i] / 5.0;
  for (std::size_t i = 0; i < expected.size(); ++i)
    ASSERT_NEAR(fed.params.raw()[i], expected.raw()[i], 1e-14);
}

TEST(TrainTest, SwappingOneClientMovesAverageByAtMostTwoSOverM) {
  const double clip = 0.05;
  const std::int64_t m = 4;
  TrainConfig cfg = SmallConfig(6, m, 1);
  cfg.dp.clip_norm = clip;
  const ModelParams global = testing::RandomModel({12, 4, 4}, 1, 0.3);
  for (std::uint64_t trial = 0; trial < 5; ++trial) {
    auto data = RandomClients(6, 6, 12, 100 + trial);
    StaticPopulation a(data);
    auto swapped = data;
    // Adversarial replacement: a client that repeats one sentence many times.
    swapped[2] = std::vector<TokenSequence>(40, TokenSequence{5, 5, 5, 5});
    StaticPopulation b(swapped);
    const std::vector<std::size_t> sampled{0, 2, 3, 5};
    RoundMetrics ma, mb;
    const auto da = RunClients(a, sampled, global, cfg, trial, 0, 1, ma);
    const auto db = RunClients(b, sampled, global, cfg, trial, 0, 1, mb);
    const ModelParams diff = AverageUpdates(da, m) - AverageUpdates(db, m);
    EXPECT_LE(diff.Norm(), 2 * clip / m + 1e-12);
  }
}

TEST(TrainTest, FractionClippedCountsClientsAboveBound) {
  const auto clients = RandomClients(6, 5, 10, 2);
  const ModelParams global = testing::RandomModel({10, 4, 4}, 4, 0.3);
  TrainConfig cfg = SmallConfig(6, 6, 1);
  cfg.dp.clip_norm = 0.02;
  StaticPopulation pop(clients);
  const std::vector<std::size_t> all{0, 1, 2, 3, 4, 5};
  RoundMetrics metrics;
  RunClients(pop, all, global, cfg, 5, 0, 1, metrics);
  int above = 0;
  for (std::size_t k = 0; k < clients.size(); ++k) {
    Rng shuffle(5, streams::kClientShuffle, 0, k);
    if (UserUpdate(clients[k], global, cfg.client, kInf, shuffle).pre_clip_norm > 0.02) ++above;
  }
  EXPECT_EQ(metrics.fraction_clipped, above / 6.0);
}

TEST(TrainTest, EmptyClientIsSkippedButStillCounted) {
  auto data = RandomClients(2, 4, 10, 3);
  data[1].clear();
  StaticPopulation pop(data);
  const ModelParams init = testing::RandomModel({10, 4, 4}, 6, 0.3);
  const auto result = Train(init, pop, SmallConfig(2, 2, 1), 8);
  EXPECT_EQ(result.metrics[0].skipped, 1);
  // The average divides by m = 2, so the update is half of client 0's delta.
  Rng shuffle(8, streams::kClientShuffle, 0, 0);
  const auto solo = UserUpdate(data[0], init, ClientConfig{1, 4, 0.5}, kInf, shuffle);
  for (std::size_t i = 0; i < init.size(); ++i)
    ASSERT_NEAR(result.params.raw()[i], init.raw()[i] + solo.delta.raw()[i] / 2, 1e-15);
}

TEST(TrainTest, MetricsCsvLayout) {
  StaticPopulation pop(RandomClients(3, 4, 10, 1));
  TrainConfig cfg = SmallConfig(3, 2, 3);
  cfg.dp.clip_norm = 0.1;
  cfg.dp.noise_multiplier = 1.0;
  const auto result = Train(ModelParams::Zeros({10, 4, 4}), pop, cfg, 1);
  const auto path = (std::filesystem::temp_directory_path() / "fedmem_metrics_test.csv").string();
  WriteMetricsCsv(result.metrics, path);
  std::ifstream in(path);
  std::string header, line;
  std::getline(in, header);
  EXPECT_EQ(header, "round,loss,fraction_clipped,update_norm,sigma");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 3);
  for (const auto& m : result.metrics) {
    EXPECT_GE(m.fraction_clipped, 0.0);
    EXPECT_LE(m.fraction_clipped, 1.0);
    EXPECT_DOUBLE_EQ(m.sigma, 1.0 * 0.1 / 2);
  }
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace fedmem
