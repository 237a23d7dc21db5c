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

#include "fedmem/lm.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "fedmem/model.hpp"
#include "test_util.hpp"

namespace fedmem {
namespace {

using testing::AllSequences;
using testing::BruteForceLogPerplexity;
using testing::RandomModel;

// A model that puts (numerically) all mass on `token` at every step.
ModelParams DominantModel(const ModelShape& shape, TokenId token) {
  ModelParams p = ModelParams::Zeros(shape);
  p.output_bias()(token) = 1000.0;
  return p;
}

TEST(ModelShapeTest, ParameterCountIsPureFunctionOfDims) {
  const ModelShape tied{1000, 96, 96};
  EXPECT_EQ(tied.ParameterCount(), 1000u * 96 + 3 * 96 * 96 * 2 + 3 * 96 + 1000);
  const ModelShape projected{50, 8, 6};
  EXPECT_EQ(projected.ParameterCount(), 50u * 8 + 3 * 6 * 8 + 3 * 6 * 6 + 3 * 6 + 8 * 6 + 50);
  EXPECT_EQ(ModelParams(projected).size(), projected.ParameterCount());
}

TEST(ForwardTest, ZeroParamsGiveUniformDistribution) {
  const ModelParams p = ModelParams::Zeros({10, 4, 4});
  for (const auto& dist : Forward(p, {0, 5, 9, 3})) {
    for (Eigen::Index v = 0; v < dist.size(); ++v) EXPECT_DOUBLE_EQ(dist(v), 0.1);
  }
}

TEST(ForwardTest, HandComputedSoftmax) {
  // Two-token model whose only signal is the output bias [2, 0]:
  // p0 = e^2 / (e^2 + 1).
  ModelParams p = ModelParams::Zeros({2, 1, 1});
  p.output_bias()(0) = 2.0;
  const auto dists = Forward(p, {1});
  EXPECT_NEAR(dists[0](0), 0.8807970779778823, 1e-15);
  EXPECT_NEAR(dists[0](1), 0.11920292202211755, 1e-15);
}

TEST(ForwardTest, DistributionsSumToOne) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const ModelShape shape{12, 5, 7};
    const ModelParams p = RandomModel(shape, seed, 2.0);
    Rng rng(seed + 100);
    TokenSequence prefix;
    for (int i = 0; i < 6; ++i) prefix.push_back(static_cast<TokenId>(rng.UniformIndex(12)));
    for (const auto& dist : Forward(p, prefix)) {
      EXPECT_NEAR(dist.sum(), 1.0, 1e-6);
      EXPECT_GE(dist.minCoeff(), 0.0);
    }
  }
}

TEST(ForwardTest, RejectsOutOfVocabularyToken) {
  const ModelParams p = ModelParams::Zeros({10, 4, 4});
  EXPECT_THROW(Forward(p, {3, 10}), Error);
  EXPECT_THROW(Forward(p, {-1}), Error);
  EXPECT_THROW(Forward(p, {}), Error);
}

TEST(LossTest, UniformModelSumAndMeanConventions) {
  const ModelParams p = ModelParams::Zeros({10, 4, 4});
  SequenceBatch batch{{{0, 4, 5}}, {{4, 5, 6}}};
  EXPECT_NEAR(ComputeLossAndGradient(p, batch, LossReduction::kSum).loss, 3 * std::log(10.0),
              1e-12);
  EXPECT_NEAR(ComputeLossAndGradient(p, batch, LossReduction::kMeanPerToken).loss,
              std::log(10.0), 1e-12);
}

TEST(LossTest, CertainModelHasZeroLossAndGradient) {
  const ModelParams p = DominantModel({6, 3, 3}, 4);
  SequenceBatch batch{{{0, 4, 4}, {0}}, {{4, 4, 4}, {4}}};
  const LossAndGradient lg = ComputeLossAndGradient(p, batch, LossReduction::kSum);
  EXPECT_EQ(lg.loss, 0.0);
  EXPECT_EQ(lg.gradient.Norm(), 0.0);
}

TEST(LossTest, EmptyBatchIsInputError) {
  const ModelParams p = ModelParams::Zeros({6, 3, 3});
  try {
    ComputeLossAndGradient(p, SequenceBatch{});
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInput);
  }
}

TEST(LossTest, PaddingDoesNotChangeLossOrGradient) {
  const ModelParams p = RandomModel({8, 4, 4}, 7);
  SequenceBatch a{{{0, 3, 4, 5}}, {{3, 4, 5, 1}}};
  SequenceBatch b{{{0, 3, 4, 5}, {0, 6}}, {{3, 4, 5, 1}, {6, 1}}};
  SequenceBatch c{{{0, 6}}, {{6, 1}}};
  const auto la = ComputeLossAndGradient(p, a, LossReduction::kSum);
  const auto lb = ComputeLossAndGradient(p, b, LossReduction::kSum);
  const auto lc = ComputeLossAndGradient(p, c, LossReduction::kSum);
  EXPECT_NEAR(lb.loss, la.loss + lc.loss, 1e-12);
  const ModelParams sum = la.gradient + lc.gradient;
  for (std::size_t i = 0; i < sum.size(); ++i)
    ASSERT_NEAR(lb.gradient.raw()[i], sum.raw()[i], 1e-12) << "coordinate " << i;
}

class GradientCheckTest : public ::testing::TestWithParam<ModelShape> {};

TEST_P(GradientCheckTest, MatchesCentralFiniteDifferences) {
  const ModelShape shape = GetParam();
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const ModelParams p = RandomModel(shape, seed);
    Rng rng(seed * 31);
    SequenceBatch batch;
    for (int b = 0; b < 3; ++b) {
      const int len = 2 + static_cast<int>(rng.UniformIndex(4));
      TokenSequence in, out;
      for (int t = 0; t < len; ++t) {
        in.push_back(static_cast<TokenId>(rng.UniformIndex(shape.vocab_size)));
        out.push_back(static_cast<TokenId>(rng.UniformIndex(shape.vocab_size)));
      }
      batch.inputs.push_back(in);
      batch.targets.push_back(out);
    }
    for (auto reduction : {LossReduction::kSum, LossReduction::kMeanPerToken}) {
      const auto analytic = ComputeLossAndGradient(p, batch, reduction).gradient.raw();
      const auto numeric = testing::NumericGradient(p, batch, reduction);
      EXPECT_GE(testing::GradientAgreement(analytic, numeric), 0.99) << "seed " << seed;
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Shapes, GradientCheckTest,
                         ::testing::Values(ModelShape{8, 4, 4}, ModelShape{16, 8, 8},
                                           ModelShape{10, 3, 5}, ModelShape{12, 6, 2}));

TEST(LogPerplexityTest, UniformModel) {
  const ModelParams p = ModelParams::Zeros({10, 4, 4});
  EXPECT_NEAR(LogPerplexity(p, {0, 3}, {4, 5, 6}), 3 * std::log(10.0), 1e-12);
}

TEST(LogPerplexityTest, CertainModelIsZero) {
  const ModelParams p = DominantModel({6, 3, 3}, 5);
  EXPECT_EQ(LogPerplexity(p, {0, 2}, {5, 5, 5}), 0.0);
}

TEST(LogPerplexityTest, MatchesBruteForceChainRule) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const ModelParams p = RandomModel({8, 4, 4}, seed, 1.0);
    for (const auto& s : AllSequences(8, 2)) {
      const TokenSequence suffix{s[0], s[1], 3};
      EXPECT_NEAR(LogPerplexity(p, {0, 6}, suffix), BruteForceLogPerplexity(p, {0, 6}, suffix),
                  1e-10);
    }
  }
}

TEST(LogPerplexityTest, ChainRuleAdditivity) {
  const ModelParams p = RandomModel({9, 4, 5}, 3, 1.0);
  const TokenSequence ctx{0, 4}, s1{5, 6}, s2{7, 8, 3};
  TokenSequence joined = s1;
  joined.insert(joined.end(), s2.begin(), s2.end());
  TokenSequence ctx2 = ctx;
  ctx2.insert(ctx2.end(), s1.begin(), s1.end());
  // Per-token terms are bit-identical; the sums differ only by association.
  const auto whole = TokenSurprisals(p, ctx, joined);
  const auto first = TokenSurprisals(p, ctx, s1);
  const auto second = TokenSurprisals(p, ctx2, s2);
  ASSERT_EQ(whole.size(), first.size() + second.size());
  for (std::size_t i = 0; i < first.size(); ++i) EXPECT_EQ(whole[i], first[i]);
  for (std::size_t i = 0; i < second.size(); ++i) EXPECT_EQ(whole[first.size() + i], second[i]);
  EXPECT_NEAR(LogPerplexity(p, ctx, joined), LogPerplexity(p, ctx, s1) + LogPerplexity(p, ctx2, s2),
              1e-12);
}

std::vector<Hypothesis> ExhaustiveRanking(const ModelParams& p, const TokenSequence& ctx,
                                          int length) {
  std::vector<Hypothesis> all;
  for (auto& s : AllSequences(p.shape().vocab_size, length))
    all.push_back({s, LogPerplexity(p, ctx, s)});
  std::sort(all.begin(), all.end(), [](const Hypothesis& a, const Hypothesis& b) {
    return a.log_perplexity != b.log_perplexity ? a.log_perplexity < b.log_perplexity
                                                : a.tokens < b.tokens;
  });
  return all;
}

TEST(BeamSearchTest, DominantChainFirst) {
  const ModelParams p = DominantModel({7, 3, 3}, 4);
  for (auto mode : {BeamMode::kGreedy, BeamMode::kExact}) {
    const auto beams = BeamSearch(p, {0, 1}, 3, 5, mode);
    ASSERT_EQ(beams.size(), 5u);
    EXPECT_EQ(beams[0].tokens, (TokenSequence{4, 4, 4}));
    EXPECT_EQ(beams[0].log_perplexity, 0.0);
  }
}

TEST(BeamSearchTest, ExactModeMatchesExhaustiveTopFive) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const ModelParams p = RandomModel({6, 4, 4}, seed, 1.5);
    const auto truth = ExhaustiveRanking(p, {0, 3}, 3);
    const auto beams = BeamSearch(p, {0, 3}, 3, 5, BeamMode::kExact);
    ASSERT_EQ(beams.size(), 5u);
    for (int i = 0; i < 5; ++i) {
      EXPECT_EQ(beams[i].tokens, truth[i].tokens) << "seed " << seed << " position " << i;
      EXPECT_NEAR(beams[i].log_perplexity, truth[i].log_perplexity, 1e-9);
    }
  }
}

TEST(BeamSearchTest, FullWidthIsExhaustiveRankingInBothModes) {
  const ModelParams p = RandomModel({6, 3, 4}, 11, 1.5);
  const auto truth = ExhaustiveRanking(p, {0}, 3);
  for (auto mode : {BeamMode::kGreedy, BeamMode::kExact}) {
    const auto beams = BeamSearch(p, {0}, 3, 216, mode);
    ASSERT_EQ(beams.size(), 216u);
    for (std::size_t i = 0; i < beams.size(); ++i) {
      EXPECT_EQ(beams[i].tokens, truth[i].tokens) << "position " << i;
      EXPECT_NEAR(beams[i].log_perplexity, truth[i].log_perplexity, 1e-9);
    }
  }
}

TEST(BeamSearchTest, UniformModelBreaksTiesByTokenIndex) {
  const ModelParams p = ModelParams::Zeros({5, 2, 2});
  for (auto mode : {BeamMode::kGreedy, BeamMode::kExact}) {
    const auto beams = BeamSearch(p, {0}, 2, 3, mode);
    ASSERT_EQ(beams.size(), 3u);
    EXPECT_EQ(beams[0].tokens, (TokenSequence{0, 0}));
    EXPECT_EQ(beams[1].tokens, (TokenSequence{0, 1}));
    EXPECT_EQ(beams[2].tokens, (TokenSequence{0, 2}));
  }
}

TEST(BeamSearchTest, GreedyScoresAgreeWithLogPerplexity) {
  const ModelParams p = RandomModel({20, 6, 6}, 5, 1.0);
  for (const auto& h : BeamSearch(p, {0, 7, 8}, 3, 5))
    EXPECT_NEAR(h.log_perplexity, LogPerplexity(p, {0, 7, 8}, h.tokens), 1e-9);
}

TEST(BeamSearchTest, RejectsBadArguments) {
  const ModelParams p = ModelParams::Zeros({5, 2, 2});
  EXPECT_THROW(BeamSearch(p, {0}, 3, 0), Error);
  EXPECT_THROW(BeamSearch(p, {0}, 0, 5), Error);
}

TEST(TopKRecallTest, FullVocabularyAlwaysHits) {
  const ModelParams p = RandomModel({9, 3, 3}, 2);
  EXPECT_EQ(TopKRecall(p, {{3, 4, 5}, {6, 7}}, 9), 1.0);
}

TEST(TopKRecallTest, UniformModelCountsTieWinners) {
  // With every probability tied, top-k is the k lowest token indices, so the
  // recall is the share of targets with index < k.
  const int vocab = 10;
  const ModelParams p = ModelParams::Zeros({vocab, 3, 3});
  Rng rng(9);
  std::vector<TokenSequence> corpus;
  for (int i = 0; i < 500; ++i) {
    TokenSequence s;
    for (int j = 0; j < 5; ++j)
      s.push_back(static_cast<TokenId>(Vocabulary::kNumSpecial + rng.UniformIndex(vocab - 3)));
    corpus.push_back(s);
  }
  for (int k : {1, 2, 4, 6}) {
    std::int64_t hits = 0, total = 0;
    for (const auto& s : corpus) {
      for (TokenId t : s) hits += t < k ? 1 : 0;
      hits += Vocabulary::kEos < k ? 1 : 0;
      total += static_cast<std::int64_t>(s.size()) + 1;
    }
    EXPECT_DOUBLE_EQ(TopKRecall(p, corpus, k), double(hits) / double(total)) << "k=" << k;
  }
}

TEST(TopKRecallTest, OverfitModelRecallsItsCorpus) {
  const std::vector<TokenSequence> corpus{{3, 4, 5}};
  ModelParams p = RandomModel({8, 6, 6}, 4, 0.3);
  const SequenceBatch batch = SequenceBatch::FromSentences(corpus);
  for (int step = 0; step < 300; ++step) {
    auto lg = ComputeLossAndGradient(p, batch);
    lg.gradient *= 0.5;
    p -= lg.gradient;
  }
  EXPECT_EQ(TopKRecall(p, corpus, 1), 1.0);
  EXPECT_EQ(TopKRecall(p, corpus, 3), 1.0);
}

TEST(TopKRecallTest, EmptyCorpusIsInputError) {
  const ModelParams p = ModelParams::Zeros({5, 2, 2});
  EXPECT_THROW(TopKRecall(p, {}, 1), Error);
  EXPECT_THROW(TopKRecall(p, {{3}}, 0), Error);
}

TEST(TyingTest, EmbeddingRowDrivesInputAndOutput) {
  const ModelShape shape{6, 3, 3};
  ModelParams p = RandomModel(shape, 8);
  const auto before_in = Forward(p, {4}).back();
  const auto before_out = Forward(p, {2}).back();
  p.embedding().row(4) *= 3.0;
  const auto after_in = Forward(p, {4}).back();
  const auto after_out = Forward(p, {2}).back();
  EXPECT_GT((after_in - before_in).norm(), 1e-6);     // used as an input
  EXPECT_GT(std::abs(after_out(4) - before_out(4)), 1e-6);  // used as an output
}

TEST(CheckpointTest, BitExactRoundTrip) {
  const ModelParams p = RandomModel({17, 5, 4}, 12);
  const auto path = (std::filesystem::temp_directory_path() / "fedmem_ckpt_test.bin").string();
  SaveCheckpoint(p, path);
  const ModelParams q = LoadCheckpoint(path);
  EXPECT_TRUE(p == q);
  std::filesystem::remove(path);
  EXPECT_THROW(LoadCheckpoint(path), Error);
}

}  // namespace
}  // namespace fedmem
