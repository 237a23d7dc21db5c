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

#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "fedmem/common.hpp"
#include "fedmem/rng.hpp"
#include "fedmem/vocabulary.hpp"

namespace fedmem {

using Corpus = std::vector<TokenSequence>;

// Synthetic corpus: unigrams follow a Zipf law over the ordinary tokens and
// each (w_{i-2}, w_{i-1}) context has a small fixed successor set, which gives
// the text order-2 Markov structure a language model can learn.
struct CorpusGeneratorConfig {
  int vocab_size = 1000;
  std::int64_t num_sentences = 20000;
  double zipf_exponent = 1.1;
  int min_length = 4;
  int max_length = 10;
  // Probability that the next word comes from the context's successor set.
  double markov_weight = 0.7;
  int successors_per_context = 4;

  void Validate() const {
    if (vocab_size <= Vocabulary::kNumSpecial) throw ConfigError("corpus vocabulary too small");
    if (num_sentences < 1) throw ConfigError("corpus must have at least one sentence");
    if (zipf_exponent <= 0) throw ConfigError("zipf exponent must be positive");
    if (min_length < 1 || max_length < min_length) throw ConfigError("bad sentence length range");
    if (markov_weight < 0 || markov_weight > 1) throw ConfigError("markov weight outside [0,1]");
    if (successors_per_context < 1) throw ConfigError("successor set must be non-empty");
  }
};

// Inverse-CDF sampler over ranks 1..n with Pr(r) proportional to r^-s.
class ZipfTable {
 public:
  ZipfTable(int n, double exponent) : cdf_(static_cast<std::size_t>(n)) {
    double total = 0.0;
    for (int r = 1; r <= n; ++r) {
      total += std::pow(static_cast<double>(r), -exponent);
      cdf_[r - 1] = total;
    }
    for (double& c : cdf_) c /= total;
    cdf_.back() = 1.0;
  }

  // 0-based rank for a uniform draw in [0, 1).
  int Rank(double u) const {
    auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
    if (it == cdf_.end()) --it;
    return static_cast<int>(it - cdf_.begin());
  }

  double Probability(int rank) const {
    return rank == 0 ? cdf_[0] : cdf_[rank] - cdf_[rank - 1];
  }

 private:
  std::vector<double> cdf_;
};

inline Corpus GenerateCorpus(const CorpusGeneratorConfig& config, Rng& rng) {
  config.Validate();
  const int ordinary = config.vocab_size - Vocabulary::kNumSpecial;
  const ZipfTable zipf(ordinary, config.zipf_exponent);
  const std::uint64_t table_seed = rng.engine()();
  auto successor = [&](TokenId prev2, TokenId prev1, std::uint64_t slot) {
    std::uint64_t key = SplitMix64(table_seed ^ (std::uint64_t(prev2) << 40) ^
                                   (std::uint64_t(prev1) << 16) ^ slot);
    const double u = static_cast<double>(key >> 11) * 0x1.0p-53;
    return static_cast<TokenId>(Vocabulary::kNumSpecial + zipf.Rank(u));
  };
  Corpus corpus;
  corpus.reserve(static_cast<std::size_t>(config.num_sentences));
  for (std::int64_t i = 0; i < config.num_sentences; ++i) {
    const int span = config.max_length - config.min_length + 1;
    const int length = config.min_length + static_cast<int>(rng.UniformIndex(span));
    TokenSequence sentence;
    TokenId prev2 = Vocabulary::kBos, prev1 = Vocabulary::kBos;
    for (int j = 0; j < length; ++j) {
      TokenId next;
      if (rng.Bernoulli(config.markov_weight)) {
        next = successor(prev2, prev1, rng.UniformIndex(config.successors_per_context));
      } else {
        next = static_cast<TokenId>(Vocabulary::kNumSpecial + zipf.Rank(rng.Uniform01()));
      }
      sentence.push_back(next);
      prev2 = prev1;
      prev1 = next;
    }
    corpus.push_back(std::move(sentence));
  }
  return corpus;
}

// Reads one sentence per line; words outside `vocab` map to the OOV token.
// Blank lines are skipped.
inline Corpus IngestCorpus(const std::string& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read corpus " + path);
  Corpus corpus;
  std::string line;
  while (std::getline(in, line)) {
    TokenSequence s = vocab.Encode(line);
    if (!s.empty()) corpus.push_back(std::move(s));
  }
  if (corpus.empty()) throw InputError("corpus " + path + " is empty");
  return corpus;
}

// Most frequent words first; equal counts in lexicographic order.
inline Vocabulary BuildVocabulary(const std::string& corpus_path, int vocab_size) {
  std::ifstream in(corpus_path);
  if (!in) throw IoError("cannot read corpus " + corpus_path);
  std::unordered_map<std::string, std::int64_t> counts;
  std::string word;
  while (in >> word) ++counts[word];
  std::vector<std::pair<std::string, std::int64_t>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  std::vector<std::string> words;
  for (const auto& [w, c] : ranked) {
    if (static_cast<int>(words.size()) + Vocabulary::kNumSpecial >= vocab_size) break;
    if (w == Vocabulary::kBosText || w == Vocabulary::kEosText || w == Vocabulary::kOovText)
      continue;
    words.push_back(w);
  }
  return Vocabulary(words);
}

inline void WriteCorpus(const Corpus& corpus, const Vocabulary& vocab, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write corpus " + path);
  for (const auto& s : corpus) out << vocab.Decode(s) << '\n';
}

}  // namespace fedmem
