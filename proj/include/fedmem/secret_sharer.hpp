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

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fedmem/common.hpp"
#include "fedmem/lm.hpp"
#include "fedmem/model.hpp"
#include "fedmem/population.hpp"
#include "fedmem/rng.hpp"
#include "fedmem/vocabulary.hpp"

namespace fedmem {

// Reference sequences: `count` sequences of `length` tokens, each token
// i.i.d. uniform over the ordinary (non-special) vocabulary, the same
// distribution canary words are drawn from. No deduplication.
inline std::vector<TokenSequence> SampleReferenceSet(int vocab_size, int length,
                                                     std::int64_t count, Rng& rng) {
  if (count < 1) throw InputError("reference set must be non-empty");
  const auto ordinary = static_cast<std::uint64_t>(vocab_size - Vocabulary::kNumSpecial);
  if (ordinary < 1) throw InputError("vocabulary has no ordinary tokens");
  std::vector<TokenSequence> out(static_cast<std::size_t>(count), TokenSequence(length));
  for (auto& seq : out)
    for (auto& t : seq) t = static_cast<TokenId>(Vocabulary::kNumSpecial + rng.UniformIndex(ordinary));
  return out;
}

// Log-perplexities of many suffixes after one context. Suffixes that share a
// prefix share its recurrent state, and each depth is evaluated as one
// batched step.
inline std::vector<double> ScoreSuffixes(const ModelParams& params, const TokenSequence& context,
                                         const std::vector<TokenSequence>& suffixes) {
  if (context.empty()) throw InputError("scoring requires a non-empty context");
  internal::CheckTokens(context, params.shape().vocab_size);
  std::size_t length = 0;
  for (const auto& s : suffixes) {
    internal::CheckTokens(s, params.shape().vocab_size);
    length = std::max(length, s.size());
  }
  std::vector<double> scores(suffixes.size(), 0.0);
  if (suffixes.empty()) return scores;

  // Nodes of the prefix trie at the current depth; node_of[i] is suffix i's node.
  LmState level_state = RunContext(params, context);
  std::vector<int> node_of(suffixes.size(), 0);
  constexpr int kChunk = 1024;
  for (std::size_t depth = 0; depth < length; ++depth) {
    // Scores for this depth, computed in column chunks to bound memory.
    const int nodes = level_state.count();
    for (int c0 = 0; c0 < nodes; c0 += kChunk) {
      const int c1 = std::min(nodes, c0 + kChunk);
      std::vector<int> cols;
      for (int c = c0; c < c1; ++c) cols.push_back(c);
      const Eigen::MatrixXd logp = NextLogProbs(params, level_state.Select(cols));
      for (std::size_t i = 0; i < suffixes.size(); ++i) {
        if (depth >= suffixes[i].size()) continue;
        const int node = node_of[i];
        if (node >= c0 && node < c1) scores[i] -= logp(suffixes[i][depth], node - c0);
      }
    }
    if (depth + 1 == length) break;
    // Children for the next depth.
    std::map<std::pair<int, TokenId>, int> next_index;
    std::vector<int> parents;
    std::vector<TokenId> tokens;
    for (std::size_t i = 0; i < suffixes.size(); ++i) {
      if (depth + 1 >= suffixes[i].size()) continue;
      const std::pair<int, TokenId> key{node_of[i], suffixes[i][depth]};
      auto [it, inserted] = next_index.emplace(key, static_cast<int>(parents.size()));
      if (inserted) {
        parents.push_back(key.first);
        tokens.push_back(key.second);
      }
      node_of[i] = it->second;
    }
    LmState next = level_state.Select(parents);
    Advance(params, next, tokens);
    level_state = std::move(next);
  }
  return scores;
}

struct RankResult {
  int canary_id = 0;
  std::int64_t rank = 0;
  std::int64_t reference_size = 0;
  double canary_log_perplexity = 0.0;
  // 1%, 50% and 99% quantiles of reference log-perplexities.
  double reference_q01 = 0.0;
  double reference_q50 = 0.0;
  double reference_q99 = 0.0;
};

// rank = 1 + |{r in R : logppl(r|p) <= logppl(s|p)}|. References tying with the
// canary count as more likely, so 1 <= rank <= |R| + 1.
inline std::int64_t RankFromScores(double canary_score, const std::vector<double>& reference_scores) {
  std::int64_t rank = 1;
  for (double r : reference_scores)
    if (r <= canary_score) ++rank;
  return rank;
}

// The canary's context is <s> followed by its prefix, matching how canary
// sentences appear in training data.
inline TokenSequence CanaryContext(const Canary& canary) {
  TokenSequence ctx{Vocabulary::kBos};
  for (TokenId t : canary.prefix()) ctx.push_back(t);
  return ctx;
}

inline RankResult RankAgainstReferences(const ModelParams& params, const Canary& canary,
                                        const std::vector<TokenSequence>& references) {
  if (references.empty()) throw InputError("reference set must be non-empty");
  std::vector<TokenSequence> all = references;
  all.push_back(canary.suffix());
  std::vector<double> scores = ScoreSuffixes(params, CanaryContext(canary), all);
  const double canary_score = scores.back();
  scores.pop_back();
  RankResult out;
  out.canary_id = canary.id;
  out.reference_size = static_cast<std::int64_t>(references.size());
  out.canary_log_perplexity = canary_score;
  out.rank = RankFromScores(canary_score, scores);
  std::sort(scores.begin(), scores.end());
  auto q = [&](double p) {
    return scores[static_cast<std::size_t>(p * static_cast<double>(scores.size() - 1))];
  };
  out.reference_q01 = q(0.01);
  out.reference_q50 = q(0.50);
  out.reference_q99 = q(0.99);
  return out;
}

inline RankResult RandomSamplingRank(const ModelParams& params, const Canary& canary,
                                     std::int64_t reference_size, Rng& rng) {
  const auto refs = SampleReferenceSet(params.shape().vocab_size,
                                       static_cast<int>(canary.suffix().size()), reference_size, rng);
  return RankAgainstReferences(params, canary, refs);
}

// -log2(rank / (|R| + 1)).
inline double RankToExposure(std::int64_t rank, std::int64_t reference_size) {
  if (rank < 1 || rank > reference_size + 1) throw InputError("rank outside [1, |R| + 1]");
  return std::log2(static_cast<double>(reference_size) + 1.0) -
         std::log2(static_cast<double>(rank));
}

struct ExtractionResult {
  int canary_id = 0;
  bool found = false;
  int beam_position = 0;  // 1-based when found
  std::vector<Hypothesis> beams;
};

// Beam search from the canary's two-word prefix for three tokens.
inline ExtractionResult BeamExtraction(const ModelParams& params, const Canary& canary,
                                       int width = 5, BeamMode mode = BeamMode::kGreedy) {
  ExtractionResult out;
  out.canary_id = canary.id;
  const TokenSequence suffix = canary.suffix();
  out.beams = BeamSearch(params, CanaryContext(canary), static_cast<int>(suffix.size()), width, mode);
  for (std::size_t i = 0; i < out.beams.size(); ++i) {
    if (out.beams[i].tokens == suffix) {
      out.found = true;
      out.beam_position = static_cast<int>(i) + 1;
      break;
    }
  }
  return out;
}

struct AuditSettings {
  std::int64_t reference_size = 10000;
  int beam_width = 5;
  BeamMode beam_mode = BeamMode::kGreedy;
};

struct AuditRow {
  int canary_id = 0;
  int users = 0;
  int copies = 0;
  int replica = 0;
  RankResult rank;
  double exposure = 0.0;
  ExtractionResult extraction;
};

struct AuditCell {
  int users = 0;
  int copies = 0;
  std::vector<std::int64_t> ranks;
  int extracted = 0;
  int total = 0;

  std::int64_t min_rank() const { return *std::min_element(ranks.begin(), ranks.end()); }
};

struct AuditReport {
  std::int64_t reference_size = 0;
  int beam_width = 0;
  std::vector<AuditRow> rows;

  // One cell per (n_u, n_e), in first-appearance order.
  std::vector<AuditCell> Cells() const {
    std::vector<AuditCell> cells;
    for (const auto& r : rows) {
      auto it = std::find_if(cells.begin(), cells.end(), [&](const AuditCell& c) {
        return c.users == r.users && c.copies == r.copies;
      });
      if (it == cells.end()) {
        cells.push_back({r.users, r.copies, {}, 0, 0});
        it = cells.end() - 1;
      }
      it->ranks.push_back(r.rank.rank);
      it->extracted += r.extraction.found ? 1 : 0;
      ++it->total;
    }
    return cells;
  }
};

// Ranks every canary against one shared reference set and tries to extract
// it by beam search.
inline AuditReport AuditCanaries(const ModelParams& params, const std::vector<Canary>& canaries,
                                 const AuditSettings& settings, Rng& reference_rng) {
  AuditReport report;
  report.reference_size = settings.reference_size;
  report.beam_width = settings.beam_width;
  if (canaries.empty()) return report;
  for (const auto& c : canaries)
    internal::CheckTokens(c.phrase, params.shape().vocab_size);
  const auto refs = SampleReferenceSet(params.shape().vocab_size,
                                       kCanaryLength - kCanaryPrefixLength,
                                       settings.reference_size, reference_rng);
  for (const auto& c : canaries) {
    AuditRow row;
    row.canary_id = c.id;
    row.users = c.config.users;
    row.copies = c.config.copies;
    row.replica = c.replica;
    row.rank = RankAgainstReferences(params, c, refs);
    row.exposure = RankToExposure(row.rank.rank, row.rank.reference_size);
    row.extraction = BeamExtraction(params, c, settings.beam_width, settings.beam_mode);
    report.rows.push_back(std::move(row));
  }
  return report;
}

inline std::string AuditCsv(const AuditReport& report) {
  std::ostringstream out;
  out << "canary_id,n_u,n_e,rank,reference_size,exposure,found,beam_position\n";
  char buf[64];
  for (const auto& r : report.rows) {
    std::snprintf(buf, sizeof(buf), "%.6f", r.exposure);
    out << r.canary_id << ',' << r.users << ',' << r.copies << ',' << r.rank.rank << ','
        << r.rank.reference_size << ',' << buf << ',' << (r.extraction.found ? 1 : 0) << ','
        << r.extraction.beam_position << '\n';
  }
  return out.str();
}

// Rows parsed back from AuditCsv. The CSV does not carry the beam width.
inline AuditReport ParseAuditCsv(const std::string& text, int beam_width = 5) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("canary_id,", 0) != 0)
    throw InputError("not an audit csv");
  AuditReport report;
  report.beam_width = beam_width;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string f[8];
    for (auto& x : f)
      if (!std::getline(fields, x, ',')) throw InputError("short audit csv row");
    AuditRow r;
    r.canary_id = std::stoi(f[0]);
    r.users = std::stoi(f[1]);
    r.copies = std::stoi(f[2]);
    r.rank.canary_id = r.canary_id;
    r.rank.rank = std::stoll(f[3]);
    r.rank.reference_size = std::stoll(f[4]);
    r.exposure = std::stod(f[5]);
    r.extraction.canary_id = r.canary_id;
    r.extraction.found = f[6] == "1";
    r.extraction.beam_position = std::stoi(f[7]);
    report.reference_size = r.rank.reference_size;
    report.rows.push_back(std::move(r));
  }
  return report;
}

// Table layout: one line per (n_u, n_e) cell with the per-replica ranks and
// the number of canaries found by beam search.
inline std::string AuditTable(const AuditReport& report) {
  std::ostringstream out;
  out << "  n_u    n_e  | RS ranks (|R| = " << report.reference_size << ")"
      << "                 | BS top-" << report.beam_width << "\n";
  out << "  -----------+------------------------------------------+---------\n";
  char buf[160];
  for (const auto& cell : report.Cells()) {
    std::string ranks;
    for (std::size_t i = 0; i < cell.ranks.size(); ++i) {
      if (i) ranks += ", ";
      ranks += std::to_string(cell.ranks[i]);
    }
    std::snprintf(buf, sizeof(buf), "  %3d  %5d  | %-40s | %d/%d\n", cell.users, cell.copies,
                  ranks.c_str(), cell.extracted, cell.total);
    out << buf;
  }
  return out.str();
}

}  // namespace fedmem
