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
#include <queue>
#include <span>
#include <vector>

#include "fedmem/common.hpp"
#include "fedmem/model.hpp"
#include "fedmem/vocabulary.hpp"

namespace fedmem {

// Input/target pairs for next-word prediction. Sequences may have different
// lengths; shorter ones are padded internally and padding never reaches the
// loss.
struct SequenceBatch {
  std::vector<TokenSequence> inputs;
  std::vector<TokenSequence> targets;

  int batch_size() const { return static_cast<int>(inputs.size()); }
  int max_length() const {
    std::size_t n = 0;
    for (const auto& s : inputs) n = std::max(n, s.size());
    return static_cast<int>(n);
  }
  std::int64_t num_targets() const {
    std::int64_t n = 0;
    for (const auto& s : targets) n += static_cast<std::int64_t>(s.size());
    return n;
  }

  // Each sentence becomes inputs <s> w1..wn and targets w1..wn </s>.
  static SequenceBatch FromSentences(std::span<const TokenSequence* const> sentences) {
    SequenceBatch batch;
    for (const TokenSequence* s : sentences) {
      TokenSequence in{Vocabulary::kBos};
      in.insert(in.end(), s->begin(), s->end());
      TokenSequence out(s->begin(), s->end());
      out.push_back(Vocabulary::kEos);
      batch.inputs.push_back(std::move(in));
      batch.targets.push_back(std::move(out));
    }
    return batch;
  }

  static SequenceBatch FromSentences(const std::vector<TokenSequence>& sentences) {
    std::vector<const TokenSequence*> ptrs;
    for (const auto& s : sentences) ptrs.push_back(&s);
    return FromSentences(std::span<const TokenSequence* const>(ptrs));
  }
};

enum class LossReduction { kMeanPerToken, kSum };

namespace internal {

inline double Sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline void CheckTokens(const TokenSequence& seq, int vocab_size) {
  for (TokenId t : seq)
    if (t < 0 || t >= vocab_size)
      throw InputError("token index " + std::to_string(t) + " outside vocabulary of size " +
                       std::to_string(vocab_size));
}

// Log-softmax of each column, in place.
inline void LogSoftmaxColumns(Eigen::MatrixXd& logits) {
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    auto col = logits.col(j);
    const double mx = col.maxCoeff();
    const double lse = mx + std::log((col.array() - mx).exp().sum());
    col.array() -= lse;
  }
}

}  // namespace internal

// Recurrent state for a set of hypotheses, one column each.
struct LmState {
  Eigen::MatrixXd hidden;
  Eigen::MatrixXd cell;

  int count() const { return static_cast<int>(hidden.cols()); }

  LmState Select(std::span<const int> columns) const {
    LmState out{Eigen::MatrixXd(hidden.rows(), Eigen::Index(columns.size())),
                Eigen::MatrixXd(cell.rows(), Eigen::Index(columns.size()))};
    for (std::size_t i = 0; i < columns.size(); ++i) {
      out.hidden.col(Eigen::Index(i)) = hidden.col(columns[i]);
      out.cell.col(Eigen::Index(i)) = cell.col(columns[i]);
    }
    return out;
  }
};

inline LmState InitialState(const ModelParams& params, int count = 1) {
  const int h = params.shape().hidden_dim;
  return {Eigen::MatrixXd::Zero(h, count), Eigen::MatrixXd::Zero(h, count)};
}

// One CIFG step for every column: f = sig(.), i = 1 - f, g = tanh(.),
// o = sig(.), c' = f*c + i*g, h' = o*tanh(c').
inline void Advance(const ModelParams& params, LmState& state, std::span<const TokenId> tokens) {
  const int h = params.shape().hidden_dim;
  const int n = state.count();
  if (static_cast<int>(tokens.size()) != n) throw InvariantError("token/state count mismatch");
  const auto emb = params.embedding();
  Eigen::MatrixXd x(params.shape().embed_dim, n);
  for (int j = 0; j < n; ++j) {
    if (tokens[j] < 0 || tokens[j] >= params.shape().vocab_size)
      throw InputError("token index outside vocabulary");
    x.col(j) = emb.row(tokens[j]).transpose();
  }
  Eigen::MatrixXd z = params.input_weights() * x + params.recurrent_weights() * state.hidden;
  z.colwise() += params.gate_bias();
  for (int j = 0; j < n; ++j) {
    for (int k = 0; k < h; ++k) {
      const double f = internal::Sigmoid(z(k, j));
      const double g = std::tanh(z(h + k, j));
      const double o = internal::Sigmoid(z(2 * h + k, j));
      const double c = f * state.cell(k, j) + (1.0 - f) * g;
      state.cell(k, j) = c;
      state.hidden(k, j) = o * std::tanh(c);
    }
  }
}

inline void Advance(const ModelParams& params, LmState& state, TokenId token) {
  Advance(params, state, std::span<const TokenId>(&token, 1));
}

// Log-probabilities of the next token, V x count.
inline Eigen::MatrixXd NextLogProbs(const ModelParams& params, const LmState& state) {
  Eigen::MatrixXd logits;
  if (params.shape().has_projection()) {
    logits = params.embedding() * (params.projection() * state.hidden);
  } else {
    logits = params.embedding() * state.hidden;
  }
  logits.colwise() += params.output_bias();
  internal::LogSoftmaxColumns(logits);
  return logits;
}

inline LmState RunContext(const ModelParams& params, const TokenSequence& context) {
  LmState state = InitialState(params);
  for (TokenId t : context) Advance(params, state, t);
  return state;
}

// Next-token distributions after each position of `prefix`: element i is
// Pr(. | prefix[0..i]).
inline std::vector<Eigen::VectorXd> Forward(const ModelParams& params,
                                            const TokenSequence& prefix) {
  if (prefix.empty()) throw InputError("forward requires a non-empty prefix");
  internal::CheckTokens(prefix, params.shape().vocab_size);
  std::vector<Eigen::VectorXd> out;
  LmState state = InitialState(params);
  for (TokenId t : prefix) {
    Advance(params, state, t);
    out.push_back(NextLogProbs(params, state).col(0).array().exp().matrix());
  }
  return out;
}

// Per-token negative log probabilities of `suffix` given `context`.
inline std::vector<double> TokenSurprisals(const ModelParams& params,
                                           const TokenSequence& context,
                                           const TokenSequence& suffix) {
  internal::CheckTokens(context, params.shape().vocab_size);
  internal::CheckTokens(suffix, params.shape().vocab_size);
  if (context.empty()) throw InputError("log-perplexity requires a non-empty context");
  LmState state = RunContext(params, context);
  std::vector<double> out;
  out.reserve(suffix.size());
  for (TokenId t : suffix) {
    out.push_back(-NextLogProbs(params, state)(t, 0));
    Advance(params, state, t);
  }
  return out;
}

// Sum over i of -log Pr(s_i | context, s_1..s_{i-1}).
inline double LogPerplexity(const ModelParams& params, const TokenSequence& context,
                            const TokenSequence& suffix) {
  if (suffix.empty()) throw InputError("log-perplexity requires a non-empty suffix");
  double total = 0.0;
  for (double s : TokenSurprisals(params, context, suffix)) total += s;
  return total;
}

struct LossAndGradient {
  double loss = 0.0;
  ModelParams gradient;
  std::int64_t num_targets = 0;
};

// Cross-entropy next-token loss and its exact gradient (backpropagation
// through time over the whole batch).
inline LossAndGradient ComputeLossAndGradient(const ModelParams& params,
                                              const SequenceBatch& batch,
                                              LossReduction reduction = LossReduction::kMeanPerToken) {
  using Eigen::MatrixXd;
  const ModelShape& shape = params.shape();
  const int vocab = shape.vocab_size, d = shape.embed_dim, h = shape.hidden_dim;
  const int batch_size = batch.batch_size();
  if (batch_size == 0) throw InputError("empty batch");
  if (batch.targets.size() != batch.inputs.size())
    throw InputError("batch inputs and targets differ in count");
  for (int b = 0; b < batch_size; ++b) {
    if (batch.inputs[b].size() != batch.targets[b].size())
      throw InputError("input and target sequence lengths differ");
    internal::CheckTokens(batch.inputs[b], vocab);
    internal::CheckTokens(batch.targets[b], vocab);
  }
  const int steps = batch.max_length();
  const std::int64_t num_targets = batch.num_targets();
  if (num_targets == 0) throw InputError("batch has no targets");
  const Eigen::Index cols = Eigen::Index(steps) * batch_size;
  auto col_of = [&](int t, int b) { return Eigen::Index(t) * batch_size + b; };
  auto valid = [&](int t, int b) { return t < static_cast<int>(batch.inputs[b].size()); };

  const auto emb = params.embedding();
  const auto wx = params.input_weights();
  const auto wh = params.recurrent_weights();

  // Forward.
  MatrixXd x(d, cols);
  for (int t = 0; t < steps; ++t)
    for (int b = 0; b < batch_size; ++b)
      x.col(col_of(t, b)) =
          emb.row(valid(t, b) ? batch.inputs[b][t] : Vocabulary::kBos).transpose();
  MatrixXd zx = wx * x;
  zx.colwise() += params.gate_bias();

  MatrixXd fg(h, cols), gg(h, cols), og(h, cols), cell(h, cols), tc(h, cols), hid(h, cols);
  MatrixXd h_prev = MatrixXd::Zero(h, batch_size), c_prev = MatrixXd::Zero(h, batch_size);
  for (int t = 0; t < steps; ++t) {
    const Eigen::Index c0 = col_of(t, 0);
    MatrixXd z = zx.middleCols(c0, batch_size) + wh * h_prev;
    for (int b = 0; b < batch_size; ++b) {
      for (int k = 0; k < h; ++k) {
        const double f = internal::Sigmoid(z(k, b));
        const double g = std::tanh(z(h + k, b));
        const double o = internal::Sigmoid(z(2 * h + k, b));
        const double c = f * c_prev(k, b) + (1.0 - f) * g;
        const double tch = std::tanh(c);
        fg(k, c0 + b) = f;
        gg(k, c0 + b) = g;
        og(k, c0 + b) = o;
        cell(k, c0 + b) = c;
        tc(k, c0 + b) = tch;
        hid(k, c0 + b) = o * tch;
      }
    }
    h_prev = hid.middleCols(c0, batch_size);
    c_prev = cell.middleCols(c0, batch_size);
  }
  MatrixXd y = shape.has_projection() ? MatrixXd(params.projection() * hid) : hid;
  MatrixXd logits = emb * y;
  logits.colwise() += params.output_bias();

  const double scale =
      reduction == LossReduction::kMeanPerToken ? 1.0 / static_cast<double>(num_targets) : 1.0;
  double loss = 0.0;
  MatrixXd dlogits = MatrixXd::Zero(vocab, cols);
  for (int t = 0; t < steps; ++t) {
    for (int b = 0; b < batch_size; ++b) {
      if (!valid(t, b)) continue;
      const Eigen::Index j = col_of(t, b);
      auto col = logits.col(j);
      const double mx = col.maxCoeff();
      const double lse = mx + std::log((col.array() - mx).exp().sum());
      const TokenId target = batch.targets[b][t];
      loss += lse - col(target);
      dlogits.col(j) = ((col.array() - lse).exp() * scale).matrix();
      dlogits(target, j) -= scale;
    }
  }
  loss *= scale;

  // Backward.
  LossAndGradient out{loss, ModelParams::Zeros(shape), num_targets};
  ModelParams& grad = out.gradient;
  grad.output_bias() = dlogits.rowwise().sum();
  grad.embedding().noalias() = dlogits * y.transpose();
  MatrixXd dy = emb.transpose() * dlogits;
  MatrixXd dh_out;
  if (shape.has_projection()) {
    grad.projection().noalias() = dy * hid.transpose();
    dh_out = params.projection().transpose() * dy;
  } else {
    dh_out = std::move(dy);
  }

  MatrixXd dz(3 * h, cols);
  MatrixXd dh_next = MatrixXd::Zero(h, batch_size), dc_next = MatrixXd::Zero(h, batch_size);
  for (int t = steps - 1; t >= 0; --t) {
    const Eigen::Index c0 = col_of(t, 0);
    MatrixXd dh = dh_out.middleCols(c0, batch_size) + dh_next;
    for (int b = 0; b < batch_size; ++b) {
      const Eigen::Index j = c0 + b;
      for (int k = 0; k < h; ++k) {
        const double f = fg(k, j), g = gg(k, j), o = og(k, j), tch = tc(k, j);
        const double cp = t > 0 ? cell(k, j - batch_size) : 0.0;
        const double dhk = dh(k, b);
        const double dc = dhk * o * (1.0 - tch * tch) + dc_next(k, b);
        const double df = dc * (cp - g);
        const double dg = dc * (1.0 - f);
        const double d_o = dhk * tch;
        dc_next(k, b) = dc * f;
        dz(k, j) = df * f * (1.0 - f);
        dz(h + k, j) = dg * (1.0 - g * g);
        dz(2 * h + k, j) = d_o * o * (1.0 - o);
      }
    }
    dh_next = wh.transpose() * dz.middleCols(c0, batch_size);
  }

  MatrixXd hid_prev = MatrixXd::Zero(h, cols);
  if (steps > 1)
    hid_prev.rightCols(cols - batch_size) = hid.leftCols(cols - batch_size);
  grad.recurrent_weights().noalias() = dz * hid_prev.transpose();
  grad.input_weights().noalias() = dz * x.transpose();
  grad.gate_bias() = dz.rowwise().sum();
  MatrixXd dx = wx.transpose() * dz;
  auto gemb = grad.embedding();
  for (int t = 0; t < steps; ++t)
    for (int b = 0; b < batch_size; ++b)
      if (valid(t, b)) gemb.row(batch.inputs[b][t]) += dx.col(col_of(t, b)).transpose();
  return out;
}

struct Hypothesis {
  TokenSequence tokens;
  double log_perplexity = 0.0;
};

enum class BeamMode {
  kGreedy,  // classic width-w beam: keep the w best partial sequences per step
  kExact,   // best-first search: the true w most likely continuations
};

namespace internal {

inline bool HypothesisLess(double sa, const TokenSequence& a, double sb, const TokenSequence& b) {
  if (sa != sb) return sa < sb;
  return a < b;
}

inline std::vector<Hypothesis> GreedyBeam(const ModelParams& params, const LmState& start,
                                          int length, int width) {
  const int vocab = params.shape().vocab_size;
  std::vector<Hypothesis> beams{Hypothesis{}};
  LmState state = start;
  for (int step = 0; step < length; ++step) {
    const Eigen::MatrixXd logp = NextLogProbs(params, state);
    struct Candidate {
      int beam;
      TokenId token;
      double score;
    };
    std::vector<Candidate> cands;
    cands.reserve(beams.size() * vocab);
    for (int b = 0; b < static_cast<int>(beams.size()); ++b)
      for (TokenId v = 0; v < vocab; ++v)
        cands.push_back({b, v, beams[b].log_perplexity - logp(v, b)});
    auto less = [&](const Candidate& a, const Candidate& b) {
      if (a.score != b.score) return a.score < b.score;
      if (a.beam != b.beam) {
        const auto& ta = beams[a.beam].tokens;
        const auto& tb = beams[b.beam].tokens;
        if (ta != tb) return ta < tb;
      }
      return a.token < b.token;
    };
    const std::size_t keep = std::min<std::size_t>(cands.size(), std::size_t(width));
    std::partial_sort(cands.begin(), cands.begin() + keep, cands.end(), less);
    std::vector<Hypothesis> sorted;
    std::vector<int> sorted_parents;
    std::vector<TokenId> sorted_tokens;
    for (std::size_t i = 0; i < keep; ++i) {
      Hypothesis hyp = beams[cands[i].beam];
      hyp.tokens.push_back(cands[i].token);
      hyp.log_perplexity = cands[i].score;
      sorted.push_back(std::move(hyp));
      sorted_parents.push_back(cands[i].beam);
      sorted_tokens.push_back(cands[i].token);
    }
    beams = std::move(sorted);
    if (step + 1 < length) {
      state = state.Select(sorted_parents);
      Advance(params, state, sorted_tokens);
    }
  }
  return beams;
}

inline std::vector<Hypothesis> ExactBestFirst(const ModelParams& params, const LmState& start,
                                              int length, int width) {
  const int vocab = params.shape().vocab_size;
  // An expanded node owns its recurrent state and its children sorted by
  // (surprisal, token). Siblings enter the frontier lazily, one at a time.
  struct Expansion {
    TokenSequence tokens;
    double score;
    LmState state;
    std::vector<std::pair<double, TokenId>> children;
  };
  struct Entry {
    double score;
    TokenSequence tokens;
    int parent;
    int rank;
  };
  auto greater = [](const Entry& a, const Entry& b) {
    return HypothesisLess(b.score, b.tokens, a.score, a.tokens);
  };
  std::priority_queue<Entry, std::vector<Entry>, decltype(greater)> frontier(greater);
  std::vector<Expansion> expansions;

  auto expand = [&](TokenSequence tokens, double score, LmState state) {
    Expansion e{std::move(tokens), score, std::move(state), {}};
    const Eigen::MatrixXd logp = NextLogProbs(params, e.state);
    e.children.reserve(vocab);
    for (TokenId v = 0; v < vocab; ++v) e.children.emplace_back(-logp(v, 0), v);
    std::sort(e.children.begin(), e.children.end());
    expansions.push_back(std::move(e));
    const int id = static_cast<int>(expansions.size()) - 1;
    const auto& first = expansions[id].children[0];
    TokenSequence child = expansions[id].tokens;
    child.push_back(first.second);
    frontier.push({score + first.first, std::move(child), id, 0});
  };

  expand({}, 0.0, start);
  std::vector<Hypothesis> out;
  while (!frontier.empty() && static_cast<int>(out.size()) < width) {
    Entry top = frontier.top();
    frontier.pop();
    const Expansion& parent = expansions[top.parent];
    if (top.rank + 1 < vocab) {
      const auto& sib = parent.children[top.rank + 1];
      TokenSequence seq = parent.tokens;
      seq.push_back(sib.second);
      frontier.push({parent.score + sib.first, std::move(seq), top.parent, top.rank + 1});
    }
    if (static_cast<int>(top.tokens.size()) == length) {
      out.push_back({top.tokens, top.score});
    } else {
      LmState state = expansions[top.parent].state;
      Advance(params, state, top.tokens.back());
      expand(top.tokens, top.score, std::move(state));
    }
  }
  return out;
}

}  // namespace internal

// Up to `width` continuations of exactly `length` tokens after `context`,
// best-first by log-perplexity; equal scores are ordered lexicographically
// by token index.
inline std::vector<Hypothesis> BeamSearch(const ModelParams& params, const TokenSequence& context,
                                          int length, int width,
                                          BeamMode mode = BeamMode::kGreedy) {
  if (width < 1) throw InputError("beam width must be at least 1");
  if (length < 1) throw InputError("continuation length must be at least 1");
  if (context.empty()) throw InputError("beam search requires a non-empty context");
  internal::CheckTokens(context, params.shape().vocab_size);
  const LmState start = RunContext(params, context);
  return mode == BeamMode::kGreedy ? internal::GreedyBeam(params, start, length, width)
                                   : internal::ExactBestFirst(params, start, length, width);
}

// Fraction of next-word targets ranked within the top k. A target's rank
// counts tokens with strictly higher probability plus lower-indexed tokens
// with equal probability.
inline double TopKRecall(const ModelParams& params, const std::vector<TokenSequence>& sentences,
                         int k) {
  if (k < 1) throw InputError("k must be at least 1");
  std::int64_t hits = 0, total = 0;
  for (const auto& sentence : sentences) {
    internal::CheckTokens(sentence, params.shape().vocab_size);
    LmState state = InitialState(params);
    TokenId input = Vocabulary::kBos;
    for (std::size_t i = 0; i <= sentence.size(); ++i) {
      Advance(params, state, input);
      const TokenId target = i < sentence.size() ? sentence[i] : Vocabulary::kEos;
      const Eigen::MatrixXd logp = NextLogProbs(params, state);
      const double pt = logp(target, 0);
      int rank = 0;
      for (Eigen::Index v = 0; v < logp.rows() && rank < k; ++v)
        if (logp(v, 0) > pt || (logp(v, 0) == pt && v < target)) ++rank;
      if (rank < k) ++hits;
      ++total;
      input = target;
    }
  }
  if (total == 0) throw InputError("empty evaluation corpus");
  return static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace fedmem
