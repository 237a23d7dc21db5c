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
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "fedmem/common.hpp"
#include "fedmem/lm.hpp"
#include "fedmem/model.hpp"
#include "fedmem/population.hpp"
#include "fedmem/rng.hpp"

namespace fedmem {

// Privacy-relevant knobs of a DP-FedAvg run. The noise standard deviation is
// always derived, never stored.
struct DpConfig {
  std::int64_t population_size = 1;  // N
  std::int64_t round_size = 1;       // m = qN
  double noise_multiplier = 0.0;     // z
  double clip_norm = std::numeric_limits<double>::infinity();  // S; +inf disables clipping
  std::int64_t rounds = 1;           // T

  double participation_fraction() const {
    return static_cast<double>(round_size) / static_cast<double>(population_size);
  }

  // sigma = z S / (qN). Zero when z = 0, even with clipping disabled.
  double sigma() const {
    if (noise_multiplier == 0.0) return 0.0;
    return noise_multiplier * clip_norm / static_cast<double>(round_size);
  }

  void Validate() const {
    if (population_size < 1) throw ConfigError("population size N must be at least 1");
    if (round_size < 1 || round_size > population_size)
      throw ConfigError("round size m must satisfy 1 <= m <= N");
    if (rounds < 0) throw ConfigError("total rounds T must be non-negative");
    if (!(clip_norm > 0.0)) throw ConfigError("clip norm S must be positive");
    if (!(noise_multiplier >= 0.0)) throw ConfigError("noise multiplier z must be non-negative");
    if (noise_multiplier > 0.0 && std::isinf(clip_norm))
      throw ConfigError("noise needs a finite clip norm");
  }
};

struct ClientConfig {
  int local_epochs = 1;         // E
  int batch_size = 10;          // B
  double learning_rate = 0.5;   // client step size
  bool shuffle = true;          // reshuffle local data before each epoch
  LossReduction reduction = LossReduction::kMeanPerToken;

  void Validate() const {
    if (local_epochs < 1) throw ConfigError("local epochs E must be at least 1");
    if (batch_size < 1) throw ConfigError("batch size B must be at least 1");
    if (!(learning_rate >= 0.0)) throw ConfigError("client learning rate must be non-negative");
  }
};

namespace internal {

// (a + b) - s exactly, for s = fl(a + b).
inline double TwoSumError(double a, double b, double s) {
  const double a1 = s - b;
  const double b1 = s - a1;
  return (a - a1) + (b - b1);
}

}  // namespace internal

enum class ServerOptimizerKind { kPlain, kSgd, kMomentum, kNesterov, kAdam };

inline const char* ServerOptimizerName(ServerOptimizerKind kind) {
  switch (kind) {
    case ServerOptimizerKind::kPlain:
      return "plain";
    case ServerOptimizerKind::kSgd:
      return "sgd";
    case ServerOptimizerKind::kMomentum:
      return "momentum";
    case ServerOptimizerKind::kNesterov:
      return "nesterov";
    case ServerOptimizerKind::kAdam:
      return "adam";
  }
  return "?";
}

inline ServerOptimizerKind ParseServerOptimizer(const std::string& name) {
  for (auto k : {ServerOptimizerKind::kPlain, ServerOptimizerKind::kSgd,
                 ServerOptimizerKind::kMomentum, ServerOptimizerKind::kNesterov,
                 ServerOptimizerKind::kAdam})
    if (name == ServerOptimizerName(k)) return k;
  throw ConfigError("unknown server optimizer '" + name + "'");
}

// The server treats the noisy average update u as an ascent direction
// (u = -pseudo-gradient):
//   plain     theta += u
//   sgd       theta += lr * u
//   momentum  v = mu * v + u;  theta += lr * v
//   nesterov  v = mu * v + u;  theta += lr * (mu * v + u)
//   adam      m = b1 m + (1-b1) u;  s = b2 s + (1-b2) u^2;
//             theta += lr * mhat / (sqrt(shat) + eps)
struct ServerOptConfig {
  ServerOptimizerKind kind = ServerOptimizerKind::kNesterov;
  double learning_rate = 1.0;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void Validate() const {
    if (!(learning_rate >= 0.0)) throw ConfigError("server learning rate must be non-negative");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("server momentum must be in [0, 1)");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
      throw ConfigError("adam betas must be in [0, 1)");
    if (!(epsilon > 0.0)) throw ConfigError("adam epsilon must be positive");
  }
};

class ServerOptimizer {
 public:
  explicit ServerOptimizer(ServerOptConfig config) : config_(config) { config_.Validate(); }

  const ServerOptConfig& config() const { return config_; }
  std::int64_t steps() const { return steps_; }
  const std::vector<double>& velocity() const { return first_; }

  // `residual`, when given, is the low-order part of the update: the applied
  // update is update + residual. The plain step adds both with a compensated
  // sum, so theta + (l - theta) recovers l exactly; other kinds fold it in.
  void Step(ModelParams& params, const ModelParams& update,
            const ModelParams* residual = nullptr) {
    params.CheckSameShape(update);
    if (residual) params.CheckSameShape(*residual);
    const std::size_t n = params.size();
    ParamVector& theta = params.raw();
    ParamVector folded;
    if (residual && config_.kind != ServerOptimizerKind::kPlain) {
      folded = update.raw();
      const ParamVector& r = residual->raw();
      for (std::size_t i = 0; i < n; ++i) folded[i] += r[i];
    }
    const ParamVector& u = folded.empty() ? update.raw() : folded;
    const double lr = config_.learning_rate;
    ++steps_;
    switch (config_.kind) {
      case ServerOptimizerKind::kPlain:
        if (residual) {
          const ParamVector& r = residual->raw();
          for (std::size_t i = 0; i < n; ++i) {
            const double s = theta[i] + u[i];
            theta[i] = s + (internal::TwoSumError(theta[i], u[i], s) + r[i]);
          }
        } else {
          for (std::size_t i = 0; i < n; ++i) theta[i] += u[i];
        }
        break;
      case ServerOptimizerKind::kSgd:
        for (std::size_t i = 0; i < n; ++i) theta[i] += lr * u[i];
        break;
      case ServerOptimizerKind::kMomentum:
        Reserve(first_, n);
        for (std::size_t i = 0; i < n; ++i) {
          first_[i] = config_.momentum * first_[i] + u[i];
          theta[i] += lr * first_[i];
        }
        break;
      case ServerOptimizerKind::kNesterov:
        Reserve(first_, n);
        for (std::size_t i = 0; i < n; ++i) {
          first_[i] = config_.momentum * first_[i] + u[i];
          theta[i] += lr * (config_.momentum * first_[i] + u[i]);
        }
        break;
      case ServerOptimizerKind::kAdam: {
        Reserve(first_, n);
        Reserve(second_, n);
        const double b1 = config_.beta1, b2 = config_.beta2;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
        for (std::size_t i = 0; i < n; ++i) {
          first_[i] = b1 * first_[i] + (1.0 - b1) * u[i];
          second_[i] = b2 * second_[i] + (1.0 - b2) * u[i] * u[i];
          theta[i] += lr * (first_[i] / c1) / (std::sqrt(second_[i] / c2) + config_.epsilon);
        }
        break;
      }
    }
  }

 private:
  static void Reserve(std::vector<double>& v, std::size_t n) {
    if (v.size() != n) v.assign(n, 0.0);
  }

  ServerOptConfig config_;
  std::vector<double> first_;
  std::vector<double> second_;
  std::int64_t steps_ = 0;
};

// v * min(1, S / ||v||). The zero vector and S = +inf leave v unchanged.
// Returns the norm before clipping.
inline double ClipToNorm(ModelParams& v, double clip_norm) {
  if (!(clip_norm > 0.0)) throw InputError("clip norm must be positive");
  const double norm = v.Norm();
  if (norm > clip_norm) v *= clip_norm / norm;
  return norm;
}

// Exactly m distinct clients, uniformly without replacement, ascending.
inline std::vector<std::size_t> SampleRoundClients(std::vector<std::size_t> pool,
                                                   std::int64_t round_size, Rng& rng) {
  if (round_size < 0 || static_cast<std::int64_t>(pool.size()) < round_size)
    throw ConfigError("eligible pool of " + std::to_string(pool.size()) +
                      " clients is smaller than the round size " + std::to_string(round_size));
  const auto m = static_cast<std::size_t>(round_size);
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = i + rng.UniformIndex(pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(m);
  std::sort(pool.begin(), pool.end());
  return pool;
}

struct UserUpdateResult {
  ModelParams delta;         // clipped
  ModelParams residual;      // exact rounding error of delta, same clip factor
  double pre_clip_norm = 0.0;
  bool clipped = false;
  double mean_loss = 0.0;    // mean batch loss over local training
  std::int64_t steps = 0;
};

// Local training on one client: E epochs of size-B minibatch SGD starting
// from `global`, then the clipped model delta.
inline UserUpdateResult UserUpdate(const std::vector<TokenSequence>& data,
                                   const ModelParams& global, const ClientConfig& config,
                                   double clip_norm, Rng& shuffle_rng) {
  if (data.empty()) throw InputError("client has no data");
  ModelParams theta = global;
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  double loss_sum = 0.0;
  std::int64_t steps = 0;
  std::vector<const TokenSequence*> batch_ptrs;
  for (int epoch = 0; epoch < config.local_epochs; ++epoch) {
    if (config.shuffle) shuffle_rng.Shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      batch_ptrs.clear();
      for (std::size_t i = start; i < end; ++i) batch_ptrs.push_back(&data[order[i]]);
      const SequenceBatch batch =
          SequenceBatch::FromSentences(std::span<const TokenSequence* const>(batch_ptrs));
      LossAndGradient lg = ComputeLossAndGradient(theta, batch, config.reduction);
      loss_sum += lg.loss;
      ++steps;
      auto& t = theta.raw();
      const auto& g = lg.gradient.raw();
      for (std::size_t i = 0; i < t.size(); ++i) t[i] -= config.learning_rate * g[i];
    }
  }
  UserUpdateResult out;
  out.delta = theta;
  out.delta -= global;
  out.residual = ModelParams::Zeros(global.shape());
  {
    const auto& l = theta.raw();
    const auto& g = global.raw();
    const auto& d = out.delta.raw();
    auto& r = out.residual.raw();
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = internal::TwoSumError(l[i], -g[i], d[i]);
  }
  out.pre_clip_norm = ClipToNorm(out.delta, clip_norm);
  out.clipped = out.pre_clip_norm > clip_norm;
  if (out.clipped) out.residual *= clip_norm / out.pre_clip_norm;
  out.mean_loss = steps ? loss_sum / static_cast<double>(steps) : 0.0;
  out.steps = steps;
  return out;
}

// (sum of deltas) / m, summed in the given order. The divisor is the
// configured round size m, so a missing update counts as zero.
inline ModelParams AverageUpdates(std::span<const ModelParams> deltas, std::int64_t round_size) {
  if (static_cast<std::int64_t>(deltas.size()) != round_size)
    throw InvariantError("aggregating " + std::to_string(deltas.size()) +
                         " updates in a round of size " + std::to_string(round_size));
  if (deltas.empty()) throw InvariantError("no updates to aggregate");
  ModelParams sum = deltas[0];
  for (std::size_t k = 1; k < deltas.size(); ++k) sum += deltas[k];
  const double m = static_cast<double>(round_size);
  for (double& x : sum.raw()) x /= m;
  return sum;
}

inline void AddGaussianNoise(ModelParams& params, double sigma, Rng& rng) {
  if (sigma > 0.0)
    for (double& x : params.raw()) x += rng.Normal(sigma);
}

// Average of the clipped deltas plus N(0, sigma^2 I), sigma = zS/m.
inline ModelParams AggregateAndNoise(std::span<const ModelParams> deltas, const DpConfig& config,
                                     Rng& noise_rng) {
  ModelParams out = AverageUpdates(deltas, config.round_size);
  AddGaussianNoise(out, config.sigma(), noise_rng);
  return out;
}

struct RoundMetrics {
  std::int64_t round = 0;
  double loss = 0.0;              // mean local training loss over sampled clients
  double fraction_clipped = 0.0;  // clients with pre-clip norm > S, over m
  double update_norm = 0.0;       // norm of the pre-noise average update
  double sigma = 0.0;
  std::int64_t eligible = 0;
  std::int64_t skipped = 0;       // sampled clients with no data
  std::vector<std::size_t> sampled;  // audit only; not written to reports
};

struct TrainOptions {
  int num_threads = 1;
  std::function<void(const RoundMetrics&, const ModelParams&)> on_round;
};

struct TrainResult {
  ModelParams params;
  std::vector<RoundMetrics> metrics;
};

struct TrainConfig {
  DpConfig dp;
  ClientConfig client;
  ServerOptConfig server;

  void Validate() const {
    dp.Validate();
    client.Validate();
    server.Validate();
  }
};

namespace internal {

template <typename Fn>
void ParallelFor(std::size_t n, int num_threads, Fn&& fn) {
  if (num_threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(num_threads));
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace internal

// Runs the sampled clients of one round and returns the clipped deltas in
// ascending client order, together with the per-round statistics. When
// `residual_sum` is given it receives the sum of the delta residuals.
inline std::vector<ModelParams> RunClients(ClientPopulation& population,
                                           std::span<const std::size_t> sampled,
                                           const ModelParams& global, const TrainConfig& config,
                                           std::uint64_t seed, std::int64_t round,
                                           int num_threads, RoundMetrics& metrics,
                                           ModelParams* residual_sum = nullptr) {
  std::vector<std::optional<UserUpdateResult>> results(sampled.size());
  internal::ParallelFor(sampled.size(), num_threads, [&](std::size_t i) {
    const auto& data = population.ClientData(sampled[i]);
    if (data.empty()) return;
    Rng shuffle(seed, streams::kClientShuffle, static_cast<std::uint64_t>(round), sampled[i]);
    results[i] = UserUpdate(data, global, config.client, config.dp.clip_norm, shuffle);
  });
  std::vector<ModelParams> deltas;
  deltas.reserve(sampled.size());
  std::int64_t clipped = 0, ran = 0;
  double loss = 0.0;
  if (residual_sum) *residual_sum = ModelParams::Zeros(global.shape());
  for (auto& r : results) {
    if (!r) {
      ++metrics.skipped;
      deltas.push_back(ModelParams::Zeros(global.shape()));
      continue;
    }
    ++ran;
    if (r->clipped) ++clipped;
    loss += r->mean_loss;
    if (residual_sum) *residual_sum += r->residual;
    deltas.push_back(std::move(r->delta));
  }
  metrics.loss = ran ? loss / static_cast<double>(ran) : 0.0;
  metrics.fraction_clipped =
      static_cast<double>(clipped) / static_cast<double>(config.dp.round_size);
  return deltas;
}

// DP-FedAvg with fixed-size rounds. Every draw comes from streams derived
// from `seed`: "sampling"[t], "client-shuffle"[t, client], "noise"[t].
inline TrainResult Train(const ModelParams& initial, ClientPopulation& population,
                         const TrainConfig& config, std::uint64_t seed,
                         const TrainOptions& options = {}) {
  config.Validate();
  TrainResult result{initial, {}};
  ServerOptimizer server(config.server);
  for (std::int64_t t = 0; t < config.dp.rounds; ++t) {
    RoundMetrics metrics;
    metrics.round = t;
    metrics.sigma = config.dp.sigma();
    std::vector<std::size_t> eligible = population.EligibleClients(t);
    metrics.eligible = static_cast<std::int64_t>(eligible.size());
    Rng sampling(seed, streams::kSampling, static_cast<std::uint64_t>(t));
    metrics.sampled = SampleRoundClients(std::move(eligible), config.dp.round_size, sampling);
    population.RecordParticipation(t, metrics.sampled);

    ModelParams residual;
    std::vector<ModelParams> deltas =
        RunClients(population, metrics.sampled, result.params, config, seed, t,
                   options.num_threads, metrics, &residual);
    ModelParams update = AverageUpdates(deltas, config.dp.round_size);
    for (double& x : residual.raw()) x /= static_cast<double>(config.dp.round_size);
    metrics.update_norm = update.Norm();
    Rng noise(seed, streams::kNoise, static_cast<std::uint64_t>(t));
    AddGaussianNoise(update, config.dp.sigma(), noise);
    server.Step(result.params, update, &residual);
    if (!result.params.AllFinite())
      throw InvariantError("non-finite parameters after round " + std::to_string(t));
    if (options.on_round) options.on_round(metrics, result.params);
    result.metrics.push_back(std::move(metrics));
  }
  return result;
}

inline std::string FormatDouble(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

inline constexpr const char* kMetricsCsvHeader = "round,loss,fraction_clipped,update_norm,sigma";

inline std::string MetricsCsvRow(const RoundMetrics& m) {
  return std::to_string(m.round) + ',' + FormatDouble(m.loss) + ',' +
         FormatDouble(m.fraction_clipped) + ',' + FormatDouble(m.update_norm) + ',' +
         FormatDouble(m.sigma);
}

inline void WriteMetricsCsv(const std::vector<RoundMetrics>& metrics, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write metrics " + path);
  out << kMetricsCsvHeader << '\n';
  for (const auto& m : metrics) out << MetricsCsvRow(m) << '\n';
}

}  // namespace fedmem
