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
#include <limits>
#include <vector>

#include "fedmem/common.hpp"

namespace fedmem {

// Renyi-DP of a mechanism at a grid of orders alpha > 1.
struct RdpCurve {
  std::vector<double> orders;
  std::vector<double> values;

  std::size_t size() const { return orders.size(); }
  bool empty() const { return orders.empty(); }
  bool is_finite() const {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
  }

  void Validate() const {
    if (orders.size() != values.size()) throw InvariantError("rdp orders/values size mismatch");
    for (std::size_t i = 0; i < orders.size(); ++i) {
      if (!(orders[i] > 1.0)) throw InputError("rdp orders must exceed 1");
      if (i && !(orders[i] > orders[i - 1])) throw InputError("rdp orders must increase");
      if (!(values[i] >= 0.0)) throw InvariantError("rdp values must be non-negative");
    }
  }

  // Pointwise sum; both curves must share the order grid.
  RdpCurve operator+(const RdpCurve& other) const {
    if (orders != other.orders) throw InputError("cannot add rdp curves on different grids");
    RdpCurve out = *this;
    for (std::size_t i = 0; i < values.size(); ++i) out.values[i] += other.values[i];
    return out;
  }
};

struct DpGuarantee {
  double epsilon = 0.0;
  double delta = 0.0;
  double order = 0.0;  // minimizing alpha, when derived from an RDP curve
};

// {2, 3, ..., 256} u {320, 384, 448, 512}.
inline std::vector<double> DefaultRdpOrders() {
  std::vector<double> orders;
  for (int a = 2; a <= 256; ++a) orders.push_back(a);
  for (int a : {320, 384, 448, 512}) orders.push_back(a);
  return orders;
}

enum class SamplingScheme {
  // Fixed-size rounds: m of N without replacement, replace-one neighbours.
  // Wang, Balle and Kasiviswanathan's general upper bound at integer orders.
  kWithoutReplacement,
  // Poisson sampling with add/remove neighbours; the integer-order binomial
  // expansion of the sampled Gaussian moment. Tighter, different neighbour
  // relation.
  kPoisson,
};

namespace internal {

inline double LogBinomial(double n, double k) {
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

inline double LogSumExp(const std::vector<double>& terms) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double t : terms) mx = std::max(mx, t);
  if (std::isinf(mx)) return mx;
  double s = 0.0;
  for (double t : terms) s += std::exp(t - mx);
  return mx + std::log(s);
}

// log(1 + e^x) without overflow.
inline double Softplus(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline bool IsInteger(double x) { return std::floor(x) == x; }

// RDP of the subsampled Gaussian (sensitivity 1, noise multiplier z) under
// sampling without replacement at integer alpha >= 2:
//   (1/(alpha-1)) log(1 + g^2 C(alpha,2) min(4(e^{e(2)}-1), 2 e^{e(2)})
//                      + sum_{j>=3} g^j C(alpha,j) e^{(j-1) e(j)} 2)
// with e(j) = j / (2 z^2), the Gaussian's RDP.
inline double RdpWithoutReplacement(double gamma, double z, int alpha) {
  const double inv = 1.0 / (2.0 * z * z);
  const double log_gamma = std::log(gamma);
  std::vector<double> terms;
  terms.reserve(alpha);
  const double e2 = 2.0 * inv;
  const double log_second = std::min(std::log(4.0) + std::log(std::expm1(e2)), std::log(2.0) + e2);
  terms.push_back(2.0 * log_gamma + LogBinomial(alpha, 2) + log_second);
  for (int j = 3; j <= alpha; ++j)
    terms.push_back(j * log_gamma + LogBinomial(alpha, j) + (j - 1) * (j * inv) + std::log(2.0));
  return Softplus(LogSumExp(terms)) / (alpha - 1.0);
}

// log E[(mu_1/mu_0)^alpha] for the Poisson-sampled Gaussian, integer alpha:
//   sum_i C(alpha,i) g^i (1-g)^(alpha-i) exp((i^2 - i) / (2 z^2)).
inline double RdpPoisson(double gamma, double z, int alpha) {
  std::vector<double> terms;
  terms.reserve(alpha + 1);
  const double log_g = std::log(gamma), log_1mg = std::log1p(-gamma);
  for (int i = 0; i <= alpha; ++i)
    terms.push_back(LogBinomial(alpha, i) + i * log_g + (alpha - i) * log_1mg +
                    (static_cast<double>(i) * i - i) / (2.0 * z * z));
  return LogSumExp(terms) / (alpha - 1.0);
}

}  // namespace internal

// Per-round RDP of the Gaussian mechanism (noise multiplier z) applied to a
// gamma-fraction subsample. gamma = 1 gives the exact alpha / (2 z^2); the
// subsampled bound is capped by it. z = 0 with gamma > 0 yields +infinity at
// every order.
inline RdpCurve RdpSubsampledGaussian(double gamma, double noise_multiplier,
                                      const std::vector<double>& orders = DefaultRdpOrders(),
                                      SamplingScheme scheme = SamplingScheme::kWithoutReplacement) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw InputError("sampling fraction must be in [0, 1]");
  if (!(noise_multiplier >= 0.0)) throw InputError("noise multiplier must be non-negative");
  RdpCurve curve{orders, std::vector<double>(orders.size(), 0.0)};
  curve.Validate();
  if (gamma == 0.0) return curve;
  const double z = noise_multiplier;
  for (std::size_t i = 0; i < orders.size(); ++i) {
    const double alpha = orders[i];
    if (z == 0.0) {
      curve.values[i] = std::numeric_limits<double>::infinity();
      continue;
    }
    const double gaussian = alpha / (2.0 * z * z);
    if (gamma == 1.0) {
      curve.values[i] = gaussian;
      continue;
    }
    if (!internal::IsInteger(alpha))
      throw InputError("subsampled bound requires integer orders");
    const int a = static_cast<int>(alpha);
    const double bound = scheme == SamplingScheme::kWithoutReplacement
                             ? internal::RdpWithoutReplacement(gamma, z, a)
                             : internal::RdpPoisson(gamma, z, a);
    curve.values[i] = std::max(0.0, std::min(bound, gaussian));
  }
  return curve;
}

// RDP composes additively: T rounds multiply every value by T.
inline RdpCurve Compose(const RdpCurve& curve, std::int64_t rounds) {
  if (rounds < 0) throw InputError("number of rounds must be non-negative");
  RdpCurve out = curve;
  for (double& v : out.values) v = rounds == 0 ? 0.0 : v * static_cast<double>(rounds);
  return out;
}

// epsilon = min_alpha rdp(alpha) + log(1/delta) / (alpha - 1).
inline DpGuarantee ToEpsDelta(const RdpCurve& curve, double delta) {
  if (curve.empty()) throw InputError("empty rdp curve");
  if (!(delta > 0.0 && delta < 1.0)) throw InputError("delta must be in (0, 1)");
  curve.Validate();
  DpGuarantee best{std::numeric_limits<double>::infinity(), delta, curve.orders.front()};
  const double log_inv_delta = -std::log(delta);
  for (std::size_t i = 0; i < curve.size(); ++i) {
    const double eps = curve.values[i] + log_inv_delta / (curve.orders[i] - 1.0);
    if (eps < best.epsilon) {
      best.epsilon = eps;
      best.order = curve.orders[i];
    }
  }
  best.epsilon = std::max(0.0, best.epsilon);
  return best;
}

// (k eps, k e^{(k-1) eps} delta), delta clamped to 1.
inline DpGuarantee GroupPrivacy(const DpGuarantee& g, int group_size) {
  if (group_size < 1) throw InputError("group size must be at least 1");
  if (group_size == 1) return g;
  const double k = group_size;
  DpGuarantee out = g;
  out.epsilon = k * g.epsilon;
  out.delta = g.delta == 0.0 ? 0.0 : std::min(1.0, k * std::exp((k - 1.0) * g.epsilon) * g.delta);
  return out;
}

struct AccountingQuery {
  std::int64_t population_size = 0;  // N
  std::int64_t round_size = 0;       // m
  double noise_multiplier = 0.0;     // z
  std::int64_t rounds = 0;           // T
  double delta = 0.0;
  SamplingScheme scheme = SamplingScheme::kWithoutReplacement;
};

inline DpGuarantee ComputeGuarantee(const AccountingQuery& q,
                                    const std::vector<double>& orders = DefaultRdpOrders()) {
  if (q.population_size < 1 || q.round_size < 1) throw InputError("N and m must be positive");
  if (q.round_size > q.population_size) throw InputError("round size exceeds population size");
  const double gamma =
      static_cast<double>(q.round_size) / static_cast<double>(q.population_size);
  const RdpCurve per_round = RdpSubsampledGaussian(gamma, q.noise_multiplier, orders, q.scheme);
  return ToEpsDelta(Compose(per_round, q.rounds), q.delta);
}

// delta = N^{-exponent}.
inline double PolynomialDelta(std::int64_t population_size, double exponent = 1.1) {
  return std::pow(static_cast<double>(population_size), -exponent);
}

struct EpsilonTableRow {
  std::int64_t population_size = 0;
  double delta = 0.0;
  double epsilon = 0.0;
  double order = 0.0;
};

// Hypothetical (eps, delta = N^-1.1) for a fixed round size across several
// population sizes.
inline std::vector<EpsilonTableRow> EpsilonTable(const std::vector<std::int64_t>& populations,
                                                 std::int64_t round_size = 20000,
                                                 double noise_multiplier = 0.8,
                                                 std::int64_t rounds = 2000,
                                                 double delta_exponent = 1.1) {
  std::vector<EpsilonTableRow> rows;
  for (std::int64_t n : populations) {
    if (n < round_size) throw InputError("population " + std::to_string(n) +
                                         " is smaller than the round size");
    const double delta = PolynomialDelta(n, delta_exponent);
    const DpGuarantee g = ComputeGuarantee({n, round_size, noise_multiplier, rounds, delta});
    rows.push_back({n, delta, g.epsilon, g.order});
  }
  return rows;
}

}  // namespace fedmem
