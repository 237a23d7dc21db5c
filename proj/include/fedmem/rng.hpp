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

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "fedmem/common.hpp"

namespace fedmem {

// Every random draw in a run descends from one root seed. A stream is named
// (e.g. "noise") and indexed by up to two integers (round, client id), and its
// seed is
//
//   SplitMix64(SplitMix64(SplitMix64(root ^ Fnv1a(name)) ^ index0) ^ index1)
//
// so the draws for client k in round t never depend on how many other clients
// ran before it, or on which thread ran it.
inline constexpr std::uint64_t SplitMix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline constexpr std::uint64_t Fnv1a(std::string_view text) {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (char c : text) {
    hash ^= static_cast<unsigned char>(c);
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

inline constexpr std::uint64_t DeriveSeed(std::uint64_t root,
                                          std::string_view stream,
                                          std::uint64_t index0 = 0,
                                          std::uint64_t index1 = 0) {
  std::uint64_t s = SplitMix64(root ^ Fnv1a(stream));
  s = SplitMix64(s ^ index0);
  return SplitMix64(s ^ index1);
}

// Named sub-streams used by the harness.
namespace streams {
inline constexpr std::string_view kCorpus = "corpus";
inline constexpr std::string_view kPopulation = "population";
inline constexpr std::string_view kCanaries = "canaries";
inline constexpr std::string_view kInit = "init";
inline constexpr std::string_view kSampling = "sampling";
inline constexpr std::string_view kAvailability = "availability";
inline constexpr std::string_view kClientShuffle = "client-shuffle";
inline constexpr std::string_view kNoise = "noise";
inline constexpr std::string_view kAuditReferences = "audit-references";
}  // namespace streams

class Rng {
 public:
  using Engine = std::mt19937_64;

  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  Rng(std::uint64_t root, std::string_view stream, std::uint64_t index0 = 0,
      std::uint64_t index1 = 0)
      : engine_(DeriveSeed(root, stream, index0, index1)) {}

  Engine& engine() { return engine_; }

  // Uniform integer in [0, bound).
  std::uint64_t UniformIndex(std::uint64_t bound) {
    std::uniform_int_distribution<std::uint64_t> dist(0, bound - 1);
    return dist(engine_);
  }

  double Uniform01() {
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    return dist(engine_);
  }

  bool Bernoulli(double p) {
    if (p >= 1.0) return true;
    if (p <= 0.0) return false;
    return Uniform01() < p;
  }

  double Normal(double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    return dist(engine_);
  }

  template <typename T>
  void Shuffle(std::vector<T>& items) {
    // Explicit Fisher-Yates; std::shuffle's draw pattern is unspecified.
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = UniformIndex(i);
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  Engine engine_;
};

}  // namespace fedmem
