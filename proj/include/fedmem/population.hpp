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
#include <cstdint>
#include <fstream>
#include <set>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "fedmem/common.hpp"
#include "fedmem/corpus.hpp"
#include "fedmem/rng.hpp"
#include "fedmem/vocabulary.hpp"
#include "json.hpp"

namespace fedmem {

// Every synthetic device holds exactly this many sentences.
inline constexpr int kSyntheticDatasetSize = 200;
inline constexpr int kCanaryLength = 5;
inline constexpr int kCanaryPrefixLength = 2;

enum class DeviceKind { kOrdinary, kSynthetic };

struct Device {
  std::int64_t id = 0;
  DeviceKind kind = DeviceKind::kOrdinary;
  std::vector<TokenSequence> sentences;
  // Pace-steering state.
  std::int64_t last_participation = -1;
  int cooldown_remaining = 0;
  std::int64_t participations = 0;
};

struct CanaryConfig {
  int users = 1;     // n_u: devices sharing the canary
  int copies = 1;    // n_e: copies of the canary on each device
  int replicas = 3;  // distinct canaries per (n_u, n_e) cell

  void Validate() const {
    if (users < 1) throw ConfigError("canary n_u must be at least 1");
    if (copies < 1 || copies > kSyntheticDatasetSize)
      throw ConfigError("canary n_e must be in [1, 200]");
    if (replicas < 1) throw ConfigError("canary replicas must be at least 1");
  }

  bool operator==(const CanaryConfig&) const = default;
};

// n_u in {1, 4, 16} x n_e in {1, 14, 200}, three canaries per cell.
inline std::vector<CanaryConfig> StandardCanaryGrid(int replicas = 3) {
  std::vector<CanaryConfig> grid;
  for (int users : {1, 4, 16})
    for (int copies : {1, 14, 200}) grid.push_back({users, copies, replicas});
  return grid;
}

struct Canary {
  int id = 0;
  int replica = 0;
  CanaryConfig config;
  TokenSequence phrase;
  std::vector<std::int64_t> device_ids;

  TokenSequence prefix() const {
    return TokenSequence(phrase.begin(), phrase.begin() + kCanaryPrefixLength);
  }
  TokenSequence suffix() const {
    return TokenSequence(phrase.begin() + kCanaryPrefixLength, phrase.end());
  }
};

namespace internal {

inline std::uint64_t HashTokens(std::span<const TokenId> tokens) {
  std::uint64_t h = 0x84222325cbf29ce4ULL;
  for (TokenId t : tokens) h = SplitMix64(h ^ static_cast<std::uint64_t>(t));
  return h;
}

inline std::unordered_set<std::uint64_t> PhraseHashes(const Corpus& corpus, int length) {
  std::unordered_set<std::uint64_t> out;
  for (const auto& s : corpus)
    for (std::size_t i = 0; i + length <= s.size(); ++i)
      out.insert(HashTokens(std::span<const TokenId>(s.data() + i, length)));
  return out;
}

}  // namespace internal

// Five-word canaries with words i.i.d. uniform over the ordinary vocabulary.
// Canaries are resampled on collision with each other and, when `corpus` is
// given, with any five-word window of it.
inline std::vector<Canary> GenerateCanaries(int vocab_size, const std::vector<CanaryConfig>& grid,
                                            Rng& rng, const Corpus* corpus = nullptr) {
  if (vocab_size - Vocabulary::kNumSpecial < kCanaryLength)
    throw InputError("vocabulary too small to build canaries");
  std::unordered_set<std::uint64_t> forbidden;
  if (corpus) forbidden = internal::PhraseHashes(*corpus, kCanaryLength);
  std::set<TokenSequence> seen;
  const auto ordinary = static_cast<std::uint64_t>(vocab_size - Vocabulary::kNumSpecial);
  std::vector<Canary> out;
  for (const auto& cfg : grid) {
    cfg.Validate();
    for (int r = 0; r < cfg.replicas; ++r) {
      Canary c;
      c.id = static_cast<int>(out.size());
      c.replica = r;
      c.config = cfg;
      for (int attempt = 0;; ++attempt) {
        if (attempt > 1000) throw InputError("cannot draw a distinct canary");
        c.phrase.clear();
        for (int i = 0; i < kCanaryLength; ++i)
          c.phrase.push_back(static_cast<TokenId>(Vocabulary::kNumSpecial + rng.UniformIndex(ordinary)));
        if (seen.count(c.phrase)) continue;
        if (forbidden.count(internal::HashTokens(c.phrase))) continue;
        break;
      }
      seen.insert(c.phrase);
      out.push_back(std::move(c));
    }
  }
  return out;
}

// For each canary, n_u devices each holding n_e copies of the canary and
// 200 - n_e sentences sampled without replacement from `public_corpus`.
// Device ids are assigned from `first_id` upward and recorded on the canary.
inline std::vector<Device> BuildSyntheticDevices(std::vector<Canary>& canaries,
                                                 const Corpus& public_corpus, Rng& rng,
                                                 std::int64_t first_id = 0) {
  if (static_cast<int>(public_corpus.size()) < kSyntheticDatasetSize)
    throw InputError("public corpus needs at least 200 sentences to fill synthetic devices");
  std::vector<Device> devices;
  std::int64_t next_id = first_id;
  std::vector<std::size_t> pool(public_corpus.size());
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
  for (auto& canary : canaries) {
    canary.config.Validate();
    canary.device_ids.clear();
    for (int u = 0; u < canary.config.users; ++u) {
      Device dev;
      dev.id = next_id++;
      dev.kind = DeviceKind::kSynthetic;
      for (int e = 0; e < canary.config.copies; ++e) dev.sentences.push_back(canary.phrase);
      const int filler = kSyntheticDatasetSize - canary.config.copies;
      // Partial Fisher-Yates: the first `filler` slots become the sample.
      for (int i = 0; i < filler; ++i) {
        const std::size_t j = i + rng.UniformIndex(pool.size() - i);
        std::swap(pool[i], pool[j]);
        dev.sentences.push_back(public_corpus[pool[i]]);
      }
      rng.Shuffle(dev.sentences);
      canary.device_ids.push_back(dev.id);
      devices.push_back(std::move(dev));
    }
  }
  return devices;
}

// Splits `corpus` into consecutive chunks of `sentences_per_device`.
inline std::vector<Device> BuildOrdinaryDevices(Corpus corpus, std::int64_t num_devices,
                                                int sentences_per_device,
                                                std::int64_t first_id = 0) {
  if (sentences_per_device < 1) throw ConfigError("devices need at least one sentence");
  if (static_cast<std::int64_t>(corpus.size()) < num_devices * sentences_per_device)
    throw InputError("corpus has " + std::to_string(corpus.size()) + " sentences, need " +
                     std::to_string(num_devices * sentences_per_device));
  std::vector<Device> devices(static_cast<std::size_t>(num_devices));
  for (std::int64_t i = 0; i < num_devices; ++i) {
    Device& d = devices[i];
    d.id = first_id + i;
    d.kind = DeviceKind::kOrdinary;
    auto begin = corpus.begin() + i * sentences_per_device;
    d.sentences.assign(std::make_move_iterator(begin),
                       std::make_move_iterator(begin + sentences_per_device));
  }
  return devices;
}

struct PaceSteeringConfig {
  bool enabled = true;
  int cooldown_rounds = 20;
  double availability = 0.1;
  bool synthetic_exempt = true;

  void Validate() const {
    if (cooldown_rounds < 0) throw ConfigError("cooldown must be non-negative");
    if (!(availability > 0.0 && availability <= 1.0))
      throw ConfigError("availability must be in (0, 1]");
  }
};

// Training-time view of the client population. Clients are addressed by
// their position in the population.
class ClientPopulation {
 public:
  virtual ~ClientPopulation() = default;
  virtual std::size_t size() const = 0;
  virtual const std::vector<TokenSequence>& ClientData(std::size_t index) const = 0;
  // Clients that may be sampled in `round`, ascending.
  virtual std::vector<std::size_t> EligibleClients(std::int64_t round) = 0;
  virtual void RecordParticipation(std::int64_t round, std::span<const std::size_t> clients) = 0;
};

// Every client always eligible.
class StaticPopulation : public ClientPopulation {
 public:
  explicit StaticPopulation(std::vector<std::vector<TokenSequence>> data)
      : data_(std::move(data)) {}

  std::size_t size() const override { return data_.size(); }
  const std::vector<TokenSequence>& ClientData(std::size_t i) const override { return data_[i]; }
  std::vector<TokenSequence>& MutableClientData(std::size_t i) { return data_[i]; }
  std::vector<std::size_t> EligibleClients(std::int64_t) override {
    std::vector<std::size_t> all(data_.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return all;
  }
  void RecordParticipation(std::int64_t, std::span<const std::size_t>) override {}

 private:
  std::vector<std::vector<TokenSequence>> data_;
};

// Ordinary and synthetic devices with pace-steering eligibility.
class Population : public ClientPopulation {
 public:
  Population() = default;
  Population(std::vector<Device> devices, std::vector<Canary> canaries, PaceSteeringConfig pace,
             std::uint64_t seed)
      : devices_(std::move(devices)), canaries_(std::move(canaries)), pace_(pace), seed_(seed) {
    pace_.Validate();
  }

  std::size_t size() const override { return devices_.size(); }
  const std::vector<TokenSequence>& ClientData(std::size_t i) const override {
    return devices_[i].sentences;
  }
  const std::vector<Device>& devices() const { return devices_; }
  std::vector<Device>& mutable_devices() { return devices_; }
  const std::vector<Canary>& canaries() const { return canaries_; }
  const PaceSteeringConfig& pace() const { return pace_; }
  std::uint64_t seed() const { return seed_; }

  std::int64_t CountKind(DeviceKind kind) const {
    return std::count_if(devices_.begin(), devices_.end(),
                         [&](const Device& d) { return d.kind == kind; });
  }

  // Synthetic devices (when exempt) are always eligible. Any other device is
  // eligible iff its cooldown has expired and it is available this round.
  std::vector<std::size_t> EligibleClients(std::int64_t round) override {
    std::vector<std::size_t> out;
    if (!pace_.enabled) {
      out.resize(devices_.size());
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = i;
      return out;
    }
    Rng rng(seed_, streams::kAvailability, static_cast<std::uint64_t>(round));
    for (std::size_t i = 0; i < devices_.size(); ++i) {
      Device& d = devices_[i];
      if (d.kind == DeviceKind::kSynthetic && pace_.synthetic_exempt) {
        out.push_back(i);
        continue;
      }
      const bool available = rng.Bernoulli(pace_.availability);
      if (d.cooldown_remaining > 0) {
        --d.cooldown_remaining;
        continue;
      }
      if (available) out.push_back(i);
    }
    return out;
  }

  void RecordParticipation(std::int64_t round, std::span<const std::size_t> clients) override {
    for (std::size_t i : clients) {
      Device& d = devices_[i];
      d.last_participation = round;
      ++d.participations;
      if (pace_.enabled && !(d.kind == DeviceKind::kSynthetic && pace_.synthetic_exempt))
        d.cooldown_remaining = pace_.cooldown_rounds;
    }
  }

  // Mean participations per device of the given kind so far.
  double MeanParticipations(DeviceKind kind) const {
    double total = 0;
    std::int64_t n = 0;
    for (const auto& d : devices_)
      if (d.kind == kind) {
        total += static_cast<double>(d.participations);
        ++n;
      }
    return n ? total / static_cast<double>(n) : 0.0;
  }

  // Times the model saw `canary` so far: participations of its devices times n_e.
  std::int64_t RealizedEncounters(const Canary& canary) const {
    std::int64_t n = 0;
    for (std::int64_t id : canary.device_ids)
      for (const auto& d : devices_)
        if (d.id == id) n += d.participations * canary.config.copies;
    return n;
  }

 private:
  std::vector<Device> devices_;
  std::vector<Canary> canaries_;
  PaceSteeringConfig pace_;
  std::uint64_t seed_ = 0;
};

// Expected number of times a canary is seen during training when each
// synthetic device participates `mean_participations` times.
inline double ExpectedCanaryEncounters(const CanaryConfig& cfg, double mean_participations) {
  if (mean_participations < 0) throw InputError("participation count must be non-negative");
  return mean_participations * cfg.users * cfg.copies;
}

// Canary manifest: everything the auditor needs to find and score canaries.
inline nlohmann::json CanaryManifestJson(const std::vector<Canary>& canaries,
                                         const Vocabulary& vocab) {
  nlohmann::json out;
  out["schema_version"] = 1;
  out["vocab_size"] = vocab.size();
  out["canaries"] = nlohmann::json::array();
  for (const auto& c : canaries) {
    out["canaries"].push_back({{"id", c.id},
                               {"n_u", c.config.users},
                               {"n_e", c.config.copies},
                               {"replica", c.replica},
                               {"tokens", c.phrase},
                               {"phrase", vocab.Decode(c.phrase)},
                               {"device_ids", c.device_ids}});
  }
  return out;
}

inline void WriteCanaryManifest(const std::vector<Canary>& canaries, const Vocabulary& vocab,
                                const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write canary manifest " + path);
  out << CanaryManifestJson(canaries, vocab).dump(2) << '\n';
}

struct CanaryManifest {
  int vocab_size = 0;
  std::vector<Canary> canaries;
};

inline CanaryManifest ReadCanaryManifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read canary manifest " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InputError("malformed canary manifest: " + std::string(e.what()));
  }
  CanaryManifest m;
  m.vocab_size = j.at("vocab_size").get<int>();
  for (const auto& jc : j.at("canaries")) {
    Canary c;
    c.id = jc.at("id").get<int>();
    c.replica = jc.value("replica", 0);
    c.config.users = jc.at("n_u").get<int>();
    c.config.copies = jc.at("n_e").get<int>();
    c.phrase = jc.at("tokens").get<TokenSequence>();
    c.device_ids = jc.value("device_ids", std::vector<std::int64_t>{});
    if (c.phrase.size() != static_cast<std::size_t>(kCanaryLength))
      throw InputError("canary " + std::to_string(c.id) + " is not five tokens");
    m.canaries.push_back(std::move(c));
  }
  return m;
}

}  // namespace fedmem
