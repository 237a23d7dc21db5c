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

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "fedmem/accountant.hpp"
#include "fedmem/common.hpp"
#include "fedmem/corpus.hpp"
#include "fedmem/dp_fedavg.hpp"
#include "fedmem/model.hpp"
#include "fedmem/population.hpp"
#include "fedmem/rng.hpp"
#include "fedmem/secret_sharer.hpp"
#include "json.hpp"

namespace fedmem {

inline constexpr int kSpecSchemaVersion = 1;

// Where sentences come from and how they are split. The corpus is laid out
// as [ordinary device data | public pool | evaluation set]; the public pool
// fills synthetic devices.
struct CorpusSpec {
  std::string source = "generate";  // "generate" or "file"
  std::string path;                 // text file, one sentence per line
  CorpusGeneratorConfig generator = DefaultGenerator();  // vocab_size is used for both sources
  std::int64_t public_sentences = 20000;
  std::int64_t eval_sentences = 2000;

  // Enough sentences for the default population and pools.
  static CorpusGeneratorConfig DefaultGenerator() {
    CorpusGeneratorConfig g;
    g.num_sentences = 10000 * 100 + 20000 + 2000;
    return g;
  }
};

struct ModelSpec {
  int embed_dim = 96;
  int hidden_dim = 96;
  double init_scale = 0.1;
};

struct PopulationSpec {
  std::int64_t ordinary_devices = 10000;
  int sentences_per_device = 100;
  PaceSteeringConfig pace_steering;
  std::vector<CanaryConfig> canary_grid = StandardCanaryGrid();
};

struct TrainingSpec {
  std::int64_t checkpoint_every = 0;  // 0: final checkpoint only
  int num_threads = 1;
};

struct AuditSpec {
  bool enabled = true;
  AuditSettings settings;
};

struct AccountingSpec {
  bool enabled = true;
  double delta = 0.0;  // 0: N^-delta_exponent
  double delta_exponent = 1.1;
  SamplingScheme scheme = SamplingScheme::kWithoutReplacement;
};

struct ExperimentSpec {
  int schema_version = kSpecSchemaVersion;
  std::uint64_t seed = 1;
  std::string output_dir = "run";
  // Declares that the corpus may be used for tuning. Sweeps refuse otherwise.
  bool public_corpus = true;
  CorpusSpec corpus;
  ModelSpec model;
  PopulationSpec population;
  TrainConfig train;  // dp.population_size is filled in from the population
  TrainingSpec training;
  AuditSpec audit;
  AccountingSpec accounting;

  int vocab_size() const { return corpus.generator.vocab_size; }
  ModelShape shape() const { return {vocab_size(), model.embed_dim, model.hidden_dim}; }

  std::int64_t synthetic_devices() const {
    std::int64_t n = 0;
    for (const auto& c : population.canary_grid) n += std::int64_t(c.users) * c.replicas;
    return n;
  }
  std::int64_t total_devices() const { return population.ordinary_devices + synthetic_devices(); }
  std::int64_t required_sentences() const {
    return population.ordinary_devices * population.sentences_per_device +
           corpus.public_sentences + corpus.eval_sentences;
  }

  void Validate() const {
    if (schema_version != kSpecSchemaVersion)
      throw ConfigError("unsupported schema_version " + std::to_string(schema_version));
    if (corpus.source != "generate" && corpus.source != "file")
      throw ConfigError("corpus.source must be \"generate\" or \"file\"");
    if (corpus.source == "file" && corpus.path.empty())
      throw ConfigError("corpus.path is required when corpus.source is \"file\"");
    corpus.generator.Validate();
    if (corpus.source == "generate" && corpus.generator.num_sentences < required_sentences())
      throw ConfigError("corpus.num_sentences is " +
                        std::to_string(corpus.generator.num_sentences) + ", the split needs " +
                        std::to_string(required_sentences()));
    if (corpus.public_sentences < kSyntheticDatasetSize)
      throw ConfigError("corpus.public_sentences must be at least 200");
    if (corpus.eval_sentences < 1) throw ConfigError("corpus.eval_sentences must be positive");
    shape().Validate();
    if (!(model.init_scale >= 0)) throw ConfigError("model.init_scale must be non-negative");
    if (population.ordinary_devices < 0) throw ConfigError("population.ordinary_devices < 0");
    if (population.sentences_per_device < 1)
      throw ConfigError("population.sentences_per_device must be positive");
    population.pace_steering.Validate();
    for (const auto& c : population.canary_grid) c.Validate();
    if (training.checkpoint_every < 0) throw ConfigError("training.checkpoint_every < 0");
    if (training.num_threads < 1) throw ConfigError("training.num_threads must be positive");
    if (audit.settings.reference_size < 1) throw ConfigError("audit.reference_size must be positive");
    if (audit.settings.beam_width < 1) throw ConfigError("audit.beam_width must be positive");
    if (accounting.delta < 0 || accounting.delta >= 1) throw ConfigError("accounting.delta out of range");
    if (!(accounting.delta_exponent > 0)) throw ConfigError("accounting.delta_exponent must be positive");
    DpConfig dp = train.dp;
    dp.population_size = total_devices();
    dp.Validate();
    train.client.Validate();
    train.server.Validate();
  }
};

namespace internal {

inline const char* ReductionName(LossReduction r) {
  return r == LossReduction::kSum ? "sum" : "mean";
}
inline LossReduction ParseReduction(const std::string& s) {
  if (s == "mean") return LossReduction::kMeanPerToken;
  if (s == "sum") return LossReduction::kSum;
  throw ConfigError("client.reduction must be \"mean\" or \"sum\"");
}
inline const char* BeamModeName(BeamMode m) { return m == BeamMode::kExact ? "exact" : "greedy"; }
inline BeamMode ParseBeamMode(const std::string& s) {
  if (s == "greedy") return BeamMode::kGreedy;
  if (s == "exact") return BeamMode::kExact;
  throw ConfigError("audit.beam_mode must be \"greedy\" or \"exact\"");
}
inline const char* SchemeName(SamplingScheme s) {
  return s == SamplingScheme::kPoisson ? "poisson" : "without_replacement";
}
inline SamplingScheme ParseScheme(const std::string& s) {
  if (s == "without_replacement") return SamplingScheme::kWithoutReplacement;
  if (s == "poisson") return SamplingScheme::kPoisson;
  throw ConfigError("accounting.scheme must be \"without_replacement\" or \"poisson\"");
}

// JSON has no infinity; a disabled clip norm is written as null.
inline nlohmann::json FiniteOrNull(double x) {
  return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr);
}

// Keys that may hold null in place of their default type.
inline bool NullableKey(const std::string& path) { return path == "dp.clip_norm"; }

// Overlays `patch` on `base`, rejecting keys that `base` does not have.
inline void MergeStrict(nlohmann::json& base, const nlohmann::json& patch, const std::string& path) {
  if (!patch.is_object()) throw ConfigError((path.empty() ? "spec" : path) + " must be an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown spec key " + key);
    nlohmann::json& slot = base[it.key()];
    if (slot.is_object()) {
      MergeStrict(slot, it.value(), key);
      continue;
    }
    const bool numeric = slot.is_number() && it.value().is_number();
    const bool nullable = NullableKey(key) && (it.value().is_null() || it.value().is_number());
    if (!numeric && !nullable && slot.type() != it.value().type())
      throw ConfigError("spec key " + key + " has the wrong type");
    slot = it.value();
  }
}

}  // namespace internal

inline nlohmann::json SpecToJson(const ExperimentSpec& s) {
  using nlohmann::json;
  const auto& g = s.corpus.generator;
  json grid = json::array();
  for (const auto& c : s.population.canary_grid)
    grid.push_back({{"users", c.users}, {"copies", c.copies}, {"replicas", c.replicas}});
  const auto& dp = s.train.dp;
  const auto& cl = s.train.client;
  const auto& sv = s.train.server;
  const auto& ps = s.population.pace_steering;
  return {
      {"schema_version", s.schema_version},
      {"seed", s.seed},
      {"output_dir", s.output_dir},
      {"public_corpus", s.public_corpus},
      {"corpus",
       {{"source", s.corpus.source},
        {"path", s.corpus.path},
        {"vocab_size", g.vocab_size},
        {"num_sentences", g.num_sentences},
        {"zipf_exponent", g.zipf_exponent},
        {"min_length", g.min_length},
        {"max_length", g.max_length},
        {"markov_weight", g.markov_weight},
        {"successors_per_context", g.successors_per_context},
        {"public_sentences", s.corpus.public_sentences},
        {"eval_sentences", s.corpus.eval_sentences}}},
      {"model",
       {{"embed_dim", s.model.embed_dim},
        {"hidden_dim", s.model.hidden_dim},
        {"init_scale", s.model.init_scale}}},
      {"population",
       {{"ordinary_devices", s.population.ordinary_devices},
        {"sentences_per_device", s.population.sentences_per_device},
        {"pace_steering",
         {{"enabled", ps.enabled},
          {"cooldown_rounds", ps.cooldown_rounds},
          {"availability", ps.availability},
          {"synthetic_exempt", ps.synthetic_exempt}}},
        {"canary_grid", grid}}},
      {"dp",
       {{"round_size", dp.round_size},
        {"noise_multiplier", dp.noise_multiplier},
        {"clip_norm", internal::FiniteOrNull(dp.clip_norm)},
        {"rounds", dp.rounds}}},
      {"client",
       {{"local_epochs", cl.local_epochs},
        {"batch_size", cl.batch_size},
        {"learning_rate", cl.learning_rate},
        {"shuffle", cl.shuffle},
        {"reduction", internal::ReductionName(cl.reduction)}}},
      {"server",
       {{"kind", ServerOptimizerName(sv.kind)},
        {"learning_rate", sv.learning_rate},
        {"momentum", sv.momentum},
        {"beta1", sv.beta1},
        {"beta2", sv.beta2},
        {"epsilon", sv.epsilon}}},
      {"training",
       {{"checkpoint_every", s.training.checkpoint_every},
        {"num_threads", s.training.num_threads}}},
      {"audit",
       {{"enabled", s.audit.enabled},
        {"reference_size", s.audit.settings.reference_size},
        {"beam_width", s.audit.settings.beam_width},
        {"beam_mode", internal::BeamModeName(s.audit.settings.beam_mode)}}},
      {"accounting",
       {{"enabled", s.accounting.enabled},
        {"delta", s.accounting.delta},
        {"delta_exponent", s.accounting.delta_exponent},
        {"scheme", internal::SchemeName(s.accounting.scheme)}}},
  };
}

// Reads a complete spec document (every key present).
inline ExperimentSpec SpecFromJson(const nlohmann::json& j) {
  ExperimentSpec s;
  try {
    s.schema_version = j.at("schema_version").get<int>();
    s.seed = j.at("seed").get<std::uint64_t>();
    s.output_dir = j.at("output_dir").get<std::string>();
    s.public_corpus = j.at("public_corpus").get<bool>();
    const auto& c = j.at("corpus");
    s.corpus.source = c.at("source").get<std::string>();
    s.corpus.path = c.at("path").get<std::string>();
    auto& g = s.corpus.generator;
    g.vocab_size = c.at("vocab_size").get<int>();
    g.num_sentences = c.at("num_sentences").get<std::int64_t>();
    g.zipf_exponent = c.at("zipf_exponent").get<double>();
    g.min_length = c.at("min_length").get<int>();
    g.max_length = c.at("max_length").get<int>();
    g.markov_weight = c.at("markov_weight").get<double>();
    g.successors_per_context = c.at("successors_per_context").get<int>();
    s.corpus.public_sentences = c.at("public_sentences").get<std::int64_t>();
    s.corpus.eval_sentences = c.at("eval_sentences").get<std::int64_t>();
    const auto& m = j.at("model");
    s.model.embed_dim = m.at("embed_dim").get<int>();
    s.model.hidden_dim = m.at("hidden_dim").get<int>();
    s.model.init_scale = m.at("init_scale").get<double>();
    const auto& p = j.at("population");
    s.population.ordinary_devices = p.at("ordinary_devices").get<std::int64_t>();
    s.population.sentences_per_device = p.at("sentences_per_device").get<int>();
    const auto& ps = p.at("pace_steering");
    s.population.pace_steering.enabled = ps.at("enabled").get<bool>();
    s.population.pace_steering.cooldown_rounds = ps.at("cooldown_rounds").get<int>();
    s.population.pace_steering.availability = ps.at("availability").get<double>();
    s.population.pace_steering.synthetic_exempt = ps.at("synthetic_exempt").get<bool>();
    s.population.canary_grid.clear();
    for (const auto& cell : p.at("canary_grid"))
      s.population.canary_grid.push_back(
          {cell.at("users").get<int>(), cell.at("copies").get<int>(), cell.at("replicas").get<int>()});
    const auto& dp = j.at("dp");
    s.train.dp.round_size = dp.at("round_size").get<std::int64_t>();
    s.train.dp.noise_multiplier = dp.at("noise_multiplier").get<double>();
    s.train.dp.clip_norm = dp.at("clip_norm").is_null() ? std::numeric_limits<double>::infinity()
                                                        : dp.at("clip_norm").get<double>();
    s.train.dp.rounds = dp.at("rounds").get<std::int64_t>();
    const auto& cl = j.at("client");
    s.train.client.local_epochs = cl.at("local_epochs").get<int>();
    s.train.client.batch_size = cl.at("batch_size").get<int>();
    s.train.client.learning_rate = cl.at("learning_rate").get<double>();
    s.train.client.shuffle = cl.at("shuffle").get<bool>();
    s.train.client.reduction = internal::ParseReduction(cl.at("reduction").get<std::string>());
    const auto& sv = j.at("server");
    s.train.server.kind = ParseServerOptimizer(sv.at("kind").get<std::string>());
    s.train.server.learning_rate = sv.at("learning_rate").get<double>();
    s.train.server.momentum = sv.at("momentum").get<double>();
    s.train.server.beta1 = sv.at("beta1").get<double>();
    s.train.server.beta2 = sv.at("beta2").get<double>();
    s.train.server.epsilon = sv.at("epsilon").get<double>();
    const auto& tr = j.at("training");
    s.training.checkpoint_every = tr.at("checkpoint_every").get<std::int64_t>();
    s.training.num_threads = tr.at("num_threads").get<int>();
    const auto& au = j.at("audit");
    s.audit.enabled = au.at("enabled").get<bool>();
    s.audit.settings.reference_size = au.at("reference_size").get<std::int64_t>();
    s.audit.settings.beam_width = au.at("beam_width").get<int>();
    s.audit.settings.beam_mode = internal::ParseBeamMode(au.at("beam_mode").get<std::string>());
    const auto& ac = j.at("accounting");
    s.accounting.enabled = ac.at("enabled").get<bool>();
    s.accounting.delta = ac.at("delta").get<double>();
    s.accounting.delta_exponent = ac.at("delta_exponent").get<double>();
    s.accounting.scheme = internal::ParseScheme(ac.at("scheme").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed spec: ") + e.what());
  }
  s.train.dp.population_size = s.total_devices();
  s.Validate();
  return s;
}

// Applies a partial document on top of `base`; every key must already exist.
inline ExperimentSpec MergeSpec(const ExperimentSpec& base, const nlohmann::json& patch) {
  nlohmann::json merged = SpecToJson(base);
  internal::MergeStrict(merged, patch, "");
  return SpecFromJson(merged);
}

// Turns "dp.clip_norm" and a value into {"dp": {"clip_norm": value}}.
inline nlohmann::json DottedPatch(const std::string& key, const nlohmann::json& value) {
  if (key.empty()) throw ConfigError("empty override key");
  nlohmann::json patch = value;
  std::string rest = key;
  std::vector<std::string> parts;
  for (std::size_t pos; (pos = rest.find('.')) != std::string::npos; rest = rest.substr(pos + 1))
    parts.push_back(rest.substr(0, pos));
  parts.push_back(rest);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
    if (it->empty()) throw ConfigError("bad override key " + key);
    patch = nlohmann::json{{*it, patch}};
  }
  return patch;
}

inline ExperimentSpec ApplyOverride(const ExperimentSpec& base, const std::string& key,
                                    const nlohmann::json& value) {
  return MergeSpec(base, DottedPatch(key, value));
}

// Several overrides at once, validated only as a whole.
inline ExperimentSpec ApplyOverrides(const ExperimentSpec& base,
                                     const std::vector<std::pair<std::string, nlohmann::json>>& kv) {
  nlohmann::json merged = SpecToJson(base);
  for (const auto& [key, value] : kv) internal::MergeStrict(merged, DottedPatch(key, value), "");
  return SpecFromJson(merged);
}

// Parses "key=value"; the value is read as JSON, falling back to a string.
inline std::pair<std::string, nlohmann::json> ParseAssignment(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must be key=value: " + text);
  const std::string value = text.substr(eq + 1);
  nlohmann::json j = nlohmann::json::parse(value, nullptr, false);
  if (j.is_discarded()) j = value;
  return {text.substr(0, eq), j};
}

inline nlohmann::json ReadJsonFile(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError(path + " is not valid JSON");
  return j;
}

inline void WriteJsonFile(const nlohmann::json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << j.dump(2) << '\n';
}

// Spec files may omit any key; omitted keys keep their defaults.
inline ExperimentSpec LoadSpec(const std::string& path) {
  return MergeSpec(ExperimentSpec{}, ReadJsonFile(path));
}

// Hash of the spec without its output directory: two runs with equal hashes
// produce identical artifacts.
inline std::string ConfigHash(const ExperimentSpec& spec) {
  nlohmann::json j = SpecToJson(spec);
  j.erase("output_dir");
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(Fnv1a(j.dump())));
  return buf;
}

}  // namespace fedmem
