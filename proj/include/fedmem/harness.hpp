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
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "fedmem/accountant.hpp"
#include "fedmem/common.hpp"
#include "fedmem/config.hpp"
#include "fedmem/corpus.hpp"
#include "fedmem/dp_fedavg.hpp"
#include "fedmem/lm.hpp"
#include "fedmem/model.hpp"
#include "fedmem/population.hpp"
#include "fedmem/rng.hpp"
#include "fedmem/secret_sharer.hpp"
#include "fedmem/vocabulary.hpp"
#include "json.hpp"

namespace fedmem {

// ---------------------------------------------------------------------------
// Stages and exit codes

enum class Stage { kCorpus, kPopulation, kTrain, kAudit, kAccount, kReport, kSweep };

inline const char* StageName(Stage s) {
  switch (s) {
    case Stage::kCorpus: return "corpus";
    case Stage::kPopulation: return "population";
    case Stage::kTrain: return "train";
    case Stage::kAudit: return "audit";
    case Stage::kAccount: return "account";
    case Stage::kReport: return "report";
    case Stage::kSweep: return "sweep";
  }
  return "unknown";
}

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;

inline int StageExitCode(Stage s) { return 10 + static_cast<int>(s); }

class StageError : public std::runtime_error {
 public:
  StageError(Stage stage, const std::string& what)
      : std::runtime_error(std::string(StageName(stage)) + " stage failed: " + what), stage_(stage) {}
  Stage stage() const { return stage_; }
  int exit_code() const { return StageExitCode(stage_); }

 private:
  Stage stage_;
};

// Runs `fn`, tagging any failure with the stage it happened in.
template <typename Fn>
auto RunStage(Stage stage, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

// ---------------------------------------------------------------------------
// Artifact layout

namespace artifacts {
inline constexpr const char* kSpec = "spec.json";
inline constexpr const char* kCorpus = "corpus.txt";
inline constexpr const char* kVocab = "vocab.txt";
inline constexpr const char* kPopulation = "population.txt";
inline constexpr const char* kCanaries = "canaries.json";
inline constexpr const char* kCheckpoint = "model.ckpt";
inline constexpr const char* kCheckpointDir = "checkpoints";
inline constexpr const char* kMetrics = "metrics.csv";
inline constexpr const char* kTraining = "training.json";
inline constexpr const char* kAudit = "audit.csv";
inline constexpr const char* kAuditTable = "audit_table.txt";
inline constexpr const char* kAccounting = "accounting.json";
inline constexpr const char* kSummary = "summary.csv";
inline constexpr const char* kManifest = "manifest.json";
inline constexpr const char* kReport = "report.md";
inline constexpr const char* kSweepSummary = "sweep_summary.csv";
inline constexpr const char* kSweepClipped = "sweep_clipped.csv";
}  // namespace artifacts

inline std::string ArtifactPath(const std::string& dir, const char* name) {
  return (std::filesystem::path(dir) / name).string();
}

inline bool HasArtifact(const std::string& dir, const char* name) {
  return std::filesystem::exists(ArtifactPath(dir, name));
}

inline std::string ReadTextFile(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

inline void WriteTextFile(const std::string& text, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << text;
}

inline void PrepareOutputDir(const ExperimentSpec& spec) {
  std::error_code ec;
  std::filesystem::create_directories(spec.output_dir, ec);
  if (ec) throw IoError("cannot create " + spec.output_dir + ": " + ec.message());
  WriteJsonFile(SpecToJson(spec), ArtifactPath(spec.output_dir, artifacts::kSpec));
}

struct RunOptions {
  std::ostream* log = nullptr;  // progress lines; null for silence
  std::int64_t log_every = 10;
};

namespace internal {

inline void Log(const RunOptions& opt, const std::string& line) {
  if (opt.log) *opt.log << line << std::endl;
}

}  // namespace internal

// ---------------------------------------------------------------------------
// Corpus stage

struct CorpusSplit {
  Corpus ordinary;
  Corpus public_pool;
  Corpus eval;
};

inline CorpusSplit SplitCorpus(const Corpus& corpus, const ExperimentSpec& spec) {
  const std::int64_t need = spec.required_sentences();
  if (static_cast<std::int64_t>(corpus.size()) < need)
    throw InputError("corpus has " + std::to_string(corpus.size()) + " sentences, the split needs " +
                     std::to_string(need));
  const auto n_ord = spec.population.ordinary_devices * spec.population.sentences_per_device;
  const auto n_pub = spec.corpus.public_sentences;
  CorpusSplit s;
  s.ordinary.assign(corpus.begin(), corpus.begin() + n_ord);
  s.public_pool.assign(corpus.begin() + n_ord, corpus.begin() + n_ord + n_pub);
  s.eval.assign(corpus.begin() + n_ord + n_pub, corpus.begin() + need);
  return s;
}

// Writes corpus.txt and vocab.txt.
inline void RunCorpusStage(const ExperimentSpec& spec, const RunOptions& opt = {}) {
  RunStage(Stage::kCorpus, [&] {
    PrepareOutputDir(spec);
    Vocabulary vocab;
    Corpus corpus;
    if (spec.corpus.source == "generate") {
      Rng rng(spec.seed, streams::kCorpus);
      corpus = GenerateCorpus(spec.corpus.generator, rng);
      vocab = Vocabulary::Synthetic(spec.vocab_size());
    } else {
      vocab = BuildVocabulary(spec.corpus.path, spec.vocab_size());
      if (vocab.size() != spec.vocab_size())
        throw InputError("corpus " + spec.corpus.path + " has only " + std::to_string(vocab.size()) +
                         " distinct tokens, vocab_size is " + std::to_string(spec.vocab_size()));
      corpus = IngestCorpus(spec.corpus.path, vocab);
    }
    SplitCorpus(corpus, spec);
    WriteCorpus(corpus, vocab, ArtifactPath(spec.output_dir, artifacts::kCorpus));
    vocab.Save(ArtifactPath(spec.output_dir, artifacts::kVocab));
    internal::Log(opt, "corpus: " + std::to_string(corpus.size()) + " sentences, vocabulary " +
                           std::to_string(vocab.size()));
  });
}

inline Vocabulary LoadVocabulary(const ExperimentSpec& spec) {
  Vocabulary v = Vocabulary::Load(ArtifactPath(spec.output_dir, artifacts::kVocab));
  if (v.size() != spec.vocab_size())
    throw InputError("vocabulary file has " + std::to_string(v.size()) + " entries, spec says " +
                     std::to_string(spec.vocab_size()));
  return v;
}

inline Corpus LoadCorpus(const ExperimentSpec& spec, const Vocabulary& vocab) {
  return IngestCorpus(ArtifactPath(spec.output_dir, artifacts::kCorpus), vocab);
}

// ---------------------------------------------------------------------------
// Population stage

// Text layout: a header line, then per device "device <id> <kind> <count>"
// followed by <count> lines of token ids.
inline void WritePopulation(const std::vector<Device>& devices, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write population " + path);
  out << "fedmem-population 1 " << devices.size() << '\n';
  for (const auto& d : devices) {
    out << "device " << d.id << ' '
        << (d.kind == DeviceKind::kSynthetic ? "synthetic" : "ordinary") << ' '
        << d.sentences.size() << '\n';
    for (const auto& s : d.sentences) {
      for (std::size_t i = 0; i < s.size(); ++i) out << (i ? " " : "") << s[i];
      out << '\n';
    }
  }
}

inline std::vector<Device> ReadPopulation(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read population " + path);
  std::string magic;
  int version = 0;
  std::size_t count = 0;
  if (!(in >> magic >> version >> count) || magic != "fedmem-population" || version != 1)
    throw InputError(path + " is not a population file");
  std::vector<Device> devices(count);
  std::string line;
  std::getline(in, line);
  for (auto& d : devices) {
    std::string tag, kind;
    std::size_t n = 0;
    if (!std::getline(in, line)) throw InputError("truncated population file " + path);
    std::istringstream head(line);
    if (!(head >> tag >> d.id >> kind >> n) || tag != "device")
      throw InputError("bad device header in " + path + ": " + line);
    if (kind == "synthetic") d.kind = DeviceKind::kSynthetic;
    else if (kind == "ordinary") d.kind = DeviceKind::kOrdinary;
    else throw InputError("unknown device kind " + kind);
    d.sentences.resize(n);
    for (auto& s : d.sentences) {
      if (!std::getline(in, line)) throw InputError("truncated population file " + path);
      std::istringstream toks(line);
      for (TokenId t; toks >> t;) s.push_back(t);
    }
  }
  return devices;
}

// Writes population.txt (ordinary devices first, then synthetic ones) and
// canaries.json.
inline void RunPopulationStage(const ExperimentSpec& spec, const RunOptions& opt = {}) {
  RunStage(Stage::kPopulation, [&] {
    PrepareOutputDir(spec);
    const Vocabulary vocab = LoadVocabulary(spec);
    const Corpus corpus = LoadCorpus(spec, vocab);
    CorpusSplit split = SplitCorpus(corpus, spec);
    Rng canary_rng(spec.seed, streams::kCanaries);
    std::vector<Canary> canaries =
        GenerateCanaries(spec.vocab_size(), spec.population.canary_grid, canary_rng, &corpus);
    std::vector<Device> devices =
        BuildOrdinaryDevices(std::move(split.ordinary), spec.population.ordinary_devices,
                             spec.population.sentences_per_device, 0);
    Rng fill_rng(spec.seed, streams::kPopulation);
    auto synthetic = BuildSyntheticDevices(canaries, split.public_pool, fill_rng,
                                           spec.population.ordinary_devices);
    for (auto& d : synthetic) devices.push_back(std::move(d));
    WritePopulation(devices, ArtifactPath(spec.output_dir, artifacts::kPopulation));
    WriteCanaryManifest(canaries, vocab, ArtifactPath(spec.output_dir, artifacts::kCanaries));
    internal::Log(opt, "population: " + std::to_string(devices.size()) + " devices, " +
                           std::to_string(synthetic.size()) + " synthetic, " +
                           std::to_string(canaries.size()) + " canaries");
  });
}

inline Population LoadPopulation(const ExperimentSpec& spec) {
  std::vector<Device> devices = ReadPopulation(ArtifactPath(spec.output_dir, artifacts::kPopulation));
  CanaryManifest manifest = ReadCanaryManifest(ArtifactPath(spec.output_dir, artifacts::kCanaries));
  if (manifest.vocab_size != spec.vocab_size())
    throw InputError("canary manifest vocabulary does not match the experiment spec");
  if (static_cast<std::int64_t>(devices.size()) != spec.total_devices())
    throw InputError("population has " + std::to_string(devices.size()) + " devices, spec implies " +
                     std::to_string(spec.total_devices()));
  return Population(std::move(devices), std::move(manifest.canaries),
                    spec.population.pace_steering, spec.seed);
}

// ---------------------------------------------------------------------------
// Training stage

struct Evaluation {
  double loss = 0.0;  // mean per-token cross-entropy
  double top1_recall = 0.0;
};

inline Evaluation Evaluate(const ModelParams& params, const std::vector<TokenSequence>& sentences) {
  if (sentences.empty()) throw InputError("evaluation set is empty");
  constexpr std::size_t kChunk = 256;
  double total = 0.0;
  std::int64_t targets = 0;
  for (std::size_t i = 0; i < sentences.size(); i += kChunk) {
    const std::vector<TokenSequence> part(sentences.begin() + i,
                                          sentences.begin() + std::min(sentences.size(), i + kChunk));
    const auto lg = ComputeLossAndGradient(params, SequenceBatch::FromSentences(part), LossReduction::kSum);
    total += lg.loss;
    targets += lg.num_targets;
  }
  return {total / static_cast<double>(targets), TopKRecall(params, sentences, 1)};
}

struct TrainingOutcome {
  std::int64_t rounds = 0;
  double final_loss = std::nan("");  // training loss of the last round
  double mean_fraction_clipped = 0.0;
  std::vector<double> fraction_clipped;
  Evaluation eval;
  double synthetic_participation = 0.0;  // mean rounds joined per device
  double ordinary_participation = 0.0;
};

inline nlohmann::json OutcomeJson(const TrainingOutcome& o) {
  return {{"rounds", o.rounds},
          {"final_loss", internal::FiniteOrNull(o.final_loss)},
          {"mean_fraction_clipped", o.mean_fraction_clipped},
          {"eval_loss", o.eval.loss},
          {"top1_recall", o.eval.top1_recall},
          {"synthetic_participation", o.synthetic_participation},
          {"ordinary_participation", o.ordinary_participation}};
}

inline ModelParams InitialModel(const ExperimentSpec& spec) {
  Rng rng(spec.seed, streams::kInit);
  return ModelParams::Random(spec.shape(), rng, spec.model.init_scale);
}

// Writes model.ckpt, metrics.csv (one row per round as it completes),
// optional periodic checkpoints, and training.json.
inline TrainingOutcome RunTrainStage(const ExperimentSpec& spec, const RunOptions& opt = {}) {
  return RunStage(Stage::kTrain, [&] {
    PrepareOutputDir(spec);
    const Vocabulary vocab = LoadVocabulary(spec);
    const CorpusSplit split = SplitCorpus(LoadCorpus(spec, vocab), spec);
    Population population = LoadPopulation(spec);
    TrainConfig config = spec.train;
    config.dp.population_size = static_cast<std::int64_t>(population.size());

    const std::string dir = spec.output_dir;
    std::ofstream metrics(ArtifactPath(dir, artifacts::kMetrics));
    if (!metrics) throw IoError("cannot write " + ArtifactPath(dir, artifacts::kMetrics));
    metrics << kMetricsCsvHeader << '\n';
    if (spec.training.checkpoint_every > 0)
      std::filesystem::create_directories(ArtifactPath(dir, artifacts::kCheckpointDir));

    TrainOptions topt;
    topt.num_threads = spec.training.num_threads;
    topt.on_round = [&](const RoundMetrics& m, const ModelParams& params) {
      metrics << MetricsCsvRow(m) << '\n';
      metrics.flush();
      const std::int64_t done = m.round + 1;
      if (spec.training.checkpoint_every > 0 && done % spec.training.checkpoint_every == 0) {
        char name[64];
        std::snprintf(name, sizeof(name), "round_%06lld.ckpt", static_cast<long long>(done));
        SaveCheckpoint(params, (std::filesystem::path(dir) / artifacts::kCheckpointDir / name).string());
      }
      if (opt.log && (done % opt.log_every == 0 || done == config.dp.rounds)) {
        char line[160];
        std::snprintf(line, sizeof(line),
                      "round %lld/%lld loss %.4f clipped %.2f update_norm %.4g eligible %lld",
                      static_cast<long long>(done), static_cast<long long>(config.dp.rounds), m.loss,
                      m.fraction_clipped, m.update_norm, static_cast<long long>(m.eligible));
        internal::Log(opt, line);
      }
    };
    TrainResult result = Train(InitialModel(spec), population, config, spec.seed, topt);
    if (!metrics) throw IoError("write error on " + ArtifactPath(dir, artifacts::kMetrics));
    SaveCheckpoint(result.params, ArtifactPath(dir, artifacts::kCheckpoint));

    TrainingOutcome out;
    out.rounds = config.dp.rounds;
    for (const auto& m : result.metrics) out.fraction_clipped.push_back(m.fraction_clipped);
    if (!result.metrics.empty()) {
      out.final_loss = result.metrics.back().loss;
      double s = 0;
      for (double f : out.fraction_clipped) s += f;
      out.mean_fraction_clipped = s / static_cast<double>(out.fraction_clipped.size());
    }
    out.eval = Evaluate(result.params, split.eval);
    if (population.CountKind(DeviceKind::kSynthetic) > 0)
      out.synthetic_participation = population.MeanParticipations(DeviceKind::kSynthetic);
    if (population.CountKind(DeviceKind::kOrdinary) > 0)
      out.ordinary_participation = population.MeanParticipations(DeviceKind::kOrdinary);
    WriteJsonFile(OutcomeJson(out), ArtifactPath(dir, artifacts::kTraining));
    char line[128];
    std::snprintf(line, sizeof(line), "eval: loss %.4f top-1 recall %.4f", out.eval.loss,
                  out.eval.top1_recall);
    internal::Log(opt, line);
    return out;
  });
}

// ---------------------------------------------------------------------------
// Audit stage

// Writes audit.csv and audit_table.txt for the checkpoint in the output dir.
inline AuditReport RunAuditStage(const ExperimentSpec& spec, const RunOptions& opt = {}) {
  return RunStage(Stage::kAudit, [&] {
    PrepareOutputDir(spec);
    const ModelParams params = LoadCheckpoint(ArtifactPath(spec.output_dir, artifacts::kCheckpoint));
    const CanaryManifest manifest =
        ReadCanaryManifest(ArtifactPath(spec.output_dir, artifacts::kCanaries));
    if (manifest.vocab_size != params.shape().vocab_size)
      throw InputError("checkpoint vocabulary does not match the canary manifest");
    Rng refs(spec.seed, streams::kAuditReferences);
    const AuditReport report = AuditCanaries(params, manifest.canaries, spec.audit.settings, refs);
    WriteTextFile(AuditCsv(report), ArtifactPath(spec.output_dir, artifacts::kAudit));
    WriteTextFile(AuditTable(report), ArtifactPath(spec.output_dir, artifacts::kAuditTable));
    internal::Log(opt, "audit:\n" + AuditTable(report));
    return report;
  });
}

// ---------------------------------------------------------------------------
// Accounting stage

struct AccountingReport {
  AccountingQuery query;
  DpGuarantee guarantee;
  double sigma = 0.0;
};

inline AccountingReport Account(const AccountingQuery& query) {
  AccountingReport r;
  r.query = query;
  if (query.rounds == 0) {
    // Nothing data-dependent is released.
    r.guarantee = {0.0, query.delta, 0.0};
  } else if (query.noise_multiplier == 0.0) {
    r.guarantee = {std::numeric_limits<double>::infinity(), query.delta, 0.0};
  } else {
    r.guarantee = ComputeGuarantee(query);
  }
  return r;
}

inline AccountingQuery QueryFromSpec(const ExperimentSpec& spec) {
  AccountingQuery q;
  q.population_size = spec.total_devices();
  q.round_size = spec.train.dp.round_size;
  q.noise_multiplier = spec.train.dp.noise_multiplier;
  q.rounds = spec.train.dp.rounds;
  q.delta = spec.accounting.delta > 0 ? spec.accounting.delta
                                      : PolynomialDelta(q.population_size, spec.accounting.delta_exponent);
  q.scheme = spec.accounting.scheme;
  return q;
}

inline nlohmann::json AccountingJson(const AccountingReport& r) {
  return {{"population_size", r.query.population_size},
          {"round_size", r.query.round_size},
          {"noise_multiplier", r.query.noise_multiplier},
          {"rounds", r.query.rounds},
          {"scheme", internal::SchemeName(r.query.scheme)},
          {"sigma", r.sigma},
          {"delta", r.query.delta},
          {"epsilon", internal::FiniteOrNull(r.guarantee.epsilon)},
          {"order", r.guarantee.order}};
}

inline AccountingReport RunAccountStage(const ExperimentSpec& spec, const RunOptions& opt = {}) {
  return RunStage(Stage::kAccount, [&] {
    PrepareOutputDir(spec);
    AccountingReport r = Account(QueryFromSpec(spec));
    DpConfig dp = spec.train.dp;
    dp.population_size = spec.total_devices();
    r.sigma = dp.sigma();
    WriteJsonFile(AccountingJson(r), ArtifactPath(spec.output_dir, artifacts::kAccounting));
    char line[160];
    std::snprintf(line, sizeof(line), "accounting: (%.4g, %.3g)-DP at order %g", r.guarantee.epsilon,
                  r.query.delta, r.guarantee.order);
    internal::Log(opt, line);
    return r;
  });
}

inline std::string EpsilonTableCsv(const std::vector<EpsilonTableRow>& rows) {
  std::ostringstream out;
  out << "population_size,delta,epsilon,order\n";
  for (const auto& r : rows)
    out << r.population_size << ',' << FormatDouble(r.delta) << ',' << FormatDouble(r.epsilon) << ','
        << r.order << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// Whole runs

struct RunSummary {
  std::string status = "ok";
  TrainingOutcome training;
  std::optional<AccountingReport> accounting;
  std::optional<AuditReport> audit;
};

inline constexpr const char* kSummaryCsvHeader =
    "status,rounds,final_loss,eval_loss,top1_recall,mean_fraction_clipped,epsilon,delta";

inline std::string SummaryCsvRow(const RunSummary& s) {
  std::ostringstream out;
  out << s.status << ',' << s.training.rounds << ',' << FormatDouble(s.training.final_loss) << ','
      << FormatDouble(s.training.eval.loss) << ',' << FormatDouble(s.training.eval.top1_recall) << ','
      << FormatDouble(s.training.mean_fraction_clipped) << ',';
  if (s.accounting)
    out << FormatDouble(s.accounting->guarantee.epsilon) << ',' << FormatDouble(s.accounting->query.delta);
  else
    out << ',';
  return out.str();
}

// Every stage in order, then summary.csv and manifest.json. The manifest
// records seed, config hash and wall time per stage.
inline RunSummary RunExperiment(const ExperimentSpec& spec, const RunOptions& opt = {}) {
  spec.Validate();
  const auto start = std::chrono::steady_clock::now();
  nlohmann::json stages = nlohmann::json::array();
  auto timed = [&](Stage stage, auto&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    stages.push_back({{"stage", StageName(stage)},
                      {"seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()}});
  };
  RunSummary summary;
  timed(Stage::kCorpus, [&] { RunCorpusStage(spec, opt); });
  timed(Stage::kPopulation, [&] { RunPopulationStage(spec, opt); });
  timed(Stage::kTrain, [&] { summary.training = RunTrainStage(spec, opt); });
  if (spec.audit.enabled) timed(Stage::kAudit, [&] { summary.audit = RunAuditStage(spec, opt); });
  if (spec.accounting.enabled)
    timed(Stage::kAccount, [&] { summary.accounting = RunAccountStage(spec, opt); });
  WriteTextFile(std::string(kSummaryCsvHeader) + "\n" + SummaryCsvRow(summary) + "\n",
                ArtifactPath(spec.output_dir, artifacts::kSummary));
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  WriteJsonFile({{"schema_version", kSpecSchemaVersion},
                 {"seed", spec.seed},
                 {"config_hash", ConfigHash(spec)},
                 {"wall_time_seconds", wall},
                 {"stages", stages}},
                ArtifactPath(spec.output_dir, artifacts::kManifest));
  return summary;
}

// ---------------------------------------------------------------------------
// Sweeps

struct SweepSpec {
  int schema_version = kSpecSchemaVersion;
  ExperimentSpec base;
  // Dotted spec keys and the values each takes; points are the cross product.
  std::vector<std::pair<std::string, std::vector<nlohmann::json>>> overrides;
  int workers = 1;
  std::string output_dir = "sweep";

  void Validate() const {
    if (schema_version != kSpecSchemaVersion)
      throw ConfigError("unsupported sweep schema_version " + std::to_string(schema_version));
    if (!base.public_corpus)
      throw ConfigError("sweeps run only on public corpora; set public_corpus in the base spec");
    if (workers < 1) throw ConfigError("sweep workers must be positive");
    const nlohmann::json doc = SpecToJson(base);
    for (const auto& [key, values] : overrides) {
      if (values.empty()) throw ConfigError("sweep key " + key + " has no values");
      if (key == "output_dir") throw ConfigError("sweeps assign output directories themselves");
      std::string pointer = "/" + key;
      std::replace(pointer.begin(), pointer.end(), '.', '/');
      if (!doc.contains(nlohmann::json::json_pointer(pointer)))
        throw ConfigError("sweep key " + key + " is not in the base spec");
    }
  }
};

struct SweepPoint {
  std::vector<std::pair<std::string, nlohmann::json>> assignment;
  ExperimentSpec spec;
  std::string error;  // set when the overrides do not form a valid spec
};

inline std::vector<SweepPoint> ExpandSweep(const SweepSpec& sweep) {
  sweep.Validate();
  std::vector<std::vector<std::pair<std::string, nlohmann::json>>> combos{{}};
  for (const auto& [key, values] : sweep.overrides) {
    std::vector<std::vector<std::pair<std::string, nlohmann::json>>> next;
    for (const auto& c : combos)
      for (const auto& v : values) {
        auto e = c;
        e.emplace_back(key, v);
        next.push_back(std::move(e));
      }
    combos = std::move(next);
  }
  std::vector<SweepPoint> points;
  for (std::size_t i = 0; i < combos.size(); ++i) {
    SweepPoint p;
    p.assignment = combos[i];
    p.spec = sweep.base;
    p.spec.output_dir = (std::filesystem::path(sweep.output_dir) / ("point_" + std::to_string(i))).string();
    try {
      p.spec = ApplyOverrides(p.spec, p.assignment);
    } catch (const Error& e) {
      p.error = e.what();
    }
    points.push_back(std::move(p));
  }
  return points;
}

inline SweepSpec SweepFromJson(const nlohmann::json& j, const std::string& base_dir = ".") {
  SweepSpec s;
  try {
    for (auto it = j.begin(); it != j.end(); ++it)
      if (it.key() != "schema_version" && it.key() != "base" && it.key() != "base_spec" &&
          it.key() != "overrides" && it.key() != "workers" && it.key() != "output_dir")
        throw ConfigError("unknown sweep key " + it.key());
    s.schema_version = j.value("schema_version", kSpecSchemaVersion);
    if (j.contains("base_spec"))
      s.base = LoadSpec((std::filesystem::path(base_dir) / j.at("base_spec").get<std::string>()).string());
    if (j.contains("base")) s.base = MergeSpec(s.base, j.at("base"));
    for (auto it = j.at("overrides").begin(); it != j.at("overrides").end(); ++it)
      s.overrides.emplace_back(it.key(), it.value().get<std::vector<nlohmann::json>>());
    s.workers = j.value("workers", 1);
    s.output_dir = j.value("output_dir", std::string("sweep"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed sweep: ") + e.what());
  }
  s.Validate();
  return s;
}

struct SweepResult {
  std::vector<SweepPoint> points;
  std::vector<RunSummary> summaries;
  std::vector<std::string> errors;  // empty string when the point succeeded
};

inline std::string AssignmentText(const std::vector<std::pair<std::string, nlohmann::json>>& a) {
  std::string out;
  for (const auto& [k, v] : a) {
    if (!out.empty()) out += ';';
    out += k + '=' + (v.is_string() ? v.get<std::string>() : v.dump());
  }
  return out;
}

inline std::string SweepSummaryCsv(const SweepResult& r) {
  std::ostringstream out;
  out << "point,overrides," << kSummaryCsvHeader << ",error\n";
  for (std::size_t i = 0; i < r.points.size(); ++i) {
    std::string err = r.errors[i];
    for (char& c : err)
      if (c == ',' || c == '\n') c = ' ';
    out << i << ',' << AssignmentText(r.points[i].assignment) << ',' << SummaryCsvRow(r.summaries[i])
        << ',' << err << '\n';
  }
  return out.str();
}

// Per-round fraction of clients clipped, one column per point.
inline std::string SweepClippedCsv(const SweepResult& r) {
  std::ostringstream out;
  out << "round";
  std::size_t rounds = 0;
  for (std::size_t i = 0; i < r.points.size(); ++i) {
    out << ",point_" << i;
    rounds = std::max(rounds, r.summaries[i].training.fraction_clipped.size());
  }
  out << '\n';
  for (std::size_t t = 0; t < rounds; ++t) {
    out << t;
    for (const auto& s : r.summaries) {
      out << ',';
      if (t < s.training.fraction_clipped.size()) out << FormatDouble(s.training.fraction_clipped[t]);
    }
    out << '\n';
  }
  return out.str();
}

// Runs every point, up to `workers` at a time. A failing point is recorded
// and the rest continue.
inline SweepResult RunSweep(const SweepSpec& sweep, const RunOptions& opt = {}) {
  return RunStage(Stage::kSweep, [&] {
    SweepResult r;
    r.points = ExpandSweep(sweep);
    if (r.points.empty()) throw ConfigError("sweep has no points");
    r.summaries.resize(r.points.size());
    r.errors.resize(r.points.size());
    std::filesystem::create_directories(sweep.output_dir);
    std::atomic<std::size_t> next{0};
    std::mutex log_mutex;
    auto worker = [&] {
      for (std::size_t i; (i = next++) < r.points.size();) {
        {
          std::lock_guard<std::mutex> lock(log_mutex);
          internal::Log(opt, "sweep point " + std::to_string(i) + ": " +
                                 AssignmentText(r.points[i].assignment));
        }
        try {
          if (!r.points[i].error.empty()) throw ConfigError(r.points[i].error);
          r.summaries[i] = RunExperiment(r.points[i].spec, {});
        } catch (const std::exception& e) {
          r.summaries[i].status = "failed";
          r.errors[i] = e.what();
        }
      }
    };
    std::vector<std::thread> threads;
    const int n = std::min<int>(sweep.workers, static_cast<int>(r.points.size()));
    for (int w = 1; w < n; ++w) threads.emplace_back(worker);
    worker();
    for (auto& t : threads) t.join();
    WriteTextFile(SweepSummaryCsv(r), ArtifactPath(sweep.output_dir, artifacts::kSweepSummary));
    WriteTextFile(SweepClippedCsv(r), ArtifactPath(sweep.output_dir, artifacts::kSweepClipped));
    return r;
  });
}

// ---------------------------------------------------------------------------
// Report

// Renders whatever artifacts `dir` holds; absent sections read "not run".
inline std::string EmitReport(const std::string& dir) {
  return RunStage(Stage::kReport, [&] {
    const char* known[] = {artifacts::kTraining, artifacts::kAudit, artifacts::kAccounting,
                           artifacts::kSweepSummary};
    bool any = false;
    for (const char* k : known) any = any || HasArtifact(dir, k);
    if (!any)
      throw IoError("no artifacts in " + dir + " (expected training.json, audit.csv, accounting.json or " +
                    "sweep_summary.csv)");
    std::ostringstream out;
    out << "# Run report: " << dir << "\n\n";
    if (HasArtifact(dir, artifacts::kManifest)) {
      const auto m = ReadJsonFile(ArtifactPath(dir, artifacts::kManifest));
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%.1f", m.at("wall_time_seconds").get<double>());
      out << "seed " << m.at("seed").get<std::uint64_t>() << ", config hash "
          << m.at("config_hash").get<std::string>() << ", wall time " << buf << " s\n\n";
    }

    out << "## Training\n\n";
    if (HasArtifact(dir, artifacts::kTraining)) {
      const auto t = ReadJsonFile(ArtifactPath(dir, artifacts::kTraining));
      char buf[256];
      std::snprintf(buf, sizeof(buf),
                    "rounds: %lld\nfinal training loss: %s\nevaluation loss: %.4f\n"
                    "top-1 recall: %.4f\nmean fraction clipped: %.4f\n"
                    "participations per device: synthetic %.2f, ordinary %.2f\n",
                    static_cast<long long>(t.at("rounds").get<std::int64_t>()),
                    t.at("final_loss").is_null() ? "n/a" : FormatDouble(t.at("final_loss").get<double>()).c_str(),
                    t.at("eval_loss").get<double>(), t.at("top1_recall").get<double>(),
                    t.at("mean_fraction_clipped").get<double>(),
                    t.at("synthetic_participation").get<double>(),
                    t.at("ordinary_participation").get<double>());
      out << "```\n" << buf << "```\n\n";
    } else {
      out << "not run\n\n";
    }

    out << "## Memorization audit\n\n";
    if (HasArtifact(dir, artifacts::kAudit)) {
      int width = 5;
      if (HasArtifact(dir, artifacts::kSpec))
        width = ReadJsonFile(ArtifactPath(dir, artifacts::kSpec)).at("audit").at("beam_width").get<int>();
      const AuditReport a = ParseAuditCsv(ReadTextFile(ArtifactPath(dir, artifacts::kAudit)), width);
      out << "```\n" << AuditTable(a) << "```\n\n";
    } else {
      out << "not run\n\n";
    }

    out << "## Privacy accounting\n\n";
    if (HasArtifact(dir, artifacts::kAccounting)) {
      const auto a = ReadJsonFile(ArtifactPath(dir, artifacts::kAccounting));
      char buf[320];
      const std::string eps =
          a.at("epsilon").is_null() ? "inf" : FormatDouble(a.at("epsilon").get<double>());
      std::snprintf(buf, sizeof(buf),
                    "N = %lld, m = %lld, z = %g, T = %lld, sigma = %g (%s sampling)\n"
                    "guarantee: (%s, %.3g)-DP at order %g\n",
                    static_cast<long long>(a.at("population_size").get<std::int64_t>()),
                    static_cast<long long>(a.at("round_size").get<std::int64_t>()),
                    a.at("noise_multiplier").get<double>(),
                    static_cast<long long>(a.at("rounds").get<std::int64_t>()), a.at("sigma").get<double>(),
                    a.at("scheme").get<std::string>().c_str(), eps.c_str(), a.at("delta").get<double>(),
                    a.at("order").get<double>());
      out << "```\n" << buf << "```\n\n";
    } else {
      out << "not run\n\n";
    }

    if (HasArtifact(dir, artifacts::kSweepSummary)) {
      out << "## Sweep\n\n```\n" << ReadTextFile(ArtifactPath(dir, artifacts::kSweepSummary)) << "```\n";
    }
    const std::string text = out.str();
    WriteTextFile(text, ArtifactPath(dir, artifacts::kReport));
    return text;
  });
}

}  // namespace fedmem
