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

// fedmem: command-line driver for corpus generation, population building,
// DP-FedAvg training, memorization audits, privacy accounting and sweeps.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fedmem/harness.hpp"

namespace {

using fedmem::ExperimentSpec;

struct CommonFlags {
  std::string spec_path;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::vector<std::string> sets;
  bool quiet = false;
};

void AddCommonFlags(CLI::App* app, CommonFlags& f) {
  app->add_option("-s,--spec", f.spec_path, "experiment spec (JSON); defaults apply to omitted keys");
  app->add_option("-o,--out", f.out, "output directory (spec key output_dir)");
  app->add_option("--seed", f.seed, "root seed (spec key seed)");
  app->add_option("--threads", f.threads, "client threads (spec key training.num_threads)");
  app->add_option("--set", f.sets, "override any spec key, e.g. --set dp.rounds=10")
      ->type_name("KEY=VALUE");
  app->add_flag("-q,--quiet", f.quiet, "no progress output");
}

// Spec file, then flags; flags win.
ExperimentSpec ResolveSpec(const CommonFlags& f) {
  const ExperimentSpec spec = f.spec_path.empty() ? ExperimentSpec{} : fedmem::LoadSpec(f.spec_path);
  std::vector<std::pair<std::string, nlohmann::json>> kv;
  for (const auto& s : f.sets) kv.push_back(fedmem::ParseAssignment(s));
  if (!f.out.empty()) kv.emplace_back("output_dir", f.out);
  if (f.seed) kv.emplace_back("seed", *f.seed);
  if (f.threads) kv.emplace_back("training.num_threads", *f.threads);
  return fedmem::ApplyOverrides(spec, kv);
}

fedmem::RunOptions Options(const CommonFlags& f) {
  fedmem::RunOptions opt;
  if (!f.quiet) opt.log = &std::cerr;
  return opt;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Differentially private federated language-model training and memorization audits"};
  app.require_subcommand(1);

  CommonFlags common;
  auto* gen = app.add_subcommand("gen-corpus", "generate or ingest the corpus");
  auto* pop = app.add_subcommand("build-population", "build devices and canaries from the corpus");
  auto* train = app.add_subcommand("train", "train with DP-FedAvg on the built population");
  auto* audit = app.add_subcommand("audit", "rank and extract canaries from the trained model");
  auto* run = app.add_subcommand("run", "all stages, then summary and manifest");
  auto* spec_cmd = app.add_subcommand("spec", "print the resolved spec");
  for (auto* s : {gen, pop, train, audit, run, spec_cmd}) AddCommonFlags(s, common);

  auto* account = app.add_subcommand("account", "privacy guarantee for a spec or for explicit N, m, z, T");
  AddCommonFlags(account, common);
  std::optional<std::int64_t> acc_n, acc_m, acc_t;
  std::optional<double> acc_z, acc_delta;
  double acc_delta_exp = 1.1;
  std::string acc_scheme = "without_replacement";
  bool acc_table = false;
  std::vector<std::int64_t> acc_populations{2'000'000, 3'000'000, 4'000'000, 5'000'000, 10'000'000};
  account->add_option("-N,--population", acc_n, "population size");
  account->add_option("-m,--round-size", acc_m, "clients per round");
  account->add_option("-z,--noise-multiplier", acc_z, "noise multiplier");
  account->add_option("-T,--rounds", acc_t, "rounds");
  account->add_option("--delta", acc_delta, "target delta (default N^-delta_exponent)");
  account->add_option("--delta-exponent", acc_delta_exp, "delta = N^-exponent when --delta is absent");
  account->add_option("--scheme", acc_scheme, "without_replacement or poisson");
  account->add_flag("--table", acc_table, "CSV of epsilon across --populations");
  account->add_option("--populations", acc_populations, "population sizes for --table")->delimiter(',');

  auto* report = app.add_subcommand("report", "render a report from an output directory");
  std::string report_dir;
  report->add_option("dir", report_dir, "output directory")->required();

  auto* sweep = app.add_subcommand("sweep", "run a hyperparameter sweep");
  std::string sweep_path, sweep_out;
  std::optional<int> sweep_workers;
  bool sweep_quiet = false;
  sweep->add_option("sweep_spec", sweep_path, "sweep spec (JSON)")->required();
  sweep->add_option("-o,--out", sweep_out, "sweep output directory");
  sweep->add_option("--workers", sweep_workers, "points run concurrently");
  sweep->add_flag("-q,--quiet", sweep_quiet, "no progress output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : fedmem::kExitUsage;
  }

  try {
    if (*report) {
      std::cout << fedmem::EmitReport(report_dir);
      return fedmem::kExitOk;
    }
    if (*sweep) {
      const std::string base_dir = std::filesystem::path(sweep_path).parent_path().string();
      fedmem::SweepSpec s = fedmem::SweepFromJson(fedmem::ReadJsonFile(sweep_path),
                                                  base_dir.empty() ? "." : base_dir);
      if (!sweep_out.empty()) s.output_dir = sweep_out;
      if (sweep_workers) s.workers = *sweep_workers;
      s.Validate();
      fedmem::RunOptions opt;
      if (!sweep_quiet) opt.log = &std::cerr;
      const auto r = fedmem::RunSweep(s, opt);
      std::cout << fedmem::SweepSummaryCsv(r);
      return fedmem::kExitOk;
    }
    if (*account && acc_table) {
      fedmem::RunStage(fedmem::Stage::kAccount, [&] {
        std::cout << fedmem::EpsilonTableCsv(fedmem::EpsilonTable(
            acc_populations, acc_m.value_or(20000), acc_z.value_or(0.8), acc_t.value_or(2000),
            acc_delta_exp));
      });
      return fedmem::kExitOk;
    }
    if (*account && (acc_n || acc_m || acc_z || acc_t)) {
      if (!(acc_n && acc_m && acc_z && acc_t))
        throw fedmem::ConfigError("explicit accounting needs all of -N, -m, -z and -T");
      fedmem::RunStage(fedmem::Stage::kAccount, [&] {
        fedmem::AccountingQuery q{*acc_n, *acc_m, *acc_z, *acc_t,
                                  acc_delta.value_or(fedmem::PolynomialDelta(*acc_n, acc_delta_exp)),
                                  fedmem::internal::ParseScheme(acc_scheme)};
        const auto r = fedmem::Account(q);
        std::printf("epsilon %s\ndelta %s\norder %g\n", fedmem::FormatDouble(r.guarantee.epsilon).c_str(),
                    fedmem::FormatDouble(q.delta).c_str(), r.guarantee.order);
      });
      return fedmem::kExitOk;
    }

    const ExperimentSpec spec = ResolveSpec(common);
    const fedmem::RunOptions opt = Options(common);
    if (*spec_cmd) {
      std::cout << fedmem::SpecToJson(spec).dump(2) << '\n';
    } else if (*gen) {
      fedmem::RunCorpusStage(spec, opt);
    } else if (*pop) {
      fedmem::RunPopulationStage(spec, opt);
    } else if (*train) {
      fedmem::RunTrainStage(spec, opt);
    } else if (*audit) {
      std::cout << fedmem::AuditTable(fedmem::RunAuditStage(spec, opt));
    } else if (*account) {
      const auto r = fedmem::RunAccountStage(spec, opt);
      std::cout << fedmem::AccountingJson(r).dump(2) << '\n';
    } else if (*run) {
      fedmem::RunExperiment(spec, opt);
      std::cout << fedmem::EmitReport(spec.output_dir);
    }
    return fedmem::kExitOk;
  } catch (const fedmem::StageError& e) {
    std::cerr << "fedmem: " << e.what() << '\n';
    return e.exit_code();
  } catch (const fedmem::Error& e) {
    std::cerr << "fedmem: " << e.what() << '\n';
    return e.kind() == fedmem::ErrorKind::kConfig ? fedmem::kExitUsage : 1;
  } catch (const std::exception& e) {
    std::cerr << "fedmem: " << e.what() << '\n';
    return 1;
  }
}
