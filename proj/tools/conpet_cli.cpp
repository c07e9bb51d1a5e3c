// conpet: run continual-learning sequences from a JSON config.
//
//   conpet run --config cfg.json [--seed N] [--out DIR] [--cache PATH] [--method NAME]
//   conpet validate --config cfg.json
//   conpet synth --out DIR [--tasks N] [--types N] [--per-type N] [--seed N] [--confusable]
//
// Exit codes: 0 success, 1 other failure, 2 invalid config (nothing written),
// 3 numerical failure.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "conpet/conpet.hpp"

namespace {

constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

struct RunFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string cache;
  std::string method;
};

conpet::RunConfig resolve(const RunFlags& flags) {
  conpet::RunConfig c = conpet::load_config(flags.config);
  if (flags.seed) c.seed = *flags.seed;
  if (!flags.out.empty()) c.output_dir = flags.out;
  if (!flags.cache.empty()) c.cache_path = flags.cache;
  if (!flags.method.empty()) c.method = conpet::canonical_method(flags.method);
  return c;
}

int report_violations(const conpet::RunConfig& c) {
  const auto violations = conpet::validate_config(c);
  for (const auto& v : violations) std::cerr << "config error: " << v.message() << '\n';
  return violations.empty() ? 0 : kExitConfig;
}

int cmd_run(const RunFlags& flags) {
  const conpet::RunConfig c = resolve(flags);
  if (const int rc = report_violations(c)) return rc;
  const auto outcome = conpet::run(c, &std::cout);
  std::cout << "report: " << outcome.report_path.string() << '\n';
  return 0;
}

int cmd_validate(const RunFlags& flags) {
  const conpet::RunConfig c = resolve(flags);
  if (const int rc = report_violations(c)) return rc;
  std::cout << "ok\n";
  return 0;
}

struct SynthFlags {
  std::string out;
  conpet::SyntheticSpec spec;
  bool relation = false;
};

int cmd_synth(SynthFlags flags) {
  if (flags.relation) flags.spec.kind = conpet::TaskKind::relation_extraction;
  const auto bench = conpet::make_synthetic(flags.spec);
  const std::filesystem::path dir = flags.out;
  std::filesystem::create_directories(dir);
  std::ofstream corpus(dir / "corpus.jsonl", std::ios::trunc);
  conpet::write_corpus(corpus, bench.examples);
  nlohmann::json split = nlohmann::json::object();
  for (const auto& cluster : bench.clusters) split[std::to_string(cluster.index)] = cluster.types;
  std::ofstream(dir / "split.json", std::ios::trunc) << split.dump(2) << '\n';
  std::cout << bench.examples.size() << " examples, " << bench.clusters.size() << " tasks -> "
            << dir.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual learning with task-specific PET modules"};
  app.require_subcommand(1);

  RunFlags run_flags;
  auto* run = app.add_subcommand("run", "train and evaluate a task sequence");
  run->add_option("--config", run_flags.config, "run config (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("--seed", run_flags.seed, "master seed override");
  run->add_option("--out", run_flags.out, "output directory override");
  run->add_option("--cache", run_flags.cache, "logit cache log path");
  run->add_option("--method", run_flags.method, "dynamic | static-dynamic-replay | static-fixed-memory | limitless | wo-sel");

  RunFlags validate_flags;
  auto* validate = app.add_subcommand("validate", "check a config without running it");
  validate->add_option("--config", validate_flags.config, "run config (JSON)")->required()->check(CLI::ExistingFile);
  validate->add_option("--method", validate_flags.method, "method override");

  SynthFlags synth_flags;
  auto* synth = app.add_subcommand("synth", "write a synthetic corpus and split map");
  synth->add_option("--out", synth_flags.out, "output directory")->required();
  synth->add_option("--tasks", synth_flags.spec.num_tasks, "number of tasks");
  synth->add_option("--types", synth_flags.spec.types_per_task, "types per task");
  synth->add_option("--per-type", synth_flags.spec.examples_per_type, "examples per type");
  synth->add_option("--seed", synth_flags.spec.seed, "generator seed");
  synth->add_flag("--confusable", synth_flags.spec.confusable_pairs, "pair tasks with shared vocabulary");
  synth->add_flag("--relation", synth_flags.relation, "emit head/tail relation examples");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*run) return cmd_run(run_flags);
    if (*validate) return cmd_validate(validate_flags);
    if (*synth) return cmd_synth(synth_flags);
  } catch (const conpet::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const conpet::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitOther;
  }
  return kExitOther;
}
