#pragma once

// End-to-end runs: corpus -> task sequence -> learner, one train/evaluate
// cycle per task, then report, curve and checkpoints under the output dir.

#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "conpet/cache.hpp"
#include "conpet/config.hpp"
#include "conpet/core_data.hpp"
#include "conpet/dataset.hpp"
#include "conpet/dynamic_conpet.hpp"
#include "conpet/encoder.hpp"
#include "conpet/eval.hpp"
#include "conpet/learner.hpp"
#include "conpet/static_conpet.hpp"

namespace conpet {

inline TrainingOptions training_options(const RunConfig& c) {
  TrainingOptions t;
  t.rank = c.rank;
  t.adam.learning_rate = c.learning_rate;
  t.adam.weight_decay = c.weight_decay;
  t.lr_overrides = c.lr_overrides;
  t.max_epochs = c.max_epochs;
  t.early_stopping = c.early_stopping;
  t.seed = c.training_seed();
  return t;
}

inline std::unique_ptr<ContinualLearner> make_learner(const RunConfig& c, const Encoder& encoder,
                                                      LogitCache* cache) {
  if (c.method == "static-dynamic-replay" || c.method == "static-fixed-memory") {
    StaticOptions options;
    options.training = training_options(c);
    options.plan = c.replay_plan();
    options.mode = c.method == "static-fixed-memory" ? StaticMode::fixed_memory : StaticMode::dynamic_replay;
    options.per_type_quota = c.per_type_quota;
    return std::make_unique<StaticConPet>(encoder, options);
  }
  DynamicOptions options;
  options.training = training_options(c);
  options.plan = c.replay_plan();
  options.selection.num_active = c.num_active;
  options.selection.alpha = c.alpha;
  options.selection.select_all = c.method == "wo-sel";
  options.limitless = c.method == "limitless";
  if (c.method != "dynamic" && c.method != "wo-sel" && c.method != "limitless") {
    throw ConfigError("unknown method '" + c.method + "'");
  }
  return std::make_unique<DynamicConPet>(encoder, options, cache);
}

/// Trains every task in order and evaluates on the cumulative test sets after each step.
inline std::vector<StepReport> run_sequence(ContinualLearner& learner, const PreparedSequence& sequence,
                                            const Encoder& encoder, const LogitCache* cache,
                                            std::size_t eval_threads = 1,
                                            const std::function<void(const StepReport&)>& on_step = {}) {
  std::vector<StepReport> reports;
  for (std::size_t k = 1; k <= sequence.num_tasks(); ++k) {
    learner.train_task(sequence, k);
    StepCounters counters = learner.last_step_counters();
    const std::uint64_t calls_before = encoder.forward_calls();
    const std::uint64_t hits_before = cache ? cache->hits() : 0;
    const auto tallies =
        evaluate_views(PreparedSequence::views(sequence.test, 1, k),
                       [&](const Instance& item) { return learner.predict(item); }, eval_threads);
    counters.eval_encoder_calls = encoder.forward_calls() - calls_before;
    counters.cache_hits = cache ? cache->hits() - hits_before : 0;
    reports.push_back(make_step_report(std::string(learner.method()), k, tallies, counters));
    if (on_step) on_step(reports.back());
  }
  return reports;
}

inline TaskSequence build_sequence(const RunConfig& c) {
  auto examples = load_corpus(c.corpus_path, c.corpus_format);
  std::vector<SchemaCluster> clusters;
  if (!c.split_map.empty()) {
    clusters = load_split_config(c.split_map);
  } else {
    try {
      clusters = split_tasks(label_set(examples), c.num_clusters, c.effective_split_seed());
    } catch (const InvalidArgument& e) {
      throw ConfigError(std::string("split.num_clusters: ") + e.what());
    }
  }
  if (c.num_active > clusters.size() && c.method != "wo-sel") {
    throw ConfigError("selection.num_active exceeds the task count");
  }
  return build_task_sequence(std::move(examples), std::move(clusters), c.ratios, c.effective_split_seed());
}

inline std::string checkpoint_name(const PetModule& module, std::string_view method) {
  if (method.starts_with("static")) return "static.pet";
  return module.module_id() == 0 ? "selector.pet" : "module_" + std::to_string(module.module_id()) + ".pet";
}

struct RunOutcome {
  std::vector<StepReport> reports;
  std::filesystem::path report_path;
};

/// Validates, runs, and writes `report.jsonl`, `curve.csv`, `config.json` and
/// `checkpoints/` under the output directory. Nothing is written when
/// validation fails.
inline RunOutcome run(const RunConfig& c, std::ostream* progress = nullptr) {
  if (const auto violations = validate_config(c); !violations.empty()) {
    std::string message = "invalid config:";
    for (const Violation& v : violations) message += "\n  " + v.message();
    throw ConfigError(message);
  }
  const TaskSequence sequence = build_sequence(c);
  const Encoder encoder(c.encoder_config());
  const PreparedSequence prepared = prepare(sequence, encoder, c.task_kind, c.max_input_tokens);

  std::filesystem::create_directories(c.output_dir);
  std::unique_ptr<LogitCache> cache;
  if (!c.cache_path.empty()) {
    // Entries are keyed by module id only, so a log from another run would be stale.
    std::filesystem::remove(c.cache_path);
    cache = std::make_unique<LogitCache>(c.cache_path);
  } else {
    cache = std::make_unique<LogitCache>();
  }
  auto learner = make_learner(c, encoder, cache.get());

  RunOutcome outcome;
  outcome.report_path = c.output_dir / "report.jsonl";
  std::ofstream report(outcome.report_path, std::ios::trunc);
  outcome.reports = run_sequence(*learner, prepared, encoder, cache.get(), c.eval_threads,
                                 [&](const StepReport& step) {
                                   report << to_json(step).dump() << '\n';
                                   report.flush();
                                   if (progress) {
                                     *progress << "step " << step.step << "  whole "
                                               << round_to(step.whole_acc * 100.0, 2) << "  average "
                                               << round_to(step.avg_acc * 100.0, 2) << '\n';
                                   }
                                 });
  std::ofstream curve(c.output_dir / "curve.csv", std::ios::trunc);
  write_curve_csv(curve, outcome.reports);
  std::ofstream resolved(c.output_dir / "config.json", std::ios::trunc);
  resolved << to_json(c).dump(2) << '\n';
  const auto checkpoints = c.output_dir / "checkpoints";
  std::filesystem::create_directories(checkpoints);
  for (const PetModule* module : learner->modules()) {
    save_checkpoint(checkpoints / checkpoint_name(*module, learner->method()), *module);
  }
  return outcome;
}

}  // namespace conpet
