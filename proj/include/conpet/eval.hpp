#pragma once

// Whole accuracy (pooled over every seen task's evaluation data) and average
// accuracy (unweighted mean of per-task accuracies), plus per-step reports.

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "conpet/core_data.hpp"
#include "conpet/errors.hpp"

namespace conpet {

struct TaskTally {
  std::size_t correct = 0;
  std::size_t total = 0;

  double accuracy() const {
    if (total == 0) throw InvalidArgument("accuracy of an empty task");
    return static_cast<double>(correct) / static_cast<double>(total);
  }
};

inline double whole_accuracy(std::span<const TaskTally> tallies) {
  std::size_t correct = 0;
  std::size_t total = 0;
  for (const TaskTally& t : tallies) {
    if (t.total == 0) throw InvalidArgument("empty task in the cumulative evaluation set");
    correct += t.correct;
    total += t.total;
  }
  if (total == 0) throw InvalidArgument("whole accuracy over no examples");
  return static_cast<double>(correct) / static_cast<double>(total);
}

inline double average_accuracy(std::span<const double> per_task_acc) {
  if (per_task_acc.empty()) throw InvalidArgument("average accuracy over no tasks");
  return std::accumulate(per_task_acc.begin(), per_task_acc.end(), 0.0) /
         static_cast<double>(per_task_acc.size());
}

/// Predictions keyed by example id, scored against the gold labels of the
/// cumulative evaluation views. Every example must have a prediction.
using PredictionMap = std::unordered_map<std::string, std::string>;

inline std::vector<TaskTally> tally(const PredictionMap& predictions,
                                    std::span<const std::span<const Example>> cumulative) {
  std::vector<TaskTally> tallies;
  for (const auto& task : cumulative) {
    TaskTally t;
    for (const Example& example : task) {
      const auto it = predictions.find(example.id);
      if (it == predictions.end()) throw InvalidArgument("no prediction for example " + example.id);
      t.correct += it->second == example.label ? 1 : 0;
      ++t.total;
    }
    tallies.push_back(t);
  }
  return tallies;
}

inline double whole_accuracy(const PredictionMap& predictions,
                             std::span<const std::span<const Example>> cumulative) {
  return whole_accuracy(tally(predictions, cumulative));
}

inline double round_to(double value, int decimals) {
  const double scale = std::pow(10.0, decimals);
  return std::round(value * scale) / scale;
}

struct StepCounters {
  std::uint64_t encoder_calls = 0;  // backbone forwards during training
  std::uint64_t validation_encoder_calls = 0;
  std::uint64_t eval_encoder_calls = 0;
  std::uint64_t cache_hits = 0;
  std::uint64_t batches_selector = 0;
  std::uint64_t batches_module = 0;
  std::uint64_t forced_examples = 0;  // examples routed during module training
  std::uint64_t forced_owner_active = 0;
};

struct StepReport {
  std::string method;
  std::size_t step = 0;
  double whole_acc = 0.0;
  double avg_acc = 0.0;
  std::vector<double> per_task_acc;
  StepCounters counters;
};

inline StepReport make_step_report(std::string method, std::size_t step,
                                   std::span<const TaskTally> tallies, StepCounters counters) {
  StepReport report;
  report.method = std::move(method);
  report.step = step;
  for (const TaskTally& t : tallies) report.per_task_acc.push_back(t.accuracy());
  report.whole_acc = whole_accuracy(tallies);
  report.avg_acc = average_accuracy(report.per_task_acc);
  report.counters = counters;
  return report;
}

/// One report record. Accuracies are rounded to 4 decimals.
inline nlohmann::json to_json(const StepReport& report) {
  nlohmann::json per_task = nlohmann::json::array();
  for (double acc : report.per_task_acc) per_task.push_back(round_to(acc, 4));
  const StepCounters& c = report.counters;
  return nlohmann::json{{"method", report.method},
                        {"step", report.step},
                        {"whole_acc", round_to(report.whole_acc, 4)},
                        {"avg_acc", round_to(report.avg_acc, 4)},
                        {"per_task_acc", per_task},
                        {"encoder_calls", c.encoder_calls},
                        {"validation_encoder_calls", c.validation_encoder_calls},
                        {"eval_encoder_calls", c.eval_encoder_calls},
                        {"cache_hits", c.cache_hits},
                        {"batches_selector", c.batches_selector},
                        {"batches_module", c.batches_module}};
}

inline void write_report_jsonl(std::ostream& out, std::span<const StepReport> reports) {
  for (const StepReport& report : reports) out << to_json(report).dump() << '\n';
}

/// Per-step curve for plotting: step,whole_acc,avg_acc as percentages with 2 decimals.
inline void write_curve_csv(std::ostream& out, std::span<const StepReport> reports) {
  out << "step,whole_acc,avg_acc\n";
  for (const StepReport& r : reports) {
    out << r.step << ',' << std::fixed << std::setprecision(2) << r.whole_acc * 100.0 << ','
        << r.avg_acc * 100.0 << '\n';
  }
  out << std::defaultfloat;
}

}  // namespace conpet
