#pragma once

// Dynamic replay: hierarchical sampling over the full history (old task id
// first, then an example of that task), a fixed old:new ratio per batch, and
// a batch budget that does not depend on the task index.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "conpet/errors.hpp"
#include "conpet/rng.hpp"

namespace conpet {

struct ReplayPlan {
  std::size_t batch_size = 8;
  std::size_t old_parts = 1;  // old:new ratio
  std::size_t new_parts = 1;
  std::size_t iter1 = 1000;  // selector batches per step
  std::size_t iter2 = 1000;  // task-module batches per step
  std::uint64_t seed = 0;
};

inline void validate(const ReplayPlan& plan) {
  if (plan.batch_size < 2) throw InvalidArgument("batch_size must be >= 2");
  if (plan.iter1 < 1 || plan.iter2 < 1) throw InvalidArgument("iter1 and iter2 must be >= 1");
  if (plan.old_parts < 1 || plan.new_parts < 1) throw InvalidArgument("ratio components must be positive");
}

enum class TrainingPhase { selector, task_module };

/// Batches allowed for one phase of one step. Independent of the task index.
inline std::size_t batch_budget(const ReplayPlan& plan, TrainingPhase phase) noexcept {
  return phase == TrainingPhase::selector ? plan.iter1 : plan.iter2;
}

/// Training share of a combined train+validation batch limit split train:valid.
inline std::size_t training_batches_from_limit(std::size_t total_limit, std::size_t train_parts = 4,
                                               std::size_t valid_parts = 1) {
  if (train_parts + valid_parts == 0) throw InvalidArgument("train:valid ratio must be positive");
  return total_limit * train_parts / (train_parts + valid_parts);
}

struct BatchSplit {
  std::size_t new_count = 0;
  std::size_t old_count = 0;
};

/// Old share rounded down, so an odd remainder goes to the new data.
inline BatchSplit batch_split(const ReplayPlan& plan, bool has_history) noexcept {
  if (!has_history) return {plan.batch_size, 0};
  const std::size_t old_count = plan.batch_size * plan.old_parts / (plan.old_parts + plan.new_parts);
  return {plan.batch_size - old_count, old_count};
}

template <typename T>
struct Batch {
  std::vector<const T*> new_part;
  std::vector<const T*> old_part;

  std::size_t size() const noexcept { return new_part.size() + old_part.size(); }
};

/// One hierarchical draw: uniform old task, then a uniform example within it.
template <typename T>
const T* sample_old(std::span<const std::span<const T>> history, Rng& rng,
                    std::size_t* task_out = nullptr) {
  const std::size_t task = rng.index(history.size());
  const std::span<const T> pool = history[task];
  if (pool.empty()) throw InvalidArgument("old task " + std::to_string(task + 1) + " has no data");
  if (task_out) *task_out = task;
  return &pool[rng.index(pool.size())];
}

/// Both levels draw with replacement.
template <typename T>
Batch<T> sample_batch(const ReplayPlan& plan, std::span<const T> new_data,
                      std::span<const std::span<const T>> history, Rng& rng) {
  if (new_data.empty()) throw InvalidArgument("sample_batch needs non-empty new data");
  const BatchSplit split = batch_split(plan, !history.empty());
  Batch<T> batch;
  batch.new_part.reserve(split.new_count);
  batch.old_part.reserve(split.old_count);
  for (std::size_t i = 0; i < split.new_count; ++i) {
    batch.new_part.push_back(&new_data[rng.index(new_data.size())]);
  }
  for (std::size_t i = 0; i < split.old_count; ++i) batch.old_part.push_back(sample_old(history, rng));
  return batch;
}

/// Fixed per-type memory for the EMR baseline: for every type seen in
/// `history`, min(quota, available) examples chosen uniformly without
/// replacement. Types are visited in first-appearance order.
template <typename T, typename LabelOf>
std::vector<const T*> fixed_memory_sample(std::span<const std::span<const T>> history,
                                          std::size_t per_type_quota, std::uint64_t seed,
                                          LabelOf label_of) {
  if (per_type_quota < 1) throw InvalidArgument("per-type quota must be >= 1");
  std::vector<std::vector<const T*>> by_type;
  std::map<std::decay_t<decltype(label_of(std::declval<const T&>()))>, std::size_t> slot;
  for (const auto& task : history) {
    for (const T& item : task) {
      const auto [it, inserted] = slot.try_emplace(label_of(item), by_type.size());
      if (inserted) by_type.emplace_back();
      by_type[it->second].push_back(&item);
    }
  }
  Rng rng(seed);
  std::vector<const T*> memory;
  for (auto& pool : by_type) {
    const std::size_t keep = std::min(per_type_quota, pool.size());
    for (std::size_t i = 0; i < keep; ++i) {
      std::swap(pool[i], pool[i + rng.index(pool.size() - i)]);
      memory.push_back(pool[i]);
    }
  }
  return memory;
}

}  // namespace conpet
