#pragma once

// Pieces shared by the static and dynamic learners: training options, the
// batch loop with epoch slices and best-checkpoint selection, and cumulative
// evaluation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "conpet/cache.hpp"
#include "conpet/dataset.hpp"
#include "conpet/encoder.hpp"
#include "conpet/eval.hpp"
#include "conpet/pet.hpp"
#include "conpet/replay.hpp"

namespace conpet {

struct TrainingOptions {
  std::size_t rank = 4;
  AdamConfig adam;
  std::map<std::size_t, double> lr_overrides;  // step -> learning rate
  std::size_t max_epochs = 10;                 // 0 = no epoch cap
  bool early_stopping = false;
  std::uint64_t seed = 0;
  double head_init_std = 0.02;

  AdamConfig adam_for_step(std::size_t k) const {
    AdamConfig cfg = adam;
    if (const auto it = lr_overrides.find(k); it != lr_overrides.end()) cfg.learning_rate = it->second;
    return cfg;
  }
};

/// Index of the largest value; ties go to the lowest index.
inline std::size_t argmax(std::span<const double> values) {
  if (values.empty()) throw InvalidArgument("argmax of an empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

/// Batches for one phase under a replay plan: the budget, capped by
/// `max_epochs` passes over the new data at `new_per_batch` new examples each.
inline std::size_t phase_batches(std::size_t budget, std::size_t max_epochs, std::size_t new_examples,
                                 std::size_t new_per_batch) {
  if (max_epochs == 0 || new_per_batch == 0) return budget;
  const std::size_t per_epoch = (new_examples + new_per_batch - 1) / new_per_batch;
  return std::min(budget, max_epochs * std::max<std::size_t>(per_epoch, 1));
}

/// Runs `total` batches split into `slices` equal epochs. With early stopping,
/// `score` is evaluated after each slice and the best-scoring parameters are
/// restored at the end (earliest wins on ties).
template <typename StepFn, typename ScoreFn>
void run_phase(PetModule& module, std::size_t total, std::size_t slices, bool early_stopping,
               StepFn&& step, ScoreFn&& score) {
  slices = std::max<std::size_t>(1, std::min(slices, std::max<std::size_t>(total, 1)));
  const std::size_t slice_len = (total + slices - 1) / slices;
  std::optional<PetModule> best;
  double best_score = -1.0;
  for (std::size_t done = 0; done < total;) {
    const std::size_t end = std::min(total, done + slice_len);
    for (; done < end; ++done) step(done);
    if (early_stopping) {
      const double s = score();
      if (!best || s > best_score) {
        best = module;
        best_score = s;
      }
    }
  }
  if (best) module = std::move(*best);
}

/// Shuffled passes over the concatenation of `views`, `batch_size` at a time.
class EpochCursor {
 public:
  EpochCursor(const InstanceViews& views, std::size_t batch_size, std::uint64_t seed)
      : batch_size_(batch_size), rng_(seed) {
    for (const auto& view : views) {
      for (const Instance& item : view) pool_.push_back(&item);
    }
    if (pool_.empty()) throw InvalidArgument("epoch over empty data");
    rng_.shuffle(pool_);
  }

  std::size_t batches_per_epoch() const noexcept {
    return (pool_.size() + batch_size_ - 1) / batch_size_;
  }

  std::vector<const Instance*> next() {
    if (pos_ >= pool_.size()) {
      rng_.shuffle(pool_);
      pos_ = 0;
    }
    const std::size_t end = std::min(pool_.size(), pos_ + batch_size_);
    std::vector<const Instance*> batch(pool_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                       pool_.begin() + static_cast<std::ptrdiff_t>(end));
    pos_ = end;
    return batch;
  }

 private:
  std::size_t batch_size_;
  Rng rng_;
  std::vector<const Instance*> pool_;
  std::size_t pos_ = 0;
};

/// Logits of `module` on `instance`, served from `cache` for frozen modules.
inline std::vector<double> module_logits(const PetModule& module, const Encoder& encoder,
                                         const Instance& instance, LogitCache* cache) {
  if (cache && module.frozen()) {
    if (auto hit = cache->get(instance.id, module.module_id())) return std::move(*hit);
    auto logits = pet_forward_trace(module, encoder, instance.features).logits;
    cache->put(instance.id, module, logits);
    return logits;
  }
  return pet_forward_trace(module, encoder, instance.features).logits;
}

class ContinualLearner {
 public:
  virtual ~ContinualLearner() = default;

  virtual std::string_view method() const = 0;

  /// Trains on task k (1-based); tasks 1..k-1 must already be trained.
  virtual void train_task(const PreparedSequence& sequence, std::size_t k) = 0;

  /// Global label predicted for `instance` by the current model. Thread-safe
  /// once training of the current step has finished.
  virtual std::size_t predict(const Instance& instance) const = 0;

  /// Every PET module the learner currently holds, for checkpointing.
  virtual std::vector<const PetModule*> modules() const = 0;

  const StepCounters& last_step_counters() const noexcept { return counters_; }
  std::size_t trained_tasks() const noexcept { return trained_; }

 protected:
  StepCounters counters_;
  std::size_t trained_ = 0;
};

/// Per-task tallies of `predict` over `views`, fanned out over `threads`.
template <typename PredictFn>
std::vector<TaskTally> evaluate_views(const InstanceViews& views, PredictFn&& predict,
                                      std::size_t threads = 1) {
  std::vector<const Instance*> items;
  std::vector<std::size_t> owner;
  for (std::size_t t = 0; t < views.size(); ++t) {
    for (const Instance& item : views[t]) {
      items.push_back(&item);
      owner.push_back(t);
    }
  }
  std::vector<unsigned char> hit(items.size(), 0);
  const auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) hit[i] = predict(*items[i]) == items[i]->global_label;
  };
  threads = std::max<std::size_t>(1, std::min(threads, items.size()));
  if (threads == 1) {
    work(0, items.size());
  } else {
    std::vector<std::jthread> pool;
    const std::size_t chunk = (items.size() + threads - 1) / threads;
    for (std::size_t begin = 0; begin < items.size(); begin += chunk) {
      pool.emplace_back(work, begin, std::min(items.size(), begin + chunk));
    }
  }
  std::vector<TaskTally> tallies(views.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    tallies[owner[i]].correct += hit[i];
    ++tallies[owner[i]].total;
  }
  return tallies;
}

/// Mean accuracy over the non-empty tallies; 0 when every task is empty.
inline double validation_average(std::span<const TaskTally> tallies) {
  std::vector<double> accs;
  for (const TaskTally& t : tallies) {
    if (t.total > 0) accs.push_back(t.accuracy());
  }
  return accs.empty() ? 0.0 : average_accuracy(accs);
}

}  // namespace conpet
