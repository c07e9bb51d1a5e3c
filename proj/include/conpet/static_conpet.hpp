#pragma once

// Static ConPET: a single PET module whose head grows with every task,
// trained under the dynamic replay strategy. Two baselines share the code
// path: the fixed-memory EMR baseline (per-type memory cycled with the new
// data) and plain sequential fine-tuning with no replay.

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "conpet/dataset.hpp"
#include "conpet/learner.hpp"
#include "conpet/pet.hpp"
#include "conpet/replay.hpp"

namespace conpet {

enum class StaticMode { dynamic_replay, fixed_memory, no_replay };

struct StaticOptions {
  TrainingOptions training;
  ReplayPlan plan;  // iter2 is the per-step batch budget
  StaticMode mode = StaticMode::dynamic_replay;
  std::size_t per_type_quota = 100;  // fixed-memory mode only
};

/// Extra loss terms (embedding alignment, contrastive or distillation losses
/// of other replay methods) attach here. Called once per batch after the
/// cross-entropy gradients are accumulated; it may add to `grads` and `loss`.
using BatchHook = std::function<void(const PetModule& module, std::span<const Instance* const> batch,
                                     PetGradients& grads, double& loss)>;

class StaticConPet : public ContinualLearner {
 public:
  StaticConPet(const Encoder& encoder, StaticOptions options, BatchHook hook = {})
      : encoder_(encoder), options_(std::move(options)), hook_(std::move(hook)) {
    validate(options_.plan);
    if (options_.mode == StaticMode::fixed_memory && options_.per_type_quota < 1) {
      throw InvalidArgument("per-type quota must be >= 1");
    }
  }

  std::string_view method() const override {
    switch (options_.mode) {
      case StaticMode::dynamic_replay: return "static-dynamic-replay";
      case StaticMode::fixed_memory: return "static-fixed-memory";
      case StaticMode::no_replay: return "static-no-replay";
    }
    return "static";
  }

  const PetModule& module() const noexcept { return module_; }
  const std::vector<const Instance*>& memory() const noexcept { return memory_; }

  /// Number of reads from historical training data outside the fixed memory.
  std::uint64_t history_reads() const noexcept { return history_reads_; }

  void train_task(const PreparedSequence& sequence, std::size_t k) override {
    if (k != trained_ + 1) throw InvalidArgument("tasks must be trained in order");
    if (k > sequence.num_tasks()) throw InvalidArgument("task index past the sequence");
    counters_ = {};
    const std::uint64_t calls_before = encoder_.forward_calls();
    if (k == 1) {
      module_ = PetModule(1, {encoder_.feature_dim(), encoder_.hidden_dim(), options_.training.rank},
                          sequence.labels_of_task(1), derive_seed(options_.training.seed, "static-init"),
                          options_.training.head_init_std);
    } else {
      const auto added = sequence.labels_of_task(k);
      module_ = expand_head(module_, added);
    }
    OptimizerState opt(module_, options_.training.adam_for_step(k));
    const std::span<const Instance> fresh(sequence.train[k - 1]);
    const std::uint64_t seed = derive_seed(options_.training.seed, "static-batches/" + std::to_string(k));
    const std::size_t slices = std::max<std::size_t>(1, options_.training.max_epochs);

    const auto on_batch = [&](std::span<const Instance* const> items) {
      PetGradients grads(module_);
      double loss = 0.0;
      const double weight = 1.0 / static_cast<double>(items.size());
      std::vector<double> dlogits(module_.num_classes());
      for (const Instance* item : items) {
        const ForwardTrace trace = pet_forward_trace(module_, encoder_, item->features);
        loss += weight * softmax_cross_entropy(trace.logits, item->global_label, dlogits, weight);
        accumulate_backward(module_, item->features, trace, dlogits, grads);
      }
      if (hook_) hook_(module_, items, grads, loss);
      if (!std::isfinite(loss)) throw NumericalError("non-finite loss in static training");
      optimizer_step(module_, opt, grads);
      ++counters_.batches_module;
    };
    const auto score = [&] {
      const std::uint64_t before = encoder_.forward_calls();
      const auto tallies = evaluate_views(PreparedSequence::views(sequence.valid, 1, k),
                                          [&](const Instance& item) { return predict(item); });
      counters_.validation_encoder_calls += encoder_.forward_calls() - before;
      return validation_average(tallies);
    };

    const bool replay_history = options_.mode == StaticMode::dynamic_replay;
    const BatchSplit split = batch_split(options_.plan, replay_history && k > 1);
    const std::size_t total = phase_batches(batch_budget(options_.plan, TrainingPhase::task_module),
                                            options_.training.max_epochs, fresh.size(), split.new_count);

    if (options_.mode == StaticMode::fixed_memory) {
      // Memory from earlier steps plus all of T_k, cycled until the budget is met.
      std::vector<std::span<const Instance>> pool_views{fresh};
      std::vector<Instance> memory_copy;
      memory_copy.reserve(memory_.size());
      for (const Instance* item : memory_) memory_copy.push_back(*item);
      pool_views.emplace_back(memory_copy);
      EpochCursor cursor(pool_views, options_.plan.batch_size, seed);
      run_phase(module_, total, slices, options_.training.early_stopping,
                [&](std::size_t) { on_batch(cursor.next()); }, score);
      const std::vector<std::span<const Instance>> newest{fresh};
      const auto added = fixed_memory_sample<Instance>(
          newest, options_.per_type_quota,
          derive_seed(options_.training.seed, "memory/" + std::to_string(k)),
          [](const Instance& item) { return item.global_label; });
      memory_.insert(memory_.end(), added.begin(), added.end());
    } else {
      InstanceViews history;
      if (replay_history) {
        history = PreparedSequence::views(sequence.train, 1, k - 1);
        history_reads_ += k > 1 ? 1 : 0;
      }
      Rng rng(seed);
      run_phase(
          module_, total, slices, options_.training.early_stopping,
          [&](std::size_t) {
            Batch<Instance> batch = sample_batch<Instance>(options_.plan, fresh, history, rng);
            std::vector<const Instance*> items = std::move(batch.new_part);
            items.insert(items.end(), batch.old_part.begin(), batch.old_part.end());
            on_batch(items);
          },
          score);
    }
    counters_.encoder_calls = encoder_.forward_calls() - calls_before - counters_.validation_encoder_calls;
    trained_ = k;
  }

  std::size_t predict(const Instance& instance) const override {
    return argmax(pet_forward_trace(module_, encoder_, instance.features).logits);
  }

  std::vector<const PetModule*> modules() const override {
    if (trained_ == 0) return {};
    return {&module_};
  }

 private:
  const Encoder& encoder_;
  StaticOptions options_;
  BatchHook hook_;
  PetModule module_;
  std::vector<const Instance*> memory_;
  std::uint64_t history_reads_ = 0;
};

}  // namespace conpet
