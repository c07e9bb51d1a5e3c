#pragma once

// Dynamic ConPET: one PET module per task, a PET-module selector that is
// expanded by one slot per step, top-t pre-selection with teacher forcing
// during training, and prediction over the concatenation of every module's
// logits where inactive modules are padded with a constant alpha.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "conpet/cache.hpp"
#include "conpet/dataset.hpp"
#include "conpet/learner.hpp"
#include "conpet/pet.hpp"
#include "conpet/replay.hpp"

namespace conpet {

struct SelectionConfig {
  std::size_t num_active = 1;  // t
  double alpha = -1e4;
  bool teacher_forcing = true;
  bool select_all = false;  // ablation without pre-selection: t = k at step k
};

/// Indices (1-based) of the `t` highest scores in descending order, ties to
/// the lower index. If `forced` (1-based) is given and missing, it replaces
/// the last, lowest-scoring slot.
inline std::vector<std::size_t> select_top(std::span<const double> scores, std::size_t t,
                                           std::optional<std::size_t> forced = std::nullopt) {
  if (t < 1) throw InvalidArgument("at least one module must be active");
  if (t > scores.size()) {
    throw InvalidArgument("t = " + std::to_string(t) + " exceeds the " + std::to_string(scores.size()) +
                          " available modules");
  }
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<std::size_t> selected;
  for (std::size_t i = 0; i < t; ++i) selected.push_back(order[i] + 1);
  if (forced) {
    if (*forced < 1 || *forced > scores.size()) throw InvalidArgument("forced module out of range");
    if (std::find(selected.begin(), selected.end(), *forced) == selected.end()) selected.back() = *forced;
  }
  return selected;
}

struct DynamicOptions {
  TrainingOptions training;
  ReplayPlan plan;
  SelectionConfig selection;
  bool limitless = false;  // drop the batch budget, train on all seen data
};

struct DynamicPrediction {
  std::size_t label = 0;  // global
  std::vector<double> logits;  // concatenation over tasks 1..k
  std::vector<std::size_t> active;
};

class DynamicConPet : public ContinualLearner {
 public:
  DynamicConPet(const Encoder& encoder, DynamicOptions options, LogitCache* cache = nullptr)
      : encoder_(encoder), options_(std::move(options)), cache_(cache) {
    validate(options_.plan);
    if (options_.selection.num_active < 1) throw InvalidArgument("num_active must be >= 1");
    if (!std::isfinite(options_.selection.alpha)) throw InvalidArgument("alpha must be finite");
  }

  std::string_view method() const override {
    if (options_.limitless) return "limitless";
    return options_.selection.select_all ? "wo-sel" : "dynamic";
  }

  const PetModule& selector() const noexcept { return selector_; }
  const std::vector<PetModule>& task_modules() const noexcept { return task_modules_; }
  const DynamicOptions& options() const noexcept { return options_; }

  /// Active-module count at step k.
  std::size_t active_count(std::size_t k) const {
    return options_.selection.select_all ? k : std::min(options_.selection.num_active, k);
  }

  /// Top-t modules for `instance` under the trained selector; with
  /// `true_task` and teacher forcing the owning module is always included.
  std::vector<std::size_t> select_modules(const Instance& instance,
                                          std::optional<std::size_t> true_task = std::nullopt) const {
    const auto scores = module_logits(selector_, encoder_, instance, cache_);
    if (!options_.selection.teacher_forcing) true_task.reset();
    return select_top(scores, active_count(scores.size()), true_task);
  }

  void train_task(const PreparedSequence& sequence, std::size_t k) override {
    if (k != trained_ + 1) throw InvalidArgument("tasks must be trained in order");
    if (k > sequence.num_tasks()) throw InvalidArgument("task index past the sequence");
    counters_ = {};
    const std::uint64_t calls_before = encoder_.forward_calls();
    const PetShape shape{encoder_.feature_dim(), encoder_.hidden_dim(), options_.training.rank};

    if (k == 1) {
      selector_ = PetModule(0, shape, {"task-1"}, derive_seed(options_.training.seed, "selector-init"),
                            options_.training.head_init_std);
    } else {
      selector_ = dimension_expand(selector_, k);
      if (cache_) cache_->invalidate_module(0);
    }
    train_selector(sequence, k);
    selector_ = freeze(std::move(selector_));

    PetModule module(static_cast<int>(k), shape, sequence.labels_of_task(k),
                     derive_seed(options_.training.seed, "module-init/" + std::to_string(k)),
                     options_.training.head_init_std);
    train_module(sequence, k, module);
    task_modules_.push_back(freeze(std::move(module)));

    counters_.encoder_calls =
        encoder_.forward_calls() - calls_before - counters_.validation_encoder_calls;
    trained_ = k;
  }

  std::size_t predict(const Instance& instance) const override { return predict_detailed(instance).label; }

  std::vector<const PetModule*> modules() const override {
    std::vector<const PetModule*> out;
    if (trained_ == 0) return out;
    out.push_back(&selector_);
    for (const PetModule& module : task_modules_) out.push_back(&module);
    return out;
  }

  DynamicPrediction predict_detailed(const Instance& instance) const {
    if (trained_ == 0) throw InvalidArgument("predict before any task was trained");
    return predict_with(instance, trained_, nullptr, std::nullopt);
  }

 private:
  /// Prediction over tasks 1..k where module k may be `pending` (still training).
  DynamicPrediction predict_with(const Instance& instance, std::size_t k, const PetModule* pending,
                                 std::optional<std::size_t> forced) const {
    const auto scores = module_logits(selector_, encoder_, instance, cache_);
    DynamicPrediction out;
    out.active = select_top(scores, active_count(k), forced);
    out.logits = padded_logits(instance, k, out.active, pending, nullptr);
    out.label = argmax(out.logits);
    return out;
  }

  const PetModule& module_at(std::size_t j, const PetModule* pending) const {
    if (j <= task_modules_.size()) return task_modules_[j - 1];
    if (!pending) throw InvalidArgument("module " + std::to_string(j) + " has not been trained");
    return *pending;
  }

  /// Concatenated logits of tasks 1..k with alpha in every inactive slot. If
  /// `trace` is given, the forward trace of `pending` is stored there when it
  /// is active.
  std::vector<double> padded_logits(const Instance& instance, std::size_t k,
                                    std::span<const std::size_t> active, const PetModule* pending,
                                    std::optional<ForwardTrace>* trace) const {
    const double alpha = options_.selection.alpha;
    std::vector<double> out(offsets_total(k), alpha);
    for (std::size_t j : active) {
      const PetModule& module = module_at(j, pending);
      std::vector<double> logits;
      if (&module == pending && trace) {
        *trace = pet_forward_trace(module, encoder_, instance.features);
        logits = (*trace)->logits;
      } else {
        logits = module_logits(module, encoder_, instance, cache_);
      }
      const std::size_t offset = offsets_[j - 1];
      for (std::size_t c = 0; c < logits.size(); ++c) {
        if (!(logits[c] > alpha)) {
          throw ConfigError("alpha " + std::to_string(alpha) + " is not below logit " +
                            std::to_string(logits[c]) + " of module " + std::to_string(j));
        }
        out[offset + c] = logits[c];
      }
    }
    return out;
  }

  std::size_t offsets_total(std::size_t k) const { return offsets_[k - 1] + sizes_[k - 1]; }

  void register_layout(const PreparedSequence& sequence, std::size_t k) {
    offsets_.resize(k);
    sizes_.resize(k);
    for (std::size_t j = 1; j <= k; ++j) {
      offsets_[j - 1] = sequence.class_offset[j - 1];
      sizes_[j - 1] = sequence.task_size(j);
    }
  }

  std::size_t slices() const { return std::max<std::size_t>(1, options_.training.max_epochs); }

  template <typename ScoreFn>
  double timed_validation(ScoreFn&& score) {
    const std::uint64_t before = encoder_.forward_calls();
    const double s = score();
    counters_.validation_encoder_calls += encoder_.forward_calls() - before;
    return s;
  }

  /// Batches of the phase: hierarchical replay under the budget, or shuffled
  /// epochs over all seen data in limitless mode.
  template <typename BatchFn, typename ScoreFn>
  void run_batches(PetModule& module, const PreparedSequence& sequence, std::size_t k,
                   TrainingPhase phase, std::string_view stream, BatchFn&& on_batch, ScoreFn&& score) {
    const std::uint64_t seed =
        derive_seed(options_.training.seed, std::string(stream) + "/" + std::to_string(k));
    const auto validation = [&] { return timed_validation(score); };
    if (options_.limitless) {
      EpochCursor cursor(PreparedSequence::views(sequence.train, 1, k), options_.plan.batch_size, seed);
      const std::size_t total = slices() * cursor.batches_per_epoch();
      run_phase(module, total, slices(), options_.training.early_stopping,
                [&](std::size_t) { on_batch(cursor.next()); }, validation);
      return;
    }
    const InstanceViews history = PreparedSequence::views(sequence.train, 1, k - 1);
    const std::span<const Instance> fresh(sequence.train[k - 1]);
    Rng rng(seed);
    const BatchSplit split = batch_split(options_.plan, !history.empty());
    const std::size_t total = phase_batches(batch_budget(options_.plan, phase), options_.training.max_epochs,
                                            fresh.size(), split.new_count);
    run_phase(
        module, total, slices(), options_.training.early_stopping,
        [&](std::size_t) {
          Batch<Instance> batch = sample_batch<Instance>(options_.plan, fresh, history, rng);
          std::vector<const Instance*> items = std::move(batch.new_part);
          items.insert(items.end(), batch.old_part.begin(), batch.old_part.end());
          on_batch(std::move(items));
        },
        validation);
  }

  void train_selector(const PreparedSequence& sequence, std::size_t k) {
    OptimizerState opt(selector_, options_.training.adam_for_step(k));
    const auto on_batch = [&](std::vector<const Instance*> items) {
      std::vector<LabeledFeatures> labeled;
      labeled.reserve(items.size());
      for (const Instance* item : items) labeled.push_back({&item->features, item->task - 1});
      auto result = loss_and_grads(selector_, encoder_, labeled);
      optimizer_step(selector_, opt, result.grads);
      ++counters_.batches_selector;
    };
    const auto score = [&] {
      std::size_t correct = 0;
      std::size_t total = 0;
      for (const auto& view : PreparedSequence::views(sequence.valid, 1, k)) {
        for (const Instance& item : view) {
          const auto logits = pet_forward_trace(selector_, encoder_, item.features).logits;
          correct += argmax(logits) + 1 == item.task ? 1 : 0;
          ++total;
        }
      }
      return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
    };
    run_batches(selector_, sequence, k, TrainingPhase::selector, "selector-batches", on_batch, score);
  }

  void train_module(const PreparedSequence& sequence, std::size_t k, PetModule& module) {
    register_layout(sequence, k);
    OptimizerState opt(module, options_.training.adam_for_step(k));
    const std::size_t offset = offsets_[k - 1];
    const std::size_t width = sizes_[k - 1];
    const std::size_t t = active_count(k);
    const auto on_batch = [&](std::vector<const Instance*> items) {
      PetGradients grads(module);
      double loss = 0.0;
      const double weight = 1.0 / static_cast<double>(items.size());
      std::vector<double> dlogits(offsets_total(k));
      for (const Instance* item : items) {
        const auto scores = module_logits(selector_, encoder_, *item, cache_);
        const auto active = select_top(
            scores, t, options_.selection.teacher_forcing ? std::optional(item->task) : std::nullopt);
        ++counters_.forced_examples;
        if (std::find(active.begin(), active.end(), item->task) != active.end()) {
          ++counters_.forced_owner_active;
        }
        std::optional<ForwardTrace> trace;
        const auto logits = padded_logits(*item, k, active, &module, &trace);
        loss += weight * softmax_cross_entropy(logits, item->global_label, dlogits, weight);
        if (trace) {
          accumulate_backward(module, item->features, *trace,
                              std::span<const double>(dlogits).subspan(offset, width), grads);
        }
      }
      if (!std::isfinite(loss)) throw NumericalError("non-finite loss while training module " +
                                                     std::to_string(k));
      optimizer_step(module, opt, grads);
      ++counters_.batches_module;
    };
    const auto score = [&] {
      const auto tallies = evaluate_views(
          PreparedSequence::views(sequence.valid, 1, k),
          [&](const Instance& item) { return predict_with(item, k, &module, std::nullopt).label; });
      return validation_average(tallies);
    };
    run_batches(module, sequence, k, TrainingPhase::task_module, "module-batches", on_batch, score);
  }

  const Encoder& encoder_;
  DynamicOptions options_;
  LogitCache* cache_;
  PetModule selector_;
  std::vector<PetModule> task_modules_;
  std::vector<std::size_t> offsets_;
  std::vector<std::size_t> sizes_;
};

}  // namespace conpet
