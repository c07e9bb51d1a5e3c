#pragma once

// Run configuration: a JSON key-value tree, parsed into RunConfig and
// validated into a list of (field, reason) violations.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "conpet/core_data.hpp"
#include "conpet/dynamic_conpet.hpp"
#include "conpet/encoder.hpp"
#include "conpet/errors.hpp"
#include "conpet/replay.hpp"

namespace conpet {

inline const std::vector<std::string>& method_ids() {
  static const std::vector<std::string> ids{"dynamic", "static-dynamic-replay", "static-fixed-memory",
                                            "limitless", "wo-sel"};
  return ids;
}

/// Accepts "w/o-sel" as a spelling of "wo-sel".
inline std::string canonical_method(std::string_view name) {
  if (name == "w/o-sel") return "wo-sel";
  return std::string(name);
}

struct RunConfig {
  std::filesystem::path corpus_path;
  std::string corpus_format = "jsonl";
  TaskKind task_kind = TaskKind::entity_typing;
  std::size_t max_input_tokens = 0;

  std::size_t num_clusters = 10;
  std::optional<std::uint64_t> split_seed;
  std::filesystem::path split_map;
  SplitRatios ratios;

  std::string method = "dynamic";
  std::uint64_t seed = 0;

  std::size_t feature_dim = 4096;
  std::size_t hidden_dim = 256;
  std::vector<std::size_t> ngram_orders{1, 2};

  std::size_t rank = 4;
  double learning_rate = 1e-4;
  double weight_decay = 0.01;
  std::map<std::size_t, double> lr_overrides;

  std::size_t batch_size = 8;
  std::size_t old_parts = 1;
  std::size_t new_parts = 1;
  std::size_t iter1 = 1000;
  std::size_t iter2 = 1000;
  std::optional<std::size_t> batch_limit;  // train+valid batches, split 4:1

  std::size_t num_active = 1;
  double alpha = -1e4;

  std::size_t max_epochs = 10;
  bool early_stopping = false;
  std::size_t eval_threads = 1;

  std::size_t per_type_quota = 100;

  std::filesystem::path output_dir = "out";
  std::filesystem::path cache_path;

  std::uint64_t encoder_seed() const { return derive_seed(seed, "encoder"); }
  std::uint64_t effective_split_seed() const { return split_seed.value_or(derive_seed(seed, "split")); }
  std::uint64_t training_seed() const { return derive_seed(seed, "training"); }

  EncoderConfig encoder_config() const {
    return {feature_dim, hidden_dim, encoder_seed(), ngram_orders};
  }

  ReplayPlan replay_plan() const {
    ReplayPlan plan;
    plan.batch_size = batch_size;
    plan.old_parts = old_parts;
    plan.new_parts = new_parts;
    plan.iter1 = batch_limit ? training_batches_from_limit(*batch_limit) : iter1;
    plan.iter2 = batch_limit ? training_batches_from_limit(*batch_limit) : iter2;
    plan.seed = derive_seed(seed, "replay");
    return plan;
  }
};

struct Violation {
  std::string field;
  std::string reason;

  std::string message() const { return field + ": " + reason; }
  bool operator==(const Violation&) const = default;
};

namespace detail {

template <typename T>
void read_field(const nlohmann::json& node, std::string_view key, T& out, const std::string& path) {
  const auto it = node.find(std::string(key));
  if (it == node.end() || it->is_null()) return;
  try {
    if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
      if (!it->is_number_integer() || it->get<long long>() < 0) throw std::invalid_argument("");
    }
    if constexpr (std::is_same_v<T, std::filesystem::path>) {
      out = it->get<std::string>();
    } else {
      out = it->get<T>();
    }
  } catch (const std::exception&) {
    throw ConfigError(path + std::string(key) + " has the wrong type");
  }
}

inline const nlohmann::json& section(const nlohmann::json& doc, std::string_view key) {
  static const nlohmann::json empty = nlohmann::json::object();
  const auto it = doc.find(std::string(key));
  if (it == doc.end() || it->is_null()) return empty;
  if (!it->is_object()) throw ConfigError(std::string(key) + " must be an object");
  return *it;
}

}  // namespace detail

/// Builds a RunConfig from a JSON document. Relative paths are resolved
/// against `base_dir`. Structural errors throw ConfigError; range checks are
/// left to validate_config.
inline RunConfig parse_config(const nlohmann::json& doc, const std::filesystem::path& base_dir = {}) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  static const std::vector<std::string> known{"corpus", "split", "method", "seed", "encoder",
                                               "pet", "replay", "selection", "training", "memory",
                                               "step_overrides", "output_dir", "cache_path"};
  for (const auto& [key, value] : doc.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  RunConfig c;
  using detail::read_field;
  using detail::section;

  const auto& corpus = section(doc, "corpus");
  read_field(corpus, "path", c.corpus_path, "corpus.");
  read_field(corpus, "format", c.corpus_format, "corpus.");
  std::string kind = std::string(to_string(c.task_kind));
  read_field(corpus, "task_kind", kind, "corpus.");
  try {
    c.task_kind = parse_task_kind(kind);
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("corpus.task_kind: ") + e.what());
  }
  read_field(corpus, "max_input_tokens", c.max_input_tokens, "corpus.");

  const auto& split = section(doc, "split");
  read_field(split, "num_clusters", c.num_clusters, "split.");
  std::uint64_t split_seed = 0;
  if (split.contains("seed") && !split["seed"].is_null()) {
    read_field(split, "seed", split_seed, "split.");
    c.split_seed = split_seed;
  }
  read_field(split, "map", c.split_map, "split.");
  if (split.contains("ratios")) {
    std::vector<double> ratios;
    read_field(split, "ratios", ratios, "split.");
    if (ratios.size() != 3) throw ConfigError("split.ratios must hold three numbers");
    c.ratios = {ratios[0], ratios[1], ratios[2]};
  }

  read_field(doc, "method", c.method, "");
  c.method = canonical_method(c.method);
  read_field(doc, "seed", c.seed, "");

  const auto& encoder = section(doc, "encoder");
  read_field(encoder, "feature_dim", c.feature_dim, "encoder.");
  read_field(encoder, "hidden_dim", c.hidden_dim, "encoder.");
  read_field(encoder, "ngram_orders", c.ngram_orders, "encoder.");

  const auto& pet = section(doc, "pet");
  read_field(pet, "rank", c.rank, "pet.");
  read_field(pet, "learning_rate", c.learning_rate, "pet.");
  read_field(pet, "weight_decay", c.weight_decay, "pet.");

  const auto& replay = section(doc, "replay");
  read_field(replay, "batch_size", c.batch_size, "replay.");
  if (replay.contains("old_new_ratio")) {
    std::vector<std::size_t> ratio;
    read_field(replay, "old_new_ratio", ratio, "replay.");
    if (ratio.size() != 2) throw ConfigError("replay.old_new_ratio must hold two integers");
    c.old_parts = ratio[0];
    c.new_parts = ratio[1];
  }
  read_field(replay, "iter1", c.iter1, "replay.");
  read_field(replay, "iter2", c.iter2, "replay.");
  if (replay.contains("batch_limit") && !replay["batch_limit"].is_null()) {
    std::size_t limit = 0;
    read_field(replay, "batch_limit", limit, "replay.");
    c.batch_limit = limit;
  }

  const auto& selection = section(doc, "selection");
  read_field(selection, "num_active", c.num_active, "selection.");
  read_field(selection, "alpha", c.alpha, "selection.");

  const auto& training = section(doc, "training");
  read_field(training, "max_epochs", c.max_epochs, "training.");
  read_field(training, "early_stopping", c.early_stopping, "training.");
  read_field(training, "eval_threads", c.eval_threads, "training.");

  const auto& memory = section(doc, "memory");
  read_field(memory, "per_type_quota", c.per_type_quota, "memory.");

  for (const auto& [step, overrides] : section(doc, "step_overrides").items()) {
    std::size_t k = 0;
    try {
      std::size_t used = 0;
      k = std::stoul(step, &used);
      if (used != step.size()) throw std::invalid_argument(step);
    } catch (const std::exception&) {
      throw ConfigError("step_overrides key '" + step + "' is not a step index");
    }
    if (!overrides.is_object()) throw ConfigError("step_overrides." + step + " must be an object");
    for (const auto& [key, value] : overrides.items()) {
      if (key != "learning_rate" && key != "lr") {
        throw ConfigError("step_overrides." + step + " supports only learning_rate");
      }
      if (!value.is_number()) throw ConfigError("step_overrides." + step + "." + key + " must be a number");
      c.lr_overrides[k] = value.get<double>();
    }
  }

  read_field(doc, "output_dir", c.output_dir, "");
  read_field(doc, "cache_path", c.cache_path, "");

  const auto resolve = [&](std::filesystem::path& p) {
    if (!p.empty() && p.is_relative() && !base_dir.empty()) p = base_dir / p;
  };
  resolve(c.corpus_path);
  resolve(c.split_map);
  resolve(c.output_dir);
  resolve(c.cache_path);
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return parse_config(doc, path.parent_path());
}

/// Number of tasks the config will produce, if it can be known without the corpus.
inline std::optional<std::size_t> planned_task_count(const RunConfig& c) {
  if (c.split_map.empty()) return c.num_clusters;
  try {
    return load_split_config(c.split_map).size();
  } catch (const Error&) {
    return std::nullopt;
  }
}

/// Empty iff the config is runnable.
inline std::vector<Violation> validate_config(const RunConfig& c) {
  std::vector<Violation> out;
  const auto fail = [&](std::string field, std::string reason) {
    out.push_back({std::move(field), std::move(reason)});
  };
  if (c.corpus_path.empty()) {
    fail("corpus.path", "must be set");
  } else if (!std::filesystem::is_regular_file(c.corpus_path)) {
    fail("corpus.path", "file not found: " + c.corpus_path.string());
  }
  if (c.corpus_format != "jsonl") fail("corpus.format", "unknown format '" + c.corpus_format + "'");
  if (!c.split_map.empty() && !std::filesystem::is_regular_file(c.split_map)) {
    fail("split.map", "file not found: " + c.split_map.string());
  }
  if (c.split_map.empty() && c.num_clusters < 1) fail("split.num_clusters", "must be >= 1");
  const double ratio_sum = c.ratios.train + c.ratios.valid + c.ratios.test;
  if (!(c.ratios.train > 0 && c.ratios.valid > 0 && c.ratios.test > 0) || std::abs(ratio_sum - 1.0) > 1e-9) {
    fail("split.ratios", "must be positive and sum to 1");
  }
  if (std::find(method_ids().begin(), method_ids().end(), c.method) == method_ids().end()) {
    fail("method", "unknown method '" + c.method + "'");
  }
  if (c.hidden_dim < 1) fail("encoder.hidden_dim", "must be >= 1");
  if (c.feature_dim < c.hidden_dim) fail("encoder.feature_dim", "must be >= hidden_dim");
  if (c.ngram_orders.empty()) fail("encoder.ngram_orders", "must not be empty");
  for (std::size_t order : c.ngram_orders) {
    if (order < 1 || order > 8) {
      fail("encoder.ngram_orders", "orders must lie in 1..8");
      break;
    }
  }
  if (c.rank < 1) fail("pet.rank", "rank must be >= 1");
  if (c.rank > c.hidden_dim) fail("pet.rank", "rank must not exceed hidden_dim");
  if (!(c.learning_rate > 0.0) || !std::isfinite(c.learning_rate)) fail("pet.learning_rate", "must be > 0");
  if (!(c.weight_decay >= 0.0) || !std::isfinite(c.weight_decay)) fail("pet.weight_decay", "must be >= 0");
  for (const auto& [step, lr] : c.lr_overrides) {
    if (step < 1) fail("step_overrides", "steps are 1-based");
    if (!(lr > 0.0) || !std::isfinite(lr)) fail("step_overrides." + std::to_string(step), "learning rate must be > 0");
  }
  if (c.batch_size < 2) fail("replay.batch_size", "must be >= 2");
  if (c.old_parts < 1 || c.new_parts < 1) fail("replay.old_new_ratio", "components must be positive");
  if (c.batch_limit) {
    if (training_batches_from_limit(*c.batch_limit) < 1) fail("replay.batch_limit", "leaves no training batches");
  } else {
    if (c.iter1 < 1) fail("replay.iter1", "must be >= 1");
    if (c.iter2 < 1) fail("replay.iter2", "must be >= 1");
  }
  if (c.num_active < 1) fail("selection.num_active", "t must be >= 1");
  if (const auto tasks = planned_task_count(c); tasks && c.num_active > *tasks) {
    fail("selection.num_active", "t = " + std::to_string(c.num_active) + " exceeds the " +
                                     std::to_string(*tasks) + " tasks");
  }
  if (!std::isfinite(c.alpha) || c.alpha > -1.0) fail("selection.alpha", "must be a finite value <= -1");
  if (c.eval_threads < 1 || c.eval_threads > 256) fail("training.eval_threads", "must lie in 1..256");
  if (c.method == "limitless" && c.max_epochs < 1) fail("training.max_epochs", "limitless needs >= 1 epoch");
  if (c.per_type_quota < 1) fail("memory.per_type_quota", "must be >= 1");
  if (c.output_dir.empty()) fail("output_dir", "must be set");
  return out;
}

/// Resolved configuration as written next to the run artifacts.
inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json overrides = nlohmann::json::object();
  for (const auto& [step, lr] : c.lr_overrides) overrides[std::to_string(step)] = {{"learning_rate", lr}};
  nlohmann::json replay{{"batch_size", c.batch_size},
                        {"old_new_ratio", {c.old_parts, c.new_parts}},
                        {"iter1", c.iter1},
                        {"iter2", c.iter2}};
  replay["batch_limit"] = c.batch_limit ? nlohmann::json(*c.batch_limit) : nlohmann::json();
  nlohmann::json split{{"num_clusters", c.num_clusters},
                       {"ratios", {c.ratios.train, c.ratios.valid, c.ratios.test}}};
  split["seed"] = c.split_seed ? nlohmann::json(*c.split_seed) : nlohmann::json();
  if (!c.split_map.empty()) split["map"] = c.split_map.generic_string();
  return nlohmann::json{
      {"corpus",
       {{"path", c.corpus_path.generic_string()},
        {"format", c.corpus_format},
        {"task_kind", to_string(c.task_kind)},
        {"max_input_tokens", c.max_input_tokens}}},
      {"split", split},
      {"method", c.method},
      {"seed", c.seed},
      {"encoder", {{"feature_dim", c.feature_dim}, {"hidden_dim", c.hidden_dim}, {"ngram_orders", c.ngram_orders}}},
      {"pet", {{"rank", c.rank}, {"learning_rate", c.learning_rate}, {"weight_decay", c.weight_decay}}},
      {"replay", replay},
      {"selection", {{"num_active", c.num_active}, {"alpha", c.alpha}}},
      {"training", {{"max_epochs", c.max_epochs}, {"early_stopping", c.early_stopping}, {"eval_threads", c.eval_threads}}},
      {"memory", {{"per_type_quota", c.per_type_quota}}},
      {"step_overrides", overrides},
      {"output_dir", c.output_dir.generic_string()},
      {"cache_path", c.cache_path.generic_string()}};
}

}  // namespace conpet
