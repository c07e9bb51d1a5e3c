#pragma once

// Examples, schema clusters, task sequences, corpus ingestion and the
// marker/prompt preprocessing applied before encoding.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "conpet/errors.hpp"
#include "conpet/rng.hpp"

namespace conpet {

/// Half-open token range [begin, end).
struct TokenSpan {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const noexcept { return end - begin; }
  bool operator==(const TokenSpan&) const = default;
};

struct Example {
  std::string id;
  std::vector<std::string> tokens;
  TokenSpan head_span;
  std::optional<TokenSpan> tail_span;  // absent for entity typing
  std::string label;
  std::size_t task_index = 0;  // 1-based, 0 until assigned by a split

  bool operator==(const Example&) const = default;
};

struct SchemaCluster {
  std::size_t index = 0;  // 1-based task index
  std::vector<std::string> types;

  bool operator==(const SchemaCluster&) const = default;
};

enum class TaskKind { entity_typing, relation_extraction };

inline std::string_view to_string(TaskKind kind) {
  return kind == TaskKind::entity_typing ? "entity-typing" : "relation-extraction";
}

inline TaskKind parse_task_kind(std::string_view name) {
  if (name == "entity-typing") return TaskKind::entity_typing;
  if (name == "relation-extraction") return TaskKind::relation_extraction;
  throw InvalidArgument("unknown task kind '" + std::string(name) + "'");
}

struct SplitRatios {
  double train = 0.8;
  double valid = 0.1;
  double test = 0.1;
};

struct ExamplePartition {
  std::vector<Example> train;
  std::vector<Example> valid;
  std::vector<Example> test;
};

/// Ordered disjoint clusters with per-task train/valid/test partitions.
/// Index 0 of each vector holds task 1.
struct TaskSequence {
  std::vector<SchemaCluster> clusters;
  std::vector<std::vector<Example>> train;
  std::vector<std::vector<Example>> valid;
  std::vector<std::vector<Example>> test;

  std::size_t num_tasks() const noexcept { return clusters.size(); }

  /// Views of tasks 1..k; no example is copied.
  static std::vector<std::span<const Example>> cumulative(
      const std::vector<std::vector<Example>>& per_task, std::size_t k) {
    if (k > per_task.size()) throw InvalidArgument("cumulative view past the last task");
    std::vector<std::span<const Example>> views;
    views.reserve(k);
    for (std::size_t i = 0; i < k; ++i) views.emplace_back(per_task[i]);
    return views;
  }
  std::vector<std::span<const Example>> cumulative_train(std::size_t k) const {
    return cumulative(train, k);
  }
  std::vector<std::span<const Example>> cumulative_test(std::size_t k) const {
    return cumulative(test, k);
  }
};

inline std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> tokens;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    const std::size_t start = i;
    while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i > start) tokens.emplace_back(text.substr(start, i - start));
  }
  return tokens;
}

inline std::string join_tokens(std::span<const std::string> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus ingestion

namespace detail {

inline TokenSpan parse_span(const nlohmann::json& value, std::string_view field, std::size_t line) {
  if (!value.is_array() || value.size() != 2 || !value[0].is_number_unsigned() ||
      !value[1].is_number_unsigned()) {
    throw ParseError(std::string(field) + " must be a [begin, end) pair of token indices", line);
  }
  return {value[0].get<std::size_t>(), value[1].get<std::size_t>()};
}

inline void check_span(const TokenSpan& span, std::size_t n_tokens, std::string_view field,
                       std::size_t line) {
  if (span.begin >= span.end || span.end > n_tokens) {
    throw ParseError(std::string(field) + " [" + std::to_string(span.begin) + ", " +
                         std::to_string(span.end) + ") outside text of " +
                         std::to_string(n_tokens) + " tokens",
                     line);
  }
}

inline Example parse_jsonl_record(std::string_view text, std::size_t line) {
  nlohmann::json record;
  try {
    record = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("malformed JSON: ") + e.what(), line);
  }
  if (!record.is_object()) throw ParseError("record is not an object", line);
  for (const char* field : {"id", "text", "head_span", "label"}) {
    if (!record.contains(field)) throw ParseError(std::string("missing field '") + field + "'", line);
  }
  if (!record["id"].is_string() || !record["text"].is_string() || !record["label"].is_string()) {
    throw ParseError("id, text and label must be strings", line);
  }
  Example example;
  example.id = record["id"].get<std::string>();
  example.tokens = split_whitespace(record["text"].get<std::string>());
  example.label = record["label"].get<std::string>();
  if (example.id.empty()) throw ParseError("empty id", line);
  if (example.label.empty()) throw ParseError("empty label", line);
  example.head_span = parse_span(record["head_span"], "head_span", line);
  check_span(example.head_span, example.tokens.size(), "head_span", line);
  if (record.contains("tail_span") && !record["tail_span"].is_null()) {
    example.tail_span = parse_span(record["tail_span"], "tail_span", line);
    check_span(*example.tail_span, example.tokens.size(), "tail_span", line);
  }
  return example;
}

}  // namespace detail

/// Reads line-delimited records `{id, text, head_span, tail_span?, label}`.
/// Blank lines are skipped; duplicate ids are rejected.
inline std::vector<Example> load_corpus(std::istream& in, std::string_view format = "jsonl") {
  if (format != "jsonl") throw InvalidArgument("unknown corpus format '" + std::string(format) + "'");
  std::vector<Example> examples;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Example example = detail::parse_jsonl_record(line, line_no);
    if (!seen.insert(example.id).second) {
      throw ValidationError("line " + std::to_string(line_no) + ": duplicate id '" + example.id + "'");
    }
    examples.push_back(std::move(example));
  }
  return examples;
}

inline std::vector<Example> load_corpus(const std::filesystem::path& path,
                                        std::string_view format = "jsonl") {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open corpus " + path.string());
  return load_corpus(in, format);
}

inline nlohmann::json to_json(const Example& example) {
  nlohmann::json record{{"id", example.id},
                        {"text", join_tokens(example.tokens)},
                        {"head_span", {example.head_span.begin, example.head_span.end}},
                        {"label", example.label}};
  if (example.tail_span) record["tail_span"] = {example.tail_span->begin, example.tail_span->end};
  return record;
}

inline void write_corpus(std::ostream& out, std::span<const Example> examples) {
  for (const Example& example : examples) out << to_json(example).dump() << '\n';
}

inline std::vector<std::string> label_set(std::span<const Example> examples) {
  std::set<std::string> labels;
  for (const Example& example : examples) labels.insert(example.label);
  return {labels.begin(), labels.end()};
}

// ---------------------------------------------------------------------------
// Task and data splits

/// Seeded shuffle of the sorted label set followed by round-robin assignment,
/// so cluster sizes differ by at most one.
inline std::vector<SchemaCluster> split_tasks(std::vector<std::string> labels,
                                              std::size_t num_clusters, std::uint64_t seed) {
  std::sort(labels.begin(), labels.end());
  labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
  if (num_clusters == 0) throw InvalidArgument("num_clusters must be >= 1");
  if (num_clusters > labels.size()) {
    throw InvalidArgument("num_clusters " + std::to_string(num_clusters) + " exceeds " +
                          std::to_string(labels.size()) + " labels");
  }
  Rng rng(seed);
  rng.shuffle(labels);
  std::vector<SchemaCluster> clusters(num_clusters);
  for (std::size_t i = 0; i < num_clusters; ++i) clusters[i].index = i + 1;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    clusters[i % num_clusters].types.push_back(labels[i]);
  }
  return clusters;
}

/// Reads `{"1": ["type", ...], "2": [...]}`: task index to its schema types.
inline std::vector<SchemaCluster> load_split_config(std::istream& in) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("split config: ") + e.what());
  }
  if (!doc.is_object() || doc.empty()) throw ParseError("split config must be a non-empty object");
  std::map<std::size_t, std::vector<std::string>> by_index;
  for (const auto& [key, types] : doc.items()) {
    std::size_t index = 0;
    try {
      std::size_t used = 0;
      index = std::stoul(key, &used);
      if (used != key.size()) throw std::invalid_argument(key);
    } catch (const std::exception&) {
      throw ParseError("split config key '" + key + "' is not a task index");
    }
    if (!types.is_array() || types.empty()) {
      throw ParseError("task " + key + " must list at least one type");
    }
    for (const auto& type : types) {
      if (!type.is_string()) throw ParseError("task " + key + " has a non-string type");
      by_index[index].push_back(type.get<std::string>());
    }
  }
  std::vector<SchemaCluster> clusters;
  std::size_t expected = 1;
  for (auto& [index, types] : by_index) {
    if (index != expected) throw ParseError("task indices must be 1..L without gaps");
    clusters.push_back({index, std::move(types)});
    ++expected;
  }
  return clusters;
}

inline std::vector<SchemaCluster> load_split_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open split config " + path.string());
  return load_split_config(in);
}

/// Throws unless the clusters are pairwise disjoint and cover `labels` exactly.
inline void check_clusters(std::span<const SchemaCluster> clusters,
                           std::span<const std::string> labels) {
  std::unordered_map<std::string, std::size_t> owner;
  for (const SchemaCluster& cluster : clusters) {
    if (cluster.types.empty()) {
      throw ValidationError("cluster " + std::to_string(cluster.index) + " is empty");
    }
    for (const std::string& type : cluster.types) {
      if (!owner.emplace(type, cluster.index).second) {
        throw ValidationError("type '" + type + "' appears in more than one cluster");
      }
    }
  }
  if (owner.size() != labels.size()) {
    throw ValidationError("clusters cover " + std::to_string(owner.size()) + " types, corpus has " +
                          std::to_string(labels.size()));
  }
  for (const std::string& label : labels) {
    if (!owner.contains(label)) throw ValidationError("label '" + label + "' is in no cluster");
  }
}

/// Per-split counts by largest remainder; ties go to the earlier split.
inline std::array<std::size_t, 3> partition_sizes(std::size_t n, const SplitRatios& ratios) {
  const std::array<double, 3> r{ratios.train, ratios.valid, ratios.test};
  for (double value : r) {
    if (!(value > 0.0)) throw InvalidArgument("split ratios must be positive");
  }
  if (std::abs(r[0] + r[1] + r[2] - 1.0) > 1e-9) throw InvalidArgument("split ratios must sum to 1");
  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> remainder{};
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double exact = static_cast<double>(n) * r[i];
    sizes[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    remainder[i] = exact - static_cast<double>(sizes[i]);
    assigned += sizes[i];
  }
  while (assigned < n) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < 3; ++i) {
      if (remainder[i] > remainder[best] + 1e-12) best = i;
    }
    ++sizes[best];
    remainder[best] = -1.0;
    ++assigned;
  }
  return sizes;
}

inline ExamplePartition split_examples(std::vector<Example> examples, const SplitRatios& ratios,
                                       std::uint64_t seed) {
  if (examples.empty()) throw InvalidArgument("cannot split an empty example list");
  const auto sizes = partition_sizes(examples.size(), ratios);
  Rng rng(seed);
  rng.shuffle(examples);
  ExamplePartition out;
  auto first = std::make_move_iterator(examples.begin());
  out.train.assign(first, first + static_cast<std::ptrdiff_t>(sizes[0]));
  first += static_cast<std::ptrdiff_t>(sizes[0]);
  out.valid.assign(first, first + static_cast<std::ptrdiff_t>(sizes[1]));
  first += static_cast<std::ptrdiff_t>(sizes[1]);
  out.test.assign(first, std::make_move_iterator(examples.end()));
  return out;
}

/// Assigns task indices from `clusters` and splits every task independently
/// with a seed derived from (seed, task index).
inline TaskSequence build_task_sequence(std::vector<Example> examples,
                                        std::vector<SchemaCluster> clusters,
                                        const SplitRatios& ratios, std::uint64_t seed) {
  const auto labels = label_set(examples);
  check_clusters(clusters, labels);
  std::unordered_map<std::string, std::size_t> owner;
  for (const SchemaCluster& cluster : clusters) {
    for (const std::string& type : cluster.types) owner[type] = cluster.index;
  }
  std::vector<std::vector<Example>> per_task(clusters.size());
  for (Example& example : examples) {
    example.task_index = owner.at(example.label);
    per_task[example.task_index - 1].push_back(std::move(example));
  }
  TaskSequence sequence;
  sequence.clusters = std::move(clusters);
  for (std::size_t k = 0; k < per_task.size(); ++k) {
    if (per_task[k].empty()) {
      throw ValidationError("task " + std::to_string(k + 1) + " has no examples");
    }
    auto parts = split_examples(std::move(per_task[k]), ratios,
                                derive_seed(seed, "split-examples/" + std::to_string(k + 1)));
    sequence.train.push_back(std::move(parts.train));
    sequence.valid.push_back(std::move(parts.valid));
    sequence.test.push_back(std::move(parts.test));
  }
  return sequence;
}

// ---------------------------------------------------------------------------
// Markers and prompt templates

struct PreprocessedInput {
  std::vector<std::string> tokens;
  std::size_t template_begin = 0;  // first token of the appended prompt

  std::string text() const { return join_tokens(tokens); }
};

inline constexpr std::string_view kHeadOpen = "[E1]";
inline constexpr std::string_view kHeadClose = "[/E1]";
inline constexpr std::string_view kTailOpen = "[E2]";
inline constexpr std::string_view kTailClose = "[/E2]";
inline constexpr std::string_view kMask = "[MASK]";

inline PreprocessedInput preprocess(const Example& example, TaskKind kind) {
  const std::size_t n = example.tokens.size();
  const auto valid = [n](const TokenSpan& span) { return span.begin < span.end && span.end <= n; };
  if (!valid(example.head_span)) throw InvalidArgument("head span outside text of " + example.id);
  if (kind == TaskKind::relation_extraction) {
    if (!example.tail_span) throw InvalidArgument("relation example " + example.id + " lacks a tail span");
    if (!valid(*example.tail_span)) throw InvalidArgument("tail span outside text of " + example.id);
    const TokenSpan& h = example.head_span;
    const TokenSpan& t = *example.tail_span;
    if (h.begin < t.end && t.begin < h.end) {
      throw InvalidArgument("head and tail spans overlap in " + example.id);
    }
  } else if (example.tail_span) {
    throw InvalidArgument("entity-typing example " + example.id + " carries a tail span");
  }

  PreprocessedInput out;
  out.tokens.reserve(n + 16);
  for (std::size_t i = 0; i < n; ++i) {
    if (i == example.head_span.begin) out.tokens.emplace_back(kHeadOpen);
    if (example.tail_span && i == example.tail_span->begin) out.tokens.emplace_back(kTailOpen);
    out.tokens.push_back(example.tokens[i]);
    if (i + 1 == example.head_span.end) out.tokens.emplace_back(kHeadClose);
    if (example.tail_span && i + 1 == example.tail_span->end) out.tokens.emplace_back(kTailClose);
  }
  out.template_begin = out.tokens.size();

  const auto span_tokens = [&](const TokenSpan& span) {
    return std::span<const std::string>(example.tokens).subspan(span.begin, span.size());
  };
  const auto append = [&](std::string_view words) {
    for (auto& token : split_whitespace(words)) out.tokens.push_back(std::move(token));
  };
  const auto append_entity = [&](const TokenSpan& span) {
    for (const std::string& token : span_tokens(span)) out.tokens.push_back(token);
  };
  append("In this sentence,");
  if (kind == TaskKind::entity_typing) {
    append_entity(example.head_span);
    append("is a [MASK].");
  } else {
    append_entity(*example.tail_span);
    append("is the [MASK] of");
    append_entity(example.head_span);
    out.tokens.back() += '.';
  }
  return out;
}

/// Inverse of the marker insertion: drops the template and the marker tokens.
inline std::vector<std::string> strip_markers(const PreprocessedInput& input) {
  std::vector<std::string> tokens;
  for (std::size_t i = 0; i < input.template_begin; ++i) {
    const std::string& token = input.tokens[i];
    if (token == kHeadOpen || token == kHeadClose || token == kTailOpen || token == kTailClose) continue;
    tokens.push_back(token);
  }
  return tokens;
}

/// Shrinks the sentence to at most `max_tokens` tokens around its entity spans.
/// Returns the example unchanged when it already fits or when the spans alone
/// are wider than the window.
inline Example clip_to_window(const Example& example, std::size_t max_tokens) {
  const std::size_t n = example.tokens.size();
  if (max_tokens == 0 || n <= max_tokens) return example;
  std::size_t lo = example.head_span.begin;
  std::size_t hi = example.head_span.end;
  if (example.tail_span) {
    lo = std::min(lo, example.tail_span->begin);
    hi = std::max(hi, example.tail_span->end);
  }
  if (hi - lo > max_tokens) return example;
  const std::size_t slack = max_tokens - (hi - lo);
  std::size_t start = lo >= slack / 2 ? lo - slack / 2 : 0;
  start = std::min(start, n - max_tokens);
  Example clipped = example;
  clipped.tokens.assign(example.tokens.begin() + static_cast<std::ptrdiff_t>(start),
                        example.tokens.begin() + static_cast<std::ptrdiff_t>(start + max_tokens));
  clipped.head_span = {example.head_span.begin - start, example.head_span.end - start};
  if (example.tail_span) {
    clipped.tail_span = TokenSpan{example.tail_span->begin - start, example.tail_span->end - start};
  }
  return clipped;
}

}  // namespace conpet
