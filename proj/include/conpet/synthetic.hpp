#pragma once

// Synthetic knowledge-typing benchmarks. Every type owns a few keyword tokens
// and every task a few topic tokens; sentences mix keywords, topic words and
// shared filler around an entity token. Types are linearly separable in the
// hashed n-gram space by construction.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "conpet/core_data.hpp"
#include "conpet/rng.hpp"

namespace conpet {

struct SyntheticSpec {
  std::size_t num_tasks = 10;
  std::size_t types_per_task = 3;
  std::size_t examples_per_type = 60;
  std::size_t keywords_per_type = 4;
  std::size_t keywords_per_example = 4;
  std::size_t topic_words_per_task = 4;
  std::size_t topic_words_per_example = 2;
  std::size_t filler_vocab = 10;
  std::size_t filler_per_example = 2;
  std::size_t entity_vocab = 5;  // entity tokens E<n> (and F<n>) drawn from this many names
  /// Tasks (1,2), (3,4), ... share topic words, and type i of the second task
  /// of a pair shares `shared_keywords` keywords with type i of the first.
  bool confusable_pairs = false;
  std::size_t shared_keywords = 2;
  TaskKind kind = TaskKind::entity_typing;
  std::uint64_t seed = 0;
};

struct SyntheticBenchmark {
  std::vector<Example> examples;
  std::vector<SchemaCluster> clusters;
};

inline std::string synthetic_label(std::size_t task, std::size_t type) {
  return "t" + std::to_string(task) + "_type" + std::to_string(type);
}

inline SyntheticBenchmark make_synthetic(const SyntheticSpec& spec) {
  if (spec.num_tasks == 0 || spec.types_per_task == 0 || spec.examples_per_type == 0 ||
      spec.entity_vocab == 0 || (spec.filler_per_example > 0 && spec.filler_vocab == 0)) {
    throw InvalidArgument("synthetic benchmark needs tasks, types and examples");
  }
  if (spec.keywords_per_example > spec.keywords_per_type ||
      spec.topic_words_per_example > spec.topic_words_per_task) {
    throw InvalidArgument("per-example word counts exceed the vocabulary");
  }
  Rng rng(spec.seed);
  SyntheticBenchmark out;
  const auto topic_owner = [&](std::size_t task) {
    return spec.confusable_pairs && task % 2 == 0 ? task - 1 : task;
  };
  const auto keyword = [&](std::size_t task, std::size_t type, std::size_t i) {
    if (spec.confusable_pairs && task % 2 == 0 && i < spec.shared_keywords) {
      return "kw_" + synthetic_label(task - 1, type) + "_" + std::to_string(i);
    }
    return "kw_" + synthetic_label(task, type) + "_" + std::to_string(i);
  };
  std::size_t serial = 0;
  for (std::size_t task = 1; task <= spec.num_tasks; ++task) {
    SchemaCluster cluster{task, {}};
    for (std::size_t type = 1; type <= spec.types_per_task; ++type) {
      const std::string label = synthetic_label(task, type);
      cluster.types.push_back(label);
      for (std::size_t n = 0; n < spec.examples_per_type; ++n) {
        std::vector<std::string> words;
        std::vector<std::size_t> picks(spec.keywords_per_type);
        for (std::size_t i = 0; i < picks.size(); ++i) picks[i] = i;
        rng.shuffle(picks);
        for (std::size_t i = 0; i < spec.keywords_per_example; ++i) {
          words.push_back(keyword(task, type, picks[i]));
        }
        std::vector<std::size_t> topics(spec.topic_words_per_task);
        for (std::size_t i = 0; i < topics.size(); ++i) topics[i] = i;
        rng.shuffle(topics);
        for (std::size_t i = 0; i < spec.topic_words_per_example; ++i) {
          words.push_back("topic" + std::to_string(topic_owner(task)) + "_" + std::to_string(topics[i]));
        }
        for (std::size_t i = 0; i < spec.filler_per_example; ++i) {
          words.push_back("w" + std::to_string(rng.index(spec.filler_vocab)));
        }
        rng.shuffle(words);
        Example example;
        example.id = "syn-" + std::to_string(serial++);
        example.label = label;
        const std::string head = "E" + std::to_string(rng.index(spec.entity_vocab));
        const std::size_t head_at = rng.index(words.size() + 1);
        words.insert(words.begin() + static_cast<std::ptrdiff_t>(head_at), head);
        example.head_span = {head_at, head_at + 1};
        if (spec.kind == TaskKind::relation_extraction) {
          const std::string tail = "F" + std::to_string(rng.index(spec.entity_vocab));
          std::size_t tail_at = rng.index(words.size() + 1);
          if (tail_at <= head_at) {
            tail_at = head_at + 1;
          }
          words.insert(words.begin() + static_cast<std::ptrdiff_t>(tail_at), tail);
          example.tail_span = TokenSpan{tail_at, tail_at + 1};
        }
        example.tokens = std::move(words);
        out.examples.push_back(std::move(example));
      }
    }
    out.clusters.push_back(std::move(cluster));
  }
  return out;
}

}  // namespace conpet
