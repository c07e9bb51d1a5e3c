#pragma once

// A task sequence with every example preprocessed and hashed once, labelled
// both within its task (local) and in the concatenated class space of all
// tasks in sequence order (global).

#include <cstddef>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "conpet/core_data.hpp"
#include "conpet/encoder.hpp"
#include "conpet/errors.hpp"

namespace conpet {

struct Instance {
  std::string id;
  SparseVector features;
  std::size_t task = 0;  // 1-based
  std::size_t local_label = 0;
  std::size_t global_label = 0;
};

using InstanceViews = std::vector<std::span<const Instance>>;

struct PreparedSequence {
  std::vector<SchemaCluster> clusters;
  std::vector<std::size_t> class_offset;  // global index of each task's first class
  std::vector<std::vector<Instance>> train;
  std::vector<std::vector<Instance>> valid;
  std::vector<std::vector<Instance>> test;

  std::size_t num_tasks() const noexcept { return clusters.size(); }
  std::size_t task_size(std::size_t k) const { return clusters.at(k - 1).types.size(); }

  /// Number of classes in tasks 1..k.
  std::size_t classes_through(std::size_t k) const {
    return k == 0 ? 0 : class_offset.at(k - 1) + task_size(k);
  }

  const std::string& label_name(std::size_t global) const {
    for (std::size_t k = clusters.size(); k > 0; --k) {
      if (global >= class_offset[k - 1]) return clusters[k - 1].types.at(global - class_offset[k - 1]);
    }
    throw InvalidArgument("global label out of range");
  }

  std::vector<std::string> labels_of_task(std::size_t k) const { return clusters.at(k - 1).types; }

  /// Views of tasks first..last (1-based, inclusive); empty when first > last.
  static InstanceViews views(const std::vector<std::vector<Instance>>& per_task, std::size_t first,
                             std::size_t last) {
    InstanceViews out;
    for (std::size_t k = first; k <= last && k <= per_task.size(); ++k) out.emplace_back(per_task[k - 1]);
    return out;
  }
};

/// Preprocesses and hashes every example. `max_input_tokens` (0 = unlimited)
/// clips the sentence around its entity spans before markers are inserted.
inline PreparedSequence prepare(const TaskSequence& sequence, const Encoder& encoder, TaskKind kind,
                                std::size_t max_input_tokens = 0) {
  PreparedSequence out;
  out.clusters = sequence.clusters;
  std::unordered_map<std::string, std::pair<std::size_t, std::size_t>> label_index;
  std::size_t offset = 0;
  for (const SchemaCluster& cluster : sequence.clusters) {
    out.class_offset.push_back(offset);
    for (std::size_t i = 0; i < cluster.types.size(); ++i) {
      label_index[cluster.types[i]] = {cluster.index, i};
    }
    offset += cluster.types.size();
  }
  const auto convert = [&](const std::vector<std::vector<Example>>& per_task) {
    std::vector<std::vector<Instance>> result(per_task.size());
    for (std::size_t k = 0; k < per_task.size(); ++k) {
      result[k].reserve(per_task[k].size());
      for (const Example& example : per_task[k]) {
        const auto it = label_index.find(example.label);
        if (it == label_index.end()) throw ValidationError("label '" + example.label + "' is in no cluster");
        if (it->second.first != k + 1) {
          throw ValidationError("example " + example.id + " filed under the wrong task");
        }
        const Example clipped = clip_to_window(example, max_input_tokens);
        Instance instance;
        instance.id = example.id;
        instance.features = encoder.features(preprocess(clipped, kind));
        instance.task = k + 1;
        instance.local_label = it->second.second;
        instance.global_label = out.class_offset[k] + it->second.second;
        result[k].push_back(std::move(instance));
      }
    }
    return result;
  };
  out.train = convert(sequence.train);
  out.valid = convert(sequence.valid);
  out.test = convert(sequence.test);
  return out;
}

}  // namespace conpet
