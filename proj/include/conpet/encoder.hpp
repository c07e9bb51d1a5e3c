#pragma once

// Frozen stand-in for the backbone: signed feature hashing of token n-grams,
// L2 normalisation, then a fixed seeded Gaussian projection and tanh.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "conpet/core_data.hpp"
#include "conpet/errors.hpp"
#include "conpet/rng.hpp"

namespace conpet {

struct EncoderConfig {
  std::size_t feature_dim = 4096;
  std::size_t hidden_dim = 256;
  std::uint64_t seed = 0;
  std::vector<std::size_t> ngram_orders{1, 2};

  bool operator==(const EncoderConfig&) const = default;
};

inline void validate(const EncoderConfig& config) {
  if (config.hidden_dim < 1) throw InvalidArgument("hidden_dim must be >= 1");
  if (config.feature_dim < config.hidden_dim) throw InvalidArgument("feature_dim must be >= hidden_dim");
  if (config.feature_dim > (std::size_t{1} << 31)) throw InvalidArgument("feature_dim too large");
  if (config.ngram_orders.empty()) throw InvalidArgument("ngram_orders must not be empty");
  for (std::size_t order : config.ngram_orders) {
    if (order < 1) throw InvalidArgument("n-gram orders must be >= 1");
  }
}

/// Sorted (index, value) pairs with unique indices.
struct SparseVector {
  std::vector<std::pair<std::uint32_t, double>> entries;

  double norm() const {
    double sum = 0.0;
    for (const auto& [index, value] : entries) sum += value * value;
    return std::sqrt(sum);
  }
  bool operator==(const SparseVector&) const = default;
};

/// Bucket and sign of one n-gram. The n-gram is keyed as "<order>\x1f<tok>\x1f<tok>...".
struct HashedFeature {
  std::uint32_t bucket;
  double sign;
};

inline HashedFeature hash_ngram(std::span<const std::string> gram, std::size_t feature_dim) {
  std::uint64_t hash = fnv1a64(std::to_string(gram.size()));
  for (const std::string& token : gram) {
    hash = fnv1a64("\x1f", hash);
    hash = fnv1a64(token, hash);
  }
  return {static_cast<std::uint32_t>(hash % feature_dim), (hash >> 63) ? -1.0 : 1.0};
}

/// Un-normalised signed n-gram counts, merged per bucket.
inline SparseVector hashed_counts(std::span<const std::string> tokens,
                                  const EncoderConfig& config) {
  std::vector<std::pair<std::uint32_t, double>> raw;
  for (std::size_t order : config.ngram_orders) {
    if (tokens.size() < order) continue;
    for (std::size_t i = 0; i + order <= tokens.size(); ++i) {
      const auto feature = hash_ngram(tokens.subspan(i, order), config.feature_dim);
      raw.emplace_back(feature.bucket, feature.sign);
    }
  }
  std::sort(raw.begin(), raw.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  SparseVector out;
  for (const auto& [bucket, value] : raw) {
    if (!out.entries.empty() && out.entries.back().first == bucket) {
      out.entries.back().second += value;
    } else {
      out.entries.emplace_back(bucket, value);
    }
  }
  std::erase_if(out.entries, [](const auto& entry) { return entry.second == 0.0; });
  return out;
}

/// The example representation h = tanh(W0 phi).
struct Representation {
  std::vector<double> values;
};

class Encoder {
 public:
  explicit Encoder(EncoderConfig config) : config_(std::move(config)) {
    validate(config_);
    const std::size_t rows = config_.hidden_dim;
    const std::size_t cols = config_.feature_dim;
    const double scale = 1.0 / std::sqrt(static_cast<double>(cols));
    weights_.resize(rows * cols);
    Rng rng(config_.seed);
    // Drawn in row-major order, stored column-major so each hashed feature
    // touches one contiguous column.
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) weights_[c * rows + r] = rng.gaussian() * scale;
    }
  }

  Encoder(const Encoder&) = delete;
  Encoder& operator=(const Encoder&) = delete;

  const EncoderConfig& config() const noexcept { return config_; }
  std::size_t hidden_dim() const noexcept { return config_.hidden_dim; }
  std::size_t feature_dim() const noexcept { return config_.feature_dim; }

  /// phi(input): L2-normalised signed hashed n-gram counts.
  SparseVector features(std::span<const std::string> tokens) const {
    if (tokens.empty()) throw InvalidArgument("cannot encode an empty token sequence");
    SparseVector phi = hashed_counts(tokens, config_);
    const double norm = phi.norm();
    if (!(norm > 0.0) || !std::isfinite(norm)) {
      throw NumericalError("hashed features cancel to the zero vector");
    }
    for (auto& entry : phi.entries) entry.second /= norm;
    return phi;
  }
  SparseVector features(const PreprocessedInput& input) const { return features(input.tokens); }

  /// W0 phi, before the nonlinearity. Every call counts as one backbone forward.
  std::vector<double> project(const SparseVector& phi) const {
    calls_.fetch_add(1, std::memory_order_relaxed);
    std::vector<double> out(config_.hidden_dim, 0.0);
    for (const auto& [index, value] : phi.entries) {
      if (index >= config_.feature_dim) throw InvalidArgument("feature index outside encoder");
      const double* column = weights_.data() + static_cast<std::size_t>(index) * config_.hidden_dim;
      for (std::size_t r = 0; r < config_.hidden_dim; ++r) out[r] += column[r] * value;
    }
    return out;
  }

  Representation encode(const SparseVector& phi) const {
    Representation rep{project(phi)};
    for (double& v : rep.values) v = std::tanh(v);
    return rep;
  }
  Representation encode(const PreprocessedInput& input) const { return encode(features(input)); }

  double weight(std::size_t row, std::size_t col) const {
    return weights_[col * config_.hidden_dim + row];
  }

  std::uint64_t checksum() const noexcept {
    return fnv1a64_bytes(weights_.data(), weights_.size() * sizeof(double));
  }

  std::uint64_t forward_calls() const noexcept { return calls_.load(std::memory_order_relaxed); }

 private:
  EncoderConfig config_;
  std::vector<double> weights_;
  mutable std::atomic<std::uint64_t> calls_{0};
};

}  // namespace conpet
