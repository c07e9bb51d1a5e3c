#pragma once

// Shared fixtures: small synthetic sequences, scratch directories, and
// oracles written independently of the library code under test.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "conpet/conpet.hpp"

namespace conpet::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("conpet-" + tag + "-" + std::to_string(rd()) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;

  const std::filesystem::path& path() const noexcept { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

/// A prepared synthetic sequence together with the encoder that hashed it.
struct Fixture {
  std::unique_ptr<Encoder> encoder;
  TaskSequence sequence;
  PreparedSequence prepared;
};

inline Fixture make_fixture(SyntheticSpec spec, EncoderConfig encoder_config, std::uint64_t split_seed = 11) {
  Fixture f;
  auto bench = make_synthetic(spec);
  f.sequence = build_task_sequence(std::move(bench.examples), std::move(bench.clusters), {}, split_seed);
  f.encoder = std::make_unique<Encoder>(std::move(encoder_config));
  f.prepared = prepare(f.sequence, *f.encoder, spec.kind);
  return f;
}

/// Small and fast: 5 tasks, 2 types each, 512-dim hashing, 32 hidden units.
inline Fixture small_fixture(std::size_t tasks = 5, std::uint64_t seed = 3) {
  SyntheticSpec spec;
  spec.num_tasks = tasks;
  spec.types_per_task = 2;
  spec.examples_per_type = 20;
  spec.seed = seed;
  return make_fixture(spec, EncoderConfig{512, 32, seed + 100, {1, 2}});
}

inline TrainingOptions fast_training(double lr = 1e-2) {
  TrainingOptions t;
  t.adam.learning_rate = lr;
  t.max_epochs = 0;
  t.seed = 5;
  return t;
}

inline ReplayPlan small_plan(std::size_t iter1 = 20, std::size_t iter2 = 20) {
  ReplayPlan p;
  p.iter1 = iter1;
  p.iter2 = iter2;
  return p;
}

/// Random sparse unit vector over `dim` buckets, for driving modules directly.
inline SparseVector random_features(Rng& rng, std::size_t dim, std::size_t nnz) {
  std::vector<std::pair<std::uint32_t, double>> raw;
  for (std::size_t i = 0; i < nnz; ++i) {
    raw.emplace_back(static_cast<std::uint32_t>(rng.index(dim)), rng.gaussian());
  }
  std::sort(raw.begin(), raw.end());
  SparseVector v;
  for (const auto& [index, value] : raw) {
    if (!v.entries.empty() && v.entries.back().first == index) {
      v.entries.back().second += value;
    } else {
      v.entries.emplace_back(index, value);
    }
  }
  const double norm = v.norm();
  for (auto& e : v.entries) e.second /= norm;
  return v;
}

/// Dense reference forward pass: s = W tanh(W0 phi + B A phi) + b with every
/// product spelled out over dense vectors.
inline std::vector<double> reference_logits(const PetModule& m, const Encoder& enc, const SparseVector& phi) {
  const std::size_t F = enc.feature_dim();
  const std::size_t H = enc.hidden_dim();
  std::vector<double> dense(F, 0.0);
  for (const auto& [i, v] : phi.entries) dense[i] = v;
  std::vector<double> u(m.rank(), 0.0);
  for (std::size_t r = 0; r < m.rank(); ++r) {
    for (std::size_t j = 0; j < F; ++j) u[r] += m.a()(r, j) * dense[j];
  }
  std::vector<double> h(H, 0.0);
  for (std::size_t i = 0; i < H; ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < F; ++j) z += enc.weight(i, j) * dense[j];
    for (std::size_t r = 0; r < m.rank(); ++r) z += m.b()(i, r) * u[r];
    h[i] = std::tanh(z);
  }
  std::vector<double> s(m.num_classes(), 0.0);
  for (std::size_t c = 0; c < s.size(); ++c) {
    s[c] = m.head_b()[c];
    for (std::size_t i = 0; i < H; ++i) s[c] += m.head_w()(c, i) * h[i];
  }
  return s;
}

/// Mean cross-entropy computed from reference_logits, for finite differences.
inline double reference_loss(const PetModule& m, const Encoder& enc,
                             const std::vector<std::pair<SparseVector, std::size_t>>& batch) {
  double total = 0.0;
  for (const auto& [phi, label] : batch) {
    const auto s = reference_logits(m, enc, phi);
    double mx = s[0];
    for (double v : s) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : s) z += std::exp(v - mx);
    total += mx + std::log(z) - s[label];
  }
  return total / static_cast<double>(batch.size());
}

/// Random module with B != 0 so every tensor receives gradient.
inline PetModule random_module(Rng& rng, const Encoder& enc, std::size_t rank, std::size_t classes,
                               std::uint64_t seed) {
  std::vector<std::string> ids;
  for (std::size_t c = 0; c < classes; ++c) ids.push_back("c" + std::to_string(c));
  PetModule m(1, {enc.feature_dim(), enc.hidden_dim(), rank}, ids, seed, 0.5);
  for (double& v : m.mutable_b().data) v = rng.gaussian() * 0.5;
  for (double& v : m.mutable_head_b()) v = rng.gaussian() * 0.1;
  return m;
}

/// Largest relative difference between analytic gradients and central finite
/// differences of reference_loss over every tunable entry that the batch
/// touches. Entries whose analytic and numeric values are both below `floor`
/// in magnitude are compared against `floor`.
inline double max_gradient_error(PetModule m, const Encoder& enc,
                                 const std::vector<std::pair<SparseVector, std::size_t>>& batch,
                                 double step = 1e-5, double floor = 1e-6) {
  std::vector<LabeledFeatures> labeled;
  for (const auto& [phi, label] : batch) labeled.push_back({&phi, label});
  const auto analytic = loss_and_grads(m, enc, labeled).grads;
  double worst = 0.0;
  const auto check = [&](std::vector<double>& params, const std::vector<double>& grads,
                         const std::vector<std::size_t>& indices) {
    for (std::size_t i : indices) {
      const double saved = params[i];
      params[i] = saved + step;
      const double up = reference_loss(m, enc, batch);
      params[i] = saved - step;
      const double down = reference_loss(m, enc, batch);
      params[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double scale = std::max({std::abs(numeric), std::abs(grads[i]), floor});
      worst = std::max(worst, std::abs(numeric - grads[i]) / scale);
    }
  };
  const auto all = [](std::size_t n) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    return idx;
  };
  // A only has gradient in the columns of features present in the batch.
  std::vector<std::size_t> a_idx;
  for (const auto& [phi, label] : batch) {
    for (const auto& [col, v] : phi.entries) {
      for (std::size_t r = 0; r < m.rank(); ++r) a_idx.push_back(r * enc.feature_dim() + col);
    }
  }
  std::sort(a_idx.begin(), a_idx.end());
  a_idx.erase(std::unique(a_idx.begin(), a_idx.end()), a_idx.end());
  // Every other A entry must have exactly zero gradient.
  for (std::size_t i = 0, j = 0; i < analytic.a.data.size(); ++i) {
    if (j < a_idx.size() && a_idx[j] == i) {
      ++j;
    } else if (analytic.a.data[i] != 0.0) {
      return std::numeric_limits<double>::infinity();
    }
  }
  check(m.mutable_a().data, analytic.a.data, a_idx);
  check(m.mutable_b().data, analytic.b.data, all(analytic.b.data.size()));
  check(m.mutable_head_w().data, analytic.head_w.data, all(analytic.head_w.data.size()));
  check(m.mutable_head_b(), analytic.head_b, all(analytic.head_b.size()));
  return worst;
}

}  // namespace conpet::testing
