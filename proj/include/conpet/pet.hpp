#pragma once

// PET module: a rank-r adapter (B A) added to the frozen projection W0 plus a
// linear classification head.
//
//   u  = A phi                (rank)
//   z  = W0 phi + B u         (hidden)
//   h  = tanh(z)
//   s  = W h + b              (n_classes)
//
// Only A, B, W and b are tunable. Everything is computed in double precision.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "conpet/encoder.hpp"
#include "conpet/errors.hpp"
#include "conpet/rng.hpp"

namespace conpet {

/// Dense row-major matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  bool operator==(const Matrix&) const = default;
};

struct PetShape {
  std::size_t feature_dim = 0;
  std::size_t hidden_dim = 0;
  std::size_t rank = 4;

  bool operator==(const PetShape&) const = default;
};

class PetModule {
 public:
  PetModule() = default;

  /// A ~ N(0, 1/r), B = 0, head W ~ N(0, head_init_std^2), head b = 0.
  PetModule(int module_id, PetShape shape, std::vector<std::string> class_ids, std::uint64_t seed,
            double head_init_std = 0.02)
      : module_id_(module_id),
        shape_(shape),
        class_ids_(std::move(class_ids)),
        a_(shape.rank, shape.feature_dim),
        b_(shape.hidden_dim, shape.rank),
        head_w_(class_ids_.size(), shape.hidden_dim),
        head_b_(class_ids_.size(), 0.0) {
    if (shape.rank < 1) throw InvalidArgument("rank must be >= 1");
    if (shape.hidden_dim < 1 || shape.feature_dim < shape.hidden_dim) {
      throw InvalidArgument("inconsistent PET module dimensions");
    }
    if (class_ids_.empty()) throw InvalidArgument("a PET module needs at least one class");
    Rng rng(seed);
    const double a_std = 1.0 / std::sqrt(static_cast<double>(shape.rank));
    for (double& v : a_.data) v = rng.gaussian() * a_std;
    for (double& v : head_w_.data) v = rng.gaussian() * head_init_std;
  }

  int module_id() const noexcept { return module_id_; }
  const PetShape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.rank; }
  std::size_t num_classes() const noexcept { return class_ids_.size(); }
  const std::vector<std::string>& class_ids() const noexcept { return class_ids_; }
  bool frozen() const noexcept { return frozen_; }

  const Matrix& a() const noexcept { return a_; }
  const Matrix& b() const noexcept { return b_; }
  const Matrix& head_w() const noexcept { return head_w_; }
  const std::vector<double>& head_b() const noexcept { return head_b_; }

  /// Mutable parameter access for training code and tests. Throws on frozen modules.
  Matrix& mutable_a() {
    check_mutable();
    return a_;
  }
  Matrix& mutable_b() {
    check_mutable();
    return b_;
  }
  Matrix& mutable_head_w() {
    check_mutable();
    return head_w_;
  }
  std::vector<double>& mutable_head_b() {
    check_mutable();
    return head_b_;
  }

  std::size_t tunable_parameter_count() const noexcept {
    return a_.data.size() + b_.data.size() + head_w_.data.size() + head_b_.size();
  }

  std::uint64_t checksum() const noexcept {
    std::uint64_t h = fnv1a64_bytes(a_.data.data(), a_.data.size() * sizeof(double));
    h = fnv1a64_bytes(b_.data.data(), b_.data.size() * sizeof(double), h);
    h = fnv1a64_bytes(head_w_.data.data(), head_w_.data.size() * sizeof(double), h);
    return fnv1a64_bytes(head_b_.data(), head_b_.size() * sizeof(double), h);
  }

  void check_compatible(const Encoder& encoder) const {
    if (encoder.feature_dim() != shape_.feature_dim || encoder.hidden_dim() != shape_.hidden_dim) {
      throw InvalidArgument("module " + std::to_string(module_id_) +
                            " dimensions do not match the encoder");
    }
  }

  bool operator==(const PetModule&) const = default;

 private:
  friend PetModule freeze(PetModule module);
  friend PetModule expand_head(const PetModule& module, std::span<const std::string> new_classes);
  friend PetModule load_checkpoint(std::istream& in);

  void check_mutable() const {
    if (frozen_) throw FrozenModuleError("module " + std::to_string(module_id_) + " is frozen");
  }

  int module_id_ = 0;
  PetShape shape_;
  std::vector<std::string> class_ids_;
  Matrix a_;
  Matrix b_;
  Matrix head_w_;
  std::vector<double> head_b_;
  bool frozen_ = false;
};

/// Returns the module with `frozen` set. Idempotent.
inline PetModule freeze(PetModule module) {
  module.frozen_ = true;
  return module;
}

/// Appends zero-initialised head rows for `new_classes`; every other parameter
/// is copied verbatim, so existing logits are unchanged bit for bit. The
/// result is trainable even when the input was frozen.
inline PetModule expand_head(const PetModule& module, std::span<const std::string> new_classes) {
  PetModule out = module;
  out.frozen_ = false;
  const std::size_t hidden = module.shape().hidden_dim;
  for (const std::string& id : new_classes) {
    out.class_ids_.push_back(id);
    out.head_w_.data.insert(out.head_w_.data.end(), hidden, 0.0);
    ++out.head_w_.rows;
    out.head_b_.push_back(0.0);
  }
  return out;
}

/// Selector-specific expansion to `new_n_classes` task slots named "task-<i>".
inline PetModule dimension_expand(const PetModule& selector, std::size_t new_n_classes) {
  if (selector.module_id() != 0) throw InvalidArgument("dimension_expand applies to the selector (module 0)");
  if (new_n_classes <= selector.num_classes()) {
    throw InvalidArgument("dimension_expand cannot shrink or keep the head size");
  }
  std::vector<std::string> added;
  for (std::size_t i = selector.num_classes() + 1; i <= new_n_classes; ++i) {
    added.push_back("task-" + std::to_string(i));
  }
  return expand_head(selector, added);
}

// ---------------------------------------------------------------------------
// Forward pass

struct ForwardTrace {
  std::vector<double> u;       // A phi
  std::vector<double> hidden;  // tanh(z)
  std::vector<double> logits;
};

inline ForwardTrace pet_forward_trace(const PetModule& module, const Encoder& encoder,
                                      const SparseVector& phi) {
  module.check_compatible(encoder);
  const PetShape& shape = module.shape();
  ForwardTrace trace;
  trace.u.assign(shape.rank, 0.0);
  for (std::size_t r = 0; r < shape.rank; ++r) {
    const auto row = module.a().row(r);
    double acc = 0.0;
    for (const auto& [index, value] : phi.entries) acc += row[index] * value;
    trace.u[r] = acc;
  }
  trace.hidden = encoder.project(phi);
  for (std::size_t i = 0; i < shape.hidden_dim; ++i) {
    const auto row = module.b().row(i);
    double z = trace.hidden[i];
    for (std::size_t r = 0; r < shape.rank; ++r) z += row[r] * trace.u[r];
    trace.hidden[i] = std::tanh(z);
  }
  const std::size_t n = module.num_classes();
  trace.logits.assign(n, 0.0);
  for (std::size_t c = 0; c < n; ++c) {
    const auto row = module.head_w().row(c);
    double s = module.head_b()[c];
    for (std::size_t i = 0; i < shape.hidden_dim; ++i) s += row[i] * trace.hidden[i];
    trace.logits[c] = s;
  }
  return trace;
}

struct LogitVector {
  std::vector<double> values;
  int owner_module = 0;
  std::vector<std::string> class_ids;
};

inline LogitVector pet_forward(const PetModule& module, const Encoder& encoder,
                               const SparseVector& phi) {
  return {pet_forward_trace(module, encoder, phi).logits, module.module_id(), module.class_ids()};
}

inline LogitVector pet_forward(const PetModule& module, const Encoder& encoder,
                               const PreprocessedInput& input) {
  return pet_forward(module, encoder, encoder.features(input));
}

// ---------------------------------------------------------------------------
// Loss and gradients

struct PetGradients {
  Matrix a;
  Matrix b;
  Matrix head_w;
  std::vector<double> head_b;

  explicit PetGradients(const PetModule& module)
      : a(module.a().rows, module.a().cols),
        b(module.b().rows, module.b().cols),
        head_w(module.head_w().rows, module.head_w().cols),
        head_b(module.head_b().size(), 0.0) {}

  bool all_finite() const {
    const auto finite = [](std::span<const double> values) {
      return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
    };
    return finite(a.data) && finite(b.data) && finite(head_w.data) && finite(head_b);
  }
};

/// Accumulates d(loss)/d(params) for one example given d(loss)/d(logits).
inline void accumulate_backward(const PetModule& module, const SparseVector& phi,
                                const ForwardTrace& trace, std::span<const double> dlogits,
                                PetGradients& grads) {
  const PetShape& shape = module.shape();
  const std::size_t n = module.num_classes();
  std::vector<double> dz(shape.hidden_dim, 0.0);
  for (std::size_t c = 0; c < n; ++c) {
    const double g = dlogits[c];
    if (g == 0.0) continue;
    grads.head_b[c] += g;
    auto grad_row = grads.head_w.row(c);
    const auto w_row = module.head_w().row(c);
    for (std::size_t i = 0; i < shape.hidden_dim; ++i) {
      grad_row[i] += g * trace.hidden[i];
      dz[i] += g * w_row[i];
    }
  }
  for (std::size_t i = 0; i < shape.hidden_dim; ++i) {
    const double h = trace.hidden[i];
    dz[i] *= 1.0 - h * h;
  }
  std::vector<double> du(shape.rank, 0.0);
  for (std::size_t i = 0; i < shape.hidden_dim; ++i) {
    if (dz[i] == 0.0) continue;
    auto grad_row = grads.b.row(i);
    const auto b_row = module.b().row(i);
    for (std::size_t r = 0; r < shape.rank; ++r) {
      grad_row[r] += dz[i] * trace.u[r];
      du[r] += dz[i] * b_row[r];
    }
  }
  for (std::size_t r = 0; r < shape.rank; ++r) {
    if (du[r] == 0.0) continue;
    auto grad_row = grads.a.row(r);
    for (const auto& [index, value] : phi.entries) grad_row[index] += du[r] * value;
  }
}

/// Numerically stable softmax cross-entropy. Writes softmax(logits) - onehot
/// into `dlogits` (scaled by `weight`) and returns the loss.
inline double softmax_cross_entropy(std::span<const double> logits, std::size_t target,
                                    std::span<double> dlogits, double weight = 1.0) {
  const double max_logit = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double s : logits) sum += std::exp(s - max_logit);
  const double log_z = max_logit + std::log(sum);
  for (std::size_t c = 0; c < logits.size(); ++c) {
    const double p = std::exp(logits[c] - log_z);
    dlogits[c] = weight * (p - (c == target ? 1.0 : 0.0));
  }
  return log_z - logits[target];
}

struct LabeledFeatures {
  const SparseVector* features = nullptr;
  std::size_t label = 0;  // local class index
};

struct LossAndGrads {
  double loss = 0.0;
  PetGradients grads;
};

/// Mean cross-entropy over `batch` with analytic gradients for A, B, W and b.
inline LossAndGrads loss_and_grads(const PetModule& module, const Encoder& encoder,
                                   std::span<const LabeledFeatures> batch) {
  if (module.frozen()) {
    throw FrozenModuleError("loss_and_grads on frozen module " + std::to_string(module.module_id()));
  }
  if (batch.empty()) throw InvalidArgument("loss_and_grads needs a non-empty batch");
  LossAndGrads out{0.0, PetGradients(module)};
  const double weight = 1.0 / static_cast<double>(batch.size());
  std::vector<double> dlogits(module.num_classes());
  for (const LabeledFeatures& item : batch) {
    if (item.label >= module.num_classes()) {
      throw InvalidArgument("label " + std::to_string(item.label) + " outside module head");
    }
    const ForwardTrace trace = pet_forward_trace(module, encoder, *item.features);
    out.loss += weight * softmax_cross_entropy(trace.logits, item.label, dlogits, weight);
    accumulate_backward(module, *item.features, trace, dlogits, out.grads);
  }
  if (!std::isfinite(out.loss)) throw NumericalError("non-finite loss");
  return out;
}

// ---------------------------------------------------------------------------
// Optimiser: Adam with decoupled weight decay

struct AdamConfig {
  double learning_rate = 1e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct OptimizerState {
  AdamConfig config;
  std::uint64_t step = 0;
  PetGradients first_moment;
  PetGradients second_moment;

  OptimizerState(const PetModule& module, AdamConfig cfg)
      : config(cfg), first_moment(module), second_moment(module) {}
};

namespace detail {

inline void adam_update(std::span<double> params, std::span<const double> grads,
                        std::span<double> m, std::span<double> v, const AdamConfig& cfg,
                        double bias1, double bias2) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grads[i];
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
    const double m_hat = m[i] / bias1;
    const double v_hat = v[i] / bias2;
    params[i] -= cfg.learning_rate * (m_hat / (std::sqrt(v_hat) + cfg.epsilon) +
                                      cfg.weight_decay * params[i]);
  }
}

}  // namespace detail

inline void optimizer_step(PetModule& module, OptimizerState& state, const PetGradients& grads) {
  if (module.frozen()) {
    throw FrozenModuleError("optimizer_step on frozen module " + std::to_string(module.module_id()));
  }
  if (grads.a.data.size() != module.a().data.size() || grads.b.data.size() != module.b().data.size() ||
      grads.head_w.data.size() != module.head_w().data.size() ||
      grads.head_b.size() != module.head_b().size() ||
      state.first_moment.head_b.size() != module.head_b().size()) {
    throw InvalidArgument("gradient or optimizer shapes do not match the module");
  }
  if (!grads.all_finite()) throw NumericalError("non-finite gradient entries");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bias1 = 1.0 - std::pow(state.config.beta1, t);
  const double bias2 = 1.0 - std::pow(state.config.beta2, t);
  auto& m = state.first_moment;
  auto& v = state.second_moment;
  detail::adam_update(module.mutable_a().data, grads.a.data, m.a.data, v.a.data, state.config, bias1, bias2);
  detail::adam_update(module.mutable_b().data, grads.b.data, m.b.data, v.b.data, state.config, bias1, bias2);
  detail::adam_update(module.mutable_head_w().data, grads.head_w.data, m.head_w.data, v.head_w.data,
                      state.config, bias1, bias2);
  detail::adam_update(module.mutable_head_b(), grads.head_b, m.head_b, v.head_b, state.config, bias1, bias2);
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// "CPETMOD1" | u32 version | i64 module_id | u64 feature_dim | u64 hidden_dim |
// u64 rank | u64 n_classes | u8 frozen | n_classes x (u32 len, bytes) |
// A | B | head_W | head_b    (row-major f64, little-endian)

inline constexpr char kCheckpointMagic[8] = {'C', 'P', 'E', 'T', 'M', 'O', 'D', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void write_le(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw ParseError("truncated checkpoint");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

inline void write_doubles(std::ostream& out, std::span<const double> values) {
  for (double v : values) write_le(out, v);
}

inline void read_doubles(std::istream& in, std::span<double> values) {
  for (double& v : values) v = read_le<double>(in);
}

}  // namespace detail

inline void save_checkpoint(std::ostream& out, const PetModule& module) {
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_le<std::uint32_t>(out, kCheckpointVersion);
  detail::write_le<std::int64_t>(out, module.module_id());
  detail::write_le<std::uint64_t>(out, module.shape().feature_dim);
  detail::write_le<std::uint64_t>(out, module.shape().hidden_dim);
  detail::write_le<std::uint64_t>(out, module.shape().rank);
  detail::write_le<std::uint64_t>(out, module.num_classes());
  detail::write_le<std::uint8_t>(out, module.frozen() ? 1 : 0);
  for (const std::string& id : module.class_ids()) {
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(id.size()));
    out.write(id.data(), static_cast<std::streamsize>(id.size()));
  }
  detail::write_doubles(out, module.a().data);
  detail::write_doubles(out, module.b().data);
  detail::write_doubles(out, module.head_w().data);
  detail::write_doubles(out, module.head_b());
}

inline PetModule load_checkpoint(std::istream& in) {
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || !std::equal(magic, magic + 8, kCheckpointMagic)) {
    throw ParseError("not a PET module checkpoint");
  }
  if (detail::read_le<std::uint32_t>(in) != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint version");
  }
  PetModule module;
  module.module_id_ = static_cast<int>(detail::read_le<std::int64_t>(in));
  module.shape_.feature_dim = detail::read_le<std::uint64_t>(in);
  module.shape_.hidden_dim = detail::read_le<std::uint64_t>(in);
  module.shape_.rank = detail::read_le<std::uint64_t>(in);
  const auto n_classes = detail::read_le<std::uint64_t>(in);
  module.frozen_ = detail::read_le<std::uint8_t>(in) != 0;
  constexpr std::uint64_t kSanity = std::uint64_t{1} << 32;
  if (module.shape_.feature_dim >= kSanity || module.shape_.hidden_dim >= kSanity ||
      module.shape_.rank >= kSanity || n_classes >= kSanity) {
    throw ParseError("checkpoint dimensions out of range");
  }
  for (std::uint64_t c = 0; c < n_classes; ++c) {
    const auto len = detail::read_le<std::uint32_t>(in);
    std::string id(len, '\0');
    if (!in.read(id.data(), len)) throw ParseError("truncated checkpoint");
    module.class_ids_.push_back(std::move(id));
  }
  const PetShape& s = module.shape_;
  module.a_ = Matrix(s.rank, s.feature_dim);
  module.b_ = Matrix(s.hidden_dim, s.rank);
  module.head_w_ = Matrix(n_classes, s.hidden_dim);
  module.head_b_.assign(n_classes, 0.0);
  detail::read_doubles(in, module.a_.data);
  detail::read_doubles(in, module.b_.data);
  detail::read_doubles(in, module.head_w_.data);
  detail::read_doubles(in, module.head_b_);
  return module;
}

inline void save_checkpoint(const std::filesystem::path& path, const PetModule& module) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidArgument("cannot write checkpoint " + path.string());
  save_checkpoint(out, module);
}

inline PetModule load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot open checkpoint " + path.string());
  return load_checkpoint(in);
}

}  // namespace conpet
