#include <gtest/gtest.h>

#include <cstring>
#include <set>
#include <sstream>

#include "support.hpp"

namespace conpet {
namespace {

using testing::random_features;

std::vector<std::string> class_names(std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back("c" + std::to_string(i));
  return out;
}

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b, std::size_t n) {
  return a.size() >= n && b.size() >= n && std::memcmp(a.data(), b.data(), n * sizeof(double)) == 0;
}

class PetTest : public ::testing::Test {
 protected:
  Encoder enc{EncoderConfig{64, 16, 9, {1, 2}}};
  Rng rng{21};
};

TEST_F(PetTest, ZeroDeltaEqualsHeadOnFrozenRepresentation) {
  const PetModule m(1, {64, 16, 4}, class_names(5), 3, 0.3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto phi = random_features(rng, 64, 6);
    const auto rep = enc.encode(phi);
    std::vector<double> expected(5);
    for (std::size_t c = 0; c < 5; ++c) {
      expected[c] = m.head_b()[c];
      for (std::size_t i = 0; i < 16; ++i) expected[c] += m.head_w()(c, i) * rep.values[i];
    }
    EXPECT_EQ(pet_forward(m, enc, phi).values, expected);
  }
}

TEST_F(PetTest, MatchesDenseReference) {
  const PetModule m = testing::random_module(rng, enc, 3, 4, 8);
  for (int trial = 0; trial < 20; ++trial) {
    const auto phi = random_features(rng, 64, 8);
    const auto got = pet_forward(m, enc, phi).values;
    const auto want = testing::reference_logits(m, enc, phi);
    for (std::size_t c = 0; c < want.size(); ++c) EXPECT_NEAR(got[c], want[c], 1e-12);
  }
}

TEST_F(PetTest, SevenClassModuleEmitsSevenLogits) {
  const PetModule m(3, {64, 16, 4}, class_names(7), 1);
  const auto out = pet_forward(m, enc, random_features(rng, 64, 5));
  EXPECT_EQ(out.values.size(), 7u);
  EXPECT_EQ(out.owner_module, 3);
  EXPECT_EQ(out.class_ids, class_names(7));
}

TEST_F(PetTest, DimensionMismatchRejected) {
  const PetModule m(1, {128, 16, 4}, class_names(2), 1);
  EXPECT_THROW(pet_forward(m, enc, random_features(rng, 64, 3)), InvalidArgument);
}

TEST_F(PetTest, UniformLogitsGiveLogC) {
  PetModule m(1, {64, 16, 4}, class_names(6), 1, 0.0);  // W = 0, b = 0
  const auto phi = random_features(rng, 64, 5);
  const std::vector<LabeledFeatures> batch{{&phi, 2}};
  EXPECT_NEAR(loss_and_grads(m, enc, batch).loss, std::log(6.0), 1e-15);
}

TEST_F(PetTest, LossVanishesAsCorrectLogitGrows) {
  PetModule m(1, {64, 16, 4}, class_names(3), 1, 0.0);
  const auto phi = random_features(rng, 64, 5);
  const std::vector<LabeledFeatures> batch{{&phi, 1}};
  double previous = std::numeric_limits<double>::infinity();
  for (double bias : {0.0, 5.0, 20.0, 50.0}) {
    m.mutable_head_b()[1] = bias;
    const double loss = loss_and_grads(m, enc, batch).loss;
    EXPECT_LT(loss, previous);
    previous = loss;
  }
  EXPECT_LT(previous, 1e-20);
}

TEST_F(PetTest, PerturbingAChangesLogitsAlongAnalyticSlope) {
  PetModule m = testing::random_module(rng, enc, 4, 3, 2);
  const auto phi = random_features(rng, 64, 6);
  const std::size_t col = phi.entries.front().first;
  const std::vector<LabeledFeatures> batch{{&phi, 0}};
  const double grad = loss_and_grads(m, enc, batch).grads.a(1, col);
  const double eps = 1e-5;
  const double base = m.a()(1, col);
  m.mutable_a()(1, col) = base + eps;
  const auto up_logits = pet_forward(m, enc, phi).values;
  const double up = loss_and_grads(m, enc, batch).loss;
  m.mutable_a()(1, col) = base - eps;
  const double down = loss_and_grads(m, enc, batch).loss;
  m.mutable_a()(1, col) = base;
  EXPECT_NE(up_logits, pet_forward(m, enc, phi).values);
  EXPECT_NEAR((up - down) / (2 * eps), grad, 1e-6 * std::max(1.0, std::abs(grad)));
}

TEST_F(PetTest, GradientsMatchFiniteDifferences) {
  // 3-class module, 5-example batch.
  const PetModule m = testing::random_module(rng, enc, 4, 3, 77);
  std::vector<std::pair<SparseVector, std::size_t>> batch;
  for (int i = 0; i < 5; ++i) batch.emplace_back(random_features(rng, 64, 7), rng.index(3));
  EXPECT_LT(testing::max_gradient_error(m, enc, batch), 1e-4);
}

TEST_F(PetTest, W0ReceivesNoGradient) {
  PetModule m = testing::random_module(rng, enc, 2, 3, 4);
  const auto phi = random_features(rng, 64, 5);
  const std::uint64_t before = enc.checksum();
  OptimizerState opt(m, {});
  const std::vector<LabeledFeatures> batch{{&phi, 1}};
  for (int i = 0; i < 5; ++i) optimizer_step(m, opt, loss_and_grads(m, enc, batch).grads);
  EXPECT_EQ(enc.checksum(), before);
}

TEST_F(PetTest, EmptyBatchAndBadLabelRejected) {
  const PetModule m(1, {64, 16, 4}, class_names(2), 1);
  EXPECT_THROW(loss_and_grads(m, enc, std::vector<LabeledFeatures>{}), InvalidArgument);
  const auto phi = random_features(rng, 64, 5);
  EXPECT_THROW(loss_and_grads(m, enc, std::vector<LabeledFeatures>{{&phi, 2}}), InvalidArgument);
}

TEST_F(PetTest, ZeroGradientsZeroDecayIsFixedPoint) {
  PetModule m = testing::random_module(rng, enc, 4, 3, 5);
  const PetModule before = m;
  AdamConfig cfg;
  cfg.weight_decay = 0.0;
  OptimizerState opt(m, cfg);
  optimizer_step(m, opt, PetGradients(m));
  EXPECT_EQ(m, before);
  EXPECT_EQ(opt.step, 1u);
}

TEST_F(PetTest, FirstStepMovesAgainstGradientSign) {
  PetModule m = testing::random_module(rng, enc, 4, 3, 6);
  const PetModule before = m;
  PetGradients g(m);
  for (std::size_t i = 0; i < g.head_w.data.size(); ++i) g.head_w.data[i] = (i % 3 == 0) ? 0.5 : -0.25;
  AdamConfig cfg;
  cfg.weight_decay = 0.0;
  cfg.learning_rate = 1e-3;
  OptimizerState opt(m, cfg);
  optimizer_step(m, opt, g);
  for (std::size_t i = 0; i < g.head_w.data.size(); ++i) {
    const double delta = m.head_w().data[i] - before.head_w().data[i];
    EXPECT_LT(delta * g.head_w.data[i], 0.0);
    // Bias-corrected first step has magnitude lr * |g| / (|g| + eps).
    EXPECT_NEAR(std::abs(delta), 1e-3, 1e-9);
  }
  EXPECT_EQ(m.a(), before.a());
}

TEST_F(PetTest, DecoupledWeightDecayShrinksParameters) {
  PetModule m = testing::random_module(rng, enc, 4, 3, 6);
  const double w = m.head_w().data[0];
  AdamConfig cfg;
  cfg.weight_decay = 0.1;
  cfg.learning_rate = 0.01;
  OptimizerState opt(m, cfg);
  optimizer_step(m, opt, PetGradients(m));
  EXPECT_DOUBLE_EQ(m.head_w().data[0], w - 0.01 * 0.1 * w);
}

TEST_F(PetTest, NonFiniteGradientIsNumericalError) {
  PetModule m(1, {64, 16, 4}, class_names(2), 1);
  OptimizerState opt(m, {});
  PetGradients g(m);
  g.head_b[0] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(optimizer_step(m, opt, g), NumericalError);
}

TEST_F(PetTest, SeparableTwoClassToySetConverges) {
  // Class 0 uses buckets 0..19, class 1 uses 32..51; each example has 4 of them.
  std::vector<SparseVector> feats;
  std::vector<std::size_t> labels;
  for (int i = 0; i < 40; ++i) {
    const std::size_t label = i % 2;
    SparseVector v;
    std::set<std::uint32_t> picked;
    while (picked.size() < 4) picked.insert(static_cast<std::uint32_t>(label * 32 + rng.index(20)));
    for (auto b : picked) v.entries.emplace_back(b, 0.5);
    feats.push_back(v);
    labels.push_back(label);
  }
  PetModule m(1, {64, 16, 4}, class_names(2), 3);
  AdamConfig cfg;
  cfg.learning_rate = 1e-2;
  OptimizerState opt(m, cfg);
  for (int step = 0; step < 200; ++step) {
    std::vector<LabeledFeatures> batch;
    for (int j = 0; j < 8; ++j) {
      const std::size_t i = rng.index(feats.size());
      batch.push_back({&feats[i], labels[i]});
    }
    optimizer_step(m, opt, loss_and_grads(m, enc, batch).grads);
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < feats.size(); ++i) {
    correct += argmax(pet_forward(m, enc, feats[i]).values) == labels[i] ? 1 : 0;
  }
  EXPECT_EQ(correct, feats.size());
}

TEST_F(PetTest, DimensionExpandKeepsOldLogitsBitwise) {
  PetModule sel(0, {64, 16, 4}, {"task-1", "task-2", "task-3"}, 12, 0.5);
  for (double& v : sel.mutable_b().data) v = rng.gaussian();
  for (double& v : sel.mutable_head_b()) v = rng.gaussian();
  sel = freeze(sel);
  const PetModule grown = dimension_expand(sel, 4);
  EXPECT_EQ(grown.num_classes(), 4u);
  EXPECT_EQ(grown.class_ids().back(), "task-4");
  EXPECT_FALSE(grown.frozen());
  EXPECT_EQ(grown.a(), sel.a());
  EXPECT_EQ(grown.b(), sel.b());
  for (int trial = 0; trial < 100; ++trial) {
    const auto phi = random_features(rng, 64, 6);
    const auto old_logits = pet_forward(sel, enc, phi).values;
    const auto new_logits = pet_forward(grown, enc, phi).values;
    EXPECT_TRUE(bitwise_equal(old_logits, new_logits, 3));
    EXPECT_EQ(new_logits[3], 0.0);
  }
}

TEST_F(PetTest, DimensionExpandPreconditions) {
  const PetModule sel(0, {64, 16, 4}, {"task-1", "task-2"}, 1);
  EXPECT_THROW(dimension_expand(sel, 2), InvalidArgument);
  EXPECT_THROW(dimension_expand(sel, 1), InvalidArgument);
  const PetModule task(2, {64, 16, 4}, {"a"}, 1);
  EXPECT_THROW(dimension_expand(task, 3), InvalidArgument);
  PetModule step = sel;
  for (std::size_t k = 3; k <= 6; ++k) {
    step = dimension_expand(step, k);
    EXPECT_EQ(step.num_classes(), k);
  }
}

TEST_F(PetTest, FreezeContract) {
  PetModule m(1, {64, 16, 4}, class_names(2), 1);
  const PetModule frozen = freeze(m);
  EXPECT_TRUE(frozen.frozen());
  EXPECT_EQ(freeze(frozen), frozen);
  const auto phi = random_features(rng, 64, 5);
  EXPECT_THROW(loss_and_grads(frozen, enc, std::vector<LabeledFeatures>{{&phi, 0}}), FrozenModuleError);
  PetModule copy = frozen;
  EXPECT_THROW(copy.mutable_a(), FrozenModuleError);
  OptimizerState opt(copy, {});
  EXPECT_THROW(optimizer_step(copy, opt, PetGradients(copy)), FrozenModuleError);
}

TEST_F(PetTest, TunableParameterCount) {
  const PetModule m(1, {4096, 256, 4}, class_names(86), 1);
  EXPECT_EQ(m.tunable_parameter_count(), 4u * 4096 + 256u * 4 + 86u * (256 + 1));
  // 39,510 tunable values against 1,048,576 in W0: about 3.8%.
  const double ratio = static_cast<double>(m.tunable_parameter_count()) / (4096.0 * 256.0);
  EXPECT_LT(ratio, 0.04);
}

TEST_F(PetTest, CheckpointRoundTripIsBitExact) {
  const PetModule m = freeze(testing::random_module(rng, enc, 3, 5, 31));
  std::stringstream buf;
  save_checkpoint(buf, m);
  const std::string bytes = buf.str();
  const std::size_t header = 8 + 4 + 8 + 8 * 4 + 1;
  std::size_t names = 0;
  for (const auto& id : m.class_ids()) names += 4 + id.size();
  EXPECT_EQ(bytes.size(), header + names + 8 * m.tunable_parameter_count());
  EXPECT_EQ(bytes.substr(0, 8), "CPETMOD1");
  const PetModule back = load_checkpoint(buf);
  EXPECT_EQ(back, m);
  EXPECT_EQ(back.checksum(), m.checksum());
  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(load_checkpoint(truncated), ParseError);
  std::stringstream garbage("not a checkpoint at all");
  EXPECT_THROW(load_checkpoint(garbage), ParseError);
}

TEST_F(PetTest, ExpandHeadForStaticModule) {
  PetModule m = testing::random_module(rng, enc, 4, 2, 40);
  const std::vector<std::string> added{"x", "y", "z"};
  const PetModule grown = expand_head(freeze(m), added);
  EXPECT_EQ(grown.num_classes(), 5u);
  EXPECT_EQ(grown.module_id(), 1);
  for (int trial = 0; trial < 100; ++trial) {
    const auto phi = random_features(rng, 64, 6);
    EXPECT_TRUE(bitwise_equal(pet_forward(m, enc, phi).values, pet_forward(grown, enc, phi).values, 2));
  }
}

}  // namespace
}  // namespace conpet
