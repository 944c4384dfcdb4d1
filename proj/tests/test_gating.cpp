#include <gtest/gtest.h>

#include "oracles.hpp"
#include "pag/gating.hpp"

namespace pag {
namespace {

using testing::random_tensor;

TEST(Gumbel, HalfMapsToClosedForm) {
  // -log(-log 0.5), evaluated at 30 digits.
  EXPECT_NEAR(gumbel_from_uniform(0.5), 0.366512920581664327, 1e-15);
}

TEST(Gumbel, ClampKeepsTailsFinite) {
  const double hi = gumbel_from_uniform(1.0);
  const double lo = gumbel_from_uniform(0.0);
  EXPECT_TRUE(std::isfinite(hi));
  EXPECT_TRUE(std::isfinite(lo));
  EXPECT_EQ(hi, gumbel_from_uniform(1.0 - kUniformClamp));
  EXPECT_GT(hi, 20.0);
}

TEST(Gumbel, MeanIsEulerMascheroni) {
  RngStream rng(42);
  Tensor t = gumbel_sample({1000, 1000}, rng);
  EXPECT_NEAR(t.mean(), 0.5772156649, 0.01);
  EXPECT_TRUE(t.all_finite());
}

TEST(Gumbel, SameSeedSameSamples) {
  RngStream a(7), b(7);
  EXPECT_EQ(gumbel_sample({3, 4, 5}, a), gumbel_sample({3, 4, 5}, b));
}

TEST(ConcreteRelax, EqualLogitsGiveUniform) {
  Tensor logits({4, 2, 3}, 0.3);
  for (double tau : {0.1, 1.0, 7.0}) {
    Tensor s = concrete_relax(logits, Tensor(logits.dims()), tau);
    for (double v : s.data()) EXPECT_NEAR(v, 0.25, 1e-15);
  }
}

TEST(ConcreteRelax, LowTemperatureTwoCategories) {
  Tensor logits({2, 1, 1}, std::vector<double>{0.0, 1.0});
  Tensor s = concrete_relax(logits, Tensor(logits.dims()), 0.1);
  // softmax([0, 10])
  EXPECT_NEAR(s[0], 4.53978687024343945e-5, 1e-15);
  EXPECT_NEAR(s[1], 0.999954602131297566, 1e-15);
}

TEST(ConcreteRelax, HighTemperatureNearlyUniform) {
  RngStream rng(3);
  Tensor logits = random_tensor({3, 4, 4}, rng, -1, 1);
  Tensor s = concrete_relax(logits, Tensor(logits.dims()), 1e4);
  for (double v : s.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-4);
}

TEST(ConcreteRelax, ColumnsSumToOne) {
  RngStream rng(4);
  Tensor logits = random_tensor({5, 3, 3}, rng, -4, 4);
  Tensor s = concrete_relax(logits, gumbel_sample(logits.dims(), rng), 0.5);
  for (std::size_t p = 0; p < 9; ++p) {
    double total = 0.0;
    for (std::size_t c = 0; c < 5; ++c) total += s[c * 9 + p];
    EXPECT_NEAR(total, 1.0, 1e-14);
  }
}

TEST(ConcreteRelax, Errors) {
  Tensor logits({2, 2, 2});
  EXPECT_THROW(concrete_relax(logits, Tensor(logits.dims()), 0.0), Error);
  EXPECT_THROW(concrete_relax(logits, Tensor(logits.dims()), -1.0), Error);
  EXPECT_THROW(concrete_relax(logits, Tensor({2, 2, 3}), 1.0), Error);
  EXPECT_THROW(concrete_relax(Tensor({1, 2, 2}), Tensor({1, 2, 2}), 1.0), Error);
}

TEST(ConcreteRelax, ConvergesToOneHotAsTemperatureVanishes) {
  RngStream rng(5);
  Tensor logits({3, 4, 4});
  // Logit gaps of at least 1 between the winner and the rest.
  for (std::size_t p = 0; p < 16; ++p) {
    const std::size_t win = rng.below(3);
    for (std::size_t c = 0; c < 3; ++c) logits[c * 16 + p] = c == win ? 2.0 : rng.uniform(-1, 1);
  }
  Tensor zeros(logits.dims());
  EXPECT_LT(max_abs_diff(concrete_relax(logits, zeros, 1e-4), argmax_one_hot(logits, zeros)), 1e-6);
}

TEST(StraightThrough, ForwardIsArgmax) {
  Tape tape;
  Var logits = tape.leaf(Tensor({2, 1, 1}, std::vector<double>{0.0, 1.0}));
  Var g = straight_through_gate(logits, Tensor({2, 1, 1}), 1.0);
  EXPECT_EQ(g.value()[0], 0.0);
  EXPECT_EQ(g.value()[1], 1.0);
  Var on = binary_gate(logits, Tensor({2, 1, 1}), 1.0);
  EXPECT_EQ(on.value()[0], 1.0);
}

TEST(StraightThrough, TiesGoToLowestIndex) {
  Tape tape;
  Var logits = tape.leaf(Tensor({3, 1, 2}, 0.25));
  Var g = straight_through_gate(logits, Tensor({3, 1, 2}), 1.0);
  EXPECT_EQ(g.value()[0], 1.0);
  EXPECT_EQ(g.value()[1], 1.0);
  for (std::size_t i = 2; i < 6; ++i) EXPECT_EQ(g.value()[i], 0.0);
}

TEST(StraightThrough, ForwardIsExactlyOneHotOnEveryDraw) {
  RngStream rng(6);
  std::size_t pixels = 0;
  for (int draw = 0; draw < 20; ++draw) {
    Tape tape;
    const std::size_t k = 2 + rng.below(6);
    Var logits = tape.leaf(random_tensor({k, 16, 16}, rng, -3, 3));
    Var g = straight_through_gate(logits, gumbel_sample({k, 16, 16}, rng), rng.uniform(0.1, 1));
    for (std::size_t p = 0; p < 256; ++p, ++pixels) {
      double total = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        const double v = g.value()[c * 256 + p];
        ASSERT_TRUE(v == 0.0 || v == 1.0);
        total += v;
      }
      ASSERT_EQ(total, 1.0);
    }
  }
  EXPECT_EQ(pixels, 20u * 256u);
}

TEST(StraightThrough, BackwardIsRelaxationJacobian) {
  RngStream rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t k = 2 + rng.below(4);
    Tensor logits = random_tensor({k, 3, 3}, rng, -2, 2);
    Tensor noise = gumbel_sample(logits.dims(), rng);
    Tensor w = random_tensor(logits.dims(), rng);
    const double tau = rng.uniform(0.3, 2.0);

    Tape tape;
    Var l = tape.leaf(logits);
    Var gate = straight_through_gate(l, noise, tau);
    tape.backward(sum(mul(gate, tape.constant(w))));

    auto relaxed = [&](const Tensor& at) {
      Tensor s = concrete_relax(at, noise, tau);
      double acc = 0.0;
      for (std::size_t i = 0; i < s.size(); ++i) acc += s[i] * w[i];
      return acc;
    };
    const double eps = 1e-6;
    Tensor probe = logits;
    for (std::size_t i = 0; i < probe.size(); ++i) {
      probe[i] = logits[i] + eps;
      const double up = relaxed(probe);
      probe[i] = logits[i] - eps;
      const double down = relaxed(probe);
      probe[i] = logits[i];
      EXPECT_NEAR(l.grad()[i], (up - down) / (2 * eps), 1e-5);
    }
  }
}

TEST(StraightThrough, EqualLogitsGateOnHalfTheTime) {
  RngStream rng(8);
  Tape tape;
  Var logits = tape.leaf(Tensor({2, 100, 100}, 0.7));
  Var on = binary_gate(logits, gumbel_sample({2, 100, 100}, rng), 1.0);
  EXPECT_NEAR(on.value().mean(), 0.5, 0.02);
}

TEST(StraightThrough, SgdStepRaisesOnLogit) {
  RngStream rng(9);
  Tensor logits = random_tensor({2, 8, 8}, rng, -0.5, 0.5);
  Tape tape;
  Var l = tape.leaf(logits);
  Var on = binary_gate(l, gumbel_sample(logits.dims(), rng), 1.0);
  tape.backward(scale(sum(on), -1.0));  // loss rewards gates being on
  double before = 0.0, after = 0.0;
  for (std::size_t p = 0; p < 64; ++p) {
    before += logits[64 + p];
    after += logits[64 + p] - 0.1 * l.grad()[64 + p];
  }
  EXPECT_GT(after, before);
}

TEST(Anneal, EndpointsAndMidpoint) {
  TemperatureSchedule s{1.0, 0.1, 1000};
  EXPECT_DOUBLE_EQ(anneal_tau(0, s), 1.0);
  EXPECT_NEAR(anneal_tau(1000, s), 0.1, 1e-15);
  EXPECT_NEAR(anneal_tau(500, s), 0.316227766016837933, 1e-15);
  EXPECT_THROW(anneal_tau(1001, s), Error);
}

TEST(Anneal, MonotoneNonIncreasing) {
  TemperatureSchedule s{1.0, 0.1, 97};
  for (std::size_t i = 1; i <= 97; ++i) EXPECT_LE(anneal_tau(i, s), anneal_tau(i - 1, s));
}

TEST(Anneal, InvalidSchedules) {
  EXPECT_THROW(anneal_tau(0, TemperatureSchedule{0.1, 1.0, 10}), Error);
  EXPECT_THROW(anneal_tau(0, TemperatureSchedule{1.0, 0.0, 10}), Error);
  EXPECT_THROW(anneal_tau(0, TemperatureSchedule{1.0, 0.1, 0}), Error);
}

}  // namespace
}  // namespace pag
