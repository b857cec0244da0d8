#include <doctest.h>

#include <cmath>
#include <random>

#include "subloc/gradcheck.hpp"
#include "subloc/losses.hpp"
#include "test_util.hpp"

using namespace subloc;
using namespace subloc::testutil;

namespace {

constexpr double kTol = 1e-4;
constexpr int kTrials = 50;

Tensor<double> random_targets(int n, int c, std::mt19937_64& rng, double pos_rate = 0.4) {
  Tensor<double> y({n, c});
  std::bernoulli_distribution dist(pos_rate);
  for (std::int64_t i = 0; i < y.size(); ++i) y[i] = dist(rng) ? 1.0 : 0.0;
  return y;
}

// Probabilities away from the clamp boundaries so finite differences stay
// inside the differentiable region.
Parameter<double> random_probs(int n, int c, std::mt19937_64& rng) {
  return param<double>("p", random_tensor<double>({n, c}, rng, 0.05, 0.95));
}

double loss_gradcheck(Parameter<double>& p,
                      const std::function<NodePtr<double>(Tape<double>*)>& forward) {
  p.zero_grad();
  Tape<double> tape;
  auto loss = forward(&tape);
  tape.backward(*loss);
  std::vector<Parameter<double>> params{p};
  auto fd = finite_difference_grad<double>([&]() { return forward(nullptr)->value[0]; }, params,
                                           1e-5);
  return max_relative_error(params[0].grad(), fd[0]);
}

}  // namespace

TEST_CASE("bce: single element at p=0.5, y=1 gives ln 2") {
  auto p = param<double>("p", Tensor<double>::full({1, 1}, 0.5));
  Tensor<double> y({1, 1}, {1.0});
  auto loss = losses::bce<double>(nullptr, p.node, y);
  CHECK(loss->value[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("bce: perfect prediction bottoms out at the clamp floor") {
  Tensor<double> y({2, 3}, {1, 0, 1, 0, 0, 1});
  auto p = param<double>("p", y);
  auto loss = losses::bce<double>(nullptr, p.node, y);
  CHECK(loss->value[0] >= 0.0);
  CHECK(loss->value[0] <= 1.1e-7);
}

TEST_CASE("bce: gradients match finite differences") {
  std::mt19937_64 rng(21);
  for (int t = 0; t < kTrials; ++t) {
    auto p = random_probs(4, 7, rng);
    auto y = random_targets(4, 7, rng);
    const double worst =
        loss_gradcheck(p, [&](Tape<double>* tape) { return losses::bce(tape, p.node, y); });
    CHECK_MESSAGE(worst < kTol, "trial ", t, " rel err ", worst);
  }
}

TEST_CASE("weighted_bce: unit weights reduce to bce exactly") {
  std::mt19937_64 rng(22);
  auto p = random_probs(5, 28, rng);
  auto y = random_targets(5, 28, rng);
  auto a = losses::bce<double>(nullptr, p.node, y);
  auto b = losses::weighted_bce<double>(nullptr, p.node, y, ClassWeights::uniform(28));
  CHECK(a->value[0] == b->value[0]);
}

TEST_CASE("weighted_bce: weight 2 doubles the positive term") {
  auto p = param<double>("p", Tensor<double>::full({1, 1}, 0.5));
  Tensor<double> y({1, 1}, {1.0});
  ClassWeights cw{{2.0}};
  auto loss = losses::weighted_bce<double>(nullptr, p.node, y, cw);
  CHECK(loss->value[0] == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("weighted_bce: rejects non-positive weights and wrong widths") {
  auto p = param<double>("p", Tensor<double>::full({1, 2}, 0.5));
  Tensor<double> y({1, 2}, {1.0, 0.0});
  CHECK_THROWS_AS(losses::weighted_bce<double>(nullptr, p.node, y, ClassWeights{{1.0, 0.0}}),
                  std::invalid_argument);
  CHECK_THROWS_AS(losses::weighted_bce<double>(nullptr, p.node, y, ClassWeights{{1.0}}),
                  std::invalid_argument);
}

TEST_CASE("weighted_bce: gradients match finite differences") {
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> wdist(0.5, 4.0);
  for (int t = 0; t < kTrials; ++t) {
    auto p = random_probs(3, 9, rng);
    auto y = random_targets(3, 9, rng);
    ClassWeights cw{std::vector<double>(9)};
    for (auto& w : cw.w) w = wdist(rng);
    const double worst = loss_gradcheck(
        p, [&](Tape<double>* tape) { return losses::weighted_bce(tape, p.node, y, cw); });
    CHECK_MESSAGE(worst < kTol, "trial ", t, " rel err ", worst);
  }
}

TEST_CASE("soft_f1: perfect prediction with positives everywhere gives zero loss") {
  Tensor<double> y({3, 2}, {1, 0, 0, 1, 1, 1});
  auto p = param<double>("p", y);
  auto loss = losses::soft_f1<double>(nullptr, p.node, y);
  CHECK(loss->value[0] == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("soft_f1: single positive at p=0.5 scores 2/3") {
  auto p = param<double>("p", Tensor<double>::full({1, 1}, 0.5));
  Tensor<double> y({1, 1}, {1.0});
  auto loss = losses::soft_f1<double>(nullptr, p.node, y);
  CHECK(loss->value[0] == doctest::Approx(1.0 - 2.0 / 3.0).epsilon(1e-6));
}

TEST_CASE("soft_f1: an all-negative class with no predicted mass adds no loss") {
  // Class 1 has no positives and p=0 there; class 0 is predicted perfectly.
  Tensor<double> y({2, 2}, {1, 0, 1, 0});
  Tensor<double> pv({2, 2}, {1, 0, 1, 0});
  auto p = param<double>("p", pv);
  auto loss = losses::soft_f1<double>(nullptr, p.node, y);
  CHECK(loss->value[0] == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("soft_f1: raising p on a positive element never increases the loss") {
  std::mt19937_64 rng(24);
  for (int t = 0; t < 20; ++t) {
    auto p = random_probs(4, 6, rng);
    auto y = random_targets(4, 6, rng, 0.5);
    auto before = losses::soft_f1<double>(nullptr, p.node, y);
    // Perturb every positive-labeled element upward.
    for (std::int64_t i = 0; i < y.size(); ++i) {
      if (y[i] == 1.0) p.value()[i] = std::min(1.0, p.value()[i] + 0.01);
    }
    auto after = losses::soft_f1<double>(nullptr, p.node, y);
    CHECK(after->value[0] <= before->value[0] + 1e-12);
  }
}

TEST_CASE("soft_f1: gradients match finite differences") {
  std::mt19937_64 rng(25);
  for (int t = 0; t < kTrials; ++t) {
    auto p = random_probs(4, 6, rng);
    auto y = random_targets(4, 6, rng);
    const double worst =
        loss_gradcheck(p, [&](Tape<double>* tape) { return losses::soft_f1(tape, p.node, y); });
    CHECK_MESSAGE(worst < kTol, "trial ", t, " rel err ", worst);
  }
}

TEST_CASE("focal: gamma=0, alpha=0.5 halves the bce") {
  std::mt19937_64 rng(26);
  auto p = random_probs(4, 5, rng);
  auto y = random_targets(4, 5, rng);
  auto f = losses::focal<double>(nullptr, p.node, y, 0.0, 0.5);
  auto b = losses::bce<double>(nullptr, p.node, y);
  CHECK(f->value[0] == doctest::Approx(0.5 * b->value[0]).epsilon(1e-12));
}

TEST_CASE("focal: confident correct prediction is nearly free") {
  auto p = param<double>("p", Tensor<double>::full({1, 1}, 1.0 - 1e-7));
  Tensor<double> y({1, 1}, {1.0});
  auto f = losses::focal<double>(nullptr, p.node, y, 2.0, 0.25);
  CHECK(f->value[0] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("focal: single element closed form at gamma=2, alpha=0.25") {
  auto p = param<double>("p", Tensor<double>::full({1, 1}, 0.5));
  Tensor<double> y({1, 1}, {1.0});
  auto f = losses::focal<double>(nullptr, p.node, y, 2.0, 0.25);
  CHECK(f->value[0] == doctest::Approx(0.25 * 0.25 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("focal: gradients match finite differences") {
  std::mt19937_64 rng(27);
  for (int t = 0; t < kTrials; ++t) {
    auto p = random_probs(3, 5, rng);
    auto y = random_targets(3, 5, rng);
    const double worst = loss_gradcheck(
        p, [&](Tape<double>* tape) { return losses::focal(tape, p.node, y, 2.0, 0.25); });
    CHECK_MESSAGE(worst < kTol, "trial ", t, " rel err ", worst);
  }
}

TEST_CASE("losses: non-negative and finite across the input range") {
  std::mt19937_64 rng(28);
  for (int t = 0; t < 20; ++t) {
    // Include exact 0 and 1 probabilities; the clamp must absorb them.
    auto p = param<double>("p", random_tensor<double>({4, 6}, rng, 0.0, 1.0));
    p.value()[0] = 0.0;
    p.value()[1] = 1.0;
    auto y = random_targets(4, 6, rng);
    for (auto* node : {&losses::bce<double>, &losses::soft_f1<double>}) {
      auto loss = (*node)(nullptr, p.node, y);
      CHECK(loss->value[0] >= 0.0);
      CHECK(std::isfinite(loss->value[0]));
    }
    auto f = losses::focal<double>(nullptr, p.node, y, 2.0, 0.25);
    CHECK(f->value[0] >= 0.0);
    CHECK(std::isfinite(f->value[0]));
  }
}

TEST_CASE("class weights: count-based weights are clamped") {
  // 280 samples total; class counts 10 (raw weight 280/(4*10)=7),
  // 140 (raw 0.5), 280 (raw 0.25 -> clamp 0.5), 1 (raw 70 -> clamp 10).
  ClassWeights cw = ClassWeights::from_counts({10, 140, 280, 1}, 280);
  CHECK(cw.w[0] == doctest::Approx(7.0));
  CHECK(cw.w[1] == doctest::Approx(0.5));
  CHECK(cw.w[2] == doctest::Approx(0.5));
  CHECK(cw.w[3] == doctest::Approx(10.0));
  // Zero-count classes take the clamp ceiling.
  ClassWeights cz = ClassWeights::from_counts({0, 10}, 20);
  CHECK(cz.w[0] == doctest::Approx(10.0));
}

TEST_CASE("total_loss: warmup epochs backpropagate pure bce but log everything") {
  std::mt19937_64 rng(29);
  auto p = random_probs(4, 6, rng);
  auto y = random_targets(4, 6, rng);
  LossSchedule sched;
  sched.warmup_epochs = 10;
  sched.rescale_step = 100;
  LossBreakdown bd;
  Tape<double> tape;
  auto total = total_loss(&tape, 5, 0, sched, p.node, y, ClassWeights::uniform(6), 2.0, 0.25, &bd);
  CHECK(bd.stage == 1);
  CHECK(total->value[0] == bd.bce);
  CHECK(bd.soft_f1 > 0.0);
  CHECK(bd.focal > 0.0);
  CHECK(bd.weighted_bce > 0.0);
}

TEST_CASE("total_loss: stage-2 and stage-3 combinations and the boundary step") {
  std::mt19937_64 rng(30);
  auto p = random_probs(4, 6, rng);
  auto y = random_targets(4, 6, rng);
  LossSchedule sched;  // defaults: 1,1 then 2,1
  sched.warmup_epochs = 2;
  sched.rescale_step = 50;
  ClassWeights cw = ClassWeights::uniform(6);

  LossBreakdown bd2;
  auto t2 = total_loss<double>(nullptr, 49, 5, sched, p.node, y, cw, 2.0, 0.25, &bd2);
  CHECK(bd2.stage == 2);
  CHECK(t2->value[0] ==
        doctest::Approx(1.0 * bd2.weighted_bce + 1.0 * bd2.soft_f1).epsilon(1e-12));

  LossBreakdown bd3;
  auto t3 = total_loss<double>(nullptr, 50, 5, sched, p.node, y, cw, 2.0, 0.25, &bd3);
  CHECK(bd3.stage == 3);
  CHECK(t3->value[0] ==
        doctest::Approx(2.0 * bd3.weighted_bce + 1.0 * bd3.soft_f1).epsilon(1e-12));

  // Worked example of the stage-3 arithmetic: 2*0.4 + 1*0.3 = 1.1.
  CHECK(sched.a_bce_rescaled * 0.4 + sched.a_f1_rescaled * 0.3 == doctest::Approx(1.1));
}

TEST_CASE("total_loss: backward through each stage matches finite differences") {
  std::mt19937_64 rng(31);
  LossSchedule sched;
  sched.warmup_epochs = 1;
  sched.rescale_step = 10;
  ClassWeights cw{std::vector<double>{1.5, 0.7, 2.0, 1.0, 3.0}};
  struct Stage {
    std::int64_t step;
    int epoch;
  };
  const Stage stages[] = {{0, 0}, {5, 3}, {20, 3}};
  for (const auto& st : stages) {
    auto p = random_probs(3, 5, rng);
    auto y = random_targets(3, 5, rng);
    const double worst = loss_gradcheck(p, [&](Tape<double>* tape) {
      return total_loss(tape, st.step, st.epoch, sched, p.node, y, cw, 2.0, 0.25, nullptr);
    });
    CHECK_MESSAGE(worst < kTol, "stage for step ", st.step, " rel err ", worst);
  }
}
