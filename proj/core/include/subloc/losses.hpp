#pragma once

#include <cstdint>
#include <vector>

#include "subloc/autodiff.hpp"
#include "subloc/ops.hpp"
#include "subloc/tensor.hpp"

namespace subloc {

// Per-class positive-term weights for the weighted BCE.
struct ClassWeights {
  std::vector<double> w;

  static ClassWeights uniform(int num_classes) {
    return ClassWeights{std::vector<double>(static_cast<std::size_t>(num_classes), 1.0)};
  }

  // w_c = clamp(n_total / (num_classes * n_c), lo, hi). Upweights rare
  // positives; the clamp keeps extreme tails from blowing up gradients.
  static ClassWeights from_counts(const std::vector<std::int64_t>& positives_per_class,
                                  std::int64_t n_total, double lo = 0.5, double hi = 10.0);
};

// Three-stage loss recipe: plain BCE warmup, then weighted BCE + soft F1,
// then the same mix with the BCE term scaled up from `rescale_step` on.
struct LossSchedule {
  int warmup_epochs = 10;
  std::int64_t rescale_step = 1200;
  double a_bce = 1.0;
  double a_f1 = 1.0;
  double a_bce_rescaled = 2.0;
  double a_f1_rescaled = 1.0;

  int stage(std::int64_t step, int epoch) const {
    if (epoch < warmup_epochs) return 1;
    return step >= rescale_step ? 3 : 2;
  }
};

struct LossBreakdown {
  double bce = 0.0;
  double weighted_bce = 0.0;
  double soft_f1 = 0.0;
  double focal = 0.0;
  double total = 0.0;
  int stage = 1;
};

namespace losses {

inline constexpr double kProbEps = 1e-7;

// Mean over all elements of -[y*ln(p) + (1-y)*ln(1-p)], p clamped to
// [kProbEps, 1-kProbEps].
template <typename T>
NodePtr<T> bce(Tape<T>* tape, const NodePtr<T>& p, const Tensor<T>& y);

// Per-class weight on the positive term only.
template <typename T>
NodePtr<T> weighted_bce(Tape<T>* tape, const NodePtr<T>& p, const Tensor<T>& y,
                        const ClassWeights& cw);

// 1 - mean_c (2*sTP_c + eps) / (2*sTP_c + sFN_c + sFP_c + eps) with
// probability-weighted counts over the batch. The eps in both numerator and
// denominator gives an all-negative class with no predicted mass a soft F1
// of 1, so it contributes no loss.
template <typename T>
NodePtr<T> soft_f1(Tape<T>* tape, const NodePtr<T>& p, const Tensor<T>& y);

// Tracked metric only in the staged recipe; never part of the total.
template <typename T>
NodePtr<T> focal(Tape<T>* tape, const NodePtr<T>& p, const Tensor<T>& y, T gamma, T alpha);

}  // namespace losses

// Builds the stage's total on the tape and evaluates all four component
// losses (off-tape where unused) for logging.
template <typename T>
NodePtr<T> total_loss(Tape<T>* tape, std::int64_t step, int epoch, const LossSchedule& schedule,
                      const NodePtr<T>& p, const Tensor<T>& y, const ClassWeights& cw,
                      T focal_gamma, T focal_alpha, LossBreakdown* breakdown);

}  // namespace subloc
