#include "subloc/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace subloc {

ClassWeights ClassWeights::from_counts(const std::vector<std::int64_t>& positives_per_class,
                                       std::int64_t n_total, double lo, double hi) {
  const auto C = positives_per_class.size();
  ClassWeights cw{std::vector<double>(C, hi)};
  for (std::size_t c = 0; c < C; ++c) {
    const std::int64_t n_c = positives_per_class[c];
    if (n_c > 0) {
      const double raw = static_cast<double>(n_total) / (static_cast<double>(C) * n_c);
      cw.w[c] = std::clamp(raw, lo, hi);
    }
  }
  return cw;
}

namespace losses {
namespace {

template <typename T>
void check_pair(const NodePtr<T>& p, const Tensor<T>& y) {
  if (p->value.rank() != 2) {
    throw std::invalid_argument("loss: p must be rank 2 [N,C], got " + p->value.shape_str());
  }
  if (!p->value.same_shape(y)) {
    throw std::invalid_argument("loss: p shape " + p->value.shape_str() + " != y shape " +
                                y.shape_str());
  }
}

template <typename T>
T clamp_prob(T v) {
  const T eps = static_cast<T>(kProbEps);
  return std::min(std::max(v, eps), T(1) - eps);
}

template <typename T>
bool clamp_active(T v) {
  const T eps = static_cast<T>(kProbEps);
  return v < eps || v > T(1) - eps;
}

}  // namespace

template <typename T>
NodePtr<T> bce(Tape<T>* tape, const NodePtr<T>& p, const Tensor<T>& y) {
  return weighted_bce(tape, p, y, ClassWeights::uniform(p->value.dim(1)));
}

template <typename T>
NodePtr<T> weighted_bce(Tape<T>* tape, const NodePtr<T>& p, const Tensor<T>& y,
                        const ClassWeights& cw) {
  check_pair(p, y);
  const int N = p->value.dim(0), C = p->value.dim(1);
  if (static_cast<int>(cw.w.size()) != C) {
    throw std::invalid_argument("weighted_bce: expected " + std::to_string(C) + " weights, got " +
                                std::to_string(cw.w.size()));
  }
  for (double w : cw.w) {
    if (!(w > 0.0) || !std::isfinite(w)) {
      throw std::invalid_argument("weighted_bce: class weights must be positive and finite");
    }
  }
  auto out = make_node<T>(Tensor<T>({1}));
  T acc = T(0);
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const T pc = clamp_prob(p->value.at(n, c));
      const T yv = y.at(n, c);
      const T wc = static_cast<T>(cw.w[static_cast<std::size_t>(c)]);
      acc -= wc * yv * std::log(pc) + (T(1) - yv) * std::log(T(1) - pc);
    }
  }
  const T inv = T(1) / static_cast<T>(static_cast<std::int64_t>(N) * C);
  out->value[0] = acc * inv;
  if (tape) {
    std::vector<double> w = cw.w;
    tape->record([p, y, out, w, N, C, inv]() {
      const T g = out->grad[0] * inv;
      for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
          const T raw = p->value.at(n, c);
          if (clamp_active(raw)) continue;
          const T pc = clamp_prob(raw);
          const T yv = y.at(n, c);
          const T wc = static_cast<T>(w[static_cast<std::size_t>(c)]);
          p->grad.at(n, c) += g * (-wc * yv / pc + (T(1) - yv) / (T(1) - pc));
        }
      }
    });
  }
  return out;
}

template <typename T>
NodePtr<T> soft_f1(Tape<T>* tape, const NodePtr<T>& p, const Tensor<T>& y) {
  check_pair(p, y);
  const int N = p->value.dim(0), C = p->value.dim(1);
  const T eps = static_cast<T>(kProbEps);

  // Per class: A = 2*sTP + eps, B = 2*sTP + sFN + sFP + eps.
  std::vector<T> A(static_cast<std::size_t>(C)), B(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) {
    T stp = T(0), sfn = T(0), sfp = T(0);
    for (int n = 0; n < N; ++n) {
      const T pv = p->value.at(n, c);
      const T yv = y.at(n, c);
      stp += pv * yv;
      sfn += (T(1) - pv) * yv;
      sfp += pv * (T(1) - yv);
    }
    A[static_cast<std::size_t>(c)] = T(2) * stp + eps;
    B[static_cast<std::size_t>(c)] = T(2) * stp + sfn + sfp + eps;
  }
  auto out = make_node<T>(Tensor<T>({1}));
  T mean_f1 = T(0);
  for (int c = 0; c < C; ++c) {
    mean_f1 += A[static_cast<std::size_t>(c)] / B[static_cast<std::size_t>(c)];
  }
  mean_f1 /= static_cast<T>(C);
  out->value[0] = T(1) - mean_f1;
  if (tape) {
    // dB/dp_{n,c} = 1 for every element; dA/dp_{n,c} = 2*y_{n,c}.
    tape->record([p, y, out, A, B, N, C]() {
      const T g = out->grad[0] / static_cast<T>(C);
      for (int c = 0; c < C; ++c) {
        const T a = A[static_cast<std::size_t>(c)];
        const T b = B[static_cast<std::size_t>(c)];
        const T inv_b2 = T(1) / (b * b);
        for (int n = 0; n < N; ++n) {
          const T yv = y.at(n, c);
          p->grad.at(n, c) += -g * (T(2) * yv * b - a) * inv_b2;
        }
      }
    });
  }
  return out;
}

template <typename T>
NodePtr<T> focal(Tape<T>* tape, const NodePtr<T>& p, const Tensor<T>& y, T gamma, T alpha) {
  check_pair(p, y);
  if (gamma < T(0)) throw std::invalid_argument("focal: gamma must be >= 0");
  if (!(alpha > T(0) && alpha < T(1))) {
    throw std::invalid_argument("focal: alpha must be in (0,1)");
  }
  const int N = p->value.dim(0), C = p->value.dim(1);
  auto out = make_node<T>(Tensor<T>({1}));
  T acc = T(0);
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const T pc = clamp_prob(p->value.at(n, c));
      const T yv = y.at(n, c);
      acc -= alpha * yv * std::pow(T(1) - pc, gamma) * std::log(pc) +
             (T(1) - alpha) * (T(1) - yv) * std::pow(pc, gamma) * std::log(T(1) - pc);
    }
  }
  const T inv = T(1) / static_cast<T>(static_cast<std::int64_t>(N) * C);
  out->value[0] = acc * inv;
  if (tape) {
    tape->record([p, y, out, gamma, alpha, N, C, inv]() {
      const T g = out->grad[0] * inv;
      for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
          const T raw = p->value.at(n, c);
          if (clamp_active(raw)) continue;
          const T pc = clamp_prob(raw);
          const T yv = y.at(n, c);
          T d = T(0);
          if (yv > T(0)) {
            T term = std::pow(T(1) - pc, gamma) / pc;
            if (gamma > T(0)) {
              term -= gamma * std::pow(T(1) - pc, gamma - T(1)) * std::log(pc);
            }
            d -= alpha * yv * term;
          }
          if (yv < T(1)) {
            T term = -std::pow(pc, gamma) / (T(1) - pc);
            if (gamma > T(0)) {
              term += gamma * std::pow(pc, gamma - T(1)) * std::log(T(1) - pc);
            }
            d -= (T(1) - alpha) * (T(1) - yv) * term;
          }
          p->grad.at(n, c) += g * d;
        }
      }
    });
  }
  return out;
}

#define SUBLOC_INSTANTIATE_LOSSES(T)                                                        \
  template NodePtr<T> bce<T>(Tape<T>*, const NodePtr<T>&, const Tensor<T>&);                \
  template NodePtr<T> weighted_bce<T>(Tape<T>*, const NodePtr<T>&, const Tensor<T>&,        \
                                      const ClassWeights&);                                 \
  template NodePtr<T> soft_f1<T>(Tape<T>*, const NodePtr<T>&, const Tensor<T>&);            \
  template NodePtr<T> focal<T>(Tape<T>*, const NodePtr<T>&, const Tensor<T>&, T, T);

SUBLOC_INSTANTIATE_LOSSES(float)
SUBLOC_INSTANTIATE_LOSSES(double)

#undef SUBLOC_INSTANTIATE_LOSSES

}  // namespace losses

template <typename T>
NodePtr<T> total_loss(Tape<T>* tape, std::int64_t step, int epoch, const LossSchedule& schedule,
                      const NodePtr<T>& p, const Tensor<T>& y, const ClassWeights& cw,
                      T focal_gamma, T focal_alpha, LossBreakdown* breakdown) {
  if (schedule.a_bce < 0 || schedule.a_f1 < 0 || schedule.a_bce_rescaled < 0 ||
      schedule.a_f1_rescaled < 0) {
    throw std::invalid_argument("total_loss: stage coefficients must be >= 0");
  }
  const int stage = schedule.stage(step, epoch);

  // Only the backpropagated components go on the tape; the rest are logged.
  NodePtr<T> total;
  NodePtr<T> bce_node, wbce_node, f1_node;
  if (stage == 1) {
    bce_node = losses::bce(tape, p, y);
    wbce_node = losses::weighted_bce<T>(nullptr, p, y, cw);
    f1_node = losses::soft_f1<T>(nullptr, p, y);
    total = bce_node;
  } else {
    const double ab = stage == 3 ? schedule.a_bce_rescaled : schedule.a_bce;
    const double af = stage == 3 ? schedule.a_f1_rescaled : schedule.a_f1;
    bce_node = losses::bce<T>(nullptr, p, y);
    wbce_node = losses::weighted_bce(tape, p, y, cw);
    f1_node = losses::soft_f1(tape, p, y);
    total = ops::scalar_combine(tape, wbce_node, f1_node, static_cast<T>(ab),
                                static_cast<T>(af));
  }
  auto focal_node = losses::focal<T>(nullptr, p, y, focal_gamma, focal_alpha);

  if (breakdown) {
    breakdown->bce = static_cast<double>(bce_node->value[0]);
    breakdown->weighted_bce = static_cast<double>(wbce_node->value[0]);
    breakdown->soft_f1 = static_cast<double>(f1_node->value[0]);
    breakdown->focal = static_cast<double>(focal_node->value[0]);
    breakdown->total = static_cast<double>(total->value[0]);
    breakdown->stage = stage;
  }
  return total;
}

template NodePtr<float> total_loss<float>(Tape<float>*, std::int64_t, int, const LossSchedule&,
                                          const NodePtr<float>&, const Tensor<float>&,
                                          const ClassWeights&, float, float, LossBreakdown*);
template NodePtr<double> total_loss<double>(Tape<double>*, std::int64_t, int, const LossSchedule&,
                                            const NodePtr<double>&, const Tensor<double>&,
                                            const ClassWeights&, double, double, LossBreakdown*);

}  // namespace subloc
