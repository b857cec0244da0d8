#pragma once

#include "subloc/autodiff.hpp"
#include "subloc/tensor.hpp"

namespace subloc {

enum class RunMode { kTrain, kEval };

// Per-channel running statistics, updated in train mode and consumed in eval.
template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;  // [C]
  Tensor<T> running_var;   // [C]

  explicit BatchNormState(int channels)
      : running_mean({channels}), running_var(Tensor<T>::full({channels}, T(1))) {}
};

namespace ops {

struct Conv2dSpec {
  int stride = 1;
  int pad = 0;
  int groups = 1;
};

// Grouped 2-D convolution, NCHW. x:[N,Cin,H,W] w:[Cout,Cin/groups,kh,kw]
// b:[Cout]. Output spatial extent: (H + 2*pad - kh) / stride + 1 (floor).
template <typename T>
NodePtr<T> conv2d(Tape<T>* tape, const NodePtr<T>& x, const NodePtr<T>& w,
                  const NodePtr<T>& b, const Conv2dSpec& spec);

// Train mode normalizes by batch statistics and updates `state`; eval mode
// normalizes by the running statistics. Train mode requires N*H*W >= 2.
template <typename T>
NodePtr<T> batch_norm(Tape<T>* tape, const NodePtr<T>& x, const NodePtr<T>& gamma,
                      const NodePtr<T>& beta, BatchNormState<T>& state, RunMode mode,
                      T momentum, T eps);

// [N,C,H,W] -> [N,C], mean over the spatial extent.
template <typename T>
NodePtr<T> global_avg_pool(Tape<T>* tape, const NodePtr<T>& x);

// x:[N,F] w:[F,G] b:[G] -> [N,G]
template <typename T>
NodePtr<T> dense(Tape<T>* tape, const NodePtr<T>& x, const NodePtr<T>& w,
                 const NodePtr<T>& b);

template <typename T>
NodePtr<T> relu(Tape<T>* tape, const NodePtr<T>& x);

template <typename T>
NodePtr<T> sigmoid(Tape<T>* tape, const NodePtr<T>& x);

template <typename T>
NodePtr<T> add(Tape<T>* tape, const NodePtr<T>& a, const NodePtr<T>& b);

// x:[N,C,H,W] scaled per (n,c) by s:[N,C]; the SE gating multiply.
template <typename T>
NodePtr<T> channel_scale(Tape<T>* tape, const NodePtr<T>& x, const NodePtr<T>& s);

// Sum of all elements -> scalar [1].
template <typename T>
NodePtr<T> sum(Tape<T>* tape, const NodePtr<T>& x);

// total = ca*a + cb*b on scalar nodes.
template <typename T>
NodePtr<T> scalar_combine(Tape<T>* tape, const NodePtr<T>& a, const NodePtr<T>& b,
                          T ca, T cb);

}  // namespace ops
}  // namespace subloc
