#include "subloc/ops.hpp"

#include <Eigen/Core>

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace subloc {
namespace ops {
namespace {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatRM<T>>;
template <typename T>
using ConstMapRM = Eigen::Map<const MatRM<T>>;

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

int conv_extent(int in, int kernel, int stride, int pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

// Unpacks one (sample, group) input slice into a [Cg*kh*kw, Ho*Wo] row-major
// patch matrix. Out-of-bounds taps read as zero.
template <typename T>
void im2col(const T* x, int Cg, int H, int W, int kh, int kw, int stride, int pad,
            int Ho, int Wo, T* col) {
  const int M = Ho * Wo;
  for (int c = 0; c < Cg; ++c) {
    const T* xc = x + static_cast<std::size_t>(c) * H * W;
    for (int i = 0; i < kh; ++i) {
      for (int j = 0; j < kw; ++j) {
        T* row = col + static_cast<std::size_t>((c * kh + i) * kw + j) * M;
        for (int oh = 0; oh < Ho; ++oh) {
          const int h = oh * stride - pad + i;
          T* dst = row + static_cast<std::size_t>(oh) * Wo;
          if (h < 0 || h >= H) {
            for (int ow = 0; ow < Wo; ++ow) dst[ow] = T(0);
            continue;
          }
          const T* src = xc + static_cast<std::size_t>(h) * W;
          for (int ow = 0; ow < Wo; ++ow) {
            const int w = ow * stride - pad + j;
            dst[ow] = (w >= 0 && w < W) ? src[w] : T(0);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds patch-matrix gradients back onto the input.
template <typename T>
void col2im_add(const T* col, int Cg, int H, int W, int kh, int kw, int stride, int pad,
                int Ho, int Wo, T* gx) {
  const int M = Ho * Wo;
  for (int c = 0; c < Cg; ++c) {
    T* gc = gx + static_cast<std::size_t>(c) * H * W;
    for (int i = 0; i < kh; ++i) {
      for (int j = 0; j < kw; ++j) {
        const T* row = col + static_cast<std::size_t>((c * kh + i) * kw + j) * M;
        for (int oh = 0; oh < Ho; ++oh) {
          const int h = oh * stride - pad + i;
          if (h < 0 || h >= H) continue;
          const T* src = row + static_cast<std::size_t>(oh) * Wo;
          T* dst = gc + static_cast<std::size_t>(h) * W;
          for (int ow = 0; ow < Wo; ++ow) {
            const int w = ow * stride - pad + j;
            if (w >= 0 && w < W) dst[w] += src[ow];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
NodePtr<T> conv2d(Tape<T>* tape, const NodePtr<T>& x, const NodePtr<T>& w,
                  const NodePtr<T>& b, const Conv2dSpec& spec) {
  const auto& xs = x->value.shape();
  const auto& ws = w->value.shape();
  require(xs.size() == 4, "conv2d: x must be rank 4, got " + x->value.shape_str());
  require(ws.size() == 4, "conv2d: w must be rank 4, got " + w->value.shape_str());
  require(spec.stride >= 1, "conv2d: stride must be >= 1, got " + std::to_string(spec.stride));
  require(spec.pad >= 0, "conv2d: pad must be >= 0, got " + std::to_string(spec.pad));
  const int N = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
  const int Cout = ws[0], kh = ws[2], kw = ws[3];
  require(spec.groups >= 1 && Cin % spec.groups == 0,
          "conv2d: input channels " + std::to_string(Cin) + " not divisible by groups " +
              std::to_string(spec.groups));
  require(Cout % spec.groups == 0, "conv2d: output channels " + std::to_string(Cout) +
                                       " not divisible by groups " + std::to_string(spec.groups));
  const int Cg = Cin / spec.groups;
  require(ws[1] == Cg, "conv2d: w dim 1 must be Cin/groups = " + std::to_string(Cg) + ", got " +
                           std::to_string(ws[1]));
  require(b->value.rank() == 1 && b->value.dim(0) == Cout,
          "conv2d: b must have shape [" + std::to_string(Cout) + "], got " + b->value.shape_str());
  const int Ho = conv_extent(H, kh, spec.stride, spec.pad);
  const int Wo = conv_extent(W, kw, spec.stride, spec.pad);
  require(Ho >= 1 && Wo >= 1, "conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                                  " exceeds padded input " + x->value.shape_str());

  const int Coutg = Cout / spec.groups;
  const int K = Cg * kh * kw;
  const int M = Ho * Wo;

  auto out = make_node<T>(Tensor<T>({N, Cout, Ho, Wo}));
  {
    std::vector<T> col(static_cast<std::size_t>(K) * M);
    for (int n = 0; n < N; ++n) {
      for (int g = 0; g < spec.groups; ++g) {
        const T* xg = x->value.data() + (static_cast<std::size_t>(n) * Cin + g * Cg) * H * W;
        im2col(xg, Cg, H, W, kh, kw, spec.stride, spec.pad, Ho, Wo, col.data());
        ConstMapRM<T> wmap(w->value.data() + static_cast<std::size_t>(g) * Coutg * K, Coutg, K);
        ConstMapRM<T> cmap(col.data(), K, M);
        MapRM<T> omap(out->value.data() + (static_cast<std::size_t>(n) * Cout + g * Coutg) * M,
                      Coutg, M);
        omap.noalias() = wmap * cmap;
      }
    }
    T* o = out->value.data();
    for (int n = 0; n < N; ++n) {
      for (int c = 0; c < Cout; ++c) {
        const T bias = b->value[c];
        T* oc = o + (static_cast<std::size_t>(n) * Cout + c) * M;
        for (int m = 0; m < M; ++m) oc[m] += bias;
      }
    }
  }

  if (tape) {
    const Conv2dSpec sp = spec;
    tape->record([x, w, b, out, sp, N, Cin, Cout, H, W, kh, kw, Ho, Wo]() {
      const int Cg = Cin / sp.groups;
      const int Coutg = Cout / sp.groups;
      const int K = Cg * kh * kw;
      const int M = Ho * Wo;
      std::vector<T> col(static_cast<std::size_t>(K) * M);
      std::vector<T> gcol(static_cast<std::size_t>(K) * M);
      for (int n = 0; n < N; ++n) {
        for (int g = 0; g < sp.groups; ++g) {
          const T* xg = x->value.data() + (static_cast<std::size_t>(n) * Cin + g * Cg) * H * W;
          im2col(xg, Cg, H, W, kh, kw, sp.stride, sp.pad, Ho, Wo, col.data());
          ConstMapRM<T> cmap(col.data(), K, M);
          ConstMapRM<T> gomap(
              out->grad.data() + (static_cast<std::size_t>(n) * Cout + g * Coutg) * M, Coutg, M);
          MapRM<T> gwmap(w->grad.data() + static_cast<std::size_t>(g) * Coutg * K, Coutg, K);
          gwmap.noalias() += gomap * cmap.transpose();
          ConstMapRM<T> wmap(w->value.data() + static_cast<std::size_t>(g) * Coutg * K, Coutg, K);
          MapRM<T> gcmap(gcol.data(), K, M);
          gcmap.noalias() = wmap.transpose() * gomap;
          T* gxg = x->grad.data() + (static_cast<std::size_t>(n) * Cin + g * Cg) * H * W;
          col2im_add(gcol.data(), Cg, H, W, kh, kw, sp.stride, sp.pad, Ho, Wo, gxg);
        }
      }
      const T* go = out->grad.data();
      for (int n = 0; n < N; ++n) {
        for (int c = 0; c < Cout; ++c) {
          const T* goc = go + (static_cast<std::size_t>(n) * Cout + c) * M;
          T acc = T(0);
          for (int m = 0; m < M; ++m) acc += goc[m];
          b->grad[c] += acc;
        }
      }
    });
  }
  return out;
}

template <typename T>
NodePtr<T> batch_norm(Tape<T>* tape, const NodePtr<T>& x, const NodePtr<T>& gamma,
                      const NodePtr<T>& beta, BatchNormState<T>& state, RunMode mode,
                      T momentum, T eps) {
  const auto& xs = x->value.shape();
  require(xs.size() == 4, "batch_norm: x must be rank 4, got " + x->value.shape_str());
  require(eps > T(0), "batch_norm: eps must be positive");
  const int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  require(gamma->value.rank() == 1 && gamma->value.dim(0) == C,
          "batch_norm: gamma must have shape [" + std::to_string(C) + "], got " +
              gamma->value.shape_str());
  require(beta->value.rank() == 1 && beta->value.dim(0) == C,
          "batch_norm: beta must have shape [" + std::to_string(C) + "], got " +
              beta->value.shape_str());
  const std::int64_t m = static_cast<std::int64_t>(N) * H * W;
  if (mode == RunMode::kTrain && m < 2) {
    throw std::invalid_argument(
        "batch_norm: train mode needs N*H*W >= 2 for a defined variance, got " +
        std::to_string(m));
  }

  const int HW = H * W;
  Tensor<T> mean({C});
  Tensor<T> inv_std({C});
  if (mode == RunMode::kTrain) {
    for (int c = 0; c < C; ++c) {
      T acc = T(0);
      for (int n = 0; n < N; ++n) {
        const T* xc = x->value.data() + (static_cast<std::size_t>(n) * C + c) * HW;
        for (int i = 0; i < HW; ++i) acc += xc[i];
      }
      const T mu = acc / static_cast<T>(m);
      T vacc = T(0);
      for (int n = 0; n < N; ++n) {
        const T* xc = x->value.data() + (static_cast<std::size_t>(n) * C + c) * HW;
        for (int i = 0; i < HW; ++i) {
          const T d = xc[i] - mu;
          vacc += d * d;
        }
      }
      const T var = vacc / static_cast<T>(m);
      mean[c] = mu;
      inv_std[c] = T(1) / std::sqrt(var + eps);
      state.running_mean[c] = (T(1) - momentum) * state.running_mean[c] + momentum * mu;
      state.running_var[c] = (T(1) - momentum) * state.running_var[c] + momentum * var;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[c] = state.running_mean[c];
      inv_std[c] = T(1) / std::sqrt(state.running_var[c] + eps);
    }
  }

  auto out = make_node<T>(Tensor<T>({N, C, H, W}));
  auto xhat = std::make_shared<Tensor<T>>(Tensor<T>({N, C, H, W}));
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const T mu = mean[c], is = inv_std[c];
      const T g = gamma->value[c], bt = beta->value[c];
      const std::size_t off = (static_cast<std::size_t>(n) * C + c) * HW;
      const T* xc = x->value.data() + off;
      T* hc = xhat->data() + off;
      T* oc = out->value.data() + off;
      for (int i = 0; i < HW; ++i) {
        const T h = (xc[i] - mu) * is;
        hc[i] = h;
        oc[i] = g * h + bt;
      }
    }
  }

  if (tape) {
    tape->record([x, gamma, beta, out, xhat, inv_std, mode, N, C, HW, m]() {
      for (int c = 0; c < C; ++c) {
        T sum_dy = T(0), sum_dy_h = T(0);
        for (int n = 0; n < N; ++n) {
          const std::size_t off = (static_cast<std::size_t>(n) * C + c) * HW;
          const T* gy = out->grad.data() + off;
          const T* hc = xhat->data() + off;
          for (int i = 0; i < HW; ++i) {
            sum_dy += gy[i];
            sum_dy_h += gy[i] * hc[i];
          }
        }
        gamma->grad[c] += sum_dy_h;
        beta->grad[c] += sum_dy;
        const T gis = gamma->value[c] * inv_std[c];
        if (mode == RunMode::kTrain) {
          const T inv_m = T(1) / static_cast<T>(m);
          for (int n = 0; n < N; ++n) {
            const std::size_t off = (static_cast<std::size_t>(n) * C + c) * HW;
            const T* gy = out->grad.data() + off;
            const T* hc = xhat->data() + off;
            T* gx = x->grad.data() + off;
            for (int i = 0; i < HW; ++i) {
              gx[i] += gis * (gy[i] - inv_m * sum_dy - hc[i] * inv_m * sum_dy_h);
            }
          }
        } else {
          for (int n = 0; n < N; ++n) {
            const std::size_t off = (static_cast<std::size_t>(n) * C + c) * HW;
            const T* gy = out->grad.data() + off;
            T* gx = x->grad.data() + off;
            for (int i = 0; i < HW; ++i) gx[i] += gis * gy[i];
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
NodePtr<T> global_avg_pool(Tape<T>* tape, const NodePtr<T>& x) {
  const auto& xs = x->value.shape();
  require(xs.size() == 4, "global_avg_pool: x must be rank 4, got " + x->value.shape_str());
  const int N = xs[0], C = xs[1], HW = xs[2] * xs[3];
  auto out = make_node<T>(Tensor<T>({N, C}));
  const T inv = T(1) / static_cast<T>(HW);
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const T* xc = x->value.data() + (static_cast<std::size_t>(n) * C + c) * HW;
      T acc = T(0);
      for (int i = 0; i < HW; ++i) acc += xc[i];
      out->value.at(n, c) = acc * inv;
    }
  }
  if (tape) {
    tape->record([x, out, N, C, HW, inv]() {
      for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
          const T g = out->grad.at(n, c) * inv;
          T* gx = x->grad.data() + (static_cast<std::size_t>(n) * C + c) * HW;
          for (int i = 0; i < HW; ++i) gx[i] += g;
        }
      }
    });
  }
  return out;
}

template <typename T>
NodePtr<T> dense(Tape<T>* tape, const NodePtr<T>& x, const NodePtr<T>& w,
                 const NodePtr<T>& b) {
  const auto& xs = x->value.shape();
  const auto& ws = w->value.shape();
  require(xs.size() == 2, "dense: x must be rank 2, got " + x->value.shape_str());
  require(ws.size() == 2, "dense: w must be rank 2, got " + w->value.shape_str());
  const int N = xs[0], F = xs[1], G = ws[1];
  require(ws[0] == F, "dense: inner dimensions disagree, x " + x->value.shape_str() + " vs w " +
                          w->value.shape_str());
  require(b->value.rank() == 1 && b->value.dim(0) == G,
          "dense: b must have shape [" + std::to_string(G) + "], got " + b->value.shape_str());

  auto out = make_node<T>(Tensor<T>({N, G}));
  {
    ConstMapRM<T> xm(x->value.data(), N, F);
    ConstMapRM<T> wm(w->value.data(), F, G);
    MapRM<T> om(out->value.data(), N, G);
    om.noalias() = xm * wm;
    for (int n = 0; n < N; ++n) {
      T* row = out->value.data() + static_cast<std::size_t>(n) * G;
      for (int g = 0; g < G; ++g) row[g] += b->value[g];
    }
  }
  if (tape) {
    tape->record([x, w, b, out, N, F, G]() {
      ConstMapRM<T> xm(x->value.data(), N, F);
      ConstMapRM<T> wm(w->value.data(), F, G);
      ConstMapRM<T> gom(out->grad.data(), N, G);
      MapRM<T> gxm(x->grad.data(), N, F);
      MapRM<T> gwm(w->grad.data(), F, G);
      gxm.noalias() += gom * wm.transpose();
      gwm.noalias() += xm.transpose() * gom;
      for (int n = 0; n < N; ++n) {
        const T* row = out->grad.data() + static_cast<std::size_t>(n) * G;
        for (int g = 0; g < G; ++g) b->grad[g] += row[g];
      }
    });
  }
  return out;
}

template <typename T>
NodePtr<T> relu(Tape<T>* tape, const NodePtr<T>& x) {
  auto out = make_node<T>(Tensor<T>(x->value.shape()));
  const std::int64_t n = x->value.size();
  for (std::int64_t i = 0; i < n; ++i) out->value[i] = x->value[i] > T(0) ? x->value[i] : T(0);
  if (tape) {
    tape->record([x, out, n]() {
      for (std::int64_t i = 0; i < n; ++i) {
        if (x->value[i] > T(0)) x->grad[i] += out->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
NodePtr<T> sigmoid(Tape<T>* tape, const NodePtr<T>& x) {
  auto out = make_node<T>(Tensor<T>(x->value.shape()));
  const std::int64_t n = x->value.size();
  for (std::int64_t i = 0; i < n; ++i) {
    const T v = x->value[i];
    if (v >= T(0)) {
      out->value[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      out->value[i] = e / (T(1) + e);
    }
  }
  if (tape) {
    tape->record([x, out, n]() {
      for (std::int64_t i = 0; i < n; ++i) {
        const T s = out->value[i];
        x->grad[i] += out->grad[i] * s * (T(1) - s);
      }
    });
  }
  return out;
}

template <typename T>
NodePtr<T> add(Tape<T>* tape, const NodePtr<T>& a, const NodePtr<T>& b) {
  require(a->value.same_shape(b->value), "add: shapes differ, " + a->value.shape_str() + " vs " +
                                             b->value.shape_str());
  auto out = make_node<T>(Tensor<T>(a->value.shape()));
  const std::int64_t n = a->value.size();
  for (std::int64_t i = 0; i < n; ++i) out->value[i] = a->value[i] + b->value[i];
  if (tape) {
    tape->record([a, b, out, n]() {
      for (std::int64_t i = 0; i < n; ++i) {
        a->grad[i] += out->grad[i];
        b->grad[i] += out->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
NodePtr<T> channel_scale(Tape<T>* tape, const NodePtr<T>& x, const NodePtr<T>& s) {
  const auto& xs = x->value.shape();
  require(xs.size() == 4, "channel_scale: x must be rank 4, got " + x->value.shape_str());
  require(s->value.rank() == 2 && s->value.dim(0) == xs[0] && s->value.dim(1) == xs[1],
          "channel_scale: s must have shape [" + std::to_string(xs[0]) + "," +
              std::to_string(xs[1]) + "], got " + s->value.shape_str());
  const int N = xs[0], C = xs[1], HW = xs[2] * xs[3];
  auto out = make_node<T>(Tensor<T>(xs));
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const T g = s->value.at(n, c);
      const std::size_t off = (static_cast<std::size_t>(n) * C + c) * HW;
      const T* xc = x->value.data() + off;
      T* oc = out->value.data() + off;
      for (int i = 0; i < HW; ++i) oc[i] = xc[i] * g;
    }
  }
  if (tape) {
    tape->record([x, s, out, N, C, HW]() {
      for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
          const T g = s->value.at(n, c);
          const std::size_t off = (static_cast<std::size_t>(n) * C + c) * HW;
          const T* xc = x->value.data() + off;
          const T* go = out->grad.data() + off;
          T* gx = x->grad.data() + off;
          T acc = T(0);
          for (int i = 0; i < HW; ++i) {
            gx[i] += go[i] * g;
            acc += go[i] * xc[i];
          }
          s->grad.at(n, c) += acc;
        }
      }
    });
  }
  return out;
}

template <typename T>
NodePtr<T> sum(Tape<T>* tape, const NodePtr<T>& x) {
  auto out = make_node<T>(Tensor<T>({1}));
  T acc = T(0);
  const std::int64_t n = x->value.size();
  for (std::int64_t i = 0; i < n; ++i) acc += x->value[i];
  out->value[0] = acc;
  if (tape) {
    tape->record([x, out, n]() {
      const T g = out->grad[0];
      for (std::int64_t i = 0; i < n; ++i) x->grad[i] += g;
    });
  }
  return out;
}

template <typename T>
NodePtr<T> scalar_combine(Tape<T>* tape, const NodePtr<T>& a, const NodePtr<T>& b, T ca, T cb) {
  require(a->value.size() == 1 && b->value.size() == 1,
          "scalar_combine: inputs must be scalars, got " + a->value.shape_str() + " and " +
              b->value.shape_str());
  auto out = make_node<T>(Tensor<T>({1}));
  out->value[0] = ca * a->value[0] + cb * b->value[0];
  if (tape) {
    tape->record([a, b, out, ca, cb]() {
      a->grad[0] += ca * out->grad[0];
      b->grad[0] += cb * out->grad[0];
    });
  }
  return out;
}

#define SUBLOC_INSTANTIATE_OPS(T)                                                              \
  template NodePtr<T> conv2d<T>(Tape<T>*, const NodePtr<T>&, const NodePtr<T>&,                \
                                const NodePtr<T>&, const Conv2dSpec&);                         \
  template NodePtr<T> batch_norm<T>(Tape<T>*, const NodePtr<T>&, const NodePtr<T>&,            \
                                    const NodePtr<T>&, BatchNormState<T>&, RunMode, T, T);     \
  template NodePtr<T> global_avg_pool<T>(Tape<T>*, const NodePtr<T>&);                         \
  template NodePtr<T> dense<T>(Tape<T>*, const NodePtr<T>&, const NodePtr<T>&,                 \
                               const NodePtr<T>&);                                             \
  template NodePtr<T> relu<T>(Tape<T>*, const NodePtr<T>&);                                    \
  template NodePtr<T> sigmoid<T>(Tape<T>*, const NodePtr<T>&);                                 \
  template NodePtr<T> add<T>(Tape<T>*, const NodePtr<T>&, const NodePtr<T>&);                  \
  template NodePtr<T> channel_scale<T>(Tape<T>*, const NodePtr<T>&, const NodePtr<T>&);        \
  template NodePtr<T> sum<T>(Tape<T>*, const NodePtr<T>&);                                     \
  template NodePtr<T> scalar_combine<T>(Tape<T>*, const NodePtr<T>&, const NodePtr<T>&, T, T);

SUBLOC_INSTANTIATE_OPS(float)
SUBLOC_INSTANTIATE_OPS(double)

#undef SUBLOC_INSTANTIATE_OPS

}  // namespace ops
}  // namespace subloc
