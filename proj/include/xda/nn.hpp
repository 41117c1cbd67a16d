// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "xda/rng.hpp"
#include "xda/tensor.hpp"

namespace xda {

// ---- functional ops ----

namespace detail {

// Scatter kernel patches of x into a [CK x P] matrix (P = OH*OW), row index
// ordered (ic, ky, kx) to match the flattened weight layout.
template <typename T>
void im2col_t(const T* x, T* colt, int ic, int h, int w, int k, int pad, int stride, int oh,
              int ow) {
  const int p = oh * ow;
  for (int c = 0; c < ic; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = colt + (static_cast<size_t>(c) * k * k + static_cast<size_t>(ky) * k + kx) *
                            static_cast<size_t>(p);
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) {
            for (int ox = 0; ox < ow; ++ox) row[oy * ow + ox] = T(0);
            continue;
          }
          const T* xrow = x + (static_cast<size_t>(c) * h + iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kx - pad;
            row[oy * ow + ox] = (ix >= 0 && ix < w) ? xrow[ix] : T(0);
          }
        }
      }
    }
  }
}

// Inverse of im2col_t on a [P x CK] gradient matrix: adds overlapping patch
// gradients back into dx.
template <typename T>
void col2im_acc(const T* dcol, T* dx, int ic, int h, int w, int k, int pad, int stride, int oh,
                int ow) {
  const int ck = ic * k * k;
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const T* crow = dcol + (static_cast<size_t>(oy) * ow + ox) * ck;
      for (int c = 0; c < ic; ++c) {
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * stride + kx - pad;
            if (ix < 0 || ix >= w) continue;
            dx[(static_cast<size_t>(c) * h + iy) * w + ix] +=
                crow[(static_cast<size_t>(c) * k + ky) * k + kx];
          }
        }
      }
    }
  }
}

}  // namespace detail

// 2-d convolution: x [N,IC,H,W], w [OC,IC,K,K], b [OC].
template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b, int stride,
                  int pad) {
  if (x.rank() != 4 || w.rank() != 4) throw ShapeError("conv2d needs 4-d input and weight");
  const int n = x.dim(0), ic = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int oc = w.dim(0), k = w.dim(2);
  if (w.dim(1) != ic || w.dim(3) != k)
    throw ShapeError("conv2d weight " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
  if (b.rank() != 1 || b.dim(0) != oc) throw ShapeError("conv2d bias " + shape_str(b.shape()));
  if (stride < 1) throw ShapeError("conv2d stride must be >= 1");
  const int oh = (h + 2 * pad - k) / stride + 1;
  const int ow = (wd + 2 * pad - k) / stride + 1;
  if (oh <= 0 || ow <= 0) throw ShapeError("conv2d output would be empty");
  const int ck = ic * k * k, p = oh * ow;

  std::vector<T> out(static_cast<size_t>(n) * oc * p);
  std::vector<T> colt(static_cast<size_t>(ck) * p);
  for (int i = 0; i < n; ++i) {
    detail::im2col_t(x.data() + static_cast<size_t>(i) * ic * h * wd, colt.data(), ic, h, wd, k,
                     pad, stride, oh, ow);
    T* oi = out.data() + static_cast<size_t>(i) * oc * p;
    detail::gemm(w.data(), colt.data(), oi, oc, ck, p);
    for (int o = 0; o < oc; ++o) {
      const T bo = b.data()[o];
      T* row = oi + static_cast<size_t>(o) * p;
      for (int j = 0; j < p; ++j) row[j] += bo;
    }
  }
  TensorT<T> r(Shape{n, oc, oh, ow}, std::move(out));
  if (auto* tp = TapeT<T>::current()) {
    int nx = tp->node_of(x), nw = tp->node_of(w), nb = tp->node_of(b);
    if (nx >= 0 || nw >= 0 || nb >= 0) {
      auto px = x.data_ptr();
      auto pw = w.data_ptr();
      tp->record(r, {nx, nw, nb},
                 [nx, nw, nb, px, pw, n, ic, h, wd, oc, k, pad, stride, oh, ow, ck,
                  p](TapeT<T>& t, const std::vector<T>& g) {
                   std::vector<T> col(static_cast<size_t>(p) * ck);
                   std::vector<T> colt(static_cast<size_t>(ck) * p);
                   std::vector<T> gt(static_cast<size_t>(p) * oc);
                   std::vector<T> dcol;
                   for (int i = 0; i < n; ++i) {
                     const T* gi = g.data() + static_cast<size_t>(i) * oc * p;
                     if (nb >= 0) {
                       auto& db = t.grad_buffer(nb);
                       for (int o = 0; o < oc; ++o) {
                         T acc = T(0);
                         const T* row = gi + static_cast<size_t>(o) * p;
                         for (int j = 0; j < p; ++j) acc += row[j];
                         db[o] += acc;
                       }
                     }
                     if (nw >= 0 || nx >= 0) {
                       detail::im2col_t(px->data() + static_cast<size_t>(i) * ic * h * wd,
                                        colt.data(), ic, h, wd, k, pad, stride, oh, ow);
                     }
                     if (nw >= 0) {
                       // dW += g_i [OC,P] * col [P,CK]
                       detail::transpose2d(colt.data(), col.data(), ck, p);
                       detail::gemm_acc(gi, col.data(), t.grad_buffer(nw).data(), oc, p, ck);
                     }
                     if (nx >= 0) {
                       // dcol [P,CK] = g_i^T [P,OC] * w [OC,CK]
                       detail::transpose2d(gi, gt.data(), oc, p);
                       dcol.assign(static_cast<size_t>(p) * ck, T(0));
                       detail::gemm_acc(gt.data(), pw->data(), dcol.data(), p, oc, ck);
                       detail::col2im_acc(dcol.data(),
                                          t.grad_buffer(nx).data() +
                                              static_cast<size_t>(i) * ic * h * wd,
                                          ic, h, wd, k, pad, stride, oh, ow);
                     }
                   }
                 });
    }
  }
  return r;
}

// 2x2 max pooling, stride 2. Ties pick the first element in scan order.
template <typename T>
TensorT<T> maxpool2x2(const TensorT<T>& x) {
  if (x.rank() != 4) throw ShapeError("maxpool2x2 needs a 4-d tensor");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0) throw ShapeError("maxpool2x2 needs even spatial dims");
  const int oh = h / 2, ow = w / 2;
  std::vector<T> out(static_cast<size_t>(n) * c * oh * ow);
  auto argmax = std::make_shared<std::vector<int>>(out.size());
  for (int i = 0; i < n * c; ++i) {
    const T* plane = x.data() + static_cast<size_t>(i) * h * w;
    T* oplane = out.data() + static_cast<size_t>(i) * oh * ow;
    int* aplane = argmax->data() + static_cast<size_t>(i) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        int best = (oy * 2) * w + ox * 2;
        T bv = plane[best];
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const int idx = (oy * 2 + dy) * w + ox * 2 + dx;
            if (plane[idx] > bv) {
              bv = plane[idx];
              best = idx;
            }
          }
        oplane[oy * ow + ox] = bv;
        aplane[oy * ow + ox] = best;
      }
    }
  }
  TensorT<T> r(Shape{n, c, oh, ow}, std::move(out));
  if (auto* tp = TapeT<T>::current()) {
    int nx = tp->node_of(x);
    if (nx >= 0) {
      const size_t plane_in = static_cast<size_t>(h) * w, plane_out = static_cast<size_t>(oh) * ow;
      const int planes = n * c;
      tp->record(r, {nx}, [nx, argmax, planes, plane_in, plane_out](TapeT<T>& t,
                                                                    const std::vector<T>& g) {
        auto& dx = t.grad_buffer(nx);
        for (int i = 0; i < planes; ++i)
          for (size_t j = 0; j < plane_out; ++j)
            dx[static_cast<size_t>(i) * plane_in +
               static_cast<size_t>((*argmax)[static_cast<size_t>(i) * plane_out + j])] +=
                g[static_cast<size_t>(i) * plane_out + j];
      });
    }
  }
  return r;
}

// Per-channel batch statistics of a [N,C,H,W] tensor (biased variance).
// When captured under an active tape, mean_t/var_t hold the same values as
// tape-linked tensors so losses that reuse the statistics on another batch
// keep their gradient path into the source batch.
template <typename T>
struct BatchStats {
  std::vector<T> mean, var;
  std::optional<TensorT<T>> mean_t, var_t;
};

template <typename T>
BatchStats<T> batch_stats(const TensorT<T>& x) {
  if (x.rank() != 4) throw ShapeError("batch_stats needs a 4-d tensor");
  const int n = x.dim(0), c = x.dim(1);
  const size_t hw = static_cast<size_t>(x.dim(2)) * x.dim(3);
  const size_t m = static_cast<size_t>(n) * hw;
  BatchStats<T> s;
  s.mean.assign(static_cast<size_t>(c), T(0));
  s.var.assign(static_cast<size_t>(c), T(0));
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const T* plane = x.data() + (static_cast<size_t>(i) * c + ch) * hw;
      T acc = T(0);
      for (size_t j = 0; j < hw; ++j) acc += plane[j];
      s.mean[static_cast<size_t>(ch)] += acc;
    }
  }
  for (int ch = 0; ch < c; ++ch) s.mean[static_cast<size_t>(ch)] /= static_cast<T>(m);
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const T* plane = x.data() + (static_cast<size_t>(i) * c + ch) * hw;
      const T mu = s.mean[static_cast<size_t>(ch)];
      T acc = T(0);
      for (size_t j = 0; j < hw; ++j) {
        const T d = plane[j] - mu;
        acc += d * d;
      }
      s.var[static_cast<size_t>(ch)] += acc;
    }
  }
  for (int ch = 0; ch < c; ++ch) s.var[static_cast<size_t>(ch)] /= static_cast<T>(m);
  return s;
}

// Batch-statistics normalization; gradients flow through mean and variance.
template <typename T>
TensorT<T> batchnorm_train(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                           T eps, BatchStats<T>* stats_out = nullptr) {
  if (x.rank() != 4) throw ShapeError("batchnorm needs a 4-d tensor");
  const int n = x.dim(0), c = x.dim(1);
  if (gamma.rank() != 1 || gamma.dim(0) != c || beta.rank() != 1 || beta.dim(0) != c)
    throw ShapeError("batchnorm affine params must be [C]");
  const size_t hw = static_cast<size_t>(x.dim(2)) * x.dim(3);
  const size_t m = static_cast<size_t>(n) * hw;

  auto stats = batch_stats(x);
  if (stats_out) {
    *stats_out = stats;
    auto* tp = TapeT<T>::current();
    const int nxs = tp ? tp->node_of(x) : -1;
    if (nxs >= 0) {
      const T inv_m = T(1) / static_cast<T>(m);
      TensorT<T> mt({c}, std::vector<T>(stats.mean));
      tp->record(mt, {nxs}, [nxs, n, c, hw, inv_m](TapeT<T>& t, const std::vector<T>& g) {
        auto& dx = t.grad_buffer(nxs);
        for (int i = 0; i < n; ++i)
          for (int ch = 0; ch < c; ++ch) {
            T* dp = dx.data() + (static_cast<size_t>(i) * c + ch) * hw;
            const T gch = g[static_cast<size_t>(ch)] * inv_m;
            for (size_t j = 0; j < hw; ++j) dp[j] += gch;
          }
      });
      TensorT<T> vt({c}, std::vector<T>(stats.var));
      auto px = x.data_ptr();
      auto pmean = std::make_shared<std::vector<T>>(stats.mean);
      tp->record(vt, {nxs},
                 [nxs, px, pmean, n, c, hw, inv_m](TapeT<T>& t, const std::vector<T>& g) {
                   auto& dx = t.grad_buffer(nxs);
                   for (int i = 0; i < n; ++i)
                     for (int ch = 0; ch < c; ++ch) {
                       const T* xp = px->data() + (static_cast<size_t>(i) * c + ch) * hw;
                       T* dp = dx.data() + (static_cast<size_t>(i) * c + ch) * hw;
                       const T mu = (*pmean)[static_cast<size_t>(ch)];
                       const T gch = T(2) * g[static_cast<size_t>(ch)] * inv_m;
                       for (size_t j = 0; j < hw; ++j) dp[j] += gch * (xp[j] - mu);
                     }
                 });
      stats_out->mean_t = std::move(mt);
      stats_out->var_t = std::move(vt);
    }
  }
  std::vector<T> ivstd(static_cast<size_t>(c));
  for (int ch = 0; ch < c; ++ch)
    ivstd[static_cast<size_t>(ch)] = T(1) / std::sqrt(stats.var[static_cast<size_t>(ch)] + eps);

  std::vector<T> out(x.numel());
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const T* plane = x.data() + (static_cast<size_t>(i) * c + ch) * hw;
      T* oplane = out.data() + (static_cast<size_t>(i) * c + ch) * hw;
      const T mu = stats.mean[static_cast<size_t>(ch)];
      const T iv = ivstd[static_cast<size_t>(ch)];
      const T ga = gamma.data()[ch], be = beta.data()[ch];
      for (size_t j = 0; j < hw; ++j) oplane[j] = std::fma((plane[j] - mu) * iv, ga, be);
    }
  }
  TensorT<T> r(x.shape(), std::move(out));
  if (auto* tp = TapeT<T>::current()) {
    int nx = tp->node_of(x), ng = tp->node_of(gamma), nb = tp->node_of(beta);
    if (nx >= 0 || ng >= 0 || nb >= 0) {
      auto px = x.data_ptr();
      auto pg = gamma.data_ptr();
      auto pmean = std::make_shared<std::vector<T>>(stats.mean);
      auto piv = std::make_shared<std::vector<T>>(std::move(ivstd));
      tp->record(r, {nx, ng, nb}, [nx, ng, nb, px, pg, pmean, piv, n, c, hw,
                                   m](TapeT<T>& t, const std::vector<T>& g) {
        for (int ch = 0; ch < c; ++ch) {
          const T mu = (*pmean)[static_cast<size_t>(ch)];
          const T iv = (*piv)[static_cast<size_t>(ch)];
          const T ga = (*pg)[static_cast<size_t>(ch)];
          // first pass: channel sums of g and g*xhat
          T sg = T(0), sgx = T(0);
          for (int i = 0; i < n; ++i) {
            const T* xp = px->data() + (static_cast<size_t>(i) * c + ch) * hw;
            const T* gp = g.data() + (static_cast<size_t>(i) * c + ch) * hw;
            for (size_t j = 0; j < hw; ++j) {
              sg += gp[j];
              sgx += gp[j] * (xp[j] - mu) * iv;
            }
          }
          if (ng >= 0) t.grad_buffer(ng)[static_cast<size_t>(ch)] += sgx;
          if (nb >= 0) t.grad_buffer(nb)[static_cast<size_t>(ch)] += sg;
          if (nx >= 0) {
            auto& dx = t.grad_buffer(nx);
            const T inv_m = T(1) / static_cast<T>(m);
            for (int i = 0; i < n; ++i) {
              const T* xp = px->data() + (static_cast<size_t>(i) * c + ch) * hw;
              const T* gp = g.data() + (static_cast<size_t>(i) * c + ch) * hw;
              T* dp = dx.data() + (static_cast<size_t>(i) * c + ch) * hw;
              for (size_t j = 0; j < hw; ++j) {
                const T xh = (xp[j] - mu) * iv;
                dp[j] += ga * iv * (gp[j] - sg * inv_m - xh * sgx * inv_m);
              }
            }
          }
        }
      });
    }
  }
  return r;
}

// Normalization with fixed statistics (running or externally supplied).
// Stats are constants; gradients flow to x, gamma, beta only.
template <typename T>
TensorT<T> batchnorm_eval(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                          const std::vector<T>& mean, const std::vector<T>& var, T eps) {
  if (x.rank() != 4) throw ShapeError("batchnorm needs a 4-d tensor");
  const int n = x.dim(0), c = x.dim(1);
  if (gamma.rank() != 1 || gamma.dim(0) != c || beta.rank() != 1 || beta.dim(0) != c)
    throw ShapeError("batchnorm affine params must be [C]");
  if (static_cast<int>(mean.size()) != c || static_cast<int>(var.size()) != c)
    throw ShapeError("batchnorm stats must be [C]");
  const size_t hw = static_cast<size_t>(x.dim(2)) * x.dim(3);
  std::vector<T> ivstd(static_cast<size_t>(c));
  for (int ch = 0; ch < c; ++ch)
    ivstd[static_cast<size_t>(ch)] = T(1) / std::sqrt(var[static_cast<size_t>(ch)] + eps);

  std::vector<T> out(x.numel());
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const T* plane = x.data() + (static_cast<size_t>(i) * c + ch) * hw;
      T* oplane = out.data() + (static_cast<size_t>(i) * c + ch) * hw;
      const T mu = mean[static_cast<size_t>(ch)];
      const T iv = ivstd[static_cast<size_t>(ch)];
      const T ga = gamma.data()[ch], be = beta.data()[ch];
      for (size_t j = 0; j < hw; ++j) oplane[j] = std::fma((plane[j] - mu) * iv, ga, be);
    }
  }
  TensorT<T> r(x.shape(), std::move(out));
  if (auto* tp = TapeT<T>::current()) {
    int nx = tp->node_of(x), ng = tp->node_of(gamma), nb = tp->node_of(beta);
    if (nx >= 0 || ng >= 0 || nb >= 0) {
      auto px = x.data_ptr();
      auto pg = gamma.data_ptr();
      auto pmean = std::make_shared<std::vector<T>>(mean);
      auto piv = std::make_shared<std::vector<T>>(std::move(ivstd));
      tp->record(r, {nx, ng, nb},
                 [nx, ng, nb, px, pg, pmean, piv, n, c, hw](TapeT<T>& t, const std::vector<T>& g) {
                   for (int ch = 0; ch < c; ++ch) {
                     const T mu = (*pmean)[static_cast<size_t>(ch)];
                     const T iv = (*piv)[static_cast<size_t>(ch)];
                     const T ga = (*pg)[static_cast<size_t>(ch)];
                     T sg = T(0), sgx = T(0);
                     for (int i = 0; i < n; ++i) {
                       const T* xp = px->data() + (static_cast<size_t>(i) * c + ch) * hw;
                       const T* gp = g.data() + (static_cast<size_t>(i) * c + ch) * hw;
                       T* dp = nx >= 0 ? t.grad_buffer(nx).data() +
                                             (static_cast<size_t>(i) * c + ch) * hw
                                       : nullptr;
                       for (size_t j = 0; j < hw; ++j) {
                         sg += gp[j];
                         sgx += gp[j] * (xp[j] - mu) * iv;
                         if (dp) dp[j] += gp[j] * ga * iv;
                       }
                     }
                     if (ng >= 0) t.grad_buffer(ng)[static_cast<size_t>(ch)] += sgx;
                     if (nb >= 0) t.grad_buffer(nb)[static_cast<size_t>(ch)] += sg;
                   }
                 });
    }
  }
  return r;
}

// Normalization by externally supplied per-channel statistics tensors.
// Forward arithmetic matches batchnorm_eval; gradients additionally flow
// into mean and var, so statistics computed from one batch and applied to
// another keep the cross-batch gradient path.
template <typename T>
TensorT<T> batchnorm_stats(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                           const TensorT<T>& mean, const TensorT<T>& var, T eps) {
  if (x.rank() != 4) throw ShapeError("batchnorm needs a 4-d tensor");
  const int n = x.dim(0), c = x.dim(1);
  if (gamma.rank() != 1 || gamma.dim(0) != c || beta.rank() != 1 || beta.dim(0) != c)
    throw ShapeError("batchnorm affine params must be [C]");
  if (mean.rank() != 1 || mean.dim(0) != c || var.rank() != 1 || var.dim(0) != c)
    throw ShapeError("batchnorm stats must be [C]");
  const size_t hw = static_cast<size_t>(x.dim(2)) * x.dim(3);
  std::vector<T> ivstd(static_cast<size_t>(c));
  for (int ch = 0; ch < c; ++ch)
    ivstd[static_cast<size_t>(ch)] = T(1) / std::sqrt(var.data()[ch] + eps);

  std::vector<T> out(x.numel());
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const T* plane = x.data() + (static_cast<size_t>(i) * c + ch) * hw;
      T* oplane = out.data() + (static_cast<size_t>(i) * c + ch) * hw;
      const T mu = mean.data()[ch];
      const T iv = ivstd[static_cast<size_t>(ch)];
      const T ga = gamma.data()[ch], be = beta.data()[ch];
      for (size_t j = 0; j < hw; ++j) oplane[j] = std::fma((plane[j] - mu) * iv, ga, be);
    }
  }
  TensorT<T> r(x.shape(), std::move(out));
  if (auto* tp = TapeT<T>::current()) {
    int nx = tp->node_of(x), ng = tp->node_of(gamma), nb = tp->node_of(beta);
    int nm = tp->node_of(mean), nv = tp->node_of(var);
    if (nx >= 0 || ng >= 0 || nb >= 0 || nm >= 0 || nv >= 0) {
      auto px = x.data_ptr();
      auto pg = gamma.data_ptr();
      auto pmean = std::make_shared<std::vector<T>>(mean.values());
      auto piv = std::make_shared<std::vector<T>>(std::move(ivstd));
      tp->record(r, {nx, ng, nb, nm, nv}, [nx, ng, nb, nm, nv, px, pg, pmean, piv, n, c,
                                           hw](TapeT<T>& t, const std::vector<T>& g) {
        for (int ch = 0; ch < c; ++ch) {
          const T mu = (*pmean)[static_cast<size_t>(ch)];
          const T iv = (*piv)[static_cast<size_t>(ch)];
          const T ga = (*pg)[static_cast<size_t>(ch)];
          T sg = T(0), sgx = T(0);
          for (int i = 0; i < n; ++i) {
            const T* xp = px->data() + (static_cast<size_t>(i) * c + ch) * hw;
            const T* gp = g.data() + (static_cast<size_t>(i) * c + ch) * hw;
            T* dp = nx >= 0
                        ? t.grad_buffer(nx).data() + (static_cast<size_t>(i) * c + ch) * hw
                        : nullptr;
            for (size_t j = 0; j < hw; ++j) {
              sg += gp[j];
              sgx += gp[j] * (xp[j] - mu) * iv;
              if (dp) dp[j] += gp[j] * ga * iv;
            }
          }
          if (ng >= 0) t.grad_buffer(ng)[static_cast<size_t>(ch)] += sgx;
          if (nb >= 0) t.grad_buffer(nb)[static_cast<size_t>(ch)] += sg;
          if (nm >= 0) t.grad_buffer(nm)[static_cast<size_t>(ch)] -= ga * iv * sg;
          if (nv >= 0)
            t.grad_buffer(nv)[static_cast<size_t>(ch)] -= T(0.5) * ga * iv * iv * sgx;
        }
      });
    }
  }
  return r;
}

// Row-wise layer normalization of [N, C] with per-feature affine params.
template <typename T>
TensorT<T> layernorm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta, T eps) {
  if (x.rank() != 2) throw ShapeError("layernorm needs a 2-d tensor");
  const int n = x.dim(0), c = x.dim(1);
  if (gamma.rank() != 1 || gamma.dim(0) != c || beta.rank() != 1 || beta.dim(0) != c)
    throw ShapeError("layernorm affine params must be [C]");
  std::vector<T> out(x.numel());
  auto ivstd = std::make_shared<std::vector<T>>(static_cast<size_t>(n));
  auto means = std::make_shared<std::vector<T>>(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const T* row = x.data() + static_cast<size_t>(i) * c;
    T mu = T(0);
    for (int j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<T>(c);
    T var = T(0);
    for (int j = 0; j < c; ++j) {
      const T d = row[j] - mu;
      var += d * d;
    }
    var /= static_cast<T>(c);
    const T iv = T(1) / std::sqrt(var + eps);
    (*means)[static_cast<size_t>(i)] = mu;
    (*ivstd)[static_cast<size_t>(i)] = iv;
    T* orow = out.data() + static_cast<size_t>(i) * c;
    for (int j = 0; j < c; ++j)
      orow[j] = std::fma((row[j] - mu) * iv, gamma.data()[j], beta.data()[j]);
  }
  TensorT<T> r(x.shape(), std::move(out));
  if (auto* tp = TapeT<T>::current()) {
    int nx = tp->node_of(x), ng = tp->node_of(gamma), nb = tp->node_of(beta);
    if (nx >= 0 || ng >= 0 || nb >= 0) {
      auto px = x.data_ptr();
      auto pg = gamma.data_ptr();
      tp->record(r, {nx, ng, nb}, [nx, ng, nb, px, pg, means, ivstd, n,
                                   c](TapeT<T>& t, const std::vector<T>& g) {
        for (int i = 0; i < n; ++i) {
          const T* xp = px->data() + static_cast<size_t>(i) * c;
          const T* gp = g.data() + static_cast<size_t>(i) * c;
          const T mu = (*means)[static_cast<size_t>(i)];
          const T iv = (*ivstd)[static_cast<size_t>(i)];
          T sdh = T(0), sdhx = T(0);
          for (int j = 0; j < c; ++j) {
            const T xh = (xp[j] - mu) * iv;
            const T dh = gp[j] * (*pg)[static_cast<size_t>(j)];
            sdh += dh;
            sdhx += dh * xh;
            if (ng >= 0) t.grad_buffer(ng)[static_cast<size_t>(j)] += gp[j] * xh;
            if (nb >= 0) t.grad_buffer(nb)[static_cast<size_t>(j)] += gp[j];
          }
          if (nx >= 0) {
            auto& dx = t.grad_buffer(nx);
            const T inv_c = T(1) / static_cast<T>(c);
            T* dp = dx.data() + static_cast<size_t>(i) * c;
            for (int j = 0; j < c; ++j) {
              const T xh = (xp[j] - mu) * iv;
              const T dh = gp[j] * (*pg)[static_cast<size_t>(j)];
              dp[j] += iv * (dh - sdh * inv_c - xh * sdhx * inv_c);
            }
          }
        }
      });
    }
  }
  return r;
}

// ---- layers ----

template <typename T>
TensorT<T> init_uniform(Rng& rng, const Shape& shape, int fan_in) {
  const T bound = T(1) / std::sqrt(static_cast<T>(fan_in));
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  TensorT<T> t(shape, std::move(v));
  t.requires_grad();
  return t;
}

template <typename T>
struct Conv2dT {
  TensorT<T> weight;  // [OC, IC, K, K]
  TensorT<T> bias;    // [OC]
  int stride = 1, pad = 2;

  static Conv2dT make(Rng& rng, int in_ch, int out_ch, int k, int pad) {
    Conv2dT l;
    const int fan_in = in_ch * k * k;
    l.weight = init_uniform<T>(rng, {out_ch, in_ch, k, k}, fan_in);
    l.bias = init_uniform<T>(rng, {out_ch}, fan_in);
    l.pad = pad;
    return l;
  }

  TensorT<T> forward(const TensorT<T>& x) const { return conv2d(x, weight, bias, stride, pad); }
};

template <typename T>
struct BatchNorm2dT {
  TensorT<T> gamma, beta;
  std::vector<T> running_mean, running_var;
  T momentum = T(0.1), eps = T(1e-5);

  static BatchNorm2dT make(int c) {
    BatchNorm2dT l;
    l.gamma = TensorT<T>::full({c}, T(1));
    l.gamma.requires_grad();
    l.beta = TensorT<T>::zeros({c});
    l.beta.requires_grad();
    l.running_mean.assign(static_cast<size_t>(c), T(0));
    l.running_var.assign(static_cast<size_t>(c), T(1));
    return l;
  }

  // Batch-statistics forward with no state change.
  TensorT<T> forward_batch(const TensorT<T>& x, BatchStats<T>* capture) const {
    return batchnorm_train(x, gamma, beta, eps, capture);
  }

  void absorb(const BatchStats<T>& s) {
    for (size_t i = 0; i < running_mean.size(); ++i) {
      running_mean[i] = (T(1) - momentum) * running_mean[i] + momentum * s.mean[i];
      running_var[i] = (T(1) - momentum) * running_var[i] + momentum * std::max(s.var[i], eps);
    }
  }

  TensorT<T> forward_train(const TensorT<T>& x, BatchStats<T>* capture, bool update_running) {
    BatchStats<T> s;
    auto y = forward_batch(x, &s);
    if (update_running) absorb(s);
    if (capture) *capture = std::move(s);
    return y;
  }

  TensorT<T> forward_eval(const TensorT<T>& x) const {
    return batchnorm_eval(x, gamma, beta, running_mean, running_var, eps);
  }

  TensorT<T> forward_with(const TensorT<T>& x, const BatchStats<T>& s) const {
    if (s.mean_t && TapeT<T>::current())
      return batchnorm_stats(x, gamma, beta, *s.mean_t, *s.var_t, eps);
    return batchnorm_eval(x, gamma, beta, s.mean, s.var, eps);
  }
};

template <typename T>
struct LinearT {
  TensorT<T> weight;  // [in, out]
  TensorT<T> bias;    // [out]

  static LinearT make(Rng& rng, int in, int out) {
    LinearT l;
    l.weight = init_uniform<T>(rng, {in, out}, in);
    l.bias = init_uniform<T>(rng, {out}, in);
    return l;
  }

  TensorT<T> forward(const TensorT<T>& x) const { return add_rowwise(matmul(x, weight), bias); }
};

template <typename T>
struct LayerNormT {
  TensorT<T> gamma, beta;
  T eps = T(1e-5);

  static LayerNormT make(int c) {
    LayerNormT l;
    l.gamma = TensorT<T>::full({c}, T(1));
    l.gamma.requires_grad();
    l.beta = TensorT<T>::zeros({c});
    l.beta.requires_grad();
    return l;
  }

  TensorT<T> forward(const TensorT<T>& x) const { return layernorm(x, gamma, beta, eps); }
};

// Per-block batch statistics captured during a support pass.
template <typename T>
struct BnSnapshot {
  std::vector<BatchStats<T>> blocks;
};

// Conv -> BN -> ReLU -> 2x2 maxpool, repeated; output flattened to [N, C].
template <typename T>
struct FeatureExtractorT {
  int in_ch = 3, width = 128, blocks_n = 3, input_hw = 16;
  std::vector<Conv2dT<T>> convs;
  std::vector<BatchNorm2dT<T>> bns;

  static FeatureExtractorT make(Rng& rng, int in_ch, int width, int blocks_n, int input_hw,
                                int k = 5, int pad = 2) {
    FeatureExtractorT f;
    f.in_ch = in_ch;
    f.width = width;
    f.blocks_n = blocks_n;
    f.input_hw = input_hw;
    int c = in_ch;
    for (int i = 0; i < blocks_n; ++i) {
      f.convs.push_back(Conv2dT<T>::make(rng, c, width, k, pad));
      f.bns.push_back(BatchNorm2dT<T>::make(width));
      c = width;
    }
    return f;
  }

  // Flattened feature dimension C = width * (hw / 2^blocks)^2.
  int feature_dim() const {
    int hw = input_hw;
    for (int i = 0; i < blocks_n; ++i) hw /= 2;
    return width * hw * hw;
  }

  TensorT<T> flatten(const TensorT<T>& x) const {
    return x.reshaped({x.dim(0), static_cast<int>(x.numel()) / x.dim(0)});
  }

  // Batch-statistics pass that leaves the running buffers untouched.
  TensorT<T> forward_batch(const TensorT<T>& x, BnSnapshot<T>* capture) const {
    if (capture) capture->blocks.resize(static_cast<size_t>(blocks_n));
    TensorT<T> h = x;
    for (int i = 0; i < blocks_n; ++i) {
      h = convs[static_cast<size_t>(i)].forward(h);
      h = bns[static_cast<size_t>(i)].forward_batch(
          h, capture ? &capture->blocks[static_cast<size_t>(i)] : nullptr);
      h = relu(h);
      h = maxpool2x2(h);
    }
    return flatten(h);
  }

  TensorT<T> forward_train(const TensorT<T>& x, BnSnapshot<T>* capture, bool update_running) {
    if (capture) capture->blocks.resize(static_cast<size_t>(blocks_n));
    TensorT<T> h = x;
    for (int i = 0; i < blocks_n; ++i) {
      h = convs[static_cast<size_t>(i)].forward(h);
      h = bns[static_cast<size_t>(i)].forward_train(
          h, capture ? &capture->blocks[static_cast<size_t>(i)] : nullptr, update_running);
      h = relu(h);
      h = maxpool2x2(h);
    }
    return flatten(h);
  }

  TensorT<T> forward_eval(const TensorT<T>& x) const {
    TensorT<T> h = x;
    for (int i = 0; i < blocks_n; ++i) {
      h = convs[static_cast<size_t>(i)].forward(h);
      h = bns[static_cast<size_t>(i)].forward_eval(h);
      h = relu(h);
      h = maxpool2x2(h);
    }
    return flatten(h);
  }

  TensorT<T> forward_with(const TensorT<T>& x, const BnSnapshot<T>& snap) const {
    if (static_cast<int>(snap.blocks.size()) != blocks_n)
      throw ContractError("stats snapshot does not match extractor depth");
    TensorT<T> h = x;
    for (int i = 0; i < blocks_n; ++i) {
      h = convs[static_cast<size_t>(i)].forward(h);
      h = bns[static_cast<size_t>(i)].forward_with(h, snap.blocks[static_cast<size_t>(i)]);
      h = relu(h);
      h = maxpool2x2(h);
    }
    return flatten(h);
  }
};

// Support pass that captures per-block batch statistics without touching the
// running buffers. Also returns the support features under those statistics.
template <typename T>
TensorT<T> snapshot_stats(const FeatureExtractorT<T>& f, const TensorT<T>& support,
                          BnSnapshot<T>* snap) {
  if (support.rank() != 4 || support.dim(0) < 1) throw ContractError("support batch is empty");
  return f.forward_batch(support, snap);
}

// Replaces running statistics with the support batch's statistics.
// Returns an adapted copy; the input extractor is untouched.
template <typename T>
FeatureExtractorT<T> bn_update_stats(const FeatureExtractorT<T>& f, const TensorT<T>& support) {
  if (support.rank() != 4) throw ShapeError("support batch must be [N,C,H,W]");
  if (support.dim(0) < 2) throw ContractError("bn_update_stats needs at least 2 support examples");
  FeatureExtractorT<T> out = f;
  BnSnapshot<T> snap;
  snapshot_stats(out, support, &snap);
  for (int i = 0; i < out.blocks_n; ++i) {
    auto& bn = out.bns[static_cast<size_t>(i)];
    bn.running_mean = snap.blocks[static_cast<size_t>(i)].mean;
    bn.running_var = snap.blocks[static_cast<size_t>(i)].var;
    for (auto& v : bn.running_var) v = std::max(v, bn.eps);
  }
  return out;
}

// Two-layer MLP head: C -> hidden -> classes.
template <typename T>
struct ClassifierT {
  LinearT<T> fc1, fc2;

  static ClassifierT make(Rng& rng, int in, int hidden, int classes) {
    ClassifierT c;
    c.fc1 = LinearT<T>::make(rng, in, hidden);
    c.fc2 = LinearT<T>::make(rng, hidden, classes);
    return c;
  }

  TensorT<T> forward(const TensorT<T>& z) const {
    if (z.rank() != 2 || z.dim(1) != fc1.weight.dim(0))
      throw ShapeError("classifier input " + shape_str(z.shape()) + " expects [N," +
                       std::to_string(fc1.weight.dim(0)) + "]");
    return fc2.forward(relu(fc1.forward(z)));
  }
};

// Conv stack that summarizes support examples into an image-shaped context:
// two conv+BN+ReLU stages at hidden width, then a plain conv back to the
// input channel count.
template <typename T>
struct ContextNetT {
  std::vector<Conv2dT<T>> convs;
  std::vector<BatchNorm2dT<T>> bns;
  int hidden = 64;

  static ContextNetT make(Rng& rng, int in_ch, int hidden, int k = 5, int pad = 2) {
    ContextNetT n;
    n.hidden = hidden;
    n.convs.push_back(Conv2dT<T>::make(rng, in_ch, hidden, k, pad));
    n.bns.push_back(BatchNorm2dT<T>::make(hidden));
    n.convs.push_back(Conv2dT<T>::make(rng, hidden, hidden, k, pad));
    n.bns.push_back(BatchNorm2dT<T>::make(hidden));
    n.convs.push_back(Conv2dT<T>::make(rng, hidden, in_ch, k, pad));
    return n;
  }

  TensorT<T> forward_train(const TensorT<T>& x, bool update_running) {
    TensorT<T> h = convs[0].forward(x);
    h = bns[0].forward_train(h, nullptr, update_running);
    h = relu(h);
    h = convs[1].forward(h);
    h = bns[1].forward_train(h, nullptr, update_running);
    h = relu(h);
    return convs[2].forward(h);
  }

  TensorT<T> forward_eval(const TensorT<T>& x) const {
    TensorT<T> h = convs[0].forward(x);
    h = bns[0].forward_eval(h);
    h = relu(h);
    h = convs[1].forward(h);
    h = bns[1].forward_eval(h);
    h = relu(h);
    return convs[2].forward(h);
  }
};

using Conv2d = Conv2dT<float>;
using BatchNorm2d = BatchNorm2dT<float>;
using Linear = LinearT<float>;
using LayerNorm = LayerNormT<float>;
using FeatureExtractor = FeatureExtractorT<float>;
using Classifier = ClassifierT<float>;
using ContextNet = ContextNetT<float>;

}  // namespace xda
