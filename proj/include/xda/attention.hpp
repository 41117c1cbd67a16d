// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "xda/nn.hpp"
#include "xda/tensor.hpp"

namespace xda {

// Raw per-head attention weights for one task: [heads][n_query][n_support].
// same_domain flags each support example against the task's query domain and
// is attached by whoever knows the episode metadata.
struct AttentionRecord {
  uint64_t task_id = 0;
  int heads = 0, n_query = 0, n_support = 0;
  std::vector<double> weights;
  std::vector<uint8_t> same_domain;

  double at(int head, int qi, int si) const {
    return weights[(static_cast<size_t>(head) * n_query + qi) * n_support + si];
  }
};

// Multi-head cross attention from query features onto support features.
// Projections map C -> C/ratio; outputs map back to C.
template <typename T>
struct CrossAttentionT {
  TensorT<T> wq, wk, wv;  // [C, C/ratio]
  TensorT<T> wo;          // [C/ratio, C]
  LayerNormT<T> ln_support, ln_query;
  int heads = 8, ratio = 2;
  // When set, keys/queries/values all normalize through ln_support.
  bool shared_ln = false;
  // Scores scale by 1/sqrt(C/heads) by default; this switches the scale to
  // the per-head projected width 1/sqrt((C/ratio)/heads).
  bool scale_by_projected = false;

  static CrossAttentionT make(Rng& rng, int c, int heads, int ratio) {
    if (c % ratio != 0) throw ConfigError("attention ratio must divide feature dim");
    const int p = c / ratio;
    if (p % heads != 0) throw ConfigError("attention heads must divide projected dim");
    CrossAttentionT a;
    a.heads = heads;
    a.ratio = ratio;
    a.wq = init_uniform<T>(rng, {c, p}, c);
    a.wk = init_uniform<T>(rng, {c, p}, c);
    a.wv = init_uniform<T>(rng, {c, p}, c);
    a.wo = init_uniform<T>(rng, {p, c}, p);
    a.ln_support = LayerNormT<T>::make(c);
    a.ln_query = LayerNormT<T>::make(c);
    return a;
  }
};

// Attention residual for the query features, attending over the support set.
// support [Ns, C], query [Nq, C] -> delta [Nq, C].
template <typename T>
TensorT<T> cross_attend(const CrossAttentionT<T>& attn, const TensorT<T>& support,
                        const TensorT<T>& query, AttentionRecord* rec = nullptr) {
  if (support.rank() != 2 || query.rank() != 2)
    throw ShapeError("cross_attend needs 2-d feature matrices");
  const int ns = support.dim(0), nq = query.dim(0), c = support.dim(1);
  if (ns < 1) throw ContractError("cross_attend: empty support set");
  if (query.dim(1) != c || attn.wq.dim(0) != c)
    throw ShapeError("cross_attend feature dims disagree");
  const int p = attn.wq.dim(1);
  const int hd = p / attn.heads;

  auto sn = attn.ln_support.forward(support);
  auto qn = attn.shared_ln ? attn.ln_support.forward(query) : attn.ln_query.forward(query);
  auto q = matmul(qn, attn.wq);
  auto k = matmul(sn, attn.wk);
  auto v = matmul(sn, attn.wv);

  const T scale =
      T(1) / std::sqrt(static_cast<T>(attn.scale_by_projected ? p : c) / static_cast<T>(attn.heads));

  if (rec) {
    rec->heads = attn.heads;
    rec->n_query = nq;
    rec->n_support = ns;
    rec->weights.assign(static_cast<size_t>(attn.heads) * nq * ns, 0.0);
  }

  std::vector<TensorT<T>> outs;
  outs.reserve(static_cast<size_t>(attn.heads));
  for (int h = 0; h < attn.heads; ++h) {
    auto qh = narrow(q, 1, h * hd, hd);
    auto kh = narrow(k, 1, h * hd, hd);
    auto vh = narrow(v, 1, h * hd, hd);
    auto scores = scalar_mul(matmul(qh, transpose(kh)), scale);
    auto a = softmax_rows(scores);
    if (rec) {
      const T* ap = a.data();
      double* dst = rec->weights.data() + static_cast<size_t>(h) * nq * ns;
      for (size_t i = 0; i < static_cast<size_t>(nq) * ns; ++i) dst[i] = static_cast<double>(ap[i]);
    }
    outs.push_back(matmul(a, vh));
  }
  auto o = concat(outs, 1);
  return matmul(o, attn.wo);
}

// Oracle variant: attention is pinned to a uniform distribution over the
// same-domain support examples; value/output projections still apply.
template <typename T>
TensorT<T> supervised_cross_attend(const CrossAttentionT<T>& attn, const TensorT<T>& support,
                                   const TensorT<T>& query, const std::vector<uint8_t>& same_domain,
                                   AttentionRecord* rec = nullptr) {
  if (support.rank() != 2 || query.rank() != 2)
    throw ShapeError("supervised_cross_attend needs 2-d feature matrices");
  const int ns = support.dim(0), nq = query.dim(0);
  if (static_cast<int>(same_domain.size()) != ns)
    throw ContractError("same_domain flags must cover the support set");
  int m = 0;
  for (uint8_t f : same_domain) m += f ? 1 : 0;
  if (m == 0) throw ContractError("supervised attention needs a same-domain support example");

  std::vector<T> arow(static_cast<size_t>(ns), T(0));
  for (int s = 0; s < ns; ++s)
    if (same_domain[static_cast<size_t>(s)]) arow[static_cast<size_t>(s)] = T(1) / static_cast<T>(m);
  std::vector<T> adata(static_cast<size_t>(nq) * ns);
  for (int i = 0; i < nq; ++i)
    std::copy(arow.begin(), arow.end(), adata.begin() + static_cast<size_t>(i) * ns);
  TensorT<T> a(Shape{nq, ns}, std::move(adata));

  auto sn = attn.ln_support.forward(support);
  auto v = matmul(sn, attn.wv);
  const int p = attn.wq.dim(1);
  const int hd = p / attn.heads;

  if (rec) {
    rec->heads = attn.heads;
    rec->n_query = nq;
    rec->n_support = ns;
    rec->weights.assign(static_cast<size_t>(attn.heads) * nq * ns, 0.0);
    for (int h = 0; h < attn.heads; ++h) {
      double* dst = rec->weights.data() + static_cast<size_t>(h) * nq * ns;
      for (int i = 0; i < nq; ++i)
        for (int s = 0; s < ns; ++s)
          dst[static_cast<size_t>(i) * ns + s] = static_cast<double>(arow[static_cast<size_t>(s)]);
    }
    rec->same_domain = same_domain;
  }

  std::vector<TensorT<T>> outs;
  outs.reserve(static_cast<size_t>(attn.heads));
  for (int h = 0; h < attn.heads; ++h) outs.push_back(matmul(a, narrow(v, 1, h * hd, hd)));
  auto o = concat(outs, 1);
  return matmul(o, attn.wo);
}

using CrossAttention = CrossAttentionT<float>;

}  // namespace xda
