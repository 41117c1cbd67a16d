// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <optional>
#include <string>

#include "xda/attention.hpp"
#include "xda/config.hpp"
#include "xda/nn.hpp"

namespace xda {

// Feature extractor + classifier, plus the per-family extras: the
// cross-attention block (cxda) or the context network (cml).
template <typename T>
struct ModelT {
  ModelConfig cfg;
  Method family = Method::erm;
  FeatureExtractorT<T> extractor;
  ClassifierT<T> classifier;
  std::optional<CrossAttentionT<T>> attn;
  std::optional<ContextNetT<T>> ctx;

  int feature_dim() const { return extractor.feature_dim(); }
};

template <typename T>
ModelT<T> build_model(const ModelConfig& cfg, Method family, uint64_t seed) {
  if (!is_train_method(family)) family = family_of(family);
  ModelT<T> m;
  m.cfg = cfg;
  m.family = family;
  Rng rng(mix_seed(seed ^ 0x10DE1ull));
  const int in_ch = family == Method::cml ? 2 * cfg.channels : cfg.channels;
  m.extractor = FeatureExtractorT<T>::make(rng, in_ch, cfg.width, cfg.blocks, cfg.hw);
  const int c = m.extractor.feature_dim();
  m.classifier = ClassifierT<T>::make(rng, c, cfg.clf_hidden, cfg.classes);
  if (family == Method::cxda) {
    m.attn = CrossAttentionT<T>::make(rng, c, cfg.heads, cfg.ratio);
    m.attn->shared_ln = cfg.shared_ln;
    m.attn->scale_by_projected = cfg.scale_by_projected;
  }
  if (family == Method::cml) m.ctx = ContextNetT<T>::make(rng, cfg.channels, cfg.ctx_hidden);
  return m;
}

// Fixed-order traversal; names are stable and used by the checkpoint format.
template <typename T, typename F>
void visit_trainable(ModelT<T>& m, F&& fn) {
  for (int i = 0; i < m.extractor.blocks_n; ++i) {
    const std::string p = "extractor.block" + std::to_string(i);
    fn(p + ".conv.weight", m.extractor.convs[static_cast<size_t>(i)].weight);
    fn(p + ".conv.bias", m.extractor.convs[static_cast<size_t>(i)].bias);
    fn(p + ".bn.gamma", m.extractor.bns[static_cast<size_t>(i)].gamma);
    fn(p + ".bn.beta", m.extractor.bns[static_cast<size_t>(i)].beta);
  }
  fn("classifier.fc1.weight", m.classifier.fc1.weight);
  fn("classifier.fc1.bias", m.classifier.fc1.bias);
  fn("classifier.fc2.weight", m.classifier.fc2.weight);
  fn("classifier.fc2.bias", m.classifier.fc2.bias);
  if (m.attn) {
    fn("attn.wq", m.attn->wq);
    fn("attn.wk", m.attn->wk);
    fn("attn.wv", m.attn->wv);
    fn("attn.wo", m.attn->wo);
    fn("attn.ln_support.gamma", m.attn->ln_support.gamma);
    fn("attn.ln_support.beta", m.attn->ln_support.beta);
    fn("attn.ln_query.gamma", m.attn->ln_query.gamma);
    fn("attn.ln_query.beta", m.attn->ln_query.beta);
  }
  if (m.ctx) {
    for (size_t i = 0; i < m.ctx->convs.size(); ++i) {
      const std::string p = "ctx.conv" + std::to_string(i);
      fn(p + ".weight", m.ctx->convs[i].weight);
      fn(p + ".bias", m.ctx->convs[i].bias);
    }
    for (size_t i = 0; i < m.ctx->bns.size(); ++i) {
      const std::string p = "ctx.bn" + std::to_string(i);
      fn(p + ".gamma", m.ctx->bns[i].gamma);
      fn(p + ".beta", m.ctx->bns[i].beta);
    }
  }
}

template <typename T, typename F>
void visit_buffers(ModelT<T>& m, F&& fn) {
  for (int i = 0; i < m.extractor.blocks_n; ++i) {
    const std::string p = "extractor.block" + std::to_string(i) + ".bn";
    fn(p + ".running_mean", m.extractor.bns[static_cast<size_t>(i)].running_mean);
    fn(p + ".running_var", m.extractor.bns[static_cast<size_t>(i)].running_var);
  }
  if (m.ctx) {
    for (size_t i = 0; i < m.ctx->bns.size(); ++i) {
      const std::string p = "ctx.bn" + std::to_string(i);
      fn(p + ".running_mean", m.ctx->bns[i].running_mean);
      fn(p + ".running_var", m.ctx->bns[i].running_var);
    }
  }
}

template <typename T>
ModelT<T> clone_model(const ModelT<T>& m) {
  ModelT<T> out = m;
  visit_trainable(out, [](const std::string&, TensorT<T>& t) { t = t.clone(); });
  return out;
}

// Feed-forward adaptation: support batch statistics normalize both branches,
// queries take an attention residual over the support features, and the
// classifier scores the sum. No state is modified and no tape is required.
template <typename T>
TensorT<T> adapt_and_predict(const ModelT<T>& m, const TensorT<T>& support_x,
                             const TensorT<T>& query_x, AttentionRecord* rec = nullptr) {
  if (!m.attn) throw ContractError("adapt_and_predict needs a cross-attention model");
  if (support_x.rank() != 4 || support_x.dim(0) < 1)
    throw ContractError("adapt_and_predict: empty support batch");
  if (query_x.rank() != 4 || query_x.dim(0) < 1)
    throw ContractError("adapt_and_predict: empty query batch");
  BnSnapshot<T> snap;
  auto sfeat = m.extractor.forward_batch(support_x, &snap);
  auto qfeat = m.extractor.forward_with(query_x, snap);
  auto delta = cross_attend(*m.attn, sfeat, qfeat, rec);
  return m.classifier.forward(add(qfeat, delta));
}

// Plain eval-mode prediction through running statistics.
template <typename T>
TensorT<T> predict_eval(const ModelT<T>& m, const TensorT<T>& x) {
  return m.classifier.forward(m.extractor.forward_eval(x));
}

using Model = ModelT<float>;

}  // namespace xda
