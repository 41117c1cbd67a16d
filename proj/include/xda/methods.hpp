// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cmath>
#include <vector>

#include "xda/model.hpp"
#include "xda/opt.hpp"
#include "xda/synth.hpp"

namespace xda {

// Mean per-example prediction entropy (natural log) of softmax(logits).
// Fused so that rows with underflowed probabilities stay well-defined
// (0 * log 0 counts as 0).
template <typename T>
TensorT<T> ft_em_loss(const TensorT<T>& logits) {
  if (logits.rank() != 2) throw ShapeError("ft_em_loss needs [N,K] logits");
  const int n = logits.dim(0), k = logits.dim(1);
  std::vector<T> probs(logits.numel());
  std::vector<T> row_ent(static_cast<size_t>(n));
  T loss = T(0);
  for (int i = 0; i < n; ++i) {
    const T* row = logits.data() + static_cast<size_t>(i) * k;
    T* p = probs.data() + static_cast<size_t>(i) * k;
    T mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    T denom = T(0);
    for (int j = 0; j < k; ++j) {
      p[j] = std::exp(row[j] - mx);
      denom += p[j];
    }
    const T inv = T(1) / denom;
    T h = T(0);
    for (int j = 0; j < k; ++j) {
      p[j] *= inv;
      if (p[j] > T(0)) h -= p[j] * std::log(p[j]);
    }
    row_ent[static_cast<size_t>(i)] = h;
    loss += h;
  }
  loss /= static_cast<T>(n);
  TensorT<T> r = TensorT<T>::scalar(loss);
  if (auto* tp = TapeT<T>::current()) {
    int nl = tp->node_of(logits);
    if (nl >= 0) {
      auto pp = std::make_shared<std::vector<T>>(std::move(probs));
      auto ph = std::make_shared<std::vector<T>>(std::move(row_ent));
      tp->record(r, {nl}, [nl, pp, ph, n, k](TapeT<T>& t, const std::vector<T>& g) {
        auto& dl = t.grad_buffer(nl);
        const T scale = g[0] / static_cast<T>(n);
        for (int i = 0; i < n; ++i) {
          const T* p = pp->data() + static_cast<size_t>(i) * k;
          const T h = (*ph)[static_cast<size_t>(i)];
          T* d = dl.data() + static_cast<size_t>(i) * k;
          for (int j = 0; j < k; ++j)
            if (p[j] > T(0)) d[j] += scale * (-p[j] * (std::log(p[j]) + h));
        }
      });
    }
  }
  return r;
}

// Information-maximization objective: mean conditional entropy minus the
// entropy of the mean prediction. Needs at least two examples.
template <typename T>
TensorT<T> ft_im_loss(const TensorT<T>& logits) {
  if (logits.rank() != 2) throw ShapeError("ft_im_loss needs [N,K] logits");
  const int n = logits.dim(0), k = logits.dim(1);
  if (n < 2) throw ContractError("ft_im_loss needs at least 2 examples");
  std::vector<T> probs(logits.numel());
  std::vector<T> row_ent(static_cast<size_t>(n));
  std::vector<T> pbar(static_cast<size_t>(k), T(0));
  T cond = T(0);
  for (int i = 0; i < n; ++i) {
    const T* row = logits.data() + static_cast<size_t>(i) * k;
    T* p = probs.data() + static_cast<size_t>(i) * k;
    T mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    T denom = T(0);
    for (int j = 0; j < k; ++j) {
      p[j] = std::exp(row[j] - mx);
      denom += p[j];
    }
    const T inv = T(1) / denom;
    T h = T(0);
    for (int j = 0; j < k; ++j) {
      p[j] *= inv;
      pbar[static_cast<size_t>(j)] += p[j];
      if (p[j] > T(0)) h -= p[j] * std::log(p[j]);
    }
    row_ent[static_cast<size_t>(i)] = h;
    cond += h;
  }
  cond /= static_cast<T>(n);
  T marg = T(0);
  std::vector<T> log_pbar(static_cast<size_t>(k), T(0));
  for (int j = 0; j < k; ++j) {
    pbar[static_cast<size_t>(j)] /= static_cast<T>(n);
    if (pbar[static_cast<size_t>(j)] > T(0)) {
      log_pbar[static_cast<size_t>(j)] = std::log(pbar[static_cast<size_t>(j)]);
      marg -= pbar[static_cast<size_t>(j)] * log_pbar[static_cast<size_t>(j)];
    }
  }
  TensorT<T> r = TensorT<T>::scalar(cond - marg);
  if (auto* tp = TapeT<T>::current()) {
    int nl = tp->node_of(logits);
    if (nl >= 0) {
      auto pp = std::make_shared<std::vector<T>>(std::move(probs));
      auto ph = std::make_shared<std::vector<T>>(std::move(row_ent));
      auto plb = std::make_shared<std::vector<T>>(std::move(log_pbar));
      tp->record(r, {nl}, [nl, pp, ph, plb, n, k](TapeT<T>& t, const std::vector<T>& g) {
        auto& dl = t.grad_buffer(nl);
        const T scale = g[0] / static_cast<T>(n);
        for (int i = 0; i < n; ++i) {
          const T* p = pp->data() + static_cast<size_t>(i) * k;
          const T h = (*ph)[static_cast<size_t>(i)];
          T dot = T(0);
          for (int j = 0; j < k; ++j)
            if (p[j] > T(0)) dot += p[j] * (*plb)[static_cast<size_t>(j)];
          T* d = dl.data() + static_cast<size_t>(i) * k;
          for (int j = 0; j < k; ++j) {
            if (p[j] <= T(0)) continue;
            const T d_cond = -p[j] * (std::log(p[j]) + h);
            const T d_marg = p[j] * (dot - (*plb)[static_cast<size_t>(j)]);
            d[j] += scale * (d_cond - d_marg);
          }
        }
      });
    }
  }
  return r;
}

struct AdaptSettings {
  int ft_steps = 10;
  double ft_lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

struct TaskResult {
  TensorT<float> logits;
  AttentionRecord record;
  bool has_record = false;
  double ms = 0.0;
};

// CML inference input: queries with the mean support context stacked on the
// channel axis.
template <typename T>
TensorT<T> cml_query_input(const TensorT<T>& ctx_out, const TensorT<T>& query_x) {
  auto ctx_mean = mean_axis0(ctx_out);
  auto tiled = repeat_axis0(ctx_mean, query_x.dim(0));
  return concat(std::vector<TensorT<T>>{query_x, tiled}, 1);
}

// Runs one adaptation method on one task. The model is shared, read-only
// state; fine-tuning methods clone it first. Elapsed time covers adaptation
// plus query scoring.
inline TaskResult run_task(Method method, const ModelT<float>& model, const Episode& ep,
                           const AdaptSettings& st = AdaptSettings{}, uint64_t task_id = 0) {
  if (family_of(method) != model.family)
    throw CheckpointError("method " + method_to_string(method) + " cannot run on a " +
                          method_to_string(model.family) + " checkpoint");
  auto support_x = ep.support_tensor<float>();
  auto query_x = ep.query_tensor<float>();
  TaskResult res;
  const auto t0 = std::chrono::steady_clock::now();
  switch (method) {
    case Method::cxda: {
      res.logits = adapt_and_predict(model, support_x, query_x, &res.record);
      res.record.task_id = task_id;
      res.record.same_domain = ep.same_domain_flags();
      res.has_record = true;
      break;
    }
    case Method::cxda_sup: {
      BnSnapshot<float> snap;
      auto sfeat = model.extractor.forward_batch(support_x, &snap);
      auto qfeat = model.extractor.forward_with(query_x, snap);
      auto delta =
          supervised_cross_attend(*model.attn, sfeat, qfeat, ep.same_domain_flags(), &res.record);
      res.record.task_id = task_id;
      res.has_record = true;
      res.logits = model.classifier.forward(add(qfeat, delta));
      break;
    }
    case Method::erm: {
      res.logits = predict_eval(model, query_x);
      break;
    }
    case Method::bn: {
      auto adapted = bn_update_stats(model.extractor, support_x);
      res.logits = model.classifier.forward(adapted.forward_eval(query_x));
      break;
    }
    case Method::cml: {
      if (!model.ctx) throw ContractError("cml needs a context network");
      auto ctx_out = model.ctx->forward_eval(support_x);
      res.logits = model.classifier.forward(
          model.extractor.forward_eval(cml_query_input(ctx_out, query_x)));
      break;
    }
    case Method::ft_em:
    case Method::ft_im: {
      auto local = clone_model(model);
      SgdT<float> opt(static_cast<float>(st.ft_lr), static_cast<float>(st.momentum),
                      static_cast<float>(st.weight_decay));
      for (int step = 0; step < st.ft_steps; ++step) {
        TapeT<float> tape;
        auto logits_s = local.classifier.forward(local.extractor.forward_eval(support_x));
        auto loss = method == Method::ft_em ? ft_em_loss(logits_s) : ft_im_loss(logits_s);
        if (!std::isfinite(loss.item())) throw NumericError("fine-tuning loss diverged");
        tape.backward(loss);
        opt.step(local);
      }
      res.logits = predict_eval(local, query_x);
      break;
    }
  }
  const auto t1 = std::chrono::steady_clock::now();
  res.ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
  return res;
}

}  // namespace xda
