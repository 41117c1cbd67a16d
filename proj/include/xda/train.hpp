// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <limits>
#include <string>
#include <vector>

#include "xda/methods.hpp"
#include "xda/metrics.hpp"
#include "xda/opt.hpp"
#include "xda/synth.hpp"

namespace xda {

// One optimizer step on one episode. Returns the scalar loss.
//
// cxda: the support batch normalizes with differentiable batch statistics
// (updating the running buffers); queries reuse those statistics as
// constants, exactly as at deployment, then take the attention residual.
// erm: plain batch training on the episode's query batch.
// cml: queries are conditioned on the mean support context on the channel
// axis.
template <typename T>
T train_step(ModelT<T>& model, const Episode& ep, [[maybe_unused]] const TrainConfig& cfg,
             SgdT<T>& opt) {
  TapeT<T> tape;
  TensorT<T> loss;
  switch (model.family) {
    case Method::cxda: {
      auto support_x = ep.support_tensor<T>();
      auto query_x = ep.query_tensor<T>();
      BnSnapshot<T> snap;
      auto sfeat = model.extractor.forward_train(support_x, &snap, /*update_running=*/true);
      auto qfeat = model.extractor.forward_with(query_x, snap);
      auto delta = cross_attend(*model.attn, sfeat, qfeat);
      auto logits = model.classifier.forward(add(qfeat, delta));
      loss = cross_entropy(logits, ep.query_y);
      break;
    }
    case Method::erm: {
      auto query_x = ep.query_tensor<T>();
      auto feat = model.extractor.forward_train(query_x, nullptr, /*update_running=*/true);
      loss = cross_entropy(model.classifier.forward(feat), ep.query_y);
      break;
    }
    case Method::cml: {
      auto support_x = ep.support_tensor<T>();
      auto query_x = ep.query_tensor<T>();
      auto ctx_out = model.ctx->forward_train(support_x, /*update_running=*/true);
      auto qin = cml_query_input(ctx_out, query_x);
      auto feat = model.extractor.forward_train(qin, nullptr, /*update_running=*/true);
      loss = cross_entropy(model.classifier.forward(feat), ep.query_y);
      break;
    }
    default:
      throw ContractError("train_step supports cxda, erm and cml");
  }
  const T value = loss.item();
  if (!std::isfinite(value)) throw NumericError("training loss diverged");
  tape.backward(loss);
  opt.step(model);
  return value;
}

struct ValScore {
  double avg = 0.0, w10 = 0.0;
};

// Mean accuracy and worst decile of the family's deployment method over a
// suite. The decile is NaN when the suite is too small to define one.
inline ValScore validate_model(const ModelT<float>& model, const EvalSuite& suite) {
  std::vector<double> accs;
  accs.reserve(suite.tasks.size());
  for (const auto& task : suite.tasks) {
    auto res = run_task(model.family, model, task.episode, AdaptSettings{}, task.task_id);
    accs.push_back(accuracy_percent(res.logits, task.episode.query_y));
  }
  return {mean_of(accs), accs.size() >= 10 ? worst_decile(accs)
                                           : std::numeric_limits<double>::quiet_NaN()};
}

struct TrainResult {
  ModelT<float> best_model;
  double best_metric = -1.0;
  int best_epoch = -1;
  std::string log_csv;
};

// Episodic training with periodic validation; keeps the checkpoint that
// scored best on the early-stop metric. The log has one row per step plus
// one per validation pass, formatted identically across reruns.
inline TrainResult train(const RunConfig& cfg, const Benchmark& bench, const EvalSuite& val_suite,
                         const std::function<void(const std::string&)>& on_log = nullptr) {
  validate(cfg);
  const Method family = method_from_string(cfg.train.method);
  ModelT<float> model = build_model<float>(cfg.model, family, cfg.train.seed);
  SgdT<float> opt(static_cast<float>(cfg.train.lr), static_cast<float>(cfg.train.momentum),
                  static_cast<float>(cfg.train.weight_decay));
  Rng sampler(mix_seed(cfg.train.seed ^ 0xE4150DE5ull));
  const bool by_w10 = cfg.train.early_stop_metric == "val_worst_decile";
  if (by_w10 && val_suite.tasks.size() < 10)
    throw ConfigError("worst-decile early stopping needs at least 10 validation tasks");

  TrainResult out;
  out.log_csv = "step,epoch,loss,val_avg,val_w10\n";
  auto emit = [&](const std::string& row) {
    out.log_csv += row;
    if (on_log) on_log(row);
  };

  int step = 0;
  auto run_validation = [&](int epoch) {
    const ValScore v = validate_model(model, val_suite);
    emit(std::to_string(step) + "," + std::to_string(epoch) + ",," + fmt_g(v.avg) + "," +
         fmt_g(v.w10) + "\n");
    const double metric = by_w10 ? v.w10 : v.avg;
    if (metric > out.best_metric) {
      out.best_metric = metric;
      out.best_epoch = epoch;
      out.best_model = clone_model(model);
    }
  };

  run_validation(0);
  for (int epoch = 1; epoch <= cfg.train.epochs; ++epoch) {
    for (int s = 0; s < cfg.train.steps_per_epoch; ++s) {
      Episode ep = sample_episode(bench, bench.train_domains, sampler, cfg.train.n_domains,
                                  cfg.train.per_domain, cfg.train.n_query, cfg.train.augment);
      const float loss = train_step(model, ep, cfg.train, opt);
      ++step;
      emit(std::to_string(step) + "," + std::to_string(epoch) + "," + fmt_g(loss) + ",,\n");
    }
    if (epoch % cfg.train.eval_every == 0 || epoch == cfg.train.epochs) run_validation(epoch);
  }
  return out;
}

}  // namespace xda
