// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include <json.hpp>

#include "xda/common.hpp"
#include "xda/synth.hpp"

namespace xda {

using json = nlohmann::json;

enum class Method { cxda, cxda_sup, erm, bn, cml, ft_em, ft_im };

inline std::string method_to_string(Method m) {
  switch (m) {
    case Method::cxda: return "cxda";
    case Method::cxda_sup: return "cxda_sup";
    case Method::erm: return "erm";
    case Method::bn: return "bn";
    case Method::cml: return "cml";
    case Method::ft_em: return "ft_em";
    case Method::ft_im: return "ft_im";
  }
  throw ConfigError("unknown method enum");
}

inline Method method_from_string(const std::string& s) {
  if (s == "cxda") return Method::cxda;
  if (s == "cxda_sup") return Method::cxda_sup;
  if (s == "erm") return Method::erm;
  if (s == "bn") return Method::bn;
  if (s == "cml") return Method::cml;
  if (s == "ft_em") return Method::ft_em;
  if (s == "ft_im") return Method::ft_im;
  throw ConfigError("unknown method '" + s + "'");
}

// The training family whose checkpoints a deployment method can consume.
inline Method family_of(Method m) {
  switch (m) {
    case Method::cxda:
    case Method::cxda_sup: return Method::cxda;
    case Method::erm:
    case Method::bn:
    case Method::ft_em:
    case Method::ft_im: return Method::erm;
    case Method::cml: return Method::cml;
  }
  throw ConfigError("unknown method enum");
}

inline bool is_train_method(Method m) {
  return m == Method::cxda || m == Method::erm || m == Method::cml;
}

// Deployment methods that must run without building any autodiff tape.
inline bool is_feed_forward(Method m) { return m != Method::ft_em && m != Method::ft_im; }

struct ModelConfig {
  int hw = 16, channels = 3, classes = 10;
  int width = 128, blocks = 3;
  int clf_hidden = 200;
  int heads = 8, ratio = 2;
  bool shared_ln = false;
  bool scale_by_projected = false;
  int ctx_hidden = 64;
};

struct TrainConfig {
  std::string method = "cxda";  // cxda | erm | cml
  double lr = 1e-2, momentum = 0.9, weight_decay = 1e-4;
  int epochs = 12, steps_per_epoch = 100, eval_every = 2;
  std::string early_stop_metric = "val_accuracy";
  uint64_t seed = 0;
  int n_domains = 5, per_domain = 20, n_query = 20;
  bool augment = true;
};

struct BenchConfig {
  uint64_t seed = 0;
  int num_domains = 60, classes = 10, per_class = 200, hw = 16;
  DomainRanges ranges;
  int val_tasks = 40, test_tasks = 100;
  int n_domains = 5, per_domain = 20, n_query = 20;
};

struct AdaptConfig {
  int ft_steps = 10;
  double ft_lr_scale = 0.1;  // fine-tuning runs at a fraction of the training lr
};

struct RunConfig {
  BenchConfig bench;
  ModelConfig model;
  TrainConfig train;
  AdaptConfig adapt;
  int threads = 1;
};

inline void to_json(json& j, const DomainRanges& r) {
  j = json{{"rot", r.rot},
           {"hue", r.hue},
           {"brightness", r.brightness},
           {"noise", r.noise},
           {"blur", r.blur}};
}
inline void from_json(const json& j, DomainRanges& r) {
  r.rot = j.value("rot", r.rot);
  r.hue = j.value("hue", r.hue);
  r.brightness = j.value("brightness", r.brightness);
  r.noise = j.value("noise", r.noise);
  r.blur = j.value("blur", r.blur);
}

inline void to_json(json& j, const ModelConfig& m) {
  j = json{{"hw", m.hw},
           {"channels", m.channels},
           {"classes", m.classes},
           {"width", m.width},
           {"blocks", m.blocks},
           {"clf_hidden", m.clf_hidden},
           {"heads", m.heads},
           {"ratio", m.ratio},
           {"shared_ln", m.shared_ln},
           {"scale_by_projected", m.scale_by_projected},
           {"ctx_hidden", m.ctx_hidden}};
}
inline void from_json(const json& j, ModelConfig& m) {
  m.hw = j.value("hw", m.hw);
  m.channels = j.value("channels", m.channels);
  m.classes = j.value("classes", m.classes);
  m.width = j.value("width", m.width);
  m.blocks = j.value("blocks", m.blocks);
  m.clf_hidden = j.value("clf_hidden", m.clf_hidden);
  m.heads = j.value("heads", m.heads);
  m.ratio = j.value("ratio", m.ratio);
  m.shared_ln = j.value("shared_ln", m.shared_ln);
  m.scale_by_projected = j.value("scale_by_projected", m.scale_by_projected);
  m.ctx_hidden = j.value("ctx_hidden", m.ctx_hidden);
}

inline void to_json(json& j, const TrainConfig& t) {
  j = json{{"method", t.method},
           {"lr", t.lr},
           {"momentum", t.momentum},
           {"weight_decay", t.weight_decay},
           {"epochs", t.epochs},
           {"steps_per_epoch", t.steps_per_epoch},
           {"eval_every", t.eval_every},
           {"early_stop_metric", t.early_stop_metric},
           {"seed", t.seed},
           {"n_domains", t.n_domains},
           {"per_domain", t.per_domain},
           {"n_query", t.n_query},
           {"augment", t.augment}};
}
inline void from_json(const json& j, TrainConfig& t) {
  t.method = j.value("method", t.method);
  t.lr = j.value("lr", t.lr);
  t.momentum = j.value("momentum", t.momentum);
  t.weight_decay = j.value("weight_decay", t.weight_decay);
  t.epochs = j.value("epochs", t.epochs);
  t.steps_per_epoch = j.value("steps_per_epoch", t.steps_per_epoch);
  t.eval_every = j.value("eval_every", t.eval_every);
  t.early_stop_metric = j.value("early_stop_metric", t.early_stop_metric);
  t.seed = j.value("seed", t.seed);
  t.n_domains = j.value("n_domains", t.n_domains);
  t.per_domain = j.value("per_domain", t.per_domain);
  t.n_query = j.value("n_query", t.n_query);
  t.augment = j.value("augment", t.augment);
}

inline void to_json(json& j, const BenchConfig& b) {
  j = json{{"seed", b.seed},
           {"num_domains", b.num_domains},
           {"classes", b.classes},
           {"per_class", b.per_class},
           {"hw", b.hw},
           {"ranges", b.ranges},
           {"val_tasks", b.val_tasks},
           {"test_tasks", b.test_tasks},
           {"n_domains", b.n_domains},
           {"per_domain", b.per_domain},
           {"n_query", b.n_query}};
}
inline void from_json(const json& j, BenchConfig& b) {
  b.seed = j.value("seed", b.seed);
  b.num_domains = j.value("num_domains", b.num_domains);
  b.classes = j.value("classes", b.classes);
  b.per_class = j.value("per_class", b.per_class);
  b.hw = j.value("hw", b.hw);
  if (j.contains("ranges")) j.at("ranges").get_to(b.ranges);
  b.val_tasks = j.value("val_tasks", b.val_tasks);
  b.test_tasks = j.value("test_tasks", b.test_tasks);
  b.n_domains = j.value("n_domains", b.n_domains);
  b.per_domain = j.value("per_domain", b.per_domain);
  b.n_query = j.value("n_query", b.n_query);
}

inline void to_json(json& j, const AdaptConfig& a) {
  j = json{{"ft_steps", a.ft_steps}, {"ft_lr_scale", a.ft_lr_scale}};
}
inline void from_json(const json& j, AdaptConfig& a) {
  a.ft_steps = j.value("ft_steps", a.ft_steps);
  a.ft_lr_scale = j.value("ft_lr_scale", a.ft_lr_scale);
}

inline void to_json(json& j, const RunConfig& c) {
  j = json{{"bench", c.bench},
           {"model", c.model},
           {"train", c.train},
           {"adapt", c.adapt},
           {"threads", c.threads}};
}
inline void from_json(const json& j, RunConfig& c) {
  if (j.contains("bench")) j.at("bench").get_to(c.bench);
  if (j.contains("model")) j.at("model").get_to(c.model);
  if (j.contains("train")) j.at("train").get_to(c.train);
  if (j.contains("adapt")) j.at("adapt").get_to(c.adapt);
  c.threads = j.value("threads", c.threads);
}

inline void validate(const RunConfig& c) {
  const auto& m = c.model;
  if (m.hw < 8 || m.hw % (1 << m.blocks) != 0)
    throw ConfigError("input size must be divisible by 2^blocks");
  if (m.width < 1 || m.blocks < 1 || m.classes < 2) throw ConfigError("bad model dimensions");
  if (m.ratio < 1 || m.width % m.ratio != 0) throw ConfigError("ratio must divide width");
  const int hw_out = m.hw >> m.blocks;
  const int c_feat = m.width * hw_out * hw_out;
  if ((c_feat / m.ratio) % m.heads != 0)
    throw ConfigError("heads must divide the projected feature dim");
  const auto& t = c.train;
  if (!is_train_method(method_from_string(t.method)))
    throw ConfigError("train method must be cxda, erm or cml");
  if (t.lr <= 0 || t.momentum < 0 || t.momentum >= 1 || t.weight_decay < 0)
    throw ConfigError("bad optimizer settings");
  if (t.epochs < 1 || t.steps_per_epoch < 1 || t.eval_every < 1)
    throw ConfigError("bad schedule settings");
  if (t.early_stop_metric != "val_accuracy" && t.early_stop_metric != "val_worst_decile")
    throw ConfigError("unknown early stop metric '" + t.early_stop_metric + "'");
  if (t.n_domains < 1 || t.per_domain < 1 || t.n_query < 1)
    throw ConfigError("bad episode shape");
  const auto& b = c.bench;
  if (b.num_domains < 6) throw ConfigError("need at least 6 domains");
  if (b.classes != m.classes) throw ConfigError("benchmark and model class counts disagree");
  if (b.hw != m.hw) throw ConfigError("benchmark and model input sizes disagree");
  if (c.adapt.ft_steps < 1 || c.adapt.ft_lr_scale <= 0) throw ConfigError("bad adapt settings");
  if (c.threads < 1) throw ConfigError("threads must be >= 1");
}

}  // namespace xda
