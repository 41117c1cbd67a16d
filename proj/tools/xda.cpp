// SPDX-License-Identifier: Apache-2.0
// Command-line entry point: generate benchmarks, meta-train, evaluate
// adaptation methods, time them, sweep ablations and dump attention maps.
//
// Exit codes: 0 ok, 2 missing input files, 3 checkpoint/config mismatch,
// 4 numeric failure, 1 anything else.

#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "xda/xda.hpp"

namespace {

using namespace xda;

struct MissingInput : XdaError {
  explicit MissingInput(const std::string& msg) : XdaError(msg) {}
};

uint64_t env_seed() {
  if (const char* s = std::getenv("XDA_SEED")) return std::strtoull(s, nullptr, 10);
  return 0;
}

RunConfig load_config_file(const std::string& path) {
  RunConfig cfg;
  if (path.empty()) return cfg;
  if (!fs::exists(path)) throw MissingInput("config file '" + path + "' does not exist");
  try {
    json::parse(read_file(path)).get_to(cfg);
  } catch (const json::exception& e) {
    throw ConfigError("cannot parse '" + path + "': " + e.what());
  }
  return cfg;
}

LoadedBench load_bench_checked(const std::string& dir) {
  if (!fs::exists(fs::path(dir) / "bench.json"))
    throw MissingInput("benchmark directory '" + dir + "' does not exist or has no bench.json");
  verify_manifest(dir);
  return load_benchmark(dir);
}

Checkpoint load_ckpt_checked(const std::string& path) {
  if (!fs::exists(path)) throw MissingInput("checkpoint '" + path + "' does not exist");
  return load_checkpoint(path);
}

void write_config_snapshot(const fs::path& out_dir, const RunConfig& cfg,
                           const std::string& command, const json& extras = json::object()) {
  json j = cfg;
  j["command"] = command;
  for (const auto& [k, v] : extras.items()) j[k] = v;
  write_file(out_dir / "config.json", j.dump(2) + "\n");
}

AdaptSettings adapt_settings(const RunConfig& cfg) {
  AdaptSettings st;
  st.ft_steps = cfg.adapt.ft_steps;
  st.ft_lr = cfg.train.lr * cfg.adapt.ft_lr_scale;
  st.momentum = cfg.train.momentum;
  st.weight_decay = cfg.train.weight_decay;
  return st;
}

EvalSuite pick_suite(const std::string& bench_dir, const std::string& which, int limit) {
  if (which != "val" && which != "test") throw ConfigError("suite must be val or test");
  EvalSuite s = load_suite(fs::path(bench_dir) / which);
  if (limit > 0 && static_cast<size_t>(limit) < s.tasks.size()) s.tasks.resize(static_cast<size_t>(limit));
  return s;
}

std::vector<int> parse_int_list(const std::string& csv) {
  std::vector<int> out;
  size_t pos = 0;
  while (pos < csv.size()) {
    size_t next = csv.find(',', pos);
    if (next == std::string::npos) next = csv.size();
    out.push_back(std::stoi(csv.substr(pos, next - pos)));
    pos = next + 1;
  }
  if (out.empty()) throw ConfigError("empty value list");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cross-domain adaptation workbench"};
  app.require_subcommand(1);

  std::string config_path, bench_dir, out_dir = "out", ckpt_path, method_str = "auto";
  std::string suite_name = "test", axis = "domains", values_csv;
  std::vector<std::string> ckpt_paths;
  std::string methods_csv;
  uint64_t seed = env_seed();
  bool seed_given = false, force = false;
  int threads = 1, tasks = 0, budget = 100, fixed_domains = 5, n_query = 20;

  auto add_common = [&](CLI::App* cmd, bool with_out = true) {
    cmd->add_option("--config", config_path, "JSON config file");
    cmd->add_option("--seed", seed, "seed (default: XDA_SEED env or 0)")
        ->each([&](const std::string&) { seed_given = true; });
    cmd->add_option("--threads", threads, "worker threads for task-parallel scoring");
    if (with_out) cmd->add_option("--out", out_dir, "output directory");
  };

  auto* gen = app.add_subcommand("gen", "generate a benchmark directory");
  add_common(gen);
  gen->add_flag("--force", force, "overwrite an existing benchmark directory");
  int g_domains = -1, g_classes = -1, g_per_class = -1, g_val_tasks = -1, g_test_tasks = -1;
  gen->add_option("--num-domains", g_domains, "total latent domains");
  gen->add_option("--classes", g_classes, "glyph classes");
  gen->add_option("--per-class", g_per_class, "base samples per class");
  gen->add_option("--val-tasks", g_val_tasks, "validation suite size");
  gen->add_option("--test-tasks", g_test_tasks, "test suite size");

  auto* train_cmd = app.add_subcommand("train", "meta-train on a benchmark");
  add_common(train_cmd);
  train_cmd->add_option("--bench", bench_dir, "benchmark directory")->required();
  std::string t_method;
  int t_epochs = -1, t_steps = -1;
  double t_lr = -1;
  train_cmd->add_option("--method", t_method, "cxda | erm | cml");
  train_cmd->add_option("--epochs", t_epochs, "training epochs");
  train_cmd->add_option("--steps", t_steps, "steps per epoch");
  train_cmd->add_option("--lr", t_lr, "learning rate");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a suite");
  add_common(eval_cmd);
  eval_cmd->add_option("--bench", bench_dir, "benchmark directory")->required();
  eval_cmd->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  eval_cmd->add_option("--method", method_str, "adaptation method (default: checkpoint family)");
  eval_cmd->add_option("--suite", suite_name, "val | test");
  eval_cmd->add_option("--tasks", tasks, "limit the number of tasks");

  auto* bench_cmd = app.add_subcommand("bench", "time adaptation methods per task");
  add_common(bench_cmd);
  bench_cmd->add_option("--bench", bench_dir, "benchmark directory")->required();
  bench_cmd->add_option("--ckpt", ckpt_paths, "checkpoint files (one per training family)")
      ->required();
  bench_cmd->add_option("--methods", methods_csv, "comma list (default: all compatible)");
  bench_cmd->add_option("--suite", suite_name, "val | test");
  bench_cmd->add_option("--tasks", tasks, "tasks to time (default 30)");

  auto* ablate_cmd = app.add_subcommand("ablate", "sweep support composition at deployment");
  add_common(ablate_cmd);
  ablate_cmd->add_option("--bench", bench_dir, "benchmark directory")->required();
  ablate_cmd->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  ablate_cmd->add_option("--method", method_str, "adaptation method (default: checkpoint family)");
  ablate_cmd->add_option("--axis", axis, "domains | size");
  ablate_cmd->add_option("--values", values_csv, "comma list of axis values");
  ablate_cmd->add_option("--budget", budget, "support budget for the domains axis");
  ablate_cmd->add_option("--fixed-domains", fixed_domains, "domain count for the size axis");
  ablate_cmd->add_option("--tasks", tasks, "tasks per cell (default 30)");
  ablate_cmd->add_option("--n-query", n_query, "queries per task");

  auto* attn_cmd = app.add_subcommand("attn", "dump attention weights and histograms");
  add_common(attn_cmd);
  attn_cmd->add_option("--bench", bench_dir, "benchmark directory")->required();
  attn_cmd->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  attn_cmd->add_option("--suite", suite_name, "val | test");
  attn_cmd->add_option("--tasks", tasks, "tasks to record (default 20)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (gen->parsed()) {
      RunConfig cfg = load_config_file(config_path);
      if (seed_given || !config_path.size()) cfg.bench.seed = seed;
      if (g_domains > 0) cfg.bench.num_domains = g_domains;
      if (g_classes > 0) { cfg.bench.classes = g_classes; cfg.model.classes = g_classes; }
      if (g_per_class > 0) cfg.bench.per_class = g_per_class;
      if (g_val_tasks > 0) cfg.bench.val_tasks = g_val_tasks;
      if (g_test_tasks > 0) cfg.bench.test_tasks = g_test_tasks;
      cfg.threads = threads;
      validate(cfg);
      if (fs::exists(fs::path(out_dir) / "bench.json") && !force)
        throw ConfigError("'" + out_dir + "' already holds a benchmark (use --force)");
      const auto& bc = cfg.bench;
      Benchmark b = make_benchmark(bc.seed, bc.num_domains, bc.classes, bc.per_class, bc.hw,
                                   bc.ranges);
      EvalSuite val = make_eval_suite(b, b.val_domains, "val", bc.seed, bc.val_tasks, bc.n_domains,
                                      bc.per_domain, bc.n_query);
      EvalSuite test = make_eval_suite(b, b.test_domains, "test", bc.seed, bc.test_tasks,
                                       bc.n_domains, bc.per_domain, bc.n_query);
      save_benchmark(out_dir, bc, b, val, test);
      write_config_snapshot(out_dir, cfg, "gen");
      std::cout << "benchmark written to " << out_dir << " (" << b.train_domains.size() << "/"
                << b.val_domains.size() << "/" << b.test_domains.size() << " domains, "
                << val.tasks.size() << " val tasks, " << test.tasks.size() << " test tasks)\n";
    } else if (train_cmd->parsed()) {
      RunConfig cfg = load_config_file(config_path);
      LoadedBench lb = load_bench_checked(bench_dir);
      cfg.bench = lb.cfg;
      cfg.model.classes = lb.cfg.classes;
      cfg.model.hw = lb.cfg.hw;
      if (seed_given || config_path.empty()) cfg.train.seed = seed;
      if (!t_method.empty()) cfg.train.method = t_method;
      if (t_epochs > 0) cfg.train.epochs = t_epochs;
      if (t_steps > 0) cfg.train.steps_per_epoch = t_steps;
      if (t_lr > 0) cfg.train.lr = t_lr;
      cfg.threads = threads;
      validate(cfg);
      EvalSuite val = load_suite(fs::path(bench_dir) / "val");
      fs::create_directories(out_dir);
      TrainResult res = train(cfg, lb.bench, val);
      save_checkpoint((fs::path(out_dir) / "checkpoint.bin").string(), res.best_model, cfg,
                      cfg.train.seed);
      write_file(fs::path(out_dir) / "train_log.csv", res.log_csv);
      write_config_snapshot(out_dir, cfg, "train",
                            json{{"best_metric", res.best_metric},
                                 {"best_epoch", res.best_epoch},
                                 {"bench_dir", bench_dir}});
      std::cout << "trained " << cfg.train.method << ": best "
                << cfg.train.early_stop_metric << " " << fmt_g(res.best_metric) << " at epoch "
                << res.best_epoch << "\n";
    } else if (eval_cmd->parsed()) {
      Checkpoint ck = load_ckpt_checked(ckpt_path);
      LoadedBench lb = load_bench_checked(bench_dir);
      const Method method =
          method_str == "auto" ? ck.model.family : method_from_string(method_str);
      EvalSuite suite = pick_suite(bench_dir, suite_name, tasks);
      auto rep = evaluate(method, ck.model, suite, adapt_settings(ck.config), threads);
      fs::create_directories(out_dir);
      const std::string tag = method_to_string(method) + "_" + suite_name;
      write_file(fs::path(out_dir) / ("eval_" + tag + ".csv"), eval_report_csv(rep));
      json summary = {{"method", rep.method},
                      {"suite", rep.suite},
                      {"tasks", rep.per_task_acc.size()},
                      {"avg_accuracy", rep.avg},
                      {"worst_decile", rep.w10},
                      {"median_ms", median_of(rep.per_task_ms)},
                      {"seed", seed}};
      write_file(fs::path(out_dir) / ("summary_" + tag + ".json"), summary.dump(2) + "\n");
      write_config_snapshot(out_dir, ck.config, "eval",
                            json{{"ckpt", ckpt_path}, {"bench_dir", bench_dir}});
      std::cout << rep.method << " on " << rep.suite << ": avg " << fmt_f(rep.avg, 2)
                << "%, worst decile " << fmt_f(rep.w10, 2) << "% over " << rep.per_task_acc.size()
                << " tasks\n";
    } else if (bench_cmd->parsed()) {
      LoadedBench lb = load_bench_checked(bench_dir);
      std::vector<Checkpoint> cks;
      for (const auto& p : ckpt_paths) cks.push_back(load_ckpt_checked(p));
      std::vector<Method> methods;
      if (methods_csv.empty()) {
        for (Method m : {Method::cxda, Method::cxda_sup, Method::erm, Method::bn, Method::cml,
                         Method::ft_em, Method::ft_im})
          for (const auto& ck : cks)
            if (family_of(m) == ck.model.family) { methods.push_back(m); break; }
      } else {
        size_t pos = 0;
        while (pos < methods_csv.size()) {
          size_t next = methods_csv.find(',', pos);
          if (next == std::string::npos) next = methods_csv.size();
          methods.push_back(method_from_string(methods_csv.substr(pos, next - pos)));
          pos = next + 1;
        }
      }
      EvalSuite suite = pick_suite(bench_dir, suite_name, tasks > 0 ? tasks : 30);
      std::string csv = "method,median_ms,mean_ms,p90_ms,avg_accuracy\n";
      json summary = json::array();
      for (Method m : methods) {
        const Checkpoint* ck = nullptr;
        for (const auto& c : cks)
          if (family_of(m) == c.model.family) { ck = &c; break; }
        if (!ck) throw CheckpointError("no compatible checkpoint for " + method_to_string(m));
        // timing wants an uncontended core, so this path stays serial
        auto rep = evaluate(m, ck->model, suite, adapt_settings(ck->config), 1);
        std::vector<double> ms = rep.per_task_ms;
        std::stable_sort(ms.begin(), ms.end());
        const double p90 = ms[static_cast<size_t>(0.9 * (ms.size() - 1))];
        csv += method_to_string(m) + "," + fmt_g(median_of(rep.per_task_ms)) + "," +
               fmt_g(mean_of(rep.per_task_ms)) + "," + fmt_g(p90) + "," + fmt_g(rep.avg) + "\n";
        summary.push_back(json{{"method", method_to_string(m)},
                               {"median_ms", median_of(rep.per_task_ms)},
                               {"mean_ms", mean_of(rep.per_task_ms)},
                               {"p90_ms", p90},
                               {"avg_accuracy", rep.avg}});
        std::cout << method_to_string(m) << ": median " << fmt_f(median_of(rep.per_task_ms), 1)
                  << " ms/task\n";
      }
      fs::create_directories(out_dir);
      write_file(fs::path(out_dir) / "bench_timing.csv", csv);
      write_file(fs::path(out_dir) / "bench_timing.json", summary.dump(2) + "\n");
      write_config_snapshot(out_dir, cks.front().config, "bench",
                            json{{"bench_dir", bench_dir}, {"tasks", suite.tasks.size()}});
    } else if (ablate_cmd->parsed()) {
      Checkpoint ck = load_ckpt_checked(ckpt_path);
      LoadedBench lb = load_bench_checked(bench_dir);
      const Method method =
          method_str == "auto" ? ck.model.family : method_from_string(method_str);
      std::vector<int> values =
          values_csv.empty()
              ? (axis == "domains" ? std::vector<int>{1, 2, 5, 10, 20}
                                   : std::vector<int>{10, 20, 50, 100, 200})
              : parse_int_list(values_csv);
      const int fixed = axis == "domains" ? budget : fixed_domains;
      auto cells = ablation_grid(method, ck.model, lb.bench, axis, values, fixed, seed,
                                 tasks > 0 ? tasks : 30, n_query, adapt_settings(ck.config),
                                 threads);
      fs::create_directories(out_dir);
      write_file(fs::path(out_dir) / ("ablation_" + axis + ".csv"), ablation_csv(cells));
      write_config_snapshot(out_dir, ck.config, "ablate",
                            json{{"axis", axis}, {"ckpt", ckpt_path}, {"bench_dir", bench_dir}});
      for (const auto& c : cells)
        std::cout << axis << "=" << c.value << ": "
                  << (c.error.empty() ? fmt_f(c.avg, 2) + "%" : "error: " + c.error) << "\n";
    } else if (attn_cmd->parsed()) {
      Checkpoint ck = load_ckpt_checked(ckpt_path);
      LoadedBench lb = load_bench_checked(bench_dir);
      if (ck.model.family != Method::cxda)
        throw CheckpointError("attention dumps need a cxda checkpoint");
      EvalSuite suite = pick_suite(bench_dir, suite_name, tasks > 0 ? tasks : 20);
      std::vector<AttentionRecord> records;
      auto rep = evaluate(Method::cxda, ck.model, suite, adapt_settings(ck.config), threads,
                          &records);
      auto hist = attention_histogram(records);
      fs::create_directories(out_dir);
      write_file(fs::path(out_dir) / "attention.csv", attention_records_csv(records));
      write_file(fs::path(out_dir) / "attention_histogram.csv", histogram_csv(hist));
      json summary = {{"tasks", records.size()},
                      {"mean_same", hist.mean_same},
                      {"mean_diff", hist.mean_diff},
                      {"max_weight", hist.max_weight},
                      {"avg_accuracy", rep.avg}};
      write_file(fs::path(out_dir) / "attention_summary.json", summary.dump(2) + "\n");
      write_config_snapshot(out_dir, ck.config, "attn",
                            json{{"ckpt", ckpt_path}, {"bench_dir", bench_dir}});
      std::cout << "same-domain mean " << fmt_g(hist.mean_same) << ", different-domain mean "
                << fmt_g(hist.mean_diff) << "\n";
    }
  } catch (const MissingInput& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
