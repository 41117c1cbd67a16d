// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <limits>
#include <string>
#include <thread>
#include <vector>

#include "xda/methods.hpp"
#include "xda/metrics.hpp"
#include "xda/synth.hpp"

namespace xda {

struct EvalReport {
  std::string method;
  std::string suite;
  std::vector<double> per_task_acc;  // percent
  std::vector<double> per_task_ms;
  double avg = 0.0, w10 = 0.0;
};

// Scores every suite task with one method. Tasks are independent, so they
// may fan out over up to `threads` workers; results fold in task order and
// are identical at any thread count.
inline EvalReport evaluate(Method method, const ModelT<float>& model, const EvalSuite& suite,
                           const AdaptSettings& st = AdaptSettings{}, int threads = 1,
                           std::vector<AttentionRecord>* records_out = nullptr) {
  const size_t n = suite.tasks.size();
  if (n == 0) throw ContractError("evaluate needs a nonempty suite");
  EvalReport rep;
  rep.method = method_to_string(method);
  rep.suite = suite.split;
  rep.per_task_acc.resize(n);
  rep.per_task_ms.resize(n);
  std::vector<AttentionRecord> records(records_out ? n : 0);

  auto run_range = [&](size_t lo, size_t hi) {
    for (size_t i = lo; i < hi; ++i) {
      const auto& task = suite.tasks[i];
      auto res = run_task(method, model, task.episode, st, task.task_id);
      rep.per_task_acc[i] = accuracy_percent(res.logits, task.episode.query_y);
      rep.per_task_ms[i] = res.ms;
      if (records_out && res.has_record) records[i] = std::move(res.record);
    }
  };

  const int workers = std::max(1, std::min<int>(threads, static_cast<int>(n)));
  if (workers == 1) {
    run_range(0, n);
  } else {
    std::vector<std::thread> pool;
    const size_t chunk = (n + static_cast<size_t>(workers) - 1) / static_cast<size_t>(workers);
    for (int w = 0; w < workers; ++w) {
      const size_t lo = static_cast<size_t>(w) * chunk;
      if (lo >= n) break;
      pool.emplace_back(run_range, lo, std::min(n, lo + chunk));
    }
    for (auto& t : pool) t.join();
  }

  rep.avg = mean_of(rep.per_task_acc);
  // the worst decile is undefined below 10 tasks (timing runs clip that low)
  rep.w10 = n >= 10 ? worst_decile(rep.per_task_acc)
                    : std::numeric_limits<double>::quiet_NaN();
  if (records_out) *records_out = std::move(records);
  return rep;
}

inline std::string eval_report_csv(const EvalReport& r) {
  std::string csv = "task,accuracy,ms\n";
  for (size_t i = 0; i < r.per_task_acc.size(); ++i)
    csv += std::to_string(i) + "," + fmt_g(r.per_task_acc[i]) + "," + fmt_g(r.per_task_ms[i]) +
           "\n";
  return csv;
}

inline std::string attention_records_csv(const std::vector<AttentionRecord>& records) {
  std::string csv = "task_id,head,query_idx,support_idx,weight,same_domain\n";
  for (const auto& r : records) {
    for (int h = 0; h < r.heads; ++h)
      for (int q = 0; q < r.n_query; ++q)
        for (int s = 0; s < r.n_support; ++s)
          csv += std::to_string(r.task_id) + "," + std::to_string(h) + "," + std::to_string(q) +
                 "," + std::to_string(s) + "," + fmt_g(r.at(h, q, s)) + "," +
                 (r.same_domain.empty() ? "0" : std::to_string(int(r.same_domain[static_cast<size_t>(s)]))) +
                 "\n";
  }
  return csv;
}

inline std::string histogram_csv(const AttentionHistogram& h) {
  std::string csv = "bin_lo,bin_hi,density_same,density_diff\n";
  for (int b = 0; b < h.bins; ++b)
    csv += fmt_g(b * h.bin_width) + "," + fmt_g((b + 1) * h.bin_width) + "," +
           fmt_g(h.density_same[static_cast<size_t>(b)]) + "," +
           fmt_g(h.density_diff[static_cast<size_t>(b)]) + "\n";
  return csv;
}

// ---- ablation grids ----

struct AblationCell {
  std::string axis;
  int value = 0;
  int n_domains = 0, per_domain = 0;
  double avg = 0.0, w10 = 0.0;
  std::string error;  // nonempty when the cell failed; the grid continues
};

// Sweeps the support composition at deployment time on held-out domains.
// axis "domains": vary N_D at a fixed support budget (per_domain = budget/N_D).
// axis "size": vary the support budget at fixed N_D (per_domain = size/N_D).
inline std::vector<AblationCell> ablation_grid(Method method, const ModelT<float>& model,
                                               const Benchmark& bench, const std::string& axis,
                                               const std::vector<int>& values, int fixed,
                                               uint64_t seed, int n_tasks, int n_query,
                                               const AdaptSettings& st = AdaptSettings{},
                                               int threads = 1) {
  if (axis != "domains" && axis != "size") throw ConfigError("ablation axis must be domains|size");
  std::vector<AblationCell> cells;
  for (int v : values) {
    AblationCell cell;
    cell.axis = axis;
    cell.value = v;
    try {
      if (axis == "domains") {
        cell.n_domains = v;
        if (v < 1 || fixed % v != 0)
          throw ConfigError("support budget " + std::to_string(fixed) +
                            " is not divisible by " + std::to_string(v) + " domains");
        cell.per_domain = fixed / v;
      } else {
        cell.n_domains = fixed;
        if (fixed < 1 || v % fixed != 0)
          throw ConfigError("support size " + std::to_string(v) + " is not divisible by " +
                            std::to_string(fixed) + " domains");
        cell.per_domain = v / fixed;
      }
      const std::string split = "ablate-" + axis + "-" + std::to_string(v);
      EvalSuite suite = make_eval_suite(bench, bench.test_domains, split, seed, n_tasks,
                                        cell.n_domains, cell.per_domain, n_query);
      auto rep = evaluate(method, model, suite, st, threads);
      cell.avg = rep.avg;
      cell.w10 = rep.w10;
    } catch (const XdaError& e) {
      cell.error = e.what();
    }
    cells.push_back(std::move(cell));
  }
  return cells;
}

inline std::string ablation_csv(const std::vector<AblationCell>& cells) {
  std::string csv = "axis,value,n_domains,per_domain,avg,worst_decile,error\n";
  for (const auto& c : cells) {
    csv += c.axis + "," + std::to_string(c.value) + "," + std::to_string(c.n_domains) + "," +
           std::to_string(c.per_domain) + ",";
    if (c.error.empty()) csv += fmt_g(c.avg) + "," + fmt_g(c.w10) + ",";
    else csv += ",,\"" + c.error + "\"";
    csv += "\n";
  }
  return csv;
}

}  // namespace xda
