#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "cacl/eval.hpp"
#include "cacl/train.hpp"

namespace cacl {

// one objective variant; switches map directly onto RunConfig fields
struct AblationArm {
  std::string name;
  int positive_pairs = 4;
  bool enable_sdp = true;
  bool enable_transformer = true;
  bool uniform_sampling = true;
  int epochs_override = -1;  // -1 keeps the base epoch count
};

// nested positive-pair ladder plus the untrained and plain-shuffle controls
inline std::vector<AblationArm> ablation_grid() {
  return {
      {"random_init", 1, false, false, true, 0},
      {"sdp_only", 0, true, false, true, -1},
      {"vmoco_only", 1, false, false, true, -1},
      {"sdp_vmoco", 1, true, false, true, -1},
      {"sdp_vmoco_tq", 2, true, true, true, -1},
      {"sdp_vmoco_tq_tk", 3, true, true, true, -1},
      {"cacl_full", 4, true, true, true, -1},
      {"cacl_full_nonuniform", 4, true, true, false, -1},
  };
}

inline const AblationArm& find_arm(const std::vector<AblationArm>& arms, const std::string& name) {
  for (const auto& a : arms)
    if (a.name == name) return a;
  throw ConfigError("unknown ablation arm: " + name);
}

inline RunConfig apply_arm(RunConfig base, const AblationArm& arm, std::uint64_t run_seed) {
  base.positive_pairs = arm.positive_pairs;
  base.enable_sdp = arm.enable_sdp;
  base.enable_transformer = arm.enable_transformer;
  base.uniform_sampling = arm.uniform_sampling;
  if (arm.epochs_override >= 0) base.epochs = arm.epochs_override;
  base.seed = run_seed;
  base.validate();
  return base;
}

struct AblationRun {
  std::string arm;
  std::uint64_t seed = 0;
  std::vector<double> recall;   // aligned with retrieval_ks()
  std::array<double, 4> sims{};  // late-training pair similarity means, NaN when absent
  double sdp_acc = std::numeric_limits<double>::quiet_NaN();
  double first_total = std::numeric_limits<double>::quiet_NaN();
  double final_total = std::numeric_limits<double>::quiet_NaN();
};

struct AblationSummary {
  std::string arm;
  int runs = 0;
  std::vector<double> recall_mean;
  std::vector<double> recall_sd;
  std::array<double, 4> sims_mean{};
  double sdp_acc_mean = std::numeric_limits<double>::quiet_NaN();
  double sdp_acc_sd = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

// mean over the final up-to-5 epochs; the single-epoch noise is large at
// desk scale
inline std::array<double, 4> late_sims(const std::vector<EpochStats>& stats) {
  std::array<double, 4> out;
  out.fill(std::numeric_limits<double>::quiet_NaN());
  if (stats.empty()) return out;
  const std::size_t window = std::min<std::size_t>(5, stats.size());
  for (int i = 0; i < 4; ++i) {
    double s = 0;
    for (std::size_t e = stats.size() - window; e < stats.size(); ++e) s += stats[e].sims[i];
    out[i] = s / window;
  }
  return out;
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? std::numeric_limits<double>::quiet_NaN() : s / v.size();
}

inline double sample_sd(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / (v.size() - 1));
}

}  // namespace detail

// trains and evaluates one arm at one seed against a shared dataset
template <class R>
AblationRun run_arm(const RunConfig& base, const AblationArm& arm, std::uint64_t seed,
                    const video::Dataset<R>& ds) {
  const auto cfg = apply_arm(base, arm, seed);
  Trainer<R> trainer(cfg, ds);
  const auto& stats = trainer.train();
  AblationRun run;
  run.arm = arm.name;
  run.seed = seed;
  run.recall = evaluate_retrieval(trainer.online(), ds, cfg).recall;
  run.sims = detail::late_sims(stats);
  if (!stats.empty()) {
    run.first_total = stats.front().total;
    run.final_total = stats.back().total;
  }
  if (cfg.enable_sdp && cfg.epochs > 0)
    run.sdp_acc = probe_shuffle_degree(trainer.online(), ds, cfg);
  return run;
}

template <class R>
std::vector<AblationRun> run_ablation(
    const RunConfig& base, const std::vector<AblationArm>& arms,
    const std::vector<std::uint64_t>& seeds, const video::Dataset<R>& ds,
    const std::function<void(const AblationRun&)>& on_run = {}) {
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  std::vector<AblationRun> runs;
  for (const auto& arm : arms) {
    for (auto seed : seeds) {
      runs.push_back(run_arm(base, arm, seed, ds));
      if (on_run) on_run(runs.back());
    }
  }
  return runs;
}

inline std::vector<AblationSummary> summarize_ablation(const std::vector<AblationRun>& runs,
                                                       const std::vector<AblationArm>& arms) {
  std::vector<AblationSummary> out;
  const std::size_t nk = retrieval_ks().size();
  for (const auto& arm : arms) {
    AblationSummary s;
    s.arm = arm.name;
    s.recall_mean.assign(nk, 0.0);
    s.recall_sd.assign(nk, 0.0);
    std::vector<std::vector<double>> recalls(nk);
    std::array<std::vector<double>, 4> sims;
    std::vector<double> accs;
    for (const auto& r : runs) {
      if (r.arm != arm.name) continue;
      s.runs++;
      for (std::size_t k = 0; k < nk; ++k) recalls[k].push_back(r.recall[k]);
      for (int i = 0; i < 4; ++i)
        if (!std::isnan(r.sims[i])) sims[i].push_back(r.sims[i]);
      if (!std::isnan(r.sdp_acc)) accs.push_back(r.sdp_acc);
    }
    if (s.runs == 0) continue;
    for (std::size_t k = 0; k < nk; ++k) {
      s.recall_mean[k] = detail::mean_of(recalls[k]);
      s.recall_sd[k] = detail::sample_sd(recalls[k]);
    }
    for (int i = 0; i < 4; ++i) s.sims_mean[i] = detail::mean_of(sims[i]);
    s.sdp_acc_mean = detail::mean_of(accs);
    s.sdp_acc_sd = detail::sample_sd(accs);
    out.push_back(s);
  }
  return out;
}

inline CsvWriter ablation_runs_csv(const std::vector<AblationRun>& runs) {
  std::vector<std::string> header = {"arm", "seed"};
  for (int k : retrieval_ks()) header.push_back("recall_" + std::to_string(k));
  for (const char* p : {"sim_gq_gk", "sim_gq_tq", "sim_gq_tk", "sim_tq_tk"}) header.push_back(p);
  header.push_back("sdp_acc");
  header.push_back("first_total");
  header.push_back("final_total");
  CsvWriter csv(header);
  for (const auto& r : runs) {
    std::vector<std::string> row = {r.arm, std::to_string(r.seed)};
    for (double v : r.recall) row.push_back(fmt_g(v));
    for (double v : r.sims) row.push_back(fmt_g(v));
    row.push_back(fmt_g(r.sdp_acc));
    row.push_back(fmt_g(r.first_total));
    row.push_back(fmt_g(r.final_total));
    csv.add_row(row);
  }
  return csv;
}

inline CsvWriter ablation_summary_csv(const std::vector<AblationSummary>& summaries) {
  std::vector<std::string> header = {"arm", "runs"};
  for (int k : retrieval_ks()) {
    header.push_back("recall_" + std::to_string(k) + "_mean");
    header.push_back("recall_" + std::to_string(k) + "_sd");
  }
  for (const char* p : {"sim_gq_gk", "sim_gq_tq", "sim_gq_tk", "sim_tq_tk"}) header.push_back(p);
  header.push_back("sdp_acc_mean");
  header.push_back("sdp_acc_sd");
  CsvWriter csv(header);
  for (const auto& s : summaries) {
    std::vector<std::string> row = {s.arm, std::to_string(s.runs)};
    for (std::size_t k = 0; k < s.recall_mean.size(); ++k) {
      row.push_back(fmt_g(s.recall_mean[k]));
      row.push_back(fmt_g(s.recall_sd[k]));
    }
    for (double v : s.sims_mean) row.push_back(fmt_g(v));
    row.push_back(fmt_g(s.sdp_acc_mean));
    row.push_back(fmt_g(s.sdp_acc_sd));
    csv.add_row(row);
  }
  return csv;
}

}  // namespace cacl
