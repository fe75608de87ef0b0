#include <cstdint>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cacl/ablate.hpp"
#include "cacl/checkpoint.hpp"
#include "cacl/eval.hpp"
#include "cacl/io.hpp"
#include "cacl/med.hpp"
#include "cacl/parallel.hpp"
#include "cacl/train.hpp"
#include "cacl/video.hpp"

namespace {

using cacl::fmt_g;
using cacl::RunConfig;

// training scalar; single precision doubles the SIMD width of the conv loops
using Real = float;

struct CommonArgs {
  std::string config;
  std::string out = "out";
  std::string checkpoint;
  std::vector<std::string> overrides;
  std::int64_t seed = -1;
  int threads = -1;
  bool seed_set = false;
  bool threads_set = false;
};

std::string trim_copy(const std::string& s) {
  const auto a = s.find_first_not_of(" \t");
  const auto b = s.find_last_not_of(" \t");
  return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

RunConfig resolve_config(const CommonArgs& args, RunConfig base = RunConfig()) {
  auto kv = args.config.empty() ? cacl::KvConfig() : cacl::KvConfig::parse_file(args.config);
  for (const auto& ov : args.overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos || eq == 0)
      throw cacl::ConfigError("override '" + ov + "' is not of the form key=value");
    kv.set(trim_copy(ov.substr(0, eq)), trim_copy(ov.substr(eq + 1)));
  }
  if (args.seed_set) kv.set("seed", std::to_string(args.seed));
  if (args.threads_set) kv.set("threads", std::to_string(args.threads));
  auto cfg = RunConfig::from_kv(kv, std::move(base));
  cacl::set_thread_count(cfg.threads);
  return cfg;
}

// the manifest records the fully resolved run before any work happens
void write_manifest(const std::string& out, const std::string& command,
                    const nlohmann::json& extra) {
  nlohmann::json j = extra;
  j["command"] = command;
  cacl::CsvWriter::write_text_file(out + "/manifest.json", j.dump(2) + "\n");
}

std::string config_docs() {
  std::string s = "Config keys (file or key=value override, shown with defaults):\n";
  for (const auto& d : RunConfig::key_docs()) {
    std::string line = "  ";
    line += d.key;
    if (line.size() < 24) line.resize(24, ' ');
    line += "= ";
    line += d.dflt;
    if (line.size() < 40) line.resize(40, ' ');
    s += line + "  " + d.doc + "\n";
  }
  return s;
}

void add_common(CLI::App* sub, CommonArgs& args, bool with_checkpoint) {
  sub->add_option("--config", args.config, "key=value config file");
  sub->add_option("--out", args.out, "output directory (all files land here)")
      ->capture_default_str();
  sub->add_option("--seed", args.seed, "override the master seed");
  sub->add_option("--threads", args.threads, "override the worker thread count");
  sub->add_option("overrides", args.overrides, "key=value config overrides");
  if (with_checkpoint)
    sub->add_option("--checkpoint", args.checkpoint, "trained model checkpoint")->required();
  sub->footer(config_docs());
}

void finalize_flags(const CLI::App* sub, CommonArgs& args) {
  args.seed_set = sub->count("--seed") > 0;
  args.threads_set = sub->count("--threads") > 0;
}

struct RestoredModel {
  RunConfig cfg;
  cacl::video::Dataset<Real> ds;
  std::unique_ptr<cacl::Trainer<Real>> trainer;
};

RestoredModel restore_model(const CommonArgs& args) {
  auto file = cacl::open_checkpoint(args.checkpoint);
  auto base = RunConfig::from_checkpoint_manifest(file.manifest);
  RestoredModel r;
  r.cfg = resolve_config(args, base);
  r.ds = cacl::video::generate_dataset<Real>(r.cfg.gen_config());
  r.trainer = std::make_unique<cacl::Trainer<Real>>(r.cfg, r.ds, &file);
  return r;
}

void cmd_gen_data(const CommonArgs& args) {
  const auto cfg = resolve_config(args);
  write_manifest(args.out, "gen-data", {{"config", cfg.to_json()}});
  const auto ds = cacl::video::generate_dataset<Real>(cfg.gen_config());
  cacl::CsvWriter csv({"id", "class_id", "class_name", "split", "frames", "height", "width"});
  int train_count = 0;
  for (const auto& v : ds.videos) {
    train_count += v.train_split ? 1 : 0;
    csv.add_row({std::to_string(v.id), std::to_string(v.class_id),
                 cacl::video::motion_class_name(v.class_id), v.train_split ? "train" : "heldout",
                 std::to_string(v.frames), std::to_string(v.h), std::to_string(v.w)});
  }
  csv.write_file(args.out + "/videos.csv");
  std::printf("generated %d videos (%d train / %d held-out) into %s/videos.csv\n",
              static_cast<int>(ds.videos.size()), train_count,
              static_cast<int>(ds.videos.size()) - train_count, args.out.c_str());
}

void cmd_pretrain_frames(const CommonArgs& args) {
  const auto cfg = resolve_config(args);
  write_manifest(args.out, "pretrain-frames", {{"config", cfg.to_json()}});
  const auto ds = cacl::video::generate_dataset<Real>(cfg.gen_config());
  cacl::Rng fx_rng(cacl::derive_seed(cfg.seed, "extractor", 0));
  auto fx = cacl::FrameExtractor<Real>::create(1, cfg.encoder_config().extractor_channels,
                                                 fx_rng);
  pretrain_frame_extractor(fx, ds, cfg.fx_config(), cfg.seed);
  nlohmann::json meta;
  meta["config"] = cfg.to_json();
  meta["stage"] = "frame-extractor";
  const auto path = args.out + "/extractor.ckpt";
  cacl::save_checkpoint<Real>(path, {{"fx", &fx.params}}, meta);
  std::printf("pretrained frame extractor saved to %s\n", path.c_str());
}

void cmd_train(const CommonArgs& args) {
  const auto cfg = resolve_config(args);
  write_manifest(args.out, "train", {{"config", cfg.to_json()}});
  const auto ds = cacl::video::generate_dataset<Real>(cfg.gen_config());
  cacl::Trainer<Real> trainer(cfg, ds);
  const auto& stats = trainer.train();
  cacl::metrics_csv(stats).write_file(args.out + "/metrics.csv");
  trainer.save(args.out + "/model.ckpt", {});
  if (!stats.empty()) {
    const auto& last = stats.back();
    std::printf("epoch %d: total %s (nce %s, cls %s)\n", last.epoch, fmt_g(last.total).c_str(),
                fmt_g(last.nce).c_str(), fmt_g(last.cls).c_str());
  }
  std::printf("wrote %s/metrics.csv and %s/model.ckpt\n", args.out.c_str(), args.out.c_str());
}

void cmd_retrieve(const CommonArgs& args) {
  auto r = restore_model(args);
  write_manifest(args.out, "retrieve",
                 {{"config", r.cfg.to_json()}, {"checkpoint", args.checkpoint}});
  const auto rep = cacl::evaluate_retrieval(r.trainer->online(), r.ds, r.cfg);
  cacl::retrieval_csv(rep).write_file(args.out + "/retrieval.csv");
  for (std::size_t i = 0; i < rep.ks.size(); ++i)
    std::printf("recall@%d = %s\n", rep.ks[i], fmt_g(rep.recall[i]).c_str());
  std::printf("wrote %s/retrieval.csv (%d queries vs %d gallery)\n", args.out.c_str(),
              rep.queries, rep.gallery);
}

void cmd_probe(const CommonArgs& args) {
  auto r = restore_model(args);
  write_manifest(args.out, "probe",
                 {{"config", r.cfg.to_json()}, {"checkpoint", args.checkpoint}});
  const double sdp = cacl::probe_shuffle_degree(r.trainer->online(), r.ds, r.cfg);
  const double chance = 1.0 / cacl::med::num_degree_classes(r.cfg.clip_len);
  const double linear = cacl::probe_linear_classes(r.trainer->online(), r.ds, r.cfg);
  cacl::CsvWriter csv({"metric", "value"});
  csv.add_row({"degree_accuracy", fmt_g(sdp)});
  csv.add_row({"degree_chance", fmt_g(chance)});
  csv.add_row({"linear_accuracy", fmt_g(linear)});
  csv.write_file(args.out + "/probe.csv");
  std::printf("degree probe accuracy %s (chance %s)\n", fmt_g(sdp).c_str(),
              fmt_g(chance).c_str());
  std::printf("linear probe accuracy %s\n", fmt_g(linear).c_str());
  std::printf("wrote %s/probe.csv\n", args.out.c_str());
}

void cmd_attention(const CommonArgs& args) {
  auto r = restore_model(args);
  if (!r.cfg.enable_transformer)
    throw cacl::DataError("checkpoint was trained with the transformer branch disabled");
  write_manifest(args.out, "attention",
                 {{"config", r.cfg.to_json()}, {"checkpoint", args.checkpoint}});
  const auto rep = cacl::extract_attention(r.trainer->transformer(), r.ds, r.cfg);
  cacl::attention_csv(rep.raw, rep.tokens).write_file(args.out + "/attention_raw.csv");
  cacl::attention_csv(rep.row_normalized, rep.tokens)
      .write_file(args.out + "/attention_normalized.csv");
  cacl::CsvWriter csv({"metric", "value"});
  csv.add_row({"tokens", std::to_string(rep.tokens)});
  csv.add_row({"clips", std::to_string(rep.clips)});
  csv.add_row({"first_frame_mass", fmt_g(rep.first_frame_mass)});
  csv.add_row({"last_frame_mass", fmt_g(rep.last_frame_mass)});
  csv.add_row({"middle_frame_mass", fmt_g(rep.middle_frame_mass)});
  csv.write_file(args.out + "/attention_summary.csv");
  std::printf("per-token attention mass: first %s, last %s, middle %s\n",
              fmt_g(rep.first_frame_mass).c_str(), fmt_g(rep.last_frame_mass).c_str(),
              fmt_g(rep.middle_frame_mass).c_str());
  std::printf("wrote %s/attention_raw.csv and %s/attention_normalized.csv\n", args.out.c_str(),
              args.out.c_str());
}

void cmd_ablate(const CommonArgs& args, const std::string& seeds_str,
                const std::string& arms_str) {
  const auto base = resolve_config(args);
  std::vector<std::uint64_t> seeds;
  for (int s : cacl::detail::parse_int_list(seeds_str, "seeds")) {
    if (s < 0) throw cacl::ConfigError("ablation seeds must be non-negative");
    seeds.push_back(static_cast<std::uint64_t>(s));
  }
  const auto grid = cacl::ablation_grid();
  std::vector<cacl::AblationArm> arms;
  if (arms_str == "all") {
    arms = grid;
  } else {
    std::stringstream ss(arms_str);
    std::string name;
    while (std::getline(ss, name, ',')) arms.push_back(cacl::find_arm(grid, trim_copy(name)));
    if (arms.empty()) throw cacl::ConfigError("no ablation arms selected");
  }
  nlohmann::json extra;
  extra["config"] = base.to_json();
  extra["seeds"] = seeds;
  std::vector<std::string> arm_names;
  for (const auto& a : arms) arm_names.push_back(a.name);
  extra["arms"] = arm_names;
  write_manifest(args.out, "ablate", extra);

  const auto ds = cacl::video::generate_dataset<Real>(base.gen_config());
  auto runs = cacl::run_ablation(base, arms, seeds, ds, [](const cacl::AblationRun& r) {
    std::printf("arm %s seed %llu: recall@1 %s\n", r.arm.c_str(),
                static_cast<unsigned long long>(r.seed), fmt_g(r.recall[0]).c_str());
    std::fflush(stdout);
  });
  cacl::ablation_runs_csv(runs).write_file(args.out + "/ablation_runs.csv");
  const auto summary = cacl::summarize_ablation(runs, arms);
  cacl::ablation_summary_csv(summary).write_file(args.out + "/ablation_summary.csv");
  for (const auto& s : summary)
    std::printf("%s: recall@1 %s +- %s\n", s.arm.c_str(), fmt_g(s.recall_mean[0]).c_str(),
                fmt_g(s.recall_sd[0]).c_str());
  std::printf("wrote %s/ablation_runs.csv and %s/ablation_summary.csv\n", args.out.c_str(),
              args.out.c_str());
}

void cmd_degrees(const std::string& out, int n, int draws, std::uint64_t seed) {
  write_manifest(out, "degrees", {{"n", n}, {"draws", draws}, {"seed", seed}});
  const auto degs = cacl::med::feasible_degrees(n);
  std::map<int, int> counts;
  for (int d : degs) counts[d] = 0;
  cacl::Rng rng(cacl::derive_seed(seed, "degrees", 0));
  for (int i = 0; i < draws; ++i) {
    const auto s = cacl::med::sample_uniform_degree(n, rng);
    // re-derive the degree from scratch; any disagreement is a sampler bug
    const int check = cacl::med::med_degree(s.perm);
    if (check != s.degree)
      throw cacl::VerificationError("sampled permutation re-checks to degree " +
                                    std::to_string(check) + " but the sampler claimed " +
                                    std::to_string(s.degree));
    counts[s.degree]++;
  }
  cacl::CsvWriter csv({"degree", "count", "fraction", "expected_fraction"});
  const double expected = 1.0 / degs.size();
  for (int d : degs)
    csv.add_row({std::to_string(d), std::to_string(counts[d]),
                 fmt_g(draws > 0 ? static_cast<double>(counts[d]) / draws : 0.0),
                 fmt_g(expected)});
  csv.write_file(out + "/degrees.csv");
  std::printf("%d draws over %d attainable degrees, all re-verified; wrote %s/degrees.csv\n",
              draws, static_cast<int>(degs.size()), out.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-architecture contrastive video representation learning, desk scale"};
  app.require_subcommand(1);

  CommonArgs gen_args, fx_args, train_args, retrieve_args, probe_args, attn_args, ablate_args;
  std::string ablate_seeds = "1,2,3";
  std::string ablate_arms = "all";
  std::string degrees_out = "out";
  int degrees_n = 16;
  int degrees_draws = 10000;
  std::uint64_t degrees_seed = 7;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic motion dataset");
  add_common(gen, gen_args, false);

  auto* fx = app.add_subcommand("pretrain-frames",
                                "pretrain the 2D frame extractor by instance discrimination");
  add_common(fx, fx_args, false);

  auto* train = app.add_subcommand("train", "run self-supervised training end to end");
  add_common(train, train_args, false);

  auto* retrieve =
      app.add_subcommand("retrieve", "nearest-neighbor retrieval from a trained checkpoint");
  add_common(retrieve, retrieve_args, true);

  auto* probe = app.add_subcommand("probe", "degree and linear probes on a trained checkpoint");
  add_common(probe, probe_args, true);

  auto* attn =
      app.add_subcommand("attention", "export averaged first-layer attention matrices");
  add_common(attn, attn_args, true);

  auto* ablate = app.add_subcommand("ablate", "train and compare objective variants");
  add_common(ablate, ablate_args, false);
  ablate->add_option("--seeds", ablate_seeds, "comma-separated training seeds")
      ->capture_default_str();
  ablate->add_option("--arms", ablate_arms, "comma-separated arm names, or 'all'")
      ->capture_default_str();

  auto* degrees = app.add_subcommand("degrees", "sample shuffle degrees and verify each draw");
  degrees->add_option("--out", degrees_out, "output directory")->capture_default_str();
  degrees->add_option("--n", degrees_n, "clip length")->capture_default_str();
  degrees->add_option("--draws", degrees_draws, "number of sampler draws")
      ->capture_default_str();
  degrees->add_option("--seed", degrees_seed, "sampler seed")->capture_default_str();

  try {
    app.parse(argc, argv);
    if (gen->parsed()) {
      finalize_flags(gen, gen_args);
      cmd_gen_data(gen_args);
    } else if (fx->parsed()) {
      finalize_flags(fx, fx_args);
      cmd_pretrain_frames(fx_args);
    } else if (train->parsed()) {
      finalize_flags(train, train_args);
      cmd_train(train_args);
    } else if (retrieve->parsed()) {
      finalize_flags(retrieve, retrieve_args);
      cmd_retrieve(retrieve_args);
    } else if (probe->parsed()) {
      finalize_flags(probe, probe_args);
      cmd_probe(probe_args);
    } else if (attn->parsed()) {
      finalize_flags(attn, attn_args);
      cmd_attention(attn_args);
    } else if (ablate->parsed()) {
      finalize_flags(ablate, ablate_args);
      cmd_ablate(ablate_args, ablate_seeds, ablate_arms);
    } else if (degrees->parsed()) {
      cmd_degrees(degrees_out, degrees_n, degrees_draws, degrees_seed);
    }
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error config: %s\n", e.what());
    return 2;
  } catch (const cacl::Error& e) {
    std::fprintf(stderr, "error %s: %s\n", e.kind(), e.what());
    return e.exit_code();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error internal: %s\n", e.what());
    return 1;
  }
  return 0;
}
