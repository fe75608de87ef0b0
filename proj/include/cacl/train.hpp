#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cacl/checkpoint.hpp"
#include "cacl/encoders.hpp"
#include "cacl/io.hpp"
#include "cacl/loss.hpp"
#include "cacl/med.hpp"
#include "cacl/optim.hpp"
#include "cacl/video.hpp"

namespace cacl {

namespace detail {

inline std::vector<int> parse_int_list(const std::string& s, const std::string& key) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t pos = 0;
      out.push_back(std::stoi(item, &pos));
      if (pos != item.size()) throw std::invalid_argument("trailing junk");
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "' expects comma-separated integers, got '" + s +
                        "'");
    }
  }
  if (out.empty()) throw ConfigError("config key '" + key + "' is empty");
  return out;
}

inline std::string int_list_str(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(v[i]);
  }
  return s;
}

}  // namespace detail

// one entry per config key: name, default (as written in a config file), doc line
struct ConfigKeyDoc {
  const char* key;
  const char* dflt;
  const char* doc;
};

// the full resolved configuration of a run; serializes losslessly to the
// manifest and back
struct RunConfig {
  // run
  std::uint64_t seed = 1;
  int threads = 1;
  // dataset
  int num_videos = 200;
  int num_classes = 8;
  int frames = 46;
  int gen_h = 20;
  int gen_w = 24;
  int crop = 16;
  double train_fraction = 0.8;
  // clips
  int clip_len = 16;
  int clip_stride = 2;
  // encoders
  std::vector<int> conv_channels = {8, 16, 32};
  int head_hidden = 64;
  int embed_dim = 32;
  int token_dim = 32;
  int tf_layers = 2;
  int tf_heads = 2;
  int ffn_hidden = 64;
  std::vector<int> extractor_channels = {8, 16};
  // frame-extractor pre-training
  int fx_epochs = 4;
  int fx_batch = 32;
  double fx_lr = 0.05;
  double fx_alpha = 0.99;
  int fx_queue = 128;
  int fx_stride = 10;
  std::string extractor_checkpoint;  // reuse a pretrained extractor when set
  // SSL training
  int epochs = 30;
  int batch = 16;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double tau = 1.0 / 0.07;
  double lambda = 1.0;
  double alpha = 0.999;
  int queue_capacity = 256;
  // ablation switches
  bool enable_sdp = true;
  bool enable_transformer = true;
  bool uniform_sampling = true;
  int positive_pairs = 4;  // 0 disables the contrastive term entirely
  // evaluation
  int retrieval_clips = 10;
  int attention_clips = 50;
  int probe_repeats = 5;

  static const std::vector<ConfigKeyDoc>& key_docs() {
    static const std::vector<ConfigKeyDoc> docs = {
        {"seed", "1", "master seed; every RNG stream is derived from it"},
        {"threads", "1", "worker threads for data generation and evaluation"},
        {"num_videos", "200", "videos in the synthetic dataset"},
        {"num_classes", "8", "motion classes (max 8)"},
        {"frames", "46", "frames per video"},
        {"gen_h", "20", "generated frame height"},
        {"gen_w", "24", "generated frame width"},
        {"crop", "16", "crop size used for training and evaluation"},
        {"train_fraction", "0.8", "per-class fraction of videos in the train split"},
        {"clip_len", "16", "frames per sampled clip"},
        {"clip_stride", "2", "stride between sampled clip frames"},
        {"conv_channels", "8,16,32", "3D trunk block widths (comma separated)"},
        {"head_hidden", "64", "hidden width of the contrast and degree heads"},
        {"embed_dim", "32", "contrastive embedding dimension"},
        {"token_dim", "32", "transformer token width"},
        {"tf_layers", "2", "transformer layers"},
        {"tf_heads", "2", "attention heads per layer"},
        {"ffn_hidden", "64", "transformer feed-forward hidden width"},
        {"extractor_channels", "8,16", "2D frame-extractor conv widths (exactly two)"},
        {"fx_epochs", "4", "frame-extractor pre-training epochs"},
        {"fx_batch", "32", "frame-extractor pre-training batch size"},
        {"fx_lr", "0.05", "frame-extractor pre-training learning rate"},
        {"fx_alpha", "0.99", "frame-extractor momentum coefficient"},
        {"fx_queue", "128", "frame-extractor negative queue capacity"},
        {"fx_stride", "10", "frame sampling stride for extractor pre-training"},
        {"extractor_checkpoint", "", "path to a pretrained extractor checkpoint (empty: train inline)"},
        {"epochs", "30", "SSL training epochs"},
        {"batch", "16", "SSL batch size"},
        {"lr", "0.05", "base learning rate (cosine-annealed per epoch)"},
        {"momentum", "0.9", "SGD momentum"},
        {"weight_decay", "0.0005", "L2 weight decay added to gradients"},
        {"tau", "14.28571429", "similarity scale multiplier (1/0.07)"},
        {"lambda", "1", "weight of the degree-prediction loss in the total"},
        {"alpha", "0.999", "momentum-encoder update coefficient"},
        {"queue_capacity", "256", "negative key queue capacity"},
        {"enable_sdp", "true", "train the shuffle-degree prediction head"},
        {"enable_transformer", "true", "use the transformer encoder branch"},
        {"uniform_sampling", "true", "sample shuffle degrees uniformly (vs plain shuffles)"},
        {"positive_pairs", "4", "1..4 nested positive-pair sets; 0 disables the contrastive term"},
        {"retrieval_clips", "10", "uniformly spaced clips averaged per video at evaluation"},
        {"attention_clips", "50", "clips averaged in the attention report"},
        {"probe_repeats", "5", "fresh shuffles per held-out video in the degree probe"},
    };
    return docs;
  }

  void validate() const {
    if (threads < 1) throw ConfigError("threads must be >= 1");
    if (positive_pairs < 0 || positive_pairs > 4)
      throw ConfigError("positive_pairs must lie in 0..4");
    if (positive_pairs == 0 && !enable_sdp)
      throw ConfigError("no objective: positive_pairs=0 requires enable_sdp=true");
    if (enable_transformer && positive_pairs < 2)
      throw ConfigError("enable_transformer=true requires positive_pairs >= 2");
    if (!enable_transformer && positive_pairs > 1)
      throw ConfigError("positive_pairs >= 2 requires enable_transformer=true");
    if (epochs < 0 || batch < 1) throw ConfigError("bad epochs/batch");
    if (clip_len < med::kMinClipLen || clip_len > med::kMaxClipLen)
      throw ConfigError("clip_len must lie in " + std::to_string(med::kMinClipLen) + ".." +
                        std::to_string(med::kMaxClipLen));
    if (clip_stride < 1) throw ConfigError("clip_stride must be >= 1");
    if (frames < (clip_len - 1) * clip_stride + 1)
      throw ConfigError("videos of " + std::to_string(frames) +
                        " frames cannot fit clips of length " + std::to_string(clip_len) +
                        " at stride " + std::to_string(clip_stride));
    if (train_fraction <= 0.0 || train_fraction >= 1.0)
      throw ConfigError("train_fraction must lie in (0,1)");
    if (tau <= 0.0) throw ConfigError("tau must be positive");
    if (lambda < 0.0) throw ConfigError("lambda must be >= 0");
    if (alpha < 0.0 || alpha >= 1.0) throw ConfigError("alpha must lie in [0,1)");
    if (queue_capacity < 1) throw ConfigError("queue_capacity must be >= 1");
    if (retrieval_clips < 1) throw ConfigError("retrieval_clips must be >= 1");
    if (probe_repeats < 1) throw ConfigError("probe_repeats must be >= 1");
    encoder_config().validate();
  }

  video::GenConfig gen_config() const {
    video::GenConfig g;
    g.seed = seed;
    g.num_videos = num_videos;
    g.num_classes = num_classes;
    g.frames = frames;
    g.gen_h = gen_h;
    g.gen_w = gen_w;
    g.crop = crop;
    g.channels = 1;
    g.train_fraction = train_fraction;
    return g;
  }

  EncoderConfig encoder_config() const {
    EncoderConfig e;
    e.in_channels = 1;
    e.clip_len = clip_len;
    e.conv_channels = conv_channels;
    e.head_hidden = head_hidden;
    e.embed_dim = embed_dim;
    e.num_degree_classes = med::num_degree_classes(clip_len);
    e.token_dim = token_dim;
    e.layers = tf_layers;
    e.heads = tf_heads;
    e.ffn_hidden = ffn_hidden;
    e.extractor_channels = extractor_channels;
    return e;
  }

  FramePretrainConfig fx_config() const {
    FramePretrainConfig f;
    f.epochs = fx_epochs;
    f.batch = fx_batch;
    f.lr = fx_lr;
    f.alpha = fx_alpha;
    f.tau = tau;
    f.queue_capacity = fx_queue;
    f.frame_stride = fx_stride;
    return f;
  }

  // the manifest stores every key in config-file syntax, so a manifest and a
  // config file resolve identically
  nlohmann::json to_json() const {
    nlohmann::json j;
    j["seed"] = std::to_string(seed);
    j["threads"] = std::to_string(threads);
    j["num_videos"] = std::to_string(num_videos);
    j["num_classes"] = std::to_string(num_classes);
    j["frames"] = std::to_string(frames);
    j["gen_h"] = std::to_string(gen_h);
    j["gen_w"] = std::to_string(gen_w);
    j["crop"] = std::to_string(crop);
    j["train_fraction"] = fmt_full(train_fraction);
    j["clip_len"] = std::to_string(clip_len);
    j["clip_stride"] = std::to_string(clip_stride);
    j["conv_channels"] = detail::int_list_str(conv_channels);
    j["head_hidden"] = std::to_string(head_hidden);
    j["embed_dim"] = std::to_string(embed_dim);
    j["token_dim"] = std::to_string(token_dim);
    j["tf_layers"] = std::to_string(tf_layers);
    j["tf_heads"] = std::to_string(tf_heads);
    j["ffn_hidden"] = std::to_string(ffn_hidden);
    j["extractor_channels"] = detail::int_list_str(extractor_channels);
    j["fx_epochs"] = std::to_string(fx_epochs);
    j["fx_batch"] = std::to_string(fx_batch);
    j["fx_lr"] = fmt_full(fx_lr);
    j["fx_alpha"] = fmt_full(fx_alpha);
    j["fx_queue"] = std::to_string(fx_queue);
    j["fx_stride"] = std::to_string(fx_stride);
    j["extractor_checkpoint"] = extractor_checkpoint;
    j["epochs"] = std::to_string(epochs);
    j["batch"] = std::to_string(batch);
    j["lr"] = fmt_full(lr);
    j["momentum"] = fmt_full(momentum);
    j["weight_decay"] = fmt_full(weight_decay);
    j["tau"] = fmt_full(tau);
    j["lambda"] = fmt_full(lambda);
    j["alpha"] = fmt_full(alpha);
    j["queue_capacity"] = std::to_string(queue_capacity);
    j["enable_sdp"] = enable_sdp ? "true" : "false";
    j["enable_transformer"] = enable_transformer ? "true" : "false";
    j["uniform_sampling"] = uniform_sampling ? "true" : "false";
    j["positive_pairs"] = std::to_string(positive_pairs);
    j["retrieval_clips"] = std::to_string(retrieval_clips);
    j["attention_clips"] = std::to_string(attention_clips);
    j["probe_repeats"] = std::to_string(probe_repeats);
    return j;
  }

  static RunConfig from_kv(KvConfig& kv) {
    RunConfig base;
    return from_kv(kv, base);
  }

  static RunConfig from_kv(KvConfig& kv, RunConfig c) {
    c.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<std::int64_t>(c.seed)));
    c.threads = static_cast<int>(kv.get_int("threads", c.threads));
    c.num_videos = static_cast<int>(kv.get_int("num_videos", c.num_videos));
    c.num_classes = static_cast<int>(kv.get_int("num_classes", c.num_classes));
    c.frames = static_cast<int>(kv.get_int("frames", c.frames));
    c.gen_h = static_cast<int>(kv.get_int("gen_h", c.gen_h));
    c.gen_w = static_cast<int>(kv.get_int("gen_w", c.gen_w));
    c.crop = static_cast<int>(kv.get_int("crop", c.crop));
    c.train_fraction = kv.get_double("train_fraction", c.train_fraction);
    c.clip_len = static_cast<int>(kv.get_int("clip_len", c.clip_len));
    c.clip_stride = static_cast<int>(kv.get_int("clip_stride", c.clip_stride));
    c.conv_channels = detail::parse_int_list(
        kv.get_string("conv_channels", detail::int_list_str(c.conv_channels)), "conv_channels");
    c.head_hidden = static_cast<int>(kv.get_int("head_hidden", c.head_hidden));
    c.embed_dim = static_cast<int>(kv.get_int("embed_dim", c.embed_dim));
    c.token_dim = static_cast<int>(kv.get_int("token_dim", c.token_dim));
    c.tf_layers = static_cast<int>(kv.get_int("tf_layers", c.tf_layers));
    c.tf_heads = static_cast<int>(kv.get_int("tf_heads", c.tf_heads));
    c.ffn_hidden = static_cast<int>(kv.get_int("ffn_hidden", c.ffn_hidden));
    c.extractor_channels = detail::parse_int_list(
        kv.get_string("extractor_channels", detail::int_list_str(c.extractor_channels)),
        "extractor_channels");
    c.fx_epochs = static_cast<int>(kv.get_int("fx_epochs", c.fx_epochs));
    c.fx_batch = static_cast<int>(kv.get_int("fx_batch", c.fx_batch));
    c.fx_lr = kv.get_double("fx_lr", c.fx_lr);
    c.fx_alpha = kv.get_double("fx_alpha", c.fx_alpha);
    c.fx_queue = static_cast<int>(kv.get_int("fx_queue", c.fx_queue));
    c.fx_stride = static_cast<int>(kv.get_int("fx_stride", c.fx_stride));
    c.extractor_checkpoint = kv.get_string("extractor_checkpoint", c.extractor_checkpoint);
    c.epochs = static_cast<int>(kv.get_int("epochs", c.epochs));
    c.batch = static_cast<int>(kv.get_int("batch", c.batch));
    c.lr = kv.get_double("lr", c.lr);
    c.momentum = kv.get_double("momentum", c.momentum);
    c.weight_decay = kv.get_double("weight_decay", c.weight_decay);
    c.tau = kv.get_double("tau", c.tau);
    c.lambda = kv.get_double("lambda", c.lambda);
    c.alpha = kv.get_double("alpha", c.alpha);
    c.queue_capacity = static_cast<int>(kv.get_int("queue_capacity", c.queue_capacity));
    c.enable_sdp = kv.get_bool("enable_sdp", c.enable_sdp);
    c.enable_transformer = kv.get_bool("enable_transformer", c.enable_transformer);
    c.uniform_sampling = kv.get_bool("uniform_sampling", c.uniform_sampling);
    c.positive_pairs = static_cast<int>(kv.get_int("positive_pairs", c.positive_pairs));
    c.retrieval_clips = static_cast<int>(kv.get_int("retrieval_clips", c.retrieval_clips));
    c.attention_clips = static_cast<int>(kv.get_int("attention_clips", c.attention_clips));
    c.probe_repeats = static_cast<int>(kv.get_int("probe_repeats", c.probe_repeats));
    kv.reject_unknown_keys();
    c.validate();
    return c;
  }

  static RunConfig from_json(const nlohmann::json& j) {
    KvConfig kv;
    for (auto it = j.begin(); it != j.end(); ++it)
      kv.set(it.key(), it.value().get<std::string>());
    return from_kv(kv);
  }

  static RunConfig from_checkpoint_manifest(const nlohmann::json& manifest) {
    if (!manifest.contains("meta") || !manifest.at("meta").contains("config"))
      throw DataError("checkpoint lacks an embedded run config");
    return from_json(manifest.at("meta").at("config"));
  }
};

struct EpochStats {
  int epoch = 0;
  double lr = 0;
  double nce = 0;
  double cls = 0;
  double total = 0;
  std::array<double, 4> sims{};  // mean cosines of the four positive pairs
};

inline CsvWriter metrics_csv(const std::vector<EpochStats>& stats) {
  CsvWriter csv({"epoch", "lr", "nce", "cls", "total", "sim_gq_gk", "sim_gq_tq", "sim_gq_tk",
                 "sim_tq_tk"});
  for (const auto& s : stats)
    csv.add_row({std::to_string(s.epoch), fmt_g(s.lr), fmt_g(s.nce), fmt_g(s.cls),
                 fmt_g(s.total), fmt_g(s.sims[0]), fmt_g(s.sims[1]), fmt_g(s.sims[2]),
                 fmt_g(s.sims[3])});
  return csv;
}

// owns the online/momentum 3D encoders, the transformer branch, the frozen
// frame extractor, the key queue and the optimizer; one instance per run
template <class R>
class Trainer {
 public:
  // pass `restore` to rebuild a trained model: construction skips extractor
  // pre-training and all weights come from the checkpoint
  Trainer(RunConfig cfg, const video::Dataset<R>& ds, const CheckpointFile* restore = nullptr)
      : cfg_(std::move(cfg)),
        ds_(&ds),
        queue_(cfg_.queue_capacity, cfg_.embed_dim),
        rng_(derive_seed(cfg_.seed, "ssl-train", 0)) {
    cfg_.validate();
    const auto ecfg = cfg_.encoder_config();

    Rng g_rng(derive_seed(cfg_.seed, "g-encoder", 0));
    online_ = Cnn3dEncoder<R>::create(ecfg, true, g_rng);
    Rng m_rng(derive_seed(cfg_.seed, "g-momentum", 0));
    target_ = Cnn3dEncoder<R>::create(ecfg, false, m_rng);
    target_.backbone.copy_from(online_.backbone);

    if (cfg_.enable_transformer) {
      Rng fx_rng(derive_seed(cfg_.seed, "extractor", 0));
      fx_ = std::make_shared<FrameExtractor<R>>(
          FrameExtractor<R>::create(1, ecfg.extractor_channels, fx_rng));
      if (restore == nullptr) {
        if (cfg_.extractor_checkpoint.empty()) {
          pretrain_frame_extractor(*fx_, ds, cfg_.fx_config(), cfg_.seed);
        } else {
          auto file = open_checkpoint(cfg_.extractor_checkpoint);
          load_checkpoint_into<R>(file, {{"fx", &fx_->params}});
        }
      }
      Rng t_rng(derive_seed(cfg_.seed, "transformer", 0));
      transformer_ = std::make_unique<TransformerEncoder<R>>(
          TransformerEncoder<R>::create(ecfg, fx_, t_rng));
    }
    if (restore != nullptr) load(*restore);

    typename Sgd<R>::Config ocfg;
    ocfg.lr_base = cfg_.lr;
    ocfg.momentum = cfg_.momentum;
    ocfg.weight_decay = cfg_.weight_decay;
    ocfg.total_epochs = std::max(1, cfg_.epochs);
    opt_ = std::make_unique<Sgd<R>>(ocfg);
  }

  const RunConfig& config() const { return cfg_; }
  const video::Dataset<R>& dataset() const { return *ds_; }
  const Cnn3dEncoder<R>& online() const { return online_; }
  const Cnn3dEncoder<R>& target() const { return target_; }
  bool has_transformer() const { return transformer_ != nullptr; }
  const TransformerEncoder<R>& transformer() const {
    if (!transformer_) throw DataError("this run has the transformer branch disabled");
    return *transformer_;
  }
  const std::vector<EpochStats>& stats() const { return stats_; }
  const EmbeddingQueue<R>& queue() const { return queue_; }

  // full training; returns per-epoch means
  const std::vector<EpochStats>& train() {
    const auto train_ids = ds_->split_ids(true);
    if (static_cast<int>(train_ids.size()) < cfg_.batch)
      throw DataError("train split smaller than one batch");
    for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
      EpochStats acc;
      acc.epoch = epoch;
      acc.lr = opt_->lr_at(epoch);
      acc.sims.fill(0.0);
      int steps = 0;
      auto order = rng_.permutation(static_cast<int>(train_ids.size()));
      const std::size_t bsz = static_cast<std::size_t>(cfg_.batch);
      for (std::size_t base = 0; base + bsz <= order.size(); base += bsz) {
        std::vector<int> vids;
        for (std::size_t b = 0; b < bsz; ++b) vids.push_back(train_ids[order[base + b]]);
        const auto st = step(epoch, vids);
        acc.nce += st.nce;
        acc.cls += st.cls;
        acc.total += st.total;
        for (int i = 0; i < 4; ++i) acc.sims[i] += st.sims[i];
        ++steps;
      }
      acc.nce /= steps;
      acc.cls /= steps;
      acc.total /= steps;
      for (auto& s : acc.sims) s /= steps;
      stats_.push_back(acc);
    }
    return stats_;
  }

  void save(const std::string& path, const nlohmann::json& extra_meta) const {
    nlohmann::json meta;
    meta["config"] = cfg_.to_json();
    meta["stage"] = "ssl";
    meta["epochs_completed"] = static_cast<int>(stats_.size());
    for (auto it = extra_meta.begin(); it != extra_meta.end(); ++it) meta[it.key()] = it.value();
    CheckpointSections<R> sections;
    sections.push_back({"g", &online_.backbone});
    sections.push_back({"g_cls", &online_.cls_params});
    sections.push_back({"momentum", &target_.backbone});
    if (transformer_) {
      sections.push_back({"fx", &fx_->params});
      sections.push_back({"t", &transformer_->params});
    }
    save_checkpoint<R>(path, sections, meta);
  }

  void load(const CheckpointFile& file) {
    std::vector<std::pair<std::string, ParamRegistry<R>*>> sections;
    sections.push_back({"g", &online_.backbone});
    sections.push_back({"g_cls", &online_.cls_params});
    sections.push_back({"momentum", &target_.backbone});
    if (transformer_) {
      sections.push_back({"fx", &fx_->params});
      sections.push_back({"t", &transformer_->params});
    }
    load_checkpoint_into<R>(file, sections);
  }

 private:
  struct StepStats {
    double nce = 0, cls = 0, total = 0;
    std::array<double, 4> sims{};
  };

  StepStats step(int epoch, const std::vector<int>& vids) {
    try {
      return step_inner(epoch, vids);
    } catch (const NumericFault& e) {
      std::string ids;
      for (int v : vids) ids += std::to_string(v) + " ";
      throw NumericFault("ssl step diverged at epoch " + std::to_string(epoch) + ", videos [ " +
                         ids + "]: " + e.what());
    }
  }

  StepStats step_inner(int epoch, const std::vector<int>& vids) {
    std::vector<EmbeddingSet<R>> batch;
    std::vector<Tensor<R>> logit_rows;
    std::vector<int> labels;
    std::vector<Tensor<R>> new_keys;
    batch.reserve(vids.size());

    for (int vid : vids) {
      const auto& v = ds_->videos[vid];
      // the two views are independently sampled clips of the same video, so
      // positives must match across temporal jitter, not just spatial crops
      auto clip_q = video::sample_clip(v, cfg_.clip_len, cfg_.clip_stride, rng_);
      auto clip_k = video::sample_clip(v, cfg_.clip_len, cfg_.clip_stride, rng_);
      const auto shuffle = cfg_.uniform_sampling
                               ? med::sample_uniform_degree(cfg_.clip_len, rng_)
                               : med::sample_random_shuffle(cfg_.clip_len, rng_);
      auto shuffled_q = video::apply_shuffle(clip_q, shuffle.perm);
      const auto aug_q = video::draw_augmentation(v.h, v.w, cfg_.crop, rng_);
      const auto aug_k = video::draw_augmentation(v.h, v.w, cfg_.crop, rng_);
      auto xq = video::augment(clip_q, aug_q);
      auto xsq = video::augment(shuffled_q, aug_q);

      EmbeddingSet<R> e;
      auto g = online_.encode(video::clip_to_tensor(xq), video::clip_to_tensor(xsq));
      e.gq = g.embedding;
      if (cfg_.enable_sdp) {
        logit_rows.push_back(g.logits);
        labels.push_back(shuffle.label);
      }
      if (cfg_.positive_pairs > 0) {
        auto shuffled_k = video::apply_shuffle(clip_k, shuffle.perm);
        auto xk = video::augment(clip_k, aug_k);
        auto xsk = video::augment(shuffled_k, aug_k);
        {
          NoGrad ng;
          e.gk = target_.encode(video::clip_to_tensor(xk), video::clip_to_tensor(xsk)).embedding;
        }
        new_keys.push_back(e.gk);
        if (cfg_.enable_transformer) {
          e.tq = transformer_->encode(xq, xsq);
          e.tk = transformer_->encode(xk, xsk);
        }
      }
      batch.push_back(std::move(e));
    }

    StepStats st;
    Tensor<R> total;
    bool have_total = false;
    if (cfg_.positive_pairs > 0) {
      auto nce = nce_loss(batch, queue_, static_cast<R>(cfg_.tau), cfg_.positive_pairs);
      st.nce = static_cast<double>(nce.item());
      total = nce;
      have_total = true;
    }
    if (cfg_.enable_sdp) {
      auto cls = sdp_loss(stack_rows(logit_rows), labels);
      st.cls = static_cast<double>(cls.item());
      auto weighted = scale(cls, static_cast<R>(cfg_.lambda));
      total = have_total ? add(total, weighted) : weighted;
      have_total = true;
    }
    st.total = static_cast<double>(total.item());
    if (cfg_.positive_pairs > 0) {
      st.sims = mean_pair_similarities(batch, cfg_.enable_transformer);
    } else {
      st.sims.fill(std::numeric_limits<double>::quiet_NaN());
    }

    online_.backbone.zero_grad();
    online_.cls_params.zero_grad();
    if (transformer_) transformer_->params.zero_grad();
    backward(total);

    online_.backbone.ensure_grads();
    opt_->step(online_.backbone, epoch);
    if (cfg_.enable_sdp) {
      online_.cls_params.ensure_grads();
      opt_->step(online_.cls_params, epoch);
    }
    if (cfg_.enable_transformer) {
      transformer_->params.ensure_grads();
      opt_->step(transformer_->params, epoch);
    }

    if (cfg_.positive_pairs > 0) {
      momentum_update(online_.backbone, target_.backbone, cfg_.alpha);
      for (const auto& k : new_keys) enqueue_key(queue_, k);
    }
    return st;
  }

  RunConfig cfg_;
  const video::Dataset<R>* ds_;
  Cnn3dEncoder<R> online_;
  Cnn3dEncoder<R> target_;
  std::shared_ptr<FrameExtractor<R>> fx_;
  std::unique_ptr<TransformerEncoder<R>> transformer_;
  std::unique_ptr<Sgd<R>> opt_;
  EmbeddingQueue<R> queue_;
  Rng rng_;
  std::vector<EpochStats> stats_;
};

}  // namespace cacl
