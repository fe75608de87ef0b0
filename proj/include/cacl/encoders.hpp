#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "cacl/common.hpp"
#include "cacl/nn.hpp"
#include "cacl/ops.hpp"
#include "cacl/optim.hpp"
#include "cacl/rng.hpp"
#include "cacl/tensor.hpp"
#include "cacl/video.hpp"

namespace cacl {

struct EncoderConfig {
  int in_channels = 1;
  int clip_len = 16;
  std::vector<int> conv_channels = {8, 16, 32};
  int head_hidden = 64;
  int embed_dim = 32;
  int num_degree_classes = 16;
  int token_dim = 32;
  int layers = 2;
  int heads = 2;
  int ffn_hidden = 64;
  std::vector<int> extractor_channels = {8, 16};

  void validate() const {
    if (in_channels <= 0 || clip_len <= 0) throw ConfigError("encoder: nonpositive input dims");
    if (conv_channels.empty()) throw ConfigError("encoder: empty conv channel list");
    if (head_hidden <= 0 || embed_dim <= 0) throw ConfigError("encoder: nonpositive head dims");
    if (num_degree_classes <= 0) throw ConfigError("encoder: nonpositive class count");
    if (token_dim <= 0 || layers <= 0 || heads <= 0 || ffn_hidden <= 0)
      throw ConfigError("encoder: nonpositive transformer dims");
    if (token_dim % heads != 0) throw ConfigError("encoder: token_dim not divisible by heads");
    if (extractor_channels.size() != 2) throw ConfigError("encoder: extractor needs 2 conv layers");
  }
};

// three conv3d+relu+maxpool blocks followed by a global spatio-temporal max pool
template <class R>
struct Cnn3dTrunk {
  std::vector<Tensor<R>> conv_w;
  std::vector<Tensor<R>> conv_b;
  int out_dim = 0;

  static Cnn3dTrunk create(const std::string& name, int in_channels,
                           const std::vector<int>& channels, ParamRegistry<R>& reg, Rng& rng) {
    Cnn3dTrunk t;
    int cin = in_channels;
    for (std::size_t i = 0; i < channels.size(); ++i) {
      const int cout = channels[i];
      const int fan_in = cin * 3 * 3 * 3;
      auto w = kaiming_uniform<R>({cout, cin, 3, 3, 3}, fan_in, rng);
      auto b = zeros_param<R>({cout});
      reg.add(name + ".conv" + std::to_string(i) + ".w", w);
      reg.add(name + ".conv" + std::to_string(i) + ".b", b);
      t.conv_w.push_back(w);
      t.conv_b.push_back(b);
      cin = cout;
    }
    t.out_dim = cin;
    return t;
  }

  // [C,T,H,W] -> feature map before the global pool
  Tensor<R> feature_map(const Tensor<R>& clip) const {
    Tensor<R> x = clip;
    Conv3dSpec spec;
    spec.st = spec.sh = spec.sw = 1;
    spec.pt = spec.ph = spec.pw = 1;
    for (std::size_t i = 0; i < conv_w.size(); ++i) {
      x = relu(conv3d(x, conv_w[i], conv_b[i], spec));
      x = max_pool3d(x, 2, 2, 2, 2, 2, 2);
    }
    return x;
  }

  // [C,T,H,W] -> [out_dim], max over the volume; the retrieval feature
  Tensor<R> pooled(const Tensor<R>& clip) const { return global_max_pool3d(feature_map(clip)); }

  // [C,T,H,W] -> [out_dim], mean over the volume; feeds the heads. Averaging
  // keeps activation counts, which the degree head needs to grade shuffles.
  Tensor<R> pooled_avg(const Tensor<R>& clip) const {
    return global_avg_pool3d(feature_map(clip));
  }
};

template <class R>
struct GOutputs {
  Tensor<R> embedding;  // [embed_dim]
  Tensor<R> logits;     // [num_degree_classes]
  Tensor<R> features;   // [2 * trunk_dim], concat of ordered and shuffled trunk features
};

// 3D-CNN encoder: shared trunk over ordered and shuffled clips, contrast head and
// shuffle-degree classification head over the concatenated pooled features
template <class R>
struct Cnn3dEncoder {
  Cnn3dTrunk<R> trunk;
  Ffn2<R> contrast_head;
  Ffn2<R> cls_head;
  ParamRegistry<R> backbone;  // trunk + contrast head (mirrored by the momentum twin)
  ParamRegistry<R> cls_params;
  bool has_cls = false;

  static Cnn3dEncoder create(const EncoderConfig& cfg, bool with_cls_head, Rng& rng) {
    cfg.validate();
    Cnn3dEncoder e;
    e.trunk = Cnn3dTrunk<R>::create("trunk", cfg.in_channels, cfg.conv_channels, e.backbone, rng);
    const int feat = 2 * e.trunk.out_dim;
    e.contrast_head =
        Ffn2<R>::create("contrast", feat, cfg.head_hidden, cfg.embed_dim, rng, e.backbone);
    e.has_cls = with_cls_head;
    if (with_cls_head) {
      e.cls_head = Ffn2<R>::create("cls", feat, cfg.head_hidden, cfg.num_degree_classes, rng,
                                   e.cls_params);
      // zero output layer: degree logits start uniform, so the untrained
      // cross-entropy equals log(num classes) exactly
      auto& w2 = e.cls_head.l2.w.mutable_data();
      std::fill(w2.begin(), w2.end(), R(0));
    }
    return e;
  }

  GOutputs<R> encode(const Tensor<R>& ordered, const Tensor<R>& shuffled) const {
    auto f = trunk.pooled_avg(ordered);
    auto fs = trunk.pooled_avg(shuffled);
    auto cat = concat_vec(f, fs);
    GOutputs<R> out;
    out.features = cat;
    out.embedding = contrast_head.apply_vec(cat);
    if (has_cls) out.logits = cls_head.apply_vec(cat);
    return out;
  }
};

// small 2D CNN producing a per-frame feature vector; frozen during SSL training
template <class R>
struct FrameExtractor {
  std::vector<Tensor<R>> conv_w;
  std::vector<Tensor<R>> conv_b;
  ParamRegistry<R> params;
  int out_dim = 0;

  static FrameExtractor create(int in_channels, const std::vector<int>& channels, Rng& rng) {
    FrameExtractor fx;
    int cin = in_channels;
    for (std::size_t i = 0; i < channels.size(); ++i) {
      const int cout = channels[i];
      auto w = kaiming_uniform<R>({cout, cin, 3, 3}, cin * 3 * 3, rng);
      auto b = zeros_param<R>({cout});
      fx.params.add("fx.conv" + std::to_string(i) + ".w", w);
      fx.params.add("fx.conv" + std::to_string(i) + ".b", b);
      fx.conv_w.push_back(w);
      fx.conv_b.push_back(b);
      cin = cout;
    }
    fx.out_dim = cin;
    return fx;
  }

  // [C,H,W] -> [out_dim]; first conv has stride 2
  Tensor<R> forward(const Tensor<R>& frame) const {
    Conv2dSpec s0;
    s0.sh = s0.sw = 2;
    s0.ph = s0.pw = 1;
    Tensor<R> x = relu(conv2d(frame, conv_w[0], conv_b[0], s0));
    Conv2dSpec s1;
    s1.ph = s1.pw = 1;
    x = relu(conv2d(x, conv_w[1], conv_b[1], s1));
    x = max_pool2d(x, 2, 2, 2, 2);
    const auto& sh = x.shape();
    return global_max_pool3d(reshape(x, {sh[0], 1, sh[1], sh[2]}));
  }
};

// per-head attention matrices in (layer, head) order, one entry per softmax
template <class R>
struct AttnCapture {
  std::vector<Tensor<R>> mats;
  int layers = 0;
  int heads = 0;
};

// pre-norm transformer over [class token; ordered frame tokens; shuffled frame tokens]
template <class R>
struct TransformerEncoder {
  struct Layer {
    Tensor<R> ln1_g, ln1_b, ln2_g, ln2_b;
    Linear<R> wq, wk, wv, wo;
    Linear<R> ffn1, ffn2;
  };

  std::shared_ptr<FrameExtractor<R>> extractor;
  Linear<R> token_proj;
  Tensor<R> class_emb;  // [token_dim]
  Tensor<R> pos_emb;    // [2 * clip_len + 1, token_dim]
  std::vector<Layer> layers;
  Tensor<R> final_g, final_b;
  Linear<R> out_proj;
  ParamRegistry<R> params;
  int clip_len = 0;
  int heads = 0;
  int token_dim = 0;

  static TransformerEncoder create(const EncoderConfig& cfg,
                                   std::shared_ptr<FrameExtractor<R>> fx, Rng& rng) {
    cfg.validate();
    if (!fx) throw ConfigError("transformer: missing frame extractor");
    TransformerEncoder t;
    t.extractor = std::move(fx);
    t.clip_len = cfg.clip_len;
    t.heads = cfg.heads;
    t.token_dim = cfg.token_dim;
    const int d = cfg.token_dim;
    t.token_proj = Linear<R>::create("t.proj", t.extractor->out_dim, d, rng, t.params);
    t.class_emb = normal_param<R>({d}, R(0.02), rng);
    t.params.add("t.class_emb", t.class_emb);
    t.pos_emb = normal_param<R>({2 * cfg.clip_len + 1, d}, R(0.02), rng);
    t.params.add("t.pos_emb", t.pos_emb);
    for (int l = 0; l < cfg.layers; ++l) {
      Layer lay;
      const std::string p = "t.layer" + std::to_string(l);
      lay.ln1_g = Tensor<R>::param({d}, std::vector<R>(d, R(1)));
      lay.ln1_b = zeros_param<R>({d});
      lay.ln2_g = Tensor<R>::param({d}, std::vector<R>(d, R(1)));
      lay.ln2_b = zeros_param<R>({d});
      t.params.add(p + ".ln1.g", lay.ln1_g);
      t.params.add(p + ".ln1.b", lay.ln1_b);
      t.params.add(p + ".ln2.g", lay.ln2_g);
      t.params.add(p + ".ln2.b", lay.ln2_b);
      lay.wq = Linear<R>::create(p + ".wq", d, d, rng, t.params);
      lay.wk = Linear<R>::create(p + ".wk", d, d, rng, t.params);
      lay.wv = Linear<R>::create(p + ".wv", d, d, rng, t.params);
      lay.wo = Linear<R>::create(p + ".wo", d, d, rng, t.params);
      lay.ffn1 = Linear<R>::create(p + ".ffn1", d, cfg.ffn_hidden, rng, t.params);
      lay.ffn2 = Linear<R>::create(p + ".ffn2", cfg.ffn_hidden, d, rng, t.params);
      t.layers.push_back(lay);
    }
    t.final_g = Tensor<R>::param({d}, std::vector<R>(d, R(1)));
    t.final_b = zeros_param<R>({d});
    t.params.add("t.final.g", t.final_g);
    t.params.add("t.final.b", t.final_b);
    t.out_proj = Linear<R>::create("t.out", d, cfg.embed_dim, rng, t.params);
    return t;
  }

  Tensor<R> attention_block(const Tensor<R>& x, const Layer& lay, AttnCapture<R>* cap) const {
    auto xa = layer_norm(x, lay.ln1_g, lay.ln1_b);
    auto q = lay.wq(xa);
    auto k = lay.wk(xa);
    auto v = lay.wv(xa);
    const int dh = token_dim / heads;
    const R inv_sqrt = R(1) / std::sqrt(static_cast<R>(dh));
    std::vector<Tensor<R>> head_outs;
    for (int h = 0; h < heads; ++h) {
      auto qh = cols(q, h * dh, (h + 1) * dh);
      auto kh = cols(k, h * dh, (h + 1) * dh);
      auto vh = cols(v, h * dh, (h + 1) * dh);
      auto attn = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt));
      if (cap) cap->mats.push_back(attn);
      head_outs.push_back(matmul(attn, vh));
    }
    return lay.wo(concat_cols(head_outs));
  }

  // extractor features are computed without gradients (frozen backbone)
  Tensor<R> encode(const video::Clip<R>& ordered, const video::Clip<R>& shuffled,
                   AttnCapture<R>* cap = nullptr) const {
    if (ordered.n != clip_len || shuffled.n != clip_len)
      throw DataError("transformer: clip length mismatch");
    std::vector<Tensor<R>> feats;
    feats.reserve(2 * static_cast<std::size_t>(clip_len));
    {
      NoGrad ng;
      for (int t = 0; t < clip_len; ++t)
        feats.push_back(extractor->forward(video::frame_to_tensor(ordered, t)));
      for (int t = 0; t < clip_len; ++t)
        feats.push_back(extractor->forward(video::frame_to_tensor(shuffled, t)));
    }
    auto tokens = token_proj(stack_rows(feats));                       // [2n, d]
    auto cls_row = reshape(class_emb, {1, token_dim});                 // [1, d]
    auto x = add(concat_rows<R>({cls_row, tokens}), pos_emb);          // [2n+1, d]
    if (cap) {
      cap->layers = static_cast<int>(layers.size());
      cap->heads = heads;
    }
    for (const auto& lay : layers) {
      x = add(x, attention_block(x, lay, cap));
      auto xf = layer_norm(x, lay.ln2_g, lay.ln2_b);
      x = add(x, lay.ffn2(relu(lay.ffn1(xf))));
    }
    auto xn = layer_norm(x, final_g, final_b);
    return out_proj.apply_vec(row(xn, 0));
  }
};

struct FramePretrainConfig {
  int epochs = 4;
  int batch = 32;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double alpha = 0.99;  // momentum coefficient for the key extractor
  double tau = 1.0 / 0.07;
  int queue_capacity = 128;
  int frame_stride = 10;
  int proj_dim = 16;
};

// instance discrimination over single frames: two augmented views, momentum key
// extractor, FIFO queue of past keys as negatives
template <class R>
void pretrain_frame_extractor(FrameExtractor<R>& fx, const video::Dataset<R>& ds,
                              const FramePretrainConfig& cfg, uint64_t seed) {
  if (cfg.epochs < 0 || cfg.batch <= 0 || cfg.queue_capacity <= 0)
    throw ConfigError("frame pretrain: bad epochs/batch/queue");
  auto samples = video::sample_frames(ds, cfg.frame_stride, true);
  if (samples.empty()) throw DataError("frame pretrain: no frames sampled");

  Rng init_rng(derive_seed(seed, "fx-pretrain-init", 0));
  FrameExtractor<R> key_fx = FrameExtractor<R>::create(
      ds.cfg.channels, {fx.conv_w[0].shape()[0], fx.conv_w[1].shape()[0]}, init_rng);
  key_fx.params.copy_from(fx.params);

  ParamRegistry<R> head_params;
  Rng head_rng(derive_seed(seed, "fx-pretrain-head", 0));
  auto q_head = Linear<R>::create("fxh", fx.out_dim, cfg.proj_dim, head_rng, head_params);
  ParamRegistry<R> key_head_params;
  Rng key_head_rng(derive_seed(seed, "fx-pretrain-head", 0));
  auto k_head = Linear<R>::create("fxh", fx.out_dim, cfg.proj_dim, key_head_rng, key_head_params);
  key_head_params.copy_from(head_params);

  typename Sgd<R>::Config opt_cfg;
  opt_cfg.lr_base = cfg.lr;
  opt_cfg.momentum = cfg.momentum;
  opt_cfg.weight_decay = cfg.weight_decay;
  opt_cfg.total_epochs = std::max(1, cfg.epochs);
  Sgd<R> opt(opt_cfg);

  std::vector<std::vector<R>> queue;  // unit-norm key projections, oldest first
  Rng rng(derive_seed(seed, "fx-pretrain", 0));

  auto view = [&](const video::FrameSample<R>& s, Rng& r) {
    video::Clip<R> one;
    one.n = 1;
    one.h = ds.cfg.gen_h;
    one.w = ds.cfg.gen_w;
    one.channels = ds.cfg.channels;
    one.pixels = s.pixels;
    auto aug = video::draw_augmentation(one.h, one.w, ds.cfg.crop, r);
    return video::frame_to_tensor(video::augment(one, aug), 0);
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto order = rng.permutation(samples.size());
    const std::size_t bsz = static_cast<std::size_t>(cfg.batch);
    for (std::size_t base = 0; base + bsz <= order.size(); base += bsz) {
      std::vector<Tensor<R>> logits_rows;
      std::vector<int> labels;
      std::vector<std::vector<R>> new_keys;
      for (std::size_t b = 0; b < bsz; ++b) {
        const auto& s = samples[order[base + b]];
        auto xq = view(s, rng);
        auto xk = view(s, rng);
        auto zq = l2_normalize(q_head.apply_vec(fx.forward(xq)));
        Tensor<R> zk;
        {
          NoGrad ng;
          zk = l2_normalize(k_head.apply_vec(key_fx.forward(xk)));
        }
        std::vector<Tensor<R>> sims;
        sims.push_back(dot(zq, Tensor<R>::from(zk.shape(), zk.data())));
        for (const auto& neg : queue) sims.push_back(dot(zq, Tensor<R>::from({cfg.proj_dim}, neg)));
        logits_rows.push_back(scale(concat_vecs(sims), static_cast<R>(cfg.tau)));
        labels.push_back(0);
        new_keys.push_back(zk.data());
      }
      auto logits = stack_rows(logits_rows);
      auto loss = cross_entropy_with_logits(logits, labels);
      head_params.zero_grad();
      fx.params.zero_grad();
      backward(loss);
      fx.params.ensure_grads();
      head_params.ensure_grads();
      opt.step(fx.params, epoch);
      opt.step(head_params, epoch);
      momentum_update(fx.params, key_fx.params, static_cast<R>(cfg.alpha));
      momentum_update(head_params, key_head_params, static_cast<R>(cfg.alpha));
      for (auto& kvec : new_keys) {
        queue.push_back(std::move(kvec));
        if (static_cast<int>(queue.size()) > cfg.queue_capacity) queue.erase(queue.begin());
      }
    }
  }
}

}  // namespace cacl
