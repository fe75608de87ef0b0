#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "cacl/parallel.hpp"
#include "cacl/train.hpp"

namespace cacl {

inline const std::vector<int>& retrieval_ks() {
  static const std::vector<int> ks = {1, 5, 10, 20, 50};
  return ks;
}

// mean pooled-trunk feature over uniformly spaced, center-cropped clips
template <class R>
std::vector<double> video_feature(const Cnn3dEncoder<R>& enc, const video::Video<R>& v,
                                  const RunConfig& cfg) {
  const int starts = video::num_clip_starts(v, cfg.clip_len, cfg.clip_stride);
  if (starts < cfg.retrieval_clips)
    throw DataError("video " + std::to_string(v.id) + " offers " + std::to_string(starts) +
                    " clip starts but evaluation needs " + std::to_string(cfg.retrieval_clips));
  NoGrad ng;
  const auto ap = video::center_augmentation(v.h, v.w, cfg.crop);
  std::vector<double> feat;
  for (int c = 0; c < cfg.retrieval_clips; ++c) {
    const int start =
        cfg.retrieval_clips == 1 ? (starts - 1) / 2 : c * (starts - 1) / (cfg.retrieval_clips - 1);
    auto clip = video::clip_at(v, start, cfg.clip_len, cfg.clip_stride);
    auto pooled = enc.trunk.pooled(video::clip_to_tensor(video::augment(clip, ap)));
    if (feat.empty()) feat.assign(pooled.numel(), 0.0);
    for (std::size_t i = 0; i < feat.size(); ++i)
      feat[i] += static_cast<double>(pooled.data()[i]);
  }
  for (auto& f : feat) f /= cfg.retrieval_clips;
  return feat;
}

namespace detail {

template <class R>
std::vector<std::vector<double>> video_features(const Cnn3dEncoder<R>& enc,
                                                const video::Dataset<R>& ds, const RunConfig& cfg,
                                                const std::vector<int>& ids) {
  std::vector<std::vector<double>> feats(ids.size());
  parallel_for(ids.size(), [&](std::size_t i) {
    feats[i] = video_feature(enc, ds.videos[ids[i]], cfg);
  });
  return feats;
}

inline void l2_normalize_inplace(std::vector<double>& v) {
  double n2 = 0;
  for (double x : v) n2 += x * x;
  const double n = std::sqrt(n2);
  if (n > 0)
    for (double& x : v) x /= n;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace detail

struct RetrievalReport {
  std::vector<int> ks;
  std::vector<double> recall;                  // overall recall@k, aligned with ks
  std::vector<std::vector<double>> per_class;  // [k index][class id]
  std::vector<int> class_queries;              // queries per class
  int queries = 0;
  int gallery = 0;
};

// nearest-neighbor retrieval: held-out queries against train-split gallery,
// cosine over mean clip features; a hit is any same-class gallery video in
// the top k
template <class R>
RetrievalReport evaluate_retrieval(const Cnn3dEncoder<R>& enc, const video::Dataset<R>& ds,
                                   const RunConfig& cfg) {
  const auto gallery_ids = ds.split_ids(true);
  const auto query_ids = ds.split_ids(false);
  if (gallery_ids.empty() || query_ids.empty())
    throw DataError("retrieval needs non-empty train and held-out splits");

  auto gallery = detail::video_features(enc, ds, cfg, gallery_ids);
  auto queries = detail::video_features(enc, ds, cfg, query_ids);
  for (auto& f : gallery) detail::l2_normalize_inplace(f);
  for (auto& f : queries) detail::l2_normalize_inplace(f);

  RetrievalReport rep;
  rep.ks = retrieval_ks();
  rep.queries = static_cast<int>(query_ids.size());
  rep.gallery = static_cast<int>(gallery_ids.size());
  const int num_classes = ds.cfg.num_classes;
  rep.recall.assign(rep.ks.size(), 0.0);
  rep.per_class.assign(rep.ks.size(), std::vector<double>(num_classes, 0.0));
  rep.class_queries.assign(num_classes, 0);

  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    const int q_class = ds.videos[query_ids[qi]].class_id;
    rep.class_queries[q_class]++;
    std::vector<std::pair<double, int>> ranked(gallery.size());
    for (std::size_t gi = 0; gi < gallery.size(); ++gi)
      ranked[gi] = {detail::cosine(queries[qi], gallery[gi]), static_cast<int>(gi)};
    // ties broken by gallery order so rankings are reproducible
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    int matched_at = -1;  // rank of the first same-class gallery video
    for (std::size_t r = 0; r < ranked.size(); ++r) {
      if (ds.videos[gallery_ids[ranked[r].second]].class_id == q_class) {
        matched_at = static_cast<int>(r);
        break;
      }
    }
    for (std::size_t ki = 0; ki < rep.ks.size(); ++ki) {
      if (matched_at >= 0 && matched_at < rep.ks[ki]) {
        rep.recall[ki] += 1.0;
        rep.per_class[ki][q_class] += 1.0;
      }
    }
  }

  for (std::size_t ki = 0; ki < rep.ks.size(); ++ki) {
    rep.recall[ki] /= rep.queries;
    for (int c = 0; c < num_classes; ++c)
      if (rep.class_queries[c] > 0) rep.per_class[ki][c] /= rep.class_queries[c];
  }
  return rep;
}

inline CsvWriter retrieval_csv(const RetrievalReport& rep) {
  std::vector<std::string> header = {"k", "recall"};
  const std::size_t classes = rep.per_class.empty() ? 0 : rep.per_class[0].size();
  for (std::size_t c = 0; c < classes; ++c) header.push_back("class_" + std::to_string(c));
  CsvWriter csv(header);
  for (std::size_t ki = 0; ki < rep.ks.size(); ++ki) {
    std::vector<std::string> row = {std::to_string(rep.ks[ki]), fmt_g(rep.recall[ki])};
    for (double v : rep.per_class[ki]) row.push_back(fmt_g(v));
    csv.add_row(row);
  }
  return csv;
}

// accuracy of the trained degree head on fresh uniform-degree shuffles of
// held-out videos
template <class R>
double probe_shuffle_degree(const Cnn3dEncoder<R>& enc, const video::Dataset<R>& ds,
                            const RunConfig& cfg) {
  if (!enc.has_cls) throw DataError("degree probe needs an encoder with a degree head");
  Rng rng(derive_seed(cfg.seed, "sdp-probe", 0));
  NoGrad ng;
  const auto ids = ds.split_ids(false);
  if (ids.empty()) throw DataError("degree probe needs a held-out split");
  int correct = 0, total = 0;
  for (int id : ids) {
    const auto& v = ds.videos[id];
    const auto ap = video::center_augmentation(v.h, v.w, cfg.crop);
    for (int rep = 0; rep < cfg.probe_repeats; ++rep) {
      auto clip = video::sample_clip(v, cfg.clip_len, cfg.clip_stride, rng);
      const auto draw = med::sample_uniform_degree(cfg.clip_len, rng);
      auto shuffled = video::apply_shuffle(clip, draw.perm);
      auto out = enc.encode(video::clip_to_tensor(video::augment(clip, ap)),
                            video::clip_to_tensor(video::augment(shuffled, ap)));
      const auto& lg = out.logits.data();
      int arg = 0;
      for (int i = 1; i < out.logits.numel(); ++i)
        if (lg[i] > lg[arg]) arg = i;
      correct += arg == draw.label ? 1 : 0;
      ++total;
    }
  }
  return static_cast<double>(correct) / total;
}

// motion-class accuracy of a softmax regression trained on frozen video
// features; zero init keeps the convex fit fully deterministic
template <class R>
double probe_linear_classes(const Cnn3dEncoder<R>& enc, const video::Dataset<R>& ds,
                            const RunConfig& cfg, int iters = 300, double lr = 0.5) {
  const auto train_ids = ds.split_ids(true);
  const auto test_ids = ds.split_ids(false);
  if (train_ids.empty() || test_ids.empty()) throw DataError("linear probe needs both splits");
  auto train_f = detail::video_features(enc, ds, cfg, train_ids);
  auto test_f = detail::video_features(enc, ds, cfg, test_ids);
  for (auto& f : train_f) detail::l2_normalize_inplace(f);
  for (auto& f : test_f) detail::l2_normalize_inplace(f);

  const int dim = static_cast<int>(train_f[0].size());
  const int classes = ds.cfg.num_classes;
  std::vector<double> xv;
  std::vector<int> yv;
  for (std::size_t i = 0; i < train_f.size(); ++i) {
    xv.insert(xv.end(), train_f[i].begin(), train_f[i].end());
    yv.push_back(ds.videos[train_ids[i]].class_id);
  }
  auto x = Tensor<double>::from({static_cast<int>(train_f.size()), dim}, xv);
  auto w = Tensor<double>::param({dim, classes}, std::vector<double>(dim * classes, 0.0));
  auto b = Tensor<double>::param({classes}, std::vector<double>(classes, 0.0));
  typename Sgd<double>::Config scfg;
  scfg.lr_base = lr;
  scfg.momentum = 0.9;
  scfg.weight_decay = 1e-4;
  scfg.total_epochs = iters;
  Sgd<double> opt(scfg);
  ParamRegistry<double> reg;
  reg.add("probe.w", w);
  reg.add("probe.b", b);
  for (int it = 0; it < iters; ++it) {
    reg.zero_grad();
    auto loss = cross_entropy_with_logits(add_rowvec(matmul(x, w), b), yv);
    backward(loss);
    opt.step(reg, it);
  }

  NoGrad ng;
  int correct = 0;
  for (std::size_t i = 0; i < test_f.size(); ++i) {
    int arg = 0;
    double best = -1e300;
    for (int c = 0; c < classes; ++c) {
      double s = b.data()[c];
      for (int d = 0; d < dim; ++d) s += test_f[i][d] * w.data()[d * classes + c];
      if (s > best) {
        best = s;
        arg = c;
      }
    }
    correct += arg == ds.videos[test_ids[i]].class_id ? 1 : 0;
  }
  return static_cast<double>(correct) / test_ids.size();
}

struct AttentionReport {
  int tokens = 0;  // 2 * clip_len + 1
  int clips = 0;
  std::vector<double> raw;             // head- and clip-averaged, rows sum to 1
  std::vector<double> row_normalized;  // each row scaled by its own max
  double first_frame_mass = 0;         // mean column mass per boundary token
  double last_frame_mass = 0;
  double middle_frame_mass = 0;
};

// first-layer attention averaged over heads and random train clips; the raw
// average of row-stochastic matrices stays row-stochastic
template <class R>
AttentionReport extract_attention(const TransformerEncoder<R>& tf, const video::Dataset<R>& ds,
                                  const RunConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, "attention", 0));
  NoGrad ng;
  const auto ids = ds.split_ids(true);
  if (ids.empty()) throw DataError("attention report needs a train split");
  const int n = cfg.clip_len;
  const int tokens = 2 * n + 1;
  AttentionReport rep;
  rep.tokens = tokens;
  rep.clips = cfg.attention_clips;
  rep.raw.assign(static_cast<std::size_t>(tokens) * tokens, 0.0);

  for (int c = 0; c < cfg.attention_clips; ++c) {
    const int id = ids[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(ids.size()) - 1))];
    const auto& v = ds.videos[id];
    auto clip = video::sample_clip(v, n, cfg.clip_stride, rng);
    const auto draw = med::sample_uniform_degree(n, rng);
    auto shuffled = video::apply_shuffle(clip, draw.perm);
    const auto ap = video::center_augmentation(v.h, v.w, cfg.crop);
    AttnCapture<R> cap;
    tf.encode(video::augment(clip, ap), video::augment(shuffled, ap), &cap);
    for (int h = 0; h < cap.heads; ++h) {
      const auto& m = cap.mats[h].data();  // (layer, head) order puts layer 0 first
      for (std::size_t i = 0; i < rep.raw.size(); ++i)
        rep.raw[i] += static_cast<double>(m[i]);
    }
  }
  const double denom = static_cast<double>(cfg.attention_clips) * tf.heads;
  for (auto& x : rep.raw) x /= denom;

  rep.row_normalized.assign(rep.raw.size(), 0.0);
  for (int r = 0; r < tokens; ++r) {
    double mx = 0;
    for (int c = 0; c < tokens; ++c) mx = std::max(mx, rep.raw[r * tokens + c]);
    for (int c = 0; c < tokens; ++c)
      rep.row_normalized[r * tokens + c] = mx > 0 ? rep.raw[r * tokens + c] / mx : 0.0;
  }

  // frame-token columns: ordered block at 1..n, shuffled block at n+1..2n
  auto column_mass = [&](const std::vector<int>& cols) {
    double s = 0;
    for (int r = 0; r < tokens; ++r)
      for (int c : cols) s += rep.raw[r * tokens + c];
    return s / (static_cast<double>(tokens) * cols.size());
  };
  rep.first_frame_mass = column_mass({1, n + 1});
  rep.last_frame_mass = column_mass({n, 2 * n});
  std::vector<int> middle;
  for (int p = 2; p < n; ++p) {
    middle.push_back(p);
    middle.push_back(n + p);
  }
  rep.middle_frame_mass = middle.empty() ? 0.0 : column_mass(middle);
  return rep;
}

inline CsvWriter attention_csv(const std::vector<double>& mat, int tokens) {
  std::vector<std::string> header;
  for (int c = 0; c < tokens; ++c) header.push_back("t" + std::to_string(c));
  CsvWriter csv(header);
  for (int r = 0; r < tokens; ++r) {
    std::vector<std::string> row;
    for (int c = 0; c < tokens; ++c) row.push_back(fmt_g(mat[r * tokens + c]));
    csv.add_row(row);
  }
  return csv;
}

}  // namespace cacl
