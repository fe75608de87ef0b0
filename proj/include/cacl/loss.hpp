#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "cacl/common.hpp"
#include "cacl/ops.hpp"
#include "cacl/tensor.hpp"

namespace cacl {

// scaled cosine similarity between two vectors: tau * <u/|u|, v/|v|>, shape [1]
template <class R>
Tensor<R> cont(const Tensor<R>& u, const Tensor<R>& v, R tau) {
  return scale(dot(l2_normalize(u), l2_normalize(v)), tau);
}

template <class R>
struct EmbeddingSet {
  Tensor<R> gq;  // 3D-CNN online embedding
  Tensor<R> gk;  // 3D-CNN momentum embedding
  Tensor<R> tq;  // transformer embedding of the query views
  Tensor<R> tk;  // transformer embedding of the key views
};

// sum of exp similarities over the first `pairs` positive pairs in the fixed
// order (gq,gk), (gq,tq), (gq,tk), (tq,tk); the full objective uses all four
template <class R>
Tensor<R> positive_score(const EmbeddingSet<R>& e, R tau, int pairs = 4) {
  if (pairs < 1 || pairs > 4)
    throw ConfigError("positive_score: pair count must lie in 1..4, got " +
                      std::to_string(pairs));
  auto s = vexp(cont(e.gq, e.gk, tau));
  if (pairs >= 2) s = add(s, vexp(cont(e.gq, e.tq, tau)));
  if (pairs >= 3) s = add(s, vexp(cont(e.gq, e.tk, tau)));
  if (pairs >= 4) s = add(s, vexp(cont(e.tq, e.tk, tau)));
  return s;
}

// fixed-capacity FIFO of unit-norm key embeddings, oldest first
template <class R>
class EmbeddingQueue {
 public:
  EmbeddingQueue(int capacity, int dim) : capacity_(capacity), dim_(dim) {
    if (capacity <= 0 || dim <= 0) throw ConfigError("queue: nonpositive capacity or dim");
  }

  int capacity() const { return capacity_; }
  int dim() const { return dim_; }
  int size() const { return static_cast<int>(entries_.size()); }
  bool empty() const { return entries_.empty(); }

  // rejects keys that are not unit-norm to within ~100 ulp of the scalar type
  void push(const std::vector<R>& key) {
    if (static_cast<int>(key.size()) != dim_)
      throw ShapeError("queue_push", "key dim " + std::to_string(key.size()) + " vs " +
                                         std::to_string(dim_));
    long double sq = 0;
    for (R x : key) sq += static_cast<long double>(x) * x;
    const double norm = std::sqrt(static_cast<double>(sq));
    constexpr double tol = sizeof(R) == 8 ? 1e-9 : 1e-5;
    if (std::fabs(norm - 1.0) > tol)
      throw DataError("queue_push: non-normalized key, norm=" + std::to_string(norm));
    if (size() < capacity_) {
      entries_.push_back(key);
    } else {
      entries_[head_] = key;
      head_ = (head_ + 1) % capacity_;
    }
  }

  // entries oldest-to-newest
  std::vector<std::vector<R>> contents() const {
    std::vector<std::vector<R>> out;
    out.reserve(entries_.size());
    for (int i = 0; i < size(); ++i) out.push_back(entries_[(head_ + i) % size()]);
    return out;
  }

  // [size, dim] constant tensor, rows oldest-to-newest
  Tensor<R> as_tensor() const {
    if (empty()) throw DataError("queue: as_tensor on empty queue");
    std::vector<R> flat;
    flat.reserve(static_cast<std::size_t>(size()) * dim_);
    for (const auto& e : contents()) flat.insert(flat.end(), e.begin(), e.end());
    return Tensor<R>::from({size(), dim_}, std::move(flat));
  }

 private:
  int capacity_;
  int dim_;
  int head_ = 0;  // oldest entry once full
  std::vector<std::vector<R>> entries_;
};

// contrastive loss over a batch: -(1/n) sum_i log(S_pos_i / (S_pos_i + S_neg_i))
// where S_neg_i sums exp similarities of gq_i against the queue; empty queue -> 0
template <class R>
Tensor<R> nce_loss(const std::vector<EmbeddingSet<R>>& batch, const EmbeddingQueue<R>& queue,
                   R tau, int pairs = 4) {
  if (batch.empty()) throw DataError("nce_loss: empty batch");
  std::vector<Tensor<R>> spos;
  spos.reserve(batch.size());
  for (const auto& e : batch) spos.push_back(positive_score(e, tau, pairs));
  auto s = concat_vecs(spos);  // [n]
  if (queue.empty()) return sub(mean(vlog(s)), mean(vlog(s)));
  std::vector<Tensor<R>> gq_rows;
  gq_rows.reserve(batch.size());
  for (const auto& e : batch) gq_rows.push_back(l2_normalize(e.gq));
  auto gq = stack_rows(gq_rows);                                // [n, D]
  auto sims = scale(matmul_nt(gq, queue.as_tensor()), tau);     // [n, m]
  auto neg = sum_rows(vexp(sims));                              // [n]
  return mean(sub(vlog(add(s, neg)), vlog(s)));
}

// shuffle-degree prediction: cross entropy of per-sample logits vs degree labels
template <class R>
Tensor<R> sdp_loss(const Tensor<R>& logits, const std::vector<int>& labels) {
  return cross_entropy_with_logits(logits, labels);
}

template <class R>
struct LossBreakdown {
  Tensor<R> total;
  double nce = 0;
  double cls = 0;
  // batch-mean cosine similarities of the four positive pairs (no tau)
  double sim_gq_gk = 0;
  double sim_gq_tq = 0;
  double sim_gq_tk = 0;
  double sim_tq_tk = 0;
};

namespace detail {

template <class R>
double mean_cosine(const std::vector<EmbeddingSet<R>>& batch, int a, int b) {
  NoGrad ng;
  double acc = 0;
  for (const auto& e : batch) {
    const Tensor<R>* pair[4] = {&e.gq, &e.gk, &e.tq, &e.tk};
    acc += static_cast<double>(dot(l2_normalize(*pair[a]), l2_normalize(*pair[b])).item());
  }
  return acc / static_cast<double>(batch.size());
}

}  // namespace detail

// batch-mean cosines of the four positive pairs in the fixed order; transformer
// pairs are NaN when that encoder is disabled
template <class R>
std::array<double, 4> mean_pair_similarities(const std::vector<EmbeddingSet<R>>& batch,
                                             bool with_transformer) {
  std::array<double, 4> out;
  out[0] = detail::mean_cosine(batch, 0, 1);
  if (with_transformer) {
    out[1] = detail::mean_cosine(batch, 0, 2);
    out[2] = detail::mean_cosine(batch, 0, 3);
    out[3] = detail::mean_cosine(batch, 2, 3);
  } else {
    out[1] = out[2] = out[3] = std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

// total = nce + lambda * cls, plus scalar diagnostics
template <class R>
LossBreakdown<R> joint_loss(const std::vector<EmbeddingSet<R>>& batch, const Tensor<R>& logits,
                            const std::vector<int>& labels, const EmbeddingQueue<R>& queue, R tau,
                            R lambda) {
  LossBreakdown<R> out;
  auto nce = nce_loss(batch, queue, tau);
  auto cls = sdp_loss(logits, labels);
  out.nce = static_cast<double>(nce.item());
  out.cls = static_cast<double>(cls.item());
  out.total = add(nce, scale(cls, lambda));
  out.sim_gq_gk = detail::mean_cosine(batch, 0, 1);
  out.sim_gq_tq = detail::mean_cosine(batch, 0, 2);
  out.sim_gq_tk = detail::mean_cosine(batch, 0, 3);
  out.sim_tq_tk = detail::mean_cosine(batch, 2, 3);
  return out;
}

// unit-normalize a raw embedding and push it; the queue re-checks the norm
template <class R>
void enqueue_key(EmbeddingQueue<R>& queue, const Tensor<R>& key) {
  NoGrad ng;
  queue.push(l2_normalize(Tensor<R>::from(key.shape(), key.data())).data());
}

}  // namespace cacl
