#include <gtest/gtest.h>

#include <cmath>
#include <deque>
#include <vector>

#include "cacl/loss.hpp"
#include "cacl/ops.hpp"
#include "cacl/rng.hpp"
#include "cacl/tensor.hpp"
#include "support/gradcheck.hpp"

using namespace cacl;

namespace {

constexpr double kTau = 1.0 / 0.07;

std::vector<double> unit_vec(int dim, int axis) {
  std::vector<double> v(dim, 0.0);
  v[axis] = 1.0;
  return v;
}

std::vector<double> random_unit(int dim, Rng& rng) {
  std::vector<double> v(dim);
  double sq = 0.0;
  for (auto& x : v) {
    x = rng.gaussian(0.0, 1.0);
    sq += x * x;
  }
  const double inv = 1.0 / std::sqrt(sq);
  for (auto& x : v) x *= inv;
  return v;
}

EmbeddingSet<double> identical_set(const std::vector<double>& e) {
  EmbeddingSet<double> s;
  const int d = static_cast<int>(e.size());
  s.gq = Tensor<double>::param({d}, e);
  s.gk = Tensor<double>::from({d}, e);
  s.tq = Tensor<double>::param({d}, e);
  s.tk = Tensor<double>::from({d}, e);
  return s;
}

}  // namespace

TEST(Cont, ScaledCosine) {
  auto u = Tensor<double>::from({3}, {3.0, 0.0, 0.0});
  auto v = Tensor<double>::from({3}, {1.0, 1.0, 0.0});
  const double want = kTau * (1.0 / std::sqrt(2.0));
  EXPECT_NEAR(cont<double>(u, v, kTau).item(), want, 1e-12);
  // scale invariance of the cosine
  auto v2 = Tensor<double>::from({3}, {10.0, 10.0, 0.0});
  EXPECT_NEAR(cont<double>(u, v2, kTau).item(), want, 1e-12);
}

TEST(Cont, RejectsZeroVector) {
  auto u = Tensor<double>::from({3}, {0.0, 0.0, 0.0});
  auto v = Tensor<double>::from({3}, {1.0, 0.0, 0.0});
  EXPECT_THROW(cont<double>(u, v, kTau), NumericFault);
}

TEST(PositiveScore, SumsExactlyFourPairs) {
  Rng rng(5);
  EmbeddingSet<double> s;
  s.gq = Tensor<double>::from({6}, random_unit(6, rng));
  s.gk = Tensor<double>::from({6}, random_unit(6, rng));
  s.tq = Tensor<double>::from({6}, random_unit(6, rng));
  s.tk = Tensor<double>::from({6}, random_unit(6, rng));
  auto cosd = [](const Tensor<double>& a, const Tensor<double>& b) {
    double acc = 0.0;
    for (int i = 0; i < 6; ++i) acc += a.data()[i] * b.data()[i];
    return acc;
  };
  const double want = std::exp(kTau * cosd(s.gq, s.gk)) + std::exp(kTau * cosd(s.gq, s.tq)) +
                      std::exp(kTau * cosd(s.gq, s.tk)) + std::exp(kTau * cosd(s.tq, s.tk));
  EXPECT_NEAR(positive_score<double>(s, kTau).item() / want, 1.0, 1e-12);
}

TEST(Queue, RejectsBadKeys) {
  EmbeddingQueue<double> q(4, 3);
  EXPECT_THROW(q.push({1.0, 0.0}), ShapeError);
  EXPECT_THROW(q.push({2.0, 0.0, 0.0}), DataError);
  EXPECT_THROW(q.push({0.0, 0.0, 0.0}), DataError);
  q.push({1.0, 0.0, 0.0});
  EXPECT_EQ(q.size(), 1);
  // norm within 1e-9 is accepted
  q.push({1.0 + 5e-10, 0.0, 0.0});
  EXPECT_EQ(q.size(), 2);
}

TEST(Queue, FifoMatchesReferenceModel) {
  Rng rng(17);
  for (int cap = 1; cap <= 8; ++cap) {
    for (int schedule = 0; schedule < 100; ++schedule) {
      EmbeddingQueue<double> q(cap, 2);
      std::deque<std::vector<double>> ref;
      const int pushes = static_cast<int>(rng.uniform_int(0, 3 * cap));
      for (int i = 0; i < pushes; ++i) {
        const double a = rng.uniform(-1.0, 1.0);
        std::vector<double> key{a, std::sqrt(1.0 - a * a)};
        q.push(key);
        ref.push_back(key);
        if (static_cast<int>(ref.size()) > cap) ref.pop_front();
      }
      ASSERT_EQ(q.size(), static_cast<int>(ref.size()));
      const auto got = q.contents();
      for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_EQ(got[i], ref[i]);
    }
  }
}

TEST(Queue, EnqueueKeyNormalizes) {
  EmbeddingQueue<double> q(2, 3);
  enqueue_key(q, Tensor<double>::from({3}, {3.0, 4.0, 0.0}));
  const auto c = q.contents();
  ASSERT_EQ(c.size(), 1u);
  EXPECT_NEAR(c[0][0], 0.6, 1e-12);
  EXPECT_NEAR(c[0][1], 0.8, 1e-12);
}

TEST(NceLoss, EmptyQueueIsExactlyZero) {
  Rng rng(3);
  std::vector<EmbeddingSet<double>> batch;
  for (int i = 0; i < 4; ++i) {
    EmbeddingSet<double> s;
    s.gq = Tensor<double>::param({5}, random_unit(5, rng));
    s.gk = Tensor<double>::from({5}, random_unit(5, rng));
    s.tq = Tensor<double>::param({5}, random_unit(5, rng));
    s.tk = Tensor<double>::from({5}, random_unit(5, rng));
    batch.push_back(s);
  }
  EmbeddingQueue<double> q(8, 5);
  auto loss = nce_loss(batch, q, kTau);
  EXPECT_EQ(loss.item(), 0.0);
  backward(loss);  // gradients must exist and cancel exactly
  for (double g : batch[0].gq.grad()) EXPECT_EQ(g, 0.0);
}

TEST(NceLoss, IdenticalEmbeddingsAnalyticValue) {
  // all four embeddings and all queue entries equal, tau = 1:
  // every similarity is 1, so loss = log((4 + m) / 4)
  for (int m : {1, 3, 7}) {
    const auto e = unit_vec(4, 1);
    std::vector<EmbeddingSet<double>> batch{identical_set(e), identical_set(e)};
    EmbeddingQueue<double> q(8, 4);
    for (int i = 0; i < m; ++i) q.push(e);
    const double got = nce_loss(batch, q, 1.0).item();
    EXPECT_NEAR(got, std::log((4.0 + m) / 4.0), 1e-9) << "m=" << m;
  }
}

TEST(NceLoss, DecreasesWhenNegativesMoveAway) {
  const auto e = unit_vec(4, 0);
  std::vector<EmbeddingSet<double>> batch{identical_set(e)};
  EmbeddingQueue<double> q_near(4, 4), q_far(4, 4);
  q_near.push(unit_vec(4, 0));  // collinear with gq
  q_far.push(unit_vec(4, 2));   // orthogonal to gq
  const double near_loss = nce_loss(batch, q_near, kTau).item();
  const double far_loss = nce_loss(batch, q_far, kTau).item();
  EXPECT_GT(near_loss, far_loss);
  EXPECT_GT(far_loss, 0.0);
}

TEST(SdpLoss, UniformLogitsGiveLogM) {
  for (int m : {4, 16}) {
    auto logits = Tensor<double>::from({2, m}, std::vector<double>(2 * m, 0.7));
    const double got = sdp_loss(logits, std::vector<int>{0, m - 1}).item();
    EXPECT_NEAR(got, std::log(static_cast<double>(m)), 1e-9);
  }
}

TEST(SdpLoss, RejectsBadLabels) {
  auto logits = Tensor<double>::from({1, 4}, {0.0, 0.0, 0.0, 0.0});
  EXPECT_THROW(sdp_loss(logits, std::vector<int>{4}), DataError);
}

TEST(JointLoss, CombinesAndReportsDiagnostics) {
  const auto e = unit_vec(4, 1);
  std::vector<EmbeddingSet<double>> batch{identical_set(e)};
  EmbeddingQueue<double> q(4, 4);
  q.push(unit_vec(4, 0));
  auto logits = Tensor<double>::param({1, 4}, std::vector<double>(4, 0.0));
  auto out = joint_loss(batch, logits, std::vector<int>{2}, q, 1.0, 1.0);
  EXPECT_NEAR(out.cls, std::log(4.0), 1e-9);
  EXPECT_NEAR(out.total.item(), out.nce + out.cls, 1e-12);
  EXPECT_NEAR(out.sim_gq_gk, 1.0, 1e-12);
  EXPECT_NEAR(out.sim_gq_tq, 1.0, 1e-12);
  EXPECT_NEAR(out.sim_gq_tk, 1.0, 1e-12);
  EXPECT_NEAR(out.sim_tq_tk, 1.0, 1e-12);

  auto out2 = joint_loss(batch, logits, std::vector<int>{2}, q, 1.0, 0.25);
  EXPECT_NEAR(out2.total.item(), out2.nce + 0.25 * out2.cls, 1e-12);
}

TEST(JointLoss, GradientsMatchFiniteDifferences) {
  Rng rng(11);
  const int dim = 6, n = 3, m = 4;
  std::vector<EmbeddingSet<double>> batch;
  std::vector<Tensor<double>> leaves;
  for (int i = 0; i < n; ++i) {
    EmbeddingSet<double> s;
    s.gq = Tensor<double>::param({dim}, random_unit(dim, rng));
    s.gk = Tensor<double>::param({dim}, random_unit(dim, rng));
    s.tq = Tensor<double>::param({dim}, random_unit(dim, rng));
    s.tk = Tensor<double>::param({dim}, random_unit(dim, rng));
    batch.push_back(s);
    leaves.insert(leaves.end(), {s.gq, s.gk, s.tq, s.tk});
  }
  EmbeddingQueue<double> q(m, dim);
  for (int i = 0; i < m; ++i) q.push(random_unit(dim, rng));
  std::vector<double> raw(n * m);
  for (auto& x : raw) x = rng.uniform(-1.0, 1.0);
  auto logits = Tensor<double>::param({n, m}, raw);
  leaves.push_back(logits);
  const std::vector<int> labels{0, 2, 3};

  auto report = oracles::grad_check(leaves, [&] {
    auto nce = nce_loss(batch, q, kTau);
    auto cls = sdp_loss(logits, labels);
    return add(nce, cls);
  });
  EXPECT_LT(report.max_rel_err, 1e-6) << report.worst;
}
