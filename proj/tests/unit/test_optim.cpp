#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "cacl/nn.hpp"
#include "cacl/optim.hpp"
#include "cacl/rng.hpp"

using cacl::ParamRegistry;
using cacl::Rng;
using cacl::Sgd;
using cacl::Tensor;

TEST(CosineSchedule, Endpoints) {
  EXPECT_DOUBLE_EQ(cacl::cosine_lr(0.02, 0, 30), 0.02);
  EXPECT_NEAR(cacl::cosine_lr(0.02, 30, 30), 0.0, 1e-18);
  EXPECT_NEAR(cacl::cosine_lr(0.02, 15, 30), 0.01, 1e-15);
  EXPECT_GT(cacl::cosine_lr(0.02, 1, 30), cacl::cosine_lr(0.02, 2, 30));
  EXPECT_THROW(cacl::cosine_lr(0.02, 0, 0), cacl::ConfigError);
}

TEST(SgdStep, VanillaStepWithoutMomentumOrDecay) {
  ParamRegistry<double> reg;
  auto p = reg.add("p", Tensor<double>::param({3}, {1.0, 2.0, 3.0}));
  auto loss = cacl::dot(p, Tensor<double>::from({3}, {1.0, 1.0, 1.0}));
  cacl::backward(loss);  // grad = (1,1,1)
  Sgd<double>::Config cfg;
  cfg.lr_base = 0.5;
  cfg.momentum = 0.0;
  cfg.weight_decay = 0.0;
  cfg.total_epochs = 10;
  Sgd<double> opt(cfg);
  opt.step(reg, 0);  // lr = 0.5 at t=0
  EXPECT_DOUBLE_EQ(p.data()[0], 0.5);
  EXPECT_DOUBLE_EQ(p.data()[1], 1.5);
  EXPECT_DOUBLE_EQ(p.data()[2], 2.5);
}

TEST(SgdStep, MomentumAndDecayMatchHandComputation) {
  ParamRegistry<double> reg;
  auto p = reg.add("p", Tensor<double>::param({1}, {2.0}));
  Sgd<double>::Config cfg;
  cfg.lr_base = 0.1;
  cfg.momentum = 0.9;
  cfg.weight_decay = 0.5;
  cfg.total_epochs = 100;  // epoch 0 -> lr ~ lr_base
  Sgd<double> opt(cfg);

  // two identical unit-gradient steps, tracked by hand:
  // eff1 = 1 + 0.5*2 = 2; buf1 = 2; p1 = 2 - 0.1*2 = 1.8
  // eff2 = 1 + 0.5*1.8 = 1.9; buf2 = 0.9*2 + 1.9 = 3.7; p2 = 1.8 - 0.37 = 1.43
  for (int s = 0; s < 2; ++s) {
    reg.zero_grad();
    auto loss = cacl::dot(p, Tensor<double>::from({1}, {1.0}));
    cacl::backward(loss);
    opt.step(reg, 0);
  }
  EXPECT_NEAR(p.data()[0], 1.43, 1e-12);
}

TEST(SgdStep, MissingGradientNamesParameter) {
  ParamRegistry<double> reg;
  reg.add("encoder.w", Tensor<double>::param({2}, {1.0, 2.0}));
  Sgd<double> opt({});
  try {
    opt.step(reg, 0);
    FAIL() << "expected NumericFault";
  } catch (const cacl::NumericFault& e) {
    EXPECT_NE(std::string(e.what()).find("encoder.w"), std::string::npos);
  }
}

TEST(MomentumUpdate, AlphaZeroCopiesOnline) {
  Rng rng(5);
  ParamRegistry<double> online, target;
  online.add("w", cacl::kaiming_uniform<double>({4, 4}, 4, rng));
  target.add("w", cacl::zeros_param<double>({4, 4}));
  cacl::momentum_update(online, target, 0.0);
  EXPECT_EQ(target.entries()[0].second.data(), online.entries()[0].second.data());
}

TEST(MomentumUpdate, SingleStepMovesByOneMinusAlpha) {
  ParamRegistry<double> online, target;
  online.add("w", Tensor<double>::param({2}, {1.0, -1.0}));
  target.add("w", Tensor<double>::param({2}, {0.0, 0.0}));
  cacl::momentum_update(online, target, 0.999);
  EXPECT_DOUBLE_EQ(target.entries()[0].second.data()[0], 0.001);
  EXPECT_DOUBLE_EQ(target.entries()[0].second.data()[1], -0.001);
}

TEST(MomentumUpdate, GeometricConvergenceToFrozenOnline) {
  ParamRegistry<double> online, target;
  online.add("w", Tensor<double>::param({1}, {1.0}));
  target.add("w", Tensor<double>::param({1}, {0.0}));
  const double alpha = 0.9;
  double prev_gap = 1.0;
  for (int s = 0; s < 20; ++s) {
    cacl::momentum_update(online, target, alpha);
    const double gap = std::fabs(1.0 - target.entries()[0].second.data()[0]);
    EXPECT_NEAR(gap, prev_gap * alpha, 1e-12);
    prev_gap = gap;
  }
}

TEST(MomentumUpdate, StructureMismatchRejected) {
  ParamRegistry<double> online, target, target2;
  online.add("w", Tensor<double>::param({2}, {1.0, 2.0}));
  target.add("w", Tensor<double>::param({3}, {0.0, 0.0, 0.0}));
  EXPECT_THROW(cacl::momentum_update(online, target, 0.5), cacl::ShapeError);
  EXPECT_THROW(cacl::momentum_update(online, target2, 0.5), cacl::ShapeError);
  EXPECT_THROW(cacl::momentum_update(online, target, 1.0), cacl::ConfigError);
}

TEST(Registry, NamesAndDuplicates) {
  Rng rng(6);
  ParamRegistry<double> reg;
  reg.add("a", cacl::zeros_param<double>({2}));
  EXPECT_THROW(reg.add("a", cacl::zeros_param<double>({2})), cacl::ConfigError);
  EXPECT_EQ(reg.find("a").numel(), 2);
  EXPECT_THROW(reg.find("missing"), cacl::ConfigError);
  EXPECT_EQ(reg.total_elements(), 2);
}

TEST(Layers, LinearAndFfnShapes) {
  Rng rng(7);
  ParamRegistry<double> reg;
  auto lin = cacl::Linear<double>::create("lin", 5, 3, rng, reg);
  auto x = Tensor<double>::from({2, 5}, std::vector<double>(10, 0.5));
  EXPECT_EQ(lin(x).shape(), (std::vector<int>{2, 3}));
  auto v = Tensor<double>::from({5}, std::vector<double>(5, 0.5));
  EXPECT_EQ(lin.apply_vec(v).shape(), (std::vector<int>{3}));

  auto ffn = cacl::Ffn2<double>::create("ffn", 5, 8, 4, rng, reg);
  EXPECT_EQ(ffn(x).shape(), (std::vector<int>{2, 4}));
  EXPECT_EQ(ffn.apply_vec(v).shape(), (std::vector<int>{4}));
  // bias starts at zero, weights are bounded by the kaiming limit
  const double bound = std::sqrt(6.0 / 5.0);
  for (double w : lin.w.data()) EXPECT_LE(std::fabs(w), bound);
  for (double b : lin.b.data()) EXPECT_DOUBLE_EQ(b, 0.0);
}
