#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "cacl/encoders.hpp"
#include "cacl/med.hpp"
#include "cacl/nn.hpp"
#include "cacl/ops.hpp"
#include "cacl/optim.hpp"
#include "cacl/rng.hpp"
#include "cacl/video.hpp"

using namespace cacl;
using namespace cacl::video;

namespace {

const Dataset<double>& shared_dataset() {
  static Dataset<double> ds = [] {
    GenConfig cfg;  // defaults: seed 1, 200 videos, 8 classes, 46 frames
    return generate_dataset<double>(cfg);
  }();
  return ds;
}

Clip<double> make_clip(int n, int h, int w, uint64_t seed) {
  Clip<double> c;
  c.n = n;
  c.h = h;
  c.w = w;
  c.channels = 1;
  c.pixels.resize(static_cast<std::size_t>(n) * h * w);
  Rng rng(seed);
  for (auto& x : c.pixels) x = rng.uniform(0.0, 1.0);
  return c;
}

}  // namespace

TEST(Generator, ClassBalanceAndSplit) {
  const auto& ds = shared_dataset();
  ASSERT_EQ(static_cast<int>(ds.videos.size()), 200);
  std::map<int, int> per_class, train_per_class;
  for (const auto& v : ds.videos) {
    ++per_class[v.class_id];
    if (v.train_split) ++train_per_class[v.class_id];
  }
  ASSERT_EQ(static_cast<int>(per_class.size()), 8);
  for (int c = 0; c < 8; ++c) {
    EXPECT_EQ(per_class[c], 25);
    EXPECT_EQ(train_per_class[c], 20);
  }
  EXPECT_EQ(static_cast<int>(ds.split_ids(true).size()), 160);
  EXPECT_EQ(static_cast<int>(ds.split_ids(false).size()), 40);
}

TEST(Generator, DeterministicAcrossRuns) {
  GenConfig cfg;
  cfg.num_videos = 24;
  auto a = generate_dataset<double>(cfg);
  auto b = generate_dataset<double>(cfg);
  ASSERT_EQ(a.videos.size(), b.videos.size());
  for (std::size_t i = 0; i < a.videos.size(); ++i) {
    EXPECT_EQ(a.videos[i].pixels, b.videos[i].pixels);
    EXPECT_EQ(a.videos[i].train_split, b.videos[i].train_split);
  }
}

TEST(Generator, PixelsInUnitRange) {
  const auto& ds = shared_dataset();
  for (int i = 0; i < 8; ++i)
    for (double p : ds.videos[i].pixels) {
      ASSERT_GE(p, 0.0);
      ASSERT_LE(p, 1.0);
    }
}

TEST(Generator, RejectsBadConfigs) {
  GenConfig small;
  small.gen_h = 12;
  small.gen_w = 12;
  EXPECT_THROW(generate_dataset<double>(small), ConfigError);
  GenConfig classes;
  classes.num_classes = 9;
  EXPECT_THROW(generate_dataset<double>(classes), ConfigError);
  GenConfig few;
  few.num_videos = 4;
  EXPECT_THROW(generate_dataset<double>(few), ConfigError);
}

TEST(Clips, StartRangeMatchesLengthAndStride) {
  const auto& v = shared_dataset().videos[0];
  ASSERT_EQ(v.frames, 46);
  EXPECT_EQ(num_clip_starts(v, 16, 2), 16);  // starts 0..15
  auto c = clip_at(v, 3, 16, 2);
  EXPECT_EQ(c.n, 16);
  const std::size_t fs = static_cast<std::size_t>(v.channels) * v.h * v.w;
  for (int t = 0; t < 16; ++t)
    for (std::size_t j = 0; j < fs; ++j)
      ASSERT_EQ(c.frame_ptr(t)[j], v.frame_ptr(3 + 2 * t)[j]);
  EXPECT_THROW(clip_at(v, 16, 16, 2), DataError);
  EXPECT_THROW(clip_at(v, -1, 16, 2), DataError);
}

TEST(Clips, SampledStartsUniformWithin15Percent) {
  const auto& v = shared_dataset().videos[1];
  Rng rng(42);
  std::vector<int> counts(16, 0);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) ++counts[sample_clip(v, 16, 2, rng).start];
  const double expect = draws / 16.0;
  for (int s = 0; s < 16; ++s) {
    EXPECT_GE(counts[s], expect * 0.85) << "start " << s;
    EXPECT_LE(counts[s], expect * 1.15) << "start " << s;
  }
}

TEST(Augment, IdentityParamsLeavePixelsUnchanged) {
  auto clip = make_clip(4, 16, 16, 7);
  AugmentationParams p;  // crop 16 at (0,0), no flip, unit jitter, no blur
  auto out = augment(clip, p);
  EXPECT_EQ(out.pixels, clip.pixels);
}

TEST(Augment, FlipReversesColumns) {
  auto clip = make_clip(3, 16, 16, 8);
  AugmentationParams p;
  p.flip = true;
  auto out = augment(clip, p);
  for (int t = 0; t < 3; ++t)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x)
        ASSERT_EQ(out.frame_ptr(t)[y * 16 + x], clip.frame_ptr(t)[y * 16 + (15 - x)]);
}

TEST(Augment, CropSelectsWindow) {
  auto clip = make_clip(2, 20, 24, 9);
  AugmentationParams p;
  p.crop = 16;
  p.crop_y = 3;
  p.crop_x = 5;
  auto out = augment(clip, p);
  EXPECT_EQ(out.h, 16);
  EXPECT_EQ(out.w, 16);
  for (int t = 0; t < 2; ++t)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x)
        ASSERT_EQ(out.frame_ptr(t)[y * 16 + x], clip.frame_ptr(t)[(y + 3) * 24 + (x + 5)]);
}

TEST(Augment, BrightnessContrastPivotsOnClipMean) {
  auto clip = make_clip(2, 16, 16, 10);
  AugmentationParams p;
  p.brightness = 1.1;
  p.contrast = 0.9;
  auto out = augment(clip, p);
  double mean = 0.0;
  for (double x : clip.pixels) mean += x;
  mean /= static_cast<double>(clip.pixels.size());
  for (std::size_t i = 0; i < clip.pixels.size(); ++i) {
    const double want = (clip.pixels[i] * 1.1 - mean) * 0.9 + mean;
    ASSERT_NEAR(out.pixels[i], want, 1e-12);
  }
}

TEST(Augment, BlurPreservesConstantImages) {
  Clip<double> clip;
  clip.n = 2;
  clip.h = 16;
  clip.w = 16;
  clip.channels = 1;
  clip.pixels.assign(2 * 16 * 16, 0.37);
  AugmentationParams p;
  p.blur_sigma = 0.8;
  auto out = augment(clip, p);
  for (double x : out.pixels) ASSERT_NEAR(x, 0.37, 1e-12);
}

TEST(Augment, RejectsOversizedCrop) {
  auto clip = make_clip(2, 16, 16, 11);
  AugmentationParams p;
  p.crop = 16;
  p.crop_x = 1;  // 1 + 16 > 16
  EXPECT_THROW(augment(clip, p), DataError);
}

TEST(Augment, DrawSamplesValidWindows) {
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    auto p = draw_augmentation(20, 24, 16, rng);
    EXPECT_GE(p.crop_y, 0);
    EXPECT_LE(p.crop_y, 4);
    EXPECT_GE(p.crop_x, 0);
    EXPECT_LE(p.crop_x, 8);
    EXPECT_GE(p.brightness, 0.8);
    EXPECT_LE(p.contrast, 1.2);
    EXPECT_GE(p.blur_sigma, 0.0);
    EXPECT_LE(p.blur_sigma, 1.0);
  }
}

TEST(Shuffle, MovesFramesWithoutTouchingPixels) {
  auto clip = make_clip(16, 8, 8, 12);
  Rng rng(13);
  auto perm = med::Permutation::random(16, rng);
  auto out = apply_shuffle(clip, perm);
  const std::size_t fs = 64;
  for (int t = 0; t < 16; ++t)
    for (std::size_t j = 0; j < fs; ++j)
      ASSERT_EQ(out.frame_ptr(t)[j], clip.frame_ptr(perm.order[t])[j]);

  auto sorted_in = clip.pixels;
  auto sorted_out = out.pixels;
  std::sort(sorted_in.begin(), sorted_in.end());
  std::sort(sorted_out.begin(), sorted_out.end());
  EXPECT_EQ(sorted_in, sorted_out);

  auto back = apply_shuffle(out, perm.inverse());
  EXPECT_EQ(back.pixels, clip.pixels);
}

TEST(Shuffle, RejectsLengthMismatch) {
  auto clip = make_clip(16, 8, 8, 14);
  EXPECT_THROW(apply_shuffle(clip, med::Permutation::identity(8)), DataError);
}

TEST(Tensors, ClipAndFrameLayout) {
  auto clip = make_clip(4, 5, 6, 15);
  auto t = clip_to_tensor(clip);
  ASSERT_EQ(t.shape(), (std::vector<int>{1, 4, 5, 6}));
  // channel-major layout: tensor[c][t][y][x] == clip frame t pixel (y, x)
  for (int tt = 0; tt < 4; ++tt)
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 6; ++x)
        ASSERT_EQ(t.data()[(tt * 5 + y) * 6 + x], clip.frame_ptr(tt)[y * 6 + x]);
  auto f = frame_to_tensor(clip, 2);
  ASSERT_EQ(f.shape(), (std::vector<int>{1, 5, 6}));
  for (int j = 0; j < 30; ++j) ASSERT_EQ(f.data()[j], clip.frame_ptr(2)[j]);
}

TEST(Frames, SamplerStrideAndSplit) {
  const auto& ds = shared_dataset();
  auto train = sample_frames(ds, 10, true);
  auto test = sample_frames(ds, 10, false);
  // 46 frames at stride 10 -> t in {0,10,20,30,40}: 5 per video
  EXPECT_EQ(train.size(), 160u * 5u);
  EXPECT_EQ(test.size(), 40u * 5u);
  for (const auto& f : train) EXPECT_EQ(f.frame % 10, 0);
}

// single frames must carry no class signal: a linear probe on raw pixels
// stays within 5 points of chance on held-out videos
TEST(Probes, SingleFrameLinearProbeAtChance) {
  const auto& ds = shared_dataset();
  auto train = sample_frames(ds, 10, true);
  auto test = sample_frames(ds, 10, false);
  const int dim = ds.cfg.gen_h * ds.cfg.gen_w;

  auto flatten = [&](const std::vector<FrameSample<double>>& fs, std::vector<int>& labels) {
    std::vector<double> flat;
    flat.reserve(fs.size() * dim);
    for (const auto& f : fs) {
      flat.insert(flat.end(), f.pixels.begin(), f.pixels.end());
      labels.push_back(f.class_id);
    }
    return Tensor<double>::from({static_cast<int>(fs.size()), dim}, std::move(flat));
  };
  std::vector<int> ytr, yte;
  auto xtr = flatten(train, ytr);
  auto xte = flatten(test, yte);

  Rng rng(21);
  ParamRegistry<double> reg;
  auto lin = Linear<double>::create("probe", dim, 8, rng, reg);
  Sgd<double>::Config cfg;
  cfg.lr_base = 0.5;
  cfg.momentum = 0.9;
  cfg.weight_decay = 1e-4;
  cfg.total_epochs = 200;
  Sgd<double> opt(cfg);
  for (int it = 0; it < 200; ++it) {
    auto loss = cross_entropy_with_logits(lin(xtr), ytr);
    reg.zero_grad();
    backward(loss);
    opt.step(reg, it);
  }

  NoGrad ng;
  auto logits = lin(xte);
  int hits = 0;
  for (int i = 0; i < xte.shape()[0]; ++i) {
    const double* rowp = logits.data().data() + static_cast<std::size_t>(i) * 8;
    const int pred = static_cast<int>(std::max_element(rowp, rowp + 8) - rowp);
    hits += pred == yte[i];
  }
  const double acc = static_cast<double>(hits) / xte.shape()[0];
  EXPECT_LE(acc, 0.125 + 0.05) << "frame probe accuracy " << acc;
}

// ordered clips must be fully class-separable: a small supervised 3D-CNN run
// reaches high held-out accuracy from temporal structure alone
TEST(Probes, OrderedClipSupervisedProbeLearnable) {
  const auto& ds = shared_dataset();
  auto train_ids = ds.split_ids(true);
  auto test_ids = ds.split_ids(false);

  Rng init(31);
  ParamRegistry<double> reg;
  auto trunk = Cnn3dTrunk<double>::create("trunk", 1, {8, 16, 32}, reg, init);
  auto head = Linear<double>::create("head", 32, 8, init, reg);

  Sgd<double>::Config cfg;
  cfg.lr_base = 0.05;
  cfg.momentum = 0.9;
  cfg.weight_decay = 5e-4;
  cfg.total_epochs = 22;
  Sgd<double> opt(cfg);

  // crop/jitter/blur augmentation but no flip (flips alias the left/right classes)
  Rng rng(32);
  for (int epoch = 0; epoch < cfg.total_epochs; ++epoch) {
    auto order = rng.permutation(train_ids.size());
    for (std::size_t base = 0; base + 16 <= order.size(); base += 16) {
      std::vector<Tensor<double>> feats;
      std::vector<int> labels;
      for (int b = 0; b < 16; ++b) {
        const auto& v = ds.videos[train_ids[order[base + b]]];
        auto ap = draw_augmentation(20, 24, 16, rng);
        ap.flip = false;
        auto clip = augment(sample_clip(v, 16, 2, rng), ap);
        feats.push_back(trunk.pooled(clip_to_tensor(clip)));
        labels.push_back(v.class_id);
      }
      auto loss = cross_entropy_with_logits(head(stack_rows(feats)), labels);
      reg.zero_grad();
      backward(loss);
      opt.step(reg, epoch);
    }
  }

  // mean logits over 10 uniformly spaced clips per held-out video
  NoGrad ng;
  const auto center = center_augmentation(20, 24, 16);
  int hits = 0;
  for (int id : test_ids) {
    const auto& v = ds.videos[id];
    const int starts = num_clip_starts(v, 16, 2);
    std::vector<double> acc_logits(8, 0.0);
    for (int c = 0; c < 10; ++c) {
      const int st = (c * (starts - 1)) / 9;
      auto clip = augment(clip_at(v, st, 16, 2), center);
      auto logits = head.apply_vec(trunk.pooled(clip_to_tensor(clip)));
      for (int k = 0; k < 8; ++k) acc_logits[k] += logits.data()[k];
    }
    const int pred =
        static_cast<int>(std::max_element(acc_logits.begin(), acc_logits.end()) -
                         acc_logits.begin());
    hits += pred == v.class_id;
  }
  const double acc = static_cast<double>(hits) / test_ids.size();
  EXPECT_GT(acc, 0.8) << "clip probe accuracy " << acc;
}
