#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cacl/common.hpp"
#include "cacl/med.hpp"
#include "cacl/parallel.hpp"
#include "cacl/rng.hpp"
#include "cacl/tensor.hpp"

// Synthetic motion-class videos. Classes differ only in how the object moves;
// every static quantity (shape, color, size, position) is drawn from the
// same distribution for all classes, so a single frame carries no class
// signal. Positions live on a torus, which keeps the per-frame position
// marginal uniform even for the translation classes.
namespace cacl::video {

inline constexpr int kNumMotionClasses = 8;

inline const char* motion_class_name(int id) {
  static const char* names[kNumMotionClasses] = {
      "translate_left", "translate_right", "translate_up", "translate_down",
      "orbit_cw",       "orbit_ccw",       "expand",       "contract"};
  if (id < 0 || id >= kNumMotionClasses)
    throw DataError("motion class id out of range: " + std::to_string(id));
  return names[id];
}

struct GenConfig {
  std::uint64_t seed = 1;
  int num_videos = 200;
  int num_classes = 8;
  int frames = 46;
  int gen_h = 20;
  int gen_w = 24;
  int crop = 16;  // train/eval resolution
  int channels = 1;
  double train_fraction = 0.8;
};

template <class R>
struct Video {
  int id = 0;
  int class_id = 0;
  std::uint64_t seed = 0;
  bool train_split = true;
  int frames = 0, h = 0, w = 0, channels = 1;
  std::vector<R> pixels;  // [frame][channel][h][w]

  const R* frame_ptr(int t) const {
    return pixels.data() + static_cast<std::size_t>(t) * channels * h * w;
  }
};

template <class R>
struct Clip {
  int video_id = 0;
  int start = 0;
  int stride = 1;
  int n = 0, h = 0, w = 0, channels = 1;
  std::vector<R> pixels;  // [frame][channel][h][w]

  R* frame_ptr(int t) {
    return pixels.data() + static_cast<std::size_t>(t) * channels * h * w;
  }
  const R* frame_ptr(int t) const {
    return pixels.data() + static_cast<std::size_t>(t) * channels * h * w;
  }
};

template <class R>
struct Dataset {
  GenConfig cfg;
  std::vector<Video<R>> videos;

  std::vector<int> split_ids(bool train) const {
    std::vector<int> ids;
    for (const auto& v : videos)
      if (v.train_split == train) ids.push_back(v.id);
    return ids;
  }
};

namespace detail {

// signed distance to the shape boundary under minimum-image (toroidal) metric
inline double shape_sdf(int kind, double dx, double dy, double size) {
  switch (kind) {
    case 0: return std::sqrt(dx * dx + dy * dy) - size;                  // disk
    case 1: return std::max(std::fabs(dx), std::fabs(dy)) - size;        // square
    default: return (std::fabs(dx) + std::fabs(dy)) * 0.70710678 - size; // diamond
  }
}

inline double wrap_delta(double a, double b, double period) {
  double d = a - b;
  d -= period * std::round(d / period);
  return d;
}

template <class R>
void render_frame(R* out, int h, int w, double cx, double cy, double size, int shape,
                  double fg, double bg) {
  for (int y = 0; y < h; ++y) {
    R* rowp = out + static_cast<std::size_t>(y) * w;
    const double dy = wrap_delta(static_cast<double>(y), cy, h);
    for (int x = 0; x < w; ++x) {
      const double dx = wrap_delta(static_cast<double>(x), cx, w);
      const double sdf = shape_sdf(shape, dx, dy, size);
      double cov = 0.5 - sdf;  // one-pixel soft edge
      cov = cov < 0.0 ? 0.0 : (cov > 1.0 ? 1.0 : cov);
      rowp[x] = static_cast<R>(bg + (fg - bg) * cov);
    }
  }
}

}  // namespace detail

template <class R>
Video<R> generate_video(const GenConfig& cfg, int index) {
  Video<R> v;
  v.id = index;
  v.class_id = index % cfg.num_classes;
  v.seed = derive_seed(cfg.seed, "video", static_cast<std::uint64_t>(index));
  v.frames = cfg.frames;
  v.h = cfg.gen_h;
  v.w = cfg.gen_w;
  v.channels = cfg.channels;
  v.pixels.resize(static_cast<std::size_t>(cfg.frames) * cfg.channels * cfg.gen_h * cfg.gen_w);

  Rng rng(v.seed);
  // appearance: identical distribution for every class
  const int shape = static_cast<int>(rng.uniform_int(0, 2));
  const double bg = rng.uniform(0.10, 0.30);
  const double fg = rng.uniform(0.60, 0.90);
  const double smin = 2.2, smax = 4.4;
  const double fixed_size = rng.uniform(smin, smax);
  double cx = rng.uniform(0.0, cfg.gen_w);
  double cy = rng.uniform(0.0, cfg.gen_h);
  // motion parameters, only some of which each class consumes; drawing them
  // all keeps the appearance stream identical across classes
  const double speed = rng.uniform(0.7, 1.5);
  const double rho = rng.uniform(3.0, 6.0);
  const double omega = rng.uniform(0.10, 0.22);
  const double phase = rng.uniform(0.0, 2.0 * 3.14159265358979323846);

  for (int t = 0; t < cfg.frames; ++t) {
    double px = cx, py = cy, size = fixed_size;
    const double tt = static_cast<double>(t);
    const double sweep = static_cast<double>(t) / static_cast<double>(cfg.frames - 1);
    switch (v.class_id) {
      case 0: px = cx - speed * tt; break;  // translate_left
      case 1: px = cx + speed * tt; break;  // translate_right
      case 2: py = cy - speed * tt; break;  // translate_up
      case 3: py = cy + speed * tt; break;  // translate_down
      case 4:                                // orbit_cw
        px = cx + rho * std::cos(phase - omega * tt);
        py = cy + rho * std::sin(phase - omega * tt);
        break;
      case 5:                                // orbit_ccw
        px = cx + rho * std::cos(phase + omega * tt);
        py = cy + rho * std::sin(phase + omega * tt);
        break;
      case 6: size = smin + (smax - smin) * sweep; break;  // expand
      default: size = smax - (smax - smin) * sweep; break; // contract
    }
    for (int c = 0; c < cfg.channels; ++c) {
      R* out = v.pixels.data() +
               (static_cast<std::size_t>(t) * cfg.channels + c) * cfg.gen_h * cfg.gen_w;
      detail::render_frame(out, cfg.gen_h, cfg.gen_w, px, py, size, shape, fg, bg);
    }
  }
  return v;
}

template <class R>
Dataset<R> generate_dataset(const GenConfig& cfg) {
  if (cfg.num_classes < 1 || cfg.num_classes > kNumMotionClasses)
    throw ConfigError("num_classes must be in 1.." + std::to_string(kNumMotionClasses));
  if (cfg.num_videos < cfg.num_classes)
    throw ConfigError("num_videos (" + std::to_string(cfg.num_videos) +
                      ") must be >= num_classes (" + std::to_string(cfg.num_classes) + ")");
  if (cfg.gen_h < cfg.crop || cfg.gen_w < cfg.crop)
    throw ConfigError("generation size " + std::to_string(cfg.gen_h) + "x" +
                      std::to_string(cfg.gen_w) + " is smaller than the crop size " +
                      std::to_string(cfg.crop));
  if (cfg.frames < 2) throw ConfigError("videos need at least 2 frames");

  Dataset<R> ds;
  ds.cfg = cfg;
  ds.videos.resize(cfg.num_videos);
  parallel_for(cfg.num_videos,
               [&](int i) { ds.videos[i] = generate_video<R>(cfg, i); });

  // per-class split: the first train_fraction of each class's videos train
  std::vector<int> seen(cfg.num_classes, 0);
  std::vector<int> totals(cfg.num_classes, 0);
  for (const auto& v : ds.videos) ++totals[v.class_id];
  for (auto& v : ds.videos) {
    const int train_count =
        static_cast<int>(std::floor(totals[v.class_id] * cfg.train_fraction));
    v.train_split = seen[v.class_id] < train_count;
    ++seen[v.class_id];
  }
  return ds;
}

template <class R>
int num_clip_starts(const Video<R>& v, int n, int stride) {
  return v.frames - (n - 1) * stride;
}

template <class R>
Clip<R> clip_at(const Video<R>& v, int start, int n, int stride) {
  const int starts = num_clip_starts(v, n, stride);
  if (starts < 1)
    throw DataError("video " + std::to_string(v.id) + " is too short for clip length " +
                    std::to_string(n) + " at stride " + std::to_string(stride));
  if (start < 0 || start >= starts)
    throw DataError("clip start " + std::to_string(start) + " out of range 0.." +
                    std::to_string(starts - 1));
  Clip<R> c;
  c.video_id = v.id;
  c.start = start;
  c.stride = stride;
  c.n = n;
  c.h = v.h;
  c.w = v.w;
  c.channels = v.channels;
  const std::size_t frame_sz = static_cast<std::size_t>(v.channels) * v.h * v.w;
  c.pixels.resize(static_cast<std::size_t>(n) * frame_sz);
  for (int t = 0; t < n; ++t) {
    const R* src = v.frame_ptr(start + t * stride);
    std::copy_n(src, frame_sz, c.frame_ptr(t));
  }
  return c;
}

template <class R>
Clip<R> sample_clip(const Video<R>& v, int n, int stride, Rng& rng) {
  const int starts = num_clip_starts(v, n, stride);
  if (starts < 1)
    throw DataError("video " + std::to_string(v.id) + " is too short for clip length " +
                    std::to_string(n) + " at stride " + std::to_string(stride));
  const int start = static_cast<int>(rng.uniform_int(0, starts - 1));
  return clip_at(v, start, n, stride);
}

struct AugmentationParams {
  int crop_y = 0, crop_x = 0, crop = 16;
  bool flip = false;
  double brightness = 1.0;  // multiplicative
  double contrast = 1.0;    // pivoted on the clip mean
  double blur_sigma = 0.0;  // gaussian, radius-2 kernel
};

inline AugmentationParams draw_augmentation(int h, int w, int crop, Rng& rng) {
  AugmentationParams p;
  p.crop = crop;
  p.crop_y = static_cast<int>(rng.uniform_int(0, h - crop));
  p.crop_x = static_cast<int>(rng.uniform_int(0, w - crop));
  p.flip = rng.bernoulli(0.5);
  p.brightness = rng.uniform(0.8, 1.2);
  p.contrast = rng.uniform(0.8, 1.2);
  p.blur_sigma = rng.uniform(0.0, 1.0);
  return p;
}

inline AugmentationParams center_augmentation(int h, int w, int crop) {
  AugmentationParams p;
  p.crop = crop;
  p.crop_y = (h - crop) / 2;
  p.crop_x = (w - crop) / 2;
  return p;
}

// identical spatial transform on every frame: crop, flip, jitter, blur
template <class R>
Clip<R> augment(const Clip<R>& in, const AugmentationParams& p) {
  if (p.crop < 1 || p.crop_y < 0 || p.crop_x < 0 || p.crop_y + p.crop > in.h ||
      p.crop_x + p.crop > in.w)
    throw DataError("crop window " + std::to_string(p.crop) + "@(" +
                    std::to_string(p.crop_y) + "," + std::to_string(p.crop_x) +
                    ") exceeds frame " + std::to_string(in.h) + "x" + std::to_string(in.w));
  Clip<R> out;
  out.video_id = in.video_id;
  out.start = in.start;
  out.stride = in.stride;
  out.n = in.n;
  out.h = p.crop;
  out.w = p.crop;
  out.channels = in.channels;
  const int cw = p.crop;
  out.pixels.resize(static_cast<std::size_t>(in.n) * in.channels * cw * cw);

  for (int t = 0; t < in.n; ++t) {
    for (int c = 0; c < in.channels; ++c) {
      const R* src = in.frame_ptr(t) + static_cast<std::size_t>(c) * in.h * in.w;
      R* dst = out.frame_ptr(t) + static_cast<std::size_t>(c) * cw * cw;
      for (int y = 0; y < cw; ++y) {
        const R* srow = src + static_cast<std::size_t>(p.crop_y + y) * in.w + p.crop_x;
        R* drow = dst + static_cast<std::size_t>(y) * cw;
        if (p.flip) {
          for (int x = 0; x < cw; ++x) drow[x] = srow[cw - 1 - x];
        } else {
          std::copy_n(srow, cw, drow);
        }
      }
    }
  }

  if (p.brightness != 1.0 || p.contrast != 1.0) {
    double mean = 0.0;
    for (const R x : out.pixels) mean += static_cast<double>(x);
    mean /= static_cast<double>(out.pixels.size());
    for (R& x : out.pixels) {
      const double b = static_cast<double>(x) * p.brightness;
      x = static_cast<R>((b - mean) * p.contrast + mean);
    }
  }

  if (p.blur_sigma > 1e-9) {
    // separable radius-2 gaussian with clamped borders
    double k[5];
    double ksum = 0.0;
    for (int i = -2; i <= 2; ++i) {
      k[i + 2] = std::exp(-0.5 * i * i / (p.blur_sigma * p.blur_sigma));
      ksum += k[i + 2];
    }
    for (double& x : k) x /= ksum;
    std::vector<R> tmp(static_cast<std::size_t>(cw) * cw);
    for (int t = 0; t < out.n; ++t) {
      for (int c = 0; c < out.channels; ++c) {
        R* img = out.frame_ptr(t) + static_cast<std::size_t>(c) * cw * cw;
        for (int y = 0; y < cw; ++y) {
          for (int x = 0; x < cw; ++x) {
            double s = 0.0;
            for (int i = -2; i <= 2; ++i) {
              int xi = std::clamp(x + i, 0, cw - 1);
              s += k[i + 2] * static_cast<double>(img[y * cw + xi]);
            }
            tmp[static_cast<std::size_t>(y) * cw + x] = static_cast<R>(s);
          }
        }
        for (int x = 0; x < cw; ++x) {
          for (int y = 0; y < cw; ++y) {
            double s = 0.0;
            for (int i = -2; i <= 2; ++i) {
              int yi = std::clamp(y + i, 0, cw - 1);
              s += k[i + 2] * static_cast<double>(tmp[static_cast<std::size_t>(yi) * cw + x]);
            }
            img[static_cast<std::size_t>(y) * cw + x] = static_cast<R>(s);
          }
        }
      }
    }
  }
  return out;
}

// output frame t takes input frame perm[t]; pixels untouched
template <class R>
Clip<R> apply_shuffle(const Clip<R>& in, const med::Permutation& perm) {
  if (perm.size() != in.n)
    throw DataError("shuffle length " + std::to_string(perm.size()) +
                    " does not match clip length " + std::to_string(in.n));
  Clip<R> out = in;
  const std::size_t frame_sz = static_cast<std::size_t>(in.channels) * in.h * in.w;
  for (int t = 0; t < in.n; ++t)
    std::copy_n(in.frame_ptr(perm.order[t]), frame_sz, out.frame_ptr(t));
  return out;
}

// [frame][channel][h][w] -> tensor [C, T, H, W] (conv layout)
template <class R>
Tensor<R> clip_to_tensor(const Clip<R>& c) {
  std::vector<R> data(c.pixels.size());
  const std::size_t plane = static_cast<std::size_t>(c.h) * c.w;
  for (int ch = 0; ch < c.channels; ++ch)
    for (int t = 0; t < c.n; ++t)
      std::copy_n(c.frame_ptr(t) + ch * plane, plane,
                  data.data() + (static_cast<std::size_t>(ch) * c.n + t) * plane);
  return Tensor<R>::from({c.channels, c.n, c.h, c.w}, std::move(data));
}

// single frame as [C, H, W]
template <class R>
Tensor<R> frame_to_tensor(const Clip<R>& c, int t) {
  std::vector<R> data(c.frame_ptr(t),
                      c.frame_ptr(t) + static_cast<std::size_t>(c.channels) * c.h * c.w);
  return Tensor<R>::from({c.channels, c.h, c.w}, std::move(data));
}

template <class R>
struct FrameSample {
  int video_id = 0;
  int class_id = 0;
  int frame = 0;
  std::vector<R> pixels;  // [channel][h][w], generation resolution
};

// frames at a coarse stride (default 10) from the given split, for the
// image-level pre-training stage and the frame-ambiguity probe
template <class R>
std::vector<FrameSample<R>> sample_frames(const Dataset<R>& ds, int stride, bool train) {
  if (stride < 1) throw ConfigError("frame sampling stride must be >= 1");
  std::vector<FrameSample<R>> out;
  for (const auto& v : ds.videos) {
    if (v.train_split != train) continue;
    for (int t = 0; t < v.frames; t += stride) {
      FrameSample<R> f;
      f.video_id = v.id;
      f.class_id = v.class_id;
      f.frame = t;
      const std::size_t frame_sz = static_cast<std::size_t>(v.channels) * v.h * v.w;
      f.pixels.assign(v.frame_ptr(t), v.frame_ptr(t) + frame_sz);
      out.push_back(std::move(f));
    }
  }
  return out;
}

}  // namespace cacl::video
