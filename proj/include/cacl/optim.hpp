#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "cacl/nn.hpp"

namespace cacl {

inline constexpr double kPi = 3.14159265358979323846;

// lr(t) = lr_base * 0.5 * (1 + cos(pi * t / T)), stepped per epoch
inline double cosine_lr(double lr_base, int epoch, int total_epochs) {
  if (total_epochs <= 0) throw ConfigError("cosine schedule needs total_epochs > 0");
  const double frac = static_cast<double>(epoch) / static_cast<double>(total_epochs);
  return lr_base * 0.5 * (1.0 + std::cos(kPi * frac));
}

// SGD with classic momentum; weight decay is added to the gradient.
template <class R>
class Sgd {
 public:
  struct Config {
    double lr_base = 1e-3;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    int total_epochs = 30;
  };

  explicit Sgd(Config cfg) : cfg_(cfg) {}

  double lr_at(int epoch) const { return cosine_lr(cfg_.lr_base, epoch, cfg_.total_epochs); }

  void step(ParamRegistry<R>& params, int epoch) {
    const R lr = static_cast<R>(lr_at(epoch));
    const R mom = static_cast<R>(cfg_.momentum);
    const R wd = static_cast<R>(cfg_.weight_decay);
    for (auto& [name, p] : params.entries()) {
      auto node = p.node();
      if (node->grad.empty())
        throw NumericFault("sgd_step: parameter '" + name + "' has no gradient");
      auto& buf = buffers_[node.get()];
      if (buf.empty()) buf.assign(node->value.size(), R(0));
      auto& v = node->value;
      auto& g = node->grad;
      for (std::size_t i = 0; i < v.size(); ++i) {
        const R eff = g[i] + wd * v[i];
        buf[i] = mom * buf[i] + eff;
        v[i] -= lr * buf[i];
      }
    }
  }

  const Config& config() const { return cfg_; }

 private:
  Config cfg_;
  std::unordered_map<const void*, std::vector<R>> buffers_;
};

// target <- alpha * target + (1 - alpha) * online, pairwise over registries
template <class R>
void momentum_update(const ParamRegistry<R>& online, ParamRegistry<R>& target, double alpha) {
  if (alpha < 0.0 || alpha >= 1.0)
    throw ConfigError("momentum coefficient must lie in [0,1), got " + std::to_string(alpha));
  if (online.size() != target.size())
    throw ShapeError("momentum_update", "parameter count mismatch: " +
                                            std::to_string(online.size()) + " vs " +
                                            std::to_string(target.size()));
  const R a = static_cast<R>(alpha);
  for (std::size_t i = 0; i < online.size(); ++i) {
    const auto& src = online.entries()[i].second;
    auto dst = target.entries()[i].second;
    if (src.shape() != dst.shape())
      throw ShapeError("momentum_update", online.entries()[i].first + ": " +
                                              shape_str(src.shape()) + " vs " +
                                              shape_str(dst.shape()));
    auto& d = dst.mutable_data();
    const auto& s = src.data();
    for (std::size_t j = 0; j < d.size(); ++j) d[j] = a * d[j] + (R(1) - a) * s[j];
  }
}

}  // namespace cacl
