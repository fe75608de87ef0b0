#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "cacl/ops.hpp"
#include "cacl/rng.hpp"
#include "cacl/tensor.hpp"

// Parameter bookkeeping and the two layer primitives the encoders are built
// from. Registration order is the canonical parameter order everywhere
// (optimizer, checkpoints, momentum updates).
namespace cacl {

template <class R>
Tensor<R> kaiming_uniform(std::vector<int> shape, int fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<R> data(static_cast<std::size_t>(numel_of(shape)));
  for (auto& x : data) x = static_cast<R>(rng.uniform(-bound, bound));
  return Tensor<R>::param(std::move(shape), std::move(data));
}

template <class R>
Tensor<R> normal_param(std::vector<int> shape, double sd, Rng& rng) {
  std::vector<R> data(static_cast<std::size_t>(numel_of(shape)));
  for (auto& x : data) x = static_cast<R>(rng.gaussian(0.0, sd));
  return Tensor<R>::param(std::move(shape), std::move(data));
}

template <class R>
Tensor<R> zeros_param(std::vector<int> shape) {
  return Tensor<R>::param(shape, std::vector<R>(static_cast<std::size_t>(numel_of(shape)), R(0)));
}

template <class R>
class ParamRegistry {
 public:
  Tensor<R> add(const std::string& name, Tensor<R> t) {
    for (auto& [n, p] : entries_)
      if (n == name) throw ConfigError("duplicate parameter name: " + name);
    entries_.emplace_back(name, t);
    return t;
  }

  const std::vector<std::pair<std::string, Tensor<R>>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  const Tensor<R>& find(const std::string& name) const {
    for (auto& [n, p] : entries_)
      if (n == name) return p;
    throw ConfigError("unknown parameter name: " + name);
  }

  void zero_grad() {
    for (auto& [n, p] : entries_) p.zero_grad();
  }

  // allocate zero gradients for parameters a loss did not touch
  void ensure_grads() {
    for (auto& [n, p] : entries_) p.node()->ensure_grad();
  }

  std::int64_t total_elements() const {
    std::int64_t s = 0;
    for (auto& [n, p] : entries_) s += p.numel();
    return s;
  }

  // exact elementwise copy; shapes must match pairwise (structural twin)
  void copy_from(const ParamRegistry& src) {
    if (src.size() != size())
      throw ShapeError("copy_params", "parameter count mismatch: " +
                                          std::to_string(src.size()) + " vs " +
                                          std::to_string(size()));
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      auto& dst = entries_[i].second;
      auto& s = src.entries()[i].second;
      if (dst.shape() != s.shape())
        throw ShapeError("copy_params", entries_[i].first + ": " + shape_str(s.shape()) +
                                            " vs " + shape_str(dst.shape()));
      dst.mutable_data() = s.data();
    }
  }

 private:
  std::vector<std::pair<std::string, Tensor<R>>> entries_;
};

template <class R>
struct Linear {
  Tensor<R> w;  // [in, out]
  Tensor<R> b;  // [out]

  static Linear create(const std::string& name, int in, int out, Rng& rng,
                       ParamRegistry<R>& reg) {
    Linear l;
    l.w = reg.add(name + ".w", kaiming_uniform<R>({in, out}, in, rng));
    l.b = reg.add(name + ".b", zeros_param<R>({out}));
    return l;
  }

  // x: [m, in] -> [m, out]
  Tensor<R> operator()(const Tensor<R>& x) const {
    return add_rowvec(matmul(x, w), b);
  }

  // vector input: [in] -> [out]
  Tensor<R> apply_vec(const Tensor<R>& x) const {
    const int in = w.shape()[0];
    auto y = (*this)(reshape(x, {1, in}));
    return reshape(y, {y.shape()[1]});
  }
};

// two-layer feed-forward head with relu in between
template <class R>
struct Ffn2 {
  Linear<R> l1, l2;

  static Ffn2 create(const std::string& name, int in, int hidden, int out, Rng& rng,
                     ParamRegistry<R>& reg) {
    Ffn2 f;
    f.l1 = Linear<R>::create(name + ".l1", in, hidden, rng, reg);
    f.l2 = Linear<R>::create(name + ".l2", hidden, out, rng, reg);
    return f;
  }

  Tensor<R> operator()(const Tensor<R>& x) const { return l2(relu(l1(x))); }

  Tensor<R> apply_vec(const Tensor<R>& x) const {
    return l2.apply_vec(relu(l1.apply_vec(x)));
  }
};

}  // namespace cacl
