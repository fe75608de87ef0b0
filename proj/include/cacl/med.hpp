#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cacl/common.hpp"
#include "cacl/rng.hpp"

// Minimum-edit-distance machinery for frame-order shuffles: the Levenshtein
// DP, the feasible-degree characterization with constructive witnesses, and
// the uniform-over-degrees shuffle sampler.
namespace cacl::med {

inline constexpr int kMinClipLen = 2;
inline constexpr int kMaxClipLen = 32;
inline constexpr int kMaxExhaustiveLen = 8;

struct Permutation {
  std::vector<int> order;  // output frame t takes input frame order[t]

  static Permutation identity(int n) {
    Permutation p;
    p.order.resize(n);
    std::iota(p.order.begin(), p.order.end(), 0);
    return p;
  }

  // validates the bijection invariant
  static Permutation of(std::vector<int> order) {
    int n = static_cast<int>(order.size());
    if (n < kMinClipLen)
      throw DataError("permutation length " + std::to_string(n) + " < " +
                      std::to_string(kMinClipLen));
    std::vector<char> seen(n, 0);
    for (int v : order) {
      if (v < 0 || v >= n || seen[v])
        throw DataError("permutation is not a bijection on 0.." + std::to_string(n - 1));
      seen[v] = 1;
    }
    Permutation p;
    p.order = std::move(order);
    return p;
  }

  static Permutation random(int n, Rng& rng) {
    Permutation p;
    p.order = rng.permutation(n);
    return p;
  }

  int size() const { return static_cast<int>(order.size()); }

  bool is_identity() const {
    for (int i = 0; i < size(); ++i)
      if (order[i] != i) return false;
    return true;
  }

  Permutation inverse() const {
    Permutation inv;
    inv.order.resize(order.size());
    for (int i = 0; i < size(); ++i) inv.order[order[i]] = i;
    return inv;
  }

  bool operator==(const Permutation&) const = default;
};

// Two-row DP over the standard recurrence; unit insert/delete/substitute.
template <class T>
int levenshtein(std::span<const T> a, std::span<const T> b) {
  const int na = static_cast<int>(a.size());
  const int nb = static_cast<int>(b.size());
  if (na == 0) return nb;
  if (nb == 0) return na;
  std::vector<int> prev(nb + 1), cur(nb + 1);
  std::iota(prev.begin(), prev.end(), 0);
  for (int i = 1; i <= na; ++i) {
    cur[0] = i;
    const T ai = a[i - 1];
    for (int j = 1; j <= nb; ++j) {
      int sub = prev[j - 1] + (ai == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[nb];
}

template <class T>
int levenshtein(const std::vector<T>& a, const std::vector<T>& b) {
  return levenshtein(std::span<const T>(a), std::span<const T>(b));
}

inline int levenshtein(const std::string& a, const std::string& b) {
  return levenshtein(std::span<const char>(a.data(), a.size()),
                     std::span<const char>(b.data(), b.size()));
}

// Banded DP with early cutoff: exact when the distance is <= limit, otherwise
// returns limit + 1. Used by the rejection sampler where most candidates
// overshoot a small target degree.
template <class T>
int levenshtein_bounded(std::span<const T> a, std::span<const T> b, int limit) {
  const int na = static_cast<int>(a.size());
  const int nb = static_cast<int>(b.size());
  const int big = limit + 1;
  if (limit < 0) return big;
  if (std::abs(na - nb) > limit) return big;
  if (na == 0) return nb;
  if (nb == 0) return na;
  std::vector<int> prev(nb + 1, big), cur(nb + 1, big);
  for (int j = 0; j <= std::min(nb, limit); ++j) prev[j] = j;
  for (int i = 1; i <= na; ++i) {
    int jlo = std::max(1, i - limit);
    int jhi = std::min(nb, i + limit);
    cur[jlo - 1] = (i - (jlo - 1) <= limit && jlo - 1 == 0) ? i : big;
    const T ai = a[i - 1];
    int row_min = cur[jlo - 1];
    for (int j = jlo; j <= jhi; ++j) {
      int sub = prev[j - 1] + (ai == b[j - 1] ? 0 : 1);
      int v = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
      if (v > big) v = big;
      cur[j] = v;
      row_min = std::min(row_min, v);
    }
    if (row_min > limit) return big;
    std::swap(prev, cur);
    std::fill(cur.begin(), cur.end(), big);
  }
  return std::min(prev[nb], big);
}

inline int med_degree(const Permutation& p) {
  Permutation id = Permutation::identity(p.size());
  return levenshtein(std::span<const int>(id.order), std::span<const int>(p.order));
}

inline int med_degree_bounded(const Permutation& p, int limit) {
  Permutation id = Permutation::identity(p.size());
  return levenshtein_bounded(std::span<const int>(id.order),
                             std::span<const int>(p.order), limit);
}

struct DegreeDistribution {
  int n = 0;
  std::map<int, std::uint64_t> counts;

  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto& [d, c] : counts) s += c;
    return s;
  }
};

// Exhaustive over all n! permutations; the oracle behind the feasibility and
// non-uniformity claims for small n.
inline DegreeDistribution enumerate_degree_distribution(int n) {
  if (n < kMinClipLen) throw ConfigError("degree enumeration requires n >= 2");
  if (n > kMaxExhaustiveLen)
    throw ConfigError("degree enumeration is factorial; n <= 8 required, got " +
                      std::to_string(n));
  DegreeDistribution dist;
  dist.n = n;
  Permutation p = Permutation::identity(n);
  do {
    ++dist.counts[med_degree(p)];
  } while (std::next_permutation(p.order.begin(), p.order.end()));
  return dist;
}

namespace detail {

inline Permutation rotate_left(int n, int k) {
  Permutation p;
  p.order.resize(n);
  for (int i = 0; i < n; ++i) p.order[i] = (i + k) % n;
  return p;
}

inline Permutation prefix_reversal(int n, int k) {
  Permutation p = Permutation::identity(n);
  std::reverse(p.order.begin(), p.order.begin() + k);
  return p;
}

// [1,0,3,2] head (distance 3 to the identity on four symbols) followed by a
// rotated tail; DP decides what each candidate actually achieves.
inline Permutation swapped_head_rotated_tail(int n, int j) {
  Permutation p;
  p.order = {1, 0, 3, 2};
  int tail = n - 4;
  for (int i = 0; i < tail; ++i) p.order.push_back(4 + (i + j) % tail);
  return p;
}

inline std::map<int, Permutation> build_witnesses(int n) {
  std::map<int, Permutation> w;
  auto consider = [&](const Permutation& p) {
    int d = med_degree(p);
    w.try_emplace(d, p);
  };
  w.emplace(0, Permutation::identity(n));
  for (int k = 1; k < n; ++k) consider(rotate_left(n, k));
  for (int k = 2; k <= n; ++k) consider(prefix_reversal(n, k));
  if (n >= 5) {
    for (int j = 0; j < n - 4; ++j) consider(swapped_head_rotated_tail(n, j));
  }

  auto missing = [&] {
    std::vector<int> m;
    for (int d = 2; d <= n; ++d)
      if (!w.count(d)) m.push_back(d);
    return m;
  };

  // Randomized fill for anything the constructive families missed; the seed
  // is fixed so the table is reproducible.
  Rng rng(derive_seed(0x5157u, "degree-witness", static_cast<std::uint64_t>(n)));
  for (int t = 0; t < 50000 && !missing().empty(); ++t) {
    Permutation p = Permutation::random(n, rng);
    consider(p);
  }
  // Hill-climb from the nearest known degree toward each remaining target.
  for (int target : missing()) {
    int best_gap = std::numeric_limits<int>::max();
    Permutation cur = Permutation::identity(n);
    for (auto& [d, p] : w) {
      if (std::abs(d - target) < best_gap) {
        best_gap = std::abs(d - target);
        cur = p;
      }
    }
    int cur_d = med_degree(cur);
    for (int it = 0; it < 20000 && cur_d != target; ++it) {
      Permutation cand = cur;
      int i = static_cast<int>(rng.uniform_int(0, n - 1));
      int j = static_cast<int>(rng.uniform_int(0, n - 1));
      std::swap(cand.order[i], cand.order[j]);
      int d = med_degree(cand);
      if (!w.count(d)) w.emplace(d, cand);
      if (std::abs(d - target) <= std::abs(cur_d - target)) {
        cur = std::move(cand);
        cur_d = d;
      }
    }
    if (cur_d == target) w.try_emplace(target, cur);
  }

  for (auto& [d, p] : w) {
    if (med_degree(p) != d)
      throw VerificationError("witness table self-check failed at degree " +
                              std::to_string(d));
  }
  return w;
}

}  // namespace detail

// Verified witness permutation per attainable degree, cached per n.
inline const std::map<int, Permutation>& degree_witnesses(int n) {
  if (n < kMinClipLen || n > kMaxClipLen)
    throw ConfigError("clip length n must be in [2, 32], got " + std::to_string(n));
  static std::mutex mu;
  static std::map<int, std::map<int, Permutation>> cache;
  std::lock_guard<std::mutex> lk(mu);
  auto it = cache.find(n);
  if (it == cache.end()) it = cache.emplace(n, detail::build_witnesses(n)).first;
  return it->second;
}

// Exactly the attainable degrees: exhaustive for n <= 8, witness-validated
// for larger n. Degree 1 is impossible for any n (a single edit changes the
// length or the symbol multiset).
inline std::vector<int> feasible_degrees(int n) {
  if (n < kMinClipLen || n > kMaxClipLen)
    throw ConfigError("clip length n must be in [2, 32], got " + std::to_string(n));
  std::vector<int> out;
  if (n <= kMaxExhaustiveLen) {
    static std::mutex mu;
    static std::map<int, std::vector<int>> cache;
    std::lock_guard<std::mutex> lk(mu);
    auto it = cache.find(n);
    if (it == cache.end()) {
      std::vector<int> degs;
      for (auto& [d, c] : enumerate_degree_distribution(n).counts) degs.push_back(d);
      it = cache.emplace(n, std::move(degs)).first;
    }
    out = it->second;
  } else {
    for (auto& [d, p] : degree_witnesses(n)) out.push_back(d);
  }
  return out;
}

inline int num_degree_classes(int n) {
  return static_cast<int>(feasible_degrees(n).size());
}

// Ascending-order bijection between attainable degrees and class labels.
inline int degree_to_label(int degree, int n) {
  const auto degs = feasible_degrees(n);
  auto it = std::lower_bound(degs.begin(), degs.end(), degree);
  if (it == degs.end() || *it != degree)
    throw DataError("degree " + std::to_string(degree) +
                    " is not attainable for n = " + std::to_string(n));
  return static_cast<int>(it - degs.begin());
}

inline int label_to_degree(int label, int n) {
  const auto degs = feasible_degrees(n);
  if (label < 0 || label >= static_cast<int>(degs.size()))
    throw DataError("label " + std::to_string(label) + " out of range 0.." +
                    std::to_string(degs.size() - 1));
  return degs[static_cast<std::size_t>(label)];
}

struct ShuffleSample {
  Permutation perm;
  int degree = 0;
  int label = 0;
};

struct SamplerOptions {
  int attempt_cap = 10000;        // rejection draws before the witness fallback
  int fallback_perturbations = 64;
};

namespace detail {

inline ShuffleSample finish_sample(Permutation p, int target, int n) {
  // Mandatory re-verification of the degree postcondition on every return.
  if (med_degree(p) != target)
    throw VerificationError("sampler degree re-verification failed (target " +
                            std::to_string(target) + ")");
  ShuffleSample s;
  s.perm = std::move(p);
  s.degree = target;
  s.label = degree_to_label(target, n);
  return s;
}

}  // namespace detail

// Uniform over attainable degrees (not over permutations within a degree):
// draw the target degree, then rejection-sample permutations until one
// matches; rare degrees fall back to the cached witness perturbed by
// transpositions that preserve the target degree.
inline ShuffleSample sample_uniform_degree(int n, Rng& rng,
                                           const SamplerOptions& opt = {}) {
  const auto degs = feasible_degrees(n);
  const int target =
      degs[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(degs.size()) - 1))];
  if (target == 0) return detail::finish_sample(Permutation::identity(n), 0, n);

  for (int attempt = 0; attempt < opt.attempt_cap; ++attempt) {
    Permutation p = Permutation::random(n, rng);
    if (med_degree_bounded(p, target) == target)
      return detail::finish_sample(std::move(p), target, n);
  }

  const auto& table = degree_witnesses(n);
  auto it = table.find(target);
  if (it == table.end())
    throw VerificationError("sampling exhausted: no witness for degree " +
                            std::to_string(target) + " at n = " + std::to_string(n));
  for (int k = 0; k < opt.fallback_perturbations; ++k) {
    Permutation cand = it->second;
    int swaps = 1 + static_cast<int>(rng.uniform_int(0, 2));
    for (int s = 0; s < swaps; ++s) {
      int i = static_cast<int>(rng.uniform_int(0, n - 1));
      int j = static_cast<int>(rng.uniform_int(0, n - 1));
      std::swap(cand.order[i], cand.order[j]);
    }
    if (med_degree_bounded(cand, target) == target)
      return detail::finish_sample(std::move(cand), target, n);
  }
  return detail::finish_sample(it->second, target, n);
}

// Plain shuffle (uniform over S_n) with its exact degree; the non-uniform
// sampling arm of the ablations.
inline ShuffleSample sample_random_shuffle(int n, Rng& rng) {
  Permutation p = Permutation::random(n, rng);
  int d = med_degree(p);
  return detail::finish_sample(std::move(p), d, n);
}

}  // namespace cacl::med
