#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "cacl/tensor.hpp"

// Differentiable ops. Every op validates shapes up front (ShapeError names
// the op and the offending shapes), checks outputs for finiteness, and
// records an exact analytic backward rule.
namespace cacl {

namespace detail {

template <class R>
Tensor<R> make_result_v(const char* op, std::vector<int> shape, std::vector<R> value,
                        const std::vector<Tensor<R>>& inputs,
                        std::function<void(Node<R>&)> backprop) {
  if (static_cast<std::int64_t>(value.size()) != numel_of(shape))
    throw ShapeError(op, "internal: result buffer does not match " + shape_str(shape));
  check_finite(op, value);
  auto n = std::make_shared<Node<R>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->id = next_node_id();
  bool track = grad_enabled();
  if (track) {
    track = false;
    for (const auto& t : inputs) track = track || t.requires_grad();
  }
  if (track) {
    n->requires_grad = true;
    for (const auto& t : inputs) n->parents.push_back(t.node());
    n->backprop = std::move(backprop);
  }
  return Tensor<R>(std::move(n));
}

inline void require(bool cond, const char* op, const std::string& msg) {
  if (!cond) throw ShapeError(op, msg);
}

// ---- raw matrix kernels (also used inside backward closures) ----

// C[m,n] += A[m,k] * B[k,n]
template <class R>
void gemm_nn(int m, int k, int n, const R* a, const R* b, R* c) {
  for (int i = 0; i < m; ++i) {
    const R* arow = a + static_cast<std::size_t>(i) * k;
    R* crow = c + static_cast<std::size_t>(i) * n;
    for (int l = 0; l < k; ++l) {
      const R av = arow[l];
      const R* brow = b + static_cast<std::size_t>(l) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <class R>
void gemm_nt(int m, int k, int n, const R* a, const R* b, R* c) {
  for (int i = 0; i < m; ++i) {
    const R* arow = a + static_cast<std::size_t>(i) * k;
    R* crow = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const R* brow = b + static_cast<std::size_t>(j) * k;
      R acc = 0;
      for (int l = 0; l < k; ++l) acc += arow[l] * brow[l];
      crow[j] += acc;
    }
  }
}

// C[m,n] += A[k,m]^T * B[k,n]
template <class R>
void gemm_tn(int m, int k, int n, const R* a, const R* b, R* c) {
  for (int l = 0; l < k; ++l) {
    const R* arow = a + static_cast<std::size_t>(l) * m;
    const R* brow = b + static_cast<std::size_t>(l) * n;
    for (int i = 0; i < m; ++i) {
      const R av = arow[i];
      R* crow = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

// ---- elementwise ----

template <class R>
Tensor<R> add(const Tensor<R>& a, const Tensor<R>& b) {
  detail::require(a.shape() == b.shape(), "add",
                  shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<R> out(a.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.data()[i];
  auto pa = a.node();
  auto pb = b.node();
  return detail::make_result<R>("add", a.shape(), std::move(out), {a, b},
                                [pa, pb](Node<R>& o) {
                                  if (pa->requires_grad) {
                                    pa->ensure_grad();
                                    for (std::size_t i = 0; i < o.grad.size(); ++i)
                                      pa->grad[i] += o.grad[i];
                                  }
                                  if (pb->requires_grad) {
                                    pb->ensure_grad();
                                    for (std::size_t i = 0; i < o.grad.size(); ++i)
                                      pb->grad[i] += o.grad[i];
                                  }
                                });
}

template <class R>
Tensor<R> sub(const Tensor<R>& a, const Tensor<R>& b) {
  detail::require(a.shape() == b.shape(), "sub",
                  shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<R> out(a.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.data()[i];
  auto pa = a.node();
  auto pb = b.node();
  return detail::make_result<R>("sub", a.shape(), std::move(out), {a, b},
                                [pa, pb](Node<R>& o) {
                                  if (pa->requires_grad) {
                                    pa->ensure_grad();
                                    for (std::size_t i = 0; i < o.grad.size(); ++i)
                                      pa->grad[i] += o.grad[i];
                                  }
                                  if (pb->requires_grad) {
                                    pb->ensure_grad();
                                    for (std::size_t i = 0; i < o.grad.size(); ++i)
                                      pb->grad[i] -= o.grad[i];
                                  }
                                });
}

template <class R>
Tensor<R> mul(const Tensor<R>& a, const Tensor<R>& b) {
  detail::require(a.shape() == b.shape(), "mul",
                  shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<R> out(a.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.data()[i];
  auto pa = a.node();
  auto pb = b.node();
  return detail::make_result<R>("mul", a.shape(), std::move(out), {a, b},
                                [pa, pb](Node<R>& o) {
                                  if (pa->requires_grad) {
                                    pa->ensure_grad();
                                    for (std::size_t i = 0; i < o.grad.size(); ++i)
                                      pa->grad[i] += o.grad[i] * pb->value[i];
                                  }
                                  if (pb->requires_grad) {
                                    pb->ensure_grad();
                                    for (std::size_t i = 0; i < o.grad.size(); ++i)
                                      pb->grad[i] += o.grad[i] * pa->value[i];
                                  }
                                });
}

template <class R>
Tensor<R> scale(const Tensor<R>& a, R c) {
  std::vector<R> out(a.data());
  for (R& x : out) x *= c;
  auto pa = a.node();
  return detail::make_result<R>("scale", a.shape(), std::move(out), {a},
                                [pa, c](Node<R>& o) {
                                  if (!pa->requires_grad) return;
                                  pa->ensure_grad();
                                  for (std::size_t i = 0; i < o.grad.size(); ++i)
                                    pa->grad[i] += c * o.grad[i];
                                });
}

template <class R>
Tensor<R> add_const(const Tensor<R>& a, R c) {
  std::vector<R> out(a.data());
  for (R& x : out) x += c;
  auto pa = a.node();
  return detail::make_result<R>("add_const", a.shape(), std::move(out), {a},
                                [pa](Node<R>& o) {
                                  if (!pa->requires_grad) return;
                                  pa->ensure_grad();
                                  for (std::size_t i = 0; i < o.grad.size(); ++i)
                                    pa->grad[i] += o.grad[i];
                                });
}

template <class R>
Tensor<R> relu(const Tensor<R>& a) {
  std::vector<R> out(a.data());
  for (R& x : out) x = x > R(0) ? x : R(0);
  auto pa = a.node();
  return detail::make_result<R>("relu", a.shape(), std::move(out), {a},
                                [pa](Node<R>& o) {
                                  if (!pa->requires_grad) return;
                                  pa->ensure_grad();
                                  for (std::size_t i = 0; i < o.grad.size(); ++i)
                                    if (pa->value[i] > R(0)) pa->grad[i] += o.grad[i];
                                });
}

template <class R>
Tensor<R> vexp(const Tensor<R>& a) {
  std::vector<R> out(a.data());
  for (R& x : out) x = std::exp(x);
  auto pa = a.node();
  return detail::make_result<R>("exp", a.shape(), std::move(out), {a},
                                [pa](Node<R>& o) {
                                  if (!pa->requires_grad) return;
                                  pa->ensure_grad();
                                  for (std::size_t i = 0; i < o.grad.size(); ++i)
                                    pa->grad[i] += o.grad[i] * o.value[i];
                                });
}

template <class R>
Tensor<R> vlog(const Tensor<R>& a) {
  std::vector<R> out(a.data());
  for (R& x : out) {
    if (!(x > R(0))) throw NumericFault("log of a non-positive value");
    x = std::log(x);
  }
  auto pa = a.node();
  return detail::make_result<R>("log", a.shape(), std::move(out), {a},
                                [pa](Node<R>& o) {
                                  if (!pa->requires_grad) return;
                                  pa->ensure_grad();
                                  for (std::size_t i = 0; i < o.grad.size(); ++i)
                                    pa->grad[i] += o.grad[i] / pa->value[i];
                                });
}

// ---- reductions ----

template <class R>
Tensor<R> sum(const Tensor<R>& a) {
  R s = 0;
  for (R x : a.data()) s += x;
  auto pa = a.node();
  return detail::make_result<R>("sum", {1}, {s}, {a}, [pa](Node<R>& o) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (R& g : pa->grad) g += o.grad[0];
  });
}

template <class R>
Tensor<R> mean(const Tensor<R>& a) {
  R s = 0;
  for (R x : a.data()) s += x;
  const R inv = R(1) / static_cast<R>(a.numel());
  auto pa = a.node();
  return detail::make_result<R>("mean", {1}, {s * inv}, {a}, [pa, inv](Node<R>& o) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (R& g : pa->grad) g += o.grad[0] * inv;
  });
}

template <class R>
Tensor<R> dot(const Tensor<R>& a, const Tensor<R>& b) {
  detail::require(a.numel() == b.numel(), "dot",
                  shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  R s = 0;
  for (std::size_t i = 0; i < a.data().size(); ++i) s += a.data()[i] * b.data()[i];
  auto pa = a.node();
  auto pb = b.node();
  return detail::make_result<R>("dot", {1}, {s}, {a, b}, [pa, pb](Node<R>& o) {
    const R g = o.grad[0];
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += g * pb->value[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < pb->grad.size(); ++i) pb->grad[i] += g * pa->value[i];
    }
  });
}

// row-wise sum over the last axis: [.., n] -> [rows]
template <class R>
Tensor<R> sum_rows(const Tensor<R>& a) {
  detail::require(!a.shape().empty(), "sum_rows", "rank-0 input");
  const int n = a.shape().back();
  const int rows = static_cast<int>(a.numel() / n);
  std::vector<R> out(rows, R(0));
  for (int r = 0; r < rows; ++r) {
    const R* src = a.data().data() + static_cast<std::size_t>(r) * n;
    R s = 0;
    for (int j = 0; j < n; ++j) s += src[j];
    out[r] = s;
  }
  auto pa = a.node();
  return detail::make_result<R>("sum_rows", {rows}, std::move(out), {a},
                                [pa, n, rows](Node<R>& o) {
                                  if (!pa->requires_grad) return;
                                  pa->ensure_grad();
                                  for (int r = 0; r < rows; ++r) {
                                    R* dst = pa->grad.data() + static_cast<std::size_t>(r) * n;
                                    const R g = o.grad[r];
                                    for (int j = 0; j < n; ++j) dst[j] += g;
                                  }
                                });
}

// ---- matrix ops ----

template <class R>
Tensor<R> matmul(const Tensor<R>& a, const Tensor<R>& b) {
  detail::require(a.shape().size() == 2 && b.shape().size() == 2 &&
                      a.shape()[1] == b.shape()[0],
                  "matmul", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<R> out(static_cast<std::size_t>(m) * n, R(0));
  detail::gemm_nn(m, k, n, a.data().data(), b.data().data(), out.data());
  auto pa = a.node();
  auto pb = b.node();
  return detail::make_result<R>("matmul", {m, n}, std::move(out), {a, b},
                                [pa, pb, m, k, n](Node<R>& o) {
                                  if (pa->requires_grad) {
                                    pa->ensure_grad();
                                    detail::gemm_nt(m, n, k, o.grad.data(),
                                                    pb->value.data(), pa->grad.data());
                                  }
                                  if (pb->requires_grad) {
                                    pb->ensure_grad();
                                    detail::gemm_tn(k, m, n, pa->value.data(),
                                                    o.grad.data(), pb->grad.data());
                                  }
                                });
}

// A[m,k] * B[n,k]^T -> [m,n]
template <class R>
Tensor<R> matmul_nt(const Tensor<R>& a, const Tensor<R>& b) {
  detail::require(a.shape().size() == 2 && b.shape().size() == 2 &&
                      a.shape()[1] == b.shape()[1],
                  "matmul_nt", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  std::vector<R> out(static_cast<std::size_t>(m) * n, R(0));
  detail::gemm_nt(m, k, n, a.data().data(), b.data().data(), out.data());
  auto pa = a.node();
  auto pb = b.node();
  return detail::make_result<R>("matmul_nt", {m, n}, std::move(out), {a, b},
                                [pa, pb, m, k, n](Node<R>& o) {
                                  if (pa->requires_grad) {
                                    pa->ensure_grad();
                                    detail::gemm_nn(m, n, k, o.grad.data(),
                                                    pb->value.data(), pa->grad.data());
                                  }
                                  if (pb->requires_grad) {
                                    pb->ensure_grad();
                                    detail::gemm_tn(n, m, k, o.grad.data(),
                                                    pa->value.data(), pb->grad.data());
                                  }
                                });
}

// row-wise inner products of two equally shaped matrices: [m,n]x[m,n] -> [m]
template <class R>
Tensor<R> rows_dot(const Tensor<R>& a, const Tensor<R>& b) {
  detail::require(a.shape() == b.shape() && a.shape().size() == 2, "rows_dot",
                  shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int m = a.shape()[0], n = a.shape()[1];
  std::vector<R> out(m, R(0));
  for (int i = 0; i < m; ++i) {
    const R* ar = a.data().data() + static_cast<std::size_t>(i) * n;
    const R* br = b.data().data() + static_cast<std::size_t>(i) * n;
    R s = 0;
    for (int j = 0; j < n; ++j) s += ar[j] * br[j];
    out[i] = s;
  }
  auto pa = a.node();
  auto pb = b.node();
  return detail::make_result<R>("rows_dot", {m}, std::move(out), {a, b},
                                [pa, pb, m, n](Node<R>& o) {
                                  for (int i = 0; i < m; ++i) {
                                    const R g = o.grad[i];
                                    const std::size_t off = static_cast<std::size_t>(i) * n;
                                    if (pa->requires_grad) {
                                      pa->ensure_grad();
                                      for (int j = 0; j < n; ++j)
                                        pa->grad[off + j] += g * pb->value[off + j];
                                    }
                                    if (pb->requires_grad) {
                                      pb->ensure_grad();
                                      for (int j = 0; j < n; ++j)
                                        pb->grad[off + j] += g * pa->value[off + j];
                                    }
                                  }
                                });
}

template <class R>
Tensor<R> add_rowvec(const Tensor<R>& m, const Tensor<R>& b) {
  detail::require(m.shape().size() == 2 && b.numel() == m.shape()[1], "add_rowvec",
                  shape_str(m.shape()) + " vs " + shape_str(b.shape()));
  const int rows = m.shape()[0], n = m.shape()[1];
  std::vector<R> out(m.data());
  for (int r = 0; r < rows; ++r)
    for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(r) * n + j] += b.data()[j];
  auto pm = m.node();
  auto pb = b.node();
  return detail::make_result<R>("add_rowvec", m.shape(), std::move(out), {m, b},
                                [pm, pb, rows, n](Node<R>& o) {
                                  if (pm->requires_grad) {
                                    pm->ensure_grad();
                                    for (std::size_t i = 0; i < o.grad.size(); ++i)
                                      pm->grad[i] += o.grad[i];
                                  }
                                  if (pb->requires_grad) {
                                    pb->ensure_grad();
                                    for (int r = 0; r < rows; ++r)
                                      for (int j = 0; j < n; ++j)
                                        pb->grad[j] += o.grad[static_cast<std::size_t>(r) * n + j];
                                  }
                                });
}

// stack equal-size tensors (flattened) as the rows of a new matrix
template <class R>
Tensor<R> stack_rows(const std::vector<Tensor<R>>& rows) {
  detail::require(!rows.empty(), "stack_rows", "empty input list");
  const int n = static_cast<int>(rows[0].numel());
  const int m = static_cast<int>(rows.size());
  std::vector<R> out;
  out.reserve(static_cast<std::size_t>(m) * n);
  for (const auto& r : rows) {
    detail::require(static_cast<int>(r.numel()) == n, "stack_rows",
                    "row size mismatch: " + shape_str(r.shape()));
    out.insert(out.end(), r.data().begin(), r.data().end());
  }
  std::vector<std::shared_ptr<Node<R>>> parents;
  parents.reserve(rows.size());
  for (const auto& r : rows) parents.push_back(r.node());
  return detail::make_result_v<R>("stack_rows", {m, n}, std::move(out), rows,
                                  [parents, n](Node<R>& o) {
                                    for (std::size_t i = 0; i < parents.size(); ++i) {
                                      auto& p = parents[i];
                                      if (!p->requires_grad) continue;
                                      p->ensure_grad();
                                      const R* g = o.grad.data() + i * n;
                                      for (int j = 0; j < n; ++j) p->grad[j] += g[j];
                                    }
                                  });
}

// flatten-and-concatenate into one vector
template <class R>
Tensor<R> concat_vecs(const std::vector<Tensor<R>>& parts) {
  detail::require(!parts.empty(), "concat_vecs", "empty input list");
  std::vector<R> out;
  std::vector<int> offsets;
  for (const auto& p : parts) {
    offsets.push_back(static_cast<int>(out.size()));
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  std::vector<std::shared_ptr<Node<R>>> parents;
  for (const auto& p : parts) parents.push_back(p.node());
  const int total = static_cast<int>(out.size());
  return detail::make_result_v<R>("concat_vecs", {total}, std::move(out), parts,
                                  [parents, offsets](Node<R>& o) {
                                    for (std::size_t i = 0; i < parents.size(); ++i) {
                                      auto& p = parents[i];
                                      if (!p->requires_grad) continue;
                                      p->ensure_grad();
                                      const R* g = o.grad.data() + offsets[i];
                                      for (std::size_t j = 0; j < p->grad.size(); ++j)
                                        p->grad[j] += g[j];
                                    }
                                  });
}

template <class R>
Tensor<R> concat_vec(const Tensor<R>& a, const Tensor<R>& b) {
  return concat_vecs<R>({a, b});
}

// single row of a matrix as a vector
template <class R>
Tensor<R> row(const Tensor<R>& m, int i) {
  detail::require(m.shape().size() == 2, "row", "expected matrix, got " + shape_str(m.shape()));
  const int rows = m.shape()[0], n = m.shape()[1];
  detail::require(i >= 0 && i < rows, "row", "row index out of range");
  std::vector<R> out(m.data().begin() + static_cast<std::size_t>(i) * n,
                     m.data().begin() + static_cast<std::size_t>(i + 1) * n);
  auto pm = m.node();
  return detail::make_result<R>("row", {n}, std::move(out), {m}, [pm, i, n](Node<R>& o) {
    if (!pm->requires_grad) return;
    pm->ensure_grad();
    R* dst = pm->grad.data() + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) dst[j] += o.grad[j];
  });
}

// contiguous column slice [c0, c1) of a matrix
template <class R>
Tensor<R> cols(const Tensor<R>& m, int c0, int c1) {
  detail::require(m.shape().size() == 2, "cols", "expected matrix, got " + shape_str(m.shape()));
  const int rows = m.shape()[0], n = m.shape()[1];
  detail::require(0 <= c0 && c0 < c1 && c1 <= n, "cols", "bad column range");
  const int w = c1 - c0;
  std::vector<R> out(static_cast<std::size_t>(rows) * w);
  for (int r = 0; r < rows; ++r)
    std::copy_n(m.data().data() + static_cast<std::size_t>(r) * n + c0, w,
                out.data() + static_cast<std::size_t>(r) * w);
  auto pm = m.node();
  return detail::make_result<R>("cols", {rows, w}, std::move(out), {m},
                                [pm, rows, n, c0, w](Node<R>& o) {
                                  if (!pm->requires_grad) return;
                                  pm->ensure_grad();
                                  for (int r = 0; r < rows; ++r) {
                                    R* dst = pm->grad.data() + static_cast<std::size_t>(r) * n + c0;
                                    const R* g = o.grad.data() + static_cast<std::size_t>(r) * w;
                                    for (int j = 0; j < w; ++j) dst[j] += g[j];
                                  }
                                });
}

// concatenate matrices with equal row counts along columns
template <class R>
Tensor<R> concat_cols(const std::vector<Tensor<R>>& parts) {
  detail::require(!parts.empty(), "concat_cols", "empty input list");
  const int rows = parts[0].shape()[0];
  int total = 0;
  for (const auto& p : parts) {
    detail::require(p.shape().size() == 2 && p.shape()[0] == rows, "concat_cols",
                    "row count mismatch: " + shape_str(p.shape()));
    total += p.shape()[1];
  }
  std::vector<R> out(static_cast<std::size_t>(rows) * total);
  std::vector<int> offsets, widths;
  int off = 0;
  for (const auto& p : parts) {
    const int w = p.shape()[1];
    offsets.push_back(off);
    widths.push_back(w);
    for (int r = 0; r < rows; ++r)
      std::copy_n(p.data().data() + static_cast<std::size_t>(r) * w, w,
                  out.data() + static_cast<std::size_t>(r) * total + off);
    off += w;
  }
  std::vector<std::shared_ptr<Node<R>>> parents;
  for (const auto& p : parts) parents.push_back(p.node());
  return detail::make_result_v<R>(
      "concat_cols", {rows, total}, std::move(out), parts,
      [parents, offsets, widths, rows, total](Node<R>& o) {
        for (std::size_t i = 0; i < parents.size(); ++i) {
          auto& p = parents[i];
          if (!p->requires_grad) continue;
          p->ensure_grad();
          const int w = widths[i];
          for (int r = 0; r < rows; ++r) {
            const R* g = o.grad.data() + static_cast<std::size_t>(r) * total + offsets[i];
            R* dst = p->grad.data() + static_cast<std::size_t>(r) * w;
            for (int j = 0; j < w; ++j) dst[j] += g[j];
          }
        }
      });
}

// concatenate matrices with equal column counts along rows
template <class R>
Tensor<R> concat_rows(const std::vector<Tensor<R>>& parts) {
  detail::require(!parts.empty(), "concat_rows", "empty input list");
  const int n = parts[0].shape().size() == 2 ? parts[0].shape()[1] : -1;
  detail::require(n > 0, "concat_rows", "expected matrices, got " + shape_str(parts[0].shape()));
  int rows = 0;
  for (const auto& p : parts) {
    detail::require(p.shape().size() == 2 && p.shape()[1] == n, "concat_rows",
                    "column count mismatch: " + shape_str(p.shape()));
    rows += p.shape()[0];
  }
  std::vector<R> out;
  out.reserve(static_cast<std::size_t>(rows) * n);
  std::vector<int> offsets;
  for (const auto& p : parts) {
    offsets.push_back(static_cast<int>(out.size()));
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  std::vector<std::shared_ptr<Node<R>>> parents;
  for (const auto& p : parts) parents.push_back(p.node());
  return detail::make_result_v<R>("concat_rows", {rows, n}, std::move(out), parts,
                                  [parents, offsets](Node<R>& o) {
                                    for (std::size_t i = 0; i < parents.size(); ++i) {
                                      auto& p = parents[i];
                                      if (!p->requires_grad) continue;
                                      p->ensure_grad();
                                      const R* g = o.grad.data() + offsets[i];
                                      for (std::size_t j = 0; j < p->grad.size(); ++j)
                                        p->grad[j] += g[j];
                                    }
                                  });
}

template <class R>
Tensor<R> reshape(const Tensor<R>& a, std::vector<int> shape) {
  detail::require(numel_of(shape) == a.numel(), "reshape",
                  shape_str(a.shape()) + " -> " + shape_str(shape));
  std::vector<R> out(a.data());
  auto pa = a.node();
  return detail::make_result<R>("reshape", std::move(shape), std::move(out), {a},
                                [pa](Node<R>& o) {
                                  if (!pa->requires_grad) return;
                                  pa->ensure_grad();
                                  for (std::size_t i = 0; i < o.grad.size(); ++i)
                                    pa->grad[i] += o.grad[i];
                                });
}

// ---- normalizations ----

// softmax over the last axis, numerically stabilized per row
template <class R>
Tensor<R> softmax_rows(const Tensor<R>& a) {
  detail::require(!a.shape().empty(), "softmax", "rank-0 input");
  const int n = a.shape().back();
  const int rows = static_cast<int>(a.numel() / n);
  std::vector<R> out(a.data());
  for (int r = 0; r < rows; ++r) {
    R* x = out.data() + static_cast<std::size_t>(r) * n;
    R mx = x[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    R s = 0;
    for (int j = 0; j < n; ++j) {
      x[j] = std::exp(x[j] - mx);
      s += x[j];
    }
    const R inv = R(1) / s;
    for (int j = 0; j < n; ++j) x[j] *= inv;
  }
  auto pa = a.node();
  return detail::make_result<R>("softmax", a.shape(), std::move(out), {a},
                                [pa, n, rows](Node<R>& o) {
                                  if (!pa->requires_grad) return;
                                  pa->ensure_grad();
                                  for (int r = 0; r < rows; ++r) {
                                    const std::size_t off = static_cast<std::size_t>(r) * n;
                                    const R* y = o.value.data() + off;
                                    const R* g = o.grad.data() + off;
                                    R dy = 0;
                                    for (int j = 0; j < n; ++j) dy += g[j] * y[j];
                                    R* dst = pa->grad.data() + off;
                                    for (int j = 0; j < n; ++j) dst[j] += (g[j] - dy) * y[j];
                                  }
                                });
}

// layer norm over the last axis with affine parameters
template <class R>
Tensor<R> layer_norm(const Tensor<R>& a, const Tensor<R>& gamma, const Tensor<R>& beta,
                     R eps = R(1e-5)) {
  detail::require(!a.shape().empty(), "layer_norm", "rank-0 input");
  const int n = a.shape().back();
  detail::require(gamma.numel() == n && beta.numel() == n, "layer_norm",
                  "affine params " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                      " vs feature width " + std::to_string(n));
  const int rows = static_cast<int>(a.numel() / n);
  std::vector<R> out(a.data().size());
  auto xhat = std::make_shared<std::vector<R>>(a.data().size());
  auto inv_std = std::make_shared<std::vector<R>>(rows);
  for (int r = 0; r < rows; ++r) {
    const std::size_t off = static_cast<std::size_t>(r) * n;
    const R* x = a.data().data() + off;
    R mu = 0;
    for (int j = 0; j < n; ++j) mu += x[j];
    mu /= static_cast<R>(n);
    R var = 0;
    for (int j = 0; j < n; ++j) {
      const R d = x[j] - mu;
      var += d * d;
    }
    var /= static_cast<R>(n);
    const R istd = R(1) / std::sqrt(var + eps);
    (*inv_std)[r] = istd;
    for (int j = 0; j < n; ++j) {
      const R xh = (x[j] - mu) * istd;
      (*xhat)[off + j] = xh;
      out[off + j] = gamma.data()[j] * xh + beta.data()[j];
    }
  }
  auto pa = a.node();
  auto pg = gamma.node();
  auto pb = beta.node();
  return detail::make_result<R>(
      "layer_norm", a.shape(), std::move(out), {a, gamma, beta},
      [pa, pg, pb, xhat, inv_std, n, rows](Node<R>& o) {
        for (int r = 0; r < rows; ++r) {
          const std::size_t off = static_cast<std::size_t>(r) * n;
          const R* g = o.grad.data() + off;
          const R* xh = xhat->data() + off;
          if (pg->requires_grad) {
            pg->ensure_grad();
            for (int j = 0; j < n; ++j) pg->grad[j] += g[j] * xh[j];
          }
          if (pb->requires_grad) {
            pb->ensure_grad();
            for (int j = 0; j < n; ++j) pb->grad[j] += g[j];
          }
          if (pa->requires_grad) {
            pa->ensure_grad();
            R m1 = 0, m2 = 0;
            for (int j = 0; j < n; ++j) {
              const R dxh = g[j] * pg->value[j];
              m1 += dxh;
              m2 += dxh * xh[j];
            }
            m1 /= static_cast<R>(n);
            m2 /= static_cast<R>(n);
            const R istd = (*inv_std)[r];
            R* dst = pa->grad.data() + off;
            for (int j = 0; j < n; ++j) {
              const R dxh = g[j] * pg->value[j];
              dst[j] += istd * (dxh - m1 - xh[j] * m2);
            }
          }
        }
      });
}

// scale each row (last axis) to unit Euclidean norm; zero rows are a fault
template <class R>
Tensor<R> l2_normalize(const Tensor<R>& a) {
  detail::require(!a.shape().empty(), "l2_normalize", "rank-0 input");
  const int n = a.shape().back();
  const int rows = static_cast<int>(a.numel() / n);
  std::vector<R> out(a.data());
  auto inv_norm = std::make_shared<std::vector<R>>(rows);
  for (int r = 0; r < rows; ++r) {
    R* x = out.data() + static_cast<std::size_t>(r) * n;
    R s = 0;
    for (int j = 0; j < n; ++j) s += x[j] * x[j];
    const R nrm = std::sqrt(s);
    if (!(nrm > R(1e-30))) throw NumericFault("l2_normalize of a zero vector");
    const R inv = R(1) / nrm;
    (*inv_norm)[r] = inv;
    for (int j = 0; j < n; ++j) x[j] *= inv;
  }
  auto pa = a.node();
  return detail::make_result<R>("l2_normalize", a.shape(), std::move(out), {a},
                                [pa, inv_norm, n, rows](Node<R>& o) {
                                  if (!pa->requires_grad) return;
                                  pa->ensure_grad();
                                  for (int r = 0; r < rows; ++r) {
                                    const std::size_t off = static_cast<std::size_t>(r) * n;
                                    const R* y = o.value.data() + off;
                                    const R* g = o.grad.data() + off;
                                    R gy = 0;
                                    for (int j = 0; j < n; ++j) gy += g[j] * y[j];
                                    const R inv = (*inv_norm)[r];
                                    R* dst = pa->grad.data() + off;
                                    for (int j = 0; j < n; ++j)
                                      dst[j] += (g[j] - y[j] * gy) * inv;
                                  }
                                });
}

// ---- classification loss ----

// mean negative log-softmax over a batch of logit rows; fused backward
template <class R>
Tensor<R> cross_entropy_with_logits(const Tensor<R>& logits, const std::vector<int>& labels) {
  std::vector<int> lshape = logits.shape();
  const int n = lshape.back();
  const int rows = static_cast<int>(logits.numel() / n);
  detail::require(static_cast<int>(labels.size()) == rows, "cross_entropy",
                  "labels " + std::to_string(labels.size()) + " vs rows " +
                      std::to_string(rows));
  for (int lab : labels)
    if (lab < 0 || lab >= n)
      throw DataError("cross_entropy label " + std::to_string(lab) +
                      " out of range 0.." + std::to_string(n - 1));
  auto probs = std::make_shared<std::vector<R>>(logits.data());
  R loss = 0;
  for (int r = 0; r < rows; ++r) {
    R* x = probs->data() + static_cast<std::size_t>(r) * n;
    R mx = x[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    R s = 0;
    for (int j = 0; j < n; ++j) {
      x[j] = std::exp(x[j] - mx);
      s += x[j];
    }
    const R inv = R(1) / s;
    for (int j = 0; j < n; ++j) x[j] *= inv;
    loss -= std::log(std::max(x[labels[r]], std::numeric_limits<R>::min()));
  }
  loss /= static_cast<R>(rows);
  auto pl = logits.node();
  auto labs = std::make_shared<std::vector<int>>(labels);
  return detail::make_result<R>("cross_entropy", {1}, {loss}, {logits},
                                [pl, probs, labs, n, rows](Node<R>& o) {
                                  if (!pl->requires_grad) return;
                                  pl->ensure_grad();
                                  const R g = o.grad[0] / static_cast<R>(rows);
                                  for (int r = 0; r < rows; ++r) {
                                    const std::size_t off = static_cast<std::size_t>(r) * n;
                                    const R* p = probs->data() + off;
                                    R* dst = pl->grad.data() + off;
                                    for (int j = 0; j < n; ++j) dst[j] += g * p[j];
                                    dst[(*labs)[r]] -= g;
                                  }
                                });
}

// ---- convolutions and pooling ----

struct Conv3dSpec {
  int st = 1, sh = 1, sw = 1;  // strides over T, H, W
  int pt = 0, ph = 0, pw = 0;  // zero padding
};

namespace detail {

inline int conv_out_dim(const char* op, int in, int k, int stride, int pad) {
  const int out = (in + 2 * pad - k) / stride + 1;
  require(out > 0 && in + 2 * pad >= k, op,
          "window " + std::to_string(k) + " exceeds padded extent of " + std::to_string(in));
  return out;
}

}  // namespace detail

// x: [Cin,T,H,W], w: [Cout,Cin,kT,kH,kW], b: [Cout] -> [Cout,To,Ho,Wo]
template <class R>
Tensor<R> conv3d(const Tensor<R>& x, const Tensor<R>& w, const Tensor<R>& b,
                 const Conv3dSpec& sp = {}) {
  detail::require(x.shape().size() == 4 && w.shape().size() == 5, "conv3d",
                  shape_str(x.shape()) + " vs kernel " + shape_str(w.shape()));
  const int Cin = x.shape()[0], T = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const int Cout = w.shape()[0], kT = w.shape()[2], kH = w.shape()[3], kW = w.shape()[4];
  detail::require(w.shape()[1] == Cin, "conv3d",
                  "kernel expects " + std::to_string(w.shape()[1]) + " channels, input has " +
                      std::to_string(Cin));
  detail::require(b.numel() == Cout, "conv3d",
                  "bias " + shape_str(b.shape()) + " vs Cout " + std::to_string(Cout));
  const int To = detail::conv_out_dim("conv3d", T, kT, sp.st, sp.pt);
  const int Ho = detail::conv_out_dim("conv3d", H, kH, sp.sh, sp.ph);
  const int Wo = detail::conv_out_dim("conv3d", W, kW, sp.sw, sp.pw);

  std::vector<R> out(static_cast<std::size_t>(Cout) * To * Ho * Wo);
  for (int co = 0; co < Cout; ++co)
    std::fill_n(out.data() + static_cast<std::size_t>(co) * To * Ho * Wo,
                static_cast<std::size_t>(To) * Ho * Wo, b.data()[co]);

  const R* xv = x.data().data();
  const R* wv = w.data().data();
  for (int co = 0; co < Cout; ++co) {
    for (int ci = 0; ci < Cin; ++ci) {
      for (int kt = 0; kt < kT; ++kt) {
        for (int kh = 0; kh < kH; ++kh) {
          for (int kw = 0; kw < kW; ++kw) {
            const R wval =
                wv[(((static_cast<std::size_t>(co) * Cin + ci) * kT + kt) * kH + kh) * kW + kw];
            for (int t = 0; t < To; ++t) {
              const int ti = t * sp.st - sp.pt + kt;
              if (ti < 0 || ti >= T) continue;
              for (int h = 0; h < Ho; ++h) {
                const int hi = h * sp.sh - sp.ph + kh;
                if (hi < 0 || hi >= H) continue;
                R* orow = out.data() +
                          ((static_cast<std::size_t>(co) * To + t) * Ho + h) * Wo;
                const R* irow =
                    xv + ((static_cast<std::size_t>(ci) * T + ti) * H + hi) * W;
                if (sp.sw == 1) {
                  const int wlo = std::max(0, sp.pw - kw);
                  const int whi = std::min(Wo, W - kw + sp.pw);
                  const R* ir = irow + (wlo - sp.pw + kw);
                  for (int wo = wlo; wo < whi; ++wo) orow[wo] += wval * ir[wo - wlo];
                } else {
                  for (int wo = 0; wo < Wo; ++wo) {
                    const int wi = wo * sp.sw - sp.pw + kw;
                    if (wi >= 0 && wi < W) orow[wo] += wval * irow[wi];
                  }
                }
              }
            }
          }
        }
      }
    }
  }

  auto px = x.node();
  auto pw_ = w.node();
  auto pb = b.node();
  auto bwd = [px, pw_, pb, sp, Cin, T, H, W, Cout, kT, kH, kW, To, Ho, Wo](Node<R>& o) {
    const R* g = o.grad.data();
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (int co = 0; co < Cout; ++co) {
        const R* gp = g + static_cast<std::size_t>(co) * To * Ho * Wo;
        R s = 0;
        for (std::size_t i = 0; i < static_cast<std::size_t>(To) * Ho * Wo; ++i) s += gp[i];
        pb->grad[co] += s;
      }
    }
    const bool need_x = px->requires_grad;
    const bool need_w = pw_->requires_grad;
    if (!need_x && !need_w) return;
    if (need_x) px->ensure_grad();
    if (need_w) pw_->ensure_grad();
    for (int co = 0; co < Cout; ++co) {
      for (int ci = 0; ci < Cin; ++ci) {
        for (int kt = 0; kt < kT; ++kt) {
          for (int kh = 0; kh < kH; ++kh) {
            for (int kw = 0; kw < kW; ++kw) {
              const std::size_t widx =
                  (((static_cast<std::size_t>(co) * Cin + ci) * kT + kt) * kH + kh) * kW + kw;
              const R wval = pw_->value[widx];
              R wacc = 0;
              for (int t = 0; t < To; ++t) {
                const int ti = t * sp.st - sp.pt + kt;
                if (ti < 0 || ti >= T) continue;
                for (int h = 0; h < Ho; ++h) {
                  const int hi = h * sp.sh - sp.ph + kh;
                  if (hi < 0 || hi >= H) continue;
                  const R* grow =
                      g + ((static_cast<std::size_t>(co) * To + t) * Ho + h) * Wo;
                  const std::size_t ioff =
                      ((static_cast<std::size_t>(ci) * T + ti) * H + hi) * W;
                  if (sp.sw == 1) {
                    const int wlo = std::max(0, sp.pw - kw);
                    const int whi = std::min(Wo, W - kw + sp.pw);
                    const int ibase = wlo - sp.pw + kw;
                    if (need_x) {
                      R* xr = px->grad.data() + ioff + ibase;
                      for (int wo = wlo; wo < whi; ++wo) xr[wo - wlo] += wval * grow[wo];
                    }
                    if (need_w) {
                      const R* xr = px->value.data() + ioff + ibase;
                      for (int wo = wlo; wo < whi; ++wo) wacc += xr[wo - wlo] * grow[wo];
                    }
                  } else {
                    for (int wo = 0; wo < Wo; ++wo) {
                      const int wi = wo * sp.sw - sp.pw + kw;
                      if (wi < 0 || wi >= W) continue;
                      if (need_x) px->grad[ioff + wi] += wval * grow[wo];
                      if (need_w) wacc += px->value[ioff + wi] * grow[wo];
                    }
                  }
                }
              }
              if (need_w) pw_->grad[widx] += wacc;
            }
          }
        }
      }
    }
  };
  return detail::make_result<R>("conv3d", {Cout, To, Ho, Wo}, std::move(out), {x, w, b},
                                std::move(bwd));
}

struct Conv2dSpec {
  int sh = 1, sw = 1;
  int ph = 0, pw = 0;
};

// x: [Cin,H,W], w: [Cout,Cin,kH,kW], b: [Cout] -> [Cout,Ho,Wo]
template <class R>
Tensor<R> conv2d(const Tensor<R>& x, const Tensor<R>& w, const Tensor<R>& b,
                 const Conv2dSpec& sp = {}) {
  detail::require(x.shape().size() == 3 && w.shape().size() == 4, "conv2d",
                  shape_str(x.shape()) + " vs kernel " + shape_str(w.shape()));
  const int Cin = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  const int Cout = w.shape()[0], kH = w.shape()[2], kW = w.shape()[3];
  detail::require(w.shape()[1] == Cin, "conv2d",
                  "kernel expects " + std::to_string(w.shape()[1]) + " channels, input has " +
                      std::to_string(Cin));
  detail::require(b.numel() == Cout, "conv2d",
                  "bias " + shape_str(b.shape()) + " vs Cout " + std::to_string(Cout));
  Tensor<R> x4 = reshape(x, {Cin, 1, H, W});
  Tensor<R> w5 = reshape(w, {Cout, Cin, 1, kH, kW});
  Conv3dSpec sp3;
  sp3.sh = sp.sh;
  sp3.sw = sp.sw;
  sp3.ph = sp.ph;
  sp3.pw = sp.pw;
  Tensor<R> y = conv3d(x4, w5, b, sp3);
  return reshape(y, {Cout, y.shape()[2], y.shape()[3]});
}

// max pooling over [C,T,H,W] windows with strides; argmax saved for backward
template <class R>
Tensor<R> max_pool3d(const Tensor<R>& x, int wt, int wh, int ww, int st, int sh, int sw) {
  detail::require(x.shape().size() == 4, "max_pool3d",
                  "expected [C,T,H,W], got " + shape_str(x.shape()));
  const int C = x.shape()[0], T = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  detail::require(wt >= 1 && wh >= 1 && ww >= 1 && st >= 1 && sh >= 1 && sw >= 1,
                  "max_pool3d", "window and stride must be positive");
  const int To = detail::conv_out_dim("max_pool3d", T, wt, st, 0);
  const int Ho = detail::conv_out_dim("max_pool3d", H, wh, sh, 0);
  const int Wo = detail::conv_out_dim("max_pool3d", W, ww, sw, 0);
  std::vector<R> out(static_cast<std::size_t>(C) * To * Ho * Wo);
  auto argmax = std::make_shared<std::vector<std::int32_t>>(out.size());
  const R* xv = x.data().data();
  std::size_t oi = 0;
  for (int c = 0; c < C; ++c) {
    for (int t = 0; t < To; ++t) {
      for (int h = 0; h < Ho; ++h) {
        for (int w = 0; w < Wo; ++w, ++oi) {
          R best = -std::numeric_limits<R>::infinity();
          std::int32_t bi = 0;
          for (int dt = 0; dt < wt; ++dt) {
            for (int dh = 0; dh < wh; ++dh) {
              for (int dw = 0; dw < ww; ++dw) {
                const std::size_t idx =
                    ((static_cast<std::size_t>(c) * T + (t * st + dt)) * H + (h * sh + dh)) * W +
                    (w * sw + dw);
                if (xv[idx] > best) {
                  best = xv[idx];
                  bi = static_cast<std::int32_t>(idx);
                }
              }
            }
          }
          out[oi] = best;
          (*argmax)[oi] = bi;
        }
      }
    }
  }
  auto px = x.node();
  return detail::make_result<R>("max_pool3d", {C, To, Ho, Wo}, std::move(out), {x},
                                [px, argmax](Node<R>& o) {
                                  if (!px->requires_grad) return;
                                  px->ensure_grad();
                                  for (std::size_t i = 0; i < o.grad.size(); ++i)
                                    px->grad[(*argmax)[i]] += o.grad[i];
                                });
}

template <class R>
Tensor<R> max_pool2d(const Tensor<R>& x, int wh, int ww, int sh, int sw) {
  detail::require(x.shape().size() == 3, "max_pool2d",
                  "expected [C,H,W], got " + shape_str(x.shape()));
  const int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  Tensor<R> x4 = reshape(x, {C, 1, H, W});
  Tensor<R> y = max_pool3d(x4, 1, wh, ww, 1, sh, sw);
  return reshape(y, {C, y.shape()[2], y.shape()[3]});
}

// global max over all of T,H,W per channel: [C,T,H,W] -> [C]
template <class R>
Tensor<R> global_max_pool3d(const Tensor<R>& x) {
  detail::require(x.shape().size() == 4, "global_max_pool3d",
                  "expected [C,T,H,W], got " + shape_str(x.shape()));
  const int C = x.shape()[0];
  const std::size_t plane = x.numel() / C;
  std::vector<R> out(C);
  auto argmax = std::make_shared<std::vector<std::int32_t>>(C);
  for (int c = 0; c < C; ++c) {
    const R* p = x.data().data() + static_cast<std::size_t>(c) * plane;
    std::size_t bi = 0;
    for (std::size_t i = 1; i < plane; ++i)
      if (p[i] > p[bi]) bi = i;
    out[c] = p[bi];
    (*argmax)[c] = static_cast<std::int32_t>(static_cast<std::size_t>(c) * plane + bi);
  }
  auto px = x.node();
  return detail::make_result<R>("global_max_pool3d", {C}, std::move(out), {x},
                                [px, argmax, C](Node<R>& o) {
                                  if (!px->requires_grad) return;
                                  px->ensure_grad();
                                  for (int c = 0; c < C; ++c)
                                    px->grad[(*argmax)[c]] += o.grad[c];
                                });
}

// [C,T,H,W] -> [C], per-channel mean over the spatio-temporal volume.
// Unlike the max pool this preserves activation counts, which is what the
// shuffle-degree head needs: its signal is how often discontinuity detectors
// fire, not whether they fire at all.
template <class R>
Tensor<R> global_avg_pool3d(const Tensor<R>& x) {
  detail::require(x.shape().size() == 4, "global_avg_pool3d",
                  "expected [C,T,H,W], got " + shape_str(x.shape()));
  const int C = x.shape()[0];
  const std::size_t plane = x.numel() / C;
  const R inv = R(1) / static_cast<R>(plane);
  std::vector<R> out(C);
  for (int c = 0; c < C; ++c) {
    const R* p = x.data().data() + static_cast<std::size_t>(c) * plane;
    R s = 0;
    for (std::size_t i = 0; i < plane; ++i) s += p[i];
    out[c] = s * inv;
  }
  auto px = x.node();
  return detail::make_result<R>("global_avg_pool3d", {C}, std::move(out), {x},
                                [px, C, plane, inv](Node<R>& o) {
                                  if (!px->requires_grad) return;
                                  px->ensure_grad();
                                  for (int c = 0; c < C; ++c) {
                                    R* dst = px->grad.data() + static_cast<std::size_t>(c) * plane;
                                    const R g = o.grad[c] * inv;
                                    for (std::size_t i = 0; i < plane; ++i) dst[i] += g;
                                  }
                                });
}

}  // namespace cacl
