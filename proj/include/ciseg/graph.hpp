#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

#include "ciseg/tensor.hpp"

namespace ciseg {

// Reverse-mode autodiff over a flat tape. Nodes are appended in evaluation
// order, which is already a topological order, so backward() is a single
// reverse sweep. One Graph per sample per iteration; graphs are never shared
// across threads.
//
// A Var is an index into the tape. Ops only attach backward closures when
// `recording` is true AND some parent requires grad, so inference-mode
// forwards pay no tape cost beyond the value tensors.

struct Var {
  int32_t idx = -1;
  bool valid() const { return idx >= 0; }
};

template <typename T>
class Graph {
 public:
  using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatMap = Eigen::Map<Matrix>;
  using CMatMap = Eigen::Map<const Matrix>;

  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated lazily in backward()
    bool requires_grad = false;
    std::function<void(Graph&, int)> backward;
  };

  bool recording = true;

  const Tensor<T>& value(Var v) const { return nodes_[size_t(v.idx)].value; }
  const Tensor<T>& grad(Var v) const { return nodes_[size_t(v.idx)].grad; }
  bool requires_grad(Var v) const { return nodes_[size_t(v.idx)].requires_grad; }
  T scalar(Var v) const { return nodes_[size_t(v.idx)].value[0]; }
  size_t size() const { return nodes_.size(); }

  Var leaf(Tensor<T> v, bool needs_grad) {
    Node n;
    n.value = std::move(v);
    n.requires_grad = needs_grad && recording;
    nodes_.push_back(std::move(n));
    return Var{int32_t(nodes_.size() - 1)};
  }

  Var constant(Tensor<T> v) { return leaf(std::move(v), false); }
  Var scalar_const(T v) { return constant(Tensor<T>({1}, {v})); }

  // Escape hatch for ops defined outside this class. The closure receives the
  // graph and the op's own node index; use out_grad()/grad_buffer() inside.
  Var custom(Tensor<T> v, const std::vector<Var>& parents,
             std::function<void(Graph&, int)> bw) {
    return make(std::move(v), parents, std::move(bw));
  }

  const Tensor<T>& out_grad(int node_idx) const { return nodes_[size_t(node_idx)].grad; }

  T* grad_buffer(Var v) {
    ensure_grad(v.idx);
    return nodes_[size_t(v.idx)].grad.data();
  }

  void backward(Var loss) {
    Node& top = nodes_[size_t(loss.idx)];
    if (top.value.numel() != 1)
      throw std::invalid_argument("backward: loss must be a scalar");
    ensure_grad(loss.idx);
    nodes_[size_t(loss.idx)].grad[0] = T(1);
    for (int i = loss.idx; i >= 0; --i) {
      Node& n = nodes_[size_t(i)];
      if (n.backward && !n.grad.empty()) n.backward(*this, i);
    }
  }

  void accum(int idx, const T* g, int64_t count) {
    ensure_grad(idx);
    T* dst = nodes_[size_t(idx)].grad.data();
    for (int64_t i = 0; i < count; ++i) dst[i] += g[i];
  }

  void ensure_grad(int idx) {
    Node& n = nodes_[size_t(idx)];
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.dims());
  }

  // ---------------------------------------------------------------- basics

  Var add(Var a, Var b, T alpha = T(1)) {
    const auto& va = value(a);
    const auto& vb = value(b);
    if (va.numel() != vb.numel())
      throw std::invalid_argument("add: shape mismatch " + va.shape_str() + " vs " + vb.shape_str());
    Tensor<T> out(va.dims());
    for (int64_t i = 0; i < va.numel(); ++i) out[i] = va[i] + alpha * vb[i];
    return make(std::move(out), {a, b}, [a, b, alpha](Graph& g, int self) {
      const auto& go = g.nodes_[size_t(self)].grad;
      if (g.requires_grad(a)) g.accum(a.idx, go.data(), go.numel());
      if (g.requires_grad(b)) {
        g.ensure_grad(b.idx);
        T* dst = g.nodes_[size_t(b.idx)].grad.data();
        for (int64_t i = 0; i < go.numel(); ++i) dst[i] += alpha * go[i];
      }
    });
  }

  Var sub(Var a, Var b) { return add(a, b, T(-1)); }

  Var mul(Var a, Var b) {
    const auto& va = value(a);
    const auto& vb = value(b);
    if (va.numel() != vb.numel()) throw std::invalid_argument("mul: shape mismatch");
    Tensor<T> out(va.dims());
    for (int64_t i = 0; i < va.numel(); ++i) out[i] = va[i] * vb[i];
    return make(std::move(out), {a, b}, [a, b](Graph& g, int self) {
      const auto& go = g.nodes_[size_t(self)].grad;
      const auto& va = g.value(a);
      const auto& vb = g.value(b);
      if (g.requires_grad(a)) {
        g.ensure_grad(a.idx);
        T* dst = g.nodes_[size_t(a.idx)].grad.data();
        for (int64_t i = 0; i < go.numel(); ++i) dst[i] += go[i] * vb[i];
      }
      if (g.requires_grad(b)) {
        g.ensure_grad(b.idx);
        T* dst = g.nodes_[size_t(b.idx)].grad.data();
        for (int64_t i = 0; i < go.numel(); ++i) dst[i] += go[i] * va[i];
      }
    });
  }

  Var div(Var a, Var b) {
    const auto& va = value(a);
    const auto& vb = value(b);
    if (va.numel() != vb.numel()) throw std::invalid_argument("div: shape mismatch");
    Tensor<T> out(va.dims());
    for (int64_t i = 0; i < va.numel(); ++i) out[i] = va[i] / vb[i];
    return make(std::move(out), {a, b}, [a, b](Graph& g, int self) {
      const auto& go = g.nodes_[size_t(self)].grad;
      const auto& va = g.value(a);
      const auto& vb = g.value(b);
      if (g.requires_grad(a)) {
        g.ensure_grad(a.idx);
        T* dst = g.nodes_[size_t(a.idx)].grad.data();
        for (int64_t i = 0; i < go.numel(); ++i) dst[i] += go[i] / vb[i];
      }
      if (g.requires_grad(b)) {
        g.ensure_grad(b.idx);
        T* dst = g.nodes_[size_t(b.idx)].grad.data();
        for (int64_t i = 0; i < go.numel(); ++i) dst[i] -= go[i] * va[i] / (vb[i] * vb[i]);
      }
    });
  }

  Var scale(Var a, T c) {
    const auto& va = value(a);
    Tensor<T> out(va.dims());
    for (int64_t i = 0; i < va.numel(); ++i) out[i] = va[i] * c;
    return make(std::move(out), {a}, [a, c](Graph& g, int self) {
      const auto& go = g.nodes_[size_t(self)].grad;
      g.ensure_grad(a.idx);
      T* dst = g.nodes_[size_t(a.idx)].grad.data();
      for (int64_t i = 0; i < go.numel(); ++i) dst[i] += c * go[i];
    });
  }

  Var add_scalar(Var a, T c) {
    const auto& va = value(a);
    Tensor<T> out(va.dims());
    for (int64_t i = 0; i < va.numel(); ++i) out[i] = va[i] + c;
    return make(std::move(out), {a}, [a](Graph& g, int self) {
      const auto& go = g.nodes_[size_t(self)].grad;
      g.accum(a.idx, go.data(), go.numel());
    });
  }

  // c - x
  Var rsub_scalar(T c, Var a) {
    const auto& va = value(a);
    Tensor<T> out(va.dims());
    for (int64_t i = 0; i < va.numel(); ++i) out[i] = c - va[i];
    return make(std::move(out), {a}, [a](Graph& g, int self) {
      const auto& go = g.nodes_[size_t(self)].grad;
      g.ensure_grad(a.idx);
      T* dst = g.nodes_[size_t(a.idx)].grad.data();
      for (int64_t i = 0; i < go.numel(); ++i) dst[i] -= go[i];
    });
  }

  // ----------------------------------------------------------- elementwise

  Var relu(Var a) {
    const auto& va = value(a);
    Tensor<T> out(va.dims());
    for (int64_t i = 0; i < va.numel(); ++i) out[i] = va[i] > T(0) ? va[i] : T(0);
    return make(std::move(out), {a}, [a](Graph& g, int self) {
      const auto& go = g.nodes_[size_t(self)].grad;
      const auto& va = g.value(a);
      g.ensure_grad(a.idx);
      T* dst = g.nodes_[size_t(a.idx)].grad.data();
      for (int64_t i = 0; i < go.numel(); ++i)
        if (va[i] > T(0)) dst[i] += go[i];
    });
  }

  Var sigmoid(Var a) {
    const auto& va = value(a);
    Tensor<T> out(va.dims());
    for (int64_t i = 0; i < va.numel(); ++i) {
      T x = va[i];
      out[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                         : std::exp(x) / (T(1) + std::exp(x));
    }
    int self_hint = int(nodes_.size());
    (void)self_hint;
    return make(std::move(out), {a}, [a](Graph& g, int self) {
      const auto& go = g.nodes_[size_t(self)].grad;
      const auto& y = g.nodes_[size_t(self)].value;
      g.ensure_grad(a.idx);
      T* dst = g.nodes_[size_t(a.idx)].grad.data();
      for (int64_t i = 0; i < go.numel(); ++i) dst[i] += go[i] * y[i] * (T(1) - y[i]);
    });
  }

  Var log(Var a) {
    const auto& va = value(a);
    Tensor<T> out(va.dims());
    for (int64_t i = 0; i < va.numel(); ++i) out[i] = std::log(va[i]);
    return make(std::move(out), {a}, [a](Graph& g, int self) {
      const auto& go = g.nodes_[size_t(self)].grad;
      const auto& va = g.value(a);
      g.ensure_grad(a.idx);
      T* dst = g.nodes_[size_t(a.idx)].grad.data();
      for (int64_t i = 0; i < go.numel(); ++i) dst[i] += go[i] / va[i];
    });
  }

  Var clamp(Var a, T lo, T hi) {
    const auto& va = value(a);
    Tensor<T> out(va.dims());
    for (int64_t i = 0; i < va.numel(); ++i) out[i] = std::min(hi, std::max(lo, va[i]));
    return make(std::move(out), {a}, [a, lo, hi](Graph& g, int self) {
      const auto& go = g.nodes_[size_t(self)].grad;
      const auto& va = g.value(a);
      g.ensure_grad(a.idx);
      T* dst = g.nodes_[size_t(a.idx)].grad.data();
      for (int64_t i = 0; i < go.numel(); ++i)
        if (va[i] > lo && va[i] < hi) dst[i] += go[i];
    });
  }

  Var square(Var a) { return mul(a, a); }

  Var sqrt_scalar(Var a) {
    if (value(a).numel() != 1) throw std::invalid_argument("sqrt_scalar: expects scalar");
    T y = std::sqrt(value(a)[0]);
    Tensor<T> out({1}, {y});
    return make(std::move(out), {a}, [a, y](Graph& g, int self) {
      const auto& go = g.nodes_[size_t(self)].grad;
      g.ensure_grad(a.idx);
      g.nodes_[size_t(a.idx)].grad[0] += go[0] / (T(2) * y);
    });
  }

  // x * s or x / s with scalar node s (broadcast).
  Var scale_by(Var x, Var s, bool divide) {
    if (value(s).numel() != 1) throw std::invalid_argument("scale_by: s must be scalar");
    const auto& vx = value(x);
    T sv = value(s)[0];
    T f = divide ? T(1) / sv : sv;
    Tensor<T> out(vx.dims());
    for (int64_t i = 0; i < vx.numel(); ++i) out[i] = vx[i] * f;
    return make(std::move(out), {x, s}, [x, s, divide](Graph& g, int self) {
      const auto& go = g.nodes_[size_t(self)].grad;
      const auto& vx = g.value(x);
      T sv = g.value(s)[0];
      T f = divide ? T(1) / sv : sv;
      if (g.requires_grad(x)) {
        g.ensure_grad(x.idx);
        T* dst = g.nodes_[size_t(x.idx)].grad.data();
        for (int64_t i = 0; i < go.numel(); ++i) dst[i] += go[i] * f;
      }
      if (g.requires_grad(s)) {
        g.ensure_grad(s.idx);
        T acc = T(0);
        for (int64_t i = 0; i < go.numel(); ++i) acc += go[i] * vx[i];
        g.nodes_[size_t(s.idx)].grad[0] += divide ? -acc / (sv * sv) : acc;
      }
    });
  }

  // ------------------------------------------------------------ reductions

  Var sum_all(Var a) {
    const auto& va = value(a);
    T acc = T(0);
    for (int64_t i = 0; i < va.numel(); ++i) acc += va[i];
    Tensor<T> out({1}, {acc});
    return make(std::move(out), {a}, [a](Graph& g, int self) {
      T go = g.nodes_[size_t(self)].grad[0];
      g.ensure_grad(a.idx);
      T* dst = g.nodes_[size_t(a.idx)].grad.data();
      int64_t n = g.value(a).numel();
      for (int64_t i = 0; i < n; ++i) dst[i] += go;
    });
  }

  Var mean_all(Var a) { return scale(sum_all(a), T(1) / T(value(a).numel())); }

  // [m,n] -> [m]
  Var sum_rows(Var a) {
    const auto& va = value(a);
    if (va.ndim() != 2) throw std::invalid_argument("sum_rows: expects 2-D");
    int m = va.dim(0), n = va.dim(1);
    Tensor<T> out({m});
    for (int r = 0; r < m; ++r) {
      T acc = T(0);
      const T* row = va.data() + int64_t(r) * n;
      for (int c = 0; c < n; ++c) acc += row[c];
      out[r] = acc;
    }
    return make(std::move(out), {a}, [a, m, n](Graph& g, int self) {
      const auto& go = g.nodes_[size_t(self)].grad;
      g.ensure_grad(a.idx);
      T* dst = g.nodes_[size_t(a.idx)].grad.data();
      for (int r = 0; r < m; ++r) {
        T gr = go[r];
        T* row = dst + int64_t(r) * n;
        for (int c = 0; c < n; ++c) row[c] += gr;
      }
    });
  }

  // --------------------------------------------------------------- shapes

  Var reshape(Var a, std::vector<int> dims) {
    const auto& va = value(a);
    Tensor<T> out = va.reshaped(dims);
    return make(std::move(out), {a}, [a](Graph& g, int self) {
      const auto& go = g.nodes_[size_t(self)].grad;
      g.accum(a.idx, go.data(), go.numel());
    });
  }

  Var transpose(Var a) {
    const auto& va = value(a);
    if (va.ndim() != 2) throw std::invalid_argument("transpose: expects 2-D");
    int m = va.dim(0), n = va.dim(1);
    Tensor<T> out({n, m});
    CMatMap A(va.data(), m, n);
    MatMap O(out.data(), n, m);
    O = A.transpose();
    return make(std::move(out), {a}, [a, m, n](Graph& g, int self) {
      const auto& go = g.nodes_[size_t(self)].grad;
      g.ensure_grad(a.idx);
      CMatMap G(go.data(), n, m);
      MatMap D(g.nodes_[size_t(a.idx)].grad.data(), m, n);
      D += G.transpose();
    });
  }

  Var slice_rows(Var a, int r0, int r1) {
    const auto& va = value(a);
    if (va.ndim() < 2) throw std::invalid_argument("slice_rows: expects >=2-D");
    int m = va.dim(0);
    if (r0 < 0 || r1 > m || r0 >= r1) throw std::invalid_argument("slice_rows: bad range");
    int64_t stride = va.numel() / m;
    std::vector<int> dims = va.dims();
    dims[0] = r1 - r0;
    Tensor<T> out(dims);
    std::copy(va.data() + r0 * stride, va.data() + r1 * stride, out.data());
    return make(std::move(out), {a}, [a, r0, stride](Graph& g, int self) {
      const auto& go = g.nodes_[size_t(self)].grad;
      g.ensure_grad(a.idx);
      T* dst = g.nodes_[size_t(a.idx)].grad.data() + r0 * stride;
      for (int64_t i = 0; i < go.numel(); ++i) dst[i] += go[i];
    });
  }

  Var slice_cols(Var a, int c0, int c1) {
    const auto& va = value(a);
    if (va.ndim() != 2) throw std::invalid_argument("slice_cols: expects 2-D");
    int m = va.dim(0), n = va.dim(1);
    if (c0 < 0 || c1 > n || c0 >= c1) throw std::invalid_argument("slice_cols: bad range");
    int w = c1 - c0;
    Tensor<T> out({m, w});
    for (int r = 0; r < m; ++r)
      std::copy(va.data() + int64_t(r) * n + c0, va.data() + int64_t(r) * n + c1,
                out.data() + int64_t(r) * w);
    return make(std::move(out), {a}, [a, c0, m, n, w](Graph& g, int self) {
      const auto& go = g.nodes_[size_t(self)].grad;
      g.ensure_grad(a.idx);
      T* dst = g.nodes_[size_t(a.idx)].grad.data();
      for (int r = 0; r < m; ++r)
        for (int c = 0; c < w; ++c)
          dst[int64_t(r) * n + c0 + c] += go[int64_t(r) * w + c];
    });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
    int m = value(parts[0]).dim(0);
    int total = 0;
    for (Var p : parts) {
      if (value(p).ndim() != 2 || value(p).dim(0) != m)
        throw std::invalid_argument("concat_cols: row mismatch");
      total += value(p).dim(1);
    }
    Tensor<T> out({m, total});
    int off = 0;
    for (Var p : parts) {
      const auto& vp = value(p);
      int w = vp.dim(1);
      for (int r = 0; r < m; ++r)
        std::copy(vp.data() + int64_t(r) * w, vp.data() + int64_t(r + 1) * w,
                  out.data() + int64_t(r) * total + off);
      off += w;
    }
    auto parts_copy = parts;
    return make(std::move(out), parts, [parts_copy, m, total](Graph& g, int self) {
      const auto& go = g.nodes_[size_t(self)].grad;
      int off = 0;
      for (Var p : parts_copy) {
        int w = g.value(p).dim(1);
        if (g.requires_grad(p)) {
          g.ensure_grad(p.idx);
          T* dst = g.nodes_[size_t(p.idx)].grad.data();
          for (int r = 0; r < m; ++r)
            for (int c = 0; c < w; ++c)
              dst[int64_t(r) * w + c] += go[int64_t(r) * total + off + c];
        }
        off += w;
      }
    });
  }

  Var gather_rows(Var a, std::vector<int> rows) {
    const auto& va = value(a);
    if (va.ndim() < 2) throw std::invalid_argument("gather_rows: expects >=2-D");
    int m = va.dim(0);
    int64_t stride = va.numel() / m;
    std::vector<int> dims = va.dims();
    dims[0] = int(rows.size());
    Tensor<T> out(dims);
    for (size_t i = 0; i < rows.size(); ++i) {
      int r = rows[i];
      if (r < 0 || r >= m) throw std::invalid_argument("gather_rows: index out of range");
      std::copy(va.data() + r * stride, va.data() + (r + 1) * stride,
                out.data() + int64_t(i) * stride);
    }
    return make(std::move(out), {a}, [a, rows, stride](Graph& g, int self) {
      const auto& go = g.nodes_[size_t(self)].grad;
      g.ensure_grad(a.idx);
      T* dst = g.nodes_[size_t(a.idx)].grad.data();
      for (size_t i = 0; i < rows.size(); ++i) {
        const T* src = go.data() + int64_t(i) * stride;
        T* d = dst + int64_t(rows[i]) * stride;
        for (int64_t k = 0; k < stride; ++k) d[k] += src[k];
      }
    });
  }

  // out[r] = a[r, cols[r]] for 2-D a; used for per-row label pick in CE.
  Var pick_per_row(Var a, std::vector<int> cols) {
    const auto& va = value(a);
    if (va.ndim() != 2) throw std::invalid_argument("pick_per_row: expects 2-D");
    int m = va.dim(0), n = va.dim(1);
    if (int(cols.size()) != m) throw std::invalid_argument("pick_per_row: cols size mismatch");
    Tensor<T> out({m});
    for (int r = 0; r < m; ++r) {
      if (cols[r] < 0 || cols[r] >= n) throw std::invalid_argument("pick_per_row: col out of range");
      out[r] = va.at(r, cols[r]);
    }
    return make(std::move(out), {a}, [a, cols, n](Graph& g, int self) {
      const auto& go = g.nodes_[size_t(self)].grad;
      g.ensure_grad(a.idx);
      T* dst = g.nodes_[size_t(a.idx)].grad.data();
      for (size_t r = 0; r < cols.size(); ++r) dst[int64_t(r) * n + cols[r]] += go[int64_t(r)];
    });
  }

  // ---------------------------------------------------------- linear algebra

  // [m,k] x [k,n] -> [m,n]
  Var matmul(Var a, Var b) {
    const auto& va = value(a);
    const auto& vb = value(b);
    if (va.ndim() != 2 || vb.ndim() != 2 || va.dim(1) != vb.dim(0))
      throw std::invalid_argument("matmul: inner dims mismatch " + va.shape_str() + " x " +
                                  vb.shape_str());
    int m = va.dim(0), k = va.dim(1), n = vb.dim(1);
    Tensor<T> out({m, n});
    CMatMap A(va.data(), m, k);
    CMatMap B(vb.data(), k, n);
    MatMap O(out.data(), m, n);
    O.noalias() = A * B;
    return make(std::move(out), {a, b}, [a, b, m, k, n](Graph& g, int self) {
      const auto& go = g.nodes_[size_t(self)].grad;
      CMatMap G(go.data(), m, n);
      if (g.requires_grad(a)) {
        g.ensure_grad(a.idx);
        CMatMap B(g.value(b).data(), k, n);
        MatMap DA(g.nodes_[size_t(a.idx)].grad.data(), m, k);
        DA.noalias() += G * B.transpose();
      }
      if (g.requires_grad(b)) {
        g.ensure_grad(b.idx);
        CMatMap A(g.value(a).data(), m, k);
        MatMap DB(g.nodes_[size_t(b.idx)].grad.data(), k, n);
        DB.noalias() += A.transpose() * G;
      }
    });
  }

  // x [m,din] * W^T [din,dout] + bias -> [m,dout], W stored [dout,din]
  Var linear(Var x, Var w, Var bias) {
    const auto& vx = value(x);
    const auto& vw = value(w);
    if (vx.ndim() != 2 || vw.ndim() != 2 || vx.dim(1) != vw.dim(1))
      throw std::invalid_argument("linear: dim mismatch x=" + vx.shape_str() +
                                  " W=" + vw.shape_str());
    int m = vx.dim(0), din = vx.dim(1), dout = vw.dim(0);
    Tensor<T> out({m, dout});
    CMatMap X(vx.data(), m, din);
    CMatMap W(vw.data(), dout, din);
    MatMap O(out.data(), m, dout);
    O.noalias() = X * W.transpose();
    if (bias.valid()) {
      const auto& vb = value(bias);
      if (vb.numel() != dout) throw std::invalid_argument("linear: bias size mismatch");
      for (int r = 0; r < m; ++r)
        for (int c = 0; c < dout; ++c) out[int64_t(r) * dout + c] += vb[c];
    }
    return make(std::move(out), {x, w, bias}, [x, w, bias, m, din, dout](Graph& g, int self) {
      const auto& go = g.nodes_[size_t(self)].grad;
      CMatMap G(go.data(), m, dout);
      if (g.requires_grad(x)) {
        g.ensure_grad(x.idx);
        CMatMap W(g.value(w).data(), dout, din);
        MatMap DX(g.nodes_[size_t(x.idx)].grad.data(), m, din);
        DX.noalias() += G * W;
      }
      if (g.requires_grad(w)) {
        g.ensure_grad(w.idx);
        CMatMap X(g.value(x).data(), m, din);
        MatMap DW(g.nodes_[size_t(w.idx)].grad.data(), dout, din);
        DW.noalias() += G.transpose() * X;
      }
      if (bias.valid() && g.requires_grad(bias)) {
        g.ensure_grad(bias.idx);
        T* db = g.nodes_[size_t(bias.idx)].grad.data();
        for (int r = 0; r < m; ++r)
          for (int c = 0; c < dout; ++c) db[c] += go[int64_t(r) * dout + c];
      }
    });
  }

  // ------------------------------------------------------------------ conv

  // x [Ci,H,W], w [Co,Ci,kh,kw], bias [Co]; zero padding.
  Var conv2d(Var x, Var w, Var bias, int stride, int pad) {
    const auto& vx = value(x);
    const auto& vw = value(w);
    if (vx.ndim() != 3 || vw.ndim() != 4)
      throw std::invalid_argument("conv2d: expects x[C,H,W], w[Co,Ci,kh,kw]");
    int ci = vx.dim(0), h = vx.dim(1), wdt = vx.dim(2);
    int co = vw.dim(0), kh = vw.dim(2), kw = vw.dim(3);
    if (vw.dim(1) != ci) throw std::invalid_argument("conv2d: channel mismatch");
    int oh = (h + 2 * pad - kh) / stride + 1;
    int ow = (wdt + 2 * pad - kw) / stride + 1;
    int64_t patch = int64_t(ci) * kh * kw;
    int64_t cols = int64_t(oh) * ow;

    auto im2col = std::make_shared<Tensor<T>>(std::vector<int>{int(patch), int(cols)});
    T* col = im2col->data();
    for (int c = 0; c < ci; ++c)
      for (int ky = 0; ky < kh; ++ky)
        for (int kx = 0; kx < kw; ++kx) {
          int64_t row = (int64_t(c) * kh + ky) * kw + kx;
          T* dst = col + row * cols;
          for (int oy = 0; oy < oh; ++oy) {
            int iy = oy * stride + ky - pad;
            for (int ox = 0; ox < ow; ++ox) {
              int ix = ox * stride + kx - pad;
              dst[int64_t(oy) * ow + ox] =
                  (iy >= 0 && iy < h && ix >= 0 && ix < wdt)
                      ? vx[(int64_t(c) * h + iy) * wdt + ix]
                      : T(0);
            }
          }
        }

    Tensor<T> out({co, oh, ow});
    CMatMap W(vw.data(), co, patch);
    CMatMap C(col, patch, cols);
    MatMap O(out.data(), co, cols);
    O.noalias() = W * C;
    if (bias.valid()) {
      const auto& vb = value(bias);
      for (int oc = 0; oc < co; ++oc) {
        T b = vb[oc];
        T* dst = out.data() + int64_t(oc) * cols;
        for (int64_t i = 0; i < cols; ++i) dst[i] += b;
      }
    }
    return make(std::move(out), {x, w, bias},
                [x, w, bias, im2col, ci, h, wdt, co, kh, kw, stride, pad, oh, ow, patch,
                 cols](Graph& g, int self) {
                  const auto& go = g.nodes_[size_t(self)].grad;
                  CMatMap G(go.data(), co, cols);
                  if (g.requires_grad(w)) {
                    g.ensure_grad(w.idx);
                    CMatMap C(im2col->data(), patch, cols);
                    MatMap DW(g.nodes_[size_t(w.idx)].grad.data(), co, patch);
                    DW.noalias() += G * C.transpose();
                  }
                  if (bias.valid() && g.requires_grad(bias)) {
                    g.ensure_grad(bias.idx);
                    T* db = g.nodes_[size_t(bias.idx)].grad.data();
                    for (int oc = 0; oc < co; ++oc) {
                      T acc = T(0);
                      const T* src = go.data() + int64_t(oc) * cols;
                      for (int64_t i = 0; i < cols; ++i) acc += src[i];
                      db[oc] += acc;
                    }
                  }
                  if (g.requires_grad(x)) {
                    g.ensure_grad(x.idx);
                    Tensor<T> dcol({int(patch), int(cols)});
                    CMatMap W(g.value(w).data(), co, patch);
                    MatMap DC(dcol.data(), patch, cols);
                    DC.noalias() = W.transpose() * G;
                    T* dx = g.nodes_[size_t(x.idx)].grad.data();
                    for (int c = 0; c < ci; ++c)
                      for (int ky = 0; ky < kh; ++ky)
                        for (int kx = 0; kx < kw; ++kx) {
                          int64_t row = (int64_t(c) * kh + ky) * kw + kx;
                          const T* src = dcol.data() + row * cols;
                          for (int oy = 0; oy < oh; ++oy) {
                            int iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= h) continue;
                            for (int ox = 0; ox < ow; ++ox) {
                              int ix = ox * stride + kx - pad;
                              if (ix < 0 || ix >= wdt) continue;
                              dx[(int64_t(c) * h + iy) * wdt + ix] += src[int64_t(oy) * ow + ox];
                            }
                          }
                        }
                  }
                });
  }

  // ------------------------------------------------------------- upsampling

  Var upsample_nearest2x(Var a) {
    const auto& va = value(a);
    if (va.ndim() != 3) throw std::invalid_argument("upsample_nearest2x: expects [C,H,W]");
    int c = va.dim(0), h = va.dim(1), w = va.dim(2);
    Tensor<T> out({c, 2 * h, 2 * w});
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < 2 * h; ++y)
        for (int x = 0; x < 2 * w; ++x)
          out[(int64_t(ch) * 2 * h + y) * 2 * w + x] =
              va[(int64_t(ch) * h + y / 2) * w + x / 2];
    return make(std::move(out), {a}, [a, c, h, w](Graph& g, int self) {
      const auto& go = g.nodes_[size_t(self)].grad;
      g.ensure_grad(a.idx);
      T* dst = g.nodes_[size_t(a.idx)].grad.data();
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < 2 * h; ++y)
          for (int x = 0; x < 2 * w; ++x)
            dst[(int64_t(ch) * h + y / 2) * w + x / 2] +=
                go[(int64_t(ch) * 2 * h + y) * 2 * w + x];
    });
  }

  // Factor-2 bilinear upsampling, half-pixel alignment (align_corners=false).
  // Source coordinate for output pixel o is (o + 0.5)/2 - 0.5, clamped.
  Var upsample_bilinear2x(Var a) {
    const auto& va = value(a);
    if (va.ndim() != 3) throw std::invalid_argument("upsample_bilinear2x: expects [C,H,W]");
    int c = va.dim(0), h = va.dim(1), w = va.dim(2);
    int oh = 2 * h, ow = 2 * w;
    // Precompute 1-D interpolation (index0, weight of index0); index1=index0+1 clamped.
    auto axis = [](int n, int on) {
      std::vector<std::pair<int, T>> m(size_t(on));
      for (int o = 0; o < on; ++o) {
        double src = (o + 0.5) / 2.0 - 0.5;
        if (src < 0) src = 0;
        if (src > n - 1) src = n - 1;
        int i0 = int(std::floor(src));
        if (i0 > n - 2) i0 = std::max(0, n - 2);
        double w1 = src - i0;
        m[size_t(o)] = {i0, T(1.0 - w1)};
      }
      return m;
    };
    auto ym = axis(h, oh), xm = axis(w, ow);
    Tensor<T> out({c, oh, ow});
    for (int ch = 0; ch < c; ++ch) {
      const T* src = va.data() + int64_t(ch) * h * w;
      T* dst = out.data() + int64_t(ch) * oh * ow;
      for (int y = 0; y < oh; ++y) {
        auto [y0, wy0] = ym[size_t(y)];
        int y1 = std::min(y0 + 1, h - 1);
        for (int x = 0; x < ow; ++x) {
          auto [x0, wx0] = xm[size_t(x)];
          int x1 = std::min(x0 + 1, w - 1);
          dst[int64_t(y) * ow + x] = wy0 * (wx0 * src[int64_t(y0) * w + x0] +
                                            (T(1) - wx0) * src[int64_t(y0) * w + x1]) +
                                     (T(1) - wy0) * (wx0 * src[int64_t(y1) * w + x0] +
                                                     (T(1) - wx0) * src[int64_t(y1) * w + x1]);
        }
      }
    }
    return make(std::move(out), {a}, [a, c, h, w, oh, ow, ym, xm](Graph& g, int self) {
      const auto& go = g.nodes_[size_t(self)].grad;
      g.ensure_grad(a.idx);
      T* dx = g.nodes_[size_t(a.idx)].grad.data();
      for (int ch = 0; ch < c; ++ch) {
        const T* src = go.data() + int64_t(ch) * oh * ow;
        T* dst = dx + int64_t(ch) * h * w;
        for (int y = 0; y < oh; ++y) {
          auto [y0, wy0] = ym[size_t(y)];
          int y1 = std::min(y0 + 1, h - 1);
          for (int x = 0; x < ow; ++x) {
            auto [x0, wx0] = xm[size_t(x)];
            int x1 = std::min(x0 + 1, w - 1);
            T gv = src[int64_t(y) * ow + x];
            dst[int64_t(y0) * w + x0] += gv * wy0 * wx0;
            dst[int64_t(y0) * w + x1] += gv * wy0 * (T(1) - wx0);
            dst[int64_t(y1) * w + x0] += gv * (T(1) - wy0) * wx0;
            dst[int64_t(y1) * w + x1] += gv * (T(1) - wy0) * (T(1) - wx0);
          }
        }
      }
    });
  }

  // ------------------------------------------------------------- normalizers

  Var layer_norm(Var x, Var gamma, Var beta, T eps = T(1e-5)) {
    const auto& vx = value(x);
    if (vx.ndim() != 2) throw std::invalid_argument("layer_norm: expects 2-D");
    int m = vx.dim(0), d = vx.dim(1);
    Tensor<T> out({m, d});
    auto xhat = std::make_shared<Tensor<T>>(std::vector<int>{m, d});
    auto rstd = std::make_shared<Tensor<T>>(std::vector<int>{m});
    const auto& vg = value(gamma);
    const auto& vb = value(beta);
    for (int r = 0; r < m; ++r) {
      const T* row = vx.data() + int64_t(r) * d;
      T mean = T(0);
      for (int c = 0; c < d; ++c) mean += row[c];
      mean /= T(d);
      T var = T(0);
      for (int c = 0; c < d; ++c) var += (row[c] - mean) * (row[c] - mean);
      var /= T(d);
      T rs = T(1) / std::sqrt(var + eps);
      (*rstd)[r] = rs;
      for (int c = 0; c < d; ++c) {
        T xh = (row[c] - mean) * rs;
        (*xhat)[int64_t(r) * d + c] = xh;
        out[int64_t(r) * d + c] = xh * vg[c] + vb[c];
      }
    }
    return make(std::move(out), {x, gamma, beta},
                [x, gamma, beta, xhat, rstd, m, d](Graph& g, int self) {
                  const auto& go = g.nodes_[size_t(self)].grad;
                  const auto& vg = g.value(gamma);
                  if (g.requires_grad(gamma)) g.ensure_grad(gamma.idx);
                  if (g.requires_grad(beta)) g.ensure_grad(beta.idx);
                  if (g.requires_grad(x)) g.ensure_grad(x.idx);
                  T* dgamma = g.requires_grad(gamma) ? g.nodes_[size_t(gamma.idx)].grad.data() : nullptr;
                  T* dbeta = g.requires_grad(beta) ? g.nodes_[size_t(beta.idx)].grad.data() : nullptr;
                  T* dx = g.requires_grad(x) ? g.nodes_[size_t(x.idx)].grad.data() : nullptr;
                  for (int r = 0; r < m; ++r) {
                    const T* grow = go.data() + int64_t(r) * d;
                    const T* xh = xhat->data() + int64_t(r) * d;
                    if (dgamma || dbeta)
                      for (int c = 0; c < d; ++c) {
                        if (dgamma) dgamma[c] += grow[c] * xh[c];
                        if (dbeta) dbeta[c] += grow[c];
                      }
                    if (dx) {
                      T sum_gy = T(0), sum_gyxh = T(0);
                      for (int c = 0; c < d; ++c) {
                        T gy = grow[c] * vg[c];
                        sum_gy += gy;
                        sum_gyxh += gy * xh[c];
                      }
                      T rs = (*rstd)[r];
                      for (int c = 0; c < d; ++c) {
                        T gy = grow[c] * vg[c];
                        dx[int64_t(r) * d + c] +=
                            rs * (gy - sum_gy / T(d) - xh[c] * sum_gyxh / T(d));
                      }
                    }
                  }
                });
  }

  Var softmax_rows(Var a) {
    const auto& va = value(a);
    if (va.ndim() != 2) throw std::invalid_argument("softmax_rows: expects 2-D");
    int m = va.dim(0), n = va.dim(1);
    Tensor<T> out({m, n});
    for (int r = 0; r < m; ++r) {
      const T* row = va.data() + int64_t(r) * n;
      T mx = row[0];
      for (int c = 1; c < n; ++c) mx = std::max(mx, row[c]);
      T z = T(0);
      for (int c = 0; c < n; ++c) z += std::exp(row[c] - mx);
      for (int c = 0; c < n; ++c) out[int64_t(r) * n + c] = std::exp(row[c] - mx) / z;
    }
    return make(std::move(out), {a}, [a, m, n](Graph& g, int self) {
      const auto& go = g.nodes_[size_t(self)].grad;
      const auto& y = g.nodes_[size_t(self)].value;
      g.ensure_grad(a.idx);
      T* dst = g.nodes_[size_t(a.idx)].grad.data();
      for (int r = 0; r < m; ++r) {
        const T* yr = y.data() + int64_t(r) * n;
        const T* gr = go.data() + int64_t(r) * n;
        T dot = T(0);
        for (int c = 0; c < n; ++c) dot += yr[c] * gr[c];
        for (int c = 0; c < n; ++c) dst[int64_t(r) * n + c] += yr[c] * (gr[c] - dot);
      }
    });
  }

  Var log_softmax_rows(Var a) {
    const auto& va = value(a);
    if (va.ndim() != 2) throw std::invalid_argument("log_softmax_rows: expects 2-D");
    int m = va.dim(0), n = va.dim(1);
    Tensor<T> out({m, n});
    for (int r = 0; r < m; ++r) {
      const T* row = va.data() + int64_t(r) * n;
      T mx = row[0];
      for (int c = 1; c < n; ++c) mx = std::max(mx, row[c]);
      T z = T(0);
      for (int c = 0; c < n; ++c) z += std::exp(row[c] - mx);
      T lz = std::log(z) + mx;
      for (int c = 0; c < n; ++c) out[int64_t(r) * n + c] = row[c] - lz;
    }
    return make(std::move(out), {a}, [a, m, n](Graph& g, int self) {
      const auto& go = g.nodes_[size_t(self)].grad;
      const auto& y = g.nodes_[size_t(self)].value;
      g.ensure_grad(a.idx);
      T* dst = g.nodes_[size_t(a.idx)].grad.data();
      for (int r = 0; r < m; ++r) {
        const T* yr = y.data() + int64_t(r) * n;
        const T* gr = go.data() + int64_t(r) * n;
        T s = T(0);
        for (int c = 0; c < n; ++c) s += gr[c];
        for (int c = 0; c < n; ++c)
          dst[int64_t(r) * n + c] += gr[c] - std::exp(yr[c]) * s;
      }
    });
  }

 private:
  std::vector<Node> nodes_;

  Var make(Tensor<T> value, std::initializer_list<Var> parents,
           std::function<void(Graph&, int)> bw) {
    return make(std::move(value), std::vector<Var>(parents), std::move(bw));
  }

  Var make(Tensor<T> value, const std::vector<Var>& parents,
           std::function<void(Graph&, int)> bw) {
    Node n;
    n.value = std::move(value);
    bool rg = false;
    if (recording)
      for (Var p : parents)
        if (p.valid() && nodes_[size_t(p.idx)].requires_grad) rg = true;
    n.requires_grad = rg;
    if (rg) n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return Var{int32_t(nodes_.size() - 1)};
  }
};

}  // namespace ciseg
