#include "setnet/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <memory>

#include "setnet/blas.hpp"

namespace setnet::ad {

namespace {

void require(bool cond, const char* msg) {
  if (!cond) throw dim_error(msg);
}

void same_tape(std::span<const Var> vars) {
  for (size_t i = 1; i < vars.size(); ++i)
    if (vars[i].tape() != vars[0].tape())
      throw dim_error("operands recorded on different tapes");
}

// (outer, len, inner) decomposition of a reduction axis.
struct AxisSplit {
  int64_t outer, len, inner;
};

AxisSplit split_axis(const Tensor& t, int axis) {
  require(axis >= 0 && axis < t.rank(), "reduction axis out of range");
  AxisSplit s{1, t.dim(axis), 1};
  for (int i = 0; i < axis; ++i) s.outer *= t.dim(i);
  for (int i = axis + 1; i < t.rank(); ++i) s.inner *= t.dim(i);
  return s;
}

std::vector<int64_t> drop_axis(const Tensor& t, int axis) {
  std::vector<int64_t> shape;
  for (int i = 0; i < t.rank(); ++i)
    if (i != axis) shape.push_back(t.dim(i));
  return shape;
}

}  // namespace

void check_finite(const Tensor& t, const char* where) {
  const double* p = t.data();
  for (int64_t i = 0; i < t.size(); ++i)
    if (!std::isfinite(p[i]))
      throw numeric_error(std::string("non-finite value in ") + where);
}

// ---- Tape ------------------------------------------------------------

Var Tape::leaf(const Tensor& value, int param_id) {
  Node n;
  n.value = value;
  n.param_id = param_id;
  n.needs_grad = value.requires_grad();
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = false;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(Tensor value, std::span<const Var> inputs, VjpFn vjp) {
  same_tape(inputs);
  Node n;
  n.value = std::move(value);
  for (const Var& v : inputs) {
    require(v.tape() == this, "input from another tape");
    n.inputs.push_back(v.id());
    n.needs_grad = n.needs_grad || v.needs_grad();
  }
  if (n.needs_grad) n.vjp = std::move(vjp);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor& Tape::grad_buf(int id) {
  auto& g = grads_[static_cast<size_t>(id)];
  if (!g.defined()) g = Tensor::zeros(nodes_[static_cast<size_t>(id)].value.shape());
  return g;
}

GradMap Tape::backward(Var loss) {
  require(loss.tape() == this, "loss on another tape");
  const Tensor& lv = value(loss.id());
  if (lv.size() != 1)
    throw dim_error("backward requires a scalar loss, got shape " +
                    lv.shape_str());
  if (!std::isfinite(lv[0])) throw numeric_error("loss is not finite");

  grads_.assign(nodes_.size(), Tensor());
  grads_[static_cast<size_t>(loss.id())] = Tensor::full(lv.shape(), 1.0);

  GradMap out;
  for (int id = loss.id(); id >= 0; --id) {
    Node& node = nodes_[static_cast<size_t>(id)];
    Tensor& g = grads_[static_cast<size_t>(id)];
    if (!g.defined() || !node.needs_grad) {
      g = Tensor();
      continue;
    }
    if (node.vjp) node.vjp(*this, g, id);
    if (node.param_id >= 0) out[node.param_id] = std::move(g);
    g = Tensor();  // consumed
  }
  grads_.clear();
  return out;
}

// ---- matmul ----------------------------------------------------------

Var matmul(Var a, Var b) {
  Tape& tp = *a.tape();
  const Tensor& A = a.val();
  const Tensor& B = b.val();
  if (A.rank() == 2 && B.rank() == 2) {
    require(A.dim(1) == B.dim(0), "matmul inner dimensions differ");
    Tensor out({A.dim(0), B.dim(1)});
    blas::dgemm(false, false, A.dim(0), B.dim(1), A.dim(1), 1.0, A.data(),
                A.dim(1), B.data(), B.dim(1), 0.0, out.data(), B.dim(1));
    Var in[] = {a, b};
    return tp.record(std::move(out), in, [](Tape& t, const Tensor& g, int id) {
      const auto& in = t.inputs_of(id);
      const Tensor& A = t.value(in[0]);
      const Tensor& B = t.value(in[1]);
      if (t.node_needs_grad(in[0]))
        blas::dgemm(false, true, A.dim(0), A.dim(1), B.dim(1), 1.0, g.data(),
                    B.dim(1), B.data(), B.dim(1), 1.0, t.grad_buf(in[0]).data(),
                    A.dim(1));
      if (t.node_needs_grad(in[1]))
        blas::dgemm(true, false, A.dim(1), B.dim(1), A.dim(0), 1.0, A.data(),
                    A.dim(1), g.data(), B.dim(1), 1.0, t.grad_buf(in[1]).data(),
                    B.dim(1));
    });
  }
  if (A.rank() == 3 && B.rank() == 2) {
    require(A.dim(2) == B.dim(0), "matmul inner dimensions differ");
    int64_t rows = A.dim(0) * A.dim(1);
    Tensor out({A.dim(0), A.dim(1), B.dim(1)});
    blas::dgemm(false, false, rows, B.dim(1), A.dim(2), 1.0, A.data(), A.dim(2),
                B.data(), B.dim(1), 0.0, out.data(), B.dim(1));
    Var in[] = {a, b};
    return tp.record(std::move(out), in, [](Tape& t, const Tensor& g, int id) {
      const auto& in = t.inputs_of(id);
      const Tensor& A = t.value(in[0]);
      const Tensor& B = t.value(in[1]);
      int64_t rows = A.dim(0) * A.dim(1);
      if (t.node_needs_grad(in[0]))
        blas::dgemm(false, true, rows, A.dim(2), B.dim(1), 1.0, g.data(),
                    B.dim(1), B.data(), B.dim(1), 1.0, t.grad_buf(in[0]).data(),
                    A.dim(2));
      if (t.node_needs_grad(in[1]))
        blas::dgemm(true, false, A.dim(2), B.dim(1), rows, 1.0, A.data(),
                    A.dim(2), g.data(), B.dim(1), 1.0, t.grad_buf(in[1]).data(),
                    B.dim(1));
    });
  }
  if (A.rank() == 3 && B.rank() == 3) {
    require(A.dim(0) == B.dim(0) && A.dim(2) == B.dim(1),
            "batched matmul shapes incompatible");
    int64_t n = A.dim(0), m = A.dim(1), k = A.dim(2), e = B.dim(2);
    Tensor out({n, m, e});
    for (int64_t s = 0; s < n; ++s)
      blas::dgemm(false, false, m, e, k, 1.0, A.data() + s * m * k, k,
                  B.data() + s * k * e, e, 0.0, out.data() + s * m * e, e);
    Var in[] = {a, b};
    return tp.record(std::move(out), in, [](Tape& t, const Tensor& g, int id) {
      const auto& in = t.inputs_of(id);
      const Tensor& A = t.value(in[0]);
      const Tensor& B = t.value(in[1]);
      int64_t n = A.dim(0), m = A.dim(1), k = A.dim(2), e = B.dim(2);
      for (int64_t s = 0; s < n; ++s) {
        if (t.node_needs_grad(in[0]))
          blas::dgemm(false, true, m, k, e, 1.0, g.data() + s * m * e, e,
                      B.data() + s * k * e, e, 1.0,
                      t.grad_buf(in[0]).data() + s * m * k, k);
        if (t.node_needs_grad(in[1]))
          blas::dgemm(true, false, k, e, m, 1.0, A.data() + s * m * k, k,
                      g.data() + s * m * e, e, 1.0,
                      t.grad_buf(in[1]).data() + s * k * e, e);
      }
    });
  }
  throw dim_error("matmul supports [m,k]@[k,n], [n,m,k]@[k,e], [b,m,k]@[b,k,n]");
}

// ---- elementwise -----------------------------------------------------

namespace {

template <typename Fwd, typename Bwd>
Var binary_same_shape(Var a, Var b, const char* name, Fwd fwd, Bwd bwd) {
  const Tensor& A = a.val();
  const Tensor& B = b.val();
  if (!A.same_shape(B))
    throw dim_error(std::string(name) + ": shape mismatch " + A.shape_str() +
                    " vs " + B.shape_str());
  Tensor out(A.shape());
  fwd(A.data(), B.data(), out.data(), A.size());
  Var in[] = {a, b};
  return a.tape()->record(std::move(out), in,
                          [bwd](Tape& t, const Tensor& g, int id) {
                            const auto& in = t.inputs_of(id);
                            bwd(t, g, in[0], in[1]);
                          });
}

}  // namespace

Var add(Var a, Var b) {
  return binary_same_shape(
      a, b, "add",
      [](const double* x, const double* y, double* o, int64_t n) {
        for (int64_t i = 0; i < n; ++i) o[i] = x[i] + y[i];
      },
      [](Tape& t, const Tensor& g, int ia, int ib) {
        for (int id : {ia, ib}) {
          if (!t.node_needs_grad(id)) continue;
          double* d = t.grad_buf(id).data();
          for (int64_t i = 0; i < g.size(); ++i) d[i] += g[i];
        }
      });
}

Var sub(Var a, Var b) {
  return binary_same_shape(
      a, b, "sub",
      [](const double* x, const double* y, double* o, int64_t n) {
        for (int64_t i = 0; i < n; ++i) o[i] = x[i] - y[i];
      },
      [](Tape& t, const Tensor& g, int ia, int ib) {
        if (t.node_needs_grad(ia)) {
          double* d = t.grad_buf(ia).data();
          for (int64_t i = 0; i < g.size(); ++i) d[i] += g[i];
        }
        if (t.node_needs_grad(ib)) {
          double* d = t.grad_buf(ib).data();
          for (int64_t i = 0; i < g.size(); ++i) d[i] -= g[i];
        }
      });
}

Var mul(Var a, Var b) {
  return binary_same_shape(
      a, b, "mul",
      [](const double* x, const double* y, double* o, int64_t n) {
        for (int64_t i = 0; i < n; ++i) o[i] = x[i] * y[i];
      },
      [](Tape& t, const Tensor& g, int ia, int ib) {
        if (t.node_needs_grad(ia)) {
          double* d = t.grad_buf(ia).data();
          const double* y = t.value(ib).data();
          for (int64_t i = 0; i < g.size(); ++i) d[i] += g[i] * y[i];
        }
        if (t.node_needs_grad(ib)) {
          double* d = t.grad_buf(ib).data();
          const double* x = t.value(ia).data();
          for (int64_t i = 0; i < g.size(); ++i) d[i] += g[i] * x[i];
        }
      });
}

Var scale(Var a, double c) {
  const Tensor& A = a.val();
  Tensor out(A.shape());
  for (int64_t i = 0; i < A.size(); ++i) out[i] = A[i] * c;
  Var in[] = {a};
  return a.tape()->record(std::move(out), in,
                          [c](Tape& t, const Tensor& g, int id) {
                            int ia = t.inputs_of(id)[0];
                            if (!t.node_needs_grad(ia)) return;
                            double* d = t.grad_buf(ia).data();
                            for (int64_t i = 0; i < g.size(); ++i)
                              d[i] += g[i] * c;
                          });
}

Var relu(Var a) {
  const Tensor& A = a.val();
  Tensor out(A.shape());
  for (int64_t i = 0; i < A.size(); ++i) out[i] = A[i] > 0.0 ? A[i] : 0.0;
  Var in[] = {a};
  // Subgradient at 0 is 0: the mask out > 0 reproduces that exactly.
  return a.tape()->record(std::move(out), in,
                          [](Tape& t, const Tensor& g, int id) {
                            int ia = t.inputs_of(id)[0];
                            if (!t.node_needs_grad(ia)) return;
                            const Tensor& y = t.value(id);
                            double* d = t.grad_buf(ia).data();
                            for (int64_t i = 0; i < g.size(); ++i)
                              if (y[i] > 0.0) d[i] += g[i];
                          });
}

Var affine(Var x, Var w, const Var* b, bool with_relu) {
  const Tensor& X = x.val();
  const Tensor& W = w.val();
  require(W.rank() == 2, "affine weight must be rank 2");
  require(X.rank() >= 2 && X.cols() == W.dim(0),
          "affine input width does not match weight");
  int64_t rows = X.rows(), in_d = W.dim(0), out_d = W.dim(1);
  std::vector<int64_t> out_shape(X.shape());
  out_shape.back() = out_d;
  Tensor out(std::move(out_shape));
  blas::dgemm(false, false, rows, out_d, in_d, 1.0, X.data(), in_d, W.data(),
              out_d, 0.0, out.data(), out_d);
  if (b) {
    const Tensor& B = b->val();
    require(B.rank() == 1 && B.dim(0) == out_d, "affine bias length mismatch");
    double* o = out.data();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < out_d; ++j) o[r * out_d + j] += B[j];
  }
  if (with_relu)
    for (int64_t i = 0; i < out.size(); ++i)
      if (out[i] < 0.0) out[i] = 0.0;

  std::vector<Var> in{x, w};
  if (b) in.push_back(*b);
  bool has_bias = b != nullptr;
  return x.tape()->record(
      std::move(out), in,
      [with_relu, has_bias](Tape& t, const Tensor& g, int id) {
        const auto& in = t.inputs_of(id);
        const Tensor& X = t.value(in[0]);
        const Tensor& W = t.value(in[1]);
        const Tensor& Y = t.value(id);
        int64_t rows = X.rows(), in_d = W.dim(0), out_d = W.dim(1);
        // gz = g masked by the relu; when there is no relu, g itself.
        const double* gz_ptr = g.data();
        Tensor gz;
        if (with_relu) {
          gz = Tensor(g.shape());
          for (int64_t i = 0; i < g.size(); ++i)
            gz[i] = Y[i] > 0.0 ? g[i] : 0.0;
          gz_ptr = gz.data();
        }
        if (t.node_needs_grad(in[0]))
          blas::dgemm(false, true, rows, in_d, out_d, 1.0, gz_ptr, out_d,
                      W.data(), out_d, 1.0, t.grad_buf(in[0]).data(), in_d);
        if (t.node_needs_grad(in[1]))
          blas::dgemm(true, false, in_d, out_d, rows, 1.0, X.data(), in_d,
                      gz_ptr, out_d, 1.0, t.grad_buf(in[1]).data(), out_d);
        if (has_bias && t.node_needs_grad(in[2])) {
          double* db = t.grad_buf(in[2]).data();
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < out_d; ++j) db[j] += gz_ptr[r * out_d + j];
        }
      });
}

// ---- reductions ------------------------------------------------------

Var sum(Var a, int axis) {
  const Tensor& A = a.val();
  AxisSplit s = split_axis(A, axis);
  Tensor out = Tensor::zeros(drop_axis(A, axis));
  for (int64_t o = 0; o < s.outer; ++o)
    for (int64_t l = 0; l < s.len; ++l)
      for (int64_t i = 0; i < s.inner; ++i)
        out[o * s.inner + i] += A[(o * s.len + l) * s.inner + i];
  Var in[] = {a};
  return a.tape()->record(std::move(out), in,
                          [s](Tape& t, const Tensor& g, int id) {
                            int ia = t.inputs_of(id)[0];
                            if (!t.node_needs_grad(ia)) return;
                            double* d = t.grad_buf(ia).data();
                            for (int64_t o = 0; o < s.outer; ++o)
                              for (int64_t l = 0; l < s.len; ++l)
                                for (int64_t i = 0; i < s.inner; ++i)
                                  d[(o * s.len + l) * s.inner + i] +=
                                      g[o * s.inner + i];
                          });
}

Var mean(Var a, int axis) {
  const Tensor& A = a.val();
  AxisSplit s = split_axis(A, axis);
  require(s.len > 0, "mean over an empty axis");
  return scale(sum(a, axis), 1.0 / static_cast<double>(s.len));
}

Var max(Var a, int axis) {
  const Tensor& A = a.val();
  AxisSplit s = split_axis(A, axis);
  require(s.len > 0, "max over an empty axis");
  Tensor out(drop_axis(A, axis));
  auto argmax = std::make_shared<std::vector<int64_t>>(
      static_cast<size_t>(s.outer * s.inner));
  for (int64_t o = 0; o < s.outer; ++o)
    for (int64_t i = 0; i < s.inner; ++i) {
      double best = -std::numeric_limits<double>::infinity();
      int64_t best_l = 0;
      for (int64_t l = 0; l < s.len; ++l) {
        double v = A[(o * s.len + l) * s.inner + i];
        if (v > best) {  // strict: ties go to the first index
          best = v;
          best_l = l;
        }
      }
      out[o * s.inner + i] = best;
      (*argmax)[static_cast<size_t>(o * s.inner + i)] = best_l;
    }
  Var in[] = {a};
  return a.tape()->record(std::move(out), in,
                          [s, argmax](Tape& t, const Tensor& g, int id) {
                            int ia = t.inputs_of(id)[0];
                            if (!t.node_needs_grad(ia)) return;
                            double* d = t.grad_buf(ia).data();
                            for (int64_t o = 0; o < s.outer; ++o)
                              for (int64_t i = 0; i < s.inner; ++i) {
                                int64_t l = (*argmax)[static_cast<size_t>(
                                    o * s.inner + i)];
                                d[(o * s.len + l) * s.inner + i] +=
                                    g[o * s.inner + i];
                              }
                          });
}

// ---- masked set reductions -------------------------------------------

namespace {

void require_batch(const Tensor& x, const Mask* mask) {
  require(x.rank() == 3, "set reduction expects an [n,m,d] tensor");
  if (mask)
    require(mask->sets() == x.dim(0) && mask->elems() == x.dim(1),
            "mask does not match batch shape");
}

}  // namespace

Var sum_elems(Var x, const Mask* mask) {
  const Tensor& X = x.val();
  require_batch(X, mask);
  int64_t n = X.dim(0), m = X.dim(1), d = X.dim(2);
  Tensor out({n, d});
  for (int64_t s = 0; s < n; ++s)
    for (int64_t j = 0; j < d; ++j) {
      KahanSum acc;
      for (int64_t i = 0; i < m; ++i)
        if (!mask || mask->valid(s, i)) acc.add(X.at(s, i, j));
      out.at(s, j) = acc.value();
    }
  Var in[] = {x};
  const Mask* mk = mask;
  return x.tape()->record(std::move(out), in,
                          [mk, n, m, d](Tape& t, const Tensor& g, int id) {
                            int ix = t.inputs_of(id)[0];
                            if (!t.node_needs_grad(ix)) return;
                            Tensor& dx = t.grad_buf(ix);
                            for (int64_t s = 0; s < n; ++s)
                              for (int64_t i = 0; i < m; ++i) {
                                if (mk && !mk->valid(s, i)) continue;
                                for (int64_t j = 0; j < d; ++j)
                                  dx.at(s, i, j) += g.at(s, j);
                              }
                          });
}

Var mean_elems(Var x, const Mask* mask) {
  const Tensor& X = x.val();
  require_batch(X, mask);
  int64_t n = X.dim(0), m = X.dim(1), d = X.dim(2);
  Tensor out({n, d});
  for (int64_t s = 0; s < n; ++s) {
    int64_t cnt = mask ? mask->count(s) : m;
    for (int64_t j = 0; j < d; ++j) {
      KahanSum acc;
      for (int64_t i = 0; i < m; ++i)
        if (!mask || mask->valid(s, i)) acc.add(X.at(s, i, j));
      out.at(s, j) = acc.value() / static_cast<double>(cnt);
    }
  }
  Var in[] = {x};
  const Mask* mk = mask;
  return x.tape()->record(std::move(out), in,
                          [mk, n, m, d](Tape& t, const Tensor& g, int id) {
                            int ix = t.inputs_of(id)[0];
                            if (!t.node_needs_grad(ix)) return;
                            Tensor& dx = t.grad_buf(ix);
                            for (int64_t s = 0; s < n; ++s) {
                              double inv = 1.0 / static_cast<double>(
                                                     mk ? mk->count(s) : m);
                              for (int64_t i = 0; i < m; ++i) {
                                if (mk && !mk->valid(s, i)) continue;
                                for (int64_t j = 0; j < d; ++j)
                                  dx.at(s, i, j) += g.at(s, j) * inv;
                              }
                            }
                          });
}

Var max_elems(Var x, const Mask* mask) {
  const Tensor& X = x.val();
  require_batch(X, mask);
  int64_t n = X.dim(0), m = X.dim(1), d = X.dim(2);
  Tensor out({n, d});
  auto argmax =
      std::make_shared<std::vector<int64_t>>(static_cast<size_t>(n * d));
  for (int64_t s = 0; s < n; ++s)
    for (int64_t j = 0; j < d; ++j) {
      // -inf sentinel over invalid positions; never returned because every
      // set has at least one valid element.
      double best = -std::numeric_limits<double>::infinity();
      int64_t best_i = 0;
      for (int64_t i = 0; i < m; ++i) {
        if (mask && !mask->valid(s, i)) continue;
        double v = X.at(s, i, j);
        if (v > best) {
          best = v;
          best_i = i;
        }
      }
      out.at(s, j) = best;
      (*argmax)[static_cast<size_t>(s * d + j)] = best_i;
    }
  Var in[] = {x};
  return x.tape()->record(std::move(out), in,
                          [argmax, n, d](Tape& t, const Tensor& g, int id) {
                            int ix = t.inputs_of(id)[0];
                            if (!t.node_needs_grad(ix)) return;
                            Tensor& dx = t.grad_buf(ix);
                            for (int64_t s = 0; s < n; ++s)
                              for (int64_t j = 0; j < d; ++j)
                                dx.at(s, (*argmax)[static_cast<size_t>(s * d + j)],
                                      j) += g.at(s, j);
                          });
}

// ---- broadcasts ------------------------------------------------------

Var broadcast_features(Var v, int64_t sets, int64_t elems) {
  const Tensor& V = v.val();
  require(V.rank() == 1, "broadcast_features expects a [d] vector");
  int64_t d = V.dim(0);
  Tensor out({sets, elems, d});
  for (int64_t r = 0; r < sets * elems; ++r)
    std::memcpy(out.data() + r * d, V.data(), static_cast<size_t>(d) * 8);
  Var in[] = {v};
  return v.tape()->record(std::move(out), in,
                          [sets, elems, d](Tape& t, const Tensor& g, int id) {
                            int iv = t.inputs_of(id)[0];
                            if (!t.node_needs_grad(iv)) return;
                            double* dv = t.grad_buf(iv).data();
                            for (int64_t r = 0; r < sets * elems; ++r)
                              for (int64_t j = 0; j < d; ++j)
                                dv[j] += g[r * d + j];
                          });
}

Var broadcast_pooled(Var v, int64_t elems) {
  const Tensor& V = v.val();
  require(V.rank() == 2, "broadcast_pooled expects an [n,d] tensor");
  int64_t n = V.dim(0), d = V.dim(1);
  Tensor out({n, elems, d});
  for (int64_t s = 0; s < n; ++s)
    for (int64_t i = 0; i < elems; ++i)
      std::memcpy(out.data() + (s * elems + i) * d, V.data() + s * d,
                  static_cast<size_t>(d) * 8);
  Var in[] = {v};
  return v.tape()->record(std::move(out), in,
                          [n, elems, d](Tape& t, const Tensor& g, int id) {
                            int iv = t.inputs_of(id)[0];
                            if (!t.node_needs_grad(iv)) return;
                            double* dv = t.grad_buf(iv).data();
                            for (int64_t s = 0; s < n; ++s)
                              for (int64_t i = 0; i < elems; ++i)
                                for (int64_t j = 0; j < d; ++j)
                                  dv[s * d + j] += g[(s * elems + i) * d + j];
                          });
}

Var broadcast_sets(Var v, int64_t sets) {
  const Tensor& V = v.val();
  require(V.rank() == 2, "broadcast_sets expects an [m,d] tensor");
  int64_t m = V.dim(0), d = V.dim(1);
  Tensor out({sets, m, d});
  for (int64_t s = 0; s < sets; ++s)
    std::memcpy(out.data() + s * m * d, V.data(),
                static_cast<size_t>(m * d) * 8);
  Var in[] = {v};
  return v.tape()->record(std::move(out), in,
                          [sets, m, d](Tape& t, const Tensor& g, int id) {
                            int iv = t.inputs_of(id)[0];
                            if (!t.node_needs_grad(iv)) return;
                            double* dv = t.grad_buf(iv).data();
                            for (int64_t s = 0; s < sets; ++s)
                              for (int64_t i = 0; i < m * d; ++i)
                                dv[i] += g[s * m * d + i];
                          });
}

// ---- shape ops -------------------------------------------------------

Var concat(std::span<const Var> parts, int axis) {
  require(!parts.empty(), "concat of nothing");
  same_tape(parts);
  const Tensor& first = parts[0].val();
  int rank = first.rank();
  require(axis >= 0 && axis < rank, "concat axis out of range");
  std::vector<int64_t> shape = first.shape();
  int64_t total = 0;
  for (const Var& p : parts) {
    const Tensor& t = p.val();
    require(t.rank() == rank, "concat rank mismatch");
    for (int i = 0; i < rank; ++i)
      if (i != axis)
        require(t.dim(i) == first.dim(i), "concat shape mismatch off-axis");
    total += t.dim(axis);
  }
  shape[static_cast<size_t>(axis)] = total;

  AxisSplit s = split_axis(first, axis);  // inner/outer match across parts
  Tensor out(shape);
  std::vector<int64_t> offsets;
  int64_t off = 0;
  for (const Var& p : parts) {
    const Tensor& t = p.val();
    int64_t len = t.dim(axis);
    for (int64_t o = 0; o < s.outer; ++o)
      std::memcpy(out.data() + (o * total + off) * s.inner,
                  t.data() + o * len * s.inner,
                  static_cast<size_t>(len * s.inner) * 8);
    offsets.push_back(off);
    off += len;
  }
  return parts[0].tape()->record(
      std::move(out), parts,
      [s, total, offsets](Tape& t, const Tensor& g, int id) {
        const auto& in = t.inputs_of(id);
        for (size_t p = 0; p < in.size(); ++p) {
          if (!t.node_needs_grad(in[p])) continue;
          Tensor& d = t.grad_buf(in[p]);
          int64_t len = d.size() / (s.outer * s.inner);
          for (int64_t o = 0; o < s.outer; ++o) {
            const double* src = g.data() + (o * total + offsets[p]) * s.inner;
            double* dst = d.data() + o * len * s.inner;
            for (int64_t i = 0; i < len * s.inner; ++i) dst[i] += src[i];
          }
        }
      });
}

Var transpose(Var a) {
  const Tensor& A = a.val();
  require(A.rank() >= 2, "transpose needs rank >= 2");
  int64_t b = A.rank() == 3 ? A.dim(0) : 1;
  int64_t m = A.dim(A.rank() - 2), n = A.dim(A.rank() - 1);
  std::vector<int64_t> shape = A.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  Tensor out(shape);
  for (int64_t s = 0; s < b; ++s)
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j)
        out[s * m * n + j * m + i] = A[s * m * n + i * n + j];
  Var in[] = {a};
  return a.tape()->record(std::move(out), in,
                          [b, m, n](Tape& t, const Tensor& g, int id) {
                            int ia = t.inputs_of(id)[0];
                            if (!t.node_needs_grad(ia)) return;
                            double* d = t.grad_buf(ia).data();
                            for (int64_t s = 0; s < b; ++s)
                              for (int64_t i = 0; i < m; ++i)
                                for (int64_t j = 0; j < n; ++j)
                                  d[s * m * n + i * n + j] +=
                                      g[s * m * n + j * m + i];
                          });
}

Var reshape(Var a, std::vector<int64_t> shape) {
  const Tensor& A = a.val();
  Tensor out(shape);
  require(out.size() == A.size(), "reshape changes element count");
  std::memcpy(out.data(), A.data(), static_cast<size_t>(A.size()) * 8);
  Var in[] = {a};
  return a.tape()->record(std::move(out), in,
                          [](Tape& t, const Tensor& g, int id) {
                            int ia = t.inputs_of(id)[0];
                            if (!t.node_needs_grad(ia)) return;
                            double* d = t.grad_buf(ia).data();
                            for (int64_t i = 0; i < g.size(); ++i) d[i] += g[i];
                          });
}

Var mask_rows(Var x, const Mask* mask) {
  const Tensor& X = x.val();
  require_batch(X, mask);
  if (!mask) return x;
  int64_t n = X.dim(0), m = X.dim(1), d = X.dim(2);
  Tensor out(X.shape());
  for (int64_t s = 0; s < n; ++s)
    for (int64_t i = 0; i < m; ++i) {
      double* dst = out.data() + (s * m + i) * d;
      if (mask->valid(s, i))
        std::memcpy(dst, X.data() + (s * m + i) * d,
                    static_cast<size_t>(d) * 8);
      else
        std::memset(dst, 0, static_cast<size_t>(d) * 8);
    }
  Var in[] = {x};
  const Mask* mk = mask;
  return x.tape()->record(std::move(out), in,
                          [mk, n, m, d](Tape& t, const Tensor& g, int id) {
                            int ix = t.inputs_of(id)[0];
                            if (!t.node_needs_grad(ix)) return;
                            Tensor& dx = t.grad_buf(ix);
                            for (int64_t s = 0; s < n; ++s)
                              for (int64_t i = 0; i < m; ++i) {
                                if (!mk->valid(s, i)) continue;
                                for (int64_t j = 0; j < d; ++j)
                                  dx.at(s, i, j) += g.at(s, i, j);
                              }
                          });
}

// ---- softmax & attention ---------------------------------------------

namespace {

// probs <- softmax(row / denom) over valid columns; invalid columns get 0.
void masked_softmax_row(const double* row, double* probs, int64_t len,
                        double denom, const uint8_t* valid) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int64_t j = 0; j < len; ++j)
    if ((!valid || valid[j]) && row[j] > mx) mx = row[j];
  double total = 0.0;
  for (int64_t j = 0; j < len; ++j) {
    if (valid && !valid[j]) {
      probs[j] = 0.0;
      continue;
    }
    double e = std::exp((row[j] - mx) / denom);
    probs[j] = e;
    total += e;
  }
  double inv = 1.0 / total;
  for (int64_t j = 0; j < len; ++j) probs[j] *= inv;
}

// dlogits_j = (1/denom) p_j (g_j - sum_k g_k p_k), accumulated.
void softmax_vjp_row(const double* probs, const double* g, double* dlogits,
                     int64_t len, double denom) {
  double dot = 0.0;
  for (int64_t j = 0; j < len; ++j) dot += g[j] * probs[j];
  double inv = 1.0 / denom;
  for (int64_t j = 0; j < len; ++j)
    dlogits[j] += inv * probs[j] * (g[j] - dot);
}

}  // namespace

Var scaled_softmax(Var logits, double denom, const Mask* key_mask) {
  const Tensor& L = logits.val();
  require(L.rank() >= 1, "softmax needs rank >= 1");
  require(L.dim(L.rank() - 1) >= 1, "softmax axis is empty");
  int64_t cols = L.dim(L.rank() - 1);
  int64_t rows = L.rows();
  int64_t sets = L.rank() == 3 ? L.dim(0) : 1;
  int64_t rows_per_set = rows / sets;
  if (key_mask)
    require(L.rank() == 3 && key_mask->sets() == sets &&
                key_mask->elems() == cols,
            "softmax key mask shape mismatch");
  Tensor out(L.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const uint8_t* valid = key_mask ? key_mask->row(r / rows_per_set) : nullptr;
    masked_softmax_row(L.data() + r * cols, out.data() + r * cols, cols, denom,
                       valid);
  }
  Var in[] = {logits};
  return logits.tape()->record(
      std::move(out), in,
      [denom, rows, cols](Tape& t, const Tensor& g, int id) {
        int il = t.inputs_of(id)[0];
        if (!t.node_needs_grad(il)) return;
        const Tensor& p = t.value(id);
        Tensor& dl = t.grad_buf(il);
        for (int64_t r = 0; r < rows; ++r)
          softmax_vjp_row(p.data() + r * cols, g.data() + r * cols,
                          dl.data() + r * cols, cols, denom);
      });
}

Var attention_core(Var q, Var k, Var v, int heads, double denom,
                   const Mask* key_mask, const Mask* query_mask) {
  const Tensor& Q = q.val();
  const Tensor& K = k.val();
  const Tensor& V = v.val();
  require(Q.rank() == 3 && K.rank() == 3 && V.rank() == 3,
          "attention expects [n,s,d] tensors");
  int64_t n = Q.dim(0), sq = Q.dim(1), d = Q.dim(2), sk = K.dim(1);
  require(K.dim(0) == n && V.dim(0) == n, "attention batch size mismatch");
  require(K.dim(2) == d && V.dim(2) == d && V.dim(1) == sk,
          "attention feature dims mismatch");
  if (heads <= 0 || d % heads != 0)
    throw config_error("head count must divide the feature dimension");
  int64_t dh = d / heads;
  if (key_mask)
    require(key_mask->sets() == n && key_mask->elems() == sk,
            "attention key mask mismatch");
  if (query_mask)
    require(query_mask->sets() == n && query_mask->elems() == sq,
            "attention query mask mismatch");

  auto probs = std::make_shared<std::vector<double>>(
      static_cast<size_t>(n * heads * sq * sk));
  Tensor out({n, sq, d});
  std::vector<double> logits(static_cast<size_t>(sq * sk));
  for (int64_t s = 0; s < n; ++s) {
    const uint8_t* kvalid = key_mask ? key_mask->row(s) : nullptr;
    for (int h = 0; h < heads; ++h) {
      const double* qh = Q.data() + s * sq * d + h * dh;
      const double* kh = K.data() + s * sk * d + h * dh;
      const double* vh = V.data() + s * sk * d + h * dh;
      double* ph = probs->data() + ((s * heads + h) * sq) * sk;
      blas::dgemm(false, true, sq, sk, dh, 1.0, qh, d, kh, d, 0.0,
                  logits.data(), sk);
      for (int64_t r = 0; r < sq; ++r)
        masked_softmax_row(logits.data() + r * sk, ph + r * sk, sk, denom,
                           kvalid);
      // out head block, strided over the full feature dim
      blas::dgemm(false, false, sq, dh, sk, 1.0, ph, sk, vh, d, 0.0,
                  out.data() + s * sq * d + h * dh, d);
    }
    if (query_mask)
      for (int64_t i = 0; i < sq; ++i)
        if (!query_mask->valid(s, i))
          std::memset(out.data() + (s * sq + i) * d, 0,
                      static_cast<size_t>(d) * 8);
  }

  Var in[] = {q, k, v};
  const Mask* qm = query_mask;
  return q.tape()->record(
      std::move(out), in,
      [probs, heads, denom, n, sq, sk, d, dh, qm](Tape& t, const Tensor& g,
                                                  int id) {
        const auto& in = t.inputs_of(id);
        const Tensor& Q = t.value(in[0]);
        const Tensor& K = t.value(in[1]);
        const Tensor& V = t.value(in[2]);
        bool need_q = t.node_needs_grad(in[0]);
        bool need_k = t.node_needs_grad(in[1]);
        bool need_v = t.node_needs_grad(in[2]);
        if (!(need_q || need_k || need_v)) return;
        Tensor* dq = need_q ? &t.grad_buf(in[0]) : nullptr;
        Tensor* dk = need_k ? &t.grad_buf(in[1]) : nullptr;
        Tensor* dv = need_v ? &t.grad_buf(in[2]) : nullptr;

        std::vector<double> go(static_cast<size_t>(sq * dh));
        std::vector<double> dp(static_cast<size_t>(sq * sk));
        std::vector<double> dl(static_cast<size_t>(sq * sk));
        for (int64_t s = 0; s < n; ++s) {
          for (int h = 0; h < heads; ++h) {
            const double* qh = Q.data() + s * sq * d + h * dh;
            const double* kh = K.data() + s * sk * d + h * dh;
            const double* vh = V.data() + s * sk * d + h * dh;
            const double* ph = probs->data() + ((s * heads + h) * sq) * sk;
            // head-block of the output gradient, with padded query rows
            // zeroed (their forward rows are forced to zero).
            for (int64_t r = 0; r < sq; ++r) {
              bool dead = qm && !qm->valid(s, r);
              for (int64_t j = 0; j < dh; ++j)
                go[static_cast<size_t>(r * dh + j)] =
                    dead ? 0.0 : g[(s * sq + r) * d + h * dh + j];
            }
            if (need_v)
              blas::dgemm(true, false, sk, dh, sq, 1.0, ph, sk, go.data(), dh,
                          1.0, dv->data() + s * sk * d + h * dh, d);
            if (need_q || need_k) {
              blas::dgemm(false, true, sq, sk, dh, 1.0, go.data(), dh, vh, d,
                          0.0, dp.data(), sk);
              std::memset(dl.data(), 0, static_cast<size_t>(sq * sk) * 8);
              for (int64_t r = 0; r < sq; ++r)
                softmax_vjp_row(ph + r * sk, dp.data() + r * sk,
                                dl.data() + r * sk, sk, denom);
              if (need_q)
                blas::dgemm(false, false, sq, dh, sk, 1.0, dl.data(), sk, kh, d,
                            1.0, dq->data() + s * sq * d + h * dh, d);
              if (need_k)
                blas::dgemm(true, false, sk, dh, sq, 1.0, dl.data(), sk, qh, d,
                            1.0, dk->data() + s * sk * d + h * dh, d);
            }
          }
        }
      });
}

// ---- losses ------------------------------------------------------------

Var mse_loss(Var pred, const Tensor& target) {
  const Tensor& P = pred.val();
  if (!P.same_shape(target))
    throw dim_error("mse_loss shape mismatch " + P.shape_str() + " vs " +
                    target.shape_str());
  require(P.size() > 0, "mse_loss on empty tensors");
  KahanSum acc;
  for (int64_t i = 0; i < P.size(); ++i) {
    double e = P[i] - target[i];
    acc.add(e * e);
  }
  double inv = 1.0 / static_cast<double>(P.size());
  auto tgt = std::make_shared<Tensor>(target);
  Var in[] = {pred};
  return pred.tape()->record(
      Tensor::scalar(acc.value() * inv), in,
      [tgt, inv](Tape& t, const Tensor& g, int id) {
        int ip = t.inputs_of(id)[0];
        if (!t.node_needs_grad(ip)) return;
        const Tensor& P = t.value(ip);
        double* d = t.grad_buf(ip).data();
        double c = 2.0 * inv * g[0];
        for (int64_t i = 0; i < P.size(); ++i)
          d[i] += c * (P[i] - (*tgt)[i]);
      });
}

Var cross_entropy_loss(Var logits, const std::vector<uint32_t>& targets) {
  const Tensor& L = logits.val();
  require(L.rank() == 2, "cross entropy expects [n, classes] logits");
  int64_t n = L.dim(0), c = L.dim(1);
  require(static_cast<int64_t>(targets.size()) == n,
          "cross entropy target count mismatch");
  for (uint32_t t : targets)
    if (t >= c) throw config_error("class id out of range");
  // log-sum-exp stabilized; softmax probabilities stashed for the backward.
  auto probs = std::make_shared<Tensor>(Tensor({n, c}));
  KahanSum acc;
  for (int64_t i = 0; i < n; ++i) {
    const double* row = L.data() + i * c;
    double mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double total = 0.0;
    for (int64_t j = 0; j < c; ++j) total += std::exp(row[j] - mx);
    double lse = mx + std::log(total);
    acc.add(lse - row[targets[static_cast<size_t>(i)]]);
    for (int64_t j = 0; j < c; ++j)
      probs->at(i, j) = std::exp(row[j] - lse);
  }
  double inv = 1.0 / static_cast<double>(n);
  auto tgt = std::make_shared<std::vector<uint32_t>>(targets);
  Var in[] = {logits};
  return logits.tape()->record(
      Tensor::scalar(acc.value() * inv), in,
      [probs, tgt, inv, n, c](Tape& t, const Tensor& g, int id) {
        int il = t.inputs_of(id)[0];
        if (!t.node_needs_grad(il)) return;
        double* d = t.grad_buf(il).data();
        double s = g[0] * inv;
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < c; ++j) {
            double onehot =
                j == (*tgt)[static_cast<size_t>(i)] ? 1.0 : 0.0;
            d[i * c + j] += s * (probs->at(i, j) - onehot);
          }
      });
}

Var sum_all(Var a) {
  const Tensor& A = a.val();
  KahanSum acc;
  for (int64_t i = 0; i < A.size(); ++i) acc.add(A[i]);
  Var in[] = {a};
  return a.tape()->record(Tensor::scalar(acc.value()), in,
                          [](Tape& t, const Tensor& g, int id) {
                            int ia = t.inputs_of(id)[0];
                            if (!t.node_needs_grad(ia)) return;
                            double* d = t.grad_buf(ia).data();
                            const Tensor& A = t.value(ia);
                            for (int64_t i = 0; i < A.size(); ++i)
                              d[i] += g[0];
                          });
}

}  // namespace setnet::ad
