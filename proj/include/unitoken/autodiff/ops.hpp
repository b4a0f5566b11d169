#pragma once

#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <span>
#include <vector>

#include "unitoken/autodiff/tensor.hpp"

// Differentiable kernels over `Var`. Every op computes its forward value with
// Eigen and records a closure that pushes the output gradient to its inputs.

namespace unitoken {

namespace detail {

template <typename Scalar>
void require_same_shape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw UsageError(std::string(op) + ": shape mismatch");
  }
}

template <typename Scalar>
Matrix<Scalar> softmax_rows(const Matrix<Scalar>& x) {
  Matrix<Scalar> y(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    y.row(r) = (x.row(r).array() - m).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  return y;
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.cols() != b.rows()) throw UsageError("matmul: inner dims differ");
  Matrix<Scalar> out;
  out.noalias() = a.value() * b.value();
  const int ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ia)) t.grad(ia).noalias() += g * t.value(ib).transpose();
    if (t.needs_grad(ib)) t.grad(ib).noalias() += t.value(ia).transpose() * g;
  });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "add");
  const int ia = a.id(), ib = b.id();
  return a.tape().record(a.value() + b.value(), {a, b}, [ia, ib](Tape<Scalar>& t, int self) {
    if (t.needs_grad(ia)) t.grad(ia) += t.grad(self);
    if (t.needs_grad(ib)) t.grad(ib) += t.grad(self);
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "sub");
  const int ia = a.id(), ib = b.id();
  return a.tape().record(a.value() - b.value(), {a, b}, [ia, ib](Tape<Scalar>& t, int self) {
    if (t.needs_grad(ia)) t.grad(ia) += t.grad(self);
    if (t.needs_grad(ib)) t.grad(ib) -= t.grad(self);
  });
}

/// Elementwise product.
template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "mul");
  const int ia = a.id(), ib = b.id();
  Matrix<Scalar> out = a.value().cwiseProduct(b.value());
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ia)) t.grad(ia) += g.cwiseProduct(t.value(ib));
    if (t.needs_grad(ib)) t.grad(ib) += g.cwiseProduct(t.value(ia));
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
  const int ia = a.id();
  return a.tape().record(a.value() * s, {a}, [ia, s](Tape<Scalar>& t, int self) {
    t.grad(ia) += t.grad(self) * s;
  });
}

/// Adds a 1×n row to every row of a.
template <typename Scalar>
Var<Scalar> add_row(const Var<Scalar>& a, const Var<Scalar>& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw UsageError("add_row: bias shape");
  Matrix<Scalar> out = a.value();
  out.rowwise() += row.value().row(0);
  const int ia = a.id(), ib = row.id();
  return a.tape().record(std::move(out), {a, row}, [ia, ib](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ia)) t.grad(ia) += g;
    if (t.needs_grad(ib)) t.grad(ib) += g.colwise().sum();
  });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  const int ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape<Scalar>& t, int self) {
    t.grad(ia).array() += t.grad(self)(0, 0);
  });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a) {
  return scale(sum(a), Scalar(1) / static_cast<Scalar>(a.value().size()));
}

/// Exact (erf) GELU.
template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar>& x) {
  const Scalar inv_sqrt2 = Scalar(1) / std::numbers::sqrt2_v<Scalar>;
  Matrix<Scalar> out = x.value().unaryExpr([inv_sqrt2](Scalar v) {
    return Scalar(0.5) * v * (Scalar(1) + std::erf(v * inv_sqrt2));
  });
  const int ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, inv_sqrt2](Tape<Scalar>& t, int self) {
    const Scalar inv_sqrt_2pi = inv_sqrt2 / std::sqrt(std::numbers::pi_v<Scalar>);
    const auto d = t.value(ix).unaryExpr([&](Scalar v) {
      return Scalar(0.5) * (Scalar(1) + std::erf(v * inv_sqrt2)) +
             v * inv_sqrt_2pi * std::exp(Scalar(-0.5) * v * v);
    });
    t.grad(ix) += t.grad(self).cwiseProduct(d);
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x) {
  Matrix<Scalar> out =
      x.value().unaryExpr([](Scalar v) { return Scalar(1) / (Scalar(1) + std::exp(-v)); });
  const int ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape<Scalar>& t, int self) {
    const auto& y = t.value(self);
    t.grad(ix).array() += t.grad(self).array() * y.array() * (Scalar(1) - y.array());
  });
}

template <typename Scalar>
Var<Scalar> silu(const Var<Scalar>& x) {
  Matrix<Scalar> out =
      x.value().unaryExpr([](Scalar v) { return v / (Scalar(1) + std::exp(-v)); });
  const int ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape<Scalar>& t, int self) {
    const auto d = t.value(ix).unaryExpr([](Scalar v) {
      const Scalar s = Scalar(1) / (Scalar(1) + std::exp(-v));
      return s * (Scalar(1) + v * (Scalar(1) - s));
    });
    t.grad(ix) += t.grad(self).cwiseProduct(d);
  });
}

/// Max-stabilized softmax along `axis` (0 = down columns, 1 or -1 = along rows).
template <typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& x, int axis = -1) {
  if (axis != 0 && axis != 1 && axis != -1) throw UsageError("softmax: invalid axis");
  const bool by_col = axis == 0;
  Matrix<Scalar> y = by_col ? Matrix<Scalar>(detail::softmax_rows<Scalar>(x.value().transpose()).transpose())
                            : detail::softmax_rows<Scalar>(x.value());
  const int ix = x.id();
  return x.tape().record(std::move(y), {x}, [ix, by_col](Tape<Scalar>& t, int self) {
    const auto& y = t.value(self);
    const auto& g = t.grad(self);
    const Matrix<Scalar> gy = g.cwiseProduct(y);
    if (by_col) {
      const RowVector<Scalar> dots = gy.colwise().sum();
      t.grad(ix).array() += y.array() * (g.rowwise() - dots).array();
    } else {
      const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dots = gy.rowwise().sum();
      t.grad(ix).array() += y.array() * (g.colwise() - dots).array();
    }
  });
}

/// Row-wise layer norm with learnable 1×n gain and bias.
template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& gain, const Var<Scalar>& bias,
                       Scalar eps = Scalar(1e-5)) {
  const Index n = x.cols();
  if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n) {
    throw UsageError("layer_norm: gain/bias shape");
  }
  auto xhat = std::make_shared<Matrix<Scalar>>(x.rows(), n);
  auto inv_std = std::make_shared<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(x.rows());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar mu = x.value().row(r).mean();
    const auto centered = (x.value().row(r).array() - mu).matrix();
    const Scalar var = centered.squaredNorm() / static_cast<Scalar>(n);
    (*inv_std)(r) = Scalar(1) / std::sqrt(var + eps);
    xhat->row(r) = centered * (*inv_std)(r);
  }
  Matrix<Scalar> out = xhat->array().rowwise() * gain.value().row(0).array();
  out.rowwise() += bias.value().row(0);
  const int ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape().record(std::move(out), {x, gain, bias},
                         [ix, ig, ib, xhat, inv_std, n](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ig)) t.grad(ig) += g.cwiseProduct(*xhat).colwise().sum();
    if (t.needs_grad(ib)) t.grad(ib) += g.colwise().sum();
    if (!t.needs_grad(ix)) return;
    const Matrix<Scalar> dxhat = g.array().rowwise() * t.value(ig).row(0).array();
    const Scalar inv_n = Scalar(1) / static_cast<Scalar>(n);
    for (Index r = 0; r < g.rows(); ++r) {
      const Scalar s1 = dxhat.row(r).sum();
      const Scalar s2 = dxhat.row(r).dot(xhat->row(r));
      t.grad(ix).row(r).array() +=
          (*inv_std)(r) * inv_n *
          (static_cast<Scalar>(n) * dxhat.row(r).array() - s1 - xhat->row(r).array() * s2);
    }
  });
}

/// Gathers rows of `table` at `ids`.
template <typename Scalar>
Var<Scalar> embedding(const Var<Scalar>& table, std::span<const int> ids) {
  Matrix<Scalar> out(static_cast<Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows()) throw UsageError("embedding: id out of range");
    out.row(static_cast<Index>(i)) = table.value().row(ids[i]);
  }
  const int it = table.id();
  std::vector<int> idx(ids.begin(), ids.end());
  return table.tape().record(std::move(out), {table}, [it, idx = std::move(idx)](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    auto& gt = t.grad(it);
    for (std::size_t i = 0; i < idx.size(); ++i) gt.row(idx[i]) += g.row(static_cast<Index>(i));
  });
}

template <typename Scalar>
Var<Scalar> slice_rows(const Var<Scalar>& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw UsageError("slice_rows: range");
  const int ia = a.id();
  return a.tape().record(a.value().middleRows(start, count), {a},
                         [ia, start, count](Tape<Scalar>& t, int self) {
    t.grad(ia).middleRows(start, count) += t.grad(self);
  });
}

template <typename Scalar>
Var<Scalar> slice_cols(const Var<Scalar>& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw UsageError("slice_cols: range");
  const int ia = a.id();
  return a.tape().record(a.value().middleCols(start, count), {a},
                         [ia, start, count](Tape<Scalar>& t, int self) {
    t.grad(ia).middleCols(start, count) += t.grad(self);
  });
}

template <typename Scalar>
Var<Scalar> concat_rows(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw UsageError("concat_rows: no inputs");
  Index rows = 0;
  const Index cols = parts.front().cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) throw UsageError("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix<Scalar> out(rows, cols);
  std::vector<std::pair<int, Index>> spans;
  Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    spans.emplace_back(p.id(), at);
    at += p.rows();
  }
  return parts.front().tape().record(std::move(out), parts, [spans](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    for (const auto& [id, offset] : spans) {
      if (t.needs_grad(id)) t.grad(id) += g.middleRows(offset, t.value(id).rows());
    }
  });
}

/// Interleaves rows of `a` and `b` into a matrix of `total` rows: row i of `a`
/// lands at a_rows[i], row j of `b` at b_rows[j]. Every output row must be
/// covered exactly once.
template <typename Scalar>
Var<Scalar> merge_rows(const Var<Scalar>& a, std::span<const int> a_rows, const Var<Scalar>& b,
                       std::span<const int> b_rows, Index total) {
  if (static_cast<Index>(a_rows.size()) != a.rows() ||
      static_cast<Index>(b_rows.size()) != b.rows()) {
    throw UsageError("merge_rows: row map size");
  }
  if (a.cols() != b.cols()) throw UsageError("merge_rows: width mismatch");
  if (static_cast<Index>(a_rows.size() + b_rows.size()) != total) {
    throw UsageError("merge_rows: rows do not cover output");
  }
  Matrix<Scalar> out(total, a.cols());
  std::vector<char> seen(static_cast<std::size_t>(total), 0);
  auto place = [&](const Matrix<Scalar>& src, std::span<const int> rows) {
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i] < 0 || rows[i] >= total || seen[rows[i]]) throw UsageError("merge_rows: bad row map");
      seen[rows[i]] = 1;
      out.row(rows[i]) = src.row(static_cast<Index>(i));
    }
  };
  place(a.value(), a_rows);
  place(b.value(), b_rows);
  const int ia = a.id(), ib = b.id();
  std::vector<int> ra(a_rows.begin(), a_rows.end()), rb(b_rows.begin(), b_rows.end());
  return a.tape().record(std::move(out), {a, b}, [ia, ib, ra, rb](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ia)) {
      for (std::size_t i = 0; i < ra.size(); ++i) t.grad(ia).row(static_cast<Index>(i)) += g.row(ra[i]);
    }
    if (t.needs_grad(ib)) {
      for (std::size_t i = 0; i < rb.size(); ++i) t.grad(ib).row(static_cast<Index>(i)) += g.row(rb[i]);
    }
  });
}

/// Multi-head scaled dot-product attention. q is Tq×d, k and v are Tk×d;
/// with `causal`, query i attends to keys j ≤ i.
template <typename Scalar>
Var<Scalar> attention(const Var<Scalar>& q, const Var<Scalar>& k, const Var<Scalar>& v, int heads,
                      bool causal) {
  const Index d = q.cols();
  if (heads <= 0 || d % heads != 0) throw UsageError("attention: width not divisible by heads");
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) throw UsageError("attention: shapes");
  const Index tq = q.rows(), tk = k.rows();
  const Index dh = d / heads;
  const Scalar sc = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  auto probs = std::make_shared<std::vector<Matrix<Scalar>>>(heads);
  Matrix<Scalar> out(tq, d);
  for (int h = 0; h < heads; ++h) {
    Matrix<Scalar> s;
    s.noalias() = q.value().middleCols(h * dh, dh) * k.value().middleCols(h * dh, dh).transpose();
    s *= sc;
    if (causal) {
      for (Index i = 0; i < tq; ++i) {
        for (Index j = i + 1; j < tk; ++j) s(i, j) = -std::numeric_limits<Scalar>::infinity();
      }
    }
    (*probs)[h] = detail::softmax_rows<Scalar>(s);
    out.middleCols(h * dh, dh).noalias() = (*probs)[h] * v.value().middleCols(h * dh, dh);
  }
  const int iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape().record(std::move(out), {q, k, v},
                         [iq, ik, iv, probs, heads, dh, sc](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    for (int h = 0; h < heads; ++h) {
      const auto& p = (*probs)[h];
      const auto go = g.middleCols(h * dh, dh);
      if (t.needs_grad(iv)) t.grad(iv).middleCols(h * dh, dh).noalias() += p.transpose() * go;
      if (!t.needs_grad(iq) && !t.needs_grad(ik)) continue;
      Matrix<Scalar> dp;
      dp.noalias() = go * t.value(iv).middleCols(h * dh, dh).transpose();
      const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dots = dp.cwiseProduct(p).rowwise().sum();
      Matrix<Scalar> ds = (p.array() * (dp.colwise() - dots).array()).matrix() * sc;
      if (t.needs_grad(iq)) {
        t.grad(iq).middleCols(h * dh, dh).noalias() += ds * t.value(ik).middleCols(h * dh, dh);
      }
      if (t.needs_grad(ik)) {
        t.grad(ik).middleCols(h * dh, dh).noalias() += ds.transpose() * t.value(iq).middleCols(h * dh, dh);
      }
    }
  });
}

template <typename Scalar>
struct CrossEntropy {
  Scalar loss = Scalar(0);
  int count = 0;
};

/// Mean of −log softmax(logits)[target] over rows where mask is set. Only
/// masked rows read their target, so unmasked targets cannot affect the
/// result. Every target must still lie in [0, V).
template <typename Scalar>
CrossEntropy<Scalar> masked_cross_entropy_value(const Matrix<Scalar>& logits,
                                                std::span<const int> targets,
                                                std::span<const bool> mask) {
  const Index rows = logits.rows(), vocab = logits.cols();
  if (static_cast<Index>(targets.size()) != rows || static_cast<Index>(mask.size()) != rows) {
    throw UsageError("masked_cross_entropy: length mismatch");
  }
  for (int tgt : targets) {
    if (tgt < 0 || tgt >= vocab) throw UsageError("masked_cross_entropy: target out of vocabulary");
  }
  CrossEntropy<Scalar> ce;
  Scalar total = Scalar(0);
  for (Index r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    const Scalar m = logits.row(r).maxCoeff();
    const Scalar lse = m + std::log((logits.row(r).array() - m).exp().sum());
    total += lse - logits(r, targets[r]);
    ++ce.count;
  }
  ce.loss = ce.count > 0 ? total / static_cast<Scalar>(ce.count) : Scalar(0);
  return ce;
}

template <typename Scalar>
struct CrossEntropyVar {
  Var<Scalar> loss;
  int count = 0;
};

template <typename Scalar>
CrossEntropyVar<Scalar> masked_cross_entropy(const Var<Scalar>& logits, std::span<const int> targets,
                                             std::span<const bool> mask) {
  const auto ce = masked_cross_entropy_value<Scalar>(logits.value(), targets, mask);
  Matrix<Scalar> out(1, 1);
  out(0, 0) = ce.loss;
  if (ce.count == 0) return {logits.tape().constant(std::move(out)), 0};
  const int il = logits.id();
  std::vector<int> tg(targets.begin(), targets.end());
  std::vector<char> mk(mask.begin(), mask.end());
  const Scalar inv = Scalar(1) / static_cast<Scalar>(ce.count);
  Var<Scalar> loss = logits.tape().record(std::move(out), {logits}, [il, tg, mk, inv](Tape<Scalar>& t, int self) {
    const Scalar g = t.grad(self)(0, 0) * inv;
    const auto& x = t.value(il);
    for (Index r = 0; r < x.rows(); ++r) {
      if (!mk[r]) continue;
      const Scalar m = x.row(r).maxCoeff();
      RowVector<Scalar> p = (x.row(r).array() - m).exp().matrix();
      p /= p.sum();
      p(tg[r]) -= Scalar(1);
      t.grad(il).row(r) += g * p;
    }
  });
  return {loss, ce.count};
}

/// Mean squared difference.
template <typename Scalar>
Var<Scalar> mse(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "mse");
  const Scalar n = static_cast<Scalar>(a.value().size());
  Matrix<Scalar> out(1, 1);
  out(0, 0) = (a.value() - b.value()).squaredNorm() / n;
  const int ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, n](Tape<Scalar>& t, int self) {
    const Scalar g = t.grad(self)(0, 0) * Scalar(2) / n;
    const Matrix<Scalar> diff = t.value(ia) - t.value(ib);
    if (t.needs_grad(ia)) t.grad(ia) += g * diff;
    if (t.needs_grad(ib)) t.grad(ib) -= g * diff;
  });
}

/// Value-only copy; gradients stop here.
template <typename Scalar>
Var<Scalar> stop_gradient(const Var<Scalar>& a) {
  return a.tape().constant(a.value());
}

/// Emits `forward_value` but routes the incoming gradient to `a` unchanged.
template <typename Scalar>
Var<Scalar> straight_through(const Var<Scalar>& a, Matrix<Scalar> forward_value) {
  if (forward_value.rows() != a.rows() || forward_value.cols() != a.cols()) {
    throw UsageError("straight_through: shape mismatch");
  }
  const int ia = a.id();
  return a.tape().record(std::move(forward_value), {a}, [ia](Tape<Scalar>& t, int self) {
    t.grad(ia) += t.grad(self);
  });
}

/// Spatial layout for convolution helpers: a batch of images stored as rows
/// (b, y, x) in row-major order with channels as columns.
struct ImageLayout {
  Index batch = 1;
  Index height = 0;
  Index width = 0;
};

inline Index conv_out_size(Index in, Index kernel, Index stride, Index pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

/// Patch extraction for convolution. Output row (b, oy, ox) holds the
/// kernel window with column order (ky, kx, c); padding reads as zero.
template <typename Scalar>
Var<Scalar> im2col(const Var<Scalar>& x, ImageLayout layout, Index kernel, Index stride, Index pad) {
  const Index c = x.cols();
  if (layout.batch * layout.height * layout.width != x.rows()) throw UsageError("im2col: layout");
  const Index ho = conv_out_size(layout.height, kernel, stride, pad);
  const Index wo = conv_out_size(layout.width, kernel, stride, pad);
  if (ho <= 0 || wo <= 0) throw UsageError("im2col: kernel larger than input");
  Matrix<Scalar> out = Matrix<Scalar>::Zero(layout.batch * ho * wo, kernel * kernel * c);
  // (out_row, out_col_block, src_row) triples shared by forward and backward.
  auto taps = std::make_shared<std::vector<std::array<Index, 3>>>();
  taps->reserve(static_cast<std::size_t>(layout.batch * ho * wo * kernel * kernel));
  for (Index b = 0; b < layout.batch; ++b) {
    for (Index oy = 0; oy < ho; ++oy) {
      for (Index ox = 0; ox < wo; ++ox) {
        const Index orow = (b * ho + oy) * wo + ox;
        for (Index ky = 0; ky < kernel; ++ky) {
          const Index iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= layout.height) continue;
          for (Index kx = 0; kx < kernel; ++kx) {
            const Index ix = ox * stride + kx - pad;
            if (ix < 0 || ix >= layout.width) continue;
            const Index src = (b * layout.height + iy) * layout.width + ix;
            const Index col = (ky * kernel + kx) * c;
            out.block(orow, col, 1, c) = x.value().row(src);
            taps->push_back({orow, col, src});
          }
        }
      }
    }
  }
  const int ixid = x.id();
  return x.tape().record(std::move(out), {x}, [ixid, taps, c](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad(ixid);
    for (const auto& [orow, col, src] : *taps) gx.row(src) += g.block(orow, col, 1, c);
  });
}

/// Nearest-neighbour 2× spatial upsampling.
template <typename Scalar>
Var<Scalar> upsample2x(const Var<Scalar>& x, ImageLayout layout) {
  if (layout.batch * layout.height * layout.width != x.rows()) throw UsageError("upsample2x: layout");
  const Index h2 = layout.height * 2, w2 = layout.width * 2;
  Matrix<Scalar> out(layout.batch * h2 * w2, x.cols());
  for (Index b = 0; b < layout.batch; ++b) {
    for (Index y = 0; y < h2; ++y) {
      for (Index xx = 0; xx < w2; ++xx) {
        out.row((b * h2 + y) * w2 + xx) = x.value().row((b * layout.height + y / 2) * layout.width + xx / 2);
      }
    }
  }
  const int ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, layout, h2, w2](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad(ix);
    for (Index b = 0; b < layout.batch; ++b) {
      for (Index y = 0; y < h2; ++y) {
        for (Index xx = 0; xx < w2; ++xx) {
          gx.row((b * layout.height + y / 2) * layout.width + xx / 2) += g.row((b * h2 + y) * w2 + xx);
        }
      }
    }
  });
}

/// x·W + b for a 1×n bias.
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias) {
  return add_row(matmul(x, weight), bias);
}

}  // namespace unitoken
