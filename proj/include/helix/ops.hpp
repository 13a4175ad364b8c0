#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "helix/tensor.hpp"

namespace helix {

namespace detail {

template <class S>
void accumulate(std::shared_ptr<TapeNode<S>>& p, const ArrX<S>& g) {
  if (!p->requires_grad) return;
  p->ensure_grad();
  p->grad += g;
}

template <class S>
void check_finite(const ArrX<S>& v, const char* op) {
  if (!v.isFinite().all()) throw NumericError(std::string(op) + ": non-finite input");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto pa = a.node(), pb = b.node();
  return TensorT<S>::make_op(a.shape(), a.values() + b.values(), {pa, pb},
                             [pa, pb](TapeNode<S>& n) mutable {
                               detail::accumulate(pa, n.grad);
                               detail::accumulate(pb, n.grad);
                             });
}

template <class S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape()) throw DimensionError("sub: shape mismatch");
  auto pa = a.node(), pb = b.node();
  return TensorT<S>::make_op(a.shape(), a.values() - b.values(), {pa, pb},
                             [pa, pb](TapeNode<S>& n) mutable {
                               detail::accumulate(pa, n.grad);
                               detail::accumulate(pb, ArrX<S>(-n.grad));
                             });
}

/// Elementwise product (the soft-mask application).
template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto pa = a.node(), pb = b.node();
  return TensorT<S>::make_op(a.shape(), a.values() * b.values(), {pa, pb},
                             [pa, pb](TapeNode<S>& n) mutable {
                               detail::accumulate(pa, ArrX<S>(n.grad * pb->value));
                               detail::accumulate(pb, ArrX<S>(n.grad * pa->value));
                             });
}

template <class S>
TensorT<S> scale(const TensorT<S>& a, S c) {
  auto pa = a.node();
  return TensorT<S>::make_op(a.shape(), a.values() * c, {pa},
                             [pa, c](TapeNode<S>& n) mutable {
                               detail::accumulate(pa, ArrX<S>(n.grad * c));
                             });
}

template <class S>
TensorT<S> relu(const TensorT<S>& a) {
  auto pa = a.node();
  return TensorT<S>::make_op(a.shape(), a.values().max(S(0)), {pa},
                             [pa](TapeNode<S>& n) mutable {
                               ArrX<S> mask = (pa->value > S(0)).template cast<S>();
                               detail::accumulate(pa, ArrX<S>(n.grad * mask));
                             });
}

/// Sum of all tensors in the list (shapes must agree).
template <class S>
TensorT<S> add_n(const std::vector<TensorT<S>>& xs) {
  if (xs.empty()) throw PreconditionError("add_n: empty list");
  ArrX<S> v = xs[0].values();
  std::vector<typename TensorT<S>::NodePtr> parents{xs[0].node()};
  for (std::size_t i = 1; i < xs.size(); ++i) {
    if (xs[i].shape() != xs[0].shape()) throw DimensionError("add_n: shape mismatch");
    v += xs[i].values();
    parents.push_back(xs[i].node());
  }
  auto ps = parents;
  return TensorT<S>::make_op(xs[0].shape(), std::move(v), std::move(parents),
                             [ps](TapeNode<S>& n) mutable {
                               for (auto& p : ps) detail::accumulate(p, n.grad);
                             });
}

template <class S>
TensorT<S> sum(const TensorT<S>& a) {
  auto pa = a.node();
  ArrX<S> v(1);
  v[0] = a.values().sum();
  return TensorT<S>::make_op({1}, std::move(v), {pa},
                             [pa](TapeNode<S>& n) mutable {
                               detail::accumulate(pa, ArrX<S>(ArrX<S>::Constant(pa->value.size(), n.grad[0])));
                             });
}

template <class S>
TensorT<S> mean(const TensorT<S>& a) {
  return scale(sum(a), S(1) / static_cast<S>(a.numel()));
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> reshape(const TensorT<S>& a, const Shape& shape) {
  if (shape_numel(shape) != a.numel())
    throw DimensionError("reshape: element count mismatch for " + shape_str(shape));
  auto pa = a.node();
  return TensorT<S>::make_op(shape, ArrX<S>(a.values()), {pa},
                             [pa](TapeNode<S>& n) mutable { detail::accumulate(pa, n.grad); });
}

template <class S>
TensorT<S> transpose2d(const TensorT<S>& a) {
  if (a.rank() != 2) throw DimensionError("transpose2d: tensor is not 2-D");
  int r = a.dim(0), c = a.dim(1);
  ArrX<S> v(a.numel());
  Eigen::Map<MatX<S>>(v.data(), c, r) = a.mat().transpose();
  auto pa = a.node();
  return TensorT<S>::make_op({c, r}, std::move(v), {pa},
                             [pa, r, c](TapeNode<S>& n) mutable {
                               if (!pa->requires_grad) return;
                               pa->ensure_grad();
                               Eigen::Map<MatX<S>> gp(pa->grad.data(), r, c);
                               Eigen::Map<const MatX<S>> gn(n.grad.data(), c, r);
                               gp += gn.transpose();
                             });
}

/// Concatenate along the channel axis: axis 0 for rank-3 (C,H,W), axis 1 for
/// rank-4 (N,C,H,W).
template <class S>
TensorT<S> concat_channels(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.rank() != b.rank() || (a.rank() != 3 && a.rank() != 4))
    throw DimensionError("concat_channels: expects matching rank-3 or rank-4 inputs");
  if (a.rank() == 3) {
    if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
      throw DimensionError("concat_channels: spatial size mismatch");
    Shape out{a.dim(0) + b.dim(0), a.dim(1), a.dim(2)};
    ArrX<S> v(shape_numel(out));
    v.head(a.numel()) = a.values();
    v.tail(b.numel()) = b.values();
    auto pa = a.node(), pb = b.node();
    std::int64_t na = a.numel(), nb = b.numel();
    return TensorT<S>::make_op(out, std::move(v), {pa, pb},
                               [pa, pb, na, nb](TapeNode<S>& n) mutable {
                                 detail::accumulate(pa, ArrX<S>(n.grad.head(na)));
                                 detail::accumulate(pb, ArrX<S>(n.grad.tail(nb)));
                               });
  }
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    throw DimensionError("concat_channels: batch/spatial size mismatch");
  int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), HW = a.dim(2) * a.dim(3);
  Shape out{N, Ca + Cb, a.dim(2), a.dim(3)};
  ArrX<S> v(shape_numel(out));
  std::int64_t sa = static_cast<std::int64_t>(Ca) * HW, sb = static_cast<std::int64_t>(Cb) * HW;
  for (int i = 0; i < N; ++i) {
    v.segment(i * (sa + sb), sa) = a.values().segment(i * sa, sa);
    v.segment(i * (sa + sb) + sa, sb) = b.values().segment(i * sb, sb);
  }
  auto pa = a.node(), pb = b.node();
  return TensorT<S>::make_op(out, std::move(v), {pa, pb},
                             [pa, pb, N, sa, sb](TapeNode<S>& n) mutable {
                               for (int i = 0; i < N; ++i) {
                                 if (pa->requires_grad) {
                                   pa->ensure_grad();
                                   pa->grad.segment(i * sa, sa) += n.grad.segment(i * (sa + sb), sa);
                                 }
                                 if (pb->requires_grad) {
                                   pb->ensure_grad();
                                   pb->grad.segment(i * sb, sb) += n.grad.segment(i * (sa + sb) + sa, sb);
                                 }
                               }
                             });
}

/// Extract sample i of a rank-4 batch as a rank-3 tensor.
template <class S>
TensorT<S> slice_sample(const TensorT<S>& x, int i) {
  if (x.rank() != 4) throw DimensionError("slice_sample: expects rank-4 input");
  if (i < 0 || i >= x.dim(0)) throw DimensionError("slice_sample: index out of range");
  std::int64_t len = x.numel() / x.dim(0);
  auto px = x.node();
  std::int64_t off = i * len;
  return TensorT<S>::make_op({x.dim(1), x.dim(2), x.dim(3)}, ArrX<S>(x.values().segment(off, len)),
                             {px},
                             [px, off, len](TapeNode<S>& n) mutable {
                               if (!px->requires_grad) return;
                               px->ensure_grad();
                               px->grad.segment(off, len) += n.grad;
                             });
}

/// Column slice of a 2-D tensor: columns [c0, c0+len).
template <class S>
TensorT<S> slice_cols(const TensorT<S>& x, int c0, int len) {
  if (x.rank() != 2) throw DimensionError("slice_cols: expects 2-D input");
  if (c0 < 0 || c0 + len > x.dim(1)) throw DimensionError("slice_cols: range out of bounds");
  int r = x.dim(0), c = x.dim(1);
  ArrX<S> v(static_cast<std::int64_t>(r) * len);
  Eigen::Map<MatX<S>>(v.data(), r, len) = x.mat().middleCols(c0, len);
  auto px = x.node();
  return TensorT<S>::make_op({r, len}, std::move(v), {px},
                             [px, r, c, c0, len](TapeNode<S>& n) mutable {
                               if (!px->requires_grad) return;
                               px->ensure_grad();
                               Eigen::Map<MatX<S>> gp(px->grad.data(), r, c);
                               Eigen::Map<const MatX<S>> gn(n.grad.data(), r, len);
                               gp.middleCols(c0, len) += gn;
                             });
}

/// Concatenate 2-D tensors along columns.
template <class S>
TensorT<S> concat_cols(const std::vector<TensorT<S>>& xs) {
  if (xs.empty()) throw PreconditionError("concat_cols: empty list");
  int r = xs[0].dim(0), ctot = 0;
  for (const auto& x : xs) {
    if (x.rank() != 2 || x.dim(0) != r) throw DimensionError("concat_cols: row count mismatch");
    ctot += x.dim(1);
  }
  ArrX<S> v(static_cast<std::int64_t>(r) * ctot);
  Eigen::Map<MatX<S>> out(v.data(), r, ctot);
  std::vector<typename TensorT<S>::NodePtr> parents;
  std::vector<int> widths;
  int c0 = 0;
  for (const auto& x : xs) {
    out.middleCols(c0, x.dim(1)) = x.mat();
    c0 += x.dim(1);
    parents.push_back(x.node());
    widths.push_back(x.dim(1));
  }
  auto ps = parents;
  return TensorT<S>::make_op({r, ctot}, std::move(v), std::move(parents),
                             [ps, widths, r, ctot](TapeNode<S>& n) mutable {
                               Eigen::Map<const MatX<S>> gn(n.grad.data(), r, ctot);
                               int at = 0;
                               for (std::size_t i = 0; i < ps.size(); ++i) {
                                 if (ps[i]->requires_grad) {
                                   ps[i]->ensure_grad();
                                   Eigen::Map<MatX<S>> gp(ps[i]->grad.data(), r, widths[i]);
                                   gp += gn.middleCols(at, widths[i]);
                                 }
                                 at += widths[i];
                               }
                             });
}

/// Gather scalar tensors into a 1-D vector (episode logits assembly).
template <class S>
TensorT<S> stack_scalars(const std::vector<TensorT<S>>& xs) {
  if (xs.empty()) throw PreconditionError("stack_scalars: empty list");
  ArrX<S> v(static_cast<std::int64_t>(xs.size()));
  std::vector<typename TensorT<S>::NodePtr> parents;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i].numel() != 1) throw DimensionError("stack_scalars: inputs must be scalar");
    v[static_cast<long>(i)] = xs[i].values()[0];
    parents.push_back(xs[i].node());
  }
  auto ps = parents;
  return TensorT<S>::make_op({static_cast<int>(xs.size())}, std::move(v), std::move(parents),
                             [ps](TapeNode<S>& n) mutable {
                               for (std::size_t i = 0; i < ps.size(); ++i)
                                 if (ps[i]->requires_grad) {
                                   ps[i]->ensure_grad();
                                   ps[i]->grad[0] += n.grad[static_cast<long>(i)];
                                 }
                             });
}

/// Stack equal-shape rank-3 tensors into one rank-4 batch.
template <class S>
TensorT<S> stack_samples(const std::vector<TensorT<S>>& xs) {
  if (xs.empty()) throw PreconditionError("stack_samples: empty list");
  const Shape& s = xs[0].shape();
  if (s.size() != 3) throw DimensionError("stack_samples: inputs must be rank-3");
  const std::int64_t per = xs[0].numel();
  ArrX<S> v(static_cast<std::int64_t>(xs.size()) * per);
  std::vector<typename TensorT<S>::NodePtr> parents;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i].shape() != s) throw DimensionError("stack_samples: shapes differ");
    v.segment(static_cast<std::int64_t>(i) * per, per) = xs[i].values();
    parents.push_back(xs[i].node());
  }
  auto ps = parents;
  Shape os{static_cast<int>(xs.size()), s[0], s[1], s[2]};
  return TensorT<S>::make_op(os, std::move(v), std::move(parents),
                             [ps, per](TapeNode<S>& n) mutable {
                               for (std::size_t i = 0; i < ps.size(); ++i)
                                 if (ps[i]->requires_grad) {
                                   ps[i]->ensure_grad();
                                   ps[i]->grad +=
                                       n.grad.segment(static_cast<std::int64_t>(i) * per, per);
                                 }
                             });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.rank() != 2 || b.rank() != 2) throw DimensionError("matmul: expects 2-D inputs");
  if (a.dim(1) != b.dim(0))
    throw DimensionError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  ArrX<S> v(static_cast<std::int64_t>(m) * n);
  Eigen::Map<MatX<S>>(v.data(), m, n).noalias() = a.mat() * b.mat();
  auto pa = a.node(), pb = b.node();
  return TensorT<S>::make_op({m, n}, std::move(v), {pa, pb},
                             [pa, pb, m, k, n](TapeNode<S>& nd) mutable {
                               Eigen::Map<const MatX<S>> g(nd.grad.data(), m, n);
                               Eigen::Map<const MatX<S>> av(pa->value.data(), m, k);
                               Eigen::Map<const MatX<S>> bv(pb->value.data(), k, n);
                               if (pa->requires_grad) {
                                 pa->ensure_grad();
                                 Eigen::Map<MatX<S>> ga(pa->grad.data(), m, k);
                                 ga.noalias() += g * bv.transpose();
                               }
                               if (pb->requires_grad) {
                                 pb->ensure_grad();
                                 Eigen::Map<MatX<S>> gb(pb->grad.data(), k, n);
                                 gb.noalias() += av.transpose() * g;
                               }
                             });
}

/// y = x W^T + b with x [B,F] (or [F]), W [G,F], optional b [G].
template <class S>
TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b = {}) {
  TensorT<S> x2 = x.rank() == 1 ? reshape(x, {1, x.dim(0)}) : x;
  if (x2.rank() != 2 || w.rank() != 2 || x2.dim(1) != w.dim(1))
    throw DimensionError("linear: shape mismatch");
  int B = x2.dim(0), F = x2.dim(1), G = w.dim(0);
  ArrX<S> v(static_cast<std::int64_t>(B) * G);
  Eigen::Map<MatX<S>> out(v.data(), B, G);
  out.noalias() = x2.mat() * w.mat().transpose();
  std::vector<typename TensorT<S>::NodePtr> parents{x2.node(), w.node()};
  if (b.defined()) {
    if (b.rank() != 1 || b.dim(0) != G) throw DimensionError("linear: bias shape mismatch");
    out.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(b.values().data(), G);
    parents.push_back(b.node());
  }
  auto px = x2.node(), pw = w.node();
  auto pb = b.defined() ? b.node() : nullptr;
  TensorT<S> y = TensorT<S>::make_op({B, G}, std::move(v), std::move(parents),
                                     [px, pw, pb, B, F, G](TapeNode<S>& nd) mutable {
                                       Eigen::Map<const MatX<S>> g(nd.grad.data(), B, G);
                                       Eigen::Map<const MatX<S>> xv(px->value.data(), B, F);
                                       Eigen::Map<const MatX<S>> wv(pw->value.data(), G, F);
                                       if (px->requires_grad) {
                                         px->ensure_grad();
                                         Eigen::Map<MatX<S>> gx(px->grad.data(), B, F);
                                         gx.noalias() += g * wv;
                                       }
                                       if (pw->requires_grad) {
                                         pw->ensure_grad();
                                         Eigen::Map<MatX<S>> gw(pw->grad.data(), G, F);
                                         gw.noalias() += g.transpose() * xv;
                                       }
                                       if (pb && pb->requires_grad) {
                                         pb->ensure_grad();
                                         Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> gb(pb->grad.data(), G);
                                         gb += g.colwise().sum().transpose();
                                       }
                                     });
  if (x.rank() == 1) return reshape(y, {G});
  return y;
}

// ---------------------------------------------------------------------------
// Softmax and losses
// ---------------------------------------------------------------------------

/// Numerically stabilized row-wise softmax of a 2-D tensor.
template <class S>
TensorT<S> softmax_rows(const TensorT<S>& a) {
  if (a.rank() != 2) throw DimensionError("softmax_rows: expects 2-D input");
  detail::check_finite(a.values(), "softmax_rows");
  int r = a.dim(0), c = a.dim(1);
  ArrX<S> v(a.numel());
  Eigen::Map<MatX<S>> y(v.data(), r, c);
  Eigen::Map<const MatX<S>> x = a.mat();
  for (int i = 0; i < r; ++i) {
    Eigen::Array<S, 1, Eigen::Dynamic> row = x.row(i).array() - x.row(i).maxCoeff();
    row = row.exp();
    y.row(i) = row / row.sum();
  }
  auto pa = a.node();
  return TensorT<S>::make_op({r, c}, std::move(v), {pa},
                             [pa, r, c](TapeNode<S>& nd) mutable {
                               if (!pa->requires_grad) return;
                               pa->ensure_grad();
                               Eigen::Map<const MatX<S>> yv(nd.value.data(), r, c);
                               Eigen::Map<const MatX<S>> gy(nd.grad.data(), r, c);
                               Eigen::Map<MatX<S>> gx(pa->grad.data(), r, c);
                               for (int i = 0; i < r; ++i) {
                                 S dot = (gy.row(i).array() * yv.row(i).array()).sum();
                                 gx.row(i).array() +=
                                     yv.row(i).array() * (gy.row(i).array() - dot);
                               }
                             });
}

/// Mean softmax cross-entropy over rows of `logits` against integer labels.
template <class S>
TensorT<S> softmax_cross_entropy(const TensorT<S>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) throw DimensionError("softmax_cross_entropy: expects 2-D logits");
  int B = logits.dim(0), K = logits.dim(1);
  if (static_cast<int>(labels.size()) != B)
    throw DimensionError("softmax_cross_entropy: label count mismatch");
  detail::check_finite(logits.values(), "softmax_cross_entropy");
  Eigen::Map<const MatX<S>> z = logits.mat();
  S loss = S(0);
  for (int i = 0; i < B; ++i) {
    if (labels[i] < 0 || labels[i] >= K)
      throw PreconditionError("softmax_cross_entropy: label out of range");
    S m = z.row(i).maxCoeff();
    S lse = std::log((z.row(i).array() - m).exp().sum()) + m;
    loss += lse - z(i, labels[i]);
  }
  loss /= static_cast<S>(B);
  ArrX<S> v(1);
  v[0] = loss;
  auto pz = logits.node();
  auto lbl = labels;
  return TensorT<S>::make_op({1}, std::move(v), {pz},
                             [pz, lbl, B, K](TapeNode<S>& nd) mutable {
                               if (!pz->requires_grad) return;
                               pz->ensure_grad();
                               Eigen::Map<const MatX<S>> z(pz->value.data(), B, K);
                               Eigen::Map<MatX<S>> gz(pz->grad.data(), B, K);
                               S g0 = nd.grad[0] / static_cast<S>(B);
                               for (int i = 0; i < B; ++i) {
                                 Eigen::Array<S, 1, Eigen::Dynamic> row =
                                     z.row(i).array() - z.row(i).maxCoeff();
                                 row = row.exp();
                                 row /= row.sum();
                                 gz.row(i).array() += g0 * row;
                                 gz(i, lbl[static_cast<std::size_t>(i)]) -= g0;
                               }
                             });
}

// ---------------------------------------------------------------------------
// Convolution, pooling, normalization
// ---------------------------------------------------------------------------

namespace detail {

struct ConvDims {
  int N, C, H, W, Cout, KH, KW, OH, OW;
  bool batched;
};

template <class S>
inline ConvDims conv_dims(const TensorT<S>& x, const TensorT<S>& w, int stride, int pad) {
  if (x.rank() != 3 && x.rank() != 4) throw DimensionError("conv2d: expects rank-3 or rank-4 input");
  if (w.rank() != 4) throw DimensionError("conv2d: weight must be rank-4");
  ConvDims d;
  d.batched = x.rank() == 4;
  d.N = d.batched ? x.dim(0) : 1;
  d.C = x.dim(d.batched ? 1 : 0);
  d.H = x.dim(d.batched ? 2 : 1);
  d.W = x.dim(d.batched ? 3 : 2);
  d.Cout = w.dim(0);
  d.KH = w.dim(2);
  d.KW = w.dim(3);
  if (w.dim(1) != d.C) throw DimensionError("conv2d: channel mismatch");
  int hn = d.H + 2 * pad - d.KH, wn = d.W + 2 * pad - d.KW;
  if (hn < 0 || wn < 0) throw DimensionError("conv2d: kernel larger than padded input");
  if (hn % stride != 0 || wn % stride != 0)
    throw DimensionError("conv2d: non-integral output size");
  d.OH = hn / stride + 1;
  d.OW = wn / stride + 1;
  return d;
}

template <class S>
MatX<S> im2col(const ArrX<S>& x, const ConvDims& d, int stride, int pad) {
  const int KK = d.KH * d.KW, OHW = d.OH * d.OW;
  MatX<S> col(static_cast<std::int64_t>(d.N) * OHW, static_cast<std::int64_t>(d.C) * KK);
  col.setZero();
  for (int n = 0; n < d.N; ++n) {
    const S* xp = x.data() + static_cast<std::int64_t>(n) * d.C * d.H * d.W;
    for (int c = 0; c < d.C; ++c)
      for (int kh = 0; kh < d.KH; ++kh)
        for (int kw = 0; kw < d.KW; ++kw) {
          const int cc = c * KK + kh * d.KW + kw;
          for (int oh = 0; oh < d.OH; ++oh) {
            const int ih = oh * stride - pad + kh;
            if (ih < 0 || ih >= d.H) continue;
            const std::int64_t rbase = static_cast<std::int64_t>(n) * OHW + static_cast<std::int64_t>(oh) * d.OW;
            const S* xrow = xp + (static_cast<std::int64_t>(c) * d.H + ih) * d.W;
            for (int ow = 0; ow < d.OW; ++ow) {
              const int iw = ow * stride - pad + kw;
              if (iw < 0 || iw >= d.W) continue;
              col(rbase + ow, cc) = xrow[iw];
            }
          }
        }
  }
  return col;
}

template <class S>
void col2im_add(ArrX<S>& gx, const MatX<S>& gcol, const ConvDims& d, int stride, int pad) {
  const int KK = d.KH * d.KW, OHW = d.OH * d.OW;
  for (int n = 0; n < d.N; ++n) {
    S* xp = gx.data() + static_cast<std::int64_t>(n) * d.C * d.H * d.W;
    for (int c = 0; c < d.C; ++c)
      for (int kh = 0; kh < d.KH; ++kh)
        for (int kw = 0; kw < d.KW; ++kw) {
          const int cc = c * KK + kh * d.KW + kw;
          for (int oh = 0; oh < d.OH; ++oh) {
            const int ih = oh * stride - pad + kh;
            if (ih < 0 || ih >= d.H) continue;
            const std::int64_t rbase = static_cast<std::int64_t>(n) * OHW + static_cast<std::int64_t>(oh) * d.OW;
            S* xrow = xp + (static_cast<std::int64_t>(c) * d.H + ih) * d.W;
            for (int ow = 0; ow < d.OW; ++ow) {
              const int iw = ow * stride - pad + kw;
              if (iw < 0 || iw >= d.W) continue;
              xrow[iw] += gcol(rbase + ow, cc);
            }
          }
        }
  }
}

}  // namespace detail

/// 2-D cross-correlation. Input (C,H,W) or (N,C,H,W), weight (Cout,C,KH,KW),
/// optional bias (Cout). Lowered to a matrix product via im2col; the column
/// matrix is kept alive for the backward pass.
template <class S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& bias = {},
                  int stride = 1, int pad = 0) {
  auto d = detail::conv_dims(x, w, stride, pad);
  const int OHW = d.OH * d.OW;
  auto col = std::make_shared<MatX<S>>(detail::im2col(x.values(), d, stride, pad));
  Eigen::Map<const MatX<S>> wm(w.values().data(), d.Cout, d.C * d.KH * d.KW);
  MatX<S> outm(static_cast<std::int64_t>(d.N) * OHW, d.Cout);
  outm.noalias() = (*col) * wm.transpose();
  if (bias.defined()) {
    if (bias.rank() != 1 || bias.dim(0) != d.Cout) throw DimensionError("conv2d: bias shape mismatch");
    outm.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(bias.values().data(), d.Cout);
  }
  Shape oshape = d.batched ? Shape{d.N, d.Cout, d.OH, d.OW} : Shape{d.Cout, d.OH, d.OW};
  ArrX<S> v(shape_numel(oshape));
  for (int n = 0; n < d.N; ++n)
    Eigen::Map<MatX<S>>(v.data() + static_cast<std::int64_t>(n) * d.Cout * OHW, d.Cout, OHW) =
        outm.middleRows(static_cast<std::int64_t>(n) * OHW, OHW).transpose();
  std::vector<typename TensorT<S>::NodePtr> parents{x.node(), w.node()};
  if (bias.defined()) parents.push_back(bias.node());
  auto px = x.node(), pw = w.node();
  auto pb = bias.defined() ? bias.node() : nullptr;
  return TensorT<S>::make_op(
      oshape, std::move(v), std::move(parents),
      [px, pw, pb, col, d, stride, pad, OHW](TapeNode<S>& nd) mutable {
        // Re-pack upstream grad as (N*OH*OW, Cout).
        MatX<S> gm(static_cast<std::int64_t>(d.N) * OHW, d.Cout);
        for (int n = 0; n < d.N; ++n)
          gm.middleRows(static_cast<std::int64_t>(n) * OHW, OHW) =
              Eigen::Map<const MatX<S>>(nd.grad.data() + static_cast<std::int64_t>(n) * d.Cout * OHW,
                                        d.Cout, OHW)
                  .transpose();
        Eigen::Map<const MatX<S>> wm(pw->value.data(), d.Cout, d.C * d.KH * d.KW);
        if (pw->requires_grad) {
          pw->ensure_grad();
          Eigen::Map<MatX<S>> gw(pw->grad.data(), d.Cout, d.C * d.KH * d.KW);
          gw.noalias() += gm.transpose() * (*col);
        }
        if (px->requires_grad) {
          px->ensure_grad();
          MatX<S> gcol = gm * wm;
          detail::col2im_add(px->grad, gcol, d, stride, pad);
        }
        if (pb && pb->requires_grad) {
          pb->ensure_grad();
          Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> gb(pb->grad.data(), d.Cout);
          gb += gm.colwise().sum().transpose();
        }
      });
}

/// Max pooling with floor semantics for odd sizes; gradient routes to the
/// first maximal element in row-major scan order.
template <class S>
TensorT<S> max_pool2d(const TensorT<S>& x, int k = 2, int stride = 2) {
  if (x.rank() != 3 && x.rank() != 4) throw DimensionError("max_pool2d: expects rank-3 or rank-4 input");
  bool batched = x.rank() == 4;
  int N = batched ? x.dim(0) : 1;
  int C = x.dim(batched ? 1 : 0), H = x.dim(batched ? 2 : 1), W = x.dim(batched ? 3 : 2);
  if (H < k || W < k) throw DimensionError("max_pool2d: window larger than input");
  int OH = (H - k) / stride + 1, OW = (W - k) / stride + 1;
  Shape oshape = batched ? Shape{N, C, OH, OW} : Shape{C, OH, OW};
  ArrX<S> v(shape_numel(oshape));
  auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(shape_numel(oshape)));
  const S* xp = x.values().data();
  std::int64_t o = 0;
  for (int nc = 0; nc < N * C; ++nc) {
    const std::int64_t base = static_cast<std::int64_t>(nc) * H * W;
    for (int oh = 0; oh < OH; ++oh)
      for (int ow = 0; ow < OW; ++ow, ++o) {
        S best = xp[base + static_cast<std::int64_t>(oh * stride) * W + ow * stride];
        std::int64_t besti = base + static_cast<std::int64_t>(oh * stride) * W + ow * stride;
        for (int i = 0; i < k; ++i)
          for (int j = 0; j < k; ++j) {
            std::int64_t idx = base + static_cast<std::int64_t>(oh * stride + i) * W + (ow * stride + j);
            if (xp[idx] > best) {
              best = xp[idx];
              besti = idx;
            }
          }
        v[o] = best;
        (*argmax)[static_cast<std::size_t>(o)] = besti;
      }
  }
  auto px = x.node();
  return TensorT<S>::make_op(oshape, std::move(v), {px},
                             [px, argmax](TapeNode<S>& nd) mutable {
                               if (!px->requires_grad) return;
                               px->ensure_grad();
                               for (std::int64_t i = 0; i < nd.grad.size(); ++i)
                                 px->grad[(*argmax)[static_cast<std::size_t>(i)]] += nd.grad[i];
                             });
}

namespace detail {

// Group decomposition for the norm layers: values viewed as [outer, C, inner].
inline void norm_axes(const Shape& s, int& outer, int& C, int& inner) {
  switch (s.size()) {
    case 1: outer = 1; C = s[0]; inner = 1; break;
    case 2: outer = s[0]; C = s[1]; inner = 1; break;
    case 3: outer = 1; C = s[0]; inner = s[1] * s[2]; break;
    case 4: outer = s[0]; C = s[1]; inner = s[2] * s[3]; break;
    default: throw DimensionError("norm: unsupported rank");
  }
}

}  // namespace detail

/// Batch normalization over the channel axis. Training mode normalizes by
/// batch statistics and updates `running_mean`/`running_var` in place (these
/// are buffers, not graph participants); eval mode uses the running stats.
template <class S>
TensorT<S> batch_norm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                      TensorT<S>& running_mean, TensorT<S>& running_var, bool training,
                      S momentum = S(0.1), S eps = S(1e-5)) {
  int outer, C, inner;
  detail::norm_axes(x.shape(), outer, C, inner);
  if (gamma.numel() != C || beta.numel() != C)
    throw DimensionError("batch_norm: gamma/beta length must equal channel count");
  const std::int64_t m = static_cast<std::int64_t>(outer) * inner;
  if (m < 1) throw PreconditionError("batch_norm: empty batch");
  ArrX<S> mu(C), var(C);
  const S* xp = x.values().data();
  auto elem = [&](int ou, int c, int in) -> std::int64_t {
    return (static_cast<std::int64_t>(ou) * C + c) * inner + in;
  };
  if (training) {
    for (int c = 0; c < C; ++c) {
      S s = 0;
      for (int ou = 0; ou < outer; ++ou)
        for (int in = 0; in < inner; ++in) s += xp[elem(ou, c, in)];
      mu[c] = s / static_cast<S>(m);
      S q = 0;
      for (int ou = 0; ou < outer; ++ou)
        for (int in = 0; in < inner; ++in) {
          S dv = xp[elem(ou, c, in)] - mu[c];
          q += dv * dv;
        }
      var[c] = q / static_cast<S>(m);
    }
    // Unbiased variance feeds the running buffer.
    for (int c = 0; c < C; ++c) {
      S uv = m > 1 ? var[c] * static_cast<S>(m) / static_cast<S>(m - 1) : var[c];
      running_mean.values()[c] = (S(1) - momentum) * running_mean.values()[c] + momentum * mu[c];
      running_var.values()[c] = (S(1) - momentum) * running_var.values()[c] + momentum * uv;
    }
  } else {
    mu = running_mean.values();
    var = running_var.values();
  }
  ArrX<S> istd = (var + eps).rsqrt();
  ArrX<S> v(x.numel());
  for (int ou = 0; ou < outer; ++ou)
    for (int c = 0; c < C; ++c)
      for (int in = 0; in < inner; ++in) {
        std::int64_t i = elem(ou, c, in);
        v[i] = gamma.values()[c] * (xp[i] - mu[c]) * istd[c] + beta.values()[c];
      }
  auto px = x.node(), pg = gamma.node(), pbt = beta.node();
  auto mu_s = std::make_shared<ArrX<S>>(std::move(mu));
  auto istd_s = std::make_shared<ArrX<S>>(std::move(istd));
  return TensorT<S>::make_op(
      x.shape(), std::move(v), {px, pg, pbt},
      [px, pg, pbt, mu_s, istd_s, outer, C, inner, m, training](TapeNode<S>& nd) mutable {
        const S* xp = px->value.data();
        const S* gy = nd.grad.data();
        auto elem = [&](int ou, int c, int in) -> std::int64_t {
          return (static_cast<std::int64_t>(ou) * C + c) * inner + in;
        };
        for (int c = 0; c < C; ++c) {
          S sum_gy = 0, sum_gyx = 0;
          for (int ou = 0; ou < outer; ++ou)
            for (int in = 0; in < inner; ++in) {
              std::int64_t i = elem(ou, c, in);
              S xh = (xp[i] - (*mu_s)[c]) * (*istd_s)[c];
              sum_gy += gy[i];
              sum_gyx += gy[i] * xh;
            }
          if (pg->requires_grad) {
            pg->ensure_grad();
            pg->grad[c] += sum_gyx;
          }
          if (pbt->requires_grad) {
            pbt->ensure_grad();
            pbt->grad[c] += sum_gy;
          }
          if (px->requires_grad) {
            px->ensure_grad();
            S g = pg->value[c] * (*istd_s)[c];
            S mg = sum_gy / static_cast<S>(m), mgx = sum_gyx / static_cast<S>(m);
            for (int ou = 0; ou < outer; ++ou)
              for (int in = 0; in < inner; ++in) {
                std::int64_t i = elem(ou, c, in);
                S xh = (xp[i] - (*mu_s)[c]) * (*istd_s)[c];
                if (training)
                  px->grad[i] += g * (gy[i] - mg - xh * mgx);
                else
                  px->grad[i] += g * gy[i];
              }
          }
        }
      });
}

/// Layer normalization across the channel axis of each spatial token, with a
/// per-channel affine.
template <class S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                      S eps = S(1e-5)) {
  int outer, C, inner;
  detail::norm_axes(x.shape(), outer, C, inner);
  if (gamma.numel() != C || beta.numel() != C)
    throw DimensionError("layer_norm: gamma/beta length must equal channel count");
  const std::int64_t G = static_cast<std::int64_t>(outer) * inner;
  ArrX<S> mu(G), istd(G);
  const S* xp = x.values().data();
  auto elem = [&](std::int64_t g, int c) -> std::int64_t {
    std::int64_t ou = g / inner, in = g % inner;
    return (ou * C + c) * inner + in;
  };
  ArrX<S> v(x.numel());
  for (std::int64_t g = 0; g < G; ++g) {
    S s = 0;
    for (int c = 0; c < C; ++c) s += xp[elem(g, c)];
    S mean_g = s / static_cast<S>(C);
    S q = 0;
    for (int c = 0; c < C; ++c) {
      S dv = xp[elem(g, c)] - mean_g;
      q += dv * dv;
    }
    mu[g] = mean_g;
    istd[g] = S(1) / std::sqrt(q / static_cast<S>(C) + eps);
    for (int c = 0; c < C; ++c) {
      std::int64_t i = elem(g, c);
      v[i] = gamma.values()[c] * (xp[i] - mean_g) * istd[g] + beta.values()[c];
    }
  }
  auto px = x.node(), pg = gamma.node(), pbt = beta.node();
  auto mu_s = std::make_shared<ArrX<S>>(std::move(mu));
  auto istd_s = std::make_shared<ArrX<S>>(std::move(istd));
  return TensorT<S>::make_op(
      x.shape(), std::move(v), {px, pg, pbt},
      [px, pg, pbt, mu_s, istd_s, outer, C, inner, G](TapeNode<S>& nd) mutable {
        const S* xp = px->value.data();
        const S* gy = nd.grad.data();
        auto elem = [&](std::int64_t g, int c) -> std::int64_t {
          std::int64_t ou = g / inner, in = g % inner;
          return (ou * C + c) * inner + in;
        };
        for (std::int64_t g = 0; g < G; ++g) {
          S sum_h = 0, sum_hx = 0;
          for (int c = 0; c < C; ++c) {
            std::int64_t i = elem(g, c);
            S xh = (xp[i] - (*mu_s)[g]) * (*istd_s)[g];
            S h = gy[i] * pg->value[c];
            sum_h += h;
            sum_hx += h * xh;
            if (pg->requires_grad) {
              pg->ensure_grad();
              pg->grad[c] += gy[i] * xh;
            }
            if (pbt->requires_grad) {
              pbt->ensure_grad();
              pbt->grad[c] += gy[i];
            }
          }
          if (px->requires_grad) {
            px->ensure_grad();
            S mh = sum_h / static_cast<S>(C), mhx = sum_hx / static_cast<S>(C);
            for (int c = 0; c < C; ++c) {
              std::int64_t i = elem(g, c);
              S xh = (xp[i] - (*mu_s)[g]) * (*istd_s)[g];
              px->grad[i] += (*istd_s)[g] * (gy[i] * pg->value[c] - mh - xh * mhx);
            }
          }
        }
      });
}

/// Global average pooling: (N,C,H,W) -> (N,C) or (C,H,W) -> (C).
template <class S>
TensorT<S> global_avg_pool(const TensorT<S>& x) {
  if (x.rank() != 3 && x.rank() != 4) throw DimensionError("global_avg_pool: expects rank-3 or rank-4");
  bool batched = x.rank() == 4;
  int N = batched ? x.dim(0) : 1;
  int C = x.dim(batched ? 1 : 0);
  std::int64_t hw = x.dim(batched ? 2 : 1) * static_cast<std::int64_t>(x.dim(batched ? 3 : 2));
  ArrX<S> v(static_cast<std::int64_t>(N) * C);
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(N) * C; ++i)
    v[i] = x.values().segment(i * hw, hw).mean();
  Shape oshape = batched ? Shape{N, C} : Shape{C};
  auto px = x.node();
  return TensorT<S>::make_op(oshape, std::move(v), {px},
                             [px, hw](TapeNode<S>& nd) mutable {
                               if (!px->requires_grad) return;
                               px->ensure_grad();
                               for (std::int64_t i = 0; i < nd.grad.size(); ++i)
                                 px->grad.segment(i * hw, hw) += ArrX<S>::Constant(hw, nd.grad[i] / static_cast<S>(hw));
                             });
}

}  // namespace helix
