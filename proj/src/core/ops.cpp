#include "ibr/core/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ibr {

namespace {

template <typename S>
Tape<S>& tape_of(const Var<S>& a) {
  if (!a.valid()) throw Error(ErrorCode::detached_node, "operand is not bound to a tape");
  return *a.tape();
}

template <typename S>
Tape<S>& common_tape(const Var<S>& a, const Var<S>& b) {
  if (!a.valid() || !b.valid() || a.tape() != b.tape())
    throw Error(ErrorCode::detached_node, "operands live on different tapes");
  return *a.tape();
}

template <typename S>
Var<S> emit(Tape<S>& t, OpKind kind, std::vector<NodeId> inputs, Shape shape, Array<S> data,
            BackwardFn<S> backward) {
  check_finite(data, to_string(kind));
  return t.record(kind, std::move(inputs), Tensor<S>(std::move(shape), std::move(data)), std::move(backward));
}

void require(bool cond, const std::string& what) {
  if (!cond) throw Error(ErrorCode::shape_mismatch, what);
}

// Elementwise unary op. `deriv(x)` returns dy/dx evaluated on the input values.
template <typename S, typename Fwd, typename Deriv>
Var<S> unary(const Var<S>& a, OpKind kind, Fwd fwd, Deriv deriv) {
  Tape<S>& t = tape_of(a);
  const auto& x = a.value();
  Array<S> y = fwd(x.data);
  const NodeId id = a.id();
  Tape<S>* tp = &t;
  return emit<S>(t, kind, {id}, x.shape, std::move(y), [tp, id, deriv](const Array<S>& g, GradSink<S>& s) {
    s.at(0) += g * deriv(tp->value(id).data);
  });
}

template <typename S>
S softplus_scalar(S x) {
  return std::max(x, S(0)) + std::log1p(std::exp(-std::abs(x)));
}

template <typename S>
S sigmoid_scalar(S x) {
  if (x >= 0) return S(1) / (S(1) + std::exp(-x));
  const S e = std::exp(x);
  return e / (S(1) + e);
}

struct Strides {
  Index outer = 1, axis = 1, inner = 1;
};

Strides strides_of(const Shape& s, Index axis) {
  Strides st;
  for (Index i = 0; i < axis; ++i) st.outer *= s[i];
  st.axis = s[axis];
  for (Index i = axis + 1; i < s.rank(); ++i) st.inner *= s[i];
  return st;
}

}  // namespace

template <typename S>
void check_finite(const Array<S>& values, std::string_view where) {
  if (!values.allFinite()) throw Error(ErrorCode::non_finite, std::string(where) + " produced NaN/Inf");
}

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  Tape<S>& t = common_tape(a, b);
  require(a.shape() == b.shape(), "add: " + a.shape().to_string() + " vs " + b.shape().to_string());
  return emit<S>(t, OpKind::add, {a.id(), b.id()}, a.shape(), a.value().data + b.value().data,
                 [](const Array<S>& g, GradSink<S>& s) {
                   if (s.needs(0)) s.at(0) += g;
                   if (s.needs(1)) s.at(1) += g;
                 });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  Tape<S>& t = common_tape(a, b);
  require(a.shape() == b.shape(), "sub: " + a.shape().to_string() + " vs " + b.shape().to_string());
  return emit<S>(t, OpKind::sub, {a.id(), b.id()}, a.shape(), a.value().data - b.value().data,
                 [](const Array<S>& g, GradSink<S>& s) {
                   if (s.needs(0)) s.at(0) += g;
                   if (s.needs(1)) s.at(1) -= g;
                 });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  Tape<S>& t = common_tape(a, b);
  require(a.shape() == b.shape(), "mul: " + a.shape().to_string() + " vs " + b.shape().to_string());
  Tape<S>* tp = &t;
  const NodeId ia = a.id(), ib = b.id();
  return emit<S>(t, OpKind::mul, {ia, ib}, a.shape(), a.value().data * b.value().data,
                 [tp, ia, ib](const Array<S>& g, GradSink<S>& s) {
                   if (s.needs(0)) s.at(0) += g * tp->value(ib).data;
                   if (s.needs(1)) s.at(1) += g * tp->value(ia).data;
                 });
}

template <typename S>
Var<S> scale(const Var<S>& a, S factor) {
  return emit<S>(tape_of(a), OpKind::scale, {a.id()}, a.shape(), a.value().data * factor,
                 [factor](const Array<S>& g, GradSink<S>& s) { s.at(0) += g * factor; });
}

template <typename S>
Var<S> add_scalar(const Var<S>& a, S offset) {
  return emit<S>(tape_of(a), OpKind::add_scalar, {a.id()}, a.shape(), a.value().data + offset,
                 [](const Array<S>& g, GradSink<S>& s) { s.at(0) += g; });
}

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  Tape<S>& t = common_tape(a, b);
  const Shape &sa = a.shape(), &sb = b.shape();
  require(sa.rank() == 2 && sb.rank() == 2 && sa[1] == sb[0],
          "matmul: " + sa.to_string() + " x " + sb.to_string());
  const Index m = sa[0], k = sa[1], n = sb[1];
  Array<S> out(m * n);
  MatrixMap<S>(out.data(), m, n).noalias() =
      ConstMatrixMap<S>(a.value().data.data(), m, k) * ConstMatrixMap<S>(b.value().data.data(), k, n);
  Tape<S>* tp = &t;
  const NodeId ia = a.id(), ib = b.id();
  return emit<S>(t, OpKind::matmul, {ia, ib}, Shape{m, n}, std::move(out),
                 [tp, ia, ib, m, k, n](const Array<S>& g, GradSink<S>& s) {
                   ConstMatrixMap<S> G(g.data(), m, n);
                   if (s.needs(0))
                     MatrixMap<S>(s.at(0).data(), m, k).noalias() +=
                         G * ConstMatrixMap<S>(tp->value(ib).data.data(), k, n).transpose();
                   if (s.needs(1))
                     MatrixMap<S>(s.at(1).data(), k, n).noalias() +=
                         ConstMatrixMap<S>(tp->value(ia).data.data(), m, k).transpose() * G;
                 });
}

template <typename S>
Var<S> linear(const Var<S>& x, const Var<S>& weight, const Var<S>& bias) {
  Tape<S>& t = common_tape(x, weight);
  const Shape &sx = x.shape(), &sw = weight.shape();
  require(sx.rank() == 2 && sw.rank() == 2 && sx[1] == sw[1],
          "linear: " + sx.to_string() + " with weight " + sw.to_string());
  const Index n = sx[0], in = sx[1], out = sw[0];
  const bool has_bias = bias.valid();
  if (has_bias) require(bias.shape() == Shape{out}, "linear: bias shape " + bias.shape().to_string());
  Array<S> y(n * out);
  MatrixMap<S> Y(y.data(), n, out);
  Y.noalias() = ConstMatrixMap<S>(x.value().data.data(), n, in) *
                ConstMatrixMap<S>(weight.value().data.data(), out, in).transpose();
  if (has_bias) Y.rowwise() += bias.value().data.matrix().transpose();
  std::vector<NodeId> ins{x.id(), weight.id()};
  if (has_bias) ins.push_back(bias.id());
  Tape<S>* tp = &t;
  const NodeId ix = x.id(), iw = weight.id();
  return emit<S>(t, OpKind::linear, std::move(ins), Shape{n, out}, std::move(y),
                 [tp, ix, iw, n, in, out, has_bias](const Array<S>& g, GradSink<S>& s) {
                   ConstMatrixMap<S> G(g.data(), n, out);
                   if (s.needs(0))
                     MatrixMap<S>(s.at(0).data(), n, in).noalias() +=
                         G * ConstMatrixMap<S>(tp->value(iw).data.data(), out, in);
                   if (s.needs(1))
                     MatrixMap<S>(s.at(1).data(), out, in).noalias() +=
                         G.transpose() * ConstMatrixMap<S>(tp->value(ix).data.data(), n, in);
                   if (has_bias && s.needs(2)) s.at(2) += G.colwise().sum().transpose().array();
                 });
}

template <typename S>
void im2col(const S* image, const ConvGeometry& g, S* col) {
  const Index cols = g.cols();
  for (Index c = 0; c < g.c; ++c)
    for (Index ki = 0; ki < g.kh; ++ki)
      for (Index kj = 0; kj < g.kw; ++kj) {
        S* row = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (Index n = 0; n < g.n; ++n) {
          const S* plane = image + (n * g.c + c) * g.h * g.w;
          for (Index oh = 0; oh < g.ho; ++oh) {
            const Index ih = oh * g.stride - g.padding + ki;
            S* dst = row + (n * g.ho + oh) * g.wo;
            if (ih < 0 || ih >= g.h) {
              std::fill(dst, dst + g.wo, S(0));
              continue;
            }
            const S* src = plane + ih * g.w;
            for (Index ow = 0; ow < g.wo; ++ow) {
              const Index iw = ow * g.stride - g.padding + kj;
              dst[ow] = (iw >= 0 && iw < g.w) ? src[iw] : S(0);
            }
          }
        }
      }
}

template <typename S>
void col2im(const S* col, const ConvGeometry& g, S* image) {
  const Index cols = g.cols();
  for (Index c = 0; c < g.c; ++c)
    for (Index ki = 0; ki < g.kh; ++ki)
      for (Index kj = 0; kj < g.kw; ++kj) {
        const S* row = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (Index n = 0; n < g.n; ++n) {
          S* plane = image + (n * g.c + c) * g.h * g.w;
          for (Index oh = 0; oh < g.ho; ++oh) {
            const Index ih = oh * g.stride - g.padding + ki;
            if (ih < 0 || ih >= g.h) continue;
            const S* src = row + (n * g.ho + oh) * g.wo;
            S* dst = plane + ih * g.w;
            for (Index ow = 0; ow < g.wo; ++ow) {
              const Index iw = ow * g.stride - g.padding + kj;
              if (iw >= 0 && iw < g.w) dst[iw] += src[ow];
            }
          }
        }
      }
}

namespace {

// [N,C,P] <-> matrix (C x N*P) with column n*P + p.
template <typename S>
void nchw_to_channel_major(const S* src, Index n, Index c, Index p, S* dst) {
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < c; ++j) std::copy_n(src + (i * c + j) * p, p, dst + j * n * p + i * p);
}

template <typename S>
void channel_major_to_nchw(const S* src, Index n, Index c, Index p, S* dst) {
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < c; ++j) std::copy_n(src + j * n * p + i * p, p, dst + (i * c + j) * p);
}

template <typename S>
void add_channel_major_to_nchw(const S* src, Index n, Index c, Index p, S* dst) {
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < c; ++j) {
      const S* a = src + j * n * p + i * p;
      S* b = dst + (i * c + j) * p;
      for (Index k = 0; k < p; ++k) b[k] += a[k];
    }
}

}  // namespace

template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& weight, const Var<S>& bias, Conv2dParams p) {
  Tape<S>& t = common_tape(x, weight);
  const Shape &sx = x.shape(), &sw = weight.shape();
  require(sx.rank() == 4 && sw.rank() == 4 && sx[1] == sw[1],
          "conv2d: input " + sx.to_string() + " with weight " + sw.to_string());
  require(p.stride >= 1 && p.padding >= 0, "conv2d: invalid stride/padding");
  const Index f = sw[0];
  ConvGeometry g{sx[0], sx[1], sx[2], sx[3], sw[2], sw[3], p.stride, p.padding, 0, 0};
  require(g.h + 2 * g.padding >= g.kh && g.w + 2 * g.padding >= g.kw, "conv2d: kernel larger than input");
  g.ho = (g.h + 2 * g.padding - g.kh) / g.stride + 1;
  g.wo = (g.w + 2 * g.padding - g.kw) / g.stride + 1;
  const bool has_bias = bias.valid();
  if (has_bias) require(bias.shape() == Shape{f}, "conv2d: bias shape " + bias.shape().to_string());

  RowMatrix<S> col(g.rows(), g.cols());
  im2col(x.value().data.data(), g, col.data());
  RowMatrix<S> y = ConstMatrixMap<S>(weight.value().data.data(), f, g.rows()) * col;
  if (has_bias) y.colwise() += bias.value().data.matrix();
  const Index plane = g.ho * g.wo;
  Array<S> out(g.n * f * plane);
  channel_major_to_nchw(y.data(), g.n, f, plane, out.data());

  std::vector<NodeId> ins{x.id(), weight.id()};
  if (has_bias) ins.push_back(bias.id());
  Tape<S>* tp = &t;
  const NodeId ix = x.id(), iw = weight.id();
  return emit<S>(t, OpKind::conv2d, std::move(ins), Shape{g.n, f, g.ho, g.wo}, std::move(out),
                 [tp, ix, iw, g, f, plane, has_bias](const Array<S>& grad, GradSink<S>& s) {
                   RowMatrix<S> G(f, g.cols());
                   nchw_to_channel_major(grad.data(), g.n, f, plane, G.data());
                   ConstMatrixMap<S> W(tp->value(iw).data.data(), f, g.rows());
                   if (s.needs(1)) {
                     RowMatrix<S> col(g.rows(), g.cols());
                     im2col(tp->value(ix).data.data(), g, col.data());
                     MatrixMap<S>(s.at(1).data(), f, g.rows()).noalias() += G * col.transpose();
                   }
                   if (has_bias && s.needs(2)) s.at(2) += G.rowwise().sum().array();
                   if (s.needs(0)) {
                     RowMatrix<S> dcol = W.transpose() * G;
                     col2im(dcol.data(), g, s.at(0).data());
                   }
                 });
}

template <typename S>
Var<S> conv_transpose2d(const Var<S>& x, const Var<S>& weight, const Var<S>& bias, ConvTranspose2dParams p) {
  Tape<S>& t = common_tape(x, weight);
  const Shape &sx = x.shape(), &sw = weight.shape();
  require(sx.rank() == 4 && sw.rank() == 4 && sx[1] == sw[0],
          "conv_transpose2d: input " + sx.to_string() + " with weight " + sw.to_string());
  require(p.stride >= 1 && p.padding >= 0 && p.output_padding >= 0 && p.output_padding < p.stride,
          "conv_transpose2d: invalid stride/padding");
  const Index n = sx[0], cin = sx[1], h = sx[2], w = sx[3], cout = sw[1];
  const Index ho = (h - 1) * p.stride - 2 * p.padding + sw[2] + p.output_padding;
  const Index wo = (w - 1) * p.stride - 2 * p.padding + sw[3] + p.output_padding;
  require(ho > 0 && wo > 0, "conv_transpose2d: empty output");
  // Geometry of the forward convolution whose adjoint this op is.
  const ConvGeometry g{n, cout, ho, wo, sw[2], sw[3], p.stride, p.padding, h, w};
  const bool has_bias = bias.valid();
  if (has_bias) require(bias.shape() == Shape{cout}, "conv_transpose2d: bias shape " + bias.shape().to_string());

  const Index hw = h * w;
  RowMatrix<S> xm(cin, n * hw);
  nchw_to_channel_major(x.value().data.data(), n, cin, hw, xm.data());
  RowMatrix<S> col = ConstMatrixMap<S>(weight.value().data.data(), cin, g.rows()).transpose() * xm;
  Array<S> out = Array<S>::Zero(n * cout * ho * wo);
  col2im(col.data(), g, out.data());
  if (has_bias) {
    const auto& b = bias.value().data;
    for (Index i = 0; i < n; ++i)
      for (Index c = 0; c < cout; ++c) out.segment((i * cout + c) * ho * wo, ho * wo) += b[c];
  }

  std::vector<NodeId> ins{x.id(), weight.id()};
  if (has_bias) ins.push_back(bias.id());
  Tape<S>* tp = &t;
  const NodeId ix = x.id(), iw = weight.id();
  return emit<S>(t, OpKind::conv_transpose2d, std::move(ins), Shape{n, cout, ho, wo}, std::move(out),
                 [tp, ix, iw, g, cin, hw, has_bias](const Array<S>& grad, GradSink<S>& s) {
                   RowMatrix<S> gcol(g.rows(), g.cols());
                   im2col(grad.data(), g, gcol.data());
                   ConstMatrixMap<S> W(tp->value(iw).data.data(), cin, g.rows());
                   if (s.needs(0)) {
                     RowMatrix<S> dx = W * gcol;
                     add_channel_major_to_nchw(dx.data(), g.n, cin, hw, s.at(0).data());
                   }
                   if (s.needs(1)) {
                     RowMatrix<S> xm(cin, g.n * hw);
                     nchw_to_channel_major(tp->value(ix).data.data(), g.n, cin, hw, xm.data());
                     MatrixMap<S>(s.at(1).data(), cin, g.rows()).noalias() += xm * gcol.transpose();
                   }
                   if (has_bias && s.needs(2)) {
                     const Index plane = g.h * g.w;
                     for (Index i = 0; i < g.n; ++i)
                       for (Index c = 0; c < g.c; ++c)
                         s.at(2)[c] += grad.segment((i * g.c + c) * plane, plane).sum();
                   }
                 });
}

template <typename S>
Var<S> relu(const Var<S>& a) {
  return unary(a, OpKind::relu, [](const Array<S>& x) { return Array<S>(x.max(S(0))); },
               [](const Array<S>& x) { return Array<S>((x > S(0)).template cast<S>()); });
}

template <typename S>
Var<S> softplus(const Var<S>& a) {
  return unary(a, OpKind::softplus, [](const Array<S>& x) { return Array<S>(x.unaryExpr(&softplus_scalar<S>)); },
               [](const Array<S>& x) { return Array<S>(x.unaryExpr(&sigmoid_scalar<S>)); });
}

template <typename S>
Var<S> tanh(const Var<S>& a) {
  return unary(a, OpKind::tanh, [](const Array<S>& x) { return Array<S>(x.tanh()); },
               [](const Array<S>& x) { return Array<S>(S(1) - x.tanh().square()); });
}

template <typename S>
Var<S> sigmoid(const Var<S>& a) {
  return unary(a, OpKind::sigmoid, [](const Array<S>& x) { return Array<S>(x.unaryExpr(&sigmoid_scalar<S>)); },
               [](const Array<S>& x) {
                 Array<S> y = x.unaryExpr(&sigmoid_scalar<S>);
                 return Array<S>(y * (S(1) - y));
               });
}

template <typename S>
Var<S> exp(const Var<S>& a) {
  return unary(a, OpKind::exp, [](const Array<S>& x) { return Array<S>(x.exp()); },
               [](const Array<S>& x) { return Array<S>(x.exp()); });
}

template <typename S>
Var<S> log(const Var<S>& a) {
  return unary(a, OpKind::log, [](const Array<S>& x) { return Array<S>(x.log()); },
               [](const Array<S>& x) { return Array<S>(x.inverse()); });
}

template <typename S>
Var<S> square(const Var<S>& a) {
  return unary(a, OpKind::square, [](const Array<S>& x) { return Array<S>(x.square()); },
               [](const Array<S>& x) { return Array<S>(S(2) * x); });
}

template <typename S>
Var<S> abs(const Var<S>& a) {
  return unary(a, OpKind::abs, [](const Array<S>& x) { return Array<S>(x.abs()); },
               [](const Array<S>& x) {
                 return Array<S>((x > S(0)).template cast<S>() - (x < S(0)).template cast<S>());
               });
}

template <typename S>
Var<S> sqrt(const Var<S>& a) {
  return unary(a, OpKind::sqrt, [](const Array<S>& x) { return Array<S>(x.sqrt()); },
               [](const Array<S>& x) {
                 return Array<S>((x > S(0)).select(S(0.5) / x.sqrt(), S(0)));
               });
}

template <typename S>
Var<S> sum(const Var<S>& a) {
  const Index n = a.value().numel();
  return emit<S>(tape_of(a), OpKind::sum, {a.id()}, Shape{1}, Array<S>::Constant(1, a.value().data.sum()),
                 [n](const Array<S>& g, GradSink<S>& s) { s.at(0) += Array<S>::Constant(n, g[0]); });
}

template <typename S>
Var<S> mean(const Var<S>& a) {
  const Index n = a.value().numel();
  return emit<S>(tape_of(a), OpKind::mean, {a.id()}, Shape{1}, Array<S>::Constant(1, a.value().data.mean()),
                 [n](const Array<S>& g, GradSink<S>& s) { s.at(0) += Array<S>::Constant(n, g[0] / S(n)); });
}

template <typename S>
Var<S> sum_per_sample(const Var<S>& a) {
  const Index n = a.shape()[0];
  const Index per = a.value().numel() / n;
  Array<S> out = ConstMatrixMap<S>(a.value().data.data(), n, per).rowwise().sum().array();
  return emit<S>(tape_of(a), OpKind::sum_per_sample, {a.id()}, Shape{n}, std::move(out),
                 [n, per](const Array<S>& g, GradSink<S>& s) {
                   MatrixMap<S>(s.at(0).data(), n, per).colwise() += g.matrix();
                 });
}

template <typename S>
Var<S> reshape(const Var<S>& a, const Shape& shape) {
  require(shape.numel() == a.value().numel(),
          "reshape: " + a.shape().to_string() + " -> " + shape.to_string());
  return emit<S>(tape_of(a), OpKind::reshape, {a.id()}, shape, a.value().data,
                 [](const Array<S>& g, GradSink<S>& s) { s.at(0) += g; });
}

template <typename S>
Var<S> max_pool2d(const Var<S>& a, Index kernel, Index stride) {
  const Shape& sa = a.shape();
  require(sa.rank() == 4 && kernel >= 1 && stride >= 1 && sa[2] >= kernel && sa[3] >= kernel,
          "max_pool2d: input " + sa.to_string());
  const Index n = sa[0], c = sa[1], h = sa[2], w = sa[3];
  const Index ho = (h - kernel) / stride + 1, wo = (w - kernel) / stride + 1;
  const auto& x = a.value().data;
  Array<S> out(n * c * ho * wo);
  std::vector<Index> arg(static_cast<std::size_t>(out.size()));
  for (Index pl = 0; pl < n * c; ++pl)
    for (Index oh = 0; oh < ho; ++oh)
      for (Index ow = 0; ow < wo; ++ow) {
        Index best = pl * h * w + (oh * stride) * w + ow * stride;
        for (Index ki = 0; ki < kernel; ++ki)
          for (Index kj = 0; kj < kernel; ++kj) {
            const Index idx = pl * h * w + (oh * stride + ki) * w + ow * stride + kj;
            if (x[idx] > x[best]) best = idx;
          }
        const Index o = (pl * ho + oh) * wo + ow;
        out[o] = x[best];
        arg[static_cast<std::size_t>(o)] = best;
      }
  return emit<S>(tape_of(a), OpKind::max_pool2d, {a.id()}, Shape{n, c, ho, wo}, std::move(out),
                 [arg = std::move(arg)](const Array<S>& g, GradSink<S>& s) {
                   for (std::size_t o = 0; o < arg.size(); ++o) s.at(0)[arg[o]] += g[static_cast<Index>(o)];
                 });
}

template <typename S>
Var<S> slice(const Var<S>& a, Index axis, Index start, Index length) {
  const Shape& sa = a.shape();
  require(axis >= 0 && axis < sa.rank() && start >= 0 && length >= 1 && start + length <= sa[axis],
          "slice: out of range on " + sa.to_string());
  const Strides st = strides_of(sa, axis);
  std::vector<Index> dims = sa.dims();
  dims[static_cast<std::size_t>(axis)] = length;
  const auto& x = a.value().data;
  Array<S> out(st.outer * length * st.inner);
  for (Index o = 0; o < st.outer; ++o)
    out.segment(o * length * st.inner, length * st.inner) =
        x.segment((o * st.axis + start) * st.inner, length * st.inner);
  return emit<S>(tape_of(a), OpKind::slice, {a.id()}, Shape(std::move(dims)), std::move(out),
                 [st, start, length](const Array<S>& g, GradSink<S>& s) {
                   for (Index o = 0; o < st.outer; ++o)
                     s.at(0).segment((o * st.axis + start) * st.inner, length * st.inner) +=
                         g.segment(o * length * st.inner, length * st.inner);
                 });
}

template <typename S>
Var<S> concat(const std::vector<Var<S>>& parts, Index axis) {
  require(!parts.empty(), "concat: no inputs");
  Tape<S>& t = tape_of(parts.front());
  const Shape& s0 = parts.front().shape();
  require(axis >= 0 && axis < s0.rank(), "concat: bad axis");
  std::vector<NodeId> ins;
  std::vector<Index> widths;
  Index total = 0;
  for (const auto& p : parts) {
    common_tape(parts.front(), p);
    const Shape& sp = p.shape();
    require(sp.rank() == s0.rank(), "concat: rank mismatch");
    for (Index d = 0; d < s0.rank(); ++d)
      if (d != axis) require(sp[d] == s0[d], "concat: " + sp.to_string() + " vs " + s0.to_string());
    ins.push_back(p.id());
    widths.push_back(sp[axis]);
    total += sp[axis];
  }
  const Strides st = strides_of(s0, axis);
  std::vector<Index> dims = s0.dims();
  dims[static_cast<std::size_t>(axis)] = total;
  Array<S> out(st.outer * total * st.inner);
  Index offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& x = parts[k].value().data;
    const Index wk = widths[k] * st.inner;
    for (Index o = 0; o < st.outer; ++o) out.segment((o * total + offset) * st.inner, wk) = x.segment(o * wk, wk);
    offset += widths[k];
  }
  return emit<S>(t, OpKind::concat, std::move(ins), Shape(std::move(dims)), std::move(out),
                 [st, widths, total](const Array<S>& g, GradSink<S>& s) {
                   Index off = 0;
                   for (std::size_t k = 0; k < widths.size(); ++k) {
                     const Index wk = widths[k] * st.inner;
                     if (s.needs(k))
                       for (Index o = 0; o < st.outer; ++o)
                         s.at(k).segment(o * wk, wk) += g.segment((o * total + off) * st.inner, wk);
                     off += widths[k];
                   }
                 });
}

template <typename S>
Var<S> log_softmax(const Var<S>& logits) {
  const Shape& sl = logits.shape();
  require(sl.rank() == 2, "log_softmax expects [N,K], got " + sl.to_string());
  const Index n = sl[0], k = sl[1];
  Array<S> out(n * k);
  ConstMatrixMap<S> Z(logits.value().data.data(), n, k);
  MatrixMap<S> Y(out.data(), n, k);
  for (Index i = 0; i < n; ++i) {
    const S m = Z.row(i).maxCoeff();
    const S lse = m + std::log((Z.row(i).array() - m).exp().sum());
    Y.row(i) = Z.row(i).array() - lse;
  }
  Array<S> y = out;
  return emit<S>(tape_of(logits), OpKind::log_softmax, {logits.id()}, sl, std::move(out),
                 [y = std::move(y), n, k](const Array<S>& g, GradSink<S>& s) {
                   ConstMatrixMap<S> G(g.data(), n, k), Yl(y.data(), n, k);
                   MatrixMap<S> D(s.at(0).data(), n, k);
                   for (Index i = 0; i < n; ++i)
                     D.row(i).array() += G.row(i).array() - Yl.row(i).array().exp() * G.row(i).sum();
                 });
}

template <typename S>
Var<S> softmax(const Var<S>& logits) {
  const Shape& sl = logits.shape();
  require(sl.rank() == 2, "softmax expects [N,K], got " + sl.to_string());
  const Index n = sl[0], k = sl[1];
  Array<S> out(n * k);
  ConstMatrixMap<S> Z(logits.value().data.data(), n, k);
  MatrixMap<S> Y(out.data(), n, k);
  for (Index i = 0; i < n; ++i) {
    Y.row(i) = (Z.row(i).array() - Z.row(i).maxCoeff()).exp().matrix();
    Y.row(i) /= Y.row(i).sum();
  }
  Array<S> y = out;
  return emit<S>(tape_of(logits), OpKind::softmax, {logits.id()}, sl, std::move(out),
                 [y = std::move(y), n, k](const Array<S>& g, GradSink<S>& s) {
                   ConstMatrixMap<S> G(g.data(), n, k), Yl(y.data(), n, k);
                   MatrixMap<S> D(s.at(0).data(), n, k);
                   for (Index i = 0; i < n; ++i) {
                     const S dot = G.row(i).dot(Yl.row(i));
                     D.row(i).array() += Yl.row(i).array() * (G.row(i).array() - dot);
                   }
                 });
}

template <typename S>
Var<S> pick(const Var<S>& a, const std::vector<int>& index) {
  const Shape& sa = a.shape();
  require(sa.rank() == 2 && static_cast<Index>(index.size()) == sa[0], "pick: index count vs " + sa.to_string());
  const Index n = sa[0], k = sa[1];
  for (int i : index)
    if (i < 0 || i >= k) throw Error(ErrorCode::label_out_of_range, "index " + std::to_string(i));
  Array<S> out(n);
  for (Index i = 0; i < n; ++i) out[i] = a.value().data[i * k + index[static_cast<std::size_t>(i)]];
  return emit<S>(tape_of(a), OpKind::pick, {a.id()}, Shape{n}, std::move(out),
                 [index, k](const Array<S>& g, GradSink<S>& s) {
                   for (std::size_t i = 0; i < index.size(); ++i)
                     s.at(0)[static_cast<Index>(i) * k + index[i]] += g[static_cast<Index>(i)];
                 });
}

template <typename S>
Var<S> max_excluding(const Var<S>& a, const std::vector<int>& exclude) {
  const Shape& sa = a.shape();
  require(sa.rank() == 2 && sa[1] >= 2 && static_cast<Index>(exclude.size()) == sa[0],
          "max_excluding: index count vs " + sa.to_string());
  const Index n = sa[0], k = sa[1];
  Array<S> out(n);
  std::vector<Index> arg(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const int ex = exclude[static_cast<std::size_t>(i)];
    if (ex < 0 || ex >= k) throw Error(ErrorCode::label_out_of_range, "index " + std::to_string(ex));
    Index best = -1;
    for (Index j = 0; j < k; ++j)
      if (j != ex && (best < 0 || a.value().data[i * k + j] > a.value().data[i * k + best])) best = j;
    out[i] = a.value().data[i * k + best];
    arg[static_cast<std::size_t>(i)] = i * k + best;
  }
  return emit<S>(tape_of(a), OpKind::max_excluding, {a.id()}, Shape{n}, std::move(out),
                 [arg = std::move(arg)](const Array<S>& g, GradSink<S>& s) {
                   for (std::size_t i = 0; i < arg.size(); ++i) s.at(0)[arg[i]] += g[static_cast<Index>(i)];
                 });
}

template <typename S>
Var<S> clamp(const Var<S>& a, S lo, S hi) {
  return unary(a, OpKind::clamp, [lo, hi](const Array<S>& x) { return Array<S>(x.max(lo).min(hi)); },
               [lo, hi](const Array<S>& x) { return Array<S>(((x >= lo) && (x <= hi)).template cast<S>()); });
}

template <typename S>
Var<S> round_ste(const Var<S>& a) {
  return emit<S>(tape_of(a), OpKind::round_ste, {a.id()}, a.shape(), a.value().data.round(),
                 [](const Array<S>& g, GradSink<S>& s) { s.at(0) += g; });
}

template <typename S>
Var<S> forward(Tape<S>& tape, OpKind kind, const std::vector<Var<S>>& in, const OpParams& p) {
  for (const auto& v : in)
    if (v.tape() != &tape) throw Error(ErrorCode::detached_node, "input is not on the given tape");
  auto arity = [&](std::size_t lo, std::size_t hi) {
    if (in.size() < lo || in.size() > hi)
      throw Error(ErrorCode::shape_mismatch, std::string(to_string(kind)) + ": wrong number of inputs");
  };
  auto opt = [&](std::size_t i) { return i < in.size() ? in[i] : Var<S>{}; };
  switch (kind) {
    case OpKind::add: arity(2, 2); return add(in[0], in[1]);
    case OpKind::sub: arity(2, 2); return sub(in[0], in[1]);
    case OpKind::mul: arity(2, 2); return mul(in[0], in[1]);
    case OpKind::scale: arity(1, 1); return scale(in[0], S(p.scalar));
    case OpKind::add_scalar: arity(1, 1); return add_scalar(in[0], S(p.scalar));
    case OpKind::matmul: arity(2, 2); return matmul(in[0], in[1]);
    case OpKind::linear: arity(2, 3); return linear(in[0], in[1], opt(2));
    case OpKind::conv2d: arity(2, 3); return conv2d(in[0], in[1], opt(2), {p.stride, p.padding});
    case OpKind::conv_transpose2d:
      arity(2, 3);
      return conv_transpose2d(in[0], in[1], opt(2), {p.stride, p.padding, p.output_padding});
    case OpKind::relu: arity(1, 1); return relu(in[0]);
    case OpKind::softplus: arity(1, 1); return softplus(in[0]);
    case OpKind::tanh: arity(1, 1); return tanh(in[0]);
    case OpKind::sigmoid: arity(1, 1); return sigmoid(in[0]);
    case OpKind::exp: arity(1, 1); return exp(in[0]);
    case OpKind::log: arity(1, 1); return log(in[0]);
    case OpKind::square: arity(1, 1); return square(in[0]);
    case OpKind::abs: arity(1, 1); return abs(in[0]);
    case OpKind::sqrt: arity(1, 1); return sqrt(in[0]);
    case OpKind::sum: arity(1, 1); return sum(in[0]);
    case OpKind::mean: arity(1, 1); return mean(in[0]);
    case OpKind::sum_per_sample: arity(1, 1); return sum_per_sample(in[0]);
    case OpKind::reshape: arity(1, 1); return reshape(in[0], p.shape);
    case OpKind::max_pool2d: arity(1, 1); return max_pool2d(in[0], p.kernel, p.stride);
    case OpKind::slice: arity(1, 1); return slice(in[0], p.axis, p.start, p.length);
    case OpKind::concat: arity(1, in.size()); return concat(in, p.axis);
    case OpKind::log_softmax: arity(1, 1); return log_softmax(in[0]);
    case OpKind::softmax: arity(1, 1); return softmax(in[0]);
    case OpKind::pick: arity(1, 1); return pick(in[0], p.index);
    case OpKind::max_excluding: arity(1, 1); return max_excluding(in[0], p.index);
    case OpKind::clamp: arity(1, 1); return clamp(in[0], S(p.lo), S(p.hi));
    case OpKind::round_ste: arity(1, 1); return round_ste(in[0]);
    case OpKind::leaf:
    case OpKind::custom: break;
  }
  throw Error(ErrorCode::shape_mismatch, std::string(to_string(kind)) + " is not dispatchable");
}

#define IBR_INSTANTIATE_OPS(S)                                                                   \
  template void check_finite<S>(const Array<S>&, std::string_view);                             \
  template Var<S> add(const Var<S>&, const Var<S>&);                                            \
  template Var<S> sub(const Var<S>&, const Var<S>&);                                            \
  template Var<S> mul(const Var<S>&, const Var<S>&);                                            \
  template Var<S> scale(const Var<S>&, S);                                                      \
  template Var<S> add_scalar(const Var<S>&, S);                                                 \
  template Var<S> matmul(const Var<S>&, const Var<S>&);                                         \
  template Var<S> linear(const Var<S>&, const Var<S>&, const Var<S>&);                          \
  template Var<S> conv2d(const Var<S>&, const Var<S>&, const Var<S>&, Conv2dParams);            \
  template Var<S> conv_transpose2d(const Var<S>&, const Var<S>&, const Var<S>&,                 \
                                   ConvTranspose2dParams);                                      \
  template Var<S> relu(const Var<S>&);                                                          \
  template Var<S> softplus(const Var<S>&);                                                      \
  template Var<S> tanh(const Var<S>&);                                                          \
  template Var<S> sigmoid(const Var<S>&);                                                       \
  template Var<S> exp(const Var<S>&);                                                           \
  template Var<S> log(const Var<S>&);                                                           \
  template Var<S> square(const Var<S>&);                                                        \
  template Var<S> abs(const Var<S>&);                                                           \
  template Var<S> sqrt(const Var<S>&);                                                          \
  template Var<S> sum(const Var<S>&);                                                           \
  template Var<S> mean(const Var<S>&);                                                          \
  template Var<S> sum_per_sample(const Var<S>&);                                                \
  template Var<S> reshape(const Var<S>&, const Shape&);                                         \
  template Var<S> max_pool2d(const Var<S>&, Index, Index);                                      \
  template Var<S> slice(const Var<S>&, Index, Index, Index);                                    \
  template Var<S> concat(const std::vector<Var<S>>&, Index);                                    \
  template Var<S> log_softmax(const Var<S>&);                                                   \
  template Var<S> softmax(const Var<S>&);                                                       \
  template Var<S> pick(const Var<S>&, const std::vector<int>&);                                 \
  template Var<S> max_excluding(const Var<S>&, const std::vector<int>&);                        \
  template Var<S> clamp(const Var<S>&, S, S);                                                   \
  template Var<S> round_ste(const Var<S>&);                                                     \
  template Var<S> forward(Tape<S>&, OpKind, const std::vector<Var<S>>&, const OpParams&);       \
  template void im2col(const S*, const ConvGeometry&, S*);                                      \
  template void col2im(const S*, const ConvGeometry&, S*);

IBR_INSTANTIATE_OPS(float)
IBR_INSTANTIATE_OPS(double)

}  // namespace ibr
