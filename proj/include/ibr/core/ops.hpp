#pragma once

#include <vector>

#include "ibr/core/tape.hpp"

// Differentiable primitives. Every op records onto the tape of its first input, checks its
// output for NaN/Inf (NonFinite), and validates shapes (ShapeMismatch).
namespace ibr {

struct Conv2dParams {
  Index stride = 1;
  Index padding = 0;
};

struct ConvTranspose2dParams {
  Index stride = 1;
  Index padding = 0;
  Index output_padding = 0;
};

template <typename S> Var<S> add(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> sub(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> mul(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> scale(const Var<S>& a, S factor);
template <typename S> Var<S> add_scalar(const Var<S>& a, S offset);

// [M,K] x [K,N] -> [M,N]
template <typename S> Var<S> matmul(const Var<S>& a, const Var<S>& b);
// x [N,in], weight [out,in], bias [out] (bias may be an invalid Var) -> [N,out]
template <typename S> Var<S> linear(const Var<S>& x, const Var<S>& weight, const Var<S>& bias);
// x [N,C,H,W], weight [F,C,kh,kw], bias [F] or invalid -> [N,F,Ho,Wo]. im2col lowering.
template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& weight, const Var<S>& bias, Conv2dParams p = {});
// x [N,Cin,H,W], weight [Cin,Cout,kh,kw], bias [Cout] or invalid. Adjoint of conv2d.
template <typename S>
Var<S> conv_transpose2d(const Var<S>& x, const Var<S>& weight, const Var<S>& bias,
                        ConvTranspose2dParams p = {});

// Subgradient 0 is used at the kinks of relu and abs.
template <typename S> Var<S> relu(const Var<S>& a);
template <typename S> Var<S> softplus(const Var<S>& a);
template <typename S> Var<S> tanh(const Var<S>& a);
template <typename S> Var<S> sigmoid(const Var<S>& a);
template <typename S> Var<S> exp(const Var<S>& a);
template <typename S> Var<S> log(const Var<S>& a);
template <typename S> Var<S> square(const Var<S>& a);
template <typename S> Var<S> abs(const Var<S>& a);
// Gradient is taken as 0 where the input is 0.
template <typename S> Var<S> sqrt(const Var<S>& a);

template <typename S> Var<S> sum(const Var<S>& a);
template <typename S> Var<S> mean(const Var<S>& a);
// [N,...] -> [N]
template <typename S> Var<S> sum_per_sample(const Var<S>& a);

template <typename S> Var<S> reshape(const Var<S>& a, const Shape& shape);
template <typename S> Var<S> max_pool2d(const Var<S>& a, Index kernel, Index stride);
template <typename S> Var<S> slice(const Var<S>& a, Index axis, Index start, Index length);
template <typename S> Var<S> concat(const std::vector<Var<S>>& parts, Index axis);

// Row-wise over [N,K], via log-sum-exp.
template <typename S> Var<S> log_softmax(const Var<S>& logits);
template <typename S> Var<S> softmax(const Var<S>& logits);
// out[n] = a[n, index[n]]
template <typename S> Var<S> pick(const Var<S>& a, const std::vector<int>& index);
// out[n] = max_{j != exclude[n]} a[n, j]; gradient goes to the (first) arg max.
template <typename S> Var<S> max_excluding(const Var<S>& a, const std::vector<int>& exclude);
// Gradient passes where lo <= a <= hi.
template <typename S> Var<S> clamp(const Var<S>& a, S lo, S hi);
// Nearest-integer rounding with identity (straight-through) gradient.
template <typename S> Var<S> round_ste(const Var<S>& a);

template <typename S> Var<S> operator+(const Var<S>& a, const Var<S>& b) { return add(a, b); }
template <typename S> Var<S> operator-(const Var<S>& a, const Var<S>& b) { return sub(a, b); }
template <typename S> Var<S> operator*(const Var<S>& a, const Var<S>& b) { return mul(a, b); }
template <typename S> Var<S> operator*(const Var<S>& a, S s) { return scale(a, s); }
template <typename S> Var<S> operator*(S s, const Var<S>& a) { return scale(a, s); }
template <typename S> Var<S> operator-(const Var<S>& a) { return scale(a, S(-1)); }

/// Parameters for the generic op dispatcher.
struct OpParams {
  double scalar = 0;
  double lo = 0;
  double hi = 0;
  Index stride = 1;
  Index padding = 0;
  Index output_padding = 0;
  Index kernel = 2;
  Index axis = 0;
  Index start = 0;
  Index length = 1;
  Shape shape;
  std::vector<int> index;
};

/// Records `kind` applied to `inputs`. Inputs must already live on `tape`.
template <typename S>
Var<S> forward(Tape<S>& tape, OpKind kind, const std::vector<Var<S>>& inputs,
               const OpParams& params = {});

// Raises NonFinite if any value is NaN or Inf.
template <typename S> void check_finite(const Array<S>& values, std::string_view where);

// im2col / col2im for one batch. Row r = (c*kh + ki)*kw + kj, column q = (n*Ho + oh)*Wo + ow.
struct ConvGeometry {
  Index n, c, h, w, kh, kw, stride, padding, ho, wo;
  Index rows() const { return c * kh * kw; }
  Index cols() const { return n * ho * wo; }
};
template <typename S> void im2col(const S* image, const ConvGeometry& g, S* col);
template <typename S> void col2im(const S* col, const ConvGeometry& g, S* image);

}  // namespace ibr
