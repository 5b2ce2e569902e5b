#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "ibr/core/ops.hpp"
#include "ibr/nn/spec.hpp"

namespace ibr {

// Learned factorized prior: per channel, CDF(x) = sigmoid(g(x)) with g a monotone
// piecewise-linear spline over fixed breakpoints. Knot heights are
// h0 = offset[c], h(k+1) = h(k) + softplus(raw[c,k]); g extrapolates linearly past the ends.
inline constexpr int kSplineSegments = 8;
inline constexpr double kSplineLow = -8.0;
inline constexpr double kSplineHigh = 8.0;
inline constexpr int kSymbolMin = -16;
inline constexpr int kSymbolMax = 16;
inline constexpr double kLikelihoodFloor = 1e-9;
inline constexpr int kFrequencyBits = 16;

// Parameters initialised so that g(x) = x (logistic prior of unit scale).
template <typename S>
Tensor<S> spline_offset_init(Index channels);
template <typename S>
Tensor<S> spline_raw_init(Index channels);

// CDF of channel c evaluated in double precision.
template <typename S>
double spline_cdf(const Tensor<S>& offset, const Tensor<S>& raw, Index channel, double x);

// Differentiable -log2 of CDF(y + 1/2) - CDF(y - 1/2), elementwise, floored at kLikelihoodFloor.
// y has its channel on axis 1; offset [C], raw [C, kSplineSegments].
template <typename S>
Var<S> spline_bits(const Var<S>& y, const Var<S>& offset, const Var<S>& raw);

/// Per-channel discrete pmf over [symbol_min, symbol_max], quantized to integer
/// frequencies summing to 2^kFrequencyBits with every symbol at least 1.
struct DiscreteEntropyModel {
  int symbol_min = 0;
  int symbol_max = 0;
  std::vector<std::vector<std::uint32_t>> freq;  // [channel][symbol - symbol_min]
  std::vector<std::vector<std::uint32_t>> cum;   // [channel][k] = sum of freq below k

  Index channels() const { return static_cast<Index>(freq.size()); }
  int support() const { return symbol_max - symbol_min + 1; }
  double probability(Index channel, int symbol) const;
};

DiscreteEntropyModel from_pmf(const std::vector<std::vector<double>>& pmf, int symbol_min);
DiscreteEntropyModel uniform_model(Index channels, int symbol_min, int symbol_max);
// Edge symbols absorb the tails of the continuous CDF.
template <typename S>
DiscreteEntropyModel tabulate(const Tensor<S>& offset, const Tensor<S>& raw);

struct LatentCode {
  Shape shape;  // rank 0 for an empty code
  std::vector<int> symbols;
  std::vector<double> likelihoods;
  double rate_bits = 0;
  // rate_bits / (samples * pixels per sample)
  double bpp = 0;
};

// Elements per channel plane: the product of the dimensions after axis 1 (1 for rank < 3).
// Element i belongs to channel (i / plane) % channels.
Index channel_plane(const Shape& shape);

// Eval-mode coding of integer symbols. Throws ZeroLikelihood for out-of-support symbols.
LatentCode code_symbols(const Shape& shape, std::vector<int> symbols, const DiscreteEntropyModel& model,
                        Index pixels_per_sample);

// Eval mode against an explicit table: rounds to the nearest integer and codes.
template <typename S>
LatentCode quantize_and_rate(const Tensor<S>& latent, const DiscreteEntropyModel& model, Index pixels_per_sample);

template <typename S>
struct QuantizedLatent {
  Var<S> values;  // noisy (train) or rounded with straight-through gradient (eval)
  Var<S> bits;    // per-element bits; constant in eval mode
  LatentCode code;
};

// Train: adds U[-1/2, 1/2) noise, differentiable spline rate. Eval: rounds, rate from
// the tabulated model the coder uses.
template <typename S>
QuantizedLatent<S> quantize_and_rate(const Var<S>& latent, const Var<S>& offset, const Var<S>& raw, Mode mode,
                                     std::mt19937_64* rng, Index pixels_per_sample);

// Range coder with a 64-bit range and carry propagation. The stream holds no header;
// the decoder is told the shape.
std::vector<std::uint8_t> entropy_encode(const LatentCode& code, const DiscreteEntropyModel& model);
std::vector<int> entropy_decode(std::span<const std::uint8_t> stream, const DiscreteEntropyModel& model,
                                Index count, Index plane);

}  // namespace ibr
