#include "ibr/nn/entropy.hpp"

#include <algorithm>
#include <cmath>

namespace ibr {

namespace {

constexpr double kStep = (kSplineHigh - kSplineLow) / kSplineSegments;
constexpr std::uint32_t kTotal = 1u << kFrequencyBits;
constexpr double kLn2 = 0.69314718055994530942;

double softplus_d(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid_d(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct Knots {
  double h[kSplineSegments + 1];
};

template <typename S>
Knots knots_of(const S* offset, const S* raw_row) {
  Knots k;
  k.h[0] = static_cast<double>(*offset);
  for (int j = 0; j < kSplineSegments; ++j) k.h[j + 1] = k.h[j] + softplus_d(static_cast<double>(raw_row[j]));
  return k;
}

struct SplinePoint {
  double g;
  int segment;
  double t;  // position within the segment; outside [0,1] when extrapolating
};

SplinePoint eval_spline(const Knots& k, double x) {
  const double pos = (x - kSplineLow) / kStep;
  const int seg = std::clamp(static_cast<int>(std::floor(pos)), 0, kSplineSegments - 1);
  const double t = pos - seg;
  return {k.h[seg] + t * (k.h[seg + 1] - k.h[seg]), seg, t};
}

// CDF(u) - CDF(l) with g values gu >= gl, computed on the side of the sigmoid with more precision.
double interval_mass(double gu, double gl) {
  if (gu + gl > 0) return sigmoid_d(-gl) - sigmoid_d(-gu);
  return sigmoid_d(gu) - sigmoid_d(gl);
}

}  // namespace

template <typename S>
Tensor<S> spline_offset_init(Index channels) {
  return Tensor<S>::full(Shape{channels}, S(kSplineLow));
}

template <typename S>
Tensor<S> spline_raw_init(Index channels) {
  // softplus(raw) == kStep so that g(x) = x.
  return Tensor<S>::full(Shape{channels, kSplineSegments}, S(std::log(std::expm1(kStep))));
}

template <typename S>
double spline_cdf(const Tensor<S>& offset, const Tensor<S>& raw, Index channel, double x) {
  const Knots k = knots_of(offset.data.data() + channel, raw.data.data() + channel * kSplineSegments);
  return sigmoid_d(eval_spline(k, x).g);
}

template <typename S>
Var<S> spline_bits(const Var<S>& y, const Var<S>& offset, const Var<S>& raw) {
  if (!y.valid() || y.tape() != offset.tape() || y.tape() != raw.tape())
    throw Error(ErrorCode::detached_node, "spline_bits: operands live on different tapes");
  const Index channels = offset.shape().numel();
  if (y.shape().rank() < 2 || y.shape()[1] != channels || raw.shape() != Shape{channels, kSplineSegments})
    throw Error(ErrorCode::shape_mismatch, "spline_bits: latent " + y.shape().to_string() + ", offset " +
                                               offset.shape().to_string() + ", raw " + raw.shape().to_string());
  const Index plane = channel_plane(y.shape());
  const auto& yv = y.value().data;
  std::vector<Knots> knots(static_cast<std::size_t>(channels));
  for (Index c = 0; c < channels; ++c)
    knots[static_cast<std::size_t>(c)] = knots_of(offset.value().data.data() + c, raw.value().data.data() + c * kSplineSegments);

  Array<S> bits(yv.size());
  for (Index i = 0; i < yv.size(); ++i) {
    const Knots& k = knots[static_cast<std::size_t>((i / plane) % channels)];
    const double v = static_cast<double>(yv[i]);
    const double p = interval_mass(eval_spline(k, v + 0.5).g, eval_spline(k, v - 0.5).g);
    bits[i] = S(-std::log2(std::max(p, kLikelihoodFloor)));
  }
  check_finite(bits, "spline_bits");

  Tape<S>* tp = y.tape();
  const NodeId iy = y.id(), io = offset.id(), ir = raw.id();
  return tp->record(
      OpKind::custom, {iy, io, ir}, Tensor<S>(y.shape(), std::move(bits)),
      [tp, iy, io, ir, channels, plane](const Array<S>& grad, GradSink<S>& sink) {
        const auto& yv = tp->value(iy).data;
        const auto& ov = tp->value(io).data;
        const auto& rv = tp->value(ir).data;
        std::vector<Knots> knots(static_cast<std::size_t>(channels));
        for (Index c = 0; c < channels; ++c)
          knots[static_cast<std::size_t>(c)] = knots_of(ov.data() + c, rv.data() + c * kSplineSegments);
        // d loss / d knot height, per channel.
        std::vector<double> dh(static_cast<std::size_t>(channels * (kSplineSegments + 1)), 0.0);
        for (Index i = 0; i < yv.size(); ++i) {
          const Index c = (i / plane) % channels;
          const Knots& k = knots[static_cast<std::size_t>(c)];
          const double v = static_cast<double>(yv[i]);
          const SplinePoint u = eval_spline(k, v + 0.5), l = eval_spline(k, v - 0.5);
          const double p = interval_mass(u.g, l.g);
          if (p < kLikelihoodFloor) continue;
          const double dbits_dp = -static_cast<double>(grad[i]) / (p * kLn2);
          const double du = dbits_dp * sigmoid_d(u.g) * sigmoid_d(-u.g);
          const double dl = -dbits_dp * sigmoid_d(l.g) * sigmoid_d(-l.g);
          if (sink.needs(0)) {
            const double su = (k.h[u.segment + 1] - k.h[u.segment]) / kStep;
            const double sl = (k.h[l.segment + 1] - k.h[l.segment]) / kStep;
            sink.at(0)[i] += S(du * su + dl * sl);
          }
          double* row = dh.data() + c * (kSplineSegments + 1);
          row[u.segment] += du * (1 - u.t);
          row[u.segment + 1] += du * u.t;
          row[l.segment] += dl * (1 - l.t);
          row[l.segment + 1] += dl * l.t;
        }
        for (Index c = 0; c < channels; ++c) {
          const double* row = dh.data() + c * (kSplineSegments + 1);
          if (sink.needs(1)) {
            double total = 0;
            for (int j = 0; j <= kSplineSegments; ++j) total += row[j];
            sink.at(1)[c] += S(total);
          }
          if (sink.needs(2)) {
            // h(k) depends on raw[j] for every j < k.
            double above = 0;
            for (int j = kSplineSegments - 1; j >= 0; --j) {
              above += row[j + 1];
              sink.at(2)[c * kSplineSegments + j] += S(above * sigmoid_d(static_cast<double>(rv[c * kSplineSegments + j])));
            }
          }
        }
      });
}

double DiscreteEntropyModel::probability(Index channel, int symbol) const {
  if (symbol < symbol_min || symbol > symbol_max) return 0.0;
  return static_cast<double>(freq[static_cast<std::size_t>(channel)][static_cast<std::size_t>(symbol - symbol_min)]) /
         kTotal;
}

DiscreteEntropyModel from_pmf(const std::vector<std::vector<double>>& pmf, int symbol_min) {
  if (pmf.empty() || pmf.front().empty())
    throw Error(ErrorCode::shape_mismatch, "from_pmf: empty probability table");
  const std::size_t k = pmf.front().size();
  if (k > kTotal / 2) throw Error(ErrorCode::shape_mismatch, "from_pmf: support too large for the coder");
  DiscreteEntropyModel m;
  m.symbol_min = symbol_min;
  m.symbol_max = symbol_min + static_cast<int>(k) - 1;
  for (const auto& row : pmf) {
    if (row.size() != k) throw Error(ErrorCode::shape_mismatch, "from_pmf: ragged probability table");
    double total = 0;
    for (double p : row) {
      if (!(p >= 0) || !std::isfinite(p)) throw Error(ErrorCode::non_finite, "from_pmf: invalid probability");
      total += p;
    }
    if (!(total > 0)) throw Error(ErrorCode::zero_likelihood, "from_pmf: all probabilities are zero");
    std::vector<std::uint32_t> f(k);
    const double spare = static_cast<double>(kTotal - k);
    std::uint32_t used = 0;
    std::size_t best = 0;
    for (std::size_t s = 0; s < k; ++s) {
      f[s] = 1 + static_cast<std::uint32_t>(std::floor(row[s] / total * spare));
      used += f[s];
      if (row[s] > row[best]) best = s;
    }
    f[best] += kTotal - used;
    std::vector<std::uint32_t> c(k + 1, 0);
    for (std::size_t s = 0; s < k; ++s) c[s + 1] = c[s] + f[s];
    m.freq.push_back(std::move(f));
    m.cum.push_back(std::move(c));
  }
  return m;
}

DiscreteEntropyModel uniform_model(Index channels, int symbol_min, int symbol_max) {
  const auto k = static_cast<std::size_t>(symbol_max - symbol_min + 1);
  return from_pmf(std::vector<std::vector<double>>(static_cast<std::size_t>(channels), std::vector<double>(k, 1.0)),
                  symbol_min);
}

template <typename S>
DiscreteEntropyModel tabulate(const Tensor<S>& offset, const Tensor<S>& raw) {
  const Index channels = offset.numel();
  std::vector<std::vector<double>> pmf(static_cast<std::size_t>(channels));
  for (Index c = 0; c < channels; ++c) {
    const Knots k = knots_of(offset.data.data() + c, raw.data.data() + c * kSplineSegments);
    auto& row = pmf[static_cast<std::size_t>(c)];
    for (int s = kSymbolMin; s <= kSymbolMax; ++s) {
      const double gu = eval_spline(k, s + 0.5).g, gl = eval_spline(k, s - 0.5).g;
      if (s == kSymbolMin)
        row.push_back(sigmoid_d(gu));
      else if (s == kSymbolMax)
        row.push_back(sigmoid_d(-gl));
      else
        row.push_back(interval_mass(gu, gl));
    }
  }
  return from_pmf(pmf, kSymbolMin);
}

Index channel_plane(const Shape& shape) {
  Index plane = 1;
  for (Index i = 2; i < shape.rank(); ++i) plane *= shape[i];
  return plane;
}

LatentCode code_symbols(const Shape& shape, std::vector<int> symbols, const DiscreteEntropyModel& model,
                        Index pixels_per_sample) {
  LatentCode code;
  code.shape = shape;
  const Index plane = channel_plane(shape);
  const Index channels = model.channels();
  code.likelihoods.resize(symbols.size());
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    const Index c = (static_cast<Index>(i) / plane) % channels;
    const double p = model.probability(c, symbols[i]);
    if (p <= 0)
      throw Error(ErrorCode::zero_likelihood, "symbol " + std::to_string(symbols[i]) + " is outside [" +
                                                  std::to_string(model.symbol_min) + ", " +
                                                  std::to_string(model.symbol_max) + "]");
    code.likelihoods[i] = p;
    code.rate_bits -= std::log2(p);
  }
  code.symbols = std::move(symbols);
  const Index samples = shape.rank() >= 2 ? shape[0] : 1;
  code.bpp = code.symbols.empty() ? 0.0 : code.rate_bits / static_cast<double>(samples * pixels_per_sample);
  return code;
}

template <typename S>
LatentCode quantize_and_rate(const Tensor<S>& latent, const DiscreteEntropyModel& model, Index pixels_per_sample) {
  std::vector<int> symbols(static_cast<std::size_t>(latent.numel()));
  for (Index i = 0; i < latent.numel(); ++i) symbols[static_cast<std::size_t>(i)] = static_cast<int>(std::lround(latent.data[i]));
  return code_symbols(latent.shape, std::move(symbols), model, pixels_per_sample);
}

template <typename S>
QuantizedLatent<S> quantize_and_rate(const Var<S>& latent, const Var<S>& offset, const Var<S>& raw, Mode mode,
                                     std::mt19937_64* rng, Index pixels_per_sample) {
  QuantizedLatent<S> q;
  Tape<S>& tape = *latent.tape();
  const Shape shape = latent.shape();
  if (mode == Mode::train) {
    if (!rng) throw Error(ErrorCode::config_error, "quantize_and_rate: train mode needs a random source");
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    Tensor<S> noise = Tensor<S>::zeros(shape);
    for (Index i = 0; i < noise.numel(); ++i) noise.data[i] = S(u(*rng));
    q.values = add(latent, tape.constant(std::move(noise)));
    q.bits = spline_bits(q.values, offset, raw);
    q.code.shape = shape;
    const auto& b = q.bits.value().data;
    q.code.likelihoods.resize(static_cast<std::size_t>(b.size()));
    for (Index i = 0; i < b.size(); ++i) {
      q.code.likelihoods[static_cast<std::size_t>(i)] = std::exp2(-static_cast<double>(b[i]));
      q.code.rate_bits += static_cast<double>(b[i]);
    }
    q.code.bpp = q.code.rate_bits / static_cast<double>(shape[0] * pixels_per_sample);
    return q;
  }
  q.values = round_ste(latent);
  q.code = quantize_and_rate(q.values.value(), tabulate(offset.value(), raw.value()), pixels_per_sample);
  Tensor<S> bits = Tensor<S>::zeros(shape);
  for (Index i = 0; i < bits.numel(); ++i) bits.data[i] = S(-std::log2(q.code.likelihoods[static_cast<std::size_t>(i)]));
  q.bits = tape.constant(std::move(bits));
  return q;
}

namespace {

using u128 = unsigned __int128;
constexpr std::uint64_t kTop = std::uint64_t{1} << 56;

class RangeEncoder {
 public:
  void encode(std::uint32_t start, std::uint32_t freq) {
    const std::uint64_t r = range_ >> kFrequencyBits;
    low_ += static_cast<u128>(r) * start;
    range_ = r * freq;
    while (range_ < kTop) {
      range_ <<= 8;
      shift_low();
    }
  }

  std::vector<std::uint8_t> finish() {
    // Pick the value in [low, low + range) with the most trailing zero bits; the decoder
    // reads zeros past the end of the stream, so those bytes need not be written.
    const u128 hi = low_ + range_ - 1;
    for (int k = 64; k >= 0; --k) {
      const u128 v = (hi >> k) << k;
      if (v >= low_) {
        low_ = v;
        break;
      }
    }
    for (int i = 0; i < 9; ++i) shift_low();
    while (!out_.empty() && out_.back() == 0) out_.pop_back();
    return std::move(out_);
  }

 private:
  void shift_low() {
    const u128 carry_bit = static_cast<u128>(1) << 64;
    if (low_ < static_cast<u128>(0xFF00000000000000ull) || low_ >= carry_bit) {
      const auto carry = static_cast<std::uint8_t>(low_ >> 64);
      // The very first cached byte sits above the initial interval and is always zero.
      if (started_) out_.push_back(static_cast<std::uint8_t>(cache_ + carry));
      for (; pending_ > 0; --pending_) out_.push_back(static_cast<std::uint8_t>(0xFF + carry));
      started_ = true;
      cache_ = static_cast<std::uint8_t>(low_ >> 56);
    } else {
      ++pending_;
    }
    low_ = (low_ & (kTop - 1)) << 8;
  }

  u128 low_ = 0;
  std::uint64_t range_ = ~std::uint64_t{0};
  std::uint8_t cache_ = 0;
  std::uint64_t pending_ = 0;
  bool started_ = false;
  std::vector<std::uint8_t> out_;
};

class RangeDecoder {
 public:
  explicit RangeDecoder(std::span<const std::uint8_t> in) : in_(in) {
    for (int i = 0; i < 8; ++i) code_ = (code_ << 8) | next();
  }

  int decode(const std::vector<std::uint32_t>& cum, const std::vector<std::uint32_t>& freq) {
    const std::uint64_t r = range_ >> kFrequencyBits;
    const std::uint64_t v = code_ / r;
    if (v >= kTotal) throw Error(ErrorCode::corrupt_stream, "range decoder left the coded interval");
    const auto it = std::upper_bound(cum.begin(), cum.end(), static_cast<std::uint32_t>(v));
    const auto s = static_cast<std::size_t>(it - cum.begin()) - 1;
    code_ -= r * cum[s];
    range_ = r * freq[s];
    while (range_ < kTop) {
      code_ = (code_ << 8) | next();
      range_ <<= 8;
    }
    return static_cast<int>(s);
  }

  bool exhausted() const { return pos_ >= in_.size(); }

 private:
  std::uint64_t next() { return pos_ < in_.size() ? in_[pos_++] : (++pos_, 0); }

  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
  std::uint64_t code_ = 0;
  std::uint64_t range_ = ~std::uint64_t{0};
};

}  // namespace

std::vector<std::uint8_t> entropy_encode(const LatentCode& code, const DiscreteEntropyModel& model) {
  RangeEncoder enc;
  const Index plane = channel_plane(code.shape);
  for (std::size_t i = 0; i < code.symbols.size(); ++i) {
    const int s = code.symbols[i];
    if (s < model.symbol_min || s > model.symbol_max)
      throw Error(ErrorCode::symbol_out_of_support, "symbol " + std::to_string(s) + " at position " +
                                                        std::to_string(i) + " is outside the model support");
    const auto c = static_cast<std::size_t>((static_cast<Index>(i) / plane) % model.channels());
    const auto k = static_cast<std::size_t>(s - model.symbol_min);
    enc.encode(model.cum[c][k], model.freq[c][k]);
  }
  return enc.finish();
}

std::vector<int> entropy_decode(std::span<const std::uint8_t> stream, const DiscreteEntropyModel& model,
                                Index count, Index plane) {
  RangeDecoder dec(stream);
  std::vector<int> out(static_cast<std::size_t>(count));
  for (Index i = 0; i < count; ++i) {
    const auto c = static_cast<std::size_t>((i / plane) % model.channels());
    out[static_cast<std::size_t>(i)] = model.symbol_min + dec.decode(model.cum[c], model.freq[c]);
  }
  if (!dec.exhausted()) throw Error(ErrorCode::corrupt_stream, "trailing bytes after the last symbol");
  return out;
}

#define IBR_INSTANTIATE(S)                                                                              \
  template Tensor<S> spline_offset_init<S>(Index);                                                     \
  template Tensor<S> spline_raw_init<S>(Index);                                                        \
  template double spline_cdf(const Tensor<S>&, const Tensor<S>&, Index, double);                       \
  template Var<S> spline_bits(const Var<S>&, const Var<S>&, const Var<S>&);                            \
  template DiscreteEntropyModel tabulate(const Tensor<S>&, const Tensor<S>&);                          \
  template LatentCode quantize_and_rate(const Tensor<S>&, const DiscreteEntropyModel&, Index);         \
  template QuantizedLatent<S> quantize_and_rate(const Var<S>&, const Var<S>&, const Var<S>&, Mode, \
                                                std::mt19937_64*, Index);
IBR_INSTANTIATE(float)
IBR_INSTANTIATE(double)
#undef IBR_INSTANTIATE

}  // namespace ibr
