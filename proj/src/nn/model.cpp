#include "ibr/nn/model.hpp"

#include <cmath>

#include "ibr/nn/bottleneck.hpp"

namespace ibr {

namespace {

constexpr Index kStageWidth[3] = {8, 16, 32};
constexpr Index kFcWidth = 384;
constexpr Index kEncoderWidth = 16;
constexpr Index kDecoderWidth = 32;
constexpr double kLatentBound = 16.0;
// Initial bias of the raw sigma parameters: the posterior starts nearly deterministic.
constexpr double kSigmaRawInit = -5.0;

Index conv_out(Index size, Index kernel, Index stride, Index pad) { return (size + 2 * pad - kernel) / stride + 1; }

template <typename S>
class Initializer {
 public:
  Initializer(ParameterSet<S>& params, std::uint64_t seed) : params_(params), rng_(seed) {}

  void normal(const std::string& name, const Shape& shape, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Tensor<S> t = Tensor<S>::zeros(shape);
    for (Index i = 0; i < t.numel(); ++i) t.data[i] = S(dist(rng_));
    params_.add(name, std::move(t));
  }
  void constant(const std::string& name, const Shape& shape, double value) {
    params_.add(name, Tensor<S>::full(shape, S(value)));
  }
  void conv(const std::string& name, Index out, Index in, Index k, double gain = 1.0) {
    normal(name + ".w", Shape{out, in, k, k}, gain * std::sqrt(2.0 / static_cast<double>(in * k * k)));
    constant(name + ".b", Shape{out}, 0.0);
  }
  // Transposed-conv weights are [in, out, k, k]; fan-in per output is in*k*k/stride^2.
  void conv_t(const std::string& name, Index in, Index out, Index k, Index stride) {
    normal(name + ".w", Shape{in, out, k, k},
           std::sqrt(2.0 * static_cast<double>(stride * stride) / static_cast<double>(in * k * k)));
    constant(name + ".b", Shape{out}, 0.0);
  }
  void dense(const std::string& name, Index out, Index in, double gain = 2.0) {
    normal(name + ".w", Shape{out, in}, std::sqrt(gain / static_cast<double>(in)));
    constant(name + ".b", Shape{out}, 0.0);
  }

 private:
  ParameterSet<S>& params_;
  std::mt19937_64 rng_;
};

struct Geometry {
  Index stem_h, stem_w, flat;
};

Geometry geometry(const NetworkSpec& spec) {
  Index h = conv_out(spec.height, 3, 2, 1), w = conv_out(spec.width, 3, 2, 1);
  const Index sh = h, sw = w;
  for (int stage = 1; stage < 3; ++stage) {
    h = conv_out(h, 3, 2, 1);
    w = conv_out(w, 3, 2, 1);
  }
  return {sh, sw, kStageWidth[2] * h * w};
}

// Layers of the Base trunk from the first residual stage onward, plus their parameters.
template <typename S>
void build_trunk(const NetworkSpec& spec, std::vector<Layer>& layers, Initializer<S>& init) {
  const auto blocks = blocks_per_stage(spec.tier);
  const double branch_gain = 1.0 / std::sqrt(static_cast<double>(blocks[0] + blocks[1] + blocks[2]));
  Index in = kStageWidth[0];
  for (int stage = 0; stage < 3; ++stage) {
    for (int b = 0; b < blocks[stage]; ++b) {
      const Index out = kStageWidth[stage];
      const Index stride = (stage > 0 && b == 0) ? 2 : 1;
      const std::string name = "stage" + std::to_string(stage + 1) + ".block" + std::to_string(b);
      layers.push_back({LayerKind::block, name, in, out, stride});
      init.conv(name + ".conv1", out, in, 3);
      init.conv(name + ".conv2", out, out, 3, branch_gain);
      if (stride != 1 || in != out) init.conv(name + ".proj", out, in, 1);
      in = out;
    }
  }
}

template <typename S>
Var<S> conv(const Binding<S>& p, const std::string& name, const Var<S>& x, Index stride, Index pad) {
  return conv2d(x, p[name + ".w"], p[name + ".b"], {stride, pad});
}

template <typename S>
Var<S> conv_t(const Binding<S>& p, const std::string& name, const Var<S>& x, Index stride, Index pad) {
  return conv_transpose2d(x, p[name + ".w"], p[name + ".b"], {stride, pad, 0});
}

template <typename S>
Var<S> normalize_input(const NetworkSpec& spec, const Var<S>& x) {
  const Index c = spec.channels;
  Tensor<S> w = Tensor<S>::zeros(Shape{c, c, 1, 1});
  Tensor<S> b = Tensor<S>::zeros(Shape{c});
  for (Index i = 0; i < c; ++i) {
    const double sd = spec.input_std[static_cast<std::size_t>(i)];
    w.data[i * c + i] = S(1.0 / sd);
    b.data[i] = S(-spec.input_mean[static_cast<std::size_t>(i)] / sd);
  }
  Tape<S>& t = *x.tape();
  return conv2d(x, t.constant(std::move(w)), t.constant(std::move(b)));
}

template <typename S>
Var<S> apply(const Model<S>& model, const Layer& layer, const Binding<S>& p, const Var<S>& x, ForwardState<S>& st) {
  const NetworkSpec& spec = model.spec;
  const std::string& n = layer.name;
  switch (layer.kind) {
    case LayerKind::stem:
      return relu(conv(p, n, normalize_input(spec, x), 2, 1));
    case LayerKind::block: {
      const Var<S> h = conv(p, n + ".conv2", relu(conv(p, n + ".conv1", x, layer.stride, 1)), 1, 1);
      const bool projected = layer.stride != 1 || layer.in_channels != layer.out_channels;
      return relu(add(h, projected ? conv(p, n + ".proj", x, layer.stride, 0) : x));
    }
    case LayerKind::head_fc: {
      const Index batch = x.shape()[0];
      return relu(linear(reshape(x, Shape{batch, x.value().numel() / batch}), p[n + ".w"], p[n + ".b"]));
    }
    case LayerKind::bottleneck: {
      const Index k = spec.latent_channels;
      const Var<S> stats = linear(x, p[n + ".w"], p[n + ".b"]);
      st.mu = slice(stats, 1, 0, k);
      st.sigma = sigma_from_raw(slice(stats, 1, k, k));
      if (st.mode == Mode::eval) return st.mu;
      if (!st.rng) throw Error(ErrorCode::config_error, "train-mode bottleneck needs a random source");
      std::normal_distribution<double> dist(0.0, 1.0);
      Tensor<S> noise = Tensor<S>::zeros(st.mu.shape());
      for (Index i = 0; i < noise.numel(); ++i) noise.data[i] = S(dist(*st.rng));
      return reparam_sample(st.mu, st.sigma, noise);
    }
    case LayerKind::classifier:
      return linear(x, p[n + ".w"], p[n + ".b"]);
    case LayerKind::encoder: {
      Var<S> h = relu(conv(p, n + ".conv1", normalize_input(spec, x), 2, 1));
      h = relu(conv(p, n + ".conv2", h, 1, 1));
      h = conv(p, n + ".conv3", h, 2, 1);
      st.latent = scale(tanh(scale(h, S(1.0 / kLatentBound))), S(kLatentBound));
      return st.latent;
    }
    case LayerKind::quantizer: {
      QuantizedLatent<S> q =
          quantize_and_rate(x, p["entropy.offset"], p["entropy.raw"], st.mode, st.rng, spec.pixels());
      st.rate_bits = q.bits;
      st.code = std::move(q.code);
      return q.values;
    }
    case LayerKind::decoder: {
      Var<S> h = relu(conv_t(p, n + ".convt1", x, 2, 1));
      h = relu(conv(p, n + ".conv2", h, 1, 1));
      st.head_output = conv_t(p, n + ".convt3", h, 1, 1);
      return st.head_output;
    }
  }
  throw Error(ErrorCode::unsupported_shape, "unknown layer kind");
}

}  // namespace

template <typename S>
void ParameterSet<S>::add(std::string name, Tensor<S> value) {
  if (contains(name)) throw Error(ErrorCode::config_error, "duplicate parameter '" + name + "'");
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
}

template <typename S>
Index ParameterSet<S>::find(std::string_view name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return static_cast<Index>(i);
  return -1;
}

template <typename S>
const Tensor<S>& ParameterSet<S>::at(std::string_view name) const {
  const Index i = find(name);
  if (i < 0) throw Error(ErrorCode::config_error, "no parameter named '" + std::string(name) + "'");
  return values_[static_cast<std::size_t>(i)];
}

template <typename S>
Tensor<S>& ParameterSet<S>::at(std::string_view name) {
  return const_cast<Tensor<S>&>(std::as_const(*this).at(name));
}

template <typename S>
Index ParameterSet<S>::count() const {
  Index n = 0;
  for (const auto& v : values_) n += v.numel();
  return n;
}

template <typename S>
Index ParameterSet<S>::count(std::string_view prefix) const {
  Index n = 0;
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (std::string_view(names_[i]).starts_with(prefix)) n += values_[i].numel();
  return n;
}

template <typename S>
Binding<S>::Binding(const ParameterSet<S>& params, Tape<S>& tape, const Predicate& trainable) : params_(&params) {
  vars_.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    vars_.push_back(trainable && trainable(params.name(i)) ? tape.variable(params.value(i))
                                                           : tape.constant(params.value(i)));
}

template <typename S>
Binding<S>::Binding(const ParameterSet<S>& params, Tape<S>& tape) : Binding(params, tape, Predicate{}) {}

template <typename S>
const Var<S>& Binding<S>::operator[](std::string_view name) const {
  const Index i = params_->find(name);
  if (i < 0) throw Error(ErrorCode::config_error, "no parameter named '" + std::string(name) + "'");
  return vars_[static_cast<std::size_t>(i)];
}

template <typename S>
Model<S> build_model(const NetworkSpec& spec, std::uint64_t seed) {
  validate(spec);
  Model<S> m;
  m.spec = spec;
  Initializer<S> init(m.params, seed);
  const Geometry g = geometry(spec);

  if (spec.objective == Objective::SVBI) {
    const Index latent = spec.latent_channels;
    m.layers.push_back({LayerKind::encoder, "encoder", spec.channels, latent, 4});
    init.conv("encoder.conv1", kEncoderWidth, spec.channels, 3);
    init.conv("encoder.conv2", kEncoderWidth, kEncoderWidth, 3);
    init.conv("encoder.conv3", latent, kEncoderWidth, 3, 1.0 / std::sqrt(2.0));
    m.layers.push_back({LayerKind::quantizer, "quantizer", latent, latent, 1});
    m.params.add("entropy.offset", spline_offset_init<S>(latent));
    m.params.add("entropy.raw", spline_raw_init<S>(latent));
    m.layers.push_back({LayerKind::decoder, "decoder", latent, kStageWidth[0], 1});
    init.conv_t("decoder.convt1", latent, kDecoderWidth, 4, 2);
    init.conv("decoder.conv2", kDecoderWidth, kDecoderWidth, 3);
    init.conv_t("decoder.convt3", kDecoderWidth, kStageWidth[0], 3, 1);
    m.split_index = 3;

    // Tail: the Base layers after the first stage; the head stage parameters are skipped.
    std::vector<Layer> trunk;
    ParameterSet<S> scratch;
    Initializer<S> trunk_init(scratch, seed ^ 0x5eedULL);
    build_trunk(spec, trunk, trunk_init);
    const Index first_tail = blocks_per_stage(spec.tier)[0];
    for (Index i = first_tail; i < static_cast<Index>(trunk.size()); ++i) m.layers.push_back(trunk[static_cast<std::size_t>(i)]);
    for (std::size_t i = 0; i < scratch.size(); ++i)
      if (!scratch.name(i).starts_with("stage1.")) m.params.add(scratch.name(i), scratch.value(i));
  } else {
    m.layers.push_back({LayerKind::stem, "stem", spec.channels, kStageWidth[0], 2});
    init.conv("stem", kStageWidth[0], spec.channels, 3);
    build_trunk(spec, m.layers, init);
    m.split_index = 1 + blocks_per_stage(spec.tier)[0];
  }

  m.layers.push_back({LayerKind::head_fc, "fc", g.flat, kFcWidth, 1});
  init.dense("fc", kFcWidth, g.flat);
  Index features = kFcWidth;
  if (spec.objective == Objective::DVIB) {
    const Index k = spec.latent_channels;
    m.layers.push_back({LayerKind::bottleneck, "bottleneck", kFcWidth, k, 1});
    init.dense("bottleneck", 2 * k, kFcWidth, 1.0);
    auto& b = m.params.at("bottleneck.b");
    b.data.tail(k).setConstant(S(kSigmaRawInit));
    features = k;
  }
  m.layers.push_back({LayerKind::classifier, "classifier", features, spec.num_classes, 1});
  init.dense("classifier", spec.num_classes, features, 1.0);
  return m;
}

template <typename S>
void attach_teacher_tail(Model<S>& student, const Model<S>& teacher) {
  if (teacher.spec.objective != Objective::Base) throw Error(ErrorCode::teacher_missing, "teacher must be a Base model");
  for (std::size_t i = 0; i < student.params.size(); ++i) {
    const std::string& name = student.params.name(i);
    if (name.starts_with("encoder.") || name.starts_with("decoder.") || name.starts_with("entropy.")) continue;
    const Index j = teacher.params.find(name);
    if (j < 0) throw Error(ErrorCode::teacher_missing, "teacher lacks parameter '" + name + "'");
    const Tensor<S>& src = teacher.params.value(static_cast<std::size_t>(j));
    if (src.shape != student.params.value(i).shape)
      throw Error(ErrorCode::shape_mismatch, "teacher parameter '" + name + "' has shape " + src.shape.to_string());
    student.params.value(i) = src;
  }
}

template <typename S>
Var<S> run_layers(const Model<S>& model, const Binding<S>& bound, Var<S> x, ForwardState<S>& state, Index first,
                  Index last) {
  const Index n = static_cast<Index>(model.layers.size());
  if (first < 0 || last > n || first > last)
    throw Error(ErrorCode::shape_mismatch, "layer range [" + std::to_string(first) + ", " + std::to_string(last) + ")");
  for (Index i = first; i < last; ++i) x = apply(model, model.layers[static_cast<std::size_t>(i)], bound, x, state);
  return x;
}

template <typename S>
SplitBackbone split_backbone(const Model<S>& model, Index split_index) {
  const Index n = static_cast<Index>(model.layers.size());
  if (split_index < 0 || split_index > n)
    throw Error(ErrorCode::shape_mismatch, "split index " + std::to_string(split_index) + " outside [0, " + std::to_string(n) + "]");
  return {split_index, n};
}

template <typename S>
Tensor<S> predict_logits(const Model<S>& model, const Tensor<S>& x, Index batch) {
  const Index n = x.shape[0];
  Tensor<S> out = Tensor<S>::zeros(Shape{n, model.spec.num_classes});
  for (Index start = 0; start < n; start += batch) {
    const Index count = std::min(batch, n - start);
    Tape<S> tape;
    const Binding<S> bound(model.params, tape);
    ForwardState<S> st;
    const Var<S> logits = forward(model, bound, tape.constant(x.rows(start, count)), st);
    out.data.segment(start * model.spec.num_classes, count * model.spec.num_classes) = logits.value().data;
  }
  return out;
}

template <typename S>
std::vector<int> predict(const Model<S>& model, const Tensor<S>& x, Index batch) {
  return argmax_rows(predict_logits(model, x, batch));
}

std::vector<int> argmax_rows(const Array<double>& values, Index rows, Index cols) {
  std::vector<int> out(static_cast<std::size_t>(rows));
  for (Index r = 0; r < rows; ++r) {
    Index best = 0;
    for (Index c = 1; c < cols; ++c)
      if (values[r * cols + c] > values[r * cols + best]) best = c;
    out[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

#define IBR_INSTANTIATE(S)                                                                                \
  template class ParameterSet<S>;                                                                        \
  template class Binding<S>;                                                                             \
  template Model<S> build_model<S>(const NetworkSpec&, std::uint64_t);                                   \
  template void attach_teacher_tail(Model<S>&, const Model<S>&);                                         \
  template Var<S> run_layers(const Model<S>&, const Binding<S>&, Var<S>, ForwardState<S>&, Index, Index); \
  template SplitBackbone split_backbone(const Model<S>&, Index);                                         \
  template Tensor<S> predict_logits(const Model<S>&, const Tensor<S>&, Index);                           \
  template std::vector<int> predict(const Model<S>&, const Tensor<S>&, Index);
IBR_INSTANTIATE(float)
IBR_INSTANTIATE(double)
#undef IBR_INSTANTIATE

}  // namespace ibr
