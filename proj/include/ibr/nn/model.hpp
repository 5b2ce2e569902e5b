#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "ibr/core/ops.hpp"
#include "ibr/nn/entropy.hpp"
#include "ibr/nn/spec.hpp"

namespace ibr {

/// Ordered named parameter tensors.
template <typename S>
class ParameterSet {
 public:
  void add(std::string name, Tensor<S> value);
  Index find(std::string_view name) const;
  bool contains(std::string_view name) const { return find(name) >= 0; }
  const Tensor<S>& at(std::string_view name) const;
  Tensor<S>& at(std::string_view name);

  std::size_t size() const { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  const Tensor<S>& value(std::size_t i) const { return values_[i]; }
  Tensor<S>& value(std::size_t i) { return values_[i]; }
  // Total scalar count.
  Index count() const;
  // Scalar count over parameters whose name starts with `prefix`.
  Index count(std::string_view prefix) const;

  template <typename Other>
  ParameterSet<Other> cast() const {
    ParameterSet<Other> out;
    for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], values_[i].template cast<Other>());
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<S>> values_;
};

enum class LayerKind { stem, block, head_fc, bottleneck, classifier, encoder, quantizer, decoder };

struct Layer {
  LayerKind kind;
  std::string name;
  Index in_channels = 0;
  Index out_channels = 0;
  Index stride = 1;
};

template <typename S>
struct Model {
  NetworkSpec spec;
  ParameterSet<S> params;
  std::vector<Layer> layers;
  // First layer of the deep portion. Base: after the first residual stage. SVBI: after the decoder.
  Index split_index = 0;

  template <typename Other>
  Model<Other> cast() const {
    return Model<Other>{spec, params.template cast<Other>(), layers, split_index};
  }
};

/// Parameter tensors placed on a tape, either as variables (trainable) or constants.
template <typename S>
class Binding {
 public:
  using Predicate = std::function<bool(const std::string&)>;
  Binding(const ParameterSet<S>& params, Tape<S>& tape, const Predicate& trainable);
  // Binds every parameter as a constant.
  Binding(const ParameterSet<S>& params, Tape<S>& tape);

  const Var<S>& operator[](std::string_view name) const;
  const Var<S>& var(std::size_t i) const { return vars_[i]; }
  std::size_t size() const { return vars_.size(); }

 private:
  const ParameterSet<S>* params_;
  std::vector<Var<S>> vars_;
};

/// Per-call forward options and the intermediate quantities the objectives need.
template <typename S>
struct ForwardState {
  Mode mode = Mode::eval;
  std::mt19937_64* rng = nullptr;  // required in train mode for bottleneck noise

  Var<S> mu, sigma;        // DVIB posterior
  Var<S> latent;           // SVBI encoder output before quantization
  Var<S> rate_bits;        // SVBI per-element bits
  Var<S> head_output;      // SVBI decoder output
  LatentCode code;         // SVBI eval-mode coded latent
};

// He-scaled deterministic initialization. SVBI models get a fresh codec and a randomly
// initialized tail; copy a trained teacher's tail with attach_teacher_tail.
template <typename S>
Model<S> build_model(const NetworkSpec& spec, std::uint64_t seed);

// Copies every parameter of `teacher` whose name also exists in `student`.
template <typename S>
void attach_teacher_tail(Model<S>& student, const Model<S>& teacher);

// Applies layers [first, last) to x.
template <typename S>
Var<S> run_layers(const Model<S>& model, const Binding<S>& bound, Var<S> x, ForwardState<S>& state, Index first,
                  Index last);

template <typename S>
Var<S> forward(const Model<S>& model, const Binding<S>& bound, const Var<S>& x, ForwardState<S>& state) {
  return run_layers(model, bound, x, state, 0, static_cast<Index>(model.layers.size()));
}

/// Shallow/deep partition of a model's layer sequence.
struct SplitBackbone {
  Index split_index;
  Index num_layers;
};

template <typename S>
SplitBackbone split_backbone(const Model<S>& model, Index split_index);
template <typename S>
SplitBackbone split_backbone(const Model<S>& model) {
  return split_backbone(model, model.split_index);
}

template <typename S>
Var<S> run_head(const Model<S>& m, const SplitBackbone& s, const Binding<S>& b, const Var<S>& x, ForwardState<S>& st) {
  return run_layers(m, b, x, st, 0, s.split_index);
}
template <typename S>
Var<S> run_tail(const Model<S>& m, const SplitBackbone& s, const Binding<S>& b, const Var<S>& h, ForwardState<S>& st) {
  return run_layers(m, b, h, st, s.split_index, s.num_layers);
}

// Eval-mode logits in chunks of `batch` samples.
template <typename S>
Tensor<S> predict_logits(const Model<S>& model, const Tensor<S>& x, Index batch = 256);
template <typename S>
std::vector<int> predict(const Model<S>& model, const Tensor<S>& x, Index batch = 256);

std::vector<int> argmax_rows(const Array<double>& values, Index rows, Index cols);
template <typename S>
std::vector<int> argmax_rows(const Tensor<S>& logits) {
  return argmax_rows(logits.data.template cast<double>().eval(), logits.shape[0], logits.shape[1]);
}

// Parameters of the SVBI encoder, compared against the Base backbone size.
template <typename S>
Index encoder_parameter_count(const Model<S>& model) {
  return model.params.count("encoder.");
}

}  // namespace ibr
