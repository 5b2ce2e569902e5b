#include "ibr/core/tape.hpp"

#include <algorithm>
#include <sstream>

namespace ibr {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::shape_mismatch: return "ShapeMismatch";
    case ErrorCode::non_finite: return "NonFinite";
    case ErrorCode::loss_not_scalar: return "LossNotScalar";
    case ErrorCode::detached_node: return "DetachedNode";
    case ErrorCode::tape_frozen: return "TapeFrozen";
    case ErrorCode::non_finite_evaluation: return "NonFiniteEvaluation";
    case ErrorCode::unsupported_shape: return "UnsupportedShape";
    case ErrorCode::non_positive_sigma: return "NonPositiveSigma";
    case ErrorCode::zero_likelihood: return "ZeroLikelihood";
    case ErrorCode::corrupt_stream: return "CorruptStream";
    case ErrorCode::symbol_out_of_support: return "SymbolOutOfSupport";
    case ErrorCode::label_out_of_range: return "LabelOutOfRange";
    case ErrorCode::diverged_loss: return "DivergedLoss";
    case ErrorCode::teacher_missing: return "TeacherMissing";
    case ErrorCode::non_finite_gradient: return "NonFiniteGradient";
    case ErrorCode::no_successful_iterate: return "NoSuccessfulIterate";
    case ErrorCode::jacobian_too_large: return "JacobianTooLarge";
    case ErrorCode::no_saliency_candidates: return "NoSaliencyCandidates";
    case ErrorCode::size_mismatch: return "SizeMismatch";
    case ErrorCode::bad_magic: return "BadMagic";
    case ErrorCode::truncated_file: return "TruncatedFile";
    case ErrorCode::count_mismatch: return "CountMismatch";
    case ErrorCode::record_size_mismatch: return "RecordSizeMismatch";
    case ErrorCode::empty_dataset: return "EmptyDataset";
    case ErrorCode::empty_report: return "EmptyReport";
    case ErrorCode::config_error: return "ConfigError";
    case ErrorCode::io_error: return "IoError";
    case ErrorCode::stage_failure: return "StageFailure";
    case ErrorCode::checkpoint_format: return "CheckpointFormat";
  }
  return "Unknown";
}

std::string_view to_string(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::add_scalar: return "add_scalar";
    case OpKind::matmul: return "matmul";
    case OpKind::linear: return "linear";
    case OpKind::conv2d: return "conv2d";
    case OpKind::conv_transpose2d: return "conv_transpose2d";
    case OpKind::relu: return "relu";
    case OpKind::softplus: return "softplus";
    case OpKind::tanh: return "tanh";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::square: return "square";
    case OpKind::abs: return "abs";
    case OpKind::sqrt: return "sqrt";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::sum_per_sample: return "sum_per_sample";
    case OpKind::reshape: return "reshape";
    case OpKind::max_pool2d: return "max_pool2d";
    case OpKind::slice: return "slice";
    case OpKind::concat: return "concat";
    case OpKind::log_softmax: return "log_softmax";
    case OpKind::softmax: return "softmax";
    case OpKind::pick: return "pick";
    case OpKind::max_excluding: return "max_excluding";
    case OpKind::clamp: return "clamp";
    case OpKind::round_ste: return "round_ste";
    case OpKind::custom: return "custom";
  }
  return "unknown";
}

std::string Shape::to_string() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims_.size(); ++i) os << (i ? "," : "") << dims_[i];
  os << ']';
  return os.str();
}

template <typename Scalar>
Tensor<Scalar> stack(const std::vector<Tensor<Scalar>>& items) {
  if (items.empty()) throw Error(ErrorCode::shape_mismatch, "stack of zero tensors");
  const Shape& s = items.front().shape;
  std::vector<Index> dims{static_cast<Index>(items.size())};
  dims.insert(dims.end(), s.dims().begin(), s.dims().end());
  Array<Scalar> data(s.numel() * static_cast<Index>(items.size()));
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].shape != s) throw Error(ErrorCode::shape_mismatch, "stack of unequal shapes");
    data.segment(static_cast<Index>(i) * s.numel(), s.numel()) = items[i].data;
  }
  return Tensor<Scalar>(Shape(std::move(dims)), std::move(data));
}

template <typename Scalar>
Tensor<Scalar> gather_rows(const Tensor<Scalar>& t, const std::vector<Index>& indices) {
  const Index stride = t.numel() / t.shape[0];
  Array<Scalar> data(stride * static_cast<Index>(indices.size()));
  for (std::size_t i = 0; i < indices.size(); ++i)
    data.segment(static_cast<Index>(i) * stride, stride) = t.data.segment(indices[i] * stride, stride);
  return Tensor<Scalar>(t.shape.with_batch(static_cast<Index>(indices.size())), std::move(data));
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::constant(Tensor<Scalar> value) {
  return Var<Scalar>(this, append(Node{OpKind::leaf, {}, std::move(value), {}, false}));
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::variable(Tensor<Scalar> value) {
  return Var<Scalar>(this, append(Node{OpKind::leaf, {}, std::move(value), {}, true}));
}

template <typename Scalar>
bool Tape<Scalar>::any_requires_grad(const std::vector<NodeId>& ids) const {
  return std::any_of(ids.begin(), ids.end(), [&](NodeId id) { return requires_grad(id); });
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::record(OpKind kind, std::vector<NodeId> inputs, Tensor<Scalar> value,
                                 BackwardFn<Scalar> backward) {
  const NodeId next = static_cast<NodeId>(nodes_.size());
  for (NodeId in : inputs)
    if (in < 0 || in >= next)
      throw Error(ErrorCode::detached_node, "op input does not reference an earlier node");
  const bool rg = any_requires_grad(inputs);
  if (!rg) backward = nullptr;
  return Var<Scalar>(this, append(Node{kind, std::move(inputs), std::move(value), std::move(backward), rg}));
}

template <typename Scalar>
NodeId Tape<Scalar>::append(Node node) {
  if (mode_ == TapeMode::frozen) throw Error(ErrorCode::tape_frozen, "cannot record on a frozen tape");
  node.value.node = static_cast<NodeId>(nodes_.size());
  nodes_.push_back(std::move(node));
  return static_cast<NodeId>(nodes_.size() - 1);
}

template <typename Scalar>
void Tape<Scalar>::clear() {
  nodes_.clear();
  mode_ = TapeMode::recording;
}

template <typename Scalar>
Gradients<Scalar> Tape<Scalar>::backward(const Var<Scalar>& loss) const {
  if (loss.tape() != this) throw Error(ErrorCode::detached_node, "loss is not on this tape");
  const auto& lv = value(loss.id());
  if (lv.numel() != 1) throw Error(ErrorCode::loss_not_scalar, "loss has shape " + lv.shape.to_string());

  const std::size_t n = static_cast<std::size_t>(loss.id()) + 1;
  std::vector<Array<Scalar>> grads(nodes_.size());
  std::vector<bool> reached(nodes_.size(), false);
  std::size_t visited = 0;
  if (!nodes_[n - 1].requires_grad) return Gradients<Scalar>(this, std::move(grads), std::move(reached), 0);

  grads[n - 1] = Array<Scalar>::Ones(1);
  reached[n - 1] = true;
  for (std::size_t i = n; i-- > 0;) {
    const Node& node = nodes_[i];
    if (!reached[i] || !node.backward) continue;
    ++visited;
    std::vector<Array<Scalar>*> slots(node.inputs.size(), nullptr);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      const auto in = static_cast<std::size_t>(node.inputs[k]);
      if (!nodes_[in].requires_grad) continue;
      if (!reached[in]) {
        grads[in] = Array<Scalar>::Zero(nodes_[in].value.numel());
        reached[in] = true;
      }
      slots[k] = &grads[in];
    }
    GradSink<Scalar> sink(std::move(slots));
    node.backward(grads[i], sink);
  }
  return Gradients<Scalar>(this, std::move(grads), std::move(reached), visited);
}

template <typename Scalar>
Tensor<Scalar> Gradients<Scalar>::operator[](const Var<Scalar>& v) const {
  if (v.tape() != tape_ || !tape_->requires_grad(v.id()))
    throw Error(ErrorCode::detached_node, "no gradient is tracked for node " + std::to_string(v.id()));
  const auto i = static_cast<std::size_t>(v.id());
  const Shape& s = tape_->value(v.id()).shape;
  if (i >= reached_.size() || !reached_[i]) return Tensor<Scalar>::zeros(s);
  return Tensor<Scalar>(s, grads_[i]);
}

template <typename Scalar>
bool Gradients<Scalar>::reached(const Var<Scalar>& v) const {
  const auto i = static_cast<std::size_t>(v.id());
  return v.tape() == tape_ && i < reached_.size() && reached_[i];
}

template class Tape<float>;
template class Tape<double>;
template class Gradients<float>;
template class Gradients<double>;
template Tensor<float> stack(const std::vector<Tensor<float>>&);
template Tensor<double> stack(const std::vector<Tensor<double>>&);
template Tensor<float> gather_rows(const Tensor<float>&, const std::vector<Index>&);
template Tensor<double> gather_rows(const Tensor<double>&, const std::vector<Index>&);

}  // namespace ibr
