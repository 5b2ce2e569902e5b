#pragma once

#include <cstdint>
#include <vector>

#include "ibr/core/dataset.hpp"
#include "ibr/nn/model.hpp"

namespace ibr {

struct ProbeConfig {
  int epochs = 5;
  Index batch_size = 64;
  double learning_rate = 1e-3;
  Index hidden_channels = 16;
  std::uint64_t seed = 1;
};

/// Geometry of one transposed-conv probe layer.
struct ProbeLayerPlan {
  Index in_channels, out_channels, kernel, stride, pad;
};

struct ProbeDecoder {
  std::vector<ProbeLayerPlan> plan;
  ParameterSet<double> params;  // names "probe.convtK.w/b"
  Index out_height = 0, out_width = 0;
};

struct ProbeResult {
  Index layer = 0;
  double mse = 0;   // test reconstruction MSE per pixel value
  double psnr = 0;  // dB for a unit pixel range
  std::vector<double> train_mse;  // per epoch
  ProbeDecoder decoder;
};

// Eval-mode output of layers [0, layer); rank-2 activations become [N, D, 1, 1].
template <typename S>
Tensor<S> layer_representation(const Model<S>& model, Index layer, const Tensor<S>& x, Index batch = 256);

// Three transposed convolutions from an (h x w) map with `channels` channels back to the
// input resolution, cropping any overshoot.
std::vector<ProbeLayerPlan> plan_probe(Index channels, Index h, Index w, Index out_channels, Index out_h,
                                       Index out_w, Index hidden);

// Trains a fresh probe decoder on `train` to reconstruct inputs from layer `layer` of the
// frozen model and scores it on `test`.
template <typename S>
ProbeResult train_layer_probe(const Model<S>& model, Index layer, const Dataset<S>& train, const Dataset<S>& test,
                              const ProbeConfig& config);

}  // namespace ibr
