#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "ibr/core/dataset.hpp"
#include "ibr/nn/model.hpp"

namespace ibr {

struct TrainConfig {
  int epochs = 10;
  Index batch_size = 64;
  double learning_rate = 1e-3;
  double beta = 0;
  std::uint64_t seed = 1;
  std::string dataset = "mnist";
  Objective objective = Objective::Base;
  std::vector<Index> probe_layers;

  void validate() const;
};

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adaptive-moment optimizer over a ParameterSet. Only parameters bound as variables move.
template <typename S>
class Adam {
 public:
  Adam(const ParameterSet<S>& params, AdamConfig config);
  void step(ParameterSet<S>& params, const Binding<S>& bound, const Gradients<S>& grads);
  long steps() const { return t_; }

 private:
  AdamConfig cfg_;
  std::vector<Array<S>> m_, v_;
  long t_ = 0;
};

struct MetricsRow {
  int epoch = 0;
  std::string split;  // "train" or "test"
  double loss_total = 0;
  double loss_ce_or_mse = 0;
  double loss_rate = 0;  // DVIB: KL nats per sample. SVBI: bits per pixel. Base: 0.
  double acc_top1 = 0;   // fraction in [0,1]
  double bpp = 0;        // 0 for Base
};

struct MetricsLog {
  std::vector<MetricsRow> rows;

  void write_csv(std::ostream& out) const;
  std::string to_csv() const;
  const MetricsRow* last(const std::string& split) const;
};

/// Loss components and accuracy of a model over a dataset in eval mode.
struct EvalStats {
  double loss_total = 0;
  double loss_main = 0;
  double loss_rate = 0;
  double accuracy = 0;
  double bpp = 0;
};

template <typename S>
struct TrainResult {
  Model<S> model;
  MetricsLog log;
};

// Evaluates in eval mode. SVBI requires the teacher for the distortion term.
template <typename S>
EvalStats evaluate(const Model<S>& model, const Dataset<S>& data, double beta, const Model<S>* teacher = nullptr,
                   Index batch = 256);

// DVIB rate surrogate: mean KL of the posterior in bits per input pixel.
template <typename S>
double dvib_bpp(const Model<S>& model, const Dataset<S>& data, Index batch = 256);

using EpochCallback = std::function<void(const MetricsRow&)>;

// Trains `model` in place of a copy. SVBI training freezes the teacher tail copied into the
// student and fits only the encoder, decoder and entropy model. When `test` is given a test
// row is logged after every epoch. Throws DivergedLoss and TeacherMissing.
template <typename S>
TrainResult<S> train(Model<S> model, const TrainConfig& config, const Dataset<S>& data, const Dataset<S>* test = nullptr,
                     const Model<S>* teacher = nullptr, const EpochCallback& on_epoch = {});

/// Largest beta in log space whose accuracy stays within `tolerance` of `reference_accuracy`.
struct BetaSearchConfig {
  double low = 1e-4;
  double high = 1.0;
  int steps = 6;
  double tolerance = 0.01;  // accuracy fraction, one top-1 point
};

struct BetaProbe {
  double beta;
  double accuracy;
  bool acceptable;
};

struct BetaSearchResult {
  double beta = 0;  // best acceptable beta, or `low` when none was acceptable
  bool found = false;
  std::vector<BetaProbe> probes;
};

// accuracy_at(beta) trains and scores a candidate. Accuracy is assumed to fall with beta,
// so the bracket [acceptable, unacceptable] narrows at the golden ratio in log space.
BetaSearchResult beta_search(const std::function<double(double)>& accuracy_at, double reference_accuracy,
                             const BetaSearchConfig& config);

}  // namespace ibr
