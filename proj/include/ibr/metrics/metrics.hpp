#pragma once

#include <string>
#include <vector>

#include "ibr/core/tensor.hpp"

namespace ibr {

// One 8-bit quantization step.
constexpr double kPixelThreshold = 1.0 / 255.0;

struct NormTriple {
  double l0_frac = 0;  // share of pixels whose largest channel change exceeds the threshold
  double l2 = 0;
  double linf = 0;
  friend bool operator==(const NormTriple&, const NormTriple&) = default;
};

// Norms of x_adv - x for one image: [C,H,W] or [1,C,H,W]. Lower-rank inputs treat every
// element as a pixel. Throws ShapeMismatch.
template <typename S>
NormTriple perturbation_norms(const Tensor<S>& x, const Tensor<S>& x_adv, double pixel_threshold = kPixelThreshold);

/// Clean vs adversarial top-1 accuracy, in percent.
struct RobustnessRow {
  std::string tier, objective, attack;
  double clean_acc = 0;
  double adv_acc = 0;
  double drop_points = 0;  // clean_acc - adv_acc
};

// Throws SizeMismatch unless all three vectors have the same nonzero length.
RobustnessRow accuracy_drop(const std::vector<int>& labels, const std::vector<int>& clean_pred,
                            const std::vector<int>& adv_pred);

template <typename Classifier, typename S>
RobustnessRow accuracy_drop(const Classifier& predict, const Tensor<S>& clean, const Tensor<S>& adv,
                            const std::vector<int>& labels) {
  if (clean.shape != adv.shape) throw Error(ErrorCode::size_mismatch, "clean and adversarial sets differ in shape");
  return accuracy_drop(labels, predict(clean), predict(adv));
}

Index target_hits(const std::vector<int>& predictions, int target_label);

/// Outcome of attacking one sample.
struct SampleRecord {
  std::string tier, objective, attack;
  Index id = 0;
  int label = 0;
  int target = -1;  // -1 for untargeted attacks
  int pred_clean = 0;
  int pred_adv = 0;
  bool success = false;
  NormTriple norms;
  int iterations = 0;
};

struct Moments {
  double mean = 0;
  double stddev = 0;  // population
};

struct NormSummary {
  std::string tier, objective, attack;
  // "all" covers every attacked sample, "success" only successful ones.
  std::string subset;
  Index count = 0;
  Moments l0_frac, l2, linf;
};

struct HitCount {
  std::string tier, objective, attack;
  int target = 0;
  Index hits = 0;
  Index total = 0;
};

struct AggregateReport {
  std::vector<RobustnessRow> robustness;
  std::vector<NormSummary> norms;
  std::vector<HitCount> hits;
};

// Groups samples by (tier, objective, attack) in lexical order. Independent of input order.
AggregateReport aggregate(std::vector<SampleRecord> samples);

Moments moments(const std::vector<double>& values);

}  // namespace ibr
