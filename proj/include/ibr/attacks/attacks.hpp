#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ibr/core/ops.hpp"
#include "ibr/metrics/metrics.hpp"
#include "ibr/nn/model.hpp"

namespace ibr {

enum class AttackKind { FGSM, CW, EAD, JSMA, JSMA1PX, TABACOF };

std::string_view to_string(AttackKind kind);
AttackKind parse_attack_kind(std::string_view text);

struct AttackConfig {
  AttackKind kind = AttackKind::FGSM;
  double epsilon = 8.0 / 255.0;
  double alpha = 1.0, beta_w = 10.0;  // C&W distance and misclassification weights
  double c = 10.0, beta_l1 = 1e-2;    // EAD loss and L1 weights
  double theta = 1.0;                 // JSMA per-feature step
  double gamma = 0.25;                // JSMA feature budget
  double lambda_reg = 1.0;            // Tabacof, used when lambda_sweep is empty
  std::vector<double> lambda_sweep{1e-3, 1e-2, 1e-1, 1.0, 10.0};
  int max_iters = 200;
  double learning_rate = 5e-3;  // C&W Adam step; EAD ISTA step; Tabacof Adam step
  std::optional<int> targeted;  // fixed target class instead of the default policy
  std::uint64_t seed = 0;
  bool early_abort = true;      // C&W and EAD: stop a sample once its objective stalls

  void validate() const;
};

// Hyperparameter defaults per attack.
AttackConfig default_attack_config(AttackKind kind);

/// Differentiable logits plus a forward-only predictor over batches in [0,1] pixel space.
template <typename S>
struct Classifier {
  std::function<Var<S>(const Var<S>&)> logits;
  std::function<Tensor<S>(const Tensor<S>&)> predict_logits;
  int num_classes = 0;
};

// Eval-mode view of a model. The model must outlive the classifier.
template <typename S>
Classifier<S> make_classifier(const Model<S>& model);

template <typename S>
struct AdvResult {
  Tensor<S> x_adv;  // [1,C,H,W], within [0,1]
  bool success = false;
  int pred_before = 0, pred_after = 0;
  int target = -1;  // -1 when untargeted
  double l0_frac = 0, l2 = 0, linf = 0;
  int iterations_used = 0;
  std::vector<Index> trace;  // JSMA: flat feature index modified at each iteration
  std::optional<ErrorCode> error;
};

// Untargeted: x + eps * sign(grad CE(x, y)), clipped. One gradient query per batch.
template <typename S>
std::vector<AdvResult<S>> fgsm(const Classifier<S>& clf, const Tensor<S>& x, const std::vector<int>& y,
                               double epsilon);

// Highest-scoring class other than the label.
template <typename S>
std::vector<int> next_likely_targets(const Classifier<S>& clf, const Tensor<S>& x, const std::vector<int>& y);

// alpha * ||x - x'||_2 + beta_w * max(max_{j!=t} z_j - z_t, 0) with x' = (tanh u + 1) / 2,
// minimized by Adam on u. Keeps the lowest-L2 successful iterate.
template <typename S>
std::vector<AdvResult<S>> cw(const Classifier<S>& clf, const Tensor<S>& x, const std::vector<int>& targets,
                             const AttackConfig& cfg);

// Elastic-net attack by iterative shrinkage-thresholding. Keeps the lowest-L1 successful iterate.
template <typename S>
std::vector<AdvResult<S>> ead(const Classifier<S>& clf, const Tensor<S>& x, const std::vector<int>& targets,
                              const AttackConfig& cfg);

// Largest-saliency candidate, or -1 when none scores above zero. `grad_target` and
// `grad_others` are d z_t / dx and d sum_{j!=t} z_j / dx for one sample; candidates are
// untouched features that can still move in the direction of theta.
template <typename S>
Index saliency_argmax(const Array<S>& grad_target, const Array<S>& grad_others, const Array<S>& x,
                      const std::vector<bool>& touched, double theta);

// Full-Jacobian saliency attack; at most 4096 features per sample (JacobianTooLarge).
template <typename S>
std::vector<AdvResult<S>> jsma(const Classifier<S>& clf, const Tensor<S>& x, const std::vector<int>& targets,
                               const AttackConfig& cfg);

// Saliency attack from two backward passes per iteration; one feature per iteration.
template <typename S>
std::vector<AdvResult<S>> jsma_one_pixel(const Classifier<S>& clf, const Tensor<S>& x,
                                         const std::vector<int>& targets, const AttackConfig& cfg);

/// A model viewed as encoder plus downstream classifier for latent-targeting attacks.
template <typename S>
struct LatentSystem {
  // Latent of x; the second Var is the posterior scale, invalid for deterministic latents.
  std::function<std::pair<Var<S>, Var<S>>(const Var<S>&)> encode;
  std::function<Tensor<S>(const Tensor<S>&)> predict_logits;
};

// DVIB: Gaussian bottleneck posterior. Base: penultimate activations. SVBI: encoder output.
template <typename S>
LatentSystem<S> make_latent_system(const Model<S>& model);

// Minimizes D(enc(x + d), enc(x_target)) + lambda * ||d||^2 per lambda in the sweep. D is the
// Gaussian KL when the system has a posterior scale, else the squared distance. Per sample
// the largest successful lambda wins; without success the smallest lambda's result is kept.
template <typename S>
std::vector<AdvResult<S>> tabacof(const LatentSystem<S>& system, const Tensor<S>& x, const Tensor<S>& x_target,
                                  const std::vector<int>& target_labels, const AttackConfig& cfg);

// Dispatches FGSM/CW/EAD/JSMA/JSMA1PX with the default target policy: untargeted FGSM,
// next-likely class for the others unless cfg.targeted is set.
template <typename S>
std::vector<AdvResult<S>> run_attack(const Classifier<S>& clf, const Tensor<S>& x, const std::vector<int>& y,
                                     const AttackConfig& cfg);

// Single-image convenience wrapper that throws the recorded error, except NoSuccessfulIterate.
template <typename S>
AdvResult<S> single(std::vector<AdvResult<S>> results);

}  // namespace ibr
