#include "ibr/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>

namespace ibr {

template <typename S>
NormTriple perturbation_norms(const Tensor<S>& x, const Tensor<S>& x_adv, double pixel_threshold) {
  if (x.shape != x_adv.shape)
    throw Error(ErrorCode::shape_mismatch, "norms of " + x.shape.to_string() + " vs " + x_adv.shape.to_string());
  const Shape& s = x.shape;
  Index channels = 1;
  if (s.rank() == 4) {
    if (s[0] != 1) throw Error(ErrorCode::shape_mismatch, "perturbation_norms takes a single image");
    channels = s[1];
  } else if (s.rank() == 3) {
    channels = s[0];
  }
  const Array<double> d = (x_adv.data.template cast<double>() - x.data.template cast<double>()).eval();
  NormTriple n;
  n.l2 = std::sqrt(d.square().sum());
  n.linf = d.size() ? d.abs().maxCoeff() : 0.0;
  const Index plane = d.size() / channels;
  Index perturbed = 0;
  for (Index p = 0; p < plane; ++p) {
    double m = 0;
    for (Index c = 0; c < channels; ++c) m = std::max(m, std::abs(d[c * plane + p]));
    perturbed += m > pixel_threshold;
  }
  n.l0_frac = plane ? double(perturbed) / double(plane) : 0.0;
  return n;
}

RobustnessRow accuracy_drop(const std::vector<int>& labels, const std::vector<int>& clean_pred,
                            const std::vector<int>& adv_pred) {
  if (labels.empty() || labels.size() != clean_pred.size() || labels.size() != adv_pred.size())
    throw Error(ErrorCode::size_mismatch, "labels/clean/adversarial sizes " + std::to_string(labels.size()) + "/" +
                                              std::to_string(clean_pred.size()) + "/" + std::to_string(adv_pred.size()));
  Index clean = 0, adv = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    clean += clean_pred[i] == labels[i];
    adv += adv_pred[i] == labels[i];
  }
  RobustnessRow r;
  const double n = double(labels.size());
  r.clean_acc = 100.0 * double(clean) / n;
  r.adv_acc = 100.0 * double(adv) / n;
  r.drop_points = r.clean_acc - r.adv_acc;
  return r;
}

Index target_hits(const std::vector<int>& predictions, int target_label) {
  return std::count(predictions.begin(), predictions.end(), target_label);
}

Moments moments(const std::vector<double>& values) {
  Moments m;
  if (values.empty()) return m;
  for (double v : values) m.mean += v;
  m.mean /= double(values.size());
  double var = 0;
  for (double v : values) var += (v - m.mean) * (v - m.mean);
  m.stddev = std::sqrt(var / double(values.size()));
  return m;
}

AggregateReport aggregate(std::vector<SampleRecord> samples) {
  // Canonical order makes every floating-point sum independent of the input order.
  std::sort(samples.begin(), samples.end(), [](const SampleRecord& a, const SampleRecord& b) {
    return std::tie(a.tier, a.objective, a.attack, a.id, a.label, a.target, a.pred_clean, a.pred_adv, a.success,
                    a.norms.l0_frac, a.norms.l2, a.norms.linf, a.iterations) <
           std::tie(b.tier, b.objective, b.attack, b.id, b.label, b.target, b.pred_clean, b.pred_adv, b.success,
                    b.norms.l0_frac, b.norms.l2, b.norms.linf, b.iterations);
  });
  AggregateReport report;
  for (std::size_t first = 0; first < samples.size();) {
    std::size_t last = first;
    const SampleRecord& g = samples[first];
    while (last < samples.size() && samples[last].tier == g.tier && samples[last].objective == g.objective &&
           samples[last].attack == g.attack)
      ++last;
    std::vector<int> labels, clean, adv;
    for (std::size_t i = first; i < last; ++i) {
      labels.push_back(samples[i].label);
      clean.push_back(samples[i].pred_clean);
      adv.push_back(samples[i].pred_adv);
    }
    RobustnessRow row = accuracy_drop(labels, clean, adv);
    row.tier = g.tier;
    row.objective = g.objective;
    row.attack = g.attack;
    report.robustness.push_back(row);

    for (const char* subset : {"all", "success"}) {
      const bool only_success = std::string(subset) == "success";
      std::vector<double> l0, l2, linf;
      for (std::size_t i = first; i < last; ++i) {
        if (only_success && !samples[i].success) continue;
        l0.push_back(samples[i].norms.l0_frac);
        l2.push_back(samples[i].norms.l2);
        linf.push_back(samples[i].norms.linf);
      }
      report.norms.push_back(
          {g.tier, g.objective, g.attack, subset, Index(l0.size()), moments(l0), moments(l2), moments(linf)});
    }

    // Hit counts only make sense when the whole group aims at one label.
    const bool single_target = std::all_of(samples.begin() + first, samples.begin() + last,
                                           [&](const SampleRecord& s) { return s.target == g.target; });
    if (g.target >= 0 && single_target) {
      Index hits = 0;
      for (std::size_t i = first; i < last; ++i) hits += samples[i].pred_adv == g.target;
      report.hits.push_back({g.tier, g.objective, g.attack, g.target, hits, Index(last - first)});
    }
    first = last;
  }
  return report;
}

template NormTriple perturbation_norms(const Tensor<float>&, const Tensor<float>&, double);
template NormTriple perturbation_norms(const Tensor<double>&, const Tensor<double>&, double);

}  // namespace ibr
