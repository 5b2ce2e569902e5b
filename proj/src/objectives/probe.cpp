#include "ibr/objectives/probe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "ibr/objectives/train.hpp"

namespace ibr {

template <typename S>
Tensor<S> layer_representation(const Model<S>& model, Index layer, const Tensor<S>& x, Index batch) {
  const Index n_layers = static_cast<Index>(model.layers.size());
  if (layer < 0 || layer > n_layers)
    throw Error(ErrorCode::config_error,
                "probe layer " + std::to_string(layer) + " outside [0, " + std::to_string(n_layers) + "]");
  std::vector<Tensor<S>> parts;
  for (Index first = 0; first < x.shape[0]; first += batch) {
    const Index n = std::min(batch, x.shape[0] - first);
    Tape<S> tape;
    Binding<S> bound(model.params, tape);
    ForwardState<S> st;
    Tensor<S> r = run_layers(model, bound, tape.constant(x.rows(first, n)), st, 0, layer).value();
    if (r.shape.rank() == 2) r = r.reshaped(Shape{r.shape[0], r.shape[1], 1, 1});
    parts.push_back(std::move(r));
  }
  if (parts.size() == 1) return std::move(parts.front());
  const Shape sample = parts.front().shape.sample_shape();
  std::vector<Index> dims{x.shape[0]};
  dims.insert(dims.end(), sample.dims().begin(), sample.dims().end());
  Tensor<S> out = Tensor<S>::zeros(Shape(dims));
  Index offset = 0;
  for (const Tensor<S>& p : parts) {
    out.data.segment(offset, p.numel()) = p.data;
    offset += p.numel();
  }
  return out;
}

std::vector<ProbeLayerPlan> plan_probe(Index channels, Index h, Index w, Index out_channels, Index out_h,
                                       Index out_w, Index hidden) {
  if (h != w || out_h != out_w || h > out_h)
    throw Error(ErrorCode::unsupported_shape, "probe decoder needs square maps no larger than the input");
  std::vector<ProbeLayerPlan> plan;
  Index size = h;
  // First layer grows small maps so that two doublings reach the target.
  if (size * 4 >= out_h) {
    plan.push_back({channels, hidden, 3, 1, 1});
  } else {
    const Index quarter = (out_h + 3) / 4;
    plan.push_back({channels, hidden, quarter - size + 1, 1, 0});
    size = quarter;
  }
  for (int i = 0; i < 2; ++i) {
    const Index out = i == 1 ? out_channels : hidden;
    if (size < out_h) {
      plan.push_back({hidden, out, 4, 2, 1});
      size *= 2;
    } else {
      plan.push_back({hidden, out, 3, 1, 1});
    }
  }
  return plan;
}

namespace {

template <typename S>
ParameterSet<S> init_probe(const std::vector<ProbeLayerPlan>& plan, std::uint64_t seed) {
  ParameterSet<S> params;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const ProbeLayerPlan& l = plan[i];
    const std::string name = "probe.convt" + std::to_string(i + 1);
    const double fan_in = double(l.in_channels * l.kernel * l.kernel) / double(l.stride * l.stride);
    std::normal_distribution<double> dist(0.0, std::sqrt((i + 1 == plan.size() ? 1.0 : 2.0) / fan_in));
    Tensor<S> wt = Tensor<S>::zeros(Shape{l.in_channels, l.out_channels, l.kernel, l.kernel});
    for (Index k = 0; k < wt.numel(); ++k) wt.data[k] = S(dist(rng));
    params.add(name + ".w", std::move(wt));
    params.add(name + ".b", Tensor<S>::zeros(Shape{l.out_channels}));
  }
  return params;
}

template <typename S>
Var<S> run_probe(const std::vector<ProbeLayerPlan>& plan, const Binding<S>& p, Var<S> r, Index out_h, Index out_w) {
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const std::string name = "probe.convt" + std::to_string(i + 1);
    r = conv_transpose2d(r, p[name + ".w"], p[name + ".b"], {plan[i].stride, plan[i].pad, 0});
    if (i + 1 < plan.size()) r = relu(r);
  }
  if (r.shape()[2] > out_h) r = slice(r, 2, 0, out_h);
  if (r.shape()[3] > out_w) r = slice(r, 3, 0, out_w);
  return r;
}

}  // namespace

template <typename S>
ProbeResult train_layer_probe(const Model<S>& model, Index layer, const Dataset<S>& train, const Dataset<S>& test,
                              const ProbeConfig& config) {
  if (train.size() == 0 || test.size() == 0) throw Error(ErrorCode::empty_dataset, "probe datasets must be non-empty");
  const Tensor<S> r_train = layer_representation(model, layer, train.images);
  const Tensor<S> r_test = layer_representation(model, layer, test.images);
  const Index c = train.channels(), h = train.height(), w = train.width();
  ProbeResult result;
  result.layer = layer;
  const std::vector<ProbeLayerPlan> plan =
      plan_probe(r_train.shape[1], r_train.shape[2], r_train.shape[3], c, h, w, config.hidden_channels);
  ParameterSet<S> params = init_probe<S>(plan, config.seed);
  Adam<S> adam(params, AdamConfig{config.learning_rate});
  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);

  std::vector<Index> order(static_cast<std::size_t>(train.size()));
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), Index(0));
    std::shuffle(order.begin(), order.end(), rng);
    double sse = 0;
    for (Index first = 0; first < train.size(); first += config.batch_size) {
      const Index n = std::min(config.batch_size, train.size() - first);
      const std::vector<Index> idx(order.begin() + first, order.begin() + first + n);
      Tape<S> tape;
      Binding<S> bound(params, tape, [](const std::string&) { return true; });
      const Var<S> recon = run_probe(plan, bound, tape.constant(gather_rows(r_train, idx)), h, w);
      const Var<S> loss = mean(square(sub(recon, tape.constant(gather_rows(train.images, idx)))));
      sse += double(loss.value().item()) * double(n);
      adam.step(params, bound, tape.backward(loss));
    }
    result.train_mse.push_back(sse / double(train.size()));
  }

  double sse = 0;
  for (Index first = 0; first < test.size(); first += 256) {
    const Index n = std::min<Index>(256, test.size() - first);
    Tape<S> tape;
    Binding<S> bound(params, tape);
    const Var<S> recon = run_probe(plan, bound, tape.constant(r_test.rows(first, n)), h, w);
    sse += (recon.value().data - test.images.rows(first, n).data).template cast<double>().square().sum();
  }
  result.mse = sse / double(test.images.numel());
  result.psnr = 10.0 * std::log10(1.0 / std::max(result.mse, 1e-12));
  result.decoder = ProbeDecoder{plan, params.template cast<double>(), h, w};
  return result;
}

#define IBR_INSTANTIATE(S)                                                             \
  template Tensor<S> layer_representation(const Model<S>&, Index, const Tensor<S>&, Index); \
  template ProbeResult train_layer_probe(const Model<S>&, Index, const Dataset<S>&, const Dataset<S>&, \
                                         const ProbeConfig&);
IBR_INSTANTIATE(float)
IBR_INSTANTIATE(double)
#undef IBR_INSTANTIATE

}  // namespace ibr
