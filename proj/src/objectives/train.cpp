#include "ibr/objectives/train.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

#include "ibr/nn/bottleneck.hpp"
#include "ibr/objectives/losses.hpp"

namespace ibr {

void TrainConfig::validate() const {
  if (epochs < 1) throw Error(ErrorCode::config_error, "epochs must be >= 1");
  if (batch_size < 1) throw Error(ErrorCode::config_error, "batch_size must be >= 1");
  if (!(beta >= 0)) throw Error(ErrorCode::config_error, "beta must be >= 0");
  if (!(learning_rate > 0)) throw Error(ErrorCode::config_error, "learning_rate must be > 0");
}

template <typename S>
Adam<S>::Adam(const ParameterSet<S>& params, AdamConfig config) : cfg_(config) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_.push_back(Array<S>::Zero(params.value(i).numel()));
    v_.push_back(Array<S>::Zero(params.value(i).numel()));
  }
}

template <typename S>
void Adam<S>::step(ParameterSet<S>& params, const Binding<S>& bound, const Gradients<S>& grads) {
  ++t_;
  const S b1 = S(cfg_.beta1), b2 = S(cfg_.beta2);
  const S c1 = S(1.0 - std::pow(cfg_.beta1, double(t_)));
  const S c2 = S(1.0 - std::pow(cfg_.beta2, double(t_)));
  const S lr = S(cfg_.learning_rate), eps = S(cfg_.epsilon);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Var<S>& v = bound.var(i);
    if (!v.tape()->requires_grad(v.id())) continue;
    const Array<S> g = grads[v].data;
    if (!g.allFinite()) throw Error(ErrorCode::diverged_loss, "non-finite gradient for " + params.name(i));
    m_[i] = b1 * m_[i] + (S(1) - b1) * g;
    v_[i] = b2 * v_[i] + (S(1) - b2) * g.square();
    params.value(i).data -= lr * (m_[i] / c1) / ((v_[i] / c2).sqrt() + eps);
  }
}

void MetricsLog::write_csv(std::ostream& out) const {
  out << "epoch,split,loss_total,loss_ce_or_mse,loss_rate,acc_top1,bpp\n";
  out << std::setprecision(9);
  for (const MetricsRow& r : rows)
    out << r.epoch << ',' << r.split << ',' << r.loss_total << ',' << r.loss_ce_or_mse << ',' << r.loss_rate << ','
        << r.acc_top1 << ',' << r.bpp << '\n';
}

std::string MetricsLog::to_csv() const {
  std::ostringstream s;
  write_csv(s);
  return s.str();
}

const MetricsRow* MetricsLog::last(const std::string& split) const {
  for (auto it = rows.rbegin(); it != rows.rend(); ++it)
    if (it->split == split) return &*it;
  return nullptr;
}

namespace {

template <typename S>
Tensor<S> teacher_head(const Model<S>& teacher, const Tensor<S>& x) {
  Tape<S> tape;
  Binding<S> bound(teacher.params, tape);
  ForwardState<S> st;
  return run_layers(teacher, bound, tape.constant(x), st, 0, teacher.split_index).value();
}

// Loss terms of one batch. `main` is CE or head MSE; `rate` the unweighted rate term.
template <typename S>
struct BatchTerms {
  Var<S> loss;
  double main = 0, rate = 0, bpp = 0;
  Index correct = 0;
};

template <typename S>
BatchTerms<S> batch_terms(const Model<S>& model, const Binding<S>& bound, Tape<S>& tape, const Tensor<S>& x,
                          const std::vector<int>& y, S beta, Mode mode, std::mt19937_64* rng,
                          const Model<S>* teacher) {
  const NetworkSpec& spec = model.spec;
  const Index n = x.shape[0];
  ForwardState<S> st;
  st.mode = mode;
  st.rng = rng;
  BatchTerms<S> out;
  std::optional<Tensor<S>> h_teacher;
  if (spec.objective == Objective::SVBI) h_teacher = teacher_head(*teacher, x);
  const Var<S> logits = forward(model, bound, tape.constant(x), st);
  const std::vector<int> pred = argmax_rows(logits.value());
  for (Index i = 0; i < n; ++i) out.correct += pred[static_cast<std::size_t>(i)] == y[static_cast<std::size_t>(i)];

  switch (spec.objective) {
    case Objective::Base:
      out.loss = ce_loss(logits, y);
      out.main = double(out.loss.value().item());
      break;
    case Objective::DVIB: {
      const Var<S> ce = ce_loss(logits, y);
      const Var<S> kl = kl_std_normal(st.mu, st.sigma);
      out.loss = dvib_loss(logits, y, st.mu, st.sigma, beta);
      out.main = double(ce.value().item());
      out.rate = double(kl.value().item());
      out.bpp = out.rate / std::log(2.0) / double(spec.pixels());
      break;
    }
    case Objective::SVBI: {
      const Index pixel_count = n * spec.pixels();
      out.loss = svbi_loss(*h_teacher, st.head_output, st.rate_bits, beta, pixel_count);
      const Tensor<S>& diff_src = st.head_output.value();
      out.main = (diff_src.data - h_teacher->data).template cast<double>().square().mean();
      const double bits = mode == Mode::eval ? st.code.rate_bits
                                             : double(st.rate_bits.value().data.template cast<double>().sum());
      out.rate = bits / double(pixel_count);
      out.bpp = out.rate;
      break;
    }
  }
  return out;
}

bool trainable_for(Objective objective, const std::string& name) {
  if (objective != Objective::SVBI) return true;
  return name.rfind("encoder.", 0) == 0 || name.rfind("decoder.", 0) == 0 || name.rfind("entropy.", 0) == 0;
}

}  // namespace

template <typename S>
EvalStats evaluate(const Model<S>& model, const Dataset<S>& data, double beta, const Model<S>* teacher, Index batch) {
  if (data.size() == 0) throw Error(ErrorCode::empty_dataset, "evaluate on empty dataset");
  if (model.spec.objective == Objective::SVBI && !teacher)
    throw Error(ErrorCode::teacher_missing, "SVBI evaluation needs the teacher head");
  EvalStats s;
  double main = 0, rate = 0;
  Index correct = 0;
  for (Index first = 0; first < data.size(); first += batch) {
    const Index n = std::min(batch, data.size() - first);
    const Dataset<S> b = data.slice(first, n);
    Tape<S> tape;
    Binding<S> bound(model.params, tape);
    BatchTerms<S> t = batch_terms(model, bound, tape, b.images, b.labels, S(beta), Mode::eval, nullptr, teacher);
    main += t.main * double(n);
    rate += t.rate * double(n);
    correct += t.correct;
  }
  const double count = double(data.size());
  s.loss_main = main / count;
  s.loss_rate = rate / count;
  s.accuracy = double(correct) / count;
  switch (model.spec.objective) {
    case Objective::Base: s.loss_total = s.loss_main; break;
    case Objective::DVIB:
      s.loss_total = s.loss_main + beta * s.loss_rate;
      s.bpp = s.loss_rate / std::log(2.0) / double(model.spec.pixels());
      break;
    case Objective::SVBI:
      s.loss_total = s.loss_main + beta * s.loss_rate;
      s.bpp = s.loss_rate;
      break;
  }
  return s;
}

template <typename S>
double dvib_bpp(const Model<S>& model, const Dataset<S>& data, Index batch) {
  if (model.spec.objective != Objective::DVIB) throw Error(ErrorCode::config_error, "dvib_bpp needs a DVIB model");
  if (data.size() == 0) throw Error(ErrorCode::empty_dataset, "dvib_bpp on empty dataset");
  double nats = 0;
  for (Index first = 0; first < data.size(); first += batch) {
    const Index n = std::min(batch, data.size() - first);
    Tape<S> tape;
    Binding<S> bound(model.params, tape);
    ForwardState<S> st;
    forward(model, bound, tape.constant(data.images.rows(first, n)), st);
    nats += kl_per_sample(st.mu, st.sigma).value().data.template cast<double>().sum();
  }
  return nats / double(data.size()) / std::log(2.0) / double(model.spec.pixels());
}

template <typename S>
TrainResult<S> train(Model<S> model, const TrainConfig& config, const Dataset<S>& data, const Dataset<S>* test,
                     const Model<S>* teacher, const EpochCallback& on_epoch) {
  config.validate();
  const Objective objective = model.spec.objective;
  if (data.size() == 0) throw Error(ErrorCode::empty_dataset, "training set is empty");
  if (data.images.shape.sample_shape() != model.spec.input_shape(1).sample_shape())
    throw Error(ErrorCode::shape_mismatch, "dataset " + data.images.shape.to_string() + " does not match model input");
  if (objective == Objective::SVBI) {
    if (!teacher || teacher->spec.objective != Objective::Base)
      throw Error(ErrorCode::teacher_missing, "SVBI training needs a trained Base teacher");
    attach_teacher_tail(model, *teacher);
  }

  TrainResult<S> result{std::move(model), {}};
  Model<S>& m = result.model;
  const S beta = S(config.beta);
  std::mt19937_64 rng(config.seed);
  Adam<S> adam(m.params, AdamConfig{config.learning_rate});
  const auto trainable = [objective](const std::string& name) { return trainable_for(objective, name); };

  std::vector<Index> order(static_cast<std::size_t>(data.size()));
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), Index(0));
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0, main = 0, rate = 0, bpp = 0;
    Index correct = 0;
    for (Index first = 0; first < data.size(); first += config.batch_size) {
      const Index n = std::min(config.batch_size, data.size() - first);
      const std::vector<Index> idx(order.begin() + first, order.begin() + first + n);
      const Dataset<S> b = data.gather(idx);
      try {
        Tape<S> tape;
        Binding<S> bound(m.params, tape, trainable);
        BatchTerms<S> t = batch_terms(m, bound, tape, b.images, b.labels, beta, Mode::train, &rng, teacher);
        const double loss = double(t.loss.value().item());
        if (!std::isfinite(loss)) throw Error(ErrorCode::non_finite, "loss");
        adam.step(m.params, bound, tape.backward(t.loss));
        total += loss * double(n);
        main += t.main * double(n);
        rate += t.rate * double(n);
        bpp += t.bpp * double(n);
        correct += t.correct;
      } catch (const Error& e) {
        if (e.code() != ErrorCode::non_finite && e.code() != ErrorCode::diverged_loss) throw;
        throw Error(ErrorCode::diverged_loss,
                    "epoch " + std::to_string(epoch) + ", sample offset " + std::to_string(first) + ": " + e.what());
      }
    }
    const double count = double(data.size());
    MetricsRow row{epoch, "train", total / count, main / count, rate / count, double(correct) / count, bpp / count};
    result.log.rows.push_back(row);
    if (on_epoch) on_epoch(row);
    if (test) {
      const EvalStats s = evaluate(m, *test, config.beta, teacher);
      MetricsRow tr{epoch, "test", s.loss_total, s.loss_main, s.loss_rate, s.accuracy, s.bpp};
      result.log.rows.push_back(tr);
      if (on_epoch) on_epoch(tr);
    }
  }
  return result;
}

BetaSearchResult beta_search(const std::function<double(double)>& accuracy_at, double reference_accuracy,
                             const BetaSearchConfig& config) {
  if (!(config.low > 0) || !(config.high > config.low) || config.steps < 1)
    throw Error(ErrorCode::config_error, "beta search needs 0 < low < high and steps >= 1");
  BetaSearchResult r;
  r.beta = config.low;
  auto probe = [&](double beta) {
    const double acc = accuracy_at(beta);
    const bool ok = acc >= reference_accuracy - config.tolerance;
    r.probes.push_back({beta, acc, ok});
    if (ok && (!r.found || beta > r.beta)) {
      r.beta = beta;
      r.found = true;
    }
    return ok;
  };
  // Log-space bracket: lo is the largest known-acceptable point, hi the smallest known-bad one.
  double lo = std::log(config.low), hi = std::log(config.high);
  if (probe(config.high)) return r;
  int remaining = config.steps - 1;
  if (remaining > 0) {
    --remaining;
    if (!probe(config.low)) return r;
  }
  const double g = (std::sqrt(5.0) - 1.0) / 2.0;
  for (; remaining > 0; --remaining) {
    // Step toward larger beta by the golden fraction of the bracket.
    const double mid = lo + g * (hi - lo);
    if (probe(std::exp(mid)))
      lo = mid;
    else
      hi = mid;
  }
  return r;
}

#define IBR_INSTANTIATE(S)                                                                                    \
  template class Adam<S>;                                                                                     \
  template EvalStats evaluate(const Model<S>&, const Dataset<S>&, double, const Model<S>*, Index);            \
  template double dvib_bpp(const Model<S>&, const Dataset<S>&, Index);                                        \
  template TrainResult<S> train(Model<S>, const TrainConfig&, const Dataset<S>&, const Dataset<S>*,          \
                                const Model<S>*, const EpochCallback&);
IBR_INSTANTIATE(float)
IBR_INSTANTIATE(double)
#undef IBR_INSTANTIATE

}  // namespace ibr
