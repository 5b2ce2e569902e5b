#include "ibr/nn/bottleneck.hpp"

#include <limits>

namespace ibr {

template <typename S>
Var<S> sigma_from_raw(const Var<S>& raw) {
  return add_scalar(softplus(raw), S(kSigmaFloor));
}

template <typename S>
Var<S> reparam_sample(const Var<S>& mu, const Var<S>& sigma, const Tensor<S>& noise) {
  if (mu.shape() != sigma.shape() || mu.shape() != noise.shape)
    throw Error(ErrorCode::shape_mismatch, "reparam_sample: mu " + mu.shape().to_string() + ", sigma " +
                                               sigma.shape().to_string() + ", noise " + noise.shape.to_string());
  const Var<S> s = clamp(sigma, S(kSigmaFloor), std::numeric_limits<S>::max());
  return add(mu, mul(s, mu.tape()->constant(noise)));
}

template <typename S>
Var<S> kl_per_sample(const Var<S>& mu, const Var<S>& sigma) {
  if (mu.shape() != sigma.shape())
    throw Error(ErrorCode::shape_mismatch,
                "kl: mu " + mu.shape().to_string() + " vs sigma " + sigma.shape().to_string());
  if (!(sigma.value().data > S(0)).all()) throw Error(ErrorCode::non_positive_sigma, "kl: sigma must be > 0");
  // 0.5 * (mu^2 + sigma^2 - 1) - ln sigma
  const Var<S> quad = add_scalar(add(square(mu), square(sigma)), S(-1));
  return sum_per_sample(sub(scale(quad, S(0.5)), log(sigma)));
}

template <typename S>
Var<S> kl_std_normal(const Var<S>& mu, const Var<S>& sigma) {
  return mean(kl_per_sample(mu, sigma));
}

#define IBR_INSTANTIATE(S)                                                   \
  template Var<S> sigma_from_raw(const Var<S>&);                             \
  template Var<S> reparam_sample(const Var<S>&, const Var<S>&, const Tensor<S>&); \
  template Var<S> kl_per_sample(const Var<S>&, const Var<S>&);               \
  template Var<S> kl_std_normal(const Var<S>&, const Var<S>&);
IBR_INSTANTIATE(float)
IBR_INSTANTIATE(double)
#undef IBR_INSTANTIATE

}  // namespace ibr
