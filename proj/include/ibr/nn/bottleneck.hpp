#pragma once

#include "ibr/core/ops.hpp"

namespace ibr {

inline constexpr double kSigmaFloor = 1e-6;

// softplus(raw) + 1e-6
template <typename S>
Var<S> sigma_from_raw(const Var<S>& raw);

// z = mu + sigma * noise, with sigma clamped below at 1e-6.
template <typename S>
Var<S> reparam_sample(const Var<S>& mu, const Var<S>& sigma, const Tensor<S>& noise);

// KL(N(mu, sigma^2) || N(0, 1)) in nats, summed over latent dims: shape [N].
template <typename S>
Var<S> kl_per_sample(const Var<S>& mu, const Var<S>& sigma);

// kl_per_sample averaged over the batch. Throws NonPositiveSigma.
template <typename S>
Var<S> kl_std_normal(const Var<S>& mu, const Var<S>& sigma);

}  // namespace ibr
