#pragma once

#include <vector>

#include "ibr/core/ops.hpp"

namespace ibr {

// Mean negative log-likelihood over the batch. Throws LabelOutOfRange.
template <typename S>
Var<S> ce_loss(const Var<S>& logits, const std::vector<int>& labels);

// ce_loss + beta * kl_std_normal(mu, sigma). With beta == 0 this is ce_loss itself.
template <typename S>
Var<S> dvib_loss(const Var<S>& logits, const std::vector<int>& labels, const Var<S>& mu, const Var<S>& sigma,
                 S beta);

// mean((H_teacher - H_student)^2) + beta * rate_bits / pixel_count. The teacher is a
// constant; rate_bits is a scalar or per-element bit tensor (summed) and pixel_count the
// number of input pixels it was spent on.
template <typename S>
Var<S> svbi_loss(const Tensor<S>& teacher, const Var<S>& student, const Var<S>& rate_bits, S beta,
                 Index pixel_count);

}  // namespace ibr
