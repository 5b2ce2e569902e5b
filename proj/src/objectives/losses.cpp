#include "ibr/objectives/losses.hpp"

#include "ibr/nn/bottleneck.hpp"

namespace ibr {

template <typename S>
Var<S> ce_loss(const Var<S>& logits, const std::vector<int>& labels) {
  const Shape& s = logits.shape();
  if (s.rank() != 2 || s[0] != static_cast<Index>(labels.size()))
    throw Error(ErrorCode::shape_mismatch, "ce_loss: logits " + s.to_string() + " with " +
                                               std::to_string(labels.size()) + " labels");
  for (int y : labels)
    if (y < 0 || y >= s[1])
      throw Error(ErrorCode::label_out_of_range, "label " + std::to_string(y) + " outside [0, " + std::to_string(s[1]) + ")");
  return scale(mean(pick(log_softmax(logits), labels)), S(-1));
}

template <typename S>
Var<S> dvib_loss(const Var<S>& logits, const std::vector<int>& labels, const Var<S>& mu, const Var<S>& sigma,
                 S beta) {
  const Var<S> ce = ce_loss(logits, labels);
  const Var<S> kl = kl_std_normal(mu, sigma);
  if (beta == S(0)) return ce;
  return add(ce, scale(kl, beta));
}

template <typename S>
Var<S> svbi_loss(const Tensor<S>& teacher, const Var<S>& student, const Var<S>& rate_bits, S beta,
                 Index pixel_count) {
  if (teacher.shape != student.shape())
    throw Error(ErrorCode::shape_mismatch,
                "svbi_loss: teacher " + teacher.shape.to_string() + " vs student " + student.shape().to_string());
  const Var<S> mse = mean(square(sub(student, student.tape()->constant(teacher))));
  if (beta == S(0)) return mse;
  return add(mse, scale(sum(rate_bits), beta / S(static_cast<double>(pixel_count))));
}

#define IBR_INSTANTIATE(S)                                                                          \
  template Var<S> ce_loss(const Var<S>&, const std::vector<int>&);                                 \
  template Var<S> dvib_loss(const Var<S>&, const std::vector<int>&, const Var<S>&, const Var<S>&, S); \
  template Var<S> svbi_loss(const Tensor<S>&, const Var<S>&, const Var<S>&, S, Index);
IBR_INSTANTIATE(float)
IBR_INSTANTIATE(double)
#undef IBR_INSTANTIATE

}  // namespace ibr
