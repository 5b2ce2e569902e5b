#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ibr {

enum class ErrorCode {
  shape_mismatch,
  non_finite,
  loss_not_scalar,
  detached_node,
  tape_frozen,
  non_finite_evaluation,
  unsupported_shape,
  non_positive_sigma,
  zero_likelihood,
  corrupt_stream,
  symbol_out_of_support,
  label_out_of_range,
  diverged_loss,
  teacher_missing,
  non_finite_gradient,
  no_successful_iterate,
  jacobian_too_large,
  no_saliency_candidates,
  size_mismatch,
  bad_magic,
  truncated_file,
  count_mismatch,
  record_size_mismatch,
  empty_dataset,
  empty_report,
  config_error,
  io_error,
  stage_failure,
  checkpoint_format,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace ibr
