#pragma once

#include <random>

#include "doctest.h"
#include "ibr/core/dataset.hpp"
#include "ibr/nn/spec.hpp"

namespace ibr::test {

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an ibr::Error");
  return ErrorCode::io_error;
}

// Two classes on 1x8x8 images: bright left half or bright right half, with noise.
template <typename S>
Dataset<S> halves(Index n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> noise(0.0, 0.3);
  Dataset<S> d{"halves", Tensor<S>::zeros(Shape{n, 1, 8, 8}), {}, 2};
  for (Index i = 0; i < n; ++i) {
    const int y = static_cast<int>(rng() % 2);
    d.labels.push_back(y);
    for (Index r = 0; r < 8; ++r)
      for (Index c = 0; c < 8; ++c) {
        const bool lit = (c < 4) == (y == 0);
        d.images.data[i * 64 + r * 8 + c] = S((lit ? 0.7 : 0.0) + noise(rng));
      }
  }
  return d;
}

inline NetworkSpec tiny_spec(Objective objective) {
  NetworkSpec s;
  s.height = s.width = 8;
  s.num_classes = 2;
  s.objective = objective;
  s.latent_channels = objective == Objective::SVBI ? 2 : 8;
  return s;
}

}  // namespace ibr::test
