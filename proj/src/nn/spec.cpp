#include "ibr/nn/spec.hpp"

namespace ibr {

std::string_view to_string(Tier tier) {
  switch (tier) {
    case Tier::D1: return "D1";
    case Tier::D2: return "D2";
    case Tier::D3: return "D3";
  }
  return "?";
}

std::string_view to_string(Objective objective) {
  switch (objective) {
    case Objective::Base: return "Base";
    case Objective::SVBI: return "SVBI";
    case Objective::DVIB: return "DVIB";
  }
  return "?";
}

Tier parse_tier(std::string_view text) {
  for (Tier t : {Tier::D1, Tier::D2, Tier::D3})
    if (text == to_string(t)) return t;
  throw Error(ErrorCode::config_error, "unknown tier '" + std::string(text) + "'");
}

Objective parse_objective(std::string_view text) {
  for (Objective o : {Objective::Base, Objective::SVBI, Objective::DVIB})
    if (text == to_string(o)) return o;
  throw Error(ErrorCode::config_error, "unknown objective '" + std::string(text) + "'");
}

std::array<int, 3> blocks_per_stage(Tier tier) {
  switch (tier) {
    case Tier::D1: return {2, 3, 3};
    case Tier::D2: return {4, 5, 5};
    case Tier::D3: return {6, 7, 7};
  }
  return {0, 0, 0};
}

void validate(const NetworkSpec& spec) {
  auto fail = [](const std::string& why) { throw Error(ErrorCode::unsupported_shape, why); };
  if (spec.channels < 1 || spec.height < 8 || spec.width < 8)
    fail("input must have at least one channel and be at least 8x8");
  if (spec.num_classes < 2) fail("need at least two classes");
  if (spec.latent_channels < 1) fail("latent_channels must be positive");
  if (!(spec.beta >= 0)) fail("beta must be nonnegative");
  if (static_cast<Index>(spec.input_mean.size()) != spec.channels ||
      static_cast<Index>(spec.input_std.size()) != spec.channels)
    fail("input normalization needs one mean and std per channel");
  for (double s : spec.input_std)
    if (!(s > 0)) fail("input std must be positive");
  // The codec downsamples the stem resolution by two and its decoder upsamples by two.
  const Index h = (spec.height + 1) / 2, w = (spec.width + 1) / 2;
  if (spec.objective == Objective::SVBI && (h % 2 != 0 || w % 2 != 0))
    fail("SVBI needs stem output dimensions divisible by 2, got " + std::to_string(h) + "x" + std::to_string(w));
}

}  // namespace ibr
