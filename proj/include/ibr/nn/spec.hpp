#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include "ibr/core/tensor.hpp"

namespace ibr {

enum class Tier { D1, D2, D3 };
enum class Objective { Base, SVBI, DVIB };
enum class Mode { train, eval };

std::string_view to_string(Tier tier);
std::string_view to_string(Objective objective);
Tier parse_tier(std::string_view text);
Objective parse_objective(std::string_view text);

/// Residual blocks per stage; tiers total 8, 14 and 20 blocks.
std::array<int, 3> blocks_per_stage(Tier tier);

struct NetworkSpec {
  Tier tier = Tier::D1;
  Index channels = 1, height = 28, width = 28;
  int num_classes = 10;
  Objective objective = Objective::Base;
  double beta = 0;
  // DVIB: Gaussian latent dimension. SVBI: channels of the quantized latent.
  int latent_channels = 64;
  // Fixed per-channel input standardization applied inside the first layer.
  std::vector<double> input_mean{0.0};
  std::vector<double> input_std{1.0};

  Shape input_shape(Index batch) const { return Shape{batch, channels, height, width}; }
  Index pixels() const { return height * width; }
};

// Throws UnsupportedShape for inputs the architecture cannot consume.
void validate(const NetworkSpec& spec);

}  // namespace ibr
