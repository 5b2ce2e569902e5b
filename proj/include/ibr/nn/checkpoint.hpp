#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ibr/nn/model.hpp"

namespace ibr {

// Binary container: "IBAB", u32 version, the NetworkSpec fields, then named parameter
// blobs (name, dtype, shape, data). All integers and reals are little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename S>
std::vector<std::uint8_t> serialize_model(const Model<S>& model);

// Parameters stored at another precision are converted.
template <typename S>
Model<S> deserialize_model(const std::vector<std::uint8_t>& bytes);

template <typename S>
void save_model(const Model<S>& model, const std::filesystem::path& path);
template <typename S>
Model<S> load_model(const std::filesystem::path& path);

}  // namespace ibr
