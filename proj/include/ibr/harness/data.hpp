#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ibr/core/dataset.hpp"

namespace ibr {

namespace fs = std::filesystem;

// IDX image file (magic 0x00000803) and label file (magic 0x00000801); pixels scaled by 1/255.
// Throws BadMagic (with the byte offset), TruncatedFile, CountMismatch, IoError.
Dataset<float> load_mnist(const fs::path& images, const fs::path& labels);

// Standard file names inside `dir`; split is "train" or "test".
Dataset<float> load_mnist_dir(const fs::path& dir, const std::string& split);

// 3073-byte records: label byte then 3072 channel-major pixel bytes.
// Throws RecordSizeMismatch, LabelOutOfRange, IoError.
Dataset<float> load_cifar10(const std::vector<fs::path>& batches);

// data_batch_1..5.bin for "train", test_batch.bin for "test".
Dataset<float> load_cifar10_dir(const fs::path& dir, const std::string& split);

// Writers for round-trip tests and fixtures. Pixels are rounded to bytes.
void write_mnist(const Dataset<float>& data, const fs::path& images, const fs::path& labels);
void write_cifar10(const Dataset<float>& data, const fs::path& path);

struct SyntheticSpec {
  int classes = 10;
  Index per_class = 100;
  Index image_size = 28;
  Index channels = 1;
  double noise = 0.15;  // pixel noise standard deviation around the class prototype
};

// Smooth random class prototypes plus Gaussian pixel noise, clipped to [0,1]; samples are
// interleaved by class. Deterministic in seed. Throws EmptyDataset, ConfigError.
Dataset<float> make_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

struct ChannelStats {
  std::vector<double> mean, std;
};
ChannelStats channel_stats(const Dataset<float>& data);

}  // namespace ibr
