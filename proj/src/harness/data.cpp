#include "ibr/harness/data.hpp"

#include <cmath>
#include <fstream>
#include <iterator>
#include <random>

namespace ibr {

namespace {

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io_error, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::io_error, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t at, const fs::path& path) {
  if (b.size() < at + 4)
    throw Error(ErrorCode::truncated_file, path.string() + ": header ends at byte " + std::to_string(b.size()));
  return (std::uint32_t(b[at]) << 24) | (std::uint32_t(b[at + 1]) << 16) | (std::uint32_t(b[at + 2]) << 8) |
         std::uint32_t(b[at + 3]);
}

void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(std::uint8_t(v >> s));
}

void expect_magic(const std::vector<std::uint8_t>& b, std::uint32_t magic, const fs::path& path) {
  const std::uint32_t got = be32(b, 0, path);
  if (got != magic) {
    char buf[96];
    std::snprintf(buf, sizeof buf, ": magic 0x%08x at byte offset 0, expected 0x%08x", got, magic);
    throw Error(ErrorCode::bad_magic, path.string() + buf);
  }
}

std::uint8_t to_byte(float v) { return std::uint8_t(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

}  // namespace

Dataset<float> load_mnist(const fs::path& images, const fs::path& labels) {
  const std::vector<std::uint8_t> ib = read_file(images), lb = read_file(labels);
  expect_magic(ib, 0x00000803, images);
  expect_magic(lb, 0x00000801, labels);
  const std::uint32_t n = be32(ib, 4, images), rows = be32(ib, 8, images), cols = be32(ib, 12, images);
  const std::uint32_t nl = be32(lb, 4, labels);
  const std::size_t pixels = std::size_t(rows) * cols;
  if (ib.size() < 16 + std::size_t(n) * pixels)
    throw Error(ErrorCode::truncated_file, images.string() + ": " + std::to_string(ib.size()) + " bytes for " +
                                               std::to_string(n) + " images of " + std::to_string(pixels) + " pixels");
  if (lb.size() < 8 + std::size_t(nl))
    throw Error(ErrorCode::truncated_file, labels.string() + ": " + std::to_string(lb.size()) + " bytes for " +
                                               std::to_string(nl) + " labels");
  if (n != nl)
    throw Error(ErrorCode::count_mismatch, std::to_string(n) + " images vs " + std::to_string(nl) + " labels");
  if (n == 0 || rows == 0 || cols == 0) throw Error(ErrorCode::empty_dataset, images.string() + " holds no images");

  Dataset<float> d{"mnist", Tensor<float>::zeros(Shape{Index(n), 1, Index(rows), Index(cols)}), {}, 10};
  for (std::size_t i = 0; i < std::size_t(n) * pixels; ++i) d.images.data[Index(i)] = float(ib[16 + i]) / 255.0f;
  d.labels.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    const int y = lb[8 + i];
    if (y > 9) throw Error(ErrorCode::label_out_of_range, labels.string() + ": label " + std::to_string(y));
    d.labels.push_back(y);
  }
  return d;
}

Dataset<float> load_mnist_dir(const fs::path& dir, const std::string& split) {
  if (split != "train" && split != "test") throw Error(ErrorCode::config_error, "unknown split '" + split + "'");
  const std::string prefix = split == "train" ? "train" : "t10k";
  return load_mnist(dir / (prefix + "-images-idx3-ubyte"), dir / (prefix + "-labels-idx1-ubyte"));
}

Dataset<float> load_cifar10(const std::vector<fs::path>& batches) {
  constexpr std::size_t kRecord = 3073, kPixels = 3072;
  std::vector<std::vector<std::uint8_t>> files;
  std::size_t total = 0;
  for (const fs::path& p : batches) {
    files.push_back(read_file(p));
    if (files.back().size() % kRecord != 0)
      throw Error(ErrorCode::record_size_mismatch,
                  p.string() + ": " + std::to_string(files.back().size()) + " bytes is not a multiple of 3073");
    total += files.back().size() / kRecord;
  }
  if (total == 0) throw Error(ErrorCode::empty_dataset, "no CIFAR-10 records");
  Dataset<float> d{"cifar10", Tensor<float>::zeros(Shape{Index(total), 3, 32, 32}), {}, 10};
  d.labels.reserve(total);
  std::size_t r = 0;
  for (std::size_t f = 0; f < files.size(); ++f) {
    const std::vector<std::uint8_t>& b = files[f];
    for (std::size_t at = 0; at < b.size(); at += kRecord, ++r) {
      if (b[at] > 9)
        throw Error(ErrorCode::label_out_of_range,
                    batches[f].string() + ": label " + std::to_string(b[at]) + " in record " + std::to_string(at / kRecord));
      d.labels.push_back(b[at]);
      for (std::size_t k = 0; k < kPixels; ++k) d.images.data[Index(r * kPixels + k)] = float(b[at + 1 + k]) / 255.0f;
    }
  }
  return d;
}

Dataset<float> load_cifar10_dir(const fs::path& dir, const std::string& split) {
  if (split == "test") return load_cifar10({dir / "test_batch.bin"});
  if (split != "train") throw Error(ErrorCode::config_error, "unknown split '" + split + "'");
  std::vector<fs::path> files;
  for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
  return load_cifar10(files);
}

void write_mnist(const Dataset<float>& data, const fs::path& images, const fs::path& labels) {
  std::vector<std::uint8_t> ib, lb;
  put_be32(ib, 0x00000803);
  put_be32(ib, std::uint32_t(data.size()));
  put_be32(ib, std::uint32_t(data.height()));
  put_be32(ib, std::uint32_t(data.width()));
  for (Index i = 0; i < data.images.numel(); ++i) ib.push_back(to_byte(data.images.data[i]));
  put_be32(lb, 0x00000801);
  put_be32(lb, std::uint32_t(data.size()));
  for (int y : data.labels) lb.push_back(std::uint8_t(y));
  write_file(images, ib);
  write_file(labels, lb);
}

void write_cifar10(const Dataset<float>& data, const fs::path& path) {
  if (data.images.shape.sample_shape() != Shape{3, 32, 32})
    throw Error(ErrorCode::shape_mismatch, "CIFAR-10 records are 3x32x32");
  std::vector<std::uint8_t> b;
  for (Index i = 0; i < data.size(); ++i) {
    b.push_back(std::uint8_t(data.labels[std::size_t(i)]));
    for (Index k = 0; k < 3072; ++k) b.push_back(to_byte(data.images.data[i * 3072 + k]));
  }
  write_file(path, b);
}

Dataset<float> make_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  if (spec.classes < 2) throw Error(ErrorCode::config_error, "synthetic data needs at least 2 classes");
  if (spec.per_class <= 0) throw Error(ErrorCode::empty_dataset, "synthetic data with per_class = 0");
  if (spec.image_size < 1 || spec.channels < 1) throw Error(ErrorCode::config_error, "synthetic image shape");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0, 1);
  const Index c = spec.channels, s = spec.image_size, plane = s * s, per = c * plane;
  // Prototypes: a sum of a few random Gaussian blobs per channel, rescaled into [0.1, 0.9].
  std::vector<Array<double>> protos;
  std::uniform_real_distribution<double> pos(0, double(s)), width(double(s) / 8, double(s) / 3);
  for (int k = 0; k < spec.classes; ++k) {
    Array<double> p = Array<double>::Zero(per);
    for (Index ch = 0; ch < c; ++ch)
      for (int blob = 0; blob < 3; ++blob) {
        const double cy = pos(rng), cx = pos(rng), w = width(rng), amp = normal(rng);
        for (Index y = 0; y < s; ++y)
          for (Index x = 0; x < s; ++x) {
            const double r2 = ((y - cy) * (y - cy) + (x - cx) * (x - cx)) / (2 * w * w);
            p[ch * plane + y * s + x] += amp * std::exp(-r2);
          }
      }
    const double lo = p.minCoeff(), hi = p.maxCoeff();
    p = 0.1 + 0.8 * (p - lo) / std::max(hi - lo, 1e-9);
    protos.push_back(p);
  }
  const Index n = spec.per_class * spec.classes;
  Dataset<float> d{"synthetic", Tensor<float>::zeros(Shape{n, c, s, s}), {}, spec.classes};
  for (Index i = 0; i < n; ++i) {
    const int y = int(i % spec.classes);
    d.labels.push_back(y);
    for (Index k = 0; k < per; ++k)
      d.images.data[i * per + k] = float(std::clamp(protos[std::size_t(y)][k] + spec.noise * normal(rng), 0.0, 1.0));
  }
  return d;
}

ChannelStats channel_stats(const Dataset<float>& data) {
  if (data.size() == 0) throw Error(ErrorCode::empty_dataset, "channel statistics of an empty dataset");
  const Index c = data.channels(), plane = data.height() * data.width();
  ChannelStats st{std::vector<double>(std::size_t(c), 0.0), std::vector<double>(std::size_t(c), 0.0)};
  std::vector<double> sq(std::size_t(c), 0.0);
  for (Index i = 0; i < data.size(); ++i)
    for (Index ch = 0; ch < c; ++ch) {
      const auto seg = data.images.data.segment((i * c + ch) * plane, plane).cast<double>();
      st.mean[std::size_t(ch)] += seg.sum();
      sq[std::size_t(ch)] += seg.square().sum();
    }
  const double count = double(data.size() * plane);
  for (std::size_t ch = 0; ch < st.mean.size(); ++ch) {
    st.mean[ch] /= count;
    st.std[ch] = std::sqrt(std::max(sq[ch] / count - st.mean[ch] * st.mean[ch], 1e-12));
  }
  return st;
}

}  // namespace ibr
