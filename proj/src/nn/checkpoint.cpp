#include "ibr/nn/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace ibr {

namespace {

class Writer {
 public:
  template <typename T>
  void put(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    bytes.insert(bytes.end(), raw, raw + sizeof(T));
  }
  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes.insert(bytes.end(), s.begin(), s.end());
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    pos_ += sizeof(T);
    T value;
    std::memcpy(&value, raw, sizeof(T));
    return value;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_), bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size())
      throw Error(ErrorCode::truncated_file, "checkpoint ends at offset " + std::to_string(bytes_.size()) +
                                                 ", needed " + std::to_string(n) + " more bytes at " + std::to_string(pos_));
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

void bad(const std::string& why) { throw Error(ErrorCode::checkpoint_format, why); }

}  // namespace

template <typename S>
std::vector<std::uint8_t> serialize_model(const Model<S>& model) {
  Writer w;
  for (char c : std::string("IBAB")) w.put<char>(c);
  w.put<std::uint32_t>(kCheckpointVersion);
  const NetworkSpec& s = model.spec;
  w.put<std::uint8_t>(static_cast<std::uint8_t>(s.tier));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(s.objective));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(s.channels));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(s.height));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(s.width));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(s.num_classes));
  w.put<double>(s.beta);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(s.latent_channels));
  for (const auto* v : {&s.input_mean, &s.input_std}) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(v->size()));
    for (double x : *v) w.put<double>(x);
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.params.size()));
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    const Tensor<S>& t = model.params.value(i);
    w.put_string(model.params.name(i));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(sizeof(S)));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.shape.rank()));
    for (Index d : t.shape.dims()) w.put<std::uint64_t>(static_cast<std::uint64_t>(d));
    for (Index j = 0; j < t.numel(); ++j) w.put<S>(t.data[j]);
  }
  return std::move(w.bytes);
}

template <typename S>
Model<S> deserialize_model(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  std::string magic;
  for (int i = 0; i < 4; ++i) magic.push_back(r.get<char>());
  if (magic != "IBAB") throw Error(ErrorCode::bad_magic, "checkpoint magic at offset 0 is not IBAB");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) bad("unsupported checkpoint version " + std::to_string(version));
  NetworkSpec s;
  const auto tier = r.get<std::uint8_t>(), objective = r.get<std::uint8_t>();
  if (tier > 2 || objective > 2) bad("invalid tier/objective code");
  s.tier = static_cast<Tier>(tier);
  s.objective = static_cast<Objective>(objective);
  s.channels = r.get<std::uint32_t>();
  s.height = r.get<std::uint32_t>();
  s.width = r.get<std::uint32_t>();
  s.num_classes = static_cast<int>(r.get<std::uint32_t>());
  s.beta = r.get<double>();
  s.latent_channels = static_cast<int>(r.get<std::uint32_t>());
  for (auto* v : {&s.input_mean, &s.input_std}) {
    v->resize(r.get<std::uint32_t>());
    for (double& x : *v) x = r.get<double>();
  }
  Model<S> m = build_model<S>(s, 0);
  const auto count = r.get<std::uint32_t>();
  if (count != m.params.size())
    bad("checkpoint holds " + std::to_string(count) + " parameters, architecture needs " + std::to_string(m.params.size()));
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.get_string();
    const auto dtype = r.get<std::uint8_t>();
    if (dtype != 4 && dtype != 8) bad("parameter '" + name + "' has unknown dtype width " + std::to_string(dtype));
    std::vector<Index> dims(r.get<std::uint32_t>());
    for (Index& d : dims) d = static_cast<Index>(r.get<std::uint64_t>());
    Tensor<S>& dst = m.params.at(name);
    if (Shape(dims) != dst.shape) bad("parameter '" + name + "' has shape " + Shape(dims).to_string());
    for (Index j = 0; j < dst.numel(); ++j) dst.data[j] = dtype == 4 ? S(r.get<float>()) : S(r.get<double>());
  }
  if (!r.done()) bad("trailing bytes after offset " + std::to_string(r.offset()));
  return m;
}

template <typename S>
void save_model(const Model<S>& model, const std::filesystem::path& path) {
  const auto bytes = serialize_model(model);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::io_error, "cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

template <typename S>
Model<S> load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io_error, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_model<S>(bytes);
}

#define IBR_INSTANTIATE(S)                                                          \
  template std::vector<std::uint8_t> serialize_model(const Model<S>&);             \
  template Model<S> deserialize_model<S>(const std::vector<std::uint8_t>&);        \
  template void save_model(const Model<S>&, const std::filesystem::path&);         \
  template Model<S> load_model<S>(const std::filesystem::path&);
IBR_INSTANTIATE(float)
IBR_INSTANTIATE(double)
#undef IBR_INSTANTIATE

}  // namespace ibr
