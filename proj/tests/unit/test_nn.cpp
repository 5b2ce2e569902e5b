#include <cmath>
#include <random>

#include "doctest.h"
#include "ibr/core/gradcheck.hpp"
#include "ibr/nn/bottleneck.hpp"
#include "ibr/nn/checkpoint.hpp"
#include "ibr/nn/model.hpp"

using namespace ibr;

namespace {

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

NetworkSpec mnist_spec(Tier tier, Objective objective) {
  NetworkSpec s;
  s.tier = tier;
  s.objective = objective;
  s.input_mean = {0.1307};
  s.input_std = {0.3081};
  s.latent_channels = objective == Objective::SVBI ? 4 : 64;
  return s;
}

Tensor<double> random_images(Index n, const NetworkSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  Tensor<double> x = Tensor<double>::zeros(spec.input_shape(n));
  for (Index i = 0; i < x.numel(); ++i) x.data[i] = u(rng);
  return x;
}

std::size_t coded_bits(const std::vector<std::uint8_t>& s) { return 8 * s.size(); }

}  // namespace

TEST_CASE("D1 Base parameter count is in the desk-scale band") {
  const auto m = build_model<float>(mnist_spec(Tier::D1, Objective::Base), 1);
  CHECK(m.params.count() >= 200000);
  CHECK(m.params.count() <= 400000);
  CHECK(m.params.count() == 267594);  // regression fixture
}

TEST_CASE("SVBI encoder is at most 2% of the Base backbone") {
  for (Tier tier : {Tier::D1, Tier::D2, Tier::D3}) {
    const auto base = build_model<float>(mnist_spec(tier, Objective::Base), 1);
    const auto svbi = build_model<float>(mnist_spec(tier, Objective::SVBI), 1);
    CHECK(static_cast<double>(encoder_parameter_count(svbi)) / static_cast<double>(base.params.count()) <= 0.02);
  }
}

TEST_CASE("tiers have 8, 14 and 20 residual blocks") {
  int expected[] = {8, 14, 20};
  int i = 0;
  for (Tier tier : {Tier::D1, Tier::D2, Tier::D3}) {
    const auto m = build_model<float>(mnist_spec(tier, Objective::Base), 1);
    int blocks = 0;
    for (const auto& l : m.layers) blocks += l.kind == LayerKind::block;
    CHECK(blocks == expected[i++]);
  }
}

TEST_CASE("initialization is deterministic in the seed") {
  const auto a = build_model<float>(mnist_spec(Tier::D2, Objective::DVIB), 42);
  const auto b = build_model<float>(mnist_spec(Tier::D2, Objective::DVIB), 42);
  const auto c = build_model<float>(mnist_spec(Tier::D2, Objective::DVIB), 43);
  bool differs = false;
  for (std::size_t i = 0; i < a.params.size(); ++i) {
    CHECK(a.params.name(i) == b.params.name(i));
    CHECK((a.params.value(i).data == b.params.value(i).data).all());
    differs |= !(a.params.value(i).data == c.params.value(i).data).all();
  }
  CHECK(differs);
}

TEST_CASE("unsupported shapes are rejected") {
  auto s = mnist_spec(Tier::D1, Objective::Base);
  s.height = 4;
  CHECK(code_of([&] { build_model<float>(s, 0); }) == ErrorCode::unsupported_shape);
  s = mnist_spec(Tier::D1, Objective::SVBI);
  s.height = s.width = 26;  // stem output 13x13 cannot be reproduced by the decoder
  CHECK(code_of([&] { build_model<float>(s, 0); }) == ErrorCode::unsupported_shape);
  s = mnist_spec(Tier::D1, Objective::Base);
  s.input_std = {0.0};
  CHECK(code_of([&] { build_model<float>(s, 0); }) == ErrorCode::unsupported_shape);
}

TEST_CASE("split head and tail reproduce the unsplit forward exactly") {
  for (Objective o : {Objective::Base, Objective::DVIB, Objective::SVBI}) {
    const auto spec = mnist_spec(Tier::D1, o);
    const auto m = build_model<double>(spec, 3);
    const auto x = random_images(4, spec, 9);
    Tape<double> t;
    const Binding<double> b(m.params, t);
    ForwardState<double> st;
    const auto full = forward(m, b, t.constant(x), st).value();
    for (Index split : {Index(0), m.split_index, Index(m.layers.size())}) {
      const SplitBackbone sb = split_backbone(m, split);
      ForwardState<double> st2;
      const auto h = run_head(m, sb, b, t.constant(x), st2);
      const auto y = run_tail(m, sb, b, h, st2).value();
      CHECK((y.data - full.data).abs().maxCoeff() == 0.0);
    }
  }
}

TEST_CASE("SVBI head output has the teacher head's shape and the teacher tail is attached") {
  const auto base = build_model<double>(mnist_spec(Tier::D1, Objective::Base), 1);
  auto svbi = build_model<double>(mnist_spec(Tier::D1, Objective::SVBI), 2);
  attach_teacher_tail(svbi, base);
  CHECK((svbi.params.at("fc.w").data == base.params.at("fc.w").data).all());
  const auto x = random_images(2, svbi.spec, 1);
  Tape<double> t;
  const Binding<double> b(base.params, t), bs(svbi.params, t);
  ForwardState<double> st, ss;
  const auto h = run_layers(base, b, t.constant(x), st, 0, base.split_index);
  forward(svbi, bs, t.constant(x), ss);
  CHECK(ss.head_output.shape() == h.shape());
  CHECK(ss.code.symbols.size() == 2u * 4 * 7 * 7);
  CHECK(ss.code.bpp > 0);
  CHECK(code_of([&] { attach_teacher_tail(svbi, svbi); }) == ErrorCode::teacher_missing);
}

TEST_CASE("reparam_sample examples") {
  Tape<double> t;
  auto mu = t.variable(Tensor<double>::from({1, 3}, {1, -2, 0.5}));
  auto sigma = t.variable(Tensor<double>::from({1, 3}, {2, 2, 2}));
  auto z0 = reparam_sample(mu, sigma, Tensor<double>::zeros({1, 3}));
  CHECK((z0.value().data == mu.value().data).all());
  auto z = reparam_sample(mu, sigma, Tensor<double>::from({1, 3}, {0.5, 0.5, 0.5}));
  CHECK(z.value().data[0] == doctest::Approx(2.0));
  auto tiny = t.constant(Tensor<double>::from({1, 3}, {0, 0, 0}));
  auto zt = reparam_sample(mu, tiny, Tensor<double>::from({1, 3}, {1, 1, 1}));
  CHECK((zt.value().data - mu.value().data).abs().maxCoeff() <= 1e-6 + 1e-15);
  auto g = t.backward(sum(z));
  CHECK(g[mu].data[0] == 1.0);
  CHECK(g[sigma].data[0] == 0.5);
  CHECK(code_of([&] { reparam_sample(mu, sigma, Tensor<double>::zeros({3})); }) == ErrorCode::shape_mismatch);
}

TEST_CASE("kl_std_normal closed forms") {
  Tape<double> t;
  auto kl = [&](std::initializer_list<double> mu, std::initializer_list<double> sigma) {
    const Shape s{1, static_cast<Index>(mu.size())};
    return kl_std_normal(t.constant(Tensor<double>::from(s, mu)), t.constant(Tensor<double>::from(s, sigma))).value().item();
  };
  CHECK(kl({0, 0}, {1, 1}) == 0.0);
  CHECK(kl({1}, {1}) == doctest::Approx(0.5));
  CHECK(kl({0}, {std::exp(1.0)}) == doctest::Approx((std::exp(2.0) - 3) / 2));
  CHECK(code_of([&] { kl({0}, {0}); }) == ErrorCode::non_positive_sigma);
  CHECK(code_of([&] { kl({0}, {-1}); }) == ErrorCode::non_positive_sigma);
}

TEST_CASE("kl_std_normal is nonnegative and zero only at the prior") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0, 1);
  std::uniform_real_distribution<double> u(0.05, 3);
  for (int trial = 0; trial < 500; ++trial) {
    Tape<double> t;
    Tensor<double> mu = Tensor<double>::zeros({2, 4}), sigma = Tensor<double>::zeros({2, 4});
    for (Index i = 0; i < 8; ++i) {
      mu.data[i] = n(rng);
      sigma.data[i] = u(rng);
    }
    const double v = kl_std_normal(t.constant(mu), t.constant(sigma)).value().item();
    CHECK(v > 1e-9);
  }
  Tape<double> t;
  CHECK(kl_std_normal(t.constant(Tensor<double>::zeros({3, 2})), t.constant(Tensor<double>::full({3, 2}, 1.0)))
            .value()
            .item() <= 1e-9);
}

TEST_CASE("kl and sigma parameterization gradients match finite differences") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0, 1);
  Tensor<double> p = Tensor<double>::zeros({12});
  for (Index i = 0; i < 12; ++i) p.data[i] = n(rng);
  GraphFn<double> f = [](Tape<double>&, const Var<double>& v) {
    auto mu = reshape(slice(v, 0, 0, 6), {2, 3});
    auto sigma = sigma_from_raw(reshape(slice(v, 0, 6, 6), {2, 3}));
    return kl_std_normal(mu, sigma);
  };
  CHECK(finite_diff_check(f, p, 1e-5, 1e-5).passed);
}

TEST_CASE("spline likelihood gradients match finite differences") {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> n(0, 1);
  // Packed point: latent [2,3,2,2] (24), offset [3], raw [3,8] (24).
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<double> p = Tensor<double>::zeros({51});
    for (Index i = 0; i < 24; ++i) p.data[i] = 3 * n(rng);
    for (Index i = 24; i < 27; ++i) p.data[i] = -8 + 0.3 * n(rng);
    for (Index i = 27; i < 51; ++i) p.data[i] = 1.85 + 0.5 * n(rng);
    GraphFn<double> f = [](Tape<double>&, const Var<double>& v) {
      auto y = reshape(slice(v, 0, 0, 24), {2, 3, 2, 2});
      auto offset = slice(v, 0, 24, 3);
      auto raw = reshape(slice(v, 0, 27, 24), {3, kSplineSegments});
      return sum(spline_bits(y, offset, raw));
    };
    const auto r = finite_diff_check(f, p, 1e-6, 1e-5);
    CHECK(r.passed);
    CHECK(r.checked > 40);
  }
}

TEST_CASE("tabulated entropy model is a valid pmf with monotone CDF") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0, 1);
  Tensor<double> offset = spline_offset_init<double>(3), raw = spline_raw_init<double>(3);
  for (Index i = 0; i < raw.numel(); ++i) raw.data[i] += n(rng);
  for (Index c = 0; c < 3; ++c) {
    double prev = 0;
    for (double x = -20; x <= 20; x += 0.25) {
      const double v = spline_cdf(offset, raw, c, x);
      CHECK(v >= prev);
      CHECK(v > 0);
      CHECK(v < 1);
      prev = v;
    }
  }
  const auto table = tabulate(offset, raw);
  CHECK(table.support() == kSymbolMax - kSymbolMin + 1);
  for (Index c = 0; c < 3; ++c) {
    double total = 0;
    for (int s = kSymbolMin; s <= kSymbolMax; ++s) {
      CHECK(table.probability(c, s) > 0);
      total += table.probability(c, s);
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("quantize_and_rate examples") {
  SUBCASE("near-degenerate model on an all-zero latent") {
    std::vector<double> pmf(33, 1e-12);
    pmf[16] = 1.0;
    const auto m = from_pmf({pmf}, -16);
    const auto code = quantize_and_rate(Tensor<double>::zeros({1, 1, 28, 28}), m, 28 * 28);
    CHECK(code.bpp <= 0.001);
  }
  SUBCASE("uniform over 256 symbols, latent as large as the image") {
    const auto m = uniform_model(1, 0, 255);
    Tensor<double> y = Tensor<double>::zeros({1, 1, 28, 28});
    std::mt19937_64 rng(1);
    for (Index i = 0; i < y.numel(); ++i) y.data[i] = static_cast<double>(rng() % 256);
    const auto code = quantize_and_rate(y, m, 28 * 28);
    CHECK(code.bpp == doctest::Approx(8.0).epsilon(1e-12));
  }
  SUBCASE("rate equals the summed surprisal") {
    const auto m = tabulate(spline_offset_init<double>(2), spline_raw_init<double>(2));
    Tensor<double> y = Tensor<double>::from({1, 2, 1, 3}, {0.2, -1.7, 3.4, 0, 15.9, -16.2});
    const auto code = quantize_and_rate(y, m, 6);
    double bits = 0;
    for (double p : code.likelihoods) bits -= std::log2(p);
    CHECK(code.rate_bits == doctest::Approx(bits).epsilon(1e-6));
    CHECK(code.bpp == doctest::Approx(bits / 6));
    CHECK(code.symbols == std::vector<int>{0, -2, 3, 0, 16, -16});
  }
  SUBCASE("symbols outside the support have zero likelihood") {
    const auto m = uniform_model(1, -2, 2);
    CHECK(code_of([&] { quantize_and_rate(Tensor<double>::from({3}, {0, 1, 3}), m, 3); }) ==
          ErrorCode::zero_likelihood);
  }
}

TEST_CASE("train-mode quantization adds bounded noise; eval mode is deterministic") {
  Tape<double> t;
  Tensor<double> y0 = Tensor<double>::zeros({2, 2, 3, 3});
  std::mt19937_64 g(3);
  std::normal_distribution<double> n(0, 2);
  for (Index i = 0; i < y0.numel(); ++i) y0.data[i] = n(g);
  auto y = t.variable(y0);
  auto off = t.variable(spline_offset_init<double>(2));
  auto raw = t.variable(spline_raw_init<double>(2));
  std::mt19937_64 rng(1);
  auto q = quantize_and_rate(y, off, raw, Mode::train, &rng, 9);
  const Array<double> diff = q.values.value().data - y0.data;
  CHECK(diff.minCoeff() >= -0.5);
  CHECK(diff.maxCoeff() < 0.5);
  CHECK(q.code.rate_bits == doctest::Approx(q.bits.value().data.sum()));
  auto grads = t.backward(sum(q.bits));
  CHECK(grads[raw].data.abs().maxCoeff() > 0);
  auto e1 = quantize_and_rate(y, off, raw, Mode::eval, nullptr, 9);
  auto e2 = quantize_and_rate(y, off, raw, Mode::eval, nullptr, 9);
  CHECK(e1.code.bpp == e2.code.bpp);
  CHECK(e1.code.symbols == e2.code.symbols);
  CHECK(code_of([&] { quantize_and_rate(y, off, raw, Mode::train, nullptr, 9); }) == ErrorCode::config_error);
}

TEST_CASE("range coder examples") {
  SUBCASE("empty input round-trips to empty") {
    const auto m = uniform_model(1, 0, 3);
    LatentCode code;
    const auto s = entropy_encode(code, m);
    CHECK(s.empty());
    CHECK(entropy_decode(s, m, 0, 1).empty());
  }
  SUBCASE("single fair bit") {
    const auto m = from_pmf({{0.5, 0.5}}, 0);
    const auto code = code_symbols(Shape{1}, {1}, m, 1);
    const auto s = entropy_encode(code, m);
    CHECK(code.rate_bits == doctest::Approx(1.0));
    CHECK(coded_bits(s) <= 1 + 32);
    CHECK(entropy_decode(s, m, 1, 1) == std::vector<int>{1});
  }
  SUBCASE("10^4 symbols drawn from the model code near their entropy") {
    const auto m = from_pmf({{0.02, 0.08, 0.6, 0.2, 0.07, 0.03}}, -2);
    std::mt19937_64 rng(77);
    std::discrete_distribution<int> d({0.02, 0.08, 0.6, 0.2, 0.07, 0.03});
    std::vector<int> syms(10000);
    for (int& s : syms) s = d(rng) - 2;
    const auto code = code_symbols(Shape{10000}, syms, m, 1);
    const auto s = entropy_encode(code, m);
    CHECK(static_cast<double>(coded_bits(s)) <= code.rate_bits * 1.02 + 32);
    CHECK(static_cast<double>(coded_bits(s)) >= code.rate_bits - 1);
    CHECK(entropy_decode(s, m, 10000, 1) == syms);
  }
  SUBCASE("out-of-support symbols and corrupt streams are rejected") {
    const auto m = uniform_model(1, 0, 3);
    CHECK(code_of([&] {
            LatentCode c;
            c.shape = Shape{1};
            c.symbols = {7};
            entropy_encode(c, m);
          }) == ErrorCode::symbol_out_of_support);
    const auto code = code_symbols(Shape{4}, {1, 2, 3, 0}, m, 1);
    auto s = entropy_encode(code, m);
    for (int i = 0; i < 16; ++i) s.push_back(0x5a);
    CHECK(code_of([&] { entropy_decode(s, m, 4, 1); }) == ErrorCode::corrupt_stream);
  }
}

TEST_CASE("range coder round-trips randomized streams within the rate bound") {
  std::mt19937_64 rng(2025);
  int failures = 0;
  for (int stream = 0; stream < 100000; ++stream) {
    const int channels = 1 + static_cast<int>(rng() % 3);
    const int support = 2 + static_cast<int>(rng() % 40);
    std::vector<std::vector<double>> pmf(static_cast<std::size_t>(channels));
    std::uniform_real_distribution<double> u(0, 1);
    for (auto& row : pmf)
      for (int k = 0; k < support; ++k) row.push_back(std::pow(u(rng), 4));
    const auto m = from_pmf(pmf, -support / 2);
    const int plane = 1 + static_cast<int>(rng() % 4);
    const int count = channels * plane * static_cast<int>(rng() % 8);
    std::vector<int> syms(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
      const auto& row = pmf[static_cast<std::size_t>((i / plane) % channels)];
      syms[static_cast<std::size_t>(i)] = std::discrete_distribution<int>(row.begin(), row.end())(rng) + m.symbol_min;
    }
    Shape shape = count > 0 ? Shape{count / (channels * plane), channels, plane} : Shape{};
    const auto code = code_symbols(shape, syms, m, 1);
    const auto s = entropy_encode(code, m);
    const bool ok = entropy_decode(s, m, count, plane) == syms && static_cast<double>(coded_bits(s)) <= code.rate_bits + 32;
    failures += !ok;
  }
  CHECK(failures == 0);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  auto m = build_model<float>(mnist_spec(Tier::D1, Objective::SVBI), 5);
  m.spec.beta = 0.125;
  const auto bytes = serialize_model(m);
  const auto back = deserialize_model<float>(bytes);
  CHECK(serialize_model(back) == bytes);
  CHECK(back.spec.beta == 0.125);
  CHECK(back.spec.objective == Objective::SVBI);
  for (std::size_t i = 0; i < m.params.size(); ++i) CHECK((back.params.value(i).data == m.params.value(i).data).all());
  const auto wide = deserialize_model<double>(bytes);
  CHECK(wide.params.value(0).data[0] == static_cast<double>(m.params.value(0).data[0]));

  auto bad = bytes;
  bad[0] = 'X';
  CHECK(code_of([&] { deserialize_model<float>(bad); }) == ErrorCode::bad_magic);
  auto cut = bytes;
  cut.resize(bytes.size() / 2);
  CHECK(code_of([&] { deserialize_model<float>(cut); }) == ErrorCode::truncated_file);
  auto extra = bytes;
  extra.push_back(0);
  CHECK(code_of([&] { deserialize_model<float>(extra); }) == ErrorCode::checkpoint_format);
}
