#include <cmath>
#include <functional>
#include <random>

#include "doctest.h"
#include "ibr/core/gradcheck.hpp"
#include "ibr/core/ops.hpp"

using namespace ibr;

namespace {

template <typename S>
Tensor<S> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<S> t = Tensor<S>::zeros(shape);
  for (Index i = 0; i < t.numel(); ++i) t.data[i] = S(u(rng));
  return t;
}

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

// Direct-summation convolution used as an independent oracle.
std::vector<double> naive_conv(const std::vector<double>& x, int n, int c, int h, int w, const std::vector<double>& k,
                               int f, int kh, int kw, int stride, int pad, int& ho, int& wo) {
  ho = (h + 2 * pad - kh) / stride + 1;
  wo = (w + 2 * pad - kw) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(n * f * ho * wo), 0.0);
  for (int b = 0; b < n; ++b)
    for (int o = 0; o < f; ++o)
      for (int i = 0; i < ho; ++i)
        for (int j = 0; j < wo; ++j) {
          double acc = 0;
          for (int ch = 0; ch < c; ++ch)
            for (int a = 0; a < kh; ++a)
              for (int bb = 0; bb < kw; ++bb) {
                const int y = i * stride - pad + a, xx = j * stride - pad + bb;
                if (y < 0 || y >= h || xx < 0 || xx >= w) continue;
                acc += x[static_cast<std::size_t>(((b * c + ch) * h + y) * w + xx)] *
                       k[static_cast<std::size_t>(((o * c + ch) * kh + a) * kw + bb)];
              }
          out[static_cast<std::size_t>(((b * f + o) * ho + i) * wo + j)] = acc;
        }
  return out;
}

// Randomized primitive cases: the checked point packs every differentiable operand, the
// graph slices it apart, applies the op, and contracts with a fixed random weight.
struct PrimitiveCase {
  std::string name;
  Index numel;
  double lo, hi;
  std::function<Var<double>(Tape<double>&, const Var<double>&, std::mt19937_64&)> f64;
  std::function<Var<float>(Tape<float>&, const Var<float>&, std::mt19937_64&)> f32;
};

template <typename S>
Var<S> part(const Var<S>& packed, Index start, const Shape& shape) {
  return reshape(slice(packed, 0, start, shape.numel()), shape);
}

template <typename S>
Var<S> contract(Tape<S>& t, const Var<S>& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, t.constant(random_tensor<S>(y.shape(), rng))));
}

template <typename S>
Var<S> build_case(const std::string& name, Tape<S>& t, const Var<S>& p) {
  if (name == "add") return contract(t, add(part(p, 0, {2, 3}), part(p, 6, {2, 3})), 1);
  if (name == "sub") return contract(t, sub(part(p, 0, {2, 3}), part(p, 6, {2, 3})), 2);
  if (name == "mul") return contract(t, mul(part(p, 0, {2, 3}), part(p, 6, {2, 3})), 3);
  if (name == "scale") return contract(t, scale(p, S(-1.7)), 4);
  if (name == "add_scalar") return contract(t, add_scalar(p, S(0.3)), 5);
  if (name == "matmul") return contract(t, matmul(part(p, 0, {3, 4}), part(p, 12, {4, 2})), 6);
  if (name == "linear") return contract(t, linear(part(p, 0, {3, 4}), part(p, 12, {2, 4}), part(p, 20, {2})), 7);
  if (name == "conv2d")
    return contract(t, conv2d(part(p, 0, {2, 2, 5, 5}), part(p, 100, {3, 2, 3, 3}), part(p, 154, {3}), {2, 1}), 8);
  if (name == "conv_transpose2d")
    return contract(
        t, conv_transpose2d(part(p, 0, {2, 2, 3, 3}), part(p, 36, {2, 3, 4, 4}), part(p, 132, {3}), {2, 1, 0}), 9);
  if (name == "relu") return contract(t, relu(p), 10);
  if (name == "softplus") return contract(t, softplus(p), 11);
  if (name == "tanh") return contract(t, tanh(p), 12);
  if (name == "sigmoid") return contract(t, sigmoid(p), 13);
  if (name == "exp") return contract(t, exp(p), 14);
  if (name == "log") return contract(t, log(p), 15);
  if (name == "square") return contract(t, square(p), 16);
  if (name == "abs") return contract(t, abs(p), 17);
  if (name == "sqrt") return contract(t, sqrt(p), 18);
  if (name == "sum") return scale(sum(square(p)), S(0.5));
  if (name == "mean") return mean(mul(p, p));
  if (name == "sum_per_sample") return contract(t, sum_per_sample(square(reshape(p, {3, 4}))), 19);
  if (name == "max_pool2d") return contract(t, max_pool2d(reshape(p, {1, 2, 4, 4}), 2, 2), 20);
  if (name == "slice") return contract(t, slice(reshape(p, {2, 3, 4}), 1, 1, 2), 21);
  if (name == "concat")
    return contract(t, concat<S>({part(p, 0, {2, 3}), part(p, 6, {2, 1}), part(p, 8, {2, 2})}, 1), 22);
  if (name == "log_softmax") return contract(t, log_softmax(reshape(p, {3, 4})), 23);
  if (name == "softmax") return contract(t, softmax(reshape(p, {3, 4})), 24);
  if (name == "pick") return contract(t, pick(reshape(p, {3, 4}), {1, 3, 0}), 25);
  if (name == "max_excluding") return contract(t, max_excluding(reshape(p, {3, 4}), {1, 3, 0}), 26);
  if (name == "clamp") return contract(t, clamp(p, S(-0.5), S(0.5)), 27);
  FAIL("unknown case " << name);
  return p;
}

struct CaseSpec {
  const char* name;
  Index numel;
  double lo, hi;
};

const std::vector<CaseSpec> kCases = {
    {"add", 12, -1, 1},        {"sub", 12, -1, 1},          {"mul", 12, -1, 1},
    {"scale", 5, -1, 1},       {"add_scalar", 5, -1, 1},    {"matmul", 20, -1, 1},
    {"linear", 22, -1, 1},     {"conv2d", 157, -1, 1},      {"conv_transpose2d", 135, -1, 1},
    {"relu", 8, -1, 1},        {"softplus", 8, -3, 3},      {"tanh", 8, -2, 2},
    {"sigmoid", 8, -3, 3},     {"exp", 8, -2, 2},           {"log", 8, 0.2, 3},
    {"square", 8, -2, 2},      {"abs", 8, -1, 1},           {"sqrt", 8, 0.2, 3},
    {"sum", 7, -1, 1},         {"mean", 7, -1, 1},          {"sum_per_sample", 12, -1, 1},
    {"max_pool2d", 32, -1, 1}, {"slice", 24, -1, 1},        {"concat", 12, -1, 1},
    {"log_softmax", 12, -3, 3}, {"softmax", 12, -3, 3},     {"pick", 12, -1, 1},
    {"max_excluding", 12, -1, 1}, {"clamp", 8, -1, 1},
};

}  // namespace

TEST_CASE("reshape keeps element order") {
  Tape<double> t;
  auto x = t.constant(Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6}));
  auto y = reshape(x, {3, 2});
  CHECK(y.shape() == Shape{3, 2});
  for (Index i = 0; i < 6; ++i) CHECK(y.value().data[i] == doctest::Approx(i + 1));
}

TEST_CASE("softmax of equal logits is uniform") {
  Tape<double> t;
  auto y = softmax(t.constant(Tensor<double>::from({1, 2}, {0, 0})));
  CHECK(y.value().data[0] == doctest::Approx(0.5));
  CHECK(y.value().data[1] == doctest::Approx(0.5));
}

TEST_CASE("conv2d of ones matches direct summation") {
  Tape<double> t;
  auto x = t.constant(Tensor<double>::full({1, 1, 3, 3}, 1.0));
  auto k = t.constant(Tensor<double>::full({1, 1, 2, 2}, 1.0));
  auto y = conv2d(x, k, Var<double>{});
  REQUIRE(y.shape() == Shape{1, 1, 2, 2});
  for (Index i = 0; i < 4; ++i) CHECK(y.value().data[i] == 4.0);
}

TEST_CASE("conv2d agrees with the naive oracle on random inputs") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const int stride = 1 + trial % 2, pad = trial % 3;
    auto x = random_tensor<double>({2, 3, 6, 5}, rng);
    auto k = random_tensor<double>({4, 3, 3, 2}, rng);
    Tape<double> t;
    auto y = conv2d(t.constant(x), t.constant(k), Var<double>{}, {stride, pad});
    int ho = 0, wo = 0;
    auto ref = naive_conv(std::vector<double>(x.data.begin(), x.data.end()), 2, 3, 6, 5,
                          std::vector<double>(k.data.begin(), k.data.end()), 4, 3, 2, stride, pad, ho, wo);
    REQUIRE(y.shape() == Shape{2, 4, ho, wo});
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y.value().data[static_cast<Index>(i)] == doctest::Approx(ref[i]));
  }
}

TEST_CASE("conv_transpose2d is the adjoint of conv2d") {
  std::mt19937_64 rng(11);
  auto w = random_tensor<double>({3, 2, 4, 4}, rng);  // conv: 2 -> 3 channels; transpose: 3 -> 2
  auto x = random_tensor<double>({2, 2, 8, 8}, rng);
  Tape<double> t;
  auto y = conv2d(t.constant(x), t.constant(w), Var<double>{}, {2, 1});
  auto v = random_tensor<double>(y.shape(), rng);
  auto xt = conv_transpose2d(t.constant(v), t.constant(w), Var<double>{}, {2, 1, 0});
  REQUIRE(xt.shape() == x.shape);
  const double lhs = (y.value().data * v.data).sum();
  const double rhs = (x.data * xt.value().data).sum();
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("backward of x^2 at 3 is 6") {
  Tape<double> t;
  auto x = t.variable(Tensor<double>::scalar(3.0));
  auto g = t.backward(square(x));
  CHECK(g[x].item() == doctest::Approx(6.0));
}

TEST_CASE("cross-entropy gradient at uniform logits equals (softmax - onehot)/batch") {
  const Index n = 4, k = 5;
  std::vector<int> labels{0, 3, 4, 1};
  Tape<double> t;
  auto z = t.variable(Tensor<double>::zeros({n, k}));
  auto loss = scale(mean(pick(log_softmax(z), labels)), -1.0);
  auto g = t.backward(loss)[z];
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < k; ++j) {
      const double expected = (1.0 / k - (labels[static_cast<std::size_t>(i)] == j ? 1.0 : 0.0)) / n;
      CHECK(g.data[i * k + j] == doctest::Approx(expected).epsilon(1e-12));
    }
}

TEST_CASE("random 3-layer MLP gradients match central differences at 64-bit") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 5; ++trial) {
    // Packed point: x [2,5], W1 [6,5], b1 [6], W2 [4,6], b2 [4], W3 [3,4], b3 [3].
    const Index total = 10 + 30 + 6 + 24 + 4 + 12 + 3;
    auto point = random_tensor<double>({total}, rng);
    GraphFn<double> mlp = [](Tape<double>& t, const Var<double>& p) {
      auto x = part(p, 0, {2, 5});
      auto h1 = tanh(linear(x, part(p, 10, {6, 5}), part(p, 40, {6})));
      auto h2 = softplus(linear(h1, part(p, 46, {4, 6}), part(p, 70, {4})));
      auto z = linear(h2, part(p, 74, {3, 4}), part(p, 86, {3}));
      return scale(mean(pick(log_softmax(z), {2, 0})), -1.0) + sum(square(z)) * 0.01;
      (void)t;
    };
    auto r = finite_diff_check(mlp, point, 1e-5, 1e-5);
    CHECK(r.passed);
    CHECK(r.checked == total);
    CHECK(r.max_rel_error < 1e-5);
  }
}

TEST_CASE("finite_diff_check on the documented examples") {
  SUBCASE("x^2 at 1") {
    GraphFn<double> f = [](Tape<double>&, const Var<double>& x) { return sum(square(x)); };
    auto r = finite_diff_check(f, Tensor<double>::scalar(1.0), 1e-4, 1e-6);
    CHECK(r.passed);
    CHECK(r.max_rel_error < 1e-6);
  }
  SUBCASE("|x| at 0 is a kink") {
    GraphFn<double> f = [](Tape<double>&, const Var<double>& x) { return sum(abs(x)); };
    auto r = finite_diff_check(f, Tensor<double>::scalar(0.0), 1e-4, 1e-6);
    CHECK(r.skipped);
    CHECK(r.skipped_coordinates == 1);
    CHECK_FALSE(r.warnings.empty());
  }
  SUBCASE("constant function") {
    GraphFn<double> f = [](Tape<double>&, const Var<double>& x) { return add_scalar(scale(sum(x), 0.0), 2.0); };
    auto r = finite_diff_check(f, Tensor<double>::from({3}, {1, 2, 3}), 1e-4, 1e-6);
    CHECK(r.passed);
    CHECK(r.max_rel_error == 0.0);
  }
  SUBCASE("non-finite evaluation") {
    GraphFn<double> f = [](Tape<double>&, const Var<double>& x) { return sum(log(x)); };
    CHECK(code_of([&] { finite_diff_check(f, Tensor<double>::scalar(0.0), 1e-4, 1e-6); }) ==
          ErrorCode::non_finite_evaluation);
  }
}

TEST_CASE("every primitive matches central differences over randomized trials") {
  std::mt19937_64 rng(99);
  for (const auto& c : kCases) {
    double worst64 = 0, worst32 = 0;
    for (int trial = 0; trial < 100; ++trial) {
      auto p64 = random_tensor<double>({c.numel}, rng, c.lo, c.hi);
      const std::string name = c.name;
      GraphFn<double> f64 = [name](Tape<double>& t, const Var<double>& p) { return build_case(name, t, p); };
      GraphFn<float> f32 = [name](Tape<float>& t, const Var<float>& p) { return build_case(name, t, p); };
      auto r = finite_diff_check(f64, p64, 1e-5, 1e-5);
      worst64 = std::max(worst64, r.max_rel_error);
      // 32-bit analytic gradient against the 64-bit central-difference oracle.
      auto p32 = p64.cast<float>();
      auto a32 = analytic_gradient(f32, p32);
      std::vector<bool> kinks;
      auto n64 = numeric_gradient(f64, p32.cast<double>(), 1e-5, &kinks);
      for (Index i = 0; i < a32.numel(); ++i)
        if (!kinks[static_cast<std::size_t>(i)])
          worst32 = std::max(worst32, relative_error(a32.data[i], n64.data[i], 1e-3));
    }
    INFO(c.name);
    CHECK(worst64 < 1e-5);
    CHECK(worst32 < 1e-3);
  }
}

TEST_CASE("backward is linear in the loss") {
  std::mt19937_64 rng(5);
  auto x0 = random_tensor<double>({3, 4}, rng);
  const double a = 1.7, b = -0.6;
  Tape<double> t;
  auto x = t.variable(x0);
  auto f = sum(tanh(x));
  auto g = mean(square(softplus(x)));
  auto combo = add(scale(f, a), scale(g, b));
  auto gc = t.backward(combo)[x], gf = t.backward(f)[x], gg = t.backward(g)[x];
  CHECK(((gc.data - (a * gf.data + b * gg.data)).abs().maxCoeff()) < 1e-10);
}

TEST_CASE("replaying a frozen tape yields bit-identical gradients and visits each node once") {
  std::mt19937_64 rng(6);
  Tape<float> t;
  auto x = t.variable(random_tensor<float>({2, 1, 6, 6}, rng));
  auto w = t.variable(random_tensor<float>({3, 1, 3, 3}, rng));
  auto h = relu(conv2d(x, w, Var<float>{}, {1, 1}));
  auto shared = tanh(h);
  auto loss = sum(add(shared, mul(shared, shared)));  // fan-out on `shared`
  t.freeze();
  auto g1 = t.backward(loss);
  auto g2 = t.backward(loss);
  CHECK((g1[x].data == g2[x].data).all());
  CHECK((g1[w].data == g2[w].data).all());
  CHECK(g1.nodes_visited() == 6);  // conv, relu, tanh, mul, add, sum
  CHECK(code_of([&] { relu(x); }) == ErrorCode::tape_frozen);
}

TEST_CASE("fan-out gradients accumulate") {
  Tape<double> t;
  auto x = t.variable(Tensor<double>::scalar(2.0));
  auto y = add(mul(x, x), x);  // x^2 + x
  CHECK(t.backward(y)[x].item() == doctest::Approx(5.0));
}

TEST_CASE("subgradient 0 at relu and abs kinks") {
  Tape<double> t;
  auto x = t.variable(Tensor<double>::from({2}, {0.0, 0.0}));
  CHECK(t.backward(sum(relu(x)))[x].data.abs().maxCoeff() == 0.0);
  CHECK(t.backward(sum(abs(x)))[x].data.abs().maxCoeff() == 0.0);
}

TEST_CASE("round_ste rounds forward and passes gradients straight through") {
  Tape<double> t;
  auto x = t.variable(Tensor<double>::from({3}, {0.4, 1.6, -2.5}));
  auto y = round_ste(x);
  CHECK(y.value().data[0] == 0.0);
  CHECK(y.value().data[1] == 2.0);
  CHECK(y.value().data[2] == -3.0);
  CHECK((t.backward(sum(y))[x].data == 1.0).all());
}

TEST_CASE("generic dispatcher routes to primitives") {
  Tape<double> t;
  auto a = t.variable(Tensor<double>::from({2, 2}, {1, 2, 3, 4}));
  OpParams p;
  p.shape = Shape{4};
  auto r = forward(t, OpKind::reshape, {a}, p);
  CHECK(r.shape() == Shape{4});
  auto s = forward(t, OpKind::sum, {r});
  CHECK(s.value().item() == 10.0);
  CHECK(code_of([&] { forward(t, OpKind::add, {a}); }) == ErrorCode::shape_mismatch);
}

TEST_CASE("error contracts") {
  Tape<double> t;
  auto a = t.variable(Tensor<double>::zeros({2, 3}));
  auto b = t.variable(Tensor<double>::zeros({3, 2}));
  CHECK(code_of([&] { add(a, b); }) == ErrorCode::shape_mismatch);
  CHECK(code_of([&] { matmul(a, a); }) == ErrorCode::shape_mismatch);
  CHECK(code_of([&] { exp(t.constant(Tensor<double>::scalar(1e6))); }) == ErrorCode::non_finite);
  CHECK(code_of([&] { log(t.constant(Tensor<double>::scalar(-1.0))); }) == ErrorCode::non_finite);
  CHECK(code_of([&] { t.backward(a); }) == ErrorCode::loss_not_scalar);
  Tape<double> other;
  auto c = other.variable(Tensor<double>::scalar(1.0));
  CHECK(code_of([&] { t.backward(c); }) == ErrorCode::detached_node);
  CHECK(code_of([&] { add(a, c); }) == ErrorCode::detached_node);
  auto k = t.constant(Tensor<double>::scalar(1.0));
  auto grads = t.backward(sum(a));
  CHECK(code_of([&] { (void)grads[k]; }) == ErrorCode::detached_node);
  CHECK(code_of([&] { Tensor<double>(Shape{2, 2}, Array<double>::Zero(3)); }) == ErrorCode::shape_mismatch);
}
