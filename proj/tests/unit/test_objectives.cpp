#include <numeric>
#include <algorithm>
#include <cmath>
#include <sstream>

#include "doctest.h"
#include "ibr/core/gradcheck.hpp"
#include "ibr/objectives/losses.hpp"
#include "ibr/objectives/probe.hpp"
#include "ibr/objectives/train.hpp"
#include "support.hpp"

using namespace ibr;
using ibr::test::code_of;

TEST_CASE("ce_loss closed forms") {
  Tape<double> t;
  CHECK(ce_loss(t.constant(Tensor<double>::zeros(Shape{3, 10})), {0, 4, 9}).value().item() ==
        doctest::Approx(std::log(10.0)).epsilon(1e-12));
  CHECK(ce_loss(t.constant(Tensor<double>::zeros(Shape{1, 2})), {0}).value().item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  // A huge margin on the correct class drives the loss to zero.
  const auto confident = t.constant(Tensor<double>::from(Shape{1, 3}, {0, 200, 0}));
  CHECK(ce_loss(confident, {1}).value().item() < 1e-12);
  CHECK(code_of([&] { ce_loss(confident, {3}); }) == ErrorCode::label_out_of_range);
  CHECK(code_of([&] { ce_loss(confident, {-1}); }) == ErrorCode::label_out_of_range);
  CHECK(code_of([&] { ce_loss(confident, {0, 1}); }) == ErrorCode::shape_mismatch);
}

TEST_CASE("ce_loss gradient is (softmax - onehot) / N") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> d(0, 2);
  Tensor<double> z = Tensor<double>::zeros(Shape{4, 5});
  for (Index i = 0; i < z.numel(); ++i) z.data[i] = d(rng);
  const std::vector<int> y{0, 3, 4, 1};
  Tape<double> t;
  const auto v = t.variable(z);
  const Tensor<double> g = t.backward(ce_loss(v, y))[v];
  for (Index i = 0; i < 4; ++i) {
    const auto row = z.data.segment(i * 5, 5);
    const double denom = (row - row.maxCoeff()).exp().sum();
    for (Index k = 0; k < 5; ++k) {
      const double p = std::exp(row[k] - row.maxCoeff()) / denom;
      CHECK(g.data[i * 5 + k] == doctest::Approx((p - (k == y[i])) / 4.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("dvib_loss examples") {
  Tape<double> t;
  std::mt19937_64 rng(5);
  std::normal_distribution<double> d(0, 1);
  Tensor<double> z = Tensor<double>::zeros(Shape{2, 10});
  for (Index i = 0; i < z.numel(); ++i) z.data[i] = d(rng);
  const auto logits = t.constant(z);
  const std::vector<int> y{2, 7};
  const auto mu = t.constant(Tensor<double>::from(Shape{2, 2}, {0.3, -1, 2, 0.1}));
  const auto sigma = t.constant(Tensor<double>::from(Shape{2, 2}, {0.5, 1.5, 1, 2}));
  const double ce = ce_loss(logits, y).value().item();
  // Bit-exact degeneration to plain log-loss.
  CHECK(dvib_loss(logits, y, mu, sigma, 0.0).value().item() == ce);

  const auto mu0 = t.constant(Tensor<double>::zeros(Shape{2, 2}));
  const auto sigma1 = t.constant(Tensor<double>::full(Shape{2, 2}, 1.0));
  CHECK(dvib_loss(logits, y, mu0, sigma1, 7.0).value().item() == doctest::Approx(ce).epsilon(1e-14));

  const auto uniform = t.constant(Tensor<double>::zeros(Shape{1, 10}));
  const double v = dvib_loss(uniform, {0}, t.constant(Tensor<double>::scalar(1.0).reshaped(Shape{1, 1})),
                             t.constant(Tensor<double>::scalar(1.0).reshaped(Shape{1, 1})), 1.0)
                       .value()
                       .item();
  CHECK(v == doctest::Approx(std::log(10.0) + 0.5).epsilon(1e-12));

  Tape<float> tf;
  const auto lf = tf.constant(z.cast<float>());
  CHECK(dvib_loss(lf, y, tf.constant(Tensor<float>::zeros(Shape{2, 2})),
                  tf.constant(Tensor<float>::full(Shape{2, 2}, 0.3f)), 0.0f)
            .value()
            .item() == ce_loss(lf, y).value().item());
}

TEST_CASE("svbi_loss examples and teacher detachment") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> d(0, 1);
  Tensor<double> h = Tensor<double>::zeros(Shape{3, 2, 4, 4});
  for (Index i = 0; i < h.numel(); ++i) h.data[i] = d(rng);
  Tape<double> t;
  const auto zero_rate = t.constant(Tensor<double>::scalar(0.0));
  CHECK(svbi_loss(h, t.variable(h), zero_rate, 0.0, 48).value().item() == 0.0);

  Tensor<double> shifted = h;
  shifted.data += 1.0;
  CHECK(svbi_loss(h, t.variable(shifted), zero_rate, 0.0, 48).value().item() == doctest::Approx(1.0).epsilon(1e-12));

  // Rate term: beta * bits / pixels.
  const auto bits = t.constant(Tensor<double>::from(Shape{2}, {30.0, 66.0}));
  CHECK(svbi_loss(h, t.variable(shifted), bits, 0.5, 48).value().item() ==
        doctest::Approx(1.0 + 0.5 * 96.0 / 48.0).epsilon(1e-12));

  // Only the student receives gradient: the teacher is a plain tensor, and the student
  // gradient is 2 (H~ - H) / numel.
  const auto student = t.variable(shifted);
  const Tensor<double> g = t.backward(svbi_loss(h, student, bits, 0.5, 48))[student];
  CHECK((g.data - 2.0 / double(h.numel())).abs().maxCoeff() < 1e-15);

  CHECK(code_of([&] { svbi_loss(h, t.variable(Tensor<double>::zeros(Shape{3, 2, 4, 2})), zero_rate, 0.0, 48); }) ==
        ErrorCode::shape_mismatch);
}

TEST_CASE("svbi_loss is invariant to batch permutation") {
  std::mt19937_64 rng(11);
  std::normal_distribution<float> d(0, 1);
  const Shape s{16, 3, 5, 5};
  Tensor<float> a = Tensor<float>::zeros(s), b = Tensor<float>::zeros(s);
  for (Index i = 0; i < a.numel(); ++i) {
    a.data[i] = d(rng);
    b.data[i] = d(rng);
  }
  std::vector<Index> perm(16);
  std::iota(perm.begin(), perm.end(), Index(0));
  for (int trial = 0; trial < 20; ++trial) {
    std::shuffle(perm.begin(), perm.end(), rng);
    Tape<float> t;
    const auto bits = t.constant(Tensor<float>::scalar(123.0f));
    const float l0 = svbi_loss(a, t.constant(b), bits, 0.01f, 400).value().item();
    const float l1 = svbi_loss(gather_rows(a, perm), t.constant(gather_rows(b, perm)), bits, 0.01f, 400).value().item();
    CHECK(std::abs(l0 - l1) <= 1e-6);
  }
}

TEST_CASE("Adam step sizes") {
  ParameterSet<double> p;
  p.add("x", Tensor<double>::from(Shape{2}, {3.0, -2.0}));
  Adam<double> adam(p, AdamConfig{0.1});
  const auto step = [&] {
    Tape<double> t;
    Binding<double> b(p, t, [](const std::string&) { return true; });
    adam.step(p, b, t.backward(sum(square(b["x"]))));
  };
  step();
  // The bias-corrected first step has magnitude lr regardless of gradient scale.
  CHECK(p.at("x").data[0] == doctest::Approx(2.9).epsilon(1e-9));
  CHECK(p.at("x").data[1] == doctest::Approx(-1.9).epsilon(1e-9));
  step();
  step();
  // Later steps never exceed lr while the gradient sign is constant.
  CHECK(p.at("x").data[0] >= 2.7 - 1e-12);
  CHECK(p.at("x").data[0] < 2.9);
  CHECK(p.at("x").data[1] <= -1.7 + 1e-12);
  CHECK(adam.steps() == 3);
}

TEST_CASE("Base training learns, logs, and is deterministic") {
  const Dataset<float> train_set = test::halves<float>(256, 1), test_set = test::halves<float>(128, 2);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 32;
  cfg.seed = 7;
  const auto m0 = build_model<float>(test::tiny_spec(Objective::Base), 3);
  const auto r1 = train(m0, cfg, train_set, &test_set);
  const auto r2 = train(m0, cfg, train_set, &test_set);
  REQUIRE(r1.log.rows.size() == 6);
  CHECK(r1.log.last("test")->acc_top1 >= 0.95);
  CHECK(r1.log.last("train")->loss_total < r1.log.rows.front().loss_total);
  for (std::size_t i = 0; i < r1.log.rows.size(); ++i) CHECK(r1.log.rows[i].loss_total == r2.log.rows[i].loss_total);
  CHECK(r1.log.to_csv() == r2.log.to_csv());
  for (std::size_t i = 0; i < r1.model.params.size(); ++i)
    CHECK((r1.model.params.value(i).data == r2.model.params.value(i).data).all());

  const std::string csv = r1.log.to_csv();
  CHECK(csv.rfind("epoch,split,loss_total,loss_ce_or_mse,loss_rate,acc_top1,bpp\n", 0) == 0);
  CHECK(csv.find("\n3,test,") != std::string::npos);

  cfg.seed = 8;
  const auto r3 = train(m0, cfg, train_set, &test_set);
  CHECK(r3.log.rows.front().loss_total != r1.log.rows.front().loss_total);
}

TEST_CASE("training errors") {
  const auto m = build_model<float>(test::tiny_spec(Objective::Base), 3);
  Dataset<float> bad = test::halves<float>(32, 1);
  bad.images.data[5] = std::nanf("");
  TrainConfig cfg;
  cfg.epochs = 1;
  CHECK(code_of([&] { train(m, cfg, bad); }) == ErrorCode::diverged_loss);

  const auto svbi = build_model<float>(test::tiny_spec(Objective::SVBI), 3);
  CHECK(code_of([&] { train(svbi, cfg, test::halves<float>(32, 1)); }) == ErrorCode::teacher_missing);
  // A non-Base teacher does not provide the head representation.
  CHECK(code_of([&] { train(svbi, cfg, test::halves<float>(32, 1), static_cast<const Dataset<float>*>(nullptr), &svbi); }) == ErrorCode::teacher_missing);

  cfg.epochs = 0;
  CHECK(code_of([&] { train(m, cfg, test::halves<float>(32, 1)); }) == ErrorCode::config_error);
  cfg.epochs = 1;
  cfg.beta = -1;
  CHECK(code_of([&] { train(m, cfg, test::halves<float>(32, 1)); }) == ErrorCode::config_error);
  cfg.beta = 0;
  Dataset<float> wide{"w", Tensor<float>::zeros(Shape{4, 1, 9, 9}), {0, 1, 0, 1}, 2};
  CHECK(code_of([&] { train(m, cfg, wide); }) == ErrorCode::shape_mismatch);
}

TEST_CASE("SVBI training fits the codec against a frozen teacher") {
  const Dataset<float> train_set = test::halves<float>(256, 1), test_set = test::halves<float>(64, 2);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 32;
  const auto teacher = train(build_model<float>(test::tiny_spec(Objective::Base), 3), cfg, train_set).model;

  cfg.beta = 0.05;
  cfg.epochs = 4;
  const auto student = build_model<float>(test::tiny_spec(Objective::SVBI), 4);
  const auto r = train(student, cfg, train_set, &test_set, &teacher);
  CHECK(r.log.last("train")->loss_ce_or_mse < r.log.rows.front().loss_ce_or_mse);
  CHECK(r.log.last("test")->bpp > 0);
  // Tail parameters are the teacher's and never move.
  for (std::size_t i = 0; i < teacher.params.size(); ++i) {
    const std::string& name = teacher.params.name(i);
    if (!r.model.params.contains(name)) continue;
    CHECK((r.model.params.at(name).data == teacher.params.value(i).data).all());
  }
  // The logged test rate is the coded eval-mode rate.
  const EvalStats s = evaluate(r.model, test_set, cfg.beta, &teacher);
  CHECK(s.bpp == r.log.last("test")->bpp);
  CHECK(code_of([&] { evaluate(r.model, test_set, cfg.beta); }) == ErrorCode::teacher_missing);
}

TEST_CASE("DVIB logged bpp equals the measured KL rate") {
  const Dataset<float> train_set = test::halves<float>(128, 1), test_set = test::halves<float>(100, 2);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 32;
  cfg.beta = 0.01;
  const auto r = train(build_model<float>(test::tiny_spec(Objective::DVIB), 3), cfg, train_set, &test_set);
  const double measured = dvib_bpp(r.model, test_set, 32);
  CHECK(std::abs(measured - r.log.last("test")->bpp) <= 1e-6);
  CHECK(measured > 0);
  CHECK(r.log.last("test")->loss_rate == doctest::Approx(measured * std::log(2.0) * 64.0).epsilon(1e-5));
}

TEST_CASE("beta search narrows onto the accuracy cliff") {
  const double cliff = 0.0123;
  int calls = 0;
  const auto acc = [&](double beta) {
    ++calls;
    return beta <= cliff ? 0.99 : 0.6;
  };
  BetaSearchConfig cfg;
  cfg.steps = 14;
  const BetaSearchResult r = beta_search(acc, 0.995, cfg);
  CHECK(calls == 14);
  CHECK(r.found);
  CHECK(r.beta <= cliff);
  CHECK(r.beta > cliff / 1.2);
  for (const BetaProbe& p : r.probes) CHECK(p.acceptable == (p.beta <= cliff));

  // Everything acceptable: the upper bound wins immediately.
  CHECK(beta_search([](double) { return 1.0; }, 1.0, cfg).beta == 1.0);
  // Nothing acceptable.
  const BetaSearchResult none = beta_search([](double) { return 0.0; }, 1.0, cfg);
  CHECK_FALSE(none.found);
  CHECK(none.probes.size() == 2);
  CHECK(code_of([&] { beta_search(acc, 1.0, BetaSearchConfig{1.0, 0.5}); }) == ErrorCode::config_error);
}

TEST_CASE("probe plans reach the input resolution") {
  struct Case {
    Index h, out;
  };
  for (const Case c : {Case{28, 28}, Case{14, 28}, Case{7, 28}, Case{4, 32}, Case{1, 28}, Case{1, 32}, Case{8, 32},
                       Case{16, 32}, Case{2, 8}}) {
    const auto plan = plan_probe(5, c.h, c.h, 1, c.out, c.out, 16);
    REQUIRE(plan.size() == 3);
    Index size = c.h;
    for (const auto& l : plan) size = (size - 1) * l.stride - 2 * l.pad + l.kernel;
    CHECK(size >= c.out);
    CHECK(size < 2 * c.out);
    CHECK(plan.front().in_channels == 5);
    CHECK(plan.back().out_channels == 1);
  }
  CHECK(code_of([] { plan_probe(1, 4, 5, 1, 28, 28, 16); }) == ErrorCode::unsupported_shape);
}

TEST_CASE("layer probes: identity at the input, worse deeper in a random model") {
  const Dataset<float> train_set = test::halves<float>(512, 1), test_set = test::halves<float>(64, 2);
  const auto m = build_model<float>(test::tiny_spec(Objective::Base), 3);
  ProbeConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 16;
  cfg.learning_rate = 3e-3;
  const ProbeResult p0 = train_layer_probe(m, 0, train_set, test_set, cfg);
  CHECK(p0.mse < 2e-3);
  CHECK(p0.psnr > 27.0);
  CHECK(p0.train_mse.size() == 5);
  for (Index layer : {Index(2), static_cast<Index>(m.layers.size()) - 1, static_cast<Index>(m.layers.size())}) {
    const ProbeResult p = train_layer_probe(m, layer, train_set, test_set, cfg);
    CHECK(p.mse > p0.mse);
  }
  // Rank-2 activations are probed as 1x1 maps.
  CHECK(layer_representation(m, static_cast<Index>(m.layers.size()), train_set.images.rows(0, 3)).shape ==
        Shape{3, 2, 1, 1});
  CHECK(code_of([&] { train_layer_probe(m, 99, train_set, test_set, cfg); }) == ErrorCode::config_error);
}
