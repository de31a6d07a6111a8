#include <cmath>
#include <sstream>

#include "doctest.h"
#include "pmss/framework/gradcheck_suite.hpp"
#include "pmss/numerics/checkpoint.hpp"
#include "pmss/numerics/gradcheck.hpp"
#include "pmss/numerics/ops.hpp"
#include "pmss/numerics/optim.hpp"
#include "pmss/numerics/tape.hpp"
#include "test_oracles.hpp"

using namespace pmss;
using pmss::testing::random_tensor;

TEST_SUITE("conv2d") {
  TEST_CASE("zero kernel gives zero output") {
    auto layer = ConvLayer::make_zero(1, 1, 3, {});
    auto y = ops::conv2d(Tensor::full({1, 1, 3, 3}, 1.0), layer);
    for (double v : y.data()) CHECK(v == 0.0);
  }

  TEST_CASE("pointwise affine 1x1 kernel") {
    auto layer = ConvLayer::make_zero(1, 1, 1, {});
    layer.weight.data()[0] = 2.0;
    layer.bias.data()[0] = 1.0;
    auto x = Tensor::from({1, 1, 3, 3}, {0, 1, 2, 3, 4, 5, 6, 7, 8});
    auto y = ops::conv2d(x, layer);
    for (std::size_t i = 0; i < 9; ++i) CHECK(y.data()[i] == 2.0 * x.data()[i] + 1.0);
  }

  TEST_CASE("dilated ramp center equals hand-enumerated taps") {
    std::vector<double> ramp(25);
    for (int i = 0; i < 25; ++i) ramp[i] = i;
    auto x = Tensor::from({1, 1, 5, 5}, ramp);
    auto layer = ConvLayer::make_zero(1, 1, 3, {.dilation = 2});
    for (auto& w : layer.weight.data()) w = 1.0;
    auto y = ops::conv2d(x, layer);
    // taps at rows/cols {0,2,4}: 0+2+4+10+12+14+20+22+24
    CHECK(y.at(0, 0, 2, 2) == 108.0);
    auto ref = pmss::testing::conv_oracle(x, layer);
    CHECK(bitwise_equal(y, ref));
  }

  TEST_CASE("matches nested-loop oracle across geometries") {
    Rng rng(11);
    for (std::size_t dil : {1u, 2u, 3u, 4u})
      for (std::size_t groups : {1u, 2u, 4u})
        for (std::size_t stride : {1u, 2u}) {
          auto layer = ConvLayer::make(4, 8, 3, {.dilation = dil, .groups = groups, .stride = stride}, rng);
          for (auto& b : layer.bias.data()) b = rng.uniform(-1, 1);
          auto x = random_tensor({2, 4, 7, 9}, rng);
          auto y = ops::conv2d(x, layer);
          auto ref = pmss::testing::conv_oracle(x, layer);
          REQUIRE(y.shape() == ref.shape());
          for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == doctest::Approx(ref.data()[i]).epsilon(1e-12));
        }
  }

  TEST_CASE("same-padding contract for dilations 1..4") {
    Rng rng(3);
    for (std::size_t d = 1; d <= 4; ++d)
      for (std::size_t hw : {1u, 5u, 6u, 17u}) {
        auto layer = ConvLayer::make(2, 2, 3, {.dilation = d}, rng);
        auto y = ops::conv2d(random_tensor({1, 2, hw, hw + 1}, rng), layer);
        CHECK(y.dim(2) == hw);
        CHECK(y.dim(3) == hw + 1);
      }
  }

  TEST_CASE("group isolation") {
    Rng rng(5);
    auto layer = ConvLayer::make(4, 4, 3, {.groups = 2}, rng);
    auto x = random_tensor({1, 4, 2, 2}, rng);
    // zero channels of group 0
    auto z = x.clone();
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < 4; ++i) z.data()[c * 4 + i] = 0.0;
    auto y = ops::conv2d(z, layer);
    auto full = ops::conv2d(x, layer);
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t i = 0; i < 4; ++i) {
        if (c < 2)
          CHECK(y.data()[c * 4 + i] == 0.0);
        else
          CHECK(y.data()[c * 4 + i] == full.data()[c * 4 + i]);
      }
    auto masked = pmss::testing::conv_oracle(z, layer);
    for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == doctest::Approx(masked.data()[i]).epsilon(1e-13));
  }

  TEST_CASE("rejects bad geometry before computing") {
    Rng rng(1);
    CHECK_THROWS_AS(ConvLayer::make(3, 4, 3, {.groups = 2}, rng), ShapeError);
    auto layer = ConvLayer::make(4, 4, 3, {}, rng);
    CHECK_THROWS_AS(ops::conv2d(Tensor::zeros({1, 3, 4, 4}), layer), ShapeError);
  }
}

TEST_CASE("concat and slice") {
  auto a = Tensor::zeros({1, 1, 2, 2});
  auto b = Tensor::full({1, 1, 2, 2}, 1.0);
  auto y = ops::concat_channels(a, b);
  CHECK(y.shape() == Shape{1, 2, 2, 2});
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(y.data()[i] == 0.0);
    CHECK(y.data()[4 + i] == 1.0);
  }
  Rng rng(2);
  auto p = random_tensor({2, 3, 2, 3}, rng);
  auto q = random_tensor({2, 2, 2, 3}, rng);
  CHECK(bitwise_equal(ops::slice_channels(ops::concat_channels(p, q), 0, 3), p));
  CHECK(bitwise_equal(ops::slice_channels(ops::concat_channels(p, q), 3, 5), q));
  CHECK_THROWS_AS(ops::concat_channels(p, Tensor::zeros({2, 2, 3, 3})), ShapeError);
  CHECK_THROWS_AS(ops::concat_channels(p, Tensor::zeros({1, 2, 2, 3})), ShapeError);

  SUBCASE("gradient of sum splits back as ones") {
    auto pa = p.clone(true);
    auto qa = q.clone(true);
    Tape tape;
    {
      GradScope scope(tape);
      tape.backward(ops::sum(ops::concat_channels(pa, qa)));
    }
    for (double g : pa.grad()) CHECK(g == 1.0);
    for (double g : qa.grad()) CHECK(g == 1.0);
    auto report = gradcheck([&] { return ops::sum(ops::mul(ops::concat_channels(pa, qa), ops::concat_channels(pa, qa))); },
                            {{"a", pa}, {"b", qa}}, 1e-6, 1e-6);
    CHECK(report.passed);
  }
}

TEST_CASE("softmax over channels") {
  auto y = ops::softmax_channels(Tensor::zeros({1, 4, 2, 2}));
  for (double v : y.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));

  auto x = Tensor::from({1, 3, 1, 1}, {1, 2, 3});
  auto s = ops::softmax_channels(x);
  const double denom = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  CHECK(s.data()[0] == doctest::Approx(std::exp(1.0) / denom).epsilon(1e-14));
  CHECK(s.data()[0] == doctest::Approx(0.09003057).epsilon(1e-7));
  CHECK(s.data()[1] == doctest::Approx(0.24472847).epsilon(1e-7));
  CHECK(s.data()[2] == doctest::Approx(0.66524096).epsilon(1e-7));

  Rng rng(9);
  auto z = random_tensor({2, 5, 3, 3}, rng, -20.0, 20.0);
  auto shifted = z.clone();
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t h = 0; h < 3; ++h)
      for (std::size_t w = 0; w < 3; ++w) {
        const double c = rng.uniform(-5, 5);
        for (std::size_t k = 0; k < 5; ++k) shifted.at(n, k, h, w) += c;
      }
  auto a = ops::softmax_channels(z), b = ops::softmax_channels(shifted);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-12));
  CHECK(pmss::testing::max_simplex_violation(a) < 1e-12);
  for (double v : a.data()) CHECK(v > 0.0);
}

TEST_CASE("elementwise add and mul") {
  Rng rng(4);
  auto x = random_tensor({1, 2, 3, 3}, rng);
  auto zeros = Tensor::zeros(x.shape());
  auto prod = ops::elementwise(x, zeros, ops::Elementwise::mul);
  for (double v : prod.data()) CHECK(v == 0.0);
  CHECK(bitwise_equal(ops::elementwise(x, zeros, ops::Elementwise::add), x));
  CHECK_THROWS_AS(ops::add(x, Tensor::zeros({1, 2, 3, 2})), ShapeError);

  auto a = random_tensor({1, 2, 3, 3}, rng, -1, 1, true);
  auto b = random_tensor({1, 2, 3, 3}, rng, -1, 1, true);
  Tape tape;
  {
    GradScope scope(tape);
    tape.backward(ops::sum(ops::mul(a, b)));
  }
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.grad()[i] == b.data()[i]);
  a.clear_grad();
  b.clear_grad();
  auto report = gradcheck([&] { return ops::sum(ops::mul(a, b)); }, {{"a", a}, {"b", b}}, 1e-6, 1e-7);
  CHECK(report.passed);
}

TEST_CASE("bilinear resize") {
  Rng rng(8);
  auto x = random_tensor({1, 2, 3, 4}, rng);
  CHECK(bitwise_equal(ops::bilinear_resize(x, 3, 4), x));
  auto flat = ops::bilinear_resize(Tensor::full({1, 1, 3, 5}, 0.7), 8, 2);
  for (double v : flat.data()) CHECK(v == doctest::Approx(0.7).epsilon(1e-15));

  auto small = Tensor::from({1, 1, 2, 2}, {1, 3, 5, 7});
  auto up = ops::bilinear_resize(small, 4, 4);
  auto ref = pmss::testing::bilinear_oracle(small, 4, 4);
  for (std::size_t i = 0; i < 16; ++i) CHECK(up.data()[i] == doctest::Approx(ref.data()[i]).epsilon(1e-15));
  CHECK(up.at(0, 0, 0, 0) == 1.0);
  CHECK(up.at(0, 0, 3, 3) == 7.0);
  CHECK(up.at(0, 0, 1, 1) == doctest::Approx(2.5));  // 0.75*0.75*1 + 0.75*0.25*3 + 0.25*0.75*5 + 0.25*0.25*7

  SUBCASE("simplex rows stay on the simplex") {
    auto probs = ops::softmax_channels(random_tensor({2, 4, 5, 3}, rng, -3, 3));
    for (auto [h, w] : {std::pair<std::size_t, std::size_t>{11, 7}, {2, 2}, {1, 9}})
      CHECK(pmss::testing::max_simplex_violation(ops::bilinear_resize(probs, h, w)) < 1e-12);
  }
  SUBCASE("downsampling also matches oracle") {
    auto big = random_tensor({1, 1, 9, 7}, rng);
    auto down = ops::bilinear_resize(big, 4, 3);
    auto oracle = pmss::testing::bilinear_oracle(big, 4, 3);
    for (std::size_t i = 0; i < down.numel(); ++i) CHECK(down.data()[i] == doctest::Approx(oracle.data()[i]).epsilon(1e-14));
  }
}

TEST_CASE("cross entropy") {
  LabelMap t(1, 1, 1, 0);
  const double eps = 1e-9;
  auto p = Tensor::from({1, 2, 1, 1}, {1.0 - eps, eps});
  CHECK(ops::cross_entropy_probs(p, t).item() == doctest::Approx(-std::log(1.0 - eps)));

  LabelMap t4(1, 2, 2, 0);
  t4.labels = {0, 1, 2, 3};
  CHECK(ops::cross_entropy_probs(Tensor::full({1, 4, 2, 2}, 0.25), t4).item() == doctest::Approx(std::log(4.0)).epsilon(1e-15));
  CHECK(ops::cross_entropy_logits(Tensor::zeros({1, 4, 2, 2}), t4).item() == doctest::Approx(1.3862944).epsilon(1e-7));

  LabelMap two(1, 1, 2);
  two.labels = {0, 1};
  auto probs = Tensor::from({1, 2, 1, 2}, {0.7, 0.7, 0.3, 0.3});
  CHECK(ops::cross_entropy_probs(probs, two).item() == doctest::Approx(0.7803239).epsilon(1e-7));
  CHECK(ops::cross_entropy_probs(probs, two).item() == doctest::Approx(-(std::log(0.7) + std::log(0.3)) / 2).epsilon(1e-15));

  SUBCASE("ignored pixels drop out of the mean") {
    LabelMap ign(1, 1, 2);
    ign.labels = {0, kDefaultIgnoreIndex};
    CHECK(ops::cross_entropy_probs(probs, ign).item() == doctest::Approx(-std::log(0.7)));
  }
  SUBCASE("out-of-range label rejects") {
    LabelMap bad(1, 1, 2);
    bad.labels = {0, 2};
    CHECK_THROWS(ops::cross_entropy_logits(Tensor::zeros({1, 2, 1, 2}), bad));
  }
  SUBCASE("logit form is stable for large logits") {
    auto z = Tensor::from({1, 2, 1, 1}, {1000.0, 0.0});
    LabelMap one(1, 1, 1, 1);
    CHECK(ops::cross_entropy_logits(z, one).item() == doctest::Approx(1000.0));
  }
}

TEST_CASE("backward semantics") {
  auto x = Tensor::from({3}, {1, 2, 3}, true);
  auto frozen = Tensor::from({3}, {4, 5, 6});
  auto unused = Tensor::from({3}, {0, 0, 0}, true);
  Tape tape;
  {
    GradScope scope(tape);
    auto loss = ops::add(ops::sum(x), ops::sum(frozen));
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), ShapeError);
  }
  for (double g : x.grad()) CHECK(g == 1.0);
  CHECK_FALSE(frozen.has_grad());
  CHECK_FALSE(unused.has_grad());

  SUBCASE("non-scalar loss rejects") {
    Tape t2;
    GradScope scope(t2);
    auto v = ops::scale(x, 2.0);
    CHECK_THROWS_AS(t2.backward(v), ShapeError);
  }
  SUBCASE("visits entries in reverse execution order") {
    Tape t3;
    GradScope scope(t3);
    auto a = ops::scale(x, 2.0);
    auto b = ops::relu(a);
    auto c = ops::sum(b);
    t3.backward(c);
    CHECK(t3.visit_order() == std::vector<std::size_t>{2, 1, 0});
  }
}

TEST_CASE("shared weight gradient equals sum of per-use gradients") {
  Rng rng(21);
  for (int seed = 0; seed < 20; ++seed) {
    auto layer = ConvLayer::make(3, 3, 3, {.dilation = 1 + static_cast<std::size_t>(seed % 3)}, rng);
    auto x = random_tensor({1, 3, 5, 5}, rng);
    // Two chained uses of one parameter set (two unrolled iterations).
    {
      Tape tape;
      GradScope scope(tape);
      tape.backward(ops::sum(ops::conv2d(ops::relu(ops::conv2d(x, layer)), layer)));
    }
    std::vector<double> shared(layer.weight.grad().begin(), layer.weight.grad().end());
    layer.weight.clear_grad();
    layer.bias.clear_grad();

    // Copy-splitting oracle: independent copies, gradients summed.
    ConvLayer first = layer, second = layer;
    first.weight = layer.weight.clone(true);
    first.bias = layer.bias.clone(true);
    second.weight = layer.weight.clone(true);
    second.bias = layer.bias.clone(true);
    {
      Tape tape;
      GradScope scope(tape);
      tape.backward(ops::sum(ops::conv2d(ops::relu(ops::conv2d(x, first)), second)));
    }
    for (std::size_t i = 0; i < shared.size(); ++i)
      CHECK(shared[i] == doctest::Approx(first.weight.grad()[i] + second.weight.grad()[i]).epsilon(1e-13));
  }
}

TEST_CASE("sgd") {
  SUBCASE("zero learning rate leaves parameters") {
    auto p = Tensor::from({2}, {1.0, -2.0}, true);
    p.grad_buffer()[0] = 3.0;
    p.grad_buffer()[1] = 4.0;
    Sgd opt(0.0, 0.9);
    std::vector<Tensor> params{p};
    opt.step(params);
    CHECK(p.data()[0] == 1.0);
    CHECK(p.data()[1] == -2.0);
    CHECK_FALSE(p.has_grad());
  }
  SUBCASE("plain step") {
    auto p = Tensor::scalar(1.0, true);
    p.grad_buffer()[0] = 0.5;
    Sgd opt(0.1, 0.0);
    std::vector<Tensor> params{p};
    opt.step(params);
    CHECK(p.item() == doctest::Approx(0.95).epsilon(1e-15));
  }
  SUBCASE("momentum recurrence") {
    auto p = Tensor::scalar(0.0, true);
    Sgd opt(0.1, 0.9);
    std::vector<Tensor> params{p};
    double v = 0.0, ref = 0.0;
    for (int i = 0; i < 2; ++i) {
      p.grad_buffer()[0] = 1.0;
      opt.step(params);
      v = 0.9 * v + 1.0;
      ref -= 0.1 * v;
    }
    CHECK(p.item() == doctest::Approx(-0.29).epsilon(1e-14));
    CHECK(p.item() == doctest::Approx(ref).epsilon(1e-15));
  }
  SUBCASE("missing gradient rejects") {
    auto p = Tensor::scalar(1.0, true);
    Sgd opt(0.1);
    std::vector<Tensor> params{p};
    CHECK_THROWS_AS(opt.step(params), std::invalid_argument);
  }
  SUBCASE("gradient norm clipping") {
    auto a = Tensor::from({1}, {0.0}, true), b = Tensor::from({1}, {0.0}, true);
    a.grad_buffer()[0] = 3.0;
    b.grad_buffer()[0] = 4.0;
    std::vector<Tensor> params{a, b};
    CHECK(clip_grad_norm(params, 10.0) == 5.0);
    CHECK(a.grad()[0] == 3.0);
    CHECK(clip_grad_norm(params, 1.0) == 5.0);
    CHECK(a.grad()[0] == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(b.grad()[0] == doctest::Approx(0.8).epsilon(1e-15));
    CHECK_THROWS_AS(clip_grad_norm(params, 0.0), std::invalid_argument);
  }
}

TEST_CASE("gradcheck") {
  Rng rng(31);
  SUBCASE("quadratic") {
    auto x = random_tensor({4, 3}, rng, -1, 1, true);
    auto report = gradcheck([&] { return ops::sum(ops::mul(x, x)); }, {{"x", x}}, 1e-5, 1e-6);
    CHECK(report.passed);
    CHECK(report.max_rel_error < 1e-6);
  }
  SUBCASE("negative control with a corrupted mul rule fails and names it") {
    auto x = random_tensor({4, 3}, rng, -1, 1, true);
    auto report = gradcheck([&] { return ops::sum(ops::mul(x, x)); }, {{"x", x}}, 1e-5, 1e-4,
                            [](Tape& t) { t.corrupt_vjp("mul", 1.5); });
    CHECK_FALSE(report.passed);
  }
  SUBCASE("every primitive on random shapes") {
    for (int seed = 0; seed < 20; ++seed) {
      Rng r(1000 + seed);
      for (const auto& c : pmss::framework::primitive_cases(r)) {
        auto report = gradcheck(c.fn, c.inputs, 1e-6, 1e-4);
        INFO(c.name << " seed " << seed << " err " << report.max_rel_error);
        CHECK(report.passed);
      }
    }
  }
}

TEST_CASE("checkpoint container") {
  Rng rng(77);
  std::vector<NamedTensor> entries{{"a.weight", random_tensor({3, 2, 3, 3}, rng, -1e3, 1e3)},
                                   {"bias", random_tensor({7}, rng)},
                                   {"scalar", Tensor::scalar(-0.0)}};
  entries[1].tensor.data()[0] = 5e-324;  // subnormal survives
  const std::string bytes = encode_checkpoint(entries);
  CHECK(bytes.substr(0, 4) == "PMSS");
  auto back = decode_checkpoint(bytes);
  REQUIRE(back.size() == entries.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].name == entries[i].name);
    CHECK(bitwise_equal(back[i].tensor, entries[i].tensor));
  }
  CHECK(encode_checkpoint(back) == bytes);

  SUBCASE("header layout") {
    // version 1, count 3, then first name length 8
    CHECK(static_cast<unsigned char>(bytes[4]) == 1);
    CHECK(static_cast<unsigned char>(bytes[8]) == 3);
    CHECK(static_cast<unsigned char>(bytes[12]) == 8);
    CHECK(bytes.substr(14, 8) == "a.weight");
    CHECK(bytes[22] == 0);  // f64 tag
    CHECK(bytes[23] == 4);  // rank
  }
  SUBCASE("f32 entries widen on read") {
    auto f32 = decode_checkpoint(encode_checkpoint({{"x", Tensor::from({2}, {0.5, -1.25})}}, DType::f32));
    CHECK(f32[0].tensor.data()[0] == 0.5);
    CHECK(f32[0].tensor.data()[1] == -1.25);
  }
  SUBCASE("corruption is detected") {
    std::string bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(bad), CheckpointError);
    std::string ver = bytes;
    ver[4] = 9;
    CHECK_THROWS_WITH_AS(decode_checkpoint(ver), doctest::Contains("version"), CheckpointError);
    CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), CheckpointError);
  }
  SUBCASE("sha256 known vector") {
    CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  }
}
