#include <doctest.h>

#include <cmath>

#include "pmss/numerics/gradcheck.hpp"
#include "pmss/numerics/ops.hpp"
#include "pmss/numerics/tape.hpp"
#include "pmss/spm/spm.hpp"
#include "test_oracles.hpp"

using namespace pmss;
using namespace pmss::spm;
using pmss::testing::max_simplex_violation;
using pmss::testing::random_tensor;

namespace {

SpmConfig small_config(std::size_t cf = 8, std::size_t k = 3, std::size_t c = 8) {
  SpmConfig cfg;
  cfg.feature_channels = cf;
  cfg.num_classes = k;
  cfg.channels = c;
  return cfg;
}

/// Random parameters including a non-zero prompt projection.
SpmParams random_params(const SpmConfig& cfg, Rng& rng) {
  SpmParams p = SpmParams::make(cfg, rng);
  for (Tensor* t : {&p.b2_out.weight, &p.b2_out.bias})
    for (double& v : t->data()) v = rng.uniform(-0.5, 0.5);
  return p;
}

Tensor random_map(std::size_t n, std::size_t k, std::size_t h, std::size_t w, Rng& rng) {
  return ops::softmax_channels(random_tensor({n, k, h, w}, rng, -2, 2));
}

}  // namespace

TEST_CASE("class prior counts pixels") {
  LabelMap all2(1, 2, 2, 2);
  const ClassPrior p = class_prior(std::span<const LabelMap>(&all2, 1), 4);
  CHECK(p.probs == std::vector<double>{0, 0, 1, 0});

  std::vector<LabelMap> two(2, LabelMap(1, 1, 2));
  two[0].labels = {0, 0};
  two[1].labels = {0, 1};
  CHECK(class_prior(two, 2).probs == std::vector<double>{0.75, 0.25});

  two[1].labels = {255, 1};
  const ClassPrior q = class_prior(two, 2);
  CHECK(q.probs[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(q.probs[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  CHECK_THROWS_AS(class_prior(std::span<const LabelMap>{}, 2), std::invalid_argument);
  LabelMap ignored(1, 1, 1, 255);
  CHECK_THROWS_AS(class_prior(std::span<const LabelMap>(&ignored, 1), 2), std::invalid_argument);
}

TEST_CASE("M0 broadcasts the prior") {
  const Tensor m = init_m0({{0.75, 0.25}}, 2, 3, 4);
  CHECK(m.shape() == Shape{2, 2, 3, 4});
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t y = 0; y < 3; ++y)
      for (std::size_t x = 0; x < 4; ++x) {
        CHECK(m.at(b, 0, y, x) == 0.75);
        CHECK(m.at(b, 1, y, x) == 0.25);
      }
  const Tensor u = init_m0({{0.25, 0.25, 0.25, 0.25}}, 1, 2, 2);
  for (double v : u.data()) CHECK(v == 0.25);
  CHECK(max_simplex_violation(u) < 1e-12);
}

TEST_CASE("config validation") {
  SpmConfig cfg = small_config();
  CHECK(cfg.resolved_pdc_groups() == 2);
  cfg.channels = 256;
  CHECK(cfg.resolved_pdc_groups() == 16);
  cfg.channels = 10;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = small_config();
  cfg.pdc_groups = 3;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = small_config();
  cfg.in_groups = 4;  // C_f + K = 11
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("PDC preserves shape") {
  Rng rng(1);
  for (std::size_t c : {64, 256})
    for (std::size_t hw : {6, 17}) {
      SpmConfig cfg = small_config(8, 3, c);
      const PdcParams p = PdcParams::make(c, cfg.resolved_pdc_groups(), cfg.dilations, true, rng);
      const Tensor x = random_tensor({1, c, hw, hw}, rng);
      CHECK(pdc(x, p).shape() == x.shape());
    }
}

TEST_CASE("PDC with zero weights is zero") {
  Rng rng(2);
  PdcParams p = PdcParams::make(16, 4, {1, 2, 3, 4}, true, rng);
  p.visit("pdc", [](const std::string&, Tensor& t) {
    for (double& v : t.data()) v = 0.0;
  });
  const Tensor y = pdc(random_tensor({2, 16, 5, 5}, rng), p);
  for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("PDC with unit dilations equals a grouped conv block") {
  Rng rng(3);
  const std::size_t c = 16;
  PdcParams p = PdcParams::make(c, 2, {1, 1, 1, 1}, true, rng);
  const Tensor x = random_tensor({1, c, 7, 7}, rng);
  // One grouped 3x3 conv with 4 * 2 groups holds the same four blocks.
  ConvLayer block = ConvLayer::make_zero(c, c, 3, {.groups = 8});
  for (std::size_t j = 0; j < 4; ++j) {
    const auto src = p.branches[j].weight.data();
    std::copy(src.begin(), src.end(), block.weight.data().begin() + static_cast<std::ptrdiff_t>(j * src.size()));
    const auto b = p.branches[j].bias.data();
    std::copy(b.begin(), b.end(), block.bias.data().begin() + static_cast<std::ptrdiff_t>(j * b.size()));
  }
  const Tensor ref = ops::conv2d(ops::relu(ops::conv2d(x, block)), p.fuse);
  const Tensor got = pdc(x, p);
  for (std::size_t i = 0; i < ref.numel(); ++i) CHECK(got.data()[i] == doctest::Approx(ref.data()[i]).epsilon(1e-12));
}

TEST_CASE("dilation-4 branch receptive field") {
  Rng rng(4);
  ConvLayer l = ConvLayer::make(1, 1, 3, {.dilation = 4}, rng);
  for (double& v : l.weight.data()) v = 1.0;
  const std::size_t n = 11, ctr = 5;
  const Tensor base = Tensor::zeros({1, 1, n, n});
  const double y0 = ops::conv2d(base, l).at(0, 0, ctr, ctr);
  for (std::size_t off : {4, 5}) {
    Tensor x = base.clone();
    x.at(0, 0, ctr, ctr + off) = 1.0;
    const double y = ops::conv2d(x, l).at(0, 0, ctr, ctr);
    if (off == 4)
      CHECK(y != y0);
    else
      CHECK(y == y0);
  }

  // The same probe through PDC with only the dilation-4 branch active.
  PdcParams p = PdcParams::make(4, 1, {1, 2, 3, 4}, true, rng);
  for (std::size_t j = 0; j < 4; ++j)
    for (double& v : p.branches[j].weight.data()) v = j == 3 ? 1.0 : 0.0;
  for (double& v : p.fuse.weight.data()) v = 1.0;
  Tensor x = Tensor::zeros({1, 4, n, n});
  const double z0 = pdc(x, p).at(0, 0, ctr, ctr);
  x.at(0, 3, ctr + 4, ctr) = 1.0;
  CHECK(pdc(x, p).at(0, 0, ctr, ctr) != z0);
  Tensor x5 = Tensor::zeros({1, 4, n, n});
  x5.at(0, 3, ctr + 5, ctr) = 1.0;
  CHECK(pdc(x5, p).at(0, 0, ctr, ctr) == z0);
}

TEST_CASE("refine_map outputs a semantic map") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const SpmConfig cfg = small_config(4 + 4 * (seed % 3), 2 + seed % 4, 8);
    const SpmParams p = random_params(cfg, rng);
    const Tensor f = random_tensor({2, cfg.feature_channels, 5, 4}, rng, -3, 3);
    const Tensor m = random_map(2, cfg.num_classes, 5, 4, rng);
    const Tensor r = refine_map(f, m, p);
    CHECK(r.shape() == Shape{2, cfg.num_classes, 5, 4});
    CHECK(max_simplex_violation(r) <= 1e-6);
  }
}

TEST_CASE("zero branch-1 head gives a uniform map") {
  Rng rng(5);
  SpmParams p = random_params(small_config(), rng);
  for (Tensor* t : {&p.b1_out.weight, &p.b1_out.bias})
    for (double& v : t->data()) v = 0.0;
  const Tensor r = refine_map(random_tensor({1, 8, 4, 4}, rng), random_map(1, 3, 4, 4, rng), p);
  for (double v : r.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("generate_prompt algebra") {
  Rng rng(6);
  SpmParams p = SpmParams::make(small_config(), rng);
  const Tensor f = random_tensor({1, 8, 4, 4}, rng);
  const Tensor m = random_map(1, 3, 4, 4, rng);
  const Prompt zero = generate_prompt(f, m, p);
  CHECK(bitwise_equal(zero.feature, f));
  for (double v : zero.prompt.data()) CHECK(v == 0.0);

  // Zero projection weights with unit bias force W = 1.
  for (double& v : p.b2_out.bias.data()) v = 1.0;
  const Prompt ones = generate_prompt(f, m, p);
  for (double v : ones.weight.data()) CHECK(v == 1.0);
  for (std::size_t i = 0; i < f.numel(); ++i) CHECK(ones.feature.data()[i] == 2.0 * f.data()[i]);

  CHECK_THROWS_AS(generate_prompt(random_tensor({1, 7, 4, 4}, rng), m, p), ShapeError);
  CHECK_THROWS_AS(generate_prompt(f, random_map(1, 3, 3, 4, rng), p), ShapeError);
}

TEST_CASE("spm_forward unrolls with shared parameters") {
  Rng rng(7);
  const SpmParams p = random_params(small_config(), rng);
  const Tensor f = random_tensor({2, 8, 6, 5}, rng);
  const Tensor m = random_map(2, 3, 6, 5, rng);

  const SpmOutput one = spm_forward(f, m, p, 1);
  const Tensor manual_map = refine_map(f, m, p);
  const Tensor manual_feature = generate_prompt(f, manual_map, p).feature;
  CHECK(bitwise_equal(one.map, manual_map));
  CHECK(bitwise_equal(one.feature, manual_feature));

  for (std::size_t r : {2, 3}) {
    const SpmOutput full = spm_forward(f, m, p, r);
    SpmOutput chained = spm_forward(f, m, p, 1);
    std::vector<Tensor> interim = chained.interim;
    for (std::size_t i = 1; i < r; ++i) {
      chained = spm_forward(chained.feature, chained.map, p, 1);
      interim.push_back(chained.map);
    }
    CHECK(bitwise_equal(full.feature, chained.feature));
    CHECK(bitwise_equal(full.map, chained.map));
    REQUIRE(full.interim.size() == r);
    for (std::size_t i = 0; i < r; ++i) {
      CHECK(bitwise_equal(full.interim[i], interim[i]));
      CHECK(max_simplex_violation(full.interim[i]) <= 1e-6);
    }
    CHECK(full.feature.shape() == f.shape());
  }
  CHECK_THROWS_AS(spm_forward(f, m, p, 0), std::invalid_argument);
}

TEST_CASE("spm_forward resizes the incoming map") {
  Rng rng(8);
  const SpmParams p = random_params(small_config(), rng);
  const Tensor f = random_tensor({1, 8, 4, 4}, rng);
  const Tensor m = random_map(1, 3, 8, 8, rng);
  const SpmOutput out = spm_forward(f, m, p, 2);
  CHECK(out.map.shape() == Shape{1, 3, 4, 4});
  CHECK(bitwise_equal(out.interim[0], refine_map(f, ops::bilinear_resize(m, 4, 4), p)));
}

TEST_CASE("identity at initialization") {
  Rng rng(9);
  const SpmParams p = SpmParams::make(small_config(), rng);
  const Tensor f = random_tensor({2, 8, 5, 5}, rng);
  for (std::size_t r : {1, 2, 3}) {
    const SpmOutput out = spm_forward(f, random_map(2, 3, 5, 5, rng), p, r);
    CHECK(bitwise_equal(out.feature, f));
  }
}

TEST_CASE("parameter count is independent of R and matches enumeration") {
  Rng rng(10);
  SpmParams p = SpmParams::make(small_config(16, 5, 32), rng);
  std::size_t walked = 0, tensors = 0;
  p.visit("spm1", [&](const std::string& name, Tensor& t) {
    walked += t.numel();
    ++tensors;
    CHECK(name.rfind("spm1.", 0) == 0);
  });
  CHECK(walked == p.param_count());
  CHECK(tensors == 2 * (4 + 2 * 5));
  // Closed form: two input 1x1, two PDC blocks, K-way and C_f-way outputs.
  const std::size_t cf = 16, k = 5, c = 32, q = c / 4, g = 8;
  const std::size_t pdc_count = 4 * (q * (q / g) * 9 + q) + (c * c + c);
  const std::size_t expect = 2 * ((cf + k) * c + c) + 2 * pdc_count + (c * k + k) + (c * cf + cf);
  CHECK(p.param_count() == expect);
}

TEST_CASE("gradient flow reaches every SPM tensor") {
  Rng rng(11);
  SpmParams p = random_params(small_config(), rng);
  const Tensor f = random_tensor({1, 8, 6, 6}, rng);
  const Tensor m = random_map(1, 3, 6, 6, rng);
  Tape tape;
  Tensor loss;
  {
    GradScope scope(tape);
    const SpmOutput out = spm_forward(f, m, p, 2);
    loss = ops::add(ops::sum(ops::mul(out.feature, out.feature)), ops::sum(ops::mul(out.map, out.map)));
  }
  tape.backward(loss);
  for (const Tensor& t : p.tensors()) {
    CHECK(t.has_grad());
    bool finite = true;
    for (double g : t.grad()) finite = finite && std::isfinite(g);
    CHECK(finite);
  }
  CHECK_FALSE(f.has_grad());
}

TEST_CASE("gradcheck through a full SPM iteration") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(100 + seed);
    SpmParams p = random_params(small_config(), rng);
    const Tensor f = random_tensor({1, 8, 6, 6}, rng, -1, 1, true);
    const Tensor m = random_map(1, 3, 6, 6, rng);
    const Tensor probe_f = random_tensor({1, 8, 6, 6}, rng);
    const Tensor probe_m = random_tensor({1, 3, 6, 6}, rng);
    std::vector<NamedTensor> inputs{{"F", f}};
    p.visit("spm", [&](const std::string& n, Tensor& t) { inputs.push_back({n, t}); });
    const auto report = gradcheck(
        [&] {
          const SpmOutput out = spm_forward(f, m, p, 1);
          return ops::add(ops::sum(ops::mul(out.feature, probe_f)), ops::sum(ops::mul(out.map, probe_m)));
        },
        inputs, 1e-5, 1e-4);
    CHECK_MESSAGE(report.passed, "seed " << seed << " max rel " << report.max_rel_error);
  }
}

TEST_CASE("gradcheck of refine_map and the prompt product") {
  Rng rng(12);
  SpmParams p = random_params(small_config(), rng);
  const Tensor f = random_tensor({1, 8, 5, 5}, rng, -1, 1, true);
  const Tensor m = random_map(1, 3, 5, 5, rng);
  const Tensor probe = random_tensor({1, 3, 5, 5}, rng);
  std::vector<NamedTensor> b1;
  visit_conv("b1_in", p.b1_in, [&](const std::string& n, Tensor& t) { b1.push_back({n, t}); });
  p.b1_pdc.visit("b1_pdc", [&](const std::string& n, Tensor& t) { b1.push_back({n, t}); });
  visit_conv("b1_out", p.b1_out, [&](const std::string& n, Tensor& t) { b1.push_back({n, t}); });
  CHECK(gradcheck([&] { return ops::sum(ops::mul(refine_map(f, m, p), probe)); }, b1, 1e-6, 1e-4).passed);

  const Tensor probe_f = random_tensor({1, 8, 5, 5}, rng);
  std::vector<NamedTensor> b2{{"F", f}};
  visit_conv("b2_out", p.b2_out, [&](const std::string& n, Tensor& t) { b2.push_back({n, t}); });
  CHECK(gradcheck([&] { return ops::sum(ops::mul(generate_prompt(f, m, p).feature, probe_f)); }, b2, 1e-6, 1e-4)
            .passed);
}

TEST_CASE("recognition mode") {
  Rng rng(13);
  SpmConfig cfg = small_config(8, 4, 8);
  SpmParams p = SpmParams::make(cfg, rng);
  const Tensor v0 = init_v0({{0.1, 0.2, 0.3, 0.4}}, 2);
  CHECK(v0.shape() == Shape{2, 4, 1, 1});
  const Tensor e = ops::expand_spatial(v0, 3, 5);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t y = 0; y < 3; ++y)
        for (std::size_t x = 0; x < 5; ++x) CHECK(e.at(b, c, y, x) == v0.at(b, c, 0, 0));

  const Tensor f = random_tensor({2, 8, 5, 5}, rng);
  const RecognitionOutput out = spm_forward_recognition(f, v0, p, 3);
  CHECK(bitwise_equal(out.feature, f));
  CHECK(out.interim.size() == 3);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng r2(seed);
    SpmParams q = random_params(cfg, r2);
    const RecognitionOutput o = spm_forward_recognition(random_tensor({2, 8, 4, 4}, r2, -2, 2), v0, q, 2);
    CHECK(o.vector.shape() == Shape{2, 4, 1, 1});
    for (const Tensor& v : o.interim) CHECK(max_simplex_violation(v) <= 1e-6);
  }

  SpmParams q = random_params(cfg, rng);
  const Tensor fg = random_tensor({1, 8, 4, 4}, rng, -1, 1, true);
  const Tensor probe = random_tensor({1, 8, 4, 4}, rng);
  std::vector<NamedTensor> inputs{{"F", fg}};
  q.visit("spm", [&](const std::string& n, Tensor& t) { inputs.push_back({n, t}); });
  const Tensor v1 = init_v0({{0.1, 0.2, 0.3, 0.4}}, 1);
  const auto rep = gradcheck(
      [&] {
        const RecognitionOutput o = spm_forward_recognition(fg, v1, q, 2);
        return ops::add(ops::sum(ops::mul(o.feature, probe)), ops::sum(ops::mul(o.vector, o.vector)));
      },
      inputs, 1e-5, 1e-4);
  CHECK_MESSAGE(rep.passed, "max rel " << rep.max_rel_error);
}
