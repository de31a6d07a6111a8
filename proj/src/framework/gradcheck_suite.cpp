#include "pmss/framework/gradcheck_suite.hpp"

#include <algorithm>
#include <chrono>
#include <stdexcept>

#include "pmss/backbone/backbone.hpp"
#include "pmss/framework/pipeline.hpp"
#include "pmss/numerics/ops.hpp"
#include "pmss/spm/spm.hpp"

namespace pmss::framework {

namespace {

constexpr double kCompositeEps = 1e-5;

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool requires_grad = false) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

/// Contracts every output element against a fixed random probe so that no
/// gradient is trivially one.
Tensor contract(const Tensor& y, const Tensor& probe) { return ops::sum(ops::mul(y, probe)); }

Tensor random_map(std::size_t n, std::size_t k, std::size_t h, std::size_t w, Rng& rng) {
  return ops::softmax_channels(random_tensor({n, k, h, w}, rng, -2, 2));
}

/// SPM parameters with a non-zero prompt projection, so branch 2 is exercised.
spm::SpmParams random_spm(const spm::SpmConfig& cfg, Rng& rng) {
  spm::SpmParams p = spm::SpmParams::make(cfg, rng);
  for (Tensor* t : {&p.b1_out.weight, &p.b2_out.weight, &p.b2_out.bias})
    for (double& v : t->data()) v = rng.uniform(-0.5, 0.5);
  return p;
}

std::vector<NamedTensor> spm_inputs(spm::SpmParams& p) {
  std::vector<NamedTensor> out;
  p.visit("spm", [&](const std::string& n, Tensor& t) { out.push_back({n, t}); });
  return out;
}

std::vector<NamedTensor> trainable_backbone(backbone::Backbone& bb) {
  std::vector<NamedTensor> out;
  bb.visit([&](const std::string& n, Tensor& t) {
    t.set_requires_grad(true);
    out.push_back({n, t});
  });
  return out;
}

}  // namespace

std::string to_string(CheckScope s) {
  switch (s) {
    case CheckScope::layers: return "layers";
    case CheckScope::spm: return "spm";
    case CheckScope::pipeline: return "pipeline";
  }
  return "layers";
}

CheckScope check_scope_from(const std::string& tag) {
  for (auto s : {CheckScope::layers, CheckScope::spm, CheckScope::pipeline})
    if (to_string(s) == tag) return s;
  throw std::invalid_argument("unknown gradcheck scope '" + tag + "' (expected layers, spm or pipeline)");
}

double default_rel_tol(CheckScope scope) { return scope == CheckScope::pipeline ? 1e-3 : 1e-4; }

std::vector<GradCase> primitive_cases(Rng& rng) {
  std::vector<GradCase> cases;
  auto probe = [&rng](const Shape& s) { return random_tensor(s, rng); };
  {
    const std::size_t groups = 1 + rng.below(2);
    const std::size_t dil = 1 + rng.below(4);
    auto layer = ConvLayer::make(2 * groups, 2 * groups, 3,
                                 {.dilation = dil, .groups = groups, .stride = 1 + rng.below(2)}, rng);
    for (auto& b : layer.bias.data()) b = rng.uniform(-0.5, 0.5);
    auto x = random_tensor({2, 2 * groups, 5, 6}, rng, -1, 1, true);
    auto p = probe({2, 2 * groups, layer.out_extent(5), layer.out_extent(6)});
    cases.push_back({"conv2d", [=] { return contract(ops::conv2d(x, layer), p); },
                     {{"x", x}, {"weight", layer.weight}, {"bias", layer.bias}}});
  }
  {
    auto layer = ConvLayer::make(3, 4, 1, {}, rng);
    auto x = random_tensor({1, 3, 3, 3}, rng, -1, 1, true);
    auto p = probe({1, 4, 3, 3});
    cases.push_back({"conv2d_1x1", [=] { return contract(ops::conv2d(x, layer), p); },
                     {{"x", x}, {"weight", layer.weight}, {"bias", layer.bias}}});
  }
  {
    auto x = random_tensor({1, 2, 3, 3}, rng, -1, 1, true);
    auto p = probe(x.shape());
    cases.push_back({"relu", [=] { return contract(ops::relu(x), p); }, {{"x", x}}});
  }
  {
    auto a = random_tensor({1, 2, 2, 3}, rng, -1, 1, true), b = random_tensor({1, 2, 2, 3}, rng, -1, 1, true);
    auto p = probe(a.shape());
    cases.push_back({"mul", [=] { return contract(ops::mul(a, b), p); }, {{"a", a}, {"b", b}}});
    cases.push_back(
        {"add", [=] { return contract(ops::mul(ops::add(a, b), ops::add(a, b)), p); }, {{"a", a}, {"b", b}}});
    const double f = rng.uniform(-2, 2);
    cases.push_back({"scale", [=] { return contract(ops::scale(a, f), p); }, {{"a", a}}});
  }
  {
    auto a = random_tensor({2, 2, 2, 2}, rng, -1, 1, true), b = random_tensor({2, 3, 2, 2}, rng, -1, 1, true);
    auto p = probe({2, 5, 2, 2});
    cases.push_back(
        {"concat_channels", [=] { return contract(ops::concat_channels(a, b), p); }, {{"a", a}, {"b", b}}});
    auto q = probe({2, 2, 2, 2});
    cases.push_back({"slice_channels", [=] { return contract(ops::slice_channels(b, 1, 3), q); }, {{"b", b}}});
  }
  {
    auto x = random_tensor({2, 4, 2, 3}, rng, -2, 2, true);
    auto p = probe(x.shape());
    cases.push_back({"softmax_channels", [=] { return contract(ops::softmax_channels(x), p); }, {{"x", x}}});
  }
  {
    auto x = random_tensor({1, 2, 3, 4}, rng, -1, 1, true);
    const std::size_t oh = 2 + rng.below(6), ow = 2 + rng.below(6);
    auto p = probe({1, 2, oh, ow});
    cases.push_back(
        {"bilinear_resize", [=] { return contract(ops::bilinear_resize(x, oh, ow), p); }, {{"x", x}}});
  }
  {
    auto z = random_tensor({2, 3, 2, 2}, rng, -2, 2, true);
    LabelMap t(2, 2, 2);
    for (auto& l : t.labels) l = static_cast<std::int32_t>(rng.below(3));
    t.labels[1] = kDefaultIgnoreIndex;
    cases.push_back({"cross_entropy", [=] { return ops::cross_entropy_logits(z, t); }, {{"logits", z}}});
    auto q = random_tensor({2, 3, 2, 2}, rng, 0.1, 1.0, true);
    cases.push_back({"cross_entropy_probs", [=] { return ops::cross_entropy_probs(q, t); }, {{"probs", q}}});
  }
  {
    auto x = random_tensor({1, 3, 2, 2}, rng, -1, 1, true);
    auto s = random_tensor({3}, rng, 0.5, 2.0, true), b = random_tensor({3}, rng, -1, 1, true);
    auto p = probe(x.shape());
    cases.push_back({"affine_channels", [=] { return contract(ops::affine_channels(x, s, b), p); },
                     {{"x", x}, {"scale", s}, {"shift", b}}});
  }
  {
    auto x = random_tensor({2, 3, 3, 3}, rng, -1, 1, true);
    auto p = probe({2, 3, 1, 1});
    cases.push_back({"global_max_pool", [=] { return contract(ops::global_max_pool(x), p); }, {{"x", x}}});
    auto v = random_tensor({2, 3, 1, 1}, rng, -1, 1, true);
    auto q = probe({2, 3, 2, 4});
    cases.push_back({"expand_spatial", [=] { return contract(ops::expand_spatial(v, 2, 4), q); }, {{"v", v}}});
  }
  {
    auto x = random_tensor({1, 2, 2, 2}, rng, -1, 1, true);
    auto w = random_tensor({4, 4}, rng, -1, 1, true), b = random_tensor({4}, rng, -1, 1, true);
    auto p = probe(x.shape());
    cases.push_back({"token_mix", [=] { return contract(ops::token_mix(x, w, b), p); },
                     {{"x", x}, {"weight", w}, {"bias", b}}});
  }
  return cases;
}

std::vector<GradCase> layer_cases(Rng& rng) {
  std::vector<GradCase> cases = primitive_cases(rng);
  {
    const std::size_t c = 8;
    auto params = spm::PdcParams::make(c, 2, {1, 2, 3, 4}, true, rng);
    for (auto& b : params.branches)
      for (double& v : b.bias.data()) v = rng.uniform(-0.3, 0.3);
    auto x = random_tensor({1, c, 5, 5}, rng, -1, 1, true);
    auto p = random_tensor({1, c, 5, 5}, rng);
    std::vector<NamedTensor> inputs{{"x", x}};
    params.visit("pdc", [&](const std::string& n, Tensor& t) { inputs.push_back({n, t}); });
    cases.push_back({"pdc", [=] { return contract(spm::pdc(x, params), p); }, inputs, kCompositeEps});
  }
  {
    auto bb = backbone::build_toy_cnn({4, 6}, {1, 1}, rng.next());
    auto inputs = trainable_backbone(bb);
    auto x = random_tensor({1, 4, 6, 6}, rng, -1, 1, true);
    inputs.push_back({"x", x});
    const Shape out = bb.run_stage(2, x).shape();
    auto p = random_tensor(out, rng);
    cases.push_back({"residual_stage", [=] { return contract(bb.run_stage(2, bb.run_stage(1, x)), p); }, inputs,
                     kCompositeEps});
  }
  {
    auto bb = backbone::build_toy_vit(4, 2, 4, 2, 8, rng.next());
    auto inputs = trainable_backbone(bb);
    auto x = random_tensor({1, 4, 2, 2}, rng, -1, 1, true);
    inputs.push_back({"x", x});
    auto p = random_tensor({1, 4, 2, 2}, rng);
    cases.push_back({"mixer_stage", [=] { return contract(bb.run_stage(2, bb.run_stage(1, x)), p); }, inputs,
                     kCompositeEps});
  }
  return cases;
}

std::vector<GradCase> spm_cases(Rng& rng) {
  std::vector<GradCase> cases;
  spm::SpmConfig cfg{.feature_channels = 8, .num_classes = 3, .channels = 8};
  {
    auto params = random_spm(cfg, rng);
    auto f = random_tensor({1, 8, 6, 6}, rng, -1, 1, true);
    auto m = random_map(1, 3, 6, 6, rng);
    m.set_requires_grad(true);
    auto p = random_tensor({1, 3, 6, 6}, rng);
    auto inputs = spm_inputs(params);
    inputs.push_back({"F", f});
    inputs.push_back({"M", m});
    cases.push_back(
        {"refine_map", [=] { return contract(spm::refine_map(f, m, params), p); }, inputs, kCompositeEps});
  }
  {
    auto params = random_spm(cfg, rng);
    auto f = random_tensor({1, 8, 6, 6}, rng, -1, 1, true);
    auto m = random_map(1, 3, 6, 6, rng);
    auto p = random_tensor({1, 8, 6, 6}, rng);
    auto inputs = spm_inputs(params);
    inputs.push_back({"F", f});
    cases.push_back({"generate_prompt",
                     [=] { return contract(spm::generate_prompt(f, m, params).feature, p); }, inputs,
                     kCompositeEps});
  }
  {
    auto params = random_spm(cfg, rng);
    const std::size_t r = 1 + rng.below(3);
    auto f = random_tensor({1, 8, 4, 4}, rng, -1, 1, true);
    auto m = random_map(1, 3, 3, 3, rng);
    auto pf = random_tensor({1, 8, 4, 4}, rng);
    auto pm = random_tensor({1, 3, 4, 4}, rng);
    auto inputs = spm_inputs(params);
    inputs.push_back({"F", f});
    cases.push_back({"spm_forward",
                     [=] {
                       const spm::SpmOutput o = spm::spm_forward(f, m, params, r);
                       Tensor l = ops::add(contract(o.feature, pf), contract(o.map, pm));
                       for (const Tensor& mi : o.interim) l = ops::add(l, contract(mi, pm));
                       return l;
                     },
                     inputs, kCompositeEps});
  }
  {
    spm::SpmConfig rc{.feature_channels = 8, .num_classes = 4, .channels = 8};
    auto params = random_spm(rc, rng);
    auto f = random_tensor({1, 8, 4, 4}, rng, -1, 1, true);
    auto v = spm::init_v0({{0.1, 0.2, 0.3, 0.4}}, 1);
    auto p = random_tensor({1, 8, 4, 4}, rng);
    auto inputs = spm_inputs(params);
    inputs.push_back({"F", f});
    cases.push_back({"spm_recognition",
                     [=] {
                       const spm::RecognitionOutput o = spm::spm_forward_recognition(f, v, params, 2);
                       return ops::add(contract(o.feature, p), ops::sum(ops::mul(o.vector, o.vector)));
                     },
                     inputs, kCompositeEps});
  }
  return cases;
}

std::vector<GradCase> pipeline_cases(Rng& rng) {
  backbone::BackboneConfig bc;
  bc.channels = {4, 4, 4, 4};
  bc.depths = {1, 1, 1, 1};
  bc.strides = {1, 2, 1, 1};
  bc.seed = rng.next();
  backbone::Backbone bb = backbone::build(bc);
  bb.freeze();
  PipelineSpec spec;
  spec.num_classes = 3;
  spec.spm_stages = {1, 3, 5};
  spec.spm_channels = 4;
  spec.iterations = 2;
  spec.head_channels = 4;
  auto pipe = std::make_shared<Pipeline>(Pipeline::build(spec, std::move(bb), {{0.5, 0.3, 0.2}}, rng.next()));
  std::vector<RegistryEntry> reg = apply_strategy(*pipe, Strategy::prompt_matched);
  for (auto& opt : pipe->spms)
    if (opt)
      for (Tensor* t : {&opt->b2_out.weight, &opt->b2_out.bias})
        for (double& v : t->data()) v = rng.uniform(-0.5, 0.5);
  auto image = random_tensor({1, 3, 8, 8}, rng, 0, 1);
  LabelMap labels(1, 8, 8);
  for (auto& l : labels.labels) l = static_cast<std::int32_t>(rng.below(3));
  LossSpec loss;
  loss.iterations = spec.iterations;
  std::vector<NamedTensor> inputs;
  for (const auto& e : reg) inputs.push_back({e.name, e.tensor});
  return {{"pipeline_prompt_matched",
           [=] {
             const ForwardResult fwd = pipe->forward(image);
             return total_loss(fwd.logits, fwd.interim, labels, loss);
           },
           inputs, kCompositeEps}};
}

std::vector<std::string> SuiteReport::failing() const {
  std::vector<std::string> out;
  for (const auto& c : cases)
    if (!c.passed && std::find(out.begin(), out.end(), c.name) == out.end()) out.push_back(c.name);
  return out;
}

SuiteReport run_gradcheck_suite(CheckScope scope, const SuiteOptions& opts) {
  const auto start = std::chrono::steady_clock::now();
  SuiteReport report;
  report.scope = scope;
  report.rel_tol = default_rel_tol(scope);
  std::function<void(Tape&)> setup;
  if (!opts.corrupt_op.empty()) setup = [&](Tape& t) { t.corrupt_vjp(opts.corrupt_op, opts.corrupt_factor); };
  for (std::size_t i = 0; i < opts.seeds; ++i) {
    const std::uint64_t seed = opts.seed + i;
    Rng rng(seed);
    std::vector<GradCase> cases;
    switch (scope) {
      case CheckScope::layers: cases = layer_cases(rng); break;
      case CheckScope::spm: cases = spm_cases(rng); break;
      case CheckScope::pipeline: cases = pipeline_cases(rng); break;
    }
    for (const auto& c : cases) {
      const GradcheckReport r = gradcheck(c.fn, c.inputs, c.eps, report.rel_tol, setup);
      report.cases.push_back({c.name, seed, r.max_rel_error, r.passed});
      report.max_rel_error = std::max(report.max_rel_error, r.max_rel_error);
    }
  }
  report.passed = std::all_of(report.cases.begin(), report.cases.end(), [](const auto& c) { return c.passed; });
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

void to_json(nlohmann::json& j, const SuiteReport& r) {
  nlohmann::json cases = nlohmann::json::array();
  for (const auto& c : r.cases)
    cases.push_back({{"name", c.name}, {"seed", c.seed}, {"max_rel_error", c.max_rel_error}, {"passed", c.passed}});
  j = {{"scope", to_string(r.scope)},
       {"rel_tol", r.rel_tol},
       {"max_rel_error", r.max_rel_error},
       {"seconds", r.seconds},
       {"passed", r.passed},
       {"failing", r.failing()},
       {"cases", cases}};
}

}  // namespace pmss::framework
