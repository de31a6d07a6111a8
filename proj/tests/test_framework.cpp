#include <doctest.h>

#include <cmath>
#include <limits>
#include <map>
#include <set>

#include "pmss/framework/config.hpp"
#include "pmss/framework/pipeline.hpp"
#include "pmss/framework/train.hpp"
#include "pmss/numerics/checkpoint.hpp"
#include "pmss/numerics/ops.hpp"
#include "pmss/numerics/tape.hpp"
#include "test_oracles.hpp"

using namespace pmss;
using namespace pmss::framework;
using pmss::testing::random_tensor;

namespace {

backbone::Backbone tiny_backbone(std::uint64_t seed = 1) {
  backbone::BackboneConfig c;
  c.channels = {8, 8, 16, 16};
  c.depths = {1, 1, 1, 1};
  c.strides = {1, 2, 2, 1};
  c.seed = seed;
  backbone::Backbone bb = backbone::build(c);
  bb.freeze();
  return bb;
}

PipelineSpec tiny_spec(std::vector<std::size_t> stages = {1, 2, 3, 4}, std::size_t r = 1) {
  PipelineSpec s;
  s.num_classes = 3;
  s.spm_stages = std::move(stages);
  s.spm_channels = 8;
  s.iterations = r;
  s.head_channels = 8;
  s.module_channels = 8;
  return s;
}

spm::ClassPrior tiny_prior() { return {{0.6, 0.3, 0.1}}; }

Pipeline tiny_pipeline(Strategy st, std::vector<std::size_t> stages = {1, 2, 3, 4}, std::size_t r = 1,
                       std::uint64_t seed = 3) {
  Pipeline p = Pipeline::build(tiny_spec(std::move(stages), r), tiny_backbone(), tiny_prior(), seed);
  apply_strategy(p, st);
  return p;
}

data::Dataset tiny_dataset(std::size_t k = 3) {
  data::SynthSpec s = data::SynthSpec::downstream();
  s.size = 16;
  s.num_classes = k;
  s.classes.resize(k - 1);
  s.n_train = 8;
  s.n_val = 4;
  return data::generate(s);
}

std::map<std::string, std::vector<double>> snapshot(Pipeline& p) {
  std::map<std::string, std::vector<double>> out;
  p.visit([&](const std::string& n, Tensor& t, Group) { out[n].assign(t.data().begin(), t.data().end()); });
  return out;
}

bool is_bias(const std::string& name) { return name.size() > 5 && name.substr(name.size() - 5) == ".bias"; }

}  // namespace

TEST_CASE("strategy tags") {
  for (Strategy s : all_strategies()) CHECK(strategy_from(to_string(s)) == s);
  CHECK(all_strategies().size() == 7);
  CHECK_THROWS_AS(strategy_from("lora"), std::invalid_argument);
}

TEST_CASE("head tuning equals frozen backbone plus head") {
  Pipeline p = tiny_pipeline(Strategy::head);
  Rng rng(1);
  const Tensor img = random_tensor({2, 3, 16, 16}, rng, 0, 1);
  const ForwardResult r = p.forward(img);
  CHECK(r.interim.empty());
  CHECK(r.logits.shape() == Shape{2, 3, 16, 16});
  CHECK(bitwise_equal(r.logits, p.head(p.backbone.forward(img), 16, 16)));
}

TEST_CASE("step-0 equivalence of prompt_matched and head tuning") {
  Pipeline p = tiny_pipeline(Strategy::prompt_matched, {1, 2, 3, 4, 5}, 2);
  Pipeline h = tiny_pipeline(Strategy::head, {1, 2, 3, 4, 5}, 2);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const Tensor img = random_tensor({1, 3, 16, 16}, rng, 0, 1);
    const ForwardResult pr = p.forward(img);
    CHECK(bitwise_equal(pr.logits, h.forward(img).logits));
    CHECK(pr.interim.size() == 5);
    for (const auto& s : pr.interim) CHECK(s.maps.size() == 2);
  }
}

TEST_CASE("side and adapter are identities at initialization") {
  Pipeline h = tiny_pipeline(Strategy::head);
  Rng rng(2);
  const Tensor img = random_tensor({1, 3, 16, 16}, rng, 0, 1);
  for (Strategy s : {Strategy::side, Strategy::adapter}) {
    Pipeline p = tiny_pipeline(s);
    CHECK(p.modules.size() == 4);
    CHECK(bitwise_equal(p.forward(img).logits, h.forward(img).logits));
  }
}

TEST_CASE("partial insertion hands M0 to the first present SPM") {
  Pipeline p = tiny_pipeline(Strategy::prompt_matched, {3, 5}, 1);
  for (auto& s : p.spms)
    if (s)
      for (double& v : s->b2_out.bias.data()) v = 0.1;
  Rng rng(3);
  const Tensor img = random_tensor({1, 3, 16, 16}, rng, 0, 1);
  const ForwardResult r = p.forward(img);
  REQUIRE(r.interim.size() == 2);
  CHECK(r.interim[0].point == 3);
  CHECK(r.interim[1].point == 5);
  // Manual recomputation of the first SPM from M0.
  Tensor f = p.backbone.run_stage(0, img);
  f = p.backbone.run_stage(1, f);
  f = p.backbone.run_stage(2, f);
  const Tensor m0 = spm::init_m0(p.prior, 1, f.dim(2), f.dim(3));
  CHECK(bitwise_equal(spm::spm_forward(f, m0, *p.spms[2], 1).map, r.interim[0].maps[0]));
}

TEST_CASE("shape breaks name the insertion point") {
  Pipeline p = tiny_pipeline(Strategy::prompt_matched, {1, 2}, 1);
  spm::SpmConfig wrong = p.spms[1]->config;
  wrong.feature_channels = 16;
  Rng rng(4);
  p.spms[1] = spm::SpmParams::make(wrong, rng);
  try {
    p.forward(random_tensor({1, 3, 16, 16}, rng, 0, 1));
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("insertion point 2") != std::string::npos);
  }
}

TEST_CASE("registry matches each strategy's definition") {
  for (Strategy s : all_strategies()) {
    Pipeline p = tiny_pipeline(s);
    std::set<std::string> expected;
    p.visit([&](const std::string& n, Tensor&, Group g) {
      bool train = false;
      switch (s) {
        case Strategy::full:
        case Strategy::scratch: train = true; break;
        case Strategy::head: train = g == Group::head; break;
        case Strategy::bias: train = g == Group::head || (g == Group::backbone && is_bias(n)); break;
        case Strategy::side: train = g == Group::head || n.rfind("side.", 0) == 0; break;
        case Strategy::adapter: train = g == Group::head || n.rfind("adapter.", 0) == 0; break;
        case Strategy::prompt_matched: train = g == Group::head || n.rfind("spm", 0) == 0; break;
      }
      if (train) expected.insert(n);
    });
    std::set<std::string> got;
    for (const auto& e : p.registry()) got.insert(e.name);
    CHECK_MESSAGE(got == expected, to_string(s));
    const ParamCounts c = count_params(p.registry());
    if (s == Strategy::head) {
      CHECK(c.backbone == 0);
      CHECK(c.prompt == 0);
      CHECK(c.head == p.head.conv1.param_count() + p.head.conv2.param_count());
    }
    if (s == Strategy::prompt_matched) CHECK(c.backbone == 0);
  }
}

TEST_CASE("count_params equals a brute-force walk") {
  for (Strategy s : all_strategies())
    for (std::size_t r : {1, 3}) {
      Pipeline p = tiny_pipeline(s, {1, 2, 3, 4, 5}, r);
      ParamCounts walk;
      p.visit([&](const std::string& n, Tensor& t, Group) {
        if (!t.requires_grad()) return;
        std::size_t count = 1;
        for (auto e : t.shape()) count *= e;
        if (n.rfind("backbone.", 0) == 0)
          walk.backbone += count;
        else if (n.rfind("head.", 0) == 0)
          walk.head += count;
        else
          walk.prompt += count;
      });
      CHECK(count_params(p.registry()) == walk);
    }
}

TEST_CASE("prompt budget grows with stages and ignores R") {
  std::size_t previous = 0;
  for (std::size_t j = 1; j <= 5; ++j) {
    std::vector<std::size_t> stages;
    for (std::size_t i = 1; i <= j; ++i) stages.push_back(i);
    const std::size_t r1 = count_params(tiny_pipeline(Strategy::prompt_matched, stages, 1).registry()).prompt;
    const std::size_t r3 = count_params(tiny_pipeline(Strategy::prompt_matched, stages, 3).registry()).prompt;
    CHECK(r1 == r3);
    CHECK(r1 > previous);
    previous = r1;
  }
}

TEST_CASE("total loss formula") {
  Rng rng(5);
  const Tensor logits = random_tensor({1, 3, 8, 8}, rng, -2, 2);
  LabelMap target(1, 8, 8);
  for (auto& v : target.labels) v = static_cast<std::int32_t>(rng.below(3));
  const Tensor map = ops::softmax_channels(random_tensor({1, 3, 4, 4}, rng, -2, 2));
  const double ce = ops::cross_entropy_logits(logits, target).item();
  const double c = ops::cross_entropy_probs(ops::bilinear_resize(map, 8, 8), target).item();

  LossSpec off;
  off.weights.assign(5, 0.0);
  CHECK(total_loss(logits, {{4, {map}}}, target, off).item() == ce);
  CHECK(total_loss(logits, {}, target, LossSpec{}).item() == ce);

  LossSpec on;
  CHECK(total_loss(logits, {{4, {map}}}, target, on).item() == doctest::Approx(ce + 0.3 * c).epsilon(1e-14));

  // Doubling R with identical maps keeps each stage's interim sum unchanged.
  LossSpec r2;
  r2.iterations = 2;
  CHECK(total_loss(logits, {{4, {map, map}}}, target, r2).item() ==
        doctest::Approx(ce + 0.3 * c).epsilon(1e-14));

  // Linearity in a_i.
  LossSpec a1, a2;
  a1.weights = {0.05, 0.1, 0.2, 0.7, 0.4};
  a2.weights = {0.05, 0.1, 0.2, 1.4, 0.4};
  const double l1 = total_loss(logits, {{4, {map}}}, target, a1).item() - ce;
  const double l2 = total_loss(logits, {{4, {map}}}, target, a2).item() - ce;
  CHECK(l2 == doctest::Approx(2.0 * l1).epsilon(1e-14));

  LossSpec short_spec;
  short_spec.weights = {0.05, 0.1};
  CHECK_THROWS_AS(total_loss(logits, {{4, {map}}}, target, short_spec), std::invalid_argument);
}

TEST_CASE("zero training steps keep the initialization") {
  Pipeline p = tiny_pipeline(Strategy::prompt_matched);
  const auto before = snapshot(p);
  const TrainReport r = train(p, tiny_dataset(), {.steps = 0}, LossSpec{});
  CHECK(r.records.empty());
  CHECK(snapshot(p) == before);
}

TEST_CASE("only registry tensors change during training") {
  const data::Dataset ds = tiny_dataset();
  for (Strategy s : all_strategies()) {
    Pipeline p = tiny_pipeline(s);
    const auto before = snapshot(p);
    std::set<std::string> reg;
    for (const auto& e : p.registry()) reg.insert(e.name);
    const std::string hash = backbone::backbone_sha256(p.backbone);
    train(p, ds, {.steps = 10, .lr = 0.01, .batch = 2, .seed = 1}, LossSpec{});
    const auto after = snapshot(p);
    std::size_t changed_in_registry = 0;
    for (const auto& [name, values] : after) {
      const bool changed = values != before.at(name);
      if (!reg.count(name)) CHECK_MESSAGE(!changed, to_string(s) << " changed frozen " << name);
      changed_in_registry += changed;
    }
    CHECK(changed_in_registry > 0);
    const bool frozen = s == Strategy::head || s == Strategy::side || s == Strategy::adapter ||
                        s == Strategy::prompt_matched;
    if (frozen) CHECK(backbone::backbone_sha256(p.backbone) == hash);
  }
}

TEST_CASE("training is deterministic and reduces loss") {
  const data::Dataset ds = tiny_dataset();
  const TrainOptions opts{.steps = 40, .lr = 0.02, .batch = 4, .seed = 7, .eval_every = 20};
  Pipeline a = tiny_pipeline(Strategy::prompt_matched);
  Pipeline b = tiny_pipeline(Strategy::prompt_matched);
  const TrainReport ra = train(a, ds, opts, LossSpec{});
  const TrainReport rb = train(b, ds, opts, LossSpec{});
  CHECK(encode_checkpoint(a.named_tensors()) == encode_checkpoint(b.named_tensors()));
  REQUIRE(ra.records.size() == 40);
  CHECK(ra.records[19].miou.has_value());
  CHECK_FALSE(ra.records[18].miou.has_value());
  double first = 0, last = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    first += ra.records[i].loss;
    last += ra.records[35 + i].loss;
  }
  CHECK(last < first);
  CHECK(ra.records.back().loss == rb.records.back().loss);
}

TEST_CASE("non-finite loss names the tensor") {
  Pipeline p = tiny_pipeline(Strategy::prompt_matched);
  p.head.conv1.weight.data()[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    train(p, tiny_dataset(), {.steps = 1, .batch = 1}, LossSpec{});
    FAIL("expected NonFiniteError");
  } catch (const NonFiniteError& e) {
    CHECK(e.tensor() == "head.conv1.weight");
    CHECK(e.step() == 0);
  }
}

TEST_CASE("pipeline tensors round trip through a checkpoint") {
  Pipeline a = tiny_pipeline(Strategy::prompt_matched, {1, 2, 3, 4, 5}, 1, 11);
  Pipeline b = tiny_pipeline(Strategy::prompt_matched, {1, 2, 3, 4, 5}, 1, 12);
  CHECK(encode_checkpoint(a.named_tensors()) != encode_checkpoint(b.named_tensors()));
  b.load_tensors(decode_checkpoint(encode_checkpoint(a.named_tensors())));
  CHECK(encode_checkpoint(a.named_tensors()) == encode_checkpoint(b.named_tensors()));
  Pipeline c = tiny_pipeline(Strategy::prompt_matched, {1, 2}, 1, 12);
  CHECK_THROWS_AS(c.load_tensors(decode_checkpoint(encode_checkpoint(b.named_tensors()))), std::exception);
  Pipeline d = tiny_pipeline(Strategy::prompt_matched, {1, 2, 3, 4, 5}, 1, 12);
  CHECK_THROWS_AS(d.load_tensors(decode_checkpoint(encode_checkpoint(c.named_tensors()))), CheckpointError);
}

TEST_CASE("run config parsing") {
  using nlohmann::json;
  const RunConfig def = parse_run_config(json::object());
  CHECK(def.pipeline.iterations == 1);
  CHECK(def.pipeline.spm_stages == std::vector<std::size_t>{1, 2, 3, 4});
  CHECK(def.strategy == Strategy::prompt_matched);
  CHECK(def.data.num_classes == 5);

  auto field_of = [](const json& j) {
    try {
      parse_run_config(j);
    } catch (const ConfigError& e) {
      return e.field();
    }
    return std::string("<none>");
  };
  CHECK(field_of({{"spm", {{"R", 0}}}}) == "spm.R");
  CHECK(field_of({{"spm", {{"C", 30}}}}) == "spm.C");
  CHECK(field_of({{"spm", {{"stages", {1, 6}}}}}) == "spm.stages");
  CHECK(field_of({{"strategy", "lora"}}) == "strategy");
  CHECK(field_of({{"train", {{"lr", -1.0}}}}) == "train.lr");
  CHECK(field_of({{"train", {{"batch", "eight"}}}}) == "train.batch");
  CHECK(field_of({{"backbone", {{"depths", {2, 0, 2, 2}}}}}) == "backbone.depths");
  CHECK(field_of({{"trian", json::object()}}) == "trian");
  CHECK(field_of({{"loss", {{"weights", {0.1, 0.1}}}}}) == "loss.weights");
  CHECK(field_of({{"data", {{"num_classes", 1}}}}) == "data.num_classes");

  const RunConfig spl = parse_run_config({{"loss", {{"spl", false}}}});
  for (double w : spl.loss.weights) CHECK(w == 0.0);
  const RunConfig r3 = parse_run_config({{"spm", {{"R", 3}}}});
  CHECK(r3.loss.iterations == 3);

  // Echo round trip.
  const RunConfig again = parse_run_config(to_json(r3));
  CHECK(to_json(again) == to_json(r3));
}
