#include "pmss/framework/pipeline.hpp"

#include <algorithm>
#include <map>
#include <stdexcept>

#include "pmss/numerics/checkpoint.hpp"
#include "pmss/numerics/ops.hpp"

namespace pmss::framework {

namespace {

constexpr std::array<std::pair<Strategy, const char*>, 7> kStrategyNames{{
    {Strategy::full, "full"},
    {Strategy::scratch, "scratch"},
    {Strategy::head, "head"},
    {Strategy::bias, "bias"},
    {Strategy::side, "side"},
    {Strategy::adapter, "adapter"},
    {Strategy::prompt_matched, "prompt_matched"},
}};

std::string module_prefix(Strategy s) { return s == Strategy::side ? "side" : "adapter"; }

}  // namespace

std::string to_string(Strategy s) {
  for (auto [k, n] : kStrategyNames)
    if (k == s) return n;
  return "head";
}

Strategy strategy_from(const std::string& tag) {
  for (auto [k, n] : kStrategyNames)
    if (tag == n) return k;
  throw std::invalid_argument("unknown strategy \"" + tag + "\"");
}

const std::vector<Strategy>& all_strategies() {
  static const std::vector<Strategy> all = [] {
    std::vector<Strategy> v;
    for (auto [k, n] : kStrategyNames) v.push_back(k);
    return v;
  }();
  return all;
}

SegHead SegHead::make(std::size_t in_channels, std::size_t hidden, std::size_t num_classes, Rng& rng) {
  SegHead h{ConvLayer::make(in_channels, hidden, 3, {}, rng), ConvLayer::make(hidden, num_classes, 3, {}, rng)};
  // Classifier starts near zero so initial predictions are close to uniform.
  for (double& v : h.conv2.weight.data()) v = 0.01 * rng.normal();
  h.conv1.set_trainable(true);
  h.conv2.set_trainable(true);
  return h;
}

Tensor SegHead::operator()(const Tensor& feature, std::size_t out_h, std::size_t out_w) const {
  const Tensor logits = ops::conv2d(ops::relu(ops::conv2d(feature, conv1)), conv2);
  return ops::bilinear_resize(logits, out_h, out_w);
}

Tensor BlockModule::operator()(const Tensor& x) const { return ops::conv2d(ops::relu(ops::conv2d(x, down)), up); }

Pipeline Pipeline::build(const PipelineSpec& spec, backbone::Backbone backbone, spm::ClassPrior prior,
                         std::uint64_t seed) {
  if (prior.probs.size() != spec.num_classes)
    throw std::invalid_argument("class prior has " + std::to_string(prior.probs.size()) + " entries, expected K=" +
                                std::to_string(spec.num_classes));
  if (spec.iterations < 1) throw std::invalid_argument("spm.R must be >= 1");
  Pipeline p;
  p.spec = spec;
  p.seed = seed;
  p.prior = std::move(prior);
  p.backbone = std::move(backbone);
  const std::size_t n = p.backbone.num_stages();
  p.spms.resize(n + 1);
  for (std::size_t point : spec.spm_stages) {
    if (point < 1 || point > n + 1)
      throw std::invalid_argument("spm.stages entry " + std::to_string(point) + " outside 1.." +
                                  std::to_string(n + 1));
    if (p.spms[point - 1]) throw std::invalid_argument("spm.stages lists " + std::to_string(point) + " twice");
    spm::SpmConfig cfg;
    cfg.feature_channels = p.backbone.stage_channels(point - 1);
    cfg.num_classes = spec.num_classes;
    cfg.channels = spec.spm_channels;
    cfg.pdc_groups = spec.pdc_groups;
    cfg.dilations = spec.dilations;
    cfg.pdc_relu = spec.pdc_relu;
    cfg.in_groups = spec.in_groups;
    Rng rng(mix_seed(seed, 100 + point));
    p.spms[point - 1] = spm::SpmParams::make(cfg, rng);
  }
  Rng head_rng(mix_seed(seed, 1));
  p.head = SegHead::make(p.backbone.stage_channels(n), spec.head_channels, spec.num_classes, head_rng);
  return p;
}

std::size_t Pipeline::spm_count() const {
  if (!prompts_active()) return 0;
  return static_cast<std::size_t>(std::count_if(spms.begin(), spms.end(), [](const auto& s) { return s.has_value(); }));
}

ForwardResult Pipeline::forward(const Tensor& image) const {
  if (image.rank() != 4) throw ShapeError("pipeline input must be N x 3 x H x W");
  const std::size_t n = backbone.num_stages();
  ForwardResult out;
  backbone::BlockHook hook;
  if ((strategy == Strategy::side || strategy == Strategy::adapter) && !modules.empty()) {
    const auto shapes = backbone.block_shapes();
    std::vector<std::size_t> first(n + 2, 0);  // index of the first block of each stage
    for (std::size_t i = 0; i < shapes.size(); ++i)
      if (shapes[i].block == 0) first[shapes[i].stage] = i;
    const bool side = strategy == Strategy::side;
    hook = [this, first, side](std::size_t stage, std::size_t block, const Tensor& in, const Tensor& y) {
      const BlockModule& m = modules[first[stage] + block];
      return ops::add(y, m(side ? in : y));
    };
  }

  Tensor f = backbone.run_stage(0, image);
  Tensor map;
  const bool prompted = prompts_active();
  for (std::size_t point = 1; point <= n + 1; ++point) {
    const auto& params = spms[point - 1];
    if (prompted && params) {
      if (!map) map = spm::init_m0(prior, f.dim(0), f.dim(2), f.dim(3));
      try {
        spm::SpmOutput s = spm::spm_forward(f, map, *params, spec.iterations);
        f = s.feature;
        map = s.map;
        out.interim.push_back({point, std::move(s.interim)});
      } catch (const ShapeError& e) {
        throw ShapeError("insertion point " + std::to_string(point) + ": " + e.what());
      }
    }
    if (point <= n) f = backbone.run_stage(point, f, hook);
  }
  out.logits = head(f, image.dim(2), image.dim(3));
  return out;
}

void Pipeline::visit(const std::function<void(const std::string&, Tensor&, Group)>& fn) {
  backbone.visit([&](const std::string& name, Tensor& t) { fn(name, t, Group::backbone); });
  if (prompts_active())
    for (std::size_t i = 0; i < spms.size(); ++i)
      if (spms[i])
        spms[i]->visit("spm" + std::to_string(i + 1), [&](const std::string& name, Tensor& t) {
          fn(name, t, Group::prompt);
        });
  if (strategy == Strategy::side || strategy == Strategy::adapter) {
    const auto shapes = backbone.block_shapes();
    const std::string prefix = module_prefix(strategy);
    for (std::size_t i = 0; i < modules.size(); ++i) {
      const std::string p =
          prefix + ".s" + std::to_string(shapes[i].stage) + ".b" + std::to_string(shapes[i].block);
      auto cb = [&](const std::string& name, Tensor& t) { fn(name, t, Group::prompt); };
      visit_conv(p + ".down", modules[i].down, cb);
      visit_conv(p + ".up", modules[i].up, cb);
    }
  }
  auto head_cb = [&](const std::string& name, Tensor& t) { fn(name, t, Group::head); };
  visit_conv("head.conv1", head.conv1, head_cb);
  visit_conv("head.conv2", head.conv2, head_cb);
}

std::vector<RegistryEntry> Pipeline::registry() {
  std::vector<RegistryEntry> out;
  visit([&](const std::string& name, Tensor& t, Group g) {
    if (t.requires_grad()) out.push_back({name, t, g});
  });
  return out;
}

std::vector<NamedTensor> Pipeline::named_tensors() {
  std::vector<NamedTensor> out;
  visit([&](const std::string& name, Tensor& t, Group) { out.push_back({name, t}); });
  return out;
}

void Pipeline::load_tensors(const std::vector<NamedTensor>& entries) {
  std::map<std::string, const Tensor*> byname;
  for (const auto& e : entries) byname.emplace(e.name, &e.tensor);
  std::vector<std::pair<Tensor, const Tensor*>> plan;
  visit([&](const std::string& name, Tensor& t, Group) {
    const auto it = byname.find(name);
    if (it == byname.end()) throw CheckpointError("checkpoint lacks tensor " + name);
    if (it->second->shape() != t.shape())
      throw CheckpointError("tensor " + name + " has shape " + shape_str(it->second->shape()) + ", expected " +
                            shape_str(t.shape()));
    plan.emplace_back(t, it->second);
    byname.erase(it);
  });
  if (!byname.empty()) throw CheckpointError("checkpoint has unexpected tensor " + byname.begin()->first);
  // Nothing is written until every tensor has been matched.
  for (auto& [dst, src] : plan) std::copy(src->data().begin(), src->data().end(), dst.data().begin());
}

std::vector<RegistryEntry> apply_strategy(Pipeline& p, Strategy strategy) {
  p.strategy = strategy;
  p.modules.clear();
  auto set_backbone = [&](bool on) { p.backbone.visit([on](const std::string&, Tensor& t) { t.set_requires_grad(on); }); };

  switch (strategy) {
    case Strategy::scratch: {
      backbone::BackboneConfig cfg = p.backbone.config;
      cfg.seed = mix_seed(cfg.seed, 0x5c7a7c4);
      p.backbone = backbone::build(cfg);
      p.backbone.provenance = "random initialization (scratch)";
      [[fallthrough]];
    }
    case Strategy::full:
      set_backbone(true);
      p.backbone.set_frozen_flag(false);
      break;
    case Strategy::bias:
      set_backbone(false);
      p.backbone.set_frozen_flag(false);
      p.backbone.visit([](const std::string& name, Tensor& t) {
        if (name.size() >= 5 && name.compare(name.size() - 5, 5, ".bias") == 0 &&
            name.find(".token.") == std::string::npos)
          t.set_requires_grad(true);
      });
      break;
    case Strategy::side:
    case Strategy::adapter: {
      set_backbone(false);
      p.backbone.set_frozen_flag(true);
      Rng rng(mix_seed(p.seed, 0xada));
      for (const backbone::BlockShape& b : p.backbone.block_shapes()) {
        const bool side = strategy == Strategy::side;
        const std::size_t in = side ? b.in_channels : b.out_channels;
        const std::size_t mid = p.spec.module_channels;
        const std::size_t g = p.spec.module_groups;
        if (in % g != 0 || mid % g != 0)
          throw std::invalid_argument(to_string(strategy) + ": block input channels " + std::to_string(in) +
                                      " not divisible by " + std::to_string(g) + " groups");
        BlockModule m;
        m.down = ConvLayer::make(in, mid, 3, {.groups = g, .stride = side ? b.stride : 1}, rng);
        m.up = ConvLayer::make_zero(mid, b.out_channels, 1, {});
        m.down.set_trainable(true);
        m.up.set_trainable(true);
        p.modules.push_back(std::move(m));
      }
      break;
    }
    case Strategy::head:
    case Strategy::prompt_matched:
      set_backbone(false);
      p.backbone.set_frozen_flag(true);
      break;
  }
  p.head.conv1.set_trainable(true);
  p.head.conv2.set_trainable(true);
  for (auto& s : p.spms)
    if (s)
      for (Tensor& t : s->tensors()) t.set_requires_grad(strategy == Strategy::prompt_matched);
  return p.registry();
}

ParamCounts count_params(const std::vector<RegistryEntry>& registry) {
  ParamCounts c;
  for (const auto& e : registry) {
    switch (e.group) {
      case Group::backbone: c.backbone += e.tensor.numel(); break;
      case Group::prompt: c.prompt += e.tensor.numel(); break;
      case Group::head: c.head += e.tensor.numel(); break;
    }
  }
  return c;
}

double LossSpec::weight(std::size_t point) const {
  if (point < 1 || point > weights.size())
    throw std::invalid_argument("loss.weights has no entry for insertion point " + std::to_string(point));
  if (iterations < 1) throw std::invalid_argument("loss iterations must be >= 1");
  return weights[point - 1] / static_cast<double>(iterations);
}

Tensor total_loss(const Tensor& logits, const std::vector<StageMaps>& interim, const LabelMap& target,
                  const LossSpec& spec) {
  Tensor loss = ops::cross_entropy_logits(logits, target, spec.ignore_index);
  for (const StageMaps& s : interim) {
    const double a = spec.weight(s.point);
    if (a < 0.0) throw std::invalid_argument("loss weight for insertion point " + std::to_string(s.point) +
                                             " is negative");
    if (a == 0.0) continue;
    for (const Tensor& m : s.maps) {
      const Tensor up = ops::bilinear_resize(m, target.h, target.w);
      loss = ops::add(loss, ops::scale(ops::cross_entropy_probs(up, target, spec.ignore_index), a));
    }
  }
  return loss;
}

}  // namespace pmss::framework
