#include "pmss/backbone/backbone.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "pmss/data/metrics.hpp"
#include "pmss/numerics/checkpoint.hpp"
#include "pmss/numerics/ops.hpp"
#include "pmss/numerics/optim.hpp"
#include "pmss/numerics/tape.hpp"

namespace pmss::backbone {

namespace {

// Fixed input normalization (x - 0.5) / 0.25 folded into a per-channel affine.
const Tensor& norm_scale() {
  static const Tensor t = Tensor::full({3}, 4.0);
  return t;
}
const Tensor& norm_shift() {
  static const Tensor t = Tensor::full({3}, -2.0);
  return t;
}

std::string kind_name(Kind k) { return k == Kind::cnn ? "cnn" : "vit"; }

Kind kind_from(const std::string& s) {
  if (s == "cnn") return Kind::cnn;
  if (s == "vit") return Kind::vit;
  throw std::invalid_argument("backbone.kind must be \"cnn\" or \"vit\", got \"" + s + "\"");
}

void scale_weights(ConvLayer& l, double factor) {
  for (double& v : l.weight.data()) v *= factor;
}

ResidualBlock make_block(std::size_t in, std::size_t out, std::size_t stride, Rng& rng) {
  ResidualBlock b;
  b.conv1 = ConvLayer::make(in, out, 3, {.stride = stride}, rng);
  b.conv2 = ConvLayer::make(out, out, 3, {}, rng);
  // Keeps the residual stream from growing with depth at initialization.
  scale_weights(b.conv2, 0.5);
  if (stride != 1 || in != out) b.proj = ConvLayer::make(in, out, 1, {.stride = stride, .padding = 0}, rng);
  return b;
}

MixerBlock make_mixer(std::size_t dim, std::size_t tokens, Rng& rng) {
  MixerBlock m;
  const double bound = 0.5 / std::sqrt(static_cast<double>(tokens));
  std::vector<double> w(tokens * tokens);
  for (double& v : w) v = rng.uniform(-bound, bound);
  m.token_weight = Tensor::from({tokens, tokens}, std::move(w));
  m.token_bias = Tensor::zeros({tokens});
  m.mlp1 = ConvLayer::make(dim, 2 * dim, 1, {}, rng);
  m.mlp2 = ConvLayer::make(2 * dim, dim, 1, {}, rng);
  scale_weights(m.mlp2, 0.5);
  return m;
}

Tensor run_block(const ResidualBlock& b, const Tensor& x) {
  const Tensor h = ops::conv2d(ops::relu(ops::conv2d(x, b.conv1)), b.conv2);
  return ops::add(h, b.has_proj() ? ops::conv2d(x, b.proj) : x);
}

Tensor run_mixer(const MixerBlock& m, const Tensor& x) {
  const Tensor y = ops::add(x, ops::token_mix(x, m.token_weight, m.token_bias));
  return ops::add(y, ops::conv2d(ops::relu(ops::conv2d(y, m.mlp1)), m.mlp2));
}

void set_all_trainable(Backbone& bb, bool on) {
  bb.visit([on](const std::string&, Tensor& t) { t.set_requires_grad(on); });
}

}  // namespace

void BackboneConfig::validate() const {
  if (kind == Kind::cnn) {
    if (channels.empty()) throw std::invalid_argument("backbone.channels must name at least one stage");
    if (depths.size() != channels.size())
      throw std::invalid_argument("backbone.depths must have one entry per stage (" + std::to_string(channels.size()) +
                                  ")");
    if (strides.size() != channels.size())
      throw std::invalid_argument("backbone.strides must have one entry per stage (" +
                                  std::to_string(channels.size()) + ")");
    for (auto c : channels)
      if (c == 0) throw std::invalid_argument("backbone.channels entries must be positive");
    for (auto d : depths)
      if (d == 0) throw std::invalid_argument("backbone.depths entries must be positive");
    for (auto s : strides)
      if (s != 1 && s != 2) throw std::invalid_argument("backbone.strides entries must be 1 or 2");
    if (stem_stride == 0) throw std::invalid_argument("backbone.stem_stride must be positive");
  } else {
    if (embed_dim == 0) throw std::invalid_argument("backbone.embed_dim must be positive");
    if (layers == 0) throw std::invalid_argument("backbone.layers must be positive");
    if (stages == 0) throw std::invalid_argument("backbone.stages must be positive");
    if (layers % stages != 0)
      throw std::invalid_argument("backbone.layers=" + std::to_string(layers) + " does not split evenly into " +
                                  std::to_string(stages) + " stages");
    if (patch == 0 || image_size % patch != 0)
      throw std::invalid_argument("backbone.patch must divide backbone.image_size");
  }
}

void to_json(nlohmann::json& j, const BackboneConfig& c) {
  j = {{"kind", kind_name(c.kind)}, {"seed", c.seed}};
  if (c.kind == Kind::cnn) {
    j["channels"] = c.channels;
    j["depths"] = c.depths;
    j["strides"] = c.strides;
    j["stem_stride"] = c.stem_stride;
  } else {
    j["embed_dim"] = c.embed_dim;
    j["layers"] = c.layers;
    j["patch"] = c.patch;
    j["stages"] = c.stages;
    j["image_size"] = c.image_size;
  }
}

void from_json(const nlohmann::json& j, BackboneConfig& c) {
  c.kind = kind_from(j.value("kind", std::string("cnn")));
  c.seed = j.value("seed", c.seed);
  c.channels = j.value("channels", c.channels);
  c.depths = j.value("depths", c.depths);
  if (j.contains("strides"))
    c.strides = j.at("strides").get<std::vector<std::size_t>>();
  else if (c.strides.size() != c.channels.size()) {
    c.strides.assign(c.channels.size(), 2);
    c.strides[0] = 1;
  }
  c.stem_stride = j.value("stem_stride", c.stem_stride);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.layers = j.value("layers", c.layers);
  c.patch = j.value("patch", c.patch);
  c.stages = j.value("stages", c.stages);
  c.image_size = j.value("image_size", c.image_size);
}

std::size_t Backbone::stage_channels(std::size_t i) const {
  if (i == 0) return stem.out_channels;
  if (i > stages.size()) throw std::out_of_range("stage index " + std::to_string(i) + " out of range");
  return stages[i - 1].out_channels;
}

std::vector<BlockShape> Backbone::block_shapes() const {
  std::vector<BlockShape> out;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const Stage& st = stages[s];
    for (std::size_t b = 0; b < st.blocks.size(); ++b)
      out.push_back({s + 1, b, st.blocks[b].conv1.in_channels, st.blocks[b].conv1.out_channels,
                     st.blocks[b].conv1.stride});
    for (std::size_t b = 0; b < st.mixers.size(); ++b)
      out.push_back({s + 1, b, st.in_channels, st.out_channels, 1});
  }
  return out;
}

Tensor Backbone::run_stage(std::size_t i, const Tensor& input, const BlockHook& hook) const {
  if (i > stages.size())
    throw std::out_of_range("stage index " + std::to_string(i) + " exceeds stage count " +
                            std::to_string(stages.size()));
  if (input.rank() != 4) throw ShapeError("run_stage expects N x C x H x W input");
  if (i == 0) {
    if (input.dim(1) != stem.in_channels)
      throw ShapeError("stem expects " + std::to_string(stem.in_channels) + " channels, got " +
                       std::to_string(input.dim(1)));
    const Tensor x = ops::affine_channels(input, norm_scale(), norm_shift());
    const Tensor y = ops::conv2d(x, stem);
    return config.kind == Kind::cnn ? ops::relu(y) : y;
  }
  const Stage& st = stages[i - 1];
  if (input.dim(1) != st.in_channels)
    throw ShapeError("stage " + std::to_string(i) + " expects " + std::to_string(st.in_channels) +
                     " channels, got " + std::to_string(input.dim(1)));
  Tensor x = input;
  for (std::size_t b = 0; b < st.blocks.size(); ++b) {
    Tensor y = run_block(st.blocks[b], x);
    if (hook) y = hook(i, b, x, y);
    x = y;
  }
  for (std::size_t b = 0; b < st.mixers.size(); ++b) {
    Tensor y = run_mixer(st.mixers[b], x);
    if (hook) y = hook(i, b, x, y);
    x = y;
  }
  return x;
}

Tensor Backbone::forward(const Tensor& image, const BlockHook& hook) const {
  Tensor x = run_stage(0, image);
  for (std::size_t i = 1; i <= stages.size(); ++i) x = run_stage(i, x, hook);
  return x;
}

void Backbone::freeze() {
  set_all_trainable(*this, false);
  frozen_ = true;
}

void Backbone::visit(const TensorVisitor& fn) {
  visit_conv("backbone.stem", stem, fn);
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const std::string sp = "backbone.s" + std::to_string(s + 1);
    Stage& st = stages[s];
    for (std::size_t b = 0; b < st.blocks.size(); ++b) {
      const std::string bp = sp + ".b" + std::to_string(b);
      visit_conv(bp + ".conv1", st.blocks[b].conv1, fn);
      visit_conv(bp + ".conv2", st.blocks[b].conv2, fn);
      if (st.blocks[b].has_proj()) visit_conv(bp + ".proj", st.blocks[b].proj, fn);
    }
    for (std::size_t b = 0; b < st.mixers.size(); ++b) {
      const std::string bp = sp + ".b" + std::to_string(b);
      fn(bp + ".token.weight", st.mixers[b].token_weight);
      fn(bp + ".token.bias", st.mixers[b].token_bias);
      visit_conv(bp + ".mlp1", st.mixers[b].mlp1, fn);
      visit_conv(bp + ".mlp2", st.mixers[b].mlp2, fn);
    }
  }
}

Backbone Backbone::clone() const {
  Backbone out = *this;
  out.visit([](const std::string&, Tensor& t) { t = t.clone(t.requires_grad()); });
  return out;
}

std::vector<NamedTensor> Backbone::named_tensors() {
  std::vector<NamedTensor> out;
  visit([&](const std::string& n, Tensor& t) { out.push_back({n, t}); });
  return out;
}

std::size_t Backbone::param_count() {
  std::size_t n = 0;
  visit([&](const std::string&, Tensor& t) { n += t.numel(); });
  return n;
}

Backbone build(const BackboneConfig& config) {
  config.validate();
  Rng rng(mix_seed(config.seed, 0xbb));
  Backbone bb;
  bb.config = config;
  if (config.kind == Kind::cnn) {
    bb.stem = ConvLayer::make(3, config.channels[0], 3, {.stride = config.stem_stride}, rng);
    std::size_t in = config.channels[0];
    for (std::size_t s = 0; s < config.channels.size(); ++s) {
      Stage st;
      st.in_channels = in;
      st.out_channels = config.channels[s];
      st.stride = config.strides[s];
      for (std::size_t b = 0; b < config.depths[s]; ++b)
        st.blocks.push_back(make_block(b == 0 ? in : st.out_channels, st.out_channels, b == 0 ? st.stride : 1, rng));
      in = st.out_channels;
      bb.stages.push_back(std::move(st));
    }
  } else {
    const std::size_t d = config.embed_dim;
    bb.stem = ConvLayer::make(3, d, config.patch, {.stride = config.patch, .padding = 0}, rng);
    const std::size_t side = config.image_size / config.patch;
    const std::size_t per_stage = config.layers / config.stages;
    for (std::size_t s = 0; s < config.stages; ++s) {
      Stage st;
      st.in_channels = st.out_channels = d;
      for (std::size_t b = 0; b < per_stage; ++b) st.mixers.push_back(make_mixer(d, side * side, rng));
      bb.stages.push_back(std::move(st));
    }
  }
  set_all_trainable(bb, true);
  return bb;
}

Backbone build_toy_cnn(const std::vector<std::size_t>& channels, const std::vector<std::size_t>& depths,
                       std::uint64_t seed) {
  BackboneConfig c;
  c.kind = Kind::cnn;
  c.channels = channels;
  c.depths = depths;
  c.strides.assign(channels.size(), 2);
  if (!c.strides.empty()) c.strides[0] = 1;
  c.seed = seed;
  return build(c);
}

Backbone build_toy_vit(std::size_t embed_dim, std::size_t layers, std::size_t patch, std::size_t stages,
                       std::size_t image_size, std::uint64_t seed) {
  BackboneConfig c;
  c.kind = Kind::vit;
  c.embed_dim = embed_dim;
  c.layers = layers;
  c.patch = patch;
  c.stages = stages;
  c.image_size = image_size;
  c.seed = seed;
  return build(c);
}

Tensor grid_to_tokens(const Tensor& grid) {
  const std::size_t n = grid.dim(0), d = grid.dim(1), t = grid.dim(2) * grid.dim(3);
  Tensor out = Tensor::zeros({n, t, d});
  const auto src = grid.data();
  auto dst = out.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t c = 0; c < d; ++c)
      for (std::size_t i = 0; i < t; ++i) dst[(b * t + i) * d + c] = src[(b * d + c) * t + i];
  return out;
}

Tensor tokens_to_grid(const Tensor& tokens, std::size_t h, std::size_t w) {
  const std::size_t n = tokens.dim(0), t = tokens.dim(1), d = tokens.dim(2);
  if (t != h * w) throw ShapeError("token count " + std::to_string(t) + " does not match grid " +
                                   std::to_string(h) + "x" + std::to_string(w));
  Tensor out = Tensor::zeros({n, d, h, w});
  const auto src = tokens.data();
  auto dst = out.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t c = 0; c < d; ++c)
      for (std::size_t i = 0; i < t; ++i) dst[(b * d + c) * t + i] = src[(b * t + i) * d + c];
  return out;
}

namespace {

struct ThrowawayHead {
  ConvLayer conv1, conv2;
  Tensor operator()(const Tensor& f, std::size_t h, std::size_t w) const {
    return ops::bilinear_resize(ops::conv2d(ops::relu(ops::conv2d(f, conv1)), conv2), h, w);
  }
};

double source_miou(const Backbone& bb, const ThrowawayHead& head, const std::vector<data::Sample>& samples,
                   std::size_t count, std::size_t num_classes) {
  NoGradScope no_grad;
  data::ConfusionMatrix cm(num_classes);
  const std::size_t n = std::min(count, samples.size());
  for (std::size_t start = 0; start < n; start += 8) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(n, start + 8); ++i) idx.push_back(i);
    const data::Batch batch = data::make_batch(samples, idx);
    const Tensor logits = head(bb.forward(batch.images), batch.images.dim(2), batch.images.dim(3));
    cm.add(data::argmax_channels(logits), batch.labels);
  }
  return data::miou(cm).mean;
}

}  // namespace

PretrainReport pretrain_source(Backbone& backbone, const data::Dataset& source, const PretrainOptions& opts) {
  if (backbone.frozen()) throw std::logic_error("pretrain_source: backbone is already frozen");
  if (source.train.empty()) throw std::invalid_argument("pretrain_source: empty source dataset");
  const std::size_t k = source.spec.num_classes;
  Rng rng(mix_seed(opts.seed, 0x9e));
  const std::size_t c = backbone.stage_channels(backbone.num_stages());
  ThrowawayHead head{ConvLayer::make(c, 64, 3, {}, rng), ConvLayer::make(64, k, 1, {}, rng)};
  for (double& v : head.conv2.weight.data()) v = 0.01 * rng.normal();
  head.conv1.set_trainable(true);
  head.conv2.set_trainable(true);

  const auto& eval_set = source.val.empty() ? source.train : source.val;
  PretrainReport report;
  report.miou_before = source_miou(backbone, head, eval_set, opts.eval_samples, k);

  std::vector<Tensor> params;
  backbone.visit([&](const std::string&, Tensor& t) {
    t.set_requires_grad(true);
    params.push_back(t);
  });
  for (ConvLayer* l : {&head.conv1, &head.conv2}) {
    params.push_back(l->weight);
    params.push_back(l->bias);
  }
  Sgd sgd(opts.lr, opts.momentum);
  for (std::size_t step = 0; step < opts.steps; ++step) {
    Rng pick(mix_seed(opts.seed, step + 1));
    std::vector<std::size_t> idx(opts.batch);
    for (auto& i : idx) i = pick.below(source.train.size());
    const data::Batch batch = data::make_batch(source.train, idx);
    Tape tape;
    Tensor loss;
    {
      GradScope scope(tape);
      const Tensor logits = head(backbone.forward(batch.images), batch.images.dim(2), batch.images.dim(3));
      loss = ops::cross_entropy_logits(logits, batch.labels);
    }
    if (!std::isfinite(loss.item())) throw std::runtime_error("pretrain_source: non-finite loss at step " +
                                                              std::to_string(step));
    tape.backward(loss);
    sgd.step(params);
    report.losses.push_back(loss.item());
  }
  report.miou_after = source_miou(backbone, head, eval_set, opts.eval_samples, k);

  backbone.freeze();
  std::ostringstream prov;
  prov << "source(seed=" << source.spec.seed << ",texture=" << source.spec.texture << ",n=" << source.train.size()
       << ") steps=" << opts.steps << " lr=" << opts.lr << " batch=" << opts.batch << " seed=" << opts.seed;
  backbone.provenance = prov.str();
  return report;
}

std::string backbone_sha256(Backbone& backbone) { return sha256_hex(encode_checkpoint(backbone.named_tensors())); }

std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint) {
  std::filesystem::path p = checkpoint;
  p.replace_extension(".json");
  return p;
}

void save_backbone(const std::filesystem::path& path, Backbone& backbone) {
  save_checkpoint(path, backbone.named_tensors());
  nlohmann::json side = {{"frozen", backbone.frozen()},
                         {"provenance", backbone.provenance},
                         {"config", backbone.config}};
  std::ofstream out(sidecar_path(path));
  if (!out) throw std::runtime_error("cannot write " + sidecar_path(path).string());
  out << side.dump(2) << '\n';
}

Backbone load_backbone(const std::filesystem::path& path) {
  std::ifstream in(sidecar_path(path));
  if (!in) throw CheckpointError("backbone sidecar missing: " + sidecar_path(path).string());
  const nlohmann::json side = nlohmann::json::parse(in);
  Backbone bb = build(side.at("config").get<BackboneConfig>());
  std::map<std::string, Tensor> stored;
  for (auto& e : load_checkpoint(path)) stored.emplace(e.name, e.tensor);
  std::size_t used = 0;
  bb.visit([&](const std::string& name, Tensor& t) {
    const auto it = stored.find(name);
    if (it == stored.end()) throw CheckpointError("backbone checkpoint lacks " + name);
    if (it->second.shape() != t.shape())
      throw CheckpointError("backbone tensor " + name + " has shape " + shape_str(it->second.shape()) +
                            ", expected " + shape_str(t.shape()));
    std::copy(it->second.data().begin(), it->second.data().end(), t.data().begin());
    ++used;
  });
  if (used != stored.size()) throw CheckpointError("backbone checkpoint has unexpected extra entries");
  bb.provenance = side.value("provenance", std::string());
  if (side.value("frozen", false)) bb.freeze();
  return bb;
}

}  // namespace pmss::backbone
