#include "pmss/spm/spm.hpp"

#include <stdexcept>

#include "pmss/numerics/ops.hpp"

namespace pmss::spm {

ClassPrior class_prior(std::span<const LabelMap> labels, std::size_t num_classes, std::int32_t ignore_index) {
  if (num_classes < 2) throw std::invalid_argument("class prior needs K >= 2");
  std::vector<std::uint64_t> counts(num_classes, 0);
  std::uint64_t total = 0;
  for (const LabelMap& m : labels) {
    m.validate(num_classes, ignore_index);
    for (auto v : m.labels) {
      if (v == ignore_index) continue;
      ++counts[static_cast<std::size_t>(v)];
      ++total;
    }
  }
  if (total == 0) throw std::invalid_argument("class prior needs at least one labeled pixel");
  ClassPrior prior;
  for (auto c : counts) prior.probs.push_back(static_cast<double>(c) / static_cast<double>(total));
  return prior;
}

Tensor init_m0(const ClassPrior& prior, std::size_t n, std::size_t h, std::size_t w) {
  const std::size_t k = prior.probs.size();
  Tensor m = Tensor::zeros({n, k, h, w});
  auto d = m.data();
  const std::size_t plane = h * w;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t c = 0; c < k; ++c)
      std::fill_n(d.begin() + static_cast<std::ptrdiff_t>((b * k + c) * plane), plane, prior.probs[c]);
  return m;
}

Tensor init_v0(const ClassPrior& prior, std::size_t n) { return init_m0(prior, n, 1, 1); }

std::size_t SpmConfig::resolved_pdc_groups() const {
  if (pdc_groups != 0) return pdc_groups;
  const std::size_t quarter = channels / 4;
  return quarter >= 16 ? 16 : quarter;
}

void SpmConfig::validate() const {
  if (feature_channels == 0) throw std::invalid_argument("spm feature_channels must be positive");
  if (num_classes < 2) throw std::invalid_argument("spm num_classes must be >= 2");
  if (channels == 0 || channels % 4 != 0)
    throw std::invalid_argument("spm channels C=" + std::to_string(channels) + " must be a positive multiple of 4");
  const std::size_t g = resolved_pdc_groups();
  if (g == 0 || (channels / 4) % g != 0)
    throw std::invalid_argument("spm C/4=" + std::to_string(channels / 4) + " not divisible by pdc_groups=" +
                                std::to_string(g));
  for (auto d : dilations)
    if (d == 0) throw std::invalid_argument("spm dilations must be positive");
  const std::size_t in = feature_channels + num_classes;
  if (in_groups == 0 || in % in_groups != 0 || channels % in_groups != 0)
    throw std::invalid_argument("spm in_groups=" + std::to_string(in_groups) + " must divide C_f+K=" +
                                std::to_string(in) + " and C=" + std::to_string(channels));
}

void to_json(nlohmann::json& j, const SpmConfig& c) {
  j = {{"feature_channels", c.feature_channels},
       {"num_classes", c.num_classes},
       {"channels", c.channels},
       {"pdc_groups", c.resolved_pdc_groups()},
       {"dilations", c.dilations},
       {"pdc_relu", c.pdc_relu},
       {"in_groups", c.in_groups}};
}

PdcParams PdcParams::make(std::size_t channels, std::size_t groups, const std::array<std::size_t, 4>& dilations,
                          bool relu, Rng& rng) {
  PdcParams p;
  const std::size_t q = channels / 4;
  for (std::size_t j = 0; j < 4; ++j)
    p.branches[j] = ConvLayer::make(q, q, 3, {.dilation = dilations[j], .groups = groups}, rng);
  p.fuse = ConvLayer::make(channels, channels, 1, {}, rng);
  p.relu = relu;
  return p;
}

void PdcParams::visit(const std::string& prefix, const TensorVisitor& fn) {
  for (std::size_t j = 0; j < 4; ++j) visit_conv(prefix + ".d" + std::to_string(j + 1), branches[j], fn);
  visit_conv(prefix + ".fuse", fuse, fn);
}

std::size_t PdcParams::param_count() const {
  std::size_t n = fuse.param_count();
  for (const auto& b : branches) n += b.param_count();
  return n;
}

SpmParams SpmParams::make(const SpmConfig& config, Rng& rng) {
  config.validate();
  SpmParams p;
  p.config = config;
  const std::size_t in = config.feature_channels + config.num_classes;
  const std::size_t c = config.channels;
  const std::size_t g = config.resolved_pdc_groups();
  p.b1_in = ConvLayer::make(in, c, 1, {.groups = config.in_groups}, rng);
  p.b1_pdc = PdcParams::make(c, g, config.dilations, config.pdc_relu, rng);
  p.b1_out = ConvLayer::make(c, config.num_classes, 1, {}, rng);
  p.b2_in = ConvLayer::make(in, c, 1, {.groups = config.in_groups}, rng);
  p.b2_pdc = PdcParams::make(c, g, config.dilations, config.pdc_relu, rng);
  p.b2_out = ConvLayer::make_zero(c, config.feature_channels, 1, {});
  // Small class logits keep the first refined maps close to uniform.
  for (double& v : p.b1_out.weight.data()) v = 0.01 * rng.normal();
  for (Tensor& t : p.tensors()) t.set_requires_grad(true);
  return p;
}

void SpmParams::visit(const std::string& prefix, const TensorVisitor& fn) {
  visit_conv(prefix + ".b1_in", b1_in, fn);
  b1_pdc.visit(prefix + ".b1_pdc", fn);
  visit_conv(prefix + ".b1_out", b1_out, fn);
  visit_conv(prefix + ".b2_in", b2_in, fn);
  b2_pdc.visit(prefix + ".b2_pdc", fn);
  visit_conv(prefix + ".b2_out", b2_out, fn);
}

std::vector<Tensor> SpmParams::tensors() {
  std::vector<Tensor> out;
  visit("", [&](const std::string&, Tensor& t) { out.push_back(t); });
  return out;
}

std::size_t SpmParams::param_count() const {
  return b1_in.param_count() + b1_pdc.param_count() + b1_out.param_count() + b2_in.param_count() +
         b2_pdc.param_count() + b2_out.param_count();
}

Tensor pdc(const Tensor& x, const PdcParams& params) {
  const std::size_t c = x.dim(1);
  if (c != params.fuse.in_channels)
    throw ShapeError("pdc expects " + std::to_string(params.fuse.in_channels) + " channels, got " +
                     std::to_string(c));
  const std::size_t q = c / 4;
  std::vector<Tensor> parts;
  parts.reserve(4);
  for (std::size_t j = 0; j < 4; ++j) {
    Tensor y = ops::conv2d(ops::slice_channels(x, j * q, (j + 1) * q), params.branches[j]);
    parts.push_back(params.relu ? ops::relu(y) : y);
  }
  return ops::conv2d(ops::concat_channels(parts), params.fuse);
}

namespace {

void check_aligned(const Tensor& feature, const Tensor& map, const SpmParams& params, const char* what) {
  if (feature.rank() != 4 || map.rank() != 4)
    throw ShapeError(std::string(what) + ": feature and map must be N x C x H x W");
  if (feature.dim(1) != params.config.feature_channels)
    throw ShapeError(std::string(what) + ": feature has " + std::to_string(feature.dim(1)) + " channels, SPM expects " +
                     std::to_string(params.config.feature_channels));
  if (map.dim(1) != params.config.num_classes)
    throw ShapeError(std::string(what) + ": map has " + std::to_string(map.dim(1)) + " classes, SPM expects " +
                     std::to_string(params.config.num_classes));
  if (feature.dim(0) != map.dim(0) || feature.dim(2) != map.dim(2) || feature.dim(3) != map.dim(3))
    throw ShapeError(std::string(what) + ": feature " + shape_str(feature.shape()) + " and map " +
                     shape_str(map.shape()) + " are not aligned");
}

Tensor prompt_weight(const Tensor& guided, const SpmParams& params) {
  return ops::conv2d(pdc(ops::conv2d(guided, params.b2_in), params.b2_pdc), params.b2_out);
}

Prompt apply_prompt(const Tensor& feature, const Tensor& weight) {
  Prompt p;
  p.weight = weight;
  p.prompt = ops::mul(feature, weight);
  p.feature = ops::add(feature, p.prompt);
  return p;
}

}  // namespace

Tensor refine_map(const Tensor& feature, const Tensor& map, const SpmParams& params) {
  check_aligned(feature, map, params, "refine_map");
  const Tensor h = ops::conv2d(ops::concat_channels(feature, map), params.b1_in);
  return ops::softmax_channels(ops::conv2d(pdc(h, params.b1_pdc), params.b1_out));
}

Prompt generate_prompt(const Tensor& feature, const Tensor& map, const SpmParams& params) {
  check_aligned(feature, map, params, "generate_prompt");
  return apply_prompt(feature, prompt_weight(ops::concat_channels(feature, map), params));
}

SpmOutput spm_forward(const Tensor& feature, const Tensor& map, const SpmParams& params, std::size_t iterations) {
  if (iterations < 1) throw std::invalid_argument("spm_forward needs R >= 1");
  SpmOutput out;
  out.feature = feature;
  out.map = (map.dim(2) == feature.dim(2) && map.dim(3) == feature.dim(3))
                ? map
                : ops::bilinear_resize(map, feature.dim(2), feature.dim(3));
  for (std::size_t r = 0; r < iterations; ++r) {
    out.map = refine_map(out.feature, out.map, params);
    out.interim.push_back(out.map);
    out.feature = generate_prompt(out.feature, out.map, params).feature;
  }
  return out;
}

Tensor refine_vector(const Tensor& feature, const Tensor& vector, const SpmParams& params) {
  if (vector.rank() != 4 || vector.dim(2) != 1 || vector.dim(3) != 1)
    throw ShapeError("class vector must be N x K x 1 x 1, got " + shape_str(vector.shape()));
  const Tensor expanded = ops::expand_spatial(vector, feature.dim(2), feature.dim(3));
  check_aligned(feature, expanded, params, "refine_vector");
  const Tensor h = ops::conv2d(ops::concat_channels(expanded, feature), params.b1_in);
  const Tensor pooled = ops::global_max_pool(pdc(h, params.b1_pdc));
  return ops::softmax_channels(ops::conv2d(pooled, params.b1_out));
}

RecognitionOutput spm_forward_recognition(const Tensor& feature, const Tensor& vector, const SpmParams& params,
                                          std::size_t iterations) {
  if (iterations < 1) throw std::invalid_argument("spm_forward_recognition needs R >= 1");
  RecognitionOutput out;
  out.feature = feature;
  out.vector = vector;
  for (std::size_t r = 0; r < iterations; ++r) {
    out.vector = refine_vector(out.feature, out.vector, params);
    out.interim.push_back(out.vector);
    const Tensor expanded = ops::expand_spatial(out.vector, feature.dim(2), feature.dim(3));
    out.feature = generate_prompt(out.feature, expanded, params).feature;
  }
  return out;
}

}  // namespace pmss::spm
