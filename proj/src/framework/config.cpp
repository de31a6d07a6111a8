#include "pmss/framework/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace pmss::framework {

ConfigError::ConfigError(std::string field, const std::string& message)
    : std::invalid_argument(field + ": " + message), field_(std::move(field)) {}

namespace {

using nlohmann::json;

void only_keys(const json& j, const std::string& path, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ConfigError(path.empty() ? "<root>" : path, "expected an object");
  const std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ConfigError(path.empty() ? k : path + "." + k, "unknown field");
}

template <typename T>
void read(const json& j, const std::string& path, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(path + "." + key, std::string("wrong type (") + e.what() + ")");
  }
}

void require(bool ok, const std::string& field, const std::string& message) {
  if (!ok) throw ConfigError(field, message);
}

data::SynthSpec read_synth(const json& j, const std::string& path, data::SynthSpec base) {
  only_keys(j, path,
            {"seed", "size", "num_classes", "min_shapes", "max_shapes", "classes", "texture", "color_jitter", "noise",
             "n_train", "n_val", "preset"});
  if (j.contains("preset")) {
    const std::string preset = j.at("preset").get<std::string>();
    if (preset == "downstream")
      base = data::SynthSpec::downstream();
    else if (preset == "source")
      base = data::SynthSpec::source();
    else if (preset == "thin_structure")
      base = data::SynthSpec::thin_structure();
    else
      throw ConfigError(path + ".preset", "unknown preset \"" + preset + "\"");
  }
  data::SynthSpec s = base;
  try {
    from_json(j, s);
  } catch (const std::exception& e) {
    throw ConfigError(path, e.what());
  }
  require(s.num_classes >= 2, path + ".num_classes", "must be >= 2");
  require(s.size >= 16, path + ".size", "must be >= 16");
  require(s.min_shapes <= s.max_shapes, path + ".min_shapes", "exceeds max_shapes");
  require(s.n_train >= 1, path + ".n_train", "must be >= 1");
  require(s.texture == 0 || s.texture == 1, path + ".texture", "must be 0 or 1");
  try {
    s.validate();
  } catch (const std::exception& e) {
    throw ConfigError(path, e.what());
  }
  return s;
}

}  // namespace

RunConfig parse_run_config(const json& j) {
  RunConfig c;
  only_keys(j, "", {"description", "backbone", "spm", "strategy", "head", "side", "loss", "train", "data"});

  if (j.contains("data")) c.data = read_synth(j.at("data"), "data", c.data);
  c.pipeline.num_classes = c.data.num_classes;

  if (j.contains("backbone")) {
    const json& b = j.at("backbone");
    only_keys(b, "backbone",
              {"kind", "seed", "channels", "depths", "strides", "stem_stride", "embed_dim", "layers", "patch", "stages",
               "image_size", "pretrain", "checkpoint"});
    try {
      from_json(b, c.backbone);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError("backbone", e.what());
    }
    if (!b.contains("image_size")) c.backbone.image_size = c.data.size;
    if (b.contains("checkpoint")) c.backbone_checkpoint = b.at("checkpoint").get<std::string>();
    if (b.contains("pretrain")) {
      const json& p = b.at("pretrain");
      only_keys(p, "backbone.pretrain", {"steps", "lr", "batch", "seed", "source"});
      read(p, "backbone.pretrain", "steps", c.pretrain.steps);
      read(p, "backbone.pretrain", "lr", c.pretrain.lr);
      read(p, "backbone.pretrain", "batch", c.pretrain.batch);
      read(p, "backbone.pretrain", "seed", c.pretrain.seed);
      if (p.contains("source")) c.pretrain.source = read_synth(p.at("source"), "backbone.pretrain.source", c.pretrain.source);
      require(c.pretrain.lr > 0, "backbone.pretrain.lr", "must be positive");
      require(c.pretrain.batch >= 1, "backbone.pretrain.batch", "must be >= 1");
    }
  } else {
    c.backbone.image_size = c.data.size;
  }
  try {
    c.backbone.validate();
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    const auto space = msg.find(' ');
    const std::string first = msg.substr(0, space);
    throw ConfigError(first.rfind("backbone.", 0) == 0 ? first : "backbone", msg);
  }
  if (c.pretrain.steps > 0)
    require(c.pretrain.source.num_classes >= 2, "backbone.pretrain.source.num_classes", "must be >= 2");

  if (j.contains("strategy")) {
    try {
      c.strategy = strategy_from(j.at("strategy").get<std::string>());
    } catch (const std::exception& e) {
      throw ConfigError("strategy", e.what());
    }
  }

  const std::size_t n = c.backbone.num_stages();
  c.pipeline.spm_stages.clear();
  for (std::size_t i = 1; i <= n; ++i) c.pipeline.spm_stages.push_back(i);
  if (j.contains("spm")) {
    const json& s = j.at("spm");
    only_keys(s, "spm", {"stages", "C", "R", "pdc_groups", "dilations", "pdc_relu", "in_groups"});
    read(s, "spm", "stages", c.pipeline.spm_stages);
    long long r = static_cast<long long>(c.pipeline.iterations);
    read(s, "spm", "R", r);
    require(r >= 1, "spm.R", "recurrent iterations must be >= 1, got " + std::to_string(r));
    c.pipeline.iterations = static_cast<std::size_t>(r);
    read(s, "spm", "C", c.pipeline.spm_channels);
    read(s, "spm", "pdc_groups", c.pipeline.pdc_groups);
    read(s, "spm", "dilations", c.pipeline.dilations);
    read(s, "spm", "pdc_relu", c.pipeline.pdc_relu);
    read(s, "spm", "in_groups", c.pipeline.in_groups);
  }
  {
    std::set<std::size_t> seen;
    for (auto p : c.pipeline.spm_stages) {
      require(p >= 1 && p <= n + 1, "spm.stages",
              "insertion point " + std::to_string(p) + " outside 1.." + std::to_string(n + 1));
      require(seen.insert(p).second, "spm.stages", "insertion point " + std::to_string(p) + " listed twice");
    }
    const std::size_t cc = c.pipeline.spm_channels;
    require(cc >= 4 && cc % 4 == 0, "spm.C", "must be a positive multiple of 4, got " + std::to_string(cc));
    spm::SpmConfig probe;
    probe.channels = cc;
    probe.pdc_groups = c.pipeline.pdc_groups;
    const std::size_t g = probe.resolved_pdc_groups();
    require(g >= 1 && (cc / 4) % g == 0, "spm.pdc_groups",
            "must divide C/4=" + std::to_string(cc / 4) + ", got " + std::to_string(g));
    for (auto d : c.pipeline.dilations) require(d >= 1, "spm.dilations", "entries must be >= 1");
    require(c.pipeline.in_groups >= 1, "spm.in_groups", "must be >= 1");
  }

  if (j.contains("head")) {
    only_keys(j.at("head"), "head", {"channels"});
    read(j.at("head"), "head", "channels", c.pipeline.head_channels);
    require(c.pipeline.head_channels >= 1, "head.channels", "must be >= 1");
  }
  if (j.contains("side")) {
    only_keys(j.at("side"), "side", {"channels", "groups"});
    read(j.at("side"), "side", "channels", c.pipeline.module_channels);
    read(j.at("side"), "side", "groups", c.pipeline.module_groups);
    require(c.pipeline.module_groups >= 1 && c.pipeline.module_channels % c.pipeline.module_groups == 0,
            "side.groups", "must divide side.channels");
  }

  c.loss.iterations = c.pipeline.iterations;
  if (j.contains("loss")) {
    const json& l = j.at("loss");
    only_keys(l, "loss", {"weights", "ignore_index", "spl"});
    read(l, "loss", "weights", c.loss.weights);
    read(l, "loss", "ignore_index", c.loss.ignore_index);
    bool spl = true;
    read(l, "loss", "spl", spl);
    if (!spl) std::fill(c.loss.weights.begin(), c.loss.weights.end(), 0.0);
  }
  for (double w : c.loss.weights) require(w >= 0.0, "loss.weights", "weights must be nonnegative");
  if (c.strategy == Strategy::prompt_matched)
    for (auto p : c.pipeline.spm_stages)
      require(p <= c.loss.weights.size(), "loss.weights",
              "no weight for SPM insertion point " + std::to_string(p));

  if (j.contains("train")) {
    const json& t = j.at("train");
    only_keys(t, "train",
              {"steps", "lr", "momentum", "weight_decay", "batch", "seed", "eval_every", "eval_samples",
               "prompt_lr_mult", "dice_class", "grad_clip"});
    read(t, "train", "steps", c.train.steps);
    read(t, "train", "lr", c.train.lr);
    read(t, "train", "momentum", c.train.momentum);
    read(t, "train", "weight_decay", c.train.weight_decay);
    read(t, "train", "batch", c.train.batch);
    read(t, "train", "seed", c.train.seed);
    read(t, "train", "eval_every", c.train.eval_every);
    read(t, "train", "eval_samples", c.train.eval_samples);
    read(t, "train", "prompt_lr_mult", c.train.prompt_lr_mult);
    read(t, "train", "dice_class", c.train.dice_class);
    read(t, "train", "grad_clip", c.train.grad_clip);
  }
  require(c.train.grad_clip >= 0.0, "train.grad_clip", "must be nonnegative (0 disables clipping)");
  require(c.train.lr > 0.0, "train.lr", "must be positive");
  require(c.train.momentum >= 0.0 && c.train.momentum < 1.0, "train.momentum", "must lie in [0, 1)");
  require(c.train.weight_decay >= 0.0, "train.weight_decay", "must be nonnegative");
  require(c.train.batch >= 1, "train.batch", "must be >= 1");
  require(c.train.prompt_lr_mult > 0.0, "train.prompt_lr_mult", "must be positive");
  require(c.train.dice_class < static_cast<std::int32_t>(c.data.num_classes), "train.dice_class",
          "must be below data.num_classes");
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<file>", "cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("<file>", std::string("malformed JSON: ") + e.what());
  }
  return parse_run_config(j);
}

nlohmann::json to_json(const RunConfig& c) {
  json backbone = c.backbone;
  backbone["pretrain"] = {{"steps", c.pretrain.steps},
                          {"lr", c.pretrain.lr},
                          {"batch", c.pretrain.batch},
                          {"seed", c.pretrain.seed},
                          {"source", c.pretrain.source}};
  if (c.backbone_checkpoint) backbone["checkpoint"] = c.backbone_checkpoint->string();
  return {{"backbone", backbone},
          {"spm",
           {{"stages", c.pipeline.spm_stages},
            {"C", c.pipeline.spm_channels},
            {"R", c.pipeline.iterations},
            {"pdc_groups", c.pipeline.pdc_groups},
            {"dilations", c.pipeline.dilations},
            {"pdc_relu", c.pipeline.pdc_relu},
            {"in_groups", c.pipeline.in_groups}}},
          {"strategy", to_string(c.strategy)},
          {"head", {{"channels", c.pipeline.head_channels}}},
          {"side", {{"channels", c.pipeline.module_channels}, {"groups", c.pipeline.module_groups}}},
          {"loss", {{"weights", c.loss.weights}, {"ignore_index", c.loss.ignore_index}}},
          {"train",
           {{"steps", c.train.steps},
            {"lr", c.train.lr},
            {"momentum", c.train.momentum},
            {"weight_decay", c.train.weight_decay},
            {"batch", c.train.batch},
            {"seed", c.train.seed},
            {"eval_every", c.train.eval_every},
            {"eval_samples", c.train.eval_samples},
            {"prompt_lr_mult", c.train.prompt_lr_mult},
            {"dice_class", c.train.dice_class},
            {"grad_clip", c.train.grad_clip}}},
          {"data", c.data}};
}

std::string backbone_key(const RunConfig& c) {
  json j = to_json(c).at("backbone");
  return j.dump();
}

}  // namespace pmss::framework
