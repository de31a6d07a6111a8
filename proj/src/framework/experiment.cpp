#include "pmss/framework/experiment.hpp"

#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "pmss/numerics/checkpoint.hpp"

namespace pmss::framework {

backbone::Backbone prepare_backbone(const RunConfig& config, const std::optional<std::filesystem::path>& cache_dir,
                                    std::optional<backbone::PretrainReport>* report) {
  if (config.backbone_checkpoint) return backbone::load_backbone(*config.backbone_checkpoint);
  std::filesystem::path cached;
  if (cache_dir && config.pretrain.steps > 0) {
    cached = *cache_dir / ("backbone-" + sha256_hex(backbone_key(config)).substr(0, 16) + ".bin");
    if (std::filesystem::exists(cached)) return backbone::load_backbone(cached);
  }
  backbone::Backbone bb = backbone::build(config.backbone);
  if (config.pretrain.steps == 0) {
    bb.freeze();
    bb.provenance = "random initialization (seed " + std::to_string(config.backbone.seed) + ", no pretraining)";
    return bb;
  }
  const data::Dataset source = data::generate(config.pretrain.source);
  backbone::PretrainReport r = backbone::pretrain_source(
      bb, source,
      {.steps = config.pretrain.steps, .lr = config.pretrain.lr, .batch = config.pretrain.batch,
       .seed = config.pretrain.seed});
  if (report) *report = r;
  if (!cached.empty()) {
    std::filesystem::create_directories(*cache_dir);
    // Write then rename so concurrent runs never read a partial file.
    const std::filesystem::path tmp = cached.string() + ".tmp" + std::to_string(config.pretrain.seed);
    backbone::save_backbone(tmp, bb);
    std::filesystem::rename(tmp, cached);
    std::filesystem::rename(backbone::sidecar_path(tmp), backbone::sidecar_path(cached));
  }
  return bb;
}

spm::ClassPrior training_prior(const data::Dataset& ds) {
  std::vector<LabelMap> labels;
  labels.reserve(ds.train.size());
  for (const auto& s : ds.train) labels.push_back(s.label);
  return spm::class_prior(labels, ds.spec.num_classes);
}

Pipeline make_pipeline(const RunConfig& config, const backbone::Backbone& backbone, const spm::ClassPrior& prior) {
  Pipeline p = Pipeline::build(config.pipeline, backbone.clone(), prior, config.train.seed);
  apply_strategy(p, config.strategy);
  return p;
}

RunOutcome run_training(const RunConfig& config, const backbone::Backbone& backbone, const data::Dataset& ds,
                        const RecordSink& sink) {
  RunOutcome out{make_pipeline(config, backbone, training_prior(ds)), {}, {}, {}, {}};
  out.counts = count_params(out.pipeline.registry());
  out.backbone_sha_before = backbone::backbone_sha256(out.pipeline.backbone);
  out.report = train(out.pipeline, ds, config.train, config.loss, sink);
  out.backbone_sha_after = backbone::backbone_sha256(out.pipeline.backbone);
  return out;
}

std::vector<std::pair<Strategy, ParamCounts>> count_table(const RunConfig& config,
                                                          const backbone::Backbone& backbone) {
  std::vector<std::pair<Strategy, ParamCounts>> rows;
  const std::vector<double> uniform(config.pipeline.num_classes, 1.0 / static_cast<double>(config.pipeline.num_classes));
  for (Strategy s : all_strategies()) {
    RunConfig c = config;
    c.strategy = s;
    Pipeline p = make_pipeline(c, backbone, {uniform});
    rows.emplace_back(s, count_params(p.registry()));
  }
  return rows;
}

std::string to_string(AblationAxis a) {
  switch (a) {
    case AblationAxis::stages: return "stages";
    case AblationAxis::recurrent: return "recurrent";
    case AblationAxis::spl: return "spl";
    case AblationAxis::lscm: return "lscm";
  }
  return "stages";
}

AblationAxis ablation_axis_from(const std::string& tag) {
  for (auto a : {AblationAxis::stages, AblationAxis::recurrent, AblationAxis::spl, AblationAxis::lscm})
    if (to_string(a) == tag) return a;
  throw std::invalid_argument("unknown ablation axis '" + tag + "' (expected stages, recurrent, spl or lscm)");
}

std::vector<std::pair<std::string, RunConfig>> ablation_cells(const RunConfig& base, AblationAxis axis) {
  RunConfig b = base;
  b.strategy = Strategy::prompt_matched;
  std::vector<std::pair<std::string, RunConfig>> cells;
  switch (axis) {
    case AblationAxis::stages: {
      const std::size_t points = b.backbone.num_stages() + 1;
      for (std::size_t last = 1; last <= points; ++last) {
        RunConfig c = b;
        c.pipeline.spm_stages.clear();
        for (std::size_t i = 1; i <= last; ++i) c.pipeline.spm_stages.push_back(i);
        cells.emplace_back(last == 1 ? "1" : "1-" + std::to_string(last), c);
      }
      break;
    }
    case AblationAxis::recurrent:
      for (std::size_t r = 1; r <= 3; ++r) {
        RunConfig c = b;
        c.pipeline.iterations = r;
        c.loss.iterations = r;
        cells.emplace_back("R=" + std::to_string(r), c);
      }
      break;
    case AblationAxis::spl: {
      cells.emplace_back("with SPL", b);
      RunConfig c = b;
      std::fill(c.loss.weights.begin(), c.loss.weights.end(), 0.0);
      cells.emplace_back("w/o SPL", c);
      break;
    }
    case AblationAxis::lscm: {
      cells.emplace_back("with LSCM", b);
      RunConfig c = b;
      c.pipeline.dilations = {1, 1, 1, 1};
      cells.emplace_back("w/o LSCM", c);
      break;
    }
  }
  return cells;
}

AblationTable run_ablation(const RunConfig& base, AblationAxis axis, const backbone::Backbone& backbone,
                           const data::Dataset& ds, std::size_t seeds, const CellProgress& progress) {
  AblationTable table;
  table.axis = axis;
  const spm::ClassPrior prior = training_prior(ds);
  for (const auto& [label, cell] : ablation_cells(base, axis)) {
    AblationRow row;
    row.label = label;
    for (std::size_t i = 0; i < seeds; ++i) {
      RunConfig c = cell;
      c.train.seed = base.train.seed + i;
      Pipeline p = make_pipeline(c, backbone, prior);
      if (i == 0) row.prompt_params = count_params(p.registry()).prompt;
      const TrainReport r = train(p, ds, c.train, c.loss);
      row.miou.push_back(r.final_eval.iou.mean);
      if (progress) progress(label, c.train.seed, r.final_eval.iou.mean);
    }
    std::vector<double> pct;
    for (double m : row.miou) pct.push_back(100.0 * m);
    row.stats = data::mean_std(pct);
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::string format_table(const AblationTable& t) {
  std::ostringstream os;
  const char* first = t.axis == AblationAxis::stages      ? "Stages"
                      : t.axis == AblationAxis::recurrent ? "Iterations"
                                                          : "Setting";
  char line[160];
  std::snprintf(line, sizeof line, "%-12s %12s %16s\n", first, "#Prompt", "mIoU");
  os << line;
  for (const auto& r : t.rows) {
    std::snprintf(line, sizeof line, "%-12s %12zu %16s\n", r.label.c_str(), r.prompt_params,
                  data::format_mean_std(r.stats).c_str());
    os << line;
  }
  return os.str();
}

void to_json(nlohmann::json& j, const AblationTable& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : t.rows)
    rows.push_back({{"label", r.label},
                    {"prompt_params", r.prompt_params},
                    {"miou", r.miou},
                    {"miou_mean", r.stats.mean},
                    {"miou_std", r.stats.std},
                    {"formatted", data::format_mean_std(r.stats)}});
  j = {{"axis", to_string(t.axis)}, {"rows", rows}};
}

OneShotResult run_one_shot(const RunConfig& config, const backbone::Backbone& backbone, const data::Dataset& ds,
                           std::size_t repetitions) {
  if (config.train.dice_class < 0) throw std::invalid_argument("one-shot protocol needs train.dice_class >= 0");
  std::vector<data::Sample> pool = ds.train;
  pool.insert(pool.end(), ds.val.begin(), ds.val.end());
  OneShotResult result;
  std::vector<double> pct;
  for (std::size_t rep = 0; rep < repetitions; ++rep) {
    const data::OneShotSplit split = data::one_shot_split(pool.size(), config.train.seed, rep);
    data::Dataset one;
    one.spec = ds.spec;
    one.train = {pool[split.train]};
    for (std::size_t i : split.test) one.val.push_back(pool[i]);
    RunConfig c = config;
    c.train.seed = config.train.seed + rep;
    Pipeline p = make_pipeline(c, backbone, training_prior(one));
    const TrainReport r = train(p, one, c.train, c.loss);
    const double d = r.final_eval.dice.value_or(0.0);
    result.runs.push_back({split.train, d});
    pct.push_back(100.0 * d);
  }
  result.stats = data::mean_std(pct);
  return result;
}

void to_json(nlohmann::json& j, const OneShotResult& r) {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& x : r.runs) runs.push_back({{"train_index", x.train_index}, {"dice", x.dice}});
  j = {{"runs", runs}, {"dice_mean", r.stats.mean}, {"dice_std", r.stats.std}, {"formatted", r.formatted()}};
}

}  // namespace pmss::framework
