#include "pmss/cli/commands.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "pmss/cli/run_dir.hpp"
#include "pmss/data/dataset_io.hpp"
#include "pmss/framework/experiment.hpp"
#include "pmss/framework/gradcheck_suite.hpp"
#include "pmss/numerics/checkpoint.hpp"

namespace pmss::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pmss::framework;

namespace {

struct Options {
  std::string config;
  std::string out;
  std::string data;
  std::string checkpoint;
  std::string cache;
  std::string axis;
  std::string scope = "layers";
  std::string split = "val";
  std::string corrupt;
  std::optional<std::uint64_t> seed;
  std::size_t seeds = 0;
  std::size_t reps = 5;
  bool json = false;
  bool source = false;
};

/// Failure that maps to a specific exit code and error JSON.
struct CommandError {
  int code;
  json body;
};

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::optional<fs::path> cache_dir(const Options& o) {
  if (!o.cache.empty()) return fs::path(o.cache);
  if (const char* env = std::getenv("PMSS_CACHE"); env && *env) return fs::path(env);
  return std::nullopt;
}

RunConfig load_config(const Options& o) {
  if (o.config.empty()) throw ConfigError("--config", "a run config is required");
  RunConfig c = load_run_config(o.config);
  if (o.seed) c.train.seed = *o.seed;
  return c;
}

data::Dataset load_data(const Options& o, const RunConfig& c) {
  if (o.data.empty()) return data::generate(c.data);
  data::Dataset ds = data::read_dataset(o.data);
  if (ds.spec.num_classes != c.data.num_classes)
    throw ConfigError("data.num_classes", "dataset at " + o.data + " has K=" + std::to_string(ds.spec.num_classes) +
                                              ", config expects " + std::to_string(c.data.num_classes));
  return ds;
}

json metrics_json(const EvalResult& e) {
  json j = {{"miou", e.iou.mean}, {"per_class_iou", json::array()}, {"present_classes", e.iou.present}};
  for (double v : e.iou.per_class) j["per_class_iou"].push_back(std::isnan(v) ? json(nullptr) : json(v));
  if (e.dice) j["dice"] = *e.dice;
  return j;
}

void emit(std::ostream& out, const Options& o, const json& j, const std::string& table) {
  if (!o.out.empty()) write_json(o.out, j);
  if (o.json)
    out << j.dump(2) << '\n';
  else
    out << table;
}

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

// ---------------------------------------------------------------------------

int cmd_train(const Options& o, std::ostream& out) {
  RunConfig cfg = load_config(o);
  if (o.out.empty()) throw ConfigError("--out", "an output directory is required");
  const fs::path dir = o.out;
  fs::create_directories(dir);
  const std::string started = utc_now();
  const data::Dataset ds = load_data(o, cfg);
  std::optional<backbone::PretrainReport> pre;
  const backbone::Backbone bb = prepare_backbone(cfg, cache_dir(o), &pre);
  if (pre)
    out << "pretrained backbone: source mIoU " << fixed(pre->miou_before, 3) << " -> " << fixed(pre->miou_after, 3)
        << "\n";

  std::ofstream report(dir / "report.ndjson");
  if (!report) throw std::runtime_error("cannot write " + (dir / "report.ndjson").string());
  RunOutcome run = run_training(cfg, bb, ds, [&](const TrainRecord& r) {
    report << json(r).dump() << '\n';
    report.flush();
    if (r.miou) out << "step " << r.step + 1 << "  loss " << fixed(r.loss, 4) << "  mIoU " << fixed(*r.miou, 4) << "\n";
  });
  report.close();

  save_model(dir / "model.bin", run.pipeline, cfg);
  const json metrics = metrics_json(run.report.final_eval);
  write_json(dir / "metrics.json", metrics);

  const json resolved = to_json(cfg);
  const std::string data_sha = sha256_hex(data::serialize(ds));
  const json manifest = {
      {"config_path", fs::absolute(o.config).string()},
      {"config", resolved},
      {"seed", cfg.train.seed},
      {"started_at", started},
      {"finished_at", utc_now()},
      {"input_hash", input_hash(resolved, data_sha, run.backbone_sha_before)},
      {"dataset_sha256", data_sha},
      {"backbone", {{"provenance", run.pipeline.backbone.provenance}, {"sha256", run.backbone_sha_before}}},
      {"output_dir", fs::absolute(dir).string()},
      {"checkpoint", "model.bin"},
      {"checkpoint_sha256", sha256_file(dir / "model.bin")},
      {"report", "report.ndjson"},
      {"trainable", {{"backbone", run.counts.backbone}, {"prompt", run.counts.prompt}, {"head", run.counts.head}}},
      {"metrics", metrics},
      {"status", "complete"}};
  write_json(dir / "manifest.json", manifest);

  out << "strategy " << to_string(cfg.strategy) << ", " << cfg.train.steps << " steps\n"
      << "final mIoU " << fixed(run.report.final_eval.iou.mean, 4);
  if (run.report.final_eval.dice) out << ", Dice " << fixed(*run.report.final_eval.dice, 4);
  out << "\ncheckpoint " << (dir / "model.bin").string() << "\n";
  return kOk;
}

int cmd_eval(const Options& o, std::ostream& out) {
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint", "a model checkpoint is required");
  LoadedModel m = load_model(o.checkpoint);
  const data::Dataset ds = load_data(o, m.config);
  std::vector<data::Sample> samples;
  if (o.split == "train" || o.split == "all") samples.insert(samples.end(), ds.train.begin(), ds.train.end());
  if (o.split == "val" || o.split == "all") samples.insert(samples.end(), ds.val.begin(), ds.val.end());
  if (samples.empty()) throw ConfigError("--split", "split \"" + o.split + "\" has no samples");
  const EvalResult e = evaluate(m.pipeline, samples, 0, m.config.train.dice_class);
  json j = metrics_json(e);
  j["split"] = o.split;
  j["samples"] = samples.size();
  std::ostringstream table;
  table << "split " << o.split << " (" << samples.size() << " samples)\nmIoU " << fixed(e.iou.mean, 4) << "\n";
  for (std::size_t c = 0; c < e.iou.per_class.size(); ++c)
    table << "  class " << c << "  IoU " << (std::isnan(e.iou.per_class[c]) ? "n/a" : fixed(e.iou.per_class[c], 4))
          << "\n";
  if (e.dice) table << "Dice " << fixed(*e.dice, 4) << "\n";
  emit(out, o, j, table.str());
  return kOk;
}

int cmd_count(const Options& o, std::ostream& out) {
  const RunConfig cfg = load_config(o);
  backbone::Backbone bb = backbone::build(cfg.backbone);
  bb.freeze();
  json rows = json::array();
  std::ostringstream table;
  char line[160];
  std::snprintf(line, sizeof line, "%-16s %12s %12s %12s %12s\n", "Strategy", "Backbone", "Prompt", "Head", "Total");
  table << "Trainable parameters\n" << line;
  for (const auto& [s, c] : count_table(cfg, bb)) {
    rows.push_back({{"strategy", to_string(s)},
                    {"backbone", c.backbone},
                    {"prompt", c.prompt},
                    {"head", c.head},
                    {"total", c.total()}});
    std::snprintf(line, sizeof line, "%-16s %12zu %12zu %12zu %12zu\n", to_string(s).c_str(), c.backbone, c.prompt,
                  c.head, c.total());
    table << line;
  }
  json stages = json::array();
  table << "\nPrompted stages (prompt_matched, R=" << cfg.pipeline.iterations << ")\n";
  for (const auto& [label, cell] : ablation_cells(cfg, AblationAxis::stages)) {
    const std::size_t prompt = count_params(make_pipeline(cell, bb, {std::vector<double>(
                                                                          cfg.pipeline.num_classes,
                                                                          1.0 / cfg.pipeline.num_classes)})
                                                .registry())
                                   .prompt;
    stages.push_back({{"stages", label}, {"prompt", prompt}});
    std::snprintf(line, sizeof line, "%-16s %12zu\n", label.c_str(), prompt);
    table << line;
  }
  emit(out, o, {{"strategies", rows}, {"stages", stages}}, table.str());
  return kOk;
}

int cmd_gradcheck(const Options& o, std::ostream& out) {
  CheckScope scope;
  try {
    scope = check_scope_from(o.scope);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("--scope", e.what());
  }
  SuiteOptions so;
  so.seed = o.seed.value_or(0);
  so.seeds = o.seeds ? o.seeds : (scope == CheckScope::pipeline ? 2 : 20);
  so.corrupt_op = o.corrupt;
  const SuiteReport r = run_gradcheck_suite(scope, so);
  std::ostringstream table;
  table << "gradcheck scope " << to_string(scope) << ", seeds " << so.seed << ".." << so.seed + so.seeds - 1
        << ", rel_tol " << r.rel_tol << "\n";
  std::vector<std::string> names;
  for (const auto& c : r.cases)
    if (std::find(names.begin(), names.end(), c.name) == names.end()) names.push_back(c.name);
  char line[160];
  for (const auto& n : names) {
    double worst = 0.0;
    std::size_t total = 0, ok = 0;
    for (const auto& c : r.cases)
      if (c.name == n) {
        worst = std::max(worst, c.max_rel_error);
        ++total;
        ok += c.passed ? 1 : 0;
      }
    std::snprintf(line, sizeof line, "  %-26s max rel %.3e  %zu/%zu %s\n", n.c_str(), worst, ok, total,
                  ok == total ? "pass" : "FAIL");
    table << line;
  }
  table << (r.passed ? "PASS" : "FAIL") << " (max rel " << r.max_rel_error << ", " << fixed(r.seconds, 1) << " s)\n";
  if (!r.passed) {
    table << "failing:";
    for (const auto& n : r.failing()) table << ' ' << n;
    table << "\n";
  }
  emit(out, o, json(r), table.str());
  return r.passed ? kOk : kFailure;
}

int cmd_ablate(const Options& o, std::ostream& out) {
  const RunConfig cfg = load_config(o);
  AblationAxis axis;
  try {
    axis = ablation_axis_from(o.axis);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("--axis", e.what());
  }
  const data::Dataset ds = load_data(o, cfg);
  const backbone::Backbone bb = prepare_backbone(cfg, cache_dir(o));
  const AblationTable t = run_ablation(cfg, axis, bb, ds, o.seeds ? o.seeds : 3,
                                      [&](const std::string& label, std::uint64_t seed, double miou) {
                                        if (!o.json) out << "  " << label << " seed " << seed << "  mIoU "
                                                         << fixed(100.0 * miou, 2) << "\n";
                                      });
  emit(out, o, json(t), format_table(t));
  return kOk;
}

int cmd_oneshot(const Options& o, std::ostream& out) {
  const RunConfig cfg = load_config(o);
  const data::Dataset ds = load_data(o, cfg);
  const backbone::Backbone bb = prepare_backbone(cfg, cache_dir(o));
  const OneShotResult r = run_one_shot(cfg, bb, ds, o.reps);
  std::ostringstream table;
  for (std::size_t i = 0; i < r.runs.size(); ++i)
    table << "  repetition " << i + 1 << "  sample " << r.runs[i].train_index << "  Dice "
          << fixed(100.0 * r.runs[i].dice, 2) << "\n";
  table << to_string(cfg.strategy) << " one-shot Dice (%) " << r.formatted() << "\n";
  json j = r;
  j["strategy"] = to_string(cfg.strategy);
  emit(out, o, j, table.str());
  return kOk;
}

int cmd_synth(const Options& o, std::ostream& out) {
  const RunConfig cfg = load_config(o);
  if (o.out.empty()) throw ConfigError("--out", "an output directory is required");
  const data::SynthSpec spec = o.source ? cfg.pretrain.source : cfg.data;
  const data::Dataset ds = data::generate(spec);
  data::write_dataset(o.out, ds);
  out << "wrote " << ds.train.size() << " train / " << ds.val.size() << " val samples to " << o.out << "\n";
  return kOk;
}

void report_error(std::ostream& err, const Options& o, bool train_dir, const json& body) {
  err << body.dump() << '\n';
  if (train_dir && !o.out.empty()) {
    std::error_code ec;
    fs::create_directories(o.out, ec);
    if (!ec) write_json(fs::path(o.out) / "error.json", body);
  }
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Stage-wise prompt tuning for frozen segmentation backbones"};
  app.require_subcommand(1);
  Options o;

  auto add_config = [&](CLI::App* c) { c->add_option("--config", o.config, "Run config (JSON)"); };
  auto add_json = [&](CLI::App* c) { c->add_flag("--json", o.json, "Print JSON instead of the table"); };
  auto add_cache = [&](CLI::App* c) {
    c->add_option("--cache", o.cache, "Directory for pretrained backbones (default $PMSS_CACHE)");
  };

  auto* train = app.add_subcommand("train", "Train a pipeline and write a run directory");
  add_config(train);
  train->add_option("--out", o.out, "Run directory");
  train->add_option("--seed", o.seed, "Override train.seed");
  train->add_option("--data", o.data, "Dataset directory (default: generate from the config)");
  add_cache(train);

  auto* eval = app.add_subcommand("eval", "Evaluate a saved model");
  eval->add_option("--checkpoint", o.checkpoint, "model.bin of a run directory");
  eval->add_option("--data", o.data, "Dataset directory (default: regenerate the run's dataset)");
  eval->add_option("--split", o.split, "val, train or all")->check(CLI::IsMember({"val", "train", "all"}));
  eval->add_option("--out", o.out, "Write metrics JSON here");
  add_json(eval);

  auto* count = app.add_subcommand("count", "Trainable-parameter breakdown per strategy");
  add_config(count);
  count->add_option("--out", o.out, "Write JSON here");
  add_json(count);

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  grad->add_option("--scope", o.scope, "layers, spm or pipeline");
  grad->add_option("--seed", o.seed, "First seed");
  grad->add_option("--seeds", o.seeds, "Number of seeds (default 20, pipeline 2)");
  grad->add_option("--corrupt", o.corrupt, "Negative control: corrupt this op's gradient rule");
  grad->add_option("--out", o.out, "Write JSON here");
  add_json(grad);

  auto* ablate = app.add_subcommand("ablate", "Ablation sweep over one axis");
  add_config(ablate);
  ablate->add_option("--axis", o.axis, "stages, recurrent, spl or lscm");
  ablate->add_option("--seed", o.seed, "First training seed");
  ablate->add_option("--seeds", o.seeds, "Seeds per row (default 3)");
  ablate->add_option("--data", o.data, "Dataset directory");
  ablate->add_option("--out", o.out, "Write JSON here");
  add_cache(ablate);
  add_json(ablate);

  auto* oneshot = app.add_subcommand("oneshot", "Repeated one-shot protocol with Dice");
  add_config(oneshot);
  oneshot->add_option("--seed", o.seed, "Split and training seed");
  oneshot->add_option("--reps", o.reps, "Repetitions (default 5)");
  oneshot->add_option("--data", o.data, "Dataset directory");
  oneshot->add_option("--out", o.out, "Write JSON here");
  add_cache(oneshot);
  add_json(oneshot);

  auto* synth = app.add_subcommand("synth", "Write the config's synthetic dataset to disk");
  add_config(synth);
  synth->add_option("--out", o.out, "Dataset directory");
  synth->add_flag("--source", o.source, "Write the pretraining source task instead");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << json{{"error", "usage"}, {"message", e.what()}}.dump() << '\n';
    return kInvalidConfig;
  }

  const bool is_train = train->parsed();
  try {
    if (is_train) return cmd_train(o, out);
    if (eval->parsed()) return cmd_eval(o, out);
    if (count->parsed()) return cmd_count(o, out);
    if (grad->parsed()) return cmd_gradcheck(o, out);
    if (ablate->parsed()) return cmd_ablate(o, out);
    if (oneshot->parsed()) return cmd_oneshot(o, out);
    if (synth->parsed()) return cmd_synth(o, out);
  } catch (const ConfigError& e) {
    report_error(err, o, is_train, {{"error", "invalid_config"}, {"field", e.field()}, {"message", e.what()}});
    return kInvalidConfig;
  } catch (const NonFiniteError& e) {
    report_error(err, o, is_train,
                 {{"error", "non_finite"}, {"tensor", e.tensor()}, {"step", e.step()}, {"message", e.what()}});
    return kNonFinite;
  } catch (const CheckpointError& e) {
    report_error(err, o, is_train, {{"error", "bad_checkpoint"}, {"message", e.what()}});
    return kBadCheckpoint;
  } catch (const std::exception& e) {
    report_error(err, o, is_train, {{"error", "failure"}, {"message", e.what()}});
    return kFailure;
  }
  return kFailure;
}

}  // namespace pmss::cli
