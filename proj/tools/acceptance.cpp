#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pmss/backbone/backbone.hpp"
#include "pmss/data/metrics.hpp"
#include "pmss/data/synth.hpp"
#include "pmss/framework/config.hpp"
#include "pmss/framework/experiment.hpp"
#include "pmss/framework/gradcheck_suite.hpp"
#include "pmss/framework/pipeline.hpp"
#include "pmss/numerics/ops.hpp"
#include "pmss/spm/spm.hpp"

namespace fs = std::filesystem;
using namespace pmss;
using namespace pmss::framework;

namespace {

// Tolerances and budgets of the acceptance criteria.
constexpr double kLayerGradTol = 1e-4;
constexpr double kPipelineGradTol = 1e-3;
constexpr std::size_t kGradSeeds = 20;
constexpr std::size_t kPipelineGradSeeds = 3;
constexpr double kGradSeconds = 60.0;
constexpr std::size_t kEquivalenceImages = 10;
constexpr double kShortSeconds = 5.0;
constexpr std::size_t kFrozenSteps = 300;
constexpr std::size_t kFuzzForwards = 500;
constexpr double kSimplexTol = 1e-6;
constexpr std::size_t kTransferSteps = 800;
constexpr std::size_t kTransferSeeds = 3;
constexpr double kTransferMargin = 2.0;  // mIoU points
constexpr double kTransferSeconds = 15 * 60.0;
constexpr double kAblationTie = 0.3;  // mIoU points
constexpr std::size_t kOneShotReps = 5;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fixed(double v, int decimals = 2) {
  std::ostringstream s;
  s.precision(decimals);
  s << std::fixed << v;
  return s.str();
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

/// Largest deviation of a semantic map from the per-pixel simplex (sum 1, entries >= 0).
double simplex_violation(const Tensor& map) {
  const auto& s = map.shape();
  const std::size_t n = s[0], k = s[1], hw = s[2] * s[3];
  const auto d = map.data();
  double worst = 0.0;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < hw; ++p) {
      double sum = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        const double v = d[(b * k + c) * hw + p];
        if (!(v >= 0.0)) worst = std::max(worst, std::isnan(v) ? INFINITY : -v);
        sum += v;
      }
      worst = std::max(worst, std::abs(sum - 1.0));
    }
  return worst;
}

Tensor random_tensor(const Shape& shape, Rng& rng, double lo, double hi) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(shape, std::move(v));
}

struct Outcome {
  bool passed = false;
  std::string detail;
};

struct Context {
  RunConfig config;
  RunConfig oneshot_config;
  std::optional<fs::path> cache;
  std::optional<backbone::Backbone> backbone;
  std::optional<data::Dataset> downstream;
  /// Time spent building (and, without a cache hit, pretraining) the backbone.
  double backbone_seconds = 0.0;

  backbone::Backbone& frozen_backbone() {
    if (!backbone) {
      const auto t0 = Clock::now();
      std::optional<backbone::PretrainReport> report;
      backbone = prepare_backbone(config, cache, &report);
      backbone_seconds = seconds_since(t0);
      std::cout << "  backbone ready in " << fixed(seconds_since(t0), 1) << " s";
      if (report) std::cout << " (source mIoU " << fixed(report->miou_before, 3) << " -> " << fixed(report->miou_after, 3) << ")";
      std::cout << std::endl;
    }
    return *backbone;
  }

  const data::Dataset& data() {
    if (!downstream) downstream = data::generate(config.data);
    return *downstream;
  }
};

Outcome gradient_correctness(Context&) {
  const auto t0 = Clock::now();
  std::ostringstream detail;
  bool ok = true;
  for (auto [scope, seeds, tol] : {std::tuple{CheckScope::layers, kGradSeeds, kLayerGradTol},
                                   std::tuple{CheckScope::spm, kGradSeeds, kLayerGradTol},
                                   std::tuple{CheckScope::pipeline, kPipelineGradSeeds, kPipelineGradTol}}) {
    SuiteOptions opts;
    opts.seeds = seeds;
    const SuiteReport r = run_gradcheck_suite(scope, opts);
    ok = ok && r.passed && r.max_rel_error < tol;
    detail << to_string(scope) << " " << sci(r.max_rel_error) << " (<" << sci(tol) << ", " << r.cases.size()
           << " cases)  ";
  }
  const double secs = seconds_since(t0);
  detail << fixed(secs, 1) << " s";
  return {ok && secs < kGradSeconds, detail.str()};
}

Outcome identity_at_init(Context& ctx) {
  const auto& bb = ctx.frozen_backbone();
  const auto t0 = Clock::now();
  const spm::ClassPrior prior = training_prior(ctx.data());
  RunConfig head_cfg = ctx.config;
  head_cfg.strategy = Strategy::head;
  RunConfig prompt_cfg = ctx.config;
  prompt_cfg.strategy = Strategy::prompt_matched;
  const Pipeline head = make_pipeline(head_cfg, bb, prior);
  Pipeline prompted = make_pipeline(prompt_cfg, bb, prior);

  bool zero_projections = true;
  for (auto& s : prompted.spms)
    if (s)
      for (const Tensor* t : {&s->b2_out.weight, &s->b2_out.bias})
        zero_projections = zero_projections && std::all_of(t->data().begin(), t->data().end(), [](double v) { return v == 0.0; });

  Rng rng(2024);
  std::size_t equal = 0;
  const std::size_t size = ctx.config.data.size;
  for (std::size_t i = 0; i < kEquivalenceImages; ++i) {
    const Tensor img = random_tensor({1, 3, size, size}, rng, 0.0, 1.0);
    if (bitwise_equal(prompted.forward(img).logits, head.forward(img).logits)) ++equal;
  }
  const double secs = seconds_since(t0);
  return {zero_projections && equal == kEquivalenceImages && prompted.spm_count() > 0 && secs < kShortSeconds,
          std::to_string(equal) + "/" + std::to_string(kEquivalenceImages) + " images bitwise equal over " +
              std::to_string(prompted.spm_count()) + " SPMs, " + fixed(secs, 2) + " s"};
}

Outcome frozen_backbone(Context& ctx) {
  auto& bb = ctx.frozen_backbone();
  const std::string before = backbone::backbone_sha256(bb);
  RunConfig cfg = ctx.config;
  cfg.strategy = Strategy::prompt_matched;
  cfg.train.steps = kFrozenSteps;
  cfg.train.eval_every = 0;
  const auto t0 = Clock::now();
  RunOutcome run = run_training(cfg, bb, ctx.data());
  const std::string after_source = backbone::backbone_sha256(bb);
  const bool sha_ok = run.backbone_sha_before == before && run.backbone_sha_after == before && after_source == before;

  bool table_ok = true;
  for (const auto& [strategy, counts] : count_table(ctx.config, bb))
    if (strategy == Strategy::prompt_matched || strategy == Strategy::head) table_ok = table_ok && counts.backbone == 0;
  table_ok = table_ok && run.counts.backbone == 0 && run.counts.prompt > 0;
  return {sha_ok && table_ok, "sha " + before.substr(0, 16) + " unchanged after " + std::to_string(kFrozenSteps) +
                                  " steps (" + fixed(seconds_since(t0), 1) + " s); count backbone column " +
                                  (table_ok ? "0" : "non-zero")};
}

/// Closed-form element count of one convolution with bias.
std::size_t conv_count(std::size_t in, std::size_t out, std::size_t k, std::size_t groups = 1) {
  return out * (in / groups) * k * k + out;
}

/// Independent parameter count of a configuration, derived from the module
/// definitions rather than from the pipeline's registry.
ParamCounts oracle_counts(const RunConfig& cfg, Strategy strategy, backbone::Backbone& bb) {
  const PipelineSpec& s = cfg.pipeline;
  ParamCounts c;
  const std::size_t cn = bb.stage_channels(bb.num_stages());
  c.head = conv_count(cn, s.head_channels, 3) + conv_count(s.head_channels, s.num_classes, 3);

  std::size_t all = 0, biases = 0;
  for (const NamedTensor& e : bb.named_tensors()) {
    all += e.tensor.numel();
    if (e.name.ends_with(".bias")) biases += e.tensor.numel();
  }
  switch (strategy) {
    case Strategy::full:
    case Strategy::scratch:
      c.backbone = all;
      break;
    case Strategy::bias:
      c.backbone = biases;
      break;
    case Strategy::side:
    case Strategy::adapter:
      for (const backbone::BlockShape& b : bb.block_shapes()) {
        const std::size_t in = strategy == Strategy::side ? b.in_channels : b.out_channels;
        c.prompt += conv_count(in, s.module_channels, 3, s.module_groups) + conv_count(s.module_channels, b.out_channels, 1);
      }
      break;
    case Strategy::prompt_matched: {
      spm::SpmConfig probe;
      probe.channels = s.spm_channels;
      probe.pdc_groups = s.pdc_groups;
      const std::size_t g = probe.resolved_pdc_groups();
      const std::size_t ch = s.spm_channels, q = ch / 4;
      const std::size_t pdc = 4 * conv_count(q, q, 3, g) + conv_count(ch, ch, 1);
      for (std::size_t point : s.spm_stages) {
        const std::size_t cf = bb.stage_channels(point - 1);
        c.prompt += 2 * conv_count(cf + s.num_classes, ch, 1, s.in_groups) + 2 * pdc +
                    conv_count(ch, s.num_classes, 1) + conv_count(ch, cf, 1);
      }
      break;
    }
    case Strategy::head:
      break;
  }
  return c;
}

Outcome parameter_counts(Context& ctx) {
  auto& bb = ctx.frozen_backbone();
  const auto t0 = Clock::now();
  const spm::ClassPrior prior = training_prior(ctx.data());
  std::size_t checked = 0, mismatches = 0;
  for (Strategy strategy : all_strategies()) {
    RunConfig cfg = ctx.config;
    cfg.strategy = strategy;
    const Pipeline p = make_pipeline(cfg, bb, prior);
    Pipeline copy = p;
    ++checked;
    if (count_params(copy.registry()) != oracle_counts(cfg, strategy, bb)) ++mismatches;
  }

  // Every non-empty subset of the N + 1 insertion points, for R = 1..3.
  const std::size_t points = bb.num_stages() + 1;
  std::vector<std::size_t> cumulative;
  bool monotone = true, r_constant = true;
  for (std::size_t mask = 1; mask < (std::size_t{1} << points); ++mask) {
    std::vector<std::size_t> stages;
    for (std::size_t i = 0; i < points; ++i)
      if (mask & (std::size_t{1} << i)) stages.push_back(i + 1);
    std::optional<std::size_t> prompt_at_r1;
    for (std::size_t r = 1; r <= 3; ++r) {
      RunConfig cfg = ctx.config;
      cfg.strategy = Strategy::prompt_matched;
      cfg.pipeline.spm_stages = stages;
      cfg.pipeline.iterations = r;
      cfg.loss.iterations = r;
      Pipeline p = make_pipeline(cfg, bb, prior);
      const ParamCounts got = count_params(p.registry());
      ++checked;
      if (got != oracle_counts(cfg, Strategy::prompt_matched, bb)) ++mismatches;
      if (!prompt_at_r1) prompt_at_r1 = got.prompt;
      r_constant = r_constant && got.prompt == *prompt_at_r1;
    }
    if (mask == (std::size_t{1} << stages.size()) - 1) {
      monotone = monotone && (cumulative.empty() || *prompt_at_r1 > cumulative.back());
      cumulative.push_back(*prompt_at_r1);
    }
  }
  const double secs = seconds_since(t0);
  std::ostringstream detail;
  detail << checked - mismatches << "/" << checked << " configurations match; stages 1..j prompt counts";
  for (std::size_t v : cumulative) detail << " " << v;
  detail << (monotone ? " (strictly increasing)" : " (NOT increasing)") << (r_constant ? ", constant in R" : ", varies with R")
         << "; " << fixed(secs, 2) << " s";
  return {mismatches == 0 && monotone && r_constant && cumulative.size() == points && secs < kShortSeconds, detail.str()};
}

spm::SpmParams fuzz_params(const spm::SpmConfig& cfg, Rng& rng, double logit_scale) {
  spm::SpmParams p = spm::SpmParams::make(cfg, rng);
  for (double& v : p.b1_out.weight.data()) v = logit_scale * rng.normal();
  for (Tensor* t : {&p.b2_out.weight, &p.b2_out.bias})
    for (double& v : t->data()) v = rng.uniform(-0.5, 0.5);
  return p;
}

Outcome unroll_equivalence(Context&) {
  const auto t0 = Clock::now();
  std::size_t checks = 0, equal = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    spm::SpmConfig cfg;
    cfg.feature_channels = 8;
    cfg.num_classes = 4;
    cfg.channels = 16;
    const spm::SpmParams p = fuzz_params(cfg, rng, 1.0);
    const Tensor f = random_tensor({2, 8, 7, 6}, rng, -1.0, 1.0);
    const Tensor m = ops::softmax_channels(random_tensor({2, 4, 4, 3}, rng, -2.0, 2.0));
    for (std::size_t r : {2, 3}) {
      const spm::SpmOutput unrolled = spm::spm_forward(f, m, p, r);
      // Manual chain of the single-iteration operation with the same parameters.
      Tensor feature = f;
      Tensor map = ops::bilinear_resize(m, f.shape()[2], f.shape()[3]);
      std::vector<Tensor> interim;
      for (std::size_t i = 0; i < r; ++i) {
        map = spm::refine_map(feature, map, p);
        feature = spm::generate_prompt(feature, map, p).feature;
        interim.push_back(map);
      }
      bool same = bitwise_equal(unrolled.feature, feature) && bitwise_equal(unrolled.map, map) &&
                  unrolled.interim.size() == r;
      for (std::size_t i = 0; same && i < r; ++i) same = bitwise_equal(unrolled.interim[i], interim[i]);
      ++checks;
      if (same) ++equal;
    }
  }
  const double secs = seconds_since(t0);
  return {equal == checks && secs < kShortSeconds,
          std::to_string(equal) + "/" + std::to_string(checks) + " unrolls (R=2,3) bitwise equal, " + fixed(secs, 2) + " s"};
}

Outcome simplex_closure(Context& ctx) {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::size_t maps = 0, forwards = 0;
  Rng rng(99);
  const std::size_t pipeline_forwards = kFuzzForwards / 10;
  for (; forwards < kFuzzForwards - pipeline_forwards; ++forwards) {
    spm::SpmConfig cfg;
    cfg.num_classes = 2 + rng.below(6);
    cfg.feature_channels = 4 * (1 + rng.below(4));
    cfg.channels = 4 * (1 + rng.below(6));
    for (auto& d : cfg.dilations) d = 1 + rng.below(4);
    cfg.pdc_relu = rng.below(2) == 0;
    const double logit_scale = std::pow(10.0, rng.uniform(-2.0, 1.5));
    const spm::SpmParams p = fuzz_params(cfg, rng, logit_scale);
    const std::size_t n = 1 + rng.below(2), h = 2 + rng.below(9), w = 2 + rng.below(9);
    const double feature_scale = std::pow(10.0, rng.uniform(-1.0, 1.5));
    const Tensor f = random_tensor({n, cfg.feature_channels, h, w}, rng, -feature_scale, feature_scale);
    const Tensor m = ops::softmax_channels(random_tensor({n, cfg.num_classes, 1 + rng.below(h), 1 + rng.below(w)}, rng, -5, 5));
    const spm::SpmOutput out = spm::spm_forward(f, m, p, 1 + rng.below(3));
    for (const Tensor& t : out.interim) worst = std::max(worst, simplex_violation(t));
    worst = std::max(worst, simplex_violation(out.map));
    maps += out.interim.size() + 1;
  }

  // Whole pipelines on the configured backbone with perturbed prompt projections.
  auto& bb = ctx.frozen_backbone();
  const spm::ClassPrior prior = training_prior(ctx.data());
  RunConfig cfg = ctx.config;
  cfg.strategy = Strategy::prompt_matched;
  cfg.pipeline.spm_stages.clear();
  for (std::size_t i = 1; i <= bb.num_stages() + 1; ++i) cfg.pipeline.spm_stages.push_back(i);
  cfg.pipeline.iterations = 2;
  Pipeline p = make_pipeline(cfg, bb, prior);
  for (auto& s : p.spms)
    if (s)
      for (Tensor* t : {&s->b2_out.weight, &s->b2_out.bias})
        for (double& v : t->data()) v = rng.uniform(-0.3, 0.3);
  for (std::size_t i = 0; i < pipeline_forwards; ++i, ++forwards) {
    const std::size_t size = 16 + 8 * rng.below(3);
    const ForwardResult r = p.forward(random_tensor({1, 3, size, size}, rng, 0.0, 1.0));
    for (const StageMaps& s : r.interim)
      for (const Tensor& t : s.maps) {
        worst = std::max(worst, simplex_violation(t));
        ++maps;
      }
  }
  return {forwards == kFuzzForwards && worst <= kSimplexTol,
          std::to_string(forwards) + " forwards, " + std::to_string(maps) + " maps, worst violation " + sci(worst) +
              " (<= " + sci(kSimplexTol) + "), " + fixed(seconds_since(t0), 1) + " s"};
}

std::vector<double> train_seeds(Context& ctx, Strategy strategy, std::ostringstream& detail) {
  std::vector<double> miou;
  for (std::size_t i = 0; i < kTransferSeeds; ++i) {
    RunConfig cfg = ctx.config;
    cfg.strategy = strategy;
    cfg.train.steps = kTransferSteps;
    cfg.train.seed = ctx.config.train.seed + i;
    const auto t0 = Clock::now();
    const RunOutcome run = run_training(cfg, ctx.frozen_backbone(), ctx.data());
    miou.push_back(100.0 * run.report.final_eval.iou.mean);
    std::cout << "  " << to_string(strategy) << " seed " << cfg.train.seed << ": mIoU " << fixed(miou.back()) << " ("
              << fixed(seconds_since(t0), 1) << " s)" << std::endl;
  }
  detail << to_string(strategy) << " " << data::format_mean_std(data::mean_std(miou)) << "  ";
  return miou;
}

Outcome transfer_direction(Context& ctx) {
  ctx.frozen_backbone();
  ctx.data();
  const auto t0 = Clock::now();
  std::ostringstream detail;
  const double head = data::mean_std(train_seeds(ctx, Strategy::head, detail)).mean;
  const double prompted = data::mean_std(train_seeds(ctx, Strategy::prompt_matched, detail)).mean;
  const double secs = seconds_since(t0) + ctx.backbone_seconds;
  detail << "gap " << fixed(prompted - head) << " (>= " << fixed(kTransferMargin) << "), " << fixed(secs, 0)
         << " s including " << fixed(ctx.backbone_seconds, 0) << " s backbone preparation";
  return {prompted - head >= kTransferMargin && secs < kTransferSeconds, detail.str()};
}

Outcome ablation_direction(Context& ctx) {
  auto& bb = ctx.frozen_backbone();
  RunConfig base = ctx.config;
  base.train.steps = kTransferSteps;
  const auto t0 = Clock::now();
  const AblationTable table = run_ablation(base, AblationAxis::spl, bb, ctx.data(), kTransferSeeds,
                                           [](const std::string& label, std::uint64_t seed, double miou) {
                                             std::cout << "  " << label << " seed " << seed << ": mIoU " << fixed(100.0 * miou)
                                                       << std::endl;
                                           });
  std::cout << format_table(table);
  if (table.rows.size() != 2) return {false, "expected a two-row table"};
  const double with = table.rows[0].stats.mean, without = table.rows[1].stats.mean;
  return {without <= with + kAblationTie, "with SPL " + fixed(with) + ", w/o SPL " + fixed(without) + " (tie band " +
                                             fixed(kAblationTie, 1) + "), " + fixed(seconds_since(t0), 0) + " s"};
}

Outcome one_shot(Context& ctx) {
  const auto t0 = Clock::now();
  const RunConfig& cfg = ctx.oneshot_config;
  const backbone::Backbone bb = prepare_backbone(cfg, ctx.cache);
  const data::Dataset ds = data::generate(cfg.data);
  const OneShotResult a = run_one_shot(cfg, bb, ds, kOneShotReps);
  const OneShotResult b = run_one_shot(cfg, bb, ds, kOneShotReps);
  bool identical = a.runs.size() == b.runs.size() && a.formatted() == b.formatted();
  for (std::size_t i = 0; identical && i < a.runs.size(); ++i)
    identical = a.runs[i].train_index == b.runs[i].train_index && a.runs[i].dice == b.runs[i].dice;
  const bool format_ok = std::regex_match(a.formatted(), std::regex(R"(\d+\.\d{2}±\d+\.\d{2})"));
  return {identical && format_ok && a.runs.size() == kOneShotReps,
          "Dice " + a.formatted() + " over " + std::to_string(a.runs.size()) + " repetitions, repeat " +
              (identical ? "identical" : "DIFFERS") + ", " + fixed(seconds_since(t0), 1) + " s"};
}

LabelMap labels(std::vector<std::int32_t> v, std::size_t h, std::size_t w) {
  LabelMap m(1, h, w);
  m.labels = std::move(v);
  return m;
}

Outcome metric_oracles(Context&) {
  std::vector<std::string> failures;
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  };
  // gt (0,0,1,1), pred (0,1,1,1): confusion [[1,1],[0,2]].
  const LabelMap gt = labels({0, 0, 1, 1}, 2, 2), pred = labels({0, 1, 1, 1}, 2, 2);
  data::ConfusionMatrix cm(2);
  cm.add(pred, gt);
  expect(cm.at(0, 0) == 1 && cm.at(0, 1) == 1 && cm.at(1, 0) == 0 && cm.at(1, 1) == 2, "2x2 confusion counts");
  const data::IouReport r = data::miou(pred, gt, 2);
  const double iou0 = 1.0 / (1.0 + 1.0 + 0.0), iou1 = 2.0 / (2.0 + 0.0 + 1.0);
  expect(r.per_class.size() == 2 && r.per_class[0] == iou0 && r.per_class[1] == iou1, "2x2 per-class IoU 1/2, 2/3");
  expect(r.mean == (iou0 + iou1) / 2.0 && std::abs(r.mean - 7.0 / 12.0) < 1e-15, "2x2 mIoU 7/12");
  expect(data::miou(gt, gt, 2).mean == 1.0, "identical maps give mIoU 1");
  const data::IouReport disjoint = data::miou(labels({0, 0}, 1, 2), labels({1, 1}, 1, 2), 2);
  expect(disjoint.per_class[0] == 0.0 && disjoint.per_class[1] == 0.0, "disjoint maps give IoU 0");

  // TP=3, FP=1, FN=2 on foreground 1.
  const LabelMap dgt = labels({1, 1, 1, 1, 1, 0, 0, 0}, 2, 4), dpred = labels({1, 1, 1, 0, 0, 1, 0, 0}, 2, 4);
  expect(data::dice_from_counts(3, 1, 2) == 6.0 / 9.0, "Dice from counts 6/9");
  expect(data::dice(dpred, dgt, 1) == 6.0 / 9.0, "Dice on label maps 6/9");
  expect(data::dice(labels({0, 0}, 1, 2), labels({0, 0}, 1, 2), 1) == 1.0, "empty foreground Dice 1");
  expect(data::dice(labels({0, 0}, 1, 2), labels({1, 0}, 1, 2), 1) == 0.0, "missed foreground Dice 0");
  expect(data::format_mean_std({76.07, 0.57}) == "76.07±0.57", "mean±std format");

  std::string detail = "mIoU " + fixed(r.mean, 6) + " (7/12), Dice " + fixed(data::dice(dpred, dgt, 1), 6) + " (6/9)";
  for (const auto& f : failures) detail += "; FAILED " + f;
  return {failures.empty(), detail};
}

struct Criterion {
  int id;
  std::string name;
  std::function<Outcome(Context&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks for the prompt-matched segmentation framework"};
  std::string config_path = PMSS_SOURCE_DIR "/configs/default.json";
  std::string oneshot_path = PMSS_SOURCE_DIR "/configs/oneshot_thin.json";
  std::string cache;
  std::vector<int> only;
  app.add_option("--config", config_path, "Run config of the transfer and ablation criteria")->check(CLI::ExistingFile);
  app.add_option("--oneshot-config", oneshot_path, "Run config of the one-shot criterion")->check(CLI::ExistingFile);
  app.add_option("--cache", cache, "Directory for pretrained backbones");
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  Context ctx;
  try {
    ctx.config = load_run_config(config_path);
    ctx.oneshot_config = load_run_config(oneshot_path);
  } catch (const std::exception& e) {
    std::cerr << "cannot load configs: " << e.what() << '\n';
    return 2;
  }
  if (!cache.empty()) ctx.cache = fs::path(cache);

  const std::vector<Criterion> criteria = {
      {1, "gradient correctness", gradient_correctness},
      {2, "identity at initialization", identity_at_init},
      {3, "frozen backbone", frozen_backbone},
      {4, "parameter counts", parameter_counts},
      {5, "unroll equivalence", unroll_equivalence},
      {6, "simplex closure", simplex_closure},
      {7, "transfer direction", transfer_direction},
      {8, "ablation direction", ablation_direction},
      {9, "one-shot protocol", one_shot},
      {10, "metric oracles", metric_oracles},
  };
  const std::set<int> selected(only.begin(), only.end());

  int failed = 0;
  for (const Criterion& c : criteria) {
    if (!selected.empty() && !selected.contains(c.id)) continue;
    std::cout << "criterion " << c.id << ": " << c.name << std::endl;
    Outcome o;
    try {
      o = c.run(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    if (!o.passed) ++failed;
    std::cout << (o.passed ? "PASS" : "FAIL") << " [" << c.id << "] " << c.name << ": " << o.detail << std::endl;
  }
  std::cout << (failed == 0 ? "all selected criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
  return failed == 0 ? 0 : 1;
}
