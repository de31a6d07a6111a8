#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "pmss/backbone/backbone.hpp"
#include "pmss/data/metrics.hpp"
#include "pmss/framework/config.hpp"

namespace pmss::framework {

/// Builds the configured backbone and, when pretraining is configured, trains
/// it on the source task and freezes it. With a cache directory the frozen
/// result is stored as <cache>/<backbone_key>.bin and reused. A configured
/// backbone checkpoint bypasses both.
backbone::Backbone prepare_backbone(const RunConfig& config, const std::optional<std::filesystem::path>& cache_dir,
                                    std::optional<backbone::PretrainReport>* report = nullptr);

/// Class prior of the dataset's training labels.
spm::ClassPrior training_prior(const data::Dataset& ds);

/// Pipeline for `config` on a copy of `backbone`, with the strategy applied.
Pipeline make_pipeline(const RunConfig& config, const backbone::Backbone& backbone, const spm::ClassPrior& prior);

struct RunOutcome {
  Pipeline pipeline;
  TrainReport report;
  ParamCounts counts;
  std::string backbone_sha_before;
  std::string backbone_sha_after;
};

RunOutcome run_training(const RunConfig& config, const backbone::Backbone& backbone, const data::Dataset& ds,
                        const RecordSink& sink = {});

/// Trainable-parameter breakdown for each strategy under `config`.
std::vector<std::pair<Strategy, ParamCounts>> count_table(const RunConfig& config,
                                                          const backbone::Backbone& backbone);

enum class AblationAxis { stages, recurrent, spl, lscm };

std::string to_string(AblationAxis a);
/// Throws std::invalid_argument for an unknown axis.
AblationAxis ablation_axis_from(const std::string& tag);

struct AblationRow {
  std::string label;
  std::vector<double> miou;  // one entry per seed
  data::MeanStd stats;
  std::size_t prompt_params = 0;
};

struct AblationTable {
  AblationAxis axis = AblationAxis::stages;
  std::vector<AblationRow> rows;
};

/// The configs of one sweep, labelled as in the corresponding table.
std::vector<std::pair<std::string, RunConfig>> ablation_cells(const RunConfig& base, AblationAxis axis);

using CellProgress = std::function<void(const std::string& label, std::uint64_t seed, double miou)>;

/// Runs every cell for `seeds` consecutive training seeds starting at
/// base.train.seed.
AblationTable run_ablation(const RunConfig& base, AblationAxis axis, const backbone::Backbone& backbone,
                           const data::Dataset& ds, std::size_t seeds = 3, const CellProgress& progress = {});

std::string format_table(const AblationTable& t);
void to_json(nlohmann::json& j, const AblationTable& t);

struct OneShotRun {
  std::size_t train_index = 0;
  double dice = 0.0;
};

struct OneShotResult {
  std::vector<OneShotRun> runs;
  data::MeanStd stats;  // over Dice in percent
  /// "76.07±0.57"
  std::string formatted() const { return data::format_mean_std(stats); }
};

/// Repeated one-shot protocol: each repetition trains a fresh pipeline on one
/// selected sample (train and val splits pooled) and reports foreground Dice
/// on the rest. Requires config.train.dice_class >= 0.
OneShotResult run_one_shot(const RunConfig& config, const backbone::Backbone& backbone, const data::Dataset& ds,
                           std::size_t repetitions = 5);

void to_json(nlohmann::json& j, const OneShotResult& r);

}  // namespace pmss::framework
