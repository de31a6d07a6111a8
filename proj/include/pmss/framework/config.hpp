#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "pmss/backbone/backbone.hpp"
#include "pmss/data/synth.hpp"
#include "pmss/framework/pipeline.hpp"
#include "pmss/framework/train.hpp"

namespace pmss::framework {

/// Invalid run configuration; `field` is the JSON path of the offending value.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& message);
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

struct PretrainConfig {
  std::size_t steps = 0;
  double lr = 0.01;
  std::size_t batch = 8;
  std::uint64_t seed = 0;
  data::SynthSpec source = data::SynthSpec::source();
};

struct RunConfig {
  backbone::BackboneConfig backbone;
  PretrainConfig pretrain;
  /// Optional pre-built backbone checkpoint; replaces building and pretraining.
  std::optional<std::filesystem::path> backbone_checkpoint;
  PipelineSpec pipeline;
  Strategy strategy = Strategy::prompt_matched;
  LossSpec loss;
  TrainOptions train;
  data::SynthSpec data = data::SynthSpec::downstream();
};

/// Parses and validates; missing fields keep their defaults. Throws ConfigError.
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& c);

/// Identity of the backbone a config produces (structure, seed, pretraining).
std::string backbone_key(const RunConfig& c);

}  // namespace pmss::framework
