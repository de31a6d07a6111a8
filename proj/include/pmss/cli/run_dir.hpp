#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"
#include "pmss/framework/config.hpp"
#include "pmss/framework/pipeline.hpp"

namespace pmss::cli {

inline constexpr const char* kModelFormat = "pmss-model";
inline constexpr int kModelVersion = 1;

/// Writes every pipeline tensor to `path` and a sidecar (same basename, .json)
/// holding the resolved config, class prior and backbone identity.
void save_model(const std::filesystem::path& path, framework::Pipeline& pipeline, const framework::RunConfig& config);

struct LoadedModel {
  framework::RunConfig config;
  framework::Pipeline pipeline;
};

/// Rebuilds the pipeline described by the sidecar and loads its tensors.
/// Throws CheckpointError on a missing or mismatched sidecar, bad container
/// bytes, digest mismatch or tensor mismatch.
LoadedModel load_model(const std::filesystem::path& path);

/// Canonical digest of everything a run depends on: resolved config, dataset
/// bytes and backbone tensors.
std::string input_hash(const nlohmann::json& resolved_config, const std::string& dataset_sha256,
                       const std::string& backbone_sha256);

/// UTC timestamp, e.g. "2024-05-01T12:00:00Z".
std::string utc_now();

}  // namespace pmss::cli
