#include "pmss/cli/run_dir.hpp"

#include <chrono>
#include <ctime>
#include <fstream>

#include "pmss/numerics/checkpoint.hpp"

namespace pmss::cli {

namespace {

std::filesystem::path sidecar(const std::filesystem::path& model) {
  std::filesystem::path p = model;
  return p.replace_extension(".json");
}

}  // namespace

void save_model(const std::filesystem::path& path, framework::Pipeline& pipeline, const framework::RunConfig& config) {
  save_checkpoint(path, pipeline.named_tensors());
  nlohmann::json cfg = framework::to_json(config);
  cfg["backbone"].erase("checkpoint");
  const nlohmann::json side = {{"format", kModelFormat},
                               {"version", kModelVersion},
                               {"config", cfg},
                               {"prior", pipeline.prior.probs},
                               {"seed", pipeline.seed},
                               {"backbone_provenance", pipeline.backbone.provenance},
                               {"backbone_sha256", backbone::backbone_sha256(pipeline.backbone)},
                               {"checkpoint_sha256", sha256_file(path)}};
  std::ofstream out(sidecar(path));
  if (!out) throw std::runtime_error("cannot write " + sidecar(path).string());
  out << side.dump(2) << '\n';
}

LoadedModel load_model(const std::filesystem::path& path) {
  std::ifstream in(sidecar(path));
  if (!in) throw CheckpointError("model sidecar missing: " + sidecar(path).string());
  nlohmann::json side;
  try {
    side = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("model sidecar is not valid JSON: ") + e.what());
  }
  if (side.value("format", std::string()) != kModelFormat)
    throw CheckpointError("model sidecar has format \"" + side.value("format", std::string()) + "\", expected " +
                          kModelFormat);
  if (side.value("version", -1) != kModelVersion)
    throw CheckpointError("model sidecar version " + std::to_string(side.value("version", -1)) + " (expected " +
                          std::to_string(kModelVersion) + ")");
  // Decoding validates the container magic and version before the digest is compared.
  std::vector<NamedTensor> tensors = load_checkpoint(path);
  if (side.value("checkpoint_sha256", std::string()) != sha256_file(path))
    throw CheckpointError("checkpoint digest does not match its sidecar");

  framework::RunConfig config;
  try {
    config = framework::parse_run_config(side.at("config"));
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("model sidecar config: ") + e.what());
  }
  backbone::Backbone bb = backbone::build(config.backbone);
  bb.freeze();
  bb.provenance = side.value("backbone_provenance", std::string());
  spm::ClassPrior prior{side.at("prior").get<std::vector<double>>()};
  framework::Pipeline p =
      framework::Pipeline::build(config.pipeline, std::move(bb), std::move(prior), side.at("seed").get<std::uint64_t>());
  framework::apply_strategy(p, config.strategy);
  p.load_tensors(tensors);
  return {std::move(config), std::move(p)};
}

std::string input_hash(const nlohmann::json& resolved_config, const std::string& dataset_sha256,
                       const std::string& backbone_sha256) {
  return sha256_hex(resolved_config.dump() + "\n" + dataset_sha256 + "\n" + backbone_sha256);
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace pmss::cli
