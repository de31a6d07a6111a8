#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "pmss/data/synth.hpp"
#include "pmss/numerics/gradcheck.hpp"
#include "pmss/numerics/layers.hpp"
#include "pmss/numerics/tensor.hpp"

namespace pmss::backbone {

enum class Kind { cnn, vit };

struct BackboneConfig {
  Kind kind = Kind::cnn;
  std::uint64_t seed = 0;
  // Toy CNN.
  std::vector<std::size_t> channels{32, 64, 128, 256};
  std::vector<std::size_t> depths{2, 2, 2, 2};
  std::vector<std::size_t> strides{1, 2, 2, 2};
  std::size_t stem_stride = 2;
  // Toy token-mixing transformer.
  std::size_t embed_dim = 64;
  std::size_t layers = 12;
  std::size_t patch = 8;
  std::size_t stages = 4;
  std::size_t image_size = 64;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  std::size_t num_stages() const { return kind == Kind::cnn ? channels.size() : stages; }
};

void to_json(nlohmann::json& j, const BackboneConfig& c);
void from_json(const nlohmann::json& j, BackboneConfig& c);

/// 3x3 conv, rectifier, 3x3 conv, plus the (projected when shape changes) input.
struct ResidualBlock {
  ConvLayer conv1;
  ConvLayer conv2;
  ConvLayer proj;  // 1x1; absent (null weight) when input and output shapes agree
  bool has_proj() const { return static_cast<bool>(proj.weight); }
};

/// x + token_mix(x), then + mlp2(relu(mlp1(.))), on an N x D x h x w token grid.
struct MixerBlock {
  Tensor token_weight;  // T x T
  Tensor token_bias;    // T
  ConvLayer mlp1;
  ConvLayer mlp2;
};

struct Stage {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t stride = 1;
  std::vector<ResidualBlock> blocks;
  std::vector<MixerBlock> mixers;
  std::size_t block_count() const { return blocks.size() + mixers.size(); }
};

/// Hook run after every residual or mixer block: receives the block input and
/// output and returns the (possibly augmented) output.
using BlockHook = std::function<Tensor(std::size_t stage, std::size_t block, const Tensor& in, const Tensor& out)>;

struct BlockShape {
  std::size_t stage = 0;  // 1-based
  std::size_t block = 0;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t stride = 1;
};

class Backbone {
 public:
  BackboneConfig config;
  ConvLayer stem;
  std::vector<Stage> stages;
  std::string provenance;

  std::size_t num_stages() const { return stages.size(); }
  std::size_t stem_channels() const { return stem.out_channels; }
  std::size_t stage_channels(std::size_t i) const;  // output channels of stage i (i = 0 is the stem)
  std::vector<BlockShape> block_shapes() const;

  /// i = 0 runs the stem on an image; i in 1..N runs stage i.
  Tensor run_stage(std::size_t i, const Tensor& input, const BlockHook& hook = {}) const;
  Tensor forward(const Tensor& image, const BlockHook& hook = {}) const;

  bool frozen() const { return frozen_; }
  /// Marks every tensor non-trainable and sets the frozen flag.
  void freeze();
  /// Sets the frozen flag without touching requires_grad (used by strategies
  /// that train selected backbone tensors).
  void set_frozen_flag(bool on) { frozen_ = on; }

  /// Visits every tensor as "backbone.stem.weight", "backbone.s1.b0.conv1.bias", ...
  void visit(const TensorVisitor& fn);
  std::vector<NamedTensor> named_tensors();
  std::size_t param_count();
  /// Copy with detached tensor storage (plain copies share storage).
  Backbone clone() const;

 private:
  bool frozen_ = false;
};

Backbone build_toy_cnn(const std::vector<std::size_t>& channels, const std::vector<std::size_t>& depths,
                       std::uint64_t seed);
/// Rejects a layer count that does not split evenly into `stages`.
Backbone build_toy_vit(std::size_t embed_dim, std::size_t layers, std::size_t patch, std::size_t stages,
                       std::size_t image_size, std::uint64_t seed);
Backbone build(const BackboneConfig& config);

/// N x D x h x w grid <-> N x T x D token sequence (T = h * w), data only.
Tensor grid_to_tokens(const Tensor& grid);
Tensor tokens_to_grid(const Tensor& tokens, std::size_t h, std::size_t w);

struct PretrainOptions {
  std::size_t steps = 500;
  double lr = 0.01;
  double momentum = 0.9;
  std::size_t batch = 8;
  std::uint64_t seed = 0;
  /// Samples evaluated for the before/after source mIoU.
  std::size_t eval_samples = 32;
};

struct PretrainReport {
  double miou_before = 0.0;
  double miou_after = 0.0;
  std::vector<double> losses;
};

/// Trains backbone plus a throwaway head on the source task, then freezes the
/// backbone and records provenance. Throws std::logic_error if already frozen.
PretrainReport pretrain_source(Backbone& backbone, const data::Dataset& source, const PretrainOptions& opts);

/// SHA-256 of the serialized backbone tensors.
std::string backbone_sha256(Backbone& backbone);

/// Checkpoint at `path` plus a JSON sidecar with the same basename holding
/// {frozen, provenance, config}.
void save_backbone(const std::filesystem::path& path, Backbone& backbone);
Backbone load_backbone(const std::filesystem::path& path);
std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint);

}  // namespace pmss::backbone
