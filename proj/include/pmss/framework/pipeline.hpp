#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pmss/backbone/backbone.hpp"
#include "pmss/data/label_map.hpp"
#include "pmss/spm/spm.hpp"

namespace pmss::framework {

enum class Strategy { full, scratch, head, bias, side, adapter, prompt_matched };

std::string to_string(Strategy s);
/// Throws std::invalid_argument for an unknown tag.
Strategy strategy_from(const std::string& tag);
const std::vector<Strategy>& all_strategies();

/// Parameter groups of the trainable-parameter table.
enum class Group { backbone, prompt, head };

/// Two 3x3 convolutions (C_N -> C_head -> K) and bilinear upsampling.
struct SegHead {
  ConvLayer conv1;
  ConvLayer conv2;

  static SegHead make(std::size_t in_channels, std::size_t hidden, std::size_t num_classes, Rng& rng);
  Tensor operator()(const Tensor& feature, std::size_t out_h, std::size_t out_w) const;
};

/// Side network or adapter attached to one residual block: 3x3 grouped
/// down-convolution, rectifier, 1x1 up-convolution (zero-initialized).
struct BlockModule {
  ConvLayer down;
  ConvLayer up;
  Tensor operator()(const Tensor& x) const;
};

struct PipelineSpec {
  std::size_t num_classes = 5;
  std::vector<std::size_t> spm_stages{1, 2, 3, 4};  // insertion points in 1..N+1
  std::size_t spm_channels = 256;
  std::size_t iterations = 1;  // R
  std::size_t pdc_groups = 0;  // 0 selects the default rule
  std::array<std::size_t, 4> dilations{1, 2, 3, 4};
  bool pdc_relu = true;
  std::size_t in_groups = 1;
  std::size_t head_channels = 64;
  std::size_t module_channels = 64;  // side / adapter bottleneck
  std::size_t module_groups = 4;
};

struct StageMaps {
  std::size_t point = 0;  // insertion point, 1-based
  std::vector<Tensor> maps;
};

struct ForwardResult {
  Tensor logits;
  std::vector<StageMaps> interim;
};

struct RegistryEntry {
  std::string name;
  Tensor tensor;
  Group group;
};

class Pipeline {
 public:
  PipelineSpec spec;
  backbone::Backbone backbone;
  /// spms[i] is the SPM before stage i + 1; index N precedes the head. They
  /// take part in forward() and visit() only under prompt_matched.
  std::vector<std::optional<spm::SpmParams>> spms;
  SegHead head;
  Strategy strategy = Strategy::head;
  spm::ClassPrior prior;
  std::vector<BlockModule> modules;  // side / adapter, in backbone block order

  std::uint64_t seed = 0;

  /// Builds SPMs for every requested insertion point and a fresh head; the
  /// strategy starts as head tuning until apply_strategy() is called.
  static Pipeline build(const PipelineSpec& spec, backbone::Backbone backbone, spm::ClassPrior prior,
                        std::uint64_t seed);

  ForwardResult forward(const Tensor& image) const;

  std::size_t insertion_points() const { return spms.size(); }
  /// Active SPM instances.
  std::size_t spm_count() const;

  /// Every tensor of the pipeline with its name and group.
  void visit(const std::function<void(const std::string&, Tensor&, Group)>& fn);
  /// Tensors with requires_grad set.
  std::vector<RegistryEntry> registry();
  std::vector<NamedTensor> named_tensors();
  /// Copies tensors by name; throws CheckpointError on missing names or shape mismatch.
  void load_tensors(const std::vector<NamedTensor>& entries);

  bool prompts_active() const { return strategy == Strategy::prompt_matched; }
};

/// Configures trainability for `strategy` and returns the trainable registry.
/// Throws std::invalid_argument for strategies whose modules cannot be built.
std::vector<RegistryEntry> apply_strategy(Pipeline& pipeline, Strategy strategy);

struct ParamCounts {
  std::size_t backbone = 0;
  std::size_t prompt = 0;
  std::size_t head = 0;
  std::size_t total() const { return backbone + prompt + head; }
  bool operator==(const ParamCounts&) const = default;
};

ParamCounts count_params(const std::vector<RegistryEntry>& registry);

struct LossSpec {
  /// Base interim-map weights per insertion point, divided by R when applied.
  std::vector<double> weights{0.05, 0.1, 0.2, 0.3, 0.4};
  std::size_t iterations = 1;
  std::int32_t ignore_index = kDefaultIgnoreIndex;

  /// a_i for insertion point i (1-based). Throws std::invalid_argument when no
  /// weight is configured for that point.
  double weight(std::size_t point) const;
};

/// CE(logits, target) + sum_i sum_r a_i CE(upsampled interim map, target).
Tensor total_loss(const Tensor& logits, const std::vector<StageMaps>& interim, const LabelMap& target,
                  const LossSpec& spec);

}  // namespace pmss::framework
