#pragma once

#include <functional>
#include <optional>
#include <stdexcept>
#include <vector>

#include "json.hpp"
#include "pmss/data/metrics.hpp"
#include "pmss/data/synth.hpp"
#include "pmss/framework/pipeline.hpp"

namespace pmss::framework {

/// Raised when the loss turns non-finite; names the first non-finite tensor.
class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(std::string tensor, std::size_t step);
  const std::string& tensor() const { return tensor_; }
  std::size_t step() const { return step_; }

 private:
  std::string tensor_;
  std::size_t step_;
};

struct TrainOptions {
  std::size_t steps = 300;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::size_t batch = 8;
  std::uint64_t seed = 0;
  /// Evaluate every `eval_every` steps (0: only after the last step).
  std::size_t eval_every = 0;
  /// Validation samples used for periodic evaluation (0: all).
  std::size_t eval_samples = 0;
  /// Joint gradient-norm ceiling applied before each update (0: no clipping).
  double grad_clip = 0.0;
  /// Learning-rate multiplier for prompt-group tensors.
  double prompt_lr_mult = 1.0;
  /// Foreground class for Dice (negative: no Dice).
  std::int32_t dice_class = -1;
};

struct TrainRecord {
  std::size_t step = 0;
  double loss = 0.0;
  std::optional<double> miou;
  std::optional<double> dice;
};

void to_json(nlohmann::json& j, const TrainRecord& r);

struct EvalResult {
  data::IouReport iou;
  std::optional<double> dice;
  data::ConfusionMatrix confusion{2};
};

struct TrainReport {
  std::vector<TrainRecord> records;
  EvalResult final_eval;
  double initial_loss() const { return records.empty() ? 0.0 : records.front().loss; }
  double final_loss() const { return records.empty() ? 0.0 : records.back().loss; }
};

using RecordSink = std::function<void(const TrainRecord&)>;

/// Deterministic SGD over the pipeline's trainable registry on dataset.train;
/// evaluation runs on dataset.val (or the training split when val is empty).
TrainReport train(Pipeline& pipeline, const data::Dataset& dataset, const TrainOptions& opts, const LossSpec& loss,
                  const RecordSink& sink = {});

/// Batched, tape-free evaluation over `samples` (the first `limit` when non-zero).
EvalResult evaluate(const Pipeline& pipeline, const std::vector<data::Sample>& samples, std::size_t limit = 0,
                    std::int32_t dice_class = -1, std::size_t batch = 8);

}  // namespace pmss::framework
