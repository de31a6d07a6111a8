#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pmss/data/label_map.hpp"
#include "pmss/numerics/tensor.hpp"

namespace pmss::data {

/// K x K integer confusion counts, rows = ground truth, columns = prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes);

  /// Accumulates every non-ignored pixel. Throws std::invalid_argument on shape
  /// mismatch or labels outside [0, K).
  void add(const LabelMap& pred, const LabelMap& gt, std::int32_t ignore_index = kDefaultIgnoreIndex);
  void merge(const ConfusionMatrix& other);

  std::size_t num_classes() const { return k_; }
  std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts_[gt * k_ + pred]; }
  std::uint64_t total() const;
  std::uint64_t row_sum(std::size_t gt) const;
  std::uint64_t col_sum(std::size_t pred) const;

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

struct IouReport {
  /// IoU per class; classes absent from both prediction and ground truth hold NaN.
  std::vector<double> per_class;
  /// Mean over present classes.
  double mean = 0.0;
  std::size_t present = 0;
};

IouReport miou(const ConfusionMatrix& cm);
IouReport miou(const LabelMap& pred, const LabelMap& gt, std::size_t num_classes,
               std::int32_t ignore_index = kDefaultIgnoreIndex);

/// Dice on one foreground class; the empty-prediction, empty-ground-truth case is 1.
double dice(const ConfusionMatrix& cm, std::size_t foreground);
double dice(const LabelMap& pred, const LabelMap& gt, std::int32_t foreground,
            std::int32_t ignore_index = kDefaultIgnoreIndex);
double dice_from_counts(std::uint64_t tp, std::uint64_t fp, std::uint64_t fn);

/// Per-pixel argmax over channels of an N x K x H x W tensor.
LabelMap argmax_channels(const Tensor& scores);

struct OneShotSplit {
  std::size_t train = 0;
  std::vector<std::size_t> test;
};

/// Selects one training sample for repetition `repetition`. Repetitions of one
/// seed draw distinct indices while repetition < n.
OneShotSplit one_shot_split(std::size_t n, std::uint64_t seed, std::size_t repetition = 0);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1), 0 for a single value
};

MeanStd mean_std(const std::vector<double>& values);
/// "76.07±0.57" with two decimals.
std::string format_mean_std(const MeanStd& ms, int decimals = 2);

}  // namespace pmss::data
