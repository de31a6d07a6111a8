#include "pmss/data/metrics.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "pmss/numerics/rng.hpp"

namespace pmss::data {

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes) : k_(num_classes), counts_(num_classes * num_classes, 0) {
  if (num_classes < 1) throw std::invalid_argument("confusion matrix needs at least one class");
}

void ConfusionMatrix::add(const LabelMap& pred, const LabelMap& gt, std::int32_t ignore_index) {
  if (!pred.same_shape(gt))
    throw std::invalid_argument("prediction and ground truth differ in shape");
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const auto g = gt.labels[i];
    if (g == ignore_index) continue;
    const auto p = pred.labels[i];
    if (g < 0 || static_cast<std::size_t>(g) >= k_ || p < 0 || static_cast<std::size_t>(p) >= k_)
      throw std::invalid_argument("label outside [0," + std::to_string(k_) + ") at pixel " + std::to_string(i));
    ++counts_[static_cast<std::size_t>(g) * k_ + static_cast<std::size_t>(p)];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.k_ != k_) throw std::invalid_argument("confusion matrices differ in class count");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::uint64_t ConfusionMatrix::total() const { return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0}); }

std::uint64_t ConfusionMatrix::row_sum(std::size_t gt) const {
  std::uint64_t s = 0;
  for (std::size_t p = 0; p < k_; ++p) s += at(gt, p);
  return s;
}

std::uint64_t ConfusionMatrix::col_sum(std::size_t pred) const {
  std::uint64_t s = 0;
  for (std::size_t g = 0; g < k_; ++g) s += at(g, pred);
  return s;
}

IouReport miou(const ConfusionMatrix& cm) {
  IouReport r;
  const std::size_t k = cm.num_classes();
  r.per_class.assign(k, std::numeric_limits<double>::quiet_NaN());
  double sum = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    const std::uint64_t tp = cm.at(c, c);
    const std::uint64_t fn = cm.row_sum(c) - tp;
    const std::uint64_t fp = cm.col_sum(c) - tp;
    const std::uint64_t denom = tp + fp + fn;
    if (denom == 0) continue;
    r.per_class[c] = static_cast<double>(tp) / static_cast<double>(denom);
    sum += r.per_class[c];
    ++r.present;
  }
  r.mean = r.present ? sum / static_cast<double>(r.present) : 0.0;
  return r;
}

IouReport miou(const LabelMap& pred, const LabelMap& gt, std::size_t num_classes, std::int32_t ignore_index) {
  ConfusionMatrix cm(num_classes);
  cm.add(pred, gt, ignore_index);
  return miou(cm);
}

double dice_from_counts(std::uint64_t tp, std::uint64_t fp, std::uint64_t fn) {
  const std::uint64_t denom = 2 * tp + fp + fn;
  if (denom == 0) return 1.0;
  return static_cast<double>(2 * tp) / static_cast<double>(denom);
}

double dice(const ConfusionMatrix& cm, std::size_t foreground) {
  if (foreground >= cm.num_classes()) throw std::invalid_argument("foreground class out of range");
  const std::uint64_t tp = cm.at(foreground, foreground);
  return dice_from_counts(tp, cm.col_sum(foreground) - tp, cm.row_sum(foreground) - tp);
}

double dice(const LabelMap& pred, const LabelMap& gt, std::int32_t foreground, std::int32_t ignore_index) {
  if (!pred.same_shape(gt)) throw std::invalid_argument("prediction and ground truth differ in shape");
  std::uint64_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt.labels[i] == ignore_index) continue;
    const bool g = gt.labels[i] == foreground;
    const bool p = pred.labels[i] == foreground;
    tp += g && p;
    fp += !g && p;
    fn += g && !p;
  }
  return dice_from_counts(tp, fp, fn);
}

LabelMap argmax_channels(const Tensor& scores) {
  if (scores.rank() != 4) throw ShapeError("argmax_channels expects N x K x H x W, got " + shape_str(scores.shape()));
  const std::size_t n = scores.dim(0), k = scores.dim(1), h = scores.dim(2), w = scores.dim(3);
  LabelMap out(n, h, w);
  const auto d = scores.data();
  const std::size_t plane = h * w;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < plane; ++i) {
      std::size_t best = 0;
      double best_v = d[b * k * plane + i];
      for (std::size_t c = 1; c < k; ++c) {
        const double v = d[(b * k + c) * plane + i];
        if (v > best_v) {
          best_v = v;
          best = c;
        }
      }
      out.labels[b * plane + i] = static_cast<std::int32_t>(best);
    }
  return out;
}

OneShotSplit one_shot_split(std::size_t n, std::uint64_t seed, std::size_t repetition) {
  if (n < 2) throw std::invalid_argument("one-shot split needs at least 2 samples, got " + std::to_string(n));
  // A seeded permutation; repetition r takes its r-th element.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix_seed(seed, 0x05e7));
  for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
  OneShotSplit s;
  s.train = order[repetition % n];
  for (std::size_t i = 0; i < n; ++i)
    if (i != s.train) s.test.push_back(i);
  return s;
}

MeanStd mean_std(const std::vector<double>& values) {
  if (values.empty()) throw std::invalid_argument("mean_std of an empty list");
  MeanStd r;
  r.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - r.mean) * (v - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return r;
}

std::string format_mean_std(const MeanStd& ms, int decimals) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(decimals);
  os << ms.mean << "±" << ms.std;
  return os.str();
}

}  // namespace pmss::data
