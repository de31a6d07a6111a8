#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace pmss {

inline constexpr std::int32_t kDefaultIgnoreIndex = 255;

/// Per-pixel integer labels, N x H x W, values in [0, K) or ignore_index.
struct LabelMap {
  std::size_t n = 0;
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<std::int32_t> labels;

  LabelMap() = default;
  LabelMap(std::size_t n_, std::size_t h_, std::size_t w_, std::int32_t fill = 0)
      : n(n_), h(h_), w(w_), labels(n_ * h_ * w_, fill) {}

  std::size_t size() const { return labels.size(); }
  std::int32_t at(std::size_t b, std::size_t y, std::size_t x) const { return labels[(b * h + y) * w + x]; }
  std::int32_t& at(std::size_t b, std::size_t y, std::size_t x) { return labels[(b * h + y) * w + x]; }

  bool same_shape(const LabelMap& o) const { return n == o.n && h == o.h && w == o.w; }

  /// Throws std::invalid_argument naming the first label outside [0, K) u {ignore}.
  void validate(std::size_t num_classes, std::int32_t ignore_index) const {
    if (labels.size() != n * h * w) throw std::invalid_argument("label map size does not match its extents");
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const auto v = labels[i];
      if (v == ignore_index) continue;
      if (v < 0 || static_cast<std::size_t>(v) >= num_classes)
        throw std::invalid_argument("label " + std::to_string(v) + " at index " + std::to_string(i) +
                                    " outside [0," + std::to_string(num_classes) + ")");
    }
  }
};

}  // namespace pmss
