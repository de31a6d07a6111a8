#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pmss/data/label_map.hpp"
#include "pmss/numerics/tensor.hpp"

namespace pmss::data {

enum class ShapeKind { disk, rectangle, triangle, curve };

std::string to_string(ShapeKind kind);
ShapeKind shape_kind_from(const std::string& name);

struct ClassAppearance {
  std::array<double, 3> color{};
  ShapeKind shape = ShapeKind::disk;
};

/// Procedural segmentation task description. Identical specs generate
/// bitwise-identical datasets; sample i is seeded from (seed, i) alone.
struct SynthSpec {
  std::uint64_t seed = 0;
  std::size_t size = 64;
  std::size_t num_classes = 5;  // class 0 is background
  std::size_t min_shapes = 2;
  std::size_t max_shapes = 4;
  /// Appearance of foreground class c at index c - 1.
  std::vector<ClassAppearance> classes;
  int texture = 0;  // background texture family: 0 smooth waves, 1 stripes
  double color_jitter = 0.08;
  double noise = 0.04;
  std::size_t n_train = 256;
  std::size_t n_val = 64;

  /// 64x64, K=5 (disk, rectangle, triangle, thin curve), 256/64 split. All
  /// foreground classes share one color, so only shape separates them.
  static SynthSpec downstream();
  /// Same shape vocabulary with distinct per-class colors and striped background.
  static SynthSpec source();
  /// Binary vessel-like curves for the one-shot protocol.
  static SynthSpec thin_structure();

  void validate() const;
};

void to_json(nlohmann::json& j, const SynthSpec& s);
void from_json(const nlohmann::json& j, SynthSpec& s);

struct Sample {
  Tensor image;    // 1 x 3 x H x W, values roughly in [0, 1]
  LabelMap label;  // 1 x H x W
};

struct Dataset {
  SynthSpec spec;
  std::vector<Sample> train;
  std::vector<Sample> val;
};

Sample generate_sample(const SynthSpec& spec, std::size_t index);
Dataset generate(const SynthSpec& spec);

struct Batch {
  Tensor images;
  LabelMap labels;
};

Batch make_batch(std::span<const Sample> samples, std::span<const std::size_t> indices);
Batch make_batch(std::span<const Sample> samples);

/// Deterministic byte serialization (checkpoint entry encoding) used for hashing.
std::string serialize(const Dataset& ds);

}  // namespace pmss::data
