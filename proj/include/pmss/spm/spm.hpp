#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pmss/data/label_map.hpp"
#include "pmss/numerics/layers.hpp"
#include "pmss/numerics/tensor.hpp"

namespace pmss::spm {

/// Empirical class frequencies of a training set; a point on the K-simplex.
struct ClassPrior {
  std::vector<double> probs;
};

/// probs[c] = pixels labeled c / non-ignored pixels. Throws std::invalid_argument
/// when no pixel is counted or a label is outside [0, K).
ClassPrior class_prior(std::span<const LabelMap> labels, std::size_t num_classes,
                       std::int32_t ignore_index = kDefaultIgnoreIndex);

/// Spatially uniform N x K x H x W map equal to prior.probs at every pixel.
Tensor init_m0(const ClassPrior& prior, std::size_t n, std::size_t h, std::size_t w);

/// Per-sample class vector N x K x 1 x 1 (the recognition-mode V0).
Tensor init_v0(const ClassPrior& prior, std::size_t n);

struct SpmConfig {
  std::size_t feature_channels = 0;  // C_f of the host stage boundary
  std::size_t num_classes = 0;       // K
  std::size_t channels = 256;        // C
  /// Groups of the PDC 3x3 layers; 0 selects 16 when C/4 >= 16, else C/4.
  std::size_t pdc_groups = 0;
  std::array<std::size_t, 4> dilations{1, 2, 3, 4};
  /// Rectifier after each dilated conv inside PDC.
  bool pdc_relu = true;
  /// Groups of the branch input 1x1 layers ((C_f + K) -> C).
  std::size_t in_groups = 1;

  std::size_t resolved_pdc_groups() const;
  /// Throws std::invalid_argument naming the violated divisibility rule.
  void validate() const;
};

void to_json(nlohmann::json& j, const SpmConfig& c);

struct PdcParams {
  std::array<ConvLayer, 4> branches;
  ConvLayer fuse;
  bool relu = true;

  static PdcParams make(std::size_t channels, std::size_t groups, const std::array<std::size_t, 4>& dilations,
                        bool relu, Rng& rng);
  void visit(const std::string& prefix, const TensorVisitor& fn);
  std::size_t param_count() const;
};

/// Shared parameters theta of one SPM instance, used by every iteration.
struct SpmParams {
  SpmConfig config;
  ConvLayer b1_in;   // 1x1, (C_f + K) -> C
  PdcParams b1_pdc;
  ConvLayer b1_out;  // 1x1, C -> K
  ConvLayer b2_in;   // 1x1, (C_f + K) -> C
  PdcParams b2_pdc;
  ConvLayer b2_out;  // 1x1, C -> C_f, zero-initialized

  static SpmParams make(const SpmConfig& config, Rng& rng);
  /// Visits "<prefix>.b1_in.weight", "<prefix>.b1_pdc.d1.weight", ...
  void visit(const std::string& prefix, const TensorVisitor& fn);
  std::vector<Tensor> tensors();
  std::size_t param_count() const;
};

/// Split into four channel chunks, dilated 3x3 conv per chunk, concat, 1x1 fuse.
Tensor pdc(const Tensor& x, const PdcParams& params);

/// Softmax(Conv1x1(PDC(Conv1x1(F (+) M)))). F and M must share spatial size.
Tensor refine_map(const Tensor& feature, const Tensor& map, const SpmParams& params);

struct Prompt {
  Tensor feature;  // F + P
  Tensor prompt;   // P = F (x) W
  Tensor weight;   // W
};

/// W = Conv1x1(PDC(Conv1x1(F (+) M))), P = F (x) W, F_new = F + P.
Prompt generate_prompt(const Tensor& feature, const Tensor& map, const SpmParams& params);

struct SpmOutput {
  Tensor feature;
  Tensor map;
  std::vector<Tensor> interim;  // one refined map per iteration
};

/// R weight-shared iterations of (refine_map, generate_prompt). The incoming
/// map is bilinearly resized to the feature's spatial size first.
SpmOutput spm_forward(const Tensor& feature, const Tensor& map, const SpmParams& params, std::size_t iterations);

/// Recognition-mode branch 1: Conv1x1(expand(V) (+) F) -> PDC -> global max pool
/// -> fully connected (b1_out) -> softmax, giving N x K x 1 x 1.
Tensor refine_vector(const Tensor& feature, const Tensor& vector, const SpmParams& params);

struct RecognitionOutput {
  Tensor feature;
  Tensor vector;
  std::vector<Tensor> interim;
};

RecognitionOutput spm_forward_recognition(const Tensor& feature, const Tensor& vector, const SpmParams& params,
                                          std::size_t iterations);

}  // namespace pmss::spm
