#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "corn/config.hpp"
#include "corn/dataset.hpp"
#include "corn/model.hpp"
#include "corn/renderer.hpp"

namespace corn {

// Mean absolute difference over all pixels and channels of two [3, H, W]
// images with values in [0, 1].
double metric_l1(const torch::Tensor& a, const torch::Tensor& b);

// Single-scale SSIM on the luma of two [3, H, W] images (or [H, W] gray):
// 11x11 Gaussian window with sigma 1.5 evaluated at every position where it
// fits entirely, K1 = 0.01, K2 = 0.03, dynamic range 1.
double metric_ssim(const torch::Tensor& a, const torch::Tensor& b);

inline constexpr int64_t kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;

// External perceptual scorer. Receives two [3, H, W] images and returns a
// distance. Absent by default.
using PerceptualScorer = std::function<double(const torch::Tensor&, const torch::Tensor&)>;

// Runs `command <a.png> <b.png>` and parses the first number on its stdout.
PerceptualScorer external_scorer(const std::string& command);

// Sample points and splat settings used whenever a trained model renders.
struct RenderSettings {
  int64_t points = 4096;
  double cube_extent = 1.0;
  uint64_t point_seed = 0;
  SplatConfig splat;
};

// Encodes the source once and renders every pose. Puts `params` in eval mode.
std::vector<torch::Tensor> synthesize_sequence(const torch::Tensor& image, const Camera& source,
                                               const std::vector<Camera>& poses,
                                               FieldParameters& params,
                                               const RenderSettings& settings = {});

struct PairScore {
  std::string object_id;
  int64_t source_view = 0;
  int64_t target_view = 0;
  double l1 = 0.0;
  double ssim = 0.0;
  double baseline_l1 = 0.0;  // untransformed source image scored as the prediction
  double baseline_ssim = 0.0;
  std::optional<double> lpips;
};

struct MetricSummary {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
};

struct EvalReport {
  std::vector<PairScore> pairs;
  MetricSummary l1, ssim, baseline_l1, baseline_ssim;
  std::optional<MetricSummary> lpips;  // unset when no scorer was supplied
  double win_fraction = 0.0;           // pairs where the model's L1 beats the baseline's
  KeyValues config;

  size_t pair_count() const { return pairs.size(); }
  std::string to_json() const;
  std::string to_csv() const;
};

// Recomputes every aggregate from `pairs`. Aggregates do not depend on pair order.
void summarize(EvalReport& report);

struct EvalOptions {
  int64_t pairs = 200;
  uint64_t seed = 0;
  std::string split = "test";
  RenderSettings render;
  PerceptualScorer lpips;
};

// Samples (object, source view, distinct target view) triples uniformly from
// the split, renders the target from the source and scores it.
EvalReport evaluate(const Dataset& dataset, FieldParameters& params, const EvalOptions& options);

// Writes report JSON to `json_path` and the per-pair CSV next to it.
void write_report(const EvalReport& report, const std::filesystem::path& json_path);

}  // namespace corn
