#pragma once

#include <torch/torch.h>

#include "corn/geometry.hpp"
#include "corn/model.hpp"

namespace corn {

// Linear-falloff splat kernel: a point centred at c contributes to pixel p with
// weight 1 - |p - c| / falloff when |p - c| <= radius, and 0 otherwise.
struct SplatConfig {
  double radius = 1.5;   // pixels
  double falloff = 3.0;  // M; must be >= radius so weights stay in [0, 1]
  int64_t top_k = 8;     // nearest fragments composited per pixel

  void validate() const;
};

struct ProjectedFeatureMap {
  torch::Tensor features;  // [C, H, W]
  torch::Tensor alpha;     // [H, W] coverage in [0, 1]
  torch::Tensor depth;     // [H, W] depth of the nearest fragment, 0 where empty
};

// Z-buffered alpha over-compositing of a feature cloud into `camera`.
//
// Every valid point becomes a disc of the given radius around its projection.
// Per pixel the top_k fragments nearest the camera (ties broken by point
// index) are composited front to back with alpha = weight * sigmoid(logit).
//
// Gradients flow to features and occupancy logits exactly, and to point
// positions through the derivative of the linear falloff inside the radius;
// the cut-off at |p - c| = radius is treated as having zero derivative.
ProjectedFeatureMap splat(const FeatureCloud& cloud, const Camera& camera, const SplatConfig& cfg);

// Same compositor on pre-projected points. `pixels` [k, 2], `depths` [k],
// `valid` [k] bool, `features` [k, C], `logits` [k].
ProjectedFeatureMap splat_projected(const torch::Tensor& pixels, const torch::Tensor& depths,
                                    const torch::Tensor& valid, const torch::Tensor& features,
                                    const torch::Tensor& logits, ImageSize size,
                                    const SplatConfig& cfg);

struct RefinedImage {
  torch::Tensor rgb;   // [3, H, W] in [0, 1]
  torch::Tensor mask;  // [H, W] in (0, 1)
};

RefinedImage refine(const ProjectedFeatureMap& projected, FieldParameters& params);

struct RenderOutput {
  torch::Tensor rgb;    // [3, H, W]
  torch::Tensor mask;   // [H, W] refiner mask head
  torch::Tensor alpha;  // [H, W] splat coverage
};

// Splat an already built cloud into a target camera and refine it.
RenderOutput render_cloud(const FeatureCloud& cloud, const Camera& target, FieldParameters& params,
                          const SplatConfig& cfg);

// The full view-synthesis function: encode the source view, build the cloud at
// `points`, then render it into `target`.
RenderOutput render(const torch::Tensor& image, const Camera& source, const Camera& target,
                    const PointSet& points, FieldParameters& params, const SplatConfig& cfg);

}  // namespace corn
