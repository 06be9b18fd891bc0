#pragma once

#include <torch/torch.h>

#include <string>
#include <vector>

#include "corn/geometry.hpp"
#include "corn/networks.hpp"

namespace corn {

struct SceneCodes {
  torch::Tensor global_code;  // [global_dim]
  torch::Tensor spatial_map;  // [spatial_dim, H, W]
};

struct FeatureCloud {
  PointSet points;
  torch::Tensor features;          // [k, feature_dim]
  torch::Tensor occupancy_logits;  // [k]

  int64_t size() const { return points.size(); }
};

// All learned weights, in five named groups whose names are stable across
// save/load: global_encoder, spatial_encoder, field, refiner, discriminator.
class FieldParametersImpl : public torch::nn::Module {
 public:
  explicit FieldParametersImpl(const ModelConfig& cfg, uint64_t seed = 0);

  const ModelConfig& config() const { return cfg_; }

  static const std::vector<std::string>& group_names();
  std::vector<torch::Tensor> group_parameters(const std::string& group) const;
  // Everything except the discriminator.
  std::vector<torch::Tensor> generator_parameters() const;
  std::vector<torch::Tensor> discriminator_parameters() const;

  GlobalEncoder global_encoder{nullptr};
  SpatialDecoder spatial_encoder{nullptr};
  SceneField field{nullptr};
  Refiner refiner{nullptr};
  PatchDiscriminator discriminator{nullptr};

 private:
  ModelConfig cfg_;
};
TORCH_MODULE(FieldParameters);

// Images are [3, H, W] tensors with values in [0, 1]; H and W must equal the
// configured image size.
SceneCodes encode(FieldParameters& params, const torch::Tensor& image);
torch::Tensor encode_global(FieldParameters& params, const torch::Tensor& image);
torch::Tensor encode_spatial(FieldParameters& params, const torch::Tensor& image);

struct FieldOutput {
  torch::Tensor features;          // [k, feature_dim]
  torch::Tensor occupancy_logits;  // [k]
};

// Evaluates the scene function row by row on (z, l_uv, gamma(x)).
FieldOutput field_eval(FieldParameters& params, const torch::Tensor& global_code,
                       const torch::Tensor& local_features, const torch::Tensor& encoded_points);

// Projects the points into the source view, samples the spatial map there and
// evaluates the field. Points that do not project into the image get zero
// local features but are still evaluated.
FeatureCloud build_feature_cloud(FieldParameters& params, const SceneCodes& codes,
                                 const Camera& camera, const PointSet& points);
FeatureCloud build_feature_cloud(FieldParameters& params, const torch::Tensor& image,
                                 const Camera& camera, const PointSet& points);

void check_image(const torch::Tensor& image, int64_t size, const char* what);

// Loads externally supplied encoder weights (a torch archive written from a
// GlobalEncoder with the same backbone layout) into the global encoder.
void load_encoder_weights(FieldParameters& params, const std::string& path);

}  // namespace corn
