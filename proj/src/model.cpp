#include "corn/model.hpp"

#include <filesystem>
#include <sstream>

#include "corn/errors.hpp"

namespace corn {

FieldParametersImpl::FieldParametersImpl(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  torch::manual_seed(seed);
  global_encoder = register_module("global_encoder", GlobalEncoder(cfg_));
  spatial_encoder =
      register_module("spatial_encoder", SpatialDecoder(cfg_, global_encoder->stage_channels()));
  field = register_module("field", SceneField(cfg_));
  refiner = register_module("refiner", Refiner(cfg_));
  discriminator = register_module("discriminator", PatchDiscriminator(cfg_));
}

const std::vector<std::string>& FieldParametersImpl::group_names() {
  static const std::vector<std::string> names{"global_encoder", "spatial_encoder", "field",
                                              "refiner", "discriminator"};
  return names;
}

std::vector<torch::Tensor> FieldParametersImpl::group_parameters(const std::string& group) const {
  for (const auto& child : named_children()) {
    if (child.key() == group) return child.value()->parameters();
  }
  throw InvalidInput("unknown parameter group '" + group + "'");
}

std::vector<torch::Tensor> FieldParametersImpl::generator_parameters() const {
  std::vector<torch::Tensor> out;
  for (const auto& name : group_names()) {
    if (name == "discriminator") continue;
    auto p = group_parameters(name);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

std::vector<torch::Tensor> FieldParametersImpl::discriminator_parameters() const {
  return group_parameters("discriminator");
}

void check_image(const torch::Tensor& image, int64_t size, const char* what) {
  if (image.dim() != 3 || image.size(0) != 3 || image.size(1) != size || image.size(2) != size) {
    std::ostringstream msg;
    msg << what << " must be [3, " << size << ", " << size << "], got " << image.sizes();
    throw ShapeError(msg.str());
  }
}

SceneCodes encode(FieldParameters& params, const torch::Tensor& image) {
  check_image(image, params->config().image_size, "input image");
  auto batch = image.unsqueeze(0);
  auto global = params->global_encoder->forward(batch);
  auto spatial = params->spatial_encoder->forward(global.skips, batch);
  return {global.code.squeeze(0), spatial.squeeze(0)};
}

torch::Tensor encode_global(FieldParameters& params, const torch::Tensor& image) {
  check_image(image, params->config().image_size, "input image");
  return params->global_encoder->forward(image.unsqueeze(0)).code.squeeze(0);
}

torch::Tensor encode_spatial(FieldParameters& params, const torch::Tensor& image) {
  return encode(params, image).spatial_map;
}

FieldOutput field_eval(FieldParameters& params, const torch::Tensor& global_code,
                       const torch::Tensor& local_features, const torch::Tensor& encoded_points) {
  const auto& cfg = params->config();
  if (global_code.dim() != 1 || global_code.size(0) != cfg.global_dim) {
    throw ShapeError("global code must have width " + std::to_string(cfg.global_dim));
  }
  if (local_features.dim() != 2 || local_features.size(1) != cfg.spatial_dim) {
    throw ShapeError("local features must be [k, " + std::to_string(cfg.spatial_dim) + "]");
  }
  if (encoded_points.dim() != 2 || encoded_points.size(1) != encoding_width(cfg.encoding_levels)) {
    throw ShapeError("encoded points must be [k, " +
                     std::to_string(encoding_width(cfg.encoding_levels)) + "]");
  }
  const int64_t k = local_features.size(0);
  if (encoded_points.size(0) != k) throw ShapeError("local features and points disagree on k");

  auto inputs = torch::cat({global_code.unsqueeze(0).expand({k, cfg.global_dim}), local_features,
                            encoded_points},
                           1);
  auto [features, logits] = params->field->forward(inputs);
  return {features, logits};
}

FeatureCloud build_feature_cloud(FieldParameters& params, const SceneCodes& codes,
                                 const Camera& camera, const PointSet& points) {
  const auto size = camera.image_size();
  if (size.height != codes.spatial_map.size(1) || size.width != codes.spatial_map.size(2)) {
    throw ShapeError("camera image size does not match the spatial feature map");
  }
  auto coords = points.coords.to(codes.spatial_map.scalar_type());
  auto proj = project_points(coords, camera);
  auto local = bilinear_sample(codes.spatial_map, proj.pixels);
  local = local * proj.valid.unsqueeze(1).to(local.scalar_type());
  auto encoded = positional_encode(coords, params->config().encoding_levels);
  auto out = field_eval(params, codes.global_code, local, encoded);
  return {points, out.features, out.occupancy_logits};
}

FeatureCloud build_feature_cloud(FieldParameters& params, const torch::Tensor& image,
                                 const Camera& camera, const PointSet& points) {
  return build_feature_cloud(params, encode(params, image), camera, points);
}

void load_encoder_weights(FieldParameters& params, const std::string& path) {
  if (!std::filesystem::exists(path)) throw IoError("encoder weights not found: " + path);
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(path);
    params->global_encoder->load(archive);
  } catch (const c10::Error& e) {
    throw IoError("cannot load encoder weights from " + path + ": " + e.what_without_backtrace());
  }
}

}  // namespace corn
