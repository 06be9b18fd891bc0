#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <vector>

#include "corn/dataset.hpp"
#include "corn/evaluation.hpp"
#include "corn/geometry.hpp"
#include "corn/model.hpp"

namespace corn {

struct OccupancyCloud {
  torch::Tensor points;         // [k, 3] float32
  torch::Tensor occupied;       // [k] bool, vote_fraction >= tau
  torch::Tensor vote_fraction;  // [k] float64 in [0, 1]

  int64_t size() const { return points.size(0); }
  int64_t occupied_count() const { return occupied.sum().item<int64_t>(); }
};

// N cameras around the object: azimuth round(i * 36 / N) * 10 degrees,
// elevation cycling through 0, 10, 20 degrees.
std::vector<Camera> hemisphere_views(int64_t count, ImageSize size, double distance = 2.8,
                                     double fov_deg = 40.0);

// A point votes foreground in a view when it projects validly and the mask
// pixel nearest its projection is set. Invalid projections vote background.
OccupancyCloud vote_occupancy(const torch::Tensor& points, const std::vector<Camera>& cameras,
                              const std::vector<torch::Tensor>& masks, double tau = 1.0);

// Occupied set with a different threshold; never re-projects.
OccupancyCloud rethreshold(const OccupancyCloud& cloud, double tau);

struct ReconstructOptions {
  int64_t views = 15;
  int64_t points = 100000;
  double cube_extent = 1.0;
  uint64_t seed = 0;
  double tau = 1.0;
  double distance = 2.8;
  double fov_deg = 40.0;
  RenderSettings render;  // used for view synthesis
  MaskConfig mask;
};

// Synthesizes the views from one image with the trained model, extracts their
// masks and votes.
OccupancyCloud reconstruct(const torch::Tensor& image, const Camera& source,
                           FieldParameters& params, const ReconstructOptions& options = {});

// Visual hull of a synthetic object from its exact rasterized silhouettes.
OccupancyCloud reconstruct_oracle(const SyntheticObject& object, ImageSize size,
                                  const ReconstructOptions& options = {});

// Intersection over union of two boolean occupancy vectors.
double occupancy_iou(const torch::Tensor& a, const torch::Tensor& b);

// Occupied points as ASCII PLY with float x, y, z and a float `vote` property.
void export_pointcloud(const OccupancyCloud& cloud, const std::filesystem::path& path);

struct PlyPoints {
  torch::Tensor points;  // [n, 3]
  torch::Tensor votes;   // [n]
};
PlyPoints read_pointcloud(const std::filesystem::path& path);

}  // namespace corn
