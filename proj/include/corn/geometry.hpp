#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <random>

namespace corn {

struct ImageSize {
  int64_t height = 0;
  int64_t width = 0;

  bool operator==(const ImageSize&) const = default;
};

// Points at or closer than this camera-frame depth are treated as behind the camera.
inline constexpr double kMinDepth = 1e-4;

// Pinhole camera. Matrices are stored in double precision:
//   intrinsics  3x3, row 3 = (0, 0, 1)
//   extrinsics  3x4 world-to-camera [R | t], R a proper rotation
// Pixel convention: u to the right, v downward, origin at the centre of the
// top-left pixel. Camera frame: x right, y down, z forward.
class Camera {
 public:
  Camera(torch::Tensor intrinsics, torch::Tensor extrinsics, ImageSize size);

  static Camera from_row_major(const std::array<double, 9>& intrinsics,
                               const std::array<double, 12>& extrinsics, ImageSize size);

  const torch::Tensor& intrinsics() const { return intrinsics_; }
  const torch::Tensor& extrinsics() const { return extrinsics_; }
  torch::Tensor rotation() const { return extrinsics_.slice(1, 0, 3); }
  torch::Tensor translation() const { return extrinsics_.select(1, 3); }
  ImageSize image_size() const { return size_; }

  // Camera centre in world coordinates, -R^T t.
  torch::Tensor center() const;

  std::array<double, 9> intrinsics_row_major() const;
  std::array<double, 12> extrinsics_row_major() const;

  Camera with_extrinsics(torch::Tensor extrinsics) const;

  bool operator==(const Camera& other) const;

 private:
  torch::Tensor intrinsics_;
  torch::Tensor extrinsics_;
  ImageSize size_;
};

// Camera on a sphere of radius `distance` around the origin, looking at the
// origin with world +y up. Azimuth 0 / elevation 0 sits on the +z axis (the
// canonical frontal view); azimuth 90 lies on the +x axis.
Camera orbit_camera(double azimuth_deg, double elevation_deg, double distance,
                    double fov_deg, ImageSize size);

// k world points inside the cube [-extent, extent]^3.
struct PointSet {
  torch::Tensor coords;  // [k, 3]
  double extent = 1.0;

  PointSet(torch::Tensor coords, double extent);
  int64_t size() const { return coords.size(0); }
};

struct Projection {
  torch::Tensor pixels;  // [k, 2] (u, v); differentiable w.r.t. the points
  torch::Tensor depths;  // [k] camera-frame z
  torch::Tensor valid;   // [k] bool: depth > kMinDepth and pixel inside [0,W) x [0,H)
};

Projection project_points(const torch::Tensor& points, const Camera& camera);

// Rigid transforms are 3x4 [R | t] double tensors acting as x -> R x + t.

// Maps coordinates expressed in the `from` camera frame into the `to` camera frame.
torch::Tensor relative_transform(const torch::Tensor& from_extrinsics,
                                 const torch::Tensor& to_extrinsics);

// Applies `first`, then `second`.
torch::Tensor compose_rigid(const torch::Tensor& first, const torch::Tensor& second);

torch::Tensor identity_rigid();

// Bilinear interpolation of a [C, H, W] map at continuous pixel positions.
// Samples outside [0, W-1] x [0, H-1] return zero features. Differentiable
// with respect to both the map and the pixel positions.
torch::Tensor bilinear_sample(const torch::Tensor& feature_map, const torch::Tensor& pixels);

// Per coordinate: sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{L-1} pi x), cos(2^{L-1} pi x).
// Output is [k, 3 * 2L], coordinate-major.
torch::Tensor positional_encode(const torch::Tensor& points, int64_t levels);

inline int64_t encoding_width(int64_t levels) { return 3 * 2 * levels; }

PointSet sample_cube_points(int64_t k, double extent, uint64_t seed);
PointSet sample_cube_points(int64_t k, double extent, std::mt19937_64& rng);

}  // namespace corn
