#pragma once

#include <torch/torch.h>

#include <Eigen/Core>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "corn/geometry.hpp"

namespace corn {

// ---------------------------------------------------------------------------
// Viewing grid: equally spaced azimuths over 360 degrees times a list of
// elevations. View index = elevation_index * azimuth_steps + azimuth_index.

struct ViewGrid {
  int64_t azimuth_steps = 36;
  std::vector<double> elevations{0.0, 10.0, 20.0};
  double distance = 2.8;
  double fov_deg = 40.0;

  int64_t size() const { return azimuth_steps * static_cast<int64_t>(elevations.size()); }
  double azimuth(int64_t index) const;
  double elevation(int64_t index) const;
  Camera camera(int64_t index, ImageSize size) const;
};

// ---------------------------------------------------------------------------
// Synthetic primitives. Spheres are coloured per quadrant (sign of local x
// and z), boxes per face in the order +x, -x, +y, -y, +z, -z.

struct SpherePrimitive {
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  double radius = 0.5;
  std::array<Eigen::Vector3d, 4> colors;
};

struct BoxPrimitive {
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d half = Eigen::Vector3d::Constant(0.4);
  std::array<Eigen::Vector3d, 6> colors;
};

using Primitive = std::variant<SpherePrimitive, BoxPrimitive>;

struct SyntheticObject {
  std::string kind;  // sphere, box, box+sphere, box+box
  std::vector<Primitive> parts;
};

struct RayHit {
  double t = 0.0;
  Eigen::Vector3d normal;
  Eigen::Vector3d albedo;
};

// Nearest intersection of origin + t * direction (t > 0) with the object.
std::optional<RayHit> intersect(const SyntheticObject& object, const Eigen::Vector3d& origin,
                                const Eigen::Vector3d& direction);

struct RasterizedView {
  torch::Tensor image;  // [3, H, W]
  torch::Tensor mask;   // [H, W], 1 where a primitive is hit
  torch::Tensor depth;  // [H, W], camera-frame z of the hit, 0 on background
};

// One ray per pixel centre, exact analytic intersection, flat albedo with a
// single directional Lambert light.
RasterizedView rasterize(const SyntheticObject& object, const Camera& camera,
                         double background = 1.0);

// Deterministic random object; kinds cycle with the index. The result fits
// inside [-0.7, 0.7]^3 and a ball of radius 0.85.
SyntheticObject make_object(int64_t index, uint64_t seed);

// ---------------------------------------------------------------------------
// On-disk layout
//
//   root/manifest.json
//   root/<object_id>/cameras.json        {"views": [{"image", "mask", "intrinsics" (9, row-major),
//                                          "extrinsics" (12, row-major, world-to-camera),
//                                          "image_size" [H, W]}, ...]}
//   root/<object_id>/view_%03d.png       8-bit RGB
//   root/<object_id>/mask_%03d.png       8-bit gray, 255 = foreground

struct SyntheticConfig {
  int64_t objects = 20;
  int64_t heldout = 0;  // additional objects marked split=test
  int64_t resolution = 32;
  ViewGrid grid;
  uint64_t seed = 0;

  std::string canonical() const;
  std::string hash() const;
};

struct ObjectEntry {
  std::string id;
  std::string split = "train";
  std::string kind;
  std::optional<SyntheticObject> shape;  // known for generated data
  std::vector<std::string> image_files;
  std::vector<std::string> mask_files;  // empty entries: mask is extracted on load
  std::vector<Camera> cameras;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ObjectEntry> objects;
  std::string generator_hash;
  std::optional<ViewGrid> grid;
};

DatasetManifest generate_synthetic(const SyntheticConfig& config,
                                   const std::filesystem::path& out_dir);

// ---------------------------------------------------------------------------

struct ViewRecord {
  torch::Tensor image;  // [3, H, W]
  Camera camera;
  torch::Tensor mask;  // [H, W] in {0, 1}
};

struct ObjectRecord {
  std::string object_id;
  std::vector<ViewRecord> views;
};

// Thread-safe record of every image read performed through a Dataset.
class AccessLog {
 public:
  struct Entry {
    std::string object_id;
    int64_t view = 0;
  };
  void record(const std::string& object_id, int64_t view);
  std::vector<Entry> entries() const;
  void clear();

 private:
  mutable std::mutex mutex_;
  std::vector<Entry> entries_;
};

class Dataset {
 public:
  // Reads root/manifest.json, or, when absent, treats every sub-directory
  // holding a cameras.json as one object.
  static Dataset open(const std::filesystem::path& root);

  const DatasetManifest& manifest() const { return manifest_; }
  size_t object_count() const { return manifest_.objects.size(); }
  const ObjectEntry& object(size_t index) const { return manifest_.objects.at(index); }
  std::vector<size_t> split_indices(const std::string& split) const;

  size_t view_count(size_t object) const { return this->object(object).cameras.size(); }
  // Camera access does not touch image data and is not logged.
  const Camera& camera(size_t object, size_t view) const;
  ViewRecord load_view(size_t object, size_t view) const;
  ObjectRecord load_object(size_t object) const;

  void set_access_log(std::shared_ptr<AccessLog> log) { log_ = std::move(log); }

 private:
  DatasetManifest manifest_;
  std::shared_ptr<AccessLog> log_;
};

// Streams every object of the dataset in manifest order.
class RecordStream {
 public:
  explicit RecordStream(Dataset dataset) : dataset_(std::move(dataset)) {}
  std::optional<ObjectRecord> next();

 private:
  Dataset dataset_;
  size_t position_ = 0;
};

RecordStream load_dataset(const std::filesystem::path& root);

// Single-camera JSON files: {"intrinsics": [9], "extrinsics": [12], "image_size": [H, W]}.
Camera read_camera_file(const std::filesystem::path& path);
void write_camera_file(const std::filesystem::path& path, const Camera& camera);

// ---------------------------------------------------------------------------

struct MaskConfig {
  std::array<double, 3> background{1.0, 1.0, 1.0};
  double threshold = 0.05;  // Euclidean RGB distance
};

// Foreground = pixels farther than the threshold from the background colour,
// followed by a 3x3 morphological closing. Returns [H, W] in {0, 1}.
torch::Tensor extract_mask(const torch::Tensor& image, const MaskConfig& cfg = {});

}  // namespace corn
