#include "corn/reconstruction.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "corn/errors.hpp"

namespace corn {

std::vector<Camera> hemisphere_views(int64_t count, ImageSize size, double distance,
                                     double fov_deg) {
  if (count < 2) throw InvalidInput("reconstruction needs at least two views");
  static constexpr double kElevations[] = {0.0, 10.0, 20.0};
  std::vector<Camera> out;
  for (int64_t i = 0; i < count; ++i) {
    const double step = std::round(static_cast<double>(i) * 36.0 / static_cast<double>(count));
    out.push_back(orbit_camera(step * 10.0, kElevations[i % 3], distance, fov_deg, size));
  }
  return out;
}

OccupancyCloud vote_occupancy(const torch::Tensor& points, const std::vector<Camera>& cameras,
                              const std::vector<torch::Tensor>& masks, double tau) {
  if (cameras.size() != masks.size()) throw InvalidInput("one mask per camera required");
  if (cameras.empty()) throw InvalidInput("no views to vote with");
  if (!(tau >= 0.0 && tau <= 1.0)) throw InvalidInput("tau must lie in [0, 1]");
  const int64_t k = points.size(0);
  auto votes = torch::zeros({k}, torch::kInt64);
  for (size_t v = 0; v < cameras.size(); ++v) {
    const auto size = cameras[v].image_size();
    const auto& mask = masks[v];
    if (mask.dim() != 2 || mask.size(0) != size.height || mask.size(1) != size.width) {
      throw ShapeError("mask does not match its camera's image size");
    }
    const auto proj = project_points(points, cameras[v]);
    auto px = proj.pixels.round().to(torch::kInt64);
    auto u = px.select(1, 0).clamp(0, size.width - 1);
    auto row = px.select(1, 1).clamp(0, size.height - 1);
    auto fg = mask.gt(0.5).index({row, u});
    votes += (fg & proj.valid).to(torch::kInt64);
  }
  OccupancyCloud out;
  out.points = points;
  out.vote_fraction = votes.to(torch::kFloat64) / static_cast<double>(cameras.size());
  out.occupied = out.vote_fraction.ge(tau - 1e-12);
  return out;
}

OccupancyCloud rethreshold(const OccupancyCloud& cloud, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw InvalidInput("tau must lie in [0, 1]");
  OccupancyCloud out = cloud;
  out.occupied = cloud.vote_fraction.ge(tau - 1e-12);
  return out;
}

OccupancyCloud reconstruct(const torch::Tensor& image, const Camera& source,
                           FieldParameters& params, const ReconstructOptions& options) {
  const auto size = source.image_size();
  const auto cameras = hemisphere_views(options.views, size, options.distance, options.fov_deg);
  const auto images = synthesize_sequence(image, source, cameras, params, options.render);
  std::vector<torch::Tensor> masks;
  for (const auto& img : images) masks.push_back(extract_mask(img, options.mask));
  const auto points = sample_cube_points(options.points, options.cube_extent, options.seed);
  return vote_occupancy(points.coords, cameras, masks, options.tau);
}

OccupancyCloud reconstruct_oracle(const SyntheticObject& object, ImageSize size,
                                  const ReconstructOptions& options) {
  const auto cameras = hemisphere_views(options.views, size, options.distance, options.fov_deg);
  std::vector<torch::Tensor> masks;
  for (const auto& cam : cameras) masks.push_back(rasterize(object, cam).mask);
  const auto points = sample_cube_points(options.points, options.cube_extent, options.seed);
  return vote_occupancy(points.coords, cameras, masks, options.tau);
}

double occupancy_iou(const torch::Tensor& a, const torch::Tensor& b) {
  if (!a.sizes().equals(b.sizes())) throw ShapeError("occupancy_iou: shape mismatch");
  auto x = a.to(torch::kBool), y = b.to(torch::kBool);
  const double inter = (x & y).sum().item<double>();
  const double uni = (x | y).sum().item<double>();
  return uni == 0.0 ? 1.0 : inter / uni;
}

void export_pointcloud(const OccupancyCloud& cloud, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  const auto idx = cloud.occupied.nonzero().view({-1});
  auto pts = cloud.points.index_select(0, idx).to(torch::kFloat64).contiguous();
  auto votes = cloud.vote_fraction.index_select(0, idx).contiguous();
  const int64_t n = idx.size(0);
  out << "ply\nformat ascii 1.0\nelement vertex " << n
      << "\nproperty float x\nproperty float y\nproperty float z\nproperty float vote\nend_header\n";
  out.precision(9);
  auto p = pts.accessor<double, 2>();
  auto v = votes.accessor<double, 1>();
  for (int64_t i = 0; i < n; ++i) {
    out << p[i][0] << " " << p[i][1] << " " << p[i][2] << " " << v[i] << "\n";
  }
  if (!out) throw IoError("error writing " + path.string());
}

PlyPoints read_pointcloud(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  int64_t count = -1;
  std::vector<std::string> props;
  if (!std::getline(in, line) || line != "ply") throw IoError(path.string() + ": not a PLY file");
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt != "ascii") throw IoError(path.string() + ": only ASCII PLY is supported");
    } else if (word == "element") {
      std::string name;
      ls >> name >> count;
      if (name != "vertex") throw IoError(path.string() + ": unexpected element " + name);
    } else if (word == "property") {
      std::string type, name;
      ls >> type >> name;
      props.push_back(name);
    } else if (word == "end_header") {
      break;
    }
  }
  if (count < 0) throw IoError(path.string() + ": missing vertex count");
  auto find = [&](const std::string& name) -> int64_t {
    for (size_t i = 0; i < props.size(); ++i) {
      if (props[i] == name) return static_cast<int64_t>(i);
    }
    return -1;
  };
  const int64_t ix = find("x"), iy = find("y"), iz = find("z"), iv = find("vote");
  if (ix < 0 || iy < 0 || iz < 0) throw IoError(path.string() + ": missing x/y/z");
  PlyPoints out{torch::zeros({count, 3}, torch::kFloat64), torch::zeros({count}, torch::kFloat64)};
  auto p = out.points.accessor<double, 2>();
  auto v = out.votes.accessor<double, 1>();
  std::vector<double> row(props.size());
  for (int64_t i = 0; i < count; ++i) {
    for (auto& x : row) {
      if (!(in >> x)) throw IoError(path.string() + ": truncated vertex data");
    }
    p[i][0] = row[ix];
    p[i][1] = row[iy];
    p[i][2] = row[iz];
    v[i] = iv >= 0 ? row[iv] : 1.0;
  }
  return out;
}

}  // namespace corn
