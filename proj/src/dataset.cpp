#include "corn/dataset.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include "corn/errors.hpp"
#include "corn/image_io.hpp"
#include "json.hpp"

namespace corn {
namespace {

using json = nlohmann::json;
using Eigen::Vector3d;

constexpr double kHitEpsilon = 1e-9;
constexpr double kAmbient = 0.45;
constexpr double kDiffuse = 0.55;

const Vector3d& light_direction() {
  static const Vector3d dir = Vector3d(0.4, 0.9, 0.7).normalized();
  return dir;
}

std::optional<RayHit> hit_sphere(const SpherePrimitive& s, const Vector3d& o, const Vector3d& d) {
  const Vector3d oc = o - s.center;
  const double b = oc.dot(d);
  const double c = oc.squaredNorm() - s.radius * s.radius;
  const double disc = b * b - c;
  if (disc < 0.0) return std::nullopt;
  const double root = std::sqrt(disc);
  double t = -b - root;
  if (t <= kHitEpsilon) t = -b + root;
  if (t <= kHitEpsilon) return std::nullopt;
  const Vector3d local = o + t * d - s.center;
  const int quadrant = (local.x() >= 0.0 ? 1 : 0) + (local.z() >= 0.0 ? 2 : 0);
  return RayHit{t, local / s.radius, s.colors[quadrant]};
}

std::optional<RayHit> hit_box(const BoxPrimitive& b, const Vector3d& o, const Vector3d& d) {
  double t_enter = -std::numeric_limits<double>::infinity();
  double t_exit = std::numeric_limits<double>::infinity();
  int enter_axis = -1;
  int exit_axis = -1;
  for (int axis = 0; axis < 3; ++axis) {
    const double lo = b.center[axis] - b.half[axis];
    const double hi = b.center[axis] + b.half[axis];
    if (std::abs(d[axis]) < 1e-15) {
      if (o[axis] < lo || o[axis] > hi) return std::nullopt;
      continue;
    }
    double t0 = (lo - o[axis]) / d[axis];
    double t1 = (hi - o[axis]) / d[axis];
    if (t0 > t1) std::swap(t0, t1);
    if (t0 > t_enter) {
      t_enter = t0;
      enter_axis = axis;
    }
    if (t1 < t_exit) {
      t_exit = t1;
      exit_axis = axis;
    }
  }
  if (t_exit < t_enter) return std::nullopt;
  double t = t_enter;
  int axis = enter_axis;
  if (t <= kHitEpsilon) {
    t = t_exit;
    axis = exit_axis;
  }
  if (t <= kHitEpsilon || axis < 0) return std::nullopt;
  const Vector3d p = o + t * d;
  const bool positive = p[axis] > b.center[axis];
  Vector3d normal = Vector3d::Zero();
  normal[axis] = positive ? 1.0 : -1.0;
  return RayHit{t, normal, b.colors[axis * 2 + (positive ? 0 : 1)]};
}

Vector3d random_color(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.05, 0.9);
  for (;;) {
    Vector3d c(u(rng), u(rng), u(rng));
    if ((Vector3d::Ones() - c).norm() > 0.45 && c.maxCoeff() - c.minCoeff() > 0.25) return c;
  }
}

SpherePrimitive random_sphere(std::mt19937_64& rng, Vector3d center, double radius) {
  SpherePrimitive s;
  s.center = center;
  s.radius = radius;
  for (auto& c : s.colors) c = random_color(rng);
  return s;
}

BoxPrimitive random_box(std::mt19937_64& rng, Vector3d center, Vector3d half) {
  BoxPrimitive b;
  b.center = center;
  b.half = half;
  for (auto& c : b.colors) c = random_color(rng);
  return b;
}

// Uniform scale so the object fits [-0.7, 0.7]^3 and the ball of radius 0.85.
void fit_to_bounds(SyntheticObject& object) {
  double max_abs = 0.0;
  double max_radius = 0.0;
  for (const auto& part : object.parts) {
    if (const auto* s = std::get_if<SpherePrimitive>(&part)) {
      max_abs = std::max(max_abs, s->center.cwiseAbs().maxCoeff() + s->radius);
      max_radius = std::max(max_radius, s->center.norm() + s->radius);
    } else {
      const auto& b = std::get<BoxPrimitive>(part);
      max_abs = std::max(max_abs, (b.center.cwiseAbs() + b.half).maxCoeff());
      max_radius = std::max(max_radius, (b.center.cwiseAbs() + b.half).norm());
    }
  }
  const double scale = std::min({1.0, 0.7 / max_abs, 0.85 / max_radius});
  for (auto& part : object.parts) {
    if (auto* s = std::get_if<SpherePrimitive>(&part)) {
      s->center *= scale;
      s->radius *= scale;
    } else {
      auto& b = std::get<BoxPrimitive>(part);
      b.center *= scale;
      b.half *= scale;
    }
  }
}

json vec_json(const Vector3d& v) { return json::array({v.x(), v.y(), v.z()}); }

Vector3d json_vec(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }

json object_json(const SyntheticObject& object) {
  json parts = json::array();
  for (const auto& part : object.parts) {
    json p;
    json colors = json::array();
    if (const auto* s = std::get_if<SpherePrimitive>(&part)) {
      p["type"] = "sphere";
      p["center"] = vec_json(s->center);
      p["radius"] = s->radius;
      for (const auto& c : s->colors) colors.push_back(vec_json(c));
    } else {
      const auto& b = std::get<BoxPrimitive>(part);
      p["type"] = "box";
      p["center"] = vec_json(b.center);
      p["half"] = vec_json(b.half);
      for (const auto& c : b.colors) colors.push_back(vec_json(c));
    }
    p["colors"] = colors;
    parts.push_back(p);
  }
  return parts;
}

SyntheticObject object_from_json(const std::string& kind, const json& parts) {
  SyntheticObject object;
  object.kind = kind;
  for (const auto& p : parts) {
    if (p.at("type") == "sphere") {
      SpherePrimitive s;
      s.center = json_vec(p.at("center"));
      s.radius = p.at("radius").get<double>();
      for (size_t i = 0; i < s.colors.size(); ++i) s.colors[i] = json_vec(p.at("colors").at(i));
      object.parts.emplace_back(s);
    } else {
      BoxPrimitive b;
      b.center = json_vec(p.at("center"));
      b.half = json_vec(p.at("half"));
      for (size_t i = 0; i < b.colors.size(); ++i) b.colors[i] = json_vec(p.at("colors").at(i));
      object.parts.emplace_back(b);
    }
  }
  return object;
}

json camera_json(const Camera& camera) {
  const auto k = camera.intrinsics_row_major();
  const auto e = camera.extrinsics_row_major();
  json j;
  j["intrinsics"] = std::vector<double>(k.begin(), k.end());
  j["extrinsics"] = std::vector<double>(e.begin(), e.end());
  j["image_size"] = {camera.image_size().height, camera.image_size().width};
  return j;
}

Camera camera_from_json(const json& j, const std::string& where) {
  try {
    const auto k = j.at("intrinsics").get<std::vector<double>>();
    const auto e = j.at("extrinsics").get<std::vector<double>>();
    const auto s = j.at("image_size").get<std::vector<int64_t>>();
    if (k.size() != 9 || e.size() != 12 || s.size() != 2) {
      throw IoError("malformed camera in " + where +
                    ": expected 9 intrinsics, 12 extrinsics and [H, W]");
    }
    std::array<double, 9> ka{};
    std::array<double, 12> ea{};
    std::copy(k.begin(), k.end(), ka.begin());
    std::copy(e.begin(), e.end(), ea.begin());
    return Camera::from_row_major(ka, ea, {s[0], s[1]});
  } catch (const json::exception& ex) {
    throw IoError("malformed camera in " + where + ": " + ex.what());
  } catch (const InvalidInput& ex) {
    throw IoError("invalid camera in " + where + ": " + ex.what());
  } catch (const ShapeError& ex) {
    throw IoError("invalid camera in " + where + ": " + ex.what());
  }
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& ex) {
    throw IoError("cannot parse " + path.string() + ": " + ex.what());
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("cannot write " + path.string());
}

json grid_json(const ViewGrid& g) {
  return {{"azimuth_steps", g.azimuth_steps},
          {"elevations", g.elevations},
          {"distance", g.distance},
          {"fov_deg", g.fov_deg}};
}

ViewGrid grid_from_json(const json& j) {
  ViewGrid g;
  g.azimuth_steps = j.at("azimuth_steps").get<int64_t>();
  g.elevations = j.at("elevations").get<std::vector<double>>();
  g.distance = j.at("distance").get<double>();
  g.fov_deg = j.at("fov_deg").get<double>();
  return g;
}

std::string view_name(const char* prefix, int64_t view) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%03lld.png", prefix, static_cast<long long>(view));
  return buf;
}

ObjectEntry read_object_dir(const std::filesystem::path& dir, const std::string& id) {
  ObjectEntry entry;
  entry.id = id;
  const auto cameras_path = dir / "cameras.json";
  if (!std::filesystem::exists(cameras_path)) {
    throw IoError("missing camera file: " + cameras_path.string());
  }
  const auto cams = read_json(cameras_path);
  if (!cams.contains("views") || !cams.at("views").is_array()) {
    throw IoError("malformed camera file " + cameras_path.string() + ": no 'views' array");
  }
  int64_t index = 0;
  for (const auto& v : cams.at("views")) {
    const auto where = cameras_path.string() + " view " + std::to_string(index);
    entry.cameras.push_back(camera_from_json(v, where));
    const auto image = v.contains("image") ? v.at("image").get<std::string>() : view_name("view", index);
    if (!std::filesystem::exists(dir / image)) {
      throw IoError("missing image file: " + (dir / image).string());
    }
    entry.image_files.push_back(image);
    std::string mask;
    if (v.contains("mask")) {
      mask = v.at("mask").get<std::string>();
      if (!std::filesystem::exists(dir / mask)) {
        throw IoError("missing mask file: " + (dir / mask).string());
      }
    }
    entry.mask_files.push_back(mask);
    ++index;
  }
  if (entry.cameras.empty()) throw IoError("object " + id + " has no views");
  return entry;
}

uint64_t fnv1a(const std::string& text) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

// ---------------------------------------------------------------------------

double ViewGrid::azimuth(int64_t index) const {
  return 360.0 * static_cast<double>(index % azimuth_steps) / static_cast<double>(azimuth_steps);
}

double ViewGrid::elevation(int64_t index) const {
  return elevations.at(static_cast<size_t>(index / azimuth_steps));
}

Camera ViewGrid::camera(int64_t index, ImageSize size) const {
  if (index < 0 || index >= this->size()) throw InvalidInput("view index outside the grid");
  return orbit_camera(azimuth(index), elevation(index), distance, fov_deg, size);
}

std::optional<RayHit> intersect(const SyntheticObject& object, const Vector3d& origin,
                                const Vector3d& direction) {
  std::optional<RayHit> best;
  for (const auto& part : object.parts) {
    auto hit = std::visit(
        [&](const auto& p) -> std::optional<RayHit> {
          if constexpr (std::is_same_v<std::decay_t<decltype(p)>, SpherePrimitive>) {
            return hit_sphere(p, origin, direction);
          } else {
            return hit_box(p, origin, direction);
          }
        },
        part);
    if (hit && (!best || hit->t < best->t)) best = hit;
  }
  return best;
}

RasterizedView rasterize(const SyntheticObject& object, const Camera& camera, double background) {
  const auto size = camera.image_size();
  const auto k = camera.intrinsics_row_major();
  const auto e = camera.extrinsics_row_major();
  Eigen::Matrix3d rot;
  rot << e[0], e[1], e[2], e[4], e[5], e[6], e[8], e[9], e[10];
  const Vector3d trans(e[3], e[7], e[11]);
  const Vector3d origin = -rot.transpose() * trans;

  auto image = torch::full({3, size.height, size.width}, background, torch::kFloat32);
  auto mask = torch::zeros({size.height, size.width}, torch::kFloat32);
  auto depth = torch::zeros({size.height, size.width}, torch::kFloat32);
  auto img = image.accessor<float, 3>();
  auto msk = mask.accessor<float, 2>();
  auto dep = depth.accessor<float, 2>();

  for (int64_t y = 0; y < size.height; ++y) {
    for (int64_t x = 0; x < size.width; ++x) {
      const Vector3d ray_cam =
          Vector3d((static_cast<double>(x) - k[2]) / k[0], (static_cast<double>(y) - k[5]) / k[4], 1.0)
              .normalized();
      const Vector3d dir = rot.transpose() * ray_cam;
      const auto hit = intersect(object, origin, dir);
      if (!hit) continue;
      const double shade = kAmbient + kDiffuse * std::max(0.0, hit->normal.dot(light_direction()));
      for (int c = 0; c < 3; ++c) img[c][y][x] = static_cast<float>(hit->albedo[c] * shade);
      msk[y][x] = 1.0F;
      dep[y][x] = static_cast<float>(hit->t * ray_cam.z());
    }
  }
  return {image, mask, depth};
}

SyntheticObject make_object(int64_t index, uint64_t seed) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32),
                    static_cast<uint32_t>(index), 0xc0bbU};
  std::mt19937_64 rng(seq);
  auto u = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };

  SyntheticObject object;
  switch (index % 4) {
    case 0:
      object.kind = "sphere";
      object.parts.emplace_back(random_sphere(rng, Vector3d::Zero(), u(0.45, 0.65)));
      break;
    case 1:
      object.kind = "box";
      object.parts.emplace_back(
          random_box(rng, Vector3d::Zero(), Vector3d(u(0.25, 0.55), u(0.25, 0.55), u(0.25, 0.55))));
      break;
    case 2: {
      object.kind = "box+sphere";
      const Vector3d half(u(0.25, 0.45), u(0.15, 0.3), u(0.25, 0.45));
      const double base_y = -0.2;
      object.parts.emplace_back(random_box(rng, Vector3d(0, base_y, 0), half));
      const double r = u(0.2, 0.32);
      const Vector3d top(u(-0.15, 0.15), base_y + half.y() + 0.7 * r, u(-0.15, 0.15));
      object.parts.emplace_back(random_sphere(rng, top, r));
      break;
    }
    default: {
      object.kind = "box+box";
      const Vector3d base_half(u(0.3, 0.55), u(0.12, 0.25), u(0.3, 0.55));
      const double base_y = -0.25;
      object.parts.emplace_back(random_box(rng, Vector3d(0, base_y, 0), base_half));
      const Vector3d top_half(u(0.1, 0.25), u(0.15, 0.3), u(0.1, 0.25));
      const Vector3d top(u(-0.2, 0.2), base_y + base_half.y() + top_half.y(), u(-0.2, 0.2));
      object.parts.emplace_back(random_box(rng, top, top_half));
      break;
    }
  }
  fit_to_bounds(object);
  return object;
}

std::string SyntheticConfig::canonical() const {
  std::ostringstream out;
  out << std::setprecision(17) << "objects=" << objects << ";heldout=" << heldout
      << ";resolution=" << resolution << ";azimuth_steps=" << grid.azimuth_steps
      << ";elevations=";
  for (double e : grid.elevations) out << e << ",";
  out << ";distance=" << grid.distance << ";fov=" << grid.fov_deg << ";seed=" << seed;
  return out.str();
}

std::string SyntheticConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(canonical())));
  return buf;
}

DatasetManifest generate_synthetic(const SyntheticConfig& config,
                                   const std::filesystem::path& out_dir) {
  if (config.resolution != 32 && config.resolution != 64 && config.resolution != 128) {
    throw InvalidInput("synthetic resolution must be 32, 64 or 128");
  }
  if (config.objects < 0 || config.heldout < 0 || config.objects + config.heldout == 0) {
    throw InvalidInput("synthetic dataset needs at least one object");
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  const ImageSize size{config.resolution, config.resolution};
  DatasetManifest manifest;
  manifest.root = out_dir;
  manifest.generator_hash = config.hash();
  manifest.grid = config.grid;

  json objects = json::array();
  const int64_t total = config.objects + config.heldout;
  for (int64_t i = 0; i < total; ++i) {
    char id_buf[32];
    std::snprintf(id_buf, sizeof(id_buf), "obj_%03lld", static_cast<long long>(i));
    ObjectEntry entry;
    entry.id = id_buf;
    entry.split = i < config.objects ? "train" : "test";
    entry.shape = make_object(i, config.seed);
    entry.kind = entry.shape->kind;

    const auto dir = out_dir / entry.id;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    json views = json::array();
    for (int64_t v = 0; v < config.grid.size(); ++v) {
      auto camera = config.grid.camera(v, size);
      auto view = rasterize(*entry.shape, camera);
      const auto image_name = view_name("view", v);
      const auto mask_name = view_name("mask", v);
      write_png_rgb(dir / image_name, view.image);
      write_png_gray(dir / mask_name, view.mask);
      json cam = camera_json(camera);
      cam["image"] = image_name;
      cam["mask"] = mask_name;
      views.push_back(cam);
      entry.image_files.push_back(image_name);
      entry.mask_files.push_back(mask_name);
      entry.cameras.push_back(camera);
    }
    write_text(dir / "cameras.json", json{{"views", views}}.dump(1) + "\n");
    objects.push_back({{"id", entry.id},
                       {"split", entry.split},
                       {"kind", entry.kind},
                       {"primitives", object_json(*entry.shape)}});
    manifest.objects.push_back(std::move(entry));
  }

  json root{{"format", "corn-dataset"},
            {"version", 1},
            {"generator_hash", manifest.generator_hash},
            {"generator",
             {{"objects", config.objects},
              {"heldout", config.heldout},
              {"resolution", config.resolution},
              {"seed", config.seed}}},
            {"grid", grid_json(config.grid)},
            {"objects", objects}};
  write_text(out_dir / "manifest.json", root.dump(1) + "\n");
  return manifest;
}

// ---------------------------------------------------------------------------

void AccessLog::record(const std::string& object_id, int64_t view) {
  std::lock_guard lock(mutex_);
  entries_.push_back({object_id, view});
}

std::vector<AccessLog::Entry> AccessLog::entries() const {
  std::lock_guard lock(mutex_);
  return entries_;
}

void AccessLog::clear() {
  std::lock_guard lock(mutex_);
  entries_.clear();
}

Dataset Dataset::open(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root)) throw IoError("dataset root not found: " + root.string());
  Dataset ds;
  ds.manifest_.root = root;
  const auto manifest_path = root / "manifest.json";
  if (std::filesystem::exists(manifest_path)) {
    const auto j = read_json(manifest_path);
    try {
      ds.manifest_.generator_hash = j.value("generator_hash", "");
      if (j.contains("grid")) ds.manifest_.grid = grid_from_json(j.at("grid"));
      for (const auto& o : j.at("objects")) {
        const auto id = o.at("id").get<std::string>();
        auto entry = read_object_dir(root / id, id);
        entry.split = o.value("split", "train");
        entry.kind = o.value("kind", "");
        if (o.contains("primitives")) entry.shape = object_from_json(entry.kind, o.at("primitives"));
        ds.manifest_.objects.push_back(std::move(entry));
      }
    } catch (const json::exception& ex) {
      throw IoError("malformed manifest " + manifest_path.string() + ": " + ex.what());
    }
  } else {
    std::vector<std::filesystem::path> dirs;
    for (const auto& d : std::filesystem::directory_iterator(root)) {
      if (d.is_directory() && std::filesystem::exists(d.path() / "cameras.json")) {
        dirs.push_back(d.path());
      }
    }
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) {
      ds.manifest_.objects.push_back(read_object_dir(d, d.filename().string()));
    }
  }
  if (ds.manifest_.objects.empty()) throw IoError("dataset " + root.string() + " has no objects");
  return ds;
}

std::vector<size_t> Dataset::split_indices(const std::string& split) const {
  std::vector<size_t> out;
  for (size_t i = 0; i < manifest_.objects.size(); ++i) {
    if (manifest_.objects[i].split == split) out.push_back(i);
  }
  return out;
}

const Camera& Dataset::camera(size_t object, size_t view) const {
  return this->object(object).cameras.at(view);
}

ViewRecord Dataset::load_view(size_t object, size_t view) const {
  const auto& entry = this->object(object);
  if (view >= entry.cameras.size()) {
    throw InvalidInput("object " + entry.id + " has no view " + std::to_string(view));
  }
  if (log_) log_->record(entry.id, static_cast<int64_t>(view));
  const auto dir = manifest_.root / entry.id;
  auto image = read_png_rgb(dir / entry.image_files[view]);
  const auto& camera = entry.cameras[view];
  if (image.size(1) != camera.image_size().height || image.size(2) != camera.image_size().width) {
    throw IoError("image " + (dir / entry.image_files[view]).string() +
                  " does not match its camera's image size");
  }
  torch::Tensor mask;
  if (!entry.mask_files[view].empty()) {
    mask = (read_png_gray(dir / entry.mask_files[view]) > 0.5).to(torch::kFloat32);
  } else {
    mask = extract_mask(image);
  }
  return {image, camera, mask};
}

ObjectRecord Dataset::load_object(size_t object) const {
  ObjectRecord record;
  record.object_id = this->object(object).id;
  for (size_t v = 0; v < view_count(object); ++v) record.views.push_back(load_view(object, v));
  return record;
}

std::optional<ObjectRecord> RecordStream::next() {
  if (position_ >= dataset_.object_count()) return std::nullopt;
  return dataset_.load_object(position_++);
}

RecordStream load_dataset(const std::filesystem::path& root) {
  return RecordStream(Dataset::open(root));
}

Camera read_camera_file(const std::filesystem::path& path) {
  return camera_from_json(read_json(path), path.string());
}

void write_camera_file(const std::filesystem::path& path, const Camera& camera) {
  write_text(path, camera_json(camera).dump(1) + "\n");
}

torch::Tensor extract_mask(const torch::Tensor& image, const MaskConfig& cfg) {
  if (image.dim() != 3 || image.size(0) != 3) throw ShapeError("image must be [3, H, W]");
  auto bg = torch::tensor({cfg.background[0], cfg.background[1], cfg.background[2]},
                          image.options().requires_grad(false))
                .view({3, 1, 1});
  auto dist = (image.detach() - bg).pow(2).sum(0).sqrt();
  auto fg = (dist > cfg.threshold).to(torch::kFloat32).unsqueeze(0).unsqueeze(0);
  namespace F = torch::nn::functional;
  auto pool = F::MaxPool2dFuncOptions(3).stride(1).padding(1);
  auto dilated = F::max_pool2d(fg, pool);
  auto closed = -F::max_pool2d(-dilated, pool);
  return closed.squeeze(0).squeeze(0);
}

}  // namespace corn
