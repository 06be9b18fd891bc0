#include "corn/geometry.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "corn/errors.hpp"

namespace corn {
namespace {

constexpr double kCameraTolerance = 1e-6;

torch::TensorOptions f64() { return torch::TensorOptions().dtype(torch::kFloat64); }

void check_finite(const torch::Tensor& t, const char* what) {
  if (!torch::isfinite(t).all().item<bool>()) {
    throw InvalidInput(std::string(what) + " contains non-finite values");
  }
}

void check_rigid(const torch::Tensor& m, const char* what) {
  if (m.dim() != 2 || m.size(0) != 3 || m.size(1) != 4) {
    throw ShapeError(std::string(what) + " must be 3x4");
  }
  check_finite(m, what);
  auto r = m.slice(1, 0, 3).to(torch::kFloat64);
  auto gram_err = (r.t().matmul(r) - torch::eye(3, f64())).abs().max().item<double>();
  auto det = torch::linalg_det(r).item<double>();
  if (gram_err > kCameraTolerance || std::abs(det - 1.0) > kCameraTolerance) {
    std::ostringstream msg;
    msg << what << " rotation is not a proper rotation (|R^T R - I| = " << gram_err
        << ", det = " << det << ")";
    throw InvalidInput(msg.str());
  }
}

}  // namespace

Camera::Camera(torch::Tensor intrinsics, torch::Tensor extrinsics, ImageSize size)
    : intrinsics_(intrinsics.detach().to(torch::kFloat64).contiguous()),
      extrinsics_(extrinsics.detach().to(torch::kFloat64).contiguous()),
      size_(size) {
  if (intrinsics_.dim() != 2 || intrinsics_.size(0) != 3 || intrinsics_.size(1) != 3) {
    throw ShapeError("camera intrinsics must be 3x3");
  }
  check_finite(intrinsics_, "camera intrinsics");
  auto last_row = intrinsics_.select(0, 2);
  auto expected = torch::tensor({0.0, 0.0, 1.0}, f64());
  if ((last_row - expected).abs().max().item<double>() > kCameraTolerance) {
    throw InvalidInput("camera intrinsics row 3 must be (0, 0, 1)");
  }
  check_rigid(extrinsics_, "camera extrinsics");
  if (size_.height <= 0 || size_.width <= 0) {
    throw InvalidInput("camera image size must be positive");
  }
}

Camera Camera::from_row_major(const std::array<double, 9>& intrinsics,
                              const std::array<double, 12>& extrinsics, ImageSize size) {
  auto k = torch::from_blob(const_cast<double*>(intrinsics.data()), {3, 3}, f64()).clone();
  auto e = torch::from_blob(const_cast<double*>(extrinsics.data()), {3, 4}, f64()).clone();
  return Camera(k, e, size);
}

torch::Tensor Camera::center() const { return -rotation().t().matmul(translation()); }

std::array<double, 9> Camera::intrinsics_row_major() const {
  std::array<double, 9> out{};
  std::copy_n(intrinsics_.data_ptr<double>(), 9, out.begin());
  return out;
}

std::array<double, 12> Camera::extrinsics_row_major() const {
  std::array<double, 12> out{};
  std::copy_n(extrinsics_.data_ptr<double>(), 12, out.begin());
  return out;
}

Camera Camera::with_extrinsics(torch::Tensor extrinsics) const {
  return Camera(intrinsics_, std::move(extrinsics), size_);
}

bool Camera::operator==(const Camera& other) const {
  return size_ == other.size_ && torch::equal(intrinsics_, other.intrinsics_) &&
         torch::equal(extrinsics_, other.extrinsics_);
}

Camera orbit_camera(double azimuth_deg, double elevation_deg, double distance, double fov_deg,
                    ImageSize size) {
  const double az = azimuth_deg * std::numbers::pi / 180.0;
  const double el = elevation_deg * std::numbers::pi / 180.0;
  const std::array<double, 3> c{distance * std::cos(el) * std::sin(az), distance * std::sin(el),
                                distance * std::cos(el) * std::cos(az)};
  auto normalize = [](std::array<double, 3> v) {
    const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    return std::array<double, 3>{v[0] / n, v[1] / n, v[2] / n};
  };
  auto cross = [](const std::array<double, 3>& a, const std::array<double, 3>& b) {
    return std::array<double, 3>{a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2],
                                 a[0] * b[1] - a[1] * b[0]};
  };
  const auto forward = normalize({-c[0], -c[1], -c[2]});
  const auto right = normalize(cross(forward, {0.0, 1.0, 0.0}));
  const auto down = cross(forward, right);

  std::array<double, 12> e{};
  const std::array<std::array<double, 3>, 3> rows{right, down, forward};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) e[i * 4 + j] = rows[i][j];
    e[i * 4 + 3] = -(rows[i][0] * c[0] + rows[i][1] * c[1] + rows[i][2] * c[2]);
  }
  const double focal =
      0.5 * static_cast<double>(size.width) / std::tan(0.5 * fov_deg * std::numbers::pi / 180.0);
  const std::array<double, 9> k{focal, 0.0,   0.5 * static_cast<double>(size.width - 1),
                                0.0,   focal, 0.5 * static_cast<double>(size.height - 1),
                                0.0,   0.0,   1.0};
  return Camera::from_row_major(k, e, size);
}

PointSet::PointSet(torch::Tensor coords_in, double extent_in)
    : coords(std::move(coords_in)), extent(extent_in) {
  if (coords.dim() != 2 || coords.size(1) != 3) throw ShapeError("point set must be [k, 3]");
  if (coords.size(0) == 0) throw InvalidInput("point set must be non-empty");
  if (!(extent > 0.0)) throw InvalidInput("cube extent must be positive");
  if (coords.abs().max().item<double>() > extent * (1.0 + 1e-9)) {
    throw InvalidInput("point set has points outside its cube");
  }
}

Projection project_points(const torch::Tensor& points, const Camera& camera) {
  if (points.dim() != 2 || points.size(1) != 3) throw ShapeError("points must be [k, 3]");
  check_finite(points, "points");
  const auto opts = points.options().requires_grad(false);
  auto rot = camera.rotation().to(opts);
  auto trans = camera.translation().to(opts);
  auto k = camera.intrinsics().to(opts);

  auto cam = points.matmul(rot.t()) + trans;
  auto depth = cam.select(1, 2);
  auto in_front = depth > kMinDepth;
  auto safe_depth = torch::where(in_front, depth, torch::ones_like(depth));
  auto homo = cam.matmul(k.t());
  auto pixels = homo.slice(1, 0, 2) / safe_depth.unsqueeze(1);

  const auto size = camera.image_size();
  auto u = pixels.select(1, 0).detach();
  auto v = pixels.select(1, 1).detach();
  auto valid = in_front & (u >= 0) & (u < static_cast<double>(size.width)) & (v >= 0) &
               (v < static_cast<double>(size.height));
  return {pixels, depth, valid};
}

torch::Tensor identity_rigid() {
  return torch::cat({torch::eye(3, f64()), torch::zeros({3, 1}, f64())}, 1);
}

torch::Tensor relative_transform(const torch::Tensor& from_extrinsics,
                                 const torch::Tensor& to_extrinsics) {
  check_rigid(from_extrinsics, "source extrinsics");
  check_rigid(to_extrinsics, "target extrinsics");
  auto from = from_extrinsics.to(torch::kFloat64);
  auto to = to_extrinsics.to(torch::kFloat64);
  auto r_from = from.slice(1, 0, 3);
  auto r_to = to.slice(1, 0, 3);
  auto r = r_to.matmul(r_from.t());
  auto t = to.select(1, 3) - r.matmul(from.select(1, 3));
  return torch::cat({r, t.unsqueeze(1)}, 1);
}

torch::Tensor compose_rigid(const torch::Tensor& first, const torch::Tensor& second) {
  auto a = first.to(torch::kFloat64);
  auto b = second.to(torch::kFloat64);
  auto r_b = b.slice(1, 0, 3);
  auto r = r_b.matmul(a.slice(1, 0, 3));
  auto t = r_b.matmul(a.select(1, 3)) + b.select(1, 3);
  return torch::cat({r, t.unsqueeze(1)}, 1);
}

torch::Tensor bilinear_sample(const torch::Tensor& feature_map, const torch::Tensor& pixels) {
  if (feature_map.dim() != 3) throw ShapeError("feature map must be [C, H, W]");
  if (pixels.dim() != 2 || pixels.size(1) != 2) throw ShapeError("pixels must be [k, 2]");
  const int64_t channels = feature_map.size(0);
  const int64_t height = feature_map.size(1);
  const int64_t width = feature_map.size(2);

  auto u = pixels.select(1, 0);
  auto v = pixels.select(1, 1);
  auto finite = torch::isfinite(u) & torch::isfinite(v);
  u = torch::where(finite, u, torch::zeros_like(u));
  v = torch::where(finite, v, torch::zeros_like(v));
  auto inside = finite & (u >= 0) & (u <= static_cast<double>(width - 1)) & (v >= 0) &
                (v <= static_cast<double>(height - 1));

  auto u0 = u.detach().floor().clamp(0, width - 1);
  auto v0 = v.detach().floor().clamp(0, height - 1);
  auto fu = u - u0;
  auto fv = v - v0;
  auto iu0 = u0.to(torch::kLong);
  auto iv0 = v0.to(torch::kLong);
  auto iu1 = (iu0 + 1).clamp_max(width - 1);
  auto iv1 = (iv0 + 1).clamp_max(height - 1);

  auto flat = feature_map.reshape({channels, height * width});
  auto gather = [&](const torch::Tensor& iv, const torch::Tensor& iu) {
    return flat.index_select(1, iv * width + iu).t();  // [k, C]
  };
  auto w00 = ((1 - fu) * (1 - fv)).unsqueeze(1);
  auto w01 = (fu * (1 - fv)).unsqueeze(1);
  auto w10 = ((1 - fu) * fv).unsqueeze(1);
  auto w11 = (fu * fv).unsqueeze(1);
  auto out = w00 * gather(iv0, iu0) + w01 * gather(iv0, iu1) + w10 * gather(iv1, iu0) +
             w11 * gather(iv1, iu1);
  return out * inside.unsqueeze(1).to(out.scalar_type());
}

torch::Tensor positional_encode(const torch::Tensor& points, int64_t levels) {
  if (levels < 1) throw InvalidInput("positional encoding needs at least one level");
  if (points.dim() != 2 || points.size(1) != 3) throw ShapeError("points must be [k, 3]");
  auto freqs = torch::pow(2.0, torch::arange(levels, points.options().requires_grad(false))) *
               std::numbers::pi;
  auto scaled = points.unsqueeze(-1) * freqs;                    // [k, 3, L]
  auto enc = torch::stack({torch::sin(scaled), torch::cos(scaled)}, -1);  // [k, 3, L, 2]
  return enc.reshape({points.size(0), encoding_width(levels)});
}

PointSet sample_cube_points(int64_t k, double extent, std::mt19937_64& rng) {
  if (k <= 0) throw InvalidInput("point count must be positive");
  if (!(extent > 0.0)) throw InvalidInput("cube extent must be positive");
  std::uniform_real_distribution<double> dist(-extent, extent);
  auto coords = torch::empty({k, 3}, torch::kFloat32);
  auto* data = coords.data_ptr<float>();
  const auto bound = static_cast<float>(extent);
  for (int64_t i = 0; i < 3 * k; ++i) {
    data[i] = std::clamp(static_cast<float>(dist(rng)), -bound, bound);
  }
  return PointSet(coords, extent);
}

PointSet sample_cube_points(int64_t k, double extent, uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample_cube_points(k, extent, rng);
}

}  // namespace corn
