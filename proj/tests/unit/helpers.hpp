#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include "corn/geometry.hpp"
#include "corn/networks.hpp"

namespace testing {

// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("corn_test_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& p) const { return path_ / p; }

 private:
  std::filesystem::path path_;
};

// Small model for fast tests: 16x16 images, narrow layers.
inline corn::ModelConfig tiny_model() {
  corn::ModelConfig m;
  m.image_size = 16;
  m.field_hidden = 32;
  m.field_layers = 3;
  m.encoding_levels = 4;
  m.refiner_base = 8;
  m.discriminator_base = 8;
  return m;
}

// Central finite-difference gradient of a scalar function of `x` (float64).
inline torch::Tensor numeric_grad(const std::function<double(const torch::Tensor&)>& f,
                                  const torch::Tensor& x, double h) {
  auto base = x.detach().clone().to(torch::kFloat64);
  auto grad = torch::zeros_like(base);
  auto flat = base.view({-1});
  auto g = grad.view({-1});
  for (int64_t i = 0; i < flat.size(0); ++i) {
    const double orig = flat[i].item<double>();
    flat[i] = orig + h;
    const double up = f(base);
    flat[i] = orig - h;
    const double down = f(base);
    flat[i] = orig;
    g[i] = (up - down) / (2 * h);
  }
  return grad;
}

// max |a - b| / max(max |b|, floor)
inline double rel_error(const torch::Tensor& a, const torch::Tensor& b, double floor = 1e-6) {
  const double diff = (a.to(torch::kFloat64) - b.to(torch::kFloat64)).abs().max().item<double>();
  const double scale = std::max(b.to(torch::kFloat64).abs().max().item<double>(), floor);
  return diff / scale;
}

inline corn::Camera simple_camera(double f, double c, int64_t size) {
  return corn::Camera::from_row_major({f, 0, c, 0, f, c, 0, 0, 1},
                                      {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0}, {size, size});
}

}  // namespace testing
