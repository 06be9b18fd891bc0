#include "corn/image_io.hpp"

#include <png.h>

#include <cstring>
#include <vector>

#include "corn/errors.hpp"

namespace corn {
namespace {

struct Decoded {
  std::vector<uint8_t> pixels;
  int64_t height = 0;
  int64_t width = 0;
};

Decoded decode(const std::filesystem::path& path, uint32_t format) {
  if (!std::filesystem::exists(path)) throw IoError("image not found: " + path.string());
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw IoError("cannot decode PNG " + path.string() + ": " + image.message);
  }
  image.format = format;
  Decoded out;
  out.height = image.height;
  out.width = image.width;
  out.pixels.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError("cannot decode PNG " + path.string() + ": " + image.message);
  }
  return out;
}

void encode(const std::filesystem::path& path, const std::vector<uint8_t>& pixels, int64_t height,
            int64_t width, uint32_t format) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<uint32_t>(width);
  image.height = static_cast<uint32_t>(height);
  image.format = format;
  if (!png_image_write_to_file(&image, path.c_str(), 0, pixels.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + image.message);
  }
}

std::vector<uint8_t> quantize(const torch::Tensor& hwc) {
  auto q = (hwc.detach().to(torch::kFloat64).clamp(0.0, 1.0) * 255.0).round().to(torch::kUInt8)
               .contiguous();
  const auto* p = q.data_ptr<uint8_t>();
  return {p, p + q.numel()};
}

}  // namespace

torch::Tensor read_png_rgb(const std::filesystem::path& path) {
  auto d = decode(path, PNG_FORMAT_RGB);
  auto t = torch::from_blob(d.pixels.data(), {d.height, d.width, 3}, torch::kUInt8).clone();
  return t.permute({2, 0, 1}).to(torch::kFloat32).div(255.0).contiguous();
}

void write_png_rgb(const std::filesystem::path& path, const torch::Tensor& image) {
  if (image.dim() != 3 || image.size(0) != 3) throw ShapeError("RGB image must be [3, H, W]");
  encode(path, quantize(image.permute({1, 2, 0})), image.size(1), image.size(2), PNG_FORMAT_RGB);
}

torch::Tensor read_png_gray(const std::filesystem::path& path) {
  auto d = decode(path, PNG_FORMAT_GRAY);
  auto t = torch::from_blob(d.pixels.data(), {d.height, d.width}, torch::kUInt8).clone();
  return t.to(torch::kFloat32).div(255.0);
}

void write_png_gray(const std::filesystem::path& path, const torch::Tensor& image) {
  if (image.dim() != 2) throw ShapeError("gray image must be [H, W]");
  encode(path, quantize(image), image.size(0), image.size(1), PNG_FORMAT_GRAY);
}

}  // namespace corn
