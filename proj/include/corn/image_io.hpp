#pragma once

#include <torch/torch.h>

#include <filesystem>

namespace corn {

// 8-bit RGB PNG <-> [3, H, W] float tensor in [0, 1].
torch::Tensor read_png_rgb(const std::filesystem::path& path);
void write_png_rgb(const std::filesystem::path& path, const torch::Tensor& image);

// 8-bit gray PNG <-> [H, W] float tensor in [0, 1].
torch::Tensor read_png_gray(const std::filesystem::path& path);
void write_png_gray(const std::filesystem::path& path, const torch::Tensor& image);

}  // namespace corn
