#pragma once

#include <torch/torch.h>

#include <string>
#include <vector>

namespace corn {

enum class Backbone {
  kDesk,      // one residual block per stage, 32-32-64-128-128 channels (~0.6M parameters)
  kResNet18,  // two basic blocks per stage, 64-64-128-256-512 channels
};

Backbone parse_backbone(const std::string& name);
std::string to_string(Backbone backbone);

struct ModelConfig {
  int64_t image_size = 32;
  int64_t global_dim = 128;
  int64_t spatial_dim = 64;
  int64_t feature_dim = 64;
  int64_t encoding_levels = 10;
  int64_t field_hidden = 256;
  int64_t field_layers = 5;
  Backbone backbone = Backbone::kDesk;
  int64_t refiner_base = 32;
  int64_t discriminator_base = 32;
  double background = 1.0;

  int64_t field_input_width() const;
  void validate() const;
};

// Convolution whose weight is divided by its largest singular value, estimated
// with one power-iteration step per training-mode forward pass.
class SpectralConv2dImpl : public torch::nn::Module {
 public:
  SpectralConv2dImpl(int64_t in_channels, int64_t out_channels, int64_t kernel, int64_t stride,
                     int64_t padding);

  torch::Tensor forward(const torch::Tensor& x);

  // Weight after normalisation with the current singular-vector estimates.
  torch::Tensor normalized_weight() const;
  void power_iterate(int64_t steps);

  torch::Tensor weight_orig;
  torch::Tensor bias;

 private:
  torch::Tensor u_;
  torch::Tensor v_;
  int64_t stride_;
  int64_t padding_;
};
TORCH_MODULE(SpectralConv2d);

class ResidualBlockImpl : public torch::nn::Module {
 public:
  ResidualBlockImpl(int64_t in_channels, int64_t out_channels, int64_t stride);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, shortcut_{nullptr};
  torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
};
TORCH_MODULE(ResidualBlock);

// Residual image encoder. Produces the global code and the multi-scale
// feature maps consumed by the spatial decoder.
class GlobalEncoderImpl : public torch::nn::Module {
 public:
  explicit GlobalEncoderImpl(const ModelConfig& cfg);

  struct Output {
    torch::Tensor code;                 // [B, global_dim]
    std::vector<torch::Tensor> skips;   // resolution H, H/2, H/4, H/8, H/16
  };
  Output forward(const torch::Tensor& images);

  std::vector<int64_t> stage_channels() const { return channels_; }

 private:
  torch::nn::Conv2d stem_{nullptr};
  torch::nn::ModuleList stages_;
  torch::nn::Linear head_{nullptr};
  std::vector<int64_t> channels_;
};
TORCH_MODULE(GlobalEncoder);

// UNet-style decoder: four upsampling + skip stages from the encoder's last
// map back to input resolution, then a projection to spatial_dim channels.
class SpatialDecoderImpl : public torch::nn::Module {
 public:
  SpatialDecoderImpl(const ModelConfig& cfg, const std::vector<int64_t>& encoder_channels);
  torch::Tensor forward(const std::vector<torch::Tensor>& skips, const torch::Tensor& images);

 private:
  torch::nn::ModuleList ups_;
  torch::nn::Conv2d project_{nullptr};
};
TORCH_MODULE(SpatialDecoder);

// Fully connected scene function with a shared trunk, a feature head and an
// occupancy head.
class SceneFieldImpl : public torch::nn::Module {
 public:
  explicit SceneFieldImpl(const ModelConfig& cfg);
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& inputs);

  int64_t input_width() const { return input_width_; }

 private:
  torch::nn::ModuleList trunk_;
  torch::nn::Linear feature_head_{nullptr}, occupancy_head_{nullptr};
  int64_t input_width_;
};
TORCH_MODULE(SceneField);

// Spectrally normalised UNet with four down/upsampling blocks. Input is the
// projected feature map plus its coverage channel; output is RGB composited
// over the background by the predicted mask, and the mask itself. Hidden
// convolutions are followed by group normalisation so the output does not
// depend on the overall scale of the splatted features.
class RefinerImpl : public torch::nn::Module {
 public:
  explicit RefinerImpl(const ModelConfig& cfg);

  struct Output {
    torch::Tensor rgb;   // [B, 3, H, W] in [0, 1]
    torch::Tensor mask;  // [B, 1, H, W] in (0, 1)
  };
  Output forward(const torch::Tensor& projected);

  std::vector<SpectralConv2d> spectral_layers() const;

 private:
  SpectralConv2d in_{nullptr};
  std::vector<SpectralConv2d> down_, up_;
  SpectralConv2d out_{nullptr};
  torch::nn::GroupNorm in_norm_{nullptr};
  std::vector<torch::nn::GroupNorm> down_norm_, up_norm_;
  double background_;
};
TORCH_MODULE(Refiner);

// Patch discriminator: three stride-2 4x4 convolutions and a 3x3 score layer,
// so an HxW image yields an (H/8)x(W/8) map of patch scores.
class PatchDiscriminatorImpl : public torch::nn::Module {
 public:
  explicit PatchDiscriminatorImpl(const ModelConfig& cfg);
  torch::Tensor forward(const torch::Tensor& images);

  static constexpr int64_t kStride = 8;

 private:
  torch::nn::Sequential net_;
};
TORCH_MODULE(PatchDiscriminator);

}  // namespace corn
