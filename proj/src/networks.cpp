#include "corn/networks.hpp"

#include <numeric>

#include "corn/errors.hpp"
#include "corn/geometry.hpp"

namespace corn {
namespace {

namespace F = torch::nn::functional;

torch::Tensor lrelu(const torch::Tensor& x) {
  return F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(0.2));
}

torch::Tensor upsample2(const torch::Tensor& x) {
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .scale_factor(std::vector<double>{2.0, 2.0})
                               .mode(torch::kNearest));
}

torch::nn::Conv2d conv(int64_t in, int64_t out, int64_t kernel, int64_t stride, int64_t padding,
                       bool bias = true) {
  return torch::nn::Conv2d(
      torch::nn::Conv2dOptions(in, out, kernel).stride(stride).padding(padding).bias(bias));
}

torch::nn::GroupNorm group_norm(int64_t channels) {
  return torch::nn::GroupNorm(torch::nn::GroupNormOptions(std::gcd<int64_t>(8, channels), channels));
}

}  // namespace

Backbone parse_backbone(const std::string& name) {
  if (name == "desk") return Backbone::kDesk;
  if (name == "resnet18") return Backbone::kResNet18;
  throw InvalidInput("unknown backbone '" + name + "' (expected desk or resnet18)");
}

std::string to_string(Backbone backbone) {
  return backbone == Backbone::kDesk ? "desk" : "resnet18";
}

int64_t ModelConfig::field_input_width() const {
  return global_dim + spatial_dim + encoding_width(encoding_levels);
}

void ModelConfig::validate() const {
  if (image_size <= 0 || image_size % 16 != 0) {
    throw InvalidInput("image size must be a positive multiple of 16");
  }
  if (global_dim <= 0 || spatial_dim <= 0 || feature_dim <= 0 || field_hidden <= 0) {
    throw InvalidInput("network widths must be positive");
  }
  if (encoding_levels < 1) throw InvalidInput("encoding levels must be >= 1");
  if (field_layers < 2) throw InvalidInput("field needs at least two layers");
  if (refiner_base <= 0 || discriminator_base <= 0) {
    throw InvalidInput("refiner/discriminator widths must be positive");
  }
}

// ---------------------------------------------------------------------------

SpectralConv2dImpl::SpectralConv2dImpl(int64_t in_channels, int64_t out_channels, int64_t kernel,
                                       int64_t stride, int64_t padding)
    : stride_(stride), padding_(padding) {
  auto proto = conv(in_channels, out_channels, kernel, stride, padding);
  weight_orig = register_parameter("weight_orig", proto->weight.detach().clone());
  bias = register_parameter("bias", proto->bias.detach().clone());
  const int64_t cols = in_channels * kernel * kernel;
  u_ = register_buffer("u", F::normalize(torch::randn({out_channels}),
                                         F::NormalizeFuncOptions().dim(0)));
  v_ = register_buffer("v", F::normalize(torch::randn({cols}), F::NormalizeFuncOptions().dim(0)));
  power_iterate(1);
}

void SpectralConv2dImpl::power_iterate(int64_t steps) {
  torch::NoGradGuard no_grad;
  auto w = weight_orig.reshape({weight_orig.size(0), -1});
  for (int64_t i = 0; i < steps; ++i) {
    v_.copy_(F::normalize(w.t().mv(u_), F::NormalizeFuncOptions().dim(0).eps(1e-12)));
    u_.copy_(F::normalize(w.mv(v_), F::NormalizeFuncOptions().dim(0).eps(1e-12)));
  }
}

torch::Tensor SpectralConv2dImpl::normalized_weight() const {
  auto w = weight_orig.reshape({weight_orig.size(0), -1});
  // u and v are updated in place by later forwards; autograd needs snapshots.
  auto sigma = torch::dot(u_.clone(), w.mv(v_.clone()));
  return weight_orig / sigma;
}

torch::Tensor SpectralConv2dImpl::forward(const torch::Tensor& x) {
  if (is_training()) power_iterate(1);
  return F::conv2d(x, normalized_weight(),
                   F::Conv2dFuncOptions().bias(bias).stride(stride_).padding(padding_));
}

// ---------------------------------------------------------------------------

ResidualBlockImpl::ResidualBlockImpl(int64_t in_channels, int64_t out_channels, int64_t stride) {
  conv1_ = register_module("conv1", conv(in_channels, out_channels, 3, stride, 1, false));
  norm1_ = register_module("norm1",
                           torch::nn::GroupNorm(torch::nn::GroupNormOptions(8, out_channels)));
  conv2_ = register_module("conv2", conv(out_channels, out_channels, 3, 1, 1, false));
  norm2_ = register_module("norm2",
                           torch::nn::GroupNorm(torch::nn::GroupNormOptions(8, out_channels)));
  if (stride != 1 || in_channels != out_channels) {
    shortcut_ = register_module("shortcut", conv(in_channels, out_channels, 1, stride, 0, false));
  }
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x) {
  auto y = lrelu(norm1_(conv1_(x)));
  y = norm2_(conv2_(y));
  auto skip = shortcut_ ? shortcut_(x) : x;
  return lrelu(y + skip);
}

GlobalEncoderImpl::GlobalEncoderImpl(const ModelConfig& cfg) {
  int64_t blocks_per_stage = 1;
  if (cfg.backbone == Backbone::kDesk) {
    channels_ = {32, 32, 64, 128, 128};
  } else {
    channels_ = {64, 64, 128, 256, 512};
    blocks_per_stage = 2;
  }
  stem_ = register_module("stem", conv(3, channels_[0], 3, 1, 1));
  stages_ = register_module("stages", torch::nn::ModuleList());
  for (size_t s = 1; s < channels_.size(); ++s) {
    torch::nn::Sequential stage;
    for (int64_t b = 0; b < blocks_per_stage; ++b) {
      stage->push_back(ResidualBlock(b == 0 ? channels_[s - 1] : channels_[s], channels_[s],
                                     b == 0 ? 2 : 1));
    }
    stages_->push_back(stage);
  }
  head_ = register_module("head", torch::nn::Linear(channels_.back(), cfg.global_dim));
}

GlobalEncoderImpl::Output GlobalEncoderImpl::forward(const torch::Tensor& images) {
  Output out;
  auto x = lrelu(stem_(images));
  out.skips.push_back(x);
  for (const auto& stage : *stages_) {
    x = stage->as<torch::nn::SequentialImpl>()->forward(x);
    out.skips.push_back(x);
  }
  out.code = head_(x.mean({2, 3}));
  return out;
}

SpatialDecoderImpl::SpatialDecoderImpl(const ModelConfig& cfg,
                                       const std::vector<int64_t>& encoder_channels) {
  ups_ = register_module("ups", torch::nn::ModuleList());
  const auto levels = static_cast<int64_t>(encoder_channels.size());
  int64_t below = encoder_channels.back();
  for (int64_t level = levels - 2; level >= 0; --level) {
    const int64_t out = encoder_channels[level];
    ups_->push_back(conv(below + encoder_channels[level], out, 3, 1, 1));
    below = out;
  }
  project_ = register_module("project", conv(below + 3, cfg.spatial_dim, 3, 1, 1));
}

torch::Tensor SpatialDecoderImpl::forward(const std::vector<torch::Tensor>& skips,
                                          const torch::Tensor& images) {
  auto x = skips.back();
  auto level = static_cast<int64_t>(skips.size()) - 2;
  for (const auto& up : *ups_) {
    x = torch::cat({upsample2(x), skips[level]}, 1);
    x = lrelu(up->as<torch::nn::Conv2dImpl>()->forward(x));
    --level;
  }
  return project_(torch::cat({x, images}, 1));
}

SceneFieldImpl::SceneFieldImpl(const ModelConfig& cfg) : input_width_(cfg.field_input_width()) {
  trunk_ = register_module("trunk", torch::nn::ModuleList());
  int64_t width = input_width_;
  for (int64_t i = 0; i + 1 < cfg.field_layers; ++i) {
    trunk_->push_back(torch::nn::Linear(width, cfg.field_hidden));
    width = cfg.field_hidden;
  }
  feature_head_ = register_module("feature_head", torch::nn::Linear(width, cfg.feature_dim));
  occupancy_head_ = register_module("occupancy_head", torch::nn::Linear(width, 1));
}

std::pair<torch::Tensor, torch::Tensor> SceneFieldImpl::forward(const torch::Tensor& inputs) {
  auto x = inputs;
  for (const auto& layer : *trunk_) {
    x = torch::relu(layer->as<torch::nn::LinearImpl>()->forward(x));
  }
  return {feature_head_(x), occupancy_head_(x).squeeze(1)};
}

RefinerImpl::RefinerImpl(const ModelConfig& cfg) : background_(cfg.background) {
  const int64_t b = cfg.refiner_base;
  const std::vector<int64_t> c{b, 2 * b, 2 * b, 4 * b, 4 * b};
  in_ = register_module("inlet", SpectralConv2d(cfg.feature_dim + 1, c[0], 3, 1, 1));
  in_norm_ = register_module("inlet_norm", group_norm(c[0]));
  for (int i = 0; i < 4; ++i) {
    down_.push_back(
        register_module("down" + std::to_string(i), SpectralConv2d(c[i], c[i + 1], 4, 2, 1)));
    down_norm_.push_back(register_module("down" + std::to_string(i) + "_norm", group_norm(c[i + 1])));
  }
  // up_[i] restores level i from level i + 1.
  up_.resize(4, nullptr);
  up_norm_.resize(4, nullptr);
  for (int i = 3; i >= 0; --i) {
    up_[i] = register_module("up" + std::to_string(i),
                             SpectralConv2d(c[i + 1] + c[i], c[i], 3, 1, 1));
    up_norm_[i] = register_module("up" + std::to_string(i) + "_norm", group_norm(c[i]));
  }
  out_ = register_module("outlet", SpectralConv2d(c[0], 4, 3, 1, 1));
}

RefinerImpl::Output RefinerImpl::forward(const torch::Tensor& projected) {
  std::vector<torch::Tensor> levels;
  levels.push_back(lrelu(in_norm_(in_(projected))));
  for (size_t i = 0; i < down_.size(); ++i) {
    levels.push_back(lrelu(down_norm_[i](down_[i](levels.back()))));
  }
  auto x = levels.back();
  for (int i = 3; i >= 0; --i) {
    x = lrelu(up_norm_[i](up_[i](torch::cat({upsample2(x), levels[i]}, 1))));
  }
  auto logits = out_(x);
  auto color = torch::sigmoid(logits.slice(1, 0, 3));
  auto mask = torch::sigmoid(logits.slice(1, 3, 4));
  return {mask * color + (1 - mask) * background_, mask};
}

std::vector<SpectralConv2d> RefinerImpl::spectral_layers() const {
  std::vector<SpectralConv2d> out{in_};
  out.insert(out.end(), down_.begin(), down_.end());
  out.insert(out.end(), up_.begin(), up_.end());
  out.push_back(out_);
  return out;
}

PatchDiscriminatorImpl::PatchDiscriminatorImpl(const ModelConfig& cfg) {
  const int64_t b = cfg.discriminator_base;
  auto act = [] { return torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)); };
  net_ = register_module(
      "net", torch::nn::Sequential(conv(3, b, 4, 2, 1), act(), conv(b, 2 * b, 4, 2, 1), act(),
                                   conv(2 * b, 4 * b, 4, 2, 1), act(), conv(4 * b, 1, 3, 1, 1)));
}

torch::Tensor PatchDiscriminatorImpl::forward(const torch::Tensor& images) {
  return net_->forward(images);
}

}  // namespace corn
