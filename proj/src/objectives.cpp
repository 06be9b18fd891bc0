#include "corn/objectives.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <sstream>

#include "corn/errors.hpp"

namespace corn {
namespace {

namespace F = torch::nn::functional;

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) {
    std::ostringstream msg;
    msg << what << ": shape mismatch " << a.sizes() << " vs " << b.sizes();
    throw ShapeError(msg.str());
  }
}

torch::Tensor as_batch(const torch::Tensor& images) {
  return images.dim() == 3 ? images.unsqueeze(0) : images;
}

}  // namespace

void LossWeights::validate() const {
  for (double w : {trafo, consistency, occupancy, adversarial}) {
    if (!std::isfinite(w) || w < 0.0) throw InvalidInput("loss weights must be finite and >= 0");
  }
}

RandomFeaturePyramid::RandomFeaturePyramid(uint64_t seed, torch::Dtype dtype) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  const std::vector<int64_t> channels{3, 16, 32, 64, 64};
  for (size_t i = 0; i + 1 < channels.size(); ++i) {
    const double fan_in = static_cast<double>(channels[i] * 9);
    auto w = at::randn({channels[i + 1], channels[i], 3, 3}, gen, torch::kFloat64) *
             std::sqrt(2.0 / fan_in);
    weights_.push_back(w.to(dtype));
  }
}

std::vector<torch::Tensor> RandomFeaturePyramid::features(const torch::Tensor& images) const {
  std::vector<torch::Tensor> out;
  auto x = (as_batch(images) - 0.5) * 2.0;
  for (const auto& w : weights_) {
    x = F::leaky_relu(
        F::conv2d(x, w.to(x.scalar_type()), F::Conv2dFuncOptions().stride(2).padding(1)),
        F::LeakyReLUFuncOptions().negative_slope(0.2));
    out.push_back(x);
  }
  return out;
}

torch::Tensor l1_distance(const torch::Tensor& a, const torch::Tensor& b) {
  check_same_shape(a, b, "l1 distance");
  return (a - b).abs().mean();
}

torch::Tensor perceptual_distance(const torch::Tensor& a, const torch::Tensor& b,
                                  const PerceptualExtractor& extractor) {
  check_same_shape(a, b, "perceptual distance");
  auto fa = extractor.features(a);
  auto fb = extractor.features(b);
  auto total = torch::zeros({}, a.options());
  for (size_t i = 0; i < fa.size(); ++i) total = total + (fa[i] - fb[i]).abs().mean();
  return total;
}

torch::Tensor transformation_loss(const std::vector<torch::Tensor>& predicted,
                                  const std::vector<torch::Tensor>& targets,
                                  const PerceptualExtractor& extractor) {
  if (predicted.size() != targets.size() || predicted.empty()) {
    throw ShapeError("transformation loss needs matching, non-empty image lists");
  }
  auto total = torch::zeros({}, predicted.front().options());
  for (size_t i = 0; i < predicted.size(); ++i) {
    total = total + l1_distance(predicted[i], targets[i]) +
            perceptual_distance(predicted[i], targets[i], extractor);
  }
  return total;
}

torch::Tensor consistency_loss(const std::vector<FeatureCloud>& clouds) {
  if (clouds.size() < 2) throw InvalidInput("consistency loss needs at least two clouds");
  const auto& ref = clouds.front().points.coords;
  for (const auto& c : clouds) {
    if (!c.points.coords.is_same(ref) && !torch::equal(c.points.coords, ref)) {
      throw InvalidInput("consistency loss: clouds were evaluated on different point sets");
    }
    check_same_shape(c.features, clouds.front().features, "consistency loss");
  }
  auto total = torch::zeros({}, clouds.front().features.options());
  for (size_t i = 0; i < clouds.size(); ++i) {
    for (size_t j = i + 1; j < clouds.size(); ++j) {
      total = total + (clouds[j].features - clouds[i].features).abs().mean();
    }
  }
  return total;
}

torch::Tensor occupancy_loss(const torch::Tensor& predicted, const torch::Tensor& target) {
  check_same_shape(predicted, target, "occupancy loss");
  auto p = predicted.clamp(1e-7, 1.0 - 1e-7);
  auto t = target.to(p.scalar_type());
  return -(t * torch::log(p) + (1 - t) * torch::log(1 - p)).mean();
}

torch::Tensor lsgan_discriminator_loss(const torch::Tensor& real_scores,
                                       const torch::Tensor& fake_scores) {
  return (real_scores - 1).pow(2).mean() + fake_scores.pow(2).mean();
}

torch::Tensor lsgan_generator_loss(const torch::Tensor& fake_scores) {
  return (fake_scores - 1).pow(2).mean();
}

torch::Tensor adversarial_loss(PatchDiscriminator& discriminator, const torch::Tensor& real,
                               const torch::Tensor& fake, AdversarialMode mode) {
  if (mode == AdversarialMode::kGenerator) {
    return lsgan_generator_loss(discriminator->forward(as_batch(fake)));
  }
  return lsgan_discriminator_loss(discriminator->forward(as_batch(real)),
                                  discriminator->forward(as_batch(fake)));
}

WeightedLoss total_loss(const LossTerms& terms, const LossWeights& weights) {
  weights.validate();
  const std::pair<const char*, const torch::Tensor*> named[] = {
      {"trafo", &terms.trafo},
      {"consistency", &terms.consistency},
      {"occupancy", &terms.occupancy},
      {"adversarial", &terms.adversarial}};
  double values[4];
  for (int i = 0; i < 4; ++i) {
    values[i] = named[i].second->item<double>();
    if (!std::isfinite(values[i])) throw NonFiniteLoss(named[i].first);
  }
  WeightedLoss out;
  out.total = weights.trafo * terms.trafo + weights.consistency * terms.consistency +
              weights.occupancy * terms.occupancy + weights.adversarial * terms.adversarial;
  out.report.trafo = values[0];
  out.report.consistency = values[1];
  out.report.occupancy = values[2];
  out.report.adversarial = values[3];
  out.report.total = weights.trafo * values[0] + weights.consistency * values[1] +
                     weights.occupancy * values[2] + weights.adversarial * values[3];
  return out;
}

}  // namespace corn
