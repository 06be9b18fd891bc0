#pragma once

#include <torch/torch.h>

#include <memory>
#include <string>
#include <vector>

#include "corn/model.hpp"

namespace corn {

struct LossWeights {
  double trafo = 1.0;
  double consistency = 1.0;
  double occupancy = 0.5;
  double adversarial = 0.01;

  void validate() const;
};

struct LossReport {
  double trafo = 0.0;
  double consistency = 0.0;
  double occupancy = 0.0;
  double adversarial = 0.0;
  double total = 0.0;
  double discriminator = 0.0;  // filled by the training step; not part of the total
};

// Feature extractor behind the perceptual distance. Implementations must be
// frozen: they take no part in optimisation.
class PerceptualExtractor {
 public:
  virtual ~PerceptualExtractor() = default;
  // images [B, 3, H, W] -> one feature map per level
  virtual std::vector<torch::Tensor> features(const torch::Tensor& images) const = 0;
};

// Four strided 3x3 convolutions with LeakyReLU, weights drawn once from a
// fixed seed and never trained. A training-free stand-in for a pretrained
// classifier's feature stack.
class RandomFeaturePyramid final : public PerceptualExtractor {
 public:
  static constexpr uint64_t kDefaultSeed = 0x5eed'c0de'2020ULL;
  explicit RandomFeaturePyramid(uint64_t seed = kDefaultSeed, torch::Dtype dtype = torch::kFloat32);

  std::vector<torch::Tensor> features(const torch::Tensor& images) const override;

 private:
  std::vector<torch::Tensor> weights_;
};

// Mean absolute difference over all elements.
torch::Tensor l1_distance(const torch::Tensor& a, const torch::Tensor& b);

// Sum over extractor levels of the mean absolute feature difference.
torch::Tensor perceptual_distance(const torch::Tensor& a, const torch::Tensor& b,
                                  const PerceptualExtractor& extractor);

// Sum over image pairs of L1 + perceptual distance, unweighted.
torch::Tensor transformation_loss(const std::vector<torch::Tensor>& predicted,
                                  const std::vector<torch::Tensor>& targets,
                                  const PerceptualExtractor& extractor);

// Sum over unordered pairs of clouds of the mean absolute feature difference.
// All clouds must share the same point set.
torch::Tensor consistency_loss(const std::vector<FeatureCloud>& clouds);

// Mean binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7].
torch::Tensor occupancy_loss(const torch::Tensor& predicted, const torch::Tensor& target);

enum class AdversarialMode { kGenerator, kDiscriminator };

// Least-squares objective on patch score maps.
torch::Tensor lsgan_discriminator_loss(const torch::Tensor& real_scores,
                                       const torch::Tensor& fake_scores);
torch::Tensor lsgan_generator_loss(const torch::Tensor& fake_scores);

// Images are [B, 3, H, W] (or [3, H, W]).
torch::Tensor adversarial_loss(PatchDiscriminator& discriminator, const torch::Tensor& real,
                               const torch::Tensor& fake, AdversarialMode mode);

struct LossTerms {
  torch::Tensor trafo;
  torch::Tensor consistency;
  torch::Tensor occupancy;
  torch::Tensor adversarial;
};

struct WeightedLoss {
  torch::Tensor total;
  LossReport report;
};

// Weighted sum of the four terms. Throws NonFiniteLoss naming the first
// non-finite term.
WeightedLoss total_loss(const LossTerms& terms, const LossWeights& weights);

}  // namespace corn
