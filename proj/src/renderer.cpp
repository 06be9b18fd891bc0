#include "corn/renderer.hpp"

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "corn/errors.hpp"

namespace corn {
namespace {

using torch::autograd::AutogradContext;
using torch::autograd::variable_list;

// [H*W, top_k] point indices per pixel, nearest first, -1 padded.
torch::Tensor collect_fragments(const torch::Tensor& pixels, const torch::Tensor& depths,
                                const torch::Tensor& valid, ImageSize size,
                                const SplatConfig& cfg) {
  const int64_t height = size.height;
  const int64_t width = size.width;
  const int64_t k = pixels.size(0);
  auto px = pixels.detach().to(torch::kFloat64).contiguous();
  auto dz = depths.detach().to(torch::kFloat64).contiguous();
  auto ok = valid.to(torch::kBool).contiguous();
  const auto* p = px.data_ptr<double>();
  const auto* z = dz.data_ptr<double>();
  const auto* v = ok.data_ptr<bool>();

  std::vector<std::vector<std::pair<double, int64_t>>> per_pixel(height * width);
  const double r = cfg.radius;
  for (int64_t j = 0; j < k; ++j) {
    if (!v[j]) continue;
    const double u = p[2 * j];
    const double w = p[2 * j + 1];
    const auto x0 = std::max<int64_t>(0, static_cast<int64_t>(std::ceil(u - r)));
    const auto x1 = std::min<int64_t>(width - 1, static_cast<int64_t>(std::floor(u + r)));
    const auto y0 = std::max<int64_t>(0, static_cast<int64_t>(std::ceil(w - r)));
    const auto y1 = std::min<int64_t>(height - 1, static_cast<int64_t>(std::floor(w + r)));
    for (int64_t y = y0; y <= y1; ++y) {
      for (int64_t x = x0; x <= x1; ++x) {
        const double du = static_cast<double>(x) - u;
        const double dv = static_cast<double>(y) - w;
        if (du * du + dv * dv <= r * r) per_pixel[y * width + x].emplace_back(z[j], j);
      }
    }
  }

  auto frags = torch::full({height * width, cfg.top_k}, -1, torch::kLong);
  auto* f = frags.data_ptr<int64_t>();
  for (int64_t pix = 0; pix < height * width; ++pix) {
    auto& list = per_pixel[pix];
    const auto keep = std::min<int64_t>(cfg.top_k, static_cast<int64_t>(list.size()));
    std::partial_sort(list.begin(), list.begin() + keep, list.end());
    for (int64_t i = 0; i < keep; ++i) f[pix * cfg.top_k + i] = list[i].second;
  }
  return frags;
}

template <typename T>
struct SplatKernel {
  const T* pixels;
  const T* features;
  const T* logits;
  const int64_t* frags;
  int64_t top_k;
  int64_t channels;
  int64_t width;
  int64_t plane;  // H * W
  double falloff;

  struct Layer {
    int64_t point;
    T weight;
    T sigma;
    T alpha;
    T transmit;  // product of (1 - alpha) over the layers in front
    T du, dv;    // pixel - centre
    T dist;
  };

  int64_t layers(int64_t pix, Layer* out) const {
    const T x = static_cast<T>(pix % width);
    const T y = static_cast<T>(pix / width);
    T transmit = 1;
    int64_t n = 0;
    for (; n < top_k; ++n) {
      const int64_t j = frags[pix * top_k + n];
      if (j < 0) break;
      Layer l;
      l.point = j;
      l.du = x - pixels[2 * j];
      l.dv = y - pixels[2 * j + 1];
      l.dist = std::sqrt(l.du * l.du + l.dv * l.dv);
      l.weight = T(1) - l.dist / static_cast<T>(falloff);
      l.sigma = T(1) / (T(1) + std::exp(-logits[j]));
      l.alpha = l.weight * l.sigma;
      l.transmit = transmit;
      transmit *= (T(1) - l.alpha);
      out[n] = l;
    }
    return n;
  }

  void forward(T* out, T* alpha) const {
    std::vector<Layer> buf(top_k);
    for (int64_t pix = 0; pix < plane; ++pix) {
      const int64_t n = layers(pix, buf.data());
      T covered = 0;
      for (int64_t i = 0; i < n; ++i) {
        const auto& l = buf[i];
        const T contrib = l.transmit * l.alpha;
        const T* f = features + l.point * channels;
        for (int64_t c = 0; c < channels; ++c) out[c * plane + pix] += contrib * f[c];
        covered += contrib;
      }
      alpha[pix] = covered;
    }
  }

  // out = sum_i T_i a_i f_i. With R_i the composite of the layers behind i,
  // d out / d a_i = T_i (f_i - R_i); the same holds for coverage with f = 1.
  void backward(const T* grad_out, const T* grad_alpha, T* grad_pixels, T* grad_features,
                T* grad_logits) const {
    std::vector<Layer> buf(top_k);
    std::vector<T> rest(channels);
    std::vector<T> g(channels);
    for (int64_t pix = 0; pix < plane; ++pix) {
      const int64_t n = layers(pix, buf.data());
      if (n == 0) continue;
      for (int64_t c = 0; c < channels; ++c) {
        g[c] = grad_out[c * plane + pix];
        rest[c] = 0;
      }
      const T ga = grad_alpha[pix];
      T rest_alpha = 0;
      for (int64_t i = n - 1; i >= 0; --i) {
        const auto& l = buf[i];
        const T* f = features + l.point * channels;
        T* gf = grad_features + l.point * channels;
        const T contrib = l.transmit * l.alpha;
        T g_alpha = ga * (T(1) - rest_alpha);
        for (int64_t c = 0; c < channels; ++c) {
          g_alpha += g[c] * (f[c] - rest[c]);
          gf[c] += contrib * g[c];
          rest[c] = l.alpha * f[c] + (T(1) - l.alpha) * rest[c];
        }
        g_alpha *= l.transmit;
        rest_alpha = l.alpha + (T(1) - l.alpha) * rest_alpha;

        grad_logits[l.point] += g_alpha * l.weight * l.sigma * (T(1) - l.sigma);
        if (l.dist > T(0)) {
          // w = 1 - |p - c| / M  =>  dw/dc = (p - c) / (M |p - c|)
          const T g_weight = g_alpha * l.sigma;
          const T scale = g_weight / (static_cast<T>(falloff) * l.dist);
          grad_pixels[2 * l.point] += scale * l.du;
          grad_pixels[2 * l.point + 1] += scale * l.dv;
        }
      }
    }
  }
};

class SplatFunction : public torch::autograd::Function<SplatFunction> {
 public:
  static variable_list forward(AutogradContext* ctx, torch::Tensor pixels, torch::Tensor features,
                               torch::Tensor logits, torch::Tensor frags, int64_t height,
                               int64_t width, double falloff) {
    pixels = pixels.contiguous();
    features = features.contiguous();
    logits = logits.contiguous();
    const int64_t channels = features.size(1);
    auto out = torch::zeros({channels, height, width}, features.options());
    auto alpha = torch::zeros({height, width}, features.options());
    AT_DISPATCH_FLOATING_TYPES(features.scalar_type(), "splat_forward", [&] {
      kernel<scalar_t>(pixels, features, logits, frags, height, width, falloff)
          .forward(out.data_ptr<scalar_t>(), alpha.data_ptr<scalar_t>());
    });
    ctx->save_for_backward({pixels, features, logits, frags});
    ctx->saved_data["height"] = height;
    ctx->saved_data["width"] = width;
    ctx->saved_data["falloff"] = falloff;
    return {out, alpha};
  }

  static variable_list backward(AutogradContext* ctx, variable_list grads) {
    auto saved = ctx->get_saved_variables();
    const auto& pixels = saved[0];
    const auto& features = saved[1];
    const auto& logits = saved[2];
    const auto& frags = saved[3];
    const int64_t height = ctx->saved_data["height"].toInt();
    const int64_t width = ctx->saved_data["width"].toInt();
    const double falloff = ctx->saved_data["falloff"].toDouble();

    auto grad_out = grads[0].defined() ? grads[0].contiguous()
                                       : torch::zeros({features.size(1), height, width},
                                                      features.options());
    auto grad_alpha =
        grads[1].defined() ? grads[1].contiguous() : torch::zeros({height, width}, features.options());
    auto grad_pixels = torch::zeros_like(pixels);
    auto grad_features = torch::zeros_like(features);
    auto grad_logits = torch::zeros_like(logits);
    AT_DISPATCH_FLOATING_TYPES(features.scalar_type(), "splat_backward", [&] {
      kernel<scalar_t>(pixels, features, logits, frags, height, width, falloff)
          .backward(grad_out.data_ptr<scalar_t>(), grad_alpha.data_ptr<scalar_t>(),
                    grad_pixels.data_ptr<scalar_t>(), grad_features.data_ptr<scalar_t>(),
                    grad_logits.data_ptr<scalar_t>());
    });
    return {grad_pixels, grad_features,   grad_logits,     torch::Tensor(),
            torch::Tensor(), torch::Tensor(), torch::Tensor()};
  }

 private:
  template <typename T>
  static SplatKernel<T> kernel(const torch::Tensor& pixels, const torch::Tensor& features,
                               const torch::Tensor& logits, const torch::Tensor& frags,
                               int64_t height, int64_t width, double falloff) {
    return SplatKernel<T>{pixels.data_ptr<T>(), features.data_ptr<T>(), logits.data_ptr<T>(),
                          frags.data_ptr<int64_t>(), frags.size(1),  features.size(1),
                          width,                    height * width,  falloff};
  }
};

}  // namespace

void SplatConfig::validate() const {
  if (!(radius > 0.0)) throw InvalidInput("splat radius must be positive");
  if (!(falloff >= radius)) throw InvalidInput("splat falloff M must be >= radius");
  if (top_k < 1) throw InvalidInput("splat top_k must be >= 1");
}

ProjectedFeatureMap splat_projected(const torch::Tensor& pixels, const torch::Tensor& depths,
                                    const torch::Tensor& valid, const torch::Tensor& features,
                                    const torch::Tensor& logits, ImageSize size,
                                    const SplatConfig& cfg) {
  cfg.validate();
  const int64_t k = features.size(0);
  if (pixels.dim() != 2 || pixels.size(0) != k || pixels.size(1) != 2 || depths.size(0) != k ||
      valid.size(0) != k || logits.dim() != 1 || logits.size(0) != k) {
    throw ShapeError("splat inputs disagree on the point count");
  }
  auto frags = collect_fragments(pixels, depths, valid, size, cfg);
  auto px = pixels.to(features.scalar_type());
  auto lg = logits.to(features.scalar_type());
  auto outs = SplatFunction::apply(px, features, lg, frags, size.height, size.width, cfg.falloff);

  // Depth of the nearest fragment; not differentiable.
  auto nearest = frags.select(1, 0);
  auto depth = torch::zeros({size.height, size.width}, features.options().requires_grad(false));
  if (k > 0) {
    auto gathered = depths.detach().to(features.scalar_type()).index_select(0, nearest.clamp_min(0));
    depth = torch::where(nearest >= 0, gathered, torch::zeros_like(gathered)).reshape({size.height, size.width});
  }
  return {outs[0], outs[1], depth};
}

ProjectedFeatureMap splat(const FeatureCloud& cloud, const Camera& camera, const SplatConfig& cfg) {
  auto coords = cloud.points.coords.to(cloud.features.scalar_type());
  auto proj = project_points(coords, camera);
  return splat_projected(proj.pixels, proj.depths, proj.valid, cloud.features,
                         cloud.occupancy_logits, camera.image_size(), cfg);
}

RefinedImage refine(const ProjectedFeatureMap& projected, FieldParameters& params) {
  const auto& cfg = params->config();
  if (projected.features.dim() != 3 || projected.features.size(0) != cfg.feature_dim) {
    throw ShapeError("projected feature map must have " + std::to_string(cfg.feature_dim) +
                     " channels");
  }
  if (projected.features.size(1) != cfg.image_size || projected.features.size(2) != cfg.image_size) {
    throw ShapeError("projected feature map resolution does not match the refiner");
  }
  auto input = torch::cat({projected.features, projected.alpha.unsqueeze(0)}, 0).unsqueeze(0);
  auto out = params->refiner->forward(input);
  return {out.rgb.squeeze(0), out.mask.squeeze(0).squeeze(0)};
}

RenderOutput render_cloud(const FeatureCloud& cloud, const Camera& target, FieldParameters& params,
                          const SplatConfig& cfg) {
  auto projected = splat(cloud, target, cfg);
  auto refined = refine(projected, params);
  return {refined.rgb, refined.mask, projected.alpha};
}

RenderOutput render(const torch::Tensor& image, const Camera& source, const Camera& target,
                    const PointSet& points, FieldParameters& params, const SplatConfig& cfg) {
  auto cloud = build_feature_cloud(params, image, source, points);
  return render_cloud(cloud, target, params, cfg);
}

}  // namespace corn
