#include <algorithm>
#include <cmath>
#include <tuple>
#include <vector>

#include "corn/errors.hpp"
#include "corn/model.hpp"
#include "corn/renderer.hpp"
#include "doctest_torch.hpp"
#include "helpers.hpp"

using namespace corn;

namespace {

struct Splat {
  torch::Tensor pixels, depths, valid, features, logits;
};

Splat random_splat(std::mt19937_64& rng, int64_t k, int64_t channels, ImageSize size) {
  std::uniform_real_distribution<double> u(-0.5, size.width - 0.5), v(-0.5, size.height - 0.5);
  std::uniform_real_distribution<double> z(0.5, 3.0), lg(-3.0, 3.0), f(-1.0, 1.0);
  std::bernoulli_distribution tie(0.2);
  Splat s;
  s.pixels = torch::empty({k, 2}, torch::kFloat64);
  s.depths = torch::empty({k}, torch::kFloat64);
  s.logits = torch::empty({k}, torch::kFloat64);
  s.features = torch::empty({k, channels}, torch::kFloat64);
  for (int64_t j = 0; j < k; ++j) {
    s.pixels[j][0] = u(rng);
    s.pixels[j][1] = v(rng);
    // Occasional exact depth ties exercise the index tie-break.
    s.depths[j] = (j > 0 && tie(rng)) ? s.depths[j - 1].item<double>() : z(rng);
    s.logits[j] = lg(rng);
    for (int64_t c = 0; c < channels; ++c) s.features[j][c] = f(rng);
  }
  s.valid = torch::ones({k}, torch::kBool);
  return s;
}

// Brute-force reference: per pixel, collect every point within the radius,
// sort by (depth, index), keep top_k and composite front to back.
std::pair<torch::Tensor, torch::Tensor> oracle(const Splat& s, ImageSize size, const SplatConfig& cfg) {
  const int64_t k = s.pixels.size(0), channels = s.features.size(1);
  auto out = torch::zeros({channels, size.height, size.width}, torch::kFloat64);
  auto alpha = torch::zeros({size.height, size.width}, torch::kFloat64);
  for (int64_t y = 0; y < size.height; ++y) {
    for (int64_t x = 0; x < size.width; ++x) {
      std::vector<std::tuple<double, int64_t, double>> frags;
      for (int64_t j = 0; j < k; ++j) {
        if (!s.valid[j].item<bool>()) continue;
        const double du = x - s.pixels[j][0].item<double>();
        const double dv = y - s.pixels[j][1].item<double>();
        const double d = std::sqrt(du * du + dv * dv);
        if (d <= cfg.radius) frags.emplace_back(s.depths[j].item<double>(), j, d);
      }
      std::sort(frags.begin(), frags.end());
      if (static_cast<int64_t>(frags.size()) > cfg.top_k) frags.resize(cfg.top_k);
      double transmit = 1.0, covered = 0.0;
      for (const auto& [depth, j, d] : frags) {
        const double a = (1 - d / cfg.falloff) / (1 + std::exp(-s.logits[j].item<double>()));
        for (int64_t c = 0; c < channels; ++c) {
          out[c][y][x] += transmit * a * s.features[j][c].item<double>();
        }
        covered += transmit * a;
        transmit *= 1 - a;
      }
      alpha[y][x] = covered;
    }
  }
  return {out, alpha};
}

ProjectedFeatureMap run(const Splat& s, ImageSize size, const SplatConfig& cfg) {
  return splat_projected(s.pixels, s.depths, s.valid, s.features, s.logits, size, cfg);
}

}  // namespace

TEST_SUITE("renderer") {
  TEST_CASE("splat config validation") {
    SplatConfig cfg;
    CHECK(cfg.radius == 1.5);
    CHECK(cfg.falloff == 2 * cfg.radius);
    CHECK(cfg.top_k == 8);
    cfg.falloff = 1.0;
    CHECK_THROWS_AS(cfg.validate(), InvalidInput);
    cfg = {};
    cfg.radius = 0;
    CHECK_THROWS_AS(cfg.validate(), InvalidInput);
    cfg = {};
    cfg.top_k = 0;
    CHECK_THROWS_AS(cfg.validate(), InvalidInput);
  }

  TEST_CASE("one point on a pixel centre has weight one there") {
    Splat s{torch::tensor({3.0, 4.0}, torch::kFloat64).view({1, 2}), torch::tensor({1.0}, torch::kFloat64),
            torch::ones({1}, torch::kBool), torch::ones({1, 1}, torch::kFloat64),
            torch::tensor({50.0}, torch::kFloat64)};
    auto m = run(s, {8, 8}, {});
    CHECK(m.alpha[4][3].item<double>() == doctest::Approx(1.0));
    CHECK(m.features[0][4][3].item<double>() == doctest::Approx(1.0));
    // A neighbour at distance 1 gets 1 - 1/M.
    CHECK(m.alpha[4][4].item<double>() == doctest::Approx(1.0 - 1.0 / 3.0));
    CHECK(m.depth[4][3].item<double>() == 1.0);
  }

  TEST_CASE("a point farther than the radius from every pixel leaves a zero map") {
    SplatConfig cfg;
    cfg.radius = 0.4;
    cfg.falloff = 0.8;
    Splat s{torch::tensor({3.5, 3.5}, torch::kFloat64).view({1, 2}), torch::tensor({1.0}, torch::kFloat64),
            torch::ones({1}, torch::kBool), torch::ones({1, 2}, torch::kFloat64),
            torch::tensor({0.0}, torch::kFloat64)};
    auto m = run(s, {8, 8}, cfg);
    CHECK(m.features.abs().sum().item<double>() == 0.0);
    CHECK(m.alpha.abs().sum().item<double>() == 0.0);
  }

  TEST_CASE("nearer point with full alpha hides the farther one") {
    Splat s{torch::tensor({2.0, 2.0, 2.0, 2.0}, torch::kFloat64).view({2, 2}),
            torch::tensor({2.0, 1.0}, torch::kFloat64), torch::ones({2}, torch::kBool),
            torch::tensor({5.0, -3.0}, torch::kFloat64).view({2, 1}),
            torch::tensor({60.0, 60.0}, torch::kFloat64)};
    auto m = run(s, {5, 5}, {});
    CHECK(m.features[0][2][2].item<double>() == doctest::Approx(-3.0));
    CHECK(m.depth[2][2].item<double>() == 1.0);
  }

  TEST_CASE("empty and fully invalid clouds give an empty map") {
    Splat empty{torch::zeros({0, 2}, torch::kFloat64), torch::zeros({0}, torch::kFloat64),
                torch::zeros({0}, torch::kBool), torch::zeros({0, 4}, torch::kFloat64),
                torch::zeros({0}, torch::kFloat64)};
    auto m = run(empty, {6, 6}, {});
    CHECK(m.features.sizes() == std::vector<int64_t>{4, 6, 6});
    CHECK(m.alpha.abs().sum().item<double>() == 0.0);

    std::mt19937_64 rng(1);
    auto s = random_splat(rng, 5, 3, {6, 6});
    s.valid.fill_(false);
    auto n = run(s, {6, 6}, {});
    CHECK(n.alpha.abs().sum().item<double>() == 0.0);
    CHECK(n.features.abs().sum().item<double>() == 0.0);
  }

  TEST_CASE("compositing matches the brute-force oracle on 200 random configurations") {
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<int64_t> count(1, 5), side(4, 9);
    std::uniform_real_distribution<double> radius(0.6, 2.5);
    double worst = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
      SplatConfig cfg;
      cfg.radius = radius(rng);
      cfg.falloff = cfg.radius * 2;
      cfg.top_k = 1 + trial % 5;
      const ImageSize size{side(rng), side(rng)};
      auto s = random_splat(rng, count(rng), 3, size);
      auto m = run(s, size, cfg);
      auto [feat, alpha] = oracle(s, size, cfg);
      worst = std::max(worst, (m.features - feat).abs().max().item<double>());
      worst = std::max(worst, (m.alpha - alpha).abs().max().item<double>());
    }
    CHECK(worst < 1e-5);
  }

  TEST_CASE("float32 compositing agrees with the float64 oracle") {
    std::mt19937_64 rng(8);
    auto s = random_splat(rng, 5, 4, {8, 8});
    auto m = splat_projected(s.pixels.to(torch::kFloat32), s.depths.to(torch::kFloat32), s.valid,
                             s.features.to(torch::kFloat32), s.logits.to(torch::kFloat32), {8, 8}, {});
    auto [feat, alpha] = oracle(s, {8, 8}, {});
    CHECK((m.features.to(torch::kFloat64) - feat).abs().max().item<double>() < 1e-5);
  }

  TEST_CASE("alpha in [0, 1] and zero features where alpha is zero") {
    std::mt19937_64 rng(4);
    auto s = random_splat(rng, 30, 3, {10, 10});
    auto m = run(s, {10, 10}, {});
    CHECK(m.alpha.min().item<double>() >= 0.0);
    CHECK(m.alpha.max().item<double>() <= 1.0);
    auto empty = m.alpha.eq(0);
    CHECK(m.features.masked_select(empty.unsqueeze(0).expand_as(m.features)).abs().sum().item<double>() == 0.0);
  }

  TEST_CASE("gradients w.r.t. features and logits match finite differences") {
    std::mt19937_64 rng(77);
    const ImageSize size{8, 8};
    for (int trial = 0; trial < 5; ++trial) {
      auto s = random_splat(rng, 10, 3, size);
      auto w = torch::randn({3, 8, 8}, torch::kFloat64);
      auto wa = torch::randn({8, 8}, torch::kFloat64);
      auto objective = [&](const torch::Tensor& f, const torch::Tensor& l) {
        auto m = splat_projected(s.pixels, s.depths, s.valid, f, l, size, {});
        return (m.features * w).sum() + (m.alpha * wa).sum();
      };
      auto f = s.features.clone().requires_grad_(true);
      auto l = s.logits.clone().requires_grad_(true);
      objective(f, l).backward();
      auto nf = testing::numeric_grad(
          [&](const torch::Tensor& x) { return objective(x, s.logits).item<double>(); }, s.features, 1e-3);
      auto nl = testing::numeric_grad(
          [&](const torch::Tensor& x) { return objective(s.features, x).item<double>(); }, s.logits, 1e-3);
      CHECK(testing::rel_error(f.grad(), nf) < 1e-3);
      CHECK(testing::rel_error(l.grad(), nl) < 1e-3);
    }
  }

  TEST_CASE("position gradient follows the falloff derivative inside the radius") {
    // Points whose every pixel distance stays away from 0 and from r by more
    // than 2h, so the fragment sets do not change under the perturbation.
    const double h = 1e-4;
    const ImageSize size{8, 8};
    SplatConfig cfg;
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> u(1.0, 6.0);
    int checked = 0;
    while (checked < 5) {
      auto s = random_splat(rng, 6, 2, size);
      for (int64_t j = 0; j < 6; ++j) {
        s.pixels[j][0] = u(rng);
        s.pixels[j][1] = u(rng);
      }
      bool smooth = true;
      for (int64_t j = 0; j < 6 && smooth; ++j) {
        for (int64_t y = 0; y < 8 && smooth; ++y) {
          for (int64_t x = 0; x < 8; ++x) {
            const double d = std::hypot(x - s.pixels[j][0].item<double>(), y - s.pixels[j][1].item<double>());
            if (std::abs(d - cfg.radius) < 4 * h || d < 4 * h) {
              smooth = false;
              break;
            }
          }
        }
      }
      if (!smooth) continue;
      auto w = torch::randn({2, 8, 8}, torch::kFloat64);
      auto objective = [&](const torch::Tensor& p) {
        auto m = splat_projected(p, s.depths, s.valid, s.features, s.logits, size, cfg);
        return (m.features * w).sum() + m.alpha.sum();
      };
      auto p = s.pixels.clone().requires_grad_(true);
      objective(p).backward();
      auto np = testing::numeric_grad([&](const torch::Tensor& x) { return objective(x).item<double>(); },
                                      s.pixels, h);
      CHECK(testing::rel_error(p.grad(), np) < 1e-3);
      ++checked;
    }
  }

  TEST_CASE("raising a front point's occupancy never increases what shows through") {
    auto base = Splat{torch::tensor({2.0, 2.0, 2.2, 2.1}, torch::kFloat64).view({2, 2}),
                      torch::tensor({1.0, 2.0}, torch::kFloat64), torch::ones({2}, torch::kBool),
                      torch::tensor({0.0, 1.0}, torch::kFloat64).view({2, 1}),
                      torch::tensor({-2.0, 1.0}, torch::kFloat64)};
    // Front point carries feature 0, so the output is exactly the back point's contribution.
    double previous = 1e9;
    for (double logit = -4.0; logit <= 4.0; logit += 0.5) {
      base.logits[0] = logit;
      auto m = run(base, {5, 5}, {});
      const double back = m.features[0][2][2].item<double>();
      CHECK(back <= previous + 1e-15);
      previous = back;
    }
  }

  TEST_CASE("top_k keeps only the nearest fragments") {
    SplatConfig cfg;
    cfg.top_k = 1;
    Splat s{torch::tensor({2.0, 2.0, 2.0, 2.0}, torch::kFloat64).view({2, 2}),
            torch::tensor({1.0, 2.0}, torch::kFloat64), torch::ones({2}, torch::kBool),
            torch::tensor({1.0, 100.0}, torch::kFloat64).view({2, 1}),
            torch::tensor({0.0, 0.0}, torch::kFloat64)};
    auto m = run(s, {5, 5}, cfg);
    CHECK(m.features[0][2][2].item<double>() == doctest::Approx(0.5));
  }

  TEST_CASE("equal depths break ties by point index") {
    SplatConfig cfg;
    cfg.top_k = 1;
    Splat s{torch::tensor({2.0, 2.0, 2.0, 2.0}, torch::kFloat64).view({2, 2}),
            torch::tensor({1.0, 1.0}, torch::kFloat64), torch::ones({2}, torch::kBool),
            torch::tensor({7.0, 9.0}, torch::kFloat64).view({2, 1}),
            torch::tensor({40.0, 40.0}, torch::kFloat64)};
    CHECK(run(s, {5, 5}, cfg).features[0][2][2].item<double>() == doctest::Approx(7.0));
  }

  TEST_CASE("splat input shapes are checked") {
    std::mt19937_64 rng(1);
    auto s = random_splat(rng, 4, 2, {6, 6});
    CHECK_THROWS_AS(splat_projected(s.pixels, s.depths, s.valid, s.features, s.logits.slice(0, 0, 3),
                                    {6, 6}, {}),
                    ShapeError);
  }

  TEST_CASE("refiner output range, determinism and shape checks") {
    FieldParameters params(testing::tiny_model(), 3);
    params->eval();
    const auto cfg = params->config();
    ProjectedFeatureMap pm{torch::randn({cfg.feature_dim, 16, 16}), torch::rand({16, 16}),
                           torch::zeros({16, 16})};
    auto a = refine(pm, params);
    auto b = refine(pm, params);
    CHECK(a.rgb.sizes() == std::vector<int64_t>{3, 16, 16});
    CHECK(a.mask.sizes() == std::vector<int64_t>{16, 16});
    CHECK(a.rgb.min().item<float>() >= 0.0f);
    CHECK(a.rgb.max().item<float>() <= 1.0f);
    CHECK(a.mask.min().item<float>() >= 0.0f);
    CHECK(a.mask.max().item<float>() <= 1.0f);
    CHECK(torch::equal(a.rgb, b.rgb));
    ProjectedFeatureMap wrong{torch::randn({cfg.feature_dim, 8, 8}), torch::rand({8, 8}), torch::zeros({8, 8})};
    CHECK_THROWS_AS(refine(wrong, params), ShapeError);
  }

  TEST_CASE("spectral norm of every refiner layer is at most one after power iteration") {
    FieldParameters params(testing::tiny_model(), 5);
    for (auto& layer : params->refiner->spectral_layers()) {
      layer->power_iterate(200);
      auto w = layer->normalized_weight().detach().to(torch::kFloat64);
      auto sigma = torch::linalg_svdvals(w.reshape({w.size(0), -1}))[0].item<double>();
      CHECK(sigma <= 1.0 + 1e-2);
      CHECK(sigma >= 1.0 - 1e-2);
    }
    CHECK(params->refiner->spectral_layers().size() >= 9);
  }

  TEST_CASE("render equals build then splat and reuses the cloud across cameras") {
    FieldParameters params(testing::tiny_model(), 9);
    params->eval();
    torch::NoGradGuard ng;
    auto image = torch::rand({3, 16, 16});
    const auto src = orbit_camera(0, 0, 2.8, 40, {16, 16});
    const auto t1 = orbit_camera(40, 10, 2.8, 40, {16, 16});
    const auto t2 = orbit_camera(200, 20, 2.8, 40, {16, 16});
    const auto pts = sample_cube_points(500, 1.0, 4);
    auto cloud = build_feature_cloud(params, image, src, pts);
    auto r1 = render_cloud(cloud, t1, params, {});
    auto r2 = render_cloud(cloud, t2, params, {});
    CHECK(torch::allclose(r1.rgb, render(image, src, t1, pts, params, {}).rgb));
    CHECK(torch::allclose(r2.rgb, render(image, src, t2, pts, params, {}).rgb));
    CHECK(torch::equal(render(image, src, t1, pts, params, {}).rgb, r1.rgb));
  }
}
