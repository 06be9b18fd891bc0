#include "corn/model.hpp"

#include "corn/errors.hpp"
#include "doctest_torch.hpp"
#include "helpers.hpp"

using namespace corn;

namespace {

torch::Tensor random_image(int64_t size, uint64_t seed) {
  torch::manual_seed(seed);
  return torch::rand({3, size, size});
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("config validation") {
    ModelConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    CHECK(cfg.field_input_width() == cfg.global_dim + cfg.spatial_dim + 60);
    cfg.image_size = 24;  // not divisible by 16
    CHECK_THROWS_AS(cfg.validate(), InvalidInput);
    cfg = ModelConfig{};
    cfg.field_layers = 0;
    CHECK_THROWS_AS(cfg.validate(), InvalidInput);
    CHECK(parse_backbone("resnet18") == Backbone::kResNet18);
    CHECK(to_string(parse_backbone(to_string(Backbone::kDesk))) == "desk");
    CHECK_THROWS_AS(parse_backbone("vgg"), InvalidInput);
  }

  TEST_CASE("encoder output shapes") {
    for (int64_t size : {32, 64}) {
      ModelConfig cfg;
      cfg.image_size = size;
      cfg.field_hidden = 32;
      cfg.refiner_base = 8;
      cfg.discriminator_base = 8;
      FieldParameters params(cfg, 1);
      torch::NoGradGuard ng;
      auto codes = encode(params, random_image(size, 2));
      CHECK(codes.global_code.sizes() == std::vector<int64_t>{128});
      CHECK(codes.spatial_map.sizes() == std::vector<int64_t>{64, size, size});
    }
  }

  TEST_CASE("wrong image shapes are rejected") {
    FieldParameters params(testing::tiny_model());
    CHECK_THROWS_AS(encode(params, torch::rand({3, 32, 32})), ShapeError);
    CHECK_THROWS_AS(encode(params, torch::rand({1, 16, 16})), ShapeError);
    CHECK_THROWS_AS(encode(params, torch::rand({16, 16})), ShapeError);
  }

  TEST_CASE("encoding is deterministic for a seed") {
    FieldParameters a(testing::tiny_model(), 9), b(testing::tiny_model(), 9),
        c(testing::tiny_model(), 10);
    a->eval();
    b->eval();
    c->eval();
    auto img = random_image(16, 3);
    auto ca = encode(a, img), cb = encode(b, img), cc = encode(c, img);
    CHECK(torch::equal(ca.global_code, cb.global_code));
    CHECK(torch::equal(ca.spatial_map, cb.spatial_map));
    CHECK_FALSE(torch::equal(ca.global_code, cc.global_code));
  }

  TEST_CASE("a black image gives finite codes") {
    FieldParameters params(testing::tiny_model());
    auto codes = encode(params, torch::zeros({3, 16, 16}));
    CHECK(torch::isfinite(codes.global_code).all().item<bool>());
    CHECK(torch::isfinite(codes.spatial_map).all().item<bool>());
  }

  TEST_CASE("field evaluation is row-wise") {
    FieldParameters params(testing::tiny_model(), 4);
    params->eval();
    const auto& cfg = params->config();
    torch::manual_seed(5);
    const int64_t k = 37;
    auto z = torch::randn({cfg.global_dim});
    auto local = torch::randn({k, cfg.spatial_dim});
    auto enc = positional_encode(torch::rand({k, 3}) * 2 - 1, cfg.encoding_levels);
    auto full = field_eval(params, z, local, enc);
    CHECK(full.features.sizes() == std::vector<int64_t>{k, cfg.feature_dim});
    CHECK(full.occupancy_logits.sizes() == std::vector<int64_t>{k});

    SUBCASE("permutation equivariance") {
      auto perm = torch::randperm(k);
      auto permuted = field_eval(params, z, local.index_select(0, perm), enc.index_select(0, perm));
      CHECK(torch::allclose(permuted.features, full.features.index_select(0, perm), 1e-5, 1e-6));
      CHECK(torch::allclose(permuted.occupancy_logits,
                            full.occupancy_logits.index_select(0, perm), 1e-5, 1e-6));
    }
    SUBCASE("one row at a time agrees with the batch") {
      for (int64_t i = 0; i < k; i += 6) {
        auto one = field_eval(params, z, local.slice(0, i, i + 1), enc.slice(0, i, i + 1));
        CHECK(torch::allclose(one.features[0], full.features[i], 1e-5, 1e-6));
        CHECK(torch::allclose(one.occupancy_logits[0], full.occupancy_logits[i], 1e-5, 1e-6));
      }
    }
    SUBCASE("width mismatches") {
      CHECK_THROWS_AS(field_eval(params, z.slice(0, 1), local, enc), ShapeError);
      CHECK_THROWS_AS(field_eval(params, z, local.slice(1, 1), enc), ShapeError);
      CHECK_THROWS_AS(field_eval(params, z, local, enc.slice(1, 1)), ShapeError);
      CHECK_THROWS_AS(field_eval(params, z, local.slice(0, 1), enc), ShapeError);
    }
  }

  TEST_CASE("points outside the source view get zero local features") {
    FieldParameters params(testing::tiny_model(), 6);
    params->eval();
    const auto& cfg = params->config();
    auto cam = orbit_camera(0, 0, 2.8, 40, {16, 16});
    // The first point is behind the camera, the second projects far outside.
    auto coords = torch::tensor({{0.0, 0.0, 3.5}, {5.0, 0.0, 1.0}, {0.0, 0.0, 0.0}}, torch::kFloat64);
    PointSet points(coords, 6.0);
    auto img = random_image(16, 7);
    auto codes = encode(params, img);
    auto cloud = build_feature_cloud(params, codes, cam, points);
    auto enc = positional_encode(coords.to(torch::kFloat32), cfg.encoding_levels);
    auto zero_local = field_eval(params, codes.global_code, torch::zeros({3, cfg.spatial_dim}), enc);
    CHECK(torch::allclose(cloud.features[0], zero_local.features[0], 1e-5, 1e-6));
    CHECK(torch::allclose(cloud.features[1], zero_local.features[1], 1e-5, 1e-6));
    CHECK_FALSE(torch::allclose(cloud.features[2], zero_local.features[2], 1e-5, 1e-6));
  }

  TEST_CASE("camera size must match the spatial map") {
    FieldParameters params(testing::tiny_model());
    auto codes = encode(params, random_image(16, 1));
    auto cam = orbit_camera(0, 0, 2.8, 40, {32, 32});
    CHECK_THROWS_AS(build_feature_cloud(params, codes, cam, sample_cube_points(8, 1.0, 1)),
                    ShapeError);
  }

  TEST_CASE("gradients reach every generator group") {
    FieldParameters params(testing::tiny_model(), 8);
    auto cam = orbit_camera(30, 10, 2.8, 40, {16, 16});
    auto cloud = build_feature_cloud(params, random_image(16, 9), cam, sample_cube_points(256, 1.0, 2));
    auto out = params->refiner->forward(
        torch::cat({cloud.features.mean(0).view({1, -1, 1, 1}).expand({1, -1, 16, 16}),
                    torch::sigmoid(cloud.occupancy_logits).mean().view({1, 1, 1, 1}).expand({1, 1, 16, 16})},
                   1));
    (out.rgb.sum() + out.mask.sum()).backward();
    for (const auto& group : {"global_encoder", "spatial_encoder", "field", "refiner"}) {
      double total = 0.0;
      for (const auto& p : params->group_parameters(group)) {
        if (p.grad().defined()) total += p.grad().abs().sum().item<double>();
      }
      CHECK_MESSAGE(total > 0.0, group);
    }
    CHECK_THROWS_AS(params->group_parameters("decoder"), InvalidInput);
  }

  TEST_CASE("parameter groups partition the module") {
    FieldParameters params(testing::tiny_model());
    size_t sum = 0;
    for (const auto& g : FieldParametersImpl::group_names()) sum += params->group_parameters(g).size();
    CHECK(sum == params->parameters().size());
    CHECK(params->generator_parameters().size() + params->discriminator_parameters().size() == sum);
  }

  TEST_CASE("occupancy probabilities lie in the open unit interval") {
    FieldParameters params(testing::tiny_model(), 3);
    auto cloud = build_feature_cloud(params, random_image(16, 4), orbit_camera(0, 0, 2.8, 40, {16, 16}),
                                     sample_cube_points(512, 1.0, 5));
    auto p = torch::sigmoid(cloud.occupancy_logits.to(torch::kFloat64));
    CHECK((p > 0).all().item<bool>());
    CHECK((p < 1).all().item<bool>());
  }

  TEST_CASE("external encoder weights") {
    testing::TempDir dir("encoder");
    FieldParameters source(testing::tiny_model(), 11), target(testing::tiny_model(), 12);
    torch::serialize::OutputArchive archive;
    source->global_encoder->save(archive);
    archive.save_to((dir / "enc.pt").string());
    load_encoder_weights(target, (dir / "enc.pt").string());
    source->eval();
    target->eval();
    auto img = random_image(16, 1);
    CHECK(torch::equal(encode_global(source, img), encode_global(target, img)));
    CHECK_THROWS_AS(load_encoder_weights(target, (dir / "missing.pt").string()), IoError);

    ModelConfig wide = testing::tiny_model();
    wide.backbone = Backbone::kResNet18;
    FieldParameters other(wide);
    CHECK_THROWS_AS(load_encoder_weights(other, (dir / "enc.pt").string()), IoError);
  }
}
