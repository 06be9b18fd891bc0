#include "corn/training.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "corn/errors.hpp"
#include "doctest_torch.hpp"
#include "helpers.hpp"

using namespace corn;

namespace {

// Three training objects and one held-out object, 18 poses each, 32 px.
const std::filesystem::path& small_dataset() {
  static testing::TempDir dir("train_data");
  static bool made = false;
  if (!made) {
    SyntheticConfig cfg;
    cfg.objects = 3;
    cfg.heldout = 1;
    cfg.grid.azimuth_steps = 6;
    cfg.seed = 3;
    generate_synthetic(cfg, dir.path());
    made = true;
  }
  return dir.path();
}

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.model = testing::tiny_model();
  cfg.model.image_size = 32;
  cfg.model.global_dim = 16;
  cfg.model.spatial_dim = 8;
  cfg.model.feature_dim = 8;
  cfg.points = 192;
  cfg.batch_size = 2;
  cfg.iterations = 5;
  cfg.checkpoint_interval = 3;
  cfg.seed = 21;
  return cfg;
}

bool same_tensors(const torch::OrderedDict<std::string, torch::Tensor>& a,
                  const torch::OrderedDict<std::string, torch::Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (const auto& item : a) {
    const auto* other = b.find(item.key());
    if (other == nullptr || !torch::equal(item.value(), *other)) return false;
  }
  return true;
}

std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  return lines;
}

}  // namespace

TEST_SUITE("training") {
  TEST_CASE("config key-value round trip") {
    TrainConfig cfg = small_config();
    cfg.lr_generator = 3.3e-5;
    cfg.weights.adversarial = 0.123456789012345;
    cfg.splat.radius = 1.7;
    cfg.model.backbone = Backbone::kResNet18;
    auto back = TrainConfig::from_key_values(cfg.to_key_values());
    CHECK(back.to_key_values() == cfg.to_key_values());
    CHECK(back.lr_generator == cfg.lr_generator);
    CHECK(back.weights.adversarial == cfg.weights.adversarial);
    CHECK(back.model.backbone == Backbone::kResNet18);

    KeyValues bad{{"iteratons", "3"}};
    CHECK_THROWS_AS(TrainConfig::from_key_values(bad), InvalidInput);
    KeyValues malformed{{"iterations", "three"}};
    CHECK_THROWS_AS(TrainConfig::from_key_values(malformed), InvalidInput);
    TrainConfig empty_range;
    empty_range.goal_elevation_min = 30;
    CHECK_THROWS_AS(empty_range.validate(), InvalidInput);
  }

  TEST_CASE("rng streams serialize exactly") {
    RngStreams r(5);
    r.points.discard(17);
    auto back = RngStreams::deserialize(r.serialize());
    CHECK(back == r);
    CHECK(back.points() == r.points());
    CHECK_FALSE(RngStreams(5) == RngStreams(6));
    CHECK_THROWS_AS(RngStreams::deserialize("garbage"), InvalidInput);
  }

  TEST_CASE("designated source views are distinct and stable") {
    for (int i = 0; i < 200; ++i) {
      const auto id = "obj_" + std::to_string(i);
      auto [a, b] = designate_source_views(id, 108, 4);
      CHECK(a != b);
      CHECK(a >= 0);
      CHECK(b < 108);
      CHECK(designate_source_views(id, 108, 4) == std::make_pair(a, b));
    }
    CHECK(designate_source_views("x", 2, 0).first != designate_source_views("x", 2, 0).second);
    CHECK_THROWS_AS(designate_source_views("x", 1, 0), InvalidInput);
  }

  TEST_CASE("camera angles follow the orbit convention") {
    const auto cam = orbit_camera(250, 15, 2.8, 40, {32, 32});
    CHECK(camera_azimuth(cam) == doctest::Approx(250.0));
    CHECK(camera_elevation(cam) == doctest::Approx(15.0));
  }

  TEST_CASE("goal pose sampling") {
    ViewGrid grid;
    std::vector<Camera> poses;
    for (int64_t v = 0; v < grid.size(); ++v) poses.push_back(grid.camera(v, {32, 32}));
    std::mt19937_64 rng(12);

    SUBCASE("never a source pose and always inside the elevation range") {
      for (int i = 0; i < 2000; ++i) {
        const auto g = sample_goal_pose(poses, 3, 40, 0.0, 10.0, rng);
        CHECK(g != 3);
        CHECK(g != 40);
        CHECK(grid.elevation(g) <= 10.0);
      }
      CHECK_THROWS_AS(sample_goal_pose(poses, 3, 40, 50.0, 60.0, rng), InvalidInput);
    }
    SUBCASE("poses equal to a source are excluded") {
      std::vector<Camera> dup = {poses[0], poses[0], poses[1], poses[2]};
      for (int i = 0; i < 200; ++i) {
        const auto g = sample_goal_pose(dup, 0, 2, 0.0, 20.0, rng);
        CHECK(g == 3);
      }
    }
    SUBCASE("azimuth marginal is uniform") {
      // Sources drawn afresh per draw; by symmetry every azimuth bin has
      // probability 1/36. Five independent chi-square tests of 10^4 draws
      // (35 degrees of freedom, alpha 0.01); a correct sampler fails two or
      // more of them with probability about 1e-3.
      int passed = 0;
      for (uint64_t rep = 0; rep < 5; ++rep) {
        std::vector<int> counts(36, 0);
        const int draws = 10000;
        std::mt19937_64 src(99 + rep), goal_rng(12 + rep);
        for (int i = 0; i < draws; ++i) {
          auto [a, b] = designate_source_views("draw" + std::to_string(src()), grid.size(), 0);
          const auto g = sample_goal_pose(poses, a, b, 0.0, 20.0, goal_rng);
          const auto bin = static_cast<int>(std::lround(camera_azimuth(poses[g]) / 10.0)) % 36;
          counts[bin]++;
        }
        double chi2 = 0.0;
        const double expected = draws / 36.0;
        for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
        INFO("replicate " << rep << " chi2 = " << chi2);
        passed += chi2 < 57.342;
      }
      CHECK(passed >= 4);
    }
  }

  TEST_CASE("batch schedule covers every object once per epoch") {
    for (int64_t b : {1, 2, 3}) {
      std::multiset<size_t> seen;
      // 6 objects, batch b: 6/b iterations form one epoch.
      for (int64_t it = 0; it < 6 / b; ++it) {
        for (size_t i : batch_schedule(6, b, it, 8)) seen.insert(i);
      }
      for (size_t i = 0; i < 6; ++i) CHECK(seen.count(i) == 1);
    }
    CHECK(batch_schedule(6, 2, 41, 8) == batch_schedule(6, 2, 41, 8));
    CHECK_THROWS_AS(batch_schedule(0, 1, 0, 0), InvalidInput);
  }

  TEST_CASE("chains with the goal at the second source") {
    auto ds = Dataset::open(small_dataset());
    auto cfg = small_config();
    auto examples = load_training_examples(ds, cfg.seed);
    auto state = make_train_state(cfg);
    state.params->eval();
    torch::NoGradGuard no_grad;
    const auto& ex = examples[0];
    const auto points = sample_cube_points(cfg.points, cfg.cube_extent, 1);
    auto out = run_chains(state.params, ex, ex.second.camera, points, cfg.splat);
    REQUIRE(out.hops.size() == 6);
    CHECK((out.hops[1] - identity_rigid()).abs().max().item<double>() < 1e-9);
    CHECK((out.hops[2] - identity_rigid()).abs().max().item<double>() < 1e-9);
    CHECK((out.hops[4] - out.hops[0]).abs().max().item<double>() < 1e-9);
    // Rendering V1 into the goal equals rendering it into the second view.
    CHECK(torch::allclose(out.goal_from_first.rgb, out.second_direct.rgb, 1e-5, 1e-6));
    CHECK(out.clouds.size() == 4);
    for (const auto* r : {&out.goal_from_first, &out.goal_from_second, &out.second_via_goal,
                          &out.first_via_goal, &out.second_direct, &out.first_direct}) {
      CHECK(r->rgb.sizes() == std::vector<int64_t>{3, 32, 32});
    }
  }

  TEST_CASE("non-updating steps are pure") {
    auto ds = Dataset::open(small_dataset());
    auto cfg = small_config();
    auto examples = load_training_examples(ds, cfg.seed);
    auto state = make_train_state(cfg);
    const RandomFeaturePyramid perceptual;
    std::vector<const TrainingExample*> batch{&examples[0], &examples[1]};
    const auto before = state.params->named_parameters();
    std::vector<torch::Tensor> snapshot;
    for (const auto& p : before) snapshot.push_back(p.value().clone());
    const auto rng_before = state.rng;

    StepOptions eval_only;
    eval_only.update = false;
    auto a = training_step(batch, state, cfg, perceptual, eval_only);
    auto b = training_step(batch, state, cfg, perceptual, eval_only);
    CHECK(a.total == b.total);
    CHECK(a.trafo == b.trafo);
    CHECK(a.discriminator == b.discriminator);
    CHECK(state.iteration == 0);
    CHECK(state.rng == rng_before);
    size_t i = 0;
    for (const auto& p : state.params->named_parameters()) CHECK(torch::equal(p.value(), snapshot[i++]));
    CHECK(std::isfinite(a.total));
    CHECK(a.total == doctest::Approx(cfg.weights.trafo * a.trafo + cfg.weights.consistency * a.consistency +
                                     cfg.weights.occupancy * a.occupancy +
                                     cfg.weights.adversarial * a.adversarial));
  }

  TEST_CASE("generator and discriminator updates touch only their own parameters") {
    auto ds = Dataset::open(small_dataset());
    auto cfg = small_config();
    auto examples = load_training_examples(ds, cfg.seed);
    const RandomFeaturePyramid perceptual;
    std::vector<const TrainingExample*> batch{&examples[0]};

    auto snapshot = [](const std::vector<torch::Tensor>& ps) {
      std::vector<torch::Tensor> out;
      for (const auto& p : ps) out.push_back(p.detach().clone());
      return out;
    };
    auto unchanged = [](const std::vector<torch::Tensor>& ps, const std::vector<torch::Tensor>& old) {
      for (size_t i = 0; i < ps.size(); ++i) {
        if (!torch::equal(ps[i], old[i])) return false;
      }
      return true;
    };

    SUBCASE("frozen generator") {
      auto state = make_train_state(cfg);
      state.generator_opt = std::make_unique<torch::optim::Adam>(
          state.params->generator_parameters(), torch::optim::AdamOptions(0.0));
      auto gen = snapshot(state.params->generator_parameters());
      auto disc = snapshot(state.params->discriminator_parameters());
      training_step(batch, state, cfg, perceptual);
      CHECK(unchanged(state.params->generator_parameters(), gen));
      CHECK_FALSE(unchanged(state.params->discriminator_parameters(), disc));
    }
    SUBCASE("frozen discriminator") {
      auto state = make_train_state(cfg);
      state.discriminator_opt = std::make_unique<torch::optim::Adam>(
          state.params->discriminator_parameters(), torch::optim::AdamOptions(0.0));
      auto gen = snapshot(state.params->generator_parameters());
      auto disc = snapshot(state.params->discriminator_parameters());
      training_step(batch, state, cfg, perceptual);
      CHECK(unchanged(state.params->discriminator_parameters(), disc));
      CHECK_FALSE(unchanged(state.params->generator_parameters(), gen));
    }
  }

  TEST_CASE("checkpoints round trip bit-exactly") {
    testing::TempDir dir("ckpt");
    auto ds = Dataset::open(small_dataset());
    auto cfg = small_config();
    auto examples = load_training_examples(ds, cfg.seed);
    auto state = make_train_state(cfg);
    const RandomFeaturePyramid perceptual;
    training_step({&examples[0], &examples[2]}, state, cfg, perceptual);

    const auto path = dir / checkpoint_name(state.iteration);
    CHECK(path.filename() == "ckpt_000001");
    save_checkpoint(path, state, cfg);
    auto ck = load_checkpoint(path);
    CHECK(ck.config.to_key_values() == cfg.to_key_values());
    CHECK(ck.state.iteration == 1);
    CHECK(ck.state.rng == state.rng);
    CHECK(same_tensors(ck.state.params->named_parameters(), state.params->named_parameters()));
    CHECK(same_tensors(ck.state.params->named_buffers(), state.params->named_buffers()));

    // The restored optimiser continues exactly like the original.
    auto a = training_step({&examples[1]}, state, cfg, perceptual);
    auto b = training_step({&examples[1]}, ck.state, cfg, perceptual);
    CHECK(a.total == b.total);
    CHECK(same_tensors(ck.state.params->named_parameters(), state.params->named_parameters()));

    CHECK_THROWS_AS(load_checkpoint(dir / "nothing"), IoError);
    std::ofstream(dir / "junk") << "not a checkpoint";
    CHECK_THROWS_AS(load_checkpoint(dir / "junk"), IoError);
  }

  TEST_CASE("train writes one log row per iteration and audits image access") {
    testing::TempDir dir("train_run");
    auto ds = Dataset::open(small_dataset());
    auto cfg = small_config();
    auto log = std::make_shared<AccessLog>();
    TrainOptions opts;
    opts.access_log = log;
    auto result = train(ds, cfg, dir.path(), opts);
    CHECK(result.state.iteration == 5);
    CHECK(result.history.size() == 5);
    const auto lines = read_lines(result.log_path);
    REQUIRE(lines.size() == 6);
    CHECK(lines[0] == "iteration,trafo,consistency,occupancy,adversarial,total,discriminator");
    CHECK(lines[5].rfind("5,", 0) == 0);
    CHECK(std::filesystem::exists(dir / "ckpt_000003"));
    CHECK(std::filesystem::exists(dir / "ckpt_000005"));
    CHECK(result.last_checkpoint == dir / "ckpt_000005");

    std::set<std::pair<std::string, int64_t>> allowed;
    for (size_t obj : ds.split_indices("train")) {
      const auto& id = ds.object(obj).id;
      auto [a, b] = designate_source_views(id, ds.view_count(obj), cfg.seed);
      allowed.insert({id, a});
      allowed.insert({id, b});
    }
    const auto entries = log->entries();
    CHECK(entries.size() == 6);
    for (const auto& e : entries) CHECK(allowed.count({e.object_id, e.view}) == 1);
  }

  TEST_CASE("runs are reproducible and resumable") {
    testing::TempDir full_dir("full"), part_dir("part"), other_dir("other");
    auto ds = Dataset::open(small_dataset());
    auto cfg = small_config();

    auto full = train(ds, cfg, full_dir.path());
    auto again = train(ds, cfg, other_dir.path());
    for (size_t i = 0; i < 5; ++i) CHECK(full.history[i].total == again.history[i].total);
    CHECK(same_tensors(full.state.params->named_parameters(), again.state.params->named_parameters()));

    TrainOptions first;
    first.stop_after = 3;
    auto part = train(ds, cfg, part_dir.path(), first);
    CHECK(part.history.size() == 3);
    TrainOptions resume;
    resume.resume = part_dir / "ckpt_000003";
    auto rest = train(ds, cfg, part_dir.path(), resume);
    REQUIRE(rest.history.size() == 2);
    for (size_t i = 0; i < 2; ++i) {
      CHECK(rest.history[i].total == doctest::Approx(full.history[3 + i].total).epsilon(1e-5));
      CHECK(rest.history[i].trafo == doctest::Approx(full.history[3 + i].trafo).epsilon(1e-5));
    }
    CHECK(read_lines(rest.log_path).size() == 6);

    auto other = cfg;
    other.seed = 22;
    CHECK_THROWS_AS(train(ds, other, part_dir.path(), resume), InvalidInput);
    testing::TempDir seed_dir("seed");
    auto different = train(ds, other, seed_dir.path());
    CHECK(different.history[0].total != full.history[0].total);
  }
}
