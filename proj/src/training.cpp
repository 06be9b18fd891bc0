#include "corn/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "corn/errors.hpp"

namespace corn {
namespace {

constexpr const char* kCheckpointFormat = "corn-checkpoint-v1";

uint64_t splitmix(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t mix_string(uint64_t seed, const std::string& text) {
  uint64_t h = splitmix(seed);
  for (unsigned char c : text) h = splitmix(h ^ c);
  return h;
}

std::string format_double(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

torch::Tensor stack_rgb(const std::vector<torch::Tensor>& images) { return torch::stack(images); }

void set_requires_grad(const std::vector<torch::Tensor>& params, bool flag) {
  for (auto p : params) p.set_requires_grad(flag);
}

std::unique_ptr<torch::optim::Adam> make_adam(const std::vector<torch::Tensor>& params, double lr) {
  return std::make_unique<torch::optim::Adam>(params, torch::optim::AdamOptions(lr));
}

}  // namespace

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (iterations <= 0) throw InvalidInput("iterations must be positive");
  if (batch_size <= 0) throw InvalidInput("batch_size must be positive");
  if (!(lr_generator > 0) || !(lr_discriminator > 0)) {
    throw InvalidInput("learning rates must be positive");
  }
  if (points <= 0) throw InvalidInput("points must be positive");
  if (!(cube_extent > 0)) throw InvalidInput("cube_extent must be positive");
  if (checkpoint_interval <= 0) throw InvalidInput("checkpoint_interval must be positive");
  if (!(goal_elevation_min <= goal_elevation_max)) {
    throw InvalidInput("goal elevation range is empty");
  }
  weights.validate();
  splat.validate();
  model.validate();
}

KeyValues TrainConfig::to_key_values() const {
  KeyValues kv;
  kv["iterations"] = std::to_string(iterations);
  kv["batch_size"] = std::to_string(batch_size);
  kv["lr_generator"] = format_double(lr_generator);
  kv["lr_discriminator"] = format_double(lr_discriminator);
  kv["lambda_trafo"] = format_double(weights.trafo);
  kv["lambda_3d"] = format_double(weights.consistency);
  kv["lambda_bce"] = format_double(weights.occupancy);
  kv["lambda_gan"] = format_double(weights.adversarial);
  kv["splat_radius"] = format_double(splat.radius);
  kv["splat_falloff"] = format_double(splat.falloff);
  kv["splat_top_k"] = std::to_string(splat.top_k);
  kv["points"] = std::to_string(points);
  kv["cube_extent"] = format_double(cube_extent);
  kv["seed"] = std::to_string(seed);
  kv["checkpoint_interval"] = std::to_string(checkpoint_interval);
  kv["goal_elevation_min"] = format_double(goal_elevation_min);
  kv["goal_elevation_max"] = format_double(goal_elevation_max);
  kv["image_size"] = std::to_string(model.image_size);
  kv["global_dim"] = std::to_string(model.global_dim);
  kv["spatial_dim"] = std::to_string(model.spatial_dim);
  kv["feature_dim"] = std::to_string(model.feature_dim);
  kv["encoding_levels"] = std::to_string(model.encoding_levels);
  kv["field_hidden"] = std::to_string(model.field_hidden);
  kv["field_layers"] = std::to_string(model.field_layers);
  kv["backbone"] = to_string(model.backbone);
  kv["refiner_base"] = std::to_string(model.refiner_base);
  kv["discriminator_base"] = std::to_string(model.discriminator_base);
  kv["background"] = format_double(model.background);
  return kv;
}

TrainConfig TrainConfig::from_key_values(const KeyValues& kv) {
  const TrainConfig defaults;
  const auto known = defaults.to_key_values();
  for (const auto& [key, value] : kv) {
    if (!known.count(key)) throw InvalidInput("unknown config key '" + key + "'");
  }
  TrainConfig c;
  c.iterations = get_int(kv, "iterations", c.iterations);
  c.batch_size = get_int(kv, "batch_size", c.batch_size);
  c.lr_generator = get_double(kv, "lr_generator", c.lr_generator);
  c.lr_discriminator = get_double(kv, "lr_discriminator", c.lr_discriminator);
  c.weights.trafo = get_double(kv, "lambda_trafo", c.weights.trafo);
  c.weights.consistency = get_double(kv, "lambda_3d", c.weights.consistency);
  c.weights.occupancy = get_double(kv, "lambda_bce", c.weights.occupancy);
  c.weights.adversarial = get_double(kv, "lambda_gan", c.weights.adversarial);
  c.splat.radius = get_double(kv, "splat_radius", c.splat.radius);
  c.splat.falloff = get_double(kv, "splat_falloff", c.splat.falloff);
  c.splat.top_k = get_int(kv, "splat_top_k", c.splat.top_k);
  c.points = get_int(kv, "points", c.points);
  c.cube_extent = get_double(kv, "cube_extent", c.cube_extent);
  c.seed = get_uint(kv, "seed", c.seed);
  c.checkpoint_interval = get_int(kv, "checkpoint_interval", c.checkpoint_interval);
  c.goal_elevation_min = get_double(kv, "goal_elevation_min", c.goal_elevation_min);
  c.goal_elevation_max = get_double(kv, "goal_elevation_max", c.goal_elevation_max);
  auto& m = c.model;
  m.image_size = get_int(kv, "image_size", m.image_size);
  m.global_dim = get_int(kv, "global_dim", m.global_dim);
  m.spatial_dim = get_int(kv, "spatial_dim", m.spatial_dim);
  m.feature_dim = get_int(kv, "feature_dim", m.feature_dim);
  m.encoding_levels = get_int(kv, "encoding_levels", m.encoding_levels);
  m.field_hidden = get_int(kv, "field_hidden", m.field_hidden);
  m.field_layers = get_int(kv, "field_layers", m.field_layers);
  m.backbone = parse_backbone(get_string(kv, "backbone", to_string(m.backbone)));
  m.refiner_base = get_int(kv, "refiner_base", m.refiner_base);
  m.discriminator_base = get_int(kv, "discriminator_base", m.discriminator_base);
  m.background = get_double(kv, "background", m.background);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

RngStreams::RngStreams(uint64_t seed)
    : points(mix_string(seed, "points")), poses(mix_string(seed, "poses")) {}

std::string RngStreams::serialize() const {
  std::ostringstream out;
  out << points << "\n" << poses << "\n";
  return out.str();
}

RngStreams RngStreams::deserialize(const std::string& text) {
  RngStreams r;
  std::istringstream in(text);
  in >> r.points >> r.poses;
  if (!in) throw InvalidInput("malformed RNG state");
  return r;
}

TrainState make_train_state(const TrainConfig& cfg) {
  cfg.validate();
  TrainState s;
  s.params = FieldParameters(cfg.model, cfg.seed);
  s.generator_opt = make_adam(s.params->generator_parameters(), cfg.lr_generator);
  s.discriminator_opt = make_adam(s.params->discriminator_parameters(), cfg.lr_discriminator);
  s.iteration = 0;
  s.rng = RngStreams(cfg.seed);
  return s;
}

// ---------------------------------------------------------------------------

std::pair<int64_t, int64_t> designate_source_views(const std::string& object_id, int64_t view_count,
                                                   uint64_t seed) {
  if (view_count < 2) throw InvalidInput("object " + object_id + " has fewer than two views");
  std::mt19937_64 rng(mix_string(seed, "sources/" + object_id));
  std::uniform_int_distribution<int64_t> first_dist(0, view_count - 1);
  std::uniform_int_distribution<int64_t> second_dist(0, view_count - 2);
  const int64_t a = first_dist(rng);
  int64_t b = second_dist(rng);
  if (b >= a) ++b;
  return {a, b};
}

std::vector<TrainingExample> load_training_examples(const Dataset& dataset, uint64_t seed) {
  auto indices = dataset.split_indices("train");
  if (indices.empty()) throw InvalidInput("dataset has no training objects");
  std::vector<TrainingExample> out;
  out.reserve(indices.size());
  for (size_t obj : indices) {
    const auto& entry = dataset.object(obj);
    const auto [a, b] = designate_source_views(entry.id, dataset.view_count(obj), seed);
    out.push_back(TrainingExample{entry.id, a, b, dataset.load_view(obj, a),
                                  dataset.load_view(obj, b), entry.cameras});
  }
  return out;
}

double camera_azimuth(const Camera& camera) {
  auto c = camera.center();
  double az = std::atan2(c[0].item<double>(), c[2].item<double>()) * 180.0 / M_PI;
  if (az < 0) az += 360.0;
  if (az >= 360.0) az -= 360.0;
  return az;
}

double camera_elevation(const Camera& camera) {
  auto c = camera.center();
  const double r = c.norm().item<double>();
  if (r <= 0) throw InvalidInput("camera centre at the origin has no elevation");
  return std::asin(std::clamp(c[1].item<double>() / r, -1.0, 1.0)) * 180.0 / M_PI;
}

int64_t sample_goal_pose(const std::vector<Camera>& poses, int64_t first_view, int64_t second_view,
                         double elevation_min, double elevation_max, std::mt19937_64& rng) {
  constexpr double kTol = 1e-6;
  std::vector<int64_t> candidates;
  for (int64_t i = 0; i < static_cast<int64_t>(poses.size()); ++i) {
    if (i == first_view || i == second_view) continue;
    if (poses[i] == poses[first_view] || poses[i] == poses[second_view]) continue;
    const double el = camera_elevation(poses[i]);
    if (el < elevation_min - kTol || el > elevation_max + kTol) continue;
    candidates.push_back(i);
  }
  if (candidates.empty()) throw InvalidInput("no goal pose available in the elevation range");
  std::uniform_int_distribution<size_t> pick(0, candidates.size() - 1);
  return candidates[pick(rng)];
}

// ---------------------------------------------------------------------------

ChainOutputs run_chains(FieldParameters& params, const TrainingExample& example,
                        const Camera& goal, const PointSet& points, const SplatConfig& splat) {
  const Camera& cam1 = example.first.camera;
  const Camera& cam2 = example.second.camera;

  ChainOutputs out;
  auto v1 = build_feature_cloud(params, example.first.image, cam1, points);
  auto v2 = build_feature_cloud(params, example.second.image, cam2, points);

  out.goal_from_first = render_cloud(v1, goal, params, splat);
  out.goal_from_second = render_cloud(v2, goal, params, splat);

  auto vg_a = build_feature_cloud(params, out.goal_from_first.rgb, goal, points);
  auto vg_b = build_feature_cloud(params, out.goal_from_second.rgb, goal, points);
  out.second_via_goal = render_cloud(vg_a, cam2, params, splat);
  out.first_via_goal = render_cloud(vg_b, cam1, params, splat);

  out.second_direct = render_cloud(v1, cam2, params, splat);
  out.first_direct = render_cloud(v2, cam1, params, splat);

  out.clouds = {std::move(v1), std::move(v2), std::move(vg_a), std::move(vg_b)};

  const auto& e1 = cam1.extrinsics();
  const auto& e2 = cam2.extrinsics();
  const auto& eg = goal.extrinsics();
  out.hops = {relative_transform(e1, eg), relative_transform(eg, e2), relative_transform(e2, eg),
              relative_transform(eg, e1), relative_transform(e1, e2), relative_transform(e2, e1)};
  return out;
}

namespace {

struct ExampleLoss {
  WeightedLoss weighted;
  std::vector<torch::Tensor> fakes;  // detached chain outputs
};

ExampleLoss example_loss(FieldParameters& params, const TrainingExample& ex, const Camera& goal,
                         const PointSet& points, const TrainConfig& cfg,
                         const PerceptualExtractor& perceptual) {
  auto chains = run_chains(params, ex, goal, points, cfg.splat);
  const auto& i1 = ex.first.image;
  const auto& i2 = ex.second.image;

  LossTerms terms;
  terms.trafo = transformation_loss(
      {chains.second_via_goal.rgb, chains.second_direct.rgb, chains.first_via_goal.rgb,
       chains.first_direct.rgb},
      {i2, i2, i1, i1}, perceptual);
  terms.consistency = consistency_loss(chains.clouds);

  const auto& m1 = ex.first.mask;
  const auto& m2 = ex.second.mask;
  const std::pair<const RenderOutput*, const torch::Tensor*> at_sources[] = {
      {&chains.second_via_goal, &m2},
      {&chains.second_direct, &m2},
      {&chains.first_via_goal, &m1},
      {&chains.first_direct, &m1}};
  auto bce = torch::zeros({}, i1.options());
  for (const auto& [render, mask] : at_sources) {
    bce = bce + occupancy_loss(render->alpha, *mask) + occupancy_loss(render->mask, *mask);
  }
  terms.occupancy = bce / 4.0;

  std::vector<torch::Tensor> fakes = {chains.goal_from_first.rgb, chains.goal_from_second.rgb,
                                      chains.second_via_goal.rgb, chains.first_via_goal.rgb,
                                      chains.second_direct.rgb,   chains.first_direct.rgb};
  auto fake_batch = stack_rgb(fakes);
  terms.adversarial =
      adversarial_loss(params->discriminator, torch::Tensor(), fake_batch, AdversarialMode::kGenerator);

  ExampleLoss out{total_loss(terms, cfg.weights), {}};
  for (auto& f : fakes) out.fakes.push_back(f.detach());
  return out;
}

}  // namespace

LossReport training_step(const std::vector<const TrainingExample*>& batch, TrainState& state,
                         const TrainConfig& cfg, const PerceptualExtractor& perceptual,
                         const StepOptions& options) {
  if (batch.empty()) throw InvalidInput("training_step needs at least one example");
  auto& params = state.params;

  // Non-updating steps draw from a copy so the state is left untouched.
  RngStreams scratch = state.rng;
  RngStreams& rng = options.update ? state.rng : scratch;

  const auto points = sample_cube_points(cfg.points, cfg.cube_extent, rng.points);
  std::vector<int64_t> goals;
  for (const auto* ex : batch) {
    if (options.goal_view) {
      if (*options.goal_view < 0 || *options.goal_view >= static_cast<int64_t>(ex->poses.size())) {
        throw InvalidInput("forced goal view out of range");
      }
      goals.push_back(*options.goal_view);
    } else {
      goals.push_back(sample_goal_pose(ex->poses, ex->first_view, ex->second_view,
                                       cfg.goal_elevation_min, cfg.goal_elevation_max, rng.poses));
    }
  }

  const double scale = 1.0 / static_cast<double>(batch.size());
  LossReport report;
  auto accumulate = [&](const LossReport& r) {
    report.trafo += scale * r.trafo;
    report.consistency += scale * r.consistency;
    report.occupancy += scale * r.occupancy;
    report.adversarial += scale * r.adversarial;
    report.total += scale * r.total;
  };

  if (!options.update) {
    torch::NoGradGuard no_grad;
    params->eval();
    std::vector<torch::Tensor> reals, fakes;
    for (size_t b = 0; b < batch.size(); ++b) {
      auto l = example_loss(params, *batch[b], batch[b]->poses[goals[b]], points, cfg, perceptual);
      accumulate(l.weighted.report);
      for (auto& f : l.fakes) fakes.push_back(f);
      reals.push_back(batch[b]->first.image);
      reals.push_back(batch[b]->second.image);
    }
    report.discriminator = adversarial_loss(params->discriminator, torch::stack(reals),
                                            torch::stack(fakes), AdversarialMode::kDiscriminator)
                               .item<double>();
    return report;
  }

  params->train();
  const auto disc_params = params->discriminator_parameters();

  // Generator side: per-example backward keeps only one example's graph alive.
  state.generator_opt->zero_grad();
  set_requires_grad(disc_params, false);
  std::vector<torch::Tensor> reals, fakes;
  try {
    for (size_t b = 0; b < batch.size(); ++b) {
      auto l = example_loss(params, *batch[b], batch[b]->poses[goals[b]], points, cfg, perceptual);
      (l.weighted.total * scale).backward();
      accumulate(l.weighted.report);
      for (auto& f : l.fakes) fakes.push_back(f);
      reals.push_back(batch[b]->first.image);
      reals.push_back(batch[b]->second.image);
    }
  } catch (...) {
    set_requires_grad(disc_params, true);
    throw;
  }
  set_requires_grad(disc_params, true);
  state.generator_opt->step();

  // Discriminator side on detached generator outputs.
  state.discriminator_opt->zero_grad();
  auto d_loss = adversarial_loss(params->discriminator, torch::stack(reals), torch::stack(fakes),
                                 AdversarialMode::kDiscriminator);
  report.discriminator = d_loss.item<double>();
  if (!std::isfinite(report.discriminator)) throw NonFiniteLoss("discriminator");
  d_loss.backward();
  state.discriminator_opt->step();

  ++state.iteration;
  return report;
}

// ---------------------------------------------------------------------------

std::string checkpoint_name(int64_t iteration) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "ckpt_%06lld", static_cast<long long>(iteration));
  return buf;
}

void save_checkpoint(const std::filesystem::path& path, const TrainState& state,
                     const TrainConfig& cfg) {
  torch::serialize::OutputArchive archive;
  archive.write("format", c10::IValue(std::string(kCheckpointFormat)));
  archive.write("config", c10::IValue(format_key_values(cfg.to_key_values())));
  archive.write("iteration", c10::IValue(state.iteration));
  archive.write("rng", c10::IValue(state.rng.serialize()));

  torch::serialize::OutputArchive params_archive;
  state.params->save(params_archive);
  archive.write("params", params_archive);

  torch::serialize::OutputArchive gen_archive;
  state.generator_opt->save(gen_archive);
  archive.write("generator_opt", gen_archive);

  torch::serialize::OutputArchive disc_archive;
  state.discriminator_opt->save(disc_archive);
  archive.write("discriminator_opt", disc_archive);

  try {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    archive.save_to(path.string());
  } catch (const c10::Error& e) {
    throw IoError("cannot write checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("checkpoint not found: " + path.string());
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(path.string());
  } catch (const c10::Error& e) {
    throw IoError("cannot read checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
  auto read_string = [&](const char* key) {
    c10::IValue v;
    if (!archive.try_read(key, v) || !v.isString()) {
      throw IoError("checkpoint " + path.string() + " lacks '" + key + "'");
    }
    return v.toStringRef();
  };
  if (read_string("format") != kCheckpointFormat) {
    throw IoError("checkpoint " + path.string() + " has an unknown format");
  }
  auto cfg = TrainConfig::from_key_values(parse_key_values(read_string("config"), path.string()));
  Checkpoint ck{cfg, make_train_state(cfg)};

  c10::IValue it;
  if (!archive.try_read("iteration", it) || !it.isInt()) {
    throw IoError("checkpoint " + path.string() + " lacks 'iteration'");
  }
  ck.state.iteration = it.toInt();
  ck.state.rng = RngStreams::deserialize(read_string("rng"));

  try {
    torch::serialize::InputArchive sub;
    archive.read("params", sub);
    ck.state.params->load(sub);
    torch::serialize::InputArchive gen;
    archive.read("generator_opt", gen);
    ck.state.generator_opt->load(gen);
    torch::serialize::InputArchive disc;
    archive.read("discriminator_opt", disc);
    ck.state.discriminator_opt->load(disc);
  } catch (const c10::Error& e) {
    throw IoError("corrupt checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
  return ck;
}

// ---------------------------------------------------------------------------

std::vector<size_t> batch_schedule(size_t count, int64_t batch_size, int64_t iteration,
                                   uint64_t seed) {
  if (count == 0) throw InvalidInput("batch_schedule over zero objects");
  std::vector<size_t> out;
  int64_t cached_epoch = -1;
  std::vector<size_t> perm(count);
  for (int64_t b = 0; b < batch_size; ++b) {
    const int64_t position = iteration * batch_size + b;
    const int64_t epoch = position / static_cast<int64_t>(count);
    if (epoch != cached_epoch) {
      std::iota(perm.begin(), perm.end(), size_t{0});
      std::mt19937_64 rng(mix_string(seed, "epoch/" + std::to_string(epoch)));
      std::shuffle(perm.begin(), perm.end(), rng);
      cached_epoch = epoch;
    }
    out.push_back(perm[position % static_cast<int64_t>(count)]);
  }
  return out;
}

namespace {

const char* kLogHeader = "iteration,trafo,consistency,occupancy,adversarial,total,discriminator";

// Keeps the header and the rows with iteration <= `last`.
void truncate_log(const std::filesystem::path& path, int64_t last) {
  std::ifstream in(path);
  if (!in) return;
  std::vector<std::string> keep;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      header = false;
      continue;
    }
    if (line.empty()) continue;
    if (std::stoll(line.substr(0, line.find(','))) <= last) keep.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  out << kLogHeader << "\n";
  for (const auto& l : keep) out << l << "\n";
}

}  // namespace

TrainResult train(const Dataset& dataset, const TrainConfig& cfg,
                  const std::filesystem::path& out_dir, const TrainOptions& options) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + out_dir.string() + ": " + ec.message());

  TrainResult result;
  if (options.resume) {
    auto ck = load_checkpoint(*options.resume);
    if (ck.config.seed != cfg.seed || !(ck.config.model.image_size == cfg.model.image_size)) {
      throw InvalidInput("checkpoint " + options.resume->string() +
                         " was written with a different seed or image size");
    }
    result.state = std::move(ck.state);
  } else {
    result.state = make_train_state(cfg);
  }
  auto& state = result.state;

  Dataset data = dataset;
  if (options.access_log) data.set_access_log(options.access_log);
  const auto examples = load_training_examples(data, cfg.seed);
  for (const auto& ex : examples) {
    check_image(ex.first.image, cfg.model.image_size, "training image");
  }

  const RandomFeaturePyramid perceptual;

  result.log_path = out_dir / "training_log.csv";
  if (options.resume) {
    truncate_log(result.log_path, state.iteration);
  } else {
    std::ofstream header(result.log_path, std::ios::trunc);
    if (!header) throw IoError("cannot write " + result.log_path.string());
    header << kLogHeader << "\n";
  }
  std::ofstream log(result.log_path, std::ios::app);
  if (!log) throw IoError("cannot write " + result.log_path.string());
  log.precision(9);

  const int64_t end = options.stop_after ? std::min(cfg.iterations, *options.stop_after)
                                         : cfg.iterations;
  while (state.iteration < end) {
    auto picks = batch_schedule(examples.size(), cfg.batch_size, state.iteration, cfg.seed);
    std::vector<const TrainingExample*> batch;
    for (size_t i : picks) batch.push_back(&examples[i]);

    auto report = training_step(batch, state, cfg, perceptual);
    result.history.push_back(report);
    log << state.iteration << "," << report.trafo << "," << report.consistency << ","
        << report.occupancy << "," << report.adversarial << "," << report.total << ","
        << report.discriminator << "\n";
    log.flush();
    if (options.on_step) options.on_step(state.iteration, report);

    if (state.iteration % cfg.checkpoint_interval == 0 || state.iteration == cfg.iterations) {
      result.last_checkpoint = out_dir / checkpoint_name(state.iteration);
      save_checkpoint(result.last_checkpoint, state, cfg);
    }
  }
  if (!log) throw IoError("error writing " + result.log_path.string());
  return result;
}

}  // namespace corn
