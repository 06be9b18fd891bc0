#include "corn/cli.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "corn/dataset.hpp"
#include "corn/errors.hpp"
#include "corn/evaluation.hpp"
#include "corn/image_io.hpp"
#include "corn/reconstruction.hpp"
#include "corn/training.hpp"
#include "json.hpp"

#ifndef CORN_VERSION
#define CORN_VERSION "unknown"
#endif

namespace corn {
namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

RenderSettings render_settings(const TrainConfig& cfg, uint64_t point_seed) {
  RenderSettings rs;
  rs.points = cfg.points;
  rs.cube_extent = cfg.cube_extent;
  rs.point_seed = point_seed;
  rs.splat = cfg.splat;
  return rs;
}

// Manifests of directory outputs live inside them; file outputs get a sibling.
std::filesystem::path manifest_path_for(const std::filesystem::path& out, bool is_directory) {
  if (is_directory) return out / "run_manifest.json";
  auto p = out;
  p.replace_extension(".run.json");
  return p;
}

struct Context {
  std::vector<std::string> argv;
  uint64_t seed = 0;
};

RunManifest begin(const Context& ctx, const std::string& command, KeyValues config,
                  std::vector<std::string> outputs, const std::filesystem::path& manifest_path) {
  RunManifest m;
  m.command = command;
  m.argv = ctx.argv;
  m.config = std::move(config);
  m.seed = ctx.seed;
  m.version = CORN_VERSION;
  m.started_at = utc_now();
  m.outputs = std::move(outputs);
  write_run_manifest(m, manifest_path);
  return m;
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  int64_t objects = 20;
  int64_t heldout = 0;
  int64_t resolution = 32;
  std::string out;
};

int run_gen_data(const Context& ctx, const GenDataArgs& a) {
  SyntheticConfig sc;
  sc.objects = a.objects;
  sc.heldout = a.heldout;
  sc.resolution = a.resolution;
  sc.seed = ctx.seed;
  const std::filesystem::path out(a.out);
  std::filesystem::create_directories(out);
  begin(ctx, "gen-data",
        {{"objects", std::to_string(a.objects)},
         {"heldout", std::to_string(a.heldout)},
         {"resolution", std::to_string(a.resolution)},
         {"seed", std::to_string(ctx.seed)},
         {"generator_hash", sc.hash()}},
        {out.string()}, manifest_path_for(out, true));
  const auto manifest = generate_synthetic(sc, out);
  std::cout << "wrote " << manifest.objects.size() << " objects to " << out.string() << "\n";
  return 0;
}

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out;
  std::string resume;
  std::vector<std::string> overrides;
  int64_t iterations = 0;
  int64_t log_every = 100;
};

int run_train(const Context& ctx, const TrainArgs& a, bool seed_given) {
  KeyValues kv;
  if (!a.config.empty()) kv = read_key_value_file(a.config);
  for (const auto& o : a.overrides) {
    const auto parsed = parse_key_values(o, "--set");
    for (const auto& [k, v] : parsed) kv[k] = v;
  }
  if (a.iterations > 0) kv["iterations"] = std::to_string(a.iterations);
  if (seed_given || !kv.count("seed")) kv["seed"] = std::to_string(ctx.seed);
  const auto cfg = TrainConfig::from_key_values(kv);

  const std::filesystem::path out(a.out);
  std::filesystem::create_directories(out);
  auto resolved = cfg.to_key_values();
  {
    std::ofstream f(out / "config.txt");
    f << format_key_values(resolved);
  }
  begin(ctx, "train", resolved, {(out / "training_log.csv").string(), out.string()},
        manifest_path_for(out, true));

  const auto dataset = Dataset::open(a.data);
  TrainOptions opt;
  if (!a.resume.empty()) opt.resume = a.resume;
  const auto start = std::chrono::steady_clock::now();
  opt.on_step = [&](int64_t it, const LossReport& r) {
    if (a.log_every > 0 && (it % a.log_every == 0 || it == cfg.iterations)) {
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      std::printf("iter %lld  trafo %.4f  3d %.4f  bce %.4f  gan %.4f  total %.4f  (%.0fs)\n",
                  static_cast<long long>(it), r.trafo, r.consistency, r.occupancy, r.adversarial,
                  r.total, secs);
      std::fflush(stdout);
    }
  };
  const auto result = train(dataset, cfg, out, opt);
  std::cout << "final checkpoint " << result.last_checkpoint.string() << "\n";
  return 0;
}

struct RenderArgs {
  std::string ckpt;
  std::string image;
  std::string camera;
  std::vector<std::string> targets;
  int64_t sequence = 0;
  std::string out;
};

int run_render(const Context& ctx, const RenderArgs& a) {
  const auto ck = load_checkpoint(a.ckpt);
  auto params = ck.state.params;
  const auto image = read_png_rgb(a.image);
  const auto source = read_camera_file(a.camera);
  std::vector<Camera> poses;
  for (const auto& t : a.targets) poses.push_back(read_camera_file(t));
  if (a.sequence > 0) {
    ViewGrid grid;
    grid.azimuth_steps = a.sequence;
    grid.elevations = {0.0};
    for (int64_t i = 0; i < a.sequence; ++i) poses.push_back(grid.camera(i, source.image_size()));
  }
  if (poses.empty()) throw InvalidInput("render: give --target or --sequence");

  const std::filesystem::path out(a.out);
  std::filesystem::create_directories(out);
  auto kv = ck.config.to_key_values();
  kv["point_seed"] = std::to_string(ctx.seed);
  kv["views"] = std::to_string(poses.size());
  begin(ctx, "render", kv, {out.string()}, manifest_path_for(out, true));

  const auto frames =
      synthesize_sequence(image, source, poses, params, render_settings(ck.config, ctx.seed));
  for (size_t i = 0; i < frames.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%03zu.png", i);
    write_png_rgb(out / name, frames[i]);
  }
  std::cout << "wrote " << frames.size() << " frames to " << out.string() << "\n";
  return 0;
}

struct EvaluateArgs {
  std::string ckpt;
  std::string data;
  int64_t pairs = 200;
  std::string split = "test";
  std::string lpips_command;
  std::string out;
};

int run_evaluate(const Context& ctx, const EvaluateArgs& a) {
  const auto ck = load_checkpoint(a.ckpt);
  auto params = ck.state.params;
  EvalOptions eo;
  eo.pairs = a.pairs;
  eo.seed = ctx.seed;
  eo.split = a.split;
  eo.render = render_settings(ck.config, ck.config.seed);
  if (!a.lpips_command.empty()) eo.lpips = external_scorer(a.lpips_command);

  const std::filesystem::path out(a.out);
  auto csv = out;
  csv.replace_extension(".csv");
  KeyValues kv{{"ckpt", a.ckpt},
               {"data", a.data},
               {"pairs", std::to_string(a.pairs)},
               {"split", a.split},
               {"seed", std::to_string(ctx.seed)},
               {"lpips", a.lpips_command.empty() ? "unavailable" : a.lpips_command}};
  begin(ctx, "evaluate", kv, {out.string(), csv.string()}, manifest_path_for(out, false));

  const auto dataset = Dataset::open(a.data);
  const auto report = evaluate(dataset, params, eo);
  write_report(report, out);
  std::printf("pairs %zu  L1 %.4f (baseline %.4f)  SSIM %.4f (baseline %.4f)  wins %.3f\n",
              report.pair_count(), report.l1.mean, report.baseline_l1.mean, report.ssim.mean,
              report.baseline_ssim.mean, report.win_fraction);
  return 0;
}

struct ReconstructArgs {
  std::string ckpt;
  std::string image;
  std::string camera;
  int64_t views = 15;
  int64_t points = 100000;
  double tau = 1.0;
  std::string out;
};

int run_reconstruct(const Context& ctx, const ReconstructArgs& a) {
  const auto ck = load_checkpoint(a.ckpt);
  auto params = ck.state.params;
  ReconstructOptions ro;
  ro.views = a.views;
  ro.points = a.points;
  ro.tau = a.tau;
  ro.seed = ctx.seed;
  ro.render = render_settings(ck.config, ck.config.seed);

  const std::filesystem::path out(a.out);
  KeyValues kv{{"ckpt", a.ckpt},
               {"image", a.image},
               {"camera", a.camera},
               {"views", std::to_string(a.views)},
               {"points", std::to_string(a.points)},
               {"tau", std::to_string(a.tau)},
               {"seed", std::to_string(ctx.seed)}};
  begin(ctx, "reconstruct", kv, {out.string()}, manifest_path_for(out, false));

  const auto image = read_png_rgb(a.image);
  const auto source = read_camera_file(a.camera);
  const auto cloud = reconstruct(image, source, params, ro);
  export_pointcloud(cloud, out);
  std::cout << "occupied " << cloud.occupied_count() << " of " << cloud.size() << " points\n";
  return 0;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string RunManifest::to_json() const {
  nlohmann::json j;
  j["command"] = command;
  j["argv"] = argv;
  j["config"] = config;
  j["seed"] = seed;
  j["version"] = version;
  j["started_at"] = started_at;
  j["outputs"] = outputs;
  return j.dump(2);
}

void write_run_manifest(const RunManifest& manifest, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << manifest.to_json() << "\n";
}

uint64_t default_seed() {
  const char* env = std::getenv("CORN_SEED");
  if (!env || !*env) return 0;
  try {
    size_t used = 0;
    const auto v = std::stoull(env, &used);
    if (used != std::string(env).size()) throw std::invalid_argument(env);
    return v;
  } catch (const std::exception&) {
    throw InvalidInput(std::string("CORN_SEED is not an unsigned integer: ") + env);
  }
}

int dispatch(const std::vector<std::string>& args) {
  std::vector<const char*> raw;
  for (const auto& a : args) raw.push_back(a.c_str());
  return dispatch(static_cast<int>(raw.size()), raw.data());
}

int dispatch(int argc, const char* const* argv) {
  Context ctx;
  for (int i = 0; i < argc; ++i) ctx.argv.emplace_back(argv[i]);

  uint64_t env_seed = 0;
  try {
    env_seed = default_seed();
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  CLI::App app{"Continuous object representation networks: synthetic data, training, "
               "novel-view rendering, evaluation and reconstruction.",
               "corn"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(CORN_VERSION));
  uint64_t seed = env_seed;

  auto add_seed = [&](CLI::App* sub) {
    return sub->add_option("--seed", seed, "Random seed (default: $CORN_SEED or 0)");
  };

  GenDataArgs gd;
  auto* gen = app.add_subcommand("gen-data", "Render the built-in synthetic dataset");
  gen->add_option("--objects", gd.objects, "Training objects")->check(CLI::PositiveNumber);
  gen->add_option("--heldout", gd.heldout, "Additional held-out (test split) objects")
      ->check(CLI::NonNegativeNumber);
  gen->add_option("--res", gd.resolution, "Image resolution in pixels")->check(CLI::Range(8, 1024));
  gen->add_option("--out", gd.out, "Output directory")->required();
  add_seed(gen);

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train on a dataset (checkpoints ckpt_%06d in --out)");
  tr->add_option("--config", ta.config, "key = value config file")->check(CLI::ExistingFile);
  tr->add_option("--data", ta.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  tr->add_option("--out", ta.out, "Output directory")->required();
  tr->add_option("--resume", ta.resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  tr->add_option("--iterations", ta.iterations, "Override the iteration count")
      ->check(CLI::PositiveNumber);
  tr->add_option("--set", ta.overrides, "Override one config key, e.g. --set points=2048");
  tr->add_option("--log-every", ta.log_every, "Print losses every N iterations (0: quiet)");
  auto* train_seed = add_seed(tr);

  RenderArgs ra;
  auto* re = app.add_subcommand("render", "Render novel views of one image");
  re->add_option("--ckpt", ra.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  re->add_option("--image", ra.image, "Source image (PNG)")->required()->check(CLI::ExistingFile);
  re->add_option("--camera", ra.camera, "Source camera (JSON)")->required()->check(CLI::ExistingFile);
  re->add_option("--target", ra.targets, "Target camera JSON (repeatable)")->check(CLI::ExistingFile);
  re->add_option("--sequence", ra.sequence, "Also render N views evenly spaced in azimuth")
      ->check(CLI::NonNegativeNumber);
  re->add_option("--out", ra.out, "Output directory")->required();
  add_seed(re);

  EvaluateArgs ea;
  auto* ev = app.add_subcommand("evaluate", "Score novel views on held-out objects");
  ev->add_option("--ckpt", ea.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", ea.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--pairs", ea.pairs, "Number of (source, target) pairs")->check(CLI::PositiveNumber);
  ev->add_option("--split", ea.split, "Dataset split to evaluate");
  ev->add_option("--lpips-cmd", ea.lpips_command,
                 "External scorer run as `CMD a.png b.png`, printing a distance");
  ev->add_option("--out", ea.out, "Report JSON path (per-pair CSV written alongside)")->required();
  add_seed(ev);

  ReconstructArgs rc;
  auto* rec = app.add_subcommand("reconstruct", "Single-view visual-hull reconstruction");
  rec->add_option("--ckpt", rc.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  rec->add_option("--image", rc.image, "Source image (PNG)")->required()->check(CLI::ExistingFile);
  rec->add_option("--camera", rc.camera, "Source camera (JSON)")->required()->check(CLI::ExistingFile);
  rec->add_option("--views", rc.views, "Synthesized views")->check(CLI::Range(2, 1000));
  rec->add_option("--points", rc.points, "Sampled cube points")->check(CLI::PositiveNumber);
  rec->add_option("--tau", rc.tau, "Vote fraction needed for occupancy")->check(CLI::Range(0.0, 1.0));
  rec->add_option("--out", rc.out, "Output PLY")->required();
  add_seed(rec);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    std::cerr << "run with --help for usage\n";
    return 2;
  }

  ctx.seed = seed;
  try {
    if (gen->parsed()) return run_gen_data(ctx, gd);
    if (tr->parsed()) return run_train(ctx, ta, train_seed->count() > 0);
    if (re->parsed()) return run_render(ctx, ra);
    if (ev->parsed()) return run_evaluate(ctx, ea);
    if (rec->parsed()) return run_reconstruct(ctx, rc);
  } catch (const InvalidInput& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace corn
