#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "corn/config.hpp"
#include "corn/dataset.hpp"
#include "corn/model.hpp"
#include "corn/objectives.hpp"
#include "corn/renderer.hpp"

namespace corn {

struct TrainConfig {
  int64_t iterations = 2000;
  int64_t batch_size = 4;
  double lr_generator = 1e-4;
  double lr_discriminator = 4e-4;
  LossWeights weights;
  SplatConfig splat;
  int64_t points = 4096;
  double cube_extent = 1.0;
  uint64_t seed = 0;
  int64_t checkpoint_interval = 500;
  double goal_elevation_min = 0.0;
  double goal_elevation_max = 20.0;
  ModelConfig model;

  void validate() const;
  KeyValues to_key_values() const;
  // Unknown keys are rejected; missing keys keep their defaults.
  static TrainConfig from_key_values(const KeyValues& kv);
};

// Independent seeded random streams. Each consumer draws only from its own
// stream, so the order in which consumers run cannot change any draw.
struct RngStreams {
  std::mt19937_64 points;
  std::mt19937_64 poses;

  explicit RngStreams(uint64_t seed = 0);
  std::string serialize() const;
  static RngStreams deserialize(const std::string& text);
  bool operator==(const RngStreams&) const = default;
};

struct TrainState {
  FieldParameters params{nullptr};
  std::unique_ptr<torch::optim::Adam> generator_opt;
  std::unique_ptr<torch::optim::Adam> discriminator_opt;
  int64_t iteration = 0;
  RngStreams rng;
};

TrainState make_train_state(const TrainConfig& cfg);

// One object's two designated source views plus every pose of the object
// (poses only; no other image is ever loaded for training).
struct TrainingExample {
  std::string object_id;
  int64_t first_view = 0;
  int64_t second_view = 1;
  ViewRecord first;
  ViewRecord second;
  std::vector<Camera> poses;
};

// Two distinct view indices per object, fixed by the run seed.
std::pair<int64_t, int64_t> designate_source_views(const std::string& object_id, int64_t view_count,
                                                   uint64_t seed);

// Reads only the two designated views of each training-split object.
std::vector<TrainingExample> load_training_examples(const Dataset& dataset, uint64_t seed);

// Azimuth/elevation (degrees) of a camera's centre around the origin.
double camera_azimuth(const Camera& camera);
double camera_elevation(const Camera& camera);

// Uniform draw over `poses` whose elevation lies in [min, max], excluding the
// two source indices. Returns the pose index.
int64_t sample_goal_pose(const std::vector<Camera>& poses, int64_t first_view, int64_t second_view,
                         double elevation_min, double elevation_max, std::mt19937_64& rng);

// The six renders of one step for one object. Chain A: I1 -> G -> 2,
// chain B: I2 -> G -> 1, plus the direct transforms I1 -> 2 and I2 -> 1.
struct ChainOutputs {
  RenderOutput goal_from_first;
  RenderOutput goal_from_second;
  RenderOutput second_via_goal;
  RenderOutput first_via_goal;
  RenderOutput second_direct;
  RenderOutput first_direct;
  // V_1, V_2, V_G (chain A), V_G (chain B), all on the step's point set.
  std::vector<FeatureCloud> clouds;
  // Relative poses used for each hop, in the order 1->G, G->2, 2->G, G->1, 1->2, 2->1.
  std::vector<torch::Tensor> hops;
};

ChainOutputs run_chains(FieldParameters& params, const TrainingExample& example,
                        const Camera& goal, const PointSet& points, const SplatConfig& splat);

struct StepOptions {
  bool update = true;                 // false: evaluate losses only, no state change
  std::optional<int64_t> goal_view;   // force T_G (tests)
};

// One optimisation step over a batch of examples: shared point sample, chain
// renders, weighted loss, one generator update, one discriminator update.
LossReport training_step(const std::vector<const TrainingExample*>& batch, TrainState& state,
                         const TrainConfig& cfg, const PerceptualExtractor& perceptual,
                         const StepOptions& options = {});

// Checkpoint container (a torch archive):
//   format      "corn-checkpoint-v1"
//   config      TrainConfig as key = value text
//   iteration   int
//   rng         serialized RngStreams
//   params/     every parameter and buffer of FieldParameters, by module path
//   generator_opt/, discriminator_opt/   Adam state
void save_checkpoint(const std::filesystem::path& path, const TrainState& state,
                     const TrainConfig& cfg);

struct Checkpoint {
  TrainConfig config;
  TrainState state;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string checkpoint_name(int64_t iteration);

// Object indices (into `count` training examples) used at `iteration`. Objects
// are visited in a fresh seeded permutation every epoch; the schedule is a pure
// function of (seed, iteration) so resumed runs see the same batches.
std::vector<size_t> batch_schedule(size_t count, int64_t batch_size, int64_t iteration,
                                   uint64_t seed);

struct TrainOptions {
  std::optional<std::filesystem::path> resume;
  std::shared_ptr<AccessLog> access_log;
  std::function<void(int64_t, const LossReport&)> on_step;
  // Stop after this iteration even if cfg.iterations is larger (tests).
  std::optional<int64_t> stop_after;
};

struct TrainResult {
  TrainState state;
  std::filesystem::path log_path;
  std::filesystem::path last_checkpoint;
  std::vector<LossReport> history;  // reports of the iterations run in this call
};

TrainResult train(const Dataset& dataset, const TrainConfig& cfg,
                  const std::filesystem::path& out_dir, const TrainOptions& options = {});

}  // namespace corn
