#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "isoray/losses.hpp"
#include "isoray/scene.hpp"

namespace isoray {

struct NScheduleEntry {
  std::size_t iteration;
  std::size_t n;
};
struct LrScheduleEntry {
  std::size_t iteration;
  double lr;
};

struct TrainConfig {
  // sampling
  std::size_t pixels_per_view = 1024;  // N_p
  std::size_t views_per_batch = 1;
  std::uint64_t seed = 0;
  std::size_t iterations = 4000;

  // network
  std::size_t width = 64;
  std::size_t blocks = 5;
  std::size_t latent_dim = 0;

  // ray casting
  double tau = 0.5;
  double s0 = 0.5;
  double far = 3.5;
  std::size_t secant_iters = 8;
  double secant_tol = 1e-5;
  double roi_radius = 1.0;
  bool clip_samples_to_roi = true;

  // schedules (strictly increasing iterations; value at the latest entry
  // whose iteration is <= the current one applies)
  std::vector<NScheduleEntry> n_schedule = {{0, 16}, {500, 32}, {1500, 64}, {2500, 128}};
  std::vector<LrScheduleEntry> lr_schedule = {{0, 1e-4}, {2400, 2e-5}, {3200, 4e-6}};

  // optimizer
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  // losses
  LossWeights weights;
  OccupancyTarget occ_target = OccupancyTarget::RandomDepth;
  FeatureMode features = FeatureMode::Rgb;
  double normal_radius = 0.01;

  // io
  std::size_t checkpoint_every = 1000;
  std::size_t log_every = 50;

  void validate() const;
  std::size_t n_at(std::size_t iteration) const;
  double lr_at(std::size_t iteration) const;
  RaySamplingConfig ray_config(std::size_t iteration) const;
};

// First/second moment accumulators mirroring FieldParams array for array,
// plus moments for the latent code when one is trained.
struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::vector<double> m_z, v_z;
  std::uint64_t step = 0;
};

AdamState make_adam_state(const FieldParams& params, std::size_t latent_dim);

struct AdamHyper {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

// Standard bias-corrected Adam update, in place.
void adam_step(FieldParams& params, LatentCode* z,
               const std::vector<std::vector<double>>& param_grads,
               const std::vector<double>* z_grad, AdamState& state, double lr,
               const AdamHyper& hp);

// N_p uniform pixel draws with replacement across the full image; integer
// pixel (i,j) is sampled at its center (i+0.5, j+0.5).
std::vector<PixelSample> sample_pixels(const ViewData& view, int view_index,
                                       std::size_t n_p, CounterRng& rng);

struct FitOptions {
  std::string out_dir;             // metrics log + checkpoints land here
  std::string resume_checkpoint;   // optional trainer checkpoint to continue
};

struct FitResult {
  FieldParams params;
  std::vector<LatentCode> codes;
  AdamState adam;
  std::size_t iterations_run = 0;
  std::size_t skipped = 0;  // iterations dropped due to non-finite gradients
  std::string checkpoint_path;
};

// The optimization loop: sample pixels -> depth_forward -> classify ->
// total_loss -> backward -> adam, honoring the n and learning-rate
// schedules, with periodic checkpoints and an append-only metrics log.
FitResult fit(const MultiViewDataset& data, const TrainConfig& cfg,
              const FitOptions& opt);

// --- trainer checkpoint -------------------------------------------------------
// A field checkpoint (see field.hpp) followed by: u32 has_optimizer (1),
// u64 iteration, u64 adam step, u64 skipped count, m arrays, v arrays, and
// latent moments, all f64 little-endian in declaration order.

struct TrainerCheckpoint {
  FieldParams params;
  std::vector<LatentCode> codes;
  AdamState adam;
  std::uint64_t iteration = 0;
  std::uint64_t skipped = 0;
};

void save_trainer_checkpoint(const std::string& path, const TrainerCheckpoint& ck);
TrainerCheckpoint load_trainer_checkpoint(const std::string& path);

}  // namespace isoray
