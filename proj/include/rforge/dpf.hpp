#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "rforge/autodiff/checkpoint.hpp"
#include "rforge/autodiff/tensor.hpp"
#include "rforge/particles.hpp"
#include "rforge/resamplers.hpp"
#include "rforge/rng.hpp"

namespace rforge {

struct TransformerParams;

// Rectangular arena [0, width] x [0, height] with range beacons.
struct WorldSpec {
  double width = 10.0;
  double height = 10.0;
  std::vector<std::array<double, 2>> beacons;
  double obs_noise = 0.1;
  std::uint64_t seed = 0;

  // `count` beacons uniformly placed at least 0.5 units inside the walls.
  static WorldSpec generate(std::uint64_t seed, std::size_t count = 6, double width = 10.0, double height = 10.0,
                            double obs_noise = 0.1);
  void validate() const;
  std::vector<double> ranges(double x, double y) const;
};

void to_json(nlohmann::json& j, const WorldSpec& w);
void from_json(const nlohmann::json& j, WorldSpec& w);

struct RobotState {
  double x = 0.0, y = 0.0, theta = 0.0;
};

// Odometry (forward, lateral, heading change), expressed in the robot frame
// at the start of the step.
using Action = std::array<double, 3>;

double wrap_angle(double a);
RobotState apply_action(const RobotState& s, const Action& a);
// The action that moves `from` exactly onto `to`.
Action action_between(const RobotState& from, const RobotState& to);

// Step 0 carries a zero action; action t moves state t-1 to state t.
struct Trajectory {
  std::vector<RobotState> states;
  std::vector<Action> actions;  // noisy odometry
  std::vector<std::vector<double>> observations;

  std::size_t steps() const { return states.size(); }
};

void to_json(nlohmann::json& j, const Trajectory& t);
void from_json(const nlohmann::json& j, Trajectory& t);

struct SimConfig {
  std::size_t steps = 19;
  // Standard deviations added to the true action to form odometry.
  Action odometry_noise{0.1, 0.1, 0.1};
  double min_forward = 0.2;
  double max_forward = 0.6;
  double turn_std = 0.3;
  double wall_margin = 1.0;

  void validate() const;
};

void to_json(nlohmann::json& j, const SimConfig& c);
void from_json(const nlohmann::json& j, SimConfig& c);

// Random walk that turns toward the arena centre near walls. Trajectory i
// draws from split(i) of the seed stream.
std::vector<Trajectory> simulate_trajectories(const WorldSpec& world, const SimConfig& cfg, std::size_t count,
                                              std::uint64_t seed);

// Directory layout: world.json plus traj_NNNNN.json per trajectory.
void save_trajectories(const std::filesystem::path& dir, const WorldSpec& world, std::span<const Trajectory> trajs);
std::pair<WorldSpec, std::vector<Trajectory>> load_trajectories(const std::filesystem::path& dir);

// Learnable filter components. Motion noise scales are exp(log_scales); the
// measurement network maps [obs / range_scale, predicted / range_scale,
// 2 (obs - predicted)] through two hidden rectifier layers to one logit per
// particle.
struct FilterModels {
  ad::Tensor log_scales;  // [3]
  ad::Tensor w1, b1, w2, b2, w3, b3;
  std::size_t beacons = 0;
  std::size_t hidden = 0;
  double range_scale = 10.0;

  static FilterModels init(std::size_t beacons, std::size_t hidden, RngStream& rng, double range_scale = 10.0);

  std::vector<ad::Tensor> motion_params() const { return {log_scales}; }
  std::vector<ad::Tensor> measurement_params() const { return {w1, b1, w2, b2, w3, b3}; }
  std::vector<ad::NamedTensor> named() const;
  FilterModels clone() const;
  std::uint64_t motion_checksum() const;
  std::uint64_t measurement_checksum() const;

  // Logits [m] for observation [B] (or one per row, [m, B]) against predicted
  // ranges [m, B].
  ad::Tensor measurement_logits(const ad::Tensor& observation, const ad::Tensor& predicted) const;
};

void save_models(const std::filesystem::path& path, const FilterModels& models);
FilterModels load_models(const std::filesystem::path& path);

// Particles carry (x, y, cos theta, sin theta) rows.
constexpr std::size_t kEmbeddedDim = 4;

std::vector<double> embed_state(const RobotState& s);

// Ranges [n, B] from embedded particles [n, 4] to every beacon.
ad::Tensor predicted_ranges(const ad::Tensor& particles, const WorldSpec& world);

// Moves particles [n, 4] by `action` plus scale * noise, noise [n, 3] fixed
// standard-normal draws.
ad::Tensor motion_update(const ad::Tensor& particles, const Action& action, const ad::Tensor& log_scales,
                         const ad::Tensor& noise);

// New weights proportional to old weights times exp(logits [n]); throws
// std::domain_error when no weight survives.
TensorParticles reweight(const TensorParticles& set, const ad::Tensor& logits);

// Applies reweight with the measurement network's logits.
TensorParticles measurement_update(const TensorParticles& set, std::span<const double> observation,
                                   const FilterModels& models, const WorldSpec& world);

struct FilterConfig {
  std::size_t particles = 32;
  double prior_pos_std = 0.5;
  double prior_heading_std = 0.3;
  double error_threshold = 0.5;
  // Bandwidth of the KDE likelihood of the true state used as training loss.
  double loss_bandwidth = 0.5;

  void validate() const;
};

void to_json(nlohmann::json& j, const FilterConfig& c);
void from_json(const nlohmann::json& j, FilterConfig& c);

struct StepEstimate {
  RobotState estimate;
  double ess = 0.0;
};

// Weighted mean position and circular mean heading, plus the ESS.
StepEstimate estimate_state(const TensorParticles& set);

struct FilterOptions {
  // Gradient stop period; resampled particles are detached after step t
  // whenever t mod k == 0. Zero keeps the whole unroll connected.
  std::size_t stop_every = 0;
  bool build_loss = false;
  bool keep_sets = false;
};

struct FilterRun {
  std::vector<StepEstimate> steps;
  // Per-step loss terms (only when build_loss); mean is the unroll loss.
  std::vector<ad::Tensor> step_losses;
  ad::Tensor loss;
  // Weighted set before and uniform set after each resampling event (keep_sets).
  std::vector<ParticleSet> pre_resample;
  std::vector<ParticleSet> post_resample;
  // Last-step estimate as a differentiable [2] tensor (x, y).
  ad::Tensor final_position;
};

// Step 0: prior around the true start, then a measurement update. Steps
// 1..T-1: motion, measurement, estimate, resample. Trajectory-specific draws
// come from `rng`.
FilterRun run_filter(const Trajectory& traj, const WorldSpec& world, const FilterModels& models,
                     const FilterConfig& cfg, const ResamplerKind& resampler, const TransformerParams* transformer,
                     const RngStream& rng, const FilterOptions& options = {});

struct LocalizationMetrics {
  std::string resampler;
  double error_rate = 0.0;
  double error_rate_stderr = 0.0;
  double mse = 0.0;
  double mse_stderr = 0.0;
  std::size_t trajectories = 0;
};

// Final-step position errors of each trajectory; trajectory i uses split(i).
std::vector<double> final_errors(std::span<const Trajectory> trajs, const WorldSpec& world, const FilterModels& models,
                                 const FilterConfig& cfg, const ResamplerKind& resampler,
                                 const TransformerParams* transformer, std::uint64_t seed);

LocalizationMetrics metrics_from_errors(std::string resampler, std::span<const double> errors, double threshold);

LocalizationMetrics evaluate(std::span<const Trajectory> trajs, const WorldSpec& world, const FilterModels& models,
                             const FilterConfig& cfg, const ResamplerKind& resampler,
                             const TransformerParams* transformer, std::uint64_t seed);

// Mean of per-trial values with the standard error across trials.
LocalizationMetrics aggregate_trials(std::span<const LocalizationMetrics> trials);

void write_metrics_csv(std::ostream& os, std::span<const LocalizationMetrics> rows);

}  // namespace rforge
