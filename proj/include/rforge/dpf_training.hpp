#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "rforge/autodiff/optim.hpp"
#include "rforge/dpf.hpp"
#include "rforge/transformer.hpp"

namespace rforge {

struct IndividualTrainConfig {
  ad::AdamOptions adam{};  // lr 1e-3
  std::size_t hidden = 32;
  std::size_t batch_size = 256;
  std::size_t epochs = 20;
  // Perturbed states drawn per recorded observation; one of them sits on the
  // true state. Offsets use a position std picked from `perturbation_stds`.
  std::size_t samples_per_observation = 8;
  std::vector<double> perturbation_stds{0.05, 0.1, 0.2, 0.5, 1.0, 2.0};
  // Regression targets below this log-likelihood are clamped to it.
  double logit_floor = -50.0;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const IndividualTrainConfig& c);
void from_json(const nlohmann::json& j, IndividualTrainConfig& c);

// Noise scales that maximize the Gaussian likelihood of the odometry residuals
// against the true motion (zero-mean, per component).
Action fit_motion_noise(std::span<const Trajectory> trajs);

struct IndividualResult {
  FilterModels models;
  std::vector<double> measurement_losses;  // mean squared error per epoch
};

// Motion scales in closed form, then the measurement network by regression
// onto the Gaussian range log-likelihood of perturbed states.
IndividualResult train_models_individually(std::span<const Trajectory> trajs, const WorldSpec& world,
                                           const IndividualTrainConfig& cfg,
                                           const std::function<void(std::size_t, double)>& on_epoch = {});

struct ResamplerSample {
  std::size_t trajectory = 0;
  std::size_t step = 0;  // 1-based filter step of the resampling event
};

struct ResamplerData {
  std::vector<ParticleSet> inputs;
  std::vector<ParticleSet> targets;
  std::vector<ResamplerSample> index;
  // Trajectories dropped after a degenerate update, with the message.
  std::vector<std::pair<std::size_t, std::string>> skipped;
};

ResamplerData collect_resampler_data(std::span<const Trajectory> trajs, const WorldSpec& world,
                                     const FilterModels& models, const FilterConfig& cfg, const ResamplerKind& baseline,
                                     std::uint64_t seed);

// inputs.pset, targets.pset and index.csv (set,trajectory,step).
void write_resampler_data(const std::filesystem::path& dir, const ResamplerData& data);

enum class Component { motion, measurement, resampler };
std::string component_name(Component c);

struct FreezeFlags {
  bool motion = false;
  bool measurement = false;
  bool resampler = false;

  bool frozen(Component c) const;
  static FreezeFlags parse(std::span<const std::string> names);
  std::string label() const;
};

struct EndToEndConfig {
  static constexpr double kDefaultClipNorm = 10.0;

  ad::AdamOptions adam{1e-4};
  std::size_t batch_size = 8;  // trajectories per optimizer step
  std::size_t epochs = 5;
  // Gradient stop period k >= 1.
  std::size_t stop_every = 1;
  std::optional<double> clip_norm;
  FreezeFlags freeze;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const EndToEndConfig& c);
void from_json(const nlohmann::json& j, EndToEndConfig& c);

struct GradNormRecord {
  std::size_t step = 0;  // optimizer step, 1-based
  Component component = Component::motion;
  double pre_clip_norm = 0.0;
  double post_clip_norm = 0.0;
  std::size_t k = 0;
};

// Columns step,component,pre_clip_norm,k.
void write_grad_norm_csv(std::ostream& os, std::span<const GradNormRecord> records);

struct EndToEndResult {
  std::vector<double> epoch_losses;
  std::vector<GradNormRecord> grad_norms;
};

// Trains the unfrozen components in place. Each component is clipped on its
// own global norm. `transformer` is required when `resampler` is the
// transformer and is otherwise ignored.
EndToEndResult train_end_to_end(FilterModels& models, TransformerParams* transformer, std::span<const Trajectory> trajs,
                                const WorldSpec& world, const FilterConfig& filter, const ResamplerKind& resampler,
                                const EndToEndConfig& cfg,
                                const std::function<void(std::size_t, double)>& on_epoch = {});

struct BpttCell {
  std::size_t k = 1;
  FreezeFlags freeze;
  std::optional<double> clip_norm;
};

struct BpttRow {
  BpttCell cell;
  std::optional<LocalizationMetrics> metrics;
  std::string error;  // non-empty when the cell failed
};

struct MedianNorm {
  BpttCell cell;
  Component component;
  double median_pre_clip_norm = 0.0;
  std::size_t count = 0;
};

struct BpttSweepResult {
  std::vector<BpttRow> rows;
  std::vector<MedianNorm> medians;
  std::vector<GradNormRecord> grad_norms;
};

// Every cell starts from copies of `models` and `transformer`, trains end to
// end with the cell's k, freeze and clip, then evaluates on `test`.
BpttSweepResult bptt_sweep(const FilterModels& models, const TransformerParams* transformer,
                           std::span<const Trajectory> train, std::span<const Trajectory> test, const WorldSpec& world,
                           const FilterConfig& filter, const ResamplerKind& resampler, const EndToEndConfig& base,
                           std::span<const BpttCell> cells, std::uint64_t eval_seed);

void write_bptt_csv(std::ostream& os, std::span<const BpttRow> rows);
void write_median_norm_csv(std::ostream& os, std::span<const MedianNorm> medians);

double median(std::vector<double> values);

}  // namespace rforge
