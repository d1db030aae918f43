#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "rforge/autodiff/optim.hpp"
#include "rforge/loss.hpp"
#include "rforge/particles.hpp"
#include "rforge/transformer.hpp"

namespace rforge {

// Input sets paired with the sets the resampler output is scored against.
struct ResamplingDataset {
  std::vector<ParticleSet> inputs;
  std::vector<ParticleSet> targets;

  std::size_t size() const { return inputs.size(); }
  static ResamplingDataset load(const std::filesystem::path& inputs, const std::filesystem::path& targets);
};

struct ResamplerTrainConfig {
  ad::AdamOptions adam{};  // lr 1e-3
  std::size_t batch_size = 32;
  std::size_t epochs = 20;
  double bandwidth = 0.5;
  // Unset: score against the dataset's own target sets.
  std::optional<TargetStrategy> targets;
  // Global-norm clipping threshold; unset disables clipping.
  std::optional<double> clip_norm;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const ResamplerTrainConfig& c);
void from_json(const nlohmann::json& j, ResamplerTrainConfig& c);

struct ResamplerEpoch {
  std::size_t epoch = 0;  // 0 is the untrained model
  double train_loss = 0.0;
  double eval_loss = 0.0;
};

// Parameters plus optimizer moments and the number of finished epochs, so a
// run can stop and resume without changing its result.
struct ResamplerTrainState {
  TransformerParams params;
  ad::AdamState adam;
  std::size_t epochs_done = 0;

  void save(const std::filesystem::path& path) const;
  static ResamplerTrainState load(const std::filesystem::path& path);
};

// Mean resampling loss of the transformer over a dataset at `bandwidth`.
double mean_resampling_loss(const TransformerParams& params, const ResamplingDataset& data, double bandwidth,
                            const std::optional<TargetStrategy>& targets, std::uint64_t seed);

// Runs epochs up to cfg.epochs, continuing from `state`. Epoch e shuffles with
// split(e) of the seed stream. `on_epoch` sees each finished epoch.
std::vector<ResamplerEpoch> train_resampler(ResamplerTrainState& state, const ResamplingDataset& train,
                                            const ResamplingDataset& eval, const ResamplerTrainConfig& cfg,
                                            const std::function<void(const ResamplerEpoch&)>& on_epoch = {});

}  // namespace rforge
