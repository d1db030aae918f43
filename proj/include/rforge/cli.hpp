#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <vector>

#include <json.hpp>

#include "rforge/benchmark.hpp"
#include "rforge/dpf.hpp"
#include "rforge/dpf_training.hpp"
#include "rforge/training.hpp"
#include "rforge/transformer.hpp"

namespace rforge {

// Settings for a generated beacon world; an unset seed follows --seed.
struct WorldGenConfig {
  std::size_t beacons = 6;
  double width = 10.0;
  double height = 10.0;
  double obs_noise = 0.1;
  std::optional<std::uint64_t> seed;
};

void to_json(nlohmann::json& j, const BenchmarkConfig& c);
void from_json(const nlohmann::json& j, BenchmarkConfig& c);
void to_json(nlohmann::json& j, const WorldGenConfig& c);
void from_json(const nlohmann::json& j, WorldGenConfig& c);

// Every module's settings in one file. Sections and keys are optional;
// anything unknown is rejected.
struct ExperimentConfig {
  BenchmarkConfig benchmark;
  std::vector<double> bandwidths = default_bandwidths();
  TransformerConfig transformer;
  ResamplerTrainConfig resampler_training;
  WorldGenConfig world;
  SimConfig simulation;
  FilterConfig filter;
  IndividualTrainConfig individual;
  EndToEndConfig end_to_end;

  static ExperimentConfig load(const std::filesystem::path& path);
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

// Runs one `rforge` subcommand. Returns the process exit code; diagnostics go
// to `err`, and commands that print data write to `out`.
int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace rforge
