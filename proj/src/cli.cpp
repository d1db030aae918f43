#include "rforge/cli.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include "rforge/format.hpp"
#include "rforge/json_util.hpp"

namespace rforge {

void to_json(nlohmann::json& j, const BenchmarkConfig& c) {
  j = nlohmann::json{{"particles", c.particles}, {"dim", c.dim}, {"reuse_inputs_as_targets", c.reuse_inputs_as_targets}};
}

void from_json(const nlohmann::json& j, BenchmarkConfig& c) {
  reject_unknown_keys(j, {"particles", "dim", "reuse_inputs_as_targets"}, "benchmark config");
  c.particles = j.value("particles", c.particles);
  c.dim = j.value("dim", c.dim);
  c.reuse_inputs_as_targets = j.value("reuse_inputs_as_targets", c.reuse_inputs_as_targets);
  if (c.particles == 0 || c.dim == 0) throw std::invalid_argument("benchmark config: particles and dim must be positive");
}

void to_json(nlohmann::json& j, const WorldGenConfig& c) {
  j = nlohmann::json{{"beacons", c.beacons},
                     {"width", c.width},
                     {"height", c.height},
                     {"obs_noise", c.obs_noise},
                     {"seed", c.seed ? nlohmann::json(*c.seed) : nlohmann::json()}};
}

void from_json(const nlohmann::json& j, WorldGenConfig& c) {
  reject_unknown_keys(j, {"beacons", "width", "height", "obs_noise", "seed"}, "world config");
  c.beacons = j.value("beacons", c.beacons);
  c.width = j.value("width", c.width);
  c.height = j.value("height", c.height);
  c.obs_noise = j.value("obs_noise", c.obs_noise);
  if (j.contains("seed")) {
    c.seed = j.at("seed").is_null() ? std::nullopt : std::optional(j.at("seed").get<std::uint64_t>());
  }
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json{{"benchmark", c.benchmark},
                     {"bandwidths", c.bandwidths},
                     {"transformer", c.transformer},
                     {"resampler_training", c.resampler_training},
                     {"world", c.world},
                     {"simulation", c.simulation},
                     {"filter", c.filter},
                     {"individual", c.individual},
                     {"end_to_end", c.end_to_end}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  reject_unknown_keys(j,
                      {"benchmark", "bandwidths", "transformer", "resampler_training", "world", "simulation", "filter",
                       "individual", "end_to_end"},
                      "experiment config");
  // Missing keys inside a section keep their defaults.
  auto section = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
  };
  section("benchmark", c.benchmark);
  section("transformer", c.transformer);
  section("resampler_training", c.resampler_training);
  section("world", c.world);
  section("simulation", c.simulation);
  section("filter", c.filter);
  section("individual", c.individual);
  section("end_to_end", c.end_to_end);
  if (j.contains("bandwidths")) c.bandwidths = j.at("bandwidths").get<std::vector<double>>();
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error(path.string() + ": cannot open config file");
  try {
    return nlohmann::json::parse(is).get<ExperimentConfig>();
  } catch (const std::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

namespace {

struct Common {
  std::uint64_t seed = 0;
  std::string config;
  CLI::Option* seed_option = nullptr;

  bool seed_given() const { return seed_option != nullptr && seed_option->count() > 0; }
};

void add_common(CLI::App* cmd, Common& c) {
  c.seed_option = cmd->add_option("--seed", c.seed, "Seed for all randomness of this command");
  cmd->add_option("--config", c.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : ExperimentConfig::load(c.config);
  if (c.seed_given()) {
    cfg.resampler_training.seed = c.seed;
    cfg.individual.seed = c.seed;
    cfg.end_to_end.seed = c.seed;
  }
  return cfg;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error(path.string() + ": cannot open for writing");
  os << text;
  if (!os) throw std::runtime_error(path.string() + ": write failed");
}

void write_resolved(const std::filesystem::path& path, const std::string& command, std::uint64_t seed,
                    const nlohmann::json& options, const ExperimentConfig& cfg) {
  const nlohmann::json j{{"command", command}, {"seed", seed}, {"options", options}, {"config", cfg}};
  write_text(path, j.dump(2) + "\n");
}

// Output sitting in a directory gets config.json; a file gets <file>.config.json.
double parse_number(const std::string& text, const std::string& what) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
  }
  if (used == 0 || used != text.size()) throw std::invalid_argument(what + ": expected a number, got '" + text + "'");
  return v;
}

std::filesystem::path config_beside(const std::filesystem::path& out, bool is_dir) {
  return is_dir ? out / "config.json" : std::filesystem::path(out.string() + ".config.json");
}

WorldSpec make_world(const ExperimentConfig& cfg, std::uint64_t fallback_seed) {
  return WorldSpec::generate(cfg.world.seed.value_or(fallback_seed), cfg.world.beacons, cfg.world.width, cfg.world.height,
                             cfg.world.obs_noise);
}

std::optional<TransformerParams> load_checkpoint_if(const std::string& path) {
  if (path.empty()) return std::nullopt;
  return load_transformer(path);
}

ResamplerKind parse_kind(const std::string& name, std::optional<double> alpha) {
  return alpha ? ResamplerKind::parse(name, *alpha) : ResamplerKind::parse(name);
}

template <class T>
std::string csv(const T& write) {
  std::ostringstream os;
  write(os);
  return os.str();
}

}  // namespace

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Particle resampling experiments: synthetic benchmark and differentiable particle filter", "rforge"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  std::function<void()> action;
  auto on = [&](CLI::App* cmd, std::function<void()> f) { cmd->callback([&action, f] { action = f; }); };

  // gen-data
  Common gen_common;
  std::size_t gen_count = 0;
  std::vector<std::size_t> gen_split;
  std::string gen_out = "data";
  auto* gen = app.add_subcommand("gen-data", "Generate synthetic benchmark particle-set datasets");
  add_common(gen, gen_common);
  gen->add_option("--count", gen_count, "Total number of sets")->required();
  gen->add_option("--split", gen_split, "train,eval set counts summing to --count")->delimiter(',')->expected(2);
  gen->add_option("--out", gen_out, "Output directory");
  on(gen, [&] {
    auto cfg = resolve(gen_common);
    std::size_t train = gen_count - gen_count / 6, eval = gen_count / 6;
    if (!gen_split.empty()) {
      if (gen_split[0] + gen_split[1] != gen_count) {
        throw std::invalid_argument("--split " + std::to_string(gen_split[0]) + "," + std::to_string(gen_split[1]) +
                                    " does not sum to --count " + std::to_string(gen_count));
      }
      train = gen_split[0];
      eval = gen_split[1];
    }
    generate_dataset(gen_out, train, eval, gen_common.seed, cfg.benchmark);
    write_resolved(config_beside(gen_out, true), "gen-data", gen_common.seed,
                   {{"count", gen_count}, {"train", train}, {"eval", eval}}, cfg);
  });

  // sweep
  Common sweep_common;
  std::string sweep_resampler, sweep_data, sweep_inputs, sweep_targets, sweep_checkpoint, sweep_out;
  std::optional<double> sweep_alpha;
  std::vector<double> sweep_bandwidths;
  auto* sweep = app.add_subcommand("sweep", "Mean resampling loss per kernel bandwidth for one resampler");
  add_common(sweep, sweep_common);
  sweep->add_option("--resampler", sweep_resampler, "multinomial|systematic|soft|none|transformer")->required();
  sweep->add_option("--alpha", sweep_alpha, "Soft resampling mixture weight");
  sweep->add_option("--data", sweep_data, "Dataset directory; uses its eval split");
  sweep->add_option("--inputs", sweep_inputs, "Input sets (PSET1)");
  sweep->add_option("--targets", sweep_targets, "Target sets (PSET1)");
  sweep->add_option("--bandwidths", sweep_bandwidths, "Comma-separated bandwidths")->delimiter(',');
  sweep->add_option("--checkpoint", sweep_checkpoint, "Transformer checkpoint");
  sweep->add_option("--out", sweep_out, "CSV path (default: stdout)");
  on(sweep, [&] {
    auto cfg = resolve(sweep_common);
    if (!sweep_bandwidths.empty()) cfg.bandwidths = sweep_bandwidths;
    std::filesystem::path inputs = sweep_inputs, targets = sweep_targets;
    if (!sweep_data.empty()) {
      const auto files = DatasetFiles::in(sweep_data);
      if (inputs.empty()) inputs = files.eval_inputs;
      if (targets.empty()) targets = files.eval_targets;
    }
    if (inputs.empty() || targets.empty()) throw std::invalid_argument("sweep needs --data or both --inputs and --targets");
    const auto model = load_checkpoint_if(sweep_checkpoint);
    const auto rows = bandwidth_sweep(parse_kind(sweep_resampler, sweep_alpha), inputs, targets, cfg.bandwidths,
                                      sweep_common.seed, model ? &*model : nullptr);
    const auto text = csv([&](std::ostream& os) { write_sweep_csv(os, rows); });
    if (sweep_out.empty()) {
      out << text;
    } else {
      write_text(sweep_out, text);
      write_resolved(config_beside(sweep_out, false), "sweep", sweep_common.seed,
                     {{"resampler", sweep_resampler}, {"inputs", inputs.string()}, {"targets", targets.string()},
                      {"checkpoint", sweep_checkpoint}},
                     cfg);
    }
  });

  // simulate
  Common sim_common;
  std::size_t sim_count = 0;
  std::optional<std::size_t> sim_steps;
  std::optional<std::uint64_t> sim_world_seed;
  std::string sim_out;
  auto* sim = app.add_subcommand("simulate", "Simulate localization trajectories in a beacon world");
  add_common(sim, sim_common);
  sim->add_option("--count", sim_count, "Number of trajectories")->required();
  sim->add_option("--steps", sim_steps, "Steps per trajectory");
  sim->add_option("--world-seed", sim_world_seed, "World seed (default: world.seed from config, else --seed)");
  sim->add_option("--out", sim_out, "Output directory")->required();
  on(sim, [&] {
    auto cfg = resolve(sim_common);
    if (sim_steps) cfg.simulation.steps = *sim_steps;
    if (sim_world_seed) cfg.world.seed = sim_world_seed;
    cfg.simulation.validate();
    const auto world = make_world(cfg, sim_common.seed);
    cfg.world.seed = world.seed;
    save_trajectories(sim_out, world, simulate_trajectories(world, cfg.simulation, sim_count, sim_common.seed));
    write_resolved(config_beside(sim_out, true), "simulate", sim_common.seed, {{"count", sim_count}},
                   cfg);
  });

  // train-individual
  Common ind_common;
  std::string ind_trajs, ind_out;
  auto* ind = app.add_subcommand("train-individual", "Fit the motion noise and train the measurement model");
  add_common(ind, ind_common);
  ind->add_option("--trajectories", ind_trajs, "Trajectory directory")->required();
  ind->add_option("--out", ind_out, "Model checkpoint path")->required();
  on(ind, [&] {
    auto cfg = resolve(ind_common);
    const auto [world, trajs] = load_trajectories(ind_trajs);
    auto result = train_models_individually(trajs, world, cfg.individual, [&](std::size_t e, double loss) {
      err << "measurement epoch " << e << " mse " << format_double(loss) << '\n';
    });
    save_models(ind_out, result.models);
    std::ostringstream os;
    os << "epoch,measurement_mse\n";
    for (std::size_t e = 0; e < result.measurement_losses.size(); ++e) {
      os << e + 1 << ',' << format_double(result.measurement_losses[e]) << '\n';
    }
    write_text(ind_out + ".losses.csv", os.str());
    write_resolved(config_beside(ind_out, false), "train-individual", cfg.individual.seed,
                   {{"trajectories", ind_trajs}}, cfg);
  });

  // collect-resampler-data
  Common col_common;
  std::string col_trajs, col_models, col_baseline = "systematic", col_out;
  auto* col = app.add_subcommand("collect-resampler-data", "Log resampler input and output sets from filter runs");
  add_common(col, col_common);
  col->add_option("--trajectories", col_trajs, "Trajectory directory")->required();
  col->add_option("--models", col_models, "Model checkpoint")->required();
  col->add_option("--baseline", col_baseline, "multinomial|systematic|soft");
  col->add_option("--out", col_out, "Output directory")->required();
  on(col, [&] {
    auto cfg = resolve(col_common);
    const auto [world, trajs] = load_trajectories(col_trajs);
    const auto data = collect_resampler_data(trajs, world, load_models(col_models), cfg.filter,
                                             ResamplerKind::parse(col_baseline), col_common.seed);
    for (const auto& [i, msg] : data.skipped) err << "skipped trajectory " << i << ": " << msg << '\n';
    write_resampler_data(col_out, data);
    write_resolved(config_beside(col_out, true), "collect-resampler-data", col_common.seed,
                   {{"trajectories", col_trajs}, {"models", col_models}, {"baseline", col_baseline}}, cfg);
  });

  // train-resampler
  Common tr_common;
  std::string tr_data, tr_train_in, tr_train_tg, tr_eval_in, tr_eval_tg, tr_out;
  std::optional<std::size_t> tr_epochs;
  bool tr_resume = false;
  auto* tr = app.add_subcommand("train-resampler", "Train the particle transformer on input/target set pairs");
  add_common(tr, tr_common);
  tr->add_option("--data", tr_data, "Benchmark dataset directory (train and eval splits)");
  tr->add_option("--train-inputs", tr_train_in, "Training input sets");
  tr->add_option("--train-targets", tr_train_tg, "Training target sets");
  tr->add_option("--eval-inputs", tr_eval_in, "Evaluation input sets");
  tr->add_option("--eval-targets", tr_eval_tg, "Evaluation target sets");
  tr->add_option("--epochs", tr_epochs, "Total epochs");
  tr->add_flag("--resume", tr_resume, "Continue from the checkpoint at --out");
  tr->add_option("--out", tr_out, "Checkpoint path")->required();
  on(tr, [&] {
    auto cfg = resolve(tr_common);
    if (tr_epochs) cfg.resampler_training.epochs = *tr_epochs;
    if (!tr_data.empty()) {
      const auto files = DatasetFiles::in(tr_data);
      if (tr_train_in.empty()) tr_train_in = files.train_inputs.string();
      if (tr_train_tg.empty()) tr_train_tg = files.train_targets.string();
      if (tr_eval_in.empty()) tr_eval_in = files.eval_inputs.string();
      if (tr_eval_tg.empty()) tr_eval_tg = files.eval_targets.string();
    }
    if (tr_train_in.empty() || tr_train_tg.empty() || tr_eval_in.empty() || tr_eval_tg.empty()) {
      throw std::invalid_argument("train-resampler needs --data or all of --train-inputs, --train-targets, "
                                  "--eval-inputs and --eval-targets");
    }
    const auto train = ResamplingDataset::load(tr_train_in, tr_train_tg);
    const auto eval = ResamplingDataset::load(tr_eval_in, tr_eval_tg);
    if (train.size() == 0) throw std::invalid_argument(tr_train_in + ": no sets");
    cfg.transformer.particles = train.inputs.front().size();
    cfg.transformer.dim = train.inputs.front().dim();
    ResamplerTrainState state;
    if (tr_resume) {
      state = ResamplerTrainState::load(tr_out);
      cfg.transformer = state.params.config;
    } else {
      RngStream rng = RngStream(cfg.resampler_training.seed).split(0x696e6974ULL);
      state.params = TransformerParams::init(cfg.transformer, rng);
    }
    std::ostringstream log;
    log << "epoch,train_loss,eval_loss\n";
    train_resampler(state, train, eval, cfg.resampler_training, [&](const ResamplerEpoch& e) {
      err << "epoch " << e.epoch << " train " << format_double(e.train_loss) << " eval " << format_double(e.eval_loss)
          << '\n';
      log << e.epoch << ',' << format_double(e.train_loss) << ',' << format_double(e.eval_loss) << '\n';
    });
    state.save(tr_out);
    const std::filesystem::path log_path = tr_out + ".epochs.csv";
    if (tr_resume && std::filesystem::exists(log_path)) {
      std::ifstream is(log_path);
      std::string previous{std::istreambuf_iterator<char>(is), {}};
      const auto body = log.str().substr(log.str().find('\n') + 1);
      write_text(log_path, previous + body);
    } else {
      write_text(log_path, log.str());
    }
    write_resolved(config_beside(tr_out, false), "train-resampler", cfg.resampler_training.seed,
                   {{"train_inputs", tr_train_in},
                    {"train_targets", tr_train_tg},
                    {"eval_inputs", tr_eval_in},
                    {"eval_targets", tr_eval_tg},
                    {"resume", tr_resume}},
                   cfg);
  });

  // train-e2e
  Common e2e_common;
  std::string e2e_trajs, e2e_models, e2e_checkpoint, e2e_resampler = "transformer", e2e_out;
  std::optional<std::size_t> e2e_k, e2e_epochs;
  std::string e2e_clip;
  std::vector<std::string> e2e_freeze;
  auto* e2e = app.add_subcommand("train-e2e", "Train filter components jointly through the unrolled filter");
  add_common(e2e, e2e_common);
  e2e->add_option("--trajectories", e2e_trajs, "Training trajectory directory")->required();
  e2e->add_option("--models", e2e_models, "Initial model checkpoint")->required();
  e2e->add_option("--checkpoint", e2e_checkpoint, "Initial transformer checkpoint");
  e2e->add_option("--resampler", e2e_resampler, "Resampler used inside the filter");
  e2e->add_option("--k", e2e_k, "Gradient stop period");
  auto* e2e_clip_opt = e2e->add_option("--clip-norm", e2e_clip, "Per-component gradient norm clip (10 if no value)")
                          ->expected(0, 1);
  e2e->add_option("--freeze", e2e_freeze, "Components to keep fixed")->delimiter(',');
  e2e->add_option("--epochs", e2e_epochs, "Epochs");
  e2e->add_option("--out", e2e_out, "Output directory")->required();
  on(e2e, [&] {
    auto cfg = resolve(e2e_common);
    if (e2e_k) cfg.end_to_end.stop_every = *e2e_k;
    if (e2e_clip_opt->count() > 0) {
      cfg.end_to_end.clip_norm = e2e_clip.empty() ? EndToEndConfig::kDefaultClipNorm : parse_number(e2e_clip, "--clip-norm");
    }
    if (!e2e_freeze.empty()) cfg.end_to_end.freeze = FreezeFlags::parse(e2e_freeze);
    if (e2e_epochs) cfg.end_to_end.epochs = *e2e_epochs;
    const auto [world, trajs] = load_trajectories(e2e_trajs);
    auto models = load_models(e2e_models);
    auto transformer = load_checkpoint_if(e2e_checkpoint);
    auto result = train_end_to_end(models, transformer ? &*transformer : nullptr, trajs, world, cfg.filter,
                                   ResamplerKind::parse(e2e_resampler), cfg.end_to_end, [&](std::size_t e, double loss) {
                                     err << "epoch " << e << " loss " << format_double(loss) << '\n';
                                   });
    const std::filesystem::path dir = e2e_out;
    std::filesystem::create_directories(dir);
    save_models(dir / "models.ptchk", models);
    if (transformer) save_transformer(dir / "transformer.ptchk", *transformer);
    write_text(dir / "grad_norms.csv", csv([&](std::ostream& os) { write_grad_norm_csv(os, result.grad_norms); }));
    std::ostringstream losses;
    losses << "epoch,loss\n";
    for (std::size_t e = 0; e < result.epoch_losses.size(); ++e) {
      losses << e + 1 << ',' << format_double(result.epoch_losses[e]) << '\n';
    }
    write_text(dir / "losses.csv", losses.str());
    write_resolved(config_beside(dir, true), "train-e2e", cfg.end_to_end.seed,
                   {{"trajectories", e2e_trajs},
                    {"models", e2e_models},
                    {"checkpoint", e2e_checkpoint},
                    {"resampler", e2e_resampler}},
                   cfg);
  });

  // bptt-sweep
  Common bp_common;
  std::string bp_trajs, bp_test, bp_models, bp_checkpoint, bp_resampler = "transformer", bp_out;
  std::vector<std::size_t> bp_k{1, 3, 5};
  std::vector<std::string> bp_freeze{"none"}, bp_clip{"none"};
  auto* bp = app.add_subcommand("bptt-sweep", "End-to-end training and evaluation per gradient-stop period");
  add_common(bp, bp_common);
  bp->add_option("--trajectories", bp_trajs, "Training trajectory directory")->required();
  bp->add_option("--test", bp_test, "Test trajectory directory")->required();
  bp->add_option("--models", bp_models, "Initial model checkpoint")->required();
  bp->add_option("--checkpoint", bp_checkpoint, "Initial transformer checkpoint");
  bp->add_option("--resampler", bp_resampler, "Resampler used inside the filter");
  bp->add_option("--k-list", bp_k, "Gradient stop periods")->delimiter(',');
  bp->add_option("--freeze-options", bp_freeze, "Freeze settings, e.g. none,resampler,motion+measurement")
      ->delimiter(',');
  bp->add_option("--clip-options", bp_clip, "Clip settings, e.g. none,10")->delimiter(',');
  bp->add_option("--out", bp_out, "Output directory")->required();
  on(bp, [&] {
    auto cfg = resolve(bp_common);
    const auto [world, train] = load_trajectories(bp_trajs);
    const auto [test_world, test] = load_trajectories(bp_test);
    if (test_world.beacons != world.beacons) throw std::invalid_argument(bp_test + ": world differs from " + bp_trajs);
    const auto models = load_models(bp_models);
    const auto transformer = load_checkpoint_if(bp_checkpoint);
    std::vector<BpttCell> cells;
    for (auto k : bp_k) {
      for (const auto& f : bp_freeze) {
        std::vector<std::string> names;
        std::stringstream ss(f);
        for (std::string part; std::getline(ss, part, '+');) names.push_back(part);
        for (const auto& c : bp_clip) {
          cells.push_back({k, FreezeFlags::parse(names), c == "none" ? std::nullopt : std::optional(parse_number(c, "--clip-options"))});
        }
      }
    }
    const auto result = bptt_sweep(models, transformer ? &*transformer : nullptr, train, test, world, cfg.filter,
                                   ResamplerKind::parse(bp_resampler), cfg.end_to_end, cells, bp_common.seed);
    for (const auto& r : result.rows) {
      if (!r.error.empty()) err << "cell k=" << r.cell.k << " failed: " << r.error << '\n';
    }
    const std::filesystem::path dir = bp_out;
    write_text(dir / "bptt.csv", csv([&](std::ostream& os) { write_bptt_csv(os, result.rows); }));
    write_text(dir / "median_norms.csv", csv([&](std::ostream& os) { write_median_norm_csv(os, result.medians); }));
    write_text(dir / "grad_norms.csv", csv([&](std::ostream& os) { write_grad_norm_csv(os, result.grad_norms); }));
    write_resolved(config_beside(dir, true), "bptt-sweep", bp_common.seed,
                   {{"trajectories", bp_trajs},
                    {"test", bp_test},
                    {"models", bp_models},
                    {"checkpoint", bp_checkpoint},
                    {"resampler", bp_resampler},
                    {"k_list", bp_k},
                    {"freeze_options", bp_freeze},
                    {"clip_options", bp_clip}},
                   cfg);
  });

  // run-filter
  Common rf_common;
  std::string rf_trajs, rf_models, rf_checkpoint, rf_resampler = "systematic", rf_out, rf_log;
  std::optional<double> rf_alpha;
  auto* rf = app.add_subcommand("run-filter", "Run the filter and write per-step estimates");
  add_common(rf, rf_common);
  rf->add_option("--trajectories", rf_trajs, "Trajectory directory")->required();
  rf->add_option("--models", rf_models, "Model checkpoint")->required();
  rf->add_option("--resampler", rf_resampler, "multinomial|systematic|soft|none|transformer");
  rf->add_option("--alpha", rf_alpha, "Soft resampling mixture weight");
  rf->add_option("--checkpoint", rf_checkpoint, "Transformer checkpoint");
  rf->add_option("--out", rf_out, "Estimates CSV path")->required();
  rf->add_option("--log-particles", rf_log, "Directory for pre/post resampling particle logs");
  on(rf, [&] {
    auto cfg = resolve(rf_common);
    const auto [world, trajs] = load_trajectories(rf_trajs);
    const auto models = load_models(rf_models);
    const auto transformer = load_checkpoint_if(rf_checkpoint);
    const auto kind = parse_kind(rf_resampler, rf_alpha);
    const RngStream root(rf_common.seed);
    std::ostringstream est;
    est << "trajectory,step,true_x,true_y,true_theta,est_x,est_y,est_theta,ess\n";
    std::vector<ParticleSet> pre, post;
    std::ostringstream index;
    index << "set,trajectory,step\n";
    for (std::size_t i = 0; i < trajs.size(); ++i) {
      ad::NoGradGuard no_grad;
      auto run = run_filter(trajs[i], world, models, cfg.filter, kind, transformer ? &*transformer : nullptr,
                            root.split(i), {.keep_sets = !rf_log.empty()});
      for (std::size_t s = 0; s < run.steps.size(); ++s) {
        const auto& t = trajs[i].states[s];
        const auto& e = run.steps[s];
        est << i << ',' << s + 1 << ',' << format_double(t.x) << ',' << format_double(t.y) << ','
            << format_double(t.theta) << ',' << format_double(e.estimate.x) << ',' << format_double(e.estimate.y)
            << ',' << format_double(e.estimate.theta) << ',' << format_double(e.ess) << '\n';
      }
      for (std::size_t e = 0; e < run.pre_resample.size(); ++e) {
        index << pre.size() << ',' << i << ',' << e + 2 << '\n';
        pre.push_back(std::move(run.pre_resample[e]));
        post.push_back(std::move(run.post_resample[e]));
      }
    }
    write_text(rf_out, est.str());
    if (!rf_log.empty()) {
      std::filesystem::create_directories(rf_log);
      write_pset(std::filesystem::path(rf_log) / "pre_resample.pset", pre);
      write_pset(std::filesystem::path(rf_log) / "post_resample.pset", post);
      write_text(std::filesystem::path(rf_log) / "index.csv", index.str());
    }
    write_resolved(config_beside(rf_out, false), "run-filter", rf_common.seed,
                   {{"trajectories", rf_trajs}, {"models", rf_models}, {"resampler", kind.name()},
                    {"checkpoint", rf_checkpoint}},
                   cfg);
  });

  // evaluate
  Common ev_common;
  std::string ev_trajs, ev_models, ev_checkpoint, ev_out;
  std::vector<std::string> ev_resamplers{"none", "multinomial", "systematic", "soft"};
  std::size_t ev_trials = 1;
  auto* ev = app.add_subcommand("evaluate", "Final-step error rate and MSE per resampler");
  add_common(ev, ev_common);
  ev->add_option("--trajectories", ev_trajs, "Test trajectory directory")->required();
  ev->add_option("--models", ev_models, "Model checkpoint")->required();
  ev->add_option("--resampler", ev_resamplers, "Resamplers to compare")->delimiter(',');
  ev->add_option("--checkpoint", ev_checkpoint, "Transformer checkpoint");
  ev->add_option("--trials", ev_trials, "Independent filter seeds averaged per resampler")->check(CLI::PositiveNumber);
  ev->add_option("--out", ev_out, "Metrics CSV path (default: stdout)");
  on(ev, [&] {
    auto cfg = resolve(ev_common);
    const auto [world, trajs] = load_trajectories(ev_trajs);
    if (trajs.size() < 30) err << "warning: only " << trajs.size() << " test trajectories\n";
    const auto models = load_models(ev_models);
    const auto transformer = load_checkpoint_if(ev_checkpoint);
    std::vector<LocalizationMetrics> rows;
    for (const auto& name : ev_resamplers) {
      const auto kind = ResamplerKind::parse(name);
      std::vector<LocalizationMetrics> trials;
      for (std::size_t t = 0; t < ev_trials; ++t) {
        const auto seed = RngStream(ev_common.seed).split(t).next_u64();
        trials.push_back(evaluate(trajs, world, models, cfg.filter, kind, transformer ? &*transformer : nullptr, seed));
      }
      rows.push_back(aggregate_trials(trials));
    }
    const auto text = csv([&](std::ostream& os) { write_metrics_csv(os, rows); });
    if (ev_out.empty()) {
      out << text;
    } else {
      write_text(ev_out, text);
      write_resolved(config_beside(ev_out, false), "evaluate", ev_common.seed,
                     {{"trajectories", ev_trajs}, {"models", ev_models}, {"resamplers", ev_resamplers},
                      {"checkpoint", ev_checkpoint}, {"trials", ev_trials}},
                     cfg);
    }
  });

  // dump-particles
  std::string dump_file;
  std::uint64_t dump_index = 0;
  auto* dump = app.add_subcommand("dump-particles", "Print one particle set from a PSET1 file as CSV");
  dump->add_option("--file", dump_file, "PSET1 file")->required();
  dump->add_option("--index", dump_index, "Set index");
  on(dump, [&] { write_csv(out, read_pset_entry(dump_file, dump_index)); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }
  try {
    action();
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace rforge
