#include "rforge/dpf.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <ostream>
#include <stdexcept>

#include "rforge/autodiff/ops.hpp"
#include "rforge/format.hpp"
#include "rforge/json_util.hpp"
#include "rforge/parallel.hpp"
#include "rforge/transformer.hpp"

namespace rforge {

using ad::Tensor;

WorldSpec WorldSpec::generate(std::uint64_t seed, std::size_t count, double width, double height, double obs_noise) {
  WorldSpec w;
  w.width = width;
  w.height = height;
  w.obs_noise = obs_noise;
  w.seed = seed;
  RngStream rng(seed);
  for (std::size_t b = 0; b < count; ++b) {
    w.beacons.push_back({rng.uniform(0.5, width - 0.5), rng.uniform(0.5, height - 0.5)});
  }
  w.validate();
  return w;
}

void WorldSpec::validate() const {
  if (!(width > 1.0 && height > 1.0)) throw std::invalid_argument("world: arena must be larger than 1x1");
  if (beacons.size() < 3) throw std::invalid_argument("world: needs at least 3 beacons");
  for (const auto& b : beacons) {
    if (b[0] < 0.0 || b[0] > width || b[1] < 0.0 || b[1] > height) {
      throw std::invalid_argument("world: beacon (" + format_double(b[0]) + ", " + format_double(b[1]) +
                                  ") lies outside the arena");
    }
  }
  if (!(obs_noise >= 0.0)) throw std::invalid_argument("world: observation noise must be non-negative");
}

std::vector<double> WorldSpec::ranges(double x, double y) const {
  std::vector<double> r;
  r.reserve(beacons.size());
  for (const auto& b : beacons) r.push_back(std::hypot(x - b[0], y - b[1]));
  return r;
}

void to_json(nlohmann::json& j, const WorldSpec& w) {
  j = nlohmann::json{{"width", w.width},
                     {"height", w.height},
                     {"beacons", w.beacons},
                     {"obs_noise", w.obs_noise},
                     {"seed", w.seed}};
}

void from_json(const nlohmann::json& j, WorldSpec& w) {
  reject_unknown_keys(j, {"width", "height", "beacons", "obs_noise", "seed"}, "world");
  w.width = j.value("width", w.width);
  w.height = j.value("height", w.height);
  w.obs_noise = j.value("obs_noise", w.obs_noise);
  w.seed = j.value("seed", w.seed);
  if (j.contains("beacons")) w.beacons = j.at("beacons").get<std::vector<std::array<double, 2>>>();
  w.validate();
}

double wrap_angle(double a) {
  a = std::remainder(a, 2.0 * std::numbers::pi);
  return a <= -std::numbers::pi ? a + 2.0 * std::numbers::pi : a;
}

RobotState apply_action(const RobotState& s, const Action& a) {
  const double c = std::cos(s.theta), sn = std::sin(s.theta);
  return {s.x + a[0] * c - a[1] * sn, s.y + a[0] * sn + a[1] * c, wrap_angle(s.theta + a[2])};
}

Action action_between(const RobotState& from, const RobotState& to) {
  const double dx = to.x - from.x, dy = to.y - from.y;
  const double c = std::cos(from.theta), sn = std::sin(from.theta);
  return {dx * c + dy * sn, -dx * sn + dy * c, wrap_angle(to.theta - from.theta)};
}

void to_json(nlohmann::json& j, const Trajectory& t) {
  nlohmann::json states = nlohmann::json::array();
  for (const auto& s : t.states) states.push_back({s.x, s.y, s.theta});
  j = nlohmann::json{{"T", t.steps()}, {"states", states}, {"actions", t.actions}, {"observations", t.observations}};
}

void from_json(const nlohmann::json& j, Trajectory& t) {
  reject_unknown_keys(j, {"T", "states", "actions", "observations", "world_seed"}, "trajectory");
  t.states.clear();
  for (const auto& s : j.at("states")) t.states.push_back({s.at(0).get<double>(), s.at(1).get<double>(), s.at(2).get<double>()});
  t.actions = j.at("actions").get<std::vector<Action>>();
  t.observations = j.at("observations").get<std::vector<std::vector<double>>>();
  const auto T = j.at("T").get<std::size_t>();
  if (t.states.size() != T || t.actions.size() != T || t.observations.size() != T) {
    throw std::invalid_argument("trajectory: T = " + std::to_string(T) + " but arrays have lengths " +
                                std::to_string(t.states.size()) + ", " + std::to_string(t.actions.size()) + ", " +
                                std::to_string(t.observations.size()));
  }
  if (T < 2) throw std::invalid_argument("trajectory: needs at least 2 steps");
}

void SimConfig::validate() const {
  if (steps < 2) throw std::invalid_argument("simulation: trajectories need at least 2 steps");
  for (double s : odometry_noise) {
    if (!(s >= 0.0)) throw std::invalid_argument("simulation: odometry noise must be non-negative");
  }
  if (!(min_forward >= 0.0 && max_forward >= min_forward)) {
    throw std::invalid_argument("simulation: need 0 <= min_forward <= max_forward");
  }
}

void to_json(nlohmann::json& j, const SimConfig& c) {
  j = nlohmann::json{{"steps", c.steps},          {"odometry_noise", c.odometry_noise}, {"min_forward", c.min_forward},
                     {"max_forward", c.max_forward}, {"turn_std", c.turn_std},           {"wall_margin", c.wall_margin}};
}

void from_json(const nlohmann::json& j, SimConfig& c) {
  reject_unknown_keys(j, {"steps", "odometry_noise", "min_forward", "max_forward", "turn_std", "wall_margin"},
                      "simulation config");
  c.steps = j.value("steps", c.steps);
  c.odometry_noise = j.value("odometry_noise", c.odometry_noise);
  c.min_forward = j.value("min_forward", c.min_forward);
  c.max_forward = j.value("max_forward", c.max_forward);
  c.turn_std = j.value("turn_std", c.turn_std);
  c.wall_margin = j.value("wall_margin", c.wall_margin);
  c.validate();
}

namespace {

std::vector<double> noisy_ranges(const WorldSpec& world, const RobotState& s, RngStream& rng) {
  auto r = world.ranges(s.x, s.y);
  for (auto& v : r) v += world.obs_noise > 0.0 ? rng.normal(0.0, world.obs_noise) : 0.0;
  return r;
}

Trajectory simulate_one(const WorldSpec& world, const SimConfig& cfg, RngStream& rng) {
  const double m = cfg.wall_margin;
  Trajectory t;
  RobotState s{rng.uniform(m, world.width - m), rng.uniform(m, world.height - m),
               wrap_angle(rng.uniform(-std::numbers::pi, std::numbers::pi))};
  t.states.push_back(s);
  t.actions.push_back({0.0, 0.0, 0.0});
  t.observations.push_back(noisy_ranges(world, s, rng));
  for (std::size_t k = 1; k < cfg.steps; ++k) {
    Action a{rng.uniform(cfg.min_forward, cfg.max_forward), 0.0, rng.normal(0.0, cfg.turn_std)};
    const auto probe = apply_action(s, a);
    if (probe.x < m || probe.x > world.width - m || probe.y < m || probe.y > world.height - m) {
      const double to_centre = std::atan2(world.height / 2 - s.y, world.width / 2 - s.x);
      a = {cfg.min_forward, 0.0, wrap_angle(to_centre - s.theta)};
    }
    auto next = apply_action(s, a);
    next.x = std::clamp(next.x, 0.0, world.width);
    next.y = std::clamp(next.y, 0.0, world.height);
    Action odo = action_between(s, next);
    for (std::size_t c = 0; c < 3; ++c) {
      if (cfg.odometry_noise[c] > 0.0) odo[c] += rng.normal(0.0, cfg.odometry_noise[c]);
    }
    s = next;
    t.states.push_back(s);
    t.actions.push_back(odo);
    t.observations.push_back(noisy_ranges(world, s, rng));
  }
  return t;
}

std::uint64_t digest(std::span<const Tensor> tensors) {
  std::uint64_t h = 0x84222325CBF29CE4ULL;
  for (const auto& t : tensors) {
    for (double v : t.data()) h = mix64(h ^ std::bit_cast<std::uint64_t>(v));
  }
  return h;
}

}  // namespace

std::vector<Trajectory> simulate_trajectories(const WorldSpec& world, const SimConfig& cfg, std::size_t count,
                                              std::uint64_t seed) {
  world.validate();
  cfg.validate();
  const RngStream root(seed);
  std::vector<Trajectory> out(count);
  parallel_for(count, [&](std::size_t i) {
    RngStream rng = root.split(i);
    out[i] = simulate_one(world, cfg, rng);
  });
  return out;
}

void save_trajectories(const std::filesystem::path& dir, const WorldSpec& world, std::span<const Trajectory> trajs) {
  std::filesystem::create_directories(dir);
  auto write = [](const std::filesystem::path& p, const nlohmann::json& j) {
    std::ofstream os(p);
    if (!os) throw std::runtime_error(p.string() + ": cannot open for writing");
    os << j.dump() << '\n';
    if (!os) throw std::runtime_error(p.string() + ": write failed");
  };
  write(dir / "world.json", world);
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    nlohmann::json j = trajs[i];
    j["world_seed"] = world.seed;
    char name[32];
    std::snprintf(name, sizeof name, "traj_%05zu.json", i);
    write(dir / name, j);
  }
}

std::pair<WorldSpec, std::vector<Trajectory>> load_trajectories(const std::filesystem::path& dir) {
  auto read = [](const std::filesystem::path& p) {
    std::ifstream is(p);
    if (!is) throw std::runtime_error(p.string() + ": cannot open");
    try {
      return nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(p.string() + ": " + e.what());
    }
  };
  WorldSpec world;
  try {
    world = read(dir / "world.json").get<WorldSpec>();
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error((dir / "world.json").string() + ": " + e.what());
  }
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (name.starts_with("traj_") && name.ends_with(".json")) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error(dir.string() + ": no trajectory files");
  std::vector<Trajectory> trajs;
  for (const auto& f : files) {
    const auto j = read(f);
    try {
      if (j.value("world_seed", world.seed) != world.seed) throw std::invalid_argument("world seed mismatch");
      trajs.push_back(j.get<Trajectory>());
      for (const auto& o : trajs.back().observations) {
        if (o.size() != world.beacons.size()) throw std::invalid_argument("observation size differs from beacon count");
      }
    } catch (const std::exception& e) {
      throw std::runtime_error(f.string() + ": " + e.what());
    }
  }
  return {std::move(world), std::move(trajs)};
}

FilterModels FilterModels::init(std::size_t beacons, std::size_t hidden, RngStream& rng, double range_scale) {
  auto gaussian = [&](std::size_t in, std::size_t out) {
    std::vector<double> v(in * out);
    for (auto& x : v) x = rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(in)));
    return Tensor({in, out}, std::move(v));
  };
  FilterModels m;
  m.beacons = beacons;
  m.hidden = hidden;
  m.range_scale = range_scale;
  m.log_scales = Tensor::full({3}, std::log(0.1));
  m.w1 = gaussian(3 * beacons, hidden);
  m.b1 = Tensor::zeros({hidden});
  m.w2 = gaussian(hidden, hidden);
  m.b2 = Tensor::zeros({hidden});
  m.w3 = gaussian(hidden, 1);
  m.b3 = Tensor::zeros({1});
  return m;
}

std::vector<ad::NamedTensor> FilterModels::named() const {
  return {{"motion.log_scales", log_scales}, {"measurement.w1", w1}, {"measurement.b1", b1},
          {"measurement.w2", w2},            {"measurement.b2", b2}, {"measurement.w3", w3},
          {"measurement.b3", b3}};
}

FilterModels FilterModels::clone() const {
  FilterModels c = *this;
  for (Tensor* t : {&c.log_scales, &c.w1, &c.b1, &c.w2, &c.b2, &c.w3, &c.b3}) *t = t->clone(t->requires_grad());
  return c;
}

std::uint64_t FilterModels::motion_checksum() const { return digest(motion_params()); }
std::uint64_t FilterModels::measurement_checksum() const { return digest(measurement_params()); }

Tensor FilterModels::measurement_logits(const Tensor& observation, const Tensor& predicted) const {
  const std::size_t m = predicted.dim(0), B = predicted.dim(1);
  const bool shared = observation.rank() == 1 && observation.numel() == B;
  if (B != beacons || !(shared || observation.shape() == predicted.shape())) {
    throw std::invalid_argument("measurement model: built for " + std::to_string(beacons) + " beacons, got " +
                                "observation " + ad::to_string(observation.shape()) + " and predictions " +
                                ad::to_string(predicted.shape()));
  }
  auto obs = shared ? ad::broadcast_to(ad::reshape(observation, {1, B}), {m, B}) : observation;
  // The difference channel is scaled up so range errors of a few tenths are
  // not swamped by the absolute ranges.
  const std::vector<Tensor> parts{obs / range_scale, predicted / range_scale, (obs - predicted) * 2.0};
  auto h = ad::relu(ad::matmul(ad::concat(parts, 1), w1) + b1);
  h = ad::relu(ad::matmul(h, w2) + b2);
  return ad::reshape(ad::matmul(h, w3) + b3, {m});
}

void save_models(const std::filesystem::path& path, const FilterModels& models) {
  ad::save_checkpoint(path, models.named());
  std::ofstream os(path.string() + ".json");
  if (!os) throw std::runtime_error(path.string() + ".json: cannot open for writing");
  os << nlohmann::json{{"model", "filter_models"},
                       {"beacons", models.beacons},
                       {"hidden", models.hidden},
                       {"range_scale", models.range_scale}}
            .dump(2)
     << '\n';
}

FilterModels load_models(const std::filesystem::path& path) {
  const std::string sidecar = path.string() + ".json";
  std::ifstream is(sidecar);
  if (!is) throw std::runtime_error(sidecar + ": cannot open model config sidecar");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
    reject_unknown_keys(j, {"model", "beacons", "hidden", "range_scale"}, sidecar);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(sidecar + ": " + e.what());
  }
  RngStream rng(0);
  auto m = FilterModels::init(j.at("beacons").get<std::size_t>(), j.at("hidden").get<std::size_t>(), rng,
                              j.value("range_scale", 10.0));
  ad::assign_from(ad::load_checkpoint(path), m.named());
  return m;
}

std::vector<double> embed_state(const RobotState& s) { return {s.x, s.y, std::cos(s.theta), std::sin(s.theta)}; }

Tensor predicted_ranges(const Tensor& particles, const WorldSpec& world) {
  const std::size_t n = particles.dim(0), B = world.beacons.size();
  std::vector<double> flat;
  for (const auto& b : world.beacons) flat.insert(flat.end(), b.begin(), b.end());
  const Tensor beacons({1, B, 2}, std::move(flat));
  auto xy = ad::reshape(ad::slice(particles, 1, 0, 2), {n, 1, 2});
  auto diff = xy - beacons;
  // The offset keeps sqrt differentiable for a particle sitting on a beacon.
  return ad::sqrt(ad::sum(diff * diff, 2) + 1e-12);
}

Tensor motion_update(const Tensor& particles, const Action& action, const Tensor& log_scales, const Tensor& noise) {
  const std::size_t n = particles.dim(0);
  if (noise.shape() != ad::Shape{n, 3}) {
    throw std::invalid_argument("motion_update: noise " + ad::to_string(noise.shape()) + " for " + std::to_string(n) +
                                " particles");
  }
  auto a = noise * ad::reshape(ad::exp(log_scales), {1, 3}) + Tensor({1, 3}, {action[0], action[1], action[2]});
  auto f = ad::slice(a, 1, 0, 1), l = ad::slice(a, 1, 1, 1), dth = ad::slice(a, 1, 2, 1);
  auto x = ad::slice(particles, 1, 0, 1), y = ad::slice(particles, 1, 1, 1);
  auto c = ad::slice(particles, 1, 2, 1), s = ad::slice(particles, 1, 3, 1);
  auto cd = ad::cos(dth), sd = ad::sin(dth);
  const std::vector<Tensor> cols{x + f * c - l * s, y + f * s + l * c, c * cd - s * sd, s * cd + c * sd};
  return ad::concat(cols, 1);
}

TensorParticles measurement_update(const TensorParticles& set, std::span<const double> observation,
                                   const FilterModels& models, const WorldSpec& world) {
  const Tensor obs = Tensor::vector({observation.begin(), observation.end()});
  return reweight(set, models.measurement_logits(obs, predicted_ranges(set.positions, world)));
}

TensorParticles reweight(const TensorParticles& set, const Tensor& logits) {
  const std::size_t n = set.size();
  if (logits.numel() != n) {
    throw std::invalid_argument("reweight: " + std::to_string(logits.numel()) + " logits for " + std::to_string(n) +
                                " particles");
  }
  auto w = ad::reshape(ad::weighted_softmax(ad::reshape(logits, {1, n}), set.weights), {n});
  double total = 0.0;
  for (double v : w.data()) total += v;
  if (!(total > 0.0) || !std::isfinite(total)) throw std::domain_error("measurement update: posterior weights degenerate");
  return {set.positions, w};
}

void FilterConfig::validate() const {
  if (particles == 0) throw std::invalid_argument("filter: particle count must be positive");
  if (!(prior_pos_std >= 0.0 && prior_heading_std >= 0.0)) throw std::invalid_argument("filter: negative prior std");
  if (!(error_threshold > 0.0)) throw std::invalid_argument("filter: error threshold must be positive");
  KdeConfig{loss_bandwidth}.validate();
}

void to_json(nlohmann::json& j, const FilterConfig& c) {
  j = nlohmann::json{{"particles", c.particles},
                     {"prior_pos_std", c.prior_pos_std},
                     {"prior_heading_std", c.prior_heading_std},
                     {"error_threshold", c.error_threshold},
                     {"loss_bandwidth", c.loss_bandwidth}};
}

void from_json(const nlohmann::json& j, FilterConfig& c) {
  reject_unknown_keys(j, {"particles", "prior_pos_std", "prior_heading_std", "error_threshold", "loss_bandwidth"},
                      "filter config");
  c.particles = j.value("particles", c.particles);
  c.prior_pos_std = j.value("prior_pos_std", c.prior_pos_std);
  c.prior_heading_std = j.value("prior_heading_std", c.prior_heading_std);
  c.error_threshold = j.value("error_threshold", c.error_threshold);
  c.loss_bandwidth = j.value("loss_bandwidth", c.loss_bandwidth);
  c.validate();
}

StepEstimate estimate_state(const TensorParticles& set) {
  const auto p = set.positions.data();
  const auto w = set.weights.data();
  double x = 0, y = 0, c = 0, s = 0, sq = 0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    x += w[i] * p[i * 4];
    y += w[i] * p[i * 4 + 1];
    c += w[i] * p[i * 4 + 2];
    s += w[i] * p[i * 4 + 3];
    sq += w[i] * w[i];
  }
  return {{x, y, std::atan2(s, c)}, 1.0 / sq};
}

namespace {

Tensor truth_nll(const TensorParticles& set, const RobotState& truth, double bandwidth) {
  return -kde_log_density(set, Tensor({1, 4}, embed_state(truth)), {bandwidth});
}

// Transformer outputs are free in (cos, sin); project back to the circle.
Tensor unit_heading(const Tensor& particles) {
  auto xy = ad::slice(particles, 1, 0, 2);
  auto cs = ad::slice(particles, 1, 2, 2);
  auto norm = ad::sqrt(ad::sum(cs * cs, 1, true) + 1e-12);
  const std::vector<Tensor> cols{xy, cs / norm};
  return ad::concat(cols, 1);
}

}  // namespace

FilterRun run_filter(const Trajectory& traj, const WorldSpec& world, const FilterModels& models,
                     const FilterConfig& cfg, const ResamplerKind& resampler, const TransformerParams* transformer,
                     const RngStream& rng, const FilterOptions& options) {
  cfg.validate();
  const std::size_t n = cfg.particles, T = traj.steps();
  if (T < 2) throw std::invalid_argument("run_filter: trajectory needs at least 2 steps");
  if (resampler.tag == ResamplerKind::Tag::transformer && transformer == nullptr) {
    throw std::invalid_argument("transformer resampler selected without loaded parameters");
  }
  FilterRun run;

  RngStream prior = rng.split(0, 0);
  std::vector<double> init;
  init.reserve(n * 4);
  for (std::size_t i = 0; i < n; ++i) {
    RobotState s{traj.states[0].x + prior.normal(0.0, cfg.prior_pos_std),
                 traj.states[0].y + prior.normal(0.0, cfg.prior_pos_std),
                 traj.states[0].theta + prior.normal(0.0, cfg.prior_heading_std)};
    const auto e = embed_state(s);
    init.insert(init.end(), e.begin(), e.end());
  }
  TensorParticles set{Tensor({n, 4}, std::move(init)), Tensor::full({n}, 1.0 / static_cast<double>(n))};

  for (std::size_t step = 0; step < T; ++step) {
    try {
      if (step > 0) {
        RngStream motion = rng.split(step, 0);
        std::vector<double> eps(n * 3);
        for (auto& v : eps) v = motion.normal();
        set.positions = motion_update(set.positions, traj.actions[step], models.log_scales, Tensor({n, 3}, eps));
      }
      set = measurement_update(set, traj.observations[step], models, world);
      run.steps.push_back(estimate_state(set));
      if (step + 1 == T) {
        auto xy = ad::slice(set.positions, 1, 0, 2);
        run.final_position = ad::reshape(ad::sum(xy * ad::reshape(set.weights, {n, 1}), 0), {2});
      }
      Tensor step_loss;
      if (options.build_loss) step_loss = truth_nll(set, traj.states[step], cfg.loss_bandwidth);
      if (step == 0) {
        if (options.build_loss) run.step_losses.push_back(step_loss);
        continue;
      }
      RngStream draw = rng.split(step, 1);
      auto post = resample(resampler, set, draw, transformer);
      if (resampler.tag == ResamplerKind::Tag::transformer) post.positions = unit_heading(post.positions);
      if (options.keep_sets) {
        run.pre_resample.push_back(set.detached().to_set());
        run.post_resample.push_back(post.detached().to_set());
      }
      if (options.build_loss) {
        run.step_losses.push_back(resampler.tag == ResamplerKind::Tag::none
                                      ? step_loss
                                      : (step_loss + truth_nll(post, traj.states[step], cfg.loss_bandwidth)) * 0.5);
      }
      // Steps are numbered from 1 for the stop rule.
      if (options.stop_every > 0 && (step + 1) % options.stop_every == 0) post = post.detached();
      set = post;
    } catch (const std::domain_error& e) {
      throw std::domain_error("step " + std::to_string(step + 1) + ": " + e.what());
    }
  }
  if (options.build_loss) {
    Tensor total = run.step_losses.front();
    for (std::size_t i = 1; i < run.step_losses.size(); ++i) total = total + run.step_losses[i];
    run.loss = total * (1.0 / static_cast<double>(run.step_losses.size()));
  }
  return run;
}

std::vector<double> final_errors(std::span<const Trajectory> trajs, const WorldSpec& world, const FilterModels& models,
                                 const FilterConfig& cfg, const ResamplerKind& resampler,
                                 const TransformerParams* transformer, std::uint64_t seed) {
  const RngStream root(seed);
  std::vector<double> errors(trajs.size());
  parallel_for(trajs.size(), [&](std::size_t i) {
    ad::NoGradGuard no_grad;
    const auto run = run_filter(trajs[i], world, models, cfg, resampler, transformer, root.split(i));
    const auto& est = run.steps.back().estimate;
    const auto& truth = trajs[i].states.back();
    errors[i] = std::hypot(est.x - truth.x, est.y - truth.y);
  });
  return errors;
}

LocalizationMetrics metrics_from_errors(std::string resampler, std::span<const double> errors, double threshold) {
  const double N = static_cast<double>(errors.size());
  if (errors.empty()) throw std::invalid_argument("metrics: no trajectories");
  std::vector<double> miss, sq;
  for (double e : errors) {
    miss.push_back(e > threshold ? 1.0 : 0.0);
    sq.push_back(e * e);
  }
  auto mean_se = [&](const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= N;
    double var = 0.0;
    for (double x : v) var += (x - m) * (x - m);
    return std::pair{m, errors.size() > 1 ? std::sqrt(var / (N - 1.0) / N) : 0.0};
  };
  const auto [rate, rate_se] = mean_se(miss);
  const auto [mse, mse_se] = mean_se(sq);
  return {std::move(resampler), rate, rate_se, mse, mse_se, errors.size()};
}

LocalizationMetrics evaluate(std::span<const Trajectory> trajs, const WorldSpec& world, const FilterModels& models,
                             const FilterConfig& cfg, const ResamplerKind& resampler,
                             const TransformerParams* transformer, std::uint64_t seed) {
  const auto errors = final_errors(trajs, world, models, cfg, resampler, transformer, seed);
  return metrics_from_errors(resampler.name(), errors, cfg.error_threshold);
}

LocalizationMetrics aggregate_trials(std::span<const LocalizationMetrics> trials) {
  if (trials.empty()) throw std::invalid_argument("aggregate_trials: no trials");
  const double K = static_cast<double>(trials.size());
  LocalizationMetrics out;
  out.resampler = trials.front().resampler;
  for (const auto& t : trials) {
    out.error_rate += t.error_rate;
    out.mse += t.mse;
    out.trajectories += t.trajectories;
  }
  out.error_rate /= K;
  out.mse /= K;
  if (trials.size() > 1) {
    double vr = 0.0, vm = 0.0;
    for (const auto& t : trials) {
      vr += std::pow(t.error_rate - out.error_rate, 2);
      vm += std::pow(t.mse - out.mse, 2);
    }
    out.error_rate_stderr = std::sqrt(vr / (K - 1.0) / K);
    out.mse_stderr = std::sqrt(vm / (K - 1.0) / K);
  } else {
    out.error_rate_stderr = trials.front().error_rate_stderr;
    out.mse_stderr = trials.front().mse_stderr;
  }
  return out;
}

void write_metrics_csv(std::ostream& os, std::span<const LocalizationMetrics> rows) {
  os << "resampler,error_rate,error_rate_stderr,mse,mse_stderr,trajectories\n";
  for (const auto& r : rows) {
    os << r.resampler << ',' << format_double(r.error_rate) << ',' << format_double(r.error_rate_stderr) << ','
       << format_double(r.mse) << ',' << format_double(r.mse_stderr) << ',' << r.trajectories << '\n';
  }
}

}  // namespace rforge
