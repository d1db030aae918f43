#include "rforge/dpf_training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "rforge/autodiff/ops.hpp"
#include "rforge/format.hpp"
#include "rforge/json_util.hpp"
#include "rforge/parallel.hpp"

namespace rforge {

using ad::Tensor;

void IndividualTrainConfig::validate() const {
  if (!(adam.lr > 0.0)) throw std::invalid_argument("individual training: learning rate must be positive");
  if (hidden == 0 || batch_size == 0 || samples_per_observation == 0) {
    throw std::invalid_argument("individual training: hidden, batch_size and samples_per_observation must be positive");
  }
  if (perturbation_stds.empty()) throw std::invalid_argument("individual training: no perturbation stds");
  for (double s : perturbation_stds) {
    if (!(s > 0.0)) throw std::invalid_argument("individual training: perturbation stds must be positive");
  }
  if (!(logit_floor < 0.0)) throw std::invalid_argument("individual training: logit floor must be negative");
}

void to_json(nlohmann::json& j, const IndividualTrainConfig& c) {
  j = nlohmann::json{{"lr", c.adam.lr},
                     {"beta1", c.adam.beta1},
                     {"beta2", c.adam.beta2},
                     {"eps", c.adam.eps},
                     {"hidden", c.hidden},
                     {"batch_size", c.batch_size},
                     {"epochs", c.epochs},
                     {"samples_per_observation", c.samples_per_observation},
                     {"perturbation_stds", c.perturbation_stds},
                     {"logit_floor", c.logit_floor},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, IndividualTrainConfig& c) {
  reject_unknown_keys(j,
                      {"lr", "beta1", "beta2", "eps", "hidden", "batch_size", "epochs", "samples_per_observation",
                       "perturbation_stds", "logit_floor", "seed"},
                      "individual training config");
  c.adam.lr = j.value("lr", c.adam.lr);
  c.adam.beta1 = j.value("beta1", c.adam.beta1);
  c.adam.beta2 = j.value("beta2", c.adam.beta2);
  c.adam.eps = j.value("eps", c.adam.eps);
  c.hidden = j.value("hidden", c.hidden);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.samples_per_observation = j.value("samples_per_observation", c.samples_per_observation);
  c.perturbation_stds = j.value("perturbation_stds", c.perturbation_stds);
  c.logit_floor = j.value("logit_floor", c.logit_floor);
  c.seed = j.value("seed", c.seed);
  c.validate();
}

Action fit_motion_noise(std::span<const Trajectory> trajs) {
  Action sq{0.0, 0.0, 0.0};
  std::size_t count = 0;
  for (const auto& t : trajs) {
    for (std::size_t s = 1; s < t.steps(); ++s) {
      const auto truth = action_between(t.states[s - 1], t.states[s]);
      for (std::size_t c = 0; c < 3; ++c) {
        const double r = c == 2 ? wrap_angle(t.actions[s][c] - truth[c]) : t.actions[s][c] - truth[c];
        sq[c] += r * r;
      }
      ++count;
    }
  }
  if (count == 0) throw std::invalid_argument("fit_motion_noise: no motion steps");
  Action scales;
  for (std::size_t c = 0; c < 3; ++c) {
    // A floor keeps log scales finite for noise-free data.
    scales[c] = std::max(std::sqrt(sq[c] / static_cast<double>(count)), 1e-6);
  }
  return scales;
}

IndividualResult train_models_individually(std::span<const Trajectory> trajs, const WorldSpec& world,
                                           const IndividualTrainConfig& cfg,
                                           const std::function<void(std::size_t, double)>& on_epoch) {
  cfg.validate();
  world.validate();
  if (trajs.empty()) throw std::invalid_argument("individual training: no trajectories");
  const RngStream root(cfg.seed);
  RngStream init_rng = root.split(0);
  auto models = FilterModels::init(world.beacons.size(), cfg.hidden, init_rng, std::max(world.width, world.height));
  const auto scales = fit_motion_noise(trajs);
  models.log_scales = Tensor({3}, {std::log(scales[0]), std::log(scales[1]), std::log(scales[2])});

  const std::size_t B = world.beacons.size();
  const double var = world.obs_noise * world.obs_noise;
  if (!(var > 0.0)) throw std::invalid_argument("individual training: observation noise must be positive");
  std::vector<double> obs, pred, target;
  RngStream draw = root.split(1);
  for (const auto& t : trajs) {
    for (std::size_t s = 0; s < t.steps(); ++s) {
      for (std::size_t k = 0; k < cfg.samples_per_observation; ++k) {
        double x = t.states[s].x, y = t.states[s].y;
        if (k > 0) {
          const double sd = cfg.perturbation_stds[draw.uniform_index(cfg.perturbation_stds.size())];
          x += draw.normal(0.0, sd);
          y += draw.normal(0.0, sd);
        }
        const auto r = world.ranges(x, y);
        double ll = 0.0;
        for (std::size_t b = 0; b < B; ++b) ll -= std::pow(t.observations[s][b] - r[b], 2) / (2.0 * var);
        obs.insert(obs.end(), t.observations[s].begin(), t.observations[s].end());
        pred.insert(pred.end(), r.begin(), r.end());
        target.push_back(std::max(ll, cfg.logit_floor));
      }
    }
  }

  auto params = models.measurement_params();
  for (auto& p : params) p.set_requires_grad(true);
  auto adam = ad::AdamState::for_params(params);
  const std::size_t N = target.size();
  IndividualResult result;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    RngStream shuffle = root.split(2, epoch);
    const auto order = shuffle.permutation(N);
    double total = 0.0;
    for (std::size_t start = 0; start < N; start += cfg.batch_size) {
      const std::size_t m = std::min(cfg.batch_size, N - start);
      std::vector<double> o(m * B), p(m * B), y(m);
      for (std::size_t r = 0; r < m; ++r) {
        const std::size_t i = order[start + r];
        std::copy_n(obs.begin() + i * B, B, o.begin() + r * B);
        std::copy_n(pred.begin() + i * B, B, p.begin() + r * B);
        y[r] = target[i];
      }
      ad::zero_grads(params);
      auto diff = models.measurement_logits(Tensor({m, B}, o), Tensor({m, B}, p)) - Tensor({m}, y);
      auto loss = ad::mean(diff * diff);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw std::runtime_error("individual training: non-finite measurement loss at epoch " + std::to_string(epoch) +
                                 ", batch " + std::to_string(start / cfg.batch_size + 1));
      }
      total += value * static_cast<double>(m);
      ad::backward(loss);
      ad::adam_step(params, adam, cfg.adam);
    }
    ad::zero_grads(params);
    result.measurement_losses.push_back(total / static_cast<double>(N));
    if (on_epoch) on_epoch(epoch, result.measurement_losses.back());
  }
  for (auto& p : params) p.set_requires_grad(false);
  result.models = std::move(models);
  return result;
}

ResamplerData collect_resampler_data(std::span<const Trajectory> trajs, const WorldSpec& world,
                                     const FilterModels& models, const FilterConfig& cfg, const ResamplerKind& baseline,
                                     std::uint64_t seed) {
  if (baseline.tag == ResamplerKind::Tag::transformer || baseline.tag == ResamplerKind::Tag::none) {
    throw std::invalid_argument("collect_resampler_data: baseline must be a classic resampler, got " + baseline.name());
  }
  const RngStream root(seed);
  std::vector<std::optional<FilterRun>> runs(trajs.size());
  std::vector<std::string> errors(trajs.size());
  parallel_for(trajs.size(), [&](std::size_t i) {
    ad::NoGradGuard no_grad;
    try {
      runs[i] = run_filter(trajs[i], world, models, cfg, baseline, nullptr, root.split(i), {.keep_sets = true});
    } catch (const std::domain_error& e) {
      errors[i] = e.what();
    }
  });
  ResamplerData data;
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    if (!runs[i]) {
      data.skipped.emplace_back(i, errors[i]);
      continue;
    }
    for (std::size_t e = 0; e < runs[i]->pre_resample.size(); ++e) {
      data.inputs.push_back(std::move(runs[i]->pre_resample[e]));
      data.targets.push_back(std::move(runs[i]->post_resample[e]));
      data.index.push_back({i, e + 2});
    }
  }
  return data;
}

void write_resampler_data(const std::filesystem::path& dir, const ResamplerData& data) {
  std::filesystem::create_directories(dir);
  write_pset(dir / "inputs.pset", data.inputs);
  write_pset(dir / "targets.pset", data.targets);
  std::ofstream os(dir / "index.csv");
  if (!os) throw std::runtime_error((dir / "index.csv").string() + ": cannot open for writing");
  os << "set,trajectory,step\n";
  for (std::size_t s = 0; s < data.index.size(); ++s) {
    os << s << ',' << data.index[s].trajectory << ',' << data.index[s].step << '\n';
  }
}

std::string component_name(Component c) {
  switch (c) {
    case Component::motion: return "motion";
    case Component::measurement: return "measurement";
    case Component::resampler: return "resampler";
  }
  return "unknown";
}

bool FreezeFlags::frozen(Component c) const {
  switch (c) {
    case Component::motion: return motion;
    case Component::measurement: return measurement;
    case Component::resampler: return resampler;
  }
  return false;
}

FreezeFlags FreezeFlags::parse(std::span<const std::string> names) {
  FreezeFlags f;
  for (const auto& n : names) {
    if (n == "motion") {
      f.motion = true;
    } else if (n == "measurement") {
      f.measurement = true;
    } else if (n == "resampler") {
      f.resampler = true;
    } else if (n != "none" && !n.empty()) {
      throw std::invalid_argument("unknown component '" + n + "' (expected motion, measurement or resampler)");
    }
  }
  return f;
}

std::string FreezeFlags::label() const {
  std::string out;
  for (auto c : {Component::motion, Component::measurement, Component::resampler}) {
    if (!frozen(c)) continue;
    if (!out.empty()) out += '+';
    out += component_name(c);
  }
  return out.empty() ? "none" : out;
}

void EndToEndConfig::validate() const {
  if (!(adam.lr > 0.0)) throw std::invalid_argument("end-to-end training: learning rate must be positive");
  if (batch_size == 0) throw std::invalid_argument("end-to-end training: batch size must be positive");
  if (stop_every == 0) throw std::invalid_argument("end-to-end training: gradient stop period k must be >= 1");
  if (clip_norm && !(*clip_norm > 0.0)) throw std::invalid_argument("end-to-end training: clip norm must be positive");
}

void to_json(nlohmann::json& j, const EndToEndConfig& c) {
  std::vector<std::string> frozen;
  for (auto comp : {Component::motion, Component::measurement, Component::resampler}) {
    if (c.freeze.frozen(comp)) frozen.push_back(component_name(comp));
  }
  j = nlohmann::json{{"lr", c.adam.lr},
                     {"beta1", c.adam.beta1},
                     {"beta2", c.adam.beta2},
                     {"eps", c.adam.eps},
                     {"batch_size", c.batch_size},
                     {"epochs", c.epochs},
                     {"k", c.stop_every},
                     {"clip_norm", c.clip_norm ? nlohmann::json(*c.clip_norm) : nlohmann::json()},
                     {"freeze", frozen},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, EndToEndConfig& c) {
  reject_unknown_keys(j, {"lr", "beta1", "beta2", "eps", "batch_size", "epochs", "k", "clip_norm", "freeze", "seed"},
                      "end-to-end training config");
  c.adam.lr = j.value("lr", c.adam.lr);
  c.adam.beta1 = j.value("beta1", c.adam.beta1);
  c.adam.beta2 = j.value("beta2", c.adam.beta2);
  c.adam.eps = j.value("eps", c.adam.eps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.stop_every = j.value("k", c.stop_every);
  if (j.contains("clip_norm")) {
    c.clip_norm = j.at("clip_norm").is_null() ? std::nullopt : std::optional(j.at("clip_norm").get<double>());
  }
  if (j.contains("freeze")) c.freeze = FreezeFlags::parse(j.at("freeze").get<std::vector<std::string>>());
  c.seed = j.value("seed", c.seed);
  c.validate();
}

void write_grad_norm_csv(std::ostream& os, std::span<const GradNormRecord> records) {
  os << "step,component,pre_clip_norm,k\n";
  for (const auto& r : records) {
    os << r.step << ',' << component_name(r.component) << ',' << format_double(r.pre_clip_norm) << ',' << r.k << '\n';
  }
}

EndToEndResult train_end_to_end(FilterModels& models, TransformerParams* transformer, std::span<const Trajectory> trajs,
                                const WorldSpec& world, const FilterConfig& filter, const ResamplerKind& resampler,
                                const EndToEndConfig& cfg, const std::function<void(std::size_t, double)>& on_epoch) {
  cfg.validate();
  filter.validate();
  if (trajs.empty()) throw std::invalid_argument("end-to-end training: no trajectories");
  const bool learned_resampler = resampler.tag == ResamplerKind::Tag::transformer;
  if (learned_resampler && transformer == nullptr) {
    throw std::invalid_argument("transformer resampler selected without loaded parameters");
  }

  struct Group {
    Component component;
    std::vector<Tensor> params;
    ad::AdamState adam;
  };
  std::vector<Group> groups;
  auto add_group = [&](Component c, std::vector<Tensor> params) {
    const bool train = !cfg.freeze.frozen(c);
    for (auto& p : params) p.set_requires_grad(train);
    if (train) groups.push_back({c, params, ad::AdamState::for_params(params)});
  };
  add_group(Component::motion, models.motion_params());
  add_group(Component::measurement, models.measurement_params());
  if (learned_resampler) add_group(Component::resampler, transformer->tensors());

  const RngStream root(cfg.seed);
  const FilterOptions options{.stop_every = cfg.stop_every, .build_loss = true};
  EndToEndResult result;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    RngStream shuffle = root.split(epoch, 0);
    const RngStream filter_rng = root.split(epoch, 1);
    const auto order = shuffle.permutation(trajs.size());
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t len = std::min(cfg.batch_size, order.size() - start);
      ++step;
      for (auto& g : groups) ad::zero_grads(g.params);
      for (std::size_t b = start; b < start + len; ++b) {
        const std::size_t i = order[b];
        auto run = run_filter(trajs[i], world, models, filter, resampler, transformer, filter_rng.split(i), options);
        const double value = run.loss.item();
        if (!std::isfinite(value)) {
          throw std::runtime_error("end-to-end training: non-finite loss at epoch " + std::to_string(epoch) +
                                   ", trajectory " + std::to_string(i));
        }
        epoch_loss += value;
        if (!groups.empty()) ad::backward(run.loss * (1.0 / static_cast<double>(len)));
      }
      for (auto& g : groups) {
        const double pre = cfg.clip_norm ? ad::clip_global_norm(g.params, *cfg.clip_norm) : ad::global_grad_norm(g.params);
        if (!std::isfinite(pre)) {
          throw std::runtime_error("end-to-end training: non-finite " + component_name(g.component) +
                                   " gradient at optimizer step " + std::to_string(step));
        }
        result.grad_norms.push_back({step, g.component, pre, ad::global_grad_norm(g.params), cfg.stop_every});
        ad::adam_step(g.params, g.adam, cfg.adam);
      }
    }
    for (auto& g : groups) ad::zero_grads(g.params);
    result.epoch_losses.push_back(epoch_loss / static_cast<double>(trajs.size()));
    if (on_epoch) on_epoch(epoch, result.epoch_losses.back());
  }
  for (auto& g : groups) {
    for (auto& p : g.params) p.set_requires_grad(false);
  }
  return result;
}

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median of an empty list");
  std::sort(values.begin(), values.end());
  const std::size_t mid = values.size() / 2;
  return values.size() % 2 ? values[mid] : 0.5 * (values[mid - 1] + values[mid]);
}

BpttSweepResult bptt_sweep(const FilterModels& models, const TransformerParams* transformer,
                           std::span<const Trajectory> train, std::span<const Trajectory> test, const WorldSpec& world,
                           const FilterConfig& filter, const ResamplerKind& resampler, const EndToEndConfig& base,
                           std::span<const BpttCell> cells, std::uint64_t eval_seed) {
  BpttSweepResult out;
  for (const auto& cell : cells) {
    BpttRow row{cell, std::nullopt, ""};
    try {
      auto m = models.clone();
      std::optional<TransformerParams> t;
      if (transformer) t = transformer->clone();
      EndToEndConfig cfg = base;
      cfg.stop_every = cell.k;
      cfg.freeze = cell.freeze;
      cfg.clip_norm = cell.clip_norm;
      auto trained = train_end_to_end(m, t ? &*t : nullptr, train, world, filter, resampler, cfg);
      row.metrics = evaluate(test, world, m, filter, resampler, t ? &*t : nullptr, eval_seed);
      for (auto c : {Component::motion, Component::measurement, Component::resampler}) {
        std::vector<double> norms;
        for (const auto& r : trained.grad_norms) {
          if (r.component == c) norms.push_back(r.pre_clip_norm);
        }
        if (!norms.empty()) out.medians.push_back({cell, c, median(norms), norms.size()});
      }
      out.grad_norms.insert(out.grad_norms.end(), trained.grad_norms.begin(), trained.grad_norms.end());
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    out.rows.push_back(std::move(row));
  }
  return out;
}

namespace {

std::string clip_label(const std::optional<double>& clip) { return clip ? format_double(*clip) : "none"; }

}  // namespace

void write_bptt_csv(std::ostream& os, std::span<const BpttRow> rows) {
  os << "k,freeze,clip_norm,error_rate,error_rate_stderr,mse,mse_stderr,status\n";
  for (const auto& r : rows) {
    os << r.cell.k << ',' << r.cell.freeze.label() << ',' << clip_label(r.cell.clip_norm) << ',';
    if (r.metrics) {
      os << format_double(r.metrics->error_rate) << ',' << format_double(r.metrics->error_rate_stderr) << ','
         << format_double(r.metrics->mse) << ',' << format_double(r.metrics->mse_stderr) << ",ok\n";
    } else {
      std::string msg = r.error;
      std::replace(msg.begin(), msg.end(), ',', ';');
      std::replace(msg.begin(), msg.end(), '\n', ' ');
      os << ",,,," << msg << '\n';
    }
  }
}

void write_median_norm_csv(std::ostream& os, std::span<const MedianNorm> medians) {
  os << "k,freeze,clip_norm,component,median_pre_clip_norm,count\n";
  for (const auto& m : medians) {
    os << m.cell.k << ',' << m.cell.freeze.label() << ',' << clip_label(m.cell.clip_norm) << ','
       << component_name(m.component) << ',' << format_double(m.median_pre_clip_norm) << ',' << m.count << '\n';
  }
}

}  // namespace rforge
