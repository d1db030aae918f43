#include "rforge/training.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "rforge/autodiff/checkpoint.hpp"
#include "rforge/autodiff/ops.hpp"
#include "rforge/format.hpp"
#include "rforge/json_util.hpp"

namespace rforge {

ResamplingDataset ResamplingDataset::load(const std::filesystem::path& inputs, const std::filesystem::path& targets) {
  ResamplingDataset d{read_pset(inputs), read_pset(targets)};
  if (d.inputs.size() != d.targets.size()) {
    throw std::invalid_argument(inputs.string() + " holds " + std::to_string(d.inputs.size()) + " sets but " +
                                targets.string() + " holds " + std::to_string(d.targets.size()));
  }
  return d;
}

void ResamplerTrainConfig::validate() const {
  if (batch_size == 0) throw std::invalid_argument("resampler training: batch size must be positive");
  if (!(adam.lr > 0.0)) throw std::invalid_argument("resampler training: learning rate must be positive");
  KdeConfig{bandwidth}.validate();
  if (clip_norm && !(*clip_norm > 0.0)) throw std::invalid_argument("resampler training: clip norm must be positive");
}

void to_json(nlohmann::json& j, const ResamplerTrainConfig& c) {
  j = nlohmann::json{{"lr", c.adam.lr},
                     {"beta1", c.adam.beta1},
                     {"beta2", c.adam.beta2},
                     {"eps", c.adam.eps},
                     {"batch_size", c.batch_size},
                     {"epochs", c.epochs},
                     {"bandwidth", c.bandwidth},
                     {"targets", c.targets ? c.targets->name() : "dataset"},
                     {"clip_norm", c.clip_norm ? nlohmann::json(*c.clip_norm) : nlohmann::json()},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ResamplerTrainConfig& c) {
  reject_unknown_keys(j, {"lr", "beta1", "beta2", "eps", "batch_size", "epochs", "bandwidth", "targets", "clip_norm", "seed"},
                      "resampler training config");
  c.adam.lr = j.value("lr", c.adam.lr);
  c.adam.beta1 = j.value("beta1", c.adam.beta1);
  c.adam.beta2 = j.value("beta2", c.adam.beta2);
  c.adam.eps = j.value("eps", c.adam.eps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.bandwidth = j.value("bandwidth", c.bandwidth);
  if (j.contains("targets")) {
    const auto name = j.at("targets").get<std::string>();
    c.targets = name == "dataset" ? std::nullopt : std::optional(TargetStrategy::parse(name));
  }
  if (j.contains("clip_norm")) {
    c.clip_norm = j.at("clip_norm").is_null() ? std::nullopt : std::optional(j.at("clip_norm").get<double>());
  }
  c.seed = j.value("seed", c.seed);
}

namespace {

std::string opt_path(const std::filesystem::path& path) { return path.string() + ".opt"; }

std::vector<ParticleSet> resolve_targets(const ResamplingDataset& data, const std::optional<TargetStrategy>& strategy,
                                         std::uint64_t seed) {
  if (!strategy) return data.targets;
  const RngStream root = RngStream(seed).split(0x7461726765747321ULL);
  std::vector<ParticleSet> out;
  out.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    RngStream rng = root.split(i);
    out.push_back(build_targets(data.inputs[i], *strategy, rng));
  }
  return out;
}

double mean_loss(const TransformerParams& params, const std::vector<ParticleSet>& inputs,
                 const std::vector<ParticleSet>& targets, double bandwidth) {
  ad::NoGradGuard no_grad;
  double total = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto out = transformer_resample(TensorParticles::from_set(inputs[i]), params);
    total += resampling_loss(out, TensorParticles::from_set(targets[i]), {bandwidth}).item();
  }
  return total / static_cast<double>(inputs.size());
}

}  // namespace

void ResamplerTrainState::save(const std::filesystem::path& path) const {
  save_transformer(path, params);
  std::vector<ad::NamedTensor> opt;
  const auto named = params.named();
  for (std::size_t i = 0; i < adam.first.size(); ++i) {
    opt.emplace_back("first." + named[i].first, ad::Tensor(named[i].second.shape(), adam.first[i]));
    opt.emplace_back("second." + named[i].first, ad::Tensor(named[i].second.shape(), adam.second[i]));
  }
  opt.emplace_back("step", ad::Tensor::scalar(static_cast<double>(adam.step)));
  opt.emplace_back("epochs_done", ad::Tensor::scalar(static_cast<double>(epochs_done)));
  ad::save_checkpoint(opt_path(path), opt);
}

ResamplerTrainState ResamplerTrainState::load(const std::filesystem::path& path) {
  ResamplerTrainState s{load_transformer(path), {}, 0};
  if (!std::filesystem::exists(opt_path(path))) return s;
  const auto opt = ad::load_checkpoint(opt_path(path));
  auto find = [&](const std::string& name) -> const ad::Tensor& {
    for (const auto& [n, t] : opt) {
      if (n == name) return t;
    }
    throw std::runtime_error(opt_path(path) + ": missing tensor '" + name + "'");
  };
  for (const auto& [name, t] : s.params.named()) {
    s.adam.first.push_back(find("first." + name).to_vector());
    s.adam.second.push_back(find("second." + name).to_vector());
  }
  s.adam.step = static_cast<std::uint64_t>(find("step").item());
  s.epochs_done = static_cast<std::size_t>(find("epochs_done").item());
  return s;
}

double mean_resampling_loss(const TransformerParams& params, const ResamplingDataset& data, double bandwidth,
                            const std::optional<TargetStrategy>& targets, std::uint64_t seed) {
  if (data.size() == 0) throw std::invalid_argument("mean_resampling_loss: empty dataset");
  return mean_loss(params, data.inputs, resolve_targets(data, targets, seed), bandwidth);
}

std::vector<ResamplerEpoch> train_resampler(ResamplerTrainState& state, const ResamplingDataset& train,
                                            const ResamplingDataset& eval, const ResamplerTrainConfig& cfg,
                                            const std::function<void(const ResamplerEpoch&)>& on_epoch) {
  cfg.validate();
  if (train.size() == 0 || eval.size() == 0) throw std::invalid_argument("resampler training: empty dataset");
  const auto train_targets = resolve_targets(train, cfg.targets, cfg.seed);
  const auto eval_targets = resolve_targets(eval, cfg.targets, cfg.seed + 1);
  auto params = state.params.tensors();
  if (state.adam.first.empty()) state.adam = ad::AdamState::for_params(params);
  std::vector<ResamplerEpoch> log;
  auto report = [&](const ResamplerEpoch& e) {
    log.push_back(e);
    if (on_epoch) on_epoch(e);
  };
  if (state.epochs_done == 0) {
    report({0, mean_loss(state.params, train.inputs, train_targets, cfg.bandwidth),
            mean_loss(state.params, eval.inputs, eval_targets, cfg.bandwidth)});
  }
  state.params.set_requires_grad(true);
  const RngStream root(cfg.seed);
  const KdeConfig kde{cfg.bandwidth};
  for (std::size_t epoch = state.epochs_done + 1; epoch <= cfg.epochs; ++epoch) {
    RngStream shuffle = root.split(epoch);
    const auto order = shuffle.permutation(train.size());
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t len = std::min(cfg.batch_size, order.size() - start);
      ad::zero_grads(params);
      for (std::size_t k = start; k < start + len; ++k) {
        const std::size_t i = order[k];
        auto out = transformer_resample(TensorParticles::from_set(train.inputs[i]), state.params);
        auto loss = resampling_loss(out, TensorParticles::from_set(train_targets[i]), kde);
        const double value = loss.item();
        if (!std::isfinite(value)) {
          throw std::runtime_error("resampler training: non-finite loss at epoch " + std::to_string(epoch) +
                                   ", set " + std::to_string(i));
        }
        epoch_loss += value;
        ad::backward(loss * (1.0 / static_cast<double>(len)));
      }
      const double norm = cfg.clip_norm ? ad::clip_global_norm(params, *cfg.clip_norm) : ad::global_grad_norm(params);
      if (!std::isfinite(norm)) {
        throw std::runtime_error("resampler training: non-finite gradient at epoch " + std::to_string(epoch));
      }
      ad::adam_step(params, state.adam, cfg.adam);
    }
    ad::zero_grads(params);
    state.epochs_done = epoch;
    report({epoch, epoch_loss / static_cast<double>(train.size()),
            mean_loss(state.params, eval.inputs, eval_targets, cfg.bandwidth)});
  }
  return log;
}

}  // namespace rforge
