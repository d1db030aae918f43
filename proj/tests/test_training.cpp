#include <doctest.h>

#include <filesystem>

#include "rforge/benchmark.hpp"
#include "rforge/training.hpp"

using namespace rforge;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "rforge_test_training" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

ResamplingDataset make_dataset(std::uint64_t seed, std::size_t count, std::size_t n) {
  RngStream rng(seed);
  BenchmarkConfig cfg;
  cfg.particles = n;
  cfg.dim = 2;
  ResamplingDataset d;
  for (std::size_t i = 0; i < count; ++i) {
    auto c = generate_case(rng, cfg);
    d.inputs.push_back(c.input);
    d.targets.push_back(c.target);
  }
  return d;
}

TransformerParams small_model(std::size_t n, std::uint64_t seed) {
  TransformerConfig cfg;
  cfg.particles = n;
  cfg.dim = 2;
  cfg.latent = 16;
  cfg.heads = 2;
  cfg.ff_hidden = 16;
  cfg.encoder_blocks = 1;
  cfg.decoder_blocks = 1;
  RngStream rng(seed);
  return TransformerParams::init(cfg, rng);
}

ResamplerTrainConfig small_config() {
  ResamplerTrainConfig cfg;
  cfg.batch_size = 8;
  cfg.epochs = 4;
  cfg.bandwidth = 1.0;
  cfg.adam.lr = 3e-3;
  cfg.seed = 5;
  return cfg;
}

}  // namespace

TEST_CASE("training lowers the eval loss below the untrained model") {
  auto train = make_dataset(1, 64, 8), eval = make_dataset(2, 32, 8);
  ResamplerTrainState state{small_model(8, 3), {}, 0};
  std::vector<std::size_t> seen;
  auto log = train_resampler(state, train, eval, small_config(), [&](const ResamplerEpoch& e) { seen.push_back(e.epoch); });
  REQUIRE(log.size() == 5);
  CHECK(seen == std::vector<std::size_t>{0, 1, 2, 3, 4});
  CHECK(log.back().eval_loss < log.front().eval_loss);
  CHECK(state.epochs_done == 4);
  CHECK(mean_resampling_loss(state.params, eval, 1.0, std::nullopt, 0) == doctest::Approx(log.back().eval_loss));
}

TEST_CASE("resuming from a checkpoint matches an uninterrupted run") {
  auto train = make_dataset(4, 32, 8), eval = make_dataset(5, 8, 8);
  auto cfg = small_config();
  cfg.epochs = 2;
  ResamplerTrainState straight{small_model(8, 6), {}, 0};
  auto full = train_resampler(straight, train, eval, cfg);

  cfg.epochs = 1;
  ResamplerTrainState first{small_model(8, 6), {}, 0};
  train_resampler(first, train, eval, cfg);
  auto path = temp_dir("resume") / "model.ptchk";
  first.save(path);
  auto resumed = ResamplerTrainState::load(path);
  CHECK(resumed.epochs_done == 1);
  cfg.epochs = 2;
  auto rest = train_resampler(resumed, train, eval, cfg);
  REQUIRE(rest.size() == 1);
  CHECK(rest.front().epoch == 2);
  CHECK(rest.front().train_loss == full.back().train_loss);
  CHECK(rest.front().eval_loss == full.back().eval_loss);
  CHECK(resumed.params.checksum() == straight.params.checksum());
}

TEST_CASE("strategy targets and dataset targets give different objectives") {
  auto data = make_dataset(7, 6, 8);
  auto model = small_model(8, 8);
  const double own = mean_resampling_loss(model, data, 1.0, std::nullopt, 0);
  const double ident = mean_resampling_loss(model, data, 1.0, TargetStrategy::parse("identity"), 0);
  CHECK(own != ident);
  CHECK(mean_resampling_loss(model, data, 1.0, TargetStrategy::parse("multinomial"), 3) ==
        mean_resampling_loss(model, data, 1.0, TargetStrategy::parse("multinomial"), 3));
}

TEST_CASE("training config JSON round trip and validation") {
  auto cfg = small_config();
  cfg.targets = TargetStrategy::parse("systematic");
  cfg.clip_norm = 10.0;
  auto back = nlohmann::json(cfg).get<ResamplerTrainConfig>();
  CHECK(back.batch_size == 8);
  CHECK(back.targets->name() == "systematic");
  CHECK(*back.clip_norm == 10.0);
  CHECK_THROWS_WITH(nlohmann::json::parse(R"({"learning_rate": 1})").get<ResamplerTrainConfig>(),
                    doctest::Contains("learning_rate"));
  cfg.batch_size = 0;
  CHECK_THROWS(cfg.validate());
}

TEST_CASE("mismatched dataset files are rejected") {
  auto dir = temp_dir("mismatch");
  auto d = make_dataset(9, 3, 8);
  write_pset(dir / "in.pset", d.inputs);
  d.targets.pop_back();
  write_pset(dir / "tg.pset", d.targets);
  CHECK_THROWS_WITH(ResamplingDataset::load(dir / "in.pset", dir / "tg.pset"), doctest::Contains("holds 2"));
}
