#include "rforge/transformer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>

#include "rforge/autodiff/ops.hpp"
#include "rforge/json_util.hpp"

namespace rforge {

using ad::Tensor;

void TransformerConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("transformer config: " + what); };
  if (particles == 0) fail("particle count must be positive");
  if (dim == 0) fail("dimension must be positive");
  if (latent == 0 || heads == 0) fail("latent size and head count must be positive");
  if (latent % heads != 0) {
    fail("latent size " + std::to_string(latent) + " is not divisible by " + std::to_string(heads) + " heads");
  }
  if (ff_hidden == 0) fail("feed-forward width must be positive");
  if (!(norm_eps > 0.0)) fail("norm epsilon must be positive");
}

void to_json(nlohmann::json& j, const TransformerConfig& c) {
  j = nlohmann::json{{"particles", c.particles},
                     {"dim", c.dim},
                     {"latent", c.latent},
                     {"heads", c.heads},
                     {"ff_hidden", c.ff_hidden},
                     {"encoder_blocks", c.encoder_blocks},
                     {"decoder_blocks", c.decoder_blocks},
                     {"residual_norm", c.residual_norm},
                     {"norm_eps", c.norm_eps}};
}

void from_json(const nlohmann::json& j, TransformerConfig& c) {
  reject_unknown_keys(j,
                      {"particles", "dim", "latent", "heads", "ff_hidden", "encoder_blocks", "decoder_blocks",
                       "residual_norm", "norm_eps"},
                      "transformer config");
  c.particles = j.value("particles", c.particles);
  c.dim = j.value("dim", c.dim);
  c.latent = j.value("latent", c.latent);
  c.heads = j.value("heads", c.heads);
  c.ff_hidden = j.value("ff_hidden", c.ff_hidden);
  c.encoder_blocks = j.value("encoder_blocks", c.encoder_blocks);
  c.decoder_blocks = j.value("decoder_blocks", c.decoder_blocks);
  c.residual_norm = j.value("residual_norm", c.residual_norm);
  c.norm_eps = j.value("norm_eps", c.norm_eps);
}

namespace {

Tensor gaussian(RngStream& rng, ad::Shape shape, double stddev) {
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return Tensor(std::move(shape), std::move(v));
}

Tensor projection(RngStream& rng, std::size_t in, std::size_t out) {
  return gaussian(rng, {in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
}

AttentionParams init_attention(RngStream& rng, std::size_t latent) {
  AttentionParams a;
  a.wq = projection(rng, latent, latent);
  a.bq = Tensor::zeros({latent});
  a.wk = projection(rng, latent, latent);
  a.bk = Tensor::zeros({latent});
  a.wv = projection(rng, latent, latent);
  a.bv = Tensor::zeros({latent});
  a.wo = projection(rng, latent, latent);
  a.bo = Tensor::zeros({latent});
  return a;
}

NormParams init_norm(std::size_t latent) { return {Tensor::full({latent}, 1.0), Tensor::zeros({latent})}; }

FeedForwardParams init_feed_forward(RngStream& rng, std::size_t latent, std::size_t hidden) {
  return {projection(rng, latent, hidden), Tensor::zeros({hidden}), projection(rng, hidden, latent),
          Tensor::zeros({latent})};
}

void push_attention(std::vector<ad::NamedTensor>& out, const std::string& p, const AttentionParams& a) {
  out.emplace_back(p + ".wq", a.wq);
  out.emplace_back(p + ".bq", a.bq);
  out.emplace_back(p + ".wk", a.wk);
  out.emplace_back(p + ".bk", a.bk);
  out.emplace_back(p + ".wv", a.wv);
  out.emplace_back(p + ".bv", a.bv);
  out.emplace_back(p + ".wo", a.wo);
  out.emplace_back(p + ".bo", a.bo);
}

void push_norm(std::vector<ad::NamedTensor>& out, const std::string& p, const NormParams& n) {
  out.emplace_back(p + ".gain", n.gain);
  out.emplace_back(p + ".bias", n.bias);
}

void push_feed_forward(std::vector<ad::NamedTensor>& out, const std::string& p, const FeedForwardParams& f) {
  out.emplace_back(p + ".w1", f.w1);
  out.emplace_back(p + ".b1", f.b1);
  out.emplace_back(p + ".w2", f.w2);
  out.emplace_back(p + ".b2", f.b2);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return ad::matmul(x, w) + b; }

Tensor feed_forward(const Tensor& x, const FeedForwardParams& f) {
  return linear(ad::relu(linear(x, f.w1, f.b1)), f.w2, f.b2);
}

Tensor sublayer(const Tensor& x, const Tensor& update, const NormParams& norm, const TransformerConfig& c) {
  if (!c.residual_norm) return update;
  return ad::layer_norm(x + update, norm.gain, norm.bias, c.norm_eps);
}

// Sort key: lexicographic position, then weight. Any permutation of the input
// yields the same processing order, so the output is bit-for-bit invariant.
std::vector<std::size_t> canonical_order(const TensorParticles& set) {
  const std::size_t n = set.size(), d = set.dim();
  const auto pos = set.positions.data();
  const auto w = set.weights.data();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    for (std::size_t k = 0; k < d; ++k) {
      if (pos[a * d + k] != pos[b * d + k]) return pos[a * d + k] < pos[b * d + k];
    }
    return w[a] < w[b];
  });
  return order;
}

}  // namespace

TransformerParams TransformerParams::init(const TransformerConfig& config, RngStream& rng) {
  config.validate();
  const std::size_t L = config.latent;
  TransformerParams p;
  p.config = config;
  p.input_w = projection(rng, config.dim, L);
  p.input_b = Tensor::zeros({L});
  for (std::size_t b = 0; b < config.encoder_blocks; ++b) {
    EncoderBlock e;
    e.self_attention = init_attention(rng, L);
    e.norm1 = init_norm(L);
    e.feed_forward = init_feed_forward(rng, L, config.ff_hidden);
    e.norm2 = init_norm(L);
    p.encoder.push_back(std::move(e));
  }
  p.seeds = gaussian(rng, {config.particles, L}, 0.02);
  for (std::size_t b = 0; b < config.decoder_blocks; ++b) {
    DecoderBlock dblk;
    dblk.self_attention = init_attention(rng, L);
    dblk.norm1 = init_norm(L);
    dblk.cross_attention = init_attention(rng, L);
    dblk.norm2 = init_norm(L);
    dblk.feed_forward = init_feed_forward(rng, L, config.ff_hidden);
    dblk.norm3 = init_norm(L);
    p.decoder.push_back(std::move(dblk));
  }
  p.output_w = projection(rng, L, config.dim);
  p.output_b = Tensor::zeros({config.dim});
  return p;
}

std::vector<ad::NamedTensor> TransformerParams::named() const {
  std::vector<ad::NamedTensor> out;
  out.emplace_back("input.w", input_w);
  out.emplace_back("input.b", input_b);
  for (std::size_t b = 0; b < encoder.size(); ++b) {
    const std::string p = "encoder." + std::to_string(b);
    push_attention(out, p + ".self_attention", encoder[b].self_attention);
    push_norm(out, p + ".norm1", encoder[b].norm1);
    push_feed_forward(out, p + ".feed_forward", encoder[b].feed_forward);
    push_norm(out, p + ".norm2", encoder[b].norm2);
  }
  out.emplace_back("decoder.seeds", seeds);
  for (std::size_t b = 0; b < decoder.size(); ++b) {
    const std::string p = "decoder." + std::to_string(b);
    push_attention(out, p + ".self_attention", decoder[b].self_attention);
    push_norm(out, p + ".norm1", decoder[b].norm1);
    push_attention(out, p + ".cross_attention", decoder[b].cross_attention);
    push_norm(out, p + ".norm2", decoder[b].norm2);
    push_feed_forward(out, p + ".feed_forward", decoder[b].feed_forward);
    push_norm(out, p + ".norm3", decoder[b].norm3);
  }
  out.emplace_back("output.w", output_w);
  out.emplace_back("output.b", output_b);
  return out;
}

std::vector<Tensor> TransformerParams::tensors() const {
  std::vector<Tensor> out;
  for (auto& [_, t] : named()) out.push_back(t);
  return out;
}

void TransformerParams::set_requires_grad(bool value) {
  for (auto& t : tensors()) t.set_requires_grad(value);
}

TransformerParams TransformerParams::clone() const {
  RngStream rng(0);
  TransformerParams copy = init(config, rng);
  ad::assign_from(named(), copy.named());
  return copy;
}

TransformerParams TransformerParams::rebind(std::span<const Tensor> replacements) const {
  const std::size_t expected = named().size();
  if (replacements.size() != expected) {
    throw std::invalid_argument("transformer rebind: expected " + std::to_string(expected) + " tensors, got " +
                                std::to_string(replacements.size()));
  }
  TransformerParams p = *this;
  std::size_t idx = 0;
  auto take = [&](Tensor& t) {
    if (replacements[idx].shape() != t.shape()) {
      throw std::invalid_argument("transformer rebind: tensor " + std::to_string(idx) + " has shape " +
                                  ad::to_string(replacements[idx].shape()) + ", expected " + ad::to_string(t.shape()));
    }
    t = replacements[idx++];
  };
  auto take_att = [&](AttentionParams& a) {
    for (Tensor* t : {&a.wq, &a.bq, &a.wk, &a.bk, &a.wv, &a.bv, &a.wo, &a.bo}) take(*t);
  };
  auto take_norm = [&](NormParams& n) {
    take(n.gain);
    take(n.bias);
  };
  auto take_ff = [&](FeedForwardParams& f) {
    for (Tensor* t : {&f.w1, &f.b1, &f.w2, &f.b2}) take(*t);
  };
  take(p.input_w);
  take(p.input_b);
  for (auto& e : p.encoder) {
    take_att(e.self_attention);
    take_norm(e.norm1);
    take_ff(e.feed_forward);
    take_norm(e.norm2);
  }
  take(p.seeds);
  for (auto& d : p.decoder) {
    take_att(d.self_attention);
    take_norm(d.norm1);
    take_att(d.cross_attention);
    take_norm(d.norm2);
    take_ff(d.feed_forward);
    take_norm(d.norm3);
  }
  take(p.output_w);
  take(p.output_b);
  return p;
}

std::uint64_t TransformerParams::checksum() const {
  std::uint64_t h = 0x84222325CBF29CE4ULL;
  for (const auto& t : tensors()) {
    for (double v : t.data()) h = mix64(h ^ std::bit_cast<std::uint64_t>(v));
  }
  return h;
}

void save_transformer(const std::filesystem::path& path, const TransformerParams& params) {
  ad::save_checkpoint(path, params.named());
  std::ofstream os(path.string() + ".json");
  if (!os) throw std::runtime_error(path.string() + ".json: cannot open for writing");
  os << nlohmann::json{{"model", "particle_transformer"}, {"config", params.config}}.dump(2) << '\n';
}

TransformerParams load_transformer(const std::filesystem::path& path) {
  const std::string sidecar = path.string() + ".json";
  std::ifstream is(sidecar);
  if (!is) throw std::runtime_error(sidecar + ": cannot open model config sidecar");
  TransformerConfig config;
  try {
    const auto j = nlohmann::json::parse(is);
    config = j.at("config").get<TransformerConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(sidecar + ": " + e.what());
  }
  RngStream rng(0);
  TransformerParams params = TransformerParams::init(config, rng);
  ad::assign_from(ad::load_checkpoint(path), params.named());
  return params;
}

Tensor weighted_attention(const Tensor& query, const Tensor& keys, const Tensor& values, const Tensor& weights) {
  if (query.rank() != 1 || keys.rank() != 2 || values.rank() != 2 || keys.dim(1) != query.dim(0) ||
      values.dim(0) != keys.dim(0)) {
    throw std::invalid_argument("weighted_attention: shapes query " + ad::to_string(query.shape()) + ", keys " +
                                ad::to_string(keys.shape()) + ", values " + ad::to_string(values.shape()));
  }
  const std::size_t dk = query.dim(0);
  auto scores = ad::matmul(ad::reshape(query, {1, dk}), ad::transpose(keys)) / std::sqrt(static_cast<double>(dk));
  auto attn = ad::weighted_softmax(scores, weights);
  return ad::reshape(ad::matmul(attn, values), {values.dim(1)});
}

Tensor weighted_multihead_attention(const Tensor& queries, const Tensor& source, const Tensor& weights,
                                    const AttentionParams& params, std::size_t heads) {
  if (queries.rank() != 2 || source.rank() != 2 || queries.dim(1) != source.dim(1)) {
    throw std::invalid_argument("weighted_multihead_attention: shapes " + ad::to_string(queries.shape()) + " and " +
                                ad::to_string(source.shape()));
  }
  const std::size_t L = queries.dim(1);
  if (heads == 0 || L % heads != 0) {
    throw std::invalid_argument("weighted_multihead_attention: width " + std::to_string(L) +
                                " not divisible by " + std::to_string(heads) + " heads");
  }
  if (weights.defined() && (weights.rank() != 1 || weights.dim(0) != source.dim(0))) {
    throw std::invalid_argument("weighted_multihead_attention: weights " + ad::to_string(weights.shape()) +
                                " do not match source " + ad::to_string(source.shape()));
  }
  const std::size_t dk = L / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  auto q = linear(queries, params.wq, params.bq);
  auto k = linear(source, params.wk, params.bk);
  auto v = linear(source, params.wv, params.bv);
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    auto qh = heads == 1 ? q : ad::slice(q, 1, h * dk, dk);
    auto kh = heads == 1 ? k : ad::slice(k, 1, h * dk, dk);
    auto vh = heads == 1 ? v : ad::slice(v, 1, h * dk, dk);
    auto scores = ad::matmul(qh, ad::transpose(kh)) * scale;
    auto attn = weights.defined() ? ad::weighted_softmax(scores, weights) : ad::softmax(scores, 1);
    outs.push_back(ad::matmul(attn, vh));
  }
  auto joined = heads == 1 ? outs[0] : ad::concat(outs, 1);
  return linear(joined, params.wo, params.bo);
}

std::pair<Tensor, ScaleContext> scale_to_unit(const Tensor& positions) {
  if (positions.rank() != 2) {
    throw std::invalid_argument("scale_to_unit: expected [n, d] positions, got " + ad::to_string(positions.shape()));
  }
  const std::size_t d = positions.dim(1);
  ScaleContext ctx{ad::min(positions, 0, true), ad::max(positions, 0, true)};
  auto half = (ctx.maxima - ctx.minima) * 0.5;
  auto mid = (ctx.maxima + ctx.minima) * 0.5;
  std::vector<double> keep(d);
  for (std::size_t k = 0; k < d; ++k) keep[k] = half.at(k) > 0.0 ? 1.0 : 0.0;
  const Tensor mask({1, d}, keep);
  auto denom = half * mask + (1.0 - mask);
  return {(positions - mid) / denom * mask, ctx};
}

Tensor rescale_from_unit(const Tensor& normalized, const ScaleContext& ctx) {
  auto half = (ctx.maxima - ctx.minima) * 0.5;
  auto mid = (ctx.maxima + ctx.minima) * 0.5;
  return normalized * half + mid;
}

TensorParticles transformer_resample(const TensorParticles& set, const TransformerParams& params) {
  const auto& c = params.config;
  if (set.size() != c.particles || set.dim() != c.dim) {
    throw std::invalid_argument("transformer_resample: model expects " + std::to_string(c.particles) + "x" +
                                std::to_string(c.dim) + " particles, got " + std::to_string(set.size()) + "x" +
                                std::to_string(set.dim()));
  }
  const auto order = canonical_order(set);
  auto positions = ad::gather_rows(set.positions, order);
  auto weights = ad::gather_rows(set.weights, order);

  auto [unit, ctx] = scale_to_unit(positions);
  auto x = linear(unit, params.input_w, params.input_b);
  for (const auto& blk : params.encoder) {
    x = sublayer(x, weighted_multihead_attention(x, x, weights, blk.self_attention, c.heads), blk.norm1, c);
    x = sublayer(x, feed_forward(x, blk.feed_forward), blk.norm2, c);
  }
  auto z = params.seeds;
  for (const auto& blk : params.decoder) {
    z = sublayer(z, weighted_multihead_attention(z, z, Tensor(), blk.self_attention, c.heads), blk.norm1, c);
    z = sublayer(z, weighted_multihead_attention(z, x, weights, blk.cross_attention, c.heads), blk.norm2, c);
    z = sublayer(z, feed_forward(z, blk.feed_forward), blk.norm3, c);
  }
  auto out = rescale_from_unit(linear(z, params.output_w, params.output_b), ctx);
  return {out, Tensor::full({c.particles}, 1.0 / static_cast<double>(c.particles))};
}

ParticleSet transformer_resample(const ParticleSet& set, const TransformerParams& params) {
  ad::NoGradGuard no_grad;
  return transformer_resample(TensorParticles::from_set(set), params).to_set();
}

}  // namespace rforge
