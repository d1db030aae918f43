#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include <json.hpp>

#include "rforge/autodiff/checkpoint.hpp"
#include "rforge/autodiff/tensor.hpp"
#include "rforge/particles.hpp"
#include "rforge/rng.hpp"

namespace rforge {

// Hyperparameters of the particle transformer. The model is bound to a fixed
// particle count (one seed vector per output particle).
struct TransformerConfig {
  std::size_t particles = 32;
  std::size_t dim = 5;
  std::size_t latent = 256;
  std::size_t heads = 8;
  std::size_t ff_hidden = 256;
  std::size_t encoder_blocks = 2;
  std::size_t decoder_blocks = 2;
  // Post-norm residual wrapping of every attention and feed-forward sublayer.
  bool residual_norm = true;
  double norm_eps = 1e-5;

  void validate() const;
  std::size_t head_dim() const { return latent / heads; }
};

void to_json(nlohmann::json& j, const TransformerConfig& c);
void from_json(const nlohmann::json& j, TransformerConfig& c);

struct AttentionParams {
  ad::Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct NormParams {
  ad::Tensor gain, bias;
};

struct FeedForwardParams {
  ad::Tensor w1, b1, w2, b2;
};

struct EncoderBlock {
  AttentionParams self_attention;
  NormParams norm1;
  FeedForwardParams feed_forward;
  NormParams norm2;
};

struct DecoderBlock {
  AttentionParams self_attention;
  NormParams norm1;
  AttentionParams cross_attention;
  NormParams norm2;
  FeedForwardParams feed_forward;
  NormParams norm3;
};

struct TransformerParams {
  TransformerConfig config;
  ad::Tensor input_w, input_b;
  std::vector<EncoderBlock> encoder;
  ad::Tensor seeds;
  std::vector<DecoderBlock> decoder;
  ad::Tensor output_w, output_b;

  // Seeds ~ N(0, 0.02^2); projections ~ N(0, 1/fan_in); biases 0; norm gains 1.
  static TransformerParams init(const TransformerConfig& config, RngStream& rng);

  std::vector<ad::NamedTensor> named() const;
  std::vector<ad::Tensor> tensors() const;
  void set_requires_grad(bool value);
  TransformerParams clone() const;
  // Same structure with its tensors replaced, in named() order.
  TransformerParams rebind(std::span<const ad::Tensor> replacements) const;
  // Order-sensitive digest of every parameter value.
  std::uint64_t checksum() const;
};

// Writes `path` (PTCHK1) and `path` + ".json" holding the hyperparameters.
void save_transformer(const std::filesystem::path& path, const TransformerParams& params);
TransformerParams load_transformer(const std::filesystem::path& path);

// sum_i w_i exp(q.k_i / sqrt(d_k)) v_i / sum_j w_j exp(q.k_j / sqrt(d_k)) for
// q [d_k], keys [m, d_k], values [m, d_v], weights [m].
ad::Tensor weighted_attention(const ad::Tensor& query, const ad::Tensor& keys, const ad::Tensor& values,
                              const ad::Tensor& weights);

// Multi-head attention of `queries` [n_q, L] over `source` [m, L]. With
// `weights` undefined every key counts equally.
ad::Tensor weighted_multihead_attention(const ad::Tensor& queries, const ad::Tensor& source,
                                        const ad::Tensor& weights, const AttentionParams& params,
                                        std::size_t heads);

// Per-dimension minima and maxima of a particle set.
struct ScaleContext {
  ad::Tensor minima;  // [1, d]
  ad::Tensor maxima;  // [1, d]
};

// Maps each dimension affinely so its minimum lands on -1 and maximum on +1.
// A constant dimension maps to 0.
std::pair<ad::Tensor, ScaleContext> scale_to_unit(const ad::Tensor& positions);
ad::Tensor rescale_from_unit(const ad::Tensor& normalized, const ScaleContext& ctx);

// n weighted particles in, n uniformly weighted particles out.
TensorParticles transformer_resample(const TensorParticles& set, const TransformerParams& params);
ParticleSet transformer_resample(const ParticleSet& set, const TransformerParams& params);

}  // namespace rforge
