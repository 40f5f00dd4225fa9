#pragma once

#include <cstddef>
#include <random>

#include "xda/tensor.hpp"

namespace xda {

// Projection weights of one multi-head attention module.
struct AttentionWeights {
  Tensor w_q;  // [d x C_attn]
  Tensor w_k;  // [d x C_attn]
  Tensor w_v;  // [d x C_attn]
  Tensor w_o;  // [C_attn x d]
  std::size_t heads = 1;

  std::size_t model_dim() const { return w_q.dim(0); }
  std::size_t attn_dim() const { return w_q.dim(1); }
  std::size_t head_dim() const { return attn_dim() / heads; }
  // Throws DimensionError on inconsistent shapes and NumericError on
  // non-finite entries.
  void validate() const;
};

// Row-stochastic scores of shape [heads x N_q x N_k].
struct AttentionMap {
  Tensor scores;
  std::size_t layer = 0;

  std::size_t heads() const { return scores.dim(0); }
  std::size_t queries() const { return scores.dim(1); }
  std::size_t keys() const { return scores.dim(2); }
};

struct AttentionResult {
  Tensor output;  // [N_q x d]
  AttentionMap map;
};

// Smoothed-noise perturbation settings for the random-attention baseline.
// Noise is sampled on a noise_h x noise_w grid, bilinearly upsampled to the
// key grid and turned into a distribution per query row.
struct NoiseSpec {
  std::size_t grid_h = 1;
  std::size_t grid_w = 1;
  std::size_t noise_h = 1;
  std::size_t noise_w = 1;
  Real stddev = 1.0;
};

// Optional hook applied to the score matrix before it multiplies the values.
struct AttentionPerturbation {
  NoiseSpec noise;
  std::mt19937_64* rng = nullptr;
};

AttentionResult self_attention(const Tensor& x, const AttentionWeights& w,
                               const AttentionPerturbation* perturb = nullptr);

// Queries come from `x_query`, keys and values from `x_kv`. With
// `stop_query_grad` the projected queries are detached, so neither `x_query`
// nor the query projection receives gradient.
AttentionResult cross_domain_attention(const Tensor& x_query, const Tensor& x_kv,
                                       const AttentionWeights& w, bool stop_query_grad,
                                       const AttentionPerturbation* perturb = nullptr);

// Constant [heads x n_q x grid_h*grid_w] tensor of softmaxed smoothed noise.
Tensor smoothed_noise_scores(std::size_t heads, std::size_t n_q, const NoiseSpec& spec,
                             std::mt19937_64& rng);

// (map + noise_map) / 2 with noise_map from smoothed_noise_scores.
AttentionMap random_perturbed_attention(const AttentionMap& map, const NoiseSpec& spec,
                                        std::mt19937_64& rng);

// Context broadcasting: y'_j = (y_j + mean_k y_k) / 2.
Tensor uniform_broadcast(const Tensor& y);

}  // namespace xda
