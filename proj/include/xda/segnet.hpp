#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "xda/attention.hpp"
#include "xda/tensor.hpp"

namespace xda {

struct ModelConfig {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t patch = 4;
  std::size_t embed = 32;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t classes = 4;
  std::size_t mlp_ratio = 4;

  std::size_t grid_h() const { return height / patch; }
  std::size_t grid_w() const { return width / patch; }
  std::size_t tokens() const { return grid_h() * grid_w(); }
  // Throws ContractError describing the first violated constraint.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Training-time attention perturbations used by the regularization baselines.
enum class PerturbationMode { none, random, uniform };

struct ForwardOptions {
  PerturbationMode perturbation = PerturbationMode::none;
  // Coarse noise grid for PerturbationMode::random; must divide the token grid.
  std::size_t noise_h = 2;
  std::size_t noise_w = 2;
  std::mt19937_64* rng = nullptr;
};

struct ForwardResult {
  Tensor logits;                    // [H x W x C]
  std::vector<AttentionMap> maps;   // one per block
  std::vector<Tensor> features;     // normalized block inputs fed to attention, [N x d]
};

using NamedTensor = std::pair<std::string, Tensor>;

// Pre-norm transformer encoder over non-overlapping patches followed by a
// per-token linear classifier and bilinear upsampling.
class SegModel {
 public:
  SegModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  ForwardResult forward(const Tensor& image, const ForwardOptions& options = {}) const;

  // Cross-domain forward F'(query_image, kv_image): block i attends with
  // queries from the query stream's block-i features and keys/values from
  // the kv stream, which also carries the residual path and is decoded.
  ForwardResult forward_cross(const ForwardResult& query_stream, const Tensor& kv_image,
                              bool stop_query_grad, const ForwardOptions& options = {}) const;
  ForwardResult forward_cross(const Tensor& query_image, const Tensor& kv_image,
                              bool stop_query_grad) const;

  // Stable ordering; the tensors are handles into this model's storage.
  std::vector<NamedTensor> named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;
  // Names under "decoder." belong to the classifier; everything else is encoder.
  static bool is_decoder_parameter(const std::string& name);

  // Copies values (not handles) from `params`, matched by position; throws
  // DimensionError on count, name or shape mismatch.
  void load_parameters(const std::vector<NamedTensor>& params);
  // Deep copy whose parameters require gradients iff `trainable`.
  SegModel clone(bool trainable) const;
  void zero_grad();

 private:
  struct Block {
    Tensor ln1_g, ln1_b;
    AttentionWeights attn;
    Tensor ln2_g, ln2_b;
    Tensor fc1_w, fc1_b, fc2_w, fc2_b;
  };

  Tensor embed(const Tensor& image) const;
  Tensor mlp(const Block& b, const Tensor& x) const;
  Tensor decode(const Tensor& tokens) const;
  void check_image(const Tensor& image) const;
  AttentionPerturbation* perturbation_for(const ForwardOptions& options,
                                          AttentionPerturbation& storage) const;

  ModelConfig config_;
  Tensor patch_w_, patch_b_, pos_;
  std::vector<Block> blocks_;
  Tensor norm_g_, norm_b_, head_w_, head_b_;
  std::vector<std::size_t> patch_index_;
};

// Truncated normal (|x| <= 2 sigma) initializer.
std::vector<Real> truncated_normal(std::size_t n, Real sigma, std::mt19937_64& rng);

}  // namespace xda
