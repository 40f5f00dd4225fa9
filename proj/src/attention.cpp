#include "xda/attention.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "xda/errors.hpp"

namespace xda {

void AttentionWeights::validate() const {
  if (heads == 0) throw DimensionError("attention: zero heads");
  if (w_q.rank() != 2 || w_k.shape() != w_q.shape() || w_v.shape() != w_q.shape()) {
    throw DimensionError("attention: Q/K/V projections disagree: " + shape_str(w_q.shape()) + ", " +
                         shape_str(w_k.shape()) + ", " + shape_str(w_v.shape()));
  }
  if (w_o.rank() != 2 || w_o.dim(0) != attn_dim() || w_o.dim(1) != model_dim()) {
    throw DimensionError("attention: output projection " + shape_str(w_o.shape()) +
                         " does not match " + shape_str(w_q.shape()));
  }
  if (attn_dim() % heads != 0) {
    throw DimensionError("attention: width " + std::to_string(attn_dim()) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  for (const Tensor* t : {&w_q, &w_k, &w_v, &w_o}) {
    for (Real v : t->data()) {
      if (!std::isfinite(v)) throw NumericError("attention: non-finite weight");
    }
  }
}

namespace {

void check_tokens(const Tensor& x, const AttentionWeights& w, const char* what) {
  if (x.rank() != 2 || x.dim(0) == 0 || x.dim(1) != w.model_dim()) {
    throw DimensionError(std::string("attention: ") + what + " tokens " + shape_str(x.shape()) +
                         " do not match model width " + std::to_string(w.model_dim()));
  }
}

AttentionResult attend(const Tensor& q_in, const Tensor& kv_in, const AttentionWeights& w,
                       const AttentionPerturbation* perturb, bool stop_query = false) {
  // Stopping at the projected queries also keeps W_q out of the graph.
  const Tensor q = stop_query ? stop_gradient(matmul(q_in, w.w_q)) : matmul(q_in, w.w_q);
  const Tensor k = matmul(kv_in, w.w_k);
  const Tensor v = matmul(kv_in, w.w_v);
  const std::size_t dh = w.head_dim();
  const Real inv_sqrt = 1.0 / std::sqrt(static_cast<Real>(dh));

  Tensor noise;
  if (perturb != nullptr) {
    noise = smoothed_noise_scores(w.heads, q_in.dim(0), perturb->noise, *perturb->rng);
  }
  const std::size_t n_q = q_in.dim(0), n_k = kv_in.dim(0);
  std::vector<Tensor> maps, outs;
  for (std::size_t h = 0; h < w.heads; ++h) {
    const Tensor qh = slice_cols(q, h * dh, dh);
    const Tensor kh = slice_cols(k, h * dh, dh);
    const Tensor vh = slice_cols(v, h * dh, dh);
    Tensor scores = softmax_rows(matmul(qh, transpose(kh)), inv_sqrt);
    if (noise.defined()) {
      std::vector<Real> slab(noise.data().begin() + h * n_q * n_k,
                             noise.data().begin() + (h + 1) * n_q * n_k);
      scores = scale(add(scores, Tensor::constant({n_q, n_k}, std::move(slab))), 0.5);
    }
    outs.push_back(matmul(scores, vh));
    maps.push_back(scores);
  }
  AttentionResult result;
  result.output = matmul(concat_cols(outs), w.w_o);
  result.map.scores = stack(maps);
  return result;
}

}  // namespace

AttentionResult self_attention(const Tensor& x, const AttentionWeights& w,
                               const AttentionPerturbation* perturb) {
  check_tokens(x, w, "input");
  return attend(x, x, w, perturb);
}

AttentionResult cross_domain_attention(const Tensor& x_query, const Tensor& x_kv,
                                       const AttentionWeights& w, bool stop_query_grad,
                                       const AttentionPerturbation* perturb) {
  check_tokens(x_query, w, "query");
  check_tokens(x_kv, w, "key/value");
  // Unequal token counts would break the row alignment of mixed maps.
  if (x_query.dim(0) != x_kv.dim(0)) {
    throw DimensionError("cross_domain_attention: query stream has " + std::to_string(x_query.dim(0)) +
                         " tokens, key/value stream has " + std::to_string(x_kv.dim(0)));
  }
  return attend(x_query, x_kv, w, perturb, stop_query_grad);
}

Tensor smoothed_noise_scores(std::size_t heads, std::size_t n_q, const NoiseSpec& spec,
                             std::mt19937_64& rng) {
  if (spec.noise_h == 0 || spec.noise_w == 0 || spec.grid_h % spec.noise_h != 0 ||
      spec.grid_w % spec.noise_w != 0) {
    throw DimensionError("smoothed noise: resolution " + std::to_string(spec.noise_h) + "x" +
                         std::to_string(spec.noise_w) + " does not divide key grid " +
                         std::to_string(spec.grid_h) + "x" + std::to_string(spec.grid_w));
  }
  std::normal_distribution<Real> normal(0.0, 1.0);
  const std::size_t n_k = spec.grid_h * spec.grid_w;
  const std::size_t coarse = spec.noise_h * spec.noise_w;
  std::vector<Real> out;
  out.reserve(heads * n_q * n_k);
  std::vector<Real> field(coarse);
  for (std::size_t r = 0; r < heads * n_q; ++r) {
    for (auto& f : field) f = spec.stddev * normal(rng);
    const Tensor fine = bilinear_resize(Tensor::constant({spec.noise_h, spec.noise_w, 1}, field),
                                        spec.grid_h, spec.grid_w);
    const Tensor row = softmax_rows(reshape(fine, {1, n_k}));
    out.insert(out.end(), row.data().begin(), row.data().end());
  }
  return Tensor::constant({heads, n_q, n_k}, std::move(out));
}

AttentionMap random_perturbed_attention(const AttentionMap& map, const NoiseSpec& spec,
                                        std::mt19937_64& rng) {
  if (map.keys() != spec.grid_h * spec.grid_w) {
    throw DimensionError("random_perturbed_attention: map has " + std::to_string(map.keys()) +
                         " keys, grid is " + std::to_string(spec.grid_h) + "x" +
                         std::to_string(spec.grid_w));
  }
  const Tensor noise = smoothed_noise_scores(map.heads(), map.queries(), spec, rng);
  return {scale(add(map.scores, noise), 0.5), map.layer};
}

Tensor uniform_broadcast(const Tensor& y) {
  return scale(add_rowvec(y, mean_rows(y)), 0.5);
}

}  // namespace xda
