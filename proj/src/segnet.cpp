#include "xda/segnet.hpp"

#include <cmath>

#include "xda/errors.hpp"

namespace xda {

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ContractError("model config: " + what); };
  if (height == 0 || width == 0 || patch == 0 || embed == 0 || layers == 0 || heads == 0 ||
      classes == 0 || mlp_ratio == 0) {
    fail("all sizes must be positive");
  }
  if (height % patch != 0 || width % patch != 0) fail("input size must be divisible by the patch size");
  if (embed % heads != 0) fail("embedding width must be divisible by the head count");
}

std::vector<Real> truncated_normal(std::size_t n, Real sigma, std::mt19937_64& rng) {
  std::normal_distribution<Real> normal(0.0, 1.0);
  std::vector<Real> out(n);
  for (auto& v : out) {
    Real z;
    do {
      z = normal(rng);
    } while (std::abs(z) > 2.0);
    v = sigma * z;
  }
  return out;
}

SegModel::SegModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t p = config_.patch, d = config_.embed, n = config_.tokens();
  const std::size_t patch_dim = p * p * 3, hidden = d * config_.mlp_ratio;
  auto weight = [&](Shape s) { return Tensor::parameter(s, truncated_normal(numel(s), 0.02, rng)); };
  auto zeros = [](Shape s) { return Tensor::zeros(std::move(s), true); };
  auto ones = [](Shape s) { return Tensor::full(std::move(s), 1.0, true); };

  patch_w_ = weight({patch_dim, d});
  patch_b_ = zeros({d});
  pos_ = weight({n, d});
  for (std::size_t l = 0; l < config_.layers; ++l) {
    Block b;
    b.ln1_g = ones({d});
    b.ln1_b = zeros({d});
    b.attn = {weight({d, d}), weight({d, d}), weight({d, d}), weight({d, d}), config_.heads};
    b.ln2_g = ones({d});
    b.ln2_b = zeros({d});
    b.fc1_w = weight({d, hidden});
    b.fc1_b = zeros({hidden});
    b.fc2_w = weight({hidden, d});
    b.fc2_b = zeros({d});
    blocks_.push_back(std::move(b));
  }
  norm_g_ = ones({d});
  norm_b_ = zeros({d});
  head_w_ = weight({d, config_.classes});
  head_b_ = zeros({config_.classes});

  const std::size_t gw = config_.grid_w(), w = config_.width;
  patch_index_.reserve(n * patch_dim);
  for (std::size_t t = 0; t < n; ++t) {
    const std::size_t gy = t / gw, gx = t % gw;
    for (std::size_t py = 0; py < p; ++py)
      for (std::size_t px = 0; px < p; ++px)
        for (std::size_t ch = 0; ch < 3; ++ch)
          patch_index_.push_back(((gy * p + py) * w + gx * p + px) * 3 + ch);
  }
}

void SegModel::check_image(const Tensor& image) const {
  if (image.shape() != Shape{config_.height, config_.width, 3}) {
    throw DimensionError("segnet: image " + shape_str(image.shape()) + " does not match configured " +
                         shape_str({config_.height, config_.width, 3}));
  }
}

Tensor SegModel::embed(const Tensor& image) const {
  check_image(image);
  const std::size_t n = config_.tokens(), patch_dim = config_.patch * config_.patch * 3;
  const Tensor patches = gather(image, patch_index_, {n, patch_dim});
  return add(add_rowvec(matmul(patches, patch_w_), patch_b_), pos_);
}

Tensor SegModel::mlp(const Block& b, const Tensor& x) const {
  const Tensor h = relu(add_rowvec(matmul(x, b.fc1_w), b.fc1_b));
  return add_rowvec(matmul(h, b.fc2_w), b.fc2_b);
}

Tensor SegModel::decode(const Tensor& tokens) const {
  const Tensor normed = layer_norm(tokens, norm_g_, norm_b_);
  const Tensor logits = add_rowvec(matmul(normed, head_w_), head_b_);
  const Tensor grid = reshape(logits, {config_.grid_h(), config_.grid_w(), config_.classes});
  return bilinear_resize(grid, config_.height, config_.width);
}

AttentionPerturbation* SegModel::perturbation_for(const ForwardOptions& options,
                                                  AttentionPerturbation& storage) const {
  if (options.perturbation != PerturbationMode::random) return nullptr;
  if (options.rng == nullptr) throw ContractError("segnet: random perturbation needs an rng");
  storage.noise = {config_.grid_h(), config_.grid_w(), options.noise_h, options.noise_w, 1.0};
  storage.rng = options.rng;
  return &storage;
}

ForwardResult SegModel::forward(const Tensor& image, const ForwardOptions& options) const {
  AttentionPerturbation storage;
  const AttentionPerturbation* perturb = perturbation_for(options, storage);
  ForwardResult out;
  Tensor x = embed(image);
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const Block& b = blocks_[l];
    const Tensor h = layer_norm(x, b.ln1_g, b.ln1_b);
    auto attn = self_attention(h, b.attn, perturb);
    Tensor y = attn.output;
    if (options.perturbation == PerturbationMode::uniform) y = uniform_broadcast(y);
    x = add(x, y);
    x = add(x, mlp(b, layer_norm(x, b.ln2_g, b.ln2_b)));
    attn.map.layer = l;
    out.maps.push_back(std::move(attn.map));
    out.features.push_back(h);
  }
  out.logits = decode(x);
  return out;
}

ForwardResult SegModel::forward_cross(const ForwardResult& query_stream, const Tensor& kv_image,
                                      bool stop_query_grad, const ForwardOptions& options) const {
  if (query_stream.features.size() != blocks_.size()) {
    throw DimensionError("segnet: query stream has " + std::to_string(query_stream.features.size()) +
                         " cached features, model has " + std::to_string(blocks_.size()) + " blocks");
  }
  AttentionPerturbation storage;
  const AttentionPerturbation* perturb = perturbation_for(options, storage);
  ForwardResult out;
  Tensor x = embed(kv_image);
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const Block& b = blocks_[l];
    const Tensor h = layer_norm(x, b.ln1_g, b.ln1_b);
    auto attn = cross_domain_attention(query_stream.features[l], h, b.attn, stop_query_grad, perturb);
    Tensor y = attn.output;
    if (options.perturbation == PerturbationMode::uniform) y = uniform_broadcast(y);
    x = add(x, y);
    x = add(x, mlp(b, layer_norm(x, b.ln2_g, b.ln2_b)));
    attn.map.layer = l;
    out.maps.push_back(std::move(attn.map));
    out.features.push_back(h);
  }
  out.logits = decode(x);
  return out;
}

ForwardResult SegModel::forward_cross(const Tensor& query_image, const Tensor& kv_image,
                                      bool stop_query_grad) const {
  check_image(kv_image);
  return forward_cross(forward(query_image), kv_image, stop_query_grad);
}

std::vector<NamedTensor> SegModel::named_parameters() const {
  std::vector<NamedTensor> out{{"encoder.patch.weight", patch_w_},
                               {"encoder.patch.bias", patch_b_},
                               {"encoder.pos", pos_}};
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const Block& b = blocks_[l];
    const std::string p = "encoder.block" + std::to_string(l) + ".";
    out.insert(out.end(), {{p + "norm1.weight", b.ln1_g},
                           {p + "norm1.bias", b.ln1_b},
                           {p + "attn.query", b.attn.w_q},
                           {p + "attn.key", b.attn.w_k},
                           {p + "attn.value", b.attn.w_v},
                           {p + "attn.out", b.attn.w_o},
                           {p + "norm2.weight", b.ln2_g},
                           {p + "norm2.bias", b.ln2_b},
                           {p + "mlp.fc1.weight", b.fc1_w},
                           {p + "mlp.fc1.bias", b.fc1_b},
                           {p + "mlp.fc2.weight", b.fc2_w},
                           {p + "mlp.fc2.bias", b.fc2_b}});
  }
  out.insert(out.end(), {{"decoder.norm.weight", norm_g_},
                         {"decoder.norm.bias", norm_b_},
                         {"decoder.head.weight", head_w_},
                         {"decoder.head.bias", head_b_}});
  return out;
}

std::vector<Tensor> SegModel::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

std::size_t SegModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : parameters()) n += t.size();
  return n;
}

bool SegModel::is_decoder_parameter(const std::string& name) { return name.rfind("decoder.", 0) == 0; }

void SegModel::load_parameters(const std::vector<NamedTensor>& params) {
  auto mine = named_parameters();
  if (params.size() != mine.size()) {
    throw DimensionError("load_parameters: expected " + std::to_string(mine.size()) + " tensors, got " +
                         std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < mine.size(); ++i) {
    if (params[i].first != mine[i].first || params[i].second.shape() != mine[i].second.shape()) {
      throw DimensionError("load_parameters: " + params[i].first + " " +
                           shape_str(params[i].second.shape()) + " does not match " + mine[i].first +
                           " " + shape_str(mine[i].second.shape()));
    }
  }
  for (std::size_t i = 0; i < mine.size(); ++i) {
    auto dst = mine[i].second.mutable_data();
    const auto src = params[i].second.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

SegModel SegModel::clone(bool trainable) const {
  SegModel copy = *this;
  auto fresh = [trainable](Tensor& t) { t = t.clone(trainable); };
  fresh(copy.patch_w_);
  fresh(copy.patch_b_);
  fresh(copy.pos_);
  for (auto& b : copy.blocks_) {
    for (Tensor* t : {&b.ln1_g, &b.ln1_b, &b.attn.w_q, &b.attn.w_k, &b.attn.w_v, &b.attn.w_o, &b.ln2_g,
                      &b.ln2_b, &b.fc1_w, &b.fc1_b, &b.fc2_w, &b.fc2_b})
      fresh(*t);
  }
  for (Tensor* t : {&copy.norm_g_, &copy.norm_b_, &copy.head_w_, &copy.head_b_}) fresh(*t);
  return copy;
}

void SegModel::zero_grad() {
  for (auto& t : parameters()) t.zero_grad();
}

}  // namespace xda
