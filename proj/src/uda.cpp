#include "xda/uda.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "xda/errors.hpp"

namespace xda {

TeacherState make_teacher(const SegModel& student, Real alpha) {
  if (!(alpha >= 0 && alpha <= 1)) throw ContractError("teacher: EMA momentum outside [0, 1]");
  return {student.clone(false), alpha};
}

void ema_update(SegModel& teacher, const SegModel& student, Real alpha) {
  if (!(alpha >= 0 && alpha <= 1)) throw ContractError("ema_update: momentum outside [0, 1]");
  auto phi = teacher.named_parameters();
  const auto theta = student.named_parameters();
  if (phi.size() != theta.size()) throw DimensionError("ema_update: parameter count mismatch");
  for (std::size_t i = 0; i < phi.size(); ++i) {
    if (phi[i].second.shape() != theta[i].second.shape()) {
      throw DimensionError("ema_update: " + phi[i].first + " shape mismatch");
    }
  }
  for (std::size_t i = 0; i < phi.size(); ++i) {
    auto dst = phi[i].second.mutable_data();
    const auto src = theta[i].second.data();
    if (alpha == 0) {
      std::copy(src.begin(), src.end(), dst.begin());
    } else if (alpha < 1) {
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = alpha * dst[k] + (1 - alpha) * src[k];
    }
  }
}

void ema_update(TeacherState& teacher, const SegModel& student) {
  ema_update(teacher.model, student, teacher.alpha);
}

PseudoLabel pseudo_label(const Tensor& teacher_logits, Real tau) {
  if (!(tau > 0 && tau < 1)) throw ContractError("pseudo_label: threshold outside (0, 1)");
  if (teacher_logits.rank() != 3) throw DimensionError("pseudo_label: expected [H x W x C] logits");
  const std::size_t classes = teacher_logits.dim(2);
  const std::size_t pixels = teacher_logits.size() / classes;
  const Tensor probs = softmax_rows(teacher_logits.detach());
  PseudoLabel out;
  out.labels.resize(pixels);
  std::size_t confident = 0;
  for (std::size_t p = 0; p < pixels; ++p) {
    const auto row = probs.data().subspan(p * classes, classes);
    const auto best = std::max_element(row.begin(), row.end());
    out.labels[p] = static_cast<int>(best - row.begin());
    if (*best >= tau) ++confident;
  }
  out.quality = static_cast<Real>(confident) / static_cast<Real>(pixels);
  return out;
}

PseudoLabel pseudo_label(const SegModel& teacher, const Tensor& x_t, Real tau) {
  return pseudo_label(teacher.forward(x_t).logits, tau);
}

BinaryMask class_mix_mask(const LabelMap& y_s, std::mt19937_64& rng, std::vector<int>* chosen) {
  const std::set<int> present(y_s.begin(), y_s.end());
  std::vector<int> classes(present.begin(), present.end());
  std::shuffle(classes.begin(), classes.end(), rng);
  classes.resize((classes.size() + 1) / 2);
  std::sort(classes.begin(), classes.end());
  BinaryMask mask(y_s.size(), 0);
  for (std::size_t p = 0; p < y_s.size(); ++p) {
    mask[p] = std::binary_search(classes.begin(), classes.end(), y_s[p]) ? 1 : 0;
  }
  if (chosen != nullptr) *chosen = std::move(classes);
  return mask;
}

MixBatch compose_mix(const Tensor& x_s, const LabelMap& y_s, const Tensor& x_t,
                     const PseudoLabel& p_t, BinaryMask mask) {
  if (x_s.shape() != x_t.shape() || x_s.rank() != 3) {
    throw DimensionError("mix: image shapes " + shape_str(x_s.shape()) + " and " + shape_str(x_t.shape()));
  }
  const std::size_t pixels = x_s.dim(0) * x_s.dim(1), ch = x_s.dim(2);
  if (y_s.size() != pixels || p_t.labels.size() != pixels || mask.size() != pixels) {
    throw DimensionError("mix: label or mask size does not match the image");
  }
  std::vector<Real> mixed(x_s.size());
  LabelMap labels(pixels);
  for (std::size_t p = 0; p < pixels; ++p) {
    const bool paste = mask[p] != 0;
    for (std::size_t c = 0; c < ch; ++c) mixed[p * ch + c] = paste ? x_s.at(p * ch + c) : x_t.at(p * ch + c);
    labels[p] = paste ? y_s[p] : p_t.labels[p];
  }
  MixBatch out;
  out.x_s = x_s;
  out.y_s = y_s;
  out.x_t = x_t;
  out.p_t = p_t.labels;
  out.x_mixed = Tensor::constant(x_s.shape(), std::move(mixed));
  out.p_mixed = std::move(labels);
  out.mask = std::move(mask);
  out.q = p_t.quality;
  return out;
}

MixBatch dacs_mix(const Tensor& x_s, const LabelMap& y_s, const Tensor& x_t, const PseudoLabel& p_t,
                  std::mt19937_64& rng) {
  std::vector<int> chosen;
  BinaryMask mask = class_mix_mask(y_s, rng, &chosen);
  MixBatch out = compose_mix(x_s, y_s, x_t, p_t, std::move(mask));
  out.pasted_classes = std::move(chosen);
  return out;
}

Tensor one_hot(const LabelMap& labels, std::size_t classes) {
  std::vector<Real> data(labels.size() * classes, 0.0);
  for (std::size_t p = 0; p < labels.size(); ++p) {
    if (labels[p] < 0 || static_cast<std::size_t>(labels[p]) >= classes) {
      throw ContractError("one_hot: label " + std::to_string(labels[p]) + " outside [0, " +
                          std::to_string(classes) + ")");
    }
    data[p * classes + static_cast<std::size_t>(labels[p])] = 1.0;
  }
  return Tensor::constant({labels.size(), classes}, std::move(data));
}

Tensor segmentation_loss(const Tensor& logits, const LabelMap& labels, Real weight) {
  if (logits.rank() != 3 || logits.dim(0) * logits.dim(1) != labels.size()) {
    throw DimensionError("segmentation_loss: logits " + shape_str(logits.shape()) + " for " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t pixels = labels.size(), classes = logits.dim(2);
  return cross_entropy(reshape(logits, {pixels, classes}), one_hot(labels, classes),
                       Tensor::full({pixels}, weight));
}

Tensor loss_sup(const Tensor& logits_source, const LabelMap& y_s) {
  return segmentation_loss(logits_source, y_s, 1.0);
}

Tensor loss_tgt(const Tensor& logits_mixed, const LabelMap& p_mixed, Real q) {
  return segmentation_loss(logits_mixed, p_mixed, q);
}

Tensor loss_t2s(const Tensor& logits_t2s, const LabelMap& y_s) { return segmentation_loss(logits_t2s, y_s, 1.0); }

Tensor loss_s2t(const Tensor& logits_s2t, const LabelMap& p_mixed, Real q) {
  return segmentation_loss(logits_s2t, p_mixed, q);
}

Tensor loss_pred(const Tensor& l_s, const Tensor& l_t2s, const Tensor& l_t, const Tensor& l_s2t) {
  return add(scale(add(l_s, l_t2s), 0.5), scale(add(l_t, l_s2t), 0.5));
}

Real loss_pred(Real l_s, Real l_t2s, Real l_t, Real l_s2t) { return 0.5 * (l_s + l_t2s) + 0.5 * (l_t + l_s2t); }

namespace {

Real branch_weight(bool a, bool b) { return (a && b) ? 0.5 : 1.0; }

}  // namespace

Real loss_pred(Real l_s, Real l_t2s, Real l_t, Real l_s2t, const LossToggles& t) {
  const Real ws = branch_weight(t.sup, t.t2s), wt = branch_weight(t.tgt, t.s2t);
  return ws * ((t.sup ? l_s : 0.0) + (t.t2s ? l_t2s : 0.0)) + wt * ((t.tgt ? l_t : 0.0) + (t.s2t ? l_s2t : 0.0));
}

Tensor loss_pred(const Tensor& l_s, const Tensor& l_t2s, const Tensor& l_t, const Tensor& l_s2t,
                 const LossToggles& t) {
  if (t.sup && t.t2s && t.tgt && t.s2t) return loss_pred(l_s, l_t2s, l_t, l_s2t);
  const Tensor zero = Tensor::scalar(0.0);
  const Real ws = branch_weight(t.sup, t.t2s), wt = branch_weight(t.tgt, t.s2t);
  const Tensor source = scale(add(t.sup ? l_s : zero, t.t2s ? l_t2s : zero), ws);
  const Tensor target = scale(add(t.tgt ? l_t : zero, t.s2t ? l_s2t : zero), wt);
  return add(source, target);
}

Tensor total_loss(const Tensor& l_pred, const Tensor& l_attn, Real lambda_attn) {
  if (lambda_attn < 0) throw ContractError("total_loss: negative attention weight");
  return add(l_pred, scale(l_attn, lambda_attn));
}

Real total_loss(Real l_pred, Real l_attn, Real lambda_attn) {
  if (lambda_attn < 0) throw ContractError("total_loss: negative attention weight");
  return l_pred + lambda_attn * l_attn;
}

BinaryMask token_mask(const BinaryMask& mask, std::size_t height, std::size_t width,
                      std::size_t grid_h, std::size_t grid_w) {
  if (mask.size() != height * width) throw DimensionError("token_mask: mask size does not match image");
  std::vector<Real> field(mask.begin(), mask.end());
  const Tensor resized = bilinear_resize(Tensor::constant({height, width, 1}, std::move(field)), grid_h, grid_w);
  BinaryMask out(grid_h * grid_w);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = resized.at(i) >= 0.5 ? 1 : 0;
  return out;
}

std::vector<Tensor> mix_attention_maps(const std::vector<AttentionMap>& maps_s,
                                       const std::vector<AttentionMap>& maps_t,
                                       const BinaryMask& token_mask) {
  if (maps_s.size() != maps_t.size()) throw DimensionError("mix_attention_maps: layer count mismatch");
  std::vector<Tensor> out;
  for (std::size_t l = 0; l < maps_s.size(); ++l) {
    const Tensor& s = maps_s[l].scores;
    const Tensor& t = maps_t[l].scores;
    if (s.shape() != t.shape() || s.rank() != 3 || s.dim(1) != token_mask.size()) {
      throw DimensionError("mix_attention_maps: maps " + shape_str(s.shape()) + " / " + shape_str(t.shape()) +
                           " do not match a " + std::to_string(token_mask.size()) + "-token grid");
    }
    const std::size_t heads = s.dim(0), nq = s.dim(1), nk = s.dim(2);
    std::vector<Real> mixed(s.size());
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t j = 0; j < nq; ++j) {
        const std::size_t off = (h * nq + j) * nk;
        const auto& src = token_mask[j] ? s : t;
        std::copy_n(src.data().begin() + off, nk, mixed.begin() + off);
      }
    }
    out.push_back(Tensor::constant(s.shape(), std::move(mixed)));
  }
  return out;
}

Tensor valid_mask(const BinaryMask& token_mask) {
  const std::size_t n = token_mask.size();
  std::vector<Real> out(n * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t k = 0; k < n; ++k)
      out[j * n + k] = token_mask[j] ? token_mask[k] : 1 - token_mask[k];
  return Tensor::constant({n, n}, std::move(out));
}

Tensor loss_attn(const std::vector<AttentionMap>& maps_student, const std::vector<Tensor>& maps_sup,
                 const Tensor& valid) {
  if (maps_student.size() != maps_sup.size() || maps_student.empty()) {
    throw DimensionError("loss_attn: layer count mismatch");
  }
  if (valid.rank() != 2) throw DimensionError("loss_attn: mask must be [N_q x N_k]");
  // Query rows with at least one valid key.
  const std::size_t nq = valid.dim(0), nk = valid.dim(1);
  Real rows = 0;
  for (std::size_t j = 0; j < nq; ++j) {
    const auto row = valid.data().subspan(j * nk, nk);
    if (std::any_of(row.begin(), row.end(), [](Real v) { return v != 0; })) rows += 1;
  }
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t l = 0; l < maps_student.size(); ++l) {
    const Tensor& m = maps_student[l].scores;
    const Tensor& sup = maps_sup[l];
    if (m.shape() != sup.shape() || m.rank() != 3 || valid.shape() != Shape{m.dim(1), m.dim(2)}) {
      throw DimensionError("loss_attn: shapes " + shape_str(m.shape()) + ", " + shape_str(sup.shape()) +
                           ", mask " + shape_str(valid.shape()));
    }
    if (rows == 0) continue;
    const std::size_t heads = m.dim(0);
    std::vector<Real> tiled;
    tiled.reserve(m.size());
    for (std::size_t h = 0; h < heads; ++h) tiled.insert(tiled.end(), valid.data().begin(), valid.data().end());
    // p log(p/q) - p + q is non-negative per element and sums to the row KL
    // over a full row, so partially masked rows cannot go negative.
    const Tensor terms = add(kl_rows(sup, m), sub(m, sup));
    const Tensor masked = mul(terms, Tensor::constant(m.shape(), std::move(tiled)));
    total = add(total, scale(sum(masked), 1.0 / (rows * static_cast<Real>(heads))));
  }
  return scale(total, 1.0 / static_cast<Real>(maps_student.size()));
}

}  // namespace xda
