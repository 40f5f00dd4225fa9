#pragma once

// Mean-teacher self-training pieces: EMA teacher, confidence-weighted
// pseudo-labels, class-mix augmentation, and the segmentation, cross-domain
// and attention-consistency losses combined into the training objective.

#include <cstdint>
#include <random>
#include <vector>

#include "xda/attention.hpp"
#include "xda/segnet.hpp"
#include "xda/tensor.hpp"

namespace xda {

using LabelMap = std::vector<int>;     // row-major H*W class ids
using BinaryMask = std::vector<std::uint8_t>;

struct TeacherState {
  SegModel model;  // parameters never require gradients
  Real alpha = 0.99;
};

// Creates a frozen copy of the student.
TeacherState make_teacher(const SegModel& student, Real alpha);

// phi <- alpha * phi + (1 - alpha) * theta, elementwise. Throws ContractError
// if alpha is outside [0, 1] and DimensionError on architecture mismatch.
void ema_update(SegModel& teacher, const SegModel& student, Real alpha);
void ema_update(TeacherState& teacher, const SegModel& student);

struct PseudoLabel {
  LabelMap labels;
  Real quality = 0;  // fraction of pixels with max probability >= tau
};

// Argmax labels and confident-pixel ratio from [H x W x C] teacher logits.
PseudoLabel pseudo_label(const Tensor& teacher_logits, Real tau);
PseudoLabel pseudo_label(const SegModel& teacher, const Tensor& x_t, Real tau);

struct MixBatch {
  Tensor x_s;      // [H x W x 3]
  LabelMap y_s;
  Tensor x_t;
  LabelMap p_t;
  Tensor x_mixed;  // x_s where mask = 1, x_t elsewhere
  LabelMap p_mixed;
  BinaryMask mask;  // H*W
  Real q = 0;       // per-image weight of the mixed target supervision
  std::vector<int> pasted_classes;
};

// ClassMix mask: pixels of ceil(K/2) classes drawn without replacement from
// the K classes present in `y_s`.
BinaryMask class_mix_mask(const LabelMap& y_s, std::mt19937_64& rng, std::vector<int>* chosen = nullptr);

// Applies the pixelwise paste rule for an explicit mask.
MixBatch compose_mix(const Tensor& x_s, const LabelMap& y_s, const Tensor& x_t,
                     const PseudoLabel& p_t, BinaryMask mask);

MixBatch dacs_mix(const Tensor& x_s, const LabelMap& y_s, const Tensor& x_t, const PseudoLabel& p_t,
                  std::mt19937_64& rng);

Tensor one_hot(const LabelMap& labels, std::size_t classes);

// Pixel-mean cross-entropy of [H x W x C] logits against labels, every pixel
// weighted by `weight`.
Tensor segmentation_loss(const Tensor& logits, const LabelMap& labels, Real weight);

// Student on the source image, supervised by source labels.
Tensor loss_sup(const Tensor& logits_source, const LabelMap& y_s);
// Student on the mixed image, supervised by the mixed pseudo-label with weight q.
Tensor loss_tgt(const Tensor& logits_mixed, const LabelMap& p_mixed, Real q);
// F'(x_mixed, x_s): target queries over source keys/values, supervised by y_s.
Tensor loss_t2s(const Tensor& logits_t2s, const LabelMap& y_s);
// F'(x_s, x_mixed): source queries over mixed keys/values, supervised by the
// mixed pseudo-label with weight q.
Tensor loss_s2t(const Tensor& logits_s2t, const LabelMap& p_mixed, Real q);

// 1/2 (L_s + L_t2s) + 1/2 (L_t + L_s2t)
Tensor loss_pred(const Tensor& l_s, const Tensor& l_t2s, const Tensor& l_t, const Tensor& l_s2t);
Real loss_pred(Real l_s, Real l_t2s, Real l_t, Real l_s2t);

struct LossToggles {
  bool sup = true;
  bool tgt = true;
  bool t2s = true;
  bool s2t = true;
  bool attn = true;
  bool stop_query_grad = true;
  bool operator==(const LossToggles&) const = default;
};

// Source branch is the mean of the enabled {L_s, L_t2s}, target branch the
// mean of the enabled {L_t, L_s2t}; the two branches are summed. With all four
// terms enabled this is loss_pred above.
Real loss_pred(Real l_s, Real l_t2s, Real l_t, Real l_s2t, const LossToggles& toggles);
Tensor loss_pred(const Tensor& l_s, const Tensor& l_t2s, const Tensor& l_t, const Tensor& l_s2t,
                 const LossToggles& toggles);

// L_pred + lambda * L_attn
Tensor total_loss(const Tensor& l_pred, const Tensor& l_attn, Real lambda_attn);
Real total_loss(Real l_pred, Real l_attn, Real lambda_attn);

// Pixel mask resized to the token grid and binarized at 0.5.
BinaryMask token_mask(const BinaryMask& mask, std::size_t height, std::size_t width,
                      std::size_t grid_h, std::size_t grid_w);

// Per layer, query row j is taken from the source map if token_mask[j] = 1
// and from the target map otherwise. Results are detached.
std::vector<Tensor> mix_attention_maps(const std::vector<AttentionMap>& maps_s,
                                       const std::vector<AttentionMap>& maps_t,
                                       const BinaryMask& token_mask);

// [N x N]; row j is the token mask if token_mask[j] = 1, its complement otherwise.
Tensor valid_mask(const BinaryMask& token_mask);

// Masked KL(sup || student): elementwise p log(p/q) - p + q summed over valid
// entries and divided by the number of query rows that have any valid key
// (the mean row KL when the mask is full), then averaged over heads and
// layers. Gradients reach the student maps only.
Tensor loss_attn(const std::vector<AttentionMap>& maps_student, const std::vector<Tensor>& maps_sup,
                 const Tensor& valid);

}  // namespace xda
