#pragma once

// Built-in verification suites behind `xda selftest`. Each suite is
// self-contained and deterministic.

#include <string>
#include <vector>

namespace xda {

struct CheckOutcome {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0;
};

// Finite differences on every differentiable op (rel. error < 1e-5) and on an
// 8x8, one-block model with both self and cross paths (< 1e-4).
CheckOutcome check_gradients();
// Randomized row-stochasticity of self, cross and perturbed attention maps,
// plus cross-with-itself equals self.
CheckOutcome check_attention_invariants(std::size_t trials = 1000);
// Swapped-query paths carry no gradient with the stop enabled and some without.
CheckOutcome check_stop_gradient();
// Prediction/total recombination on a short logged run, mixed-map branches,
// valid-mask complement structure, zero-KL fixed point and q = 0 masking.
CheckOutcome check_loss_algebra();
// EMA endpoints and the absence of teacher gradients under every toggle set.
CheckOutcome check_teacher_algebra();

std::vector<CheckOutcome> run_selftest();

}  // namespace xda
