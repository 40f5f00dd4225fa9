#pragma once

// Training configuration: INI-style text with [model], [data], [train] and
// [losses] sections. The canonical text (every key, fixed order, round-trip
// number formatting) is what gets hashed and embedded in checkpoints.

#include <cstdint>
#include <filesystem>
#include <string>

#include "xda/segnet.hpp"
#include "xda/synthdata.hpp"
#include "xda/uda.hpp"

namespace xda {

struct TrainConfig {
  ModelConfig model;
  SceneConfig data;
  SplitSizes splits;

  Real lambda_attn = 1.0;
  Real ema_alpha = 0.99;
  Real tau = 0.968;
  Real lr = 6e-4;          // decoder
  Real encoder_lr = 6e-5;
  Real weight_decay = 0.01;
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real adam_eps = 1e-8;
  std::size_t iterations = 2000;
  std::size_t warmup = 100;
  Real poly_power = 1.0;
  std::size_t batch_size = 2;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;  // 0: evaluate once at the end
  bool target_labels = false;  // upper bound: supervise on labeled target scenes instead of source

  LossToggles losses;
  PerturbationMode perturbation = PerturbationMode::none;
  std::size_t noise_h = 2;
  std::size_t noise_w = 2;

  void validate() const;
  // Whether any enabled term needs the EMA teacher.
  bool uses_teacher() const { return losses.tgt || losses.s2t || losses.attn; }
  std::string canonical() const;
  std::uint64_t hash() const;
  bool operator==(const TrainConfig&) const = default;
};

// Keys absent from the text keep their defaults; unknown keys are an error.
TrainConfig parse_config(const std::string& text);
TrainConfig load_config(const std::filesystem::path& path);

std::string to_string(PerturbationMode m);
PerturbationMode parse_perturbation(const std::string& s);

std::uint64_t fnv1a(const std::string& bytes);

}  // namespace xda
