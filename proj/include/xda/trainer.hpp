#pragma once

// Mean-teacher training loop, AdamW, evaluation and run logs.

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <vector>

#include "xda/config.hpp"
#include "xda/segnet.hpp"
#include "xda/synthdata.hpp"
#include "xda/uda.hpp"

namespace xda {

struct Dataset {
  std::vector<Scene> source;  // labeled training scenes
  std::vector<Scene> target;  // unlabeled during training
  std::vector<Scene> eval;    // target eval scenes
};

// In upper-bound mode the labeled training scenes are the target ones.
std::shared_ptr<const Dataset> make_dataset(const TrainConfig& config);

// Decoupled weight decay Adam. Parameters named decoder.* use `lr`, the rest
// `encoder_lr`; decay applies to rank-2 tensors only.
class AdamW {
 public:
  AdamW(std::vector<NamedTensor> params, const TrainConfig& config);
  void step(Real lr_scale);
  std::size_t steps() const { return t_; }

 private:
  std::vector<NamedTensor> params_;
  std::vector<std::vector<Real>> m_, v_;
  Real lr_, encoder_lr_, wd_, b1_, b2_, eps_;
  std::size_t t_ = 0;
};

// Multiplier on the base learning rate at `step` (0-based): linear warmup,
// then polynomial decay to zero at `iterations`.
Real lr_scale(const TrainConfig& config, std::size_t step);

struct BatchItem {
  std::size_t source = 0;
  std::size_t target = 0;
};

// The trainer's sampling/mixing stream is seeded with `seed ^ kTrainStream`;
// the student is initialized from `seed` itself.
inline constexpr std::uint64_t kTrainStream = 0x5bd1e9955bd1e995ULL;

// Draws indices from `rng` the same way regardless of which losses are on.
std::vector<BatchItem> sample_batch(std::mt19937_64& rng, std::size_t batch, std::size_t n_source,
                                    std::size_t n_target);

struct StepLosses {
  Tensor l_s, l_t, l_t2s, l_s2t, l_attn;  // batch means; zero scalars when disabled
  Tensor l_pred, total;
  Real q = 0;  // batch-mean pseudo-label quality
};

struct StepRecord {
  std::size_t step = 0;
  Real l_s = 0, l_t = 0, l_t2s = 0, l_s2t = 0, l_attn = 0, l_pred = 0, total = 0;
  Real q = 0;
  Real lr = 0;  // decoder learning rate used for the update
  std::optional<Real> eval_miou;
  double wall_seconds = 0;
};

struct RunRecord {
  std::uint64_t config_hash = 0;
  std::vector<StepRecord> steps;
  IouResult final_eval;
  double wall_seconds = 0;
};

// Compares everything but wall-clock times.
bool same_trace(const RunRecord& a, const RunRecord& b);

void write_metrics_csv(const std::filesystem::path& path, const RunRecord& record);
std::vector<StepRecord> read_metrics_csv(const std::filesystem::path& path);

std::vector<int> predict(const SegModel& model, const Tensor& image, PerturbationMode mode);
// Dataset-level confusion matrix over `scenes`; uniform mode is part of the
// architecture and stays on at evaluation, random perturbation does not.
IouResult evaluate(const SegModel& model, PerturbationMode mode, const std::vector<Scene>& scenes);

class Trainer {
 public:
  Trainer(const TrainConfig& config, std::shared_ptr<const Dataset> data = nullptr);

  // Forward passes and losses for one batch; no parameter update.
  StepLosses compute_losses(const std::vector<BatchItem>& batch);
  StepRecord step();

  const TrainConfig& config() const { return config_; }
  SegModel& student() { return student_; }
  const SegModel* teacher() const { return teacher_ ? &teacher_->model : nullptr; }
  const Dataset& data() const { return *data_; }
  std::size_t iteration() const { return iteration_; }
  std::mt19937_64& rng() { return rng_; }
  void set_dump_dir(std::filesystem::path dir) { dump_dir_ = std::move(dir); }

 private:
  void dump_batch(const std::vector<BatchItem>& batch) const;

  TrainConfig config_;
  std::shared_ptr<const Dataset> data_;
  SegModel student_;
  std::optional<TeacherState> teacher_;
  AdamW optimizer_;
  std::mt19937_64 rng_;
  std::size_t iteration_ = 0;
  std::filesystem::path dump_dir_ = "nan_dump";
};

struct TrainOptions {
  std::shared_ptr<const Dataset> data;  // built from the config when null
  std::filesystem::path dump_dir = "nan_dump";
  std::function<void(const StepRecord&)> on_step;
};

struct TrainResult {
  TrainConfig config;
  SegModel student;
  std::optional<SegModel> teacher;
  RunRecord record;
};

// Runs the full schedule. Final parameters are rounded to float so the saved
// checkpoint reproduces `record.final_eval` exactly.
TrainResult train(const TrainConfig& config, const TrainOptions& options = {});

}  // namespace xda
