#pragma once

// Multi-run drivers (ablation rows, lambda sweep) and attention dumps.

#include <filesystem>
#include <string>
#include <vector>

#include "xda/checkpoint.hpp"
#include "xda/trainer.hpp"

namespace xda {

// Worker count from XDA_THREADS, else the hardware concurrency.
std::size_t worker_threads();

struct RunSpec {
  std::string label;
  TrainConfig config;
};

struct RunOutcome {
  std::string label;
  std::uint64_t seed = 0;
  IouResult eval;
  double wall_seconds = 0;
};

// Trains every spec on `threads` workers. Scenes are generated once per
// distinct data config and shared read-only. When `out_dir` is non-empty each
// run writes <out_dir>/<label>_seed<seed>/{metrics.csv, model.xda}.
std::vector<RunOutcome> run_all(const std::vector<RunSpec>& specs, std::size_t threads,
                                const std::filesystem::path& out_dir = {});

struct SummaryRow {
  std::string label;
  TrainConfig config;  // seed of the first replicate
  std::vector<Real> miou;
  Real mean = 0;
  Real stddev = 0;  // sample standard deviation
};

inline constexpr std::size_t kReplicates = 3;

// The seven ablation rows built on a self-training base (sup + tgt), each at
// seeds base.seed + {0, 1, 2}. Rows using the attention term run at lambda 1.
std::vector<RunSpec> ablation_specs(const TrainConfig& base);
std::vector<RunSpec> sweep_specs(const TrainConfig& base, const std::vector<Real>& lambdas = {0.1, 1.0, 10.0});

std::vector<SummaryRow> summarize(const std::vector<RunSpec>& specs, const std::vector<RunOutcome>& outcomes);

// Writes ablation.csv (row,t2s,s2t,attn,stop_query_grad,lambda_attn,seed,miou_seed0..2,mean,std).
std::vector<SummaryRow> ablate(const TrainConfig& base, const std::filesystem::path& out_dir, std::size_t threads);
// Writes lambda_sweep.csv and lambda_sweep.dat ("lambda mean std" per line).
std::vector<SummaryRow> sweep_lambda(const TrainConfig& base, const std::filesystem::path& out_dir,
                                     std::size_t threads);

std::vector<SummaryRow> read_summary_csv(const std::filesystem::path& path);

struct AttentionDump {
  std::string kind;  // source, target, t2s or s2t
  std::size_t layer = 0;
  std::size_t head = 0;
  std::vector<Real> weights;  // query row over the key grid, sums to one
  std::filesystem::path file;
};

// For the query pixel (x, y) of scene `seed` rendered in both domains, writes
// one max-normalized grid_h x grid_w PGM per layer, head and direction:
// self-attention on source and target, target queries over source keys (t2s)
// and source queries over target keys (s2t). Images are saved alongside.
std::vector<AttentionDump> dump_attention(const SegModel& model, const SceneConfig& data, std::uint64_t seed,
                                          std::size_t x, std::size_t y, const std::filesystem::path& out_dir);
// Same, for explicit images; the query image of t2s is `target`.
std::vector<AttentionDump> dump_attention(const SegModel& model, const Tensor& source, const Tensor& target,
                                          std::size_t x, std::size_t y, const std::filesystem::path& out_dir);

}  // namespace xda
