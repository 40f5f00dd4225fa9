// Command-line driver: training, evaluation, attention dumps, ablations,
// lambda sweeps, dataset export and the built-in self test.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "xda/checkpoint.hpp"
#include "xda/errors.hpp"
#include "xda/experiments.hpp"
#include "xda/selftest.hpp"
#include "xda/trainer.hpp"

namespace fs = std::filesystem;
using namespace xda;

namespace {

void print_iou(const IouResult& r) {
  static const char* names[] = {"background", "circle", "rectangle", "triangle"};
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    const std::string name = c < 4 ? names[c] : "class" + std::to_string(c);
    if (r.per_class[c]) std::printf("  %-11s %6.2f\n", name.c_str(), 100.0 * *r.per_class[c]);
    else std::printf("  %-11s      -\n", name.c_str());
  }
  std::printf("  %-11s %6.2f\n", "mIoU", 100.0 * r.mean);
}

void print_rows(const std::vector<SummaryRow>& rows) {
  for (const auto& r : rows) {
    std::printf("  %-20s", r.label.c_str());
    for (Real m : r.miou) std::printf(" %6.2f", 100.0 * m);
    std::printf("   mean %6.2f  std %5.2f\n", 100.0 * r.mean, 100.0 * r.stddev);
  }
}

int cmd_train(const std::string& config_path, std::optional<std::uint64_t> seed, fs::path out, std::size_t log_every) {
  TrainConfig c = load_config(config_path);
  if (seed) c.seed = *seed;
  if (out.empty()) out = fs::path("runs") / (fs::path(config_path).stem().string() + "_seed" + std::to_string(c.seed));
  fs::create_directories(out);
  {
    std::ofstream f(out / "config.ini");
    f << c.canonical();
  }
  std::printf("training %zu iterations, seed %llu, config %016llx -> %s\n", c.iterations,
              static_cast<unsigned long long>(c.seed), static_cast<unsigned long long>(c.hash()), out.string().c_str());
  TrainOptions opts;
  opts.dump_dir = out / "nan_dump";
  opts.on_step = [&](const StepRecord& s) {
    if (log_every > 0 && (s.step % log_every == 0 || s.eval_miou))
      std::printf("step %5zu  total %.4f  L_s %.4f  L_t %.4f  L_t2s %.4f  L_s2t %.4f  L_attn %.5f  q %.3f%s\n", s.step,
                  s.total, s.l_s, s.l_t, s.l_t2s, s.l_s2t, s.l_attn, s.q,
                  s.eval_miou ? ("  eval mIoU " + std::to_string(100.0 * *s.eval_miou)).c_str() : "");
    std::fflush(stdout);
  };
  const TrainResult r = train(c, opts);
  write_metrics_csv(out / "metrics.csv", r.record);
  save_checkpoint(out / "model.xda", r.config, r.student, r.teacher ? &*r.teacher : nullptr);
  std::printf("target eval after %.1f s:\n", r.record.wall_seconds);
  print_iou(r.record.final_eval);
  std::printf("wrote %s and %s\n", (out / "model.xda").string().c_str(), (out / "metrics.csv").string().c_str());
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& split) {
  const LoadedCheckpoint l = load_checkpoint(ckpt);
  const TrainConfig& c = l.config;
  const Split which = split == "train" ? Split::target_train : Split::target_eval;
  const std::size_t count = split == "train" ? c.splits.target_train : c.splits.target_eval;
  const IouResult r = evaluate(l.student, c.perturbation, gen_split(which, count, c.data));
  std::printf("target %s split, %zu scenes:\n", split.c_str(), count);
  print_iou(r);
  return 0;
}

int cmd_dump(const std::string& ckpt, std::uint64_t scene, const std::string& pixel, fs::path out) {
  const auto comma = pixel.find(',');
  if (comma == std::string::npos) throw ContractError("--pixel expects X,Y, got '" + pixel + "'");
  std::size_t x = 0, y = 0;
  try {
    std::size_t used = 0;
    x = std::stoul(pixel.substr(0, comma), &used);
    if (used != comma) throw std::invalid_argument("x");
    y = std::stoul(pixel.substr(comma + 1), &used);
    if (used != pixel.size() - comma - 1) throw std::invalid_argument("y");
  } catch (const std::logic_error&) {
    throw ContractError("--pixel expects non-negative integers X,Y, got '" + pixel + "'");
  }
  const LoadedCheckpoint l = load_checkpoint(ckpt);
  if (out.empty()) out = "attn_scene" + std::to_string(scene) + "_" + std::to_string(x) + "_" + std::to_string(y);
  const auto dumps = dump_attention(l.student, l.config.data, scene, x, y, out);
  for (const auto& d : dumps) std::printf("%s\n", d.file.string().c_str());
  return 0;
}

int cmd_ablate(const std::string& config_path, const fs::path& out) {
  const TrainConfig c = load_config(config_path);
  const std::size_t threads = worker_threads();
  std::printf("ablation: 7 rows x %zu seeds on %zu worker(s)\n", kReplicates, threads);
  print_rows(ablate(c, out, threads));
  std::printf("wrote %s\n", (out / "ablation.csv").string().c_str());
  return 0;
}

int cmd_sweep(const std::string& config_path, const fs::path& out) {
  const TrainConfig c = load_config(config_path);
  const std::size_t threads = worker_threads();
  std::printf("lambda sweep: 3 values x %zu seeds on %zu worker(s)\n", kReplicates, threads);
  print_rows(sweep_lambda(c, out, threads));
  std::printf("wrote %s and %s\n", (out / "lambda_sweep.csv").string().c_str(),
              (out / "lambda_sweep.dat").string().c_str());
  return 0;
}

int cmd_gen(const fs::path& out, const std::string& config_path) {
  const TrainConfig c = load_config(config_path);
  export_dataset(out, c.data, c.splits);
  std::printf("wrote %zu + %zu + %zu scenes to %s\n", c.splits.source_train, c.splits.target_train,
              c.splits.target_eval, out.string().c_str());
  return 0;
}

int cmd_selftest() {
  bool ok = true;
  for (const auto& r : run_selftest()) {
    std::printf("%-4s %-22s %6.2fs  %s\n", r.passed ? "ok" : "FAIL", r.name.c_str(), r.seconds, r.detail.c_str());
    ok = ok && r.passed;
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-domain attention consistency for unsupervised domain adaptation"};
  app.require_subcommand(1);

  std::string config, ckpt, split = "eval", pixel;
  std::optional<std::uint64_t> seed;
  std::uint64_t scene = 0;
  std::string out;
  std::size_t log_every = 100;

  auto* train = app.add_subcommand("train", "train a model from a config file");
  train->add_option("--config", config, "config file")->required()->check(CLI::ExistingFile);
  train->add_option("--seed", seed, "override the config seed");
  train->add_option("--out", out, "run directory (default runs/<config>_seed<N>)");
  train->add_option("--log-every", log_every, "progress line interval, 0 for none");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on target scenes");
  eval->add_option("--ckpt", ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--split", split, "target split")->check(CLI::IsMember({"train", "eval"}));

  auto* dump = app.add_subcommand("dump-attn", "write attention heatmaps for one query pixel");
  dump->add_option("--ckpt", ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  dump->add_option("--scene", scene, "scene seed, rendered in both domains")->required();
  dump->add_option("--pixel", pixel, "query pixel X,Y")->required();
  dump->add_option("--out", out, "output directory");

  auto* ablate = app.add_subcommand("ablate", "run the seven ablation rows over three seeds");
  ablate->add_option("--config", config, "base config")->required()->check(CLI::ExistingFile);
  ablate->add_option("--out", out, "output directory")->required();

  auto* sweep = app.add_subcommand("sweep-lambda", "full method at lambda 0.1, 1 and 10 over three seeds");
  sweep->add_option("--config", config, "base config")->required()->check(CLI::ExistingFile);
  sweep->add_option("--out", out, "output directory")->required();

  auto* gen = app.add_subcommand("gen-data", "export the synthetic splits as PPM/PGM files");
  gen->add_option("--out", out, "output directory")->required();
  gen->add_option("--config", config, "config file")->required()->check(CLI::ExistingFile);

  auto* selftest = app.add_subcommand("selftest", "gradient checks and invariant suites");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return cmd_train(config, seed, out, log_every);
    if (*eval) return cmd_eval(ckpt, split);
    if (*dump) return cmd_dump(ckpt, scene, pixel, out);
    if (*ablate) return cmd_ablate(config, out);
    if (*sweep) return cmd_sweep(config, out);
    if (*gen) return cmd_gen(out, config);
    if (*selftest) return cmd_selftest();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "xda: error: %s\n", e.what());
    return 2;
  }
  return 0;
}
