// Acceptance suite: one PASS/FAIL line per criterion. Arguments select a
// subset of criteria by number; no arguments runs all nine.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>

#include "xda/checkpoint.hpp"
#include "xda/experiments.hpp"
#include "xda/selftest.hpp"
#include "xda/trainer.hpp"

using namespace xda;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool passed = false;
  std::string detail;
};

double since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string pct(Real v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

TrainConfig small_run(std::size_t iterations) {
  TrainConfig c;
  c.model.height = c.model.width = 16;
  c.data.height = c.data.width = 16;
  c.splits = {6, 6, 3};
  c.iterations = iterations;
  c.warmup = 1;
  c.tau = 0.26;
  return c;
}

Verdict from_selftest(const CheckOutcome& c, double limit_seconds) {
  Verdict v;
  v.passed = c.passed && c.seconds < limit_seconds;
  std::ostringstream os;
  os << c.detail << " (" << std::fixed;
  os.precision(2);
  os << c.seconds << " s, limit " << limit_seconds << " s)";
  v.detail = os.str();
  return v;
}

std::vector<std::uint8_t> bytes_of(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

Verdict inference_purity() {
  const TrainConfig c = small_run(6);
  const TrainResult r = train(c);
  const RawCheckpoint full = make_checkpoint(c, r.student, &*r.teacher);
  const LoadedCheckpoint a = load_checkpoint(full);
  const LoadedCheckpoint b = load_checkpoint(strip_teacher(full));
  const auto data = make_dataset(c);
  std::size_t scenes = 0, mismatches = 0;
  for (const auto* split : {&data->eval, &data->target}) {
    for (const auto& s : *split) {
      ++scenes;
      const Tensor la = a.student.forward(s.image).logits, lb = b.student.forward(s.image).logits;
      const Tensor lm = r.student.forward(s.image).logits;
      if (!std::equal(la.data().begin(), la.data().end(), lb.data().begin()) ||
          !std::equal(la.data().begin(), la.data().end(), lm.data().begin()))
        ++mismatches;
    }
  }
  const bool same_eval = evaluate(b.student, c.perturbation, data->eval).mean == r.record.final_eval.mean;
  return {mismatches == 0 && same_eval && !b.teacher,
          std::to_string(scenes) + " scenes, " + std::to_string(mismatches) +
              " logit mismatches between full, stripped and in-memory models"};
}

Verdict adaptation_uplift(const fs::path& config_path, const fs::path& out_csv) {
  const TrainConfig base = load_config(config_path);
  struct Method {
    const char* name;
    LossToggles toggles;
  };
  const Method methods[] = {{"source-only", {true, false, false, false, false, true}},
                            {"S&T", {true, true, false, false, false, true}},
                            {"full", {true, true, true, true, true, true}}};
  std::vector<RunSpec> specs;
  for (const auto& m : methods)
    for (std::size_t k = 0; k < kReplicates; ++k) {
      TrainConfig c = base;
      c.losses = m.toggles;
      c.seed = base.seed + k;
      specs.push_back({m.name, c});
    }
  const auto t0 = std::chrono::steady_clock::now();
  const auto outcomes = run_all(specs, worker_threads());
  const double total = since(t0);
  const auto rows = summarize(specs, outcomes);

  double slowest = 0;
  for (const auto& o : outcomes) slowest = std::max(slowest, o.wall_seconds);
  std::size_t full_best = 0;
  for (std::size_t k = 0; k < kReplicates; ++k)
    if (rows[2].miou[k] > rows[0].miou[k] && rows[2].miou[k] > rows[1].miou[k]) ++full_best;

  std::ofstream csv(out_csv);
  csv << "method,miou_0,miou_1,miou_2,mean,std\n";
  for (const auto& r : rows) {
    csv << r.label;
    for (Real m : r.miou) csv << ',' << m;
    csv << ',' << r.mean << ',' << r.stddev << '\n';
  }

  const Real uplift = rows[2].mean - rows[0].mean, vs_st = rows[2].mean - rows[1].mean;
  const bool ok = uplift >= 0.03 && vs_st >= -0.005 && 2 * full_best > kReplicates && slowest <= 600 && total <= 7200;
  std::ostringstream os;
  for (const auto& r : rows) {
    os << r.label << " " << pct(r.mean) << " [";
    for (std::size_t k = 0; k < r.miou.size(); ++k) os << (k ? " " : "") << pct(r.miou[k]);
    os << "], ";
  }
  os << "full - source-only " << pct(uplift) << " pp (need >= 3), full - S&T " << pct(vs_st)
     << " pp (need >= -0.5), full best in " << full_best << "/" << kReplicates << " seeds, slowest run "
     << static_cast<int>(slowest) << " s, total " << static_cast<int>(total) << " s";
  return {ok, os.str()};
}

Verdict plumbing() {
  TrainConfig base = small_run(3);
  base.seed = 5;
  const fs::path dir = fs::temp_directory_path() / "xda_acceptance_plumbing";
  fs::remove_all(dir);
  const std::size_t threads = worker_threads();
  ablate(base, dir / "ablate", threads);
  sweep_lambda(base, dir / "sweep", threads);
  const auto abl = read_summary_csv(dir / "ablate" / "ablation.csv");
  const auto swp = read_summary_csv(dir / "sweep" / "lambda_sweep.csv");

  std::size_t checked = 0, mismatches = 0;
  auto cross_check = [&](const std::vector<RunSpec>& specs, const std::vector<SummaryRow>& rows) {
    for (std::size_t i = 0; i < specs.size(); ++i) {
      const auto& row = rows.at(i / kReplicates);
      const Real single = train(specs[i].config).record.final_eval.mean;
      ++checked;
      if (row.label != specs[i].label || row.miou.at(i % kReplicates) != single) ++mismatches;
    }
  };
  cross_check(ablation_specs(base), abl);
  cross_check(sweep_specs(base), swp);

  bool schema = abl.size() == 7 && swp.size() == 3;
  const Real lambdas[] = {0.1, 1.0, 10.0};
  for (std::size_t i = 0; schema && i < 3; ++i) schema = swp[i].config.lambda_attn == lambdas[i];
  schema = schema && abl.back().label == "full" && abl.back().config.lambda_attn == 1.0 &&
           abl.back().config.losses.stop_query_grad && fs::exists(dir / "sweep" / "lambda_sweep.dat");
  fs::remove_all(dir);
  return {schema && mismatches == 0,
          std::to_string(abl.size()) + " ablation rows, " + std::to_string(swp.size()) + " sweep rows, " +
              std::to_string(checked) + " runs cross-checked, " + std::to_string(mismatches) + " mismatches"};
}

Verdict determinism(const fs::path& golden) {
  TrainConfig c = small_run(6);
  c.eval_every = 2;
  const TrainResult a = train(c), b = train(c);
  const bool replay = same_trace(a.record, b.record);

  const fs::path dir = fs::temp_directory_path() / "xda_acceptance_ckpt";
  fs::create_directories(dir);
  save_checkpoint(dir / "a.xda", c, a.student, &*a.teacher);
  save_checkpoint(dir / "b.xda", c, b.student, &*b.teacher);
  const LoadedCheckpoint l = load_checkpoint(dir / "a.xda");
  save_checkpoint(dir / "c.xda", l.config, l.student, &*l.teacher);
  const auto ba = bytes_of(dir / "a.xda");
  const bool round_trip = ba == bytes_of(dir / "b.xda") && ba == bytes_of(dir / "c.xda") &&
                          encode_checkpoint(decode_checkpoint(ba)) == ba;
  fs::remove_all(dir);

  const auto gb = bytes_of(golden);
  bool golden_ok = false;
  try {
    const RawCheckpoint g = decode_checkpoint(gb);
    golden_ok = encode_checkpoint(g) == gb && g.records.size() == 4 && g.records[0].name == kConfigRecord &&
                g.records[1].shape == Shape{2, 3} && g.records[1].values[0] == -0.5f &&
                g.config_hash == fnv1a("[model]\nheight = 8\n");
  } catch (const std::exception&) {
  }
  return {replay && round_trip && golden_ok, std::string("replay ") + (replay ? "identical" : "DIFFERS") +
                                                 ", checkpoint round trip " + (round_trip ? "bitwise" : "BROKEN") +
                                                 ", golden file " + (golden_ok ? "matches" : "MISMATCH")};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  auto wanted = [&](int n) { return selected.empty() || selected.count(n) > 0; };

  const fs::path config = XDA_CONFIG_DIR "/reference.ini";
  const fs::path golden = XDA_GOLDEN_DIR "/tiny.xda";
  const std::pair<const char*, std::function<Verdict()>> criteria[] = {
      {"gradient correctness", [] { return from_selftest(check_gradients(), 60); }},
      {"attention invariants", [] { return from_selftest(check_attention_invariants(1000), 30); }},
      {"stop-gradient property", [] { return from_selftest(check_stop_gradient(), 10); }},
      {"loss algebra", [] { return from_selftest(check_loss_algebra(), 10); }},
      {"inference purity", inference_purity},
      {"teacher algebra", [] { return from_selftest(check_teacher_algebra(), 60); }},
      {"adaptation uplift", [&] { return adaptation_uplift(config, "acceptance_uplift.csv"); }},
      {"ablation and sweep plumbing", plumbing},
      {"determinism and persistence", [&] { return determinism(golden); }},
  };

  int failures = 0;
  for (int n = 1; n <= 9; ++n) {
    if (!wanted(n)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = criteria[n - 1].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    if (!v.passed) ++failures;
    std::printf("criterion %d %-28s %s  (%.1f s)  %s\n", n, criteria[n - 1].first, v.passed ? "PASS" : "FAIL",
                since(t0), v.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
