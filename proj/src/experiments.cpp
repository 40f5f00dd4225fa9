#include "xda/experiments.hpp"

#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

#include "xda/errors.hpp"

namespace xda {

namespace {

std::string fmt(Real v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

Real parse_real(const std::string& s) {
  Real v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) throw FormatError("summary: bad number '" + s + "'");
  return v;
}

std::string slug(const std::string& label) {
  std::string out;
  for (char ch : label) {
    if (std::isalnum(static_cast<unsigned char>(ch)) || ch == '.') out.push_back(static_cast<char>(std::tolower(ch)));
    else if (!out.empty() && out.back() != '_') out.push_back('_');
  }
  while (!out.empty() && out.back() == '_') out.pop_back();
  return out.empty() ? "run" : out;
}

// Scenes depend only on these fields.
std::string data_key(const TrainConfig& c) {
  TrainConfig k;
  k.model = c.model;
  k.data = c.data;
  k.splits = c.splits;
  k.target_labels = c.target_labels;
  return k.canonical();
}

const char* kSummaryHeader = "row,seed,t2s,s2t,attn,stop_query_grad,lambda_attn,miou_0,miou_1,miou_2,mean,std";

void write_summary_csv(const std::filesystem::path& path, const std::vector<SummaryRow>& rows) {
  std::ofstream f(path);
  if (!f) throw FormatError("cannot write " + path.string());
  f << kSummaryHeader << '\n';
  for (const auto& r : rows) {
    const auto& t = r.config.losses;
    f << r.label << ',' << r.config.seed << ',' << t.t2s << ',' << t.s2t << ',' << t.attn << ',' << t.stop_query_grad
      << ',' << fmt(r.config.lambda_attn);
    for (Real m : r.miou) f << ',' << fmt(m);
    f << ',' << fmt(r.mean) << ',' << fmt(r.stddev) << '\n';
  }
  if (!f) throw FormatError("write failed for " + path.string());
}

void write_image_pgm(const std::filesystem::path& path, const std::vector<Real>& w, std::size_t h, std::size_t wd) {
  Real peak = 0;
  for (Real v : w) peak = std::max(peak, v);
  std::vector<std::uint8_t> px(w.size());
  for (std::size_t i = 0; i < w.size(); ++i)
    px[i] = static_cast<std::uint8_t>(std::lround(255.0 * (peak > 0 ? w[i] / peak : 0.0)));
  write_pgm(path, px, h, wd);
}

}  // namespace

std::size_t worker_threads() {
  if (const char* env = std::getenv("XDA_THREADS")) {
    std::size_t n = 0;
    const std::string s(env);
    const auto r = std::from_chars(s.data(), s.data() + s.size(), n);
    if (r.ec != std::errc{} || r.ptr != s.data() + s.size() || n == 0)
      throw ContractError("XDA_THREADS must be a positive integer, got '" + s + "'");
    return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

std::vector<RunOutcome> run_all(const std::vector<RunSpec>& specs, std::size_t threads,
                                const std::filesystem::path& out_dir) {
  std::map<std::string, std::shared_ptr<const Dataset>> datasets;
  for (const auto& s : specs) {
    auto& d = datasets[data_key(s.config)];
    if (!d) d = make_dataset(s.config);
  }
  std::vector<RunOutcome> out(specs.size());
  std::vector<std::exception_ptr> errors(specs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < specs.size();) {
      try {
        const auto& spec = specs[i];
        TrainOptions opts;
        opts.data = datasets.at(data_key(spec.config));
        std::filesystem::path dir;
        if (!out_dir.empty()) {
          dir = out_dir / (slug(spec.label) + "_seed" + std::to_string(spec.config.seed));
          std::filesystem::create_directories(dir);
          opts.dump_dir = dir / "nan_dump";
        }
        const TrainResult r = train(spec.config, opts);
        if (!dir.empty()) {
          write_metrics_csv(dir / "metrics.csv", r.record);
          save_checkpoint(dir / "model.xda", r.config, r.student, r.teacher ? &*r.teacher : nullptr);
        }
        out[i] = {spec.label, spec.config.seed, r.record.final_eval, r.record.wall_seconds};
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(threads, specs.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

std::vector<RunSpec> ablation_specs(const TrainConfig& base) {
  struct Row {
    const char* label;
    bool t2s, s2t, attn, stop;
  };
  const Row rows[] = {{"S&T", false, false, false, true},         {"+T2S", true, false, false, true},
                      {"+S2T", false, true, false, true},         {"+T2S+S2T", true, true, false, true},
                      {"+Attn", false, false, true, true},        {"+all w/o stop-grad", true, true, true, false},
                      {"full", true, true, true, true}};
  std::vector<RunSpec> specs;
  for (const auto& row : rows)
    for (std::size_t k = 0; k < kReplicates; ++k) {
      TrainConfig c = base;
      c.losses = {true, true, row.t2s, row.s2t, row.attn, row.stop};
      if (row.attn) c.lambda_attn = 1.0;
      c.seed = base.seed + k;
      specs.push_back({row.label, c});
    }
  return specs;
}

std::vector<RunSpec> sweep_specs(const TrainConfig& base, const std::vector<Real>& lambdas) {
  std::vector<RunSpec> specs;
  for (Real l : lambdas)
    for (std::size_t k = 0; k < kReplicates; ++k) {
      TrainConfig c = base;
      c.losses.attn = true;
      c.lambda_attn = l;
      c.seed = base.seed + k;
      specs.push_back({"lambda=" + fmt(l), c});
    }
  return specs;
}

std::vector<SummaryRow> summarize(const std::vector<RunSpec>& specs, const std::vector<RunOutcome>& outcomes) {
  if (specs.size() != outcomes.size()) throw DimensionError("summarize: specs and outcomes differ in length");
  std::vector<SummaryRow> rows;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (rows.empty() || rows.back().label != specs[i].label) rows.push_back({specs[i].label, specs[i].config, {}, 0, 0});
    rows.back().miou.push_back(outcomes[i].eval.mean);
  }
  for (auto& r : rows) {
    const Real n = static_cast<Real>(r.miou.size());
    for (Real m : r.miou) r.mean += m / n;
    Real ss = 0;
    for (Real m : r.miou) ss += (m - r.mean) * (m - r.mean);
    r.stddev = r.miou.size() > 1 ? std::sqrt(ss / (n - 1)) : 0.0;
  }
  return rows;
}

std::vector<SummaryRow> ablate(const TrainConfig& base, const std::filesystem::path& out_dir, std::size_t threads) {
  std::filesystem::create_directories(out_dir);
  const auto specs = ablation_specs(base);
  const auto rows = summarize(specs, run_all(specs, threads, out_dir / "runs"));
  write_summary_csv(out_dir / "ablation.csv", rows);
  return rows;
}

std::vector<SummaryRow> sweep_lambda(const TrainConfig& base, const std::filesystem::path& out_dir,
                                     std::size_t threads) {
  std::filesystem::create_directories(out_dir);
  const auto specs = sweep_specs(base);
  const auto rows = summarize(specs, run_all(specs, threads, out_dir / "runs"));
  write_summary_csv(out_dir / "lambda_sweep.csv", rows);
  std::ofstream dat(out_dir / "lambda_sweep.dat");
  dat << "# lambda_attn mean_miou std_miou\n";
  for (const auto& r : rows) dat << fmt(r.config.lambda_attn) << ' ' << fmt(r.mean) << ' ' << fmt(r.stddev) << '\n';
  if (!dat) throw FormatError("write failed for " + (out_dir / "lambda_sweep.dat").string());
  return rows;
}

std::vector<SummaryRow> read_summary_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot read " + path.string());
  std::string line;
  if (!std::getline(f, line) || line != kSummaryHeader) throw FormatError(path.string() + ": unexpected header");
  std::vector<SummaryRow> rows;
  while (std::getline(f, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() != 12) throw FormatError(path.string() + ": expected 12 columns, got " + std::to_string(cells.size()));
    SummaryRow r;
    r.label = cells[0];
    r.config.seed = std::stoull(cells[1]);
    r.config.losses.t2s = cells[2] == "1";
    r.config.losses.s2t = cells[3] == "1";
    r.config.losses.attn = cells[4] == "1";
    r.config.losses.stop_query_grad = cells[5] == "1";
    r.config.lambda_attn = parse_real(cells[6]);
    for (int k = 7; k < 10; ++k) r.miou.push_back(parse_real(cells[k]));
    r.mean = parse_real(cells[10]);
    r.stddev = parse_real(cells[11]);
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<AttentionDump> dump_attention(const SegModel& model, const Tensor& source, const Tensor& target,
                                          std::size_t x, std::size_t y, const std::filesystem::path& out_dir) {
  const ModelConfig& mc = model.config();
  if (x >= mc.width || y >= mc.height)
    throw ContractError("dump-attn: pixel (" + std::to_string(x) + "," + std::to_string(y) + ") outside the " +
                        std::to_string(mc.width) + "x" + std::to_string(mc.height) + " image");
  const std::size_t token = (y / mc.patch) * mc.grid_w() + x / mc.patch;
  const auto fs = model.forward(source), ft = model.forward(target);
  const auto t2s = model.forward_cross(ft, source, true), s2t = model.forward_cross(fs, target, true);
  const std::pair<const char*, const ForwardResult*> kinds[] = {
      {"source", &fs}, {"target", &ft}, {"t2s", &t2s}, {"s2t", &s2t}};

  std::filesystem::create_directories(out_dir);
  write_ppm(out_dir / "source.ppm", source);
  write_ppm(out_dir / "target.ppm", target);
  std::vector<AttentionDump> out;
  for (const auto& [kind, result] : kinds)
    for (const auto& map : result->maps)
      for (std::size_t h = 0; h < map.heads(); ++h) {
        AttentionDump d{kind, map.layer, h, {}, {}};
        const std::size_t row = (h * map.queries() + token) * map.keys();
        d.weights.assign(map.scores.data().begin() + static_cast<std::ptrdiff_t>(row),
                         map.scores.data().begin() + static_cast<std::ptrdiff_t>(row + map.keys()));
        d.file = out_dir / (std::string(kind) + "_l" + std::to_string(map.layer) + "_h" + std::to_string(h) + ".pgm");
        write_image_pgm(d.file, d.weights, mc.grid_h(), mc.grid_w());
        out.push_back(std::move(d));
      }
  return out;
}

std::vector<AttentionDump> dump_attention(const SegModel& model, const SceneConfig& data, std::uint64_t seed,
                                          std::size_t x, std::size_t y, const std::filesystem::path& out_dir) {
  const Scene s = gen_scene(Domain::source, seed, data);
  const Scene t = gen_scene(Domain::target, seed, data);
  return dump_attention(model, s.image, t.image, x, y, out_dir);
}

}  // namespace xda
