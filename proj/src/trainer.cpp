#include "xda/trainer.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "xda/checkpoint.hpp"
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
  if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) throw FormatError("metrics: bad number '" + s + "'");
  return v;
}

Tensor batch_mean(const std::vector<Tensor>& terms) {
  if (terms.empty()) return Tensor::scalar(0.0);
  Tensor acc = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return scale(acc, 1.0 / static_cast<Real>(terms.size()));
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

std::shared_ptr<const Dataset> make_dataset(const TrainConfig& config) {
  config.validate();
  auto d = std::make_shared<Dataset>();
  d->target = gen_split(Split::target_train, config.splits.target_train, config.data);
  d->eval = gen_split(Split::target_eval, config.splits.target_eval, config.data);
  d->source = config.target_labels ? d->target : gen_split(Split::source_train, config.splits.source_train, config.data);
  return d;
}

AdamW::AdamW(std::vector<NamedTensor> params, const TrainConfig& c)
    : params_(std::move(params)),
      lr_(c.lr),
      encoder_lr_(c.encoder_lr),
      wd_(c.weight_decay),
      b1_(c.beta1),
      b2_(c.beta2),
      eps_(c.adam_eps) {
  for (const auto& [name, t] : params_) {
    m_.emplace_back(t.size(), 0.0);
    v_.emplace_back(t.size(), 0.0);
  }
}

void AdamW::step(Real scale_factor) {
  ++t_;
  const Real c1 = 1.0 - std::pow(b1_, static_cast<Real>(t_));
  const Real c2 = 1.0 - std::pow(b2_, static_cast<Real>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& [name, t] = params_[i];
    const Real lr = (SegModel::is_decoder_parameter(name) ? lr_ : encoder_lr_) * scale_factor;
    const Real decay = t.rank() >= 2 ? wd_ : 0.0;
    const std::vector<Real> g = t.grad();
    auto w = t.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = b1_ * m[k] + (1 - b1_) * g[k];
      v[k] = b2_ * v[k] + (1 - b2_) * g[k] * g[k];
      w[k] -= lr * (m[k] / c1 / (std::sqrt(v[k] / c2) + eps_) + decay * w[k]);
    }
  }
}

Real lr_scale(const TrainConfig& c, std::size_t step) {
  if (step < c.warmup) return static_cast<Real>(step + 1) / static_cast<Real>(c.warmup);
  if (c.iterations <= c.warmup) return 1.0;
  const Real progress = static_cast<Real>(step - c.warmup) / static_cast<Real>(c.iterations - c.warmup);
  return std::pow(std::max(0.0, 1.0 - progress), c.poly_power);
}

std::vector<BatchItem> sample_batch(std::mt19937_64& rng, std::size_t batch, std::size_t n_source,
                                    std::size_t n_target) {
  std::uniform_int_distribution<std::size_t> src(0, n_source - 1), tgt(0, n_target == 0 ? 0 : n_target - 1);
  std::vector<BatchItem> out(batch);
  for (auto& b : out) {
    b.source = src(rng);
    b.target = tgt(rng);
  }
  return out;
}

bool same_trace(const RunRecord& a, const RunRecord& b) {
  if (a.config_hash != b.config_hash || a.steps.size() != b.steps.size()) return false;
  for (std::size_t i = 0; i < a.steps.size(); ++i) {
    const auto& x = a.steps[i];
    const auto& y = b.steps[i];
    if (x.step != y.step || x.l_s != y.l_s || x.l_t != y.l_t || x.l_t2s != y.l_t2s || x.l_s2t != y.l_s2t ||
        x.l_attn != y.l_attn || x.l_pred != y.l_pred || x.total != y.total || x.q != y.q || x.lr != y.lr ||
        x.eval_miou != y.eval_miou)
      return false;
  }
  return a.final_eval.mean == b.final_eval.mean && a.final_eval.per_class == b.final_eval.per_class;
}

void write_metrics_csv(const std::filesystem::path& path, const RunRecord& r) {
  std::ofstream f(path);
  if (!f) throw FormatError("cannot write " + path.string());
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(r.config_hash));
  f << "config_hash,step,l_s,l_t,l_t2s,l_s2t,l_attn,l_pred,total,q,lr,eval_miou,wall_seconds\n";
  for (const auto& s : r.steps) {
    f << hash << ',' << s.step << ',' << fmt(s.l_s) << ',' << fmt(s.l_t) << ',' << fmt(s.l_t2s) << ','
      << fmt(s.l_s2t) << ',' << fmt(s.l_attn) << ',' << fmt(s.l_pred) << ',' << fmt(s.total) << ',' << fmt(s.q)
      << ',' << fmt(s.lr) << ',' << (s.eval_miou ? fmt(*s.eval_miou) : "") << ',' << fmt(s.wall_seconds) << '\n';
  }
}

std::vector<StepRecord> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot read " + path.string());
  std::string line;
  std::getline(f, line);
  if (line.rfind("config_hash,step,", 0) != 0) throw FormatError(path.string() + ": missing metrics header");
  std::vector<StepRecord> out;
  while (std::getline(f, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (cells.size() != 13) throw FormatError(path.string() + ": expected 13 columns, got " + std::to_string(cells.size()));
    StepRecord s;
    s.step = static_cast<std::size_t>(std::stoull(cells[1]));
    Real* fields[] = {&s.l_s, &s.l_t, &s.l_t2s, &s.l_s2t, &s.l_attn, &s.l_pred, &s.total, &s.q, &s.lr};
    for (std::size_t k = 0; k < 9; ++k) *fields[k] = parse_real(cells[2 + k]);
    if (!cells[11].empty()) s.eval_miou = parse_real(cells[11]);
    s.wall_seconds = parse_real(cells[12]);
    out.push_back(s);
  }
  return out;
}

std::vector<int> predict(const SegModel& model, const Tensor& image, PerturbationMode mode) {
  ForwardOptions opts;
  if (mode == PerturbationMode::uniform) opts.perturbation = mode;
  const Tensor logits = model.forward(image, opts).logits;
  const std::size_t c = logits.dim(2), n = logits.dim(0) * logits.dim(1);
  std::vector<int> out(n);
  const auto v = logits.data();
  for (std::size_t p = 0; p < n; ++p) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k)
      if (v[p * c + k] > v[p * c + best]) best = k;
    out[p] = static_cast<int>(best);
  }
  return out;
}

IouResult evaluate(const SegModel& model, PerturbationMode mode, const std::vector<Scene>& scenes) {
  ConfusionMatrix cm(model.config().classes);
  for (const auto& s : scenes) cm.add(predict(model, s.image, mode), s.label);
  return cm.iou();
}

Trainer::Trainer(const TrainConfig& config, std::shared_ptr<const Dataset> data)
    : config_(config),
      data_(data ? std::move(data) : make_dataset(config)),
      student_((config.validate(), SegModel(config.model, config.seed))),
      optimizer_(student_.named_parameters(), config),
      rng_(config.seed ^ kTrainStream) {
  if (config_.uses_teacher()) teacher_ = make_teacher(student_, config_.ema_alpha);
}

StepLosses Trainer::compute_losses(const std::vector<BatchItem>& batch) {
  const auto& t = config_.losses;
  const auto& mc = config_.model;
  ForwardOptions student_opts, teacher_opts;
  if (config_.perturbation == PerturbationMode::uniform) {
    student_opts.perturbation = teacher_opts.perturbation = PerturbationMode::uniform;
  } else if (config_.perturbation == PerturbationMode::random) {
    student_opts.perturbation = PerturbationMode::random;
    student_opts.noise_h = config_.noise_h;
    student_opts.noise_w = config_.noise_w;
    student_opts.rng = &rng_;
  }

  std::vector<Tensor> ls, lt, lt2s, ls2t, lattn;
  Real q_sum = 0;
  for (const auto& item : batch) {
    const Scene& src = data_->source.at(item.source);
    std::optional<ForwardResult> fs;
    if (t.sup || t.s2t) fs = student_.forward(src.image, student_opts);
    if (t.sup) ls.push_back(loss_sup(fs->logits, src.label));
    if (!teacher_) continue;

    const Tensor& x_t = data_->target.at(item.target).image;
    const SegModel& g = teacher_->model;
    const ForwardResult teacher_t = g.forward(x_t, teacher_opts);
    const PseudoLabel pl = pseudo_label(teacher_t.logits, config_.tau);
    const MixBatch mix = dacs_mix(src.image, src.label, x_t, pl, rng_);
    q_sum += mix.q;

    std::optional<ForwardResult> fm;
    if (t.tgt || t.t2s || t.attn) fm = student_.forward(mix.x_mixed, student_opts);
    if (t.tgt) lt.push_back(loss_tgt(fm->logits, mix.p_mixed, mix.q));
    if (t.t2s) {
      const auto cross = student_.forward_cross(*fm, src.image, t.stop_query_grad, student_opts);
      lt2s.push_back(loss_t2s(cross.logits, src.label));
    }
    if (t.s2t) {
      const auto cross = student_.forward_cross(*fs, mix.x_mixed, t.stop_query_grad, student_opts);
      ls2t.push_back(loss_s2t(cross.logits, mix.p_mixed, mix.q));
    }
    if (t.attn) {
      const ForwardResult teacher_s = g.forward(src.image, teacher_opts);
      const BinaryMask tm = token_mask(mix.mask, mc.height, mc.width, mc.grid_h(), mc.grid_w());
      lattn.push_back(loss_attn(fm->maps, mix_attention_maps(teacher_s.maps, teacher_t.maps, tm), valid_mask(tm)));
    }
  }

  StepLosses out;
  out.l_s = batch_mean(ls);
  out.l_t = batch_mean(lt);
  out.l_t2s = batch_mean(lt2s);
  out.l_s2t = batch_mean(ls2t);
  out.l_attn = batch_mean(lattn);
  out.q = teacher_ ? q_sum / static_cast<Real>(batch.size()) : 0.0;
  out.l_pred = loss_pred(out.l_s, out.l_t2s, out.l_t, out.l_s2t, t);
  out.total = total_loss(out.l_pred, out.l_attn, t.attn ? config_.lambda_attn : 0.0);
  return out;
}

StepRecord Trainer::step() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto batch = sample_batch(rng_, config_.batch_size, data_->source.size(), data_->target.size());
  StepLosses l;
  try {
    l = compute_losses(batch);
  } catch (const NumericError& e) {
    dump_batch(batch);
    throw NumericError("step " + std::to_string(iteration_) + ": " + e.what() + "; batch written to " +
                       dump_dir_.string());
  }
  StepRecord r;
  r.step = iteration_;
  r.l_s = l.l_s.item();
  r.l_t = l.l_t.item();
  r.l_t2s = l.l_t2s.item();
  r.l_s2t = l.l_s2t.item();
  r.l_attn = l.l_attn.item();
  r.l_pred = l.l_pred.item();
  r.total = l.total.item();
  r.q = l.q;
  if (!std::isfinite(r.total)) {
    dump_batch(batch);
    throw NumericError("non-finite loss at step " + std::to_string(iteration_) + "; batch written to " +
                       dump_dir_.string());
  }
  student_.zero_grad();
  backward(l.total);
  const Real s = lr_scale(config_, iteration_);
  r.lr = config_.lr * s;
  optimizer_.step(s);
  if (teacher_) {
    const Real alpha = std::min(1.0 - 1.0 / static_cast<Real>(iteration_ + 1), teacher_->alpha);
    ema_update(teacher_->model, student_, alpha);
  }
  ++iteration_;
  r.wall_seconds = seconds_since(t0);
  return r;
}

void Trainer::dump_batch(const std::vector<BatchItem>& batch) const {
  std::filesystem::create_directories(dump_dir_);
  std::ofstream info(dump_dir_ / "batch.txt");
  info << "step " << iteration_ << "\n";
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Scene& s = data_->source.at(batch[i].source);
    const std::string tag = std::to_string(i);
    write_ppm(dump_dir_ / ("source_" + tag + ".ppm"), s.image);
    write_pgm(dump_dir_ / ("source_label_" + tag + ".pgm"), std::vector<std::uint8_t>(s.label.begin(), s.label.end()),
              config_.model.height, config_.model.width);
    if (!data_->target.empty()) write_ppm(dump_dir_ / ("target_" + tag + ".ppm"), data_->target.at(batch[i].target).image);
    info << "item " << i << " source_seed " << s.seed;
    if (!data_->target.empty()) info << " target_seed " << data_->target.at(batch[i].target).seed;
    info << "\n";
  }
}

TrainResult train(const TrainConfig& config, const TrainOptions& options) {
  const auto t0 = std::chrono::steady_clock::now();
  Trainer trainer(config, options.data);
  trainer.set_dump_dir(options.dump_dir);
  RunRecord record;
  record.config_hash = config.hash();
  for (std::size_t i = 0; i < config.iterations; ++i) {
    StepRecord r = trainer.step();
    if (config.eval_every > 0 && (i + 1) % config.eval_every == 0 && i + 1 < config.iterations)
      r.eval_miou = evaluate(trainer.student(), config.perturbation, trainer.data().eval).mean;
    if (options.on_step) options.on_step(r);
    record.steps.push_back(r);
  }
  SegModel student = trainer.student().clone(false);
  round_to_float(student);
  std::optional<SegModel> teacher;
  if (trainer.teacher()) {
    teacher = trainer.teacher()->clone(false);
    round_to_float(*teacher);
  }
  record.final_eval = evaluate(student, config.perturbation, trainer.data().eval);
  if (!record.steps.empty()) record.steps.back().eval_miou = record.final_eval.mean;
  record.wall_seconds = seconds_since(t0);
  return {config, std::move(student), std::move(teacher), std::move(record)};
}

}  // namespace xda
