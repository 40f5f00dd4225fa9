#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "xda/checkpoint.hpp"
#include "xda/errors.hpp"
#include "xda/trainer.hpp"

using namespace xda;

namespace {

TrainConfig tiny() {
  TrainConfig c;
  c.model.height = c.model.width = 16;
  c.data.height = c.data.width = 16;
  c.splits = {6, 6, 3};
  c.iterations = 4;
  c.warmup = 1;
  // Low enough that an untrained teacher yields confident pixels.
  c.tau = 0.26;
  return c;
}

LossToggles only(bool sup, bool tgt, bool t2s, bool s2t, bool attn) { return {sup, tgt, t2s, s2t, attn, true}; }

std::vector<std::vector<Real>> grads(const SegModel& m) {
  std::vector<std::vector<Real>> out;
  for (const auto& t : m.parameters()) out.push_back(t.grad());
  return out;
}

std::vector<std::vector<Real>> values(const SegModel& m) {
  std::vector<std::vector<Real>> out;
  for (const auto& t : m.parameters()) out.emplace_back(t.data().begin(), t.data().end());
  return out;
}

Real abs_sum(const std::vector<std::vector<Real>>& g) {
  Real s = 0;
  for (const auto& v : g)
    for (Real x : v) s += std::abs(x);
  return s;
}

}  // namespace

TEST_CASE("learning rate schedule") {
  TrainConfig c = tiny();
  c.iterations = 110;
  c.warmup = 10;
  CHECK(lr_scale(c, 0) == doctest::Approx(0.1));
  CHECK(lr_scale(c, 9) == doctest::Approx(1.0));
  CHECK(lr_scale(c, 10) == doctest::Approx(1.0));
  CHECK(lr_scale(c, 60) == doctest::Approx(0.5));
  c.poly_power = 2;
  CHECK(lr_scale(c, 60) == doctest::Approx(0.25));
}

TEST_CASE("adamw first step moves each weight by lr against its gradient sign") {
  TrainConfig c = tiny();
  c.weight_decay = 0;
  Tensor enc = Tensor::parameter({2}, {1.0, -1.0});
  Tensor dec = Tensor::parameter({2}, {0.5, 0.5});
  AdamW opt({{"blocks.0.x", enc}, {"decoder.b", dec}}, c);
  backward(sum(mul(add(enc, dec), Tensor::constant({2}, {3.0, -0.01}))));
  opt.step(1.0);
  // Bias-corrected first step is lr * g / (|g| + eps).
  CHECK(enc.at(0) == doctest::Approx(1.0 - c.encoder_lr).epsilon(1e-9));
  CHECK(enc.at(1) == doctest::Approx(-1.0 + c.encoder_lr).epsilon(1e-9));
  CHECK(dec.at(0) == doctest::Approx(0.5 - c.lr).epsilon(1e-9));
  CHECK(dec.at(1) == doctest::Approx(0.5 + c.lr * 0.01 / (0.01 + 1e-8)).epsilon(1e-9));
}

TEST_CASE("adamw decays matrices only") {
  TrainConfig c = tiny();
  c.weight_decay = 0.5;
  Tensor w = Tensor::parameter({1, 1}, {2.0});
  Tensor b = Tensor::parameter({1}, {2.0});
  AdamW opt({{"decoder.w", w}, {"decoder.b", b}}, c);
  backward(add(sum(scale(w, 0.0)), sum(scale(b, 0.0))));
  opt.step(1.0);
  CHECK(w.at(0) == doctest::Approx(2.0 - c.lr * 0.5 * 2.0));
  CHECK(b.at(0) == 2.0);
}

TEST_CASE("source-only training equals a plain cross-entropy loop") {
  TrainConfig c = tiny();
  c.losses = only(true, false, false, false, false);
  const auto data = make_dataset(c);
  const TrainResult r = train(c, {data, "nan_dump", {}});

  SegModel m(c.model, c.seed);
  AdamW opt(m.named_parameters(), c);
  std::mt19937_64 rng(c.seed ^ kTrainStream);
  const std::size_t pixels = c.model.height * c.model.width, classes = c.model.classes;
  for (std::size_t i = 0; i < c.iterations; ++i) {
    const auto batch = sample_batch(rng, c.batch_size, data->source.size(), data->target.size());
    Tensor acc;
    for (const auto& item : batch) {
      const Scene& s = data->source[item.source];
      std::vector<Real> target(pixels * classes, 0.0);
      for (std::size_t p = 0; p < pixels; ++p) target[p * classes + static_cast<std::size_t>(s.label[p])] = 1.0;
      const Tensor ce = cross_entropy(reshape(m.forward(s.image).logits, {pixels, classes}),
                                      Tensor::constant({pixels, classes}, target), Tensor::full({pixels}, 1.0));
      acc = acc.defined() ? add(acc, ce) : ce;
    }
    const Tensor loss = scale(acc, 1.0 / static_cast<Real>(batch.size()));
    CHECK(loss.item() == r.record.steps[i].l_s);
    CHECK(loss.item() == r.record.steps[i].total);
    CHECK(r.record.steps[i].l_t == 0.0);
    CHECK(r.record.steps[i].l_attn == 0.0);
    m.zero_grad();
    backward(loss);
    opt.step(lr_scale(c, i));
  }
  round_to_float(m);
  CHECK(values(m) == values(r.student));
  CHECK_FALSE(r.teacher.has_value());
}

TEST_CASE("logged totals recombine from their components") {
  const LossToggles settings[] = {only(true, true, true, true, true), only(true, true, false, false, true),
                                  only(true, false, true, false, false), only(false, true, false, true, true)};
  for (const auto& toggles : settings) {
    TrainConfig c = tiny();
    c.losses = toggles;
    c.lambda_attn = 2.5;
    const TrainResult r = train(c);
    for (const auto& s : r.record.steps) {
      CHECK(std::abs(s.l_pred - loss_pred(s.l_s, s.l_t2s, s.l_t, s.l_s2t, toggles)) < 1e-12);
      CHECK(std::abs(s.total - (s.l_pred + (toggles.attn ? 2.5 * s.l_attn : 0.0))) < 1e-12);
      CHECK(s.l_attn >= 0.0);
    }
  }
}

TEST_CASE("metrics csv round trip") {
  TrainConfig c = tiny();
  c.eval_every = 2;
  const TrainResult r = train(c);
  const auto path = std::filesystem::temp_directory_path() / "xda_metrics_test.csv";
  write_metrics_csv(path, r.record);
  const auto back = read_metrics_csv(path);
  REQUIRE(back.size() == r.record.steps.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    const auto& a = r.record.steps[i];
    const auto& b = back[i];
    CHECK(a.step == b.step);
    CHECK(a.l_s == b.l_s);
    CHECK(a.l_attn == b.l_attn);
    CHECK(a.total == b.total);
    CHECK(a.q == b.q);
    CHECK(a.lr == b.lr);
    CHECK(a.eval_miou == b.eval_miou);
  }
  CHECK(back[1].eval_miou.has_value());
  CHECK_FALSE(back[0].eval_miou.has_value());
  std::filesystem::remove(path);
}

TEST_CASE("same config and seed replay exactly") {
  TrainConfig c = tiny();
  const TrainResult a = train(c);
  const TrainResult b = train(c);
  CHECK(same_trace(a.record, b.record));
  CHECK(values(a.student) == values(b.student));
  CHECK(values(*a.teacher) == values(*b.teacher));
  c.seed = 1;
  const TrainResult other = train(c);
  CHECK_FALSE(same_trace(a.record, other.record));
}

TEST_CASE("disabling a loss zeroes its component and removes exactly its gradient") {
  TrainConfig all = tiny();
  all.lambda_attn = 0.7;
  const auto data = make_dataset(all);
  for (int dropped = 0; dropped < 5; ++dropped) {
    CAPTURE(dropped);
    TrainConfig off = all;
    bool* flags[] = {&off.losses.sup, &off.losses.tgt, &off.losses.t2s, &off.losses.s2t, &off.losses.attn};
    *flags[dropped] = false;

    Trainer a(all, data), b(off, data);
    const auto batch = sample_batch(a.rng(), all.batch_size, data->source.size(), data->target.size());
    sample_batch(b.rng(), all.batch_size, data->source.size(), data->target.size());
    const StepLosses la = a.compute_losses(batch);
    const StepLosses lb = b.compute_losses(batch);

    const Tensor* parts_b[] = {&lb.l_s, &lb.l_t, &lb.l_t2s, &lb.l_s2t, &lb.l_attn};
    CHECK(parts_b[dropped]->item() == 0.0);
    const Tensor* parts_a[] = {&la.l_s, &la.l_t, &la.l_t2s, &la.l_s2t, &la.l_attn};
    CHECK(parts_a[dropped]->item() > 0.0);

    // Reassemble b's objective from a's graph; gradients must coincide.
    const Tensor rebuilt = total_loss(loss_pred(la.l_s, la.l_t2s, la.l_t, la.l_s2t, off.losses), la.l_attn,
                                      off.losses.attn ? off.lambda_attn : 0.0);
    CHECK(std::abs(rebuilt.item() - lb.total.item()) < 1e-12);
    a.student().zero_grad();
    backward(rebuilt);
    b.student().zero_grad();
    backward(lb.total);
    const auto ga = grads(a.student()), gb = grads(b.student());
    REQUIRE(ga.size() == gb.size());
    Real diff = 0;
    for (std::size_t i = 0; i < ga.size(); ++i)
      for (std::size_t k = 0; k < ga[i].size(); ++k) diff = std::max(diff, std::abs(ga[i][k] - gb[i][k]));
    CHECK(diff < 1e-12);

    // And the full objective differs from it by a nonzero gradient.
    a.student().zero_grad();
    Trainer fresh(all, data);
    sample_batch(fresh.rng(), all.batch_size, data->source.size(), data->target.size());
    backward(fresh.compute_losses(batch).total);
    const auto gf = grads(fresh.student());
    Real delta = 0;
    for (std::size_t i = 0; i < gf.size(); ++i)
      for (std::size_t k = 0; k < gf[i].size(); ++k) delta += std::abs(gf[i][k] - gb[i][k]);
    CHECK(delta > 1e-9);
  }
}

TEST_CASE("a zero-weight attention term leaves the update unchanged") {
  TrainConfig with = tiny();
  with.losses = only(true, false, false, false, true);
  with.lambda_attn = 0.0;
  TrainConfig without = tiny();
  without.losses = only(true, false, false, false, false);
  const auto data = make_dataset(with);
  Trainer a(with, data), b(without, data);
  a.step();
  b.step();
  CHECK(values(a.student()) == values(b.student()));
  CHECK(abs_sum(grads(a.student())) > 0);
}

TEST_CASE("teacher tracks the student through the warm-started moving average") {
  TrainConfig c = tiny();
  c.losses = only(true, true, false, false, false);
  Trainer t(c);
  t.step();
  // First update uses alpha_eff = 0, a plain copy.
  CHECK(values(*t.teacher()) == values(t.student()));
  t.step();
  CHECK(values(*t.teacher()) != values(t.student()));
}

TEST_CASE("upper-bound mode trains on labeled target scenes") {
  TrainConfig c = tiny();
  c.target_labels = true;
  const auto d = make_dataset(c);
  REQUIRE(d->source.size() == d->target.size());
  for (std::size_t i = 0; i < d->source.size(); ++i) {
    CHECK(d->source[i].domain == Domain::target);
    CHECK(d->source[i].seed == d->target[i].seed);
  }
}

TEST_CASE("non-finite loss aborts with a dump of the batch") {
  TrainConfig c = tiny();
  c.losses = only(true, false, false, false, false);
  c.lr = 1e300;
  c.encoder_lr = 1e300;
  c.adam_eps = 0;
  const auto dir = std::filesystem::temp_directory_path() / "xda_nan_dump_test";
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(train(c, {nullptr, dir, {}}), NumericError);
  CHECK(std::filesystem::exists(dir / "batch.txt"));
  CHECK(std::filesystem::exists(dir / "source_0.ppm"));
  std::filesystem::remove_all(dir);
}
