#include "xda/selftest.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <random>
#include <sstream>

#include "xda/attention.hpp"
#include "xda/segnet.hpp"
#include "xda/trainer.hpp"
#include "xda/uda.hpp"

namespace xda {

namespace {

// Collects failures; a suite passes when nothing was recorded.
class Report {
 public:
  void fail(const std::string& what) {
    if (++failures_ <= 5) os_ << (failures_ > 1 ? "; " : "") << what;
  }
  void expect(bool ok, const std::string& what) {
    if (!ok) fail(what);
  }
  void note(const std::string& what) { notes_ << (notes_.tellp() > 0 ? ", " : "") << what; }
  CheckOutcome finish(std::string name, std::chrono::steady_clock::time_point t0) const {
    CheckOutcome c;
    c.name = std::move(name);
    c.passed = failures_ == 0;
    c.detail = failures_ == 0 ? notes_.str() : std::to_string(failures_) + " failure(s): " + os_.str();
    c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return c;
  }

 private:
  std::size_t failures_ = 0;
  std::ostringstream os_, notes_;
};

std::string sci(Real v) {
  std::ostringstream os;
  os.precision(2);
  os << std::scientific << v;
  return os.str();
}

std::vector<Real> uniform(std::mt19937_64& rng, std::size_t n, Real lo = -1, Real hi = 1) {
  std::uniform_real_distribution<Real> d(lo, hi);
  std::vector<Real> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

Tensor param(std::mt19937_64& rng, Shape s, Real lo = -1, Real hi = 1) {
  const auto n = numel(s);
  return Tensor::parameter(std::move(s), uniform(rng, n, lo, hi));
}

Tensor constant(std::mt19937_64& rng, Shape s, Real lo = -1, Real hi = 1) {
  const auto n = numel(s);
  return Tensor::constant(std::move(s), uniform(rng, n, lo, hi));
}

std::vector<Real> prob_rows(std::mt19937_64& rng, std::size_t rows, std::size_t n) {
  auto v = uniform(rng, rows * n, 0.01, 1.0);
  for (std::size_t r = 0; r < rows; ++r) {
    Real z = 0;
    for (std::size_t j = 0; j < n; ++j) z += v[r * n + j];
    for (std::size_t j = 0; j < n; ++j) v[r * n + j] /= z;
  }
  return v;
}

AttentionWeights random_attention(std::mt19937_64& rng, std::size_t d, std::size_t c, std::size_t heads,
                                  bool trainable) {
  auto make = [&](Shape s) { return trainable ? param(rng, std::move(s)) : constant(rng, std::move(s)); };
  AttentionWeights w{make({d, c}), make({d, c}), make({d, c}), make({c, d}), heads};
  return w;
}

ModelConfig micro_config() {
  ModelConfig c;
  c.height = c.width = 8;
  c.patch = 4;
  c.embed = 8;
  c.layers = 1;
  c.heads = 2;
  c.classes = 3;
  c.mlp_ratio = 2;
  return c;
}

// Lifts weights off the small initialization so attention is far from uniform.
void jitter(SegModel& m, std::mt19937_64& rng, Real amplitude) {
  std::normal_distribution<Real> n(0.0, amplitude);
  for (auto& t : m.parameters())
    for (auto& v : t.mutable_data()) v += n(rng);
}

TrainConfig small_run() {
  TrainConfig c;
  c.model.height = c.model.width = 16;
  c.data.height = c.data.width = 16;
  c.splits = {6, 6, 3};
  c.iterations = 4;
  c.warmup = 1;
  c.tau = 0.26;
  return c;
}

Real grad_norm(const Tensor& t) {
  if (!t.has_grad()) return 0;
  Real s = 0;
  for (Real g : t.grad()) s += std::abs(g);
  return s;
}

template <class F>
CheckOutcome guarded(const std::string& name, F&& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Report r;
  try {
    body(r);
  } catch (const std::exception& e) {
    r.fail(std::string("exception: ") + e.what());
  }
  return r.finish(name, t0);
}

}  // namespace

CheckOutcome check_gradients() {
  return guarded("gradients", [](Report& rep) {
    std::mt19937_64 rng(21);
    struct Case {
      const char* name;
      std::vector<Tensor> inputs;
      ScalarFn fn;
    };
    const Tensor probe = constant(rng, {3, 4});
    const Tensor probe3 = constant(rng, {2, 3, 4});
    const Tensor p_fixed = Tensor::constant({3, 4}, prob_rows(rng, 3, 4));
    const Tensor resize_w = constant(rng, {5, 4, 2});
    std::vector<Real> onehot(12, 0.0);
    for (std::size_t r = 0; r < 3; ++r) onehot[r * 4 + (r * 3) % 4] = 1.0;
    onehot[8] = 0.0;  // row 2 ignored
    onehot[9] = 0.0;
    const Tensor ce_target = Tensor::constant({3, 4}, onehot);
    const Tensor ce_weight = Tensor::constant({3}, {0.5, 1.0, 0.25});

    std::vector<Case> cases;
    cases.push_back({"matmul", {param(rng, {3, 2}), param(rng, {2, 4})},
                     [&](auto in) { return sum(mul(matmul(in[0], in[1]), probe)); }});
    cases.push_back({"add/sub/mul/scale", {param(rng, {3, 4}), param(rng, {3, 4})}, [&](auto in) {
                       return sum(mul(sub(add(in[0], scale(in[1], 1.5)), mul(in[0], in[1])), probe));
                     }});
    cases.push_back({"add_rowvec", {param(rng, {3, 4}), param(rng, {4})},
                     [&](auto in) { return sum(mul(add_rowvec(in[0], in[1]), probe)); }});
    // Inputs kept away from the kink.
    std::vector<Real> relu_in = uniform(rng, 12, 0.1, 1.0);
    for (std::size_t i = 0; i < 12; i += 2) relu_in[i] = -relu_in[i];
    cases.push_back({"relu", {Tensor::parameter({3, 4}, relu_in)},
                     [&](auto in) { return sum(mul(relu(in[0]), probe)); }});
    cases.push_back({"transpose/reshape", {param(rng, {4, 3})},
                     [&](auto in) { return sum(mul(reshape(transpose(in[0]), {3, 4}), probe)); }});
    cases.push_back({"slice_cols/concat_cols", {param(rng, {3, 4})}, [&](auto in) {
                       const Tensor parts[] = {slice_cols(in[0], 2, 2), slice_cols(in[0], 0, 2)};
                       return sum(mul(concat_cols(parts), probe));
                     }});
    cases.push_back({"stack", {param(rng, {3, 4}), param(rng, {3, 4})}, [&](auto in) {
                       const Tensor parts[] = {in[0], in[1]};
                       return sum(mul(stack(parts), probe3));
                     }});
    cases.push_back({"gather", {param(rng, {12})}, [&](auto in) {
                       const std::size_t idx[] = {11, 0, 3, 3, 5, 7, 1, 2, 9, 9, 4, 6};
                       return sum(mul(gather(in[0], idx, {3, 4}), probe));
                     }});
    cases.push_back({"mean_rows", {param(rng, {3, 4})},
                     [&](auto in) { return sum(mul(add_rowvec(in[0], mean_rows(in[0])), probe)); }});
    cases.push_back({"layer_norm", {param(rng, {3, 4}), param(rng, {4}), param(rng, {4})},
                     [&](auto in) { return sum(mul(layer_norm(in[0], in[1], in[2]), probe)); }});
    cases.push_back({"softmax_rows", {param(rng, {3, 4}, -3, 3)},
                     [&](auto in) { return sum(mul(softmax_rows(in[0], 0.7), probe)); }});
    cases.push_back({"cross_entropy", {param(rng, {3, 4}, -2, 2)},
                     [&](auto in) { return cross_entropy(in[0], ce_target, ce_weight); }});
    cases.push_back({"kl_rows", {param(rng, {3, 4}, -2, 2)},
                     [&](auto in) { return sum(kl_rows(p_fixed, softmax_rows(in[0]))); }});
    cases.push_back({"bilinear_resize", {param(rng, {2, 3, 2})},
                     [&](auto in) { return sum(mul(bilinear_resize(in[0], 5, 4), resize_w)); }});
    cases.push_back({"sum/mean", {param(rng, {3, 4})},
                     [&](auto in) { return add(mean(mul(in[0], in[0])), scale(sum(in[0]), 0.3)); }});

    Real worst = 0;
    for (const auto& c : cases) {
      const auto r = grad_check(c.fn, c.inputs);
      worst = std::max(worst, r.max_rel_error);
      rep.expect(r.nan_coordinates == 0 && r.max_rel_error < 1e-5,
                 std::string(c.name) + " rel error " + sci(r.max_rel_error));
    }

    // stop_gradient: analytic gradient must match the graph with the branch frozen.
    {
      const Tensor x = param(rng, {3, 4});
      const Tensor frozen = x.detach();
      const ScalarFn f = [&](auto in) { return sum(mul(mul(in[0], stop_gradient(in[0])), probe)); };
      const ScalarFn severed = [&](auto in) { return sum(mul(mul(in[0], frozen), probe)); };
      const auto r = grad_check_against(f, severed, std::span<const Tensor>(&x, 1));
      worst = std::max(worst, r.max_rel_error);
      rep.expect(r.max_rel_error < 1e-5, "stop_gradient rel error " + sci(r.max_rel_error));
    }
    rep.note("ops max rel " + sci(worst));

    // Micro-model: self forward, cross forward and an attention KL, all parameters.
    const ModelConfig mc = micro_config();
    SegModel m(mc, 9);
    jitter(m, rng, 0.3);
    const Tensor img = constant(rng, {mc.height, mc.width, 3}, 0, 1);
    const Tensor other = constant(rng, {mc.height, mc.width, 3}, 0, 1);
    const std::size_t pixels = mc.height * mc.width;
    std::vector<Real> t(pixels * mc.classes, 0.0);
    for (std::size_t p = 0; p < pixels; ++p) t[p * mc.classes + rng() % mc.classes] = 1.0;
    const Tensor target = Tensor::constant({pixels, mc.classes}, t);
    const Tensor weight = Tensor::full({pixels}, 1.0);
    const Tensor sup = m.forward(other).maps[0].scores.detach();
    const ScalarFn model_fn = [&](std::span<const Tensor>) {
      const auto out = m.forward(img);
      const auto cross = m.forward_cross(out, other, false);
      const Tensor ce = cross_entropy(reshape(out.logits, {pixels, mc.classes}), target, weight);
      const Tensor ce2 = cross_entropy(reshape(cross.logits, {pixels, mc.classes}), target, weight);
      return add(add(ce, ce2), mean(kl_rows(sup, out.maps[0].scores)));
    };
    const auto params = m.parameters();
    const auto r = grad_check(model_fn, params);
    rep.expect(r.nan_coordinates == 0 && r.max_rel_error < 1e-4, "micro-model rel error " + sci(r.max_rel_error));
    rep.note("micro-model max rel " + sci(r.max_rel_error));
  });
}

CheckOutcome check_attention_invariants(std::size_t trials) {
  return guarded("attention invariants", [trials](Report& rep) {
    std::mt19937_64 rng(77);
    std::uniform_int_distribution<std::size_t> side(1, 4), heads_pick(1, 3), dpick(1, 4);
    Real worst_row = 0, worst_swap = 0;
    for (std::size_t trial = 0; trial < trials; ++trial) {
      const std::size_t gh = side(rng), gw = side(rng), n = gh * gw;
      const std::size_t heads = heads_pick(rng), c = heads * dpick(rng), d = dpick(rng) + 1;
      const auto w = random_attention(rng, d, c, heads, false);
      const Real spread = std::uniform_real_distribution<Real>(0.1, 8.0)(rng);
      const Tensor x = constant(rng, {n, d}, -spread, spread);
      const Tensor y = constant(rng, {n, d}, -spread, spread);
      AttentionPerturbation perturb;
      perturb.rng = &rng;
      perturb.noise = {gh, gw, gh, gw, 1.0};

      AttentionMap maps[4];
      switch (trial % 4) {
        case 0: maps[0] = self_attention(x, w).map; break;
        case 1: maps[0] = cross_domain_attention(x, y, w, trial % 8 == 1).map; break;
        case 2: maps[0] = self_attention(x, w, &perturb).map; break;
        default: maps[0] = cross_domain_attention(x, y, w, true, &perturb).map; break;
      }
      const AttentionMap& a = maps[0];
      for (std::size_t h = 0; h < a.heads(); ++h)
        for (std::size_t i = 0; i < a.queries(); ++i) {
          Real s = 0;
          for (std::size_t j = 0; j < a.keys(); ++j) {
            const Real v = a.scores.at((h * a.queries() + i) * a.keys() + j);
            if (!(v >= 0)) rep.fail("negative attention weight in trial " + std::to_string(trial));
            s += v;
          }
          worst_row = std::max(worst_row, std::abs(s - 1));
        }

      // Cross-attention of a stream with itself is self-attention.
      const auto self = self_attention(x, w);
      const auto swap = cross_domain_attention(x, x, w, trial % 2 == 0);
      for (std::size_t i = 0; i < self.output.size(); ++i)
        worst_swap = std::max(worst_swap, std::abs(self.output.at(i) - swap.output.at(i)));
      for (std::size_t i = 0; i < self.map.scores.size(); ++i)
        worst_swap = std::max(worst_swap, std::abs(self.map.scores.at(i) - swap.map.scores.at(i)));
    }
    rep.expect(worst_row <= 1e-6, "row sum deviation " + sci(worst_row));
    rep.expect(worst_swap <= 1e-10, "cross(x, x) vs self(x) deviation " + sci(worst_swap));

    // Same two properties through the full model, including the perturbed forward.
    const ModelConfig mc = micro_config();
    SegModel m(mc, 3);
    jitter(m, rng, 0.3);
    const Tensor img = constant(rng, {mc.height, mc.width, 3}, 0, 1);
    const auto plain = m.forward(img);
    const auto cross = m.forward_cross(img, img, true);
    for (std::size_t i = 0; i < plain.logits.size(); ++i)
      worst_swap = std::max(worst_swap, std::abs(plain.logits.at(i) - cross.logits.at(i)));
    rep.expect(worst_swap <= 1e-10, "model cross(x, x) vs forward(x) deviation " + sci(worst_swap));
    ForwardOptions noisy;
    noisy.perturbation = PerturbationMode::random;
    noisy.noise_h = noisy.noise_w = 1;
    noisy.rng = &rng;
    for (const auto& map : m.forward(img, noisy).maps)
      for (std::size_t r = 0; r < map.heads() * map.queries(); ++r) {
        Real s = 0;
        for (std::size_t j = 0; j < map.keys(); ++j) s += map.scores.at(r * map.keys() + j);
        worst_row = std::max(worst_row, std::abs(s - 1));
      }
    rep.expect(worst_row <= 1e-6, "perturbed model row sum deviation " + sci(worst_row));
    rep.note(std::to_string(trials) + " trials, row dev " + sci(worst_row) + ", swap dev " + sci(worst_swap));
  });
}

CheckOutcome check_stop_gradient() {
  return guarded("stop-gradient", [](Report& rep) {
    std::mt19937_64 rng(5);
    // Attention level: query features and query projection.
    for (bool stop : {true, false}) {
      const auto w = random_attention(rng, 4, 4, 2, true);
      const Tensor xq = param(rng, {5, 4});
      const Tensor xkv = param(rng, {5, 4});
      const Tensor probe = constant(rng, {5, 4});
      backward(sum(mul(cross_domain_attention(xq, xkv, w, stop).output, probe)));
      const Real gq = grad_norm(xq) + grad_norm(w.w_q);
      if (stop) {
        rep.expect(gq == 0.0, "attention query path gradient " + sci(gq) + " with stop");
        rep.expect(grad_norm(xkv) > 0, "attention kv path lost its gradient");
      } else {
        rep.expect(gq > 1e-8, "attention query path gradient vanished without stop");
      }
    }
    // Model level, in both swap directions: the query image and every query
    // projection are reachable only through the swapped-query path.
    const ModelConfig mc = micro_config();
    for (bool stop : {true, false}) {
      SegModel m(mc, 11);
      jitter(m, rng, 0.3);
      Tensor a = param(rng, {mc.height, mc.width, 3}, 0, 1);
      Tensor b = param(rng, {mc.height, mc.width, 3}, 0, 1);
      const Tensor probe = constant(rng, {mc.height, mc.width, mc.classes});
      for (int dir = 0; dir < 2; ++dir) {
        const Tensor& q_img = dir == 0 ? a : b;
        const Tensor& kv_img = dir == 0 ? b : a;
        m.zero_grad();
        a.zero_grad();
        b.zero_grad();
        const auto stream = m.forward(q_img);
        backward(sum(mul(m.forward_cross(stream, kv_img, stop).logits, probe)));
        Real gq = grad_norm(q_img);
        for (const auto& [name, t] : m.named_parameters())
          if (name.ends_with("attn.query")) gq += grad_norm(t);
        const std::string tag = std::string(dir == 0 ? "t2s" : "s2t") + (stop ? " with stop" : " without stop");
        if (stop) {
          rep.expect(gq == 0.0, tag + ": query path gradient " + sci(gq));
          rep.expect(grad_norm(kv_img) > 0, tag + ": key/value image gradient vanished");
        } else {
          rep.expect(gq > 1e-8, tag + ": query path gradient vanished");
        }
      }
    }
    rep.note("attention and model level, both directions");
  });
}

CheckOutcome check_loss_algebra() {
  return guarded("loss algebra", [](Report& rep) {
    // Recombination on logged runs.
    Real worst = 0;
    const LossToggles sets[] = {{true, true, true, true, true, true}, {true, true, false, true, true, false},
                                {true, false, true, false, false, true}};
    for (const auto& toggles : sets) {
      TrainConfig c = small_run();
      c.losses = toggles;
      c.lambda_attn = 0.7;
      for (const auto& s : train(c).record.steps) {
        const Real pred = loss_pred(s.l_s, s.l_t2s, s.l_t, s.l_s2t, toggles);
        const Real total = total_loss(s.l_pred, s.l_attn, toggles.attn ? c.lambda_attn : 0.0);
        worst = std::max({worst, std::abs(pred - s.l_pred), std::abs(total - s.total)});
        if (toggles == LossToggles{})
          worst = std::max(worst, std::abs(0.5 * (s.l_s + s.l_t2s) + 0.5 * (s.l_t + s.l_s2t) - s.l_pred));
      }
    }
    rep.expect(worst <= 1e-12, "recombination error " + sci(worst));
    rep.expect(loss_pred(1, 2, 3, 4) == 5.0 && total_loss(2.0, 0.5, 1) == 2.5 && total_loss(0.0, 0.0, 3) == 0.0,
               "scalar recombination");

    std::mt19937_64 rng(9);
    const std::size_t n = 6, heads = 2;
    auto random_maps = [&](std::size_t layers) {
      std::vector<AttentionMap> maps;
      for (std::size_t l = 0; l < layers; ++l)
        maps.push_back({Tensor::parameter({heads, n, n}, prob_rows(rng, heads * n, n)), l});
      return maps;
    };
    const auto ms = random_maps(2), mt = random_maps(2), student = random_maps(2);

    // Mixed maps: all-ones selects source rows, all-zeros target rows.
    const BinaryMask ones(n, 1), zeros(n, 0);
    const auto from_s = mix_attention_maps(ms, mt, ones), from_t = mix_attention_maps(ms, mt, zeros);
    for (std::size_t l = 0; l < 2; ++l) {
      rep.expect(std::equal(from_s[l].data().begin(), from_s[l].data().end(), ms[l].scores.data().begin()),
                 "all-ones mask must select source maps");
      rep.expect(std::equal(from_t[l].data().begin(), from_t[l].data().end(), mt[l].scores.data().begin()),
                 "all-zeros mask must select target maps");
    }
    // Valid mask: entry (j, k) is one exactly when tokens j and k share a side,
    // which makes it invariant under complementing the token mask.
    for (int trial = 0; trial < 50; ++trial) {
      BinaryMask tm(n), inv(n);
      for (std::size_t j = 0; j < n; ++j) inv[j] = 1 - (tm[j] = static_cast<std::uint8_t>(rng() & 1));
      const Tensor v = valid_mask(tm), vi = valid_mask(inv);
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t k = 0; k < n; ++k) {
          const Real e = v.at(j * n + k);
          if (e != (tm[j] == tm[k] ? 1.0 : 0.0) || e != vi.at(j * n + k)) {
            rep.fail("valid mask structure");
            break;
          }
        }
    }
    rep.expect(valid_mask(ones).data()[0] == 1.0, "full mask");

    // KL fixed point: identical maps give exactly zero under any mask.
    std::vector<Tensor> same;
    for (const auto& m : student) same.push_back(m.scores.detach());
    BinaryMask partial(n, 0);
    partial[1] = partial[4] = 1;
    for (const auto& mask : {ones, zeros, partial})
      rep.expect(loss_attn(student, same, valid_mask(mask)).item() == 0.0, "KL fixed point is not zero");
    std::vector<Tensor> other;
    for (const auto& m : ms) other.push_back(m.scores.detach());
    rep.expect(loss_attn(student, other, valid_mask(partial)).item() > 0, "differing maps give zero KL");

    // q = 0 removes the target terms entirely, value and gradient.
    const Tensor logits = param(rng, {4, 4, 3}, -2, 2);
    LabelMap labels(16);
    for (auto& l : labels) l = static_cast<int>(rng() % 3);
    const Tensor lt = loss_tgt(logits, labels, 0.0), ls2t = loss_s2t(logits, labels, 0.0);
    rep.expect(lt.item() == 0.0 && ls2t.item() == 0.0, "q = 0 must zero the target losses");
    backward(add(lt, ls2t));
    rep.expect(grad_norm(logits) == 0.0, "q = 0 must zero the target gradients");
    rep.note("recombination max error " + sci(worst));
  });
}

CheckOutcome check_teacher_algebra() {
  return guarded("teacher algebra", [](Report& rep) {
    std::mt19937_64 rng(4);
    const ModelConfig mc = micro_config();
    SegModel student(mc, 1);
    jitter(student, rng, 0.3);
    auto values = [](const SegModel& m) {
      std::vector<Real> v;
      for (const auto& t : m.parameters()) v.insert(v.end(), t.data().begin(), t.data().end());
      return v;
    };
    SegModel teacher = SegModel(mc, 2).clone(false);
    const auto before = values(teacher);
    ema_update(teacher, student, 1.0);
    rep.expect(values(teacher) == before, "alpha = 1 must leave the teacher unchanged");
    ema_update(teacher, student, 0.0);
    rep.expect(values(teacher) == values(student), "alpha = 0 must copy the student");
    SegModel half = SegModel(mc, 2).clone(false);
    ema_update(half, student, 0.5);
    const auto hv = values(half), sv = values(student);
    for (std::size_t i = 0; i < hv.size(); ++i)
      if (std::abs(hv[i] - (0.5 * before[i] + 0.5 * sv[i])) > 1e-15) {
        rep.fail("alpha = 0.5 is not the midpoint");
        break;
      }

    // Every toggle combination that uses a teacher, with the stop on and off.
    TrainConfig base = small_run();
    const auto data = make_dataset(base);
    std::size_t configs = 0;
    for (unsigned bits = 0; bits < 64; ++bits) {
      TrainConfig c = base;
      c.losses = {bool(bits & 1), bool(bits & 2), bool(bits & 4), bool(bits & 8), bool(bits & 16), bool(bits & 32)};
      if (!c.uses_teacher() || !(c.losses.sup || c.losses.tgt || c.losses.t2s || c.losses.s2t)) continue;
      ++configs;
      Trainer t(c, data);
      for (int step = 0; step < 2; ++step) {
        const auto batch = sample_batch(t.rng(), c.batch_size, data->source.size(), data->target.size());
        backward(t.compute_losses(batch).total);
        for (const auto& p : t.teacher()->parameters())
          if (p.requires_grad() || grad_norm(p) != 0.0) {
            rep.fail("teacher gradient under toggle set " + std::to_string(bits));
            break;
          }
        t.step();
      }
    }
    rep.note(std::to_string(configs) + " toggle sets");
  });
}

std::vector<CheckOutcome> run_selftest() {
  return {check_gradients(), check_attention_invariants(), check_stop_gradient(), check_loss_algebra(),
          check_teacher_algebra()};
}

}  // namespace xda
