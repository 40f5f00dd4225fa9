#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "test_util.hpp"
#include "xda/attention.hpp"
#include "xda/errors.hpp"

using namespace xda;
using xda::testing::random_const;
using xda::testing::random_param;

namespace {

using Mat = std::vector<std::vector<Real>>;

Mat to_mat(const Tensor& t) {
  Mat m(t.dim(0), std::vector<Real>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t.at(i * t.dim(1) + j);
  return m;
}

Mat mat_mul(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<Real>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j)
      for (std::size_t k = 0; k < b.size(); ++k) c[i][j] += a[i][k] * b[k][j];
  return c;
}

struct ScalarAttention {
  Mat y;
  std::vector<Mat> maps;
};

// Textbook multi-head attention with explicit loops.
ScalarAttention scalar_attention(const Mat& xq, const Mat& xkv, const AttentionWeights& w) {
  const Mat q = mat_mul(xq, to_mat(w.w_q));
  const Mat k = mat_mul(xkv, to_mat(w.w_k));
  const Mat v = mat_mul(xkv, to_mat(w.w_v));
  const std::size_t dh = w.head_dim();
  ScalarAttention out;
  Mat concat(xq.size(), std::vector<Real>(w.attn_dim(), 0.0));
  for (std::size_t h = 0; h < w.heads; ++h) {
    Mat a(xq.size(), std::vector<Real>(xkv.size()));
    for (std::size_t i = 0; i < xq.size(); ++i) {
      Real z = 0;
      for (std::size_t j = 0; j < xkv.size(); ++j) {
        Real dot = 0;
        for (std::size_t c = 0; c < dh; ++c) dot += q[i][h * dh + c] * k[j][h * dh + c];
        a[i][j] = std::exp(dot / std::sqrt(static_cast<Real>(dh)));
        z += a[i][j];
      }
      for (auto& e : a[i]) e /= z;
      for (std::size_t c = 0; c < dh; ++c)
        for (std::size_t j = 0; j < xkv.size(); ++j) concat[i][h * dh + c] += a[i][j] * v[j][h * dh + c];
    }
    out.maps.push_back(a);
  }
  out.y = mat_mul(concat, to_mat(w.w_o));
  return out;
}

AttentionWeights random_weights(std::mt19937_64& rng, std::size_t d, std::size_t c, std::size_t heads,
                                bool trainable = false) {
  auto make = [&](Shape s) { return trainable ? random_param(rng, s) : random_const(rng, s); };
  return {make({d, c}), make({d, c}), make({d, c}), make({c, d}), heads};
}

void check_row_stochastic(const AttentionMap& m, Real tol) {
  const auto s = m.scores.data();
  const std::size_t n = m.keys();
  for (std::size_t r = 0; r < m.heads() * m.queries(); ++r) {
    Real total = 0;
    for (std::size_t j = 0; j < n; ++j) {
      CHECK(s[r * n + j] >= 0.0);
      CHECK(s[r * n + j] <= 1.0);
      total += s[r * n + j];
    }
    CHECK(std::abs(total - 1.0) <= tol);
  }
}

}  // namespace

TEST_CASE("self_attention with a single token") {
  std::mt19937_64 rng(1);
  const auto w = random_weights(rng, 4, 4, 2);
  const Tensor x = random_const(rng, {1, 4});
  const auto r = self_attention(x, w);
  CHECK(r.map.scores.shape() == Shape{2, 1, 1});
  for (Real v : r.map.scores.data()) CHECK(v == 1.0);
  const Mat expected = mat_mul(mat_mul(to_mat(x), to_mat(w.w_v)), to_mat(w.w_o));
  for (std::size_t j = 0; j < 4; ++j) CHECK(r.output.at(j) == doctest::Approx(expected[0][j]).epsilon(1e-12));
}

TEST_CASE("zero queries give uniform attention") {
  std::mt19937_64 rng(2);
  auto w = random_weights(rng, 3, 4, 2);
  w.w_q = Tensor::zeros({3, 4});
  const auto r = self_attention(random_const(rng, {5, 3}), w);
  for (Real v : r.map.scores.data()) CHECK(v == doctest::Approx(0.2).epsilon(1e-14));
}

TEST_CASE("self_attention matches the scalar oracle") {
  std::mt19937_64 rng(3);
  const auto w = random_weights(rng, 2, 2, 1);
  const Tensor x = random_const(rng, {3, 2});
  const auto r = self_attention(x, w);
  const auto oracle = scalar_attention(to_mat(x), to_mat(x), w);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(r.map.scores.at(i * 3 + j) - oracle.maps[0][i][j]) < 1e-10);
    for (std::size_t j = 0; j < 2; ++j) CHECK(std::abs(r.output.at(i * 2 + j) - oracle.y[i][j]) < 1e-10);
  }

  // multi-head, wider case
  const auto w2 = random_weights(rng, 6, 8, 4);
  const Tensor x2 = random_const(rng, {7, 6});
  const auto r2 = self_attention(x2, w2);
  const auto o2 = scalar_attention(to_mat(x2), to_mat(x2), w2);
  for (std::size_t h = 0; h < 4; ++h)
    for (std::size_t i = 0; i < 7; ++i)
      for (std::size_t j = 0; j < 7; ++j)
        CHECK(std::abs(r2.map.scores.at((h * 7 + i) * 7 + j) - o2.maps[h][i][j]) < 1e-10);
}

TEST_CASE("attention shape errors") {
  std::mt19937_64 rng(4);
  const auto w = random_weights(rng, 4, 4, 2);
  CHECK_THROWS_AS(self_attention(random_const(rng, {3, 5}), w), DimensionError);
  CHECK_THROWS_AS(cross_domain_attention(random_const(rng, {3, 4}), random_const(rng, {4, 4}), w, true),
                  DimensionError);
  auto bad = w;
  bad.heads = 3;
  CHECK_THROWS_AS(bad.validate(), DimensionError);
  CHECK_NOTHROW(w.validate());
}

TEST_CASE("cross_domain_attention") {
  std::mt19937_64 rng(5);
  const auto w = random_weights(rng, 4, 4, 2);
  const Tensor x = random_const(rng, {6, 4});
  const auto self = self_attention(x, w);
  const auto cross = cross_domain_attention(x, x, w, true);
  for (std::size_t i = 0; i < self.output.size(); ++i) CHECK(std::abs(self.output.at(i) - cross.output.at(i)) <= 1e-10);
  for (std::size_t i = 0; i < self.map.scores.size(); ++i)
    CHECK(std::abs(self.map.scores.at(i) - cross.map.scores.at(i)) <= 1e-10);

  // two-token pair: Attention(Q_t, K_s, V_s)
  const auto w1 = random_weights(rng, 2, 2, 1);
  const Tensor xt = random_const(rng, {2, 2});
  const Tensor xs = random_const(rng, {2, 2});
  const auto r = cross_domain_attention(xt, xs, w1, true);
  const auto oracle = scalar_attention(to_mat(xt), to_mat(xs), w1);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      CHECK(std::abs(r.map.scores.at(i * 2 + j) - oracle.maps[0][i][j]) < 1e-10);
      CHECK(std::abs(r.output.at(i * 2 + j) - oracle.y[i][j]) < 1e-10);
    }
}

TEST_CASE("stopping the query gradient zeroes the query Jacobian") {
  std::mt19937_64 rng(6);
  const auto w = random_weights(rng, 4, 4, 2, true);
  Tensor xq = random_param(rng, {5, 4});
  Tensor xkv = random_param(rng, {5, 4});
  const Tensor probe = random_const(rng, {5, 4});

  backward(sum(mul(cross_domain_attention(xq, xkv, w, true).output, probe)));
  for (Real g : xq.grad()) CHECK(g == 0.0);
  CHECK_FALSE(xq.has_grad());
  Real kv_norm = 0;
  for (Real g : xkv.grad()) kv_norm += std::abs(g);
  CHECK(kv_norm > 0);

  xq.zero_grad();
  backward(sum(mul(cross_domain_attention(xq, xkv, w, false).output, probe)));
  Real q_norm = 0;
  for (Real g : xq.grad()) q_norm += std::abs(g);
  CHECK(q_norm > 1e-6);
}

TEST_CASE("stopping the query gradient also freezes the query projection") {
  std::mt19937_64 rng(16);
  const auto w = random_weights(rng, 4, 4, 2, true);
  const Tensor xq = random_param(rng, {5, 4});
  const Tensor xkv = random_param(rng, {5, 4});
  const Tensor probe = random_const(rng, {5, 4});
  const auto norm = [](const Tensor& t) {
    Real s = 0;
    for (Real g : t.grad()) s += std::abs(g);
    return s;
  };

  backward(sum(mul(cross_domain_attention(xq, xkv, w, true).output, probe)));
  CHECK(norm(w.w_q) == 0.0);
  CHECK(norm(w.w_k) > 0);
  CHECK(norm(w.w_v) > 0);

  for (auto t : {w.w_q, w.w_k, w.w_v, w.w_o}) t.zero_grad();
  backward(sum(mul(cross_domain_attention(xq, xkv, w, false).output, probe)));
  CHECK(norm(w.w_q) > 1e-6);
}

TEST_CASE("attention gradients match finite differences") {
  std::mt19937_64 rng(7);
  const auto w = random_weights(rng, 4, 4, 2, true);
  const Tensor xq = random_param(rng, {3, 4});
  const Tensor xkv = random_param(rng, {3, 4});
  const Tensor probe = random_const(rng, {3, 4});
  const Tensor target = Tensor::constant({2, 3, 3}, xda::testing::random_prob_rows(rng, 6, 3));
  const ScalarFn f = [&](std::span<const Tensor> in) {
    const AttentionWeights ww{in[2], in[3], in[4], in[5], 2};
    const auto r = cross_domain_attention(in[0], in[1], ww, false);
    return add(sum(mul(r.output, probe)), sum(kl_rows(target, r.map.scores)));
  };
  const Tensor inputs[] = {xq, xkv, w.w_q, w.w_k, w.w_v, w.w_o};
  const auto r = grad_check(f, inputs);
  CHECK(r.nan_coordinates == 0);
  CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("random_perturbed_attention") {
  std::mt19937_64 rng(8);
  const auto w = random_weights(rng, 4, 4, 2);
  const auto base = self_attention(random_const(rng, {16, 4}), w).map;
  NoiseSpec spec{4, 4, 2, 2, 0.0};
  const auto flat = random_perturbed_attention(base, spec, rng);
  for (std::size_t i = 0; i < base.scores.size(); ++i)
    CHECK(flat.scores.at(i) == doctest::Approx((base.scores.at(i) + 1.0 / 16) / 2).epsilon(1e-14));

  spec.stddev = 1.0;
  std::mt19937_64 a(42), b(42);
  const auto pa = random_perturbed_attention(base, spec, a);
  const auto pb = random_perturbed_attention(base, spec, b);
  CHECK(std::equal(pa.scores.data().begin(), pa.scores.data().end(), pb.scores.data().begin()));
  check_row_stochastic(pa, 1e-6);

  spec.noise_h = 3;
  CHECK_THROWS_AS(random_perturbed_attention(base, spec, rng), DimensionError);
}

TEST_CASE("uniform_broadcast") {
  const Tensor c = Tensor::full({4, 3}, 0.3);
  const Tensor uc = uniform_broadcast(c);
  for (Real v : uc.data()) CHECK(v == doctest::Approx(0.3).epsilon(1e-15));

  const Tensor y = uniform_broadcast(Tensor::constant({2, 1}, {2.0, 0.0}));
  CHECK(y.at(0) == 1.5);
  CHECK(y.at(1) == 0.5);

  std::mt19937_64 rng(9);
  const Tensor r = random_const(rng, {6, 3});
  const Tensor u = uniform_broadcast(r);
  const Tensor m_in = mean_rows(r), m_out = mean_rows(u);
  for (std::size_t j = 0; j < 3; ++j) CHECK(m_in.at(j) == doctest::Approx(m_out.at(j)).epsilon(1e-14));
}

TEST_CASE("attention maps stay row-stochastic") {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t heads = 1 + rng() % 3;
    const std::size_t d = 2 * (1 + rng() % 3), c = heads * (1 + rng() % 3);
    const auto w = random_weights(rng, d, c, heads);
    const Tensor xq = random_const(rng, {9, d}, -5, 5);
    const Tensor xkv = random_const(rng, {9, d}, -5, 5);
    check_row_stochastic(self_attention(xq, w).map, 1e-6);
    check_row_stochastic(cross_domain_attention(xq, xkv, w, true).map, 1e-6);
    AttentionPerturbation p{{3, 3, 1, 1, 1.0}, &rng};
    check_row_stochastic(self_attention(xq, w, &p).map, 1e-6);
  }
}

TEST_CASE("permuting keys and values permutes map columns") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto w = random_weights(rng, 4, 4, 2);
    const std::size_t n = 6;
    const Tensor xq = random_const(rng, {n, 4});
    const Tensor xkv = random_const(rng, {n, 4});
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < 4; ++j) idx.push_back(perm[i] * 4 + j);
    const Tensor permuted = gather(xkv, idx, {n, 4});
    const auto a = cross_domain_attention(xq, xkv, w, true);
    const auto b = cross_domain_attention(xq, permuted, w, true);
    const auto oracle = scalar_attention(to_mat(xq), to_mat(permuted), w);
    for (std::size_t i = 0; i < a.output.size(); ++i) CHECK(std::abs(a.output.at(i) - b.output.at(i)) < 1e-10);
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t q = 0; q < n; ++q)
        for (std::size_t k = 0; k < n; ++k) {
          CHECK(std::abs(b.map.scores.at((h * n + q) * n + k) - a.map.scores.at((h * n + q) * n + perm[k])) < 1e-12);
          CHECK(std::abs(b.map.scores.at((h * n + q) * n + k) - oracle.maps[h][q][k]) < 1e-10);
        }
  }
}
