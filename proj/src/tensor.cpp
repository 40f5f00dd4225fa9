#include "xda/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "xda/errors.hpp"

namespace xda {

namespace {

std::atomic<std::uint64_t> g_sequence{0};

std::shared_ptr<Node> make_node(Shape shape, std::vector<Real> data, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  node->seq = g_sequence.fetch_add(1, std::memory_order_relaxed);
  return node;
}

// Creates an op result; parents and backward are kept only when some parent
// needs a gradient.
Tensor make_result(Shape shape, std::vector<Real> data,
                   std::initializer_list<const Tensor*> parents,
                   std::function<void(Node&)> backward_fn) {
  bool needs = false;
  for (const Tensor* p : parents) needs = needs || p->requires_grad();
  auto node = make_node(std::move(shape), std::move(data), needs);
  if (needs) {
    for (const Tensor* p : parents) node->parents.push_back(p->node());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_rank(const Tensor& x, std::size_t rank, const char* op) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(x.shape()));
  }
}

std::size_t trailing(const Tensor& x) { return x.rank() == 0 ? 1 : x.shape().back(); }

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

void Node::accumulate(std::size_t i, Real g) { ensure_grad()[i] += g; }

std::vector<Real>& Node::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

Tensor::Tensor() = default;
Tensor::Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

Tensor Tensor::constant(Shape shape, std::vector<Real> data) {
  if (numel(shape) != data.size()) {
    throw DimensionError("tensor: shape " + shape_str(shape) + " does not hold " +
                         std::to_string(data.size()) + " values");
  }
  return Tensor(make_node(std::move(shape), std::move(data), false));
}

Tensor Tensor::parameter(Shape shape, std::vector<Real> data) {
  Tensor t = constant(std::move(shape), std::move(data));
  t.node_->requires_grad = true;
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, Real value, bool requires_grad) {
  const std::size_t n = numel(shape);
  return Tensor(make_node(std::move(shape), std::vector<Real>(n, value), requires_grad));
}

Tensor Tensor::scalar(Real value) { return constant({}, {value}); }

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::dim(std::size_t axis) const { return node_->shape.at(axis); }
std::size_t Tensor::rank() const { return node_->shape.size(); }
std::size_t Tensor::size() const { return node_->data.size(); }
std::span<const Real> Tensor::data() const { return node_->data; }
std::span<Real> Tensor::mutable_data() { return node_->data; }
Real Tensor::at(std::size_t flat_index) const { return node_->data.at(flat_index); }

Real Tensor::item() const {
  if (size() != 1) throw DimensionError("item: tensor " + shape_str(shape()) + " is not a scalar");
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::has_grad() const { return !node_->grad.empty(); }

std::vector<Real> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<Real>(node_->data.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const { return Tensor(make_node(shape(), node_->data, false)); }

Tensor Tensor::clone(bool requires_grad) const {
  return Tensor(make_node(shape(), node_->data, requires_grad));
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<Real> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<Real> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto& p = self.parents[k];
      if (!p->requires_grad) continue;
      const Real sign = k == 0 ? 1.0 : -1.0;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<Real> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.data[i];
    }
  });
}

Tensor scale(const Tensor& a, Real s) {
  std::vector<Real> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  return make_result(a.shape(), std::move(out), {&a}, [s](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  const std::size_t n = trailing(x);
  if (v.size() != n || x.rank() == 0) {
    throw DimensionError("add_rowvec: vector " + shape_str(v.shape()) + " does not match rows of " +
                         shape_str(x.shape()));
  }
  std::vector<Real> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += v.data()[i % n];
  return make_result(x.shape(), std::move(out), {&x, &v}, [n](Node& self) {
    Node& px = *self.parents[0];
    Node& pv = *self.parents[1];
    if (px.requires_grad) {
      auto& g = px.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pv.requires_grad) {
      auto& g = pv.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i];
    }
  });
}

Tensor relu(const Tensor& x) {
  std::vector<Real> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] > 0 ? x.data()[i] : 0.0;
  return make_result(x.shape(), std::move(out), {&x}, [](Node& self) {
    Node& p = *self.parents[0];
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (p.data[i] > 0) g[i] += self.grad[i];
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<Real> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), {&x}, [](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor transpose(const Tensor& x) {
  require_rank(x, 2, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<Real> out(x.size());
  const auto d = x.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = d[i * c + j];
  return make_result({c, r}, std::move(out), {&x}, [r, c](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
  require_rank(x, 2, "slice_cols");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (start + count > c) {
    throw DimensionError("slice_cols: columns [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of " + shape_str(x.shape()));
  }
  std::vector<Real> out(r * count);
  const auto d = x.data();
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(d.begin() + i * c + start, count, out.begin() + i * count);
  return make_result({r, count}, std::move(out), {&x}, [r, c, start, count](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < count; ++j) g[i * c + start + j] += self.grad[i * count + j];
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t r = parts[0].dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  bool needs = false;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.dim(0) != r) throw DimensionError("concat_cols: row mismatch " + shape_str(p.shape()));
    widths.push_back(p.dim(1));
    total += p.dim(1);
    needs = needs || p.requires_grad();
  }
  std::vector<Real> out(r * total);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(p.data().begin() + i * w, w, out.begin() + i * total + offset);
    offset += w;
  }
  auto node = make_node({r, total}, std::move(out), needs);
  if (needs) {
    for (const auto& p : parts) node->parents.push_back(p.node());
    node->backward_fn = [r, total, widths](Node& self) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < widths.size(); ++k) {
        Node& p = *self.parents[k];
        const std::size_t w = widths[k];
        if (p.requires_grad) {
          auto& g = p.ensure_grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < w; ++j) g[i * w + j] += self.grad[i * total + off + j];
        }
        off += w;
      }
    };
  }
  return Tensor(std::move(node));
}

Tensor stack(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("stack: no inputs");
  const Shape& inner = parts[0].shape();
  const std::size_t n = parts[0].size();
  bool needs = false;
  std::vector<Real> out;
  out.reserve(n * parts.size());
  for (const auto& p : parts) {
    if (p.shape() != inner) throw DimensionError("stack: shape mismatch " + shape_str(p.shape()));
    out.insert(out.end(), p.data().begin(), p.data().end());
    needs = needs || p.requires_grad();
  }
  Shape shape{parts.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  auto node = make_node(std::move(shape), std::move(out), needs);
  if (needs) {
    for (const auto& p : parts) node->parents.push_back(p.node());
    node->backward_fn = [n](Node& self) {
      for (std::size_t k = 0; k < self.parents.size(); ++k) {
        Node& p = *self.parents[k];
        if (!p.requires_grad) continue;
        auto& g = p.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[k * n + i];
      }
    };
  }
  return Tensor(std::move(node));
}

Tensor gather(const Tensor& x, std::span<const std::size_t> index, Shape out_shape) {
  if (numel(out_shape) != index.size()) {
    throw DimensionError("gather: " + std::to_string(index.size()) + " indices for output " +
                         shape_str(out_shape));
  }
  std::vector<Real> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= x.size()) throw DimensionError("gather: index out of range");
    out[i] = x.data()[index[i]];
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_result(std::move(out_shape), std::move(out), {&x}, [idx = std::move(idx)](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += self.grad[i];
  });
}

Tensor mean_rows(const Tensor& x) {
  require_rank(x, 2, "mean_rows");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<Real> out(c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += x.data()[i * c + j];
  for (auto& v : out) v /= static_cast<Real>(r);
  return make_result({c}, std::move(out), {&x}, [r, c](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    const Real inv = 1.0 / static_cast<Real>(r);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j] * inv;
  });
}

namespace {


using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// c[m x n] += a[m x k] * b[k x n]
void gemm_nn(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  MutMap(c, M, N).noalias() += ConstMap(a, M, K) * ConstMap(b, K, N);
}

// c[m x k] += g[m x n] * b[k x n]^T
void gemm_nt(const Real* g, const Real* b, Real* c, std::size_t m, std::size_t n, std::size_t k) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  MutMap(c, M, K).noalias() += ConstMap(g, M, N) * ConstMap(b, K, N).transpose();
}

// c[k x n] += a[m x k]^T * g[m x n]
void gemm_tn(const Real* a, const Real* g, Real* c, std::size_t m, std::size_t k, std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  MutMap(c, K, N).noalias() += ConstMap(a, M, K).transpose() * ConstMap(g, M, N);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<Real> out(m * n, 0.0);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_result({m, n}, std::move(out), {&a, &b}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) gemm_nt(self.grad.data(), pb.data.data(), pa.ensure_grad().data(), m, n, k);
    if (pb.requires_grad) gemm_tn(pa.data.data(), self.grad.data(), pb.ensure_grad().data(), m, k, n);
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps) {
  const std::size_t n = trailing(x);
  if (gamma.size() != n || beta.size() != n) {
    throw DimensionError("layer_norm: affine params do not match " + shape_str(x.shape()));
  }
  const std::size_t rows = x.size() / n;
  std::vector<Real> out(x.size()), xhat(x.size()), inv_std(rows);
  const auto d = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* row = d.data() + r * n;
    Real mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<Real>(n);
    Real var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<Real>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (row[j] - mu) * inv_std[r];
      out[r * n + j] = xhat[r * n + j] * gamma.data()[j] + beta.data()[j];
    }
  }
  return make_result(
      x.shape(), std::move(out), {&x, &gamma, &beta},
      [n, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        Node& px = *self.parents[0];
        Node& pg = *self.parents[1];
        Node& pb = *self.parents[2];
        const Real inv_n = 1.0 / static_cast<Real>(n);
        std::vector<Real> dxhat(n);
        for (std::size_t r = 0; r < rows; ++r) {
          const Real* gy = self.grad.data() + r * n;
          const Real* xh = xhat.data() + r * n;
          if (pg.requires_grad) {
            auto& g = pg.ensure_grad();
            for (std::size_t j = 0; j < n; ++j) g[j] += gy[j] * xh[j];
          }
          if (pb.requires_grad) {
            auto& g = pb.ensure_grad();
            for (std::size_t j = 0; j < n; ++j) g[j] += gy[j];
          }
          if (px.requires_grad) {
            Real m1 = 0, m2 = 0;
            for (std::size_t j = 0; j < n; ++j) {
              dxhat[j] = gy[j] * pg.data[j];
              m1 += dxhat[j];
              m2 += dxhat[j] * xh[j];
            }
            m1 *= inv_n;
            m2 *= inv_n;
            auto& g = px.ensure_grad();
            for (std::size_t j = 0; j < n; ++j) g[r * n + j] += inv_std[r] * (dxhat[j] - m1 - xh[j] * m2);
          }
        }
      });
}

Tensor softmax_rows(const Tensor& x, Real scale) {
  if (x.rank() == 0 || trailing(x) == 0) throw DimensionError("softmax_rows: empty rows");
  if (!(scale > 0)) throw ContractError("softmax_rows: scale must be positive");
  const std::size_t n = trailing(x);
  const std::size_t rows = x.size() / n;
  std::vector<Real> out(x.size());
  const auto d = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* row = d.data() + r * n;
    Real mx = -std::numeric_limits<Real>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (!std::isfinite(row[j])) throw NumericError("softmax_rows: non-finite logit");
      mx = std::max(mx, row[j]);
    }
    Real z = 0;
    for (std::size_t j = 0; j < n; ++j) {
      out[r * n + j] = std::exp(scale * (row[j] - mx));
      z += out[r * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] /= z;
  }
  return make_result(x.shape(), std::move(out), {&x}, [n, rows, scale](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* y = self.data.data() + r * n;
      const Real* gy = self.grad.data() + r * n;
      Real dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += y[j] * gy[j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += scale * y[j] * (gy[j] - dot);
    }
  });
}

Tensor cross_entropy(const Tensor& logits, const Tensor& target, const Tensor& weight) {
  require_rank(logits, 2, "cross_entropy");
  require_same_shape(logits, target, "cross_entropy");
  const std::size_t rows = logits.dim(0), classes = logits.dim(1);
  if (weight.size() != rows) {
    throw DimensionError("cross_entropy: weight " + shape_str(weight.shape()) + " for " +
                         std::to_string(rows) + " pixels");
  }
  const Real log_floor = std::log(kProbFloor);
  std::vector<Real> probs(logits.size());
  std::vector<char> clamped(logits.size(), 0);
  Real total = 0;
  std::size_t counted = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* z = logits.data().data() + r * classes;
    const Real* t = target.data().data() + r * classes;
    const Real w = weight.data()[r];
    if (w < 0 || w > 1) throw ContractError("cross_entropy: weight outside [0, 1]");
    Real tsum = 0;
    for (std::size_t c = 0; c < classes; ++c) tsum += t[c];
    if (tsum > 0) ++counted;
    Real mx = -std::numeric_limits<Real>::infinity();
    for (std::size_t c = 0; c < classes; ++c) mx = std::max(mx, z[c]);
    Real zsum = 0;
    for (std::size_t c = 0; c < classes; ++c) zsum += std::exp(z[c] - mx);
    const Real lse = mx + std::log(zsum);
    for (std::size_t c = 0; c < classes; ++c) {
      Real logp = z[c] - lse;
      probs[r * classes + c] = std::exp(logp);
      if (logp < log_floor) {
        logp = log_floor;
        clamped[r * classes + c] = 1;
      }
      total -= w * t[c] * logp;
    }
  }
  const Real norm = counted ? 1.0 / static_cast<Real>(counted) : 0.0;
  std::vector<Real> t(target.data().begin(), target.data().end());
  std::vector<Real> w(weight.data().begin(), weight.data().end());
  return make_result({}, {total * norm}, {&logits},
                     [rows, classes, norm, probs = std::move(probs), clamped = std::move(clamped),
                      t = std::move(t), w = std::move(w)](Node& self) {
                       auto& g = self.parents[0]->ensure_grad();
                       const Real up = self.grad[0] * norm;
                       for (std::size_t r = 0; r < rows; ++r) {
                         if (w[r] == 0) continue;
                         // d/dz_k of -sum_c t_c log p_c over unclamped c
                         Real active = 0;
                         for (std::size_t c = 0; c < classes; ++c)
                           if (!clamped[r * classes + c]) active += t[r * classes + c];
                         for (std::size_t k = 0; k < classes; ++k) {
                           Real gk = active * probs[r * classes + k];
                           if (!clamped[r * classes + k]) gk -= t[r * classes + k];
                           g[r * classes + k] += up * w[r] * gk;
                         }
                       }
                     });
}

Tensor kl_rows(const Tensor& p, const Tensor& q) {
  require_same_shape(p, q, "kl_rows");
  std::vector<Real> out(p.size());
  const auto pd = p.data();
  const auto qd = q.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (pd[i] < 0 || qd[i] < 0) throw NumericError("kl_rows: negative probability");
    out[i] = pd[i] > 0 ? pd[i] * (std::log(std::max(pd[i], kProbFloor)) -
                                  std::log(std::max(qd[i], kProbFloor)))
                       : 0.0;
  }
  // Only q participates in the graph.
  std::vector<Real> target(pd.begin(), pd.end());
  return make_result(p.shape(), std::move(out), {&q}, [target = std::move(target)](Node& self) {
    Node& pq = *self.parents[0];
    auto& g = pq.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (pq.data[i] > kProbFloor) g[i] -= self.grad[i] * target[i] / pq.data[i];
    }
  });
}

Tensor stop_gradient(const Tensor& x) { return x.detach(); }

namespace {

struct Tap {
  std::size_t lo, hi;
  Real frac;
};

// Align-corners-false sample positions, clamped at the borders.
std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const Real ratio = static_cast<Real>(in) / static_cast<Real>(out);
  for (std::size_t i = 0; i < out; ++i) {
    Real src = (static_cast<Real>(i) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    std::size_t lo = static_cast<std::size_t>(src);
    if (lo > in - 1) lo = in - 1;
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[i] = {lo, hi, src - static_cast<Real>(lo)};
  }
  return taps;
}

}  // namespace

Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require_rank(x, 3, "bilinear_resize");
  if (out_h == 0 || out_w == 0 || x.dim(0) == 0 || x.dim(1) == 0) {
    throw DimensionError("bilinear_resize: zero-sized dimension");
  }
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  const auto ty = bilinear_taps(h, out_h);
  const auto tx = bilinear_taps(w, out_w);
  std::vector<Real> out(out_h * out_w * c);
  const auto d = x.data();
  for (std::size_t i = 0; i < out_h; ++i) {
    const Tap& a = ty[i];
    for (std::size_t j = 0; j < out_w; ++j) {
      const Tap& b = tx[j];
      const Real w00 = (1 - a.frac) * (1 - b.frac), w01 = (1 - a.frac) * b.frac;
      const Real w10 = a.frac * (1 - b.frac), w11 = a.frac * b.frac;
      for (std::size_t k = 0; k < c; ++k) {
        out[(i * out_w + j) * c + k] =
            w00 * d[(a.lo * w + b.lo) * c + k] + w01 * d[(a.lo * w + b.hi) * c + k] +
            w10 * d[(a.hi * w + b.lo) * c + k] + w11 * d[(a.hi * w + b.hi) * c + k];
      }
    }
  }
  return make_result({out_h, out_w, c}, std::move(out), {&x}, [ty, tx, w, c, out_w](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < ty.size(); ++i) {
      const Tap& a = ty[i];
      for (std::size_t j = 0; j < tx.size(); ++j) {
        const Tap& b = tx[j];
        const Real w00 = (1 - a.frac) * (1 - b.frac), w01 = (1 - a.frac) * b.frac;
        const Real w10 = a.frac * (1 - b.frac), w11 = a.frac * b.frac;
        for (std::size_t k = 0; k < c; ++k) {
          const Real gy = self.grad[(i * out_w + j) * c + k];
          g[(a.lo * w + b.lo) * c + k] += w00 * gy;
          g[(a.lo * w + b.hi) * c + k] += w01 * gy;
          g[(a.hi * w + b.lo) * c + k] += w10 * gy;
          g[(a.hi * w + b.hi) * c + k] += w11 * gy;
        }
      }
    }
  });
}

Tensor sum(const Tensor& x) {
  Real total = 0;
  for (Real v : x.data()) total += v;
  return make_result({}, {total}, {&x}, [](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<Real>(x.size()));
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward: loss must be a scalar, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{loss.node().get()};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->seq > b->seq; });
  loss.node()->accumulate(0, 1.0);
  for (Node* n : order) {
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

namespace {

Real evaluate(const ScalarFn& fn, std::span<const Tensor> inputs) {
  const Tensor out = fn(inputs);
  return out.item();
}

}  // namespace

GradCheckResult grad_check(const ScalarFn& fn, std::span<const Tensor> inputs, Real eps, Real floor) {
  return grad_check_against(fn, fn, inputs, eps, floor);
}

GradCheckResult grad_check_against(const ScalarFn& fn, const ScalarFn& fd_fn,
                                   std::span<const Tensor> inputs, Real eps, Real floor) {
  std::vector<Tensor> args(inputs.begin(), inputs.end());
  for (auto& t : args) t.zero_grad();
  backward(fn(args));
  GradCheckResult result;
  for (auto& t : args) {
    const std::vector<Real> analytic = t.grad();
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const Real saved = data[i];
      data[i] = saved + eps;
      const Real fp = evaluate(fd_fn, args);
      data[i] = saved - eps;
      const Real fm = evaluate(fd_fn, args);
      data[i] = saved;
      const Real numeric = (fp - fm) / (2 * eps);
      if (!std::isfinite(numeric) || !std::isfinite(analytic[i])) {
        ++result.nan_coordinates;
        continue;
      }
      const Real abs_err = std::abs(analytic[i] - numeric);
      const Real denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      result.max_abs_error = std::max(result.max_abs_error, abs_err);
      result.max_rel_error = std::max(result.max_rel_error, abs_err / denom);
    }
  }
  for (auto& t : args) t.zero_grad();
  return result;
}

}  // namespace xda
