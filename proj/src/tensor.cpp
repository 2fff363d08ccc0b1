#include "growkit/tensor.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>

namespace growkit {

namespace {

std::atomic<uint64_t> g_node_seq{1};

thread_local bool t_grad_enabled = true;

int64_t numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_to_str(const std::vector<int>& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

void validate_shape(const std::vector<int>& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
  for (int d : shape)
    if (d <= 0)
      throw DimensionError(fmt::format("tensor shape {} has a non-positive axis", shape_to_str(shape)));
}

float sigmoid_scalar(float x) {
  if (x >= 0.0f) return 1.0f / (1.0f + std::exp(-x));
  const float e = std::exp(x);
  return e / (1.0f + e);
}

}  // namespace

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = prev_; }

// ---- Tensor ----

Tensor::Tensor(std::vector<int> shape, float fill, bool requires_grad) {
  validate_shape(shape);
  shape_ = std::move(shape);
  data_ = std::make_shared<std::vector<float>>(static_cast<size_t>(numel(shape_)), fill);
  if (requires_grad) set_requires_grad();
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<float> data, bool requires_grad) {
  validate_shape(shape);
  if (numel(shape) != static_cast<int64_t>(data.size()))
    throw DimensionError(fmt::format("from_data: shape {} wants {} elements, got {}",
                                     shape_to_str(shape), numel(shape), data.size()));
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::make_shared<std::vector<float>>(std::move(data));
  if (requires_grad) t.set_requires_grad();
  return t;
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, float stddev, bool requires_grad) {
  Tensor t(std::move(shape));
  for (float& v : *t.data_) v = rng.normal(0.0f, stddev);
  if (requires_grad) t.set_requires_grad();
  return t;
}

int Tensor::dim(int i) const {
  const int n = ndim();
  if (i < 0) i += n;
  if (i < 0 || i >= n)
    throw DimensionError(fmt::format("axis {} out of range for shape {}", i, shape_str()));
  return shape_[static_cast<size_t>(i)];
}

float Tensor::item() const {
  if (size() != 1)
    throw ContractError(fmt::format("item(): tensor {} is not a scalar", shape_str()));
  return (*data_)[0];
}

void Tensor::set_requires_grad() {
  if (node_) return;
  node_ = std::make_shared<detail::Node>();
  node_->size = size();
  node_->seq = g_node_seq.fetch_add(1);
}

std::span<const float> Tensor::grad() const {
  if (!node_ || node_->grad.empty())
    throw ContractError("grad(): no gradient has been accumulated for this tensor");
  return {node_->grad.data(), node_->grad.size()};
}

std::span<float> Tensor::grad_mut() {
  if (!node_) throw ContractError("grad_mut(): tensor does not require grad");
  auto& g = node_->grad_buf();
  return {g.data(), g.size()};
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

void Tensor::backward() {
  if (size() != 1)
    throw ContractError(fmt::format("backward(): tensor {} is not a scalar", shape_str()));
  if (!node_) throw ContractError("backward(): tensor does not require grad");

  // Collect reachable nodes, then run in descending creation order;
  // parents were created before children, so this is a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{node_.get()};
  seen.insert(node_.get());
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->seq > b->seq; });

  {
    auto& g = node_->grad_buf();
    g[0] += 1.0f;
  }
  for (detail::Node* n : order) {
    if (n->backward) n->backward(n->grad_buf());
  }
}

Tensor Tensor::clone() const {
  Tensor t;
  t.shape_ = shape_;
  t.data_ = std::make_shared<std::vector<float>>(*data_);
  return t;
}

Tensor Tensor::detach() const {
  Tensor t;
  t.shape_ = shape_;
  t.data_ = data_;
  return t;
}

std::string Tensor::shape_str() const { return shape_to_str(shape_); }

Tensor Tensor::make_op(std::vector<int> shape, std::vector<float> data,
                       const std::vector<const Tensor*>& parents,
                       std::function<void(const std::vector<float>&)> backward) {
  Tensor out;
  validate_shape(shape);
  out.shape_ = std::move(shape);
  out.data_ = std::make_shared<std::vector<float>>(std::move(data));
  if (t_grad_enabled) {
    bool any = false;
    for (const Tensor* p : parents)
      if (p->node_) any = true;
    if (any) {
      out.node_ = std::make_shared<detail::Node>();
      out.node_->size = out.size();
      out.node_->seq = g_node_seq.fetch_add(1);
      for (const Tensor* p : parents)
        if (p->node_) out.node_->parents.push_back(p->node_);
      out.node_->backward = std::move(backward);
    }
  }
  return out;
}

// ---- helpers for op bodies ----

namespace {

using NodePtr = std::shared_ptr<detail::Node>;
using Data = std::shared_ptr<std::vector<float>>;

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(
        fmt::format("{}: shapes {} and {} differ", op, a.shape_str(), b.shape_str()));
}

}  // namespace

void check_finite(std::span<const float> v, const char* context) {
  for (float x : v)
    if (!std::isfinite(x))
      throw ContractError(fmt::format("{}: non-finite value encountered", context));
}

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  const auto av = a.data(), bv = b.data();
  std::vector<float> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  NodePtr na = a.node(), nb = b.node();
  return Tensor::make_op(a.shape(), std::move(out), {&a, &b},
                         [na, nb](const std::vector<float>& g) {
                           if (na) {
                             auto& ga = na->grad_buf();
                             for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                           }
                           if (nb) {
                             auto& gb = nb->grad_buf();
                             for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                           }
                         });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  const auto av = a.data(), bv = b.data();
  std::vector<float> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  NodePtr na = a.node(), nb = b.node();
  return Tensor::make_op(a.shape(), std::move(out), {&a, &b},
                         [na, nb](const std::vector<float>& g) {
                           if (na) {
                             auto& ga = na->grad_buf();
                             for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                           }
                           if (nb) {
                             auto& gb = nb->grad_buf();
                             for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                           }
                         });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  const auto av = a.data(), bv = b.data();
  std::vector<float> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  NodePtr na = a.node(), nb = b.node();
  Data ad = a.storage(), bd = b.storage();
  return Tensor::make_op(a.shape(), std::move(out), {&a, &b},
                         [na, nb, ad, bd](const std::vector<float>& g) {
                           if (na) {
                             auto& ga = na->grad_buf();
                             for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*bd)[i];
                           }
                           if (nb) {
                             auto& gb = nb->grad_buf();
                             for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * (*ad)[i];
                           }
                         });
}

Tensor scale(const Tensor& a, float s) { return affine(a, s, 0.0f); }

Tensor affine(const Tensor& x, float a, float b) {
  const auto xv = x.data();
  std::vector<float> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a * xv[i] + b;
  NodePtr nx = x.node();
  return Tensor::make_op(x.shape(), std::move(out), {&x},
                         [nx, a](const std::vector<float>& g) {
                           auto& gx = nx->grad_buf();
                           for (size_t i = 0; i < g.size(); ++i) gx[i] += a * g[i];
                         });
}

Tensor silu(const Tensor& x) {
  const auto xv = x.data();
  std::vector<float> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * sigmoid_scalar(xv[i]);
  NodePtr nx = x.node();
  Data xd = x.storage();
  return Tensor::make_op(x.shape(), std::move(out), {&x},
                         [nx, xd](const std::vector<float>& g) {
                           auto& gx = nx->grad_buf();
                           for (size_t i = 0; i < g.size(); ++i) {
                             const float s = sigmoid_scalar((*xd)[i]);
                             gx[i] += g[i] * s * (1.0f + (*xd)[i] * (1.0f - s));
                           }
                         });
}

Tensor sigmoid(const Tensor& x) {
  const auto xv = x.data();
  std::vector<float> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_scalar(xv[i]);
  NodePtr nx = x.node();
  auto od = std::make_shared<std::vector<float>>(out);
  return Tensor::make_op(x.shape(), std::move(out), {&x},
                         [nx, od](const std::vector<float>& g) {
                           auto& gx = nx->grad_buf();
                           for (size_t i = 0; i < g.size(); ++i) {
                             const float s = (*od)[i];
                             gx[i] += g[i] * s * (1.0f - s);
                           }
                         });
}

Tensor scale_channels(const Tensor& x, std::span<const float> v) {
  const int d = x.dim(-1);
  if (static_cast<int>(v.size()) != d)
    throw DimensionError(fmt::format("scale_channels: vector size {} != last axis of {}",
                                     v.size(), x.shape_str()));
  const auto xv = x.data();
  std::vector<float> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * v[i % d];
  NodePtr nx = x.node();
  std::vector<float> vc(v.begin(), v.end());
  return Tensor::make_op(x.shape(), std::move(out), {&x},
                         [nx, vc, d](const std::vector<float>& g) {
                           auto& gx = nx->grad_buf();
                           for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * vc[i % d];
                         });
}

Tensor scale_heads(const Tensor& x, std::span<const float> v) {
  if (x.ndim() != 3)
    throw DimensionError(fmt::format("scale_heads: want [S,H,D], got {}", x.shape_str()));
  const int h = x.dim(1), d = x.dim(2);
  if (static_cast<int>(v.size()) != h)
    throw DimensionError(
        fmt::format("scale_heads: vector size {} != head count of {}", v.size(), x.shape_str()));
  const auto xv = x.data();
  std::vector<float> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * v[(i / d) % h];
  NodePtr nx = x.node();
  std::vector<float> vc(v.begin(), v.end());
  return Tensor::make_op(x.shape(), std::move(out), {&x},
                         [nx, vc, h, d](const std::vector<float>& g) {
                           auto& gx = nx->grad_buf();
                           for (size_t i = 0; i < g.size(); ++i)
                             gx[i] += g[i] * vc[(i / d) % h];
                         });
}

// ---- reductions ----

Tensor sum(const Tensor& x) {
  const auto xv = x.data();
  float s = 0.0f;
  for (float v : xv) s += v;
  NodePtr nx = x.node();
  const size_t n = xv.size();
  return Tensor::make_op({1}, {s}, {&x}, [nx, n](const std::vector<float>& g) {
    auto& gx = nx->grad_buf();
    for (size_t i = 0; i < n; ++i) gx[i] += g[0];
  });
}

Tensor mean(const Tensor& x) {
  const auto xv = x.data();
  float s = 0.0f;
  for (float v : xv) s += v;
  const float inv = 1.0f / static_cast<float>(xv.size());
  NodePtr nx = x.node();
  const size_t n = xv.size();
  return Tensor::make_op({1}, {s * inv}, {&x}, [nx, n, inv](const std::vector<float>& g) {
    auto& gx = nx->grad_buf();
    for (size_t i = 0; i < n; ++i) gx[i] += g[0] * inv;
  });
}

Tensor weighted_sum(const Tensor& x, std::span<const float> w) {
  const auto xv = x.data();
  if (w.size() != xv.size())
    throw DimensionError(fmt::format("weighted_sum: weight size {} != element count {}",
                                     w.size(), xv.size()));
  float s = 0.0f;
  for (size_t i = 0; i < xv.size(); ++i) s += xv[i] * w[i];
  NodePtr nx = x.node();
  std::vector<float> wc(w.begin(), w.end());
  return Tensor::make_op({1}, {s}, {&x}, [nx, wc](const std::vector<float>& g) {
    auto& gx = nx->grad_buf();
    for (size_t i = 0; i < wc.size(); ++i) gx[i] += g[0] * wc[i];
  });
}

// ---- linear algebra ----

namespace {

// C[m,n] += A[m,k] * B[k,n], row-major, ikj loop order.
void gemm_acc(const float* a, const float* b, float* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    for (int p = 0; p < k; ++p) {
      const float av = a[static_cast<size_t>(i) * k + p];
      if (av == 0.0f) continue;
      const float* brow = b + static_cast<size_t>(p) * n;
      float* crow = c + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B^T where Bt is [n,k] row-major.
void gemm_bt_acc(const float* a, const float* bt, float* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<size_t>(i) * k;
    float* crow = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const float* brow = bt + static_cast<size_t>(j) * k;
      float acc = 0.0f;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C[k,n] += A^T * B where A is [m,k] and B is [m,n], row-major.
void gemm_at_acc(const float* a, const float* b, float* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<size_t>(i) * k;
    const float* brow = b + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const float av = arow[p];
      if (av == 0.0f) continue;
      float* crow = c + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError(
        fmt::format("matmul: incompatible shapes {} and {}", a.shape_str(), b.shape_str()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<float> out(static_cast<size_t>(m) * n, 0.0f);
  gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  NodePtr na = a.node(), nb = b.node();
  Data ad = a.storage(), bd = b.storage();
  return Tensor::make_op({m, n}, std::move(out), {&a, &b},
                         [na, nb, ad, bd, m, k, n](const std::vector<float>& g) {
                           if (na)  // dA = G * B^T
                             gemm_bt_acc(g.data(), bd->data(), na->grad_buf().data(), m, n, k);
                           if (nb)  // dB = A^T * G
                             gemm_at_acc(ad->data(), g.data(), nb->grad_buf().data(), m, k, n);
                         });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw DimensionError(
        fmt::format("bmm: incompatible shapes {} and {}", a.shape_str(), b.shape_str()));
  const int bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<float> out(static_cast<size_t>(bs) * m * n, 0.0f);
  for (int i = 0; i < bs; ++i)
    gemm_acc(a.data().data() + static_cast<size_t>(i) * m * k,
             b.data().data() + static_cast<size_t>(i) * k * n,
             out.data() + static_cast<size_t>(i) * m * n, m, k, n);
  NodePtr na = a.node(), nb = b.node();
  Data ad = a.storage(), bd = b.storage();
  return Tensor::make_op({bs, m, n}, std::move(out), {&a, &b},
                         [na, nb, ad, bd, bs, m, k, n](const std::vector<float>& g) {
                           for (int i = 0; i < bs; ++i) {
                             const float* gi = g.data() + static_cast<size_t>(i) * m * n;
                             if (na)
                               gemm_bt_acc(gi, bd->data() + static_cast<size_t>(i) * k * n,
                                           na->grad_buf().data() + static_cast<size_t>(i) * m * k,
                                           m, n, k);
                             if (nb)
                               gemm_at_acc(ad->data() + static_cast<size_t>(i) * m * k, gi,
                                           nb->grad_buf().data() + static_cast<size_t>(i) * k * n,
                                           m, k, n);
                           }
                         });
}

namespace {

void transpose_into(const float* src, float* dst, int m, int n) {
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) dst[static_cast<size_t>(j) * m + i] = src[static_cast<size_t>(i) * n + j];
}

}  // namespace

Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2)
    throw DimensionError(fmt::format("transpose: want 2-D, got {}", a.shape_str()));
  const int m = a.dim(0), n = a.dim(1);
  std::vector<float> out(a.data().size());
  transpose_into(a.data().data(), out.data(), m, n);
  NodePtr na = a.node();
  return Tensor::make_op({n, m}, std::move(out), {&a},
                         [na, m, n](const std::vector<float>& g) {
                           std::vector<float> tmp(g.size());
                           transpose_into(g.data(), tmp.data(), n, m);
                           auto& ga = na->grad_buf();
                           for (size_t i = 0; i < tmp.size(); ++i) ga[i] += tmp[i];
                         });
}

Tensor transpose_last2(const Tensor& a) {
  if (a.ndim() != 3)
    throw DimensionError(fmt::format("transpose_last2: want 3-D, got {}", a.shape_str()));
  const int b = a.dim(0), m = a.dim(1), n = a.dim(2);
  std::vector<float> out(a.data().size());
  for (int i = 0; i < b; ++i)
    transpose_into(a.data().data() + static_cast<size_t>(i) * m * n,
                   out.data() + static_cast<size_t>(i) * m * n, m, n);
  NodePtr na = a.node();
  return Tensor::make_op({b, n, m}, std::move(out), {&a},
                         [na, b, m, n](const std::vector<float>& g) {
                           auto& ga = na->grad_buf();
                           std::vector<float> tmp(static_cast<size_t>(m) * n);
                           for (int i = 0; i < b; ++i) {
                             transpose_into(g.data() + static_cast<size_t>(i) * m * n, tmp.data(), n, m);
                             float* gi = ga.data() + static_cast<size_t>(i) * m * n;
                             for (size_t j = 0; j < tmp.size(); ++j) gi[j] += tmp[j];
                           }
                         });
}

namespace {

void permute102_into(const float* src, float* dst, int A, int B, int C) {
  for (int i = 0; i < A; ++i)
    for (int j = 0; j < B; ++j)
      std::copy(src + (static_cast<size_t>(i) * B + j) * C,
                src + (static_cast<size_t>(i) * B + j + 1) * C,
                dst + (static_cast<size_t>(j) * A + i) * C);
}

}  // namespace

Tensor permute_102(const Tensor& a) {
  if (a.ndim() != 3)
    throw DimensionError(fmt::format("permute_102: want 3-D, got {}", a.shape_str()));
  const int A = a.dim(0), B = a.dim(1), C = a.dim(2);
  std::vector<float> out(a.data().size());
  permute102_into(a.data().data(), out.data(), A, B, C);
  NodePtr na = a.node();
  return Tensor::make_op({B, A, C}, std::move(out), {&a},
                         [na, A, B, C](const std::vector<float>& g) {
                           std::vector<float> tmp(g.size());
                           permute102_into(g.data(), tmp.data(), B, A, C);
                           auto& ga = na->grad_buf();
                           for (size_t i = 0; i < tmp.size(); ++i) ga[i] += tmp[i];
                         });
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
  validate_shape(shape);
  if (numel(shape) != a.size())
    throw DimensionError(fmt::format("reshape: {} elements cannot view as {}", a.size(),
                                     shape_to_str(shape)));
  std::vector<float> out(a.data().begin(), a.data().end());
  NodePtr na = a.node();
  return Tensor::make_op(std::move(shape), std::move(out), {&a},
                         [na](const std::vector<float>& g) {
                           auto& ga = na->grad_buf();
                           for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                         });
}

Tensor repeat_interleave0(const Tensor& a, int r) {
  if (a.ndim() != 3 || r < 1)
    throw DimensionError(fmt::format("repeat_interleave0: want 3-D and r >= 1, got {} r={}",
                                     a.shape_str(), r));
  const int G = a.dim(0);
  const int64_t block = a.size() / G;
  std::vector<float> out(static_cast<size_t>(a.size()) * r);
  for (int g = 0; g < G; ++g)
    for (int j = 0; j < r; ++j)
      std::copy(a.data().begin() + g * block, a.data().begin() + (g + 1) * block,
                out.begin() + (static_cast<int64_t>(g) * r + j) * block);
  NodePtr na = a.node();
  return Tensor::make_op({G * r, a.dim(1), a.dim(2)}, std::move(out), {&a},
                         [na, G, r, block](const std::vector<float>& g) {
                           auto& ga = na->grad_buf();
                           for (int gi = 0; gi < G; ++gi)
                             for (int j = 0; j < r; ++j) {
                               const float* src = g.data() + (static_cast<int64_t>(gi) * r + j) * block;
                               float* dst = ga.data() + gi * block;
                               for (int64_t i = 0; i < block; ++i) dst[i] += src[i];
                             }
                         });
}

Tensor slice_rows(const Tensor& a, int start, int count) {
  if (a.ndim() < 1)
    throw DimensionError("slice_rows: tensor has no axes");
  const int rows = a.dim(0);
  if (start < 0 || count < 1 || start + count > rows)
    throw DimensionError(fmt::format("slice_rows: range [{},{}) out of {} rows", start,
                                     start + count, rows));
  const int64_t stride = a.size() / rows;
  std::vector<float> out(a.data().begin() + start * stride,
                         a.data().begin() + (start + count) * stride);
  std::vector<int> shape = a.shape();
  shape[0] = count;
  NodePtr na = a.node();
  return Tensor::make_op(std::move(shape), std::move(out), {&a},
                         [na, start, stride](const std::vector<float>& g) {
                           auto& ga = na->grad_buf();
                           float* dst = ga.data() + start * stride;
                           for (size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
                         });
}

// ---- softmax family ----

Tensor softmax(const Tensor& x, int axis) {
  const int nd = x.ndim();
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd)
    throw DimensionError(fmt::format("softmax: axis out of range for {}", x.shape_str()));
  const int n = x.shape()[static_cast<size_t>(axis)];
  if (n < 1) throw DimensionError("softmax: empty axis");
  int64_t inner = 1, outer = 1;
  for (int i = axis + 1; i < nd; ++i) inner *= x.shape()[static_cast<size_t>(i)];
  for (int i = 0; i < axis; ++i) outer *= x.shape()[static_cast<size_t>(i)];

  const auto xv = x.data();
  std::vector<float> out(xv.size());
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * n * inner + in;
      float mx = xv[base];
      for (int i = 1; i < n; ++i) mx = std::max(mx, xv[base + i * inner]);
      float denom = 0.0f;
      for (int i = 0; i < n; ++i) {
        const float e = std::exp(xv[base + i * inner] - mx);
        out[base + i * inner] = e;
        denom += e;
      }
      const float inv = 1.0f / denom;
      for (int i = 0; i < n; ++i) out[base + i * inner] *= inv;
    }
  }
  NodePtr nx = x.node();
  auto od = std::make_shared<std::vector<float>>(out);
  return Tensor::make_op(x.shape(), std::move(out), {&x},
                         [nx, od, outer, inner, n](const std::vector<float>& g) {
                           auto& gx = nx->grad_buf();
                           for (int64_t o = 0; o < outer; ++o)
                             for (int64_t in = 0; in < inner; ++in) {
                               const int64_t base = o * n * inner + in;
                               float dot = 0.0f;
                               for (int i = 0; i < n; ++i)
                                 dot += g[base + i * inner] * (*od)[base + i * inner];
                               for (int i = 0; i < n; ++i) {
                                 const float p = (*od)[base + i * inner];
                                 gx[base + i * inner] += p * (g[base + i * inner] - dot);
                               }
                             }
                         });
}

Tensor causal_softmax(const Tensor& x) {
  if (x.ndim() != 3 || x.dim(1) != x.dim(2))
    throw DimensionError(fmt::format("causal_softmax: want [H,S,S], got {}", x.shape_str()));
  const int H = x.dim(0), S = x.dim(1);
  const auto xv = x.data();
  std::vector<float> out(xv.size(), 0.0f);
  for (int h = 0; h < H; ++h) {
    for (int s = 0; s < S; ++s) {
      const size_t row = (static_cast<size_t>(h) * S + s) * S;
      float mx = xv[row];
      for (int t = 1; t <= s; ++t) mx = std::max(mx, xv[row + t]);
      float denom = 0.0f;
      for (int t = 0; t <= s; ++t) {
        const float e = std::exp(xv[row + t] - mx);
        out[row + t] = e;
        denom += e;
      }
      const float inv = 1.0f / denom;
      for (int t = 0; t <= s; ++t) out[row + t] *= inv;
    }
  }
  NodePtr nx = x.node();
  auto od = std::make_shared<std::vector<float>>(out);
  return Tensor::make_op(x.shape(), std::move(out), {&x},
                         [nx, od, H, S](const std::vector<float>& g) {
                           auto& gx = nx->grad_buf();
                           for (int h = 0; h < H; ++h)
                             for (int s = 0; s < S; ++s) {
                               const size_t row = (static_cast<size_t>(h) * S + s) * S;
                               float dot = 0.0f;
                               for (int t = 0; t <= s; ++t) dot += g[row + t] * (*od)[row + t];
                               for (int t = 0; t <= s; ++t) {
                                 const float p = (*od)[row + t];
                                 gx[row + t] += p * (g[row + t] - dot);
                               }
                             }
                         });
}

// ---- normalization ----

namespace {

Tensor rms_norm_impl(const Tensor& x, const Tensor& gain, const float* mask, float eps) {
  const int d = x.dim(-1);
  if (gain.ndim() != 1 || gain.dim(0) != d)
    throw DimensionError(fmt::format("rms_norm: gain {} does not match last axis of {}",
                                     gain.shape_str(), x.shape_str()));
  if (eps < 0.0f) throw ContractError("rms_norm: eps must be >= 0");
  const int64_t rows = x.size() / d;

  // Weighted divisor: with no mask this is plain mean(x^2).
  float wsum = static_cast<float>(d);
  if (mask) {
    wsum = 0.0f;
    for (int i = 0; i < d; ++i) wsum += mask[i] * mask[i];
  }

  const auto xv = x.data();
  const auto gv = gain.data();
  std::vector<float> out(xv.size());
  std::vector<float> inv_rms(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = xv.data() + r * d;
    float ss = 0.0f;
    if (mask) {
      for (int i = 0; i < d; ++i) {
        const float mx = mask[i] * xr[i];
        ss += mx * mx;
      }
    } else {
      for (int i = 0; i < d; ++i) ss += xr[i] * xr[i];
    }
    const float inv = 1.0f / std::sqrt(ss / wsum + eps);
    inv_rms[static_cast<size_t>(r)] = inv;
    float* orow = out.data() + r * d;
    for (int i = 0; i < d; ++i) orow[i] = gv[i] * xr[i] * inv;
  }

  NodePtr nx = x.node(), ng = gain.node();
  Data xd = x.storage(), gd = gain.storage();
  auto invd = std::make_shared<std::vector<float>>(std::move(inv_rms));
  std::vector<float> w(static_cast<size_t>(d), 1.0f);
  if (mask)
    for (int i = 0; i < d; ++i) w[static_cast<size_t>(i)] = mask[i] * mask[i];
  return Tensor::make_op(
      x.shape(), std::move(out), {&x, &gain},
      [nx, ng, xd, gd, invd, w = std::move(w), rows, d, wsum](const std::vector<float>& g) {
        for (int64_t r = 0; r < rows; ++r) {
          const float* xr = xd->data() + r * d;
          const float* gr = g.data() + r * d;
          const float inv = (*invd)[static_cast<size_t>(r)];
          if (nx) {
            // d out_i / d x_k = gain_i (delta_ik / rms - x_i w_k x_k / (W rms^3))
            float dot = 0.0f;
            for (int i = 0; i < d; ++i) dot += gr[i] * (*gd)[i] * xr[i];
            const float c = dot * inv * inv * inv / wsum;
            float* gx = nx->grad_buf().data() + r * d;
            for (int k = 0; k < d; ++k)
              gx[k] += gr[k] * (*gd)[k] * inv - c * w[static_cast<size_t>(k)] * xr[k];
          }
          if (ng) {
            float* gg = ng->grad_buf().data();
            for (int i = 0; i < d; ++i) gg[i] += gr[i] * xr[i] * inv;
          }
        }
      });
}

}  // namespace

Tensor rms_norm(const Tensor& x, const Tensor& gain, float eps) {
  return rms_norm_impl(x, gain, nullptr, eps);
}

Tensor rms_norm_masked(const Tensor& x, const Tensor& gain, std::span<const float> mask,
                       float eps) {
  if (static_cast<int>(mask.size()) != x.dim(-1))
    throw DimensionError(fmt::format("rms_norm_masked: mask size {} != last axis of {}",
                                     mask.size(), x.shape_str()));
  return rms_norm_impl(x, gain, mask.data(), eps);
}

Tensor swiglu(const Tensor& x, const Tensor& w_gate, const Tensor& w_up, const Tensor& w_down) {
  return matmul(mul(silu(matmul(x, w_gate)), matmul(x, w_up)), w_down);
}

// ---- rotary position embedding ----

Tensor rope_apply(const Tensor& x, float base_theta) {
  if (x.ndim() != 3)
    throw DimensionError(fmt::format("rope_apply: want [S,H,D], got {}", x.shape_str()));
  const int S = x.dim(0), H = x.dim(1), D = x.dim(2);
  if (D % 2 != 0)
    throw ConfigError(fmt::format("rope_apply: head dimension {} must be even", D));
  if (base_theta <= 0.0f) throw ConfigError("rope_apply: base must be positive");

  // Angles are computed in double, once per (position, pair).
  const int P = D / 2;
  std::vector<float> cos_t(static_cast<size_t>(S) * P), sin_t(static_cast<size_t>(S) * P);
  for (int s = 0; s < S; ++s)
    for (int p = 0; p < P; ++p) {
      const double theta = std::pow(static_cast<double>(base_theta), -2.0 * p / D);
      const double ang = static_cast<double>(s) * theta;
      cos_t[static_cast<size_t>(s) * P + p] = static_cast<float>(std::cos(ang));
      sin_t[static_cast<size_t>(s) * P + p] = static_cast<float>(std::sin(ang));
    }

  const auto xv = x.data();
  std::vector<float> out(xv.size());
  for (int s = 0; s < S; ++s)
    for (int h = 0; h < H; ++h) {
      const size_t base = (static_cast<size_t>(s) * H + h) * D;
      for (int p = 0; p < P; ++p) {
        const float c = cos_t[static_cast<size_t>(s) * P + p];
        const float sn = sin_t[static_cast<size_t>(s) * P + p];
        const float a = xv[base + 2 * p], b = xv[base + 2 * p + 1];
        out[base + 2 * p] = a * c - b * sn;
        out[base + 2 * p + 1] = a * sn + b * c;
      }
    }
  NodePtr nx = x.node();
  auto cd = std::make_shared<std::vector<float>>(std::move(cos_t));
  auto sd = std::make_shared<std::vector<float>>(std::move(sin_t));
  return Tensor::make_op(x.shape(), std::move(out), {&x},
                         [nx, cd, sd, S, H, D, P](const std::vector<float>& g) {
                           auto& gx = nx->grad_buf();
                           for (int s = 0; s < S; ++s)
                             for (int h = 0; h < H; ++h) {
                               const size_t base = (static_cast<size_t>(s) * H + h) * D;
                               for (int p = 0; p < P; ++p) {
                                 const float c = (*cd)[static_cast<size_t>(s) * P + p];
                                 const float sn = (*sd)[static_cast<size_t>(s) * P + p];
                                 const float ga = g[base + 2 * p], gb = g[base + 2 * p + 1];
                                 gx[base + 2 * p] += ga * c + gb * sn;
                                 gx[base + 2 * p + 1] += -ga * sn + gb * c;
                               }
                             }
                         });
}

// ---- embedding / losses ----

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  if (table.ndim() != 2)
    throw DimensionError(fmt::format("embedding: table must be [V,d], got {}", table.shape_str()));
  const int V = table.dim(0), d = table.dim(1);
  const int n = static_cast<int>(ids.size());
  if (n == 0) throw DimensionError("embedding: empty id list");
  std::vector<float> out(static_cast<size_t>(n) * d);
  for (int i = 0; i < n; ++i) {
    const int id = ids[i];
    if (id < 0 || id >= V)
      throw IndexError(fmt::format("embedding: id {} at position {} out of range [0,{})", id, i, V));
    std::copy(table.data().begin() + static_cast<size_t>(id) * d,
              table.data().begin() + static_cast<size_t>(id + 1) * d,
              out.begin() + static_cast<size_t>(i) * d);
  }
  NodePtr nt = table.node();
  std::vector<int> idc(ids.begin(), ids.end());
  return Tensor::make_op({n, d}, std::move(out), {&table},
                         [nt, idc = std::move(idc), d](const std::vector<float>& g) {
                           auto& gt = nt->grad_buf();
                           for (size_t i = 0; i < idc.size(); ++i) {
                             float* row = gt.data() + static_cast<size_t>(idc[i]) * d;
                             const float* gr = g.data() + i * d;
                             for (int j = 0; j < d; ++j) row[j] += gr[j];
                           }
                         });
}

namespace {

void check_targets(const Tensor& logits, std::span<const int> targets, const char* op) {
  if (logits.ndim() != 2)
    throw DimensionError(fmt::format("{}: logits must be [n,V], got {}", op, logits.shape_str()));
  if (static_cast<int>(targets.size()) != logits.dim(0))
    throw DimensionError(fmt::format("{}: {} targets for {} rows", op, targets.size(), logits.dim(0)));
  const int V = logits.dim(1);
  for (size_t i = 0; i < targets.size(); ++i)
    if (targets[i] < 0 || targets[i] >= V)
      throw IndexError(
          fmt::format("{}: target {} at row {} out of range [0,{})", op, targets[i], i, V));
}

// Per-row log-sum-exp with max subtraction.
void row_logsumexp(const float* row, int V, float* mx_out, float* lse_out) {
  float mx = row[0];
  for (int v = 1; v < V; ++v) mx = std::max(mx, row[v]);
  float s = 0.0f;
  for (int v = 0; v < V; ++v) s += std::exp(row[v] - mx);
  *mx_out = mx;
  *lse_out = mx + std::log(s);
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  check_targets(logits, targets, "cross_entropy");
  const int n = logits.dim(0), V = logits.dim(1);
  const auto lv = logits.data();
  float total = 0.0f;
  std::vector<float> lse(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    float mx, l;
    row_logsumexp(lv.data() + static_cast<size_t>(i) * V, V, &mx, &l);
    lse[static_cast<size_t>(i)] = l;
    total += l - lv[static_cast<size_t>(i) * V + targets[i]];
  }
  const float loss = total / static_cast<float>(n);
  NodePtr nl = logits.node();
  Data ld = logits.storage();
  std::vector<int> tc(targets.begin(), targets.end());
  auto lsed = std::make_shared<std::vector<float>>(std::move(lse));
  return Tensor::make_op(
      {1}, {loss}, {&logits},
      [nl, ld, tc = std::move(tc), lsed, n, V](const std::vector<float>& g) {
        auto& gl = nl->grad_buf();
        const float gs = g[0] / static_cast<float>(n);
        for (int i = 0; i < n; ++i) {
          const float* row = ld->data() + static_cast<size_t>(i) * V;
          float* grow = gl.data() + static_cast<size_t>(i) * V;
          const float l = (*lsed)[static_cast<size_t>(i)];
          for (int v = 0; v < V; ++v) {
            const float p = std::exp(row[v] - l);
            grow[v] += gs * (p - (v == tc[static_cast<size_t>(i)] ? 1.0f : 0.0f));
          }
        }
      });
}

Tensor log_softmax_gather(const Tensor& logits, std::span<const int> targets) {
  check_targets(logits, targets, "log_softmax_gather");
  const int n = logits.dim(0), V = logits.dim(1);
  const auto lv = logits.data();
  std::vector<float> out(static_cast<size_t>(n));
  std::vector<float> lse(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    float mx, l;
    row_logsumexp(lv.data() + static_cast<size_t>(i) * V, V, &mx, &l);
    lse[static_cast<size_t>(i)] = l;
    out[static_cast<size_t>(i)] = lv[static_cast<size_t>(i) * V + targets[i]] - l;
  }
  NodePtr nl = logits.node();
  Data ld = logits.storage();
  std::vector<int> tc(targets.begin(), targets.end());
  auto lsed = std::make_shared<std::vector<float>>(std::move(lse));
  return Tensor::make_op(
      {n}, std::move(out), {&logits},
      [nl, ld, tc = std::move(tc), lsed, n, V](const std::vector<float>& g) {
        auto& gl = nl->grad_buf();
        for (int i = 0; i < n; ++i) {
          const float* row = ld->data() + static_cast<size_t>(i) * V;
          float* grow = gl.data() + static_cast<size_t>(i) * V;
          const float gi = g[static_cast<size_t>(i)];
          if (gi == 0.0f) continue;
          const float l = (*lsed)[static_cast<size_t>(i)];
          for (int v = 0; v < V; ++v) {
            const float p = std::exp(row[v] - l);
            grow[v] += gi * ((v == tc[static_cast<size_t>(i)] ? 1.0f : 0.0f) - p);
          }
        }
      });
}

// ---- gradient checking ----

float grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                 const GradCheckOptions& opts) {
  if (opts.h < 1e-4f || opts.h > 1e-2f)
    throw ContractError(fmt::format("grad_check: h = {} outside [1e-4, 1e-2]", opts.h));

  Tensor leaf = x.clone();
  leaf.set_requires_grad();
  Tensor out = f(leaf);
  if (out.size() != 1)
    throw ContractError(
        fmt::format("grad_check: f returned {} instead of a scalar", out.shape_str()));
  out.backward();
  std::vector<float> analytic(leaf.grad().begin(), leaf.grad().end());

  std::vector<int64_t> coords;
  const int64_t n = x.size();
  if (opts.max_coords > 0 && opts.max_coords < n) {
    // Sample among coordinates whose analytic gradient clears the
    // finite-difference noise floor; below it the comparison says nothing.
    Rng rng(derive_seed(opts.seed, "grad_check"));
    std::vector<int64_t> pool;
    for (int64_t i = 0; i < n; ++i)
      if (std::fabs(analytic[static_cast<size_t>(i)]) >= opts.atol) pool.push_back(i);
    if (static_cast<int>(pool.size()) < opts.max_coords) {
      pool.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) pool[static_cast<size_t>(i)] = i;
    }
    rng.shuffle(pool);
    coords.assign(pool.begin(), pool.begin() + opts.max_coords);
  } else {
    coords.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
  }

  NoGradGuard ng;
  float worst = 0.0f;
  for (int64_t c : coords) {
    Tensor xp = x.clone();
    xp.raw()[static_cast<size_t>(c)] += opts.h;
    Tensor xm = x.clone();
    xm.raw()[static_cast<size_t>(c)] -= opts.h;
    const float fp = f(xp).item();
    const float fm = f(xm).item();
    const float numeric = (fp - fm) / (2.0f * opts.h);
    const float a = analytic[static_cast<size_t>(c)];
    const float denom = std::max(std::fabs(a), std::fabs(numeric));
    if (denom < opts.atol) continue;  // both negligible
    worst = std::max(worst, std::fabs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace growkit
