#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "growkit/error.hpp"
#include "growkit/rng.hpp"

namespace growkit {

namespace detail {

// One recorded primitive of the autodiff graph. Nodes are created in
// execution order (monotone seq), so every node's parents precede it;
// the backward sweep walks reachable nodes once, in descending seq.
struct Node {
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const std::vector<float>& out_grad)> backward;
  std::vector<float> grad;  // d(loss)/d(value of this node), lazily allocated
  int64_t size = 0;
  uint64_t seq = 0;

  std::vector<float>& grad_buf() {
    if (grad.empty()) grad.assign(static_cast<size_t>(size), 0.0f);
    return grad;
  }
};

}  // namespace detail

// Dense row-major float32 tensor with optional reverse-mode gradient
// tracking. Copies are shallow (shared storage); use clone() for a deep
// copy. Values are immutable after construction except through raw(),
// which exists for parameter init and in-place optimizer updates.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, float fill = 0.0f, bool requires_grad = false);

  static Tensor from_data(std::vector<int> shape, std::vector<float> data,
                          bool requires_grad = false);
  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor ones(std::vector<int> shape) { return Tensor(std::move(shape), 1.0f); }
  static Tensor full(std::vector<int> shape, float v) { return Tensor(std::move(shape), v); }
  static Tensor randn(std::vector<int> shape, Rng& rng, float stddev,
                      bool requires_grad = false);
  static Tensor scalar(float v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  bool defined() const { return data_ != nullptr; }
  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const;  // negative i counts from the back
  int64_t size() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }
  std::span<const float> data() const { return {data_->data(), data_->size()}; }
  std::span<float> raw() { return {data_->data(), data_->size()}; }
  float item() const;  // ContractError unless exactly one element

  bool requires_grad() const { return node_ != nullptr; }
  void set_requires_grad();  // promote to autodiff leaf
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::span<const float> grad() const;
  std::span<float> grad_mut();
  void zero_grad();
  // Reverse-mode accumulation from this (scalar) tensor. Each reachable
  // graph node is visited exactly once.
  void backward();

  Tensor clone() const;   // deep copy, no graph history
  Tensor detach() const;  // shared storage, no graph history

  std::string shape_str() const;

  // Internal: storage/graph access for the op implementations.
  const std::shared_ptr<std::vector<float>>& storage() const { return data_; }
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  static Tensor make_op(std::vector<int> shape, std::vector<float> data,
                        const std::vector<const Tensor*>& parents,
                        std::function<void(const std::vector<float>&)> backward);

 private:
  std::vector<int> shape_;
  std::shared_ptr<std::vector<float>> data_;
  std::shared_ptr<detail::Node> node_;
};

// Thread-local autodiff mode: when disabled, ops do not record graph nodes.
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// ---- elementwise / arithmetic ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
// a*x + b, elementwise
Tensor affine(const Tensor& x, float a, float b);
Tensor silu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// Multiply the last axis by a constant vector (no gradient to v).
Tensor scale_channels(const Tensor& x, std::span<const float> v);
// x: [S, H, D]; multiply head h by v[h] (no gradient to v).
Tensor scale_heads(const Tensor& x, std::span<const float> v);

// ---- reductions ----
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// sum_i w[i] * x[i] over flattened x; w is a constant.
Tensor weighted_sum(const Tensor& x, std::span<const float> w);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);          // [m,k] x [k,n]
Tensor bmm(const Tensor& a, const Tensor& b);             // [B,m,k] x [B,k,n]
Tensor transpose(const Tensor& a);                        // [m,n] -> [n,m]
Tensor transpose_last2(const Tensor& a);                  // [B,m,n] -> [B,n,m]
Tensor permute_102(const Tensor& a);                      // [A,B,C] -> [B,A,C]
Tensor reshape(const Tensor& a, std::vector<int> shape);  // view, same element count
// [G,S,D] -> [G*r,S,D]; output block g*r+j copies input block g.
Tensor repeat_interleave0(const Tensor& a, int r);
// [n,...] -> [count,...], rows start..start+count.
Tensor slice_rows(const Tensor& a, int start, int count);

// ---- neural-net primitives ----
// Numerically stable (max-subtracted) softmax along `axis`.
Tensor softmax(const Tensor& x, int axis);
// x: [H,S,S]; softmax over the last axis restricted to t <= s, zeros above.
Tensor causal_softmax(const Tensor& x);
// out_i = gain_i * x_i / sqrt(mean(x^2) + eps), normalized over the last axis.
Tensor rms_norm(const Tensor& x, const Tensor& gain, float eps);
// Masked variant: the mean uses weights m_i^2 and divisor sum(m_i^2), so with
// new channels masked to 0 the statistics match the unexpanded model exactly.
Tensor rms_norm_masked(const Tensor& x, const Tensor& gain, std::span<const float> mask,
                       float eps);
// out = (silu(x Wg) .* (x Wu)) Wd; weights are [in,out] row-major.
Tensor swiglu(const Tensor& x, const Tensor& w_gate, const Tensor& w_up, const Tensor& w_down);
// x: [S,H,D], D even. Rotates channel pairs (2i,2i+1) of position s by
// s * base^(-2i/D) radians.
Tensor rope_apply(const Tensor& x, float base_theta);
// table: [V,d]; out[i] = table[ids[i]].
Tensor embedding(const Tensor& table, std::span<const int> ids);
// logits: [n,V]; mean over rows of -log softmax(logits)[target].
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);
// logits: [n,V]; out[i] = log softmax(logits[i])[targets[i]].
Tensor log_softmax_gather(const Tensor& logits, std::span<const int> targets);

// ---- verification ----
struct GradCheckOptions {
  float h = 1e-2f;     // central-difference step, [1e-4, 1e-2]
  int max_coords = 0;  // 0 = all coordinates
  uint64_t seed = 0;   // coordinate sampling
  // Coordinates where both |analytic| and |numeric| fall below atol are
  // reported as exact: under float32 forward evaluation the central
  // difference has an absolute noise floor (~eps * |f| / h), and gradients
  // below it cannot be checked at any relative tolerance.
  float atol = 1e-4f;
};
// Worst relative error between the reverse-mode gradient of f at x and
// central finite differences, over (sampled) coordinates.
float grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                 const GradCheckOptions& opts = {});

void check_finite(std::span<const float> v, const char* context);

}  // namespace growkit
