#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "avasr/errors.hpp"
#include "avasr/rng.hpp"

namespace avasr {

// Scalar width is a build-time choice: gradient-certification builds use
// 64-bit, training builds 32-bit.
#ifdef AVASR_REAL64
using real = double;
#else
using real = float;
#endif

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

struct TensorNode;
class Tensor;
using BackwardFn = std::function<void(TensorNode&)>;

// Dense row-major tensor with a reverse-mode gradient record. Value-semantic
// handle to a shared node; the graph is rebuilt on every forward pass.
// Immutable after creation except for grad accumulation.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& s, bool requires_grad = false);
  static Tensor full(const Shape& s, real v, bool requires_grad = false);
  static Tensor from_data(const Shape& s, std::vector<real> v,
                          bool requires_grad = false);
  static Tensor scalar(real v, bool requires_grad = false);
  static Tensor randn(const Shape& s, Rng& rng, real stddev = 1,
                      bool requires_grad = false);
  static Tensor rand_uniform(const Shape& s, Rng& rng, real lo, real hi,
                             bool requires_grad = false);
  // Extension point for differentiable ops defined outside tensor.cpp.
  // requires_grad is derived from the parents and the grad-mode flag; when it
  // comes out false the parents and backward fn are dropped.
  static Tensor make(const Shape& s, std::vector<real> value,
                     std::vector<Tensor> parents, BackwardFn fn);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int ndim() const;
  int dim(int axis) const;  // negative axis counts from the back
  std::size_t numel() const;

  std::vector<real>& data();
  const std::vector<real>& data() const;
  std::vector<real>& grad();              // allocates zeros on first use
  const std::vector<real>& grad() const;  // throws if never populated
  bool has_grad() const;
  bool requires_grad() const;
  void set_requires_grad(bool rg);
  void zero_grad();

  real item() const;  // numel()==1 only
  real at(std::initializer_list<int> idx) const;
  real& at_mut(std::initializer_list<int> idx);

  // Reverse-mode sweep from a scalar. Repeated calls accumulate; the training
  // loop resets grads between steps.
  void backward() const;

  TensorNode* node() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}
  std::shared_ptr<TensorNode> node_;
};

struct TensorNode {
  Shape shape;
  std::vector<real> value;
  std::vector<real> grad;  // empty until first needed
  bool requires_grad = false;
  std::vector<Tensor> parents;
  BackwardFn backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), real(0));
  }
};

// Thread-local switch; evaluation wraps forwards in NoGradGuard so no graph
// is recorded.
bool grad_enabled();
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// --- differentiable primitives -------------------------------------------

// Batched matrix product [..., m, k] x [..., k, n] -> [..., m, n]; leading
// dims must agree or broadcast from 1 (missing dims count as 1).
Tensor matmul(const Tensor& a, const Tensor& b);
// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, int axis);
Tensor add(const Tensor& a, const Tensor& b);  // same shape
Tensor mul(const Tensor& a, const Tensor& b);  // same shape, elementwise
Tensor scale(const Tensor& x, real c);
Tensor scale_by(const Tensor& x, const Tensor& s);  // s: scalar tensor
Tensor add_bias(const Tensor& x, const Tensor& b);  // b broadcast over last dim
Tensor add_rowwise(const Tensor& x, const Tensor& r);  // r: [rows, last] over [..., rows, last]
Tensor relu(const Tensor& x);
// Normalizes over the final axis; gain/bias are [last_dim].
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  real eps = real(1e-5));
// Inverted scaling: eval is a pure pass-through.
Tensor dropout(const Tensor& x, real rate, Rng& rng, bool train);
// table: [V, D]; ids laid out as id_shape; result id_shape + [D].
Tensor embedding(const Tensor& table, const std::vector<int>& ids,
                 const Shape& id_shape);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor mean(const Tensor& x, int axis);  // squeezes the axis
Tensor sum(const Tensor& x);             // scalar
Tensor transpose(const Tensor& x, int a, int b);
Tensor reshape(const Tensor& x, Shape s);  // one dim may be -1
// [d0, ...] -> [d0*times, ...] with out[i*times + j] = in[i].
Tensor repeat_interleave0(const Tensor& x, int times);

void backward(const Tensor& loss);

// Central-difference gradient estimate, the certification oracle for every
// analytic backward. f must be deterministic (dropout disabled).
std::vector<std::vector<real>> finite_diff_grad(
    const std::function<real()>& f, const std::vector<Tensor>& params, real h);

}  // namespace avasr
