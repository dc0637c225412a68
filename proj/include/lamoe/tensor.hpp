#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "lamoe/rng.hpp"

namespace lamoe {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_size(const Shape& s);

/// Dense row-major tensor of 64-bit floats. Copies are handles onto shared
/// storage; every op returns a fresh tensor. Gradients accumulate by
/// summation into a lazily allocated buffer of the same shape.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value);
  static Tensor ones(Shape shape);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;
  std::size_t extent(std::size_t axis) const;

  std::vector<double>& data();
  const std::vector<double>& data() const;
  double value() const;  // single-element tensors only
  double at(std::initializer_list<std::size_t> idx) const;
  double& at(std::initializer_list<std::size_t> idx);

  bool requires_grad() const;
  void set_requires_grad(bool rg);
  bool has_grad() const;
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  std::vector<double>& ensure_grad();  // allocates zeros on first use
  void zero_grad();

  /// Deep copy of the values into fresh storage; grad is not copied.
  Tensor detached(bool requires_grad = false) const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
};

/// Reverse-mode tape. Constructing one makes it the active tape for the
/// current thread; ops record a backward closure while a tape is active and
/// some input requires grad. backward() replays the closures exactly once,
/// in reverse execution order. Independent tapes on different threads do not
/// interact.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t num_records() const { return records_.size(); }
  bool consumed() const { return consumed_; }
  void reset();

  static bool active();
  static void record(std::function<void()> backward_fn);
  /// True when an op called with these inputs must record.
  static bool recording(std::initializer_list<Tensor> inputs);

  friend void backward(Tensor& loss);

 private:
  std::vector<std::function<void()>> records_;
  bool consumed_ = false;
  Tape* prev_ = nullptr;
};

/// Propagates d loss / d tensor into every participating tensor's grad
/// buffer. loss must be scalar and recorded on the active tape; calling
/// twice without Tape::reset is an error.
void backward(Tensor& loss);

// ---- differentiable operations ------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

Tensor add(const Tensor& a, const Tensor& b);  // same shape
Tensor mul(const Tensor& a, const Tensor& b);  // Hadamard
Tensor gelu(const Tensor& x);
Tensor elu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp_(const Tensor& x);
Tensor log_(const Tensor& x);

Tensor scale(const Tensor& x, double c);
Tensor scale(const Tensor& x, const Tensor& c);  // c is a single-element tensor
Tensor add_scalar(const Tensor& x, double c);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor diag_sum(const Tensor& x);  // trace of a square rank-2 tensor

Tensor rows(const Tensor& x, std::size_t start, std::size_t count);
Tensor cols(const Tensor& x, std::size_t start, std::size_t count);
Tensor concat_rows(const std::vector<Tensor>& parts);  // rank-2, equal cols
Tensor stack_rows(const std::vector<Tensor>& rows);    // rank-1 -> rank-2
Tensor reshape(const Tensor& x, Shape shape);
Tensor l2_normalize(const Tensor& x);  // rank-1
Tensor add_rowvec(const Tensor& x, const Tensor& b);   // [m x n] + [n]
Tensor embedding_sum(const Tensor& table, const std::vector<std::size_t>& ids);

/// affine(x, w, b) = x w + b broadcast over rows.
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b);

/// Generalized contraction over an einsum-style axis spec such as
/// "n d, e s d -> n e s". Each axis name appears at most once per operand;
/// axes absent from the output are summed. Equal extents are required for
/// shared names. Matches the nested-loop definition exactly.
Tensor contract(const std::string& spec, const Tensor& a, const Tensor& b);

// ---- gradient checking ----------------------------------------------------

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t worst_coord = 0;
  std::size_t coords_checked = 0;
  bool pass = false;
};

/// Compares the tape gradient of the scalar-valued f at x against central
/// finite differences. f is re-run under fresh tapes and with plain
/// forwards, so it must be a pure function of its argument; max_coords > 0
/// caps how many coordinates are probed (0 = all).
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double h = 1e-5, double tol = 1e-4, std::size_t max_coords = 0);

}  // namespace lamoe
