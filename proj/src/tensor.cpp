#include "lamoe/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cctype>
#include <numeric>
#include <sstream>
#include <tuple>
#include <utility>

#include "lamoe/error.hpp"

namespace lamoe {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << " x ";
    os << s[i];
  }
  os << "]";
  return os.str();
}

std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

// ---- Tensor ----------------------------------------------------------------

struct Tensor::Impl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::unique_ptr<std::vector<double>> grad;
};

static void check_defined(const Tensor& t, const char* who) {
  if (!t.defined()) throw ContractError(std::string(who) + ": undefined tensor");
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto impl = std::make_shared<Impl>();
  impl->data.assign(shape_size(shape), 0.0);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double value) {
  auto impl = std::make_shared<Impl>();
  impl->data.assign(shape_size(shape), value);
  impl->shape = std::move(shape);
  return Tensor(std::move(impl));
}

Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (values.size() != shape_size(shape))
    throw DimensionError("Tensor::from: " + std::to_string(values.size()) +
                         " values for shape " + shape_str(shape));
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& v : t.data()) v = rng.normal(stddev);
  return t;
}

const Shape& Tensor::shape() const {
  check_defined(*this, "shape");
  return impl_->shape;
}

std::size_t Tensor::size() const {
  check_defined(*this, "size");
  return impl_->data.size();
}

std::size_t Tensor::extent(std::size_t axis) const {
  if (axis >= rank())
    throw DimensionError("extent: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(shape()));
  return impl_->shape[axis];
}

std::vector<double>& Tensor::data() {
  check_defined(*this, "data");
  return impl_->data;
}

const std::vector<double>& Tensor::data() const {
  check_defined(*this, "data");
  return impl_->data;
}

double Tensor::value() const {
  if (size() != 1)
    throw ContractError("value: tensor has shape " + shape_str(shape()) + ", expected one element");
  return impl_->data[0];
}

static std::size_t flat_index(const Shape& shape, std::initializer_list<std::size_t> idx) {
  if (idx.size() != shape.size())
    throw DimensionError("at: " + std::to_string(idx.size()) + " indices for " + shape_str(shape));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : idx) {
    if (i >= shape[axis])
      throw DimensionError("at: index " + std::to_string(i) + " out of range on axis " +
                           std::to_string(axis) + " of " + shape_str(shape));
    flat = flat * shape[axis] + i;
    ++axis;
  }
  return flat;
}

double Tensor::at(std::initializer_list<std::size_t> idx) const {
  return data()[flat_index(shape(), idx)];
}

double& Tensor::at(std::initializer_list<std::size_t> idx) {
  return data()[flat_index(shape(), idx)];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool rg) {
  check_defined(*this, "set_requires_grad");
  impl_->requires_grad = rg;
}

bool Tensor::has_grad() const { return impl_ && impl_->grad != nullptr; }

std::vector<double>& Tensor::grad() {
  if (!has_grad()) throw ContractError("grad: no gradient present; run backward first");
  return *impl_->grad;
}

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) throw ContractError("grad: no gradient present; run backward first");
  return *impl_->grad;
}

std::vector<double>& Tensor::ensure_grad() {
  check_defined(*this, "ensure_grad");
  if (!impl_->grad) impl_->grad = std::make_unique<std::vector<double>>(impl_->data.size(), 0.0);
  return *impl_->grad;
}

void Tensor::zero_grad() {
  if (has_grad()) std::fill(impl_->grad->begin(), impl_->grad->end(), 0.0);
}

Tensor Tensor::detached(bool requires_grad) const {
  check_defined(*this, "detached");
  return Tensor::from(impl_->shape, impl_->data, requires_grad);
}

// ---- Tape -------------------------------------------------------------------

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape::Tape() {
  prev_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

void Tape::reset() {
  records_.clear();
  consumed_ = false;
}

bool Tape::active() { return g_active_tape != nullptr; }

void Tape::record(std::function<void()> backward_fn) {
  if (!g_active_tape) throw ContractError("Tape::record: no active tape");
  g_active_tape->records_.push_back(std::move(backward_fn));
}

bool Tape::recording(std::initializer_list<Tensor> inputs) {
  if (!g_active_tape) return false;
  for (const Tensor& t : inputs)
    if (t.requires_grad()) return true;
  return false;
}

void backward(Tensor& loss) {
  if (!g_active_tape) throw ContractError("backward: no active tape");
  Tape& tape = *g_active_tape;
  if (tape.consumed_)
    throw ContractError("backward: tape already consumed; call reset before reusing it");
  if (loss.size() != 1)
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad())
    throw ContractError("backward: loss was not recorded on the active tape");
  loss.ensure_grad()[0] += 1.0;
  for (auto it = tape.records_.rbegin(); it != tape.records_.rend(); ++it) (*it)();
  tape.consumed_ = true;
}

// ---- op helpers ---------------------------------------------------------------

namespace {

// Output of a recorded op: requires_grad marks participation in the tape.
Tensor make_output(Shape shape, std::vector<double> values, bool recorded) {
  return Tensor::from(std::move(shape), std::move(values), recorded);
}

bool grad_ready(const Tensor& out) { return out.has_grad(); }

void require_rank(const Tensor& t, std::size_t r, const char* who) {
  if (t.rank() != r)
    throw DimensionError(std::string(who) + ": expected rank " + std::to_string(r) + ", got " +
                         shape_str(t.shape()));
}

}  // namespace

// ---- matmul -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.extent(0), k = a.extent(1), k2 = b.extent(0), p = b.extent(1);
  if (k != k2)
    throw DimensionError("matmul: inner extents differ: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  std::vector<double> out(m * p, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* po = out.data() + i * p;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = pa[i * k + kk];
      if (aik == 0.0) continue;
      const double* pbk = pb + kk * p;
      for (std::size_t j = 0; j < p; ++j) po[j] += aik * pbk[j];
    }
  }
  const bool rec = Tape::recording({a, b});
  Tensor y = make_output({m, p}, std::move(out), rec);
  if (rec) {
    Tape::record([a, b, y, m, k, p]() mutable {
      if (!grad_ready(y)) return;
      const std::vector<double>& go = y.grad();
      if (a.requires_grad()) {
        std::vector<double>& ga = a.ensure_grad();
        const double* pb = b.data().data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < p; ++j) {
            const double g = go[i * p + j];
            if (g == 0.0) continue;
            for (std::size_t kk = 0; kk < k; ++kk) ga[i * k + kk] += g * pb[kk * p + j];
          }
      }
      if (b.requires_grad()) {
        std::vector<double>& gb = b.ensure_grad();
        const double* pa = a.data().data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t kk = 0; kk < k; ++kk) {
            const double aik = pa[i * k + kk];
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < p; ++j) gb[kk * p + j] += aik * go[i * p + j];
          }
      }
    });
  }
  return y;
}

Tensor transpose(const Tensor& x) {
  require_rank(x, 2, "transpose");
  const std::size_t m = x.extent(0), n = x.extent(1);
  std::vector<double> out(m * n);
  const std::vector<double>& xd = x.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = xd[i * n + j];
  const bool rec = Tape::recording({x});
  Tensor y = make_output({n, m}, std::move(out), rec);
  if (rec) {
    Tape::record([x, y, m, n]() mutable {
      if (!grad_ready(y) || !x.requires_grad()) return;
      const std::vector<double>& go = y.grad();
      std::vector<double>& gx = x.ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += go[j * m + i];
    });
  }
  return y;
}

// ---- softmax / layer norm ------------------------------------------------------

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank())
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(x.shape()));
  const Shape& sh = x.shape();
  const std::size_t len = sh[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= sh[i];
  for (std::size_t i = axis + 1; i < sh.size(); ++i) inner *= sh[i];

  std::vector<double> out(x.size());
  const std::vector<double>& xd = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = xd[base];
      for (std::size_t l = 1; l < len; ++l) mx = std::max(mx, xd[base + l * inner]);
      double total = 0.0;
      for (std::size_t l = 0; l < len; ++l) {
        const double e = std::exp(xd[base + l * inner] - mx);
        out[base + l * inner] = e;
        total += e;
      }
      for (std::size_t l = 0; l < len; ++l) out[base + l * inner] /= total;
    }
  }
  const bool rec = Tape::recording({x});
  Tensor y = make_output(sh, std::move(out), rec);
  if (rec) {
    Tape::record([x, y, outer, inner, len]() mutable {
      if (!grad_ready(y) || !x.requires_grad()) return;
      const std::vector<double>& go = y.grad();
      const std::vector<double>& yd = y.data();
      std::vector<double>& gx = x.ensure_grad();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          double dot = 0.0;
          for (std::size_t l = 0; l < len; ++l) {
            const std::size_t ix = base + l * inner;
            dot += go[ix] * yd[ix];
          }
          for (std::size_t l = 0; l < len; ++l) {
            const std::size_t ix = base + l * inner;
            gx[ix] += yd[ix] * (go[ix] - dot);
          }
        }
      }
    });
  }
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_rank(x, 2, "layer_norm");
  require_rank(gain, 1, "layer_norm");
  require_rank(bias, 1, "layer_norm");
  if (eps <= 0.0) throw ContractError("layer_norm: eps must be positive");
  const std::size_t n = x.extent(0), d = x.extent(1);
  if (gain.extent(0) != d || bias.extent(0) != d)
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " do not match " + shape_str(x.shape()));

  std::vector<double> out(n * d), xhat(n * d), inv_sigma(n);
  const std::vector<double>& xd = x.data();
  const std::vector<double>& gd = gain.data();
  const std::vector<double>& bd = bias.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = xd.data() + i * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = row[j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_sigma[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (row[j] - mu) * is;
      xhat[i * d + j] = xh;
      out[i * d + j] = gd[j] * xh + bd[j];
    }
  }
  const bool rec = Tape::recording({x, gain, bias});
  Tensor y = make_output({n, d}, std::move(out), rec);
  if (rec) {
    auto xh = std::make_shared<std::vector<double>>(std::move(xhat));
    auto is = std::make_shared<std::vector<double>>(std::move(inv_sigma));
    Tape::record([x, gain, bias, y, xh, is, n, d]() mutable {
      if (!grad_ready(y)) return;
      const std::vector<double>& go = y.grad();
      const std::vector<double>& gd = gain.data();
      if (x.requires_grad()) {
        std::vector<double>& gx = x.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          double mean_dy = 0.0, mean_dyxh = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dyh = go[i * d + j] * gd[j];
            mean_dy += dyh;
            mean_dyxh += dyh * (*xh)[i * d + j];
          }
          mean_dy /= static_cast<double>(d);
          mean_dyxh /= static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const double dyh = go[i * d + j] * gd[j];
            gx[i * d + j] += ((dyh - mean_dy) - (*xh)[i * d + j] * mean_dyxh) * (*is)[i];
          }
        }
      }
      if (gain.requires_grad()) {
        std::vector<double>& gg = gain.ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) gg[j] += go[i * d + j] * (*xh)[i * d + j];
      }
      if (bias.requires_grad()) {
        std::vector<double>& gb = bias.ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) gb[j] += go[i * d + j];
      }
    });
  }
  return y;
}

// ---- elementwise ----------------------------------------------------------------

namespace {

template <typename Fwd, typename Dfdx>
Tensor unary_op(const char* name, const Tensor& x, Fwd fwd, Dfdx dfdx) {
  check_defined(x, name);
  std::vector<double> out(x.size());
  const std::vector<double>& xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xd[i]);
  const bool rec = Tape::recording({x});
  Tensor y = make_output(x.shape(), std::move(out), rec);
  if (rec) {
    Tape::record([x, y, dfdx]() mutable {
      if (!grad_ready(y) || !x.requires_grad()) return;
      const std::vector<double>& go = y.grad();
      const std::vector<double>& xd = x.data();
      const std::vector<double>& yd = y.data();
      std::vector<double>& gx = x.ensure_grad();
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * dfdx(xd[i], yd[i]);
    });
  }
  return y;
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("add: shapes differ: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  std::vector<double> out(a.size());
  const std::vector<double>& ad = a.data();
  const std::vector<double>& bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  const bool rec = Tape::recording({a, b});
  Tensor y = make_output(a.shape(), std::move(out), rec);
  if (rec) {
    Tape::record([a, b, y]() mutable {
      if (!grad_ready(y)) return;
      const std::vector<double>& go = y.grad();
      if (a.requires_grad()) {
        std::vector<double>& ga = a.ensure_grad();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (b.requires_grad()) {
        std::vector<double>& gb = b.ensure_grad();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
      }
    });
  }
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("mul: shapes differ: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  std::vector<double> out(a.size());
  const std::vector<double>& ad = a.data();
  const std::vector<double>& bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  const bool rec = Tape::recording({a, b});
  Tensor y = make_output(a.shape(), std::move(out), rec);
  if (rec) {
    Tape::record([a, b, y]() mutable {
      if (!grad_ready(y)) return;
      const std::vector<double>& go = y.grad();
      if (a.requires_grad()) {
        std::vector<double>& ga = a.ensure_grad();
        const std::vector<double>& bd = b.data();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bd[i];
      }
      if (b.requires_grad()) {
        std::vector<double>& gb = b.ensure_grad();
        const std::vector<double>& ad = a.data();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * ad[i];
      }
    });
  }
  return y;
}

Tensor gelu(const Tensor& x) {
  return unary_op(
      "gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        return cdf + v * pdf;
      });
}

Tensor elu(const Tensor& x) {
  return unary_op(
      "elu", x, [](double v) { return v > 0.0 ? v : std::expm1(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : std::exp(v); });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      "sigmoid", x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor exp_(const Tensor& x) {
  return unary_op(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log_(const Tensor& x) {
  for (double v : x.data())
    if (!(v > 0.0)) throw DomainError("log: non-positive input " + std::to_string(v));
  return unary_op(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor scale(const Tensor& x, double c) {
  return unary_op(
      "scale", x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

Tensor scale(const Tensor& x, const Tensor& c) {
  if (c.size() != 1)
    throw DimensionError("scale: scaling factor must be a single element, got " +
                         shape_str(c.shape()));
  const double cv = c.data()[0];
  std::vector<double> out(x.size());
  const std::vector<double>& xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = cv * xd[i];
  const bool rec = Tape::recording({x, c});
  Tensor y = make_output(x.shape(), std::move(out), rec);
  if (rec) {
    Tape::record([x, c, y, cv]() mutable {
      if (!grad_ready(y)) return;
      const std::vector<double>& go = y.grad();
      if (x.requires_grad()) {
        std::vector<double>& gx = x.ensure_grad();
        for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * cv;
      }
      if (c.requires_grad()) {
        const std::vector<double>& xd = x.data();
        double acc = 0.0;
        for (std::size_t i = 0; i < go.size(); ++i) acc += go[i] * xd[i];
        c.ensure_grad()[0] += acc;
      }
    });
  }
  return y;
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary_op(
      "add_scalar", x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

// ---- reductions ------------------------------------------------------------------

Tensor sum(const Tensor& x) {
  check_defined(x, "sum");
  double total = 0.0;
  for (double v : x.data()) total += v;
  const bool rec = Tape::recording({x});
  Tensor y = make_output({1}, {total}, rec);
  if (rec) {
    Tape::record([x, y]() mutable {
      if (!grad_ready(y) || !x.requires_grad()) return;
      const double g = y.grad()[0];
      std::vector<double>& gx = x.ensure_grad();
      for (double& v : gx) v += g;
    });
  }
  return y;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor diag_sum(const Tensor& x) {
  require_rank(x, 2, "diag_sum");
  if (x.extent(0) != x.extent(1))
    throw DimensionError("diag_sum: tensor is not square: " + shape_str(x.shape()));
  const std::size_t n = x.extent(0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += x.data()[i * n + i];
  const bool rec = Tape::recording({x});
  Tensor y = make_output({1}, {total}, rec);
  if (rec) {
    Tape::record([x, y, n]() mutable {
      if (!grad_ready(y) || !x.requires_grad()) return;
      const double g = y.grad()[0];
      std::vector<double>& gx = x.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) gx[i * n + i] += g;
    });
  }
  return y;
}

// ---- structural ops ---------------------------------------------------------------

Tensor rows(const Tensor& x, std::size_t start, std::size_t count) {
  require_rank(x, 2, "rows");
  const std::size_t n = x.extent(0), d = x.extent(1);
  if (start + count > n)
    throw DimensionError("rows: slice [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") exceeds " + shape_str(x.shape()));
  std::vector<double> out(count * d);
  std::copy_n(x.data().begin() + start * d, count * d, out.begin());
  const bool rec = Tape::recording({x});
  Tensor y = make_output({count, d}, std::move(out), rec);
  if (rec) {
    Tape::record([x, y, start, count, d]() mutable {
      if (!grad_ready(y) || !x.requires_grad()) return;
      const std::vector<double>& go = y.grad();
      std::vector<double>& gx = x.ensure_grad();
      for (std::size_t i = 0; i < count * d; ++i) gx[start * d + i] += go[i];
    });
  }
  return y;
}

Tensor cols(const Tensor& x, std::size_t start, std::size_t count) {
  require_rank(x, 2, "cols");
  const std::size_t n = x.extent(0), d = x.extent(1);
  if (start + count > d)
    throw DimensionError("cols: slice [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") exceeds " + shape_str(x.shape()));
  std::vector<double> out(n * count);
  const std::vector<double>& xd = x.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = xd[i * d + start + j];
  const bool rec = Tape::recording({x});
  Tensor y = make_output({n, count}, std::move(out), rec);
  if (rec) {
    Tape::record([x, y, start, count, n, d]() mutable {
      if (!grad_ready(y) || !x.requires_grad()) return;
      const std::vector<double>& go = y.grad();
      std::vector<double>& gx = x.ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < count; ++j) gx[i * d + start + j] += go[i * count + j];
    });
  }
  return y;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no parts");
  for (const Tensor& p : parts) require_rank(p, 2, "concat_rows");
  const std::size_t d = parts[0].extent(1);
  std::size_t n = 0;
  for (const Tensor& p : parts) {
    if (p.extent(1) != d)
      throw DimensionError("concat_rows: column mismatch: " + shape_str(p.shape()) + " vs " +
                           shape_str(parts[0].shape()));
    n += p.extent(0);
  }
  std::vector<double> out;
  out.reserve(n * d);
  for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  bool rec = false;
  for (const Tensor& p : parts) rec = rec || Tape::recording({p});
  Tensor y = make_output({n, d}, std::move(out), rec);
  if (rec) {
    Tape::record([parts, y, d]() mutable {
      if (!grad_ready(y)) return;
      const std::vector<double>& go = y.grad();
      std::size_t offset = 0;
      for (Tensor& p : parts) {
        const std::size_t len = p.size();
        if (p.requires_grad()) {
          std::vector<double>& gp = p.ensure_grad();
          for (std::size_t i = 0; i < len; ++i) gp[i] += go[offset + i];
        }
        offset += len;
      }
    });
  }
  return y;
}

Tensor stack_rows(const std::vector<Tensor>& row_list) {
  if (row_list.empty()) throw ContractError("stack_rows: no rows");
  for (const Tensor& r : row_list) require_rank(r, 1, "stack_rows");
  const std::size_t d = row_list[0].extent(0);
  for (const Tensor& r : row_list)
    if (r.extent(0) != d)
      throw DimensionError("stack_rows: length mismatch: " + shape_str(r.shape()) + " vs " +
                           shape_str(row_list[0].shape()));
  const std::size_t n = row_list.size();
  std::vector<double> out;
  out.reserve(n * d);
  for (const Tensor& r : row_list) out.insert(out.end(), r.data().begin(), r.data().end());
  bool rec = false;
  for (const Tensor& r : row_list) rec = rec || Tape::recording({r});
  Tensor y = make_output({n, d}, std::move(out), rec);
  if (rec) {
    Tape::record([row_list, y, d]() mutable {
      if (!grad_ready(y)) return;
      const std::vector<double>& go = y.grad();
      for (std::size_t i = 0; i < row_list.size(); ++i) {
        Tensor r = row_list[i];
        if (!r.requires_grad()) continue;
        std::vector<double>& gr = r.ensure_grad();
        for (std::size_t j = 0; j < d; ++j) gr[j] += go[i * d + j];
      }
    });
  }
  return y;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  const bool rec = Tape::recording({x});
  Tensor y = make_output(std::move(shape), x.data(), rec);
  if (rec) {
    Tape::record([x, y]() mutable {
      if (!grad_ready(y) || !x.requires_grad()) return;
      const std::vector<double>& go = y.grad();
      std::vector<double>& gx = x.ensure_grad();
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    });
  }
  return y;
}

Tensor l2_normalize(const Tensor& x) {
  require_rank(x, 1, "l2_normalize");
  const std::vector<double>& xd = x.data();
  double sq = 0.0;
  for (double v : xd) sq += v * v;
  const double norm = std::max(std::sqrt(sq), 1e-300);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] / norm;
  const bool rec = Tape::recording({x});
  Tensor y = make_output(x.shape(), std::move(out), rec);
  if (rec) {
    Tape::record([x, y, norm]() mutable {
      if (!grad_ready(y) || !x.requires_grad()) return;
      const std::vector<double>& go = y.grad();
      const std::vector<double>& yd = y.data();
      std::vector<double>& gx = x.ensure_grad();
      double dot = 0.0;
      for (std::size_t i = 0; i < go.size(); ++i) dot += go[i] * yd[i];
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += (go[i] - yd[i] * dot) / norm;
    });
  }
  return y;
}

Tensor add_rowvec(const Tensor& x, const Tensor& b) {
  require_rank(x, 2, "add_rowvec");
  require_rank(b, 1, "add_rowvec");
  const std::size_t n = x.extent(0), d = x.extent(1);
  if (b.extent(0) != d)
    throw DimensionError("add_rowvec: " + shape_str(b.shape()) + " does not match " +
                         shape_str(x.shape()));
  std::vector<double> out(n * d);
  const std::vector<double>& xd = x.data();
  const std::vector<double>& bd = b.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = xd[i * d + j] + bd[j];
  const bool rec = Tape::recording({x, b});
  Tensor y = make_output({n, d}, std::move(out), rec);
  if (rec) {
    Tape::record([x, b, y, n, d]() mutable {
      if (!grad_ready(y)) return;
      const std::vector<double>& go = y.grad();
      if (x.requires_grad()) {
        std::vector<double>& gx = x.ensure_grad();
        for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
      }
      if (b.requires_grad()) {
        std::vector<double>& gb = b.ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) gb[j] += go[i * d + j];
      }
    });
  }
  return y;
}

Tensor embedding_sum(const Tensor& table, const std::vector<std::size_t>& ids) {
  require_rank(table, 2, "embedding_sum");
  const std::size_t vocab = table.extent(0), d = table.extent(1);
  for (std::size_t id : ids)
    if (id >= vocab)
      throw DimensionError("embedding_sum: id " + std::to_string(id) + " out of range for " +
                           shape_str(table.shape()));
  std::vector<double> out(d, 0.0);
  const std::vector<double>& td = table.data();
  for (std::size_t id : ids)
    for (std::size_t j = 0; j < d; ++j) out[j] += td[id * d + j];
  const bool rec = Tape::recording({table});
  Tensor y = make_output({d}, std::move(out), rec);
  if (rec) {
    Tape::record([table, y, ids, d]() mutable {
      if (!grad_ready(y) || !table.requires_grad()) return;
      const std::vector<double>& go = y.grad();
      std::vector<double>& gt = table.ensure_grad();
      for (std::size_t id : ids)
        for (std::size_t j = 0; j < d; ++j) gt[id * d + j] += go[j];
    });
  }
  return y;
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_rowvec(matmul(x, w), b);
}

// ---- contract ---------------------------------------------------------------------

namespace {

struct ContractPlan {
  std::vector<std::string> axes;       // unique axis names, output axes first
  std::vector<std::size_t> extents;    // extent per axis
  std::size_t n_output = 0;            // first n_output axes form the output
  std::vector<std::size_t> a_stride;   // stride per axis into operand a (0 = absent)
  std::vector<std::size_t> b_stride;
  std::vector<bool> a_has, b_has;
  Shape out_shape;
};

std::vector<std::string> split_axes(const std::string& part) {
  std::vector<std::string> names;
  std::string cur;
  for (char c : part) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) names.push_back(std::exchange(cur, {}));
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) names.push_back(cur);
  return names;
}

ContractPlan parse_contract(const std::string& spec, const Tensor& a, const Tensor& b) {
  const std::size_t comma = spec.find(',');
  const std::size_t arrow = spec.find("->");
  if (comma == std::string::npos || arrow == std::string::npos || arrow < comma)
    throw ContractError("contract: spec must look like \"n d, e s d -> n e s\", got \"" + spec +
                        "\"");
  const auto a_axes = split_axes(spec.substr(0, comma));
  const auto b_axes = split_axes(spec.substr(comma + 1, arrow - comma - 1));
  const auto out_axes = split_axes(spec.substr(arrow + 2));

  auto check_unique = [&spec](const std::vector<std::string>& v, const char* where) {
    for (std::size_t i = 0; i < v.size(); ++i)
      for (std::size_t j = i + 1; j < v.size(); ++j)
        if (v[i] == v[j])
          throw ContractError("contract: axis \"" + v[i] + "\" repeated in " + where + " of \"" +
                              spec + "\"");
  };
  check_unique(a_axes, "first operand");
  check_unique(b_axes, "second operand");
  check_unique(out_axes, "output");

  if (a_axes.size() != a.rank())
    throw DimensionError("contract: spec names " + std::to_string(a_axes.size()) +
                         " axes for operand of shape " + shape_str(a.shape()));
  if (b_axes.size() != b.rank())
    throw DimensionError("contract: spec names " + std::to_string(b_axes.size()) +
                         " axes for operand of shape " + shape_str(b.shape()));

  // Gather axis extents, validating shared names.
  std::vector<std::string> names;
  std::vector<std::size_t> extents;
  auto add_axis = [&](const std::string& name, std::size_t extent) {
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i] == name) {
        if (extents[i] != extent)
          throw DimensionError("contract: axis \"" + name + "\" has extents " +
                               std::to_string(extents[i]) + " and " + std::to_string(extent));
        return;
      }
    }
    names.push_back(name);
    extents.push_back(extent);
  };
  for (std::size_t i = 0; i < a_axes.size(); ++i) add_axis(a_axes[i], a.extent(i));
  for (std::size_t i = 0; i < b_axes.size(); ++i) add_axis(b_axes[i], b.extent(i));

  auto find_axis = [&names](const std::string& name) -> std::size_t {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return i;
    return names.size();
  };
  for (const std::string& name : out_axes)
    if (find_axis(name) == names.size())
      throw ContractError("contract: output axis \"" + name + "\" absent from both operands");

  // Order: output axes first, then summed axes.
  ContractPlan plan;
  std::vector<bool> used(names.size(), false);
  for (const std::string& name : out_axes) {
    const std::size_t i = find_axis(name);
    plan.axes.push_back(names[i]);
    plan.extents.push_back(extents[i]);
    plan.out_shape.push_back(extents[i]);
    used[i] = true;
  }
  plan.n_output = out_axes.size();
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (!used[i]) {
      plan.axes.push_back(names[i]);
      plan.extents.push_back(extents[i]);
    }
  }

  auto strides_for = [&plan](const std::vector<std::string>& op_axes, const Tensor& t) {
    std::vector<std::size_t> strides(plan.axes.size(), 0);
    std::vector<bool> has(plan.axes.size(), false);
    std::vector<std::size_t> op_strides(op_axes.size(), 1);
    for (std::size_t i = op_axes.size(); i-- > 1;)
      op_strides[i - 1] = op_strides[i] * t.extent(i);
    for (std::size_t i = 0; i < op_axes.size(); ++i) {
      for (std::size_t k = 0; k < plan.axes.size(); ++k) {
        if (plan.axes[k] == op_axes[i]) {
          strides[k] = op_strides[i];
          has[k] = true;
        }
      }
    }
    return std::make_pair(strides, has);
  };
  std::tie(plan.a_stride, plan.a_has) = strides_for(a_axes, a);
  std::tie(plan.b_stride, plan.b_has) = strides_for(b_axes, b);
  if (plan.out_shape.empty()) plan.out_shape = {1};
  return plan;
}

// Walks the full joint index space once, calling visit(out_idx, a_idx, b_idx).
template <typename Visit>
void contract_walk(const ContractPlan& plan, Visit visit) {
  const std::size_t n_axes = plan.axes.size();
  std::vector<std::size_t> idx(n_axes, 0);
  std::size_t out_size = 1;
  for (std::size_t i = 0; i < plan.n_output; ++i) out_size *= plan.extents[i];
  (void)out_size;
  while (true) {
    std::size_t ai = 0, bi = 0, oi = 0;
    for (std::size_t k = 0; k < n_axes; ++k) {
      ai += idx[k] * plan.a_stride[k];
      bi += idx[k] * plan.b_stride[k];
    }
    for (std::size_t k = 0; k < plan.n_output; ++k) oi = oi * plan.extents[k] + idx[k];
    visit(oi, ai, bi);
    std::size_t k = n_axes;
    while (k-- > 0) {
      if (++idx[k] < plan.extents[k]) break;
      idx[k] = 0;
      if (k == 0) return;
    }
    if (n_axes == 0) return;
  }
}

}  // namespace

Tensor contract(const std::string& spec, const Tensor& a, const Tensor& b) {
  check_defined(a, "contract");
  check_defined(b, "contract");
  const ContractPlan plan = parse_contract(spec, a, b);
  std::vector<double> out(shape_size(plan.out_shape), 0.0);
  {
    const std::vector<double>& ad = a.data();
    const std::vector<double>& bd = b.data();
    contract_walk(plan, [&](std::size_t oi, std::size_t ai, std::size_t bi) {
      out[oi] += ad[ai] * bd[bi];
    });
  }
  const bool rec = Tape::recording({a, b});
  Tensor y = make_output(plan.out_shape, std::move(out), rec);
  if (rec) {
    auto plan_ptr = std::make_shared<ContractPlan>(plan);
    Tape::record([a, b, y, plan_ptr]() mutable {
      if (!grad_ready(y)) return;
      const std::vector<double>& go = y.grad();
      const std::vector<double>& ad = a.data();
      const std::vector<double>& bd = b.data();
      std::vector<double>* ga = a.requires_grad() ? &a.ensure_grad() : nullptr;
      std::vector<double>* gb = b.requires_grad() ? &b.ensure_grad() : nullptr;
      contract_walk(*plan_ptr, [&](std::size_t oi, std::size_t ai, std::size_t bi) {
        if (ga) (*ga)[ai] += go[oi] * bd[bi];
        if (gb) (*gb)[bi] += go[oi] * ad[ai];
      });
    });
  }
  return y;
}

// ---- gradient check -----------------------------------------------------------------

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double h, double tol, std::size_t max_coords) {
  std::vector<double> analytic;
  {
    Tape tape;
    Tensor probe = x.detached(true);
    Tensor y = f(probe);
    if (y.size() != 1)
      throw ContractError("grad_check: f must be scalar-valued, got " + shape_str(y.shape()));
    backward(y);
    analytic = probe.has_grad() ? probe.grad() : std::vector<double>(x.size(), 0.0);
  }

  const std::size_t n = x.size();
  std::size_t n_check = (max_coords == 0 || max_coords >= n) ? n : max_coords;
  // Deterministic stride-based coordinate subset when capped.
  const std::size_t step = n_check == n ? 1 : std::max<std::size_t>(1, n / n_check);

  GradCheckReport report;
  Tensor probe = x.detached(false);
  std::vector<double>& pd = probe.data();
  std::size_t checked = 0;
  for (std::size_t i = 0; i < n && checked < n_check; i += step, ++checked) {
    const double orig = pd[i];
    pd[i] = orig + h;
    const double up = f(probe).value();
    pd[i] = orig - h;
    const double down = f(probe).value();
    pd[i] = orig;
    const double fd = (up - down) / (2.0 * h);
    const double denom = std::max({std::fabs(fd), std::fabs(analytic[i]), 1e-3});
    const double rel = std::fabs(fd - analytic[i]) / denom;
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst_coord = i;
    }
  }
  report.coords_checked = checked;
  report.pass = report.max_rel_err <= tol;
  return report;
}

}  // namespace lamoe
