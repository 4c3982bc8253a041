#include "tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace caps {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ']';
  return os.str();
}

static void req(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

struct Tensor::Impl {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
};

static void check_shape(const Shape& s) {
  for (int d : s) req(d >= 1, "tensor: every extent must be >= 1, got " + shape_str(s));
}

Tensor Tensor::zeros(Shape shape) {
  check_shape(shape);
  auto impl = std::make_shared<Impl>();
  impl->values.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
  impl->shape = std::move(shape);
  return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t = zeros(std::move(shape));
  std::fill(t.values().begin(), t.values().end(), value);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  check_shape(shape);
  req(shape_numel(shape) == static_cast<int64_t>(values.size()),
      "tensor: " + std::to_string(values.size()) + " values do not fill shape " + shape_str(shape));
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->values = std::move(values);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

Tensor Tensor::param(Shape shape, std::vector<double> values) {
  Tensor t = from(std::move(shape), std::move(values));
  t.impl_->requires_grad = true;
  return t;
}

const Shape& Tensor::shape() const {
  req(defined(), "tensor: undefined");
  return impl_->shape;
}
int Tensor::rank() const { return static_cast<int>(shape().size()); }
int64_t Tensor::size() const { return shape_numel(shape()); }

double* Tensor::data() { return values().data(); }
const double* Tensor::data() const { return values().data(); }
std::vector<double>& Tensor::values() {
  req(defined(), "tensor: undefined");
  return impl_->values;
}
const std::vector<double>& Tensor::values() const {
  req(defined(), "tensor: undefined");
  return impl_->values;
}

double Tensor::value() const {
  req(size() == 1, "tensor: value() needs a one-element tensor, shape is " + shape_str(shape()));
  return impl_->values[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  const Shape& s = shape();
  req(idx.size() == s.size(),
      "tensor: at() got " + std::to_string(idx.size()) + " indices for shape " + shape_str(s));
  int64_t flat = 0;
  int d = 0;
  for (int i : idx) {
    req(i >= 0 && i < s[d], "tensor: index " + std::to_string(i) + " out of bounds for axis " +
                                std::to_string(d) + " of " + shape_str(s));
    flat = flat * s[d] + i;
    ++d;
  }
  return impl_->values[static_cast<size_t>(flat)];
}

bool Tensor::requires_grad() const { return defined() && impl_->requires_grad; }
void Tensor::set_requires_grad(bool v) {
  req(defined(), "tensor: undefined");
  impl_->requires_grad = v;
}

bool Tensor::has_grad() const { return defined() && !impl_->grad.empty(); }

std::vector<double>& Tensor::grad() {
  req(defined(), "tensor: undefined");
  if (impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), 0.0);
  return impl_->grad;
}

const std::vector<double>& Tensor::grad_ref() const {
  req(defined(), "tensor: undefined");
  return impl_->grad;
}

void Tensor::zero_grad() {
  req(defined(), "tensor: undefined");
  impl_->grad.clear();
}

void Tensor::accumulate_grad(const double* g, int64_t n) {
  req(n == size(), "tensor: grad size mismatch");
  double* dst = grad().data();
  for (int64_t i = 0; i < n; ++i) dst[i] += g[i];
}

Tensor Tensor::clone() const {
  return from(shape(), values());
}

// ---- tape ----

static thread_local Tape* g_tape = nullptr;

Tape::Scope::Scope(Tape& t) : prev_(g_tape) { g_tape = &t; }
Tape::Scope::~Scope() { g_tape = prev_; }
Tape* Tape::current() { return g_tape; }

void Tape::record(const char* name, Tensor output, std::function<void()> backward) {
  nodes_.push_back(Node{name, std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  req(loss.defined() && loss.size() == 1, "backward: loss must be a scalar tensor");
  bool found = false;
  for (const Node& n : nodes_) {
    if (n.output.same_buffer(loss)) {
      found = true;
      break;
    }
  }
  req(found, "backward: loss was not produced while this tape was in scope");
  Tensor seed = loss;
  seed.grad()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->output.has_grad()) continue;  // not on any path to the loss
    it->backward();
  }
}

void Tape::clear() { nodes_.clear(); }

// ---- op helpers ----

namespace {

// Registers the backward closure when gradients can actually flow.
void finish(const char* name, Tensor& out, std::initializer_list<const Tensor*> ins,
            std::function<void()> backward) {
  bool rg = false;
  for (const Tensor* t : ins) rg = rg || t->requires_grad();
  Tape* tape = Tape::current();
  bool rec = rg && tape != nullptr;
  out.set_requires_grad(rec);
  if (rec) tape->record(name, out, std::move(backward));
}

double dot(const double* a, const double* b, int n) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  int i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

void axpy(double alpha, const double* x, double* y, int n) {
  for (int i = 0; i < n; ++i) y[i] += alpha * x[i];
}

struct AxisSplit {
  int64_t outer, n, inner;
};

// Splits shape around `axis` into [outer, n, inner] extents.
AxisSplit split_axis(const Shape& s, int axis, const char* op) {
  req(axis >= 0 && axis < static_cast<int>(s.size()),
      std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit r{1, s[axis], 1};
  for (int d = 0; d < axis; ++d) r.outer *= s[d];
  for (size_t d = axis + 1; d < s.size(); ++d) r.inner *= s[d];
  return r;
}

template <class F, class DA, class DB>
Tensor ew_binary(const char* name, const Tensor& a, const Tensor& b, F f, DA dfa, DB dfb) {
  req(a.defined() && b.defined(), std::string(name) + ": undefined input");
  bool sa = a.size() == 1, sb = b.size() == 1;
  req(sa || sb || a.shape() == b.shape(),
      std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const Tensor& lead = sa && !sb ? b : a;
  Tensor y = Tensor::zeros(lead.shape());
  const double* av = a.data();
  const double* bv = b.data();
  double* yv = y.data();
  int64_t n = y.size();
  for (int64_t i = 0; i < n; ++i)
    yv[i] = f(av[sa ? 0 : i], bv[sb ? 0 : i]);
  Tensor ac = a, bc = b, yc = y;
  finish(name, y, {&a, &b}, [ac, bc, yc, sa, sb, dfa, dfb]() mutable {
    int64_t n = yc.size();
    const double* g = yc.grad_ref().data();
    const double* av = ac.data();
    const double* bv = bc.data();
    const double* yv = yc.data();
    if (ac.requires_grad()) {
      double* ga = ac.grad().data();
      for (int64_t i = 0; i < n; ++i)
        ga[sa ? 0 : i] += g[i] * dfa(av[sa ? 0 : i], bv[sb ? 0 : i], yv[i]);
    }
    if (bc.requires_grad()) {
      double* gb = bc.grad().data();
      for (int64_t i = 0; i < n; ++i)
        gb[sb ? 0 : i] += g[i] * dfb(av[sa ? 0 : i], bv[sb ? 0 : i], yv[i]);
    }
  });
  return y;
}

template <class F, class D>
Tensor ew_unary(const char* name, const Tensor& a, F f, D df) {
  req(a.defined(), std::string(name) + ": undefined input");
  Tensor y = Tensor::zeros(a.shape());
  const double* av = a.data();
  double* yv = y.data();
  int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) yv[i] = f(av[i]);
  Tensor ac = a, yc = y;
  finish(name, y, {&a}, [ac, yc, df]() mutable {
    if (!ac.requires_grad()) return;
    int64_t n = yc.size();
    const double* g = yc.grad_ref().data();
    const double* av = ac.data();
    const double* yv = yc.data();
    double* ga = ac.grad().data();
    for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * df(av[i], yv[i]);
  });
  return y;
}

}  // namespace

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
  return ew_binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return ew_binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return ew_binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return ew_binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double out) { return -out / y; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return ew_unary(
      "add_scalar", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double c) {
  return ew_unary(
      "mul_scalar", a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Tensor negate(const Tensor& a) {
  return ew_unary(
      "negate", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor log(const Tensor& a) {
  const double* av = a.data();
  for (int64_t i = 0; i < a.size(); ++i)
    req(av[i] > 0.0, "log: input must be positive, got " + std::to_string(av[i]) + " at index " +
                         std::to_string(i));
  return ew_unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  const double* av = a.data();
  for (int64_t i = 0; i < a.size(); ++i)
    req(av[i] >= 0.0, "sqrt: input must be non-negative, got " + std::to_string(av[i]) +
                          " at index " + std::to_string(i));
  // derivative guarded so a zero-variance input (sqrt at 0) cannot emit NaN
  return ew_unary(
      "sqrt", a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 1.0 / (2.0 * std::max(y, 1e-8)); });
}

Tensor exp(const Tensor& a) {
  return ew_unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor relu(const Tensor& a) {
  return ew_unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return ew_unary(
      "sigmoid", a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

// ---- reductions / shape ----

static Tensor reduce_axis(const char* name, const Tensor& a, int axis, bool mean) {
  AxisSplit sp = split_axis(a.shape(), axis, name);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + axis);
  Tensor y = Tensor::zeros(out_shape);
  const double* av = a.data();
  double* yv = y.data();
  double scale = mean ? 1.0 / static_cast<double>(sp.n) : 1.0;
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t k = 0; k < sp.n; ++k) {
      const double* src = av + (o * sp.n + k) * sp.inner;
      double* dst = yv + o * sp.inner;
      for (int64_t i = 0; i < sp.inner; ++i) dst[i] += src[i] * scale;
    }
  Tensor ac = a, yc = y;
  finish(name, y, {&a}, [ac, yc, sp, scale]() mutable {
    if (!ac.requires_grad()) return;
    const double* g = yc.grad_ref().data();
    double* ga = ac.grad().data();
    for (int64_t o = 0; o < sp.outer; ++o)
      for (int64_t k = 0; k < sp.n; ++k) {
        double* dst = ga + (o * sp.n + k) * sp.inner;
        const double* src = g + o * sp.inner;
        for (int64_t i = 0; i < sp.inner; ++i) dst[i] += src[i] * scale;
      }
  });
  return y;
}

Tensor reduce_sum(const Tensor& a, int axis) { return reduce_axis("reduce_sum", a, axis, false); }
Tensor reduce_mean(const Tensor& a, int axis) { return reduce_axis("reduce_mean", a, axis, true); }

static Tensor reduce_all(const char* name, const Tensor& a, bool mean) {
  req(a.defined(), std::string(name) + ": undefined input");
  int64_t n = a.size();
  double scale = mean ? 1.0 / static_cast<double>(n) : 1.0;
  const double* av = a.data();
  double s = 0;
  for (int64_t i = 0; i < n; ++i) s += av[i];
  Tensor y = Tensor::scalar(s * scale);
  Tensor ac = a, yc = y;
  finish(name, y, {&a}, [ac, yc, scale]() mutable {
    if (!ac.requires_grad()) return;
    double g = yc.grad_ref()[0] * scale;
    double* ga = ac.grad().data();
    int64_t n = ac.size();
    for (int64_t i = 0; i < n; ++i) ga[i] += g;
  });
  return y;
}

Tensor sum_all(const Tensor& a) { return reduce_all("sum_all", a, false); }
Tensor mean_all(const Tensor& a) { return reduce_all("mean_all", a, true); }

Tensor expand_axis(const Tensor& a, int axis, int n) {
  req(a.defined(), "expand_axis: undefined input");
  req(n >= 1, "expand_axis: repeat count must be >= 1, got " + std::to_string(n));
  const Shape& s = a.shape();
  req(axis >= 0 && axis <= static_cast<int>(s.size()),
      "expand_axis: axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s[d];
  for (size_t d = axis; d < s.size(); ++d) inner *= s[d];
  Shape out_shape = s;
  out_shape.insert(out_shape.begin() + axis, n);
  Tensor y = Tensor::zeros(out_shape);
  const double* av = a.data();
  double* yv = y.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t k = 0; k < n; ++k)
      std::copy(av + o * inner, av + (o + 1) * inner, yv + (o * n + k) * inner);
  Tensor ac = a, yc = y;
  finish("expand_axis", y, {&a}, [ac, yc, outer, n, inner]() mutable {
    if (!ac.requires_grad()) return;
    const double* g = yc.grad_ref().data();
    double* ga = ac.grad().data();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t k = 0; k < n; ++k) {
        const double* src = g + (o * n + k) * inner;
        double* dst = ga + o * inner;
        for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
      }
  });
  return y;
}

Tensor reshape(const Tensor& a, Shape shape) {
  req(a.defined(), "reshape: undefined input");
  check_shape(shape);
  req(shape_numel(shape) == a.size(), "reshape: cannot view " + shape_str(a.shape()) + " as " +
                                          shape_str(shape) + " (element counts differ)");
  Tensor y = Tensor::from(std::move(shape), a.values());
  Tensor ac = a, yc = y;
  finish("reshape", y, {&a}, [ac, yc]() mutable {
    if (!ac.requires_grad()) return;
    ac.accumulate_grad(yc.grad_ref().data(), yc.size());
  });
  return y;
}

Tensor permute(const Tensor& a, const std::vector<int>& perm) {
  req(a.defined(), "permute: undefined input");
  const Shape& s = a.shape();
  int r = static_cast<int>(s.size());
  req(static_cast<int>(perm.size()) == r,
      "permute: got " + std::to_string(perm.size()) + " axes for rank " + std::to_string(r));
  std::vector<bool> seen(r, false);
  for (int p : perm) {
    req(p >= 0 && p < r && !seen[p], "permute: invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(r);
  for (int d = 0; d < r; ++d) out_shape[d] = s[perm[d]];
  std::vector<int64_t> in_strides(r, 1);
  for (int d = r - 2; d >= 0; --d) in_strides[d] = in_strides[d + 1] * s[d + 1];
  std::vector<int64_t> map_strides(r);  // stride in input per output axis
  for (int d = 0; d < r; ++d) map_strides[d] = in_strides[perm[d]];
  Tensor y = Tensor::zeros(out_shape);
  const double* av = a.data();
  double* yv = y.data();
  int64_t n = a.size();
  std::vector<int64_t> oc(r, 0);
  for (int64_t ofl = 0; ofl < n; ++ofl) {
    int64_t ifl = 0;
    for (int d = 0; d < r; ++d) ifl += oc[d] * map_strides[d];
    yv[ofl] = av[ifl];
    for (int d = r - 1; d >= 0; --d) {
      if (++oc[d] < out_shape[d]) break;
      oc[d] = 0;
    }
  }
  Tensor ac = a, yc = y;
  finish("permute", y, {&a}, [ac, yc, out_shape, map_strides, r]() mutable {
    if (!ac.requires_grad()) return;
    const double* g = yc.grad_ref().data();
    double* ga = ac.grad().data();
    int64_t n = yc.size();
    std::vector<int64_t> oc(r, 0);
    for (int64_t ofl = 0; ofl < n; ++ofl) {
      int64_t ifl = 0;
      for (int d = 0; d < r; ++d) ifl += oc[d] * map_strides[d];
      ga[ifl] += g[ofl];
      for (int d = r - 1; d >= 0; --d) {
        if (++oc[d] < out_shape[d]) break;
        oc[d] = 0;
      }
    }
  });
  return y;
}

Tensor narrow(const Tensor& a, int axis, int start, int len) {
  AxisSplit sp = split_axis(a.shape(), axis, "narrow");
  req(len >= 1 && start >= 0 && start + len <= sp.n,
      "narrow: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
          ") out of bounds for extent " + std::to_string(sp.n));
  Shape out_shape = a.shape();
  out_shape[axis] = len;
  Tensor y = Tensor::zeros(out_shape);
  const double* av = a.data();
  double* yv = y.data();
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t j = 0; j < len; ++j)
      std::copy(av + (o * sp.n + start + j) * sp.inner, av + (o * sp.n + start + j + 1) * sp.inner,
                yv + (o * len + j) * sp.inner);
  Tensor ac = a, yc = y;
  finish("narrow", y, {&a}, [ac, yc, sp, start, len]() mutable {
    if (!ac.requires_grad()) return;
    const double* g = yc.grad_ref().data();
    double* ga = ac.grad().data();
    for (int64_t o = 0; o < sp.outer; ++o)
      for (int64_t j = 0; j < len; ++j) {
        const double* src = g + (o * len + j) * sp.inner;
        double* dst = ga + (o * sp.n + start + j) * sp.inner;
        for (int64_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
      }
  });
  return y;
}

Tensor stack(const std::vector<Tensor>& xs, int axis) {
  req(!xs.empty(), "stack: needs at least one tensor");
  const Shape& s = xs[0].shape();
  for (const Tensor& t : xs)
    req(t.defined() && t.shape() == s, "stack: all inputs must share one shape");
  req(axis >= 0 && axis <= static_cast<int>(s.size()),
      "stack: axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s[d];
  for (size_t d = axis; d < s.size(); ++d) inner *= s[d];
  int64_t cnt = static_cast<int64_t>(xs.size());
  Shape out_shape = s;
  out_shape.insert(out_shape.begin() + axis, static_cast<int>(cnt));
  Tensor y = Tensor::zeros(out_shape);
  double* yv = y.data();
  for (int64_t k = 0; k < cnt; ++k) {
    const double* av = xs[k].data();
    for (int64_t o = 0; o < outer; ++o)
      std::copy(av + o * inner, av + (o + 1) * inner, yv + (o * cnt + k) * inner);
  }
  bool rg = false;
  for (const Tensor& t : xs) rg = rg || t.requires_grad();
  std::vector<Tensor> held = xs;
  Tensor yc = y;
  Tape* tape = Tape::current();
  bool rec = rg && tape != nullptr;
  y.set_requires_grad(rec);
  if (rec) {
    tape->record("stack", y, [held, yc, outer, inner, cnt]() mutable {
      const double* g = yc.grad_ref().data();
      for (int64_t k = 0; k < cnt; ++k) {
        if (!held[k].requires_grad()) continue;
        double* ga = held[k].grad().data();
        for (int64_t o = 0; o < outer; ++o) {
          const double* src = g + (o * cnt + k) * inner;
          double* dst = ga + o * inner;
          for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return y;
}

// ---- row softmax ----

Tensor softmax(const Tensor& a, int axis) {
  AxisSplit sp = split_axis(a.shape(), axis, "softmax");
  Tensor y = Tensor::zeros(a.shape());
  const double* av = a.data();
  double* yv = y.data();
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t i = 0; i < sp.inner; ++i) {
      int64_t base = o * sp.n * sp.inner + i;
      double m = av[base];
      for (int64_t k = 1; k < sp.n; ++k) m = std::max(m, av[base + k * sp.inner]);
      double sum = 0;
      for (int64_t k = 0; k < sp.n; ++k) {
        double e = std::exp(av[base + k * sp.inner] - m);
        yv[base + k * sp.inner] = e;
        sum += e;
      }
      double inv = 1.0 / sum;
      for (int64_t k = 0; k < sp.n; ++k) yv[base + k * sp.inner] *= inv;
    }
  Tensor ac = a, yc = y;
  finish("softmax", y, {&a}, [ac, yc, sp]() mutable {
    if (!ac.requires_grad()) return;
    const double* g = yc.grad_ref().data();
    const double* yv = yc.data();
    double* ga = ac.grad().data();
    for (int64_t o = 0; o < sp.outer; ++o)
      for (int64_t i = 0; i < sp.inner; ++i) {
        int64_t base = o * sp.n * sp.inner + i;
        double d = 0;
        for (int64_t k = 0; k < sp.n; ++k) d += g[base + k * sp.inner] * yv[base + k * sp.inner];
        for (int64_t k = 0; k < sp.n; ++k) {
          int64_t ix = base + k * sp.inner;
          ga[ix] += yv[ix] * (g[ix] - d);
        }
      }
  });
  return y;
}

Tensor log_softmax(const Tensor& a, int axis) {
  AxisSplit sp = split_axis(a.shape(), axis, "log_softmax");
  Tensor y = Tensor::zeros(a.shape());
  const double* av = a.data();
  double* yv = y.data();
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t i = 0; i < sp.inner; ++i) {
      int64_t base = o * sp.n * sp.inner + i;
      double m = av[base];
      for (int64_t k = 1; k < sp.n; ++k) m = std::max(m, av[base + k * sp.inner]);
      double sum = 0;
      for (int64_t k = 0; k < sp.n; ++k) sum += std::exp(av[base + k * sp.inner] - m);
      double lse = m + std::log(sum);
      for (int64_t k = 0; k < sp.n; ++k) yv[base + k * sp.inner] = av[base + k * sp.inner] - lse;
    }
  Tensor ac = a, yc = y;
  finish("log_softmax", y, {&a}, [ac, yc, sp]() mutable {
    if (!ac.requires_grad()) return;
    const double* g = yc.grad_ref().data();
    const double* yv = yc.data();
    double* ga = ac.grad().data();
    for (int64_t o = 0; o < sp.outer; ++o)
      for (int64_t i = 0; i < sp.inner; ++i) {
        int64_t base = o * sp.n * sp.inner + i;
        double sg = 0;
        for (int64_t k = 0; k < sp.n; ++k) sg += g[base + k * sp.inner];
        for (int64_t k = 0; k < sp.n; ++k) {
          int64_t ix = base + k * sp.inner;
          ga[ix] += g[ix] - std::exp(yv[ix]) * sg;
        }
      }
  });
  return y;
}

// ---- structured ----

Tensor neighborhood_gather(const Tensor& grid, int kernel, int stride, int pad) {
  req(grid.defined(), "neighborhood_gather: undefined input");
  req(kernel == 3, "neighborhood_gather: kernel must be 3, got " + std::to_string(kernel));
  req(pad == 0 || pad == 1, "neighborhood_gather: pad must be 0 or 1, got " + std::to_string(pad));
  req(stride == 1 || stride == 2,
      "neighborhood_gather: stride must be 1 or 2, got " + std::to_string(stride));
  const Shape& s = grid.shape();
  req(s.size() == 4, "neighborhood_gather: input must be [H, W, C, D], got " + shape_str(s));
  int h = s[0], w = s[1], c = s[2], d = s[3];
  req(h + 2 * pad >= 3 && w + 2 * pad >= 3,
      "neighborhood_gather: grid " + shape_str(s) + " too small for a 3x3 window with pad " +
          std::to_string(pad));
  int oh = (h + 2 * pad - 3) / stride + 1;
  int ow = (w + 2 * pad - 3) / stride + 1;
  Tensor y = Tensor::zeros({oh, ow, c, 9 * d});
  const double* av = grid.data();
  double* yv = y.data();
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox) {
      int iy0 = oy * stride - pad;
      int ix0 = ox * stride - pad;
      for (int ch = 0; ch < c; ++ch) {
        double* dst = yv + ((static_cast<int64_t>(oy) * ow + ox) * c + ch) * 9 * d;
        for (int wy = 0; wy < 3; ++wy)
          for (int wx = 0; wx < 3; ++wx) {
            int iy = iy0 + wy, ix = ix0 + wx;
            double* cell = dst + (wy * 3 + wx) * d;
            if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;  // stays zero
            const double* src = av + ((static_cast<int64_t>(iy) * w + ix) * c + ch) * d;
            std::copy(src, src + d, cell);
          }
      }
    }
  Tensor ac = grid, yc = y;
  finish("neighborhood_gather", y, {&grid}, [ac, yc, h, w, c, d, oh, ow, stride, pad]() mutable {
    if (!ac.requires_grad()) return;
    const double* g = yc.grad_ref().data();
    double* ga = ac.grad().data();
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        int iy0 = oy * stride - pad;
        int ix0 = ox * stride - pad;
        for (int ch = 0; ch < c; ++ch) {
          const double* src = g + ((static_cast<int64_t>(oy) * ow + ox) * c + ch) * 9 * d;
          for (int wy = 0; wy < 3; ++wy)
            for (int wx = 0; wx < 3; ++wx) {
              int iy = iy0 + wy, ix = ix0 + wx;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              double* dst = ga + ((static_cast<int64_t>(iy) * w + ix) * c + ch) * d;
              const double* cell = src + (wy * 3 + wx) * d;
              for (int k = 0; k < d; ++k) dst[k] += cell[k];
            }
        }
      }
  });
  return y;
}

Tensor affine_map(const Tensor& x, const Tensor& w, const Tensor& b) {
  req(x.defined() && w.defined() && b.defined(), "affine_map: undefined input");
  req(x.rank() >= 1, "affine_map: x must have rank >= 1");
  req(w.rank() == 2, "affine_map: w must be [F_out, F_in], got " + shape_str(w.shape()));
  int fin = x.shape().back();
  int fout = w.shape()[0];
  req(w.shape()[1] == fin, "affine_map: w " + shape_str(w.shape()) + " does not match input width " +
                               std::to_string(fin));
  req(b.rank() == 1 && b.shape()[0] == fout,
      "affine_map: b must be [" + std::to_string(fout) + "], got " + shape_str(b.shape()));
  int64_t rows = x.size() / fin;
  Shape out_shape = x.shape();
  out_shape.back() = fout;
  Tensor y = Tensor::zeros(out_shape);
  const double* xv = x.data();
  const double* wv = w.data();
  const double* bv = b.data();
  double* yv = y.data();
  for (int64_t n = 0; n < rows; ++n) {
    const double* xr = xv + n * fin;
    double* yr = yv + n * fout;
    for (int o = 0; o < fout; ++o) yr[o] = dot(xr, wv + static_cast<int64_t>(o) * fin, fin) + bv[o];
  }
  Tensor xc = x, wc = w, bc = b, yc = y;
  finish("affine_map", y, {&x, &w, &b}, [xc, wc, bc, yc, rows, fin, fout]() mutable {
    const double* g = yc.grad_ref().data();
    const double* xv = xc.data();
    const double* wv = wc.data();
    bool gx = xc.requires_grad(), gw = wc.requires_grad(), gb = bc.requires_grad();
    double* gxv = gx ? xc.grad().data() : nullptr;
    double* gwv = gw ? wc.grad().data() : nullptr;
    double* gbv = gb ? bc.grad().data() : nullptr;
    for (int64_t n = 0; n < rows; ++n) {
      const double* xr = xv + n * fin;
      const double* gr = g + n * fout;
      for (int o = 0; o < fout; ++o) {
        double go = gr[o];
        if (go == 0.0) continue;
        if (gw) axpy(go, xr, gwv + static_cast<int64_t>(o) * fin, fin);
        if (gx) axpy(go, wv + static_cast<int64_t>(o) * fin, gxv + n * fin, fin);
        if (gb) gbv[o] += go;
      }
    }
  });
  return y;
}

Tensor group_affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  req(x.defined() && w.defined() && b.defined(), "group_affine: undefined input");
  req(x.rank() == 3, "group_affine: x must be [P, G, F], got " + shape_str(x.shape()));
  req(w.rank() == 3, "group_affine: w must be [G, M, F], got " + shape_str(w.shape()));
  req(b.rank() == 2, "group_affine: b must be [G, M], got " + shape_str(b.shape()));
  int64_t p = x.shape()[0];
  int gs = x.shape()[1], f = x.shape()[2];
  int m = w.shape()[1];
  req(w.shape()[0] == gs && w.shape()[2] == f,
      "group_affine: w " + shape_str(w.shape()) + " does not match x " + shape_str(x.shape()));
  req(b.shape()[0] == gs && b.shape()[1] == m,
      "group_affine: b " + shape_str(b.shape()) + " does not match w " + shape_str(w.shape()));
  Tensor y = Tensor::zeros({static_cast<int>(p), gs, m});
  const double* xv = x.data();
  const double* wv = w.data();
  const double* bv = b.data();
  double* yv = y.data();
  for (int64_t pi = 0; pi < p; ++pi)
    for (int g = 0; g < gs; ++g) {
      const double* xr = xv + (pi * gs + g) * f;
      const double* wg = wv + static_cast<int64_t>(g) * m * f;
      const double* bg = bv + static_cast<int64_t>(g) * m;
      double* yr = yv + (pi * gs + g) * m;
      for (int mi = 0; mi < m; ++mi) yr[mi] = dot(xr, wg + static_cast<int64_t>(mi) * f, f) + bg[mi];
    }
  Tensor xc = x, wc = w, bc = b, yc = y;
  finish("group_affine", y, {&x, &w, &b}, [xc, wc, bc, yc, p, gs, f, m]() mutable {
    const double* g = yc.grad_ref().data();
    const double* xv = xc.data();
    const double* wv = wc.data();
    bool gx = xc.requires_grad(), gw = wc.requires_grad(), gb = bc.requires_grad();
    double* gxv = gx ? xc.grad().data() : nullptr;
    double* gwv = gw ? wc.grad().data() : nullptr;
    double* gbv = gb ? bc.grad().data() : nullptr;
    for (int64_t pi = 0; pi < p; ++pi)
      for (int gi = 0; gi < gs; ++gi) {
        const double* xr = xv + (pi * gs + gi) * f;
        const double* gr = g + (pi * gs + gi) * m;
        for (int mi = 0; mi < m; ++mi) {
          double go = gr[mi];
          if (go == 0.0) continue;
          int64_t wofs = (static_cast<int64_t>(gi) * m + mi) * f;
          if (gw) axpy(go, xr, gwv + wofs, f);
          if (gx) axpy(go, wv + wofs, gxv + (pi * gs + gi) * f, f);
          if (gb) gbv[static_cast<int64_t>(gi) * m + mi] += go;
        }
      }
  });
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  req(x.defined() && gain.defined() && bias.defined(), "layer_norm: undefined input");
  req(x.rank() >= 1, "layer_norm: x must have rank >= 1");
  req(gain.shape() == bias.shape(), "layer_norm: gain " + shape_str(gain.shape()) +
                                        " and bias " + shape_str(bias.shape()) + " must match");
  const Shape& xs = x.shape();
  const Shape& ss = gain.shape();
  req(!ss.empty() && ss.size() <= xs.size(), "layer_norm: gain rank invalid for x " + shape_str(xs));
  for (size_t i = 0; i < ss.size(); ++i)
    req(ss[ss.size() - 1 - i] == xs[xs.size() - 1 - i],
        "layer_norm: gain " + shape_str(ss) + " is not a trailing suffix of x " + shape_str(xs));
  int d = xs.back();
  int64_t rows = x.size() / d;
  int64_t s = gain.size();
  Tensor y = Tensor::zeros(xs);
  const double* xv = x.data();
  const double* gv = gain.data();
  const double* bv = bias.data();
  double* yv = y.data();
  std::vector<double> means(rows), invs(rows);
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = xv + r * d;
    double mu = 0;
    for (int i = 0; i < d; ++i) mu += xr[i];
    mu /= d;
    double var = 0;
    for (int i = 0; i < d; ++i) {
      double t = xr[i] - mu;
      var += t * t;
    }
    var /= d;
    double inv = 1.0 / std::sqrt(var + eps);
    means[r] = mu;
    invs[r] = inv;
    int64_t off = (r * d) % s;
    double* yr = yv + r * d;
    for (int i = 0; i < d; ++i) yr[i] = gv[off + i] * ((xr[i] - mu) * inv) + bv[off + i];
  }
  Tensor xc = x, gc = gain, bc = bias, yc = y;
  finish("layer_norm", y, {&x, &gain, &bias},
         [xc, gc, bc, yc, rows, d, s, means = std::move(means), invs = std::move(invs)]() mutable {
           const double* g = yc.grad_ref().data();
           const double* xv = xc.data();
           const double* gv = gc.data();
           bool gx = xc.requires_grad(), gg = gc.requires_grad(), gb = bc.requires_grad();
           double* gxv = gx ? xc.grad().data() : nullptr;
           double* ggv = gg ? gc.grad().data() : nullptr;
           double* gbv = gb ? bc.grad().data() : nullptr;
           for (int64_t r = 0; r < rows; ++r) {
             const double* xr = xv + r * d;
             const double* gr = g + r * d;
             int64_t off = (r * d) % s;
             double mu = means[r], inv = invs[r];
             double m1 = 0, m2 = 0;
             for (int i = 0; i < d; ++i) {
               double xh = (xr[i] - mu) * inv;
               double dxh = gr[i] * gv[off + i];
               m1 += dxh;
               m2 += dxh * xh;
               if (gg) ggv[off + i] += gr[i] * xh;
               if (gb) gbv[off + i] += gr[i];
             }
             if (!gx) continue;
             m1 /= d;
             m2 /= d;
             double* gxr = gxv + r * d;
             for (int i = 0; i < d; ++i) {
               double xh = (xr[i] - mu) * inv;
               double dxh = gr[i] * gv[off + i];
               gxr[i] += inv * (dxh - m1 - xh * m2);
             }
           }
         });
  return y;
}

Tensor upsample2x(const Tensor& x) {
  req(x.defined(), "upsample2x: undefined input");
  req(x.rank() == 3, "upsample2x: input must be [H, W, F], got " + shape_str(x.shape()));
  int h = x.shape()[0], w = x.shape()[1], f = x.shape()[2];
  Tensor y = Tensor::zeros({2 * h, 2 * w, f});
  const double* xv = x.data();
  double* yv = y.data();
  for (int yy = 0; yy < 2 * h; ++yy)
    for (int xx = 0; xx < 2 * w; ++xx) {
      const double* src = xv + ((static_cast<int64_t>(yy / 2) * w) + (xx / 2)) * f;
      double* dst = yv + (static_cast<int64_t>(yy) * 2 * w + xx) * f;
      std::copy(src, src + f, dst);
    }
  Tensor ac = x, yc = y;
  finish("upsample2x", y, {&x}, [ac, yc, h, w, f]() mutable {
    if (!ac.requires_grad()) return;
    const double* g = yc.grad_ref().data();
    double* ga = ac.grad().data();
    for (int yy = 0; yy < 2 * h; ++yy)
      for (int xx = 0; xx < 2 * w; ++xx) {
        double* dst = ga + ((static_cast<int64_t>(yy / 2) * w) + (xx / 2)) * f;
        const double* src = g + (static_cast<int64_t>(yy) * 2 * w + xx) * f;
        for (int k = 0; k < f; ++k) dst[k] += src[k];
      }
  });
  return y;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
  Tensor xp = x.clone();
  xp.set_requires_grad(true);
  Tape tape;
  Tensor y;
  {
    Tape::Scope scope(tape);
    y = f(xp);
  }
  req(y.defined() && y.size() == 1, "grad_check: f must return a scalar");
  tape.backward(y);
  std::vector<double> analytic(static_cast<size_t>(x.size()), 0.0);
  if (xp.has_grad()) analytic = xp.grad_ref();
  double worst = 0;
  for (int64_t i = 0; i < x.size(); ++i) {
    Tensor xa = x.clone();
    xa.values()[static_cast<size_t>(i)] += h;
    double fp = f(xa).value();
    Tensor xb = x.clone();
    xb.values()[static_cast<size_t>(i)] -= h;
    double fm = f(xb).value();
    double fd = (fp - fm) / (2.0 * h);
    double a = analytic[static_cast<size_t>(i)];
    double err = std::fabs(a - fd) / std::max({std::fabs(a), std::fabs(fd), 1e-12});
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace caps
