#pragma once

// Minimal reverse-mode autodiff engine on dense double tensors.
//
// Tensors are shared handles to row-major value buffers. Ops are free
// functions; while a Tape is in scope (Tape::Scope), every op whose inputs
// require gradients records a backward closure. Tape::backward visits the
// recorded ops in reverse order and accumulates gradients into every tensor
// with requires_grad set (parameters keep their grads across items, so a
// batch can be accumulated with repeated backward calls).

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace caps {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// bad layer/variant/CLI configuration
struct ConfigError : Error {
  using Error::Error;
};
// unreadable or malformed dataset/checkpoint bytes
struct DataError : Error {
  using Error::Error;
};
// NaN loss during training
struct DivergedError : Error {
  using Error::Error;
};
// filesystem write/create failure
struct IoError : Error {
  using Error::Error;
};

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);  // rank-0
  // fresh buffer marked as a trainable parameter
  static Tensor param(Shape shape, std::vector<double> values);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int rank() const;
  int64_t size() const;

  double* data();
  const double* data() const;
  std::vector<double>& values();
  const std::vector<double>& values() const;

  double value() const;  // sole element of a one-element tensor
  double at(std::initializer_list<int> idx) const;

  bool requires_grad() const;
  void set_requires_grad(bool v);

  bool has_grad() const;
  std::vector<double>& grad();  // allocates zeros on first use
  const std::vector<double>& grad_ref() const;  // empty if never touched
  void zero_grad();  // drops the grad buffer
  void accumulate_grad(const double* g, int64_t n);

  Tensor clone() const;  // deep copy of values, no grad, not a parameter

  bool same_buffer(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  friend class Tape;
};

// Records ops in execution order (a valid topological order of the graph).
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Makes this tape the ambient recorder for the current thread.
  class Scope {
   public:
    explicit Scope(Tape& t);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

  static Tape* current();

  void record(const char* name, Tensor output, std::function<void()> backward);

  // Seeds d(loss)/d(loss) = 1 and sweeps recorded ops in reverse. `loss`
  // must be a scalar produced while this tape was in scope.
  void backward(const Tensor& loss);

  void clear();
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    const char* name;
    Tensor output;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
};

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor negate(const Tensor& a);
Tensor log(const Tensor& a);   // rejects inputs <= 0
Tensor sqrt(const Tensor& a);  // rejects inputs < 0; backward guarded at 0
Tensor exp(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

// ---- reductions / shape ----
Tensor reduce_sum(const Tensor& a, int axis);
Tensor reduce_mean(const Tensor& a, int axis);
Tensor sum_all(const Tensor& a);   // rank-0
Tensor mean_all(const Tensor& a);  // rank-0
Tensor expand_axis(const Tensor& a, int axis, int n);  // insert axis, repeat n
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<int>& perm);
Tensor narrow(const Tensor& a, int axis, int start, int len);
Tensor stack(const std::vector<Tensor>& xs, int axis);  // new axis at `axis`

// ---- row softmax ----
Tensor softmax(const Tensor& a, int axis);
Tensor log_softmax(const Tensor& a, int axis);

// ---- structured ----
// grid [H, W, C, D] -> [H', W', C, 9*D]; 3x3 neighborhood around each output
// position (zero padded), window cells in row-major order, D contiguous per
// cell. H' = (H + 2*pad - 3) / stride + 1. Only kernel 3, pad in {0,1},
// stride in {1,2}.
Tensor neighborhood_gather(const Tensor& grid, int kernel, int stride, int pad);

// x [..., F_in] times w [F_out, F_in] plus b [F_out] -> [..., F_out]
Tensor affine_map(const Tensor& x, const Tensor& w, const Tensor& b);

// x [P, G, F], w [G, M, F], b [G, M] -> [P, G, M]; independent map per group
Tensor group_affine(const Tensor& x, const Tensor& w, const Tensor& b);

// Normalizes over the last axis. gain/bias shapes must be a trailing suffix
// of x's shape (e.g. [D], or [C, D] to give each channel its own scale).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

// [H, W, F] -> [2H, 2W, F] nearest neighbor
Tensor upsample2x(const Tensor& x);

// Max over coordinates of |analytic - central difference| /
// max(|analytic|, |central|, 1e-12). f must map x to a scalar.
double grad_check(const std::function<Tensor(const Tensor&)>& f,
                  const Tensor& x, double h = 1e-5);

}  // namespace caps
