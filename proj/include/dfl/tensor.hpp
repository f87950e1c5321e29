#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dfl/error.hpp"

namespace dfl {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Storage behind a Tensor handle. Exposed so op kernels and backward closures
// can reach the buffers directly; treat as library-internal.
struct TensorImpl {
  Shape shape;
  std::vector<double> data;   // row-major
  std::vector<double> grad;   // empty until backward touches this tensor
  bool requires_grad = false;
  int node_id = -1;           // tape node that produced this tensor, -1 = leaf
  uint64_t graph_id = 0;      // id of that tape, 0 = leaf

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

// Value-semantic handle to a dense f64 tensor with optional gradient buffer.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t size() const { return static_cast<int64_t>(impl_->data.size()); }
  int64_t dim(size_t i) const { return impl_->shape[i]; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::vector<double>& ensure_grad() { return impl_->ensure_grad(); }
  void zero_grad() {
    if (!impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  }

  // Scalar value; UsageError on non-scalars.
  double item() const;

  // Same values, constant for autodiff (no grad, not on any tape).
  Tensor detach() const;

  // NumericError naming `name` if any value is NaN/Inf.
  void assert_finite(const std::string& name) const;

  uint64_t value_hash() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Tape of recorded operations, rebuilt per training step. Nodes are appended
// in execution order; backward replays them in strictly reverse order.
class Graph {
 public:
  using BackwardFn = std::function<void()>;

  Graph();
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  ~Graph();

  // Makes this graph the active tape for ops run inside the scope.
  class Scope {
   public:
    explicit Scope(Graph& g);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Graph* prev_;
  };

  static Graph* active();

  // True when the op over `inputs` should be recorded on the active tape.
  static bool recording(std::initializer_list<const Tensor*> inputs);

  void record(const char* op, std::initializer_list<const Tensor*> inputs,
              Tensor& output, BackwardFn fn);

  // Accumulates dLoss/dLeaf into every reachable leaf grad buffer. Repeated
  // calls keep accumulating; intermediate grads are reset per call.
  void backward(const Tensor& loss);

  size_t node_count() const { return nodes_.size(); }
  size_t op_count(const char* op) const;
  bool topologically_ordered() const;

 private:
  struct Node {
    const char* op;
    std::vector<int> input_ids;
    int output_id;
    Tensor output;
    BackwardFn apply;
  };
  std::vector<Node> nodes_;
  uint64_t id_;
};

// Free-function form of Graph::backward on the active tape.
void backward(const Tensor& loss);

// Per-thread forward-op counters (test instrumentation).
struct OpCounters {
  uint64_t matmul = 0;
  uint64_t conv2d = 0;
  uint64_t relu = 0;
  uint64_t maxpool2d = 0;
  uint64_t softmax = 0;
  void reset() { *this = OpCounters{}; }
};
OpCounters& op_counters();

// ---- ops -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int pad);
Tensor relu(const Tensor& x);
Tensor maxpool2d(const Tensor& x, int k, int stride);
Tensor softmax(const Tensor& q);
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);
Tensor kl_divergence(const Tensor& p, const Tensor& q);

Tensor add(const Tensor& a, const Tensor& b);
Tensor add_rowvec(const Tensor& x, const Tensor& v);
Tensor scale(const Tensor& x, double c);
Tensor sum(const Tensor& x);
Tensor flatten(const Tensor& x);

}  // namespace dfl
