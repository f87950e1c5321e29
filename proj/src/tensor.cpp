#include "dfl/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

#include "dfl/hash.hpp"

namespace dfl {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

// ---- Tensor ----------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = static_cast<size_t>(shape_numel(shape));
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return Tensor(Shape{1}, {v}, requires_grad);
}

double Tensor::item() const {
  if (size() != 1) {
    throw UsageError("item() on non-scalar tensor of shape " +
                     shape_str(shape()));
  }
  return impl_->data[0];
}

Tensor Tensor::detach() const {
  Tensor out(impl_->shape, impl_->data, false);
  return out;
}

void Tensor::assert_finite(const std::string& name) const {
  for (double v : impl_->data) {
    if (!std::isfinite(v)) {
      throw NumericError("tensor '" + name + "' contains non-finite values");
    }
  }
}

uint64_t Tensor::value_hash() const { return fnv1a64(impl_->data); }

// ---- Graph -----------------------------------------------------------

namespace {
thread_local Graph* g_active_graph = nullptr;
std::atomic<uint64_t> g_graph_counter{0};
}  // namespace

Graph::Graph() : id_(++g_graph_counter) {}

Graph::~Graph() {
  if (g_active_graph == this) g_active_graph = nullptr;
}

Graph::Scope::Scope(Graph& g) : prev_(g_active_graph) { g_active_graph = &g; }
Graph::Scope::~Scope() { g_active_graph = prev_; }

Graph* Graph::active() { return g_active_graph; }

bool Graph::recording(std::initializer_list<const Tensor*> inputs) {
  if (!g_active_graph) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

void Graph::record(const char* op, std::initializer_list<const Tensor*> inputs,
                   Tensor& output, BackwardFn fn) {
  Node n;
  n.op = op;
  n.output_id = static_cast<int>(nodes_.size());
  for (const Tensor* t : inputs) {
    const auto& ti = t->impl();
    n.input_ids.push_back(ti->graph_id == id_ ? ti->node_id : -1);
  }
  output.impl()->node_id = n.output_id;
  output.impl()->graph_id = id_;
  output.set_requires_grad(true);
  n.output = output;
  n.apply = std::move(fn);
  nodes_.push_back(std::move(n));
}

void Graph::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw UsageError("backward on non-scalar tensor of shape " +
                     shape_str(loss.shape()));
  }
  if (loss.impl()->graph_id != id_) {
    throw UsageError("backward on a tensor not recorded on this graph");
  }
  // Reset intermediate grads so each call contributes exactly one dLoss/dLeaf
  // to the leaves; leaf grads accumulate across calls.
  for (Node& n : nodes_) {
    auto& g = n.output.ensure_grad();
    std::fill(g.begin(), g.end(), 0.0);
  }
  loss.impl()->grad[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    it->apply();
  }
}

size_t Graph::op_count(const char* op) const {
  size_t c = 0;
  for (const Node& n : nodes_) {
    if (std::strcmp(n.op, op) == 0) ++c;
  }
  return c;
}

bool Graph::topologically_ordered() const {
  for (const Node& n : nodes_) {
    for (int in : n.input_ids) {
      if (in >= n.output_id) return false;
    }
  }
  return true;
}

void backward(const Tensor& loss) {
  Graph* g = Graph::active();
  if (!g) throw UsageError("backward called with no active graph");
  g->backward(loss);
}

OpCounters& op_counters() {
  thread_local OpCounters counters;
  return counters;
}

// ---- gemm kernels ----------------------------------------------------
// All kernels accumulate into C (row-major). Summation order is fixed, so
// results are bit-identical across runs.

namespace {

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(int64_t m, int64_t k, int64_t n, const double* A, const double* B,
             double* C) {
  for (int64_t i = 0; i < m; ++i) {
    double* crow = C + i * n;
    const double* arow = A + i * k;
    for (int64_t l = 0; l < k; ++l) {
      const double a = arow[l];
      const double* brow = B + l * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
void gemm_nt(int64_t m, int64_t k, int64_t n, const double* A, const double* B,
             double* C) {
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = A + i * k;
    double* crow = C + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const double* brow = B + j * k;
      double acc = 0.0;
      for (int64_t l = 0; l < k; ++l) acc += arow[l] * brow[l];
      crow[j] += acc;
    }
  }
}

// C[m,n] += A[k,m]^T * B[k,n]
void gemm_tn(int64_t m, int64_t k, int64_t n, const double* A, const double* B,
             double* C) {
  for (int64_t l = 0; l < k; ++l) {
    const double* arow = A + l * m;
    const double* brow = B + l * n;
    for (int64_t i = 0; i < m; ++i) {
      const double a = arow[i];
      double* crow = C + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
  }
}

}  // namespace

// ---- matmul ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  op_counters().matmul++;
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  gemm_nn(m, k, n, a.data().data(), b.data().data(),
          out.mutable_data().data());

  if (Graph::recording({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    Graph::active()->record("matmul", {&a, &b}, out, [ai, bi, oi, m, k, n] {
      const double* go = oi->grad.data();
      if (ai->requires_grad) {
        // dA += dC * B^T
        gemm_nt(m, n, k, go, bi->data.data(), ai->ensure_grad().data());
      }
      if (bi->requires_grad) {
        // dB += A^T * dC
        gemm_tn(k, m, n, ai->data.data(), go, bi->ensure_grad().data());
      }
    });
  }
  return out;
}

// ---- conv2d ----------------------------------------------------------
// Cross-correlation with zero padding via im2col + gemm.

namespace {

struct ConvGeom {
  int64_t batch, cin, h, w, cout, kh, kw, oh, ow;
  int stride, pad;
};

// cols[C*kh*kw, B*OH*OW]
void im2col(const double* x, const ConvGeom& g, double* cols) {
  const int64_t span = g.batch * g.oh * g.ow;
  for (int64_t c = 0; c < g.cin; ++c) {
    for (int64_t ki = 0; ki < g.kh; ++ki) {
      for (int64_t kj = 0; kj < g.kw; ++kj) {
        double* row = cols + ((c * g.kh + ki) * g.kw + kj) * span;
        for (int64_t b = 0; b < g.batch; ++b) {
          const double* img = x + (b * g.cin + c) * g.h * g.w;
          double* dst = row + b * g.oh * g.ow;
          for (int64_t oy = 0; oy < g.oh; ++oy) {
            const int64_t iy = oy * g.stride - g.pad + ki;
            if (iy < 0 || iy >= g.h) {
              for (int64_t ox = 0; ox < g.ow; ++ox) dst[oy * g.ow + ox] = 0.0;
              continue;
            }
            for (int64_t ox = 0; ox < g.ow; ++ox) {
              const int64_t ix = ox * g.stride - g.pad + kj;
              dst[oy * g.ow + ox] =
                  (ix >= 0 && ix < g.w) ? img[iy * g.w + ix] : 0.0;
            }
          }
        }
      }
    }
  }
}

// dX += col2im(dcols)
void col2im_add(const double* dcols, const ConvGeom& g, double* dx) {
  const int64_t span = g.batch * g.oh * g.ow;
  for (int64_t c = 0; c < g.cin; ++c) {
    for (int64_t ki = 0; ki < g.kh; ++ki) {
      for (int64_t kj = 0; kj < g.kw; ++kj) {
        const double* row = dcols + ((c * g.kh + ki) * g.kw + kj) * span;
        for (int64_t b = 0; b < g.batch; ++b) {
          double* img = dx + (b * g.cin + c) * g.h * g.w;
          const double* src = row + b * g.oh * g.ow;
          for (int64_t oy = 0; oy < g.oh; ++oy) {
            const int64_t iy = oy * g.stride - g.pad + ki;
            if (iy < 0 || iy >= g.h) continue;
            for (int64_t ox = 0; ox < g.ow; ++ox) {
              const int64_t ix = ox * g.stride - g.pad + kj;
              if (ix >= 0 && ix < g.w) img[iy * g.w + ix] += src[oy * g.ow + ox];
            }
          }
        }
      }
    }
  }
}

// out_mat[F, B*OH*OW] -> out[B,F,OH,OW] (+bias); inverse gathers grad back.
void scatter_out(const double* out_mat, const double* bias, const ConvGeom& g,
                 double* out) {
  const int64_t plane = g.oh * g.ow;
  for (int64_t b = 0; b < g.batch; ++b) {
    for (int64_t f = 0; f < g.cout; ++f) {
      const double* src = out_mat + f * g.batch * plane + b * plane;
      double* dst = out + (b * g.cout + f) * plane;
      const double bf = bias[f];
      for (int64_t i = 0; i < plane; ++i) dst[i] = src[i] + bf;
    }
  }
}

void gather_grad(const double* dout, const ConvGeom& g, double* dout_mat) {
  const int64_t plane = g.oh * g.ow;
  for (int64_t b = 0; b < g.batch; ++b) {
    for (int64_t f = 0; f < g.cout; ++f) {
      const double* src = dout + (b * g.cout + f) * plane;
      double* dst = dout_mat + f * g.batch * plane + b * plane;
      for (int64_t i = 0; i < plane; ++i) dst[i] = src[i];
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int pad) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw ShapeError("conv2d expects 4-d input and weights, got " +
                     shape_str(x.shape()) + " and " + shape_str(w.shape()));
  }
  if (x.dim(1) != w.dim(1)) {
    throw ShapeError("conv2d channel mismatch: input " + shape_str(x.shape()) +
                     " vs weights " + shape_str(w.shape()));
  }
  if (b.rank() != 1 || b.dim(0) != w.dim(0)) {
    throw ShapeError("conv2d bias shape " + shape_str(b.shape()) +
                     " does not match filter count " + std::to_string(w.dim(0)));
  }
  ConvGeom g{};
  g.batch = x.dim(0);
  g.cin = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.cout = w.dim(0);
  g.kh = w.dim(2);
  g.kw = w.dim(3);
  g.stride = stride;
  g.pad = pad;
  if (stride < 1 || pad < 0) throw ConfigError("conv2d: invalid stride/pad");
  if (g.kh > g.h + 2 * pad || g.kw > g.w + 2 * pad) {
    throw ConfigError("conv2d kernel larger than padded input");
  }
  if ((g.h + 2 * pad - g.kh) % stride != 0 ||
      (g.w + 2 * pad - g.kw) % stride != 0) {
    throw ConfigError("conv2d output size is not integral for input " +
                      shape_str(x.shape()) + ", kernel " +
                      shape_str(w.shape()) + ", stride " +
                      std::to_string(stride) + ", pad " + std::to_string(pad));
  }
  g.oh = (g.h + 2 * pad - g.kh) / stride + 1;
  g.ow = (g.w + 2 * pad - g.kw) / stride + 1;

  op_counters().conv2d++;
  const int64_t ckk = g.cin * g.kh * g.kw;
  const int64_t span = g.batch * g.oh * g.ow;

  auto cols = std::make_shared<std::vector<double>>(
      static_cast<size_t>(ckk * span));
  im2col(x.data().data(), g, cols->data());

  std::vector<double> out_mat(static_cast<size_t>(g.cout * span), 0.0);
  gemm_nn(g.cout, ckk, span, w.data().data(), cols->data(), out_mat.data());

  Tensor out = Tensor::zeros({g.batch, g.cout, g.oh, g.ow});
  scatter_out(out_mat.data(), b.data().data(), g, out.mutable_data().data());

  if (Graph::recording({&x, &w, &b})) {
    auto xi = x.impl(), wi = w.impl(), bi = b.impl(), oi = out.impl();
    Graph::active()->record(
        "conv2d", {&x, &w, &b}, out, [xi, wi, bi, oi, g, ckk, span, cols] {
          std::vector<double> dout_mat(static_cast<size_t>(g.cout * span));
          gather_grad(oi->grad.data(), g, dout_mat.data());
          if (bi->requires_grad) {
            auto& db = bi->ensure_grad();
            for (int64_t f = 0; f < g.cout; ++f) {
              double acc = 0.0;
              const double* row = dout_mat.data() + f * span;
              for (int64_t i = 0; i < span; ++i) acc += row[i];
              db[static_cast<size_t>(f)] += acc;
            }
          }
          if (wi->requires_grad) {
            // dW += dOut * cols^T
            gemm_nt(g.cout, span, ckk, dout_mat.data(), cols->data(),
                    wi->ensure_grad().data());
          }
          if (xi->requires_grad) {
            std::vector<double> dcols(static_cast<size_t>(ckk * span), 0.0);
            gemm_tn(ckk, g.cout, span, wi->data.data(), dout_mat.data(),
                    dcols.data());
            col2im_add(dcols.data(), g, xi->ensure_grad().data());
          }
        });
  }
  return out;
}

// ---- relu ------------------------------------------------------------

Tensor relu(const Tensor& x) {
  op_counters().relu++;
  Tensor out = Tensor::zeros(x.shape());
  const auto xd = x.data();
  auto od = out.mutable_data();
  for (int64_t i = 0; i < x.size(); ++i) od[i] = xd[i] > 0.0 ? xd[i] : 0.0;

  if (Graph::recording({&x})) {
    auto xi = x.impl(), oi = out.impl();
    Graph::active()->record("relu", {&x}, out, [xi, oi] {
      auto& gx = xi->ensure_grad();
      const auto& go = oi->grad;
      // subgradient 0 at x == 0
      for (size_t i = 0; i < gx.size(); ++i) {
        if (xi->data[i] > 0.0) gx[i] += go[i];
      }
    });
  }
  return out;
}

// ---- maxpool2d -------------------------------------------------------

Tensor maxpool2d(const Tensor& x, int k, int stride) {
  if (x.rank() != 4) {
    throw ShapeError("maxpool2d expects 4-d input, got " +
                     shape_str(x.shape()));
  }
  const int64_t batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (k < 1 || stride < 1) throw ConfigError("maxpool2d: invalid window");
  if (k > h || k > w) {
    throw ConfigError("maxpool2d window " + std::to_string(k) +
                      " larger than input " + shape_str(x.shape()));
  }
  if ((h - k) % stride != 0 || (w - k) % stride != 0) {
    throw ConfigError("maxpool2d output size is not integral for input " +
                      shape_str(x.shape()) + ", window " + std::to_string(k) +
                      ", stride " + std::to_string(stride));
  }
  const int64_t oh = (h - k) / stride + 1;
  const int64_t ow = (w - k) / stride + 1;

  op_counters().maxpool2d++;
  Tensor out = Tensor::zeros({batch, c, oh, ow});
  auto argmax = std::make_shared<std::vector<int64_t>>(
      static_cast<size_t>(out.size()));
  const auto xd = x.data();
  auto od = out.mutable_data();

  int64_t o = 0;
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t ch = 0; ch < c; ++ch) {
      const double* img = xd.data() + (b * c + ch) * h * w;
      const int64_t base = (b * c + ch) * h * w;
      for (int64_t oy = 0; oy < oh; ++oy) {
        for (int64_t ox = 0; ox < ow; ++ox, ++o) {
          double best = -std::numeric_limits<double>::infinity();
          int64_t best_idx = -1;
          for (int64_t ky = 0; ky < k; ++ky) {
            for (int64_t kx = 0; kx < k; ++kx) {
              const int64_t iy = oy * stride + ky;
              const int64_t ix = ox * stride + kx;
              const double v = img[iy * w + ix];
              if (v > best) {  // ties keep the first index
                best = v;
                best_idx = base + iy * w + ix;
              }
            }
          }
          od[o] = best;
          (*argmax)[static_cast<size_t>(o)] = best_idx;
        }
      }
    }
  }

  if (Graph::recording({&x})) {
    auto xi = x.impl(), oi = out.impl();
    Graph::active()->record("maxpool2d", {&x}, out, [xi, oi, argmax] {
      auto& gx = xi->ensure_grad();
      const auto& go = oi->grad;
      for (size_t i = 0; i < go.size(); ++i) {
        gx[static_cast<size_t>((*argmax)[i])] += go[i];
      }
    });
  }
  return out;
}

// ---- softmax ---------------------------------------------------------

Tensor softmax(const Tensor& q) {
  if (q.rank() != 2 || q.dim(1) < 1) {
    throw ShapeError("softmax expects [B,M] with M >= 1, got " +
                     shape_str(q.shape()));
  }
  for (double v : q.data()) {
    if (!std::isfinite(v)) throw NumericError("softmax: non-finite logits");
  }
  op_counters().softmax++;
  const int64_t batch = q.dim(0), m = q.dim(1);
  Tensor out = Tensor::zeros(q.shape());
  const auto qd = q.data();
  auto od = out.mutable_data();
  for (int64_t b = 0; b < batch; ++b) {
    const double* row = qd.data() + b * m;
    double* orow = od.data() + b * m;
    double mx = row[0];
    for (int64_t i = 1; i < m; ++i) mx = std::max(mx, row[i]);
    double z = 0.0;
    for (int64_t i = 0; i < m; ++i) {
      orow[i] = std::exp(row[i] - mx);
      z += orow[i];
    }
    for (int64_t i = 0; i < m; ++i) orow[i] /= z;
  }

  if (Graph::recording({&q})) {
    auto qi = q.impl(), oi = out.impl();
    Graph::active()->record("softmax", {&q}, out, [qi, oi, batch, m] {
      auto& gq = qi->ensure_grad();
      const auto& go = oi->grad;
      const auto& y = oi->data;
      for (int64_t b = 0; b < batch; ++b) {
        const double* yr = y.data() + b * m;
        const double* gr = go.data() + b * m;
        double dot = 0.0;
        for (int64_t i = 0; i < m; ++i) dot += gr[i] * yr[i];
        double* gqr = gq.data() + b * m;
        for (int64_t i = 0; i < m; ++i) gqr[i] += yr[i] * (gr[i] - dot);
      }
    });
  }
  return out;
}

// ---- cross entropy ---------------------------------------------------

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) {
    throw ShapeError("cross_entropy expects [B,M] logits, got " +
                     shape_str(logits.shape()));
  }
  const int64_t batch = logits.dim(0), m = logits.dim(1);
  if (static_cast<int64_t>(labels.size()) != batch) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) +
                     " labels for batch of " + std::to_string(batch));
  }
  for (int64_t i = 0; i < batch; ++i) {
    if (labels[static_cast<size_t>(i)] < 0 ||
        labels[static_cast<size_t>(i)] >= m) {
      throw DataError("cross_entropy: label " +
                      std::to_string(labels[static_cast<size_t>(i)]) +
                      " out of range [0," + std::to_string(m) + ") at sample " +
                      std::to_string(i));
    }
  }

  const auto qd = logits.data();
  auto probs = std::make_shared<std::vector<double>>(
      static_cast<size_t>(batch * m));
  double loss = 0.0;
  for (int64_t b = 0; b < batch; ++b) {
    const double* row = qd.data() + b * m;
    double mx = row[0];
    for (int64_t i = 1; i < m; ++i) mx = std::max(mx, row[i]);
    double z = 0.0;
    for (int64_t i = 0; i < m; ++i) z += std::exp(row[i] - mx);
    const double lse = mx + std::log(z);
    loss += lse - row[labels[static_cast<size_t>(b)]];
    double* prow = probs->data() + b * m;
    for (int64_t i = 0; i < m; ++i) prow[i] = std::exp(row[i] - lse);
  }
  Tensor out = Tensor::scalar(loss / static_cast<double>(batch));

  if (Graph::recording({&logits})) {
    auto qi = logits.impl(), oi = out.impl();
    Graph::active()->record(
        "cross_entropy", {&logits}, out, [qi, oi, probs, labels, batch, m] {
          const double up = oi->grad[0];
          auto& gq = qi->ensure_grad();
          const double inv_b = 1.0 / static_cast<double>(batch);
          for (int64_t b = 0; b < batch; ++b) {
            const double* prow = probs->data() + b * m;
            double* grow = gq.data() + b * m;
            const int lbl = labels[static_cast<size_t>(b)];
            for (int64_t i = 0; i < m; ++i) {
              const double onehot = (i == lbl) ? 1.0 : 0.0;
              grow[i] += up * (prow[i] - onehot) * inv_b;
            }
          }
        });
  }
  return out;
}

// ---- KL divergence ---------------------------------------------------

namespace {
constexpr double kKlEps = 1e-12;
constexpr double kRowSumTol = 1e-6;

void check_distribution(const Tensor& t, const char* which) {
  const int64_t batch = t.dim(0), m = t.dim(1);
  const auto d = t.data();
  for (int64_t b = 0; b < batch; ++b) {
    double s = 0.0;
    for (int64_t i = 0; i < m; ++i) {
      const double v = d[b * m + i];
      if (v < 0.0) {
        throw NumericError(std::string("kl_divergence: negative probability in ") +
                           which + " at row " + std::to_string(b));
      }
      s += v;
    }
    if (std::abs(s - 1.0) > kRowSumTol) {
      throw NumericError(std::string("kl_divergence: row ") +
                         std::to_string(b) + " of " + which +
                         " sums to " + std::to_string(s) + ", expected 1");
    }
  }
}
}  // namespace

Tensor kl_divergence(const Tensor& p, const Tensor& q) {
  if (p.rank() != 2 || q.rank() != 2 || p.shape() != q.shape()) {
    throw ShapeError("kl_divergence shape mismatch: " + shape_str(p.shape()) +
                     " vs " + shape_str(q.shape()));
  }
  check_distribution(p, "p");
  check_distribution(q, "q");

  const int64_t batch = p.dim(0), m = p.dim(1);
  const auto pd = p.data();
  const auto qd = q.data();
  double total = 0.0;
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t i = 0; i < m; ++i) {
      const double pv = pd[b * m + i];
      if (pv <= 0.0) continue;  // 0 * log 0 = 0
      const double qv = std::max(qd[b * m + i], kKlEps);
      total += pv * (std::log(pv) - std::log(qv));
    }
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(batch));

  if (Graph::recording({&p, &q})) {
    auto pi = p.impl(), qi = q.impl(), oi = out.impl();
    Graph::active()->record("kl_divergence", {&p, &q}, out,
                            [pi, qi, oi, batch, m] {
      const double up = oi->grad[0];
      const double inv_b = 1.0 / static_cast<double>(batch);
      if (pi->requires_grad) {
        auto& gp = pi->ensure_grad();
        for (int64_t j = 0; j < batch * m; ++j) {
          const double pv = pi->data[static_cast<size_t>(j)];
          if (pv <= 0.0) continue;
          const double qv = std::max(qi->data[static_cast<size_t>(j)], kKlEps);
          gp[static_cast<size_t>(j)] +=
              up * inv_b * (std::log(pv) - std::log(qv) + 1.0);
        }
      }
      if (qi->requires_grad) {
        auto& gq = qi->ensure_grad();
        for (int64_t j = 0; j < batch * m; ++j) {
          const double pv = pi->data[static_cast<size_t>(j)];
          const double qv = qi->data[static_cast<size_t>(j)];
          if (pv <= 0.0 || qv <= kKlEps) continue;
          gq[static_cast<size_t>(j)] -= up * inv_b * pv / qv;
        }
      }
    });
  }
  return out;
}

// ---- elementwise / reductions ----------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros(a.shape());
  const auto ad = a.data();
  const auto bd = b.data();
  auto od = out.mutable_data();
  for (int64_t i = 0; i < a.size(); ++i) od[i] = ad[i] + bd[i];

  if (Graph::recording({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    Graph::active()->record("add", {&a, &b}, out, [ai, bi, oi] {
      const auto& go = oi->grad;
      if (ai->requires_grad) {
        auto& ga = ai->ensure_grad();
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (bi->requires_grad) {
        auto& gb = bi->ensure_grad();
        for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
      }
    });
  }
  return out;
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  if (x.rank() != 2 || v.rank() != 1 || x.dim(1) != v.dim(0)) {
    throw ShapeError("add_rowvec shape mismatch: " + shape_str(x.shape()) +
                     " + " + shape_str(v.shape()));
  }
  const int64_t batch = x.dim(0), n = x.dim(1);
  Tensor out = Tensor::zeros(x.shape());
  const auto xd = x.data();
  const auto vd = v.data();
  auto od = out.mutable_data();
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t i = 0; i < n; ++i) od[b * n + i] = xd[b * n + i] + vd[i];
  }

  if (Graph::recording({&x, &v})) {
    auto xi = x.impl(), vi = v.impl(), oi = out.impl();
    Graph::active()->record("add_rowvec", {&x, &v}, out,
                            [xi, vi, oi, batch, n] {
      const auto& go = oi->grad;
      if (xi->requires_grad) {
        auto& gx = xi->ensure_grad();
        for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
      }
      if (vi->requires_grad) {
        auto& gv = vi->ensure_grad();
        for (int64_t b = 0; b < batch; ++b) {
          for (int64_t i = 0; i < n; ++i) {
            gv[static_cast<size_t>(i)] += go[static_cast<size_t>(b * n + i)];
          }
        }
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, double c) {
  Tensor out = Tensor::zeros(x.shape());
  const auto xd = x.data();
  auto od = out.mutable_data();
  for (int64_t i = 0; i < x.size(); ++i) od[i] = xd[i] * c;

  if (Graph::recording({&x})) {
    auto xi = x.impl(), oi = out.impl();
    Graph::active()->record("scale", {&x}, out, [xi, oi, c] {
      auto& gx = xi->ensure_grad();
      const auto& go = oi->grad;
      for (size_t i = 0; i < go.size(); ++i) gx[i] += c * go[i];
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor out = Tensor::scalar(acc);

  if (Graph::recording({&x})) {
    auto xi = x.impl(), oi = out.impl();
    Graph::active()->record("sum", {&x}, out, [xi, oi] {
      auto& gx = xi->ensure_grad();
      const double up = oi->grad[0];
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += up;
    });
  }
  return out;
}

Tensor flatten(const Tensor& x) {
  if (x.rank() < 2) {
    throw ShapeError("flatten expects rank >= 2, got " + shape_str(x.shape()));
  }
  const int64_t batch = x.dim(0);
  const int64_t rest = x.size() / batch;
  Tensor out({batch, rest},
             std::vector<double>(x.data().begin(), x.data().end()));

  if (Graph::recording({&x})) {
    auto xi = x.impl(), oi = out.impl();
    Graph::active()->record("flatten", {&x}, out, [xi, oi] {
      auto& gx = xi->ensure_grad();
      const auto& go = oi->grad;
      for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    });
  }
  return out;
}

}  // namespace dfl
