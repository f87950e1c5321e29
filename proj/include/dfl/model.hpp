#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dfl/rng.hpp"
#include "dfl/tensor.hpp"

namespace dfl {

enum class LayerKind { dense, conv, relu, maxpool, flatten };

const char* layer_kind_name(LayerKind k);

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  // dense (in_features 0 = infer from incoming shape)
  int64_t in_features = 0;
  int64_t out_features = 0;
  // conv
  int64_t in_channels = 0;
  int64_t out_channels = 0;
  int kernel = 0;
  int stride = 1;
  int pad = 0;
  // maxpool
  int pool = 0;
  int pool_stride = 0;

  static LayerSpec Dense(int64_t out);
  static LayerSpec Dense(int64_t in, int64_t out);
  static LayerSpec Conv(int64_t in_ch, int64_t out_ch, int kernel, int stride,
                        int pad);
  static LayerSpec Relu();
  static LayerSpec MaxPool(int k, int stride);
  static LayerSpec Flatten();

  bool parameterized() const {
    return kind == LayerKind::dense || kind == LayerKind::conv;
  }
  bool operator==(const LayerSpec&) const = default;
};

struct InitScheme {
  enum Kind { kaiming_uniform, uniform } kind = kaiming_uniform;
  double bound = 0.0;  // uniform(-bound, bound)
};

// Weight init: kaiming draws U(-sqrt(6/fan_in), +sqrt(6/fan_in)); rank-1
// shapes are biases and come back zero-filled.
std::vector<double> init_params(const Shape& shape, const InitScheme& scheme,
                                Rng& rng);
double kaiming_bound(const Shape& shape);

// A built layer: spec plus parameter tensors ({W, b} for dense/conv).
struct Layer {
  LayerSpec spec;
  std::vector<Tensor> params;

  bool parameterized() const { return !params.empty(); }
  // Runs the layer; `substitute` overrides params (teacher path).
  Tensor forward(const Tensor& x,
                 const std::vector<Tensor>* substitute = nullptr) const;
};

// Frozen deep copy of head parameters; the storage form of one teacher.
class HeadSnapshot {
 public:
  HeadSnapshot() = default;
  explicit HeadSnapshot(std::vector<Tensor> params);

  const std::vector<Tensor>& params() const { return params_; }
  std::vector<Shape> manifest() const;
  uint64_t hash() const;

 private:
  std::vector<Tensor> params_;  // requires_grad = false, never mutated
};

// Ordered layer stack split into body and student head. head_len counts
// trailing parameterized layers; activations between them join the head.
class Model {
 public:
  Model() = default;

  const std::vector<Layer>& layers() const { return layers_; }
  int head_len() const { return head_len_; }
  size_t head_start() const { return head_start_; }
  const InitScheme& init_scheme() const { return init_; }
  const Shape& input_shape() const { return input_shape_; }

  std::vector<Tensor> params() const;
  std::vector<Tensor> body_params() const;
  std::vector<Tensor> head_params() const;
  std::vector<Shape> head_manifest() const;

  Tensor forward(const Tensor& x) const;
  Tensor body_forward(const Tensor& x) const;
  // Student head on body output.
  Tensor apply_head(const Tensor& body_out) const;
  // Teacher head: snapshot params on a detached body output; the result is
  // constant for autodiff.
  Tensor apply_head(const Tensor& body_out, const HeadSnapshot& snap) const;

  HeadSnapshot snapshot_head() const;
  void load_head(const HeadSnapshot& snap);

  uint64_t body_hash() const;

 private:
  friend Model build_model(const std::vector<LayerSpec>&, int,
                           const InitScheme&, uint64_t, const Shape&);
  std::vector<Layer> layers_;
  int head_len_ = 1;
  size_t head_start_ = 0;
  InitScheme init_;
  Shape input_shape_;  // per-sample [C,H,W] (or [D]) when known
};

// Shape-checks `specs` by symbolic propagation (numeric when `input_shape`
// is given, per-sample, no batch dim), initializes parameters from
// `rng_seed`, and resolves inferred dense in_features.
Model build_model(const std::vector<LayerSpec>& specs, int head_len,
                  const InitScheme& init, uint64_t rng_seed,
                  const Shape& input_shape = {});

// ---- checkpoint ------------------------------------------------------
// Versioned binary: magic "DFLM", u32 version, layer manifest, then
// little-endian f64 parameter blobs in layer order.

void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

// ---- presets ---------------------------------------------------------

std::vector<LayerSpec> tiny_cnn_specs(int64_t in_ch, int64_t hw,
                                      int64_t classes);
std::vector<LayerSpec> tiny_mlp_specs(int64_t dims, int64_t classes);
std::vector<LayerSpec> vgg16_specs(int64_t in_ch, int64_t hw, int64_t classes);

}  // namespace dfl
