#include "dfl/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "dfl/hash.hpp"

namespace dfl {

const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv: return "conv";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::flatten: return "flatten";
  }
  return "?";
}

LayerSpec LayerSpec::Dense(int64_t out) {
  LayerSpec s;
  s.kind = LayerKind::dense;
  s.out_features = out;
  return s;
}

LayerSpec LayerSpec::Dense(int64_t in, int64_t out) {
  LayerSpec s = Dense(out);
  s.in_features = in;
  return s;
}

LayerSpec LayerSpec::Conv(int64_t in_ch, int64_t out_ch, int kernel, int stride,
                          int pad) {
  LayerSpec s;
  s.kind = LayerKind::conv;
  s.in_channels = in_ch;
  s.out_channels = out_ch;
  s.kernel = kernel;
  s.stride = stride;
  s.pad = pad;
  return s;
}

LayerSpec LayerSpec::Relu() {
  LayerSpec s;
  s.kind = LayerKind::relu;
  return s;
}

LayerSpec LayerSpec::MaxPool(int k, int stride) {
  LayerSpec s;
  s.kind = LayerKind::maxpool;
  s.pool = k;
  s.pool_stride = stride;
  return s;
}

LayerSpec LayerSpec::Flatten() {
  LayerSpec s;
  s.kind = LayerKind::flatten;
  return s;
}

// ---- init ------------------------------------------------------------

double kaiming_bound(const Shape& shape) {
  int64_t fan_in = 0;
  if (shape.size() == 2) {
    fan_in = shape[0];  // dense W is [in, out]
  } else if (shape.size() == 4) {
    fan_in = shape[1] * shape[2] * shape[3];  // conv w is [F, C, kh, kw]
  } else {
    throw BuildError("kaiming init on unsupported shape " + shape_str(shape));
  }
  if (fan_in <= 0) throw BuildError("init with zero fan_in");
  return std::sqrt(6.0 / static_cast<double>(fan_in));
}

std::vector<double> init_params(const Shape& shape, const InitScheme& scheme,
                                Rng& rng) {
  const auto n = static_cast<size_t>(shape_numel(shape));
  std::vector<double> out(n, 0.0);
  if (shape.size() == 1) return out;  // biases start at zero
  double bound = 0.0;
  switch (scheme.kind) {
    case InitScheme::kaiming_uniform:
      bound = kaiming_bound(shape);
      break;
    case InitScheme::uniform:
      bound = scheme.bound;
      break;
  }
  for (auto& v : out) v = rng.uniform(-bound, bound);
  return out;
}

// ---- layer forward ---------------------------------------------------

Tensor Layer::forward(const Tensor& x,
                      const std::vector<Tensor>* substitute) const {
  const std::vector<Tensor>& p = substitute ? *substitute : params;
  switch (spec.kind) {
    case LayerKind::dense: {
      Tensor h = matmul(x, p[0]);
      return add_rowvec(h, p[1]);
    }
    case LayerKind::conv:
      return conv2d(x, p[0], p[1], spec.stride, spec.pad);
    case LayerKind::relu:
      return relu(x);
    case LayerKind::maxpool:
      return maxpool2d(x, spec.pool, spec.pool_stride);
    case LayerKind::flatten:
      return flatten(x);
  }
  throw BuildError("unknown layer kind");
}

// ---- HeadSnapshot ------------------------------------------------------

HeadSnapshot::HeadSnapshot(std::vector<Tensor> params)
    : params_(std::move(params)) {
  for (auto& t : params_) t.set_requires_grad(false);
}

std::vector<Shape> HeadSnapshot::manifest() const {
  std::vector<Shape> m;
  m.reserve(params_.size());
  for (const auto& t : params_) m.push_back(t.shape());
  return m;
}

uint64_t HeadSnapshot::hash() const {
  uint64_t h = kFnvOffset;
  for (const auto& t : params_) {
    h = fnv1a64(t.data().data(), t.data().size() * sizeof(double), h);
  }
  return h;
}

// ---- shape propagation -------------------------------------------------

namespace {

// Per-sample shape walk; resolves inferred dense in_features in place.
// Unknown dims are permitted until something needs them.
void propagate_shapes(std::vector<LayerSpec>& specs, const Shape& input) {
  Shape cur = input;  // empty = unknown
  for (size_t i = 0; i < specs.size(); ++i) {
    LayerSpec& s = specs[i];
    const std::string at = "layer " + std::to_string(i) + " (" +
                           layer_kind_name(s.kind) + ")";
    switch (s.kind) {
      case LayerKind::dense: {
        if (!cur.empty()) {
          if (cur.size() != 1) {
            throw BuildError(at + ": dense needs a flat input, got " +
                             shape_str(cur) + "; add a flatten layer");
          }
          if (s.in_features == 0) {
            s.in_features = cur[0];
          } else if (s.in_features != cur[0]) {
            throw BuildError(at + ": in_features " +
                             std::to_string(s.in_features) +
                             " incompatible with incoming " + shape_str(cur));
          }
        } else if (s.in_features == 0) {
          throw BuildError(at + ": cannot infer in_features without an input "
                           "shape");
        }
        if (s.out_features <= 0) throw BuildError(at + ": out_features must be positive");
        cur = {s.out_features};
        break;
      }
      case LayerKind::conv: {
        if (!cur.empty()) {
          if (cur.size() != 3) {
            throw BuildError(at + ": conv needs [C,H,W] input, got " +
                             shape_str(cur));
          }
          if (cur[0] != s.in_channels) {
            throw BuildError(at + ": in_channels " +
                             std::to_string(s.in_channels) +
                             " incompatible with incoming " + shape_str(cur));
          }
          const int64_t h = cur[1], w = cur[2];
          const int64_t k = s.kernel, st = s.stride, p = s.pad;
          if (k > h + 2 * p || k > w + 2 * p ||
              (h + 2 * p - k) % st != 0 || (w + 2 * p - k) % st != 0) {
            throw BuildError(at + ": output size not integral for input " +
                             shape_str(cur));
          }
          cur = {s.out_channels, (h + 2 * p - k) / st + 1,
                 (w + 2 * p - k) / st + 1};
        } else {
          cur = {};  // still unknown spatially
        }
        if (s.in_channels <= 0 || s.out_channels <= 0 || s.kernel <= 0) {
          throw BuildError(at + ": invalid conv dimensions");
        }
        break;
      }
      case LayerKind::relu:
        break;
      case LayerKind::maxpool: {
        if (!cur.empty()) {
          if (cur.size() != 3) {
            throw BuildError(at + ": maxpool needs [C,H,W] input, got " +
                             shape_str(cur));
          }
          const int64_t h = cur[1], w = cur[2];
          const int64_t k = s.pool, st = s.pool_stride;
          if (k > h || k > w || (h - k) % st != 0 || (w - k) % st != 0) {
            throw BuildError(at + ": window does not tile input " +
                             shape_str(cur));
          }
          cur = {cur[0], (h - k) / st + 1, (w - k) / st + 1};
        }
        if (s.pool <= 0 || s.pool_stride <= 0) {
          throw BuildError(at + ": invalid pooling window");
        }
        break;
      }
      case LayerKind::flatten:
        if (!cur.empty()) cur = {shape_numel(cur)};
        break;
    }
  }
}

}  // namespace

// ---- Model -----------------------------------------------------------

std::vector<Tensor> Model::params() const {
  std::vector<Tensor> out;
  for (const auto& l : layers_) {
    for (const auto& p : l.params) out.push_back(p);
  }
  return out;
}

std::vector<Tensor> Model::body_params() const {
  std::vector<Tensor> out;
  for (size_t i = 0; i < head_start_; ++i) {
    for (const auto& p : layers_[i].params) out.push_back(p);
  }
  return out;
}

std::vector<Tensor> Model::head_params() const {
  std::vector<Tensor> out;
  for (size_t i = head_start_; i < layers_.size(); ++i) {
    for (const auto& p : layers_[i].params) out.push_back(p);
  }
  return out;
}

std::vector<Shape> Model::head_manifest() const {
  std::vector<Shape> m;
  for (const auto& t : head_params()) m.push_back(t.shape());
  return m;
}

Tensor Model::forward(const Tensor& x) const {
  return apply_head(body_forward(x));
}

Tensor Model::body_forward(const Tensor& x) const {
  Tensor h = x;
  for (size_t i = 0; i < head_start_; ++i) h = layers_[i].forward(h);
  return h;
}

Tensor Model::apply_head(const Tensor& body_out) const {
  Tensor h = body_out;
  for (size_t i = head_start_; i < layers_.size(); ++i) {
    h = layers_[i].forward(h);
  }
  return h;
}

Tensor Model::apply_head(const Tensor& body_out,
                         const HeadSnapshot& snap) const {
  if (snap.manifest() != head_manifest()) {
    throw ShapeError("head snapshot manifest does not match the model head");
  }
  Tensor h = body_out.detach();
  size_t pi = 0;
  for (size_t i = head_start_; i < layers_.size(); ++i) {
    if (layers_[i].parameterized()) {
      const std::vector<Tensor> sub(snap.params().begin() + pi,
                                    snap.params().begin() + pi +
                                        layers_[i].params.size());
      h = layers_[i].forward(h, &sub);
      pi += layers_[i].params.size();
    } else {
      h = layers_[i].forward(h);
    }
  }
  return h;
}

HeadSnapshot Model::snapshot_head() const {
  std::vector<Tensor> copies;
  for (const auto& p : head_params()) {
    copies.push_back(p.detach());  // deep copy, no grad
  }
  return HeadSnapshot(std::move(copies));
}

void Model::load_head(const HeadSnapshot& snap) {
  if (snap.manifest() != head_manifest()) {
    throw ShapeError("head snapshot manifest does not match the model head");
  }
  auto targets = head_params();
  for (size_t i = 0; i < targets.size(); ++i) {
    auto dst = targets[i].mutable_data();
    const auto src = snap.params()[i].data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

uint64_t Model::body_hash() const {
  uint64_t h = kFnvOffset;
  for (const auto& t : body_params()) {
    h = fnv1a64(t.data().data(), t.data().size() * sizeof(double), h);
  }
  return h;
}

Model build_model(const std::vector<LayerSpec>& specs, int head_len,
                  const InitScheme& init, uint64_t rng_seed,
                  const Shape& input_shape) {
  std::vector<LayerSpec> resolved = specs;
  propagate_shapes(resolved, input_shape);

  int n_param = 0;
  for (const auto& s : resolved) {
    if (s.parameterized()) ++n_param;
  }
  if (n_param == 0) throw BuildError("model has no parameterized layers");
  if (head_len < 1 || head_len > n_param) {
    throw BuildError("head_len " + std::to_string(head_len) +
                     " out of range [1," + std::to_string(n_param) + "]");
  }

  Model m;
  m.head_len_ = head_len;
  m.init_ = init;
  m.input_shape_ = input_shape;

  Rng rng(rng_seed);
  for (const auto& s : resolved) {
    Layer l;
    l.spec = s;
    if (s.kind == LayerKind::dense) {
      const Shape w_shape{s.in_features, s.out_features};
      l.params.emplace_back(w_shape, init_params(w_shape, init, rng), true);
      const Shape b_shape{s.out_features};
      l.params.emplace_back(b_shape, init_params(b_shape, init, rng), true);
    } else if (s.kind == LayerKind::conv) {
      const Shape w_shape{s.out_channels, s.in_channels, s.kernel, s.kernel};
      l.params.emplace_back(w_shape, init_params(w_shape, init, rng), true);
      const Shape b_shape{s.out_channels};
      l.params.emplace_back(b_shape, init_params(b_shape, init, rng), true);
    }
    m.layers_.push_back(std::move(l));
  }

  // Head starts at the head_len-th parameterized layer from the end.
  int seen = 0;
  size_t start = 0;
  for (size_t i = m.layers_.size(); i-- > 0;) {
    if (m.layers_[i].parameterized()) {
      ++seen;
      if (seen == head_len) {
        start = i;
        break;
      }
    }
  }
  m.head_start_ = start;
  return m;
}

// ---- checkpoint ------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'D', 'F', 'L', 'M'};
constexpr uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <class T>
void write_pod(std::ofstream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::ifstream& is, const std::string& path) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw DataError("checkpoint truncated: " + path);
  return v;
}

}  // namespace

void save_checkpoint(const Model& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open checkpoint for writing: " + path);
  os.write(kMagic, 4);
  write_pod(os, kVersion);
  write_pod(os, static_cast<uint32_t>(model.layers().size()));
  for (const auto& l : model.layers()) {
    write_pod(os, static_cast<uint8_t>(l.spec.kind));
    const int64_t fields[9] = {l.spec.in_features,  l.spec.out_features,
                               l.spec.in_channels,  l.spec.out_channels,
                               l.spec.kernel,       l.spec.stride,
                               l.spec.pad,          l.spec.pool,
                               l.spec.pool_stride};
    os.write(reinterpret_cast<const char*>(fields), sizeof(fields));
  }
  write_pod(os, static_cast<uint32_t>(model.head_len()));
  for (const auto& p : model.params()) {
    write_pod(os, static_cast<uint32_t>(p.shape().size()));
    for (int64_t d : p.shape()) write_pod(os, d);
    os.write(reinterpret_cast<const char*>(p.data().data()),
             static_cast<std::streamsize>(p.data().size() * sizeof(double)));
  }
  if (!os) throw DataError("checkpoint write failed: " + path);
}

Model load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw DataError("bad checkpoint magic in " + path);
  }
  const auto version = read_pod<uint32_t>(is, path);
  if (version != kVersion) {
    throw DataError("unsupported checkpoint version " +
                    std::to_string(version) + " in " + path);
  }
  const auto n_layers = read_pod<uint32_t>(is, path);
  std::vector<LayerSpec> specs(n_layers);
  for (auto& s : specs) {
    const auto kind = read_pod<uint8_t>(is, path);
    if (kind > static_cast<uint8_t>(LayerKind::flatten)) {
      throw DataError("bad layer kind in " + path);
    }
    s.kind = static_cast<LayerKind>(kind);
    int64_t fields[9];
    is.read(reinterpret_cast<char*>(fields), sizeof(fields));
    if (!is) throw DataError("checkpoint truncated: " + path);
    s.in_features = fields[0];
    s.out_features = fields[1];
    s.in_channels = fields[2];
    s.out_channels = fields[3];
    s.kernel = static_cast<int>(fields[4]);
    s.stride = static_cast<int>(fields[5]);
    s.pad = static_cast<int>(fields[6]);
    s.pool = static_cast<int>(fields[7]);
    s.pool_stride = static_cast<int>(fields[8]);
  }
  const auto head_len = read_pod<uint32_t>(is, path);

  Model m = build_model(specs, static_cast<int>(head_len), InitScheme{}, 0);
  for (auto& p : m.params()) {
    const auto rank = read_pod<uint32_t>(is, path);
    Shape shape(rank);
    for (auto& d : shape) d = read_pod<int64_t>(is, path);
    if (shape != p.shape()) {
      throw DataError("checkpoint parameter shape " + shape_str(shape) +
                      " does not match model " + shape_str(p.shape()));
    }
    auto dst = p.mutable_data();
    is.read(reinterpret_cast<char*>(dst.data()),
            static_cast<std::streamsize>(dst.size() * sizeof(double)));
    if (!is) throw DataError("checkpoint truncated: " + path);
  }
  return m;
}

// ---- presets ---------------------------------------------------------

std::vector<LayerSpec> tiny_cnn_specs(int64_t in_ch, int64_t hw,
                                      int64_t classes) {
  const int64_t flat = 32 * (hw / 4) * (hw / 4);
  return {
      LayerSpec::Conv(in_ch, 16, 3, 1, 1), LayerSpec::Relu(),
      LayerSpec::MaxPool(2, 2),
      LayerSpec::Conv(16, 32, 3, 1, 1),    LayerSpec::Relu(),
      LayerSpec::MaxPool(2, 2),
      LayerSpec::Flatten(),
      LayerSpec::Dense(flat, 128),         LayerSpec::Relu(),
      LayerSpec::Dense(128, classes),
  };
}

std::vector<LayerSpec> tiny_mlp_specs(int64_t dims, int64_t classes) {
  return {
      LayerSpec::Flatten(),
      LayerSpec::Dense(dims, 64), LayerSpec::Relu(),
      LayerSpec::Dense(64, classes),
  };
}

std::vector<LayerSpec> vgg16_specs(int64_t in_ch, int64_t hw,
                                   int64_t classes) {
  std::vector<LayerSpec> specs;
  int64_t ch = in_ch;
  const struct { int convs; int64_t width; } stages[] = {
      {2, 64}, {2, 128}, {3, 256}, {3, 512}, {3, 512}};
  int64_t spatial = hw;
  for (const auto& st : stages) {
    for (int i = 0; i < st.convs; ++i) {
      specs.push_back(LayerSpec::Conv(ch, st.width, 3, 1, 1));
      specs.push_back(LayerSpec::Relu());
      ch = st.width;
    }
    specs.push_back(LayerSpec::MaxPool(2, 2));
    spatial /= 2;
  }
  specs.push_back(LayerSpec::Flatten());
  specs.push_back(LayerSpec::Dense(ch * spatial * spatial, 512));
  specs.push_back(LayerSpec::Relu());
  specs.push_back(LayerSpec::Dense(512, 512));
  specs.push_back(LayerSpec::Relu());
  specs.push_back(LayerSpec::Dense(512, classes));
  return specs;
}

}  // namespace dfl
