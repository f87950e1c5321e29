#include "dfl/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "dfl/error.hpp"

namespace dfl {

namespace {

constexpr int64_t kCifarHw = 32;
constexpr int64_t kCifarPixels = 3 * kCifarHw * kCifarHw;

int64_t record_size(CifarVariant v) {
  return (v == CifarVariant::cifar10 ? 1 : 2) + kCifarPixels;
}

int class_count_of(CifarVariant v) {
  return v == CifarVariant::cifar10 ? 10 : 100;
}

std::vector<unsigned char> read_all(const std::string& path) {
  std::ifstream is(path, std::ios::binary | std::ios::ate);
  if (!is) throw DataError("cannot open dataset file: " + path);
  const auto size = static_cast<size_t>(is.tellg());
  is.seekg(0);
  std::vector<unsigned char> bytes(size);
  is.read(reinterpret_cast<char*>(bytes.data()),
          static_cast<std::streamsize>(size));
  if (!is) throw DataError("short read on dataset file: " + path);
  return bytes;
}

}  // namespace

Dataset read_cifar_file(const std::string& path, CifarVariant variant,
                        Dataset::Split split, int64_t expected_records) {
  const auto bytes = read_all(path);
  const int64_t rec = record_size(variant);
  if (bytes.size() % static_cast<size_t>(rec) != 0) {
    throw DataError("corrupt CIFAR file " + path + ": " +
                    std::to_string(bytes.size()) +
                    " bytes is not a multiple of the record size " +
                    std::to_string(rec));
  }
  const int64_t n = static_cast<int64_t>(bytes.size()) / rec;
  if (expected_records >= 0 && n != expected_records) {
    throw DataError("corrupt CIFAR file " + path + ": expected " +
                    std::to_string(expected_records * rec) + " bytes, got " +
                    std::to_string(bytes.size()));
  }
  const int m = class_count_of(variant);

  Dataset ds;
  ds.class_count = m;
  ds.split = split;
  ds.labels.resize(static_cast<size_t>(n));
  std::vector<double> pixels(static_cast<size_t>(n * kCifarPixels));
  for (int64_t i = 0; i < n; ++i) {
    const unsigned char* r = bytes.data() + i * rec;
    // CIFAR-100 records carry coarse then fine label; fine is used.
    const int label = variant == CifarVariant::cifar10 ? r[0] : r[1];
    if (label >= m) {
      throw DataError("corrupt CIFAR file " + path + ": label " +
                      std::to_string(label) + " >= " + std::to_string(m) +
                      " at byte offset " + std::to_string(i * rec));
    }
    ds.labels[static_cast<size_t>(i)] = label;
    const unsigned char* px = r + (rec - kCifarPixels);
    double* dst = pixels.data() + i * kCifarPixels;
    for (int64_t j = 0; j < kCifarPixels; ++j) {
      dst[j] = static_cast<double>(px[j]) / 255.0;
    }
  }
  ds.images = Tensor({n, 3, kCifarHw, kCifarHw}, std::move(pixels));
  return ds;
}

void write_cifar_file(const Dataset& ds, const std::string& path,
                      CifarVariant variant) {
  const Shape s = ds.sample_shape();
  if (s != Shape{3, kCifarHw, kCifarHw}) {
    throw DataError("CIFAR export needs [3,32,32] images, got " +
                    shape_str(s));
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open for writing: " + path);
  const auto img = ds.images.data();
  for (int64_t i = 0; i < ds.n(); ++i) {
    if (variant == CifarVariant::cifar100) os.put(0);  // coarse label unused
    os.put(static_cast<char>(ds.labels[static_cast<size_t>(i)]));
    const double* px = img.data() + i * kCifarPixels;
    for (int64_t j = 0; j < kCifarPixels; ++j) {
      const double v = std::clamp(px[j], 0.0, 1.0);
      os.put(static_cast<char>(std::lround(v * 255.0)));
    }
  }
  if (!os) throw DataError("write failed: " + path);
}

std::pair<Dataset, Dataset> load_cifar(const std::string& dir,
                                       CifarVariant variant) {
  namespace fs = std::filesystem;
  Dataset train, test;
  if (variant == CifarVariant::cifar10) {
    std::vector<Dataset> parts;
    for (int i = 1; i <= 5; ++i) {
      parts.push_back(read_cifar_file(
          (fs::path(dir) / ("data_batch_" + std::to_string(i) + ".bin"))
              .string(),
          variant, Dataset::Split::train, 10000));
    }
    // concatenate the five training batches
    std::vector<double> pixels;
    pixels.reserve(static_cast<size_t>(50000 * kCifarPixels));
    std::vector<int> labels;
    labels.reserve(50000);
    for (const auto& p : parts) {
      const auto d = p.images.data();
      pixels.insert(pixels.end(), d.begin(), d.end());
      labels.insert(labels.end(), p.labels.begin(), p.labels.end());
    }
    train.images = Tensor({50000, 3, kCifarHw, kCifarHw}, std::move(pixels));
    train.labels = std::move(labels);
    train.class_count = 10;
    train.split = Dataset::Split::train;
    test = read_cifar_file((fs::path(dir) / "test_batch.bin").string(),
                           variant, Dataset::Split::test, 10000);
  } else {
    train = read_cifar_file((fs::path(dir) / "train.bin").string(), variant,
                            Dataset::Split::train, 50000);
    test = read_cifar_file((fs::path(dir) / "test.bin").string(), variant,
                           Dataset::Split::test, 10000);
  }
  compute_normalization(train);
  test.channel_mean = train.channel_mean;
  test.channel_std = train.channel_std;
  return {std::move(train), std::move(test)};
}

// ---- synthetic -------------------------------------------------------

namespace {

// Pairwise-separated class centers in [lo,hi]^dims; threshold backs off
// deterministically if the draw gets crowded.
std::vector<std::vector<double>> draw_centers(int classes, int64_t dims,
                                              double lo, double hi, Rng& rng) {
  std::vector<std::vector<double>> centers;
  double min_dist = 0.35 * std::sqrt(static_cast<double>(dims) / 3.0);
  int attempts = 0;
  while (static_cast<int>(centers.size()) < classes) {
    std::vector<double> c(static_cast<size_t>(dims));
    for (auto& v : c) v = rng.uniform(lo, hi);
    bool ok = true;
    for (const auto& other : centers) {
      double d2 = 0.0;
      for (size_t i = 0; i < c.size(); ++i) {
        d2 += (c[i] - other[i]) * (c[i] - other[i]);
      }
      if (std::sqrt(d2) < min_dist) {
        ok = false;
        break;
      }
    }
    if (ok) {
      centers.push_back(std::move(c));
    } else if (++attempts % 100 == 0) {
      min_dist *= 0.9;
    }
  }
  return centers;
}

}  // namespace

Dataset synthetic_blobs(const SyntheticSpec& spec, uint64_t seed,
                        Dataset::Split split) {
  if (spec.classes < 2) throw ConfigError("synthetic_blobs: classes must be >= 2");

  Rng center_rng(Rng::mix(seed, 0));
  Rng noise_rng(Rng::mix(seed, split == Dataset::Split::train ? 1 : 2));

  const int64_t n = static_cast<int64_t>(spec.classes) * spec.n_per_class;
  Dataset ds;
  ds.class_count = spec.classes;
  ds.split = split;
  ds.labels.resize(static_cast<size_t>(n));

  if (spec.image_mode) {
    const int64_t hw = spec.hw, pixels = 3 * hw * hw;
    // class centers are RGB colors; each pixel gets independent noise and is
    // quantized to a byte so CIFAR export round-trips exactly
    const auto centers = draw_centers(spec.classes, 3, 0.2, 0.8, center_rng);
    std::vector<double> img(static_cast<size_t>(n * pixels));
    int64_t idx = 0;
    for (int cls = 0; cls < spec.classes; ++cls) {
      for (int i = 0; i < spec.n_per_class; ++i, ++idx) {
        ds.labels[static_cast<size_t>(idx)] = cls;
        double* dst = img.data() + idx * pixels;
        for (int64_t ch = 0; ch < 3; ++ch) {
          const double base = centers[static_cast<size_t>(cls)]
                                     [static_cast<size_t>(ch)];
          for (int64_t p = 0; p < hw * hw; ++p) {
            const double v =
                std::clamp(base + noise_rng.normal() * spec.spread, 0.0, 1.0);
            dst[ch * hw * hw + p] = std::lround(v * 255.0) / 255.0;
          }
        }
      }
    }
    ds.images = Tensor({n, 3, hw, hw}, std::move(img));
  } else {
    const int64_t dims = spec.dims;
    const auto centers =
        draw_centers(spec.classes, dims, 0.25, 0.75, center_rng);
    std::vector<double> vals(static_cast<size_t>(n * dims));
    int64_t idx = 0;
    for (int cls = 0; cls < spec.classes; ++cls) {
      for (int i = 0; i < spec.n_per_class; ++i, ++idx) {
        ds.labels[static_cast<size_t>(idx)] = cls;
        double* dst = vals.data() + idx * dims;
        for (int64_t d = 0; d < dims; ++d) {
          dst[d] = std::clamp(centers[static_cast<size_t>(cls)]
                                     [static_cast<size_t>(d)] +
                                  noise_rng.normal() * spec.spread,
                              0.0, 1.0);
        }
      }
    }
    ds.images = Tensor({n, dims, 1, 1}, std::move(vals));
  }
  return ds;
}

void compute_normalization(Dataset& ds) {
  const int64_t n = ds.n();
  const int64_t c = ds.images.dim(1);
  const int64_t plane = ds.images.dim(2) * ds.images.dim(3);
  ds.channel_mean.assign(static_cast<size_t>(c), 0.0);
  ds.channel_std.assign(static_cast<size_t>(c), 0.0);
  const auto img = ds.images.data();
  for (int64_t ch = 0; ch < c; ++ch) {
    double s = 0.0, s2 = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      const double* px = img.data() + (i * c + ch) * plane;
      for (int64_t p = 0; p < plane; ++p) {
        s += px[p];
        s2 += px[p] * px[p];
      }
    }
    const double count = static_cast<double>(n * plane);
    const double mean = s / count;
    const double var = std::max(s2 / count - mean * mean, 0.0);
    ds.channel_mean[static_cast<size_t>(ch)] = mean;
    ds.channel_std[static_cast<size_t>(ch)] = std::max(std::sqrt(var), 1e-8);
  }
}

// ---- augmentation ----------------------------------------------------

namespace {

void hflip_image(double* img, int64_t c, int64_t h, int64_t w) {
  for (int64_t ch = 0; ch < c; ++ch) {
    double* plane = img + ch * h * w;
    for (int64_t y = 0; y < h; ++y) {
      double* row = plane + y * w;
      for (int64_t x = 0; x < w / 2; ++x) std::swap(row[x], row[w - 1 - x]);
    }
  }
}

// Reflect-pad by `pad` then crop h x w at (oy, ox).
void crop_image(double* img, int64_t c, int64_t h, int64_t w, int pad,
                int64_t oy, int64_t ox, std::vector<double>& scratch) {
  const int64_t ph = h + 2 * pad, pw = w + 2 * pad;
  scratch.resize(static_cast<size_t>(ph * pw));
  for (int64_t ch = 0; ch < c; ++ch) {
    double* plane = img + ch * h * w;
    for (int64_t y = 0; y < ph; ++y) {
      int64_t sy = y - pad;
      if (sy < 0) sy = -sy;                    // reflect
      if (sy >= h) sy = 2 * h - 2 - sy;
      for (int64_t x = 0; x < pw; ++x) {
        int64_t sx = x - pad;
        if (sx < 0) sx = -sx;
        if (sx >= w) sx = 2 * w - 2 - sx;
        scratch[static_cast<size_t>(y * pw + x)] = plane[sy * w + sx];
      }
    }
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t x = 0; x < w; ++x) {
        plane[y * w + x] = scratch[static_cast<size_t>((y + oy) * pw + x + ox)];
      }
    }
  }
}

}  // namespace

void augment_batch(Tensor& x, bool crop_pad4, bool hflip, Rng& rng) {
  if (!crop_pad4 && !hflip) return;
  if (x.rank() != 4) {
    throw ShapeError("augment expects an image batch, got " +
                     shape_str(x.shape()));
  }
  const int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  auto data = x.mutable_data();
  std::vector<double> scratch;
  constexpr int pad = 4;
  for (int64_t i = 0; i < b; ++i) {
    double* img = data.data() + i * c * h * w;
    if (crop_pad4) {
      const int64_t oy = rng.uniform_int(2 * pad + 1);
      const int64_t ox = rng.uniform_int(2 * pad + 1);
      crop_image(img, c, h, w, pad, oy, ox, scratch);
    }
    if (hflip && rng.uniform() < 0.5) hflip_image(img, c, h, w);
  }
}

// ---- epoch iteration ---------------------------------------------------

EpochIterator::EpochIterator(const Dataset& ds, const BatchPlan& plan,
                             int64_t epoch_index)
    : ds_(&ds),
      plan_(plan),
      aug_rng_(Rng::mix(Rng::mix(plan.shuffle_seed, seed_stream::kAugment),
                        static_cast<uint64_t>(epoch_index))) {
  order_.resize(static_cast<size_t>(ds.n()));
  std::iota(order_.begin(), order_.end(), 0);
  Rng shuffle_rng(Rng::mix(Rng::mix(plan.shuffle_seed, seed_stream::kShuffle),
                           static_cast<uint64_t>(epoch_index)));
  shuffle_rng.shuffle(order_);
}

bool EpochIterator::next(Tensor& x, std::vector<int>& y) {
  const int64_t n = ds_->n();
  if (pos_ >= n) return false;
  const int64_t take = std::min(plan_.batch_size, n - pos_);
  const int64_t c = ds_->images.dim(1), h = ds_->images.dim(2),
                w = ds_->images.dim(3);
  const int64_t sample = c * h * w;

  std::vector<double> vals(static_cast<size_t>(take * sample));
  y.resize(static_cast<size_t>(take));
  const auto img = ds_->images.data();
  for (int64_t i = 0; i < take; ++i) {
    const int64_t src = order_[static_cast<size_t>(pos_ + i)];
    std::copy_n(img.data() + src * sample, sample, vals.data() + i * sample);
    y[static_cast<size_t>(i)] = ds_->labels[static_cast<size_t>(src)];
  }
  x = Tensor({take, c, h, w}, std::move(vals));

  if (ds_->split == Dataset::Split::train) {
    augment_batch(x, plan_.crop_pad4, plan_.hflip, aug_rng_);
  }
  if (plan_.normalize) {
    if (ds_->channel_mean.size() != static_cast<size_t>(c)) {
      throw DataError("dataset has no normalization constants");
    }
    auto d = x.mutable_data();
    for (int64_t i = 0; i < take; ++i) {
      for (int64_t ch = 0; ch < c; ++ch) {
        const double m = ds_->channel_mean[static_cast<size_t>(ch)];
        const double s = ds_->channel_std[static_cast<size_t>(ch)];
        double* plane = d.data() + (i * c + ch) * h * w;
        for (int64_t p = 0; p < h * w; ++p) plane[p] = (plane[p] - m) / s;
      }
    }
  }
  pos_ += take;
  return true;
}

}  // namespace dfl
