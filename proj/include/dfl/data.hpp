#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dfl/rng.hpp"
#include "dfl/tensor.hpp"

namespace dfl {

// In-memory dataset: images in [0,1] before normalization, integer labels.
// Vector-valued datasets are stored as [N, D, 1, 1].
struct Dataset {
  enum class Split { train, test };

  Tensor images;            // [N, C, H, W]
  std::vector<int> labels;  // size N, each < class_count
  int class_count = 0;
  Split split = Split::train;
  // Per-channel normalization constants, from the training split.
  std::vector<double> channel_mean;
  std::vector<double> channel_std;

  int64_t n() const { return images.defined() ? images.dim(0) : 0; }
  Shape sample_shape() const {
    return {images.dim(1), images.dim(2), images.dim(3)};
  }
};

struct BatchPlan {
  int64_t batch_size = 128;
  uint64_t shuffle_seed = 0;
  bool drop_last = false;  // remainder batch is kept
  bool crop_pad4 = false;
  bool hflip = false;
  bool normalize = true;

  int64_t batches_per_epoch(int64_t n) const {
    return (n + batch_size - 1) / batch_size;
  }
};

enum class CifarVariant { cifar10, cifar100 };

// Standard binary layout: CIFAR-10 records are 1 label byte + 3072 pixel
// bytes (R,G,B planes, row-major); CIFAR-100 adds a coarse label byte first
// (parsed and discarded; fine labels are used).
Dataset read_cifar_file(const std::string& path, CifarVariant variant,
                        Dataset::Split split,
                        int64_t expected_records = -1);
void write_cifar_file(const Dataset& ds, const std::string& path,
                      CifarVariant variant);
std::pair<Dataset, Dataset> load_cifar(const std::string& dir,
                                       CifarVariant variant);

struct SyntheticSpec {
  int classes = 3;
  int n_per_class = 200;
  double spread = 0.08;
  bool image_mode = true;
  int64_t hw = 32;    // image mode: square side, channels fixed at 3
  int64_t dims = 16;  // vector mode
};

// Gaussian clusters around per-class centers. Centers depend only on the
// seed; sample noise also depends on the split, so train/test pairs share
// centers. Image mode quantizes to bytes, making CIFAR export lossless.
Dataset synthetic_blobs(const SyntheticSpec& spec, uint64_t seed,
                        Dataset::Split split);

// Computes per-channel mean/std (population) over a split.
void compute_normalization(Dataset& ds);

// Applies `flags` in place: reflect-pad-4 random crop, then horizontal flip
// with probability 1/2, per image. Consumes rng in image order.
void augment_batch(Tensor& x, bool crop_pad4, bool hflip, Rng& rng);

// One epoch of batches. The permutation is a pure function of
// (plan.shuffle_seed, epoch_index); train batches are augmented per the plan
// then normalized, test batches only normalized.
class EpochIterator {
 public:
  EpochIterator(const Dataset& ds, const BatchPlan& plan, int64_t epoch_index);

  bool next(Tensor& x, std::vector<int>& y);
  int64_t batches() const { return plan_.batches_per_epoch(ds_->n()); }
  const std::vector<int64_t>& order() const { return order_; }

 private:
  const Dataset* ds_;
  BatchPlan plan_;
  std::vector<int64_t> order_;
  Rng aug_rng_;
  int64_t pos_ = 0;
};

}  // namespace dfl
