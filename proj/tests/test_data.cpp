#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>

#include "dfl/data.hpp"
#include "oracles.hpp"

using namespace dfl;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  const auto dir = fs::temp_directory_path() / "dfl_data_test";
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("synthetic blobs: separability, determinism, sizes") {
  SyntheticSpec spec;
  spec.classes = 3;
  spec.n_per_class = 200;

  SUBCASE("spread zero is perfectly separable by nearest centroid") {
    for (bool image : {true, false}) {
      SyntheticSpec s = spec;
      s.image_mode = image;
      s.spread = 0.0;
      s.hw = 8;
      Dataset ds = synthetic_blobs(s, 5, Dataset::Split::train);
      CHECK(oracles::nearest_centroid_accuracy(ds) == 1.0);
    }
  }

  SUBCASE("same seed gives identical datasets") {
    Dataset a = synthetic_blobs(spec, 7, Dataset::Split::train);
    Dataset b = synthetic_blobs(spec, 7, Dataset::Split::train);
    CHECK(a.images.value_hash() == b.images.value_hash());
    CHECK(a.labels == b.labels);
    Dataset c = synthetic_blobs(spec, 8, Dataset::Split::train);
    CHECK(a.images.value_hash() != c.images.value_hash());
  }

  SUBCASE("train and test share centers but differ in noise") {
    Dataset tr = synthetic_blobs(spec, 7, Dataset::Split::train);
    Dataset te = synthetic_blobs(spec, 7, Dataset::Split::test);
    CHECK(tr.images.value_hash() != te.images.value_hash());
  }

  SUBCASE("3 classes x 200 gives N = 600 with values in [0,1]") {
    Dataset ds = synthetic_blobs(spec, 7, Dataset::Split::train);
    CHECK(ds.n() == 600);
    CHECK(ds.class_count == 3);
    for (int lbl : ds.labels) CHECK(lbl < 3);
    for (double v : ds.images.data()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }

  CHECK_THROWS_AS(
      synthetic_blobs(SyntheticSpec{.classes = 1}, 1, Dataset::Split::train),
      ConfigError);
}

TEST_CASE("CIFAR binary layout round-trips synthetic data bit-exactly") {
  SyntheticSpec spec;
  spec.classes = 3;
  spec.n_per_class = 20;
  spec.hw = 32;
  Dataset ds = synthetic_blobs(spec, 11, Dataset::Split::train);

  for (auto variant : {CifarVariant::cifar10, CifarVariant::cifar100}) {
    const auto path =
        (temp_dir() / (variant == CifarVariant::cifar10 ? "rt10.bin"
                                                        : "rt100.bin"))
            .string();
    write_cifar_file(ds, path, variant);
    Dataset back = read_cifar_file(path, variant, Dataset::Split::train);
    CHECK(back.n() == ds.n());
    CHECK(back.labels == ds.labels);
    CHECK(back.images.value_hash() == ds.images.value_hash());
  }
}

TEST_CASE("corrupt CIFAR files are reported with byte counts") {
  const auto dir = temp_dir();

  SUBCASE("truncated file") {
    const auto path = (dir / "trunc.bin").string();
    {
      std::ofstream os(path, std::ios::binary | std::ios::trunc);
      std::vector<char> partial(3073 * 2 + 100, 0);
      os.write(partial.data(), static_cast<std::streamsize>(partial.size()));
    }
    CHECK_THROWS_WITH_AS(
        read_cifar_file(path, CifarVariant::cifar10, Dataset::Split::train),
        doctest::Contains("not a multiple"), DataError);
  }

  SUBCASE("wrong record count") {
    const auto path = (dir / "short.bin").string();
    {
      std::ofstream os(path, std::ios::binary | std::ios::trunc);
      std::vector<char> two(3073 * 2, 0);
      os.write(two.data(), static_cast<std::streamsize>(two.size()));
    }
    CHECK_THROWS_WITH_AS(
        read_cifar_file(path, CifarVariant::cifar10, Dataset::Split::train, 5),
        doctest::Contains("expected 15365 bytes, got 6146"), DataError);
  }

  SUBCASE("out-of-range label names the offset") {
    const auto path = (dir / "badlabel.bin").string();
    {
      std::ofstream os(path, std::ios::binary | std::ios::trunc);
      std::vector<char> rec(3073, 0);
      os.write(rec.data(), 3073);   // record 0: label 0, fine
      rec[0] = 17;                  // record 1: label 17 >= 10
      os.write(rec.data(), 3073);
    }
    CHECK_THROWS_WITH_AS(
        read_cifar_file(path, CifarVariant::cifar10, Dataset::Split::train),
        doctest::Contains("byte offset 3073"), DataError);
  }

  SUBCASE("missing directory") {
    CHECK_THROWS_AS(load_cifar((dir / "nope").string(), CifarVariant::cifar10),
                    DataError);
  }
}

// Runs only when a real CIFAR-10 tree is available under DFL_DATA_DIR.
TEST_CASE("real CIFAR-10 counts" * doctest::skip(std::getenv("DFL_DATA_DIR") == nullptr)) {
  const char* root = std::getenv("DFL_DATA_DIR");
  REQUIRE(root != nullptr);
  auto [train, test] = load_cifar(std::string(root) + "/cifar10",
                                  CifarVariant::cifar10);
  CHECK(train.n() == 50000);
  CHECK(test.n() == 10000);
  CHECK(train.class_count == 10);
  std::vector<int> per_label(10, 0);
  for (int l : train.labels) ++per_label[static_cast<size_t>(l)];
  for (int c : per_label) CHECK(c == 5000);
}

TEST_CASE("normalization constants standardize the training split") {
  SyntheticSpec spec;
  spec.classes = 4;
  spec.n_per_class = 50;
  spec.hw = 8;
  spec.spread = 0.15;
  Dataset ds = synthetic_blobs(spec, 3, Dataset::Split::train);
  compute_normalization(ds);

  BatchPlan plan;
  plan.batch_size = 64;
  EpochIterator it(ds, plan, 0);
  Tensor x;
  std::vector<int> y;
  const int64_t c = 3;
  std::vector<double> sum(static_cast<size_t>(c), 0.0),
      sum2(static_cast<size_t>(c), 0.0);
  int64_t count = 0;
  while (it.next(x, y)) {
    const int64_t b = x.dim(0), plane = x.dim(2) * x.dim(3);
    for (int64_t i = 0; i < b; ++i) {
      for (int64_t ch = 0; ch < c; ++ch) {
        const double* p = x.data().data() + (i * c + ch) * plane;
        for (int64_t j = 0; j < plane; ++j) {
          sum[static_cast<size_t>(ch)] += p[j];
          sum2[static_cast<size_t>(ch)] += p[j] * p[j];
        }
      }
    }
    count += b * plane;
  }
  for (int64_t ch = 0; ch < c; ++ch) {
    const double mean = sum[static_cast<size_t>(ch)] / static_cast<double>(count);
    const double var =
        sum2[static_cast<size_t>(ch)] / static_cast<double>(count) - mean * mean;
    CHECK(std::abs(mean) <= 1e-6);
    CHECK(std::abs(std::sqrt(var) - 1.0) <= 1e-6);
  }
}

TEST_CASE("epoch iteration: batch sizes, permutation, determinism") {
  SyntheticSpec spec;
  spec.classes = 3;
  spec.n_per_class = 200;
  spec.hw = 4;
  Dataset ds = synthetic_blobs(spec, 5, Dataset::Split::train);
  compute_normalization(ds);

  BatchPlan plan;
  plan.batch_size = 128;
  plan.shuffle_seed = 9;

  SUBCASE("600 samples in batches of 128 gives 128x4 + 88") {
    EpochIterator it(ds, plan, 0);
    std::vector<int64_t> sizes;
    Tensor x;
    std::vector<int> y;
    while (it.next(x, y)) sizes.push_back(x.dim(0));
    CHECK(sizes == std::vector<int64_t>{128, 128, 128, 128, 88});
    CHECK(it.batches() == 5);
  }

  SUBCASE("every sample appears exactly once per epoch") {
    EpochIterator it(ds, plan, 3);
    std::set<int64_t> seen(it.order().begin(), it.order().end());
    CHECK(seen.size() == 600);
    CHECK(*seen.begin() == 0);
    CHECK(*seen.rbegin() == 599);
  }

  SUBCASE("same (seed, epoch) gives identical batch streams") {
    auto collect = [&](uint64_t seed, int64_t epoch) {
      BatchPlan p = plan;
      p.shuffle_seed = seed;
      EpochIterator it(ds, p, epoch);
      std::vector<uint64_t> hashes;
      Tensor x;
      std::vector<int> y;
      while (it.next(x, y)) hashes.push_back(x.value_hash());
      return hashes;
    };
    CHECK(collect(9, 0) == collect(9, 0));
    CHECK(collect(9, 0) != collect(9, 1));
    CHECK(collect(9, 0) != collect(10, 0));
  }
}

TEST_CASE("augmentation") {
  Rng rng(13);
  Tensor batch = oracles::random_tensor({4, 3, 8, 8}, rng, 0.0, 1.0);

  SUBCASE("no flags is the identity") {
    Tensor copy = batch.detach();
    Rng arng(1);
    augment_batch(copy, false, false, arng);
    CHECK(copy.value_hash() == batch.value_hash());
  }

  SUBCASE("flip applied twice with the same rng stream is the identity") {
    Tensor copy = batch.detach();
    Rng r1(77), r2(77);
    augment_batch(copy, false, true, r1);
    augment_batch(copy, false, true, r2);
    CHECK(copy.value_hash() == batch.value_hash());
  }

  SUBCASE("reflect-pad crop reuses existing pixel values") {
    Tensor copy = batch.detach();
    Rng r(5);
    augment_batch(copy, true, false, r);
    CHECK(copy.shape() == batch.shape());
    for (int64_t img = 0; img < 4; ++img) {
      std::set<double> orig, cropped;
      for (int64_t i = 0; i < 3 * 64; ++i) {
        orig.insert(batch.data()[img * 192 + i]);
        cropped.insert(copy.data()[img * 192 + i]);
      }
      for (double v : cropped) CHECK(orig.count(v) == 1);
    }
  }

  SUBCASE("augmentation is deterministic in the rng seed") {
    Tensor a = batch.detach(), b = batch.detach();
    Rng r1(3), r2(3);
    augment_batch(a, true, true, r1);
    augment_batch(b, true, true, r2);
    CHECK(a.value_hash() == b.value_hash());
  }
}
