// Acceptance suite: runs every criterion at its stated tolerance and prints
// one pass/fail line per criterion. Exit code is the number of failures.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "dfl/experiment.hpp"
#include "oracles.hpp"

using namespace dfl;
namespace fs = std::filesystem;

namespace {

struct Failure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require(bool cond, const std::string& msg) {
  if (!cond) throw Failure(msg);
}

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path work_dir() {
  const auto dir = fs::temp_directory_path() / "dfl_acceptance";
  fs::create_directories(dir);
  return dir;
}

// shared between criteria 8 and 10
std::string g_seed1_run_dir;

// ---- criterion 1: gradient suite ---------------------------------------

constexpr double kRelTol = 1e-4;
constexpr double kAbsFloor = 1e-6;

void criterion_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(2024);

  auto expect_ok = [](const oracles::GradCheck& res, const std::string& op) {
    require(res.ok, op + ": max |ad-fd| = " + std::to_string(res.max_abs_err) +
                        " at index " + std::to_string(res.worst_index));
    require(res.checked > 0, op + ": no elements checked");
  };

  {  // matmul
    Tensor a = oracles::random_tensor({4, 5}, rng, -1, 1, true);
    Tensor b = oracles::random_tensor({5, 3}, rng, -1, 1, true);
    Graph tape;
    {
      Graph::Scope scope(tape);
      tape.backward(sum(matmul(a, b)));
    }
    auto eval = [&] { return sum(matmul(a, b)).item(); };
    expect_ok(oracles::check_grad_fd(a, eval, 1e-5, kRelTol, kAbsFloor), "matmul/dA");
    expect_ok(oracles::check_grad_fd(b, eval, 1e-5, kRelTol, kAbsFloor), "matmul/dB");
  }
  {  // conv2d
    Tensor x = oracles::random_tensor({2, 3, 8, 8}, rng, -1, 1, true);
    Tensor w = oracles::random_tensor({4, 3, 3, 3}, rng, -0.5, 0.5, true);
    Tensor b = oracles::random_tensor({4}, rng, -0.1, 0.1, true);
    Graph tape;
    {
      Graph::Scope scope(tape);
      tape.backward(sum(conv2d(x, w, b, 1, 1)));
    }
    auto eval = [&] { return sum(conv2d(x, w, b, 1, 1)).item(); };
    expect_ok(oracles::check_grad_fd(x, eval, 1e-5, kRelTol, kAbsFloor), "conv2d/dX");
    expect_ok(oracles::check_grad_fd(w, eval, 1e-5, kRelTol, kAbsFloor), "conv2d/dW");
    expect_ok(oracles::check_grad_fd(b, eval, 1e-5, kRelTol, kAbsFloor), "conv2d/dB");
  }
  {  // relu, away from the kink
    Tensor x = oracles::random_tensor({6, 7}, rng, -1, 1, true);
    Graph tape;
    {
      Graph::Scope scope(tape);
      tape.backward(sum(relu(x)));
    }
    auto eval = [&] { return sum(relu(x)).item(); };
    auto skip = [&](size_t i) { return std::abs(x.data()[i]) < 1e-3; };
    expect_ok(oracles::check_grad_fd(x, eval, 1e-5, kRelTol, kAbsFloor, skip),
              "relu");
  }
  {  // maxpool
    Tensor x = oracles::random_tensor({1, 2, 4, 4}, rng, -1, 1, true);
    Graph tape;
    {
      Graph::Scope scope(tape);
      tape.backward(sum(maxpool2d(x, 2, 2)));
    }
    auto eval = [&] { return sum(maxpool2d(x, 2, 2)).item(); };
    expect_ok(oracles::check_grad_fd(x, eval, 1e-6, kRelTol, kAbsFloor),
              "maxpool2d");
  }
  {  // softmax through a KL loss
    Tensor q = oracles::random_tensor({3, 4}, rng, -2, 2, true);
    Tensor target = softmax(oracles::random_tensor({3, 4}, rng, -1, 1));
    Graph tape;
    {
      Graph::Scope scope(tape);
      tape.backward(kl_divergence(softmax(q), target));
    }
    auto eval = [&] { return kl_divergence(softmax(q), target).item(); };
    expect_ok(oracles::check_grad_fd(q, eval, 1e-5, kRelTol, kAbsFloor),
              "softmax");
  }
  {  // cross entropy
    Tensor logits = oracles::random_tensor({3, 5}, rng, -3, 3, true);
    std::vector<int> labels = {1, 4, 0};
    Graph tape;
    {
      Graph::Scope scope(tape);
      tape.backward(cross_entropy(logits, labels));
    }
    auto eval = [&] { return cross_entropy(logits, labels).item(); };
    expect_ok(oracles::check_grad_fd(logits, eval, 1e-5, kRelTol, kAbsFloor),
              "cross_entropy");
  }
  {  // kl divergence through both softmaxes' p argument
    Tensor a = oracles::random_tensor({2, 6}, rng, -2, 2, true);
    Tensor q = softmax(oracles::random_tensor({2, 6}, rng, -2, 2));
    Graph tape;
    {
      Graph::Scope scope(tape);
      tape.backward(kl_divergence(softmax(a), q));
    }
    auto eval = [&] { return kl_divergence(softmax(a), q).item(); };
    expect_ok(oracles::check_grad_fd(a, eval, 1e-5, kRelTol, kAbsFloor),
              "kl_divergence");
  }
  {  // the full total loss (main + distillation) on a 2-layer MLP
    Model m = build_model({LayerSpec::Flatten(), LayerSpec::Dense(8, 16),
                           LayerSpec::Relu(), LayerSpec::Dense(16, 3)},
                          1, InitScheme{}, 7, {8, 1, 1});
    DflConfig cfg;
    cfg.k = 2;
    cfg.t_update = 1;
    cfg.t_reset = 1;
    cfg.head_len = 1;
    Rng prng(9);
    TeacherPool pool = init_pool(m, cfg, prng);
    Tensor x = oracles::random_tensor({6, 8, 1, 1}, rng, -1, 1);
    std::vector<int> y = {0, 1, 2, 0, 1, 2};

    Graph tape;
    {
      Graph::Scope scope(tape);
      ForwardAll f = forward_all(m, pool, x);
      tape.backward(compute_total_loss(f, y, cfg).total);
    }
    auto eval = [&] {
      ForwardAll f = forward_all(m, pool, x);
      return compute_total_loss(f, y, cfg).total.item();
    };
    int idx = 0;
    for (Tensor p : m.params()) {
      expect_ok(oracles::check_grad_fd(p, eval, 1e-5, kRelTol, kAbsFloor),
                "total_loss/param" + std::to_string(idx++));
    }
  }

  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  require(secs < 30.0, "gradient suite took " + std::to_string(secs) + "s");
}

// ---- criterion 2: loss identities ---------------------------------------

void criterion_loss_identities() {
  Rng rng(11);
  for (int rep = 0; rep < 1000; ++rep) {
    Tensor p = softmax(oracles::random_tensor({1, 8}, rng, -6, 6));
    const double v = kl_divergence(p, p).item();
    require(v <= 1e-12 && v >= 0.0, "KL(p,p) = " + std::to_string(v));
  }

  Tensor logits = oracles::random_tensor({4, 6}, rng, -4, 4, true);
  std::vector<int> labels = {2, 0, 5, 3};
  Graph tape;
  {
    Graph::Scope scope(tape);
    tape.backward(cross_entropy(logits, labels));
  }
  Tensor probs = softmax(logits);
  for (int64_t b = 0; b < 4; ++b) {
    for (int64_t i = 0; i < 6; ++i) {
      const double onehot = i == labels[static_cast<size_t>(b)] ? 1.0 : 0.0;
      const double expect = (probs.data()[b * 6 + i] - onehot) / 4.0;
      require(std::abs(logits.grad()[b * 6 + i] - expect) <= 1e-10,
              "cross-entropy gradient differs from softmax - onehot");
    }
  }

  Model m = build_model(tiny_mlp_specs(8, 3), 1, InitScheme{}, 5, {8, 1, 1});
  TeacherPool pool;
  pool.teachers = {m.snapshot_head(), m.snapshot_head(), m.snapshot_head()};
  pool.meaningfulness.assign(4, MeaningTracker{});
  DflConfig cfg;
  cfg.k = 3;
  cfg.head_len = 1;
  Tensor x = oracles::random_tensor({5, 8, 1, 1}, rng, -1, 1);
  std::vector<int> y = {0, 1, 2, 1, 0};
  ForwardAll f = forward_all(m, pool, x);
  LossTerms terms = compute_total_loss(f, y, cfg);
  const double main_only = cross_entropy(m.forward(x), y).item();
  require(terms.total.item() == main_only,
          "L_total != L_main bit-exactly with identical teachers");
}

// ---- criterion 3: teacher-pool oracle ------------------------------------

void criterion_pool_oracle() {
  Model m = build_model(tiny_mlp_specs(4, 2), 1, InitScheme{}, 3, {4, 1, 1});
  Rng rng(2025);
  Rng prng(2026);
  const int ks[] = {1, 2, 4, 8};
  for (int trial = 0; trial < 10000; ++trial) {
    const int k = ks[rng.uniform_int(4)];
    std::vector<double> p(static_cast<size_t>(k) + 1);
    for (auto& v : p) {
      v = rng.uniform() < 0.5
              ? static_cast<double>(rng.uniform_int(5)) / 4.0
              : rng.uniform();
    }
    DflConfig cfg;
    cfg.k = k;
    cfg.head_len = 1;
    TeacherPool pool = init_pool(m, cfg, prng);
    for (size_t i = 0; i < p.size(); ++i) {
      pool.meaningfulness[i].last_epoch_accuracy = p[i];
    }
    pool.accuracy_fresh = true;

    const auto oracle = oracles::pool_update_oracle(p);
    require(!oracle.kept.empty(), "oracle self-check failed");
    ReplacementReport rep = maybe_update_teachers(pool, m);
    require(rep.k_prime == oracle.k_prime,
            "argmin index mismatch at trial " + std::to_string(trial));
    require(rep.replaced == oracle.replace,
            "replacement decision mismatch at trial " + std::to_string(trial));
    std::vector<double> kept;
    for (size_t i = 1; i < p.size(); ++i) {
      kept.push_back(rep.replaced && static_cast<int>(i) == rep.k_prime ? p[0]
                                                                        : p[i]);
    }
    std::sort(kept.begin(), kept.end());
    require(kept == oracle.kept,
            "surviving multiset mismatch at trial " + std::to_string(trial));
  }
}

// ---- criterion 4: reset invariants ---------------------------------------

void criterion_reset() {
  Rng rng(31);

  {  // K=1 mean reset copies the teacher bit-exactly
    Model m = build_model(tiny_mlp_specs(8, 3), 1, InitScheme{}, 5, {8, 1, 1});
    DflConfig cfg;
    cfg.k = 1;
    cfg.head_len = 1;
    Rng prng(33);
    TeacherPool pool = init_pool(m, cfg, prng);
    reset_student(m, pool, cfg, rng, nullptr);
    require(m.snapshot_head().hash() == pool.teachers[0].hash(),
            "K=1 mean reset is not a bit-exact copy");
  }

  {  // +v/-v teachers give an all-zero student; body hash invariant;
     // head momentum zeroed
    Model m = build_model(tiny_mlp_specs(8, 3), 1, InitScheme{}, 5, {8, 1, 1});
    DflConfig cfg;
    cfg.k = 2;
    cfg.head_len = 1;
    Rng prng(35);
    TeacherPool pool = init_pool(m, cfg, prng);
    std::vector<Tensor> plus, minus;
    for (const auto& shape : m.head_manifest()) {
      Tensor v = oracles::random_tensor(shape, rng, -1, 1);
      plus.push_back(v);
      Tensor neg = Tensor::zeros(shape);
      for (int64_t i = 0; i < v.size(); ++i) {
        neg.mutable_data()[i] = -v.data()[i];
      }
      minus.push_back(neg);
    }
    pool.teachers[0] = HeadSnapshot(plus);
    pool.teachers[1] = HeadSnapshot(minus);

    Sgd optim(m.params(), 0.9, 0.0);
    for (auto& p : m.params()) {
      p.ensure_grad().assign(static_cast<size_t>(p.size()), 1.0);
    }
    optim.step(0.01);
    optim.zero_grad();

    const uint64_t body_before = m.body_hash();
    reset_student(m, pool, cfg, rng, &optim);
    for (const auto& p : m.head_params()) {
      for (double v : p.data()) {
        require(v == 0.0, "+v/-v mean reset left a nonzero student value");
      }
    }
    require(m.body_hash() == body_before, "reset changed the body");
    const size_t n_body = m.body_params().size();
    for (size_t i = 0; i < m.params().size(); ++i) {
      for (double v : optim.buffer(i)) {
        if (i >= n_body) {
          require(v == 0.0, "head momentum not zeroed by reset");
        } else {
          require(v != 0.0, "body momentum was clobbered by reset");
        }
      }
    }
  }

  {  // random reset also leaves the body untouched
    Model m = build_model(tiny_mlp_specs(8, 3), 1, InitScheme{}, 7, {8, 1, 1});
    DflConfig cfg;
    cfg.k = 1;
    cfg.reset_mode = ResetMode::random;
    cfg.head_len = 1;
    Rng prng(37);
    TeacherPool pool = init_pool(m, cfg, prng);
    const uint64_t body_before = m.body_hash();
    const uint64_t head_before = m.snapshot_head().hash();
    reset_student(m, pool, cfg, rng, nullptr);
    require(m.body_hash() == body_before, "random reset changed the body");
    require(m.snapshot_head().hash() != head_before,
            "random reset left the head unchanged");
  }
}

// ---- criterion 5: frozen teachers ----------------------------------------

void criterion_frozen_teachers() {
  Model m = build_model(tiny_mlp_specs(8, 3), 1, InitScheme{}, 41, {8, 1, 1});
  DflConfig cfg;
  cfg.k = 2;
  cfg.head_len = 1;
  Rng prng(43);
  TeacherPool pool = init_pool(m, cfg, prng);
  std::vector<uint64_t> hashes;
  for (const auto& t : pool.teachers) hashes.push_back(t.hash());

  Rng rng(45);
  Tensor x = oracles::random_tensor({8, 8, 1, 1}, rng, -1, 1);
  std::vector<int> y = {0, 1, 2, 0, 1, 2, 0, 1};
  Sgd optim(m.params(), 0.9, 2e-4);
  for (int step = 0; step < 100; ++step) {
    Graph tape;
    {
      Graph::Scope scope(tape);
      ForwardAll f = forward_all(m, pool, x);
      tape.backward(compute_total_loss(f, y, cfg).total);
    }
    optim.step(0.05);
    optim.zero_grad();
    for (size_t k = 0; k < pool.teachers.size(); ++k) {
      require(pool.teachers[k].hash() == hashes[k],
              "teacher " + std::to_string(k) + " changed at step " +
                  std::to_string(step));
      for (const auto& p : pool.teachers[k].params()) {
        for (double g : p.grad()) {
          require(g == 0.0, "nonzero gradient on a teacher value");
        }
        require(!p.has_grad(), "gradient buffer allocated on a teacher");
      }
    }
  }
}

// ---- criterion 6: learning-rate schedule ---------------------------------

void criterion_schedule() {
  LrSchedule s;
  s.steps_per_epoch = 391;

  // linear ramp over epoch 0, ending exactly at base_lr
  for (int64_t step = 0; step < 391; ++step) {
    const double expect = 0.1 * static_cast<double>(step + 1) / 391.0;
    require(lr_at(step, s) == expect, "warmup ramp wrong at step " +
                                          std::to_string(step));
  }
  require(lr_at(390, s) == 0.1, "ramp does not end at 0.1");

  auto check_epoch = [&](int epoch, double decimal, int n_milestones) {
    double expect = 0.1;
    for (int i = 0; i < n_milestones; ++i) expect *= 0.2;
    for (int64_t off : {int64_t{0}, int64_t{200}, int64_t{390}}) {
      const double lr = lr_at(epoch * 391 + off, s);
      require(lr == expect, "lr != 0.1*0.2^m at epoch " + std::to_string(epoch));
      require(std::abs(lr - decimal) <= 1e-15,
              "lr differs from " + std::to_string(decimal) + " at epoch " +
                  std::to_string(epoch));
    }
  };
  for (int e : {1, 2, 30, 59}) check_epoch(e, 0.1, 0);
  for (int e : {60, 90, 119}) check_epoch(e, 0.02, 1);
  for (int e : {120, 140, 159}) check_epoch(e, 0.004, 2);
  for (int e : {160, 199, 400}) check_epoch(e, 0.0008, 3);
}

// ---- criterion 7: statistics reproduction ---------------------------------

void criterion_statistics() {
  auto round2 = [](double v) { return std::round(v * 100.0) / 100.0; };

  const auto [m1, s1] = combine_group_stats(93.68, 0.13, 93.59, 0.13);
  require(round2(m1) == 93.64 && round2(s1) == 0.14,
          "CIFAR-10 rows do not combine to 93.64 +- 0.14 (got " +
              std::to_string(m1) + " +- " + std::to_string(s1) + ")");

  const auto [m2, s2] = combine_group_stats(71.82, 0.34, 71.88, 0.29);
  require(round2(m2) == 71.85 && round2(s2) == 0.32,
          "CIFAR-100 rows do not combine to 71.85 +- 0.32 (got " +
              std::to_string(m2) + " +- " + std::to_string(s2) + ")");

  Rng rng(47);
  for (int rep = 0; rep < 1000; ++rep) {
    const int n = 2 + static_cast<int>(rng.uniform_int(25));
    std::vector<double> a, b, both;
    for (int i = 0; i < n; ++i) {
      a.push_back(rng.uniform(-100, 100));
      b.push_back(rng.uniform(-100, 100));
    }
    both = a;
    both.insert(both.end(), b.begin(), b.end());
    const auto [ma, sa] = oracles::population_stats(a);
    const auto [mb, sb] = oracles::population_stats(b);
    const auto [mc, sc] = combine_group_stats(ma, sa, mb, sb);
    const auto [mp, sp] = oracles::population_stats(both);
    require(std::abs(mc - mp) <= 1e-12 && std::abs(sc - sp) <= 1e-12,
            "pooling equivalence violated at rep " + std::to_string(rep));
  }
}

// ---- criterion 8: desk-scale end-to-end -----------------------------------

RunConfig desk_scale_config(uint64_t seed, const std::string& out_dir) {
  RunConfig cfg;
  cfg.dataset = "synthetic_image";
  cfg.synth_classes = 3;
  cfg.synth_train_per_class = 200;  // 600 train
  cfg.synth_test_per_class = 100;   // 300 test
  cfg.synth_hw = 32;
  cfg.arch = "tiny_cnn";
  cfg.head_len = 1;
  cfg.k = 2;
  cfg.t_update = 5;
  cfg.t_reset = 5;
  cfg.epochs = 30;
  cfg.batch_size = 128;
  cfg.seed = seed;
  cfg.out_dir = out_dir;
  return cfg;
}

void criterion_desk_scale() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto out = (work_dir() / "desk_scale").string();
  fs::remove_all(out);

  for (uint64_t seed : {1, 2, 3}) {
    RunResult res = run_single(desk_scale_config(seed, out));
    require(res.ok, "seed " + std::to_string(seed) + " failed: " + res.error);
    if (seed == 1) g_seed1_run_dir = res.dir;
    const auto& metrics = res.metrics;
    require(metrics.size() == 30, "expected 30 epochs of metrics");

    for (const auto& rec : metrics) {
      require(std::isfinite(rec.train_loss_main) &&
                  std::isfinite(rec.train_loss_distill),
              "non-finite loss in seed " + std::to_string(seed));
    }
    require(metrics.back().train_acc[0] >= 0.95,
            "seed " + std::to_string(seed) + ": final train accuracy " +
                std::to_string(metrics.back().train_acc[0]) + " < 0.95");

    int first_replacement = -1;
    for (const auto& rec : metrics) {
      for (const auto& ev : rec.events) {
        if (ev.kind == TrainEvent::Kind::teacher_replaced) {
          first_replacement = rec.epoch;
          break;
        }
      }
      if (first_replacement > 0) break;
    }
    require(first_replacement > 0,
            "seed " + std::to_string(seed) + ": no teacher replacement");
    require(first_replacement + 5 <= 30,
            "first replacement too late to compare windows");

    double before = 0.0, after = 0.0;
    for (int e = first_replacement - 4; e <= first_replacement; ++e) {
      before += metrics[static_cast<size_t>(e - 1)].train_loss_distill;
    }
    for (int e = first_replacement + 1; e <= first_replacement + 5; ++e) {
      after += metrics[static_cast<size_t>(e - 1)].train_loss_distill;
    }
    require(after < before,
            "seed " + std::to_string(seed) +
                ": distillation loss did not drop after the first "
                "replacement (before=" +
                std::to_string(before / 5) + ", after=" +
                std::to_string(after / 5) + ")");
  }

  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  require(secs <= 300.0,
          "3 seeds took " + std::to_string(secs) + "s (budget 300s)");
}

// ---- criterion 9: degenerate-config equivalence ----------------------------

void criterion_degenerate() {
  SyntheticSpec spec;
  spec.classes = 3;
  spec.n_per_class = 200;
  spec.image_mode = false;
  spec.dims = 16;
  Dataset train_ds = synthetic_blobs(spec, 71, Dataset::Split::train);
  spec.n_per_class = 100;
  Dataset test_ds = synthetic_blobs(spec, 71, Dataset::Split::test);
  compute_normalization(train_ds);
  test_ds.channel_mean = train_ds.channel_mean;
  test_ds.channel_std = train_ds.channel_std;

  TrainOptions opt;
  opt.epochs = 5;
  opt.seed = 73;
  opt.plan.batch_size = 128;
  opt.plan.shuffle_seed = 73;

  DflConfig cfg;
  cfg.k = 0;
  cfg.reset_enabled = false;
  cfg.head_len = 1;

  Model engine_model = build_model(tiny_mlp_specs(16, 3), 1, InitScheme{}, 75,
                                   {16, 1, 1});
  TeacherPool pool;
  pool.meaningfulness.assign(1, MeaningTracker{});
  Sgd optim(engine_model.params(), 0.9, 2e-4);
  const auto records =
      train(engine_model, pool, train_ds, test_ds, optim, cfg, opt);

  Model base_model = build_model(tiny_mlp_specs(16, 3), 1, InitScheme{}, 75,
                                 {16, 1, 1});
  const auto baseline =
      oracles::plain_sgd_baseline(base_model, train_ds, test_ds, opt, 0.9, 2e-4);

  require(records.size() == baseline.size(), "epoch count mismatch");
  for (size_t e = 0; e < records.size(); ++e) {
    require(records[e].train_loss_main == baseline[e].train_loss,
            "train loss differs at epoch " + std::to_string(e + 1));
    require(records[e].train_acc[0] == baseline[e].train_acc,
            "train accuracy differs at epoch " + std::to_string(e + 1));
    require(records[e].test_acc == baseline[e].test_acc,
            "test accuracy differs at epoch " + std::to_string(e + 1));
    require(records[e].lr == baseline[e].last_lr,
            "learning rate differs at epoch " + std::to_string(e + 1));
    require(records[e].train_loss_distill == 0.0, "distill loss not zero");
    require(records[e].events.empty(), "degenerate config produced events");
  }
  const auto pa = engine_model.params(), pb = base_model.params();
  for (size_t i = 0; i < pa.size(); ++i) {
    require(pa[i].value_hash() == pb[i].value_hash(),
            "trained parameters differ at tensor " + std::to_string(i));
  }
}

// ---- criterion 10: byte determinism ----------------------------------------

void criterion_determinism() {
  const auto out_a = (work_dir() / "det_repeat_a").string();
  fs::remove_all(out_a);
  std::string dir_a = g_seed1_run_dir;
  if (dir_a.empty()) {
    RunResult res = run_single(desk_scale_config(1, out_a));
    require(res.ok, "first run failed: " + res.error);
    dir_a = res.dir;
  }
  const auto out_b = (work_dir() / "det_repeat_b").string();
  fs::remove_all(out_b);
  RunResult res_b = run_single(desk_scale_config(1, out_b));
  require(res_b.ok, "repeat run failed: " + res_b.error);

  const std::string csv_a = read_file(dir_a + "/metrics.csv");
  const std::string csv_b = read_file(res_b.dir + "/metrics.csv");
  require(!csv_a.empty(), "first metrics.csv is empty");
  require(csv_a == csv_b, "metrics.csv files differ between identical runs");
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    std::function<void()> fn;
  };
  const std::vector<Criterion> criteria = {
      {1, "gradient suite (finite differences, < 30 s)", criterion_gradients},
      {2, "loss identities (KL, CE gradient, bit-exact degenerate total)",
       criterion_loss_identities},
      {3, "teacher-pool update matches the brute-force top-K oracle",
       criterion_pool_oracle},
      {4, "reset invariants (mean copy, symmetry, body hash, momentum)",
       criterion_reset},
      {5, "teachers frozen across 100 optimizer steps", criterion_frozen_teachers},
      {6, "learning-rate schedule values", criterion_schedule},
      {7, "statistics reproduction and pooling equivalence",
       criterion_statistics},
      {8, "desk-scale end-to-end (TinyCNN, 3 seeds)", criterion_desk_scale},
      {9, "degenerate config equals plain SGD bit-for-bit",
       criterion_degenerate},
      {10, "byte-identical metrics.csv on repeated runs",
       criterion_determinism},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      c.fn();
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
              .count();
      std::printf("[PASS] %2d. %s (%.1fs)\n", c.id, c.name, secs);
    } catch (const std::exception& e) {
      ++failures;
      std::printf("[FAIL] %2d. %s: %s\n", c.id, c.name, e.what());
    }
    std::fflush(stdout);
  }
  if (failures) std::printf("%d criterion(s) failed\n", failures);
  return failures;
}
