#include "dfl/engine.hpp"

#include <algorithm>
#include <cmath>

#include "dfl/error.hpp"

namespace dfl {

void DflConfig::validate() const {
  if (k < 0) throw ConfigError("K must be >= 0");
  if (k >= 1 && t_update < 1) throw ConfigError("T_update must be >= 1");
  if (reset_enabled && t_reset < 1) throw ConfigError("T_reset must be >= 1");
  if (reset_enabled && reset_mode == ResetMode::mean && k == 0) {
    throw ConfigError("mean reset requires at least one teacher (K >= 1)");
  }
  if (head_len < 1) throw ConfigError("head_len must be >= 1");
}

TeacherPool init_pool(const Model& model, const DflConfig& cfg, Rng& rng) {
  cfg.validate();
  TeacherPool pool;
  const auto manifest = model.head_manifest();
  for (int k = 0; k < cfg.k; ++k) {
    std::vector<Tensor> params;
    for (const auto& shape : manifest) {
      params.emplace_back(shape, init_params(shape, model.init_scheme(), rng),
                          false);
    }
    pool.teachers.emplace_back(std::move(params));
  }
  pool.meaningfulness.assign(static_cast<size_t>(cfg.k) + 1,
                             MeaningTracker{});
  return pool;
}

ForwardAll forward_all(const Model& model, const TeacherPool& pool,
                       const Tensor& x) {
  ForwardAll f;
  f.body_out = model.body_forward(x);
  f.student_logits = model.apply_head(f.body_out);
  f.student_probs = softmax(f.student_logits);
  f.teacher_logits.reserve(pool.teachers.size());
  f.teacher_probs.reserve(pool.teachers.size());
  for (const auto& snap : pool.teachers) {
    Tensor logits = model.apply_head(f.body_out, snap);
    f.teacher_logits.push_back(logits);
    f.teacher_probs.push_back(softmax(logits));
  }
  return f;
}

LossTerms compute_total_loss(const ForwardAll& f,
                             const std::vector<int>& labels,
                             const DflConfig& cfg) {
  LossTerms terms;
  Tensor main = cross_entropy(f.student_logits, labels);
  terms.main = main.item();
  if (cfg.k == 0 || f.teacher_probs.empty()) {
    terms.total = main;
    return terms;
  }
  Tensor kl_sum = kl_divergence(f.student_probs, f.teacher_probs[0]);
  for (size_t k = 1; k < f.teacher_probs.size(); ++k) {
    kl_sum = add(kl_sum, kl_divergence(f.student_probs, f.teacher_probs[k]));
  }
  const double w = cfg.distill_weight == DistillWeightMode::mean_over_k
                       ? 1.0 / static_cast<double>(f.teacher_probs.size())
                       : 1.0;
  Tensor distill = scale(kl_sum, w);
  terms.distill = distill.item();
  terms.total = add(main, distill);
  return terms;
}

namespace {

void count_correct(MeaningTracker& t, const Tensor& probs,
                   const std::vector<int>& labels) {
  const int64_t batch = probs.dim(0), m = probs.dim(1);
  const auto d = probs.data();
  for (int64_t b = 0; b < batch; ++b) {
    const double* row = d.data() + b * m;
    int best = 0;
    for (int64_t i = 1; i < m; ++i) {
      if (row[i] > row[best]) best = static_cast<int>(i);
    }
    if (best == labels[static_cast<size_t>(b)]) ++t.correct;
  }
  t.seen += batch;
}

}  // namespace

void update_meaningfulness(TeacherPool& pool, const ForwardAll& f,
                           const std::vector<int>& labels) {
  count_correct(pool.meaningfulness[0], f.student_probs, labels);
  for (size_t k = 0; k < f.teacher_probs.size(); ++k) {
    count_correct(pool.meaningfulness[k + 1], f.teacher_probs[k], labels);
  }
}

void end_epoch_accuracy(TeacherPool& pool) {
  for (size_t i = 0; i < pool.meaningfulness.size(); ++i) {
    auto& t = pool.meaningfulness[i];
    if (t.seen == 0) {
      throw ProtocolError("meaningfulness accumulator for head " +
                          std::to_string(i) + " saw no samples this epoch");
    }
    t.last_epoch_accuracy =
        static_cast<double>(t.correct) / static_cast<double>(t.seen);
    t.correct = 0;
    t.seen = 0;
  }
  pool.accuracy_fresh = true;
}

ReplacementReport maybe_update_teachers(TeacherPool& pool,
                                        const Model& model) {
  if (pool.teachers.empty()) {
    throw ProtocolError("teacher update with an empty pool");
  }
  if (!pool.accuracy_fresh) {
    throw ProtocolError(
        "teacher update with stale meaningfulness; finish an epoch first");
  }
  ReplacementReport report;
  report.p.reserve(pool.meaningfulness.size());
  for (const auto& t : pool.meaningfulness) {
    report.p.push_back(t.last_epoch_accuracy);
  }
  // lowest-index argmin over teachers only
  int k_prime = 1;
  for (size_t k = 2; k < report.p.size(); ++k) {
    if (report.p[k] < report.p[static_cast<size_t>(k_prime)]) {
      k_prime = static_cast<int>(k);
    }
  }
  report.k_prime = k_prime;
  if (report.p[static_cast<size_t>(k_prime)] <= report.p[0]) {
    pool.teachers[static_cast<size_t>(k_prime - 1)] = model.snapshot_head();
    report.replaced = true;
  }
  // Re-initialize P unconditionally (Algorithm 1 does so whether or not a
  // replacement happened).
  for (auto& t : pool.meaningfulness) t = MeaningTracker{};
  pool.accuracy_fresh = false;
  return report;
}

void reset_student(Model& model, const TeacherPool& pool, const DflConfig& cfg,
                   Rng& reset_rng, Sgd* optim) {
  const auto manifest = model.head_manifest();
  std::vector<Tensor> values;
  if (cfg.reset_mode == ResetMode::mean) {
    if (pool.teachers.empty()) {
      throw ConfigError("mean reset with an empty teacher pool");
    }
    const double inv_k = 1.0 / static_cast<double>(pool.teachers.size());
    for (size_t i = 0; i < manifest.size(); ++i) {
      std::vector<double> acc(
          static_cast<size_t>(shape_numel(manifest[i])), 0.0);
      for (const auto& snap : pool.teachers) {
        const auto src = snap.params()[i].data();
        for (size_t j = 0; j < acc.size(); ++j) acc[j] += src[j];
      }
      for (auto& v : acc) v *= inv_k;
      values.emplace_back(manifest[i], std::move(acc), false);
    }
  } else {
    for (const auto& shape : manifest) {
      values.emplace_back(shape,
                          init_params(shape, model.init_scheme(), reset_rng),
                          false);
    }
  }
  model.load_head(HeadSnapshot(std::move(values)));
  if (optim) {
    const auto head = model.head_params();
    optim->reset_momentum(head);
  }
}

double evaluate_accuracy(const Model& model, const Dataset& ds,
                         const BatchPlan& plan) {
  BatchPlan eval_plan = plan;
  eval_plan.crop_pad4 = false;
  eval_plan.hflip = false;
  EpochIterator it(ds, eval_plan, 0);
  Tensor x;
  std::vector<int> y;
  int64_t correct = 0, seen = 0;
  while (it.next(x, y)) {
    Tensor logits = model.forward(x);
    const int64_t batch = logits.dim(0), m = logits.dim(1);
    const auto d = logits.data();
    for (int64_t b = 0; b < batch; ++b) {
      const double* row = d.data() + b * m;
      int best = 0;
      for (int64_t i = 1; i < m; ++i) {
        if (row[i] > row[best]) best = static_cast<int>(i);
      }
      if (best == y[static_cast<size_t>(b)]) ++correct;
    }
    seen += batch;
  }
  return seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
}

std::vector<MetricsRecord> train(Model& model, TeacherPool& pool,
                                 const Dataset& train_ds,
                                 const Dataset& test_ds, Sgd& optim,
                                 const DflConfig& cfg,
                                 const TrainOptions& opt) {
  cfg.validate();
  if (static_cast<int>(pool.teachers.size()) != cfg.k) {
    throw ConfigError("pool holds " + std::to_string(pool.teachers.size()) +
                      " teachers but config says K=" + std::to_string(cfg.k));
  }

  LrSchedule sched;
  sched.base_lr = opt.base_lr;
  sched.warmup_epochs = opt.warmup_epochs;
  sched.milestones = opt.milestones;
  sched.gamma = opt.gamma;
  sched.steps_per_epoch = opt.plan.batches_per_epoch(train_ds.n());

  Rng reset_rng(Rng::mix(opt.seed, seed_stream::kReset));

  std::vector<MetricsRecord> records;
  int64_t global_step = 0;

  for (int epoch = 1; epoch <= opt.epochs; ++epoch) {
    BatchPlan plan = opt.plan;
    plan.shuffle_seed = opt.seed;
    EpochIterator it(train_ds, plan, epoch - 1);

    double loss_main_sum = 0.0, loss_distill_sum = 0.0;
    double last_lr = 0.0;
    int64_t steps_this_epoch = 0;

    Tensor x;
    std::vector<int> y;
    while (it.next(x, y)) {
      const double lr = lr_at(global_step, sched);
      last_lr = lr;

      Graph tape;
      Graph::Scope scope(tape);
      LossTerms loss;
      try {
        ForwardAll f = forward_all(model, pool, x);
        loss = compute_total_loss(f, y, cfg);
        update_meaningfulness(pool, f, y);

        const double total = loss.total.item();
        if (!std::isfinite(total)) {
          const char* bad = !std::isfinite(loss.main) ? "cross_entropy"
                                                      : "kl_divergence";
          throw NumericError("non-finite loss (tensor '" + std::string(bad) +
                             "')");
        }
        tape.backward(loss.total);
      } catch (const NumericError& e) {
        throw TrainAbortError(global_step, e.what(),
                              "abort at step " + std::to_string(global_step) +
                                  ": " + e.what());
      }
      optim.step(lr);
      optim.zero_grad();

      loss_main_sum += loss.main;
      loss_distill_sum += loss.distill;
      ++steps_this_epoch;
      ++global_step;
    }

    end_epoch_accuracy(pool);

    MetricsRecord rec;
    rec.epoch = epoch;
    rec.lr = last_lr;
    rec.train_loss_main = loss_main_sum / static_cast<double>(steps_this_epoch);
    rec.train_loss_distill =
        loss_distill_sum / static_cast<double>(steps_this_epoch);
    for (const auto& t : pool.meaningfulness) {
      rec.train_acc.push_back(t.last_epoch_accuracy);
    }
    rec.test_acc = evaluate_accuracy(model, test_ds, opt.plan);

    // Boundary ops run after measurement: update strictly before reset.
    if (cfg.k >= 1 && epoch % cfg.t_update == 0) {
      ReplacementReport rep = maybe_update_teachers(pool, model);
      TrainEvent ev;
      ev.kind = rep.replaced ? TrainEvent::Kind::teacher_replaced
                             : TrainEvent::Kind::teacher_kept;
      ev.k_prime = rep.k_prime;
      rec.events.push_back(ev);
    }
    if (cfg.reset_enabled && epoch % cfg.t_reset == 0) {
      reset_student(model, pool, cfg, reset_rng, &optim);
      rec.events.push_back({TrainEvent::Kind::reset, -1});
    }

    if (opt.on_epoch) opt.on_epoch(rec);
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace dfl
