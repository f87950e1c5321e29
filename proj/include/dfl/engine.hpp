#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dfl/data.hpp"
#include "dfl/model.hpp"
#include "dfl/optim.hpp"
#include "dfl/rng.hpp"
#include "dfl/tensor.hpp"

namespace dfl {

enum class ResetMode { random, mean };
enum class DistillWeightMode { mean_over_k, sum };

// DFL hyperparameters. k = 0 disables distillation and teacher updates
// entirely; reset_enabled = false disables the reset cycle. Cycles are in
// epochs.
struct DflConfig {
  int k = 4;
  int t_update = 100;
  bool reset_enabled = true;
  int t_reset = 100;
  ResetMode reset_mode = ResetMode::mean;
  DistillWeightMode distill_weight = DistillWeightMode::mean_over_k;
  int head_len = 3;

  void validate() const;
};

// Per-head running accuracy: counters accumulate within an epoch and roll
// into last_epoch_accuracy at the epoch boundary.
struct MeaningTracker {
  int64_t correct = 0;
  int64_t seen = 0;
  double last_epoch_accuracy = 0.0;
};

// K frozen teacher heads plus meaningfulness state for student (index 0)
// and teachers (1..K).
struct TeacherPool {
  std::vector<HeadSnapshot> teachers;
  std::vector<MeaningTracker> meaningfulness;
  bool accuracy_fresh = false;

  int k() const { return static_cast<int>(teachers.size()); }
};

// K teachers drawn independently from the model's init scheme (not copies
// of the student); accumulators zeroed.
TeacherPool init_pool(const Model& model, const DflConfig& cfg, Rng& rng);

struct ForwardAll {
  Tensor body_out;
  Tensor student_logits;
  Tensor student_probs;
  std::vector<Tensor> teacher_logits;
  std::vector<Tensor> teacher_probs;
};

// Body once, then student head (on the tape) and every teacher head
// (detached) on the shared body output.
ForwardAll forward_all(const Model& model, const TeacherPool& pool,
                       const Tensor& x);

struct LossTerms {
  Tensor total;          // scalar, on the tape
  double main = 0.0;     // cross-entropy value
  double distill = 0.0;  // weighted distillation term value
};

// L_total = CE(student logits, labels) + w * sum_k KL(student, teacher_k),
// w = 1/K in mean mode, 1 in sum mode. K = 0 leaves only the main term.
LossTerms compute_total_loss(const ForwardAll& f,
                             const std::vector<int>& labels,
                             const DflConfig& cfg);

// Adds this batch's argmax-vs-label counts for all K+1 heads.
void update_meaningfulness(TeacherPool& pool, const ForwardAll& f,
                           const std::vector<int>& labels);

// Epoch-boundary rollover: last_epoch_accuracy := correct/seen, counters
// zeroed. ProtocolError if any head saw no samples.
void end_epoch_accuracy(TeacherPool& pool);

struct ReplacementReport {
  int k_prime = 0;        // 1-based index of the least meaningful teacher
  std::vector<double> p;  // K+1 accuracies, [0] = student
  bool replaced = false;
};

// The teacher update of Algorithm 2: k' = lowest-index argmin over teacher
// accuracies; replace with a student snapshot iff p_{k'} <= p_0. All
// meaningfulness state is re-initialized afterwards, replaced or not.
// ProtocolError unless epoch accuracies are fresh.
ReplacementReport maybe_update_teachers(TeacherPool& pool, const Model& model);

// Student reset: mean mode loads the elementwise mean of the teachers,
// random mode re-draws from the init scheme using `reset_rng` (a stream that
// advances across resets). Body untouched; head momentum zeroed when an
// optimizer is given.
void reset_student(Model& model, const TeacherPool& pool, const DflConfig& cfg,
                   Rng& reset_rng, Sgd* optim);

struct TrainEvent {
  enum class Kind { teacher_replaced, teacher_kept, reset };
  Kind kind;
  int k_prime = -1;  // for teacher events
};

struct MetricsRecord {
  int epoch = 0;  // 1-based
  double lr = 0.0;
  double train_loss_main = 0.0;
  double train_loss_distill = 0.0;
  std::vector<double> train_acc;  // K+1 heads, [0] = student
  double test_acc = 0.0;
  std::vector<TrainEvent> events;
};

struct TrainOptions {
  int epochs = 1;
  uint64_t seed = 1;
  double base_lr = 0.1;
  int warmup_epochs = 1;
  std::vector<int> milestones = {60, 120, 160};
  double gamma = 0.2;
  BatchPlan plan;
  // invoked after each epoch's record is complete (CSV streaming)
  std::function<void(const MetricsRecord&)> on_epoch;
};

double evaluate_accuracy(const Model& model, const Dataset& ds,
                         const BatchPlan& plan);

// The full DFL loop (Algorithm 1/2 with epoch-based cycles): per step
// forward_all + total loss + backward + SGD on body and student;
// at the end of epoch e (1-based), teacher update when e % t_update == 0,
// then student reset when e % t_reset == 0. Throws TrainAbortError on a
// non-finite loss.
std::vector<MetricsRecord> train(Model& model, TeacherPool& pool,
                                 const Dataset& train_ds,
                                 const Dataset& test_ds, Sgd& optim,
                                 const DflConfig& cfg,
                                 const TrainOptions& opt);

}  // namespace dfl
