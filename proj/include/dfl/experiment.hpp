#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dfl/engine.hpp"

namespace dfl {

// Full experiment description. Defaults follow the paper's image
// classification setup; the flat key=value text form round-trips exactly.
struct RunConfig {
  // dataset
  std::string dataset = "cifar100";  // cifar10|cifar100|synthetic_image|synthetic_vector
  std::string data_dir;              // empty: use $DFL_DATA_DIR
  int synth_classes = 3;
  int synth_train_per_class = 200;
  int synth_test_per_class = 100;
  double synth_spread = 0.08;
  int64_t synth_hw = 32;
  int64_t synth_dims = 16;
  // model
  std::string arch = "vgg16";  // tiny_cnn|tiny_mlp|vgg16|inline:<layers>
  int head_len = 3;            // L
  // dfl
  int k = 4;
  bool reset = true;  // R
  int t_update = 100;
  int t_reset = 100;
  std::string reset_mode = "mean";      // M: mean|random
  std::string distill_weight = "mean";  // mean|sum
  // optimizer
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 2e-4;
  int warmup_epochs = 1;
  std::vector<int> milestones = {60, 120, 160};
  double gamma = 0.2;
  // run
  int epochs = 200;
  int64_t batch_size = 128;
  uint64_t seed = 1;
  bool augment_crop = true;
  bool augment_hflip = true;
  std::string out_dir = "runs";

  std::string serialize() const;
  DflConfig dfl() const;
  bool operator==(const RunConfig&) const = default;
};

// Flat key=value text, one pair per line, '#' comments. Unknown keys and
// unparsable values raise ConfigError with the line number. `T=` is sugar
// for setting both cycles and conflicts with explicit T_update/T_reset.
RunConfig parse_config(const std::string& text);
RunConfig parse_config_file(const std::string& path);

struct RunResult {
  std::string dir;
  bool ok = false;
  bool resumed = false;
  std::string error;
  double final_test_acc = 0.0;
  std::vector<MetricsRecord> metrics;
};

// One training run. Writes metrics.csv, events.log, effective-config.txt,
// status.txt and model.ckpt into a directory named by a hash of the
// effective config (or `out_override`). With `resume`, a completed
// directory is not re-run. A NaN abort keeps the partial CSV and returns
// ok = false.
RunResult run_single(const RunConfig& cfg, const std::string& out_override = "",
                     bool resume = false);

struct GridRow {
  int k = 0;
  int t = 0;
  int seeds_total = 0;
  int seeds_ok = 0;
  double mean = 0.0;
  double stddev = 0.0;
  std::vector<double> finals;
  std::vector<std::string> dirs;
  std::vector<std::string> errors;
};

struct GridSummary {
  std::vector<GridRow> rows;
  std::string csv_path;
};

// Every (K, T, seed) cell with T applied to both cycles; seeds are
// base.seed .. base.seed + n_seeds - 1. Cell failures are recorded and the
// sweep continues. Summary CSV columns: K, R, T_cycle, M, model, seeds_ok,
// mean, std of the final test accuracy.
GridSummary grid_search(const RunConfig& base, const std::vector<int>& k_set,
                        const std::vector<int>& t_set, int n_seeds);

// Mean and population (divide-by-n) standard deviation; needs >= 2 values.
std::pair<double, double> aggregate_seeds(const std::vector<double>& finals);

// Combines two equal-size groups' (mean, population std) into the pooled
// pair: mean = (ma+mb)/2, std = sqrt((sa^2+sb^2)/2 + ((ma-m)^2+(mb-m)^2)/2).
std::pair<double, double> combine_group_stats(double mean_a, double std_a,
                                              double mean_b, double std_b);

// ---- CSV -------------------------------------------------------------
// Fixed schema per K; floats at 6 significant digits, '.' decimal point.

std::string format_g6(double v);
std::string metrics_csv_header(int k);
std::string metrics_csv_row(const MetricsRecord& rec);
MetricsRecord parse_metrics_row(const std::string& line);
std::vector<MetricsRecord> read_metrics_csv(const std::string& path);

}  // namespace dfl
