#include "dfl/experiment.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dfl/error.hpp"
#include "dfl/hash.hpp"

namespace fs = std::filesystem;

namespace dfl {

// ---- value formatting --------------------------------------------------

namespace {

// Shortest text that parses back to the same double (config round-trip).
std::string double_str(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

[[noreturn]] void bad_value(int line, const std::string& key,
                            const std::string& val) {
  throw ConfigError("line " + std::to_string(line) + ": cannot parse value '" +
                    val + "' for key '" + key + "'");
}

int64_t parse_i64(int line, const std::string& key, const std::string& val) {
  int64_t out = 0;
  const auto* end = val.data() + val.size();
  auto res = std::from_chars(val.data(), end, out);
  if (res.ec != std::errc() || res.ptr != end) bad_value(line, key, val);
  return out;
}

uint64_t parse_u64(int line, const std::string& key, const std::string& val) {
  uint64_t out = 0;
  const auto* end = val.data() + val.size();
  auto res = std::from_chars(val.data(), end, out);
  if (res.ec != std::errc() || res.ptr != end) bad_value(line, key, val);
  return out;
}

double parse_f64(int line, const std::string& key, const std::string& val) {
  if (val.empty()) bad_value(line, key, val);
  char* end = nullptr;
  const double out = std::strtod(val.c_str(), &end);
  if (end != val.c_str() + val.size()) bad_value(line, key, val);
  return out;
}

bool parse_bool(int line, const std::string& key, const std::string& val) {
  if (val == "0") return false;
  if (val == "1") return true;
  bad_value(line, key, val);
}

std::vector<int> parse_int_list(int line, const std::string& key,
                                const std::string& val) {
  std::vector<int> out;
  if (trim(val).empty()) return out;
  std::stringstream ss(val);
  std::string item;
  while (std::getline(ss, item, ',')) {
    out.push_back(static_cast<int>(parse_i64(line, key, trim(item))));
  }
  return out;
}

}  // namespace

// ---- RunConfig ---------------------------------------------------------

std::string RunConfig::serialize() const {
  std::ostringstream os;
  os << "dataset=" << dataset << "\n";
  os << "data_dir=" << data_dir << "\n";
  os << "arch=" << arch << "\n";
  os << "L=" << head_len << "\n";
  os << "K=" << k << "\n";
  os << "R=" << (reset ? 1 : 0) << "\n";
  os << "T_update=" << t_update << "\n";
  os << "T_reset=" << t_reset << "\n";
  os << "M=" << reset_mode << "\n";
  os << "distill_weight=" << distill_weight << "\n";
  os << "lr=" << double_str(lr) << "\n";
  os << "momentum=" << double_str(momentum) << "\n";
  os << "weight_decay=" << double_str(weight_decay) << "\n";
  os << "warmup_epochs=" << warmup_epochs << "\n";
  os << "milestones=" << join_ints(milestones) << "\n";
  os << "gamma=" << double_str(gamma) << "\n";
  os << "epochs=" << epochs << "\n";
  os << "batch_size=" << batch_size << "\n";
  os << "seed=" << seed << "\n";
  os << "augment_crop=" << (augment_crop ? 1 : 0) << "\n";
  os << "augment_hflip=" << (augment_hflip ? 1 : 0) << "\n";
  os << "out_dir=" << out_dir << "\n";
  os << "synth_classes=" << synth_classes << "\n";
  os << "synth_train_per_class=" << synth_train_per_class << "\n";
  os << "synth_test_per_class=" << synth_test_per_class << "\n";
  os << "synth_spread=" << double_str(synth_spread) << "\n";
  os << "synth_hw=" << synth_hw << "\n";
  os << "synth_dims=" << synth_dims << "\n";
  return os.str();
}

DflConfig RunConfig::dfl() const {
  DflConfig c;
  c.k = k;
  c.t_update = t_update;
  c.reset_enabled = reset;
  c.t_reset = t_reset;
  if (reset_mode == "mean") {
    c.reset_mode = ResetMode::mean;
  } else if (reset_mode == "random") {
    c.reset_mode = ResetMode::random;
  } else {
    throw ConfigError("M must be 'mean' or 'random', got '" + reset_mode + "'");
  }
  if (distill_weight == "mean") {
    c.distill_weight = DistillWeightMode::mean_over_k;
  } else if (distill_weight == "sum") {
    c.distill_weight = DistillWeightMode::sum;
  } else {
    throw ConfigError("distill_weight must be 'mean' or 'sum', got '" +
                      distill_weight + "'");
  }
  c.head_len = head_len;
  return c;
}

RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  bool saw_t = false, saw_t_update = false, saw_t_reset = false;

  std::stringstream ss(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(ss, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) +
                        ": expected key=value, got '" + line + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));

    if (key == "dataset") cfg.dataset = val;
    else if (key == "data_dir") cfg.data_dir = val;
    else if (key == "arch") cfg.arch = val;
    else if (key == "L") cfg.head_len = static_cast<int>(parse_i64(line_no, key, val));
    else if (key == "K") cfg.k = static_cast<int>(parse_i64(line_no, key, val));
    else if (key == "R") cfg.reset = parse_bool(line_no, key, val);
    else if (key == "T") {
      cfg.t_update = cfg.t_reset = static_cast<int>(parse_i64(line_no, key, val));
      saw_t = true;
    } else if (key == "T_update") {
      cfg.t_update = static_cast<int>(parse_i64(line_no, key, val));
      saw_t_update = true;
    } else if (key == "T_reset") {
      cfg.t_reset = static_cast<int>(parse_i64(line_no, key, val));
      saw_t_reset = true;
    }
    else if (key == "M") cfg.reset_mode = val;
    else if (key == "distill_weight") cfg.distill_weight = val;
    else if (key == "lr") cfg.lr = parse_f64(line_no, key, val);
    else if (key == "momentum") cfg.momentum = parse_f64(line_no, key, val);
    else if (key == "weight_decay") cfg.weight_decay = parse_f64(line_no, key, val);
    else if (key == "warmup_epochs") cfg.warmup_epochs = static_cast<int>(parse_i64(line_no, key, val));
    else if (key == "milestones") cfg.milestones = parse_int_list(line_no, key, val);
    else if (key == "gamma") cfg.gamma = parse_f64(line_no, key, val);
    else if (key == "epochs") cfg.epochs = static_cast<int>(parse_i64(line_no, key, val));
    else if (key == "batch_size") cfg.batch_size = parse_i64(line_no, key, val);
    else if (key == "seed") cfg.seed = parse_u64(line_no, key, val);
    else if (key == "augment_crop") cfg.augment_crop = parse_bool(line_no, key, val);
    else if (key == "augment_hflip") cfg.augment_hflip = parse_bool(line_no, key, val);
    else if (key == "out_dir") cfg.out_dir = val;
    else if (key == "synth_classes") cfg.synth_classes = static_cast<int>(parse_i64(line_no, key, val));
    else if (key == "synth_train_per_class") cfg.synth_train_per_class = static_cast<int>(parse_i64(line_no, key, val));
    else if (key == "synth_test_per_class") cfg.synth_test_per_class = static_cast<int>(parse_i64(line_no, key, val));
    else if (key == "synth_spread") cfg.synth_spread = parse_f64(line_no, key, val);
    else if (key == "synth_hw") cfg.synth_hw = parse_i64(line_no, key, val);
    else if (key == "synth_dims") cfg.synth_dims = parse_i64(line_no, key, val);
    else {
      throw ConfigError("line " + std::to_string(line_no) + ": unknown key '" +
                        key + "'");
    }
  }
  if (saw_t && (saw_t_update || saw_t_reset)) {
    throw ConfigError("T conflicts with explicit T_update/T_reset");
  }
  return cfg;
}

RunConfig parse_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

// ---- CSV ---------------------------------------------------------------

std::string format_g6(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

std::string metrics_csv_header(int k) {
  std::string h = "epoch,lr,train_loss_main,train_loss_distill";
  for (int i = 0; i <= k; ++i) h += ",train_acc_" + std::to_string(i);
  h += ",test_acc,events";
  return h;
}

std::string metrics_csv_row(const MetricsRecord& rec) {
  std::string row = std::to_string(rec.epoch);
  row += "," + format_g6(rec.lr);
  row += "," + format_g6(rec.train_loss_main);
  row += "," + format_g6(rec.train_loss_distill);
  for (double a : rec.train_acc) row += "," + format_g6(a);
  row += "," + format_g6(rec.test_acc);
  row += ",";
  bool first = true;
  for (const auto& ev : rec.events) {
    // only replacement and reset events are part of the record schema
    if (ev.kind == TrainEvent::Kind::teacher_kept) continue;
    if (!first) row += "|";
    first = false;
    if (ev.kind == TrainEvent::Kind::teacher_replaced) {
      row += "teacher_replaced(" + std::to_string(ev.k_prime) + ")";
    } else {
      row += "reset";
    }
  }
  return row;
}

MetricsRecord parse_metrics_row(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (line.empty() || line.back() == ',') cells.push_back("");
  if (cells.size() < 7) throw DataError("bad metrics row: " + line);

  MetricsRecord rec;
  rec.epoch = static_cast<int>(std::strtol(cells[0].c_str(), nullptr, 10));
  rec.lr = std::strtod(cells[1].c_str(), nullptr);
  rec.train_loss_main = std::strtod(cells[2].c_str(), nullptr);
  rec.train_loss_distill = std::strtod(cells[3].c_str(), nullptr);
  const size_t n_acc = cells.size() - 6;
  for (size_t i = 0; i < n_acc; ++i) {
    rec.train_acc.push_back(std::strtod(cells[4 + i].c_str(), nullptr));
  }
  rec.test_acc = std::strtod(cells[cells.size() - 2].c_str(), nullptr);
  const std::string& events = cells.back();
  std::stringstream es(events);
  std::string tok;
  while (std::getline(es, tok, '|')) {
    if (tok.empty()) continue;
    if (tok == "reset") {
      rec.events.push_back({TrainEvent::Kind::reset, -1});
    } else if (tok.rfind("teacher_replaced(", 0) == 0) {
      const int kp = static_cast<int>(
          std::strtol(tok.c_str() + std::string("teacher_replaced(").size(),
                      nullptr, 10));
      rec.events.push_back({TrainEvent::Kind::teacher_replaced, kp});
    } else {
      throw DataError("bad event token '" + tok + "' in row: " + line);
    }
  }
  return rec;
}

std::vector<MetricsRecord> read_metrics_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open metrics file: " + path);
  std::vector<MetricsRecord> out;
  std::string line;
  bool header = true;
  while (std::getline(is, line)) {
    if (header) {
      header = false;
      continue;
    }
    if (!trim(line).empty()) out.push_back(parse_metrics_row(line));
  }
  return out;
}

// ---- dataset / model construction ---------------------------------------

namespace {

std::string dataset_root(const RunConfig& cfg) {
  if (!cfg.data_dir.empty()) return cfg.data_dir;
  if (const char* env = std::getenv("DFL_DATA_DIR")) return env;
  throw ConfigError("no data_dir configured and DFL_DATA_DIR is not set");
}

std::pair<Dataset, Dataset> build_datasets(const RunConfig& cfg) {
  if (cfg.dataset == "cifar10" || cfg.dataset == "cifar100") {
    const auto variant = cfg.dataset == "cifar10" ? CifarVariant::cifar10
                                                  : CifarVariant::cifar100;
    return load_cifar((fs::path(dataset_root(cfg)) / cfg.dataset).string(),
                      variant);
  }
  if (cfg.dataset == "synthetic_image" || cfg.dataset == "synthetic_vector") {
    SyntheticSpec spec;
    spec.classes = cfg.synth_classes;
    spec.spread = cfg.synth_spread;
    spec.image_mode = cfg.dataset == "synthetic_image";
    spec.hw = cfg.synth_hw;
    spec.dims = cfg.synth_dims;
    const uint64_t data_seed = Rng::mix(cfg.seed, seed_stream::kData);
    spec.n_per_class = cfg.synth_train_per_class;
    Dataset train = synthetic_blobs(spec, data_seed, Dataset::Split::train);
    spec.n_per_class = cfg.synth_test_per_class;
    Dataset test = synthetic_blobs(spec, data_seed, Dataset::Split::test);
    compute_normalization(train);
    test.channel_mean = train.channel_mean;
    test.channel_std = train.channel_std;
    return {std::move(train), std::move(test)};
  }
  throw ConfigError("unknown dataset '" + cfg.dataset + "'");
}

std::vector<std::string> split_on(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(item);
  return out;
}

std::vector<LayerSpec> parse_inline_arch(const std::string& text) {
  std::vector<LayerSpec> specs;
  for (const std::string& item : split_on(text, ',')) {
    const auto parts = split_on(trim(item), ':');
    if (parts.empty()) throw ConfigError("empty layer in inline arch");
    const std::string& kind = parts[0];
    auto want = [&](size_t n) {
      if (parts.size() != n) {
        throw ConfigError("layer '" + item + "' expects " +
                          std::to_string(n - 1) + " arguments");
      }
    };
    auto arg = [&](size_t i) {
      return parse_i64(0, "arch", trim(parts[i]));
    };
    if (kind == "conv") {
      want(6);
      specs.push_back(LayerSpec::Conv(arg(1), arg(2), static_cast<int>(arg(3)),
                                      static_cast<int>(arg(4)),
                                      static_cast<int>(arg(5))));
    } else if (kind == "dense") {
      if (parts.size() == 2) {
        specs.push_back(LayerSpec::Dense(arg(1)));
      } else {
        want(3);
        specs.push_back(LayerSpec::Dense(arg(1), arg(2)));
      }
    } else if (kind == "relu") {
      want(1);
      specs.push_back(LayerSpec::Relu());
    } else if (kind == "maxpool") {
      want(3);
      specs.push_back(LayerSpec::MaxPool(static_cast<int>(arg(1)),
                                         static_cast<int>(arg(2))));
    } else if (kind == "flatten") {
      want(1);
      specs.push_back(LayerSpec::Flatten());
    } else {
      throw ConfigError("unknown layer kind '" + kind + "' in inline arch");
    }
  }
  return specs;
}

std::vector<LayerSpec> arch_specs(const RunConfig& cfg, const Shape& sample,
                                  int classes) {
  if (cfg.arch == "tiny_cnn") {
    return tiny_cnn_specs(sample[0], sample[1], classes);
  }
  if (cfg.arch == "tiny_mlp") {
    return tiny_mlp_specs(shape_numel(sample), classes);
  }
  if (cfg.arch == "vgg16") {
    return vgg16_specs(sample[0], sample[1], classes);
  }
  if (cfg.arch.rfind("inline:", 0) == 0) {
    return parse_inline_arch(cfg.arch.substr(7));
  }
  throw ConfigError("unknown arch '" + cfg.arch + "'");
}

std::string vec_str(const std::vector<double>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += format_g6(v[i]);
  }
  return out;
}

}  // namespace

// ---- run_single ----------------------------------------------------------

RunResult run_single(const RunConfig& cfg, const std::string& out_override,
                     bool resume) {
  RunResult result;
  const std::string effective = cfg.serialize();
  const std::string dir =
      out_override.empty()
          ? (fs::path(cfg.out_dir) / ("run_" + to_hex16(fnv1a64(effective))))
                .string()
          : out_override;
  result.dir = dir;

  const std::string status_path = (fs::path(dir) / "status.txt").string();
  if (resume && fs::exists(status_path)) {
    std::ifstream st(status_path);
    std::string status;
    std::getline(st, status);
    if (status == "ok") {
      result.metrics = read_metrics_csv((fs::path(dir) / "metrics.csv").string());
      if (!result.metrics.empty()) {
        result.final_test_acc = result.metrics.back().test_acc;
        result.ok = true;
        result.resumed = true;
        return result;
      }
    }
  }

  fs::create_directories(dir);
  {
    std::ofstream cf((fs::path(dir) / "effective-config.txt").string(),
                     std::ios::trunc);
    cf << effective;
  }

  std::ofstream csv((fs::path(dir) / "metrics.csv").string(), std::ios::trunc);
  std::ofstream events((fs::path(dir) / "events.log").string(),
                       std::ios::trunc);

  try {
    auto [train_ds, test_ds] = build_datasets(cfg);
    events << "normalization mean=" << vec_str(train_ds.channel_mean)
           << " std=" << vec_str(train_ds.channel_std) << "\n";
    events << "augmentation crop_pad4=" << (cfg.augment_crop ? 1 : 0)
           << " hflip=" << (cfg.augment_hflip ? 1 : 0) << "\n";
    events.flush();

    const Shape sample = train_ds.sample_shape();
    Model model = build_model(arch_specs(cfg, sample, train_ds.class_count),
                              cfg.head_len, InitScheme{},
                              Rng::mix(cfg.seed, seed_stream::kModelInit),
                              sample);

    const DflConfig dcfg = cfg.dfl();
    Rng teacher_rng(Rng::mix(cfg.seed, seed_stream::kTeacherInit));
    TeacherPool pool = init_pool(model, dcfg, teacher_rng);

    Sgd optim(model.params(), cfg.momentum, cfg.weight_decay);

    TrainOptions opt;
    opt.epochs = cfg.epochs;
    opt.seed = cfg.seed;
    opt.base_lr = cfg.lr;
    opt.warmup_epochs = cfg.warmup_epochs;
    opt.milestones = cfg.milestones;
    opt.gamma = cfg.gamma;
    opt.plan.batch_size = cfg.batch_size;
    opt.plan.shuffle_seed = cfg.seed;
    opt.plan.crop_pad4 = cfg.augment_crop;
    opt.plan.hflip = cfg.augment_hflip;

    csv << metrics_csv_header(dcfg.k) << "\n";
    csv.flush();
    opt.on_epoch = [&](const MetricsRecord& rec) {
      csv << metrics_csv_row(rec) << "\n";
      csv.flush();
      for (const auto& ev : rec.events) {
        switch (ev.kind) {
          case TrainEvent::Kind::teacher_replaced:
          case TrainEvent::Kind::teacher_kept:
            events << "epoch " << rec.epoch << " update k'=" << ev.k_prime
                   << " replaced="
                   << (ev.kind == TrainEvent::Kind::teacher_replaced ? 1 : 0)
                   << "\n";
            break;
          case TrainEvent::Kind::reset:
            events << "epoch " << rec.epoch << " reset mode=" << cfg.reset_mode
                   << "\n";
            break;
        }
      }
      events.flush();
    };

    result.metrics = train(model, pool, train_ds, test_ds, optim, dcfg, opt);
    save_checkpoint(model, (fs::path(dir) / "model.ckpt").string());
    result.final_test_acc =
        result.metrics.empty() ? 0.0 : result.metrics.back().test_acc;
    result.ok = true;
    std::ofstream st(status_path, std::ios::trunc);
    st << "ok\n";
  } catch (const TrainAbortError& e) {
    events << "abort step=" << e.step() << " tensor=" << e.tensor() << "\n";
    result.error = e.what();
    std::ofstream st(status_path, std::ios::trunc);
    st << "failed: " << e.what() << "\n";
  } catch (const Error& e) {
    result.error = e.what();
    std::ofstream st(status_path, std::ios::trunc);
    st << "failed: " << e.what() << "\n";
  }
  return result;
}

// ---- grid ------------------------------------------------------------

GridSummary grid_search(const RunConfig& base, const std::vector<int>& k_set,
                        const std::vector<int>& t_set, int n_seeds) {
  if (k_set.empty() || t_set.empty() || n_seeds < 1) {
    throw ConfigError("grid needs non-empty K/T sets and at least one seed");
  }
  GridSummary summary;
  for (int k : k_set) {
    for (int t : t_set) {
      GridRow row;
      row.k = k;
      row.t = t;
      row.seeds_total = n_seeds;
      for (int s = 0; s < n_seeds; ++s) {
        RunConfig cfg = base;
        cfg.k = k;
        cfg.t_update = t;
        cfg.t_reset = t;
        cfg.seed = base.seed + static_cast<uint64_t>(s);
        RunResult res = run_single(cfg, "", /*resume=*/true);
        row.dirs.push_back(res.dir);
        if (res.ok) {
          row.finals.push_back(res.final_test_acc);
        } else {
          row.errors.push_back(res.error);
        }
      }
      row.seeds_ok = static_cast<int>(row.finals.size());
      if (row.seeds_ok >= 2) {
        std::tie(row.mean, row.stddev) = aggregate_seeds(row.finals);
      } else if (row.seeds_ok == 1) {
        row.mean = row.finals[0];
        row.stddev = 0.0;
      } else {
        row.mean = row.stddev = std::nan("");
      }
      summary.rows.push_back(std::move(row));
    }
  }

  fs::create_directories(base.out_dir);
  summary.csv_path = (fs::path(base.out_dir) / "grid_summary.csv").string();
  std::ofstream os(summary.csv_path, std::ios::trunc);
  os << "K,R,T_cycle,M,model,seeds_ok,final_test_acc_mean,final_test_acc_std\n";
  for (const auto& row : summary.rows) {
    os << row.k << "," << (base.reset ? 1 : 0) << "," << row.t << ","
       << base.reset_mode << "," << base.arch << "," << row.seeds_ok << ","
       << format_g6(row.mean) << "," << format_g6(row.stddev) << "\n";
  }
  return summary;
}

// ---- statistics --------------------------------------------------------

std::pair<double, double> aggregate_seeds(const std::vector<double>& finals) {
  if (finals.size() < 2) {
    throw UsageError("aggregation requires at least 2 values, got " +
                     std::to_string(finals.size()));
  }
  const double n = static_cast<double>(finals.size());
  double mean = 0.0;
  for (double v : finals) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : finals) var += (v - mean) * (v - mean);
  var /= n;  // population convention, required by combine_group_stats
  return {mean, std::sqrt(var)};
}

std::pair<double, double> combine_group_stats(double mean_a, double std_a,
                                              double mean_b, double std_b) {
  const double mean = (mean_a + mean_b) / 2.0;
  const double var = (std_a * std_a + std_b * std_b) / 2.0 +
                     ((mean_a - mean) * (mean_a - mean) +
                      (mean_b - mean) * (mean_b - mean)) /
                         2.0;
  return {mean, std::sqrt(var)};
}

}  // namespace dfl
