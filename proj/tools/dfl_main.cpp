// Command-line front end: single runs, the ablation grid, seed aggregation
// and the two-group statistics combiner.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dfl/error.hpp"
#include "dfl/experiment.hpp"

namespace {

std::pair<double, double> parse_mean_std(const std::string& text) {
  const auto comma = text.find(',');
  if (comma == std::string::npos) {
    throw dfl::ConfigError("expected MEAN,STD, got '" + text + "'");
  }
  return {std::stod(text.substr(0, comma)), std::stod(text.substr(comma + 1))};
}

std::vector<int> parse_int_csv(const std::string& text) {
  std::vector<int> out;
  size_t pos = 0;
  while (pos < text.size()) {
    const auto comma = text.find(',', pos);
    const auto end = comma == std::string::npos ? text.size() : comma;
    out.push_back(std::stoi(text.substr(pos, end - pos)));
    pos = end + 1;
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diverse feature learning: self-distillation with teacher "
               "selection plus periodic student reset"};
  app.require_subcommand(1);

  // run
  auto* run = app.add_subcommand("run", "Execute a single training run");
  std::string run_config;
  std::string run_out;
  int64_t run_seed = -1;
  run->add_option("--config", run_config, "Config file (key=value lines)")
      ->required();
  run->add_option("--seed", run_seed, "Override the config seed");
  run->add_option("--out", run_out, "Output directory override");

  // grid
  auto* grid = app.add_subcommand("grid", "Run the K x T ablation grid");
  std::string grid_config, grid_k = "1,2,4,8", grid_t = "1,20,50,100";
  int grid_seeds = 5;
  grid->add_option("--config", grid_config, "Base config file")->required();
  grid->add_option("--k", grid_k, "Comma-separated teacher counts");
  grid->add_option("--t", grid_t, "Comma-separated cycle lengths (epochs)");
  grid->add_option("--seeds", grid_seeds, "Seeds per cell (base seed, +1, ...)");

  // aggregate
  auto* agg = app.add_subcommand(
      "aggregate", "Mean/std of final test accuracy over run directories");
  std::vector<std::string> agg_dirs;
  agg->add_option("dirs", agg_dirs, "Run directories")->required();

  // combine
  auto* comb = app.add_subcommand(
      "combine", "Pool two equal-size groups' (mean, population std)");
  std::string comb_a, comb_b;
  comb->add_option("--a", comb_a, "MEAN,STD of group A")->required();
  comb->add_option("--b", comb_b, "MEAN,STD of group B")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      dfl::RunConfig cfg = dfl::parse_config_file(run_config);
      if (run_seed >= 0) cfg.seed = static_cast<uint64_t>(run_seed);
      dfl::RunResult res = dfl::run_single(cfg, run_out);
      if (!res.ok) {
        std::cerr << "run failed: " << res.error << "\n";
        std::cerr << "partial output in " << res.dir << "\n";
        return 1;
      }
      std::cout << "run dir: " << res.dir << "\n";
      std::cout << "final test accuracy: " << dfl::format_g6(res.final_test_acc)
                << "\n";
      return 0;
    }
    if (grid->parsed()) {
      dfl::RunConfig cfg = dfl::parse_config_file(grid_config);
      dfl::GridSummary summary = dfl::grid_search(
          cfg, parse_int_csv(grid_k), parse_int_csv(grid_t), grid_seeds);
      int failures = 0;
      for (const auto& row : summary.rows) {
        failures += row.seeds_total - row.seeds_ok;
        std::cout << "K=" << row.k << " T=" << row.t << " seeds_ok="
                  << row.seeds_ok << "/" << row.seeds_total
                  << " mean=" << dfl::format_g6(row.mean)
                  << " std=" << dfl::format_g6(row.stddev) << "\n";
      }
      std::cout << "summary: " << summary.csv_path << "\n";
      return failures == 0 ? 0 : 1;
    }
    if (agg->parsed()) {
      std::vector<double> finals;
      for (const auto& dir : agg_dirs) {
        const auto metrics = dfl::read_metrics_csv(dir + "/metrics.csv");
        if (metrics.empty()) {
          throw dfl::DataError("no metrics rows in " + dir);
        }
        finals.push_back(metrics.back().test_acc);
      }
      const auto [mean, sd] = dfl::aggregate_seeds(finals);
      std::cout << "n=" << finals.size() << " mean=" << dfl::format_g6(mean)
                << " std=" << dfl::format_g6(sd) << "\n";
      return 0;
    }
    if (comb->parsed()) {
      const auto [ma, sa] = parse_mean_std(comb_a);
      const auto [mb, sb] = parse_mean_std(comb_b);
      const auto [mean, sd] = dfl::combine_group_stats(ma, sa, mb, sb);
      std::cout << "mean=" << dfl::format_g6(mean)
                << " std=" << dfl::format_g6(sd) << "\n";
      return 0;
    }
  } catch (const dfl::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
