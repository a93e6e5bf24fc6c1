// Command-line front end: run, sweep, bench-sampler, scaling.

#include "fgts/harness.hpp"

#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

namespace {

// "1,2,5" or "1-10" or a mix such as "1-3,7".
std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = text.find(',', start);
    const std::string item = text.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    if (item.empty()) throw fgts::ConfigError("--seeds: empty entry");
    const auto dash = item.find('-');
    try {
      if (dash == std::string::npos) {
        out.push_back(std::stoull(item));
      } else {
        const auto lo = std::stoull(item.substr(0, dash)), hi = std::stoull(item.substr(dash + 1));
        if (hi < lo) throw fgts::ConfigError("--seeds: descending range " + item);
        for (auto s = lo; s <= hi; ++s) out.push_back(s);
      }
    } catch (const std::logic_error&) {
      throw fgts::ConfigError("--seeds: cannot parse '" + item + "'");
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

fgts::json load_json(const std::string& path) {
  try {
    return fgts::json::parse(fgts::read_file(path));
  } catch (const fgts::json::parse_error& e) {
    throw fgts::ConfigError(path + " is not valid JSON: " + e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Feel-good Thompson sampling experiments"};
  app.require_subcommand(1);

  std::string file;
  std::string seeds;
  unsigned parallel = 0;
  std::string out;

  auto add_common = [&](CLI::App* sub, const char* what) {
    sub->add_option("config", file, what)->required()->check(CLI::ExistingFile);
    sub->add_option("--out", out, "Output directory (overrides the file)");
    sub->add_option("--parallel", parallel, "Worker threads (overrides the file)");
  };

  auto* run = app.add_subcommand("run", "Run an experiment config");
  add_common(run, "Experiment JSON");
  run->add_option("--seeds", seeds, "Seed list, e.g. 1-10 or 1,4,9");

  auto* sweep = app.add_subcommand("sweep", "Grid search over experiment fields");
  add_common(sweep, "Sweep JSON");
  sweep->add_option("--seeds", seeds, "Seed list applied to every cell");

  auto* bench = app.add_subcommand("bench-sampler", "Sampler convergence-rate benchmark");
  add_common(bench, "Bench JSON");

  auto* scaling = app.add_subcommand("scaling", "Regret growth on synthetic linear MDPs");
  add_common(scaling, "Scaling JSON");
  scaling->add_option("--seeds", seeds, "Seed list");

  CLI11_PARSE(app, argc, argv);

  try {
    const fgts::fs::path base_dir = fgts::fs::path(file).parent_path();
    const fgts::json j = load_json(file);
    if (run->parsed()) {
      auto cfg = fgts::parse_experiment(j);
      if (!seeds.empty()) cfg.seeds = parse_seed_list(seeds);
      if (parallel) cfg.parallel = parallel;
      if (!out.empty()) cfg.output = out;
      const auto s = fgts::cmd_run(cfg, base_dir);
      std::cout << "final_eval_mean " << fgts::fmt_double(s.final_eval_mean) << " ci [" << fgts::fmt_double(s.final_eval_ci.lo)
                << ", " << fgts::fmt_double(s.final_eval_ci.hi) << "]\n";
      if (!std::isnan(s.regret_exponent)) std::cout << "regret_exponent " << fgts::fmt_double(s.regret_exponent) << "\n";
      std::cout << "outputs in " << s.output.string() << "\n";
    } else if (sweep->parsed()) {
      const auto spec = fgts::parse_sweep(j);
      std::optional<std::vector<std::uint64_t>> sl;
      if (!seeds.empty()) sl = parse_seed_list(seeds);
      const auto rep = fgts::cmd_sweep(spec, out.empty() ? "out/sweep" : out, parallel ? parallel : 1, sl, base_dir);
      const auto& best = rep.ranked.front();
      std::cout << "best cell " << best.index << " score " << fgts::fmt_double(best.score) << " "
                << best.assignment.dump() << "\n";
    } else if (bench->parsed()) {
      auto spec = fgts::parse_bench(j);
      if (parallel) spec.parallel = parallel;
      const auto results = fgts::cmd_bench_sampler(spec, out.empty() ? "out/bench" : out);
      for (const auto& r : results)
        std::cout << fgts::to_string(r.sampler.kind) << " slope " << fgts::fmt_double(r.slope) << " (expected "
                  << fgts::fmt_double(r.sampler.expected_slope) << ")\n";
    } else if (scaling->parsed()) {
      auto spec = fgts::parse_scaling(j);
      if (!seeds.empty()) spec.base.seeds = parse_seed_list(seeds);
      if (parallel) spec.base.parallel = parallel;
      if (!out.empty()) spec.base.output = out;
      for (const auto& r : fgts::cmd_scaling(spec))
        std::cout << "d=" << r.dim << " exponent " << fgts::fmt_double(r.exponent) << "\n";
    }
  } catch (const fgts::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
