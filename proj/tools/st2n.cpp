// st2n command-line entry point: simulate, fit, summarize, evaluate, baseline.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "st2n/io.hpp"
#include "st2n/run.hpp"
#include "st2n/simulate.hpp"

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kRuntime = 3 };

int run_simulate(const std::string& which, int n_per_group, double sigma2, std::uint64_t seed, const std::string& out) {
  st2n::SimDataset sim;
  if (which == "1") sim = st2n::gen_case1(n_per_group, sigma2, seed);
  else if (which == "2") sim = st2n::gen_case2(n_per_group, sigma2, seed);
  else sim = st2n::gen_toy(n_per_group, sigma2, seed);
  st2n::write_bundle(out, sim);
  std::cout << st2n::describe_simulation(sim);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatially varying vector-valued image regression (ST2N-GP)"};
  app.require_subcommand(1);

  auto* sim = app.add_subcommand("simulate", "Write a simulated dataset bundle");
  std::string sim_case = "2";
  int n_per_group = 50;
  double sigma2 = 1.0;
  std::uint64_t sim_seed = 1;
  std::string sim_out;
  sim->add_option("--case", sim_case, "Simulation case: 1, 2 or toy")->check(CLI::IsMember({"1", "2", "toy"}));
  sim->add_option("--n-per-group", n_per_group, "Subjects per group (toy: total subjects)")->check(CLI::PositiveNumber);
  sim->add_option("--sigma2", sigma2, "Noise variance")->check(CLI::PositiveNumber);
  sim->add_option("--seed", sim_seed, "Random seed");
  sim->add_option("--out", sim_out, "Output bundle directory")->required();

  auto* fit = app.add_subcommand("fit", "Run MCMC chains on a bundle");
  std::string fit_data, fit_config, fit_out;
  std::optional<int> fit_chains, fit_threads, fit_iter, fit_burnin;
  std::optional<std::uint64_t> fit_seed;
  fit->add_option("--data", fit_data, "Dataset bundle directory")->required();
  fit->add_option("--config", fit_config, "key=value config file");
  fit->add_option("--chains", fit_chains, "Number of chains");
  fit->add_option("--threads", fit_threads, "Worker threads (results do not depend on it)");
  fit->add_option("--seed", fit_seed, "Seed of chain 1");
  fit->add_option("--n-iter", fit_iter, "Total iterations per chain");
  fit->add_option("--n-burnin", fit_burnin, "Burn-in iterations");
  fit->add_option("--out", fit_out, "Run output directory")->required();

  auto* summ = app.add_subcommand("summarize", "Posterior summary tables for a run");
  std::string summ_run, summ_out;
  summ->add_option("--run", summ_run, "Run directory")->required();
  summ->add_option("--out", summ_out, "Output directory")->required();

  auto* eval = app.add_subcommand("evaluate", "MSE and selection rates against simulation truth");
  std::string eval_run, eval_truth, eval_out;
  double eval_threshold = 0.5;
  eval->add_option("--run", eval_run, "Run directory")->required();
  eval->add_option("--truth", eval_truth, "Simulated bundle with truth.json")->required();
  eval->add_option("--out", eval_out, "Output directory")->required();
  eval->add_option("--threshold", eval_threshold, "Inclusion probability threshold")->check(CLI::Range(0.0, 1.0));

  auto* base = app.add_subcommand("baseline", "Per-group cross-validated LASSO baseline");
  std::string base_data, base_out;
  int base_folds = 5, base_lambdas = 100;
  std::uint64_t base_seed = 1;
  base->add_option("--data", base_data, "Dataset bundle directory")->required();
  base->add_option("--out", base_out, "Output directory")->required();
  base->add_option("--folds", base_folds, "Cross-validation folds")->check(CLI::Range(2, 1000));
  base->add_option("--lambdas", base_lambdas, "Path length")->check(CLI::Range(2, 100000));
  base->add_option("--seed", base_seed, "Fold assignment seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*sim) return run_simulate(sim_case, n_per_group, sigma2, sim_seed, sim_out);
    if (*fit) {
      st2n::RunConfig cfg = fit_config.empty() ? st2n::RunConfig{} : st2n::load_config(fit_config);
      if (fit_chains) cfg.chains = *fit_chains;
      if (fit_threads) cfg.threads = *fit_threads;
      if (fit_seed) cfg.sampler.seed = *fit_seed;
      if (fit_iter) cfg.sampler.n_iter = *fit_iter;
      if (fit_burnin) cfg.sampler.n_burnin = *fit_burnin;
      try {
        cfg.validate();
      } catch (const std::invalid_argument& e) {
        throw st2n::UsageError(e.what());
      }
      const st2n::Bundle bundle = st2n::read_bundle(fit_data);
      const auto status = st2n::fit_run(bundle.data, cfg, fit_out, &std::cerr);
      for (const auto& s : status)
        if (!s.ok) return kRuntime;
      return kOk;
    }
    if (*summ) {
      const auto s = st2n::summarize_run(summ_run, summ_out, &std::cerr);
      std::cout << "summarized " << s.n_records << " records\n";
      return kOk;
    }
    if (*eval) {
      const double mse = st2n::evaluate_run(eval_run, eval_truth, eval_out, eval_threshold, &std::cerr);
      std::cout << "mse " << st2n::fmt_double(mse) << "\n";
      return kOk;
    }
    if (*base) {
      const auto res = st2n::baseline_run(base_data, base_out, base_folds, base_lambdas, base_seed);
      if (res.mse) std::cout << "mse " << st2n::fmt_double(*res.mse) << "\n";
      return kOk;
    }
  } catch (const st2n::UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const st2n::FormatError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const st2n::ShapeError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const st2n::UncoveredVoxelError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
