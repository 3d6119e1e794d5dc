#include <gtest/gtest.h>

#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <fstream>
#include <thread>

#include "st2n/run.hpp"

namespace st2n {
namespace {

#ifndef ST2N_CLI_PATH
#error "ST2N_CLI_PATH must point at the st2n executable"
#endif

const fs::path& work() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "st2n_test_cli";
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

struct Result {
  int code;
  std::string out;
};

Result cli(const std::string& args) {
  const fs::path log = work() / "last_output.txt";
  const std::string cmd = std::string(ST2N_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int raw = std::system(cmd.c_str());
  std::ifstream in(log);
  Result r{WIFEXITED(raw) ? WEXITSTATUS(raw) : -1,
           {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()}};
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string path(const std::string& name) { return (work() / name).string(); }

void write_text(const std::string& name, const std::string& text) {
  std::ofstream out(work() / name);
  out << text;
}

// Each test runs in its own process, so every test creates its own inputs.
void fresh(const std::string& name) { fs::remove_all(work() / name); }

void simulate(const std::string& name, const std::string& args) {
  fresh(name);
  const auto r = cli("simulate " + args + " --out " + path(name));
  ASSERT_EQ(r.code, 0) << r.out;
}

class Cli : public ::testing::Test {};

}  // namespace

TEST_F(Cli, SimulateCaseOneLayout) {
  fresh("c1");
  const auto r = cli("simulate --case 1 --n-per-group 50 --sigma2 1 --seed 3 --out " + path("c1"));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto meta = nlohmann::json::parse(slurp(work() / "c1" / "meta.json"));
  EXPECT_EQ(meta["n"], 150);
  EXPECT_EQ(meta["p"], 400);
  EXPECT_EQ(meta["q"], 3);
  EXPECT_EQ(meta["d"], 2);
  EXPECT_EQ(meta["group_sizes"], (std::vector<int>{50, 50, 50}));
  EXPECT_EQ(fs::file_size(work() / "c1" / "predictors.bin"), 8u * 150 * 400 * 3);
  EXPECT_TRUE(fs::exists(work() / "c1" / "truth.json"));
  EXPECT_NE(r.out.find("400"), std::string::npos);
}

TEST_F(Cli, SimulateToyLayoutAndDeterminism) {
  simulate("toyA", "--case toy --n-per-group 40 --sigma2 0.1 --seed 9");
  simulate("toyB", "--case toy --n-per-group 40 --sigma2 0.1 --seed 9");
  simulate("toyC", "--case toy --n-per-group 40 --sigma2 0.1 --seed 10");
  const Bundle b = read_bundle(work() / "toyA");
  EXPECT_EQ(b.data.p(), 25);
  EXPECT_EQ(b.data.q, 2);
  EXPECT_EQ(b.data.G, 1);
  for (const char* f : {"meta.json", "predictors.bin", "response.csv", "truth.json"}) {
    EXPECT_EQ(slurp(work() / "toyA" / f), slurp(work() / "toyB" / f)) << f;
  }
  EXPECT_NE(slurp(work() / "toyA" / "predictors.bin"), slurp(work() / "toyC" / "predictors.bin"));
}

TEST_F(Cli, UsageErrorsExitOne) {
  simulate("toyU", "--case toy --n-per-group 20 --sigma2 0.1 --seed 1");
  fresh("never");
  EXPECT_EQ(cli("").code, 1);
  EXPECT_EQ(cli("frobnicate").code, 1);
  EXPECT_EQ(cli("simulate --case 3 --out " + path("x")).code, 1);
  EXPECT_EQ(cli("simulate --case 1 --sigma2 -1 --out " + path("x")).code, 1);
  EXPECT_EQ(cli("fit --data " + path("toyU")).code, 1);
  write_text("bad.cfg", "n_iter = 10\nbogus = 2\n");
  EXPECT_EQ(cli("fit --data " + path("toyU") + " --config " + path("bad.cfg") + " --out " + path("never")).code, 1);
  // Config validation happens before anything is read or written.
  EXPECT_EQ(cli("fit --data " + path("nowhere") + " --n-iter 10 --n-burnin 10 --out " + path("never")).code, 1);
  EXPECT_FALSE(fs::exists(work() / "never"));
  EXPECT_EQ(cli("evaluate --run a --truth b --out c --threshold 2").code, 1);
}

TEST_F(Cli, DataErrorsExitTwo) {
  EXPECT_EQ(cli("fit --data " + path("nowhere") + " --n-iter 10 --n-burnin 5 --out " + path("r0")).code, 2);
  EXPECT_EQ(cli("summarize --run " + path("nowhere") + " --out " + path("s0")).code, 2);
  fresh("r_nt");
  fresh("notruth");
  write_bundle(work() / "notruth", gen_toy(20, 0.1, 4).data);
  ASSERT_EQ(cli("fit --data " + path("notruth") + " --n-iter 20 --n-burnin 10 --out " + path("r_nt")).code, 0);
  const auto r = cli("evaluate --run " + path("r_nt") + " --truth " + path("notruth") + " --out " + path("e_nt"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("truth"), std::string::npos) << r.out;
}

TEST_F(Cli, ChainFailureExitsThreeAndKeepsOtherChains) {
  simulate("toyF", "--case toy --n-per-group 30 --sigma2 0.1 --seed 2");
  fresh("rf");
  fs::create_directories(work() / "rf");
  write_text("rf/chain_2", "blocks the chain directory");
  const auto r = cli("fit --data " + path("toyF") + " --chains 2 --n-iter 30 --n-burnin 10 --out " + path("rf"));
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.out.find("chain 2"), std::string::npos) << r.out;
  EXPECT_EQ(read_chain(work() / "rf" / "chain_1" / "chain.bin", ChainLayout{1, 9, 2, 0}, true).records.size(), 20u);
}

TEST_F(Cli, DefaultConfigMatchesSimulationSettings) {
  simulate("toyD", "--case toy --n-per-group 20 --sigma2 0.1 --seed 5");
  fresh("rd");
  ASSERT_EQ(cli("fit --data " + path("toyD") + " --out " + path("rd")).code, 0);
  const auto run = nlohmann::json::parse(slurp(work() / "rd" / "run.json"));
  const RunConfig cfg = read_run_info(work() / "rd").config;
  EXPECT_EQ(cfg.sampler.n_iter, 10000);
  EXPECT_EQ(cfg.sampler.n_burnin, 5000);
  EXPECT_EQ(cfg.sampler.hyper.R, 5.0);
  EXPECT_EQ(cfg.sampler.hyper.nu, 4.0);
  EXPECT_EQ(cfg.chains, 1);
  EXPECT_EQ(fs::file_size(work() / "rd" / "chain_1" / "chain.bin"),
            5000u * (16 + 8 * static_cast<std::size_t>(ChainLayout{1, 9, 2, 0}.size())));
  EXPECT_FALSE(run.dump().find("threads") != std::string::npos);
}

TEST_F(Cli, TwoChainsDistinctAndThreadIndependent) {
  simulate("toyA", "--case toy --n-per-group 40 --sigma2 0.1 --seed 9");
  fresh("r1");
  fresh("r2");
  const std::string base = "fit --data " + path("toyA") + " --chains 2 --n-iter 80 --n-burnin 40 --seed 11 ";
  ASSERT_EQ(cli(base + "--threads 1 --out " + path("r1")).code, 0);
  ASSERT_EQ(cli(base + "--threads 2 --out " + path("r2")).code, 0);
  const std::string c1 = slurp(work() / "r1" / "chain_1" / "chain.bin");
  const std::string c2 = slurp(work() / "r1" / "chain_2" / "chain.bin");
  EXPECT_FALSE(c1.empty());
  EXPECT_EQ(c1.size(), c2.size());
  EXPECT_NE(c1, c2);
  EXPECT_EQ(c1, slurp(work() / "r2" / "chain_1" / "chain.bin"));
  EXPECT_EQ(c2, slurp(work() / "r2" / "chain_2" / "chain.bin"));
  EXPECT_EQ(slurp(work() / "r1" / "run.json"), slurp(work() / "r2" / "run.json"));
  const std::string trace = slurp(work() / "r1" / "chain_1" / "trace.csv");
  EXPECT_EQ(trace.substr(0, trace.find(',')), "iteration");
  EXPECT_EQ(std::count(trace.begin(), trace.end(), '\n'), 41);
}

TEST_F(Cli, InterruptedRunLeavesValidPrefix) {
  simulate("c2small", "--case 2 --n-per-group 20 --sigma2 1 --seed 6");
  fresh("rint");
  const std::string bin = ST2N_CLI_PATH;
  const std::string data = path("c2small"), out = path("rint");
  const pid_t pid = fork();
  ASSERT_GE(pid, 0);
  if (pid == 0) {
    const int devnull = ::open("/dev/null", O_WRONLY);
    ::dup2(devnull, 1);
    ::dup2(devnull, 2);
    ::execl(bin.c_str(), bin.c_str(), "fit", "--data", data.c_str(), "--n-iter", "100000", "--n-burnin", "1",
            "--out", out.c_str(), static_cast<char*>(nullptr));
    ::_exit(127);
  }
  const fs::path chain = work() / "rint" / "chain_1" / "chain.bin";
  const ChainLayout lay{3, 100, 3, 0};
  const auto frame = static_cast<std::uintmax_t>(16 + 8 * lay.size());
  for (int k = 0; k < 600; ++k) {
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
    std::error_code ec;
    if (fs::file_size(chain, ec) >= 5 * frame && !ec) break;
  }
  ::kill(pid, SIGKILL);
  int status = 0;
  ::waitpid(pid, &status, 0);
  ASSERT_TRUE(WIFSIGNALED(status));
  const auto res = read_chain(chain, lay);
  ASSERT_GE(res.records.size(), 5u);
  for (std::size_t k = 0; k < res.records.size(); ++k) {
    EXPECT_EQ(res.records[k].iteration, static_cast<std::int64_t>(k) + 1);
    EXPECT_GT(res.records[k].state.sigma2, 0.0);
  }
  EXPECT_EQ(res.last_valid_iteration, res.records.back().iteration);
  ASSERT_EQ(cli("summarize --run " + out + " --out " + path("sint")).code, 0);
}

TEST_F(Cli, SummarizeEvaluateAndSchemas) {
  simulate("toyS", "--case toy --n-per-group 40 --sigma2 0.1 --seed 9");
  fresh("rs");
  const std::string run = path("rs");
  ASSERT_EQ(cli("fit --data " + path("toyS") + " --n-iter 80 --n-burnin 40 --out " + run).code, 0);
  ASSERT_EQ(cli("summarize --run " + run + " --out " + path("s1")).code, 0);
  ASSERT_EQ(cli("summarize --run " + run + " --out " + path("s2")).code, 0);
  for (const char* f : {"summary.csv", "covariates.csv", "masks.csv", "beta_mean.csv"})
    EXPECT_EQ(slurp(work() / "s1" / f), slurp(work() / "s2" / f)) << f;
  const std::string summary = slurp(work() / "s1" / "summary.csv");
  EXPECT_EQ(std::count(summary.begin(), summary.end(), '\n'), 1 + 25);
  const std::string cov = slurp(work() / "s1" / "covariates.csv");
  EXPECT_EQ(cov.substr(0, cov.find('\n')), "parameter,estimate,lower,upper");

  const auto r = cli("evaluate --run " + run + " --truth " + path("toyS") + " --out " + path("e1"));
  ASSERT_EQ(r.code, 0) << r.out;
  const std::string mse = slurp(work() / "e1" / "mse.csv");
  EXPECT_EQ(mse.substr(0, mse.find('\n')), "method,group_size,sigma2,mse");
  EXPECT_EQ(mse.substr(mse.find('\n') + 1, 15), "ST2N-GP,40,0.1,");
  const std::string sel = slurp(work() / "e1" / "selection.csv");
  EXPECT_EQ(sel.substr(0, sel.find('\n')), "group,threshold,tpr,fpr");
}

TEST_F(Cli, BaselineOnCaseTwoMatchesReferenceScale) {
  simulate("c2", "--case 2 --n-per-group 100 --sigma2 1 --seed 7");
  const auto r = cli("baseline --data " + path("c2") + " --out " + path("b2"));
  ASSERT_EQ(r.code, 0) << r.out;
  const std::string mse = slurp(work() / "b2" / "mse.csv");
  ASSERT_EQ(mse.substr(0, mse.find('\n')), "method,group_size,sigma2,mse");
  const std::string row = mse.substr(mse.find('\n') + 1);
  ASSERT_EQ(row.substr(0, 12), "LASSO,100,1,");
  const double value = std::stod(row.substr(12));
  // Reference LASSO MSE for this setting is 2.69; the truth fields here are
  // reconstructions, so only the order of magnitude is expected to agree.
  EXPECT_GE(value, 2.69 / 3.0);
  EXPECT_LE(value, 2.69 * 3.0);
  EXPECT_TRUE(fs::exists(work() / "b2" / "lasso.csv"));
  EXPECT_TRUE(fs::exists(work() / "b2" / "lasso_beta.csv"));
}

}  // namespace st2n
