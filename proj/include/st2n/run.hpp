#pragma once

// Run directories and the command implementations behind the CLI.
//
// A fit run directory holds run.json plus chain_<k>/chain.bin and
// chain_<k>/trace.csv for k = 1..chains.

#include <atomic>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <mutex>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "st2n/io.hpp"
#include "st2n/lasso.hpp"
#include "st2n/latent_field.hpp"
#include "st2n/posterior.hpp"
#include "st2n/sampler.hpp"
#include "st2n/simulate.hpp"

namespace st2n {

inline LowRankBasis build_basis(const SpatialGrid& grid, const RunConfig& cfg) {
  const std::vector<int> per_dim = cfg.knots_per_dim.empty() ? default_knots_per_dim(grid) : cfg.knots_per_dim;
  if (static_cast<int>(per_dim.size()) != grid.d())
    throw UsageError("config: knots_per_dim needs one entry per grid dimension");
  const double bw = cfg.bandwidth > 0.0 ? cfg.bandwidth : default_bandwidth(per_dim);
  return make_knots(grid, per_dim, bw);
}

/// Chain 1 uses the configured seed; later chains use derived seeds.
inline std::uint64_t chain_seed(std::uint64_t seed, int chain_index) {
  return chain_index == 0 ? seed : derive_seed(seed, static_cast<std::uint64_t>(chain_index));
}

inline fs::path chain_dir(const fs::path& run, int chain_index) {
  return run / ("chain_" + std::to_string(chain_index + 1));
}

struct ChainStatus {
  bool ok = false;
  int records = 0;
  std::string error;
};

struct RunInfo {
  std::vector<int> dims;
  int q = 0, G = 0, c = 0;
  std::vector<int> knots_per_dim;
  double bandwidth = 0.0;
  std::vector<std::string> covariate_names;
  int chains = 0;
  RunConfig config;

  ChainLayout layout(int L) const { return {G, L, q, c}; }
};

inline void write_run_info(const fs::path& run, const VectorImageDataset& data, const LowRankBasis& basis,
                           const RunConfig& cfg) {
  nlohmann::ordered_json j;
  j["schema_version"] = kSchemaVersion;
  j["dims"] = data.grid.dims;
  j["q"] = data.q;
  j["G"] = data.G;
  j["c"] = data.c();
  j["L"] = basis.L();
  j["knots_per_dim"] = basis.knots.per_dim;
  j["bandwidth"] = basis.knots.bandwidth;
  j["covariate_names"] = data.covariate_names;
  j["chains"] = cfg.chains;
  nlohmann::ordered_json seeds = nlohmann::ordered_json::array();
  for (int k = 0; k < cfg.chains; ++k) seeds.push_back(chain_seed(cfg.sampler.seed, k));
  j["chain_seeds"] = seeds;
  nlohmann::ordered_json conf;
  // Thread count does not affect results and is left out so that run
  // directories compare equal across thread counts.
  for (const auto& [k, v] : config_entries(cfg))
    if (k != "threads") conf[k] = v;
  j["config"] = conf;
  write_text_file(run / "run.json", j.dump(2) + "\n");
}

inline RunInfo read_run_info(const fs::path& run) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(run / "run.json"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("run.json: ") + e.what());
  }
  RunInfo info;
  try {
    if (j.at("schema_version").get<int>() != kSchemaVersion) throw FormatError("run.json: schema_version");
    info.dims = j.at("dims").get<std::vector<int>>();
    info.q = j.at("q").get<int>();
    info.G = j.at("G").get<int>();
    info.c = j.at("c").get<int>();
    info.knots_per_dim = j.at("knots_per_dim").get<std::vector<int>>();
    info.bandwidth = j.at("bandwidth").get<double>();
    info.covariate_names = j.at("covariate_names").get<std::vector<std::string>>();
    info.chains = j.at("chains").get<int>();
    for (const auto& [k, v] : j.at("config").items()) {
      const auto s = v.get<std::string>();
      if (!s.empty()) set_config_value(info.config, k, s);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("run.json: ") + e.what());
  } catch (const UsageError& e) {
    throw FormatError(std::string("run.json: ") + e.what());
  }
  return info;
}

/// Runs cfg.chains chains on up to cfg.threads workers. Each chain writes only
/// to its own directory; a failing chain does not stop the others.
inline std::vector<ChainStatus> fit_run(const VectorImageDataset& data, RunConfig cfg, const fs::path& out,
                                        std::ostream* log = nullptr) {
  cfg.validate();
  data.validate();
  cfg.sampler.hyper.S = cfg.scale_matrix(data.q);
  const LowRankBasis basis = build_basis(data.grid, cfg);
  fs::create_directories(out);
  write_run_info(out, data, basis, cfg);
  const ChainLayout layout{data.G, basis.L(), data.q, data.c()};

  std::vector<ChainStatus> status(static_cast<std::size_t>(cfg.chains));
  std::atomic<int> next{0};
  std::mutex log_mutex;
  auto worker = [&]() {
    for (int k = next++; k < cfg.chains; k = next++) {
      ChainStatus& st = status[static_cast<std::size_t>(k)];
      try {
        SamplerConfig sc = cfg.sampler;
        sc.seed = chain_seed(cfg.sampler.seed, k);
        const fs::path dir = chain_dir(out, k);
        fs::create_directories(dir);
        ChainWriter chain(dir / "chain.bin", layout);
        TraceWriter trace(dir / "trace.csv", data.G);
        const ModelState init = initial_state(data, basis, sc);
        run_chain(sc, data, basis, init, [&](const ChainRecord& rec) {
          chain.write(rec);
          trace.write(rec);
          ++st.records;
        });
        st.ok = true;
      } catch (const std::exception& e) {
        st.error = e.what();
      }
      if (log) {
        std::lock_guard lock(log_mutex);
        *log << "chain " << k + 1 << ": " << (st.ok ? "ok, " + std::to_string(st.records) + " records" : "failed: " + st.error)
             << "\n";
      }
    }
  };
  const int n_workers = std::min(cfg.threads, cfg.chains);
  {
    std::vector<std::jthread> pool;
    for (int w = 1; w < n_workers; ++w) pool.emplace_back(worker);
    worker();
  }
  return status;
}

struct LoadedRun {
  RunInfo info;
  LowRankBasis basis;
  std::vector<ChainRecord> records;  // all chains, in chain order
};

inline LoadedRun load_run(const fs::path& run, std::ostream* log = nullptr) {
  LoadedRun out;
  out.info = read_run_info(run);
  const SpatialGrid grid = SpatialGrid::regular(out.info.dims);
  out.basis = make_knots(grid, out.info.knots_per_dim, out.info.bandwidth);
  const ChainLayout layout = out.info.layout(out.basis.L());
  int found = 0;
  for (int k = 0; k < out.info.chains; ++k) {
    const fs::path file = chain_dir(run, k) / "chain.bin";
    if (!fs::exists(file)) {
      if (log) *log << "chain " << k + 1 << ": no chain file\n";
      continue;
    }
    ++found;
    auto res = read_chain(file, layout);
    if (res.torn && log)
      *log << "chain " << k + 1 << ": torn final frame ignored; last valid iteration "
           << res.last_valid_iteration << "\n";
    for (auto& r : res.records) out.records.push_back(std::move(r));
  }
  if (found == 0) throw FormatError("run " + run.string() + " has no chain files");
  if (out.records.empty()) throw FormatError("run " + run.string() + " has no saved records");
  return out;
}

inline PosteriorSummary summarize_loaded(const LoadedRun& run) {
  return summarize(run.records, run.basis, run.info.dims, run.info.covariate_names);
}

inline std::string grid_index_columns(const std::vector<int>& dims) {
  std::string h;
  for (std::size_t k = 0; k < dims.size(); ++k) h += ",i" + std::to_string(k + 1);
  return h;
}

inline std::string grid_index_values(const SpatialGrid& grid, int j) {
  std::string s;
  for (int k = 0; k < grid.d(); ++k) s += "," + std::to_string(grid.index(j, k));
  return s;
}

inline std::string opt_double(const std::optional<double>& v) { return v ? fmt_double(*v) : "NA"; }

/// summary.csv, covariates.csv, masks.csv and beta_mean.csv.
inline PosteriorSummary write_summary_tables(const PosteriorSummary& s, const fs::path& out,
                                             double prob_threshold = 0.5) {
  fs::create_directories(out);
  const SpatialGrid grid = SpatialGrid::regular(s.dims);
  const std::string idx_cols = grid_index_columns(s.dims);

  std::string sum = "group,voxel" + idx_cols + ",mean_norm,inclusion_prob,f_norm_mean,f_prob,psi_mean\n";
  for (int g = 0; g < s.G; ++g)
    for (int j = 0; j < s.p; ++j)
      sum += std::to_string(g + 1) + "," + std::to_string(j + 1) + grid_index_values(grid, j) + "," +
             fmt_double(s.mean_norm(g, j)) + "," + fmt_double(s.inclusion_prob(g, j)) + "," +
             fmt_double(s.f_norm_mean(j)) + "," + fmt_double(s.f_prob(j)) + "," +
             opt_double(s.psi_mean[static_cast<std::size_t>(j)]) + "\n";
  write_text_file(out / "summary.csv", sum);

  std::string cov = "parameter,estimate,lower,upper\n";
  auto row = [&](const ScalarInterval& iv) {
    cov += iv.name + "," + fmt_double(iv.mean) + "," + fmt_double(iv.lower) + "," + fmt_double(iv.upper) + "\n";
  };
  for (const auto& iv : s.covariates) row(iv);
  for (const auto& iv : s.intercepts) row(iv);
  row(s.sigma2);
  write_text_file(out / "covariates.csv", cov);

  const auto similar = similar_effect_mask(s, prob_threshold);
  std::string masks = "voxel" + idx_cols;
  for (int g = 1; g <= s.G; ++g) masks += ",selected_" + std::to_string(g);
  masks += ",similar_effect\n";
  for (int j = 0; j < s.p; ++j) {
    masks += std::to_string(j + 1) + grid_index_values(grid, j);
    for (int g = 0; g < s.G; ++g) masks += s.inclusion_prob(g, j) > prob_threshold ? ",1" : ",0";
    masks += similar[static_cast<std::size_t>(j)] ? ",1\n" : ",0\n";
  }
  write_text_file(out / "masks.csv", masks);

  std::string beta = "group,voxel,component,mean\n";
  for (int g = 0; g < s.G; ++g)
    for (int j = 0; j < s.p; ++j)
      for (int k = 0; k < s.q; ++k)
        beta += std::to_string(g + 1) + "," + std::to_string(j + 1) + "," + std::to_string(k + 1) + "," +
                fmt_double(s.mean_beta[static_cast<std::size_t>(g)](j, k)) + "\n";
  write_text_file(out / "beta_mean.csv", beta);
  return s;
}

inline PosteriorSummary summarize_run(const fs::path& run, const fs::path& out, std::ostream* log = nullptr) {
  const LoadedRun loaded = load_run(run, log);
  return write_summary_tables(summarize_loaded(loaded), out);
}

inline std::string mse_row(const std::string& method, const SimInfo& info, double mse) {
  return method + "," + std::to_string(info.n_per_group) + "," + fmt_double(info.sigma2) + "," + fmt_double(mse) + "\n";
}

inline const char* kMseHeader = "method,group_size,sigma2,mse\n";

inline const Bundle& require_truth(const Bundle& b) {
  if (!b.truth || !b.sim) throw FormatError("bundle has no truth.json; evaluation needs simulation truth");
  return b;
}

/// mse.csv and selection.csv for a fitted run against a simulated bundle.
inline double evaluate_run(const fs::path& run, const fs::path& bundle_dir, const fs::path& out,
                           double prob_threshold = 0.5, std::ostream* log = nullptr) {
  const Bundle bundle = read_bundle(bundle_dir);
  require_truth(bundle);
  const LoadedRun loaded = load_run(run, log);
  if (loaded.info.dims != bundle.data.grid.dims || loaded.info.q != bundle.data.q || loaded.info.G != bundle.data.G)
    throw ShapeError("run and truth bundle have different shapes");
  const PosteriorSummary s = summarize_loaded(loaded);
  const double mse = mse_coefficients(s, *bundle.truth);
  fs::create_directories(out);
  write_text_file(out / "mse.csv", std::string(kMseHeader) + mse_row("ST2N-GP", *bundle.sim, mse));
  const auto rates = selection_metrics(s, *bundle.truth, prob_threshold);
  std::string sel = "group,threshold,tpr,fpr\n";
  for (std::size_t g = 0; g < rates.size(); ++g)
    sel += std::to_string(g + 1) + "," + fmt_double(prob_threshold) + "," + fmt_double(rates[g].tpr) + "," +
           fmt_double(rates[g].fpr) + "\n";
  write_text_file(out / "selection.csv", sel);
  return mse;
}

struct BaselineResult {
  std::vector<FieldMatrix> beta;  // G of p x q, on the image-coefficient scale
  std::vector<LassoPath> paths;
  std::vector<double> kkt;  // KKT violation of each group's selected fit
  std::optional<double> mse;
};

/// Per-group LASSO on [D_g, X_g]. Image weights w map to beta = sqrt(p) w
/// because the model scales the image term by p^{-1/2}.
inline BaselineResult lasso_baseline(const VectorImageDataset& data, int k_folds = 5, int n_lambdas = 100,
                                     std::uint64_t seed = 1) {
  data.validate();
  const int p = data.p(), q = data.q;
  const Eigen::Index pq = static_cast<Eigen::Index>(p) * q;
  BaselineResult out;
  for (int g = 0; g < data.G; ++g) {
    std::vector<int> rows;
    for (int i = 0; i < data.n(); ++i)
      if (data.group_of[static_cast<std::size_t>(i)] == g) rows.push_back(i);
    Eigen::MatrixXd Xg(static_cast<Eigen::Index>(rows.size()), pq + data.c());
    Eigen::VectorXd yg(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto ri = static_cast<Eigen::Index>(r);
      Xg.row(ri).head(pq) = data.D.row(rows[r]);
      if (data.c() > 0) Xg.row(ri).tail(data.c()) = data.X.row(rows[r]);
      yg(ri) = data.y(rows[r]);
    }
    const int folds = std::min<int>(k_folds, static_cast<int>(rows.size()));
    out.paths.push_back(lasso_cv_path(Xg, yg, folds, n_lambdas, derive_seed(seed, static_cast<std::uint64_t>(g))));
    out.kkt.push_back(lasso_kkt_violation(Xg, yg, out.paths.back().fit));
    const Eigen::VectorXd w = out.paths.back().fit.coef.head(pq) * std::sqrt(static_cast<double>(p));
    out.beta.push_back(Eigen::Map<const FieldMatrix>(w.data(), p, q));
  }
  return out;
}

inline BaselineResult baseline_run(const fs::path& bundle_dir, const fs::path& out, int k_folds = 5,
                                   int n_lambdas = 100, std::uint64_t seed = 1) {
  const Bundle bundle = read_bundle(bundle_dir);
  BaselineResult res = lasso_baseline(bundle.data, k_folds, n_lambdas, seed);
  fs::create_directories(out);
  std::string fits = "group,lambda,cv_mse,nonzero,kkt_violation\n";
  for (std::size_t g = 0; g < res.paths.size(); ++g) {
    const auto& path = res.paths[g];
    fits += std::to_string(g + 1) + "," + fmt_double(path.best_lambda) + "," + fmt_double(path.cv_mse[path.best]) +
            "," + std::to_string((path.fit.coef.array() != 0.0).count()) + "," + fmt_double(res.kkt[g]) + "\n";
  }
  write_text_file(out / "lasso.csv", fits);
  std::string beta = "group,voxel,component,estimate\n";
  for (std::size_t g = 0; g < res.beta.size(); ++g)
    for (Eigen::Index j = 0; j < res.beta[g].rows(); ++j)
      for (Eigen::Index k = 0; k < res.beta[g].cols(); ++k)
        beta += std::to_string(g + 1) + "," + std::to_string(j + 1) + "," + std::to_string(k + 1) + "," +
                fmt_double(res.beta[g](j, k)) + "\n";
  write_text_file(out / "lasso_beta.csv", beta);
  if (bundle.truth && bundle.sim) {
    res.mse = mse_coefficients(res.beta, bundle.truth->beta0);
    write_text_file(out / "mse.csv", std::string(kMseHeader) + mse_row("LASSO", *bundle.sim, *res.mse));
  }
  return res;
}

/// One-paragraph description of a simulated bundle.
inline std::string describe_simulation(const SimDataset& sim) {
  const auto& d = sim.data;
  std::string dims;
  for (std::size_t k = 0; k < d.grid.dims.size(); ++k) dims += (k ? "x" : "") + std::to_string(d.grid.dims[k]);
  std::string s = sim.case_name + ": n=" + std::to_string(d.n()) + " G=" + std::to_string(d.G) +
                  " p=" + std::to_string(d.p()) + " (" + dims + ") q=" + std::to_string(d.q) + "\n";
  int all = 0, none = 0;
  std::vector<int> active(static_cast<std::size_t>(d.G), 0);
  for (int j = 0; j < d.p(); ++j) {
    int k = 0;
    for (int g = 0; g < d.G; ++g) {
      const bool a = sim.truth.beta0[static_cast<std::size_t>(g)].row(j).norm() > 0.0;
      k += a;
      active[static_cast<std::size_t>(g)] += a;
    }
    all += k == d.G;
    none += k == 0;
  }
  s += "active voxels per group:";
  for (int a : active) s += " " + std::to_string(a);
  s += "\nactive in every group: " + std::to_string(all) + ", inactive in every group: " + std::to_string(none) + "\n";
  return s;
}

}  // namespace st2n
