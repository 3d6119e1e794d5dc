#pragma once

// On-disk formats.
//
// Dataset bundle (directory):
//   meta.json       schema_version, n, G, p, q, d, dims, group_sizes,
//                   covariate_names, endianness ("little")
//   predictors.bin  n*p*q little-endian float64, subject-major, then voxel,
//                   then component
//   response.csv    subject_id,group,y,<covariates...>  (ids and groups 1-based)
//   truth.json      optional simulation truth
//
// Chain file: a sequence of frames
//   u64 payload_bytes | u64 iteration | float64[k] state
// all little-endian, payload_bytes = 8 + 8k. State order (ChainLayout):
//   log_posterior, sigma2, lambda, lambda_1..G, a, a_1..G, b0_1..G,
//   b_cov_1..c, Sigma (q*q row-major), shared knot field (L*q row-major),
//   group knot fields g=1..G (L*q row-major each), acceptance flags
//   (hmc shared, hmc 1..G, a shared, a 1..G, lambda shared, lambda 1..G).

#include <Eigen/Dense>

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "st2n/errors.hpp"
#include "st2n/model.hpp"
#include "st2n/sampler.hpp"
#include "st2n/simulate.hpp"

namespace st2n {

namespace fs = std::filesystem;

// Bad command-line flags or config contents.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------- text

/// Shortest round-trip decimal form.
inline std::string fmt_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, const std::string& what) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw FormatError("cannot parse number '" + std::string(s) + "' in " + what);
  return v;
}

inline long long parse_int(std::string_view s, const std::string& what) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  long long v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw FormatError("cannot parse integer '" + std::string(s) + "' in " + what);
  return v;
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------- binary

inline void put_u64(std::string& buf, std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) v = __builtin_bswap64(v);
  char b[8];
  std::memcpy(b, &v, 8);
  buf.append(b, 8);
}

inline void put_f64(std::string& buf, double v) { put_u64(buf, std::bit_cast<std::uint64_t>(v)); }

inline std::uint64_t get_u64(const char* p) {
  std::uint64_t v = 0;
  std::memcpy(&v, p, 8);
  if constexpr (std::endian::native == std::endian::big) v = __builtin_bswap64(v);
  return v;
}

inline double get_f64(const char* p) { return std::bit_cast<double>(get_u64(p)); }

// ---------------------------------------------------------------- bundle

struct SimInfo {
  std::string case_name;
  int n_per_group = 0;
  double sigma2 = 0.0;
  std::uint64_t seed = 0;
};

struct Bundle {
  VectorImageDataset data;
  std::optional<SimTruth> truth;
  std::optional<SimInfo> sim;
};

inline constexpr int kSchemaVersion = 1;

inline nlohmann::ordered_json truth_to_json(const SimTruth& t, const SimInfo& info) {
  nlohmann::ordered_json j;
  j["schema_version"] = kSchemaVersion;
  j["case"] = info.case_name;
  j["n_per_group"] = info.n_per_group;
  j["sigma2"] = info.sigma2;
  j["seed"] = info.seed;
  j["G"] = t.G();
  j["p"] = t.eta.rows();
  j["q"] = t.eta.cols();
  auto flat = [](const auto& m) {
    std::vector<double> v(static_cast<std::size_t>(m.size()));
    Eigen::Index k = 0;
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) v[static_cast<std::size_t>(k++)] = m(r, c);
    return v;
  };
  j["beta0"] = nlohmann::ordered_json::array();
  for (const auto& b : t.beta0) j["beta0"].push_back(flat(b));
  j["eta"] = flat(t.eta);
  j["r"] = nlohmann::ordered_json::array();
  for (Eigen::Index g = 0; g < t.r.rows(); ++g) j["r"].push_back(flat(Eigen::MatrixXd(t.r.row(g))));
  j["b0_true"] = flat(Eigen::MatrixXd(t.b0_true.transpose()));
  j["sigma2_true"] = t.sigma2_true;
  return j;
}

inline std::pair<SimTruth, SimInfo> truth_from_json(const nlohmann::json& j) {
  try {
    if (j.at("schema_version").get<int>() != kSchemaVersion) throw FormatError("truth.json: schema_version");
    SimInfo info;
    info.case_name = j.at("case").get<std::string>();
    info.n_per_group = j.at("n_per_group").get<int>();
    info.sigma2 = j.at("sigma2").get<double>();
    info.seed = j.at("seed").get<std::uint64_t>();
    const int G = j.at("G").get<int>(), p = j.at("p").get<int>(), q = j.at("q").get<int>();
    auto field = [&](const std::vector<double>& v) {
      if (static_cast<int>(v.size()) != p * q) throw FormatError("truth.json: field length");
      return FieldMatrix(Eigen::Map<const FieldMatrix>(v.data(), p, q));
    };
    SimTruth t;
    const auto& b0 = j.at("beta0");
    if (static_cast<int>(b0.size()) != G) throw FormatError("truth.json: beta0 group count");
    for (const auto& b : b0) t.beta0.push_back(field(b.get<std::vector<double>>()));
    t.eta = field(j.at("eta").get<std::vector<double>>());
    t.r.resize(G, p);
    const auto& r = j.at("r");
    if (static_cast<int>(r.size()) != G) throw FormatError("truth.json: r group count");
    for (int g = 0; g < G; ++g) {
      const auto v = r[static_cast<std::size_t>(g)].get<std::vector<double>>();
      if (static_cast<int>(v.size()) != p) throw FormatError("truth.json: r length");
      for (int k = 0; k < p; ++k) t.r(g, k) = v[static_cast<std::size_t>(k)];
    }
    const auto b0t = j.at("b0_true").get<std::vector<double>>();
    if (static_cast<int>(b0t.size()) != G) throw FormatError("truth.json: b0_true length");
    t.b0_true = Eigen::Map<const Eigen::VectorXd>(b0t.data(), G);
    t.sigma2_true = j.at("sigma2_true").get<double>();
    return {t, info};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("truth.json: ") + e.what());
  }
}

inline void write_bundle(const fs::path& dir, const VectorImageDataset& data, const SimTruth* truth = nullptr,
                         const SimInfo* info = nullptr) {
  data.validate();
  fs::create_directories(dir);
  const int n = data.n(), p = data.p(), q = data.q;

  nlohmann::ordered_json meta;
  meta["schema_version"] = kSchemaVersion;
  meta["n"] = n;
  meta["G"] = data.G;
  meta["p"] = p;
  meta["q"] = q;
  meta["d"] = data.grid.d();
  meta["dims"] = data.grid.dims;
  meta["group_sizes"] = data.group_sizes();
  meta["covariate_names"] = data.covariate_names;
  meta["endianness"] = "little";
  write_text_file(dir / "meta.json", meta.dump(2) + "\n");

  std::string bin;
  bin.reserve(static_cast<std::size_t>(n) * p * q * 8);
  for (int i = 0; i < n; ++i)
    for (Eigen::Index k = 0; k < data.D.cols(); ++k) put_f64(bin, data.D(i, k));
  write_text_file(dir / "predictors.bin", bin);

  std::string csv = "subject_id,group,y";
  for (const auto& c : data.covariate_names) csv += "," + c;
  csv += "\n";
  for (int i = 0; i < n; ++i) {
    csv += std::to_string(i + 1) + "," + std::to_string(data.group_of[static_cast<std::size_t>(i)] + 1) + "," +
           fmt_double(data.y(i));
    for (int c = 0; c < data.c(); ++c) csv += "," + fmt_double(data.X(i, c));
    csv += "\n";
  }
  write_text_file(dir / "response.csv", csv);

  if (truth) {
    require(info != nullptr, "write_bundle: truth needs simulation info");
    write_text_file(dir / "truth.json", truth_to_json(*truth, *info).dump(2) + "\n");
  }
}

inline void write_bundle(const fs::path& dir, const SimDataset& sim) {
  const SimInfo info{sim.case_name, sim.n_per_group, sim.truth.sigma2_true, sim.seed};
  write_bundle(dir, sim.data, &sim.truth, &info);
}

inline Bundle read_bundle(const fs::path& dir) {
  Bundle out;
  auto& data = out.data;
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(read_text_file(dir / "meta.json"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("meta.json: ") + e.what());
  }
  int n = 0, p = 0, q = 0;
  std::vector<int> group_sizes;
  try {
    if (meta.at("schema_version").get<int>() != kSchemaVersion)
      throw FormatError("meta.json: unsupported schema_version");
    if (meta.at("endianness").get<std::string>() != "little") throw FormatError("meta.json: endianness must be little");
    n = meta.at("n").get<int>();
    data.G = meta.at("G").get<int>();
    p = meta.at("p").get<int>();
    q = meta.at("q").get<int>();
    const auto dims = meta.at("dims").get<std::vector<int>>();
    if (meta.at("d").get<int>() != static_cast<int>(dims.size())) throw FormatError("meta.json: d vs dims");
    data.grid = SpatialGrid::regular(dims);
    if (data.grid.p() != p) throw FormatError("meta.json: p does not match dims");
    group_sizes = meta.at("group_sizes").get<std::vector<int>>();
    data.covariate_names = meta.at("covariate_names").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("meta.json: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("meta.json: ") + e.what());
  }
  if (n < 1 || data.G < 1 || q < 1) throw FormatError("meta.json: n, G and q must be positive");
  if (static_cast<int>(group_sizes.size()) != data.G) throw FormatError("meta.json: group_sizes length");
  data.q = q;

  const std::string bin = read_text_file(dir / "predictors.bin");
  const std::size_t expected = static_cast<std::size_t>(n) * p * q * 8;
  if (bin.size() != expected)
    throw FormatError("predictors.bin: expected " + std::to_string(expected) + " bytes, found " +
                      std::to_string(bin.size()));
  data.D.resize(n, static_cast<Eigen::Index>(p) * q);
  for (int i = 0; i < n; ++i)
    for (Eigen::Index k = 0; k < data.D.cols(); ++k)
      data.D(i, k) = get_f64(bin.data() + 8 * (static_cast<std::size_t>(i) * p * q + static_cast<std::size_t>(k)));

  const std::string csv = read_text_file(dir / "response.csv");
  std::istringstream lines(csv);
  std::string line;
  if (!std::getline(lines, line)) throw FormatError("response.csv: empty");
  const auto header = split(trim(line), ',');
  const int c = static_cast<int>(data.covariate_names.size());
  if (static_cast<int>(header.size()) != 3 + c || header[0] != "subject_id" || header[1] != "group" ||
      header[2] != "y")
    throw FormatError("response.csv: header must be subject_id,group,y followed by the covariate names");
  for (int k = 0; k < c; ++k)
    if (header[static_cast<std::size_t>(3 + k)] != data.covariate_names[static_cast<std::size_t>(k)])
      throw FormatError("response.csv: covariate column names differ from meta.json");
  data.y.resize(n);
  data.X.resize(n, c);
  data.group_of.assign(static_cast<std::size_t>(n), 0);
  int row = 0;
  while (std::getline(lines, line)) {
    if (trim(line).empty()) continue;
    if (row >= n) throw FormatError("response.csv: more rows than n");
    const auto cells = split(trim(line), ',');
    if (static_cast<int>(cells.size()) != 3 + c) throw FormatError("response.csv: wrong column count");
    if (parse_int(cells[0], "response.csv subject_id") != row + 1)
      throw FormatError("response.csv: subject_id must run 1..n in order");
    const long long g = parse_int(cells[1], "response.csv group");
    if (g < 1 || g > data.G) throw FormatError("response.csv: group label out of range");
    data.group_of[static_cast<std::size_t>(row)] = static_cast<int>(g - 1);
    data.y(row) = parse_double(cells[2], "response.csv y");
    for (int k = 0; k < c; ++k)
      data.X(row, k) = parse_double(cells[static_cast<std::size_t>(3 + k)], "response.csv covariate");
    ++row;
  }
  if (row != n) throw FormatError("response.csv: expected " + std::to_string(n) + " rows");
  if (data.group_sizes() != group_sizes) throw FormatError("group labels in response.csv do not match meta.json");
  try {
    data.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("bundle: ") + e.what());
  }

  if (fs::exists(dir / "truth.json")) {
    nlohmann::json tj;
    try {
      tj = nlohmann::json::parse(read_text_file(dir / "truth.json"));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("truth.json: ") + e.what());
    }
    auto [truth, info] = truth_from_json(tj);
    if (truth.G() != data.G || truth.eta.rows() != p || truth.eta.cols() != q)
      throw FormatError("truth.json: shape differs from the bundle");
    out.truth = std::move(truth);
    out.sim = std::move(info);
  }
  return out;
}

// ---------------------------------------------------------------- config

/// All sampler settings plus basis and run options.
struct RunConfig {
  SamplerConfig sampler;
  std::vector<int> knots_per_dim;  // empty: default
  double bandwidth = 0.0;          // 0: default
  std::vector<double> S_values;    // empty: I; one value s: s*I; q*q values row-major
  int chains = 1;
  int threads = 1;

  void validate() const {
    sampler.validate();
    require(chains >= 1, "config: chains must be >= 1");
    require(threads >= 1, "config: threads must be >= 1");
    require(bandwidth >= 0.0, "config: bandwidth must be nonnegative");
    for (int k : knots_per_dim) require(k >= 2, "config: knots_per_dim entries must be >= 2");
  }

  Eigen::MatrixXd scale_matrix(int q) const {
    if (S_values.empty()) return Eigen::MatrixXd::Identity(q, q);
    if (S_values.size() == 1) return S_values[0] * Eigen::MatrixXd::Identity(q, q);
    if (static_cast<int>(S_values.size()) != q * q)
      throw UsageError("config: S needs 1 or q*q = " + std::to_string(q * q) + " values");
    Eigen::MatrixXd S(q, q);
    for (int r = 0; r < q; ++r)
      for (int c = 0; c < q; ++c) S(r, c) = S_values[static_cast<std::size_t>(r * q + c)];
    return S;
  }
};

/// Documented config keys, in file order.
inline const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "n_iter", "n_burnin", "thin", "leapfrog_steps", "hmc_step_init", "target_accept",
      "initial_step_search", "mh_scale_a", "mh_scale_lambda", "mh_target_accept", "adapt_interval",
      "step_jitter", "max_energy_error", "seed", "likelihood", "c1", "c2", "d1", "d2", "sigma_b2", "nu",
      "S", "R", "knots_per_dim", "bandwidth", "chains", "threads"};
  return keys;
}

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  throw UsageError("config: " + key + " must be a boolean");
}

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  auto num = [&]() {
    try {
      return parse_double(value, "config key " + key);
    } catch (const FormatError& e) {
      throw UsageError(e.what());
    }
  };
  auto integer = [&]() {
    try {
      return parse_int(value, "config key " + key);
    } catch (const FormatError& e) {
      throw UsageError(e.what());
    }
  };
  auto list = [&]() {
    std::vector<double> out;
    for (const auto& part : split(value, ',')) {
      try {
        out.push_back(parse_double(part, "config key " + key));
      } catch (const FormatError& e) {
        throw UsageError(e.what());
      }
    }
    return out;
  };
  SamplerConfig& s = cfg.sampler;
  Hyper& h = s.hyper;
  if (key == "n_iter") s.n_iter = static_cast<int>(integer());
  else if (key == "n_burnin") s.n_burnin = static_cast<int>(integer());
  else if (key == "thin") s.thin = static_cast<int>(integer());
  else if (key == "leapfrog_steps") s.leapfrog_steps = static_cast<int>(integer());
  else if (key == "hmc_step_init") s.hmc_step_init = num();
  else if (key == "target_accept") s.target_accept = num();
  else if (key == "initial_step_search") s.initial_step_search = parse_bool(value, key);
  else if (key == "mh_scale_a") s.mh_scale_a = num();
  else if (key == "mh_scale_lambda") s.mh_scale_lambda = num();
  else if (key == "mh_target_accept") s.mh_target_accept = num();
  else if (key == "adapt_interval") s.adapt_interval = static_cast<int>(integer());
  else if (key == "step_jitter") s.step_jitter = num();
  else if (key == "max_energy_error") s.max_energy_error = num();
  else if (key == "seed") {
    const long long v = integer();
    if (v < 0) throw UsageError("config: seed must be nonnegative");
    s.seed = static_cast<std::uint64_t>(v);
  } else if (key == "likelihood") s.likelihood_enabled = parse_bool(value, key);
  else if (key == "c1") h.c1 = num();
  else if (key == "c2") h.c2 = num();
  else if (key == "d1") h.d1 = num();
  else if (key == "d2") h.d2 = num();
  else if (key == "sigma_b2") h.sigma_b2 = num();
  else if (key == "nu") h.nu = num();
  else if (key == "S") cfg.S_values = list();
  else if (key == "R") h.R = num();
  else if (key == "knots_per_dim") {
    cfg.knots_per_dim.clear();
    for (double v : list()) {
      if (v != std::floor(v)) throw UsageError("config: knots_per_dim must be integers");
      cfg.knots_per_dim.push_back(static_cast<int>(v));
    }
  } else if (key == "bandwidth") cfg.bandwidth = num();
  else if (key == "chains") cfg.chains = static_cast<int>(integer());
  else if (key == "threads") cfg.threads = static_cast<int>(integer());
  else throw UsageError("config: unknown key '" + key + "'");
}

/// Flat key=value text; '#' starts a comment.
inline RunConfig parse_config(const std::string& text, RunConfig cfg = {}) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos)
      throw UsageError("config line " + std::to_string(lineno) + ": expected key = value");
    set_config_value(cfg, trim(std::string_view(body).substr(0, eq)), trim(std::string_view(body).substr(eq + 1)));
  }
  return cfg;
}

inline RunConfig load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Key/value pairs that reproduce `cfg` through parse_config.
inline std::vector<std::pair<std::string, std::string>> config_entries(const RunConfig& cfg) {
  const SamplerConfig& s = cfg.sampler;
  const Hyper& h = s.hyper;
  auto join = [](const auto& v) {
    std::string out;
    for (std::size_t k = 0; k < v.size(); ++k) {
      if (k) out += ",";
      if constexpr (std::is_same_v<std::decay_t<decltype(v[k])>, double>) out += fmt_double(v[k]);
      else out += std::to_string(v[k]);
    }
    return out;
  };
  return {{"n_iter", std::to_string(s.n_iter)},
          {"n_burnin", std::to_string(s.n_burnin)},
          {"thin", std::to_string(s.thin)},
          {"leapfrog_steps", std::to_string(s.leapfrog_steps)},
          {"hmc_step_init", fmt_double(s.hmc_step_init)},
          {"target_accept", fmt_double(s.target_accept)},
          {"initial_step_search", s.initial_step_search ? "true" : "false"},
          {"mh_scale_a", fmt_double(s.mh_scale_a)},
          {"mh_scale_lambda", fmt_double(s.mh_scale_lambda)},
          {"mh_target_accept", fmt_double(s.mh_target_accept)},
          {"adapt_interval", std::to_string(s.adapt_interval)},
          {"step_jitter", fmt_double(s.step_jitter)},
          {"max_energy_error", fmt_double(s.max_energy_error)},
          {"seed", std::to_string(s.seed)},
          {"likelihood", s.likelihood_enabled ? "true" : "false"},
          {"c1", fmt_double(h.c1)},
          {"c2", fmt_double(h.c2)},
          {"d1", fmt_double(h.d1)},
          {"d2", fmt_double(h.d2)},
          {"sigma_b2", fmt_double(h.sigma_b2)},
          {"nu", fmt_double(h.nu)},
          {"S", join(cfg.S_values)},
          {"R", fmt_double(h.R)},
          {"knots_per_dim", join(cfg.knots_per_dim)},
          {"bandwidth", fmt_double(cfg.bandwidth)},
          {"chains", std::to_string(cfg.chains)},
          {"threads", std::to_string(cfg.threads)}};
}

inline std::string config_to_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& [k, v] : config_entries(cfg))
    if (!v.empty()) out += k + " = " + v + "\n";
  return out;
}

// ---------------------------------------------------------------- chain

struct ChainLayout {
  int G = 0, L = 0, q = 0, c = 0;

  int flags() const { return 3 * (G + 1); }
  int size() const { return 2 + (1 + G) * 2 + G + c + q * q + L * q * (1 + G) + flags(); }
};

inline std::vector<double> flatten_record(const ChainRecord& rec, const ChainLayout& lay) {
  const ModelState& s = rec.state;
  require_shape(s.G() == lay.G && s.L() == lay.L && s.q() == lay.q && s.b_cov.size() == lay.c &&
                    static_cast<int>(rec.accepted.size()) == lay.flags(),
                "chain: record does not match layout");
  std::vector<double> v;
  v.reserve(static_cast<std::size_t>(lay.size()));
  v.push_back(rec.log_posterior);
  v.push_back(s.sigma2);
  v.push_back(s.thresholds.lambda_shared);
  for (double l : s.thresholds.lambda_group) v.push_back(l);
  v.push_back(s.a_shared);
  for (double a : s.a_group) v.push_back(a);
  for (int g = 0; g < lay.G; ++g) v.push_back(s.b0(g));
  for (int k = 0; k < lay.c; ++k) v.push_back(s.b_cov(k));
  for (int r = 0; r < lay.q; ++r)
    for (int c = 0; c < lay.q; ++c) v.push_back(s.Sigma(r, c));
  auto push_field = [&](const FieldMatrix& f) {
    for (Eigen::Index r = 0; r < f.rows(); ++r)
      for (Eigen::Index c = 0; c < f.cols(); ++c) v.push_back(f(r, c));
  };
  push_field(s.beta_shared_knots);
  for (const auto& a : s.alpha_knots) push_field(a);
  for (auto f : rec.accepted) v.push_back(f ? 1.0 : 0.0);
  return v;
}

inline ChainRecord unflatten_record(int iteration, const std::vector<double>& v, const ChainLayout& lay) {
  if (static_cast<int>(v.size()) != lay.size()) throw FormatError("chain: state vector length");
  ChainRecord rec;
  rec.iteration = iteration;
  std::size_t k = 0;
  auto next = [&]() { return v[k++]; };
  ModelState& s = rec.state;
  rec.log_posterior = next();
  s.sigma2 = next();
  s.thresholds.lambda_shared = next();
  for (int g = 0; g < lay.G; ++g) s.thresholds.lambda_group.push_back(next());
  s.a_shared = next();
  for (int g = 0; g < lay.G; ++g) s.a_group.push_back(next());
  s.b0.resize(lay.G);
  for (int g = 0; g < lay.G; ++g) s.b0(g) = next();
  s.b_cov.resize(lay.c);
  for (int c = 0; c < lay.c; ++c) s.b_cov(c) = next();
  s.Sigma.resize(lay.q, lay.q);
  for (int r = 0; r < lay.q; ++r)
    for (int c = 0; c < lay.q; ++c) s.Sigma(r, c) = next();
  auto read_field = [&]() {
    FieldMatrix f(lay.L, lay.q);
    for (int r = 0; r < lay.L; ++r)
      for (int c = 0; c < lay.q; ++c) f(r, c) = next();
    return f;
  };
  s.beta_shared_knots = read_field();
  for (int g = 0; g < lay.G; ++g) s.alpha_knots.push_back(read_field());
  for (int f = 0; f < lay.flags(); ++f) rec.accepted.push_back(next() != 0.0 ? 1 : 0);
  return rec;
}

/// Appends one frame per record, each with a single write followed by a flush.
class ChainWriter {
 public:
  ChainWriter(const fs::path& path, ChainLayout layout) : layout_(layout) {
    out_.open(path, std::ios::binary | std::ios::trunc);
    if (!out_) throw std::runtime_error("cannot open " + path.string() + " for writing");
  }

  void write(const ChainRecord& rec) {
    const auto v = flatten_record(rec, layout_);
    std::string buf;
    buf.reserve(16 + 8 * v.size());
    put_u64(buf, 8 + 8 * v.size());
    put_u64(buf, static_cast<std::uint64_t>(rec.iteration));
    for (double x : v) put_f64(buf, x);
    out_.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    out_.flush();
    if (!out_) throw std::runtime_error("chain write failed");
  }

 private:
  ChainLayout layout_;
  std::ofstream out_;
};

struct ChainReadResult {
  std::vector<ChainRecord> records;
  bool torn = false;               // trailing partial frame
  int last_valid_iteration = -1;   // -1 when no complete frame
};

/// Reads complete frames; a trailing partial frame sets `torn`. With
/// `strict`, a torn file raises FormatError naming the last valid iteration.
inline ChainReadResult read_chain(const fs::path& path, const ChainLayout& layout, bool strict = false) {
  const std::string bytes = read_text_file(path);
  ChainReadResult out;
  const std::uint64_t payload = 8 + 8 * static_cast<std::uint64_t>(layout.size());
  std::size_t pos = 0;
  std::vector<double> v(static_cast<std::size_t>(layout.size()));
  while (pos < bytes.size()) {
    if (bytes.size() - pos < 8) {
      out.torn = true;
      break;
    }
    const std::uint64_t len = get_u64(bytes.data() + pos);
    if (len != payload)
      throw FormatError("chain " + path.string() + ": frame length " + std::to_string(len) + " does not match layout (" +
                        std::to_string(payload) + ")");
    if (bytes.size() - pos - 8 < len) {
      out.torn = true;
      break;
    }
    const char* p = bytes.data() + pos + 8;
    const auto iteration = static_cast<int>(get_u64(p));
    for (std::size_t k = 0; k < v.size(); ++k) v[k] = get_f64(p + 8 + 8 * k);
    out.records.push_back(unflatten_record(iteration, v, layout));
    out.last_valid_iteration = iteration;
    pos += 8 + len;
  }
  if (out.torn && strict)
    throw FormatError("chain " + path.string() + ": torn frame after iteration " +
                      std::to_string(out.last_valid_iteration));
  return out;
}

/// trace.csv: per saved record, scalar parameters and running post-burn-in
/// acceptance rates.
class TraceWriter {
 public:
  TraceWriter(const fs::path& path, int G) : counts_(static_cast<std::size_t>(3 * (G + 1)), 0) {
    out_.open(path, std::ios::binary | std::ios::trunc);
    if (!out_) throw std::runtime_error("cannot open " + path.string() + " for writing");
    std::string h = "iteration,log_posterior,sigma2,lambda";
    for (int g = 1; g <= G; ++g) h += ",lambda_" + std::to_string(g);
    h += ",a";
    for (int g = 1; g <= G; ++g) h += ",a_" + std::to_string(g);
    for (const char* kind : {"hmc", "a", "lambda"}) {
      h += std::string(",acc_") + kind + "_shared";
      for (int g = 1; g <= G; ++g) h += std::string(",acc_") + kind + "_" + std::to_string(g);
    }
    out_ << h << "\n";
  }

  void write(const ChainRecord& rec) {
    ++rows_;
    for (std::size_t k = 0; k < counts_.size() && k < rec.accepted.size(); ++k) counts_[k] += rec.accepted[k];
    const ModelState& s = rec.state;
    std::string line = std::to_string(rec.iteration) + "," + fmt_double(rec.log_posterior) + "," +
                       fmt_double(s.sigma2) + "," + fmt_double(s.thresholds.lambda_shared);
    for (double l : s.thresholds.lambda_group) line += "," + fmt_double(l);
    line += "," + fmt_double(s.a_shared);
    for (double a : s.a_group) line += "," + fmt_double(a);
    for (long c : counts_) line += "," + fmt_double(static_cast<double>(c) / static_cast<double>(rows_));
    out_ << line << "\n";
    out_.flush();
  }

 private:
  std::vector<long> counts_;
  long rows_ = 0;
  std::ofstream out_;
};

}  // namespace st2n
