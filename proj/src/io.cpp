#include "ndm/io.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "json.hpp"

namespace ndm::io {

using json = nlohmann::ordered_json;

namespace {

std::string trim(std::string_view s) {
  auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string_view::npos) return {};
  auto end = s.find_last_not_of(" \t\r");
  return std::string(s.substr(begin, end - begin + 1));
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("failed writing " + path.string());
}

bool parse_number(std::string_view text, double& out) {
  const std::string t = trim(text);
  if (t.empty()) return false;
  const char* first = t.data();
  if (*first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, t.data() + t.size(), out);
  return ec == std::errc() && ptr == t.data() + t.size();
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  for (char c : line) {
    if (c == ',') {
      cells.push_back(trim(cell));
      cell.clear();
    } else if (c != '\r') {
      cell += c;
    }
  }
  cells.push_back(trim(cell));
  return cells;
}

// Shortest round-trip representation.
std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

json to_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

json to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

json to_json(const std::vector<Eigen::MatrixXd>& ms) {
  json a = json::array();
  for (const auto& m : ms) a.push_back(to_json(m));
  return a;
}

double number_at(const json& j, const std::string& what) {
  if (!j.is_number()) throw DataError(what + ": expected a number");
  return j.get<double>();
}

Eigen::VectorXd vector_from(const json& j, const std::string& what) {
  if (!j.is_array()) throw DataError(what + ": expected an array");
  Eigen::VectorXd v(j.size());
  for (std::size_t i = 0; i < j.size(); ++i)
    v[i] = number_at(j[i], what + "[" + std::to_string(i) + "]");
  return v;
}

Eigen::MatrixXd matrix_from(const json& j, const std::string& what) {
  if (!j.is_array()) throw DataError(what + ": expected an array of rows");
  if (j.empty()) return Eigen::MatrixXd(0, 0);
  const std::size_t cols = j[0].size();
  Eigen::MatrixXd m(j.size(), cols);
  for (std::size_t r = 0; r < j.size(); ++r) {
    if (!j[r].is_array() || j[r].size() != cols)
      throw ShapeError(what + ": row " + std::to_string(r) + " has the wrong length");
    for (std::size_t c = 0; c < cols; ++c)
      m(r, c) = number_at(j[r][c], what);
  }
  return m;
}

std::vector<Eigen::MatrixXd> matrices_from(const json& j, const std::string& what) {
  if (!j.is_array()) throw DataError(what + ": expected an array");
  std::vector<Eigen::MatrixXd> out;
  out.reserve(j.size());
  for (std::size_t i = 0; i < j.size(); ++i)
    out.push_back(matrix_from(j[i], what + "[" + std::to_string(i) + "]"));
  return out;
}

const json& field(const json& j, const char* key, const std::string& what) {
  auto it = j.find(key);
  if (it == j.end()) throw DataError(what + ": missing field '" + key + "'");
  return *it;
}

json parse_json_file(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw DataError(path.string() + ": invalid JSON: " + e.what());
  }
}

}  // namespace

// -------------------------------------------------------------- config

Config Config::parse(const std::string& text, const std::string& origin) {
  Config cfg;
  cfg.origin_ = origin;
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const std::string body = trim(line);
    if (body.empty() || body[0] == '#') continue;
    const auto eq = body.find('=');
    const std::string at = origin + ":" + std::to_string(number);
    if (eq == std::string::npos)
      throw ConfigError(at + ": expected 'key = value'");
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    if (key.empty()) throw ConfigError(at + ": empty key");
    if (cfg.values_.contains(key))
      throw ConfigError(at + ": duplicate key '" + key + "'");
    cfg.values_[key] = value;
    cfg.lines_[key] = number;
  }
  return cfg;
}

Config Config::load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

void Config::set(const std::string& key, const std::string& value) {
  values_[key] = value;
  lines_.erase(key);
}

std::string Config::where(const std::string& key) const {
  auto it = lines_.find(key);
  if (it == lines_.end()) return "option '" + key + "'";
  return origin_ + ":" + std::to_string(it->second) + ": key '" + key + "'";
}

std::string Config::get_string(const std::string& key,
                               const std::string& fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

double Config::get_double(const std::string& key, double fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  double v = 0.0;
  if (!parse_number(it->second, v) || !std::isfinite(v))
    throw ConfigError(where(key) + ": '" + it->second + "' is not a number");
  return v;
}

long Config::get_long(const std::string& key, long fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  const std::string t = trim(it->second);
  long v = 0;
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || ptr != t.data() + t.size())
    throw ConfigError(where(key) + ": '" + it->second + "' is not an integer");
  return v;
}

bool Config::get_bool(const std::string& key, bool fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  std::string v = it->second;
  std::transform(v.begin(), v.end(), v.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(where(key) + ": '" + it->second + "' is not a boolean");
}

std::vector<double> Config::get_list(const std::string& key) const {
  std::vector<double> out;
  auto it = values_.find(key);
  if (it == values_.end()) return out;
  for (const auto& cell : split_csv_line(it->second)) {
    double v = 0.0;
    if (!parse_number(cell, v) || !std::isfinite(v))
      throw ConfigError(where(key) + ": '" + cell + "' is not a number");
    out.push_back(v);
  }
  return out;
}

void Config::require_known(const std::vector<std::string>& allowed) const {
  for (const auto& [key, value] : values_)
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw ConfigError(where(key) + ": unknown key");
}

// ------------------------------------------------------------- dataset

fs::path manifest_path_for(const fs::path& csv) {
  fs::path p = csv;
  p.replace_extension(".manifest.json");
  return p;
}

void write_dataset(const Dataset& data, const fs::path& csv) {
  std::string out;
  for (std::size_t j = 0; j < data.feature_names.size(); ++j) {
    if (j) out += ',';
    out += data.feature_names[j];
  }
  out += '\n';
  for (Eigen::Index n = 0; n < data.y.rows(); ++n) {
    for (Eigen::Index j = 0; j < data.y.cols(); ++j) {
      if (j) out += ',';
      out += format_double(data.y(n, j));
    }
    out += '\n';
  }
  write_text(csv, out);
  json manifest;
  manifest["domain"] = std::string(to_string(data.domain));
  manifest["rows"] = data.y.rows();
  manifest["features"] = data.feature_names;
  write_text(manifest_path_for(csv), manifest.dump(2) + "\n");
}

Dataset read_dataset(const fs::path& csv) {
  const fs::path manifest_path = manifest_path_for(csv);
  if (!fs::exists(manifest_path))
    throw DataError("missing dataset manifest " + manifest_path.string());
  const json manifest = parse_json_file(manifest_path);
  Dataset data;
  try {
    data.domain = parse_domain(field(manifest, "domain", manifest_path.string())
                                   .get<std::string>());
  } catch (const std::invalid_argument& e) {
    throw DataError(manifest_path.string() + ": " + e.what());
  }

  std::istringstream in(read_text(csv));
  std::string line;
  if (!std::getline(in, line)) throw DataError(csv.string() + ": empty file");
  data.feature_names = split_csv_line(line);
  const std::size_t m = data.feature_names.size();
  for (const auto& name : data.feature_names) {
    double dummy = 0.0;
    if (name.empty() || parse_number(name, dummy))
      throw DataError(csv.string() + ": header row required");
  }
  std::vector<std::vector<double>> rows;
  long row_number = 1;
  while (std::getline(in, line)) {
    ++row_number;
    if (trim(line).empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != m)
      throw ShapeError(csv.string() + ": line " + std::to_string(row_number) +
                       " has " + std::to_string(cells.size()) +
                       " fields, expected " + std::to_string(m));
    std::vector<double> values(m);
    for (std::size_t j = 0; j < m; ++j)
      if (!parse_number(cells[j], values[j]))
        throw DataError(csv.string() + ": line " + std::to_string(row_number) +
                        ", feature '" + data.feature_names[j] +
                        "': not a number: '" + cells[j] + "'");
    rows.push_back(std::move(values));
  }
  data.y.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(m));
  for (std::size_t n = 0; n < rows.size(); ++n)
    for (std::size_t j = 0; j < m; ++j) data.y(n, j) = rows[n][j];
  if (auto it = manifest.find("rows"); it != manifest.end() &&
                                      it->get<long>() != data.y.rows())
    throw ShapeError(csv.string() + ": manifest declares " +
                     std::to_string(it->get<long>()) + " rows, file has " +
                     std::to_string(data.y.rows()));
  try {
    data.validate();
  } catch (const std::invalid_argument& e) {
    throw DataError(csv.string() + ": " + e.what());
  }
  return data;
}

void counts_to_proportions(Dataset& data, const fs::path& csv) {
  std::istringstream in(read_text(csv));
  std::string line;
  if (!std::getline(in, line)) throw DataError(csv.string() + ": empty file");
  std::vector<double> denominators;
  long row_number = 1;
  while (std::getline(in, line)) {
    ++row_number;
    if (trim(line).empty()) continue;
    const auto cells = split_csv_line(line);
    double v = 0.0;
    if (cells.size() != 1 || !parse_number(cells[0], v) || !(v > 0.0))
      throw DataError(csv.string() + ": line " + std::to_string(row_number) +
                      ": expected one positive denominator");
    denominators.push_back(v);
  }
  if (static_cast<Eigen::Index>(denominators.size()) != data.y.rows())
    throw ShapeError(csv.string() + ": " + std::to_string(denominators.size()) +
                     " denominators for " + std::to_string(data.y.rows()) + " rows");
  for (Eigen::Index n = 0; n < data.y.rows(); ++n)
    data.y.row(n) /= denominators[n];
  data.domain = Domain::kUnit;
  try {
    data.validate();
  } catch (const std::invalid_argument& e) {
    throw DataError("after dividing by denominators: " + std::string(e.what()));
  }
}

// --------------------------------------------------------- ground truth

void write_ground_truth(const GroundTruth& t, const fs::path& path) {
  json j;
  j["beta"] = to_json(t.beta);
  j["pi"] = to_json(t.pi);
  j["mu"] = to_json(t.mu);
  j["sigma"] = to_json(t.sigma);
  j["xbar"] = to_json(t.xbar);
  json mask = json::array();
  for (Eigen::Index n = 0; n < t.xbar_mask.rows(); ++n) {
    json row = json::array();
    for (Eigen::Index k = 0; k < t.xbar_mask.cols(); ++k) row.push_back(t.xbar_mask(n, k));
    mask.push_back(std::move(row));
  }
  j["xbar_mask"] = std::move(mask);
  j["particles"] = to_json(t.particles);
  j["spreads"] = to_json(t.spreads);
  j["modes"] = to_json(t.modes);
  write_text(path, j.dump(1) + "\n");
}

GroundTruth read_ground_truth(const fs::path& path) {
  const json j = parse_json_file(path);
  const std::string what = path.string();
  GroundTruth t;
  t.beta = vector_from(field(j, "beta", what), what + ": beta");
  t.pi = matrix_from(field(j, "pi", what), what + ": pi");
  t.mu = matrix_from(field(j, "mu", what), what + ": mu");
  if (j.contains("sigma")) t.sigma = matrices_from(j["sigma"], what + ": sigma");
  if (j.contains("xbar")) t.xbar = matrices_from(j["xbar"], what + ": xbar");
  t.xbar_mask.setConstant(t.pi.rows(), t.mu.rows(), false);
  if (j.contains("xbar_mask")) {
    const json& mask = j["xbar_mask"];
    if (mask.size() != static_cast<std::size_t>(t.pi.rows()))
      throw ShapeError(what + ": xbar_mask has the wrong number of rows");
    for (std::size_t n = 0; n < mask.size(); ++n) {
      if (mask[n].size() != static_cast<std::size_t>(t.mu.rows()))
        throw ShapeError(what + ": xbar_mask row has the wrong length");
      for (std::size_t k = 0; k < mask[n].size(); ++k)
        t.xbar_mask(n, k) = mask[n][k].get<bool>();
    }
  }
  if (j.contains("particles")) t.particles = vector_from(j["particles"], what + ": particles");
  if (j.contains("spreads")) t.spreads = vector_from(j["spreads"], what + ": spreads");
  if (j.contains("modes")) t.modes = matrices_from(j["modes"], what + ": modes");
  if (t.beta.size() != t.mu.rows() || t.pi.cols() != t.mu.rows())
    throw ShapeError(what + ": beta, pi and mu disagree on the factor count");
  return t;
}

// ----------------------------------------------------------- fit report

namespace {

std::string_view stage_name(NonparametricProgress::Stage s) {
  switch (s) {
    case NonparametricProgress::Stage::kBatch: return "batch";
    case NonparametricProgress::Stage::kMerge: return "merge";
    case NonparametricProgress::Stage::kSplit: return "split";
    case NonparametricProgress::Stage::kDone: return "done";
  }
  return "batch";
}

NonparametricProgress::Stage parse_stage(const std::string& s) {
  if (s == "batch") return NonparametricProgress::Stage::kBatch;
  if (s == "merge") return NonparametricProgress::Stage::kMerge;
  if (s == "split") return NonparametricProgress::Stage::kSplit;
  if (s == "done") return NonparametricProgress::Stage::kDone;
  throw DataError("unknown checkpoint stage '" + s + "'");
}

json report_body(const FitReport& r) {
  json j;
  j["mode"] = r.mode;
  j["seed"] = r.seed;
  j["initial_k"] = r.initial_k;
  j["iterations"] = r.iterations;
  j["converged"] = r.converged;
  j["elbo_trace"] = r.elbo_trace;
  json warnings = json::array();
  for (const auto& w : r.warnings)
    warnings.push_back({{"iteration", w.iteration}, {"block", w.block}, {"message", w.message}});
  j["warnings"] = std::move(warnings);
  json moves = json::array();
  for (const auto& mv : r.moves)
    moves.push_back({{"kind", mv.kind == MoveRecord::Kind::kSplit ? "split" : "merge"},
                     {"factors", mv.factors},
                     {"elbo_before", mv.elbo_before},
                     {"elbo_after", mv.elbo_after},
                     {"accepted", mv.accepted},
                     {"iteration", mv.iteration},
                     {"noise_fallback", mv.noise_fallback}});
  j["moves"] = std::move(moves);
  return j;
}

FitReport report_from(const json& j) {
  FitReport r;
  r.mode = j.at("mode").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.initial_k = j.at("initial_k").get<int>();
  r.iterations = j.at("iterations").get<long>();
  r.converged = j.at("converged").get<bool>();
  r.elbo_trace = j.at("elbo_trace").get<std::vector<double>>();
  for (const auto& w : j.at("warnings"))
    r.warnings.push_back({w.at("iteration").get<long>(), w.at("block").get<std::string>(),
                          w.at("message").get<std::string>()});
  for (const auto& m : j.at("moves")) {
    MoveRecord mv;
    mv.kind = m.at("kind").get<std::string>() == "split" ? MoveRecord::Kind::kSplit
                                                         : MoveRecord::Kind::kMerge;
    mv.factors = m.at("factors").get<std::vector<int>>();
    mv.elbo_before = m.at("elbo_before").get<double>();
    mv.elbo_after = m.at("elbo_after").get<double>();
    mv.accepted = m.at("accepted").get<bool>();
    mv.iteration = m.at("iteration").get<long>();
    mv.noise_fallback = m.at("noise_fallback").get<bool>();
    r.moves.push_back(std::move(mv));
  }
  return r;
}

json schedule_json(const LearningRateSchedule& s) {
  return {{"delay", s.delay}, {"rate", s.rate}};
}

}  // namespace

void write_fit_report(const FitReport& report, const VariationalState& state,
                      const FitContext& ctx, const fs::path& path) {
  json j;
  j["format"] = "ndm-fit-report";
  j["format_version"] = 1;
  json body = report_body(report);
  for (auto& [key, value] : body.items()) j[key] = value;
  j["final_k"] = state.K;

  json e;
  const Eigen::VectorXd beta = state.expected_beta();
  e["beta"] = to_json(Eigen::VectorXd(beta.head(state.K)));
  if (state.remainder)
    e["beta_remainder"] = beta[state.K];
  else
    e["beta_remainder"] = nullptr;
  e["pi"] = to_json(state.expected_pi());
  e["mu"] = to_json(state.lam_mu_mean);
  std::vector<Eigen::MatrixXd> sigma;
  for (int k = 0; k < state.K; ++k) sigma.push_back(state.expected_sigma(k));
  e["sigma"] = to_json(sigma);
  e["xbar"] = to_json(state.lam_xbar_mean);
  e["particles"] = to_json(state.lam_p);
  j["expectations"] = std::move(e);

  const std::uint64_t seed = ctx.options.seed;
  j["seed_manifest"] = {
      {"seed", seed},
      {"generator", "mt19937_64 seeded per substream by SplitMix64 mixing"},
      {"evaluation_seed", substream_seed(seed, {stream::kElbo})},
      {"substreams",
       {{"init", {stream::kInit}},
        {"local", {stream::kLocal, "iteration", "observation"}},
        {"global", {stream::kGlobal, "iteration"}},
        {"elbo", {stream::kElbo, "sample"}},
        {"split_noise", {stream::kSplit, "iteration", "factor"}},
        {"split_order", {stream::kOrder, "round"}}}}};

  const Hyperparameters& hp = ctx.hp;
  j["hyperparameters"] = {{"alpha0", to_json(hp.alpha0)},
                          {"alpha", hp.alpha},
                          {"mu0", hp.mu0},
                          {"sigma0", hp.sigma0},
                          {"psi0", to_json(hp.psi0)},
                          {"nu0", hp.nu0},
                          {"rho", hp.rho},
                          {"eta", to_json(hp.eta)},
                          {"family", std::string(to_string(hp.family))},
                          {"link", std::string(to_string(hp.link))}};
  const FitOptions& o = ctx.options;
  j["options"] = {{"samples", o.samples},
                  {"elbo_samples", o.elbo_samples},
                  {"control_variates", o.control_variates},
                  {"log_space_steps", o.log_space_steps},
                  {"delta", o.delta},
                  {"min_iters", o.min_iters},
                  {"max_iters", o.max_iters},
                  {"batch_max_iters", o.batch_max_iters},
                  {"max_rounds", o.max_rounds},
                  {"splits", o.splits},
                  {"merges", o.merges},
                  {"cluster_split_proportions", o.cluster_split_proportions},
                  {"schedules",
                   {{"beta", schedule_json(o.schedules.beta)},
                    {"pi", schedule_json(o.schedules.pi)},
                    {"xbar_mean", schedule_json(o.schedules.xbar_mean)},
                    {"xbar_scale", schedule_json(o.schedules.xbar_scale)},
                    {"particles", schedule_json(o.schedules.particles)}}}};
  j["data_digest"] = ctx.data_digest;
  write_text(path, j.dump(1) + "\n");
}

FitExpectations read_fit_expectations(const fs::path& path) {
  const json j = parse_json_file(path);
  const std::string what = path.string();
  const json& e = field(j, "expectations", what);
  FitExpectations out;
  out.estimate.beta = vector_from(field(e, "beta", what), what + ": beta");
  out.estimate.pi = matrix_from(field(e, "pi", what), what + ": pi");
  out.estimate.mu = matrix_from(field(e, "mu", what), what + ": mu");
  if (e.contains("xbar")) out.estimate.xbar = matrices_from(e["xbar"], what + ": xbar");
  if (e.contains("sigma")) out.sigma = matrices_from(e["sigma"], what + ": sigma");
  if (e.contains("particles")) out.particles = vector_from(e["particles"], what + ": particles");
  const Eigen::Index K = out.estimate.mu.rows();
  if (out.estimate.beta.size() != K || out.estimate.pi.cols() != K)
    throw ShapeError(what + ": beta, pi and mu disagree on the factor count");
  return out;
}

// -------------------------------------------------------- external CSV

FactorEstimate read_external_estimate(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::string line;
  if (!std::getline(in, line) ||
      split_csv_line(line) != std::vector<std::string>{"block", "n", "k", "m", "value"})
    throw DataError(path.string() + ": header must be 'block,n,k,m,value'");
  struct Entry {
    std::string block;
    long n, k, m;
    double value;
  };
  std::vector<Entry> entries;
  long K = 0, N = 0, M = 0;
  long row_number = 1;
  auto index = [&](const std::string& cell, const char* name) -> long {
    if (cell.empty()) return -1;
    long v = 0;
    auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
    if (ec != std::errc() || ptr != cell.data() + cell.size() || v < 0)
      throw DataError(path.string() + ": line " + std::to_string(row_number) +
                      ": bad " + name + " index '" + cell + "'");
    return v;
  };
  while (std::getline(in, line)) {
    ++row_number;
    if (trim(line).empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != 5)
      throw ShapeError(path.string() + ": line " + std::to_string(row_number) +
                       ": expected 5 fields");
    Entry e{cells[0], index(cells[1], "n"), index(cells[2], "k"), index(cells[3], "m"), 0.0};
    if (!parse_number(cells[4], e.value))
      throw DataError(path.string() + ": line " + std::to_string(row_number) +
                      ": value is not a number");
    const bool ok = (e.block == "beta" && e.k >= 0) ||
                    (e.block == "pi" && e.n >= 0 && e.k >= 0) ||
                    (e.block == "mu" && e.k >= 0 && e.m >= 0) ||
                    (e.block == "xbar" && e.n >= 0 && e.k >= 0 && e.m >= 0);
    if (!ok)
      throw DataError(path.string() + ": line " + std::to_string(row_number) +
                      ": unknown block or missing index");
    K = std::max(K, e.k + 1);
    N = std::max(N, e.n + 1);
    M = std::max(M, e.m + 1);
    entries.push_back(std::move(e));
  }
  FactorEstimate est;
  est.beta = Eigen::VectorXd::Zero(K);
  est.pi = Eigen::MatrixXd::Zero(N, K);
  est.mu = Eigen::MatrixXd::Zero(K, M);
  bool has_xbar = false;
  for (const auto& e : entries) has_xbar = has_xbar || e.block == "xbar";
  if (has_xbar) est.xbar.assign(N, Eigen::MatrixXd::Zero(K, M));
  for (const auto& e : entries) {
    if (e.block == "beta") est.beta[e.k] = e.value;
    else if (e.block == "pi") est.pi(e.n, e.k) = e.value;
    else if (e.block == "mu") est.mu(e.k, e.m) = e.value;
    else est.xbar[e.n](e.k, e.m) = e.value;
  }
  return est;
}

void write_external_estimate(const FactorEstimate& est, const fs::path& path) {
  std::string out = "block,n,k,m,value\n";
  for (Eigen::Index k = 0; k < est.beta.size(); ++k)
    out += "beta,," + std::to_string(k) + ",," + format_double(est.beta[k]) + "\n";
  for (Eigen::Index n = 0; n < est.pi.rows(); ++n)
    for (Eigen::Index k = 0; k < est.pi.cols(); ++k)
      out += "pi," + std::to_string(n) + "," + std::to_string(k) + ",," +
             format_double(est.pi(n, k)) + "\n";
  for (Eigen::Index k = 0; k < est.mu.rows(); ++k)
    for (Eigen::Index m = 0; m < est.mu.cols(); ++m)
      out += "mu,," + std::to_string(k) + "," + std::to_string(m) + "," +
             format_double(est.mu(k, m)) + "\n";
  for (std::size_t n = 0; n < est.xbar.size(); ++n)
    for (Eigen::Index k = 0; k < est.xbar[n].rows(); ++k)
      for (Eigen::Index m = 0; m < est.xbar[n].cols(); ++m)
        out += "xbar," + std::to_string(n) + "," + std::to_string(k) + "," +
               std::to_string(m) + "," + format_double(est.xbar[n](k, m)) + "\n";
  write_text(path, out);
}

// -------------------------------------------------------------- metrics

void write_metrics(const Metrics& m, const fs::path& path) {
  json j;
  j["nrmse_mu"] = m.nrmse_mu;
  j["cosine_beta"] = m.cosine_beta;
  j["cosine_pi"] = m.cosine_pi;
  if (m.nrmse_xbar)
    j["nrmse_xbar"] = *m.nrmse_xbar;
  else
    j["nrmse_xbar"] = nullptr;
  j["estimated_factors"] = m.estimated_factors;
  j["true_factors"] = m.true_factors;
  j["alignment"] = {{"method", "greedy maximum cosine on factor means"},
                    {"estimate_to_truth", m.alignment.estimate_to_truth},
                    {"unmatched_truth", m.alignment.unmatched_truth},
                    {"score", m.alignment.score}};
  write_text(path, j.dump(2) + "\n");
}

// ----------------------------------------------------------- checkpoint

void write_checkpoint(const Checkpoint& cp, const fs::path& path) {
  const VariationalState& s = cp.state;
  json j;
  j["format"] = "ndm-checkpoint";
  j["state"] = {{"K", s.K},
                {"remainder", s.remainder},
                {"lam_beta", to_json(s.lam_beta)},
                {"lam_pi", to_json(s.lam_pi)},
                {"lam_mu_mean", to_json(s.lam_mu_mean)},
                {"lam_sigma_nu", to_json(s.lam_sigma_nu)},
                {"lam_sigma_psi", to_json(s.lam_sigma_psi)},
                {"lam_xbar_mean", to_json(s.lam_xbar_mean)},
                {"lam_xbar_scale", to_json(s.lam_xbar_scale)},
                {"lam_p", to_json(s.lam_p)}};
  const GradientEstimatorState& e = cp.estimator;
  j["estimator"] = {{"t", e.t},
                    {"acc_beta", to_json(e.acc_beta)},
                    {"acc_pi", to_json(e.acc_pi)},
                    {"acc_xbar_mean", to_json(e.acc_xbar_mean)},
                    {"acc_xbar_scale", to_json(e.acc_xbar_scale)},
                    {"acc_p", to_json(e.acc_p)}};
  const ConvergenceMonitor& m = cp.monitor;
  j["monitor"] = {{"delta", m.delta},
                  {"required_hits", m.required_hits},
                  {"min_iters", m.min_iters},
                  {"max_iters", m.max_iters},
                  {"hits", m.hits}};
  if (m.last_elbo)
    j["monitor"]["last_elbo"] = *m.last_elbo;
  else
    j["monitor"]["last_elbo"] = nullptr;
  j["report"] = report_body(cp.report);
  j["progress"] = {{"stage", std::string(stage_name(cp.progress.stage))},
                   {"round", cp.progress.round},
                   {"batch_iters", cp.progress.batch_iters},
                   {"accepted_this_round", cp.progress.accepted_this_round},
                   {"batch_converged", cp.progress.batch_converged}};
  write_text(path, j.dump() + "\n");
}

Checkpoint read_checkpoint(const fs::path& path) {
  const json j = parse_json_file(path);
  const std::string what = path.string();
  if (j.value("format", "") != "ndm-checkpoint")
    throw DataError(what + ": not a checkpoint file");
  Checkpoint cp;
  try {
    const json& s = j.at("state");
    cp.state.K = s.at("K").get<int>();
    cp.state.remainder = s.at("remainder").get<bool>();
    cp.state.lam_beta = vector_from(s.at("lam_beta"), what);
    cp.state.lam_pi = matrix_from(s.at("lam_pi"), what);
    cp.state.lam_mu_mean = matrix_from(s.at("lam_mu_mean"), what);
    cp.state.lam_sigma_nu = vector_from(s.at("lam_sigma_nu"), what);
    cp.state.lam_sigma_psi = matrices_from(s.at("lam_sigma_psi"), what);
    cp.state.lam_xbar_mean = matrices_from(s.at("lam_xbar_mean"), what);
    cp.state.lam_xbar_scale = matrices_from(s.at("lam_xbar_scale"), what);
    cp.state.lam_p = vector_from(s.at("lam_p"), what);
    const json& e = j.at("estimator");
    cp.estimator.t = e.at("t").get<long>();
    cp.estimator.acc_beta = vector_from(e.at("acc_beta"), what);
    cp.estimator.acc_pi = matrix_from(e.at("acc_pi"), what);
    cp.estimator.acc_xbar_mean = matrices_from(e.at("acc_xbar_mean"), what);
    cp.estimator.acc_xbar_scale = matrices_from(e.at("acc_xbar_scale"), what);
    cp.estimator.acc_p = vector_from(e.at("acc_p"), what);
    const json& m = j.at("monitor");
    cp.monitor.delta = m.at("delta").get<double>();
    cp.monitor.required_hits = m.at("required_hits").get<int>();
    cp.monitor.min_iters = m.at("min_iters").get<long>();
    cp.monitor.max_iters = m.at("max_iters").get<long>();
    cp.monitor.hits = m.at("hits").get<int>();
    if (!m.at("last_elbo").is_null()) cp.monitor.last_elbo = m.at("last_elbo").get<double>();
    cp.report = report_from(j.at("report"));
    const json& p = j.at("progress");
    cp.progress.stage = parse_stage(p.at("stage").get<std::string>());
    cp.progress.round = p.at("round").get<int>();
    cp.progress.batch_iters = p.at("batch_iters").get<long>();
    cp.progress.accepted_this_round = p.at("accepted_this_round").get<bool>();
    cp.progress.batch_converged = p.at("batch_converged").get<bool>();
  } catch (const json::exception& ex) {
    throw DataError(what + ": malformed checkpoint: " + ex.what());
  }
  try {
    cp.state.check_invariants();
    cp.estimator.check_shape(cp.state);
  } catch (const std::logic_error& ex) {
    throw ShapeError(what + ": " + ex.what());
  }
  return cp;
}

// ---------------------------------------------------------------- export

std::vector<fs::path> export_expectations(const FitExpectations& fit,
                                          const fs::path& dir) {
  fs::create_directories(dir);
  const FactorEstimate& e = fit.estimate;
  std::vector<fs::path> written;
  auto emit = [&](const std::string& name, const std::string& text) {
    write_text(dir / name, text);
    written.push_back(dir / name);
  };

  std::string beta = "factor,beta\n";
  for (Eigen::Index k = 0; k < e.beta.size(); ++k)
    beta += std::to_string(k) + "," + format_double(e.beta[k]) + "\n";
  emit("beta.csv", beta);

  std::string pi = "observation";
  for (Eigen::Index k = 0; k < e.pi.cols(); ++k) pi += ",factor_" + std::to_string(k);
  pi += "\n";
  for (Eigen::Index n = 0; n < e.pi.rows(); ++n) {
    pi += std::to_string(n);
    for (Eigen::Index k = 0; k < e.pi.cols(); ++k) pi += "," + format_double(e.pi(n, k));
    pi += "\n";
  }
  emit("pi.csv", pi);

  std::string mu = "factor";
  for (Eigen::Index m = 0; m < e.mu.cols(); ++m) mu += ",feature_" + std::to_string(m);
  mu += "\n";
  for (Eigen::Index k = 0; k < e.mu.rows(); ++k) {
    mu += std::to_string(k);
    for (Eigen::Index m = 0; m < e.mu.cols(); ++m) mu += "," + format_double(e.mu(k, m));
    mu += "\n";
  }
  emit("mu.csv", mu);

  if (!fit.sigma.empty()) {
    std::string sigma = "factor,row,col,value\n";
    for (std::size_t k = 0; k < fit.sigma.size(); ++k)
      for (Eigen::Index r = 0; r < fit.sigma[k].rows(); ++r)
        for (Eigen::Index c = 0; c < fit.sigma[k].cols(); ++c)
          sigma += std::to_string(k) + "," + std::to_string(r) + "," +
                   std::to_string(c) + "," + format_double(fit.sigma[k](r, c)) + "\n";
    emit("sigma.csv", sigma);
  }
  return written;
}

// ---------------------------------------------------------------- digest

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(),
                                                               EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 unavailable");
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0)
      EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &len);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i)
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return hex.str();
}

void write_run_manifest(const RunManifest& r, const fs::path& path) {
  json j;
  j["command"] = r.command;
  j["config"] = r.config;
  j["seed"] = r.seed;
  j["version"] = r.version;
  j["input_digests"] = r.input_digests;
  j["wall_clock_seconds"] = r.wall_clock_seconds;
  j["outputs"] = r.outputs;
  write_text(path, j.dump(2) + "\n");
}

}  // namespace ndm::io
