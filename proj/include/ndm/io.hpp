#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "ndm/eval.hpp"
#include "ndm/model.hpp"
#include "ndm/vi.hpp"

namespace ndm::io {

namespace fs = std::filesystem;

// Error categories map one-to-one onto CLI exit codes.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flat `key = value` file. Blank lines and lines starting with '#' are
// ignored; duplicate keys are an error.
class Config {
 public:
  static Config parse(const std::string& text, const std::string& origin);
  static Config load(const fs::path& path);

  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const { return values_.contains(key); }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  long get_long(const std::string& key, long fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  // Comma-separated numbers.
  std::vector<double> get_list(const std::string& key) const;

  // Throws ConfigError naming the first key not in `allowed`.
  void require_known(const std::vector<std::string>& allowed) const;

 private:
  std::string where(const std::string& key) const;

  std::string origin_;
  std::map<std::string, std::string> values_;
  std::map<std::string, int> lines_;
};

// Dataset CSV plus a JSON sidecar `<stem>.manifest.json` holding the domain.
fs::path manifest_path_for(const fs::path& csv);
void write_dataset(const Dataset& data, const fs::path& csv);
Dataset read_dataset(const fs::path& csv);
// Divides every entry of row n by the single value on row n of `csv` and
// declares the result unit-domain.
void counts_to_proportions(Dataset& data, const fs::path& csv);

void write_ground_truth(const GroundTruth& truth, const fs::path& path);
GroundTruth read_ground_truth(const fs::path& path);

struct FitContext {
  Hyperparameters hp;
  FitOptions options;
  std::string data_digest;
};
void write_fit_report(const FitReport& report, const VariationalState& state,
                      const FitContext& ctx, const fs::path& path);
struct FitExpectations {
  FactorEstimate estimate;
  std::vector<Eigen::MatrixXd> sigma;
  Eigen::VectorXd particles;
};
// Expectations stored in a FitReport file.
FitExpectations read_fit_expectations(const fs::path& path);

// External estimates: CSV with header `block,n,k,m,value`, block one of
// beta (k), pi (n,k), mu (k,m), xbar (n,k,m). Unused index columns are left
// empty.
FactorEstimate read_external_estimate(const fs::path& path);
void write_external_estimate(const FactorEstimate& est, const fs::path& path);

void write_metrics(const Metrics& metrics, const fs::path& path);

void write_checkpoint(const Checkpoint& cp, const fs::path& path);
Checkpoint read_checkpoint(const fs::path& path);

// Flattened expectations for plotting: beta.csv, pi.csv, mu.csv, sigma.csv.
// Returns the files written.
std::vector<fs::path> export_expectations(const FitExpectations& fit,
                                          const fs::path& dir);

std::string sha256_file(const fs::path& path);

struct RunManifest {
  std::string command;
  std::map<std::string, std::string> config;
  std::uint64_t seed = 0;
  std::string version;
  std::map<std::string, std::string> input_digests;
  double wall_clock_seconds = 0.0;
  std::vector<std::string> outputs;
};
void write_run_manifest(const RunManifest& manifest, const fs::path& path);

}  // namespace ndm::io
