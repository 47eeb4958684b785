#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "helpers.hpp"
#include "json.hpp"
#include "ndm/cli.hpp"
#include "ndm/io.hpp"
#include "ndm/simgen.hpp"

using namespace ndm;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code;
  std::string err;
};

Run run_cli(const std::vector<std::string>& args) {
  std::ostringstream captured;
  std::streambuf* old = std::cerr.rdbuf(captured.rdbuf());
  const int code = cli::run(args);
  std::cerr.rdbuf(old);
  return {code, captured.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

json load_json(const fs::path& p) { return json::parse(slurp(p)); }

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

// Small simulated dataset in `dir`.
void small_simulation(const fs::path& dir, const std::string& seed = "3") {
  const Run r = run_cli({"simulate", "--out", dir.string(), "--seed", seed,
                         "--set", "N=40", "--set", "M=3", "--set", "K=3",
                         "--set", "sigma=5", "--set", "min_separation=4"});
  REQUIRE(r.code == 0);
}

std::vector<std::string> fit_args(const fs::path& data, const fs::path& out) {
  return {"fit", "--data", data.string(), "--out", out.string(), "--K", "3",
          "--seed", "11", "--max-iters", "12", "--threads", "2",
          "--set", "samples=8"};
}

}  // namespace

TEST_CASE("config parsing") {
  const auto cfg = io::Config::parse(
      "# comment\n\nK = 4\n eta=0.5, 1.5 \nsplits = false\nname = two words\n", "t.cfg");
  CHECK(cfg.get_long("K", 0) == 4);
  CHECK(cfg.get_list("eta") == std::vector<double>{0.5, 1.5});
  CHECK_FALSE(cfg.get_bool("splits", true));
  CHECK(cfg.get_string("name", "") == "two words");
  CHECK(cfg.get_double("missing", 2.5) == 2.5);
  CHECK_THROWS_AS(io::Config::parse("K = 1\nK = 2\n", "dup"), io::ConfigError);
  CHECK_THROWS_AS(io::Config::parse("no equals sign\n", "bad"), io::ConfigError);
  try {
    cfg.get_long("name", 0);
    FAIL("expected a config error");
  } catch (const io::ConfigError& e) {
    CHECK(std::string(e.what()).find("name") != std::string::npos);
  }
  try {
    cfg.require_known({"K", "eta", "splits"});
    FAIL("expected a config error");
  } catch (const io::ConfigError& e) {
    CHECK(std::string(e.what()).find("name") != std::string::npos);
  }
}

TEST_CASE("simulate with defaults writes a 1000 x 20 dataset and a manifest") {
  const fs::path dir = testing::scratch_dir("sim_default");
  REQUIRE(run_cli({"simulate", "--out", dir.string(), "--seed", "1"}).code == 0);
  const Dataset d = io::read_dataset(dir / "data.csv");
  CHECK(d.y.rows() == 1000);
  CHECK(d.y.cols() == 20);
  CHECK(d.domain == Domain::kReal);
  const GroundTruth t = io::read_ground_truth(dir / "truth.json");
  CHECK(t.mu.rows() == 10);
  const json m = load_json(dir / "run_manifest.json");
  CHECK(m["command"] == "simulate");
  CHECK(m["seed"] == 1);
  for (const auto& out : m["outputs"]) CHECK(fs::exists(out.get<std::string>()));
}

TEST_CASE("simulation seeds: flag, config and environment") {
  const fs::path a = testing::scratch_dir("seed_a"), b = testing::scratch_dir("seed_b"),
                 c = testing::scratch_dir("seed_c"), e = testing::scratch_dir("seed_env");
  small_simulation(a, "5");
  small_simulation(b, "5");
  CHECK(slurp(a / "data.csv") == slurp(b / "data.csv"));
  CHECK(slurp(a / "truth.json") == slurp(b / "truth.json"));

  write_file(c / "sim.cfg", "seed = 5\nN = 40\nM = 3\nK = 3\nsigma = 5\nmin_separation = 4\n");
  REQUIRE(run_cli({"simulate", "--out", c.string(), "--config", (c / "sim.cfg").string()})
              .code == 0);
  CHECK(slurp(a / "data.csv") == slurp(c / "data.csv"));

  ::setenv("NDM_SEED", "5", 1);
  const Run r = run_cli({"simulate", "--out", e.string(), "--set", "N=40", "--set", "M=3",
                         "--set", "K=3", "--set", "sigma=5", "--set", "min_separation=4"});
  ::unsetenv("NDM_SEED");
  REQUIRE(r.code == 0);
  CHECK(slurp(a / "data.csv") == slurp(e / "data.csv"));
  CHECK(load_json(e / "run_manifest.json")["seed"] == 5);

  // Flags override the config file.
  const fs::path f = testing::scratch_dir("seed_flag");
  REQUIRE(run_cli({"simulate", "--out", f.string(), "--config", (c / "sim.cfg").string(),
                   "--seed", "6"}).code == 0);
  CHECK(slurp(a / "data.csv") != slurp(f / "data.csv"));
}

TEST_CASE("configuration errors exit 2 and name the key") {
  const fs::path dir = testing::scratch_dir("config_errors");
  Run r = run_cli({"simulate", "--out", dir.string(), "--set", "domain=complex"});
  CHECK(r.code == 2);
  CHECK(r.err.find("domain") != std::string::npos);
  r = run_cli({"simulate", "--out", dir.string(), "--set", "colour=blue"});
  CHECK(r.code == 2);
  CHECK(r.err.find("colour") != std::string::npos);
  r = run_cli({"simulate", "--out", dir.string(), "--set", "rho=-3"});
  CHECK(r.code == 2);
  CHECK(r.err.find("rho") != std::string::npos);
  r = run_cli({"simulate"});
  CHECK(r.code == 2);
  ::setenv("NDM_SEED", "abc", 1);
  r = run_cli({"simulate", "--out", dir.string()});
  ::unsetenv("NDM_SEED");
  CHECK(r.code == 2);
  CHECK(r.err.find("NDM_SEED") != std::string::npos);

  small_simulation(dir);
  r = run_cli({"fit", "--data", (dir / "data.csv").string(), "--out", dir.string(),
               "--set", "link=sigmoid"});
  CHECK(r.code == 2);
  CHECK(r.err.find("link") != std::string::npos);
  r = run_cli({"fit", "--data", (dir / "data.csv").string(), "--out", dir.string(),
               "--mode", "sideways"});
  CHECK(r.code == 2);
  CHECK(r.err.find("mode") != std::string::npos);
}

TEST_CASE("data errors exit 3") {
  const fs::path dir = testing::scratch_dir("data_errors");
  small_simulation(dir);
  // Real-valued data with negative entries cannot be scored by a Poisson.
  Run r = run_cli({"fit", "--data", (dir / "data.csv").string(), "--out", dir.string(),
                   "--set", "family=poisson"});
  CHECK(r.code == 3);
  CHECK(r.err.find("row") != std::string::npos);

  write_file(dir / "bad.csv", "a,b\n1,2\n3,x\n");
  write_file(dir / "bad.manifest.json", R"({"domain": "real"})");
  r = run_cli({"fit", "--data", (dir / "bad.csv").string(), "--out", dir.string()});
  CHECK(r.code == 3);
  CHECK(r.err.find("'b'") != std::string::npos);

  write_file(dir / "orphan.csv", "a\n1\n");
  CHECK(run_cli({"fit", "--data", (dir / "orphan.csv").string(), "--out", dir.string()})
            .code == 3);
}

TEST_CASE("shape errors exit 4") {
  const fs::path dir = testing::scratch_dir("shape_errors");
  small_simulation(dir);
  write_file(dir / "ragged.csv", "a,b\n1,2\n3\n");
  write_file(dir / "ragged.manifest.json", R"({"domain": "real"})");
  CHECK(run_cli({"fit", "--data", (dir / "ragged.csv").string(), "--out", dir.string()})
            .code == 4);

  const fs::path other = testing::scratch_dir("shape_errors_other");
  REQUIRE(run_cli({"simulate", "--out", other.string(), "--seed", "2", "--set", "N=40",
                   "--set", "M=4", "--set", "K=3"}).code == 0);
  const fs::path fit = dir / "fit";
  REQUIRE(run_cli(fit_args(dir / "data.csv", fit)).code == 0);
  const Run r = run_cli({"evaluate", "--fit", (fit / "fit_report.json").string(), "--truth",
                         (other / "truth.json").string(), "--out", dir.string()});
  CHECK(r.code == 4);
  CHECK(r.err.find("features") != std::string::npos);

  write_file(dir / "denominators.csv", "total\n10\n20\n");
  CHECK(run_cli({"fit", "--data", (dir / "data.csv").string(), "--out", dir.string(),
                 "--counts-to-proportions", (dir / "denominators.csv").string()})
            .code == 4);
}

TEST_CASE("evaluation of the truth and of a relabelled truth") {
  const fs::path dir = testing::scratch_dir("eval_identity");
  small_simulation(dir);
  const GroundTruth t = io::read_ground_truth(dir / "truth.json");
  const FactorEstimate exact{t.beta, t.pi, t.mu, t.xbar};
  io::write_external_estimate(exact, dir / "exact.csv");
  REQUIRE(run_cli({"evaluate", "--estimate", (dir / "exact.csv").string(), "--truth",
                   (dir / "truth.json").string(), "--out", (dir / "exact").string()})
              .code == 0);
  const json m = load_json(dir / "exact" / "metrics.json");
  CHECK(m["nrmse_mu"].get<double>() == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(m["cosine_beta"].get<double>() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(m["cosine_pi"].get<double>() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(m["nrmse_xbar"].get<double>() == doctest::Approx(0.0).epsilon(1e-12));

  FactorEstimate shuffled = exact;
  const std::vector<int> perm = {2, 0, 1};
  for (int i = 0; i < 3; ++i) {
    shuffled.beta[i] = exact.beta[perm[i]];
    shuffled.pi.col(i) = exact.pi.col(perm[i]);
    shuffled.mu.row(i) = exact.mu.row(perm[i]);
    for (std::size_t n = 0; n < exact.xbar.size(); ++n)
      shuffled.xbar[n].row(i) = exact.xbar[n].row(perm[i]);
  }
  io::write_external_estimate(shuffled, dir / "shuffled.csv");
  REQUIRE(run_cli({"evaluate", "--estimate", (dir / "shuffled.csv").string(), "--truth",
                   (dir / "truth.json").string(), "--out", (dir / "shuffled").string()})
              .code == 0);
  const json s = load_json(dir / "shuffled" / "metrics.json");
  for (const char* key : {"nrmse_mu", "cosine_beta", "cosine_pi", "nrmse_xbar"})
    CHECK(s[key].get<double>() == doctest::Approx(m[key].get<double>()).epsilon(1e-12));
}

TEST_CASE("external estimates score like the equivalent fit report") {
  const fs::path dir = testing::scratch_dir("external");
  small_simulation(dir);
  REQUIRE(run_cli(fit_args(dir / "data.csv", dir / "fit")).code == 0);
  const io::FitExpectations e = io::read_fit_expectations(dir / "fit" / "fit_report.json");
  io::write_external_estimate(e.estimate, dir / "external.csv");
  REQUIRE(run_cli({"evaluate", "--fit", (dir / "fit" / "fit_report.json").string(),
                   "--truth", (dir / "truth.json").string(), "--out",
                   (dir / "a").string()}).code == 0);
  REQUIRE(run_cli({"evaluate", "--estimate", (dir / "external.csv").string(), "--truth",
                   (dir / "truth.json").string(), "--out", (dir / "b").string()})
              .code == 0);
  CHECK(slurp(dir / "a" / "metrics.json") == slurp(dir / "b" / "metrics.json"));

  const FactorEstimate back = io::read_external_estimate(dir / "external.csv");
  CHECK(back.mu == e.estimate.mu);
  CHECK(back.pi == e.estimate.pi);
  CHECK(back.beta == e.estimate.beta);

  write_file(dir / "broken.csv", "block,n,k,m,value\nmu,,0,0,1\nweird,,0,,2\n");
  CHECK(run_cli({"evaluate", "--estimate", (dir / "broken.csv").string(), "--truth",
                 (dir / "truth.json").string(), "--out", (dir / "c").string()})
            .code == 3);
}

TEST_CASE("fit runs are reproducible and resume exactly") {
  const fs::path dir = testing::scratch_dir("resume");
  small_simulation(dir);
  const fs::path full = dir / "full", again = dir / "again", part = dir / "part",
                 rest = dir / "rest", threads = dir / "threads";
  auto args = fit_args(dir / "data.csv", full);
  args.insert(args.end(), {"--checkpoint-every", "4"});
  REQUIRE(run_cli(args).code == 0);

  args = fit_args(dir / "data.csv", again);
  args.insert(args.end(), {"--checkpoint-every", "4"});
  REQUIRE(run_cli(args).code == 0);
  CHECK(slurp(full / "fit_report.json") == slurp(again / "fit_report.json"));

  args = fit_args(dir / "data.csv", threads);
  args[12] = "1";  // --threads
  args.insert(args.end(), {"--checkpoint-every", "4"});
  REQUIRE(run_cli(args).code == 0);
  json a = load_json(full / "fit_report.json"), t = load_json(threads / "fit_report.json");
  CHECK(a["expectations"] == t["expectations"]);
  CHECK(a["elbo_trace"] == t["elbo_trace"]);

  // Stop at eight iterations, then continue to twelve.
  args = fit_args(dir / "data.csv", part);
  args[10] = "8";  // --max-iters
  args.insert(args.end(), {"--checkpoint-every", "4"});
  REQUIRE(run_cli(args).code == 0);
  const json cp = load_json(part / "checkpoint.json");
  CHECK(cp["estimator"]["t"] == 8);
  args = fit_args(dir / "data.csv", rest);
  args.insert(args.end(), {"--checkpoint-every", "4", "--resume",
                           (part / "checkpoint.json").string()});
  REQUIRE(run_cli(args).code == 0);
  const json b = load_json(rest / "fit_report.json");
  CHECK(a["expectations"] == b["expectations"]);
  CHECK(a["elbo_trace"] == b["elbo_trace"]);
  CHECK(a["iterations"] == b["iterations"]);
  CHECK(slurp(full / "checkpoint.json") == slurp(rest / "checkpoint.json"));

  // A checkpoint from another seed is refused.
  args = fit_args(dir / "data.csv", dir / "wrong");
  args[8] = "12";  // --seed
  args.insert(args.end(), {"--resume", (part / "checkpoint.json").string()});
  CHECK(run_cli(args).code == 2);
}

TEST_CASE("nonparametric fit records its moves") {
  const fs::path dir = testing::scratch_dir("np_cli");
  small_simulation(dir);
  REQUIRE(run_cli({"fit", "--data", (dir / "data.csv").string(), "--out",
                   (dir / "fit").string(), "--mode", "nonparametric", "--K", "2",
                   "--seed", "4", "--max-iters", "40", "--set", "samples=8",
                   "--set", "batch_max_iters=10", "--set", "max_rounds=2"})
              .code == 0);
  const json r = load_json(dir / "fit" / "fit_report.json");
  CHECK(r["mode"] == "nonparametric");
  CHECK(r["initial_k"] == 2);
  REQUIRE(r["moves"].size() >= 1);
  CHECK(r["expectations"]["beta_remainder"].is_number());
  CHECK(r["final_k"].get<int>() == static_cast<int>(r["expectations"]["mu"].size()));

  REQUIRE(run_cli({"fit", "--data", (dir / "data.csv").string(), "--out",
                   (dir / "still").string(), "--mode", "nonparametric", "--K", "2",
                   "--seed", "4", "--max-iters", "40", "--no-splits", "--no-merges",
                   "--set", "samples=8", "--set", "batch_max_iters=10"})
              .code == 0);
  const json s = load_json(dir / "still" / "fit_report.json");
  CHECK(s["moves"].empty());
  CHECK(s["final_k"] == 2);
}

TEST_CASE("count data converted to proportions") {
  const fs::path dir = testing::scratch_dir("proportions");
  write_file(dir / "counts.csv", "a,b\n2,6\n5,5\n1,3\n8,2\n4,4\n");
  write_file(dir / "counts.manifest.json", R"({"domain": "integer"})");
  write_file(dir / "totals.csv", "total\n10\n20\n5\n10\n16\n");
  Dataset d = io::read_dataset(dir / "counts.csv");
  io::counts_to_proportions(d, dir / "totals.csv");
  CHECK(d.domain == Domain::kUnit);
  CHECK(d.y(0, 1) == 0.6);
  CHECK(d.y(2, 0) == 0.2);
  REQUIRE(run_cli({"fit", "--data", (dir / "counts.csv").string(), "--out",
                   (dir / "fit").string(), "--K", "2", "--seed", "1", "--max-iters", "3",
                   "--counts-to-proportions", (dir / "totals.csv").string()})
              .code == 0);
  const json r = load_json(dir / "fit" / "fit_report.json");
  CHECK(r["hyperparameters"]["family"] == "beta");
  write_file(dir / "zeros.csv", "total\n10\n0\n5\n10\n16\n");
  CHECK(run_cli({"fit", "--data", (dir / "counts.csv").string(), "--out",
                 (dir / "fit").string(), "--counts-to-proportions",
                 (dir / "zeros.csv").string()}).code == 3);
}

TEST_CASE("export-expectations writes CSV files and a manifest") {
  const fs::path dir = testing::scratch_dir("export");
  small_simulation(dir);
  REQUIRE(run_cli(fit_args(dir / "data.csv", dir / "fit")).code == 0);
  REQUIRE(run_cli({"export-expectations", "--fit", (dir / "fit" / "fit_report.json").string(),
                   "--out", (dir / "csv").string()}).code == 0);
  for (const char* f : {"beta.csv", "pi.csv", "mu.csv", "sigma.csv"})
    CHECK(fs::exists(dir / "csv" / f));
  const json m = load_json(dir / "csv" / "run_manifest.json");
  CHECK(m["command"] == "export-expectations");
  CHECK(m["outputs"].size() >= 4);
  CHECK(m["input_digests"].size() == 1);
  const json fm = load_json(dir / "fit" / "run_manifest.json");
  CHECK(fm["command"] == "fit");
  CHECK(fm["seed"] == 11);
  CHECK(fm["config"]["K"] == "3");
  CHECK(fm["input_digests"][(dir / "data.csv").string()] ==
        io::sha256_file(dir / "data.csv"));
}

TEST_CASE("sha256 of a known string") {
  const fs::path dir = testing::scratch_dir("sha");
  write_file(dir / "abc.txt", "abc");
  CHECK(io::sha256_file(dir / "abc.txt") ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("dataset and ground-truth round trips") {
  SimSpec spec;
  spec.K = 2;
  spec.N = 7;
  spec.M = 3;
  spec.domain = Domain::kPositive;
  spec.seed = 9;
  const SimOutput sim = simulate(spec);
  const fs::path dir = testing::scratch_dir("roundtrip");
  io::write_dataset(sim.data, dir / "d.csv");
  const Dataset d = io::read_dataset(dir / "d.csv");
  CHECK(d.y == sim.data.y);
  CHECK(d.domain == Domain::kPositive);
  CHECK(d.feature_names == sim.data.feature_names);
  io::write_ground_truth(*sim.data.truth, dir / "t.json");
  const GroundTruth t = io::read_ground_truth(dir / "t.json");
  CHECK(t.mu == sim.data.truth->mu);
  CHECK(t.pi == sim.data.truth->pi);
  CHECK(t.xbar_mask == sim.data.truth->xbar_mask);
  CHECK(t.sigma[1] == sim.data.truth->sigma[1]);
}
