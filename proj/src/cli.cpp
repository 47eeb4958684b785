#include "ndm/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <thread>

#include "CLI11.hpp"
#include "ndm/eval.hpp"
#include "ndm/io.hpp"
#include "ndm/np.hpp"
#include "ndm/simgen.hpp"
#include "ndm/vi.hpp"

#ifndef NDM_VERSION
#define NDM_VERSION "0.0.0"
#endif

namespace ndm::cli {

namespace fs = std::filesystem;
using io::Config;
using io::ConfigError;
using io::DataError;
using io::ShapeError;

namespace {

const std::vector<std::string> kSimulateKeys = {
    "procedure", "domain", "K", "N", "M", "alpha0", "alpha", "mu0", "sigma",
    "psi", "nu", "rho", "spread_a", "spread_b", "mode_rate", "min_separation",
    "seed"};

const std::vector<std::string> kFitKeys = {
    "mode", "K", "family", "link", "alpha0", "alpha", "mu0", "sigma0", "psi0",
    "nu0", "rho", "eta", "samples", "elbo_samples", "control_variates",
    "log_space_steps", "delta", "min_iters", "max_iters", "batch_max_iters",
    "max_rounds", "splits", "merges", "cluster_split_proportions", "threads",
    "seed", "checkpoint_every",
    "schedule.beta.delay", "schedule.beta.rate",
    "schedule.pi.delay", "schedule.pi.rate",
    "schedule.xbar_mean.delay", "schedule.xbar_mean.rate",
    "schedule.xbar_scale.delay", "schedule.xbar_scale.rate",
    "schedule.particles.delay", "schedule.particles.rate"};

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool with_config) {
  if (with_config) {
    cmd->add_option("--config", c.config_path, "flat key = value config file");
    cmd->add_option("--set", c.overrides, "override a config key (key=value)");
    cmd->add_option("--seed", c.seed, "random seed (falls back to config, then NDM_SEED)");
  }
  cmd->add_option("--out", c.out, "output directory")->required();
}

Config load_config(const Common& c) {
  Config cfg = c.config_path.empty() ? Config::parse("", "<flags>")
                                     : Config::load(c.config_path);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

std::uint64_t resolve_seed(const Common& c, const Config& cfg) {
  if (c.seed) return *c.seed;
  if (cfg.has("seed")) {
    const long v = cfg.get_long("seed", 0);
    if (v < 0) throw ConfigError("key 'seed': must be non-negative");
    return static_cast<std::uint64_t>(v);
  }
  if (const char* env = std::getenv("NDM_SEED")) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(env, &used);
      if (used != std::string(env).size()) throw std::invalid_argument(env);
      return v;
    } catch (const std::exception&) {
      throw ConfigError(std::string("NDM_SEED is not an unsigned integer: '") + env + "'");
    }
  }
  return 0;
}

template <typename F>
auto config_guard(const std::string& key, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("key '" + key + "': " + e.what());
  }
}

double positive(const Config& cfg, const std::string& key, double fallback) {
  const double v = cfg.get_double(key, fallback);
  if (!(v > 0.0)) throw ConfigError("key '" + key + "': must be positive");
  return v;
}

long at_least(const Config& cfg, const std::string& key, long fallback, long lo) {
  const long v = cfg.get_long(key, fallback);
  if (v < lo)
    throw ConfigError("key '" + key + "': must be at least " + std::to_string(lo));
  return v;
}

std::map<std::string, std::string> snapshot(const Config& cfg, std::uint64_t seed) {
  auto values = cfg.values();
  values["seed"] = std::to_string(seed);
  return values;
}

struct Timer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
        .count();
  }
};

// ------------------------------------------------------------ simulate

SimSpec sim_spec_from(const Config& cfg, std::uint64_t seed) {
  cfg.require_known(kSimulateKeys);
  SimSpec s;
  s.procedure = static_cast<int>(cfg.get_long("procedure", s.procedure));
  s.domain = config_guard("domain", [&] {
    return parse_domain(cfg.get_string("domain", std::string(to_string(s.domain))));
  });
  s.K = static_cast<int>(at_least(cfg, "K", s.K, 1));
  s.N = static_cast<int>(at_least(cfg, "N", s.N, 1));
  s.M = static_cast<int>(at_least(cfg, "M", s.M, 1));
  s.alpha0 = positive(cfg, "alpha0", s.alpha0);
  s.alpha = positive(cfg, "alpha", s.alpha);
  s.mu0 = cfg.get_double("mu0", s.mu0);
  s.sigma = positive(cfg, "sigma", s.sigma);
  if (cfg.has("psi"))
    s.psi = Eigen::MatrixXd::Identity(s.M, s.M) * positive(cfg, "psi", 1.0);
  s.nu = cfg.get_double("nu", s.nu);
  s.rho = positive(cfg, "rho", s.rho);
  s.spread_a = positive(cfg, "spread_a", s.spread_a);
  s.spread_b = positive(cfg, "spread_b", s.spread_b);
  s.mode_rate = positive(cfg, "mode_rate", s.mode_rate);
  s.min_separation = cfg.get_double("min_separation", s.min_separation);
  s.seed = seed;
  config_guard("procedure", [&] { s.validate(); return 0; });
  return s;
}

int cmd_simulate(const Common& c) {
  const Timer timer;
  const Config cfg = load_config(c);
  const std::uint64_t seed = resolve_seed(c, cfg);
  const SimSpec spec = sim_spec_from(cfg, seed);
  const SimOutput sim = simulate(spec);
  for (const auto& w : sim.warnings) std::cerr << "warning: " << w << "\n";

  const fs::path dir(c.out);
  fs::create_directories(dir);
  io::write_dataset(sim.data, dir / "data.csv");
  io::write_ground_truth(*sim.data.truth, dir / "truth.json");

  io::RunManifest m;
  m.command = "simulate";
  m.config = snapshot(cfg, seed);
  m.seed = seed;
  m.version = NDM_VERSION;
  if (!c.config_path.empty()) m.input_digests[c.config_path] = io::sha256_file(c.config_path);
  m.outputs = {(dir / "data.csv").string(), io::manifest_path_for(dir / "data.csv").string(),
               (dir / "truth.json").string()};
  m.wall_clock_seconds = timer.seconds();
  io::write_run_manifest(m, dir / "run_manifest.json");
  return kOk;
}

// ----------------------------------------------------------------- fit

struct FitFlags {
  std::string data;
  std::string mode;
  std::optional<int> K;
  std::optional<int> threads;
  bool no_splits = false;
  bool no_merges = false;
  std::string denominators;
  std::string resume;
  std::optional<long> checkpoint_every;
  std::optional<long> max_iters;
};

Domain domain_of(ObsFamily f) {
  switch (f) {
    case ObsFamily::kNormal: return Domain::kReal;
    case ObsFamily::kPoisson: return Domain::kInteger;
    case ObsFamily::kGamma: return Domain::kPositive;
    case ObsFamily::kBeta: return Domain::kUnit;
  }
  return Domain::kReal;
}

void check_family_accepts(ObsFamily family, const Dataset& data) {
  if (accepts(family, data.domain)) return;
  const Domain needed = domain_of(family);
  for (Eigen::Index n = 0; n < data.y.rows(); ++n)
    for (Eigen::Index j = 0; j < data.y.cols(); ++j)
      if (!in_domain(needed, data.y(n, j)))
        throw DataError("family " + std::string(to_string(family)) +
                        " needs " + std::string(to_string(needed)) +
                        " data; row " + std::to_string(n) + ", feature '" +
                        data.feature_names[j] + "' has value " +
                        std::to_string(data.y(n, j)) + " (dataset domain " +
                        std::string(to_string(data.domain)) + ")");
  throw DataError("family " + std::string(to_string(family)) +
                  " cannot score data declared " +
                  std::string(to_string(data.domain)));
}

Hyperparameters hyper_from(const Config& cfg, const Dataset& data) {
  const Eigen::Index M = data.features();
  Hyperparameters hp = Hyperparameters::defaults(M);
  hp.family = config_guard("family", [&] {
    return parse_obs_family(
        cfg.get_string("family", std::string(to_string(family_for(data.domain)))));
  });
  const Link default_link = hp.family == family_for(data.domain)
                                ? link_for(data.domain)
                                : link_for(domain_of(hp.family));
  hp.link = config_guard("link", [&] {
    return parse_link(cfg.get_string("link", std::string(to_string(default_link))));
  });
  if (!compatible(hp.family, hp.link))
    throw ConfigError("key 'link': " + std::string(to_string(hp.link)) +
                      " is not available for family " +
                      std::string(to_string(hp.family)));
  if (cfg.has("alpha0")) {
    const auto a0 = cfg.get_list("alpha0");
    hp.alpha0 = Eigen::Map<const Eigen::VectorXd>(a0.data(), a0.size());
  }
  hp.alpha = positive(cfg, "alpha", hp.alpha);
  hp.mu0 = cfg.get_double("mu0", hp.mu0);
  hp.sigma0 = positive(cfg, "sigma0", hp.sigma0);
  if (cfg.has("psi0")) hp.psi0 = Eigen::MatrixXd::Identity(M, M) * positive(cfg, "psi0", 1.0);
  hp.nu0 = cfg.get_double("nu0", hp.nu0);
  hp.rho = positive(cfg, "rho", hp.rho);
  if (cfg.has("eta")) {
    const auto eta = cfg.get_list("eta");
    if (eta.size() == 1)
      hp.eta = Eigen::VectorXd::Constant(M, eta[0]);
    else if (static_cast<Eigen::Index>(eta.size()) == M)
      hp.eta = Eigen::Map<const Eigen::VectorXd>(eta.data(), M);
    else
      throw ConfigError("key 'eta': expected 1 or " + std::to_string(M) + " values");
  }
  config_guard("hyperparameters", [&] { hp.validate(); return 0; });
  return hp;
}

FitOptions options_from(const Config& cfg, ObsFamily family, std::uint64_t seed) {
  FitOptions o;
  o.schedules = Schedules::defaults_for(family);
  o.samples = static_cast<int>(at_least(cfg, "samples", o.samples, 3));
  o.elbo_samples = static_cast<int>(at_least(cfg, "elbo_samples", o.elbo_samples, 1));
  o.control_variates = cfg.get_bool("control_variates", o.control_variates);
  o.log_space_steps = cfg.get_bool("log_space_steps", o.log_space_steps);
  o.delta = positive(cfg, "delta", o.delta);
  o.min_iters = at_least(cfg, "min_iters", o.min_iters, 0);
  o.max_iters = at_least(cfg, "max_iters", o.max_iters, 0);
  o.batch_max_iters = at_least(cfg, "batch_max_iters", o.batch_max_iters, 1);
  o.max_rounds = static_cast<int>(at_least(cfg, "max_rounds", o.max_rounds, 1));
  o.splits = cfg.get_bool("splits", o.splits);
  o.merges = cfg.get_bool("merges", o.merges);
  o.cluster_split_proportions =
      cfg.get_bool("cluster_split_proportions", o.cluster_split_proportions);
  o.threads = static_cast<int>(at_least(
      cfg, "threads", std::max(1u, std::thread::hardware_concurrency()), 1));
  o.checkpoint_every = at_least(cfg, "checkpoint_every", o.checkpoint_every, 0);
  auto schedule = [&](const std::string& name, LearningRateSchedule& s) {
    s.delay = cfg.get_double("schedule." + name + ".delay", s.delay);
    s.rate = cfg.get_double("schedule." + name + ".rate", s.rate);
    if (s.delay < 0.0 || !(s.rate < 0.0))
      throw ConfigError("schedule '" + name + "': need delay >= 0 and rate < 0");
  };
  schedule("beta", o.schedules.beta);
  schedule("pi", o.schedules.pi);
  schedule("xbar_mean", o.schedules.xbar_mean);
  schedule("xbar_scale", o.schedules.xbar_scale);
  schedule("particles", o.schedules.particles);
  o.seed = seed;
  return o;
}

void write_atomically(const Checkpoint& cp, const fs::path& path) {
  fs::path tmp = path;
  tmp += ".tmp";
  io::write_checkpoint(cp, tmp);
  fs::rename(tmp, path);
}

int cmd_fit(const Common& c, const FitFlags& f) {
  const Timer timer;
  Config cfg = load_config(c);
  if (!f.mode.empty()) cfg.set("mode", f.mode);
  if (f.K) cfg.set("K", std::to_string(*f.K));
  if (f.threads) cfg.set("threads", std::to_string(*f.threads));
  if (f.no_splits) cfg.set("splits", "false");
  if (f.no_merges) cfg.set("merges", "false");
  if (f.checkpoint_every) cfg.set("checkpoint_every", std::to_string(*f.checkpoint_every));
  if (f.max_iters) cfg.set("max_iters", std::to_string(*f.max_iters));
  cfg.require_known(kFitKeys);
  const std::uint64_t seed = resolve_seed(c, cfg);

  const std::string mode = cfg.get_string("mode", "parametric");
  if (mode != "parametric" && mode != "nonparametric")
    throw ConfigError("key 'mode': expected parametric or nonparametric, got '" + mode + "'");
  const int K = static_cast<int>(at_least(cfg, "K", 15, 1));

  Dataset data = io::read_dataset(f.data);
  if (!f.denominators.empty()) io::counts_to_proportions(data, f.denominators);
  const Hyperparameters hp = hyper_from(cfg, data);
  check_family_accepts(hp.family, data);
  const FitOptions opts = options_from(cfg, hp.family, seed);

  const fs::path dir(c.out);
  fs::create_directories(dir);
  const fs::path checkpoint_path = dir / "checkpoint.json";
  std::optional<Checkpoint> resume;
  if (!f.resume.empty()) {
    resume = io::read_checkpoint(f.resume);
    if (resume->report.mode != mode)
      throw ConfigError("checkpoint was written by a " + resume->report.mode +
                        " fit, not " + mode);
    if (resume->report.seed != seed)
      throw ConfigError("checkpoint seed " + std::to_string(resume->report.seed) +
                        " differs from the run seed " + std::to_string(seed));
    if (resume->state.observations() != data.observations() ||
        resume->state.features() != data.features())
      throw ShapeError("checkpoint shape does not match the dataset");
  }
  const CheckpointSink sink = [&](const Checkpoint& cp) {
    write_atomically(cp, checkpoint_path);
  };
  const Checkpoint* resume_ptr = resume ? &*resume : nullptr;
  const FitResult result = mode == "parametric"
                               ? fit_parametric(hp, data, K, opts, sink, resume_ptr)
                               : fit_nonparametric(hp, data, K, opts, sink, resume_ptr);

  io::FitContext ctx{hp, opts, io::sha256_file(f.data)};
  io::write_fit_report(result.report, result.state, ctx, dir / "fit_report.json");

  io::RunManifest m;
  m.command = "fit";
  m.config = snapshot(cfg, seed);
  m.seed = seed;
  m.version = NDM_VERSION;
  m.input_digests[f.data] = ctx.data_digest;
  m.input_digests[io::manifest_path_for(f.data).string()] =
      io::sha256_file(io::manifest_path_for(f.data));
  if (!c.config_path.empty()) m.input_digests[c.config_path] = io::sha256_file(c.config_path);
  if (!f.denominators.empty()) m.input_digests[f.denominators] = io::sha256_file(f.denominators);
  if (!f.resume.empty()) m.input_digests[f.resume] = io::sha256_file(f.resume);
  m.outputs = {(dir / "fit_report.json").string()};
  if (opts.checkpoint_every > 0 && fs::exists(checkpoint_path))
    m.outputs.push_back(checkpoint_path.string());
  m.wall_clock_seconds = timer.seconds();
  io::write_run_manifest(m, dir / "run_manifest.json");
  std::cerr << "fit: K=" << result.state.K << " iterations=" << result.report.iterations
            << " converged=" << (result.report.converged ? "true" : "false") << "\n";
  return kOk;
}

// ------------------------------------------------------------ evaluate

struct EvalFlags {
  std::string fit;
  std::string estimate;
  std::string truth;
};

int cmd_evaluate(const Common& c, const EvalFlags& f) {
  const Timer timer;
  if (f.fit.empty() == f.estimate.empty())
    throw ConfigError("give exactly one of --fit or --estimate");
  const FactorEstimate est = f.fit.empty() ? io::read_external_estimate(f.estimate)
                                           : io::read_fit_expectations(f.fit).estimate;
  const GroundTruth truth = io::read_ground_truth(f.truth);
  Metrics metrics;
  try {
    metrics = evaluate(est, truth);
  } catch (const std::invalid_argument& e) {
    throw ShapeError(e.what());
  }
  const fs::path dir(c.out);
  fs::create_directories(dir);
  io::write_metrics(metrics, dir / "metrics.json");

  io::RunManifest m;
  m.command = "evaluate";
  m.version = NDM_VERSION;
  const std::string input = f.fit.empty() ? f.estimate : f.fit;
  m.input_digests[input] = io::sha256_file(input);
  m.input_digests[f.truth] = io::sha256_file(f.truth);
  m.outputs = {(dir / "metrics.json").string()};
  m.wall_clock_seconds = timer.seconds();
  io::write_run_manifest(m, dir / "run_manifest.json");
  return kOk;
}

// -------------------------------------------------- export-expectations

int cmd_export(const Common& c, const std::string& fit) {
  const Timer timer;
  const io::FitExpectations e = io::read_fit_expectations(fit);
  const fs::path dir(c.out);
  const auto written = io::export_expectations(e, dir);
  io::RunManifest m;
  m.command = "export-expectations";
  m.version = NDM_VERSION;
  m.input_digests[fit] = io::sha256_file(fit);
  for (const auto& p : written) m.outputs.push_back(p.string());
  m.wall_clock_seconds = timer.seconds();
  io::write_run_manifest(m, dir / "run_manifest.json");
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Nonparametric deconvolution models"};
  app.require_subcommand(1);
  app.set_version_flag("--version", NDM_VERSION);

  Common sim_common, fit_common, eval_common, export_common;
  auto* sim = app.add_subcommand("simulate", "simulate a dataset with ground truth");
  add_common(sim, sim_common, true);

  FitFlags fit_flags;
  auto* fit = app.add_subcommand("fit", "fit a deconvolution model");
  add_common(fit, fit_common, true);
  fit->add_option("--data", fit_flags.data, "dataset CSV (with .manifest.json sidecar)")->required();
  fit->add_option("--mode", fit_flags.mode, "parametric or nonparametric");
  fit->add_option("--K", fit_flags.K, "number of factors (initial K when nonparametric)");
  fit->add_option("--threads", fit_flags.threads, "worker threads");
  fit->add_flag("--no-splits", fit_flags.no_splits, "disable split moves");
  fit->add_flag("--no-merges", fit_flags.no_merges, "disable merge moves");
  fit->add_option("--counts-to-proportions", fit_flags.denominators,
                  "CSV of per-row denominators; fits proportions");
  fit->add_option("--resume", fit_flags.resume, "checkpoint to continue from");
  fit->add_option("--checkpoint-every", fit_flags.checkpoint_every,
                  "write a checkpoint every this many iterations");
  fit->add_option("--max-iters", fit_flags.max_iters, "iteration cap");

  EvalFlags eval_flags;
  auto* ev = app.add_subcommand("evaluate", "score an estimate against ground truth");
  add_common(ev, eval_common, false);
  ev->add_option("--fit", eval_flags.fit, "FitReport JSON");
  ev->add_option("--estimate", eval_flags.estimate, "external estimate CSV");
  ev->add_option("--truth", eval_flags.truth, "ground-truth JSON")->required();

  std::string export_fit;
  auto* ex = app.add_subcommand("export-expectations", "write posterior expectations as CSV");
  add_common(ex, export_common, false);
  ex->add_option("--fit", export_fit, "FitReport JSON")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    if (*sim) return cmd_simulate(sim_common);
    if (*fit) return cmd_fit(fit_common, fit_flags);
    if (*ev) return cmd_evaluate(eval_common, eval_flags);
    if (*ex) return cmd_export(export_common, export_fit);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << "\n";
    return kShape;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}

int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

}  // namespace ndm::cli
