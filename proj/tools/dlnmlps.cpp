// dlnmlps: fit, predict, simulate and score Bayesian penalized DLNMs with spatial random effects.
//
// Exit codes: 0 success, 1 input or usage error (JSON error object on stderr),
// 2 non-convergence (artifacts are still written where possible).

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dlnmlps/artifact.hpp"
#include "dlnmlps/fitengine.hpp"
#include "dlnmlps/io.hpp"
#include "dlnmlps/model.hpp"
#include "dlnmlps/posterior.hpp"
#include "dlnmlps/simharness.hpp"

namespace fs = std::filesystem;
using namespace dlnmlps;

namespace {

struct Key {
  const char* name;
  const char* fallback;
  const char* help;
  bool hashed = true;  // part of the config hash
};

// clang-format off
const std::vector<Key> kModelKeys = {
    {"vx", "10", "exposure basis functions"},
    {"vl", "10", "lag basis functions"},
    {"degree", "3", "B-spline degree"},
    {"diff_order", "2", "difference penalty order"},
    {"ridge", "on", "varying ridge lag penalty (on/off)"},
    {"jitter", "1e-12", "penalty jitter"},
    {"grad_tol", "1e-8", "Newton gradient tolerance"},
    {"max_iter", "100", "Newton iteration limit"},
    {"nm_diameter_tol", "1e-4", "Nelder-Mead simplex diameter tolerance"},
    {"nm_spread_tol", "1e-6", "Nelder-Mead objective spread tolerance"},
    {"max_evals", "2000", "Nelder-Mead evaluation limit"},
    {"hyper_bound", "15", "bound on |transformed hyperparameter|"},
    {"seed", "1", "master seed"},
    {"level", "0.95", "credible level"},
};

const std::vector<Key> kFitKeys = {
    {"panel", "", "panel CSV"},
    {"adjacency", "", "adjacency edge list"},
    {"spatial", "leroux", "none|independent|icar|convolution|leroux"},
    {"max_lag", "7", "maximum lag L"},
    {"x0", "", "reference exposure (required)"},
    {"grid_step", "0.25", "exposure grid step"},
    {"draws", "10000", "Monte Carlo draws for exceedance probabilities"},
    {"rr_threshold", "1", "RR exceedance threshold"},
    {"af_threshold", "0", "AF exceedance threshold"},
    {"af_first", "", "first t_index of the AF window (default: series start)"},
    {"af_last", "", "last t_index of the AF window (default: series end)"},
};

const std::vector<Key> kPredictKeys = {
    {"fit", "", "fit.json from a previous fit"},
    {"panel", "", "panel CSV (needed for AF exceedance)"},
    {"x0", "", "reference exposure (required)"},
    {"grid_step", "0.25", "exposure grid step"},
    {"draws", "10000", "Monte Carlo draws"},
    {"rr_threshold", "1", "RR exceedance threshold"},
    {"af_threshold", "0", "AF exceedance threshold"},
    {"af_first", "", "first t_index of the AF window"},
    {"af_last", "", "last t_index of the AF window"},
    {"seed", "1", "master seed"},
    {"level", "0.95", "credible level"},
};

const std::vector<Key> kSimKeys = {
    {"scenario", "plane", "plane|temp-like|complex-like"},
    {"alpha", "", "plane slope"},
    {"heat", "", "temp-like heat curvature"},
    {"cold", "", "temp-like cold curvature"},
    {"decay", "", "temp-like lag decay"},
    {"amplitude", "", "complex-like amplitude"},
    {"scenario_x0", "", "reference exposure of the scenario"},
    {"grid_rows", "5", "lattice rows"},
    {"grid_cols", "5", "lattice columns"},
    {"length", "200", "observations per unit"},
    {"max_lag", "40", "maximum lag L"},
    {"replicates", "10", "number of replicates"},
    {"true_spatial", "leroux", "independent|leroux"},
    {"spatial", "leroux", "fitted prior: none|independent|icar|convolution|leroux"},
    {"rho", "0.95", "true Leroux rho"},
    {"variance", "0.5", "true spatial variance 1/tau"},
    {"beta0", "-7.6009024595420822", "true log baseline rate"},
    {"pop_lo", "5000", "smallest unit population"},
    {"pop_hi", "15000", "largest unit population"},
    {"export_panel", "off", "write replicate 0 panel, adjacency and truth (on/off)"},
};
// clang-format on

struct Fail {
  int code;
  std::string kind;
  std::string message;
};

void emit_error(const std::string& kind, const std::string& message) {
  std::cerr << json{{"error", {{"kind", kind}, {"message", message}}}}.dump() << std::endl;
}

void emit_warning(const std::string& message) { std::cerr << json{{"warning", message}}.dump() << std::endl; }

// Effective settings: defaults < config file < command-line flags.
class Settings {
 public:
  Settings(std::vector<Key> keys) : keys_(std::move(keys)) {
    for (const auto& k : keys_) values_[k.name] = k.fallback;
  }

  void add_options(CLI::App* app) {
    for (const auto& k : keys_) {
      std::string flag = std::string("--") + k.name;
      std::replace(flag.begin(), flag.end(), '_', '-');
      app->add_option(flag, flags_[k.name], k.help);
    }
    app->add_option("--config", config_path_, "flat key=value config file");
    app->add_option("--out", out_, "output directory")->default_val(".");
  }

  void resolve() {
    if (!config_path_.empty()) {
      for (const auto& [k, v] : parse_config_file(config_path_)) {
        if (!values_.count(k)) throw Error(ErrorKind::parse, "unknown config key '" + k + "'");
        values_[k] = v;
      }
    }
    for (const auto& [k, v] : flags_)
      if (!v.empty()) values_[k] = v;
  }

  const std::string& str(const std::string& k) const { return values_.at(k); }
  bool has(const std::string& k) const { return !values_.at(k).empty(); }

  double num(const std::string& k) const {
    double v = 0;
    if (!detail::parse_double(str(k), v) || !std::isfinite(v))
      throw Error(ErrorKind::invalid_argument, "setting '" + k + "' must be a number, got '" + str(k) + "'");
    return v;
  }

  int integer(const std::string& k) const {
    long v = 0;
    if (!detail::parse_long(str(k), v))
      throw Error(ErrorKind::invalid_argument, "setting '" + k + "' must be an integer, got '" + str(k) + "'");
    return static_cast<int>(v);
  }

  bool flag(const std::string& k) const {
    const auto& v = str(k);
    if (v == "on" || v == "true" || v == "1" || v == "yes") return true;
    if (v == "off" || v == "false" || v == "0" || v == "no") return false;
    throw Error(ErrorKind::invalid_argument, "setting '" + k + "' must be on/off");
  }

  std::uint64_t seed() const {
    try {
      return std::stoull(str("seed"));
    } catch (const std::exception&) {
      throw Error(ErrorKind::invalid_argument, "seed must be a nonnegative integer");
    }
  }

  ConfigMap hashed() const {
    ConfigMap m;
    for (const auto& k : keys_)
      if (k.hashed) m[k.name] = values_.at(k.name);
    return m;
  }

  fs::path out() const { return out_; }

 private:
  std::vector<Key> keys_;
  std::map<std::string, std::string> values_;
  std::map<std::string, std::string> flags_;
  std::string config_path_;
  std::string out_ = ".";
};

std::vector<Key> concat(std::vector<Key> a, const std::vector<Key>& b) {
  for (const auto& k : b)
    if (std::none_of(a.begin(), a.end(), [&](const Key& x) { return std::string(x.name) == k.name; }))
      a.push_back(k);
  return a;
}

std::optional<SpatialKind> spatial_setting(const Settings& s) {
  if (s.str("spatial") == "none") return std::nullopt;
  return parse_spatial_kind(s.str("spatial"));
}

ModelConfig model_config(const Settings& s) {
  ModelConfig m;
  m.v_x = s.integer("vx");
  m.v_l = s.integer("vl");
  m.degree = s.integer("degree");
  m.diff_order = s.integer("diff_order");
  m.ridge = s.flag("ridge");
  m.jitter = s.num("jitter");
  m.max_lag = s.integer("max_lag");
  m.spatial = spatial_setting(s);
  return m;
}

FitOptions fit_options(const Settings& s, std::ostream* log) {
  FitOptions o;
  o.newton.grad_tol = s.num("grad_tol");
  o.newton.max_iter = s.integer("max_iter");
  o.outer.diameter_tol = s.num("nm_diameter_tol");
  o.outer.spread_tol = s.num("nm_spread_tol");
  o.outer.max_evals = s.integer("max_evals");
  o.hyper_bound = s.num("hyper_bound");
  if (log) o.log = [log](const std::string& line) { *log << line << '\n'; };
  return o;
}

int worker_cap(int requested) {
  int w = std::max(1, requested);
  if (const char* env = std::getenv("DLNMLPS_THREADS")) {
    long cap = 0;
    if (detail::parse_long(env, cap) && cap >= 1) w = std::min<long>(w, cap);
  }
  return w;
}

std::string fmt(double v) {
  if (!std::isfinite(v)) return "NA";
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

// Writes the posterior summary tables shared by fit and predict.
void write_summaries(const fs::path& out, const FitArtifact& a, const Settings& s, const PanelData* panel) {
  const double x0 = s.num("x0");
  const double level = s.num("level");
  const auto& ek = a.basis.exposure_knots;
  const double step = s.num("grid_step");
  if (!(step > 0)) throw Error(ErrorKind::invalid_argument, "grid_step must be positive");
  RiskGrid grid = RiskGrid::regular(ek.lo, ek.hi, step, x0);
  const int draws_n = s.integer("draws");
  const PosteriorDraws draws = draw_latent(a.fit, draws_n, s.seed());

  const auto overall = rr_overall(a.fit, a.basis, grid, level);
  const auto p_rr = exceedance_rr(a.fit, a.basis, grid, draws, s.num("rr_threshold"));
  std::ostringstream ov;
  ov << "x,rr_overall,lo,hi,p_exceed\n";
  for (std::size_t i = 0; i < overall.size(); ++i)
    ov << fmt(overall[i].x) << ',' << fmt(overall[i].point) << ',' << fmt(overall[i].lo) << ',' << fmt(overall[i].hi)
       << ',' << fmt(p_rr[i]) << '\n';
  atomic_write(out / "rr_overall.csv", ov.str());

  std::ostringstream lg;
  lg << "x,lag,rr,lo,hi\n";
  for (int l = 0; l <= a.basis.max_lag; ++l)
    for (const auto& p : rr_lag(a.fit, a.basis, grid, l, level))
      lg << fmt(p.x) << ',' << l << ',' << fmt(p.point) << ',' << fmt(p.lo) << ',' << fmt(p.hi) << '\n';
  atomic_write(out / "rr_lag.csv", lg.str());

  std::vector<double> p_af;
  if (panel) {
    TimeWindow w{panel->t.front(), panel->t.front()};
    for (long t : panel->t) {
      w.first = std::min(w.first, t);
      w.last = std::max(w.last, t);
    }
    if (s.has("af_first")) w.first = s.integer("af_first");
    if (s.has("af_last")) w.last = s.integer("af_last");
    p_af = exceedance_af(a.fit, a.basis, *panel, w, x0, draws, s.num("af_threshold"));
  }

  std::ostringstream re;
  re << "unit_id,re_mean,lo,hi,p_af_exceed\n";
  std::vector<UnitSummary> res;
  if (a.fit.spatial_kind) res = random_effect_summary(a.fit, level);
  const std::size_t n_units = panel ? static_cast<std::size_t>(panel->n_units()) : res.size();
  for (std::size_t j = 0; j < n_units; ++j) {
    const std::string id = j < a.unit_ids.size() ? a.unit_ids[j] : std::to_string(j + 1);
    re << id << ',';
    if (j < res.size())
      re << fmt(res[j].mean) << ',' << fmt(res[j].lo) << ',' << fmt(res[j].hi);
    else
      re << "NA,NA,NA";
    re << ',' << (j < p_af.size() ? fmt(p_af[j]) : "NA") << '\n';
  }
  atomic_write(out / "random_effects.csv", re.str());

  std::ostringstream ex;
  ex << "quantity,key,threshold,probability\n";
  for (std::size_t i = 0; i < grid.exposures.size(); ++i)
    ex << "rr_overall," << fmt(grid.exposures[i]) << ',' << fmt(s.num("rr_threshold")) << ',' << fmt(p_rr[i]) << '\n';
  for (std::size_t j = 0; j < p_af.size(); ++j)
    ex << "af_backward," << (j < a.unit_ids.size() ? a.unit_ids[j] : std::to_string(j + 1)) << ','
       << fmt(s.num("af_threshold")) << ',' << fmt(p_af[j]) << '\n';
  atomic_write(out / "exceedance.csv", ex.str());
}

int run_fit(Settings& s) {
  s.resolve();
  if (!s.has("panel")) throw Error(ErrorKind::invalid_argument, "--panel is required");
  if (!s.has("x0")) throw Error(ErrorKind::invalid_argument, "--x0 (reference exposure) is required");
  const fs::path out = s.out();
  fs::create_directories(out);

  const PanelData panel = ingest_panel_file(s.str("panel"));
  std::string data_hash = file_hash(s.str("panel"));
  std::optional<AdjacencyGraph> graph;
  ModelConfig mc = model_config(s);
  if (mc.spatial) {
    if (!s.has("adjacency")) throw Error(ErrorKind::invalid_argument, "--adjacency is required for a spatial prior");
    auto load = load_adjacency_file(s.str("adjacency"));
    for (const auto& w : load.warnings) emit_warning(w);
    graph = std::move(load.graph);
    data_hash = hex64(fnv1a(file_hash(s.str("adjacency")), fnv1a(data_hash)));
  }
  const BuiltModel model = build_model(panel, mc, graph);

  std::ostringstream log;
  const FitOptions opt = fit_options(s, &log);
  FitArtifact a;
  a.fit = fit(model.spec, opt);
  a.basis = model.basis;
  a.fixed_names = model.spec.fixed_names;
  a.hyper_names = HyperVector::names(model.spec);
  a.unit_ids = panel.unit_ids;

  const ConfigMap cfg = s.hashed();
  const std::string hash = config_hash(cfg);
  atomic_write(out / "fit.json", fit_to_json(a, cfg, hash, s.seed(), data_hash).dump(1) + "\n");
  atomic_write(out / "fit.log", log.str());
  write_summaries(out, a, s, &panel);
  return a.fit.outer_converged && a.fit.converged ? 0 : 2;
}

int run_predict(Settings& s) {
  s.resolve();
  if (!s.has("fit")) throw Error(ErrorKind::invalid_argument, "--fit is required");
  if (!s.has("x0")) throw Error(ErrorKind::invalid_argument, "--x0 (reference exposure) is required");
  std::ifstream in(s.str("fit"));
  if (!in) throw Error(ErrorKind::io, "cannot open fit artifact '" + s.str("fit") + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::parse, std::string("fit artifact is not valid JSON: ") + e.what());
  }
  const FitArtifact a = fit_from_json(j);
  const fs::path out = s.out();
  fs::create_directories(out);
  std::optional<PanelData> panel;
  if (s.has("panel")) panel = ingest_panel_file(s.str("panel"));
  write_summaries(out, a, s, panel ? &*panel : nullptr);
  return 0;
}

std::string aggregate_csv(const std::vector<ReplicateResult>& rs) {
  std::ostringstream o;
  o << "replicate,seed,rmse_lag_rr,cov_lag_rr,rmse_overall_rr,cov_overall_rr,rmse_re,cov_re,rmse_incidence,"
       "cov_incidence,rho_hat,var_hat,converged,error\n";
  auto row = [&](const ReplicateResult& r) {
    o << fmt(r.lag_rr.rmse) << ',' << fmt(r.lag_rr.coverage) << ',' << fmt(r.overall_rr.rmse) << ','
      << fmt(r.overall_rr.coverage) << ',' << fmt(r.re.rmse) << ',' << fmt(r.re.coverage) << ','
      << fmt(r.incidence.rmse) << ',' << fmt(r.incidence.coverage) << ',' << fmt(r.rho_hat) << ',' << fmt(r.var_hat);
  };
  std::vector<ReplicateResult> ok;
  for (const auto& r : rs) {
    o << r.replicate << ',' << r.seed << ',';
    row(r);
    std::string err = r.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    o << ',' << (r.converged ? 1 : 0) << ',' << err << '\n';
    if (r.error.empty()) ok.push_back(r);
  }
  // Summary: means of the metrics and medians of the hyperparameter estimates over
  // replicates that produced a fit.
  ReplicateResult m;
  const double n = static_cast<double>(ok.size());
  std::vector<double> rho, var;
  int conv = 0;
  for (const auto& r : ok) {
    for (auto [dst, src] : {std::pair{&m.lag_rr, &r.lag_rr}, std::pair{&m.overall_rr, &r.overall_rr},
                            std::pair{&m.re, &r.re}, std::pair{&m.incidence, &r.incidence}}) {
      dst->rmse += src->rmse / n;
      dst->coverage += src->coverage / n;
    }
    rho.push_back(r.rho_hat);
    var.push_back(r.var_hat);
    conv += r.converged ? 1 : 0;
  }
  m.rho_hat = median(rho);
  m.var_hat = median(var);
  o << "summary," << ok.size() << ',';
  if (ok.empty()) {
    o << "NA,NA,NA,NA,NA,NA,NA,NA,NA,NA";
  } else {
    row(m);
  }
  o << ',' << conv << ",\n";
  return o.str();
}

int run_simulate(Settings& s) {
  s.resolve();
  const fs::path out = s.out();
  fs::create_directories(out);
  SimulationConfig cfg;
  cfg.scenario = s.str("scenario");
  for (const char* p : {"alpha", "heat", "cold", "decay", "amplitude"})
    if (s.has(p)) cfg.params[p] = s.num(p);
  if (s.has("scenario_x0")) cfg.params["x0"] = s.num("scenario_x0");
  cfg.grid_rows = s.integer("grid_rows");
  cfg.grid_cols = s.integer("grid_cols");
  cfg.length = s.integer("length");
  cfg.max_lag = s.integer("max_lag");
  cfg.true_spatial = parse_spatial_kind(s.str("true_spatial"));
  cfg.rho = s.num("rho");
  cfg.variance = s.num("variance");
  cfg.beta0 = s.num("beta0");
  cfg.pop_lo = s.num("pop_lo");
  cfg.pop_hi = s.num("pop_hi");
  cfg.model = model_config(s);
  cfg.level = s.num("level");
  if (cfg.grid_rows < 1 || cfg.grid_cols < 1) throw Error(ErrorKind::invalid_argument, "grid must be at least 1x1");
  if (!(cfg.variance > 0)) throw Error(ErrorKind::invalid_argument, "variance must be positive");
  const int n = s.integer("replicates");
  if (n < 0) throw Error(ErrorKind::invalid_argument, "replicates must be nonnegative");
  make_scenario(cfg.scenario, cfg.params, cfg.max_lag);  // validates the name early

  const ConfigMap hashed = s.hashed();
  const std::string hash = config_hash(hashed);
  const std::uint64_t master = s.seed();

  if (s.flag("export_panel")) {
    const Scenario sc = make_scenario(cfg.scenario, cfg.params, cfg.max_lag);
    const SimulatedPanel sim = simulate_panel(sc, cfg, replicate_seed(master, 0));
    std::ostringstream p, g;
    write_panel_csv(p, sim.panel);
    write_adjacency(g, sim.graph);
    atomic_write(out / "panel.csv", p.str());
    atomic_write(out / "adjacency.txt", g.str());
    json t;
    t["schema_version"] = kSchemaVersion;
    t["config_hash"] = hash;
    t["master_seed"] = master;
    t["scenario"] = cfg.scenario;
    t["x0"] = sc.x0;
    t["beta0"] = sim.truth.beta0;
    t["u"] = to_vector(sim.truth.u);
    std::vector<json> overall;
    for (double x = 0; x <= 10.0 + 1e-9; x += 0.25) overall.push_back({{"x", x}, {"log_rr_overall", sc.overall(x)}});
    t["overall"] = overall;
    atomic_write(out / "truth.json", t.dump(1) + "\n");
  }

  const auto results = run_replicates(cfg, n, master, worker_cap(s.integer("workers")), fit_options(s, nullptr));
  std::ostringstream jl;
  for (const auto& r : results) jl << result_to_json(r, hash, master).dump() << '\n';
  atomic_write(out / "results.jsonl", jl.str());
  atomic_write(out / "aggregate.csv", aggregate_csv(results));
  const bool all_ok = std::all_of(results.begin(), results.end(), [](const auto& r) { return r.error.empty() && r.converged; });
  return all_ok ? 0 : 2;
}

int run_score(const std::vector<std::string>& inputs, const fs::path& out, const std::string& expect_hash) {
  if (inputs.empty()) throw Error(ErrorKind::invalid_argument, "score needs at least one results.jsonl");
  std::string hash = expect_hash;
  std::vector<ReplicateResult> all;
  for (const auto& path : inputs) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::io, "cannot open '" + path + "'");
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      if (detail::trim(line).empty()) continue;
      json j;
      try {
        j = json::parse(line);
      } catch (const json::exception& e) {
        throw ParseError(n, path + ": invalid JSON line");
      }
      if (j.value("schema_version", 0) != kSchemaVersion) throw ParseError(n, path + ": unsupported schema_version");
      const auto h = j.at("config_hash").get<std::string>();
      if (hash.empty()) hash = h;
      if (h != hash)
        throw Error(ErrorKind::invalid_argument,
                    "config hash mismatch: " + path + " has " + h + ", expected " + hash);
      all.push_back(result_from_json(j));
    }
  }
  std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.replicate < b.replicate; });
  for (std::size_t i = 1; i < all.size(); ++i)
    if (all[i].replicate == all[i - 1].replicate && all[i].seed == all[i - 1].seed)
      throw Error(ErrorKind::invalid_argument, "replicate " + std::to_string(all[i].replicate) + " appears twice");
  fs::create_directories(out);
  atomic_write(out / "aggregate.csv", aggregate_csv(all));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian penalized distributed lag non-linear models with spatial random effects"};
  app.require_subcommand(1);

  Settings fit_s(concat(kFitKeys, kModelKeys));
  Settings pred_s(kPredictKeys);
  std::vector<Key> sim_keys = concat(kSimKeys, kModelKeys);
  sim_keys.push_back({"workers", "1", "parallel replicates (capped by DLNMLPS_THREADS)", false});
  Settings sim_s(sim_keys);

  auto* fit_cmd = app.add_subcommand("fit", "fit a model to a panel and export summaries");
  fit_s.add_options(fit_cmd);
  auto* pred_cmd = app.add_subcommand("predict", "recompute summaries from a saved fit");
  pred_s.add_options(pred_cmd);
  auto* sim_cmd = app.add_subcommand("simulate", "run simulation replicates");
  sim_s.add_options(sim_cmd);
  auto* score_cmd = app.add_subcommand("score", "aggregate replicate results");
  std::vector<std::string> score_inputs;
  std::string score_out = ".";
  std::string expect_hash;
  score_cmd->add_option("results", score_inputs, "results.jsonl files")->required();
  score_cmd->add_option("--out", score_out, "output directory");
  score_cmd->add_option("--expect-hash", expect_hash, "required config hash");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    emit_error("usage", e.what());
    return 1;
  }

  try {
    if (*fit_cmd) return run_fit(fit_s);
    if (*pred_cmd) return run_predict(pred_s);
    if (*sim_cmd) return run_simulate(sim_s);
    if (*score_cmd) return run_score(score_inputs, score_out, expect_hash);
  } catch (const Error& e) {
    emit_error(to_string(e.kind()), e.what());
    return e.kind() == ErrorKind::non_convergence ? 2 : 1;
  } catch (const std::exception& e) {
    emit_error("internal", e.what());
    return 1;
  }
  return 1;
}
