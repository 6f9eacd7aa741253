#ifndef DLNMLPS_ARTIFACT_HPP
#define DLNMLPS_ARTIFACT_HPP

// JSON serialization of fits and replicate results (schema_version 1).

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "dlnmlps/fitengine.hpp"
#include "dlnmlps/io.hpp"
#include "dlnmlps/posterior.hpp"
#include "dlnmlps/simharness.hpp"

namespace dlnmlps {

using json = nlohmann::ordered_json;

inline constexpr int kSchemaVersion = 1;

inline json to_json(const KnotSet& k) {
  return {{"lo", k.lo}, {"hi", k.hi}, {"degree", k.degree}, {"interior", k.interior}, {"extended", k.extended}};
}

inline KnotSet knots_from_json(const json& j) {
  KnotSet k;
  k.lo = j.at("lo").get<double>();
  k.hi = j.at("hi").get<double>();
  k.degree = j.at("degree").get<int>();
  k.interior = j.at("interior").get<std::vector<double>>();
  k.extended = j.value("extended", false);
  k.validate();
  return k;
}

inline std::vector<double> to_vector(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

/// Everything needed to rebuild the Gaussian approximation and its summaries.
struct FitArtifact {
  LatentFit fit;
  DlnmBasis basis;
  std::vector<std::string> fixed_names;
  std::vector<std::string> hyper_names;
  std::vector<std::string> unit_ids;
};

inline json fit_to_json(const FitArtifact& a, const ConfigMap& config, const std::string& hash,
                        std::uint64_t master_seed, const std::string& data_hash) {
  const LatentFit& f = a.fit;
  json j;
  j["schema_version"] = kSchemaVersion;
  j["config_hash"] = hash;
  j["master_seed"] = master_seed;
  j["data_hash"] = data_hash;
  j["config"] = json(config);

  json model;
  model["n_fixed"] = f.n_fixed;
  model["n_theta"] = f.n_theta;
  model["n_units"] = f.n_units;
  model["spatial"] = f.spatial_kind ? to_string(*f.spatial_kind) : "none";
  model["fixed_names"] = a.fixed_names;
  model["unit_ids"] = a.unit_ids;
  model["exposure_knots"] = to_json(a.basis.exposure_knots);
  model["lag_knots"] = to_json(a.basis.lag_knots);
  model["max_lag"] = a.basis.max_lag;
  json cons = json::array();
  for (Eigen::Index r = 0; r < f.constraints().rows(); ++r) {
    std::vector<Eigen::Index> cols;
    for (Eigen::Index c = 0; c < f.constraints().cols(); ++c)
      if (f.constraints()(r, c) != 0.0) cols.push_back(c);
    cons.push_back(cols);
  }
  model["sum_to_zero"] = cons;
  j["model"] = model;

  json hyp;
  hyp["names"] = a.hyper_names;
  hyp["transformed"] = to_vector(f.hypers.flat());
  hyp["lambda"] = to_vector(f.hypers.lambda());
  if (f.spatial_kind) {
    const auto h = f.hypers.spatial(*f.spatial_kind);
    if (h.tau) hyp["tau"] = *h.tau;
    if (h.tau1) hyp["tau1"] = *h.tau1;
    if (h.tau2) hyp["tau2"] = *h.tau2;
    if (h.rho) hyp["rho"] = *h.rho;
  }
  j["hypers"] = hyp;

  j["mode"] = to_vector(f.mode());
  json chol = json::array();
  for (Eigen::Index r = 0; r < f.chol_lower().rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(r + 1));
    for (Eigen::Index c = 0; c <= r; ++c) row[static_cast<std::size_t>(c)] = f.chol_lower()(r, c);
    chol.push_back(row);
  }
  j["chol_lower"] = chol;

  j["diagnostics"] = {{"log_hyper_posterior", f.log_hyper_posterior},
                      {"log_cond_posterior", f.log_cond_posterior},
                      {"newton_iters", f.newton_iters},
                      {"total_newton_iters", f.total_newton_iters},
                      {"grad_norm", f.grad_norm},
                      {"converged", f.converged},
                      {"outer_evals", f.outer_evals},
                      {"outer_converged", f.outer_converged}};
  return j;
}

inline FitArtifact fit_from_json(const json& j) {
  if (j.value("schema_version", 0) != kSchemaVersion)
    throw Error(ErrorKind::parse, "unsupported fit artifact schema_version");
  try {
    const json& m = j.at("model");
    FitArtifact a;
    const auto mode = j.at("mode").get<std::vector<double>>();
    const auto d = static_cast<Eigen::Index>(mode.size());
    Eigen::MatrixXd chol = Eigen::MatrixXd::Zero(d, d);
    const json& rows = j.at("chol_lower");
    if (static_cast<Eigen::Index>(rows.size()) != d) throw Error(ErrorKind::parse, "chol_lower has wrong size");
    for (Eigen::Index r = 0; r < d; ++r) {
      const auto row = rows[static_cast<std::size_t>(r)].get<std::vector<double>>();
      if (static_cast<Eigen::Index>(row.size()) != r + 1) throw Error(ErrorKind::parse, "chol_lower row has wrong length");
      for (Eigen::Index c = 0; c <= r; ++c) chol(r, c) = row[static_cast<std::size_t>(c)];
    }
    const json& cons = m.at("sum_to_zero");
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(cons.size()), d);
    for (std::size_t r = 0; r < cons.size(); ++r)
      for (auto c : cons[r].get<std::vector<Eigen::Index>>()) A(static_cast<Eigen::Index>(r), c) = 1.0;
    a.fit = LatentFit(Eigen::Map<const Eigen::VectorXd>(mode.data(), d), chol, A);
    a.fit.n_fixed = m.at("n_fixed").get<int>();
    a.fit.n_theta = m.at("n_theta").get<int>();
    a.fit.n_units = m.at("n_units").get<int>();
    const auto sk = m.at("spatial").get<std::string>();
    if (sk != "none") a.fit.spatial_kind = parse_spatial_kind(sk);
    const json& h = j.at("hypers");
    const auto tv = h.at("transformed").get<std::vector<double>>();
    const auto n_lambda = static_cast<Eigen::Index>(h.at("lambda").size());
    Eigen::VectorXd flat = Eigen::Map<const Eigen::VectorXd>(tv.data(), static_cast<Eigen::Index>(tv.size()));
    a.fit.hypers.v_lambda = flat.head(n_lambda);
    a.fit.hypers.v_omega = flat.tail(flat.size() - n_lambda);
    a.hyper_names = h.at("names").get<std::vector<std::string>>();
    const json& dg = j.at("diagnostics");
    a.fit.log_hyper_posterior = dg.at("log_hyper_posterior").get<double>();
    a.fit.log_cond_posterior = dg.at("log_cond_posterior").get<double>();
    a.fit.newton_iters = dg.at("newton_iters").get<int>();
    a.fit.total_newton_iters = dg.at("total_newton_iters").get<long>();
    a.fit.grad_norm = dg.at("grad_norm").get<double>();
    a.fit.converged = dg.at("converged").get<bool>();
    a.fit.outer_evals = dg.at("outer_evals").get<int>();
    a.fit.outer_converged = dg.at("outer_converged").get<bool>();
    a.basis.exposure_knots = knots_from_json(m.at("exposure_knots"));
    a.basis.lag_knots = knots_from_json(m.at("lag_knots"));
    a.basis.max_lag = m.at("max_lag").get<int>();
    a.fixed_names = m.at("fixed_names").get<std::vector<std::string>>();
    a.unit_ids = m.at("unit_ids").get<std::vector<std::string>>();
    if (a.fit.n_fixed + a.fit.n_theta > d || a.basis.dim() != a.fit.n_theta)
      throw Error(ErrorKind::parse, "fit artifact layout is inconsistent");
    return a;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::parse, std::string("malformed fit artifact: ") + e.what());
  }
}

inline json result_to_json(const ReplicateResult& r, const std::string& hash, std::uint64_t master_seed) {
  auto pair = [](const MetricPair& m) { return json{{"rmse", m.rmse}, {"coverage", m.coverage}}; };
  auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  json j;
  j["schema_version"] = kSchemaVersion;
  j["config_hash"] = hash;
  j["master_seed"] = master_seed;
  j["replicate"] = r.replicate;
  j["seed"] = r.seed;
  j["lag_rr"] = pair(r.lag_rr);
  j["overall_rr"] = pair(r.overall_rr);
  j["re"] = pair(r.re);
  j["incidence"] = pair(r.incidence);
  j["rho_hat"] = num(r.rho_hat);
  j["var_hat"] = num(r.var_hat);
  j["converged"] = r.converged;
  j["error"] = r.error;
  j["runtime_seconds"] = r.runtime_seconds;
  return j;
}

inline ReplicateResult result_from_json(const json& j) {
  auto pair = [](const json& m) { return MetricPair{m.at("rmse").get<double>(), m.at("coverage").get<double>()}; };
  auto num = [](const json& v) { return v.is_null() ? NAN : v.get<double>(); };
  ReplicateResult r;
  r.replicate = j.at("replicate").get<int>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.lag_rr = pair(j.at("lag_rr"));
  r.overall_rr = pair(j.at("overall_rr"));
  r.re = pair(j.at("re"));
  r.incidence = pair(j.at("incidence"));
  r.rho_hat = num(j.at("rho_hat"));
  r.var_hat = num(j.at("var_hat"));
  r.converged = j.at("converged").get<bool>();
  r.error = j.at("error").get<std::string>();
  r.runtime_seconds = j.at("runtime_seconds").get<double>();
  return r;
}

}  // namespace dlnmlps

#endif  // DLNMLPS_ARTIFACT_HPP
