#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "dlnmlps/artifact.hpp"
#include "dlnmlps/io.hpp"
#include "test_util.hpp"

using namespace dlnmlps;

namespace {

std::string panel_text(int J, int T) {
  std::ostringstream s;
  s << "unit_id,t_index,y,exposure,offset_population\n";
  for (int j = 0; j < J; ++j)
    for (int t = 1; t <= T; ++t) s << "A" << j << ',' << t << ',' << (t * 7 + j) % 5 << ',' << 0.5 * t << ",1000\n";
  return s.str();
}

// Replaces the n-th data line (1-based) of a panel text.
std::string with_row(const std::string& text, int n, const std::string& row) {
  std::istringstream in(text);
  std::ostringstream out;
  std::string line;
  int i = 0;
  while (std::getline(in, line)) out << (i++ == n ? row : line) << '\n';
  return out.str();
}

void expect_parse_error(const std::string& text, const std::string& fragment) {
  std::istringstream in(text);
  try {
    ingest_panel(in);
    FAIL() << "expected a parse error containing '" << fragment << "'";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::parse);
    EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
  }
}

}  // namespace

TEST(Ingest, HappyPath) {
  std::istringstream in(panel_text(2, 10));
  const auto p = ingest_panel(in);
  EXPECT_EQ(p.n_units(), 2);
  EXPECT_EQ(p.series_length(0), 10u);
  EXPECT_EQ(p.series_length(1), 10u);
  EXPECT_DOUBLE_EQ(p.offset[3], std::log(1000.0));
  const auto r = report(p);
  EXPECT_EQ(r.n_rows, 20u);
  EXPECT_DOUBLE_EQ(r.exposure_min, 0.5);
  EXPECT_DOUBLE_EQ(r.exposure_max, 5.0);
}

TEST(Ingest, ErrorsNameTheRow) {
  const std::string ok = panel_text(2, 5);
  expect_parse_error("unit_id,t_index,y,exposure\nA,1,0,1\n", "missing column 'offset_population'");
  expect_parse_error(with_row(ok, 4, "A0,4,-1,2.0,1000"), "negative count at row 4");
  expect_parse_error(with_row(ok, 3, "A0,3,1,nan,1000"), "NaN exposure at row 3");
  expect_parse_error(with_row(ok, 4, "A0,3,1,2.0,1000"), "duplicate row for unit 'A0', t_index 3 at row 4");
  expect_parse_error(with_row(ok, 4, "A0,7,1,2.0,1000"), "non-contiguous t_index");
  expect_parse_error(with_row(ok, 7, "A0,6,1,2.0,1000"), "not contiguous at row 7");
  expect_parse_error(with_row(ok, 2, "A0,2,1.5,2.0,1000"), "non-integer count at row 2");
  expect_parse_error(with_row(ok, 2, "A0,2,1,2.0,0"), "at row 2");
  expect_parse_error(with_row(ok, 2, "A0,2,1,2.0"), "expected 5 fields");
  expect_parse_error("", "missing header");
  expect_parse_error("unit_id,t_index,y,exposure,offset_population\n", "no data rows");
}

TEST(Ingest, ExtraColumnsAreCovariates) {
  std::istringstream in("unit_id,t_index,y,exposure,offset_population,humidity\nA,1,2,1.0,10,0.3\nA,2,1,2.0,10,0.4\n");
  const auto p = ingest_panel(in);
  ASSERT_EQ(p.covariate_names, std::vector<std::string>{"humidity"});
  EXPECT_DOUBLE_EQ(p.covariates(1, 0), 0.4);
}

TEST(Ingest, DateColumnAddsWeekdayAndSeason) {
  std::ostringstream s;
  s << "unit_id,t_index,date,y,exposure,offset_population\n";
  // 2024-01-01 is a Monday.
  for (int t = 1; t <= 14; ++t) s << "A," << t << ",2024-01-" << (t < 10 ? "0" : "") << t << ",1,1.0,10\n";
  std::istringstream in(s.str());
  const auto p = ingest_panel(in);
  ASSERT_EQ(p.covariates.cols(), 9);
  EXPECT_EQ(p.covariate_names[0], "dow_tue");
  EXPECT_EQ(p.covariate_names[6], "season1_2024");
  EXPECT_EQ(p.covariates.row(0).head(6).sum(), 0.0);  // Monday is the reference
  EXPECT_EQ(p.covariates(1, 0), 1.0);                 // Tuesday
  EXPECT_EQ(p.covariates(6, 5), 1.0);                 // Sunday
  EXPECT_EQ(p.covariates(7, 0) + p.covariates.row(7).head(6).sum(), 0.0);

  std::istringstream bad("unit_id,t_index,date,y,exposure,offset_population\nA,1,2024-02-30,1,1.0,10\n");
  EXPECT_THROW(ingest_panel(bad), ParseError);
}

TEST(Ingest, WriteReadRoundTrip) {
  const auto p = testutil::random_panel(3, 12, 4);
  std::ostringstream out;
  write_panel_csv(out, p);
  std::istringstream in(out.str());
  const auto q = ingest_panel(in);
  EXPECT_EQ(q.y, p.y);
  EXPECT_EQ(q.exposure, p.exposure);
  EXPECT_LT((q.offset - p.offset).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(q.unit_ids, p.unit_ids);
}

TEST(Config, ParseAndHash) {
  std::istringstream a("# comment\nv_x = 10\n\nspatial=leroux  # trailing\n");
  std::istringstream b("spatial=leroux\nv_x=10\n");
  const auto ca = parse_config(a), cb = parse_config(b);
  EXPECT_EQ(ca.at("v_x"), "10");
  EXPECT_EQ(ca.at("spatial"), "leroux");
  EXPECT_EQ(config_hash(ca), config_hash(cb));
  auto cc = cb;
  cc["v_x"] = "11";
  EXPECT_NE(config_hash(cc), config_hash(cb));
  std::istringstream bad("v_x 10\n");
  EXPECT_THROW(parse_config(bad), ParseError);
  EXPECT_EQ(hex64(fnv1a("")), "cbf29ce484222325");
  EXPECT_EQ(hex64(fnv1a("a")), "af63dc4c8601ec8c");
}

TEST(Files, AtomicWriteReplacesContent) {
  const auto dir = std::filesystem::temp_directory_path() / "dlnmlps_io_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "out.txt";
  atomic_write(path, "first");
  atomic_write(path, "second");
  std::ifstream in(path);
  std::string s;
  std::getline(in, s);
  EXPECT_EQ(s, "second");
  EXPECT_FALSE(std::filesystem::exists(dir / "out.txt.tmp"));
  EXPECT_THROW(atomic_write(dir / "missing" / "x.txt", "y"), Error);
  std::filesystem::remove_all(dir);
}

TEST(Artifact, FitRoundTripsAndIsDeterministic) {
  const auto m = testutil::small_model(SpatialKind::icar, 5);
  FitArtifact a;
  a.fit = fit(m.spec);
  a.basis = m.basis;
  a.fixed_names = m.spec.fixed_names;
  a.hyper_names = {"log_lambda_x", "log_lambda_l", "log_lambda_s", "log_tau"};
  a.unit_ids = {"1", "2", "3", "4"};
  const ConfigMap cfg{{"spatial", "icar"}};
  const std::string text = fit_to_json(a, cfg, config_hash(cfg), 7, "abc").dump(2);

  FitArtifact again = a;
  again.fit = fit(m.spec);
  EXPECT_EQ(fit_to_json(again, cfg, config_hash(cfg), 7, "abc").dump(2), text);

  const auto b = fit_from_json(json::parse(text));
  EXPECT_EQ(b.fit.mode(), a.fit.mode());
  EXPECT_EQ(b.fit.chol_lower(), a.fit.chol_lower());
  EXPECT_EQ(b.fit.constraints(), a.fit.constraints());
  EXPECT_EQ(b.fit.hypers.flat(), a.fit.hypers.flat());
  EXPECT_EQ(b.fit.spatial_kind, a.fit.spatial_kind);
  EXPECT_EQ(b.basis.exposure_knots.interior, a.basis.exposure_knots.interior);
  EXPECT_EQ(b.basis.lag_knots.extended, a.basis.lag_knots.extended);
  const auto grid = RiskGrid::regular(0.0, 10.0, 1.0, 5.0);
  const auto ra = rr_overall(a.fit, a.basis, grid), rb = rr_overall(b.fit, b.basis, grid);
  for (std::size_t i = 0; i < ra.size(); ++i) {
    EXPECT_EQ(ra[i].point, rb[i].point);
    EXPECT_EQ(ra[i].hi, rb[i].hi);
  }
  // Re-serialising the parsed artifact reproduces the file.
  EXPECT_EQ(fit_to_json(b, cfg, config_hash(cfg), 7, "abc").dump(2), text);

  json broken = json::parse(text);
  broken["schema_version"] = 2;
  EXPECT_THROW(fit_from_json(broken), Error);
  broken = json::parse(text);
  broken["chol_lower"].erase(0);
  EXPECT_THROW(fit_from_json(broken), Error);
  broken = json::parse(text);
  broken["model"].erase("lag_knots");
  EXPECT_THROW(fit_from_json(broken), Error);
}

TEST(Artifact, ReplicateResultRoundTrip) {
  ReplicateResult r;
  r.replicate = 3;
  r.seed = 0xfedcba9876543210ULL;
  r.lag_rr = {0.1, 0.9};
  r.overall_rr = {0.2, 0.95};
  r.re = {0.3, 0.97};
  r.incidence = {0.4, 1.0};
  r.rho_hat = 0.91;
  r.converged = true;
  const auto j = result_to_json(r, "hash", 1);
  EXPECT_TRUE(j["var_hat"].is_null());
  const auto back = result_from_json(json::parse(j.dump()));
  EXPECT_EQ(back.seed, r.seed);
  EXPECT_EQ(back.re.coverage, 0.97);
  EXPECT_EQ(back.rho_hat, 0.91);
  EXPECT_TRUE(std::isnan(back.var_hat));
}
