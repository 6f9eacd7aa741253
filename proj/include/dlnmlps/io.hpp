#ifndef DLNMLPS_IO_HPP
#define DLNMLPS_IO_HPP

// Panel CSV ingestion, flat key=value configs, content hashes and atomic file writes.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "dlnmlps/basis.hpp"
#include "dlnmlps/error.hpp"
#include "dlnmlps/panel.hpp"

namespace dlnmlps {

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// Splits one CSV record; double quotes may wrap a field ("" is a literal quote).
inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(trim(cur));
  return out;
}

inline bool parse_double(const std::string& s, double& v) {
  if (s.empty()) return false;
  std::size_t pos = 0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    const std::string lower = [&] {
      std::string l;
      for (char c : s) l += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      return l;
    }();
    if (lower == "nan" || lower == "na") {
      v = NAN;
      return true;
    }
    return false;
  }
  return pos == s.size();
}

inline bool parse_long(const std::string& s, long& v) {
  if (s.empty()) return false;
  std::size_t pos = 0;
  try {
    v = std::stol(s, &pos);
  } catch (const std::exception&) {
    return false;
  }
  return pos == s.size();
}

// YYYY-MM-DD.
inline std::chrono::year_month_day parse_date(const std::string& s, std::size_t row) {
  int y = 0;
  unsigned m = 0, d = 0;
  char dash1 = 0, dash2 = 0;
  std::istringstream in(s);
  in >> y >> dash1 >> m >> dash2 >> d;
  const std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
  if (!in || dash1 != '-' || dash2 != '-' || !in.eof() || !ymd.ok())
    throw ParseError(row, "invalid date '" + s + "' (expected YYYY-MM-DD)");
  return ymd;
}

}  // namespace detail

struct IngestReport {
  int n_units = 0;
  std::size_t n_rows = 0;
  std::size_t min_length = 0;
  std::size_t max_length = 0;
  double exposure_min = 0.0;
  double exposure_max = 0.0;
};

inline IngestReport report(const PanelData& p) {
  IngestReport r;
  r.n_units = p.n_units();
  r.n_rows = p.n_rows();
  if (r.n_units > 0) {
    r.min_length = r.max_length = p.series_length(0);
    for (int j = 1; j < r.n_units; ++j) {
      r.min_length = std::min(r.min_length, p.series_length(j));
      r.max_length = std::max(r.max_length, p.series_length(j));
    }
    r.exposure_min = p.exposure_min();
    r.exposure_max = p.exposure_max();
  }
  return r;
}

/// Reads a long-format panel. Required columns: unit_id, t_index, y, exposure,
/// offset_population (population; its log becomes the offset). An optional `date` column
/// (YYYY-MM-DD) adds day-of-week indicators (Monday reference) and a natural cubic spline in
/// day of year with 3 df per calendar year. Any other column is a numeric covariate.
/// Rows must be grouped by unit_id with consecutive t_index values. Row numbers in errors
/// count data rows from 1 (the header is row 0).
inline PanelData ingest_panel(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError(0, "empty input: missing header");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);  // BOM
  const auto header = detail::split_csv(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (col.count(header[i])) throw ParseError(0, "duplicate column '" + header[i] + "'");
    col[header[i]] = i;
  }
  for (const char* req : {"unit_id", "t_index", "y", "exposure", "offset_population"})
    if (!col.count(req)) throw ParseError(0, std::string("missing column '") + req + "'");
  const bool has_date = col.count("date") > 0;
  std::vector<std::size_t> cov_cols;
  PanelData p;
  for (std::size_t i = 0; i < header.size(); ++i) {
    const auto& h = header[i];
    if (h == "unit_id" || h == "t_index" || h == "y" || h == "exposure" || h == "offset_population" || h == "date")
      continue;
    cov_cols.push_back(i);
    p.covariate_names.push_back(h);
  }

  std::vector<double> ys, xs, offs;
  std::vector<std::vector<double>> covs;
  std::vector<std::chrono::year_month_day> dates;
  std::map<std::string, int> seen_unit;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    ++row;
    const auto f = detail::split_csv(line);
    if (f.size() != header.size())
      throw ParseError(row, "expected " + std::to_string(header.size()) + " fields, found " + std::to_string(f.size()));
    const std::string& uid = f[col["unit_id"]];
    if (uid.empty()) throw ParseError(row, "empty unit_id");
    long t = 0;
    if (!detail::parse_long(f[col["t_index"]], t)) throw ParseError(row, "non-integer t_index");
    double y = 0, x = 0, pop = 0;
    if (!detail::parse_double(f[col["y"]], y) || std::isnan(y)) throw ParseError(row, "non-numeric count");
    if (y < 0) throw ParseError(row, "negative count");
    if (y != std::floor(y)) throw ParseError(row, "non-integer count");
    if (!detail::parse_double(f[col["exposure"]], x)) throw ParseError(row, "non-numeric exposure");
    if (!std::isfinite(x)) throw ParseError(row, "NaN exposure");
    if (!detail::parse_double(f[col["offset_population"]], pop) || !(pop > 0) || !std::isfinite(pop))
      throw ParseError(row, "offset_population must be a positive number");

    int j;
    auto it = seen_unit.find(uid);
    if (it == seen_unit.end()) {
      j = static_cast<int>(p.unit_ids.size());
      seen_unit[uid] = j;
      p.unit_ids.push_back(uid);
    } else {
      j = it->second;
      if (j != p.unit.back()) throw ParseError(row, "rows of unit '" + uid + "' are not contiguous");
      if (t == p.t.back()) throw ParseError(row, "duplicate row for unit '" + uid + "', t_index " + std::to_string(t));
      if (t != p.t.back() + 1)
        throw ParseError(row, "non-contiguous t_index for unit '" + uid + "' (" + std::to_string(p.t.back()) +
                                  " followed by " + std::to_string(t) + ")");
    }
    p.unit.push_back(j);
    p.t.push_back(t);
    ys.push_back(y);
    xs.push_back(x);
    offs.push_back(std::log(pop));
    std::vector<double> cv;
    for (auto c : cov_cols) {
      double v = 0;
      if (!detail::parse_double(f[c], v) || !std::isfinite(v))
        throw ParseError(row, "non-numeric covariate '" + header[c] + "'");
      cv.push_back(v);
    }
    covs.push_back(std::move(cv));
    if (has_date) dates.push_back(detail::parse_date(f[col["date"]], row));
  }
  if (row == 0) throw ParseError(0, "no data rows");

  const auto n = static_cast<Eigen::Index>(row);
  p.y = Eigen::Map<Eigen::VectorXd>(ys.data(), n);
  p.exposure = Eigen::Map<Eigen::VectorXd>(xs.data(), n);
  p.offset = Eigen::Map<Eigen::VectorXd>(offs.data(), n);

  std::vector<std::vector<double>> extra_cols;
  if (has_date) {
    using namespace std::chrono;
    static const char* dow_names[] = {"dow_tue", "dow_wed", "dow_thu", "dow_fri", "dow_sat", "dow_sun"};
    std::vector<double> doy(dates.size());
    std::set<int> years;
    std::vector<std::vector<double>> dow(6, std::vector<double>(dates.size(), 0.0));
    for (std::size_t r = 0; r < dates.size(); ++r) {
      const sys_days sd{dates[r]};
      const unsigned wd = weekday{sd}.iso_encoding();  // 1 = Monday
      if (wd > 1) dow[wd - 2][r] = 1.0;
      const sys_days jan1{dates[r].year() / January / 1};
      doy[r] = static_cast<double>((sd - jan1).count() + 1);
      years.insert(static_cast<int>(dates[r].year()));
    }
    for (int k = 0; k < 6; ++k) {
      p.covariate_names.push_back(dow_names[k]);
      extra_cols.push_back(dow[static_cast<std::size_t>(k)]);
    }
    const Eigen::MatrixXd season = natural_cubic_eval(doy, 3, {1.0, 366.0}).values;
    for (int y : years) {
      for (int k = 0; k < 3; ++k) {
        std::vector<double> c(dates.size(), 0.0);
        for (std::size_t r = 0; r < dates.size(); ++r)
          if (static_cast<int>(dates[r].year()) == y) c[r] = season(static_cast<Eigen::Index>(r), k);
        p.covariate_names.push_back("season" + std::to_string(k + 1) + "_" + std::to_string(y));
        extra_cols.push_back(std::move(c));
      }
    }
  }
  const auto n_cov = static_cast<Eigen::Index>(cov_cols.size() + extra_cols.size());
  p.covariates.resize(n, n_cov);
  for (Eigen::Index r = 0; r < n; ++r) {
    Eigen::Index c = 0;
    for (double v : covs[static_cast<std::size_t>(r)]) p.covariates(r, c++) = v;
    for (const auto& e : extra_cols) p.covariates(r, c++) = e[static_cast<std::size_t>(r)];
  }
  p.index_series();
  p.validate();
  return p;
}

inline PanelData ingest_panel_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open panel file '" + path + "'");
  return ingest_panel(in);
}

/// Writes the panel in the ingest format (population = exp(offset)).
inline void write_panel_csv(std::ostream& out, const PanelData& p) {
  out << "unit_id,t_index,y,exposure,offset_population";
  for (const auto& n : p.covariate_names) out << ',' << n;
  out << '\n';
  out.precision(17);
  for (std::size_t r = 0; r < p.n_rows(); ++r) {
    const auto i = static_cast<Eigen::Index>(r);
    out << p.unit_ids[static_cast<std::size_t>(p.unit[r])] << ',' << p.t[r] << ',' << p.y[i] << ',' << p.exposure[i]
        << ',' << std::exp(p.offset[i]);
    for (Eigen::Index c = 0; c < p.covariates.cols(); ++c) out << ',' << p.covariates(i, c);
    out << '\n';
  }
}

/// Flat key=value configuration. '#' starts a comment; blank lines are ignored.
using ConfigMap = std::map<std::string, std::string>;

inline ConfigMap parse_config(std::istream& in) {
  ConfigMap cfg;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(n, "expected key=value");
    const std::string key = detail::trim(line.substr(0, eq));
    if (key.empty()) throw ParseError(n, "empty key");
    cfg[key] = detail::trim(line.substr(eq + 1));
  }
  return cfg;
}

inline ConfigMap parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open config file '" + path + "'");
  return parse_config(in);
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(const std::string& data, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Hash of the canonical "key=value\n" listing (keys sorted).
inline std::string config_hash(const ConfigMap& cfg) {
  std::string canon;
  for (const auto& [k, v] : cfg) canon += k + "=" + v + "\n";
  return hex64(fnv1a(canon));
}

inline std::string file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return hex64(fnv1a(ss.str()));
}

/// Writes `content` to a temporary sibling and renames it over `path`.
inline void atomic_write(const std::filesystem::path& path, const std::string& content) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::io, "cannot write '" + tmp.string() + "'");
    out << content;
    out.flush();
    if (!out) throw Error(ErrorKind::io, "write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorKind::io, "cannot rename '" + tmp.string() + "': " + ec.message());
}

}  // namespace dlnmlps

#endif  // DLNMLPS_IO_HPP
