#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "freegnn/csv.hpp"
#include "freegnn/data/dataset.hpp"
#include "freegnn/data/preprocess.hpp"

namespace freegnn {

class IngestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Field parsing
// ---------------------------------------------------------------------------

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  return s;
}

enum class FieldStatus { ok, missing, invalid };

/// Empty, "NA", "NaN" and "null" count as missing; anything else must be a number.
inline FieldStatus parse_number(std::string_view text, double& out) {
  text = trim(text);
  if (text.empty() || text == "NA" || text == "NaN" || text == "nan" || text == "null") return FieldStatus::missing;
  if (text.front() == '+') text.remove_prefix(1);
  const auto res = std::from_chars(text.data(), text.data() + text.size(), out);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size() || !std::isfinite(out)) return FieldStatus::invalid;
  return FieldStatus::ok;
}

/// Days since 1970-01-01 for a proleptic Gregorian date.
constexpr long days_from_civil(long y, unsigned m, unsigned d) {
  y -= m <= 2;
  const long era = (y >= 0 ? y : y - 399) / 400;
  const auto yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<long>(doe) - 719468;
}

/// strptime subset: %Y %m %d %H %M %S and literal characters. Fields are
/// fixed width when the next format character is another directive (as in
/// %Y%m%d%H), otherwise 1..4 digits. Result is seconds since the epoch, UTC.
inline std::optional<double> parse_time(std::string_view text, std::string_view format) {
  text = trim(text);
  if (format == "epoch") {
    double v;
    return parse_number(text, v) == FieldStatus::ok ? std::optional<double>(v) : std::nullopt;
  }
  long Y = 1970, m = 1, d = 1, H = 0, M = 0, S = 0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < format.size(); ++i) {
    const char c = format[i];
    if (c != '%') {
      if (pos >= text.size() || text[pos] != c) return std::nullopt;
      ++pos;
      continue;
    }
    if (++i >= format.size()) return std::nullopt;
    const char spec = format[i];
    const bool packed = i + 1 < format.size() && format[i + 1] == '%';
    const std::size_t width = spec == 'Y' ? 4 : 2;
    std::size_t end = pos;
    while (end < text.size() && end - pos < (packed ? width : 4) && text[end] >= '0' && text[end] <= '9') ++end;
    if (end == pos || (packed && end - pos != width)) return std::nullopt;
    long value = 0;
    std::from_chars(text.data() + pos, text.data() + end, value);
    pos = end;
    switch (spec) {
      case 'Y': Y = value; break;
      case 'm': m = value; break;
      case 'd': d = value; break;
      case 'H': H = value; break;
      case 'M': M = value; break;
      case 'S': S = value; break;
      default: return std::nullopt;
    }
  }
  if (pos != text.size()) return std::nullopt;
  static constexpr int mdays[] = {31, 29, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
  if (m < 1 || m > 12 || d < 1 || d > mdays[m - 1] || H > 23 || M > 59 || S > 60) return std::nullopt;
  const long days = days_from_civil(Y, static_cast<unsigned>(m), static_cast<unsigned>(d));
  return static_cast<double>(days) * 86400.0 + static_cast<double>(H * 3600 + M * 60 + S);
}

inline const std::vector<std::string>& default_time_formats() {
  static const std::vector<std::string> formats = {
      "%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d",
      "%d-%m-%Y %H:%M",    "%d %m %Y %H:%M", "%Y%m%d%H",          "epoch"};
  return formats;
}

inline std::optional<double> parse_time_any(std::string_view text, const std::vector<std::string>& formats) {
  for (const auto& f : formats)
    if (auto t = parse_time(text, f)) return t;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Long-format records and assembly into a Dataset
// ---------------------------------------------------------------------------

struct RawRecord {
  double time = 0.0;
  std::string site;
  std::optional<double> target;
  std::vector<std::optional<double>> numeric;
  std::vector<std::optional<std::string>> categorical;
};

struct IngestOptions {
  double train_ratio = 0.8;      // portion whose statistics fill gaps and freeze category sets
  bool time_feature = false;     // append the normalised timestamp as a feature
  double max_bad_fraction = 0.01;
};

struct IngestReport {
  std::string schema;
  std::size_t rows_read = 0;
  std::size_t rows_unparseable = 0;
  std::size_t duplicates_removed = 0;
  std::size_t missing_target_dropped = 0;
  std::size_t imputed_cells = 0;
  std::size_t dropped_grid_points = 0;
  std::size_t segments = 0;
  std::vector<std::string> warnings;

  nlohmann::json to_json() const {
    return {{"schema", schema},
            {"rows_read", rows_read},
            {"rows_unparseable", rows_unparseable},
            {"duplicates_removed", duplicates_removed},
            {"missing_target_dropped", missing_target_dropped},
            {"imputed_cells", imputed_cells},
            {"dropped_grid_points", dropped_grid_points},
            {"segments", segments},
            {"warnings", warnings}};
  }
};

struct IngestResult {
  Dataset dataset;
  IngestReport report;
};

struct RecordLayout {
  std::vector<std::string> sites;  // known nodes, in node order
  std::vector<std::string> numeric_names;
  std::vector<std::string> categorical_names;
};

inline void check_bad_rows(const IngestReport& r, double max_fraction) {
  if (r.rows_read == 0) throw IngestError("no data rows");
  const double frac = static_cast<double>(r.rows_unparseable) / static_cast<double>(r.rows_read);
  if (frac > max_fraction) {
    throw IngestError(std::to_string(r.rows_unparseable) + " of " + std::to_string(r.rows_read) +
                      " rows are unparseable (limit " + std::to_string(max_fraction * 100.0) + "%)");
  }
}

/// Dedup, drop rows without a target, align to a regular grid (gap policy),
/// impute from training-portion statistics and one-hot the categoricals.
/// Records must appear in time order per site.
inline IngestResult assemble(const std::vector<RawRecord>& records, const RecordLayout& layout, IngestReport report,
                             const IngestOptions& opt) {
  const std::size_t S = layout.sites.size();
  const std::size_t P = layout.numeric_names.size(), C = layout.categorical_names.size();
  std::map<std::string, std::size_t> site_index;
  for (std::size_t s = 0; s < S; ++s) site_index[layout.sites[s]] = s;

  std::vector<std::vector<const RawRecord*>> per_site(S);
  std::vector<std::set<double>> seen(S);
  for (const auto& r : records) {
    const auto it = site_index.find(r.site);
    if (it == site_index.end()) throw IngestError("site '" + r.site + "' is not a known node");
    const auto s = it->second;
    if (!seen[s].insert(r.time).second) {
      ++report.duplicates_removed;
      continue;
    }
    if (!r.target) {
      ++report.missing_target_dropped;
      continue;
    }
    if (!per_site[s].empty() && r.time <= per_site[s].back()->time)
      throw IngestError("timestamps are not increasing for site '" + r.site + "' after removing duplicates");
    per_site[s].push_back(&r);
  }

  std::vector<std::vector<double>> times(S);
  std::vector<double> all_times;
  for (std::size_t s = 0; s < S; ++s) {
    if (per_site[s].empty()) throw IngestError("site '" + layout.sites[s] + "' has no usable rows");
    for (const auto* r : per_site[s]) times[s].push_back(r->time);
    all_times.insert(all_times.end(), times[s].begin(), times[s].end());
  }
  const double freq = infer_frequency(all_times);
  const GridPlan plan = plan_grid(times, freq);
  const std::size_t T = plan.times.size();
  const auto train_end = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(opt.train_ratio * static_cast<double>(T))));
  report.imputed_cells = plan.imputed_cells;
  report.dropped_grid_points = plan.dropped_points;
  report.segments = static_cast<std::size_t>(plan.segment.back()) + 1;

  auto cell = [&](std::size_t s, std::size_t k) -> const RawRecord* {
    const long row = plan.source_row[s][k];
    return row < 0 ? nullptr : per_site[s][static_cast<std::size_t>(row)];
  };

  // Numeric columns: target first, then the declared numerics.
  std::vector<std::vector<std::vector<double>>> num(S, std::vector<std::vector<double>>(P + 1, std::vector<double>(T)));
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t j = 0; j <= P; ++j) {
      NumericColumn col(T);
      for (std::size_t k = 0; k < T; ++k)
        if (const auto* r = cell(s, k)) col[k] = j == 0 ? r->target : r->numeric[j - 1];
      const std::string name = (j == 0 ? std::string("target") : layout.numeric_names[j - 1]) + "@" + layout.sites[s];
      NumericColumn train(col.begin(), col.begin() + static_cast<std::ptrdiff_t>(train_end));
      auto fill = observed_mean(train);
      if (!fill) fill = observed_mean(col);
      if (!fill) throw PreprocessError("column '" + name + "' has no observed values to impute from");
      const auto done = impute_numeric(std::move(col), *fill);
      for (std::size_t k = 0; k < T; ++k) num[s][j][k] = *done[k];
    }
  }

  // Categoricals: mode fill, then one-hot with categories frozen on the training portion.
  std::vector<OneHotEncoder> encoders;
  std::vector<std::vector<std::vector<std::string>>> cats(S, std::vector<std::vector<std::string>>(C));
  for (std::size_t j = 0; j < C; ++j) {
    std::vector<std::string> train_values;
    for (std::size_t s = 0; s < S; ++s) {
      CategoricalColumn col(T);
      for (std::size_t k = 0; k < T; ++k)
        if (const auto* r = cell(s, k)) col[k] = r->categorical[j];
      CategoricalColumn train(col.begin(), col.begin() + static_cast<std::ptrdiff_t>(train_end));
      auto mode = observed_mode(train);
      if (!mode) mode = observed_mode(col);
      if (!mode) throw PreprocessError("column '" + layout.categorical_names[j] + "@" + layout.sites[s] + "' has no observed categories");
      for (std::size_t k = 0; k < T; ++k) {
        cats[s][j].push_back(col[k] ? *col[k] : *mode);
        if (k < train_end) train_values.push_back(cats[s][j].back());
      }
    }
    encoders.push_back(OneHotEncoder::fit(train_values, layout.categorical_names[j]));
    if (encoders.back().degenerate())
      report.warnings.push_back("categorical column '" + layout.categorical_names[j] + "' has a single category");
  }

  Dataset ds;
  ds.name = report.schema;
  ds.site_names = layout.sites;
  ds.timestamps = plan.times;
  ds.segment = plan.segment;
  ds.frequency_seconds = freq;
  ds.feature_names.push_back("power");
  ds.feature_kinds.push_back(FeatureKind::power);
  for (const auto& n : layout.numeric_names) {
    ds.feature_names.push_back(n);
    ds.feature_kinds.push_back(FeatureKind::numeric);
  }
  for (const auto& e : encoders)
    for (const auto& n : e.column_names()) {
      ds.feature_names.push_back(n);
      ds.feature_kinds.push_back(FeatureKind::passthrough);
    }
  std::optional<TimestampNormalizer> tn;
  if (opt.time_feature) {
    tn = TimestampNormalizer::fit(std::vector<double>(plan.times.begin(), plan.times.begin() + static_cast<std::ptrdiff_t>(std::max<std::size_t>(train_end, 2))));
    ds.feature_names.push_back("time");
    ds.feature_kinds.push_back(FeatureKind::passthrough);
  }

  const std::size_t d = ds.feature_names.size();
  Tensor X({T, S, d});
  Mat Y(static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(S));
  for (std::size_t k = 0; k < T; ++k) {
    for (std::size_t s = 0; s < S; ++s) {
      std::size_t f = 0;
      for (std::size_t j = 0; j <= P; ++j) X.at(k, s, f++) = num[s][j][k];
      for (std::size_t j = 0; j < C; ++j) {
        const auto hot = encoders[j].encode(cats[s][j][k]);
        for (double h : hot) X.at(k, s, f++) = h;
      }
      if (tn) X.at(k, s, f++) = (*tn)(plan.times[k]);
      Y(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(s)) = num[s][0][k];
    }
  }
  ds.set_values(std::move(X), std::move(Y));
  ds.segment = plan.segment;
  return {std::move(ds), std::move(report)};
}

// ---------------------------------------------------------------------------
// Schemas
// ---------------------------------------------------------------------------

namespace detail {

inline std::size_t require_column(const csv::Table& t, const std::string& name, const std::string& file) {
  const auto i = t.column(name);
  if (i < 0) throw IngestError(file + ": missing column '" + name + "'");
  return static_cast<std::size_t>(i);
}

inline std::filesystem::path find_file(const std::filesystem::path& dir, const std::vector<std::string>& candidates) {
  for (const auto& c : candidates)
    if (std::filesystem::exists(dir / c)) return dir / c;
  throw IngestError(dir.string() + ": none of the expected files found (" + candidates.front() + ")");
}

}  // namespace detail

/// GEFCom2012 wind track: <dir>/train.csv (date, wp1..wpK) and
/// <dir>/windforecasts_wf{k}.csv (date, hors, u, v, ws, wd). For every target
/// hour the most recent forecast issue (smallest positive lead) is used.
inline IngestResult ingest_gefcom2012(const std::filesystem::path& dir, const IngestOptions& opt = {}) {
  IngestReport report;
  report.schema = "gefcom2012-wind";
  const auto train_path = detail::find_file(dir, {"train.csv"});
  const auto train = csv::read_file(train_path.string());
  const auto date_col = detail::require_column(train, "date", train_path.string());

  RecordLayout layout;
  layout.numeric_names = {"u", "v", "ws", "wd"};
  std::vector<std::size_t> wp_cols;
  for (std::size_t k = 1;; ++k) {
    const auto c = train.column("wp" + std::to_string(k));
    if (c < 0) break;
    wp_cols.push_back(static_cast<std::size_t>(c));
    layout.sites.push_back("wf" + std::to_string(k));
  }
  if (wp_cols.empty()) throw IngestError(train_path.string() + ": no wp1.. columns");

  // Forecast lookup: site -> target hour -> (lead, u, v, ws, wd)
  std::vector<std::map<double, std::pair<double, std::array<std::optional<double>, 4>>>> nwp(wp_cols.size());
  std::size_t nwp_rows = 0, nwp_bad = 0;
  for (std::size_t k = 0; k < wp_cols.size(); ++k) {
    const auto path = dir / ("windforecasts_wf" + std::to_string(k + 1) + ".csv");
    if (!std::filesystem::exists(path)) {
      report.warnings.push_back("missing " + path.filename().string() + "; weather features imputed");
      continue;
    }
    const auto t = csv::read_file(path.string());
    const auto c_date = detail::require_column(t, "date", path.string());
    const auto c_hors = detail::require_column(t, "hors", path.string());
    const std::size_t c_met[4] = {detail::require_column(t, "u", path.string()), detail::require_column(t, "v", path.string()),
                                  detail::require_column(t, "ws", path.string()), detail::require_column(t, "wd", path.string())};
    for (const auto& row : t.rows) {
      ++nwp_rows;
      double hors = 0;
      const auto issue = row.size() == t.header.size() ? parse_time(row[c_date], "%Y%m%d%H") : std::nullopt;
      if (!issue || parse_number(row[c_hors], hors) != FieldStatus::ok || hors <= 0) {
        ++nwp_bad;
        continue;
      }
      std::array<std::optional<double>, 4> met;
      bool bad = false;
      for (int j = 0; j < 4; ++j) {
        double v;
        const auto st = parse_number(row[c_met[j]], v);
        if (st == FieldStatus::invalid) bad = true;
        if (st == FieldStatus::ok) met[static_cast<std::size_t>(j)] = v;
      }
      if (bad) {
        ++nwp_bad;
        continue;
      }
      const double target_time = *issue + hors * 3600.0;
      auto [it, inserted] = nwp[k].try_emplace(target_time, hors, met);
      if (!inserted && hors < it->second.first) it->second = {hors, met};
    }
  }
  if (nwp_rows > 0 && static_cast<double>(nwp_bad) / static_cast<double>(nwp_rows) > opt.max_bad_fraction)
    throw IngestError("forecast files: " + std::to_string(nwp_bad) + " of " + std::to_string(nwp_rows) + " rows unparseable");

  std::vector<RawRecord> records;
  for (const auto& row : train.rows) {
    ++report.rows_read;
    const auto time = row.size() == train.header.size() ? parse_time(row[date_col], "%Y%m%d%H") : std::nullopt;
    bool bad = !time;
    std::vector<RawRecord> out;
    for (std::size_t k = 0; k < wp_cols.size() && !bad; ++k) {
      RawRecord r;
      r.time = *time;
      r.site = layout.sites[k];
      double v;
      const auto st = parse_number(row[wp_cols[k]], v);
      if (st == FieldStatus::invalid) bad = true;
      if (st == FieldStatus::ok) r.target = v;
      r.numeric.assign(4, std::nullopt);
      if (const auto f = nwp[k].find(*time); f != nwp[k].end())
        for (std::size_t j = 0; j < 4; ++j) r.numeric[j] = f->second.second[j];
      out.push_back(std::move(r));
    }
    if (bad) {
      ++report.rows_unparseable;
      continue;
    }
    records.insert(records.end(), std::make_move_iterator(out.begin()), std::make_move_iterator(out.end()));
  }
  check_bad_rows(report, opt.max_bad_fraction);
  // train.csv is wide and time-ordered; regroup per site keeps that order.
  std::stable_sort(records.begin(), records.end(), [](const RawRecord& a, const RawRecord& b) { return a.site < b.site; });
  return assemble(records, layout, std::move(report), opt);
}

/// Solar power generation (two plants): <dir>/Plant_{k}_Generation_Data.csv and
/// <dir>/Plant_{k}_Weather_Sensor_Data.csv. Inverter rows are summed per plant
/// and timestamp; AC power is the target.
inline IngestResult ingest_solar_pv(const std::filesystem::path& dir, const IngestOptions& opt = {}) {
  IngestReport report;
  report.schema = "solar-pv";
  RecordLayout layout;
  layout.numeric_names = {"dc_power", "ambient_temperature", "module_temperature", "irradiation"};
  std::vector<RawRecord> records;
  const std::vector<std::string> formats = {"%d-%m-%Y %H:%M", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M"};

  for (int plant = 1; plant <= 9; ++plant) {
    const auto gen_path = dir / ("Plant_" + std::to_string(plant) + "_Generation_Data.csv");
    if (!std::filesystem::exists(gen_path)) continue;
    const auto site = "plant" + std::to_string(plant);
    layout.sites.push_back(site);

    const auto gen = csv::read_file(gen_path.string());
    const auto c_time = detail::require_column(gen, "DATE_TIME", gen_path.string());
    const auto c_dc = detail::require_column(gen, "DC_POWER", gen_path.string());
    const auto c_ac = detail::require_column(gen, "AC_POWER", gen_path.string());
    const auto c_key = detail::require_column(gen, "SOURCE_KEY", gen_path.string());
    // time -> (ac sum, dc sum)
    std::map<double, std::array<double, 2>> sums;
    std::set<double> ac_missing;
    std::set<std::pair<double, std::string>> seen_rows;
    double last_time = -INFINITY;
    for (const auto& row : gen.rows) {
      ++report.rows_read;
      const auto t = row.size() == gen.header.size() ? parse_time_any(row[c_time], formats) : std::nullopt;
      double ac = 0, dc = 0;
      const auto st_ac = t ? parse_number(row[c_ac], ac) : FieldStatus::invalid;
      const auto st_dc = t ? parse_number(row[c_dc], dc) : FieldStatus::invalid;
      if (!t || st_ac == FieldStatus::invalid || st_dc == FieldStatus::invalid) {
        ++report.rows_unparseable;
        continue;
      }
      if (!seen_rows.emplace(*t, row[c_key]).second) {
        ++report.duplicates_removed;
        continue;
      }
      if (*t < last_time) throw IngestError(gen_path.string() + ": timestamps are not increasing");
      last_time = *t;
      auto& acc = sums[*t];
      if (st_ac == FieldStatus::missing) ac_missing.insert(*t);
      else acc[0] += ac;
      if (st_dc == FieldStatus::ok) acc[1] += dc;
    }

    std::map<double, std::array<std::optional<double>, 3>> weather;
    const auto wx_path = dir / ("Plant_" + std::to_string(plant) + "_Weather_Sensor_Data.csv");
    if (std::filesystem::exists(wx_path)) {
      const auto wx = csv::read_file(wx_path.string());
      const auto w_time = detail::require_column(wx, "DATE_TIME", wx_path.string());
      const std::size_t w_cols[3] = {detail::require_column(wx, "AMBIENT_TEMPERATURE", wx_path.string()),
                                     detail::require_column(wx, "MODULE_TEMPERATURE", wx_path.string()),
                                     detail::require_column(wx, "IRRADIATION", wx_path.string())};
      for (const auto& row : wx.rows) {
        ++report.rows_read;
        const auto t = row.size() == wx.header.size() ? parse_time_any(row[w_time], formats) : std::nullopt;
        if (!t) {
          ++report.rows_unparseable;
          continue;
        }
        std::array<std::optional<double>, 3> vals;
        bool bad = false;
        for (std::size_t j = 0; j < 3; ++j) {
          double v;
          const auto st = parse_number(row[w_cols[j]], v);
          if (st == FieldStatus::invalid) bad = true;
          if (st == FieldStatus::ok) vals[j] = v;
        }
        if (bad) {
          ++report.rows_unparseable;
          continue;
        }
        if (!weather.try_emplace(*t, vals).second) ++report.duplicates_removed;
      }
    } else {
      report.warnings.push_back("missing " + wx_path.filename().string() + "; weather features imputed");
    }

    for (const auto& [t, acc] : sums) {
      RawRecord r;
      r.time = t;
      r.site = site;
      if (!ac_missing.count(t)) r.target = acc[0];
      r.numeric = {acc[1], std::nullopt, std::nullopt, std::nullopt};
      if (const auto w = weather.find(t); w != weather.end())
        for (std::size_t j = 0; j < 3; ++j) r.numeric[j + 1] = w->second[j];
      records.push_back(std::move(r));
    }
  }
  if (layout.sites.empty()) throw IngestError(dir.string() + ": no Plant_<k>_Generation_Data.csv files");
  check_bad_rows(report, opt.max_bad_fraction);
  return assemble(records, layout, std::move(report), opt);
}

/// Single-turbine SCADA export (T1.csv): one node; wind speed and direction as features.
inline IngestResult ingest_wind_scada(const std::filesystem::path& path, const IngestOptions& opt = {}) {
  IngestReport report;
  report.schema = "wind-scada";
  const auto file = std::filesystem::is_directory(path) ? detail::find_file(path, {"T1.csv"}) : path;
  const auto t = csv::read_file(file.string());
  const auto c_time = detail::require_column(t, "Date/Time", file.string());
  const auto c_power = detail::require_column(t, "LV ActivePower (kW)", file.string());
  const auto c_speed = detail::require_column(t, "Wind Speed (m/s)", file.string());
  const auto c_dir = detail::require_column(t, "Wind Direction (\xC2\xB0)", file.string());
  RecordLayout layout;
  layout.sites = {"T1"};
  layout.numeric_names = {"wind_speed", "wind_direction"};
  std::vector<RawRecord> records;
  const std::vector<std::string> formats = {"%d %m %Y %H:%M", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M"};
  for (const auto& row : t.rows) {
    ++report.rows_read;
    const auto time = row.size() == t.header.size() ? parse_time_any(row[c_time], formats) : std::nullopt;
    RawRecord r;
    bool bad = !time;
    if (time) {
      r.time = *time;
      r.site = "T1";
      double v;
      auto st = parse_number(row[c_power], v);
      bad |= st == FieldStatus::invalid;
      if (st == FieldStatus::ok) r.target = v;
      for (auto c : {c_speed, c_dir}) {
        st = parse_number(row[c], v);
        bad |= st == FieldStatus::invalid;
        r.numeric.push_back(st == FieldStatus::ok ? std::optional<double>(v) : std::nullopt);
      }
    }
    if (bad) {
      ++report.rows_unparseable;
      continue;
    }
    records.push_back(std::move(r));
  }
  check_bad_rows(report, opt.max_bad_fraction);
  return assemble(records, layout, std::move(report), opt);
}

/// User schema: {"columns": {"<csv column>": "timestamp|site|target|numeric|categorical", ...},
/// "timestamp_format": "...", "sites": [...]}. Long format, one row per (time, site).
struct UserSchema {
  std::string timestamp_column;
  std::string site_column;  // empty: single node
  std::string target_column;
  std::vector<std::string> numeric_columns;
  std::vector<std::string> categorical_columns;
  std::vector<std::string> timestamp_formats;
  std::vector<std::string> sites;

  static UserSchema from_json(const nlohmann::ordered_json& j) {
    for (auto it = j.begin(); it != j.end(); ++it)
      if (it.key() != "columns" && it.key() != "timestamp_format" && it.key() != "sites")
        throw IngestError("schema: unknown key '" + it.key() + "'");
    UserSchema s;
    if (!j.contains("columns") || !j["columns"].is_object()) throw IngestError("schema: 'columns' object is required");
    for (auto it = j["columns"].begin(); it != j["columns"].end(); ++it) {
      const auto role = it.value().get<std::string>();
      auto set_once = [&](std::string& slot) {
        if (!slot.empty()) throw IngestError("schema: more than one '" + role + "' column");
        slot = it.key();
      };
      if (role == "timestamp") set_once(s.timestamp_column);
      else if (role == "site") set_once(s.site_column);
      else if (role == "target") set_once(s.target_column);
      else if (role == "numeric") s.numeric_columns.push_back(it.key());
      else if (role == "categorical") s.categorical_columns.push_back(it.key());
      else throw IngestError("schema: column '" + it.key() + "' has unknown role '" + role + "'");
    }
    if (s.timestamp_column.empty()) throw IngestError("schema: a 'timestamp' column is required");
    if (s.target_column.empty()) throw IngestError("schema: a 'target' column is required");
    if (j.contains("timestamp_format")) s.timestamp_formats = {j["timestamp_format"].get<std::string>()};
    else s.timestamp_formats = default_time_formats();
    if (j.contains("sites")) s.sites = j["sites"].get<std::vector<std::string>>();
    return s;
  }

  static UserSchema load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IngestError("cannot open schema '" + path.string() + "'");
    return from_json(nlohmann::ordered_json::parse(in));
  }
};

inline IngestResult ingest_user(const std::filesystem::path& path, const UserSchema& schema, const IngestOptions& opt = {}) {
  IngestReport report;
  report.schema = "user";
  const auto t = csv::read_file(path.string());
  const auto c_time = detail::require_column(t, schema.timestamp_column, path.string());
  const auto c_target = detail::require_column(t, schema.target_column, path.string());
  const std::ptrdiff_t c_site = schema.site_column.empty() ? -1 : static_cast<std::ptrdiff_t>(detail::require_column(t, schema.site_column, path.string()));
  std::vector<std::size_t> c_num, c_cat;
  for (const auto& n : schema.numeric_columns) c_num.push_back(detail::require_column(t, n, path.string()));
  for (const auto& n : schema.categorical_columns) c_cat.push_back(detail::require_column(t, n, path.string()));

  RecordLayout layout;
  layout.numeric_names = schema.numeric_columns;
  layout.categorical_names = schema.categorical_columns;
  std::set<std::string> known(schema.sites.begin(), schema.sites.end());
  std::vector<std::string> order = schema.sites;

  std::vector<RawRecord> records;
  for (const auto& row : t.rows) {
    ++report.rows_read;
    const auto time = row.size() == t.header.size() ? parse_time_any(row[c_time], schema.timestamp_formats) : std::nullopt;
    if (!time) {
      ++report.rows_unparseable;
      continue;
    }
    RawRecord r;
    r.time = *time;
    r.site = c_site >= 0 ? std::string(trim(row[static_cast<std::size_t>(c_site)])) : "site0";
    bool bad = r.site.empty();
    if (!schema.sites.empty() && !known.count(r.site)) bad = true;  // not a declared node
    double v;
    auto st = parse_number(row[c_target], v);
    bad |= st == FieldStatus::invalid;
    if (st == FieldStatus::ok) r.target = v;
    for (auto c : c_num) {
      st = parse_number(row[c], v);
      bad |= st == FieldStatus::invalid;
      r.numeric.push_back(st == FieldStatus::ok ? std::optional<double>(v) : std::nullopt);
    }
    for (auto c : c_cat) {
      const auto s = trim(row[c]);
      r.categorical.push_back(s.empty() ? std::nullopt : std::optional<std::string>(std::string(s)));
    }
    if (bad) {
      ++report.rows_unparseable;
      continue;
    }
    if (schema.sites.empty() && known.insert(r.site).second) order.push_back(r.site);
    records.push_back(std::move(r));
  }
  check_bad_rows(report, opt.max_bad_fraction);
  layout.sites = order;
  std::stable_sort(records.begin(), records.end(), [&](const RawRecord& a, const RawRecord& b) {
    return std::find(order.begin(), order.end(), a.site) < std::find(order.begin(), order.end(), b.site);
  });
  return assemble(records, layout, std::move(report), opt);
}

inline const std::vector<std::string>& builtin_schemas() {
  static const std::vector<std::string> names = {"gefcom2012-wind", "solar-pv", "wind-scada"};
  return names;
}

/// schema is a built-in name or the path of a user schema JSON file.
inline IngestResult ingest_csv(const std::filesystem::path& path, const std::string& schema, const IngestOptions& opt = {}) {
  if (schema == "gefcom2012-wind") return ingest_gefcom2012(path, opt);
  if (schema == "solar-pv") return ingest_solar_pv(path, opt);
  if (schema == "wind-scada") return ingest_wind_scada(path, opt);
  if (schema.size() > 5 && schema.ends_with(".json") && std::filesystem::exists(schema)) return ingest_user(path, UserSchema::load(schema), opt);
  throw IngestError("unknown schema '" + schema + "' (expected gefcom2012-wind, solar-pv, wind-scada or a schema .json file)");
}

// ---------------------------------------------------------------------------
// Canonical dataset files: long CSV (timestamp, site, segment, target, features...)
// plus a JSON sidecar with feature kinds and frequency.
// ---------------------------------------------------------------------------

inline std::filesystem::path dataset_meta_path(const std::filesystem::path& csv_path) {
  auto p = csv_path;
  p.replace_extension(".meta.json");
  return p;
}

inline void write_dataset(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "timestamp,site,segment,target";
  for (const auto& f : ds.feature_names) out << ',' << csv::escape(f);
  out << '\n';
  const Tensor& X = ds.features();
  const Mat& Y = ds.targets();
  for (std::size_t t = 0; t < ds.length(); ++t)
    for (std::size_t v = 0; v < ds.nodes(); ++v) {
      out << csv::num(ds.timestamps[t]) << ',' << csv::escape(ds.site_names[v]) << ',' << ds.segment[t] << ','
          << csv::num(Y(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(v)));
      for (std::size_t k = 0; k < ds.dims(); ++k) out << ',' << csv::num(X.at(t, v, k));
      out << '\n';
    }
  nlohmann::json meta = {{"name", ds.name},
                         {"sites", ds.site_names},
                         {"features", ds.feature_names},
                         {"frequency_seconds", ds.frequency_seconds}};
  std::vector<std::string> kinds;
  for (auto k : ds.feature_kinds) kinds.push_back(to_string(k));
  meta["kinds"] = kinds;
  std::ofstream m(dataset_meta_path(path), std::ios::binary);
  m << meta.dump(2) << '\n';
}

inline Dataset read_dataset(const std::filesystem::path& path) {
  const auto meta_path = dataset_meta_path(path);
  std::ifstream m(meta_path);
  if (!m) throw IngestError("dataset sidecar '" + meta_path.string() + "' not found");
  const auto meta = nlohmann::json::parse(m);
  Dataset ds;
  ds.name = meta.value("name", std::string("dataset"));
  ds.site_names = meta.at("sites").get<std::vector<std::string>>();
  ds.feature_names = meta.at("features").get<std::vector<std::string>>();
  for (const auto& k : meta.at("kinds").get<std::vector<std::string>>()) ds.feature_kinds.push_back(parse_feature_kind(k));
  ds.frequency_seconds = meta.value("frequency_seconds", 1.0);
  const std::size_t N = ds.site_names.size(), d = ds.feature_names.size();
  if (N == 0 || ds.feature_kinds.size() != d) throw IngestError(meta_path.string() + ": inconsistent metadata");

  const auto t = csv::read_file(path.string());
  if (t.header.size() != 4 + d) throw IngestError(path.string() + ": expected " + std::to_string(4 + d) + " columns");
  if (t.rows.size() % N != 0) throw IngestError(path.string() + ": row count is not a multiple of the site count");
  const std::size_t T = t.rows.size() / N;
  Tensor X({T, N, d});
  Mat Y(static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(N));
  ds.timestamps.resize(T);
  ds.segment.resize(T);
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const std::size_t k = r / N, v = r % N;
    if (row.size() != 4 + d) throw IngestError(path.string() + ": row " + std::to_string(r + 2) + " has the wrong width");
    if (row[1] != ds.site_names[v]) throw IngestError(path.string() + ": row " + std::to_string(r + 2) + " site out of order");
    auto number = [&](const std::string& s) {
      double x;
      if (parse_number(s, x) != FieldStatus::ok) throw IngestError(path.string() + ": row " + std::to_string(r + 2) + " has a non-numeric value");
      return x;
    };
    ds.timestamps[k] = number(row[0]);
    ds.segment[k] = static_cast<int>(number(row[2]));
    Y(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(v)) = number(row[3]);
    for (std::size_t j = 0; j < d; ++j) X.at(k, v, j) = number(row[4 + j]);
  }
  auto segment = ds.segment;
  ds.set_values(std::move(X), std::move(Y));
  ds.segment = std::move(segment);
  return ds;
}

}  // namespace freegnn
