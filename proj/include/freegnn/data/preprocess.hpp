#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace freegnn {

using NumericColumn = std::vector<std::optional<double>>;
using CategoricalColumn = std::vector<std::optional<std::string>>;

class PreprocessError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::optional<double> observed_mean(const NumericColumn& col) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& v : col)
    if (v) {
      sum += *v;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

inline NumericColumn impute_numeric(NumericColumn col, double fill) {
  for (auto& v : col)
    if (!v) v = fill;
  return col;
}

/// Missing entries become the mean of the observed ones.
inline NumericColumn impute_numeric(NumericColumn col, const std::string& name = "column") {
  const auto m = observed_mean(col);
  if (!m) throw PreprocessError("column '" + name + "' has no observed values to impute from");
  return impute_numeric(std::move(col), *m);
}

/// Most frequent observed label; the lexicographically smallest wins a tie.
inline std::optional<std::string> observed_mode(const CategoricalColumn& col) {
  std::map<std::string, std::size_t> counts;
  for (const auto& v : col)
    if (v) ++counts[*v];
  std::optional<std::string> best;
  std::size_t best_count = 0;
  for (const auto& [label, count] : counts) {  // std::map iterates in lexicographic order
    if (count > best_count) {
      best = label;
      best_count = count;
    }
  }
  return best;
}

inline CategoricalColumn impute_categorical(CategoricalColumn col, const std::string& name = "column") {
  const auto mode = observed_mode(col);
  if (!mode) throw PreprocessError("column '" + name + "' has no observed categories to impute from");
  for (auto& v : col)
    if (!v) v = *mode;
  return col;
}

/// Category set frozen at fit time; transform emits one indicator column per
/// category in that fixed order.
struct OneHotEncoder {
  std::string name;
  std::vector<std::string> categories;

  static OneHotEncoder fit(const std::vector<std::string>& values, std::string name = "column") {
    OneHotEncoder enc;
    enc.name = std::move(name);
    enc.categories = values;
    std::sort(enc.categories.begin(), enc.categories.end());
    enc.categories.erase(std::unique(enc.categories.begin(), enc.categories.end()), enc.categories.end());
    if (enc.categories.empty()) throw PreprocessError("column '" + enc.name + "' has no categories");
    return enc;
  }

  bool degenerate() const noexcept { return categories.size() == 1; }
  std::size_t width() const noexcept { return categories.size(); }

  std::size_t index_of(const std::string& value) const {
    const auto it = std::lower_bound(categories.begin(), categories.end(), value);
    if (it == categories.end() || *it != value)
      throw PreprocessError("column '" + name + "': category '" + value + "' was not seen during training");
    return static_cast<std::size_t>(it - categories.begin());
  }

  std::vector<double> encode(const std::string& value) const {
    std::vector<double> row(width(), 0.0);
    row[index_of(value)] = 1.0;
    return row;
  }

  std::vector<std::vector<double>> transform(const std::vector<std::string>& values) const {
    std::vector<std::vector<double>> out;
    out.reserve(values.size());
    for (const auto& v : values) out.push_back(encode(v));
    return out;
  }

  std::vector<std::string> column_names() const {
    std::vector<std::string> names;
    for (const auto& c : categories) names.push_back(name + "=" + c);
    return names;
  }
};

/// Explicit category order, e.g. {A, B, C}; used when the order is given rather than learned.
inline std::vector<std::vector<double>> one_hot(const std::vector<std::string>& values, const std::vector<std::string>& categories) {
  std::vector<std::vector<double>> out;
  out.reserve(values.size());
  for (const auto& v : values) {
    const auto it = std::find(categories.begin(), categories.end(), v);
    if (it == categories.end()) throw PreprocessError("category '" + v + "' is not in the category list");
    std::vector<double> row(categories.size(), 0.0);
    row[static_cast<std::size_t>(it - categories.begin())] = 1.0;
    out.push_back(std::move(row));
  }
  return out;
}

/// Maps t to (t - min)/(max - min) with min/max frozen on the training span.
/// Later stream times extrapolate past 1, which is intended.
struct TimestampNormalizer {
  double t_min = 0.0;
  double t_max = 1.0;

  static TimestampNormalizer fit(const std::vector<double>& times) {
    if (times.empty()) throw PreprocessError("cannot normalise an empty timestamp list");
    const auto [lo, hi] = std::minmax_element(times.begin(), times.end());
    if (!(*hi > *lo)) throw PreprocessError("timestamps are constant; normalisation is undefined");
    return TimestampNormalizer{*lo, *hi};
  }

  double operator()(double t) const { return (t - t_min) / (t_max - t_min); }

  std::vector<double> transform(const std::vector<double>& times) const {
    std::vector<double> out(times.size());
    std::transform(times.begin(), times.end(), out.begin(), *this);
    return out;
  }
};

inline std::vector<double> normalize_timestamps(const std::vector<double>& times) {
  return TimestampNormalizer::fit(times).transform(times);
}

// ---------------------------------------------------------------------------
// Regular time grid with the gap policy: short holes are filled, longer ones
// split the stream into segments.
// ---------------------------------------------------------------------------

inline constexpr std::size_t kMaxImputedGap = 3;

struct GridPlan {
  std::vector<double> times;     // kept grid points
  std::vector<int> segment;      // segment id per kept point
  std::vector<std::vector<long>> source_row;  // [site][kept point] -> input index or -1 when imputed
  double frequency = 0.0;
  std::size_t imputed_cells = 0;
  std::size_t dropped_points = 0;
};

/// Most common positive spacing between consecutive unique timestamps.
inline double infer_frequency(std::vector<double> times) {
  std::sort(times.begin(), times.end());
  times.erase(std::unique(times.begin(), times.end()), times.end());
  if (times.size() < 2) throw PreprocessError("need at least two distinct timestamps to infer a frequency");
  std::map<double, std::size_t> counts;
  for (std::size_t i = 1; i < times.size(); ++i) ++counts[times[i] - times[i - 1]];
  double best = 0.0;
  std::size_t best_count = 0;
  for (const auto& [delta, count] : counts)
    if (count > best_count) {
      best = delta;
      best_count = count;
    }
  return best;
}

/// per_site_times[s] must be strictly increasing. Grid points where any site has
/// a hole longer than kMaxImputedGap are dropped and start a new segment.
inline GridPlan plan_grid(const std::vector<std::vector<double>>& per_site_times, double frequency) {
  if (per_site_times.empty()) throw PreprocessError("no sites to align");
  if (!(frequency > 0.0)) throw PreprocessError("frequency must be positive");
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& ts : per_site_times) {
    if (ts.empty()) throw PreprocessError("a site has no rows after cleaning");
    lo = std::min(lo, ts.front());
    hi = std::max(hi, ts.back());
  }
  const auto steps = static_cast<std::size_t>(std::llround((hi - lo) / frequency)) + 1;
  const std::size_t S = per_site_times.size();

  // present[s][k]: input row index for grid point k, or -1.
  std::vector<std::vector<long>> present(S, std::vector<long>(steps, -1));
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t i = 0; i < per_site_times[s].size(); ++i) {
      const double pos = (per_site_times[s][i] - lo) / frequency;
      const auto k = std::llround(pos);
      if (std::abs(pos - static_cast<double>(k)) > 1e-6) {
        throw PreprocessError("timestamp off the regular grid (spacing " + std::to_string(frequency) + ")");
      }
      present[s][static_cast<std::size_t>(k)] = static_cast<long>(i);
    }
  }

  std::vector<bool> drop(steps, false);
  for (std::size_t s = 0; s < S; ++s) {
    std::size_t k = 0;
    while (k < steps) {
      if (present[s][k] >= 0) {
        ++k;
        continue;
      }
      std::size_t e = k;
      while (e < steps && present[s][e] < 0) ++e;
      if (e - k > kMaxImputedGap)
        for (std::size_t j = k; j < e; ++j) drop[j] = true;
      k = e;
    }
  }

  GridPlan plan;
  plan.frequency = frequency;
  plan.source_row.assign(S, {});
  int seg = 0;
  bool prev_dropped = false;
  for (std::size_t k = 0; k < steps; ++k) {
    if (drop[k]) {
      ++plan.dropped_points;
      prev_dropped = true;
      continue;
    }
    if (prev_dropped && !plan.times.empty()) ++seg;
    prev_dropped = false;
    plan.times.push_back(lo + static_cast<double>(k) * frequency);
    plan.segment.push_back(seg);
    for (std::size_t s = 0; s < S; ++s) {
      plan.source_row[s].push_back(present[s][k]);
      if (present[s][k] < 0) ++plan.imputed_cells;
    }
  }
  if (plan.times.empty()) throw PreprocessError("no grid points survive the gap policy");
  return plan;
}

}  // namespace freegnn
