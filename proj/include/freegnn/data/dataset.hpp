#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "freegnn/numerics/tensor.hpp"

namespace freegnn {

// ---------------------------------------------------------------------------
// Access auditing. Forecast targets are only ever read through counted
// accessors; while an AdaptationScope is alive every such read is recorded as
// a violation. Datasets additionally count all of their own reads so a test
// can prove a source dataset was never touched during adaptation.
// ---------------------------------------------------------------------------

struct LabelAudit {
  std::uint64_t label_reads = 0;
  std::uint64_t label_reads_during_adaptation = 0;
  int adaptation_depth = 0;

  void record_label_read() noexcept {
    ++label_reads;
    if (adaptation_depth > 0) ++label_reads_during_adaptation;
  }
};

inline LabelAudit& label_audit() {
  thread_local LabelAudit audit;
  return audit;
}

/// Marks the enclosed region as adaptation: target reads inside it are violations.
class AdaptationScope {
 public:
  AdaptationScope() noexcept { ++label_audit().adaptation_depth; }
  ~AdaptationScope() { --label_audit().adaptation_depth; }
  AdaptationScope(const AdaptationScope&) = delete;
  AdaptationScope& operator=(const AdaptationScope&) = delete;
};

struct AccessCounters {
  std::uint64_t feature_reads = 0;
  std::uint64_t label_reads = 0;
};

// ---------------------------------------------------------------------------

enum class FeatureKind {
  numeric,      // z-scored with training statistics
  power,        // observed generation; min-max scaled with the target statistics
  passthrough,  // one-hot flags, calendar encodings, normalised time
};

inline std::string to_string(FeatureKind k) {
  switch (k) {
    case FeatureKind::numeric: return "numeric";
    case FeatureKind::power: return "power";
    case FeatureKind::passthrough: return "passthrough";
  }
  return "?";
}

inline FeatureKind parse_feature_kind(const std::string& s) {
  if (s == "numeric") return FeatureKind::numeric;
  if (s == "power") return FeatureKind::power;
  if (s == "passthrough") return FeatureKind::passthrough;
  throw std::invalid_argument("unknown feature kind '" + s + "'");
}

/// A preprocessed multi-site series: no missing values, strictly increasing
/// timestamps. Values are in physical units; scaling happens via Scaler.
class Dataset {
 public:
  std::string name;
  std::vector<double> timestamps;          // T, epoch seconds (or step index for synthetic data)
  std::vector<std::string> site_names;     // N
  std::vector<std::string> feature_names;  // d
  std::vector<FeatureKind> feature_kinds;  // d
  std::vector<int> segment;                // T, windows never cross a segment boundary
  double frequency_seconds = 1.0;

  Dataset() : counters_(std::make_shared<AccessCounters>()) {}

  Dataset(Tensor features, Mat targets) : Dataset() { set_values(std::move(features), std::move(targets)); }

  void set_values(Tensor features, Mat targets) {
    if (features.rank() != 3) throw ShapeError("dataset features must be T x N x d");
    if (targets.rows() != static_cast<Eigen::Index>(features.dim(0)) || targets.cols() != static_cast<Eigen::Index>(features.dim(1)))
      throw ShapeError("dataset targets must be T x N");
    features_ = std::move(features);
    targets_ = std::move(targets);
    if (segment.size() != length()) segment.assign(length(), 0);
  }

  std::size_t length() const noexcept { return features_.rank() ? features_.dim(0) : 0; }
  std::size_t nodes() const noexcept { return features_.rank() ? features_.dim(1) : 0; }
  std::size_t dims() const noexcept { return features_.rank() ? features_.dim(2) : 0; }

  double feature(std::size_t t, std::size_t v, std::size_t k) const {
    ++counters_->feature_reads;
    return features_.at(t, v, k);
  }

  /// Counted target read; see LabelAudit.
  double label(std::size_t t, std::size_t v) const {
    ++counters_->label_reads;
    label_audit().record_label_read();
    return targets_(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(v));
  }

  /// Bulk access for preprocessing; counted as one read per call.
  const Tensor& features() const {
    ++counters_->feature_reads;
    return features_;
  }
  const Mat& targets() const {
    ++counters_->label_reads;
    label_audit().record_label_read();
    return targets_;
  }
  Tensor& mutable_features() { return features_; }
  Mat& mutable_targets() { return targets_; }

  const AccessCounters& counters() const noexcept { return *counters_; }

  /// Copy with fresh counters (so audits of the copy are independent).
  Dataset clone() const {
    Dataset d = *this;
    d.counters_ = std::make_shared<AccessCounters>(*counters_);
    return d;
  }

  /// Rows [begin, end) as a new dataset.
  Dataset slice(std::size_t begin, std::size_t end) const {
    if (begin > end || end > length()) throw std::out_of_range("dataset slice out of range");
    Dataset d;
    d.name = name;
    d.site_names = site_names;
    d.feature_names = feature_names;
    d.feature_kinds = feature_kinds;
    d.frequency_seconds = frequency_seconds;
    d.timestamps.assign(timestamps.begin() + static_cast<std::ptrdiff_t>(begin), timestamps.begin() + static_cast<std::ptrdiff_t>(end));
    d.segment.assign(segment.begin() + static_cast<std::ptrdiff_t>(begin), segment.begin() + static_cast<std::ptrdiff_t>(end));
    const auto N = nodes(), dd = dims();
    Tensor f({end - begin, N, dd});
    std::copy(features_.data() + begin * N * dd, features_.data() + end * N * dd, f.data());
    Mat y = targets_.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(end - begin));
    d.features_ = std::move(f);
    d.targets_ = std::move(y);
    return d;
  }

 private:
  Tensor features_;
  Mat targets_;
  std::shared_ptr<AccessCounters> counters_;
};

/// A rolling input window X_{t-w+1..t} without any target: the only thing the
/// adaptation engine ever receives.
struct UnlabeledWindow {
  Tensor inputs;  // w x N x d
  std::size_t anchor = 0;
};

/// Input window plus (optionally) the target vector Y_{t+h}. The target is
/// private and read through the audited accessor.
class WindowBatch {
 public:
  WindowBatch() = default;
  WindowBatch(Tensor inputs, std::size_t anchor, std::optional<Eigen::VectorXd> target = std::nullopt)
      : inputs_(std::move(inputs)), anchor_(anchor), target_(std::move(target)) {}

  const Tensor& inputs() const noexcept { return inputs_; }
  std::size_t anchor() const noexcept { return anchor_; }
  bool has_target() const noexcept { return target_.has_value(); }

  const Eigen::VectorXd& target() const {
    if (!target_) throw std::logic_error("window has no target");
    label_audit().record_label_read();
    return *target_;
  }

  /// Drops the target; what a deployment stream hands to adaptation.
  UnlabeledWindow unlabeled() const { return UnlabeledWindow{inputs_, anchor_}; }

 private:
  Tensor inputs_;
  std::size_t anchor_ = 0;
  std::optional<Eigen::VectorXd> target_;
};

// ---------------------------------------------------------------------------
// Scaling. Statistics are always fit on a training portion and then frozen.
// ---------------------------------------------------------------------------

struct Scaler {
  std::vector<FeatureKind> kinds;
  std::vector<double> mean;  // per feature (numeric)
  std::vector<double> stddev;
  double target_min = 0.0;
  double target_max = 1.0;

  bool fitted() const noexcept { return !kinds.empty(); }
  double target_span() const noexcept { return target_max - target_min; }

  static Scaler fit(const Dataset& train) {
    Scaler s;
    const auto T = train.length(), N = train.nodes(), d = train.dims();
    if (T == 0) throw std::invalid_argument("cannot fit scaler on an empty dataset");
    s.kinds = train.feature_kinds.size() == d ? train.feature_kinds : std::vector<FeatureKind>(d, FeatureKind::numeric);
    s.mean.assign(d, 0.0);
    s.stddev.assign(d, 1.0);
    const Tensor& X = train.features();
    for (std::size_t k = 0; k < d; ++k) {
      if (s.kinds[k] != FeatureKind::numeric) continue;
      double sum = 0.0, sq = 0.0;
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t v = 0; v < N; ++v) sum += X.at(t, v, k);
      const double n = static_cast<double>(T * N);
      const double m = sum / n;
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t v = 0; v < N; ++v) sq += (X.at(t, v, k) - m) * (X.at(t, v, k) - m);
      s.mean[k] = m;
      const double sd = std::sqrt(sq / n);
      s.stddev[k] = sd > 0.0 ? sd : 1.0;
    }
    const Mat& Y = train.targets();
    s.target_min = Y.minCoeff();
    s.target_max = Y.maxCoeff();
    if (!(s.target_max > s.target_min)) s.target_max = s.target_min + 1.0;
    return s;
  }

  double scale_feature(std::size_t k, double x) const {
    switch (kinds[k]) {
      case FeatureKind::numeric: return (x - mean[k]) / stddev[k];
      case FeatureKind::power: return scale_target(x);
      default: return x;
    }
  }
  double scale_target(double y) const { return (y - target_min) / target_span(); }
  double unscale_target(double y) const { return y * target_span() + target_min; }

  /// Scaled copy of a dataset (targets min-max, features per kind).
  Dataset transform(const Dataset& ds) const {
    if (ds.dims() != kinds.size()) throw ShapeError("scaler fitted for d=" + std::to_string(kinds.size()) + ", dataset has d=" + std::to_string(ds.dims()));
    Dataset out = ds.clone();
    Tensor& X = out.mutable_features();
    const auto T = ds.length(), N = ds.nodes(), d = ds.dims();
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t v = 0; v < N; ++v)
        for (std::size_t k = 0; k < d; ++k) X.at(t, v, k) = scale_feature(k, X.at(t, v, k));
    Mat& Y = out.mutable_targets();
    Y = (Y.array() - target_min) / target_span();
    return out;
  }
};

inline void to_json(nlohmann::json& j, const Scaler& s) {
  std::vector<std::string> kinds;
  for (auto k : s.kinds) kinds.push_back(to_string(k));
  j = {{"kinds", kinds}, {"mean", s.mean}, {"stddev", s.stddev}, {"target_min", s.target_min}, {"target_max", s.target_max}};
}

inline void from_json(const nlohmann::json& j, Scaler& s) {
  s.kinds.clear();
  for (const auto& k : j.at("kinds").get<std::vector<std::string>>()) s.kinds.push_back(parse_feature_kind(k));
  s.mean = j.at("mean").get<std::vector<double>>();
  s.stddev = j.at("stddev").get<std::vector<double>>();
  s.target_min = j.at("target_min").get<double>();
  s.target_max = j.at("target_max").get<double>();
  if (s.mean.size() != s.kinds.size() || s.stddev.size() != s.kinds.size()) throw std::invalid_argument("scaler: inconsistent lengths");
}

// ---------------------------------------------------------------------------

/// Chronological split: first ratio*T rows train, the rest test. Both sides
/// must hold at least one full window (w + h rows).
inline std::pair<Dataset, Dataset> split(const Dataset& ds, double ratio, std::size_t w, std::size_t h) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw std::invalid_argument("split ratio must be in (0, 1)");
  const auto T = ds.length();
  const auto cut = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(T) + 1e-9));
  if (cut < w + h || T - cut < w + h) {
    throw std::invalid_argument("split leaves fewer than w+h=" + std::to_string(w + h) + " rows on one side (T=" + std::to_string(T) + ")");
  }
  return {ds.slice(0, cut), ds.slice(cut, T)};
}

/// Anchor times t such that X[t-w+1..t] and Y[t+h] all lie in one segment.
inline std::vector<std::size_t> window_anchors(const Dataset& ds, std::size_t w, std::size_t h, std::size_t stride = 1) {
  if (w == 0 || h == 0) throw std::invalid_argument("window length and horizon must be positive");
  if (stride == 0) throw std::invalid_argument("stride must be positive");
  std::vector<std::size_t> anchors;
  const auto T = ds.length();
  if (T < w + h) return anchors;
  for (std::size_t t = w - 1; t + h < T; t += stride) {
    const std::size_t first = t + 1 - w;
    if (ds.segment[first] == ds.segment[t + h]) anchors.push_back(t);
  }
  return anchors;
}

inline Tensor window_inputs(const Dataset& ds, std::size_t anchor, std::size_t w) {
  const auto N = ds.nodes(), d = ds.dims();
  Tensor x({w, N, d});
  const Tensor& F = ds.features();
  const std::size_t first = anchor + 1 - w;
  std::copy(F.data() + first * N * d, F.data() + (anchor + 1) * N * d, x.data());
  return x;
}

/// Rolling windows in anchor order. With labels, each carries Y[t+h].
inline std::vector<WindowBatch> make_windows(const Dataset& ds, std::size_t w, std::size_t h, std::size_t stride = 1,
                                             bool with_targets = true) {
  if (w == 0 || h == 0) throw std::invalid_argument("window length and horizon must be positive");
  if (ds.length() < w + h) throw std::invalid_argument("dataset shorter than w + h");
  std::vector<WindowBatch> out;
  for (std::size_t t : window_anchors(ds, w, h, stride)) {
    std::optional<Eigen::VectorXd> y;
    if (with_targets) {
      Eigen::VectorXd v(static_cast<Eigen::Index>(ds.nodes()));
      for (std::size_t n = 0; n < ds.nodes(); ++n) v(static_cast<Eigen::Index>(n)) = ds.label(t + h, n);
      y = std::move(v);
    }
    out.emplace_back(window_inputs(ds, t, w), t, std::move(y));
  }
  return out;
}

}  // namespace freegnn
