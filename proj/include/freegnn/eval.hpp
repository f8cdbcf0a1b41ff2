#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "freegnn/adapt.hpp"
#include "freegnn/checkpoint.hpp"
#include "freegnn/csv.hpp"
#include "freegnn/data/dataset.hpp"
#include "freegnn/graph.hpp"
#include "freegnn/hash.hpp"
#include "freegnn/memory.hpp"
#include "freegnn/model.hpp"

#ifndef FREEGNN_VERSION
#define FREEGNN_VERSION "0.1.0"
#endif

namespace freegnn {

struct MetricSet {
  double mae = 0.0;
  double rmse = 0.0;
  double mape = 0.0;   // fraction, not percent
  double smape = 0.0;  // fraction in [0, 2]
  std::size_t count = 0;
};

inline void to_json(nlohmann::json& j, const MetricSet& m) {
  j = {{"mae", m.mae}, {"rmse", m.rmse}, {"mape", m.mape}, {"smape", m.smape}, {"count", m.count}};
}

/// Running sums from which MetricSet is finalised; blocks merge exactly.
struct MetricAccumulator {
  double abs_sum = 0.0, sq_sum = 0.0, ape_sum = 0.0, sape_sum = 0.0;
  std::size_t count = 0;
  double eps = 1e-8;

  void add(double pred, double truth) {
    const double err = std::abs(truth - pred);
    abs_sum += err;
    sq_sum += err * err;
    ape_sum += err / (std::abs(truth) + eps);
    const double denom = std::abs(truth) + std::abs(pred);
    sape_sum += denom > 0.0 ? 2.0 * err / denom : 0.0;
    ++count;
  }

  void merge(const MetricAccumulator& o) {
    abs_sum += o.abs_sum;
    sq_sum += o.sq_sum;
    ape_sum += o.ape_sum;
    sape_sum += o.sape_sum;
    count += o.count;
  }

  MetricSet finish() const {
    if (count == 0) throw std::invalid_argument("metrics: no samples");
    const double n = static_cast<double>(count);
    return {abs_sum / n, std::sqrt(sq_sum / n), ape_sum / n, sape_sum / n, count};
  }
};

/// MAE, RMSE, MAPE (|y - yhat| / (|y| + eps)) and sMAPE (2|y - yhat| / (|y| + |yhat|), 0/0 := 0).
inline MetricSet compute_metrics(const std::vector<double>& pred, const std::vector<double>& truth, double eps = 1e-8) {
  if (pred.size() != truth.size()) throw std::invalid_argument("metrics: prediction/truth length mismatch");
  if (pred.empty()) throw std::invalid_argument("metrics: empty input");
  MetricAccumulator acc;
  acc.eps = eps;
  for (std::size_t i = 0; i < pred.size(); ++i) acc.add(pred[i], truth[i]);
  return acc.finish();
}

enum class StreamMode { frozen, adapt };

inline std::string to_string(StreamMode m) { return m == StreamMode::frozen ? "frozen" : "adapt"; }
inline StreamMode parse_stream_mode(const std::string& s) {
  if (s == "frozen") return StreamMode::frozen;
  if (s == "adapt") return StreamMode::adapt;
  throw std::invalid_argument("unknown mode '" + s + "' (expected frozen|adapt)");
}

struct ProtocolOptions {
  StreamMode mode = StreamMode::adapt;
  bool include_warmup = false;
  std::size_t rolling_window = 100;  // steps per rolling block
  bool keep_diagnostics = true;
  bool keep_memory = false;
  std::optional<Scaler> scaler;  // physical units for the target; defaults to the checkpoint's
};

struct StreamStep {
  std::size_t anchor = 0;
  double timestamp = 0.0;
  Eigen::VectorXd prediction;  // normalised units
  Eigen::VectorXd truth;
  bool warmup = false;
};

struct StreamReport {
  std::vector<StreamStep> steps;
  std::vector<StepDiagnostics> diagnostics;
  MetricSet final_metrics;           // normalised units, scored steps only
  std::optional<MetricSet> final_physical;
  std::vector<MetricSet> rolling;    // consecutive blocks of scored steps
  std::size_t skipped_steps = 0;
  std::size_t scored_steps = 0;
  double median_step_us = 0.0;
  std::optional<ReplayMemory> final_memory;
  std::string adapted_digest;        // digest of the final predictor
  nlohmann::json manifest = nlohmann::json::object();
};

/// Prequential run over a scaled target stream: each window is predicted with
/// the current parameters first, then (adapt mode) handed to adapt_step with
/// its label stripped. Frozen mode never mutates anything.
inline StreamReport run_stream_protocol(const Checkpoint& ckpt, const Dataset& target, const SiteGraph& graph,
                                        const AdaptConfig& cfg, const ProtocolOptions& opt = {}) {
  cfg.validate();
  const ModelConfig& mc = ckpt.model.config;
  if (target.dims() != mc.input_dim)
    throw ShapeError("checkpoint expects d=" + std::to_string(mc.input_dim) + ", stream has d=" + std::to_string(target.dims()));
  if (target.nodes() != graph.node_count())
    throw ShapeError("stream has N=" + std::to_string(target.nodes()) + ", graph has N=" + std::to_string(graph.node_count()));
  if (target.length() < mc.window + mc.horizon)
    throw std::invalid_argument("stream shorter than w + h = " + std::to_string(mc.window + mc.horizon));
  if (opt.rolling_window == 0) throw std::invalid_argument("rolling_window must be positive");

  const GraphContext g(graph);
  TeacherStudent ts(ckpt.model, cfg);
  ReplayMemory memory(cfg.memory_capacity, cfg.seed ^ 0x4D454D4Full);
  StreamReport rep;
  // Frozen runs skip the same leading steps so paired comparisons score identical windows.
  const auto warmup_steps = cfg.warmup;
  const std::optional<Scaler>& scaler = opt.scaler ? opt.scaler : ckpt.scaler;

  MetricAccumulator total, block, physical;
  total.eps = block.eps = physical.eps = cfg.eps_mape;
  std::vector<double> step_us;
  const auto anchors = window_anchors(target, mc.window, mc.horizon);
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const auto anchor = anchors[i];
    UnlabeledWindow x{window_inputs(target, anchor, mc.window), anchor};
    const ModelState& predictor = opt.mode == StreamMode::frozen ? ckpt.model : ts.predictor(cfg.predictor);
    StreamStep step;
    step.anchor = anchor;
    step.timestamp = anchor + mc.horizon < target.timestamps.size() ? target.timestamps[anchor + mc.horizon] : 0.0;
    step.prediction = forward(predictor, x.inputs, graph, Mode::eval).prediction;
    step.warmup = i < warmup_steps;

    // Scoring happens strictly outside the adaptation scope.
    step.truth.resize(static_cast<Eigen::Index>(target.nodes()));
    for (std::size_t v = 0; v < target.nodes(); ++v) step.truth[static_cast<Eigen::Index>(v)] = target.label(anchor + mc.horizon, v);
    if (!step.warmup || opt.include_warmup) {
      for (Eigen::Index v = 0; v < step.truth.size(); ++v) {
        block.add(step.prediction[v], step.truth[v]);
        if (scaler) physical.add(scaler->unscale_target(step.prediction[v]), scaler->unscale_target(step.truth[v]));
      }
      ++rep.scored_steps;
      if (rep.scored_steps % opt.rolling_window == 0) {
        rep.rolling.push_back(block.finish());
        total.merge(block);
        block = MetricAccumulator{};
        block.eps = cfg.eps_mape;
      }
    }
    rep.steps.push_back(std::move(step));

    if (opt.mode == StreamMode::adapt) {
      auto d = adapt_step(ts, x, graph, g, memory, cfg);
      if (d.skipped) ++rep.skipped_steps;
      step_us.push_back(d.step_us);
      if (opt.keep_diagnostics) rep.diagnostics.push_back(d);
    }
  }
  if (block.count > 0) {
    rep.rolling.push_back(block.finish());
    total.merge(block);
  }
  if (total.count == 0) throw std::invalid_argument("no scored steps: stream length " + std::to_string(anchors.size()) + " <= warm-up " + std::to_string(warmup_steps));
  rep.final_metrics = total.finish();
  if (scaler) rep.final_physical = physical.finish();
  if (opt.keep_memory) rep.final_memory = memory;
  const ModelState& final_model = opt.mode == StreamMode::frozen ? ckpt.model : ts.predictor(cfg.predictor);
  rep.adapted_digest = checkpoint_digest(Checkpoint{final_model, std::nullopt, {}});
  if (!step_us.empty()) {
    std::nth_element(step_us.begin(), step_us.begin() + static_cast<std::ptrdiff_t>(step_us.size() / 2), step_us.end());
    rep.median_step_us = step_us[step_us.size() / 2];
  }
  rep.manifest = {{"mode", to_string(opt.mode)},
                  {"adapt", cfg},
                  {"model", mc},
                  {"model_seed", ckpt.model.seed},
                  {"model_digest", checkpoint_digest(ckpt)},
                  {"include_warmup", opt.include_warmup},
                  {"warmup_steps", warmup_steps},
                  {"rolling_window", opt.rolling_window},
                  {"stream_windows", anchors.size()},
                  {"scored_split", "target stream (test portion), adaptation active from its first window"},
                  {"code_version", FREEGNN_VERSION}};
  return rep;
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

inline void write_report_csv(std::ostream& os, const StreamReport& r, const std::vector<std::string>& sites,
                             const std::optional<Scaler>& scaler) {
  os << "step,anchor,timestamp,site,prediction,truth,prediction_phys,truth_phys,warmup\n";
  for (std::size_t i = 0; i < r.steps.size(); ++i) {
    const auto& s = r.steps[i];
    for (Eigen::Index v = 0; v < s.prediction.size(); ++v) {
      const auto& name = static_cast<std::size_t>(v) < sites.size() ? sites[static_cast<std::size_t>(v)] : std::to_string(v);
      const double pp = scaler ? scaler->unscale_target(s.prediction[v]) : s.prediction[v];
      const double tp = scaler ? scaler->unscale_target(s.truth[v]) : s.truth[v];
      os << i << ',' << s.anchor << ',' << csv::num(s.timestamp) << ',' << csv::escape(name) << ',' << csv::num(s.prediction[v]) << ','
         << csv::num(s.truth[v]) << ',' << csv::num(pp) << ',' << csv::num(tp) << ',' << (s.warmup ? 1 : 0) << '\n';
    }
  }
}

inline void write_diagnostics_csv(std::ostream& os, const std::vector<StepDiagnostics>& diags, bool with_time = true) {
  std::string header = StepDiagnostics::csv_header();
  if (!with_time) header.resize(header.rfind(','));
  os << header << '\n';
  for (const auto& d : diags) write_csv_row(os, d, with_time);
}

inline nlohmann::json summary_json(const StreamReport& r) {
  nlohmann::json j = {{"metrics", r.final_metrics},
                      {"scored_steps", r.scored_steps},
                      {"skipped_steps", r.skipped_steps},
                      {"rolling", r.rolling},
                      {"manifest", r.manifest}};
  if (r.final_physical) j["metrics_physical"] = *r.final_physical;
  return j;
}

struct AblationRow {
  std::string variant;
  MetricSet metrics;
  std::optional<MetricSet> physical;
  std::string pretrain_digest;
};

/// One protocol run per variant, all from the same checkpoint and seeds.
inline std::vector<AblationRow> ablation_suite(const Checkpoint& ckpt, const Dataset& target, const SiteGraph& graph,
                                               const AdaptConfig& base, const std::vector<std::string>& variants,
                                               const ProtocolOptions& opt = {}) {
  for (const auto& v : variants) (void)apply_variant(base, v);  // reject unknown names before any work
  const auto digest = checkpoint_digest(ckpt);
  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    ProtocolOptions o = opt;
    o.mode = StreamMode::adapt;
    o.keep_diagnostics = false;
    const auto rep = run_stream_protocol(ckpt, target, graph, apply_variant(base, v), o);
    rows.push_back({v, rep.final_metrics, rep.final_physical, digest});
  }
  return rows;
}

inline void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows) {
  os << "variant,mae,rmse,mape,smape,count,mae_phys,rmse_phys,pretrain_digest\n";
  for (const auto& r : rows) {
    os << r.variant << ',' << csv::num(r.metrics.mae) << ',' << csv::num(r.metrics.rmse) << ',' << csv::num(r.metrics.mape) << ','
       << csv::num(r.metrics.smape) << ',' << r.metrics.count << ',';
    if (r.physical) os << csv::num(r.physical->mae) << ',' << csv::num(r.physical->rmse);
    else os << ',';
    os << ',' << r.pretrain_digest << '\n';
  }
}

}  // namespace freegnn
