#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "freegnn/csv.hpp"
#include "freegnn/data/dataset.hpp"
#include "freegnn/graph.hpp"
#include "freegnn/model.hpp"
#include "freegnn/numerics/optim.hpp"
#include "freegnn/numerics/tape.hpp"
#include "freegnn/rng.hpp"

namespace freegnn {

enum class LossKind { mae, huber };

inline std::string to_string(LossKind k) { return k == LossKind::mae ? "mae" : "huber"; }
inline LossKind parse_loss_kind(const std::string& s) {
  if (s == "mae") return LossKind::mae;
  if (s == "huber") return LossKind::huber;
  throw std::invalid_argument("unknown loss '" + s + "' (expected mae|huber)");
}

struct TrainConfig {
  double learning_rate = 0.01;
  OptimizerKind optimizer = OptimizerKind::adam;
  std::size_t batch_size = 32;
  std::size_t epochs = 100;
  LossKind loss = LossKind::mae;
  double huber_delta = 1.0;
  std::uint64_t seed = 0;
  std::size_t patience = 0;            // epochs without validation improvement before stopping; 0 = never
  double validation_fraction = 0.1;    // trailing share of each source's windows held out
  double clip_norm = 0.0;

  void validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("train: learning_rate must be > 0");
    if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
    if (!(huber_delta > 0.0)) throw std::invalid_argument("train: huber_delta must be > 0");
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) throw std::invalid_argument("train: validation_fraction must be in [0, 1)");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"learning_rate", c.learning_rate}, {"optimizer", to_string(c.optimizer)}, {"batch_size", c.batch_size},
       {"epochs", c.epochs}, {"loss", to_string(c.loss)}, {"huber_delta", c.huber_delta}, {"seed", c.seed},
       {"patience", c.patience}, {"validation_fraction", c.validation_fraction}, {"clip_norm", c.clip_norm}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  const nlohmann::json defaults = TrainConfig{};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!defaults.contains(it.key())) throw std::invalid_argument("train config: unknown key '" + it.key() + "'");
  const TrainConfig d;
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.optimizer = parse_optimizer(j.value("optimizer", to_string(d.optimizer)));
  c.batch_size = j.value("batch_size", d.batch_size);
  c.epochs = j.value("epochs", d.epochs);
  c.loss = parse_loss_kind(j.value("loss", to_string(d.loss)));
  c.huber_delta = j.value("huber_delta", d.huber_delta);
  c.seed = j.value("seed", d.seed);
  c.patience = j.value("patience", d.patience);
  c.validation_fraction = j.value("validation_fraction", d.validation_fraction);
  c.clip_norm = j.value("clip_norm", d.clip_norm);
  c.validate();
}

/// Mean absolute error or mean Huber loss between equal-length vectors.
inline double loss_value(const Eigen::VectorXd& pred, const Eigen::VectorXd& truth, LossKind kind, double delta = 1.0) {
  if (pred.size() != truth.size()) throw ShapeError("loss_value: length mismatch");
  if (pred.size() == 0) throw ShapeError("loss_value: empty input");
  const Eigen::ArrayXd r = (pred - truth).array().abs();
  if (kind == LossKind::mae) return r.mean();
  return (r <= delta).select(0.5 * r.square(), delta * (r - 0.5 * delta)).mean();
}

inline Var loss_node(Tape& tape, Var pred, Var truth, LossKind kind, double delta) {
  const Var r = tape.sub(pred, truth);
  return tape.mean(kind == LossKind::mae ? tape.abs(r) : tape.huber(r, delta));
}

/// One labeled source domain, already scaled.
struct SourceDomain {
  std::string name;
  Dataset data;
  SiteGraph graph;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LossCurvePoint {
  std::size_t epoch = 0;
  std::string source;
  double loss = 0.0;
  double val_loss = 0.0;
};

struct PretrainResult {
  ModelState model;              // best-validation parameters
  std::vector<LossCurvePoint> curve;
  std::size_t best_epoch = 0;    // 0 = the initial parameters
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::size_t epochs_run = 0;
  // Index bookkeeping: every anchor a source contributed to training or validation.
  std::vector<std::vector<std::size_t>> train_anchors, val_anchors;
};

inline void write_loss_curve(std::ostream& os, const std::vector<LossCurvePoint>& curve) {
  os << "epoch,source,loss,val_loss\n";
  for (const auto& p : curve) os << p.epoch << ',' << csv::escape(p.source) << ',' << csv::num(p.loss) << ',' << csv::num(p.val_loss) << '\n';
}

namespace detail {

struct SourceWindows {
  std::vector<Tensor> inputs;
  std::vector<Eigen::VectorXd> targets;
  std::vector<std::size_t> anchors;
  std::size_t n_train = 0;  // first n_train windows train, the rest validate
};

inline SourceWindows collect_windows(const SourceDomain& s, const ModelConfig& mc, double val_fraction) {
  SourceWindows out;
  for (auto& wb : make_windows(s.data, mc.window, mc.horizon)) {
    out.anchors.push_back(wb.anchor());
    out.targets.push_back(wb.target());
    out.inputs.push_back(wb.inputs());
  }
  if (out.inputs.empty()) throw std::invalid_argument("source '" + s.name + "' yields no windows for w=" + std::to_string(mc.window) + ", h=" + std::to_string(mc.horizon));
  const auto n = out.inputs.size();
  const auto n_val = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(n)));
  out.n_train = std::max<std::size_t>(1, n - n_val);
  return out;
}

inline double evaluate_windows(const ModelState& m, const SourceWindows& w, std::size_t begin, std::size_t end,
                               const GraphContext& g, const TrainConfig& tc) {
  if (begin >= end) return std::numeric_limits<double>::quiet_NaN();
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = begin; i < end; i += tc.batch_size) {
    const auto stop = std::min(end, i + tc.batch_size);
    std::vector<const Tensor*> batch;
    for (std::size_t k = i; k < stop; ++k) batch.push_back(&w.inputs[k]);
    const Mat y = predict_batch(m, batch, g);
    for (std::size_t k = i; k < stop; ++k) {
      sum += loss_value(y.row(static_cast<Eigen::Index>(k - i)).transpose(), w.targets[k], tc.loss, tc.huber_delta) * static_cast<double>(y.cols());
      count += static_cast<std::size_t>(y.cols());
    }
  }
  return sum / static_cast<double>(count);
}

}  // namespace detail

/// Mini-batch supervised training over K sources. Each batch comes from one
/// source; the source of the next batch is drawn with probability proportional
/// to that source's remaining batches, so an epoch visits every training
/// window once and mixes sources in proportion to their size.
inline PretrainResult pretrain(const std::vector<SourceDomain>& sources, const ModelConfig& mc, const TrainConfig& tc,
                               std::uint64_t model_seed = 0) {
  if (sources.empty()) throw std::invalid_argument("pretrain: need at least one source");
  mc.validate();
  tc.validate();
  for (const auto& s : sources)
    if (s.data.dims() != mc.input_dim)
      throw ShapeError("source '" + s.name + "' has d=" + std::to_string(s.data.dims()) + ", model expects " + std::to_string(mc.input_dim));

  PretrainResult res;
  res.model = init_model(mc, model_seed);
  std::vector<detail::SourceWindows> windows;
  std::vector<GraphContext> graphs;
  for (const auto& s : sources) {
    windows.push_back(detail::collect_windows(s, mc, tc.validation_fraction));
    graphs.emplace_back(s.graph);
    const auto& w = windows.back();
    res.train_anchors.emplace_back(w.anchors.begin(), w.anchors.begin() + static_cast<std::ptrdiff_t>(w.n_train));
    res.val_anchors.emplace_back(w.anchors.begin() + static_cast<std::ptrdiff_t>(w.n_train), w.anchors.end());
  }

  const auto validation_loss = [&](const ModelState& m, std::vector<double>* per_source) {
    double sum = 0.0, weight = 0.0;
    for (std::size_t k = 0; k < sources.size(); ++k) {
      const auto& w = windows[k];
      const bool has_val = w.n_train < w.inputs.size();
      const double v = has_val ? detail::evaluate_windows(m, w, w.n_train, w.inputs.size(), graphs[k], tc)
                               : detail::evaluate_windows(m, w, 0, w.n_train, graphs[k], tc);
      if (per_source) per_source->push_back(v);
      const double n = static_cast<double>(has_val ? w.inputs.size() - w.n_train : w.n_train);
      sum += v * n;
      weight += n;
    }
    return sum / weight;
  };

  if (tc.epochs == 0) return res;
  res.best_val_loss = validation_loss(res.model, nullptr);
  ModelState current = res.model;
  Optimizer opt(OptimizerConfig{tc.optimizer, tc.learning_rate, 0.9, 0.999, 1e-8, tc.clip_norm});
  Rng rng(tc.seed);
  std::size_t since_best = 0;

  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    // Per-source shuffled batches.
    std::vector<std::vector<std::vector<std::size_t>>> batches(sources.size());
    std::size_t remaining = 0;
    for (std::size_t k = 0; k < sources.size(); ++k) {
      auto order = sample_without_replacement(rng, windows[k].n_train, windows[k].n_train);
      for (std::size_t i = 0; i < order.size(); i += tc.batch_size)
        batches[k].emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                                order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + tc.batch_size)));
      std::reverse(batches[k].begin(), batches[k].end());  // pop_back walks them in shuffled order
      remaining += batches[k].size();
    }
    std::vector<double> loss_sum(sources.size(), 0.0);
    std::vector<std::size_t> loss_count(sources.size(), 0);

    while (remaining > 0) {
      auto pick = rng.below(remaining);
      std::size_t k = 0;
      while (pick >= batches[k].size()) pick -= batches[k++].size();
      const auto idx = std::move(batches[k].back());
      batches[k].pop_back();
      --remaining;

      const auto& w = windows[k];
      const auto N = static_cast<Eigen::Index>(graphs[k].nodes);
      std::vector<const Tensor*> batch;
      Mat truth(static_cast<Eigen::Index>(idx.size()) * N, 1);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        batch.push_back(&w.inputs[idx[i]]);
        truth.middleRows(static_cast<Eigen::Index>(i) * N, N) = w.targets[idx[i]];
      }
      try {
        Tape tape;
        const auto p = bind_parameters(tape, current, true);
        const auto fv = forward(tape, p, mc, batch, graphs[k], Mode::train, &rng);
        const Var loss = loss_node(tape, fv.prediction, tape.constant(std::move(truth)), tc.loss, tc.huber_delta);
        const double value = tape.scalar(loss);
        if (!std::isfinite(value)) throw NumericError("non-finite training loss");
        opt.step(current.params, tape.backward(loss, kParamCount));
        if (!current.all_finite()) throw NumericError("non-finite parameters after update");
        loss_sum[k] += value;
        ++loss_count[k];
      } catch (const NumericError& e) {
        throw TrainingDiverged("pretraining diverged at epoch " + std::to_string(epoch) + " on source '" + sources[k].name +
                               "' (step " + std::to_string(opt.step_count() + 1) + "): " + e.what() +
                               "; try a lower learning_rate or set clip_norm");
      }
    }

    std::vector<double> per_source;
    const double val = validation_loss(current, &per_source);
    for (std::size_t k = 0; k < sources.size(); ++k)
      res.curve.push_back({epoch, sources[k].name,
                           loss_count[k] ? loss_sum[k] / static_cast<double>(loss_count[k]) : std::numeric_limits<double>::quiet_NaN(),
                           per_source[k]});
    res.epochs_run = epoch;
    if (val < res.best_val_loss) {
      res.best_val_loss = val;
      res.best_epoch = epoch;
      res.model = current;
      since_best = 0;
    } else if (tc.patience > 0 && ++since_best >= tc.patience) {
      break;
    }
  }
  return res;
}

}  // namespace freegnn
