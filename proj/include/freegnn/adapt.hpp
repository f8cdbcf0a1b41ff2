#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "freegnn/csv.hpp"
#include "freegnn/data/dataset.hpp"
#include "freegnn/graph.hpp"
#include "freegnn/memory.hpp"
#include "freegnn/model.hpp"
#include "freegnn/numerics/optim.hpp"
#include "freegnn/numerics/tape.hpp"
#include "freegnn/rng.hpp"

namespace freegnn {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct AugmentParams {
  double jitter = 0.01;        // Gaussian sigma, applied to every view
  double mask_ratio = 0.1;     // fraction of time steps zeroed by the mask op
  double scale_min = 0.9;
  double scale_max = 1.1;
  double warp_max_shift = 1.0; // largest displacement (steps) of the smooth time warp

  void validate() const {
    if (!(jitter >= 0.0)) throw std::invalid_argument("augment: jitter must be >= 0");
    if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0)) throw std::invalid_argument("augment: mask_ratio must be in [0, 1]");
    if (!(scale_min > 0.0 && scale_min <= scale_max)) throw std::invalid_argument("augment: need 0 < scale_min <= scale_max");
    if (!(warp_max_shift >= 0.0)) throw std::invalid_argument("augment: warp_max_shift must be >= 0");
  }
};

enum class Predictor { teacher, student };

struct AdaptConfig {
  double mu = 0.99;     // EMA decay
  double tau = 0.8;     // confidence threshold
  double sigma = 0.1;   // confidence temperature (normalised target units)
  double lambda_pl = 1.0;
  double lambda_cons = 1.0;
  double lambda_graph = 0.1;
  double lambda_replay = 1.0;
  double lambda_ent = 0.1;
  double gamma = 10.0;  // drift sharpness
  double delta = 0.5;   // drift threshold (embedding-norm units)
  std::size_t warmup = 200;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::adam;
  double clip_norm = 0.0;
  std::size_t steps_per_arrival = 1;
  AugmentParams augment;
  double eps_mape = 1e-8;
  std::size_t memory_capacity = 200;
  std::size_t replay_batch = 8;
  Predictor predictor = Predictor::teacher;
  std::uint64_t seed = 0;

  // Ablation switches.
  bool use_replay = true;
  bool use_graph = true;
  bool use_drift = true;
  bool single_model = false;

  void validate() const {
    if (!(mu >= 0.0 && mu < 1.0)) throw std::invalid_argument("adapt: mu must be in [0, 1)");
    if (!(tau > 0.0 && tau <= 1.0)) throw std::invalid_argument("adapt: tau must be in (0, 1]");
    if (!(sigma > 0.0)) throw std::invalid_argument("adapt: sigma must be > 0");
    for (double l : {lambda_pl, lambda_cons, lambda_graph, lambda_replay, lambda_ent})
      if (!(l >= 0.0)) throw std::invalid_argument("adapt: loss weights must be >= 0");
    if (!(gamma > 0.0)) throw std::invalid_argument("adapt: gamma must be > 0");
    if (!std::isfinite(delta)) throw std::invalid_argument("adapt: delta must be finite");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("adapt: learning_rate must be > 0");
    if (steps_per_arrival < 1) throw std::invalid_argument("adapt: steps_per_arrival must be >= 1");
    if (!(eps_mape > 0.0)) throw std::invalid_argument("adapt: eps_mape must be > 0");
    augment.validate();
  }
};

inline void to_json(nlohmann::json& j, const AugmentParams& a) {
  j = {{"jitter", a.jitter}, {"mask_ratio", a.mask_ratio}, {"scale_min", a.scale_min},
       {"scale_max", a.scale_max}, {"warp_max_shift", a.warp_max_shift}};
}

inline void from_json(const nlohmann::json& j, AugmentParams& a) {
  const nlohmann::json defaults = AugmentParams{};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!defaults.contains(it.key())) throw std::invalid_argument("augment: unknown key '" + it.key() + "'");
  const AugmentParams d;
  a.jitter = j.value("jitter", d.jitter);
  a.mask_ratio = j.value("mask_ratio", d.mask_ratio);
  a.scale_min = j.value("scale_min", d.scale_min);
  a.scale_max = j.value("scale_max", d.scale_max);
  a.warp_max_shift = j.value("warp_max_shift", d.warp_max_shift);
}

inline void to_json(nlohmann::json& j, const AdaptConfig& c) {
  j = {{"mu", c.mu}, {"tau", c.tau}, {"sigma", c.sigma},
       {"lambda_pl", c.lambda_pl}, {"lambda_cons", c.lambda_cons}, {"lambda_graph", c.lambda_graph},
       {"lambda_replay", c.lambda_replay}, {"lambda_ent", c.lambda_ent},
       {"gamma", c.gamma}, {"delta", c.delta}, {"warmup", c.warmup},
       {"learning_rate", c.learning_rate}, {"optimizer", to_string(c.optimizer)}, {"clip_norm", c.clip_norm},
       {"steps_per_arrival", c.steps_per_arrival}, {"augment", c.augment}, {"eps_mape", c.eps_mape},
       {"memory_capacity", c.memory_capacity}, {"replay_batch", c.replay_batch},
       {"predictor", c.predictor == Predictor::teacher ? "teacher" : "student"}, {"seed", c.seed},
       {"use_replay", c.use_replay}, {"use_graph", c.use_graph}, {"use_drift", c.use_drift},
       {"single_model", c.single_model}};
}

inline void from_json(const nlohmann::json& j, AdaptConfig& c) {
  const nlohmann::json defaults = AdaptConfig{};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!defaults.contains(it.key())) throw std::invalid_argument("adapt config: unknown key '" + it.key() + "'");
  const AdaptConfig d;
  c.mu = j.value("mu", d.mu);
  c.tau = j.value("tau", d.tau);
  c.sigma = j.value("sigma", d.sigma);
  c.lambda_pl = j.value("lambda_pl", d.lambda_pl);
  c.lambda_cons = j.value("lambda_cons", d.lambda_cons);
  c.lambda_graph = j.value("lambda_graph", d.lambda_graph);
  c.lambda_replay = j.value("lambda_replay", d.lambda_replay);
  c.lambda_ent = j.value("lambda_ent", d.lambda_ent);
  c.gamma = j.value("gamma", d.gamma);
  c.delta = j.value("delta", d.delta);
  c.warmup = j.value("warmup", d.warmup);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.optimizer = parse_optimizer(j.value("optimizer", to_string(d.optimizer)));
  c.clip_norm = j.value("clip_norm", d.clip_norm);
  c.steps_per_arrival = j.value("steps_per_arrival", d.steps_per_arrival);
  c.augment = j.value("augment", d.augment);
  c.eps_mape = j.value("eps_mape", d.eps_mape);
  c.memory_capacity = j.value("memory_capacity", d.memory_capacity);
  c.replay_batch = j.value("replay_batch", d.replay_batch);
  const auto pred = j.value("predictor", std::string("teacher"));
  if (pred == "teacher") c.predictor = Predictor::teacher;
  else if (pred == "student") c.predictor = Predictor::student;
  else throw std::invalid_argument("adapt config: predictor must be teacher or student");
  c.seed = j.value("seed", d.seed);
  c.use_replay = j.value("use_replay", d.use_replay);
  c.use_graph = j.value("use_graph", d.use_graph);
  c.use_drift = j.value("use_drift", d.use_drift);
  c.single_model = j.value("single_model", d.single_model);
  c.validate();
}

/// Named ablation variants; "full" leaves every switch on.
inline AdaptConfig apply_variant(AdaptConfig c, const std::string& variant) {
  if (variant == "full") return c;
  if (variant == "no-replay") c.use_replay = false;
  else if (variant == "no-graph") c.use_graph = false;
  else if (variant == "no-drift") c.use_drift = false;
  else if (variant == "single-model") c.single_model = true;
  else throw std::invalid_argument("unknown ablation variant '" + variant + "' (expected full|no-replay|no-graph|no-drift|single-model)");
  return c;
}

inline const std::vector<std::string>& ablation_variants() {
  static const std::vector<std::string> v = {"full", "no-replay", "no-graph", "no-drift", "single-model"};
  return v;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

enum class AugmentOp { none, mask, scale, warp };

inline std::string to_string(AugmentOp op) {
  switch (op) {
    case AugmentOp::mask: return "mask";
    case AugmentOp::scale: return "scale";
    case AugmentOp::warp: return "warp";
    default: return "none";
  }
}

struct AugmentedView {
  Tensor x;
  AugmentOp op = AugmentOp::none;
  std::vector<std::uint8_t> masked;  // per time step, 1 where the mask op zeroed it
};

inline void jitter_inplace(Tensor& x, double sigma, Rng& rng) {
  if (sigma <= 0.0) return;
  for (auto& v : x.values()) v += sigma * rng.normal();
}

/// Zeroes round(ratio * w) distinct time steps (all nodes and features).
inline std::vector<std::uint8_t> time_mask_inplace(Tensor& x, double ratio, Rng& rng) {
  const auto w = x.dim(0), row = x.dim(1) * x.dim(2);
  std::vector<std::uint8_t> flags(w, 0);
  const auto k = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(w)));
  for (auto s : sample_without_replacement(rng, w, k)) {
    flags[s] = 1;
    std::fill(x.data() + s * row, x.data() + (s + 1) * row, 0.0);
  }
  return flags;
}

inline void scale_inplace(Tensor& x, double lo, double hi, Rng& rng) {
  const double s = lo == hi ? lo : rng.uniform(lo, hi);
  for (auto& v : x.values()) v *= s;
}

/// Smooth warp: step s reads position s + a*sin(pi*s/(w-1)), a ~ U(-m, m),
/// linearly interpolated. Both ends of the window stay fixed.
inline void time_warp_inplace(Tensor& x, double max_shift, Rng& rng) {
  const auto w = x.dim(0), row = x.dim(1) * x.dim(2);
  if (w < 3 || max_shift <= 0.0) return;
  const double a = rng.uniform(-max_shift, max_shift);
  const Tensor src = x;
  const double last = static_cast<double>(w - 1);
  for (std::size_t s = 1; s + 1 < w; ++s) {
    double p = static_cast<double>(s) + a * std::sin(std::numbers::pi * static_cast<double>(s) / last);
    p = std::clamp(p, 0.0, last);
    const auto lo = static_cast<std::size_t>(std::floor(p));
    const auto hi = std::min(lo + 1, w - 1);
    const double f = p - static_cast<double>(lo);
    for (std::size_t i = 0; i < row; ++i)
      x.data()[s * row + i] = (1.0 - f) * src.data()[lo * row + i] + f * src.data()[hi * row + i];
  }
}

/// One view: jitter always, then one of {mask, scale, warp} chosen uniformly.
inline AugmentedView augment_view(const Tensor& window, const AugmentParams& p, Rng& rng) {
  AugmentedView v{window, AugmentOp::none, std::vector<std::uint8_t>(window.dim(0), 0)};
  jitter_inplace(v.x, p.jitter, rng);
  switch (rng.below(3)) {
    case 0:
      v.op = AugmentOp::mask;
      v.masked = time_mask_inplace(v.x, p.mask_ratio, rng);
      break;
    case 1:
      v.op = AugmentOp::scale;
      scale_inplace(v.x, p.scale_min, p.scale_max, rng);
      break;
    default:
      v.op = AugmentOp::warp;
      time_warp_inplace(v.x, p.warp_max_shift, rng);
      break;
  }
  return v;
}

inline std::pair<AugmentedView, AugmentedView> augment(const Tensor& window, const AugmentParams& p, Rng& rng) {
  auto a = augment_view(window, p, rng);
  auto b = augment_view(window, p, rng);
  return {std::move(a), std::move(b)};
}

inline std::pair<AugmentedView, AugmentedView> augment(const Tensor& window, const AugmentParams& p, std::uint64_t seed) {
  Rng rng(seed);
  return augment(window, p, rng);
}

// ---------------------------------------------------------------------------
// Teacher / student
// ---------------------------------------------------------------------------

struct TeacherStudent {
  ModelState student;
  ModelState teacher;
  std::uint64_t t = 0;  // completed adaptation steps
  Optimizer optimizer;
  Rng rng;

  TeacherStudent() = default;
  TeacherStudent(const ModelState& pretrained, const AdaptConfig& cfg)
      : student(pretrained),
        teacher(pretrained),
        optimizer(OptimizerConfig{cfg.optimizer, cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.clip_norm}),
        rng(cfg.seed ^ 0xADA97ull) {}

  const ModelState& predictor(Predictor p) const { return p == Predictor::teacher ? teacher : student; }
};

/// teacher <- mu * teacher + (1 - mu) * student, elementwise.
inline void ema_update(ModelState& teacher, const ModelState& student, double mu) {
  if (teacher.params.size() != student.params.size()) throw ShapeError("ema_update: parameter count mismatch");
  for (std::size_t i = 0; i < teacher.params.size(); ++i) {
    auto& tp = teacher.params[i];
    const auto& sp = student.params[i];
    if (tp.rows() != sp.rows() || tp.cols() != sp.cols()) throw ShapeError("ema_update: shape mismatch for " + param_names()[i]);
    tp = mu * tp + (1.0 - mu) * sp;
  }
}

inline void ema_update(TeacherStudent& ts, double mu) { ema_update(ts.teacher, ts.student, mu); }

// ---------------------------------------------------------------------------
// Loss pieces
// ---------------------------------------------------------------------------

/// c_v = exp(-|y1_v - y2_v| / sigma).
inline Eigen::VectorXd confidence_scores(const Eigen::VectorXd& y1, const Eigen::VectorXd& y2, double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("confidence: sigma must be > 0");
  if (y1.size() != y2.size()) throw ShapeError("confidence: prediction length mismatch");
  return (-(y1 - y2).cwiseAbs() / sigma).array().exp().matrix();
}

/// Teacher predictions on both views, then the scores above.
inline Eigen::VectorXd confidence_scores(const ModelState& teacher, const Tensor& view1, const Tensor& view2,
                                         const GraphContext& g, double sigma) {
  const Mat y = predict_batch(teacher, {&view1, &view2}, g);
  return confidence_scores(y.row(0).transpose(), y.row(1).transpose(), sigma);
}

inline std::vector<Eigen::Index> passing_rows(const Eigen::VectorXd& confidence, double tau, Eigen::Index offset = 0) {
  std::vector<Eigen::Index> rows;
  for (Eigen::Index v = 0; v < confidence.size(); ++v)
    if (confidence[v] >= tau) rows.push_back(offset + v);
  return rows;
}

/// Mean |pred[r] - target[r]| over the given rows of a column vector; a
/// gradient-free zero when no row passes.
inline Var masked_l1(Tape& tape, Var pred, const Eigen::VectorXd& target, const std::vector<Eigen::Index>& rows,
                     Eigen::Index target_offset = 0) {
  if (rows.empty()) return tape.constant(Mat::Zero(1, 1));
  Mat tgt(static_cast<Eigen::Index>(rows.size()), 1);
  for (std::size_t i = 0; i < rows.size(); ++i) tgt(static_cast<Eigen::Index>(i), 0) = target[rows[i] - target_offset];
  return tape.mean(tape.abs(tape.sub(tape.gather_rows(pred, rows), tape.constant(std::move(tgt)))));
}

/// sum over edges of w_uv * ||Z[u] - Z[v]||^2 for each stacked window block,
/// averaged over blocks. Z has blocks * N rows.
inline Var graph_regularizer(Tape& tape, Var z, const std::vector<GraphEdge>& edges, std::size_t nodes,
                             std::size_t block_begin = 0, std::size_t blocks = 1) {
  if (edges.empty() || blocks == 0) return tape.constant(Mat::Zero(1, 1));
  std::vector<Eigen::Index> us, vs;
  Mat w(static_cast<Eigen::Index>(edges.size() * blocks), tape.value(z).cols());
  for (std::size_t b = 0; b < blocks; ++b)
    for (std::size_t e = 0; e < edges.size(); ++e) {
      us.push_back(static_cast<Eigen::Index>((block_begin + b) * nodes + edges[e].u));
      vs.push_back(static_cast<Eigen::Index>((block_begin + b) * nodes + edges[e].v));
      w.row(static_cast<Eigen::Index>(b * edges.size() + e)).setConstant(edges[e].weight / static_cast<double>(blocks));
    }
  const Var diff = tape.sub(tape.gather_rows(z, std::move(us)), tape.gather_rows(z, std::move(vs)));
  return tape.weighted_sum(tape.square(diff), std::move(w));
}

inline double graph_regularizer(const Mat& z, const std::vector<GraphEdge>& edges) {
  double s = 0.0;
  for (const auto& e : edges)
    s += e.weight * (z.row(static_cast<Eigen::Index>(e.u)) - z.row(static_cast<Eigen::Index>(e.v))).squaredNorm();
  return s;
}

/// mean_v (pred_v - teacher_v)^2 over rows [offset, offset + n).
inline Var entropy_proxy(Tape& tape, Var pred, const Eigen::VectorXd& teacher, Eigen::Index offset = 0) {
  const auto n = teacher.size();
  const Var p = (offset == 0 && tape.value(pred).rows() == n) ? pred : tape.slice_rows(pred, offset, n);
  return tape.mean(tape.square(tape.sub(p, tape.constant(Mat(teacher)))));
}

/// ||current - centroid||_2, or 0 when memory holds nothing yet.
inline double drift_score(const Eigen::VectorXd& current_mean, const std::optional<Eigen::VectorXd>& memory_centroid) {
  if (!memory_centroid) return 0.0;
  if (memory_centroid->size() != current_mean.size()) throw ShapeError("drift_score: embedding width mismatch");
  return (current_mean - *memory_centroid).norm();
}

inline double drift_score(const Mat& z, const ReplayMemory& memory) {
  return drift_score(Eigen::VectorXd(z.colwise().mean().transpose()), memory.embedding_centroid());
}

/// sigmoid(gamma * (d - delta)).
inline double drift_coefficient(double d, double gamma, double delta) {
  if (!(gamma > 0.0)) throw std::invalid_argument("drift_coefficient: gamma must be > 0");
  const double x = gamma * (d - delta);
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// ---------------------------------------------------------------------------
// One adaptation step
// ---------------------------------------------------------------------------

/// Every random draw and teacher output a step needs, fixed before the student
/// loss is built so the loss is a deterministic function of the student.
struct StepInputs {
  Tensor window;
  Tensor view1, view2;
  std::vector<Tensor> replay_raw, replay_view1, replay_view2;
  std::vector<std::size_t> replay_slots;

  Eigen::VectorXd pseudo;          // teacher on the raw window
  Eigen::VectorXd teacher_view1;   // teacher on view 1 (consistency anchor)
  Eigen::VectorXd confidence;
  Mat teacher_embeddings;          // N x D on the raw window
  std::vector<Eigen::VectorXd> replay_anchor, replay_confidence;
  std::vector<Eigen::VectorXd> replay_embedding_means;

  double drift = 0.0;
  double lambda_t = 1.0;
  double w_pl = 0.0, w_cons = 0.0, w_graph = 0.0, w_replay = 0.0, w_ent = 0.0;
  std::uint64_t dropout_seed = 0;
};

struct LossTerms {
  Var total, pl, cons, graph, replay, ent;
  double pass_rate = 0.0;
};

/// Student batch layout: [window, view2, replay_view2...], N rows each.
inline LossTerms build_adapt_loss(Tape& tape, const BoundParams& student, const ModelConfig& mc, const StepInputs& in,
                                  const GraphContext& g, const std::vector<GraphEdge>& edges, double tau) {
  const auto N = static_cast<Eigen::Index>(g.nodes);
  std::vector<const Tensor*> batch = {&in.window, &in.view2};
  for (const auto& r : in.replay_view2) batch.push_back(&r);
  Rng dropout(in.dropout_seed);
  const auto fv = forward(tape, student, mc, batch, g, Mode::train, &dropout);

  LossTerms out;
  const auto pass = passing_rows(in.confidence, tau);
  out.pass_rate = static_cast<double>(pass.size()) / static_cast<double>(N);
  out.pl = masked_l1(tape, fv.prediction, in.pseudo, pass);
  out.cons = masked_l1(tape, fv.prediction, in.teacher_view1, passing_rows(in.confidence, tau, N), N);
  out.graph = graph_regularizer(tape, fv.embeddings, edges, g.nodes, 0, 1);
  out.ent = entropy_proxy(tape, fv.prediction, in.pseudo, 0);

  const auto k = in.replay_view2.size();
  if (k == 0) {
    out.replay = tape.constant(Mat::Zero(1, 1));
  } else {
    std::vector<Var> parts;
    for (std::size_t i = 0; i < k; ++i) {
      const Eigen::Index off = static_cast<Eigen::Index>(2 + i) * N;
      parts.push_back(masked_l1(tape, fv.prediction, in.replay_anchor[i], passing_rows(in.replay_confidence[i], tau, off), off));
    }
    Var cons = parts[0];
    for (std::size_t i = 1; i < k; ++i) cons = tape.add(cons, parts[i]);
    cons = tape.scale(cons, 1.0 / static_cast<double>(k));
    out.replay = in.w_graph > 0.0 ? tape.add(cons, graph_regularizer(tape, fv.embeddings, edges, g.nodes, 2, k)) : cons;
  }

  Var total = tape.scale(tape.add(tape.scale(out.pl, in.w_pl), tape.scale(out.cons, in.w_cons)), in.lambda_t);
  total = tape.add(total, tape.scale(out.graph, in.w_graph));
  total = tape.add(total, tape.scale(out.replay, in.w_replay));
  out.total = tape.add(total, tape.scale(out.ent, in.w_ent));
  return out;
}

struct StepDiagnostics {
  std::uint64_t t = 0;
  double l_pl = 0.0, l_cons = 0.0, l_graph = 0.0, l_replay = 0.0, l_ent = 0.0;
  double drift = 0.0;
  double lambda_t = 0.0;
  double conf_rate = 0.0;
  double pl_weight = 0.0;  // effective weight on L_PL (0 during warm-up)
  double step_us = 0.0;
  bool skipped = false;    // non-finite loss or update, state rolled back

  static const char* csv_header() { return "t,L_PL,L_cons,L_graph,L_replay,L_ent,d_t,lambda_t,conf_rate,step_us"; }
};

inline void write_csv_row(std::ostream& os, const StepDiagnostics& d, bool with_time = true) {
  os << d.t << ',' << csv::num(d.l_pl) << ',' << csv::num(d.l_cons) << ',' << csv::num(d.l_graph) << ','
     << csv::num(d.l_replay) << ',' << csv::num(d.l_ent) << ',' << csv::num(d.drift) << ',' << csv::num(d.lambda_t) << ','
     << csv::num(d.conf_rate);
  if (with_time) os << ',' << csv::num(d.step_us);
  os << '\n';
}

/// Samples views and replay, runs the teacher, and fixes every weight.
inline StepInputs prepare_step(TeacherStudent& ts, const Tensor& window, const GraphContext& g, ReplayMemory& memory,
                               const AdaptConfig& cfg) {
  StepInputs in;
  in.window = window;
  auto views = augment(window, cfg.augment, ts.rng);
  in.view1 = std::move(views.first.x);
  in.view2 = std::move(views.second.x);
  if (cfg.use_replay) {
    in.replay_slots = sample_replay(memory, cfg.replay_batch, memory.rng());
    for (auto slot : in.replay_slots) {
      in.replay_raw.push_back(memory.entry(slot).window());
      auto rv = augment(in.replay_raw.back(), cfg.augment, ts.rng);
      in.replay_view1.push_back(std::move(rv.first.x));
      in.replay_view2.push_back(std::move(rv.second.x));
    }
  }
  in.dropout_seed = ts.rng.next_u64();

  // One batched teacher pass: [window, view1, view2, (raw, view1, view2) per replayed window].
  const ModelState& teacher = cfg.single_model ? ts.student : ts.teacher;
  std::vector<const Tensor*> batch = {&in.window, &in.view1, &in.view2};
  for (std::size_t i = 0; i < in.replay_slots.size(); ++i) {
    batch.push_back(&in.replay_raw[i]);
    batch.push_back(&in.replay_view1[i]);
    batch.push_back(&in.replay_view2[i]);
  }
  Tape tape;
  const auto p = bind_parameters(tape, teacher, false);
  const auto fv = forward(tape, p, teacher.config, batch, g, Mode::eval, nullptr);
  const Mat& y = tape.value(fv.prediction);
  const Mat& z = tape.value(fv.embeddings);
  const auto N = static_cast<Eigen::Index>(g.nodes);
  const auto block = [&](std::size_t b) { return Eigen::VectorXd(y.middleRows(static_cast<Eigen::Index>(b) * N, N).col(0)); };
  in.pseudo = block(0);
  in.teacher_view1 = block(1);
  in.confidence = confidence_scores(in.teacher_view1, block(2), cfg.sigma);
  in.teacher_embeddings = z.topRows(N);
  for (std::size_t i = 0; i < in.replay_slots.size(); ++i) {
    const std::size_t b = 3 + 3 * i;
    in.replay_embedding_means.push_back(z.middleRows(static_cast<Eigen::Index>(b) * N, N).colwise().mean().transpose());
    in.replay_anchor.push_back(block(b + 1));
    in.replay_confidence.push_back(confidence_scores(in.replay_anchor.back(), block(b + 2), cfg.sigma));
  }

  in.drift = drift_score(in.teacher_embeddings, memory);
  in.lambda_t = cfg.use_drift ? drift_coefficient(in.drift, cfg.gamma, cfg.delta) : 1.0;
  const bool warm = ts.t < cfg.warmup;
  in.w_pl = warm ? 0.0 : cfg.lambda_pl;
  in.w_ent = warm ? 0.0 : cfg.lambda_ent;
  in.w_cons = cfg.lambda_cons;
  in.w_graph = cfg.use_graph ? cfg.lambda_graph : 0.0;
  in.w_replay = cfg.use_replay ? cfg.lambda_replay : 0.0;
  return in;
}

/// One arrival: steps_per_arrival optimiser updates on the student, EMA
/// teacher update, then reservoir insertion of the window. The window carries
/// inputs only; labels are not reachable from here.
inline StepDiagnostics adapt_step(TeacherStudent& ts, const UnlabeledWindow& arrival, const SiteGraph& graph,
                                  const GraphContext& g, ReplayMemory& memory, const AdaptConfig& cfg) {
  AdaptationScope scope;
  const auto start = std::chrono::steady_clock::now();
  const auto edges = cfg.use_graph ? graph.smoothness_edges() : std::vector<GraphEdge>{};
  StepDiagnostics diag;
  diag.t = ts.t + 1;

  const auto memory_rng = memory.rng().state();
  const auto ts_rng = ts.rng.state();
  const auto params_before = ts.student.params;
  const Optimizer opt_before = ts.optimizer;
  StepInputs in;
  try {
    for (std::size_t s = 0; s < cfg.steps_per_arrival; ++s) {
      in = prepare_step(ts, arrival.inputs, g, memory, cfg);
      Tape tape;
      const auto p = bind_parameters(tape, ts.student, true);
      const auto terms = build_adapt_loss(tape, p, ts.student.config, in, g, edges, cfg.tau);
      if (s == 0) {
        diag.l_pl = tape.scalar(terms.pl);
        diag.l_cons = tape.scalar(terms.cons);
        diag.l_graph = tape.scalar(terms.graph);
        diag.l_replay = tape.scalar(terms.replay);
        diag.l_ent = tape.scalar(terms.ent);
        diag.drift = in.drift;
        diag.lambda_t = in.lambda_t;
        diag.conf_rate = terms.pass_rate;
        diag.pl_weight = in.w_pl;
      }
      if (!std::isfinite(tape.scalar(terms.total))) throw NumericError("non-finite adaptation loss");
      ts.optimizer.step(ts.student.params, tape.backward(terms.total, kParamCount));
      if (!ts.student.all_finite()) throw NumericError("non-finite student parameters after update");
    }
  } catch (const NumericError&) {
    ts.student.params = params_before;
    ts.optimizer = opt_before;
    memory.rng().set_state(memory_rng);
    ts.rng.set_state(ts_rng);
    diag.skipped = true;
    diag.step_us = std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - start).count();
    return diag;
  }

  if (cfg.single_model) ts.teacher.params = ts.student.params;
  else ema_update(ts, cfg.mu);
  ++ts.t;
  for (std::size_t i = 0; i < in.replay_slots.size(); ++i) memory.refresh_embedding(in.replay_slots[i], in.replay_embedding_means[i], ts.t);
  memory.reservoir_insert(arrival.inputs, memory.seen() + 1, in.teacher_embeddings.colwise().mean().transpose());
  diag.step_us = std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - start).count();
  return diag;
}

}  // namespace freegnn
