#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "freegnn/graph.hpp"
#include "freegnn/numerics/tape.hpp"
#include "freegnn/rng.hpp"

namespace freegnn {

enum class OutputActivation { sigmoid, linear };

inline std::string to_string(OutputActivation a) { return a == OutputActivation::sigmoid ? "sigmoid" : "linear"; }
inline OutputActivation parse_output_activation(const std::string& s) {
  if (s == "sigmoid") return OutputActivation::sigmoid;
  if (s == "linear") return OutputActivation::linear;
  throw std::invalid_argument("unknown output activation '" + s + "' (expected sigmoid|linear)");
}

struct ModelConfig {
  std::size_t input_dim = 1;   // d
  std::size_t window = 24;     // w
  std::size_t horizon = 1;     // h
  std::size_t embed_dim = 128; // temporal encoder width
  std::size_t hidden_dim = 64; // propagation / attention width (also the embedding width d_z)
  std::size_t heads = 4;
  double leaky_slope = 0.2;
  double dropout = 0.5;
  OutputActivation output = OutputActivation::sigmoid;

  std::size_t head_dim() const { return hidden_dim / heads; }

  void validate() const {
    if (input_dim < 1 || window < 1 || horizon < 1 || embed_dim < 1 || hidden_dim < 1 || heads < 1) {
      throw std::invalid_argument("model config: all dimensions must be >= 1");
    }
    if (hidden_dim % heads != 0) throw std::invalid_argument("model config: heads must divide hidden_dim");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("model config: dropout must be in [0, 1)");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"input_dim", c.input_dim}, {"window", c.window},     {"horizon", c.horizon},
       {"embed_dim", c.embed_dim}, {"hidden_dim", c.hidden_dim}, {"heads", c.heads},
       {"leaky_slope", c.leaky_slope}, {"dropout", c.dropout}, {"output", to_string(c.output)}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  const nlohmann::json defaults = ModelConfig{};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!defaults.contains(it.key())) throw std::invalid_argument("model config: unknown key '" + it.key() + "'");
  const ModelConfig d;
  c.input_dim = j.value("input_dim", d.input_dim);
  c.window = j.value("window", d.window);
  c.horizon = j.value("horizon", d.horizon);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.hidden_dim = j.value("hidden_dim", d.hidden_dim);
  c.heads = j.value("heads", d.heads);
  c.leaky_slope = j.value("leaky_slope", d.leaky_slope);
  c.dropout = j.value("dropout", d.dropout);
  c.output = parse_output_activation(j.value("output", to_string(d.output)));
}

enum class Mode { train, eval };

/// Parameter slots, in checkpoint order.
enum Param : int {
  kGruWx,     // d x 3E   input -> (reset, update, candidate)
  kGruWh,     // E x 3E   hidden -> (reset, update, candidate)
  kGruBx,     // 1 x 3E
  kGruBh,     // 1 x 3E
  kGc1Self,   // E x D
  kGc1Nb,     // E x D
  kGc1B,      // 1 x D
  kGc2Self,   // D x D
  kGc2Nb,     // D x D
  kGc2B,      // 1 x D
  kAttW,      // D x D
  kAttSrc,    // 1 x D   per-head source scoring vectors, concatenated
  kAttDst,    // 1 x D
  kAttB,      // 1 x D
  kHeadW,     // D x 1
  kHeadB,     // 1 x 1
  kParamCount
};

inline const std::vector<std::string>& param_names() {
  static const std::vector<std::string> names = {
      "encoder.w_input", "encoder.w_hidden", "encoder.b_input", "encoder.b_hidden",
      "prop1.w_self",    "prop1.w_neigh",    "prop1.bias",      "prop2.w_self",
      "prop2.w_neigh",   "prop2.bias",       "attn.w",          "attn.a_src",
      "attn.a_dst",      "attn.bias",        "head.w",          "head.bias"};
  return names;
}

inline std::vector<std::pair<Eigen::Index, Eigen::Index>> param_shapes(const ModelConfig& c) {
  const auto d = static_cast<Eigen::Index>(c.input_dim);
  const auto E = static_cast<Eigen::Index>(c.embed_dim);
  const auto D = static_cast<Eigen::Index>(c.hidden_dim);
  return {{d, 3 * E}, {E, 3 * E}, {1, 3 * E}, {1, 3 * E}, {E, D}, {E, D}, {1, D}, {D, D},
          {D, D},     {1, D},     {D, D},      {1, D},     {1, D}, {1, D}, {D, 1}, {1, 1}};
}

/// All learnable parameters of the forecaster.
struct ModelState {
  ModelConfig config;
  std::uint64_t seed = 0;
  std::vector<Mat> params;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += static_cast<std::size_t>(p.size());
    return n;
  }

  Eigen::VectorXd flatten() const {
    Eigen::VectorXd v(static_cast<Eigen::Index>(parameter_count()));
    Eigen::Index o = 0;
    for (const auto& p : params) {
      v.segment(o, p.size()) = Eigen::Map<const Eigen::VectorXd>(p.data(), p.size());
      o += p.size();
    }
    return v;
  }

  void assign_flat(const Eigen::VectorXd& v) {
    if (v.size() != static_cast<Eigen::Index>(parameter_count())) throw ShapeError("assign_flat: length mismatch");
    Eigen::Index o = 0;
    for (auto& p : params) {
      Eigen::Map<Eigen::VectorXd>(p.data(), p.size()) = v.segment(o, p.size());
      o += p.size();
    }
  }

  bool all_finite() const {
    for (const auto& p : params)
      if (!p.allFinite()) return false;
    return true;
  }
};

/// Fan-in scaled uniform weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero.
inline ModelState init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelState s;
  s.config = config;
  s.seed = seed;
  Rng rng(seed ^ 0x5EEDF00Dull);
  const auto shapes = param_shapes(config);
  const bool is_bias[kParamCount] = {false, false, true, true, false, false, true, false,
                                     false, true,  false, false, false, true, false, true};
  for (int i = 0; i < kParamCount; ++i) {
    auto [r, c] = shapes[static_cast<std::size_t>(i)];
    Mat m = Mat::Zero(r, c);
    if (!is_bias[i]) {
      // Attention vectors act per head, so their fan-in is the head width.
      const double fan_in = (i == kAttSrc || i == kAttDst) ? static_cast<double>(config.head_dim()) : static_cast<double>(r);
      const double bound = 1.0 / std::sqrt(fan_in);
      for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = rng.uniform(-bound, bound);
    }
    s.params.push_back(std::move(m));
  }
  return s;
}

/// Graph quantities the forward pass needs, precomputed once per graph.
struct GraphContext {
  std::size_t nodes = 0;
  Mat alpha;
  Mat attention_mask;

  explicit GraphContext(const SiteGraph& g)
      : nodes(g.node_count()), alpha(g.alpha), attention_mask(g.attention_mask()) {
    if (alpha.rows() != adjacency_rows(g)) throw std::invalid_argument("graph has no normalised weights; call normalize()");
  }

 private:
  static Eigen::Index adjacency_rows(const SiteGraph& g) { return g.adjacency.rows(); }
};

/// Parameters bound onto a tape, either as trainable leaves or constants.
struct BoundParams {
  std::vector<Var> vars;
  Var operator[](int i) const { return vars[static_cast<std::size_t>(i)]; }
};

inline BoundParams bind_parameters(Tape& tape, const ModelState& state, bool trainable) {
  BoundParams b;
  b.vars.reserve(state.params.size());
  for (std::size_t i = 0; i < state.params.size(); ++i)
    b.vars.push_back(trainable ? tape.parameter(state.params[i], static_cast<int>(i)) : tape.constant(state.params[i]));
  return b;
}

/// Values on the tape for a batch of B windows stacked block-wise (B*N rows,
/// window b occupies rows [b*N, (b+1)*N)).
struct ForwardVars {
  Var temporal;    // B*N x E
  Var propagated;  // B*N x D (after the second propagation layer)
  Var embeddings;  // B*N x D (attention output, Z)
  Var prediction;  // B*N x 1
  std::size_t windows = 0;
};

inline void check_window(const Tensor& x, const ModelConfig& c, std::size_t nodes) {
  if (x.rank() != 3) throw ShapeError("window must be rank 3 (w x N x d), got " + shape_string(x.shape()));
  if (x.dim(0) != c.window) throw ShapeError("window length " + std::to_string(x.dim(0)) + " != configured w=" + std::to_string(c.window));
  if (x.dim(1) != nodes) throw ShapeError("window has " + std::to_string(x.dim(1)) + " nodes, graph has " + std::to_string(nodes));
  if (x.dim(2) != c.input_dim) throw ShapeError("window feature dim " + std::to_string(x.dim(2)) + " != d=" + std::to_string(c.input_dim));
  if (!x.all_finite()) throw NumericError("window contains NaN/Inf");
}

/// Gated recurrent encoder run independently per node with shared weights;
/// returns the final hidden state of every node (B*N x E).
inline Var encode_temporal(Tape& tape, const BoundParams& p, const ModelConfig& c,
                           const std::vector<const Tensor*>& windows, std::size_t nodes) {
  const auto B = windows.size();
  if (B == 0) throw ShapeError("encode_temporal: empty batch");
  for (const Tensor* x : windows) check_window(*x, c, nodes);
  const auto w = static_cast<Eigen::Index>(c.window);
  const auto rows = static_cast<Eigen::Index>(B * nodes);
  const auto d = static_cast<Eigen::Index>(c.input_dim);
  const auto E = static_cast<Eigen::Index>(c.embed_dim);

  Var h = tape.constant(Mat::Zero(rows, E));
  for (Eigen::Index s = 0; s < w; ++s) {
    Mat xs(rows, d);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t v = 0; v < nodes; ++v) {
        const double* src = windows[b]->data() + (static_cast<std::size_t>(s) * nodes + v) * c.input_dim;
        std::copy(src, src + d, xs.row(static_cast<Eigen::Index>(b * nodes + v)).data());
      }
    h = tape.gru_step(tape.constant(std::move(xs)), h, p[kGruWx], p[kGruBx], p[kGruWh], p[kGruBh]);
  }
  return h;
}

inline Var apply_dropout(Tape& tape, Var x, double rate, Mode mode, Rng* rng) {
  if (mode == Mode::eval || rate <= 0.0) return x;
  if (rng == nullptr) throw std::invalid_argument("train-mode forward with dropout needs an RNG");
  const Mat& v = tape.value(x);
  Mat mask(v.rows(), v.cols());
  const double keep = 1.0 - rate;
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = rng->uniform() < keep ? 1.0 / keep : 0.0;
  return tape.mul_const(x, std::move(mask));
}

/// One propagation layer: ReLU(H W_self + (alpha H) W_neigh + b).
inline Var propagation_layer(Tape& tape, Var h, Var w_self, Var w_nb, Var bias, const GraphContext& g) {
  const Var self = tape.matmul(h, w_self);
  const Var nb = tape.matmul(tape.graph_aggregate(h, g.alpha), w_nb);
  return tape.relu(tape.add_row(tape.add(self, nb), bias));
}

struct PropagateVars {
  Var propagated;
  Var embeddings;
};

/// Two propagation layers (dropout between in train mode), then multi-head
/// attention over neighbours-plus-self producing Z.
inline PropagateVars propagate(Tape& tape, const BoundParams& p, const ModelConfig& c, Var temporal,
                               const GraphContext& g, Mode mode, Rng* rng) {
  if (tape.value(temporal).rows() % static_cast<Eigen::Index>(g.nodes) != 0) throw ShapeError("propagate: rows not a multiple of N");
  if (tape.value(temporal).cols() != static_cast<Eigen::Index>(c.embed_dim)) throw ShapeError("propagate: temporal width mismatch");
  Var h1 = propagation_layer(tape, temporal, p[kGc1Self], p[kGc1Nb], p[kGc1B], g);
  h1 = apply_dropout(tape, h1, c.dropout, mode, rng);
  Var h2 = propagation_layer(tape, h1, p[kGc2Self], p[kGc2Nb], p[kGc2B], g);
  h2 = apply_dropout(tape, h2, c.dropout, mode, rng);
  const Var wh = tape.matmul(h2, p[kAttW]);
  const Var att = tape.graph_attention(wh, p[kAttSrc], p[kAttDst], g.attention_mask, static_cast<int>(c.heads), c.leaky_slope);
  return {h2, tape.add_row(att, p[kAttB])};
}

inline Var prediction_head(Tape& tape, const BoundParams& p, const ModelConfig& c, Var z) {
  const Var y = tape.add_row(tape.matmul(z, p[kHeadW]), p[kHeadB]);
  return c.output == OutputActivation::sigmoid ? tape.sigmoid(y) : y;
}

inline ForwardVars forward(Tape& tape, const BoundParams& p, const ModelConfig& c,
                           const std::vector<const Tensor*>& windows, const GraphContext& g, Mode mode, Rng* rng) {
  ForwardVars out;
  out.windows = windows.size();
  out.temporal = encode_temporal(tape, p, c, windows, g.nodes);
  const auto pv = propagate(tape, p, c, out.temporal, g, mode, rng);
  out.propagated = pv.propagated;
  out.embeddings = pv.embeddings;
  out.prediction = prediction_head(tape, p, c, out.embeddings);
  return out;
}

/// Concrete forward result for a single window.
struct ForwardOutput {
  Eigen::VectorXd prediction;  // N
  Mat embeddings;              // N x D
  Mat temporal;                // N x E
};

inline ForwardOutput forward(const ModelState& state, const Tensor& window, const SiteGraph& graph,
                             Mode mode = Mode::eval, Rng* rng = nullptr) {
  Tape tape;
  const auto p = bind_parameters(tape, state, false);
  const GraphContext g(graph);
  const auto fv = forward(tape, p, state.config, {&window}, g, mode, rng);
  return {tape.value(fv.prediction).col(0), tape.value(fv.embeddings), tape.value(fv.temporal)};
}

/// Predictions for many windows in one batched eval pass; row b holds window b.
inline Mat predict_batch(const ModelState& state, const std::vector<const Tensor*>& windows, const GraphContext& g) {
  Tape tape;
  const auto p = bind_parameters(tape, state, false);
  const auto fv = forward(tape, p, state.config, windows, g, Mode::eval, nullptr);
  const Mat& y = tape.value(fv.prediction);
  return Eigen::Map<const Mat>(y.data(), static_cast<Eigen::Index>(windows.size()), static_cast<Eigen::Index>(g.nodes));
}

}  // namespace freegnn
