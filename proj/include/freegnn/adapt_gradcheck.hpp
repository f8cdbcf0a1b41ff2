#pragma once

// Finite-difference audit of the full adaptation objective on a small random
// instance: three sites on a path graph, every loss term active, the
// confidence threshold placed so that the mask is partially open, and a
// non-empty replay batch.

#include <algorithm>

#include "freegnn/adapt.hpp"
#include "freegnn/numerics/gradcheck.hpp"

namespace freegnn {

struct AdaptGradcheck {
  std::uint64_t seed = 0;
  GradReport report;
  std::size_t passing_nodes = 0;
  std::size_t nodes = 0;
  std::size_t replayed = 0;
  double max_rel_error = 0.0;
};

inline ModelConfig adapt_gradcheck_model() {
  ModelConfig c;
  c.input_dim = 2;
  c.window = 3;
  c.embed_dim = 8;
  c.hidden_dim = 8;
  c.heads = 2;
  c.dropout = 0.5;
  c.output = OutputActivation::linear;
  return c;
}

inline AdaptGradcheck check_adapt_gradients(std::uint64_t seed, double tolerance = 1e-4) {
  const auto mc = adapt_gradcheck_model();
  const auto graph = graph_from_edges(3, {{0, 1, 1.0}, {1, 2, 0.5}});
  const GraphContext g(graph);

  auto perturbed = [&](std::uint64_t s) {
    auto m = init_model(mc, s);
    Rng rng(s * 31 + 5);
    for (auto& p : m.params)
      for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] += 0.3 * rng.uniform(-1.0, 1.0);
    return m;
  };
  auto random_window = [&](Rng& rng) {
    Tensor x({mc.window, 3, mc.input_dim});
    for (auto& v : x.values()) v = rng.uniform(-1.0, 1.0);
    return x;
  };

  AdaptConfig cfg;
  cfg.warmup = 0;
  cfg.replay_batch = 3;
  cfg.seed = seed;
  cfg.augment.jitter = 0.2;
  cfg.sigma = 0.05;
  TeacherStudent ts(perturbed(seed), cfg);
  ts.teacher = perturbed(seed + 1000);

  Rng rng(seed + 1);
  ReplayMemory memory(16, 77);
  for (std::uint64_t t = 1; t <= 5; ++t) {
    const auto x = random_window(rng);
    Tape tape;
    const auto fv = forward(tape, bind_parameters(tape, ts.teacher, false), mc, {&x}, g, Mode::eval, nullptr);
    memory.reservoir_insert(x, t, tape.value(fv.embeddings).colwise().mean().transpose());
  }
  const auto window = random_window(rng);

  const auto in = prepare_step(ts, window, g, memory, cfg);
  std::vector<double> c(in.confidence.data(), in.confidence.data() + in.confidence.size());
  std::sort(c.begin(), c.end());
  const double tau = 0.5 * (c[0] + c[1]);  // strictly inside the score range: some nodes pass, some do not

  AdaptGradcheck out;
  out.seed = seed;
  out.nodes = c.size();
  out.passing_nodes = passing_rows(in.confidence, tau).size();
  out.replayed = in.replay_view2.size();
  const auto edges = graph.smoothness_edges();
  const LossBuilder build = [&](Tape& tape, const std::vector<Var>& vars) {
    return build_adapt_loss(tape, BoundParams{vars}, mc, in, g, edges, tau).total;
  };
  out.report = check_gradients(build, ts.student.params, param_names(), tolerance);
  for (const auto& p : out.report.params)
    if (p.judged) out.max_rel_error = std::max(out.max_rel_error, p.max_rel_error);
  return out;
}

}  // namespace freegnn
