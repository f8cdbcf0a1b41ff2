#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "freegnn/checkpoint.hpp"
#include "freegnn/model.hpp"
#include "freegnn/numerics/gradcheck.hpp"

using namespace freegnn;

namespace {

ModelConfig small_config(std::size_t d = 2, std::size_t w = 3) {
  ModelConfig c;
  c.input_dim = d;
  c.window = w;
  c.embed_dim = 8;
  c.hidden_dim = 8;
  c.heads = 2;
  c.dropout = 0.5;
  return c;
}

Tensor random_window(Rng& rng, std::size_t w, std::size_t n, std::size_t d) {
  Tensor x({w, n, d});
  for (auto& v : x.values()) v = rng.uniform(-1.0, 1.0);
  return x;
}

SiteGraph path_graph(std::size_t n) {
  std::vector<GraphEdge> e;
  for (std::size_t i = 0; i + 1 < n; ++i) e.push_back({i, i + 1, 1.0 + 0.5 * static_cast<double>(i)});
  return graph_from_edges(n, e);
}

// ---- naive loop reference of the whole forward pass (eval mode) ----------------

double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct Reference {
  std::vector<std::vector<double>> H, Z;
  std::vector<double> y;
};

Reference reference_forward(const ModelState& s, const Tensor& x, const SiteGraph& g) {
  const auto& c = s.config;
  const auto& P = s.params;
  const std::size_t N = g.node_count(), d = c.input_dim, E = c.embed_dim, D = c.hidden_dim;
  Reference ref;
  ref.H.assign(N, std::vector<double>(E, 0.0));
  for (std::size_t v = 0; v < N; ++v) {
    std::vector<double> h(E, 0.0);
    for (std::size_t t = 0; t < c.window; ++t) {
      std::vector<double> xp(3 * E), hp(3 * E);
      for (std::size_t j = 0; j < 3 * E; ++j) {
        xp[j] = P[kGruBx](0, static_cast<Eigen::Index>(j));
        for (std::size_t k = 0; k < d; ++k) xp[j] += x.at(t, v, k) * P[kGruWx](static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j));
        hp[j] = P[kGruBh](0, static_cast<Eigen::Index>(j));
        for (std::size_t k = 0; k < E; ++k) hp[j] += h[k] * P[kGruWh](static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j));
      }
      std::vector<double> nh(E);
      for (std::size_t j = 0; j < E; ++j) {
        const double r = sigm(xp[j] + hp[j]);
        const double z = sigm(xp[E + j] + hp[E + j]);
        const double n = std::tanh(xp[2 * E + j] + r * hp[2 * E + j]);
        nh[j] = (1.0 - z) * n + z * h[j];
      }
      h = nh;
    }
    ref.H[v] = h;
  }
  auto layer = [&](const std::vector<std::vector<double>>& in, int ws, int wn, int wb) {
    const std::size_t din = in[0].size();
    std::vector<std::vector<double>> out(N, std::vector<double>(D));
    for (std::size_t v = 0; v < N; ++v)
      for (std::size_t j = 0; j < D; ++j) {
        double acc = P[static_cast<std::size_t>(wb)](0, static_cast<Eigen::Index>(j));
        for (std::size_t k = 0; k < din; ++k) {
          acc += in[v][k] * P[static_cast<std::size_t>(ws)](static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j));
          double nb = 0.0;
          for (std::size_t u = 0; u < N; ++u) nb += g.alpha(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(u)) * in[u][k];
          acc += nb * P[static_cast<std::size_t>(wn)](static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j));
        }
        out[v][j] = std::max(0.0, acc);
      }
    return out;
  };
  const auto h1 = layer(ref.H, kGc1Self, kGc1Nb, kGc1B);
  const auto h2 = layer(h1, kGc2Self, kGc2Nb, kGc2B);
  std::vector<std::vector<double>> wh(N, std::vector<double>(D, 0.0));
  for (std::size_t v = 0; v < N; ++v)
    for (std::size_t j = 0; j < D; ++j)
      for (std::size_t k = 0; k < D; ++k) wh[v][j] += h2[v][k] * P[kAttW](static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j));
  const std::size_t p = D / c.heads;
  ref.Z.assign(N, std::vector<double>(D, 0.0));
  const Mat mask = g.attention_mask();
  for (std::size_t k = 0; k < c.heads; ++k)
    for (std::size_t v = 0; v < N; ++v) {
      std::vector<double> e(N, -INFINITY);
      for (std::size_t u = 0; u < N; ++u) {
        if (mask(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(u)) == 0.0) continue;
        double s = 0.0;
        for (std::size_t q = k * p; q < (k + 1) * p; ++q)
          s += P[kAttDst](0, static_cast<Eigen::Index>(q)) * wh[v][q] + P[kAttSrc](0, static_cast<Eigen::Index>(q)) * wh[u][q];
        e[u] = s > 0 ? s : c.leaky_slope * s;
      }
      const double mx = *std::max_element(e.begin(), e.end());
      double zsum = 0.0;
      for (auto& ev : e) zsum += (ev = std::exp(ev - mx));
      for (std::size_t u = 0; u < N; ++u)
        for (std::size_t q = k * p; q < (k + 1) * p; ++q) ref.Z[v][q] += e[u] / zsum * wh[u][q];
    }
  for (std::size_t v = 0; v < N; ++v)
    for (std::size_t q = 0; q < D; ++q) ref.Z[v][q] += P[kAttB](0, static_cast<Eigen::Index>(q));
  for (std::size_t v = 0; v < N; ++v) {
    double o = P[kHeadB](0, 0);
    for (std::size_t q = 0; q < D; ++q) o += ref.Z[v][q] * P[kHeadW](static_cast<Eigen::Index>(q), 0);
    ref.y.push_back(c.output == OutputActivation::sigmoid ? sigm(o) : o);
  }
  return ref;
}

ModelState randomised(ModelConfig c, std::uint64_t seed) {
  auto s = init_model(c, seed);
  Rng rng(seed + 99);
  for (auto& p : s.params)  // non-zero biases so every path is exercised
    for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] += rng.uniform(-0.2, 0.2);
  return s;
}

}  // namespace

TEST(ModelInit, DeterministicPerSeed) {
  const auto c = small_config();
  const auto a = init_model(c, 7), b = init_model(c, 7), other = init_model(c, 8);
  ASSERT_EQ(a.params.size(), static_cast<std::size_t>(kParamCount));
  for (std::size_t i = 0; i < a.params.size(); ++i) EXPECT_EQ(a.params[i], b.params[i]);
  EXPECT_NE(a.params[kGruWx], other.params[kGruWx]);
}

TEST(ModelInit, FanInBoundsAndZeroBiases) {
  const auto c = small_config();
  const auto s = init_model(c, 1);
  EXPECT_TRUE(s.params[kGruBx].isZero());
  EXPECT_TRUE(s.params[kGc1B].isZero());
  EXPECT_TRUE(s.params[kHeadB].isZero());
  EXPECT_LE(s.params[kGruWh].cwiseAbs().maxCoeff(), 1.0 / std::sqrt(8.0));
  EXPECT_LE(s.params[kGruWx].cwiseAbs().maxCoeff(), 1.0 / std::sqrt(2.0));
}

TEST(ModelConfig, HeadDimAndValidation) {
  ModelConfig c;
  EXPECT_EQ(c.head_dim(), 16u);
  c.heads = 5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = ModelConfig{};
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = ModelConfig{};
  c.window = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(ModelForward, MatchesLoopReference) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto c = small_config(3, 4);
    c.output = seed % 2 ? OutputActivation::linear : OutputActivation::sigmoid;
    const auto s = randomised(c, seed);
    Rng rng(seed);
    const auto x = random_window(rng, c.window, 4, c.input_dim);
    const auto g = path_graph(4);
    const auto out = forward(s, x, g);
    const auto ref = reference_forward(s, x, g);
    for (std::size_t v = 0; v < 4; ++v) {
      EXPECT_NEAR(out.prediction(static_cast<Eigen::Index>(v)), ref.y[v], 1e-12);
      for (std::size_t q = 0; q < c.hidden_dim; ++q) EXPECT_NEAR(out.embeddings(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(q)), ref.Z[v][q], 1e-12);
      for (std::size_t q = 0; q < c.embed_dim; ++q) EXPECT_NEAR(out.temporal(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(q)), ref.H[v][q], 1e-12);
    }
  }
}

TEST(ModelForward, SingleStepEqualsDirectCellEvaluation) {
  auto c = small_config(2, 1);
  const auto s = randomised(c, 3);
  Rng rng(3);
  const auto x = random_window(rng, 1, 2, 2);
  const auto out = forward(s, x, path_graph(2));
  // With h0 = 0 one cell step is (1 - z) * n, z = sig(x Wz + bxz + bhz), n = tanh(x Wn + bxn + r * bhn).
  const auto E = static_cast<Eigen::Index>(c.embed_dim);
  for (Eigen::Index v = 0; v < 2; ++v)
    for (Eigen::Index j = 0; j < E; ++j) {
      double xr = s.params[kGruBx](0, j), xz = s.params[kGruBx](0, E + j), xn = s.params[kGruBx](0, 2 * E + j);
      for (Eigen::Index k = 0; k < 2; ++k) {
        const double xi = x.at(0, static_cast<std::size_t>(v), static_cast<std::size_t>(k));
        xr += xi * s.params[kGruWx](k, j);
        xz += xi * s.params[kGruWx](k, E + j);
        xn += xi * s.params[kGruWx](k, 2 * E + j);
      }
      const double r = sigm(xr + s.params[kGruBh](0, j));
      const double z = sigm(xz + s.params[kGruBh](0, E + j));
      const double n = std::tanh(xn + r * s.params[kGruBh](0, 2 * E + j));
      EXPECT_NEAR(out.temporal(v, j), (1.0 - z) * n, 1e-14);
    }
}

TEST(ModelForward, ZeroWindowZeroRecurrentWeightsGivesBiasPattern) {
  auto c = small_config(2, 3);
  auto s = randomised(c, 4);
  s.params[kGruWh].setZero();
  const Tensor x({3, 3, 2}, 0.0);
  const auto out = forward(s, x, path_graph(3));
  for (Eigen::Index v = 1; v < 3; ++v) EXPECT_EQ(out.temporal.row(v), out.temporal.row(0));
  EXPECT_GT(out.temporal.cwiseAbs().maxCoeff(), 0.0);
}

TEST(ModelForward, HandComputedMessagePass) {
  // N=2, H = [[1,0],[0,2]], alpha swaps the nodes, W_self = I, W_nb = 0.5 I, b = [0,-1].
  Tape tape;
  Mat H(2, 2), I = Mat::Identity(2, 2), b(1, 2);
  H << 1, 0, 0, 2;
  b << 0, -1;
  GraphContext g(graph_from_edges(2, {{0, 1, 1.0}}));
  const Var out = propagation_layer(tape, tape.constant(H), tape.constant(I), tape.constant(0.5 * I), tape.constant(b), g);
  Mat expected(2, 2);
  // node0: relu([1,0] + 0.5*[0,2] + [0,-1]) = [1,0]; node1: relu([0,2] + 0.5*[1,0] + [0,-1]) = [0.5,1]
  expected << 1, 0, 0.5, 1;
  EXPECT_EQ(tape.value(out), expected);
}

TEST(ModelForward, IsolatedNodeIgnoresOthers) {
  const auto c = small_config(2, 3);
  const auto s = randomised(c, 5);
  const auto g = graph_from_edges(3, {{0, 1, 1.0}});  // node 2 isolated
  Rng rng(5);
  auto x = random_window(rng, 3, 3, 2);
  const auto base = forward(s, x, g);
  for (std::size_t t = 0; t < 3; ++t) x.at(t, 0, 0) += 0.7;
  const auto moved = forward(s, x, g);
  EXPECT_EQ(base.prediction(2), moved.prediction(2));
  EXPECT_NE(base.prediction(1), moved.prediction(1));
}

TEST(ModelForward, IdenticalNodesOnCompleteGraphGiveIdenticalRows) {
  const auto c = small_config(2, 3);
  const auto s = randomised(c, 6);
  const auto g = graph_from_edges(4, {{0, 1, 1}, {0, 2, 1}, {0, 3, 1}, {1, 2, 1}, {1, 3, 1}, {2, 3, 1}});
  Tensor x({3, 4, 2});
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t v = 0; v < 4; ++v) {
      x.at(t, v, 0) = 0.3 * static_cast<double>(t);
      x.at(t, v, 1) = -0.1;
    }
  const auto out = forward(s, x, g);
  for (Eigen::Index v = 1; v < 4; ++v) EXPECT_EQ(out.embeddings.row(v), out.embeddings.row(0));
}

TEST(ModelForward, PermutationEquivariance) {
  const auto c = small_config(2, 3);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto s = randomised(c, seed);
    Rng rng(seed + 1);
    const std::size_t N = 5;
    Mat coords(5, 2);
    for (Eigen::Index i = 0; i < coords.size(); ++i) coords.data()[i] = rng.uniform(0, 2);
    const auto g = build_adjacency_distance(coords, 1.0, 1.5);
    const auto x = random_window(rng, 3, N, 2);
    const auto perm = sample_without_replacement(rng, N, N);
    Tensor px({3, N, 2});
    for (std::size_t t = 0; t < 3; ++t)
      for (std::size_t v = 0; v < N; ++v)
        for (std::size_t k = 0; k < 2; ++k) px.at(t, v, k) = x.at(t, perm[v], k);
    const auto a = forward(s, x, g), b = forward(s, px, permute(g, perm));
    for (std::size_t v = 0; v < N; ++v) {
      EXPECT_NEAR(b.prediction(static_cast<Eigen::Index>(v)), a.prediction(static_cast<Eigen::Index>(perm[v])), 1e-13);
      EXPECT_LT((b.temporal.row(static_cast<Eigen::Index>(v)) - a.temporal.row(static_cast<Eigen::Index>(perm[v]))).cwiseAbs().maxCoeff(), 1e-13);
    }
  }
}

TEST(ModelForward, EvalDeterministicSigmoidRangeAndDims) {
  ModelConfig c;  // default-sized stack
  c.input_dim = 5;
  c.window = 6;
  const auto s = init_model(c, 2);
  Rng rng(2);
  const auto x = random_window(rng, 6, 7, 5);
  const auto g = path_graph(7);
  const auto a = forward(s, x, g), b = forward(s, x, g);
  EXPECT_EQ(a.prediction, b.prediction);
  EXPECT_EQ(a.temporal.cols(), 128);
  EXPECT_EQ(s.params[kGc1Self].cols(), 64);
  EXPECT_EQ(s.params[kGc2Self].cols(), 64);
  EXPECT_EQ(a.embeddings.cols(), 64);
  EXPECT_EQ(s.params[kHeadW].cols(), 1);
  EXPECT_EQ(a.prediction.size(), 7);
  EXPECT_TRUE(((a.prediction.array() > 0.0) && (a.prediction.array() < 1.0)).all());
}

TEST(ModelForward, TrainModeDropoutDiffersEvalDoesNot) {
  const auto c = small_config(2, 3);
  const auto s = randomised(c, 8);
  Rng data(8);
  const auto x = random_window(data, 3, 3, 2);
  Rng r1(1), r2(2);
  const auto t1 = forward(s, x, path_graph(3), Mode::train, &r1);
  const auto t2 = forward(s, x, path_graph(3), Mode::train, &r2);
  EXPECT_NE(t1.embeddings, t2.embeddings);
  EXPECT_THROW(forward(s, x, path_graph(3), Mode::train, nullptr), std::invalid_argument);
}

TEST(ModelForward, BatchedEqualsPerWindow) {
  const auto c = small_config(2, 3);
  const auto s = randomised(c, 9);
  Rng rng(9);
  std::vector<Tensor> xs;
  for (int b = 0; b < 4; ++b) xs.push_back(random_window(rng, 3, 3, 2));
  std::vector<const Tensor*> ptrs;
  for (const auto& x : xs) ptrs.push_back(&x);
  const auto g = path_graph(3);
  const Mat batch = predict_batch(s, ptrs, GraphContext(g));
  for (int b = 0; b < 4; ++b) {
    const auto single = forward(s, xs[static_cast<std::size_t>(b)], g);
    for (Eigen::Index v = 0; v < 3; ++v) EXPECT_NEAR(batch(b, v), single.prediction(v), 1e-14);
  }
}

TEST(ModelForward, InputValidation) {
  const auto c = small_config(2, 3);
  const auto s = init_model(c, 1);
  EXPECT_THROW(forward(s, Tensor({2, 3, 2}), path_graph(3)), ShapeError);
  EXPECT_THROW(forward(s, Tensor({3, 4, 2}), path_graph(3)), ShapeError);
  EXPECT_THROW(forward(s, Tensor({3, 3, 1}), path_graph(3)), ShapeError);
  Tensor bad({3, 3, 2});
  bad[4] = NAN;
  EXPECT_THROW(forward(s, bad, path_graph(3)), NumericError);
}

TEST(ModelGradients, FiniteDifferenceOnSmallInstances) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto c = small_config(2, 3);
    c.output = seed % 2 ? OutputActivation::linear : OutputActivation::sigmoid;
    const auto s = randomised(c, seed);
    Rng rng(seed + 17);
    const auto x = random_window(rng, 3, 3, 2);
    const GraphContext g(path_graph(3));
    Mat wy(3, 1), wz(3, c.hidden_dim);
    for (Eigen::Index i = 0; i < wy.size(); ++i) wy.data()[i] = rng.uniform(-1, 1);
    for (Eigen::Index i = 0; i < wz.size(); ++i) wz.data()[i] = rng.uniform(-1, 1);
    const LossBuilder build = [&](Tape& tape, const std::vector<Var>& vars) {
      BoundParams p{vars};
      Rng drop(seed);  // same dropout mask on every evaluation
      const auto fv = forward(tape, p, c, {&x}, g, Mode::train, &drop);
      return tape.add(tape.weighted_sum(fv.prediction, wy), tape.weighted_sum(fv.embeddings, wz));
    };
    const auto report = check_gradients(build, s.params, param_names(), 1e-4);
    EXPECT_TRUE(report.pass) << "seed " << seed << '\n' << report.summary();
  }
}

TEST(ModelCost, LinearInWindowLength) {
  ModelConfig c;
  c.input_dim = 5;
  auto time_forward = [&](std::size_t w) {
    c.window = w;
    const auto s = init_model(c, 1);
    Rng rng(1);
    const auto x = random_window(rng, w, 7, 5);
    const auto g = path_graph(7);
    double best = INFINITY;
    for (int rep = 0; rep < 7; ++rep) {
      const auto t0 = std::chrono::steady_clock::now();
      (void)forward(s, x, g);
      best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    return best;
  };
  const double ratio = time_forward(48) / time_forward(24);
  EXPECT_GE(ratio, 1.5);
  EXPECT_LE(ratio, 3.0);
}

// ---- checkpoints ------------------------------------------------------------

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto c = small_config(2, 3);
  Checkpoint ck;
  ck.model = randomised(c, 21);
  Scaler sc;
  sc.kinds = {FeatureKind::power, FeatureKind::numeric};
  sc.mean = {0.1, 1.0 / 3.0};
  sc.stddev = {1.0, 2.0 / 7.0};
  sc.target_min = -0.5;
  sc.target_max = 3.25;
  ck.scaler = sc;
  ck.meta = {{"note", "round trip"}};
  const auto path = std::filesystem::temp_directory_path() / "freegnn_ck.bin";
  save_checkpoint(ck, path);
  const auto back = load_checkpoint(path);
  EXPECT_EQ(back.model.config, c);
  EXPECT_EQ(back.model.seed, ck.model.seed);
  for (std::size_t i = 0; i < ck.model.params.size(); ++i) EXPECT_EQ(back.model.params[i], ck.model.params[i]);
  EXPECT_EQ(back.scaler->mean, sc.mean);
  EXPECT_EQ(back.scaler->stddev, sc.stddev);
  EXPECT_EQ(back.meta["note"], "round trip");
  Rng rng(1);
  const auto x = random_window(rng, 3, 3, 2);
  EXPECT_EQ(forward(back.model, x, path_graph(3)).prediction, forward(ck.model, x, path_graph(3)).prediction);
  EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(ck));
}

TEST(Checkpoint, TruncatedOrFlippedFileFailsChecksum) {
  Checkpoint ck;
  ck.model = init_model(small_config(), 1);
  auto bytes = serialize_checkpoint(ck);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 100);
  EXPECT_THROW(deserialize_checkpoint(truncated), CheckpointError);
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x01;
  try {
    deserialize_checkpoint(flipped);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos);
  }
}

TEST(Checkpoint, VersionAndShapeErrors) {
  Checkpoint ck;
  ck.model = init_model(small_config(2, 3), 1);
  auto bytes = serialize_checkpoint(ck);
  // Bump the version field and re-seal the checksum.
  auto versioned = bytes;
  versioned[8] = 2;
  Fnv1a h;
  h.update(versioned.data(), versioned.size() - 8);
  const auto sum = h.digest();
  for (int i = 0; i < 8; ++i) versioned[versioned.size() - 8 + static_cast<std::size_t>(i)] = static_cast<unsigned char>(sum >> (8 * i));
  EXPECT_THROW(deserialize_checkpoint(versioned), CheckpointError);

  auto other = small_config(3, 3);  // different d
  try {
    deserialize_checkpoint(bytes, &other);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("encoder.w_input"), std::string::npos);
  }
}
