#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "freegnn/memory.hpp"
#include "oracles.hpp"

using namespace freegnn;

namespace {

Tensor filled_window(std::size_t w, std::size_t n, std::size_t d, double v) { return Tensor({w, n, d}, v); }

Eigen::VectorXd vec(std::initializer_list<double> xs) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v[i++] = x;
  return v;
}

}  // namespace

TEST(Reservoir, FirstBArrivalsAreAllKept) {
  ReservoirSampler s(5, 1);
  for (std::uint64_t t = 1; t <= 5; ++t) {
    auto slot = s.offer(t);
    ASSERT_TRUE(slot.has_value());
    EXPECT_EQ(*slot, t - 1);
  }
  EXPECT_EQ(s.size(), 5u);
}

TEST(Reservoir, ArrivalIndexMustIncrease) {
  ReservoirSampler s(3, 1);
  s.offer(1);
  EXPECT_THROW(s.offer(1), std::invalid_argument);
  EXPECT_THROW(s.offer(0), std::invalid_argument);
  EXPECT_NO_THROW(s.offer(5));  // gaps are fine
}

TEST(Reservoir, ZeroCapacityNeverStores) {
  ReplayMemory m(0, 3);
  for (std::uint64_t t = 1; t <= 50; ++t) EXPECT_FALSE(m.reservoir_insert(filled_window(2, 2, 1, 1.0), t, vec({0.0})));
  EXPECT_TRUE(m.empty());
  EXPECT_EQ(m.seen(), 50u);
  EXPECT_FALSE(m.embedding_centroid().has_value());
  Rng rng(1);
  EXPECT_TRUE(sample_replay(m, 8, rng).empty());
}

TEST(Reservoir, RetentionMatchesBOverT) {
  const std::size_t B = 20, T = 400, trials = 4000;
  const auto law = oracle::reservoir_monte_carlo(B, T, trials, 11);
  const double p = static_cast<double>(B) / static_cast<double>(T);
  const double se = std::sqrt(p * (1 - p) / static_cast<double>(trials));
  std::size_t outside = 0;
  for (double r : law.final_rate) outside += std::fabs(r - p) > 3 * se;
  EXPECT_LE(outside, oracle::allowed_three_sigma_exceedances(T));
  // Admission on arrival follows min(1, B/t).
  for (std::size_t t : {1u, 20u, 21u, 100u, 400u}) {
    const double q = std::min(1.0, static_cast<double>(B) / static_cast<double>(t));
    const double s = std::sqrt(q * (1 - q) / static_cast<double>(trials));
    EXPECT_LE(std::fabs(law.admitted_rate[t - 1] - q), std::max(3 * s, 1e-12)) << "t=" << t;
  }
}

TEST(ReplayMemory, SizeInvariants) {
  ReplayMemory m(10, 4);
  for (std::uint64_t t = 1; t <= 200; ++t) {
    m.reservoir_insert(filled_window(3, 2, 1, static_cast<double>(t)), t, vec({static_cast<double>(t)}));
    ASSERT_LE(m.size(), 10u);
    if (t >= 10) {
      ASSERT_EQ(m.size(), 10u);
    }
  }
  // Every stored window is an arrival we actually offered, tagged with its index.
  for (const auto& e : m.entries()) {
    EXPECT_EQ(e.window().values().front(), static_cast<double>(e.inserted_at));
    EXPECT_EQ(e.embedding_mean[0], static_cast<double>(e.inserted_at));
  }
}

TEST(ReplayMemory, RejectsShapeChanges) {
  ReplayMemory m(4, 0);
  m.reservoir_insert(filled_window(3, 2, 1, 0.0), 1, vec({0.0, 0.0}));
  EXPECT_THROW(m.reservoir_insert(filled_window(4, 2, 1, 0.0), 2, vec({0.0, 0.0})), ShapeError);
  EXPECT_THROW(m.reservoir_insert(filled_window(3, 2, 1, 0.0), 3, vec({0.0})), ShapeError);
}

TEST(ReplayMemory, CentroidAndRefresh) {
  ReplayMemory m(3, 0);
  m.reservoir_insert(filled_window(2, 1, 1, 0.0), 1, vec({1.0, 2.0}));
  m.reservoir_insert(filled_window(2, 1, 1, 0.0), 2, vec({3.0, 6.0}));
  EXPECT_TRUE(m.embedding_centroid()->isApprox(vec({2.0, 4.0})));
  EXPECT_EQ(m.staleness(0, 10), 9u);
  m.refresh_embedding(0, vec({5.0, 2.0}), 10);
  EXPECT_EQ(m.staleness(0, 10), 0u);
  EXPECT_TRUE(m.embedding_centroid()->isApprox(vec({4.0, 4.0})));
}

TEST(ReplayMemory, FootprintScalesWithBwNd) {
  auto footprint = [](std::size_t B, std::size_t w, std::size_t N, std::size_t d) {
    ReplayMemory m(B, 0);
    for (std::uint64_t t = 1; t <= B; ++t) m.reservoir_insert(filled_window(w, N, d, 0.5), t, Eigen::VectorXd::Zero(64));
    return m.footprint_bytes();
  };
  const auto base = footprint(50, 24, 7, 5);
  const double per_value = static_cast<double>(base) / (50.0 * 24 * 7 * 5);
  EXPECT_GT(per_value, 4.0);   // single precision values plus caches
  EXPECT_LT(per_value, 7.0);
  // Doubling each factor in turn roughly doubles the footprint.
  for (auto f : {footprint(100, 24, 7, 5), footprint(50, 48, 7, 5), footprint(50, 24, 14, 5), footprint(50, 24, 7, 10)}) {
    EXPECT_GT(static_cast<double>(f) / static_cast<double>(base), 1.6);
    EXPECT_LT(static_cast<double>(f) / static_cast<double>(base), 2.05);
  }
  // Deployment scale: B = 200 windows of 24 x 7 x 5 fit in under 1 MB.
  EXPECT_LT(footprint(200, 24, 7, 5), 1'000'000u);
}

TEST(SampleReplay, BatchLargerThanBufferReturnsEverything) {
  ReplayMemory m(5, 0);
  for (std::uint64_t t = 1; t <= 3; ++t) m.reservoir_insert(filled_window(1, 1, 1, 0.0), t, vec({0.0}));
  auto idx = sample_replay(m, 10, std::uint64_t{7});
  std::sort(idx.begin(), idx.end());
  EXPECT_EQ(idx, (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(sample_replay(m, 0, std::uint64_t{7}).size(), 0u);
}

TEST(SampleReplay, DeterministicAndDistinct) {
  ReplayMemory m(50, 0);
  for (std::uint64_t t = 1; t <= 50; ++t) m.reservoir_insert(filled_window(1, 1, 1, 0.0), t, vec({0.0}));
  const auto a = sample_replay(m, 8, std::uint64_t{42});
  EXPECT_EQ(a, sample_replay(m, 8, std::uint64_t{42}));
  auto s = a;
  std::sort(s.begin(), s.end());
  EXPECT_EQ(std::unique(s.begin(), s.end()), s.end());
}

TEST(SampleReplay, UniformChiSquare) {
  ReplayMemory m(10, 0);
  for (std::uint64_t t = 1; t <= 10; ++t) m.reservoir_insert(filled_window(1, 1, 1, 0.0), t, vec({0.0}));
  Rng rng(2024);
  std::vector<std::uint64_t> single(10, 0), triple(10, 0);
  const std::size_t draws = 100000;
  for (std::size_t i = 0; i < draws; ++i) ++single[sample_replay(m, 1, rng)[0]];
  EXPECT_LT(oracle::chi2_statistic(single, draws / 10.0), oracle::chi2_critical_001(9));
  // Batches of three: every entry appears in 3/10 of the batches.
  for (std::size_t i = 0; i < draws; ++i)
    for (auto k : sample_replay(m, 3, rng)) ++triple[k];
  for (auto c : triple) {
    const double p = 0.3, se = std::sqrt(p * (1 - p) / draws);
    EXPECT_NEAR(static_cast<double>(c) / draws, p, 4 * se);
  }
}

TEST(MemorySnapshot, RoundTrip) {
  ReplayMemory m(4, 9);
  Rng rng(3);
  for (std::uint64_t t = 1; t <= 9; ++t) {
    Tensor x({3, 2, 2});
    for (auto& v : x.values()) v = rng.uniform(-1, 1);
    m.reservoir_insert(x, t, vec({rng.uniform(), rng.uniform()}));
  }
  m.refresh_embedding(1, vec({0.25, -0.5}), 9);
  const auto path = std::filesystem::temp_directory_path() / "freegnn_memory_roundtrip.bin";
  save_memory_snapshot(m, path);
  const auto s = load_memory_snapshot(path);
  std::filesystem::remove(path);
  EXPECT_EQ(s.capacity, 4u);
  EXPECT_EQ(s.seen, 9u);
  ASSERT_EQ(s.entries.size(), m.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    EXPECT_EQ(s.entries[i].shape, m.entry(i).shape);
    EXPECT_EQ(s.entries[i].values, m.entry(i).values);
    EXPECT_EQ(s.entries[i].inserted_at, m.entry(i).inserted_at);
    EXPECT_EQ(s.entries[i].refreshed_at, m.entry(i).refreshed_at);
    EXPECT_EQ(s.entries[i].embedding_mean, m.entry(i).embedding_mean);
  }
}

TEST(MemorySnapshot, DetectsCorruption) {
  ReplayMemory m(2, 0);
  m.reservoir_insert(filled_window(2, 2, 1, 1.5), 1, vec({1.0}));
  auto bytes = serialize_memory(m);
  auto flipped = bytes;
  flipped[30] ^= 0x40;
  EXPECT_THROW(deserialize_memory(flipped), BinaryFormatError);
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW(deserialize_memory(bytes), BinaryFormatError);
  std::vector<unsigned char> junk(40, 'x');
  EXPECT_THROW(deserialize_memory(junk), BinaryFormatError);
}
