#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "freegnn/config.hpp"

using namespace freegnn;
namespace fs = std::filesystem;

namespace {

nlohmann::json synthetic_doc() {
  return nlohmann::json::parse(R"({
    "seed": 3,
    "data": {"synthetic": {"sites": 3, "length": 240, "weather_sigma": 0.3}, "train_ratio": 0.5},
    "graph": {"method": "edge_list", "edges": [[0, 1, 1.0], [1, 2, 1.0]]},
    "model": {"input_dim": 4, "window": 8, "embed_dim": 8, "hidden_dim": 8, "heads": 2, "dropout": 0.0},
    "train": {"epochs": 2},
    "adapt": {"warmup": 5, "memory_capacity": 10}
  })");
}

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("freegnn_config_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST(RunConfig, RoundTripsThroughJson) {
  const auto cfg = parse_run_config(synthetic_doc(), {}, ".");
  const nlohmann::json j = cfg;
  EXPECT_EQ(nlohmann::json(j.get<RunConfig>()), j);
  EXPECT_EQ(j["schema_version"], kRunConfigSchema);
  EXPECT_EQ(j["data"]["synthetic"]["sites"], 3);
}

TEST(RunConfig, EveryDefaultIsRecorded) {
  // A document of defaults mentions every key that parsing accepts, so the
  // manifest can always be replayed verbatim.
  const nlohmann::json j = RunConfig{};
  for (const char* k : {"schema_version", "seed", "data", "graph", "model", "train", "adapt", "protocol", "variants", "checkpoint"})
    EXPECT_TRUE(j.contains(k)) << k;
  EXPECT_EQ(j["variants"].size(), 5u);
}

TEST(RunConfig, UnknownKeysAreRejectedAtEveryLevel) {
  for (const char* path : {"/bogus", "/data/bogus", "/data/synthetic/bogus", "/graph/bogus", "/model/bogus",
                           "/train/bogus", "/adapt/bogus", "/adapt/augment/bogus", "/protocol/bogus"}) {
    auto doc = synthetic_doc();
    doc[nlohmann::json::json_pointer(path)] = 1;
    EXPECT_THROW(parse_run_config(doc, {}, "."), std::invalid_argument) << path;
  }
}

TEST(RunConfig, Validation) {
  auto doc = synthetic_doc();
  doc["schema_version"] = 2;
  EXPECT_THROW(parse_run_config(doc, {}, "."), std::invalid_argument);
  doc = synthetic_doc();
  doc["data"]["sources"] = {"a.csv"};
  EXPECT_THROW(parse_run_config(doc, {}, "."), std::invalid_argument);  // both synthetic and files
  doc = synthetic_doc();
  doc["variants"] = {"full", "no-teacher"};
  EXPECT_THROW(parse_run_config(doc, {}, "."), std::invalid_argument);
  doc = synthetic_doc();
  doc["data"]["train_ratio"] = 1.0;
  EXPECT_THROW(parse_run_config(doc, {}, "."), std::invalid_argument);
  doc = synthetic_doc();
  doc["graph"]["edges"] = {{0, 1}};
  EXPECT_THROW(parse_run_config(doc, {}, "."), std::invalid_argument);
  doc = synthetic_doc();
  doc["protocol"] = {{"rolling_window", 0}};
  EXPECT_THROW(parse_run_config(doc, {}, "."), std::invalid_argument);
}

TEST(RunConfig, Overrides) {
  const auto cfg = parse_run_config(synthetic_doc(),
                                    {"adapt.memory_capacity=50", "model.output=linear", "adapt.augment.jitter=0.5",
                                     "variants=[\"full\",\"no-graph\"]", "protocol.include_warmup=true"},
                                    ".");
  EXPECT_EQ(cfg.adapt.memory_capacity, 50u);
  EXPECT_EQ(cfg.model.output, OutputActivation::linear);
  EXPECT_EQ(cfg.adapt.augment.jitter, 0.5);
  EXPECT_EQ(cfg.variants, (std::vector<std::string>{"full", "no-graph"}));
  EXPECT_TRUE(cfg.protocol.include_warmup);
  EXPECT_THROW(parse_run_config(synthetic_doc(), {"adapt.memory_capacity"}, "."), std::invalid_argument);
  EXPECT_THROW(parse_run_config(synthetic_doc(), {"adapt..mu=0.5"}, "."), std::invalid_argument);
  EXPECT_THROW(parse_run_config(synthetic_doc(), {"adapt.warmup.x=0.5"}, "."), std::invalid_argument);
  EXPECT_THROW(parse_run_config(synthetic_doc(), {"adapt.mu=high"}, "."), nlohmann::json::exception);
}

TEST(RunConfig, SeedsDeriveFromMaster) {
  const auto cfg = parse_run_config(synthetic_doc(), {"train.seed=99", "adapt.seed=99"}, ".");
  EXPECT_EQ(cfg.seed, 3u);
  EXPECT_EQ(cfg.data.synthetic->seed, 3u);
  EXPECT_EQ(cfg.adapt.seed, 3u);
  EXPECT_EQ(cfg.train.seed, 3u ^ 0x5452414Eull);
  const auto other = with_seed(cfg, 8);
  EXPECT_EQ(other.data.synthetic->seed, 8u);
  EXPECT_EQ(other.adapt.seed, 8u);
  EXPECT_NE(other.train.seed, cfg.train.seed);
}

TEST(RunConfig, FlattenedDefaultsListEveryLeaf) {
  const auto flat = flattened_defaults();
  auto has = [&](const std::string& k) {
    return std::any_of(flat.begin(), flat.end(), [&](const auto& p) { return p.first == k; });
  };
  for (const char* k : {"seed", "checkpoint", "variants", "data.sources", "data.synthetic.drift", "data.synthetic.noise",
                        "graph.edges", "graph.rho_min", "model.window", "train.epochs", "adapt.augment.jitter",
                        "adapt.memory_capacity", "protocol.rolling_window"})
    EXPECT_TRUE(has(k)) << k;
  // Each listed value, set back through an override, parses.
  for (const auto& [k, v] : flat) {
    if (k.starts_with("data.synthetic")) continue;
    EXPECT_NO_THROW(parse_run_config(synthetic_doc(), {k + "=" + v}, ".")) << k;
  }
}

TEST(RunConfig, RelativePathsResolveAgainstConfigFile) {
  const auto dir = scratch_dir("paths");
  nlohmann::json doc = RunConfig{};
  doc["data"]["sources"] = {"a.csv"};
  doc["data"]["target"] = "sub/b.csv";
  std::ofstream(dir / "run.json") << doc.dump();
  const auto cfg = load_run_config(dir / "run.json");
  EXPECT_EQ(fs::path(cfg.data.sources[0]), (dir / "a.csv").lexically_normal());
  EXPECT_EQ(fs::path(cfg.data.target), (dir / "sub/b.csv").lexically_normal());
  const auto files = referenced_files(cfg);
  EXPECT_NE(std::find(files.begin(), files.end(), (dir / "a.meta.json").lexically_normal().string()), files.end());
  EXPECT_THROW(load_run_config(dir / "missing.json"), std::invalid_argument);
}

TEST(Pipeline, SyntheticSplitSharesOneScaler) {
  const auto cfg = parse_run_config(synthetic_doc(), {}, ".");
  const auto data = prepare_data(cfg);
  ASSERT_EQ(data.sources.size(), 1u);
  EXPECT_EQ(data.target_offset, 120u);
  EXPECT_EQ(data.sources[0].data.length(), 120u);
  EXPECT_EQ(data.target.length(), 120u);
  EXPECT_EQ(data.graph.node_count(), 3u);
  // Source targets fill [0, 1] exactly under their own min-max scaling.
  EXPECT_DOUBLE_EQ(data.sources[0].data.targets().minCoeff(), 0.0);
  EXPECT_DOUBLE_EQ(data.sources[0].data.targets().maxCoeff(), 1.0);
}

TEST(Pipeline, CheckpointCarriesGraphAndScaling) {
  auto cfg = parse_run_config(synthetic_doc(), {}, ".");
  const auto data = prepare_data(cfg);
  const auto po = pretrain_checkpoint(cfg, data);
  const auto dir = scratch_dir("ckpt");
  save_checkpoint(po.checkpoint, dir / "c.bin");
  cfg.checkpoint = (dir / "c.bin").string();
  const auto dep = prepare_deployment(cfg);
  EXPECT_TRUE(dep.data.sources.empty());
  EXPECT_EQ(dep.data.graph.adjacency, data.graph.adjacency);
  EXPECT_EQ(dep.data.graph.names, data.graph.names);
  EXPECT_EQ(dep.data.target.targets(), data.target.targets());
  EXPECT_EQ(checkpoint_digest(dep.checkpoint), checkpoint_digest(po.checkpoint));
}

TEST(Pipeline, FilesModeNeverOpensSourcesWhenGivenACheckpoint) {
  const auto dir = scratch_dir("files");
  SynthSpec spec;
  spec.sites = 3;
  spec.length = 200;
  write_dataset(generate_synthetic(spec).dataset, dir / "site.csv");
  auto doc = synthetic_doc();
  doc["data"] = {{"sources", {"site.csv"}}, {"target", "site.csv"}, {"train_ratio", 0.7}};
  doc["graph"] = {{"method", "correlation"}, {"rho_min", 0.0}};
  auto cfg = parse_run_config(doc, {}, dir);
  const auto data = prepare_data(cfg);
  EXPECT_EQ(data.sources.size(), 1u);
  EXPECT_EQ(data.target_offset, 140u);
  const auto po = pretrain_checkpoint(cfg, data);
  save_checkpoint(po.checkpoint, dir / "c.bin");

  // The source entry now points at a file that does not exist.
  doc["data"]["sources"] = {"gone.csv"};
  doc["checkpoint"] = "c.bin";
  cfg = parse_run_config(doc, {}, dir);
  const auto dep = prepare_deployment(cfg);
  EXPECT_EQ(dep.data.target.targets(), data.target.targets());
  cfg.checkpoint.clear();
  EXPECT_THROW(prepare_deployment(cfg), std::exception);
}

TEST(Pipeline, ShapeMismatchesAreReported) {
  auto doc = synthetic_doc();
  doc["model"]["input_dim"] = 5;
  EXPECT_THROW(prepare_data(parse_run_config(doc, {}, ".")), ShapeError);
  doc = synthetic_doc();
  doc["graph"]["edges"] = {{0, 1, 1.0}, {1, 3, 1.0}};
  EXPECT_THROW(prepare_data(parse_run_config(doc, {}, ".")), std::invalid_argument);
}

TEST(Pipeline, GraphJsonRoundTripIsExact) {
  Rng rng(2);
  Mat history(50, 4);
  for (Eigen::Index i = 0; i < history.size(); ++i) history.data()[i] = rng.normal();
  const auto g = build_adjacency_correlation(history, -1.0);
  const auto back = graph_from_json(nlohmann::json::parse(graph_to_json(g).dump()));
  EXPECT_EQ(back.adjacency, g.adjacency);
  EXPECT_EQ(back.alpha, g.alpha);
}
