#pragma once

// Run configuration: one JSON document describing the data, the graph, the
// model and both training stages, plus the pipeline that turns it into a
// pretrained checkpoint and a scaled target stream.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "freegnn/checkpoint.hpp"
#include "freegnn/data/ingest.hpp"
#include "freegnn/data/synthetic.hpp"
#include "freegnn/eval.hpp"
#include "freegnn/pretrain.hpp"

namespace freegnn {

inline constexpr int kRunConfigSchema = 1;

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const nlohmann::json& known, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.contains(it.key())) throw std::invalid_argument(where + ": unknown key '" + it.key() + "'");
}

}  // namespace detail

struct GraphSpec {
  GraphMethod method = GraphMethod::correlation;
  double rho_min = 0.5;
  double kappa = 1.0;
  double radius = 1.0;
  std::string coords;            // distance mode: node,x,y file
  std::string edges_file;        // edge_list mode: u,v,weight file
  std::vector<GraphEdge> edges;  // edge_list mode, inline alternative to edges_file
};

inline void to_json(nlohmann::json& j, const GraphSpec& g) {
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& e : g.edges) edges.push_back({e.u, e.v, e.weight});
  j = {{"method", to_string(g.method)}, {"rho_min", g.rho_min}, {"kappa", g.kappa}, {"radius", g.radius},
       {"coords", g.coords}, {"edges_file", g.edges_file}, {"edges", edges}};
}

inline void from_json(const nlohmann::json& j, GraphSpec& g) {
  detail::reject_unknown(j, GraphSpec{}, "graph");
  const GraphSpec d;
  const auto method = j.value("method", to_string(d.method));
  if (method == "distance") g.method = GraphMethod::distance;
  else if (method == "correlation") g.method = GraphMethod::correlation;
  else if (method == "edge_list") g.method = GraphMethod::edge_list;
  else throw std::invalid_argument("graph: method must be distance, correlation or edge_list, got '" + method + "'");
  g.rho_min = j.value("rho_min", d.rho_min);
  g.kappa = j.value("kappa", d.kappa);
  g.radius = j.value("radius", d.radius);
  g.coords = j.value("coords", d.coords);
  g.edges_file = j.value("edges_file", d.edges_file);
  g.edges.clear();
  for (const auto& e : j.value("edges", nlohmann::json::array())) {
    if (!e.is_array() || e.size() != 3) throw std::invalid_argument("graph: inline edges are [u, v, weight] triples");
    g.edges.push_back({e[0].get<std::size_t>(), e[1].get<std::size_t>(), e[2].get<double>()});
  }
}

/// Builds the graph for `names`. Correlation mode reads only `history`, which
/// callers pass as training-portion targets.
inline SiteGraph build_graph(const GraphSpec& spec, const std::vector<std::string>& names, const Mat* history) {
  switch (spec.method) {
    case GraphMethod::distance: {
      if (spec.coords.empty()) throw std::invalid_argument("graph: distance mode needs a coords file");
      const auto nc = read_node_coords(spec.coords);
      Mat xy(static_cast<Eigen::Index>(names.size()), 2);
      for (std::size_t i = 0; i < names.size(); ++i) {
        const auto it = std::find(nc.names.begin(), nc.names.end(), names[i]);
        if (it == nc.names.end()) throw std::invalid_argument("graph: no coordinates for site '" + names[i] + "'");
        xy.row(static_cast<Eigen::Index>(i)) = nc.coords.row(it - nc.names.begin());
      }
      return build_adjacency_distance(xy, spec.kappa, spec.radius, names);
    }
    case GraphMethod::correlation:
      if (!history) throw std::invalid_argument("graph: correlation mode needs training history");
      return build_adjacency_correlation(*history, spec.rho_min, names);
    case GraphMethod::edge_list:
      if (!spec.edges_file.empty()) return read_edge_list(spec.edges_file, names);
      return graph_from_edges(names.size(), spec.edges, names);
  }
  throw std::logic_error("unreachable");
}

/// The graph as plain JSON, so a checkpoint can carry it into deployment.
inline nlohmann::json graph_to_json(const SiteGraph& g) {
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& e : g.edges()) edges.push_back({e.u, e.v, e.weight});
  return {{"names", g.names}, {"method", to_string(g.method)}, {"edges", edges}};
}

inline SiteGraph graph_from_json(const nlohmann::json& j) {
  const auto names = j.at("names").get<std::vector<std::string>>();
  std::vector<GraphEdge> edges;
  for (const auto& e : j.at("edges")) edges.push_back({e[0].get<std::size_t>(), e[1].get<std::size_t>(), e[2].get<double>()});
  return graph_from_edges(names.size(), edges, names);
}

enum class TargetPortion { test, all };

struct DataSpec {
  std::optional<SynthSpec> synthetic;  // set: generate the stream; unset: read canonical CSV files
  std::vector<std::string> sources;    // labeled source datasets (training portion used)
  std::string target;                  // unlabeled deployment stream
  double train_ratio = 0.8;
  TargetPortion target_portion = TargetPortion::test;

  void validate() const {
    if (!(train_ratio > 0.0 && train_ratio < 1.0)) throw std::invalid_argument("data: train_ratio must be in (0, 1)");
    if (synthetic) {
      if (!sources.empty() || !target.empty()) throw std::invalid_argument("data: give either synthetic or sources/target, not both");
    } else {
      if (sources.empty()) throw std::invalid_argument("data: need at least one source dataset (or a synthetic spec)");
      if (target.empty()) throw std::invalid_argument("data: target dataset missing");
    }
  }
};

inline void to_json(nlohmann::json& j, const DataSpec& d) {
  j = {{"synthetic", d.synthetic ? nlohmann::json(*d.synthetic) : nlohmann::json(nullptr)},
       {"sources", d.sources},
       {"target", d.target},
       {"train_ratio", d.train_ratio},
       {"target_portion", d.target_portion == TargetPortion::test ? "test" : "all"}};
}

inline void from_json(const nlohmann::json& j, DataSpec& d) {
  detail::reject_unknown(j, DataSpec{}, "data");
  const DataSpec def;
  d.synthetic.reset();
  if (j.contains("synthetic") && !j.at("synthetic").is_null()) d.synthetic = j.at("synthetic").get<SynthSpec>();
  d.sources = j.value("sources", def.sources);
  d.target = j.value("target", def.target);
  d.train_ratio = j.value("train_ratio", def.train_ratio);
  const auto portion = j.value("target_portion", std::string("test"));
  if (portion == "test") d.target_portion = TargetPortion::test;
  else if (portion == "all") d.target_portion = TargetPortion::all;
  else throw std::invalid_argument("data: target_portion must be test or all, got '" + portion + "'");
  d.validate();
}

struct ProtocolSpec {
  bool include_warmup = false;
  std::size_t rolling_window = 100;
};

inline void to_json(nlohmann::json& j, const ProtocolSpec& p) {
  j = {{"include_warmup", p.include_warmup}, {"rolling_window", p.rolling_window}};
}

inline void from_json(const nlohmann::json& j, ProtocolSpec& p) {
  detail::reject_unknown(j, ProtocolSpec{}, "protocol");
  const ProtocolSpec d;
  p.include_warmup = j.value("include_warmup", d.include_warmup);
  p.rolling_window = j.value("rolling_window", d.rolling_window);
  if (p.rolling_window == 0) throw std::invalid_argument("protocol: rolling_window must be positive");
}

struct RunConfig {
  int schema_version = kRunConfigSchema;
  std::uint64_t seed = 0;  // master seed; the stage seeds derive from it
  DataSpec data;
  GraphSpec graph;
  ModelConfig model;
  TrainConfig train;
  AdaptConfig adapt;
  ProtocolSpec protocol;
  std::vector<std::string> variants = ablation_variants();
  std::string checkpoint;  // empty: pretrain in-process

  ProtocolOptions protocol_options(StreamMode mode) const {
    ProtocolOptions o;
    o.mode = mode;
    o.include_warmup = protocol.include_warmup;
    o.rolling_window = protocol.rolling_window;
    return o;
  }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"schema_version", c.schema_version}, {"seed", c.seed}, {"data", c.data}, {"graph", c.graph},
       {"model", c.model}, {"train", c.train}, {"adapt", c.adapt}, {"protocol", c.protocol},
       {"variants", c.variants}, {"checkpoint", c.checkpoint}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
  const RunConfig d;
  detail::reject_unknown(j, nlohmann::json(d), "config");
  c.schema_version = j.value("schema_version", d.schema_version);
  if (c.schema_version != kRunConfigSchema)
    throw std::invalid_argument("config: schema_version " + std::to_string(c.schema_version) + " is not supported (expected " +
                                std::to_string(kRunConfigSchema) + ")");
  c.seed = j.value("seed", d.seed);
  c.data = j.value("data", d.data);
  c.graph = j.value("graph", d.graph);
  c.model = j.value("model", d.model);
  c.train = j.value("train", d.train);
  c.adapt = j.value("adapt", d.adapt);
  c.protocol = j.value("protocol", d.protocol);
  c.variants = j.value("variants", d.variants);
  for (const auto& v : c.variants) (void)apply_variant(c.adapt, v);
  c.checkpoint = j.value("checkpoint", d.checkpoint);
}

/// Sets the stage seeds from the master seed: the synthetic stream, model
/// initialisation and adaptation use it directly, the minibatch order a
/// fixed derivation, so two configs with one seed are paired replicates.
inline RunConfig resolve_seeds(RunConfig c) {
  if (c.data.synthetic) c.data.synthetic->seed = c.seed;
  c.train.seed = c.seed ^ 0x5452414Eull;
  c.adapt.seed = c.seed;
  return c;
}

inline RunConfig with_seed(RunConfig c, std::uint64_t seed) {
  c.seed = seed;
  return resolve_seeds(std::move(c));
}

/// Applies `a.b.c=value` to a config document. The value is parsed as JSON
/// when it can be, and taken as a string otherwise.
inline void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw std::invalid_argument("override '" + assignment + "' is not key=value");
  const auto key = assignment.substr(0, eq);
  const auto text = assignment.substr(eq + 1);
  auto value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  nlohmann::json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const auto part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw std::invalid_argument("override key '" + key + "' has an empty component");
    if (!node->is_object()) {
      if (!node->is_null()) throw std::invalid_argument("override key '" + key + "': '" + part + "' is not inside an object");
      *node = nlohmann::json::object();
    }
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *node = std::move(value);
}

/// Every key of a default config as (dotted key, JSON value); arrays count as
/// leaves. The synthetic block is listed although it is off by default.
inline std::vector<std::pair<std::string, std::string>> flattened_defaults() {
  nlohmann::json doc = RunConfig{};
  doc["data"]["synthetic"] = SynthSpec{};
  std::vector<std::pair<std::string, std::string>> out;
  const auto walk = [&](const auto& self, const nlohmann::json& node, const std::string& prefix) -> void {
    if (!node.is_object()) {
      out.emplace_back(prefix, node.dump());
      return;
    }
    for (auto it = node.begin(); it != node.end(); ++it) self(self, it.value(), prefix.empty() ? it.key() : prefix + "." + it.key());
  };
  walk(walk, doc, "");
  return out;
}

/// Parses a config document, applying overrides first. Relative paths in the
/// document are taken relative to `base_dir` and stored absolute.
inline RunConfig parse_run_config(nlohmann::json doc, const std::vector<std::string>& overrides,
                                  const std::filesystem::path& base_dir) {
  for (const auto& o : overrides) apply_override(doc, o);
  auto cfg = doc.get<RunConfig>();
  const auto absolute = [&](std::string& p) {
    if (!p.empty() && std::filesystem::path(p).is_relative()) p = (base_dir / p).lexically_normal().string();
  };
  for (auto& s : cfg.data.sources) absolute(s);
  absolute(cfg.data.target);
  absolute(cfg.graph.coords);
  absolute(cfg.graph.edges_file);
  absolute(cfg.checkpoint);
  return resolve_seeds(std::move(cfg));
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
}

inline RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
  return parse_run_config(read_json_file(path), overrides, std::filesystem::absolute(path).parent_path());
}

/// Files that a config reads, for existence checks and input digests.
inline std::vector<std::string> referenced_files(const RunConfig& c) {
  std::vector<std::string> files = c.data.sources;
  const auto add = [&](const std::string& p) {
    if (!p.empty() && std::find(files.begin(), files.end(), p) == files.end()) files.push_back(p);
  };
  add(c.data.target);
  if (!c.data.target.empty()) add(dataset_meta_path(c.data.target).string());
  for (const auto& s : c.data.sources) add(dataset_meta_path(s).string());
  add(c.graph.coords);
  add(c.graph.edges_file);
  add(c.checkpoint);
  return files;
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

/// Scaled source training portions plus the scaled deployment stream.
struct PreparedData {
  std::vector<SourceDomain> sources;  // empty when a checkpoint supplies the model
  Dataset target;
  SiteGraph graph;
  std::optional<Scaler> scaler;       // the scaling applied to the target (the checkpoint's)
  std::optional<SyntheticStream> stream;
  std::size_t target_offset = 0;      // row of the raw series where the target stream starts
};

namespace detail {

inline Dataset target_rows(const Dataset& raw, const DataSpec& spec, const ModelConfig& mc, std::size_t& offset) {
  if (spec.target_portion == TargetPortion::all) {
    offset = 0;
    return raw;
  }
  auto parts = split(raw, spec.train_ratio, mc.window, mc.horizon);
  offset = parts.first.length();
  return std::move(parts.second);
}

inline void check_dims(const Dataset& ds, const ModelConfig& mc, const std::string& what) {
  if (ds.dims() != mc.input_dim)
    throw ShapeError(what + " has d=" + std::to_string(ds.dims()) + " but model.input_dim is " + std::to_string(mc.input_dim));
}

}  // namespace detail

/// Loads or generates the data. Given a checkpoint, no source is read: the
/// graph and the scaling come from the checkpoint instead.
inline PreparedData prepare_data(const RunConfig& cfg, const Checkpoint* ckpt = nullptr) {
  cfg.data.validate();
  const auto& mc = cfg.model;
  PreparedData out;
  std::optional<Dataset> target_raw;
  std::vector<Dataset> source_raw;
  if (cfg.data.synthetic) {
    out.stream = generate_synthetic(*cfg.data.synthetic);
    detail::check_dims(out.stream->dataset, mc, "synthetic stream");
    auto [train, test] = split(out.stream->dataset, cfg.data.train_ratio, mc.window, mc.horizon);
    out.target_offset = train.length();
    if (!ckpt) source_raw.push_back(std::move(train));
    target_raw = cfg.data.target_portion == TargetPortion::test ? std::move(test) : out.stream->dataset;
    if (cfg.data.target_portion == TargetPortion::all) out.target_offset = 0;
  } else {
    auto target_full = read_dataset(cfg.data.target);
    detail::check_dims(target_full, mc, cfg.data.target);
    if (!ckpt)
      for (const auto& path : cfg.data.sources) {
        auto ds = read_dataset(path);
        detail::check_dims(ds, mc, path);
        source_raw.push_back(split(ds, cfg.data.train_ratio, mc.window, mc.horizon).first);
      }
    target_raw = detail::target_rows(target_full, cfg.data, mc, out.target_offset);
  }

  if (ckpt) {
    if (!ckpt->meta.contains("graph")) throw std::invalid_argument("checkpoint carries no graph; pretrain with this tool or drop `checkpoint`");
    out.graph = graph_from_json(ckpt->meta.at("graph"));
    out.scaler = ckpt->scaler;
  } else {
    // Each source is scaled by its own training statistics; the target shares
    // the first source's, which is the scaling the checkpoint will carry.
    for (std::size_t k = 0; k < source_raw.size(); ++k) {
      const auto scaler = Scaler::fit(source_raw[k]);
      if (k == 0) out.scaler = scaler;
      const auto name = cfg.data.synthetic ? std::string("synthetic") : std::filesystem::path(cfg.data.sources[k]).stem().string();
      out.sources.push_back({name, scaler.transform(source_raw[k]), SiteGraph{}});
    }
    const Mat history = out.sources.front().data.targets();
    out.graph = build_graph(cfg.graph, out.sources.front().data.site_names, &history);
    for (auto& s : out.sources) {
      if (s.data.nodes() != out.graph.node_count())
        throw ShapeError("source '" + s.name + "' has N=" + std::to_string(s.data.nodes()) + ", graph has N=" + std::to_string(out.graph.node_count()));
      s.graph = out.graph;
    }
  }
  if (target_raw->nodes() != out.graph.node_count())
    throw ShapeError("target has N=" + std::to_string(target_raw->nodes()) + ", graph has N=" + std::to_string(out.graph.node_count()));
  out.target = out.scaler ? out.scaler->transform(*target_raw) : std::move(*target_raw);
  return out;
}

struct PretrainOutcome {
  Checkpoint checkpoint;
  PretrainResult result;
};

inline PretrainOutcome pretrain_checkpoint(const RunConfig& cfg, const PreparedData& data) {
  if (data.sources.empty()) throw std::invalid_argument("pretraining needs source data");
  auto result = pretrain(data.sources, cfg.model, cfg.train, cfg.seed);
  std::vector<std::string> names;
  for (const auto& s : data.sources) names.push_back(s.name);
  Checkpoint ck{result.model, data.scaler,
                {{"sources", names}, {"seed", cfg.seed}, {"epochs_run", result.epochs_run},
                 {"best_epoch", result.best_epoch}, {"graph", graph_to_json(data.graph)}}};
  return {std::move(ck), std::move(result)};
}

/// The checkpoint a deployment command starts from, and the data around it.
/// With `checkpoint` set, no source file is opened.
struct Deployment {
  Checkpoint checkpoint;
  PreparedData data;
};

inline Deployment prepare_deployment(const RunConfig& cfg) {
  if (!cfg.checkpoint.empty()) {
    Deployment d;
    d.checkpoint = load_checkpoint(cfg.checkpoint, &cfg.model);
    d.data = prepare_data(cfg, &d.checkpoint);
    return d;
  }
  auto data = prepare_data(cfg);
  auto ck = pretrain_checkpoint(cfg, data).checkpoint;
  return {std::move(ck), std::move(data)};
}

}  // namespace freegnn
