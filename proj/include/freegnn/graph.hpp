#pragma once

#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "freegnn/csv.hpp"
#include "freegnn/numerics/tensor.hpp"

namespace freegnn {

enum class GraphMethod { distance, correlation, edge_list };

inline std::string to_string(GraphMethod m) {
  switch (m) {
    case GraphMethod::distance: return "distance";
    case GraphMethod::correlation: return "correlation";
    case GraphMethod::edge_list: return "edge_list";
  }
  return "?";
}

struct GraphEdge {
  std::size_t u = 0;
  std::size_t v = 0;
  double weight = 0.0;
};

/// Site graph: symmetric nonnegative adjacency without self loops, plus the
/// row-normalised neighbour weights used by message passing. Immutable once built.
struct SiteGraph {
  std::vector<std::string> names;
  Mat adjacency;  // N x N, A_vv = 0
  Mat alpha;      // N x N, rows sum to 1 over neighbours (0 for isolated nodes)
  GraphMethod method = GraphMethod::edge_list;
  double kappa = 0.0;
  double radius = 0.0;
  double rho_min = 0.0;
  std::vector<std::string> warnings;

  std::size_t node_count() const noexcept { return static_cast<std::size_t>(adjacency.rows()); }

  /// Unordered edges (u < v) with A_uv > 0.
  std::vector<GraphEdge> edges() const {
    std::vector<GraphEdge> out;
    for (Eigen::Index u = 0; u < adjacency.rows(); ++u)
      for (Eigen::Index v = u + 1; v < adjacency.cols(); ++v)
        if (adjacency(u, v) > 0.0) out.push_back({static_cast<std::size_t>(u), static_cast<std::size_t>(v), adjacency(u, v)});
    return out;
  }

  /// w_uv = A_uv / sqrt(d_u d_v), the weights of the embedding smoothness penalty.
  std::vector<GraphEdge> smoothness_edges() const {
    const Eigen::VectorXd deg = adjacency.rowwise().sum();
    std::vector<GraphEdge> out = edges();
    for (auto& e : out) e.weight /= std::sqrt(deg(static_cast<Eigen::Index>(e.u)) * deg(static_cast<Eigen::Index>(e.v)));
    return out;
  }

  /// Neighbours plus self, as a 0/1 matrix for the attention layer.
  Mat attention_mask() const {
    Mat m = (adjacency.array() > 0.0).cast<double>().matrix();
    m.diagonal().setOnes();
    return m;
  }

  std::size_t connected_components() const {
    const auto n = node_count();
    std::vector<std::size_t> parent(n);
    std::iota(parent.begin(), parent.end(), std::size_t{0});
    auto find = [&](std::size_t x) {
      while (parent[x] != x) x = parent[x] = parent[parent[x]];
      return x;
    };
    for (const auto& e : edges()) parent[find(e.u)] = find(e.v);
    std::size_t c = 0;
    for (std::size_t i = 0; i < n; ++i) c += find(i) == i;
    return c;
  }
};

/// Fills alpha: alpha_vu = A_vu / sum_u' A_vu'. Isolated nodes get a zero row.
inline SiteGraph normalize(SiteGraph g) {
  const auto n = g.adjacency.rows();
  g.alpha = Mat::Zero(n, n);
  for (Eigen::Index v = 0; v < n; ++v) {
    const double s = g.adjacency.row(v).sum();
    if (s > 0.0) g.alpha.row(v) = g.adjacency.row(v) / s;
  }
  return g;
}

inline std::vector<std::string> default_node_names(std::size_t n) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < n; ++i) names.push_back("site" + std::to_string(i));
  return names;
}

/// A_uv = exp(-dist^2 / kappa) if dist <= radius, else 0; coords is N x 2.
inline SiteGraph build_adjacency_distance(const Mat& coords, double kappa, double radius,
                                          std::vector<std::string> names = {}) {
  if (!(kappa > 0.0)) throw std::invalid_argument("distance graph: kappa must be > 0");
  if (!(radius > 0.0)) throw std::invalid_argument("distance graph: radius must be > 0");
  if (coords.rows() < 1 || coords.cols() != 2) throw std::invalid_argument("distance graph: coords must be N x 2 with N >= 1");
  if (!coords.allFinite()) throw std::invalid_argument("distance graph: non-finite coordinate");
  const auto n = coords.rows();
  SiteGraph g;
  g.method = GraphMethod::distance;
  g.kappa = kappa;
  g.radius = radius;
  g.names = names.empty() ? default_node_names(static_cast<std::size_t>(n)) : std::move(names);
  g.adjacency = Mat::Zero(n, n);
  for (Eigen::Index u = 0; u < n; ++u)
    for (Eigen::Index v = u + 1; v < n; ++v) {
      const double d = (coords.row(u) - coords.row(v)).norm();
      if (d <= radius) g.adjacency(u, v) = g.adjacency(v, u) = std::exp(-(d * d) / kappa);
    }
  return normalize(std::move(g));
}

inline double pearson(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const Eigen::ArrayXd da = a.array() - a.mean();
  const Eigen::ArrayXd db = b.array() - b.mean();
  const double den = std::sqrt((da * da).sum() * (db * db).sum());
  if (den == 0.0) return 0.0;
  return (da * db).sum() / den;
}

/// A_uv = max(0, pearson(u, v)) when it reaches rho_min, else 0; history is T x N.
inline SiteGraph build_adjacency_correlation(const Mat& history, double rho_min,
                                             std::vector<std::string> names = {}) {
  if (history.rows() < 3) throw std::invalid_argument("correlation graph: need at least 3 time steps");
  if (!history.allFinite()) throw std::invalid_argument("correlation graph: non-finite history");
  if ((history.array() == 0.0).all()) throw std::invalid_argument("correlation graph: history is all zero");
  const auto n = history.cols();
  SiteGraph g;
  g.method = GraphMethod::correlation;
  g.rho_min = rho_min;
  g.names = names.empty() ? default_node_names(static_cast<std::size_t>(n)) : std::move(names);
  g.adjacency = Mat::Zero(n, n);
  std::vector<bool> constant(static_cast<std::size_t>(n));
  for (Eigen::Index u = 0; u < n; ++u) {
    const auto col = history.col(u);
    constant[static_cast<std::size_t>(u)] = (col.array() == col(0)).all();
    if (constant[static_cast<std::size_t>(u)]) g.warnings.push_back("node " + g.names[static_cast<std::size_t>(u)] + " has constant history; no edges");
  }
  for (Eigen::Index u = 0; u < n; ++u)
    for (Eigen::Index v = u + 1; v < n; ++v) {
      if (constant[static_cast<std::size_t>(u)] || constant[static_cast<std::size_t>(v)]) continue;
      const double r = std::max(0.0, pearson(history.col(u), history.col(v)));
      if (r > 0.0 && r >= rho_min) g.adjacency(u, v) = g.adjacency(v, u) = std::min(r, 1.0);
    }
  return normalize(std::move(g));
}

inline SiteGraph graph_from_edges(std::size_t n, const std::vector<GraphEdge>& edges, std::vector<std::string> names = {}) {
  SiteGraph g;
  g.method = GraphMethod::edge_list;
  g.names = names.empty() ? default_node_names(n) : std::move(names);
  g.adjacency = Mat::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (const auto& e : edges) {
    if (e.u >= n || e.v >= n) throw std::invalid_argument("edge references unknown node");
    if (e.u == e.v) continue;
    if (!(e.weight >= 0.0) || !std::isfinite(e.weight)) throw std::invalid_argument("edge weight must be finite and nonnegative");
    g.adjacency(static_cast<Eigen::Index>(e.u), static_cast<Eigen::Index>(e.v)) = e.weight;
    g.adjacency(static_cast<Eigen::Index>(e.v), static_cast<Eigen::Index>(e.u)) = e.weight;
  }
  return normalize(std::move(g));
}

/// Graph spec file for distance mode: header `node,x,y`.
struct NodeCoords {
  std::vector<std::string> names;
  Mat coords;
};

inline NodeCoords read_node_coords(const std::string& path) {
  const auto t = csv::read_file(path);
  const auto cn = t.column("node"), cx = t.column("x"), cy = t.column("y");
  if (cn < 0 || cx < 0 || cy < 0) throw csv::ParseError(path + ": expected header node,x,y");
  NodeCoords out;
  out.coords.resize(static_cast<Eigen::Index>(t.rows.size()), 2);
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& r = t.rows[i];
    out.names.push_back(r.at(static_cast<std::size_t>(cn)));
    out.coords(static_cast<Eigen::Index>(i), 0) = std::stod(r.at(static_cast<std::size_t>(cx)));
    out.coords(static_cast<Eigen::Index>(i), 1) = std::stod(r.at(static_cast<std::size_t>(cy)));
  }
  return out;
}

/// Edge-list dump: header `u,v,weight`, one line per unordered edge, node names.
inline void write_edge_list(const SiteGraph& g, std::ostream& out) {
  out << "u,v,weight\n";
  for (const auto& e : g.edges()) out << csv::escape(g.names[e.u]) << ',' << csv::escape(g.names[e.v]) << ',' << csv::num(e.weight) << '\n';
}

inline SiteGraph read_edge_list(const std::string& path, const std::vector<std::string>& names) {
  const auto t = csv::read_file(path);
  const auto cu = t.column("u"), cv = t.column("v"), cw = t.column("weight");
  if (cu < 0 || cv < 0 || cw < 0) throw csv::ParseError(path + ": expected header u,v,weight");
  auto index_of = [&](const std::string& s) {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == s) return i;
    throw std::invalid_argument(path + ": unknown node '" + s + "'");
  };
  std::vector<GraphEdge> edges;
  for (const auto& r : t.rows)
    edges.push_back({index_of(r.at(static_cast<std::size_t>(cu))), index_of(r.at(static_cast<std::size_t>(cv))), std::stod(r.at(static_cast<std::size_t>(cw)))});
  return graph_from_edges(names.size(), edges, names);
}

/// Relabels nodes: result node i is input node perm[i].
inline SiteGraph permute(const SiteGraph& g, const std::vector<std::size_t>& perm) {
  const auto n = static_cast<Eigen::Index>(perm.size());
  SiteGraph out = g;
  for (Eigen::Index i = 0; i < n; ++i) {
    out.names[static_cast<std::size_t>(i)] = g.names[perm[static_cast<std::size_t>(i)]];
    for (Eigen::Index j = 0; j < n; ++j) out.adjacency(i, j) = g.adjacency(static_cast<Eigen::Index>(perm[static_cast<std::size_t>(i)]), static_cast<Eigen::Index>(perm[static_cast<std::size_t>(j)]));
  }
  return normalize(std::move(out));
}

}  // namespace freegnn
