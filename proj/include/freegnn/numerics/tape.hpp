#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <memory>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "freegnn/numerics/tensor.hpp"

namespace freegnn {

/// Handle to a node recorded on a Tape.
struct Var {
  std::int32_t id = -1;
  bool valid() const noexcept { return id >= 0; }
};

/// Gradient per registered parameter index. Parameters the loss does not touch
/// get a zero matrix of the right shape.
using Gradients = std::vector<Mat>;

/// Reverse-mode tape over dense matrices. Ops are recorded in execution order,
/// so node ids are already a topological order; backward walks them in reverse.
///
/// Nodes that do not depend on any parameter carry no backward work, which makes
/// teacher (constant-parameter) passes cost only their forward arithmetic.
class Tape {
 public:
  Tape() { nodes_.reserve(512); }

  // --- leaves --------------------------------------------------------------

  Var parameter(Mat value, int param_index) {
    if (param_index < 0) throw std::invalid_argument("parameter index must be >= 0");
    Var v = push("param", std::move(value), {}, true, nullptr);
    nodes_[v.id].param = param_index;
    if (static_cast<std::size_t>(param_index) >= param_nodes_.size()) param_nodes_.resize(param_index + 1, -1);
    if (param_nodes_[param_index] >= 0) throw std::invalid_argument("parameter index bound twice on one tape");
    param_nodes_[param_index] = v.id;
    return v;
  }

  Var constant(Mat value) { return push("const", std::move(value), {}, false, nullptr); }

  const Mat& value(Var v) const { return nodes_.at(v.id).value; }
  double scalar(Var v) const {
    const Mat& m = value(v);
    if (m.size() != 1) throw ShapeError("scalar() on non-scalar node");
    return m(0, 0);
  }
  bool requires_grad(Var v) const { return nodes_.at(v.id).needs_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }
  const char* op_name(std::size_t i) const { return nodes_.at(i).op; }

  // --- arithmetic ----------------------------------------------------------

  Var matmul(Var a, Var b) {
    const Mat& A = value(a);
    const Mat& B = value(b);
    if (A.cols() != B.rows()) throw ShapeError(dims_msg("matmul", A, B));
    Mat out;
    out.noalias() = A * B;
    return push("matmul", std::move(out), {a, b}, any_grad(a, b),
                [a, b](const Mat& g, const Nodes& n, Grads& grads) {
                  if (n[a.id].needs_grad) accumulate(grads, a, g * n[b.id].value.transpose());
                  if (n[b.id].needs_grad) accumulate(grads, b, n[a.id].value.transpose() * g);
                });
  }

  Var add(Var a, Var b) {
    same_shape("add", a, b);
    return push("add", value(a) + value(b), {a, b}, any_grad(a, b),
                [a, b](const Mat& g, const Nodes& n, Grads& grads) {
                  if (n[a.id].needs_grad) accumulate(grads, a, g);
                  if (n[b.id].needs_grad) accumulate(grads, b, g);
                });
  }

  Var sub(Var a, Var b) {
    same_shape("sub", a, b);
    return push("sub", value(a) - value(b), {a, b}, any_grad(a, b),
                [a, b](const Mat& g, const Nodes& n, Grads& grads) {
                  if (n[a.id].needs_grad) accumulate(grads, a, g);
                  if (n[b.id].needs_grad) accumulate(grads, b, -g);
                });
  }

  /// Elementwise product.
  Var mul(Var a, Var b) {
    same_shape("mul", a, b);
    return push("mul", value(a).cwiseProduct(value(b)), {a, b}, any_grad(a, b),
                [a, b](const Mat& g, const Nodes& n, Grads& grads) {
                  if (n[a.id].needs_grad) accumulate(grads, a, g.cwiseProduct(n[b.id].value));
                  if (n[b.id].needs_grad) accumulate(grads, b, g.cwiseProduct(n[a.id].value));
                });
  }

  /// a + row, with the 1xC row broadcast down every row of a.
  Var add_row(Var a, Var row) {
    const Mat& A = value(a);
    const Mat& R = value(row);
    if (R.rows() != 1 || R.cols() != A.cols()) throw ShapeError(dims_msg("add_row", A, R));
    Mat out = A.rowwise() + R.row(0);
    return push("add_row", std::move(out), {a, row}, any_grad(a, row),
                [a, row](const Mat& g, const Nodes& n, Grads& grads) {
                  if (n[a.id].needs_grad) accumulate(grads, a, g);
                  if (n[row.id].needs_grad) accumulate(grads, row, g.colwise().sum());
                });
  }

  Var scale(Var a, double s) {
    return push("scale", value(a) * s, {a}, requires_grad(a),
                [a, s](const Mat& g, const Nodes&, Grads& grads) { accumulate(grads, a, g * s); });
  }

  /// Elementwise product with a constant matrix (dropout masks, confidence masks).
  Var mul_const(Var a, Mat c) {
    if (c.rows() != value(a).rows() || c.cols() != value(a).cols()) throw ShapeError(dims_msg("mul_const", value(a), c));
    Mat out = value(a).cwiseProduct(c);
    return push("mul_const", std::move(out), {a}, requires_grad(a),
                [a, c = std::move(c)](const Mat& g, const Nodes&, Grads& grads) {
                  accumulate(grads, a, g.cwiseProduct(c));
                });
  }

  // --- activations ---------------------------------------------------------

  Var sigmoid(Var a) {
    Mat y = value(a).unaryExpr([](double x) { return stable_sigmoid(x); });
    return unary("sigmoid", a, std::move(y), [](const Mat& g, const Mat&, const Mat& y) {
      return Mat(g.cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix())));
    });
  }

  Var tanh(Var a) {
    Mat y = value(a).array().tanh().matrix();
    return unary("tanh", a, std::move(y), [](const Mat& g, const Mat&, const Mat& y) {
      return Mat(g.array() * (1.0 - y.array().square()));
    });
  }

  Var relu(Var a) {
    Mat y = value(a).cwiseMax(0.0);
    return unary("relu", a, std::move(y), [](const Mat& g, const Mat& x, const Mat&) {
      return Mat((x.array() > 0.0).select(g.array(), 0.0));
    });
  }

  Var leaky_relu(Var a, double slope) {
    Mat y = value(a).unaryExpr([slope](double x) { return x > 0.0 ? x : slope * x; });
    return unary("leaky_relu", a, std::move(y), [slope](const Mat& g, const Mat& x, const Mat&) {
      return Mat((x.array() > 0.0).select(g.array(), slope * g.array()));
    });
  }

  /// |x| with subgradient 0 at x == 0.
  Var abs(Var a) {
    Mat y = value(a).cwiseAbs();
    return unary("abs", a, std::move(y), [](const Mat& g, const Mat& x, const Mat&) {
      return Mat(g.array() * x.array().sign());
    });
  }

  Var square(Var a) {
    Mat y = value(a).cwiseAbs2();
    return unary("square", a, std::move(y), [](const Mat& g, const Mat& x, const Mat&) {
      return Mat(2.0 * g.array() * x.array());
    });
  }

  /// Huber with threshold delta, elementwise.
  Var huber(Var a, double delta) {
    Mat y = value(a).unaryExpr([delta](double r) {
      const double ar = std::abs(r);
      return ar <= delta ? 0.5 * r * r : delta * (ar - 0.5 * delta);
    });
    return unary("huber", a, std::move(y), [delta](const Mat& g, const Mat& x, const Mat&) {
      return Mat(g.array() * x.array().max(-delta).min(delta));
    });
  }

  // --- reductions ----------------------------------------------------------

  Var sum(Var a) {
    Mat out(1, 1);
    out(0, 0) = value(a).sum();
    return push("sum", std::move(out), {a}, requires_grad(a),
                [a](const Mat& g, const Nodes& n, Grads& grads) {
                  const Mat& x = n[a.id].value;
                  accumulate(grads, a, Mat::Constant(x.rows(), x.cols(), g(0, 0)));
                });
  }

  Var mean(Var a) {
    const auto count = static_cast<double>(value(a).size());
    if (count == 0) throw ShapeError("mean of empty matrix");
    return scale(sum(a), 1.0 / count);
  }

  /// sum(a .* w) for a constant weight matrix w.
  Var weighted_sum(Var a, Mat w) {
    if (w.rows() != value(a).rows() || w.cols() != value(a).cols()) throw ShapeError(dims_msg("weighted_sum", value(a), w));
    Mat out(1, 1);
    out(0, 0) = value(a).cwiseProduct(w).sum();
    return push("weighted_sum", std::move(out), {a}, requires_grad(a),
                [a, w = std::move(w)](const Mat& g, const Nodes&, Grads& grads) {
                  accumulate(grads, a, w * g(0, 0));
                });
  }

  /// Column means: RxC -> 1xC.
  Var mean_rows(Var a) {
    const Mat& A = value(a);
    if (A.rows() == 0) throw ShapeError("mean_rows of empty matrix");
    Mat out = A.colwise().mean();
    return push("mean_rows", std::move(out), {a}, requires_grad(a),
                [a](const Mat& g, const Nodes& n, Grads& grads) {
                  const auto r = n[a.id].value.rows();
                  Mat ga = g.replicate(r, 1) / static_cast<double>(r);
                  accumulate(grads, a, ga);
                });
  }

  /// Row sums: RxC -> Rx1.
  Var sum_cols(Var a) {
    Mat out = value(a).rowwise().sum();
    return push("sum_cols", std::move(out), {a}, requires_grad(a),
                [a](const Mat& g, const Nodes& n, Grads& grads) {
                  accumulate(grads, a, g.replicate(1, n[a.id].value.cols()));
                });
  }

  // --- structure -----------------------------------------------------------

  Var slice_rows(Var a, Eigen::Index r0, Eigen::Index count) {
    const Mat& A = value(a);
    if (r0 < 0 || count < 0 || r0 + count > A.rows()) throw ShapeError("slice_rows out of range");
    Mat out = A.middleRows(r0, count);
    return push("slice_rows", std::move(out), {a}, requires_grad(a),
                [a, r0, count](const Mat& g, const Nodes& n, Grads& grads) {
                  Mat& ga = slot(grads, n, a);
                  ga.middleRows(r0, count) += g;
                });
  }

  Var slice_cols(Var a, Eigen::Index c0, Eigen::Index count) {
    const Mat& A = value(a);
    if (c0 < 0 || count < 0 || c0 + count > A.cols()) throw ShapeError("slice_cols out of range");
    Mat out = A.middleCols(c0, count);
    return push("slice_cols", std::move(out), {a}, requires_grad(a),
                [a, c0, count](const Mat& g, const Nodes& n, Grads& grads) {
                  Mat& ga = slot(grads, n, a);
                  ga.middleCols(c0, count) += g;
                });
  }

  /// out[i] = a[index[i]]; backward scatters (adds) rows back.
  Var gather_rows(Var a, std::vector<Eigen::Index> index) {
    const Mat& A = value(a);
    Mat out(static_cast<Eigen::Index>(index.size()), A.cols());
    for (std::size_t i = 0; i < index.size(); ++i) {
      if (index[i] < 0 || index[i] >= A.rows()) throw ShapeError("gather_rows index out of range");
      out.row(static_cast<Eigen::Index>(i)) = A.row(index[i]);
    }
    return push("gather_rows", std::move(out), {a}, requires_grad(a),
                [a, index = std::move(index)](const Mat& g, const Nodes& n, Grads& grads) {
                  Mat& ga = slot(grads, n, a);
                  for (std::size_t i = 0; i < index.size(); ++i) ga.row(index[i]) += g.row(static_cast<Eigen::Index>(i));
                });
  }

  /// out has `rows` rows; out[index[i]] += a[i].
  Var scatter_add_rows(Var a, std::vector<Eigen::Index> index, Eigen::Index rows) {
    const Mat& A = value(a);
    if (static_cast<Eigen::Index>(index.size()) != A.rows()) throw ShapeError("scatter_add_rows index length");
    Mat out = Mat::Zero(rows, A.cols());
    for (std::size_t i = 0; i < index.size(); ++i) {
      if (index[i] < 0 || index[i] >= rows) throw ShapeError("scatter_add_rows index out of range");
      out.row(index[i]) += A.row(static_cast<Eigen::Index>(i));
    }
    return push("scatter_add_rows", std::move(out), {a}, requires_grad(a),
                [a, index = std::move(index)](const Mat& g, const Nodes&, Grads& grads) {
                  Mat ga(static_cast<Eigen::Index>(index.size()), g.cols());
                  for (std::size_t i = 0; i < index.size(); ++i) ga.row(static_cast<Eigen::Index>(i)) = g.row(index[i]);
                  accumulate(grads, a, ga);
                });
  }

  Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows of nothing");
    Eigen::Index rows = 0;
    const auto cols = value(parts[0]).cols();
    bool grad = false;
    for (Var p : parts) {
      if (value(p).cols() != cols) throw ShapeError("concat_rows column mismatch");
      rows += value(p).rows();
      grad = grad || requires_grad(p);
    }
    Mat out(rows, cols);
    Eigen::Index r = 0;
    for (Var p : parts) {
      out.middleRows(r, value(p).rows()) = value(p);
      r += value(p).rows();
    }
    return push("concat_rows", std::move(out), parts, grad,
                [parts](const Mat& g, const Nodes& n, Grads& grads) {
                  Eigen::Index r0 = 0;
                  for (Var p : parts) {
                    const auto pr = n[p.id].value.rows();
                    if (n[p.id].needs_grad) accumulate(grads, p, g.middleRows(r0, pr));
                    r0 += pr;
                  }
                });
  }

  /// Block-diagonal neighbour mixing: x holds `blocks` stacked NxC blocks, and
  /// each block becomes weights * block. `weights` is a constant NxN matrix.
  Var graph_aggregate(Var x, const Mat& weights) {
    const Mat& X = value(x);
    const auto n_nodes = weights.rows();
    if (weights.cols() != n_nodes || n_nodes == 0 || X.rows() % n_nodes != 0) throw ShapeError("graph_aggregate shape");
    const auto blocks = X.rows() / n_nodes;
    Mat out(X.rows(), X.cols());
    for (Eigen::Index b = 0; b < blocks; ++b) out.middleRows(b * n_nodes, n_nodes).noalias() = weights * X.middleRows(b * n_nodes, n_nodes);
    return push("graph_aggregate", std::move(out), {x}, requires_grad(x),
                [x, weights, n_nodes, blocks](const Mat& g, const Nodes&, Grads& grads) {
                  Mat gx(g.rows(), g.cols());
                  for (Eigen::Index b = 0; b < blocks; ++b)
                    gx.middleRows(b * n_nodes, n_nodes).noalias() = weights.transpose() * g.middleRows(b * n_nodes, n_nodes);
                  accumulate(grads, x, gx);
                });
  }

  /// Multi-head additive graph attention over stacked NxD blocks.
  ///
  /// For head k owning columns [k*p, (k+1)*p):
  ///   e_vu  = leaky(a_dst . wh_v + a_src . wh_u)    for u in allowed(v)
  ///   att_v = softmax_u(e_vu)
  ///   out_v = sum_u att_vu * wh_u
  /// `allowed` is NxN (nonzero = may attend); the diagonal should be set so
  /// every row has at least one entry.
  Var graph_attention(Var wh, Var a_src, Var a_dst, const Mat& allowed, int heads, double slope) {
    const Mat& W = value(wh);
    const Mat& As = value(a_src);
    const Mat& Ad = value(a_dst);
    const auto n_nodes = allowed.rows();
    const auto D = W.cols();
    if (heads <= 0 || D % heads != 0) throw ShapeError("graph_attention: heads must divide width");
    if (As.rows() != 1 || As.cols() != D || Ad.rows() != 1 || Ad.cols() != D) throw ShapeError("graph_attention: attention vector shape");
    if (allowed.cols() != n_nodes || n_nodes == 0 || W.rows() % n_nodes != 0) throw ShapeError("graph_attention: block shape");
    const auto p = D / heads;
    const auto R = W.rows();
    const auto blocks = R / n_nodes;

    // Per-row, per-head source/destination scores.
    Mat s_src(R, heads), s_dst(R, heads);
    for (Eigen::Index r = 0; r < R; ++r)
      for (int k = 0; k < heads; ++k) {
        s_src(r, k) = W.row(r).segment(k * p, p).dot(As.row(0).segment(k * p, p));
        s_dst(r, k) = Ad.row(0).segment(k * p, p).dot(W.row(r).segment(k * p, p));
      }

    // att laid out as [head][row][neighbour]; pre-activation kept for the slope.
    auto att = std::make_shared<std::vector<double>>(static_cast<std::size_t>(heads * R * n_nodes), 0.0);
    auto pre = std::make_shared<std::vector<double>>(att->size(), 0.0);
    auto idx = [R, n_nodes](int k, Eigen::Index r, Eigen::Index u) {
      return (static_cast<std::size_t>(k) * R + r) * n_nodes + u;
    };
    Mat out = Mat::Zero(R, D);
    for (int k = 0; k < heads; ++k)
      for (Eigen::Index b = 0; b < blocks; ++b)
        for (Eigen::Index v = 0; v < n_nodes; ++v) {
          const auto rv = b * n_nodes + v;
          double mx = -std::numeric_limits<double>::infinity();
          for (Eigen::Index u = 0; u < n_nodes; ++u) {
            if (allowed(v, u) == 0.0) continue;
            const double e = s_dst(rv, k) + s_src(b * n_nodes + u, k);
            (*pre)[idx(k, rv, u)] = e;
            const double le = e > 0.0 ? e : slope * e;
            (*att)[idx(k, rv, u)] = le;
            mx = std::max(mx, le);
          }
          double z = 0.0;
          for (Eigen::Index u = 0; u < n_nodes; ++u) {
            if (allowed(v, u) == 0.0) continue;
            double& a = (*att)[idx(k, rv, u)];
            a = std::exp(a - mx);
            z += a;
          }
          for (Eigen::Index u = 0; u < n_nodes; ++u) {
            if (allowed(v, u) == 0.0) continue;
            double& a = (*att)[idx(k, rv, u)];
            a /= z;
            out.row(rv).segment(k * p, p) += a * W.row(b * n_nodes + u).segment(k * p, p);
          }
        }

    return push("graph_attention", std::move(out), {wh, a_src, a_dst}, any_grad(wh, a_src) || requires_grad(a_dst),
                [=, allowed = allowed](const Mat& g, const Nodes& n, Grads& grads) {
                  const Mat& Wv = n[wh.id].value;
                  const Mat& Asv = n[a_src.id].value;
                  const Mat& Adv = n[a_dst.id].value;
                  Mat g_wh = Mat::Zero(R, D);
                  Mat g_ssrc = Mat::Zero(R, heads), g_sdst = Mat::Zero(R, heads);
                  std::vector<double> g_att(static_cast<std::size_t>(n_nodes));
                  for (int k = 0; k < heads; ++k)
                    for (Eigen::Index b = 0; b < blocks; ++b)
                      for (Eigen::Index v = 0; v < n_nodes; ++v) {
                        const auto rv = b * n_nodes + v;
                        const auto gv = g.row(rv).segment(k * p, p);
                        double dot = 0.0;
                        for (Eigen::Index u = 0; u < n_nodes; ++u) {
                          if (allowed(v, u) == 0.0) continue;
                          const auto ru = b * n_nodes + u;
                          const double a = (*att)[idx(k, rv, u)];
                          g_wh.row(ru).segment(k * p, p) += a * gv;
                          g_att[u] = gv.dot(Wv.row(ru).segment(k * p, p));
                          dot += a * g_att[u];
                        }
                        for (Eigen::Index u = 0; u < n_nodes; ++u) {
                          if (allowed(v, u) == 0.0) continue;
                          const double a = (*att)[idx(k, rv, u)];
                          const double ge = a * (g_att[u] - dot);
                          const double gp = (*pre)[idx(k, rv, u)] > 0.0 ? ge : slope * ge;
                          g_sdst(rv, k) += gp;
                          g_ssrc(b * n_nodes + u, k) += gp;
                        }
                      }
                  Mat g_as = Mat::Zero(1, D), g_ad = Mat::Zero(1, D);
                  for (Eigen::Index r = 0; r < R; ++r)
                    for (int k = 0; k < heads; ++k) {
                      g_wh.row(r).segment(k * p, p) += g_ssrc(r, k) * Asv.row(0).segment(k * p, p) + g_sdst(r, k) * Adv.row(0).segment(k * p, p);
                      g_as.row(0).segment(k * p, p) += g_ssrc(r, k) * Wv.row(r).segment(k * p, p);
                      g_ad.row(0).segment(k * p, p) += g_sdst(r, k) * Wv.row(r).segment(k * p, p);
                    }
                  if (n[wh.id].needs_grad) accumulate(grads, wh, g_wh);
                  if (n[a_src.id].needs_grad) accumulate(grads, a_src, g_as);
                  if (n[a_dst.id].needs_grad) accumulate(grads, a_dst, g_ad);
                });
  }

  /// One fused GRU step over all rows.
  ///   xp = x W_x + b_x,  hp = h W_h + b_h
  ///   r = sig(xp_r + hp_r),  z = sig(xp_z + hp_z),  n = tanh(xp_n + r * hp_n)
  ///   h' = n + z * (h - n)
  /// Gate columns are laid out [reset | update | candidate], E each. The input
  /// projection happens per step so the working set stays small; gate caches
  /// are only kept when a gradient will flow.
  Var gru_step(Var x, Var h, Var w_x, Var b_x, Var w_h, Var b_h) {
    const Mat& X = value(x);
    const Mat& H = value(h);
    const Mat& Wx = value(w_x);
    const Mat& Wh = value(w_h);
    const auto R = H.rows(), E = H.cols();
    if (Wh.rows() != E || Wh.cols() != 3 * E || value(b_h).rows() != 1 || value(b_h).cols() != 3 * E)
      throw ShapeError("gru_step: hidden weight shape");
    if (X.rows() != R || Wx.rows() != X.cols() || Wx.cols() != 3 * E || value(b_x).rows() != 1 || value(b_x).cols() != 3 * E)
      throw ShapeError("gru_step: input weight shape");

    Mat xp(R, 3 * E), hp(R, 3 * E);
    xp.noalias() = X * Wx;
    xp.rowwise() += value(b_x).row(0);
    hp.noalias() = H * Wh;
    hp.rowwise() += value(b_h).row(0);
    Mat gates(R, 3 * E);  // [r | z | n]
    xp.leftCols(2 * E) += hp.leftCols(2 * E);
    gates.leftCols(2 * E) = fast_sigmoid(xp.leftCols(2 * E).array());
    xp.rightCols(E).array() += gates.leftCols(E).array() * hp.rightCols(E).array();
    gates.rightCols(E) = fast_tanh(xp.rightCols(E).array());
    Mat out = gates.rightCols(E) + (gates.middleCols(E, E).array() * (H - gates.rightCols(E)).array()).matrix();

    const bool grad = requires_grad(x) || requires_grad(h) || requires_grad(w_x) || requires_grad(b_x) ||
                      requires_grad(w_h) || requires_grad(b_h);
    if (!grad) return push("gru_step", std::move(out), {}, false, nullptr);
    auto cache = std::make_shared<Mat>(std::move(gates));
    auto hp_n = std::make_shared<Mat>(hp.rightCols(E));
    return push("gru_step", std::move(out), {x, h, w_x, b_x, w_h, b_h}, true,
                [=](const Mat& g, const Nodes& n, Grads& grads) {
                  const Mat& Hv = n[h.id].value;
                  const auto r = cache->leftCols(E).array();
                  const auto z = cache->middleCols(E, E).array();
                  const auto cand = cache->rightCols(E).array();
                  Mat ga(R, 3 * E);  // gradients w.r.t. gate pre-activations
                  ga.rightCols(E) = (g.array() * (1.0 - z) * (1.0 - cand.square())).matrix();
                  ga.middleCols(E, E) = (g.array() * (Hv.array() - cand) * z * (1.0 - z)).matrix();
                  ga.leftCols(E) = (ga.rightCols(E).array() * hp_n->array() * r * (1.0 - r)).matrix();
                  if (n[w_x.id].needs_grad) accumulate(grads, w_x, n[x.id].value.transpose() * ga);
                  if (n[b_x.id].needs_grad) accumulate(grads, b_x, ga.colwise().sum());
                  if (n[x.id].needs_grad) accumulate(grads, x, ga * n[w_x.id].value.transpose());
                  ga.rightCols(E).array() *= r;  // now the gradient w.r.t. hp
                  if (n[w_h.id].needs_grad) accumulate(grads, w_h, Hv.transpose() * ga);
                  if (n[b_h.id].needs_grad) accumulate(grads, b_h, ga.colwise().sum());
                  if (n[h.id].needs_grad) {
                    Mat gh = (g.array() * z).matrix();
                    gh.noalias() += ga * n[w_h.id].value.transpose();
                    accumulate(grads, h, gh);
                  }
                });
  }

  // --- reverse sweep -------------------------------------------------------

  /// Gradient of a scalar node with respect to every bound parameter.
  /// `param_count` sizes the result; unbound parameters must then be sized by
  /// the caller (they come back as 0x0).
  Gradients backward(Var loss, std::size_t param_count = 0) const {
    const Mat& L = value(loss);
    if (L.size() != 1) throw ShapeError("backward requires a scalar loss, got " + std::to_string(L.rows()) + "x" + std::to_string(L.cols()));
    Grads grads(nodes_.size());
    grads[loss.id] = Mat::Ones(1, 1);
    for (std::int32_t i = loss.id; i >= 0; --i) {
      const Node& node = nodes_[i];
      if (!node.needs_grad || grads[i].size() == 0 || !node.backward) continue;
      if (!grads[i].allFinite()) {
        throw NumericError("non-finite gradient at op #" + std::to_string(i) + " (" + node.op + ")");
      }
      node.backward(grads[i], nodes_, grads);
    }
    Gradients out(std::max(param_count, param_nodes_.size()));
    for (std::size_t p = 0; p < param_nodes_.size(); ++p) {
      const int id = param_nodes_[p];
      if (id < 0) continue;
      const Mat& v = nodes_[id].value;
      if (grads[id].size() == 0) {
        out[p] = Mat::Zero(v.rows(), v.cols());
      } else {
        if (!grads[id].allFinite()) throw NumericError("non-finite gradient at parameter node #" + std::to_string(id));
        out[p] = std::move(grads[id]);
      }
    }
    return out;
  }

 private:
  struct Node;
  using Nodes = std::vector<Node>;
  using Grads = std::vector<Mat>;
  using Backward = std::function<void(const Mat&, const Nodes&, Grads&)>;

  struct Node {
    const char* op;
    Mat value;
    bool needs_grad = false;
    int param = -1;
    Backward backward;
  };

  static double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  }

  // Vectorisable forms built on exp only (Eigen has no packet tanh for double).
  template <class A>
  static Mat fast_sigmoid(const A& x) {
    return (1.0 / (1.0 + (-x).exp())).matrix();
  }
  template <class A>
  static Mat fast_tanh(const A& x) {
    const Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> e = (-2.0 * x.abs()).exp();
    return (x.sign() * (1.0 - e) / (1.0 + e)).matrix();
  }

  static void accumulate(Grads& grads, Var v, const Mat& g) {
    Mat& slot = grads[v.id];
    if (slot.size() == 0) {
      slot = g;
    } else {
      slot += g;
    }
  }

  static Mat& slot(Grads& grads, const Nodes& n, Var v) {
    Mat& s = grads[v.id];
    if (s.size() == 0) s = Mat::Zero(n[v.id].value.rows(), n[v.id].value.cols());
    return s;
  }

  template <class F>
  Var unary(const char* name, Var a, Mat y, F grad_fn) {
    return push(name, std::move(y), {a}, requires_grad(a),
                [a, grad_fn, self = static_cast<std::int32_t>(nodes_.size())](const Mat& g, const Nodes& n, Grads& grads) {
                  accumulate(grads, a, grad_fn(g, n[a.id].value, n[self].value));
                });
  }

  bool any_grad(Var a, Var b) const { return requires_grad(a) || requires_grad(b); }

  void same_shape(const char* op, Var a, Var b) const {
    const Mat& A = value(a);
    const Mat& B = value(b);
    if (A.rows() != B.rows() || A.cols() != B.cols()) throw ShapeError(dims_msg(op, A, B));
  }

  static std::string dims_msg(const char* op, const Mat& a, const Mat& b) {
    return std::string(op) + ": incompatible shapes " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
           " and " + std::to_string(b.rows()) + "x" + std::to_string(b.cols());
  }

  Var push(const char* op, Mat value, std::initializer_list<Var>, bool needs_grad, Backward bw) {
    return push_impl(op, std::move(value), needs_grad, std::move(bw));
  }
  Var push(const char* op, Mat value, const std::vector<Var>&, bool needs_grad, Backward bw) {
    return push_impl(op, std::move(value), needs_grad, std::move(bw));
  }

  Var push_impl(const char* op, Mat value, bool needs_grad, Backward bw) {
    if (!value.allFinite()) {
      throw NumericError(std::string("non-finite value produced by op #") + std::to_string(nodes_.size()) + " (" + op + ")");
    }
    Node node{op, std::move(value), needs_grad, -1, needs_grad ? std::move(bw) : Backward{}};
    nodes_.push_back(std::move(node));
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  Nodes nodes_;
  std::vector<int> param_nodes_;
};

}  // namespace freegnn
