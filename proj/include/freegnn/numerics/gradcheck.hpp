#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "freegnn/numerics/tape.hpp"

namespace freegnn {

/// Central differences (f(x + eps e_i) - f(x - eps e_i)) / 2eps for every
/// coordinate of theta. f must be deterministic.
inline Mat finite_diff_grad(const std::function<double(const Mat&)>& f, const Mat& theta, double eps = 1e-5) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_grad: eps must be positive");
  Mat probe = theta;
  Mat grad(theta.rows(), theta.cols());
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    const double x = probe.data()[i];
    probe.data()[i] = x + eps;
    const double fp = f(probe);
    probe.data()[i] = x - eps;
    const double fm = f(probe);
    probe.data()[i] = x;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_diff_grad: non-finite function value at coordinate " + std::to_string(i));
    }
    grad.data()[i] = (fp - fm) / (2.0 * eps);
  }
  return grad;
}

struct CoordinateMismatch {
  Eigen::Index index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct ParamGradCheck {
  std::string name;
  double max_abs_error = 0.0;
  /// max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|): error relative to the
  /// parameter's own gradient scale.
  double max_rel_error = 0.0;
  /// Parameters whose whole gradient sits inside the deadband are not judged.
  bool judged = false;
  std::vector<CoordinateMismatch> worst;
};

struct GradReport {
  std::vector<ParamGradCheck> params;
  double tolerance = 0.0;
  double deadband = 0.0;
  bool pass = true;

  std::string summary() const {
    std::ostringstream os;
    os << (pass ? "PASS" : "FAIL") << " (rel tol " << tolerance << ")\n";
    for (const auto& p : params) {
      os << "  " << p.name << ": max_abs=" << p.max_abs_error << " max_rel=" << p.max_rel_error
         << (p.judged ? "" : " [deadband]") << '\n';
      if (p.judged && p.max_rel_error > tolerance) {
        for (const auto& w : p.worst) os << "    [" << w.index << "] analytic=" << w.analytic << " numeric=" << w.numeric << '\n';
      }
    }
    return os.str();
  }
};

/// Builds the loss on a fresh tape given bound parameter nodes.
using LossBuilder = std::function<Var(Tape&, const std::vector<Var>&)>;

inline double evaluate_loss(const LossBuilder& build, const std::vector<Mat>& params) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) vars.push_back(tape.constant(params[i]));
  return tape.scalar(build(tape, vars));
}

inline Gradients analytic_gradients(const LossBuilder& build, const std::vector<Mat>& params) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) vars.push_back(tape.parameter(params[i], static_cast<int>(i)));
  return tape.backward(build(tape, vars), params.size());
}

/// Compares the tape's gradient against central differences, parameter by
/// parameter. The builder must be deterministic (reseed any RNG inside it).
inline GradReport check_gradients(const LossBuilder& build, const std::vector<Mat>& params,
                                  const std::vector<std::string>& names, double tolerance = 1e-4,
                                  double eps = 1e-5, double deadband = 1e-8) {
  GradReport report;
  report.tolerance = tolerance;
  report.deadband = deadband;
  const Gradients analytic = analytic_gradients(build, params);

  std::vector<Mat> probe = params;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const auto f = [&](const Mat& theta) {
      probe[p] = theta;
      return evaluate_loss(build, probe);
    };
    const Mat numeric = finite_diff_grad(f, params[p], eps);
    probe[p] = params[p];

    ParamGradCheck check;
    check.name = p < names.size() ? names[p] : "param" + std::to_string(p);
    const Mat& a = analytic[p];
    const Mat diff = (a - numeric).cwiseAbs();
    check.max_abs_error = diff.size() ? diff.maxCoeff() : 0.0;
    const double scale = std::max(a.size() ? a.cwiseAbs().maxCoeff() : 0.0, numeric.size() ? numeric.cwiseAbs().maxCoeff() : 0.0);
    check.judged = scale > deadband;
    check.max_rel_error = scale > 0.0 ? check.max_abs_error / scale : 0.0;

    std::vector<Eigen::Index> order(static_cast<std::size_t>(diff.size()));
    for (Eigen::Index i = 0; i < diff.size(); ++i) order[static_cast<std::size_t>(i)] = i;
    const auto k = std::min<std::size_t>(3, order.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](auto x, auto y) { return diff.data()[x] > diff.data()[y]; });
    for (std::size_t i = 0; i < k; ++i) check.worst.push_back({order[i], a.data()[order[i]], numeric.data()[order[i]]});

    if (check.judged && check.max_rel_error > tolerance) report.pass = false;
    report.params.push_back(std::move(check));
  }
  return report;
}

}  // namespace freegnn
