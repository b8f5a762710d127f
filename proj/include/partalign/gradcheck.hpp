#pragma once

// Central finite-difference validation of analytic gradients. Always runs at
// 64-bit precision; 32-bit differences drown in rounding noise.

#include <functional>
#include <string>
#include <vector>

#include "partalign/tensor.hpp"

namespace partalign {

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  std::string worst_leaf;
  size_t worst_index = 0;
  double h = 0.0;
  double tol = 0.0;
};

struct GradCheckLeaf {
  std::string name;
  Tensor<double> tensor;
};

// `f` must rebuild its graph from the current leaf values on every call and
// return a scalar loss. Each leaf coordinate is perturbed by +/- h.
inline GradCheckReport grad_check_leaves(
    const std::function<Tensor<double>()>& f, std::vector<GradCheckLeaf> leaves,
    double h = 1e-5, double tol = 1e-4) {
  GradCheckReport report;
  report.h = h;
  report.tol = tol;
  for (auto& l : leaves) {
    l.tensor.set_requires_grad(true);
    l.tensor.zero_grad();
  }
  Tensor<double> loss = f();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (auto& l : leaves) analytic.push_back(l.tensor.grad());

  for (size_t li = 0; li < leaves.size(); ++li) {
    auto& x = leaves[li].tensor.data_mut();
    for (size_t i = 0; i < x.size(); ++i) {
      const double orig = x[i];
      x[i] = orig + h;
      const double fp = f().value();
      x[i] = orig - h;
      const double fm = f().value();
      x[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[li][i];
      const double denom =
          std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      const double rel = std::fabs(a - numeric) / denom;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_leaf = leaves[li].name;
        report.worst_index = i;
      }
    }
  }
  report.pass = report.max_rel_err <= tol;
  return report;
}

// Single-input form: checks d f(x) / d x.
inline GradCheckReport grad_check(
    const std::function<Tensor<double>(const Tensor<double>&)>& f,
    Tensor<double> x, double h = 1e-5, double tol = 1e-4) {
  return grad_check_leaves([&f, &x]() { return f(x); }, {{"x", x}}, h, tol);
}

}  // namespace partalign
