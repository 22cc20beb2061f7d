#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "u2u/autograd.hpp"

namespace u2u {

// Named leaves handed to a graph builder. The same map type is used by the
// model builders, so any block can be checked against finite differences.
template <typename T>
struct ParamMap {
  std::map<std::string, NodePtr<T>> leaves;

  const NodePtr<T>& get(const std::string& name) const {
    auto it = leaves.find(name);
    if (it == leaves.end()) throw std::out_of_range("parameter not found: " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return leaves.count(name) != 0; }
};

struct GradCheckEntry {
  std::string param;
  double max_rel_err = 0.0;
  std::int64_t entries_above_tol = 0;
  std::int64_t nonfinite = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;

  bool pass() const {
    for (const auto& e : entries) {
      if (e.entries_above_tol > 0 || e.nonfinite > 0) return false;
    }
    return true;
  }
  double worst() const {
    double w = 0.0;
    for (const auto& e : entries) w = std::max(w, e.max_rel_err);
    return w;
  }
};

// Central-difference check of a scalar graph built by `build` from the given
// parameter values. `build` must be a pure function of the parameter map.
// Comparison: rel = |a - n| / max(|a|, |n|, 1e-6), so gradients that are zero
// on both routes compare clean.
inline GradCheckReport grad_check(
    const std::map<std::string, Tensor<double>>& param_values,
    const std::function<NodePtr<double>(const ParamMap<double>&)>& build, double tolerance,
    double h = 1e-4) {
  auto make_params = [&](const std::map<std::string, Tensor<double>>& vals) {
    ParamMap<double> pm;
    for (const auto& [name, tensor] : vals) pm.leaves[name] = make_leaf<double>(tensor, true, name);
    return pm;
  };
  auto eval = [&](const std::map<std::string, Tensor<double>>& vals) {
    return build(make_params(vals))->value[0];
  };

  ParamMap<double> params = make_params(param_values);
  NodePtr<double> loss = build(params);
  if (loss->value.size() != 1) {
    throw std::invalid_argument("grad_check: builder must return a scalar loss");
  }
  backward(loss);

  std::map<std::string, Tensor<double>> analytic;
  for (auto& [name, leaf] : params.leaves) {
    analytic[name] = leaf->has_grad() ? leaf->grad : Tensor<double>(leaf->value.shape);
  }

  GradCheckReport report;
  report.tolerance = tolerance;
  std::map<std::string, Tensor<double>> work = param_values;
  for (const auto& [name, base] : param_values) {
    GradCheckEntry entry;
    entry.param = name;
    for (std::int64_t i = 0; i < base.size(); ++i) {
      work[name][i] = base[i] + h;
      const double fp = eval(work);
      work[name][i] = base[i] - h;
      const double fm = eval(work);
      work[name][i] = base[i];
      const double numeric = (fp - fm) / (2.0 * h);
      const double analytic_v = analytic[name][i];
      if (!std::isfinite(numeric) || !std::isfinite(analytic_v)) {
        ++entry.nonfinite;
        continue;
      }
      const double denom = std::max({std::fabs(analytic_v), std::fabs(numeric), 1e-6});
      const double rel = std::fabs(analytic_v - numeric) / denom;
      entry.max_rel_err = std::max(entry.max_rel_err, rel);
      if (rel > tolerance) ++entry.entries_above_tol;
    }
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace u2u
