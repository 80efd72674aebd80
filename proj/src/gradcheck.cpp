#include "convt/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

#include "convt/error.hpp"
#include "convt/rng.hpp"

namespace convt {
namespace {

std::vector<std::size_t> sample_coordinates(std::size_t total, std::size_t wanted, std::uint64_t seed) {
  std::vector<std::size_t> out;
  if (total <= wanted) {
    out.resize(total);
    for (std::size_t i = 0; i < total; ++i) out[i] = i;
    return out;
  }
  // Floyd's algorithm: `wanted` distinct indices without materializing [0, total).
  Rng rng(seed);
  std::set<std::size_t> chosen;
  for (std::size_t j = total - wanted; j < total; ++j) {
    const std::size_t t = rng.below(j + 1);
    if (!chosen.insert(t).second) chosen.insert(j);
  }
  return {chosen.begin(), chosen.end()};
}

double checked(double v) {
  if (!std::isfinite(v)) throw NumericError("finite_diff_check: function returned a non-finite value");
  return v;
}

}  // namespace

FiniteDiffReport finite_diff_check(const std::function<double()>& f, std::span<Tensor* const> params,
                                   std::span<const Tensor> analytic, const FiniteDiffOptions& options) {
  if (!(options.step > 0.0)) throw ConfigError("finite_diff_check: step must be positive");
  if (params.size() != analytic.size()) throw ContractError("finite_diff_check: one analytic gradient per tensor");
  std::vector<std::size_t> offsets{0};
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != analytic[i].shape()) {
      throw DimensionError("finite_diff_check: gradient shape " + to_string(analytic[i].shape()) +
                           " does not match parameter " + to_string(params[i]->shape()));
    }
    offsets.push_back(offsets.back() + params[i]->size());
  }
  checked(f());

  FiniteDiffReport report;
  for (std::size_t flat : sample_coordinates(offsets.back(), options.max_coordinates, options.seed)) {
    const auto t = static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), flat) - offsets.begin()) - 1;
    const std::size_t i = flat - offsets[t];
    double& slot = (*params[t])[i];
    const double saved = slot;
    slot = saved + options.step;
    const double up = checked(f());
    slot = saved - options.step;
    const double down = checked(f());
    slot = saved;
    const double numeric = (up - down) / (2.0 * options.step);
    const double exact = analytic[t][i];
    const double denom = std::max({std::abs(numeric), std::abs(exact), options.abs_floor});
    const double rel = std::abs(numeric - exact) / denom;
    ++report.coordinates_checked;
    if (rel > report.max_relative_error || report.coordinates_checked == 1) {
      report.max_relative_error = rel;
      report.worst_tensor = t;
      report.worst_index = i;
      report.analytic_at_worst = exact;
      report.numeric_at_worst = numeric;
    }
  }
  report.passed = report.max_relative_error < options.tolerance;
  return report;
}

FiniteDiffReport gradcheck(const GraphFunction& fn, std::vector<Tensor> inputs, const FiniteDiffOptions& options) {
  std::vector<Tensor> analytic;
  {
    Graph g;
    std::vector<Var> leaves;
    for (const auto& t : inputs) leaves.push_back(g.input(t));
    const Var out = fn(g, leaves);
    g.backward(out);
    for (Var v : leaves) analytic.push_back(g.grad(v));
  }
  std::vector<Tensor*> ptrs;
  for (auto& t : inputs) ptrs.push_back(&t);
  const auto evaluate = [&]() {
    Graph g(false);
    std::vector<Var> leaves;
    for (const auto& t : inputs) leaves.push_back(g.constant(t));
    return g.value(fn(g, leaves)).item();
  };
  return finite_diff_check(evaluate, ptrs, analytic, options);
}

}  // namespace convt
