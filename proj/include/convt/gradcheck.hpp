#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "convt/graph.hpp"
#include "convt/tensor.hpp"

namespace convt {

struct FiniteDiffOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Coordinates sampled across all tensors; every coordinate when fewer exist.
  std::size_t max_coordinates = 200;
  std::uint64_t seed = 0;
  /// Denominator floor for the relative error. Central differences carry
  /// round-off near eps * |f| / step (~1e-11 here), so exactly-zero gradients,
  /// such as attention key biases, compare as absolute differences instead.
  double abs_floor = 1e-6;
};

struct FiniteDiffReport {
  double max_relative_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  std::size_t coordinates_checked = 0;
  bool passed = true;
};

/// Compares `analytic` against central differences (f(p+h) - f(p-h)) / 2h.
///
/// `params` are perturbed in place one coordinate at a time and restored
/// bit-exactly afterwards. Throws NumericError if f returns a non-finite value.
FiniteDiffReport finite_diff_check(const std::function<double()>& f, std::span<Tensor* const> params,
                                   std::span<const Tensor> analytic, const FiniteDiffOptions& options = {});

/// Builds a scalar from graph leaves.
using GraphFunction = std::function<Var(Graph&, std::span<const Var>)>;

/// Runs `fn` once with gradients to get the analytic answer, then checks it
/// against finite differences of `fn` evaluated in gradient-free graphs.
FiniteDiffReport gradcheck(const GraphFunction& fn, std::vector<Tensor> inputs, const FiniteDiffOptions& options = {});

}  // namespace convt
