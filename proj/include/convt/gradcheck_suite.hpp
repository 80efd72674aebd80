#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "convt/gradcheck.hpp"

namespace convt {

struct OpCheck {
  std::string name;
  FiniteDiffReport report;
};

/// Names accepted by run_gradcheck_suite, ending with the full model composite.
const std::vector<std::string>& gradcheck_op_names();

/// Finite-difference check of each named op on random inputs. `ops` is a
/// comma-separated subset of gradcheck_op_names() or "all".
std::vector<OpCheck> run_gradcheck_suite(const std::string& ops = "all", const FiniteDiffOptions& options = {});

/// The composite: a 16x16, two-stage ConvT followed by the hybrid loss,
/// checked over all parameters.
FiniteDiffReport gradcheck_model(const FiniteDiffOptions& options = {});

}  // namespace convt
