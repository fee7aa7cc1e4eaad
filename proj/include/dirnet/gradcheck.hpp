#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "dirnet/module.hpp"

namespace dirnet {

struct GradCheckOptions {
  double epsilon = 1e-4;
  Mode mode = Mode::Train;
  std::uint64_t seed = 1;
  // Entries probed per tensor; 0 probes every entry. Probed indices are
  // drawn without replacement from a seeded generator.
  std::size_t max_probes_per_tensor = 0;
  bool check_input = true;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // "<tensor>[index]" where the maximum occurred
  std::size_t probes = 0;
  // Probes whose step crossed a non-differentiable point (ReLU, max-pool
  // switch). They are excluded from max_rel_error and re-measured with a
  // step of epsilon / 100.
  std::size_t nonsmooth = 0;
  double nonsmooth_max_rel_error = 0.0;
  std::string nonsmooth_worst;
};

/// Compares the module's explicit backward against central differences of
/// the scalar loss <forward(x), R> for a fixed random projection R. The
/// error per entry is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8);
/// the result is the maximum over the input and every parameter. A probe
/// whose difference quotient moves under step halving by at least a tenth of its
/// discrepancy is counted in `nonsmooth` instead.
/// Throws NumericError naming `op_name` on any non-finite value.
GradCheckResult backward_check(Module<double>& layer, const Tensor<double>& input,
                               const GradCheckOptions& options = {},
                               const std::string& op_name = "module");

}  // namespace dirnet
