#include "dirnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

namespace dirnet {

namespace {

std::vector<std::size_t> probe_indices(std::size_t size, std::size_t limit, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(size);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (limit == 0 || limit >= size) return idx;
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(limit);
  std::sort(idx.begin(), idx.end());
  return idx;
}

constexpr double kSuspectError = 1e-5;

double rel_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

}  // namespace

GradCheckResult backward_check(Module<double>& layer, const Tensor<double>& input,
                               const GradCheckOptions& options, const std::string& op_name) {
  if (!(options.epsilon >= 1e-7 && options.epsilon <= 1e-3)) {
    throw ConfigError("gradient check epsilon must lie in [1e-7, 1e-3]");
  }
  std::mt19937_64 rng(options.seed);
  Tensor<double> x = input;
  require_finite(x, op_name + " (input)");

  Tensor<double> out = layer.forward(x, options.mode);
  require_finite(out, op_name + " forward");
  const Tensor<double> proj = Tensor<double>::randn(out.shape(), rng);

  layer.zero_grad();
  out = layer.forward(x, options.mode);
  const Tensor<double> grad_x = layer.backward(proj);
  require_finite(grad_x, op_name + " backward");

  std::vector<Param<double>*> params = layer.params();
  std::vector<Tensor<double>> analytic;
  analytic.reserve(params.size());
  for (auto* p : params) {
    require_finite(p->grad, op_name + " backward (" + p->name + ")");
    analytic.push_back(p->grad);
  }

  auto loss = [&]() {
    const Tensor<double> y = layer.forward(x, options.mode);
    require_finite(y, op_name + " forward");
    return dot(y, proj);
  };
  const double eps = options.epsilon;
  GradCheckResult result;
  auto central = [&](double& slot, double step) {
    const double saved = slot;
    slot = saved + step;
    const double up = loss();
    slot = saved - step;
    const double down = loss();
    slot = saved;
    return (up - down) / (2.0 * step);
  };
  auto probe = [&](double& slot, double expected, const std::string& label) {
    const double numeric = central(slot, eps);
    const double err = rel_error(expected, numeric);
    ++result.probes;
    // A step across a kink makes the secant depend on the step length; a
    // wrong backward does not.
    if (err > kSuspectError) {
      const double finer = central(slot, eps / 2);
      if (std::abs(numeric - finer) >= 0.1 * std::abs(numeric - expected)) {
        ++result.nonsmooth;
        const double close = rel_error(expected, central(slot, eps * 1e-2));
        if (close > result.nonsmooth_max_rel_error) {
          result.nonsmooth_max_rel_error = close;
          result.nonsmooth_worst = label;
        }
        return;
      }
    }
    if (err > result.max_rel_error || result.worst.empty()) {
      result.max_rel_error = err;
      result.worst = label;
    }
  };

  if (options.check_input) {
    for (std::size_t i : probe_indices(x.size(), options.max_probes_per_tensor, rng)) {
      probe(x[i], grad_x[i], "input[" + std::to_string(i) + "]");
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor<double>& value = params[k]->value;
    for (std::size_t i : probe_indices(value.size(), options.max_probes_per_tensor, rng)) {
      probe(value[i], analytic[k][i], params[k]->name + "[" + std::to_string(i) + "]");
    }
  }
  return result;
}

}  // namespace dirnet
