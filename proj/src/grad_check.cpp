// SPDX-License-Identifier: Apache-2.0

#include "bilingunet/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "bilingunet/ops.hpp"

namespace bilingunet {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

namespace {

struct ProbeInstall {
  explicit ProbeInstall(detail::KinkProbe& probe) : previous(detail::kink_probe()) {
    detail::kink_probe() = &probe;
  }
  ~ProbeInstall() { detail::kink_probe() = previous; }
  ProbeInstall(const ProbeInstall&) = delete;
  ProbeInstall& operator=(const ProbeInstall&) = delete;
  detail::KinkProbe* previous;
};

}  // namespace

GradientMap analytic_gradients(const ScalarFunction& f, ParamStore<double>& params) {
  params.zero_grad();
  Tape<double> tape;
  Tensor<double> loss;
  {
    Tape<double>::Scope scope(tape);
    loss = f();
  }
  backward(tape, loss);
  GradientMap grads;
  for (const auto& name : params.names()) {
    Tensor<double>& t = params.get(name);
    if (!t.requires_grad()) continue;
    if (t.has_grad()) {
      grads[name].assign(t.grad().begin(), t.grad().end());
    } else {
      grads[name].assign(t.numel(), 0.0);
    }
  }
  params.zero_grad();
  return grads;
}

GradCheckResult compare_with_finite_differences(const ScalarFunction& f, ParamStore<double>& params,
                                                const GradientMap& analytic,
                                                const GradCheckOptions& options) {
  GradCheckResult result;
  Rng rng(options.seed);
  detail::KinkProbe probe;
  ProbeInstall install(probe);
  f();
  probe.recording = false;
  for (const auto& name : params.names()) {
    Tensor<double>& t = params.get(name);
    if (!t.requires_grad()) continue;
    auto it = analytic.find(name);
    if (it == analytic.end()) throw ContractError("no analytic gradient for " + name);

    std::vector<std::size_t> coords(t.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > options.coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.coords_per_tensor);
    }
    for (std::size_t idx : coords) {
      const double saved = t[idx];
      double step = options.eps;
      double numeric = 0.0;
      for (int attempt = 0;; ++attempt) {
        probe.crossed = false;
        // Fourth-order central stencil over offsets +-step and +-step/2.
        const double h = step / 2.0;
        double values[4];
        const double offsets[4] = {2.0 * h, h, -h, -2.0 * h};
        for (int k = 0; k < 4; ++k) {
          probe.cursor = 0;
          t[idx] = saved + offsets[k];
          values[k] = f().item();
        }
        t[idx] = saved;
        numeric = (8.0 * (values[1] - values[2]) - (values[0] - values[3])) / (12.0 * h);
        if (!probe.crossed) break;
        if (attempt == options.max_step_reductions) {
          ++result.kinked_coordinates;
          break;
        }
        ++result.step_reductions;
        step /= 10.0;
      }
      const double err = relative_error(it->second[idx], numeric);
      ++result.coordinates_checked;
      if (err > result.max_relative_error || result.worst_param.empty()) {
        result.max_relative_error = err;
        result.worst_param = name;
        result.worst_index = idx;
        result.worst_analytic = it->second[idx];
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

GradCheckResult grad_check(const ScalarFunction& f, ParamStore<double>& params,
                           const GradCheckOptions& options) {
  const GradientMap grads = analytic_gradients(f, params);
  return compare_with_finite_differences(f, params, grads, options);
}

}  // namespace bilingunet
