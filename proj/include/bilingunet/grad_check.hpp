// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "bilingunet/params.hpp"

namespace bilingunet {

using ScalarFunction = std::function<Tensor<double>()>;
using GradientMap = std::map<std::string, std::vector<double>>;

struct GradCheckOptions {
  // Outer offset of the fourth-order central stencil (probes at +-eps and
  // +-eps/2). A step whose probes flip the sign of any relu input straddles a
  // kink; it is shrunk tenfold up to `max_step_reductions` times.
  double eps = 1e-3;
  int max_step_reductions = 4;
  // Coordinates sampled per trainable tensor; tensors at most this large are
  // checked exhaustively.
  std::size_t coords_per_tensor = 8;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates_checked = 0;
  std::size_t step_reductions = 0;
  // Coordinates whose smallest step still crossed a kink.
  std::size_t kinked_coordinates = 0;
};

// |a - n| / max(|a|, |n|, 1e-8)
double relative_error(double analytic, double numeric);

// Runs `f` on a fresh tape and returns d f / d p for every trainable tensor.
GradientMap analytic_gradients(const ScalarFunction& f, ParamStore<double>& params);

// Central differences on sampled coordinates compared against `analytic`.
// `f` must be deterministic (dropout off or with a fixed mask) and evaluate
// its relus in a fixed order.
GradCheckResult compare_with_finite_differences(const ScalarFunction& f, ParamStore<double>& params,
                                                const GradientMap& analytic,
                                                const GradCheckOptions& options = {});

GradCheckResult grad_check(const ScalarFunction& f, ParamStore<double>& params,
                           const GradCheckOptions& options = {});

}  // namespace bilingunet
