// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "bilingunet/segnet.hpp"

namespace bilingunet {

inline constexpr double kBceClamp = 1e-7;

// Mean over non-ignored pixels of -[g log p + (1-g) log(1-p)], with p
// clamped to [1e-7, 1-1e-7]. `ignore` (same shape, nonzero = ignored) may be
// undefined. The derivative is the unclamped formula evaluated at the
// clamped probability.
template <typename T>
Tensor<T> bce_loss(const Tensor<T>& probabilities, const Tensor<T>& target,
                   const Tensor<T>& ignore = Tensor<T>{});

// Area-average pooling over the last two axes down to (h, w).
template <typename T>
Tensor<T> downscale_mask(const Tensor<T>& mask, std::size_t h, std::size_t w);

enum class AuxWeighting { pixel_ratio, linear_ratio };

struct LossOptions {
  bool multiscale = true;
  AuxWeighting weighting = AuxWeighting::pixel_ratio;
  bool soft_targets = true;  // false: downscaled targets thresholded at 0.5
};

struct AuxTerm {
  std::size_t height = 0;
  std::size_t width = 0;
  double weight = 0.0;
  double value = 0.0;
};

template <typename T>
struct LossReport {
  Tensor<T> total;  // differentiable
  double final_term = 0.0;
  std::vector<AuxTerm> aux_terms;
};

// total = bce(P, GM) + sum_j w_j * bce(aux_j, downscale(GM)), w_j the
// resolution ratio of aux_j. GM and ignore: [N,1,H,W].
template <typename T>
LossReport<T> multiscale_loss(const ForwardOutput<T>& out, const Tensor<T>& target,
                              const Tensor<T>& ignore, const LossOptions& options = {});

}  // namespace bilingunet
