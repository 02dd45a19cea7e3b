// SPDX-License-Identifier: Apache-2.0

#include "bilingunet/objective.hpp"

#include <algorithm>
#include <cmath>

namespace bilingunet {

template <typename T>
Tensor<T> bce_loss(const Tensor<T>& probabilities, const Tensor<T>& target, const Tensor<T>& ignore) {
  if (probabilities.shape() != target.shape()) {
    throw DimensionError("bce_loss: prediction " + shape_to_string(probabilities.shape()) +
                         " vs target " + shape_to_string(target.shape()));
  }
  if (ignore.defined() && ignore.shape() != target.shape()) {
    throw DimensionError("bce_loss: ignore mask " + shape_to_string(ignore.shape()) +
                         " vs target " + shape_to_string(target.shape()));
  }
  const std::size_t n = probabilities.numel();
  std::size_t counted = 0;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (ignore.defined() && ignore[i] != T{0}) continue;
    const double p = std::clamp(static_cast<double>(probabilities[i]), kBceClamp, 1.0 - kBceClamp);
    const double g = target[i];
    total -= g * std::log(p) + (1.0 - g) * std::log(1.0 - p);
    ++counted;
  }
  if (counted == 0) throw ContractError("bce_loss: every pixel is ignored");
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(counted)));
  if (auto* tape = detail::recording({&probabilities})) {
    out.set_requires_grad(true);
    tape->push([probabilities, target, ignore, out, counted]() mutable {
      if (!out.has_grad()) return;
      const double scale = static_cast<double>(out.grad()[0]) / static_cast<double>(counted);
      auto gp = probabilities.grad_buffer();
      for (std::size_t i = 0; i < gp.size(); ++i) {
        if (ignore.defined() && ignore[i] != T{0}) continue;
        const double p = std::clamp(static_cast<double>(probabilities[i]), kBceClamp, 1.0 - kBceClamp);
        const double g = target[i];
        gp[i] += static_cast<T>(scale * ((1.0 - g) / (1.0 - p) - g / p));
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> downscale_mask(const Tensor<T>& mask, std::size_t h, std::size_t w) {
  if (mask.rank() < 2) throw DimensionError("downscale_mask expects at least 2 axes");
  const std::size_t in_h = mask.dim(mask.rank() - 2), in_w = mask.dim(mask.rank() - 1);
  if (h == 0 || w == 0 || in_h % h != 0 || in_w % w != 0) {
    throw ConfigError("downscale_mask: " + std::to_string(in_h) + "x" + std::to_string(in_w) +
                      " is not an integer multiple of " + std::to_string(h) + "x" + std::to_string(w));
  }
  const std::size_t fy = in_h / h, fx = in_w / w;
  const std::size_t planes = mask.numel() / (in_h * in_w);
  Shape out_shape = mask.shape();
  out_shape[out_shape.size() - 2] = h;
  out_shape[out_shape.size() - 1] = w;
  Tensor<T> out(out_shape);
  const double inv_area = 1.0 / static_cast<double>(fy * fx);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = mask.ptr() + p * in_h * in_w;
    T* dst = out.ptr() + p * h * w;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double s = 0.0;
        for (std::size_t dy = 0; dy < fy; ++dy)
          for (std::size_t dx = 0; dx < fx; ++dx) s += src[(y * fy + dy) * in_w + x * fx + dx];
        dst[y * w + x] = static_cast<T>(s * inv_area);
      }
  }
  return out;
}

template <typename T>
LossReport<T> multiscale_loss(const ForwardOutput<T>& out, const Tensor<T>& target,
                              const Tensor<T>& ignore, const LossOptions& options) {
  LossReport<T> report;
  report.total = bce_loss(out.probabilities, target, ignore);
  report.final_term = static_cast<double>(report.total.item());
  if (!options.multiscale) return report;

  const std::size_t big_h = target.dim(target.rank() - 2), big_w = target.dim(target.rank() - 1);
  for (const Tensor<T>& aux : out.aux) {
    const std::size_t h = aux.dim(aux.rank() - 2), w = aux.dim(aux.rank() - 1);
    Tensor<T> small_target = downscale_mask(target, h, w);
    if (!options.soft_targets) {
      for (auto& v : small_target.data()) v = v >= T(0.5) ? T{1} : T{0};
    }
    Tensor<T> small_ignore;
    if (ignore.defined()) {
      small_ignore = downscale_mask(ignore, h, w);
      for (auto& v : small_ignore.data()) v = v >= T(0.5) ? T{1} : T{0};
    }
    const double ratio_h = static_cast<double>(h) / static_cast<double>(big_h);
    const double ratio_w = static_cast<double>(w) / static_cast<double>(big_w);
    const double weight =
        options.weighting == AuxWeighting::pixel_ratio ? ratio_h * ratio_w : std::sqrt(ratio_h * ratio_w);
    Tensor<T> term = bce_loss(aux, small_target, small_ignore);
    report.aux_terms.push_back({h, w, weight, static_cast<double>(term.item())});
    report.total = add(report.total, scale(term, static_cast<T>(weight)));
  }
  return report;
}

#define BILINGUNET_INSTANTIATE_OBJECTIVE(T)                                              \
  template Tensor<T> bce_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);     \
  template Tensor<T> downscale_mask(const Tensor<T>&, std::size_t, std::size_t);         \
  template LossReport<T> multiscale_loss(const ForwardOutput<T>&, const Tensor<T>&,      \
                                         const Tensor<T>&, const LossOptions&);

BILINGUNET_INSTANTIATE_OBJECTIVE(float)
BILINGUNET_INSTANTIATE_OBJECTIVE(double)

}  // namespace bilingunet
