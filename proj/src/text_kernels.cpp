// SPDX-License-Identifier: Apache-2.0

#include "bilingunet/text_kernels.hpp"

#include <cmath>

namespace bilingunet {

void KernelSpec::validate() const {
  if (spatial != 1 && spatial != 3) {
    throw ConfigError("text kernel spatial size must be 1 or 3, got " + std::to_string(spatial));
  }
  if (cin <= 0 || cout <= 0) throw ConfigError("text kernel channels must be positive");
  if (mode == KernelMode::depthwise && cin != cout) {
    throw ConfigError("depthwise text kernels need cin == cout (" + std::to_string(cin) + " vs " +
                      std::to_string(cout) + ")");
  }
}

std::size_t KernelSpec::param_count() const {
  const std::size_t area = static_cast<std::size_t>(spatial) * spatial;
  if (mode == KernelMode::depthwise) return static_cast<std::size_t>(cin) * area;
  return static_cast<std::size_t>(cout) * cin * area;
}

std::string text_kernel_param_prefix(bool down, int level) {
  return std::string("text/") + (down ? "down" : "up") + std::to_string(level);
}

template <typename T>
std::vector<Tensor<T>> split_text(const Tensor<T>& r, int m) {
  if (m < 1) throw ConfigError("split_text: m must be >= 1");
  const bool single = r.rank() == 1;
  if (!single && r.rank() != 2) throw DimensionError("split_text expects [Hd] or [N,Hd]");
  const std::size_t hd = r.shape().back();
  if (hd % static_cast<std::size_t>(m) != 0) {
    throw ConfigError("hidden size " + std::to_string(hd) + " is not divisible by depth " +
                      std::to_string(m));
  }
  const std::size_t part = hd / static_cast<std::size_t>(m);
  Tensor<T> rows = single ? reshape(r, Shape{1, hd}) : r;
  std::vector<Tensor<T>> parts;
  for (int i = 0; i < m; ++i) {
    Tensor<T> slice = slice_cols(rows, i * part, (i + 1) * part);
    parts.push_back(single ? reshape(slice, Shape{part}) : slice);
  }
  return parts;
}

namespace {

// [N, C*s*s] depthwise weights -> [N, C*C*s*s] block-diagonal full kernels.
template <typename T>
Tensor<T> depthwise_to_full(const Tensor<T>& dw, std::size_t channels, std::size_t area) {
  const std::size_t n = dw.dim(0);
  const std::size_t full = channels * channels * area;
  Tensor<T> out(Shape{n, full});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t a = 0; a < area; ++a)
        out[i * full + (c * channels + c) * area + a] = dw[i * channels * area + c * area + a];
  if (auto* tape = detail::recording({&dw})) {
    out.set_requires_grad(true);
    tape->push([dw, out, n, channels, area, full]() mutable {
      if (!out.has_grad()) return;
      auto g = dw.grad_buffer();
      auto go = out.grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < channels; ++c)
          for (std::size_t a = 0; a < area; ++a)
            g[i * channels * area + c * area + a] += go[i * full + (c * channels + c) * area + a];
    });
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> make_text_kernel(const Tensor<T>& t, const Tensor<T>& w, const Tensor<T>& b,
                           const KernelSpec& spec, double p_drop, bool training, Rng& rng) {
  spec.validate();
  if (w.rank() != 2 || w.dim(0) != spec.param_count()) {
    throw DimensionError("text kernel affine produces " + std::to_string(w.rank() == 2 ? w.dim(0) : 0) +
                         " values, kernel needs " + std::to_string(spec.param_count()));
  }
  const bool single = t.rank() == 1;
  Tensor<T> rows = single ? reshape(t, Shape{1, t.dim(0)}) : t;
  const std::size_t n = rows.dim(0);
  Tensor<T> flat = l2_normalize_rows(affine(dropout(rows, p_drop, training, rng), w, b));
  const std::size_t area = static_cast<std::size_t>(spec.spatial) * spec.spatial;
  if (spec.mode == KernelMode::depthwise) {
    flat = depthwise_to_full(flat, static_cast<std::size_t>(spec.cin), area);
  }
  const std::size_t s = static_cast<std::size_t>(spec.spatial);
  const std::size_t co = static_cast<std::size_t>(spec.cout);
  const std::size_t ci = static_cast<std::size_t>(spec.cin);
  if (single) return reshape(flat, Shape{co, ci, s, s});
  return reshape(flat, Shape{n, co, ci, s, s});
}

template <typename T>
void init_text_kernel_params(ParamStore<T>& params, std::size_t slice_dim,
                             const std::vector<KernelSpec>& down_specs,
                             const std::vector<KernelSpec>& up_specs, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(slice_dim));
  std::uniform_real_distribution<double> dist(-bound, bound);
  auto add_affine = [&](bool down, int level, const KernelSpec& spec) {
    spec.validate();
    const std::string prefix = text_kernel_param_prefix(down, level);
    Tensor<T> w(Shape{spec.param_count(), slice_dim});
    for (auto& v : w.data()) v = static_cast<T>(dist(rng));
    Tensor<T> b(Shape{spec.param_count()});
    for (auto& v : b.data()) v = static_cast<T>(dist(rng));
    params.add(prefix + "/W", std::move(w));
    params.add(prefix + "/b", std::move(b));
  };
  for (std::size_t i = 0; i < down_specs.size(); ++i)
    add_affine(true, static_cast<int>(i) + 1, down_specs[i]);
  for (std::size_t j = 0; j < up_specs.size(); ++j)
    add_affine(false, static_cast<int>(j) + 1, up_specs[j]);
}

template <typename T>
TextKernels<T> build_all_kernels(const Tensor<T>& r, const ParamStore<T>& params, int m,
                                 const std::vector<KernelSpec>& down_specs,
                                 const std::vector<KernelSpec>& up_specs, double p_drop,
                                 bool training, Rng& rng) {
  if ((!down_specs.empty() && down_specs.size() != static_cast<std::size_t>(m)) ||
      up_specs.size() != static_cast<std::size_t>(m)) {
    throw ConfigError("build_all_kernels: need one kernel spec per level");
  }
  TextKernels<T> kernels;
  kernels.parts = split_text(r, m);
  for (int i = 0; i < m; ++i) {
    const Tensor<T>& part = kernels.parts[static_cast<std::size_t>(i)];
    if (!down_specs.empty()) {
      const std::string prefix = text_kernel_param_prefix(true, i + 1);
      kernels.down.push_back(make_text_kernel(part, params.get(prefix + "/W"),
                                              params.get(prefix + "/b"),
                                              down_specs[static_cast<std::size_t>(i)], p_drop,
                                              training, rng));
    }
    const std::string prefix = text_kernel_param_prefix(false, i + 1);
    kernels.up.push_back(make_text_kernel(part, params.get(prefix + "/W"), params.get(prefix + "/b"),
                                          up_specs[static_cast<std::size_t>(i)], p_drop, training,
                                          rng));
  }
  return kernels;
}

#define BILINGUNET_INSTANTIATE_TEXT_KERNELS(T)                                                  \
  template std::vector<Tensor<T>> split_text(const Tensor<T>&, int);                            \
  template Tensor<T> make_text_kernel(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                      const KernelSpec&, double, bool, Rng&);                   \
  template void init_text_kernel_params(ParamStore<T>&, std::size_t,                            \
                                        const std::vector<KernelSpec>&,                         \
                                        const std::vector<KernelSpec>&, Rng&);                  \
  template TextKernels<T> build_all_kernels(const Tensor<T>&, const ParamStore<T>&, int,        \
                                            const std::vector<KernelSpec>&,                     \
                                            const std::vector<KernelSpec>&, double, bool, Rng&);

BILINGUNET_INSTANTIATE_TEXT_KERNELS(float)
BILINGUNET_INSTANTIATE_TEXT_KERNELS(double)

}  // namespace bilingunet
