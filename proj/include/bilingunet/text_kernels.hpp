// SPDX-License-Identifier: Apache-2.0
//
// Language-generated convolution kernels. The expression encoding r is cut
// into m equal slices; slice i drives one affine map per branch whose output
// is L2-normalized and reshaped into a convolution filter.

#pragma once

#include <string>
#include <vector>

#include "bilingunet/params.hpp"

namespace bilingunet {

enum class KernelMode { full, depthwise };

struct KernelSpec {
  int spatial = 3;
  int cin = 0;
  int cout = 0;
  KernelMode mode = KernelMode::full;

  void validate() const;
  // Length of the affine output that becomes one kernel.
  std::size_t param_count() const;
};

template <typename T>
struct TextKernels {
  std::vector<Tensor<T>> down;  // contracting branch, [N,cout,cin,s,s] each; empty if unused
  std::vector<Tensor<T>> up;    // expanding branch
  std::vector<Tensor<T>> parts; // the slices t_i, [N,Hd/m] each
};

// Contiguous slices along the last axis. r: [Hd] or [N,Hd].
template <typename T>
std::vector<Tensor<T>> split_text(const Tensor<T>& r, int m);

// kernel = reshape(normalize(affine(dropout(t)))). t: [D] gives a
// [cout,cin,s,s] kernel, t: [N,D] gives one kernel per row, [N,cout,cin,s,s].
// Depthwise kernels are expanded to their block-diagonal full form.
template <typename T>
Tensor<T> make_text_kernel(const Tensor<T>& t, const Tensor<T>& w, const Tensor<T>& b,
                           const KernelSpec& spec, double p_drop, bool training, Rng& rng);

// Creates "text/<branch><level>/{W,b}" for every spec. Either list may be
// empty when that branch is not modulated.
template <typename T>
void init_text_kernel_params(ParamStore<T>& params, std::size_t slice_dim,
                             const std::vector<KernelSpec>& down_specs,
                             const std::vector<KernelSpec>& up_specs, Rng& rng);

// Slice i feeds both the i-th contracting and the i-th expanding affine map.
template <typename T>
TextKernels<T> build_all_kernels(const Tensor<T>& r, const ParamStore<T>& params, int m,
                                 const std::vector<KernelSpec>& down_specs,
                                 const std::vector<KernelSpec>& up_specs, double p_drop,
                                 bool training, Rng& rng);

std::string text_kernel_param_prefix(bool down, int level);

}  // namespace bilingunet
