// SPDX-License-Identifier: Apache-2.0
//
// The language-conditioned U-Net. A small CNN backbone plus 8 location
// channels produce Down_0; m contracting modules each see their input
// concatenated with a text-kernel-convolved copy of it; m expanding modules
// consume text-modulated skips; a stack of deconvolutions restores the input
// resolution and a sigmoid yields per-pixel probabilities. One auxiliary
// probability head hangs off every expanding module.

#pragma once

#include <string>
#include <vector>

#include "bilingunet/mask.hpp"
#include "bilingunet/text.hpp"
#include "bilingunet/text_kernels.hpp"

namespace bilingunet {

enum class Modulation { bidirectional, expanding_only };

std::string to_string(Modulation m);
Modulation modulation_from_string(const std::string& s);
std::string to_string(KernelMode m);
KernelMode kernel_mode_from_string(const std::string& s);

struct NetConfig {
  int depth = 3;
  int channels = 32;
  int image_height = 64;
  int image_width = 64;
  int backbone_levels = 2;
  int backbone_channels = 24;
  int embed_dim = 32;
  int hidden_size = 96;
  int conv_kernel = 5;
  int conv_stride = 2;
  int conv_padding = 2;
  int text_kernel_spatial = 3;
  KernelMode text_kernel_mode = KernelMode::full;
  Modulation modulation = Modulation::bidirectional;
  double dropout_p = 0.2;

  void validate() const;
  int grid_height() const;  // backbone output extent
  int grid_width() const;
  int feature_channels() const { return backbone_channels + 8; }
  int deconv_out_pad() const;
  // Text-kernel geometry per level (empty `down` when expanding_only).
  std::vector<KernelSpec> down_kernel_specs() const;
  std::vector<KernelSpec> up_kernel_specs() const;

  friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

// One text-kernel convolution applied during a forward pass.
struct ModulationRecord {
  bool contracting = false;
  int level = 0;
  Shape kernel_shape;
};

template <typename T>
struct ForwardOutput {
  Tensor<T> probabilities;       // [N,1,H,W]
  std::vector<Tensor<T>> aux;    // aux[j-1] belongs to Up_j, [N,1,h_j,w_j]
  std::vector<ModulationRecord> modulations;
};

template <typename T>
void init_segnet_params(ParamStore<T>& params, const NetConfig& config, std::size_t vocab_size,
                        Rng& rng);

// [8,gh,gw]: x_min, x_center, x_max, y_min, y_center, y_max in [-1,1], then
// 1/gw and 1/gh.
template <typename T>
Tensor<T> build_location_features(int gh, int gw);

template <typename T>
Tensor<T> backbone_encode(const Tensor<T>& images, ParamStore<T>& params, const NetConfig& config,
                          bool training);

// `kernel` may be undefined, which skips modulation (expanding-only ablation).
template <typename T>
Tensor<T> contract_step(const Tensor<T>& down_prev, const Tensor<T>& kernel, ParamStore<T>& params,
                        int level, const NetConfig& config, bool training);

// `up_prev` is undefined for the deepest level.
template <typename T>
Tensor<T> expand_step(const Tensor<T>& down_j, const Tensor<T>& up_prev, const Tensor<T>& kernel,
                      ParamStore<T>& params, int level, const NetConfig& config, bool training);

template <typename T>
ForwardOutput<T> forward(const Tensor<T>& images, const std::vector<TokenIds>& ids,
                         ParamStore<T>& params, const NetConfig& config, bool training, Rng& rng);

// P >= threshold, one mask per batch element. P: [N,1,H,W].
template <typename T>
std::vector<BinaryMask> predict_mask(const Tensor<T>& probabilities, double threshold = 0.5);

}  // namespace bilingunet
