// SPDX-License-Identifier: Apache-2.0

#include "bilingunet/segnet.hpp"

#include <cmath>

namespace bilingunet {

std::string to_string(Modulation m) {
  return m == Modulation::bidirectional ? "bidirectional" : "expanding_only";
}

Modulation modulation_from_string(const std::string& s) {
  if (s == "bidirectional") return Modulation::bidirectional;
  if (s == "expanding_only") return Modulation::expanding_only;
  throw ConfigError("unknown modulation \"" + s + "\" (expected bidirectional|expanding_only)");
}

std::string to_string(KernelMode m) { return m == KernelMode::full ? "full" : "depthwise"; }

KernelMode kernel_mode_from_string(const std::string& s) {
  if (s == "full") return KernelMode::full;
  if (s == "depthwise") return KernelMode::depthwise;
  throw ConfigError("unknown text kernel mode \"" + s + "\" (expected full|depthwise)");
}

namespace {

int conv_out(int extent, const NetConfig& c) {
  return (extent + 2 * c.conv_padding - c.conv_kernel) / c.conv_stride + 1;
}

std::string level_name(const char* branch, int level) {
  return std::string(branch) + std::to_string(level);
}

}  // namespace

int NetConfig::deconv_out_pad() const {
  // (H-1)s - 2p + k + out_pad == H*s
  return conv_stride + 2 * conv_padding - conv_kernel;
}

int NetConfig::grid_height() const { return image_height >> backbone_levels; }
int NetConfig::grid_width() const { return image_width >> backbone_levels; }

void NetConfig::validate() const {
  if (depth < 1) throw ConfigError("depth must be >= 1");
  if (channels < 1 || backbone_channels < 1) throw ConfigError("channel counts must be positive");
  if (backbone_levels < 1) throw ConfigError("backbone_levels must be >= 1");
  if (embed_dim < 1 || hidden_size < 1) throw ConfigError("embedding and hidden sizes must be positive");
  if (hidden_size % depth != 0) {
    throw ConfigError("hidden_size " + std::to_string(hidden_size) + " is not divisible by depth " +
                      std::to_string(depth));
  }
  if (conv_stride != 2) throw ConfigError("conv_stride must be 2 (each module halves or doubles)");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("dropout_p must lie in [0, 1)");
  const int levels = depth + backbone_levels;
  if (levels >= 30) throw ConfigError("depth + backbone_levels too large");
  const int factor = 1 << levels;
  if (image_height < factor || image_width < factor || image_height % factor != 0 ||
      image_width % factor != 0) {
    throw ConfigError("image size " + std::to_string(image_height) + "x" +
                      std::to_string(image_width) + " must be divisible by 2^(depth + backbone_levels) = " +
                      std::to_string(factor));
  }
  const int op = deconv_out_pad();
  if (op < 0 || op >= conv_stride) {
    throw ConfigError("conv_kernel/conv_padding cannot double extents with a transposed convolution");
  }
  for (int extent = image_height; extent > 1; extent /= 2) {
    if (conv_out(extent, *this) != extent / 2) {
      throw ConfigError("conv_kernel/conv_padding do not halve extent " + std::to_string(extent));
    }
  }
  KernelSpec probe{text_kernel_spatial, 1, 1, text_kernel_mode};
  probe.validate();
  for (const auto& spec : down_kernel_specs()) spec.validate();
  for (const auto& spec : up_kernel_specs()) spec.validate();
}

std::vector<KernelSpec> NetConfig::down_kernel_specs() const {
  std::vector<KernelSpec> specs;
  if (modulation != Modulation::bidirectional) return specs;
  for (int i = 1; i <= depth; ++i) {
    const int c = i == 1 ? feature_channels() : channels;
    specs.push_back({text_kernel_spatial, c, c, text_kernel_mode});
  }
  return specs;
}

std::vector<KernelSpec> NetConfig::up_kernel_specs() const {
  return std::vector<KernelSpec>(static_cast<std::size_t>(depth),
                                 KernelSpec{text_kernel_spatial, channels, channels, text_kernel_mode});
}

template <typename T>
void init_segnet_params(ParamStore<T>& params, const NetConfig& config, std::size_t vocab_size,
                        Rng& rng) {
  config.validate();
  const std::size_t k = static_cast<std::size_t>(config.conv_kernel);
  auto uniform = [&](Shape shape, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(dist(rng));
    return t;
  };
  auto add_bn = [&](const std::string& prefix, std::size_t c) {
    params.add(prefix + "/gamma", Tensor<T>(Shape{c}, T{1}));
    params.add(prefix + "/beta", Tensor<T>(Shape{c}, T{0}));
    params.add_batchnorm(prefix, c);
  };

  std::size_t in_c = 3;
  for (int b = 1; b <= config.backbone_levels; ++b) {
    const std::size_t out_c = static_cast<std::size_t>(config.backbone_channels);
    params.add(level_name("backbone/conv", b) + "/w", uniform({out_c, in_c, k, k}, in_c * k * k));
    add_bn(level_name("backbone/bn", b), out_c);
    in_c = out_c;
  }

  init_lstm_params(params,
                   LstmShape{vocab_size, static_cast<std::size_t>(config.embed_dim),
                             static_cast<std::size_t>(config.hidden_size)},
                   rng);
  init_text_kernel_params(params,
                          static_cast<std::size_t>(config.hidden_size / config.depth),
                          config.down_kernel_specs(), config.up_kernel_specs(), rng);

  const std::size_t ch = static_cast<std::size_t>(config.channels);
  const bool bidir = config.modulation == Modulation::bidirectional;
  std::size_t prev_c = static_cast<std::size_t>(config.feature_channels());
  for (int i = 1; i <= config.depth; ++i) {
    const std::size_t f_in = bidir ? 2 * prev_c : prev_c;
    params.add(level_name("down", i) + "/conv/w", uniform({ch, f_in, k, k}, f_in * k * k));
    add_bn(level_name("down", i) + "/bn", ch);
    prev_c = ch;
  }
  for (int j = config.depth; j >= 1; --j) {
    const std::size_t h_in = j == config.depth ? ch : 2 * ch;
    params.add(level_name("up", j) + "/deconv/w", uniform({h_in, ch, k, k}, h_in * k * k));
    add_bn(level_name("up", j) + "/bn", ch);
    params.add(level_name("aux", j) + "/deconv/w", uniform({ch, 1, k, k}, ch * k * k));
    params.add(level_name("aux", j) + "/bias", Tensor<T>(Shape{1}));
  }
  for (int d = 1; d <= config.backbone_levels; ++d) {
    const bool last = d == config.backbone_levels;
    params.add(level_name("dstack", d) + "/deconv/w", uniform({ch, last ? 1 : ch, k, k}, ch * k * k));
    if (last) {
      params.add(level_name("dstack", d) + "/bias", Tensor<T>(Shape{1}));
    } else {
      add_bn(level_name("dstack", d) + "/bn", ch);
    }
  }
}

template <typename T>
Tensor<T> build_location_features(int gh, int gw) {
  if (gh < 1 || gw < 1) throw ConfigError("location grid must be at least 1x1");
  const std::size_t h = static_cast<std::size_t>(gh), w = static_cast<std::size_t>(gw);
  Tensor<T> loc(Shape{8, h, w});
  auto at = [&](std::size_t c, std::size_t y, std::size_t x) -> T& { return loc[(c * h + y) * w + x]; };
  for (std::size_t y = 0; y < h; ++y) {
    const double y_min = 2.0 * static_cast<double>(y) / gh - 1.0;
    const double y_max = 2.0 * static_cast<double>(y + 1) / gh - 1.0;
    for (std::size_t x = 0; x < w; ++x) {
      const double x_min = 2.0 * static_cast<double>(x) / gw - 1.0;
      const double x_max = 2.0 * static_cast<double>(x + 1) / gw - 1.0;
      at(0, y, x) = static_cast<T>(x_min);
      at(1, y, x) = static_cast<T>(0.5 * (x_min + x_max));
      at(2, y, x) = static_cast<T>(x_max);
      at(3, y, x) = static_cast<T>(y_min);
      at(4, y, x) = static_cast<T>(0.5 * (y_min + y_max));
      at(5, y, x) = static_cast<T>(y_max);
      at(6, y, x) = static_cast<T>(1.0 / gw);
      at(7, y, x) = static_cast<T>(1.0 / gh);
    }
  }
  return loc;
}

namespace {

template <typename T>
Tensor<T> bn_relu(const Tensor<T>& x, ParamStore<T>& params, const std::string& prefix,
                  bool training) {
  return relu(batchnorm2d(x, params.get(prefix + "/gamma"), params.get(prefix + "/beta"),
                          params.batchnorm(prefix), training));
}

template <typename T>
Tensor<T> modulate(const Tensor<T>& features, const Tensor<T>& kernel) {
  return conv2d_per_sample(features, kernel, static_cast<int>(kernel.dim(3)) / 2);
}

}  // namespace

template <typename T>
Tensor<T> backbone_encode(const Tensor<T>& images, ParamStore<T>& params, const NetConfig& config,
                          bool training) {
  if (images.rank() != 4 || images.dim(1) != 3) {
    throw DimensionError("backbone expects [N,3,H,W] images, got " + shape_to_string(images.shape()));
  }
  const int factor = 1 << config.backbone_levels;
  if (images.dim(2) % factor != 0 || images.dim(3) % factor != 0) {
    throw ConfigError("image extents must be divisible by the backbone downscale factor " +
                      std::to_string(factor));
  }
  Tensor<T> x = images;
  for (int b = 1; b <= config.backbone_levels; ++b) {
    x = conv2d(x, params.get(level_name("backbone/conv", b) + "/w"), config.conv_stride,
               config.conv_padding);
    x = bn_relu(x, params, level_name("backbone/bn", b), training);
  }
  const std::size_t n = x.dim(0), gh = x.dim(2), gw = x.dim(3);
  const Tensor<T> loc = build_location_features<T>(static_cast<int>(gh), static_cast<int>(gw));
  Tensor<T> loc_batch(Shape{n, 8, gh, gw});
  for (std::size_t i = 0; i < n; ++i) std::copy_n(loc.ptr(), loc.numel(), loc_batch.ptr() + i * loc.numel());
  return concat_channels<T>({x, loc_batch});
}

template <typename T>
Tensor<T> contract_step(const Tensor<T>& down_prev, const Tensor<T>& kernel, ParamStore<T>& params,
                        int level, const NetConfig& config, bool training) {
  Tensor<T> input = down_prev;
  if (kernel.defined()) input = concat_channels<T>({down_prev, modulate(down_prev, kernel)});
  const std::string prefix = level_name("down", level);
  Tensor<T> y =
      conv2d(input, params.get(prefix + "/conv/w"), config.conv_stride, config.conv_padding);
  return bn_relu(y, params, prefix + "/bn", training);
}

template <typename T>
Tensor<T> expand_step(const Tensor<T>& down_j, const Tensor<T>& up_prev, const Tensor<T>& kernel,
                      ParamStore<T>& params, int level, const NetConfig& config, bool training) {
  Tensor<T> input = modulate(down_j, kernel);
  if (up_prev.defined()) input = concat_channels<T>({input, up_prev});
  const std::string prefix = level_name("up", level);
  Tensor<T> y = conv_transpose2d(input, params.get(prefix + "/deconv/w"), config.conv_stride,
                                 config.conv_padding, config.deconv_out_pad());
  return bn_relu(y, params, prefix + "/bn", training);
}

template <typename T>
ForwardOutput<T> forward(const Tensor<T>& images, const std::vector<TokenIds>& ids,
                         ParamStore<T>& params, const NetConfig& config, bool training, Rng& rng) {
  if (images.rank() != 4 || images.dim(0) != ids.size()) {
    throw DimensionError("forward: " + std::to_string(ids.size()) + " expressions for images " +
                         shape_to_string(images.shape()));
  }
  if (static_cast<int>(images.dim(2)) != config.image_height ||
      static_cast<int>(images.dim(3)) != config.image_width) {
    throw ConfigError("forward: image size " + shape_to_string(images.shape()) +
                      " does not match the configured " + std::to_string(config.image_height) + "x" +
                      std::to_string(config.image_width));
  }
  ForwardOutput<T> out;
  const int m = config.depth;
  const Tensor<T> r = lstm_encode_batch(ids, params);
  const TextKernels<T> kernels =
      build_all_kernels(r, params, m, config.down_kernel_specs(), config.up_kernel_specs(),
                        config.dropout_p, training, rng);

  std::vector<Tensor<T>> downs{backbone_encode(images, params, config, training)};
  for (int i = 1; i <= m; ++i) {
    Tensor<T> kernel;
    if (!kernels.down.empty()) {
      kernel = kernels.down[static_cast<std::size_t>(i - 1)];
      out.modulations.push_back({true, i, Shape(kernel.shape().begin() + 1, kernel.shape().end())});
    }
    try {
      downs.push_back(contract_step(downs.back(), kernel, params, i, config, training));
    } catch (const Error& e) {
      throw Error(e.kind(), "contracting level " + std::to_string(i) + ": " + e.what());
    }
  }

  out.aux.resize(static_cast<std::size_t>(m));
  Tensor<T> up;
  for (int j = m; j >= 1; --j) {
    const Tensor<T>& kernel = kernels.up[static_cast<std::size_t>(j - 1)];
    out.modulations.push_back({false, j, Shape(kernel.shape().begin() + 1, kernel.shape().end())});
    try {
      up = expand_step(downs[static_cast<std::size_t>(j)], up, kernel, params, j, config, training);
    } catch (const Error& e) {
      throw Error(e.kind(), "expanding level " + std::to_string(j) + ": " + e.what());
    }
    const std::string aux = level_name("aux", j);
    Tensor<T> logits = conv_transpose2d(up, params.get(aux + "/deconv/w"), config.conv_stride,
                                        config.conv_padding, config.deconv_out_pad());
    out.aux[static_cast<std::size_t>(j - 1)] = sigmoid(add_channel_bias(logits, params.get(aux + "/bias")));
  }

  Tensor<T> x = up;
  for (int d = 1; d <= config.backbone_levels; ++d) {
    const std::string prefix = level_name("dstack", d);
    x = conv_transpose2d(x, params.get(prefix + "/deconv/w"), config.conv_stride,
                         config.conv_padding, config.deconv_out_pad());
    if (d < config.backbone_levels) {
      x = bn_relu(x, params, prefix + "/bn", training);
    } else {
      x = add_channel_bias(x, params.get(prefix + "/bias"));
    }
  }
  out.probabilities = sigmoid(x);
  return out;
}

template <typename T>
std::vector<BinaryMask> predict_mask(const Tensor<T>& probabilities, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ParameterError("threshold must lie in (0, 1)");
  if (probabilities.rank() != 4 || probabilities.dim(1) != 1) {
    throw DimensionError("predict_mask expects [N,1,H,W], got " +
                         shape_to_string(probabilities.shape()));
  }
  const std::size_t n = probabilities.dim(0), h = probabilities.dim(2), w = probabilities.dim(3);
  std::vector<BinaryMask> masks;
  for (std::size_t i = 0; i < n; ++i) {
    BinaryMask mask(h, w);
    for (std::size_t p = 0; p < h * w; ++p)
      mask.bits[p] = static_cast<double>(probabilities[i * h * w + p]) >= threshold ? 1 : 0;
    masks.push_back(std::move(mask));
  }
  return masks;
}

#define BILINGUNET_INSTANTIATE_SEGNET(T)                                                           \
  template void init_segnet_params(ParamStore<T>&, const NetConfig&, std::size_t, Rng&);           \
  template Tensor<T> build_location_features<T>(int, int);                                         \
  template Tensor<T> backbone_encode(const Tensor<T>&, ParamStore<T>&, const NetConfig&, bool);    \
  template Tensor<T> contract_step(const Tensor<T>&, const Tensor<T>&, ParamStore<T>&, int,        \
                                   const NetConfig&, bool);                                        \
  template Tensor<T> expand_step(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,             \
                                 ParamStore<T>&, int, const NetConfig&, bool);                     \
  template ForwardOutput<T> forward(const Tensor<T>&, const std::vector<TokenIds>&,                \
                                    ParamStore<T>&, const NetConfig&, bool, Rng&);                 \
  template std::vector<BinaryMask> predict_mask(const Tensor<T>&, double);

BILINGUNET_INSTANTIATE_SEGNET(float)
BILINGUNET_INSTANTIATE_SEGNET(double)

}  // namespace bilingunet
