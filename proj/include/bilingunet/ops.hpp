// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives. All image tensors are NCHW. Every function is
// instantiated for float (training) and double (gradient checks).

#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "bilingunet/tensor.hpp"

namespace bilingunet {

using Rng = std::mt19937_64;

template <typename T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels)
      : running_mean(channels, T{0}), running_var(channels, T{1}) {}
  std::size_t channels() const { return running_mean.size(); }
};

enum class Activation { relu, sigmoid, tanh };

// Cross-correlation, no kernel flip. x: [N,Cin,H,W], k: [Cout,Cin,kh,kw].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& k, int stride, int pad);

// Cross-correlation with one kernel per batch element, stride 1.
// x: [N,Cin,H,W], k: [N,Cout,Cin,kh,kw].
template <typename T>
Tensor<T> conv2d_per_sample(const Tensor<T>& x, const Tensor<T>& k, int pad);

// Adjoint of conv2d with the same geometry. x: [N,Cin,H,W], k: [Cin,Cout,kh,kw].
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& k, int stride, int pad,
                           int out_pad);

// Adds b[c] to every element of channel c. x: [N,C,...].
template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& b);

// Per-channel normalization over (N,H,W). Updates `state` in training mode.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormState<T>& state, bool training);

// y = x W^T + b over the last axis. W: [Dout,Din]; b may be undefined.
template <typename T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

namespace detail {

// Sign pattern of every relu input in evaluation order. Finite-difference
// checks install one to notice steps that straddle a kink.
struct KinkProbe {
  std::vector<bool> reference;
  std::size_t cursor = 0;
  bool recording = true;
  bool crossed = false;
};

// Thread-local; null when no probe is installed.
KinkProbe*& kink_probe();

}  // namespace detail

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T>
Tensor<T> tanh(const Tensor<T>& x);
template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind);

// Concatenates along axis 1 (channels for NCHW, features for [N,D]).
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts);

// Inverted dropout: survivors are scaled by 1/(1-p); identity when !training.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, Rng& rng);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

// Columns [begin, end) of a rank-2 tensor.
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end);

// Same data under a new shape with equal element count.
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

// Gathers rows of `table` ([V,E]) into [ids.size(), E].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<std::int64_t>& ids);

// Each row divided by (its Euclidean norm + eps). x: [N,D].
template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x, T eps = T(1e-8));

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

}  // namespace bilingunet
