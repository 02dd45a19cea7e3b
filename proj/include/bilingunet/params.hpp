// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include "bilingunet/ops.hpp"

namespace bilingunet {

// Named parameter registry. Iteration follows insertion order so that
// serialization and gradient checks are deterministic.
template <typename T>
class ParamStore {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> tensor, bool trainable = true) {
    if (tensors_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    tensor.set_requires_grad(trainable);
    order_.push_back(name);
    return tensors_.emplace(name, std::move(tensor)).first->second;
  }

  BatchNormState<T>& add_batchnorm(const std::string& name, std::size_t channels) {
    if (batchnorms_.count(name)) throw ConfigError("duplicate batchnorm name: " + name);
    bn_order_.push_back(name);
    return batchnorms_.emplace(name, BatchNormState<T>(channels)).first->second;
  }

  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  Tensor<T>& get(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }
  const Tensor<T>& get(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }

  BatchNormState<T>& batchnorm(const std::string& name) {
    auto it = batchnorms_.find(name);
    if (it == batchnorms_.end()) throw ConfigError("unknown batchnorm: " + name);
    return it->second;
  }
  const BatchNormState<T>& batchnorm(const std::string& name) const {
    auto it = batchnorms_.find(name);
    if (it == batchnorms_.end()) throw ConfigError("unknown batchnorm: " + name);
    return it->second;
  }

  const std::vector<std::string>& names() const { return order_; }
  const std::vector<std::string>& batchnorm_names() const { return bn_order_; }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const auto& [name, t] : tensors_) total += t.numel();
    return total;
  }

  void zero_grad() {
    for (auto& [name, t] : tensors_) t.zero_grad();
  }

  void set_trainable_prefix(const std::string& prefix, bool trainable) {
    for (auto& [name, t] : tensors_)
      if (name.rfind(prefix, 0) == 0) t.set_requires_grad(trainable);
  }

  // Value copy in another precision; trainable flags carry over.
  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& name : order_) {
      const Tensor<T>& src = tensors_.at(name);
      std::vector<U> values(src.data().begin(), src.data().end());
      out.add(name, Tensor<U>(src.shape(), std::move(values)), src.requires_grad());
    }
    for (const auto& name : bn_order_) {
      const BatchNormState<T>& src = batchnorms_.at(name);
      BatchNormState<U>& dst = out.add_batchnorm(name, src.channels());
      dst.running_mean.assign(src.running_mean.begin(), src.running_mean.end());
      dst.running_var.assign(src.running_var.begin(), src.running_var.end());
      dst.momentum = static_cast<U>(src.momentum);
      dst.eps = static_cast<U>(src.eps);
    }
    return out;
  }

  // Deep copy: fresh storage for every tensor.
  ParamStore clone() const { return cast<T>(); }

 private:
  std::map<std::string, Tensor<T>> tensors_;
  std::map<std::string, BatchNormState<T>> batchnorms_;
  std::vector<std::string> order_;
  std::vector<std::string> bn_order_;
};

}  // namespace bilingunet
