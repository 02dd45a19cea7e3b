// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <set>

#include "bilingunet/grad_check.hpp"
#include "bilingunet/text.hpp"
#include "bilingunet/text_kernels.hpp"
#include "oracles.hpp"

using namespace bilingunet;
using T = Tensor<double>;

namespace {

double l2(const T& t) {
  double s = 0.0;
  for (double v : t.data()) s += v * v;
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("split_text cuts contiguous equal slices") {
  T r(Shape{256});
  for (std::size_t i = 0; i < 256; ++i) r[i] = static_cast<double>(i);
  auto parts = split_text(r, 4);
  REQUIRE(parts.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(parts[i].shape() == Shape{64});
    CHECK(parts[i][0] == static_cast<double>(64 * i));
  }
  auto whole = split_text(r, 1);
  REQUIRE(whole.size() == 1);
  CHECK(whole[0][255] == 255.0);
  CHECK_THROWS_AS(split_text(T(Shape{10}), 3), ConfigError);
}

TEST_CASE("kernel spec validation and parameter counts") {
  CHECK_THROWS_AS((KernelSpec{2, 4, 4, KernelMode::full}.validate()), ConfigError);
  CHECK_THROWS_AS((KernelSpec{3, 4, 5, KernelMode::depthwise}.validate()), ConfigError);
  CHECK(KernelSpec{3, 8, 8, KernelMode::full}.param_count() == 8 * 8 * 9);
  CHECK(KernelSpec{3, 8, 8, KernelMode::depthwise}.param_count() == 8 * 9);
  CHECK(KernelSpec{1, 6, 4, KernelMode::full}.param_count() == 24);
}

TEST_CASE("make_text_kernel shape, unit norm and inference determinism") {
  std::mt19937_64 g(1);
  const KernelSpec spec{3, 8, 8, KernelMode::full};
  T t = oracle::random_tensor({12}, g);
  T w = oracle::random_tensor({spec.param_count(), 12}, g, -0.3, 0.3);
  T b = oracle::random_tensor({spec.param_count()}, g, -0.1, 0.1);
  Rng rng(2);
  T k = make_text_kernel(t, w, b, spec, 0.2, false, rng);
  CHECK(k.shape() == Shape{8, 8, 3, 3});
  CHECK(std::abs(l2(k) - 1.0) < 1e-6);
  T k2 = make_text_kernel(t, w, b, spec, 0.2, false, rng);
  for (std::size_t i = 0; i < k.numel(); ++i) CHECK(k[i] == k2[i]);

  // Dropout in training changes the kernel but it stays unit-norm.
  T k3 = make_text_kernel(t, w, b, spec, 0.5, true, rng);
  CHECK(std::abs(l2(k3) - 1.0) < 1e-6);

  // Zero affine output: no division by zero.
  T kz = make_text_kernel(t, T(w.shape(), 0.0), T(b.shape(), 0.0), spec, 0.0, false, rng);
  for (double v : kz.data()) CHECK(v == 0.0);
}

TEST_CASE("normalized kernel is invariant to scaling the affine output") {
  std::mt19937_64 g(3);
  const KernelSpec spec{3, 4, 4, KernelMode::full};
  T t = oracle::random_tensor({6}, g);
  T w = oracle::random_tensor({spec.param_count(), 6}, g);
  T b = oracle::random_tensor({spec.param_count()}, g);
  Rng rng(0);
  T k = make_text_kernel(t, w, b, spec, 0.0, false, rng);
  T k5 = make_text_kernel(t, scale(w, 5.0), scale(b, 5.0), spec, 0.0, false, rng);
  for (std::size_t i = 0; i < k.numel(); ++i) CHECK(k[i] == doctest::Approx(k5[i]).epsilon(1e-6));
}

TEST_CASE("depthwise kernels expand to block-diagonal full kernels") {
  std::mt19937_64 g(4);
  const KernelSpec spec{3, 3, 3, KernelMode::depthwise};
  T t = oracle::random_tensor({5}, g);
  T w = oracle::random_tensor({spec.param_count(), 5}, g);
  T b = oracle::random_tensor({spec.param_count()}, g);
  Rng rng(0);
  T k = make_text_kernel(t, w, b, spec, 0.0, false, rng);
  CHECK(k.shape() == Shape{3, 3, 3, 3});
  CHECK(std::abs(l2(k) - 1.0) < 1e-6);
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t i = 0; i < 3; ++i)
      if (o != i)
        for (std::size_t p = 0; p < 9; ++p) CHECK(k[(o * 3 + i) * 9 + p] == 0.0);
}

TEST_CASE("build_all_kernels: 2m distinct affines, one slice per level") {
  ParamStore<double> params;
  Rng rng(5);
  const int m = 3;
  std::vector<KernelSpec> down{{3, 6, 6, KernelMode::full}, {3, 4, 4, KernelMode::full}, {3, 4, 4, KernelMode::full}};
  std::vector<KernelSpec> up = down;
  init_text_kernel_params(params, 4, down, up, rng);
  std::set<std::string> names(params.names().begin(), params.names().end());
  CHECK(names.size() == 12);  // W and b for 6 affines
  T r(Shape{2, 12});
  std::mt19937_64 g(6);
  for (auto& v : r.data()) v = std::uniform_real_distribution<double>(-1, 1)(g);
  TextKernels<double> ks = build_all_kernels(r, params, m, down, up, 0.0, false, rng);
  REQUIRE(ks.down.size() == 3);
  REQUIRE(ks.up.size() == 3);
  REQUIRE(ks.parts.size() == 3);
  CHECK(ks.down[0].shape() == Shape{2, 6, 6, 3, 3});
  CHECK(ks.up[2].shape() == Shape{2, 4, 4, 3, 3});
  // Different expressions give different kernels.
  double diff = 0.0;
  const std::size_t per = ks.down[1].numel() / 2;
  for (std::size_t i = 0; i < per; ++i) diff = std::max(diff, std::abs(ks.down[1][i] - ks.down[1][per + i]));
  CHECK(diff > 0.0);
  // Up and down kernels at the same level differ (independent weights).
  double du = 0.0;
  for (std::size_t i = 0; i < ks.up[1].numel(); ++i) du = std::max(du, std::abs(ks.up[1][i] - ks.down[1][i]));
  CHECK(du > 0.0);
}

TEST_CASE("spatial 1 gives 1x1 kernels everywhere") {
  ParamStore<double> params;
  Rng rng(7);
  std::vector<KernelSpec> specs{{1, 4, 4, KernelMode::full}, {1, 4, 4, KernelMode::full}};
  init_text_kernel_params(params, 3, specs, specs, rng);
  TextKernels<double> ks = build_all_kernels(T(Shape{1, 6}, 0.3), params, 2, specs, specs, 0.0, false, rng);
  for (const auto& k : ks.down) CHECK(k.shape() == Shape{1, 4, 4, 1, 1});
  for (const auto& k : ks.up) CHECK(k.shape() == Shape{1, 4, 4, 1, 1});
}

TEST_CASE("gradients flow through normalization into the lstm") {
  ParamStore<double> params;
  Rng rng(8);
  init_lstm_params(params, LstmShape{6, 4, 6}, rng);
  std::vector<KernelSpec> specs{{3, 2, 2, KernelMode::full}, {1, 2, 2, KernelMode::full}};
  init_text_kernel_params(params, 3, specs, specs, rng);
  std::mt19937_64 g(9);
  T probe = oracle::random_tensor({2, 2, 2, 3, 3}, g);
  T probe1 = oracle::random_tensor({2, 2, 2, 1, 1}, g);
  auto f = [&] {
    T r = lstm_encode_batch<double>({{2, 3, 4}, {5, 2}}, params);
    Rng unused(0);
    TextKernels<double> ks = build_all_kernels(r, params, 2, specs, specs, 0.0, false, unused);
    return add(sum(mul(ks.down[0], probe)), sum(mul(ks.up[1], probe1)));
  };
  GradCheckOptions opts;
  opts.coords_per_tensor = 30;
  CHECK(grad_check(f, params, opts).max_relative_error < 1e-3);
}
