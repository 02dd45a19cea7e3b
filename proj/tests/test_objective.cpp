// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>

#include "bilingunet/grad_check.hpp"
#include "bilingunet/objective.hpp"
#include "oracles.hpp"

using namespace bilingunet;
using T = Tensor<double>;

namespace {

std::vector<double> values(const T& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_CASE("bce at the symmetric point is ln 2") {
  T p(Shape{1, 1, 3, 3}, 0.5);
  T g(Shape{1, 1, 3, 3});
  for (std::size_t i = 0; i < 9; ++i) g[i] = i % 2;
  CHECK(bce_loss(p, g).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("bce of a perfect prediction is at most the clamp floor") {
  T g(Shape{1, 1, 2, 2}, std::vector<double>{1, 0, 0, 1});
  const double loss = bce_loss(g, g).item();
  CHECK(loss >= 0.0);
  CHECK(loss <= -std::log(1.0 - kBceClamp) + 1e-15);
}

TEST_CASE("bce hand example with an ignored row") {
  T p(Shape{1, 1, 2, 2}, std::vector<double>{0.9, 0.1, 0.5, 0.5});
  T g(Shape{1, 1, 2, 2}, std::vector<double>{1, 0, 1, 0});
  T ig(Shape{1, 1, 2, 2}, std::vector<double>{0, 0, 1, 1});
  CHECK(bce_loss(p, g, ig).item() == doctest::Approx(-std::log(0.9)).epsilon(1e-12));
  CHECK(bce_loss(p, g, ig).item() == doctest::Approx(0.1054).epsilon(1e-3));
  CHECK_THROWS_AS(bce_loss(p, g, T(Shape{1, 1, 2, 2}, 1.0)), ContractError);
  CHECK_THROWS_AS(bce_loss(p, T(Shape{1, 1, 2, 3})), DimensionError);
}

TEST_CASE("bce matches the scalar oracle and ignores masked content") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    T p = oracle::random_tensor({2, 1, 4, 5}, rng, 0.0, 1.0);
    p[0] = 0.0;  // exercises the clamp
    p[1] = 1.0;
    T g(p.shape()), ig(p.shape());
    std::vector<int> ignore(p.numel());
    for (std::size_t i = 0; i < p.numel(); ++i) {
      g[i] = static_cast<double>(rng() % 2);
      ignore[i] = i == 0 ? 0 : static_cast<int>(rng() % 4 == 0);
      ig[i] = ignore[i];
    }
    const double loss = bce_loss(p, g, ig).item();
    CHECK(std::abs(loss - oracle::bce(values(p), values(g), ignore)) < 1e-10);
    CHECK(loss >= 0.0);
    for (std::size_t i = 0; i < p.numel(); ++i)
      if (ignore[i]) p[i] = 0.123;
    CHECK(bce_loss(p, g, ig).item() == loss);
  }
}

TEST_CASE("downscale_mask examples and oracle") {
  T m(Shape{2, 2}, std::vector<double>{1, 1, 0, 0});
  CHECK(downscale_mask(m, 1, 1)[0] == 0.5);
  T ones(Shape{1, 1, 8, 8}, 1.0);
  const T d24 = downscale_mask(ones, 2, 4);
  for (double v : d24.data()) CHECK(v == 1.0);
  CHECK_THROWS_AS(downscale_mask(ones, 3, 3), ConfigError);

  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    T b(Shape{1, 1, 8, 8});
    for (auto& v : b.data()) v = static_cast<double>(rng() % 2);
    const std::size_t oh = trial % 2 ? 4 : 2, ow = trial % 3 ? 4 : 8;
    T d = downscale_mask(b, oh, ow);
    const auto ref = oracle::block_mean(values(b), 8, 8, static_cast<int>(oh), static_cast<int>(ow));
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(d[i] == ref[i]);
  }
}

TEST_CASE("multiscale loss: weights, perfect case and scalar-loop total") {
  std::mt19937_64 rng(3);
  ForwardOutput<double> out;
  out.probabilities = oracle::random_tensor({1, 1, 8, 8}, rng, 0.05, 0.95);
  out.aux = {oracle::random_tensor({1, 1, 4, 4}, rng, 0.05, 0.95), oracle::random_tensor({1, 1, 2, 2}, rng, 0.05, 0.95)};
  T g(Shape{1, 1, 8, 8});
  for (auto& v : g.data()) v = static_cast<double>(rng() % 2);
  T ig(Shape{1, 1, 8, 8});
  for (std::size_t i = 0; i < 16; ++i) ig[i] = 1.0;  // top two rows ignored

  LossReport<double> r = multiscale_loss(out, g, ig);
  REQUIRE(r.aux_terms.size() == 2);
  CHECK(r.aux_terms[0].weight == 0.25);
  CHECK(r.aux_terms[1].weight == 0.0625);

  // Independent scalar computation.
  std::vector<int> ig_full(64);
  for (int i = 0; i < 64; ++i) ig_full[i] = i < 16;
  double expected = oracle::bce(values(out.probabilities), values(g), ig_full);
  const int sizes[2] = {4, 2};
  for (int a = 0; a < 2; ++a) {
    const int s = sizes[a];
    auto gt = oracle::block_mean(values(g), 8, 8, s, s);
    auto im = oracle::block_mean(std::vector<double>(ig_full.begin(), ig_full.end()), 8, 8, s, s);
    std::vector<int> imask(im.size());
    for (std::size_t i = 0; i < im.size(); ++i) imask[i] = im[i] >= 0.5;
    expected += (s * s) / 64.0 * oracle::bce(values(out.aux[static_cast<std::size_t>(a)]), gt, imask);
  }
  CHECK(std::abs(r.total.item() - expected) < 1e-12);
  double sum_terms = r.final_term;
  for (const auto& t : r.aux_terms) sum_terms += t.weight * t.value;
  CHECK(std::abs(sum_terms - r.total.item()) < 1e-12);

  LossOptions lin;
  lin.weighting = AuxWeighting::linear_ratio;
  CHECK(multiscale_loss(out, g, ig, lin).aux_terms[0].weight == 0.5);

  ForwardOutput<double> perfect;
  perfect.probabilities = g;
  perfect.aux = {downscale_mask(g, 4, 4), downscale_mask(g, 2, 2)};
  LossOptions hard;
  hard.soft_targets = true;
  // Soft targets equal to the prediction still carry entropy; use a constant mask.
  T ones(Shape{1, 1, 8, 8}, 1.0);
  perfect.probabilities = ones;
  perfect.aux = {T(Shape{1, 1, 4, 4}, 1.0), T(Shape{1, 1, 2, 2}, 1.0)};
  CHECK(multiscale_loss(perfect, ones, T{}, hard).total.item() <= 1e-6);
}

TEST_CASE("multiscale off is bitwise plain bce") {
  std::mt19937_64 rng(4);
  ForwardOutput<float> out;
  Tensor<float> p(Shape{2, 1, 8, 8}), g(Shape{2, 1, 8, 8}), ig(Shape{2, 1, 8, 8});
  for (std::size_t i = 0; i < p.numel(); ++i) {
    p[i] = std::uniform_real_distribution<float>(0, 1)(rng);
    g[i] = static_cast<float>(rng() % 2);
  }
  out.probabilities = p;
  out.aux = {Tensor<float>(Shape{2, 1, 4, 4}, 0.3f)};
  LossOptions off;
  off.multiscale = false;
  const float a = multiscale_loss(out, g, ig, off).total.item();
  const float b = bce_loss(p, g, ig).item();
  CHECK(std::memcmp(&a, &b, sizeof a) == 0);
  CHECK(multiscale_loss(out, g, ig, off).aux_terms.empty());
}

TEST_CASE("loss gradient with respect to P matches finite differences") {
  std::mt19937_64 rng(5);
  ParamStore<double> params;
  params.add("p", oracle::random_tensor({1, 1, 4, 4}, rng, 0.1, 0.9));
  params.add("a", oracle::random_tensor({1, 1, 2, 2}, rng, 0.1, 0.9));
  T g(Shape{1, 1, 4, 4});
  for (auto& v : g.data()) v = static_cast<double>(rng() % 2);
  auto f = [&] {
    ForwardOutput<double> out;
    out.probabilities = params.get("p");
    out.aux = {params.get("a")};
    return multiscale_loss(out, g, T{}).total;
  };
  GradCheckOptions opts;
  opts.coords_per_tensor = 16;
  CHECK(grad_check(f, params, opts).max_relative_error < 1e-6);
}
