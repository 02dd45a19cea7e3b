// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "bilingunet/grad_check.hpp"
#include "bilingunet/objective.hpp"
#include "bilingunet/segnet.hpp"
#include "oracles.hpp"

using namespace bilingunet;
using T = Tensor<double>;

namespace {

NetConfig tiny_config() {
  NetConfig c;
  c.depth = 2;
  c.channels = 8;
  c.image_height = 32;
  c.image_width = 32;
  c.backbone_levels = 2;
  c.backbone_channels = 8;
  c.embed_dim = 6;
  c.hidden_size = 8;
  c.dropout_p = 0.0;
  return c;
}

T random_images(std::size_t n, const NetConfig& c, std::uint64_t seed) {
  std::mt19937_64 g(seed);
  return oracle::random_tensor({n, 3, std::size_t(c.image_height), std::size_t(c.image_width)}, g, 0.0, 1.0);
}

}  // namespace

TEST_CASE("location features follow the cell-edge formula") {
  T loc = build_location_features<double>(2, 2);
  CHECK(loc.shape() == Shape{8, 2, 2});
  CHECK(loc[0] == -1.0);            // x_min of cell (0,0)
  CHECK(loc[4] == -0.5);            // x_center
  CHECK(loc[8] == 0.0);             // x_max
  CHECK(loc[3 * 4 + 3] == 0.0);     // y_min of cell (1,1)
  CHECK(loc[5 * 4 + 3] == 1.0);     // y_max of cell (1,1)
  T g = build_location_features<double>(3, 5);
  for (std::size_t p = 0; p < 15; ++p) {
    CHECK(g[6 * 15 + p] == doctest::Approx(1.0 / 5));
    CHECK(g[7 * 15 + p] == doctest::Approx(1.0 / 3));
  }
  CHECK_THROWS_AS(build_location_features<double>(0, 2), ConfigError);
}

TEST_CASE("backbone: 64x64 with 64 visual channels gives 72x16x16") {
  NetConfig c;
  c.backbone_channels = 64;
  ParamStore<double> p;
  Rng rng(1);
  init_segnet_params(p, c, 10, rng);
  T i0 = backbone_encode(random_images(1, c, 2), p, c, true);
  CHECK(i0.shape() == Shape{1, 72, 16, 16});
  CHECK_THROWS_AS(backbone_encode(T(Shape{1, 3, 30, 30}), p, c, true), ConfigError);
}

TEST_CASE("backbone: zero image and zero params keep only location channels") {
  NetConfig c = tiny_config();
  ParamStore<double> p;
  Rng rng(1);
  init_segnet_params(p, c, 10, rng);
  for (const auto& name : p.names())
    for (auto& v : p.get(name).data()) v = 0.0;
  T i0 = backbone_encode(T(Shape{2, 3, 32, 32}), p, c, true);
  const std::size_t plane = 8 * 8;
  T loc = build_location_features<double>(8, 8);
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t i = 0; i < 8 * plane; ++i) CHECK(i0[b * 16 * plane + i] == 0.0);
    for (std::size_t i = 0; i < 8 * plane; ++i) CHECK(i0[b * 16 * plane + 8 * plane + i] == loc[i]);
  }
}

TEST_CASE("contract and expand steps halve and double extents") {
  NetConfig c = tiny_config();
  ParamStore<double> p;
  Rng rng(3);
  init_segnet_params(p, c, 10, rng);
  std::mt19937_64 g(4);
  T i0 = oracle::random_tensor({2, 16, 8, 8}, g);
  T k1 = oracle::random_tensor({2, 16, 16, 3, 3}, g, -0.1, 0.1);
  T d1 = contract_step(i0, k1, p, 1, c, true);
  CHECK(d1.shape() == Shape{2, 8, 4, 4});
  T k2 = oracle::random_tensor({2, 8, 8, 3, 3}, g, -0.1, 0.1);
  T d2 = contract_step(d1, k2, p, 2, c, true);
  CHECK(d2.shape() == Shape{2, 8, 2, 2});
  T u2 = expand_step(d2, T{}, k2, p, 2, c, true);
  CHECK(u2.shape() == Shape{2, 8, 4, 4});
  T u1 = expand_step(d1, u2, k2, p, 1, c, true);
  CHECK(u1.shape() == Shape{2, 8, 8, 8});

  // Expanding-only: the contracting conv sees down_prev alone.
  NetConfig e = c;
  e.modulation = Modulation::expanding_only;
  ParamStore<double> pe;
  init_segnet_params(pe, e, 10, rng);
  CHECK(pe.get("down1/conv/w").shape() == Shape{8, 16, 5, 5});
  CHECK(p.get("down1/conv/w").shape() == Shape{8, 32, 5, 5});
  CHECK(contract_step(i0, T{}, pe, 1, e, true).shape() == Shape{2, 8, 4, 4});
  // Deepest expanding module consumes only the modulated skip.
  CHECK(p.get("up2/deconv/w").shape() == Shape{8, 8, 5, 5});
  CHECK(p.get("up1/deconv/w").shape() == Shape{16, 8, 5, 5});
}

TEST_CASE("forward output shapes, ranges and determinism") {
  NetConfig c = tiny_config();
  c.dropout_p = 0.2;
  ParamStore<float> p;
  Rng rng(5);
  init_segnet_params(p, c, 12, rng);
  Tensor<float> images(Shape{3, 3, 32, 32});
  std::mt19937_64 g(6);
  for (auto& v : images.data()) v = std::uniform_real_distribution<float>(0, 1)(g);
  std::vector<TokenIds> ids{{2, 3}, {4, 5, 6}, {7}};
  Rng r1(9), r2(9);
  auto a = forward(images, ids, p, c, false, r1);
  auto b = forward(images, ids, p, c, false, r2);
  CHECK(a.probabilities.shape() == Shape{3, 1, 32, 32});
  REQUIRE(a.aux.size() == 2);
  CHECK(a.aux[0].shape() == Shape{3, 1, 16, 16});
  CHECK(a.aux[1].shape() == Shape{3, 1, 8, 8});
  for (std::size_t i = 0; i < a.probabilities.numel(); ++i) {
    CHECK(a.probabilities[i] == b.probabilities[i]);
    CHECK(a.probabilities[i] > 0.0f);
    CHECK(a.probabilities[i] < 1.0f);
  }
  CHECK_THROWS_AS(forward(images, {{2}}, p, c, false, r1), DimensionError);
}

TEST_CASE("depth 4 gives four aux maps") {
  NetConfig c;
  c.depth = 4;
  c.channels = 4;
  c.hidden_size = 8;
  c.backbone_channels = 4;
  ParamStore<float> p;
  Rng rng(1);
  init_segnet_params(p, c, 5, rng);
  auto out = forward(Tensor<float>(Shape{1, 3, 64, 64}, 0.5f), {{2, 3}}, p, c, false, rng);
  CHECK(out.aux.size() == 4);
  CHECK(out.probabilities.shape() == Shape{1, 1, 64, 64});
}

TEST_CASE("language dependence: one content word changes P") {
  NetConfig c = tiny_config();
  ParamStore<double> p;
  Rng rng(7);
  init_segnet_params(p, c, 12, rng);
  T images = random_images(1, c, 8);
  auto a = forward(images, {{2, 3}}, p, c, false, rng);
  auto b = forward(images, {{2, 4}}, p, c, false, rng);
  double diff = 0.0;
  for (std::size_t i = 0; i < a.probabilities.numel(); ++i)
    diff = std::max(diff, std::abs(a.probabilities[i] - b.probabilities[i]));
  CHECK(diff > 0.0);
}

TEST_CASE("ablation containment: expanding-only 1x1 has no contracting modulation") {
  NetConfig c = tiny_config();
  c.modulation = Modulation::expanding_only;
  c.text_kernel_spatial = 1;
  ParamStore<double> p;
  Rng rng(9);
  init_segnet_params(p, c, 12, rng);
  auto out = forward(random_images(2, c, 10), {{2}, {3}}, p, c, false, rng);
  REQUIRE(out.modulations.size() == 2);
  for (const auto& m : out.modulations) {
    CHECK_FALSE(m.contracting);
    CHECK(m.kernel_shape[2] == 1);
    CHECK(m.kernel_shape[3] == 1);
  }
  for (const auto& name : p.names()) CHECK(name.rfind("text/down", 0) != 0);

  NetConfig full = tiny_config();
  ParamStore<double> q;
  init_segnet_params(q, full, 12, rng);
  auto o2 = forward(random_images(1, full, 11), {{2}}, q, full, false, rng);
  int contracting = 0;
  for (const auto& m : o2.modulations) contracting += m.contracting;
  CHECK(contracting == 2);
  CHECK(o2.modulations.size() == 4);
}

TEST_CASE("output size equals input size over random valid configs") {
  std::mt19937_64 g(12);
  for (int trial = 0; trial < 12; ++trial) {
    NetConfig c;
    c.depth = std::uniform_int_distribution<int>(1, 3)(g);
    c.backbone_levels = std::uniform_int_distribution<int>(1, 2)(g);
    const int factor = 1 << (c.depth + c.backbone_levels);
    c.image_height = factor * std::uniform_int_distribution<int>(1, 2)(g);
    c.image_width = factor * std::uniform_int_distribution<int>(1, 3)(g);
    c.channels = 4;
    c.backbone_channels = 3;
    c.embed_dim = 4;
    c.hidden_size = 2 * c.depth;
    c.text_kernel_spatial = trial % 2 ? 1 : 3;
    c.validate();
    ParamStore<float> p;
    Rng rng(trial);
    init_segnet_params(p, c, 6, rng);
    Tensor<float> img(Shape{2, 3, std::size_t(c.image_height), std::size_t(c.image_width)}, 0.3f);
    auto out = forward(img, {{2}, {3, 4}}, p, c, true, rng);
    CHECK(out.probabilities.shape() == Shape{2, 1, std::size_t(c.image_height), std::size_t(c.image_width)});
    CHECK(out.aux.size() == static_cast<std::size_t>(c.depth));
  }
}

TEST_CASE("config validation") {
  NetConfig c;
  c.image_height = 48;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  NetConfig d;
  d.hidden_size = 100;
  CHECK_THROWS_AS(d.validate(), ConfigError);
  NetConfig e;
  e.text_kernel_spatial = 5;
  CHECK_THROWS_AS(e.validate(), ConfigError);
}

TEST_CASE("predict_mask thresholds elementwise") {
  Tensor<float> p(Shape{1, 1, 2, 2}, 0.7f);
  CHECK(predict_mask(p, 0.5)[0].count() == 4);
  CHECK(predict_mask(p, 0.9)[0].count() == 0);
  std::mt19937_64 g(13);
  Tensor<float> q(Shape{2, 1, 5, 5});
  for (auto& v : q.data()) v = std::uniform_real_distribution<float>(0, 1)(g);
  auto masks = predict_mask(q, 0.4);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 25; ++i) CHECK(masks[b].bits[i] == (q[b * 25 + i] >= 0.4f ? 1 : 0));
}

TEST_CASE("end-to-end gradients on the tiny network") {
  NetConfig c = tiny_config();
  ParamStore<double> p;
  Rng rng(14);
  init_segnet_params(p, c, 10, rng);
  T images = random_images(2, c, 15);
  std::vector<TokenIds> ids{{2, 3, 4, 5, 6, 7}, {3, 9, 2}};
  T target(Shape{2, 1, 32, 32}), ignore(Shape{2, 1, 32, 32});
  for (std::size_t i = 0; i < target.numel(); ++i) target[i] = (i % 32 > 10 && i % 32 < 20) ? 1.0 : 0.0;
  auto f = [&] {
    Rng unused(0);
    auto out = forward(images, ids, p, c, true, unused);
    return multiscale_loss(out, target, ignore).total;
  };
  GradCheckOptions opts;
  opts.coords_per_tensor = 3;
  const GradCheckResult r = grad_check(f, p, opts);
  INFO("worst: " << r.worst_param << "[" << r.worst_index << "] analytic " << r.worst_analytic
                 << " numeric " << r.worst_numeric);
  CHECK(r.max_relative_error < 1e-3);
}
