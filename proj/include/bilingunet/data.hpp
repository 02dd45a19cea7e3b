// SPDX-License-Identifier: Apache-2.0
//
// Synthetic referring-expression scenes (colored shapes with spatial
// relations) rendered with hard edges, plus an on-disk dataset format:
//
//   root/images/<id>.png      8-bit RGB (or .ppm)
//   root/masks/<id>.png       8-bit gray, 0/255 (or .pgm)
//   root/annotations.jsonl    {"id": "...", "expression": "..."} per line
//
// Records may carry an optional "template" field naming the expression
// template; it is written for synthetic data and restored on load.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "bilingunet/mask.hpp"
#include "bilingunet/ops.hpp"

namespace bilingunet {

enum class ShapeKind { circle, square, triangle };
enum class ColorKind { red, green, blue, yellow };
enum class TemplateKind { attribute, location, relation, superlative, external };

inline constexpr std::array<ShapeKind, 3> kAllShapes{ShapeKind::circle, ShapeKind::square,
                                                     ShapeKind::triangle};
inline constexpr std::array<ColorKind, 4> kAllColors{ColorKind::red, ColorKind::green,
                                                     ColorKind::blue, ColorKind::yellow};

std::string to_string(ShapeKind s);
std::string to_string(ColorKind c);
std::string to_string(TemplateKind t);
TemplateKind template_from_string(const std::string& s);
std::array<float, 3> color_rgb(ColorKind c);

// Integer geometry: centers on pixel corners, `size` is the diameter / side
// length / triangle base (equal to its height).
struct SceneObject {
  ShapeKind shape = ShapeKind::circle;
  ColorKind color = ColorKind::red;
  int cx = 0;
  int cy = 0;
  int size = 0;

  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

struct SceneSpec {
  int height = 64;
  int width = 64;
  std::vector<SceneObject> objects;
};

// Pixel (x, y) is covered when its center (x + .5, y + .5) lies inside.
bool covers(const SceneObject& object, int x, int y);
BinaryMask rasterize(const SceneObject& object, int height, int width);

enum class Relation { left_of, right_of, above, below };
enum class Region { left, right, top, bottom };
enum class Extreme { largest, smallest };

// The structured meaning of an expression, evaluated against a scene by
// `resolve`.
struct Referring {
  TemplateKind kind = TemplateKind::attribute;
  ShapeKind shape = ShapeKind::circle;
  std::optional<ColorKind> color;
  Region region = Region::left;
  Extreme extreme = Extreme::largest;
  Relation relation = Relation::left_of;
  ShapeKind landmark_shape = ShapeKind::circle;
  ColorKind landmark_color = ColorKind::red;
};

std::string render_expression(const Referring& ref);

// Spatial predicate constants, in pixels, for a canvas of height H.
int relation_margin(int canvas_height);  // H/16

// Indices of every object satisfying `ref` under the template semantics.
std::vector<std::size_t> resolve(const Referring& ref, const SceneSpec& scene);

struct Sample {
  std::string id;
  Tensor<float> image;  // [3,H,W] in [0,1]
  std::string expression;
  BinaryMask mask;
  BinaryMask ignore;
  TemplateKind kind = TemplateKind::external;
  std::optional<SceneSpec> scene;  // present for synthetic samples
  std::optional<Referring> meaning;
  std::size_t referent = 0;
};

struct SynthConfig {
  int height = 64;
  int width = 64;
  std::vector<TemplateKind> templates{TemplateKind::attribute, TemplateKind::location,
                                      TemplateKind::relation, TemplateKind::superlative};
  int min_objects = 2;
  int max_objects = 4;
  int max_tries = 1000;
};

Sample generate_sample(Rng& rng, const SynthConfig& config);

// Sample i is drawn from its own stream seeded by (seed, i).
std::vector<Sample> generate_dataset(std::size_t n, std::uint64_t seed, const SynthConfig& config);

Tensor<float> render_image(const SceneSpec& scene);

void save_dataset(const std::vector<Sample>& samples, const std::filesystem::path& root,
                  const std::string& image_extension = ".png");
std::vector<Sample> load_dataset(const std::filesystem::path& root);

// Nearest-neighbor resize preserving aspect ratio, then zero padding at the
// bottom/right; padded pixels are marked in `ignore`.
Sample fit_to_canvas(const Sample& sample, int height, int width);

// Extent (rows, cols) that a src_h x src_w image occupies after fitting.
std::pair<std::size_t, std::size_t> fitted_extent(std::size_t src_h, std::size_t src_w, int height,
                                                  int width);

struct DatasetSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

// Deterministic shuffled partition, stratified by template kind.
DatasetSplit split_dataset(const std::vector<Sample>& samples, const std::array<double, 3>& ratios,
                           std::uint64_t seed);

}  // namespace bilingunet
