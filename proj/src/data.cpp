// SPDX-License-Identifier: Apache-2.0

#include "bilingunet/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "bilingunet/image_io.hpp"
#include "json.hpp"

namespace bilingunet {

namespace fs = std::filesystem;

std::string to_string(ShapeKind s) {
  switch (s) {
    case ShapeKind::circle: return "circle";
    case ShapeKind::square: return "square";
    case ShapeKind::triangle: return "triangle";
  }
  return "?";
}

std::string to_string(ColorKind c) {
  switch (c) {
    case ColorKind::red: return "red";
    case ColorKind::green: return "green";
    case ColorKind::blue: return "blue";
    case ColorKind::yellow: return "yellow";
  }
  return "?";
}

std::string to_string(TemplateKind t) {
  switch (t) {
    case TemplateKind::attribute: return "attribute";
    case TemplateKind::location: return "location";
    case TemplateKind::relation: return "relation";
    case TemplateKind::superlative: return "superlative";
    case TemplateKind::external: return "external";
  }
  return "?";
}

TemplateKind template_from_string(const std::string& s) {
  for (TemplateKind t : {TemplateKind::attribute, TemplateKind::location, TemplateKind::relation,
                         TemplateKind::superlative, TemplateKind::external}) {
    if (to_string(t) == s) return t;
  }
  throw ConfigError("unknown expression template \"" + s + "\"");
}

std::array<float, 3> color_rgb(ColorKind c) {
  switch (c) {
    case ColorKind::red: return {0.9f, 0.15f, 0.1f};
    case ColorKind::green: return {0.1f, 0.75f, 0.2f};
    case ColorKind::blue: return {0.15f, 0.25f, 0.95f};
    case ColorKind::yellow: return {0.95f, 0.9f, 0.1f};
  }
  return {0.f, 0.f, 0.f};
}

// Doubled coordinates keep every test in exact integer arithmetic.
bool covers(const SceneObject& o, int x, int y) {
  const long px = 2L * x + 1 - 2L * o.cx;
  const long py = 2L * y + 1 - 2L * o.cy;
  const long s = o.size;
  switch (o.shape) {
    case ShapeKind::circle:
      return px * px + py * py <= s * s;
    case ShapeKind::square:
      return std::labs(px) <= s && std::labs(py) <= s;
    case ShapeKind::triangle:
      // apex at (0, -s), base from (-s, s) to (s, s)
      return py >= -s && py <= s && 2 * std::labs(px) <= py + s;
  }
  return false;
}

BinaryMask rasterize(const SceneObject& object, int height, int width) {
  BinaryMask mask(static_cast<std::size_t>(height), static_cast<std::size_t>(width));
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) mask.at(y, x) = covers(object, x, y) ? 1 : 0;
  return mask;
}

int relation_margin(int canvas_height) { return canvas_height / 16; }

namespace {

bool same_type(const SceneObject& o, ShapeKind s, ColorKind c) { return o.shape == s && o.color == c; }

bool in_region(const SceneObject& o, Region r, int height, int width) {
  switch (r) {
    case Region::left: return 3 * o.cx < width;
    case Region::right: return 3 * o.cx >= 2 * width;
    case Region::top: return 3 * o.cy < height;
    case Region::bottom: return 3 * o.cy >= 2 * height;
  }
  return false;
}

// At least `margin` pixels on the far side of the region boundary.
bool clearly_outside(const SceneObject& o, Region r, int height, int width, int margin) {
  switch (r) {
    case Region::left: return 3 * o.cx >= width + 3 * margin;
    case Region::right: return 3 * o.cx + 3 * margin < 2 * width;
    case Region::top: return 3 * o.cy >= height + 3 * margin;
    case Region::bottom: return 3 * o.cy + 3 * margin < 2 * height;
  }
  return false;
}

// Signed offset along the relation axis; the relation holds when > margin.
int relation_offset(const SceneObject& a, const SceneObject& b, Relation r) {
  switch (r) {
    case Relation::left_of: return b.cx - a.cx;
    case Relation::right_of: return a.cx - b.cx;
    case Relation::above: return b.cy - a.cy;
    case Relation::below: return a.cy - b.cy;
  }
  return 0;
}

std::string relation_words(Relation r) {
  switch (r) {
    case Relation::left_of: return "left of";
    case Relation::right_of: return "right of";
    case Relation::above: return "above";
    case Relation::below: return "below";
  }
  return "?";
}

std::string region_word(Region r) {
  switch (r) {
    case Region::left: return "left";
    case Region::right: return "right";
    case Region::top: return "top";
    case Region::bottom: return "bottom";
  }
  return "?";
}

}  // namespace

std::string render_expression(const Referring& ref) {
  auto noun = [](std::optional<ColorKind> c, ShapeKind s) {
    return c ? to_string(*c) + " " + to_string(s) : to_string(s);
  };
  switch (ref.kind) {
    case TemplateKind::attribute:
      return noun(ref.color, ref.shape);
    case TemplateKind::location:
      return noun(ref.color, ref.shape) + " on the " + region_word(ref.region);
    case TemplateKind::relation:
      return noun(ref.color, ref.shape) + " " + relation_words(ref.relation) + " the " +
             noun(ref.landmark_color, ref.landmark_shape);
    case TemplateKind::superlative:
      return std::string(ref.extreme == Extreme::largest ? "largest " : "smallest ") +
             noun(ref.color, ref.shape);
    case TemplateKind::external:
      break;
  }
  throw ContractError("external samples have no structured meaning");
}

std::vector<std::size_t> resolve(const Referring& ref, const SceneSpec& scene) {
  const auto& objs = scene.objects;
  auto matches = [&](const SceneObject& o) {
    return o.shape == ref.shape && (!ref.color || o.color == *ref.color);
  };
  std::vector<std::size_t> hits;
  switch (ref.kind) {
    case TemplateKind::attribute:
      for (std::size_t i = 0; i < objs.size(); ++i)
        if (matches(objs[i])) hits.push_back(i);
      break;
    case TemplateKind::location:
      for (std::size_t i = 0; i < objs.size(); ++i)
        if (matches(objs[i]) && in_region(objs[i], ref.region, scene.height, scene.width)) hits.push_back(i);
      break;
    case TemplateKind::relation: {
      const int margin = relation_margin(scene.height);
      for (std::size_t i = 0; i < objs.size(); ++i) {
        if (!matches(objs[i])) continue;
        for (std::size_t j = 0; j < objs.size(); ++j) {
          if (j == i || !same_type(objs[j], ref.landmark_shape, ref.landmark_color)) continue;
          if (relation_offset(objs[i], objs[j], ref.relation) > margin) {
            hits.push_back(i);
            break;
          }
        }
      }
      break;
    }
    case TemplateKind::superlative: {
      std::vector<std::size_t> candidates;
      for (std::size_t i = 0; i < objs.size(); ++i)
        if (matches(objs[i])) candidates.push_back(i);
      if (candidates.empty()) break;
      int best = objs[candidates[0]].size;
      for (std::size_t i : candidates)
        best = ref.extreme == Extreme::largest ? std::max(best, objs[i].size) : std::min(best, objs[i].size);
      for (std::size_t i : candidates)
        if (objs[i].size == best) hits.push_back(i);
      break;
    }
    case TemplateKind::external:
      throw ContractError("external samples cannot be resolved against a scene");
  }
  return hits;
}

namespace {

template <typename Container>
auto pick(Rng& rng, const Container& items) {
  std::uniform_int_distribution<std::size_t> d(0, items.size() - 1);
  return items[d(rng)];
}

int uniform_int(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

bool separated(const SceneObject& a, const SceneObject& b) {
  // Bounding boxes with a gap of at least 2 pixels.
  const int gap = 2;
  const int half = (a.size + b.size + 1) / 2;
  return std::abs(a.cx - b.cx) >= half + gap || std::abs(a.cy - b.cy) >= half + gap;
}

// Places objects of the given types at random non-overlapping positions.
bool place_objects(Rng& rng, const SynthConfig& config,
                   const std::vector<std::pair<ShapeKind, ColorKind>>& types,
                   std::vector<SceneObject>& out) {
  const int min_size = (config.height + 7) / 8;
  const int max_size = config.height / 3;
  out.clear();
  for (const auto& [shape, color] : types) {
    bool placed = false;
    for (int attempt = 0; attempt < 50 && !placed; ++attempt) {
      SceneObject o{shape, color, 0, 0, uniform_int(rng, min_size, max_size)};
      const int half = (o.size + 1) / 2;
      if (2 * half > config.width || 2 * half > config.height) return false;
      o.cx = uniform_int(rng, half, config.width - half);
      o.cy = uniform_int(rng, half, config.height - half);
      placed = std::all_of(out.begin(), out.end(), [&](const SceneObject& p) { return separated(o, p); });
      if (placed) out.push_back(o);
    }
    if (!placed) return false;
  }
  std::shuffle(out.begin(), out.end(), rng);
  return true;
}

std::pair<ShapeKind, ColorKind> random_type(Rng& rng) {
  return {pick(rng, kAllShapes), pick(rng, kAllColors)};
}

struct Attempt {
  SceneSpec scene;
  Referring ref;
  std::size_t referent = 0;
};

std::optional<Attempt> try_attribute(Rng& rng, const SynthConfig& config) {
  Attempt a;
  a.scene = {config.height, config.width, {}};
  const int n = uniform_int(rng, std::max(config.min_objects, 1), config.max_objects);
  std::vector<std::pair<ShapeKind, ColorKind>> types;
  for (int i = 0; i < n; ++i) types.push_back(random_type(rng));
  if (!place_objects(rng, config, types, a.scene.objects)) return std::nullopt;
  a.referent = uniform_int(rng, 0, n - 1);
  const SceneObject& target = a.scene.objects[a.referent];
  a.ref.kind = TemplateKind::attribute;
  a.ref.shape = target.shape;
  a.ref.color = target.color;
  return a;
}

std::optional<Attempt> try_location(Rng& rng, const SynthConfig& config) {
  if (config.max_objects < 2) return std::nullopt;
  Attempt a;
  a.scene = {config.height, config.width, {}};
  const int n = uniform_int(rng, std::max(config.min_objects, 2), config.max_objects);
  const ShapeKind shape = pick(rng, kAllShapes);
  const int same = uniform_int(rng, 2, n);
  std::vector<std::pair<ShapeKind, ColorKind>> types;
  for (int i = 0; i < n; ++i) {
    types.emplace_back(i < same ? shape : pick(rng, kAllShapes), pick(rng, kAllColors));
  }
  if (!place_objects(rng, config, types, a.scene.objects)) return std::nullopt;
  a.ref.kind = TemplateKind::location;
  a.ref.shape = shape;
  a.ref.region = pick(rng, std::array{Region::left, Region::right, Region::top, Region::bottom});
  const auto hits = resolve(a.ref, a.scene);
  if (hits.size() != 1) return std::nullopt;
  const int margin = relation_margin(config.height);
  for (std::size_t i = 0; i < a.scene.objects.size(); ++i) {
    const auto& o = a.scene.objects[i];
    if (i != hits[0] && o.shape == shape &&
        !clearly_outside(o, a.ref.region, config.height, config.width, margin)) {
      return std::nullopt;
    }
  }
  a.referent = hits[0];
  return a;
}

std::optional<Attempt> try_relation(Rng& rng, const SynthConfig& config) {
  if (config.max_objects < 3) return std::nullopt;
  Attempt a;
  a.scene = {config.height, config.width, {}};
  const int n = uniform_int(rng, std::max(config.min_objects, 3), config.max_objects);
  const auto target_type = random_type(rng);
  auto landmark_type = random_type(rng);
  while (landmark_type == target_type) landmark_type = random_type(rng);
  std::vector<std::pair<ShapeKind, ColorKind>> types{target_type, target_type, landmark_type};
  while (static_cast<int>(types.size()) < n) {
    auto t = random_type(rng);
    if (t != landmark_type) types.push_back(t);
  }
  if (!place_objects(rng, config, types, a.scene.objects)) return std::nullopt;
  a.ref.kind = TemplateKind::relation;
  a.ref.shape = target_type.first;
  a.ref.color = target_type.second;
  a.ref.landmark_shape = landmark_type.first;
  a.ref.landmark_color = landmark_type.second;
  a.ref.relation = pick(rng, std::array{Relation::left_of, Relation::right_of, Relation::above,
                                        Relation::below});
  const auto hits = resolve(a.ref, a.scene);
  if (hits.size() != 1) return std::nullopt;
  const int margin = relation_margin(config.height);
  const auto& objs = a.scene.objects;
  std::size_t landmark = objs.size();
  for (std::size_t i = 0; i < objs.size(); ++i)
    if (same_type(objs[i], landmark_type.first, landmark_type.second)) landmark = i;
  // Every distractor of the target type must fail the relation by a margin.
  for (std::size_t i = 0; i < objs.size(); ++i) {
    if (i == hits[0] || !same_type(objs[i], target_type.first, target_type.second)) continue;
    if (relation_offset(objs[i], objs[landmark], a.ref.relation) > -margin) return std::nullopt;
  }
  a.referent = hits[0];
  return a;
}

std::optional<Attempt> try_superlative(Rng& rng, const SynthConfig& config) {
  if (config.max_objects < 2) return std::nullopt;
  Attempt a;
  a.scene = {config.height, config.width, {}};
  const int n = uniform_int(rng, std::max(config.min_objects, 2), config.max_objects);
  const ShapeKind shape = pick(rng, kAllShapes);
  const int same = uniform_int(rng, 2, n);
  std::vector<std::pair<ShapeKind, ColorKind>> types;
  for (int i = 0; i < n; ++i) {
    types.emplace_back(i < same ? shape : pick(rng, kAllShapes), pick(rng, kAllColors));
  }
  if (!place_objects(rng, config, types, a.scene.objects)) return std::nullopt;
  a.ref.kind = TemplateKind::superlative;
  a.ref.shape = shape;
  a.ref.extreme = pick(rng, std::array{Extreme::largest, Extreme::smallest});
  const auto hits = resolve(a.ref, a.scene);
  if (hits.size() != 1) return std::nullopt;
  // Size gap of at least 3 pixels to every other candidate.
  const int chosen = a.scene.objects[hits[0]].size;
  for (std::size_t i = 0; i < a.scene.objects.size(); ++i) {
    const auto& o = a.scene.objects[i];
    if (i != hits[0] && o.shape == shape && std::abs(o.size - chosen) < 3) return std::nullopt;
  }
  a.referent = hits[0];
  return a;
}

}  // namespace

Tensor<float> render_image(const SceneSpec& scene) {
  const std::size_t h = static_cast<std::size_t>(scene.height), w = static_cast<std::size_t>(scene.width);
  Tensor<float> image(Shape{3, h, w}, 0.1f);
  for (const auto& o : scene.objects) {
    const auto rgb = color_rgb(o.color);
    const int half = (o.size + 1) / 2 + 1;
    for (int y = std::max(0, o.cy - half); y < std::min(scene.height, o.cy + half); ++y)
      for (int x = std::max(0, o.cx - half); x < std::min(scene.width, o.cx + half); ++x) {
        if (!covers(o, x, y)) continue;
        for (std::size_t c = 0; c < 3; ++c) image[(c * h + y) * w + x] = rgb[c];
      }
  }
  return image;
}

namespace {

int min_objects_for(TemplateKind kind) {
  switch (kind) {
    case TemplateKind::attribute: return 1;
    case TemplateKind::relation: return 3;
    default: return 2;
  }
}

}  // namespace

Sample generate_sample(Rng& rng, const SynthConfig& config) {
  if (config.templates.empty()) throw ConfigError("synthetic config enables no templates");
  if (config.height < 8 || config.width < 8) throw ConfigError("synthetic canvas must be at least 8x8");
  // Only templates whose scene precondition the object budget allows.
  std::vector<TemplateKind> feasible;
  for (TemplateKind t : config.templates)
    if (config.max_objects >= min_objects_for(t)) feasible.push_back(t);
  if (feasible.empty()) {
    throw GenerationError("no enabled template fits scenes of at most " +
                          std::to_string(config.max_objects) + " objects");
  }
  const TemplateKind kind = pick(rng, feasible);
  for (int attempt = 0; attempt < config.max_tries; ++attempt) {
    std::optional<Attempt> result;
    switch (kind) {
      case TemplateKind::attribute: result = try_attribute(rng, config); break;
      case TemplateKind::location: result = try_location(rng, config); break;
      case TemplateKind::relation: result = try_relation(rng, config); break;
      case TemplateKind::superlative: result = try_superlative(rng, config); break;
      case TemplateKind::external: throw ConfigError("cannot synthesize external samples");
    }
    if (!result) continue;
    const auto hits = resolve(result->ref, result->scene);
    if (hits.size() != 1 || hits[0] != result->referent) continue;
    Sample s;
    s.kind = kind;
    s.expression = render_expression(result->ref);
    s.image = render_image(result->scene);
    s.mask = rasterize(result->scene.objects[result->referent], config.height, config.width);
    s.ignore = BinaryMask(static_cast<std::size_t>(config.height), static_cast<std::size_t>(config.width));
    s.referent = result->referent;
    s.meaning = result->ref;
    s.scene = std::move(result->scene);
    return s;
  }
  throw GenerationError("could not generate a \"" + to_string(kind) + "\" scene in " +
                        std::to_string(config.max_tries) + " tries");
}

std::vector<Sample> generate_dataset(std::size_t n, std::uint64_t seed, const SynthConfig& config) {
  std::vector<Sample> samples;
  samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(i >> 32)};
    Rng rng(seq);
    Sample s = generate_sample(rng, config);
    char id[32];
    std::snprintf(id, sizeof id, "%06zu", i);
    s.id = id;
    samples.push_back(std::move(s));
  }
  return samples;
}

namespace {

Image8 to_image8(const Tensor<float>& image) {
  Image8 out;
  out.channels = 3;
  out.height = image.dim(1);
  out.width = image.dim(2);
  out.pixels.resize(out.height * out.width * 3);
  const std::size_t plane = out.height * out.width;
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) {
      const float v = std::clamp(image[c * plane + p], 0.0f, 1.0f);
      out.pixels[p * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
  return out;
}

Image8 mask_to_image8(const BinaryMask& mask) {
  Image8 out{mask.height, mask.width, 1, {}};
  out.pixels.resize(mask.bits.size());
  for (std::size_t i = 0; i < mask.bits.size(); ++i) out.pixels[i] = mask.bits[i] ? 255 : 0;
  return out;
}

fs::path find_with_extension(const fs::path& dir, const std::string& id,
                             std::initializer_list<const char*> exts) {
  for (const char* ext : exts) {
    fs::path p = dir / (id + ext);
    if (fs::exists(p)) return p;
  }
  return {};
}

}  // namespace

void save_dataset(const std::vector<Sample>& samples, const fs::path& root,
                  const std::string& image_extension) {
  if (image_extension != ".png" && image_extension != ".ppm") {
    throw ConfigError("dataset images must be .png or .ppm");
  }
  const std::string mask_extension = image_extension == ".png" ? ".png" : ".pgm";
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  std::ofstream ann(root / "annotations.jsonl");
  if (!ann) throw IoError("cannot write " + (root / "annotations.jsonl").string());
  for (const auto& s : samples) {
    write_image(root / "images" / (s.id + image_extension), to_image8(s.image));
    write_image(root / "masks" / (s.id + mask_extension), mask_to_image8(s.mask));
    nlohmann::json record{{"id", s.id}, {"expression", s.expression}};
    if (s.kind != TemplateKind::external) record["template"] = to_string(s.kind);
    ann << record.dump() << '\n';
  }
  if (!ann) throw IoError("failed writing annotations in " + root.string());
}

std::vector<Sample> load_dataset(const fs::path& root) {
  const fs::path ann_path = root / "annotations.jsonl";
  std::ifstream ann(ann_path);
  if (!ann) throw LoadError("missing " + ann_path.string());
  std::vector<Sample> samples;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(ann, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = ann_path.string() + ":" + std::to_string(line_no);
    nlohmann::json record;
    try {
      record = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw LoadError(where + ": malformed record: " + e.what());
    }
    if (!record.is_object() || !record.contains("id") || !record["id"].is_string() ||
        !record.contains("expression") || !record["expression"].is_string()) {
      throw LoadError(where + ": record needs string fields \"id\" and \"expression\"");
    }
    Sample s;
    s.id = record["id"].get<std::string>();
    s.expression = record["expression"].get<std::string>();
    if (s.expression.find_first_not_of(" \t") == std::string::npos) {
      throw LoadError(where + ": record \"" + s.id + "\" has an empty expression");
    }
    if (record.contains("template")) {
      try {
        s.kind = template_from_string(record["template"].get<std::string>());
      } catch (const std::exception& e) {
        throw LoadError(where + ": " + e.what());
      }
    }
    const fs::path image_path = find_with_extension(root / "images", s.id, {".png", ".ppm"});
    const fs::path mask_path = find_with_extension(root / "masks", s.id, {".png", ".pgm"});
    if (image_path.empty()) throw LoadError("record \"" + s.id + "\": image file missing");
    if (mask_path.empty()) throw LoadError("record \"" + s.id + "\": mask file missing");
    Image8 image, mask;
    try {
      image = read_image(image_path);
      mask = read_image(mask_path);
    } catch (const IoError& e) {
      throw LoadError("record \"" + s.id + "\": " + e.what());
    }
    if (image.height != mask.height || image.width != mask.width) {
      throw LoadError("record \"" + s.id + "\": image and mask sizes differ");
    }
    const std::size_t h = image.height, w = image.width, plane = h * w;
    s.image = Tensor<float>(Shape{3, h, w});
    for (std::size_t p = 0; p < plane; ++p)
      for (std::size_t c = 0; c < 3; ++c) {
        const std::uint8_t v = image.pixels[p * image.channels + (image.channels == 3 ? c : 0)];
        s.image[c * plane + p] = static_cast<float>(v) / 255.0f;
      }
    s.mask = BinaryMask(h, w);
    for (std::size_t p = 0; p < plane; ++p) s.mask.bits[p] = mask.pixels[p * mask.channels] >= 128 ? 1 : 0;
    s.ignore = BinaryMask(h, w);
    samples.push_back(std::move(s));
  }
  return samples;
}

std::pair<std::size_t, std::size_t> fitted_extent(std::size_t src_h, std::size_t src_w, int height,
                                                  int width) {
  const std::size_t dst_h = static_cast<std::size_t>(height), dst_w = static_cast<std::size_t>(width);
  const double s = std::min(static_cast<double>(height) / src_h, static_cast<double>(width) / src_w);
  return {std::clamp<std::size_t>(static_cast<std::size_t>(std::floor(src_h * s)), 1, dst_h),
          std::clamp<std::size_t>(static_cast<std::size_t>(std::floor(src_w * s)), 1, dst_w)};
}

Sample fit_to_canvas(const Sample& sample, int height, int width) {
  const std::size_t src_h = sample.image.dim(1), src_w = sample.image.dim(2);
  const std::size_t dst_h = static_cast<std::size_t>(height), dst_w = static_cast<std::size_t>(width);
  if (src_h == dst_h && src_w == dst_w) return sample;
  const auto [fit_h, fit_w] = fitted_extent(src_h, src_w, height, width);
  Sample out = sample;
  out.image = Tensor<float>(Shape{3, dst_h, dst_w});
  out.mask = BinaryMask(dst_h, dst_w);
  out.ignore = BinaryMask(dst_h, dst_w, 1);
  for (std::size_t y = 0; y < fit_h; ++y) {
    const std::size_t sy = std::min(src_h - 1, (2 * y + 1) * src_h / (2 * fit_h));
    for (std::size_t x = 0; x < fit_w; ++x) {
      const std::size_t sx = std::min(src_w - 1, (2 * x + 1) * src_w / (2 * fit_w));
      for (std::size_t c = 0; c < 3; ++c)
        out.image[(c * dst_h + y) * dst_w + x] = sample.image[(c * src_h + sy) * src_w + sx];
      out.mask.at(y, x) = sample.mask.at(sy, sx);
      out.ignore.at(y, x) = sample.ignore.empty() ? 0 : sample.ignore.at(sy, sx);
    }
  }
  out.scene.reset();
  return out;
}

DatasetSplit split_dataset(const std::vector<Sample>& samples, const std::array<double, 3>& ratios,
                           std::uint64_t seed) {
  const double total_ratio = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(total_ratio - 1.0) > 1e-9 || *std::min_element(ratios.begin(), ratios.end()) < 0.0) {
    throw ConfigError("split ratios must be non-negative and sum to 1");
  }
  const std::size_t n = samples.size();
  // Largest-remainder targets.
  std::array<std::size_t, 3> target{};
  std::array<double, 3> remainder{};
  std::size_t assigned = 0;
  for (int s = 0; s < 3; ++s) {
    const double exact = ratios[s] * static_cast<double>(n);
    target[s] = static_cast<std::size_t>(std::floor(exact));
    remainder[s] = exact - std::floor(exact);
    assigned += target[s];
  }
  while (assigned < n) {
    const int s = static_cast<int>(std::max_element(remainder.begin(), remainder.end()) - remainder.begin());
    ++target[s];
    remainder[s] = -1.0;
    ++assigned;
  }
  if (target[0] == 0 || target[1] == 0 || target[2] == 0) {
    throw ConfigError("split of " + std::to_string(n) + " samples leaves an empty partition");
  }

  // Strata in template order, each shuffled, then dealt out sequentially so
  // that every split tracks its quota throughout.
  Rng rng(seed);
  std::vector<std::size_t> order;
  for (TemplateKind kind : {TemplateKind::attribute, TemplateKind::location, TemplateKind::relation,
                            TemplateKind::superlative, TemplateKind::external}) {
    std::vector<std::size_t> stratum;
    for (std::size_t i = 0; i < n; ++i)
      if (samples[i].kind == kind) stratum.push_back(i);
    std::shuffle(stratum.begin(), stratum.end(), rng);
    order.insert(order.end(), stratum.begin(), stratum.end());
  }
  DatasetSplit split;
  std::array<std::vector<std::size_t>*, 3> parts{&split.train, &split.val, &split.test};
  for (std::size_t k = 0; k < n; ++k) {
    int best = 0;
    double best_deficit = -1e300;
    for (int s = 0; s < 3; ++s) {
      const double deficit = static_cast<double>(target[s]) * static_cast<double>(k + 1) / static_cast<double>(n) -
                             static_cast<double>(parts[s]->size());
      if (parts[s]->size() < target[s] && deficit > best_deficit) {
        best_deficit = deficit;
        best = s;
      }
    }
    parts[best]->push_back(order[k]);
  }
  for (auto* part : parts) std::shuffle(part->begin(), part->end(), rng);
  return split;
}

}  // namespace bilingunet
