// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <fstream>
#include <map>

#include "bilingunet/run.hpp"

namespace bilingunet {

namespace {

using nlohmann::json;

template <typename V>
V read_value(const json& j, const std::string& key) {
  try {
    return j.get<V>();
  } catch (const json::exception&) {
    throw ConfigError("config key \"" + key + "\" has the wrong type");
  }
}

int read_int(const json& j, const std::string& key) {
  if (!j.is_number_integer()) throw ConfigError("config key \"" + key + "\" must be an integer");
  return j.get<int>();
}

std::size_t read_count(const json& j, const std::string& key) {
  if (!j.is_number_integer() || j.get<long long>() < 0) {
    throw ConfigError("config key \"" + key + "\" must be a non-negative integer");
  }
  return j.get<std::size_t>();
}

double read_number(const json& j, const std::string& key) {
  if (!j.is_number()) throw ConfigError("config key \"" + key + "\" must be a number");
  return j.get<double>();
}

bool read_bool(const json& j, const std::string& key) {
  if (!j.is_boolean()) throw ConfigError("config key \"" + key + "\" must be true or false");
  return j.get<bool>();
}

std::string to_string(AuxWeighting w) { return w == AuxWeighting::pixel_ratio ? "pixel_ratio" : "linear_ratio"; }

AuxWeighting weighting_from_string(const std::string& s) {
  if (s == "pixel_ratio") return AuxWeighting::pixel_ratio;
  if (s == "linear_ratio") return AuxWeighting::linear_ratio;
  throw ConfigError("loss_weighting must be pixel_ratio or linear_ratio, got \"" + s + "\"");
}

SynthSpec read_synth(const json& j) {
  if (!j.is_object()) throw ConfigError("config key \"synth\" must be an object");
  SynthSpec s;
  for (const auto& [key, value] : j.items()) {
    if (key == "n") {
      s.n = read_count(value, "synth.n");
    } else if (key == "seed") {
      s.seed = read_count(value, "synth.seed");
    } else if (key == "templates") {
      if (!value.is_array()) throw ConfigError("synth.templates must be a list");
      s.templates.clear();
      for (const auto& t : value) {
        const TemplateKind kind = template_from_string(read_value<std::string>(t, "synth.templates"));
        if (kind == TemplateKind::external) throw ConfigError("synth.templates cannot include \"external\"");
        s.templates.push_back(kind);
      }
    } else {
      throw ConfigError("unknown config key \"synth." + key + "\"");
    }
  }
  return s;
}

}  // namespace

void RunConfig::validate() const {
  net.validate();
  if (max_tokens < 1) throw ConfigError("max_tokens must be at least 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  double total = 0.0;
  for (double r : split) {
    if (!(r >= 0.0)) throw ConfigError("split ratios must be non-negative");
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
  if (dataset.empty()) {
    if (synth.n < 3) throw ConfigError("synth.n must be at least 3");
    if (synth.templates.empty()) throw ConfigError("synth.templates is empty");
  }
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must lie in (0, 1)");
}

nlohmann::ordered_json RunConfig::to_json() const {
  nlohmann::ordered_json j;
  j["depth"] = net.depth;
  j["channels"] = net.channels;
  j["image_height"] = net.image_height;
  j["image_width"] = net.image_width;
  j["backbone_levels"] = net.backbone_levels;
  j["backbone_channels"] = net.backbone_channels;
  j["embed_dim"] = net.embed_dim;
  j["hidden_size"] = net.hidden_size;
  j["conv_kernel"] = net.conv_kernel;
  j["conv_stride"] = net.conv_stride;
  j["conv_padding"] = net.conv_padding;
  j["text_kernel_spatial"] = net.text_kernel_spatial;
  j["text_kernel_mode"] = bilingunet::to_string(net.text_kernel_mode);
  j["modulation"] = bilingunet::to_string(net.modulation);
  j["dropout_p"] = net.dropout_p;
  j["max_tokens"] = max_tokens;
  j["multiscale"] = loss.multiscale;
  j["loss_weighting"] = to_string(loss.weighting);
  j["soft_targets"] = loss.soft_targets;
  j["lr"] = lr;
  j["beta1"] = beta1;
  j["beta2"] = beta2;
  j["adam_eps"] = adam_eps;
  j["batch_size"] = batch_size;
  j["epochs"] = epochs;
  j["seed"] = seed;
  j["dataset"] = dataset;
  nlohmann::ordered_json s;
  s["n"] = synth.n;
  s["seed"] = synth.seed;
  s["templates"] = nlohmann::ordered_json::array();
  for (TemplateKind t : synth.templates) s["templates"].push_back(bilingunet::to_string(t));
  j["synth"] = s;
  j["split"] = split;
  j["split_seed"] = split_seed;
  j["freeze_backbone"] = freeze_backbone;
  j["freeze_embeddings"] = freeze_embeddings;
  j["embedding_file"] = embedding_file;
  j["min_count"] = min_count;
  j["output_dir"] = output_dir;
  j["threshold"] = threshold;
  return j;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c;
  NetConfig& n = c.net;
  using Setter = std::function<void(const json&, const std::string&)>;
  const std::map<std::string, Setter> setters{
      {"depth", [&](const json& v, const std::string& k) { n.depth = read_int(v, k); }},
      {"channels", [&](const json& v, const std::string& k) { n.channels = read_int(v, k); }},
      {"image_size",
       [&](const json& v, const std::string& k) { n.image_height = n.image_width = read_int(v, k); }},
      {"image_height", [&](const json& v, const std::string& k) { n.image_height = read_int(v, k); }},
      {"image_width", [&](const json& v, const std::string& k) { n.image_width = read_int(v, k); }},
      {"backbone_levels", [&](const json& v, const std::string& k) { n.backbone_levels = read_int(v, k); }},
      {"backbone_channels", [&](const json& v, const std::string& k) { n.backbone_channels = read_int(v, k); }},
      {"embed_dim", [&](const json& v, const std::string& k) { n.embed_dim = read_int(v, k); }},
      {"hidden_size", [&](const json& v, const std::string& k) { n.hidden_size = read_int(v, k); }},
      {"conv_kernel", [&](const json& v, const std::string& k) { n.conv_kernel = read_int(v, k); }},
      {"conv_stride", [&](const json& v, const std::string& k) { n.conv_stride = read_int(v, k); }},
      {"conv_padding", [&](const json& v, const std::string& k) { n.conv_padding = read_int(v, k); }},
      {"text_kernel_spatial",
       [&](const json& v, const std::string& k) { n.text_kernel_spatial = read_int(v, k); }},
      {"text_kernel_mode",
       [&](const json& v, const std::string& k) {
         n.text_kernel_mode = kernel_mode_from_string(read_value<std::string>(v, k));
       }},
      {"modulation",
       [&](const json& v, const std::string& k) {
         n.modulation = modulation_from_string(read_value<std::string>(v, k));
       }},
      {"dropout_p", [&](const json& v, const std::string& k) { n.dropout_p = read_number(v, k); }},
      {"max_tokens", [&](const json& v, const std::string& k) { c.max_tokens = read_count(v, k); }},
      {"multiscale", [&](const json& v, const std::string& k) { c.loss.multiscale = read_bool(v, k); }},
      {"loss_weighting",
       [&](const json& v, const std::string& k) {
         c.loss.weighting = weighting_from_string(read_value<std::string>(v, k));
       }},
      {"soft_targets", [&](const json& v, const std::string& k) { c.loss.soft_targets = read_bool(v, k); }},
      {"lr", [&](const json& v, const std::string& k) { c.lr = read_number(v, k); }},
      {"beta1", [&](const json& v, const std::string& k) { c.beta1 = read_number(v, k); }},
      {"beta2", [&](const json& v, const std::string& k) { c.beta2 = read_number(v, k); }},
      {"adam_eps", [&](const json& v, const std::string& k) { c.adam_eps = read_number(v, k); }},
      {"batch_size", [&](const json& v, const std::string& k) { c.batch_size = read_int(v, k); }},
      {"epochs", [&](const json& v, const std::string& k) { c.epochs = read_int(v, k); }},
      {"seed", [&](const json& v, const std::string& k) { c.seed = read_count(v, k); }},
      {"dataset", [&](const json& v, const std::string& k) { c.dataset = read_value<std::string>(v, k); }},
      {"synth", [&](const json& v, const std::string&) { c.synth = read_synth(v); }},
      {"split",
       [&](const json& v, const std::string& k) {
         if (!v.is_array() || v.size() != 3) throw ConfigError("split must be a list of three ratios");
         for (std::size_t i = 0; i < 3; ++i) c.split[i] = read_number(v[i], k);
       }},
      {"split_seed", [&](const json& v, const std::string& k) { c.split_seed = read_count(v, k); }},
      {"freeze_backbone", [&](const json& v, const std::string& k) { c.freeze_backbone = read_bool(v, k); }},
      {"freeze_embeddings",
       [&](const json& v, const std::string& k) { c.freeze_embeddings = read_bool(v, k); }},
      {"embedding_file",
       [&](const json& v, const std::string& k) { c.embedding_file = read_value<std::string>(v, k); }},
      {"min_count", [&](const json& v, const std::string& k) { c.min_count = read_count(v, k); }},
      {"output_dir", [&](const json& v, const std::string& k) { c.output_dir = read_value<std::string>(v, k); }},
      {"threshold", [&](const json& v, const std::string& k) { c.threshold = read_number(v, k); }},
  };
  for (const auto& [key, value] : j.items()) {
    auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("unknown config key \"" + key + "\"");
    it->second(value, key);
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  return RunConfig::from_json(j);
}

}  // namespace bilingunet
