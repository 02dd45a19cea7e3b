// SPDX-License-Identifier: Apache-2.0

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "bilingunet/run.hpp"

namespace bilingunet {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads assume a little-endian host");

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'B', 'L', 'U', 'N'};

template <typename U>
void put(std::string& out, U value) {
  char bytes[sizeof(U)];
  std::memcpy(bytes, &value, sizeof(U));
  out.append(bytes, sizeof(U));
}

template <typename U>
U take(const std::string& in, std::size_t offset) {
  U value;
  std::memcpy(&value, in.data() + offset, sizeof(U));
  return value;
}

}  // namespace

void save_checkpoint(const Model& model, const fs::path& path) {
  nlohmann::ordered_json header;
  header["config"] = model.config.to_json();
  header["vocab"] = model.vocab.tokens();
  header["epoch"] = model.epoch;
  header["best_val"] = model.best_val;
  std::string payload;
  nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
  for (const auto& name : model.params.names()) {
    const Tensor<float>& t = model.params.get(name);
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", payload.size()},
                       {"trainable", t.requires_grad()}});
    payload.append(reinterpret_cast<const char*>(t.ptr()), t.numel() * sizeof(float));
  }
  nlohmann::ordered_json norms = nlohmann::ordered_json::array();
  for (const auto& name : model.params.batchnorm_names()) {
    const BatchNormState<float>& bn = model.params.batchnorm(name);
    norms.push_back({{"name", name}, {"channels", bn.channels()}, {"momentum", bn.momentum}, {"eps", bn.eps},
                     {"offset", payload.size()}});
    payload.append(reinterpret_cast<const char*>(bn.running_mean.data()), bn.channels() * sizeof(float));
    payload.append(reinterpret_cast<const char*>(bn.running_var.data()), bn.channels() * sizeof(float));
  }
  header["tensors"] = tensors;
  header["batchnorm"] = norms;
  const std::string header_text = header.dump();

  std::string bytes(kMagic, 4);
  put<std::uint32_t>(bytes, kCheckpointVersion);
  put<std::uint64_t>(bytes, header_text.size());
  bytes += header_text;
  bytes += payload;

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      out.close();
      std::error_code ec;
      fs::remove(tmp, ec);
      throw IoError("failed writing checkpoint " + tmp.string() + "; previous checkpoint kept");
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Model load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = "checkpoint " + path.string();
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError(where + " does not start with the BLUN magic");
  }
  if (bytes.size() < 16) throw FormatError(where + " is truncated");
  const auto version = take<std::uint32_t>(bytes, 4);
  if (version != kCheckpointVersion) {
    throw VersionError(where + " has format version " + std::to_string(version) + ", expected " +
                       std::to_string(kCheckpointVersion));
  }
  const auto header_len = take<std::uint64_t>(bytes, 8);
  if (header_len > bytes.size() - 16) throw FormatError(where + " is truncated (header)");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + " has a malformed header: " + e.what());
  }
  const std::size_t payload_start = 16 + header_len;
  const std::size_t payload_size = bytes.size() - payload_start;

  Model model;
  try {
    model.config = RunConfig::from_json(header.at("config"));
    model.vocab = Vocab(header.at("vocab").get<std::vector<std::string>>());
    model.epoch = header.at("epoch").get<int>();
    model.best_val = header.at("best_val").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + " header is incomplete: " + e.what());
  }

  // The structure implied by the config must match the stored directory.
  Rng rng(0);
  init_segnet_params(model.params, model.config.net, model.vocab.size(), rng);
  auto region = [&](std::size_t offset, std::size_t count, const std::string& name) {
    if (offset > payload_size || count * sizeof(float) > payload_size - offset) {
      throw FormatError(where + " is truncated (payload of " + name + ")");
    }
    return bytes.data() + payload_start + offset;
  };
  try {
    const auto& tensors = header.at("tensors");
    if (tensors.size() != model.params.names().size()) {
      throw VersionError(where + " holds " + std::to_string(tensors.size()) + " tensors but its config needs " +
                         std::to_string(model.params.names().size()));
    }
    for (const auto& entry : tensors) {
      const std::string name = entry.at("name").get<std::string>();
      if (!model.params.contains(name)) throw VersionError(where + " has unexpected tensor " + name);
      Tensor<float>& t = model.params.get(name);
      const Shape shape = entry.at("shape").get<Shape>();
      if (shape != t.shape()) {
        throw VersionError(where + ": tensor " + name + " is " + shape_to_string(shape) + " but its config needs " +
                           shape_to_string(t.shape()));
      }
      std::memcpy(t.ptr(), region(entry.at("offset").get<std::size_t>(), t.numel(), name), t.numel() * sizeof(float));
      t.set_requires_grad(entry.at("trainable").get<bool>());
    }
    const auto& norms = header.at("batchnorm");
    if (norms.size() != model.params.batchnorm_names().size()) {
      throw VersionError(where + " batchnorm count does not match its config");
    }
    for (const auto& entry : norms) {
      const std::string name = entry.at("name").get<std::string>();
      BatchNormState<float>& bn = model.params.batchnorm(name);
      const std::size_t c = entry.at("channels").get<std::size_t>();
      if (c != bn.channels()) throw VersionError(where + ": batchnorm " + name + " channel count differs");
      const char* src = region(entry.at("offset").get<std::size_t>(), 2 * c, name);
      std::memcpy(bn.running_mean.data(), src, c * sizeof(float));
      std::memcpy(bn.running_var.data(), src + c * sizeof(float), c * sizeof(float));
      bn.momentum = entry.at("momentum").get<float>();
      bn.eps = entry.at("eps").get<float>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + " has a malformed tensor directory: " + e.what());
  } catch (const ConfigError& e) {
    throw VersionError(where + " does not match its config: " + e.what());
  }
  return model;
}

}  // namespace bilingunet
