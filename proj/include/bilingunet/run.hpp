// SPDX-License-Identifier: Apache-2.0
//
// Run configuration, training loop, evaluation, prediction, checkpoints and
// ablation sweeps.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "bilingunet/data.hpp"
#include "bilingunet/image_io.hpp"
#include "bilingunet/metrics.hpp"
#include "bilingunet/objective.hpp"
#include "bilingunet/segnet.hpp"
#include "json.hpp"

namespace bilingunet {

struct SynthSpec {
  std::size_t n = 6000;
  std::uint64_t seed = 1;
  std::vector<TemplateKind> templates{TemplateKind::attribute, TemplateKind::location,
                                      TemplateKind::relation, TemplateKind::superlative};

  friend bool operator==(const SynthSpec&, const SynthSpec&) = default;
};

struct RunConfig {
  NetConfig net;
  std::size_t max_tokens = 20;
  LossOptions loss;

  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 32;
  int epochs = 15;
  std::uint64_t seed = 0;

  std::string dataset;  // empty: synthesize from `synth`
  SynthSpec synth;
  std::array<double, 3> split{5.0 / 6.0, 1.0 / 12.0, 1.0 / 12.0};
  std::uint64_t split_seed = 7;

  bool freeze_backbone = false;
  bool freeze_embeddings = false;
  std::string embedding_file;
  std::size_t min_count = 1;

  std::string output_dir = "runs/default";
  double threshold = 0.5;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  // Flat object; unknown keys are rejected.
  static RunConfig from_json(const nlohmann::json& j);
};

RunConfig load_run_config(const std::filesystem::path& path);

struct Dataset {
  std::vector<Sample> samples;
  DatasetSplit split;
};

// Synthesizes or loads the data, fits it to the canvas and splits it.
Dataset prepare_dataset(const RunConfig& config);

const std::vector<std::size_t>& split_indices(const Dataset& data, const std::string& name);

struct Model {
  RunConfig config;
  Vocab vocab;
  ParamStore<float> params;
  int epoch = 0;
  double best_val = -1.0;
};

// Vocabulary from the training split only.
Vocab vocab_for(const RunConfig& config, const Dataset& data);
Model init_model(const RunConfig& config, const Vocab& vocab);

struct Batch {
  Tensor<float> images;  // [N,3,H,W]
  Tensor<float> target;  // [N,1,H,W]
  Tensor<float> ignore;  // [N,1,H,W]
  std::vector<TokenIds> ids;
};

Batch make_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices,
                 const Vocab& vocab, std::size_t max_tokens);

class Adam {
 public:
  Adam(const ParamStore<float>& params, double lr, double beta1, double beta2, double eps);
  void step(ParamStore<float>& params);
  long long steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long long t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

// Permutation of [0, n) used for the given epoch.
std::vector<std::size_t> epoch_order(std::uint64_t seed, int epoch, std::size_t n);

// One optimization step; returns the loss value.
double train_step(Model& model, Adam& adam, const Batch& batch, Rng& dropout_rng);

EvalReport evaluate(Model& model, const std::vector<Sample>& samples,
                    const std::vector<std::size_t>& indices, double threshold = 0.5);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  EvalReport val;
};

struct TrainResult {
  Model best;
  std::vector<double> step_losses;
  std::vector<EpochRecord> epochs;
};

struct TrainHooks {
  std::filesystem::path log_path;         // JSON lines; empty disables
  std::filesystem::path checkpoint_path;  // best-val checkpoint; empty disables
  std::function<void(const std::string&)> progress;
  std::optional<std::size_t> max_train_samples;  // truncate the training split
};

TrainResult train(const RunConfig& config, const Dataset& data, const TrainHooks& hooks = {});

inline constexpr std::uint32_t kCheckpointVersion = 1;

// "BLUN", u32 version, u64 header length, JSON header, float32 payloads.
// Written to a temporary file and renamed so a failed write leaves the
// previous checkpoint intact.
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

struct Prediction {
  BinaryMask mask;                   // at the input image size
  std::vector<float> probabilities;  // row-major, input image size
};

Prediction predict(Model& model, const Image8& image, const std::string& expression,
                   double threshold);

struct AblationVariant {
  std::string name;
  std::string label;
  std::function<void(RunConfig&)> apply;
};

const std::vector<AblationVariant>& ablation_variants();
const AblationVariant& find_variant(const std::string& name);

struct AblationRow {
  std::string variant;
  std::string label;
  std::uint64_t seed = 0;
  EvalReport test;
  EvalReport relation;  // relational-template subset of the test split
};

std::vector<AblationRow> ablate(const RunConfig& base, const std::vector<std::string>& variants,
                                const std::vector<std::uint64_t>& seeds, const TrainHooks& hooks = {});

std::string format_ablation_table(const std::vector<AblationRow>& rows);

}  // namespace bilingunet
