// SPDX-License-Identifier: Apache-2.0

#include "bilingunet/run.hpp"

#include <cblas.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace bilingunet {

namespace fs = std::filesystem;

Dataset prepare_dataset(const RunConfig& config) {
  config.validate();
  Dataset data;
  const int h = config.net.image_height, w = config.net.image_width;
  if (config.dataset.empty()) {
    SynthConfig sc;
    sc.height = h;
    sc.width = w;
    sc.templates = config.synth.templates;
    data.samples = generate_dataset(config.synth.n, config.synth.seed, sc);
  } else {
    data.samples = load_dataset(config.dataset);
    for (auto& s : data.samples) {
      if (s.image.dim(1) != static_cast<std::size_t>(h) || s.image.dim(2) != static_cast<std::size_t>(w)) {
        s = fit_to_canvas(s, h, w);
      }
    }
  }
  data.split = split_dataset(data.samples, config.split, config.split_seed);
  return data;
}

const std::vector<std::size_t>& split_indices(const Dataset& data, const std::string& name) {
  if (name == "train") return data.split.train;
  if (name == "val") return data.split.val;
  if (name == "test") return data.split.test;
  throw ConfigError("unknown split \"" + name + "\" (expected train, val or test)");
}

Vocab vocab_for(const RunConfig& config, const Dataset& data) {
  std::vector<std::string> corpus;
  corpus.reserve(data.split.train.size());
  for (std::size_t i : data.split.train) corpus.push_back(data.samples[i].expression);
  return build_vocab(corpus, config.min_count);
}

Model init_model(const RunConfig& config, const Vocab& vocab) {
  config.validate();
  Model model;
  model.config = config;
  model.vocab = vocab;
  std::seed_seq seq{static_cast<std::uint32_t>(config.seed), static_cast<std::uint32_t>(config.seed >> 32), 1u};
  Rng rng(seq);
  init_segnet_params(model.params, config.net, vocab.size(), rng);
  if (!config.embedding_file.empty()) load_embeddings(config.embedding_file, vocab, model.params);
  if (config.freeze_backbone) model.params.set_trainable_prefix("backbone/", false);
  if (config.freeze_embeddings) model.params.set_trainable_prefix("lstm/embedding", false);
  return model;
}

Batch make_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices,
                 const Vocab& vocab, std::size_t max_tokens) {
  if (indices.empty()) throw ContractError("empty batch");
  const Sample& first = samples.at(indices[0]);
  const std::size_t h = first.image.dim(1), w = first.image.dim(2), plane = h * w;
  const std::size_t n = indices.size();
  Batch b;
  b.images = Tensor<float>(Shape{n, 3, h, w});
  b.target = Tensor<float>(Shape{n, 1, h, w});
  b.ignore = Tensor<float>(Shape{n, 1, h, w});
  for (std::size_t k = 0; k < n; ++k) {
    const Sample& s = samples.at(indices[k]);
    if (s.image.dim(1) != h || s.image.dim(2) != w) throw DimensionError("batch mixes image sizes");
    std::copy(s.image.ptr(), s.image.ptr() + 3 * plane, b.images.ptr() + k * 3 * plane);
    for (std::size_t p = 0; p < plane; ++p) {
      b.target[k * plane + p] = s.mask.bits[p];
      b.ignore[k * plane + p] = s.ignore.empty() ? 0.0f : s.ignore.bits[p];
    }
    b.ids.push_back(tokenize(s.expression, vocab, max_tokens));
  }
  return b;
}

Adam::Adam(const ParamStore<float>& params, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& name : params.names()) {
    m_.emplace_back(params.get(name).numel(), 0.0f);
    v_.emplace_back(params.get(name).numel(), 0.0f);
  }
}

void Adam::step(ParamStore<float>& params) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const float b1 = static_cast<float>(beta1_), b2 = static_cast<float>(beta2_);
  const float step = static_cast<float>(lr_ / c1);
  const float inv_c2 = static_cast<float>(1.0 / c2);
  const float eps = static_cast<float>(eps_);
  const auto& names = params.names();
  for (std::size_t k = 0; k < names.size(); ++k) {
    Tensor<float>& p = params.get(names[k]);
    if (!p.requires_grad() || !p.has_grad()) continue;
    auto g = p.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    float* x = p.ptr();
    for (std::size_t i = 0; i < m.size(); ++i) {
      m[i] = b1 * m[i] + (1.0f - b1) * g[i];
      v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
      x[i] -= step * m[i] / (std::sqrt(v[i] * inv_c2) + eps);
    }
  }
}

std::vector<std::size_t> epoch_order(std::uint64_t seed, int epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), 3u};
  Rng rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

double train_step(Model& model, Adam& adam, const Batch& batch, Rng& dropout_rng) {
  model.params.zero_grad();
  Tape<float> tape;
  LossReport<float> report;
  {
    Tape<float>::Scope scope(tape);
    ForwardOutput<float> out = forward(batch.images, batch.ids, model.params, model.config.net, true, dropout_rng);
    report = multiscale_loss(out, batch.target, batch.ignore, model.config.loss);
  }
  const double loss = report.total.item();
  if (!std::isfinite(loss)) return loss;
  tape.backward(report.total);
  adam.step(model.params);
  return loss;
}

EvalReport evaluate(Model& model, const std::vector<Sample>& samples,
                    const std::vector<std::size_t>& indices, double threshold) {
  if (indices.empty()) throw ContractError("evaluation split is empty");
  constexpr std::size_t kChunk = 50;
  Rng unused(0);
  EvalAccumulator acc;
  for (std::size_t start = 0; start < indices.size(); start += kChunk) {
    const std::vector<std::size_t> chunk(indices.begin() + static_cast<std::ptrdiff_t>(start),
                                         indices.begin() + static_cast<std::ptrdiff_t>(std::min(indices.size(), start + kChunk)));
    const Batch b = make_batch(samples, chunk, model.vocab, model.config.max_tokens);
    const ForwardOutput<float> out = forward(b.images, b.ids, model.params, model.config.net, false, unused);
    const std::vector<BinaryMask> preds = predict_mask(out.probabilities, threshold);
    for (std::size_t k = 0; k < chunk.size(); ++k) {
      const Sample& s = samples[chunk[k]];
      acc.add(preds[k], s.mask, s.ignore);
    }
  }
  return acc.report();
}

namespace {

Model copy_model(const Model& m) {
  Model out;
  out.config = m.config;
  out.vocab = m.vocab;
  out.params = m.params.clone();
  out.epoch = m.epoch;
  out.best_val = m.best_val;
  return out;
}

nlohmann::ordered_json report_json(const EvalReport& r) { return nlohmann::ordered_json::parse(r.to_json()); }

}  // namespace

TrainResult train(const RunConfig& config, const Dataset& data, const TrainHooks& hooks) {
  config.validate();
  openblas_set_num_threads(1);
  const Vocab vocab = vocab_for(config, data);
  Model model = init_model(config, vocab);
  Adam adam(model.params, config.lr, config.beta1, config.beta2, config.adam_eps);
  std::seed_seq seq{static_cast<std::uint32_t>(config.seed), static_cast<std::uint32_t>(config.seed >> 32), 2u};
  Rng dropout_rng(seq);

  std::vector<std::size_t> train_idx = data.split.train;
  if (hooks.max_train_samples && *hooks.max_train_samples < train_idx.size()) {
    train_idx.resize(*hooks.max_train_samples);
  }
  if (train_idx.empty()) throw ConfigError("training split is empty");
  const std::vector<std::size_t>& val_idx = data.split.val;

  std::ofstream log;
  if (!hooks.log_path.empty()) {
    if (hooks.log_path.has_parent_path()) fs::create_directories(hooks.log_path.parent_path());
    log.open(hooks.log_path, std::ios::trunc);
    if (!log) throw IoError("cannot write metrics log " + hooks.log_path.string());
  }

  TrainResult result;
  const std::size_t bs = static_cast<std::size_t>(config.batch_size);
  long long step = 0;
  bool have_best = false;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const std::vector<std::size_t> order = epoch_order(config.seed, epoch, train_idx.size());
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      std::vector<std::size_t> idx;
      for (std::size_t k = start; k < std::min(order.size(), start + bs); ++k) idx.push_back(train_idx[order[k]]);
      const Batch batch = make_batch(data.samples, idx, model.vocab, config.max_tokens);
      const double loss = train_step(model, adam, batch, dropout_rng);
      ++step;
      if (!std::isfinite(loss)) {
        throw TrainingError("non-finite loss at step " + std::to_string(step) + " (epoch " +
                            std::to_string(epoch) + ")");
      }
      result.step_losses.push_back(loss);
      epoch_loss += loss;
      ++batches;
      if (log) {
        nlohmann::ordered_json rec{{"step", step}, {"epoch", epoch}, {"loss", loss}};
        log << rec.dump() << '\n';
      }
    }
    EpochRecord record{epoch, epoch_loss / static_cast<double>(batches), {}};
    const bool has_val = !val_idx.empty();
    if (has_val) record.val = evaluate(model, data.samples, val_idx, config.threshold);
    const double score = has_val ? record.val.overall_iou : -static_cast<double>(epoch);
    const bool improved = !have_best || score > result.best.best_val;
    if (improved) {
      model.epoch = epoch;
      model.best_val = score;
      result.best = copy_model(model);
      have_best = true;
      if (!hooks.checkpoint_path.empty()) save_checkpoint(result.best, hooks.checkpoint_path);
    }
    if (log) {
      nlohmann::ordered_json rec{{"step", step}, {"epoch", epoch}, {"train_loss", record.train_loss}};
      if (has_val) rec["val"] = report_json(record.val);
      rec["best"] = improved;
      log << rec.dump() << '\n';
      log.flush();
    }
    if (hooks.progress) {
      char line[160];
      std::snprintf(line, sizeof line, "epoch %d  train_loss %.4f  val_iou %.4f%s", epoch, record.train_loss,
                    has_val ? record.val.overall_iou : 0.0, improved ? "  *" : "");
      hooks.progress(line);
    }
    result.epochs.push_back(record);
  }
  return result;
}

Prediction predict(Model& model, const Image8& image, const std::string& expression, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must lie in (0, 1)");
  if (image.height == 0 || image.width == 0) throw IoError("empty input image");
  const NetConfig& net = model.config.net;
  Sample s;
  s.expression = expression;
  const std::size_t h = image.height, w = image.width, plane = h * w;
  s.image = Tensor<float>(Shape{3, h, w});
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c)
      s.image[c * plane + p] = image.pixels[p * image.channels + (image.channels == 3 ? c : 0)] / 255.0f;
  s.mask = BinaryMask(h, w);
  s.ignore = BinaryMask(h, w);
  const Sample fitted = fit_to_canvas(s, net.image_height, net.image_width);
  const Batch b = make_batch({fitted}, {0}, model.vocab, model.config.max_tokens);
  Rng unused(0);
  const ForwardOutput<float> out = forward(b.images, b.ids, model.params, net, false, unused);

  // Map each input pixel to its nearest fitted-canvas pixel.
  const auto [fit_h, fit_w] = fitted_extent(h, w, net.image_height, net.image_width);
  Prediction pred;
  pred.mask = BinaryMask(h, w);
  pred.probabilities.resize(plane);
  const std::size_t cw = static_cast<std::size_t>(net.image_width);
  for (std::size_t y = 0; y < h; ++y) {
    const std::size_t fy = std::min(fit_h - 1, (2 * y + 1) * fit_h / (2 * h));
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t fx = std::min(fit_w - 1, (2 * x + 1) * fit_w / (2 * w));
      const float p = out.probabilities[fy * cw + fx];
      pred.probabilities[y * w + x] = p;
      pred.mask.at(y, x) = p >= threshold ? 1 : 0;
    }
  }
  return pred;
}

const std::vector<AblationVariant>& ablation_variants() {
  static const std::vector<AblationVariant> variants{
      {"lingunet_1x1", "LingUNet (1x1)",
       [](RunConfig& c) {
         c.net.modulation = Modulation::expanding_only;
         c.net.text_kernel_spatial = 1;
       }},
      {"lingunet_3x3", "LingUNet (3x3)",
       [](RunConfig& c) {
         c.net.modulation = Modulation::expanding_only;
         c.net.text_kernel_spatial = 3;
       }},
      {"text_1x1", "1x1 Text Kernels",
       [](RunConfig& c) {
         c.net.modulation = Modulation::bidirectional;
         c.net.text_kernel_spatial = 1;
       }},
      {"no_dropout", "No Dropout", [](RunConfig& c) { c.net.dropout_p = 0.0; }},
      {"no_multiscale", "No Multi-Scale Loss", [](RunConfig& c) { c.loss.multiscale = false; }},
      {"full", "Our Model",
       [](RunConfig& c) {
         c.net.modulation = Modulation::bidirectional;
         c.net.text_kernel_spatial = 3;
       }},
  };
  return variants;
}

const AblationVariant& find_variant(const std::string& name) {
  for (const auto& v : ablation_variants())
    if (v.name == name) return v;
  std::string known;
  for (const auto& v : ablation_variants()) known += (known.empty() ? "" : ", ") + v.name;
  throw ConfigError("unknown ablation variant \"" + name + "\" (known: " + known + ")");
}

std::vector<AblationRow> ablate(const RunConfig& base, const std::vector<std::string>& variants,
                                const std::vector<std::uint64_t>& seeds, const TrainHooks& hooks) {
  if (variants.size() < 2) throw ConfigError("ablation needs at least two variants");
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  for (const auto& name : variants) find_variant(name);
  const Dataset data = prepare_dataset(base);
  std::vector<std::size_t> relation_idx;
  for (std::size_t i : data.split.test)
    if (data.samples[i].kind == TemplateKind::relation) relation_idx.push_back(i);

  std::vector<AblationRow> rows;
  for (std::uint64_t seed : seeds) {
    for (const auto& name : variants) {
      const AblationVariant& v = find_variant(name);
      RunConfig cfg = base;
      v.apply(cfg);
      cfg.seed = seed;
      cfg.output_dir = (fs::path(base.output_dir) / (name + "_seed" + std::to_string(seed))).string();
      TrainHooks h = hooks;
      if (!hooks.log_path.empty()) h.log_path = fs::path(cfg.output_dir) / "metrics.jsonl";
      if (!hooks.checkpoint_path.empty()) h.checkpoint_path = fs::path(cfg.output_dir) / "best.ckpt";
      if (hooks.progress) {
        h.progress = [&hooks, name, seed](const std::string& line) {
          hooks.progress(name + " seed " + std::to_string(seed) + ": " + line);
        };
      }
      TrainResult result = train(cfg, data, h);
      AblationRow row{v.name, v.label, seed, {}, {}};
      row.test = evaluate(result.best, data.samples, data.split.test, cfg.threshold);
      if (!relation_idx.empty()) row.relation = evaluate(result.best, data.samples, relation_idx, cfg.threshold);
      rows.push_back(row);
    }
  }
  return rows;
}

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof line, "%-22s %6s %9s %9s %9s %9s %9s %9s %9s\n", "Method", "seed", "prec@0.5",
                "prec@0.6", "prec@0.7", "prec@0.8", "prec@0.9", "IoU", "rel-IoU");
  out << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-22s %6llu %9.2f %9.2f %9.2f %9.2f %9.2f %9.2f %9.2f\n", r.label.c_str(),
                  static_cast<unsigned long long>(r.seed), 100 * r.test.prec[0], 100 * r.test.prec[1],
                  100 * r.test.prec[2], 100 * r.test.prec[3], 100 * r.test.prec[4], 100 * r.test.overall_iou,
                  100 * r.relation.overall_iou);
    out << line;
  }
  return out.str();
}

}  // namespace bilingunet
