// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// non-zero when any selected criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "bilingunet/grad_check.hpp"
#include "bilingunet/run.hpp"
#include "oracles.hpp"

using namespace bilingunet;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Budget {
  std::size_t c6_samples = 6000;
  int c6_epochs = 15;
  std::vector<std::uint64_t> c6_seeds{1, 2, 3};
  fs::path work_dir = fs::temp_directory_path() / "bilingunet_acceptance";
};

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(const char* pattern, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, pattern, args...);
  return buf;
}

void note(const std::string& line) {
  std::printf("    %s\n", line.c_str());
  std::fflush(stdout);
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// C1 ------------------------------------------------------------------------

Outcome gradient_fidelity() {
  const auto start = Clock::now();
  NetConfig c;
  c.depth = 2;
  c.channels = 8;
  c.image_height = 32;
  c.image_width = 32;
  c.backbone_channels = 8;
  c.embed_dim = 6;
  c.hidden_size = 8;
  c.dropout_p = 0.0;
  ParamStore<double> p;
  Rng rng(21);
  init_segnet_params(p, c, 12, rng);
  std::mt19937_64 g(22);
  const Tensor<double> images = oracle::random_tensor({2, 3, 32, 32}, g, 0.0, 1.0);
  const std::vector<TokenIds> ids{{2, 3, 4, 5, 6, 7}, {7, 6, 5, 4, 3, 2}};
  Tensor<double> target(Shape{2, 1, 32, 32}), ignore(Shape{2, 1, 32, 32});
  for (std::size_t i = 0; i < target.numel(); ++i) {
    const std::size_t y = (i / 32) % 32, x = i % 32;
    target[i] = (y > 8 && y < 20 && x > 6 && x < 18) ? 1.0 : 0.0;
  }
  auto f = [&] {
    Rng unused(0);
    return multiscale_loss(forward(images, ids, p, c, true, unused), target, ignore).total;
  };
  GradCheckOptions opts;
  opts.coords_per_tensor = 4;
  opts.seed = 23;
  const GradCheckResult r = grad_check(f, p, opts);
  const double secs = seconds_since(start);
  Outcome o;
  o.pass = r.max_relative_error < 1e-3 && secs < 120.0;
  o.detail = fmt("max relative error %.3g over %zu coordinates (worst %s[%zu]), %.1f s", r.max_relative_error,
                 r.coordinates_checked, r.worst_param.c_str(), r.worst_index, secs);
  return o;
}

// C2 ------------------------------------------------------------------------

Outcome oracle_equivalence() {
  std::mt19937_64 g(31);
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(g); };
  constexpr int kTrials = 120;
  double conv_err = 0.0, deconv_err = 0.0, bn_err = 0.0, bce_err = 0.0, down_err = 0.0;
  long iou_mismatch = 0, prec_mismatch = 0;

  for (int t = 0; t < kTrials; ++t) {
    const int k = 2 * pick(0, 2) + 1, stride = pick(1, 2), pad = pick(0, k / 2);
    const std::size_t n = pick(1, 2), ci = pick(1, 3), co = pick(1, 3), h = pick(k, k + 5), w = pick(k, k + 5);
    const Tensor<double> x = oracle::random_tensor({n, ci, h, w}, g);
    const Tensor<double> kc = oracle::random_tensor({co, ci, std::size_t(k), std::size_t(k)}, g);
    conv_err = std::max(conv_err, max_abs_diff(conv2d(x, kc, stride, pad), oracle::conv2d(x, kc, stride, pad)));

    const int out_pad = pick(0, stride - 1);
    const Tensor<double> kt = oracle::random_tensor({ci, co, std::size_t(k), std::size_t(k)}, g);
    deconv_err = std::max(deconv_err, max_abs_diff(conv_transpose2d(x, kt, stride, pad, out_pad),
                                                   oracle::conv_transpose2d(x, kt, stride, pad, out_pad)));

    Tensor<double> gamma = oracle::random_tensor({ci}, g, 0.5, 1.5), beta = oracle::random_tensor({ci}, g);
    BatchNormState<double> state(ci);
    const Tensor<double> xb = oracle::random_tensor({n + 1, ci, h, w}, g, -2.0, 3.0);
    bn_err = std::max(bn_err, max_abs_diff(batchnorm2d(xb, gamma, beta, state, true),
                                           oracle::batchnorm(xb, {gamma.data().begin(), gamma.data().end()},
                                                             {beta.data().begin(), beta.data().end()}, state.eps)));

    Tensor<double> prob = oracle::random_tensor({n, 1, h, w}, g, 0.0, 1.0), tgt(prob.shape()), ig(prob.shape());
    std::vector<int> ignore(prob.numel());
    for (std::size_t i = 0; i < prob.numel(); ++i) {
      tgt[i] = static_cast<double>(g() % 2);
      ignore[i] = i > 0 && g() % 5 == 0;
      ig[i] = ignore[i];
    }
    bce_err = std::max(bce_err, std::abs(bce_loss(prob, tgt, ig).item() -
                                         oracle::bce({prob.data().begin(), prob.data().end()},
                                                     {tgt.data().begin(), tgt.data().end()}, ignore)));

    const int oh = 1 << pick(0, 3), ow = 1 << pick(0, 3);
    Tensor<double> m(Shape{1, 1, 8, 8});
    for (auto& v : m.data()) v = static_cast<double>(g() % 2);
    const Tensor<double> d = downscale_mask(m, std::size_t(oh), std::size_t(ow));
    const auto ref = oracle::block_mean({m.data().begin(), m.data().end()}, 8, 8, oh, ow);
    for (std::size_t i = 0; i < ref.size(); ++i) down_err = std::max(down_err, std::abs(d[i] - ref[i]));

    std::vector<BinaryMask> preds, gts, igs;
    std::vector<double> ious;
    long ti = 0, tu = 0;
    for (std::size_t e = 0; e < n + 2; ++e) {
      preds.push_back(oracle::random_mask(h, w, 0.4, g));
      gts.push_back(oracle::random_mask(h, w, t % 9 == 0 ? 0.0 : 0.4, g));
      igs.push_back(oracle::random_mask(h, w, 0.15, g));
      const oracle::Counts c = oracle::iou_counts(preds.back(), gts.back(), igs.back());
      ti += c.inter;
      tu += c.uni;
      const double iou = c.uni == 0 ? 1.0 : static_cast<double>(c.inter) / static_cast<double>(c.uni);
      ious.push_back(iou);
      iou_mismatch += per_example_iou(preds.back(), gts.back(), igs.back()) != iou;
    }
    const double pooled = tu == 0 ? 1.0 : static_cast<double>(ti) / static_cast<double>(tu);
    iou_mismatch += overall_iou(preds, gts, igs) != pooled;
    for (double x_th : kPrecisionThresholds) {
      std::size_t above = 0;
      for (double v : ious) above += v > x_th;
      prec_mismatch += precision_at(ious, x_th) != static_cast<double>(above) / static_cast<double>(ious.size());
    }
  }
  Outcome o;
  const double worst = std::max({conv_err, deconv_err, bn_err, bce_err, down_err});
  o.pass = worst < 1e-10 && iou_mismatch == 0 && prec_mismatch == 0;
  o.detail = fmt("%d instances per op; max abs error conv %.2g, deconv %.2g, batchnorm %.2g, bce %.2g, downscale "
                 "%.2g; IoU mismatches %ld, prec mismatches %ld",
                 kTrials, conv_err, deconv_err, bn_err, bce_err, down_err, iou_mismatch, prec_mismatch);
  return o;
}

// C3 ------------------------------------------------------------------------

Outcome shape_range_invariants() {
  std::mt19937_64 g(41);
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(g); };
  int failures = 0;
  std::string first_failure;
  for (int trial = 0; trial < 50; ++trial) {
    NetConfig c;
    c.depth = pick(1, 4);
    c.backbone_levels = pick(1, 2);
    const int factor = 1 << (c.depth + c.backbone_levels);
    c.image_height = factor * pick(1, 2);
    c.image_width = factor * pick(1, 2);
    c.channels = 4 * pick(1, 3);
    c.backbone_channels = pick(2, 8);
    c.embed_dim = pick(2, 8);
    c.hidden_size = c.depth * pick(1, 4);
    c.text_kernel_spatial = pick(0, 1) ? 3 : 1;
    c.text_kernel_mode = pick(0, 1) ? KernelMode::full : KernelMode::depthwise;
    c.modulation = pick(0, 1) ? Modulation::bidirectional : Modulation::expanding_only;
    c.dropout_p = pick(0, 1) ? 0.2 : 0.0;
    c.validate();
    ParamStore<float> p;
    Rng rng(static_cast<std::uint64_t>(trial));
    init_segnet_params(p, c, 15, rng);
    // Two or more images keep training-mode batch statistics defined at 1x1 extents.
    const std::size_t n = pick(2, 3);
    Tensor<float> img(Shape{n, 3, std::size_t(c.image_height), std::size_t(c.image_width)});
    for (auto& v : img.data()) v = std::uniform_real_distribution<float>(0.0f, 1.0f)(g);
    std::vector<TokenIds> ids;
    for (std::size_t b = 0; b < n; ++b) {
      TokenIds t(pick(1, 8));
      for (auto& id : t) id = pick(2, 14);
      ids.push_back(t);
    }
    const ForwardOutput<float> out = forward(img, ids, p, c, trial % 2 == 0, rng);
    bool ok = out.probabilities.shape() == Shape{n, 1, img.dim(2), img.dim(3)} &&
              out.aux.size() == static_cast<std::size_t>(c.depth);
    for (float v : out.probabilities.data()) ok = ok && v > 0.0f && v < 1.0f;
    if (!ok) {
      ++failures;
      if (first_failure.empty())
        first_failure = fmt(" (first failure: depth %d, %dx%d)", c.depth, c.image_height, c.image_width);
    }
  }
  return {failures == 0, fmt("%d of 50 random configs violate shape, range or aux count%s", failures,
                             first_failure.c_str())};
}

// C4 ------------------------------------------------------------------------

Outcome single_batch_overfit() {
  const auto start = Clock::now();
  RunConfig cfg;
  cfg.seed = 3;
  SynthConfig sc;
  const std::vector<Sample> samples = generate_dataset(4, 51, sc);
  std::vector<std::string> corpus;
  for (const auto& s : samples) corpus.push_back(s.expression);
  Model model = init_model(cfg, build_vocab(corpus, 1));
  Adam adam(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
  const Batch batch = make_batch(samples, {0, 1, 2, 3}, model.vocab, cfg.max_tokens);
  Rng dropout_rng(52);
  double last = 0.0;
  for (int step = 0; step < 300; ++step) last = train_step(model, adam, batch, dropout_rng);
  Rng unused(0);
  const ForwardOutput<float> out = forward(batch.images, batch.ids, model.params, cfg.net, false, unused);
  const double bce = bce_loss(out.probabilities, batch.target, batch.ignore).item();
  const double secs = seconds_since(start);
  return {bce < 0.05 && secs < 600.0,
          fmt("mean BCE %.4f after 300 steps (last training loss %.4f), %.1f s", bce, last, secs)};
}

// C5 ------------------------------------------------------------------------

Outcome desk_learning(const Budget& budget) {
  const auto start = Clock::now();
  RunConfig cfg;  // desk defaults: m=3, ch=32, 64x64, 15 epochs, 6000 samples split 5000/500/500
  cfg.output_dir = (budget.work_dir / "desk").string();
  const Dataset data = prepare_dataset(cfg);
  TrainHooks hooks;
  hooks.log_path = fs::path(cfg.output_dir) / "metrics.jsonl";
  hooks.checkpoint_path = fs::path(cfg.output_dir) / "best.ckpt";
  hooks.progress = [](const std::string& line) { note(line); };
  TrainResult r = train(cfg, data, hooks);
  const EvalReport test = evaluate(r.best, data.samples, data.split.test, cfg.threshold);
  const double secs = seconds_since(start);

  std::vector<std::size_t> red_circle;
  for (std::size_t i : data.split.test)
    if (data.samples[i].expression == "red circle") red_circle.push_back(i);
  if (!red_circle.empty()) {
    const EvalReport rc = evaluate(r.best, data.samples, red_circle, cfg.threshold);
    note(fmt("\"red circle\" test samples: %zu, overall IoU %.3f", red_circle.size(), rc.overall_iou));
  }
  return {test.overall_iou >= 0.80 && secs <= 3600.0,
          fmt("train %zu / test %zu samples, best epoch %d, test overall IoU %.4f, %.0f s", data.split.train.size(),
              data.split.test.size(), r.best.epoch, test.overall_iou, secs)};
}

// C6 ------------------------------------------------------------------------

Outcome ablation_ordering(const Budget& budget) {
  const auto start = Clock::now();
  RunConfig base;
  base.synth.n = budget.c6_samples;
  base.epochs = budget.c6_epochs;
  base.output_dir = (budget.work_dir / "ablation").string();
  const std::vector<std::string> variants{"full", "text_1x1", "lingunet_3x3", "lingunet_1x1"};
  int holding = 0;
  std::string per_seed;
  for (std::uint64_t seed : budget.c6_seeds) {
    TrainHooks hooks;
    hooks.progress = [](const std::string& line) { note(line); };
    const std::vector<AblationRow> rows = ablate(base, variants, {seed}, hooks);
    std::map<std::string, double> rel;
    for (const auto& row : rows) rel[row.variant] = row.relation.overall_iou;
    const bool ok = rel["full"] > rel["text_1x1"] && rel["text_1x1"] > rel["lingunet_1x1"] &&
                    rel["full"] - rel["lingunet_1x1"] >= 0.05 && rel["lingunet_3x3"] > rel["lingunet_1x1"];
    holding += ok;
    note(fmt("seed %llu relation IoU: full %.4f, text_1x1 %.4f, lingunet_3x3 %.4f, lingunet_1x1 %.4f -> %s",
             static_cast<unsigned long long>(seed), rel["full"], rel["text_1x1"], rel["lingunet_3x3"],
             rel["lingunet_1x1"], ok ? "ordered" : "not ordered"));
    per_seed += ok ? "+" : "-";
  }
  const int needed = (2 * static_cast<int>(budget.c6_seeds.size()) + 2) / 3;
  return {holding >= needed,
          fmt("ordering holds for %d of %zu seeds [%s] (%zu samples, %d epochs), %.0f s", holding,
              budget.c6_seeds.size(), per_seed.c_str(), budget.c6_samples, budget.c6_epochs, seconds_since(start))};
}

// C7 ------------------------------------------------------------------------

Outcome multiscale_off_is_plain_bce() {
  RunConfig cfg;
  SynthConfig sc;
  const std::vector<Sample> samples = generate_dataset(6, 71, sc);
  std::vector<std::string> corpus;
  for (const auto& s : samples) corpus.push_back(s.expression);
  Model model = init_model(cfg, build_vocab(corpus, 1));
  const Batch b = make_batch(samples, {0, 1, 2, 3, 4, 5}, model.vocab, cfg.max_tokens);
  Rng rng(72);
  const ForwardOutput<float> out = forward(b.images, b.ids, model.params, cfg.net, true, rng);
  LossOptions off = cfg.loss;
  off.multiscale = false;
  const float with_off = multiscale_loss(out, b.target, b.ignore, off).total.item();
  const float plain = bce_loss(out.probabilities, b.target, b.ignore).item();
  const float with_on = multiscale_loss(out, b.target, b.ignore, cfg.loss).total.item();
  const bool bitwise = std::memcmp(&with_off, &plain, sizeof plain) == 0;
  return {bitwise && with_on != plain,
          fmt("multiscale off %.9g, plain BCE %.9g (%s), multiscale on %.9g", with_off, plain,
              bitwise ? "bitwise equal" : "differ", with_on)};
}

// C8 ------------------------------------------------------------------------

Outcome determinism_and_persistence(const Budget& budget) {
  RunConfig cfg;
  cfg.synth.n = 360;
  cfg.epochs = 2;
  cfg.seed = 81;
  const Dataset data = prepare_dataset(cfg);
  const TrainResult a = train(cfg, data);
  const TrainResult b = train(cfg, data);
  double worst = a.step_losses.size() == b.step_losses.size() ? 0.0 : INFINITY;
  for (std::size_t i = 0; i < std::min(a.step_losses.size(), b.step_losses.size()); ++i)
    worst = std::max(worst, std::abs(a.step_losses[i] - b.step_losses[i]));

  const fs::path path = budget.work_dir / "determinism.ckpt";
  save_checkpoint(a.best, path);
  Model loaded = load_checkpoint(path);
  Model original = a.best;
  const Batch batch = make_batch(data.samples, data.split.test, original.vocab, cfg.max_tokens);
  Rng unused(0);
  const ForwardOutput<float> p = forward(batch.images, batch.ids, original.params, cfg.net, false, unused);
  const ForwardOutput<float> q = forward(batch.images, batch.ids, loaded.params, cfg.net, false, unused);
  const bool bitwise = p.probabilities.numel() == q.probabilities.numel() &&
                       std::memcmp(p.probabilities.ptr(), q.probabilities.ptr(),
                                   p.probabilities.numel() * sizeof(float)) == 0;
  return {worst <= 1e-12 && bitwise,
          fmt("%zu logged losses, max difference %.3g; checkpoint forward outputs %s", a.step_losses.size(), worst,
              bitwise ? "bitwise equal" : "differ")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite"};
  Budget budget;
  std::string only;
  app.add_option("--only", only, "Comma-separated criteria to run, e.g. C1,C7 (default: all)");
  app.add_option("--c6-samples", budget.c6_samples, "Synthetic samples for the ablation criterion");
  app.add_option("--c6-epochs", budget.c6_epochs, "Epochs per ablation run");
  app.add_option("--c6-seeds", budget.c6_seeds, "Training seeds for the ablation criterion")->delimiter(',');
  app.add_option("--work-dir", budget.work_dir, "Scratch directory for checkpoints and logs");
  CLI11_PARSE(app, argc, argv);

  std::set<std::string> selected;
  {
    std::stringstream ss(only);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) selected.insert(item);
  }
  fs::create_directories(budget.work_dir);

  const std::vector<std::pair<std::string, std::pair<std::string, std::function<Outcome()>>>> criteria{
      {"C1", {"gradient fidelity", gradient_fidelity}},
      {"C2", {"oracle equivalence", oracle_equivalence}},
      {"C3", {"shape and range invariants", shape_range_invariants}},
      {"C4", {"single-batch overfit", single_batch_overfit}},
      {"C5", {"desk-scale learning", [&] { return desk_learning(budget); }}},
      {"C6", {"ablation ordering", [&] { return ablation_ordering(budget); }}},
      {"C7", {"multi-scale loss off equals plain BCE", multiscale_off_is_plain_bce}},
      {"C8", {"determinism and persistence", [&] { return determinism_and_persistence(budget); }}},
  };
  int failed = 0;
  std::ofstream report(budget.work_dir / "acceptance_report.txt", std::ios::trunc);
  for (const auto& [id, entry] : criteria) {
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome o;
    try {
      o = entry.second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    const std::string line = fmt("%s %s %s: ", o.pass ? "PASS" : "FAIL", id.c_str(), entry.first.c_str()) + o.detail;
    std::printf("%s\n", line.c_str());
    std::fflush(stdout);
    report << line << '\n' << std::flush;
  }
  return failed == 0 ? 0 : 1;
}
