// SPDX-License-Identifier: Apache-2.0

#include "bilingunet/metrics.hpp"

#include <cstdio>
#include <numeric>

#include "bilingunet/errors.hpp"
#include "json.hpp"

namespace bilingunet {

namespace {

void check_same_shape(const BinaryMask& a, const BinaryMask& b, const char* what) {
  if (a.height != b.height || a.width != b.width) {
    throw DimensionError(std::string(what) + " is " + std::to_string(a.height) + "x" + std::to_string(a.width) +
                         " but expected " + std::to_string(b.height) + "x" + std::to_string(b.width));
  }
}

}  // namespace

IouCounts iou_counts(const BinaryMask& pred, const BinaryMask& gt, const BinaryMask& ignore) {
  check_same_shape(pred, gt, "prediction");
  if (!ignore.empty()) check_same_shape(ignore, gt, "ignore mask");
  IouCounts c;
  for (std::size_t i = 0; i < gt.bits.size(); ++i) {
    if (!ignore.empty() && ignore.bits[i]) continue;
    const bool p = pred.bits[i] != 0, g = gt.bits[i] != 0;
    c.intersection += p && g;
    c.union_ += p || g;
  }
  return c;
}

double per_example_iou(const BinaryMask& pred, const BinaryMask& gt, const BinaryMask& ignore) {
  const IouCounts c = iou_counts(pred, gt, ignore);
  if (c.union_ == 0) return 1.0;
  return static_cast<double>(c.intersection) / static_cast<double>(c.union_);
}

double overall_iou(const std::vector<BinaryMask>& preds, const std::vector<BinaryMask>& gts,
                   const std::vector<BinaryMask>& ignores) {
  return evaluate_masks(preds, gts, ignores).overall_iou;
}

double precision_at(const std::vector<double>& ious, double x) {
  if (ious.empty()) throw ContractError("precision over an empty list of IoUs");
  std::size_t above = 0;
  for (double v : ious) {
    if (!(v >= 0.0 && v <= 1.0)) throw ContractError("IoU outside [0,1]: " + std::to_string(v));
    above += v > x;
  }
  return static_cast<double>(above) / static_cast<double>(ious.size());
}

void EvalAccumulator::add(const BinaryMask& pred, const BinaryMask& gt, const BinaryMask& ignore) {
  const IouCounts c = iou_counts(pred, gt, ignore);
  total_intersection_ += c.intersection;
  total_union_ += c.union_;
  ious_.push_back(c.union_ == 0 ? 1.0 : static_cast<double>(c.intersection) / static_cast<double>(c.union_));
}

EvalReport EvalAccumulator::report() const {
  if (ious_.empty()) throw ContractError("evaluation over zero examples");
  EvalReport r;
  r.n = ious_.size();
  r.overall_iou = total_union_ == 0 ? 1.0
                                    : static_cast<double>(total_intersection_) / static_cast<double>(total_union_);
  r.mean_iou = std::accumulate(ious_.begin(), ious_.end(), 0.0) / static_cast<double>(r.n);
  for (std::size_t k = 0; k < kPrecisionThresholds.size(); ++k) r.prec[k] = precision_at(ious_, kPrecisionThresholds[k]);
  return r;
}

EvalReport evaluate_masks(const std::vector<BinaryMask>& preds, const std::vector<BinaryMask>& gts,
                          const std::vector<BinaryMask>& ignores) {
  if (preds.size() != gts.size() || (!ignores.empty() && ignores.size() != gts.size())) {
    throw ContractError("prediction, ground-truth and ignore lists differ in length");
  }
  EvalAccumulator acc;
  for (std::size_t i = 0; i < gts.size(); ++i) acc.add(preds[i], gts[i], ignores.empty() ? BinaryMask{} : ignores[i]);
  return acc.report();
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["overall_iou"] = overall_iou;
  j["mean_iou"] = mean_iou;
  for (std::size_t k = 0; k < kPrecisionThresholds.size(); ++k) {
    char key[16];
    std::snprintf(key, sizeof key, "prec@%.1f", kPrecisionThresholds[k]);
    j[key] = prec[k];
  }
  j["n"] = n;
  return j.dump();
}

}  // namespace bilingunet
