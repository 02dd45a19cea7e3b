// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "bilingunet/mask.hpp"

namespace bilingunet {

inline constexpr std::array<double, 5> kPrecisionThresholds{0.5, 0.6, 0.7, 0.8, 0.9};

struct IouCounts {
  std::size_t intersection = 0;
  std::size_t union_ = 0;
};

// Counts over non-ignored pixels; `ignore` may be empty.
IouCounts iou_counts(const BinaryMask& pred, const BinaryMask& gt, const BinaryMask& ignore = {});

// Both-empty (zero union) is defined as a perfect match.
double per_example_iou(const BinaryMask& pred, const BinaryMask& gt, const BinaryMask& ignore = {});

// Pooled: total intersection over total union.
double overall_iou(const std::vector<BinaryMask>& preds, const std::vector<BinaryMask>& gts,
                   const std::vector<BinaryMask>& ignores = {});

// Fraction of IoUs strictly greater than x.
double precision_at(const std::vector<double>& ious, double x);

struct EvalReport {
  double overall_iou = 0.0;
  double mean_iou = 0.0;
  std::array<double, 5> prec{};  // aligned with kPrecisionThresholds
  std::size_t n = 0;

  std::string to_json() const;
};

// Incremental accumulation so evaluation need not hold every mask.
class EvalAccumulator {
 public:
  void add(const BinaryMask& pred, const BinaryMask& gt, const BinaryMask& ignore = {});
  std::size_t size() const { return ious_.size(); }
  EvalReport report() const;

 private:
  std::size_t total_intersection_ = 0;
  std::size_t total_union_ = 0;
  std::vector<double> ious_;
};

EvalReport evaluate_masks(const std::vector<BinaryMask>& preds, const std::vector<BinaryMask>& gts,
                          const std::vector<BinaryMask>& ignores = {});

}  // namespace bilingunet
