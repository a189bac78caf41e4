#ifndef CNNFIX_EVAL_HPP_
#define CNNFIX_EVAL_HPP_

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "cnnfix/postprocess.hpp"

namespace cnnfix {

inline constexpr double kIouThreshold = 0.5;

// One evaluated image.
struct LocalizationRecord {
  int predicted_class = -1;
  int true_class = -1;
  std::optional<BoundingBox> predicted;  // nullopt counts as a miss
  std::vector<BoundingBox> ground_truth;
};

// Intersection over union with inclusive pixel areas.
double iou(const BoundingBox& a, const BoundingBox& b);

// Whether the record is a localization success: correct class and IoU >= 0.5
// against at least one ground-truth instance.
bool localized(const LocalizationRecord& r);

// Percentage of failed records (100 - localization accuracy).
double localization_error(std::span<const LocalizationRecord> records);

// Pixel precision at the threshold whose positive count is nearest to the
// ground-truth positive count (higher threshold on ties). Only strictly
// positive map values are eligible thresholds; an all-zero map scores 0.
// `mask` is row-major with the same size as the map.
double precision_at_eer(const HeatMap& map, std::span<const std::uint8_t> mask);

struct ClassProposalMetrics {
  double recall = 0.0;
  double precision = 0.0;
  int images = 0;
};

struct ProposalMetrics {
  double mean_recall = 0.0;
  double mean_precision = 0.0;
  std::map<int, ClassProposalMetrics> per_class;
};

// One proposal per record, grouped by the record's true class. Recall counts
// ground-truth boxes hit at IoU >= 0.5; precision counts proposals that hit
// some ground-truth box of their image.
ProposalMetrics proposal_metrics(std::span<const LocalizationRecord> records);

}  // namespace cnnfix

#endif  // CNNFIX_EVAL_HPP_
