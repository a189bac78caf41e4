#include "cnnfix/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <stdexcept>

#include "cnnfix/error.hpp"

namespace cnnfix {

namespace {

long area(const BoundingBox& b) {
  return static_cast<long>(b.x_max - b.x_min + 1) * static_cast<long>(b.y_max - b.y_min + 1);
}

double best_iou(const BoundingBox& box, std::span<const BoundingBox> truth) {
  double best = 0.0;
  for (const BoundingBox& t : truth) best = std::max(best, iou(box, t));
  return best;
}

}  // namespace

double iou(const BoundingBox& a, const BoundingBox& b) {
  const int ix0 = std::max(a.x_min, b.x_min), iy0 = std::max(a.y_min, b.y_min);
  const int ix1 = std::min(a.x_max, b.x_max), iy1 = std::min(a.y_max, b.y_max);
  if (ix1 < ix0 || iy1 < iy0) return 0.0;
  const long inter = static_cast<long>(ix1 - ix0 + 1) * static_cast<long>(iy1 - iy0 + 1);
  return static_cast<double>(inter) / static_cast<double>(area(a) + area(b) - inter);
}

bool localized(const LocalizationRecord& r) {
  if (r.ground_truth.empty()) throw DataError("localization record without ground-truth boxes");
  return r.predicted_class == r.true_class && r.predicted && best_iou(*r.predicted, r.ground_truth) >= kIouThreshold;
}

double localization_error(std::span<const LocalizationRecord> records) {
  if (records.empty()) throw DataError("localization error of an empty record set");
  const auto failures = std::count_if(records.begin(), records.end(),
                                      [](const LocalizationRecord& r) { return !localized(r); });
  return 100.0 * static_cast<double>(failures) / static_cast<double>(records.size());
}

double precision_at_eer(const HeatMap& map, std::span<const std::uint8_t> mask) {
  if (mask.size() != map.values.size()) {
    throw ShapeError("mask has " + std::to_string(mask.size()) + " pixels, heat map has " +
                     std::to_string(map.values.size()));
  }
  const auto target = std::count_if(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; });
  if (target == 0) throw DataError("ground-truth mask has no foreground");

  std::vector<std::size_t> order(map.values.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return map.values[a] > map.values[b]; });

  // Walk distinct values from the top; the positive count at threshold v is
  // the length of the prefix with values >= v.
  long chosen = 0;
  long chosen_tp = 0;
  long tp = 0;
  bool have = false;
  std::size_t i = 0;
  while (i < order.size() && map.values[order[i]] > 0.0f) {
    const float v = map.values[order[i]];
    while (i < order.size() && map.values[order[i]] == v) {
      if (mask[order[i]]) ++tp;
      ++i;
    }
    const long count = static_cast<long>(i);
    if (!have || std::labs(count - target) < std::labs(chosen - target)) {
      chosen = count;
      chosen_tp = tp;
      have = true;
    }
    if (count >= target) break;
  }
  if (!have) return 0.0;
  return static_cast<double>(chosen_tp) / static_cast<double>(chosen);
}

ProposalMetrics proposal_metrics(std::span<const LocalizationRecord> records) {
  if (records.empty()) throw DataError("proposal metrics of an empty record set");
  struct Counts {
    long truth = 0, truth_hit = 0, proposals = 0, proposals_hit = 0;
    int images = 0;
  };
  std::map<int, Counts> by_class;
  for (const LocalizationRecord& r : records) {
    Counts& c = by_class[r.true_class];
    ++c.images;
    c.truth += static_cast<long>(r.ground_truth.size());
    if (!r.predicted) continue;
    ++c.proposals;
    bool any = false;
    for (const BoundingBox& t : r.ground_truth) {
      if (iou(*r.predicted, t) >= kIouThreshold) {
        ++c.truth_hit;
        any = true;
      }
    }
    if (any) ++c.proposals_hit;
  }
  ProposalMetrics m;
  for (const auto& [cls, c] : by_class) {
    ClassProposalMetrics pc;
    pc.images = c.images;
    pc.recall = c.truth ? static_cast<double>(c.truth_hit) / static_cast<double>(c.truth) : 0.0;
    pc.precision = c.proposals ? static_cast<double>(c.proposals_hit) / static_cast<double>(c.proposals) : 0.0;
    m.mean_recall += pc.recall;
    m.mean_precision += pc.precision;
    m.per_class[cls] = pc;
  }
  m.mean_recall /= static_cast<double>(by_class.size());
  m.mean_precision /= static_cast<double>(by_class.size());
  return m;
}

}  // namespace cnnfix
