#ifndef CNNFIX_POSTPROCESS_HPP_
#define CNNFIX_POSTPROCESS_HPP_

#include <optional>
#include <span>
#include <vector>

#include "cnnfix/backtrack.hpp"

namespace cnnfix {

// Inclusive pixel box.
struct BoundingBox {
  int x_min = 0;
  int y_min = 0;
  int x_max = 0;
  int y_max = 0;

  bool contains(const Pixel& p) const { return p.x >= x_min && p.x <= x_max && p.y >= y_min && p.y <= y_max; }
  bool operator==(const BoundingBox&) const = default;
};

// Row-major [height, width] grid in [0, 1].
struct HeatMap {
  int width = 0;
  int height = 0;
  std::vector<float> values;

  float at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
  float max_value() const;
};

inline constexpr double kDefaultOutlierFraction = 0.05;
inline constexpr double kDefaultOutlierRadiusRatio = 0.10;  // of the image diagonal
inline constexpr double kDefaultSigmaRatio = 0.04;          // of the image diagonal

double image_diagonal(int width, int height);

// Keeps p iff at least min_fraction * |points| points (p included) lie within
// `radius` of p. Evaluated once against the original set.
std::vector<Pixel> remove_outliers(std::span<const Pixel> points, double min_fraction, double radius);

// Same filter with an absolute neighbour threshold.
std::vector<Pixel> remove_outliers_count(std::span<const Pixel> points, double min_neighbours, double radius);

// Unit impulses at the fixations blurred by an isotropic Gaussian truncated
// at ceil(3 sigma) per axis with zero padding, then divided by the maximum.
HeatMap heatmap_from_fixations(std::span<const Pixel> points, int width, int height, double sigma);

// Min/max rectangle; nullopt for an empty set.
std::optional<BoundingBox> bbox_from_fixations(std::span<const Pixel> points);

}  // namespace cnnfix

#endif  // CNNFIX_POSTPROCESS_HPP_
