#include "cnnfix/postprocess.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cnnfix/error.hpp"

namespace cnnfix {

float HeatMap::max_value() const {
  return values.empty() ? 0.0f : *std::max_element(values.begin(), values.end());
}

double image_diagonal(int width, int height) {
  return std::sqrt(static_cast<double>(width) * width + static_cast<double>(height) * height);
}

std::vector<Pixel> remove_outliers_count(std::span<const Pixel> points, double min_neighbours, double radius) {
  if (!(radius > 0.0)) throw std::invalid_argument("outlier radius must be positive");
  const double r2 = radius * radius;
  std::vector<Pixel> kept;
  for (const Pixel& p : points) {
    std::size_t n = 0;
    for (const Pixel& q : points) {
      const double dx = p.x - q.x, dy = p.y - q.y;
      if (dx * dx + dy * dy <= r2) ++n;
    }
    if (static_cast<double>(n) >= min_neighbours) kept.push_back(p);
  }
  return kept;
}

std::vector<Pixel> remove_outliers(std::span<const Pixel> points, double min_fraction, double radius) {
  if (!(min_fraction >= 0.0 && min_fraction <= 1.0)) {
    throw std::invalid_argument("outlier fraction must lie in [0, 1]");
  }
  return remove_outliers_count(points, min_fraction * static_cast<double>(points.size()), radius);
}

HeatMap heatmap_from_fixations(std::span<const Pixel> points, int width, int height, double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("heat-map sigma must be positive");
  if (width < 1 || height < 1) throw ShapeError("heat map needs a positive image size");
  HeatMap map{width, height, std::vector<float>(static_cast<std::size_t>(width) * height, 0.0f)};
  if (points.empty()) return map;

  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  for (int d = -radius; d <= radius; ++d) {
    kernel[static_cast<std::size_t>(d + radius)] = std::exp(-(d * d) / (2.0 * sigma * sigma));
  }

  std::vector<double> impulses(map.values.size(), 0.0);
  for (const Pixel& p : points) {
    if (p.x < 0 || p.x >= width || p.y < 0 || p.y >= height) {
      throw IndexError("fixation (" + std::to_string(p.x) + "," + std::to_string(p.y) + ") outside the image");
    }
    impulses[static_cast<std::size_t>(p.y) * width + p.x] += 1.0;
  }

  // Separable: rows, then columns.
  std::vector<double> rows(impulses.size(), 0.0);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      double acc = 0.0;
      for (int d = -radius; d <= radius; ++d) {
        const int sx = x + d;
        if (sx < 0 || sx >= width) continue;
        acc += impulses[static_cast<std::size_t>(y) * width + sx] * kernel[static_cast<std::size_t>(d + radius)];
      }
      rows[static_cast<std::size_t>(y) * width + x] = acc;
    }
  }
  std::vector<double> full(impulses.size(), 0.0);
  double peak = 0.0;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      double acc = 0.0;
      for (int d = -radius; d <= radius; ++d) {
        const int sy = y + d;
        if (sy < 0 || sy >= height) continue;
        acc += rows[static_cast<std::size_t>(sy) * width + x] * kernel[static_cast<std::size_t>(d + radius)];
      }
      full[static_cast<std::size_t>(y) * width + x] = acc;
      peak = std::max(peak, acc);
    }
  }
  for (std::size_t i = 0; i < full.size(); ++i) map.values[i] = static_cast<float>(full[i] / peak);
  return map;
}

std::optional<BoundingBox> bbox_from_fixations(std::span<const Pixel> points) {
  if (points.empty()) return std::nullopt;
  BoundingBox b{points[0].x, points[0].y, points[0].x, points[0].y};
  for (const Pixel& p : points) {
    b.x_min = std::min(b.x_min, p.x);
    b.y_min = std::min(b.y_min, p.y);
    b.x_max = std::max(b.x_max, p.x);
    b.y_max = std::max(b.y_max, p.y);
  }
  return b;
}

}  // namespace cnnfix
