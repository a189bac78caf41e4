#ifndef CNNFIX_IO_HPP_
#define CNNFIX_IO_HPP_

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cnnfix/backtrack.hpp"
#include "cnnfix/postprocess.hpp"
#include "cnnfix/tensor.hpp"

namespace cnnfix {

// 8-bit image, interleaved channels (1 = gray, 3 = RGB), row-major.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<std::uint8_t> pixels;

  std::uint8_t& at(int x, int y, int ch = 0) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + ch];
  }
  std::uint8_t at(int x, int y, int ch = 0) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + ch];
  }
  bool operator==(const Image&) const = default;
};

// Binary netpbm: P5 (gray) and P6 (RGB), maxval 255.
Image read_image(const std::filesystem::path& path);
std::string encode_image(const Image& image);

// [C, H, W] tensor scaled to [0, 1]; and back, clamping.
Tensor image_to_tensor(const Image& image);
Image tensor_to_image(const Tensor& tensor);

Image heatmap_to_image(const HeatMap& map);
// Input rendered gray with fixations as red 3x3 dots.
Image fixation_overlay(const Image& input, std::span<const Pixel> points);
// Input rendered gray with the map blended into the red channel.
Image heatmap_overlay(const Image& input, const HeatMap& map);

struct PointFileHeader {
  std::string image;
  std::string start;
  std::string conv_spatial_mode;
  bool fallback = false;
};

std::string encode_points(const PointFileHeader& header, std::span<const Pixel> points);
std::vector<Pixel> read_points(const std::filesystem::path& path);

std::string encode_bbox(const BoundingBox& box);
BoundingBox read_bbox(const std::filesystem::path& path);

// One object per line: "class x_min y_min x_max y_max"; '#' starts a comment.
struct Annotation {
  int class_id = -1;
  std::vector<BoundingBox> boxes;
};
Annotation read_annotation(const std::filesystem::path& path);
std::string encode_annotation(const Annotation& annotation);

// Writes via a temporary sibling and rename, so readers never see a partial file.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace cnnfix

#endif  // CNNFIX_IO_HPP_
