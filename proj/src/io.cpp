#include "cnnfix/io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include "cnnfix/error.hpp"

namespace cnnfix {

namespace fs = std::filesystem;

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

namespace {

// Next header token of a netpbm file, skipping whitespace and comments.
std::string next_token(const std::string& s, std::size_t& pos) {
  while (pos < s.size()) {
    if (s[pos] == '#') {
      while (pos < s.size() && s[pos] != '\n') ++pos;
    } else if (std::isspace(static_cast<unsigned char>(s[pos]))) {
      ++pos;
    } else {
      break;
    }
  }
  const std::size_t start = pos;
  while (pos < s.size() && !std::isspace(static_cast<unsigned char>(s[pos])) && s[pos] != '#') ++pos;
  return s.substr(start, pos - start);
}

int parse_int(const std::string& token, const std::string& what) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(token, &used);
    if (used != token.size()) throw std::invalid_argument(token);
    return v;
  } catch (const std::exception&) {
    throw DataError(what + ": expected an integer, got '" + token + "'");
  }
}

}  // namespace

Image read_image(const fs::path& path) {
  const std::string bytes = read_file(path);
  std::size_t pos = 0;
  const std::string magic = next_token(bytes, pos);
  if (magic != "P5" && magic != "P6") {
    throw DataError(path.string() + ": not a binary PGM/PPM image (magic '" + magic + "')");
  }
  Image img;
  img.channels = magic == "P5" ? 1 : 3;
  img.width = parse_int(next_token(bytes, pos), path.string());
  img.height = parse_int(next_token(bytes, pos), path.string());
  const int maxval = parse_int(next_token(bytes, pos), path.string());
  if (img.width < 1 || img.height < 1 || maxval != 255) {
    throw DataError(path.string() + ": unsupported image header");
  }
  ++pos;  // single whitespace byte before the raster
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height * img.channels;
  if (bytes.size() < pos + n) throw DataError(path.string() + ": truncated raster");
  img.pixels.assign(bytes.begin() + static_cast<long>(pos), bytes.begin() + static_cast<long>(pos + n));
  return img;
}

std::string encode_image(const Image& img) {
  std::string out = (img.channels == 1 ? "P5\n" : "P6\n") + std::to_string(img.width) + " " +
                    std::to_string(img.height) + "\n255\n";
  out.append(img.pixels.begin(), img.pixels.end());
  return out;
}

Tensor image_to_tensor(const Image& img) {
  Tensor t({img.channels, img.height, img.width});
  for (int c = 0; c < img.channels; ++c) {
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) t.at(c, y, x) = static_cast<float>(img.at(x, y, c)) / 255.0f;
    }
  }
  return t;
}

Image tensor_to_image(const Tensor& t) {
  if (!t.is_spatial() || (t.dim(0) != 1 && t.dim(0) != 3)) {
    throw ShapeError("only [1,H,W] or [3,H,W] tensors convert to images, got " + shape_string(t.shape()));
  }
  Image img{t.dim(2), t.dim(1), t.dim(0), {}};
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * img.channels);
  for (int c = 0; c < img.channels; ++c) {
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        const float v = std::clamp(t.at(c, y, x), 0.0f, 1.0f);
        img.at(x, y, c) = static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
    }
  }
  return img;
}

Image heatmap_to_image(const HeatMap& map) {
  Image img{map.width, map.height, 1, std::vector<std::uint8_t>(map.values.size())};
  for (std::size_t i = 0; i < map.values.size(); ++i) {
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(map.values[i], 0.0f, 1.0f) * 255.0f));
  }
  return img;
}

namespace {

std::uint8_t gray_of(const Image& img, int x, int y) {
  if (img.channels == 1) return img.at(x, y);
  return static_cast<std::uint8_t>((img.at(x, y, 0) + img.at(x, y, 1) + img.at(x, y, 2)) / 3);
}

}  // namespace

Image fixation_overlay(const Image& input, std::span<const Pixel> points) {
  Image out{input.width, input.height, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(input.width) * input.height * 3)};
  for (int y = 0; y < input.height; ++y) {
    for (int x = 0; x < input.width; ++x) {
      const std::uint8_t g = gray_of(input, x, y);
      out.at(x, y, 0) = out.at(x, y, 1) = out.at(x, y, 2) = g;
    }
  }
  for (const Pixel& p : points) {
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        const int x = p.x + dx, y = p.y + dy;
        if (x < 0 || y < 0 || x >= out.width || y >= out.height) continue;
        out.at(x, y, 0) = 255;
        out.at(x, y, 1) = 0;
        out.at(x, y, 2) = 0;
      }
    }
  }
  return out;
}

Image heatmap_overlay(const Image& input, const HeatMap& map) {
  if (map.width != input.width || map.height != input.height) throw ShapeError("heat map and image sizes differ");
  Image out{input.width, input.height, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(input.width) * input.height * 3)};
  for (int y = 0; y < input.height; ++y) {
    for (int x = 0; x < input.width; ++x) {
      const double m = std::clamp(static_cast<double>(map.at(x, y)), 0.0, 1.0);
      const double g = gray_of(input, x, y);
      out.at(x, y, 0) = static_cast<std::uint8_t>(std::lround(g * (1.0 - m) + 255.0 * m));
      out.at(x, y, 1) = out.at(x, y, 2) = static_cast<std::uint8_t>(std::lround(g * (1.0 - m)));
    }
  }
  return out;
}

std::string encode_points(const PointFileHeader& h, std::span<const Pixel> points) {
  std::ostringstream os;
  os << "# cnnfix-fixations 1\n";
  os << "# image: " << h.image << "\n";
  os << "# start: " << h.start << "\n";
  os << "# conv_spatial_mode: " << h.conv_spatial_mode << "\n";
  os << "# fallback: " << (h.fallback ? "true" : "false") << "\n";
  os << "# points: " << points.size() << "\n";
  os << "x y\n";
  for (const Pixel& p : points) os << p.x << ' ' << p.y << '\n';
  return os.str();
}

std::vector<Pixel> read_points(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  std::vector<Pixel> out;
  bool header_row = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header_row && line == "x y") {
      header_row = true;
      continue;
    }
    std::istringstream ls(line);
    Pixel p;
    if (!(ls >> p.x >> p.y)) throw DataError(path.string() + ": bad point line '" + line + "'");
    out.push_back(p);
  }
  return out;
}

std::string encode_bbox(const BoundingBox& b) {
  return std::to_string(b.x_min) + " " + std::to_string(b.y_min) + " " + std::to_string(b.x_max) + " " +
         std::to_string(b.y_max) + "\n";
}

BoundingBox read_bbox(const fs::path& path) {
  std::istringstream in(read_file(path));
  BoundingBox b;
  if (!(in >> b.x_min >> b.y_min >> b.x_max >> b.y_max)) throw DataError(path.string() + ": bad box record");
  return b;
}

Annotation read_annotation(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  Annotation a;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    int cls = 0;
    BoundingBox b;
    std::string extra;
    if (!(ls >> cls >> b.x_min >> b.y_min >> b.x_max >> b.y_max) || (ls >> extra)) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected 'class x_min y_min x_max y_max'");
    }
    if (b.x_min > b.x_max || b.y_min > b.y_max) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": inverted box");
    }
    if (a.class_id >= 0 && cls != a.class_id) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": mixed classes in one image");
    }
    a.class_id = cls;
    a.boxes.push_back(b);
  }
  if (a.boxes.empty()) throw DataError(path.string() + ": no objects annotated");
  return a;
}

std::string encode_annotation(const Annotation& a) {
  std::string out;
  for (const BoundingBox& b : a.boxes) out += std::to_string(a.class_id) + " " + encode_bbox(b);
  return out;
}

}  // namespace cnnfix
