#include "cnnfix/pipeline.hpp"

#include <sstream>
#include <stdexcept>

namespace cnnfix {

Localization localize(const NetworkGraph& graph, const Tensor& image, const PipelineOptions& options) {
  Localization loc;
  loc.trace = run_forward(graph, image);
  loc.height = image.dim(1);
  loc.width = image.dim(2);
  const Tensor& out = loc.trace.output(graph.num_layers() - 1);
  if (out.rank() == 1) loc.predicted_class = argmax_lowest(out.data());
  loc.start = options.start ? *options.start : predicted_start(graph, loc.trace);
  loc.fixations = compute_fixations(graph, loc.trace, loc.start, options.backtrack);
  const double radius = options.outlier_radius_ratio * image_diagonal(loc.width, loc.height);
  loc.filtered = remove_outliers(loc.fixations.pixels, options.outlier_fraction, radius);
  loc.box = bbox_from_fixations(loc.filtered);
  return loc;
}

HeatMap localization_heatmap(const Localization& loc, const PipelineOptions& options) {
  const double sigma = options.sigma_ratio * image_diagonal(loc.width, loc.height);
  return heatmap_from_fixations(loc.filtered, loc.width, loc.height, sigma);
}

StartNeuron parse_start_selector(const std::string& text) {
  std::istringstream in(text);
  std::string token;
  StartNeuron s;
  bool have_layer = false, have_coord = false;
  while (in >> token) {
    if (token.rfind("layer:", 0) == 0) {
      s.layer = token.substr(6);
      have_layer = !s.layer.empty();
    } else if (token.rfind("coord:", 0) == 0) {
      std::vector<int> v;
      std::istringstream cs(token.substr(6));
      std::string part;
      while (std::getline(cs, part, ',')) {
        std::size_t used = 0;
        int n = 0;
        try {
          n = std::stoi(part, &used);
        } catch (const std::exception&) {
          used = 0;
        }
        if (part.empty() || used != part.size()) throw std::invalid_argument("bad coordinate '" + token + "'");
        v.push_back(n);
      }
      if (v.size() == 1) {
        s.coord = {v[0], 0, 0};
      } else if (v.size() == 3) {
        s.coord = {v[0], v[2], v[1]};
      } else {
        throw std::invalid_argument("coordinate needs 1 or 3 components: '" + token + "'");
      }
      have_coord = true;
    } else {
      throw std::invalid_argument("unexpected start selector token '" + token + "'");
    }
  }
  if (!have_layer || !have_coord) throw std::invalid_argument("start selector needs layer:NAME and coord:...");
  return s;
}

std::string format_start(const StartNeuron& s) {
  return "layer:" + s.layer + " coord:" + std::to_string(s.coord.c) + "," + std::to_string(s.coord.x) + "," +
         std::to_string(s.coord.y);
}

}  // namespace cnnfix
