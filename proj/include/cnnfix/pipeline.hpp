#ifndef CNNFIX_PIPELINE_HPP_
#define CNNFIX_PIPELINE_HPP_

#include <optional>
#include <string>
#include <vector>

#include "cnnfix/backtrack.hpp"
#include "cnnfix/forward.hpp"
#include "cnnfix/postprocess.hpp"

namespace cnnfix {

struct PipelineOptions {
  BacktrackConfig backtrack;
  std::optional<StartNeuron> start;  // default: predicted class
  double outlier_fraction = kDefaultOutlierFraction;
  double outlier_radius_ratio = kDefaultOutlierRadiusRatio;
  double sigma_ratio = kDefaultSigmaRatio;
};

// Single forward pass followed by backtracking and outlier removal.
struct Localization {
  ActivationTrace trace;
  StartNeuron start;
  int predicted_class = -1;  // -1 when the model has no vector output
  FixationResult fixations;
  std::vector<Pixel> filtered;
  std::optional<BoundingBox> box;
  int width = 0;
  int height = 0;
};

Localization localize(const NetworkGraph& graph, const Tensor& image, const PipelineOptions& options = {});
HeatMap localization_heatmap(const Localization& loc, const PipelineOptions& options = {});

// "layer:NAME coord:C,X,Y" (X = column, Y = row) or "layer:NAME coord:I" for
// vector layers. Throws std::invalid_argument on malformed text.
StartNeuron parse_start_selector(const std::string& text);
std::string format_start(const StartNeuron& start);

}  // namespace cnnfix

#endif  // CNNFIX_PIPELINE_HPP_
