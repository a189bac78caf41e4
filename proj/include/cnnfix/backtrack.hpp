#ifndef CNNFIX_BACKTRACK_HPP_
#define CNNFIX_BACKTRACK_HPP_

#include <compare>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cnnfix/forward.hpp"
#include "cnnfix/graph.hpp"
#include "cnnfix/tensor.hpp"

namespace cnnfix {

// Neuron coordinate within one layer's output. Spatial layers use
// (channel, row y, column x); vector layers store the flat index in `c` and
// leave y = x = 0. Ordering is lexicographic, which is also memory order.
struct Coord {
  int c = 0;
  int y = 0;
  int x = 0;
  auto operator<=>(const Coord&) const = default;
};

// Image-plane location. Ordered row-major (y, then x).
struct Pixel {
  int x = 0;
  int y = 0;
  bool operator==(const Pixel&) const = default;
  auto operator<=>(const Pixel& o) const {
    if (auto cmp = y <=> o.y; cmp != 0) return cmp;
    return x <=> o.x;
  }
};

// Discriminative locations at one layer: sorted, no duplicates.
class FixationSet {
 public:
  FixationSet() = default;
  FixationSet(std::string layer, std::vector<Coord> coords, bool fallback = false);

  const std::string& layer() const { return layer_; }
  const std::vector<Coord>& coords() const { return coords_; }
  std::size_t size() const { return coords_.size(); }
  bool empty() const { return coords_.empty(); }
  bool contains(const Coord& c) const;

  // True when an empty positive-evidence set was replaced by the single
  // argmax contribution somewhere on the way to this set.
  bool fallback_used() const { return fallback_; }

  void merge(const FixationSet& other);

  bool operator==(const FixationSet&) const = default;

 private:
  std::string layer_;
  std::vector<Coord> coords_;
  bool fallback_ = false;
};

void sort_unique(std::vector<Coord>& coords);

enum class ConvSpatialMode { SameLocation, ArgmaxLocation };
enum class EmptySetFallback { Argmax, Abort };

struct BacktrackConfig {
  ConvSpatialMode conv_spatial_mode = ConvSpatialMode::SameLocation;
  EmptySetFallback empty_set_fallback = EmptySetFallback::Argmax;
};

std::string to_string(ConvSpatialMode mode);
std::optional<ConvSpatialMode> parse_conv_spatial_mode(const std::string& s);

// Fully connected layer: every input j with A_prev[j] * W[i][j] > 0 for some
// selected output i. Bias is never evidence.
FixationSet backtrack_fc(const FixationSet& selected, const Tensor& weights,
                         std::span<const float> prev_activation,
                         const BacktrackConfig& cfg = {}, std::string prev_layer = {});

// Per-fixation result of a conv step; exposed for tests and diagnostics.
struct ConvChoice {
  int channel = 0;
  int y = 0;  // absolute input row
  int x = 0;  // absolute input column
  std::vector<double> channel_contribution;
};

ConvChoice choose_conv_source(const Coord& out, const Tensor& weights, const Tensor& prev_activation,
                              const ConvParams& params, ConvSpatialMode mode);

FixationSet backtrack_conv(const FixationSet& selected, const Tensor& weights,
                           const Tensor& prev_activation, const ConvParams& params,
                           const BacktrackConfig& cfg = {}, std::string prev_layer = {});

// Max pooling: each window maps to its maximum, first in row-major order on ties.
FixationSet backtrack_pool(const FixationSet& selected, const Tensor& prev_activation, int kernel,
                           int stride, std::string prev_layer = {});

FixationSet backtrack_relu(const FixationSet& selected, std::string prev_layer = {});

// Flat index n -> (n / (H*W), (n % (H*W)) / W, n % W).
FixationSet backtrack_flatten(const FixationSet& selected, const Shape& spatial_shape,
                              std::string prev_layer = {});

// One set per concatenated input, channels rebased to that input.
std::vector<FixationSet> backtrack_concat(const FixationSet& selected, const ChannelRangeTable& ranges,
                                          const std::vector<std::string>& input_layers = {});

// Residual sum: a location follows the skip input when
// skip[c,y,x] >= delta[c,y,x], otherwise the delta input.
std::pair<FixationSet, FixationSet> backtrack_add(const FixationSet& selected, const Tensor& skip,
                                                  const Tensor& delta, std::string skip_layer = {},
                                                  std::string delta_layer = {});

// Traces units of m_T back through the gates of every unrolled step to
// indices of the step-1 input (the image embedding).
FixationSet backtrack_lstm(const LstmTrace& trace, const LstmWeights& weights,
                           std::span<const int> start_units, const BacktrackConfig& cfg = {},
                           std::string embedding_layer = {});
// Starts from argmax(m_T).
FixationSet backtrack_lstm(const LstmTrace& trace, const LstmWeights& weights,
                           const BacktrackConfig& cfg = {}, std::string embedding_layer = {});

struct StartNeuron {
  std::string layer;
  Coord coord;
};

struct FixationResult {
  std::vector<Pixel> pixels;               // sorted, unique, channels merged
  std::vector<FixationSet> layers;         // per graph layer, empty if unreached
  bool fallback_used = false;
};

// Predicted class at the output layer (argmax of scores, or of the output
// vector when there is no Softmax head).
StartNeuron predicted_start(const NetworkGraph& graph, const ActivationTrace& trace);

FixationResult compute_fixations(const NetworkGraph& graph, const ActivationTrace& trace,
                                 const StartNeuron& start, const BacktrackConfig& cfg = {});

}  // namespace cnnfix

#endif  // CNNFIX_BACKTRACK_HPP_
