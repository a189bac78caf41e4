#ifndef CNNFIX_GRAPH_HPP_
#define CNNFIX_GRAPH_HPP_

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cnnfix/tensor.hpp"

namespace cnnfix {

enum class LayerKind {
  Input,
  Conv,
  ReLU,
  MaxPool,
  Flatten,
  FullyConnected,
  Softmax,
  Concat,
  Add,
  LstmCell,
};

std::string to_string(LayerKind kind);
std::optional<LayerKind> parse_layer_kind(const std::string& name);

struct PoolParams {
  int kernel = 2;
  int stride = 2;
  bool operator==(const PoolParams&) const = default;
};

// Gate weights are [units, input_size] for the *_x matrices and
// [units, units] for the recurrent *_m matrices.
struct LstmParams {
  int units = 0;
  int input_size = 0;
  int steps = 1;
  bool operator==(const LstmParams&) const = default;
};

// Where a weight tensor came from in the manifest.
struct WeightRef {
  std::string file;
  Shape shape;
};

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::Input;
  std::vector<std::string> inputs;

  Shape input_shape;  // Input
  ConvParams conv;    // Conv
  PoolParams pool;    // MaxPool
  int units = 0;      // FullyConnected output count
  LstmParams lstm;    // LstmCell

  // Resolved weights by role: Conv {kernel, bias}; FullyConnected
  // {matrix, bias}; LstmCell {W_ix, W_im, W_fx, W_fm, W_ox, W_om, W_cx, W_cm}
  // plus the optional {sequence} of inputs for steps 2..T.
  std::map<std::string, Tensor> weights;
  std::map<std::string, WeightRef> weight_refs;

  const Tensor& weight(const std::string& role) const;
  bool has_weight(const std::string& role) const { return weights.count(role) != 0; }
};

inline constexpr const char* kLstmGateRoles[] = {"W_ix", "W_im", "W_fx", "W_fm",
                                                 "W_ox", "W_om", "W_cx", "W_cm"};

// Topologically ordered, validated layer list. Immutable once built.
class NetworkGraph {
 public:
  NetworkGraph() = default;
  // Orders `layers` topologically and validates; throws ModelError on any
  // violation.
  NetworkGraph(std::string name, std::vector<LayerSpec> layers, int class_count);

  const std::string& name() const { return name_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  int num_layers() const { return static_cast<int>(layers_.size()); }
  int class_count() const { return class_count_; }

  const LayerSpec& layer(int index) const { return layers_.at(static_cast<std::size_t>(index)); }
  const LayerSpec& layer(const std::string& name) const;
  int index_of(const std::string& name) const;  // -1 when absent
  const LayerSpec& input_layer() const;
  const LayerSpec& output_layer() const { return layers_.back(); }

  // Layer indices of the inputs of layer `index`.
  std::vector<int> input_indices(int index) const;

  // Shape of every layer's output, in layer order.
  const std::vector<Shape>& shapes() const { return shapes_; }
  const Shape& shape_of(int index) const { return shapes_.at(static_cast<std::size_t>(index)); }

 private:
  std::string name_;
  std::vector<LayerSpec> layers_;
  std::map<std::string, int> index_;
  std::vector<Shape> shapes_;
  int class_count_ = 0;
};

// Structural checks over an unordered layer list. Empty result iff the list
// can form a NetworkGraph.
std::vector<std::string> validate_graph(const std::vector<LayerSpec>& layers);
inline std::vector<std::string> validate_graph(const NetworkGraph& graph) {
  return validate_graph(graph.layers());
}

// Shape per layer name, given an input shape. Layers must be topologically
// ordered. Throws ShapeError on any non-positive or mismatched dimension.
std::map<std::string, Shape> infer_shapes(const std::vector<LayerSpec>& layers,
                                          const Shape& input_shape);
std::map<std::string, Shape> infer_shapes(const NetworkGraph& graph, const Shape& input_shape);

// Reads a YAML manifest plus its raw little-endian f32 blobs (paths relative
// to the manifest). BatchNorm entries are folded into the Conv they follow.
NetworkGraph load_model(const std::filesystem::path& manifest_path);

// Writes manifest + blobs into `dir`; blob file names come from each layer's
// weight_refs (generated when absent). Output bytes depend only on the graph.
void save_model(const NetworkGraph& graph, const std::filesystem::path& dir,
                const std::string& manifest_name = "model.yaml");

// Raw blob helpers: little-endian f32, row-major, no header.
Tensor read_blob(const std::filesystem::path& path, const Shape& shape);
void write_blob(const std::filesystem::path& path, const Tensor& tensor);

// Folds y = gamma * (x - mean) / sqrt(var + eps) + beta into conv weights.
void fold_batchnorm(Tensor& kernel, Tensor& bias, std::span<const float> gamma,
                    std::span<const float> beta, std::span<const float> mean,
                    std::span<const float> var, float epsilon);

}  // namespace cnnfix

#endif  // CNNFIX_GRAPH_HPP_
