#include "cnnfix/graph.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "cnnfix/error.hpp"

namespace cnnfix {

namespace fs = std::filesystem;

namespace {

constexpr std::array<std::pair<LayerKind, const char*>, 10> kKindNames{{
    {LayerKind::Input, "Input"},
    {LayerKind::Conv, "Conv"},
    {LayerKind::ReLU, "ReLU"},
    {LayerKind::MaxPool, "MaxPool"},
    {LayerKind::Flatten, "Flatten"},
    {LayerKind::FullyConnected, "FullyConnected"},
    {LayerKind::Softmax, "Softmax"},
    {LayerKind::Concat, "Concat"},
    {LayerKind::Add, "Add"},
    {LayerKind::LstmCell, "LstmCell"},
}};

std::string in_quotes(const std::string& s) { return "'" + s + "'"; }

// Expected weight shapes for a layer, given the shape of its (first) input.
// Conv input channels are only known once the input shape is.
std::map<std::string, Shape> expected_weight_shapes(const LayerSpec& l, const Shape* in) {
  std::map<std::string, Shape> out;
  switch (l.kind) {
    case LayerKind::Conv:
      if (in && in->size() == 3) {
        out["kernel"] = {l.conv.out_channels, (*in)[0], l.conv.kernel, l.conv.kernel};
      }
      out["bias"] = {l.conv.out_channels};
      break;
    case LayerKind::FullyConnected:
      if (in && in->size() == 1) out["matrix"] = {l.units, (*in)[0]};
      out["bias"] = {l.units};
      break;
    case LayerKind::LstmCell:
      for (const char* role : kLstmGateRoles) {
        const bool recurrent = role[3] == 'm';
        out[role] = {l.lstm.units, recurrent ? l.lstm.units : l.lstm.input_size};
      }
      if (l.has_weight("sequence")) out["sequence"] = {l.lstm.steps - 1, l.lstm.input_size};
      break;
    default:
      break;
  }
  return out;
}

std::pair<int, int> arity(LayerKind kind) {
  switch (kind) {
    case LayerKind::Input: return {0, 0};
    case LayerKind::Add: return {2, 2};
    case LayerKind::Concat: return {2, 1 << 20};
    default: return {1, 1};
  }
}

Shape infer_layer_shape(const LayerSpec& l, const std::vector<Shape>& in) {
  auto need_rank = [&](const Shape& s, std::size_t rank) {
    if (s.size() != rank) {
      throw ShapeError("layer " + in_quotes(l.name) + " (" + to_string(l.kind) + ") needs a rank-" +
                       std::to_string(rank) + " input, got " + shape_string(s));
    }
  };
  auto check_weights = [&]() {
    for (const auto& [role, shape] : expected_weight_shapes(l, in.empty() ? nullptr : &in[0])) {
      auto it = l.weights.find(role);
      if (it == l.weights.end()) {
        throw ShapeError("layer " + in_quotes(l.name) + " is missing weight " + in_quotes(role));
      }
      if (it->second.shape() != shape) {
        throw ShapeError("layer " + in_quotes(l.name) + " weight " + in_quotes(role) + " has shape " +
                         shape_string(it->second.shape()) + ", expected " + shape_string(shape));
      }
    }
  };

  switch (l.kind) {
    case LayerKind::Input:
      need_rank(l.input_shape, 3);
      for (int d : l.input_shape) {
        if (d < 1) throw ShapeError("input shape " + shape_string(l.input_shape) + " is not positive");
      }
      return l.input_shape;
    case LayerKind::Conv: {
      need_rank(in[0], 3);
      if (l.conv.out_channels < 1) throw ShapeError("layer " + in_quotes(l.name) + " needs out_channels >= 1");
      check_weights();
      return {l.conv.out_channels, conv_output_size(in[0][1], l.conv.kernel, l.conv.stride, l.conv.pad),
              conv_output_size(in[0][2], l.conv.kernel, l.conv.stride, l.conv.pad)};
    }
    case LayerKind::ReLU:
      return in[0];
    case LayerKind::MaxPool:
      need_rank(in[0], 3);
      return {in[0][0], conv_output_size(in[0][1], l.pool.kernel, l.pool.stride, 0),
              conv_output_size(in[0][2], l.pool.kernel, l.pool.stride, 0)};
    case LayerKind::Flatten:
      return {static_cast<int>(shape_size(in[0]))};
    case LayerKind::FullyConnected:
      need_rank(in[0], 1);
      if (l.units < 1) throw ShapeError("layer " + in_quotes(l.name) + " needs units >= 1");
      check_weights();
      return {l.units};
    case LayerKind::Softmax:
      need_rank(in[0], 1);
      return in[0];
    case LayerKind::Concat: {
      int channels = 0;
      for (const Shape& s : in) {
        need_rank(s, 3);
        if (s[1] != in[0][1] || s[2] != in[0][2]) {
          throw ShapeError("concat " + in_quotes(l.name) + " spatial mismatch: " +
                           shape_string(in[0]) + " vs " + shape_string(s));
        }
        channels += s[0];
      }
      return {channels, in[0][1], in[0][2]};
    }
    case LayerKind::Add:
      if (in[0] != in[1]) {
        throw ShapeError("add " + in_quotes(l.name) + " shape mismatch: " + shape_string(in[0]) +
                         " vs " + shape_string(in[1]));
      }
      return in[0];
    case LayerKind::LstmCell:
      need_rank(in[0], 1);
      if (l.lstm.units < 1 || l.lstm.steps < 1) {
        throw ShapeError("lstm " + in_quotes(l.name) + " needs units >= 1 and steps >= 1");
      }
      if (in[0][0] != l.lstm.input_size) {
        throw ShapeError("lstm " + in_quotes(l.name) + " input_size " + std::to_string(l.lstm.input_size) +
                         " but input has " + std::to_string(in[0][0]) + " elements");
      }
      check_weights();
      return {l.lstm.units};
  }
  throw ShapeError("unknown layer kind");
}

// Kahn ordering that prefers the original position among ready layers.
// Returns nullopt when a cycle (or dangling input) prevents a full order.
std::optional<std::vector<int>> topo_order(const std::vector<LayerSpec>& layers) {
  std::map<std::string, int> idx;
  for (int i = 0; i < static_cast<int>(layers.size()); ++i) idx.emplace(layers[static_cast<std::size_t>(i)].name, i);
  std::vector<int> pending(layers.size(), 0);
  std::vector<std::vector<int>> consumers(layers.size());
  for (int i = 0; i < static_cast<int>(layers.size()); ++i) {
    for (const std::string& in : layers[static_cast<std::size_t>(i)].inputs) {
      auto it = idx.find(in);
      if (it == idx.end()) return std::nullopt;
      consumers[static_cast<std::size_t>(it->second)].push_back(i);
      ++pending[static_cast<std::size_t>(i)];
    }
  }
  std::set<int> ready;
  for (int i = 0; i < static_cast<int>(layers.size()); ++i) {
    if (pending[static_cast<std::size_t>(i)] == 0) ready.insert(i);
  }
  std::vector<int> order;
  while (!ready.empty()) {
    const int i = *ready.begin();
    ready.erase(ready.begin());
    order.push_back(i);
    for (int c : consumers[static_cast<std::size_t>(i)]) {
      if (--pending[static_cast<std::size_t>(c)] == 0) ready.insert(c);
    }
  }
  if (order.size() != layers.size()) return std::nullopt;
  return order;
}

}  // namespace

std::string to_string(LayerKind kind) {
  for (const auto& [k, name] : kKindNames) {
    if (k == kind) return name;
  }
  return "?";
}

std::optional<LayerKind> parse_layer_kind(const std::string& name) {
  for (const auto& [k, n] : kKindNames) {
    if (name == n) return k;
  }
  return std::nullopt;
}

const Tensor& LayerSpec::weight(const std::string& role) const {
  auto it = weights.find(role);
  if (it == weights.end()) throw ModelError("layer " + in_quotes(name) + " has no weight " + in_quotes(role));
  return it->second;
}

std::vector<std::string> validate_graph(const std::vector<LayerSpec>& layers) {
  std::vector<std::string> v;
  std::map<std::string, int> idx;
  int input_count = 0;
  for (int i = 0; i < static_cast<int>(layers.size()); ++i) {
    const LayerSpec& l = layers[static_cast<std::size_t>(i)];
    if (l.name.empty()) v.push_back("layer #" + std::to_string(i) + " has an empty name");
    if (!idx.emplace(l.name, i).second) v.push_back("duplicate layer name " + in_quotes(l.name));
    if (l.kind == LayerKind::Input) ++input_count;
  }
  if (input_count != 1) {
    v.push_back("graph needs exactly one Input layer, found " + std::to_string(input_count));
  }
  bool dangling = false;
  for (const LayerSpec& l : layers) {
    const auto [lo, hi] = arity(l.kind);
    const int n = static_cast<int>(l.inputs.size());
    if (n < lo || n > hi) {
      v.push_back(to_string(l.kind) + " layer " + in_quotes(l.name) + " has " + std::to_string(n) +
                  " inputs, expected " +
                  (lo == hi ? std::to_string(lo) : "at least " + std::to_string(lo)));
    }
    for (const std::string& in : l.inputs) {
      if (!idx.count(in)) {
        v.push_back("layer " + in_quotes(l.name) + " references unknown input " + in_quotes(in));
        dangling = true;
      }
    }
  }
  if (!v.empty()) return v;
  if (dangling) return v;

  const auto order = topo_order(layers);
  if (!order) {
    v.push_back("graph contains a cycle");
    return v;
  }

  std::map<std::string, std::optional<Shape>> shapes;
  for (int i : *order) {
    const LayerSpec& l = layers[static_cast<std::size_t>(i)];
    std::vector<Shape> in;
    bool known = true;
    for (const std::string& name : l.inputs) {
      const auto& s = shapes[name];
      if (!s) {
        known = false;
        break;
      }
      in.push_back(*s);
    }
    if (!known) {
      shapes[l.name] = std::nullopt;
      continue;
    }
    try {
      shapes[l.name] = infer_layer_shape(l, in);
    } catch (const std::exception& e) {
      v.push_back(e.what());
      shapes[l.name] = std::nullopt;
    }
  }
  return v;
}

std::map<std::string, Shape> infer_shapes(const std::vector<LayerSpec>& layers,
                                          const Shape& input_shape) {
  std::map<std::string, Shape> out;
  for (const LayerSpec& l : layers) {
    if (l.kind == LayerKind::Input) {
      LayerSpec with_shape = l;
      with_shape.input_shape = input_shape;
      out[l.name] = infer_layer_shape(with_shape, {});
      continue;
    }
    std::vector<Shape> in;
    for (const std::string& name : l.inputs) {
      auto it = out.find(name);
      if (it == out.end()) {
        throw ShapeError("layer " + in_quotes(l.name) + " precedes its input " + in_quotes(name));
      }
      in.push_back(it->second);
    }
    out[l.name] = infer_layer_shape(l, in);
  }
  return out;
}

std::map<std::string, Shape> infer_shapes(const NetworkGraph& graph, const Shape& input_shape) {
  return infer_shapes(graph.layers(), input_shape);
}

NetworkGraph::NetworkGraph(std::string name, std::vector<LayerSpec> layers, int class_count)
    : name_(std::move(name)) {
  const auto violations = validate_graph(layers);
  if (!violations.empty()) {
    std::string msg = "invalid graph " + in_quotes(name_) + ":";
    for (const auto& s : violations) msg += "\n  - " + s;
    throw ModelError(msg);
  }
  const auto order = topo_order(layers);
  for (int i : *order) layers_.push_back(std::move(layers[static_cast<std::size_t>(i)]));
  for (int i = 0; i < num_layers(); ++i) index_[layers_[static_cast<std::size_t>(i)].name] = i;

  const auto shapes = infer_shapes(layers_, input_layer().input_shape);
  for (const LayerSpec& l : layers_) shapes_.push_back(shapes.at(l.name));

  const Shape& out = shapes_.back();
  const int inferred = out.size() == 1 ? out[0] : 0;
  if (class_count > 0 && class_count != inferred) {
    throw ModelError("graph " + in_quotes(name_) + " declares " + std::to_string(class_count) +
                     " classes but its output layer has shape " + shape_string(out));
  }
  class_count_ = class_count > 0 ? class_count : inferred;
}

const LayerSpec& NetworkGraph::layer(const std::string& name) const {
  const int i = index_of(name);
  if (i < 0) throw ModelError("no layer named " + in_quotes(name));
  return layers_[static_cast<std::size_t>(i)];
}

int NetworkGraph::index_of(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? -1 : it->second;
}

const LayerSpec& NetworkGraph::input_layer() const {
  for (const LayerSpec& l : layers_) {
    if (l.kind == LayerKind::Input) return l;
  }
  throw ModelError("graph has no Input layer");
}

std::vector<int> NetworkGraph::input_indices(int index) const {
  std::vector<int> out;
  for (const std::string& name : layer(index).inputs) out.push_back(index_.at(name));
  return out;
}

Tensor read_blob(const fs::path& path, const Shape& shape) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ModelError("missing weight blob " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t n = shape_size(shape);
  if (bytes.size() != n * 4) {
    throw ModelError("weight blob " + path.string() + " has " + std::to_string(bytes.size()) +
                     " bytes but shape " + shape_string(shape) + " needs " + std::to_string(n * 4));
  }
  std::vector<float> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto* b = reinterpret_cast<const unsigned char*>(bytes.data() + 4 * i);
    const std::uint32_t bits = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                               (static_cast<std::uint32_t>(b[2]) << 16) |
                               (static_cast<std::uint32_t>(b[3]) << 24);
    std::memcpy(&data[i], &bits, 4);
  }
  return Tensor(shape, std::move(data));
}

void write_blob(const fs::path& path, const Tensor& tensor) {
  std::string bytes(tensor.size() * 4, '\0');
  for (std::size_t i = 0; i < tensor.size(); ++i) {
    std::uint32_t bits;
    const float v = tensor[i];
    std::memcpy(&bits, &v, 4);
    for (int b = 0; b < 4; ++b) bytes[4 * i + static_cast<std::size_t>(b)] = static_cast<char>((bits >> (8 * b)) & 0xffu);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

void fold_batchnorm(Tensor& kernel, Tensor& bias, std::span<const float> gamma,
                    std::span<const float> beta, std::span<const float> mean,
                    std::span<const float> var, float epsilon) {
  const int K = kernel.dim(0);
  const std::size_t per_filter = kernel.size() / static_cast<std::size_t>(K);
  for (const auto* s : {&gamma, &beta, &mean, &var}) {
    if (static_cast<int>(s->size()) != K) {
      throw ModelError("batch-norm parameter has " + std::to_string(s->size()) +
                       " entries but the conv has " + std::to_string(K) + " filters");
    }
  }
  for (int f = 0; f < K; ++f) {
    const auto fi = static_cast<std::size_t>(f);
    const double scale = gamma[fi] / std::sqrt(static_cast<double>(var[fi]) + epsilon);
    for (std::size_t j = 0; j < per_filter; ++j) {
      float& w = kernel[fi * per_filter + j];
      w = static_cast<float>(w * scale);
    }
    bias[fi] = static_cast<float>((bias[fi] - mean[fi]) * scale + beta[fi]);
  }
}

namespace {

Shape read_shape(const YAML::Node& node, const std::string& what) {
  if (!node || !node.IsSequence()) throw ModelError(what + ": expected a shape list");
  Shape s;
  for (const auto& d : node) s.push_back(d.as<int>());
  return s;
}

template <typename T>
T required(const YAML::Node& layer, const char* key, const std::string& lname) {
  const YAML::Node n = layer[key];
  if (!n) throw ModelError("layer " + in_quotes(lname) + " is missing key " + in_quotes(key));
  return n.as<T>();
}

struct RawBatchNorm {
  std::string name;
  std::string input;
  float epsilon = 1e-5f;
  std::map<std::string, Tensor> params;
};

}  // namespace

NetworkGraph load_model(const fs::path& manifest_path) {
  YAML::Node root;
  try {
    root = YAML::LoadFile(manifest_path.string());
  } catch (const YAML::BadFile&) {
    throw ModelError("cannot open manifest " + manifest_path.string());
  } catch (const YAML::Exception& e) {
    throw ModelError("manifest " + manifest_path.string() + ": parse error: " + e.what());
  }
  const fs::path dir = manifest_path.parent_path();

  try {
    if (!root.IsMap() || !root["layers"] || !root["layers"].IsSequence()) {
      throw ModelError("manifest must be a map with a 'layers' list");
    }
    const std::string name = root["name"] ? root["name"].as<std::string>() : manifest_path.stem().string();
    const int classes = root["classes"] ? root["classes"].as<int>() : 0;

    std::vector<LayerSpec> layers;
    std::vector<RawBatchNorm> norms;
    for (const YAML::Node& node : root["layers"]) {
      const std::string lname = node["name"] ? node["name"].as<std::string>() : "";
      const std::string kind_name = required<std::string>(node, "kind", lname);
      std::vector<std::string> inputs;
      if (node["inputs"]) {
        for (const auto& i : node["inputs"]) inputs.push_back(i.as<std::string>());
      }

      std::map<std::string, Tensor> weights;
      std::map<std::string, WeightRef> refs;
      if (const YAML::Node w = node["weights"]) {
        for (const auto& kv : w) {
          const std::string role = kv.first.as<std::string>();
          WeightRef ref{required<std::string>(kv.second, "file", lname),
                        read_shape(kv.second["shape"], "layer " + in_quotes(lname) + " weight " + in_quotes(role))};
          weights[role] = read_blob(dir / ref.file, ref.shape);
          refs[role] = std::move(ref);
        }
      }

      if (kind_name == "BatchNorm") {
        if (inputs.size() != 1) throw ModelError("BatchNorm layer " + in_quotes(lname) + " needs exactly one input");
        RawBatchNorm bn{lname, inputs[0], node["epsilon"] ? node["epsilon"].as<float>() : 1e-5f, weights};
        norms.push_back(std::move(bn));
        continue;
      }

      const auto kind = parse_layer_kind(kind_name);
      if (!kind) throw ModelError("layer " + in_quotes(lname) + " has unknown kind " + in_quotes(kind_name));
      LayerSpec l;
      l.name = lname;
      l.kind = *kind;
      l.inputs = std::move(inputs);
      l.weights = std::move(weights);
      l.weight_refs = std::move(refs);
      switch (l.kind) {
        case LayerKind::Input:
          l.input_shape = read_shape(node["shape"], "input " + in_quotes(lname));
          break;
        case LayerKind::Conv:
          l.conv.kernel = required<int>(node, "kernel", lname);
          l.conv.stride = node["stride"] ? node["stride"].as<int>() : 1;
          l.conv.pad = node["pad"] ? node["pad"].as<int>() : 0;
          l.conv.out_channels = required<int>(node, "out_channels", lname);
          break;
        case LayerKind::MaxPool:
          l.pool.kernel = required<int>(node, "kernel", lname);
          l.pool.stride = node["stride"] ? node["stride"].as<int>() : l.pool.kernel;
          break;
        case LayerKind::FullyConnected:
          l.units = required<int>(node, "units", lname);
          break;
        case LayerKind::LstmCell:
          l.lstm.units = required<int>(node, "units", lname);
          l.lstm.input_size = required<int>(node, "input_size", lname);
          l.lstm.steps = node["steps"] ? node["steps"].as<int>() : 1;
          break;
        default:
          break;
      }
      layers.push_back(std::move(l));
    }

    for (RawBatchNorm& bn : norms) {
      auto conv = std::find_if(layers.begin(), layers.end(), [&](const LayerSpec& l) { return l.name == bn.input; });
      if (conv == layers.end() || conv->kind != LayerKind::Conv) {
        throw ModelError("BatchNorm " + in_quotes(bn.name) + " must directly follow a Conv layer");
      }
      const auto consumers = std::count_if(layers.begin(), layers.end(), [&](const LayerSpec& l) {
        return std::find(l.inputs.begin(), l.inputs.end(), conv->name) != l.inputs.end();
      });
      if (consumers != 0) {
        throw ModelError("BatchNorm " + in_quotes(bn.name) + " cannot be folded: conv " + in_quotes(conv->name) +
                         " has other consumers");
      }
      for (const char* p : {"gamma", "beta", "mean", "var"}) {
        if (!bn.params.count(p)) throw ModelError("BatchNorm " + in_quotes(bn.name) + " is missing " + in_quotes(p));
      }
      if (!conv->has_weight("kernel") || !conv->has_weight("bias")) {
        throw ModelError("conv " + in_quotes(conv->name) + " needs kernel and bias before folding");
      }
      fold_batchnorm(conv->weights.at("kernel"), conv->weights.at("bias"), bn.params.at("gamma").data(),
                     bn.params.at("beta").data(), bn.params.at("mean").data(), bn.params.at("var").data(),
                     bn.epsilon);
      conv->weight_refs.clear();
      const std::string conv_name = conv->name;
      for (LayerSpec& l : layers) {
        std::replace(l.inputs.begin(), l.inputs.end(), bn.name, conv_name);
      }
      for (RawBatchNorm& other : norms) {
        if (other.input == bn.name) other.input = conv_name;
      }
    }

    return NetworkGraph(name, std::move(layers), classes);
  } catch (const YAML::Exception& e) {
    throw ModelError("manifest " + manifest_path.string() + ": " + e.what());
  } catch (const ShapeError& e) {
    throw ModelError("manifest " + manifest_path.string() + ": " + e.what());
  }
}

void save_model(const NetworkGraph& graph, const fs::path& dir, const std::string& manifest_name) {
  fs::create_directories(dir);
  std::ostringstream os;
  auto list = [](const auto& values) {
    std::ostringstream s;
    s << '[';
    for (std::size_t i = 0; i < values.size(); ++i) s << (i ? ", " : "") << values[i];
    s << ']';
    return s.str();
  };
  os << "format: cnnfix-model-1\n";
  os << "name: " << graph.name() << "\n";
  os << "classes: " << graph.class_count() << "\n";
  os << "layers:\n";
  for (const LayerSpec& l : graph.layers()) {
    os << "  - name: " << l.name << "\n";
    os << "    kind: " << to_string(l.kind) << "\n";
    if (!l.inputs.empty()) os << "    inputs: " << list(l.inputs) << "\n";
    switch (l.kind) {
      case LayerKind::Input:
        os << "    shape: " << list(l.input_shape) << "\n";
        break;
      case LayerKind::Conv:
        os << "    kernel: " << l.conv.kernel << "\n    stride: " << l.conv.stride << "\n    pad: " << l.conv.pad
           << "\n    out_channels: " << l.conv.out_channels << "\n";
        break;
      case LayerKind::MaxPool:
        os << "    kernel: " << l.pool.kernel << "\n    stride: " << l.pool.stride << "\n";
        break;
      case LayerKind::FullyConnected:
        os << "    units: " << l.units << "\n";
        break;
      case LayerKind::LstmCell:
        os << "    units: " << l.lstm.units << "\n    input_size: " << l.lstm.input_size
           << "\n    steps: " << l.lstm.steps << "\n";
        break;
      default:
        break;
    }
    if (!l.weights.empty()) {
      os << "    weights:\n";
      for (const auto& [role, tensor] : l.weights) {
        auto ref = l.weight_refs.find(role);
        const std::string file = ref != l.weight_refs.end() ? ref->second.file : l.name + "." + role + ".f32";
        os << "      " << role << ": {file: " << file << ", shape: " << list(tensor.shape()) << "}\n";
        write_blob(dir / file, tensor);
      }
    }
  }
  std::ofstream out(dir / manifest_name, std::ios::trunc);
  if (!out) throw DataError("cannot write " + (dir / manifest_name).string());
  out << os.str();
}

}  // namespace cnnfix
