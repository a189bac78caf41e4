#include "cnnfix/fixtures.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "cnnfix/error.hpp"

namespace cnnfix {

Tensor FixtureRng::tensor(const Shape& shape, float lo, float hi) {
  Tensor t(shape);
  for (float& v : t.data()) v = uniform(lo, hi);
  return t;
}

namespace {

constexpr std::pair<FixtureKind, const char*> kFixtureNames[] = {
    {FixtureKind::BlobDetector, "blob-detector"}, {FixtureKind::RandomCnn, "random-cnn"},
    {FixtureKind::ToyLstm, "toy-lstm"},           {FixtureKind::InceptionToy, "inception-toy"},
    {FixtureKind::ResidualToy, "residual-toy"},   {FixtureKind::DenseToy, "dense-toy"},
    {FixtureKind::Depth2Toy, "depth2-toy"},
};

LayerSpec input_layer(const std::string& name, Shape shape) {
  LayerSpec l;
  l.name = name;
  l.kind = LayerKind::Input;
  l.input_shape = std::move(shape);
  return l;
}

LayerSpec conv_layer(const std::string& name, const std::string& in, ConvParams p, Tensor kernel, Tensor bias) {
  LayerSpec l;
  l.name = name;
  l.kind = LayerKind::Conv;
  l.inputs = {in};
  l.conv = p;
  l.weights["kernel"] = std::move(kernel);
  l.weights["bias"] = std::move(bias);
  return l;
}

LayerSpec random_conv(FixtureRng& rng, const std::string& name, const std::string& in, int in_channels,
                      int out_channels, int kernel, int pad, int stride = 1) {
  const float scale = std::sqrt(6.0f / static_cast<float>(in_channels * kernel * kernel));
  return conv_layer(name, in, {kernel, stride, pad, out_channels},
                    rng.tensor({out_channels, in_channels, kernel, kernel}, -scale, scale),
                    rng.tensor({out_channels}, -0.1f, 0.1f));
}

LayerSpec simple_layer(const std::string& name, LayerKind kind, std::vector<std::string> inputs) {
  LayerSpec l;
  l.name = name;
  l.kind = kind;
  l.inputs = std::move(inputs);
  return l;
}

LayerSpec pool_layer(const std::string& name, const std::string& in, int kernel, int stride) {
  LayerSpec l = simple_layer(name, LayerKind::MaxPool, {in});
  l.pool = {kernel, stride};
  return l;
}

LayerSpec fc_layer(const std::string& name, const std::string& in, Tensor matrix, Tensor bias) {
  LayerSpec l = simple_layer(name, LayerKind::FullyConnected, {in});
  l.units = matrix.dim(0);
  l.weights["matrix"] = std::move(matrix);
  l.weights["bias"] = std::move(bias);
  return l;
}

LayerSpec random_fc(FixtureRng& rng, const std::string& name, const std::string& in, int inputs, int units) {
  const float scale = std::sqrt(6.0f / static_cast<float>(inputs));
  return fc_layer(name, in, rng.tensor({units, inputs}, -scale, scale), rng.tensor({units}, -0.1f, 0.1f));
}

}  // namespace

std::string to_string(FixtureKind kind) {
  for (const auto& [k, n] : kFixtureNames) {
    if (k == kind) return n;
  }
  return "?";
}

std::optional<FixtureKind> parse_fixture_kind(const std::string& name) {
  for (const auto& [k, n] : kFixtureNames) {
    if (name == n) return k;
  }
  return std::nullopt;
}

NetworkGraph make_blob_detector(const BlobDetectorOptions& o) {
  if (o.size < 8 || o.size % 8 != 0) throw ShapeError("blob detector size must be a positive multiple of 8");
  const int S = o.size;
  std::vector<LayerSpec> layers;
  layers.push_back(input_layer("image", {1, S, S}));
  layers.push_back(conv_layer("conv1", "image", {5, 1, 2, 1}, Tensor({1, 1, 5, 5}, 1.0f / 25.0f), Tensor({1}, -0.2f)));
  layers.push_back(simple_layer("relu1", LayerKind::ReLU, {"conv1"}));
  layers.push_back(pool_layer("pool1", "relu1", 2, 2));
  layers.push_back(conv_layer("conv2", "pool1", {3, 1, 1, 1}, Tensor({1, 1, 3, 3}, 1.0f / 9.0f), Tensor({1}, -0.01f)));
  layers.push_back(simple_layer("relu2", LayerKind::ReLU, {"conv2"}));
  layers.push_back(pool_layer("pool2", "relu2", 2, 2));
  layers.push_back(simple_layer("flatten", LayerKind::Flatten, {"pool2"}));

  const int cells = S / 4;
  Tensor matrix({4, cells * cells});
  for (int q = 0; q < 4; ++q) {
    for (int y = 0; y < cells; ++y) {
      for (int x = 0; x < cells; ++x) {
        const int quadrant = (y >= cells / 2 ? 2 : 0) + (x >= cells / 2 ? 1 : 0);
        matrix[static_cast<std::size_t>(q * cells * cells + y * cells + x)] = quadrant == q ? 1.0f : -1.0f;
      }
    }
  }
  layers.push_back(fc_layer("fc", "flatten", std::move(matrix), Tensor({4}, 0.0f)));
  layers.push_back(simple_layer("prob", LayerKind::Softmax, {"fc"}));
  return NetworkGraph("blob-detector", std::move(layers), 4);
}

BlobSample BlobImageGenerator::make(int quadrant, int cx, int cy, double sigma) {
  BlobSample s;
  s.quadrant = quadrant;
  s.sigma = sigma;
  s.centre_x = cx;
  s.centre_y = cy;
  s.image = Image{size_, size_, 1, std::vector<std::uint8_t>(static_cast<std::size_t>(size_) * size_)};
  for (int y = 0; y < size_; ++y) {
    for (int x = 0; x < size_; ++x) {
      const double d2 = static_cast<double>((x - cx) * (x - cx) + (y - cy) * (y - cy));
      const double blob = std::exp(-d2 / (2.0 * sigma * sigma));
      const double noise = noise_ > 0.0 ? noise_ * rng_.uniform() : 0.0;
      const double v = std::clamp(blob + noise, 0.0, 1.0);
      s.image.at(x, y) = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  }
  const int r = static_cast<int>(std::floor(sigma * std::sqrt(2.0 * std::log(1.0 / kBlobBoxLevel))));
  s.box = {std::max(0, cx - r), std::max(0, cy - r), std::min(size_ - 1, cx + r), std::min(size_ - 1, cy + r)};
  return s;
}

BlobSample BlobImageGenerator::next() {
  const int quadrant = rng_.uniform_int(0, 3);
  const int half = size_ / 2;
  const double sigma = 2.5 + 2.0 * rng_.uniform() * (size_ / 64.0);
  // Keep every lit pooled cell inside the quadrant.
  const int margin = static_cast<int>(std::ceil(1.8 * sigma)) + 4;
  const int cx = rng_.uniform_int(margin, half - 1 - margin) + (quadrant % 2) * half;
  const int cy = rng_.uniform_int(margin, half - 1 - margin) + (quadrant / 2) * half;
  return make(quadrant, cx, cy, sigma);
}

NetworkGraph make_random_cnn(std::uint64_t seed, const RandomCnnOptions& o) {
  FixtureRng rng(seed);
  std::vector<LayerSpec> layers;
  layers.push_back(input_layer("image", {o.input_channels, o.input_size, o.input_size}));
  std::string prev = "image";
  int channels = o.input_channels, size = o.input_size;
  for (int d = 1; d <= o.depth; ++d) {
    const std::string id = std::to_string(d);
    layers.push_back(random_conv(rng, "conv" + id, prev, channels, o.channels, 3, 1));
    layers.push_back(simple_layer("relu" + id, LayerKind::ReLU, {"conv" + id}));
    prev = "relu" + id;
    channels = o.channels;
    if (size >= 8) {
      layers.push_back(pool_layer("pool" + id, prev, 2, 2));
      prev = "pool" + id;
      size /= 2;
    }
  }
  layers.push_back(simple_layer("flatten", LayerKind::Flatten, {prev}));
  layers.push_back(random_fc(rng, "fc1", "flatten", channels * size * size, o.hidden));
  layers.push_back(simple_layer("fc1_relu", LayerKind::ReLU, {"fc1"}));
  layers.push_back(random_fc(rng, "fc2", "fc1_relu", o.hidden, o.classes));
  layers.push_back(simple_layer("prob", LayerKind::Softmax, {"fc2"}));
  return NetworkGraph("random-cnn", std::move(layers), o.classes);
}

NetworkGraph make_inception_toy(std::uint64_t seed) {
  FixtureRng rng(seed);
  std::vector<LayerSpec> layers;
  layers.push_back(input_layer("image", {2, 10, 10}));
  layers.push_back(random_conv(rng, "stem", "image", 2, 4, 3, 1));
  layers.push_back(simple_layer("stem_relu", LayerKind::ReLU, {"stem"}));
  layers.push_back(random_conv(rng, "branch1x1", "stem_relu", 4, 2, 1, 0));
  layers.push_back(random_conv(rng, "branch3x3", "stem_relu", 4, 3, 3, 1));
  layers.push_back(random_conv(rng, "branch5x5", "stem_relu", 4, 2, 5, 2));
  layers.push_back(simple_layer("mixed", LayerKind::Concat, {"branch1x1", "branch3x3", "branch5x5"}));
  layers.push_back(simple_layer("mixed_relu", LayerKind::ReLU, {"mixed"}));
  layers.push_back(pool_layer("pool", "mixed_relu", 2, 2));
  layers.push_back(simple_layer("flatten", LayerKind::Flatten, {"pool"}));
  layers.push_back(random_fc(rng, "fc", "flatten", 7 * 5 * 5, 3));
  layers.push_back(simple_layer("prob", LayerKind::Softmax, {"fc"}));
  return NetworkGraph("inception-toy", std::move(layers), 3);
}

NetworkGraph make_residual_toy(std::uint64_t seed) {
  FixtureRng rng(seed);
  std::vector<LayerSpec> layers;
  layers.push_back(input_layer("image", {2, 8, 8}));
  layers.push_back(random_conv(rng, "conv1", "image", 2, 4, 3, 1));
  layers.push_back(simple_layer("relu1", LayerKind::ReLU, {"conv1"}));
  std::string skip = "relu1";
  for (int b = 1; b <= 2; ++b) {
    const std::string id = std::to_string(b);
    layers.push_back(random_conv(rng, "res" + id + "_a", skip, 4, 4, 3, 1));
    layers.push_back(simple_layer("res" + id + "_a_relu", LayerKind::ReLU, {"res" + id + "_a"}));
    layers.push_back(random_conv(rng, "res" + id + "_b", "res" + id + "_a_relu", 4, 4, 3, 1));
    layers.push_back(simple_layer("res" + id + "_add", LayerKind::Add, {skip, "res" + id + "_b"}));
    layers.push_back(simple_layer("res" + id + "_relu", LayerKind::ReLU, {"res" + id + "_add"}));
    skip = "res" + id + "_relu";
  }
  layers.push_back(simple_layer("flatten", LayerKind::Flatten, {skip}));
  layers.push_back(random_fc(rng, "fc", "flatten", 4 * 8 * 8, 3));
  layers.push_back(simple_layer("prob", LayerKind::Softmax, {"fc"}));
  return NetworkGraph("residual-toy", std::move(layers), 3);
}

NetworkGraph make_dense_toy(std::uint64_t seed) {
  FixtureRng rng(seed);
  std::vector<LayerSpec> layers;
  layers.push_back(input_layer("image", {2, 8, 8}));
  layers.push_back(random_conv(rng, "conv1", "image", 2, 3, 3, 1));
  layers.push_back(simple_layer("relu1", LayerKind::ReLU, {"conv1"}));
  layers.push_back(random_conv(rng, "conv2", "relu1", 3, 3, 3, 1));
  layers.push_back(simple_layer("relu2", LayerKind::ReLU, {"conv2"}));
  layers.push_back(simple_layer("dense1", LayerKind::Concat, {"relu1", "relu2"}));
  layers.push_back(random_conv(rng, "conv3", "dense1", 6, 3, 3, 1));
  layers.push_back(simple_layer("relu3", LayerKind::ReLU, {"conv3"}));
  layers.push_back(simple_layer("dense2", LayerKind::Concat, {"dense1", "relu3"}));
  layers.push_back(pool_layer("pool", "dense2", 2, 2));
  layers.push_back(simple_layer("flatten", LayerKind::Flatten, {"pool"}));
  layers.push_back(random_fc(rng, "fc", "flatten", 9 * 4 * 4, 3));
  layers.push_back(simple_layer("prob", LayerKind::Softmax, {"fc"}));
  return NetworkGraph("dense-toy", std::move(layers), 3);
}

NetworkGraph make_toy_lstm(std::uint64_t seed, int steps) {
  FixtureRng rng(seed);
  constexpr int kUnits = 2, kEmbedding = 4;
  std::vector<LayerSpec> layers;
  layers.push_back(input_layer("image", {1, 6, 6}));
  layers.push_back(random_conv(rng, "conv", "image", 1, 2, 3, 0));
  layers.push_back(simple_layer("relu", LayerKind::ReLU, {"conv"}));
  layers.push_back(simple_layer("flatten", LayerKind::Flatten, {"relu"}));
  layers.push_back(random_fc(rng, "embed", "flatten", 2 * 4 * 4, kEmbedding));

  LayerSpec cell = simple_layer("lstm", LayerKind::LstmCell, {"embed"});
  cell.lstm = {kUnits, kEmbedding, steps};
  for (const char* role : kLstmGateRoles) {
    const bool recurrent = role[3] == 'm';
    cell.weights[role] = rng.tensor({kUnits, recurrent ? kUnits : kEmbedding}, -1.0f, 1.0f);
  }
  if (steps > 1) cell.weights["sequence"] = rng.tensor({steps - 1, kEmbedding}, -1.0f, 1.0f);
  layers.push_back(std::move(cell));

  layers.push_back(random_fc(rng, "word", "lstm", kUnits, 3));
  layers.push_back(simple_layer("prob", LayerKind::Softmax, {"word"}));
  return NetworkGraph("toy-lstm", std::move(layers), 3);
}

NetworkGraph make_depth2_toy(std::uint64_t seed) {
  FixtureRng rng(seed);
  std::vector<LayerSpec> layers;
  layers.push_back(input_layer("image", {2, 4, 4}));
  layers.push_back(conv_layer("conv", "image", {1, 1, 0, 3}, rng.tensor({3, 2, 1, 1}, -1.0f, 1.0f),
                              rng.tensor({3}, -0.1f, 0.1f)));
  layers.push_back(simple_layer("flatten", LayerKind::Flatten, {"conv"}));
  layers.push_back(fc_layer("fc", "flatten", rng.tensor({4, 3 * 4 * 4}, -1.0f, 1.0f), rng.tensor({4}, -0.1f, 0.1f)));
  return NetworkGraph("depth2-toy", std::move(layers), 4);
}

NetworkGraph make_fixture(FixtureKind kind, std::uint64_t seed) {
  switch (kind) {
    case FixtureKind::BlobDetector: return make_blob_detector();
    case FixtureKind::RandomCnn: return make_random_cnn(seed);
    case FixtureKind::ToyLstm: return make_toy_lstm(seed, 2);
    case FixtureKind::InceptionToy: return make_inception_toy(seed);
    case FixtureKind::ResidualToy: return make_residual_toy(seed);
    case FixtureKind::DenseToy: return make_dense_toy(seed);
    case FixtureKind::Depth2Toy: return make_depth2_toy(seed);
  }
  throw ModelError("unknown fixture kind");
}

Image make_fixture_image(FixtureKind kind, std::uint64_t seed) {
  if (kind == FixtureKind::BlobDetector) return BlobImageGenerator(seed).next().image;
  const Shape shape = make_fixture(kind, seed).input_layer().input_shape;
  FixtureRng rng(seed ^ 0x9e3779b97f4a7c15ull);
  Image img{shape[2], shape[1], shape[0], {}};
  img.pixels.resize(shape_size(shape));
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.next() >> 56);
  return img;
}

namespace {

class PathWalker {
 public:
  PathWalker(const NetworkGraph& g, const ActivationTrace& t, const BacktrackConfig& cfg) : g_(g), t_(t), cfg_(cfg) {}

  void walk(int li, const Coord& n) {
    const LayerSpec& l = g_.layer(li);
    const std::vector<int> in = g_.input_indices(li);
    switch (l.kind) {
      case LayerKind::Input:
        if (++result.paths > kOracleMaxPaths) throw ModelError("path oracle exceeded its path budget");
        pixels_.insert({n.x, n.y});
        return;
      case LayerKind::ReLU:
      case LayerKind::Softmax:
        walk(in[0], n);
        return;
      case LayerKind::Flatten: {
        const Shape& s = g_.shape_of(in[0]);
        if (s.size() != 3) return walk(in[0], n);
        const int plane = s[1] * s[2];
        walk(in[0], {n.c / plane, (n.c % plane) / s[2], n.c % s[2]});
        return;
      }
      case LayerKind::FullyConnected: {
        const Tensor& a = t_.output(in[0]);
        const Tensor& w = l.weight("matrix");
        const int cols = w.dim(1);
        bool any = false;
        for (int j = 0; j < cols; ++j) {
          const double contribution = static_cast<double>(a[static_cast<std::size_t>(j)]) *
                                      w[static_cast<std::size_t>(n.c * cols + j)];
          if (contribution > 0.0) {
            any = true;
            walk(in[0], {j, 0, 0});
          }
        }
        if (!any) {
          if (cfg_.empty_set_fallback == EmptySetFallback::Abort) {
            throw EmptyEvidenceError("path oracle: no positive evidence");
          }
          result.fallback_used = true;
          int best = 0;
          for (int j = 1; j < cols; ++j) {
            const double v = static_cast<double>(a[static_cast<std::size_t>(j)]) * w[static_cast<std::size_t>(n.c * cols + j)];
            const double b = static_cast<double>(a[static_cast<std::size_t>(best)]) *
                             w[static_cast<std::size_t>(n.c * cols + best)];
            if (v > b) best = j;
          }
          walk(in[0], {best, 0, 0});
        }
        return;
      }
      case LayerKind::Conv: {
        const Tensor& a = t_.output(in[0]);
        const Tensor& w = l.weight("kernel");
        const int C = a.dim(0), H = a.dim(1), W = a.dim(2), k = l.conv.kernel;
        const int y0 = n.y * l.conv.stride - l.conv.pad, x0 = n.x * l.conv.stride - l.conv.pad;
        auto product = [&](int c, int u, int v) {
          return static_cast<double>(a.at(c, y0 + u, x0 + v)) *
                 w[static_cast<std::size_t>(((n.c * C + c) * k + u) * k + v)];
        };
        auto inside = [&](int u, int v) { return y0 + u >= 0 && y0 + u < H && x0 + v >= 0 && x0 + v < W; };
        int ch = 0;
        double best_sum = 0.0;
        for (int c = 0; c < C; ++c) {
          double s = 0.0;
          for (int u = 0; u < k; ++u)
            for (int v = 0; v < k; ++v)
              if (inside(u, v)) s += product(c, u, v);
          if (c == 0 || s > best_sum) {
            ch = c;
            best_sum = s;
          }
        }
        int y = std::clamp(y0 + (k - 1) / 2, 0, H - 1), x = std::clamp(x0 + (k - 1) / 2, 0, W - 1);
        if (cfg_.conv_spatial_mode == ConvSpatialMode::ArgmaxLocation) {
          bool found = false;
          double best = 0.0;
          for (int u = 0; u < k; ++u) {
            for (int v = 0; v < k; ++v) {
              if (!inside(u, v)) continue;
              if (!found || product(ch, u, v) > best) {
                found = true;
                best = product(ch, u, v);
                y = y0 + u;
                x = x0 + v;
              }
            }
          }
        }
        walk(in[0], {ch, y, x});
        return;
      }
      case LayerKind::MaxPool: {
        const Tensor& a = t_.output(in[0]);
        const int k = l.pool.kernel, s = l.pool.stride;
        int by = n.y * s, bx = n.x * s;
        for (int u = 0; u < k; ++u)
          for (int v = 0; v < k; ++v)
            if (a.at(n.c, n.y * s + u, n.x * s + v) > a.at(n.c, by, bx)) {
              by = n.y * s + u;
              bx = n.x * s + v;
            }
        walk(in[0], {n.c, by, bx});
        return;
      }
      default:
        throw ModelError("path oracle does not support " + to_string(l.kind) + " layers");
    }
  }

  OracleResult finish() {
    result.pixels.assign(pixels_.begin(), pixels_.end());
    return result;
  }

  OracleResult result;

 private:
  const NetworkGraph& g_;
  const ActivationTrace& t_;
  const BacktrackConfig& cfg_;
  std::set<Pixel> pixels_;
};

}  // namespace

OracleResult exhaustive_path_oracle(const NetworkGraph& graph, const ActivationTrace& trace, const StartNeuron& start,
                                    const BacktrackConfig& cfg) {
  int routing = 0;
  for (const LayerSpec& l : graph.layers()) {
    if (l.kind == LayerKind::Conv || l.kind == LayerKind::MaxPool || l.kind == LayerKind::FullyConnected) ++routing;
  }
  if (routing > kOracleMaxRoutingLayers) {
    throw ModelError("path oracle is limited to " + std::to_string(kOracleMaxRoutingLayers) +
                     " conv/pool/fc layers; graph has " + std::to_string(routing));
  }
  const int s = graph.index_of(start.layer);
  if (s < 0) throw IndexError("start layer '" + start.layer + "' not in graph");
  PathWalker walker(graph, trace, cfg);
  walker.walk(s, start.coord);
  return walker.finish();
}

}  // namespace cnnfix
