#include "cnnfix/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "cnnfix/error.hpp"

namespace cnnfix {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, float fill)
    : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size()) {
    throw ShapeError("tensor shape " + shape_string(shape_) + " needs " +
                     std::to_string(shape_size(shape_)) + " elements, got " +
                     std::to_string(data_.size()));
  }
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](float v) { return std::isfinite(v); });
}

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

int conv_output_size(int in, int kernel, int stride, int pad) {
  if (kernel < 1 || stride < 1 || pad < 0) {
    throw ShapeError("invalid window: kernel " + std::to_string(kernel) +
                     ", stride " + std::to_string(stride) + ", pad " +
                     std::to_string(pad));
  }
  const int span = in + 2 * pad - kernel;
  if (span < 0) {
    throw ShapeError("window of size " + std::to_string(kernel) +
                     " exceeds input extent " + std::to_string(in) +
                     " (pad " + std::to_string(pad) + ")");
  }
  return span / stride + 1;
}

namespace {

void require_spatial(const Tensor& t, const char* what) {
  if (!t.is_spatial()) {
    throw ShapeError(std::string(what) + " must be [C,H,W], got " +
                     shape_string(t.shape()));
  }
}

Tensor map_elements(const Tensor& input, const std::function<float(float)>& f) {
  Tensor out(input.shape());
  std::transform(input.data().begin(), input.data().end(), out.data().begin(), f);
  return out;
}

}  // namespace

Tensor conv2d_forward(const Tensor& input, const Tensor& weights,
                      std::span<const float> bias, const ConvParams& p) {
  require_spatial(input, "conv input");
  if (weights.rank() != 4) {
    throw ShapeError("conv kernel must be [K,C,k,k], got " + shape_string(weights.shape()));
  }
  const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const int K = weights.dim(0), k = p.kernel;
  if (weights.dim(1) != C) {
    throw ShapeError("conv kernel has " + std::to_string(weights.dim(1)) +
                     " input channels but input has " + std::to_string(C));
  }
  if (weights.dim(2) != k || weights.dim(3) != k) {
    throw ShapeError("conv kernel spatial size " + shape_string(weights.shape()) +
                     " does not match kernel " + std::to_string(k));
  }
  if (K != p.out_channels) {
    throw ShapeError("conv kernel has " + std::to_string(K) + " filters but params declare " +
                     std::to_string(p.out_channels));
  }
  if (static_cast<int>(bias.size()) != K) {
    throw ShapeError("conv bias has " + std::to_string(bias.size()) + " entries, expected " +
                     std::to_string(K));
  }
  const int Ho = conv_output_size(H, k, p.stride, p.pad);
  const int Wo = conv_output_size(W, k, p.stride, p.pad);

  Tensor out({K, Ho, Wo});
  const float* w = weights.data().data();
  for (int f = 0; f < K; ++f) {
    for (int oy = 0; oy < Ho; ++oy) {
      for (int ox = 0; ox < Wo; ++ox) {
        double acc = bias[static_cast<std::size_t>(f)];
        const int y0 = oy * p.stride - p.pad;
        const int x0 = ox * p.stride - p.pad;
        for (int c = 0; c < C; ++c) {
          const float* wc = w + (static_cast<std::size_t>(f) * C + c) * k * k;
          for (int u = 0; u < k; ++u) {
            const int y = y0 + u;
            if (y < 0 || y >= H) continue;
            for (int v = 0; v < k; ++v) {
              const int x = x0 + v;
              if (x < 0 || x >= W) continue;
              acc += static_cast<double>(input.at(c, y, x)) * wc[u * k + v];
            }
          }
        }
        out.at(f, oy, ox) = static_cast<float>(acc);
      }
    }
  }
  return out;
}

Tensor maxpool_forward(const Tensor& input, int kernel, int stride) {
  require_spatial(input, "pool input");
  const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const int Ho = conv_output_size(H, kernel, stride, 0);
  const int Wo = conv_output_size(W, kernel, stride, 0);
  Tensor out({C, Ho, Wo});
  for (int c = 0; c < C; ++c) {
    for (int oy = 0; oy < Ho; ++oy) {
      for (int ox = 0; ox < Wo; ++ox) {
        float best = input.at(c, oy * stride, ox * stride);
        for (int u = 0; u < kernel; ++u) {
          for (int v = 0; v < kernel; ++v) {
            best = std::max(best, input.at(c, oy * stride + u, ox * stride + v));
          }
        }
        out.at(c, oy, ox) = best;
      }
    }
  }
  return out;
}

Tensor fc_forward(std::span<const float> input, const Tensor& weights,
                  std::span<const float> bias) {
  if (weights.rank() != 2) {
    throw ShapeError("fc weights must be [m,n], got " + shape_string(weights.shape()));
  }
  const int m = weights.dim(0), n = weights.dim(1);
  if (static_cast<int>(input.size()) != n) {
    throw ShapeError("fc input has " + std::to_string(input.size()) +
                     " elements but weights expect " + std::to_string(n));
  }
  if (static_cast<int>(bias.size()) != m) {
    throw ShapeError("fc bias has " + std::to_string(bias.size()) + " entries, expected " +
                     std::to_string(m));
  }
  Tensor out({m});
  const float* w = weights.data().data();
  for (int i = 0; i < m; ++i) {
    double acc = bias[static_cast<std::size_t>(i)];
    const float* row = w + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) acc += static_cast<double>(row[j]) * input[static_cast<std::size_t>(j)];
    out[static_cast<std::size_t>(i)] = static_cast<float>(acc);
  }
  return out;
}

Tensor relu(const Tensor& input) {
  return map_elements(input, [](float v) { return v > 0.0f ? v : 0.0f; });
}

Tensor sigmoid(const Tensor& input) {
  return map_elements(input, [](float v) {
    return static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(v))));
  });
}

Tensor tanh_act(const Tensor& input) {
  return map_elements(input, [](float v) { return std::tanh(v); });
}

Tensor softmax(const Tensor& input) {
  Tensor out(input.shape());
  if (input.empty()) return out;
  const float peak = *std::max_element(input.data().begin(), input.data().end());
  double total = 0.0;
  std::vector<double> e(input.size());
  for (std::size_t i = 0; i < input.size(); ++i) {
    e[i] = std::exp(static_cast<double>(input[i]) - peak);
    total += e[i];
  }
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = static_cast<float>(e[i] / total);
  return out;
}

ConcatResult concat_channels(std::span<const Tensor> inputs) {
  if (inputs.empty()) throw ShapeError("concat needs at least one input");
  for (const Tensor& t : inputs) require_spatial(t, "concat input");
  const int H = inputs[0].dim(1), W = inputs[0].dim(2);
  ConcatResult r;
  int total = 0;
  for (const Tensor& t : inputs) {
    if (t.dim(1) != H || t.dim(2) != W) {
      throw ShapeError("concat spatial mismatch: " + shape_string(inputs[0].shape()) +
                       " vs " + shape_string(t.shape()));
    }
    r.ranges.push_back({total, total + t.dim(0)});
    total += t.dim(0);
  }
  std::vector<float> data;
  data.reserve(static_cast<std::size_t>(total) * H * W);
  for (const Tensor& t : inputs) data.insert(data.end(), t.data().begin(), t.data().end());
  r.output = Tensor({total, H, W}, std::move(data));
  return r;
}

Tensor elementwise_add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add shape mismatch: " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

ReceptivePatch receptive_patch(const Tensor& input, int out_y, int out_x,
                               const ConvParams& p) {
  require_spatial(input, "patch source");
  const int C = input.dim(0), H = input.dim(1), W = input.dim(2), k = p.kernel;
  const int Ho = conv_output_size(H, k, p.stride, p.pad);
  const int Wo = conv_output_size(W, k, p.stride, p.pad);
  if (out_y < 0 || out_y >= Ho || out_x < 0 || out_x >= Wo) {
    throw IndexError("output coordinate (y=" + std::to_string(out_y) + ", x=" +
                     std::to_string(out_x) + ") outside " + std::to_string(Ho) + "x" +
                     std::to_string(Wo) + " grid");
  }
  ReceptivePatch r;
  r.patch = Tensor({C, k, k});
  r.valid.assign(static_cast<std::size_t>(k * k), false);
  r.origin_y = out_y * p.stride - p.pad;
  r.origin_x = out_x * p.stride - p.pad;
  for (int u = 0; u < k; ++u) {
    const int y = r.origin_y + u;
    for (int v = 0; v < k; ++v) {
      const int x = r.origin_x + v;
      if (y < 0 || y >= H || x < 0 || x >= W) continue;
      r.valid[static_cast<std::size_t>(u * k + v)] = true;
      for (int c = 0; c < C; ++c) r.patch.at(c, u, v) = input.at(c, y, x);
    }
  }
  return r;
}

}  // namespace cnnfix
