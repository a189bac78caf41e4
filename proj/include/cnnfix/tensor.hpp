#ifndef CNNFIX_TENSOR_HPP_
#define CNNFIX_TENSOR_HPP_

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace cnnfix {

using Shape = std::vector<int>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense float tensor, row-major. Spatial tensors are [C, H, W] with the
// channel outermost; vectors are [n]; weight blobs use whatever rank their
// layer declares ([K, C, k, k] for conv kernels, [m, n] for matrices).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<const float> data() const { return data_; }
  std::span<float> data() { return data_; }
  const std::vector<float>& values() const { return data_; }

  float operator[](std::size_t i) const { return data_[i]; }
  float& operator[](std::size_t i) { return data_[i]; }

  // [C, H, W] access; unchecked beyond the rank assertion in debug builds.
  float at(int c, int y, int x) const { return data_[offset(c, y, x)]; }
  float& at(int c, int y, int x) { return data_[offset(c, y, x)]; }

  bool is_spatial() const { return shape_.size() == 3; }
  bool all_finite() const;

  // Same data viewed with another shape of equal element count.
  Tensor reshaped(Shape shape) const;

  bool operator==(const Tensor& other) const = default;

 private:
  std::size_t offset(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * static_cast<std::size_t>(shape_[1]) +
            static_cast<std::size_t>(y)) *
               static_cast<std::size_t>(shape_[2]) +
           static_cast<std::size_t>(x);
  }

  Shape shape_;
  std::vector<float> data_;
};

// Square kernel, symmetric stride and zero padding.
struct ConvParams {
  int kernel = 1;
  int stride = 1;
  int pad = 0;
  int out_channels = 1;

  bool operator==(const ConvParams&) const = default;
};

// floor((in + 2*pad - k) / stride) + 1; throws ShapeError when < 1.
int conv_output_size(int in, int kernel, int stride, int pad);

// [start, end) channel range contributed by each concatenated input.
struct ChannelRange {
  int start = 0;
  int end = 0;
  bool operator==(const ChannelRange&) const = default;
};
using ChannelRangeTable = std::vector<ChannelRange>;

struct ConcatResult {
  Tensor output;
  ChannelRangeTable ranges;
};

// Receptive window feeding one conv output. Out-of-image (padding) positions
// hold zero in `patch` and false in `valid`.
struct ReceptivePatch {
  Tensor patch;             // [C, k, k]
  std::vector<bool> valid;  // k*k, row-major over (u, v)
  int origin_y = 0;         // absolute input row of patch (0, 0); may be < 0
  int origin_x = 0;

  bool is_valid(int u, int v) const {
    const int k = patch.dim(1);
    return valid[static_cast<std::size_t>(u * k + v)];
  }
};

Tensor conv2d_forward(const Tensor& input, const Tensor& weights,
                      std::span<const float> bias, const ConvParams& params);
Tensor maxpool_forward(const Tensor& input, int kernel, int stride);
Tensor fc_forward(std::span<const float> input, const Tensor& weights,
                  std::span<const float> bias);

Tensor relu(const Tensor& input);
Tensor sigmoid(const Tensor& input);
Tensor tanh_act(const Tensor& input);
Tensor softmax(const Tensor& input);

ConcatResult concat_channels(std::span<const Tensor> inputs);
Tensor elementwise_add(const Tensor& a, const Tensor& b);

ReceptivePatch receptive_patch(const Tensor& input, int out_y, int out_x,
                               const ConvParams& params);

}  // namespace cnnfix

#endif  // CNNFIX_TENSOR_HPP_
