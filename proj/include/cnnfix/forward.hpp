#ifndef CNNFIX_FORWARD_HPP_
#define CNNFIX_FORWARD_HPP_

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cnnfix/graph.hpp"
#include "cnnfix/tensor.hpp"

namespace cnnfix {

// One unrolled LSTM step:
//   i = sigmoid(W_ix x + W_im m_prev)      f = sigmoid(W_fx x + W_fm m_prev)
//   o = sigmoid(W_ox x + W_om m_prev)      g = tanh(W_cx x + W_cm m_prev)
//   c = f * c_prev + i * g                 m = o * c
struct LstmStep {
  std::vector<float> x, m_prev, c_prev;
  std::vector<float> pre_i, pre_f, pre_o, pre_c;
  std::vector<float> i, f, o, g;
  std::vector<float> c, m;
};

struct LstmTrace {
  std::vector<LstmStep> steps;  // steps[0] is t = 1
};

// Gate weights of one LstmCell, viewed by name.
struct LstmWeights {
  const Tensor* ix;
  const Tensor* im;
  const Tensor* fx;
  const Tensor* fm;
  const Tensor* ox;
  const Tensor* om;
  const Tensor* cx;
  const Tensor* cm;

  static LstmWeights of(const LayerSpec& cell);
};

// Per-layer outputs of a single forward pass, indexed like graph.layers().
class ActivationTrace {
 public:
  const Tensor& image() const { return image_; }
  const Tensor& output(int layer) const { return outputs_.at(static_cast<std::size_t>(layer)); }
  const std::vector<Tensor>& outputs() const { return outputs_; }
  std::size_t size() const { return outputs_.size(); }

  // Only set when the last layer is a Softmax.
  const std::optional<Tensor>& scores() const { return scores_; }

  const LstmTrace* lstm(int layer) const;
  const ChannelRangeTable* concat_ranges(int layer) const;

 private:
  friend ActivationTrace run_forward(const NetworkGraph&, const Tensor&);

  Tensor image_;
  std::vector<Tensor> outputs_;
  std::optional<Tensor> scores_;
  std::map<int, LstmTrace> lstm_;
  std::map<int, ChannelRangeTable> concat_;
};

ActivationTrace run_forward(const NetworkGraph& graph, const Tensor& image);

// Unrolls `cell` for cell.lstm.steps steps from zero state. Step 1 consumes
// `embedding`; step t > 1 consumes row t-2 of `sequence` (zeros when empty).
LstmTrace run_lstm_unrolled(const LayerSpec& cell, std::span<const float> embedding,
                            const Tensor* sequence = nullptr);

// Argmax of the score vector, lowest index on ties. Throws ModelError when
// the trace has no Softmax head.
int predict_label(const ActivationTrace& trace);
int argmax_lowest(std::span<const float> values);

// Number of forward passes executed in this process.
long forward_pass_count();

}  // namespace cnnfix

#endif  // CNNFIX_FORWARD_HPP_
