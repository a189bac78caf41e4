#include "cnnfix/forward.hpp"

#include <atomic>
#include <cmath>

#include "cnnfix/error.hpp"

namespace cnnfix {

namespace {

std::atomic<long> g_forward_passes{0};

std::vector<float> matvec(const Tensor& w, std::span<const float> v) {
  const int rows = w.dim(0), cols = w.dim(1);
  std::vector<float> out(static_cast<std::size_t>(rows));
  for (int r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (int j = 0; j < cols; ++j) {
      acc += static_cast<double>(w[static_cast<std::size_t>(r * cols + j)]) * v[static_cast<std::size_t>(j)];
    }
    out[static_cast<std::size_t>(r)] = static_cast<float>(acc);
  }
  return out;
}

std::vector<float> sum(const std::vector<float>& a, const std::vector<float>& b) {
  std::vector<float> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

float sigmoidf(float v) { return static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(v)))); }

}  // namespace

LstmWeights LstmWeights::of(const LayerSpec& cell) {
  return {&cell.weight("W_ix"), &cell.weight("W_im"), &cell.weight("W_fx"), &cell.weight("W_fm"),
          &cell.weight("W_ox"), &cell.weight("W_om"), &cell.weight("W_cx"), &cell.weight("W_cm")};
}

const LstmTrace* ActivationTrace::lstm(int layer) const {
  auto it = lstm_.find(layer);
  return it == lstm_.end() ? nullptr : &it->second;
}

const ChannelRangeTable* ActivationTrace::concat_ranges(int layer) const {
  auto it = concat_.find(layer);
  return it == concat_.end() ? nullptr : &it->second;
}

LstmTrace run_lstm_unrolled(const LayerSpec& cell, std::span<const float> embedding,
                            const Tensor* sequence) {
  const LstmParams& p = cell.lstm;
  if (p.steps < 1) throw ShapeError("lstm " + cell.name + " needs at least one step");
  const LstmWeights w = LstmWeights::of(cell);
  if (w.ix->dim(1) != static_cast<int>(embedding.size())) {
    throw ShapeError("lstm " + cell.name + " expects a " + std::to_string(w.ix->dim(1)) +
                     "-element embedding, got " + std::to_string(embedding.size()));
  }
  if (sequence && !sequence->empty() &&
      (sequence->rank() != 2 || sequence->dim(0) < p.steps - 1 || sequence->dim(1) != w.ix->dim(1))) {
    throw ShapeError("lstm " + cell.name + " input sequence has shape " + shape_string(sequence->shape()));
  }
  const auto units = static_cast<std::size_t>(w.ix->dim(0));
  const auto in_size = embedding.size();

  LstmTrace trace;
  std::vector<float> m(units, 0.0f), c(units, 0.0f);
  for (int t = 0; t < p.steps; ++t) {
    LstmStep s;
    if (t == 0) {
      s.x.assign(embedding.begin(), embedding.end());
    } else if (sequence && !sequence->empty()) {
      const auto row = sequence->data().subspan(static_cast<std::size_t>(t - 1) * in_size, in_size);
      s.x.assign(row.begin(), row.end());
    } else {
      s.x.assign(in_size, 0.0f);
    }
    s.m_prev = m;
    s.c_prev = c;
    s.pre_i = sum(matvec(*w.ix, s.x), matvec(*w.im, s.m_prev));
    s.pre_f = sum(matvec(*w.fx, s.x), matvec(*w.fm, s.m_prev));
    s.pre_o = sum(matvec(*w.ox, s.x), matvec(*w.om, s.m_prev));
    s.pre_c = sum(matvec(*w.cx, s.x), matvec(*w.cm, s.m_prev));
    s.i.resize(units);
    s.f.resize(units);
    s.o.resize(units);
    s.g.resize(units);
    s.c.resize(units);
    s.m.resize(units);
    for (std::size_t u = 0; u < units; ++u) {
      s.i[u] = sigmoidf(s.pre_i[u]);
      s.f[u] = sigmoidf(s.pre_f[u]);
      s.o[u] = sigmoidf(s.pre_o[u]);
      s.g[u] = std::tanh(s.pre_c[u]);
      s.c[u] = s.f[u] * s.c_prev[u] + s.i[u] * s.g[u];
      s.m[u] = s.o[u] * s.c[u];
    }
    m = s.m;
    c = s.c;
    trace.steps.push_back(std::move(s));
  }
  return trace;
}

ActivationTrace run_forward(const NetworkGraph& graph, const Tensor& image) {
  const LayerSpec& input = graph.input_layer();
  if (image.shape() != input.input_shape) {
    throw ShapeError("image shape " + shape_string(image.shape()) + " does not match model input " +
                     shape_string(input.input_shape));
  }
  ++g_forward_passes;

  ActivationTrace trace;
  trace.image_ = image;
  trace.outputs_.reserve(static_cast<std::size_t>(graph.num_layers()));
  for (int li = 0; li < graph.num_layers(); ++li) {
    const LayerSpec& l = graph.layer(li);
    const std::vector<int> in = graph.input_indices(li);
    auto arg = [&](std::size_t k) -> const Tensor& { return trace.outputs_[static_cast<std::size_t>(in[k])]; };
    Tensor out;
    switch (l.kind) {
      case LayerKind::Input:
        out = image;
        break;
      case LayerKind::Conv:
        out = conv2d_forward(arg(0), l.weight("kernel"), l.weight("bias").data(), l.conv);
        break;
      case LayerKind::ReLU:
        out = relu(arg(0));
        break;
      case LayerKind::MaxPool:
        out = maxpool_forward(arg(0), l.pool.kernel, l.pool.stride);
        break;
      case LayerKind::Flatten:
        out = arg(0).reshaped({static_cast<int>(arg(0).size())});
        break;
      case LayerKind::FullyConnected:
        out = fc_forward(arg(0).data(), l.weight("matrix"), l.weight("bias").data());
        break;
      case LayerKind::Softmax:
        out = softmax(arg(0));
        break;
      case LayerKind::Concat: {
        std::vector<Tensor> parts;
        for (std::size_t k = 0; k < in.size(); ++k) parts.push_back(arg(k));
        ConcatResult r = concat_channels(parts);
        out = std::move(r.output);
        trace.concat_[li] = std::move(r.ranges);
        break;
      }
      case LayerKind::Add:
        out = elementwise_add(arg(0), arg(1));
        break;
      case LayerKind::LstmCell: {
        const Tensor* seq = l.has_weight("sequence") ? &l.weight("sequence") : nullptr;
        LstmTrace lt = run_lstm_unrolled(l, arg(0).data(), seq);
        out = Tensor({l.lstm.units}, lt.steps.back().m);
        trace.lstm_[li] = std::move(lt);
        break;
      }
    }
    trace.outputs_.push_back(std::move(out));
  }
  if (graph.output_layer().kind == LayerKind::Softmax) trace.scores_ = trace.outputs_.back();
  return trace;
}

int argmax_lowest(std::span<const float> values) {
  if (values.empty()) throw ShapeError("argmax of an empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return static_cast<int>(best);
}

int predict_label(const ActivationTrace& trace) {
  if (!trace.scores()) throw ModelError("model has no Softmax head; cannot predict a label");
  return argmax_lowest(trace.scores()->data());
}

long forward_pass_count() { return g_forward_passes.load(); }

}  // namespace cnnfix
