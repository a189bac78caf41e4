#include "cnnfix/backtrack.hpp"

#include <algorithm>
#include <set>

#include "cnnfix/error.hpp"

namespace cnnfix {

namespace {

std::string coord_string(const Coord& c) {
  return "(" + std::to_string(c.c) + "," + std::to_string(c.y) + "," + std::to_string(c.x) + ")";
}

void require_spatial_coord(const Coord& c, const Shape& shape, const char* what) {
  if (shape.size() != 3 || c.c < 0 || c.c >= shape[0] || c.y < 0 || c.y >= shape[1] || c.x < 0 ||
      c.x >= shape[2]) {
    throw IndexError(std::string(what) + " coordinate " + coord_string(c) + " outside " + shape_string(shape));
  }
}

[[noreturn]] void empty_evidence(const std::string& where) {
  throw EmptyEvidenceError("no positive evidence at " + (where.empty() ? std::string("layer") : where) +
                           " and fallback is disabled");
}

}  // namespace

void sort_unique(std::vector<Coord>& coords) {
  std::sort(coords.begin(), coords.end());
  coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
}

FixationSet::FixationSet(std::string layer, std::vector<Coord> coords, bool fallback)
    : layer_(std::move(layer)), coords_(std::move(coords)), fallback_(fallback) {
  sort_unique(coords_);
}

bool FixationSet::contains(const Coord& c) const {
  return std::binary_search(coords_.begin(), coords_.end(), c);
}

void FixationSet::merge(const FixationSet& other) {
  coords_.insert(coords_.end(), other.coords_.begin(), other.coords_.end());
  sort_unique(coords_);
  fallback_ = fallback_ || other.fallback_;
  if (layer_.empty()) layer_ = other.layer_;
}

std::string to_string(ConvSpatialMode mode) {
  return mode == ConvSpatialMode::SameLocation ? "same-location" : "argmax-location";
}

std::optional<ConvSpatialMode> parse_conv_spatial_mode(const std::string& s) {
  if (s == "same-location") return ConvSpatialMode::SameLocation;
  if (s == "argmax-location") return ConvSpatialMode::ArgmaxLocation;
  return std::nullopt;
}

FixationSet backtrack_fc(const FixationSet& selected, const Tensor& weights,
                         std::span<const float> prev, const BacktrackConfig& cfg, std::string prev_layer) {
  if (weights.rank() != 2 || weights.dim(1) != static_cast<int>(prev.size())) {
    throw ShapeError("fc backtrack: weights " + shape_string(weights.shape()) + " vs input of " +
                     std::to_string(prev.size()) + " elements");
  }
  const int rows = weights.dim(0), cols = weights.dim(1);
  std::vector<Coord> out;
  for (const Coord& sel : selected.coords()) {
    if (sel.c < 0 || sel.c >= rows || sel.y != 0 || sel.x != 0) {
      throw IndexError("fc backtrack: neuron " + coord_string(sel) + " outside " + std::to_string(rows) + " outputs");
    }
    const float* row = weights.data().data() + static_cast<std::size_t>(sel.c) * cols;
    for (int j = 0; j < cols; ++j) {
      if (static_cast<double>(prev[static_cast<std::size_t>(j)]) * row[j] > 0.0) out.push_back({j, 0, 0});
    }
  }
  if (out.empty() && !selected.empty()) {
    if (cfg.empty_set_fallback == EmptySetFallback::Abort) empty_evidence(prev_layer);
    const float* row = weights.data().data() + static_cast<std::size_t>(selected.coords().front().c) * cols;
    int best = 0;
    double best_value = static_cast<double>(prev[0]) * row[0];
    for (int j = 1; j < cols; ++j) {
      const double v = static_cast<double>(prev[static_cast<std::size_t>(j)]) * row[j];
      if (v > best_value) {
        best = j;
        best_value = v;
      }
    }
    return FixationSet(std::move(prev_layer), {{best, 0, 0}}, true);
  }
  return FixationSet(std::move(prev_layer), std::move(out), selected.fallback_used());
}

ConvChoice choose_conv_source(const Coord& out, const Tensor& weights, const Tensor& prev,
                              const ConvParams& params, ConvSpatialMode mode) {
  if (out.c < 0 || out.c >= weights.dim(0)) {
    throw IndexError("conv backtrack: filter " + std::to_string(out.c) + " outside " +
                     std::to_string(weights.dim(0)) + " filters");
  }
  const ReceptivePatch rp = receptive_patch(prev, out.y, out.x, params);
  const int C = prev.dim(0), H = prev.dim(1), W = prev.dim(2), k = params.kernel;
  const float* w = weights.data().data() + static_cast<std::size_t>(out.c) * C * k * k;

  ConvChoice choice;
  choice.channel_contribution.assign(static_cast<std::size_t>(C), 0.0);
  for (int c = 0; c < C; ++c) {
    double s = 0.0;
    for (int u = 0; u < k; ++u) {
      for (int v = 0; v < k; ++v) {
        if (!rp.is_valid(u, v)) continue;
        s += static_cast<double>(rp.patch.at(c, u, v)) * w[(c * k + u) * k + v];
      }
    }
    choice.channel_contribution[static_cast<std::size_t>(c)] = s;
  }
  choice.channel = static_cast<int>(std::max_element(choice.channel_contribution.begin(),
                                                     choice.channel_contribution.end()) -
                                    choice.channel_contribution.begin());

  const int centre = (k - 1) / 2;
  choice.y = std::clamp(rp.origin_y + centre, 0, H - 1);
  choice.x = std::clamp(rp.origin_x + centre, 0, W - 1);
  if (mode == ConvSpatialMode::ArgmaxLocation) {
    const int ch = choice.channel;
    bool found = false;
    double best = 0.0;
    for (int u = 0; u < k; ++u) {
      for (int v = 0; v < k; ++v) {
        if (!rp.is_valid(u, v)) continue;
        const double p = static_cast<double>(rp.patch.at(ch, u, v)) * w[(ch * k + u) * k + v];
        if (!found || p > best) {
          found = true;
          best = p;
          choice.y = rp.origin_y + u;
          choice.x = rp.origin_x + v;
        }
      }
    }
  }
  return choice;
}

FixationSet backtrack_conv(const FixationSet& selected, const Tensor& weights, const Tensor& prev,
                           const ConvParams& params, const BacktrackConfig& cfg, std::string prev_layer) {
  if (!prev.is_spatial() || weights.rank() != 4 || weights.dim(1) != prev.dim(0)) {
    throw ShapeError("conv backtrack: kernel " + shape_string(weights.shape()) + " vs input " +
                     shape_string(prev.shape()));
  }
  std::vector<Coord> out;
  out.reserve(selected.size());
  for (const Coord& sel : selected.coords()) {
    const ConvChoice ch = choose_conv_source(sel, weights, prev, params, cfg.conv_spatial_mode);
    out.push_back({ch.channel, ch.y, ch.x});
  }
  return FixationSet(std::move(prev_layer), std::move(out), selected.fallback_used());
}

FixationSet backtrack_pool(const FixationSet& selected, const Tensor& prev, int kernel, int stride,
                           std::string prev_layer) {
  if (!prev.is_spatial()) throw ShapeError("pool backtrack needs a [C,H,W] input");
  const Shape out_shape{prev.dim(0), conv_output_size(prev.dim(1), kernel, stride, 0),
                        conv_output_size(prev.dim(2), kernel, stride, 0)};
  std::vector<Coord> out;
  out.reserve(selected.size());
  for (const Coord& sel : selected.coords()) {
    require_spatial_coord(sel, out_shape, "pool");
    int by = sel.y * stride, bx = sel.x * stride;
    float best = prev.at(sel.c, by, bx);
    for (int u = 0; u < kernel; ++u) {
      for (int v = 0; v < kernel; ++v) {
        const float a = prev.at(sel.c, sel.y * stride + u, sel.x * stride + v);
        if (a > best) {
          best = a;
          by = sel.y * stride + u;
          bx = sel.x * stride + v;
        }
      }
    }
    out.push_back({sel.c, by, bx});
  }
  return FixationSet(std::move(prev_layer), std::move(out), selected.fallback_used());
}

FixationSet backtrack_relu(const FixationSet& selected, std::string prev_layer) {
  return FixationSet(std::move(prev_layer), selected.coords(), selected.fallback_used());
}

FixationSet backtrack_flatten(const FixationSet& selected, const Shape& shape, std::string prev_layer) {
  if (shape.size() != 3) throw ShapeError("flatten backtrack needs a [C,H,W] shape, got " + shape_string(shape));
  const long plane = static_cast<long>(shape[1]) * shape[2];
  const long total = plane * shape[0];
  std::vector<Coord> out;
  out.reserve(selected.size());
  for (const Coord& sel : selected.coords()) {
    const long n = sel.c;
    if (n < 0 || n >= total || sel.y != 0 || sel.x != 0) {
      throw IndexError("flatten backtrack: index " + std::to_string(n) + " outside " + shape_string(shape));
    }
    out.push_back({static_cast<int>(n / plane), static_cast<int>((n % plane) / shape[2]),
                   static_cast<int>(n % shape[2])});
  }
  return FixationSet(std::move(prev_layer), std::move(out), selected.fallback_used());
}

std::vector<FixationSet> backtrack_concat(const FixationSet& selected, const ChannelRangeTable& ranges,
                                          const std::vector<std::string>& input_layers) {
  std::vector<std::vector<Coord>> split(ranges.size());
  for (const Coord& sel : selected.coords()) {
    auto it = std::find_if(ranges.begin(), ranges.end(),
                           [&](const ChannelRange& r) { return sel.c >= r.start && sel.c < r.end; });
    if (it == ranges.end()) {
      throw IndexError("concat backtrack: channel " + std::to_string(sel.c) + " outside every input range");
    }
    split[static_cast<std::size_t>(it - ranges.begin())].push_back({sel.c - it->start, sel.y, sel.x});
  }
  std::vector<FixationSet> out;
  for (std::size_t b = 0; b < ranges.size(); ++b) {
    out.emplace_back(b < input_layers.size() ? input_layers[b] : std::string{}, std::move(split[b]),
                     selected.fallback_used());
  }
  return out;
}

std::pair<FixationSet, FixationSet> backtrack_add(const FixationSet& selected, const Tensor& skip,
                                                  const Tensor& delta, std::string skip_layer,
                                                  std::string delta_layer) {
  if (skip.shape() != delta.shape()) {
    throw ShapeError("add backtrack: " + shape_string(skip.shape()) + " vs " + shape_string(delta.shape()));
  }
  std::vector<Coord> to_skip, to_delta;
  for (const Coord& sel : selected.coords()) {
    require_spatial_coord(sel, skip.shape(), "add");
    (skip.at(sel.c, sel.y, sel.x) >= delta.at(sel.c, sel.y, sel.x) ? to_skip : to_delta).push_back(sel);
  }
  return {FixationSet(std::move(skip_layer), std::move(to_skip), selected.fallback_used()),
          FixationSet(std::move(delta_layer), std::move(to_delta), selected.fallback_used())};
}

namespace {

struct GateEvidence {
  std::vector<int> x;  // indices into x_t
  std::vector<int> m;  // indices into m_{t-1}
  bool fallback = false;
};

// Positive-contribution inputs of one gate row. The recurrent half is
// skipped at t = 1, where m_0 is the fixed initial state.
GateEvidence gate_evidence(const LstmStep& step, const Tensor& wx, const Tensor& wm, int unit, bool recurrent,
                           const BacktrackConfig& cfg) {
  GateEvidence ev;
  const int nx = wx.dim(1), nm = wm.dim(1);
  const float* rx = wx.data().data() + static_cast<std::size_t>(unit) * nx;
  const float* rm = wm.data().data() + static_cast<std::size_t>(unit) * nm;
  for (int j = 0; j < nx; ++j) {
    if (static_cast<double>(step.x[static_cast<std::size_t>(j)]) * rx[j] > 0.0) ev.x.push_back(j);
  }
  if (recurrent) {
    for (int j = 0; j < nm; ++j) {
      if (static_cast<double>(step.m_prev[static_cast<std::size_t>(j)]) * rm[j] > 0.0) ev.m.push_back(j);
    }
  }
  if (!ev.x.empty() || !ev.m.empty()) return ev;
  if (cfg.empty_set_fallback == EmptySetFallback::Abort) empty_evidence("lstm gate");

  // Argmax over [x contributions, m contributions], lowest index on ties.
  int best = 0;
  double best_value = static_cast<double>(step.x[0]) * rx[0];
  const int total = recurrent ? nx + nm : nx;
  for (int j = 1; j < total; ++j) {
    const double v = j < nx ? static_cast<double>(step.x[static_cast<std::size_t>(j)]) * rx[j]
                            : static_cast<double>(step.m_prev[static_cast<std::size_t>(j - nx)]) * rm[j - nx];
    if (v > best_value) {
      best = j;
      best_value = v;
    }
  }
  (best < nx ? ev.x : ev.m).push_back(best < nx ? best : best - nx);
  ev.fallback = true;
  return ev;
}

}  // namespace

FixationSet backtrack_lstm(const LstmTrace& trace, const LstmWeights& w, std::span<const int> start_units,
                           const BacktrackConfig& cfg, std::string embedding_layer) {
  if (trace.steps.empty()) throw ShapeError("lstm backtrack needs at least one recorded step");
  const int units = w.ix->dim(0);
  std::set<int> current;
  for (int u : start_units) {
    if (u < 0 || u >= units) throw IndexError("lstm backtrack: unit " + std::to_string(u) + " outside " + std::to_string(units));
    current.insert(u);
  }
  std::vector<Coord> embedding;
  bool fallback = false;
  for (int t = static_cast<int>(trace.steps.size()); t >= 1; --t) {
    const LstmStep& s = trace.steps[static_cast<std::size_t>(t - 1)];
    if (s.i.empty() || s.f.empty() || s.o.empty() || s.g.empty() || s.c.empty()) {
      throw ModelError("lstm backtrack: step " + std::to_string(t) + " is missing gate records");
    }
    const bool recurrent = t > 1;
    std::set<int> previous;
    for (int u : current) {
      const auto uu = static_cast<std::size_t>(u);
      // m = o * c: the output gate always carries evidence; the cell state
      // contributes through whichever of its two terms is positive.
      std::vector<std::pair<const Tensor*, const Tensor*>> gates;
      if (static_cast<double>(s.i[uu]) * s.g[uu] > 0.0) gates.emplace_back(w.ix, w.im);
      if (static_cast<double>(s.f[uu]) * s.c_prev[uu] > 0.0) gates.emplace_back(w.fx, w.fm);
      gates.emplace_back(w.ox, w.om);
      if (static_cast<double>(s.i[uu]) * s.g[uu] > 0.0) gates.emplace_back(w.cx, w.cm);
      for (const auto& [wx, wm] : gates) {
        const GateEvidence ev = gate_evidence(s, *wx, *wm, u, recurrent, cfg);
        fallback = fallback || ev.fallback;
        if (t == 1) {
          for (int j : ev.x) embedding.push_back({j, 0, 0});
        }
        previous.insert(ev.m.begin(), ev.m.end());
      }
    }
    current = std::move(previous);
  }
  return FixationSet(std::move(embedding_layer), std::move(embedding), fallback);
}

FixationSet backtrack_lstm(const LstmTrace& trace, const LstmWeights& w, const BacktrackConfig& cfg,
                           std::string embedding_layer) {
  if (trace.steps.empty()) throw ShapeError("lstm backtrack needs at least one recorded step");
  const int start = argmax_lowest(trace.steps.back().m);
  return backtrack_lstm(trace, w, std::span<const int>(&start, 1), cfg, std::move(embedding_layer));
}

StartNeuron predicted_start(const NetworkGraph& graph, const ActivationTrace& trace) {
  const LayerSpec& out = graph.output_layer();
  const Tensor& values = trace.output(graph.num_layers() - 1);
  if (values.rank() != 1) {
    throw ModelError("output layer " + out.name + " is not a vector; pass an explicit start neuron");
  }
  return {out.name, {argmax_lowest(values.data()), 0, 0}};
}

FixationResult compute_fixations(const NetworkGraph& graph, const ActivationTrace& trace,
                                 const StartNeuron& start, const BacktrackConfig& cfg) {
  const int s = graph.index_of(start.layer);
  if (s < 0) throw IndexError("start layer '" + start.layer + "' not in graph");
  const Shape& start_shape = graph.shape_of(s);
  if (start_shape.size() == 1) {
    if (start.coord.c < 0 || start.coord.c >= start_shape[0] || start.coord.y != 0 || start.coord.x != 0) {
      throw IndexError("start neuron " + coord_string(start.coord) + " outside layer " + start.layer + " " +
                       shape_string(start_shape));
    }
  } else {
    require_spatial_coord(start.coord, start_shape, "start");
  }

  FixationResult result;
  result.layers.resize(static_cast<std::size_t>(graph.num_layers()));
  for (int i = 0; i < graph.num_layers(); ++i) result.layers[static_cast<std::size_t>(i)] = FixationSet(graph.layer(i).name, {});
  result.layers[static_cast<std::size_t>(s)] = FixationSet(start.layer, {start.coord});

  auto deliver = [&](int target, const FixationSet& set) { result.layers[static_cast<std::size_t>(target)].merge(set); };

  for (int li = s; li >= 0; --li) {
    const FixationSet& here = result.layers[static_cast<std::size_t>(li)];
    if (here.empty()) continue;
    const LayerSpec& l = graph.layer(li);
    const std::vector<int> in = graph.input_indices(li);
    auto prev_name = [&](std::size_t k) { return graph.layer(in[k]).name; };
    auto prev_act = [&](std::size_t k) -> const Tensor& { return trace.output(in[k]); };

    switch (l.kind) {
      case LayerKind::Input:
        break;
      case LayerKind::Conv:
        deliver(in[0], backtrack_conv(here, l.weight("kernel"), prev_act(0), l.conv, cfg, prev_name(0)));
        break;
      case LayerKind::ReLU:
      case LayerKind::Softmax:
        deliver(in[0], backtrack_relu(here, prev_name(0)));
        break;
      case LayerKind::MaxPool:
        deliver(in[0], backtrack_pool(here, prev_act(0), l.pool.kernel, l.pool.stride, prev_name(0)));
        break;
      case LayerKind::Flatten: {
        const Shape& shape = graph.shape_of(in[0]);
        if (shape.size() == 3) {
          deliver(in[0], backtrack_flatten(here, shape, prev_name(0)));
        } else {
          deliver(in[0], backtrack_relu(here, prev_name(0)));
        }
        break;
      }
      case LayerKind::FullyConnected:
        deliver(in[0], backtrack_fc(here, l.weight("matrix"), prev_act(0).data(), cfg, prev_name(0)));
        break;
      case LayerKind::Concat: {
        const ChannelRangeTable* ranges = trace.concat_ranges(li);
        if (!ranges) throw ModelError("trace has no channel ranges for concat " + l.name);
        std::vector<std::string> names;
        for (std::size_t k = 0; k < in.size(); ++k) names.push_back(prev_name(k));
        const auto parts = backtrack_concat(here, *ranges, names);
        for (std::size_t k = 0; k < in.size(); ++k) deliver(in[k], parts[k]);
        break;
      }
      case LayerKind::Add: {
        auto [skip, delta] = backtrack_add(here, prev_act(0), prev_act(1), prev_name(0), prev_name(1));
        deliver(in[0], skip);
        deliver(in[1], delta);
        break;
      }
      case LayerKind::LstmCell: {
        const LstmTrace* lt = trace.lstm(li);
        if (!lt) throw ModelError("trace has no LSTM record for " + l.name);
        std::vector<int> units;
        for (const Coord& c : here.coords()) units.push_back(c.c);
        FixationSet emb = backtrack_lstm(*lt, LstmWeights::of(l), units, cfg, prev_name(0));
        if (here.fallback_used() && !emb.fallback_used()) emb = FixationSet(emb.layer(), emb.coords(), true);
        deliver(in[0], emb);
        break;
      }
    }
  }

  const FixationSet& at_input = result.layers[static_cast<std::size_t>(graph.index_of(graph.input_layer().name))];
  for (const Coord& c : at_input.coords()) result.pixels.push_back({c.x, c.y});
  std::sort(result.pixels.begin(), result.pixels.end());
  result.pixels.erase(std::unique(result.pixels.begin(), result.pixels.end()), result.pixels.end());
  for (const FixationSet& set : result.layers) result.fallback_used = result.fallback_used || set.fallback_used();
  return result;
}

}  // namespace cnnfix
