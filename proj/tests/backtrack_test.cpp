#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "cnnfix/backtrack.hpp"
#include "cnnfix/error.hpp"
#include "cnnfix/fixtures.hpp"
#include "cnnfix/forward.hpp"
#include "cnnfix/io.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace cnnfix;
using testutil::lattice_tensor;
using testutil::random_tensor;

namespace {

FixationSet vec_set(std::initializer_list<int> idx) {
  std::vector<Coord> c;
  for (int i : idx) c.push_back({i, 0, 0});
  return FixationSet("l", c);
}

std::set<int> indices(const FixationSet& s) {
  std::set<int> out;
  for (const Coord& c : s.coords()) out.insert(c.c);
  return out;
}

int same_location(int o, int stride, int pad, int k, int size) {
  return std::clamp(o * stride - pad + (k - 1) / 2, 0, size - 1);
}

std::vector<FixtureKind> spatial_kinds() {
  return {FixtureKind::BlobDetector, FixtureKind::RandomCnn, FixtureKind::InceptionToy,
          FixtureKind::ResidualToy,  FixtureKind::DenseToy,  FixtureKind::Depth2Toy, FixtureKind::ToyLstm};
}

oracle::Vec vf(const std::vector<float>& v) { return oracle::Vec(v.begin(), v.end()); }

std::set<int> lstm_oracle(const LstmTrace& tr, const LayerSpec& cell, int start, bool* fallback = nullptr) {
  std::vector<oracle::LstmStepRecord> steps;
  for (const LstmStep& s : tr.steps) steps.push_back({vf(s.x), vf(s.m_prev), vf(s.c_prev), vf(s.i), vf(s.f), vf(s.o), vf(s.g)});
  auto gate = [&](const char* x, const char* m) {
    return oracle::LstmGateWeights{testutil::to_grid(cell.weight(x)), testutil::to_grid(cell.weight(m))};
  };
  std::vector<oracle::LstmGateWeights> gates = {gate("W_ix", "W_im"), gate("W_fx", "W_fm"), gate("W_ox", "W_om"),
                                                gate("W_cx", "W_cm")};
  std::set<int> out;
  long paths = 0;
  bool fb = false;
  oracle::lstm_paths(steps, gates, static_cast<int>(steps.size()), start, out, paths, fb);
  if (fallback) *fallback = fb;
  return out;
}

}  // namespace

TEST(FixationSet, SortedAndUnique) {
  FixationSet s("l", {{1, 0, 2}, {0, 3, 3}, {1, 0, 2}, {0, 0, 1}});
  EXPECT_EQ(s.coords(), (std::vector<Coord>{{0, 0, 1}, {0, 3, 3}, {1, 0, 2}}));
  EXPECT_TRUE(s.contains({0, 3, 3}));
  s.merge(FixationSet("l", {{0, 3, 3}, {2, 0, 0}}, true));
  EXPECT_EQ(s.size(), 4u);
  EXPECT_TRUE(s.fallback_used());
}

TEST(BacktrackFc, SignInspection) {
  const float a[] = {1, 0, 2};
  FixationSet r = backtrack_fc(vec_set({0}), Tensor({1, 3}, {1, 1, -1}), a);
  EXPECT_EQ(indices(r), (std::set<int>{0}));
  EXPECT_FALSE(r.fallback_used());
}

TEST(BacktrackFc, ZeroInputFallsBack) {
  const float a[] = {0, 0, 0};
  FixationSet r = backtrack_fc(vec_set({0}), Tensor({1, 3}, {1, 1, -1}), a);
  EXPECT_EQ(indices(r), (std::set<int>{0}));
  EXPECT_TRUE(r.fallback_used());
  BacktrackConfig abort;
  abort.empty_set_fallback = EmptySetFallback::Abort;
  EXPECT_THROW(backtrack_fc(vec_set({0}), Tensor({1, 3}, {1, 1, -1}), a, abort), EmptyEvidenceError);
}

TEST(BacktrackFc, MatchesDoubleLoop) {
  oracle::Rng rng(1);
  for (int n = 0; n < 300; ++n) {
    Tensor w = lattice_tensor(rng, {8, 16}, -2, 2), a = lattice_tensor(rng, {16}, -1, 2);
    std::vector<int> sel = {rng.integer(0, 7), rng.integer(0, 7), rng.integer(0, 7)};
    std::vector<Coord> coords;
    for (int i : sel) coords.push_back({i, 0, 0});
    FixationSet r = backtrack_fc(FixationSet("fc", coords), w, a.data());
    std::sort(sel.begin(), sel.end());
    sel.erase(std::unique(sel.begin(), sel.end()), sel.end());
    oracle::FcResult ref = oracle::fc_backtrack(sel, testutil::to_grid(w), testutil::to_vec(a.data()));
    EXPECT_EQ(indices(r), ref.indices);
    EXPECT_EQ(r.fallback_used(), ref.fallback);
    if (!r.fallback_used()) {
      for (int j : indices(r)) {
        bool ok = false;
        for (int i : sel) ok = ok || a[static_cast<std::size_t>(j)] * w[static_cast<std::size_t>(i * 16 + j)] > 0.0f;
        EXPECT_TRUE(ok);
      }
    }
  }
}

TEST(BacktrackFc, OutOfRangeNeuron) {
  const float a[] = {1, 1};
  EXPECT_THROW(backtrack_fc(vec_set({2}), Tensor({2, 2}, 1.0f), a), IndexError);
}

TEST(BacktrackConv, SingleChannelUnitKernel) {
  oracle::Rng rng(2);
  Tensor prev = random_tensor(rng, {1, 6, 6}), w({2, 1, 1, 1}, 1.0f);
  const ConvParams p{1, 2, 0, 2};
  for (ConvSpatialMode mode : {ConvSpatialMode::SameLocation, ConvSpatialMode::ArgmaxLocation}) {
    BacktrackConfig cfg;
    cfg.conv_spatial_mode = mode;
    FixationSet r = backtrack_conv(FixationSet("c", {{1, 2, 1}}), w, prev, p, cfg);
    EXPECT_EQ(r.coords(), (std::vector<Coord>{{0, 4, 2}}));
  }
}

TEST(BacktrackConv, ChannelWithLargestSum) {
  // Middle row only: channel 0 sums to +3, channel 1 to -1.
  Tensor prev({2, 3, 3}), w({1, 2, 3, 3});
  for (int v = 0; v < 3; ++v) {
    prev.at(0, 1, v) = 1.0f;
    w[static_cast<std::size_t>(3 + v)] = 1.0f;
  }
  prev.at(1, 1, 0) = 1.0f;
  w[static_cast<std::size_t>(9 + 3)] = -1.0f;
  ConvChoice ch = choose_conv_source({0, 0, 0}, w, prev, {3, 1, 0, 1}, ConvSpatialMode::SameLocation);
  EXPECT_EQ(ch.channel, 0);
  EXPECT_DOUBLE_EQ(ch.channel_contribution[0], 3.0);
  EXPECT_DOUBLE_EQ(ch.channel_contribution[1], -1.0);
}

TEST(BacktrackConv, MatchesBruteForce) {
  oracle::Rng rng(3);
  for (int n = 0; n < 200; ++n) {
    const int C = rng.integer(1, 4), K = rng.integer(1, 3), k = 2 * rng.integer(0, 2) + 1;
    const int stride = rng.integer(1, 2), pad = rng.integer(0, k / 2);
    const int H = rng.integer(k, 8), W = rng.integer(k, 8);
    Tensor prev = lattice_tensor(rng, {C, H, W}, 0, 3), w = lattice_tensor(rng, {K, C, k, k}, -2, 2);
    const ConvParams p{k, stride, pad, K};
    const int Ho = conv_output_size(H, k, stride, pad), Wo = conv_output_size(W, k, stride, pad);
    const Coord out{rng.integer(0, K - 1), rng.integer(0, Ho - 1), rng.integer(0, Wo - 1)};
    oracle::ConvResult ref =
        oracle::conv_backtrack_argmax(testutil::to_vol(prev), testutil::to_kernel(w), out.c, out.y, out.x, stride, pad);
    ConvChoice a = choose_conv_source(out, w, prev, p, ConvSpatialMode::ArgmaxLocation);
    EXPECT_EQ(a.channel, ref.channel);
    EXPECT_EQ(a.y, ref.y);
    EXPECT_EQ(a.x, ref.x);
    ConvChoice s = choose_conv_source(out, w, prev, p, ConvSpatialMode::SameLocation);
    EXPECT_EQ(s.channel, ref.channel);
    EXPECT_EQ(s.y, same_location(out.y, stride, pad, k, H));
    EXPECT_EQ(s.x, same_location(out.x, stride, pad, k, W));
  }
}

TEST(BacktrackConv, StaysInsideReceptiveField) {
  oracle::Rng rng(4);
  Tensor prev = random_tensor(rng, {3, 9, 9}), w = random_tensor(rng, {4, 3, 5, 5});
  const ConvParams p{5, 2, 2, 4};
  std::vector<Coord> all;
  for (int f = 0; f < 4; ++f)
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 5; ++x) all.push_back({f, y, x});
  for (ConvSpatialMode mode : {ConvSpatialMode::SameLocation, ConvSpatialMode::ArgmaxLocation}) {
    for (const Coord& o : all) {
      ConvChoice c = choose_conv_source(o, w, prev, p, mode);
      EXPECT_GE(c.y, std::max(0, o.y * 2 - 2));
      EXPECT_LE(c.y, std::min(8, o.y * 2 + 2));
      EXPECT_GE(c.x, std::max(0, o.x * 2 - 2));
      EXPECT_LE(c.x, std::min(8, o.x * 2 + 2));
    }
    BacktrackConfig cfg;
    cfg.conv_spatial_mode = mode;
    FixationSet r = backtrack_conv(FixationSet("c", all), w, prev, p, cfg);
    EXPECT_TRUE(std::is_sorted(r.coords().begin(), r.coords().end()));
    EXPECT_EQ(std::adjacent_find(r.coords().begin(), r.coords().end()), r.coords().end());
  }
}

TEST(BacktrackConv, InvalidCoordinate) {
  EXPECT_THROW(backtrack_conv(FixationSet("c", {{0, 5, 0}}), Tensor({1, 1, 3, 3}), Tensor({1, 4, 4}), {3, 1, 1, 1}),
               IndexError);
}

TEST(BacktrackPool, DirectArgmaxAndTies) {
  FixationSet r = backtrack_pool(FixationSet("p", {{0, 0, 0}}), Tensor({1, 2, 2}, {1, 3, 2, 0}), 2, 2);
  EXPECT_EQ(r.coords(), (std::vector<Coord>{{0, 0, 1}}));
  r = backtrack_pool(FixationSet("p", {{0, 1, 1}}), Tensor({1, 4, 4}, 7.0f), 2, 2);
  EXPECT_EQ(r.coords(), (std::vector<Coord>{{0, 2, 2}}));
  EXPECT_THROW(backtrack_pool(FixationSet("p", {{0, 2, 0}}), Tensor({1, 4, 4}), 2, 2), IndexError);
}

TEST(BacktrackPool, TracedValueEqualsPooledValue) {
  oracle::Rng rng(5);
  for (int n = 0; n < 50; ++n) {
    Tensor prev = lattice_tensor(rng, {3, 8, 8}, 0, 4);
    Tensor pooled = maxpool_forward(prev, 2, 2);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) {
          FixationSet r = backtrack_pool(FixationSet("p", {{c, y, x}}), prev, 2, 2);
          ASSERT_EQ(r.size(), 1u);
          const Coord s = r.coords()[0];
          EXPECT_EQ(prev.at(s.c, s.y, s.x), pooled.at(c, y, x));
        }
  }
}

TEST(BacktrackRelu, Identity) {
  FixationSet s("r", {{0, 1, 2}, {3, 0, 0}});
  EXPECT_EQ(backtrack_relu(s, "r").coords(), s.coords());
  EXPECT_TRUE(backtrack_relu(FixationSet()).empty());
}

TEST(BacktrackFlatten, Arithmetic) {
  EXPECT_EQ(backtrack_flatten(vec_set({5}), {2, 2, 2}).coords(), (std::vector<Coord>{{1, 0, 1}}));
  EXPECT_EQ(backtrack_flatten(vec_set({0}), {2, 2, 2}).coords(), (std::vector<Coord>{{0, 0, 0}}));
  EXPECT_THROW(backtrack_flatten(vec_set({8}), {2, 2, 2}), IndexError);
}

TEST(BacktrackFlatten, RoundTrip) {
  for (int n = 0; n < 60; ++n) {
    FixationSet r = backtrack_flatten(vec_set({n}), {3, 4, 5});
    const Coord c = r.coords()[0];
    EXPECT_EQ(c.c * 20 + c.y * 5 + c.x, n);
  }
}

TEST(BacktrackConcat, Arithmetic) {
  const ChannelRangeTable ranges = {{0, 2}, {2, 5}};
  auto parts = backtrack_concat(FixationSet("cat", {{3, 1, 1}, {0, 2, 2}}), ranges);
  ASSERT_EQ(parts.size(), 2u);
  EXPECT_EQ(parts[0].coords(), (std::vector<Coord>{{0, 2, 2}}));
  EXPECT_EQ(parts[1].coords(), (std::vector<Coord>{{1, 1, 1}}));
  EXPECT_THROW(backtrack_concat(FixationSet("cat", {{5, 0, 0}}), ranges), IndexError);
}

TEST(BacktrackConcat, SplitAndMergeRoundTrips) {
  oracle::Rng rng(6);
  const ChannelRangeTable ranges = {{0, 1}, {1, 4}, {4, 6}};
  for (int n = 0; n < 50; ++n) {
    std::vector<Coord> coords;
    for (int i = 0; i < 10; ++i) coords.push_back({rng.integer(0, 5), rng.integer(0, 3), rng.integer(0, 3)});
    FixationSet s("cat", coords);
    auto parts = backtrack_concat(s, ranges);
    std::vector<Coord> back;
    for (std::size_t b = 0; b < parts.size(); ++b)
      for (Coord c : parts[b].coords()) {
        c.c += ranges[b].start;
        back.push_back(c);
      }
    EXPECT_EQ(FixationSet("cat", back).coords(), s.coords());
  }
}

TEST(BacktrackAdd, SkipWinsTies) {
  Tensor skip({1, 1, 3}, {5, 2, 1}), delta({1, 1, 3}, {3, 2, 4});
  auto [s, d] = backtrack_add(FixationSet("a", {{0, 0, 0}, {0, 0, 1}, {0, 0, 2}}), skip, delta);
  EXPECT_EQ(s.coords(), (std::vector<Coord>{{0, 0, 0}, {0, 0, 1}}));
  EXPECT_EQ(d.coords(), (std::vector<Coord>{{0, 0, 2}}));
  EXPECT_THROW(backtrack_add(FixationSet(), skip, Tensor({1, 1, 2})), ShapeError);
}

TEST(BacktrackAdd, PartitionMatchesComparison) {
  oracle::Rng rng(7);
  Tensor skip = lattice_tensor(rng, {2, 5, 5}, -2, 2), delta = lattice_tensor(rng, {2, 5, 5}, -2, 2);
  std::vector<Coord> all;
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 5; ++x) all.push_back({c, y, x});
  auto [s, d] = backtrack_add(FixationSet("a", all), skip, delta);
  EXPECT_EQ(s.size() + d.size(), all.size());
  for (const Coord& c : all) {
    const bool to_skip = skip.at(c.c, c.y, c.x) >= delta.at(c.c, c.y, c.x);
    EXPECT_EQ(s.contains(c), to_skip);
    EXPECT_EQ(d.contains(c), !to_skip);
  }
}

TEST(BacktrackLstm, MatchesPathEnumeration) {
  for (int steps : {1, 2, 3}) {
    for (std::uint64_t seed = 1; seed <= 40; ++seed) {
      NetworkGraph g = make_toy_lstm(seed, steps);
      ActivationTrace tr = run_forward(g, image_to_tensor(make_fixture_image(FixtureKind::ToyLstm, seed)));
      const int li = g.index_of("lstm");
      const LstmTrace& lt = *tr.lstm(li);
      const LayerSpec& cell = g.layer(li);
      const int start = argmax_lowest(lt.steps.back().m);
      bool fb = false;
      const std::set<int> expected = lstm_oracle(lt, cell, start, &fb);
      FixationSet r = backtrack_lstm(lt, LstmWeights::of(cell));
      EXPECT_EQ(indices(r), expected) << "steps " << steps << " seed " << seed;
      EXPECT_EQ(r.fallback_used(), fb) << "steps " << steps << " seed " << seed;
    }
  }
}

TEST(BacktrackLstm, ZeroInitialCellExcludesForgetTerm) {
  // Only the forget gate has weights; with c_0 = 0 it is never traced, so the
  // remaining gates fall back on an all-zero contribution row.
  LayerSpec cell;
  cell.name = "lstm";
  cell.kind = LayerKind::LstmCell;
  cell.lstm = {2, 3, 1};
  for (const char* role : kLstmGateRoles) cell.weights[role] = Tensor(role[3] == 'm' ? Shape{2, 2} : Shape{2, 3});
  cell.weights["W_fx"] = Tensor({2, 3}, 1.0f);
  const float x[] = {0.5f, 1.0f, 2.0f};
  LstmTrace t = run_lstm_unrolled(cell, x);
  FixationSet r = backtrack_lstm(t, LstmWeights::of(cell));
  EXPECT_EQ(indices(r), (std::set<int>{0}));
  EXPECT_TRUE(r.fallback_used());
}

TEST(BacktrackLstm, NegativeEvidenceFallsBackPerGate) {
  LayerSpec cell;
  cell.name = "lstm";
  cell.kind = LayerKind::LstmCell;
  cell.lstm = {1, 3, 1};
  for (const char* role : kLstmGateRoles) cell.weights[role] = Tensor(role[3] == 'm' ? Shape{1, 1} : Shape{1, 3});
  cell.weights["W_ox"] = Tensor({1, 3}, {-3, -1, -2});
  const float x[] = {1.0f, 1.0f, 1.0f};
  FixationSet r = backtrack_lstm(run_lstm_unrolled(cell, x), LstmWeights::of(cell));
  EXPECT_EQ(indices(r), (std::set<int>{1}));
  EXPECT_TRUE(r.fallback_used());
}

TEST(ComputeFixations, StartAtInputIsIdentity) {
  NetworkGraph g = make_blob_detector();
  ActivationTrace t = run_forward(g, image_to_tensor(make_fixture_image(FixtureKind::BlobDetector, 3)));
  FixationResult r = compute_fixations(g, t, {"image", {0, 17, 42}});
  EXPECT_EQ(r.pixels, (std::vector<Pixel>{{42, 17}}));
}

TEST(ComputeFixations, InvalidStart) {
  NetworkGraph g = make_blob_detector();
  ActivationTrace t = run_forward(g, image_to_tensor(make_fixture_image(FixtureKind::BlobDetector, 3)));
  EXPECT_THROW(compute_fixations(g, t, {"nope", {0, 0, 0}}), IndexError);
  EXPECT_THROW(compute_fixations(g, t, {"prob", {4, 0, 0}}), IndexError);
}

TEST(ComputeFixations, BlobFixationsStayInPredictedQuadrant) {
  NetworkGraph g = make_blob_detector();
  BlobImageGenerator gen(11);
  for (int n = 0; n < 40; ++n) {
    BlobSample s = gen.next();
    ActivationTrace t = run_forward(g, image_to_tensor(s.image));
    const int cls = predict_label(t);
    FixationResult r = compute_fixations(g, t, predicted_start(g, t));
    ASSERT_FALSE(r.pixels.empty());
    for (const Pixel& p : r.pixels) {
      EXPECT_EQ((p.x >= 32) + 2 * (p.y >= 32), cls);
    }
  }
}

TEST(ComputeFixations, Depth2EqualsPathOracle) {
  for (std::uint64_t seed = 1; seed <= 30; ++seed) {
    NetworkGraph g = make_depth2_toy(seed);
    ActivationTrace t = run_forward(g, image_to_tensor(make_fixture_image(FixtureKind::Depth2Toy, seed)));
    for (int cls = 0; cls < 4; ++cls) {
      const StartNeuron start{"fc", {cls, 0, 0}};
      FixationResult r = compute_fixations(g, t, start);
      OracleResult o = exhaustive_path_oracle(g, t, start);
      EXPECT_EQ(r.pixels, o.pixels) << "seed " << seed << " class " << cls;
      EXPECT_EQ(r.fallback_used, o.fallback_used);
    }
  }
}

TEST(ComputeFixations, HandlerInvariantsOnAllFixtures) {
  for (FixtureKind k : spatial_kinds()) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      NetworkGraph g = make_fixture(k, seed);
      ActivationTrace t = run_forward(g, image_to_tensor(make_fixture_image(k, seed)));
      const StartNeuron start = predicted_start(g, t);
      FixationResult a = compute_fixations(g, t, start), b = compute_fixations(g, t, start);
      EXPECT_EQ(a.pixels, b.pixels);
      ASSERT_EQ(a.layers.size(), static_cast<std::size_t>(g.num_layers()));
      for (int l = 0; l < g.num_layers(); ++l) {
        EXPECT_EQ(a.layers[l], b.layers[l]);
        const Shape& shape = g.shape_of(l);
        for (const Coord& c : a.layers[l].coords()) {
          if (shape.size() == 3) {
            EXPECT_TRUE(c.c >= 0 && c.c < shape[0] && c.y >= 0 && c.y < shape[1] && c.x >= 0 && c.x < shape[2]);
          } else {
            EXPECT_TRUE(c.c >= 0 && c.c < shape[0]);
          }
        }
        // Conv channel optimality for every fixation arriving at a conv layer.
        const LayerSpec& spec = g.layer(l);
        if (spec.kind != LayerKind::Conv) continue;
        const int src = g.input_indices(l)[0];
        for (const Coord& c : a.layers[l].coords()) {
          oracle::ConvResult ref = oracle::conv_backtrack_argmax(testutil::to_vol(t.output(src)),
                                                                 testutil::to_kernel(spec.weight("kernel")), c.c, c.y,
                                                                 c.x, spec.conv.stride, spec.conv.pad);
          const int y = same_location(c.y, spec.conv.stride, spec.conv.pad, spec.conv.kernel, g.shape_of(src)[1]);
          const int x = same_location(c.x, spec.conv.stride, spec.conv.pad, spec.conv.kernel, g.shape_of(src)[2]);
          EXPECT_TRUE(a.layers[src].contains({ref.channel, y, x}));
        }
      }
      for (const Pixel& p : a.pixels) {
        EXPECT_TRUE(p.x >= 0 && p.x < g.input_layer().input_shape[2] && p.y >= 0 &&
                    p.y < g.input_layer().input_shape[1]);
      }
    }
  }
}
