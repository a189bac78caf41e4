#ifndef CNNFIX_FIXTURES_HPP_
#define CNNFIX_FIXTURES_HPP_

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "cnnfix/backtrack.hpp"
#include "cnnfix/graph.hpp"
#include "cnnfix/io.hpp"
#include "cnnfix/postprocess.hpp"

namespace cnnfix {

// Deterministic random source for fixtures. The engine is std::mt19937_64
// (fixed by the C++ standard: w=64, n=312, m=156, r=31,
// a=0xB5026F5AA96619E9, default seed 5489). Floats are derived from the raw
// 64-bit output only, never through <random> distributions, whose algorithms
// are implementation-defined.
class FixtureRng {
 public:
  explicit FixtureRng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  // Uniform in [0, 1) from the top 53 bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  float uniform(float lo, float hi) { return static_cast<float>(lo + (hi - lo) * uniform()); }
  // Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi) {
    return lo + static_cast<int>(engine_() % static_cast<std::uint64_t>(hi - lo + 1));
  }
  Tensor tensor(const Shape& shape, float lo, float hi);

 private:
  std::mt19937_64 engine_;
};

enum class FixtureKind { BlobDetector, RandomCnn, ToyLstm, InceptionToy, ResidualToy, DenseToy, Depth2Toy };

std::string to_string(FixtureKind kind);
std::optional<FixtureKind> parse_fixture_kind(const std::string& name);

// ---------------------------------------------------------------------------
// Blob detector: a 4-class quadrant classifier with hand-set weights.
//
//   Input[1,S,S] -> Conv5x5 mean, bias -0.2 -> ReLU -> MaxPool2
//                -> Conv3x3 mean, bias -0.01 -> ReLU -> MaxPool2
//                -> Flatten -> FC(4) -> Softmax
//
// Classes: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right. FC row q
// is +1 over the pooled cells of quadrant q and -1 elsewhere, so only cells
// lit by the blob carry positive evidence.
// ---------------------------------------------------------------------------
struct BlobDetectorOptions {
  int size = 64;  // multiple of 8
};
NetworkGraph make_blob_detector(const BlobDetectorOptions& options = {});

struct BlobSample {
  Image image;
  int quadrant = 0;
  BoundingBox box;  // pixels where the blob is >= kBlobBoxLevel of its peak
  double sigma = 0.0;
  int centre_x = 0;
  int centre_y = 0;
};

inline constexpr double kBlobBoxLevel = 0.1;

// Gaussian blob of peak 1.0 centred in one quadrant over uniform noise in
// [0, noise]. Images are quantized to 8 bits, so they survive a PGM round trip.
class BlobImageGenerator {
 public:
  explicit BlobImageGenerator(std::uint64_t seed, int size = 64, double noise = 0.1)
      : rng_(seed), size_(size), noise_(noise) {}

  BlobSample next();
  BlobSample make(int quadrant, int centre_x, int centre_y, double sigma);

  int size() const { return size_; }

 private:
  FixtureRng rng_;
  int size_;
  double noise_;
};

// ---------------------------------------------------------------------------
// Seeded random-weight architectures.
// ---------------------------------------------------------------------------

// `depth` Conv3x3(pad 1)+ReLU stages, each followed by MaxPool2 while the map
// is at least 8 wide; then Flatten -> FC(hidden) -> ReLU -> FC(classes) -> Softmax.
struct RandomCnnOptions {
  int depth = 2;
  int input_size = 16;
  int input_channels = 1;
  int channels = 4;
  int hidden = 16;
  int classes = 4;
};
NetworkGraph make_random_cnn(std::uint64_t seed, const RandomCnnOptions& options = {});

// Stem conv then three parallel convs (1x1, 3x3, 5x5) joined by Concat.
NetworkGraph make_inception_toy(std::uint64_t seed);
// Two residual blocks; every Add takes inputs (skip, delta).
NetworkGraph make_residual_toy(std::uint64_t seed);
// Two dense concatenations of an earlier map with a new conv branch.
NetworkGraph make_dense_toy(std::uint64_t seed);
// Small CNN -> FC embedding -> 2-unit LstmCell unrolled `steps` times ->
// FC -> Softmax.
NetworkGraph make_toy_lstm(std::uint64_t seed, int steps = 1);
// Input[2,4,4] -> Conv1x1(3) -> Flatten -> FC(4); small enough to enumerate
// every positive chain.
NetworkGraph make_depth2_toy(std::uint64_t seed);

NetworkGraph make_fixture(FixtureKind kind, std::uint64_t seed);
// Image matching the fixture's input shape: a blob sample for the blob
// detector, seeded uniform noise otherwise.
Image make_fixture_image(FixtureKind kind, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Exhaustive path oracle: follows every single-neuron chain from `start`
// down to the input using per-neuron evidence rules written out directly on
// activations and weights (no backtrack_* calls). Supports Input, Conv, ReLU,
// MaxPool, Flatten, FullyConnected, Softmax. The FC fallback is applied per
// chain, which equals the set rule whenever an FC layer receives one neuron.
// ---------------------------------------------------------------------------
inline constexpr int kOracleMaxRoutingLayers = 3;
inline constexpr long kOracleMaxPaths = 10000;

struct OracleResult {
  std::vector<Pixel> pixels;
  long paths = 0;
  bool fallback_used = false;
};

OracleResult exhaustive_path_oracle(const NetworkGraph& graph, const ActivationTrace& trace,
                                    const StartNeuron& start, const BacktrackConfig& cfg = {});

}  // namespace cnnfix

#endif  // CNNFIX_FIXTURES_HPP_
