#ifndef CNNFIX_TESTS_ROUTING_CHECKS_HPP_
#define CNNFIX_TESTS_ROUTING_CHECKS_HPP_

#include <string>
#include <vector>

#include "cnnfix/backtrack.hpp"
#include "cnnfix/forward.hpp"

// Checks on a finished compute_fixations result, shared by the unit tests
// and the acceptance binary. Each returns human-readable violations.
namespace routing {

// Every fixation at an Add layer must appear on the input with the larger
// recorded activation (skip on ties), and the delta input receives nothing
// else from the Add.
inline std::vector<std::string> residual_violations(const cnnfix::NetworkGraph& g, const cnnfix::ActivationTrace& t,
                                                    const cnnfix::FixationResult& r, long* checked = nullptr) {
  using namespace cnnfix;
  std::vector<std::string> bad;
  for (int l = 0; l < g.num_layers(); ++l) {
    if (g.layer(l).kind != LayerKind::Add) continue;
    const std::vector<int> in = g.input_indices(l);
    const Tensor& skip = t.output(in[0]);
    const Tensor& delta = t.output(in[1]);
    long to_delta = 0;
    for (const Coord& c : r.layers[l].coords()) {
      if (checked) ++*checked;
      const bool skip_wins = skip.at(c.c, c.y, c.x) >= delta.at(c.c, c.y, c.x);
      const int want = skip_wins ? in[0] : in[1];
      if (!r.layers[want].contains(c)) bad.push_back(g.layer(l).name + ": fixation not on larger branch");
      if (!skip_wins) ++to_delta;
      if (skip_wins && r.layers[in[1]].contains(c)) bad.push_back(g.layer(l).name + ": fixation leaked to delta");
    }
    // The delta branch is fed only by this Add.
    if (static_cast<long>(r.layers[in[1]].size()) != to_delta) bad.push_back(g.layer(l).name + ": delta set size");
  }
  return bad;
}

// Every output channel of every Concat maps to exactly one input range,
// rebases back to itself, and each fixation reappears unchanged on the input
// that produced it.
inline std::vector<std::string> concat_violations(const cnnfix::NetworkGraph& g, const cnnfix::ActivationTrace& t,
                                                  const cnnfix::FixationResult& r, long* checked = nullptr) {
  using namespace cnnfix;
  std::vector<std::string> bad;
  for (int l = 0; l < g.num_layers(); ++l) {
    if (g.layer(l).kind != LayerKind::Concat) continue;
    const std::string& name = g.layer(l).name;
    const ChannelRangeTable* ranges = t.concat_ranges(l);
    if (!ranges) {
      bad.push_back(name + ": no channel ranges recorded");
      continue;
    }
    const std::vector<int> in = g.input_indices(l);
    const Tensor& out = t.output(l);
    for (int c = 0; c < g.shape_of(l)[0]; ++c) {
      int owners = 0;
      for (std::size_t j = 0; j < ranges->size(); ++j) {
        const ChannelRange& range = (*ranges)[j];
        if (c < range.start || c >= range.end) continue;
        ++owners;
        const int local = c - range.start;
        const Tensor& src = t.output(in[j]);
        if (range.start + local != c || local >= src.dim(0)) bad.push_back(name + ": bad rebase");
        for (int y = 0; y < out.dim(1); ++y)
          for (int x = 0; x < out.dim(2); ++x)
            if (out.at(c, y, x) != src.at(local, y, x)) bad.push_back(name + ": copied value differs");
      }
      if (owners != 1) bad.push_back(name + ": channel " + std::to_string(c) + " has " + std::to_string(owners) + " owners");
    }
    for (const Coord& c : r.layers[l].coords()) {
      if (checked) ++*checked;
      for (std::size_t j = 0; j < ranges->size(); ++j) {
        const ChannelRange& range = (*ranges)[j];
        if (c.c >= range.start && c.c < range.end && !r.layers[in[j]].contains({c.c - range.start, c.y, c.x})) {
          bad.push_back(name + ": fixation missing on input " + g.layer(in[j]).name);
        }
      }
    }
  }
  return bad;
}

}  // namespace routing

#endif  // CNNFIX_TESTS_ROUTING_CHECKS_HPP_
