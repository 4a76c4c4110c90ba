#pragma once

// Counting identities for complete k-ary trees stored in array order
// (children of node i at k·i+1 … k·i+k). Height counts edges, so a
// root-to-leaf path visits h+1 nodes.

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <utility>
#include <vector>

#include "treecoder/errors.hpp"

namespace treecoder {

inline std::uint64_t ipow(std::uint64_t base, std::uint64_t exp) {
  std::uint64_t r = 1;
  while (exp--) r *= base;
  return r;
}

inline std::uint64_t node_count(std::uint64_t k, std::uint64_t h) {
  if (k == 0) throw ConfigError("branching factor must be at least 1");
  if (k == 1) return h + 1;
  return (ipow(k, h + 1) - 1) / (k - 1);
}

// Nodes that own a selector. A chain (k = 1) routes nowhere and has none.
inline std::uint64_t internal_count(std::uint64_t k, std::uint64_t h) {
  if (k == 0) throw ConfigError("branching factor must be at least 1");
  if (k == 1 || h == 0) return 0;
  return (ipow(k, h) - 1) / (k - 1);
}

inline std::uint64_t leaf_count(std::uint64_t k, std::uint64_t h) { return ipow(k, h); }

inline std::uint64_t first_leaf(std::uint64_t k, std::uint64_t h) {
  return node_count(k, h) - leaf_count(k, h);
}

inline std::uint64_t child_of(std::uint64_t k, std::uint64_t node, std::uint64_t choice) {
  return k * node + 1 + choice;
}

// Share of node parameters a single sequence touches, in percent.
inline double active_fraction(std::uint64_t k, std::uint64_t h) {
  return 100.0 * static_cast<double>(h + 1) / static_cast<double>(node_count(k, h));
}

// One-decimal rounding used by the tabular reports.
inline double round1(double v) { return std::round(v * 10.0) / 10.0; }

inline std::uint64_t path_length(std::uint64_t h, std::uint64_t dec) { return (h + 1) * dec; }

struct TreeShape {
  std::uint64_t h = 0;
  std::uint64_t dec = 1;
  auto operator<=>(const TreeShape&) const = default;
};

using EquivalenceGroups = std::map<std::uint64_t, std::vector<TreeShape>>;

// Groups the given (h, dec) shapes by path length. Every group also gets the
// linear transformer of the same depth, (0, path length), listed first.
inline EquivalenceGroups equivalence_groups(std::span<const TreeShape> shapes) {
  EquivalenceGroups groups;
  for (const auto& s : shapes) {
    if (s.dec == 0) throw ConfigError("dec must be at least 1");
    groups[path_length(s.h, s.dec)];
  }
  for (auto& [len, members] : groups) members.push_back({0, len});
  for (const auto& s : shapes) {
    auto& members = groups[path_length(s.h, s.dec)];
    if (s.h != 0) members.push_back(s);
  }
  return groups;
}

// All shapes with 0 ≤ h ≤ max_h and 1 ≤ dec ≤ max_dec.
inline EquivalenceGroups equivalence_groups(std::uint64_t max_h, std::uint64_t max_dec) {
  if (max_h == 0 || max_dec == 0) throw ConfigError("equivalence_groups bounds must be >= 1");
  std::vector<TreeShape> shapes;
  for (std::uint64_t h = 0; h <= max_h; ++h)
    for (std::uint64_t dec = 1; dec <= max_dec; ++dec) shapes.push_back({h, dec});
  return equivalence_groups(shapes);
}

}  // namespace treecoder
