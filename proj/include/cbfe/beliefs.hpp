#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "cbfe/model.hpp"

namespace cbfe {

/// Region marginals (or pseudo-marginals) for every variable and factor of a graph.
/// Factor tensors use the same layout as LogPotentials.
struct BeliefSet {
  std::vector<std::vector<double>> node;
  std::vector<std::vector<double>> factor;

  static BeliefSet uniform(const FactorGraph& g) {
    BeliefSet b;
    b.node.resize(g.num_vars());
    for (std::size_t i = 0; i < g.num_vars(); ++i)
      b.node[i].assign(g.cardinality(i), 1.0 / static_cast<double>(g.cardinality(i)));
    b.factor.resize(g.num_factors());
    for (std::size_t a = 0; a < g.num_factors(); ++a) {
      const std::size_t n = g.table_size(a);
      b.factor[a].assign(n, 1.0 / static_cast<double>(n));
    }
    return b;
  }
};

inline double log_sum_exp(std::span<const double> v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

/// Shifts v so that sum(exp(v)) == 1. Returns the removed log-normalizer.
inline double log_normalize(std::span<double> v) {
  const double z = log_sum_exp(v);
  for (double& x : v) x -= z;
  return z;
}

/// Shannon entropy in nats with 0 log 0 = 0.
inline double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double x : p)
    if (x > 0.0) h -= x * std::log(x);
  return h;
}

/// Sums a factor tensor down to the variable at `position` of its scope.
inline std::vector<double> marginalize(const FactorGraph& g, std::size_t a, std::size_t position,
                                       std::span<const double> table) {
  const std::size_t card = g.cardinality(g.scope(a)[position]);
  const std::size_t stride = g.strides(a)[position];
  std::vector<double> out(card, 0.0);
  for (std::size_t x = 0; x < table.size(); ++x) out[(x / stride) % card] += table[x];
  return out;
}

}  // namespace cbfe
