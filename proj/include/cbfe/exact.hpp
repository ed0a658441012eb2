#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <set>
#include <span>
#include <vector>

#include "cbfe/beliefs.hpp"
#include "cbfe/error.hpp"
#include "cbfe/model.hpp"

namespace cbfe {

struct ExactResult {
  double log_partition = 0.0;
  BeliefSet marginals;
};

/// Largest intermediate table variable elimination may build.
inline constexpr std::size_t kMaxEliminationTable = std::size_t{1} << 26;
/// Largest joint state space brute-force enumeration accepts.
inline constexpr std::size_t kMaxBruteForceStates = std::size_t{1} << 24;

namespace detail {

// Log-space table over a sorted variable list, last variable fastest.
struct LogTable {
  std::vector<std::size_t> vars;
  std::vector<std::size_t> cards;
  std::vector<double> values;

  bool contains(std::size_t v) const { return std::binary_search(vars.begin(), vars.end(), v); }
};

inline std::size_t checked_size(const std::vector<std::size_t>& cards) {
  std::size_t n = 1;
  for (std::size_t k : cards) {
    if (n > kMaxEliminationTable / k)
      throw ModelTooLarge("model too large for exact inference (intermediate table exceeds 2^26 entries)");
    n *= k;
  }
  return n;
}

// Log-space product of `tables` over the union of their scopes.
inline LogTable multiply(const std::vector<const LogTable*>& tables,
                         const std::vector<std::size_t>& cardinalities) {
  LogTable out;
  for (const LogTable* t : tables) out.vars.insert(out.vars.end(), t->vars.begin(), t->vars.end());
  std::sort(out.vars.begin(), out.vars.end());
  out.vars.erase(std::unique(out.vars.begin(), out.vars.end()), out.vars.end());
  for (std::size_t v : out.vars) out.cards.push_back(cardinalities[v]);
  const std::size_t n = checked_size(out.cards);
  out.values.assign(n, 0.0);

  const std::size_t nv = out.vars.size();
  // stride[t][k]: step in table t's index when union variable k increments.
  std::vector<std::vector<std::size_t>> stride(tables.size(), std::vector<std::size_t>(nv, 0));
  for (std::size_t t = 0; t < tables.size(); ++t) {
    const LogTable& tab = *tables[t];
    std::size_t s = 1;
    for (std::size_t k = tab.vars.size(); k-- > 0;) {
      const auto pos = std::lower_bound(out.vars.begin(), out.vars.end(), tab.vars[k]) - out.vars.begin();
      stride[t][static_cast<std::size_t>(pos)] = s;
      s *= tab.cards[k];
    }
  }
  std::vector<std::size_t> digit(nv, 0);
  std::vector<std::size_t> idx(tables.size(), 0);
  for (std::size_t x = 0; x < n; ++x) {
    double acc = 0.0;
    for (std::size_t t = 0; t < tables.size(); ++t) acc += tables[t]->values[idx[t]];
    out.values[x] = acc;
    // odometer increment, last variable fastest
    for (std::size_t k = nv; k-- > 0;) {
      if (++digit[k] < out.cards[k]) {
        for (std::size_t t = 0; t < tables.size(); ++t) idx[t] += stride[t][k];
        break;
      }
      for (std::size_t t = 0; t < tables.size(); ++t) idx[t] -= stride[t][k] * (out.cards[k] - 1);
      digit[k] = 0;
    }
  }
  return out;
}

inline LogTable sum_out(const LogTable& t, std::size_t v) {
  const auto pos = static_cast<std::size_t>(std::lower_bound(t.vars.begin(), t.vars.end(), v) - t.vars.begin());
  LogTable out;
  out.vars = t.vars;
  out.cards = t.cards;
  out.vars.erase(out.vars.begin() + static_cast<std::ptrdiff_t>(pos));
  out.cards.erase(out.cards.begin() + static_cast<std::ptrdiff_t>(pos));
  std::size_t inner = 1;
  for (std::size_t k = pos + 1; k < t.cards.size(); ++k) inner *= t.cards[k];
  const std::size_t card = t.cards[pos];
  const std::size_t outer = t.values.size() / (inner * card);
  out.values.assign(outer * inner, 0.0);
  std::vector<double> buf(card);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      for (std::size_t s = 0; s < card; ++s) buf[s] = t.values[(o * card + s) * inner + in];
      out.values[o * inner + in] = log_sum_exp(buf);
    }
  }
  return out;
}

inline std::vector<LogTable> initial_tables(const FactorGraph& g, const LogPotentials& p) {
  std::vector<LogTable> tables;
  tables.reserve(g.num_vars() + g.num_factors());
  for (std::size_t i = 0; i < g.num_vars(); ++i) tables.push_back({{i}, {g.cardinality(i)}, p.node[i]});
  for (std::size_t a = 0; a < g.num_factors(); ++a) {
    LogTable t{g.scope(a), {}, p.factor[a]};
    for (std::size_t v : t.vars) t.cards.push_back(g.cardinality(v));
    tables.push_back(std::move(t));
  }
  return tables;
}

// Eliminates `order` from the table pool and multiplies what is left.
inline LogTable eliminate(std::vector<LogTable> pool, std::span<const std::size_t> order,
                          const std::vector<std::size_t>& cardinalities) {
  for (std::size_t v : order) {
    std::vector<LogTable> keep;
    std::vector<LogTable> bucket;
    for (LogTable& t : pool) (t.contains(v) ? bucket : keep).push_back(std::move(t));
    if (bucket.empty()) {
      pool = std::move(keep);
      continue;
    }
    std::vector<const LogTable*> ptrs;
    for (const LogTable& t : bucket) ptrs.push_back(&t);
    keep.push_back(sum_out(multiply(ptrs, cardinalities), v));
    pool = std::move(keep);
  }
  std::vector<const LogTable*> ptrs;
  for (const LogTable& t : pool) ptrs.push_back(&t);
  return multiply(ptrs, cardinalities);
}

}  // namespace detail

/// Greedy min-fill elimination order over `targets` (ties broken by lowest
/// variable index). Variables outside `targets` are kept. Throws ModelTooLarge
/// when a clique would exceed kMaxEliminationTable entries.
inline std::vector<std::size_t> min_fill_order(const FactorGraph& g, const std::vector<bool>& targets) {
  const std::size_t n = g.num_vars();
  std::vector<std::set<std::size_t>> nbr(n);
  for (const Scope& s : g.scopes())
    for (std::size_t u : s)
      for (std::size_t v : s)
        if (u != v) nbr[u].insert(v);
  std::vector<bool> done(n, false);
  std::vector<std::size_t> order;
  std::size_t remaining = static_cast<std::size_t>(std::count(targets.begin(), targets.end(), true));
  while (remaining-- > 0) {
    std::size_t best = n;
    std::size_t best_fill = std::numeric_limits<std::size_t>::max();
    for (std::size_t v = 0; v < n; ++v) {
      if (!targets[v] || done[v]) continue;
      std::size_t fill = 0;
      for (auto it = nbr[v].begin(); it != nbr[v].end(); ++it)
        for (auto jt = std::next(it); jt != nbr[v].end(); ++jt)
          if (!nbr[*it].count(*jt)) ++fill;
      if (fill < best_fill) {
        best_fill = fill;
        best = v;
      }
    }
    std::vector<std::size_t> clique_cards{g.cardinality(best)};
    for (std::size_t u : nbr[best]) clique_cards.push_back(g.cardinality(u));
    detail::checked_size(clique_cards);
    for (std::size_t u : nbr[best]) {
      for (std::size_t w : nbr[best])
        if (u != w) nbr[u].insert(w);
      nbr[u].erase(best);
    }
    nbr[best].clear();
    done[best] = true;
    order.push_back(best);
  }
  return order;
}

/// log Z by eliminating variables in the given order (a permutation of all variables).
inline double exact_log_partition(const FactorGraph& g, const LogPotentials& p,
                                  std::span<const std::size_t> order) {
  p.validate(g);
  std::vector<bool> seen(g.num_vars(), false);
  for (std::size_t v : order) {
    if (v >= g.num_vars() || seen[v]) throw InvalidArgument("elimination order is not a permutation");
    seen[v] = true;
  }
  if (order.size() != g.num_vars()) throw InvalidArgument("elimination order is not a permutation");
  const detail::LogTable t = detail::eliminate(detail::initial_tables(g, p), order, g.cardinalities());
  return t.values.at(0);
}

namespace detail {

// Normalized marginal over the sorted variable list `keep`.
inline std::vector<double> region_marginal(const FactorGraph& g, const std::vector<LogTable>& base,
                                           const std::vector<std::size_t>& keep) {
  std::vector<bool> targets(g.num_vars(), true);
  for (std::size_t v : keep) targets[v] = false;
  const auto order = min_fill_order(g, targets);
  LogTable t = eliminate(base, order, g.cardinalities());
  log_normalize(t.values);
  for (double& v : t.values) v = std::exp(v);
  return t.values;
}

}  // namespace detail

/// Exact log-partition function and all region marginals by variable
/// elimination (min-fill order) in log space. Each marginal comes from its
/// own elimination pass that keeps the region's variables.
inline ExactResult exact_infer(const FactorGraph& g, const LogPotentials& p) {
  p.validate(g);
  const auto base = detail::initial_tables(g, p);
  ExactResult r;
  const auto order = min_fill_order(g, std::vector<bool>(g.num_vars(), true));
  r.log_partition = detail::eliminate(base, order, g.cardinalities()).values.at(0);
  r.marginals.node.resize(g.num_vars());
  for (std::size_t i = 0; i < g.num_vars(); ++i)
    r.marginals.node[i] = detail::region_marginal(g, base, {i});
  r.marginals.factor.resize(g.num_factors());
  for (std::size_t a = 0; a < g.num_factors(); ++a)
    r.marginals.factor[a] = detail::region_marginal(g, base, g.scope(a));
  return r;
}

/// Enumerates every joint configuration. Validation oracle for exact_infer.
inline ExactResult brute_force_infer(const FactorGraph& g, const LogPotentials& p) {
  p.validate(g);
  const std::size_t n = g.num_vars();
  std::size_t states = 1;
  for (std::size_t i = 0; i < n; ++i) {
    if (states > kMaxBruteForceStates / g.cardinality(i))
      throw ModelTooLarge("joint state space exceeds 2^24 configurations");
    states *= g.cardinality(i);
  }

  std::vector<std::size_t> x(n, 0);
  auto log_weight = [&] {
    double w = 0.0;
    for (std::size_t i = 0; i < n; ++i) w += p.node[i][x[i]];
    for (std::size_t a = 0; a < g.num_factors(); ++a) {
      std::size_t idx = 0;
      for (std::size_t v : g.scope(a)) idx = idx * g.cardinality(v) + x[v];
      w += p.factor[a][idx];
    }
    return w;
  };
  auto advance = [&] {
    for (std::size_t k = n; k-- > 0;) {
      if (++x[k] < g.cardinality(k)) return;
      x[k] = 0;
    }
  };

  // Pass 1: the maximum log weight, so pass 2 can accumulate exp(w - max).
  double wmax = -std::numeric_limits<double>::infinity();
  for (std::size_t s = 0; s < states; ++s, advance()) wmax = std::max(wmax, log_weight());

  ExactResult r;
  r.marginals = BeliefSet::uniform(g);
  for (auto& t : r.marginals.node) std::fill(t.begin(), t.end(), 0.0);
  for (auto& t : r.marginals.factor) std::fill(t.begin(), t.end(), 0.0);
  double total = 0.0;
  std::fill(x.begin(), x.end(), 0);
  for (std::size_t s = 0; s < states; ++s, advance()) {
    const double w = std::exp(log_weight() - wmax);
    total += w;
    for (std::size_t i = 0; i < n; ++i) r.marginals.node[i][x[i]] += w;
    for (std::size_t a = 0; a < g.num_factors(); ++a) {
      std::size_t idx = 0;
      for (std::size_t v : g.scope(a)) idx = idx * g.cardinality(v) + x[v];
      r.marginals.factor[a][idx] += w;
    }
  }
  r.log_partition = wmax + std::log(total);
  for (auto& t : r.marginals.node)
    for (double& v : t) v /= total;
  for (auto& t : r.marginals.factor)
    for (double& v : t) v /= total;
  return r;
}

}  // namespace cbfe
