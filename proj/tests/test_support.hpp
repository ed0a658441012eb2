#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include <Eigen/Dense>
#include <limits>

#include "cbfe/beliefs.hpp"
#include "cbfe/model.hpp"
#include "cbfe/rng.hpp"

namespace cbfe::testing {

/// Random tree on n variables (random attachment), scopes sorted.
inline FactorGraph random_tree(Rng& rng, std::size_t n, std::size_t max_card = 2) {
  std::vector<std::size_t> cards(n);
  for (auto& k : cards) k = 2 + static_cast<std::size_t>(rng.uniform01() * static_cast<double>(max_card - 1));
  std::vector<Scope> scopes;
  for (std::size_t v = 1; v < n; ++v) {
    const auto u = static_cast<std::size_t>(rng.uniform01() * static_cast<double>(v));
    scopes.push_back({u, v});
  }
  std::sort(scopes.begin(), scopes.end());
  return FactorGraph(std::move(cards), std::move(scopes));
}

inline FactorGraph cycle(std::size_t n) {
  std::vector<Scope> scopes;
  for (std::size_t v = 0; v + 1 < n; ++v) scopes.push_back({v, v + 1});
  scopes.push_back({0, n - 1});
  return FactorGraph(std::vector<std::size_t>(n, 2), std::move(scopes));
}

inline FactorGraph chain(std::size_t n) {
  std::vector<Scope> scopes;
  for (std::size_t v = 0; v + 1 < n; ++v) scopes.push_back({v, v + 1});
  return FactorGraph(std::vector<std::size_t>(n, 2), std::move(scopes));
}

/// Random log-potentials, node entries in [-field, field], factor entries in [-coupling, coupling].
inline LogPotentials random_potentials(Rng& rng, const FactorGraph& g, double field, double coupling) {
  LogPotentials p = LogPotentials::zeros(g);
  for (auto& t : p.node)
    for (double& v : t) v = rng.uniform(-field, field);
  for (auto& t : p.factor)
    for (double& v : t) v = rng.uniform(-coupling, coupling);
  return p;
}

inline double max_abs_diff(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  double d = 0.0;
  for (std::size_t r = 0; r < a.size(); ++r)
    for (std::size_t k = 0; k < a[r].size(); ++k) d = std::max(d, std::abs(a[r][k] - b[r][k]));
  return d;
}

inline double max_abs_diff(const BeliefSet& a, const BeliefSet& b) {
  return std::max(max_abs_diff(a.node, b.node), max_abs_diff(a.factor, b.factor));
}

/// Plain sum-product in log space, written independently of the library. One
/// sweep visits factors in order; for each it refreshes every n_{i->a} and then
/// every m_{a->i} from the fresh n. Damping and normalization as in the library.
struct TextbookBp {
  const FactorGraph& g;
  const LogPotentials& p;
  // msg[a][k]: message on the k-th scope variable of factor a
  std::vector<std::vector<std::vector<double>>> to_node, to_factor;

  TextbookBp(const FactorGraph& graph, const LogPotentials& pot) : g(graph), p(pot) {
    to_node.resize(g.num_factors());
    to_factor.resize(g.num_factors());
    for (std::size_t a = 0; a < g.num_factors(); ++a)
      for (std::size_t v : g.scope(a)) {
        const double u = -std::log(static_cast<double>(g.cardinality(v)));
        to_node[a].emplace_back(g.cardinality(v), u);
        to_factor[a].emplace_back(g.cardinality(v), u);
      }
  }

  static void damp_into(std::vector<double>& dst, const std::vector<double>& fresh, double gamma) {
    std::vector<double> u(dst.size());
    for (std::size_t x = 0; x < u.size(); ++x) u[x] = (1 - gamma) * dst[x] + gamma * fresh[x];
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : u) mx = std::max(mx, v);
    double s = 0;
    for (double v : u) s += std::exp(v - mx);
    for (std::size_t x = 0; x < u.size(); ++x) dst[x] = u[x] - mx - std::log(s);
  }

  std::vector<double> node_out(std::size_t a, std::size_t k, const decltype(to_node)& m) const {
    const std::size_t i = g.scope(a)[k];
    std::vector<double> out = p.node[i];
    for (std::size_t b = 0; b < g.num_factors(); ++b) {
      if (b == a) continue;
      for (std::size_t kk = 0; kk < g.scope(b).size(); ++kk)
        if (g.scope(b)[kk] == i)
          for (std::size_t x = 0; x < out.size(); ++x) out[x] += m[b][kk][x];
    }
    return out;
  }

  std::vector<double> factor_out(std::size_t a, std::size_t k, const decltype(to_factor)& n) const {
    const Scope& s = g.scope(a);
    std::vector<double> terms_max(g.cardinality(s[k]), -std::numeric_limits<double>::infinity());
    std::vector<std::vector<double>> terms(g.cardinality(s[k]));
    std::vector<std::size_t> x(s.size(), 0);
    for (std::size_t idx = 0; idx < p.factor[a].size(); ++idx) {
      // decode row-major, last variable fastest
      std::size_t r = idx;
      for (std::size_t q = s.size(); q-- > 0;) {
        x[q] = r % g.cardinality(s[q]);
        r /= g.cardinality(s[q]);
      }
      double v = p.factor[a][idx];
      for (std::size_t q = 0; q < s.size(); ++q)
        if (q != k) v += n[a][q][x[q]];
      terms[x[k]].push_back(v);
    }
    std::vector<double> out(terms.size());
    for (std::size_t xk = 0; xk < terms.size(); ++xk) {
      double mx = -std::numeric_limits<double>::infinity();
      for (double v : terms[xk]) mx = std::max(mx, v);
      double sum = 0;
      for (double v : terms[xk]) sum += std::exp(v - mx);
      out[xk] = mx + std::log(sum);
    }
    return out;
  }

  void sweep(double gamma, bool sequential) {
    const auto old_node = to_node;
    const auto old_factor = to_factor;
    for (std::size_t a = 0; a < g.num_factors(); ++a) {
      const auto& mread = sequential ? to_node : old_node;
      std::vector<std::vector<double>> fresh_n;
      for (std::size_t k = 0; k < g.scope(a).size(); ++k) fresh_n.push_back(node_out(a, k, mread));
      std::vector<std::vector<double>> fresh_m;
      if (!sequential)
        for (std::size_t k = 0; k < g.scope(a).size(); ++k) fresh_m.push_back(factor_out(a, k, old_factor));
      for (std::size_t k = 0; k < g.scope(a).size(); ++k) damp_into(to_factor[a][k], fresh_n[k], gamma);
      if (sequential)
        for (std::size_t k = 0; k < g.scope(a).size(); ++k) fresh_m.push_back(factor_out(a, k, to_factor));
      for (std::size_t k = 0; k < g.scope(a).size(); ++k) damp_into(to_node[a][k], fresh_m[k], gamma);
    }
  }
};

/// Equality system of the local polytope over the ambient vector (node
/// tables in variable order, then factor tables in factor order): node
/// normalization rows plus factor-to-node marginalization rows.
inline Eigen::MatrixXd local_polytope_equalities(const FactorGraph& g, Eigen::VectorXd& rhs) {
  std::vector<std::size_t> node_off(g.num_vars() + 1, 0), factor_off(g.num_factors() + 1, 0);
  for (std::size_t i = 0; i < g.num_vars(); ++i) node_off[i + 1] = node_off[i] + g.cardinality(i);
  factor_off[0] = node_off.back();
  for (std::size_t a = 0; a < g.num_factors(); ++a) factor_off[a + 1] = factor_off[a] + g.table_size(a);
  std::vector<Eigen::VectorXd> rows;
  std::vector<double> b;
  const auto dim = static_cast<Eigen::Index>(factor_off.back());
  for (std::size_t i = 0; i < g.num_vars(); ++i) {
    Eigen::VectorXd r = Eigen::VectorXd::Zero(dim);
    for (std::size_t x = 0; x < g.cardinality(i); ++x) r(static_cast<Eigen::Index>(node_off[i] + x)) = 1;
    rows.push_back(r);
    b.push_back(1);
  }
  for (std::size_t a = 0; a < g.num_factors(); ++a) {
    const Scope& s = g.scope(a);
    for (std::size_t k = 0; k < s.size(); ++k)
      for (std::size_t xk = 0; xk < g.cardinality(s[k]); ++xk) {
        Eigen::VectorXd r = Eigen::VectorXd::Zero(dim);
        for (std::size_t idx = 0; idx < g.table_size(a); ++idx) {
          std::size_t rem = idx, val = 0;
          for (std::size_t q = s.size(); q-- > 0;) {
            if (q == k) val = rem % g.cardinality(s[q]);
            rem /= g.cardinality(s[q]);
          }
          if (val == xk) r(static_cast<Eigen::Index>(factor_off[a] + idx)) = 1;
        }
        r(static_cast<Eigen::Index>(node_off[s[k]] + xk)) = -1;
        rows.push_back(r);
        b.push_back(0);
      }
  }
  Eigen::MatrixXd A(static_cast<Eigen::Index>(rows.size()), dim);
  for (std::size_t r = 0; r < rows.size(); ++r) A.row(static_cast<Eigen::Index>(r)) = rows[r].transpose();
  rhs = Eigen::Map<Eigen::VectorXd>(b.data(), static_cast<Eigen::Index>(b.size()));
  return A;
}

inline Eigen::VectorXd flatten(const BeliefSet& b) {
  std::vector<double> v;
  for (const auto& t : b.node) v.insert(v.end(), t.begin(), t.end());
  for (const auto& t : b.factor) v.insert(v.end(), t.begin(), t.end());
  return Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace cbfe::testing
