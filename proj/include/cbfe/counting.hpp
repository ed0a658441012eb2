#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "cbfe/error.hpp"
#include "cbfe/linprog.hpp"
#include "cbfe/model.hpp"

namespace cbfe {

/// Entropy weights c_i (per variable) and c_a (per factor).
struct CountingNumbers {
  std::vector<double> node;
  std::vector<double> factor;

  /// Stacked (c_node, c_factor) vector, the ordering used by the QPs.
  Eigen::VectorXd stacked() const {
    Eigen::VectorXd v(static_cast<Eigen::Index>(node.size() + factor.size()));
    for (std::size_t i = 0; i < node.size(); ++i) v(static_cast<Eigen::Index>(i)) = node[i];
    for (std::size_t a = 0; a < factor.size(); ++a) v(static_cast<Eigen::Index>(node.size() + a)) = factor[a];
    return v;
  }

  static CountingNumbers from_stacked(const Eigen::VectorXd& v, std::size_t num_vars) {
    CountingNumbers c;
    for (Eigen::Index k = 0; k < v.size(); ++k)
      (static_cast<std::size_t>(k) < num_vars ? c.node : c.factor).push_back(v(k));
    return c;
  }

  void check_shape(const FactorGraph& g) const {
    if (node.size() != g.num_vars() || factor.size() != g.num_factors())
      throw InvalidArgument("counting numbers do not match the graph");
    for (double v : node)
      if (!std::isfinite(v)) throw InvalidArgument("non-finite counting number");
    for (double v : factor)
      if (!std::isfinite(v)) throw InvalidArgument("non-finite counting number");
  }
};

/// Auxiliary nonnegative numbers showing H_c is concave on the local polytope:
///   c_a = c_aa + sum_{i in a} c_ia     and     c_i = c_ii - sum_{a ni i} c_ia.
/// c_nf is indexed by FactorGraph::incidence_id.
struct ConvexityCertificate {
  std::vector<double> c_nn;
  std::vector<double> c_ff;
  std::vector<double> c_nf;

  /// Largest violation of the two identities for counting numbers `c`.
  double residual(const FactorGraph& g, const CountingNumbers& c) const {
    double r = 0.0;
    for (std::size_t a = 0; a < g.num_factors(); ++a) {
      double s = c_ff[a];
      for (std::size_t k = 0; k < g.scope(a).size(); ++k) s += c_nf[g.incidence_id(a, k)];
      r = std::max(r, std::abs(s - c.factor[a]));
    }
    for (std::size_t i = 0; i < g.num_vars(); ++i) {
      double s = c_nn[i];
      for (const auto& inc : g.incidences(i)) s -= c_nf[g.incidence_id(inc.factor, inc.position)];
      r = std::max(r, std::abs(s - c.node[i]));
    }
    return r;
  }

  double min_entry() const {
    double m = 0.0;
    for (const auto* v : {&c_nn, &c_ff, &c_nf})
      for (double x : *v) m = std::min(m, x);
    return m;
  }
};

/// Spanning trees (as factor index sets) with a probability vector over them.
struct TreeDistribution {
  std::vector<std::vector<std::size_t>> trees;
  std::vector<double> weights;
};

// ---------------------------------------------------------------------------
// Canonical families

inline CountingNumbers bethe_numbers(const FactorGraph& g) {
  CountingNumbers c;
  c.node.resize(g.num_vars());
  for (std::size_t i = 0; i < g.num_vars(); ++i) c.node[i] = 1.0 - static_cast<double>(g.degree(i));
  c.factor.assign(g.num_factors(), 1.0);
  return c;
}

inline CountingNumbers symmetric_numbers(const FactorGraph& g, double c_node, double c_factor) {
  return {std::vector<double>(g.num_vars(), c_node), std::vector<double>(g.num_factors(), c_factor)};
}

/// |c_i + sum_{a ni i} c_a - 1| <= tol for every variable.
inline bool is_variable_valid(const CountingNumbers& c, const FactorGraph& g, double tol = 1e-9) {
  c.check_shape(g);
  for (std::size_t i = 0; i < g.num_vars(); ++i) {
    double s = c.node[i];
    for (const auto& inc : g.incidences(i)) s += c.factor[inc.factor];
    if (std::abs(s - 1.0) > tol) return false;
  }
  return true;
}

/// |c_a - 1| <= tol for every factor.
inline bool is_factor_valid(const CountingNumbers& c, double tol = 1e-9) {
  return std::all_of(c.factor.begin(), c.factor.end(), [tol](double v) { return std::abs(v - 1.0) <= tol; });
}

/// Node numbers that make the given factor numbers variable-valid.
inline CountingNumbers complete_variable_valid(const FactorGraph& g, std::vector<double> c_factor) {
  CountingNumbers c;
  c.node.resize(g.num_vars());
  for (std::size_t i = 0; i < g.num_vars(); ++i) {
    double s = 0.0;
    for (const auto& inc : g.incidences(i)) s += c_factor[inc.factor];
    c.node[i] = 1.0 - s;
  }
  c.factor = std::move(c_factor);
  return c;
}

// ---------------------------------------------------------------------------
// Concavity certificates

/// Column layout of the auxiliary vector z = (c_ii..., c_aa..., c_ia...) >= 0
/// and the linear map c = M z it induces.
struct CertificateLayout {
  std::size_t num_vars = 0;
  std::size_t num_factors = 0;
  std::size_t num_incidences = 0;

  explicit CertificateLayout(const FactorGraph& g)
      : num_vars(g.num_vars()), num_factors(g.num_factors()), num_incidences(g.num_incidences()) {}

  std::size_t size() const { return num_vars + num_factors + num_incidences; }
  Eigen::Index nn(std::size_t i) const { return static_cast<Eigen::Index>(i); }
  Eigen::Index ff(std::size_t a) const { return static_cast<Eigen::Index>(num_vars + a); }
  Eigen::Index nf(std::size_t inc) const { return static_cast<Eigen::Index>(num_vars + num_factors + inc); }

  /// (num_vars + num_factors) x size() matrix with stacked(c) = M z.
  Eigen::MatrixXd counting_map(const FactorGraph& g) const {
    Eigen::MatrixXd M = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(num_vars + num_factors),
                                              static_cast<Eigen::Index>(size()));
    for (std::size_t i = 0; i < num_vars; ++i) {
      M(static_cast<Eigen::Index>(i), nn(i)) = 1.0;
      for (const auto& inc : g.incidences(i))
        M(static_cast<Eigen::Index>(i), nf(g.incidence_id(inc.factor, inc.position))) = -1.0;
    }
    for (std::size_t a = 0; a < num_factors; ++a) {
      const auto row = static_cast<Eigen::Index>(num_vars + a);
      M(row, ff(a)) = 1.0;
      for (std::size_t k = 0; k < g.scope(a).size(); ++k) M(row, nf(g.incidence_id(a, k))) = 1.0;
    }
    return M;
  }

  /// Certificate for c = M z, with the slack entries recomputed so the
  /// identities hold to rounding.
  ConvexityCertificate certificate(const FactorGraph& g, const Eigen::VectorXd& z) const {
    ConvexityCertificate cert;
    cert.c_nf.resize(num_incidences);
    for (std::size_t e = 0; e < num_incidences; ++e) cert.c_nf[e] = std::max(0.0, z(nf(e)));
    cert.c_nn.resize(num_vars);
    for (std::size_t i = 0; i < num_vars; ++i) cert.c_nn[i] = std::max(0.0, z(nn(i)));
    cert.c_ff.resize(num_factors);
    for (std::size_t a = 0; a < num_factors; ++a) cert.c_ff[a] = std::max(0.0, z(ff(a)));
    (void)g;
    return cert;
  }

  /// Counting numbers carried by a certificate.
  CountingNumbers counting(const FactorGraph& g, const ConvexityCertificate& cert) const {
    CountingNumbers c;
    c.node.resize(num_vars);
    for (std::size_t i = 0; i < num_vars; ++i) {
      double s = cert.c_nn[i];
      for (const auto& inc : g.incidences(i)) s -= cert.c_nf[g.incidence_id(inc.factor, inc.position)];
      c.node[i] = s;
    }
    c.factor.resize(num_factors);
    for (std::size_t a = 0; a < num_factors; ++a) {
      double s = cert.c_ff[a];
      for (std::size_t k = 0; k < g.scope(a).size(); ++k) s += cert.c_nf[g.incidence_id(a, k)];
      c.factor[a] = s;
    }
    return c;
  }
};

/// Solves the feasibility LP for the auxiliary counting numbers. Returns
/// nullopt when none exist (phase-one residual above 1e-8). A missing
/// certificate does not prove H_c is non-concave; the conditions are only sufficient.
inline std::optional<ConvexityCertificate> find_convexity_certificate(const CountingNumbers& c,
                                                                      const FactorGraph& g) {
  c.check_shape(g);
  const CertificateLayout layout(g);
  LinearProgram lp;
  lp.A = layout.counting_map(g);
  lp.b = c.stacked();
  lp.c = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(layout.size()));
  const LpResult res = solve_lp(lp);
  if (res.status != LpStatus::optimal) return std::nullopt;

  ConvexityCertificate cert;
  cert.c_nf.resize(layout.num_incidences);
  for (std::size_t e = 0; e < layout.num_incidences; ++e) cert.c_nf[e] = res.x(layout.nf(e));
  // Recompute the slack numbers so both identities hold exactly.
  cert.c_ff.resize(g.num_factors());
  for (std::size_t a = 0; a < g.num_factors(); ++a) {
    double s = c.factor[a];
    for (std::size_t k = 0; k < g.scope(a).size(); ++k) s -= cert.c_nf[g.incidence_id(a, k)];
    cert.c_ff[a] = s;
  }
  cert.c_nn.resize(g.num_vars());
  for (std::size_t i = 0; i < g.num_vars(); ++i) {
    double s = c.node[i];
    for (const auto& inc : g.incidences(i)) s += cert.c_nf[g.incidence_id(inc.factor, inc.position)];
    cert.c_nn[i] = s;
  }
  if (cert.min_entry() < -1e-8) return std::nullopt;
  for (auto* v : {&cert.c_nn, &cert.c_ff, &cert.c_nf})
    for (double& x : *v) x = std::max(0.0, x);
  return cert;
}

// ---------------------------------------------------------------------------
// Trees and TRW

namespace detail {

struct DisjointSets {
  std::vector<std::size_t> parent;
  explicit DisjointSets(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  std::size_t find(std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  bool unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return false;
    parent[std::max(a, b)] = std::min(a, b);
    return true;
  }
};

inline std::size_t count_components(const FactorGraph& g) {
  DisjointSets ds(g.num_vars());
  std::size_t comps = g.num_vars();
  for (const Scope& s : g.scopes())
    for (std::size_t k = 1; k < s.size(); ++k)
      if (ds.unite(s[0], s[k])) --comps;
  return comps;
}

inline void require_pairwise(const FactorGraph& g, const char* what) {
  if (!g.is_pairwise()) throw InvalidArgument(std::string(what) + " needs a pairwise graph");
}

}  // namespace detail

/// Throws InvalidArgument unless every tree is an acyclic spanning forest of
/// the (pairwise) graph and the weights form a probability vector.
inline void validate_trees(const FactorGraph& g, const TreeDistribution& t) {
  detail::require_pairwise(g, "tree distribution");
  if (t.trees.empty() || t.trees.size() != t.weights.size())
    throw InvalidArgument("tree distribution needs one weight per tree");
  double total = 0.0;
  for (double w : t.weights) {
    if (!(w >= 0.0)) throw InvalidArgument("tree weights must be nonnegative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) throw InvalidArgument("tree weights must sum to 1");
  const std::size_t want = g.num_vars() - detail::count_components(g);
  for (const auto& tree : t.trees) {
    detail::DisjointSets ds(g.num_vars());
    for (std::size_t a : tree) {
      if (a >= g.num_factors()) throw InvalidArgument("tree references unknown factor");
      if (!ds.unite(g.scope(a)[0], g.scope(a)[1])) throw InvalidArgument("tree contains a cycle");
    }
    if (tree.size() != want) throw InvalidArgument("tree does not span the graph");
  }
}

/// Edge appearance probabilities rho_a under the tree distribution.
inline std::vector<double> edge_appearance(const FactorGraph& g, const TreeDistribution& t) {
  std::vector<double> rho(g.num_factors(), 0.0);
  for (std::size_t k = 0; k < t.trees.size(); ++k)
    for (std::size_t a : t.trees[k]) rho[a] += t.weights[k];
  return rho;
}

/// TRW counting numbers: c_a = rho_a, c_i = 1 - sum_{a ni i} rho_a.
inline CountingNumbers trw_numbers(const FactorGraph& g, const TreeDistribution& t) {
  validate_trees(g, t);
  return complete_variable_valid(g, edge_appearance(g, t));
}

/// Maximum-weight spanning forest (Kruskal; ties by lower factor index).
inline std::vector<std::size_t> maximum_spanning_tree(const FactorGraph& g, const std::vector<double>& weight) {
  detail::require_pairwise(g, "spanning tree");
  std::vector<std::size_t> idx(g.num_factors());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return weight[a] > weight[b]; });
  detail::DisjointSets ds(g.num_vars());
  std::vector<std::size_t> tree;
  for (std::size_t a : idx)
    if (ds.unite(g.scope(a)[0], g.scope(a)[1])) tree.push_back(a);
  std::sort(tree.begin(), tree.end());
  return tree;
}

/// Four comb-shaped spanning trees with weight 1/4 each: horizontal combs
/// with the spine on the left and right columns, vertical combs with the
/// spine on the top and bottom rows. On a torus each comb also drops the
/// ring edge just before its spine, so wrap edges are covered too.
inline TreeDistribution grid_comb_trees(const FactorGraph& g) {
  if (!g.grid()) throw InvalidArgument("comb trees need a graph built by build_grid");
  const GridShape sh = *g.grid();
  if (sh.rows < 2 || sh.cols < 2) throw InvalidArgument("comb trees need at least a 2x2 grid");
  auto factor_of = [&](std::size_t u, std::size_t v) {
    const Scope key{std::min(u, v), std::max(u, v)};
    const auto it = std::lower_bound(g.scopes().begin(), g.scopes().end(), key);
    if (it == g.scopes().end() || *it != key) throw InvalidArgument("graph does not match its grid shape");
    return static_cast<std::size_t>(it - g.scopes().begin());
  };
  // Path through `len` cells of a ring/line starting at `start`; `at(k)` maps position to cell.
  auto path = [&](std::size_t len, std::size_t start, bool ring, auto at, std::vector<std::size_t>& out) {
    for (std::size_t s = 0; s + 1 < len; ++s) {
      const std::size_t p = ring ? (start + s) % len : s;
      const std::size_t q = ring ? (start + s + 1) % len : s + 1;
      out.push_back(factor_of(at(p), at(q)));
    }
  };
  TreeDistribution t;
  for (const bool horizontal : {true, false}) {
    const std::size_t lines = horizontal ? sh.rows : sh.cols;
    const std::size_t len = horizontal ? sh.cols : sh.rows;
    for (const std::size_t spine : {std::size_t{0}, len - 1}) {
      std::vector<std::size_t> tree;
      for (std::size_t l = 0; l < lines; ++l) {
        auto at = [&](std::size_t p) { return horizontal ? sh.cell(l, p) : sh.cell(p, l); };
        path(len, spine, sh.toroidal, at, tree);
      }
      auto spine_at = [&](std::size_t p) { return horizontal ? sh.cell(p, spine) : sh.cell(spine, p); };
      path(lines, spine, sh.toroidal, spine_at, tree);
      std::sort(tree.begin(), tree.end());
      t.trees.push_back(std::move(tree));
    }
  }
  t.weights.assign(4, 0.25);
  validate_trees(g, t);
  return t;
}

/// Uniform distribution over a greedy family of spanning trees that covers
/// every edge: each new tree prefers the edges covered least so far.
inline TreeDistribution covering_trees(const FactorGraph& g) {
  detail::require_pairwise(g, "covering trees");
  TreeDistribution t;
  std::vector<double> count(g.num_factors(), 0.0);
  while (g.num_factors() > 0 && *std::min_element(count.begin(), count.end()) == 0.0) {
    std::vector<double> w(count.size());
    for (std::size_t a = 0; a < w.size(); ++a) w[a] = -count[a];
    auto tree = maximum_spanning_tree(g, w);
    for (std::size_t a : tree) count[a] += 1.0;
    t.trees.push_back(std::move(tree));
  }
  if (t.trees.empty()) t.trees.push_back({});
  t.weights.assign(t.trees.size(), 1.0 / static_cast<double>(t.trees.size()));
  return t;
}

/// The tree family used for "uniform TRW": combs on grids, greedy covering trees otherwise.
inline TreeDistribution default_trees(const FactorGraph& g) {
  if (g.grid() && g.grid()->rows >= 2 && g.grid()->cols >= 2) return grid_comb_trees(g);
  return covering_trees(g);
}

// ---------------------------------------------------------------------------
// Text format: "node i c_i" and "factor a c_a" lines.

inline void write_counting_numbers(std::ostream& os, const CountingNumbers& c) {
  const auto prec = os.precision();
  os << std::setprecision(17);
  for (std::size_t i = 0; i < c.node.size(); ++i) os << "node " << i << ' ' << c.node[i] << '\n';
  for (std::size_t a = 0; a < c.factor.size(); ++a) os << "factor " << a << ' ' << c.factor[a] << '\n';
  os.precision(prec);
}

inline CountingNumbers read_counting_numbers(std::istream& is, const FactorGraph& g) {
  CountingNumbers c;
  c.node.assign(g.num_vars(), std::numeric_limits<double>::quiet_NaN());
  c.factor.assign(g.num_factors(), std::numeric_limits<double>::quiet_NaN());
  detail::LineReader in(is);
  std::string line;
  while (in.next(line)) {
    std::istringstream ss(line);
    std::string kind;
    std::size_t idx = 0;
    std::string value;
    if (!(ss >> kind >> idx >> value)) throw ParseError(in.line(), "expected '<node|factor> index value'");
    const auto v = detail::parse_numbers<double>(value, in.line(), "counting number");
    if (kind == "node" && idx < c.node.size()) c.node[idx] = v.at(0);
    else if (kind == "factor" && idx < c.factor.size()) c.factor[idx] = v.at(0);
    else throw ParseError(in.line(), "unknown region '" + kind + " " + std::to_string(idx) + "'");
  }
  for (double x : c.node)
    if (std::isnan(x)) throw ParseError(in.line(), "missing node counting number");
  for (double x : c.factor)
    if (std::isnan(x)) throw ParseError(in.line(), "missing factor counting number");
  return c;
}

}  // namespace cbfe
