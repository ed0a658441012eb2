#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "cbfe/error.hpp"
#include "cbfe/rng.hpp"

namespace cbfe {

using Scope = std::vector<std::size_t>;

/// Generator metadata kept by build_grid so grid-specific tree families can
/// be recovered from the graph alone.
struct GridShape {
  std::size_t rows = 0;
  std::size_t cols = 0;
  bool toroidal = false;

  std::size_t cell(std::size_t r, std::size_t c) const { return r * cols + c; }
};

/// Discrete variables with finite state spaces plus an ordered list of factor
/// scopes. Immutable after construction.
///
/// Each (factor, position-in-scope) pair is an *incidence*; incidences are
/// numbered factor-major so per-incidence data can live in flat arrays.
class FactorGraph {
 public:
  FactorGraph() = default;

  FactorGraph(std::vector<std::size_t> cardinalities, std::vector<Scope> scopes,
              std::optional<GridShape> grid = std::nullopt)
      : cards_(std::move(cardinalities)), scopes_(std::move(scopes)), grid_(grid) {
    for (std::size_t i = 0; i < cards_.size(); ++i) {
      if (cards_[i] < 2)
        throw InvalidArgument("variable " + std::to_string(i) + " has cardinality < 2");
    }
    adjacency_.assign(cards_.size(), {});
    incidence_offset_.reserve(scopes_.size() + 1);
    incidence_offset_.push_back(0);
    for (std::size_t a = 0; a < scopes_.size(); ++a) {
      const Scope& s = scopes_[a];
      if (s.empty()) throw InvalidArgument("factor " + std::to_string(a) + " has an empty scope");
      for (std::size_t k = 0; k < s.size(); ++k) {
        if (s[k] >= cards_.size())
          throw InvalidArgument("factor " + std::to_string(a) + " references unknown variable " +
                                std::to_string(s[k]));
        if (k > 0 && s[k] <= s[k - 1])
          throw InvalidArgument("factor " + std::to_string(a) +
                                " scope is not strictly increasing");
        adjacency_[s[k]].push_back({a, k});
      }
      incidence_offset_.push_back(incidence_offset_.back() + s.size());
    }
  }

  struct Incidence {
    std::size_t factor;
    std::size_t position;  // index of the variable inside the factor scope
  };

  std::size_t num_vars() const { return cards_.size(); }
  std::size_t num_factors() const { return scopes_.size(); }
  std::size_t num_incidences() const { return incidence_offset_.back(); }

  std::size_t cardinality(std::size_t i) const { return cards_[i]; }
  const std::vector<std::size_t>& cardinalities() const { return cards_; }
  const Scope& scope(std::size_t a) const { return scopes_[a]; }
  const std::vector<Scope>& scopes() const { return scopes_; }

  /// Number of factors containing variable i.
  std::size_t degree(std::size_t i) const { return adjacency_[i].size(); }
  /// Incidences of variable i, in increasing factor order.
  const std::vector<Incidence>& incidences(std::size_t i) const { return adjacency_[i]; }
  std::size_t incidence_id(std::size_t a, std::size_t position) const {
    return incidence_offset_[a] + position;
  }

  /// Number of joint states of factor a.
  std::size_t table_size(std::size_t a) const {
    std::size_t n = 1;
    for (std::size_t v : scopes_[a]) n *= cards_[v];
    return n;
  }

  /// Row-major strides of factor a's table (last scope variable fastest).
  std::vector<std::size_t> strides(std::size_t a) const {
    const Scope& s = scopes_[a];
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t k = s.size(); k-- > 1;) st[k - 1] = st[k] * cards_[s[k]];
    return st;
  }

  bool is_pairwise() const {
    return std::all_of(scopes_.begin(), scopes_.end(), [](const Scope& s) { return s.size() == 2; });
  }
  bool is_binary() const {
    return std::all_of(cards_.begin(), cards_.end(), [](std::size_t k) { return k == 2; });
  }

  const std::optional<GridShape>& grid() const { return grid_; }

 private:
  std::vector<std::size_t> cards_;
  std::vector<Scope> scopes_;
  std::optional<GridShape> grid_;
  std::vector<std::vector<Incidence>> adjacency_;
  std::vector<std::size_t> incidence_offset_;
};

/// Log-space potentials attached to a FactorGraph: node tables theta_i(x_i)
/// and factor tables theta_a(x_a), row-major with the last scope variable fastest.
struct LogPotentials {
  std::vector<std::vector<double>> node;
  std::vector<std::vector<double>> factor;

  static LogPotentials zeros(const FactorGraph& g) {
    LogPotentials p;
    p.node.resize(g.num_vars());
    for (std::size_t i = 0; i < g.num_vars(); ++i) p.node[i].assign(g.cardinality(i), 0.0);
    p.factor.resize(g.num_factors());
    for (std::size_t a = 0; a < g.num_factors(); ++a) p.factor[a].assign(g.table_size(a), 0.0);
    return p;
  }

  /// Throws InvalidArgument if the tables do not fit `g` or hold non-finite entries.
  void validate(const FactorGraph& g) const {
    if (node.size() != g.num_vars()) throw InvalidArgument("node table count mismatch");
    if (factor.size() != g.num_factors()) throw InvalidArgument("factor table count mismatch");
    for (std::size_t i = 0; i < node.size(); ++i) {
      if (node[i].size() != g.cardinality(i))
        throw InvalidArgument("node table " + std::to_string(i) + " has wrong length");
      for (double v : node[i])
        if (!std::isfinite(v)) throw InvalidArgument("non-finite node potential");
    }
    for (std::size_t a = 0; a < factor.size(); ++a) {
      if (factor[a].size() != g.table_size(a))
        throw InvalidArgument("factor table " + std::to_string(a) + " has wrong length");
      for (double v : factor[a])
        if (!std::isfinite(v)) throw InvalidArgument("non-finite factor potential");
    }
  }
};

struct Model {
  FactorGraph graph;
  LogPotentials potentials;
};

// ---------------------------------------------------------------------------
// Structure generators

/// rows x cols grid of binary variables with 4-neighborhood pairwise factors.
/// Factors are sorted lexicographically by scope; on an open grid that is
/// row-major with each cell's right edge before its down edge.
inline FactorGraph build_grid(std::size_t rows, std::size_t cols, bool toroidal) {
  if (rows < 1 || cols < 1) throw InvalidArgument("grid dimensions must be >= 1");
  if (toroidal && (rows < 3 || cols < 3))
    throw InvalidArgument("toroidal grid needs at least 3 rows and 3 columns");
  GridShape shape{rows, cols, toroidal};
  std::vector<Scope> scopes;
  auto add = [&](std::size_t u, std::size_t v) { scopes.push_back({std::min(u, v), std::max(u, v)}); };
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      if (c + 1 < cols) add(shape.cell(r, c), shape.cell(r, c + 1));
      else if (toroidal) add(shape.cell(r, c), shape.cell(r, 0));
      if (r + 1 < rows) add(shape.cell(r, c), shape.cell(r + 1, c));
      else if (toroidal) add(shape.cell(r, c), shape.cell(0, c));
    }
  }
  std::sort(scopes.begin(), scopes.end());
  return FactorGraph(std::vector<std::size_t>(rows * cols, 2), std::move(scopes), shape);
}

/// Complete graph on n binary variables, one pairwise factor per unordered pair.
inline FactorGraph build_complete(std::size_t n) {
  if (n < 2) throw InvalidArgument("complete graph needs at least 2 nodes");
  std::vector<Scope> scopes;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) scopes.push_back({i, j});
  return FactorGraph(std::vector<std::size_t>(n, 2), std::move(scopes));
}

// ---------------------------------------------------------------------------
// Ising ensembles

enum class CouplingMode { mixed, attractive };

inline std::string to_string(CouplingMode m) { return m == CouplingMode::mixed ? "mixed" : "attractive"; }

inline CouplingMode parse_coupling_mode(const std::string& s) {
  if (s == "mixed") return CouplingMode::mixed;
  if (s == "attractive") return CouplingMode::attractive;
  throw InvalidArgument("unknown coupling mode '" + s + "'");
}

struct EnsembleSpec {
  double field_strength = 0.0;        // fields ~ U[-w_F, w_F]
  double interaction_strength = 0.0;  // couplings ~ U[-w_I, w_I] or U[0, w_I]
  CouplingMode mode = CouplingMode::mixed;
  std::uint64_t seed = 0;
  std::size_t num_models = 20;
};

/// Tables of p(x) ~ exp(sum_i f_i x_i + sum_ij J_ij x_i x_j) with x in {-1,+1},
/// state 0 mapped to -1 and state 1 to +1.
inline LogPotentials ising_potentials(const FactorGraph& g, const std::vector<double>& fields,
                                      const std::vector<double>& couplings) {
  if (!g.is_pairwise() || !g.is_binary())
    throw InvalidArgument("Ising parameterization needs a pairwise binary graph");
  if (fields.size() != g.num_vars() || couplings.size() != g.num_factors())
    throw InvalidArgument("Ising parameter vector length mismatch");
  LogPotentials p;
  p.node.resize(g.num_vars());
  for (std::size_t i = 0; i < g.num_vars(); ++i) p.node[i] = {-fields[i], fields[i]};
  p.factor.resize(g.num_factors());
  for (std::size_t a = 0; a < g.num_factors(); ++a) {
    const double w = couplings[a];
    p.factor[a] = {w, -w, -w, w};
  }
  return p;
}

/// Draws one member of the ensemble. The stream depends only on
/// (spec.seed, model_index): fields first in variable order, then couplings
/// in factor order.
inline LogPotentials sample_ising(const FactorGraph& g, const EnsembleSpec& spec,
                                  std::size_t model_index) {
  if (!g.is_pairwise() || !g.is_binary())
    throw InvalidArgument("Ising ensembles need a pairwise binary graph");
  if (spec.field_strength < 0.0 || spec.interaction_strength < 0.0)
    throw InvalidArgument("ensemble strengths must be nonnegative");
  Rng rng(derive_seed(spec.seed, model_index));
  std::vector<double> fields(g.num_vars());
  for (double& f : fields) f = rng.uniform(-spec.field_strength, spec.field_strength);
  const double lo = spec.mode == CouplingMode::mixed ? -spec.interaction_strength : 0.0;
  std::vector<double> couplings(g.num_factors());
  for (double& w : couplings) w = rng.uniform(lo, spec.interaction_strength);
  return ising_potentials(g, fields, couplings);
}

// ---------------------------------------------------------------------------
// Text format

namespace detail {

inline void write_row(std::ostream& os, const std::vector<double>& v) {
  for (std::size_t k = 0; k < v.size(); ++k) os << (k ? " " : "") << v[k];
  os << '\n';
}

/// Line reader that skips blank lines and '#' comments and tracks line numbers.
class LineReader {
 public:
  explicit LineReader(std::istream& is) : is_(is) {}

  bool next(std::string& out) {
    std::string line;
    while (std::getline(is_, line)) {
      ++line_;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      const auto first = line.find_first_not_of(" \t");
      if (first == std::string::npos || line[first] == '#') continue;
      out = line;
      return true;
    }
    return false;
  }

  std::string require(const char* what) {
    std::string s;
    if (!next(s)) throw ParseError(line_ + 1, std::string("unexpected end of input, expected ") + what);
    return s;
  }

  std::size_t line() const { return line_; }

 private:
  std::istream& is_;
  std::size_t line_ = 0;
};

template <class T>
std::vector<T> parse_numbers(const std::string& text, std::size_t line, const char* what) {
  std::istringstream ss(text);
  std::vector<T> out;
  std::string tok;
  while (ss >> tok) {
    T v{};
    const char* last = tok.data() + tok.size();
    auto [ptr, ec] = std::from_chars(tok.data(), last, v);
    if (ec != std::errc() || ptr != last)
      throw ParseError(line, std::string("bad number in ") + what + ": '" + tok + "'");
    out.push_back(v);
  }
  return out;
}

}  // namespace detail

/// Writes the line-oriented model format: num_vars, cardinalities, num_factors,
/// one scope line per factor, one node-table line per variable, one
/// factor-table line per factor. Numbers carry 17 significant digits.
inline void serialize_model(std::ostream& os, const FactorGraph& g, const LogPotentials& p) {
  p.validate(g);
  const auto flags = os.flags();
  const auto prec = os.precision();
  os << std::setprecision(17);
  os << g.num_vars() << '\n';
  for (std::size_t i = 0; i < g.num_vars(); ++i) os << (i ? " " : "") << g.cardinality(i);
  os << '\n' << g.num_factors() << '\n';
  for (const Scope& s : g.scopes()) {
    os << s.size();
    for (std::size_t v : s) os << ' ' << v;
    os << '\n';
  }
  for (const auto& t : p.node) detail::write_row(os, t);
  for (const auto& t : p.factor) detail::write_row(os, t);
  os.flags(flags);
  os.precision(prec);
}

inline std::string serialize_model(const FactorGraph& g, const LogPotentials& p) {
  std::ostringstream os;
  serialize_model(os, g, p);
  return os.str();
}

inline Model parse_model(std::istream& is) {
  detail::LineReader in(is);
  auto numbers = [&]<class T>(const char* what, T) {
    const std::string s = in.require(what);
    return detail::parse_numbers<T>(s, in.line(), what);
  };
  auto one = [&](const char* what) {
    const auto v = numbers(what, std::size_t{});
    if (v.size() != 1) throw ParseError(in.line(), std::string("expected a single ") + what);
    return v[0];
  };
  const std::size_t n = one("variable count");
  std::vector<std::size_t> cards;
  if (n > 0) {
    cards = numbers("cardinalities", std::size_t{});
    if (cards.size() != n)
      throw ParseError(in.line(), "expected " + std::to_string(n) + " cardinalities, got " +
                                      std::to_string(cards.size()));
    for (std::size_t k : cards)
      if (k < 2) throw ParseError(in.line(), "cardinality must be >= 2");
  }
  const std::size_t f = one("factor count");
  std::vector<Scope> scopes;
  scopes.reserve(f);
  for (std::size_t a = 0; a < f; ++a) {
    auto v = numbers("factor scope", std::size_t{});
    if (v.empty() || v[0] == 0 || v.size() != v[0] + 1)
      throw ParseError(in.line(), "scope line must be 'size idx...'");
    Scope s(v.begin() + 1, v.end());
    for (std::size_t k = 0; k < s.size(); ++k) {
      if (s[k] >= n) throw ParseError(in.line(), "scope index out of range");
      if (k > 0 && s[k] <= s[k - 1]) throw ParseError(in.line(), "scope must be strictly increasing");
    }
    scopes.push_back(std::move(s));
  }
  Model m{FactorGraph(std::move(cards), std::move(scopes)), {}};
  const FactorGraph& g = m.graph;
  m.potentials.node.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = numbers("node table", 0.0);
    if (row.size() != g.cardinality(i)) throw ParseError(in.line(), "node table has wrong length");
    for (double v : row)
      if (!std::isfinite(v)) throw ParseError(in.line(), "non-finite potential");
    m.potentials.node[i] = std::move(row);
  }
  m.potentials.factor.resize(f);
  for (std::size_t a = 0; a < f; ++a) {
    auto row = numbers("factor table", 0.0);
    if (row.size() != g.table_size(a)) throw ParseError(in.line(), "factor table has wrong length");
    for (double v : row)
      if (!std::isfinite(v)) throw ParseError(in.line(), "non-finite potential");
    m.potentials.factor[a] = std::move(row);
  }
  std::string extra;
  if (in.next(extra)) throw ParseError(in.line(), "trailing content after last factor table");
  return m;
}

inline Model parse_model(const std::string& text) {
  std::istringstream is(text);
  return parse_model(is);
}

}  // namespace cbfe
