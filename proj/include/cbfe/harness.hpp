#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "cbfe/counting.hpp"
#include "cbfe/error.hpp"
#include "cbfe/exact.hpp"
#include "cbfe/model.hpp"
#include "cbfe/optimize.hpp"
#include "cbfe/polytope.hpp"
#include "cbfe/propagation.hpp"
#include "cbfe/rng.hpp"

namespace cbfe {

// ---------------------------------------------------------------------------
// key = value configuration

class Config {
 public:
  static Config parse(std::istream& is) {
    Config c;
    std::string line;
    std::size_t n = 0;
    while (std::getline(is, line)) {
      ++n;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string t = trim(line);
      if (t.empty()) continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos) throw ParseError(n, "expected 'key = value'");
      const std::string key = trim(t.substr(0, eq));
      if (key.empty()) throw ParseError(n, "empty key");
      if (c.values_.count(key)) throw ParseError(n, "duplicate key '" + key + "'");
      c.values_[key] = trim(t.substr(eq + 1));
    }
    return c;
  }

  static Config parse(const std::string& text) {
    std::istringstream is(text);
    return parse(is);
  }

  static Config load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InvalidArgument("cannot open config file '" + path + "'");
    return parse(in);
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) > 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string get(const std::string& key, const std::string& fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    return has(key) ? to_double(key, values_.at(key)) : fallback;
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
    if (!has(key)) return fallback;
    const std::string& s = values_.at(key);
    std::size_t used = 0;
    std::uint64_t v = 0;
    try {
      if (!s.empty() && s[0] == '-') throw std::invalid_argument("negative");
      v = std::stoull(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != s.size()) throw InvalidArgument("key '" + key + "': expected a nonnegative integer");
    return v;
  }

  std::size_t get_size(const std::string& key, std::size_t fallback) const {
    return static_cast<std::size_t>(get_u64(key, fallback));
  }

  /// Comma-separated values, or lo:hi:n for n evenly spaced points (n >= 2).
  std::vector<double> get_grid(const std::string& key, std::vector<double> fallback) const {
    if (!has(key)) return fallback;
    const std::string& s = values_.at(key);
    if (s.find(':') != std::string::npos) {
      const auto parts = split(s, ':');
      if (parts.size() != 3) throw InvalidArgument("key '" + key + "': expected lo:hi:n");
      const double lo = to_double(key, parts[0]), hi = to_double(key, parts[1]);
      Config tmp;
      tmp.set(key, parts[2]);
      const std::size_t n = tmp.get_size(key, 0);
      if (n < 2) throw InvalidArgument("key '" + key + "': resolution must be at least 2");
      return linspace(lo, hi, n);
    }
    std::vector<double> v;
    for (const auto& p : split(s, ',')) v.push_back(to_double(key, p));
    if (v.empty()) throw InvalidArgument("key '" + key + "': empty list");
    return v;
  }

  std::vector<std::string> get_list(const std::string& key, std::vector<std::string> fallback) const {
    if (!has(key)) return fallback;
    auto v = split(values_.at(key), ',');
    if (v.empty()) throw InvalidArgument("key '" + key + "': empty list");
    return v;
  }

  static std::vector<double> linspace(double lo, double hi, std::size_t n) {
    std::vector<double> v(n);
    for (std::size_t k = 0; k < n; ++k)
      v[k] = k + 1 == n ? hi : lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(n - 1);
    return v;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  static std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream is(s);
    while (std::getline(is, item, sep)) {
      item = trim(item);
      if (item.empty()) throw InvalidArgument("empty list entry in '" + s + "'");
      out.push_back(item);
    }
    return out;
  }

  static double to_double(const std::string& key, const std::string& s) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != s.size() || !std::isfinite(v))
      throw InvalidArgument("key '" + key + "': '" + s + "' is not a finite number");
    return v;
  }

  std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// graph specs and methods

/// "grid:RxC", "torus:RxC" or "complete:N".
inline FactorGraph graph_from_spec(const std::string& spec) {
  const auto colon = spec.find(':');
  if (colon == std::string::npos) throw InvalidArgument("graph spec '" + spec + "' needs family:size");
  const std::string family = spec.substr(0, colon), size = spec.substr(colon + 1);
  auto number = [&](const std::string& s) {
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
      throw InvalidArgument("bad size in graph spec '" + spec + "'");
    return static_cast<std::size_t>(std::stoull(s));
  };
  if (family == "grid" || family == "torus") {
    const auto x = size.find('x');
    if (x == std::string::npos) throw InvalidArgument("graph spec '" + spec + "' needs RxC");
    return build_grid(number(size.substr(0, x)), number(size.substr(x + 1)), family == "torus");
  }
  if (family == "complete") return build_complete(number(size));
  throw InvalidArgument("unknown graph family '" + family + "'");
}

enum class Method { bethe, trw_uniform, trw_opt, convex_bethe_c, convex_bethe_mu, convex_bethe_mu_vv, convex_bethe_u };

inline const std::vector<Method>& all_methods() {
  static const std::vector<Method> m{Method::bethe,           Method::trw_uniform,        Method::trw_opt,
                                     Method::convex_bethe_c,  Method::convex_bethe_mu,    Method::convex_bethe_mu_vv,
                                     Method::convex_bethe_u};
  return m;
}

inline std::string to_string(Method m) {
  switch (m) {
    case Method::bethe: return "bethe";
    case Method::trw_uniform: return "trw_uniform";
    case Method::trw_opt: return "trw_opt";
    case Method::convex_bethe_c: return "convexBethe_c";
    case Method::convex_bethe_mu: return "convexBethe_mu";
    case Method::convex_bethe_mu_vv: return "convexBethe_mu_vv";
    case Method::convex_bethe_u: return "convexBethe_u";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  for (Method m : all_methods())
    if (to_string(m) == s) return m;
  throw InvalidArgument("unknown method '" + s + "'");
}

inline bool needs_moments(Method m) { return m == Method::convex_bethe_mu || m == Method::convex_bethe_mu_vv; }

// ---------------------------------------------------------------------------

struct SweepConfig {
  std::string graph = "grid:5x5";
  CouplingMode mode = CouplingMode::mixed;
  std::vector<double> fields{0.05, 1.0};
  std::vector<double> interactions = Config::linspace(0.1, 2.0, 20);
  std::vector<double> c_node = Config::linspace(-4.0, 2.0, 50);
  std::vector<double> c_factor = Config::linspace(-1.0, 3.0, 50);
  std::vector<Method> methods = all_methods();
  std::pair<Method, Method> method_pair{Method::convex_bethe_u, Method::bethe};
  std::size_t num_models = 20;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  PropagationOptions bp;
  BoundOptions bound;
  MomentsOptions moments;
  std::string moments_path;
  std::string out;
};

inline SweepConfig sweep_config_from(const Config& c) {
  static const std::vector<std::string> known{
      "graph",       "coupling",     "fields",     "interactions",  "c_node",          "c_factor",
      "methods",     "method_pair",  "num_models", "seed",          "jobs",            "damping",
      "max_iters",   "tol",          "outer_iters", "moments",      "moments_chains",  "moments_samples",
      "moments_thin", "out"};
  for (const auto& [k, v] : c.values())
    if (std::find(known.begin(), known.end(), k) == known.end()) throw InvalidArgument("unknown config key '" + k + "'");
  SweepConfig s;
  s.graph = c.get("graph", s.graph);
  graph_from_spec(s.graph);
  s.mode = parse_coupling_mode(c.get("coupling", to_string(s.mode)));
  s.fields = c.get_grid("fields", s.fields);
  s.interactions = c.get_grid("interactions", s.interactions);
  for (double v : s.fields)
    if (v < 0) throw InvalidArgument("field strengths must be nonnegative");
  for (double v : s.interactions)
    if (v < 0) throw InvalidArgument("interaction strengths must be nonnegative");
  s.c_node = c.get_grid("c_node", s.c_node);
  s.c_factor = c.get_grid("c_factor", s.c_factor);
  if (c.has("methods")) {
    s.methods.clear();
    for (const auto& m : c.get_list("methods", {})) s.methods.push_back(parse_method(m));
  }
  if (c.has("method_pair")) {
    const auto p = c.get_list("method_pair", {});
    if (p.size() != 2) throw InvalidArgument("method_pair needs exactly two methods");
    s.method_pair = {parse_method(p[0]), parse_method(p[1])};
  }
  s.num_models = c.get_size("num_models", s.num_models);
  if (s.num_models == 0) throw InvalidArgument("num_models must be positive");
  s.seed = c.get_u64("seed", s.seed);
  s.jobs = std::max<std::size_t>(1, c.get_size("jobs", s.jobs));
  s.bp.damping = c.get_double("damping", s.bp.damping);
  if (!(s.bp.damping > 0.0 && s.bp.damping <= 1.0)) throw InvalidArgument("damping must lie in (0, 1]");
  s.bp.max_iters = c.get_size("max_iters", s.bp.max_iters);
  s.bp.tol = c.get_double("tol", s.bp.tol);
  s.bound.max_outer = c.get_size("outer_iters", s.bound.max_outer);
  s.moments_path = c.get("moments", "");
  s.moments.chains = c.get_size("moments_chains", s.moments.chains);
  s.moments.samples_per_chain = c.get_size("moments_samples", s.moments.samples_per_chain);
  s.moments.thin = c.get_size("moments_thin", s.moments.thin);
  s.out = c.get("out", "");
  return s;
}

// ---------------------------------------------------------------------------
// error metrics

struct ErrorRecord {
  std::size_t model_index = 0;
  Method method = Method::bethe;
  double logz_error = 0.0;
  double marginal_l1 = 0.0;
  bool converged = false;
  std::size_t iterations = 0;
  std::size_t inference_calls = 0;
};

/// |log Z - log Z~| and the L1 marginal error averaged over all regions.
/// Non-finite approximations give NaN.
inline ErrorRecord metric_errors(const ExactResult& exact, const BeliefSet& approx, double approx_log_partition) {
  ErrorRecord r;
  r.logz_error = std::abs(exact.log_partition - approx_log_partition);
  const auto& mu = exact.marginals;
  if (approx.node.size() != mu.node.size() || approx.factor.size() != mu.factor.size())
    throw InvalidArgument("beliefs do not match the exact result");
  double total = 0.0;
  auto add = [&](const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
    for (std::size_t k = 0; k < a.size(); ++k) {
      if (a[k].size() != b[k].size()) throw InvalidArgument("belief table size mismatch");
      for (std::size_t x = 0; x < a[k].size(); ++x) total += std::abs(a[k][x] - b[k][x]);
    }
  };
  add(approx.node, mu.node);
  add(approx.factor, mu.factor);
  r.marginal_l1 = total / static_cast<double>(mu.node.size() + mu.factor.size());
  if (!std::isfinite(r.marginal_l1) || !std::isfinite(r.logz_error)) {
    r.logz_error = std::numeric_limits<double>::quiet_NaN();
    r.marginal_l1 = std::numeric_limits<double>::quiet_NaN();
  }
  return r;
}

inline ErrorRecord metric_errors(const ExactResult& exact, const InferenceResult& approx) {
  ErrorRecord r = metric_errors(exact, approx.beliefs, approx.log_partition_estimate);
  r.converged = approx.converged;
  r.iterations = approx.iterations;
  r.inference_calls = 1;
  return r;
}

// ---------------------------------------------------------------------------
// worker pool

namespace detail {

/// Runs f(0..n-1) on `jobs` threads. Results must go to per-index slots; the
/// exception of the lowest failing index is rethrown.
template <class F>
void parallel_for(std::size_t n, std::size_t jobs, F&& f) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t k; (k = next.fetch_add(1)) < n;) {
      try {
        f(k);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  const std::size_t t = std::min(std::max<std::size_t>(1, jobs), std::max<std::size_t>(1, n));
  if (t == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < t; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

class CsvWriter {
 public:
  explicit CsvWriter(std::ostream& os) : os_(os) { os_ << std::setprecision(17); }
  CsvWriter& operator<<(double v) {
    sep();
    if (std::isnan(v)) os_ << "nan";
    else os_ << v;
    return *this;
  }
  CsvWriter& operator<<(const std::string& s) {
    sep();
    os_ << s;
    return *this;
  }
  CsvWriter& operator<<(const char* s) { return *this << std::string(s); }
  CsvWriter& operator<<(std::size_t v) {
    sep();
    os_ << v;
    return *this;
  }
  CsvWriter& operator<<(bool v) { return *this << std::size_t{v ? 1u : 0u}; }
  void end_row() {
    os_ << '\n';
    first_ = true;
  }

 private:
  void sep() {
    if (!first_) os_ << ',';
    first_ = false;
  }
  std::ostream& os_;
  bool first_ = true;
};

inline double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? std::numeric_limits<double>::quiet_NaN() : s / static_cast<double>(v.size());
}

inline double standard_error(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// methods

/// Per-model output of one approximation method.
struct MethodOutcome {
  BeliefSet beliefs;
  double log_partition = 0.0;
  bool converged = false;
  std::size_t iterations = 0;
  std::size_t inference_calls = 0;
};

/// Entropy moments for a graph, read from `path` when it exists and
/// estimated (and written there, if a path is given) otherwise.
inline EntropyMoments obtain_moments(const FactorGraph& g, const MomentsOptions& opts, const std::string& path,
                                     bool* loaded = nullptr) {
  if (loaded) *loaded = false;
  if (!path.empty() && std::filesystem::exists(path)) {
    std::ifstream in(path);
    EntropyMoments m;
    m.A = read_moments(in);
    m.converged = true;  // the diagnostic is not stored; a cache is trusted
    const auto n = static_cast<Eigen::Index>(g.num_vars() + g.num_factors());
    if (m.A.rows() != n) throw InvalidArgument("moments file '" + path + "' does not match the graph");
    if (loaded) *loaded = true;
    return m;
  }
  EntropyMoments m = estimate_entropy_moments(g, opts);
  if (!path.empty()) {
    std::ofstream out(path);
    if (!out) throw InvalidArgument("cannot write moments file '" + path + "'");
    write_moments(out, m.A);
  }
  return m;
}

/// Holds the static counting numbers of a graph so each model only pays for
/// its own propagation (or bound optimization) run.
class MethodRunner {
 public:
  MethodRunner(const FactorGraph& g, const std::vector<Method>& methods, const PropagationOptions& bp,
               const BoundOptions& bound, const EntropyMoments* moments)
      : g_(g), bp_(bp), bound_(bound) {
    bound_.inner.bp = bp;
    for (Method m : methods) {
      switch (m) {
        case Method::bethe: numbers_[m] = bethe_numbers(g); break;
        case Method::trw_uniform: numbers_[m] = trw_numbers(g, default_trees(g)); break;
        case Method::convex_bethe_c: numbers_[m] = convex_bethe_c(g).c; break;
        case Method::convex_bethe_mu:
        case Method::convex_bethe_mu_vv:
          if (!moments) throw InvalidArgument(to_string(m) + " needs entropy moments");
          numbers_[m] = convex_bethe_mu(g, *moments, m == Method::convex_bethe_mu_vv).c;
          break;
        case Method::trw_opt: detail::require_pairwise(g, "trw_opt"); break;
        case Method::convex_bethe_u: break;
      }
    }
    for (const auto& [m, c] : numbers_)
      if (is_singular(g, c) && !poly_) poly_ = std::make_shared<const LocalPolytope>(g);
  }

  const CountingNumbers* static_numbers(Method m) const {
    const auto it = numbers_.find(m);
    return it == numbers_.end() ? nullptr : &it->second;
  }

  MethodOutcome run(Method m, const LogPotentials& p) const {
    MethodOutcome o;
    if (const CountingNumbers* c = static_numbers(m)) {
      // c_a = 0 (a QP landing on the cone boundary) has no message form;
      // the free energy is still concave, so maximize it directly
      if (poly_ && is_singular(g_, *c)) {
        const AscentResult a = maximize_free_energy(*poly_, p, *c);
        o.beliefs = a.beliefs;
        o.log_partition = a.objective;
        o.converged = a.converged;
        o.iterations = a.iterations;
        o.inference_calls = 1;
        return o;
      }
      InferenceResult r = run_counting_bp(g_, p, *c, bp_);
      o.beliefs = std::move(r.beliefs);
      o.log_partition = r.log_partition_estimate;
      o.converged = r.converged;
      o.iterations = r.iterations;
      o.inference_calls = 1;
      return o;
    }
    if (m != Method::convex_bethe_u && m != Method::trw_opt) throw InvalidArgument(to_string(m) + " was not prepared");
    BoundResult r = m == Method::convex_bethe_u ? convex_bethe_u(g_, p, bound_) : trw_opt(g_, p, bound_);
    o.beliefs = std::move(r.beliefs);
    o.log_partition = r.bound;
    o.converged = r.inner_converged;
    o.iterations = r.iterations;
    o.inference_calls = r.inference_calls;
    return o;
  }

 private:
  const FactorGraph& g_;
  PropagationOptions bp_;
  BoundOptions bound_;
  std::map<Method, CountingNumbers> numbers_;
  std::shared_ptr<const LocalPolytope> poly_;
};

inline EnsembleSpec point_ensemble(const SweepConfig& cfg, std::size_t field_index, std::size_t interaction_index) {
  EnsembleSpec e;
  e.field_strength = cfg.fields.at(field_index);
  e.interaction_strength = cfg.interactions.at(interaction_index);
  e.mode = cfg.mode;
  e.seed = derive_seed(cfg.seed, field_index, interaction_index);
  e.num_models = cfg.num_models;
  return e;
}

inline ErrorRecord score(const ExactResult& exact, const MethodOutcome& o, Method m, std::size_t model_index) {
  ErrorRecord r = metric_errors(exact, o.beliefs, o.log_partition);
  r.model_index = model_index;
  r.method = m;
  r.converged = o.converged;
  r.iterations = o.iterations;
  r.inference_calls = o.inference_calls;
  return r;
}

/// Error records for every (field, interaction, model, method) of the
/// config, indexed [field][interaction][model * methods + method].
inline std::vector<std::vector<std::vector<ErrorRecord>>> evaluate_grid(const SweepConfig& cfg,
                                                                        const std::vector<Method>& methods,
                                                                        const EntropyMoments* moments) {
  const FactorGraph g = graph_from_spec(cfg.graph);
  const MethodRunner runner(g, methods, cfg.bp, cfg.bound, moments);
  const std::size_t nf = cfg.fields.size(), ni = cfg.interactions.size(), nm = cfg.num_models;
  std::vector<std::vector<std::vector<ErrorRecord>>> out(
      nf, std::vector<std::vector<ErrorRecord>>(ni, std::vector<ErrorRecord>(nm * methods.size())));
  detail::parallel_for(nf * ni * nm, cfg.jobs, [&](std::size_t job) {
    const std::size_t k = job % nm, ii = (job / nm) % ni, fi = job / (nm * ni);
    const LogPotentials p = sample_ising(g, point_ensemble(cfg, fi, ii), k);
    const ExactResult exact = exact_infer(g, p);
    for (std::size_t m = 0; m < methods.size(); ++m) {
      ErrorRecord r;
      try {
        r = score(exact, runner.run(methods[m], p), methods[m], k);
      } catch (const SingularCountingError&) {
        r.model_index = k;
        r.method = methods[m];
        r.logz_error = r.marginal_l1 = std::numeric_limits<double>::quiet_NaN();
      }
      out[fi][ii][k * methods.size() + m] = r;
    }
  });
  return out;
}

struct MethodSummary {
  double mean_logz = 0.0, se_logz = 0.0, mean_l1 = 0.0, se_l1 = 0.0, frac_converged = 0.0, mean_calls = 0.0;
};

inline MethodSummary summarize(const std::vector<ErrorRecord>& records, std::size_t method_slot, std::size_t num_methods) {
  std::vector<double> lz, l1;
  double conv = 0.0, calls = 0.0;
  for (std::size_t k = method_slot; k < records.size(); k += num_methods) {
    lz.push_back(records[k].logz_error);
    l1.push_back(records[k].marginal_l1);
    conv += records[k].converged ? 1.0 : 0.0;
    calls += static_cast<double>(records[k].inference_calls);
  }
  const auto n = static_cast<double>(lz.size());
  return {detail::mean(lz), detail::standard_error(lz), detail::mean(l1), detail::standard_error(l1), conv / n, calls / n};
}

// ---------------------------------------------------------------------------
// sweeps

/// Errors of symmetric counting numbers over a (c_i, c_a) grid, for the
/// first entries of `fields` and `interactions`.
inline void sweep_counting_space(const SweepConfig& cfg, std::ostream& os) {
  const FactorGraph g = graph_from_spec(cfg.graph);
  const std::string family = cfg.graph.substr(0, cfg.graph.find(':'));
  if (family != "torus" && family != "complete")
    throw InvalidArgument("counting-space sweeps need a symmetric graph (torus or complete)");
  const EnsembleSpec spec = point_ensemble(cfg, 0, 0);
  std::vector<LogPotentials> models;
  std::vector<ExactResult> exact;
  for (std::size_t k = 0; k < cfg.num_models; ++k) {
    models.push_back(sample_ising(g, spec, k));
    exact.push_back(exact_infer(g, models.back()));
  }
  struct Cell {
    double logz = 0, l1 = 0, frac = 0;
    bool vvalid = false, certified = false, singular = false;
  };
  const std::size_t nc = cfg.c_factor.size();
  std::vector<Cell> cells(cfg.c_node.size() * nc);
  detail::parallel_for(cells.size(), cfg.jobs, [&](std::size_t idx) {
    const CountingNumbers c = symmetric_numbers(g, cfg.c_node[idx / nc], cfg.c_factor[idx % nc]);
    Cell& cell = cells[idx];
    cell.vvalid = is_variable_valid(c, g, 1e-9);
    cell.certified = find_convexity_certificate(c, g).has_value();
    cell.singular = is_singular(g, c);
    if (cell.singular) {
      cell.logz = cell.l1 = std::numeric_limits<double>::quiet_NaN();
      return;
    }
    std::vector<double> lz, l1;
    for (std::size_t k = 0; k < models.size(); ++k) {
      ErrorRecord r;
      try {
        r = metric_errors(exact[k], run_counting_bp(g, models[k], c, cfg.bp));
      } catch (const NumericalError&) {
        r.logz_error = r.marginal_l1 = std::numeric_limits<double>::quiet_NaN();
      }
      lz.push_back(r.logz_error);
      l1.push_back(r.marginal_l1);
      cell.frac += r.converged ? 1.0 : 0.0;
    }
    cell.logz = detail::mean(lz);
    cell.l1 = detail::mean(l1);
    cell.frac /= static_cast<double>(models.size());
  });
  detail::CsvWriter w(os);
  w << "c_i" << "c_alpha" << "mean_logz_err" << "mean_marg_l1" << "frac_converged" << "is_vvalid" << "is_certified"
    << "is_singular";
  w.end_row();
  for (std::size_t idx = 0; idx < cells.size(); ++idx) {
    const Cell& c = cells[idx];
    w << cfg.c_node[idx / nc] << cfg.c_factor[idx % nc] << c.logz << c.l1 << c.frac << c.vvalid << c.certified
      << c.singular;
    w.end_row();
  }
}

/// Mean and standard error of both metrics per (w_F, w_I, method).
inline void sweep_coupling(const SweepConfig& cfg, std::ostream& os, const EntropyMoments* moments = nullptr) {
  const auto grid = evaluate_grid(cfg, cfg.methods, moments);
  detail::CsvWriter w(os);
  w << "omega_F" << "omega_I" << "method" << "num_models" << "mean_logz_err" << "se_logz_err" << "mean_marg_l1"
    << "se_marg_l1" << "frac_converged" << "mean_inference_calls";
  w.end_row();
  for (std::size_t fi = 0; fi < cfg.fields.size(); ++fi)
    for (std::size_t ii = 0; ii < cfg.interactions.size(); ++ii)
      for (std::size_t m = 0; m < cfg.methods.size(); ++m) {
        const MethodSummary s = summarize(grid[fi][ii], m, cfg.methods.size());
        w << cfg.fields[fi] << cfg.interactions[ii] << to_string(cfg.methods[m]) << cfg.num_models << s.mean_logz
          << s.se_logz << s.mean_l1 << s.se_l1 << s.frac_converged << s.mean_calls;
        w.end_row();
      }
}

/// Difference of mean errors (first method minus second) over (w_F, w_I).
inline void sweep_meta_map(const SweepConfig& cfg, std::ostream& os, const EntropyMoments* moments = nullptr) {
  std::vector<Method> methods{cfg.method_pair.first};
  if (cfg.method_pair.second != cfg.method_pair.first) methods.push_back(cfg.method_pair.second);
  const auto grid = evaluate_grid(cfg, methods, moments);
  detail::CsvWriter w(os);
  w << "omega_F" << "omega_I" << "diff_logz_err" << "diff_marg_l1";
  w.end_row();
  for (std::size_t fi = 0; fi < cfg.fields.size(); ++fi)
    for (std::size_t ii = 0; ii < cfg.interactions.size(); ++ii) {
      const MethodSummary a = summarize(grid[fi][ii], 0, methods.size());
      const MethodSummary b = summarize(grid[fi][ii], methods.size() - 1, methods.size());
      w << cfg.fields[fi] << cfg.interactions[ii] << a.mean_logz - b.mean_logz << a.mean_l1 - b.mean_l1;
      w.end_row();
    }
}

}  // namespace cbfe
