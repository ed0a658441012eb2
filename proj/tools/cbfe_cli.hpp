#pragma once

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cbfe/harness.hpp"

namespace cbfe::cli {

enum ExitCode { ok = 0, config_error = 1, numerical_failure = 2 };

namespace detail {

struct Common {
  std::string config;
  std::vector<std::string> overrides;  // key=value
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> jobs;
  std::string out;
};

inline void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "key = value config file");
  sub->add_option("--set", c.overrides, "override a config key (key=value)");
  sub->add_option("--seed", c.seed, "base seed");
  sub->add_option("--jobs", c.jobs, "worker threads");
  sub->add_option("--out", c.out, "output path (stdout when omitted)");
}

inline Config load(const Common& c, const std::vector<std::pair<std::string, std::string>>& flags) {
  Config cfg = c.config.empty() ? Config() : Config::load(c.config);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw InvalidArgument("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  for (const auto& [k, v] : flags)
    if (!v.empty()) cfg.set(k, v);
  if (c.seed) cfg.set("seed", std::to_string(*c.seed));
  if (c.jobs) cfg.set("jobs", std::to_string(*c.jobs));
  if (!c.out.empty()) cfg.set("out", c.out);
  return cfg;
}

// Writes to cfg.out when set, else to `fallback`.
template <class F>
void emit(const std::string& path, std::ostream& fallback, F&& write) {
  if (path.empty()) {
    write(fallback);
    return;
  }
  std::ostringstream buf;
  write(buf);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InvalidArgument("cannot write '" + path + "'");
  f << buf.str();
}

inline void write_beliefs(std::ostream& os, const BeliefSet& b) {
  os << std::setprecision(17);
  for (std::size_t i = 0; i < b.node.size(); ++i) {
    os << "node " << i;
    for (double v : b.node[i]) os << ' ' << v;
    os << '\n';
  }
  for (std::size_t a = 0; a < b.factor.size(); ++a) {
    os << "factor " << a;
    for (double v : b.factor[a]) os << ' ' << v;
    os << '\n';
  }
}

inline std::optional<EntropyMoments> moments_for(const FactorGraph& g, const SweepConfig& s,
                                                 const std::vector<Method>& methods, std::ostream& err) {
  bool any = false;
  for (Method m : methods) any = any || needs_moments(m);
  if (!any) return std::nullopt;
  MomentsOptions mo = s.moments;
  mo.seed = s.seed;
  mo.jobs = s.jobs;
  bool loaded = false;
  EntropyMoments m = obtain_moments(g, mo, s.moments_path, &loaded);
  err << (loaded ? "moments: loaded " + s.moments_path : "moments: estimated") << '\n';
  if (!m.converged) err << "warning: entropy moments did not pass the convergence diagnostic\n";
  return m;
}

// The model addressed by (field index, interaction index, model index) of
// the config, or the model file when one is given.
inline Model resolve_model(const SweepConfig& s, const std::string& model_path, std::size_t fi, std::size_t ii,
                           std::size_t k) {
  if (!model_path.empty()) {
    std::ifstream in(model_path);
    if (!in) throw InvalidArgument("cannot open model file '" + model_path + "'");
    return parse_model(in);
  }
  if (k >= s.num_models) throw InvalidArgument("model index out of range");
  Model m{graph_from_spec(s.graph), {}};
  m.potentials = sample_ising(m.graph, point_ensemble(s, fi, ii), k);
  return m;
}

}  // namespace detail

/// Entry point of the command-line tool. Returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Counting-number free energies: inference, bound optimization and sweeps", "cbfe"};
  app.require_subcommand(1);

  detail::Common common;
  std::string graph, moments, methods, method_name = "bethe", model_path, trace_path;
  std::size_t field_index = 0, interaction_index = 0, model_index = 0;
  std::optional<std::size_t> num_models;

  auto* infer = app.add_subcommand("infer", "run one approximation on one model");
  auto* space = app.add_subcommand("sweep-space", "errors over a (c_i, c_alpha) grid");
  auto* coupling = app.add_subcommand("sweep-coupling", "errors per method over interaction strengths");
  auto* map = app.add_subcommand("sweep-map", "error differences of two methods over (w_F, w_I)");
  auto* est = app.add_subcommand("estimate-moments", "Monte-Carlo entropy moments over the local polytope");
  auto* optc = app.add_subcommand("optimize-counting", "compute counting numbers for one method");
  for (auto* sub : {infer, space, coupling, map, est, optc}) {
    detail::add_common(sub, common);
    sub->add_option("--graph", graph, "graph spec: grid:RxC, torus:RxC or complete:N");
    sub->add_option("--moments", moments, "entropy-moment cache file");
    sub->add_option("--num-models", num_models, "models per point");
  }
  for (auto* sub : {coupling, map}) sub->add_option("--methods", methods, "comma-separated method list");
  map->add_option("--pair", methods, "two comma-separated methods (first minus second)");
  for (auto* sub : {infer, optc}) {
    sub->add_option("--method", method_name, "approximation method");
    sub->add_option("--model", model_path, "model file (otherwise generated from the config)");
    sub->add_option("--field-index", field_index, "index into the fields grid");
    sub->add_option("--interaction-index", interaction_index, "index into the interactions grid");
    sub->add_option("--model-index", model_index, "model index within the ensemble");
  }
  optc->add_option("--trace", trace_path, "bound optimizer trace CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return config_error;
  }

  try {
    std::vector<std::pair<std::string, std::string>> flags{{"graph", graph}, {"moments", moments}};
    if (num_models) flags.emplace_back("num_models", std::to_string(*num_models));
    if (!methods.empty()) flags.emplace_back(map->parsed() ? "method_pair" : "methods", methods);
    const Config cfg = detail::load(common, flags);
    const SweepConfig s = sweep_config_from(cfg);

    if (infer->parsed() || optc->parsed()) {
      const Method m = parse_method(method_name);
      const Model model = detail::resolve_model(s, model_path, field_index, interaction_index, model_index);
      const FactorGraph& g = model.graph;
      const auto mom = detail::moments_for(g, s, {m}, err);

      if (optc->parsed()) {
        CountingNumbers c;
        std::ostringstream summary;
        summary << std::setprecision(17) << "method = " << to_string(m) << '\n';
        if (m == Method::convex_bethe_u || m == Method::trw_opt) {
          BoundOptions bo = s.bound;
          bo.inner.bp = s.bp;
          const BoundResult r = m == Method::convex_bethe_u ? convex_bethe_u(g, model.potentials, bo)
                                                             : trw_opt(g, model.potentials, bo);
          c = r.c;
          summary << "bound = " << r.bound << "\nfw_gap = " << r.gap << "\niterations = " << r.iterations
                  << "\ninference_calls = " << r.inference_calls << '\n';
          if (!trace_path.empty()) detail::emit(trace_path, out, [&](std::ostream& os) { write_bound_trace(os, r.trace); });
        } else {
          const MethodRunner runner(g, {m}, s.bp, s.bound, mom ? &*mom : nullptr);
          c = *runner.static_numbers(m);
        }
        summary << "variable_valid = " << is_variable_valid(c, g, 1e-8)
                << "\ncertified = " << find_convexity_certificate(c, g).has_value() << '\n';
        out << summary.str();
        if (!s.out.empty()) detail::emit(s.out, out, [&](std::ostream& os) { write_counting_numbers(os, c); });
        return ok;
      }

      const MethodRunner runner(g, {m}, s.bp, s.bound, mom ? &*mom : nullptr);
      const MethodOutcome o = runner.run(m, model.potentials);
      out << std::setprecision(17) << "method = " << to_string(m) << "\nlog_partition = " << o.log_partition
          << "\nconverged = " << o.converged << "\niterations = " << o.iterations
          << "\ninference_calls = " << o.inference_calls << '\n';
      try {
        const ExactResult exact = exact_infer(g, model.potentials);
        const ErrorRecord e = metric_errors(exact, o.beliefs, o.log_partition);
        out << "exact_log_partition = " << exact.log_partition << "\nlogz_error = " << e.logz_error
            << "\nmarginal_l1 = " << e.marginal_l1 << '\n';
      } catch (const ModelTooLarge&) {
        out << "exact_log_partition = unavailable\n";
      }
      if (!s.out.empty()) detail::emit(s.out, out, [&](std::ostream& os) { detail::write_beliefs(os, o.beliefs); });
      return ok;
    }

    if (est->parsed()) {
      const FactorGraph g = graph_from_spec(s.graph);
      MomentsOptions mo = s.moments;
      mo.seed = s.seed;
      mo.jobs = s.jobs;
      const EntropyMoments m = estimate_entropy_moments(g, mo);
      out << std::setprecision(17) << "samples = " << m.sample_count << "\nburn_in = " << m.burn_in
          << "\nmax_rhat = " << m.max_rhat() << "\nconverged = " << m.converged << '\n';
      if (!m.converged) err << "warning: entropy moments did not pass the convergence diagnostic\n";
      const std::string path = s.out.empty() ? s.moments_path : s.out;
      detail::emit(path, out, [&](std::ostream& os) { write_moments(os, m.A); });
      return ok;
    }

    if (space->parsed()) {
      detail::emit(s.out, out, [&](std::ostream& os) { sweep_counting_space(s, os); });
      return ok;
    }

    const FactorGraph g = graph_from_spec(s.graph);
    const std::vector<Method> used =
        coupling->parsed() ? s.methods : std::vector<Method>{s.method_pair.first, s.method_pair.second};
    const auto mom = detail::moments_for(g, s, used, err);
    const EntropyMoments* mp = mom ? &*mom : nullptr;
    if (coupling->parsed()) detail::emit(s.out, out, [&](std::ostream& os) { sweep_coupling(s, os, mp); });
    else detail::emit(s.out, out, [&](std::ostream& os) { sweep_meta_map(s, os, mp); });
    return ok;
  } catch (const InvalidArgument& e) {
    err << "config error: " << e.what() << '\n';
    return config_error;
  } catch (const ParseError& e) {
    err << "config error: " << e.what() << '\n';
    return config_error;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return numerical_failure;
  } catch (const ModelTooLarge& e) {
    err << "numerical failure: " << e.what() << '\n';
    return numerical_failure;
  }
}

}  // namespace cbfe::cli
