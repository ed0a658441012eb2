#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cbfe/harness.hpp"
#include "cbfe_cli.hpp"
#include "test_support.hpp"

using namespace cbfe;

namespace {

std::vector<std::vector<std::string>> read_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    std::vector<std::string> row;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) row.push_back(cell);
    rows.push_back(row);
  }
  return rows;
}

struct CliRun {
  int code;
  std::string out, err;
};

CliRun run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "cbfe");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cbfe::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("cbfe_test_" + name)).string();
}

SweepConfig small_config() {
  SweepConfig s;
  s.graph = "grid:3x3";
  s.fields = {1.0};
  s.interactions = {0.5, 1.0};
  s.num_models = 3;
  s.seed = 7;
  s.bound.max_outer = 5;
  return s;
}

}  // namespace

TEST(Config, ParsesKeyValueLines) {
  const Config c = Config::parse("# comment\n graph = torus:5x5  \n\nseed=3 # trailing\ninteractions = 0:1:3\n");
  EXPECT_EQ(c.get("graph", ""), "torus:5x5");
  EXPECT_EQ(c.get_u64("seed", 0), 3u);
  EXPECT_EQ(c.get_grid("interactions", {}), (std::vector<double>{0.0, 0.5, 1.0}));
  EXPECT_EQ(c.get_grid("missing", {2.0}), (std::vector<double>{2.0}));
}

TEST(Config, Errors) {
  try {
    Config::parse("a = 1\nnonsense\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  EXPECT_THROW(Config::parse("a = 1\na = 2\n"), ParseError);
  EXPECT_THROW(Config::parse("x = 0:1:1").get_grid("x", {}), InvalidArgument);
  EXPECT_THROW(Config::parse("x = 1,,2").get_grid("x", {}), InvalidArgument);
  EXPECT_THROW(Config::parse("x = abc").get_double("x", 0), InvalidArgument);
  EXPECT_THROW(Config::parse("x = -3").get_u64("x", 0), InvalidArgument);
  EXPECT_THROW(sweep_config_from(Config::parse("colour = red")), InvalidArgument);
  EXPECT_THROW(sweep_config_from(Config::parse("methods = bethe, magic")), InvalidArgument);
  EXPECT_THROW(sweep_config_from(Config::parse("graph = ring:5")), InvalidArgument);
  EXPECT_THROW(sweep_config_from(Config::parse("method_pair = bethe")), InvalidArgument);
  EXPECT_THROW(sweep_config_from(Config::parse("damping = 0")), InvalidArgument);
  EXPECT_EQ(sweep_config_from(Config::parse("damping = 1")).bp.damping, 1.0);
}

TEST(Config, Defaults) {
  const SweepConfig s = sweep_config_from(Config());
  EXPECT_EQ(s.num_models, 20u);
  EXPECT_EQ(s.interactions.size(), 20u);
  EXPECT_DOUBLE_EQ(s.interactions.front(), 0.1);
  EXPECT_DOUBLE_EQ(s.interactions.back(), 2.0);
  EXPECT_EQ(s.fields, (std::vector<double>{0.05, 1.0}));
  EXPECT_EQ(s.c_node.size(), 50u);
  EXPECT_EQ(s.c_factor.size(), 50u);
  EXPECT_EQ(s.methods.size(), 7u);
  for (Method m : all_methods()) EXPECT_EQ(parse_method(to_string(m)), m);
}

TEST(GraphSpec, Families) {
  EXPECT_EQ(graph_from_spec("torus:5x5").num_factors(), 50u);
  EXPECT_EQ(graph_from_spec("grid:3x4").num_factors(), 17u);
  EXPECT_EQ(graph_from_spec("complete:10").num_factors(), 45u);
  EXPECT_THROW(graph_from_spec("grid:3"), InvalidArgument);
  EXPECT_THROW(graph_from_spec("torus:2x5"), InvalidArgument);
}

TEST(MetricErrors, Examples) {
  const FactorGraph g({2}, {});
  ExactResult exact;
  exact.log_partition = 0.0;
  exact.marginals.node = {{1.0, 0.0}};
  const ErrorRecord same = metric_errors(exact, exact.marginals, 0.0);
  EXPECT_EQ(same.logz_error, 0.0);
  EXPECT_EQ(same.marginal_l1, 0.0);
  const ErrorRecord r = metric_errors(exact, BeliefSet::uniform(g), 0.25);
  EXPECT_DOUBLE_EQ(r.marginal_l1, 1.0);
  EXPECT_DOUBLE_EQ(r.logz_error, 0.25);
}

TEST(MetricErrors, TreeBetheIsExact) {
  Rng rng(4);
  for (int t = 0; t < 5; ++t) {
    const FactorGraph g = cbfe::testing::random_tree(rng, 8, 3);
    const LogPotentials p = cbfe::testing::random_potentials(rng, g, 1.0, 1.0);
    PropagationOptions o;
    o.tol = 1e-12;
    const ErrorRecord r = metric_errors(exact_infer(g, p), run_counting_bp(g, p, bethe_numbers(g), o));
    EXPECT_LT(r.logz_error, 1e-6);
    EXPECT_LT(r.marginal_l1, 1e-6);
    EXPECT_TRUE(r.converged);
  }
}

TEST(SweepCoupling, IndependentModelsAreExactForValidMethods) {
  SweepConfig s = small_config();
  s.interactions = {0.0};
  s.methods = {Method::bethe, Method::trw_uniform, Method::convex_bethe_c, Method::convex_bethe_u, Method::trw_opt};
  std::ostringstream os;
  sweep_coupling(s, os);
  const auto rows = read_csv(os.str());
  ASSERT_EQ(rows.size(), 1 + s.methods.size());
  EXPECT_EQ(rows[0][4], "mean_logz_err");
  for (std::size_t r = 1; r < rows.size(); ++r) {
    EXPECT_LT(std::stod(rows[r][4]), 1e-6) << rows[r][2];
    EXPECT_LT(std::stod(rows[r][6]), 1e-6) << rows[r][2];
  }
}

TEST(SweepCoupling, ThreadCountDoesNotChangeOutput) {
  SweepConfig s = small_config();
  s.methods = {Method::bethe, Method::convex_bethe_c, Method::convex_bethe_u};
  std::ostringstream serial, threaded;
  sweep_coupling(s, serial);
  s.jobs = 3;
  sweep_coupling(s, threaded);
  EXPECT_EQ(serial.str(), threaded.str());
}

TEST(SweepMetaMap, SelfPairIsZeroAndSwapNegates) {
  SweepConfig s = small_config();
  s.fields = {0.0, 0.5};
  s.method_pair = {Method::bethe, Method::bethe};
  std::ostringstream self;
  sweep_meta_map(s, self);
  const auto zero = read_csv(self.str());
  ASSERT_EQ(zero.size(), 5u);
  for (std::size_t r = 1; r < zero.size(); ++r) {
    EXPECT_EQ(std::stod(zero[r][2]), 0.0);
    EXPECT_EQ(std::stod(zero[r][3]), 0.0);
  }
  std::ostringstream ab, ba;
  s.method_pair = {Method::trw_uniform, Method::bethe};
  sweep_meta_map(s, ab);
  s.method_pair = {Method::bethe, Method::trw_uniform};
  sweep_meta_map(s, ba);
  const auto x = read_csv(ab.str()), y = read_csv(ba.str());
  for (std::size_t r = 1; r < x.size(); ++r)
    for (std::size_t c = 2; c < 4; ++c) EXPECT_EQ(std::stod(x[r][c]), -std::stod(y[r][c]));
}

TEST(SweepCountingSpace, FlagsOnTorus) {
  SweepConfig s;
  s.graph = "torus:5x5";
  s.fields = {1.0};
  s.interactions = {0.5};
  s.num_models = 2;
  s.c_node = {-3.0, -1.0};
  s.c_factor = {0.0, 0.5, 1.0};
  std::ostringstream os;
  sweep_counting_space(s, os);
  const auto rows = read_csv(os.str());
  ASSERT_EQ(rows.size(), 7u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"c_i", "c_alpha", "mean_logz_err", "mean_marg_l1", "frac_converged",
                                               "is_vvalid", "is_certified", "is_singular"}));
  auto cell = [&](double ci, double ca) {
    for (std::size_t r = 1; r < rows.size(); ++r)
      if (std::stod(rows[r][0]) == ci && std::stod(rows[r][1]) == ca) return rows[r];
    ADD_FAILURE() << "missing cell";
    return rows[0];
  };
  // Bethe: variable-valid but not certified
  EXPECT_EQ(cell(-3, 1)[5], "1");
  EXPECT_EQ(cell(-3, 1)[6], "0");
  // on the line c_i = 1 - 4 c_a
  EXPECT_EQ(cell(-1, 0.5)[5], "1");
  EXPECT_EQ(cell(-1, 0.5)[6], "1");
  EXPECT_EQ(cell(-1, 1)[5], "0");
  // c_a = 0 makes the exponents undefined
  for (double ci : {-3.0, -1.0}) {
    const auto row = cell(ci, 0);
    EXPECT_EQ(row[7], "1");
    EXPECT_EQ(row[2], "nan");
    EXPECT_EQ(row[3], "nan");
  }
  EXPECT_EQ(cell(-1, 0.5)[7], "0");
  EXPECT_NE(cell(-1, 0.5)[2], "nan");
}

TEST(SweepCountingSpace, RejectsAsymmetricGraphs) {
  SweepConfig s;
  s.graph = "grid:3x3";
  std::ostringstream os;
  EXPECT_THROW(sweep_counting_space(s, os), InvalidArgument);
}

TEST(Cli, InferPrintsAndWritesBeliefs) {
  const std::string beliefs = temp_path("beliefs.txt");
  const CliRun r = run_cli({"infer", "--graph", "grid:2x2", "--method", "bethe", "--out", beliefs});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("log_partition = "), std::string::npos);
  const std::string b = slurp(beliefs);
  EXPECT_EQ(b.rfind("node 0 ", 0), 0u);
  std::remove(beliefs.c_str());
}

TEST(Cli, InferFromModelFile) {
  const std::string path = temp_path("model.fg");
  {
    const FactorGraph g = build_grid(1, 2, false);
    EnsembleSpec e;
    e.field_strength = 1;
    e.interaction_strength = 1;
    std::ofstream f(path);
    serialize_model(f, g, sample_ising(g, e, 0));
  }
  const CliRun r = run_cli({"infer", "--model", path, "--method", "bethe"});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("logz_error = "), std::string::npos);
  std::remove(path.c_str());
}

TEST(Cli, ExitCodes) {
  EXPECT_EQ(run_cli({}).code, 1);
  EXPECT_EQ(run_cli({"infer", "--method", "nope"}).code, 1);
  EXPECT_EQ(run_cli({"sweep-coupling", "--config", "/nonexistent/cfg"}).code, 1);
  EXPECT_EQ(run_cli({"sweep-coupling", "--set", "num_models=0"}).code, 1);
  EXPECT_EQ(run_cli({"sweep-space", "--graph", "grid:3x3"}).code, 1);
  EXPECT_EQ(run_cli({"infer", "--help"}).code, 0);
  EXPECT_EQ(run_cli({"optimize-counting", "--set", "outer_iters=x"}).code, 1);
  const CliRun big = run_cli({"infer", "--graph", "complete:30", "--method", "bethe"});
  EXPECT_EQ(big.code, 0);
  EXPECT_NE(big.out.find("exact_log_partition = unavailable"), std::string::npos);
}

TEST(Cli, NumericalFailureExitCode) {
  // exact inference on a 40-node complete graph is refused
  const std::string path = temp_path("space.cfg");
  {
    std::ofstream f(path);
    f << "graph = complete:40\nnum_models = 1\nc_node = -1:0:2\nc_factor = 0.5:1:2\n";
  }
  EXPECT_EQ(run_cli({"sweep-space", "--config", path}).code, 2);
  std::remove(path.c_str());
}

TEST(Cli, SweepIsByteIdenticalAcrossRuns) {
  const std::string cfg = temp_path("coupling.cfg"), a = temp_path("a.csv"), b = temp_path("b.csv");
  {
    std::ofstream f(cfg);
    f << "graph = grid:3x3\nfields = 1\ninteractions = 0.5, 1.5\nnum_models = 2\n"
         "methods = bethe, convexBethe_c, convexBethe_u, trw_opt\nouter_iters = 4\n";
  }
  EXPECT_EQ(run_cli({"sweep-coupling", "--config", cfg, "--seed", "11", "--out", a}).code, 0);
  EXPECT_EQ(run_cli({"sweep-coupling", "--config", cfg, "--seed", "11", "--out", b, "--jobs", "2"}).code, 0);
  EXPECT_FALSE(slurp(a).empty());
  EXPECT_EQ(slurp(a), slurp(b));
  EXPECT_EQ(run_cli({"sweep-coupling", "--config", cfg, "--seed", "12", "--out", b}).code, 0);
  EXPECT_NE(slurp(a), slurp(b));
  for (const auto& p : {cfg, a, b}) std::remove(p.c_str());
}

TEST(Cli, MomentsCacheIsReused) {
  const std::string A = temp_path("A.mat");
  std::remove(A.c_str());
  const CliRun est = run_cli({"estimate-moments", "--graph", "grid:2x2", "--set", "moments_samples=200", "--out", A});
  ASSERT_EQ(est.code, 0) << est.err;
  const std::string cached = slurp(A);
  ASSERT_FALSE(cached.empty());
  const CliRun sweep = run_cli({"sweep-coupling", "--graph", "grid:2x2", "--moments", A, "--num-models", "2", "--set",
                            "interactions=0.5", "--set", "fields=1", "--methods", "convexBethe_mu,convexBethe_mu_vv"});
  EXPECT_EQ(sweep.code, 0) << sweep.err;
  EXPECT_NE(sweep.err.find("moments: loaded"), std::string::npos);
  EXPECT_EQ(slurp(A), cached);
  std::remove(A.c_str());
}

TEST(Cli, SweepRowsReplayThroughInfer) {
  const std::string cfg = temp_path("replay.cfg");
  {
    std::ofstream f(cfg);
    f << "graph = grid:3x3\nfields = 1\ninteractions = 0.5, 1.0\nnum_models = 1\nmethods = trw_uniform\nseed = 5\n";
  }
  const CliRun sweep = run_cli({"sweep-coupling", "--config", cfg});
  ASSERT_EQ(sweep.code, 0) << sweep.err;
  const auto rows = read_csv(sweep.out);
  ASSERT_EQ(rows.size(), 3u);
  for (std::size_t ii = 0; ii < 2; ++ii) {
    const CliRun one = run_cli({"infer", "--config", cfg, "--method", "trw_uniform", "--interaction-index",
                            std::to_string(ii), "--model-index", "0"});
    ASSERT_EQ(one.code, 0) << one.err;
    EXPECT_NE(one.out.find("logz_error = " + rows[ii + 1][4] + "\n"), std::string::npos) << one.out;
    EXPECT_NE(one.out.find("marginal_l1 = " + rows[ii + 1][6] + "\n"), std::string::npos) << one.out;
  }
  std::remove(cfg.c_str());
}

TEST(Cli, OptimizeCountingWritesNumbersAndTrace) {
  const std::string c = temp_path("c.txt"), trace = temp_path("trace.csv");
  CliRun r = run_cli({"optimize-counting", "--graph", "grid:3x3", "--method", "convexBethe_u", "--out", c, "--trace", trace,
                  "--set", "outer_iters=3"});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("certified = 1"), std::string::npos);
  EXPECT_EQ(slurp(trace).rfind("iteration,bound,fw_gap,step,inference_calls\n", 0), 0u);
  std::ifstream in(c);
  const CountingNumbers back = read_counting_numbers(in, build_grid(3, 3, false));
  EXPECT_TRUE(is_variable_valid(back, build_grid(3, 3, false), 1e-8));
  r = run_cli({"optimize-counting", "--graph", "torus:5x5", "--method", "bethe"});
  EXPECT_NE(r.out.find("certified = 0"), std::string::npos);
  for (const auto& p : {c, trace}) std::remove(p.c_str());
}
