#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "cbfe/linprog.hpp"
#include "cbfe/quadprog.hpp"
#include "cbfe/rng.hpp"

using namespace cbfe;

namespace {

// Best objective over all basic feasible solutions (vertex enumeration).
double lp_vertex_oracle(const LinearProgram& lp, bool& feasible) {
  const int m = static_cast<int>(lp.A.rows()), n = static_cast<int>(lp.A.cols());
  double best = std::numeric_limits<double>::infinity();
  feasible = false;
  for (unsigned mask = 0; mask < (1u << n); ++mask) {
    if (__builtin_popcount(mask) != m) continue;
    Eigen::MatrixXd B(m, m);
    std::vector<int> cols;
    for (int j = 0; j < n; ++j)
      if (mask >> j & 1) cols.push_back(j);
    for (int k = 0; k < m; ++k) B.col(k) = lp.A.col(cols[k]);
    Eigen::FullPivLU<Eigen::MatrixXd> lu(B);
    if (!lu.isInvertible()) continue;
    const Eigen::VectorXd xb = lu.solve(lp.b);
    if (xb.minCoeff() < -1e-12) continue;
    feasible = true;
    double obj = 0;
    for (int k = 0; k < m; ++k) obj += lp.c(cols[k]) * xb(k);
    best = std::min(best, obj);
  }
  return best;
}

// Enumerates supports, solves the equality-constrained KKT system on each, and
// keeps the best primal-feasible point. Valid for strictly convex H.
double qp_support_oracle(const QuadraticProgram& qp) {
  const int n = static_cast<int>(qp.H.rows()), m = static_cast<int>(qp.A.rows());
  double best = m == 0 ? 0.0 : std::numeric_limits<double>::infinity();  // x = 0
  for (unsigned mask = 1; mask < (1u << n); ++mask) {
    std::vector<int> f;
    for (int j = 0; j < n; ++j)
      if (mask >> j & 1) f.push_back(j);
    const int nf = static_cast<int>(f.size());
    Eigen::MatrixXd K = Eigen::MatrixXd::Zero(nf + m, nf + m);
    Eigen::VectorXd r(nf + m);
    for (int p = 0; p < nf; ++p) {
      for (int q = 0; q < nf; ++q) K(p, q) = qp.H(f[p], f[q]);
      for (int k = 0; k < m; ++k) K(p, nf + k) = K(nf + k, p) = qp.A(k, f[p]);
      r(p) = -qp.g(f[p]);
    }
    r.tail(m) = qp.b;
    Eigen::FullPivLU<Eigen::MatrixXd> lu(K);
    if (!lu.isInvertible()) continue;
    const Eigen::VectorXd sol = lu.solve(r);
    Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
    for (int p = 0; p < nf; ++p) x(f[p]) = sol(p);
    if (x.minCoeff() < -1e-12 || (m > 0 && (qp.A * x - qp.b).lpNorm<Eigen::Infinity>() > 1e-9)) continue;
    best = std::min(best, 0.5 * x.dot(qp.H * x) + qp.g.dot(x));
  }
  return best;
}

}  // namespace

TEST(LinearProgram, TextbookOptimum) {
  // max 3x + 5y s.t. x <= 4, 2y <= 12, 3x + 2y <= 18  -> (2, 6), 36
  LinearProgram lp;
  lp.A.resize(3, 5);
  lp.A << 1, 0, 1, 0, 0, 0, 2, 0, 1, 0, 3, 2, 0, 0, 1;
  lp.b = Eigen::Vector3d(4, 12, 18);
  lp.c.resize(5);
  lp.c << -3, -5, 0, 0, 0;
  const LpResult r = solve_lp(lp);
  ASSERT_EQ(r.status, LpStatus::optimal);
  EXPECT_NEAR(r.objective, -36.0, 1e-10);
  EXPECT_NEAR(r.x(0), 2.0, 1e-10);
  EXPECT_NEAR(r.x(1), 6.0, 1e-10);
}

TEST(LinearProgram, InfeasibleAndUnbounded) {
  LinearProgram lp;
  lp.A.resize(2, 2);
  lp.A << 1, 1, 1, 1;
  lp.b = Eigen::Vector2d(1, 2);
  lp.c = Eigen::Vector2d(0, 0);
  EXPECT_EQ(solve_lp(lp).status, LpStatus::infeasible);

  LinearProgram un;
  un.A.resize(1, 2);
  un.A << 1, -1;
  un.b = Eigen::VectorXd::Constant(1, 1.0);
  un.c = Eigen::Vector2d(-1, 0);
  EXPECT_EQ(solve_lp(un).status, LpStatus::unbounded);
}

TEST(LinearProgram, RedundantRowsAndNegativeRhs) {
  LinearProgram lp;
  lp.A.resize(3, 3);
  lp.A << 1, 1, 1, 2, 2, 2, -1, 0, 1;
  lp.b = Eigen::Vector3d(1, 2, -0.5);
  lp.c = Eigen::Vector3d(1, 2, 3);
  const LpResult r = solve_lp(lp);
  ASSERT_EQ(r.status, LpStatus::optimal);
  bool feasible = false;
  Eigen::MatrixXd A2(2, 3);
  A2 << 1, 1, 1, -1, 0, 1;
  const double oracle = lp_vertex_oracle({A2, Eigen::Vector2d(1, -0.5), lp.c}, feasible);
  ASSERT_TRUE(feasible);
  EXPECT_NEAR(r.objective, oracle, 1e-10);
  EXPECT_LT((lp.A * r.x - lp.b).lpNorm<Eigen::Infinity>(), 1e-10);
}

TEST(LinearProgram, RandomAgainstVertexEnumeration) {
  Rng rng(5);
  int solved = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int m = 2 + trial % 3, n = 6 + trial % 4;
    LinearProgram lp{Eigen::MatrixXd(m, n), Eigen::VectorXd(m), Eigen::VectorXd(n)};
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) lp.A(i, j) = std::round(rng.uniform(-3, 3));
    for (int i = 0; i < m; ++i) lp.b(i) = std::round(rng.uniform(-3, 3));
    for (int j = 0; j < n; ++j) lp.c(j) = rng.uniform(0, 1);  // c >= 0 keeps it bounded
    bool feasible = false;
    const double oracle = lp_vertex_oracle(lp, feasible);
    const LpResult r = solve_lp(lp);
    if (!feasible) {
      EXPECT_EQ(r.status, LpStatus::infeasible) << trial;
      continue;
    }
    ASSERT_EQ(r.status, LpStatus::optimal) << trial;
    EXPECT_NEAR(r.objective, oracle, 1e-9) << trial;
    EXPECT_GE(r.x.minCoeff(), -1e-12);
    EXPECT_LT((lp.A * r.x - lp.b).lpNorm<Eigen::Infinity>(), 1e-9);
    ++solved;
  }
  EXPECT_GT(solved, 50);
}

TEST(QuadraticProgram, UnconstrainedInteriorOptimum) {
  QuadraticProgram qp{Eigen::Matrix2d::Identity(), Eigen::Vector2d(-1, -2), Eigen::MatrixXd(0, 2), Eigen::VectorXd(0)};
  const QpResult r = solve_qp(qp);
  EXPECT_NEAR(r.x(0), 1.0, 1e-10);
  EXPECT_NEAR(r.x(1), 2.0, 1e-10);
  EXPECT_LT(r.kkt_residual, 1e-10);
}

TEST(QuadraticProgram, ActiveBound) {
  // min (x-1)^2 + (y+1)^2, x + y = 1 -> y clamps at 0
  QuadraticProgram qp{2 * Eigen::Matrix2d::Identity(), Eigen::Vector2d(-2, 2), Eigen::RowVector2d(1, 1),
                      Eigen::VectorXd::Constant(1, 1.0)};
  const QpResult r = solve_qp(qp);
  EXPECT_NEAR(r.x(0), 1.0, 1e-10);
  EXPECT_NEAR(r.x(1), 0.0, 1e-10);
  EXPECT_LT(r.kkt_residual, 1e-10);
  EXPECT_TRUE(r.polished);
}

TEST(QuadraticProgram, RandomAgainstSupportEnumeration) {
  Rng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 4 + trial % 4, m = trial % 3;
    Eigen::MatrixXd R(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) R(i, j) = rng.uniform(-1, 1);
    QuadraticProgram qp;
    qp.H = R.transpose() * R + 0.1 * Eigen::MatrixXd::Identity(n, n);
    qp.g.resize(n);
    for (int j = 0; j < n; ++j) qp.g(j) = rng.uniform(-2, 2);
    qp.A.resize(m, n);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) qp.A(i, j) = rng.uniform(0.1, 1.0);
    qp.b = Eigen::VectorXd::Constant(m, 1.0);
    const double oracle = qp_support_oracle(qp);
    const QpResult r = solve_qp(qp);
    if (!std::isfinite(oracle)) {  // one row dominates the other: no feasible point
      EXPECT_GT(r.kkt_residual, 1e-6) << trial;
      continue;
    }
    EXPECT_NEAR(r.objective, oracle, 1e-8) << trial;
    EXPECT_LT(r.kkt_residual, 1e-8) << trial;
  }
}

TEST(QuadraticProgram, SemidefiniteWithRedundantEqualities) {
  // H singular, duplicated constraint row
  Eigen::MatrixXd H = Eigen::MatrixXd::Zero(3, 3);
  H(0, 0) = 2;
  Eigen::MatrixXd A(2, 3);
  A << 1, 1, 1, 2, 2, 2;
  QuadraticProgram qp{H, Eigen::Vector3d(-4, 0, 1), A, Eigen::Vector2d(1, 2)};
  const QpResult r = solve_qp(qp);
  // optimum puts everything on x0 (gradient -2 at x0 = 1 beats y, z)
  EXPECT_NEAR(r.x(0), 1.0, 1e-8);
  EXPECT_LT(r.kkt_residual, 1e-8);
}
