#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>

#include "cbfe/error.hpp"

namespace cbfe {

/// min 1/2 x'Hx + g'x  s.t.  A x = b,  x >= 0,  with H symmetric PSD.
struct QuadraticProgram {
  Eigen::MatrixXd H;
  Eigen::VectorXd g;
  Eigen::MatrixXd A;  // may have zero rows
  Eigen::VectorXd b;
};

struct QpOptions {
  double tol = 1e-12;
  std::size_t max_iters = 200;
  bool polish = true;
};

struct QpResult {
  Eigen::VectorXd x;  // primal
  Eigen::VectorXd y;  // equality multipliers
  Eigen::VectorXd s;  // bound multipliers, s = Hx + g - A'y
  double objective = 0.0;
  double kkt_residual = std::numeric_limits<double>::infinity();
  std::size_t iterations = 0;
  bool converged = false;
  bool polished = false;
};

/// max of primal infeasibility, stationarity, complementarity and sign violations.
inline double qp_kkt_residual(const QuadraticProgram& qp, const Eigen::VectorXd& x,
                              const Eigen::VectorXd& y, const Eigen::VectorXd& s) {
  double r = 0.0;
  if (qp.A.rows() > 0) r = std::max(r, (qp.A * x - qp.b).lpNorm<Eigen::Infinity>());
  Eigen::VectorXd stat = qp.H * x + qp.g - s;
  if (qp.A.rows() > 0) stat -= qp.A.transpose() * y;
  r = std::max(r, stat.lpNorm<Eigen::Infinity>());
  r = std::max(r, x.cwiseProduct(s).cwiseAbs().maxCoeff());
  r = std::max(r, (-x).cwiseMax(0.0).maxCoeff());
  r = std::max(r, (-s).cwiseMax(0.0).maxCoeff());
  return r;
}

namespace detail {

// Re-solves the equality-constrained problem on the support guessed from the
// interior-point iterate; the result is exactly complementary.
inline bool polish_qp(const QuadraticProgram& qp, QpResult& res) {
  const Eigen::Index n = qp.H.rows();
  const Eigen::Index m = qp.A.rows();
  std::vector<Eigen::Index> free;
  for (Eigen::Index j = 0; j < n; ++j)
    if (res.x(j) >= res.s(j)) free.push_back(j);
  const auto nf = static_cast<Eigen::Index>(free.size());
  Eigen::MatrixXd K = Eigen::MatrixXd::Zero(nf + m, nf + m);
  Eigen::VectorXd rhs(nf + m);
  for (Eigen::Index p = 0; p < nf; ++p) {
    for (Eigen::Index q = 0; q < nf; ++q) K(p, q) = qp.H(free[p], free[q]);
    for (Eigen::Index r = 0; r < m; ++r) {
      K(p, nf + r) = -qp.A(r, free[p]);
      K(nf + r, p) = qp.A(r, free[p]);
    }
    rhs(p) = -qp.g(free[p]);
  }
  rhs.tail(m) = qp.b;
  const Eigen::VectorXd sol = K.completeOrthogonalDecomposition().solve(rhs);
  Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
  for (Eigen::Index p = 0; p < nf; ++p) x(free[p]) = sol(p);
  if (x.minCoeff() < -1e-12) return false;
  x = x.cwiseMax(0.0);
  Eigen::VectorXd y = sol.tail(m);
  Eigen::VectorXd s = qp.H * x + qp.g;
  if (m > 0) s -= qp.A.transpose() * y;
  for (Eigen::Index p = 0; p < nf; ++p) s(free[p]) = 0.0;
  const double r = qp_kkt_residual(qp, x, y, s);
  // the zeroed multipliers on the support must actually be zero
  Eigen::VectorXd stat = qp.H * x + qp.g - s;
  if (m > 0) stat -= qp.A.transpose() * y;
  if (!(r <= std::max(res.kkt_residual, 1e-10)) || stat.lpNorm<Eigen::Infinity>() > 1e-10) return false;
  res.x = std::move(x);
  res.y = std::move(y);
  res.s = std::move(s);
  res.kkt_residual = r;
  return true;
}

}  // namespace detail

/// Mehrotra predictor-corrector interior point method on the reduced normal
/// equations, optionally followed by an active-set polish.
inline QpResult solve_qp(const QuadraticProgram& qp, const QpOptions& opts = {}) {
  const Eigen::Index n = qp.H.rows();
  const Eigen::Index m = qp.A.rows();
  if (qp.H.cols() != n || qp.g.size() != n || (m > 0 && qp.A.cols() != n) || qp.b.size() != m)
    throw InvalidArgument("quadratic program shape mismatch");

  QpResult res;
  Eigen::VectorXd x = Eigen::VectorXd::Ones(n);
  Eigen::VectorXd s = Eigen::VectorXd::Ones(n);
  Eigen::VectorXd y = Eigen::VectorXd::Zero(m);
  const Eigen::MatrixXd At = qp.A.transpose();
  const double scale_b = 1.0 + (m > 0 ? qp.b.lpNorm<Eigen::Infinity>() : 0.0);
  const double scale_g = 1.0 + qp.g.lpNorm<Eigen::Infinity>();

  auto max_step = [](const Eigen::VectorXd& v, const Eigen::VectorXd& dv) {
    double a = 1.0;
    for (Eigen::Index j = 0; j < v.size(); ++j)
      if (dv(j) < 0.0) a = std::min(a, -v(j) / dv(j));
    return a;
  };

  for (std::size_t it = 0; it < opts.max_iters; ++it) {
    res.iterations = it;
    const Eigen::VectorXd rp = m > 0 ? Eigen::VectorXd(qp.A * x - qp.b) : Eigen::VectorXd();
    Eigen::VectorXd rd = qp.H * x + qp.g - s;
    if (m > 0) rd -= At * y;
    const double mu = x.dot(s) / static_cast<double>(std::max<Eigen::Index>(n, 1));
    const double rp_norm = m > 0 ? rp.lpNorm<Eigen::Infinity>() : 0.0;
    if (rp_norm <= opts.tol * scale_b && rd.lpNorm<Eigen::Infinity>() <= opts.tol * scale_g && mu <= opts.tol) {
      res.converged = true;
      break;
    }

    Eigen::MatrixXd K = qp.H;
    K.diagonal() += s.cwiseQuotient(x);
    const Eigen::LLT<Eigen::MatrixXd> kf(K);
    if (kf.info() != Eigen::Success) throw NumericalError("QP: reduced Hessian factorization failed");
    Eigen::MatrixXd KiAt;
    Eigen::LLT<Eigen::MatrixXd> sf;
    if (m > 0) {
      KiAt = kf.solve(At);
      Eigen::MatrixXd S = qp.A * KiAt;
      S.diagonal().array() += 1e-14 * (1.0 + S.diagonal().array().abs());
      sf.compute(S);
      if (sf.info() != Eigen::Success) throw NumericalError("QP: Schur complement factorization failed");
    }

    // Newton step for complementarity target rc (componentwise x_j s_j + ... = rc_j).
    auto newton = [&](const Eigen::VectorXd& rc, Eigen::VectorXd& dx, Eigen::VectorXd& dy, Eigen::VectorXd& ds) {
      const Eigen::VectorXd r1 = -rd + rc.cwiseQuotient(x);
      const Eigen::VectorXd k1 = kf.solve(r1);
      if (m > 0) {
        dy = sf.solve(-rp - qp.A * k1);
        dx = k1 + KiAt * dy;
      } else {
        dy.resize(0);
        dx = k1;
      }
      ds = (rc - s.cwiseProduct(dx)).cwiseQuotient(x);
    };

    Eigen::VectorXd dx, dy, ds;
    newton(-x.cwiseProduct(s), dx, dy, ds);
    const double ap = max_step(x, dx);
    const double ad = max_step(s, ds);
    const double mu_aff = (x + ap * dx).dot(s + ad * ds) / static_cast<double>(n);
    const double sigma = std::pow(mu_aff / mu, 3.0);
    const Eigen::VectorXd rc = -x.cwiseProduct(s) - dx.cwiseProduct(ds) + Eigen::VectorXd::Constant(n, sigma * mu);
    newton(rc, dx, dy, ds);
    const double step = 0.995;
    const double a = std::min(1.0, step * std::min(max_step(x, dx), max_step(s, ds)));
    x += a * dx;
    s += a * ds;
    if (m > 0) y += a * dy;
  }

  res.x = x;
  res.y = y;
  res.s = s;
  res.kkt_residual = qp_kkt_residual(qp, x, y, s);
  if (opts.polish) res.polished = detail::polish_qp(qp, res);
  res.objective = 0.5 * res.x.dot(qp.H * res.x) + qp.g.dot(res.x);
  return res;
}

}  // namespace cbfe
