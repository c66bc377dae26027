#pragma once

#include "flatminima/common.hpp"

namespace flatminima {

inline constexpr double kWhitenessTolerance = 1e-10;
inline constexpr double kRankTolerance = 1e-12;

/// Empirical second-order moments of a paired dataset. The quadratic loss of
/// any linear predictor depends on the data only through these.
struct DataMoments {
  Matrix sigma_x;       // d_x x d_x
  Matrix sigma_yx;      // d_y x d_x
  Matrix sigma_y;       // d_y x d_y
  Matrix sigma_x_sqrt;  // symmetric PSD root of sigma_x
  bool is_white = false;

  // Derived and cached: t = sigma_yx sigma_x^{-1}, and the loss floor
  // tr(sigma_y) - tr(t sigma_yx^T) reached on the global-minima set.
  Matrix t;
  double loss_floor = 0.0;

  Index dx() const { return sigma_x.rows(); }
  Index dy() const { return sigma_yx.rows(); }
};

/// Validates moments and fills the derived fields.
inline DataMoments make_moments(Matrix sigma_x, Matrix sigma_yx, Matrix sigma_y) {
  const Index dx = sigma_x.rows();
  if (sigma_x.cols() != dx || dx == 0) throw ShapeError("sigma_x must be square and nonempty");
  if (sigma_yx.cols() != dx) throw ShapeError("sigma_yx must have d_x columns");
  const Index dy = sigma_yx.rows();
  if (sigma_y.rows() != dy || sigma_y.cols() != dy) throw ShapeError("sigma_y must be d_y x d_y");

  if ((sigma_x - sigma_x.transpose()).norm() > 1e-12 * std::max(1.0, sigma_x.norm()))
    throw ArgumentError("sigma_x is not symmetric");

  Eigen::SelfAdjointEigenSolver<Matrix> es(sigma_x);
  const double lo = es.eigenvalues()(0);
  const double hi = es.eigenvalues()(dx - 1);
  if (!(hi > 0.0) || !(lo > kRankTolerance * hi)) {
    throw DegenerateInputError("smallest eigenvalue " + std::to_string(lo) +
                               " vs largest " + std::to_string(hi));
  }

  DataMoments m;
  m.sigma_x = std::move(sigma_x);
  m.sigma_yx = std::move(sigma_yx);
  m.sigma_y = std::move(sigma_y);
  m.sigma_x_sqrt = linalg::sym_sqrt(m.sigma_x);
  m.is_white = (m.sigma_x - Matrix::Identity(dx, dx)).norm() <= kWhitenessTolerance;
  m.t = m.sigma_x.llt().solve(m.sigma_yx.transpose()).transpose();
  m.loss_floor = m.sigma_y.trace() - (m.t * m.sigma_yx.transpose()).trace();
  return m;
}

/// Moments from an n x d_x input table and an n x d_y output table.
inline DataMoments compute_moments(const Matrix& x_samples, const Matrix& y_samples) {
  if (x_samples.rows() != y_samples.rows())
    throw ArgumentError("sample count mismatch: " + std::to_string(x_samples.rows()) +
                        " inputs vs " + std::to_string(y_samples.rows()) + " outputs");
  const Index n = x_samples.rows();
  if (n < 1) throw ArgumentError("need at least one sample");
  const double inv_n = 1.0 / static_cast<double>(n);
  Matrix sx = inv_n * (x_samples.transpose() * x_samples);
  Matrix syx = inv_n * (y_samples.transpose() * x_samples);
  Matrix sy = inv_n * (y_samples.transpose() * y_samples);
  // Symmetrize away rounding asymmetry of the Gram products.
  sx = 0.5 * (sx + sx.transpose()).eval();
  sy = 0.5 * (sy + sy.transpose()).eval();
  return make_moments(std::move(sx), std::move(syx), std::move(sy));
}

/// The loss-minimizing end-to-end map T with its SVD.
struct TargetMap {
  Matrix t;
  Matrix left_vectors;    // U, d_y x d
  Vector singular_values; // S, nonincreasing, d = min(d_x, d_y)
  Matrix right_vectors;   // V, d_x x d
  double sigma_max = 0.0;
  Vector u;
  Vector v;
  double top_gap = 0.0;

  Index dx() const { return t.cols(); }
  Index dy() const { return t.rows(); }
  /// False when sigma_max is repeated, in which case (u, v) is a convention.
  bool unique_top() const { return singular_values.size() <= 1 || top_gap > 0.0; }
  bool degenerate() const { return sigma_max == 0.0; }
};

inline TargetMap make_target(const Matrix& t) {
  if (t.size() == 0) throw ShapeError("empty target map");
  TargetMap out;
  out.t = t;
  auto svd = linalg::thin_svd(t);
  out.left_vectors = std::move(svd.u);
  out.singular_values = std::move(svd.s);
  out.right_vectors = std::move(svd.v);
  out.sigma_max = out.singular_values(0);
  out.u = out.left_vectors.col(0);
  out.v = out.right_vectors.col(0);
  out.top_gap = out.singular_values.size() > 1 ? out.singular_values(0) - out.singular_values(1) : 0.0;
  return out;
}

inline TargetMap make_target(const DataMoments& m) { return make_target(m.t); }

struct WhiteProblem {
  DataMoments moments;
  TargetMap target;
};

/// Noiseless white-data moments realizing `t`: sigma_x = I, sigma_yx = t,
/// sigma_y = t t^T.
inline WhiteProblem moments_from_target(const Matrix& t) {
  const Index dx = t.cols();
  WhiteProblem p{make_moments(Matrix::Identity(dx, dx), t, t * t.transpose()), make_target(t)};
  p.moments.t = t;  // exact, not the solve's rounding of it
  p.moments.loss_floor = 0.0;
  return p;
}

}  // namespace flatminima
