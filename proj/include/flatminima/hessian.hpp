#pragma once

#include "flatminima/common.hpp"
#include "flatminima/moments.hpp"
#include "flatminima/network.hpp"
#include "flatminima/random.hpp"

#include <optional>
#include <string_view>

namespace flatminima {

/// Factored form of the Hessian at a global minimum, H = 2 Phi Phi^T, where
/// block k of Phi is A_k (x) G_k with
///   A_k = (W_{k-1} ... W_1) Sx^{1/2}   (d_{k-1} x d_x)
///   G_k = (W_m ... W_{k+1})^T          (d_k x d_y).
/// Columns of Phi are indexed by vec(B) for B in R^{d_y x d_x}.
struct HessianFactor {
  std::vector<Matrix> left_factors;
  std::vector<Matrix> right_factors;
  std::vector<Index> block_dims;
  Index n_params = 0;
  Index col_dim = 0;
  Index dx = 0;
  Index dy = 0;

  int depth() const { return static_cast<int>(left_factors.size()); }
};

/// Only meaningful on the global-minima set; the caller is responsible for
/// checking membership.
inline HessianFactor phi_blocks(const LinearNetwork& net, const DataMoments& moments) {
  check_compatible(net, moments);
  const int m = net.depth();
  HessianFactor f;
  f.dx = net.dx();
  f.dy = net.dy();
  f.col_dim = f.dx * f.dy;
  f.left_factors.resize(static_cast<std::size_t>(m));
  f.right_factors.resize(static_cast<std::size_t>(m));
  Matrix prefix = moments.sigma_x_sqrt;
  for (int k = 1; k <= m; ++k) {
    f.left_factors[k - 1] = prefix;
    prefix = net.layer(k) * prefix;
  }
  Matrix suffix = Matrix::Identity(f.dy, f.dy);
  for (int k = m; k >= 1; --k) {
    f.right_factors[k - 1] = suffix.transpose();
    suffix = suffix * net.layer(k);
  }
  for (int k = 1; k <= m; ++k) {
    const Index rows = net.layer(k).size();
    f.block_dims.push_back(rows);
    f.n_params += rows;
  }
  return f;
}

/// Explicit N x (d_x d_y) matrix Phi.
inline Matrix phi_matrix(const HessianFactor& f) {
  Matrix phi(f.n_params, f.col_dim);
  Index off = 0;
  for (int k = 0; k < f.depth(); ++k) {
    phi.middleRows(off, f.block_dims[k]) = linalg::kron(f.left_factors[k], f.right_factors[k]);
    off += f.block_dims[k];
  }
  return phi;
}

/// Phi b, using (A (x) G) vec(B) = vec(G B A^T).
inline Vector apply_phi(const HessianFactor& f, const Vector& b) {
  const Matrix bm = linalg::unvec(b, f.dy, f.dx);
  Vector out(f.n_params);
  Index off = 0;
  for (int k = 0; k < f.depth(); ++k) {
    const Matrix blk = f.right_factors[k] * bm * f.left_factors[k].transpose();
    out.segment(off, blk.size()) = linalg::vec(blk);
    off += blk.size();
  }
  return out;
}

/// Phi^T y, using (A (x) G)^T vec(Y) = vec(G^T Y A).
inline Vector apply_phi_transpose(const HessianFactor& f, const Vector& y) {
  if (y.size() != f.n_params) throw ShapeError("apply_phi_transpose: size mismatch");
  Matrix acc = Matrix::Zero(f.dy, f.dx);
  Index off = 0;
  for (int k = 0; k < f.depth(); ++k) {
    const Index rows = f.right_factors[k].rows();
    const Index cols = f.left_factors[k].rows();
    const Matrix yk = linalg::unvec(y.segment(off, rows * cols), rows, cols);
    acc += f.right_factors[k].transpose() * yk * f.left_factors[k];
    off += rows * cols;
  }
  return linalg::vec(acc);
}

/// H b = 2 Phi Phi^T b without forming H.
inline Vector apply_full_hessian(const HessianFactor& f, const Vector& b) {
  return 2.0 * apply_phi(f, apply_phi_transpose(f, b));
}

/// Reduced Hessian applied matrix-free: 2 sum_k vec(G_k^T G_k B A_k^T A_k).
inline Vector apply_reduced_hessian(const HessianFactor& f, const Vector& b) {
  const Matrix bm = linalg::unvec(b, f.dy, f.dx);
  Matrix acc = Matrix::Zero(f.dy, f.dx);
  for (int k = 0; k < f.depth(); ++k) {
    const Matrix& a = f.left_factors[k];
    const Matrix& g = f.right_factors[k];
    acc += g.transpose() * (g * bm * a.transpose()) * a;
  }
  return 2.0 * linalg::vec(acc);
}

inline constexpr Index kDenseHessianGuard = 10000;

/// Dense N x N Hessian 2 Phi Phi^T.
inline Matrix full_hessian(const HessianFactor& f, Index max_params = kDenseHessianGuard) {
  if (f.n_params > max_params)
    throw SizeGuardError("full_hessian: " + std::to_string(f.n_params) + " parameters exceeds dense guard " +
                         std::to_string(max_params) + "; use the reduced or power-iteration path");
  const Matrix phi = phi_matrix(f);
  Matrix h = 2.0 * phi * phi.transpose();
  return 0.5 * (h + h.transpose());
}

/// Reduced Hessian 2 Phi^T Phi = 2 sum_k (A_k^T A_k) (x) (G_k^T G_k), of size
/// d_x d_y. Shares the nonzero spectrum of the full Hessian.
inline Matrix reduced_hessian(const HessianFactor& f) {
  Matrix h = Matrix::Zero(f.col_dim, f.col_dim);
  for (int k = 0; k < f.depth(); ++k) {
    const Matrix& a = f.left_factors[k];
    const Matrix& g = f.right_factors[k];
    h += linalg::kron(a.transpose() * a, g.transpose() * g);
  }
  h *= 2.0;
  return 0.5 * (h + h.transpose());
}

enum class EigenMethod { DenseReduced, PowerIteration };

inline std::string_view to_string(EigenMethod m) {
  return m == EigenMethod::DenseReduced ? "dense-reduced" : "power-iteration";
}

inline EigenMethod eigen_method_from_string(std::string_view s) {
  if (s == "dense-reduced") return EigenMethod::DenseReduced;
  if (s == "power-iteration") return EigenMethod::PowerIteration;
  throw ArgumentError("unknown eigen method: " + std::string(s));
}

inline double widest_sharpness(double sigma_max, int m) {
  if (m < 1) throw ArgumentError("depth must be >= 1");
  return 2.0 * m * std::pow(sigma_max, 2.0 * (1.0 - 1.0 / m));
}

inline double widest_sharpness(const TargetMap& target, int m) { return widest_sharpness(target.sigma_max, m); }

struct SharpnessReport {
  double lambda_max = 0.0;
  Vector eigvec;  // unit N-vector, top eigenvector of H
  EigenMethod method = EigenMethod::DenseReduced;
  int iterations = 0;
  double residual = 0.0;  // ||H b - lambda b||
  double widest_value = 0.0;
  double gap_ratio = 0.0;
  bool unique_top = true;  // false when sigma_max(T) is repeated
};

struct PowerOptions {
  double tol = 1e-10;  // on ||Hb - lambda b|| / max(1, lambda)
  int max_iters = 50000;
  std::optional<Vector> start;  // reduced-space start; defaults to vec(u v^T) + 1e-3 noise
};

namespace detail {

inline Vector default_power_start(const HessianFactor& f, const TargetMap& target) {
  Vector b = linalg::vec(target.u * target.v.transpose());
  CounterRng rng(0);
  for (Index i = 0; i < b.size(); ++i) b(i) += rng.uniform(-1e-3, 1e-3);
  (void)f;
  return b;
}

struct ReducedEig {
  double value;
  Vector vector;
  int iterations;
};

inline ReducedEig power_reduced(const HessianFactor& f, Vector b, const PowerOptions& opts) {
  double nb = b.norm();
  if (!(nb > 0.0)) {
    b = Vector::Ones(f.col_dim);
    nb = b.norm();
  }
  b /= nb;
  double lambda = 0.0;
  double res = std::numeric_limits<double>::infinity();
  for (int it = 1; it <= opts.max_iters; ++it) {
    const Vector hb = apply_reduced_hessian(f, b);
    lambda = b.dot(hb);
    res = (hb - lambda * b).norm();
    if (res <= opts.tol * std::max(1.0, std::abs(lambda))) return {lambda, b, it};
    const double n = hb.norm();
    if (!(n > 0.0)) return {0.0, b, it};  // H = 0
    b = hb / n;
  }
  throw ConvergenceError("power iteration did not converge in " + std::to_string(opts.max_iters) +
                             " iterations",
                         res);
}

}  // namespace detail

/// Top eigenpair of the Hessian at a global minimum via the reduced form.
inline SharpnessReport lambda_max(const HessianFactor& f, EigenMethod method, const TargetMap& target,
                                  const PowerOptions& opts = {}) {
  SharpnessReport r;
  r.method = method;
  detail::ReducedEig eig;
  if (method == EigenMethod::DenseReduced) {
    const auto top = linalg::sym_top_eigen(reduced_hessian(f));
    eig = {top.value, top.vector, 1};
  } else {
    eig = detail::power_reduced(f, opts.start ? *opts.start : detail::default_power_start(f, target), opts);
  }
  r.lambda_max = std::max(0.0, eig.value);
  r.iterations = eig.iterations;
  Vector b = apply_phi(f, eig.vector);
  const double nb = b.norm();
  if (nb > 0.0) {
    b /= nb;
  } else {
    b = Vector::Zero(f.n_params);
    b(0) = 1.0;
  }
  r.eigvec = std::move(b);
  r.residual = (apply_full_hessian(f, r.eigvec) - r.lambda_max * r.eigvec).norm();
  r.widest_value = widest_sharpness(target, f.depth());
  r.gap_ratio = r.widest_value > 0.0 ? r.lambda_max / r.widest_value : 0.0;
  r.unique_top = target.unique_top();
  return r;
}

/// Phi (v (x) u), normalized: the top eigenvector at a widest minimum, and a
/// Rayleigh certificate for the lower bound at any other minimum.
inline Vector theoretical_top_eigvec(const HessianFactor& f, const TargetMap& target) {
  if (target.degenerate()) throw DegenerateTargetError("sigma_max(T) = 0: top triplet undefined");
  Vector b = apply_phi(f, linalg::vec(target.u * target.v.transpose()));
  const double n = b.norm();
  if (!(n > 0.0)) throw DegenerateTargetError("Phi (v x u) vanished");
  return b / n;
}

inline double rayleigh_quotient(const HessianFactor& f, const Vector& b) {
  return b.dot(apply_full_hessian(f, b)) / b.squaredNorm();
}

/// nu(B) = 2m || (B Sx^{1/2} T^T)^{m-1} B Sx^{1/2} ||_2^{2/m} for ||B||_F = 1
/// (B is normalized first).
inline double nu_bound(const Matrix& b_matrix, const TargetMap& target, int m, const DataMoments& moments) {
  if (m < 1) throw ArgumentError("depth must be >= 1");
  if (b_matrix.rows() != target.dy() || b_matrix.cols() != target.dx()) throw ShapeError("nu_bound: B must be d_y x d_x");
  const double nf = b_matrix.norm();
  if (!(nf > 0.0)) return 0.0;
  const Matrix bs = (b_matrix / nf) * moments.sigma_x_sqrt;
  const Matrix step = bs * target.t.transpose();  // d_y x d_y
  Matrix chain = bs;
  for (int i = 1; i < m; ++i) chain = step * chain;
  return 2.0 * m * std::pow(linalg::spectral_norm(chain), 2.0 / m);
}

/// Linear stability of GD with step eta: lambda_max <= 2 / eta.
inline bool stability_check(double lambda_max, double eta) {
  if (!(eta > 0.0)) throw ArgumentError("step size must be positive");
  return lambda_max <= 2.0 / eta;
}

inline bool stability_check(const SharpnessReport& report, double eta) {
  return stability_check(report.lambda_max, eta);
}

}  // namespace flatminima
