#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace flatminima {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public ArgumentError {
 public:
  using ArgumentError::ArgumentError;
};

/// Input covariance is (numerically) rank deficient.
class DegenerateInputError : public Error {
 public:
  explicit DegenerateInputError(const std::string& what)
      : Error("degenerate input covariance: " + what) {}
};

/// sigma_max(T) = 0 where a top singular triplet is needed.
class DegenerateTargetError : public Error {
 public:
  using Error::Error;
};

class CapacityError : public ArgumentError {
 public:
  using ArgumentError::ArgumentError;
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

class SizeGuardError : public Error {
 public:
  using Error::Error;
};

class UnsupportedShapeError : public Error {
 public:
  using Error::Error;
};

class UnsupportedOrthantError : public Error {
 public:
  using Error::Error;
};

class SingularWeightError : public Error {
 public:
  using Error::Error;
};

class NumericalFailure : public Error {
 public:
  using Error::Error;
};

class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double last_residual)
      : Error(what), last_residual_(last_residual) {}
  double last_residual() const noexcept { return last_residual_; }

 private:
  double last_residual_;
};

namespace linalg {

/// Column-major vectorization (stacks columns).
inline Vector vec(const Matrix& m) {
  return Eigen::Map<const Vector>(m.data(), m.size());
}

inline Matrix unvec(const Vector& v, Index rows, Index cols) {
  if (v.size() != rows * cols) {
    throw ShapeError("unvec: size mismatch");
  }
  return Eigen::Map<const Matrix>(v.data(), rows, cols);
}

inline Matrix kron(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Index i = 0; i < a.rows(); ++i) {
    for (Index j = 0; j < a.cols(); ++j) {
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
    }
  }
  return out;
}

inline Vector singular_values(const Matrix& m) {
  if (m.size() == 0) return Vector();
  Eigen::JacobiSVD<Matrix> svd(m);
  return svd.singularValues();
}

inline double spectral_norm(const Matrix& m) {
  if (m.size() == 0) return 0.0;
  return singular_values(m)(0);
}

/// Flip each column pair so the largest-magnitude entry of the left vector
/// is positive (ties go to the lowest index).
inline void canonicalize_signs(Matrix& left, Matrix& right) {
  for (Index c = 0; c < left.cols(); ++c) {
    Index best = 0;
    double best_abs = -1.0;
    for (Index r = 0; r < left.rows(); ++r) {
      const double a = std::abs(left(r, c));
      if (a > best_abs) {
        best_abs = a;
        best = r;
      }
    }
    if (left(best, c) < 0.0) {
      left.col(c) *= -1.0;
      right.col(c) *= -1.0;
    }
  }
}

struct Svd {
  Matrix u;  // rows x d
  Vector s;  // d, nonincreasing
  Matrix v;  // cols x d
};

/// Thin SVD with the deterministic sign convention applied.
inline Svd thin_svd(const Matrix& m) {
  Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  Svd out{svd.matrixU(), svd.singularValues(), svd.matrixV()};
  canonicalize_signs(out.u, out.v);
  return out;
}

/// Symmetric PSD square root. Small negative eigenvalues from rounding are
/// clamped to zero.
inline Matrix sym_sqrt(const Matrix& s) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(s);
  Vector ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

/// Largest eigenpair of a symmetric matrix.
struct SymTop {
  double value;
  Vector vector;
};

inline SymTop sym_top_eigen(const Matrix& s) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(s);
  const Index n = s.rows();
  return {es.eigenvalues()(n - 1), es.eigenvectors().col(n - 1)};
}

/// Number of singular values above rel_tol times the largest.
inline Index numerical_rank(const Matrix& m, double rel_tol = 1e-9) {
  const Vector sv = singular_values(m);
  if (sv.size() == 0 || sv(0) == 0.0) return 0;
  return (sv.array() > rel_tol * sv(0)).count();
}

/// d_rows x d_cols matrix with `diag` on the leading diagonal, zeros elsewhere.
inline Matrix rect_diag(Index rows, Index cols, const Vector& diag) {
  Matrix out = Matrix::Zero(rows, cols);
  const Index n = std::min({rows, cols, diag.size()});
  for (Index i = 0; i < n; ++i) out(i, i) = diag(i);
  return out;
}

inline double relative_error(const Matrix& a, const Matrix& b) {
  return (a - b).norm() / std::max(1.0, b.norm());
}

}  // namespace linalg
}  // namespace flatminima
