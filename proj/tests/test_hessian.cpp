#include "support.hpp"

#include <Eigen/Eigenvalues>

using namespace fm_test;

namespace {

Vector sorted_desc(Vector v) {
  std::sort(v.data(), v.data() + v.size(), std::greater<>());
  return v;
}

Vector eigenvalues_desc(const Matrix& s) {
  return sorted_desc(Eigen::SelfAdjointEigenSolver<Matrix>(s).eigenvalues());
}

// Jacobian of vec(P Sx^{1/2}) with respect to the flattened parameters,
// by central differences; P is multilinear so this is exact up to roundoff.
Matrix fd_phi_transpose(const LinearNetwork& net, const DataMoments& mom) {
  const Vector w = net.flatten();
  const Index cols = mom.dx() * mom.dy();
  Matrix j(cols, w.size());
  for (Index i = 0; i < w.size(); ++i) {
    const double h = 1e-6;
    Vector a = w, b = w;
    a(i) += h;
    b(i) -= h;
    const Matrix pa = end_to_end(LinearNetwork::from_flat(net.dims(), a)) * mom.sigma_x_sqrt;
    const Matrix pb = end_to_end(LinearNetwork::from_flat(net.dims(), b)) * mom.sigma_x_sqrt;
    j.col(i) = linalg::vec(pa - pb) / (2.0 * h);
  }
  return j;
}

}  // namespace

TEST(Phi, DepthOneIsIdentity) {
  CounterRng rng(1);
  const auto p = moments_from_target(rng.gaussian(2, 3));
  const LinearNetwork net({p.target.t});
  const HessianFactor f = phi_blocks(net, p.moments);
  EXPECT_LT(max_abs(phi_matrix(f) - Matrix::Identity(6, 6)), 1e-15);
  EXPECT_LT(max_abs(full_hessian(f) - 2.0 * Matrix::Identity(6, 6)), 1e-15);
}

TEST(Phi, CanonicalDiagonalFactors) {
  const auto p = moments_from_target((Matrix(2, 2) << 4, 0, 0, 1).finished());
  const HessianFactor f = phi_blocks(canonical_widest(p.target, {2, 2, 2}), p.moments);
  const Matrix d = (Matrix(2, 2) << 2, 0, 0, 1).finished();
  EXPECT_LT(max_abs(f.left_factors[1] - d), 1e-15);
  EXPECT_LT(max_abs(f.right_factors[0] - d), 1e-15);
  EXPECT_LT(max_abs(f.left_factors[0] - Matrix::Identity(2, 2)), 1e-15);
  EXPECT_LT(max_abs(f.right_factors[1] - Matrix::Identity(2, 2)), 1e-15);
}

TEST(Phi, MatchesBruteForceKronecker) {
  CounterRng rng(2);
  const auto p = moments_from_target(rng.gaussian(3, 2));
  const std::vector<int> dims{2, 3, 4, 3};
  const LinearNetwork net = sample_arbitrary_minimum(p.target, dims, 5);
  const Matrix phi = phi_matrix(phi_blocks(net, p.moments));
  Index row = 0;
  for (int k = 1; k <= 3; ++k) {
    Matrix a = Matrix::Identity(2, 2);
    for (int j = 1; j < k; ++j) a = net.layer(j) * a;
    Matrix g = Matrix::Identity(3, 3);
    for (int i = 3; i > k; --i) g = g * net.layer(i);
    g.transposeInPlace();
    for (Index ia = 0; ia < a.rows(); ++ia)
      for (Index ig = 0; ig < g.rows(); ++ig)
        for (Index ja = 0; ja < a.cols(); ++ja)
          for (Index jg = 0; jg < g.cols(); ++jg)
            EXPECT_NEAR(phi(row + ia * g.rows() + ig, ja * g.cols() + jg), a(ia, ja) * g(ig, jg), 1e-12);
    row += a.rows() * g.rows();
  }
  EXPECT_EQ(row, phi.rows());
}

TEST(Phi, IsJacobianOfWhitenedProduct) {
  CounterRng rng(3);
  const DataMoments mom = random_moments(3, 2, rng);
  const LinearNetwork net = random_net({3, 3, 4, 2}, rng, 0.7);
  const Matrix phi = phi_matrix(phi_blocks(net, mom));
  EXPECT_LT(max_abs(phi.transpose() - fd_phi_transpose(net, mom)), 1e-8);
}

TEST(Phi, MatrixFreeProductsAgree) {
  CounterRng rng(4);
  const auto p = moments_from_target(rng.gaussian(3, 3));
  const LinearNetwork net = sample_arbitrary_minimum(p.target, {3, 3, 3, 3}, 9);
  const HessianFactor f = phi_blocks(net, p.moments);
  const Matrix phi = phi_matrix(f);
  const Vector b = rng.gaussian(f.col_dim, 1);
  const Vector y = rng.gaussian(f.n_params, 1);
  EXPECT_LT((apply_phi(f, b) - phi * b).norm(), 1e-10 * (1 + (phi * b).norm()));
  EXPECT_LT((apply_phi_transpose(f, y) - phi.transpose() * y).norm(), 1e-10 * (1 + (phi.transpose() * y).norm()));
  EXPECT_LT((apply_full_hessian(f, y) - full_hessian(f) * y).norm(), 1e-10 * (1 + (full_hessian(f) * y).norm()));
  EXPECT_LT((apply_reduced_hessian(f, b) - reduced_hessian(f) * b).norm(), 1e-10 * (1 + (reduced_hessian(f) * b).norm()));
}

TEST(FullHessian, ScalarEntries) {
  const auto mom = scalar_moments(2.0, 1.0);
  const LinearNetwork net({Matrix::Constant(1, 1, 1.0), Matrix::Constant(1, 1, 2.0)});
  const Matrix h = full_hessian(phi_blocks(net, mom));
  EXPECT_LT(max_abs(h - (Matrix(2, 2) << 8, 4, 4, 2).finished()), 1e-14);
  EXPECT_LT(max_abs(h - fd_hessian(net, mom)), 1e-4 * (1 + max_abs(h)));
}

TEST(FullHessian, MatchesFiniteDifferencesWithColoredInput) {
  CounterRng rng(5);
  const DataMoments noisy = random_moments(2, 3, rng);
  const auto clean = make_moments(noisy.sigma_x, noisy.sigma_yx, noisy.sigma_yx * noisy.t.transpose());
  const TargetMap t = make_target(clean);
  const LinearNetwork net = sample_arbitrary_minimum(t, {2, 3, 3}, 4);
  const Matrix h = full_hessian(phi_blocks(net, clean));
  EXPECT_LT(max_abs(h - fd_hessian(net, clean)), 1e-4 * (1 + max_abs(h)));
}

TEST(FullHessian, SizeGuard) {
  const auto p = moments_from_target(Matrix::Identity(2, 2));
  const HessianFactor f = phi_blocks(identity_init({2, 2, 2}), p.moments);
  EXPECT_THROW(full_hessian(f, 7), SizeGuardError);
  EXPECT_NO_THROW(full_hessian(f, 8));
}

TEST(FullHessian, RankAndSpectrumAgreeWithReduced) {
  CounterRng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const auto pr = random_problem(rng, 3, 2 + trial % 3);
    const LinearNetwork net = sample_arbitrary_minimum(pr.white.target, pr.dims, 50 + trial);
    const HessianFactor f = phi_blocks(net, pr.white.moments);
    const Matrix h = full_hessian(f);
    EXPECT_LE(linalg::numerical_rank(h), f.col_dim);
    const Vector full = eigenvalues_desc(h);
    const Vector red = eigenvalues_desc(reduced_hessian(f));
    for (Index i = 0; i < red.size(); ++i) {
      if (red(i) <= 1e-9 * red(0)) break;
      EXPECT_NEAR(full(i), red(i), 1e-9 * red(0));
    }
  }
}

TEST(ReducedHessian, DepthOneIsTwiceInputCovariance) {
  CounterRng rng(7);
  const DataMoments mom = random_moments(3, 2, rng);
  const LinearNetwork net({mom.t});
  const Matrix r = reduced_hessian(phi_blocks(net, mom));
  EXPECT_LT(max_abs(r - 2.0 * linalg::kron(mom.sigma_x, Matrix::Identity(2, 2))), 1e-12);
}

TEST(Sharpness, WidestValues) {
  EXPECT_EQ(widest_sharpness(3.7, 1), 2.0);
  EXPECT_NEAR(widest_sharpness(4.0, 2), 16.0, 1e-14);
  EXPECT_NEAR(widest_sharpness(2.0, 3), 6.0 * std::pow(2.0, 4.0 / 3.0), 1e-12);
  EXPECT_NEAR(widest_sharpness(2.0, 3), 15.1191, 1e-4);
  EXPECT_EQ(widest_sharpness(0.0, 3), 0.0);
}

TEST(Sharpness, CanonicalDiagonal) {
  const auto p = moments_from_target((Matrix(2, 2) << 4, 0, 0, 1).finished());
  const HessianFactor f = phi_blocks(canonical_widest(p.target, {2, 2, 2}), p.moments);
  const auto r = lambda_max(f, EigenMethod::DenseReduced, p.target);
  EXPECT_NEAR(r.lambda_max, 16.0, 1e-12);
  EXPECT_NEAR(r.gap_ratio, 1.0, 1e-12);
  EXPECT_NEAR(r.eigvec.norm(), 1.0, 1e-12);
  EXPECT_LE(r.residual, 1e-9);
  const Vector b = theoretical_top_eigvec(f, p.target);
  EXPECT_LE((full_hessian(f) * b - 16.0 * b).norm(), 1e-9);
}

TEST(Sharpness, ScalarNetwork) {
  const auto mom = scalar_moments(2.0, 1.0);
  const LinearNetwork net({Matrix::Constant(1, 1, 1.0), Matrix::Constant(1, 1, 2.0)});
  const auto r = lambda_max(phi_blocks(net, mom), EigenMethod::DenseReduced, make_target(mom));
  EXPECT_NEAR(r.lambda_max, 10.0, 1e-12);
}

TEST(Sharpness, PowerIterationAgreesWithDense) {
  CounterRng rng(8);
  int compared = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto pr = random_problem(rng, 4, 2 + trial % 4);
    const LinearNetwork net = sample_arbitrary_minimum(pr.white.target, pr.dims, 200 + trial);
    const HessianFactor f = phi_blocks(net, pr.white.moments);
    const Vector ev = eigenvalues_desc(reduced_hessian(f));
    if (ev.size() > 1 && ev(0) - ev(1) < 1e-6 * ev(0)) continue;
    PowerOptions opts;
    opts.max_iters = 1000000;
    const auto power = lambda_max(f, EigenMethod::PowerIteration, pr.white.target, opts);
    const auto dense = lambda_max(f, EigenMethod::DenseReduced, pr.white.target);
    EXPECT_NEAR(power.lambda_max, dense.lambda_max, 1e-8 * dense.lambda_max);
    EXPECT_NEAR(std::abs(power.eigvec.dot(dense.eigvec)), 1.0, 1e-6);
    ++compared;
  }
  EXPECT_GE(compared, 15);
}

TEST(Sharpness, PowerIterationReportsNonConvergence) {
  CounterRng rng(9);
  const auto p = moments_from_target(rng.gaussian(3, 3));
  const HessianFactor f = phi_blocks(sample_arbitrary_minimum(p.target, {3, 3, 3, 3}, 1), p.moments);
  PowerOptions opts;
  opts.max_iters = 2;
  try {
    lambda_max(f, EigenMethod::PowerIteration, p.target, opts);
    FAIL();
  } catch (const ConvergenceError& e) {
    EXPECT_GT(e.last_residual(), 0.0);
  }
}

TEST(Sharpness, FloorAndCertificateOnSampledMinima) {
  CounterRng rng(10);
  for (int trial = 0; trial < 40; ++trial) {
    const auto pr = random_problem(rng, 4, 2 + trial % 4);
    const TargetMap& t = pr.white.target;
    const LinearNetwork net = sample_arbitrary_minimum(t, pr.dims, 300 + trial);
    const HessianFactor f = phi_blocks(net, pr.white.moments);
    const auto r = lambda_max(f, EigenMethod::DenseReduced, t);
    const int m = net.depth();
    EXPECT_GE(r.lambda_max, r.widest_value - 1e-8 * std::max(1.0, r.widest_value));
    EXPECT_GE(r.gap_ratio, 1.0 - 1e-8);
    EXPECT_GE(r.lambda_max, nu_bound(t.u * t.v.transpose(), t, m, pr.white.moments) - 1e-8 * std::max(1.0, r.widest_value));
    EXPECT_GE(rayleigh_quotient(f, theoretical_top_eigvec(f, t)), r.widest_value * (1.0 - 1e-10));
  }
}

TEST(Sharpness, DepthOneEigvecIsOuterProduct) {
  CounterRng rng(11);
  const auto p = moments_from_target(rng.gaussian(3, 2));
  const HessianFactor f = phi_blocks(LinearNetwork({p.target.t}), p.moments);
  EXPECT_LT((theoretical_top_eigvec(f, p.target) - linalg::vec(p.target.u * p.target.v.transpose())).norm(), 1e-14);
}

TEST(Sharpness, DegenerateTargetRaises) {
  const auto p = moments_from_target(Matrix::Zero(2, 2));
  const HessianFactor f = phi_blocks(LinearNetwork({Matrix::Zero(2, 2)}), p.moments);
  EXPECT_THROW(theoretical_top_eigvec(f, p.target), DegenerateTargetError);
}

TEST(Sharpness, RepeatedTopSingularValueFlagged) {
  const auto p = moments_from_target(Matrix::Identity(3, 3));
  const auto r = lambda_max(phi_blocks(identity_init({3, 3, 3}), p.moments), EigenMethod::DenseReduced, p.target);
  EXPECT_FALSE(r.unique_top);
  EXPECT_NEAR(r.lambda_max, 4.0, 1e-12);
}

TEST(NuBound, TopAndSecondTriplets) {
  const auto p = moments_from_target((Matrix(2, 2) << 4, 0, 0, 1).finished());
  const TargetMap& t = p.target;
  EXPECT_NEAR(nu_bound(t.u * t.v.transpose(), t, 2, p.moments), 16.0, 1e-12);
  const Matrix b2 = t.left_vectors.col(1) * t.right_vectors.col(1).transpose();
  EXPECT_NEAR(nu_bound(b2, t, 2, p.moments), 4.0, 1e-12);
  EXPECT_NEAR(nu_bound(3.0 * t.u * t.v.transpose(), t, 2, p.moments), 16.0, 1e-12);
}

TEST(NuBound, NeverExceedsWidestValue) {
  CounterRng rng(12);
  for (int trial = 0; trial < 1000; ++trial) {
    const int dx = 1 + trial % 4, dy = 1 + (trial / 4) % 4, m = 1 + trial % 5;
    const auto p = moments_from_target(rng.gaussian(dy, dx));
    Matrix b = rng.gaussian(dy, dx);
    b /= b.norm();
    EXPECT_LE(nu_bound(b, p.target, m, p.moments), widest_sharpness(p.target, m) + 1e-9);
  }
}

TEST(ChainInequality, FrobeniusSumDominatesProduct) {
  CounterRng rng(13);
  for (int trial = 0; trial < 1000; ++trial) {
    const int m = 1 + trial % 6;
    std::vector<int> dims(static_cast<std::size_t>(m + 1));
    for (auto& d : dims) d = 1 + static_cast<int>(rng() % 4);
    double lhs = 0.0;
    Matrix prod = Matrix::Identity(dims[0], dims[0]);
    for (int k = 1; k <= m; ++k) {
      const Matrix psi = std::exp(rng.uniform(-1.0, 1.0)) * rng.gaussian(dims[k], dims[k - 1]);
      lhs += psi.squaredNorm();
      prod = psi * prod;
    }
    const double rhs = m * std::pow(linalg::spectral_norm(prod), 2.0 / m);
    EXPECT_GE(lhs, rhs * (1.0 - 1e-12));
  }
}

TEST(Stability, Examples) {
  EXPECT_TRUE(stability_check(8.0, 0.25));
  EXPECT_FALSE(stability_check(8.0, 0.3));
  EXPECT_THROW(stability_check(8.0, 0.0), ArgumentError);
  const ScalarNetwork widest{{std::sqrt(2.0), std::sqrt(2.0)}, 2.0, 1.0};
  const double lam = scalar_lambda_max(widest);
  EXPECT_NEAR(2.0 / lam, 0.25, 1e-15);
  EXPECT_TRUE(stability_check(lam, 0.25));
}
