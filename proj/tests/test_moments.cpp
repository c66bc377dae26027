#include "support.hpp"

using namespace fm_test;

TEST(Linalg, KroneckerActsOnVec) {
  CounterRng rng(1);
  const Matrix a = rng.gaussian(3, 2), g = rng.gaussian(4, 5), b = rng.gaussian(5, 2);
  EXPECT_LT(max_abs(linalg::kron(a, g) * linalg::vec(b) - linalg::vec(g * b * a.transpose())), 1e-12);
}

TEST(Linalg, KroneckerEntries) {
  CounterRng rng(2);
  const Matrix a = rng.gaussian(2, 3), b = rng.gaussian(4, 2);
  const Matrix k = linalg::kron(a, b);
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j)
      for (Index p = 0; p < b.rows(); ++p)
        for (Index q = 0; q < b.cols(); ++q) EXPECT_EQ(k(i * b.rows() + p, j * b.cols() + q), a(i, j) * b(p, q));
}

TEST(Linalg, VecRoundTrip) {
  CounterRng rng(3);
  const Matrix a = rng.gaussian(3, 4);
  EXPECT_EQ(linalg::unvec(linalg::vec(a), 3, 4), a);
  EXPECT_EQ(linalg::vec(a)(1), a(1, 0));
  EXPECT_THROW(linalg::unvec(linalg::vec(a), 5, 4), ShapeError);
}

TEST(Linalg, SymSqrtSquaresBack) {
  CounterRng rng(4);
  const Matrix r = rng.gaussian(4, 4);
  const Matrix s = r * r.transpose() + Matrix::Identity(4, 4);
  const Matrix q = linalg::sym_sqrt(s);
  EXPECT_LT(max_abs(q * q - s), 1e-10);
  EXPECT_LT(max_abs(q - q.transpose()), 1e-12);
}

TEST(Linalg, SignConventionLargestLeftEntryPositive) {
  const Matrix t = (Matrix(2, 2) << -3, 0, 0, 1).finished();
  const TargetMap tm = make_target(t);
  EXPECT_GT(tm.u(0), 0.0);
  EXPECT_NEAR(tm.v(0), -1.0, 1e-15);
}

TEST(Rng, DeterministicAndSeedSensitive) {
  CounterRng a(7), b(7), c(8);
  for (int i = 0; i < 10; ++i) {
    const auto x = a();
    EXPECT_EQ(x, b());
    EXPECT_NE(x, c());
  }
}

TEST(Rng, NormalMoments) {
  CounterRng rng(11);
  const int n = 200000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    s += z;
    s2 += z * z;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.01);
}

TEST(Rng, RandomOrthogonal) {
  CounterRng rng(5);
  const Matrix q = random_orthogonal(5, rng);
  EXPECT_LT(max_abs(q.transpose() * q - Matrix::Identity(5, 5)), 1e-12);
}

TEST(Moments, HalfIdentityIsNotWhite) {
  const Matrix x = Matrix::Identity(2, 2);
  const DataMoments m = compute_moments(x, x);
  EXPECT_LT(max_abs(m.sigma_x - 0.5 * Matrix::Identity(2, 2)), 1e-15);
  EXPECT_LT(max_abs(m.sigma_yx - 0.5 * Matrix::Identity(2, 2)), 1e-15);
  EXPECT_FALSE(m.is_white);
}

TEST(Moments, ScaledIdentityIsWhite) {
  const Matrix x = std::sqrt(2.0) * Matrix::Identity(2, 2);
  const DataMoments m = compute_moments(x, 2.0 * x);
  EXPECT_LT(max_abs(m.sigma_x - Matrix::Identity(2, 2)), 1e-15);
  EXPECT_LT(max_abs(m.sigma_yx - 2.0 * Matrix::Identity(2, 2)), 1e-15);
  EXPECT_TRUE(m.is_white);
}

TEST(Moments, TargetRecoversGeneratorAsSamplesGrow) {
  CounterRng rng(12);
  const Matrix a = rng.gaussian(2, 3);
  double prev = std::numeric_limits<double>::infinity();
  for (int n : {200, 20000}) {
    const Matrix x = rng.gaussian(n, 3);
    const Matrix y = x * a.transpose() + 0.1 * rng.gaussian(n, 2);
    const double err = (compute_moments(x, y).t - a).norm();
    EXPECT_LT(err, prev);
    prev = err;
  }
  EXPECT_LT(prev, 0.01);
}

TEST(Moments, RejectsDegenerateAndMismatched) {
  Matrix x(3, 2);
  x << 1, 2, 2, 4, 3, 6;
  try {
    compute_moments(x, x);
    FAIL();
  } catch (const DegenerateInputError& e) {
    EXPECT_NE(std::string(e.what()).find("degenerate input covariance"), std::string::npos);
  }
  EXPECT_THROW(compute_moments(Matrix::Identity(3, 2), Matrix::Identity(2, 2)), ArgumentError);
}

TEST(Moments, FromTargetDiagonal) {
  const auto p = moments_from_target((Matrix(2, 2) << 4, 0, 0, 1).finished());
  EXPECT_EQ(p.moments.sigma_x, Matrix::Identity(2, 2));
  EXPECT_EQ(p.target.sigma_max, 4.0);
  EXPECT_NEAR(std::abs(p.target.u(0)), 1.0, 1e-15);
  EXPECT_NEAR(std::abs(p.target.v(0)), 1.0, 1e-15);
}

TEST(Moments, ZeroTarget) {
  const auto p = moments_from_target(Matrix::Zero(2, 2));
  EXPECT_EQ(p.target.sigma_max, 0.0);
  EXPECT_TRUE(p.target.degenerate());
  const LinearNetwork zero({Matrix::Zero(2, 2), Matrix::Zero(2, 2)});
  EXPECT_EQ(loss(zero, p.moments), 0.0);
}

TEST(Moments, SvdReconstruction) {
  CounterRng rng(9);
  const TargetMap t = make_target(rng.gaussian(3, 2));
  const Matrix r = t.left_vectors * t.singular_values.asDiagonal() * t.right_vectors.transpose();
  EXPECT_LE((r - t.t).norm(), 1e-10);
}

TEST(Network, CapacityAndChain) {
  EXPECT_THROW(LinearNetwork({Matrix::Zero(1, 3), Matrix::Zero(3, 1)}), CapacityError);
  EXPECT_THROW(LinearNetwork({Matrix::Zero(2, 3), Matrix::Zero(3, 3)}), ShapeError);
  EXPECT_THROW(LinearNetwork(std::vector<Matrix>{}), ArgumentError);
  EXPECT_NO_THROW(LinearNetwork({Matrix::Zero(1, 3), Matrix::Zero(1, 1)}));
}

TEST(Network, EndToEndExamples) {
  const Matrix d = (Matrix(2, 2) << 2, 0, 0, 1).finished();
  const LinearNetwork net({d, d});
  EXPECT_EQ(end_to_end(net), (Matrix(2, 2) << 4, 0, 0, 1).finished());
  EXPECT_EQ(end_to_end(net, 3, 2), Matrix::Identity(2, 2));
  EXPECT_THROW(end_to_end(net, 0, 2), ArgumentError);
  EXPECT_THROW(end_to_end(net, 1, 3), ArgumentError);
}

TEST(Network, EndToEndComposition) {
  CounterRng rng(13);
  const LinearNetwork net = random_net({3, 4, 3, 5, 3}, rng);
  const Matrix full = end_to_end(net);
  for (int a = 1; a <= 4; ++a)
    for (int c = a; c <= 4; ++c)
      for (int b = a - 1; b <= c; ++b) {
        const Matrix split = end_to_end(net, b + 1, c) * end_to_end(net, a, b);
        EXPECT_LE((split - end_to_end(net, a, c)).norm(), 1e-12 * std::max(1.0, end_to_end(net, a, c).norm()));
      }
  EXPECT_LE((end_to_end(net, 3, 4) * end_to_end(net, 1, 2) - full).norm(), 1e-12 * full.norm());
}

TEST(Network, FlattenRoundTrip) {
  CounterRng rng(14);
  const LinearNetwork net = random_net({2, 3, 4}, rng);
  EXPECT_EQ(net.n_params(), 6 + 12);
  const LinearNetwork back = LinearNetwork::from_flat(net.dims(), net.flatten());
  for (int k = 1; k <= 2; ++k) EXPECT_EQ(back.layer(k), net.layer(k));
  EXPECT_EQ(net.flatten()(1), net.layer(1)(1, 0));
}

TEST(Network, ScalarLossByHand) {
  const auto mom = scalar_moments(2.0, 1.0);
  const LinearNetwork net({Matrix::Constant(1, 1, 1.0), Matrix::Constant(1, 1, 1.0)});
  EXPECT_NEAR(loss(net, mom), 1.0, 1e-15);
  const auto g = gradient(net, mom);
  EXPECT_NEAR(g[0](0, 0), -2.0, 1e-15);
  EXPECT_NEAR(g[1](0, 0), -2.0, 1e-15);
}

TEST(Network, LossMatchesSampleAverage) {
  CounterRng rng(15);
  const int n = 100;
  const Matrix x = rng.gaussian(n, 3);
  const Matrix y = rng.gaussian(n, 2);
  const DataMoments mom = compute_moments(x, y);
  const LinearNetwork net = random_net({3, 4, 2}, rng);
  const Matrix p = end_to_end(net);
  double direct = 0.0;
  for (int i = 0; i < n; ++i) direct += (y.row(i).transpose() - p * x.row(i).transpose()).squaredNorm();
  direct /= n;
  EXPECT_NEAR(loss(net, mom), direct, 1e-10 * direct);
}

TEST(Network, LossZeroAtMinimum) {
  CounterRng rng(16);
  const auto p = moments_from_target(rng.gaussian(3, 3));
  const LinearNetwork net = canonical_widest(p.target, {3, 3, 3});
  EXPECT_LT(loss(net, p.moments), 1e-24 + 1e-14 * p.target.t.squaredNorm());
  const LinearNetwork off = random_net({3, 3, 3}, rng);
  EXPECT_GT(loss(off, p.moments), 0.0);
}

TEST(Network, GradientMatchesFiniteDifferences) {
  CounterRng rng(17);
  int cases = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const int m = 1 + static_cast<int>(rng() % 4);
    std::vector<int> dims(static_cast<std::size_t>(m + 1));
    for (auto& d : dims) d = 1 + static_cast<int>(rng() % 4);
    const int cap = std::min(dims.front(), dims.back());
    for (auto& d : dims) d = std::max(d, cap);
    const LinearNetwork net = random_net(dims, rng, 0.8);
    const DataMoments mom = random_moments(dims.front(), dims.back(), rng);
    const Vector g = flatten(gradient(net, mom));
    EXPECT_LE((g - fd_gradient(net, mom)).cwiseAbs().maxCoeff(), 1e-6) << "trial " << trial;
    ++cases;
  }
  EXPECT_EQ(cases, 50);
}

TEST(Network, GradientVanishesOnOmega) {
  CounterRng rng(18);
  for (int trial = 0; trial < 20; ++trial) {
    const auto pr = random_problem(rng, 4, 2 + trial % 3, true);
    const LinearNetwork net = sample_arbitrary_minimum(pr.white.target, pr.dims, 100 + trial);
    const double tn = pr.white.target.t.norm();
    EXPECT_LE(flatten(gradient(net, pr.white.moments)).norm(), 1e-9 * (1.0 + tn * tn));
  }
}

TEST(Network, GlobalMinCheck) {
  CounterRng rng(19);
  const auto p = moments_from_target(rng.gaussian(3, 3));
  LinearNetwork net = canonical_widest(p.target, {3, 3, 3});
  const auto ok = is_global_min(net, p.target, 1e-8);
  EXPECT_TRUE(ok.is_global_min);
  EXPECT_LE(ok.residual, 1e-12 * std::max(1.0, p.target.t.norm()));
  net.layer(1) *= 1.01;
  EXPECT_FALSE(is_global_min(net, p.target, 1e-8).is_global_min);
}

TEST(Network, LossSectionExamples) {
  const auto mom = scalar_moments(2.0, 1.0);
  const LinearNetwork a({Matrix::Constant(1, 1, std::sqrt(2.0)), Matrix::Constant(1, 1, std::sqrt(2.0))});
  const LinearNetwork b({Matrix::Constant(1, 1, 4.0), Matrix::Constant(1, 1, 0.5)});
  const auto same = loss_section(a, a, mom, 11);
  for (const auto& s : same) EXPECT_NEAR(s.loss, loss(a, mom), 1e-15);
  const auto sec = loss_section(a, b, mom, 7, 0.0, 1.0);
  EXPECT_LT(sec.front().loss, 1e-28);
  EXPECT_LT(sec.back().loss, 1e-28);
  // m = 2: equal second differences at both endpoints
  const double h = 1e-3;
  const auto s = loss_section(a, b, mom, 3, -h, h);
  const auto e = loss_section(a, b, mom, 3, 1.0 - h, 1.0 + h);
  const double d0 = (s[0].loss - 2 * s[1].loss + s[2].loss) / (h * h);
  const double d1 = (e[0].loss - 2 * e[1].loss + e[2].loss) / (h * h);
  EXPECT_NEAR(d0, d1, 1e-8 * std::max(1.0, std::abs(d0)));
  EXPECT_THROW(loss_section(a, LinearNetwork({Matrix::Ones(1, 1)}), mom, 5), ShapeError);
}
