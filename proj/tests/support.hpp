#pragma once

#include "flatminima/flatminima.hpp"

#include <gtest/gtest.h>

namespace fm_test {

using namespace flatminima;

inline LinearNetwork random_net(const std::vector<int>& dims, CounterRng& rng, double scale = 1.0) {
  std::vector<Matrix> ws;
  for (std::size_t k = 1; k < dims.size(); ++k) ws.push_back(scale * rng.gaussian(dims[k], dims[k - 1]));
  return LinearNetwork(std::move(ws));
}

inline DataMoments random_moments(int dx, int dy, CounterRng& rng, int n = 50) {
  const Matrix x = rng.gaussian(n, dx);
  const Matrix y = x * rng.gaussian(dx, dy) + 0.3 * rng.gaussian(n, dy);
  return compute_moments(x, y);
}

inline double fd_step(double w) { return 1e-5 * (1.0 + std::abs(w)); }

/// Central differences of the loss, one parameter at a time.
inline Vector fd_gradient(const LinearNetwork& net, const DataMoments& mom) {
  const Vector w = net.flatten();
  Vector g(w.size());
  for (Index i = 0; i < w.size(); ++i) {
    const double h = fd_step(w(i));
    Vector a = w, b = w;
    a(i) += h;
    b(i) -= h;
    g(i) = (loss(LinearNetwork::from_flat(net.dims(), a), mom) - loss(LinearNetwork::from_flat(net.dims(), b), mom)) /
           (2.0 * h);
  }
  return g;
}

/// Four-point central second differences of the loss.
inline Matrix fd_hessian(const LinearNetwork& net, const DataMoments& mom) {
  const Vector w = net.flatten();
  const Index n = w.size();
  auto f = [&](const Vector& p) { return loss(LinearNetwork::from_flat(net.dims(), p), mom); };
  Matrix h(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = i; j < n; ++j) {
      const double hi = fd_step(w(i)), hj = fd_step(w(j));
      Vector pp = w, pm = w, mp = w, mm = w;
      pp(i) += hi; pp(j) += hj;
      pm(i) += hi; pm(j) -= hj;
      mp(i) -= hi; mp(j) += hj;
      mm(i) -= hi; mm(j) -= hj;
      h(i, j) = h(j, i) = (f(pp) - f(pm) - f(mp) + f(mm)) / (4.0 * hi * hj);
    }
  }
  return h;
}

inline double max_abs(const Matrix& m) { return m.cwiseAbs().maxCoeff(); }

/// A random target together with a dimension chain that satisfies capacity.
struct Problem {
  WhiteProblem white;
  std::vector<int> dims;
};

inline Problem random_problem(CounterRng& rng, int max_d, int m, bool square = false) {
  const int dx = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(max_d));
  const int dy = square ? dx : 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(max_d));
  std::vector<int> dims(static_cast<std::size_t>(m + 1));
  dims.front() = dx;
  dims.back() = dy;
  for (int k = 1; k < m; ++k)
    dims[k] = square ? dx : std::min(dx, dy) + static_cast<int>(rng() % static_cast<std::uint64_t>(max_d));
  return {moments_from_target(rng.gaussian(dy, dx)), dims};
}

}  // namespace fm_test
