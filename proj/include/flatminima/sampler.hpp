#pragma once

#include "flatminima/common.hpp"
#include "flatminima/hessian.hpp"
#include "flatminima/moments.hpp"
#include "flatminima/network.hpp"
#include "flatminima/random.hpp"
#include "flatminima/widest.hpp"

namespace flatminima {

inline constexpr double kMaxMixingCondition = 1e6;

/// Arbitrary global minimum from explicit mixing matrices A_1..A_{m-1}
/// (A_i is d_i x d_i): W_m = C_m A_{m-1}, W_i = A_i^{-1} C_i A_{i-1},
/// W_1 = A_1^{-1} C_1, where C is the canonical widest net. The A_i cancel
/// telescopically so the end-to-end map is unchanged.
inline LinearNetwork mix_minimum(const TargetMap& target, const std::vector<int>& dims,
                                 const std::vector<Matrix>& mixers) {
  const LinearNetwork canon = canonical_widest(target, dims);
  const int m = canon.depth();
  if (static_cast<int>(mixers.size()) != m - 1) throw ArgumentError("need m - 1 mixing matrices");
  std::vector<Matrix> ws;
  for (int k = 1; k <= m; ++k) {
    Matrix w = canon.layer(k);
    if (k < m) w = mixers[k - 1].partialPivLu().solve(w);
    if (k > 1) w = w * mixers[k - 2];
    ws.push_back(std::move(w));
  }
  return LinearNetwork(std::move(ws));
}

inline double condition_number(const Matrix& a) {
  const Vector s = linalg::singular_values(a);
  return s(s.size() - 1) > 0.0 ? s(0) / s(s.size() - 1) : std::numeric_limits<double>::infinity();
}

/// Random arbitrary minimum with standard-normal mixers, resampled while the
/// condition number exceeds 1e6.
inline LinearNetwork sample_arbitrary_minimum(const TargetMap& target, const std::vector<int>& dims,
                                              std::uint64_t seed) {
  check_dims_for_target(target, dims);
  CounterRng rng(seed);
  std::vector<Matrix> mixers;
  for (std::size_t k = 1; k + 1 < dims.size(); ++k) {
    Matrix a;
    do {
      a = rng.gaussian(dims[k], dims[k]);
    } while (condition_number(a) > kMaxMixingCondition);
    mixers.push_back(std::move(a));
  }
  return mix_minimum(target, dims, mixers);
}

/// Alternative start: every layer Gaussian except a random pivot j that
/// absorbs T. Requires all widths equal.
inline LinearNetwork pivot_start(const TargetMap& target, int m, std::uint64_t seed) {
  if (target.dx() != target.dy()) throw UnsupportedShapeError("pivot_start needs d_x = d_y");
  if (m < 1) throw ArgumentError("depth must be >= 1");
  const Index d = target.dx();
  CounterRng rng(seed);
  std::vector<Matrix> ws(static_cast<std::size_t>(m));
  const int pivot = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(m));
  for (int k = 1; k <= m; ++k) {
    if (k == pivot) continue;
    Matrix a;
    do {
      a = rng.gaussian(d, d);
    } while (condition_number(a) > kMaxMixingCondition);
    ws[k - 1] = std::move(a);
  }
  Matrix below = Matrix::Identity(d, d);
  for (int k = 1; k < pivot; ++k) below = ws[k - 1] * below;
  Matrix above = Matrix::Identity(d, d);
  for (int k = pivot + 1; k <= m; ++k) above = ws[k - 1] * above;
  const Matrix left = above.partialPivLu().solve(target.t);
  ws[pivot - 1] = below.transpose().partialPivLu().solve(left.transpose()).transpose();
  return LinearNetwork(std::move(ws));
}

/// Step schedule and stopping rule of the greedy walk over Omega.
struct WalkConfig {
  double eps0 = 1e-2;
  double shrink = 0.5;
  int patience = 25;       // consecutive rejections before shrinking
  double grow = 1.5;       // multiplier after an accepted step, capped at eps0
  double eps_floor = 1e-6; // eps below this restarts at eps0
  int max_iters = 200000;  // proposals
  double stop_ratio = 1.01;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(eps0 > 0.0)) throw ArgumentError("walk.eps0 must be positive");
    if (!(shrink > 0.0 && shrink < 1.0)) throw ArgumentError("walk.shrink must be in (0, 1)");
    if (patience < 1) throw ArgumentError("walk.patience must be >= 1");
    if (!(grow >= 1.0)) throw ArgumentError("walk.grow must be >= 1");
    if (!(eps_floor > 0.0 && eps_floor < eps0)) throw ArgumentError("walk.eps_floor must be in (0, eps0)");
    if (max_iters < 0) throw ArgumentError("walk.max_iters must be >= 0");
    if (!(stop_ratio >= 1.0)) throw ArgumentError("walk.stop_ratio must be >= 1");
  }
};

struct WalkTrace {
  std::vector<double> lambda_history;  // after each accepted step
  std::vector<double> eps_history;     // step size that produced it
  int accept_count = 0;
  int reject_count = 0;
  int proposals = 0;
  double initial_lambda = 0.0;
  double final_lambda = 0.0;
  double widest_value = 0.0;
  double max_product_drift = 0.0;  // relative, over accepted steps
  LinearNetwork final_net;
  bool converged = false;
  std::uint64_t seed = 0;
};

namespace detail {

inline constexpr Index kDenseWalkLimit = 64 * 64;

struct WalkEvaluator {
  const DataMoments& moments;
  const TargetMap& target;
  std::optional<Vector> warm;

  double operator()(const LinearNetwork& net) {
    const HessianFactor f = phi_blocks(net, moments);
    if (f.col_dim <= kDenseWalkLimit) return linalg::sym_top_eigen(reduced_hessian(f)).value;
    PowerOptions opts;
    opts.start = warm;
    auto eig = power_reduced(f, warm ? *warm : default_power_start(f, target), opts);
    warm = eig.vector;
    return eig.value;
  }
};

inline double product_drift(const LinearNetwork& net, const TargetMap& target) {
  return (end_to_end(net) - target.t).norm() / std::max(1.0, target.t.norm());
}

/// Pulls the product back onto T: scalar rescale of W_1 first, then a
/// least-squares correction of W_1 if that is not enough.
inline void reproject(LinearNetwork& net, const TargetMap& target) {
  const double pn = end_to_end(net).norm();
  if (pn > 0.0) net.layer(1) *= target.t.norm() / pn;
  if (product_drift(net, target) <= 1e-9) return;
  const Matrix upper = end_to_end(net, 2, net.depth());
  const Matrix miss = target.t - end_to_end(net);
  net.layer(1) += upper.completeOrthogonalDecomposition().solve(miss);
}

}  // namespace detail

/// Greedy random walk on Omega: propose
///   W_m <- W_m (I + eps A_{m-1}),
///   W_i <- (I + eps A_i)^{-1} W_i (I + eps A_{i-1}),
///   W_1 <- (I + eps A_1)^{-1} W_1,
/// and keep the proposal only if lambda_max decreases.
inline WalkTrace greedy_widest_walk(const LinearNetwork& start, const DataMoments& moments, const TargetMap& target,
                                    const WalkConfig& cfg) {
  cfg.validate();
  if (!is_global_min(start, target, kGlobalMinTolerance).is_global_min)
    throw PreconditionError("greedy_widest_walk: start is not a global minimum");
  const int m = start.depth();
  WalkTrace trace;
  trace.seed = cfg.seed;
  trace.widest_value = widest_sharpness(target, m);
  const double stop_at = cfg.stop_ratio * trace.widest_value;

  detail::WalkEvaluator eval{moments, target, std::nullopt};
  LinearNetwork net = start;
  double lambda = eval(net);
  trace.initial_lambda = lambda;
  CounterRng rng(cfg.seed);
  double eps = cfg.eps0;
  int streak = 0;

  while (lambda > stop_at && m > 1 && trace.proposals < cfg.max_iters) {
    ++trace.proposals;
    std::vector<Eigen::PartialPivLU<Matrix>> lus;
    std::vector<Matrix> steps;
    bool singular = false;
    for (int i = 1; i < m; ++i) {
      const Index d = start.dims()[static_cast<std::size_t>(i)];
      Matrix step = Matrix::Identity(d, d) + eps * rng.gaussian(d, d);
      Eigen::PartialPivLU<Matrix> lu(step);
      if (!(lu.rcond() > 1e-12)) singular = true;
      steps.push_back(std::move(step));
      lus.push_back(std::move(lu));
    }
    if (singular) continue;  // resample direction

    LinearNetwork cand = net;
    for (int k = 1; k <= m; ++k) {
      Matrix w = net.layer(k);
      if (k < m) w = lus[k - 1].solve(w);
      if (k > 1) w = w * steps[k - 2];
      cand.layer(k) = std::move(w);
    }
    if (detail::product_drift(cand, target) > 1e-9) detail::reproject(cand, target);

    const double cand_lambda = eval(cand);
    if (cand_lambda < lambda) {
      net = std::move(cand);
      lambda = cand_lambda;
      ++trace.accept_count;
      trace.lambda_history.push_back(lambda);
      trace.eps_history.push_back(eps);
      trace.max_product_drift = std::max(trace.max_product_drift, detail::product_drift(net, target));
      streak = 0;
      eps = std::min(cfg.eps0, eps * cfg.grow);
    } else {
      ++trace.reject_count;
      if (++streak >= cfg.patience) {
        streak = 0;
        eps *= cfg.shrink;
        if (eps < cfg.eps_floor) eps = cfg.eps0;
      }
    }
  }
  trace.final_lambda = lambda;
  trace.converged = lambda <= stop_at;
  trace.final_net = std::move(net);
  return trace;
}

inline WalkTrace greedy_widest_walk(const LinearNetwork& start, const TargetMap& target, const WalkConfig& cfg) {
  return greedy_widest_walk(start, moments_from_target(target.t).moments, target, cfg);
}

}  // namespace flatminima
