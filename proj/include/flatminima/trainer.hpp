#pragma once

#include "flatminima/common.hpp"
#include "flatminima/hessian.hpp"
#include "flatminima/moments.hpp"
#include "flatminima/network.hpp"
#include "flatminima/random.hpp"

#include <optional>
#include <string_view>

namespace flatminima {

enum class TrainMode { GradientDescent, GradientFlow };

inline std::string_view to_string(TrainMode m) { return m == TrainMode::GradientDescent ? "gd" : "gradient-flow"; }

inline TrainMode train_mode_from_string(std::string_view s) {
  if (s == "gd") return TrainMode::GradientDescent;
  if (s == "gradient-flow") return TrainMode::GradientFlow;
  throw ArgumentError("unknown train mode: " + std::string(s));
}

inline constexpr double kGradientFlowMaxStep = 1e-3;
inline constexpr double kDivergenceLoss = 1e12;

struct TrainConfig {
  double eta = 1e-2;
  int max_iters = 100000;
  double loss_tol = 1e-12;
  double grad_tol = 1e-10;
  TrainMode mode = TrainMode::GradientDescent;
  int record_every = 1;
  std::uint64_t seed = 0;
  bool record_path = false;  // keep flattened parameters at every record

  void validate() const {
    if (!(eta > 0.0)) throw ArgumentError("train.eta must be positive");
    if (mode == TrainMode::GradientFlow && eta > kGradientFlowMaxStep)
      throw ArgumentError("gradient-flow mode needs eta <= 1e-3");
    if (max_iters < 0) throw ArgumentError("train.max_iters must be >= 0");
    if (!(loss_tol >= 0.0) || !(grad_tol >= 0.0)) throw ArgumentError("train tolerances must be >= 0");
    if (record_every < 1) throw ArgumentError("train.record_every must be >= 1");
  }
};

struct TrainTrace {
  std::vector<int> iterations;  // iteration index of each record
  std::vector<double> loss_history;
  std::vector<double> balance_residuals;
  std::vector<Vector> path;  // flattened parameters, if requested
  LinearNetwork final_net;
  bool converged = false;
  bool diverged = false;
  int iterations_run = 0;
  double final_loss = 0.0;
  double final_grad_norm = 0.0;
  int monotonicity_violations = 0;  // loss increases between consecutive records
  std::optional<double> final_lambda_max;
};

/// max_k ||W_k W_k^T - W_{k+1}^T W_{k+1}||_F; zero for balanced networks.
inline double balance_residual(const LinearNetwork& net) {
  double r = 0.0;
  for (int k = 1; k < net.depth(); ++k) {
    const Matrix& a = net.layer(k);
    const Matrix& b = net.layer(k + 1);
    r = std::max(r, (a * a.transpose() - b.transpose() * b).norm());
  }
  return r;
}

inline LinearNetwork identity_init(const std::vector<int>& dims) {
  if (dims.size() < 2) throw ArgumentError("dims must list at least two sizes");
  for (int d : dims)
    if (d != dims.front()) throw ShapeError("identity_init needs all dims equal");
  const int d = dims.front();
  return LinearNetwork(std::vector<Matrix>(dims.size() - 1, Matrix::Identity(d, d)));
}

/// Largest step for which identity-initialized GD provably converges to a
/// widest minimum: (1/m) min{1, sigma_max^{-2(1 - 1/m)}}.
inline double max_step_size(double sigma_max, int m) {
  if (m < 1) throw ArgumentError("depth must be >= 1");
  const double scale = std::pow(sigma_max, -2.0 * (1.0 - 1.0 / m));
  return std::min(1.0, scale) / m;
}

inline double max_step_size(const TargetMap& target, int m) { return max_step_size(target.sigma_max, m); }

inline constexpr double kFinalMinimumTolerance = 1e-6;

/// Full-batch GD, W <- W - eta grad. Gradient-flow mode is the same update
/// with a capped step (explicit Euler).
inline TrainTrace train(const LinearNetwork& start, const DataMoments& moments, const TrainConfig& cfg) {
  cfg.validate();
  check_compatible(start, moments);
  TrainTrace tr;
  LinearNetwork net = start;
  double prev_recorded = std::numeric_limits<double>::infinity();

  auto record = [&](int it, double l) {
    tr.iterations.push_back(it);
    tr.loss_history.push_back(l);
    tr.balance_residuals.push_back(balance_residual(net));
    if (cfg.record_path) tr.path.push_back(net.flatten());
    if (l > prev_recorded) ++tr.monotonicity_violations;
    prev_recorded = l;
  };

  int it = 0;
  for (;; ++it) {
    const double l = loss(net, moments);
    if (!std::isfinite(l)) throw NumericalFailure("loss became non-finite at iteration " + std::to_string(it));
    const auto grads = gradient(net, moments);
    double gn2 = 0.0;
    for (const auto& g : grads) gn2 += g.squaredNorm();
    const double gn = std::sqrt(gn2);
    if (!std::isfinite(gn)) throw NumericalFailure("gradient became non-finite at iteration " + std::to_string(it));

    const bool done = (l <= cfg.loss_tol + moments.loss_floor && gn <= cfg.grad_tol) || gn == 0.0;
    if (it % cfg.record_every == 0 || done || it == cfg.max_iters || l > kDivergenceLoss) record(it, l);
    tr.final_loss = l;
    tr.final_grad_norm = gn;
    if (done) {
      tr.converged = true;
      break;
    }
    if (l > kDivergenceLoss) {
      tr.diverged = true;
      break;
    }
    if (it == cfg.max_iters) break;
    for (int k = 1; k <= net.depth(); ++k) net.layer(k) -= cfg.eta * grads[k - 1];
  }
  tr.iterations_run = it;

  if (!tr.diverged) {
    const TargetMap target = make_target(moments);
    if (is_global_min(net, target, kFinalMinimumTolerance).is_global_min) {
      tr.final_lambda_max = lambda_max(phi_blocks(net, moments), EigenMethod::DenseReduced, target).lambda_max;
    }
  }
  tr.final_net = std::move(net);
  return tr;
}

/// Starts GD from a (sharp) minimum plus a seeded uniform perturbation in
/// [-perturbation, perturbation] on every parameter.
inline TrainTrace escape_experiment(const LinearNetwork& sharp_net, const DataMoments& moments, double eta,
                                    double perturbation, int iters, std::uint64_t seed = 0, bool record_path = true) {
  if (!(perturbation >= 0.0)) throw ArgumentError("perturbation must be >= 0");
  const TargetMap target = make_target(moments);
  if (!is_global_min(sharp_net, target, 1e-8).is_global_min)
    throw PreconditionError("escape_experiment: start is not a global minimum");
  CounterRng rng(seed);
  Vector w = sharp_net.flatten();
  for (Index i = 0; i < w.size(); ++i) w(i) += rng.uniform(-perturbation, perturbation);
  TrainConfig cfg;
  cfg.eta = eta;
  cfg.max_iters = iters;
  cfg.seed = seed;
  cfg.record_path = record_path;
  return train(LinearNetwork::from_flat(sharp_net.dims(), w), moments, cfg);
}

}  // namespace flatminima
