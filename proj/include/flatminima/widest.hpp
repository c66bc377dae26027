#pragma once

#include "flatminima/common.hpp"
#include "flatminima/hessian.hpp"
#include "flatminima/moments.hpp"
#include "flatminima/network.hpp"
#include "flatminima/random.hpp"

#include <string_view>

namespace flatminima {

inline void check_dims_for_target(const TargetMap& target, const std::vector<int>& dims) {
  if (dims.size() < 2) throw ArgumentError("dims must list at least d_0 and d_1");
  if (dims.front() != target.dx() || dims.back() != target.dy())
    throw ShapeError("dims endpoints must equal (d_x, d_y) of the target");
  const int io = static_cast<int>(std::min(target.dx(), target.dy()));
  for (int d : dims)
    if (d < io) throw CapacityError("capacity condition violated: width " + std::to_string(d) + " < " + std::to_string(io));
}

/// Layers built from the m-th roots of T's singular values:
/// W_m = U S^{1/m}, W_j = S^{1/m} (interior), W_1 = S^{1/m} V^T, each padded
/// as a rectangular diagonal. Every layer shares the same nonzero spectrum.
inline LinearNetwork canonical_widest(const TargetMap& target, const std::vector<int>& dims) {
  check_dims_for_target(target, dims);
  const int m = static_cast<int>(dims.size()) - 1;
  const Index d = target.singular_values.size();
  if (m == 1) {
    return LinearNetwork({target.left_vectors * target.singular_values.asDiagonal() * target.right_vectors.transpose()});
  }
  const Vector root = target.singular_values.array().pow(1.0 / m).matrix();
  std::vector<Matrix> ws(static_cast<std::size_t>(m));
  ws[0] = linalg::rect_diag(dims[1], d, root) * target.right_vectors.transpose();
  for (int k = 2; k < m; ++k) ws[k - 1] = linalg::rect_diag(dims[k], dims[k - 1], root);
  ws[m - 1] = target.left_vectors * linalg::rect_diag(d, dims[m - 1], root);
  return LinearNetwork(std::move(ws));
}

/// W_k -> O_k W_k O_{k-1}^T with O_0 = O_m = I. Preserves the end-to-end map
/// and every layer's spectrum.
inline LinearNetwork conjugate_layers(const LinearNetwork& net, const std::vector<Matrix>& interior_orthogonals) {
  const int m = net.depth();
  if (static_cast<int>(interior_orthogonals.size()) != m - 1) throw ArgumentError("need m - 1 orthogonal matrices");
  std::vector<Matrix> ws;
  for (int k = 1; k <= m; ++k) {
    Matrix w = net.layer(k);
    if (k < m) w = interior_orthogonals[k - 1] * w;
    if (k > 1) w = w * interior_orthogonals[k - 2].transpose();
    ws.push_back(std::move(w));
  }
  return LinearNetwork(std::move(ws));
}

/// Random member of the Theorem-4 family: canonical layers conjugated by
/// Haar-random orthogonal matrices.
inline LinearNetwork random_widest(const TargetMap& target, const std::vector<int>& dims, std::uint64_t seed) {
  const LinearNetwork canon = canonical_widest(target, dims);
  CounterRng rng(seed);
  std::vector<Matrix> os;
  for (std::size_t k = 1; k + 1 < dims.size(); ++k) os.push_back(random_orthogonal(dims[k], rng));
  return conjugate_layers(canon, os);
}

enum class WidestVerdict { CertifiedWidest, WidestByGap, NotWidest };

inline std::string_view to_string(WidestVerdict v) {
  switch (v) {
    case WidestVerdict::CertifiedWidest: return "certified-widest";
    case WidestVerdict::WidestByGap: return "widest-by-gap";
    case WidestVerdict::NotWidest: return "not-widest";
  }
  return "unknown";
}

struct WidestDiagnostics {
  WidestVerdict verdict = WidestVerdict::NotWidest;
  std::vector<double> layer_sigma_max;
  double layer_target = 0.0;  // sigma_max(T)^{1/m}
  double lambda_max = 0.0;
  double widest_value = 0.0;
  double gap_ratio = 0.0;
};

inline constexpr double kGlobalMinTolerance = 1e-8;

/// Three-way width verdict: the per-layer spectral test is sufficient but not
/// necessary, so a lambda gap test backs it up.
inline WidestDiagnostics is_widest(const LinearNetwork& net, const DataMoments& moments, const TargetMap& target,
                                   double tol) {
  if (!is_global_min(net, target, kGlobalMinTolerance).is_global_min)
    throw PreconditionError("is_widest: network is not a global minimum");
  const int m = net.depth();
  WidestDiagnostics d;
  d.layer_target = std::pow(target.sigma_max, 1.0 / m);
  bool certified = true;
  for (int k = 1; k <= m; ++k) {
    const double s = linalg::spectral_norm(net.layer(k));
    d.layer_sigma_max.push_back(s);
    if (std::abs(s - d.layer_target) > tol * std::max(d.layer_target, 1e-300)) certified = false;
  }
  const auto report = lambda_max(phi_blocks(net, moments), EigenMethod::DenseReduced, target);
  d.lambda_max = report.lambda_max;
  d.widest_value = report.widest_value;
  d.gap_ratio = report.gap_ratio;
  if (certified) {
    d.verdict = WidestVerdict::CertifiedWidest;
  } else if (d.lambda_max <= (1.0 + tol) * d.widest_value) {
    d.verdict = WidestVerdict::WidestByGap;
  } else {
    d.verdict = WidestVerdict::NotWidest;
  }
  return d;
}

inline WidestDiagnostics is_widest(const LinearNetwork& net, const TargetMap& target, double tol) {
  return is_widest(net, moments_from_target(target.t).moments, target, tol);
}

/// Per-depth gains of a network, k = 0..m.
struct GainProfile {
  int depth = 0;
  double sigma_max = 0.0;
  std::vector<Vector> per_depth_singulars;   // singular values of W_k ... W_1
  std::vector<Vector> suffix_singulars;      // singular values of W_m ... W_{k+1}
  std::vector<double> v_gain;                // ||W_k ... W_1 v||
  std::vector<double> u_gain;                // ||(W_m ... W_{k+1})^T u||
  std::vector<double> bound;                 // sqrt(m) sigma_max^{k/m}
  std::vector<double> v_singular_residual;   // ||P^T P v - sigma^{2k/m} v||
  std::vector<double> u_singular_residual;   // ||Q Q^T u - sigma^{2(1-k/m)} u||
};

inline GainProfile gain_profile(const LinearNetwork& net, const TargetMap& target) {
  const int m = net.depth();
  const double s = target.sigma_max;
  GainProfile g;
  g.depth = m;
  g.sigma_max = s;
  for (int k = 0; k <= m; ++k) {
    const Matrix p = end_to_end(net, 1, k);
    const Matrix q = end_to_end(net, k + 1, m);
    g.per_depth_singulars.push_back(linalg::singular_values(p));
    g.suffix_singulars.push_back(linalg::singular_values(q));
    const Vector pv = p * target.v;
    const Vector qu = q.transpose() * target.u;
    g.v_gain.push_back(pv.norm());
    g.u_gain.push_back(qu.norm());
    g.bound.push_back(std::sqrt(static_cast<double>(m)) * std::pow(s, static_cast<double>(k) / m));
    g.v_singular_residual.push_back(
        (p.transpose() * pv - std::pow(s, 2.0 * k / m) * target.v).norm());
    g.u_singular_residual.push_back(
        (q * qu - std::pow(s, 2.0 * (1.0 - static_cast<double>(k) / m)) * target.u).norm());
  }
  return g;
}

struct DepthGainCheck {
  int k = 0;
  bool v_gain_ok = false;      // (i)   ||P v|| = sigma^{k/m}
  bool bound_ok = false;       // (ii)  sigma_max(P) <= sqrt(m) sigma^{k/m}
  bool u_gain_ok = false;      // (iii) ||Q^T u|| = sigma^{1-k/m}
  bool u_bound_ok = false;     // (iv)  sigma_max(Q) <= sqrt(m) sigma^{1-k/m}
  bool v_singular_ok = false;  // v is a right singular vector of P
  bool u_singular_ok = false;  // u is a left singular vector of Q
  double v_gain_rel_error = 0.0;
  double bound_ratio = 0.0;  // sigma_max(P) / (sqrt(m) sigma^{k/m})

  bool ok() const { return v_gain_ok && bound_ok && u_gain_ok && u_bound_ok && v_singular_ok && u_singular_ok; }
};

struct GainCheck {
  std::vector<DepthGainCheck> depths;
  bool all_passed() const {
    return std::all_of(depths.begin(), depths.end(), [](const auto& d) { return d.ok(); });
  }
  /// Checks (i) and (ii) only: the forward gain law and the per-depth bound.
  bool forward_passed() const {
    return std::all_of(depths.begin(), depths.end(), [](const auto& d) { return d.v_gain_ok && d.bound_ok; });
  }
};

inline GainCheck verify_gains(const GainProfile& profile, int m, double sigma_max, double tol) {
  if (static_cast<int>(profile.v_gain.size()) != m + 1) throw ArgumentError("profile depth mismatch");
  GainCheck out;
  const double root_m = std::sqrt(static_cast<double>(m));
  for (int k = 0; k <= m; ++k) {
    const double fwd = std::pow(sigma_max, static_cast<double>(k) / m);
    const double bwd = std::pow(sigma_max, 1.0 - static_cast<double>(k) / m);
    const auto top = [](const Vector& s) { return s.size() ? s(0) : 0.0; };
    DepthGainCheck c;
    c.k = k;
    c.v_gain_rel_error = std::abs(profile.v_gain[k] - fwd) / fwd;
    c.v_gain_ok = std::abs(profile.v_gain[k] - fwd) <= tol * fwd;
    c.bound_ratio = top(profile.per_depth_singulars[k]) / (root_m * fwd);
    c.bound_ok = top(profile.per_depth_singulars[k]) <= root_m * fwd * (1.0 + tol);
    c.u_gain_ok = std::abs(profile.u_gain[k] - bwd) <= tol * bwd;
    c.u_bound_ok = top(profile.suffix_singulars[k]) <= root_m * bwd * (1.0 + tol);
    c.v_singular_ok = profile.v_singular_residual[k] <= tol * fwd * fwd;
    c.u_singular_ok = profile.u_singular_residual[k] <= tol * bwd * bwd;
    out.depths.push_back(c);
  }
  return out;
}

/// Signal-path vectors r_k = W_{k-1}..W_1 v and q_k = (W_m..W_{k+1})^T u with
/// the residuals of the coupling and balance laws.
struct CouplingReport {
  std::vector<Vector> r_vectors;
  std::vector<Vector> q_vectors;
  std::vector<double> singular_residuals;  // ||W_k rbar_k - sigma^{1/m} qbar_k||, length m
  std::vector<double> coupling_residuals;  // ||rbar_{k+1} - qbar_k||, length m - 1
  std::vector<double> balance_residuals;   // | ||q_k|| ||r_k|| - sigma^{1-1/m} |, length m

  double max_singular() const { return max_of(singular_residuals); }
  double max_coupling() const { return max_of(coupling_residuals); }
  double max_balance() const { return max_of(balance_residuals); }

 private:
  static double max_of(const std::vector<double>& v) {
    return v.empty() ? 0.0 : *std::max_element(v.begin(), v.end());
  }
};

inline CouplingReport coupling_report(const LinearNetwork& net, const TargetMap& target) {
  if (target.degenerate()) throw DegenerateTargetError("coupling_report: sigma_max(T) = 0");
  const int m = net.depth();
  const double s = target.sigma_max;
  const double layer_gain = std::pow(s, 1.0 / m);
  CouplingReport c;
  for (int k = 1; k <= m; ++k) {
    c.r_vectors.push_back(end_to_end(net, 1, k - 1) * target.v);
    c.q_vectors.push_back(end_to_end(net, k + 1, m).transpose() * target.u);
  }
  for (int k = 1; k <= m; ++k) {
    const Vector& r = c.r_vectors[k - 1];
    const Vector& q = c.q_vectors[k - 1];
    const Vector rbar = r / r.norm();
    const Vector qbar = q / q.norm();
    c.singular_residuals.push_back((net.layer(k) * rbar - layer_gain * qbar).norm());
    c.balance_residuals.push_back(std::abs(q.norm() * r.norm() - std::pow(s, 1.0 - 1.0 / m)));
    if (k < m) {
      const Vector& rn = c.r_vectors[k];
      c.coupling_residuals.push_back((rn / rn.norm() - qbar).norm());
    }
  }
  return c;
}

}  // namespace flatminima
