#pragma once

#include "flatminima/common.hpp"
#include "flatminima/moments.hpp"
#include "flatminima/network.hpp"

#include <bit>
#include <numeric>
#include <string_view>

namespace flatminima {

/// f(x) = (w_1 ... w_m) x on scalar data with tau = s_xy / s_x^2.
struct ScalarNetwork {
  std::vector<double> w;
  double tau = 0.0;
  double sigma_x2 = 1.0;

  int depth() const { return static_cast<int>(w.size()); }
  double product() const { return std::accumulate(w.begin(), w.end(), 1.0, std::multiplies<>()); }
  bool in_omega(double rel_tol = 1e-12) const {
    return std::abs(product() - tau) <= rel_tol * std::max(1.0, std::abs(tau));
  }
};

inline double scalar_loss(const ScalarNetwork& net) {
  const double r = net.product() - net.tau;
  return net.sigma_x2 * r * r;
}

inline LinearNetwork embed(const ScalarNetwork& net) {
  std::vector<Matrix> ws;
  for (double w : net.w) ws.push_back(Matrix::Constant(1, 1, w));
  return LinearNetwork(std::move(ws));
}

/// Moments of the scalar problem: s_x^2, s_xy = tau s_x^2, s_y chosen noiseless.
inline DataMoments scalar_moments(double tau, double sigma_x2) {
  auto m = make_moments(Matrix::Constant(1, 1, sigma_x2), Matrix::Constant(1, 1, tau * sigma_x2),
                        Matrix::Constant(1, 1, tau * tau * sigma_x2));
  m.t = Matrix::Constant(1, 1, tau);
  m.loss_floor = 0.0;
  return m;
}

namespace detail {
inline void check_scalar_minimum(const ScalarNetwork& net) {
  if (net.w.empty()) throw ArgumentError("scalar network needs at least one layer");
  if (!(net.sigma_x2 > 0.0)) throw ArgumentError("sigma_x^2 must be positive");
  for (double w : net.w)
    if (w == 0.0) throw SingularWeightError("zero layer weight: Hessian formula needs all w_j != 0");
  if (!net.in_omega()) throw PreconditionError("scalar network is not a global minimum");
}
}  // namespace detail

/// Rank-one Hessian 2 s_x^2 tau^2 z z^T with z_j = 1 / w_j.
inline Matrix scalar_hessian(const ScalarNetwork& net) {
  detail::check_scalar_minimum(net);
  Vector z(net.depth());
  for (int j = 0; j < net.depth(); ++j) z(j) = 1.0 / net.w[j];
  return 2.0 * net.sigma_x2 * net.tau * net.tau * z * z.transpose();
}

inline double scalar_lambda_max(const ScalarNetwork& net) {
  detail::check_scalar_minimum(net);
  double s = 0.0;
  for (double w : net.w) s += 1.0 / (w * w);
  return 2.0 * net.sigma_x2 * net.tau * net.tau * s;
}

struct ScalarWidest {
  double magnitude = 0.0;  // |tau|^{1/m}
  double sharpness = 0.0;  // 2 m s_x^2 |tau|^{2(1 - 1/m)}
  std::uint64_t count = 0; // 2^{m-1} sign patterns
  bool degenerate = false; // tau = 0
};

inline ScalarWidest scalar_widest(double tau, int m, double sigma_x2) {
  if (m < 1) throw ArgumentError("depth must be >= 1");
  if (!(sigma_x2 > 0.0)) throw ArgumentError("sigma_x^2 must be positive");
  ScalarWidest out;
  if (tau == 0.0) {
    out.degenerate = true;
    return out;
  }
  out.magnitude = std::pow(std::abs(tau), 1.0 / m);
  out.sharpness = 2.0 * m * sigma_x2 * std::pow(std::abs(tau), 2.0 * (1.0 - 1.0 / m));
  out.count = std::uint64_t{1} << (m - 1);
  return out;
}

/// All sign vectors s in {-1,+1}^m with prod s = sgn(tau).
inline std::vector<std::vector<int>> widest_sign_patterns(double tau, int m) {
  if (m < 1 || m > 30) throw ArgumentError("sign enumeration supports 1 <= m <= 30");
  if (tau == 0.0) return {};
  const int want_negative_parity = tau < 0.0 ? 1 : 0;
  std::vector<std::vector<int>> out;
  for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << m); ++mask) {
    if (static_cast<int>(std::popcount(mask) % 2) != want_negative_parity) continue;
    std::vector<int> s(static_cast<std::size_t>(m));
    for (int j = 0; j < m; ++j) s[j] = (mask >> j) & 1U ? -1 : 1;
    out.push_back(std::move(s));
  }
  return out;
}

enum class InterpVerdict { W1AppearsSharper, W2AppearsSharper, Equal };

inline std::string_view to_string(InterpVerdict v) {
  switch (v) {
    case InterpVerdict::W1AppearsSharper: return "w1-appears-sharper";
    case InterpVerdict::W2AppearsSharper: return "w2-appears-sharper";
    case InterpVerdict::Equal: return "equal";
  }
  return "unknown";
}

struct InterpComparison {
  InterpVerdict verdict = InterpVerdict::Equal;
  double sum_2_over_1 = 0.0;  // sum w2_i / w1_i
  double sum_1_over_2 = 0.0;  // sum w1_i / w2_i
};

/// Which of two positive-orthant minima looks sharper on the segment joining
/// them: w1 does iff sum w2/w1 > sum w1/w2.
inline InterpComparison interp_compare(const ScalarNetwork& w1, const ScalarNetwork& w2) {
  if (w1.depth() != w2.depth() || w1.depth() == 0) throw ArgumentError("interp_compare: depth mismatch");
  if (!(w1.tau > 0.0) || w1.tau != w2.tau) throw UnsupportedOrthantError("interp_compare needs a common tau > 0");
  for (int i = 0; i < w1.depth(); ++i)
    if (!(w1.w[i] > 0.0) || !(w2.w[i] > 0.0))
      throw UnsupportedOrthantError("interp_compare is defined on the positive orthant only");
  if (!w1.in_omega() || !w2.in_omega()) throw PreconditionError("interp_compare: both networks must be minima");
  InterpComparison c;
  for (int i = 0; i < w1.depth(); ++i) {
    c.sum_2_over_1 += w2.w[i] / w1.w[i];
    c.sum_1_over_2 += w1.w[i] / w2.w[i];
  }
  if (std::abs(c.sum_2_over_1 - c.sum_1_over_2) <= 1e-12 * std::max(1.0, c.sum_1_over_2)) {
    c.verdict = InterpVerdict::Equal;
  } else {
    c.verdict = c.sum_2_over_1 > c.sum_1_over_2 ? InterpVerdict::W1AppearsSharper : InterpVerdict::W2AppearsSharper;
  }
  return c;
}

/// Given the positive widest minimum w1 and a minimum w2 that looks sharper
/// than it, returns w3_i = w1_i^2 / w2_i, a minimum that looks wider than w1.
inline ScalarNetwork deceive_construct(const ScalarNetwork& w1, const ScalarNetwork& w2) {
  const auto cmp = interp_compare(w1, w2);
  const double mag = std::pow(w1.tau, 1.0 / w1.depth());
  for (double w : w1.w)
    if (std::abs(w - mag) > 1e-9 * mag) throw PreconditionError("deceive_construct: w1 must be the widest minimum");
  if (cmp.verdict == InterpVerdict::W1AppearsSharper)
    throw PreconditionError("deceive_construct: w2 must not appear wider than w1");
  ScalarNetwork w3 = w2;
  for (int i = 0; i < w1.depth(); ++i) w3.w[i] = w1.w[i] * w1.w[i] / w2.w[i];
  return w3;
}

}  // namespace flatminima
