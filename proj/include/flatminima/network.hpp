#pragma once

#include "flatminima/common.hpp"
#include "flatminima/moments.hpp"

#include <utility>

namespace flatminima {

/// f(x) = W_m ... W_1 x. Layer k (1-based) has shape d_k x d_{k-1}.
class LinearNetwork {
 public:
  LinearNetwork() = default;

  explicit LinearNetwork(std::vector<Matrix> weights) : weights_(std::move(weights)) {
    if (weights_.empty()) throw ArgumentError("network needs at least one layer");
    dims_.push_back(static_cast<int>(weights_.front().cols()));
    for (std::size_t k = 0; k < weights_.size(); ++k) {
      if (weights_[k].cols() != dims_.back())
        throw ShapeError("layer " + std::to_string(k + 1) + " is not chain-compatible");
      dims_.push_back(static_cast<int>(weights_[k].rows()));
    }
    const int io = std::min(dims_.front(), dims_.back());
    if (*std::min_element(dims_.begin(), dims_.end()) < io)
      throw CapacityError("capacity condition violated: some width below min(d_x, d_y)");
  }

  int depth() const { return static_cast<int>(weights_.size()); }
  const std::vector<int>& dims() const { return dims_; }
  int dx() const { return dims_.front(); }
  int dy() const { return dims_.back(); }

  /// 1-based layer access.
  const Matrix& layer(int k) const { return weights_.at(static_cast<std::size_t>(k - 1)); }
  Matrix& layer(int k) { return weights_.at(static_cast<std::size_t>(k - 1)); }
  const std::vector<Matrix>& weights() const { return weights_; }

  Index n_params() const {
    Index n = 0;
    for (const auto& w : weights_) n += w.size();
    return n;
  }

  /// Concatenated column-major vectorizations of W_1..W_m.
  Vector flatten() const {
    Vector out(n_params());
    Index off = 0;
    for (const auto& w : weights_) {
      out.segment(off, w.size()) = linalg::vec(w);
      off += w.size();
    }
    return out;
  }

  static LinearNetwork from_flat(const std::vector<int>& dims, const Vector& params) {
    std::vector<Matrix> ws;
    Index off = 0;
    for (std::size_t k = 1; k < dims.size(); ++k) {
      const Index r = dims[k], c = dims[k - 1];
      if (off + r * c > params.size()) throw ShapeError("parameter vector too short");
      ws.push_back(linalg::unvec(params.segment(off, r * c), r, c));
      off += r * c;
    }
    if (off != params.size()) throw ShapeError("parameter vector too long");
    return LinearNetwork(std::move(ws));
  }

 private:
  std::vector<Matrix> weights_;
  std::vector<int> dims_;
};

/// W_to ... W_from (1-based, inclusive). from = to + 1 is the empty product
/// and yields the identity of size d_to.
inline Matrix end_to_end(const LinearNetwork& net, int from, int to) {
  const int m = net.depth();
  if (from < 1 || from > m + 1 || to < 0 || to > m || from > to + 1)
    throw ArgumentError("end_to_end: range [" + std::to_string(from) + ", " + std::to_string(to) +
                        "] out of bounds for depth " + std::to_string(m));
  if (from > to) {
    const int d = net.dims()[static_cast<std::size_t>(to)];
    return Matrix::Identity(d, d);
  }
  Matrix p = net.layer(from);
  for (int k = from + 1; k <= to; ++k) p = net.layer(k) * p;
  return p;
}

inline Matrix end_to_end(const LinearNetwork& net) { return end_to_end(net, 1, net.depth()); }

inline void check_compatible(const LinearNetwork& net, const DataMoments& moments) {
  if (net.dx() != moments.dx() || net.dy() != moments.dy())
    throw ShapeError("network and moments dimensions differ");
}

/// Empirical quadratic loss E||y - P x||^2, evaluated from moments as
/// tr((P - T) Sx (P - T)^T) + floor, which equals
/// tr(Sy - 2 P Syx^T + P Sx P^T) without its cancellation near Omega.
inline double loss(const LinearNetwork& net, const DataMoments& moments) {
  check_compatible(net, moments);
  const Matrix diff = end_to_end(net) - moments.t;
  const double quad = (diff * moments.sigma_x * diff.transpose()).trace();
  return std::max(0.0, quad + moments.loss_floor);
}

/// dl/dW_k = 2 (prod_{i>k} W_i)^T (P Sx - Syx) (prod_{j<k} W_j)^T.
inline std::vector<Matrix> gradient(const LinearNetwork& net, const DataMoments& moments) {
  check_compatible(net, moments);
  const int m = net.depth();
  const Matrix residual = (end_to_end(net) - moments.t) * moments.sigma_x;
  // prefix[k] = W_k ... W_1 (prefix[0] = I); suffix products built right to left.
  std::vector<Matrix> prefix(static_cast<std::size_t>(m + 1));
  prefix[0] = Matrix::Identity(net.dx(), net.dx());
  for (int k = 1; k <= m; ++k) prefix[k] = net.layer(k) * prefix[k - 1];
  std::vector<Matrix> grads(static_cast<std::size_t>(m));
  Matrix suffix = Matrix::Identity(net.dy(), net.dy());  // prod_{i>k} W_i
  for (int k = m; k >= 1; --k) {
    grads[k - 1] = 2.0 * suffix.transpose() * residual * prefix[k - 1].transpose();
    suffix = suffix * net.layer(k);
  }
  return grads;
}

inline Vector flatten(const std::vector<Matrix>& mats) {
  Index n = 0;
  for (const auto& g : mats) n += g.size();
  Vector out(n);
  Index off = 0;
  for (const auto& g : mats) {
    out.segment(off, g.size()) = linalg::vec(g);
    off += g.size();
  }
  return out;
}

struct GlobalMinCheck {
  bool is_global_min = false;
  double residual = 0.0;  // ||prod W - T||_F
};

inline GlobalMinCheck is_global_min(const LinearNetwork& net, const TargetMap& target, double tol) {
  if (!(tol > 0.0)) throw ArgumentError("tolerance must be positive");
  if (net.dx() != target.dx() || net.dy() != target.dy()) throw ShapeError("network and target dimensions differ");
  const double r = (end_to_end(net) - target.t).norm();
  return {r <= tol * std::max(1.0, target.t.norm()), r};
}

struct SectionPoint {
  double alpha;
  double loss;
};

/// Loss along (1 - alpha) w_a + alpha w_b for alpha evenly spaced in [lo, hi].
inline std::vector<SectionPoint> loss_section(const LinearNetwork& a, const LinearNetwork& b,
                                              const DataMoments& moments, int n_points,
                                              double alpha_lo = -0.25, double alpha_hi = 1.25) {
  if (a.dims() != b.dims()) throw ShapeError("loss_section: networks have different dims");
  if (n_points < 2) throw ArgumentError("loss_section needs at least 2 points");
  const Vector wa = a.flatten();
  const Vector wb = b.flatten();
  std::vector<SectionPoint> out;
  out.reserve(static_cast<std::size_t>(n_points));
  for (int i = 0; i < n_points; ++i) {
    const double alpha = alpha_lo + (alpha_hi - alpha_lo) * i / (n_points - 1);
    const Vector w = (1.0 - alpha) * wa + alpha * wb;
    out.push_back({alpha, loss(LinearNetwork::from_flat(a.dims(), w), moments)});
  }
  return out;
}

}  // namespace flatminima
