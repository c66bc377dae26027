#pragma once

#include "flatminima/common.hpp"
#include "flatminima/hessian.hpp"
#include "flatminima/io.hpp"
#include "flatminima/moments.hpp"
#include "flatminima/network.hpp"
#include "flatminima/random.hpp"
#include "flatminima/sampler.hpp"
#include "flatminima/scalar.hpp"
#include "flatminima/trainer.hpp"
#include "flatminima/widest.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <thread>

namespace flatminima::experiment {

using io::Json;

inline constexpr const char* kBundleSchema = "flatminima-bundle/1";

/// Raised for anything wrong with a configuration file; maps to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

enum class Kind { Sharpness, GainsFigure, Walk, Train, ScalarInterp, Escape };

inline const std::map<std::string, Kind>& kind_names() {
  static const std::map<std::string, Kind> names{{"sharpness", Kind::Sharpness}, {"gains-figure", Kind::GainsFigure},
                                                 {"walk", Kind::Walk},           {"train", Kind::Train},
                                                 {"scalar-interp", Kind::ScalarInterp}, {"escape", Kind::Escape}};
  return names;
}

enum class StartKind { Canonical, Arbitrary, Pivot, Identity, WidestFamily };

enum class TargetSource { Matrix, File, Samples, Random };
enum class RandomTargetKind { Gaussian, PositiveDefinite, NearIdentity };

struct TargetSpec {
  TargetSource source = TargetSource::Random;
  Matrix matrix;
  std::string file;  // JSON document, or samples CSV for TargetSource::Samples
  int dx = 4;
  int dy = 4;
  RandomTargetKind random_kind = RandomTargetKind::Gaussian;
  double scale = 0.4;  // near-identity perturbation size
};

struct ScalarSpec {
  double tau = 2.0;
  double sigma_x2 = 1.0;
  int depth = 3;
  std::vector<double> w2;  // empty: sample
  int n_points = 101;
  double alpha_lo = -0.25;
  double alpha_hi = 1.25;
};

struct GridSpec {
  double w1_lo = -1.0, w1_hi = 5.0;
  double w2_lo = -1.0, w2_hi = 5.0;
  int n = 61;
};

struct EscapeSpec {
  double tau = 2.0;
  double sigma_x2 = 1.0;
  std::vector<double> start{4.0, 0.5};
  double eta = 0.1;
  double perturbation = 1e-3;
  int iters = 20000;
  GridSpec grid;
};

struct ExperimentConfig {
  Kind kind = Kind::Sharpness;
  std::string experiment;
  TargetSpec target;
  std::vector<int> dims;
  StartKind start = StartKind::Canonical;
  int trials = 1;
  std::uint64_t base_seed = 0;
  std::string output_dir = "out";
  WalkConfig walk;
  TrainConfig train;
  double gains_tol = 0.05;
  double gains_walk_stop_ratio = 1.0002;
  double widest_tol = 1e-8;
  bool power_iteration = false;
  ScalarSpec scalar;
  EscapeSpec escape;
  Json raw;  // validated input, echoed into the bundle
};

namespace detail {

inline void check_keys(const Json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items())
    if (!allowed.count(key)) throw ConfigError(where + ": unknown field \"" + key + "\"");
}

template <class T>
void read(const Json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

inline StartKind start_from_string(const std::string& s) {
  if (s == "canonical") return StartKind::Canonical;
  if (s == "arbitrary") return StartKind::Arbitrary;
  if (s == "pivot") return StartKind::Pivot;
  if (s == "identity") return StartKind::Identity;
  if (s == "widest-family") return StartKind::WidestFamily;
  throw ConfigError("start: unknown value \"" + s + "\"");
}

inline void parse_walk(const Json& j, WalkConfig& w) {
  check_keys(j, {"eps0", "shrink", "patience", "grow", "eps_floor", "max_iters", "stop_ratio"}, "walk");
  read(j, "eps0", w.eps0, "walk");
  read(j, "shrink", w.shrink, "walk");
  read(j, "patience", w.patience, "walk");
  read(j, "grow", w.grow, "walk");
  read(j, "eps_floor", w.eps_floor, "walk");
  read(j, "max_iters", w.max_iters, "walk");
  read(j, "stop_ratio", w.stop_ratio, "walk");
}

inline void parse_train(const Json& j, TrainConfig& t) {
  check_keys(j, {"eta", "max_iters", "loss_tol", "grad_tol", "mode", "record_every", "record_path"}, "train");
  read(j, "eta", t.eta, "train");
  read(j, "max_iters", t.max_iters, "train");
  read(j, "loss_tol", t.loss_tol, "train");
  read(j, "grad_tol", t.grad_tol, "train");
  read(j, "record_every", t.record_every, "train");
  read(j, "record_path", t.record_path, "train");
  if (j.contains("mode")) {
    try {
      t.mode = train_mode_from_string(j.at("mode").get<std::string>());
    } catch (const Error& e) {
      throw ConfigError(std::string("train.mode: ") + e.what());
    }
  }
}

inline void parse_target(const Json& j, TargetSpec& t) {
  check_keys(j, {"matrix", "file", "samples", "random"}, "target");
  if (j.size() != 1) throw ConfigError("target: give exactly one of matrix, file, samples, random");
  if (j.contains("matrix")) {
    t.source = TargetSource::Matrix;
    try {
      t.matrix = io::matrix_from_json(j.at("matrix"));
    } catch (const Error& e) {
      throw ConfigError(std::string("target.matrix: ") + e.what());
    }
    t.dx = static_cast<int>(t.matrix.cols());
    t.dy = static_cast<int>(t.matrix.rows());
  } else if (j.contains("file")) {
    t.source = TargetSource::File;
    t.file = j.at("file").get<std::string>();
  } else if (j.contains("samples")) {
    t.source = TargetSource::Samples;
    const Json& r = j.at("samples");
    check_keys(r, {"path", "dx", "dy"}, "target.samples");
    if (!r.contains("path") || !r.contains("dx") || !r.contains("dy"))
      throw ConfigError("target.samples needs path, dx and dy");
    read(r, "path", t.file, "target.samples");
    read(r, "dx", t.dx, "target.samples");
    read(r, "dy", t.dy, "target.samples");
    if (t.dx < 1 || t.dy < 1) throw ConfigError("target.samples: dims must be >= 1");
  } else {
    t.source = TargetSource::Random;
    const Json& r = j.at("random");
    check_keys(r, {"dx", "dy", "kind", "scale"}, "target.random");
    read(r, "dx", t.dx, "target.random");
    read(r, "dy", t.dy, "target.random");
    read(r, "scale", t.scale, "target.random");
    std::string kind = "gaussian";
    read(r, "kind", kind, "target.random");
    if (kind == "gaussian") t.random_kind = RandomTargetKind::Gaussian;
    else if (kind == "pd") t.random_kind = RandomTargetKind::PositiveDefinite;
    else if (kind == "near-identity") t.random_kind = RandomTargetKind::NearIdentity;
    else throw ConfigError("target.random.kind: unknown value \"" + kind + "\"");
    if (t.dx < 1 || t.dy < 1) throw ConfigError("target.random: dims must be >= 1");
    if (t.random_kind != RandomTargetKind::Gaussian && t.dx != t.dy)
      throw ConfigError("target.random: pd and near-identity targets must be square");
  }
}

}  // namespace detail

/// Parses and validates a configuration document. Unknown fields are errors.
inline ExperimentConfig parse_config(const Json& j) {
  using detail::check_keys;
  using detail::read;
  check_keys(j, {"experiment", "target", "dims", "depth", "start", "trials", "base_seed", "output_dir", "walk", "train",
                 "gains", "sharpness", "scalar", "escape"},
             "config");
  ExperimentConfig c;
  c.raw = j;
  if (!j.contains("experiment")) throw ConfigError("config: missing \"experiment\"");
  c.experiment = j.at("experiment").get<std::string>();
  const auto it = kind_names().find(c.experiment);
  if (it == kind_names().end()) throw ConfigError("experiment: unknown value \"" + c.experiment + "\"");
  c.kind = it->second;
  read(j, "trials", c.trials, "config");
  read(j, "base_seed", c.base_seed, "config");
  read(j, "output_dir", c.output_dir, "config");
  if (c.trials < 1) throw ConfigError("trials must be >= 1");
  if (j.contains("start")) c.start = detail::start_from_string(j.at("start").get<std::string>());
  if (j.contains("target")) detail::parse_target(j.at("target"), c.target);
  if (j.contains("dims") && j.contains("depth")) throw ConfigError("give dims or depth, not both");
  read(j, "dims", c.dims, "config");
  if (j.contains("depth")) {
    const int m = j.at("depth").get<int>();
    if (m < 1) throw ConfigError("depth must be >= 1");
    if (c.target.source == TargetSource::File) throw ConfigError("depth needs an explicit target size; use dims");
    c.dims.assign(static_cast<std::size_t>(m + 1), std::max(c.target.dx, c.target.dy));
    c.dims.front() = c.target.dx;
    c.dims.back() = c.target.dy;
  }
  if (j.contains("walk")) detail::parse_walk(j.at("walk"), c.walk);
  if (j.contains("train")) detail::parse_train(j.at("train"), c.train);
  if (j.contains("gains")) {
    check_keys(j.at("gains"), {"tol", "walk_stop_ratio"}, "gains");
    read(j.at("gains"), "tol", c.gains_tol, "gains");
    read(j.at("gains"), "walk_stop_ratio", c.gains_walk_stop_ratio, "gains");
  }
  if (j.contains("sharpness")) {
    check_keys(j.at("sharpness"), {"widest_tol", "power_iteration"}, "sharpness");
    read(j.at("sharpness"), "widest_tol", c.widest_tol, "sharpness");
    read(j.at("sharpness"), "power_iteration", c.power_iteration, "sharpness");
  }
  if (j.contains("scalar")) {
    const Json& s = j.at("scalar");
    check_keys(s, {"tau", "sigma_x2", "depth", "w2", "n_points", "alpha_lo", "alpha_hi"}, "scalar");
    read(s, "tau", c.scalar.tau, "scalar");
    read(s, "sigma_x2", c.scalar.sigma_x2, "scalar");
    read(s, "depth", c.scalar.depth, "scalar");
    read(s, "w2", c.scalar.w2, "scalar");
    read(s, "n_points", c.scalar.n_points, "scalar");
    read(s, "alpha_lo", c.scalar.alpha_lo, "scalar");
    read(s, "alpha_hi", c.scalar.alpha_hi, "scalar");
    if (!(c.scalar.tau > 0.0)) throw ConfigError("scalar.tau must be > 0");
    if (c.scalar.depth < 1) throw ConfigError("scalar.depth must be >= 1");
    if (!c.scalar.w2.empty() && static_cast<int>(c.scalar.w2.size()) != c.scalar.depth)
      throw ConfigError("scalar.w2 must have depth entries");
  }
  if (j.contains("escape")) {
    const Json& e = j.at("escape");
    check_keys(e, {"tau", "sigma_x2", "start", "eta", "perturbation", "iters", "grid"}, "escape");
    read(e, "tau", c.escape.tau, "escape");
    read(e, "sigma_x2", c.escape.sigma_x2, "escape");
    read(e, "start", c.escape.start, "escape");
    read(e, "eta", c.escape.eta, "escape");
    read(e, "perturbation", c.escape.perturbation, "escape");
    read(e, "iters", c.escape.iters, "escape");
    if (e.contains("grid")) {
      const Json& g = e.at("grid");
      check_keys(g, {"w1", "w2", "n"}, "escape.grid");
      std::vector<double> r1{c.escape.grid.w1_lo, c.escape.grid.w1_hi}, r2{c.escape.grid.w2_lo, c.escape.grid.w2_hi};
      read(g, "w1", r1, "escape.grid");
      read(g, "w2", r2, "escape.grid");
      read(g, "n", c.escape.grid.n, "escape.grid");
      if (r1.size() != 2 || r2.size() != 2) throw ConfigError("escape.grid ranges must be [lo, hi]");
      c.escape.grid = {r1[0], r1[1], r2[0], r2[1], c.escape.grid.n};
      if (c.escape.grid.n < 2) throw ConfigError("escape.grid.n must be >= 2");
    }
    if (c.escape.start.empty()) throw ConfigError("escape.start must be non-empty");
    if (!(c.escape.eta > 0.0)) throw ConfigError("escape.eta must be > 0");
  }

  try {
    c.walk.validate();
    c.train.validate();
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }

  const bool needs_net = c.kind == Kind::Sharpness || c.kind == Kind::GainsFigure || c.kind == Kind::Walk ||
                         c.kind == Kind::Train;
  if (needs_net) {
    if (c.dims.empty()) throw ConfigError("this experiment needs dims or depth");
    if (c.dims.size() < 2) throw ConfigError("dims must have at least two entries");
    if (c.target.source != TargetSource::File &&
        (c.dims.front() != c.target.dx || c.dims.back() != c.target.dy))
      throw ConfigError("dims endpoints must match the target's (d_x, d_y)");
  }
  if (!(c.gains_walk_stop_ratio >= 1.0)) throw ConfigError("gains.walk_stop_ratio must be >= 1");
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  Json j;
  try {
    j = Json::parse(io::read_file(path));
  } catch (const Json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  return parse_config(j);
}

// ---------------------------------------------------------------------------
// Trials

namespace detail {

inline WhiteProblem with_moments(DataMoments m) {
  TargetMap t = make_target(m);
  return {std::move(m), std::move(t)};
}

inline Matrix random_target(const TargetSpec& spec, CounterRng& rng);

/// Moments and target for one trial. Explicit and random targets use white
/// noiseless moments; data files keep their own input covariance.
inline WhiteProblem build_problem(const TargetSpec& spec, CounterRng& rng) {
  switch (spec.source) {
    case TargetSource::Matrix:
      return moments_from_target(spec.matrix);
    case TargetSource::File: {
      const Json j = io::read_json(spec.file);
      if (j.contains("t")) return moments_from_target(io::matrix_from_json(j.at("t")));
      if (j.contains("sigma_x")) return with_moments(io::moments_from_json(j));
      throw ConfigError(spec.file + ": expected a \"t\" matrix or a moments document");
    }
    case TargetSource::Samples: {
      const auto [x, y] = io::read_samples_csv(spec.file, spec.dx, spec.dy);
      return with_moments(compute_moments(x, y));
    }
    case TargetSource::Random:
      break;
  }
  return moments_from_target(random_target(spec, rng));
}

inline Matrix random_target(const TargetSpec& spec, CounterRng& rng) {
  const int d = spec.dx;
  switch (spec.random_kind) {
    case RandomTargetKind::Gaussian:
      return rng.gaussian(spec.dy, spec.dx);
    case RandomTargetKind::PositiveDefinite: {
      const Matrix q = random_orthogonal(d, rng);
      Vector ev(d);
      for (int i = 0; i < d; ++i) ev(i) = rng.uniform(0.25, 4.0);
      Matrix t = q * ev.asDiagonal() * q.transpose();
      return 0.5 * (t + t.transpose());
    }
    case RandomTargetKind::NearIdentity: {
      Matrix t;
      do {
        t = Matrix::Identity(d, d) + spec.scale * rng.gaussian(d, d);
      } while (!(t.determinant() > 0.0));
      return t;
    }
  }
  return {};
}

inline LinearNetwork build_start(const ExperimentConfig& c, const TargetMap& target, std::uint64_t seed) {
  switch (c.start) {
    case StartKind::Canonical: return canonical_widest(target, c.dims);
    case StartKind::Arbitrary: return sample_arbitrary_minimum(target, c.dims, seed);
    case StartKind::Pivot: return pivot_start(target, static_cast<int>(c.dims.size()) - 1, seed);
    case StartKind::Identity: return identity_init(c.dims);
    case StartKind::WidestFamily: return random_widest(target, c.dims, seed);
  }
  return canonical_widest(target, c.dims);
}

inline Json run_sharpness(const ExperimentConfig& c, const WhiteProblem& p, std::uint64_t seed) {
  const LinearNetwork net = build_start(c, p.target, seed);
  const HessianFactor f = phi_blocks(net, p.moments);
  const auto report = lambda_max(f, EigenMethod::DenseReduced, p.target);
  Json out{{"net", io::to_json(net)},
           {"global_min_residual", is_global_min(net, p.target, kGlobalMinTolerance).residual},
           {"sharpness", io::to_json(report)},
           {"gap_ratio", report.gap_ratio},
           {"nu_top", nu_bound(p.target.u * p.target.v.transpose(), p.target, net.depth(), p.moments)},
           {"widest", io::to_json(is_widest(net, p.moments, p.target, c.widest_tol))}};
  if (c.power_iteration) out["power"] = io::to_json(lambda_max(f, EigenMethod::PowerIteration, p.target));
  return out;
}

inline Json describe_minimum(const LinearNetwork& net, const WhiteProblem& p) {
  Json out{{"net", io::to_json(net)}, {"gains", io::to_json(gain_profile(net, p.target))}};
  if (!p.target.degenerate()) out["coupling"] = io::to_json(coupling_report(net, p.target));
  out["lambda_max"] = lambda_max(phi_blocks(net, p.moments), EigenMethod::DenseReduced, p.target).lambda_max;
  return out;
}

inline Json run_walk(const ExperimentConfig& c, const WhiteProblem& p, std::uint64_t seed, double stop_ratio) {
  const LinearNetwork start = c.start == StartKind::Canonical ? sample_arbitrary_minimum(p.target, c.dims, seed)
                                                              : build_start(c, p.target, seed);
  WalkConfig wc = c.walk;
  wc.seed = seed;
  wc.stop_ratio = stop_ratio;
  const WalkTrace trace = greedy_widest_walk(start, p.moments, p.target, wc);
  Json out = describe_minimum(trace.final_net, p);
  out["trace"] = io::to_json(trace);
  out["gap_ratio"] = trace.final_lambda / trace.widest_value;
  out["converged"] = trace.converged;
  const auto check = verify_gains(gain_profile(trace.final_net, p.target), trace.final_net.depth(),
                                  p.target.sigma_max, c.gains_tol);
  out["gains_pass"] = check.forward_passed();
  out["gains_all_checks_pass"] = check.all_passed();
  return out;
}

inline Json run_gains_figure(const ExperimentConfig& c, const WhiteProblem& p, std::uint64_t seed) {
  const LinearNetwork arbitrary = sample_arbitrary_minimum(p.target, c.dims, seed);
  Json arb = describe_minimum(arbitrary, p);
  const GainProfile ag = gain_profile(arbitrary, p.target);
  bool exceeds = false;
  for (int k = 1; k < arbitrary.depth(); ++k)
    exceeds = exceeds || (ag.per_depth_singulars[k].size() && ag.per_depth_singulars[k](0) > ag.bound[k]);
  arb["interior_exceeds_bound"] = exceeds;

  ExperimentConfig wc = c;
  wc.start = StartKind::Arbitrary;
  Json walk = run_walk(wc, p, seed, c.gains_walk_stop_ratio);
  return {{"arbitrary", arb}, {"walk", walk}, {"gap_ratio", walk.at("gap_ratio")}};
}

inline Json run_train(const ExperimentConfig& c, const WhiteProblem& p, std::uint64_t seed) {
  ExperimentConfig sc = c;
  if (!c.raw.contains("start")) sc.start = StartKind::Identity;
  const LinearNetwork start = build_start(sc, p.target, seed);
  TrainConfig tc = c.train;
  tc.seed = seed;
  const TrainTrace trace = train(start, p.moments, tc);
  Json out{{"trace", io::to_json(trace)}, {"converged", trace.converged}};
  const double widest = widest_sharpness(p.target, start.depth());
  out["widest_value"] = widest;
  if (trace.final_lambda_max) out["gap_ratio"] = *trace.final_lambda_max / widest;
  return out;
}

inline std::vector<double> sample_positive_minimum(double tau, int m, CounterRng& rng) {
  std::vector<double> w(static_cast<std::size_t>(m));
  double prod = 1.0;
  for (int i = 0; i + 1 < m; ++i) {
    w[i] = std::exp(rng.uniform(-1.0, 1.0)) * std::pow(tau, 1.0 / m);
    prod *= w[i];
  }
  w[m - 1] = tau / prod;
  return w;
}

inline Json section_json(const std::vector<SectionPoint>& s) {
  Json a = Json::array();
  for (const auto& p : s) a.push_back({p.alpha, p.loss});
  return a;
}

inline Json run_scalar_interp(const ExperimentConfig& c, std::uint64_t seed) {
  const ScalarSpec& s = c.scalar;
  CounterRng rng(seed);
  const double mag = std::pow(s.tau, 1.0 / s.depth);
  ScalarNetwork w1{std::vector<double>(static_cast<std::size_t>(s.depth), mag), s.tau, s.sigma_x2};
  ScalarNetwork w2{s.w2.empty() ? sample_positive_minimum(s.tau, s.depth, rng) : s.w2, s.tau, s.sigma_x2};
  // Orient the pair so that w2 looks sharper than w1; flipping w2 -> w1^2/w2
  // swaps the two sums.
  auto cmp12 = interp_compare(w1, w2);
  bool flipped = false;
  if (cmp12.verdict == InterpVerdict::W1AppearsSharper) {
    for (int i = 0; i < s.depth; ++i) w2.w[i] = w1.w[i] * w1.w[i] / w2.w[i];
    cmp12 = interp_compare(w1, w2);
    flipped = true;
  }
  const ScalarNetwork w3 = deceive_construct(w1, w2);
  const auto cmp13 = interp_compare(w1, w3);
  const DataMoments mom = scalar_moments(s.tau, s.sigma_x2);
  const auto sec12 = loss_section(embed(w1), embed(w2), mom, s.n_points, s.alpha_lo, s.alpha_hi);
  const auto sec13 = loss_section(embed(w1), embed(w3), mom, s.n_points, s.alpha_lo, s.alpha_hi);
  auto cmp_json = [](const InterpComparison& x) {
    return Json{{"verdict", std::string(to_string(x.verdict))},
                {"sum_2_over_1", x.sum_2_over_1},
                {"sum_1_over_2", x.sum_1_over_2}};
  };
  return {{"tau", s.tau},
          {"sigma_x2", s.sigma_x2},
          {"depth", s.depth},
          {"w1", w1.w},
          {"w2", w2.w},
          {"w3", w3.w},
          {"w2_flipped", flipped},
          {"compare_12", cmp_json(cmp12)},
          {"compare_13", cmp_json(cmp13)},
          {"lambda_w1", scalar_lambda_max(w1)},
          {"lambda_w2", scalar_lambda_max(w2)},
          {"lambda_w3", scalar_lambda_max(w3)},
          {"section_12", section_json(sec12)},
          {"section_13", section_json(sec13)}};
}

inline Json run_escape(const ExperimentConfig& c, std::uint64_t seed) {
  const EscapeSpec& e = c.escape;
  ScalarNetwork start{e.start, e.tau, e.sigma_x2};
  const DataMoments mom = scalar_moments(e.tau, e.sigma_x2);
  const LinearNetwork net = embed(start);
  const double start_lambda = scalar_lambda_max(start);
  const TrainTrace trace = escape_experiment(net, mom, e.eta, e.perturbation, e.iters, seed, true);
  Json out{{"tau", e.tau},
           {"sigma_x2", e.sigma_x2},
           {"eta", e.eta},
           {"start", e.start},
           {"start_lambda", start_lambda},
           {"threshold", 2.0 / e.eta},
           {"start_stable", stability_check(start_lambda, e.eta)},
           {"trace", io::to_json(trace)},
           {"grid", {{"w1", {e.grid.w1_lo, e.grid.w1_hi}}, {"w2", {e.grid.w2_lo, e.grid.w2_hi}}, {"n", e.grid.n}}}};
  if (trace.final_lambda_max) out["end_stable"] = stability_check(*trace.final_lambda_max, e.eta);
  return out;
}

inline Json run_trial(const ExperimentConfig& c, std::uint64_t seed) {
  if (c.kind == Kind::ScalarInterp) return run_scalar_interp(c, seed);
  if (c.kind == Kind::Escape) return run_escape(c, seed);
  CounterRng rng(seed);
  const WhiteProblem p = build_problem(c.target, rng);
  if (c.dims.front() != p.target.dx() || c.dims.back() != p.target.dy())
    throw ShapeError("dims endpoints do not match the target");
  const std::uint64_t sub_seed = rng();
  Json out;
  switch (c.kind) {
    case Kind::Sharpness: out = run_sharpness(c, p, sub_seed); break;
    case Kind::GainsFigure: out = run_gains_figure(c, p, sub_seed); break;
    case Kind::Walk: out = run_walk(c, p, sub_seed, c.walk.stop_ratio); break;
    case Kind::Train: out = run_train(c, p, sub_seed); break;
    default: break;
  }
  out["target"] = io::to_json(p.target);
  return out;
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

/// Summary statistics recomputed from per-trial entries.
inline Json summarize(const Json& trials) {
  std::vector<double> gaps;
  int ok = 0, failed = 0, converged = 0, with_converged = 0;
  for (const auto& t : trials) {
    if (t.at("status") == "ok") {
      ++ok;
      const Json& r = t.at("report");
      if (r.contains("gap_ratio")) gaps.push_back(r.at("gap_ratio").get<double>());
      if (r.contains("converged")) {
        ++with_converged;
        if (r.at("converged").get<bool>()) ++converged;
      }
    } else {
      ++failed;
    }
  }
  Json s{{"trials", trials.size()}, {"ok", ok}, {"failed", failed}};
  if (with_converged) s["converged"] = converged;
  if (!gaps.empty()) {
    s["gap_ratio"] = {{"min", *std::min_element(gaps.begin(), gaps.end())},
                      {"median", detail::median(gaps)},
                      {"max", *std::max_element(gaps.begin(), gaps.end())}};
  }
  return s;
}

struct RunOptions {
  int jobs = 1;
  std::optional<std::string> out_dir;
  std::optional<std::uint64_t> seed_override;
  bool write_files = true;
};

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Drops fields that legitimately differ between identical runs.
inline Json strip_volatile(Json bundle) {
  bundle.erase("timestamp");
  return bundle;
}

std::vector<std::filesystem::path> emit_plot_data(const Json& bundle, const std::string& kind,
                                                  const std::filesystem::path& out_dir);
std::vector<std::string> plot_kinds_for(const std::string& experiment);

/// Runs every trial (trial i uses seed base_seed + i) and assembles the
/// bundle. Trial failures are recorded, not propagated.
inline Json run(const ExperimentConfig& config, const RunOptions& opts = {}) {
  ExperimentConfig c = config;
  if (opts.seed_override) c.base_seed = *opts.seed_override;
  if (opts.out_dir) c.output_dir = *opts.out_dir;

  std::vector<Json> results(static_cast<std::size_t>(c.trials));
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int i = next++; i < c.trials; i = next++) {
      const std::uint64_t seed = c.base_seed + static_cast<std::uint64_t>(i);
      Json t{{"index", i}, {"seed", seed}};
      try {
        t["report"] = detail::run_trial(c, seed);
        t["status"] = "ok";
      } catch (const ConvergenceError& e) {
        t["status"] = "failed";
        t["error_kind"] = "numerical";
        t["error"] = e.what();
      } catch (const NumericalFailure& e) {
        t["status"] = "failed";
        t["error_kind"] = "numerical";
        t["error"] = e.what();
      } catch (const std::exception& e) {
        t["status"] = "failed";
        t["error_kind"] = "error";
        t["error"] = e.what();
      }
      results[static_cast<std::size_t>(i)] = std::move(t);
    }
  };
  const int jobs = std::clamp(opts.jobs, 1, c.trials);
  {
    std::vector<std::jthread> pool;
    for (int j = 1; j < jobs; ++j) pool.emplace_back(worker);
    worker();
  }

  Json trials = Json::array();
  for (auto& r : results) trials.push_back(std::move(r));
  Json config_echo = c.raw;
  config_echo["base_seed"] = c.base_seed;
  config_echo["output_dir"] = c.output_dir;
  Json bundle{{"schema", kBundleSchema},
              {"config", config_echo},
              {"trials", trials},
              {"summary", summarize(trials)},
              {"timestamp", utc_timestamp()}};

  if (opts.write_files) {
    const std::filesystem::path out = c.output_dir;
    io::write_atomic(out / "bundle.json", bundle.dump(2) + "\n");
    for (const auto& kind : plot_kinds_for(c.experiment)) {
      try {
        emit_plot_data(bundle, kind, out);
      } catch (const ArgumentError&) {
        // every trial failed; the bundle records why
      }
    }
  }
  return bundle;
}

// ---------------------------------------------------------------------------
// Plot data

inline const std::vector<std::string>& plot_kinds() {
  static const std::vector<std::string> kinds{"gains-vs-layer", "lambda-trajectory", "loss-sections",
                                              "train-trajectory", "scalar-gd-path"};
  return kinds;
}

inline std::vector<std::string> plot_kinds_for(const std::string& experiment) {
  if (experiment == "sharpness") return {};
  if (experiment == "gains-figure") return {"gains-vs-layer", "lambda-trajectory"};
  if (experiment == "walk") return {"gains-vs-layer", "lambda-trajectory"};
  if (experiment == "train") return {"train-trajectory"};
  if (experiment == "scalar-interp") return {"loss-sections"};
  if (experiment == "escape") return {"train-trajectory", "scalar-gd-path"};
  return {};
}

/// Gains table: k, bound, v_gain, u_gain, then s1..s_d (singular values of
/// the partial product W_k..W_1, padded with empty cells).
inline io::CsvTable gains_table(const GainProfile& g) {
  std::size_t width = 0;
  for (const auto& s : g.per_depth_singulars) width = std::max<std::size_t>(width, static_cast<std::size_t>(s.size()));
  io::CsvTable t;
  t.header = {"k", "bound", "v_gain", "u_gain"};
  for (std::size_t i = 0; i < width; ++i) t.header.push_back("s" + std::to_string(i + 1));
  for (int k = 0; k <= g.depth; ++k) {
    std::vector<std::string> row{std::to_string(k), io::format_double(g.bound[k]), io::format_double(g.v_gain[k]),
                                 io::format_double(g.u_gain[k])};
    const Vector& s = g.per_depth_singulars[k];
    for (std::size_t i = 0; i < width; ++i)
      row.push_back(static_cast<Index>(i) < s.size() ? io::format_double(s(static_cast<Index>(i))) : "");
    t.add_row(std::move(row));
  }
  return t;
}

inline io::CsvTable lambda_table(const WalkTrace& w) {
  io::CsvTable t;
  t.header = {"iteration", "lambda", "eps"};
  for (std::size_t i = 0; i < w.lambda_history.size(); ++i)
    t.add_row({std::to_string(i + 1), io::format_double(w.lambda_history[i]), io::format_double(w.eps_history[i])});
  return t;
}

inline io::CsvTable train_table(const TrainTrace& tr) {
  io::CsvTable t;
  t.header = {"iteration", "loss", "balance_residual"};
  for (std::size_t i = 0; i < tr.loss_history.size(); ++i)
    t.add_row({std::to_string(tr.iterations[i]), io::format_double(tr.loss_history[i]),
               io::format_double(tr.balance_residuals[i])});
  return t;
}

inline io::CsvTable section_table(const Json& section) {
  io::CsvTable t;
  t.header = {"alpha", "loss"};
  for (const auto& p : section) t.add_row({io::format_double(p[0].get<double>()), io::format_double(p[1].get<double>())});
  return t;
}

inline io::CsvTable path_table(const TrainTrace& tr) {
  io::CsvTable t;
  t.header = {"iteration", "w1", "w2", "loss"};
  for (std::size_t i = 0; i < tr.path.size(); ++i) {
    if (tr.path[i].size() != 2) throw ArgumentError("scalar-gd-path needs a two-parameter network");
    t.add_row({std::to_string(tr.iterations[i]), io::format_double(tr.path[i](0)), io::format_double(tr.path[i](1)),
               io::format_double(tr.loss_history[i])});
  }
  return t;
}

/// Loss of the scalar 2-layer net over a box, for level-set plots.
inline io::CsvTable contour_table(double tau, double sigma_x2, const GridSpec& g) {
  io::CsvTable t;
  t.header = {"w1", "w2", "loss"};
  for (int i = 0; i < g.n; ++i) {
    const double a = g.w1_lo + (g.w1_hi - g.w1_lo) * i / (g.n - 1);
    for (int j = 0; j < g.n; ++j) {
      const double b = g.w2_lo + (g.w2_hi - g.w2_lo) * j / (g.n - 1);
      const double r = a * b - tau;
      t.add_row({io::format_double(a), io::format_double(b), io::format_double(sigma_x2 * r * r)});
    }
  }
  return t;
}

/// Writes the CSV files for one plot kind and returns their paths.
inline std::vector<std::filesystem::path> emit_plot_data(const Json& bundle, const std::string& kind,
                                                         const std::filesystem::path& out_dir) {
  if (std::find(plot_kinds().begin(), plot_kinds().end(), kind) == plot_kinds().end())
    throw ArgumentError("unknown plot kind \"" + kind + "\"");
  if (!bundle.contains("schema") || bundle.at("schema") != kBundleSchema)
    throw ArgumentError("not a flatminima bundle");
  std::vector<std::filesystem::path> written;
  auto put = [&](const std::string& name, const io::CsvTable& table) {
    const auto path = out_dir / name;
    io::write_atomic(path, table.str());
    written.push_back(path);
  };

  for (const auto& trial : bundle.at("trials")) {
    if (trial.at("status") != "ok") continue;
    const std::string tag = "trial" + std::to_string(trial.at("index").get<int>());
    const Json& r = trial.at("report");
    if (kind == "gains-vs-layer") {
      if (r.contains("arbitrary")) put("gains_" + tag + "_arbitrary.csv", gains_table(io::gain_profile_from_json(r["arbitrary"]["gains"])));
      if (r.contains("walk")) put("gains_" + tag + "_widest.csv", gains_table(io::gain_profile_from_json(r["walk"]["gains"])));
      if (r.contains("gains") && r.contains("trace")) put("gains_" + tag + ".csv", gains_table(io::gain_profile_from_json(r["gains"])));
    } else if (kind == "lambda-trajectory") {
      const Json* tr = r.contains("walk") ? &r.at("walk").at("trace") : (r.contains("trace") && r.at("trace").contains("lambda_history") ? &r.at("trace") : nullptr);
      if (tr) put("lambda_" + tag + ".csv", lambda_table(io::walk_trace_from_json(*tr)));
    } else if (kind == "loss-sections") {
      if (r.contains("section_12")) put("section_" + tag + "_w1_w2.csv", section_table(r.at("section_12")));
      if (r.contains("section_13")) put("section_" + tag + "_w1_w3.csv", section_table(r.at("section_13")));
    } else if (kind == "train-trajectory") {
      if (r.contains("trace") && r.at("trace").contains("loss_history"))
        put("train_" + tag + ".csv", train_table(io::train_trace_from_json(r.at("trace"))));
    } else if (kind == "scalar-gd-path") {
      if (r.contains("trace") && r.contains("grid")) {
        const TrainTrace tr = io::train_trace_from_json(r.at("trace"));
        put("path_" + tag + ".csv", path_table(tr));
        const Json& g = r.at("grid");
        GridSpec grid{g["w1"][0].get<double>(), g["w1"][1].get<double>(), g["w2"][0].get<double>(),
                      g["w2"][1].get<double>(), g["n"].get<int>()};
        put("contour_" + tag + ".csv", contour_table(r.at("tau").get<double>(), r.at("sigma_x2").get<double>(), grid));
      }
    }
  }
  if (written.empty()) throw ArgumentError("bundle has no reports for plot kind \"" + kind + "\"");
  return written;
}

}  // namespace flatminima::experiment
