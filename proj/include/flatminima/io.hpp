#pragma once

#include "flatminima/common.hpp"
#include "flatminima/hessian.hpp"
#include "flatminima/moments.hpp"
#include "flatminima/network.hpp"
#include "flatminima/sampler.hpp"
#include "flatminima/trainer.hpp"
#include "flatminima/widest.hpp"

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace flatminima::io {

using Json = nlohmann::json;

inline constexpr const char* kFormatVersion = "flatminima/1";

// ---------------------------------------------------------------------------
// Numbers and matrices

/// Shortest decimal form that round-trips; never fewer digits than needed
/// for bit-exact reload (17 significant digits worst case).
inline std::string format_double(double x) {
  char buf[32];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, x);
    if (std::strtod(buf, nullptr) == x) break;
  }
  return buf;
}

/// Row-major nested arrays.
inline Json to_json(const Matrix& m) {
  Json rows = Json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    Json row = Json::array();
    for (Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Json to_json(const Vector& v) {
  Json a = Json::array();
  for (Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

inline Matrix matrix_from_json(const Json& j) {
  if (!j.is_array() || j.empty()) throw ArgumentError("matrix must be a non-empty array of rows");
  const Index rows = static_cast<Index>(j.size());
  const Index cols = static_cast<Index>(j.at(0).size());
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    const Json& row = j.at(static_cast<std::size_t>(i));
    if (!row.is_array() || static_cast<Index>(row.size()) != cols) throw ArgumentError("ragged matrix rows");
    for (Index c = 0; c < cols; ++c) m(i, c) = row.at(static_cast<std::size_t>(c)).get<double>();
  }
  return m;
}

inline Vector vector_from_json(const Json& j) {
  Vector v(static_cast<Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Index>(i)) = j[i].get<double>();
  return v;
}

inline Json to_json(const std::vector<Vector>& vs) {
  Json a = Json::array();
  for (const auto& v : vs) a.push_back(to_json(v));
  return a;
}

// ---------------------------------------------------------------------------
// Domain values

inline Json to_json(const LinearNetwork& net) {
  Json ws = Json::array();
  for (const auto& w : net.weights()) ws.push_back(to_json(w));
  return {{"format", kFormatVersion}, {"dims", net.dims()}, {"weights", ws}};
}

inline void check_format(const Json& j) {
  if (!j.contains("format") || j.at("format") != kFormatVersion)
    throw ArgumentError(std::string("expected format \"") + kFormatVersion + "\"");
}

inline LinearNetwork network_from_json(const Json& j) {
  check_format(j);
  std::vector<Matrix> ws;
  for (const auto& w : j.at("weights")) ws.push_back(matrix_from_json(w));
  LinearNetwork net(std::move(ws));
  if (j.at("dims").get<std::vector<int>>() != net.dims()) throw ShapeError("dims field disagrees with weights");
  return net;
}

inline Json to_json(const DataMoments& m) {
  return {{"format", kFormatVersion},
          {"dims", {m.dx(), m.dy()}},
          {"sigma_x", to_json(m.sigma_x)},
          {"sigma_yx", to_json(m.sigma_yx)},
          {"sigma_y", to_json(m.sigma_y)},
          {"is_white", m.is_white}};
}

inline DataMoments moments_from_json(const Json& j) {
  check_format(j);
  return make_moments(matrix_from_json(j.at("sigma_x")), matrix_from_json(j.at("sigma_yx")),
                      matrix_from_json(j.at("sigma_y")));
}

inline Json to_json(const TargetMap& t) {
  return {{"t", to_json(t.t)},
          {"singular_values", to_json(t.singular_values)},
          {"sigma_max", t.sigma_max},
          {"u", to_json(t.u)},
          {"v", to_json(t.v)},
          {"top_gap", t.top_gap},
          {"unique_top", t.unique_top()}};
}

inline Json to_json(const SharpnessReport& r) {
  return {{"lambda_max", r.lambda_max},
          {"eigvec", to_json(r.eigvec)},
          {"method", std::string(to_string(r.method))},
          {"iterations", r.iterations},
          {"residual", r.residual},
          {"widest_value", r.widest_value},
          {"gap_ratio", r.gap_ratio},
          {"unique_top", r.unique_top}};
}

inline SharpnessReport sharpness_from_json(const Json& j) {
  SharpnessReport r;
  r.lambda_max = j.at("lambda_max").get<double>();
  r.eigvec = vector_from_json(j.at("eigvec"));
  r.method = eigen_method_from_string(j.at("method").get<std::string>());
  r.iterations = j.at("iterations").get<int>();
  r.residual = j.at("residual").get<double>();
  r.widest_value = j.at("widest_value").get<double>();
  r.gap_ratio = j.at("gap_ratio").get<double>();
  r.unique_top = j.at("unique_top").get<bool>();
  return r;
}

inline Json to_json(const WidestDiagnostics& d) {
  return {{"verdict", std::string(to_string(d.verdict))},
          {"layer_sigma_max", d.layer_sigma_max},
          {"layer_target", d.layer_target},
          {"lambda_max", d.lambda_max},
          {"widest_value", d.widest_value},
          {"gap_ratio", d.gap_ratio}};
}

inline Json to_json(const GainProfile& g) {
  return {{"depth", g.depth},
          {"sigma_max", g.sigma_max},
          {"per_depth_singulars", to_json(g.per_depth_singulars)},
          {"suffix_singulars", to_json(g.suffix_singulars)},
          {"v_gain", g.v_gain},
          {"u_gain", g.u_gain},
          {"bound", g.bound},
          {"v_singular_residual", g.v_singular_residual},
          {"u_singular_residual", g.u_singular_residual}};
}

inline GainProfile gain_profile_from_json(const Json& j) {
  GainProfile g;
  g.depth = j.at("depth").get<int>();
  g.sigma_max = j.at("sigma_max").get<double>();
  for (const auto& v : j.at("per_depth_singulars")) g.per_depth_singulars.push_back(vector_from_json(v));
  for (const auto& v : j.at("suffix_singulars")) g.suffix_singulars.push_back(vector_from_json(v));
  g.v_gain = j.at("v_gain").get<std::vector<double>>();
  g.u_gain = j.at("u_gain").get<std::vector<double>>();
  g.bound = j.at("bound").get<std::vector<double>>();
  g.v_singular_residual = j.at("v_singular_residual").get<std::vector<double>>();
  g.u_singular_residual = j.at("u_singular_residual").get<std::vector<double>>();
  return g;
}

inline Json to_json(const CouplingReport& c) {
  return {{"r_vectors", to_json(c.r_vectors)},
          {"q_vectors", to_json(c.q_vectors)},
          {"singular_residuals", c.singular_residuals},
          {"coupling_residuals", c.coupling_residuals},
          {"balance_residuals", c.balance_residuals}};
}

inline Json to_json(const WalkTrace& t) {
  return {{"lambda_history", t.lambda_history},
          {"eps_history", t.eps_history},
          {"accept_count", t.accept_count},
          {"reject_count", t.reject_count},
          {"proposals", t.proposals},
          {"initial_lambda", t.initial_lambda},
          {"final_lambda", t.final_lambda},
          {"widest_value", t.widest_value},
          {"max_product_drift", t.max_product_drift},
          {"final_net", to_json(t.final_net)},
          {"converged", t.converged},
          {"seed", t.seed}};
}

inline WalkTrace walk_trace_from_json(const Json& j) {
  WalkTrace t;
  t.lambda_history = j.at("lambda_history").get<std::vector<double>>();
  t.eps_history = j.at("eps_history").get<std::vector<double>>();
  t.accept_count = j.at("accept_count").get<int>();
  t.reject_count = j.at("reject_count").get<int>();
  t.proposals = j.at("proposals").get<int>();
  t.initial_lambda = j.at("initial_lambda").get<double>();
  t.final_lambda = j.at("final_lambda").get<double>();
  t.widest_value = j.at("widest_value").get<double>();
  t.max_product_drift = j.at("max_product_drift").get<double>();
  t.final_net = network_from_json(j.at("final_net"));
  t.converged = j.at("converged").get<bool>();
  t.seed = j.at("seed").get<std::uint64_t>();
  return t;
}

inline Json to_json(const TrainTrace& t) {
  Json j = {{"iterations", t.iterations},
            {"loss_history", t.loss_history},
            {"balance_residuals", t.balance_residuals},
            {"path", to_json(t.path)},
            {"final_net", to_json(t.final_net)},
            {"converged", t.converged},
            {"diverged", t.diverged},
            {"iterations_run", t.iterations_run},
            {"final_loss", t.final_loss},
            {"final_grad_norm", t.final_grad_norm},
            {"monotonicity_violations", t.monotonicity_violations}};
  j["final_lambda_max"] = t.final_lambda_max ? Json(*t.final_lambda_max) : Json(nullptr);
  return j;
}

inline TrainTrace train_trace_from_json(const Json& j) {
  TrainTrace t;
  t.iterations = j.at("iterations").get<std::vector<int>>();
  t.loss_history = j.at("loss_history").get<std::vector<double>>();
  t.balance_residuals = j.at("balance_residuals").get<std::vector<double>>();
  for (const auto& p : j.at("path")) t.path.push_back(vector_from_json(p));
  t.final_net = network_from_json(j.at("final_net"));
  t.converged = j.at("converged").get<bool>();
  t.diverged = j.at("diverged").get<bool>();
  t.iterations_run = j.at("iterations_run").get<int>();
  t.final_loss = j.at("final_loss").get<double>();
  t.final_grad_norm = j.at("final_grad_norm").get<double>();
  t.monotonicity_violations = j.at("monotonicity_violations").get<int>();
  if (!j.at("final_lambda_max").is_null()) t.final_lambda_max = j.at("final_lambda_max").get<double>();
  return t;
}

// ---------------------------------------------------------------------------
// Files

/// Writes to a sibling temp file and renames it over `path`.
inline void write_atomic(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out << contents;
    if (!out) throw Error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline Json read_json(const std::filesystem::path& path) {
  try {
    return Json::parse(read_file(path));
  } catch (const Json::parse_error& e) {
    throw ArgumentError(path.string() + ": " + e.what());
  }
}

/// In-memory CSV table; cells are preformatted strings.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  void add_row(std::vector<std::string> row) {
    if (row.size() != header.size()) throw ArgumentError("csv row width does not match header");
    rows.push_back(std::move(row));
  }

  std::string str() const {
    std::string out;
    auto line = [&out](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) out += ',';
        out += cells[i];
      }
      out += '\n';
    };
    line(header);
    for (const auto& r : rows) line(r);
    return out;
  }
};

/// Samples CSV: header row, then per row d_x input columns followed by d_y
/// output columns.
inline std::pair<Matrix, Matrix> read_samples_csv(const std::filesystem::path& path, int dx, int dy) {
  std::istringstream in(read_file(path));
  std::string line;
  if (!std::getline(in, line)) throw ArgumentError(path.string() + ": empty samples file");
  std::vector<std::vector<double>> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    std::vector<double> vals;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) {
      try {
        vals.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw ArgumentError(path.string() + ":" + std::to_string(lineno) + ": bad number '" + cell + "'");
      }
    }
    if (static_cast<int>(vals.size()) != dx + dy)
      throw ArgumentError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(dx + dy) +
                          " columns");
    rows.push_back(std::move(vals));
  }
  Matrix x(static_cast<Index>(rows.size()), dx), y(static_cast<Index>(rows.size()), dy);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (int c = 0; c < dx; ++c) x(static_cast<Index>(i), c) = rows[i][c];
    for (int c = 0; c < dy; ++c) y(static_cast<Index>(i), c) = rows[i][dx + c];
  }
  return {x, y};
}

}  // namespace flatminima::io
