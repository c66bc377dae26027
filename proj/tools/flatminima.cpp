// flatminima run <config.json> [--jobs N] [--strict] [--out DIR]
// flatminima emit <bundle.json> --kind K [--out DIR]
#include "flatminima/flatminima.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

namespace fm = flatminima;
namespace ex = flatminima::experiment;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

std::optional<std::uint64_t> seed_from_env() {
  const char* s = std::getenv("FLATMINIMA_SEED");
  if (!s || !*s) return std::nullopt;
  try {
    std::size_t pos = 0;
    const auto v = std::stoull(s, &pos);
    if (pos != std::string(s).size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ex::ConfigError(std::string("FLATMINIMA_SEED is not an unsigned integer: ") + s);
  }
}

int cmd_run(const std::string& config_path, int jobs, bool strict, const std::string& out) {
  ex::ExperimentConfig cfg;
  ex::RunOptions opts;
  try {
    cfg = ex::load_config(config_path);
    opts.seed_override = seed_from_env();
  } catch (const ex::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  }
  opts.jobs = jobs;
  if (!out.empty()) opts.out_dir = out;
  const auto bundle = ex::run(cfg, opts);

  const auto& summary = bundle.at("summary");
  std::cout << cfg.experiment << ": " << summary.at("ok") << "/" << summary.at("trials") << " trials ok";
  if (summary.contains("converged")) std::cout << ", " << summary.at("converged") << " converged";
  if (summary.contains("gap_ratio")) {
    const auto& g = summary.at("gap_ratio");
    std::cout << ", gap ratio min/median/max " << fm::io::format_double(g.at("min").get<double>()) << "/"
              << fm::io::format_double(g.at("median").get<double>()) << "/"
              << fm::io::format_double(g.at("max").get<double>());
  }
  std::cout << "\n";
  bool numerical = false;
  for (const auto& t : bundle.at("trials")) {
    if (t.at("status") == "ok") continue;
    std::cerr << "trial " << t.at("index") << " (seed " << t.at("seed") << ") failed: " << t.at("error").get<std::string>()
              << "\n";
    numerical = true;
  }
  std::cout << "wrote " << (std::filesystem::path(bundle.at("config").at("output_dir").get<std::string>()) / "bundle.json").string()
            << "\n";
  return strict && numerical ? kExitNumerical : 0;
}

int cmd_emit(const std::string& bundle_path, const std::string& kind, const std::string& out) {
  const auto bundle = fm::io::read_json(bundle_path);
  const std::filesystem::path dir = out.empty() ? std::filesystem::path(bundle_path).parent_path() : std::filesystem::path(out);
  for (const auto& p : ex::emit_plot_data(bundle, kind, dir)) std::cout << p.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sharpness of minima in deep linear networks"};
  app.require_subcommand(1);

  std::string config_path, bundle_path, kind, out;
  int jobs = 1;
  bool strict = false;

  auto* run = app.add_subcommand("run", "Run an experiment from a JSON config");
  run->add_option("config", config_path, "Experiment config")->required();
  run->add_option("--jobs,-j", jobs, "Worker threads")->check(CLI::PositiveNumber);
  run->add_flag("--strict", strict, "Exit 3 if any trial fails");
  run->add_option("--out,-o", out, "Output directory (overrides the config)");

  auto* emit = app.add_subcommand("emit", "Write plot-ready CSVs from a bundle");
  emit->add_option("bundle", bundle_path, "bundle.json from a previous run")->required();
  emit->add_option("--kind,-k", kind, "Plot kind")->required()->check(CLI::IsMember(ex::plot_kinds()));
  emit->add_option("--out,-o", out, "Output directory (default: next to the bundle)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*run) return cmd_run(config_path, jobs, strict, out);
    return cmd_emit(bundle_path, kind, out);
  } catch (const fm::ArgumentError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
