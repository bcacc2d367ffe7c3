// Runs the reference experiment end to end and prints one line per
// acceptance criterion. Tolerances live next to the checks that use them:
// here for timing, determinism and gradients, in evaluate_run for the rest.
//
//   acceptance --work DIR [--config FILE]

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "diti/pipeline.hpp"
#include "gradcheck.hpp"

namespace fs = std::filesystem;
using diti::CriterionResult;

namespace {

constexpr double kTheoryRuntimeSeconds = 60.0;

// Known failures, analysed in the README. They are evaluated and printed as
// FAIL like any other criterion but do not set the exit status.
const std::map<int, std::string> kKnownFailures = {
    {8, "every subset predicts every attribute with R^2 near 0.9, so the argmax is a near-tie"},
    {9, "pixel AP is exactly 1 on all four attributes, so it cannot be exceeded"},
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double stage_seconds(const fs::path& dir, diti::Stage s) {
  auto p = dir / "timing" / (diti::to_string(s) + ".json");
  if (!fs::exists(p)) return -1.0;
  return nlohmann::json::parse(slurp(p)).value("seconds", -1.0);
}

double run_pipeline(const diti::ExperimentConfig& cfg, const fs::path& dir) {
  fs::remove_all(dir);
  const auto start = std::chrono::steady_clock::now();
  for (diti::Stage s : diti::all_stages()) {
    std::cerr << "[acceptance] " << dir.filename().string() << ": " << diti::to_string(s) << std::endl;
    diti::run_stage(s, cfg, dir);
  }
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

CriterionResult gradient_criterion() {
  gradcheck::Report ops = gradcheck::check_ops(), mlp = gradcheck::check_mlp();
  gradcheck::Report dm = gradcheck::check_denoiser(), ed = gradcheck::check_encoder_decoder();
  gradcheck::Report all;
  for (const auto* r : {&ops, &mlp, &dm, &ed}) all.merge(*r);
  std::ostringstream os;
  os << "ops " << ops.probes << " probes, mlp " << mlp.probes << ", denoiser " << dm.probes << ", encoder/decoder "
     << ed.probes << "; " << all.failures.size() << " disagreements at rel " << gradcheck::kRelTol;
  for (std::size_t i = 0; i < std::min<std::size_t>(all.failures.size(), 3); ++i) os << "; " << all.failures[i];
  return {4, "gradient_checks", true, all.failures.empty() && all.probes > 0, os.str()};
}

CriterionResult determinism_criterion(const fs::path& a, const fs::path& b) {
  auto fa = diti::metric_files(a), fb = diti::metric_files(b);
  std::vector<std::string> differ;
  for (const auto& f : fa)
    if (!fs::exists(b / f) || slurp(a / f) != slurp(b / f)) differ.push_back(f.string());
  for (diti::Stage s : diti::all_stages()) {
    auto m = fs::path("manifests") / (diti::to_string(s) + ".json");
    if (slurp(a / m) != slurp(b / m)) differ.push_back(m.string());
  }
  std::ostringstream os;
  os << fa.size() << " metric CSVs and " << diti::all_stages().size() << " manifests compared; " << differ.size()
     << " differ";
  for (const auto& d : differ) os << ' ' << d;
  return {11, "determinism", true, differ.empty() && fa == fb && !fa.empty(), os.str()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance run"};
  std::string work, config = std::string(DITI_SOURCE_DIR) + "/configs/reference.json";
  app.add_option("--work", work, "Scratch directory")->required();
  app.add_option("--config", config, "Experiment config");
  CLI11_PARSE(app, argc, argv);

  diti::ExperimentConfig cfg;
  try {
    cfg = diti::load_config(config);
  } catch (const std::exception& e) {
    std::cerr << e.what() << '\n';
    return 1;
  }
  const fs::path run_a = fs::path(work) / "run_a", run_b = fs::path(work) / "run_b";

  double first = 0.0, second = 0.0;
  try {
    first = run_pipeline(cfg, run_a);
    second = run_pipeline(cfg, run_b);
  } catch (const std::exception& e) {
    std::cerr << "pipeline failed: " << e.what() << '\n';
    return 2;
  }

  std::map<int, CriterionResult> results;
  for (auto& r : diti::evaluate_run(run_a)) results[r.id] = r;
  results[4] = gradient_criterion();
  results[11] = determinism_criterion(run_a, run_b);

  // The theory checks also carry a runtime limit.
  const double theory_s = stage_seconds(run_a, diti::Stage::VerifyTheory);
  for (int id : {1, 3}) {
    auto& r = results[id];
    r.detail += "; verify-theory " + std::to_string(theory_s) + " s";
    r.pass = r.pass && theory_s >= 0.0 && theory_s < kTheoryRuntimeSeconds;
  }

  int unexpected = 0;
  std::cout << "acceptance: " << config << "\n";
  for (int id = 1; id <= 11; ++id) {
    auto it = results.find(id);
    if (it == results.end() || !it->second.evaluated) {
      std::cout << "criterion " << id << ": FAIL (not evaluated"
                << (it == results.end() ? "" : ": " + it->second.detail) << ")\n";
      ++unexpected;
      continue;
    }
    const auto& r = it->second;
    std::cout << "criterion " << id << " " << r.name << ": " << (r.pass ? "PASS" : "FAIL") << "  " << r.detail;
    if (!r.pass) {
      auto known = kKnownFailures.find(id);
      if (known != kKnownFailures.end())
        std::cout << "  [known failure: " << known->second << "]";
      else
        ++unexpected;
    }
    std::cout << '\n';
  }
  std::printf("pipeline wall time: %.1f s first run, %.1f s rerun (budget %.0f s each)\n", first, second,
              cfg.budget_seconds);
  if (first > cfg.budget_seconds || second > cfg.budget_seconds) {
    std::cout << "pipeline exceeded its budget\n";
    ++unexpected;
  }
  return unexpected == 0 ? 0 : 1;
}
