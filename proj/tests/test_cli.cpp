#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "diti/pipeline.hpp"
#include "diti/schedule.hpp"
#include "diti/theory.hpp"
#include "doctest.h"

using namespace diti;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("diti_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string error_of(const std::string& text) {
  auto p = scratch("cfg") / "c.json";
  write(p, text);
  try {
    load_config(p);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

ExperimentConfig tiny(std::uint64_t seed = 7) {
  ExperimentConfig c;
  c.seed = seed;
  c.n_samples = 128;
  c.dm_hidden = {32, 32};
  c.dm_optim = {1e-3, 60, 16};
  c.net.encoder_hidden = {32};
  c.net.decoder_hidden = {32};
  c.diti_optim = {1e-3, 40, 16};
  c.sufficiency_seeds = 1;
  c.sufficiency_iterations = 20;
  c.sampling_steps = 6;
  c.mc_samples = 4000;
  c.profile_pairs = 50;
  c.probe_iterations = 50;
  c.generate_rows = 2;
  c.lambdas = {-1, 0, 1};
  return c;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(DITI_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

}  // namespace

TEST_CASE("config round trip") {
  auto c = tiny(99);
  c.partition = PartitionKind::Imbalanced;
  c.k = 5;
  c.net.split_encoder = true;
  c.taus = {0.1};
  const auto j = config_to_json(c);
  const auto back = config_from_json(j);
  CHECK(config_to_json(back) == j);
  CHECK(config_hash(back) == config_hash(c));
  CHECK(config_hash(back).size() == 16);
  c.seed = 100;
  CHECK(config_hash(c) != config_hash(back));

  // The shipped reference config parses, validates and survives the trip.
  auto ref = load_config(fs::path(DITI_SOURCE_DIR) / "configs" / "reference.json");
  CHECK(ref.T == 100);
  CHECK(ref.k == 8);
  CHECK(ref.d == 64);
  CHECK(config_to_json(config_from_json(config_to_json(ref))) == config_to_json(ref));
}

TEST_CASE("malformed configs name the line and field") {
  CHECK(error_of("{\"seed\": 1,\n  \"T\": }").find("c.json:2:") != std::string::npos);
  auto unknown = error_of("{\n \"seed\": 1,\n \"dm\": {\n   \"layers\": [3]\n }\n}");
  CHECK(unknown.find("c.json:4:") != std::string::npos);
  CHECK(unknown.find("dm.layers") != std::string::npos);
  CHECK(unknown.find("unknown field") != std::string::npos);
  auto type = error_of("{\"seed\": 1,\n\"diti\": {\"k\": \"eight\"}}");
  CHECK(type.find("c.json:2:") != std::string::npos);
  CHECK(type.find("diti.k") != std::string::npos);
  CHECK(error_of("{\"out_dir\": \"x\"}").find("'seed': required") != std::string::npos);
  CHECK(error_of("{\"seed\": -3}").find("seed") != std::string::npos);
  CHECK(error_of("{\"seed\": 1, \"dataset\": {\"spec_file\": \"/nonexistent/spec.json\"}}").find("does not exist") !=
        std::string::npos);
  CHECK(error_of("{\"seed\": 1, \"diti\": {\"k\": 7}}").find("diti.k") != std::string::npos);
  CHECK(error_of("{\"seed\": 1, \"diti\": {\"partition\": \"lopsided\"}}").find("diti.partition") !=
        std::string::npos);
  CHECK(error_of("{\"seed\": 1}") == "");
}

TEST_CASE("command line exit codes") {
  auto dir = scratch("exit");
  write(dir / "bad.json", "{\"seed\": 1, \"T\": 5}");
  write(dir / "ok.json", config_to_json(tiny()).dump());
  CHECK(run_cli("") == 1);
  CHECK(run_cli("frobnicate --config " + (dir / "ok.json").string()) == 1);
  CHECK(run_cli("train-dm") == 1);
  CHECK(run_cli("train-dm --config " + (dir / "bad.json").string()) == 1);
  CHECK(run_cli("generate --mode sideways --config " + (dir / "ok.json").string()) == 1);
  // No dataset yet: a runtime failure, recorded in the manifest.
  CHECK(run_cli("train-dm --config " + (dir / "ok.json").string() + " --out " + (dir / "run").string()) == 2);
  auto m = nlohmann::json::parse(slurp(dir / "run" / "manifests" / "train-dm.json"));
  CHECK(m["status"] == "failed");
  CHECK(m["error"].get<std::string>().find("gen-data") != std::string::npos);
  CHECK(run_cli("gen-data --config " + (dir / "ok.json").string() + " --out " + (dir / "run").string()) == 0);
  CHECK(fs::exists(dir / "run" / "dataset" / "images.bin"));
}

TEST_CASE("verify-theory writes the closed form") {
  auto dir = scratch("theory");
  auto c = tiny();
  run_stage(Stage::VerifyTheory, c, dir);
  auto t = read_csv(dir / "metrics" / "theory_mc.csv");
  REQUIRE(t.rows.size() == 20);
  const auto ref = make_linear_schedule(1000, 1e-4, 0.02);
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const int step = static_cast<int>(t.number(r, "t"));
    const double expect = err_closed_form({t.number(r, "delta"), step, &ref});
    CHECK(t.number(r, "analytic") == doctest::Approx(expect).epsilon(1e-9));
    CHECK(t.number(r, "alpha_bar") == doctest::Approx(ref.alpha_bar(step)).epsilon(1e-9));
  }
  auto sched = read_csv(dir / "metrics" / "schedule.csv");
  CHECK(sched.rows.size() == 100);
  CHECK(sched.number(0, "beta") == doctest::Approx(1e-4));
  auto m = nlohmann::json::parse(slurp(dir / "manifests" / "verify-theory.json"));
  CHECK(m["status"] == "complete");
  CHECK(m["config_hash"] == config_hash(c));
  CHECK(m["seed"] == 7);
  CHECK(m["version"] == version_string());
  for (const auto& a : m["artifacts"]) CHECK(a["complete"] == true);
}

TEST_CASE("every stage is reproducible") {
  auto a = scratch("det_a"), b = scratch("det_b");
  const auto c = tiny();
  for (auto dir : {a, b})
    for (Stage s : all_stages()) run_stage(s, c, dir);
  auto files = metric_files(a);
  CHECK(files.size() >= 25);
  CHECK(files == metric_files(b));
  for (const auto& f : files) CHECK_MESSAGE(slurp(a / f) == slurp(b / f), f.string());
  for (Stage s : all_stages()) {
    const auto name = "manifests/" + to_string(s) + ".json";
    CHECK_MESSAGE(slurp(a / name) == slurp(b / name), name);
  }
  // The report lists every criterion it can judge from the metrics.
  auto summary = read_csv(a / "metrics" / "summary.csv");
  CHECK(summary.rows.size() == 9);
  for (const auto& row : summary.rows) CHECK(row[2] != "missing");

  // A different seed changes the data.
  auto other = scratch("det_other");
  run_stage(Stage::GenData, tiny(8), other);
  CHECK(slurp(a / "metrics" / "granularity.csv") != slurp(other / "metrics" / "granularity.csv"));
}

TEST_CASE("an artifact interrupted mid-write stays flagged incomplete") {
  auto dir = scratch("partial");
  auto c = tiny();
  run_stage(Stage::GenData, c, dir);
  // A file where the metrics directory should be makes every CSV write fail.
  fs::remove_all(dir / "metrics");
  write(dir / "metrics", "");
  CHECK_THROWS(run_stage(Stage::VerifyTheory, c, dir));
  auto m = nlohmann::json::parse(slurp(dir / "manifests" / "verify-theory.json"));
  CHECK(m["status"] == "failed");
  REQUIRE(m["artifacts"].size() == 1);
  CHECK(m["artifacts"][0]["complete"] == false);
}

TEST_CASE("stage names") {
  for (Stage s : all_stages()) CHECK(stage_from_string(to_string(s)) == s);
  CHECK(all_stages().size() == 7);
  CHECK_THROWS(stage_from_string("train"));
}
