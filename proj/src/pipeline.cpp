#include "diti/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "diti/checkpoint.hpp"
#include "diti/ddpm.hpp"
#include "diti/error.hpp"
#include "diti/eval.hpp"
#include "diti/generate.hpp"
#include "diti/random.hpp"
#include "diti/theory.hpp"

#ifndef DITI_VERSION
#define DITI_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace diti {

// ---- configuration ----------------------------------------------------------

namespace {

// Walks a JSON object, remembering the dotted path for diagnostics and the
// keys it consumed so leftovers can be reported.
class Fields {
 public:
  Fields(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(where("") + "expected an object");
  }

  template <class T>
  void read(const std::string& key, T& out) {
    seen_.insert(key);
    if (!obj_.contains(key)) return;
    const json& v = obj_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError("expected true or false");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError("expected an integer");
        if constexpr (std::is_unsigned_v<T>)
          if (v.is_number_integer() && !v.is_number_unsigned()) throw ConfigError("expected a non-negative integer");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError("expected a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError("expected a string");
      }
      out = v.get<T>();
    } catch (const ConfigError& e) {
      throw ConfigError(where(key) + e.what());
    } catch (const json::exception& e) {
      throw ConfigError(where(key) + "wrong type (" + e.what() + ")");
    }
  }

  Fields child(const std::string& key) {
    seen_.insert(key);
    static const json empty = json::object();
    return Fields(obj_.contains(key) ? obj_.at(key) : empty, path_.empty() ? key : path_ + "." + key);
  }

  bool has(const std::string& key) const { return obj_.contains(key); }

  void finish() const {
    for (const auto& [key, value] : obj_.items())
      if (!seen_.count(key)) throw ConfigError(where(key) + "unknown field");
  }

  std::string where(const std::string& key) const {
    std::string full = path_.empty() ? key : (key.empty() ? path_ : path_ + "." + key);
    return "field '" + full + "': ";
  }

 private:
  const json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

// Line of the last component of a dotted field path in the source text,
// found by scanning for each quoted key in turn; 0 when not found.
int line_of_field(const std::string& text, const std::string& dotted) {
  std::size_t pos = 0;
  std::stringstream ss(dotted);
  for (std::string part; std::getline(ss, part, '.');) {
    auto at = text.find("\"" + part + "\"", pos);
    if (at == std::string::npos) return 0;
    pos = at;
  }
  return 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(pos), '\n'));
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  Fields root(j, "");
  if (!root.has("seed")) throw ConfigError("field 'seed': required");
  root.read("seed", c.seed);
  root.read("out_dir", c.out_dir);
  root.read("budget_seconds", c.budget_seconds);
  root.read("sampling_steps", c.sampling_steps);

  auto sched = root.child("schedule");
  sched.read("T", c.T);
  sched.read("beta_start", c.beta_start);
  sched.read("beta_end", c.beta_end);
  sched.finish();

  auto data = root.child("dataset");
  data.read("spec_file", c.dataset_spec_file);
  data.read("n_samples", c.n_samples);
  data.finish();

  auto dm = root.child("dm");
  dm.read("hidden", c.dm_hidden);
  dm.read("sigma_data", c.sigma_data);
  dm.read("lr", c.dm_optim.lr);
  dm.read("iterations", c.dm_optim.iterations);
  dm.read("batch_size", c.dm_optim.batch_size);
  dm.finish();

  auto dt = root.child("diti");
  dt.read("encoder_hidden", c.net.encoder_hidden);
  dt.read("decoder_hidden", c.net.decoder_hidden);
  dt.read("split_encoder", c.net.split_encoder);
  std::string kind = to_string(c.partition);
  dt.read("partition", kind);
  try {
    c.partition = partition_kind_from_string(kind);
  } catch (const ContractError& e) {
    throw ConfigError(dt.where("partition") + e.what());
  }
  dt.read("k", c.k);
  dt.read("d", c.d);
  dt.read("lr", c.diti_optim.lr);
  dt.read("iterations", c.diti_optim.iterations);
  dt.read("batch_size", c.diti_optim.batch_size);
  dt.read("detach", c.detach);
  dt.read("ablation_k1", c.ablation_k1);
  dt.read("sufficiency_seeds", c.sufficiency_seeds);
  dt.read("sufficiency_iterations", c.sufficiency_iterations);
  dt.finish();

  auto th = root.child("theory");
  th.read("mc_samples", c.mc_samples);
  th.read("taus", c.taus);
  th.read("profile_pairs", c.profile_pairs);
  th.finish();

  auto pr = root.child("probe");
  pr.read("iterations", c.probe_iterations);
  pr.read("lr", c.probe_lr);
  pr.read("l2", c.probe_l2);
  pr.finish();

  auto gen = root.child("generate");
  gen.read("sparse_budget", c.sparse_budget);
  gen.read("lambdas", c.lambdas);
  gen.read("rows", c.generate_rows);
  gen.finish();

  root.finish();
  return c;
}

json config_to_json(const ExperimentConfig& c) {
  return {
      {"seed", c.seed},
      {"out_dir", c.out_dir},
      {"budget_seconds", c.budget_seconds},
      {"sampling_steps", c.sampling_steps},
      {"schedule", {{"T", c.T}, {"beta_start", c.beta_start}, {"beta_end", c.beta_end}}},
      {"dataset", {{"spec_file", c.dataset_spec_file}, {"n_samples", c.n_samples}}},
      {"dm",
       {{"hidden", c.dm_hidden},
        {"sigma_data", c.sigma_data},
        {"lr", c.dm_optim.lr},
        {"iterations", c.dm_optim.iterations},
        {"batch_size", c.dm_optim.batch_size}}},
      {"diti",
       {{"encoder_hidden", c.net.encoder_hidden},
        {"decoder_hidden", c.net.decoder_hidden},
        {"split_encoder", c.net.split_encoder},
        {"partition", to_string(c.partition)},
        {"k", c.k},
        {"d", c.d},
        {"lr", c.diti_optim.lr},
        {"iterations", c.diti_optim.iterations},
        {"batch_size", c.diti_optim.batch_size},
        {"detach", c.detach},
        {"ablation_k1", c.ablation_k1},
        {"sufficiency_seeds", c.sufficiency_seeds},
        {"sufficiency_iterations", c.sufficiency_iterations}}},
      {"theory", {{"mc_samples", c.mc_samples}, {"taus", c.taus}, {"profile_pairs", c.profile_pairs}}},
      {"probe", {{"iterations", c.probe_iterations}, {"lr", c.probe_lr}, {"l2", c.probe_l2}}},
      {"generate", {{"sparse_budget", c.sparse_budget}, {"lambdas", c.lambdas}, {"rows", c.generate_rows}}},
  };
}

void validate(const ExperimentConfig& c) {
  auto check = [](bool ok, const std::string& field, const std::string& what) {
    if (!ok) throw ConfigError("field '" + field + "': " + what);
  };
  check(c.T >= 2, "schedule.T", "must be at least 2");
  check(c.beta_start > 0.0 && c.beta_start <= c.beta_end && c.beta_end < 1.0, "schedule.beta_start",
        "need 0 < beta_start <= beta_end < 1");
  check(c.n_samples >= 20, "dataset.n_samples", "must be at least 20");
  if (!c.dataset_spec_file.empty())
    check(fs::exists(c.dataset_spec_file), "dataset.spec_file", "'" + c.dataset_spec_file + "' does not exist");
  check(!c.dm_hidden.empty(), "dm.hidden", "needs at least one layer");
  check(c.sigma_data > 0.0, "dm.sigma_data", "must be positive");
  for (const auto& [name, o] : {std::pair{"dm", c.dm_optim}, std::pair{"diti", c.diti_optim}}) {
    check(o.lr > 0.0, std::string(name) + ".lr", "must be positive");
    check(o.iterations >= 1, std::string(name) + ".iterations", "must be positive");
    check(o.batch_size >= 1, std::string(name) + ".batch_size", "must be positive");
  }
  try {
    make_partition(c.partition, c.k, c.d, c.T);
  } catch (const ContractError& e) {
    throw ConfigError(std::string("field 'diti.k': ") + e.what());
  }
  check(c.sufficiency_seeds >= 0, "diti.sufficiency_seeds", "must be non-negative");
  check(c.sufficiency_iterations >= 1, "diti.sufficiency_iterations", "must be positive");
  check(c.sampling_steps >= 2 && c.sampling_steps <= c.T + 1, "sampling_steps", "must lie in [2, T + 1]");
  check(c.mc_samples >= 1, "theory.mc_samples", "must be positive");
  check(!c.taus.empty(), "theory.taus", "needs at least one value");
  for (double t : c.taus) check(t > 0.0 && t < 0.5, "theory.taus", "values must lie in (0, 0.5)");
  check(c.profile_pairs >= 1, "theory.profile_pairs", "must be positive");
  check(c.probe_iterations >= 1 && c.probe_lr > 0.0 && c.probe_l2 >= 0.0, "probe", "bad probe settings");
  check(c.sparse_budget >= 1 && c.sparse_budget <= c.d, "generate.sparse_budget", "must lie in [1, d]");
  check(c.generate_rows >= 2, "generate.rows", "must be at least 2");
  check(c.budget_seconds > 0.0, "budget_seconds", "must be positive");
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path.string() + ": cannot open");
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    const auto upto = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
    const auto line = 1 + std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(upto), '\n');
    const auto nl = text.rfind('\n', upto == 0 ? 0 : upto - 1);
    const auto col = upto - (nl == std::string::npos ? 0 : nl + 1) + 1;
    throw ConfigError(path.string() + ":" + std::to_string(line) + ":" + std::to_string(col) + ": invalid JSON");
  }
  try {
    auto c = config_from_json(j);
    validate(c);
    return c;
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    int line = 0;
    if (msg.rfind("field '", 0) == 0) {
      auto end = msg.find('\'', 7);
      if (end != std::string::npos) line = line_of_field(text, msg.substr(7, end - 7));
    }
    throw ConfigError(path.string() + (line ? ":" + std::to_string(line) : std::string()) + ": " + msg);
  }
}

std::string config_hash(const ExperimentConfig& c) { return hex64(fnv1a(config_to_json(c).dump())); }

std::string version_string() { return DITI_VERSION; }

// ---- stages -------------------------------------------------------------------

const std::vector<Stage>& all_stages() {
  static const std::vector<Stage> stages{Stage::GenData, Stage::VerifyTheory, Stage::TrainDm, Stage::TrainDiti,
                                         Stage::Probe,   Stage::Generate,     Stage::Report};
  return stages;
}

std::string to_string(Stage s) {
  switch (s) {
    case Stage::GenData: return "gen-data";
    case Stage::TrainDm: return "train-dm";
    case Stage::TrainDiti: return "train-diti";
    case Stage::VerifyTheory: return "verify-theory";
    case Stage::Probe: return "probe";
    case Stage::Generate: return "generate";
    case Stage::Report: return "report";
  }
  return "?";
}

Stage stage_from_string(const std::string& name) {
  for (Stage s : all_stages())
    if (to_string(s) == name) return s;
  throw ContractError("unknown stage '" + name + "'");
}

namespace {

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

// Artifact bookkeeping: each file is registered as incomplete before it is
// written and flipped to complete once closed, and the manifest is rewritten
// at every change.
class Run {
 public:
  Run(Stage stage, const ExperimentConfig& cfg, fs::path dir) : stage_(stage), cfg_(cfg), dir_(std::move(dir)) {
    fs::create_directories(dir_ / "manifests");
    manifest_ = {{"stage", to_string(stage)},
                 {"status", "running"},
                 {"config_hash", config_hash(cfg)},
                 {"seed", cfg.seed},
                 {"version", version_string()},
                 {"budget_seconds", cfg.budget_seconds},
                 {"artifacts", json::array()}};
    flush();
  }

  const fs::path& dir() const { return dir_; }
  fs::path path(const std::string& rel) const { return dir_ / rel; }

  template <class Fn>
  void artifact(const std::string& rel, Fn&& write) {
    const auto slot = manifest_["artifacts"].size();
    manifest_["artifacts"].push_back({{"path", rel}, {"complete", false}});
    flush();
    fs::path p = dir_ / rel;
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    write(p);
    manifest_["artifacts"][slot]["complete"] = true;
    flush();
  }

  void text(const std::string& rel, const std::string& content) {
    artifact(rel, [&](const fs::path& p) {
      std::ofstream out(p, std::ios::binary);
      out << content;
      if (!out) throw std::runtime_error("cannot write " + p.string());
    });
  }

  void finish(const std::string& status, const std::string& error = "") {
    manifest_["status"] = status;
    if (!error.empty()) manifest_["error"] = error;
    flush();
  }

 private:
  void flush() const {
    std::ofstream out(dir_ / "manifests" / (to_string(stage_) + ".json"), std::ios::binary);
    out << manifest_.dump(2) << '\n';
  }

  Stage stage_;
  const ExperimentConfig& cfg_;
  fs::path dir_;
  json manifest_;
};

VarianceSchedule run_schedule(const ExperimentConfig& c) { return make_linear_schedule(c.T, c.beta_start, c.beta_end); }

SyntheticSpec dataset_spec(const ExperimentConfig& c) {
  if (c.dataset_spec_file.empty()) return reference_synthetic_spec(derive_seed(c.seed, "dataset"), c.n_samples);
  std::ifstream in(c.dataset_spec_file, std::ios::binary);
  std::stringstream buf;
  buf << in.rdbuf();
  return spec_from_json(buf.str());
}

std::vector<std::string> attribute_names(const SyntheticSpec& spec) {
  std::vector<std::string> out;
  for (const auto& f : spec.factors) out.push_back(f.name);
  return out;
}

void need(const fs::path& p, const std::string& stage) {
  if (!fs::exists(p)) throw std::runtime_error(p.string() + " is missing; run '" + stage + "' first");
}

// Granularity distances per attribute, ordered as in the spec.
std::vector<std::vector<double>> profile(const ExperimentConfig& c, const SyntheticSpec& spec) {
  return granularity_profile(spec, c.profile_pairs, derive_seed(c.seed, "granularity"));
}

// Attribute indices sorted by granularity rank.
std::vector<std::size_t> by_rank(const SyntheticSpec& spec) {
  std::vector<std::size_t> order(spec.factors.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return spec.factors[a].granularity_rank < spec.factors[b].granularity_rank; });
  return order;
}

constexpr double kSufficiencyTau = 0.1;

DitiTrainConfig diti_train_config(const ExperimentConfig& c, const std::string& tag, int iterations) {
  DitiTrainConfig t;
  t.iterations = iterations;
  t.batch_size = c.diti_optim.batch_size;
  t.adam.lr = c.diti_optim.lr;
  t.detach = c.detach;
  t.seed = derive_seed(c.seed, tag);
  return t;
}

// Held-out objective and g = 0 baseline per time-step, `reps` noise draws each.
struct PerStep {
  std::vector<double> diti, baseline;
};

PerStep heldout_per_step(const X0Predictor& dm, const EncoderDecoder& ed, const Tensor& x0, std::uint64_t seed,
                         int reps, const Tensor* z = nullptr) {
  const int T = dm.schedule().steps();
  PerStep out{std::vector<double>(static_cast<std::size_t>(T)), std::vector<double>(static_cast<std::size_t>(T))};
  Tensor feats = z ? *z : encode_all(ed, x0);
  std::vector<int> ts(x0.dim(0));
  for (int t = 1; t <= T; ++t) {
    std::fill(ts.begin(), ts.end(), t);
    for (int r = 0; r < reps; ++r) {
      Rng rng(derive_seed(derive_seed(seed, static_cast<std::uint64_t>(t)), static_cast<std::uint64_t>(r)));
      auto rows = diti_loss_rows(dm, ed, x0, ts, rng.gaussian_tensor(x0.shape()), &feats);
      const double n = static_cast<double>(rows.diti.size() * static_cast<std::size_t>(reps));
      out.diti[static_cast<std::size_t>(t - 1)] += std::accumulate(rows.diti.begin(), rows.diti.end(), 0.0) / n;
      out.baseline[static_cast<std::size_t>(t - 1)] +=
          std::accumulate(rows.baseline.begin(), rows.baseline.end(), 0.0) / n;
    }
  }
  return out;
}

std::string deciles_csv(const PerStep& p) {
  const auto T = p.diti.size();
  std::ostringstream os;
  os << "decile,t_lo,t_hi,diti,baseline,ratio\n";
  for (std::size_t dcl = 0; dcl < 10; ++dcl) {
    const std::size_t lo = dcl * T / 10, hi = (dcl + 1) * T / 10;
    double a = 0.0, b = 0.0;
    for (std::size_t i = lo; i < hi; ++i) {
      a += p.diti[i];
      b += p.baseline[i];
    }
    os << dcl + 1 << ',' << lo + 1 << ',' << hi << ',' << num(a) << ',' << num(b) << ',' << num(b > 0 ? a / b : 1.0)
       << '\n';
  }
  return os.str();
}

std::string series_csv(const std::string& header, const std::vector<double>& v, int first = 1) {
  std::ostringstream os;
  os << header << '\n';
  for (std::size_t i = 0; i < v.size(); ++i) os << static_cast<int>(i) + first << ',' << num(v[i]) << '\n';
  return os.str();
}

// ---- gen-data ---------------------------------------------------------------

void gen_data(Run& run, const ExperimentConfig& c) {
  auto spec = dataset_spec(c);
  auto ds = generate_dataset(spec);
  run.artifact("dataset", [&](const fs::path& p) { save_dataset(ds, p); });

  auto prof = profile(c, spec);
  std::ostringstream g;
  g << "attribute,rank,mean,min,median,max\n";
  for (std::size_t i = 0; i < prof.size(); ++i) {
    auto v = prof[i];
    std::sort(v.begin(), v.end());
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    g << spec.factors[i].name << ',' << spec.factors[i].granularity_rank << ',' << num(mean) << ',' << num(v.front())
      << ',' << num(v[v.size() / 2]) << ',' << num(v.back()) << '\n';
  }
  run.text("metrics/granularity.csv", g.str());
  std::ostringstream s;
  s << "split,count\ntrain," << ds.train.size() << "\ntest," << ds.test.size() << '\n';
  run.text("metrics/dataset_split.csv", s.str());
}

// ---- verify-theory ----------------------------------------------------------

void verify_theory(Run& run, const ExperimentConfig& c) {
  // The loss checks use the 1000-step reference schedule; loss times are
  // also reported on the run's own schedule.
  const auto ref = make_linear_schedule(1000, 1e-4, 0.02);
  const auto own = run_schedule(c);
  {
    std::ostringstream os;
    write_schedule_csv(os, own);
    run.text("metrics/schedule.csv", os.str());
  }

  // Ten signal levels from abar = 0.999 down to 0.01, in 1 and 64 dimensions.
  std::ostringstream mc;
  mc << "dim,delta,t,alpha_bar,analytic,monte_carlo,halfwidth,within\n";
  Rng rng(derive_seed(c.seed, "theory-pairs"));
  const double zs[3] = {0.5, 1.0, 1.5};
  for (std::size_t dim : {std::size_t{1}, std::size_t{64}})
    for (int k = 0; k < 10; ++k) {
      const double target = std::exp(std::log(0.999) + (std::log(0.01) - std::log(0.999)) * k / 9.0);
      int t = 1;
      for (int u = 1; u <= ref.steps(); ++u)
        if (std::abs(ref.alpha_bar(u) - target) < std::abs(ref.alpha_bar(t) - target)) t = u;
      const double ab = ref.alpha_bar(t);
      // Distance putting the projected gap at z noise standard deviations.
      const double delta = 2.0 * zs[k % 3] * std::sqrt((1.0 - ab) / ab);
      Tensor x(Shape{dim}), y(Shape{dim}), dir = rng.gaussian_tensor({dim});
      double nrm = 0.0;
      for (float v : dir.values()) nrm += static_cast<double>(v) * v;
      nrm = std::sqrt(nrm);
      auto xv = x.mutable_values(), yv = y.mutable_values();
      for (std::size_t i = 0; i < dim; ++i) {
        xv[i] = static_cast<float>(rng.uniform() - 0.5);
        yv[i] = static_cast<float>(xv[i] + delta * dir.at(i) / nrm);
      }
      double exact = 0.0;
      for (std::size_t i = 0; i < dim; ++i) exact += (static_cast<double>(yv[i]) - xv[i]) * (static_cast<double>(yv[i]) - xv[i]);
      exact = std::sqrt(exact);
      const double p = err_closed_form({exact, t, &ref});
      const double est = ovl_monte_carlo(x, y, t, ref, c.mc_samples, derive_seed(c.seed, "mc-" + std::to_string(dim * 100 + k)));
      const double hw = binomial_halfwidth(p, c.mc_samples);
      mc << dim << ',' << num(exact) << ',' << t << ',' << num(ab) << ',' << num(p) << ',' << num(est) << ','
         << num(hw) << ',' << (std::abs(est - p) <= hw ? 1 : 0) << '\n';
    }
  run.text("metrics/theory_mc.csv", mc.str());

  std::ostringstream mono;
  mono << "delta,increasing_steps,steps,strict\n";
  Rng drng(derive_seed(c.seed, "theory-monotone"));
  for (int k = 0; k < 50; ++k) {
    const double delta = std::exp(std::log(0.01) + drng.uniform() * (std::log(0.7) - std::log(0.01)));
    int inc = 0;
    double prev = err_closed_form({delta, 1, &ref});
    for (int t = 2; t <= ref.steps(); ++t) {
      const double e = err_closed_form({delta, t, &ref});
      inc += e > prev ? 1 : 0;
      prev = e;
    }
    mono << num(delta) << ',' << inc << ',' << ref.steps() - 1 << ',' << (inc == ref.steps() - 1 ? 1 : 0) << '\n';
  }
  run.text("metrics/theory_monotone.csv", mono.str());

  auto spec = dataset_spec(c);
  auto prof = profile(c, spec);
  auto order = by_rank(spec);
  std::ostringstream dom;
  dom << "finer,coarser,dominates\n";
  for (std::size_t i = 0; i + 1 < order.size(); ++i)
    dom << spec.factors[order[i]].name << ',' << spec.factors[order[i + 1]].name << ','
        << (stochastic_dominance(prof[order[i + 1]], prof[order[i]]) ? 1 : 0) << '\n';
  run.text("metrics/theory_dominance.csv", dom.str());

  std::ostringstream lt;
  lt << "schedule_T,tau,attribute,rank,loss_time\n";
  for (const auto* s : {&ref, &own})
    for (double tau : c.taus)
      for (std::size_t a : order) {
        auto t = find_loss_time({tau, prof[a]}, *s);
        lt << s->steps() << ',' << num(tau) << ',' << spec.factors[a].name << ',' << spec.factors[a].granularity_rank
           << ',' << (t ? std::to_string(*t) : std::string("none")) << '\n';
      }
  run.text("metrics/loss_times.csv", lt.str());
}

// ---- train-dm -----------------------------------------------------------------

void train_dm_stage(Run& run, const ExperimentConfig& c) {
  need(run.path("dataset"), "gen-data");
  auto ds = load_dataset(run.path("dataset"));
  DenoiserConfig dc;
  dc.hidden = c.dm_hidden;
  dc.sigma_data = c.sigma_data;
  DenoiserModel dm(ds.spec.pixels(), run_schedule(c), dc, derive_seed(c.seed, "dm"));
  DmTrainConfig tc;
  tc.iterations = c.dm_optim.iterations;
  tc.batch_size = c.dm_optim.batch_size;
  tc.adam.lr = c.dm_optim.lr;
  tc.seed = derive_seed(c.seed, "train-dm");
  auto train = gather_rows(ds.images, ds.train);
  auto log = train_dm(dm, train, tc);
  run.artifact("dm.ckpt", [&](const fs::path& p) { dm.save(p); });
  run.text("metrics/dm_train_loss.csv", series_csv("iteration,loss", log.loss));
  run.text("metrics/dm_per_t.csv", series_csv("t,loss", log.per_t_loss));

  auto test = gather_rows(ds.images, ds.test);
  auto seq = make_sampling_sequence(c.T, c.sampling_steps);
  auto rec = ddim_sample(dm, ddim_invert(dm, test, seq), seq);
  auto res = relative_residuals(rec, test);
  std::ostringstream inv;
  inv << "steps,rows,mean,max\n"
      << c.sampling_steps << ',' << res.size() << ','
      << num(std::accumulate(res.begin(), res.end(), 0.0) / static_cast<double>(res.size())) << ','
      << num(*std::max_element(res.begin(), res.end())) << '\n';
  run.text("metrics/inversion.csv", inv.str());

  // eps-space and weighted x0-space residuals on 100 random triples.
  std::ostringstream eq;
  eq << "t,eps_residual,x0_weighted,relative_gap\n";
  Rng rng(derive_seed(c.seed, "eps-x0"));
  const auto& s = dm.schedule();
  for (int k = 0; k < 100; ++k) {
    const auto row = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(ds.images.dim(0)) - 1));
    std::vector<std::size_t> one{row};
    Tensor x0 = gather_rows(ds.images, one);
    Tensor eps = rng.gaussian_tensor(x0.shape());
    const int t = rng.uniform_int(1, s.steps());
    std::vector<int> ts{t};
    Tensor xt = q_sample(x0, ts, eps, s);
    Tensor x0_hat;
    {
      NoGradGuard ng;
      x0_hat = dm.predict_x0(xt, ts);
    }
    auto eps_hat = eps_from_x0(xt.values(), x0_hat.values(), t, s);
    // eps is recovered from x_t itself so both sides see the same float input.
    auto eps_true = eps_from_x0(xt.values(), x0.values(), t, s);
    double le = 0.0, lx = 0.0;
    for (std::size_t i = 0; i < eps_hat.size(); ++i) {
      le += (eps_true[i] - eps_hat[i]) * (eps_true[i] - eps_hat[i]);
      const double d = static_cast<double>(x0.at(i)) - x0_hat.at(i);
      lx += d * d;
    }
    lx *= s.snr(t);
    eq << t << ',' << num(le) << ',' << num(lx) << ',' << num(std::abs(le - lx) / std::max(lx, 1e-300)) << '\n';
  }
  run.text("metrics/eps_x0.csv", eq.str());
}

// ---- train-diti -------------------------------------------------------------

// Oracle features: attribute a's factor in the first free dim of subset[a].
Tensor oracle_features(const Dataset& ds, const PartitionSpec& part, const std::vector<int>& subset) {
  Tensor z(Shape{ds.records.size(), static_cast<std::size_t>(part.d)});
  auto v = z.mutable_values();
  std::vector<int> used(static_cast<std::size_t>(part.k), 0);
  std::vector<int> col(subset.size());
  for (std::size_t a = 0; a < subset.size(); ++a) {
    const auto j = static_cast<std::size_t>(subset[a] - 1);
    if (used[j] >= part.subset_dims[j]) throw ContractError("oracle features: subset " + std::to_string(j + 1) + " is full");
    col[a] = part.dim_offset(subset[a]) + used[j]++;
  }
  const auto d = static_cast<std::size_t>(part.d);
  for (std::size_t r = 0; r < ds.records.size(); ++r)
    for (std::size_t a = 0; a < subset.size(); ++a)
      v[r * d + static_cast<std::size_t>(col[a])] = static_cast<float>(ds.records[r].factors[a]);
  return z;
}

void train_diti_stage(Run& run, const ExperimentConfig& c) {
  need(run.path("dataset"), "gen-data");
  need(run.path("dm.ckpt"), "train-dm");
  auto ds = load_dataset(run.path("dataset"));
  auto dm = DenoiserModel::load(run.path("dm.ckpt"));
  if (dm.schedule().steps() != c.T) throw ContractError("dm.ckpt was trained with a different T");
  auto train = gather_rows(ds.images, ds.train), test = gather_rows(ds.images, ds.test);
  const auto pixels = ds.spec.pixels();

  auto fit = [&](int k, const std::string& name) {
    EncoderDecoder ed(pixels, make_partition(c.partition, k, c.d, c.T), c.net, derive_seed(c.seed, name + "-init"));
    auto log = train_diti(dm, ed, train, diti_train_config(c, name + "-train", c.diti_optim.iterations));
    run.artifact(name + ".ckpt", [&](const fs::path& p) { ed.save(p, "dm.ckpt"); });
    run.text("metrics/" + name + "_train_loss.csv", series_csv("iteration,loss", log.loss));
    auto held = heldout_per_step(dm, ed, test, derive_seed(c.seed, "heldout"), 4);
    std::ostringstream pt;
    pt << "t,diti,baseline\n";
    for (std::size_t i = 0; i < held.diti.size(); ++i)
      pt << i + 1 << ',' << num(held.diti[i]) << ',' << num(held.baseline[i]) << '\n';
    run.text("metrics/" + name + "_per_t.csv", pt.str());
    run.text("metrics/" + name + "_deciles.csv", deciles_csv(held));
    return ed;
  };
  {
    // Guided round trip of the test split: the error budget for generation.
    auto ed = fit(c.k, "diti");
    auto res = relative_residuals(reconstruct({dm, ed}, test, make_sampling_sequence(c.T, c.sampling_steps)), test);
    std::ostringstream os;
    os << "steps,rows,mean,max\n"
       << c.sampling_steps << ',' << res.size() << ','
       << num(std::accumulate(res.begin(), res.end(), 0.0) / static_cast<double>(res.size())) << ','
       << num(*std::max_element(res.begin(), res.end())) << '\n';
    run.text("metrics/guided_inversion.csv", os.str());
  }
  if (c.ablation_k1) fit(1, "diti_k1");

  if (c.sufficiency_seeds > 0) {
    // Granularity-matched placement from the loss times on this schedule, and
    // the same subsets handed out in reverse attribute order.
    auto part = make_partition(c.partition, c.k, c.d, c.T);
    auto prof = profile(c, ds.spec);
    auto lost = loss_time_subsets(part, prof, dm.schedule(), kSufficiencyTau);
    std::vector<int> matched;
    for (const auto& s : lost) matched.push_back(s.value_or(part.k));
    std::vector<int> scrambled(matched.rbegin(), matched.rend());
    if (scrambled == matched) std::rotate(scrambled.begin(), scrambled.begin() + 1, scrambled.end());
    Tensor zm = oracle_features(ds, part, matched), zs = oracle_features(ds, part, scrambled);
    Tensor zm_tr = gather_rows(zm, ds.train), zm_te = gather_rows(zm, ds.test);
    Tensor zs_tr = gather_rows(zs, ds.train), zs_te = gather_rows(zs, ds.test);
    std::ostringstream os;
    os << "seed,matched,scrambled\n";
    auto placement = [&](const std::vector<int>& v) {
      std::string s;
      for (int j : v) s += (s.empty() ? "" : " ") + std::to_string(j);
      return s;
    };
    for (int s = 0; s < c.sufficiency_seeds; ++s) {
      double loss[2];
      const Tensor* feats[2][2] = {{&zm_tr, &zm_te}, {&zs_tr, &zs_te}};
      for (int v = 0; v < 2; ++v) {
        const std::string tag = "sufficiency-" + std::to_string(s);
        EncoderDecoder ed(pixels, part, c.net, derive_seed(c.seed, tag + "-init"));
        train_diti(dm, ed, train, diti_train_config(c, tag + "-train", c.sufficiency_iterations), feats[v][0]);
        auto held = heldout_per_step(dm, ed, test, derive_seed(c.seed, "heldout"), 1, feats[v][1]);
        loss[v] = std::accumulate(held.diti.begin(), held.diti.end(), 0.0);
      }
      os << s << ',' << num(loss[0]) << ',' << num(loss[1]) << '\n';
    }
    run.text("metrics/sufficiency.csv", os.str());
    run.text("metrics/sufficiency_placement.csv",
             "variant,subsets\nmatched," + placement(matched) + "\nscrambled," + placement(scrambled) + "\n");
  }
}

// ---- probe ----------------------------------------------------------------------

std::string alignment_csv(const Alignment& al, const std::vector<std::string>& names) {
  std::ostringstream os;
  os << "subset";
  for (const auto& n : names) os << ',' << n;
  os << '\n';
  for (std::size_t j = 0; j < al.r2.size(); ++j) {
    os << j + 1;
    for (double v : al.r2[j]) os << ',' << num(v);
    os << '\n';
  }
  return os.str();
}

void probe_stage(Run& run, const ExperimentConfig& c) {
  need(run.path("dataset"), "gen-data");
  need(run.path("diti.ckpt"), "train-diti");
  auto ds = load_dataset(run.path("dataset"));
  auto names = attribute_names(ds.spec);
  auto ytr = factor_columns(ds.records, ds.train), yte = factor_columns(ds.records, ds.test);
  ProbeConfig pc;
  pc.iterations = c.probe_iterations;
  pc.learning_rate = c.probe_lr;
  pc.l2 = c.probe_l2;
  auto probe = [&](const Tensor& feats) {
    return linear_probe(gather_rows(feats, ds.train), ytr, gather_rows(feats, ds.test), yte, names,
                        ProbeTask::Classify, pc);
  };
  auto write = [&](const std::string& rel, const ProbeResult& r) {
    std::ostringstream os;
    write_probe_csv(os, r);
    run.text(rel, os.str());
  };

  auto ed = EncoderDecoder::load(run.path("diti.ckpt"));
  Tensor z = encode_all(ed, ds.images);
  auto pd = probe(z);
  auto pp = probe(ds.images);
  write("metrics/probe_diti.csv", pd);
  write("metrics/probe_pixel.csv", pp);
  std::optional<ProbeResult> pk;
  if (fs::exists(run.path("diti_k1.ckpt"))) {
    pk = probe(encode_all(EncoderDecoder::load(run.path("diti_k1.ckpt")), ds.images));
    write("metrics/probe_k1.csv", *pk);
  }
  std::ostringstream sum;
  sum << "attribute,diti_ap,pixel_ap,k1_ap\n";
  for (std::size_t i = 0; i < names.size(); ++i)
    sum << names[i] << ',' << num(pd.attributes[i].ap) << ',' << num(pp.attributes[i].ap) << ','
        << num(pk ? pk->attributes[i].ap : std::nan("")) << '\n';
  sum << "mean," << num(pd.mean_ap()) << ',' << num(pp.mean_ap()) << ',' << num(pk ? pk->mean_ap() : std::nan(""))
      << '\n';
  run.text("metrics/probe_summary.csv", sum.str());

  std::vector<double> weights;
  for (const auto& a : pd.attributes) weights.insert(weights.end(), a.weights.begin(), a.weights.end());
  {
    std::ostringstream os;
    auto bins = histogram(weights, 20);
    write_histogram_csv(os, bins);
    run.text("metrics/probe_weight_histogram.csv", os.str());
  }

  auto al = subset_alignment(z, ed.partition(), ds.records, ds.train, ds.test);
  run.text("metrics/alignment.csv", alignment_csv(al, names));
  auto dm_sched = run_schedule(c);
  auto lost = loss_time_subsets(ed.partition(), profile(c, ds.spec), dm_sched, kSufficiencyTau);
  std::vector<double> ranks, best;
  std::ostringstream os;
  os << "attribute,rank,best_subset,loss_time_subset\n";
  for (std::size_t i = 0; i < names.size(); ++i) {
    ranks.push_back(ds.spec.factors[i].granularity_rank);
    best.push_back(al.best_subset[i]);
    os << names[i] << ',' << ds.spec.factors[i].granularity_rank << ',' << al.best_subset[i] << ','
       << (lost[i] ? std::to_string(*lost[i]) : std::string("none")) << '\n';
  }
  run.text("metrics/alignment_best.csv", os.str());
  const bool constant = std::adjacent_find(best.begin(), best.end(), std::not_equal_to<>()) == best.end();
  const double rho = constant ? 0.0 : spearman_rho(ranks, best);
  const double p = constant ? 1.0 : spearman_permutation_p(best, ranks, 1000, derive_seed(c.seed, "alignment-perm"));
  run.text("metrics/alignment_test.csv", "spearman_rho,p_value\n" + num(rho) + "," + num(p) + "\n");
}

// ---- generate -------------------------------------------------------------------

void generate_stage(Run& run, const ExperimentConfig& c, const StageOptions& opts) {
  need(run.path("dataset"), "gen-data");
  need(run.path("dm.ckpt"), "train-dm");
  need(run.path("diti.ckpt"), "train-diti");
  need(run.path("metrics/guided_inversion.csv"), "train-diti");
  const bool interp = opts.generate_mode == "all" || opts.generate_mode == "interpolate";
  const bool manip = opts.generate_mode == "all" || opts.generate_mode == "manipulate";
  if (!interp && !manip) throw ContractError("generate: unknown mode '" + opts.generate_mode + "'");
  auto ds = load_dataset(run.path("dataset"));
  auto dm = DenoiserModel::load(run.path("dm.ckpt"));
  auto ed = EncoderDecoder::load(run.path("diti.ckpt"));
  const Models m{dm, ed};
  const auto& part = ed.partition();
  for (int j : opts.subsets)
    if (j < 1 || j > part.k) throw ContractError("generate: subset " + std::to_string(j) + " out of range");
  const auto seq = make_sampling_sequence(c.T, c.sampling_steps);
  // Same M as the recorded inversion, so the bound applies.
  const auto inv = read_csv(run.path("metrics/guided_inversion.csv"));
  if (inv.number(0, "steps") != c.sampling_steps)
    throw ContractError("generate: sampling_steps differs from the recorded inversion");
  const double bound = inv.number(0, "max");
  const int side = ds.spec.image_side;

  // The first rows of the test split, paired with the next ones.
  const auto n = std::min<std::size_t>(static_cast<std::size_t>(c.generate_rows), ds.test.size() / 2);
  std::vector<std::size_t> ia(ds.test.begin(), ds.test.begin() + static_cast<std::ptrdiff_t>(n));
  std::vector<std::size_t> ib(ds.test.begin() + static_cast<std::ptrdiff_t>(n),
                              ds.test.begin() + static_cast<std::ptrdiff_t>(2 * n));
  Tensor x = gather_rows(ds.images, ia), y = gather_rows(ds.images, ib);
  auto rec = reconstruct(m, x, seq);

  std::vector<std::vector<bool>> masks;
  for (std::size_t a = 1; a <= ds.spec.factors.size(); ++a) masks.push_back(footprint(ds.spec, static_cast<int>(a)));
  auto max_of = [](const std::vector<double>& v) { return *std::max_element(v.begin(), v.end()); };
  auto grid = [&](const std::string& rel, const std::vector<Tensor>& rows) {
    Tensor g(Shape{rows.size() * n, static_cast<std::size_t>(side * side)});
    auto gv = g.mutable_values();
    for (std::size_t r = 0; r < rows.size(); ++r)
      std::copy(rows[r].values().begin(), rows[r].values().end(),
                gv.begin() + static_cast<std::ptrdiff_t>(r * n * static_cast<std::size_t>(side * side)));
    run.artifact(rel, [&](const fs::path& p) { write_pgm_grid(p, g, side, static_cast<int>(n)); });
  };

  // One line per generated image.
  std::ostringstream per;
  per << "mode,target,lambda,row,residual_to_input";
  for (const auto& f : ds.spec.factors) per << ",energy_" << f.name;
  per << '\n';
  auto log_images = [&](const std::string& mode, const std::string& target, double lam, const Tensor& out) {
    auto res = relative_residuals(out, x);
    std::vector<std::vector<double>> e;
    for (const auto& mask : masks) e.push_back(mask_energy_fraction(rec, out, mask));
    for (std::size_t r = 0; r < n; ++r) {
      per << mode << ',' << target << ',' << num(lam) << ',' << r << ',' << num(res[r]);
      for (const auto& col : e) per << ',' << num(col[r]);
      per << '\n';
    }
  };

  std::ostringstream ck;
  ck << "check,value,bound,pass\n";
  ck << "reconstruct_residual," << num(max_of(relative_residuals(rec, x))) << ',' << num(bound) << ','
     << (max_of(relative_residuals(rec, x)) <= bound) << '\n';

  if (interp) {
    std::vector<int> all(static_cast<std::size_t>(part.k));
    std::iota(all.begin(), all.end(), 1);
    const double cf0 = max_of(relative_residuals(counterfactual(m, x, y, all, 0.0, seq), x));
    ck << "counterfactual_lambda0_residual," << num(cf0) << ',' << num(bound) << ',' << (cf0 <= bound) << '\n';

    // Dims outside a one-subset interpolation are copied bit-for-bit.
    Tensor zx = encode_all(ed, x), zy = encode_all(ed, y);
    bool complement_ok = true;
    for (int j = 1; j <= part.k; ++j) {
      std::vector<int> one{j};
      auto zl = lerp_subset(zx, zy, one, part, 0.5);
      const auto lo = static_cast<std::size_t>(part.dim_offset(j));
      const auto hi = lo + static_cast<std::size_t>(part.subset_dims[static_cast<std::size_t>(j - 1)]);
      for (std::size_t i = 0; i < zl.numel(); ++i) {
        const std::size_t col = i % static_cast<std::size_t>(part.d);
        if ((col < lo || col >= hi) && std::memcmp(&zl.values()[i], &zx.values()[i], sizeof(float)) != 0)
          complement_ok = false;
      }
    }
    ck << "lerp_complement_identical," << complement_ok << ",1," << complement_ok << '\n';

    std::vector<std::vector<int>> groups;
    if (opts.subsets.empty())
      for (int j = 1; j <= part.k; ++j) groups.push_back({j});
    else
      groups.push_back(opts.subsets);
    std::vector<Tensor> rows{x, y, rec};
    for (const auto& g : groups) {
      std::string target;
      for (int j : g) target += (target.empty() ? "" : " ") + std::to_string(j);
      auto out = counterfactual(m, x, y, g, 1.0, seq);
      rows.push_back(out);
      log_images("interpolate", target, 1.0, out);
    }
    // Rows: x, y, reconstruction of x, then each subset swap.
    grid("images/counterfactual.pgm", rows);
  }

  if (manip) {
    Tensor z_tr = encode_all(ed, gather_rows(ds.images, ds.train));
    auto stats = feature_stats(z_tr);
    std::ostringstream sp;
    sp << "attribute,budget,zero_weights,expected_zero\n";
    double man0 = 0.0;
    bool zeros_ok = true;
    for (std::size_t a = 0; a < ds.spec.factors.size(); ++a) {
      std::vector<int> labels;
      for (auto r : ds.train) labels.push_back(ds.records[r].factors[a] >= 0.5 ? 1 : 0);
      auto clf = train_sparse_classifier(z_tr, labels, c.sparse_budget);
      const auto expect = static_cast<std::size_t>(c.d - c.sparse_budget);
      zeros_ok = zeros_ok && clf.zero_count() == expect;
      sp << ds.spec.factors[a].name << ',' << c.sparse_budget << ',' << clf.zero_count() << ',' << expect << '\n';
      std::vector<Tensor> rows{x};
      for (double lam : c.lambdas) {
        auto out = manipulate(m, x, clf, stats, lam, seq);
        if (lam == 0.0) man0 = std::max(man0, max_of(relative_residuals(out, x)));
        rows.push_back(out);
        log_images("manipulate", ds.spec.factors[a].name, lam, out);
      }
      grid("images/manipulate_" + ds.spec.factors[a].name + ".pgm", rows);
    }
    run.text("metrics/sparse_classifier.csv", sp.str());
    if (std::find(c.lambdas.begin(), c.lambdas.end(), 0.0) != c.lambdas.end())
      ck << "manipulate_lambda0_residual," << num(man0) << ',' << num(bound) << ',' << (man0 <= bound) << '\n';
    ck << "sparse_zero_weights_exact," << zeros_ok << ",1," << zeros_ok << '\n';
  }
  run.text("metrics/generate_images.csv", per.str());
  run.text("metrics/generation_checks.csv", ck.str());
}

}  // namespace

// ---- csv ----------------------------------------------------------------------

std::size_t CsvTable::column(const std::string& name) const {
  auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw std::runtime_error("csv: no column '" + name + "'");
  return static_cast<std::size_t>(it - header.begin());
}

double CsvTable::number(std::size_t row, const std::string& name) const {
  const auto& cell = rows.at(row).at(column(name));
  if (cell == "nan" || cell == "none") return std::nan("");
  return std::stod(cell);
}

CsvTable read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  auto split = [](const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
  };
  CsvTable t;
  std::string line;
  if (std::getline(in, line)) t.header = split(line);
  while (std::getline(in, line))
    if (!line.empty()) t.rows.push_back(split(line));
  return t;
}

std::vector<fs::path> metric_files(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::exists(dir / "metrics")) return out;
  for (const auto& e : fs::recursive_directory_iterator(dir / "metrics"))
    if (e.is_regular_file() && e.path().extension() == ".csv") out.push_back(fs::relative(e.path(), dir));
  std::sort(out.begin(), out.end());
  return out;
}

// ---- criteria -------------------------------------------------------------------

std::vector<CriterionResult> evaluate_run(const fs::path& dir) {
  std::vector<CriterionResult> out;
  auto judge = [&](int id, const std::string& name, const std::vector<std::string>& files, auto&& fn) {
    CriterionResult r{id, name, false, false, ""};
    for (const auto& f : files)
      if (!fs::exists(dir / "metrics" / f)) {
        r.detail = f + " missing";
        out.push_back(r);
        return;
      }
    r.evaluated = true;
    std::ostringstream detail;
    try {
      r.pass = fn(detail);
    } catch (const std::exception& e) {
      r.pass = false;
      detail << "unreadable: " << e.what();
    }
    r.detail = detail.str();
    out.push_back(r);
  };
  auto table = [&](const std::string& f) { return read_csv(dir / "metrics" / f); };
  auto all_ones = [&](const CsvTable& t, const std::string& col, std::ostream& os) {
    std::size_t ok = 0;
    for (std::size_t r = 0; r < t.rows.size(); ++r) ok += t.number(r, col) == 1.0;
    os << ok << "/" << t.rows.size();
    return ok == t.rows.size() && ok > 0;
  };

  judge(1, "theory_monte_carlo", {"theory_mc.csv"}, [&](std::ostream& os) {
    auto t = table("theory_mc.csv");
    os << "within 3 sigma ";
    return all_ones(t, "within", os) && t.rows.size() == 20;
  });
  judge(2, "monotone_loss", {"theory_monotone.csv"}, [&](std::ostream& os) {
    auto t = table("theory_monotone.csv");
    os << "strictly increasing ";
    return all_ones(t, "strict", os) && t.rows.size() == 50;
  });
  judge(3, "granularity_ordering", {"theory_dominance.csv", "loss_times.csv"}, [&](std::ostream& os) {
    auto dom = table("theory_dominance.csv");
    os << "dominance ";
    bool ok = all_ones(dom, "dominates", os);
    // Strictly increasing loss time along rank on the 1000-step schedule.
    auto lt = table("loss_times.csv");
    std::map<std::string, std::vector<std::pair<double, double>>> per_tau;
    for (std::size_t r = 0; r < lt.rows.size(); ++r)
      if (lt.number(r, "schedule_T") == 1000.0) {
        const double t = lt.number(r, "loss_time");
        per_tau[lt.rows[r][lt.column("tau")]].push_back({lt.number(r, "rank"), std::isnan(t) ? 1001.0 : t});
      }
    for (auto& [tau, v] : per_tau) {
      std::sort(v.begin(), v.end());
      bool inc = true;
      for (std::size_t i = 1; i < v.size(); ++i) inc = inc && v[i].second > v[i - 1].second;
      os << "; tau " << tau << ":";
      for (auto& p : v) os << ' ' << p.second;
      ok = ok && inc;
    }
    return ok && !per_tau.empty();
  });
  judge(5, "eps_x0_equivalence", {"eps_x0.csv"}, [&](std::ostream& os) {
    auto t = table("eps_x0.csv");
    double worst = 0.0;
    for (std::size_t r = 0; r < t.rows.size(); ++r) worst = std::max(worst, t.number(r, "relative_gap"));
    os << "max relative gap " << num(worst) << " over " << t.rows.size() << " triples (tol 1e-5)";
    return t.rows.size() == 100 && worst <= 1e-5;
  });
  judge(6, "compensation_deciles", {"diti_deciles.csv"}, [&](std::ostream& os) {
    auto t = table("diti_deciles.csv");
    bool ok = t.rows.size() == 10;
    os << "ratios";
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      os << ' ' << num(t.number(r, "ratio"));
      ok = ok && t.number(r, "diti") < t.number(r, "baseline");
    }
    return ok;
  });
  judge(7, "sufficiency", {"sufficiency.csv"}, [&](std::ostream& os) {
    auto t = table("sufficiency.csv");
    bool ok = t.rows.size() >= 3;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      os << (r ? "; " : "") << num(t.number(r, "matched")) << " vs " << num(t.number(r, "scrambled"));
      ok = ok && t.number(r, "matched") < t.number(r, "scrambled");
    }
    return ok;
  });
  judge(8, "subset_alignment", {"alignment_test.csv"}, [&](std::ostream& os) {
    auto t = table("alignment_test.csv");
    const double rho = t.number(0, "spearman_rho"), p = t.number(0, "p_value");
    os << "rho " << num(rho) << " p " << num(p);
    return rho > 0.0 && p < 0.05;
  });
  judge(9, "probing_advantage", {"probe_summary.csv"}, [&](std::ostream& os) {
    auto t = table("probe_summary.csv");
    bool beats_pixels = true, vs_k1 = false;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      const double a = t.number(r, "diti_ap"), b = t.number(r, "pixel_ap");
      if (t.rows[r][0] == "mean") {
        const double k1 = t.number(r, "k1_ap");
        vs_k1 = !std::isnan(k1) && a >= k1;
        os << "mean " << num(a) << " pixel " << num(b) << " k1 " << num(k1) << " margin " << num(a - k1);
      } else {
        beats_pixels = beats_pixels && a > b;
      }
    }
    os << (beats_pixels ? "; beats pixels on all" : "; does not beat pixels on all");
    return beats_pixels && vs_k1;
  });
  judge(10, "generation_contracts", {"generation_checks.csv"}, [&](std::ostream& os) {
    auto t = table("generation_checks.csv");
    bool ok = t.rows.size() >= 5;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      os << (r ? "; " : "") << t.rows[r][0] << ' ' << t.rows[r][1];
      ok = ok && t.number(r, "pass") == 1.0;
    }
    return ok;
  });
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return out;
}

// ---- report -------------------------------------------------------------------

namespace {

void report_stage(Run& run, const ExperimentConfig&) {
  std::ostringstream os;
  os << "criterion,name,pass,detail\n";
  for (auto r : evaluate_run(run.dir())) {
    std::replace(r.detail.begin(), r.detail.end(), ',', ';');
    os << r.id << ',' << r.name << ',' << (r.evaluated ? (r.pass ? "pass" : "fail") : "missing") << ',' << r.detail
       << '\n';
  }
  run.text("metrics/summary.csv", os.str());
}

}  // namespace

void run_stage(Stage stage, const ExperimentConfig& cfg, const fs::path& dir, const StageOptions& opts) {
  validate(cfg);
  Run run(stage, cfg, dir);
  const auto start = std::chrono::steady_clock::now();
  try {
    switch (stage) {
      case Stage::GenData: gen_data(run, cfg); break;
      case Stage::VerifyTheory: verify_theory(run, cfg); break;
      case Stage::TrainDm: train_dm_stage(run, cfg); break;
      case Stage::TrainDiti: train_diti_stage(run, cfg); break;
      case Stage::Probe: probe_stage(run, cfg); break;
      case Stage::Generate: generate_stage(run, cfg, opts); break;
      case Stage::Report: report_stage(run, cfg); break;
    }
  } catch (const std::exception& e) {
    run.finish("failed", e.what());
    throw;
  }
  run.finish("complete");
  const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  fs::create_directories(dir / "timing");
  std::ofstream(dir / "timing" / (to_string(stage) + ".json")) << json{{"seconds", sec}}.dump() << '\n';
}

}  // namespace diti
