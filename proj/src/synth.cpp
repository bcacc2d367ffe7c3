#include "diti/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "diti/error.hpp"
#include "diti/random.hpp"
#include "diti/tensor_io.hpp"
#include "json.hpp"

namespace diti {

namespace {

struct BlobGeometry {
  double cy, sigma, x_lo, x_hi;
  int row_lo, row_hi;
};

BlobGeometry blob_geometry(int side) {
  const double s = side / 16.0;
  BlobGeometry g{};
  g.cy = 11.5 * s;
  g.sigma = 1.5 * s;
  g.x_lo = 3.5 * s;
  g.x_hi = 11.5 * s;
  g.row_lo = static_cast<int>(std::ceil(g.cy - 4.0 * s));
  g.row_hi = std::min(side - 1, static_cast<int>(std::floor(g.cy + 4.0 * s)));
  return g;
}

int shape_size(int side) { return std::max(2, side / 4); }

// Adds attribute `def` at factor value f into img.
void draw(const SyntheticSpec& spec, const FactorDef& def, double f, std::vector<double>& img) {
  const int n = spec.image_side;
  const double a = def.amplitude;
  switch (def.kind) {
    case RendererKind::CornerDot:
      for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 2; ++c) img[r * n + c] += a * f;
      break;
    case RendererKind::ShapeMorph: {
      const int k = shape_size(n);
      const int r0 = 1, c0 = n - k - 1;
      for (int r = 0; r < k; ++r)
        for (int c = 0; c < k; ++c) {
          bool ring = r == 0 || c == 0 || r == k - 1 || c == k - 1;
          img[(r0 + r) * n + c0 + c] += a * (ring ? (1.0 - f) : f);
        }
      break;
    }
    case RendererKind::BlobPosition: {
      const auto g = blob_geometry(n);
      const double cx = g.x_lo + f * (g.x_hi - g.x_lo);
      for (int r = g.row_lo; r <= g.row_hi; ++r)
        for (int c = 0; c < n; ++c) {
          double dx = c + 0.5 - cx, dy = r + 0.5 - g.cy;
          img[r * n + c] += a * std::exp(-(dx * dx + dy * dy) / (2.0 * g.sigma * g.sigma));
        }
      break;
    }
    case RendererKind::BackgroundLevel:
      for (auto& v : img) v += a * f;
      break;
  }
}

}  // namespace

std::string to_string(RendererKind kind) {
  switch (kind) {
    case RendererKind::CornerDot: return "corner_dot";
    case RendererKind::ShapeMorph: return "shape_morph";
    case RendererKind::BlobPosition: return "blob_position";
    case RendererKind::BackgroundLevel: return "background_level";
  }
  return "unknown";
}

RendererKind renderer_kind_from_string(const std::string& name) {
  for (auto k : {RendererKind::CornerDot, RendererKind::ShapeMorph, RendererKind::BlobPosition,
                 RendererKind::BackgroundLevel})
    if (to_string(k) == name) return k;
  throw ContractError("unknown renderer kind '" + name + "'");
}

SyntheticSpec reference_synthetic_spec(std::uint64_t seed, int n_samples) {
  SyntheticSpec s;
  s.seed = seed;
  s.n_samples = n_samples;
  s.factors = {{"corner_dot", RendererKind::CornerDot, 0.6, 1},
               {"shape", RendererKind::ShapeMorph, 0.6, 2},
               {"position", RendererKind::BlobPosition, 0.8, 3},
               {"background", RendererKind::BackgroundLevel, 0.6, 4}};
  return s;
}

void validate(const SyntheticSpec& spec) {
  require(spec.image_side >= 8, "synthetic spec: image_side must be >= 8");
  require(spec.n_samples >= 1, "synthetic spec: n_samples must be >= 1");
  require(spec.levels >= 2, "synthetic spec: levels must be >= 2");
  const auto n = spec.factors.size();
  require(n >= 3, "synthetic spec: need at least 3 factors");
  std::vector<int> ranks;
  for (const auto& f : spec.factors) ranks.push_back(f.granularity_rank);
  std::sort(ranks.begin(), ranks.end());
  for (std::size_t i = 0; i < n; ++i)
    require(ranks[i] == static_cast<int>(i) + 1, "synthetic spec: granularity ranks must be a permutation of 1..N");
}

FactorRecord make_record(const SyntheticSpec& spec, std::vector<double> factors) {
  require(factors.size() == spec.factors.size(), "factor record: wrong number of factors");
  FactorRecord r;
  r.factors = std::move(factors);
  for (const auto& f : spec.factors) r.granularity_rank.push_back(f.granularity_rank);
  return r;
}

Tensor render(const SyntheticSpec& spec, const FactorRecord& r) {
  require(r.factors.size() == spec.factors.size(), "render: record has " + std::to_string(r.factors.size()) +
                                                       " factors, spec has " +
                                                       std::to_string(spec.factors.size()));
  std::vector<double> img(spec.pixels(), spec.base_level);
  for (std::size_t i = 0; i < r.factors.size(); ++i) {
    double f = r.factors[i];
    require(f >= 0.0 && f <= 1.0, "render: factor " + std::to_string(i + 1) + " = " + std::to_string(f) +
                                      " outside [0, 1]");
    draw(spec, spec.factors[i], f, img);
  }
  const auto side = static_cast<std::size_t>(spec.image_side);
  Tensor out(Shape{side, side});
  auto v = out.mutable_values();
  for (std::size_t p = 0; p < img.size(); ++p) v[p] = static_cast<float>(std::clamp(img[p], -1.0, 1.0));
  return out;
}

FactorRecord apply_group_action(const SyntheticSpec& spec, const FactorRecord& r, int i, double new_value) {
  require(i >= 1 && i <= static_cast<int>(spec.factors.size()), "group action: attribute index out of range");
  require(new_value >= 0.0 && new_value <= 1.0, "group action: new value outside [0, 1]");
  require(r.factors.size() == spec.factors.size(), "group action: record does not match spec");
  FactorRecord out = r;
  out.factors[static_cast<std::size_t>(i - 1)] = new_value;
  return out;
}

std::vector<bool> footprint(const SyntheticSpec& spec, int i) {
  require(i >= 1 && i <= static_cast<int>(spec.factors.size()), "footprint: attribute index out of range");
  const int n = spec.image_side;
  std::vector<bool> mask(spec.pixels(), false);
  switch (spec.factors[static_cast<std::size_t>(i - 1)].kind) {
    case RendererKind::CornerDot:
      for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 2; ++c) mask[r * n + c] = true;
      break;
    case RendererKind::ShapeMorph: {
      const int k = shape_size(n);
      for (int r = 1; r < 1 + k; ++r)
        for (int c = n - k - 1; c < n - 1; ++c) mask[r * n + c] = true;
      break;
    }
    case RendererKind::BlobPosition: {
      const auto g = blob_geometry(n);
      for (int r = g.row_lo; r <= g.row_hi; ++r)
        for (int c = 0; c < n; ++c) mask[r * n + c] = true;
      break;
    }
    case RendererKind::BackgroundLevel:
      mask.assign(mask.size(), true);
      break;
  }
  return mask;
}

std::vector<std::vector<double>> granularity_profile(const SyntheticSpec& spec, int n_pairs, std::uint64_t seed) {
  validate(spec);
  require(n_pairs >= 1, "granularity_profile: n_pairs must be >= 1");
  const auto n_factors = spec.factors.size();
  const int top = spec.levels - 1;
  Rng rng(seed);
  std::vector<std::vector<double>> deltas(n_factors);
  for (int p = 0; p < n_pairs; ++p) {
    std::vector<double> base(n_factors);
    for (auto& f : base) f = rng.uniform_int(0, top) / static_cast<double>(top);
    const double a = rng.uniform_int(0, top) / static_cast<double>(top);
    const double b = rng.uniform_int(0, top) / static_cast<double>(top);
    for (std::size_t i = 0; i < n_factors; ++i) {
      auto rec = make_record(spec, base);
      auto x0 = render(spec, apply_group_action(spec, rec, static_cast<int>(i) + 1, a));
      auto y0 = render(spec, apply_group_action(spec, rec, static_cast<int>(i) + 1, b));
      double sq = 0.0;
      for (std::size_t k = 0; k < x0.numel(); ++k) {
        double d = static_cast<double>(x0.at(k)) - y0.at(k);
        sq += d * d;
      }
      deltas[i].push_back(std::sqrt(sq));
    }
  }
  return deltas;
}

Dataset generate_dataset(const SyntheticSpec& spec) {
  validate(spec);
  Dataset ds;
  ds.spec = spec;
  const auto n = static_cast<std::size_t>(spec.n_samples);
  const auto pixels = spec.pixels();
  const int top = spec.levels - 1;
  ds.images = Tensor(Shape{n, pixels});
  auto out = ds.images.mutable_values();
  Rng rng(derive_seed(spec.seed, "synth-factors"));
  for (std::size_t s = 0; s < n; ++s) {
    std::vector<double> f(spec.factors.size());
    for (auto& v : f) v = rng.uniform_int(0, top) / static_cast<double>(top);
    auto rec = make_record(spec, std::move(f));
    auto img = render(spec, rec);
    std::copy(img.values().begin(), img.values().end(), out.begin() + static_cast<std::ptrdiff_t>(s * pixels));
    ds.records.push_back(std::move(rec));
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng split_rng(derive_seed(spec.seed, "synth-split"));
  std::shuffle(order.begin(), order.end(), split_rng.engine());
  const std::size_t n_test = n >= 10 ? n / 10 : 0;
  ds.test.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  ds.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
  std::sort(ds.test.begin(), ds.test.end());
  std::sort(ds.train.begin(), ds.train.end());
  return ds;
}

std::string spec_to_json(const SyntheticSpec& spec) {
  nlohmann::ordered_json j;
  j["image_side"] = spec.image_side;
  j["n_samples"] = spec.n_samples;
  j["levels"] = spec.levels;
  j["base_level"] = spec.base_level;
  j["seed"] = spec.seed;
  j["factors"] = nlohmann::ordered_json::array();
  for (const auto& f : spec.factors)
    j["factors"].push_back({{"name", f.name},
                            {"kind", to_string(f.kind)},
                            {"amplitude", f.amplitude},
                            {"granularity_rank", f.granularity_rank}});
  return j.dump(2) + "\n";
}

SyntheticSpec spec_from_json(const std::string& text) {
  auto j = nlohmann::json::parse(text);
  SyntheticSpec s;
  s.image_side = j.value("image_side", s.image_side);
  s.n_samples = j.value("n_samples", s.n_samples);
  s.levels = j.value("levels", s.levels);
  s.base_level = j.value("base_level", s.base_level);
  s.seed = j.value("seed", s.seed);
  if (j.contains("factors")) {
    for (const auto& f : j.at("factors"))
      s.factors.push_back({f.at("name").get<std::string>(), renderer_kind_from_string(f.at("kind")),
                           f.at("amplitude").get<double>(), f.at("granularity_rank").get<int>()});
  } else {
    s.factors = reference_synthetic_spec().factors;
  }
  validate(s);
  return s;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto side = static_cast<std::size_t>(ds.spec.image_side);
  save_tensor(dir / "images.bin", ds.images.reshaped({ds.images.dim(0), side, side}));
  std::ofstream csv(dir / "factors.csv");
  csv << "index";
  for (std::size_t i = 0; i < ds.spec.factors.size(); ++i) csv << ",factor_" << i + 1;
  csv << '\n' << std::setprecision(17);
  for (std::size_t s = 0; s < ds.records.size(); ++s) {
    csv << s;
    for (double f : ds.records[s].factors) csv << ',' << f;
    csv << '\n';
  }
  std::ofstream(dir / "spec.json") << spec_to_json(ds.spec);
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream spec_in(dir / "spec.json");
  if (!spec_in) throw std::runtime_error("missing " + (dir / "spec.json").string());
  std::stringstream buf;
  buf << spec_in.rdbuf();
  auto spec = spec_from_json(buf.str());
  // The split and records are a pure function of the spec; regenerate them
  // and check the stored pixels agree.
  Dataset ds = generate_dataset(spec);
  auto stored = load_tensor(dir / "images.bin");
  require(stored.numel() == ds.images.numel() &&
              std::equal(stored.values().begin(), stored.values().end(), ds.images.values().begin()),
          "dataset at " + dir.string() + " does not match its spec.json");
  return ds;
}

}  // namespace diti
