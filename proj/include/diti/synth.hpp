#pragma once

// Synthetic images rendered from known modular attributes.
//
// Each attribute adds its own pattern on top of a constant base level, so an
// intervention on one attribute changes only that attribute's footprint and
// the pixel distance of an intervention depends only on the old and new
// factor values. Reference attribute set, finest to coarsest:
//   corner_dot   2x2 patch in the top-left corner, intensity
//   shape        4x4 patch near the top-right, morph from a ring to a centre block
//   position     horizontal position of a Gaussian blob in the lower band
//   background   level added to every pixel

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "diti/tensor.hpp"

namespace diti {

enum class RendererKind { CornerDot, ShapeMorph, BlobPosition, BackgroundLevel };

std::string to_string(RendererKind kind);
RendererKind renderer_kind_from_string(const std::string& name);

struct FactorDef {
  std::string name;
  RendererKind kind = RendererKind::CornerDot;
  double amplitude = 0.6;
  int granularity_rank = 1;  // 1 = finest pixel footprint
};

struct SyntheticSpec {
  int image_side = 16;
  int n_samples = 2048;
  int levels = 32;  // factors are drawn on the grid {0, 1/(levels-1), ..., 1}
  double base_level = -0.6;
  std::uint64_t seed = 0;
  std::vector<FactorDef> factors;

  std::size_t pixels() const { return static_cast<std::size_t>(image_side) * static_cast<std::size_t>(image_side); }
};

/// The four-attribute reference configuration.
SyntheticSpec reference_synthetic_spec(std::uint64_t seed = 0, int n_samples = 2048);
void validate(const SyntheticSpec& spec);

struct FactorRecord {
  std::vector<double> factors;
  std::vector<int> granularity_rank;
};

FactorRecord make_record(const SyntheticSpec& spec, std::vector<double> factors);

/// Deterministic [side x side] image in [-1, 1].
Tensor render(const SyntheticSpec& spec, const FactorRecord& r);

/// g_i . x at the factor level: factor i (1-based) replaced, others untouched.
FactorRecord apply_group_action(const SyntheticSpec& spec, const FactorRecord& r, int i, double new_value);

/// Pixels (row-major) that attribute i (1-based) may change.
std::vector<bool> footprint(const SyntheticSpec& spec, int i);

/// For every attribute, n_pairs distances ||render(x0) - render(g_i . x0)||.
/// Pairs use common random numbers across attributes: each pair draws a base
/// record and two grid levels (a, b); attribute i's pair sets factor i to a
/// and to b on that base.
std::vector<std::vector<double>> granularity_profile(const SyntheticSpec& spec, int n_pairs, std::uint64_t seed);

struct Dataset {
  SyntheticSpec spec;
  Tensor images;  // [n_samples x side*side]
  std::vector<FactorRecord> records;
  std::vector<std::size_t> train, test;  // 90/10 split
};

Dataset generate_dataset(const SyntheticSpec& spec);

/// images.bin (tensor [n, side, side]), factors.csv (index,factor_1..N) and spec.json.
void save_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

std::string spec_to_json(const SyntheticSpec& spec);
SyntheticSpec spec_from_json(const std::string& text);

}  // namespace diti
