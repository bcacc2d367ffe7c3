#pragma once

// DiTi: an encoder f maps a clean image to z in R^d; z is split into k
// contiguous subsets, each owning a contiguous range of time-steps. At step t
// the decoder g sees only the subsets up to the one owning t and must supply
// the x0-space correction the frozen denoiser misses:
//
//   L = lambda_t || x0 - (u(x_t, t) + w_t g(zbar_t, t)) ||^2

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "diti/ddpm.hpp"
#include "diti/nn.hpp"

namespace diti {

enum class PartitionKind { Balanced, Imbalanced };
std::string to_string(PartitionKind kind);
PartitionKind partition_kind_from_string(const std::string& name);

struct PartitionSpec {
  PartitionKind kind = PartitionKind::Balanced;
  int k = 1, d = 1, T = 1;
  std::vector<int> subset_dims;   // size k, sums to d
  std::vector<int> t_boundaries;  // size k, inclusive upper bounds, last = T

  /// First feature column of subset j (1-based).
  int dim_offset(int j) const;
};

/// Imbalanced partitions always have five subsets; `k` must be 5.
PartitionSpec make_partition(PartitionKind kind, int k, int d, int T);
/// 1-based subset whose time range contains t.
int subset_of(const PartitionSpec& spec, int t);

/// Per-row masking of z [B x d] for the per-row time-steps `ts`. Subsets past
/// subset_of(t) are zeroed. With detach_prefix, earlier subsets keep their
/// values but pass no gradient.
Tensor mask_feature(const Tensor& z, const PartitionSpec& spec, std::span<const int> ts, bool detach_prefix);

struct EncoderDecoderConfig {
  std::vector<std::size_t> encoder_hidden{256, 256, 256};
  std::vector<std::size_t> decoder_hidden{256, 256, 256};
  /// One encoder MLP per subset instead of a shared trunk.
  bool split_encoder = false;
};

class EncoderDecoder {
 public:
  EncoderDecoder(std::size_t pixels, PartitionSpec partition, EncoderDecoderConfig cfg, std::uint64_t seed);

  Tensor encode(const Tensor& x0) const;
  /// g(zbar, t): image-shaped correction.
  Tensor decode(const Tensor& zbar, std::span<const int> ts) const;

  const PartitionSpec& partition() const { return partition_; }
  std::size_t pixels() const { return pixels_; }
  const EncoderDecoderConfig& config() const { return cfg_; }
  ParameterList encoder_parameters() const;
  ParameterList decoder_parameters() const;
  ParameterList parameters() const;

  void save(const std::filesystem::path& path, const std::string& dm_reference = "") const;
  static EncoderDecoder load(const std::filesystem::path& path);

 private:
  std::size_t pixels_;
  PartitionSpec partition_;
  EncoderDecoderConfig cfg_;
  std::vector<Mlp> encoders_;
  Mlp decoder_;
};

/// Batch mean of the objective with z supplied directly (f bypassed).
Tensor diti_loss_from_features(const X0Predictor& dm, const EncoderDecoder& ed, const Tensor& z, const Tensor& x0,
                               std::span<const int> ts, const Tensor& eps, bool detach);
/// Batch mean of the objective with z = f(x0).
Tensor diti_loss(const X0Predictor& dm, const EncoderDecoder& ed, const Tensor& x0, std::span<const int> ts,
                 const Tensor& eps, bool detach);

/// Per-row objective and the g = 0 baseline lambda_t ||x0 - u(x_t, t)||^2,
/// without taping. `z` empty means z = f(x0).
struct DitiRowLosses {
  std::vector<double> diti, baseline;
};
DitiRowLosses diti_loss_rows(const X0Predictor& dm, const EncoderDecoder& ed, const Tensor& x0,
                             std::span<const int> ts, const Tensor& eps, const Tensor* z = nullptr);

struct DitiTrainConfig {
  int iterations = 8000;
  int batch_size = 64;
  AdamConfig adam{};
  bool cosine_decay = true;
  bool detach = false;
  std::uint64_t seed = 0;
  std::size_t eval_rows = 256;
};

struct DitiTrainLog {
  std::vector<double> loss;
  std::vector<double> per_t_loss;      // objective at t = 1..T on a fixed batch
  std::vector<double> per_t_baseline;  // g = 0 on the same draws
};

/// Algorithm 1. The denoiser is only read. With `fixed_features` ([N x d],
/// row-aligned with `images`) the encoder is bypassed and only g is trained.
DitiTrainLog train_diti(const X0Predictor& dm, EncoderDecoder& ed, const Tensor& images, const DitiTrainConfig& cfg,
                        const Tensor* fixed_features = nullptr);

/// Encodes rows in chunks without taping.
Tensor encode_all(const EncoderDecoder& ed, const Tensor& images, std::size_t chunk = 256);

/// x0-space guidance w_t g(mask(z, t), t) for a batch of fixed features.
/// The returned callable refers to `ed`, which must outlive it.
Guidance make_guidance(const VarianceSchedule& s, const EncoderDecoder& ed, const Tensor& z);

}  // namespace diti
