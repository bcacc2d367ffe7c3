#pragma once

// The x0-predicting denoiser u_theta, its training objective and
// deterministic DDIM sampling / inversion.
//
// Batches are [B x P] with P = flattened image size. Every row carries its
// own time-step where an interface takes a span of time-steps.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "diti/nn.hpp"
#include "diti/schedule.hpp"
#include "diti/tensor.hpp"

namespace diti {

/// Anything that maps (x_t, t) to an estimate of x0.
class X0Predictor {
 public:
  virtual ~X0Predictor() = default;
  virtual Tensor predict_x0(const Tensor& x_t, std::span<const int> ts) const = 0;
  virtual const VarianceSchedule& schedule() const = 0;
};

struct DenoiserConfig {
  std::vector<std::size_t> hidden{256, 256, 256};
  double sigma_data = 0.5;  // rough pixel spread, sets the skip/output scalings
};

/// MLP F on (scaled x_t) (+) temb(t), wrapped with skip and output scalings
/// so that F's target has roughly unit variance at every t:
///   x0_hat = c_skip (1 + g(t)) x + c_out F(c_in x, t),   x = x_t / sqrt(abar_t)
/// g is a per-pixel gate, affine in the time embedding and zero at
/// initialisation. g = -1 turns the skip off, which an MLP cannot emulate
/// well because it would have to reproduce its input with a gain that grows
/// without bound as t -> 0.
class DenoiserModel : public X0Predictor {
 public:
  DenoiserModel(std::size_t pixels, const VarianceSchedule& s, DenoiserConfig cfg, std::uint64_t seed);

  /// The raw MLP F.
  Tensor network(const Tensor& input, std::span<const int> ts) const;
  Tensor predict_x0(const Tensor& x_t, std::span<const int> ts) const override;
  const VarianceSchedule& schedule() const override { return schedule_; }

  std::size_t pixels() const { return pixels_; }
  const DenoiserConfig& config() const { return cfg_; }
  ParameterList parameters() const;

  void save(const std::filesystem::path& path) const;
  static DenoiserModel load(const std::filesystem::path& path);

 private:
  std::size_t pixels_;
  VarianceSchedule schedule_;
  DenoiserConfig cfg_;
  Mlp net_;
  Linear gate_;
};

Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const VarianceSchedule& s);
Tensor q_sample(const Tensor& x0, std::span<const int> ts, const Tensor& eps, const VarianceSchedule& s);

/// Batch mean of SNR(t) ||x0 - u(x_t, t)||^2 (taped through the model).
Tensor dm_loss(const X0Predictor& model, const Tensor& x0, std::span<const int> ts, const Tensor& eps);
/// Per-row values of the same objective, without taping.
std::vector<double> dm_loss_rows(const X0Predictor& model, const Tensor& x0, std::span<const int> ts,
                                 const Tensor& eps);

struct DmTrainConfig {
  int iterations = 6000;
  int batch_size = 64;
  AdamConfig adam{};
  bool cosine_decay = true;
  std::uint64_t seed = 0;
  std::size_t eval_rows = 256;  // fixed batch for the per-time-step sweep
};

struct TrainLog {
  std::vector<double> loss;        // per iteration
  std::vector<double> per_t_loss;  // index t - 1, averaged over the fixed evaluation batch
};

/// Trains in place on the rows of `images`. Throws TrainingError on a
/// non-finite loss.
TrainLog train_dm(DenoiserModel& model, const Tensor& images, const DmTrainConfig& cfg);

/// Mean DM loss at every t = 1..T on `images` with noise drawn from `seed`.
std::vector<double> dm_loss_per_timestep(const X0Predictor& model, const Tensor& images, std::uint64_t seed);

/// Trailing moving average with the given window.
std::vector<double> moving_average(std::span<const double> v, std::size_t window);

/// eps implied by an x0 estimate, (x_t - sqrt(abar_t) x0_hat) / sqrt(1 - abar_t),
/// evaluated in double for one row at time-step t.
std::vector<double> eps_from_x0(std::span<const float> x_t, std::span<const float> x0_hat, int t,
                                const VarianceSchedule& s);

// ---- DDIM -------------------------------------------------------------------

/// Additive x0-space term for every row at time-step t (may be empty).
using Guidance = std::function<Tensor(int t)>;

/// M strictly increasing steps from 0 to T, as evenly spaced as integers allow.
std::vector<int> make_sampling_sequence(int T, int M);
void validate_sequence(std::span<const int> seq, int T);

/// One eta = 0 transition from t_hi down to t_lo.
Tensor ddim_step(const X0Predictor& model, const Tensor& x_t, int t_hi, int t_lo, const Guidance& guide = {});

/// Runs the recurrence upward from x0 to x_T. On the first step from t = 0
/// the model is evaluated at t = 1, the first noise level it knows.
Tensor ddim_invert(const X0Predictor& model, const Tensor& x0, std::span<const int> seq, const Guidance& guide = {});
Tensor ddim_sample(const X0Predictor& model, const Tensor& x_T, std::span<const int> seq, const Guidance& guide = {});

/// Per-row ||a - b|| / ||b||.
std::vector<double> relative_residuals(const Tensor& a, const Tensor& b);

}  // namespace diti
