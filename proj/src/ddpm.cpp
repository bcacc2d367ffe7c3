#include "diti/ddpm.hpp"

#include <algorithm>
#include <cmath>

#include "diti/checkpoint.hpp"
#include "diti/error.hpp"
#include "diti/random.hpp"

namespace diti {

namespace {

// c_a a + c_b b row by row, evaluated in double on constant tensors.
Tensor row_lincomb(const Tensor& a, std::span<const double> ca, const Tensor& b, std::span<const double> cb) {
  require(a.shape() == b.shape(), "shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  Tensor out(a.shape());
  auto o = out.mutable_values();
  auto va = a.values(), vb = b.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c;
      o[i] = static_cast<float>(ca[r] * va[i] + cb[r] * vb[i]);
    }
  return out;
}

Tensor uniform_lincomb(const Tensor& a, double ca, const Tensor& b, double cb) {
  std::vector<double> va(a.dim(0), ca), vb(a.dim(0), cb);
  return row_lincomb(a, va, b, vb);
}

Tensor guided_x0(const X0Predictor& model, const Tensor& x, int t, const Guidance& guide) {
  std::vector<int> ts(x.dim(0), t);
  Tensor x0 = model.predict_x0(x, ts);
  if (guide) x0 = add(x0, guide(t));
  return x0;
}

void check_batch(const Tensor& x, const char* what) {
  require(x.rank() == 2, std::string(what) + ": expected a [B x P] batch, got " + shape_string(x.shape()));
}

}  // namespace

DenoiserModel::DenoiserModel(std::size_t pixels, const VarianceSchedule& s, DenoiserConfig cfg, std::uint64_t seed)
    : pixels_(pixels), schedule_(s), cfg_(std::move(cfg)) {
  Rng rng(derive_seed(seed, "denoiser-init"));
  net_ = Mlp(pixels + kTimeEmbeddingDim, cfg_.hidden, pixels, rng);
  gate_ = Linear(kTimeEmbeddingDim, pixels, rng, true);
}

Tensor DenoiserModel::network(const Tensor& input, std::span<const int> ts) const {
  check_batch(input, "denoiser");
  require(input.dim(1) == pixels_ && ts.size() == input.dim(0), "denoiser: input does not match model or time-steps");
  return net_.forward(concat({input, time_embedding(ts)}));
}

Tensor DenoiserModel::predict_x0(const Tensor& x_t, std::span<const int> ts) const {
  check_batch(x_t, "denoiser");
  require(ts.size() == x_t.dim(0), "denoiser: one time-step per row required");
  // With x = x_t / sqrt(abar) = x0 + sigma eps, sigma^2 = (1 - abar) / abar:
  const double sd2 = cfg_.sigma_data * cfg_.sigma_data;
  std::vector<float> skip(ts.size()), out(ts.size()), in(ts.size());
  for (std::size_t r = 0; r < ts.size(); ++r) {
    const double abar = schedule_.alpha_bar(ts[r]);
    const double s2 = (1.0 - abar) / abar;
    skip[r] = static_cast<float>(sd2 / (s2 + sd2) / std::sqrt(abar));
    out[r] = static_cast<float>(std::sqrt(s2) * cfg_.sigma_data / std::sqrt(s2 + sd2));
    in[r] = static_cast<float>(1.0 / std::sqrt(s2 + sd2) / std::sqrt(abar));
  }
  Tensor f = network(mul(x_t, row_constant(in, pixels_)), ts);
  Tensor open = add(gate_.forward(time_embedding(ts)), Tensor(Shape{ts.size(), pixels_}, 1.0f));
  return add(mul(mul(x_t, open), row_constant(skip, pixels_)), mul(f, row_constant(out, pixels_)));
}

ParameterList DenoiserModel::parameters() const {
  ParameterList out;
  net_.collect("denoiser", out);
  out.push_back({"denoiser.gate", gate_.weight()});
  return out;
}

void DenoiserModel::save(const std::filesystem::path& path) const {
  nlohmann::json header = {{"kind", "denoiser"},
                           {"pixels", pixels_},
                           {"hidden", cfg_.hidden},
                           {"sigma_data", cfg_.sigma_data},
                           {"schedule", schedule_to_json(schedule_)}};
  save_checkpoint(path, header, parameters());
}

DenoiserModel DenoiserModel::load(const std::filesystem::path& path) {
  auto ck = load_checkpoint(path);
  if (ck.header.value("kind", "") != "denoiser") throw std::runtime_error(path.string() + " is not a denoiser checkpoint");
  DenoiserConfig cfg;
  cfg.hidden = ck.header.at("hidden").get<std::vector<std::size_t>>();
  cfg.sigma_data = ck.header.at("sigma_data").get<double>();
  DenoiserModel m(ck.header.at("pixels").get<std::size_t>(), schedule_from_json(ck.header.at("schedule")), cfg, 0);
  assign_parameters(m.parameters(), ck);
  return m;
}

Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const VarianceSchedule& s) {
  require(x0.shape() == eps.shape(),
          "q_sample: eps shape " + shape_string(eps.shape()) + " differs from x0 shape " + shape_string(x0.shape()));
  require(t >= 1 && t <= s.steps(), "q_sample: time-step " + std::to_string(t) + " out of range");
  const double abar = s.alpha_bar(t);
  Tensor out(x0.shape());
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < o.size(); ++i)
    o[i] = static_cast<float>(std::sqrt(abar) * x0.at(i) + std::sqrt(1.0 - abar) * eps.at(i));
  return out;
}

Tensor q_sample(const Tensor& x0, std::span<const int> ts, const Tensor& eps, const VarianceSchedule& s) {
  check_batch(x0, "q_sample");
  require(x0.shape() == eps.shape(), "q_sample: eps shape differs from x0 shape");
  require(ts.size() == x0.dim(0), "q_sample: one time-step per row required");
  std::vector<double> ca(ts.size()), cb(ts.size());
  for (std::size_t r = 0; r < ts.size(); ++r) {
    s.beta(ts[r]);  // range check
    ca[r] = std::sqrt(s.alpha_bar(ts[r]));
    cb[r] = std::sqrt(1.0 - s.alpha_bar(ts[r]));
  }
  return row_lincomb(x0, ca, eps, cb);
}

Tensor dm_loss(const X0Predictor& model, const Tensor& x0, std::span<const int> ts, const Tensor& eps) {
  const auto& s = model.schedule();
  Tensor xt = q_sample(x0, ts, eps, s);
  Tensor diff = sub(x0, model.predict_x0(xt, ts));
  std::vector<float> snr(ts.size());
  for (std::size_t r = 0; r < ts.size(); ++r) snr[r] = static_cast<float>(s.snr(ts[r]));
  Tensor weighted = mul(square(diff), row_constant(snr, x0.dim(1)));
  return scale(sum(weighted), 1.0f / static_cast<float>(ts.size()));
}

std::vector<double> dm_loss_rows(const X0Predictor& model, const Tensor& x0, std::span<const int> ts,
                                 const Tensor& eps) {
  NoGradGuard ng;
  const auto& s = model.schedule();
  Tensor xt = q_sample(x0, ts, eps, s);
  Tensor pred = model.predict_x0(xt, ts);
  const std::size_t cols = x0.dim(1);
  std::vector<double> out(ts.size());
  for (std::size_t r = 0; r < ts.size(); ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      double d = static_cast<double>(x0.at(r * cols + c)) - pred.at(r * cols + c);
      acc += d * d;
    }
    out[r] = s.snr(ts[r]) * acc;
  }
  return out;
}

std::vector<double> eps_from_x0(std::span<const float> x_t, std::span<const float> x0_hat, int t,
                                const VarianceSchedule& s) {
  require(x_t.size() == x0_hat.size(), "eps_from_x0: length mismatch");
  const double ab = s.alpha_bar(t), a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  std::vector<double> out(x_t.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (static_cast<double>(x_t[i]) - a * x0_hat[i]) / b;
  return out;
}

TrainLog train_dm(DenoiserModel& model, const Tensor& images, const DmTrainConfig& cfg) {
  check_batch(images, "train_dm");
  require(images.dim(0) >= 1, "train_dm: empty dataset");
  require(cfg.iterations >= 0 && cfg.batch_size >= 1, "train_dm: bad iteration budget or batch size");
  const auto& s = model.schedule();
  const int n = static_cast<int>(images.dim(0));
  Adam opt(tensors_of(model.parameters()), cfg.adam);
  Rng rng(derive_seed(cfg.seed, "train-dm"));
  TrainLog log;
  std::vector<std::size_t> idx(static_cast<std::size_t>(cfg.batch_size));
  std::vector<int> ts(idx.size());
  for (int it = 0; it < cfg.iterations; ++it) {
    if (cfg.cosine_decay) opt.set_learning_rate(cosine_lr(cfg.adam.lr, it, cfg.iterations));
    for (auto& i : idx) i = static_cast<std::size_t>(rng.uniform_int(0, n - 1));
    for (auto& t : ts) t = rng.uniform_int(1, s.steps());
    Tensor x0 = gather_rows(images, idx);
    Tensor eps = rng.gaussian_tensor(x0.shape());
    Tensor loss = dm_loss(model, x0, ts, eps);
    const double v = loss.item();
    if (!std::isfinite(v))
      throw TrainingError("train_dm: loss became " + std::to_string(v) + " at iteration " + std::to_string(it));
    backward(loss);
    opt.step();
    log.loss.push_back(v);
  }
  Tensor eval = gather_rows(images, row_range(0, std::min(images.dim(0), cfg.eval_rows)));
  log.per_t_loss = dm_loss_per_timestep(model, eval, derive_seed(cfg.seed, "dm-eval"));
  return log;
}

std::vector<double> dm_loss_per_timestep(const X0Predictor& model, const Tensor& images, std::uint64_t seed) {
  const int T = model.schedule().steps();
  std::vector<double> out;
  std::vector<int> ts(images.dim(0));
  for (int t = 1; t <= T; ++t) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(t)));
    Tensor eps = rng.gaussian_tensor(images.shape());
    std::fill(ts.begin(), ts.end(), t);
    auto rows = dm_loss_rows(model, images, ts, eps);
    double acc = 0.0;
    for (double r : rows) acc += r;
    out.push_back(acc / static_cast<double>(rows.size()));
  }
  return out;
}

std::vector<double> moving_average(std::span<const double> v, std::size_t window) {
  require(window >= 1, "moving_average: window must be >= 1");
  std::vector<double> out(v.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    acc += v[i];
    if (i >= window) acc -= v[i - window];
    out[i] = acc / static_cast<double>(std::min(i + 1, window));
  }
  return out;
}

std::vector<int> make_sampling_sequence(int T, int M) {
  require(M >= 2 && M <= T + 1, "sampling sequence: need 2 <= M <= T + 1");
  std::vector<int> seq(static_cast<std::size_t>(M));
  for (int i = 0; i < M; ++i)
    seq[static_cast<std::size_t>(i)] = static_cast<int>(std::lround(static_cast<double>(i) * T / (M - 1)));
  return seq;
}

void validate_sequence(std::span<const int> seq, int T) {
  require(seq.size() >= 2, "sampling sequence: need at least two steps");
  require(seq.front() == 0 && seq.back() == T, "sampling sequence must start at 0 and end at T");
  for (std::size_t i = 1; i < seq.size(); ++i)
    require(seq[i] > seq[i - 1], "sampling sequence must be strictly increasing");
}

Tensor ddim_step(const X0Predictor& model, const Tensor& x_t, int t_hi, int t_lo, const Guidance& guide) {
  require(t_hi > t_lo && t_lo >= 0, "ddim_step: need t_hi > t_lo >= 0, got " + std::to_string(t_hi) + ", " +
                                        std::to_string(t_lo));
  check_batch(x_t, "ddim_step");
  NoGradGuard ng;
  const auto& s = model.schedule();
  Tensor x0 = guided_x0(model, x_t, t_hi, guide);
  if (t_lo == 0) return x0;
  const double ahi = s.alpha_bar(t_hi), alo = s.alpha_bar(t_lo);
  // x_lo = sqrt(alo) x0 + sqrt(1 - alo) (x_t - sqrt(ahi) x0) / sqrt(1 - ahi)
  const double k = std::sqrt(1.0 - alo) / std::sqrt(1.0 - ahi);
  return uniform_lincomb(x0, std::sqrt(alo) - k * std::sqrt(ahi), x_t, k);
}

Tensor ddim_invert(const X0Predictor& model, const Tensor& x0, std::span<const int> seq, const Guidance& guide) {
  const auto& s = model.schedule();
  validate_sequence(seq, s.steps());
  check_batch(x0, "ddim_invert");
  NoGradGuard ng;
  Tensor x = x0;
  for (std::size_t i = 1; i < seq.size(); ++i) {
    const int t_eval = std::max(seq[i - 1], 1);
    const int t_hi = seq[i];
    Tensor pred = guided_x0(model, x, t_eval, guide);
    const double alo = s.alpha_bar(t_eval), ahi = s.alpha_bar(t_hi);
    const double k = std::sqrt(1.0 - ahi) / std::sqrt(1.0 - alo);
    x = uniform_lincomb(pred, std::sqrt(ahi) - k * std::sqrt(alo), x, k);
  }
  return x;
}

Tensor ddim_sample(const X0Predictor& model, const Tensor& x_T, std::span<const int> seq, const Guidance& guide) {
  validate_sequence(seq, model.schedule().steps());
  Tensor x = x_T;
  for (std::size_t i = seq.size() - 1; i >= 1; --i) x = ddim_step(model, x, seq[i], seq[i - 1], guide);
  return x;
}

std::vector<double> relative_residuals(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape() && a.rank() == 2, "relative_residuals: shape mismatch");
  const std::size_t cols = a.dim(1);
  std::vector<double> out(a.dim(0));
  for (std::size_t r = 0; r < out.size(); ++r) {
    double num = 0.0, den = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      double d = static_cast<double>(a.at(r * cols + c)) - b.at(r * cols + c);
      num += d * d;
      den += static_cast<double>(b.at(r * cols + c)) * b.at(r * cols + c);
    }
    out[r] = std::sqrt(num) / std::max(std::sqrt(den), 1e-30);
  }
  return out;
}

}  // namespace diti
