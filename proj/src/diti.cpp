#include "diti/diti.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "diti/checkpoint.hpp"
#include "diti/error.hpp"
#include "diti/random.hpp"

namespace diti {

namespace {

constexpr std::array<int, 5> kImbalancedWeights = {10, 25, 327, 100, 50};
constexpr std::array<int, 5> kImbalancedBounds = {50, 100, 300, 500, 1000};

// Splits `total` proportionally to `weights`, largest remainder first (ties
// to the lower index).
std::vector<int> largest_remainder(int total, std::span<const int> weights) {
  const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<int> out(weights.size());
  std::vector<double> rem(weights.size());
  int assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    double exact = total * weights[i] / wsum;
    out[i] = static_cast<int>(std::floor(exact));
    rem[i] = exact - out[i];
    assigned += out[i];
  }
  std::vector<std::size_t> order(weights.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
  for (std::size_t i = 0; assigned < total; ++i, ++assigned) ++out[order[i % order.size()]];
  return out;
}

nlohmann::json partition_to_json(const PartitionSpec& p) {
  return {{"kind", to_string(p.kind)}, {"k", p.k},     {"d", p.d},
          {"T", p.T},                  {"dims", p.subset_dims}, {"boundaries", p.t_boundaries}};
}

PartitionSpec partition_from_json(const nlohmann::json& j) {
  auto p = make_partition(partition_kind_from_string(j.at("kind")), j.at("k"), j.at("d"), j.at("T"));
  if (p.subset_dims != j.at("dims").get<std::vector<int>>() ||
      p.t_boundaries != j.at("boundaries").get<std::vector<int>>())
    throw std::runtime_error("stored partition does not match its parameters");
  return p;
}

}  // namespace

std::string to_string(PartitionKind kind) { return kind == PartitionKind::Balanced ? "balanced" : "imbalanced"; }

PartitionKind partition_kind_from_string(const std::string& name) {
  if (name == "balanced") return PartitionKind::Balanced;
  if (name == "imbalanced") return PartitionKind::Imbalanced;
  throw ContractError("unknown partition kind '" + name + "'");
}

int PartitionSpec::dim_offset(int j) const {
  require(j >= 1 && j <= k, "subset index " + std::to_string(j) + " outside [1, " + std::to_string(k) + "]");
  return std::accumulate(subset_dims.begin(), subset_dims.begin() + (j - 1), 0);
}

PartitionSpec make_partition(PartitionKind kind, int k, int d, int T) {
  require(k >= 1 && d >= 1 && T >= 1, "partition: k, d and T must be positive");
  require(k <= d, "partition: k = " + std::to_string(k) + " exceeds d = " + std::to_string(d));
  require(k <= T, "partition: k = " + std::to_string(k) + " exceeds T = " + std::to_string(T));
  PartitionSpec p;
  p.kind = kind;
  p.k = k;
  p.d = d;
  p.T = T;
  if (kind == PartitionKind::Balanced) {
    require(d % k == 0, "balanced partition: d = " + std::to_string(d) + " not divisible by k = " + std::to_string(k));
    p.subset_dims.assign(static_cast<std::size_t>(k), d / k);
    for (int j = 1; j <= k; ++j)
      p.t_boundaries.push_back(static_cast<int>((static_cast<long long>(j) * T) / k));
  } else {
    require(k == 5, "imbalanced partition has exactly 5 subsets, got k = " + std::to_string(k));
    p.subset_dims = largest_remainder(d, kImbalancedWeights);
    for (int dim : p.subset_dims)
      require(dim >= 1, "imbalanced partition: d = " + std::to_string(d) + " too small for every subset");
    for (int b : kImbalancedBounds) p.t_boundaries.push_back(static_cast<int>(std::lround(b * T / 1000.0)));
    for (std::size_t j = 0; j < p.t_boundaries.size(); ++j)
      require(p.t_boundaries[j] > (j ? p.t_boundaries[j - 1] : 0),
              "imbalanced partition: T = " + std::to_string(T) + " too small for distinct ranges");
  }
  return p;
}

int subset_of(const PartitionSpec& spec, int t) {
  require(t >= 1 && t <= spec.T, "subset_of: time-step " + std::to_string(t) + " outside [1, " +
                                     std::to_string(spec.T) + "]");
  auto it = std::lower_bound(spec.t_boundaries.begin(), spec.t_boundaries.end(), t);
  return static_cast<int>(it - spec.t_boundaries.begin()) + 1;
}

Tensor mask_feature(const Tensor& z, const PartitionSpec& spec, std::span<const int> ts, bool detach_prefix) {
  require(z.rank() == 2 && z.dim(1) == static_cast<std::size_t>(spec.d),
          "mask_feature: expected [B x " + std::to_string(spec.d) + "], got " + shape_string(z.shape()));
  require(ts.size() == z.dim(0), "mask_feature: one time-step per row required");
  const std::size_t d = z.dim(1);
  Tensor prefix(z.shape()), current(z.shape());
  auto pv = prefix.mutable_values(), cv = current.mutable_values();
  for (std::size_t r = 0; r < ts.size(); ++r) {
    const int j = subset_of(spec, ts[r]);
    const auto lo = static_cast<std::size_t>(spec.dim_offset(j));
    const auto hi = lo + static_cast<std::size_t>(spec.subset_dims[static_cast<std::size_t>(j - 1)]);
    for (std::size_t c = 0; c < lo; ++c) pv[r * d + c] = 1.0f;
    for (std::size_t c = lo; c < hi; ++c) cv[r * d + c] = 1.0f;
  }
  if (detach_prefix) return add(mul(detach(z), prefix), mul(z, current));
  Tensor keep(z.shape());
  auto kv = keep.mutable_values();
  for (std::size_t i = 0; i < kv.size(); ++i) kv[i] = pv[i] + cv[i];
  return mul(z, keep);
}

EncoderDecoder::EncoderDecoder(std::size_t pixels, PartitionSpec partition, EncoderDecoderConfig cfg,
                               std::uint64_t seed)
    : pixels_(pixels), partition_(std::move(partition)), cfg_(std::move(cfg)) {
  Rng enc_rng(derive_seed(seed, "encoder-init"));
  Rng dec_rng(derive_seed(seed, "decoder-init"));
  const auto d = static_cast<std::size_t>(partition_.d);
  if (cfg_.split_encoder) {
    for (int dim : partition_.subset_dims)
      encoders_.emplace_back(pixels, cfg_.encoder_hidden, static_cast<std::size_t>(dim), enc_rng, /*zero_last=*/true);
  } else {
    encoders_.emplace_back(pixels, cfg_.encoder_hidden, d, enc_rng, /*zero_last=*/true);
  }
  decoder_ = Mlp(d + kTimeEmbeddingDim, cfg_.decoder_hidden, pixels, dec_rng, /*zero_last=*/true);
}

Tensor EncoderDecoder::encode(const Tensor& x0) const {
  require(x0.rank() == 2 && x0.dim(1) == pixels_, "encode: expected [B x " + std::to_string(pixels_) + "]");
  if (encoders_.size() == 1) return encoders_.front().forward(x0);
  std::vector<Tensor> parts;
  for (const auto& e : encoders_) parts.push_back(e.forward(x0));
  return concat(parts);
}

Tensor EncoderDecoder::decode(const Tensor& zbar, std::span<const int> ts) const {
  require(zbar.rank() == 2 && zbar.dim(1) == static_cast<std::size_t>(partition_.d) && ts.size() == zbar.dim(0),
          "decode: feature batch does not match the partition or time-steps");
  return decoder_.forward(concat({zbar, time_embedding(ts)}));
}

ParameterList EncoderDecoder::encoder_parameters() const {
  ParameterList out;
  if (encoders_.size() == 1) {
    encoders_.front().collect("encoder", out);
  } else {
    for (std::size_t j = 0; j < encoders_.size(); ++j) encoders_[j].collect("encoder" + std::to_string(j + 1), out);
  }
  return out;
}

ParameterList EncoderDecoder::decoder_parameters() const {
  ParameterList out;
  decoder_.collect("decoder", out);
  return out;
}

ParameterList EncoderDecoder::parameters() const {
  auto out = encoder_parameters();
  auto dec = decoder_parameters();
  out.insert(out.end(), dec.begin(), dec.end());
  return out;
}

void EncoderDecoder::save(const std::filesystem::path& path, const std::string& dm_reference) const {
  nlohmann::json header = {{"kind", "diti"},
                           {"pixels", pixels_},
                           {"partition", partition_to_json(partition_)},
                           {"encoder_hidden", cfg_.encoder_hidden},
                           {"decoder_hidden", cfg_.decoder_hidden},
                           {"split_encoder", cfg_.split_encoder},
                           {"dm", dm_reference}};
  save_checkpoint(path, header, parameters());
}

EncoderDecoder EncoderDecoder::load(const std::filesystem::path& path) {
  auto ck = load_checkpoint(path);
  if (ck.header.value("kind", "") != "diti") throw std::runtime_error(path.string() + " is not a DiTi checkpoint");
  EncoderDecoderConfig cfg;
  cfg.encoder_hidden = ck.header.at("encoder_hidden").get<std::vector<std::size_t>>();
  cfg.decoder_hidden = ck.header.at("decoder_hidden").get<std::vector<std::size_t>>();
  cfg.split_encoder = ck.header.value("split_encoder", false);
  EncoderDecoder ed(ck.header.at("pixels").get<std::size_t>(), partition_from_json(ck.header.at("partition")), cfg, 0);
  assign_parameters(ed.parameters(), ck);
  return ed;
}

namespace {

struct Prepared {
  Tensor u;  // frozen denoiser output, constant
  std::vector<float> w, lambda;
};

Prepared prepare(const X0Predictor& dm, const Tensor& x0, std::span<const int> ts, const Tensor& eps) {
  const auto& s = dm.schedule();
  Prepared p;
  {
    NoGradGuard ng;
    p.u = dm.predict_x0(q_sample(x0, ts, eps, s), ts);
  }
  for (int t : ts) {
    p.w.push_back(static_cast<float>(s.w(t)));
    p.lambda.push_back(static_cast<float>(s.lambda(t)));
  }
  return p;
}

}  // namespace

Tensor diti_loss_from_features(const X0Predictor& dm, const EncoderDecoder& ed, const Tensor& z, const Tensor& x0,
                               std::span<const int> ts, const Tensor& eps, bool detach) {
  require(dm.schedule().steps() == ed.partition().T, "diti_loss: partition and schedule disagree on T");
  auto p = prepare(dm, x0, ts, eps);
  const std::size_t cols = x0.dim(1);
  Tensor g = ed.decode(mask_feature(z, ed.partition(), ts, detach), ts);
  Tensor pred = add(p.u, mul(g, row_constant(p.w, cols)));
  Tensor weighted = mul(square(sub(x0, pred)), row_constant(p.lambda, cols));
  return scale(sum(weighted), 1.0f / static_cast<float>(ts.size()));
}

Tensor diti_loss(const X0Predictor& dm, const EncoderDecoder& ed, const Tensor& x0, std::span<const int> ts,
                 const Tensor& eps, bool detach) {
  return diti_loss_from_features(dm, ed, ed.encode(x0), x0, ts, eps, detach);
}

DitiRowLosses diti_loss_rows(const X0Predictor& dm, const EncoderDecoder& ed, const Tensor& x0,
                             std::span<const int> ts, const Tensor& eps, const Tensor* z) {
  NoGradGuard ng;
  auto p = prepare(dm, x0, ts, eps);
  Tensor feats = z ? *z : ed.encode(x0);
  Tensor g = ed.decode(mask_feature(feats, ed.partition(), ts, false), ts);
  const std::size_t cols = x0.dim(1);
  DitiRowLosses out;
  for (std::size_t r = 0; r < ts.size(); ++r) {
    double acc = 0.0, base = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c;
      double res = static_cast<double>(x0.at(i)) - p.u.at(i);
      double d = res - static_cast<double>(p.w[r]) * g.at(i);
      acc += d * d;
      base += res * res;
    }
    out.diti.push_back(p.lambda[r] * acc);
    out.baseline.push_back(p.lambda[r] * base);
  }
  return out;
}

DitiTrainLog train_diti(const X0Predictor& dm, EncoderDecoder& ed, const Tensor& images, const DitiTrainConfig& cfg,
                        const Tensor* fixed_features) {
  require(images.rank() == 2 && images.dim(0) >= 1, "train_diti: empty dataset");
  require(cfg.iterations >= 0 && cfg.batch_size >= 1, "train_diti: bad iteration budget or batch size");
  if (fixed_features)
    require(fixed_features->rank() == 2 && fixed_features->dim(0) == images.dim(0) &&
                fixed_features->dim(1) == static_cast<std::size_t>(ed.partition().d),
            "train_diti: fixed features must be [N x d] and row-aligned with the images");
  const auto& s = dm.schedule();
  const int n = static_cast<int>(images.dim(0));
  Adam opt(tensors_of(fixed_features ? ed.decoder_parameters() : ed.parameters()), cfg.adam);
  Rng rng(derive_seed(cfg.seed, "train-diti"));
  DitiTrainLog log;
  std::vector<std::size_t> idx(static_cast<std::size_t>(cfg.batch_size));
  std::vector<int> ts(idx.size());
  for (int it = 0; it < cfg.iterations; ++it) {
    if (cfg.cosine_decay) opt.set_learning_rate(cosine_lr(cfg.adam.lr, it, cfg.iterations));
    for (auto& i : idx) i = static_cast<std::size_t>(rng.uniform_int(0, n - 1));
    Tensor x0 = gather_rows(images, idx);
    Tensor z = fixed_features ? gather_rows(*fixed_features, idx) : ed.encode(x0);
    for (auto& t : ts) t = rng.uniform_int(1, s.steps());
    Tensor eps = rng.gaussian_tensor(x0.shape());
    Tensor loss = diti_loss_from_features(dm, ed, z, x0, ts, eps, cfg.detach);
    const double v = loss.item();
    if (!std::isfinite(v))
      throw TrainingError("train_diti: loss became " + std::to_string(v) + " at iteration " + std::to_string(it));
    backward(loss);
    opt.step();
    log.loss.push_back(v);
  }

  auto rows = row_range(0, std::min(images.dim(0), cfg.eval_rows));
  Tensor eval = gather_rows(images, rows);
  Tensor eval_z = fixed_features ? gather_rows(*fixed_features, rows) : encode_all(ed, eval);
  std::vector<int> tt(rows.size());
  for (int t = 1; t <= s.steps(); ++t) {
    Rng erng(derive_seed(derive_seed(cfg.seed, "diti-eval"), static_cast<std::uint64_t>(t)));
    Tensor eps = erng.gaussian_tensor(eval.shape());
    std::fill(tt.begin(), tt.end(), t);
    auto r = diti_loss_rows(dm, ed, eval, tt, eps, &eval_z);
    log.per_t_loss.push_back(std::accumulate(r.diti.begin(), r.diti.end(), 0.0) / static_cast<double>(rows.size()));
    log.per_t_baseline.push_back(std::accumulate(r.baseline.begin(), r.baseline.end(), 0.0) /
                                 static_cast<double>(rows.size()));
  }
  return log;
}

Tensor encode_all(const EncoderDecoder& ed, const Tensor& images, std::size_t chunk) {
  NoGradGuard ng;
  const std::size_t n = images.dim(0);
  const auto d = static_cast<std::size_t>(ed.partition().d);
  Tensor out(Shape{n, d});
  auto o = out.mutable_values();
  for (std::size_t start = 0; start < n; start += chunk) {
    auto z = ed.encode(gather_rows(images, row_range(start, std::min(n, start + chunk))));
    std::ranges::copy(z.values(), o.begin() + static_cast<std::ptrdiff_t>(start * d));
  }
  return out;
}

Guidance make_guidance(const VarianceSchedule& s, const EncoderDecoder& ed, const Tensor& z) {
  require(s.steps() == ed.partition().T, "guidance: partition and schedule disagree on T");
  return [s, &ed, z](int t) {
    std::vector<int> ts(z.dim(0), t);
    Tensor g = ed.decode(mask_feature(z, ed.partition(), ts, false), ts);
    return scale(g, static_cast<float>(s.w(t)));
  };
}

}  // namespace diti
