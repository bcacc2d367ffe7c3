#pragma once

// Finite-difference gradient checks shared by the unit tests and the
// acceptance binary. Each suite returns the probes it ran and a message per
// disagreement.

#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "diti/ddpm.hpp"
#include "diti/diti.hpp"
#include "diti/random.hpp"
#include "oracles.hpp"

namespace gradcheck {

using diti::Shape;
using diti::Tensor;

struct Report {
  int probes = 0;
  std::vector<std::string> failures;

  void merge(const Report& o) {
    probes += o.probes;
    failures.insert(failures.end(), o.failures.begin(), o.failures.end());
  }
};

constexpr int kProbes = 20;
constexpr double kRelTol = 1e-3;
// Components below 1% of the gradient's RMS are judged against that floor.
constexpr double kFloorFraction = 1e-2;

inline void probe(Report& rep, const std::string& what, double analytic, double fd, double floor) {
  ++rep.probes;
  if (!oracle::grad_close(analytic, fd, kRelTol, floor)) {
    std::ostringstream os;
    os << what << ": analytic " << analytic << " vs fd " << fd;
    rep.failures.push_back(os.str());
  }
}

// ---- models in double precision -------------------------------------------------

/// Always returns the same batch.
class FixedPredictor : public diti::X0Predictor {
 public:
  FixedPredictor(Tensor x0, const diti::VarianceSchedule& s) : x0_(std::move(x0)), s_(s) {}
  Tensor predict_x0(const Tensor&, std::span<const int>) const override { return x0_; }
  const diti::VarianceSchedule& schedule() const override { return s_; }

 private:
  Tensor x0_;
  const diti::VarianceSchedule& s_;
};

struct DenoiserOracle {
  const diti::VarianceSchedule& s;
  double sigma_data;
  std::vector<oracle::Mat> w;

  oracle::Mat predict(const oracle::Mat& xt, std::span<const int> ts) const {
    oracle::Mat scaled(xt.rows, xt.cols);
    std::vector<double> skip(ts.size()), out(ts.size());
    for (std::size_t r = 0; r < ts.size(); ++r) {
      double abar = s.alpha_bar(ts[r]);
      double sig2 = (1 - abar) / abar, sd2 = sigma_data * sigma_data;
      double cin = 1 / std::sqrt(sig2 + sd2);
      skip[r] = sd2 / (sig2 + sd2);
      out[r] = std::sqrt(sig2) * sigma_data / std::sqrt(sig2 + sd2);
      for (std::size_t c = 0; c < xt.cols; ++c) scaled(r, c) = cin * xt(r, c) / std::sqrt(abar);
    }
    // The last parameter is the skip gate, the rest are the MLP.
    std::vector<oracle::Mat> net(w.begin(), w.end() - 1);
    auto temb = oracle::time_embedding(ts);
    auto f = oracle::mlp(oracle::hcat(scaled, temb), net);
    auto gate = oracle::affine(temb, w.back());
    oracle::Mat x0(xt.rows, xt.cols);
    for (std::size_t r = 0; r < xt.rows; ++r)
      for (std::size_t c = 0; c < xt.cols; ++c)
        x0(r, c) = skip[r] * (1 + gate(r, c)) * xt(r, c) / std::sqrt(s.alpha_bar(ts[r])) + out[r] * f(r, c);
    return x0;
  }

  double loss(const oracle::Mat& x0, std::span<const int> ts, const oracle::Mat& eps) const {
    oracle::Mat xt(x0.rows, x0.cols);
    for (std::size_t r = 0; r < x0.rows; ++r) {
      double abar = s.alpha_bar(ts[r]);
      for (std::size_t c = 0; c < x0.cols; ++c) xt(r, c) = std::sqrt(abar) * x0(r, c) + std::sqrt(1 - abar) * eps(r, c);
    }
    auto pred = predict(xt, ts);
    double acc = 0;
    for (std::size_t r = 0; r < x0.rows; ++r)
      for (std::size_t c = 0; c < x0.cols; ++c) acc += s.snr(ts[r]) * std::pow(x0(r, c) - pred(r, c), 2);
    return acc / static_cast<double>(x0.rows);
  }
};

/// DiTi objective with a constant denoiser output u.
struct DitiOracle {
  const diti::VarianceSchedule& s;
  const diti::PartitionSpec& part;
  std::vector<oracle::Mat> enc, dec;
  oracle::Mat u;

  double loss(const oracle::Mat& x0, std::span<const int> ts) const {
    auto z = oracle::mlp(x0, enc);
    for (std::size_t r = 0; r < z.rows; ++r) {
      int j = diti::subset_of(part, ts[r]);
      int keep = part.dim_offset(j) + part.subset_dims[static_cast<std::size_t>(j - 1)];
      for (std::size_t c = static_cast<std::size_t>(keep); c < z.cols; ++c) z(r, c) = 0.0;
    }
    auto g = oracle::mlp(oracle::hcat(z, oracle::time_embedding(ts)), dec);
    double acc = 0.0;
    for (std::size_t r = 0; r < x0.rows; ++r)
      for (std::size_t c = 0; c < x0.cols; ++c)
        acc += s.lambda(ts[r]) * std::pow(x0(r, c) - (u(r, c) + s.w(ts[r]) * g(r, c)), 2);
    return acc / static_cast<double>(x0.rows);
  }
};

inline void perturb(diti::ParameterList params, diti::Rng& rng, double sd) {
  for (auto& p : params)
    for (auto& v : p.tensor.mutable_values()) v += static_cast<float>(sd * rng.gaussian());
}

// Probes kProbes random coordinates of every parameter tensor.
inline void probe_parameters(Report& rep, const diti::ParameterList& params, std::vector<oracle::Mat>& mats,
                             const std::function<double()>& f, diti::Rng& rng, const std::string& prefix) {
  for (std::size_t p = 0; p < params.size(); ++p) {
    const double floor = kFloorFraction * oracle::rms(params[p].tensor.grad());
    for (int k = 0; k < kProbes; ++k) {
      auto i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(params[p].tensor.numel()) - 1));
      const double fd = oracle::central_difference(f, mats[p].v[i]);
      probe(rep, prefix + params[p].name + "[" + std::to_string(i) + "]", params[p].tensor.grad()[i], fd, floor);
    }
  }
}

// ---- suites -----------------------------------------------------------------------

using OpFn = std::function<Tensor(const std::vector<Tensor>&)>;
using RefFn = std::function<oracle::Mat(const std::vector<oracle::Mat>&)>;

/// d(sum(R * op(inputs)))/d(inputs) against central differences of a double
/// reference of the same op.
inline Report check_op(const std::string& name, const OpFn& op, const RefFn& ref, std::vector<Tensor> inputs,
                       std::uint64_t seed) {
  Report rep;
  diti::Rng rng(seed);
  Tensor out = op(inputs);
  Tensor r = rng.uniform_tensor(out.shape(), -1.0f, 1.0f);
  diti::backward(diti::sum(diti::mul(out, r)));

  std::vector<oracle::Mat> x;
  for (const auto& in : inputs) x.push_back(oracle::from_tensor(in));
  const auto rr = oracle::from_tensor(r.rank() == 2 ? r : r.reshaped({r.numel(), 1}));
  auto f = [&] {
    auto y = ref(x);
    double acc = 0;
    for (std::size_t i = 0; i < y.v.size(); ++i) acc += y.v[i] * rr.v[i];
    return acc;
  };
  for (int k = 0; k < kProbes; ++k) {
    const auto which = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(inputs.size()) - 1));
    const auto i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(inputs[which].numel()) - 1));
    const double fd = oracle::central_difference(f, x[which].v[i]);
    probe(rep, name + " input " + std::to_string(which) + "[" + std::to_string(i) + "]", inputs[which].grad()[i], fd,
          kFloorFraction * oracle::rms(inputs[which].grad_view()));
  }
  return rep;
}

inline oracle::Mat map(const oracle::Mat& a, double (*f)(double)) {
  oracle::Mat out = a;
  for (auto& v : out.v) v = f(v);
  return out;
}

inline Tensor leaf(diti::Rng& rng, Shape shape, float lo = -1.0f, float hi = 1.0f) {
  Tensor t = rng.uniform_tensor(std::move(shape), lo, hi);
  t.set_requires_grad();
  return t;
}

struct OpCase {
  std::string name;
  std::function<Report()> run;
};

/// One case per differentiable operation.
inline std::vector<OpCase> op_cases() {
  using V = std::vector<Tensor>;
  using M = std::vector<oracle::Mat>;
  using namespace diti;
  auto zip = [](double (*f)(double, double)) {
    return [f](const M& m) {
      auto o = m[0];
      for (std::size_t i = 0; i < o.v.size(); ++i) o.v[i] = f(o.v[i], m[1].v[i]);
      return o;
    };
  };
  std::vector<OpCase> cases;
  auto add_case = [&](std::string name, OpFn op, RefFn ref, std::function<V(Rng&)> inputs, std::uint64_t seed) {
    cases.push_back({name, [=] {
                       Rng rng(seed);
                       return check_op(name, op, ref, inputs(rng), seed + 100);
                     }});
  };
  add_case("add", [](const V& v) { return add(v[0], v[1]); }, zip([](double a, double b) { return a + b; }),
           [](Rng& r) { return V{leaf(r, {4, 5}), leaf(r, {4, 5})}; }, 10);
  add_case("sub", [](const V& v) { return sub(v[0], v[1]); }, zip([](double a, double b) { return a - b; }),
           [](Rng& r) { return V{leaf(r, {4, 5}), leaf(r, {4, 5})}; }, 11);
  add_case("mul", [](const V& v) { return mul(v[0], v[1]); }, zip([](double a, double b) { return a * b; }),
           [](Rng& r) { return V{leaf(r, {4, 5}), leaf(r, {4, 5})}; }, 12);
  add_case("mul by scalar tensor", [](const V& v) { return mul(v[0], v[1]); },
           [](const M& m) {
             auto o = m[0];
             for (auto& x : o.v) x *= m[1].v[0];
             return o;
           },
           [](Rng& r) { return V{leaf(r, {4, 5}), leaf(r, {1, 1})}; }, 13);
  add_case("scale", [](const V& v) { return scale(v[0], -1.7f); },
           [](const M& m) {
             auto o = m[0];
             for (auto& x : o.v) x *= static_cast<double>(-1.7f);
             return o;
           },
           [](Rng& r) { return V{leaf(r, {4, 5})}; }, 14);
  add_case("square", [](const V& v) { return square(v[0]); },
           [](const M& m) { return map(m[0], [](double x) { return x * x; }); },
           [](Rng& r) { return V{leaf(r, {4, 5})}; }, 15);
  add_case("relu", [](const V& v) { return relu(v[0]); },
           [](const M& m) { return map(m[0], [](double x) { return x > 0 ? x : 0.0; }); },
           [](Rng& r) {
             // away from the kink
             Tensor x = leaf(r, {4, 5});
             for (auto& v : x.mutable_values()) v = v >= 0 ? v + 0.05f : v - 0.05f;
             return V{x};
           },
           16);
  add_case("silu", [](const V& v) { return silu(v[0]); }, [](const M& m) { return map(m[0], oracle::silu); },
           [](Rng& r) { return V{leaf(r, {4, 5}, -4, 4)}; }, 17);
  add_case("tanh", [](const V& v) { return diti::tanh(v[0]); },
           [](const M& m) { return map(m[0], [](double x) { return std::tanh(x); }); },
           [](Rng& r) { return V{leaf(r, {4, 5}, -2, 2)}; }, 18);
  add_case("matmul", [](const V& v) { return matmul(v[0], v[1]); },
           [](const M& m) { return oracle::matmul(m[0], m[1]); },
           [](Rng& r) { return V{leaf(r, {5, 7}), leaf(r, {7, 3})}; }, 19);
  add_case("layer_norm", [](const V& v) { return layer_norm(v[0]); },
           [](const M& m) { return oracle::layer_norm(m[0]); }, [](Rng& r) { return V{leaf(r, {4, 9})}; }, 20);
  add_case("concat", [](const V& v) { return concat({v[0], v[1]}); },
           [](const M& m) { return oracle::hcat(m[0], m[1]); },
           [](Rng& r) { return V{leaf(r, {3, 4}), leaf(r, {3, 2})}; }, 21);
  add_case("slice", [](const V& v) { return slice(v[0], 2, 5); },
           [](const M& m) {
             oracle::Mat o(m[0].rows, 3);
             for (std::size_t r = 0; r < o.rows; ++r)
               for (std::size_t c = 0; c < 3; ++c) o(r, c) = m[0](r, c + 2);
             return o;
           },
           [](Rng& r) { return V{leaf(r, {4, 6})}; }, 22);
  add_case("sum and mean", [](const V& v) { return add(sum(v[0]), scale(mean(square(v[0])), 3.0f)); },
           [](const M& m) {
             double s = 0, q = 0;
             for (double x : m[0].v) {
               s += x;
               q += x * x;
             }
             oracle::Mat o(1, 1);
             o.v[0] = s + 3.0 * q / static_cast<double>(m[0].v.size());
             return o;
           },
           [](Rng& r) { return V{leaf(r, {4, 6})}; }, 23);
  return cases;
}

inline Report check_ops() {
  Report rep;
  for (const auto& c : op_cases()) rep.merge(c.run());
  return rep;
}

inline Report check_mlp(std::uint64_t seed = 6) {
  Report rep;
  diti::Rng rng(seed);
  diti::Mlp net(6, {8, 8}, 3, rng);
  Tensor x = rng.gaussian_tensor({5, 6});
  Tensor r = rng.gaussian_tensor({5, 3});
  diti::backward(diti::sum(diti::mul(net.forward(x), r)));
  diti::ParameterList params;
  net.collect("mlp", params);
  auto w = oracle::weights_of(params);
  const auto xm = oracle::from_tensor(x), rm = oracle::from_tensor(r);
  auto f = [&] {
    auto y = oracle::mlp(xm, w);
    double acc = 0;
    for (std::size_t i = 0; i < y.v.size(); ++i) acc += y.v[i] * rm.v[i];
    return acc;
  };
  probe_parameters(rep, params, w, f, rng, "");
  return rep;
}

/// The denoiser objective with respect to every parameter tensor.
inline Report check_denoiser(std::uint64_t seed = 6) {
  Report rep;
  auto s = diti::make_linear_schedule(100);
  diti::DenoiserConfig cfg;
  cfg.hidden = {24, 24};
  diti::DenoiserModel model(16, s, cfg, 5);
  diti::Rng rng(seed);
  Tensor x0 = rng.uniform_tensor({4, 16}, -1, 1), eps = rng.gaussian_tensor({4, 16});
  std::vector<int> ts{1, 9, 55, 100};
  auto params = model.parameters();
  // Off the initialisation so no layer sits at a special case.
  perturb(params, rng, 0.05);
  DenoiserOracle ref{s, cfg.sigma_data, oracle::weights_of(params)};
  diti::backward(diti::dm_loss(model, x0, ts, eps));
  const auto x0m = oracle::from_tensor(x0), em = oracle::from_tensor(eps);
  auto f = [&] { return ref.loss(x0m, ts, em); };
  probe_parameters(rep, params, ref.w, f, rng, "denoiser ");
  return rep;
}

/// The DiTi objective through encoder and decoder.
inline Report check_encoder_decoder(std::uint64_t seed = 12) {
  Report rep;
  auto s = diti::make_linear_schedule(100);
  auto part = diti::make_partition(diti::PartitionKind::Balanced, 4, 8, 100);
  diti::Rng rng(seed);
  Tensor x0 = rng.uniform_tensor({4, 12}, -1, 1), u = rng.uniform_tensor({4, 12}, -1, 1);
  FixedPredictor dm(u, s);
  diti::EncoderDecoderConfig cfg;
  cfg.encoder_hidden = {20, 20};
  cfg.decoder_hidden = {20, 20};
  diti::EncoderDecoder ed(12, part, cfg, 8);
  perturb(ed.parameters(), rng, 0.1);
  std::vector<int> ts{5, 30, 61, 100};
  Tensor eps = rng.gaussian_tensor({4, 12});
  auto enc = ed.encoder_parameters(), dec = ed.decoder_parameters();
  DitiOracle ref{s, part, oracle::weights_of(enc), oracle::weights_of(dec), oracle::from_tensor(u)};
  const auto x0m = oracle::from_tensor(x0);
  Tensor loss = diti::diti_loss(dm, ed, x0, ts, eps, false);
  if (std::abs(loss.item() - ref.loss(x0m, ts)) > 1e-4 * std::abs(ref.loss(x0m, ts)))
    rep.failures.push_back("encoder/decoder loss value disagrees with the double reference");
  diti::backward(loss);
  auto f = [&] { return ref.loss(x0m, ts); };
  probe_parameters(rep, enc, ref.enc, f, rng, "");
  probe_parameters(rep, dec, ref.dec, f, rng, "");
  return rep;
}

}  // namespace gradcheck
