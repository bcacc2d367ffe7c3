#include <cmath>
#include <filesystem>
#include <fstream>

#include "diti/ddpm.hpp"
#include "diti/diti.hpp"
#include "diti/error.hpp"
#include "diti/generate.hpp"
#include "diti/random.hpp"
#include "doctest.h"

using namespace diti;

namespace {

Tensor vec(std::vector<float> v) {
  const std::size_t n = v.size();
  return Tensor({n}, std::move(v));
}

bool same(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.values().begin(), a.values().end(), b.values().begin());
}

double norm(const Tensor& a) {
  double acc = 0.0;
  for (float v : a.values()) acc += static_cast<double>(v) * v;
  return std::sqrt(acc);
}

// Small untrained models with perturbed weights so g is not identically zero.
struct Fixture {
  VarianceSchedule s = make_linear_schedule(20);
  DenoiserModel dm;
  EncoderDecoder ed;
  Fixture()
      : dm(16, s, [] {
          DenoiserConfig c;
          c.hidden = {24, 24};
          return c;
        }(), 1),
        ed(16, make_partition(PartitionKind::Balanced, 4, 8, 20), [] {
          EncoderDecoderConfig c;
          c.encoder_hidden = {24};
          c.decoder_hidden = {24};
          return c;
        }(), 2) {
    Rng rng(3);
    for (auto& p : ed.parameters())
      for (auto& v : p.tensor.mutable_values()) v += static_cast<float>(0.1 * rng.gaussian());
  }
  Models models() const { return {dm, ed}; }
};

// Plain full-batch logistic regression on standardised columns.
std::vector<double> logistic_oracle(const std::vector<std::vector<double>>& x, const std::vector<int>& y, int iters,
                                    double lr, double& b) {
  const std::size_t n = x.size(), d = x[0].size();
  std::vector<double> mean(d), sd(d);
  for (std::size_t c = 0; c < d; ++c) {
    for (std::size_t r = 0; r < n; ++r) mean[c] += x[r][c] / n;
    for (std::size_t r = 0; r < n; ++r) sd[c] += (x[r][c] - mean[c]) * (x[r][c] - mean[c]) / n;
    sd[c] = std::sqrt(sd[c]);
  }
  std::vector<double> w(d, 0.0);
  b = 0.0;
  for (int it = 0; it < iters; ++it) {
    std::vector<double> gw(d, 0.0);
    double gb = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      double z = b;
      for (std::size_t c = 0; c < d; ++c) z += w[c] * (x[r][c] - mean[c]) / sd[c];
      double e = 1.0 / (1.0 + std::exp(-z)) - y[r];
      for (std::size_t c = 0; c < d; ++c) gw[c] += e * (x[r][c] - mean[c]) / sd[c] / n;
      gb += e / n;
    }
    for (std::size_t c = 0; c < d; ++c) w[c] -= lr * gw[c];
    b -= lr * gb;
  }
  // Back to raw units.
  for (std::size_t c = 0; c < d; ++c) {
    b -= w[c] * mean[c] / sd[c];
    w[c] /= sd[c];
  }
  return w;
}

}  // namespace

TEST_CASE("slerp") {
  Tensor a = vec({1, 0, 0}), b = vec({0, 1, 0});
  CHECK(same(slerp(a, b, 0.0), a));
  CHECK(same(slerp(a, b, 1.0), b));
  auto mid = slerp(a, b, 0.5);
  CHECK(mid.at(0) == doctest::Approx(1 / std::sqrt(2.0)).epsilon(1e-6));
  CHECK(mid.at(1) == doctest::Approx(1 / std::sqrt(2.0)).epsilon(1e-6));
  CHECK(mid.at(2) == 0.0f);
  CHECK(norm(mid) == doctest::Approx(1.0).epsilon(1e-6));

  Tensor p = vec({1, 2, 3}), q = vec({2, 4, 6});
  auto lin = slerp(p, q, 0.25);
  for (std::size_t i = 0; i < 3; ++i) CHECK(lin.at(i) == doctest::Approx(0.75 * p.at(i) + 0.25 * q.at(i)));

  Rng rng(1);
  for (int k = 0; k < 20; ++k) {
    Tensor u = rng.gaussian_tensor({32}), v = rng.gaussian_tensor({32});
    auto vs = v.mutable_values();
    const double scale = norm(u) / norm(v);
    for (auto& x : vs) x = static_cast<float>(x * scale);
    const double lam = rng.uniform();
    CHECK(std::abs(norm(slerp(u, v, lam)) / norm(u) - 1.0) < 1e-5);
  }
  CHECK_THROWS_AS(slerp(vec({0, 0}), vec({1, 0}), 0.5), ContractError);
  CHECK_THROWS_AS(slerp(vec({1, 0}), vec({1, 0, 0}), 0.5), ContractError);

  Tensor rows_a = rng.gaussian_tensor({3, 5}), rows_b = rng.gaussian_tensor({3, 5});
  auto rs = slerp_rows(rows_a, rows_b, 0.3);
  for (std::size_t r = 0; r < 3; ++r) {
    std::vector<std::size_t> one{r};
    auto expect = slerp(gather_rows(rows_a, one), gather_rows(rows_b, one), 0.3);
    for (std::size_t c = 0; c < 5; ++c) CHECK(rs.at(r * 5 + c) == expect.at(c));
  }
}

TEST_CASE("lerp_subset") {
  auto part = make_partition(PartitionKind::Balanced, 4, 8, 20);
  Rng rng(2);
  Tensor z = rng.gaussian_tensor({3, 8}), zo = rng.gaussian_tensor({3, 8});
  std::vector<int> all{1, 2, 3, 4}, second{2};
  CHECK(same(lerp_subset(z, zo, second, part, 0.0), z));
  CHECK(same(lerp_subset(z, zo, all, part, 1.0), zo));
  auto half = lerp_subset(z, zo, second, part, 0.5);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 8; ++c) {
      const std::size_t i = r * 8 + c;
      if (c == 2 || c == 3)
        CHECK(half.at(i) == doctest::Approx(0.5 * z.at(i) + 0.5 * zo.at(i)));
      else
        CHECK(half.at(i) == z.at(i));
    }
  std::vector<int> bad{5}, none;
  CHECK_THROWS_AS(lerp_subset(z, zo, bad, part, 0.5), ContractError);
  CHECK_THROWS_AS(lerp_subset(z, zo, none, part, 0.5), ContractError);
}

TEST_CASE("counterfactual and manipulate at the identity settings") {
  Fixture f;
  auto m = f.models();
  Rng rng(4);
  Tensor x = rng.uniform_tensor({3, 16}, -1, 1), y = rng.uniform_tensor({3, 16}, -1, 1);
  auto seq = make_sampling_sequence(20, 6);
  std::vector<int> all{1, 2, 3, 4};
  auto rx = reconstruct(m, x, seq), ry = reconstruct(m, y, seq);
  CHECK(same(counterfactual(m, x, y, all, 0.0, seq), rx));
  CHECK(same(counterfactual(m, x, y, all, 1.0, seq), ry));
  std::vector<int> some{2};
  CHECK_FALSE(same(counterfactual(m, x, y, some, 1.0, seq), rx));

  Tensor feats = encode_all(f.ed, rng.uniform_tensor({40, 16}, -1, 1));
  SparseClassifier clf;
  clf.w.assign(8, 0.0);
  clf.w[3] = 2.0;
  auto stats = feature_stats(feats);
  CHECK(same(manipulate(m, x, clf, stats, 0.0, seq), rx));
  CHECK_FALSE(same(manipulate(m, x, clf, stats, 3.0, seq), rx));
  clf.w[3] = 0.0;
  CHECK_THROWS_AS(manipulate(m, x, clf, stats, 1.0, seq), ContractError);
  CHECK_THROWS_AS(counterfactual(m, x, rng.uniform_tensor({2, 16}, -1, 1), all, 0.5, seq), ContractError);
}

TEST_CASE("sparse classifier") {
  // Two informative dims inside ten.
  Rng rng(5);
  const int n = 200, d = 10;
  Tensor x = rng.gaussian_tensor({static_cast<std::size_t>(n), d});
  auto xv = x.mutable_values();
  std::vector<int> labels(n);
  for (int r = 0; r < n; ++r) {
    labels[r] = r % 2;
    const float s = labels[r] ? 1.0f : -1.0f;
    xv[r * d + 3] = s * (1.0f + std::abs(xv[r * d + 3]));
    xv[r * d + 7] = s * (0.5f + std::abs(xv[r * d + 7]));
  }
  auto clf = train_sparse_classifier(x, labels, 2);
  CHECK(clf.zero_count() == 8);
  CHECK(clf.active[3]);
  CHECK(clf.active[7]);
  int correct = 0;
  for (int r = 0; r < n; ++r)
    correct += (clf.logit(x.values().subspan(static_cast<std::size_t>(r * d), d)) > 0) == (labels[r] == 1);
  CHECK(correct == n);

  for (int budget : {1, 4, 9}) CHECK(train_sparse_classifier(x, labels, budget).zero_count() == std::size_t(d - budget));

  // No pruning: plain logistic regression.
  SparseConfig cfg;
  cfg.iterations = 300;
  auto dense = train_sparse_classifier(x, labels, d, cfg);
  std::vector<std::vector<double>> rows(n, std::vector<double>(d));
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < d; ++c) rows[r][c] = x.at(static_cast<std::size_t>(r * d + c));
  double b = 0.0;
  auto w = logistic_oracle(rows, labels, cfg.iterations, cfg.learning_rate, b);
  CHECK(dense.zero_count() == 0);
  for (int c = 0; c < d; ++c) CHECK(dense.w[c] == doctest::Approx(w[c]).epsilon(1e-8));
  CHECK(dense.bias == doctest::Approx(b).epsilon(1e-8));

  std::vector<int> flat(n, 1);
  CHECK_THROWS_AS(train_sparse_classifier(x, flat, 2), TrainingError);
  CHECK_THROWS_AS(train_sparse_classifier(x, labels, 11), ContractError);
}

TEST_CASE("feature stats, mask energy and image grids") {
  Tensor f({4, 2}, std::vector<float>{1, 5, 3, 5, 5, 5, 7, 5});
  auto st = feature_stats(f);
  CHECK(st.sigma[0] == doctest::Approx(std::sqrt(5.0)));
  CHECK(st.sigma[1] == 0.0);

  Tensor before({1, 4}, std::vector<float>{0, 0, 0, 0}), after({1, 4}, std::vector<float>{1, 2, 0, 0});
  auto frac = mask_energy_fraction(before, after, {false, true, true, false});
  CHECK(frac[0] == doctest::Approx(0.8));
  CHECK(mask_energy_fraction(before, before, {true, false, false, false})[0] == 1.0);

  auto path = std::filesystem::temp_directory_path() / "diti_test_grid.pgm";
  Tensor imgs({3, 4}, std::vector<float>{-1, 1, 0, 1, -1, -1, -1, -1, 1, 1, 1, 1});
  write_pgm_grid(path, imgs, 2, 2);
  std::ifstream in(path, std::ios::binary);
  std::string magic;
  int w = 0, h = 0, mx = 0;
  in >> magic >> w >> h >> mx;
  in.get();
  CHECK(magic == "P5");
  CHECK(w == 5);
  CHECK(h == 5);
  CHECK(mx == 255);
  std::vector<unsigned char> pix(25);
  in.read(reinterpret_cast<char*>(pix.data()), 25);
  CHECK(in.gcount() == 25);
  CHECK(pix[0] == 0);
  CHECK(pix[1] == 255);
  CHECK(pix[5] == 128);
  std::filesystem::remove(path);
}
