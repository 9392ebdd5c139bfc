#include <Eigen/Eigenvalues>

#include "frag4d/similarity.hpp"
#include "helpers.hpp"

using namespace frag4d;

namespace {

FeatureMap random_map(Rng& rng, std::size_t tokens, std::size_t dim) {
  std::vector<double> v(tokens * dim);
  for (auto& x : v) x = rng.normal();
  return FeatureMap(tokens, dim, v);
}

double cosine(std::span<const double> a, std::span<const double> b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

// Mean and unbiased covariance by the textbook two-pass formula.
FeatureStats two_pass(const FeatureMap& m) {
  const std::size_t n = m.tokens(), d = m.dim();
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t k = 0; k < d; ++k) mu[static_cast<Eigen::Index>(k)] += m.token(p)[k] / static_cast<double>(n);
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b)
        cov(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) +=
            (m.token(p)[a] - mu[static_cast<Eigen::Index>(a)]) * (m.token(p)[b] - mu[static_cast<Eigen::Index>(b)]) /
            static_cast<double>(n - 1);
  return {mu, cov};
}

FeatureStats gaussian_1d(double mean, double var) {
  FeatureStats s;
  s.mean = Eigen::VectorXd::Constant(1, mean);
  s.covariance = Eigen::MatrixXd::Constant(1, 1, var);
  return s;
}

FeatureStats random_psd(Rng& rng, int d) {
  Eigen::MatrixXd a(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) a(i, j) = rng.normal();
  FeatureStats s;
  s.mean = Eigen::VectorXd(d);
  for (int i = 0; i < d; ++i) s.mean[i] = rng.normal();
  s.covariance = a * a.transpose() / d;
  return s;
}

}  // namespace

TEST_SUITE("similarity") {
  TEST_CASE("self heatmap is all ones") {
    Rng rng(1);
    const FeatureMap m = random_map(rng, 12, 5);
    for (double v : dift_heatmap(m, m)) CHECK(v == doctest::Approx(1.0).epsilon(1e-9));
  }

  TEST_CASE("best match can be orthogonal") {
    const FeatureMap fi(1, 2, {1, 0}), fj(2, 2, {0, 1, -1, 0});
    const Heatmap h = dift_heatmap(fi, fj);
    REQUIRE(h.size() == 1);
    CHECK(h[0] == doctest::Approx(0.0).epsilon(1e-12));
  }

  TEST_CASE("heatmap equals the exhaustive double loop") {
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
      const FeatureMap a = random_map(rng, 8, 4), b = random_map(rng, 8, 4);
      const Heatmap h = dift_heatmap(a, b);
      for (std::size_t p = 0; p < 8; ++p) {
        double best = -1.0;
        for (std::size_t q = 0; q < 8; ++q) best = std::max(best, cosine(a.token(p), b.token(q)));
        CHECK(h[p] == doctest::Approx(best).epsilon(1e-9));
      }
    }
  }

  TEST_CASE("zero tokens and dim mismatches are rejected") {
    CHECK(test::error_of([] { FeatureMap(2, 2, {1, 0, 0, 0}); }) == ErrorCode::kZeroToken);
    const FeatureMap a(1, 2, {1, 0}), b(1, 3, {1, 0, 0});
    CHECK(test::error_of([&] { dift_heatmap(a, b); }) == ErrorCode::kDimMismatch);
    CHECK(test::error_of([] { motion_score(std::vector<double>{}); }) == ErrorCode::kEmptyHeatmap);
  }

  TEST_CASE("motion score is the arithmetic mean") {
    CHECK(motion_score(std::vector<double>{1, 1, 1}) == 1.0);
    CHECK(motion_score(std::vector<double>{1.0, 0.0}) == 0.5);
    Rng rng(3);
    std::vector<double> h(50);
    double sum = 0;
    for (auto& v : h) sum += (v = rng.uniform(-1, 1));
    CHECK(motion_score(h) == doctest::Approx(sum / 50).epsilon(1e-12));
  }

  TEST_CASE("token statistics") {
    // Tokens {1, 3}: a zero token is not a valid feature, the variance is shift invariant.
    const FeatureStats s = fit_stats(FeatureMap(2, 1, {1, 3}));
    CHECK(s.mean[0] == doctest::Approx(2.0));
    CHECK(s.covariance(0, 0) == doctest::Approx(2.0));
    const FeatureStats flat = fit_stats(FeatureMap(3, 2, {1, 2, 1, 2, 1, 2}));
    CHECK(flat.covariance.norm() == doctest::Approx(0.0));
    Rng rng(4);
    const FeatureMap m = random_map(rng, 30, 6);
    const FeatureStats got = fit_stats(m), want = two_pass(m);
    CHECK((got.mean - want.mean).norm() < 1e-9);
    CHECK((got.covariance - want.covariance).norm() < 1e-9);
  }

  TEST_CASE("1-D Frechet distances match the closed form") {
    // (mu1 - mu2)^2 + (sigma1 - sigma2)^2
    CHECK(frechet_distance(gaussian_1d(0, 1), gaussian_1d(1, 1)) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(frechet_distance(gaussian_1d(0, 4), gaussian_1d(0, 1)) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(frechet_distance(gaussian_1d(2, 9), gaussian_1d(-1, 1)) == doctest::Approx(9.0 + 4.0).epsilon(1e-12));
  }

  TEST_CASE("Frechet distance is symmetric, zero on itself and non-negative") {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
      const int d = 1 + static_cast<int>(rng.index(6));
      const FeatureStats a = random_psd(rng, d), b = random_psd(rng, d);
      CHECK(frechet_distance(a, a) == doctest::Approx(0.0).epsilon(1e-9));
      CHECK(frechet_distance(a, b) == doctest::Approx(frechet_distance(b, a)).epsilon(1e-9));
      CHECK(frechet_distance(a, b) >= 0.0);
    }
  }

  TEST_CASE("non-PSD covariance is rejected") {
    FeatureStats a = gaussian_1d(0, -1), b = gaussian_1d(0, 1);
    CHECK(test::error_of([&] { frechet_distance(a, b); }) == ErrorCode::kNotPsd);
  }

  TEST_CASE("fidelity adds the two distances") {
    Rng rng(6);
    const FeatureMap s = random_map(rng, 20, 3), e = random_map(rng, 20, 3), f = random_map(rng, 20, 3);
    CHECK(fidelity_score(s, s, s) == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(fidelity_score(s, s, e) == doctest::Approx(frechet_distance(fit_stats(s), fit_stats(e))).epsilon(1e-9));
    const double want = frechet_distance(fit_stats(f), fit_stats(s)) + frechet_distance(fit_stats(f), fit_stats(e));
    CHECK(fidelity_score(f, s, e) == doctest::Approx(want).epsilon(1e-9));
  }

  TEST_CASE("feature tensors round-trip") {
    Rng rng(7);
    const std::vector<FeatureMap> maps = {random_map(rng, 4, 3), random_map(rng, 4, 3)};
    const auto back = tensor_to_features(features_to_tensor(maps));
    REQUIRE(back.size() == 2);
    CHECK(back[1].token(2)[1] == doctest::Approx(maps[1].token(2)[1]).epsilon(1e-6));
  }
}
