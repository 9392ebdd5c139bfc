#include "frag4d/similarity.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include <Eigen/Eigenvalues>

#include "frag4d/error.hpp"

namespace frag4d {
namespace {

constexpr double kPsdTolerance = -1e-6;

std::vector<double> unit_rows(const FeatureMap& f) {
  std::vector<double> out(f.values());
  for (std::size_t p = 0; p < f.tokens(); ++p) {
    double n2 = 0.0;
    for (std::size_t k = 0; k < f.dim(); ++k) n2 += out[p * f.dim() + k] * out[p * f.dim() + k];
    const double inv = 1.0 / std::sqrt(n2);
    for (std::size_t k = 0; k < f.dim(); ++k) out[p * f.dim() + k] *= inv;
  }
  return out;
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(m);
  if (solver.info() != Eigen::Success) fail(ErrorCode::kEigenFailure, "eigendecomposition did not converge");
  const Eigen::VectorXd roots = solver.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return solver.eigenvectors() * roots.asDiagonal() * solver.eigenvectors().transpose();
}

void check_psd(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(m, Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success) fail(ErrorCode::kEigenFailure, "eigendecomposition did not converge");
  if (solver.eigenvalues().minCoeff() < kPsdTolerance)
    fail(ErrorCode::kNotPsd, "covariance has eigenvalue " + std::to_string(solver.eigenvalues().minCoeff()));
}

}  // namespace

FeatureMap::FeatureMap(std::size_t tokens, std::size_t dim, std::vector<double> values)
    : tokens_(tokens), dim_(dim), values_(std::move(values)) {
  if (tokens_ == 0 || dim_ == 0) fail(ErrorCode::kBadShape, "feature map needs P >= 1 and d >= 1");
  if (values_.size() != tokens_ * dim_) fail(ErrorCode::kBadShape, "feature value count mismatch");
  for (std::size_t p = 0; p < tokens_; ++p) {
    const auto t = token(p);
    bool nonzero = false;
    for (double v : t) {
      if (!std::isfinite(v)) fail(ErrorCode::kInvalidAttribute, "non-finite feature value");
      nonzero = nonzero || v != 0.0;
    }
    if (!nonzero) fail(ErrorCode::kZeroToken, "token " + std::to_string(p) + " is all zero");
  }
}

std::vector<FeatureMap> tensor_to_features(const Tensor& t) {
  if (t.ndim() != 3) fail(ErrorCode::kBadShape, "feature sequence must be [T,P,d]");
  const std::size_t frames = t.dims[0], tokens = t.dims[1], dim = t.dims[2];
  std::vector<FeatureMap> out;
  out.reserve(frames);
  for (std::size_t f = 0; f < frames; ++f) {
    const auto begin = t.data.begin() + static_cast<std::ptrdiff_t>(f * tokens * dim);
    out.emplace_back(tokens, dim, std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(tokens * dim)));
  }
  return out;
}

Tensor features_to_tensor(std::span<const FeatureMap> maps) {
  if (maps.empty()) fail(ErrorCode::kBadShape, "empty feature sequence");
  const auto tokens = maps.front().tokens(), dim = maps.front().dim();
  Tensor t({static_cast<std::uint32_t>(maps.size()), static_cast<std::uint32_t>(tokens),
            static_cast<std::uint32_t>(dim)});
  std::size_t pos = 0;
  for (const auto& m : maps) {
    if (m.tokens() != tokens || m.dim() != dim) fail(ErrorCode::kBadShape, "feature maps differ in shape");
    for (double v : m.values()) t.data[pos++] = static_cast<float>(v);
  }
  return t;
}

Heatmap dift_heatmap(const FeatureMap& fi, const FeatureMap& fj) {
  if (fi.dim() != fj.dim())
    fail(ErrorCode::kDimMismatch, "feature dims " + std::to_string(fi.dim()) + " vs " + std::to_string(fj.dim()));
  const std::size_t d = fi.dim();
  const auto a = unit_rows(fi);
  const auto b = unit_rows(fj);
  Heatmap out(fi.tokens());
  for (std::size_t p = 0; p < fi.tokens(); ++p) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t q = 0; q < fj.tokens(); ++q) {
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += a[p * d + k] * b[q * d + k];
      if (dot > best) best = dot;  // strict: first (lowest) q keeps ties
    }
    out[p] = std::clamp(best, -1.0, 1.0);
  }
  return out;
}

double motion_score(std::span<const double> heatmap) {
  if (heatmap.empty()) fail(ErrorCode::kEmptyHeatmap, "motion score of empty heatmap");
  double sum = 0.0;
  for (double v : heatmap) sum += v;
  return sum / static_cast<double>(heatmap.size());
}

FeatureStats fit_stats(std::span<const FeatureMap> maps) {
  if (maps.empty()) fail(ErrorCode::kTooFewTokens, "no feature maps");
  const std::size_t d = maps.front().dim();
  std::size_t n = 0;
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
  for (const auto& m : maps) {
    if (m.dim() != d) fail(ErrorCode::kDimMismatch, "feature maps differ in dim");
    for (std::size_t p = 0; p < m.tokens(); ++p)
      mean += Eigen::Map<const Eigen::VectorXd>(m.token(p).data(), static_cast<Eigen::Index>(d));
    n += m.tokens();
  }
  if (n < 2) fail(ErrorCode::kTooFewTokens, "covariance needs at least 2 tokens");
  mean /= static_cast<double>(n);
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  for (const auto& m : maps)
    for (std::size_t p = 0; p < m.tokens(); ++p) {
      const Eigen::VectorXd x =
          Eigen::Map<const Eigen::VectorXd>(m.token(p).data(), static_cast<Eigen::Index>(d)) - mean;
      cov.noalias() += x * x.transpose();
    }
  cov /= static_cast<double>(n - 1);
  const Eigen::MatrixXd sym = 0.5 * (cov + cov.transpose());
  return {mean, sym};
}

FeatureStats fit_stats(const FeatureMap& map) { return fit_stats(std::span<const FeatureMap>(&map, 1)); }

double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
  if (a.mean.size() != b.mean.size() || a.covariance.rows() != b.covariance.rows())
    fail(ErrorCode::kDimMismatch, "feature stats differ in dim");
  check_psd(a.covariance);
  check_psd(b.covariance);
  const Eigen::MatrixXd root_a = psd_sqrt(a.covariance);
  Eigen::MatrixXd inner = root_a * b.covariance * root_a;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(inner, Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success) fail(ErrorCode::kEigenFailure, "eigendecomposition did not converge");
  const double trace_root = solver.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d2 = (a.mean - b.mean).squaredNorm() + a.covariance.trace() + b.covariance.trace() -
                    2.0 * trace_root;
  return std::max(0.0, d2);
}

double fidelity_score(const FeatureMap& frame, const FeatureMap& start, const FeatureMap& end) {
  const FeatureStats s = fit_stats(frame);
  return frechet_distance(s, fit_stats(start)) + frechet_distance(s, fit_stats(end));
}

}  // namespace frag4d
