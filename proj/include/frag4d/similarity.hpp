#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "frag4d/io.hpp"

namespace frag4d {

/// One frame's token features: P tokens of dimension d, row-major.
/// All-zero tokens are rejected at construction (cosine undefined).
class FeatureMap {
 public:
  FeatureMap() = default;
  FeatureMap(std::size_t tokens, std::size_t dim, std::vector<double> values);

  std::size_t tokens() const { return tokens_; }
  std::size_t dim() const { return dim_; }
  std::span<const double> token(std::size_t p) const { return {values_.data() + p * dim_, dim_}; }
  const std::vector<double>& values() const { return values_; }

  bool operator==(const FeatureMap&) const = default;

 private:
  std::size_t tokens_ = 0;
  std::size_t dim_ = 0;
  std::vector<double> values_;
};

/// Feature sequence on disk: TNSR [T, P, d].
std::vector<FeatureMap> tensor_to_features(const Tensor& t);
Tensor features_to_tensor(std::span<const FeatureMap> maps);

using Heatmap = std::vector<double>;

/// H[p] = max_q cos(fi[p], fj[q]). Values clamped to [-1, 1].
Heatmap dift_heatmap(const FeatureMap& fi, const FeatureMap& fj);

/// Arithmetic mean of a heatmap; low values mean large motion.
double motion_score(std::span<const double> heatmap);

struct FeatureStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
};

/// Token mean and unbiased token covariance over all maps, symmetrized.
FeatureStats fit_stats(std::span<const FeatureMap> maps);
FeatureStats fit_stats(const FeatureMap& map);

/// Squared Frechet distance between Gaussians:
///   |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)
/// clamped at 0.
double frechet_distance(const FeatureStats& a, const FeatureStats& b);

/// d(frame, start) + d(frame, end); lower is more faithful to the inputs.
double fidelity_score(const FeatureMap& frame, const FeatureMap& start, const FeatureMap& end);

}  // namespace frag4d
