#include "frag4d/scene.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "frag4d/error.hpp"

namespace frag4d {

Quat Quat::from_axis_angle(const Vec3& axis, double angle) {
  const Vec3 a = axis.normalized();
  const double h = 0.5 * angle;
  const double s = std::sin(h);
  return {std::cos(h), a.x() * s, a.y() * s, a.z() * s};
}

double Quat::norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

Mat3 Quat::to_matrix() const {
  const Quat q = quat_normalize(*this);
  Mat3 m;
  m << 1 - 2 * (q.y * q.y + q.z * q.z), 2 * (q.x * q.y - q.w * q.z), 2 * (q.x * q.z + q.w * q.y),
      2 * (q.x * q.y + q.w * q.z), 1 - 2 * (q.x * q.x + q.z * q.z), 2 * (q.y * q.z - q.w * q.x),
      2 * (q.x * q.z - q.w * q.y), 2 * (q.y * q.z + q.w * q.x), 1 - 2 * (q.x * q.x + q.y * q.y);
  return m;
}

Vec3 Quat::rotate(const Vec3& v) const { return to_matrix() * v; }

Quat quat_multiply(const Quat& a, const Quat& b) {
  return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
          a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
          a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
          a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
}

Quat quat_normalize(const Quat& q) {
  const double n = q.norm();
  if (!(n > 1e-12)) fail(ErrorCode::kDegenerateQuaternion, "quaternion norm too small");
  return q * (1.0 / n);
}

Quat quat_compose(const Quat& a, const Quat& b) {
  return quat_normalize(quat_multiply(a, b));
}

double quat_angle(const Quat& a, const Quat& b) {
  const double d = std::abs(quat_normalize(a).dot(quat_normalize(b)));
  return 2.0 * std::acos(std::min(1.0, d));
}

void validate_cloud(const GaussianCloud& cloud) {
  if (cloud.empty()) fail(ErrorCode::kEmptyCloud, "cloud has no Gaussians");
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Gaussian& g = cloud[i];
    const auto where = " at Gaussian " + std::to_string(i);
    if (!g.center.allFinite()) fail(ErrorCode::kInvalidAttribute, "non-finite center" + where);
    if (std::abs(g.rotation.norm() - 1.0) > 1e-6)
      fail(ErrorCode::kNonUnitRotation, "rotation not unit" + where);
    if (!(g.scale.minCoeff() > 0.0) || !g.scale.allFinite())
      fail(ErrorCode::kInvalidAttribute, "non-positive scale" + where);
    if (!(g.opacity >= 0.0 && g.opacity <= 1.0))
      fail(ErrorCode::kInvalidAttribute, "opacity outside [0,1]" + where);
    if (!(g.color.minCoeff() >= 0.0 && g.color.maxCoeff() <= 1.0))
      fail(ErrorCode::kInvalidAttribute, "color outside [0,1]" + where);
  }
}

void clamp_attributes(Gaussian& g) {
  g.opacity = std::clamp(g.opacity, 0.0, 1.0);
  for (int c = 0; c < 3; ++c) g.color[c] = std::clamp(g.color[c], 0.0, 1.0);
}

AxisBox bounding_box(const GaussianCloud& cloud) {
  if (cloud.empty()) fail(ErrorCode::kEmptyCloud, "bounding box of empty cloud");
  AxisBox box{cloud[0].center, cloud[0].center};
  for (const auto& g : cloud.gaussians) {
    box.lo = box.lo.cwiseMin(g.center);
    box.hi = box.hi.cwiseMax(g.center);
  }
  return box;
}

double scene_diameter(const GaussianCloud& cloud) {
  double best = 0.0;
  for (std::size_t i = 0; i < cloud.size(); ++i)
    for (std::size_t j = i + 1; j < cloud.size(); ++j)
      best = std::max(best, (cloud[i].center - cloud[j].center).squaredNorm());
  return std::sqrt(best);
}

NeighborGraph::NeighborGraph(std::size_t points, std::size_t k,
                             std::vector<std::uint32_t> indices,
                             std::vector<double> distances)
    : points_(points), k_(k), indices_(std::move(indices)), distances_(std::move(distances)) {}

NeighborGraph build_neighbors(const GaussianCloud& cloud, std::size_t k) {
  const std::size_t n = cloud.size();
  if (n < 2) fail(ErrorCode::kCloudTooSmall, "need at least 2 points for a neighbor graph");
  if (k == 0) fail(ErrorCode::kInvalidParams, "k must be positive");
  const std::size_t kk = std::min(k, n - 1);

  std::vector<std::uint32_t> indices(n * kk);
  std::vector<double> distances(n * kk);
  std::vector<std::pair<double, std::uint32_t>> candidates(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t c = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      candidates[c++] = {(cloud[i].center - cloud[j].center).squaredNorm(),
                         static_cast<std::uint32_t>(j)};
    }
    // pair ordering compares distance first, then index: lower index wins ties
    std::partial_sort(candidates.begin(), candidates.begin() + kk, candidates.end());
    for (std::size_t m = 0; m < kk; ++m) {
      const double d = std::sqrt(candidates[m].first);
      if (!(d > 0.0))
        fail(ErrorCode::kCoincidentPoints,
             "points " + std::to_string(i) + " and " + std::to_string(candidates[m].second) +
                 " share a center");
      indices[i * kk + m] = candidates[m].second;
      distances[i * kk + m] = d;
    }
  }
  return NeighborGraph(n, kk, std::move(indices), std::move(distances));
}

Deformation Deformation::identity(std::size_t n) {
  Deformation d;
  d.dp.assign(n, Vec3::Zero());
  d.dr.assign(n, Quat::identity());
  d.ds.assign(n, Vec3::Zero());
  return d;
}

GaussianCloud apply_deformation(const GaussianCloud& cloud, const Deformation& d) {
  if (d.dp.size() != cloud.size() || d.dr.size() != cloud.size() ||
      d.ds.size() != cloud.size())
    fail(ErrorCode::kCardinalityMismatch, "deformation size " + std::to_string(d.dp.size()) +
                                              " vs cloud size " + std::to_string(cloud.size()));
  GaussianCloud out = cloud;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    Gaussian& g = out[i];
    g.center = cloud[i].center + d.dp[i];
    g.rotation = quat_compose(d.dr[i], cloud[i].rotation);
    g.scale = cloud[i].scale.cwiseProduct(d.ds[i].array().exp().matrix());
  }
  return out;
}

}  // namespace frag4d
