#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace frag4d {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Quaternion stored as (w, x, y, z). Not necessarily unit.
struct Quat {
  double w = 1.0;
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  static Quat identity() { return {}; }
  static Quat from_axis_angle(const Vec3& axis, double angle);

  double norm() const;
  double dot(const Quat& o) const { return w * o.w + x * o.x + y * o.y + z * o.z; }
  Quat conjugate() const { return {w, -x, -y, -z}; }
  Quat operator-() const { return {-w, -x, -y, -z}; }
  Quat operator+(const Quat& o) const { return {w + o.w, x + o.x, y + o.y, z + o.z}; }
  Quat operator*(double s) const { return {w * s, x * s, y * s, z * s}; }

  /// Rotation matrix of the normalized quaternion.
  Mat3 to_matrix() const;
  Vec3 rotate(const Vec3& v) const;
};

/// Hamilton product a * b, without renormalization.
Quat quat_multiply(const Quat& a, const Quat& b);

/// Throws DegenerateQuaternion when the norm is at or below 1e-12.
Quat quat_normalize(const Quat& q);

/// Hamilton product renormalized to unit length.
Quat quat_compose(const Quat& a, const Quat& b);

/// Geodesic angle in [0, pi] of the rotation taking a to b.
double quat_angle(const Quat& a, const Quat& b);

struct Gaussian {
  Vec3 center = Vec3::Zero();
  Quat rotation;
  Vec3 scale = Vec3::Constant(0.01);
  double opacity = 1.0;
  Vec3 color = Vec3::Zero();
};

/// Ordered Gaussian set. Index identity persists across deformation.
struct GaussianCloud {
  std::vector<Gaussian> gaussians;
  std::optional<double> timestamp;

  std::size_t size() const { return gaussians.size(); }
  bool empty() const { return gaussians.empty(); }
  Gaussian& operator[](std::size_t i) { return gaussians[i]; }
  const Gaussian& operator[](std::size_t i) const { return gaussians[i]; }
};

/// Throws on an empty cloud, non-unit rotations, non-positive scales, or
/// opacity/color outside [0, 1].
void validate_cloud(const GaussianCloud& cloud);

/// Clamps opacity and color into [0, 1] in place.
void clamp_attributes(Gaussian& g);

struct AxisBox {
  Vec3 lo = Vec3::Zero();
  Vec3 hi = Vec3::Zero();
};

AxisBox bounding_box(const GaussianCloud& cloud);

/// Largest pairwise center distance.
double scene_diameter(const GaussianCloud& cloud);

/// k nearest neighbors of every center in a fixed (canonical) cloud, with the
/// canonical distances cached. Each row has min(k, n - 1) entries.
class NeighborGraph {
 public:
  NeighborGraph() = default;
  NeighborGraph(std::size_t points, std::size_t k, std::vector<std::uint32_t> indices,
                std::vector<double> distances);

  std::size_t points() const { return points_; }
  std::size_t k() const { return k_; }
  std::size_t pair_count() const { return indices_.size(); }
  std::span<const std::uint32_t> neighbors(std::size_t i) const {
    return {indices_.data() + i * k_, k_};
  }
  std::span<const double> distances(std::size_t i) const {
    return {distances_.data() + i * k_, k_};
  }

 private:
  std::size_t points_ = 0;
  std::size_t k_ = 0;
  std::vector<std::uint32_t> indices_;
  std::vector<double> distances_;
};

/// Exact Euclidean k-NN over centers; ties go to the lower index.
NeighborGraph build_neighbors(const GaussianCloud& cloud, std::size_t k = 8);

/// Per-point displacement, rotation increment and log-scale change.
struct Deformation {
  std::vector<Vec3> dp;
  std::vector<Quat> dr;
  std::vector<Vec3> ds;

  static Deformation identity(std::size_t n);
  std::size_t size() const { return dp.size(); }
};

/// mu' = mu + dp, q' = normalize(dr * q), s' = s * exp(ds). Opacity and
/// color pass through untouched.
GaussianCloud apply_deformation(const GaussianCloud& cloud, const Deformation& d);

}  // namespace frag4d
