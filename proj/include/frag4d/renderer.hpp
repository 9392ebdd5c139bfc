#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "frag4d/image.hpp"
#include "frag4d/scene.hpp"

namespace frag4d {

/// Pinhole camera. Camera frame: x right, y down, z forward (looking at the
/// orbit center). Pixel (i, j) samples the continuous image point (i, j).
struct Camera {
  int width = 64;
  int height = 64;
  double focal = 64.0;
  Mat3 rotation = Mat3::Identity();  // world -> camera
  Vec3 translation = Vec3::Zero();   // world -> camera
  double radius = 1.5;
  double azimuth_deg = 0.0;
  double elevation_deg = 0.0;

  Vec3 to_camera(const Vec3& world) const { return rotation * world + translation; }
  Vec3 to_world(const Vec3& cam) const { return rotation.transpose() * (cam - translation); }
  Vec3 position() const { return -rotation.transpose() * translation; }

  /// Throws InvalidCamera unless focal > 0, sizes positive, pose orthonormal.
  void validate() const;

  /// Camera on a sphere of `radius` around the origin looking at it; world y is up.
  static Camera orbit(int width, int height, double fov_deg, double radius, double azimuth_deg,
                      double elevation_deg);
};

inline constexpr double kDefaultOrbitRadius = 1.5;
inline constexpr double kDefaultFovDeg = 49.1;

struct RigParams {
  int views = 5;
  int width = 64;
  int height = 64;
  double radius = kDefaultOrbitRadius;
  double fov_deg = kDefaultFovDeg;
  double elevation_deg = 0.0;
  double azimuth_offset_deg = 0.0;
};

/// `views` cameras with evenly spaced azimuths starting at the offset.
std::vector<Camera> orbit_rig(const RigParams& rig);

struct Projection {
  double u = 0.0;
  double v = 0.0;
  double radius = 0.0;  // screen-space standard deviation in pixels
  double depth = 0.0;   // camera-frame z
  bool visible = false;
};

inline constexpr double kNearPlane = 1e-4;
inline constexpr double kTruncationSigmas = 3.0;
inline constexpr double kAlphaFloor = 1e-4;

/// Pinhole projection of every center; points with depth <= 1e-4 are culled.
/// Throws AllPointsCulled when nothing survives.
std::vector<Projection> project(const GaussianCloud& cloud, const Camera& camera);

struct Contributor {
  std::uint32_t index = 0;
  double alpha = 0.0;
  double transmittance = 0.0;  // product of (1 - alpha) over splats in front
};

/// Forward result. Contributor lists are kept for the backward pass.
struct RenderOutput {
  Image image;  // H x W x 3
  Image alpha;  // H x W x 1
  std::vector<Projection> projections;
  std::vector<std::uint32_t> order;  // splats sorted front to back
  std::vector<std::size_t> offsets;  // per-pixel range into contributors (size H*W + 1)
  std::vector<Contributor> contributors;
  std::uint64_t fingerprint = 0;

  std::span<const Contributor> pixel_contributors(std::size_t pixel) const {
    return {contributors.data() + offsets[pixel], offsets[pixel + 1] - offsets[pixel]};
  }
};

/// Depth-sorted (ties by index) front-to-back compositing of isotropic splats
/// over a black background:
///   alpha_i(x) = opacity_i * exp(-|x - c_i|^2 / (2 r_i^2)), truncated at 3 r_i
///   color = sum alpha_i c_i T_i,  alpha = 1 - prod (1 - alpha_i)
RenderOutput render(const GaussianCloud& cloud, const Camera& camera);

struct RenderGradients {
  std::vector<Vec3> center;
  std::vector<Vec3> scale;
  std::vector<Vec3> color;
  std::vector<double> opacity;
};

/// Exact gradients of the compositing expression given dL/dimage (H x W x 3)
/// and optional dL/dalpha (H x W x 1, may be empty). Throws StaleForwardState
/// if `forward` was not produced from this cloud and camera.
RenderGradients render_backward(const GaussianCloud& cloud, const Camera& camera,
                                const RenderOutput& forward, const Image& grad_image,
                                const Image& grad_alpha = {});

}  // namespace frag4d
