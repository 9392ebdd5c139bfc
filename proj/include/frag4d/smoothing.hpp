#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "frag4d/io.hpp"
#include "frag4d/renderer.hpp"
#include "frag4d/scene.hpp"

namespace frag4d {

/// Lifted 3D track positions; absent where the track is not visible.
struct Trajectories {
  std::size_t points = 0;
  std::size_t frames = 0;
  std::vector<std::optional<Vec3>> samples;  // [points][frames]

  const std::optional<Vec3>& at(std::size_t p, std::size_t t) const { return samples[p * frames + t]; }
};

/// p = depth * K^-1 (u, v, 1) in camera coordinates, mapped to world.
/// Throws InvalidDepth for a visible sample with depth <= 0.
Trajectories lift_tracks(const TrackSet& tracks, const Camera& camera);

/// Spherical EMA step toward q_curr with weight alpha; q_prev is sign-aligned
/// first and small angles fall back to a normalized linear blend.
Quat slerp_ema_step(const Quat& q_prev, const Quat& q_curr, double alpha);

/// alpha * s_curr + (1 - alpha) * s_prev
Vec3 ema_scale_step(const Vec3& s_prev, const Vec3& s_curr, double alpha);

struct SmoothingParams {
  int window = 8;
  double alpha = 0.5;
  double visibility_ratio = 0.8;
  int passes = 2;                 // at most 5
  double min_improvement = 0.01;  // stop once a pass gains less than this fraction
  double association_factor = 2.0;

  void validate() const;
};

inline constexpr int kMaxSmoothingPasses = 5;

/// Sum over Gaussians and consecutive frames of the rotation angle between them.
double rotational_variation(const std::vector<GaussianCloud>& sequence);

struct SmoothingReport {
  double variation_before = 0.0;
  double variation_after = 0.0;
  int passes_run = 0;
  std::size_t smoothed_updates = 0;  // (Gaussian, window) pairs that were smoothed
};

/// Sliding windows (stride 1) of forward slerp-EMA on rotations and EMA on
/// scales, applied to Gaussians whose associated track is visible in enough
/// window frames. Positions, opacities and colors are never touched.
std::vector<GaussianCloud> smooth_sequence(const std::vector<GaussianCloud>& sequence, const Trajectories& tracks,
                                           const SmoothingParams& params, SmoothingReport* report = nullptr);

}  // namespace frag4d
