#include "frag4d/smoothing.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "frag4d/error.hpp"

namespace frag4d {
namespace {

// Nearest track visible at frame t within `radius` of p; ties to the lower index.
std::optional<std::size_t> associate(const Trajectories& tracks, std::size_t t, const Vec3& p, double radius) {
  std::optional<std::size_t> best;
  double best_d2 = radius * radius;
  for (std::size_t k = 0; k < tracks.points; ++k) {
    const auto& s = tracks.at(k, t);
    if (!s) continue;
    const double d2 = (*s - p).squaredNorm();
    if (d2 < best_d2 || (d2 == best_d2 && !best)) {
      best_d2 = d2;
      best = k;
    }
  }
  return best;
}

std::size_t smoothing_pass(std::vector<GaussianCloud>& seq, const Trajectories& tracks, const SmoothingParams& p) {
  const std::size_t frames = seq.size();
  const std::size_t w = std::min<std::size_t>(static_cast<std::size_t>(p.window), frames);
  const double needed = p.visibility_ratio * static_cast<double>(w);
  std::size_t updates = 0;
  for (std::size_t start = 0; start + w <= frames; ++start) {
    for (std::size_t g = 0; g < seq[start].size(); ++g) {
      const Gaussian& head = seq[start][g];
      const auto track = associate(tracks, start, head.center, p.association_factor * head.scale.mean());
      if (!track) continue;
      std::size_t visible = 0;
      for (std::size_t t = start; t < start + w; ++t) visible += tracks.at(*track, t) ? 1 : 0;
      if (static_cast<double>(visible) < needed) continue;
      for (std::size_t t = start + 1; t < start + w; ++t) {
        Gaussian& cur = seq[t][g];
        const Gaussian& prev = seq[t - 1][g];
        cur.rotation = slerp_ema_step(prev.rotation, cur.rotation, p.alpha);
        cur.scale = ema_scale_step(prev.scale, cur.scale, p.alpha);
      }
      ++updates;
    }
  }
  return updates;
}

}  // namespace

Trajectories lift_tracks(const TrackSet& tracks, const Camera& camera) {
  camera.validate();
  Trajectories out;
  out.points = tracks.points;
  out.frames = tracks.frames;
  out.samples.resize(tracks.points * tracks.frames);
  for (std::size_t p = 0; p < tracks.points; ++p)
    for (std::size_t t = 0; t < tracks.frames; ++t) {
      if (!tracks.visible(p, t)) continue;
      const double depth = tracks.at(p, t, 2);
      if (!(depth > 0.0))
        fail(ErrorCode::kInvalidDepth, "track " + std::to_string(p) + " frame " + std::to_string(t) +
                                           " has depth " + std::to_string(depth));
      const double u = tracks.at(p, t, 0), v = tracks.at(p, t, 1);
      const Vec3 cam(depth * (u - 0.5 * camera.width) / camera.focal, depth * (v - 0.5 * camera.height) / camera.focal,
                     depth);
      out.samples[p * tracks.frames + t] = camera.to_world(cam);
    }
  return out;
}

Quat slerp_ema_step(const Quat& q_prev, const Quat& q_curr, double alpha) {
  const Quat cur = quat_normalize(q_curr);
  Quat prev = quat_normalize(q_prev);
  if (prev.dot(cur) < 0.0) prev = -prev;
  if (prev.w == cur.w && prev.x == cur.x && prev.y == cur.y && prev.z == cur.z) return cur;
  const double theta = std::acos(std::clamp(prev.dot(cur), -1.0, 1.0));
  if (theta < 1e-5) return quat_normalize(cur * alpha + prev * (1.0 - alpha));
  const double s = std::sin(theta);
  return quat_normalize(cur * (std::sin(alpha * theta) / s) + prev * (std::sin((1.0 - alpha) * theta) / s));
}

Vec3 ema_scale_step(const Vec3& s_prev, const Vec3& s_curr, double alpha) {
  if (s_prev == s_curr) return s_curr;
  return alpha * s_curr + (1.0 - alpha) * s_prev;
}

void SmoothingParams::validate() const {
  if (window < 2) fail(ErrorCode::kInvalidParams, "smoothing window must be >= 2");
  if (!(alpha > 0.0 && alpha <= 1.0)) fail(ErrorCode::kInvalidParams, "EMA alpha must lie in (0, 1]");
  if (!(visibility_ratio > 0.0 && visibility_ratio <= 1.0))
    fail(ErrorCode::kInvalidParams, "visibility ratio must lie in (0, 1]");
  if (passes < 1 || passes > kMaxSmoothingPasses) fail(ErrorCode::kInvalidParams, "smoothing passes must be 1..5");
  if (!(association_factor > 0.0)) fail(ErrorCode::kInvalidParams, "association factor must be positive");
}

double rotational_variation(const std::vector<GaussianCloud>& sequence) {
  double total = 0.0;
  for (std::size_t t = 0; t + 1 < sequence.size(); ++t)
    for (std::size_t g = 0; g < sequence[t].size(); ++g)
      total += quat_angle(sequence[t][g].rotation, sequence[t + 1][g].rotation);
  return total;
}

std::vector<GaussianCloud> smooth_sequence(const std::vector<GaussianCloud>& sequence, const Trajectories& tracks,
                                           const SmoothingParams& params, SmoothingReport* report) {
  params.validate();
  if (sequence.empty()) fail(ErrorCode::kSequenceMismatch, "empty sequence");
  for (const auto& c : sequence)
    if (c.size() != sequence.front().size()) fail(ErrorCode::kSequenceMismatch, "frames differ in point count");
  if (tracks.frames != sequence.size())
    fail(ErrorCode::kSequenceMismatch, "tracks cover " + std::to_string(tracks.frames) + " frames, sequence has " +
                                           std::to_string(sequence.size()));
  std::vector<GaussianCloud> out = sequence;
  SmoothingReport r;
  r.variation_before = rotational_variation(out);
  double previous = r.variation_before;
  for (int pass = 0; pass < params.passes; ++pass) {
    r.smoothed_updates += smoothing_pass(out, tracks, params);
    ++r.passes_run;
    const double now = rotational_variation(out);
    const bool stalled = previous <= 0.0 || (previous - now) < params.min_improvement * previous;
    previous = now;
    if (stalled) break;
  }
  r.variation_after = previous;
  if (report != nullptr) *report = r;
  return out;
}

}  // namespace frag4d
