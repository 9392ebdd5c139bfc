#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "frag4d/hierarchy.hpp"
#include "frag4d/io.hpp"
#include "frag4d/renderer.hpp"
#include "frag4d/scene.hpp"
#include "frag4d/similarity.hpp"

namespace frag4d {

enum class Scenario { kRigidOrbit, kTwoClusterArticulation, kHingeBend, kNoisyRotation };

Scenario scenario_from_string(const std::string& name);
std::string to_string(Scenario s);

struct ScenarioSpec {
  Scenario scenario = Scenario::kTwoClusterArticulation;
  std::size_t points = 900;
  double amplitude_deg = 60.0;
  int frames = 16;          // T
  int motion_frames = 0;    // motion ramps over frames [0, M]; 0 means M = T
  int views = 5;
  int width = 64;
  int height = 64;
  double radius = kDefaultOrbitRadius;
  double fov_deg = kDefaultFovDeg;
  double azimuth_offset_deg = 0.0;
  double noise_deg = 10.0;  // per-frame rotation noise (noisy-rotation only)
  std::size_t tracks = 512;
  std::uint64_t seed = 0;

  /// Throws BadSpec.
  void validate() const;
  int ramp_frames() const { return motion_frames > 0 ? motion_frames : frames; }
};

struct RigidMotion {
  Quat rotation;
  Vec3 pivot = Vec3::Zero();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& p) const { return rotation.rotate(p - pivot) + pivot + translation; }
};

/// Closed-form ground truth: a base cloud whose points belong to rigid clusters
/// moving with per-cluster transforms of (fractional) frame time.
class SynthModel {
 public:
  explicit SynthModel(const ScenarioSpec& spec);

  const ScenarioSpec& spec() const { return spec_; }
  const GaussianCloud& base() const { return base_; }
  const std::vector<int>& clusters() const { return cluster_; }
  int cluster_count() const { return cluster_count_; }

  /// Motion angle in radians at frame time u: A * min(u, M) / M.
  double angle(double u) const;
  RigidMotion motion(int cluster, double u) const;
  /// Ground-truth cloud at frame time u in [0, T - 1]. Noisy-rotation adds
  /// the seeded per-frame noise at integer u.
  GaussianCloud cloud_at(double u) const;

 private:
  ScenarioSpec spec_;
  GaussianCloud base_;
  std::vector<int> cluster_;
  int cluster_count_ = 1;
  Vec3 axis_ = Vec3::UnitZ();
  Vec3 pivot_ = Vec3::Zero();
};

/// One 53-dim token per patch: mean color minus 0.5, mean gradient magnitude,
/// the 4x4 sub-block colors minus the patch mean, and a small constant.
/// `patch` must be a multiple of 4.
FeatureMap patch_features(const Image& image, int patch = 8);

/// Renders a ground-truth frame from `camera` with its features.
Frame oracle_frame(const SynthModel& model, const Camera& camera, double u);

/// Interpolator that renders the ground truth at the requested frame times.
class OracleInterpolator : public InterpolatorAdapter {
 public:
  OracleInterpolator(const SynthModel& model, Camera camera) : model_(model), camera_(std::move(camera)) {}
  std::vector<FrameRef> interpolate(const FrameRef& a, const FrameRef& b, int n,
                                    const InterpolationRequest& request) const override;

 private:
  const SynthModel& model_;
  Camera camera_;
};

struct SynthDataset {
  ScenarioSpec spec;
  std::vector<GaussianCloud> sequence;      // T ground-truth clouds
  std::vector<Camera> cameras;              // view 0 is the reference
  std::vector<std::vector<Image>> frames;   // [view][t]
  std::vector<std::vector<Image>> masks;    // [view][t]
  std::vector<FeatureMap> features;         // reference view, per frame
  TrackSet tracks;                          // reference view
  std::vector<std::size_t> track_points;    // Gaussian index of each track
};

SynthDataset generate(const ScenarioSpec& spec);

/// Projection of every center with a z-buffer visibility test.
TrackSet make_tracks(const std::vector<GaussianCloud>& sequence, const Camera& camera,
                     const std::vector<std::size_t>& points);

/// Alpha > 0.5.
Image mask_from_alpha(const Image& alpha);

/// Mean over points and frames of |predicted - truth|. Each predicted point is
/// assigned to the cluster of its nearest ground-truth point at frame time
/// `u0`, whose rigid motion from u0 defines its true trajectory.
double trajectory_error(const SynthModel& model, const std::vector<GaussianCloud>& predicted,
                        const std::vector<double>& times, double u0 = 0.0);

/// Writes sequence/, views (supervision bundle layout), features.tnsr,
/// tracks.tnsr and spec.json under `dir`.
void write_dataset(const SynthDataset& data, const std::filesystem::path& dir);

std::string spec_to_json(const ScenarioSpec& spec);
ScenarioSpec spec_from_json(const std::string& text);

}  // namespace frag4d
