#include "frag4d/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <set>

#include "frag4d/error.hpp"
#include "frag4d/optimize.hpp"
#include "frag4d/random.hpp"
#include "json.hpp"

namespace frag4d {
namespace {

constexpr double kDeg = std::numbers::pi / 180.0;
constexpr double kSubW = 8.0;

Vec3 hue(double t) {
  // Saturated color wheel, t in [0, 1).
  const double h = 6.0 * (t - std::floor(t));
  const double x = 1.0 - std::abs(std::fmod(h, 2.0) - 1.0);
  Vec3 c;
  if (h < 1) c = {1, x, 0};
  else if (h < 2) c = {x, 1, 0};
  else if (h < 3) c = {0, 1, x};
  else if (h < 4) c = {0, x, 1};
  else if (h < 5) c = {x, 0, 1};
  else c = {1, 0, x};
  return 0.15 + 0.8 * c.array();
}

// Deterministic random color of the xy texture cell containing p.
Vec3 cell_color(std::uint64_t seed, const Vec3& p, double size) {
  const auto cx = static_cast<std::int64_t>(std::floor(p.x() / size));
  const auto cy = static_cast<std::int64_t>(std::floor(p.y() / size));
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(cx * 73856093) ^ static_cast<std::uint64_t>(cy * 19349663)));
  return hue(rng.uniform(0.0, 1.0)) * rng.uniform(0.5, 1.0);
}

Vec3 uniform_in_box(Rng& rng, const Vec3& lo, const Vec3& hi) {
  return {rng.uniform(lo.x(), hi.x()), rng.uniform(lo.y(), hi.y()), rng.uniform(lo.z(), hi.z())};
}

Gaussian make_point(const Vec3& center, double scale, const Vec3& color) {
  Gaussian g;
  g.center = center;
  g.scale = Vec3::Constant(scale);
  g.opacity = 0.9;
  g.color = color.cwiseMax(0.0).cwiseMin(1.0);
  return g;
}

double fill_scale(double volume, std::size_t count) {
  return 0.6 * std::cbrt(volume / static_cast<double>(std::max<std::size_t>(count, 1)));
}

Quat noise_rotation(std::uint64_t seed, std::size_t g, int frame, double sd) {
  Rng rng(derive_seed(seed, (static_cast<std::uint64_t>(g) << 20) ^ static_cast<std::uint64_t>(frame)));
  Vec3 axis(rng.normal(), rng.normal(), rng.normal());
  if (axis.norm() < 1e-12) axis = Vec3::UnitZ();
  return Quat::from_axis_angle(axis.normalized(), rng.normal(0.0, sd));
}

}  // namespace

Scenario scenario_from_string(const std::string& name) {
  if (name == "rigid-orbit") return Scenario::kRigidOrbit;
  if (name == "two-cluster-articulation") return Scenario::kTwoClusterArticulation;
  if (name == "hinge-bend") return Scenario::kHingeBend;
  if (name == "noisy-rotation") return Scenario::kNoisyRotation;
  fail(ErrorCode::kBadSpec, "unknown scenario '" + name + "'");
}

std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::kRigidOrbit: return "rigid-orbit";
    case Scenario::kTwoClusterArticulation: return "two-cluster-articulation";
    case Scenario::kHingeBend: return "hinge-bend";
    case Scenario::kNoisyRotation: return "noisy-rotation";
  }
  return "unknown";
}

void ScenarioSpec::validate() const {
  if (frames < 2) fail(ErrorCode::kBadSpec, "frame count T must be >= 2");
  if (motion_frames < 0) fail(ErrorCode::kBadSpec, "motion_frames must be >= 0");
  if (points < 2) fail(ErrorCode::kBadSpec, "need at least 2 points");
  if (!std::isfinite(amplitude_deg) || !std::isfinite(noise_deg) || noise_deg < 0.0)
    fail(ErrorCode::kBadSpec, "amplitude and noise must be finite, noise >= 0");
  if (views < 1 || width < 8 || height < 8) fail(ErrorCode::kBadSpec, "need >= 1 view of at least 8x8 pixels");
  if (!(radius > 0.0) || !(fov_deg > 0.0 && fov_deg < 180.0)) fail(ErrorCode::kBadSpec, "invalid camera rig");
}

SynthModel::SynthModel(const ScenarioSpec& spec) : spec_(spec) {
  spec_.validate();
  Rng rng(derive_seed(spec.seed, 0x5eed));
  const std::size_t n = spec.points;
  switch (spec.scenario) {
    case Scenario::kRigidOrbit: {
      // Ellipsoid blob spinning about the vertical axis.
      const Vec3 radii(0.3, 0.22, 0.26);
      const double s = fill_scale(4.0 / 3.0 * std::numbers::pi * radii.prod(), n);
      while (base_.size() < n) {
        const Vec3 q = uniform_in_box(rng, -Vec3::Ones(), Vec3::Ones());
        if (q.squaredNorm() > 1.0) continue;
        const Vec3 p = q.cwiseProduct(radii);
        base_.gaussians.push_back(make_point(p, s, hue(0.5 * std::atan2(p.z(), p.x()) / std::numbers::pi + 0.25 * q.y())));
      }
      cluster_.assign(n, 0);
      axis_ = Vec3::UnitY();
      break;
    }
    case Scenario::kTwoClusterArticulation: {
      // Static body plus an arm swinging about a pivot on the z axis.
      const Vec3 body_lo(-0.3, -0.22, -0.14), body_hi(0.02, 0.22, 0.14);
      const Vec3 arm_lo(0.02, 0.05, -0.06), arm_hi(0.42, 0.17, 0.06);
      const double body_v = (body_hi - body_lo).prod(), arm_v = (arm_hi - arm_lo).prod();
      const auto arm_n = static_cast<std::size_t>(std::lround(static_cast<double>(n) * arm_v / (arm_v + body_v)));
      const double s = fill_scale(body_v + arm_v, n);
      for (std::size_t i = 0; i < n - arm_n; ++i) {
        const Vec3 p = uniform_in_box(rng, body_lo, body_hi);
        const double t = (p.y() - body_lo.y()) / (body_hi.y() - body_lo.y());
        base_.gaussians.push_back(make_point(p, s, Vec3(0.15 + 0.2 * t, 0.35 + 0.4 * t, 0.9 - 0.3 * t)));
        cluster_.push_back(0);
      }
      for (std::size_t i = 0; i < arm_n; ++i) {
        const Vec3 p = uniform_in_box(rng, arm_lo, arm_hi);
        const double t = (p.x() - arm_lo.x()) / (arm_hi.x() - arm_lo.x());
        base_.gaussians.push_back(make_point(p, s, Vec3(0.95, 0.2 + 0.7 * t, 0.1)));
        cluster_.push_back(1);
      }
      cluster_count_ = 2;
      axis_ = Vec3::UnitZ();
      pivot_ = Vec3(0.02, 0.11, 0.0);
      break;
    }
    case Scenario::kHingeBend: {
      // Thin plate with a random cell texture; the x > 0 half folds about the y axis.
      const Vec3 lo(-0.7, -0.7, -0.02), hi(0.7, 0.7, 0.02);
      const double s = fill_scale((hi - lo).x() * (hi - lo).y() * 0.04, n);
      for (std::size_t i = 0; i < n; ++i) {
        Vec3 p = uniform_in_box(rng, lo, hi);
        if (p.x() == 0.0) p.x() = 1e-9;
        base_.gaussians.push_back(make_point(p, s, cell_color(spec.seed, p, 0.08)));
        cluster_.push_back(p.x() > 0.0 ? 1 : 0);
      }
      cluster_count_ = 2;
      axis_ = Vec3::UnitY();
      break;
    }
    case Scenario::kNoisyRotation: {
      // Planar grid; every Gaussian spins in place about z.
      const auto side = static_cast<std::size_t>(std::max(2.0, std::floor(std::sqrt(static_cast<double>(n)))));
      const double spacing = 0.05;
      for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x) {
          const Vec3 p((x - 0.5 * (side - 1)) * spacing, (y - 0.5 * (side - 1)) * spacing, 0.0);
          Gaussian g = make_point(p, 0.35 * spacing, hue(static_cast<double>(x + y) / (2.0 * side)));
          g.scale = Vec3(0.4, 0.3, 0.2) * spacing;
          base_.gaussians.push_back(g);
          cluster_.push_back(0);
        }
      axis_ = Vec3::UnitZ();
      break;
    }
  }
}

double SynthModel::angle(double u) const {
  const double m = spec_.ramp_frames();
  return spec_.amplitude_deg * kDeg * std::clamp(u, 0.0, m) / m;
}

RigidMotion SynthModel::motion(int cluster, double u) const {
  RigidMotion m;
  m.pivot = pivot_;
  switch (spec_.scenario) {
    case Scenario::kRigidOrbit:
      m.rotation = Quat::from_axis_angle(axis_, angle(u));
      break;
    case Scenario::kTwoClusterArticulation:
    case Scenario::kHingeBend:
      if (cluster == 1) m.rotation = Quat::from_axis_angle(axis_, angle(u));
      break;
    case Scenario::kNoisyRotation:
      break;  // centers stay put
  }
  return m;
}

GaussianCloud SynthModel::cloud_at(double u) const {
  GaussianCloud out = base_;
  std::vector<RigidMotion> motions;
  for (int c = 0; c < cluster_count_; ++c) motions.push_back(motion(c, u));
  const bool noisy = spec_.scenario == Scenario::kNoisyRotation;
  const Quat spin = Quat::from_axis_angle(axis_, angle(u));
  const double rounded = std::round(u);
  const bool integral = std::abs(u - rounded) < 1e-12;
  for (std::size_t i = 0; i < out.size(); ++i) {
    Gaussian& g = out[i];
    const RigidMotion& m = motions[static_cast<std::size_t>(cluster_[i])];
    g.center = m.apply(g.center);
    g.rotation = quat_compose(noisy ? spin : m.rotation, g.rotation);
    if (noisy && integral && spec_.noise_deg > 0.0)
      g.rotation = quat_compose(noise_rotation(spec_.seed, i, static_cast<int>(rounded), spec_.noise_deg * kDeg),
                                g.rotation);
  }
  out.timestamp = u;
  return out;
}

FeatureMap patch_features(const Image& image, int patch) {
  if (image.channels < 3 || patch < 4 || patch % 4 != 0 || image.width % patch != 0 || image.height % patch != 0)
    fail(ErrorCode::kBadShape, "patch features need an RGB image tiled by the patch size (a multiple of 4)");
  const int nx = image.width / patch, ny = image.height / patch, cell = patch / 4;
  constexpr std::size_t kDim = 53;
  std::vector<double> values;
  values.reserve(static_cast<std::size_t>(nx * ny) * kDim);
  auto lum = [&](int x, int y) {
    x = std::clamp(x, 0, image.width - 1);
    y = std::clamp(y, 0, image.height - 1);
    return (image.at(x, y, 0) + image.at(x, y, 1) + image.at(x, y, 2)) / 3.0;
  };
  for (int py = 0; py < ny; ++py)
    for (int px = 0; px < nx; ++px) {
      Vec3 color = Vec3::Zero();
      double grad = 0.0;
      std::array<Vec3, 16> sub{};
      sub.fill(Vec3::Zero());
      for (int y = py * patch; y < (py + 1) * patch; ++y)
        for (int x = px * patch; x < (px + 1) * patch; ++x) {
          for (int c = 0; c < 3; ++c) color[c] += image.at(x, y, c);
          const double gx = 0.5 * (lum(x + 1, y) - lum(x - 1, y));
          const double gy = 0.5 * (lum(x, y + 1) - lum(x, y - 1));
          grad += std::sqrt(gx * gx + gy * gy);
          sub[static_cast<std::size_t>(((y - py * patch) / cell) * 4 + (x - px * patch) / cell)] +=
              Vec3(image.at(x, y, 0), image.at(x, y, 1), image.at(x, y, 2));
        }
      const double area = static_cast<double>(patch * patch);
      color /= area;
      grad /= area;
      values.insert(values.end(), {color.x() - 0.5, color.y() - 0.5, color.z() - 0.5, 2.0 * grad});
      // Centered sub-block layout: sensitive to shifts of a few pixels.
      for (const Vec3& v : sub)
        for (int c = 0; c < 3; ++c) values.push_back(kSubW * (v[c] / (cell * cell) - color[c]));
      values.push_back(0.05);
    }
  return FeatureMap(static_cast<std::size_t>(nx * ny), kDim, std::move(values));
}

Frame oracle_frame(const SynthModel& model, const Camera& camera, double u) {
  const RenderOutput out = render(model.cloud_at(u), camera);
  return Frame{out.image, patch_features(out.image)};
}

std::vector<FrameRef> OracleInterpolator::interpolate(const FrameRef& a, const FrameRef& b, int n,
                                                      const InterpolationRequest& request) const {
  if (n < 3) fail(ErrorCode::kTooFewFrames, "interpolation needs n >= 3");
  const double span = static_cast<double>(model_.spec().frames - 1);
  std::vector<FrameRef> out(static_cast<std::size_t>(n));
  out.front() = a;
  out.back() = b;
  for (int k = 1; k < n - 1; ++k) {
    const double u = static_cast<double>(request.position(k, n)) / static_cast<double>(request.lattice) * span;
    out[static_cast<std::size_t>(k)] = std::make_shared<const Frame>(oracle_frame(model_, camera_, u));
  }
  return out;
}

Image mask_from_alpha(const Image& alpha) {
  Image m(alpha.width, alpha.height, 1);
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = alpha.data[i] > 0.5 ? 1.0 : 0.0;
  return m;
}

TrackSet make_tracks(const std::vector<GaussianCloud>& sequence, const Camera& camera,
                     const std::vector<std::size_t>& points) {
  TrackSet tracks(points.size(), sequence.size());
  const int w = camera.width, h = camera.height;
  for (std::size_t t = 0; t < sequence.size(); ++t) {
    const GaussianCloud& cloud = sequence[t];
    const auto proj = project(cloud, camera);
    std::vector<double> zbuf(static_cast<std::size_t>(w * h), std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < proj.size(); ++i) {
      if (!proj[i].visible) continue;
      const double r = std::max(proj[i].radius, 0.5);
      for (int y = std::max(0, static_cast<int>(std::floor(proj[i].v - r)));
           y <= std::min(h - 1, static_cast<int>(std::ceil(proj[i].v + r))); ++y)
        for (int x = std::max(0, static_cast<int>(std::floor(proj[i].u - r)));
             x <= std::min(w - 1, static_cast<int>(std::ceil(proj[i].u + r))); ++x) {
          const double dx = x - proj[i].u, dy = y - proj[i].v;
          if (dx * dx + dy * dy > r * r) continue;
          double& z = zbuf[static_cast<std::size_t>(y * w + x)];
          z = std::min(z, proj[i].depth);
        }
    }
    for (std::size_t k = 0; k < points.size(); ++k) {
      const Projection& p = proj[points[k]];
      tracks.at(k, t, 0) = p.u;
      tracks.at(k, t, 1) = p.v;
      tracks.at(k, t, 2) = p.depth;
      const int x = static_cast<int>(std::lround(p.u)), y = static_cast<int>(std::lround(p.v));
      bool visible = p.visible && x >= 0 && y >= 0 && x < w && y < h;
      if (visible) {
        const double tol = 3.0 * cloud[points[k]].scale.mean();
        visible = p.depth <= zbuf[static_cast<std::size_t>(y * w + x)] + tol;
      }
      tracks.at(k, t, 3) = visible ? 1.0 : 0.0;
    }
  }
  return tracks;
}

SynthDataset generate(const ScenarioSpec& spec) {
  const SynthModel model(spec);
  SynthDataset d;
  d.spec = spec;
  for (int t = 0; t < spec.frames; ++t) d.sequence.push_back(model.cloud_at(t));
  RigParams rig;
  rig.views = spec.views;
  rig.width = spec.width;
  rig.height = spec.height;
  rig.radius = spec.radius;
  rig.fov_deg = spec.fov_deg;
  rig.azimuth_offset_deg = spec.azimuth_offset_deg;
  d.cameras = orbit_rig(rig);
  d.frames.resize(d.cameras.size());
  d.masks.resize(d.cameras.size());
  for (std::size_t v = 0; v < d.cameras.size(); ++v)
    for (const auto& cloud : d.sequence) {
      const RenderOutput out = render(cloud, d.cameras[v]);
      d.frames[v].push_back(out.image);
      d.masks[v].push_back(mask_from_alpha(out.alpha));
    }
  const bool tileable = spec.width % 8 == 0 && spec.height % 8 == 0;
  if (tileable)
    for (const auto& img : d.frames[0]) d.features.push_back(patch_features(img));

  const std::size_t n = model.base().size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  const std::size_t count = std::min(spec.tracks, n);
  Rng rng(derive_seed(spec.seed, 0x7acc));
  for (std::size_t i = 0; i < count; ++i) std::swap(order[i], order[i + rng.index(n - i)]);
  d.track_points.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count));
  std::sort(d.track_points.begin(), d.track_points.end());
  d.tracks = make_tracks(d.sequence, d.cameras.front(), d.track_points);
  return d;
}

double trajectory_error(const SynthModel& model, const std::vector<GaussianCloud>& predicted,
                        const std::vector<double>& times, double u0) {
  if (predicted.empty() || predicted.size() != times.size())
    fail(ErrorCode::kSequenceMismatch, "one predicted cloud per time expected");
  const GaussianCloud truth0 = model.cloud_at(u0);
  const GaussianCloud& start = predicted.front();
  const std::size_t n = start.size();
  std::vector<int> cluster(n);
  std::vector<Vec3> anchor(n);
  for (std::size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < truth0.size(); ++j) {
      const double d2 = (truth0[j].center - start[i].center).squaredNorm();
      if (d2 < best) {
        best = d2;
        best_j = j;
      }
    }
    cluster[i] = model.clusters()[best_j];
    // Undo the cluster motion at u0 to get the point's rest position.
    const RigidMotion m0 = model.motion(cluster[i], u0);
    anchor[i] = m0.rotation.conjugate().rotate(start[i].center - m0.pivot - m0.translation) + m0.pivot;
  }
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t k = 0; k < predicted.size(); ++k) {
    if (predicted[k].size() != n) fail(ErrorCode::kSequenceMismatch, "predicted clouds differ in size");
    for (std::size_t i = 0; i < n; ++i) {
      const Vec3 truth = model.motion(cluster[i], times[k]).apply(anchor[i]);
      sum += (predicted[k][i].center - truth).norm();
      ++count;
    }
  }
  return sum / static_cast<double>(count);
}

std::string spec_to_json(const ScenarioSpec& s) {
  nlohmann::json j;
  j["scenario"] = to_string(s.scenario);
  j["points"] = s.points;
  j["amplitude_deg"] = s.amplitude_deg;
  j["frames"] = s.frames;
  j["motion_frames"] = s.motion_frames;
  j["views"] = s.views;
  j["width"] = s.width;
  j["height"] = s.height;
  j["radius"] = s.radius;
  j["fov_deg"] = s.fov_deg;
  j["azimuth_offset_deg"] = s.azimuth_offset_deg;
  j["noise_deg"] = s.noise_deg;
  j["tracks"] = s.tracks;
  j["seed"] = s.seed;
  return j.dump(2) + "\n";
}

ScenarioSpec spec_from_json(const std::string& text) {
  using nlohmann::json;
  ScenarioSpec s;
  try {
    const json j = json::parse(text);
    if (!j.is_object()) fail(ErrorCode::kBadSpec, "scenario spec must be an object");
    static const std::set<std::string> known = {"scenario", "points", "amplitude_deg", "frames", "motion_frames",
                                                "views", "width", "height", "radius", "fov_deg",
                                                "azimuth_offset_deg", "noise_deg", "tracks", "seed"};
    for (const auto& [key, value] : j.items())
      if (!known.count(key)) fail(ErrorCode::kBadSpec, "unknown scenario key '" + key + "'");
    if (j.contains("scenario")) s.scenario = scenario_from_string(j.at("scenario").get<std::string>());
    auto take = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    take("points", s.points);
    take("amplitude_deg", s.amplitude_deg);
    take("frames", s.frames);
    take("motion_frames", s.motion_frames);
    take("views", s.views);
    take("width", s.width);
    take("height", s.height);
    take("radius", s.radius);
    take("fov_deg", s.fov_deg);
    take("azimuth_offset_deg", s.azimuth_offset_deg);
    take("noise_deg", s.noise_deg);
    take("tracks", s.tracks);
    take("seed", s.seed);
  } catch (const json::exception& e) {
    fail(ErrorCode::kBadSpec, std::string("scenario spec: ") + e.what());
  }
  s.validate();
  return s;
}

void write_dataset(const SynthDataset& data, const std::filesystem::path& dir) {
  for (std::size_t t = 0; t < data.sequence.size(); ++t)
    write_cloud(data.sequence[t], dir / "sequence" / ("frame_" + std::to_string(t) + ".ply"));
  FragmentSupervision sup;
  for (std::size_t v = 0; v < data.cameras.size(); ++v) {
    ViewSupervision view{data.cameras[v], data.frames[v], data.masks[v]};
    if (v == 0)
      sup.reference = std::move(view);
    else
      sup.extra.push_back(std::move(view));
  }
  save_supervision(sup, dir / "views");
  if (!data.features.empty()) write_tensor(features_to_tensor(data.features), dir / "features.tnsr");
  write_tensor(tracks_to_tensor(data.tracks), dir / "tracks.tnsr");
  write_text(dir / "spec.json", spec_to_json(data.spec));
}

}  // namespace frag4d
