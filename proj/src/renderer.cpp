#include "frag4d/renderer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <numeric>

#include <Eigen/Geometry>
#include <Eigen/LU>

#include "frag4d/error.hpp"
#include "frag4d/parallel.hpp"

namespace frag4d {
namespace {

// Rows per band. Fixed so the reduction order never depends on the pool size.
constexpr int kBandRows = 8;

struct SplatBox {
  int x0, x1, y0, y1;  // inclusive pixel ranges, empty when x0 > x1
};

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fingerprint(const GaussianCloud& cloud, const Camera& camera) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& g : cloud.gaussians) {
    h = fnv1a(h, g.center.data(), sizeof(double) * 3);
    h = fnv1a(h, g.scale.data(), sizeof(double) * 3);
    h = fnv1a(h, g.color.data(), sizeof(double) * 3);
    h = fnv1a(h, &g.opacity, sizeof(double));
  }
  h = fnv1a(h, &camera.width, sizeof camera.width);
  h = fnv1a(h, &camera.height, sizeof camera.height);
  h = fnv1a(h, &camera.focal, sizeof camera.focal);
  h = fnv1a(h, camera.rotation.data(), sizeof(double) * 9);
  h = fnv1a(h, camera.translation.data(), sizeof(double) * 3);
  return h;
}

SplatBox splat_box(const Projection& p, const Camera& cam) {
  if (!p.visible) return {1, 0, 1, 0};
  const double reach = kTruncationSigmas * p.radius;
  SplatBox b;
  b.x0 = std::max(0, static_cast<int>(std::ceil(p.u - reach)));
  b.x1 = std::min(cam.width - 1, static_cast<int>(std::floor(p.u + reach)));
  b.y0 = std::max(0, static_cast<int>(std::ceil(p.v - reach)));
  b.y1 = std::min(cam.height - 1, static_cast<int>(std::floor(p.v + reach)));
  if (b.x0 > b.x1 || b.y0 > b.y1) return {1, 0, 1, 0};
  return b;
}

// Splat weight before opacity at pixel (x, y); false when truncated.
inline bool falloff(const Projection& p, int x, int y, double& weight, double& d2) {
  const double dx = x - p.u;
  const double dy = y - p.v;
  d2 = dx * dx + dy * dy;
  const double r2 = p.radius * p.radius;
  if (d2 > kTruncationSigmas * kTruncationSigmas * r2) return false;
  weight = std::exp(-d2 / (2.0 * r2));
  return true;
}

struct Binning {
  std::vector<SplatBox> boxes;
  std::vector<std::vector<std::uint32_t>> bands;  // depth-ordered splats per band
};

Binning bin_splats(const std::vector<Projection>& proj, const std::vector<std::uint32_t>& order,
                   const Camera& cam) {
  Binning b;
  b.boxes.resize(proj.size());
  for (std::size_t i = 0; i < proj.size(); ++i) b.boxes[i] = splat_box(proj[i], cam);
  const int band_count = (cam.height + kBandRows - 1) / kBandRows;
  b.bands.resize(static_cast<std::size_t>(band_count));
  for (auto idx : order) {
    const SplatBox& box = b.boxes[idx];
    if (box.x0 > box.x1) continue;
    for (int band = box.y0 / kBandRows; band <= box.y1 / kBandRows; ++band)
      b.bands[static_cast<std::size_t>(band)].push_back(idx);
  }
  return b;
}

}  // namespace

void Camera::validate() const {
  if (width <= 0 || height <= 0) fail(ErrorCode::kInvalidCamera, "image size must be positive");
  if (!(focal > 0.0)) fail(ErrorCode::kInvalidCamera, "focal must be positive");
  if ((rotation * rotation.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-6 ||
      std::abs(rotation.determinant() - 1.0) > 1e-6)
    fail(ErrorCode::kInvalidCamera, "camera rotation not orthonormal");
}

Camera Camera::orbit(int width, int height, double fov_deg, double radius, double azimuth_deg,
                     double elevation_deg) {
  if (!(fov_deg > 0.0 && fov_deg < 180.0)) fail(ErrorCode::kInvalidCamera, "fov must be in (0, 180)");
  if (!(radius > 0.0)) fail(ErrorCode::kInvalidCamera, "orbit radius must be positive");
  if (std::abs(elevation_deg) >= 89.9) fail(ErrorCode::kInvalidCamera, "elevation too close to the pole");
  const double az = azimuth_deg * std::numbers::pi / 180.0;
  const double el = elevation_deg * std::numbers::pi / 180.0;
  const Vec3 position = radius * Vec3(std::cos(el) * std::sin(az), std::sin(el), std::cos(el) * std::cos(az));
  const Vec3 forward = (-position).normalized();
  const Vec3 right = forward.cross(Vec3::UnitY()).normalized();
  const Vec3 down = forward.cross(right);
  Camera c;
  c.width = width;
  c.height = height;
  c.focal = 0.5 * width / std::tan(0.5 * fov_deg * std::numbers::pi / 180.0);
  c.rotation.row(0) = right.transpose();
  c.rotation.row(1) = down.transpose();
  c.rotation.row(2) = forward.transpose();
  c.translation = -c.rotation * position;
  c.radius = radius;
  c.azimuth_deg = azimuth_deg;
  c.elevation_deg = elevation_deg;
  c.validate();
  return c;
}

std::vector<Camera> orbit_rig(const RigParams& rig) {
  if (rig.views < 1) fail(ErrorCode::kInvalidParams, "rig needs at least one view");
  std::vector<Camera> cams;
  cams.reserve(static_cast<std::size_t>(rig.views));
  for (int v = 0; v < rig.views; ++v)
    cams.push_back(Camera::orbit(rig.width, rig.height, rig.fov_deg, rig.radius,
                                 rig.azimuth_offset_deg + 360.0 * v / rig.views, rig.elevation_deg));
  return cams;
}

std::vector<Projection> project(const GaussianCloud& cloud, const Camera& camera) {
  std::vector<Projection> out(cloud.size());
  bool any = false;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3 c = camera.to_camera(cloud[i].center);
    Projection& p = out[i];
    p.depth = c.z();
    if (!(c.z() > kNearPlane)) continue;
    p.u = camera.focal * c.x() / c.z() + 0.5 * camera.width;
    p.v = camera.focal * c.y() / c.z() + 0.5 * camera.height;
    p.radius = camera.focal * cloud[i].scale.mean() / c.z();
    p.visible = true;
    any = true;
  }
  if (!any) fail(ErrorCode::kAllPointsCulled, "no Gaussian in front of the camera");
  return out;
}

RenderOutput render(const GaussianCloud& cloud, const Camera& camera) {
  camera.validate();
  RenderOutput out;
  out.projections = project(cloud, camera);
  out.fingerprint = fingerprint(cloud, camera);
  const auto& proj = out.projections;

  out.order.resize(cloud.size());
  std::iota(out.order.begin(), out.order.end(), 0u);
  std::stable_sort(out.order.begin(), out.order.end(),
                   [&](std::uint32_t a, std::uint32_t b) { return proj[a].depth < proj[b].depth; });
  const Binning bins = bin_splats(proj, out.order, camera);

  const int w = camera.width, h = camera.height;
  out.image = Image(w, h, 3);
  out.alpha = Image(w, h, 1);
  const std::size_t band_count = bins.bands.size();
  std::vector<std::vector<Contributor>> band_contribs(band_count);
  std::vector<std::vector<std::size_t>> band_counts(band_count);

  parallel_for(band_count, [&](std::size_t band) {
    const int y0 = static_cast<int>(band) * kBandRows;
    const int y1 = std::min(h, y0 + kBandRows);
    auto& contribs = band_contribs[band];
    auto& counts = band_counts[band];
    counts.assign(static_cast<std::size_t>((y1 - y0) * w), 0);
    for (int y = y0; y < y1; ++y)
      for (int x = 0; x < w; ++x) {
        double t = 1.0;
        double rgb[3] = {0.0, 0.0, 0.0};
        std::size_t n = 0;
        for (auto idx : bins.bands[band]) {
          const SplatBox& box = bins.boxes[idx];
          if (x < box.x0 || x > box.x1 || y < box.y0 || y > box.y1) continue;
          double weight, d2;
          if (!falloff(proj[idx], x, y, weight, d2)) continue;
          const double a = cloud[idx].opacity * weight;
          if (a < kAlphaFloor) continue;
          contribs.push_back({idx, a, t});
          for (int c = 0; c < 3; ++c) rgb[c] += a * t * cloud[idx].color[c];
          t *= 1.0 - a;
          ++n;
        }
        for (int c = 0; c < 3; ++c) out.image.at(x, y, c) = rgb[c];
        out.alpha.at(x, y) = 1.0 - t;
        counts[static_cast<std::size_t>((y - y0) * w + x)] = n;
      }
  });

  out.offsets.assign(out.image.pixel_count() + 1, 0);
  std::size_t pixel = 0, total = 0;
  for (std::size_t band = 0; band < band_count; ++band)
    for (auto n : band_counts[band]) {
      out.offsets[pixel++] = total;
      total += n;
    }
  out.offsets[pixel] = total;
  out.contributors.reserve(total);
  for (auto& c : band_contribs) out.contributors.insert(out.contributors.end(), c.begin(), c.end());
  return out;
}

RenderGradients render_backward(const GaussianCloud& cloud, const Camera& camera,
                                const RenderOutput& forward, const Image& grad_image,
                                const Image& grad_alpha) {
  if (forward.fingerprint != fingerprint(cloud, camera) || forward.projections.size() != cloud.size())
    fail(ErrorCode::kStaleForwardState, "render_backward called with a different cloud or camera");
  const int w = camera.width, h = camera.height;
  if (grad_image.width != w || grad_image.height != h || grad_image.channels != 3)
    fail(ErrorCode::kResolutionMismatch, "grad_image shape mismatch");
  const bool use_alpha = !grad_alpha.empty();
  if (use_alpha && (grad_alpha.width != w || grad_alpha.height != h || grad_alpha.channels != 1))
    fail(ErrorCode::kResolutionMismatch, "grad_alpha shape mismatch");

  const std::size_t n = cloud.size();
  const auto& proj = forward.projections;
  const std::size_t band_count = static_cast<std::size_t>((h + kBandRows - 1) / kBandRows);
  // per band: du, dv, dr, dopacity, dcolor[3]
  constexpr std::size_t kSlots = 7;
  std::vector<std::vector<double>> partial(band_count);

  parallel_for(band_count, [&](std::size_t band) {
    auto& acc = partial[band];
    acc.assign(n * kSlots, 0.0);
    const int y0 = static_cast<int>(band) * kBandRows;
    const int y1 = std::min(h, y0 + kBandRows);
    for (int y = y0; y < y1; ++y)
      for (int x = 0; x < w; ++x) {
        const std::size_t pix = static_cast<std::size_t>(y) * w + x;
        const auto list = forward.pixel_contributors(pix);
        if (list.empty()) continue;
        const double gc[3] = {grad_image.data[3 * pix], grad_image.data[3 * pix + 1],
                              grad_image.data[3 * pix + 2]};
        const double ga = use_alpha ? grad_alpha.data[pix] : 0.0;
        double behind[3] = {0.0, 0.0, 0.0};  // color composited behind the current splat
        double behind_t = 1.0;               // transmittance of everything behind
        for (auto it = list.rbegin(); it != list.rend(); ++it) {
          const Contributor& k = *it;
          const Gaussian& g = cloud[k.index];
          double* slot = acc.data() + static_cast<std::size_t>(k.index) * kSlots;
          double g_alpha = ga * k.transmittance * behind_t;
          for (int c = 0; c < 3; ++c) {
            slot[4 + c] += k.alpha * k.transmittance * gc[c];
            g_alpha += k.transmittance * (g.color[c] - behind[c]) * gc[c];
          }
          for (int c = 0; c < 3; ++c) behind[c] = k.alpha * g.color[c] + (1.0 - k.alpha) * behind[c];
          behind_t *= 1.0 - k.alpha;

          const Projection& p = proj[k.index];
          const double dx = x - p.u, dy = y - p.v;
          const double r2 = p.radius * p.radius;
          const double ga_a = g_alpha * k.alpha;
          slot[0] += ga_a * dx / r2;
          slot[1] += ga_a * dy / r2;
          slot[2] += ga_a * (dx * dx + dy * dy) / (r2 * p.radius);
          slot[3] += g_alpha * (g.opacity > 0.0 ? k.alpha / g.opacity : 0.0);
        }
      }
  });

  std::vector<double> total(n * kSlots, 0.0);
  for (const auto& acc : partial)
    for (std::size_t i = 0; i < total.size(); ++i) total[i] += acc[i];

  RenderGradients grads;
  grads.center.assign(n, Vec3::Zero());
  grads.scale.assign(n, Vec3::Zero());
  grads.color.assign(n, Vec3::Zero());
  grads.opacity.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const Projection& p = proj[i];
    if (!p.visible) continue;
    const double* s = total.data() + i * kSlots;
    grads.opacity[i] = s[3];
    grads.color[i] = Vec3(s[4], s[5], s[6]);
    const Vec3 c = camera.to_camera(cloud[i].center);
    const double f = camera.focal, z = c.z();
    const double mean_scale = cloud[i].scale.mean();
    const Vec3 g_cam(s[0] * f / z, s[1] * f / z,
                     -(s[0] * f * c.x() + s[1] * f * c.y() + s[2] * f * mean_scale) / (z * z));
    grads.center[i] = camera.rotation.transpose() * g_cam;
    grads.scale[i] = Vec3::Constant(s[2] * f / (3.0 * z));
  }
  return grads;
}

}  // namespace frag4d
