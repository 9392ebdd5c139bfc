#include "frag4d/optimize.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include <spdlog/spdlog.h>

#include "frag4d/error.hpp"
#include "frag4d/io.hpp"
#include "frag4d/random.hpp"
#include "json.hpp"

namespace frag4d {
namespace {

using nlohmann::json;

void check_finite(double value, const char* what) {
  if (!std::isfinite(value)) fail(ErrorCode::kDiverged, std::string(what) + " loss became non-finite");
}

void check_same_shape(const Image& a, const Image& b, const char* what) {
  if (a.width != b.width || a.height != b.height)
    fail(ErrorCode::kResolutionMismatch, std::string(what) + ": " + std::to_string(a.width) + "x" +
                                             std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" +
                                             std::to_string(b.height));
}

double sign(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

Vec3 json_vec(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }

}  // namespace

void LossWeights::validate() const {
  if (!(ref >= 0.0) || !(mask >= 0.0) || !(rigid >= 0.0))
    fail(ErrorCode::kInvalidWeights, "loss weights must be non-negative");
  if (ref == 0.0 && mask == 0.0 && rigid == 0.0) fail(ErrorCode::kInvalidWeights, "loss weights are all zero");
}

double total_loss(const LossWeights& w, double ref, double mask, double rigid) {
  return w.ref * ref + w.mask * mask + w.rigid * rigid;
}

ImageLoss mse_loss(const Image& rendered, const Image& target) {
  if (!rendered.same_shape(target)) fail(ErrorCode::kResolutionMismatch, "mse: image shapes differ");
  ImageLoss out;
  out.grad = Image(rendered.width, rendered.height, rendered.channels);
  const double inv = 1.0 / static_cast<double>(rendered.data.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < rendered.data.size(); ++i) {
    const double d = rendered.data[i] - target.data[i];
    sum += d * d;
    out.grad.data[i] = 2.0 * d * inv;
  }
  out.value = sum * inv;
  return out;
}

ImageLoss mask_loss(const Image& alpha, const Image& mask) {
  if (!alpha.same_shape(mask) || alpha.channels != 1) fail(ErrorCode::kResolutionMismatch, "mask: shapes differ");
  ImageLoss out;
  out.grad = Image(alpha.width, alpha.height, 1);
  const double inv = 1.0 / static_cast<double>(alpha.data.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < alpha.data.size(); ++i) {
    const double d = alpha.data[i] - mask.data[i];
    sum += std::abs(d);
    out.grad.data[i] = sign(d) * inv;
  }
  out.value = sum * inv;
  return out;
}

RigidLoss loss_rigid(const GaussianCloud& canonical, const GaussianCloud& deformed, const NeighborGraph& graph) {
  if (graph.points() != canonical.size() || graph.points() != deformed.size())
    fail(ErrorCode::kGraphCloudMismatch, "neighbor graph built for " + std::to_string(graph.points()) +
                                             " points, clouds have " + std::to_string(canonical.size()) + " and " +
                                             std::to_string(deformed.size()));
  RigidLoss out;
  out.grad.assign(deformed.size(), Vec3::Zero());
  const double pairs = static_cast<double>(graph.pair_count());
  if (pairs == 0.0) return out;
  double sum = 0.0;
  for (std::size_t i = 0; i < graph.points(); ++i) {
    const auto nbrs = graph.neighbors(i);
    const auto dist = graph.distances(i);
    for (std::size_t k = 0; k < nbrs.size(); ++k) {
      const Vec3 diff = deformed[i].center - deformed[nbrs[k]].center;
      const double d = diff.norm();
      sum += std::abs(d - dist[k]);
      if (d > 0.0) {
        const Vec3 g = sign(d - dist[k]) / (d * pairs) * diff;
        out.grad[i] += g;
        out.grad[nbrs[k]] -= g;
      }
    }
  }
  out.value = sum / pairs;
  return out;
}

void AdamState::step(std::span<double> params, std::span<const double> grad, double lr) {
  if (params.size() != m_.size() || grad.size() != m_.size())
    fail(ErrorCode::kCardinalityMismatch, "adam state size mismatch");
  ++steps_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad[i] * grad[i];
    params[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
  }
}

void AdamState::remap(const std::vector<std::int64_t>& source, std::size_t width) {
  std::vector<double> m(source.size() * width, 0.0), v(source.size() * width, 0.0);
  for (std::size_t i = 0; i < source.size(); ++i) {
    if (source[i] < 0) continue;
    const auto s = static_cast<std::size_t>(source[i]);
    for (std::size_t k = 0; k < width; ++k) {
      m[i * width + k] = m_[s * width + k];
      v[i * width + k] = v_[s * width + k];
    }
  }
  m_ = std::move(m);
  v_ = std::move(v);
}

double frame_tau(std::size_t k, std::size_t frames) {
  return frames < 2 ? 0.0 : static_cast<double>(k) / static_cast<double>(frames - 1);
}

DeformedRender render_deformed(const HexPlaneField& field, const GaussianCloud& canonical, double tau,
                               const Camera& camera, FieldTape* tape) {
  DeformedRender r;
  r.deformation = field_eval_batch(field, canonical, tau, tape);
  r.cloud = apply_deformation(canonical, r.deformation);
  r.output = render(r.cloud, camera);
  return r;
}

void accumulate_pullback(const GaussianCloud& deformed, const RenderGradients& g, double weight,
                         DeformationGrad& out) {
  // s' = s * exp(ds) gives ds' gradient g_s' * s'; the isotropic footprint
  // carries no rotation dependence, so dr receives nothing.
  for (std::size_t i = 0; i < deformed.size(); ++i) {
    out.dp[i] += weight * g.center[i];
    out.ds[i] += weight * g.scale[i].cwiseProduct(deformed[i].scale);
  }
}

FieldLoss loss_ref(const HexPlaneField& field, const GaussianCloud& canonical, const Camera& camera,
                   const std::vector<Image>& frames) {
  if (frames.empty()) fail(ErrorCode::kBadShape, "loss_ref needs at least one frame");
  FieldLoss out;
  out.grad.assign(field.params().size(), 0.0);
  const double inv = 1.0 / static_cast<double>(frames.size());
  for (std::size_t k = 0; k < frames.size(); ++k) {
    FieldTape tape;
    const DeformedRender r = render_deformed(field, canonical, frame_tau(k, frames.size()), camera, &tape);
    check_same_shape(r.output.image, frames[k], "loss_ref");
    const ImageLoss l = mse_loss(r.output.image, frames[k]);
    out.value += inv * l.value;
    const RenderGradients g = render_backward(r.cloud, camera, r.output, l.grad);
    DeformationGrad up = DeformationGrad::zeros(canonical.size());
    accumulate_pullback(r.cloud, g, inv, up);
    const FieldGradients fg = field_backward(field, tape, up);
    for (std::size_t i = 0; i < out.grad.size(); ++i) out.grad[i] += fg.values[i];
  }
  return out;
}

FieldLoss loss_mask(const HexPlaneField& field, const GaussianCloud& canonical, const Camera& camera,
                    const Image& mask, double tau) {
  FieldTape tape;
  const DeformedRender r = render_deformed(field, canonical, tau, camera, &tape);
  check_same_shape(r.output.alpha, mask, "loss_mask");
  const ImageLoss l = mask_loss(r.output.alpha, mask);
  const RenderGradients g =
      render_backward(r.cloud, camera, r.output, Image(camera.width, camera.height, 3), l.grad);
  DeformationGrad up = DeformationGrad::zeros(canonical.size());
  accumulate_pullback(r.cloud, g, 1.0, up);
  return {l.value, field_backward(field, tape, up).values};
}

void FragmentSupervision::validate() const {
  const std::size_t t = frame_count();
  if (t < 2) fail(ErrorCode::kBadShape, "supervision needs at least 2 frames");
  auto check_view = [&](const ViewSupervision& v, const char* name) {
    v.camera.validate();
    if (v.frames.size() != t) fail(ErrorCode::kBadShape, std::string(name) + " frame count differs");
    if (!v.masks.empty() && v.masks.size() != t) fail(ErrorCode::kBadShape, std::string(name) + " mask count differs");
    for (const auto& f : v.frames)
      if (f.width != v.camera.width || f.height != v.camera.height || f.channels != 3)
        fail(ErrorCode::kResolutionMismatch, std::string(name) + " frame does not match its camera");
    for (const auto& m : v.masks) {
      if (m.width != v.camera.width || m.height != v.camera.height || m.channels != 1)
        fail(ErrorCode::kResolutionMismatch, std::string(name) + " mask does not match its camera");
      for (double x : m.data)
        if (x != 0.0 && x != 1.0) fail(ErrorCode::kBadShape, std::string(name) + " mask is not binary");
    }
  };
  check_view(reference, "reference view");
  for (const auto& v : extra) check_view(v, "extra view");
}

std::string camera_to_json(const Camera& c) {
  json j;
  j["width"] = c.width;
  j["height"] = c.height;
  j["focal"] = c.focal;
  j["rotation"] = json::array({vec_json(c.rotation.row(0)), vec_json(c.rotation.row(1)), vec_json(c.rotation.row(2))});
  j["translation"] = vec_json(c.translation);
  j["radius"] = c.radius;
  j["azimuth_deg"] = c.azimuth_deg;
  j["elevation_deg"] = c.elevation_deg;
  return j.dump(2) + "\n";
}

Camera camera_from_json(const std::string& text) {
  Camera c;
  try {
    const json j = json::parse(text);
    c.width = j.at("width").get<int>();
    c.height = j.at("height").get<int>();
    c.focal = j.at("focal").get<double>();
    for (int r = 0; r < 3; ++r) c.rotation.row(r) = json_vec(j.at("rotation").at(static_cast<std::size_t>(r))).transpose();
    c.translation = json_vec(j.at("translation"));
    c.radius = j.at("radius").get<double>();
    c.azimuth_deg = j.at("azimuth_deg").get<double>();
    c.elevation_deg = j.at("elevation_deg").get<double>();
  } catch (const json::exception& e) {
    fail(ErrorCode::kSchemaMismatch, std::string("camera: ") + e.what());
  }
  c.validate();
  return c;
}

void save_supervision(const FragmentSupervision& sup, const std::filesystem::path& dir) {
  std::vector<const ViewSupervision*> views{&sup.reference};
  for (const auto& v : sup.extra) views.push_back(&v);
  for (std::size_t k = 0; k < views.size(); ++k) {
    const auto tag = std::to_string(k);
    write_text(dir / ("view_" + tag + ".json"), camera_to_json(views[k]->camera));
    write_tensor(images_to_tensor(views[k]->frames), dir / ("frames_" + tag + ".tnsr"));
    if (!views[k]->masks.empty()) write_tensor(images_to_tensor(views[k]->masks), dir / ("masks_" + tag + ".tnsr"));
  }
}

FragmentSupervision load_supervision(const std::filesystem::path& dir) {
  FragmentSupervision sup;
  if (!std::filesystem::exists(dir / "view_0.json"))
    fail(ErrorCode::kMissingArtifact, "no supervision bundle in " + dir.string());
  for (std::size_t k = 0;; ++k) {
    const auto tag = std::to_string(k);
    const auto cam_path = dir / ("view_" + tag + ".json");
    if (!std::filesystem::exists(cam_path)) break;
    ViewSupervision v;
    v.camera = camera_from_json(read_text(cam_path));
    const auto frames_path = dir / ("frames_" + tag + ".tnsr");
    if (!std::filesystem::exists(frames_path)) fail(ErrorCode::kMissingArtifact, "missing " + frames_path.string());
    v.frames = tensor_to_images(read_tensor(frames_path));
    const auto masks_path = dir / ("masks_" + tag + ".tnsr");
    if (std::filesystem::exists(masks_path)) v.masks = tensor_to_images(read_tensor(masks_path));
    if (k == 0)
      sup.reference = std::move(v);
    else
      sup.extra.push_back(std::move(v));
  }
  sup.validate();
  return sup;
}

namespace {

struct Ray {
  Vec3 origin;
  Vec3 dir;
};

Ray pixel_ray(const Camera& cam, double u, double v) {
  const Vec3 d_cam((u - 0.5 * cam.width) / cam.focal, (v - 0.5 * cam.height) / cam.focal, 1.0);
  return {cam.position(), (cam.rotation.transpose() * d_cam).normalized()};
}

bool inside_mask(const StaticView& view, const Vec3& p) {
  const Vec3 c = view.camera.to_camera(p);
  if (c.z() <= kNearPlane) return false;
  const double u = view.camera.focal * c.x() / c.z() + 0.5 * view.camera.width;
  const double v = view.camera.focal * c.y() / c.z() + 0.5 * view.camera.height;
  const int x = static_cast<int>(std::lround(u)), y = static_cast<int>(std::lround(v));
  if (x < 0 || y < 0 || x >= view.mask.width || y >= view.mask.height) return false;
  return view.mask.at(x, y) > 0.5;
}

GaussianCloud seed_points(const std::vector<StaticView>& views, std::size_t count, Rng& rng) {
  std::vector<std::vector<std::pair<int, int>>> fg(views.size());
  for (std::size_t v = 0; v < views.size(); ++v)
    for (int y = 0; y < views[v].mask.height; ++y)
      for (int x = 0; x < views[v].mask.width; ++x)
        if (views[v].mask.at(x, y) > 0.5) fg[v].emplace_back(x, y);
  std::vector<std::size_t> usable;
  for (std::size_t v = 0; v < views.size(); ++v)
    if (!fg[v].empty()) usable.push_back(v);
  if (usable.empty()) fail(ErrorCode::kEmptyForeground, "every mask is empty");

  GaussianCloud cloud;
  const std::size_t max_attempts = 200 * count;
  std::size_t rejected = 0;
  for (std::size_t attempt = 0; attempt < max_attempts && cloud.size() < count; ++attempt) {
    const std::size_t v = usable[rng.index(usable.size())];
    const auto [px, py] = fg[v][rng.index(fg[v].size())];
    const StaticView& view = views[v];
    const Ray ray = pixel_ray(view.camera, px + rng.uniform(-0.5, 0.5), py + rng.uniform(-0.5, 0.5));
    // Segment of the ray inside the orbit sphere.
    const double radius = view.camera.radius;
    const double b = ray.origin.dot(ray.dir);
    const double c = ray.origin.squaredNorm() - radius * radius;
    const double disc = b * b - c;
    if (disc <= 0.0) continue;
    const double t0 = std::max(0.0, -b - std::sqrt(disc)), t1 = -b + std::sqrt(disc);
    if (t1 <= t0) continue;
    const Vec3 p = ray.origin + rng.uniform(t0, t1) * ray.dir;
    bool hull = true;
    for (std::size_t w = 0; w < views.size() && hull; ++w)
      if (w != v) hull = inside_mask(views[w], p);
    if (!hull) {
      ++rejected;
      continue;
    }
    Gaussian g;
    g.center = p;
    for (int ch = 0; ch < 3; ++ch) g.color[ch] = std::clamp(view.image.at(px, py, ch), 0.0, 1.0);
    g.opacity = 0.5;
    cloud.gaussians.push_back(g);
  }
  if (cloud.empty()) fail(ErrorCode::kEmptyForeground, "no sample fell inside the masks' visual hull");
  if (cloud.size() < count)
    spdlog::warn("fit_static: seeded {} of {} points ({} rejected outside the hull)", cloud.size(), count, rejected);

  // Initial scale: root mean squared distance to the 3 nearest neighbors.
  const std::size_t n = cloud.size();
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> d2;
    d2.reserve(n);
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) d2.push_back((cloud[i].center - cloud[j].center).squaredNorm());
    const std::size_t k = std::min<std::size_t>(3, d2.size());
    double s = 0.01;
    if (k > 0) {
      std::partial_sort(d2.begin(), d2.begin() + static_cast<std::ptrdiff_t>(k), d2.end());
      double mean = 0.0;
      for (std::size_t m = 0; m < k; ++m) mean += d2[m];
      s = std::sqrt(mean / static_cast<double>(k));
    }
    cloud[i].scale = Vec3::Constant(std::clamp(s, 1e-4, 0.1));
  }
  return cloud;
}

constexpr double kMinLogScale = -9.2;  // ~1e-4
constexpr double kMaxLogScale = 0.0;

}  // namespace

GaussianCloud fit_static(const std::vector<StaticView>& views, const StaticFitParams& params) {
  if (views.size() < 2) fail(ErrorCode::kTooFewViews, "fit_static needs at least 2 views");
  params.weights.validate();
  if (params.iterations < 0 || params.initial_points == 0 || params.max_points == 0 || params.densify_every <= 0)
    fail(ErrorCode::kInvalidParams, "fit_static: invalid iteration or point counts");
  for (const auto& v : views) {
    v.camera.validate();
    if (v.image.width != v.camera.width || v.image.height != v.camera.height || v.image.channels != 3 ||
        v.mask.width != v.camera.width || v.mask.height != v.camera.height || v.mask.channels != 1)
      fail(ErrorCode::kResolutionMismatch, "fit_static: view image or mask does not match its camera");
  }

  Rng rng(params.seed);
  GaussianCloud cloud = seed_points(views, std::min(params.initial_points, params.max_points), rng);

  std::size_t n = cloud.size();
  std::vector<double> pos(3 * n), logs(3 * n), opa(n), col(3 * n);
  auto unpack = [&]() {
    n = cloud.size();
    pos.resize(3 * n);
    logs.resize(3 * n);
    opa.resize(n);
    col.resize(3 * n);
    for (std::size_t i = 0; i < n; ++i) {
      for (int k = 0; k < 3; ++k) {
        pos[3 * i + k] = cloud[i].center[k];
        logs[3 * i + k] = std::log(cloud[i].scale[k]);
        col[3 * i + k] = cloud[i].color[k];
      }
      opa[i] = cloud[i].opacity;
    }
  };
  auto pack = [&]() {
    for (std::size_t i = 0; i < n; ++i) {
      Gaussian& g = cloud[i];
      for (int k = 0; k < 3; ++k) {
        logs[3 * i + k] = std::clamp(logs[3 * i + k], kMinLogScale, kMaxLogScale);
        col[3 * i + k] = std::clamp(col[3 * i + k], 0.0, 1.0);
        g.center[k] = pos[3 * i + k];
        g.scale[k] = std::exp(logs[3 * i + k]);
        g.color[k] = col[3 * i + k];
      }
      opa[i] = std::clamp(opa[i], 0.0, 1.0);
      g.opacity = opa[i];
    }
  };
  unpack();
  AdamState adam_pos(3 * n), adam_scale(3 * n), adam_opa(n), adam_col(3 * n);
  std::vector<double> grad_norm_sum(n, 0.0);
  std::vector<double> gp(3 * n), gs(3 * n), go(n), gc(3 * n);

  const int iters = params.iterations;
  for (int it = 0; it < iters; ++it) {
    const double progress = iters > 1 ? static_cast<double>(it) / (iters - 1) : 0.0;
    const double pos_lr = params.position_lr * std::pow(params.position_lr_final_ratio, progress);
    const StaticView& view = views[rng.index(views.size())];

    const RenderOutput out = render(cloud, view.camera);
    ImageLoss color = mse_loss(out.image, view.image);
    ImageLoss mask = mask_loss(out.alpha, view.mask);
    check_finite(total_loss(params.weights, color.value, mask.value, 0.0), "fit_static");
    for (double& g : color.grad.data) g *= params.weights.ref;
    for (double& g : mask.grad.data) g *= params.weights.mask;
    const RenderGradients g = render_backward(cloud, view.camera, out, color.grad, mask.grad);

    gp.resize(3 * n);
    gs.resize(3 * n);
    go.resize(n);
    gc.resize(3 * n);
    for (std::size_t i = 0; i < n; ++i) {
      for (int k = 0; k < 3; ++k) {
        gp[3 * i + k] = g.center[i][k];
        gs[3 * i + k] = g.scale[i][k] * cloud[i].scale[k];
        gc[3 * i + k] = g.color[i][k];
      }
      go[i] = g.opacity[i];
      grad_norm_sum[i] += g.center[i].norm();
    }
    adam_pos.step(pos, gp, pos_lr);
    adam_scale.step(logs, gs, params.scale_lr);
    adam_opa.step(opa, go, params.opacity_lr);
    adam_col.step(col, gc, params.color_lr);
    pack();

    const int done = it + 1;
    if (done % params.densify_every == 0 && done < iters) {
      std::vector<std::int64_t> keep;
      for (std::size_t i = 0; i < n; ++i)
        if (cloud[i].opacity >= params.prune_opacity) keep.push_back(static_cast<std::int64_t>(i));
      if (keep.empty()) fail(ErrorCode::kDiverged, "fit_static: every point was pruned");
      std::vector<double> norms;
      for (auto i : keep) norms.push_back(grad_norm_sum[static_cast<std::size_t>(i)]);
      std::vector<double> sorted = norms;
      std::sort(sorted.begin(), sorted.end());
      const double cut = sorted[static_cast<std::size_t>(params.clone_percentile * static_cast<double>(sorted.size() - 1))];
      std::vector<std::int64_t> source = keep;
      for (std::size_t k = 0; k < keep.size() && source.size() < params.max_points; ++k)
        if (norms[k] > cut) source.push_back(-1 - keep[k]);  // clone marker

      GaussianCloud next;
      std::vector<std::int64_t> adam_source;
      for (auto s : source) {
        const bool clone = s < 0;
        const auto idx = static_cast<std::size_t>(clone ? -1 - s : s);
        Gaussian gsn = cloud[idx];
        if (clone)
          for (int k = 0; k < 3; ++k) gsn.center[k] += rng.normal(0.0, gsn.scale[k]);
        next.gaussians.push_back(gsn);
        adam_source.push_back(clone ? -1 : s);
      }
      spdlog::debug("fit_static iter {}: {} -> {} points", done, n, next.size());
      cloud = std::move(next);
      unpack();
      adam_pos.remap(adam_source, 3);
      adam_scale.remap(adam_source, 3);
      adam_opa.remap(adam_source, 1);
      adam_col.remap(adam_source, 3);
      grad_norm_sum.assign(n, 0.0);
    }
    if (params.on_checkpoint && done % 500 == 0) params.on_checkpoint(done, cloud);
  }
  return cloud;
}

HexPlaneField fit_motion(HexPlaneField field, const GaussianCloud& canonical, const FragmentSupervision& sup,
                         const MotionFitParams& params) {
  sup.validate();
  params.weights.validate();
  validate_cloud(canonical);
  if (params.iterations < 0 || !(params.lr > 0.0)) fail(ErrorCode::kInvalidParams, "fit_motion: invalid schedule");
  const std::size_t n = canonical.size();
  const std::size_t frames = sup.frame_count();
  const NeighborGraph graph = build_neighbors(canonical, params.neighbors);
  std::vector<const ViewSupervision*> masked;
  for (const auto& v : sup.extra)
    if (!v.masks.empty()) masked.push_back(&v);

  Rng rng(params.seed);
  AdamState adam(field.params().size());
  const LossWeights& w = params.weights;
  for (int it = 0; it < params.iterations; ++it) {
    const std::size_t t = rng.index(frames);
    const double tau = frame_tau(t, frames);
    FieldTape tape;
    const Deformation d = field_eval_batch(field, canonical, tau, &tape);
    const GaussianCloud deformed = apply_deformation(canonical, d);
    DeformationGrad up = DeformationGrad::zeros(n);
    double ref = 0.0, mask = 0.0, rigid = 0.0;

    if (w.ref > 0.0) {
      const Camera& cam = sup.reference.camera;
      const RenderOutput out = render(deformed, cam);
      ImageLoss l = mse_loss(out.image, sup.reference.frames[t]);
      ref = l.value;
      for (double& g : l.grad.data) g *= w.ref;
      accumulate_pullback(deformed, render_backward(deformed, cam, out, l.grad), 1.0, up);
    }
    if (w.mask > 0.0 && !masked.empty()) {
      const ViewSupervision& view = *masked[rng.index(masked.size())];
      const RenderOutput out = render(deformed, view.camera);
      ImageLoss l = mask_loss(out.alpha, view.masks[t]);
      mask = l.value;
      for (double& g : l.grad.data) g *= w.mask;
      const Image zero(view.camera.width, view.camera.height, 3);
      accumulate_pullback(deformed, render_backward(deformed, view.camera, out, zero, l.grad), 1.0, up);
    }
    if (w.rigid > 0.0) {
      const RigidLoss l = loss_rigid(canonical, deformed, graph);
      rigid = l.value;
      for (std::size_t i = 0; i < n; ++i) up.dp[i] += w.rigid * l.grad[i];
    }
    check_finite(total_loss(w, ref, mask, rigid), "fit_motion");
    const FieldGradients g = field_backward(field, tape, up);
    adam.step(field.mutable_params(), g.values, params.lr);

    const int done = it + 1;
    if (done % 500 == 0) {
      spdlog::debug("fit_motion iter {}: ref {:.3e} mask {:.3e} rigid {:.3e}", done, ref, mask, rigid);
      if (params.on_checkpoint) params.on_checkpoint(done, field);
    }
  }
  return field;
}

double mean_view_mse(const HexPlaneField& field, const GaussianCloud& canonical, const Camera& camera,
                     const std::vector<Image>& frames) {
  if (frames.empty()) fail(ErrorCode::kBadShape, "mean_view_mse needs frames");
  double sum = 0.0;
  for (std::size_t k = 0; k < frames.size(); ++k) {
    const DeformedRender r = render_deformed(field, canonical, frame_tau(k, frames.size()), camera);
    sum += mse_loss(r.output.image, frames[k]).value;
  }
  return sum / static_cast<double>(frames.size());
}

}  // namespace frag4d
