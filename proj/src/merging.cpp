#include "frag4d/merging.hpp"

#include <algorithm>
#include <cmath>

#include "frag4d/error.hpp"
#include "frag4d/io.hpp"
#include "frag4d/random.hpp"
#include "json.hpp"

namespace frag4d {
namespace {

FieldOutput output_at(const Deformation& d, std::size_t i) { return {d.dp[i], d.dr[i], d.ds[i]}; }

void check_boundary(const GlobalDeformation& g, std::size_t b) {
  if (b + 1 >= g.fragment_count())
    fail(ErrorCode::kInvalidParams, "boundary " + std::to_string(b) + " does not exist");
}

// Boundary state through the blend, plus the pieces needed for its gradient.
struct BoundaryEval {
  std::vector<Vec3> star_points;  // where the learnable copy is queried
  Deformation base;               // deformation the blend is applied on top of (chained)
  Deformation result;
};

BoundaryEval boundary_eval(const GlobalDeformation& g, std::size_t b, const std::vector<Vec3>& points,
                           const HexPlaneField& star, double lambda, FieldTape* tape) {
  BoundaryEval e;
  const std::size_t n = points.size();
  if (g.mode() == BoundaryMode::kShared) {
    const Deformation left = field_eval_batch(g.fields()[b], points, 1.0);
    const Deformation right = field_eval_batch(star, points, 0.0, tape);
    e.star_points = points;
    e.result = Deformation::identity(n);
    for (std::size_t i = 0; i < n; ++i) {
      const FieldOutput o = blend_outputs(output_at(left, i), output_at(right, i), lambda);
      e.result.dp[i] = o.dp;
      e.result.dr[i] = o.dr;
      e.result.ds[i] = o.ds;
    }
    return e;
  }
  e.base = g.carried_state(points, b + 1);
  e.star_points.resize(n);
  for (std::size_t i = 0; i < n; ++i) e.star_points[i] = points[i] + e.base.dp[i];
  const Deformation right = field_eval_batch(star, e.star_points, 0.0, tape);
  Deformation inc = Deformation::identity(n);
  const FieldOutput none;
  for (std::size_t i = 0; i < n; ++i) {
    const FieldOutput o = blend_outputs(none, output_at(right, i), lambda);
    inc.dp[i] = o.dp;
    inc.dr[i] = o.dr;
    inc.ds[i] = o.ds;
  }
  e.result = compose_deformations(e.base, inc);
  return e;
}

std::vector<Vec3> centers(const GaussianCloud& cloud) {
  std::vector<Vec3> p;
  p.reserve(cloud.size());
  for (const auto& g : cloud.gaussians) p.push_back(g.center);
  return p;
}

}  // namespace

FieldOutput blend_outputs(const FieldOutput& a, const FieldOutput& b, double lambda) {
  if (lambda == 1.0) return a;
  if (lambda == 0.0) return b;
  FieldOutput o;
  o.dp = lambda * a.dp + (1.0 - lambda) * b.dp;
  o.ds = lambda * a.ds + (1.0 - lambda) * b.ds;
  const Quat bq = a.dr.dot(b.dr) < 0.0 ? -b.dr : b.dr;
  o.dr = quat_normalize(a.dr * lambda + bq * (1.0 - lambda));
  return o;
}

FieldOutput blend_eval(const HexPlaneField& field_i, const HexPlaneField& field_j, double lambda, const Vec3& p,
                       double tau_i, double tau_j) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) fail(ErrorCode::kInvalidParams, "blend lambda must lie in [0, 1]");
  return blend_outputs(field_eval(field_i, p, tau_i), field_eval(field_j, p, tau_j), lambda);
}

Deformation compose_deformations(const Deformation& a, const Deformation& b) {
  if (a.size() != b.size()) fail(ErrorCode::kCardinalityMismatch, "composed deformations differ in size");
  Deformation out = a;
  for (std::size_t i = 0; i < a.size(); ++i) {
    out.dp[i] = a.dp[i] + b.dp[i];
    out.dr[i] = quat_compose(b.dr[i], a.dr[i]);
    out.ds[i] = a.ds[i] + b.ds[i];
  }
  return out;
}

GlobalDeformation::GlobalDeformation(std::vector<HexPlaneField> fields, BoundaryMode mode, double lambda)
    : fields_(std::move(fields)), mode_(mode) {
  if (fields_.empty()) fail(ErrorCode::kInvalidParams, "global deformation needs at least one field");
  if (!(lambda >= 0.0 && lambda <= 1.0)) fail(ErrorCode::kInvalidParams, "blend lambda must lie in [0, 1]");
  for (std::size_t b = 0; b + 1 < fields_.size(); ++b) blends_.push_back({lambda, fields_[b + 1], false});
}

TimeSlot GlobalDeformation::locate(double tau_global) const {
  const double k = static_cast<double>(fragment_count());
  const double x = std::clamp(tau_global, 0.0, 1.0) * k;
  const double nearest = std::round(x);
  if (std::abs(x - nearest) <= 1e-12 * k && nearest >= 1.0 && nearest <= k - 1.0)
    return {true, static_cast<std::size_t>(nearest) - 1, 0.0};
  const auto idx = std::min(static_cast<std::size_t>(std::floor(x)), fragment_count() - 1);
  return {false, idx, x - static_cast<double>(idx)};
}

TimeSlot GlobalDeformation::frame_slot(std::size_t g, int f) const {
  const auto span = static_cast<std::size_t>(f - 1);
  const std::size_t k = g / span, r = g % span;
  if (r == 0 && k >= 1 && k < fragment_count()) return {true, k - 1, 0.0};
  if (k >= fragment_count()) return {false, fragment_count() - 1, 1.0};
  return {false, k, static_cast<double>(r) / static_cast<double>(span)};
}

Deformation GlobalDeformation::carried_state(const std::vector<Vec3>& points, std::size_t k) const {
  Deformation state = Deformation::identity(points.size());
  std::vector<Vec3> current = points;
  for (std::size_t i = 0; i < k && i < fragment_count(); ++i) {
    const Deformation step = field_eval_batch(fields_[i], current, 1.0);
    state = compose_deformations(state, step);
    for (std::size_t p = 0; p < points.size(); ++p) current[p] = points[p] + state.dp[p];
  }
  return state;
}

Deformation GlobalDeformation::evaluate(const std::vector<Vec3>& points, const TimeSlot& slot) const {
  if (slot.boundary) {
    if (slot.index + 1 >= fragment_count()) fail(ErrorCode::kInvalidParams, "boundary out of range");
    const BlendRecord& blend = blends_[slot.index];
    if (blend.merged) return boundary_eval(*this, slot.index, points, blend.star, blend.lambda, nullptr).result;
    return evaluate(points, TimeSlot{false, slot.index, 1.0});
  }
  if (slot.index >= fragment_count()) fail(ErrorCode::kInvalidParams, "fragment out of range");
  if (mode_ == BoundaryMode::kShared) return field_eval_batch(fields_[slot.index], points, slot.local);
  const Deformation base = carried_state(points, slot.index);
  std::vector<Vec3> moved(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) moved[i] = points[i] + base.dp[i];
  return compose_deformations(base, field_eval_batch(fields_[slot.index], moved, slot.local));
}

Deformation GlobalDeformation::evaluate(const GaussianCloud& cloud, const TimeSlot& slot) const {
  return evaluate(centers(cloud), slot);
}

FieldOutput GlobalDeformation::query(const Vec3& p, double tau_global) const {
  return output_at(evaluate(std::vector<Vec3>{p}, locate(tau_global)), 0);
}

OverlapErrors overlap_errors(const GlobalDeformation& global, std::size_t boundary, const GaussianCloud& cloud,
                             const OverlapSupervision& sup) {
  check_boundary(global, boundary);
  if (sup.views.empty() || sup.views.front().image.empty())
    fail(ErrorCode::kMissingOverlapSupervision, "overlap has no reference image");
  const OverlapView& ref = sup.views.front();
  const auto points = centers(cloud);
  auto mse_of = [&](const Deformation& d) {
    const GaussianCloud moved = apply_deformation(cloud, d);
    return mse_loss(render(moved, ref.camera).image, ref.image).value;
  };
  OverlapErrors e;
  e.left = mse_of(global.evaluate(points, TimeSlot{false, boundary, 1.0}));
  e.right = mse_of(global.evaluate(points, TimeSlot{false, boundary + 1, 0.0}));
  const BlendRecord& blend = global.blends()[boundary];
  e.blended = mse_of(boundary_eval(global, boundary, points, blend.star, blend.lambda, nullptr).result);
  return e;
}

GlobalDeformation merge_pair(GlobalDeformation global, std::size_t boundary, const GaussianCloud& cloud,
                             const OverlapSupervision& sup, const MergeParams& params) {
  check_boundary(global, boundary);
  params.weights.validate();
  if (params.iterations < 0 || !(params.lr > 0.0)) fail(ErrorCode::kInvalidParams, "merge: invalid schedule");
  if (sup.views.empty() || sup.views.front().image.empty())
    fail(ErrorCode::kMissingOverlapSupervision, "boundary " + std::to_string(boundary) + " has no overlap frame");
  std::vector<const OverlapView*> masked;
  for (const auto& v : sup.views)
    if (!v.mask.empty()) masked.push_back(&v);

  BlendRecord& blend = global.mutable_blends()[boundary];
  blend.lambda = params.lambda;
  blend.star = global.fields()[boundary + 1];
  blend.merged = true;
  const double share = 1.0 - params.lambda;
  const auto points = centers(cloud);
  const std::size_t n = points.size();
  const NeighborGraph graph = build_neighbors(cloud, params.neighbors);
  const OverlapView& ref = sup.views.front();
  const LossWeights& w = params.weights;

  Rng rng(params.seed);
  AdamState adam(blend.star.params().size());
  for (int it = 0; it < params.iterations; ++it) {
    FieldTape tape;
    const BoundaryEval e = boundary_eval(global, boundary, points, blend.star, params.lambda, &tape);
    const GaussianCloud moved = apply_deformation(cloud, e.result);
    // Every blended quantity moves by (1 - lambda) times the copy's output.
    DeformationGrad body = DeformationGrad::zeros(n);
    double total = 0.0;
    if (w.ref > 0.0) {
      const RenderOutput out = render(moved, ref.camera);
      ImageLoss l = mse_loss(out.image, ref.image);
      total += w.ref * l.value;
      for (double& g : l.grad.data) g *= w.ref;
      accumulate_pullback(moved, render_backward(moved, ref.camera, out, l.grad), 1.0, body);
    }
    if (w.mask > 0.0 && !masked.empty()) {
      const OverlapView& view = *masked[rng.index(masked.size())];
      const RenderOutput out = render(moved, view.camera);
      ImageLoss l = mask_loss(out.alpha, view.mask);
      total += w.mask * l.value;
      for (double& g : l.grad.data) g *= w.mask;
      const Image zero(view.camera.width, view.camera.height, 3);
      accumulate_pullback(moved, render_backward(moved, view.camera, out, zero, l.grad), 1.0, body);
    }
    if (w.rigid > 0.0) {
      const RigidLoss l = loss_rigid(cloud, moved, graph);
      total += w.rigid * l.value;
      for (std::size_t i = 0; i < n; ++i) body.dp[i] += w.rigid * l.grad[i];
    }
    if (!std::isfinite(total)) fail(ErrorCode::kDiverged, "merge loss became non-finite");
    for (std::size_t i = 0; i < n; ++i) {
      body.dp[i] *= share;
      body.ds[i] *= share;
    }
    const FieldGradients g = field_backward(blend.star, tape, body);
    adam.step(blend.star.mutable_params(), g.values, params.lr);
  }
  return global;
}

GlobalDeformation merge_all(std::vector<HexPlaneField> fields, BoundaryMode mode, const GaussianCloud& cloud,
                            const std::vector<OverlapSupervision>& overlaps, const MergeParams& params,
                            const std::function<void(std::size_t)>& on_merge) {
  GlobalDeformation global(std::move(fields), mode, params.lambda);
  if (overlaps.size() + 1 < global.fragment_count())
    fail(ErrorCode::kMissingOverlapSupervision, "need one overlap per interior boundary");
  for (std::size_t b = 0; b + 1 < global.fragment_count(); ++b) {
    if (on_merge) on_merge(b);
    MergeParams p = params;
    p.seed = derive_seed(params.seed, b);
    global = merge_pair(std::move(global), b, cloud, overlaps[b], p);
  }
  return global;
}

void save_global(const GlobalDeformation& global, const std::filesystem::path& dir,
                 const std::vector<std::string>& field_dirs) {
  using nlohmann::json;
  if (field_dirs.size() != global.fragment_count())
    fail(ErrorCode::kCardinalityMismatch, "one field directory per fragment expected");
  json doc;
  doc["mode"] = global.mode() == BoundaryMode::kShared ? "shared" : "chained";
  doc["fields"] = field_dirs;
  json blends = json::array();
  for (std::size_t b = 0; b < global.blends().size(); ++b) {
    const auto& rec = global.blends()[b];
    const std::string name = "blend_" + std::to_string(b);
    save_field(rec.star, dir / name);
    blends.push_back({{"lambda", rec.lambda}, {"merged", rec.merged}, {"field", name}});
  }
  doc["blends"] = blends;
  write_text(dir / "manifest.json", doc.dump(2) + "\n");
}

GlobalDeformation load_global(const std::filesystem::path& dir, const std::filesystem::path& base) {
  using nlohmann::json;
  const auto path = dir / "manifest.json";
  if (!std::filesystem::exists(path)) fail(ErrorCode::kMissingArtifact, "missing " + path.string());
  try {
    const json doc = json::parse(read_text(path));
    const auto mode_name = doc.at("mode").get<std::string>();
    if (mode_name != "shared" && mode_name != "chained") fail(ErrorCode::kSchemaMismatch, "unknown mode " + mode_name);
    std::vector<HexPlaneField> fields;
    for (const auto& f : doc.at("fields")) fields.push_back(load_field(base / f.get<std::string>()));
    GlobalDeformation global(std::move(fields), mode_name == "shared" ? BoundaryMode::kShared : BoundaryMode::kChained);
    const auto& blends = doc.at("blends");
    if (blends.size() != global.blends().size()) fail(ErrorCode::kSchemaMismatch, "blend count mismatch");
    for (std::size_t b = 0; b < blends.size(); ++b) {
      auto& rec = global.mutable_blends()[b];
      rec.lambda = blends[b].at("lambda").get<double>();
      rec.merged = blends[b].at("merged").get<bool>();
      rec.star = load_field(dir / blends[b].at("field").get<std::string>());
    }
    return global;
  } catch (const json::exception& e) {
    fail(ErrorCode::kSchemaMismatch, std::string("global manifest: ") + e.what());
  }
}

}  // namespace frag4d
