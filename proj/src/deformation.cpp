#include "frag4d/deformation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

#include <spdlog/spdlog.h>

#include "frag4d/error.hpp"
#include "frag4d/io.hpp"
#include "frag4d/parallel.hpp"
#include "frag4d/random.hpp"
#include "json.hpp"

namespace frag4d {
namespace {

std::atomic<std::uint64_t> g_revision{1};

std::uint64_t next_revision() { return g_revision.fetch_add(1, std::memory_order_relaxed); }

// out = b + W x for a column-major (rows x cols) W.
void affine(const double* w, const double* b, const double* x, int rows, int cols, double* out) {
  std::copy(b, b + rows, out);
  for (int c = 0; c < cols; ++c) {
    const double xc = x[c];
    const double* col = w + static_cast<std::size_t>(c) * rows;
    for (int r = 0; r < rows; ++r) out[r] += col[r] * xc;
  }
}

struct Lookup {
  std::array<int, 2 * kPlaneCount> cells{};
  std::array<double, 2 * kPlaneCount> weights{};
  bool clamped = false;
};

double axis_coordinate(const HexPlaneField& field, int axis, const Vec3& p, double tau, bool& clamped) {
  double c = 0.0;
  int extent = 0;
  if (axis == 3) {
    extent = field.shape().time_grid;
    c = tau * (extent - 1);
  } else {
    extent = field.shape().grid;
    const double lo = field.bounds().lo[axis], hi = field.bounds().hi[axis];
    c = (p[axis] - lo) / (hi - lo) * (extent - 1);
  }
  const double max = extent - 1;
  if (c < 0.0 || c > max) {
    clamped = true;
    c = std::clamp(c, 0.0, max);
  }
  return c;
}

Lookup locate(const HexPlaneField& field, const Vec3& p, double tau) {
  Lookup l;
  for (int k = 0; k < kPlaneCount; ++k) {
    const auto dims = field.plane_dims(k);
    for (int a = 0; a < 2; ++a) {
      const double c = axis_coordinate(field, kPlaneAxes[static_cast<std::size_t>(k)][static_cast<std::size_t>(a)],
                                       p, tau, l.clamped);
      const int i0 = std::min(static_cast<int>(std::floor(c)), dims[static_cast<std::size_t>(a)] - 2);
      l.cells[static_cast<std::size_t>(2 * k + a)] = i0;
      l.weights[static_cast<std::size_t>(2 * k + a)] = c - i0;
    }
  }
  return l;
}

// Bilinear sample of plane k into out[F].
void sample_plane(const HexPlaneField& field, int k, const Lookup& l, double* out) {
  const int f = field.shape().features;
  const int b = field.plane_dims(k)[1];
  const int i0 = l.cells[static_cast<std::size_t>(2 * k)], j0 = l.cells[static_cast<std::size_t>(2 * k + 1)];
  const double fx = l.weights[static_cast<std::size_t>(2 * k)], fy = l.weights[static_cast<std::size_t>(2 * k + 1)];
  const double* base = field.params().data() + field.plane_offset(k);
  const double* c00 = base + (static_cast<std::size_t>(i0) * b + j0) * f;
  const double* c01 = c00 + f;
  const double* c10 = c00 + static_cast<std::size_t>(b) * f;
  const double* c11 = c10 + f;
  const double w00 = (1 - fx) * (1 - fy), w01 = (1 - fx) * fy, w10 = fx * (1 - fy), w11 = fx * fy;
  for (int i = 0; i < f; ++i) out[i] = w00 * c00[i] + w01 * c01[i] + w10 * c10[i] + w11 * c11[i];
}

void scatter_plane(const HexPlaneField& field, int k, const Lookup& l, const double* grad, double* dst) {
  const int f = field.shape().features;
  const int b = field.plane_dims(k)[1];
  const int i0 = l.cells[static_cast<std::size_t>(2 * k)], j0 = l.cells[static_cast<std::size_t>(2 * k + 1)];
  const double fx = l.weights[static_cast<std::size_t>(2 * k)], fy = l.weights[static_cast<std::size_t>(2 * k + 1)];
  double* c00 = dst + field.plane_offset(k) + (static_cast<std::size_t>(i0) * b + j0) * f;
  double* c01 = c00 + f;
  double* c10 = c00 + static_cast<std::size_t>(b) * f;
  double* c11 = c10 + f;
  const double w00 = (1 - fx) * (1 - fy), w01 = (1 - fx) * fy, w10 = fx * (1 - fy), w11 = fx * fy;
  for (int i = 0; i < f; ++i) {
    c00[i] += w00 * grad[i];
    c01[i] += w01 * grad[i];
    c10[i] += w10 * grad[i];
    c11[i] += w11 * grad[i];
  }
}

// Decoder input for a lookup, written into z[input_width].
void fuse(const HexPlaneField& field, const Lookup& l, double* z) {
  const int f = field.shape().features;
  if (field.shape().fusion == Fusion::kConcat) {
    for (int k = 0; k < kPlaneCount; ++k) sample_plane(field, k, l, z + static_cast<std::size_t>(k) * f);
    return;
  }
  std::vector<double> feat(static_cast<std::size_t>(f));
  std::fill(z, z + f, 1.0);
  for (int k = 0; k < kPlaneCount; ++k) {
    sample_plane(field, k, l, feat.data());
    for (int i = 0; i < f; ++i) z[i] *= feat[static_cast<std::size_t>(i)];
  }
}

struct Layout {
  int in, hidden;
  std::size_t size() const { return static_cast<std::size_t>(in + 2 * hidden + kFieldOutputs); }
  std::size_t h1() const { return static_cast<std::size_t>(in); }
  std::size_t h2() const { return static_cast<std::size_t>(in + hidden); }
  std::size_t out() const { return static_cast<std::size_t>(in + 2 * hidden); }
};

// Runs the decoder; acts holds [z | h1 | h2 | raw] with z already filled.
void decode(const HexPlaneField& field, double* acts) {
  const Layout lay{field.shape().input_width(), field.shape().hidden};
  const double* p = field.params().data();
  double* h1 = acts + lay.h1();
  double* h2 = acts + lay.h2();
  double* out = acts + lay.out();
  affine(p + field.w1_offset(), p + field.b1_offset(), acts, lay.hidden, lay.in, h1);
  for (int i = 0; i < lay.hidden; ++i) h1[i] = std::max(0.0, h1[i]);
  affine(p + field.w2_offset(), p + field.b2_offset(), h1, lay.hidden, lay.hidden, h2);
  for (int i = 0; i < lay.hidden; ++i) h2[i] = std::max(0.0, h2[i]);
  affine(p + field.w3_offset(), p + field.b3_offset(), h2, kFieldOutputs, lay.hidden, out);
}

FieldOutput to_output(const double* raw) {
  FieldOutput o;
  o.dp = Vec3(raw[0], raw[1], raw[2]);
  o.dr = quat_normalize(Quat{1.0 + raw[3], raw[4], raw[5], raw[6]});
  o.ds = Vec3(raw[7], raw[8], raw[9]);
  return o;
}

FieldOutput eval_point(const HexPlaneField& field, const Vec3& p, double tau, Lookup& l,
                       std::vector<double>& acts) {
  l = locate(field, p, tau);
  acts.assign(Layout{field.shape().input_width(), field.shape().hidden}.size(), 0.0);
  fuse(field, l, acts.data());
  decode(field, acts.data());
  return to_output(acts.data() + Layout{field.shape().input_width(), field.shape().hidden}.out());
}

void warn_clamped(std::size_t count) {
  if (count > 0) spdlog::warn("field lookup: {} point(s) outside the field bounds were clamped", count);
}

}  // namespace

void FieldShape::validate() const {
  if (grid < 2 || time_grid < 2) fail(ErrorCode::kBadShape, "field grid dims must be >= 2");
  if (features < 1 || hidden < 1) fail(ErrorCode::kBadShape, "field widths must be >= 1");
}

HexPlaneField::HexPlaneField(const FieldShape& shape, const AxisBox& bounds)
    : shape_(shape), bounds_(bounds), revision_(next_revision()) {
  shape_.validate();
  for (int a = 0; a < 3; ++a)
    if (!(bounds_.hi[a] > bounds_.lo[a])) fail(ErrorCode::kBadShape, "field bounds must have positive extent");
  std::size_t offset = 0;
  for (int k = 0; k < kPlaneCount; ++k) {
    plane_offsets_[static_cast<std::size_t>(k)] = offset;
    const auto d = plane_dims(k);
    offset += static_cast<std::size_t>(d[0]) * d[1] * shape_.features;
  }
  const auto in = static_cast<std::size_t>(shape_.input_width());
  const auto h = static_cast<std::size_t>(shape_.hidden);
  w1_ = offset;
  b1_ = w1_ + h * in;
  w2_ = b1_ + h;
  b2_ = w2_ + h * h;
  w3_ = b2_ + h;
  b3_ = w3_ + kFieldOutputs * h;
  params_.assign(b3_ + kFieldOutputs, 0.0);
}

std::vector<double>& HexPlaneField::mutable_params() {
  revision_ = next_revision();
  return params_;
}

std::array<int, 2> HexPlaneField::plane_dims(int plane) const {
  const auto& axes = kPlaneAxes[static_cast<std::size_t>(plane)];
  auto extent = [&](int axis) { return axis == 3 ? shape_.time_grid : shape_.grid; };
  return {extent(axes[0]), extent(axes[1])};
}

double grid_coordinate(const HexPlaneField& field, int axis, const Vec3& p, double tau) {
  bool clamped = false;
  return axis_coordinate(field, axis, p, tau, clamped);
}

FieldOutput field_eval(const HexPlaneField& field, const Vec3& p, double tau) {
  Lookup l;
  std::vector<double> acts;
  FieldOutput o = eval_point(field, p, tau, l, acts);
  warn_clamped(l.clamped ? 1 : 0);
  return o;
}

Deformation field_eval_batch(const HexPlaneField& field, const std::vector<Vec3>& points, double tau,
                             FieldTape* tape) {
  const std::size_t n = points.size();
  if (n == 0) fail(ErrorCode::kEmptyCloud, "field_eval_batch on an empty point set");
  Deformation d;
  d.dp.resize(n);
  d.dr.resize(n);
  d.ds.resize(n);
  std::vector<Lookup> lookups(n);
  std::vector<std::vector<double>> acts(n);
  parallel_for(n, [&](std::size_t i) {
    const FieldOutput o = eval_point(field, points[i], tau, lookups[i], acts[i]);
    d.dp[i] = o.dp;
    d.dr[i] = o.dr;
    d.ds[i] = o.ds;
  });
  std::size_t clamped = 0;
  for (const auto& l : lookups) clamped += l.clamped ? 1 : 0;
  warn_clamped(clamped);
  if (tape != nullptr) {
    tape->revision = field.revision();
    tape->tau = tau;
    tape->points = points;
    tape->cells.resize(n);
    tape->weights.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      tape->cells[i] = lookups[i].cells;
      tape->weights[i] = lookups[i].weights;
    }
    tape->activations = std::move(acts);
  }
  return d;
}

Deformation field_eval_batch(const HexPlaneField& field, const GaussianCloud& cloud, double tau, FieldTape* tape) {
  std::vector<Vec3> points;
  points.reserve(cloud.size());
  for (const auto& g : cloud.gaussians) points.push_back(g.center);
  return field_eval_batch(field, points, tau, tape);
}

DeformationGrad DeformationGrad::zeros(std::size_t n) {
  DeformationGrad g;
  g.dp.assign(n, Vec3::Zero());
  g.dr.assign(n, Quat{0.0, 0.0, 0.0, 0.0});
  g.ds.assign(n, Vec3::Zero());
  return g;
}

FieldGradients field_backward(const HexPlaneField& field, const FieldTape& tape, const DeformationGrad& upstream) {
  if (tape.revision != field.revision())
    fail(ErrorCode::kStaleForwardState, "field changed since the forward pass");
  if (upstream.size() != tape.size()) fail(ErrorCode::kCardinalityMismatch, "upstream gradient size mismatch");

  const Layout lay{field.shape().input_width(), field.shape().hidden};
  const int in = lay.in, h = lay.hidden, f = field.shape().features;
  const double* p = field.params().data();
  FieldGradients grads;
  grads.values.assign(field.params().size(), 0.0);
  double* g = grads.values.data();

  std::vector<double> gout(kFieldOutputs), gh2(static_cast<std::size_t>(h)), gh1(static_cast<std::size_t>(h)),
      gz(static_cast<std::size_t>(in)), feat(static_cast<std::size_t>(kPlaneCount * f)),
      gfeat(static_cast<std::size_t>(f));
  for (std::size_t n = 0; n < tape.size(); ++n) {
    const double* acts = tape.activations[n].data();
    const double* z = acts;
    const double* h1 = acts + lay.h1();
    const double* h2 = acts + lay.h2();
    const double* raw = acts + lay.out();

    const Vec3& gdp = upstream.dp[n];
    const Vec3& gds = upstream.ds[n];
    const Quat& gq = upstream.dr[n];
    if (gdp.isZero(0.0) && gds.isZero(0.0) && gq.w == 0.0 && gq.x == 0.0 && gq.y == 0.0 && gq.z == 0.0) continue;
    for (int i = 0; i < 3; ++i) {
      gout[static_cast<std::size_t>(i)] = gdp[i];
      gout[static_cast<std::size_t>(7 + i)] = gds[i];
    }
    // d normalize(v) = (g - q (q . g)) / |v|
    const Quat v{1.0 + raw[3], raw[4], raw[5], raw[6]};
    const double vn = v.norm();
    const Quat q = v * (1.0 / vn);
    const double qg = q.dot(gq);
    gout[3] = (gq.w - q.w * qg) / vn;
    gout[4] = (gq.x - q.x * qg) / vn;
    gout[5] = (gq.y - q.y * qg) / vn;
    gout[6] = (gq.z - q.z * qg) / vn;

    // output layer
    for (int r = 0; r < kFieldOutputs; ++r) g[field.b3_offset() + static_cast<std::size_t>(r)] += gout[static_cast<std::size_t>(r)];
    for (int c = 0; c < h; ++c) {
      double acc = 0.0;
      const std::size_t col = field.w3_offset() + static_cast<std::size_t>(c) * kFieldOutputs;
      for (int r = 0; r < kFieldOutputs; ++r) {
        g[col + static_cast<std::size_t>(r)] += gout[static_cast<std::size_t>(r)] * h2[c];
        acc += p[col + static_cast<std::size_t>(r)] * gout[static_cast<std::size_t>(r)];
      }
      gh2[static_cast<std::size_t>(c)] = h2[c] > 0.0 ? acc : 0.0;
    }
    // hidden layer 2
    for (int r = 0; r < h; ++r) g[field.b2_offset() + static_cast<std::size_t>(r)] += gh2[static_cast<std::size_t>(r)];
    for (int c = 0; c < h; ++c) {
      double acc = 0.0;
      const std::size_t col = field.w2_offset() + static_cast<std::size_t>(c) * h;
      for (int r = 0; r < h; ++r) {
        g[col + static_cast<std::size_t>(r)] += gh2[static_cast<std::size_t>(r)] * h1[c];
        acc += p[col + static_cast<std::size_t>(r)] * gh2[static_cast<std::size_t>(r)];
      }
      gh1[static_cast<std::size_t>(c)] = h1[c] > 0.0 ? acc : 0.0;
    }
    // hidden layer 1
    for (int r = 0; r < h; ++r) g[field.b1_offset() + static_cast<std::size_t>(r)] += gh1[static_cast<std::size_t>(r)];
    for (int c = 0; c < in; ++c) {
      double acc = 0.0;
      const std::size_t col = field.w1_offset() + static_cast<std::size_t>(c) * h;
      for (int r = 0; r < h; ++r) {
        g[col + static_cast<std::size_t>(r)] += gh1[static_cast<std::size_t>(r)] * z[c];
        acc += p[col + static_cast<std::size_t>(r)] * gh1[static_cast<std::size_t>(r)];
      }
      gz[static_cast<std::size_t>(c)] = acc;
    }

    Lookup l;
    l.cells = tape.cells[n];
    l.weights = tape.weights[n];
    if (field.shape().fusion == Fusion::kConcat) {
      for (int k = 0; k < kPlaneCount; ++k) scatter_plane(field, k, l, gz.data() + static_cast<std::size_t>(k) * f, g);
    } else {
      for (int k = 0; k < kPlaneCount; ++k) sample_plane(field, k, l, feat.data() + static_cast<std::size_t>(k) * f);
      for (int k = 0; k < kPlaneCount; ++k) {
        for (int i = 0; i < f; ++i) {
          double others = 1.0;
          for (int m = 0; m < kPlaneCount; ++m)
            if (m != k) others *= feat[static_cast<std::size_t>(m * f + i)];
          gfeat[static_cast<std::size_t>(i)] = gz[static_cast<std::size_t>(i)] * others;
        }
        scatter_plane(field, k, l, gfeat.data(), g);
      }
    }
  }
  return grads;
}

HexPlaneField init_identity(const FieldShape& shape, const AxisBox& bounds, std::uint64_t seed) {
  HexPlaneField field(shape, bounds);
  auto& p = field.mutable_params();
  Rng rng(seed);
  const double plane_base = shape.fusion == Fusion::kProduct ? 1.0 : 0.0;
  for (std::size_t i = 0; i < field.plane_param_count(); ++i) p[i] = plane_base + rng.uniform(-1e-2, 1e-2);
  const int in = shape.input_width(), h = shape.hidden;
  const double sd1 = std::sqrt(2.0 / in), sd2 = std::sqrt(2.0 / h);
  for (std::size_t i = 0; i < static_cast<std::size_t>(in * h); ++i) p[field.w1_offset() + i] = rng.normal(0.0, sd1);
  for (std::size_t i = 0; i < static_cast<std::size_t>(h * h); ++i) p[field.w2_offset() + i] = rng.normal(0.0, sd2);
  return field;
}

AxisBox padded_bounds(const GaussianCloud& cloud, double margin) {
  AxisBox box = bounding_box(cloud);
  const double extent = std::max((box.hi - box.lo).maxCoeff(), 1e-3);
  box.lo.array() -= margin * extent;
  box.hi.array() += margin * extent;
  return box;
}

namespace {

using nlohmann::json;

struct TensorSlot {
  std::string name;
  std::size_t offset;
  std::vector<std::uint32_t> dims;
};

std::vector<TensorSlot> tensor_slots(const HexPlaneField& f) {
  std::vector<TensorSlot> slots;
  const auto feats = static_cast<std::uint32_t>(f.shape().features);
  for (int k = 0; k < kPlaneCount; ++k) {
    const auto d = f.plane_dims(k);
    slots.push_back({std::string("plane_") + kPlaneNames[static_cast<std::size_t>(k)], f.plane_offset(k),
                     {static_cast<std::uint32_t>(d[0]), static_cast<std::uint32_t>(d[1]), feats}});
  }
  const auto in = static_cast<std::uint32_t>(f.shape().input_width());
  const auto h = static_cast<std::uint32_t>(f.shape().hidden);
  const auto out = static_cast<std::uint32_t>(kFieldOutputs);
  // Weights are column-major, i.e. row-major [cols][rows].
  slots.push_back({"w1", f.w1_offset(), {in, h}});
  slots.push_back({"b1", f.b1_offset(), {h}});
  slots.push_back({"w2", f.w2_offset(), {h, h}});
  slots.push_back({"b2", f.b2_offset(), {h}});
  slots.push_back({"w3", f.w3_offset(), {h, out}});
  slots.push_back({"b3", f.b3_offset(), {out}});
  return slots;
}

}  // namespace

void save_field(const HexPlaneField& field, const std::filesystem::path& dir) {
  json meta;
  meta["grid"] = field.shape().grid;
  meta["time_grid"] = field.shape().time_grid;
  meta["features"] = field.shape().features;
  meta["hidden"] = field.shape().hidden;
  meta["fusion"] = field.shape().fusion == Fusion::kConcat ? "concat" : "product";
  meta["bounds_lo"] = {field.bounds().lo.x(), field.bounds().lo.y(), field.bounds().lo.z()};
  meta["bounds_hi"] = {field.bounds().hi.x(), field.bounds().hi.y(), field.bounds().hi.z()};
  json files = json::array();
  for (const auto& slot : tensor_slots(field)) {
    std::size_t count = 1;
    for (auto d : slot.dims) count *= d;
    std::vector<float> values(count);
    for (std::size_t i = 0; i < count; ++i) values[i] = static_cast<float>(field.params()[slot.offset + i]);
    write_tensor(Tensor(slot.dims, std::move(values)), dir / (slot.name + ".tnsr"));
    files.push_back(slot.name + ".tnsr");
  }
  meta["tensors"] = files;
  write_text(dir / "field.json", meta.dump(2) + "\n");
}

HexPlaneField load_field(const std::filesystem::path& dir) {
  json meta;
  try {
    meta = json::parse(read_text(dir / "field.json"));
  } catch (const json::exception& e) {
    fail(ErrorCode::kSchemaMismatch, "field.json: " + std::string(e.what()));
  }
  FieldShape shape;
  AxisBox bounds;
  try {
    shape.grid = meta.at("grid").get<int>();
    shape.time_grid = meta.at("time_grid").get<int>();
    shape.features = meta.at("features").get<int>();
    shape.hidden = meta.at("hidden").get<int>();
    const auto fusion = meta.at("fusion").get<std::string>();
    if (fusion != "concat" && fusion != "product") fail(ErrorCode::kSchemaMismatch, "unknown fusion " + fusion);
    shape.fusion = fusion == "concat" ? Fusion::kConcat : Fusion::kProduct;
    for (int a = 0; a < 3; ++a) {
      bounds.lo[a] = meta.at("bounds_lo").at(static_cast<std::size_t>(a)).get<double>();
      bounds.hi[a] = meta.at("bounds_hi").at(static_cast<std::size_t>(a)).get<double>();
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::kSchemaMismatch, "field.json: " + std::string(e.what()));
  }
  HexPlaneField field(shape, bounds);
  auto& p = field.mutable_params();
  for (const auto& slot : tensor_slots(field)) {
    const Tensor t = read_tensor(dir / (slot.name + ".tnsr"));
    if (t.dims != slot.dims) fail(ErrorCode::kSchemaMismatch, slot.name + " has unexpected dims");
    for (std::size_t i = 0; i < t.numel(); ++i) p[slot.offset + i] = t.data[i];
  }
  return field;
}

}  // namespace frag4d
