#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "frag4d/scene.hpp"

namespace frag4d {

enum class Fusion { kConcat, kProduct };

struct FieldShape {
  int grid = 32;       // spatial plane resolution G
  int time_grid = 16;  // temporal resolution G_t
  int features = 16;   // F per plane
  int hidden = 64;     // decoder width W_h
  Fusion fusion = Fusion::kConcat;

  /// Throws BadShape unless every grid dim >= 2 and widths >= 1.
  void validate() const;
  int input_width() const { return fusion == Fusion::kConcat ? 6 * features : features; }
  bool operator==(const FieldShape&) const = default;
};

inline constexpr int kFieldOutputs = 10;  // dp[3], raw dr[4], ds[3]
inline constexpr int kPlaneCount = 6;

/// Plane order is fixed: xy, xz, yz, xt, yt, zt. Axis 3 is time.
inline constexpr std::array<std::array<int, 2>, kPlaneCount> kPlaneAxes = {
    {{0, 1}, {0, 2}, {1, 2}, {0, 3}, {1, 3}, {2, 3}}};
inline constexpr std::array<const char*, kPlaneCount> kPlaneNames = {"xy", "xz", "yz", "xt", "yt", "zt"};

/// Six feature planes plus a ReLU MLP decoder, stored as one flat parameter
/// vector. Planes come first (in kPlaneAxes order, each [A][B][F]), then
/// W1, b1, W2, b2, W3, b3 with column-major weights.
class HexPlaneField {
 public:
  HexPlaneField() = default;
  HexPlaneField(const FieldShape& shape, const AxisBox& bounds);

  const FieldShape& shape() const { return shape_; }
  const AxisBox& bounds() const { return bounds_; }

  const std::vector<double>& params() const { return params_; }
  /// Mutable access; invalidates any forward tape recorded earlier.
  std::vector<double>& mutable_params();
  std::uint64_t revision() const { return revision_; }

  std::size_t plane_offset(int plane) const { return plane_offsets_[static_cast<std::size_t>(plane)]; }
  std::array<int, 2> plane_dims(int plane) const;
  std::size_t w1_offset() const { return w1_; }
  std::size_t b1_offset() const { return b1_; }
  std::size_t w2_offset() const { return w2_; }
  std::size_t b2_offset() const { return b2_; }
  std::size_t w3_offset() const { return w3_; }
  std::size_t b3_offset() const { return b3_; }
  std::size_t plane_param_count() const { return w1_; }

 private:
  FieldShape shape_;
  AxisBox bounds_;
  std::vector<double> params_;
  std::array<std::size_t, kPlaneCount> plane_offsets_{};
  std::size_t w1_ = 0, b1_ = 0, w2_ = 0, b2_ = 0, w3_ = 0, b3_ = 0;
  std::uint64_t revision_ = 0;
};

struct FieldOutput {
  Vec3 dp = Vec3::Zero();
  Quat dr;
  Vec3 ds = Vec3::Zero();
};

/// Grid coordinate of a scene point along one axis, clamped into the grid.
double grid_coordinate(const HexPlaneField& field, int axis, const Vec3& p, double tau);

/// Deformation of one point at time tau in [0, 1]. Points outside the field
/// bounds are clamped to the boundary (with a logged warning).
FieldOutput field_eval(const HexPlaneField& field, const Vec3& p, double tau);

/// Per-point intermediates retained for field_backward.
struct FieldTape {
  std::uint64_t revision = 0;
  double tau = 0.0;
  std::vector<Vec3> points;
  std::vector<std::array<int, 2 * kPlaneCount>> cells;        // (i0, j0) per plane
  std::vector<std::array<double, 2 * kPlaneCount>> weights;   // (fx, fy) per plane
  std::vector<std::vector<double>> activations;  // input, h1, h2, raw output per point

  std::size_t size() const { return points.size(); }
};

/// Evaluates every center of `cloud`; bit-identical to looping field_eval.
Deformation field_eval_batch(const HexPlaneField& field, const GaussianCloud& cloud, double tau,
                             FieldTape* tape = nullptr);
Deformation field_eval_batch(const HexPlaneField& field, const std::vector<Vec3>& points, double tau,
                             FieldTape* tape = nullptr);

/// Upstream gradients w.r.t. the decoded (dp, normalized dr, ds).
struct DeformationGrad {
  std::vector<Vec3> dp;
  std::vector<Quat> dr;
  std::vector<Vec3> ds;

  static DeformationGrad zeros(std::size_t n);
  std::size_t size() const { return dp.size(); }
};

/// Gradient w.r.t. every parameter, in the field's flat layout.
struct FieldGradients {
  std::vector<double> values;
};

/// Reverse-mode gradients through the decoder, fusion and bilinear lookups.
/// Throws StaleForwardState if the field changed since `tape` was recorded.
FieldGradients field_backward(const HexPlaneField& field, const FieldTape& tape,
                              const DeformationGrad& upstream);

/// Planes ~ U(-1e-2, 1e-2) (product fusion: 1 + U(-1e-2, 1e-2)), hidden
/// layers He-normal, biases zero, output layer zero. Identity everywhere.
HexPlaneField init_identity(const FieldShape& shape, const AxisBox& bounds, std::uint64_t seed);

/// Bounds of a cloud padded by `margin` times the largest extent on every side.
AxisBox padded_bounds(const GaussianCloud& cloud, double margin = 0.25);

/// Directory layout: field.json plus one TNSR per plane and decoder tensor.
void save_field(const HexPlaneField& field, const std::filesystem::path& dir);
HexPlaneField load_field(const std::filesystem::path& dir);

}  // namespace frag4d
