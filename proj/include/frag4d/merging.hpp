#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "frag4d/deformation.hpp"
#include "frag4d/optimize.hpp"
#include "frag4d/renderer.hpp"
#include "frag4d/scene.hpp"

namespace frag4d {

/// lambda * a + (1 - lambda) * b on dp and ds; sign-aligned normalized linear
/// blend on dr. Exact at lambda 0 and 1.
FieldOutput blend_outputs(const FieldOutput& a, const FieldOutput& b, double lambda);

/// Blend of field_i at tau_i and field_j at tau_j for point p.
FieldOutput blend_eval(const HexPlaneField& field_i, const HexPlaneField& field_j, double lambda, const Vec3& p,
                       double tau_i, double tau_j);

/// How fragment fields relate to the points they are queried with.
///  shared:  every field deforms the same canonical cloud directly.
///  chained: fragment k deforms the state reached at the end of fragment k - 1,
///           so one cloud is carried through all fragments.
enum class BoundaryMode { kShared, kChained };

struct BlendRecord {
  double lambda = 0.5;
  HexPlaneField star;  // learnable copy of the right-hand field
  bool merged = false;
};

/// Position in global time: inside fragment `index` at `local` tau, or exactly
/// on interior boundary `index` (between fragments index and index + 1).
struct TimeSlot {
  bool boundary = false;
  std::size_t index = 0;
  double local = 0.0;
};

class GlobalDeformation {
 public:
  GlobalDeformation() = default;
  GlobalDeformation(std::vector<HexPlaneField> fields, BoundaryMode mode, double lambda = 0.5);

  std::size_t fragment_count() const { return fields_.size(); }
  BoundaryMode mode() const { return mode_; }
  const std::vector<HexPlaneField>& fields() const { return fields_; }
  const std::vector<BlendRecord>& blends() const { return blends_; }
  std::vector<BlendRecord>& mutable_blends() { return blends_; }

  /// Fragments tile [0, 1] equally; interior boundaries sit at b / K.
  TimeSlot locate(double tau_global) const;
  /// Frame g of a timeline with (f - 1) frames per fragment.
  TimeSlot frame_slot(std::size_t g, int f) const;

  /// Total (dp, dr, ds) relative to the queried points. Before a boundary is
  /// merged it belongs to the left fragment; afterwards it routes through the blend.
  Deformation evaluate(const std::vector<Vec3>& points, const TimeSlot& slot) const;
  Deformation evaluate(const GaussianCloud& cloud, const TimeSlot& slot) const;
  FieldOutput query(const Vec3& p, double tau_global) const;

  /// State carried into fragment k (chained mode): the deformation reached at
  /// the end of fragments 0..k-1, through the original fields.
  Deformation carried_state(const std::vector<Vec3>& points, std::size_t k) const;

 private:
  std::vector<HexPlaneField> fields_;
  std::vector<BlendRecord> blends_;
  BoundaryMode mode_ = BoundaryMode::kShared;
};

/// Composition of deformation b applied after a (positions add, rotations
/// compose b * a, log-scales add).
Deformation compose_deformations(const Deformation& a, const Deformation& b);

/// The shared frame at an interior boundary: view 0 carries the reference
/// image; every view may carry a mask.
struct OverlapView {
  Camera camera;
  Image image;  // may be empty
  Image mask;   // may be empty
};
struct OverlapSupervision {
  std::vector<OverlapView> views;
};

struct MergeParams {
  double lambda = 0.5;
  int iterations = 1000;
  double lr = 1e-4;
  LossWeights weights;
  std::size_t neighbors = 8;
  std::uint64_t seed = 0;
};

/// Reference-view MSE at boundary b with the boundary rendered three ways.
struct OverlapErrors {
  double left = 0.0;     // left field alone at its end
  double right = 0.0;    // right field alone at its start
  double blended = 0.0;  // through the blend
};
OverlapErrors overlap_errors(const GlobalDeformation& global, std::size_t boundary, const GaussianCloud& cloud,
                             const OverlapSupervision& sup);

/// Optimizes only the learnable copy at `boundary` on the overlap frame; the
/// fragment fields stay untouched. Throws MissingOverlapSupervision.
GlobalDeformation merge_pair(GlobalDeformation global, std::size_t boundary, const GaussianCloud& cloud,
                             const OverlapSupervision& sup, const MergeParams& params);

/// Left-to-right merge of every interior boundary. `on_merge(b)` is called
/// before each merge_pair.
GlobalDeformation merge_all(std::vector<HexPlaneField> fields, BoundaryMode mode, const GaussianCloud& cloud,
                            const std::vector<OverlapSupervision>& overlaps, const MergeParams& params,
                            const std::function<void(std::size_t)>& on_merge = {});

/// manifest.json referencing the fragment field directories (paths relative
/// to the base directory given to load_global) plus one blend_{b}/ per boundary.
void save_global(const GlobalDeformation& global, const std::filesystem::path& dir,
                 const std::vector<std::string>& field_dirs);
GlobalDeformation load_global(const std::filesystem::path& dir, const std::filesystem::path& base);

}  // namespace frag4d
