#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "frag4d/deformation.hpp"
#include "frag4d/image.hpp"
#include "frag4d/renderer.hpp"
#include "frag4d/scene.hpp"

namespace frag4d {

struct LossWeights {
  double ref = 1.0;
  double mask = 0.5;
  double rigid = 0.1;

  /// Throws InvalidWeights on negative or all-zero weights.
  void validate() const;
};

double total_loss(const LossWeights& w, double ref, double mask, double rigid);

/// Scalar loss with its gradient w.r.t. the image it was computed from.
struct ImageLoss {
  double value = 0.0;
  Image grad;
};

/// Mean over pixels and channels of the squared difference.
ImageLoss mse_loss(const Image& rendered, const Image& target);
/// Mean over pixels of |alpha - mask|; subgradient 0 where they agree.
ImageLoss mask_loss(const Image& alpha, const Image& mask);

struct RigidLoss {
  double value = 0.0;
  std::vector<Vec3> grad;  // w.r.t. deformed centers
};

/// Mean over directed neighbor pairs of |d_canonical - d_deformed|.
/// Throws GraphCloudMismatch if either cloud does not match the graph.
RigidLoss loss_rigid(const GaussianCloud& canonical, const GaussianCloud& deformed, const NeighborGraph& graph);

/// Adam moments for one flat parameter block.
class AdamState {
 public:
  AdamState() = default;
  explicit AdamState(std::size_t n, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : m_(n, 0.0), v_(n, 0.0), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  std::size_t size() const { return m_.size(); }
  std::int64_t steps() const { return steps_; }
  void step(std::span<double> params, std::span<const double> grad, double lr);
  /// Rebuilds moments after points are removed or added. `source[i]` is the old
  /// row for new row i, or -1 for a fresh row; rows are `width` wide.
  void remap(const std::vector<std::int64_t>& source, std::size_t width);

 private:
  std::vector<double> m_, v_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::int64_t steps_ = 0;
};

/// Field-parameter loss with gradient in the field's flat layout.
struct FieldLoss {
  double value = 0.0;
  std::vector<double> grad;
};

/// Deforms the cloud with the field at tau and renders it.
struct DeformedRender {
  Deformation deformation;
  GaussianCloud cloud;
  RenderOutput output;
};
DeformedRender render_deformed(const HexPlaneField& field, const GaussianCloud& canonical, double tau,
                               const Camera& camera, FieldTape* tape = nullptr);

/// Pulls renderer gradients on the deformed cloud back to (dp, dr, ds).
void accumulate_pullback(const GaussianCloud& deformed, const RenderGradients& g, double weight,
                         DeformationGrad& out);

/// Frame k of T sits at tau = k / (T - 1).
double frame_tau(std::size_t k, std::size_t frames);

/// Mean over frames of the reference-view MSE; frame k is compared at frame_tau(k).
FieldLoss loss_ref(const HexPlaneField& field, const GaussianCloud& canonical, const Camera& camera,
                   const std::vector<Image>& frames);
/// Alpha-vs-mask L1 of the deformed cloud at tau.
FieldLoss loss_mask(const HexPlaneField& field, const GaussianCloud& canonical, const Camera& camera,
                    const Image& mask, double tau);

struct ViewSupervision {
  Camera camera;
  std::vector<Image> frames;  // T x (H x W x 3)
  std::vector<Image> masks;   // T x (H x W x 1), may be empty
};

/// Everything a fragment is fitted against. View 0 is the reference view.
struct FragmentSupervision {
  ViewSupervision reference;
  std::vector<ViewSupervision> extra;

  std::size_t frame_count() const { return reference.frames.size(); }
  /// Throws ResolutionMismatch / BadShape on inconsistent content.
  void validate() const;
};

/// view_{k}.json, frames_{k}.tnsr, masks_{k}.tnsr with k = 0 the reference.
void save_supervision(const FragmentSupervision& sup, const std::filesystem::path& dir);
FragmentSupervision load_supervision(const std::filesystem::path& dir);

std::string camera_to_json(const Camera& camera);
Camera camera_from_json(const std::string& text);

struct StaticView {
  Camera camera;
  Image image;
  Image mask;
};

struct StaticFitParams {
  int iterations = 3000;
  std::size_t initial_points = 1000;
  std::size_t max_points = 4000;
  int densify_every = 500;
  double prune_opacity = 0.01;
  double clone_percentile = 0.95;
  double position_lr = 1.6e-2;
  double position_lr_final_ratio = 0.01;
  double scale_lr = 5e-3;
  double opacity_lr = 5e-2;
  double color_lr = 2.5e-2;
  LossWeights weights;
  std::uint64_t seed = 0;
  std::function<void(int, const GaussianCloud&)> on_checkpoint;
};

/// Seeds points inside the masks' visual hull, then runs Adam on color MSE and
/// mask L1 over randomly drawn views with periodic prune/clone.
GaussianCloud fit_static(const std::vector<StaticView>& views, const StaticFitParams& params);

struct MotionFitParams {
  int iterations = 3000;
  double lr = 1e-3;
  LossWeights weights;
  std::size_t neighbors = 8;
  std::uint64_t seed = 0;
  std::function<void(int, const HexPlaneField&)> on_checkpoint;
};

/// Optimizes the field with the canonical cloud frozen. Each iteration draws a
/// frame, adds its reference-view MSE, one random extra view's mask term and
/// the rigid term.
HexPlaneField fit_motion(HexPlaneField field, const GaussianCloud& canonical, const FragmentSupervision& sup,
                         const MotionFitParams& params);

/// Reference-view MSE of the deformed cloud averaged over all frames.
double mean_view_mse(const HexPlaneField& field, const GaussianCloud& canonical, const Camera& camera,
                     const std::vector<Image>& frames);

}  // namespace frag4d
