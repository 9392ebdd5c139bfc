#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "frag4d/image.hpp"
#include "frag4d/similarity.hpp"

namespace frag4d {

/// One video frame: RGB image plus its token features.
struct Frame {
  Image image;
  FeatureMap features;
};
using FrameRef = std::shared_ptr<const Frame>;

/// Which endpoint pair a call to the interpolator covers. Positions live on an
/// integer lattice [0, lattice] spanning the whole input pair, so every frame
/// produced at any depth has an integer position.
struct InterpolationRequest {
  std::int64_t start = 0;
  std::int64_t end = 0;
  int depth = 0;
  std::int64_t lattice = 1;

  /// "{start}_{end}_{depth}"
  std::string id() const;
  /// Lattice position of item k out of n.
  std::int64_t position(int k, int n) const { return start + (end - start) * k / (n - 1); }
};

class InterpolatorAdapter {
 public:
  virtual ~InterpolatorAdapter() = default;
  /// n frames from a to b; item 0 is `a` and item n - 1 is `b` (same references).
  virtual std::vector<FrameRef> interpolate(const FrameRef& a, const FrameRef& b, int n,
                                            const InterpolationRequest& request) const = 0;
};

/// Elementwise linear blends of images and features at uniform weights.
class LinearInterpolator : public InterpolatorAdapter {
 public:
  std::vector<FrameRef> interpolate(const FrameRef& a, const FrameRef& b, int n,
                                    const InterpolationRequest& request) const override;
};

/// Loads precomputed frames_{id}.tnsr ([n,H,W,3]) and features_{id}.tnsr
/// ([n,P,d]) from a directory.
class DirectoryInterpolator : public InterpolatorAdapter {
 public:
  explicit DirectoryInterpolator(std::filesystem::path dir) : dir_(std::move(dir)) {}
  std::vector<FrameRef> interpolate(const FrameRef& a, const FrameRef& b, int n,
                                    const InterpolationRequest& request) const override;

 private:
  std::filesystem::path dir_;
};

/// Convenience wrapper: interpolate over the whole lattice at depth 0.
std::vector<FrameRef> interpolate(const InterpolatorAdapter& adapter, const FrameRef& a, const FrameRef& b, int n);

/// Min picks the candidate closest to the inputs in feature distribution;
/// max is the literal "highest distance" reading.
enum class SelectionRule { kMinFidelity, kMaxFidelity };

struct KeyframeAnalysis {
  std::vector<double> pair_scores;  // motion score of (k, k + 1)
  std::vector<std::size_t> candidates;
  std::vector<double> candidate_fidelity;
  std::optional<std::size_t> keyframe;
};

/// Flags interior frames adjacent to any consecutive pair whose motion score is
/// below `threshold` and picks the flagged frame with the best fidelity score
/// (ties to the lower index). Throws TooFewFrames for fewer than 3 frames.
KeyframeAnalysis analyze_keyframes(const std::vector<FrameRef>& frames, const FeatureMap& start,
                                   const FeatureMap& end, double threshold,
                                   SelectionRule rule = SelectionRule::kMinFidelity);

std::optional<std::size_t> select_keyframe(const std::vector<FrameRef>& frames, const FeatureMap& start,
                                           const FeatureMap& end, double threshold,
                                           SelectionRule rule = SelectionRule::kMinFidelity);

struct HierarchyParams {
  double threshold = 0.85;
  int max_depth = 2;
  int frames = 16;  // f
  SelectionRule rule = SelectionRule::kMinFidelity;

  void validate() const;
  /// (f - 1)^(max_depth + 1)
  std::int64_t lattice() const;
};

struct TreeNode {
  std::int64_t start = 0;
  std::int64_t end = 0;
  int depth = 0;
  KeyframeAnalysis analysis;
  std::optional<std::int64_t> split;  // lattice position of the chosen keyframe
  int left = -1;
  int right = -1;
  std::vector<FrameRef> frames;

  bool leaf() const { return left < 0; }
};

struct FragmentTree {
  HierarchyParams params;
  std::vector<TreeNode> nodes;  // nodes[0] is the root
  std::vector<int> leaves;      // in temporal order
  std::vector<std::int64_t> keyframe_positions;  // lattice positions, endpoints included
  std::vector<FrameRef> keyframes;

  /// Depth of the deepest node.
  int depth() const;
};

FragmentTree build_hierarchy(const FrameRef& start, const FrameRef& end, const InterpolatorAdapter& adapter,
                             const HierarchyParams& params);

struct Fragment {
  int id = 0;
  std::int64_t start_position = 0;  // lattice positions of the keyframes
  std::int64_t end_position = 0;
  std::vector<FrameRef> frames;

  /// Index of frame 0 in the final timeline, where keyframe k sits at k (f - 1).
  int global_start() const { return id * (static_cast<int>(frames.size()) - 1); }
};

/// One fragment of `f` frames per consecutive keyframe pair; neighbors share
/// their boundary frame by reference.
std::vector<Fragment> emit_fragments(const FragmentTree& tree, const InterpolatorAdapter& adapter, int f);

/// Intervals, scores and chosen positions as a JSON document.
std::string tree_to_json(const FragmentTree& tree);

}  // namespace frag4d
