#include "frag4d/hierarchy.hpp"

#include <algorithm>

#include "frag4d/error.hpp"
#include "frag4d/io.hpp"
#include "json.hpp"

namespace frag4d {
namespace {

void check_count(int n) {
  if (n < 3) fail(ErrorCode::kTooFewFrames, "interpolation needs n >= 3, got " + std::to_string(n));
}

void check_compatible(const Frame& a, const Frame& b) {
  if (!a.image.same_shape(b.image)) fail(ErrorCode::kAdapterDimMismatch, "endpoint images differ in shape");
  if (a.features.tokens() != b.features.tokens() || a.features.dim() != b.features.dim())
    fail(ErrorCode::kAdapterDimMismatch, "endpoint features differ in shape");
}

int grow(FragmentTree& tree, const FrameRef& a, const FrameRef& b, std::int64_t start, std::int64_t end, int depth,
         const InterpolatorAdapter& adapter) {
  const HierarchyParams& params = tree.params;
  const InterpolationRequest request{start, end, depth, params.lattice()};
  TreeNode node;
  node.start = start;
  node.end = end;
  node.depth = depth;
  node.frames = adapter.interpolate(a, b, params.frames, request);
  node.analysis = analyze_keyframes(node.frames, a->features, b->features, params.threshold, params.rule);
  const int id = static_cast<int>(tree.nodes.size());
  tree.nodes.push_back(std::move(node));

  if (depth >= params.max_depth || !tree.nodes[static_cast<std::size_t>(id)].analysis.keyframe) {
    tree.leaves.push_back(id);
    return id;
  }
  const std::size_t k = *tree.nodes[static_cast<std::size_t>(id)].analysis.keyframe;
  const FrameRef mid = tree.nodes[static_cast<std::size_t>(id)].frames[k];
  const std::int64_t pos = request.position(static_cast<int>(k), params.frames);
  tree.nodes[static_cast<std::size_t>(id)].split = pos;
  const int left = grow(tree, a, mid, start, pos, depth + 1, adapter);
  const int right = grow(tree, mid, b, pos, end, depth + 1, adapter);
  tree.nodes[static_cast<std::size_t>(id)].left = left;
  tree.nodes[static_cast<std::size_t>(id)].right = right;
  return id;
}

}  // namespace

std::string InterpolationRequest::id() const {
  return std::to_string(start) + "_" + std::to_string(end) + "_" + std::to_string(depth);
}

std::vector<FrameRef> LinearInterpolator::interpolate(const FrameRef& a, const FrameRef& b, int n,
                                                      const InterpolationRequest&) const {
  check_count(n);
  check_compatible(*a, *b);
  std::vector<FrameRef> out;
  out.reserve(static_cast<std::size_t>(n));
  out.push_back(a);
  const auto& fa = a->features.values();
  const auto& fb = b->features.values();
  for (int k = 1; k < n - 1; ++k) {
    const double w = static_cast<double>(k) / (n - 1);
    Frame f;
    f.image = a->image;
    for (std::size_t i = 0; i < f.image.data.size(); ++i)
      f.image.data[i] = (1.0 - w) * a->image.data[i] + w * b->image.data[i];
    std::vector<double> values(fa.size());
    for (std::size_t i = 0; i < fa.size(); ++i) values[i] = (1.0 - w) * fa[i] + w * fb[i];
    f.features = FeatureMap(a->features.tokens(), a->features.dim(), std::move(values));
    out.push_back(std::make_shared<const Frame>(std::move(f)));
  }
  out.push_back(b);
  return out;
}

std::vector<FrameRef> DirectoryInterpolator::interpolate(const FrameRef& a, const FrameRef& b, int n,
                                                         const InterpolationRequest& request) const {
  check_count(n);
  check_compatible(*a, *b);
  const auto frames_path = dir_ / ("frames_" + request.id() + ".tnsr");
  const auto features_path = dir_ / ("features_" + request.id() + ".tnsr");
  if (!std::filesystem::exists(frames_path) || !std::filesystem::exists(features_path))
    fail(ErrorCode::kMissingExternalFrames, "no precomputed frames for request " + request.id() + " in " +
                                                dir_.string());
  const auto images = tensor_to_images(read_tensor(frames_path));
  const auto features = tensor_to_features(read_tensor(features_path));
  if (images.size() != static_cast<std::size_t>(n) || features.size() != static_cast<std::size_t>(n))
    fail(ErrorCode::kAdapterDimMismatch, "request " + request.id() + " holds the wrong frame count");
  std::vector<FrameRef> out;
  out.reserve(static_cast<std::size_t>(n));
  out.push_back(a);
  for (int k = 1; k < n - 1; ++k) {
    const auto i = static_cast<std::size_t>(k);
    if (!images[i].same_shape(a->image) || features[i].dim() != a->features.dim())
      fail(ErrorCode::kAdapterDimMismatch, "request " + request.id() + " frame shape differs from endpoints");
    out.push_back(std::make_shared<const Frame>(Frame{images[i], features[i]}));
  }
  out.push_back(b);
  return out;
}

std::vector<FrameRef> interpolate(const InterpolatorAdapter& adapter, const FrameRef& a, const FrameRef& b, int n) {
  check_count(n);
  return adapter.interpolate(a, b, n, InterpolationRequest{0, n - 1, 0, n - 1});
}

KeyframeAnalysis analyze_keyframes(const std::vector<FrameRef>& frames, const FeatureMap& start,
                                   const FeatureMap& end, double threshold, SelectionRule rule) {
  if (frames.size() < 3) fail(ErrorCode::kTooFewFrames, "keyframe selection needs >= 3 frames");
  KeyframeAnalysis out;
  const std::size_t n = frames.size();
  std::vector<bool> flagged(n, false);
  for (std::size_t k = 0; k + 1 < n; ++k) {
    const double s = motion_score(dift_heatmap(frames[k]->features, frames[k + 1]->features));
    out.pair_scores.push_back(s);
    if (s < threshold) flagged[k] = flagged[k + 1] = true;
  }
  std::optional<std::size_t> best;
  for (std::size_t k = 1; k + 1 < n; ++k) {
    if (!flagged[k]) continue;
    const double score = fidelity_score(frames[k]->features, start, end);
    out.candidates.push_back(k);
    out.candidate_fidelity.push_back(score);
    const std::size_t slot = out.candidates.size() - 1;
    if (!best || (rule == SelectionRule::kMinFidelity ? score < out.candidate_fidelity[*best]
                                                      : score > out.candidate_fidelity[*best]))
      best = slot;
  }
  if (best) out.keyframe = out.candidates[*best];
  return out;
}

std::optional<std::size_t> select_keyframe(const std::vector<FrameRef>& frames, const FeatureMap& start,
                                           const FeatureMap& end, double threshold, SelectionRule rule) {
  return analyze_keyframes(frames, start, end, threshold, rule).keyframe;
}

void HierarchyParams::validate() const {
  if (frames < 3) fail(ErrorCode::kInvalidParams, "fragment frame count f must be >= 3");
  if (max_depth < 0) fail(ErrorCode::kInvalidParams, "max_depth must be >= 0");
  if (!(threshold >= -1.0 && threshold <= 1.0)) fail(ErrorCode::kInvalidParams, "threshold must lie in [-1, 1]");
  std::int64_t l = 1;
  for (int d = 0; d <= max_depth; ++d) {
    if (l > (std::int64_t{1} << 53) / (frames - 1)) fail(ErrorCode::kInvalidParams, "max_depth too large for f");
    l *= frames - 1;
  }
}

std::int64_t HierarchyParams::lattice() const {
  std::int64_t l = 1;
  for (int d = 0; d <= max_depth; ++d) l *= frames - 1;
  return l;
}

int FragmentTree::depth() const {
  int d = 0;
  for (const auto& n : nodes) d = std::max(d, n.depth);
  return d;
}

FragmentTree build_hierarchy(const FrameRef& start, const FrameRef& end, const InterpolatorAdapter& adapter,
                             const HierarchyParams& params) {
  params.validate();
  check_compatible(*start, *end);
  FragmentTree tree;
  tree.params = params;
  grow(tree, start, end, 0, params.lattice(), 0, adapter);
  tree.keyframe_positions.push_back(0);
  tree.keyframes.push_back(start);
  for (int leaf : tree.leaves) {
    const TreeNode& node = tree.nodes[static_cast<std::size_t>(leaf)];
    tree.keyframe_positions.push_back(node.end);
    tree.keyframes.push_back(node.frames.back());
  }
  return tree;
}

std::vector<Fragment> emit_fragments(const FragmentTree& tree, const InterpolatorAdapter& adapter, int f) {
  check_count(f);
  std::vector<Fragment> out;
  for (std::size_t i = 0; i < tree.leaves.size(); ++i) {
    const TreeNode& leaf = tree.nodes[static_cast<std::size_t>(tree.leaves[i])];
    Fragment frag;
    frag.id = static_cast<int>(i);
    frag.start_position = leaf.start;
    frag.end_position = leaf.end;
    if (f == tree.params.frames) {
      frag.frames = leaf.frames;
    } else {
      frag.frames = adapter.interpolate(tree.keyframes[i], tree.keyframes[i + 1], f,
                                        InterpolationRequest{leaf.start, leaf.end, leaf.depth, tree.params.lattice()});
    }
    out.push_back(std::move(frag));
  }
  return out;
}

std::string tree_to_json(const FragmentTree& tree) {
  using nlohmann::json;
  json doc;
  doc["threshold"] = tree.params.threshold;
  doc["max_depth"] = tree.params.max_depth;
  doc["frames"] = tree.params.frames;
  doc["selection"] = tree.params.rule == SelectionRule::kMinFidelity ? "min" : "max";
  doc["lattice"] = tree.params.lattice();
  doc["keyframe_positions"] = tree.keyframe_positions;
  doc["leaves"] = tree.leaves;
  json nodes = json::array();
  for (const auto& n : tree.nodes) {
    json j;
    j["start"] = n.start;
    j["end"] = n.end;
    j["depth"] = n.depth;
    j["pair_scores"] = n.analysis.pair_scores;
    j["candidates"] = n.analysis.candidates;
    j["candidate_fidelity"] = n.analysis.candidate_fidelity;
    j["keyframe"] = n.analysis.keyframe ? json(*n.analysis.keyframe) : json(nullptr);
    j["split"] = n.split ? json(*n.split) : json(nullptr);
    j["left"] = n.left;
    j["right"] = n.right;
    nodes.push_back(std::move(j));
  }
  doc["nodes"] = std::move(nodes);
  return doc.dump(2) + "\n";
}

}  // namespace frag4d
