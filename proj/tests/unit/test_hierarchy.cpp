#include <cmath>
#include <functional>
#include <set>

#include "frag4d/hierarchy.hpp"
#include "helpers.hpp"

using namespace frag4d;

namespace {

constexpr double kHalfPi = 1.5707963267948966;

// Four tokens at quarter turns around an angle phi, plus a constant third
// component: the best-match cosine between two frames depends only on the
// angle difference modulo a quarter turn.
FrameRef angle_frame(double phi) {
  std::vector<double> v;
  for (int p = 0; p < 4; ++p) {
    v.push_back(std::cos(phi + p * kHalfPi));
    v.push_back(std::sin(phi + p * kHalfPi));
    v.push_back(0.2);
  }
  Frame f;
  f.image = Image(2, 2, 3, phi);
  f.features = FeatureMap(4, 3, std::move(v));
  return std::make_shared<const Frame>(std::move(f));
}

FrameRef scalar_frame(double image_value, std::vector<double> tokens) {
  Frame f;
  f.image = Image(2, 2, 3, image_value);
  const std::size_t n = tokens.size();
  f.features = FeatureMap(n, 1, std::move(tokens));
  return std::make_shared<const Frame>(std::move(f));
}

// Frames from a closed-form angle path over the lattice, like the oracle
// adapter: item k sits at request.position(k, n) / lattice.
class ScriptAdapter : public InterpolatorAdapter {
 public:
  explicit ScriptAdapter(std::function<double(double)> phi) : phi_(std::move(phi)) {}
  std::vector<FrameRef> interpolate(const FrameRef& a, const FrameRef& b, int n,
                                    const InterpolationRequest& r) const override {
    std::vector<FrameRef> out{a};
    for (int k = 1; k < n - 1; ++k)
      out.push_back(angle_frame(phi_(static_cast<double>(r.position(k, n)) / static_cast<double>(r.lattice))));
    out.push_back(b);
    return out;
  }
  FrameRef at(double t) const { return angle_frame(phi_(t)); }

 private:
  std::function<double(double)> phi_;
};

void check_tree_properties(const FragmentTree& tree) {
  const auto& pos = tree.keyframe_positions;
  REQUIRE(pos.size() == tree.leaves.size() + 1);
  CHECK(pos.front() == 0);
  CHECK(pos.back() == tree.params.lattice());
  for (std::size_t i = 1; i < pos.size(); ++i) CHECK(pos[i] > pos[i - 1]);
  CHECK(tree.leaves.size() <= (std::size_t{1} << tree.params.max_depth));
  for (int leaf : tree.leaves) {
    const TreeNode& n = tree.nodes[static_cast<std::size_t>(leaf)];
    const bool all_above = std::all_of(n.analysis.pair_scores.begin(), n.analysis.pair_scores.end(),
                                       [&](double s) { return s >= tree.params.threshold; });
    CHECK((all_above || n.depth == tree.params.max_depth));
  }
  for (const TreeNode& n : tree.nodes)
    if (!n.leaf()) {
      const TreeNode& l = tree.nodes[static_cast<std::size_t>(n.left)];
      const TreeNode& r = tree.nodes[static_cast<std::size_t>(n.right)];
      CHECK(l.start == n.start);
      CHECK(l.end == *n.split);
      CHECK(r.start == *n.split);
      CHECK(r.end == n.end);
    }
}

HierarchyParams params(double threshold, int max_depth, int f = 16) {
  HierarchyParams p;
  p.threshold = threshold;
  p.max_depth = max_depth;
  p.frames = f;
  return p;
}

}  // namespace

TEST_SUITE("hierarchy") {
  TEST_CASE("linear interpolation examples") {
    const LinearInterpolator lin;
    const FrameRef a = scalar_frame(0.0, {1.0}), b = scalar_frame(2.0, {3.0});
    const auto three = interpolate(lin, a, b, 3);
    REQUIRE(three.size() == 3);
    CHECK(three[0] == a);
    CHECK(three[2] == b);
    CHECK(three[1]->image.data[0] == 1.0);
    CHECK(three[1]->features.values()[0] == 2.0);

    const auto same = interpolate(lin, a, a, 4);
    for (const auto& f : same) CHECK(f->features == a->features);

    const auto five = interpolate(lin, scalar_frame(0.0, {1.0}), scalar_frame(1.0, {2.0}), 5);
    const double expect[] = {0.0, 0.25, 0.5, 0.75, 1.0};
    for (int k = 0; k < 5; ++k) CHECK(five[static_cast<std::size_t>(k)]->image.data[0] == doctest::Approx(expect[k]));

    CHECK(test::error_of([&] { interpolate(lin, a, b, 2); }) == ErrorCode::kTooFewFrames);
    CHECK(test::error_of([&] { interpolate(lin, a, scalar_frame(0.0, {1.0, 2.0}), 3); }) ==
          ErrorCode::kAdapterDimMismatch);
  }

  TEST_CASE("request ids and lattice positions") {
    const InterpolationRequest r{15, 30, 1, 3375};
    CHECK(r.id() == "15_30_1");
    CHECK(r.position(0, 16) == 15);
    CHECK(r.position(15, 16) == 30);
    CHECK(r.position(5, 16) == 20);
    CHECK(params(0.85, 2).lattice() == 3375);
  }

  TEST_CASE("directory adapter reports missing frames") {
    const auto dir = test::scratch("adapter_missing");
    const DirectoryInterpolator ext(dir);
    const FrameRef a = scalar_frame(0.0, {1.0}), b = scalar_frame(1.0, {2.0});
    CHECK(test::error_of([&] { ext.interpolate(a, b, 3, {0, 8, 0, 8}); }) == ErrorCode::kMissingExternalFrames);
  }

  TEST_CASE("select_keyframe examples") {
    const FrameRef s = angle_frame(0.0);
    const FeatureMap& fs = s->features;
    SUBCASE("static sequence") {
      const std::vector<FrameRef> frames(5, s);
      CHECK_FALSE(select_keyframe(frames, fs, fs, 0.85).has_value());
    }
    SUBCASE("single flagged interior frame") {
      // Only pair (0, 1) moves; the flagged interior frame is 1.
      const std::vector<FrameRef> frames{angle_frame(0.7), s, s};
      const auto a = analyze_keyframes(frames, frames[0]->features, fs, 0.85);
      CHECK(a.pair_scores[0] < 0.85);
      CHECK(a.pair_scores[1] == doctest::Approx(1.0));
      CHECK(a.candidates == std::vector<std::size_t>{1});
      CHECK(a.keyframe == std::optional<std::size_t>{1});
    }
    SUBCASE("the candidate identical to the start wins") {
      // Two-token 2-D frames so the token statistics differ between states.
      auto two = [](double ax, double ay, double bx, double by) {
        Frame f;
        f.image = Image(2, 2, 3);
        f.features = FeatureMap(2, 2, {ax, ay, bx, by});
        return std::make_shared<const Frame>(std::move(f));
      };
      const FrameRef st = two(1, 0, 1, 0.1), x = two(0, 1, 0.1, 1), e = two(1, 1, 1, 1.1);
      const FeatureMap& fs = st->features;
      const std::vector<FrameRef> frames{st, st, x, x};
      const auto a = analyze_keyframes(frames, fs, e->features, 0.85);
      CHECK(a.candidates == std::vector<std::size_t>{1, 2});
      const double f1 = fidelity_score(fs, fs, e->features);
      const double f2 = fidelity_score(x->features, fs, e->features);
      CHECK(f1 < f2);
      CHECK(a.candidate_fidelity[0] == f1);
      CHECK(a.candidate_fidelity[1] == f2);
      CHECK(a.keyframe == std::optional<std::size_t>{1});
      CHECK(select_keyframe(frames, fs, e->features, 0.85, SelectionRule::kMaxFidelity) ==
            std::optional<std::size_t>{2});
    }
    SUBCASE("too few frames") {
      CHECK(test::error_of([&] { select_keyframe({s, s}, fs, fs, 0.85); }) == ErrorCode::kTooFewFrames);
    }
  }

  TEST_CASE("never selects an endpoint") {
    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<FrameRef> frames;
      for (int k = 0; k < 6; ++k) frames.push_back(angle_frame(rng.uniform(0, 1.5)));
      const auto k = select_keyframe(frames, frames.front()->features, frames.back()->features, 0.99);
      if (k) {
        CHECK(*k > 0);
        CHECK(*k < 5);
      }
    }
  }

  TEST_CASE("static input pair gives a depth-0 tree and one fragment") {
    const ScriptAdapter adapter([](double) { return 0.3; });
    const HierarchyParams p = params(0.85, 2);
    const FragmentTree tree = build_hierarchy(adapter.at(0), adapter.at(1), adapter, p);
    CHECK(tree.depth() == 0);
    CHECK(tree.keyframe_positions == std::vector<std::int64_t>{0, p.lattice()});
    const auto frags = emit_fragments(tree, adapter, 16);
    REQUIRE(frags.size() == 1);
    CHECK(frags[0].frames.size() == 16);
  }

  TEST_CASE("motion in the first half only splits the first half") {
    // Angle ramps over t in [0.1, 0.4] and holds afterwards.
    auto phi = [](double t) { return 3.0 * std::clamp((t - 0.1) / 0.3, 0.0, 1.0); };
    const ScriptAdapter adapter(phi);
    const HierarchyParams p = params(0.95, 2);
    const FragmentTree tree = build_hierarchy(adapter.at(0), adapter.at(1), adapter, p);
    check_tree_properties(tree);
    CHECK(tree.depth() >= 1);
    const double lattice = static_cast<double>(p.lattice());
    for (const TreeNode& n : tree.nodes) {
      // Brute-force oracle: recompute every pair score of the node's frames.
      for (std::size_t k = 0; k + 1 < n.frames.size(); ++k) {
        const double s = motion_score(dift_heatmap(n.frames[k]->features, n.frames[k + 1]->features));
        CHECK(s == n.analysis.pair_scores[k]);
      }
      if (n.split) CHECK(static_cast<double>(*n.split) / lattice <= 0.5);
      // A node whose whole interval is static has no candidates.
      if (static_cast<double>(n.start) / lattice >= 0.4) CHECK(n.analysis.candidates.empty());
    }
  }

  TEST_CASE("depth bound, leaf property and fragment sharing under uniform motion") {
    const ScriptAdapter adapter([](double t) { return 12.0 * t; });
    for (int depth : {0, 1, 2}) {
      const HierarchyParams p = params(0.95, depth);
      const FragmentTree tree = build_hierarchy(adapter.at(0), adapter.at(1), adapter, p);
      check_tree_properties(tree);
      CHECK(tree.depth() <= depth);
      CHECK(tree.keyframe_positions.size() <= (std::size_t{1} << depth) + 1);
      if (depth > 0) CHECK(tree.keyframe_positions.size() >= 3);
      const auto frags = emit_fragments(tree, adapter, 16);
      CHECK(frags.size() == tree.keyframe_positions.size() - 1);
      std::set<const Frame*> distinct;
      for (std::size_t i = 0; i < frags.size(); ++i) {
        CHECK(frags[i].frames.size() == 16);
        CHECK(frags[i].global_start() == static_cast<int>(i) * 15);
        if (i + 1 < frags.size()) CHECK(frags[i].frames.back() == frags[i + 1].frames.front());
        for (const auto& f : frags[i].frames) distinct.insert(f.get());
      }
      CHECK(distinct.size() == frags.size() * 15 + 1);
    }
  }

  TEST_CASE("fragments at a different f are re-interpolated with shared boundaries") {
    const ScriptAdapter adapter([](double t) { return 12.0 * t; });
    const FragmentTree tree = build_hierarchy(adapter.at(0), adapter.at(1), adapter, params(0.95, 2));
    const auto frags = emit_fragments(tree, adapter, 5);
    REQUIRE(frags.size() >= 2);
    for (std::size_t i = 0; i + 1 < frags.size(); ++i) CHECK(frags[i].frames.back() == frags[i + 1].frames.front());
  }

  TEST_CASE("hierarchy is deterministic and serializes") {
    const ScriptAdapter adapter([](double t) { return 12.0 * t; });
    const FragmentTree a = build_hierarchy(adapter.at(0), adapter.at(1), adapter, params(0.95, 2));
    const FragmentTree b = build_hierarchy(adapter.at(0), adapter.at(1), adapter, params(0.95, 2));
    CHECK(a.keyframe_positions == b.keyframe_positions);
    CHECK(tree_to_json(a) == tree_to_json(b));
    CHECK(tree_to_json(a).find("keyframe_positions") != std::string::npos);
  }

  TEST_CASE("parameter validation") {
    for (const HierarchyParams& p : {params(0.85, 2, 2), params(0.85, -1), params(1.5, 2), params(0.85, 40)})
      CHECK(test::error_of([&] { p.validate(); }) == ErrorCode::kInvalidParams);
  }
}
