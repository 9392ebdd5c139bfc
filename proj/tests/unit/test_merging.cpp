#include <cmath>

#include "frag4d/merging.hpp"
#include "helpers.hpp"

using namespace frag4d;

namespace {

FieldShape tiny_shape() {
  FieldShape s;
  s.grid = 4;
  s.time_grid = 3;
  s.features = 2;
  s.hidden = 8;
  return s;
}

// Identity field whose dp output is a constant offset.
HexPlaneField offset_field(const AxisBox& box, const Vec3& offset, std::uint64_t seed) {
  HexPlaneField f = init_identity(tiny_shape(), box, seed);
  for (int k = 0; k < 3; ++k) f.mutable_params()[f.b3_offset() + static_cast<std::size_t>(k)] = offset[k];
  return f;
}

struct Fixture {
  GaussianCloud cloud;
  Camera cam;
  AxisBox box;
};

Fixture fixture() {
  Rng rng(1);
  Fixture fx;
  fx.cloud = test::random_cloud(rng, 80, 0.3);
  for (auto& g : fx.cloud.gaussians) g.scale = Vec3::Constant(0.05);
  fx.cam = Camera::orbit(32, 32, 49.1, 1.5, 0, 0);
  fx.box = padded_bounds(fx.cloud);
  return fx;
}

OverlapSupervision overlap_of(const GaussianCloud& truth, const Camera& cam) {
  const RenderOutput r = render(truth, cam);
  Image m = r.alpha;
  for (auto& a : m.data) a = a > 0.5 ? 1.0 : 0.0;
  return {{{cam, r.image, m}}};
}

}  // namespace

TEST_SUITE("merging") {
  TEST_CASE("blend examples") {
    FieldOutput a, b;
    a.dp = Vec3(1, 0, 0);
    b.dp = Vec3(0, 1, 0);
    a.ds = Vec3(0.2, 0, 0);
    a.dr = Quat::from_axis_angle(Vec3::UnitZ(), 0.4);
    b.dr = Quat::from_axis_angle(Vec3::UnitX(), 0.3);
    const FieldOutput one = blend_outputs(a, b, 1.0);
    CHECK(one.dp == a.dp);
    CHECK(one.dr.w == a.dr.w);
    const FieldOutput zero = blend_outputs(a, b, 0.0);
    CHECK(zero.dp == b.dp);
    CHECK(zero.dr.x == b.dr.x);
    const FieldOutput half = blend_outputs(a, b, 0.5);
    CHECK(half.dp.isApprox(Vec3(0.5, 0.5, 0)));
    CHECK(half.ds.x() == doctest::Approx(0.1));
    CHECK(half.dr.norm() == doctest::Approx(1.0));
    // A sign-flipped copy is the same rotation and blends to it.
    const FieldOutput same = blend_outputs(a, FieldOutput{a.dp, -a.dr, a.ds}, 0.3);
    CHECK(quat_angle(same.dr, a.dr) < 1e-9);
  }

  TEST_CASE("blend_eval of identical fields is that field") {
    Rng rng(2);
    const Fixture fx = fixture();
    HexPlaneField f(tiny_shape(), fx.box);
    for (auto& v : f.mutable_params()) v = rng.uniform(-0.3, 0.3);
    for (double lambda : {0.0, 0.25, 0.5, 1.0}) {
      const Vec3 p(0.1, 0.05, -0.1);
      const FieldOutput o = blend_eval(f, f, lambda, p, 0.4, 0.4);
      const FieldOutput ref = field_eval(f, p, 0.4);
      CHECK((o.dp - ref.dp).norm() < 1e-15);
      CHECK(quat_angle(o.dr, ref.dr) < 1e-7);
    }
    CHECK(test::error_of([&] { blend_eval(f, f, 1.5, Vec3::Zero(), 0, 0); }) == ErrorCode::kInvalidParams);
  }

  TEST_CASE("global time mapping") {
    const Fixture fx = fixture();
    std::vector<HexPlaneField> fields(4, init_identity(tiny_shape(), fx.box, 0));
    const GlobalDeformation g(fields, BoundaryMode::kShared);
    CHECK(g.blends().size() == 3);
    TimeSlot s = g.locate(0.3);
    CHECK_FALSE(s.boundary);
    CHECK(s.index == 1);
    CHECK(s.local == doctest::Approx(0.2));
    s = g.locate(0.25);
    CHECK(s.boundary);
    CHECK(s.index == 0);
    s = g.locate(0.0);
    CHECK(s.index == 0);
    CHECK(s.local == 0.0);
    s = g.locate(1.0);
    CHECK(s.index == 3);
    CHECK(s.local == 1.0);
    // f = 5: frames 0..16, boundaries at 4, 8, 12.
    CHECK(g.frame_slot(4, 5).boundary);
    CHECK(g.frame_slot(8, 5).index == 1);
    CHECK(g.frame_slot(6, 5).local == doctest::Approx(0.5));
    CHECK(g.frame_slot(16, 5).index == 3);
    CHECK(g.frame_slot(16, 5).local == 1.0);
  }

  TEST_CASE("merge_pair freezes originals and needs an overlap frame") {
    const Fixture fx = fixture();
    const HexPlaneField left = offset_field(fx.box, Vec3::Zero(), 1);
    const HexPlaneField right = offset_field(fx.box, Vec3(0.1, 0, 0), 2);
    const GlobalDeformation g({left, right}, BoundaryMode::kShared);
    MergeParams p;
    p.iterations = 50;
    CHECK(test::error_of([&] { merge_pair(g, 0, fx.cloud, {}, p); }) == ErrorCode::kMissingOverlapSupervision);
    CHECK(test::error_of([&] { merge_pair(g, 1, fx.cloud, overlap_of(fx.cloud, fx.cam), p); }) ==
          ErrorCode::kInvalidParams);
    const GlobalDeformation m = merge_pair(g, 0, fx.cloud, overlap_of(fx.cloud, fx.cam), p);
    CHECK(m.fields()[0].params() == left.params());
    CHECK(m.fields()[1].params() == right.params());
    CHECK(m.blends()[0].merged);
    CHECK(m.blends()[0].lambda == 0.5);
    CHECK(m.blends()[0].star.params() != right.params());
  }

  TEST_CASE("agreeing fields are a stationary point") {
    const Fixture fx = fixture();
    const HexPlaneField f = offset_field(fx.box, Vec3::Zero(), 3);
    const GlobalDeformation g({f, f}, BoundaryMode::kShared);
    const OverlapSupervision sup = overlap_of(fx.cloud, fx.cam);
    MergeParams p;
    p.iterations = 200;
    p.weights = {1, 0, 0};
    const OverlapErrors before = overlap_errors(g, 0, fx.cloud, sup);
    const OverlapErrors after = overlap_errors(merge_pair(g, 0, fx.cloud, sup, p), 0, fx.cloud, sup);
    CHECK(before.blended == 0.0);
    CHECK(std::abs(after.blended - before.blended) <= 1e-6);
  }

  TEST_CASE("an offset right field is pulled toward the overlap frame") {
    const Fixture fx = fixture();
    const HexPlaneField left = offset_field(fx.box, Vec3::Zero(), 4);
    const HexPlaneField right = offset_field(fx.box, Vec3(0.1, 0, 0), 5);
    const GlobalDeformation g({left, right}, BoundaryMode::kShared);
    const OverlapSupervision sup = overlap_of(fx.cloud, fx.cam);
    const OverlapErrors before = overlap_errors(g, 0, fx.cloud, sup);
    CHECK(before.left == 0.0);
    CHECK(before.right > before.blended);
    const GlobalDeformation m = merge_pair(g, 0, fx.cloud, sup, MergeParams{});
    const OverlapErrors after = overlap_errors(m, 0, fx.cloud, sup);
    CHECK(after.blended < before.blended);
    CHECK(after.left == before.left);
    CHECK(after.right == before.right);
  }

  TEST_CASE("merge_all structure") {
    const Fixture fx = fixture();
    const HexPlaneField f = offset_field(fx.box, Vec3(0.02, 0, 0), 6);
    MergeParams p;
    p.iterations = 5;
    std::vector<std::size_t> calls;
    const GlobalDeformation single = merge_all({f}, BoundaryMode::kShared, fx.cloud, {}, p,
                                               [&](std::size_t b) { calls.push_back(b); });
    CHECK(calls.empty());
    const Vec3 q(0.1, 0.1, 0.1);
    CHECK(single.query(q, 0.7).dp == field_eval(f, q, 0.7).dp);

    const auto sup = overlap_of(fx.cloud, fx.cam);
    const GlobalDeformation four = merge_all({f, f, f, f}, BoundaryMode::kShared, fx.cloud, {sup, sup, sup}, p,
                                             [&](std::size_t b) { calls.push_back(b); });
    CHECK(calls == std::vector<std::size_t>{0, 1, 2});
    for (const auto& b : four.blends()) CHECK(b.merged);
    CHECK(test::error_of([&] { merge_all({f, f, f}, BoundaryMode::kShared, fx.cloud, {sup}, p); }) ==
          ErrorCode::kMissingOverlapSupervision);
  }

  TEST_CASE("boundary queries route through the blend after merging") {
    const Fixture fx = fixture();
    const HexPlaneField left = offset_field(fx.box, Vec3::Zero(), 7);
    const HexPlaneField right = offset_field(fx.box, Vec3(0.1, 0, 0), 8);
    GlobalDeformation g({left, right}, BoundaryMode::kShared);
    const Vec3 p(0.05, 0.0, 0.1);
    CHECK(g.query(p, 0.5).dp == field_eval(left, p, 1.0).dp);
    MergeParams mp;
    mp.iterations = 20;
    g = merge_pair(g, 0, fx.cloud, overlap_of(fx.cloud, fx.cam), mp);
    const FieldOutput through = blend_eval(left, g.blends()[0].star, 0.5, p, 1.0, 0.0);
    CHECK((g.query(p, 0.5).dp - through.dp).norm() < 1e-15);
    CHECK(g.query(p, 0.25).dp == field_eval(left, p, 0.5).dp);
    CHECK(g.query(p, 0.75).dp == field_eval(right, p, 0.5).dp);
  }

  TEST_CASE("chained mode composes carried state") {
    const Fixture fx = fixture();
    const HexPlaneField a = offset_field(fx.box, Vec3(0.05, 0, 0), 9);
    const HexPlaneField b = offset_field(fx.box, Vec3(0, 0.03, 0), 10);
    const GlobalDeformation g({a, b}, BoundaryMode::kChained);
    const std::vector<Vec3> pts{Vec3(0.1, 0.0, 0.0)};
    const Deformation carried = g.carried_state(pts, 1);
    CHECK(carried.dp[0].isApprox(Vec3(0.05, 0, 0)));
    const Deformation end = g.evaluate(pts, TimeSlot{false, 1, 1.0});
    CHECK(end.dp[0].isApprox(Vec3(0.05, 0.03, 0)));
  }

  TEST_CASE("save and load the global deformation") {
    const Fixture fx = fixture();
    const auto dir = test::scratch("global");
    const HexPlaneField a = offset_field(fx.box, Vec3::Zero(), 11);
    const HexPlaneField b = offset_field(fx.box, Vec3(0.1, 0, 0), 12);
    save_field(a, dir / "fa");
    save_field(b, dir / "fb");
    MergeParams p;
    p.iterations = 10;
    const GlobalDeformation g = merge_all({load_field(dir / "fa"), load_field(dir / "fb")}, BoundaryMode::kChained,
                                          fx.cloud, {overlap_of(fx.cloud, fx.cam)}, p);
    save_global(g, dir / "global", {"fa", "fb"});
    const GlobalDeformation back = load_global(dir / "global", dir);
    CHECK(back.mode() == BoundaryMode::kChained);
    CHECK(back.fields()[1].params() == g.fields()[1].params());
    CHECK(back.blends()[0].merged);
    const Vec3 q(0.0, 0.1, 0.0);
    CHECK((back.query(q, 0.5).dp - g.query(q, 0.5).dp).norm() < 1e-6);
    CHECK(test::error_of([&] { load_global(dir / "nowhere", dir); }) == ErrorCode::kMissingArtifact);
  }
}
