#include <cmath>

#include "field_fd.hpp"
#include "frag4d/deformation.hpp"
#include "helpers.hpp"

using namespace frag4d;

namespace {

const AxisBox kUnitBox{Vec3::Constant(-1.0), Vec3::Constant(1.0)};

FieldShape small_shape(Fusion fusion = Fusion::kConcat) {
  FieldShape s;
  s.grid = 4;
  s.time_grid = 3;
  s.features = 2;
  s.hidden = 8;
  s.fusion = fusion;
  return s;
}

std::vector<Vec3> random_points(Rng& rng, std::size_t n) {
  std::vector<Vec3> pts;
  for (std::size_t i = 0; i < n; ++i) pts.emplace_back(rng.uniform(-0.9, 0.9), rng.uniform(-0.9, 0.9), rng.uniform(-0.9, 0.9));
  return pts;
}

}  // namespace

TEST_SUITE("deformation") {
  TEST_CASE("shape validation") {
    FieldShape s = small_shape();
    s.grid = 1;
    CHECK(test::error_of([&] { init_identity(s, kUnitBox, 0); }) == ErrorCode::kBadShape);
    s = small_shape();
    s.hidden = 0;
    CHECK(test::error_of([&] { init_identity(s, kUnitBox, 0); }) == ErrorCode::kBadShape);
  }

  TEST_CASE("identity initialization for any seed and fusion") {
    for (Fusion fusion : {Fusion::kConcat, Fusion::kProduct})
      for (std::uint64_t seed : {0u, 7u, 123u}) {
        const HexPlaneField f = init_identity(small_shape(fusion), kUnitBox, seed);
        Rng rng(seed);
        for (int i = 0; i < 50; ++i) {
          const FieldOutput o = field_eval(f, {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)}, rng.uniform());
          CHECK(o.dp.norm() == 0.0);
          CHECK(o.ds.norm() == 0.0);
          CHECK(o.dr.w == 1.0);
          CHECK(o.dr.x == 0.0);
        }
      }
  }

  TEST_CASE("seeded plane features") {
    const HexPlaneField a = init_identity(small_shape(), kUnitBox, 5);
    const HexPlaneField b = init_identity(small_shape(), kUnitBox, 5);
    const HexPlaneField c = init_identity(small_shape(), kUnitBox, 6);
    CHECK(a.params() == b.params());
    CHECK(a.params() != c.params());
    for (std::size_t k = 0; k < a.plane_param_count(); ++k) CHECK(std::abs(a.params()[k]) <= 1e-2);
  }

  TEST_CASE("corner lookup reads that corner's features exactly") {
    HexPlaneField f = init_identity(small_shape(), kUnitBox, 0);
    const int F = f.shape().features;
    auto& p = f.mutable_params();
    for (int k = 0; k < kPlaneCount; ++k)
      for (int i = 0; i < F; ++i) p[f.plane_offset(k) + static_cast<std::size_t>(i)] = 0.25 * (k + 1) + i;
    FieldTape tape;
    field_eval_batch(f, std::vector<Vec3>{kUnitBox.lo}, 0.0, &tape);
    for (int k = 0; k < kPlaneCount; ++k)
      for (int i = 0; i < F; ++i)
        CHECK(tape.activations[0][static_cast<std::size_t>(k * F + i)] == 0.25 * (k + 1) + i);
    CHECK(grid_coordinate(f, 0, kUnitBox.hi, 1.0) == doctest::Approx(3.0));
    CHECK(grid_coordinate(f, 3, kUnitBox.hi, 1.0) == doctest::Approx(2.0));
  }

  TEST_CASE("out-of-bounds points are clamped") {
    Rng rng(1);
    const HexPlaneField f = test::random_field(small_shape(), rng);
    const FieldOutput in = field_eval(f, kUnitBox.hi, 0.5);
    const FieldOutput out = field_eval(f, Vec3::Constant(5.0), 0.5);
    CHECK(in.dp == out.dp);
    CHECK(in.ds == out.ds);
  }

  TEST_CASE("batch equals the elementwise loop bit for bit") {
    Rng rng(2);
    FieldShape s;
    s.grid = 8;
    s.time_grid = 4;
    s.features = 4;
    s.hidden = 16;
    const HexPlaneField f = test::random_field(s, rng);
    const auto pts = random_points(rng, 1000);
    const Deformation d = field_eval_batch(f, pts, 0.3);
    REQUIRE(d.size() == pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const FieldOutput o = field_eval(f, pts[i], 0.3);
      CHECK(o.dp == d.dp[i]);
      CHECK(o.ds == d.ds[i]);
      CHECK(o.dr.w == d.dr[i].w);
      CHECK(o.dr.z == d.dr[i].z);
    }
  }

  TEST_CASE("evaluation is pure and continuous in time") {
    Rng rng(3);
    const HexPlaneField f = test::random_field(small_shape(), rng);
    const Vec3 p(0.1, -0.2, 0.3);
    CHECK(field_eval(f, p, 0.4).dp == field_eval(f, p, 0.4).dp);
    double prev = (field_eval(f, p, 0.4 + 1e-2).dp - field_eval(f, p, 0.4).dp).norm();
    for (double eps : {1e-3, 1e-4, 1e-5}) {
      const double d = (field_eval(f, p, 0.4 + eps).dp - field_eval(f, p, 0.4).dp).norm();
      CHECK(d <= prev);
      prev = d;
    }
    CHECK(prev < 1e-3);
  }

  TEST_CASE("backward: zero upstream, sparsity, stale tape") {
    Rng rng(4);
    const HexPlaneField f = test::random_field(small_shape(), rng);
    // One point in the lowest cell: only the 4 lowest corners of each plane are touched.
    const std::vector<Vec3> pts{Vec3::Constant(-0.9)};
    FieldTape tape;
    field_eval_batch(f, pts, 0.1, &tape);
    const auto zero = field_backward(f, tape, DeformationGrad::zeros(1));
    CHECK(std::all_of(zero.values.begin(), zero.values.end(), [](double v) { return v == 0.0; }));
    auto up = DeformationGrad::zeros(1);
    up.dp[0] = Vec3(1, 1, 1);
    const auto g = field_backward(f, tape, up);
    const int F = f.shape().features;
    for (int k = 0; k < kPlaneCount; ++k) {
      const auto dims = f.plane_dims(k);
      for (int i = 0; i < dims[0]; ++i)
        for (int j = 0; j < dims[1]; ++j) {
          if (i <= 1 && j <= 1) continue;
          for (int c = 0; c < F; ++c)
            CHECK(g.values[f.plane_offset(k) + (static_cast<std::size_t>(i) * dims[1] + j) * F + c] == 0.0);
        }
    }
    HexPlaneField changed = f;
    changed.mutable_params()[0] += 1.0;
    CHECK(test::error_of([&] { field_backward(changed, tape, up); }) == ErrorCode::kStaleForwardState);
  }

  TEST_CASE("backward matches central differences on every parameter") {
    for (Fusion fusion : {Fusion::kConcat, Fusion::kProduct})
      for (std::uint64_t seed = 0; seed < 3; ++seed) {
        Rng rng(100 + seed);
        const HexPlaneField f = test::random_field(small_shape(fusion), rng);
        const auto pts = random_points(rng, 5);
        const auto rep = test::field_fd(f, pts, rng.uniform(), rng, 1e-4, 1e-3, 1e-5);
        INFO(rep.first_failure << " fusion " << static_cast<int>(fusion) << " seed " << seed);
        CHECK(rep.checked + rep.skipped == f.params().size());
        CHECK(rep.skipped * 10 < f.params().size());
        CHECK(rep.failed == 0);
      }
  }

  TEST_CASE("save and load round trip") {
    Rng rng(5);
    const HexPlaneField f = test::random_field(small_shape(Fusion::kProduct), rng);
    const auto dir = test::scratch("field");
    save_field(f, dir / "f");
    const HexPlaneField g = load_field(dir / "f");
    CHECK(g.shape() == f.shape());
    // Tensors are stored as float32.
    REQUIRE(g.params().size() == f.params().size());
    for (std::size_t k = 0; k < f.params().size(); ++k)
      CHECK(g.params()[k] == static_cast<double>(static_cast<float>(f.params()[k])));
    CHECK(g.bounds().hi == f.bounds().hi);
    CHECK(test::error_of([&] { load_field(dir / "missing"); }) != ErrorCode::kBadShape);
  }

  TEST_CASE("padded bounds") {
    Rng rng(6);
    const GaussianCloud c = test::random_cloud(rng, 20);
    const AxisBox tight = bounding_box(c), b = padded_bounds(c, 0.25);
    const double ext = (tight.hi - tight.lo).maxCoeff();
    CHECK((tight.lo - b.lo).minCoeff() == doctest::Approx(0.25 * ext));
  }
}
