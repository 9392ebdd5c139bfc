#include <cmath>
#include <numbers>

#include "frag4d/smoothing.hpp"
#include "helpers.hpp"

using namespace frag4d;

namespace {

// One Gaussian per entry of `rotations`, held at a fixed center.
std::vector<GaussianCloud> spinning(const std::vector<Quat>& rotations, const Vec3& center) {
  std::vector<GaussianCloud> seq;
  for (const Quat& q : rotations) {
    Gaussian g;
    g.center = center;
    g.rotation = q;
    g.scale = Vec3::Constant(0.05);
    g.color = Vec3(0.3, 0.6, 0.9);
    g.opacity = 0.7;
    GaussianCloud c;
    c.gaussians.push_back(g);
    seq.push_back(c);
  }
  return seq;
}

// One lifted track sitting on `center`, visible where `visible` is true.
Trajectories track_at(const Vec3& center, const std::vector<bool>& visible) {
  Trajectories t;
  t.points = 1;
  t.frames = visible.size();
  t.samples.resize(visible.size());
  for (std::size_t k = 0; k < visible.size(); ++k)
    if (visible[k]) t.samples[k] = center;
  return t;
}

std::vector<Quat> noisy_rotations(Rng& rng, std::size_t n, double noise_deg) {
  std::vector<Quat> q;
  for (std::size_t t = 0; t < n; ++t) {
    const Vec3 axis = Vec3(rng.normal(), rng.normal(), rng.normal()).normalized();
    const Quat noise = Quat::from_axis_angle(axis, rng.normal(0.0, noise_deg * std::numbers::pi / 180.0));
    q.push_back(quat_compose(noise, Quat::from_axis_angle(Vec3::UnitZ(), 0.05 * static_cast<double>(t))));
  }
  return q;
}

}  // namespace

TEST_SUITE("smoothing") {
  TEST_CASE("lifting examples") {
    Camera cam;
    cam.width = 64;
    cam.height = 48;
    cam.focal = 50.0;
    TrackSet tracks(2, 1);
    tracks.at(0, 0, 0) = 32.0;
    tracks.at(0, 0, 1) = 24.0;
    tracks.at(0, 0, 2) = 3.0;
    tracks.at(0, 0, 3) = 1.0;
    tracks.at(1, 0, 0) = 40.0;
    tracks.at(1, 0, 1) = 10.0;
    tracks.at(1, 0, 2) = 2.0;
    tracks.at(1, 0, 3) = 1.0;
    const Trajectories a = lift_tracks(tracks, cam);
    CHECK(a.at(0, 0)->isApprox(Vec3(0, 0, 3)));
    tracks.at(1, 0, 2) = 4.0;
    const Trajectories b = lift_tracks(tracks, cam);
    CHECK(b.at(1, 0)->isApprox(2.0 * *a.at(1, 0)));

    tracks.at(0, 0, 3) = 0.0;
    tracks.at(0, 0, 2) = -1.0;
    CHECK_FALSE(lift_tracks(tracks, cam).at(0, 0).has_value());
    tracks.at(0, 0, 3) = 1.0;
    CHECK(test::error_of([&] { lift_tracks(tracks, cam); }) == ErrorCode::kInvalidDepth);
  }

  TEST_CASE("project then lift is the identity") {
    Rng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
      const Camera cam = Camera::orbit(64, 64, rng.uniform(30, 70), 1.5, rng.uniform(0, 360), rng.uniform(-30, 30));
      GaussianCloud c = test::random_cloud(rng, 10);
      const auto proj = project(c, cam);
      TrackSet tracks(c.size(), 1);
      for (std::size_t i = 0; i < c.size(); ++i) {
        tracks.at(i, 0, 0) = proj[i].u;
        tracks.at(i, 0, 1) = proj[i].v;
        tracks.at(i, 0, 2) = proj[i].depth;
        tracks.at(i, 0, 3) = 1.0;
      }
      const Trajectories lifted = lift_tracks(tracks, cam);
      for (std::size_t i = 0; i < c.size(); ++i) CHECK((*lifted.at(i, 0) - c[i].center).norm() < 1e-5);
    }
  }

  TEST_CASE("slerp-EMA examples") {
    Rng rng(2);
    const Quat a = test::random_unit_quat(rng), b = test::random_unit_quat(rng);
    const Quat one = slerp_ema_step(a, b, 1.0);
    CHECK(quat_angle(one, b) < 1e-7);
    const Quat zero = slerp_ema_step(a, b, 0.0);
    CHECK(quat_angle(zero, a) < 1e-7);
    const Quat half = slerp_ema_step(Quat::identity(), Quat::from_axis_angle(Vec3::UnitZ(), std::numbers::pi / 2), 0.5);
    const Quat expect = Quat::from_axis_angle(Vec3::UnitZ(), std::numbers::pi / 4);
    CHECK(std::abs(half.w - expect.w) < 1e-6);
    CHECK(std::abs(half.z - expect.z) < 1e-6);
    // Tiny angles take the linear fallback and stay unit.
    const Quat near = quat_compose(Quat::from_axis_angle(Vec3::UnitX(), 1e-7), a);
    CHECK(std::abs(slerp_ema_step(a, near, 0.5).norm() - 1.0) < 1e-7);
    CHECK(test::error_of([&] { slerp_ema_step(Quat{0, 0, 0, 0}, a, 0.5); }) == ErrorCode::kDegenerateQuaternion);
  }

  TEST_CASE("slerp-EMA is unit and sign-invariant") {
    Rng rng(3);
    for (int i = 0; i < 500; ++i) {
      const Quat a = test::random_unit_quat(rng), b = test::random_unit_quat(rng);
      const double alpha = rng.uniform();
      const Quat s = slerp_ema_step(a, b, alpha);
      CHECK(std::abs(s.norm() - 1.0) <= 1e-7);
      const Quat f = slerp_ema_step(-a, -b, alpha);
      CHECK(quat_angle(s, f) < 1e-7);
    }
  }

  TEST_CASE("scale EMA examples") {
    CHECK(ema_scale_step(Vec3(1, 2, 3), Vec3(4, 5, 6), 1.0) == Vec3(4, 5, 6));
    CHECK(ema_scale_step(Vec3(1, 2, 3), Vec3(1, 2, 3), 0.3) == Vec3(1, 2, 3));
    CHECK(ema_scale_step(Vec3(1, 1, 1), Vec3(3, 3, 3), 0.5) == Vec3(2, 2, 2));
  }

  TEST_CASE("constant sequences are a fixed point") {
    const Quat q = Quat::from_axis_angle(Vec3(1, 2, 3).normalized(), 0.7);
    const auto seq = spinning(std::vector<Quat>(10, q), Vec3::Zero());
    const auto out = smooth_sequence(seq, track_at(Vec3::Zero(), std::vector<bool>(10, true)), SmoothingParams{});
    for (std::size_t t = 0; t < seq.size(); ++t) {
      CHECK(out[t][0].rotation.w == q.w);
      CHECK(out[t][0].rotation.x == q.x);
      CHECK(out[t][0].scale == seq[t][0].scale);
    }
  }

  TEST_CASE("visibility gating") {
    Rng rng(4);
    const auto seq = spinning(noisy_rotations(rng, 8, 10.0), Vec3::Zero());
    SmoothingParams p;
    p.passes = 1;
    // 6 of 8 frames visible is below 80%: bit-unchanged.
    const auto gated = smooth_sequence(seq, track_at(Vec3::Zero(), {1, 1, 0, 1, 1, 0, 1, 1}), p);
    for (std::size_t t = 0; t < seq.size(); ++t) {
      CHECK(gated[t][0].rotation.w == seq[t][0].rotation.w);
      CHECK(gated[t][0].rotation.y == seq[t][0].rotation.y);
    }
    // 7 of 8 passes the gate.
    SmoothingReport r;
    smooth_sequence(seq, track_at(Vec3::Zero(), {1, 1, 1, 1, 1, 0, 1, 1}), p, &r);
    CHECK(r.smoothed_updates == 1);
    CHECK(r.variation_after < r.variation_before);
    // A track beyond the association radius leaves the Gaussian alone.
    smooth_sequence(seq, track_at(Vec3(1, 0, 0), std::vector<bool>(8, true)), p, &r);
    CHECK(r.smoothed_updates == 0);
  }

  TEST_CASE("only rotation and scale change") {
    Rng rng(5);
    const auto seq = spinning(noisy_rotations(rng, 12, 10.0), Vec3(0.1, 0.2, 0.3));
    const auto out = smooth_sequence(seq, track_at(Vec3(0.1, 0.2, 0.3), std::vector<bool>(12, true)), SmoothingParams{});
    REQUIRE(out.size() == seq.size());
    for (std::size_t t = 0; t < seq.size(); ++t) {
      REQUIRE(out[t].size() == seq[t].size());
      CHECK(out[t][0].center == seq[t][0].center);
      CHECK(out[t][0].color == seq[t][0].color);
      CHECK(out[t][0].opacity == seq[t][0].opacity);
    }
  }

  TEST_CASE("noisy rotations lose at least half their variation in one pass") {
    Rng rng(6);
    const std::size_t frames = 16, count = 30;
    std::vector<GaussianCloud> seq(frames);
    Trajectories tracks;
    tracks.points = count;
    tracks.frames = frames;
    tracks.samples.resize(count * frames);
    for (std::size_t g = 0; g < count; ++g) {
      const Vec3 c(0.1 * static_cast<double>(g), 0, 0);
      const auto q = noisy_rotations(rng, frames, 10.0);
      for (std::size_t t = 0; t < frames; ++t) {
        Gaussian x;
        x.center = c;
        x.rotation = q[t];
        x.scale = Vec3::Constant(0.02);
        seq[t].gaussians.push_back(x);
        tracks.samples[g * frames + t] = c;
      }
    }
    SmoothingParams p;
    p.passes = 1;
    SmoothingReport r;
    smooth_sequence(seq, tracks, p, &r);
    CHECK(r.variation_after <= 0.5 * r.variation_before);
  }

  TEST_CASE("mismatched inputs and parameters") {
    const auto seq = spinning(std::vector<Quat>(4, Quat::identity()), Vec3::Zero());
    CHECK(test::error_of([&] { smooth_sequence(seq, track_at(Vec3::Zero(), std::vector<bool>(5, true)), {}); }) ==
          ErrorCode::kSequenceMismatch);
    auto uneven = seq;
    uneven[2].gaussians.push_back(uneven[2][0]);
    CHECK(test::error_of([&] { smooth_sequence(uneven, track_at(Vec3::Zero(), std::vector<bool>(4, true)), {}); }) ==
          ErrorCode::kSequenceMismatch);
    SmoothingParams p;
    p.window = 1;
    CHECK(test::error_of([&] { p.validate(); }) == ErrorCode::kInvalidParams);
    p = {};
    p.passes = 6;
    CHECK(test::error_of([&] { p.validate(); }) == ErrorCode::kInvalidParams);
    p = {};
    p.visibility_ratio = 0.0;
    CHECK(test::error_of([&] { p.validate(); }) == ErrorCode::kInvalidParams);
  }

  TEST_CASE("passes stop early once gains stall") {
    Rng rng(7);
    const auto seq = spinning(noisy_rotations(rng, 16, 10.0), Vec3::Zero());
    SmoothingParams p;
    p.passes = 5;
    p.min_improvement = 0.99;
    SmoothingReport r;
    smooth_sequence(seq, track_at(Vec3::Zero(), std::vector<bool>(16, true)), p, &r);
    CHECK(r.passes_run == 1);
  }
}
