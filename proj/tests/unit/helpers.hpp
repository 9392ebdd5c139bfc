#pragma once

#include <cmath>
#include <filesystem>
#include <string>

#include "doctest.h"
#include "frag4d/error.hpp"
#include "frag4d/random.hpp"
#include "frag4d/scene.hpp"

namespace test {

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("frag4d_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

template <class Fn>
frag4d::ErrorCode error_of(Fn&& fn) {
  try {
    fn();
  } catch (const frag4d::Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return frag4d::ErrorCode::kIoFailure;
}

inline frag4d::Quat random_unit_quat(frag4d::Rng& rng) {
  return frag4d::quat_normalize({rng.normal(), rng.normal(), rng.normal(), rng.normal()});
}

inline frag4d::GaussianCloud random_cloud(frag4d::Rng& rng, std::size_t n, double extent = 0.3) {
  frag4d::GaussianCloud c;
  for (std::size_t i = 0; i < n; ++i) {
    frag4d::Gaussian g;
    g.center = {rng.uniform(-extent, extent), rng.uniform(-extent, extent), rng.uniform(-extent, extent)};
    g.rotation = random_unit_quat(rng);
    g.scale = frag4d::Vec3::Constant(rng.uniform(0.02, 0.06));
    g.opacity = rng.uniform(0.3, 0.9);
    g.color = {rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)};
    c.gaussians.push_back(g);
  }
  return c;
}

// |a - b| <= rel * max(|a|, |b|) or |a - b| <= abs_floor.
inline bool close(double a, double b, double rel, double abs_floor) {
  const double d = std::abs(a - b);
  return d <= abs_floor || d <= rel * std::max(std::abs(a), std::abs(b));
}

}  // namespace test
