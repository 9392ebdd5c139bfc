#include <fstream>
#include <thread>

#include "frag4d/io.hpp"
#include "frag4d/pipeline.hpp"
#include "helpers.hpp"

using namespace frag4d;
namespace fs = std::filesystem;

namespace {

void write(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

// A hinge dataset small enough for a full pipeline run in a few seconds.
fs::path tiny_setup(const std::string& name, const std::string& extra = "") {
  const fs::path dir = test::scratch(name);
  write(dir / "spec.json", R"({"scenario": "hinge-bend", "points": 300, "amplitude_deg": 90, "frames": 9,
    "views": 3, "width": 32, "height": 32, "tracks": 64, "seed": 3})");
  write(dir / "config.json", R"({
    "workdir": "work", "seed": 5,
    "inputs": {"synth_spec": "spec.json"},
    "hierarchy": {"frames": 5, "max_depth": 1, "threshold": 0.95},
    "static_fit": {"iterations": 40, "initial_points": 200, "max_points": 400, "densify_every": 20},
    "motion_fit": {"iterations": 20},
    "field": {"grid": 6, "time_grid": 4, "features": 4, "hidden": 8},
    "merge": {"iterations": 10},
    "rig": {"views": 2, "width": 32, "height": 32})" + extra + "}");
  return dir;
}

PipelineConfig parse(const std::string& body, const fs::path& base) {
  return parse_config("{\"workdir\": \"w\", \"inputs\": {\"synth_spec\": \"spec.json\"}" + body + "}", base);
}

}  // namespace

TEST_SUITE("pipeline") {
  TEST_CASE("sha256 known vectors") {
    CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    const fs::path dir = test::scratch("sha");
    write(dir / "f", "abc");
    CHECK(sha256_file(dir / "f") == sha256_hex("abc"));
  }

  TEST_CASE("config validation") {
    const fs::path dir = tiny_setup("config");
    const PipelineConfig c = load_config(dir / "config.json");
    CHECK(c.workdir == dir / "work");
    CHECK(c.synth_spec == dir / "spec.json");
    CHECK(c.hierarchy.frames == 5);
    CHECK(c.merge.lambda == 0.5);
    CHECK(c.merge_mode == BoundaryMode::kShared);

    auto code = [&](const std::string& body) { return test::error_of([&] { parse(body, dir); }); };
    CHECK(code(", \"bogus\": 1") == ErrorCode::kConfigError);
    CHECK(code(", \"hierarchy\": {\"frame\": 16}") == ErrorCode::kConfigError);
    CHECK(code(", \"hierarchy\": {\"frames\": 2}") == ErrorCode::kConfigError);
    CHECK(code(", \"hierarchy\": {\"frames\": \"sixteen\"}") == ErrorCode::kConfigError);
    CHECK(code(", \"weights\": {\"ref\": 0, \"mask\": 0, \"rigid\": 0}") == ErrorCode::kConfigError);
    CHECK(code(", \"merge\": {\"mode\": \"sideways\"}") == ErrorCode::kConfigError);
    CHECK(code(", \"adapter\": {\"mode\": \"external\"}") == ErrorCode::kConfigError);
    CHECK(test::error_of([&] { parse_config("{\"workdir\": \"w\"}", dir); }) == ErrorCode::kConfigError);
    CHECK(test::error_of([&] { parse_config("{not json", dir); }) == ErrorCode::kConfigError);
    CHECK(test::error_of([&] { load_config(dir / "absent.json"); }) == ErrorCode::kConfigError);
    CHECK(test::error_of([&] {
            parse_config(R"({"workdir": "w", "inputs": {"synth_spec": "missing.json"}})", dir);
          }) == ErrorCode::kConfigError);
  }

  TEST_CASE("external mode needs an existing adapter directory") {
    const fs::path dir = test::scratch("external_cfg");
    write(dir / "a.png", "");
    write(dir / "cam.json", "{}");
    write(dir / "fa.tnsr", "");
    const std::string inputs =
        R"("inputs": {"start": "a.png", "end": "a.png", "camera": "cam.json", "start_features": "fa.tnsr", "end_features": "fa.tnsr"})";
    CHECK(test::error_of([&] {
            parse_config(R"({"workdir": "w", "adapter": {"mode": "external", "dir": "nowhere"}, )" + inputs + "}", dir);
          }) == ErrorCode::kConfigError);
    fs::create_directories(dir / "frames");
    const PipelineConfig c =
        parse_config(R"({"workdir": "w", "adapter": {"mode": "external", "dir": "frames"}, )" + inputs + "}", dir);
    CHECK(c.adapter == AdapterMode::kExternal);
  }

  TEST_CASE("stage keys ignore paths") {
    const fs::path a = tiny_setup("keys_a"), b = tiny_setup("keys_b");
    CHECK(load_config(a / "config.json").to_json() == load_config(b / "config.json").to_json());
    const fs::path c = tiny_setup("keys_c", ", \"smoothing\": {\"window\": 4}");
    CHECK(load_config(c / "config.json").to_json() != load_config(a / "config.json").to_json());
  }

  TEST_CASE("stages need their upstream artifacts") {
    const PipelineConfig c = load_config(tiny_setup("missing") / "config.json");
    CHECK(test::error_of([&] { cmd_fit(c); }) == ErrorCode::kMissingArtifact);
    CHECK(test::error_of([&] { cmd_render(c); }) == ErrorCode::kMissingArtifact);
    CHECK(test::error_of([&] { load_timeline(c.workdir); }) == ErrorCode::kMissingArtifact);
  }

  TEST_CASE("full run, resume and recompute") {
    const fs::path dir = tiny_setup("run");
    const PipelineConfig c = load_config(dir / "config.json");
    cmd_pipeline(c);
    const fs::path manifest = c.workdir / "manifest.json";
    REQUIRE(fs::exists(manifest));
    const Timeline tl = load_timeline(c.workdir);
    CHECK(tl.frames_per_fragment == 5);
    CHECK(tl.frame_count() == tl.fragment_count() * 4 + 1);
    CHECK(fs::exists(c.workdir / "fit" / "canonical" / "canonical.ply"));
    CHECK(fs::exists(c.workdir / "merge" / "report.json"));
    CHECK(fs::exists(c.workdir / "smooth" / "frame_000.ply"));
    CHECK(fs::exists(c.workdir / "render" / "view_1" / "frame_000.png"));
    RunOptions bad_fragment;
    bad_fragment.fragment = 99;
    CHECK(test::error_of([&] { cmd_fit(c, bad_fragment); }) == ErrorCode::kConfigError);

    const fs::path canonical = c.workdir / "fit" / "canonical" / "canonical.ply";
    const auto stamp = fs::last_write_time(canonical);
    const std::string before = read_text(manifest);
    std::this_thread::sleep_for(std::chrono::milliseconds(20));

    RunOptions resume;
    resume.resume = true;
    cmd_pipeline(c, resume);
    CHECK(fs::last_write_time(canonical) == stamp);
    CHECK(read_text(manifest) == before);

    // A damaged output makes its stage stale again.
    const fs::path image = c.workdir / "render" / "view_0" / "frame_001.png";
    const std::string good = read_text(image);
    write(image, "damaged");
    cmd_render(c, resume);
    CHECK(read_text(image) == good);
    CHECK(fs::last_write_time(canonical) == stamp);

    // Without --resume the stage recomputes to identical bytes.
    cmd_fit(c);
    CHECK(fs::last_write_time(canonical) != stamp);
    CHECK(read_text(manifest) == before);
  }

  TEST_CASE("render at explicit times") {
    const fs::path dir = tiny_setup("times");
    const PipelineConfig c = load_config(dir / "config.json");
    cmd_segment(c);
    cmd_fit(c);
    cmd_merge(c);
    cmd_smooth(c);
    RunOptions o;
    o.view = 1;
    o.times = {0.0, 0.5};
    cmd_render(c, o);
    CHECK(fs::exists(c.workdir / "render" / "view_1" / "tau_0.500000.png"));
    CHECK_FALSE(fs::exists(c.workdir / "render" / "view_0"));
    const Image img = read_png(c.workdir / "render" / "view_1" / "tau_0.000000.png");
    CHECK(img.width == 32);
  }

  TEST_CASE("synth command writes a dataset") {
    const fs::path dir = tiny_setup("synth_cmd");
    cmd_synth(dir / "spec.json", dir / "data");
    CHECK(fs::exists(dir / "data" / "features.tnsr"));
    CHECK(test::error_of([&] { cmd_synth(dir / "nope.json", dir / "x"); }) == ErrorCode::kConfigError);
  }
}
