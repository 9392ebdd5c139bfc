#include "frag4d/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <memory>
#include <set>

#include <openssl/evp.h>
#include <spdlog/fmt/fmt.h>
#include <spdlog/spdlog.h>

#include "frag4d/error.hpp"
#include "frag4d/io.hpp"
#include "frag4d/parallel.hpp"
#include "frag4d/random.hpp"
#include "json.hpp"

namespace frag4d {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Config parsing

[[noreturn]] void config_error(const std::string& msg) { fail(ErrorCode::kConfigError, msg); }

// Reads the keys of one JSON object and rejects any key it was not asked for.
class Section {
 public:
  Section(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) config_error(where_ + " must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      config_error(where_ + "." + key + " has the wrong type");
    }
  }

  std::optional<Section> sub(const char* key) {
    seen_.insert(key);
    if (!j_.contains(key)) return std::nullopt;
    return Section(j_.at(key), where_ + "." + key);
  }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) config_error("unknown key " + where_ + "." + key);
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

fs::path resolve(const fs::path& base, const std::string& p) {
  if (p.empty()) return {};
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

std::string adapter_name(AdapterMode m) {
  switch (m) {
    case AdapterMode::kOracle: return "oracle";
    case AdapterMode::kLinear: return "linear";
    case AdapterMode::kExternal: return "external";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Manifest

struct Manifest {
  fs::path workdir;
  json doc = json::object();

  static Manifest load(const fs::path& workdir) {
    Manifest m;
    m.workdir = workdir;
    const fs::path path = workdir / "manifest.json";
    if (fs::exists(path)) {
      try {
        m.doc = json::parse(read_text(path));
      } catch (const json::exception& e) {
        fail(ErrorCode::kSchemaMismatch, "manifest.json: " + std::string(e.what()));
      }
    }
    if (!m.doc.contains("stages")) m.doc["stages"] = json::object();
    return m;
  }

  void save() const { write_text(workdir / "manifest.json", doc.dump(2) + "\n"); }

  bool has(const std::string& stage) const { return doc["stages"].contains(stage); }

  const json& entry(const std::string& stage) const {
    if (!has(stage)) fail(ErrorCode::kMissingArtifact, "stage '" + stage + "' has not been run");
    return doc["stages"][stage];
  }

  // Hash of a stage's recorded outputs, used to key downstream stages.
  std::string output_digest(const std::string& stage) const { return sha256_hex(entry(stage)["outputs"].dump()); }

  bool current(const std::string& stage, const std::string& key) const {
    if (!has(stage)) return false;
    const json& e = doc["stages"][stage];
    if (e.value("key", "") != key) return false;
    for (const auto& [rel, hash] : e["outputs"].items()) {
      const fs::path p = workdir / rel;
      if (!fs::exists(p) || sha256_file(p) != hash.get<std::string>()) return false;
    }
    return true;
  }

  void record(const std::string& stage, const std::string& key, const fs::path& dir, json summary) {
    json outputs = json::object();
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(workdir / dir))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) outputs[fs::relative(f, workdir).generic_string()] = sha256_file(f);
    doc["stages"][stage] = json{{"key", key}, {"outputs", outputs}, {"summary", std::move(summary)}};
    save();
  }
};

// Prefixes the stage name to any error while keeping its code.
template <class Fn>
void tagged(const std::string& stage, Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    std::string msg = e.what();
    const std::string prefix = std::string(to_string(e.code())) + ": ";
    if (msg.rfind(prefix, 0) == 0) msg.erase(0, prefix.size());
    throw Error(e.code(), "[" + stage + "] " + msg);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kSchemaMismatch, "[" + stage + "] " + e.what());
  }
}

void reset_dir(const fs::path& dir) {
  fs::remove_all(dir);
  fs::create_directories(dir);
}

std::string settings_key(const PipelineConfig& c, const std::string& stage, const std::vector<std::string>& parts) {
  std::string s = stage + "\n" + c.to_json();
  for (const auto& p : parts) s += "\n" + p;
  return sha256_hex(s);
}

std::string frame_name(std::size_t g, const char* ext) { return fmt::format("frame_{:03d}.{}", g, ext); }
std::string fragment_dir(std::size_t i) { return "fragment_" + std::to_string(i); }

// ---------------------------------------------------------------------------
// Inputs

Image rgb_of(const Image& rgba) {
  Image out(rgba.width, rgba.height, 3);
  for (int y = 0; y < rgba.height; ++y)
    for (int x = 0; x < rgba.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = rgba.at(x, y, std::min(c, rgba.channels - 1));
  return out;
}

// Foreground where any channel exceeds a small floor over the black background.
Image mask_from_image(const Image& rgb) {
  Image m(rgb.width, rgb.height, 1);
  for (int y = 0; y < rgb.height; ++y)
    for (int x = 0; x < rgb.width; ++x) {
      double peak = 0.0;
      for (int c = 0; c < rgb.channels; ++c) peak = std::max(peak, rgb.at(x, y, c));
      m.at(x, y) = peak > 0.02 ? 1.0 : 0.0;
    }
  return m;
}

FeatureMap single_feature_map(const fs::path& path) {
  const auto maps = tensor_to_features(read_tensor(path));
  if (maps.size() != 1) fail(ErrorCode::kBadShape, path.string() + " must hold exactly one feature map");
  return maps.front();
}

std::string hash_tree(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& f : files) all += fs::relative(f, dir).generic_string() + ":" + sha256_file(f) + "\n";
  return sha256_hex(all);
}

// Everything the segment stage derives from the configured inputs.
struct Source {
  std::unique_ptr<SynthModel> model;
  std::vector<Camera> cameras;  // cameras[0] is the reference view
  std::unique_ptr<InterpolatorAdapter> adapter;
  FrameRef start, end;
  double time_span = 1.0;  // frame time at lattice end

  double time_of(std::int64_t position, std::int64_t lattice) const {
    return static_cast<double>(position) / static_cast<double>(lattice) * time_span;
  }
};

Source open_source(const PipelineConfig& c) {
  Source s;
  if (c.adapter == AdapterMode::kOracle) {
    const ScenarioSpec spec = spec_from_json(read_text(c.synth_spec));
    s.model = std::make_unique<SynthModel>(spec);
    RigParams rig;
    rig.views = spec.views;
    rig.width = spec.width;
    rig.height = spec.height;
    rig.radius = spec.radius;
    rig.fov_deg = spec.fov_deg;
    rig.azimuth_offset_deg = spec.azimuth_offset_deg;
    s.cameras = orbit_rig(rig);
    s.time_span = spec.frames - 1;
    s.start = std::make_shared<const Frame>(oracle_frame(*s.model, s.cameras[0], 0.0));
    s.end = std::make_shared<const Frame>(oracle_frame(*s.model, s.cameras[0], s.time_span));
    s.adapter = std::make_unique<OracleInterpolator>(*s.model, s.cameras[0]);
    return s;
  }
  s.cameras.push_back(camera_from_json(read_text(c.camera)));
  const Image a = rgb_of(read_png(c.start_image)), b = rgb_of(read_png(c.end_image));
  if (!a.same_shape(b) || a.width != s.cameras[0].width || a.height != s.cameras[0].height)
    fail(ErrorCode::kResolutionMismatch, "start/end images must match the camera resolution");
  if (c.adapter == AdapterMode::kLinear) {
    s.start = std::make_shared<const Frame>(Frame{a, patch_features(a)});
    s.end = std::make_shared<const Frame>(Frame{b, patch_features(b)});
    s.adapter = std::make_unique<LinearInterpolator>();
  } else {
    s.start = std::make_shared<const Frame>(Frame{a, single_feature_map(c.start_features)});
    s.end = std::make_shared<const Frame>(Frame{b, single_feature_map(c.end_features)});
    s.adapter = std::make_unique<DirectoryInterpolator>(c.adapter_dir);
  }
  return s;
}

std::vector<std::string> input_hashes(const PipelineConfig& c) {
  std::vector<std::string> out;
  for (const fs::path* p : {&c.synth_spec, &c.start_image, &c.end_image, &c.start_features, &c.end_features,
                            &c.camera, &c.tracks})
    out.push_back(p->empty() ? "-" : sha256_file(*p));
  out.push_back(c.adapter == AdapterMode::kExternal ? hash_tree(c.adapter_dir) : "-");
  return out;
}

std::vector<std::size_t> track_subset(std::size_t n, std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  count = std::min(count, n);
  Rng rng(derive_seed(seed, 0x7acc));
  for (std::size_t i = 0; i < count; ++i) std::swap(order[i], order[i + rng.index(n - i)]);
  order.resize(count);
  std::sort(order.begin(), order.end());
  return order;
}

// ---------------------------------------------------------------------------
// Shared readers of earlier stage outputs

fs::path segment_dir(const PipelineConfig& c) { return c.workdir / "segment"; }
fs::path canonical_path(const PipelineConfig& c) { return c.workdir / "fit" / "canonical" / "canonical.ply"; }
std::string field_rel(std::size_t i) { return "fit/" + fragment_dir(i) + "/field"; }

FragmentSupervision fragment_supervision(const PipelineConfig& c, std::size_t i) {
  return load_supervision(segment_dir(c) / fragment_dir(i) / "supervision");
}

Camera reference_camera(const PipelineConfig& c) {
  return camera_from_json(read_text(segment_dir(c) / fragment_dir(0) / "supervision" / "view_0.json"));
}

std::vector<HexPlaneField> load_fields(const PipelineConfig& c, std::size_t count) {
  std::vector<HexPlaneField> fields;
  for (std::size_t i = 0; i < count; ++i) fields.push_back(load_field(c.workdir / field_rel(i)));
  return fields;
}

std::vector<Vec3> centers_of(const GaussianCloud& cloud) {
  std::vector<Vec3> p;
  for (const auto& g : cloud.gaussians) p.push_back(g.center);
  return p;
}

// Timeline frames of the merged deformation applied to the canonical cloud.
std::vector<GaussianCloud> deformed_sequence(const GlobalDeformation& global, const GaussianCloud& canonical,
                                             const Timeline& timeline) {
  std::vector<GaussianCloud> seq(timeline.frame_count());
  parallel_for(seq.size(), [&](std::size_t g) {
    seq[g] = apply_deformation(canonical, global.evaluate(canonical, global.frame_slot(g, timeline.frames_per_fragment)));
    seq[g].timestamp = timeline.times[g];
  });
  return seq;
}

// ---------------------------------------------------------------------------
// Stages

void run_segment(const PipelineConfig& c, Manifest& m, const RunOptions& opt) {
  const std::string key = settings_key(c, "segment", input_hashes(c));
  if (opt.resume && m.current("segment", key)) {
    spdlog::info("segment: up to date");
    return;
  }
  const fs::path dir = segment_dir(c);
  reset_dir(dir);
  const Source src = open_source(c);
  spdlog::info("segment: building hierarchy ({} adapter, threshold {}, max depth {}, f = {})", adapter_name(c.adapter),
               c.hierarchy.threshold, c.hierarchy.max_depth, c.hierarchy.frames);
  const FragmentTree tree = build_hierarchy(src.start, src.end, *src.adapter, c.hierarchy);
  const std::vector<Fragment> fragments = emit_fragments(tree, *src.adapter, c.hierarchy.frames);
  write_text(dir / "tree.json", tree_to_json(tree));

  const int f = c.hierarchy.frames;
  const std::int64_t lattice = c.hierarchy.lattice();
  json frag_json = json::array();
  std::vector<double> times;
  for (const Fragment& frag : fragments) {
    InterpolationRequest req{frag.start_position, frag.end_position, 0, lattice};
    std::vector<std::int64_t> positions;
    std::vector<double> local_times;
    for (int k = 0; k < f; ++k) {
      positions.push_back(req.position(k, f));
      local_times.push_back(src.time_of(positions.back(), lattice));
    }
    for (int k = frag.id == 0 ? 0 : 1; k < f; ++k) times.push_back(local_times[static_cast<std::size_t>(k)]);
    frag_json.push_back(json{{"id", frag.id}, {"positions", positions}});

    // Supervision bundle: reference view from the fragment frames, extra views
    // rendered by the oracle when one is available.
    FragmentSupervision sup;
    sup.reference.camera = src.cameras[0];
    std::vector<FeatureMap> features;
    for (const auto& fr : frag.frames) {
      sup.reference.frames.push_back(fr->image);
      features.push_back(fr->features);
    }
    if (src.model) {
      for (std::size_t v = 0; v < src.cameras.size(); ++v) {
        ViewSupervision view{src.cameras[v], {}, {}};
        for (double u : local_times) {
          const RenderOutput out = render(src.model->cloud_at(u), src.cameras[v]);
          view.frames.push_back(out.image);
          view.masks.push_back(mask_from_alpha(out.alpha));
        }
        if (v == 0)
          sup.reference.masks = std::move(view.masks);
        else
          sup.extra.push_back(std::move(view));
      }
    } else {
      for (const auto& img : sup.reference.frames) sup.reference.masks.push_back(mask_from_image(img));
    }
    const fs::path fdir = dir / fragment_dir(static_cast<std::size_t>(frag.id));
    write_tensor(images_to_tensor(sup.reference.frames), fdir / "frames.tnsr");
    write_tensor(features_to_tensor(features), fdir / "features.tnsr");
    save_supervision(sup, fdir / "supervision");
  }
  write_text(dir / "fragments.json",
             json{{"frames_per_fragment", f}, {"lattice", lattice}, {"fragments", frag_json}, {"times", times}}.dump(2) +
                 "\n");

  // Tracks over the global timeline in the reference view.
  if (src.model) {
    std::vector<GaussianCloud> truth;
    for (double u : times) truth.push_back(src.model->cloud_at(u));
    const auto points = track_subset(truth.front().size(), src.model->spec().tracks, src.model->spec().seed);
    write_tensor(tracks_to_tensor(make_tracks(truth, src.cameras[0], points)), dir / "tracks.tnsr");
  } else if (!c.tracks.empty()) {
    const TrackSet tracks = tensor_to_tracks(read_tensor(c.tracks));
    if (tracks.frames != times.size())
      fail(ErrorCode::kSequenceMismatch, "tracks cover " + std::to_string(tracks.frames) + " frames, timeline has " +
                                             std::to_string(times.size()));
    write_tensor(tracks_to_tensor(tracks), dir / "tracks.tnsr");
  }

  json keyframes = json::array();
  for (auto p : tree.keyframe_positions) keyframes.push_back(p);
  spdlog::info("segment: {} fragment(s), tree depth {}", fragments.size(), tree.depth());
  m.record("segment", key, "segment",
           json{{"fragments", fragments.size()}, {"depth", tree.depth()}, {"keyframe_positions", keyframes},
                {"frames", times.size()}});
}

void run_fit(const PipelineConfig& c, Manifest& m, const RunOptions& opt) {
  const Timeline timeline = load_timeline(c.workdir);
  const std::size_t count = timeline.fragment_count();
  if (opt.fragment && (*opt.fragment < 0 || static_cast<std::size_t>(*opt.fragment) >= count))
    fail(ErrorCode::kConfigError, "fragment " + std::to_string(*opt.fragment) + " does not exist (" +
                                      std::to_string(count) + " fragments)");
  const std::string seg = m.output_digest("segment");

  // Canonical cloud from the first timeline frame in every view.
  const std::string canon_key = settings_key(c, "fit.canonical", {seg});
  if (!(opt.resume && m.current("fit.canonical", canon_key))) {
    const fs::path dir = c.workdir / "fit" / "canonical";
    reset_dir(dir);
    const FragmentSupervision sup = fragment_supervision(c, 0);
    std::vector<StaticView> views{{sup.reference.camera, sup.reference.frames.front(), sup.reference.masks.front()}};
    for (const auto& v : sup.extra)
      views.push_back({v.camera, v.frames.front(), v.masks.empty() ? Image() : v.masks.front()});
    StaticFitParams p = c.static_fit;
    p.weights = c.weights;
    p.seed = derive_seed(c.seed, 1);
    p.on_checkpoint = [&](int iter, const GaussianCloud& cloud) {
      write_cloud(cloud, dir / "checkpoints" / fmt::format("iter_{:05d}.ply", iter));
    };
    spdlog::info("fit: canonical cloud from {} view(s)", views.size());
    const GaussianCloud canonical = fit_static(views, p);
    write_cloud(canonical, dir / "canonical.ply");
    double mse = 0.0;
    for (const auto& v : views) mse += mse_loss(render(canonical, v.camera).image, v.image).value;
    mse /= static_cast<double>(views.size());
    spdlog::info("fit: canonical {} points, mean view MSE {:.3e}", canonical.size(), mse);
    m.record("fit.canonical", canon_key, "fit/canonical", json{{"points", canonical.size()}, {"view_mse", mse}});
  } else {
    spdlog::info("fit: canonical up to date");
  }
  const GaussianCloud canonical = read_cloud(canonical_path(c));
  const std::string canon = m.output_digest("fit.canonical");

  auto stage_of = [](std::size_t i) { return "fit." + fragment_dir(i); };
  auto key_of = [&](std::size_t i) {
    std::vector<std::string> parts{seg, canon, std::to_string(i)};
    if (c.merge_mode == BoundaryMode::kChained)
      for (std::size_t j = 0; j < i; ++j) parts.push_back(m.output_digest(stage_of(j)));
    return settings_key(c, stage_of(i), parts);
  };
  struct Result {
    double mse = 0.0;
  };
  auto fit_one = [&](std::size_t i, const GaussianCloud& start_cloud) {
    const fs::path dir = c.workdir / "fit" / fragment_dir(i);
    reset_dir(dir);
    const FragmentSupervision sup = fragment_supervision(c, i);
    HexPlaneField field = init_identity(c.field, padded_bounds(start_cloud), derive_seed(c.seed, 1000 + i));
    MotionFitParams p = c.motion_fit;
    p.weights = c.weights;
    p.seed = derive_seed(c.seed, 2000 + i);
    p.on_checkpoint = [&](int iter, const HexPlaneField& f) {
      save_field(f, dir / "checkpoints" / fmt::format("iter_{:05d}", iter));
    };
    field = fit_motion(std::move(field), start_cloud, sup, p);
    save_field(field, dir / "field");
    Result r;
    r.mse = mean_view_mse(field, start_cloud, sup.reference.camera, sup.reference.frames);
    spdlog::info("fit: {} reference MSE {:.3e}", fragment_dir(i), r.mse);
    return r;
  };

  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < count; ++i) {
    if (opt.fragment && static_cast<std::size_t>(*opt.fragment) != i) continue;
    todo.push_back(i);
  }

  if (c.merge_mode == BoundaryMode::kShared) {
    std::vector<std::size_t> run;
    for (auto i : todo) {
      if (opt.resume && m.current(stage_of(i), key_of(i)))
        spdlog::info("fit: {} up to date", fragment_dir(i));
      else
        run.push_back(i);
    }
    std::vector<Result> results(run.size());
    parallel_for(run.size(), [&](std::size_t k) { results[k] = fit_one(run[k], canonical); });
    for (std::size_t k = 0; k < run.size(); ++k)
      m.record(stage_of(run[k]), key_of(run[k]), "fit/" + fragment_dir(run[k]), json{{"reference_mse", results[k].mse}});
    return;
  }

  // Chained: fragment i starts from the state the earlier fragments reach.
  for (auto i : todo) {
    if (opt.resume && m.current(stage_of(i), key_of(i))) {
      spdlog::info("fit: {} up to date", fragment_dir(i));
      continue;
    }
    GaussianCloud start_cloud = canonical;
    if (i > 0) {
      for (std::size_t j = 0; j < i; ++j) m.entry(stage_of(j));
      const GlobalDeformation partial(load_fields(c, i), BoundaryMode::kChained, c.merge.lambda);
      start_cloud = apply_deformation(canonical, partial.carried_state(centers_of(canonical), i));
    }
    const Result r = fit_one(i, start_cloud);
    m.record(stage_of(i), key_of(i), "fit/" + fragment_dir(i), json{{"reference_mse", r.mse}});
  }
}

void run_merge(const PipelineConfig& c, Manifest& m, const RunOptions& opt) {
  const Timeline timeline = load_timeline(c.workdir);
  const std::size_t count = timeline.fragment_count();
  std::vector<std::string> parts{m.output_digest("segment"), m.output_digest("fit.canonical")};
  for (std::size_t i = 0; i < count; ++i) parts.push_back(m.output_digest("fit." + fragment_dir(i)));
  const std::string key = settings_key(c, "merge", parts);
  if (opt.resume && m.current("merge", key)) {
    spdlog::info("merge: up to date");
    return;
  }
  const fs::path dir = c.workdir / "merge";
  reset_dir(dir);
  const GaussianCloud canonical = read_cloud(canonical_path(c));
  std::vector<HexPlaneField> fields = load_fields(c, count);

  // Overlap b is the last frame of fragment b (the first of fragment b + 1).
  std::vector<OverlapSupervision> overlaps;
  for (std::size_t b = 0; b + 1 < count; ++b) {
    const FragmentSupervision sup = fragment_supervision(c, b);
    OverlapSupervision o;
    o.views.push_back({sup.reference.camera, sup.reference.frames.back(),
                       sup.reference.masks.empty() ? Image() : sup.reference.masks.back()});
    for (const auto& v : sup.extra) o.views.push_back({v.camera, Image(), v.masks.empty() ? Image() : v.masks.back()});
    overlaps.push_back(std::move(o));
  }
  const GlobalDeformation before(fields, c.merge_mode, c.merge.lambda);
  std::vector<OverlapErrors> pre;
  for (std::size_t b = 0; b < overlaps.size(); ++b) pre.push_back(overlap_errors(before, b, canonical, overlaps[b]));

  MergeParams p = c.merge;
  p.weights = c.weights;
  p.seed = derive_seed(c.seed, 3);
  const GlobalDeformation global = merge_all(std::move(fields), c.merge_mode, canonical, overlaps, p, [](std::size_t b) {
    spdlog::info("merge: boundary {}", b);
  });
  std::vector<std::string> field_dirs;
  for (std::size_t i = 0; i < count; ++i) field_dirs.push_back(field_rel(i));
  save_global(global, dir / "global", field_dirs);

  json boundaries = json::array();
  for (std::size_t b = 0; b < overlaps.size(); ++b) {
    const OverlapErrors post = overlap_errors(global, b, canonical, overlaps[b]);
    spdlog::info("merge: boundary {} MSE left {:.3e} right {:.3e} blended {:.3e}", b, pre[b].left, pre[b].right,
                 post.blended);
    boundaries.push_back(json{{"left_mse", pre[b].left}, {"right_mse", pre[b].right}, {"blended_mse", post.blended}});
  }
  write_text(dir / "report.json", json{{"boundaries", boundaries}}.dump(2) + "\n");
  m.record("merge", key, "merge", json{{"boundaries", boundaries}});
}

void run_smooth(const PipelineConfig& c, Manifest& m, const RunOptions& opt) {
  const std::string key = settings_key(c, "smooth", {m.output_digest("segment"), m.output_digest("merge")});
  if (opt.resume && m.current("smooth", key)) {
    spdlog::info("smooth: up to date");
    return;
  }
  const fs::path dir = c.workdir / "smooth";
  reset_dir(dir);
  const Timeline timeline = load_timeline(c.workdir);
  const GaussianCloud canonical = read_cloud(canonical_path(c));
  const GlobalDeformation global = load_global(c.workdir / "merge" / "global", c.workdir);
  std::vector<GaussianCloud> sequence = deformed_sequence(global, canonical, timeline);

  SmoothingReport report;
  const fs::path tracks_path = segment_dir(c) / "tracks.tnsr";
  if (fs::exists(tracks_path)) {
    const Trajectories tracks = lift_tracks(tensor_to_tracks(read_tensor(tracks_path)), reference_camera(c));
    sequence = smooth_sequence(sequence, tracks, c.smoothing, &report);
  } else {
    spdlog::warn("smooth: no tracks available, sequence left unsmoothed");
    report.variation_before = report.variation_after = rotational_variation(sequence);
  }
  for (std::size_t g = 0; g < sequence.size(); ++g) write_cloud(sequence[g], dir / frame_name(g, "ply"));
  const json summary{{"variation_before", report.variation_before},
                     {"variation_after", report.variation_after},
                     {"passes", report.passes_run},
                     {"updates", report.smoothed_updates},
                     {"frames", sequence.size()}};
  write_text(dir / "report.json", summary.dump(2) + "\n");
  spdlog::info("smooth: rotational variation {:.4f} -> {:.4f} in {} pass(es)", report.variation_before,
               report.variation_after, report.passes_run);
  m.record("smooth", key, "smooth", summary);
}

void run_render(const PipelineConfig& c, Manifest& m, const RunOptions& opt) {
  std::string options = "view=" + (opt.view ? std::to_string(*opt.view) : std::string("all")) + " times=";
  for (double t : opt.times) options += fmt::format("{:.17g},", t);
  const std::string key =
      settings_key(c, "render", {m.output_digest("smooth"), m.output_digest("merge"), options});
  if (opt.resume && m.current("render", key)) {
    spdlog::info("render: up to date");
    return;
  }
  const fs::path dir = c.workdir / "render";
  reset_dir(dir);
  const std::vector<Camera> cameras = orbit_rig(c.rig);
  if (opt.view && (*opt.view < 0 || static_cast<std::size_t>(*opt.view) >= cameras.size()))
    fail(ErrorCode::kConfigError, "view " + std::to_string(*opt.view) + " is outside the rig");

  std::vector<std::pair<std::string, GaussianCloud>> clouds;
  if (opt.times.empty()) {
    const Timeline timeline = load_timeline(c.workdir);
    for (std::size_t g = 0; g < timeline.frame_count(); ++g)
      clouds.emplace_back(frame_name(g, "png"), read_cloud(c.workdir / "smooth" / frame_name(g, "ply")));
  } else {
    const GaussianCloud canonical = read_cloud(canonical_path(c));
    const GlobalDeformation global = load_global(c.workdir / "merge" / "global", c.workdir);
    for (double t : opt.times) {
      if (!(t >= 0.0 && t <= 1.0)) fail(ErrorCode::kConfigError, "render times must lie in [0, 1]");
      clouds.emplace_back(fmt::format("tau_{:.6f}.png", t),
                          apply_deformation(canonical, global.evaluate(canonical, global.locate(t))));
    }
  }
  std::size_t images = 0;
  for (std::size_t v = 0; v < cameras.size(); ++v) {
    if (opt.view && static_cast<std::size_t>(*opt.view) != v) continue;
    const fs::path vdir = dir / ("view_" + std::to_string(v));
    for (const auto& [name, cloud] : clouds) {
      const RenderOutput out = render(cloud, cameras[v]);
      write_png(vdir / name, out.image, out.alpha);
      ++images;
    }
  }
  spdlog::info("render: wrote {} image(s)", images);
  m.record("render", key, "render", json{{"images", images}});
}

void with_manifest(const PipelineConfig& c, const std::string& stage, const RunOptions& opt,
                   void (*fn)(const PipelineConfig&, Manifest&, const RunOptions&)) {
  tagged(stage, [&] {
    fs::create_directories(c.workdir);
    Manifest m = Manifest::load(c.workdir);
    fn(c, m, opt);
  });
}

}  // namespace

// ---------------------------------------------------------------------------

std::string PipelineConfig::to_json() const {
  // Paths are left out: inputs are keyed by content hash, and the workdir
  // location must not change any stage key.
  json j;
  j["seed"] = seed;
  j["adapter"] = adapter_name(adapter);
  j["hierarchy"] = {{"threshold", hierarchy.threshold},
                    {"max_depth", hierarchy.max_depth},
                    {"frames", hierarchy.frames},
                    {"rule", hierarchy.rule == SelectionRule::kMinFidelity ? "min-fidelity" : "max-fidelity"}};
  j["weights"] = {{"ref", weights.ref}, {"mask", weights.mask}, {"rigid", weights.rigid}};
  const StaticFitParams& s = static_fit;
  j["static_fit"] = {{"iterations", s.iterations},
                     {"initial_points", s.initial_points},
                     {"max_points", s.max_points},
                     {"densify_every", s.densify_every},
                     {"prune_opacity", s.prune_opacity},
                     {"clone_percentile", s.clone_percentile},
                     {"position_lr", s.position_lr},
                     {"position_lr_final_ratio", s.position_lr_final_ratio},
                     {"scale_lr", s.scale_lr},
                     {"opacity_lr", s.opacity_lr},
                     {"color_lr", s.color_lr}};
  j["motion_fit"] = {{"iterations", motion_fit.iterations}, {"lr", motion_fit.lr}, {"neighbors", motion_fit.neighbors}};
  j["field"] = {{"grid", field.grid},
                {"time_grid", field.time_grid},
                {"features", field.features},
                {"hidden", field.hidden},
                {"fusion", field.fusion == Fusion::kConcat ? "concat" : "product"}};
  j["merge"] = {{"lambda", merge.lambda},
                {"iterations", merge.iterations},
                {"lr", merge.lr},
                {"neighbors", merge.neighbors},
                {"mode", merge_mode == BoundaryMode::kShared ? "shared" : "chained"}};
  j["smoothing"] = {{"window", smoothing.window},
                    {"alpha", smoothing.alpha},
                    {"visibility_ratio", smoothing.visibility_ratio},
                    {"passes", smoothing.passes},
                    {"min_improvement", smoothing.min_improvement},
                    {"association_factor", smoothing.association_factor}};
  j["rig"] = {{"views", rig.views},
              {"width", rig.width},
              {"height", rig.height},
              {"radius", rig.radius},
              {"fov_deg", rig.fov_deg},
              {"elevation_deg", rig.elevation_deg},
              {"azimuth_offset_deg", rig.azimuth_offset_deg}};
  return j.dump();
}

PipelineConfig parse_config(const std::string& text, const fs::path& base_dir) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    config_error(std::string("config is not valid JSON: ") + e.what());
  }
  PipelineConfig c;
  Section root(j, "config");
  std::string workdir;
  root.get("workdir", workdir);
  if (workdir.empty()) config_error("config.workdir is required");
  c.workdir = resolve(base_dir, workdir);
  root.get("seed", c.seed);

  std::string mode = "oracle", adapter_dir;
  if (auto a = root.sub("adapter")) {
    a->get("mode", mode);
    a->get("dir", adapter_dir);
    a->finish();
  }
  if (mode == "oracle")
    c.adapter = AdapterMode::kOracle;
  else if (mode == "linear")
    c.adapter = AdapterMode::kLinear;
  else if (mode == "external")
    c.adapter = AdapterMode::kExternal;
  else
    config_error("adapter.mode must be oracle, linear or external");
  c.adapter_dir = resolve(base_dir, adapter_dir);

  if (auto in = root.sub("inputs")) {
    std::string spec, start, end, sf, ef, cam, tracks;
    in->get("synth_spec", spec);
    in->get("start", start);
    in->get("end", end);
    in->get("start_features", sf);
    in->get("end_features", ef);
    in->get("camera", cam);
    in->get("tracks", tracks);
    in->finish();
    c.synth_spec = resolve(base_dir, spec);
    c.start_image = resolve(base_dir, start);
    c.end_image = resolve(base_dir, end);
    c.start_features = resolve(base_dir, sf);
    c.end_features = resolve(base_dir, ef);
    c.camera = resolve(base_dir, cam);
    c.tracks = resolve(base_dir, tracks);
  }

  if (auto h = root.sub("hierarchy")) {
    std::string rule = "min-fidelity";
    h->get("threshold", c.hierarchy.threshold);
    h->get("max_depth", c.hierarchy.max_depth);
    h->get("frames", c.hierarchy.frames);
    h->get("rule", rule);
    h->finish();
    if (rule == "min-fidelity")
      c.hierarchy.rule = SelectionRule::kMinFidelity;
    else if (rule == "max-fidelity")
      c.hierarchy.rule = SelectionRule::kMaxFidelity;
    else
      config_error("hierarchy.rule must be min-fidelity or max-fidelity");
  }
  if (auto w = root.sub("weights")) {
    w->get("ref", c.weights.ref);
    w->get("mask", c.weights.mask);
    w->get("rigid", c.weights.rigid);
    w->finish();
  }
  if (auto s = root.sub("static_fit")) {
    StaticFitParams& p = c.static_fit;
    s->get("iterations", p.iterations);
    s->get("initial_points", p.initial_points);
    s->get("max_points", p.max_points);
    s->get("densify_every", p.densify_every);
    s->get("prune_opacity", p.prune_opacity);
    s->get("clone_percentile", p.clone_percentile);
    s->get("position_lr", p.position_lr);
    s->get("position_lr_final_ratio", p.position_lr_final_ratio);
    s->get("scale_lr", p.scale_lr);
    s->get("opacity_lr", p.opacity_lr);
    s->get("color_lr", p.color_lr);
    s->finish();
  }
  if (auto s = root.sub("motion_fit")) {
    s->get("iterations", c.motion_fit.iterations);
    s->get("lr", c.motion_fit.lr);
    s->get("neighbors", c.motion_fit.neighbors);
    s->finish();
  }
  if (auto s = root.sub("field")) {
    std::string fusion = "concat";
    s->get("grid", c.field.grid);
    s->get("time_grid", c.field.time_grid);
    s->get("features", c.field.features);
    s->get("hidden", c.field.hidden);
    s->get("fusion", fusion);
    s->finish();
    if (fusion == "concat")
      c.field.fusion = Fusion::kConcat;
    else if (fusion == "product")
      c.field.fusion = Fusion::kProduct;
    else
      config_error("field.fusion must be concat or product");
  }
  if (auto s = root.sub("merge")) {
    std::string merge_mode = "shared";
    s->get("lambda", c.merge.lambda);
    s->get("iterations", c.merge.iterations);
    s->get("lr", c.merge.lr);
    s->get("neighbors", c.merge.neighbors);
    s->get("mode", merge_mode);
    s->finish();
    if (merge_mode == "shared")
      c.merge_mode = BoundaryMode::kShared;
    else if (merge_mode == "chained")
      c.merge_mode = BoundaryMode::kChained;
    else
      config_error("merge.mode must be shared or chained");
  }
  if (auto s = root.sub("smoothing")) {
    s->get("window", c.smoothing.window);
    s->get("alpha", c.smoothing.alpha);
    s->get("visibility_ratio", c.smoothing.visibility_ratio);
    s->get("passes", c.smoothing.passes);
    s->get("min_improvement", c.smoothing.min_improvement);
    s->get("association_factor", c.smoothing.association_factor);
    s->finish();
  }
  if (auto s = root.sub("rig")) {
    s->get("views", c.rig.views);
    s->get("width", c.rig.width);
    s->get("height", c.rig.height);
    s->get("radius", c.rig.radius);
    s->get("fov_deg", c.rig.fov_deg);
    s->get("elevation_deg", c.rig.elevation_deg);
    s->get("azimuth_offset_deg", c.rig.azimuth_offset_deg);
    s->finish();
  }
  root.finish();

  // Value checks, surfaced as config errors.
  try {
    c.hierarchy.validate();
    c.weights.validate();
    c.field.validate();
    c.smoothing.validate();
  } catch (const Error& e) {
    config_error(e.what());
  }
  if (c.static_fit.iterations < 1 || c.motion_fit.iterations < 1 || c.merge.iterations < 0)
    config_error("iteration counts must be positive");
  if (c.static_fit.initial_points < 1 || c.static_fit.max_points < c.static_fit.initial_points)
    config_error("static_fit needs 1 <= initial_points <= max_points");
  if (!(c.merge.lambda >= 0.0 && c.merge.lambda <= 1.0)) config_error("merge.lambda must lie in [0, 1]");
  if (!(c.motion_fit.lr > 0.0) || !(c.merge.lr > 0.0)) config_error("learning rates must be positive");
  if (c.rig.views < 1 || c.rig.width < 1 || c.rig.height < 1 || !(c.rig.radius > 0.0) ||
      !(c.rig.fov_deg > 0.0 && c.rig.fov_deg < 180.0) || !(std::abs(c.rig.elevation_deg) < 89.9))
    config_error("invalid camera rig");

  // Paths each mode needs, and every referenced path must exist.
  auto require = [&](const fs::path& p, const char* what) {
    if (p.empty()) config_error(std::string("inputs.") + what + " is required in " + adapter_name(c.adapter) + " mode");
  };
  if (c.adapter == AdapterMode::kOracle) {
    require(c.synth_spec, "synth_spec");
  } else {
    require(c.start_image, "start");
    require(c.end_image, "end");
    require(c.camera, "camera");
    if (c.adapter == AdapterMode::kExternal) {
      require(c.start_features, "start_features");
      require(c.end_features, "end_features");
      if (c.adapter_dir.empty()) config_error("adapter.dir is required in external mode");
      if (!fs::is_directory(c.adapter_dir)) config_error("adapter directory " + c.adapter_dir.string() + " does not exist");
    }
  }
  for (const fs::path* p : {&c.synth_spec, &c.start_image, &c.end_image, &c.start_features, &c.end_features, &c.camera,
                            &c.tracks})
    if (!p->empty() && !fs::exists(*p)) config_error("input " + p->string() + " does not exist");
  return c;
}

PipelineConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) config_error("config " + path.string() + " does not exist");
  return parse_config(read_text(path), fs::absolute(path).parent_path());
}

Timeline load_timeline(const fs::path& workdir) {
  const fs::path path = workdir / "segment" / "fragments.json";
  if (!fs::exists(path)) fail(ErrorCode::kMissingArtifact, "no segmentation in " + workdir.string());
  const json j = json::parse(read_text(path));
  Timeline t;
  t.frames_per_fragment = j.at("frames_per_fragment").get<int>();
  t.lattice = j.at("lattice").get<std::int64_t>();
  for (const auto& f : j.at("fragments")) t.positions.push_back(f.at("positions").get<std::vector<std::int64_t>>());
  t.times = j.at("times").get<std::vector<double>>();
  if (t.positions.empty() ||
      t.times.size() != t.positions.size() * static_cast<std::size_t>(t.frames_per_fragment - 1) + 1)
    fail(ErrorCode::kSchemaMismatch, "fragments.json is inconsistent");
  return t;
}

void cmd_segment(const PipelineConfig& c, const RunOptions& o) { with_manifest(c, "segment", o, run_segment); }
void cmd_fit(const PipelineConfig& c, const RunOptions& o) { with_manifest(c, "fit", o, run_fit); }
void cmd_merge(const PipelineConfig& c, const RunOptions& o) { with_manifest(c, "merge", o, run_merge); }
void cmd_smooth(const PipelineConfig& c, const RunOptions& o) { with_manifest(c, "smooth", o, run_smooth); }
void cmd_render(const PipelineConfig& c, const RunOptions& o) { with_manifest(c, "render", o, run_render); }

void cmd_pipeline(const PipelineConfig& c, const RunOptions& o) {
  RunOptions stage = o;
  stage.fragment.reset();
  cmd_segment(c, stage);
  cmd_fit(c, stage);
  cmd_merge(c, stage);
  cmd_smooth(c, stage);
  cmd_render(c, stage);
}

void cmd_synth(const fs::path& spec_path, const fs::path& out) {
  tagged("synth", [&] {
    if (!fs::exists(spec_path)) config_error("spec " + spec_path.string() + " does not exist");
    const ScenarioSpec spec = spec_from_json(read_text(spec_path));
    spdlog::info("synth: generating {} with {} points, {} frames, {} views", to_string(spec.scenario), spec.points,
                 spec.frames, spec.views);
    write_dataset(generate(spec), out);
  });
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    fail(ErrorCode::kIoFailure, "SHA-256 failed");
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", digest[i]);
  return hex;
}

std::string sha256_file(const fs::path& path) {
  const auto bytes = read_bytes(path);
  return sha256_hex(std::string(bytes.begin(), bytes.end()));
}

}  // namespace frag4d
