#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "frag4d/deformation.hpp"
#include "frag4d/hierarchy.hpp"
#include "frag4d/merging.hpp"
#include "frag4d/optimize.hpp"
#include "frag4d/renderer.hpp"
#include "frag4d/smoothing.hpp"
#include "frag4d/synth.hpp"

namespace frag4d {

/// oracle: frames rendered from a synth spec at any frame time.
/// linear: builtin elementwise blends (testing only).
/// external: precomputed frames_{id}.tnsr / features_{id}.tnsr in a directory.
enum class AdapterMode { kOracle, kLinear, kExternal };

struct PipelineConfig {
  std::filesystem::path workdir;
  std::uint64_t seed = 0;

  AdapterMode adapter = AdapterMode::kOracle;
  std::filesystem::path adapter_dir;  // external mode

  // Inputs. Oracle mode needs synth_spec; the other modes need start, end and
  // camera, plus start/end features in external mode. Tracks are optional.
  std::filesystem::path synth_spec;
  std::filesystem::path start_image;
  std::filesystem::path end_image;
  std::filesystem::path start_features;
  std::filesystem::path end_features;
  std::filesystem::path camera;
  std::filesystem::path tracks;

  HierarchyParams hierarchy;
  LossWeights weights;
  StaticFitParams static_fit;
  MotionFitParams motion_fit;
  FieldShape field;
  MergeParams merge;
  BoundaryMode merge_mode = BoundaryMode::kShared;
  SmoothingParams smoothing;
  RigParams rig;

  /// Canonical JSON of every setting except paths (inputs are keyed by content).
  std::string to_json() const;
};

/// Parses and validates a config. Relative paths resolve against the config
/// file's directory; unknown keys, bad values and missing input paths throw
/// ConfigError.
PipelineConfig load_config(const std::filesystem::path& path);
PipelineConfig parse_config(const std::string& text, const std::filesystem::path& base_dir);

struct RunOptions {
  bool resume = false;               // skip stages whose manifest entry is current
  std::optional<int> fragment;       // fit: only this fragment
  std::optional<int> view;           // render: only this view
  std::vector<double> times;         // render: global times instead of timeline frames
};

/// Each stage reads only earlier stages' outputs under the workdir and
/// records its output hashes in workdir/manifest.json. Errors are rethrown
/// with the stage name prefixed and their code kept.
void cmd_segment(const PipelineConfig& config, const RunOptions& options = {});
void cmd_fit(const PipelineConfig& config, const RunOptions& options = {});
void cmd_merge(const PipelineConfig& config, const RunOptions& options = {});
void cmd_smooth(const PipelineConfig& config, const RunOptions& options = {});
void cmd_render(const PipelineConfig& config, const RunOptions& options = {});
void cmd_pipeline(const PipelineConfig& config, const RunOptions& options = {});

/// Generates an oracle dataset from a scenario spec file into `out`.
void cmd_synth(const std::filesystem::path& spec_path, const std::filesystem::path& out);

/// Lowercase hex SHA-256 of a byte string or a file.
std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

/// Global frame times of the segmented timeline (synth frame units in oracle
/// mode, lattice fractions otherwise).
struct Timeline {
  int frames_per_fragment = 0;
  std::int64_t lattice = 1;
  std::vector<std::vector<std::int64_t>> positions;  // per fragment, f lattice positions
  std::vector<double> times;                          // per global frame

  std::size_t fragment_count() const { return positions.size(); }
  std::size_t frame_count() const { return times.size(); }
};

Timeline load_timeline(const std::filesystem::path& workdir);

}  // namespace frag4d
