#include <cstdlib>
#include <iostream>
#include <string>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "frag4d/error.hpp"
#include "frag4d/pipeline.hpp"

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_st("frag4d"));

  CLI::App app{"Fragment-wise 4D Gaussian motion interpolation"};
  app.require_subcommand(1, 1);
  std::string config_path, out_dir;
  frag4d::RunOptions options;
  int fragment = -1, view = -1;
  std::vector<double> times;
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging");

  auto stage = [&](const std::string& name, const std::string& help) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "Pipeline config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_flag("--resume", options.resume, "Skip stages whose manifest entry is current");
    return sub;
  };
  stage("segment", "Keyframe hierarchy and fragment frames");
  stage("fit", "Canonical cloud and per-fragment deformation fields")
      ->add_option("--fragment", fragment, "Fit only this fragment");
  stage("merge", "Merge fragment fields at their shared frames");
  stage("smooth", "Track-guided rotation and scale smoothing");
  CLI::App* render = stage("render", "Render the sequence from the camera rig");
  render->add_option("--view", view, "Only this rig view");
  render->add_option("--times", times, "Global times in [0, 1] instead of timeline frames")->delimiter(',');
  stage("pipeline", "Run every stage in order");
  CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic oracle dataset");
  synth->add_option("--config", config_path, "Scenario spec (JSON)")->required()->check(CLI::ExistingFile);
  synth->add_option("--out", out_dir, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  if (verbose) spdlog::set_level(spdlog::level::debug);
  if (fragment >= 0) options.fragment = fragment;
  if (view >= 0) options.view = view;
  options.times = times;

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    if (cmd == "synth") {
      frag4d::cmd_synth(config_path, out_dir);
      return 0;
    }
    const frag4d::PipelineConfig config = frag4d::load_config(config_path);
    if (cmd == "segment") frag4d::cmd_segment(config, options);
    else if (cmd == "fit") frag4d::cmd_fit(config, options);
    else if (cmd == "merge") frag4d::cmd_merge(config, options);
    else if (cmd == "smooth") frag4d::cmd_smooth(config, options);
    else if (cmd == "render") frag4d::cmd_render(config, options);
    else frag4d::cmd_pipeline(config, options);
  } catch (const frag4d::Error& e) {
    spdlog::error("{}", e.what());
    return frag4d::exit_status(e.code());
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
