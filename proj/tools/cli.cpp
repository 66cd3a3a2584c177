#include "stillsplat/pipeline.hpp"

#include "CLI11.hpp"

#include <iostream>

namespace {

using namespace stillsplat;

RunConfig load_run_config(const std::string& config_path) {
  if (config_path.empty()) return RunConfig{};
  return RunConfig::from_config(KeyValueConfig::from_file(config_path));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stillsplat: static-background reconstruction from dynamic videos"};
  app.require_subcommand(1);

  std::string config_path, in_dir, out_dir;
  int seed = -1;

  auto add_common = [&](CLI::App* sub, bool needs_in) {
    sub->add_option("--config", config_path, "key-value config file");
    if (needs_in) sub->add_option("--in", in_dir, "input directory")->required();
    sub->add_option("--out", out_dir, "output directory")->required();
    sub->add_option("--seed", seed, "override the config seed");
  };

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  add_common(synth, false);

  CLI::App* ingest = app.add_subcommand("ingest", "rewrite an external dataset in canonical form");
  add_common(ingest, true);

  CLI::App* align = app.add_subcommand("align", "global pointmap alignment");
  add_common(align, true);
  double w_flow = -1, w_smooth = -1;
  int align_iters = -1;
  align->add_option("--w-flow", w_flow, "flow loss weight");
  align->add_option("--w-smooth", w_smooth, "smoothness loss weight");
  align->add_option("--iterations", align_iters, "alignment iterations");

  CLI::App* train = app.add_subcommand("train", "optimize the Gaussian cloud");
  add_common(train, true);
  int train_iters = -1;
  train->add_option("--iterations", train_iters, "training iterations");

  CLI::App* render = app.add_subcommand("render", "render static test views");
  add_common(render, true);
  std::string mode;
  bool no_refine = false;
  render->add_option("--mode", mode, "staticness | plain");
  render->add_flag("--no-refine-poses", no_refine, "skip test-pose refinement");

  CLI::App* eval = app.add_subcommand("eval", "compute metrics against ground truth");
  add_common(eval, true);
  double mask_threshold = -1;
  eval->add_option("--mask-threshold", mask_threshold, "dynamic-mask binarization threshold");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    RunConfig rc = load_run_config(config_path);
    if (seed >= 0) {
      rc.scene.seed = static_cast<uint64_t>(seed);
      rc.train.seed = static_cast<uint64_t>(seed);
    }

    if (synth->parsed()) {
      cmd_synth(rc, out_dir);
    } else if (ingest->parsed()) {
      cmd_ingest(fs::path(in_dir) / "manifest.json", out_dir);
    } else if (align->parsed()) {
      if (w_flow >= 0) rc.align.w_flow = w_flow;
      if (w_smooth >= 0) rc.align.w_smooth = w_smooth;
      if (align_iters >= 0) rc.align.iterations = align_iters;
      cmd_align(in_dir, out_dir, rc.align, rc.train);
    } else if (train->parsed()) {
      if (train_iters >= 0) rc.train.iterations = train_iters;
      cmd_train(in_dir, out_dir, rc.train);
    } else if (render->parsed()) {
      if (!mode.empty()) rc.render_mode = mode;
      if (no_refine) rc.render_refine_poses = false;
      cmd_render(in_dir, out_dir, rc.render_mode, rc.render_refine_poses, rc.train);
    } else if (eval->parsed()) {
      if (mask_threshold >= 0) rc.eval_mask_threshold = mask_threshold;
      cmd_eval(in_dir, out_dir, rc.eval_mask_threshold);
    }
  } catch (const AlignDivergence& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const TrainDivergence& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const MissingInputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
