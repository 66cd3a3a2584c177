#pragma once

#include "stillsplat/align.hpp"
#include "stillsplat/eval.hpp"
#include "stillsplat/io.hpp"
#include "stillsplat/synth.hpp"
#include "stillsplat/trainer.hpp"

#include "json.hpp"

#include <filesystem>

namespace stillsplat {

namespace fs = std::filesystem;
using Json = nlohmann::json;

// A required file listed in a manifest is absent.
struct MissingInputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace pipeline_detail {

inline std::string index_name(const char* stem, int i, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%05d.%s", stem, i, ext);
  return buf;
}

inline std::string edge_name(const char* stem, int n, int m, const char* ext) {
  char buf[96];
  std::snprintf(buf, sizeof(buf), "%s_%05d_%05d.%s", stem, n, m, ext);
  return buf;
}

inline std::string require(const fs::path& dir, const std::string& rel) {
  fs::path p = dir / rel;
  if (!fs::exists(p)) throw MissingInputError("missing input file: " + rel + " (in " +
                                              dir.string() + ")");
  return p.string();
}

inline Json load_json(const fs::path& path) {
  if (!fs::exists(path)) throw MissingInputError("missing input file: " + path.string());
  std::ifstream f(path);
  Json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
  return j;
}

inline void save_json(const fs::path& path, const Json& j) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << j.dump(2) << "\n";
}

inline void save_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
}

}  // namespace pipeline_detail

// ---------------------------------------------------------------------------
// In-memory dataset mirroring the on-disk manifest.
// ---------------------------------------------------------------------------

struct Dataset {
  Intrinsics intr = Intrinsics::centered(1.0, 1, 1);
  double timestep = 0.1;
  std::vector<double> timestamps;
  std::vector<Image> rgb;
  std::vector<Image> static_rgb;    // empty when ground truth is unavailable
  std::vector<DepthMap> gt_depths;  // ditto
  std::vector<FrameMask> gt_masks;
  std::vector<Pose> gt_poses;
  FrameGraph graph;  // edges with loaded predictions

  int num_frames() const { return static_cast<int>(rgb.size()); }
  bool has_ground_truth() const { return !gt_poses.empty(); }
};

inline void write_dataset(const Dataset& ds, const fs::path& out_dir) {
  using namespace pipeline_detail;
  fs::create_directories(out_dir);
  Json man;
  man["kind"] = "dataset";
  man["width"] = ds.intr.width;
  man["height"] = ds.intr.height;
  man["focal"] = ds.intr.fx;
  man["timestep"] = ds.timestep;

  Json frames = Json::array();
  for (int i = 0; i < ds.num_frames(); ++i) {
    Json fr;
    fr["index"] = i;
    fr["timestamp"] = ds.timestamps[i];
    fr["image"] = index_name("frame", i, "ppm");
    write_ppm((out_dir / fr["image"].get<std::string>()).string(), ds.rgb[i]);
    if (!ds.static_rgb.empty()) {
      fr["static_image"] = index_name("static", i, "ppm");
      write_ppm((out_dir / fr["static_image"].get<std::string>()).string(), ds.static_rgb[i]);
    }
    if (!ds.gt_depths.empty()) {
      fr["depth"] = index_name("depth", i, "pfm");
      write_pfm((out_dir / fr["depth"].get<std::string>()).string(), ds.gt_depths[i].values);
    }
    fr["mask"] = index_name("mask", i, "pgm");
    write_pgm((out_dir / fr["mask"].get<std::string>()).string(), ds.gt_masks[i].values);
    frames.push_back(fr);
  }
  man["frames"] = frames;

  if (!ds.gt_poses.empty()) {
    std::vector<TrajectoryEntry> traj(ds.num_frames());
    for (int i = 0; i < ds.num_frames(); ++i)
      traj[i] = {ds.timestamps[i], ds.gt_poses[i]};
    man["trajectory"] = "trajectory_gt.txt";
    write_trajectory((out_dir / "trajectory_gt.txt").string(), traj);
  }

  Json edges = Json::array();
  for (size_t e = 0; e < ds.graph.edges.size(); ++e) {
    int n = ds.graph.edges[e].n, m = ds.graph.edges[e].m;
    const PairPrediction& p = ds.graph.preds[e];
    Json ej;
    ej["n"] = n;
    ej["m"] = m;
    ej["pointmap_nn"] = edge_name("pointmap_nn", n, m, "pfm");
    ej["pointmap_mn"] = edge_name("pointmap_mn", n, m, "pfm");
    ej["conf_nn"] = edge_name("conf_nn", n, m, "pfm");
    ej["conf_mn"] = edge_name("conf_mn", n, m, "pfm");
    ej["mask"] = edge_name("mask", n, m, "pfm");
    write_pfm_pointmap((out_dir / ej["pointmap_nn"].get<std::string>()).string(), p.x_nn);
    write_pfm_pointmap((out_dir / ej["pointmap_mn"].get<std::string>()).string(), p.x_mn);
    write_pfm((out_dir / ej["conf_nn"].get<std::string>()).string(), p.c_nn);
    write_pfm((out_dir / ej["conf_mn"].get<std::string>()).string(), p.c_mn);
    write_pfm((out_dir / ej["mask"].get<std::string>()).string(), p.mask.values);
    if (p.has_flow) {
      ej["flow"] = edge_name("flow", n, m, "pfm");
      write_pfm_flow((out_dir / ej["flow"].get<std::string>()).string(), p.flow_est);
    }
    edges.push_back(ej);
  }
  man["edges"] = edges;
  save_json(out_dir / "manifest.json", man);
}

inline Dataset load_dataset(const fs::path& manifest_path) {
  using namespace pipeline_detail;
  Json man = load_json(manifest_path);
  fs::path dir = manifest_path.parent_path();
  if (man.value("kind", "") != "dataset")
    throw ConfigError(manifest_path.string() + ": expected a dataset manifest");

  Dataset ds;
  int W = man.at("width").get<int>(), H = man.at("height").get<int>();
  ds.intr = Intrinsics::centered(man.at("focal").get<double>(), W, H);
  ds.timestep = man.value("timestep", 0.1);

  for (const Json& fr : man.at("frames")) {
    ds.timestamps.push_back(fr.at("timestamp").get<double>());
    ds.rgb.push_back(read_ppm(require(dir, fr.at("image").get<std::string>())));
    if (fr.contains("static_image"))
      ds.static_rgb.push_back(read_ppm(require(dir, fr.at("static_image").get<std::string>())));
    if (fr.contains("depth"))
      ds.gt_depths.push_back(DepthMap{read_pfm(require(dir, fr.at("depth").get<std::string>()))});
    ds.gt_masks.push_back(FrameMask{read_pgm(require(dir, fr.at("mask").get<std::string>()))});
  }
  if (man.contains("trajectory")) {
    auto traj = read_trajectory(require(dir, man.at("trajectory").get<std::string>()));
    if (static_cast<int>(traj.size()) != ds.num_frames())
      throw ConfigError("trajectory length does not match frame count");
    for (const auto& e : traj) ds.gt_poses.push_back(e.pose);
  }

  ds.graph.num_frames = ds.num_frames();
  for (const Json& ej : man.at("edges")) {
    EdgeKey key{ej.at("n").get<int>(), ej.at("m").get<int>()};
    if (key.n < 0 || key.n >= ds.num_frames() || key.m < 0 || key.m >= ds.num_frames())
      throw ConfigError("edge references a frame outside the dataset");
    PairPrediction p;
    p.x_nn = read_pfm_pointmap(require(dir, ej.at("pointmap_nn").get<std::string>()),
                               PointFrame::Camera);
    p.x_mn = read_pfm_pointmap(require(dir, ej.at("pointmap_mn").get<std::string>()),
                               PointFrame::Camera);
    p.c_nn = read_pfm(require(dir, ej.at("conf_nn").get<std::string>()));
    p.c_mn = read_pfm(require(dir, ej.at("conf_mn").get<std::string>()));
    p.mask = PairMask{read_pfm(require(dir, ej.at("mask").get<std::string>())), key.n, key.m};
    if (ej.contains("flow")) {
      p.flow_est = read_pfm_flow(require(dir, ej.at("flow").get<std::string>()));
      p.has_flow = true;
    }
    if (p.x_nn.points.size() != static_cast<size_t>(W * H))
      throw ConfigError("edge " + std::to_string(key.n) + "," + std::to_string(key.m) +
                        ": pointmap resolution does not match the dataset");
    ds.graph.edges.push_back(key);
    ds.graph.preds.push_back(std::move(p));
  }

  // connectivity: every frame reachable from frame 0 through edges
  {
    std::vector<bool> seen(ds.num_frames(), false);
    std::vector<int> stack = {0};
    seen[0] = true;
    while (!stack.empty()) {
      int t = stack.back();
      stack.pop_back();
      for (const auto& e : ds.graph.edges) {
        int other = e.n == t ? e.m : (e.m == t ? e.n : -1);
        if (other >= 0 && !seen[other]) {
          seen[other] = true;
          stack.push_back(other);
        }
      }
    }
    for (int t = 0; t < ds.num_frames(); ++t)
      if (!seen[t])
        throw ConfigError("frame graph is disconnected: frame " + std::to_string(t) +
                          " is unreachable from frame 0");
  }
  return ds;
}

inline Dataset dataset_from_synthetic(const SyntheticDataset& synth, double timestep) {
  Dataset ds;
  ds.intr = synth.intr;
  ds.timestep = timestep;
  for (const auto& f : synth.frames) {
    ds.timestamps.push_back(f.timestamp);
    ds.rgb.push_back(f.rgb);
    ds.static_rgb.push_back(f.static_rgb);
    ds.gt_depths.push_back(f.depth);
    ds.gt_masks.push_back(f.mask);
    ds.gt_poses.push_back(f.pose);
  }
  ds.graph.num_frames = ds.num_frames();
  for (const auto& e : synth.edges) {
    ds.graph.edges.push_back({e.n, e.m});
    PairPrediction p;
    p.x_nn = e.x_nn;
    p.x_mn = e.x_mn;
    p.c_nn = e.c_nn;
    p.c_mn = e.c_mn;
    p.mask = e.mask;
    p.flow_est = e.flow;
    p.has_flow = true;
    ds.graph.preds.push_back(std::move(p));
  }
  return ds;
}

// Aggregated dynamic mask per frame (mean over edges whose first frame is t).
inline std::vector<FrameMask> aggregate_frame_masks(const FrameGraph& graph) {
  std::vector<PairMask> pair_masks;
  for (const auto& p : graph.preds) pair_masks.push_back(p.mask);
  std::vector<FrameMask> out;
  for (int t = 0; t < graph.num_frames; ++t) out.push_back(aggregate_masks(pair_masks, t));
  return out;
}

// Per-frame confidence for init filtering: mean of c_nn over edges rooted at t.
inline std::vector<GridF> aggregate_confidences(const FrameGraph& graph) {
  std::vector<GridF> out(graph.num_frames);
  std::vector<int> counts(graph.num_frames, 0);
  for (size_t e = 0; e < graph.edges.size(); ++e) {
    int t = graph.edges[e].n;
    const GridF& c = graph.preds[e].c_nn;
    if (counts[t] == 0)
      out[t] = c;
    else
      for (size_t i = 0; i < c.size(); ++i) out[t][i] += c[i];
    ++counts[t];
  }
  for (int t = 0; t < graph.num_frames; ++t) {
    if (counts[t] == 0)
      throw ConfigError("frame " + std::to_string(t) + " has no edges rooted at it");
    for (size_t i = 0; i < out[t].size(); ++i) out[t][i] /= counts[t];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Run configuration: plain-text `section.key = value` file; every command
// ignores the sections it does not use but unknown keys anywhere are errors.
// ---------------------------------------------------------------------------

struct RunConfig {
  SceneSpec scene;
  AlignOptions align;
  TrainConfig train;
  std::string render_mode = "staticness";
  bool render_refine_poses = true;
  double eval_mask_threshold = 0.5;

  static const std::vector<std::string>& allowed_keys() {
    static const std::vector<std::string> keys = {
        "scene.width", "scene.height", "scene.frames", "scene.focal", "scene.timestep",
        "scene.coverage", "scene.objects", "scene.ellipsoid", "scene.strides", "scene.noise",
        "scene.fp_rate", "scene.fn_rate", "scene.seed",
        "align.w_smooth", "align.w_flow", "align.iterations", "align.lr",
        "train.iterations", "train.lr_mu", "train.lr_opacity", "train.lr_staticness",
        "train.lr_pose_rot", "train.lr_pose_trans", "train.lambda_ssim",
        "train.confidence_percentile", "train.loss_form", "train.refine_poses",
        "train.optimize_staticness", "train.test_pose_iterations", "train.seed",
        "render.mode", "render.refine_poses",
        "eval.mask_threshold"};
    return keys;
  }

  static RunConfig from_config(const KeyValueConfig& cfg) {
    cfg.reject_unknown(allowed_keys());
    RunConfig rc;
    SceneSpec& s = rc.scene;
    s.width = cfg.get_int("scene.width", s.width);
    s.height = cfg.get_int("scene.height", s.height);
    s.num_frames = cfg.get_int("scene.frames", s.num_frames);
    s.focal = cfg.get_double("scene.focal", s.focal);
    s.timestep = cfg.get_double("scene.timestep", s.timestep);
    s.dynamic_coverage = cfg.get_double("scene.coverage", s.dynamic_coverage);
    s.num_dynamic_objects = cfg.get_int("scene.objects", s.num_dynamic_objects);
    s.use_ellipsoid = cfg.get_bool("scene.ellipsoid", s.use_ellipsoid);
    s.pointmap_noise = cfg.get_double("scene.noise", s.pointmap_noise);
    s.mask_fp_rate = cfg.get_double("scene.fp_rate", s.mask_fp_rate);
    s.mask_fn_rate = cfg.get_double("scene.fn_rate", s.mask_fn_rate);
    s.seed = static_cast<uint64_t>(cfg.get_int("scene.seed", static_cast<int>(s.seed)));
    if (cfg.has("scene.strides")) {
      s.strides.clear();
      std::istringstream ss(cfg.get_string("scene.strides", ""));
      int k;
      while (ss >> k) s.strides.push_back(k);
      if (s.strides.empty()) throw ConfigError("scene.strides: expected positive integers");
    }

    AlignOptions& a = rc.align;
    a.w_smooth = cfg.get_double("align.w_smooth", a.w_smooth);
    a.w_flow = cfg.get_double("align.w_flow", a.w_flow);
    a.iterations = cfg.get_int("align.iterations", a.iterations);
    a.lr = cfg.get_double("align.lr", a.lr);

    TrainConfig& t = rc.train;
    t.iterations = cfg.get_int("train.iterations", t.iterations);
    t.lr_mu = cfg.get_double("train.lr_mu", t.lr_mu);
    t.lr_opacity = cfg.get_double("train.lr_opacity", t.lr_opacity);
    t.lr_staticness = cfg.get_double("train.lr_staticness", t.lr_staticness);
    t.lr_pose_rot = cfg.get_double("train.lr_pose_rot", t.lr_pose_rot);
    t.lr_pose_trans = cfg.get_double("train.lr_pose_trans", t.lr_pose_trans);
    t.lambda_ssim = cfg.get_double("train.lambda_ssim", t.lambda_ssim);
    t.confidence_percentile =
        cfg.get_double("train.confidence_percentile", t.confidence_percentile);
    std::string form = cfg.get_string("train.loss_form", "masked");
    if (form == "masked")
      t.loss_form = ImageLossForm::Masked;
    else if (form == "masked_target")
      t.loss_form = ImageLossForm::MaskedTarget;
    else
      throw ConfigError("train.loss_form: expected `masked` or `masked_target`");
    t.refine_poses = cfg.get_bool("train.refine_poses", t.refine_poses);
    t.optimize_staticness = cfg.get_bool("train.optimize_staticness", t.optimize_staticness);
    t.test_pose_iterations = cfg.get_int("train.test_pose_iterations", t.test_pose_iterations);
    t.seed = static_cast<uint64_t>(cfg.get_int("train.seed", static_cast<int>(t.seed)));

    rc.render_mode = cfg.get_string("render.mode", rc.render_mode);
    if (rc.render_mode != "staticness" && rc.render_mode != "plain")
      throw ConfigError("render.mode: expected `staticness` or `plain`");
    rc.render_refine_poses = cfg.get_bool("render.refine_poses", rc.render_refine_poses);
    rc.eval_mask_threshold = cfg.get_double("eval.mask_threshold", rc.eval_mask_threshold);
    return rc;
  }
};

// ---------------------------------------------------------------------------
// Commands. Each reads only files named in a manifest and writes a manifest
// for the next stage.
// ---------------------------------------------------------------------------

inline void cmd_synth(const RunConfig& rc, const fs::path& out_dir) {
  SyntheticDataset synth = generate(rc.scene);
  write_dataset(dataset_from_synthetic(synth, rc.scene.timestep), out_dir);
}

// Re-writes an externally supplied dataset in canonical form, validating every
// shape along the way (load_dataset performs the validation).
inline void cmd_ingest(const fs::path& in_manifest, const fs::path& out_dir) {
  Dataset ds = load_dataset(in_manifest);
  write_dataset(ds, out_dir);
}

inline void cmd_align(const fs::path& in_dir, const fs::path& out_dir, const AlignOptions& opt,
                      const TrainConfig& init_cfg = TrainConfig{}) {
  using namespace pipeline_detail;
  Dataset ds = load_dataset(in_dir / "manifest.json");
  fs::create_directories(out_dir);

  AlignState state = init_align_state(ds.graph, ds.intr.height, ds.intr.width);
  WindowSet windows = windows_from_graph(ds.graph);
  std::vector<FrameMask> frame_masks = aggregate_frame_masks(ds.graph);
  AlignResult result = optimize_alignment(state, ds.graph, windows, frame_masks, opt);

  std::vector<TrajectoryEntry> traj(ds.num_frames());
  for (int i = 0; i < ds.num_frames(); ++i) traj[i] = {ds.timestamps[i], result.state.poses[i]};
  write_trajectory((out_dir / "trajectory.txt").string(), traj);

  Json man;
  man["kind"] = "aligned";
  man["dataset_manifest"] = fs::relative(in_dir / "manifest.json", out_dir).string();
  man["trajectory"] = "trajectory.txt";
  // Quantize the state through the on-disk representation (float32 depths,
  // shortest-roundtrip JSON focal, the loader's extra quaternion normalize)
  // before fusing, so the written cloud matches one rebuilt from the files by
  // cmd_train bit for bit.
  for (auto& p : result.state.poses) p.rotation.normalize();
  double focal_written = std::exp(result.state.log_focal);
  man["focal"] = focal_written;
  result.state.log_focal = std::log(focal_written);
  Json depths = Json::array();
  for (int i = 0; i < ds.num_frames(); ++i) {
    std::string name = index_name("depth", i, "pfm");
    GridF d(ds.intr.height, ds.intr.width);
    for (size_t k = 0; k < d.size(); ++k) {
      d[k] = static_cast<double>(static_cast<float>(std::exp(result.state.log_depth[i][k])));
      result.state.log_depth[i][k] = std::log(d[k]);
    }
    write_pfm((out_dir / name).string(), d);
    depths.push_back(name);
  }
  man["depths"] = depths;

  GaussianCloud fused = init_cloud(result.state, ds.rgb, aggregate_confidences(ds.graph),
                                   frame_masks, init_cfg);
  write_cloud((out_dir / "points.cloud").string(), fused);
  man["cloud"] = "points.cloud";

  {
    std::ofstream log(out_dir / "align_log.jsonl");
    if (!log) throw IoError("cannot write align_log.jsonl");
    char buf[256];
    for (const auto& row : result.trace) {
      std::snprintf(buf, sizeof(buf),
                    "{\"iteration\": %d, \"total\": %.17g, \"align\": %.17g, "
                    "\"smooth\": %.17g, \"flow\": %.17g}\n",
                    row.iteration, row.total, row.align, row.smooth, row.flow);
      log << buf;
    }
    man["log"] = "align_log.jsonl";
  }
  save_json(out_dir / "manifest.json", man);
}

// Rebuilds the alignment state a train/render stage needs from align outputs.
struct AlignedInputs {
  Dataset dataset;
  AlignState state;
  std::vector<FrameMask> frame_masks;
  std::vector<GridF> confidences;
};

inline AlignedInputs load_aligned(const fs::path& aligned_dir) {
  using namespace pipeline_detail;
  Json man = load_json(aligned_dir / "manifest.json");
  if (man.value("kind", "") != "aligned")
    throw ConfigError((aligned_dir / "manifest.json").string() + ": expected an aligned manifest");

  AlignedInputs in;
  fs::path ds_manifest = aligned_dir / man.at("dataset_manifest").get<std::string>();
  in.dataset = load_dataset(ds_manifest.lexically_normal());

  in.state.width = in.dataset.intr.width;
  in.state.height = in.dataset.intr.height;
  in.state.log_focal = std::log(man.at("focal").get<double>());
  auto traj = read_trajectory(require(aligned_dir, man.at("trajectory").get<std::string>()));
  if (static_cast<int>(traj.size()) != in.dataset.num_frames())
    throw ConfigError("aligned trajectory length does not match the dataset");
  for (const auto& e : traj) in.state.poses.push_back(e.pose);
  for (const Json& name : man.at("depths")) {
    GridF d = read_pfm(require(aligned_dir, name.get<std::string>()));
    for (size_t k = 0; k < d.size(); ++k) {
      if (!(d[k] > 0)) throw ConfigError("aligned depth map has non-positive values");
      d[k] = std::log(d[k]);
    }
    in.state.log_depth.push_back(std::move(d));
  }
  if (static_cast<int>(in.state.log_depth.size()) != in.dataset.num_frames())
    throw ConfigError("aligned depth count does not match the dataset");

  in.frame_masks = aggregate_frame_masks(in.dataset.graph);
  in.confidences = aggregate_confidences(in.dataset.graph);
  return in;
}

inline FrameDataset make_frame_dataset(const AlignedInputs& in) {
  FrameDataset fd;
  fd.intr = in.dataset.intr;
  std::vector<bool> is_test = split_frames(in.dataset.num_frames());
  for (int i = 0; i < in.dataset.num_frames(); ++i) {
    FrameData f;
    f.timestamp = in.dataset.timestamps[i];
    f.rgb = in.dataset.rgb[i];
    f.pose = in.state.poses[i];
    f.staticness = staticness_from_mask(in.frame_masks[i]);
    f.is_test = is_test[i];
    fd.frames.push_back(std::move(f));
  }
  return fd;
}

inline void cmd_train(const fs::path& aligned_dir, const fs::path& out_dir,
                      const TrainConfig& cfg) {
  using namespace pipeline_detail;
  AlignedInputs in = load_aligned(aligned_dir);
  fs::create_directories(out_dir);

  GaussianCloud cloud = init_cloud(in.state, in.dataset.rgb, in.confidences, in.frame_masks, cfg);
  FrameDataset fd = make_frame_dataset(in);
  TrainResult result = train(std::move(cloud), fd, cfg);

  write_cloud((out_dir / "checkpoint.cloud").string(), result.cloud);
  std::vector<TrajectoryEntry> traj(fd.frames.size());
  for (size_t i = 0; i < fd.frames.size(); ++i)
    traj[i] = {fd.frames[i].timestamp, result.poses[i]};
  write_trajectory((out_dir / "trajectory.txt").string(), traj);

  {
    std::ofstream csv(out_dir / "loss.csv");
    if (!csv) throw IoError("cannot write loss.csv");
    csv << "iteration,loss_total,loss_l1,loss_ssim\n";
    char buf[192];
    for (const auto& row : result.trace) {
      std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g\n", row.iteration, row.total, row.l1,
                    row.ssim);
      csv << buf;
    }
  }
  {
    std::ostringstream dump;
    dump << "train.iterations = " << cfg.iterations << "\n"
         << "train.lr_mu = " << cfg.lr_mu << "\n"
         << "train.lr_opacity = " << cfg.lr_opacity << "\n"
         << "train.lr_staticness = " << cfg.lr_staticness << "\n"
         << "train.lr_pose_rot = " << cfg.lr_pose_rot << "\n"
         << "train.lr_pose_trans = " << cfg.lr_pose_trans << "\n"
         << "train.lambda_ssim = " << cfg.lambda_ssim << "\n"
         << "train.confidence_percentile = " << cfg.confidence_percentile << "\n"
         << "train.loss_form = "
         << (cfg.loss_form == ImageLossForm::Masked ? "masked" : "masked_target") << "\n"
         << "train.refine_poses = " << (cfg.refine_poses ? "true" : "false") << "\n"
         << "train.optimize_staticness = " << (cfg.optimize_staticness ? "true" : "false") << "\n"
         << "train.test_pose_iterations = " << cfg.test_pose_iterations << "\n"
         << "train.seed = " << cfg.seed << "\n";
    save_text(out_dir / "train_config.txt", dump.str());
  }

  Json man;
  man["kind"] = "checkpoint";
  man["aligned_manifest"] = fs::relative(aligned_dir / "manifest.json", out_dir).string();
  man["cloud"] = "checkpoint.cloud";
  man["trajectory"] = "trajectory.txt";
  man["loss_csv"] = "loss.csv";
  man["config"] = "train_config.txt";
  save_json(out_dir / "manifest.json", man);
}

inline void cmd_render(const fs::path& checkpoint_dir, const fs::path& out_dir,
                       const std::string& mode_name, bool refine_poses, const TrainConfig& cfg) {
  using namespace pipeline_detail;
  Json man = load_json(checkpoint_dir / "manifest.json");
  if (man.value("kind", "") != "checkpoint")
    throw ConfigError((checkpoint_dir / "manifest.json").string() +
                      ": expected a checkpoint manifest");
  RenderMode mode;
  if (mode_name == "staticness")
    mode = RenderMode::Staticness;
  else if (mode_name == "plain")
    mode = RenderMode::Plain;
  else
    throw ConfigError("render mode: expected `staticness` or `plain`");

  fs::path aligned_dir =
      (checkpoint_dir / man.at("aligned_manifest").get<std::string>()).parent_path();
  AlignedInputs in = load_aligned(aligned_dir.lexically_normal());
  GaussianCloud cloud =
      read_cloud(require(checkpoint_dir, man.at("cloud").get<std::string>()));
  auto traj = read_trajectory(require(checkpoint_dir, man.at("trajectory").get<std::string>()));
  if (static_cast<int>(traj.size()) != in.dataset.num_frames())
    throw ConfigError("checkpoint trajectory length does not match the dataset");
  for (size_t i = 0; i < traj.size(); ++i) in.state.poses[i] = traj[i].pose;

  FrameDataset fd = make_frame_dataset(in);
  std::vector<int> test_idx = fd.test_indices();
  std::vector<Pose> test_poses;
  for (int i : test_idx) test_poses.push_back(fd.frames[i].pose);
  if (refine_poses && !test_idx.empty())
    test_poses = refine_test_poses(cloud, fd, test_idx, cfg);

  fs::create_directories(out_dir);
  Json out_man;
  out_man["kind"] = "renders";
  out_man["checkpoint_manifest"] =
      fs::relative(checkpoint_dir / "manifest.json", out_dir).string();
  out_man["mode"] = mode_name;
  Json renders = Json::array();
  std::vector<TrajectoryEntry> test_traj;
  for (size_t k = 0; k < test_idx.size(); ++k) {
    int i = test_idx[k];
    RenderedImage img = render(cloud, test_poses[k], fd.intr, mode);
    Json rj;
    rj["index"] = i;
    rj["image"] = index_name("render", i, "ppm");
    write_ppm((out_dir / rj["image"].get<std::string>()).string(), img.color);
    renders.push_back(rj);
    test_traj.push_back({fd.frames[i].timestamp, test_poses[k]});
  }
  out_man["renders"] = renders;
  out_man["test_trajectory"] = "trajectory_test.txt";
  write_trajectory((out_dir / "trajectory_test.txt").string(), test_traj);
  save_json(out_dir / "manifest.json", out_man);
}

inline void cmd_eval(const fs::path& renders_dir, const fs::path& out_dir,
                     double mask_threshold) {
  using namespace pipeline_detail;
  Json rman = load_json(renders_dir / "manifest.json");
  if (rman.value("kind", "") != "renders")
    throw ConfigError((renders_dir / "manifest.json").string() + ": expected a renders manifest");
  fs::path checkpoint_dir =
      (renders_dir / rman.at("checkpoint_manifest").get<std::string>()).parent_path();
  Json cman = load_json(checkpoint_dir / "manifest.json");
  fs::path aligned_dir =
      (checkpoint_dir / cman.at("aligned_manifest").get<std::string>()).parent_path();
  AlignedInputs in = load_aligned(aligned_dir.lexically_normal());
  const Dataset& ds = in.dataset;
  if (!ds.has_ground_truth() || ds.static_rgb.empty())
    throw ConfigError("eval requires a dataset with ground-truth poses and static renders");

  auto est_traj = read_trajectory(require(checkpoint_dir, cman.at("trajectory").get<std::string>()));
  std::vector<Pose> est_poses;
  for (const auto& e : est_traj) est_poses.push_back(e.pose);
  TrajectoryMetrics tm = trajectory_metrics(est_poses, ds.gt_poses);

  fs::create_directories(out_dir);
  std::ofstream csv(out_dir / "metrics.csv");
  if (!csv) throw IoError("cannot write metrics.csv");
  csv << "sequence,psnr,ssim,iou,ate,rpe_trans,rpe_rot\n";
  std::ostringstream txt;
  char buf[256];
  for (const Json& rj : rman.at("renders")) {
    int i = rj.at("index").get<int>();
    if (i < 0 || i >= ds.num_frames())
      throw ConfigError("render index " + std::to_string(i) + " outside the dataset");
    Image rendered = read_ppm(require(renders_dir, rj.at("image").get<std::string>()));
    double psnr = masked_psnr(rendered, ds.static_rgb[i], ds.gt_masks[i].values, mask_threshold);
    double ssim = ssim_index(rendered, ds.static_rgb[i]);
    double iou = mask_iou(in.frame_masks[i], ds.gt_masks[i]);
    std::snprintf(buf, sizeof(buf), "frame_%05d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", i, psnr, ssim,
                  iou, tm.ate_rmse, tm.rpe_trans_rmse, tm.rpe_rot_rmse_deg);
    csv << buf;
    txt << buf;
  }
  save_text(out_dir / "metrics.txt", txt.str());
}

}  // namespace stillsplat
