#pragma once

#include "stillsplat/align.hpp"
#include "stillsplat/core.hpp"
#include "stillsplat/splat.hpp"
#include "stillsplat/ssim.hpp"

#include <array>
#include <unordered_map>

namespace stillsplat {

enum class ImageLossForm { Masked, MaskedTarget };

struct TrainConfig {
  int iterations = 4000;
  double lr_mu = 1.6e-4;  // multiplied by scene extent
  double lr_opacity = 0.05;
  double lr_staticness = 0.05;
  double lr_pose_rot = 1e-4;
  double lr_pose_trans = 1e-3;
  double lambda_ssim = 0.2;
  double confidence_percentile = 50.0;
  ImageLossForm loss_form = ImageLossForm::Masked;
  bool refine_poses = false;
  bool optimize_staticness = true;
  int test_pose_iterations = 200;
  uint64_t seed = 0;

  void validate() const {
    if (iterations < 0) throw std::invalid_argument("TrainConfig: iterations must be >= 0");
    if (lambda_ssim < 0) throw std::invalid_argument("TrainConfig: lambda_ssim must be >= 0");
  }
};

struct FrameData {
  double timestamp = 0;
  Image rgb;
  Pose pose;
  StaticnessMap staticness;
  bool is_test = false;
};

struct FrameDataset {
  Intrinsics intr;
  std::vector<FrameData> frames;

  std::vector<int> train_indices() const {
    std::vector<int> out;
    for (int i = 0; i < static_cast<int>(frames.size()); ++i)
      if (!frames[i].is_test) out.push_back(i);
    return out;
  }
  std::vector<int> test_indices() const {
    std::vector<int> out;
    for (int i = 0; i < static_cast<int>(frames.size()); ++i)
      if (frames[i].is_test) out.push_back(i);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Cloud initialization: one Gaussian per confidence-surviving pixel; opacity
// 1/N, staticness = 1 - M at the source pixel, isotropic scale from the mean
// distance to the 3 nearest surviving neighbors.
// ---------------------------------------------------------------------------

namespace trainer_detail {

// exact k-NN over a uniform hash grid with expanding ring search
inline std::vector<double> mean_knn_distance(const std::vector<Vec3>& pts, int k) {
  int n = static_cast<int>(pts.size());
  std::vector<double> out(n, 1e-3);
  if (n <= 1) return out;
  Vec3 lo = pts[0], hi = pts[0];
  for (const auto& p : pts) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  double diag = (hi - lo).norm();
  double cell = std::max(1e-9, diag / std::cbrt(static_cast<double>(n)) * 0.7);
  auto cell_of = [&](const Vec3& p) {
    return std::array<long, 3>{static_cast<long>(std::floor((p.x() - lo.x()) / cell)),
                               static_cast<long>(std::floor((p.y() - lo.y()) / cell)),
                               static_cast<long>(std::floor((p.z() - lo.z()) / cell))};
  };
  auto hash = [](const std::array<long, 3>& c) {
    return static_cast<size_t>(c[0] * 73856093L ^ c[1] * 19349663L ^ c[2] * 83492791L);
  };
  std::unordered_map<size_t, std::vector<int>> buckets;
  for (int i = 0; i < n; ++i) buckets[hash(cell_of(pts[i]))].push_back(i);

  parallel_chunks(n, 4096, [&](int, int begin, int end) {
    std::vector<double> best;
    for (int i = begin; i < end; ++i) {
      best.clear();
      auto c0 = cell_of(pts[i]);
      for (int ring = 0;; ++ring) {
        for (long dz = -ring; dz <= ring; ++dz)
          for (long dy = -ring; dy <= ring; ++dy)
            for (long dx = -ring; dx <= ring; ++dx) {
              if (std::max({std::labs(dx), std::labs(dy), std::labs(dz)}) != ring) continue;
              auto it = buckets.find(hash({c0[0] + dx, c0[1] + dy, c0[2] + dz}));
              if (it == buckets.end()) continue;
              for (int j : it->second) {
                if (j == i) continue;
                // guard against hash collisions mapping far cells together
                auto cj = cell_of(pts[j]);
                if (std::max({std::labs(cj[0] - c0[0]), std::labs(cj[1] - c0[1]),
                              std::labs(cj[2] - c0[2])}) != ring)
                  continue;
                best.push_back((pts[j] - pts[i]).norm());
              }
            }
        std::sort(best.begin(), best.end());
        if (best.size() > 32) best.resize(32);
        // the k-th neighbor is final once the unsearched shell is farther away
        if (static_cast<int>(best.size()) >= k && best[k - 1] <= ring * cell) break;
        if (ring > 2 && best.size() >= static_cast<size_t>(k)) break;  // safety cap
        if (ring * cell > diag && !best.empty()) break;
        if (ring * cell > 2 * diag) break;
      }
      double sum = 0;
      int cnt = std::min<int>(k, static_cast<int>(best.size()));
      for (int j = 0; j < cnt; ++j) sum += best[j];
      out[i] = cnt > 0 ? sum / cnt : 1e-3;
    }
  });
  return out;
}

}  // namespace trainer_detail

inline GaussianCloud init_cloud(const AlignState& state, const std::vector<Image>& rgb,
                                const std::vector<GridF>& confidences,
                                const std::vector<FrameMask>& frame_masks,
                                const TrainConfig& cfg) {
  cfg.validate();
  int N = state.num_frames();
  if (N < 2) throw std::invalid_argument("init_cloud: need at least 2 frames");
  if (static_cast<int>(rgb.size()) != N || static_cast<int>(confidences.size()) != N ||
      static_cast<int>(frame_masks.size()) != N)
    throw std::invalid_argument("init_cloud: per-frame input count mismatch");

  std::vector<double> all_conf;
  for (const auto& c : confidences)
    all_conf.insert(all_conf.end(), c.data(), c.data() + c.size());
  size_t rank = std::min(all_conf.size() - 1,
                         static_cast<size_t>(cfg.confidence_percentile / 100.0 * all_conf.size()));
  std::nth_element(all_conf.begin(), all_conf.begin() + rank, all_conf.end());
  double thr = all_conf[rank];
  bool strict = cfg.confidence_percentile >= 100.0;

  GaussianCloud cloud;
  double opacity_logit = logit(1.0 / N);
  for (int t = 0; t < N; ++t) {
    Pointmap world = state.global_pointmap(t);
    for (int i = 0; i < static_cast<int>(world.points.size()); ++i) {
      double c = confidences[t][i];
      if (strict ? !(c > thr) : !(c >= thr)) continue;
      Gaussian g;
      g.mu = world.points[i];
      g.color = rgb[t][i];
      g.opacity_logit = opacity_logit;
      // lower clamp keeps the logit finite for fully dynamic pixels; the upper
      // clamp is much tighter so a fully static pixel renders indistinguishably
      // from plain mode
      double s = std::clamp(1.0 - frame_masks[t].values[i], kStaticnessClamp, 1.0 - 1e-12);
      g.staticness_logit = logit(s);
      g.source_frame = t;
      g.source_pixel = i;
      cloud.gaussians.push_back(g);
    }
  }
  if (cloud.empty()) throw std::invalid_argument("init_cloud: confidence filter left no points");

  std::vector<Vec3> pts(cloud.size());
  for (size_t i = 0; i < cloud.size(); ++i) pts[i] = cloud.gaussians[i].mu;
  std::vector<double> d3 = trainer_detail::mean_knn_distance(pts, 3);
  for (size_t i = 0; i < cloud.size(); ++i)
    cloud.gaussians[i].log_scale = Vec3::Constant(std::log(std::max(1e-9, d3[i])));
  return cloud;
}

// ---------------------------------------------------------------------------
// Image loss (L1 part). Masked form (default): mean of S * |I_r - I_gt|.
// Masked-target form: mean of |I_r - S * I_gt|.
// ---------------------------------------------------------------------------

inline double loss_image(const Image& rendered, const Image& gt, const StaticnessMap& S,
                         ImageLossForm form, Image* d_rendered = nullptr) {
  if (!rendered.same_shape(gt) || rendered.height() != S.values.height() ||
      rendered.width() != S.values.width())
    throw std::invalid_argument("loss_image: shape mismatch");
  double total = 0;
  double inv = 1.0 / (3.0 * rendered.size());
  for (size_t i = 0; i < rendered.size(); ++i) {
    double s = S.values[i];
    for (int ch = 0; ch < 3; ++ch) {
      double r = form == ImageLossForm::Masked ? rendered[i][ch] - gt[i][ch]
                                               : rendered[i][ch] - s * gt[i][ch];
      double w = form == ImageLossForm::Masked ? s : 1.0;
      total += w * std::abs(r);
      if (d_rendered)
        (*d_rendered)[i][ch] += w * (r > 0 ? 1.0 : (r < 0 ? -1.0 : 0.0)) * inv;
    }
  }
  return total * inv;  // mean over pixels and channels
}

struct TrainDivergence : std::runtime_error {
  int iteration;
  explicit TrainDivergence(int it)
      : std::runtime_error("training loss became non-finite at iteration " + std::to_string(it)),
        iteration(it) {}
};

struct TrainTraceRow {
  int iteration = 0;
  double total = 0, l1 = 0, ssim = 0;
};

struct TrainResult {
  GaussianCloud cloud;
  std::vector<Pose> poses;  // per dataset frame; refined where applicable
  std::vector<TrainTraceRow> trace;
};

namespace trainer_detail {

struct Adam {
  std::vector<double> m, v;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int t = 0;

  explicit Adam(size_t n) : m(n, 0.0), v(n, 0.0) {}

  void step(std::vector<double>& params, const std::vector<double>& grads, double lr) {
    ++t;
    double b1t = 1.0 - std::pow(beta1, t), b2t = 1.0 - std::pow(beta2, t);
    for (size_t i = 0; i < params.size(); ++i) {
      m[i] = beta1 * m[i] + (1 - beta1) * grads[i];
      v[i] = beta2 * v[i] + (1 - beta2) * grads[i] * grads[i];
      params[i] -= lr * (m[i] / b1t) / (std::sqrt(v[i] / b2t) + eps);
    }
  }
};

inline double scene_extent(const GaussianCloud& cloud) {
  Vec3 lo = cloud.gaussians[0].mu, hi = lo;
  for (const auto& g : cloud.gaussians) {
    lo = lo.cwiseMin(g.mu);
    hi = hi.cwiseMax(g.mu);
  }
  return std::max(1e-6, 0.5 * (hi - lo).norm());
}

}  // namespace trainer_detail

inline TrainResult train(GaussianCloud cloud, const FrameDataset& dataset, const TrainConfig& cfg) {
  cfg.validate();
  if (cloud.empty()) throw std::invalid_argument("train: empty cloud");
  auto train_idx = dataset.train_indices();
  if (train_idx.empty()) throw std::invalid_argument("train: empty train split");

  TrainResult result;
  result.poses.resize(dataset.frames.size());
  for (size_t i = 0; i < dataset.frames.size(); ++i) result.poses[i] = dataset.frames[i].pose;

  size_t n = cloud.size();
  std::vector<double> p_mu(n * 3), p_op(n), p_st(n);
  for (size_t i = 0; i < n; ++i) {
    for (int k = 0; k < 3; ++k) p_mu[i * 3 + k] = cloud.gaussians[i].mu[k];
    p_op[i] = cloud.gaussians[i].opacity_logit;
    p_st[i] = cloud.gaussians[i].staticness_logit;
  }
  trainer_detail::Adam adam_mu(n * 3), adam_op(n), adam_st(n);
  double lr_mu = cfg.lr_mu * trainer_detail::scene_extent(cloud);

  std::vector<trainer_detail::Adam> adam_pose;
  std::vector<std::vector<double>> p_pose;
  if (cfg.refine_poses) {
    adam_pose.assign(dataset.frames.size(), trainer_detail::Adam(7));
    p_pose.resize(dataset.frames.size());
    for (size_t i = 0; i < dataset.frames.size(); ++i) {
      const Pose& p = result.poses[i];
      p_pose[i] = {p.rotation.w(), p.rotation.x(), p.rotation.y(), p.rotation.z(),
                   p.translation.x(), p.translation.y(), p.translation.z()};
    }
  }

  Rng rng(cfg.seed);
  std::vector<double> g_mu(n * 3), g_op(n), g_st(n);

  for (int it = 0; it < cfg.iterations; ++it) {
    int fi = train_idx[rng.uniform_int(0, static_cast<int>(train_idx.size()) - 1)];
    const FrameData& frame = dataset.frames[fi];
    const Pose& pose = result.poses[fi];

    RenderedImage rendered = render(cloud, pose, dataset.intr, RenderMode::Staticness);
    Image upstream(dataset.intr.height, dataset.intr.width, Vec3::Zero());
    double l1 = loss_image(rendered.color, frame.rgb, frame.staticness, cfg.loss_form, &upstream);
    double lssim = 0;
    if (cfg.lambda_ssim > 0) {
      Image ssim_grad(dataset.intr.height, dataset.intr.width, Vec3::Zero());
      if (cfg.loss_form == ImageLossForm::Masked) {
        lssim = weighted_ssim_loss(rendered.color, frame.rgb, frame.staticness.values, &ssim_grad);
      } else {
        Image target = frame.rgb;
        for (size_t i = 0; i < target.size(); ++i) target[i] *= frame.staticness.values[i];
        GridF ones(dataset.intr.height, dataset.intr.width, 1.0);
        lssim = weighted_ssim_loss(rendered.color, target, ones, &ssim_grad);
      }
      for (size_t i = 0; i < upstream.size(); ++i) upstream[i] += cfg.lambda_ssim * ssim_grad[i];
    }
    double total = l1 + cfg.lambda_ssim * lssim;
    if (!std::isfinite(total)) throw TrainDivergence(it);
    result.trace.push_back({it, total, l1, lssim});

    RenderGradients grads =
        render_backward(cloud, pose, dataset.intr, RenderMode::Staticness, upstream);

    for (size_t i = 0; i < n; ++i) {
      for (int k = 0; k < 3; ++k) g_mu[i * 3 + k] = grads.cloud.mu[i][k];
      g_op[i] = grads.cloud.opacity_logit[i];
      g_st[i] = cfg.optimize_staticness ? grads.cloud.staticness_logit[i] : 0.0;
    }
    adam_mu.step(p_mu, g_mu, lr_mu);
    adam_op.step(p_op, g_op, cfg.lr_opacity);
    if (cfg.optimize_staticness) adam_st.step(p_st, g_st, cfg.lr_staticness);
    for (size_t i = 0; i < n; ++i) {
      for (int k = 0; k < 3; ++k) cloud.gaussians[i].mu[k] = p_mu[i * 3 + k];
      cloud.gaussians[i].opacity_logit = p_op[i];
      cloud.gaussians[i].staticness_logit = p_st[i];
    }

    if (cfg.refine_poses) {
      std::vector<double> gp = {grads.pose.rotation[0] * cfg.lr_pose_rot / cfg.lr_pose_trans,
                                grads.pose.rotation[1] * cfg.lr_pose_rot / cfg.lr_pose_trans,
                                grads.pose.rotation[2] * cfg.lr_pose_rot / cfg.lr_pose_trans,
                                grads.pose.rotation[3] * cfg.lr_pose_rot / cfg.lr_pose_trans,
                                grads.pose.translation[0], grads.pose.translation[1],
                                grads.pose.translation[2]};
      adam_pose[fi].step(p_pose[fi], gp, cfg.lr_pose_trans);
      Pose& p = result.poses[fi];
      p.rotation = Quat(p_pose[fi][0], p_pose[fi][1], p_pose[fi][2], p_pose[fi][3]);
      p.rotation.normalize();
      p_pose[fi][0] = p.rotation.w();
      p_pose[fi][1] = p.rotation.x();
      p_pose[fi][2] = p.rotation.y();
      p_pose[fi][3] = p.rotation.z();
      p.translation = Vec3(p_pose[fi][4], p_pose[fi][5], p_pose[fi][6]);
    }
  }

  result.cloud = std::move(cloud);
  return result;
}

// Optimizes only the given test frames' poses against the image loss, all
// Gaussian parameters frozen.
inline std::vector<Pose> refine_test_poses(const GaussianCloud& cloud, const FrameDataset& dataset,
                                           const std::vector<int>& test_indices,
                                           const TrainConfig& cfg) {
  cfg.validate();
  std::vector<Pose> out;
  for (int fi : test_indices) {
    const FrameData& frame = dataset.frames[fi];
    Pose pose = frame.pose;
    trainer_detail::Adam adam(7);
    std::vector<double> p = {pose.rotation.w(), pose.rotation.x(), pose.rotation.y(),
                             pose.rotation.z(), pose.translation.x(), pose.translation.y(),
                             pose.translation.z()};
    for (int it = 0; it < cfg.test_pose_iterations; ++it) {
      RenderedImage rendered = render(cloud, pose, dataset.intr, RenderMode::Staticness);
      Image upstream(dataset.intr.height, dataset.intr.width, Vec3::Zero());
      double l1 =
          loss_image(rendered.color, frame.rgb, frame.staticness, cfg.loss_form, &upstream);
      double lssim = 0;
      if (cfg.lambda_ssim > 0) {
        Image ssim_grad(dataset.intr.height, dataset.intr.width, Vec3::Zero());
        lssim = weighted_ssim_loss(rendered.color, frame.rgb, frame.staticness.values, &ssim_grad);
        for (size_t i = 0; i < upstream.size(); ++i) upstream[i] += cfg.lambda_ssim * ssim_grad[i];
      }
      double total = l1 + cfg.lambda_ssim * lssim;
      if (!std::isfinite(total)) throw TrainDivergence(it);
      // already at a fixed point: the L1 subgradient has unit magnitude for
      // any nonzero residual, so further steps would only jitter the pose at
      // the learning-rate scale
      if (total < 1e-12) break;
      RenderGradients grads =
          render_backward(cloud, pose, dataset.intr, RenderMode::Staticness, upstream);
      std::vector<double> gp = {grads.pose.rotation[0] * cfg.lr_pose_rot / cfg.lr_pose_trans,
                                grads.pose.rotation[1] * cfg.lr_pose_rot / cfg.lr_pose_trans,
                                grads.pose.rotation[2] * cfg.lr_pose_rot / cfg.lr_pose_trans,
                                grads.pose.rotation[3] * cfg.lr_pose_rot / cfg.lr_pose_trans,
                                grads.pose.translation[0], grads.pose.translation[1],
                                grads.pose.translation[2]};
      adam.step(p, gp, cfg.lr_pose_trans);
      pose.rotation = Quat(p[0], p[1], p[2], p[3]);
      pose.rotation.normalize();
      p[0] = pose.rotation.w();
      p[1] = pose.rotation.x();
      p[2] = pose.rotation.y();
      p[3] = pose.rotation.z();
      pose.translation = Vec3(p[4], p[5], p[6]);
    }
    out.push_back(pose);
  }
  return out;
}

// Optional export filter: drop low-staticness Gaussians.
inline GaussianCloud prune_by_staticness(const GaussianCloud& cloud, double tau) {
  GaussianCloud out;
  for (const auto& g : cloud.gaussians)
    if (g.staticness() >= tau) out.gaussians.push_back(g);
  return out;
}

}  // namespace stillsplat
