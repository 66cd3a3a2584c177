#pragma once

#include "stillsplat/core.hpp"
#include "stillsplat/geometry.hpp"
#include "stillsplat/io.hpp"

#include <fstream>
#include <numeric>

namespace stillsplat {

constexpr double kStaticnessClamp = 1e-4;
constexpr double kAlphaClamp = 0.999;
constexpr double kEarlyStopTransmittance = 1e-4;
constexpr double kCovBlur = 0.3;  // px^2 added to the projected covariance diagonal

struct Gaussian {
  Vec3 mu = Vec3::Zero();
  Vec3 log_scale = Vec3::Zero();
  Vec4 rotation = Vec4(1, 0, 0, 0);  // (w,x,y,z), normalized inside all math
  Vec3 color = Vec3::Zero();
  double opacity_logit = 0.0;
  double staticness_logit = 0.0;
  int source_frame = -1;
  int source_pixel = -1;

  double opacity() const { return sigmoid(opacity_logit); }
  // No clamp needed: the alpha clamp already keeps eff = s * a <= 0.999, so
  // the backward's 1/(1 - eff) stays finite, and at the sigmoid extremes the
  // staticness gradient vanishes on its own.
  double staticness() const { return sigmoid(staticness_logit); }
  Mat3 covariance() const {
    Mat3 R = quat_to_matrix(rotation);
    Vec3 d = (2.0 * log_scale).array().exp();
    return R * d.asDiagonal() * R.transpose();
  }
};

struct GaussianCloud {
  std::vector<Gaussian> gaussians;

  size_t size() const { return gaussians.size(); }
  bool empty() const { return gaussians.empty(); }
};

enum class RenderMode { Plain, Staticness };

struct RenderedImage {
  Image color;
  GridF transmittance;  // remaining background weight per pixel
};

struct ProjectedGaussian {
  bool visible = false;
  Vec2 mean2d = Vec2::Zero();
  Mat2 cov2d = Mat2::Zero();      // includes the +0.3 px^2 blur
  Mat2 cov2d_inv = Mat2::Zero();
  double depth = 0;
  double radius = 0;              // 3 projected standard deviations
  // cached for the backward pass
  Vec3 x_cam = Vec3::Zero();
  Mat3 sigma_cam = Mat3::Zero();
};

// EWA-style perspective linearization: cov2d = J W Sigma W^T J^T + 0.3 I,
// J the projection Jacobian at mu, W the world-to-camera rotation.
inline ProjectedGaussian project_gaussian(const Gaussian& g, const Pose& pose,
                                          const Intrinsics& intr) {
  ProjectedGaussian out;
  Vec4 q(pose.rotation.w(), pose.rotation.x(), pose.rotation.y(), pose.rotation.z());
  Mat3 A = quat_to_matrix(q).transpose();  // world -> camera
  Vec3 xc = A * (g.mu - pose.translation);
  if (xc.z() <= kNearPlane) return out;  // culled

  double x = xc.x(), y = xc.y(), z = xc.z();
  Eigen::Matrix<double, 2, 3> J;
  J << intr.fx / z, 0, -intr.fx * x / (z * z),
       0, intr.fy / z, -intr.fy * y / (z * z);

  Mat3 sigma_cam = A * g.covariance() * A.transpose();
  Mat2 V = J * sigma_cam * J.transpose();
  V(0, 0) += kCovBlur;
  V(1, 1) += kCovBlur;

  out.visible = true;
  out.x_cam = xc;
  out.sigma_cam = sigma_cam;
  out.depth = z;
  out.mean2d = Vec2(intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy);
  out.cov2d = V;
  double det = V.determinant();
  out.cov2d_inv = V.inverse();
  double tr = V.trace();
  double lam_max = 0.5 * (tr + std::sqrt(std::max(0.0, tr * tr - 4.0 * det)));
  out.radius = 3.0 * std::sqrt(lam_max);
  return out;
}

namespace detail {

constexpr int kTileSize = 16;

struct RenderPlan {
  std::vector<ProjectedGaussian> proj;      // indexed by gaussian
  std::vector<int> order;                   // visible gaussians, front-to-back
  std::vector<std::vector<int>> tile_lists; // positions into `order`, per tile
  int tiles_x = 0, tiles_y = 0;
};

inline RenderPlan build_render_plan(const GaussianCloud& cloud, const Pose& pose,
                                    const Intrinsics& intr) {
  RenderPlan plan;
  int n = static_cast<int>(cloud.size());
  plan.proj.resize(n);
  parallel_chunks(n, 2048, [&](int, int begin, int end) {
    for (int i = begin; i < end; ++i)
      plan.proj[i] = project_gaussian(cloud.gaussians[i], pose, intr);
  });

  plan.order.reserve(n);
  for (int i = 0; i < n; ++i)
    if (plan.proj[i].visible) plan.order.push_back(i);
  std::stable_sort(plan.order.begin(), plan.order.end(), [&](int a, int b) {
    if (plan.proj[a].depth != plan.proj[b].depth) return plan.proj[a].depth < plan.proj[b].depth;
    return a < b;
  });

  plan.tiles_x = (intr.width + kTileSize - 1) / kTileSize;
  plan.tiles_y = (intr.height + kTileSize - 1) / kTileSize;
  plan.tile_lists.resize(static_cast<size_t>(plan.tiles_x) * plan.tiles_y);
  for (int pos = 0; pos < static_cast<int>(plan.order.size()); ++pos) {
    const ProjectedGaussian& pg = plan.proj[plan.order[pos]];
    int x0 = std::max(0, static_cast<int>(std::floor((pg.mean2d.x() - pg.radius) / kTileSize)));
    int x1 = std::min(plan.tiles_x - 1,
                      static_cast<int>(std::floor((pg.mean2d.x() + pg.radius) / kTileSize)));
    int y0 = std::max(0, static_cast<int>(std::floor((pg.mean2d.y() - pg.radius) / kTileSize)));
    int y1 = std::min(plan.tiles_y - 1,
                      static_cast<int>(std::floor((pg.mean2d.y() + pg.radius) / kTileSize)));
    if (pg.mean2d.x() + pg.radius < 0 || pg.mean2d.y() + pg.radius < 0) continue;
    for (int ty = y0; ty <= y1; ++ty)
      for (int tx = x0; tx <= x1; ++tx)
        plan.tile_lists[static_cast<size_t>(ty) * plan.tiles_x + tx].push_back(pos);
  }
  return plan;
}

// Per-sample opacity: a = min(0.999, alpha * G); eff = s * a in staticness
// mode. Returns eff and fills the pieces the backward pass reuses.
struct SampleEval {
  double G = 0;
  double a = 0;        // alpha * G before clamping
  double a_clamped = 0;
  double eff = 0;
  Vec2 d = Vec2::Zero();
};

inline SampleEval eval_sample(const ProjectedGaussian& pg, const Gaussian& g, double px,
                              double py, RenderMode mode) {
  SampleEval s;
  s.d = Vec2(px, py) - pg.mean2d;
  double e = s.d.dot(pg.cov2d_inv * s.d);
  s.G = std::exp(-0.5 * e);
  s.a = g.opacity() * s.G;
  s.a_clamped = std::min(kAlphaClamp, s.a);
  s.eff = mode == RenderMode::Staticness ? g.staticness() * s.a_clamped : s.a_clamped;
  return s;
}

}  // namespace detail

inline RenderedImage render(const GaussianCloud& cloud, const Pose& pose, const Intrinsics& intr,
                            RenderMode mode = RenderMode::Plain) {
  if (cloud.empty()) throw std::invalid_argument("render: empty cloud");
  using namespace detail;
  RenderPlan plan = build_render_plan(cloud, pose, intr);

  RenderedImage out;
  out.color = Image(intr.height, intr.width, Vec3::Zero());
  out.transmittance = GridF(intr.height, intr.width, 1.0);

  int num_tiles = plan.tiles_x * plan.tiles_y;
  parallel_chunks(num_tiles, 1, [&](int, int tile_begin, int tile_end) {
    for (int tile = tile_begin; tile < tile_end; ++tile) {
      const auto& list = plan.tile_lists[tile];
      if (list.empty()) continue;
      int tx = tile % plan.tiles_x, ty = tile / plan.tiles_x;
      int px0 = tx * kTileSize, py0 = ty * kTileSize;
      int px1 = std::min(intr.width, px0 + kTileSize);
      int py1 = std::min(intr.height, py0 + kTileSize);
      for (int py = py0; py < py1; ++py) {
        for (int px = px0; px < px1; ++px) {
          Vec3 c = Vec3::Zero();
          double T = 1.0;
          for (int pos : list) {
            int gi = plan.order[pos];
            const ProjectedGaussian& pg = plan.proj[gi];
            if (std::abs(px - pg.mean2d.x()) > pg.radius ||
                std::abs(py - pg.mean2d.y()) > pg.radius)
              continue;
            SampleEval s = eval_sample(pg, cloud.gaussians[gi], px, py, mode);
            c += cloud.gaussians[gi].color * (s.eff * T);
            T *= (1.0 - s.eff);
            if (T < kEarlyStopTransmittance) break;
          }
          out.color.at(py, px) = c;
          out.transmittance.at(py, px) = T;
        }
      }
    }
  });
  return out;
}

struct CloudGradients {
  std::vector<Vec3> mu, log_scale, color;
  std::vector<Vec4> rotation;
  std::vector<double> opacity_logit, staticness_logit;

  explicit CloudGradients(size_t n)
      : mu(n, Vec3::Zero()),
        log_scale(n, Vec3::Zero()),
        color(n, Vec3::Zero()),
        rotation(n, Vec4::Zero()),
        opacity_logit(n, 0.0),
        staticness_logit(n, 0.0) {}
};

struct PoseGradient {
  Vec4 rotation = Vec4::Zero();  // w.r.t. raw stored quaternion (w,x,y,z)
  Vec3 translation = Vec3::Zero();
};

struct RenderGradients {
  CloudGradients cloud;
  PoseGradient pose;

  explicit RenderGradients(size_t n) : cloud(n) {}
};

// Analytic gradients of the forward render, including the staticness factor in
// both the blend weight and the transmittance product, and the pose via the
// projection.
inline RenderGradients render_backward(const GaussianCloud& cloud, const Pose& pose,
                                       const Intrinsics& intr, RenderMode mode,
                                       const Image& upstream) {
  if (cloud.empty()) throw std::invalid_argument("render_backward: empty cloud");
  if (upstream.height() != intr.height || upstream.width() != intr.width)
    throw std::invalid_argument("render_backward: upstream gradient shape mismatch");
  using namespace detail;
  RenderPlan plan = build_render_plan(cloud, pose, intr);

  // Stage A: per-pixel alpha-blend backward, accumulating per-gaussian
  // gradients w.r.t. the 2D mean, inverse 2D covariance, color, and the
  // opacity/staticness logits. Tiles run in parallel into per-tile buffers
  // which are merged in fixed tile order.
  struct ScreenGrad {
    Vec2 dmean = Vec2::Zero();
    Mat2 dcov_inv = Mat2::Zero();
    Vec3 dcolor = Vec3::Zero();
    double dopacity_logit = 0;
    double dstaticness_logit = 0;
  };

  int num_tiles = plan.tiles_x * plan.tiles_y;
  std::vector<std::vector<ScreenGrad>> tile_grads(num_tiles);

  parallel_chunks(num_tiles, 1, [&](int, int tile_begin, int tile_end) {
    for (int tile = tile_begin; tile < tile_end; ++tile) {
      const auto& list = plan.tile_lists[tile];
      if (list.empty()) continue;
      auto& local = tile_grads[tile];
      local.resize(list.size());
      int tx = tile % plan.tiles_x, ty = tile / plan.tiles_x;
      int px0 = tx * kTileSize, py0 = ty * kTileSize;
      int px1 = std::min(intr.width, px0 + kTileSize);
      int py1 = std::min(intr.height, py0 + kTileSize);
      for (int py = py0; py < py1; ++py) {
        for (int px = px0; px < px1; ++px) {
          const Vec3& dC = upstream.at(py, px);
          if (dC.isZero(0.0)) continue;

          // forward replay to get the pixel's total color
          Vec3 c_total = Vec3::Zero();
          {
            double T = 1.0;
            for (int li = 0; li < static_cast<int>(list.size()); ++li) {
              int gi = plan.order[list[li]];
              const ProjectedGaussian& pg = plan.proj[gi];
              if (std::abs(px - pg.mean2d.x()) > pg.radius ||
                  std::abs(py - pg.mean2d.y()) > pg.radius)
                continue;
              SampleEval s = eval_sample(pg, cloud.gaussians[gi], px, py, mode);
              c_total += cloud.gaussians[gi].color * (s.eff * T);
              T *= (1.0 - s.eff);
              if (T < kEarlyStopTransmittance) break;
            }
          }

          double T = 1.0;
          Vec3 accum = Vec3::Zero();
          for (int li = 0; li < static_cast<int>(list.size()); ++li) {
            int gi = plan.order[list[li]];
            const ProjectedGaussian& pg = plan.proj[gi];
            if (std::abs(px - pg.mean2d.x()) > pg.radius ||
                std::abs(py - pg.mean2d.y()) > pg.radius)
              continue;
            const Gaussian& g = cloud.gaussians[gi];
            SampleEval s = eval_sample(pg, g, px, py, mode);
            double w = s.eff * T;
            accum += g.color * w;
            Vec3 suffix = c_total - accum;  // contributions of later gaussians

            ScreenGrad& sg = local[li];
            sg.dcolor += dC * w;
            // d c_total / d eff_i = c_i T_i - suffix / (1 - eff_i)
            double deff = dC.dot(g.color) * T - dC.dot(suffix) / (1.0 - s.eff);

            double stat = g.staticness();
            double da_c;
            if (mode == RenderMode::Staticness) {
              da_c = deff * stat;
              sg.dstaticness_logit += deff * s.a_clamped * stat * (1.0 - stat);
            } else {
              da_c = deff;
            }
            if (s.a < kAlphaClamp) {
              double alpha = g.opacity();
              sg.dopacity_logit += da_c * s.G * alpha * (1.0 - alpha);
              double dG = da_c * alpha;
              Vec2 wd = pg.cov2d_inv * s.d;
              sg.dmean += dG * s.G * wd;
              sg.dcov_inv += dG * (-0.5 * s.G) * (s.d * s.d.transpose());
            }

            T *= (1.0 - s.eff);
            if (T < kEarlyStopTransmittance) break;
          }
        }
      }
    }
  });

  // fixed-order reduction over tiles
  std::vector<ScreenGrad> screen(plan.order.size());
  for (int tile = 0; tile < num_tiles; ++tile) {
    const auto& list = plan.tile_lists[tile];
    const auto& local = tile_grads[tile];
    for (size_t li = 0; li < local.size(); ++li) {
      ScreenGrad& dst = screen[list[li]];
      dst.dmean += local[li].dmean;
      dst.dcov_inv += local[li].dcov_inv;
      dst.dcolor += local[li].dcolor;
      dst.dopacity_logit += local[li].dopacity_logit;
      dst.dstaticness_logit += local[li].dstaticness_logit;
    }
  }
  tile_grads.clear();

  // Stage B: chain screen-space gradients through the projection to the 3D
  // parameters and the pose. Per-gaussian pose contributions are reduced in
  // gaussian order.
  RenderGradients out(cloud.size());
  Vec4 q_pose(pose.rotation.w(), pose.rotation.x(), pose.rotation.y(), pose.rotation.z());
  Mat3 A = quat_to_matrix(q_pose).transpose();  // world -> camera
  Eigen::Matrix<double, 9, 4> dR_dq_pose = quat_to_matrix_jacobian(q_pose);

  int n_vis = static_cast<int>(plan.order.size());
  std::vector<PoseGradient> pose_partials(n_vis);

  parallel_chunks(n_vis, 512, [&](int, int begin, int end) {
    for (int pos = begin; pos < end; ++pos) {
      int gi = plan.order[pos];
      const ScreenGrad& sg = screen[pos];
      const ProjectedGaussian& pg = plan.proj[gi];
      const Gaussian& g = cloud.gaussians[gi];

      out.cloud.color[gi] = sg.dcolor;
      out.cloud.opacity_logit[gi] = sg.dopacity_logit;
      out.cloud.staticness_logit[gi] = sg.dstaticness_logit;

      bool has_geom = !sg.dmean.isZero(0.0) || !sg.dcov_inv.isZero(0.0);
      if (!has_geom) continue;

      double x = pg.x_cam.x(), y = pg.x_cam.y(), z = pg.x_cam.z();
      Eigen::Matrix<double, 2, 3> J;
      J << intr.fx / z, 0, -intr.fx * x / (z * z),
           0, intr.fy / z, -intr.fy * y / (z * z);

      // inverse covariance -> covariance (W symmetric): dV = -W dW W
      Mat2 dV = -pg.cov2d_inv * sg.dcov_inv * pg.cov2d_inv;

      // V = J Sigma_c J^T + blur
      Mat3 dSigma_c = J.transpose() * dV * J;
      Eigen::Matrix<double, 2, 3> dJ =
          dV * J * pg.sigma_cam.transpose() + dV.transpose() * J * pg.sigma_cam;

      // mean2d and J both depend on x_cam
      Vec3 dx_cam = J.transpose() * sg.dmean;
      double z2 = z * z, z3 = z2 * z;
      dx_cam.x() += dJ(0, 2) * (-intr.fx / z2);
      dx_cam.y() += dJ(1, 2) * (-intr.fy / z2);
      dx_cam.z() += dJ(0, 0) * (-intr.fx / z2) + dJ(1, 1) * (-intr.fy / z2) +
                    dJ(0, 2) * (2.0 * intr.fx * x / z3) + dJ(1, 2) * (2.0 * intr.fy * y / z3);

      // Sigma_c = A Sigma_w A^T, x_cam = A (mu - T)
      Mat3 dSigma_w = A.transpose() * dSigma_c * A;
      Mat3 sigma_w = g.covariance();
      Mat3 dA = dSigma_c * A * sigma_w.transpose() + dSigma_c.transpose() * A * sigma_w;
      dA += dx_cam * (g.mu - pose.translation).transpose();

      out.cloud.mu[gi] = A.transpose() * dx_cam;
      Vec3 dT = -A.transpose() * dx_cam;

      // pose rotation R = A^T
      Mat3 dR_pose = dA.transpose();
      Vec4 dq_pose = Vec4::Zero();
      for (int k = 0; k < 4; ++k) {
        double acc = 0;
        for (int i = 0; i < 3; ++i)
          for (int j = 0; j < 3; ++j) acc += dR_pose(i, j) * dR_dq_pose(i * 3 + j, k);
        dq_pose[k] = acc;
      }
      pose_partials[pos].rotation = dq_pose;
      pose_partials[pos].translation = dT;

      // Sigma_w = Rg D Rg^T, D = diag(exp(2 ls))
      Mat3 Rg = quat_to_matrix(g.rotation);
      Vec3 dvec = (2.0 * g.log_scale).array().exp();
      Mat3 dD = Rg.transpose() * dSigma_w * Rg;
      for (int k = 0; k < 3; ++k) out.cloud.log_scale[gi][k] = dD(k, k) * 2.0 * dvec[k];
      Mat3 dRg = (dSigma_w + dSigma_w.transpose()) * Rg * dvec.asDiagonal();
      Eigen::Matrix<double, 9, 4> dRg_dq = quat_to_matrix_jacobian(g.rotation);
      for (int k = 0; k < 4; ++k) {
        double acc = 0;
        for (int i = 0; i < 3; ++i)
          for (int j = 0; j < 3; ++j) acc += dRg(i, j) * dRg_dq(i * 3 + j, k);
        out.cloud.rotation[gi][k] = acc;
      }
    }
  });

  for (const auto& pp : pose_partials) {
    out.pose.rotation += pp.rotation;
    out.pose.translation += pp.translation;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cloud serialization: ASCII header naming the per-record fields, followed by
// little-endian float64 records.
// ---------------------------------------------------------------------------

inline void write_cloud(const std::string& path, const GaussianCloud& cloud) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f << "stillsplat_cloud 1\n";
  f << "count " << cloud.size() << "\n";
  f << "fields position log_scale rotation color opacity_logit staticness_logit\n";
  f << "format binary_f64_le\n";
  f << "end_header\n";
  for (const auto& g : cloud.gaussians) {
    double rec[15] = {g.mu.x(), g.mu.y(), g.mu.z(),
                      g.log_scale.x(), g.log_scale.y(), g.log_scale.z(),
                      g.rotation[0], g.rotation[1], g.rotation[2], g.rotation[3],
                      g.color.x(), g.color.y(), g.color.z(),
                      g.opacity_logit, g.staticness_logit};
    f.write(reinterpret_cast<const char*>(rec), sizeof(rec));
  }
  if (!f) throw IoError("short write on " + path);
}

inline GaussianCloud read_cloud(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path);
  std::string line;
  size_t count = 0;
  bool header_ok = false;
  while (std::getline(f, line)) {
    if (line.rfind("count ", 0) == 0) count = std::stoull(line.substr(6));
    if (line == "end_header") {
      header_ok = true;
      break;
    }
  }
  if (!header_ok) throw IoError("bad cloud header in " + path);
  GaussianCloud cloud;
  cloud.gaussians.resize(count);
  for (auto& g : cloud.gaussians) {
    double rec[15];
    f.read(reinterpret_cast<char*>(rec), sizeof(rec));
    if (!f) throw IoError("truncated cloud file " + path);
    g.mu = Vec3(rec[0], rec[1], rec[2]);
    g.log_scale = Vec3(rec[3], rec[4], rec[5]);
    g.rotation = Vec4(rec[6], rec[7], rec[8], rec[9]);
    g.color = Vec3(rec[10], rec[11], rec[12]);
    g.opacity_logit = rec[13];
    g.staticness_logit = rec[14];
  }
  return cloud;
}

}  // namespace stillsplat
