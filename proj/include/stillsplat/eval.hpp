#pragma once

#include "stillsplat/core.hpp"
#include "stillsplat/geometry.hpp"

#include <iostream>

namespace stillsplat {

constexpr double kPsnrCap = 99.0;

// PSNR over pixels whose mask value is strictly below `threshold`, i.e. the
// static region. MSE is averaged over those pixels and channels; a perfect
// match reports the cap instead of infinity.
inline double masked_psnr(const Image& a, const Image& b, const GridF& mask,
                          double threshold = 0.5) {
  if (!a.same_shape(b) || a.height() != mask.height() || a.width() != mask.width())
    throw std::invalid_argument("masked_psnr: shape mismatch");
  double sq = 0;
  long count = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    if (!(mask[i] < threshold)) continue;
    sq += (a[i] - b[i]).squaredNorm();
    ++count;
  }
  if (count == 0) throw std::invalid_argument("masked_psnr: no static pixels under threshold");
  double mse = sq / (3.0 * count);
  if (mse <= 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

struct TrajectoryMetrics {
  double ate_rmse = 0;        // translation RMSE after similarity alignment
  double rpe_trans_rmse = 0;  // relative pose error, translation part
  double rpe_rot_rmse_deg = 0;
};

// Umeyama similarity alignment of estimated onto ground-truth positions, then
// ATE on the aligned positions and RPE between consecutive frames.
inline TrajectoryMetrics trajectory_metrics(const std::vector<Pose>& estimated,
                                            const std::vector<Pose>& ground_truth) {
  size_t n = estimated.size();
  if (n != ground_truth.size())
    throw std::invalid_argument("trajectory_metrics: trajectory length mismatch");
  if (n < 2) throw std::invalid_argument("trajectory_metrics: need at least 2 poses");

  Eigen::Matrix3Xd src(3, n), dst(3, n);
  for (size_t i = 0; i < n; ++i) {
    src.col(i) = estimated[i].translation;
    dst.col(i) = ground_truth[i].translation;
  }
  Eigen::Matrix4d sim = Eigen::umeyama(src, dst, true);
  Mat3 sR = sim.topLeftCorner<3, 3>();
  Vec3 t = sim.topRightCorner<3, 1>();
  double scale = std::cbrt(sR.determinant());
  Mat3 R = sR / scale;

  std::vector<Pose> aligned(n);
  for (size_t i = 0; i < n; ++i) {
    aligned[i].translation = sR * estimated[i].translation + t;
    aligned[i].rotation = Quat(R * estimated[i].matrix());
    aligned[i].rotation.normalize();
  }

  TrajectoryMetrics out;
  double ate_sq = 0;
  for (size_t i = 0; i < n; ++i)
    ate_sq += (aligned[i].translation - ground_truth[i].translation).squaredNorm();
  out.ate_rmse = std::sqrt(ate_sq / n);

  double tr_sq = 0, rot_sq = 0;
  for (size_t i = 0; i + 1 < n; ++i) {
    Pose d_est = aligned[i].relative_to(aligned[i + 1]);
    Pose d_gt = ground_truth[i].relative_to(ground_truth[i + 1]);
    tr_sq += (d_est.translation - d_gt.translation).squaredNorm();
    Quat dq = d_gt.rotation.conjugate() * d_est.rotation;
    double ang = 2.0 * std::atan2(dq.vec().norm(), std::abs(dq.w()));
    rot_sq += ang * ang;
  }
  out.rpe_trans_rmse = std::sqrt(tr_sq / (n - 1));
  out.rpe_rot_rmse_deg = std::sqrt(rot_sq / (n - 1)) * 180.0 / M_PI;
  return out;
}

// Every 10th frame starting at index 9 is held out for testing. Sequences
// shorter than 10 frames keep everything in training and warn.
inline std::vector<bool> split_frames(int num_frames) {
  if (num_frames <= 0) throw std::invalid_argument("split_frames: need at least 1 frame");
  std::vector<bool> is_test(num_frames, false);
  if (num_frames < 10) {
    std::cerr << "warning: only " << num_frames
              << " frames; keeping all frames in the training split\n";
    return is_test;
  }
  for (int i = 9; i < num_frames; i += 10) is_test[i] = true;
  return is_test;
}

}  // namespace stillsplat
