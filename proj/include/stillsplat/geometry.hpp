#pragma once

#include "stillsplat/core.hpp"

namespace stillsplat {

// Camera-to-world rigid transform: x_world = R * x_cam + T.
struct Pose {
  Quat rotation = Quat::Identity();
  Vec3 translation = Vec3::Zero();

  static Pose identity() { return Pose{}; }

  void normalize() { rotation.normalize(); }

  Mat3 matrix() const { return rotation.toRotationMatrix(); }

  Vec3 apply(const Vec3& x_cam) const { return rotation * x_cam + translation; }

  Pose inverse() const {
    Pose inv;
    inv.rotation = rotation.conjugate();
    inv.translation = -(inv.rotation * translation);
    return inv;
  }

  // this ∘ other: first apply other, then this.
  Pose compose(const Pose& other) const {
    Pose out;
    out.rotation = rotation * other.rotation;
    out.rotation.normalize();
    out.translation = rotation * other.translation + translation;
    return out;
  }

  // Relative transform mapping other's camera frame into this pose's camera
  // frame: result = this^-1 ∘ other.
  Pose relative_to(const Pose& other) const { return inverse().compose(other); }
};

struct Intrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;

  Intrinsics() = default;
  Intrinsics(double fx_, double fy_, double cx_, double cy_, int w, int h)
      : fx(fx_), fy(fy_), cx(cx_), cy(cy_), width(w), height(h) {
    if (fx <= 0 || fy <= 0) throw std::invalid_argument("Intrinsics: focal must be positive");
    if (cx < 0 || cx >= w || cy < 0 || cy >= h)
      throw std::invalid_argument("Intrinsics: principal point outside image");
  }

  static Intrinsics centered(double focal, int w, int h) {
    return Intrinsics(focal, focal, 0.5 * (w - 1), 0.5 * (h - 1), w, h);
  }
};

struct DepthMap {
  GridF values;

  void validate() const {
    for (size_t i = 0; i < values.size(); ++i)
      if (!std::isfinite(values[i]) || values[i] <= 0.0)
        throw std::invalid_argument("DepthMap: non-positive or non-finite depth");
  }
};

enum class PointFrame { Camera, World };

struct Pointmap {
  Grid<Vec3> points;
  PointFrame frame = PointFrame::Camera;
};

struct FlowField {
  Grid<Vec2> uv;           // pixel displacement, zero where invalid
  Grid<uint8_t> valid;     // 1 = target projects in front of camera and inside image
};

inline Vec3 backproject(double u, double v, double depth, const Intrinsics& intr) {
  return depth * Vec3((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0);
}

// (u, v) pixel of a camera-frame point; caller checks z > 0.
inline Vec2 project(const Vec3& x_cam, const Intrinsics& intr) {
  return Vec2(intr.fx * x_cam.x() / x_cam.z() + intr.cx,
              intr.fy * x_cam.y() / x_cam.z() + intr.cy);
}

inline Pointmap depth_to_pointmap(const DepthMap& depth, const Intrinsics& intr) {
  depth.validate();
  Pointmap pm;
  pm.frame = PointFrame::Camera;
  pm.points = Grid<Vec3>(depth.values.height(), depth.values.width());
  for (int v = 0; v < depth.values.height(); ++v)
    for (int u = 0; u < depth.values.width(); ++u)
      pm.points.at(v, u) = backproject(u, v, depth.values.at(v, u), intr);
  return pm;
}

inline Pointmap transform_pointmap(const Pose& pose, const Pointmap& pm) {
  Pointmap out;
  out.frame = PointFrame::World;
  out.points = Grid<Vec3>(pm.points.height(), pm.points.width());
  Mat3 R = pose.matrix();
  for (size_t i = 0; i < pm.points.size(); ++i) out.points[i] = R * pm.points[i] + pose.translation;
  return out;
}

constexpr double kNearPlane = 0.01;

// Flow from frame t to frame t2 implied by frame-t depth and the two poses.
inline FlowField induced_flow(const DepthMap& depth_t, const Pose& pose_t, const Pose& pose_t2,
                              const Intrinsics& intr) {
  int H = depth_t.values.height(), W = depth_t.values.width();
  FlowField flow;
  flow.uv = Grid<Vec2>(H, W, Vec2::Zero());
  flow.valid = Grid<uint8_t>(H, W, 0);
  Pose rel = pose_t2.relative_to(pose_t);  // frame-t camera -> frame-t2 camera
  Mat3 R = rel.matrix();
  for (int v = 0; v < H; ++v) {
    for (int u = 0; u < W; ++u) {
      Vec3 xc = backproject(u, v, depth_t.values.at(v, u), intr);
      Vec3 xc2 = R * xc + rel.translation;
      if (xc2.z() <= kNearPlane) continue;
      Vec2 p2 = project(xc2, intr);
      if (p2.x() < 0 || p2.x() > intr.width - 1 || p2.y() < 0 || p2.y() > intr.height - 1)
        continue;
      flow.uv.at(v, u) = p2 - Vec2(u, v);
      flow.valid.at(v, u) = 1;
    }
  }
  return flow;
}

}  // namespace stillsplat
