#pragma once

#include "stillsplat/core.hpp"
#include "stillsplat/geometry.hpp"
#include "stillsplat/masks.hpp"

#include <optional>

namespace stillsplat {

// ---------------------------------------------------------------------------
// Synthetic dynamic-video generator with exact ground truth. Rendering is
// plain per-pixel ray casting against analytic primitives, so the oracle
// shares no code with the Gaussian rasterizer it verifies.
// ---------------------------------------------------------------------------

struct Motion {
  enum class Kind { None, Linear, Circular } kind = Kind::None;
  Vec3 velocity = Vec3::Zero();   // Linear: offset = velocity * time
  Vec3 axis_u = Vec3::UnitX();    // Circular: offset = r*((cos wt - 1) u + sin wt * v)
  Vec3 axis_v = Vec3::UnitY();
  double radius = 0;
  double omega = 0;

  Vec3 offset(double time) const {
    switch (kind) {
      case Kind::None:
        return Vec3::Zero();
      case Kind::Linear:
        return velocity * time;
      case Kind::Circular:
        return radius * ((std::cos(omega * time) - 1.0) * axis_u +
                         std::sin(omega * time) * axis_v);
    }
    return Vec3::Zero();
  }
};

// Smooth low-frequency texture over local surface coordinates in [-1,1]^2.
struct Texture {
  Vec3 base = Vec3(0.5, 0.5, 0.5);
  Vec3 amplitude = Vec3(0.2, 0.2, 0.2);
  Vec3 freq = Vec3(1.0, 1.3, 0.7);
  Vec3 phase = Vec3(0, 2, 4);

  Vec3 sample(double a, double b) const {
    Vec3 c;
    for (int k = 0; k < 3; ++k)
      c[k] = clamp01(base[k] + amplitude[k] * std::sin(freq[k] * (a + 0.6 * b) * M_PI + phase[k]));
    return c;
  }
};

struct SceneObject {
  enum class Kind { Rect, Ellipsoid } kind = Kind::Rect;
  // Rect: center + edge vectors spanning [-1,1]^2 local coords.
  Vec3 center = Vec3::Zero();
  Vec3 edge_u = Vec3::UnitX();
  Vec3 edge_v = Vec3::UnitY();
  // Ellipsoid radii
  Vec3 radii = Vec3::Ones();
  Texture texture;
  bool dynamic = false;
  Motion motion;
};

struct CameraPathSpec {
  Vec3 base = Vec3(0, 0, 0);
  Vec3 amplitude = Vec3(0.8, 0.35, 0.5);
  Vec3 omega = Vec3(0.9, 1.3, 0.7);
  Vec3 look_target = Vec3(0, 0, 8.0);
  Vec3 look_wobble = Vec3(0.6, 0.4, 0.0);
};

struct SceneSpec {
  int width = 64, height = 64;
  int num_frames = 20;
  double focal = 60.0;
  double timestep = 0.1;
  double dynamic_coverage = 0.3;      // target mean fraction of dynamic pixels
  int num_dynamic_objects = 1;
  bool use_ellipsoid = false;          // second dynamic object shape
  std::vector<int> strides = {1, 2, 3};
  double pointmap_noise = 0.0;
  double mask_fp_rate = 0.0;
  double mask_fn_rate = 0.0;
  uint64_t seed = 1;
  CameraPathSpec camera;
};

struct SyntheticFrame {
  double timestamp = 0;
  Pose pose;
  Image rgb;
  Image static_rgb;  // dynamic objects removed; the background oracle
  DepthMap depth;
  FrameMask mask;
};

struct SyntheticEdge {
  int n = -1, m = -1;
  Pointmap x_nn, x_mn;  // both in frame n's camera coordinates
  GridF c_nn, c_mn;     // confidences, == 1 for the oracle
  PairMask mask;        // dynamic mask of frame n
  FlowField flow;       // estimated flow n -> m (exact GT, includes object motion)
};

struct SyntheticDataset {
  Intrinsics intr;
  std::vector<SyntheticFrame> frames;
  std::vector<SyntheticEdge> edges;
};

namespace synth_detail {

struct RayHit {
  double t_ray = std::numeric_limits<double>::infinity();
  Vec3 point = Vec3::Zero();
  Vec3 color = Vec3::Zero();
  int object = -1;
  bool dynamic = false;
};

inline bool intersect_rect(const Vec3& origin, const Vec3& dir, const SceneObject& obj,
                           const Vec3& shift, RayHit& hit) {
  Vec3 c = obj.center + shift;
  Vec3 n = obj.edge_u.cross(obj.edge_v);
  double denom = dir.dot(n);
  if (std::abs(denom) < 1e-12) return false;
  double s = (c - origin).dot(n) / denom;
  if (s <= 1e-6 || s >= hit.t_ray) return false;
  Vec3 p = origin + s * dir;
  Vec3 rel = p - c;
  double a = rel.dot(obj.edge_u) / obj.edge_u.squaredNorm();
  double b = rel.dot(obj.edge_v) / obj.edge_v.squaredNorm();
  if (std::abs(a) > 1.0 || std::abs(b) > 1.0) return false;
  hit.t_ray = s;
  hit.point = p;
  hit.color = obj.texture.sample(a, b);
  return true;
}

inline bool intersect_ellipsoid(const Vec3& origin, const Vec3& dir, const SceneObject& obj,
                                const Vec3& shift, RayHit& hit) {
  Vec3 c = obj.center + shift;
  Vec3 o = (origin - c).cwiseQuotient(obj.radii);
  Vec3 d = dir.cwiseQuotient(obj.radii);
  double A = d.squaredNorm(), B = 2.0 * o.dot(d), C = o.squaredNorm() - 1.0;
  double disc = B * B - 4 * A * C;
  if (disc <= 0) return false;
  double s = (-B - std::sqrt(disc)) / (2 * A);
  if (s <= 1e-6 || s >= hit.t_ray) return false;
  Vec3 p = origin + s * dir;
  Vec3 local = (p - c).cwiseQuotient(obj.radii);
  hit.t_ray = s;
  hit.point = p;
  hit.color = obj.texture.sample(std::atan2(local.y(), local.x()) / M_PI, local.z());
  return true;
}

inline RayHit cast_ray(const std::vector<SceneObject>& objects, const Vec3& origin,
                       const Vec3& dir, double time, bool include_dynamic) {
  RayHit hit;
  for (size_t i = 0; i < objects.size(); ++i) {
    const SceneObject& obj = objects[i];
    if (obj.dynamic && !include_dynamic) continue;
    Vec3 shift = obj.dynamic ? obj.motion.offset(time) : Vec3::Zero();
    bool ok = obj.kind == SceneObject::Kind::Rect ? intersect_rect(origin, dir, obj, shift, hit)
                                                  : intersect_ellipsoid(origin, dir, obj, shift, hit);
    if (ok) {
      hit.object = static_cast<int>(i);
      hit.dynamic = obj.dynamic;
    }
  }
  return hit;
}

inline Pose camera_pose(const CameraPathSpec& cam, double time) {
  Vec3 pos = cam.base;
  for (int k = 0; k < 3; ++k) pos[k] += cam.amplitude[k] * std::sin(cam.omega[k] * time);
  Vec3 target = cam.look_target;
  target.x() += cam.look_wobble.x() * std::sin(0.8 * time);
  target.y() += cam.look_wobble.y() * std::cos(0.6 * time);

  Vec3 fwd = (target - pos).normalized();
  Vec3 up_world(0, -1, 0);  // camera y grows downward in the image
  Vec3 right = up_world.cross(fwd).normalized();
  Vec3 down = fwd.cross(right);
  Mat3 R;
  R.col(0) = right;
  R.col(1) = down;
  R.col(2) = fwd;
  Pose pose;
  pose.rotation = Quat(R);
  pose.rotation.normalize();
  pose.translation = pos;
  return pose;
}

}  // namespace synth_detail

// Fraction of pixels covered by dynamic objects, averaged over frames.
inline double measure_dynamic_coverage(const std::vector<SceneObject>& objects,
                                       const SceneSpec& spec, const Intrinsics& intr) {
  using namespace synth_detail;
  long dynamic_px = 0, total_px = 0;
  for (int t = 0; t < spec.num_frames; ++t) {
    double time = t * spec.timestep;
    Pose pose = camera_pose(spec.camera, time);
    Mat3 R = pose.matrix();
    for (int v = 0; v < intr.height; ++v)
      for (int u = 0; u < intr.width; ++u) {
        Vec3 dir_cam((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0);
        RayHit hit = cast_ray(objects, pose.translation, R * dir_cam, time, true);
        if (hit.object >= 0) {
          ++total_px;
          if (hit.dynamic) ++dynamic_px;
        } else {
          ++total_px;
        }
      }
  }
  return total_px == 0 ? 0.0 : static_cast<double>(dynamic_px) / total_px;
}

// Flips masks in contiguous 8x8 blocks: static blocks turn dynamic with
// probability fp_rate, dynamic blocks turn static with fn_rate.
inline std::vector<FrameMask> corrupt_masks(const std::vector<FrameMask>& masks, double fp_rate,
                                            double fn_rate, uint64_t seed) {
  if (fp_rate < 0 || fp_rate > 1 || fn_rate < 0 || fn_rate > 1)
    throw std::invalid_argument("corrupt_masks: rates must be in [0,1]");
  Rng rng(seed);
  std::vector<FrameMask> out = masks;
  constexpr int B = 8;
  for (auto& m : out) {
    int H = m.values.height(), W = m.values.width();
    for (int by = 0; by < H; by += B) {
      for (int bx = 0; bx < W; bx += B) {
        double u_fp = rng.uniform();
        double u_fn = rng.uniform();
        bool flip_fp = u_fp < fp_rate;
        bool flip_fn = u_fn < fn_rate;
        if (!flip_fp && !flip_fn) continue;
        for (int y = by; y < std::min(H, by + B); ++y)
          for (int x = bx; x < std::min(W, bx + B); ++x) {
            double& v = m.values.at(y, x);
            if (flip_fp && v < 0.5) v = 1.0;
            else if (flip_fn && v >= 0.5) v = 0.0;
          }
      }
    }
  }
  return out;
}

inline SyntheticDataset generate(const SceneSpec& spec) {
  using namespace synth_detail;
  if (spec.num_frames < 2) throw std::invalid_argument("SceneSpec: num_frames must be >= 2");
  if (spec.dynamic_coverage < 0 || spec.dynamic_coverage > 0.9)
    throw std::invalid_argument("SceneSpec: dynamic_coverage must be in [0, 0.9]");

  Intrinsics intr = Intrinsics::centered(spec.focal, spec.width, spec.height);

  // Static layout: a large backdrop, a ground plane, and a box-like slab made
  // of rect faces, all textured smoothly.
  std::vector<SceneObject> objects;
  {
    SceneObject backdrop;
    backdrop.center = Vec3(0, 0, 10.0);
    backdrop.edge_u = Vec3(14, 0, 0);
    backdrop.edge_v = Vec3(0, 10, 0);
    backdrop.texture.base = Vec3(0.45, 0.5, 0.6);
    backdrop.texture.freq = Vec3(0.8, 1.1, 0.6);
    objects.push_back(backdrop);

    SceneObject ground;
    ground.center = Vec3(0, 3.2, 6.0);
    ground.edge_u = Vec3(10, 0, 0);
    ground.edge_v = Vec3(0, 0.8, 5.0);
    ground.texture.base = Vec3(0.55, 0.45, 0.35);
    ground.texture.freq = Vec3(1.2, 0.7, 0.9);
    ground.texture.phase = Vec3(1, 3, 5);
    objects.push_back(ground);

    // slab: front face plus a visible top face
    SceneObject slab_front;
    slab_front.center = Vec3(-2.2, 1.0, 7.0);
    slab_front.edge_u = Vec3(1.2, 0, 0);
    slab_front.edge_v = Vec3(0, 1.5, 0);
    slab_front.texture.base = Vec3(0.35, 0.55, 0.4);
    slab_front.texture.freq = Vec3(1.5, 1.0, 1.2);
    objects.push_back(slab_front);

    SceneObject slab_top;
    slab_top.center = Vec3(-2.2, -0.5, 7.4);
    slab_top.edge_u = Vec3(1.2, 0, 0);
    slab_top.edge_v = Vec3(0, 0, 0.4);
    slab_top.texture.base = Vec3(0.3, 0.5, 0.35);
    objects.push_back(slab_top);
  }

  // Dynamic objects, sized by bisection to hit the coverage target.
  if (spec.dynamic_coverage > 0 && spec.num_dynamic_objects > 0) {
    auto make_dynamic = [&](double size_scale) {
      std::vector<SceneObject> dyn;
      for (int k = 0; k < spec.num_dynamic_objects; ++k) {
        SceneObject obj;
        double z = 4.5 + 0.8 * k;
        double off = (k - 0.5 * (spec.num_dynamic_objects - 1)) * 1.5;
        if (spec.use_ellipsoid && k % 2 == 1) {
          obj.kind = SceneObject::Kind::Ellipsoid;
          obj.center = Vec3(off, -0.2, z);
          obj.radii = size_scale * Vec3(1.0, 0.8, 0.6);
        } else {
          obj.kind = SceneObject::Kind::Rect;
          obj.center = Vec3(off, 0.1, z);
          obj.edge_u = size_scale * Vec3(1.0, 0.15, 0);
          obj.edge_v = size_scale * Vec3(-0.1, 0.9, 0);
        }
        obj.dynamic = true;
        obj.motion.kind = Motion::Kind::Circular;
        obj.motion.radius = 0.9;
        obj.motion.omega = 0.8 + 0.3 * k;
        obj.motion.axis_u = Vec3(1, 0, 0);
        obj.motion.axis_v = Vec3(0, 0.7, 0.2).normalized();
        obj.texture.base = Vec3(0.7, 0.35, 0.3);
        obj.texture.freq = Vec3(1.1, 0.9, 1.4);
        obj.texture.phase = Vec3(0.5, 2.5, 4.5);
        dyn.push_back(obj);
      }
      return dyn;
    };

    auto coverage_at = [&](double scale) {
      std::vector<SceneObject> all = objects;
      for (auto& d : make_dynamic(scale)) all.push_back(d);
      return measure_dynamic_coverage(all, spec, intr);
    };

    double lo = 0.02, hi = 4.0;
    if (coverage_at(hi) < spec.dynamic_coverage)
      throw std::invalid_argument("SceneSpec: dynamic_coverage target infeasible for this scene");
    for (int it = 0; it < 40; ++it) {
      double mid = 0.5 * (lo + hi);
      if (coverage_at(mid) < spec.dynamic_coverage) lo = mid;
      else hi = mid;
    }
    double scale = 0.5 * (lo + hi);
    for (auto& d : make_dynamic(scale)) objects.push_back(d);
  }

  SyntheticDataset ds;
  ds.intr = intr;
  ds.frames.resize(spec.num_frames);

  // Per-frame renders, depths, masks. Also keep the hit bookkeeping needed
  // for exact flow: world point and owning object per pixel.
  std::vector<Grid<Vec3>> hit_points(spec.num_frames);
  std::vector<Grid<int>> hit_objects(spec.num_frames);

  parallel_chunks(spec.num_frames, 1, [&](int, int begin, int end) {
    for (int t = begin; t < end; ++t) {
      double time = t * spec.timestep;
      SyntheticFrame& fr = ds.frames[t];
      fr.timestamp = time;
      fr.pose = camera_pose(spec.camera, time);
      fr.rgb = Image(intr.height, intr.width, Vec3::Zero());
      fr.static_rgb = Image(intr.height, intr.width, Vec3::Zero());
      fr.depth.values = GridF(intr.height, intr.width, 1.0);
      fr.mask.values = GridF(intr.height, intr.width, 0.0);
      hit_points[t] = Grid<Vec3>(intr.height, intr.width, Vec3::Zero());
      hit_objects[t] = Grid<int>(intr.height, intr.width, -1);
      Mat3 R = fr.pose.matrix();
      for (int v = 0; v < intr.height; ++v) {
        for (int u = 0; u < intr.width; ++u) {
          Vec3 dir_cam((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0);
          Vec3 dir = R * dir_cam;
          RayHit hit = cast_ray(objects, fr.pose.translation, dir, time, true);
          if (hit.object < 0) {
            // ray escaped the layout: treat as a distant black backdrop
            hit.t_ray = 100.0;
            hit.point = fr.pose.translation + 100.0 * dir;
            hit.color = Vec3::Zero();
            hit.dynamic = false;
            hit.object = 0;
          }
          fr.rgb.at(v, u) = hit.color;
          // camera-space depth is the z coordinate of the hit
          fr.depth.values.at(v, u) = (R.transpose() * (hit.point - fr.pose.translation)).z();
          fr.mask.values.at(v, u) = hit.dynamic ? 1.0 : 0.0;
          hit_points[t].at(v, u) = hit.point;
          hit_objects[t].at(v, u) = hit.object;

          RayHit shit = cast_ray(objects, fr.pose.translation, dir, time, false);
          fr.static_rgb.at(v, u) = shit.object >= 0 ? shit.color : Vec3::Zero();
        }
      }
    }
  });

  // Optional mask corruption (applied to the per-frame masks the edges copy).
  std::vector<FrameMask> edge_masks(spec.num_frames);
  for (int t = 0; t < spec.num_frames; ++t) edge_masks[t] = ds.frames[t].mask;
  if (spec.mask_fp_rate > 0 || spec.mask_fn_rate > 0)
    edge_masks = corrupt_masks(edge_masks, spec.mask_fp_rate, spec.mask_fn_rate, spec.seed + 77);

  // Edges for every stride, both orderings, with exact pair geometry and flow.
  Rng noise_rng(spec.seed + 1234);
  for (int k : spec.strides) {
    for (int n = 0; n + k < spec.num_frames; ++n) {
      for (auto [a, b] : {std::pair{n, n + k}, std::pair{n + k, n}}) {
        SyntheticEdge e;
        e.n = a;
        e.m = b;
        e.x_nn = depth_to_pointmap(ds.frames[a].depth, intr);
        Pose rel = ds.frames[a].pose.relative_to(ds.frames[b].pose);
        Pointmap pm_m = depth_to_pointmap(ds.frames[b].depth, intr);
        e.x_mn.frame = PointFrame::Camera;
        e.x_mn.points = Grid<Vec3>(intr.height, intr.width);
        Mat3 Rrel = rel.matrix();
        for (size_t i = 0; i < pm_m.points.size(); ++i)
          e.x_mn.points[i] = Rrel * pm_m.points[i] + rel.translation;
        if (spec.pointmap_noise > 0) {
          for (size_t i = 0; i < e.x_nn.points.size(); ++i)
            for (int c = 0; c < 3; ++c) {
              e.x_nn.points[i][c] += noise_rng.normal(0, spec.pointmap_noise);
              e.x_mn.points[i][c] += noise_rng.normal(0, spec.pointmap_noise);
            }
        }
        e.c_nn = GridF(intr.height, intr.width, 1.0);
        e.c_mn = GridF(intr.height, intr.width, 1.0);
        e.mask.n = a;
        e.mask.m = b;
        e.mask.values = edge_masks[a].values;

        // exact flow a -> b: move each surface point with its object, then
        // project into frame b
        e.flow.uv = Grid<Vec2>(intr.height, intr.width, Vec2::Zero());
        e.flow.valid = Grid<uint8_t>(intr.height, intr.width, 0);
        double ta = ds.frames[a].timestamp, tb = ds.frames[b].timestamp;
        Pose inv_b = ds.frames[b].pose.inverse();
        Mat3 Rinv_b = inv_b.matrix();
        for (int v = 0; v < intr.height; ++v)
          for (int u = 0; u < intr.width; ++u) {
            Vec3 p = hit_points[a].at(v, u);
            int oid = hit_objects[a].at(v, u);
            if (oid >= 0 && objects[oid].dynamic)
              p += objects[oid].motion.offset(tb) - objects[oid].motion.offset(ta);
            Vec3 xc = Rinv_b * p + inv_b.translation;
            if (xc.z() <= kNearPlane) continue;
            Vec2 proj = project(xc, intr);
            if (proj.x() < 0 || proj.x() > intr.width - 1 || proj.y() < 0 ||
                proj.y() > intr.height - 1)
              continue;
            e.flow.uv.at(v, u) = proj - Vec2(u, v);
            e.flow.valid.at(v, u) = 1;
          }
        ds.edges.push_back(std::move(e));
      }
    }
  }
  return ds;
}

}  // namespace stillsplat
