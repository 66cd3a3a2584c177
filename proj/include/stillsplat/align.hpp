#pragma once

#include "stillsplat/core.hpp"
#include "stillsplat/geometry.hpp"
#include "stillsplat/masks.hpp"

#include <numeric>

namespace stillsplat {

// Per-edge network outputs: both pointmaps live in frame n's camera frame.
struct PairPrediction {
  Pointmap x_nn, x_mn;
  GridF c_nn, c_mn;
  PairMask mask;
  FlowField flow_est;
  bool has_flow = false;
};

struct FrameGraph {
  int num_frames = 0;
  std::vector<EdgeKey> edges;
  std::vector<PairPrediction> preds;  // parallel to edges (may be filled later)

  int find_edge(int n, int m) const {
    for (size_t i = 0; i < edges.size(); ++i)
      if (edges[i].n == n && edges[i].m == m) return static_cast<int>(i);
    return -1;
  }
};

// Edges (n, n+k) and (n+k, n) for every stride k; every frame appears first
// on at least one edge, which mask aggregation relies on.
inline FrameGraph build_graph(int num_frames, const std::vector<int>& strides) {
  if (num_frames < 2) throw std::invalid_argument("build_graph: need at least 2 frames");
  FrameGraph g;
  g.num_frames = num_frames;
  for (int k : strides) {
    if (k < 1) throw std::invalid_argument("build_graph: strides must be positive");
    for (int n = 0; n + k < num_frames; ++n) {
      g.edges.push_back({n, n + k});
      g.edges.push_back({n + k, n});
    }
  }
  g.preds.resize(g.edges.size());

  // connectivity check (union-find)
  std::vector<int> parent(num_frames);
  std::iota(parent.begin(), parent.end(), 0);
  std::function<int(int)> find = [&](int x) { return parent[x] == x ? x : parent[x] = find(parent[x]); };
  for (const auto& e : g.edges) parent[find(e.n)] = find(e.m);
  for (int i = 1; i < num_frames; ++i)
    if (find(i) != find(0)) throw std::invalid_argument("build_graph: graph is disconnected");
  return g;
}

// Optimizable alignment state. Depth, per-edge scale, and the shared focal are
// parameterized in log space; the global pointmap X^(t,w) is derived, never a
// free variable.
struct AlignState {
  std::vector<Pose> poses;          // camera-to-world P^n
  std::vector<GridF> log_depth;     // per frame
  std::vector<double> log_sigma;    // per edge, kept zero-mean
  double log_focal = 0;
  int width = 0, height = 0;

  int num_frames() const { return static_cast<int>(poses.size()); }

  Intrinsics intrinsics() const {
    return Intrinsics::centered(std::exp(log_focal), width, height);
  }

  DepthMap depth(int t) const {
    DepthMap d;
    d.values = GridF(height, width);
    for (size_t i = 0; i < d.values.size(); ++i) d.values[i] = std::exp(log_depth[t][i]);
    return d;
  }

  Pointmap global_pointmap(int t) const {
    return transform_pointmap(poses[t], depth_to_pointmap(depth(t), intrinsics()));
  }

  void renormalize() {
    for (auto& p : poses) p.normalize();
    if (!log_sigma.empty()) {
      double mean = std::accumulate(log_sigma.begin(), log_sigma.end(), 0.0) / log_sigma.size();
      for (auto& s : log_sigma) s -= mean;
    }
  }
};

// Gradient holder matching AlignState's parameter blocks. Quaternion
// gradients are w.r.t. the raw stored coefficients (w,x,y,z).
struct AlignGrad {
  std::vector<Vec4> d_rotation;
  std::vector<Vec3> d_translation;
  std::vector<GridF> d_log_depth;
  std::vector<double> d_log_sigma;
  double d_log_focal = 0;

  static AlignGrad zeros(const AlignState& s) {
    AlignGrad g;
    g.d_rotation.assign(s.poses.size(), Vec4::Zero());
    g.d_translation.assign(s.poses.size(), Vec3::Zero());
    g.d_log_depth.assign(s.poses.size(), GridF(s.height, s.width, 0.0));
    g.d_log_sigma.assign(s.log_sigma.size(), 0.0);
    g.d_log_focal = 0;
    return g;
  }

  void add(const AlignGrad& o, double w = 1.0) {
    for (size_t i = 0; i < d_rotation.size(); ++i) {
      d_rotation[i] += w * o.d_rotation[i];
      d_translation[i] += w * o.d_translation[i];
      for (size_t j = 0; j < d_log_depth[i].size(); ++j)
        d_log_depth[i][j] += w * o.d_log_depth[i][j];
    }
    for (size_t i = 0; i < d_log_sigma.size(); ++i) d_log_sigma[i] += w * o.d_log_sigma[i];
    d_log_focal += w * o.d_log_focal;
  }
};

namespace align_detail {

inline double sgn(double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }

inline Vec4 quat_coeffs(const Pose& p) {
  return Vec4(p.rotation.w(), p.rotation.x(), p.rotation.y(), p.rotation.z());
}

inline Vec4 chain_rotation(const Mat3& dR, const Vec4& q_raw) {
  Eigen::Matrix<double, 9, 4> Jq = quat_to_matrix_jacobian(q_raw);
  Vec4 out = Vec4::Zero();
  for (int k = 0; k < 4; ++k) {
    double acc = 0;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) acc += dR(i, j) * Jq(i * 3 + j, k);
    out[k] = acc;
  }
  return out;
}

struct FrameCache {
  Mat3 R;
  Grid<Vec3> dirs;        // ((u-cx)/f, (v-cy)/f, 1)
  Grid<Vec3> ddirs_dlf;   // derivative of dirs w.r.t. log focal
};

inline std::vector<FrameCache> build_frame_cache(const AlignState& s) {
  Intrinsics intr = s.intrinsics();
  Grid<Vec3> dirs(s.height, s.width), ddirs(s.height, s.width);
  for (int v = 0; v < s.height; ++v)
    for (int u = 0; u < s.width; ++u) {
      dirs.at(v, u) = Vec3((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0);
      ddirs.at(v, u) = Vec3(-(u - intr.cx) / intr.fx, -(v - intr.cy) / intr.fy, 0.0);
    }
  std::vector<FrameCache> cache(s.poses.size());
  for (size_t t = 0; t < s.poses.size(); ++t) {
    cache[t].R = quat_to_matrix(quat_coeffs(s.poses[t]));
    cache[t].dirs = dirs;
    cache[t].ddirs_dlf = ddirs;
  }
  return cache;
}

}  // namespace align_detail

// Confidence-weighted L1 between derived global pointmaps and the scaled,
// pose-transformed pair pointmaps. The per-edge scale multiplies the
// camera-frame point before the pose is applied: pred = R_n (sigma * X) + T_n.
inline double loss_align(const AlignState& state, const FrameGraph& graph,
                         AlignGrad* grad = nullptr) {
  using namespace align_detail;
  if (graph.preds.size() != graph.edges.size())
    throw std::invalid_argument("loss_align: graph predictions missing");
  auto cache = build_frame_cache(state);

  int num_edges = static_cast<int>(graph.edges.size());
  for (int ei = 0; ei < num_edges; ++ei) {
    const PairPrediction& pred = graph.preds[ei];
    if (pred.x_nn.points.height() != state.height || pred.x_nn.points.width() != state.width ||
        !pred.x_nn.points.same_shape(pred.x_mn.points) ||
        pred.c_nn.height() != state.height || pred.c_mn.height() != state.height)
      throw std::invalid_argument("loss_align: prediction shape mismatch on edge " +
                                  std::to_string(graph.edges[ei].n) + "," +
                                  std::to_string(graph.edges[ei].m));
  }
  struct EdgePartial {
    double value = 0;
    Mat3 dR_n = Mat3::Zero(), dR_m = Mat3::Zero(), dR_n_pred = Mat3::Zero();
    Vec3 dT_n = Vec3::Zero(), dT_m = Vec3::Zero(), dT_n_pred = Vec3::Zero();
    GridF dld_n, dld_m;
    double dls = 0, dlf = 0;
  };
  std::vector<EdgePartial> partials(num_edges);

  parallel_chunks(num_edges, 1, [&](int, int begin, int end) {
    for (int ei = begin; ei < end; ++ei) {
      const EdgeKey& e = graph.edges[ei];
      const PairPrediction& pred = graph.preds[ei];
      EdgePartial& P = partials[ei];
      if (grad) {
        P.dld_n = GridF(state.height, state.width, 0.0);
        P.dld_m = GridF(state.height, state.width, 0.0);
      }
      double sigma = std::exp(state.log_sigma[ei]);
      const Mat3& Rn = cache[e.n].R;

      // one pass per term: (frame t's global pointmap) vs (pred in frame n)
      for (int term = 0; term < 2; ++term) {
        int t = term == 0 ? e.n : e.m;
        const Pointmap& Xp = term == 0 ? pred.x_nn : pred.x_mn;
        const GridF& C = term == 0 ? pred.c_nn : pred.c_mn;
        const Mat3& Rt = cache[t].R;
        GridF& dld_t = term == 0 ? P.dld_n : P.dld_m;
        Mat3& dR_t = term == 0 ? P.dR_n : P.dR_m;
        Vec3& dT_t = term == 0 ? P.dT_n : P.dT_m;

        for (int v = 0; v < state.height; ++v) {
          for (int u = 0; u < state.width; ++u) {
            double D = std::exp(state.log_depth[t].at(v, u));
            Vec3 xc = cache[t].dirs.at(v, u) * D;
            Vec3 xw = Rt * xc + state.poses[t].translation;
            Vec3 scaled = sigma * Xp.points.at(v, u);
            Vec3 pred_w = Rn * scaled + state.poses[e.n].translation;
            Vec3 r = xw - pred_w;
            double c = C.at(v, u);
            // per-point Euclidean norm: invariant under a global rigid motion
            // applied to both the cameras and the pair pointmaps
            double rn = r.norm();
            P.value += c * rn;
            if (!grad || rn < 1e-12) continue;
            Vec3 g = (c / rn) * r;
            // global pointmap side
            dld_t.at(v, u) += g.dot(Rt * xc);  // d xc / d log depth = xc
            dT_t += g;
            dR_t += g * xc.transpose();
            P.dlf += g.dot(Rt * (cache[t].ddirs_dlf.at(v, u) * D));
            // prediction side
            P.dls -= g.dot(Rn * scaled);  // d scaled / d log sigma = scaled
            P.dR_n_pred -= g * scaled.transpose();
            P.dT_n_pred -= g;
          }
        }
      }
    }
  });

  double total = 0;
  if (grad) {
    std::vector<Mat3> dR(state.num_frames(), Mat3::Zero());
    for (int ei = 0; ei < num_edges; ++ei) {
      const EdgeKey& e = graph.edges[ei];
      EdgePartial& P = partials[ei];
      total += P.value;
      dR[e.n] += P.dR_n + P.dR_n_pred;
      dR[e.m] += P.dR_m;
      grad->d_translation[e.n] += P.dT_n + P.dT_n_pred;
      grad->d_translation[e.m] += P.dT_m;
      for (size_t i = 0; i < P.dld_n.size(); ++i) {
        grad->d_log_depth[e.n][i] += P.dld_n[i];
        grad->d_log_depth[e.m][i] += P.dld_m[i];
      }
      grad->d_log_sigma[ei] += P.dls;
      grad->d_log_focal += P.dlf;
    }
    for (int t = 0; t < state.num_frames(); ++t)
      grad->d_rotation[t] +=
          align_detail::chain_rotation(dR[t], align_detail::quat_coeffs(state.poses[t]));
  } else {
    for (const auto& P : partials) total += P.value;
  }
  return total;
}

// Sum over consecutive frames of ||R_t^T R_{t+1} - I||_F + ||R_t^T (T_{t+1} - T_t)||_2.
inline double loss_smooth(const AlignState& state, AlignGrad* grad = nullptr) {
  using namespace align_detail;
  int N = state.num_frames();
  double total = 0;
  std::vector<Mat3> R(N);
  for (int t = 0; t < N; ++t) R[t] = quat_to_matrix(quat_coeffs(state.poses[t]));
  std::vector<Mat3> dR(N, Mat3::Zero());

  for (int t = 0; t + 1 < N; ++t) {
    Mat3 A = R[t].transpose() * R[t + 1] - Mat3::Identity();
    double fn = A.norm();
    total += fn;
    Vec3 delta = state.poses[t + 1].translation - state.poses[t].translation;
    Vec3 b = R[t].transpose() * delta;
    double bn = b.norm();
    total += bn;
    if (!grad) continue;
    if (fn > 1e-12) {
      Mat3 dA = A / fn;
      dR[t + 1] += R[t] * dA;
      dR[t] += R[t + 1] * dA.transpose();
    }
    if (bn > 1e-12) {
      Vec3 db = b / bn;
      Vec3 dDelta = R[t] * db;
      grad->d_translation[t + 1] += dDelta;
      grad->d_translation[t] -= dDelta;
      dR[t] += delta * db.transpose();
    }
  }
  if (grad)
    for (int t = 0; t < N; ++t)
      grad->d_rotation[t] += chain_rotation(dR[t], quat_coeffs(state.poses[t]));
  return total;
}

// Sliding-window flow pairs with estimated flow attached.
struct WindowPair {
  int t = -1, t2 = -1;
  const FlowField* flow_est = nullptr;
};
using WindowSet = std::vector<WindowPair>;

inline WindowSet windows_from_graph(const FrameGraph& graph) {
  WindowSet w;
  for (size_t i = 0; i < graph.edges.size(); ++i) {
    if (!graph.preds[i].has_flow)
      throw std::invalid_argument("windows_from_graph: missing estimated flow on edge " +
                                  std::to_string(graph.edges[i].n) + "," +
                                  std::to_string(graph.edges[i].m));
    w.push_back({graph.edges[i].n, graph.edges[i].m, &graph.preds[i].flow_est});
  }
  return w;
}

// L1 between induced and estimated flow, weighted pixelwise by (1 - M^t).
// Pixels whose induced reprojection is invalid, or whose estimated flow is
// invalid, are excluded.
inline double loss_flow(const AlignState& state, const WindowSet& windows,
                        const std::vector<FrameMask>& frame_masks, AlignGrad* grad = nullptr) {
  using namespace align_detail;
  auto cache = build_frame_cache(state);
  Intrinsics intr = state.intrinsics();
  double f = intr.fx;

  int num_pairs = static_cast<int>(windows.size());
  struct PairPartial {
    double value = 0;
    Mat3 dR_t = Mat3::Zero(), dR_t2 = Mat3::Zero();
    Vec3 dT_t = Vec3::Zero(), dT_t2 = Vec3::Zero();
    GridF dld;
    double dlf = 0;
  };
  std::vector<PairPartial> partials(num_pairs);
  for (const auto& wp : windows)
    if (wp.flow_est == nullptr)
      throw std::invalid_argument("loss_flow: missing estimated flow for pair " +
                                  std::to_string(wp.t) + "->" + std::to_string(wp.t2));

  parallel_chunks(num_pairs, 1, [&](int, int begin, int end) {
    for (int wi = begin; wi < end; ++wi) {
      const WindowPair& wp = windows[wi];
      const FrameMask& M = frame_masks.at(wp.t);
      PairPartial& P = partials[wi];
      if (grad) P.dld = GridF(state.height, state.width, 0.0);

      const Mat3& Rt = cache[wp.t].R;
      const Mat3& Rt2 = cache[wp.t2].R;
      Mat3 Rt2T = Rt2.transpose();
      const Vec3& Tt = state.poses[wp.t].translation;
      const Vec3& Tt2 = state.poses[wp.t2].translation;

      for (int v = 0; v < state.height; ++v) {
        for (int u = 0; u < state.width; ++u) {
          if (!wp.flow_est->valid.at(v, u)) continue;
          double D = std::exp(state.log_depth[wp.t].at(v, u));
          Vec3 xc = cache[wp.t].dirs.at(v, u) * D;
          Vec3 xw = Rt * xc + Tt;
          Vec3 xc2 = Rt2T * (xw - Tt2);
          if (xc2.z() <= kNearPlane) continue;
          double x2 = xc2.x(), y2 = xc2.y(), z2 = xc2.z();
          Vec2 q(f * x2 / z2 + intr.cx, f * y2 / z2 + intr.cy);
          if (q.x() < 0 || q.x() > intr.width - 1 || q.y() < 0 || q.y() > intr.height - 1)
            continue;
          Vec2 r = (q - Vec2(u, v)) - wp.flow_est->uv.at(v, u);
          double wgt = 1.0 - M.values.at(v, u);
          P.value += wgt * (std::abs(r.x()) + std::abs(r.y()));
          if (!grad) continue;
          Vec2 h(wgt * sgn(r.x()), wgt * sgn(r.y()));
          Eigen::Matrix<double, 2, 3> Jp;
          Jp << f / z2, 0, -f * x2 / (z2 * z2),
                0, f / z2, -f * y2 / (z2 * z2);
          Vec3 dxc2 = Jp.transpose() * h;
          // direct focal dependence of the projection
          P.dlf += (h.x() * x2 / z2 + h.y() * y2 / z2) * f;
          Vec3 dxw = Rt2 * dxc2;
          P.dT_t2 -= dxw;
          P.dR_t2 += (xw - Tt2) * dxc2.transpose();
          P.dT_t += dxw;
          P.dR_t += dxw * xc.transpose();
          Vec3 dxc = Rt.transpose() * dxw;
          P.dld.at(v, u) += dxc.dot(xc);
          P.dlf += dxc.dot(cache[wp.t].ddirs_dlf.at(v, u) * D);
        }
      }
    }
  });

  double total = 0;
  if (grad) {
    std::vector<Mat3> dR(state.num_frames(), Mat3::Zero());
    for (int wi = 0; wi < num_pairs; ++wi) {
      const WindowPair& wp = windows[wi];
      PairPartial& P = partials[wi];
      total += P.value;
      dR[wp.t] += P.dR_t;
      dR[wp.t2] += P.dR_t2;
      grad->d_translation[wp.t] += P.dT_t;
      grad->d_translation[wp.t2] += P.dT_t2;
      for (size_t i = 0; i < P.dld.size(); ++i) grad->d_log_depth[wp.t][i] += P.dld[i];
      grad->d_log_focal += P.dlf;
    }
    for (int t = 0; t < state.num_frames(); ++t)
      grad->d_rotation[t] += chain_rotation(dR[t], quat_coeffs(state.poses[t]));
  } else {
    for (const auto& P : partials) total += P.value;
  }
  return total;
}

struct AlignOptions {
  double w_smooth = 0.01;
  double w_flow = 0.01;
  int iterations = 300;
  double lr = 0.01;
  bool cosine_decay = true;
  double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
  // stop when the total loss is numerical noise: the L1 losses have
  // unit-magnitude subgradients at any nonzero residual, so stepping past this
  // point only makes the state random-walk at the learning-rate scale
  double converge_tol = 1e-8;
};

struct AlignDivergence : std::runtime_error {
  int iteration;
  explicit AlignDivergence(int it)
      : std::runtime_error("alignment diverged at iteration " + std::to_string(it)),
        iteration(it) {}
};

struct AlignTraceRow {
  int iteration = 0;
  double total = 0, align = 0, smooth = 0, flow = 0;
};

struct AlignResult {
  AlignState state;
  std::vector<AlignTraceRow> trace;
};

namespace align_detail {

// flat parameter packing for Adam
inline size_t pack_size(const AlignState& s) {
  return s.poses.size() * 7 + s.poses.size() * s.log_depth[0].size() + s.log_sigma.size() + 1;
}

inline void pack(const AlignState& s, std::vector<double>& out) {
  out.clear();
  out.reserve(pack_size(s));
  for (const auto& p : s.poses) {
    out.push_back(p.rotation.w());
    out.push_back(p.rotation.x());
    out.push_back(p.rotation.y());
    out.push_back(p.rotation.z());
    for (int k = 0; k < 3; ++k) out.push_back(p.translation[k]);
  }
  for (const auto& ld : s.log_depth)
    for (size_t i = 0; i < ld.size(); ++i) out.push_back(ld[i]);
  for (double ls : s.log_sigma) out.push_back(ls);
  out.push_back(s.log_focal);
}

inline void unpack(const std::vector<double>& in, AlignState& s) {
  size_t k = 0;
  for (auto& p : s.poses) {
    double w = in[k++], x = in[k++], y = in[k++], z = in[k++];
    p.rotation = Quat(w, x, y, z);
    for (int j = 0; j < 3; ++j) p.translation[j] = in[k++];
  }
  for (auto& ld : s.log_depth)
    for (size_t i = 0; i < ld.size(); ++i) ld[i] = in[k++];
  for (auto& ls : s.log_sigma) ls = in[k++];
  s.log_focal = in[k++];
}

inline void pack_grad(const AlignGrad& g, std::vector<double>& out) {
  out.clear();
  for (size_t t = 0; t < g.d_rotation.size(); ++t) {
    for (int k = 0; k < 4; ++k) out.push_back(g.d_rotation[t][k]);
    for (int k = 0; k < 3; ++k) out.push_back(g.d_translation[t][k]);
  }
  for (const auto& ld : g.d_log_depth)
    for (size_t i = 0; i < ld.size(); ++i) out.push_back(ld[i]);
  for (double ls : g.d_log_sigma) out.push_back(ls);
  out.push_back(g.d_log_focal);
}

}  // namespace align_detail

inline AlignResult optimize_alignment(AlignState state, const FrameGraph& graph,
                                      const WindowSet& windows,
                                      const std::vector<FrameMask>& frame_masks,
                                      const AlignOptions& opt) {
  using namespace align_detail;
  AlignResult result;
  state.renormalize();

  std::vector<double> params, grads, m(pack_size(state), 0.0), v(pack_size(state), 0.0);

  for (int it = 0; it < opt.iterations; ++it) {
    AlignGrad grad = AlignGrad::zeros(state);
    double l_align = loss_align(state, graph, &grad);
    AlignGrad g_smooth = AlignGrad::zeros(state);
    double l_smooth = loss_smooth(state, &g_smooth);
    AlignGrad g_flow = AlignGrad::zeros(state);
    double l_flow = (windows.empty() || opt.w_flow == 0.0)
                        ? 0.0
                        : loss_flow(state, windows, frame_masks, &g_flow);
    grad.add(g_smooth, opt.w_smooth);
    grad.add(g_flow, opt.w_flow);

    double total = l_align + opt.w_smooth * l_smooth + opt.w_flow * l_flow;
    if (!std::isfinite(total)) throw AlignDivergence(it);
    result.trace.push_back({it, total, l_align, l_smooth, l_flow});
    if (total < opt.converge_tol) break;

    double lr = opt.lr;
    if (opt.cosine_decay && opt.iterations > 1)
      lr *= 0.5 * (1.0 + std::cos(M_PI * it / (opt.iterations - 1)));

    pack(state, params);
    pack_grad(grad, grads);
    double b1t = 1.0 - std::pow(opt.adam_beta1, it + 1);
    double b2t = 1.0 - std::pow(opt.adam_beta2, it + 1);
    for (size_t i = 0; i < params.size(); ++i) {
      m[i] = opt.adam_beta1 * m[i] + (1 - opt.adam_beta1) * grads[i];
      v[i] = opt.adam_beta2 * v[i] + (1 - opt.adam_beta2) * grads[i] * grads[i];
      params[i] -= lr * (m[i] / b1t) / (std::sqrt(v[i] / b2t) + opt.adam_eps);
    }
    unpack(params, state);
    state.renormalize();
  }

  result.state = std::move(state);
  return result;
}

// ---------------------------------------------------------------------------
// Initialization from pair predictions: depths from the x_nn z-channel, focal
// from per-pixel estimates on the first frame, poses by chaining closed-form
// rigid registrations along stride-1 edges.
// ---------------------------------------------------------------------------

inline AlignState init_align_state(const FrameGraph& graph, int height, int width) {
  AlignState s;
  s.height = height;
  s.width = width;
  int N = graph.num_frames;
  s.poses.assign(N, Pose::identity());
  s.log_depth.assign(N, GridF(height, width, 0.0));
  s.log_sigma.assign(graph.edges.size(), 0.0);

  // depth init: first edge where the frame appears first
  std::vector<int> first_edge(N, -1);
  for (size_t i = 0; i < graph.edges.size(); ++i)
    if (first_edge[graph.edges[i].n] < 0) first_edge[graph.edges[i].n] = static_cast<int>(i);
  for (int t = 0; t < N; ++t) {
    if (first_edge[t] < 0) throw std::invalid_argument("init_align_state: frame never first");
    const Pointmap& x = graph.preds[first_edge[t]].x_nn;
    for (size_t i = 0; i < x.points.size(); ++i)
      s.log_depth[t][i] = std::log(std::max(1e-4, x.points[i].z()));
  }

  // focal: median of per-pixel estimates from frame 0's own pointmap
  {
    const Pointmap& x0 = graph.preds[first_edge[0]].x_nn;
    double cx = 0.5 * (width - 1), cy = 0.5 * (height - 1);
    std::vector<double> est;
    for (int v = 0; v < height; ++v)
      for (int u = 0; u < width; ++u) {
        const Vec3& p = x0.points.at(v, u);
        if (p.z() <= 1e-6) continue;
        if (std::abs(p.x() / p.z()) > 1e-3) est.push_back((u - cx) * p.z() / p.x());
        if (std::abs(p.y() / p.z()) > 1e-3) est.push_back((v - cy) * p.z() / p.y());
      }
    if (est.empty()) throw std::invalid_argument("init_align_state: cannot estimate focal");
    std::nth_element(est.begin(), est.begin() + est.size() / 2, est.end());
    double f = est[est.size() / 2];
    s.log_focal = std::log(std::max(1.0, std::abs(f)));
  }

  // pose chaining along stride-1 edges using rigid registration between the
  // frame's own pointmap and its appearance in the previous frame's coords,
  // restricted to confidence-top-quartile pixels
  for (int n = 0; n + 1 < N; ++n) {
    int ei = graph.find_edge(n, n + 1);
    if (ei < 0) throw std::invalid_argument("init_align_state: missing stride-1 edge");
    int em = graph.find_edge(n + 1, n);
    const Pointmap& x_m_in_n = graph.preds[ei].x_mn;    // frame n+1 in cam n
    const Pointmap& x_m_in_m = graph.preds[em >= 0 ? em : ei].x_nn;  // frame n+1 in cam n+1
    const GridF& conf = graph.preds[ei].c_mn;

    std::vector<double> cvals(conf.data(), conf.data() + conf.size());
    std::nth_element(cvals.begin(), cvals.begin() + cvals.size() * 3 / 4, cvals.end());
    double thr = cvals[cvals.size() * 3 / 4];

    std::vector<int> sel;
    for (size_t i = 0; i < conf.size(); ++i)
      if (conf[i] >= thr) sel.push_back(static_cast<int>(i));
    if (sel.size() < 3) throw std::invalid_argument("init_align_state: too few confident pixels");

    Eigen::MatrixXd src(3, sel.size()), dst(3, sel.size());
    for (size_t k = 0; k < sel.size(); ++k) {
      src.col(k) = x_m_in_m.points[sel[k]];
      dst.col(k) = x_m_in_n.points[sel[k]];
    }
    Eigen::Matrix4d T = Eigen::umeyama(src, dst, false);  // cam n+1 -> cam n
    Pose rel;
    rel.rotation = Quat(Mat3(T.topLeftCorner<3, 3>()));
    rel.rotation.normalize();
    rel.translation = T.topRightCorner<3, 1>();
    s.poses[n + 1] = s.poses[n].compose(rel);
  }
  return s;
}

}  // namespace stillsplat
