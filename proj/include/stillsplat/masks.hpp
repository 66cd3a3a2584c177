#pragma once

#include "stillsplat/core.hpp"
#include "stillsplat/geometry.hpp"

namespace stillsplat {

// Soft dynamic probability for the FIRST frame of an edge (n, m).
struct PairMask {
  GridF values;  // in [0,1]
  int n = -1, m = -1;
};

// Aggregated per-frame dynamic probability M^t.
struct FrameMask {
  GridF values;
};

// s = 1 - M^t, per pixel.
struct StaticnessMap {
  GridF values;
};

struct EdgeKey {
  int n = 0, m = 0;
  bool operator<(const EdgeKey& o) const { return n != o.n ? n < o.n : m < o.m; }
  bool operator==(const EdgeKey& o) const { return n == o.n && m == o.m; }
};

// Mean of the pair masks on edges where `t` is the pair's first frame.
inline FrameMask aggregate_masks(const std::vector<PairMask>& pair_masks, int t) {
  FrameMask out;
  int count = 0;
  for (const auto& pm : pair_masks) {
    if (pm.n != t) continue;
    if (count == 0) {
      out.values = pm.values;
    } else {
      if (!out.values.same_shape(pm.values))
        throw std::invalid_argument("aggregate_masks: shape mismatch across edges");
      for (size_t i = 0; i < out.values.size(); ++i) out.values[i] += pm.values[i];
    }
    ++count;
  }
  if (count == 0)
    throw std::invalid_argument("aggregate_masks: no edge has frame " + std::to_string(t) +
                                " as its first frame");
  for (size_t i = 0; i < out.values.size(); ++i) out.values[i] /= count;
  return out;
}

inline StaticnessMap staticness_from_mask(const FrameMask& m) {
  StaticnessMap s;
  s.values = GridF(m.values.height(), m.values.width());
  for (size_t i = 0; i < m.values.size(); ++i) s.values[i] = 1.0 - m.values[i];
  return s;
}

// Intersection over union after binarizing both masks at `threshold`
// (dynamic = value >= threshold). Empty union counts as a perfect match.
inline double mask_iou(const FrameMask& pred, const FrameMask& gt, double threshold = 0.5) {
  if (!pred.values.same_shape(gt.values))
    throw std::invalid_argument("mask_iou: shape mismatch");
  long inter = 0, uni = 0;
  for (size_t i = 0; i < pred.values.size(); ++i) {
    bool p = pred.values[i] >= threshold;
    bool g = gt.values[i] >= threshold;
    inter += (p && g);
    uni += (p || g);
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace stillsplat
