#include "catch_amalgamated.hpp"

#include "stillsplat/synth.hpp"

using namespace stillsplat;

namespace {

SceneSpec small_spec() {
  SceneSpec spec;
  spec.width = 32;
  spec.height = 32;
  spec.num_frames = 6;
  spec.focal = 30.0;
  spec.strides = {1, 2};
  spec.dynamic_coverage = 0.25;
  spec.seed = 9;
  return spec;
}

}  // namespace

TEST_CASE("generate validates its spec") {
  SceneSpec spec = small_spec();
  spec.num_frames = 1;
  REQUIRE_THROWS_AS(generate(spec), std::invalid_argument);
  spec = small_spec();
  spec.dynamic_coverage = 0.95;
  try {
    generate(spec);
    FAIL("expected error");
  } catch (const std::invalid_argument& e) {
    REQUIRE(std::string(e.what()).find("dynamic_coverage") != std::string::npos);
  }
}

TEST_CASE("generate is bitwise deterministic per seed") {
  SceneSpec spec = small_spec();
  spec.pointmap_noise = 0.01;
  spec.mask_fp_rate = 0.1;
  SyntheticDataset a = generate(spec), b = generate(spec);
  REQUIRE(a.frames.size() == b.frames.size());
  REQUIRE(a.edges.size() == b.edges.size());
  for (size_t t = 0; t < a.frames.size(); ++t) {
    for (size_t i = 0; i < a.frames[t].rgb.size(); ++i) {
      REQUIRE(a.frames[t].rgb[i] == b.frames[t].rgb[i]);
      REQUIRE(a.frames[t].depth.values[i] == b.frames[t].depth.values[i]);
      REQUIRE(a.frames[t].mask.values[i] == b.frames[t].mask.values[i]);
    }
    REQUIRE(a.frames[t].pose.translation == b.frames[t].pose.translation);
  }
  for (size_t e = 0; e < a.edges.size(); ++e)
    for (size_t i = 0; i < a.edges[e].x_nn.points.size(); ++i) {
      REQUIRE(a.edges[e].x_nn.points[i] == b.edges[e].x_nn.points[i]);
      REQUIRE(a.edges[e].mask.values[i] == b.edges[e].mask.values[i]);
    }
}

TEST_CASE("zero dynamic objects: masks empty, static render equals frame render") {
  SceneSpec spec = small_spec();
  spec.dynamic_coverage = 0.0;
  SyntheticDataset ds = generate(spec);
  for (const auto& fr : ds.frames) {
    for (size_t i = 0; i < fr.mask.values.size(); ++i) {
      REQUIRE(fr.mask.values[i] == 0.0);
      REQUIRE(fr.rgb[i] == fr.static_rgb[i]);
    }
  }
}

TEST_CASE("dynamic coverage lands within 5% of the target") {
  SceneSpec spec = small_spec();
  spec.num_frames = 8;
  spec.dynamic_coverage = 0.3;
  SyntheticDataset ds = generate(spec);
  double dyn = 0, total = 0;
  for (const auto& fr : ds.frames)
    for (size_t i = 0; i < fr.mask.values.size(); ++i) {
      dyn += fr.mask.values[i];
      total += 1;
    }
  REQUIRE(std::abs(dyn / total - 0.3) < 0.05);
}

TEST_CASE("static camera, moving quad: GT flow zero exactly off the quad") {
  SceneSpec spec = small_spec();
  spec.camera.amplitude = Vec3::Zero();
  spec.camera.look_wobble = Vec3::Zero();
  spec.dynamic_coverage = 0.2;
  SyntheticDataset ds = generate(spec);
  const SyntheticEdge& e = ds.edges[0];
  REQUIRE(e.n == 0);
  int dynamic_checked = 0;
  for (int i = 0; i < static_cast<int>(e.flow.uv.size()); ++i) {
    if (!e.flow.valid[i]) continue;
    if (ds.frames[e.n].mask.values[i] < 0.5) {
      REQUIRE(e.flow.uv[i].norm() < 1e-9);  // static pixel, static camera
    } else {
      REQUIRE(e.flow.uv[i].norm() > 1e-6);
      ++dynamic_checked;
    }
  }
  REQUIRE(dynamic_checked > 10);
}

TEST_CASE("induced flow from GT depth and poses matches stored GT flow on static pixels") {
  SceneSpec spec = small_spec();
  SyntheticDataset ds = generate(spec);
  for (const auto& e : ds.edges) {
    FlowField ind = induced_flow(ds.frames[e.n].depth, ds.frames[e.n].pose, ds.frames[e.m].pose,
                                 ds.intr);
    for (int i = 0; i < static_cast<int>(ind.uv.size()); ++i) {
      if (ds.frames[e.n].mask.values[i] >= 0.5) continue;
      if (!ind.valid[i] || !e.flow.valid[i]) continue;
      REQUIRE((ind.uv[i] - e.flow.uv[i]).norm() < 1e-4);
    }
  }
}

TEST_CASE("pair pointmaps are the exact GT geometry at zero noise") {
  SceneSpec spec = small_spec();
  SyntheticDataset ds = generate(spec);
  for (const auto& e : ds.edges) {
    Pointmap x_nn = depth_to_pointmap(ds.frames[e.n].depth, ds.intr);
    for (size_t i = 0; i < x_nn.points.size(); ++i)
      REQUIRE((e.x_nn.points[i] - x_nn.points[i]).norm() == 0.0);

    Pose rel = ds.frames[e.n].pose.relative_to(ds.frames[e.m].pose);
    Pointmap pm_m = depth_to_pointmap(ds.frames[e.m].depth, ds.intr);
    Pointmap expect = transform_pointmap(rel, pm_m);
    for (size_t i = 0; i < expect.points.size(); ++i)
      REQUIRE((e.x_mn.points[i] - expect.points[i]).norm() < 1e-12);

    for (size_t i = 0; i < e.c_nn.size(); ++i) {
      REQUIRE(e.c_nn[i] == 1.0);
      REQUIRE(e.c_mn[i] == 1.0);
    }
  }
}

TEST_CASE("edges cover both orderings so every frame leads at least one pair") {
  SceneSpec spec = small_spec();
  SyntheticDataset ds = generate(spec);
  std::vector<bool> first(spec.num_frames, false);
  for (const auto& e : ds.edges) {
    first[e.n] = true;
    REQUIRE(e.mask.n == e.n);
  }
  for (bool b : first) REQUIRE(b);
}

TEST_CASE("corrupt_masks trivial rates") {
  std::vector<FrameMask> masks = {FrameMask{GridF(16, 16, 0.0)}};
  masks[0].values.at(3, 3) = 1.0;

  auto same = corrupt_masks(masks, 0.0, 0.0, 5);
  for (size_t i = 0; i < masks[0].values.size(); ++i)
    REQUIRE(same[0].values[i] == masks[0].values[i]);

  auto all_dyn = corrupt_masks(masks, 1.0, 0.0, 5);
  for (size_t i = 0; i < all_dyn[0].values.size(); ++i) REQUIRE(all_dyn[0].values[i] == 1.0);

  auto all_static = corrupt_masks(masks, 0.0, 1.0, 5);
  REQUIRE(all_static[0].values.at(3, 3) == 0.0);

  REQUIRE_THROWS_AS(corrupt_masks(masks, 1.5, 0.0, 5), std::invalid_argument);
}

TEST_CASE("corrupt_masks fp rate matches the corrupted fraction on a large mask") {
  std::vector<FrameMask> masks = {FrameMask{GridF(256, 256, 0.0)}};
  auto out = corrupt_masks(masks, 0.1, 0.0, 123);
  double frac = 0;
  for (size_t i = 0; i < out[0].values.size(); ++i) frac += out[0].values[i];
  frac /= out[0].values.size();
  REQUIRE(std::abs(frac - 0.1) < 0.03);

  // determinism
  auto out2 = corrupt_masks(masks, 0.1, 0.0, 123);
  for (size_t i = 0; i < out[0].values.size(); ++i)
    REQUIRE(out[0].values[i] == out2[0].values[i]);
}

TEST_CASE("depths are positive and finite everywhere") {
  SceneSpec spec = small_spec();
  SyntheticDataset ds = generate(spec);
  for (const auto& fr : ds.frames) fr.depth.validate();
}
