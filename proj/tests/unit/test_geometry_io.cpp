#include "catch_amalgamated.hpp"

#include "stillsplat/geometry.hpp"
#include "stillsplat/io.hpp"
#include "stillsplat/splat.hpp"

#include <filesystem>
#include <fstream>

using namespace stillsplat;
namespace fs = std::filesystem;

namespace {

Pose random_pose(Rng& r) {
  Pose p;
  p.rotation = Quat(1.0 + 0.1 * r.normal(), 0.2 * r.normal(), 0.2 * r.normal(), 0.2 * r.normal());
  p.rotation.normalize();
  p.translation = Vec3(r.normal(), r.normal(), r.normal());
  return p;
}

fs::path tmp_dir() {
  fs::path d = fs::temp_directory_path() / "stillsplat_test_io";
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST_CASE("Intrinsics validates its invariants") {
  REQUIRE_THROWS_AS(Intrinsics(0.0, 1.0, 0.0, 0.0, 4, 4), std::invalid_argument);
  REQUIRE_THROWS_AS(Intrinsics(1.0, 1.0, 4.0, 0.0, 4, 4), std::invalid_argument);
  Intrinsics c = Intrinsics::centered(50.0, 8, 6);
  REQUIRE(c.cx == 3.5);
  REQUIRE(c.cy == 2.5);
}

TEST_CASE("Pose compose/inverse round trip") {
  Rng r(3);
  for (int k = 0; k < 10; ++k) {
    Pose p = random_pose(r);
    Pose id = p.compose(p.inverse());
    REQUIRE(id.translation.norm() < 1e-9);
    REQUIRE(std::abs(std::abs(id.rotation.w()) - 1.0) < 1e-9);
    REQUIRE(std::abs(p.rotation.norm() - 1.0) < 1e-9);
  }
}

TEST_CASE("depth_to_pointmap principal ray and 45-degree ray") {
  Intrinsics intr(1.0, 1.0, 0.0, 0.0, 2, 2);
  DepthMap d{GridF(2, 2, 1.0)};
  Pointmap pm = depth_to_pointmap(d, intr);
  REQUIRE((pm.points.at(0, 0) - Vec3(0, 0, 1)).norm() == 0.0);

  d.values.at(0, 1) = 2.0;  // u = cx + fx
  pm = depth_to_pointmap(d, intr);
  REQUIRE((pm.points.at(0, 1) - Vec3(2, 0, 2)).norm() == 0.0);

  d.values.at(1, 1) = -1.0;
  REQUIRE_THROWS_AS(depth_to_pointmap(d, intr), std::invalid_argument);
}

TEST_CASE("projection/back-projection round trip on random depths") {
  Intrinsics intr = Intrinsics::centered(37.5, 9, 7);
  Rng r(17);
  DepthMap d{GridF(7, 9)};
  for (size_t i = 0; i < d.values.size(); ++i) d.values[i] = 0.5 + 5.0 * r.uniform();
  Pointmap pm = depth_to_pointmap(d, intr);
  for (int v = 0; v < 7; ++v)
    for (int u = 0; u < 9; ++u) {
      Vec2 p = project(pm.points.at(v, u), intr);
      REQUIRE((p - Vec2(u, v)).norm() < 1e-6);
    }
}

TEST_CASE("transform_pointmap identity, translation, inverse, rigidity") {
  Rng r(19);
  Pointmap pm;
  pm.points = Grid<Vec3>(4, 5);
  for (size_t i = 0; i < pm.points.size(); ++i)
    pm.points[i] = Vec3(r.normal(), r.normal(), 2.0 + r.uniform());

  Pointmap same = transform_pointmap(Pose::identity(), pm);
  for (size_t i = 0; i < pm.points.size(); ++i)
    REQUIRE((same.points[i] - pm.points[i]).norm() == 0.0);
  REQUIRE(same.frame == PointFrame::World);

  Pose shift;
  shift.translation = Vec3(1, 0, 0);
  Pointmap moved = transform_pointmap(shift, pm);
  for (size_t i = 0; i < pm.points.size(); ++i)
    REQUIRE(moved.points[i].x() == Catch::Approx(pm.points[i].x() + 1.0).margin(1e-15));

  Pose p = random_pose(r);
  Pointmap back = transform_pointmap(p.inverse(), transform_pointmap(p, pm));
  double dist_before = (pm.points[0] - pm.points[7]).norm();
  Pointmap fwd = transform_pointmap(p, pm);
  double dist_after = (fwd.points[0] - fwd.points[7]).norm();
  REQUIRE(std::abs(dist_before - dist_after) < 1e-9);
  for (size_t i = 0; i < pm.points.size(); ++i)
    REQUIRE((back.points[i] - pm.points[i]).norm() < 1e-9);
}

TEST_CASE("induced_flow is zero under identical poses") {
  Intrinsics intr = Intrinsics::centered(30.0, 8, 8);
  DepthMap d{GridF(8, 8, 3.0)};
  Pose p;
  p.translation = Vec3(0.3, -0.1, 0.2);
  FlowField f = induced_flow(d, p, p, intr);
  for (size_t i = 0; i < f.uv.size(); ++i) {
    REQUIRE(f.valid[i] == 1);
    REQUIRE(f.uv[i].norm() < 1e-9);
  }
}

TEST_CASE("induced_flow planar closed form under x-translation") {
  double fx = 25.0, Z = 4.0, tx = 0.2;
  Intrinsics intr = Intrinsics::centered(fx, 16, 16);
  DepthMap d{GridF(16, 16, Z)};
  Pose a;  // identity
  Pose b;
  b.translation = Vec3(tx, 0, 0);
  FlowField f = induced_flow(d, a, b, intr);
  Vec2 expect(-fx * tx / Z, 0.0);
  int checked = 0;
  for (size_t i = 0; i < f.uv.size(); ++i) {
    if (!f.valid[i]) continue;
    REQUIRE((f.uv[i] - expect).norm() < 1e-9);
    ++checked;
  }
  REQUIRE(checked > 100);
}

TEST_CASE("induced_flow marks out-of-frustum pixels invalid with zero flow") {
  Intrinsics intr = Intrinsics::centered(20.0, 8, 8);
  DepthMap d{GridF(8, 8, 1.0)};
  Pose a;
  Pose b;
  b.translation = Vec3(5.0, 0, 0);  // large baseline pushes pixels outside
  FlowField f = induced_flow(d, a, b, intr);
  bool any_invalid = false;
  for (size_t i = 0; i < f.uv.size(); ++i)
    if (!f.valid[i]) {
      any_invalid = true;
      REQUIRE(f.uv[i].norm() == 0.0);
    }
  REQUIRE(any_invalid);
}

TEST_CASE("PFM round trip preserves doubles within float precision") {
  fs::path dir = tmp_dir();
  Rng r(23);
  GridF g(5, 7);
  for (size_t i = 0; i < g.size(); ++i) g[i] = 10.0 * r.normal();
  std::string path = (dir / "grid.pfm").string();
  write_pfm(path, g);
  GridF back = read_pfm(path);
  REQUIRE(back.same_shape(g));
  for (size_t i = 0; i < g.size(); ++i)
    REQUIRE(back[i] == Catch::Approx(g[i]).margin(std::abs(g[i]) * 1e-6 + 1e-6));
  REQUIRE_THROWS_AS(read_pfm((dir / "nope.pfm").string()), IoError);
}

TEST_CASE("PFM pointmap and flow round trips") {
  fs::path dir = tmp_dir();
  Rng r(29);
  Pointmap pm;
  pm.frame = PointFrame::Camera;
  pm.points = Grid<Vec3>(4, 6);
  for (size_t i = 0; i < pm.points.size(); ++i)
    pm.points[i] = Vec3(r.normal(), r.normal(), 1.0 + r.uniform());
  std::string ppath = (dir / "pm.pfm").string();
  write_pfm_pointmap(ppath, pm);
  Pointmap pback = read_pfm_pointmap(ppath, PointFrame::Camera);
  REQUIRE(pback.frame == PointFrame::Camera);
  for (size_t i = 0; i < pm.points.size(); ++i)
    REQUIRE((pback.points[i] - pm.points[i]).norm() < 1e-5);

  FlowField f;
  f.uv = Grid<Vec2>(4, 6, Vec2(0.5, -1.25));
  f.valid = Grid<uint8_t>(4, 6, 1);
  f.valid.at(2, 3) = 0;
  f.uv.at(2, 3) = Vec2::Zero();
  std::string fpath = (dir / "flow.pfm").string();
  write_pfm_flow(fpath, f);
  FlowField fb = read_pfm_flow(fpath);
  for (size_t i = 0; i < f.uv.size(); ++i) {
    REQUIRE(fb.valid[i] == f.valid[i]);
    REQUIRE((fb.uv[i] - f.uv[i]).norm() < 1e-6);
  }
}

TEST_CASE("PPM and PGM round trips on quantization-exact values") {
  fs::path dir = tmp_dir();
  Image img(3, 4);
  Rng r(31);
  for (size_t i = 0; i < img.size(); ++i)
    img[i] = Vec3(r.uniform_int(0, 255) / 255.0, r.uniform_int(0, 255) / 255.0,
                  r.uniform_int(0, 255) / 255.0);
  std::string ipath = (dir / "img.ppm").string();
  write_ppm(ipath, img);
  Image iback = read_ppm(ipath);
  for (size_t i = 0; i < img.size(); ++i) REQUIRE((iback[i] - img[i]).norm() < 1e-12);

  GridF m(3, 4);
  for (size_t i = 0; i < m.size(); ++i) m[i] = r.uniform_int(0, 255) / 255.0;
  std::string mpath = (dir / "mask.pgm").string();
  write_pgm(mpath, m);
  GridF mback = read_pgm(mpath);
  for (size_t i = 0; i < m.size(); ++i) REQUIRE(mback[i] == Catch::Approx(m[i]).margin(1e-12));
}

TEST_CASE("trajectory text round trip") {
  fs::path dir = tmp_dir();
  Rng r(37);
  std::vector<TrajectoryEntry> traj;
  for (int i = 0; i < 5; ++i) {
    TrajectoryEntry e;
    e.timestamp = 0.1 * i;
    e.pose = random_pose(r);
    traj.push_back(e);
  }
  std::string path = (dir / "traj.txt").string();
  write_trajectory(path, traj);
  auto back = read_trajectory(path);
  REQUIRE(back.size() == traj.size());
  for (size_t i = 0; i < traj.size(); ++i) {
    REQUIRE(back[i].timestamp == Catch::Approx(traj[i].timestamp).margin(1e-9));
    REQUIRE((back[i].pose.translation - traj[i].pose.translation).norm() < 1e-12);
    REQUIRE(std::abs(std::abs(back[i].pose.rotation.dot(traj[i].pose.rotation)) - 1.0) < 1e-12);
  }
}

TEST_CASE("cloud serialization round trip is bitwise") {
  fs::path dir = tmp_dir();
  Rng r(41);
  GaussianCloud cloud;
  for (int i = 0; i < 17; ++i) {
    Gaussian g;
    g.mu = Vec3(r.normal(), r.normal(), r.normal());
    g.log_scale = Vec3(r.normal(), r.normal(), r.normal()) * 0.1;
    g.rotation = Vec4(1.0, 0.1 * r.normal(), 0.1 * r.normal(), 0.1 * r.normal());
    g.color = Vec3(r.uniform(), r.uniform(), r.uniform());
    g.opacity_logit = r.normal();
    g.staticness_logit = r.normal();
    cloud.gaussians.push_back(g);
  }
  std::string path = (dir / "cloud.bin").string();
  write_cloud(path, cloud);
  GaussianCloud back = read_cloud(path);
  REQUIRE(back.size() == cloud.size());
  for (size_t i = 0; i < cloud.size(); ++i) {
    REQUIRE(back.gaussians[i].mu == cloud.gaussians[i].mu);
    REQUIRE(back.gaussians[i].log_scale == cloud.gaussians[i].log_scale);
    REQUIRE(back.gaussians[i].rotation == cloud.gaussians[i].rotation);
    REQUIRE(back.gaussians[i].color == cloud.gaussians[i].color);
    REQUIRE(back.gaussians[i].opacity_logit == cloud.gaussians[i].opacity_logit);
    REQUIRE(back.gaussians[i].staticness_logit == cloud.gaussians[i].staticness_logit);
  }

  // writing twice is byte-identical
  std::string path2 = (dir / "cloud2.bin").string();
  write_cloud(path2, cloud);
  std::ifstream a(path, std::ios::binary), b(path2, std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
  std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
  REQUIRE(sa == sb);
}

TEST_CASE("key-value config parses sections and rejects unknown keys by line") {
  fs::path dir = tmp_dir();
  std::string path = (dir / "run.cfg").string();
  {
    std::ofstream f(path);
    f << "# comment\n"
      << "scene.width = 32\n"
      << "\n"
      << "train.lambda_ssim = 0.25\n"
      << "train.refine_poses = true\n"
      << "bogus.key = 1\n";
  }
  KeyValueConfig cfg = KeyValueConfig::from_file(path);
  REQUIRE(cfg.get_int("scene.width", 0) == 32);
  REQUIRE(cfg.get_double("train.lambda_ssim", 0.0) == 0.25);
  REQUIRE(cfg.get_bool("train.refine_poses", false));
  REQUIRE(cfg.get_string("absent", "dflt") == "dflt");
  try {
    cfg.reject_unknown({"scene.width", "train.lambda_ssim", "train.refine_poses"});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    REQUIRE(msg.find("bogus.key") != std::string::npos);
    REQUIRE(msg.find("6") != std::string::npos);  // offending line number
  }

  {
    std::ofstream f(path);
    f << "no equals sign here\n";
  }
  REQUIRE_THROWS_AS(KeyValueConfig::from_file(path), ConfigError);
}
