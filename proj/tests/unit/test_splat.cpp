#include "catch_amalgamated.hpp"

#include "stillsplat/splat.hpp"

using namespace stillsplat;

namespace {

Intrinsics test_intr() { return Intrinsics(20.0, 20.0, 8.0, 8.0, 16, 16); }

GaussianCloud random_cloud(int n, Rng& r) {
  GaussianCloud cloud;
  for (int i = 0; i < n; ++i) {
    Gaussian g;
    double z = 4.0 + 3.0 * r.uniform();
    g.mu = Vec3(0.8 * z * (r.uniform() - 0.5), 0.8 * z * (r.uniform() - 0.5), z);
    g.log_scale = Vec3(std::log(0.25) + 0.3 * r.normal(), std::log(0.25) + 0.3 * r.normal(),
                       std::log(0.25) + 0.3 * r.normal());
    g.rotation = Vec4(1.0 + 0.2 * r.normal(), 0.3 * r.normal(), 0.3 * r.normal(),
                      0.3 * r.normal());
    g.color = Vec3(r.uniform(), r.uniform(), r.uniform());
    g.opacity_logit = r.uniform(-2.0, 1.0);
    g.staticness_logit = r.uniform(-2.0, 2.0);
    cloud.gaussians.push_back(g);
  }
  return cloud;
}

Pose random_pose_near_origin(Rng& r) {
  Pose p;
  p.rotation = Quat(1.0, 0.05 * r.normal(), 0.05 * r.normal(), 0.05 * r.normal());
  p.rotation.normalize();
  p.translation = 0.2 * Vec3(r.normal(), r.normal(), r.normal());
  return p;
}

Image random_upstream(const Intrinsics& intr, Rng& r) {
  Image up(intr.height, intr.width);
  for (size_t i = 0; i < up.size(); ++i) up[i] = Vec3(r.normal(), r.normal(), r.normal());
  return up;
}

double render_objective(const GaussianCloud& cloud, const Pose& pose, const Intrinsics& intr,
                        RenderMode mode, const Image& up) {
  RenderedImage img = render(cloud, pose, intr, mode);
  double s = 0;
  for (size_t i = 0; i < up.size(); ++i) s += up[i].dot(img.color[i]);
  return s;
}

// relative-error criterion used throughout: |a-f| / max(|a|,|f|,floor)
bool grads_match(double analytic, double fd, double floor = 1e-3) {
  double denom = std::max({std::abs(analytic), std::abs(fd), floor});
  return std::abs(analytic - fd) / denom < 1e-4;
}

}  // namespace

TEST_CASE("Gaussian covariance is symmetric positive definite") {
  Rng r(70);
  for (int k = 0; k < 10; ++k) {
    Gaussian g;
    g.log_scale = Vec3(r.normal(), r.normal(), r.normal()) * 0.5;
    g.rotation = Vec4(r.normal(), r.normal(), r.normal(), r.normal());
    if (g.rotation.norm() < 1e-3) continue;
    Mat3 S = g.covariance();
    REQUIRE((S - S.transpose()).norm() < 1e-12);
    Eigen::SelfAdjointEigenSolver<Mat3> es(S);
    REQUIRE(es.eigenvalues().minCoeff() > 0.0);
  }
}

TEST_CASE("project_gaussian isotropic on-axis closed form") {
  Intrinsics intr = test_intr();
  double sigma = 0.3, z = 5.0;
  Gaussian g;
  g.mu = Vec3(0, 0, z);
  g.log_scale = Vec3::Constant(std::log(sigma));
  ProjectedGaussian pg = project_gaussian(g, Pose::identity(), intr);
  REQUIRE(pg.visible);
  REQUIRE((pg.mean2d - Vec2(8, 8)).norm() < 1e-12);
  double expect = intr.fx * sigma / z;
  Mat2 core = pg.cov2d - kCovBlur * Mat2::Identity();
  REQUIRE(std::abs(core(0, 0) - expect * expect) < 1e-6);
  REQUIRE(std::abs(core(1, 1) - expect * expect) < 1e-6);
  REQUIRE(std::abs(core(0, 1)) < 1e-9);

  // doubling depth halves the projected standard deviation
  g.mu.z() = 2 * z;
  ProjectedGaussian pg2 = project_gaussian(g, Pose::identity(), intr);
  Mat2 core2 = pg2.cov2d - kCovBlur * Mat2::Identity();
  REQUIRE(std::abs(std::sqrt(core2(0, 0)) - 0.5 * std::sqrt(core(0, 0))) < 1e-6);
}

TEST_CASE("project_gaussian culls behind-camera Gaussians") {
  Gaussian g;
  g.mu = Vec3(0, 0, -1.0);
  REQUIRE_FALSE(project_gaussian(g, Pose::identity(), test_intr()).visible);
  g.mu = Vec3(0, 0, 0.0);
  REQUIRE_FALSE(project_gaussian(g, Pose::identity(), test_intr()).visible);
}

TEST_CASE("render single opaque Gaussian at its projected mean") {
  Intrinsics intr = test_intr();
  GaussianCloud cloud;
  Gaussian g;
  g.mu = Vec3(0, 0, 5.0);
  g.log_scale = Vec3::Constant(std::log(0.5));
  g.color = Vec3(1, 0, 0);
  g.opacity_logit = 12.0;
  g.staticness_logit = 50.0;  // s == 1 exactly
  cloud.gaussians.push_back(g);
  for (RenderMode mode : {RenderMode::Plain, RenderMode::Staticness}) {
    RenderedImage img = render(cloud, Pose::identity(), intr, mode);
    REQUIRE((img.color.at(8, 8) - Vec3(kAlphaClamp, 0, 0)).norm() < 1e-5);
    REQUIRE(img.transmittance.at(8, 8) == Catch::Approx(1.0 - kAlphaClamp).margin(1e-5));
  }
  // empty overlap renders background black with full transmittance
  RenderedImage img = render(cloud, Pose::identity(), intr);
  REQUIRE(img.color.at(0, 0).norm() == 0.0);
  REQUIRE(img.transmittance.at(0, 0) == 1.0);
  REQUIRE_THROWS_AS(render(GaussianCloud{}, Pose::identity(), intr), std::invalid_argument);
}

TEST_CASE("staticness mode with s=0 equals removal, bitwise") {
  Rng r(71);
  Intrinsics intr = test_intr();
  GaussianCloud cloud = random_cloud(4, r);
  Gaussian dyn = cloud.gaussians[1];
  dyn.staticness_logit = -1000.0;  // sigmoid underflows to exactly 0
  GaussianCloud with = cloud;
  with.gaussians[1] = dyn;
  GaussianCloud without;
  without.gaussians = {cloud.gaussians[0], cloud.gaussians[2], cloud.gaussians[3]};

  RenderedImage a = render(with, Pose::identity(), intr, RenderMode::Staticness);
  RenderedImage b = render(without, Pose::identity(), intr, RenderMode::Staticness);
  for (size_t i = 0; i < a.color.size(); ++i) {
    REQUIRE(a.color[i] == b.color[i]);
    REQUIRE(a.transmittance[i] == b.transmittance[i]);
  }
}

TEST_CASE("staticness mode with all s=1 equals plain mode exactly") {
  Rng r(72);
  Intrinsics intr = test_intr();
  GaussianCloud cloud = random_cloud(5, r);
  for (auto& g : cloud.gaussians) g.staticness_logit = 60.0;  // sigmoid rounds to 1.0
  Pose pose = random_pose_near_origin(r);
  RenderedImage a = render(cloud, pose, intr, RenderMode::Staticness);
  RenderedImage b = render(cloud, pose, intr, RenderMode::Plain);
  for (size_t i = 0; i < a.color.size(); ++i) {
    REQUIRE(a.color[i] == b.color[i]);
    REQUIRE(a.transmittance[i] == b.transmittance[i]);
  }
}

TEST_CASE("render is invariant to cloud storage order") {
  Rng r(73);
  Intrinsics intr = test_intr();
  GaussianCloud cloud = random_cloud(6, r);
  GaussianCloud shuffled;
  for (int i : {3, 0, 5, 2, 4, 1}) shuffled.gaussians.push_back(cloud.gaussians[i]);
  RenderedImage a = render(cloud, Pose::identity(), intr, RenderMode::Staticness);
  RenderedImage b = render(shuffled, Pose::identity(), intr, RenderMode::Staticness);
  for (size_t i = 0; i < a.color.size(); ++i)
    REQUIRE((a.color[i] - b.color[i]).cwiseAbs().maxCoeff() < 1e-7);
}

TEST_CASE("decreasing staticness never increases a Gaussian's own blend weight") {
  Rng r(74);
  Intrinsics intr = test_intr();
  GaussianCloud cloud = random_cloud(5, r);
  // isolate gaussian 2's weight: its color is a unit channel, everyone else black
  auto weight_image = [&](double logit) {
    GaussianCloud probe = cloud;
    for (auto& g : probe.gaussians) g.color = Vec3::Zero();
    probe.gaussians[2].color = Vec3(1, 0, 0);
    probe.gaussians[2].staticness_logit = logit;
    return render(probe, Pose::identity(), intr, RenderMode::Staticness);
  };
  RenderedImage hi = weight_image(1.5);
  RenderedImage lo = weight_image(-0.5);
  for (size_t i = 0; i < hi.color.size(); ++i)
    REQUIRE(lo.color[i].x() <= hi.color[i].x() + 1e-12);
}

TEST_CASE("render_backward zero upstream gives zero gradients") {
  Rng r(75);
  Intrinsics intr = test_intr();
  GaussianCloud cloud = random_cloud(3, r);
  Image up(intr.height, intr.width, Vec3::Zero());
  RenderGradients g = render_backward(cloud, Pose::identity(), intr, RenderMode::Staticness, up);
  for (size_t i = 0; i < cloud.size(); ++i) {
    REQUIRE(g.cloud.mu[i].norm() == 0.0);
    REQUIRE(g.cloud.log_scale[i].norm() == 0.0);
    REQUIRE(g.cloud.rotation[i].norm() == 0.0);
    REQUIRE(g.cloud.color[i].norm() == 0.0);
    REQUIRE(g.cloud.opacity_logit[i] == 0.0);
    REQUIRE(g.cloud.staticness_logit[i] == 0.0);
  }
  REQUIRE(g.pose.rotation.norm() == 0.0);
  REQUIRE(g.pose.translation.norm() == 0.0);
}

TEST_CASE("render_backward matches finite differences on random instances") {
  Intrinsics intr = test_intr();
  const double h = 1e-5;
  int checked = 0, failed = 0;
  for (uint64_t seed = 100; seed < 104; ++seed) {
    Rng r(seed);
    GaussianCloud cloud = random_cloud(4, r);
    Pose pose = random_pose_near_origin(r);
    Image up = random_upstream(intr, r);
    RenderMode mode = seed % 2 == 0 ? RenderMode::Staticness : RenderMode::Plain;
    RenderGradients g = render_backward(cloud, pose, intr, mode, up);

    auto fd = [&](auto&& setter) {
      GaussianCloud cp = cloud;
      Pose pp = pose;
      setter(cp, pp, h);
      double fplus = render_objective(cp, pp, intr, mode, up);
      cp = cloud;
      pp = pose;
      setter(cp, pp, -h);
      double fminus = render_objective(cp, pp, intr, mode, up);
      return (fplus - fminus) / (2 * h);
    };

    for (size_t i = 0; i < cloud.size(); ++i) {
      for (int k = 0; k < 3; ++k) {
        ++checked;
        if (!grads_match(g.cloud.mu[i][k],
                         fd([&](GaussianCloud& c, Pose&, double e) { c.gaussians[i].mu[k] += e; })))
          ++failed;
        ++checked;
        if (!grads_match(g.cloud.log_scale[i][k], fd([&](GaussianCloud& c, Pose&, double e) {
              c.gaussians[i].log_scale[k] += e;
            })))
          ++failed;
        ++checked;
        if (!grads_match(g.cloud.color[i][k], fd([&](GaussianCloud& c, Pose&, double e) {
              c.gaussians[i].color[k] += e;
            })))
          ++failed;
      }
      for (int k = 0; k < 4; ++k) {
        ++checked;
        if (!grads_match(g.cloud.rotation[i][k], fd([&](GaussianCloud& c, Pose&, double e) {
              c.gaussians[i].rotation[k] += e;
            })))
          ++failed;
      }
      ++checked;
      if (!grads_match(g.cloud.opacity_logit[i], fd([&](GaussianCloud& c, Pose&, double e) {
            c.gaussians[i].opacity_logit += e;
          })))
        ++failed;
      ++checked;
      if (!grads_match(g.cloud.staticness_logit[i], fd([&](GaussianCloud& c, Pose&, double e) {
            c.gaussians[i].staticness_logit += e;
          })))
        ++failed;
    }
    // pose: raw quaternion coefficients and translation
    for (int k = 0; k < 4; ++k) {
      ++checked;
      if (!grads_match(g.pose.rotation[k], fd([&](GaussianCloud&, Pose& p, double e) {
            double w = p.rotation.w() + (k == 0 ? e : 0);
            double x = p.rotation.x() + (k == 1 ? e : 0);
            double y = p.rotation.y() + (k == 2 ? e : 0);
            double z = p.rotation.z() + (k == 3 ? e : 0);
            p.rotation = Quat(w, x, y, z);  // raw, not renormalized
          })))
        ++failed;
    }
    for (int k = 0; k < 3; ++k) {
      ++checked;
      if (!grads_match(g.pose.translation[k], fd([&](GaussianCloud&, Pose& p, double e) {
            p.translation[k] += e;
          })))
        ++failed;
    }
  }
  INFO("checked " << checked << " partial derivatives, " << failed << " mismatches");
  REQUIRE(failed == 0);
}

TEST_CASE("clamped-alpha samples get zero geometry and opacity gradients") {
  Intrinsics intr = test_intr();
  GaussianCloud cloud;
  Gaussian g;
  g.mu = Vec3(0, 0, 5.0);
  g.log_scale = Vec3::Constant(std::log(1.0));
  g.color = Vec3(0.5, 0.5, 0.5);
  g.opacity_logit = 12.0;  // alpha*G clamps at the mean
  cloud.gaussians.push_back(g);
  Image up(intr.height, intr.width, Vec3::Zero());
  up.at(8, 8) = Vec3(1, 1, 1);  // only the clamped pixel contributes
  RenderGradients grads =
      render_backward(cloud, Pose::identity(), intr, RenderMode::Plain, up);
  REQUIRE(grads.cloud.opacity_logit[0] == 0.0);
  REQUIRE(grads.cloud.mu[0].norm() == 0.0);
}

TEST_CASE("fully occluded Gaussian gets zero staticness gradient") {
  Intrinsics intr = test_intr();
  GaussianCloud cloud;
  for (int i = 0; i < 2; ++i) {  // two opaque static front splats drive T below 1e-4
    Gaussian front;
    front.mu = Vec3(0, 0, 3.0 + 0.1 * i);
    front.log_scale = Vec3::Constant(std::log(6.0));
    front.color = Vec3(0.2, 0.4, 0.6);
    front.opacity_logit = 12.0;
    front.staticness_logit = 50.0;
    cloud.gaussians.push_back(front);
  }
  Gaussian back;
  back.mu = Vec3(0, 0, 6.0);
  back.log_scale = Vec3::Constant(std::log(0.5));
  back.color = Vec3(1, 0, 0);
  back.opacity_logit = 2.0;
  back.staticness_logit = 0.3;
  cloud.gaussians.push_back(back);

  // upstream only at the center pixel, where both front splats clamp and the
  // early-stop threshold is crossed before the rear Gaussian
  Image up(intr.height, intr.width, Vec3::Zero());
  up.at(8, 8) = Vec3(1, 1, 1);
  RenderGradients g = render_backward(cloud, Pose::identity(), intr, RenderMode::Staticness, up);
  REQUIRE(std::abs(g.cloud.staticness_logit[2]) < 1e-8);
}

TEST_CASE("write_cloud/read_cloud reject malformed headers") {
  namespace fsys = std::filesystem;
  auto dir = fsys::temp_directory_path() / "stillsplat_test_splat";
  fsys::create_directories(dir);
  auto path = (dir / "bad.cloud").string();
  {
    std::ofstream f(path, std::ios::binary);
    f << "not_a_cloud 1\n";
  }
  REQUIRE_THROWS_AS(read_cloud(path), IoError);
}
