#include <set>

#include "doctest.h"
#include "iscom/roi.hpp"
#include "oracles.hpp"

using namespace iscom;
using namespace iscom::roi;

namespace {

Pose pose_at(const Vec3& p, double t, const Quat& q = Quat::Identity()) {
  Pose pose;
  pose.position = p;
  pose.orientation = q;
  pose.timestamp = t;
  return pose;
}

PointCloud cloud_of(std::vector<Vec3> pts) {
  PointCloud c;
  c.points = std::move(pts);
  return c;
}

// n points jittered inside the unit cell whose minimum corner is `lo`.
void fill_cell(std::vector<Vec3>& out, Rng& rng, const Vec3& lo, double size, int n) {
  for (int i = 0; i < n; ++i) {
    out.push_back(lo + Vec3(rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)) *
                           size);
  }
}

}  // namespace

TEST_CASE("predict_pose: stationary and linear histories") {
  PoseHistory still{{pose_at({1, 2, 3}, 0), pose_at({1, 2, 3}, 1), pose_at({1, 2, 3}, 2)}};
  for (const auto& p : predict_pose(still, 4)) {
    CHECK(p.position == Vec3(1, 2, 3));
    CHECK(p.orientation.isApprox(Quat::Identity(), 1e-12));
  }
  PoseHistory line{{pose_at({0, 0, 0}, 0), pose_at({1, 0, 0}, 1)}};
  const auto pred = predict_pose(line, 2);
  REQUIRE(pred.size() == 2);
  CHECK(pred[0].position.isApprox(Vec3(2, 0, 0)));
  CHECK(pred[1].position.isApprox(Vec3(3, 0, 0)));
  CHECK(pred[1].timestamp == doctest::Approx(3.0));
}

TEST_CASE("predict_pose: constant angular velocity matches rotation-matrix composition") {
  const double step = 10.0 * M_PI / 180.0;
  const Quat q0(Eigen::AngleAxisd(0.3, Vec3(1, 2, 0.5).normalized()));
  const Quat q1 = Quat(Eigen::AngleAxisd(step, Vec3::UnitZ())) * q0;
  PoseHistory h{{pose_at({0, 0, 0}, 0, q0), pose_at({0, 0, 0}, 0.1, q1)}};
  const auto pred = predict_pose(h, 3);
  const Eigen::Matrix3d rel = q1.toRotationMatrix() * q0.toRotationMatrix().transpose();
  const Eigen::Matrix3d expected = rel * rel * rel * q1.toRotationMatrix();
  CHECK((pred[2].orientation.toRotationMatrix() - expected).cwiseAbs().maxCoeff() <= 1e-6);
  const double angle = Eigen::AngleAxisd(pred[2].orientation * q1.conjugate()).angle();
  CHECK(angle == doctest::Approx(3 * step).epsilon(1e-9));
  CHECK(std::abs(pred[2].orientation.norm() - 1.0) < 1e-12);
}

TEST_CASE("predict_pose: errors") {
  CHECK_THROWS_AS(predict_pose(PoseHistory{{pose_at({0, 0, 0}, 0)}}, 1), InvalidArgument);
  CHECK_THROWS_AS(predict_pose(PoseHistory{{pose_at({0, 0, 0}, 1), pose_at({1, 0, 0}, 1)}}, 1),
                  InvalidArgument);
}

TEST_CASE("estimate_flow: static scene and rigid translations") {
  Rng rng(1);
  const PointCloud a = cloud_of(oracle::random_points(rng, 40));
  for (const auto& v : estimate_flow(a, a).vectors) CHECK(v == Vec3::Zero());

  // Isolated points at least 1 m apart, shifted by 0.1 m.
  std::vector<Vec3> curr;
  for (int i = 0; i < 5; ++i) curr.emplace_back(2.0 * i, 0, 0);
  std::vector<Vec3> prev;
  for (const auto& p : curr) prev.push_back(p - Vec3(0.1, 0, 0));
  for (const auto& v : estimate_flow(cloud_of(prev), cloud_of(curr)).vectors) {
    CHECK(v.isApprox(Vec3(0.1, 0, 0), 1e-12));
  }
}

TEST_CASE("estimate_flow: recovers a small rigid shift on well-spaced points") {
  Rng rng(2);
  std::vector<Vec3> prev;
  while (prev.size() < 50) {
    const Vec3 c(rng.uniform(0, 3), rng.uniform(0, 3), rng.uniform(0, 3));
    bool ok = true;
    for (const auto& p : prev) ok &= (p - c).norm() >= 0.1;
    if (ok) prev.push_back(c);
  }
  const Vec3 shift(0.01 / std::sqrt(3.0), 0.01 / std::sqrt(3.0), 0.01 / std::sqrt(3.0));
  std::vector<Vec3> curr;
  for (const auto& p : prev) curr.push_back(p + shift);
  for (const auto& v : estimate_flow(cloud_of(prev), cloud_of(curr)).vectors) {
    CHECK((v - shift).norm() < 1e-12);
  }
}

TEST_CASE("dynamic_saliency") {
  Rng rng(3);
  const PointCloud c = cloud_of(oracle::random_points(rng, 300, 0, 2));
  const BlockGrid g = partition(c, 0.5);
  FlowField zero{std::vector<Vec3>(c.size(), Vec3::Zero())};
  for (const auto& [id, s] : dynamic_saliency(g, zero)) CHECK(s == 0.0);

  FlowField constant{std::vector<Vec3>(c.size(), Vec3(0, 0.2, 0))};
  for (const auto& [id, s] : dynamic_saliency(g, constant)) CHECK(s == doctest::Approx(0.2));

  FlowField mixed;
  for (std::size_t i = 0; i < c.size(); ++i) {
    mixed.vectors.emplace_back(rng.normal(), rng.normal(), rng.normal());
  }
  const auto s = dynamic_saliency(g, mixed);
  for (const auto& [id, idx] : g.blocks) {
    double sum = 0;
    for (std::size_t i : idx) {
      const Vec3& e = mixed.vectors[i];
      sum += std::sqrt(e.x() * e.x() + e.y() * e.y() + e.z() * e.z());
    }
    CHECK(std::abs(s.at(id) - sum / idx.size()) <= 1e-12);
  }
}

TEST_CASE("viewpoint_descriptor: hand-evaluated cases") {
  const Vec3 eye(0, 0, 0), w(0, 0, 1);
  CHECK(viewpoint_descriptor({0, 0, M_E}, eye, w, 1.0) == doctest::Approx(1.0));
  CHECK(viewpoint_descriptor({0, 0, 5}, eye, w, 0.0) == doctest::Approx(1.0));
  CHECK(viewpoint_descriptor({5, 0, 0}, eye, w, 0.0) == doctest::Approx(0.0));
  CHECK(viewpoint_descriptor({0, 0, M_E * M_E}, eye, w, 0.5) == doctest::Approx(0.75));
  // Closer than e is clamped; at the eye the angle term is 1.
  CHECK(viewpoint_descriptor({0, 0, 0.5}, eye, w, 1.0) == doctest::Approx(1.0));
  CHECK(viewpoint_descriptor(eye, eye, w, 0.5) == doctest::Approx(1.0));
  CHECK_THROWS_AS(viewpoint_descriptor({1, 0, 0}, eye, Vec3::Zero(), 0.5), InvalidArgument);
}

TEST_CASE("texture_descriptor: identical neighbors give zero") {
  BlockFeatures f{{0.25, 0.25, 0.5, 0.0}, {0, 0, 0, 0, 0, 0, 0, 0}};
  CHECK(texture_descriptor(f, {f, f, f}, 0.35) == 0.0);
}

TEST_CASE("texture_descriptor: R=2 hand computation") {
  // 4-bin geometry and 4-bin texture histograms.
  const BlockFeatures ti{{0.5, 0.5, 0.0, 0.0}, {1.0, 0.0, 0.0, 0.0}};
  const BlockFeatures t1{{0.25, 0.25, 0.25, 0.25}, {0.0, 1.0, 0.0, 0.0}};
  const BlockFeatures t2{{1.0, 0.0, 0.0, 0.0}, {1.0, 0.0, 0.0, 0.0}};
  const double eps = 1e-8, lambda = 0.35;
  // chi2(ti.geo, t1.geo) = 2 * 0.0625 / 0.75 + 2 * 0.0625 / 0.25
  const double chi1 = 2 * 0.0625 / (0.75 + eps) + 2 * 0.0625 / (0.25 + eps);
  const double gam1 = 1.0 / (1.0 + eps) + 1.0 / (1.0 + eps);
  const double d1 = std::sqrt(4 * 0.0625 + 1.0 + 1.0);
  // chi2(ti.geo, t2.geo) = 0.25 / 1.5 + 0.25 / 0.5, textures identical.
  const double chi2 = 0.25 / (1.5 + eps) + 0.25 / (0.5 + eps);
  const double d2 = std::sqrt(0.25 + 0.25);
  const double expected =
      1.0 - std::exp(-0.5 * ((chi1 + lambda * gam1) / (1 + d1) + chi2 / (1 + d2)));
  CHECK(std::abs(texture_descriptor(ti, {t1, t2}, lambda) - expected) <= 1e-12);
  CHECK(texture_descriptor(ti, {t1, t2}, lambda) < 1.0);
}

TEST_CASE("texture_descriptor: errors and monotonicity in a single psi term") {
  const BlockFeatures a{{0.5, 0.5}, {0, 0}};
  CHECK_THROWS_AS(texture_descriptor(a, {}, 0.35), InvalidArgument);
  CHECK_THROWS_AS(texture_descriptor(a, {BlockFeatures{{1.0}, {0, 0}}}, 0.35), InvalidArgument);
  // Growing the texture gap of one neighbor raises psi^2 while the L2 term
  // grows slower, so T must increase.
  const BlockFeatures base{{0.5, 0.5}, {1.0, 0.0}};
  const BlockFeatures fixed{{0.6, 0.4}, {1.0, 0.0}};
  double prev = -1;
  for (double lam : {0.0, 0.2, 0.35, 0.7, 1.5}) {
    const BlockFeatures other{{0.5, 0.5}, {0.0, 1.0}};
    const double t = texture_descriptor(base, {fixed, other}, lam);
    CHECK(t > prev);
    CHECK(t >= 0.0);
    CHECK(t < 1.0);
    prev = t;
  }
}

TEST_CASE("block_features") {
  Rng rng(4);
  PointCloud c;
  for (int i = 0; i < 8000; ++i) c.points.emplace_back(rng.uniform(), rng.uniform(), rng.uniform());
  std::vector<std::size_t> all(c.size());
  std::iota(all.begin(), all.end(), 0);
  const auto f = block_features(c, all, Vec3::Zero(), 1.0, 2);
  REQUIRE(f.geometry.size() == 8);
  for (double g : f.geometry) CHECK(std::abs(g - 0.125) <= 0.02);
  for (double t : f.texture) CHECK(t == 0.0);

  PointCloud corner = cloud_of({{0.1, 0.1, 0.1}, {0.2, 0.2, 0.2}, {0.3, 0.1, 0.2}});
  const auto one_hot = block_features(corner, {0, 1, 2}, Vec3::Zero(), 1.0, 2);
  CHECK(one_hot.geometry[0] == doctest::Approx(1.0));
  CHECK(std::accumulate(one_hot.geometry.begin(), one_hot.geometry.end(), 0.0) ==
        doctest::Approx(1.0));

  corner.colors = std::vector<Rgb>{{0, 0, 0}, {255, 255, 255}, {255, 255, 255}};
  const auto colored = block_features(corner, {0, 1, 2}, Vec3::Zero(), 1.0, 2);
  CHECK(colored.texture[0] == doctest::Approx(1.0 / 3));
  CHECK(colored.texture[7] == doctest::Approx(2.0 / 3));
}

TEST_CASE("coarse_select: keep-all on a static scene equals frustum culling") {
  Rng rng(5);
  PointCloud frame = cloud_of(oracle::random_points(rng, 2000, -3, 3));
  RoiConfig cfg;
  cfg.coarse_keep_fraction = 1.0;
  CameraIntrinsics intr{80, 1.0, 0.1, 10};
  PoseHistory h{{pose_at({0, 0, -4}, 0), pose_at({0, 0, -4}, 1)}};
  const auto res = coarse_select(frame, frame, h, cfg, intr);
  Camera cam;
  cam.pose = pose_at({0, 0, -4}, 2);
  cam.vertical_fov_deg = 80;
  cam.far = 10;
  CHECK(res.cloud.points == frustum_cull(frame, cam).points);
}

TEST_CASE("coarse_select: the moving blocks are the ones retained") {
  Rng rng(6);
  // Ten cells along x, 20 points each; cells 2, 5 and 7 move.
  std::vector<Vec3> prev, curr;
  const std::set<int> moving{2, 5, 7};
  for (int b = 0; b < 10; ++b) {
    std::vector<Vec3> pts;
    fill_cell(pts, rng, Vec3(b * 1.0, 0, 0), 1.0, 20);
    for (const auto& p : pts) {
      prev.push_back(p);
      curr.push_back(moving.count(b) ? p + Vec3(0, 0, 0.05) : p);
    }
  }
  // Anchor the grid at the origin so cell b holds exactly the points of block b.
  prev.emplace_back(0, 0, 0);
  curr.emplace_back(0, 0, 0);
  RoiConfig cfg;
  cfg.coarse_cell_size = 1.0;
  cfg.coarse_keep_fraction = 0.3;
  CameraIntrinsics intr{120, 4.0, 0.1, 100};
  PoseHistory h{{pose_at({5, 0.5, -20}, 0), pose_at({5, 0.5, -20}, 1)}};
  const auto res = coarse_select(cloud_of(curr), cloud_of(prev), h, cfg, intr);
  REQUIRE(res.total_blocks == 10);
  REQUIRE(res.kept_blocks.size() == 3);
  std::set<int> got;
  for (auto id : res.kept_blocks) got.insert(static_cast<int>(id));  // id == x index here
  CHECK(got == moving);
  for (std::size_t i = 0; i < res.cloud.size(); ++i) {
    CHECK(moving.count(static_cast<int>(std::floor(res.cloud.points[i].x()))) == 1);
  }
}

TEST_CASE("coarse_select: default keeps ceil(0.6 B) blocks and a subset of the frustum") {
  Rng rng(7);
  PointCloud prev = cloud_of(oracle::random_points(rng, 3000, -3, 3));
  PointCloud curr = prev;
  for (auto& p : curr.points) p += Vec3(rng.normal(0, 0.01), 0, 0);
  RoiConfig cfg;
  CameraIntrinsics intr{70, 1.5, 0.1, 10};
  PoseHistory h{{pose_at({0, 0, -5}, 0), pose_at({0, 0.1, -5}, 1)}};
  const auto res = coarse_select(curr, prev, h, cfg, intr);
  CHECK(res.kept_blocks.size() == ceil_count(0.6, res.total_blocks));
  Camera cam;
  cam.pose = res.predicted_pose;
  cam.vertical_fov_deg = 70;
  cam.aspect = 1.5;
  cam.far = 10;
  std::set<std::size_t> visible;
  for (std::size_t i = 0; i < curr.size(); ++i) {
    if (in_frustum(curr.points[i], cam)) visible.insert(i);
  }
  for (std::size_t i : res.source_indices) CHECK(visible.count(i) == 1);

  // Ranking is invariant under a uniform scaling of the flow.
  class Scaled : public FlowEstimator {
   public:
    explicit Scaled(double s) : s_(s) {}
    FlowField estimate(const PointCloud& p, const PointCloud& c) const override {
      auto f = NearestNeighborFlow{}.estimate(p, c);
      for (auto& v : f.vectors) v *= s_;
      return f;
    }

   private:
    double s_;
  };
  for (double s : {0.25, 4.0, 1024.0}) {
    const auto scaled = coarse_select(curr, prev, h, cfg, intr, ConstantVelocityPredictor{},
                                      Scaled(s));
    CHECK(scaled.kept_blocks == res.kept_blocks);
  }

  RoiConfig by_points = cfg;
  by_points.keep_mode = KeepMode::kPointCount;
  const auto pts = coarse_select(curr, prev, h, by_points, intr);
  CHECK(pts.cloud.size() >= ceil_count(0.6, res.frustum_points));
}

TEST_CASE("coarse_select: empty frustum is flagged") {
  PointCloud frame = cloud_of({{0, 0, -10}});
  PoseHistory h{{pose_at({0, 0, 0}, 0), pose_at({0, 0, 0}, 1)}};
  const auto res = coarse_select(frame, frame, h, RoiConfig{}, CameraIntrinsics{});
  CHECK(res.empty_frustum);
  CHECK(res.cloud.empty());
}

TEST_CASE("fine_select: constant saliency keeps every block at r_max") {
  // Identically populated blocks give T = 0 everywhere, hence constant saliency.
  std::vector<Vec3> pts;
  for (int b = 0; b < 4; ++b) {
    for (int i = 0; i < 12; ++i) {
      pts.push_back(Vec3(b * 1.0, 0, 0));
      pts.push_back(Vec3(b * 1.0 + 0.6, 0, 0));
    }
  }
  RoiConfig cfg;
  cfg.fine_cell_size = 1.0;
  cfg.r_max = 0.8;
  const auto res = fine_select(cloud_of(pts), {1.5, 0, -5}, {0, 0, 1}, cfg, 1);
  REQUIRE(res.ratios.size() == 4);
  for (double r : res.ratios) CHECK(r == doctest::Approx(0.8));
  CHECK(res.cloud.size() == 4 * ceil_count(0.8, 24));
}

TEST_CASE("fine_select: min-max endpoints map to r_min and r_max") {
  // Two blocks share the same texture term by symmetry; the one facing the
  // viewer more directly has the higher saliency.
  std::vector<Vec3> pts;
  Rng rng(9);
  fill_cell(pts, rng, Vec3(0, 0, 0), 1.0, 30);
  for (int i = 0; i < 30; ++i) pts.push_back(Vec3(5.1, 0.1, 0.1));
  RoiConfig cfg;
  cfg.fine_cell_size = 1.0;
  cfg.beta = 0.0;
  cfg.r_min = 0.2;
  cfg.r_max = 0.9;
  const auto res = fine_select(cloud_of(pts), Vec3(0.5, 0.5, -5), Vec3(0, 0, 1), cfg, 3);
  REQUIRE(res.ratios.size() == 2);
  CHECK(res.saliency.texture[0] == doctest::Approx(res.saliency.texture[1]));
  CHECK(res.saliency.texture[0] > 0.0);
  CHECK(res.ratios.front() == doctest::Approx(0.9));
  CHECK(res.ratios.back() == doctest::Approx(0.2));
}

TEST_CASE("fine_select: cardinality, ratio bounds and determinism") {
  Rng rng(10);
  PointCloud c = cloud_of(oracle::random_points(rng, 3000, 0, 2));
  for (std::size_t i = 0; i < 600; ++i) c.points[i] *= 0.3;  // denser corner
  RoiConfig cfg;
  cfg.fine_cell_size = 0.4;
  const Vec3 eye(1, 1, -3), dir(0, 0, 1);
  const auto a = fine_select(c, eye, dir, cfg, 77);
  const auto b = fine_select(c, eye, dir, cfg, 77);
  CHECK(a.cloud.points == b.cloud.points);
  const BlockGrid g = partition(c, cfg.fine_cell_size);
  std::size_t expected = 0, k = 0;
  for (const auto& [id, idx] : g.blocks) {
    const double r = a.ratios[k++];
    CHECK(r >= cfg.r_min - 1e-12);
    CHECK(r <= cfg.r_max + 1e-12);
    expected += ceil_count(r, idx.size());
  }
  CHECK(a.cloud.size() == expected);
  for (std::size_t i = 0; i < a.saliency.block_ids.size(); ++i) {
    CHECK(a.saliency.static_[i] == a.saliency.viewpoint[i] * a.saliency.texture[i]);
    CHECK(a.saliency.texture[i] >= 0.0);
    CHECK(a.saliency.texture[i] < 1.0);
  }
  const auto js = a.saliency.to_json();
  CHECK(js["blocks"].size() == a.saliency.block_ids.size());
  CHECK(js["lambda"].get<double>() == doctest::Approx(0.35));
  CHECK(js["blocks"][0].contains("static"));
}

TEST_CASE("fine_select: single block keeps everything") {
  Rng rng(11);
  const auto res = fine_select(cloud_of(oracle::random_points(rng, 50, 0, 0.1)), {0, 0, -2},
                               {0, 0, 1}, RoiConfig{}, 1);
  CHECK(res.cloud.size() == 50);
  CHECK_THROWS_AS(fine_select(PointCloud{}, {0, 0, 0}, {0, 0, 1}, RoiConfig{}, 1),
                  InvalidArgument);
}

TEST_CASE("select_roi: identity bypass equals frustum culling") {
  Rng rng(12);
  const PointCloud prev = cloud_of(oracle::random_points(rng, 2500, -3, 3));
  PointCloud curr = prev;
  for (auto& p : curr.points) p += Vec3(0.02, 0, 0);
  RoiConfig cfg;
  cfg.coarse_keep_fraction = 1.0;
  cfg.r_min = cfg.r_max = 1.0;
  CameraIntrinsics intr{60, 1.3, 0.2, 7};
  PoseHistory h{{pose_at({0, 0, -4}, 0), pose_at({0, 0, -4}, 0.5)}};
  const auto roi = select_roi(curr, prev, h, cfg, intr, 5);
  Camera cam;
  cam.pose = pose_at({0, 0, -4}, 1);
  cam.vertical_fov_deg = 60;
  cam.aspect = 1.3;
  cam.near = 0.2;
  cam.far = 7;
  CHECK(roi.cloud.points == frustum_cull(curr, cam).points);
  for (std::size_t i = 0; i < roi.cloud.size(); ++i) {
    CHECK(roi.cloud.points[i] == curr.points[roi.source_indices[i]]);
  }
}
