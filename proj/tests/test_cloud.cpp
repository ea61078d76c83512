#include <cstdio>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "iscom/cloud.hpp"
#include "iscom/kdtree.hpp"
#include "iscom/ply.hpp"
#include "oracles.hpp"

using namespace iscom;

namespace {

PointCloud make_cloud(std::vector<Vec3> pts) {
  PointCloud c;
  c.points = std::move(pts);
  return c;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("iscom_test_" + name)).string();
}

// Random cloud whose coordinates are exactly representable as float32.
PointCloud float_cloud(Rng& rng, std::size_t n, bool color) {
  PointCloud c;
  for (std::size_t i = 0; i < n; ++i) {
    c.points.emplace_back(static_cast<float>(rng.uniform(-10, 10)),
                          static_cast<float>(rng.uniform(-10, 10)),
                          static_cast<float>(rng.uniform(-10, 10)));
  }
  if (color) {
    c.colors.emplace();
    for (std::size_t i = 0; i < n; ++i) {
      c.colors->push_back({static_cast<std::uint8_t>(rng.below(256)),
                           static_cast<std::uint8_t>(rng.below(256)),
                           static_cast<std::uint8_t>(rng.below(256))});
    }
  }
  return c;
}

}  // namespace

TEST_CASE("ceil_count absorbs floating noise") {
  CHECK(ceil_count(0.6, 100) == 60);
  CHECK(ceil_count(0.7, 10) == 7);
  CHECK(ceil_count(0.25, 7) == 2);
  CHECK(ceil_count(0.5, 4) == 2);
  CHECK(ceil_count(0.001, 10) == 1);
}

TEST_CASE("ply: three-vertex ascii file") {
  const std::string text =
      "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\n"
      "property float z\nend_header\n0 0 0\n1 0 0\n0 1 0\n";
  const PointCloud c = parse_ply(text);
  REQUIRE(c.size() == 3);
  CHECK_FALSE(c.has_color());
  CHECK(c.points[1] == Vec3(1, 0, 0));
  CHECK(c.points[2] == Vec3(0, 1, 0));
}

TEST_CASE("ply: round trip is bit exact for float32 coordinates") {
  Rng rng(11);
  for (bool color : {false, true}) {
    for (auto enc : {PlyEncoding::kAscii, PlyEncoding::kBinary}) {
      const PointCloud c = float_cloud(rng, 257, color);
      const std::string path = temp_path("roundtrip.ply");
      save_ply(c, path, enc);
      const PointCloud back = load_ply(path);
      REQUIRE(back.size() == c.size());
      CHECK(back.points == c.points);
      CHECK(back.has_color() == color);
      if (color) CHECK(*back.colors == *c.colors);
      std::filesystem::remove(path);
    }
  }
}

TEST_CASE("ply: binary and ascii encodings of one generator agree") {
  Rng rng(3);
  const PointCloud c = float_cloud(rng, 1000, false);
  const PointCloud a = parse_ply(format_ply(c, PlyEncoding::kAscii));
  const PointCloud b = parse_ply(format_ply(c, PlyEncoding::kBinary));
  auto key = [](const PointCloud& pc) {
    std::multiset<std::tuple<double, double, double>> s;
    for (const auto& p : pc.points) s.emplace(p.x(), p.y(), p.z());
    return s;
  };
  CHECK(key(a) == key(b));
  CHECK(key(a) == key(c));
}

TEST_CASE("ply: schema and size accounting") {
  SUBCASE("empty cloud") {
    const std::string bytes = format_ply(PointCloud{}, PlyEncoding::kAscii);
    CHECK(bytes.find("element vertex 0\n") != std::string::npos);
    CHECK(parse_ply(bytes).empty());
  }
  SUBCASE("color properties") {
    Rng rng(1);
    const std::string bytes = format_ply(float_cloud(rng, 4, true), PlyEncoding::kBinary);
    CHECK(bytes.find("property uchar red\nproperty uchar green\nproperty uchar blue\n") !=
          std::string::npos);
  }
  SUBCASE("binary size = header + 12 N") {
    Rng rng(2);
    const std::string bytes = format_ply(float_cloud(rng, 10000, false), PlyEncoding::kBinary);
    const std::string marker = "end_header\n";
    const std::size_t header = bytes.find(marker) + marker.size();
    CHECK(bytes.size() == header + 12 * 10000);
  }
}

TEST_CASE("ply: errors carry byte offsets") {
  SUBCASE("bad magic") {
    try {
      parse_ply("plx\nformat ascii 1.0\nend_header\n");
      FAIL("expected PlyError");
    } catch (const PlyError& e) {
      CHECK(e.offset() == 0);
    }
  }
  SUBCASE("unsupported property type") {
    const std::string text =
        "ply\nformat ascii 1.0\nelement vertex 1\nproperty quad x\nend_header\n";
    try {
      parse_ply(text);
      FAIL("expected PlyError");
    } catch (const PlyError& e) {
      CHECK(e.offset() == text.find("property quad"));
    }
  }
  SUBCASE("truncated binary payload") {
    Rng rng(5);
    std::string bytes = format_ply(float_cloud(rng, 10, false), PlyEncoding::kBinary);
    bytes.resize(bytes.size() - 5);
    try {
      parse_ply(bytes);
      FAIL("expected PlyError");
    } catch (const PlyError& e) {
      CHECK(e.offset() == bytes.size() - 3);  // the last float starts 3 bytes before the cut
    }
  }
  SUBCASE("big endian rejected") {
    CHECK_THROWS_AS(parse_ply("ply\nformat binary_big_endian 1.0\nend_header\n"), PlyError);
  }
}

TEST_CASE("ply: unknown properties are skipped with a warning") {
  const std::string text =
      "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float nx\n"
      "property float y\nproperty float z\nproperty uchar red\nproperty uchar green\n"
      "property uchar blue\nelement face 0\nproperty list uchar int vertex_indices\n"
      "end_header\n1 9 2 3 10 20 30\n4 9 5 6 40 50 60\n";
  std::vector<std::string> warnings;
  const PointCloud c = parse_ply(text, &warnings);
  REQUIRE(c.size() == 2);
  CHECK(c.points[1] == Vec3(4, 5, 6));
  CHECK((*c.colors)[0] == Rgb{10, 20, 30});
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].find("nx") != std::string::npos);
}

TEST_CASE("partition: examples") {
  SUBCASE("two corners") {
    const auto g = partition(make_cloud({{0.1, 0.1, 0.1}, {0.9, 0.9, 0.9}}), 0.5);
    CHECK(g.blocks.size() == 2);
  }
  SUBCASE("single point") {
    const auto g = partition(make_cloud({{3, 4, 5}}), 0.5);
    REQUIRE(g.blocks.size() == 1);
    CHECK(g.blocks.begin()->second == std::vector<std::size_t>{0});
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(partition(PointCloud{}, 1.0), InvalidArgument);
    CHECK_THROWS_AS(partition(make_cloud({{0, 0, 0}}), 0.0), InvalidArgument);
    CHECK_THROWS_AS(partition(make_cloud({{0, 0, NAN}}), 1.0), InvalidArgument);
  }
}

TEST_CASE("partition: completeness and cell bounds on random clouds") {
  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.below(1000);
    const PointCloud c = make_cloud(oracle::random_points(rng, n, 0, 1));
    const double cell = trial == 0 ? 0.25 : rng.uniform(0.05, 0.6);
    const auto g = partition(c, cell);
    std::vector<int> seen(n, 0);
    for (const auto& [id, idx] : g.blocks) {
      CHECK_FALSE(idx.empty());
      const Vec3 lo = g.cell_min(id);
      for (std::size_t i : idx) {
        ++seen[i];
        const auto cc = g.cell_coords(id);
        for (int a = 0; a < 3; ++a) {
          CHECK(c.points[i][a] >= lo[a] - 1e-12);
          const bool last = cc[a] == g.dims[a] - 1;
          if (!last) CHECK(c.points[i][a] < lo[a] + cell);
        }
      }
    }
    CHECK(std::all_of(seen.begin(), seen.end(), [](int s) { return s == 1; }));
    CHECK(g.point_count() == n);
  }
}

TEST_CASE("frustum: examples") {
  Camera cam;  // origin, looking +z, fov 90, aspect 1, near 0.1, far 100
  CHECK(in_frustum({0, 0, 1}, cam));
  CHECK_FALSE(in_frustum({0, 0, -1}, cam));
  CHECK_FALSE(in_frustum({0, 0, 0.05}, cam));
  CHECK(in_frustum({0.999999, 0, 1}, cam));
  CHECK(in_frustum({0, 0, 100}, cam));  // far plane is inclusive
  CHECK_FALSE(in_frustum({1.01, 0, 1}, cam));
  CHECK(frustum_cull(make_cloud({{0, 0, 1}, {0, 0, -2}}), cam).size() == 1);

  Camera bad = cam;
  bad.vertical_fov_deg = 180;
  CHECK_THROWS_AS(frustum_cull(make_cloud({{0, 0, 1}}), bad), InvalidArgument);
  bad = cam;
  bad.far = bad.near;
  CHECK_THROWS_AS(frustum_cull(make_cloud({{0, 0, 1}}), bad), InvalidArgument);
}

TEST_CASE("frustum: agrees with clip-space oracle") {
  Rng rng(8);
  for (int cam_i = 0; cam_i < 5; ++cam_i) {
    Camera cam;
    cam.pose.position = Vec3(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2));
    cam.pose.orientation = oracle::random_rotation(rng);
    cam.vertical_fov_deg = rng.uniform(20, 120);
    cam.aspect = rng.uniform(0.5, 2.0);
    cam.near = rng.uniform(0.05, 1.0);
    cam.far = cam.near + rng.uniform(1, 6);
    for (const auto& p : oracle::random_points(rng, 500, -6, 6)) {
      CHECK(in_frustum(p, cam) ==
            oracle::clip_space_inside(p, cam.pose.position, cam.pose.orientation,
                                      cam.vertical_fov_deg, cam.aspect, cam.near, cam.far));
    }
  }
}

TEST_CASE("frustum: enlarging far plane or fov never drops points") {
  Rng rng(9);
  const PointCloud c = make_cloud(oracle::random_points(rng, 2000, -10, 10));
  Camera cam;
  cam.vertical_fov_deg = 40;
  cam.far = 5;
  const auto base = frustum_cull(c, cam).size();
  Camera wider = cam;
  wider.vertical_fov_deg = 60;
  Camera deeper = cam;
  deeper.far = 8;
  std::size_t kept_both = 0;
  for (const auto& p : c.points) {
    if (in_frustum(p, cam)) {
      CHECK(in_frustum(p, wider));
      CHECK(in_frustum(p, deeper));
      ++kept_both;
    }
  }
  CHECK(kept_both == base);
}

TEST_CASE("downsample") {
  Rng rng(4);
  const PointCloud c = make_cloud(oracle::random_points(rng, 100));
  CHECK(downsample(c, 1.0, 1).points == c.points);
  const PointCloud d = downsample(c, 0.6, 42);
  CHECK(d.size() == 60);
  std::set<std::tuple<double, double, double>> members;
  for (const auto& p : c.points) members.emplace(p.x(), p.y(), p.z());
  for (const auto& p : d.points) CHECK(members.count({p.x(), p.y(), p.z()}) == 1);
  CHECK(downsample(c, 0.6, 42).points == d.points);
  CHECK(downsample(c, 0.6, 43).points != d.points);
  CHECK(downsample(PointCloud{}, 0.3, 1).empty());
  CHECK_THROWS_AS(downsample(c, 0.0, 1), InvalidArgument);
  CHECK_THROWS_AS(downsample(c, 1.5, 1), InvalidArgument);
  for (std::size_t n : {1, 7, 33, 250}) {
    for (double r : {0.05, 0.1, 0.3, 0.5, 0.7, 0.99}) {
      CHECK(sample_indices(n, r, 5).size() == ceil_count(r, n));
    }
  }
}

TEST_CASE("metrics: analytic values") {
  const PointCloud a = make_cloud({{0, 0, 0}});
  const PointCloud b = make_cloud({{1, 0, 0}});
  CHECK(chamfer_distance(a, b) == doctest::Approx(2.0));
  CHECK(hausdorff_distance(make_cloud({{0, 0, 0}, {2, 0, 0}}), a) == doctest::Approx(2.0));
  Rng rng(6);
  const PointCloud p = make_cloud(oracle::random_points(rng, 50));
  CHECK(chamfer_distance(p, p) == 0.0);
  CHECK(hausdorff_distance(p, p) == 0.0);
  CHECK_THROWS_AS(chamfer_distance(a, PointCloud{}), InvalidArgument);
  CHECK_THROWS_AS(hausdorff_distance(PointCloud{}, a), InvalidArgument);
}

TEST_CASE("metrics: match the pairwise oracle and are symmetric") {
  Rng rng(7);
  for (int t = 0; t < 100; ++t) {
    const auto p = oracle::random_points(rng, 1 + rng.below(40));
    const auto q = oracle::random_points(rng, 1 + rng.below(40));
    CHECK(std::abs(chamfer_distance(p, q) - oracle::chamfer(p, q)) <= 1e-9);
    CHECK(std::abs(hausdorff_distance(p, q) - oracle::hausdorff(p, q)) <= 1e-9);
    CHECK(chamfer_distance(p, q) == doctest::Approx(chamfer_distance(q, p)).epsilon(1e-12));
    CHECK(hausdorff_distance(p, q) == hausdorff_distance(q, p));
  }
}

TEST_CASE("metrics: normalization flag rescales both clouds") {
  const PointCloud a = make_cloud({{0, 0, 0}, {10, 0, 0}});
  const PointCloud b = make_cloud({{0, 0, 0}, {5, 0, 0}});
  CHECK(hausdorff_distance(a, b) == doctest::Approx(5.0));
  CHECK(hausdorff_distance(a, b, {.normalize = true}) == doctest::Approx(0.5));
}

TEST_CASE("kdtree: ties resolve to the lowest index like a linear scan") {
  std::vector<Vec3> pts;
  for (int i = 0; i < 40; ++i) pts.emplace_back(i % 2 == 0 ? 1.0 : -1.0, 0, 0);
  KdTree tree(pts);
  CHECK(tree.nearest(Vec3::Zero()).index == 0);
  Rng rng(10);
  const auto cloud = oracle::random_points(rng, 300);
  KdTree t2(cloud);
  for (const auto& q : oracle::random_points(rng, 200)) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < cloud.size(); ++i) {
      if ((cloud[i] - q).squaredNorm() < (cloud[best] - q).squaredNorm()) best = i;
    }
    CHECK(t2.nearest(q).index == best);
  }
}
