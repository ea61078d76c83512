#include "iscom/cloud.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "iscom/kdtree.hpp"

namespace iscom {

void PointCloud::validate() const {
  for (const auto& p : points) {
    if (!all_finite(p)) throw InvalidArgument("point cloud has a non-finite coordinate");
  }
  if (colors && colors->size() != points.size()) {
    throw InvalidArgument("color count does not match point count");
  }
}

PointCloud PointCloud::select(const std::vector<std::size_t>& indices) const {
  PointCloud out;
  out.frame_index = frame_index;
  out.points.reserve(indices.size());
  for (std::size_t i : indices) out.points.push_back(points.at(i));
  if (colors) {
    out.colors.emplace();
    out.colors->reserve(indices.size());
    for (std::size_t i : indices) out.colors->push_back((*colors)[i]);
  }
  return out;
}

void PointCloud::append(const PointCloud& other) {
  const bool had_points = !points.empty();
  points.insert(points.end(), other.points.begin(), other.points.end());
  if (other.colors && (colors || !had_points)) {
    if (!colors) colors.emplace();
    colors->insert(colors->end(), other.colors->begin(), other.colors->end());
  } else if (colors) {
    // Mixed color/no color: drop color rather than fabricate it.
    colors.reset();
  }
}

void Pose::validate() const {
  if (std::abs(orientation.norm() - 1.0) > 1e-6) {
    throw InvalidArgument("pose orientation is not a unit quaternion");
  }
  if (!all_finite(position) || !std::isfinite(timestamp)) {
    throw InvalidArgument("pose has non-finite fields");
  }
}

void Camera::validate() const {
  pose.validate();
  if (!(vertical_fov_deg > 0.0 && vertical_fov_deg < 180.0)) {
    throw InvalidArgument("camera fov must lie strictly inside (0, 180) degrees");
  }
  if (!(aspect > 0.0)) throw InvalidArgument("camera aspect must be positive");
  if (!(near > 0.0 && far > near)) {
    throw InvalidArgument("camera requires 0 < near < far");
  }
}

std::array<std::int64_t, 3> BlockGrid::cell_coords(std::int64_t id) const {
  const std::int64_t ix = id % dims[0];
  const std::int64_t rest = id / dims[0];
  return {ix, rest % dims[1], rest / dims[1]};
}

Vec3 BlockGrid::cell_min(std::int64_t id) const {
  const auto c = cell_coords(id);
  return origin + cell_size * Vec3(static_cast<double>(c[0]), static_cast<double>(c[1]),
                                   static_cast<double>(c[2]));
}

Vec3 BlockGrid::cell_center(std::int64_t id) const {
  return cell_min(id) + Vec3::Constant(0.5 * cell_size);
}

std::size_t BlockGrid::point_count() const {
  std::size_t n = 0;
  for (const auto& [id, idx] : blocks) n += idx.size();
  return n;
}

Aabb bounding_box(const std::vector<Vec3>& points) {
  if (points.empty()) throw InvalidArgument("bounding box of empty point set");
  Aabb box{points.front(), points.front()};
  for (const auto& p : points) {
    box.min = box.min.cwiseMin(p);
    box.max = box.max.cwiseMax(p);
  }
  return box;
}

BlockGrid partition(const PointCloud& cloud, double cell_size) {
  if (!(cell_size > 0.0) || !std::isfinite(cell_size)) {
    throw InvalidArgument("partition: cell size must be positive");
  }
  if (cloud.empty()) throw InvalidArgument("partition: empty cloud");
  cloud.validate();

  const Aabb box = bounding_box(cloud.points);
  BlockGrid grid;
  grid.origin = box.min;
  grid.cell_size = cell_size;
  for (int a = 0; a < 3; ++a) {
    const double extent = box.max[a] - box.min[a];
    grid.dims[a] = std::max<std::int64_t>(
        1, static_cast<std::int64_t>(std::ceil(extent / cell_size)));
  }
  for (std::size_t i = 0; i < cloud.points.size(); ++i) {
    std::array<std::int64_t, 3> c{};
    for (int a = 0; a < 3; ++a) {
      const auto raw = static_cast<std::int64_t>(
          std::floor((cloud.points[i][a] - grid.origin[a]) / cell_size));
      c[a] = std::clamp<std::int64_t>(raw, 0, grid.dims[a] - 1);
    }
    grid.blocks[grid.cell_id(c[0], c[1], c[2])].push_back(i);
  }
  return grid;
}

bool in_frustum(const Vec3& p, const Camera& camera) {
  const Vec3 d = p - camera.pose.position;
  const double z = d.dot(camera.pose.forward());
  if (z < camera.near || z > camera.far) return false;
  const double tan_half = std::tan(0.5 * camera.vertical_fov_deg * M_PI / 180.0);
  const double y = d.dot(camera.pose.up());
  if (std::abs(y) > z * tan_half) return false;
  const double x = d.dot(camera.pose.right());
  return std::abs(x) <= z * tan_half * camera.aspect;
}

PointCloud frustum_cull(const PointCloud& cloud, const Camera& camera) {
  camera.validate();
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < cloud.points.size(); ++i) {
    if (in_frustum(cloud.points[i], camera)) keep.push_back(i);
  }
  return cloud.select(keep);
}

std::vector<std::size_t> sample_indices(std::size_t n, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio <= 1.0)) {
    throw InvalidArgument("downsample ratio must lie in (0, 1]");
  }
  const std::size_t k = std::min(n, ceil_count(ratio, n));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (k == n) return idx;
  // Partial Fisher-Yates: the first k slots become the sample.
  Rng rng(seed);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

PointCloud downsample(const PointCloud& cloud, double ratio, std::uint64_t seed) {
  return cloud.select(sample_indices(cloud.size(), ratio, seed));
}

namespace {

// Sum and max of nearest-neighbor distances from each point of `from` to `to`.
struct DirectedStats {
  double sum = 0.0;
  double max = 0.0;
};

DirectedStats directed(const std::vector<Vec3>& from, const std::vector<Vec3>& to) {
  KdTree tree(to);
  DirectedStats s;
  for (const auto& p : from) {
    const double d = std::sqrt(tree.nearest(p).squared_distance);
    s.sum += d;
    s.max = std::max(s.max, d);
  }
  return s;
}

std::pair<std::vector<Vec3>, std::vector<Vec3>> maybe_normalize(
    const PointCloud& p, const PointCloud& q, const MetricOptions& options) {
  if (!options.normalize) return {p.points, q.points};
  Aabb box = bounding_box(p.points);
  const Aabb qb = bounding_box(q.points);
  box.min = box.min.cwiseMin(qb.min);
  box.max = box.max.cwiseMax(qb.max);
  const double extent = (box.max - box.min).maxCoeff();
  const double scale = extent > 0.0 ? 1.0 / extent : 1.0;
  auto apply = [&](const std::vector<Vec3>& pts) {
    std::vector<Vec3> out;
    out.reserve(pts.size());
    for (const auto& v : pts) out.push_back((v - box.min) * scale);
    return out;
  };
  return {apply(p.points), apply(q.points)};
}

void require_non_empty(const std::vector<Vec3>& p, const std::vector<Vec3>& q,
                       const char* what) {
  if (p.empty() || q.empty()) {
    throw InvalidArgument(std::string(what) + ": empty input");
  }
}

}  // namespace

double chamfer_distance(const std::vector<Vec3>& p, const std::vector<Vec3>& q) {
  require_non_empty(p, q, "chamfer_distance");
  const auto pq = directed(p, q);
  const auto qp = directed(q, p);
  return pq.sum / static_cast<double>(p.size()) + qp.sum / static_cast<double>(q.size());
}

double hausdorff_distance(const std::vector<Vec3>& p, const std::vector<Vec3>& q) {
  require_non_empty(p, q, "hausdorff_distance");
  return std::max(directed(p, q).max, directed(q, p).max);
}

double chamfer_distance(const PointCloud& p, const PointCloud& q,
                        const MetricOptions& options) {
  require_non_empty(p.points, q.points, "chamfer_distance");
  const auto [a, b] = maybe_normalize(p, q, options);
  return chamfer_distance(a, b);
}

double hausdorff_distance(const PointCloud& p, const PointCloud& q,
                          const MetricOptions& options) {
  require_non_empty(p.points, q.points, "hausdorff_distance");
  const auto [a, b] = maybe_normalize(p, q, options);
  return hausdorff_distance(a, b);
}

CloudDistances cloud_distances(const PointCloud& p, const PointCloud& q,
                               const MetricOptions& options) {
  require_non_empty(p.points, q.points, "cloud_distances");
  const auto [a, b] = maybe_normalize(p, q, options);
  const auto ab = directed(a, b);
  const auto ba = directed(b, a);
  return {ab.sum / static_cast<double>(a.size()) + ba.sum / static_cast<double>(b.size()),
          std::max(ab.max, ba.max)};
}

}  // namespace iscom
