#ifndef ISCOM_CLOUD_HPP
#define ISCOM_CLOUD_HPP

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "iscom/core.hpp"

namespace iscom {

using Rgb = std::array<std::uint8_t, 3>;

/// One frame of point cloud video. Coordinates are meters.
struct PointCloud {
  std::vector<Vec3> points;
  std::optional<std::vector<Rgb>> colors;
  std::uint32_t frame_index = 0;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  bool has_color() const { return colors.has_value(); }

  /// Throws InvalidArgument when a coordinate is non-finite or the color
  /// list does not match the point list.
  void validate() const;

  /// New cloud holding the given subset (colors carried along).
  PointCloud select(const std::vector<std::size_t>& indices) const;

  void append(const PointCloud& other);
};

/// Viewer state: position in meters, unit orientation, timestamp in seconds.
struct Pose {
  Vec3 position = Vec3::Zero();
  Quat orientation = Quat::Identity();
  double timestamp = 0.0;

  void validate() const;

  /// Camera looks along +z of its local frame, +y is up, +x is right.
  Vec3 forward() const { return orientation * Vec3::UnitZ(); }
  Vec3 up() const { return orientation * Vec3::UnitY(); }
  Vec3 right() const { return orientation * Vec3::UnitX(); }
};

struct Camera {
  Pose pose;
  double vertical_fov_deg = 90.0;
  double aspect = 1.0;
  double near = 0.1;
  double far = 100.0;

  void validate() const;
};

/// Uniform cubic partition of space. Only occupied cells are stored.
struct BlockGrid {
  Vec3 origin = Vec3::Zero();
  double cell_size = 1.0;
  std::array<std::int64_t, 3> dims{1, 1, 1};
  /// Linear cell id -> indices of the points it holds, ordered by id.
  std::map<std::int64_t, std::vector<std::size_t>> blocks;

  std::int64_t cell_id(std::int64_t ix, std::int64_t iy, std::int64_t iz) const {
    return ix + dims[0] * (iy + dims[1] * iz);
  }
  std::array<std::int64_t, 3> cell_coords(std::int64_t id) const;
  Vec3 cell_min(std::int64_t id) const;
  Vec3 cell_center(std::int64_t id) const;
  std::size_t point_count() const;
};

/// Assigns each point to the half-open cell [lo, lo + cell_size) of a grid
/// anchored at the bounding-box minimum. Points on the max face of the box
/// are clamped into the last cell.
BlockGrid partition(const PointCloud& cloud, double cell_size);

/// Points inside the six-plane view frustum, boundary inclusive.
PointCloud frustum_cull(const PointCloud& cloud, const Camera& camera);
bool in_frustum(const Vec3& p, const Camera& camera);

/// Seeded uniform sampling without replacement of ceil(ratio * N) points.
/// Selected points keep their input order.
PointCloud downsample(const PointCloud& cloud, double ratio, std::uint64_t seed);
std::vector<std::size_t> sample_indices(std::size_t n, double ratio, std::uint64_t seed);

struct MetricOptions {
  /// Scale both clouds into the unit cube of their joint bounding box first.
  bool normalize = false;
};

/// Symmetric Chamfer distance: sum of both mean nearest-neighbor distances.
double chamfer_distance(const PointCloud& p, const PointCloud& q,
                        const MetricOptions& options = {});
double chamfer_distance(const std::vector<Vec3>& p, const std::vector<Vec3>& q);

/// Symmetric Hausdorff distance.
double hausdorff_distance(const PointCloud& p, const PointCloud& q,
                          const MetricOptions& options = {});
double hausdorff_distance(const std::vector<Vec3>& p, const std::vector<Vec3>& q);

/// Both metrics from one pair of nearest-neighbor passes.
struct CloudDistances {
  double chamfer = 0.0;
  double hausdorff = 0.0;
};
CloudDistances cloud_distances(const PointCloud& p, const PointCloud& q,
                               const MetricOptions& options = {});

struct Aabb {
  Vec3 min;
  Vec3 max;
};
Aabb bounding_box(const std::vector<Vec3>& points);

}  // namespace iscom

#endif  // ISCOM_CLOUD_HPP
