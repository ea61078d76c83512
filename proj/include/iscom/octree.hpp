#ifndef ISCOM_OCTREE_HPP
#define ISCOM_OCTREE_HPP

#include <cstdint>
#include <vector>

#include "iscom/cloud.hpp"

namespace iscom::octree {

inline constexpr int kMaxDepth = 16;
inline constexpr std::size_t kHeaderBytes = 17;  // min corner f32 x3, edge f32, depth u8

struct Bounds {
  Vec3 min = Vec3::Zero();
  double edge = 1.0;  // cube side
};

/// Geometry-only octree stream: min corner (f32 x3), cube edge (f32), depth
/// (u8), then one occupancy byte per occupied internal node in breadth-first
/// order. Child i covers the octant with x = bit 0, y = bit 1, z = bit 2.
std::vector<std::uint8_t> encode(const PointCloud& cloud, int depth);

/// Centers of the occupied leaves.
PointCloud decode(const std::vector<std::uint8_t>& bytes);

/// Cube used for a cloud: its bounding box min and largest extent, as stored.
Bounds cube_bounds(const PointCloud& cloud);

/// Side length of one leaf cell at `depth`.
double leaf_size(const Bounds& b, int depth);

}  // namespace iscom::octree

#endif  // ISCOM_OCTREE_HPP
