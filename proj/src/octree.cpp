#include "iscom/octree.hpp"

#include <algorithm>
#include <cmath>

#include "iscom/model_io.hpp"

namespace iscom::octree {

namespace {

std::uint64_t interleave(std::uint32_t x, std::uint32_t y, std::uint32_t z, int depth) {
  std::uint64_t code = 0;
  for (int b = depth - 1; b >= 0; --b) {
    const std::uint64_t child = ((x >> b) & 1u) | ((y >> b) & 1u) << 1 | ((z >> b) & 1u) << 2;
    code = code << 3 | child;
  }
  return code;
}

void check_depth(int depth) {
  if (depth < 1 || depth > kMaxDepth) {
    throw InvalidArgument("octree depth must be in [1, " + std::to_string(kMaxDepth) + "], got " +
                          std::to_string(depth));
  }
}

}  // namespace

Bounds cube_bounds(const PointCloud& cloud) {
  Bounds b;
  if (cloud.empty()) return b;
  const Aabb box = bounding_box(cloud.points);
  // Round to what the header can hold, widening so every point stays inside.
  for (int k = 0; k < 3; ++k) {
    float m = static_cast<float>(box.min[k]);
    if (static_cast<double>(m) > box.min[k]) m = std::nextafter(m, -INFINITY);
    b.min[k] = m;
  }
  double edge = 0.0;
  for (int k = 0; k < 3; ++k) edge = std::max(edge, box.max[k] - b.min[k]);
  if (edge <= 0.0) edge = 1.0;
  float e = static_cast<float>(edge);
  if (static_cast<double>(e) < edge) e = std::nextafter(e, INFINITY);
  b.edge = e;
  return b;
}

double leaf_size(const Bounds& b, int depth) { return b.edge / std::ldexp(1.0, depth); }

std::vector<std::uint8_t> encode(const PointCloud& cloud, int depth) {
  check_depth(depth);
  cloud.validate();
  const Bounds b = cube_bounds(cloud);
  io::ByteWriter w;
  for (int k = 0; k < 3; ++k) w.f32(static_cast<float>(b.min[k]));
  w.f32(static_cast<float>(b.edge));
  w.u8(static_cast<std::uint8_t>(depth));
  if (cloud.empty()) {
    w.u8(0);
    return std::move(w.bytes());
  }

  const auto cells = static_cast<std::uint32_t>(1u << depth);
  const double inv = static_cast<double>(cells) / b.edge;
  std::vector<std::uint64_t> leaves;
  leaves.reserve(cloud.size());
  for (const auto& p : cloud.points) {
    std::uint32_t c[3];
    for (int k = 0; k < 3; ++k) {
      const double u = std::floor((p[k] - b.min[k]) * inv);
      c[k] = static_cast<std::uint32_t>(std::clamp(u, 0.0, static_cast<double>(cells - 1)));
    }
    leaves.push_back(interleave(c[0], c[1], c[2], depth));
  }
  std::sort(leaves.begin(), leaves.end());
  leaves.erase(std::unique(leaves.begin(), leaves.end()), leaves.end());

  // Sorted Morton prefixes enumerate each level in breadth-first order.
  for (int level = 0; level < depth; ++level) {
    const int child_shift = 3 * (depth - level - 1);
    std::size_t i = 0;
    while (i < leaves.size()) {
      const std::uint64_t node = leaves[i] >> (child_shift + 3);
      std::uint8_t byte = 0;
      while (i < leaves.size() && (leaves[i] >> (child_shift + 3)) == node) {
        byte |= static_cast<std::uint8_t>(1u << ((leaves[i] >> child_shift) & 7u));
        ++i;
      }
      w.u8(byte);
    }
  }
  return std::move(w.bytes());
}

PointCloud decode(const std::vector<std::uint8_t>& bytes) {
  io::ByteReader r(bytes);
  Bounds b;
  for (int k = 0; k < 3; ++k) b.min[k] = r.f32();
  b.edge = r.f32();
  const int depth = r.u8();
  check_depth(depth);
  if (!(b.edge > 0.0) || !b.min.allFinite()) throw InvalidArgument("octree: invalid bounds header");

  struct Node {
    std::uint32_t x, y, z;
  };
  std::vector<Node> level{{0, 0, 0}};
  for (int d = 0; d < depth && !level.empty(); ++d) {
    std::vector<Node> next;
    for (const Node& n : level) {
      const std::uint8_t byte = r.u8();
      for (std::uint32_t c = 0; c < 8; ++c) {
        if (!(byte >> c & 1u)) continue;
        next.push_back({n.x << 1 | (c & 1u), n.y << 1 | (c >> 1 & 1u), n.z << 1 | (c >> 2 & 1u)});
      }
    }
    level = std::move(next);
  }
  if (!r.at_end()) throw InvalidArgument("octree: trailing bytes in stream");

  PointCloud out;
  const double leaf = leaf_size(b, depth);
  out.points.reserve(level.size());
  for (const Node& n : level) {
    out.points.push_back(b.min + leaf * Vec3(n.x + 0.5, n.y + 0.5, n.z + 0.5));
  }
  return out;
}

}  // namespace iscom::octree
