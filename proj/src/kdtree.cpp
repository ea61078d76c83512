#include "iscom/kdtree.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

namespace iscom {

namespace {
constexpr std::size_t kLeafSize = 8;
constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
}  // namespace

KdTree::KdTree(const std::vector<Vec3>& points) : points_(points) {
  order_.resize(points.size());
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  if (!points.empty()) {
    nodes_.reserve(2 * points.size() / kLeafSize + 1);
    build(0, points.size(), 0);
  }
}

std::size_t KdTree::build(std::size_t begin, std::size_t end, int depth) {
  const std::size_t id = nodes_.size();
  nodes_.push_back({begin, end, -1, 0.0, kNone, kNone});
  if (end - begin <= kLeafSize) return id;

  Vec3 lo = points_[order_[begin]], hi = lo;
  for (std::size_t i = begin; i < end; ++i) {
    lo = lo.cwiseMin(points_[order_[i]]);
    hi = hi.cwiseMax(points_[order_[i]]);
  }
  int axis;
  (hi - lo).maxCoeff(&axis);
  if (hi[axis] == lo[axis]) return id;  // all coincident

  const std::size_t mid = begin + (end - begin) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid,
                   order_.begin() + end, [&](std::size_t a, std::size_t b) {
                     return points_[a][axis] < points_[b][axis];
                   });
  const double split = points_[order_[mid]][axis];
  nodes_[id].axis = axis;
  nodes_[id].split = split;
  const std::size_t left = build(begin, mid, depth + 1);
  const std::size_t right = build(mid, end, depth + 1);
  nodes_[id].left = left;
  nodes_[id].right = right;
  return id;
}

KdTree::Hit KdTree::nearest(const Vec3& query) const {
  if (points_.empty()) throw InvalidArgument("KdTree::nearest on empty tree");
  Hit best{kNone, std::numeric_limits<double>::infinity()};
  search(0, query, best);
  return best;
}

void KdTree::search(std::size_t node_id, const Vec3& q, Hit& best) const {
  const Node& node = nodes_[node_id];
  if (node.axis < 0) {
    for (std::size_t i = node.begin; i < node.end; ++i) {
      const std::size_t idx = order_[i];
      const double d = (points_[idx] - q).squaredNorm();
      if (d < best.squared_distance ||
          (d == best.squared_distance && idx < best.index)) {
        best = {idx, d};
      }
    }
    return;
  }
  // Left holds coordinates <= split, right holds >= split.
  const double delta = q[node.axis] - node.split;
  const std::size_t first = delta <= 0 ? node.left : node.right;
  const std::size_t second = delta <= 0 ? node.right : node.left;
  search(first, q, best);
  // <= keeps equal-distance candidates reachable for the index tie-break.
  if (delta * delta <= best.squared_distance) search(second, q, best);
}

}  // namespace iscom
