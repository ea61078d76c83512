#ifndef ISCOM_KDTREE_HPP
#define ISCOM_KDTREE_HPP

#include <cstddef>
#include <vector>

#include "iscom/core.hpp"

namespace iscom {

/// Static 3-d tree for exact nearest-neighbor queries. Equal distances
/// resolve to the lowest point index, so results match a linear scan.
class KdTree {
 public:
  explicit KdTree(const std::vector<Vec3>& points);

  struct Hit {
    std::size_t index;
    double squared_distance;
  };

  /// Requires a non-empty tree.
  Hit nearest(const Vec3& query) const;

  std::size_t size() const { return points_.size(); }

 private:
  struct Node {
    std::size_t begin, end;  // range in order_
    int axis;                // -1 for leaves
    double split;
    std::size_t left, right;
  };

  std::size_t build(std::size_t begin, std::size_t end, int depth);
  void search(std::size_t node, const Vec3& q, Hit& best) const;

  const std::vector<Vec3>& points_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
};

}  // namespace iscom

#endif  // ISCOM_KDTREE_HPP
