#ifndef ISCOM_ASSIGNMENT_HPP
#define ISCOM_ASSIGNMENT_HPP

#include <vector>

#include <Eigen/Core>

namespace iscom {

struct Assignment {
  std::vector<int> row_to_col;
  double cost = 0.0;
};

/// Exact minimum-cost perfect matching of a square cost matrix
/// (Hungarian method with potentials, O(n^3)).
Assignment solve_assignment(const Eigen::MatrixXd& cost);

}  // namespace iscom

#endif  // ISCOM_ASSIGNMENT_HPP
