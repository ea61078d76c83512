#ifndef ISCOM_ROI_HPP
#define ISCOM_ROI_HPP

#include <cstdint>
#include <map>
#include <memory>
#include <vector>

#include "iscom/cloud.hpp"
#include "json.hpp"

namespace iscom::roi {

/// Recent viewer poses, oldest first, strictly increasing timestamps.
struct PoseHistory {
  std::vector<Pose> samples;

  void validate() const;
};

/// Extrapolates future viewer poses from a history window.
class PosePredictor {
 public:
  virtual ~PosePredictor() = default;
  virtual std::vector<Pose> predict(const PoseHistory& history, std::size_t horizon) const = 0;
};

/// Constant linear velocity and constant angular velocity over the last
/// sampled interval.
class ConstantVelocityPredictor : public PosePredictor {
 public:
  std::vector<Pose> predict(const PoseHistory& history, std::size_t horizon) const override;
};

std::vector<Pose> predict_pose(const PoseHistory& history, std::size_t horizon);

/// Per-point motion of a frame, meters per frame.
struct FlowField {
  std::vector<Vec3> vectors;
};

class FlowEstimator {
 public:
  virtual ~FlowEstimator() = default;
  virtual FlowField estimate(const PointCloud& prev, const PointCloud& curr) const = 0;
};

/// Each point of `curr` minus its exact nearest neighbor in `prev`.
class NearestNeighborFlow : public FlowEstimator {
 public:
  FlowField estimate(const PointCloud& prev, const PointCloud& curr) const override;
};

FlowField estimate_flow(const PointCloud& prev, const PointCloud& curr);

/// Mean flow magnitude of the points in each block.
std::map<std::int64_t, double> dynamic_saliency(const BlockGrid& grid, const FlowField& flow);

struct CameraIntrinsics {
  double vertical_fov_deg = 70.0;
  double aspect = 16.0 / 9.0;
  double near = 0.1;
  double far = 12.0;
};

enum class KeepMode {
  kBlockCount,  // keep ceil(fraction * B) blocks
  kPointCount,  // keep top blocks until ceil(fraction * N) points are covered
};

struct RoiConfig {
  double coarse_keep_fraction = 0.60;
  KeepMode keep_mode = KeepMode::kBlockCount;
  double beta = 0.5;
  double lambda = 0.35;
  std::size_t neighbors = 6;  // R
  double coarse_cell_size = 0.5;
  double fine_cell_size = 0.25;
  int sub_bins = 2;
  double r_min = 0.1;
  double r_max = 1.0;
  std::size_t history_length = 8;  // k

  void validate() const;
};

struct CoarseResult {
  PointCloud cloud;                        // coarse ROI set
  std::vector<std::size_t> source_indices;  // positions of `cloud` points in the input frame
  FlowField flow;                           // flow of `cloud` points
  std::size_t frustum_points = 0;
  std::size_t total_blocks = 0;
  std::vector<std::int64_t> kept_blocks;
  std::map<std::int64_t, double> dynamic;
  Pose predicted_pose;
  bool empty_frustum = false;
};

/// Predict pose -> frustum cull -> partition -> flow -> dynamic saliency ->
/// keep the most dynamic blocks. Ties in the ranking go to the lower block id.
CoarseResult coarse_select(const PointCloud& frame, const PointCloud& prev_frame,
                           const PoseHistory& history, const RoiConfig& cfg,
                           const CameraIntrinsics& intrinsics,
                           const PosePredictor& predictor = ConstantVelocityPredictor{},
                           const FlowEstimator& flow_estimator = NearestNeighborFlow{});

/// beta / ln(max(distance, e)) + (1 - beta) * cos(angle between the view
/// direction and the eye-to-block vector).
double viewpoint_descriptor(const Vec3& block_center, const Vec3& viewpoint,
                            const Vec3& view_direction, double beta);

struct BlockFeatures {
  std::vector<double> geometry;  // occupancy over sub_bins^3 sub-cells, sums to 1
  std::vector<double> texture;   // 8-bin luminance histogram, zero without color

  std::vector<double> concatenated() const;
};

BlockFeatures block_features(const PointCloud& cloud, const std::vector<std::size_t>& indices,
                             const Vec3& cell_min, double cell_size, int sub_bins);

/// sum_k (a_k - b_k)^2 / (a_k + b_k + 1e-8)
double chi_square(const std::vector<double>& a, const std::vector<double>& b);

/// Geometric texture distinctiveness of a block against its neighbors, in [0, 1).
double texture_descriptor(const BlockFeatures& block, const std::vector<BlockFeatures>& neighbors,
                          double lambda);

struct SaliencyMap {
  std::vector<std::int64_t> block_ids;
  std::vector<Vec3> centers;
  std::vector<double> dynamic;
  std::vector<double> viewpoint;
  std::vector<double> texture;
  std::vector<double> static_;
  double beta = 0.5;
  double lambda = 0.35;
  std::size_t neighbors = 6;

  nlohmann::json to_json() const;
};

struct FineResult {
  PointCloud cloud;
  std::vector<std::size_t> source_indices;  // positions in the coarse cloud
  SaliencyMap saliency;
  std::vector<double> ratios;  // per block, aligned with saliency.block_ids
};

/// Static-saliency driven adaptive downsampling of the coarse ROI. Output
/// keeps the input point order. `flow`, when given, annotates `coarse` and
/// only feeds the exported saliency map.
FineResult fine_select(const PointCloud& coarse, const Vec3& viewpoint, const Vec3& view_direction,
                       const RoiConfig& cfg, std::uint64_t seed,
                       const FlowField* flow = nullptr);

struct RoiResult {
  PointCloud cloud;
  std::vector<std::size_t> source_indices;  // positions of `cloud` points in the frame
  CoarseResult coarse;
  FineResult fine;
};

/// Both stages back to back.
RoiResult select_roi(const PointCloud& frame, const PointCloud& prev_frame,
                     const PoseHistory& history, const RoiConfig& cfg,
                     const CameraIntrinsics& intrinsics, std::uint64_t seed);

}  // namespace iscom::roi

#endif  // ISCOM_ROI_HPP
