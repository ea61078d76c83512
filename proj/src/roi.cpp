#include "iscom/roi.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "iscom/kdtree.hpp"

namespace iscom::roi {

void PoseHistory::validate() const {
  for (const auto& p : samples) p.validate();
  for (std::size_t i = 1; i < samples.size(); ++i) {
    if (!(samples[i].timestamp > samples[i - 1].timestamp)) {
      throw InvalidArgument("pose history timestamps must be strictly increasing");
    }
  }
}

std::vector<Pose> ConstantVelocityPredictor::predict(const PoseHistory& history,
                                                     std::size_t horizon) const {
  if (history.samples.size() < 2) {
    throw InvalidArgument("pose prediction needs at least two samples");
  }
  history.validate();
  const Pose& prev = history.samples[history.samples.size() - 2];
  const Pose& last = history.samples.back();
  const double dt = last.timestamp - prev.timestamp;
  const Vec3 step = last.position - prev.position;

  Quat rel = last.orientation * prev.orientation.conjugate();
  if (rel.w() < 0) rel.coeffs() = -rel.coeffs();  // shortest arc
  const Eigen::AngleAxisd rel_aa(rel);

  std::vector<Pose> out;
  out.reserve(horizon);
  for (std::size_t j = 1; j <= horizon; ++j) {
    const double s = static_cast<double>(j);
    Pose p;
    p.position = last.position + s * step;
    p.orientation = Quat(Eigen::AngleAxisd(s * rel_aa.angle(), rel_aa.axis())) * last.orientation;
    p.orientation.normalize();
    p.timestamp = last.timestamp + s * dt;
    out.push_back(p);
  }
  return out;
}

std::vector<Pose> predict_pose(const PoseHistory& history, std::size_t horizon) {
  return ConstantVelocityPredictor{}.predict(history, horizon);
}

FlowField NearestNeighborFlow::estimate(const PointCloud& prev, const PointCloud& curr) const {
  FlowField flow;
  if (prev.empty() || curr.empty()) {
    throw InvalidArgument("flow estimation needs two non-empty frames");
  }
  KdTree tree(prev.points);
  flow.vectors.reserve(curr.size());
  for (const auto& p : curr.points) {
    flow.vectors.push_back(p - prev.points[tree.nearest(p).index]);
  }
  return flow;
}

FlowField estimate_flow(const PointCloud& prev, const PointCloud& curr) {
  return NearestNeighborFlow{}.estimate(prev, curr);
}

std::map<std::int64_t, double> dynamic_saliency(const BlockGrid& grid, const FlowField& flow) {
  std::map<std::int64_t, double> out;
  for (const auto& [id, idx] : grid.blocks) {
    double sum = 0.0;
    for (std::size_t i : idx) {
      if (i >= flow.vectors.size()) throw InvalidArgument("flow field does not cover the grid");
      sum += flow.vectors[i].norm();
    }
    out[id] = sum / static_cast<double>(idx.size());
  }
  return out;
}

void RoiConfig::validate() const {
  if (!(coarse_keep_fraction > 0.0 && coarse_keep_fraction <= 1.0)) {
    throw InvalidArgument("coarse_keep_fraction must lie in (0, 1]");
  }
  if (!(0.0 <= r_min && r_min <= r_max && r_max <= 1.0)) {
    throw InvalidArgument("require 0 <= r_min <= r_max <= 1");
  }
  if (!(beta >= 0.0 && beta <= 1.0)) throw InvalidArgument("beta must lie in [0, 1]");
  if (!(coarse_cell_size > 0.0 && fine_cell_size > 0.0)) {
    throw InvalidArgument("cell sizes must be positive");
  }
  if (neighbors < 1) throw InvalidArgument("neighbor count R must be at least 1");
  if (sub_bins < 1) throw InvalidArgument("sub_bins must be positive");
}

CoarseResult coarse_select(const PointCloud& frame, const PointCloud& prev_frame,
                           const PoseHistory& history, const RoiConfig& cfg,
                           const CameraIntrinsics& intrinsics, const PosePredictor& predictor,
                           const FlowEstimator& flow_estimator) {
  cfg.validate();
  CoarseResult result;
  result.cloud.frame_index = frame.frame_index;
  result.predicted_pose = predictor.predict(history, std::max<std::size_t>(1, cfg.history_length))
                              .front();

  Camera camera;
  camera.pose = result.predicted_pose;
  camera.vertical_fov_deg = intrinsics.vertical_fov_deg;
  camera.aspect = intrinsics.aspect;
  camera.near = intrinsics.near;
  camera.far = intrinsics.far;
  camera.validate();

  std::vector<std::size_t> visible;
  for (std::size_t i = 0; i < frame.size(); ++i) {
    if (in_frustum(frame.points[i], camera)) visible.push_back(i);
  }
  result.frustum_points = visible.size();
  if (visible.empty()) {
    result.empty_frustum = true;
    return result;
  }
  const PointCloud culled = frame.select(visible);
  const PointCloud& reference = prev_frame.empty() ? culled : prev_frame;
  const FlowField flow = flow_estimator.estimate(reference, culled);
  const BlockGrid grid = partition(culled, cfg.coarse_cell_size);
  result.dynamic = dynamic_saliency(grid, flow);
  result.total_blocks = grid.blocks.size();

  std::vector<std::int64_t> ranked;
  ranked.reserve(grid.blocks.size());
  for (const auto& [id, _] : grid.blocks) ranked.push_back(id);
  // Map iteration is ascending by id, so a stable sort breaks ties by id.
  std::stable_sort(ranked.begin(), ranked.end(), [&](std::int64_t a, std::int64_t b) {
    return result.dynamic.at(a) > result.dynamic.at(b);
  });

  if (cfg.keep_mode == KeepMode::kBlockCount) {
    ranked.resize(ceil_count(cfg.coarse_keep_fraction, ranked.size()));
  } else {
    const std::size_t target = ceil_count(cfg.coarse_keep_fraction, culled.size());
    std::size_t covered = 0, keep = 0;
    while (keep < ranked.size() && covered < target) covered += grid.blocks.at(ranked[keep++]).size();
    ranked.resize(keep);
  }
  result.kept_blocks = ranked;
  std::sort(result.kept_blocks.begin(), result.kept_blocks.end());

  std::vector<std::size_t> local;
  for (std::int64_t id : result.kept_blocks) {
    const auto& idx = grid.blocks.at(id);
    local.insert(local.end(), idx.begin(), idx.end());
  }
  std::sort(local.begin(), local.end());
  result.cloud = culled.select(local);
  result.source_indices.reserve(local.size());
  result.flow.vectors.reserve(local.size());
  for (std::size_t i : local) {
    result.source_indices.push_back(visible[i]);
    result.flow.vectors.push_back(flow.vectors[i]);
  }
  return result;
}

double viewpoint_descriptor(const Vec3& block_center, const Vec3& viewpoint,
                            const Vec3& view_direction, double beta) {
  const double wn = view_direction.norm();
  if (!(wn > 0.0)) throw InvalidArgument("view direction must be non-zero");
  const Vec3 to_block = block_center - viewpoint;
  const double dist = to_block.norm();
  const double phi = std::max(dist, M_E);
  const double cos_theta = dist > 0.0 ? to_block.dot(view_direction) / (dist * wn) : 1.0;
  return beta / std::log(phi) + (1.0 - beta) * cos_theta;
}

std::vector<double> BlockFeatures::concatenated() const {
  std::vector<double> out(geometry);
  out.insert(out.end(), texture.begin(), texture.end());
  return out;
}

BlockFeatures block_features(const PointCloud& cloud, const std::vector<std::size_t>& indices,
                             const Vec3& cell_min, double cell_size, int sub_bins) {
  if (indices.empty()) throw InvalidArgument("block_features: empty block");
  if (sub_bins < 1) throw InvalidArgument("block_features: sub_bins must be positive");
  BlockFeatures f;
  const std::size_t bins = static_cast<std::size_t>(sub_bins);
  f.geometry.assign(bins * bins * bins, 0.0);
  f.texture.assign(8, 0.0);
  const double sub = cell_size / sub_bins;
  const double w = 1.0 / static_cast<double>(indices.size());
  for (std::size_t i : indices) {
    std::size_t c[3];
    for (int a = 0; a < 3; ++a) {
      const double raw = std::floor((cloud.points[i][a] - cell_min[a]) / sub);
      c[a] = static_cast<std::size_t>(std::clamp(raw, 0.0, static_cast<double>(sub_bins - 1)));
    }
    f.geometry[c[0] + bins * (c[1] + bins * c[2])] += w;
    if (cloud.colors) {
      const auto& rgb = (*cloud.colors)[i];
      const double y = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
      f.texture[std::min<std::size_t>(7, static_cast<std::size_t>(y / 32.0))] += w;
    }
  }
  return f;
}

double chi_square(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw InvalidArgument("chi_square: histogram length mismatch");
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = a[k] - b[k];
    s += d * d / (a[k] + b[k] + 1e-8);
  }
  return s;
}

double texture_descriptor(const BlockFeatures& block, const std::vector<BlockFeatures>& neighbors,
                          double lambda) {
  if (neighbors.empty()) throw InvalidArgument("texture_descriptor needs at least one neighbor");
  const auto ti = block.concatenated();
  double acc = 0.0;
  for (const auto& nb : neighbors) {
    if (nb.geometry.size() != block.geometry.size() || nb.texture.size() != block.texture.size()) {
      throw InvalidArgument("texture_descriptor: feature length mismatch");
    }
    const double psi2 = chi_square(block.geometry, nb.geometry) +
                        lambda * chi_square(block.texture, nb.texture);
    const auto tj = nb.concatenated();
    double dist2 = 0.0;
    for (std::size_t k = 0; k < ti.size(); ++k) dist2 += (ti[k] - tj[k]) * (ti[k] - tj[k]);
    acc += psi2 / (1.0 + std::sqrt(dist2));
  }
  return 1.0 - std::exp(-acc / static_cast<double>(neighbors.size()));
}

nlohmann::json SaliencyMap::to_json() const {
  nlohmann::json blocks = nlohmann::json::array();
  for (std::size_t i = 0; i < block_ids.size(); ++i) {
    blocks.push_back({{"block_id", block_ids[i]},
                      {"center", {centers[i].x(), centers[i].y(), centers[i].z()}},
                      {"dynamic", dynamic[i]},
                      {"viewpoint", viewpoint[i]},
                      {"texture", texture[i]},
                      {"static", static_[i]}});
  }
  return {{"beta", beta}, {"lambda", lambda}, {"neighbors", neighbors}, {"blocks", blocks}};
}

FineResult fine_select(const PointCloud& coarse, const Vec3& viewpoint, const Vec3& view_direction,
                       const RoiConfig& cfg, std::uint64_t seed, const FlowField* flow) {
  cfg.validate();
  if (coarse.empty()) throw InvalidArgument("fine_select: empty coarse ROI");
  const BlockGrid grid = partition(coarse, cfg.fine_cell_size);

  FineResult result;
  SaliencyMap& map = result.saliency;
  map.beta = cfg.beta;
  map.lambda = cfg.lambda;
  map.neighbors = cfg.neighbors;
  std::vector<BlockFeatures> features;
  for (const auto& [id, idx] : grid.blocks) {
    map.block_ids.push_back(id);
    map.centers.push_back(grid.cell_center(id));
    features.push_back(block_features(coarse, idx, grid.cell_min(id), grid.cell_size, cfg.sub_bins));
    double dyn = 0.0;
    if (flow) {
      for (std::size_t i : idx) dyn += flow->vectors.at(i).norm();
      dyn /= static_cast<double>(idx.size());
    }
    map.dynamic.push_back(dyn);
  }

  const std::size_t nb = map.block_ids.size();
  for (std::size_t b = 0; b < nb; ++b) {
    map.viewpoint.push_back(viewpoint_descriptor(map.centers[b], viewpoint, view_direction, cfg.beta));
    // R nearest other blocks by center distance, ties to the lower id.
    std::vector<std::pair<double, std::size_t>> order;
    order.reserve(nb);
    for (std::size_t o = 0; o < nb; ++o) {
      if (o != b) order.emplace_back((map.centers[o] - map.centers[b]).squaredNorm(), o);
    }
    const std::size_t r = std::min<std::size_t>(cfg.neighbors, order.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(r), order.end());
    order.resize(r);
    std::vector<BlockFeatures> neigh;
    for (const auto& [d, o] : order) neigh.push_back(features[o]);
    map.texture.push_back(neigh.empty() ? 0.0 : texture_descriptor(features[b], neigh, cfg.lambda));
    map.static_.push_back(map.viewpoint.back() * map.texture.back());
  }

  const auto [lo_it, hi_it] = std::minmax_element(map.static_.begin(), map.static_.end());
  const double lo = *lo_it, hi = *hi_it;
  std::vector<std::size_t> keep;
  std::size_t b = 0;
  for (const auto& [id, idx] : grid.blocks) {
    // Constant saliency (including a single block) normalizes to 1.
    const double normalized = hi > lo ? (map.static_[b] - lo) / (hi - lo) : 1.0;
    const double r = cfg.r_min + (cfg.r_max - cfg.r_min) * normalized;
    result.ratios.push_back(r);
    if (r > 0.0) {
      for (std::size_t s : sample_indices(idx.size(), std::min(1.0, r),
                                          Rng::mix(seed, static_cast<std::uint64_t>(id)))) {
        keep.push_back(idx[s]);
      }
    }
    ++b;
  }
  std::sort(keep.begin(), keep.end());
  result.cloud = coarse.select(keep);
  result.source_indices = std::move(keep);
  return result;
}

RoiResult select_roi(const PointCloud& frame, const PointCloud& prev_frame,
                     const PoseHistory& history, const RoiConfig& cfg,
                     const CameraIntrinsics& intrinsics, std::uint64_t seed) {
  RoiResult r;
  r.coarse = coarse_select(frame, prev_frame, history, cfg, intrinsics);
  if (r.coarse.cloud.empty()) {
    r.cloud.frame_index = frame.frame_index;
    return r;
  }
  r.fine = fine_select(r.coarse.cloud, r.coarse.predicted_pose.position,
                       r.coarse.predicted_pose.forward(), cfg, seed, &r.coarse.flow);
  r.cloud = r.fine.cloud;
  r.source_indices.reserve(r.fine.source_indices.size());
  for (std::size_t i : r.fine.source_indices) r.source_indices.push_back(r.coarse.source_indices[i]);
  return r;
}

}  // namespace iscom::roi
